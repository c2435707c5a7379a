use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::out_extent;

/// Residual block family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockType {
    Basic,
    Bottleneck,
}

/// Stem max-pool descriptor (present in the high-resolution architecture).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StemPool {
    pub window: usize,
    pub stride: usize,
    pub padding: usize,
}

/// Stem convolution descriptor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StemSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    #[serde(default)]
    pub pool: Option<StemPool>,
}

/// Parametric description of a residual network: stages of repeated
/// blocks between a stem convolution and a global-average-pool + single
/// fully-connected head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub block_type: BlockType,
    pub stage_widths: Vec<usize>,
    pub stage_repeats: Vec<usize>,
    /// (C, H, W) of a single input image.
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    pub stem: StemSpec,
}

impl ArchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.stage_widths.is_empty() {
            return Err(Error::config("architecture needs at least one stage"));
        }
        if self.stage_widths.len() != self.stage_repeats.len() {
            return Err(Error::config(format!(
                "stage_widths has {} entries but stage_repeats has {}",
                self.stage_widths.len(),
                self.stage_repeats.len()
            )));
        }
        if self.stage_widths.iter().any(|&w| w == 0) || self.stage_repeats.iter().any(|&r| r == 0)
        {
            return Err(Error::config("stage widths and repeats must be positive"));
        }
        if self.block_type == BlockType::Bottleneck {
            for &w in &self.stage_widths {
                if w % 4 != 0 {
                    return Err(Error::config(format!(
                        "bottleneck stage width {w} is not divisible by 4"
                    )));
                }
            }
        }
        if self.num_classes == 0 {
            return Err(Error::config("num_classes must be positive"));
        }
        if self.input_shape.iter().any(|&d| d == 0) {
            return Err(Error::config("input_shape dimensions must be positive"));
        }
        if self.stem.out_channels == 0 || self.stem.kernel == 0 || self.stem.stride == 0 {
            return Err(Error::config("stem descriptor must have positive sizes"));
        }
        Ok(())
    }
}

/// One row of the shape audit: the output size of a named layer group.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PlanRow {
    pub layer: String,
    pub output_size: [usize; 3],
}

/// Shape plan shared by the shape audit and the network builder.
#[derive(Clone, Debug, Serialize)]
pub struct NetworkPlan {
    pub rows: Vec<PlanRow>,
    pub fc_in: usize,
    pub fc_out: usize,
    /// Convolution and fully-connected layers, projection shortcuts
    /// included; batch norm, ReLU and pooling are not counted.
    pub weighted_layers: usize,
    pub final_spatial: usize,
    pub param_tensors: usize,
}

/// Compute per-stage output shapes and layer counts without allocating
/// any weights. `build_network` materializes exactly this plan.
pub fn plan_network(spec: &ArchSpec) -> Result<NetworkPlan> {
    spec.validate()?;
    let [_, in_h, in_w] = spec.input_shape;
    let mut rows = Vec::new();
    let mut weighted = 1usize; // stem conv
    let mut param_tensors = 4usize; // stem conv w/b + stem bn gamma/beta

    let mut h = out_extent(in_h, spec.stem.kernel, spec.stem.stride, spec.stem.padding)?;
    let mut w = out_extent(in_w, spec.stem.kernel, spec.stem.stride, spec.stem.padding)?;
    let mut channels = spec.stem.out_channels;
    rows.push(PlanRow { layer: "conv1".to_string(), output_size: [channels, h, w] });

    if let Some(pool) = spec.stem.pool {
        h = out_extent(h, pool.window, pool.stride, pool.padding)?;
        w = out_extent(w, pool.window, pool.stride, pool.padding)?;
        rows.push(PlanRow { layer: "pool1".to_string(), output_size: [channels, h, w] });
    }

    for (i, (&width, &repeat)) in
        spec.stage_widths.iter().zip(&spec.stage_repeats).enumerate()
    {
        let stride = if i == 0 { 1 } else { 2 };
        // stride-carrying conv is 3x3 pad 1 in both block families
        h = out_extent(h, 3, stride, 1)?;
        w = out_extent(w, 3, stride, 1)?;
        match spec.block_type {
            BlockType::Basic => {
                let first_has_proj = stride != 1 || channels != width;
                weighted += repeat * 2 + usize::from(first_has_proj);
                // 2 convs + 2 bn per block; +1 conv/bn pair for a projection
                param_tensors += repeat * 8 + usize::from(first_has_proj) * 4;
            }
            BlockType::Bottleneck => {
                weighted += repeat * 4;
                param_tensors += repeat * 16;
            }
        }
        channels = width;
        rows.push(PlanRow {
            layer: format!("ResNet{}", i + 1),
            output_size: [channels, h, w],
        });
    }

    rows.push(PlanRow { layer: "pool2".to_string(), output_size: [channels, 1, 1] });
    weighted += 1; // fc
    param_tensors += 2;
    rows.push(PlanRow {
        layer: "fc".to_string(),
        output_size: [spec.num_classes, 1, 1],
    });

    Ok(NetworkPlan {
        rows,
        fc_in: channels,
        fc_out: spec.num_classes,
        weighted_layers: weighted,
        final_spatial: h.min(w),
        param_tensors,
    })
}

/// Built-in architectures: the two full-size reference configurations and
/// a desk-scale instantiation small enough for exhaustive gradient checks.
pub fn named_arch(name: &str) -> Result<ArchSpec> {
    match name {
        "table1" => Ok(ArchSpec {
            block_type: BlockType::Basic,
            stage_widths: vec![16, 32, 64],
            stage_repeats: vec![18, 18, 18],
            input_shape: [3, 32, 32],
            num_classes: 10,
            stem: StemSpec { out_channels: 16, kernel: 3, stride: 1, padding: 1, pool: None },
        }),
        "table3" => Ok(ArchSpec {
            block_type: BlockType::Bottleneck,
            stage_widths: vec![256, 512, 1024, 2048],
            stage_repeats: vec![3, 4, 23, 3],
            input_shape: [3, 224, 224],
            num_classes: 1000,
            stem: StemSpec {
                out_channels: 64,
                kernel: 7,
                stride: 2,
                padding: 3,
                pool: Some(StemPool { window: 3, stride: 2, padding: 1 }),
            },
        }),
        "minimal" => Ok(ArchSpec {
            block_type: BlockType::Basic,
            stage_widths: vec![4, 8, 16],
            stage_repeats: vec![1, 1, 1],
            input_shape: [3, 8, 8],
            num_classes: 10,
            stem: StemSpec { out_channels: 4, kernel: 3, stride: 1, padding: 1, pool: None },
        }),
        other => Err(Error::config(format!(
            "unknown architecture name '{other}' (expected table1, table3 or minimal)"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table1_shape_audit_matches_reference() {
        let plan = plan_network(&named_arch("table1").unwrap()).unwrap();
        let sizes: Vec<(&str, [usize; 3])> =
            plan.rows.iter().map(|r| (r.layer.as_str(), r.output_size)).collect();
        assert_eq!(
            sizes,
            vec![
                ("conv1", [16, 32, 32]),
                ("ResNet1", [16, 32, 32]),
                ("ResNet2", [32, 16, 16]),
                ("ResNet3", [64, 8, 8]),
                ("pool2", [64, 1, 1]),
                ("fc", [10, 1, 1]),
            ]
        );
        assert_eq!(plan.fc_in, 64);
        assert_eq!(plan.fc_out, 10);
        // stem + 18*2 + (18*2+1) + (18*2+1) + fc
        assert_eq!(plan.weighted_layers, 112);
    }

    #[test]
    fn table3_shape_audit_matches_reference() {
        let plan = plan_network(&named_arch("table3").unwrap()).unwrap();
        let sizes: Vec<(&str, [usize; 3])> =
            plan.rows.iter().map(|r| (r.layer.as_str(), r.output_size)).collect();
        assert_eq!(
            sizes,
            vec![
                ("conv1", [64, 112, 112]),
                ("pool1", [64, 56, 56]),
                ("ResNet1", [256, 56, 56]),
                ("ResNet2", [512, 28, 28]),
                ("ResNet3", [1024, 14, 14]),
                ("ResNet4", [2048, 7, 7]),
                ("pool2", [2048, 1, 1]),
                ("fc", [1000, 1, 1]),
            ]
        );
        assert_eq!(plan.fc_in, 2048);
        assert_eq!(plan.fc_out, 1000);
        // stem + 4 convs per bottleneck block (projection included) + fc
        assert_eq!(plan.weighted_layers, 1 + 4 * (3 + 4 + 23 + 3) + 1);
    }

    #[test]
    fn spec_round_trips_through_json() {
        let spec = named_arch("table3").unwrap();
        let json = serde_json::to_string(&spec).unwrap();
        let back: ArchSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(spec, back);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = named_arch("minimal").unwrap();
        spec.stage_repeats.pop();
        assert!(plan_network(&spec).is_err());

        let mut spec = named_arch("minimal").unwrap();
        spec.num_classes = 0;
        assert!(plan_network(&spec).is_err());

        let mut spec = named_arch("table3").unwrap();
        spec.stage_widths[0] = 255; // not divisible by 4
        assert!(plan_network(&spec).is_err());

        // stem kernel larger than the padded input
        let mut spec = named_arch("minimal").unwrap();
        spec.stem.kernel = 64;
        assert!(plan_network(&spec).is_err());
    }
}
