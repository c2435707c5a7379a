use crate::error::{Error, Result};
use crate::layers::{
    plan_network, ArchSpec, AvgPool2d, BasicBlock, BatchNorm, BlockType, BottleneckBlock, Conv2d,
    Layer, Linear, MaxPool2d, Mode, NetworkPlan, Param, Relu,
};
use crate::rng::{rng_from, STREAM_INIT};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
enum Block {
    Basic(BasicBlock),
    Bottleneck(BottleneckBlock),
}

impl Block {
    fn as_layer(&mut self) -> &mut dyn Layer {
        match self {
            Block::Basic(b) => b,
            Block::Bottleneck(b) => b,
        }
    }

    fn kink_gap(&self) -> f64 {
        match self {
            Block::Basic(b) => b.kink_gap(),
            Block::Bottleneck(b) => b.kink_gap(),
        }
    }
}

/// An ordered residual network generated from an `ArchSpec`: stem conv +
/// BN + ReLU (+ optional max pool), the block stages, global average
/// pooling and one fully-connected layer mapping to class scores.
#[derive(Clone, Debug)]
pub struct Network {
    spec: ArchSpec,
    plan: NetworkPlan,
    stem_conv: Conv2d,
    stem_bn: BatchNorm,
    stem_relu: Relu,
    stem_pool: Option<MaxPool2d>,
    blocks: Vec<(String, Block)>,
    global_pool: AvgPool2d,
    fc: Linear,
}

/// Materialize the network described by `spec`; weights are drawn from a
/// zero-mean Gaussian scaled by sqrt(2 / fan_in), seeded by `seed`.
pub fn build_network(spec: &ArchSpec, seed: u64) -> Result<Network> {
    let plan = plan_network(spec)?;
    let mut rng = rng_from(seed, STREAM_INIT, 0);

    let stem_conv = Conv2d::new(
        spec.input_shape[0],
        spec.stem.out_channels,
        spec.stem.kernel,
        spec.stem.stride,
        spec.stem.padding,
        &mut rng,
    );
    let stem_bn = BatchNorm::new(spec.stem.out_channels);
    let stem_pool = spec.stem.pool.map(|p| MaxPool2d::new(p.window, p.stride, p.padding));

    let mut blocks = Vec::new();
    let mut in_channels = spec.stem.out_channels;
    for (i, (&width, &repeat)) in spec.stage_widths.iter().zip(&spec.stage_repeats).enumerate() {
        for j in 0..repeat {
            let stride = if i > 0 && j == 0 { 2 } else { 1 };
            let name = format!("stage{}.block{}", i + 1, j + 1);
            let block = match spec.block_type {
                BlockType::Basic => {
                    Block::Basic(BasicBlock::new(in_channels, width, stride, &mut rng))
                }
                BlockType::Bottleneck => Block::Bottleneck(BottleneckBlock::new(
                    in_channels,
                    width / 4,
                    width,
                    stride,
                    &mut rng,
                )),
            };
            blocks.push((name, block));
            in_channels = width;
        }
    }

    let global_pool = AvgPool2d::new(plan.final_spatial, plan.final_spatial, 0);
    let fc = Linear::new(plan.fc_in, plan.fc_out, &mut rng);

    Ok(Network {
        spec: spec.clone(),
        plan,
        stem_conv,
        stem_bn,
        stem_relu: Relu::new(),
        stem_pool,
        blocks,
        global_pool,
        fc,
    })
}

impl Network {
    pub fn spec(&self) -> &ArchSpec {
        &self.spec
    }

    pub fn plan(&self) -> &NetworkPlan {
        &self.plan
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    /// Forward pass over a batch: (N, C, H, W) -> (N, num_classes).
    pub fn forward(&mut self, input: &Tensor, mode: Mode) -> Result<Tensor> {
        if input.rank() != 4 {
            return Err(Error::shape(format!(
                "network input must be (N,C,H,W), got {:?}",
                input.shape()
            )));
        }
        let [c, h, w] = self.spec.input_shape;
        if input.dim(1) != c || input.dim(2) != h || input.dim(3) != w {
            return Err(Error::shape(format!(
                "network built for input {:?}, got {:?}",
                self.spec.input_shape,
                &input.shape()[1..]
            )));
        }
        let mut x = self.stem_conv.forward(input, mode)?;
        x = self.stem_bn.forward(&x, mode)?;
        x = self.stem_relu.forward(&x, mode)?;
        if let Some(pool) = &mut self.stem_pool {
            x = pool.forward(&x, mode)?;
        }
        for (_, block) in &mut self.blocks {
            x = block.as_layer().forward(&x, mode)?;
        }
        x = self.global_pool.forward(&x, mode)?;
        self.fc.forward(&x, mode)
    }

    /// Backward pass from the score gradient; accumulates parameter
    /// gradients and returns the gradient w.r.t. the input batch.
    pub fn backward(&mut self, grad_scores: &Tensor) -> Result<Tensor> {
        let mut g = self.fc.backward(grad_scores)?;
        let n = g.dim(0);
        let c = self.plan.fc_in;
        let s = self.plan.final_spatial;
        g = g.reshape(&[n, c, 1, 1])?;
        g = self.global_pool.backward(&g)?;
        debug_assert_eq!(g.shape()[2], s);
        for (_, block) in self.blocks.iter_mut().rev() {
            g = block.as_layer().backward(&g)?;
        }
        if let Some(pool) = &mut self.stem_pool {
            g = pool.backward(&g)?;
        }
        g = self.stem_relu.backward(&g)?;
        g = self.stem_bn.backward(&g)?;
        self.stem_conv.backward(&g)
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(String, &mut Param)) {
        self.stem_conv.visit_params("stem.conv", f);
        self.stem_bn.visit_params("stem.bn", f);
        let mut names = Vec::with_capacity(self.blocks.len());
        for (name, _) in &self.blocks {
            names.push(name.clone());
        }
        for (name, (_, block)) in names.iter().zip(self.blocks.iter_mut()) {
            block.as_layer().visit_params(name, f);
        }
        self.fc.visit_params("fc", f);
    }

    pub fn visit_state(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.stem_bn.visit_state("stem.bn", f);
        let mut names = Vec::with_capacity(self.blocks.len());
        for (name, _) in &self.blocks {
            names.push(name.clone());
        }
        for (name, (_, block)) in names.iter().zip(self.blocks.iter_mut()) {
            block.as_layer().visit_state(name, f);
        }
    }

    pub fn zero_grads(&mut self) {
        self.visit_params(&mut |_, p| p.zero_grad());
    }

    /// Distance of the last forward to the nearest ReLU kink anywhere in
    /// the network.
    pub fn kink_gap(&self) -> f64 {
        let mut gap = self.stem_relu.kink_gap();
        for (_, block) in &self.blocks {
            gap = gap.min(block.kink_gap());
        }
        gap
    }

    pub fn param_names(&mut self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit_params(&mut |name, _| names.push(name));
        names
    }

    pub fn param_count(&mut self) -> usize {
        let mut total = 0;
        self.visit_params(&mut |_, p| total += p.value.len());
        total
    }

    pub fn param_len(&mut self, name: &str) -> Option<usize> {
        let mut len = None;
        self.visit_params(&mut |n, p| {
            if n == name {
                len = Some(p.value.len());
            }
        });
        len
    }

    pub fn param_grad(&mut self, name: &str) -> Option<Tensor> {
        let mut grad = None;
        self.visit_params(&mut |n, p| {
            if n == name {
                grad = Some(p.grad.clone());
            }
        });
        grad
    }

    pub fn param_value(&mut self, name: &str, index: usize) -> Result<f64> {
        let mut value = None;
        self.visit_params(&mut |n, p| {
            if n == name {
                value = p.value.data().get(index).copied();
            }
        });
        value.ok_or_else(|| Error::config(format!("no parameter coordinate {name}[{index}]")))
    }

    pub fn set_param_value(&mut self, name: &str, index: usize, v: f64) -> Result<()> {
        let mut found = false;
        self.visit_params(&mut |n, p| {
            if n == name {
                if let Some(slot) = p.value.data_mut().get_mut(index) {
                    *slot = v;
                    found = true;
                }
            }
        });
        if found {
            Ok(())
        } else {
            Err(Error::config(format!("no parameter coordinate {name}[{index}]")))
        }
    }
}
