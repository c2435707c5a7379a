//! Dataset ingestion: CIFAR-10/100 binary parsing, a synthetic cluttered
//! target generator for desk-scale experiments, and split/normalization
//! helpers.
//!
//! The synthetic generator manufactures the failure mode bag training is
//! meant to absorb: each image carries one small class-identifying glyph
//! placed off-center, so random crops can cut it off while the crop still
//! inherits the image label.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_from, ChaCha8Rng, STREAM_SYNTH};
use crate::tensor::Tensor;

/// An image with pixel values in [0,1] (or standardized after
/// normalization) and its category index.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub pixels: Tensor,
    pub label: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CifarVariant {
    Cifar10,
    Cifar100,
}

struct RecordLayout {
    label_bytes: usize,
    /// Which label byte to keep (CIFAR-100 keeps the fine label).
    label_index: usize,
    channels: usize,
    height: usize,
    width: usize,
    num_classes: usize,
}

impl RecordLayout {
    fn record_size(&self) -> usize {
        self.label_bytes + self.channels * self.height * self.width
    }
}

fn parse_records(bytes: &[u8], layout: &RecordLayout) -> Result<Vec<LabeledImage>> {
    let record = layout.record_size();
    if bytes.len() % record != 0 {
        let offset = (bytes.len() / record) * record;
        return Err(Error::data(format!(
            "truncated record at byte offset {offset}: file length {} is not a multiple of \
             the {record}-byte record size",
            bytes.len()
        )));
    }
    let pixels_per = layout.channels * layout.height * layout.width;
    let mut images = Vec::with_capacity(bytes.len() / record);
    for (idx, chunk) in bytes.chunks_exact(record).enumerate() {
        for (li, &label) in chunk[..layout.label_bytes].iter().enumerate() {
            let limit = if li == layout.label_index { layout.num_classes } else { 256 };
            // CIFAR-100 coarse labels stay within 20 superclasses
            let limit = if layout.label_bytes == 2 && li == 0 { 20 } else { limit };
            if (label as usize) >= limit {
                return Err(Error::data(format!(
                    "label byte {label} out of range at record index {idx}"
                )));
            }
        }
        let label = chunk[layout.label_index] as usize;
        let data: Vec<f64> =
            chunk[layout.label_bytes..].iter().map(|&b| b as f64 / 255.0).collect();
        debug_assert_eq!(data.len(), pixels_per);
        images.push(LabeledImage {
            pixels: Tensor::from_vec(&[layout.channels, layout.height, layout.width], data)?,
            label,
        });
    }
    Ok(images)
}

fn cifar_layout(variant: CifarVariant) -> RecordLayout {
    match variant {
        CifarVariant::Cifar10 => RecordLayout {
            label_bytes: 1,
            label_index: 0,
            channels: 3,
            height: 32,
            width: 32,
            num_classes: 10,
        },
        CifarVariant::Cifar100 => RecordLayout {
            label_bytes: 2,
            label_index: 1,
            channels: 3,
            height: 32,
            width: 32,
            num_classes: 100,
        },
    }
}

/// Parse the public CIFAR binary record layout: label byte(s), then the
/// R, G, B planes row-major.
pub fn parse_cifar(bytes: &[u8], variant: CifarVariant) -> Result<Vec<LabeledImage>> {
    parse_records(bytes, &cifar_layout(variant))
}

pub fn parse_cifar_file(path: &Path, variant: CifarVariant) -> Result<Vec<LabeledImage>> {
    let bytes =
        std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_cifar(&bytes, variant)
}

/// Serialize one image back into the single-label-byte record layout.
/// Exact inverse of parsing for byte-derived pixel values.
pub fn write_record(image: &LabeledImage, out: &mut Vec<u8>) -> Result<()> {
    if image.label > 255 {
        return Err(Error::data(format!("label {} does not fit a record byte", image.label)));
    }
    out.push(image.label as u8);
    for &v in image.pixels.data() {
        out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Synthetic cluttered-target dataset.
// ---------------------------------------------------------------------------

/// Parameters of the synthetic generator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    /// Image side in pixels.
    pub canvas: usize,
    /// Glyph side in pixels.
    pub glyph: usize,
    pub num_classes: usize,
    /// Fraction of canvas pixels carrying noise clutter.
    pub clutter_density: f64,
    /// Maximum glyph displacement from the centered position, per axis.
    pub offset_range: usize,
    /// Training images to generate; the test split holds count / 2
    /// images with centered glyphs.
    pub count: usize,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.glyph == 0 || self.canvas == 0 {
            return Err(Error::config("canvas and glyph sides must be positive"));
        }
        if self.glyph + 2 * self.offset_range > self.canvas {
            return Err(Error::config(format!(
                "glyph {} with offset range {} does not fit canvas {}",
                self.glyph, self.offset_range, self.canvas
            )));
        }
        if self.num_classes == 0 || self.num_classes > 256 {
            return Err(Error::config("num_classes must be in 1..=256"));
        }
        if !(0.0..=1.0).contains(&self.clutter_density) {
            return Err(Error::config("clutter_density must be in [0, 1]"));
        }
        if self.count == 0 {
            return Err(Error::config("count must be positive"));
        }
        Ok(())
    }
}

/// Generated dataset plus the glyph position of every image, which the
/// crop-miss analytics need.
#[derive(Clone, Debug)]
pub struct SynthOutput {
    pub train: Vec<LabeledImage>,
    pub test: Vec<LabeledImage>,
    pub train_glyphs: Vec<(usize, usize)>,
    pub test_glyphs: Vec<(usize, usize)>,
}

const GLYPH_STREAM: u64 = 0x9700;

/// Fixed binary pattern identifying one class; a pure function of
/// (class, glyph side), independent of the dataset seed.
fn glyph_pattern(class: usize, glyph: usize) -> Vec<bool> {
    let mut rng = rng_from(GLYPH_STREAM, class as u64, glyph as u64);
    (0..glyph * glyph).map(|_| rng.gen::<f64>() < 0.5).collect()
}

fn render_image(
    spec: &SynthSpec,
    class: usize,
    glyph_top: usize,
    glyph_left: usize,
    rng: &mut ChaCha8Rng,
) -> LabeledImage {
    let s = spec.canvas;
    let mut pixels = Tensor::zeros(&[3, s, s]);
    // clutter first, glyph box overwrites it
    if spec.clutter_density > 0.0 {
        for y in 0..s {
            for x in 0..s {
                if rng.gen::<f64>() < spec.clutter_density {
                    for c in 0..3 {
                        pixels.data_mut()[(c * s + y) * s + x] = rng.gen::<f64>();
                    }
                }
            }
        }
    }
    let pattern = glyph_pattern(class, spec.glyph);
    for gy in 0..spec.glyph {
        for gx in 0..spec.glyph {
            let v = if pattern[gy * spec.glyph + gx] { 1.0 } else { 0.0 };
            for c in 0..3 {
                pixels.data_mut()[(c * s + glyph_top + gy) * s + glyph_left + gx] = v;
            }
        }
    }
    LabeledImage { pixels, label: class }
}

/// Generate the train and test splits. Training glyphs sit at the
/// centered position displaced toward a per-image random corner by a
/// uniform amount up to `offset_range`; test glyphs are centered so
/// evaluation views always contain the full glyph.
pub fn gen_synthetic(spec: &SynthSpec) -> Result<SynthOutput> {
    spec.validate()?;
    let center = (spec.canvas - spec.glyph) / 2;
    let mut train = Vec::with_capacity(spec.count);
    let mut train_glyphs = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let class = i % spec.num_classes;
        let mut rng = rng_from(spec.seed, STREAM_SYNTH, i as u64);
        let (top, left) = if spec.offset_range == 0 {
            (center, center)
        } else {
            let corner = rng.gen_range(0..4u8);
            let dy = rng.gen_range(0..=spec.offset_range);
            let dx = rng.gen_range(0..=spec.offset_range);
            let top = if corner & 1 == 0 { center - dy.min(center) } else { center + dy };
            let left = if corner & 2 == 0 { center - dx.min(center) } else { center + dx };
            (top, left)
        };
        train.push(render_image(spec, class, top, left, &mut rng));
        train_glyphs.push((top, left));
    }

    let test_count = spec.count / 2;
    let mut test = Vec::with_capacity(test_count);
    let mut test_glyphs = Vec::with_capacity(test_count);
    for i in 0..test_count {
        let class = i % spec.num_classes;
        let mut rng = rng_from(spec.seed, STREAM_SYNTH, (spec.count + i) as u64);
        test.push(render_image(spec, class, center, center, &mut rng));
        test_glyphs.push((center, center));
    }

    Ok(SynthOutput { train, test, train_glyphs, test_glyphs })
}

/// Sidecar metadata for a synthetic dataset written to disk.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SynthMeta {
    pub spec: SynthSpec,
    pub channels: usize,
    pub train_count: usize,
    pub test_count: usize,
}

/// Write train.bin / test.bin in the CIFAR record layout (one label byte,
/// then channel-major planes) plus a meta.json sidecar.
pub fn write_synth_dir(dir: &Path, output: &SynthOutput, spec: &SynthSpec) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut train_bytes = Vec::new();
    for img in &output.train {
        write_record(img, &mut train_bytes)?;
    }
    let mut test_bytes = Vec::new();
    for img in &output.test {
        write_record(img, &mut test_bytes)?;
    }
    let meta = SynthMeta {
        spec: *spec,
        channels: 3,
        train_count: output.train.len(),
        test_count: output.test.len(),
    };
    let meta_json = serde_json::to_vec_pretty(&meta)
        .map_err(|e| Error::data(format!("cannot serialize dataset meta: {e}")))?;
    let write = |name: &str, bytes: &[u8]| -> Result<()> {
        let path = dir.join(name);
        std::fs::write(&path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
    };
    write("train.bin", &train_bytes)?;
    write("test.bin", &test_bytes)?;
    write("meta.json", &meta_json)
}

/// Load a directory written by `write_synth_dir`.
pub fn load_synth_dir(dir: &Path) -> Result<(Vec<LabeledImage>, Vec<LabeledImage>, SynthMeta)> {
    let meta_path = dir.join("meta.json");
    let meta_bytes =
        std::fs::read(&meta_path).map_err(|e| Error::io(meta_path.display().to_string(), e))?;
    let meta: SynthMeta = serde_json::from_slice(&meta_bytes)
        .map_err(|e| Error::data(format!("invalid meta.json: {e}")))?;
    let layout = RecordLayout {
        label_bytes: 1,
        label_index: 0,
        channels: meta.channels,
        height: meta.spec.canvas,
        width: meta.spec.canvas,
        num_classes: meta.spec.num_classes,
    };
    let read = |name: &str| -> Result<Vec<LabeledImage>> {
        let path = dir.join(name);
        let bytes =
            std::fs::read(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
        parse_records(&bytes, &layout)
    };
    Ok((read("train.bin")?, read("test.bin")?, meta))
}

/// FNV-1a 64-bit digest, used for dataset checksums in run manifests.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

// ---------------------------------------------------------------------------
// Crop-miss analytics.
// ---------------------------------------------------------------------------

/// Does a crop window fully contain the glyph box?
pub fn crop_contains_glyph(
    crop_top: usize,
    crop_left: usize,
    crop: usize,
    glyph_top: usize,
    glyph_left: usize,
    glyph: usize,
) -> bool {
    crop_top <= glyph_top
        && glyph_top + glyph <= crop_top + crop
        && crop_left <= glyph_left
        && glyph_left + glyph <= crop_left + crop
}

/// Exact fraction of lattice crop positions that miss (fail to fully
/// contain) a glyph at the given position.
pub fn crop_miss_rate_exact(
    glyph_pos: (usize, usize),
    glyph: usize,
    canvas: usize,
    crop: usize,
) -> f64 {
    let max_off = canvas - crop;
    let total = (max_off + 1) * (max_off + 1);
    let mut hits = 0usize;
    for t in 0..=max_off {
        for l in 0..=max_off {
            if crop_contains_glyph(t, l, crop, glyph_pos.0, glyph_pos.1, glyph) {
                hits += 1;
            }
        }
    }
    (total - hits) as f64 / total as f64
}

/// Mean exact miss rate over a set of glyph positions.
pub fn mean_crop_miss_exact(
    positions: &[(usize, usize)],
    glyph: usize,
    canvas: usize,
    crop: usize,
) -> f64 {
    if positions.is_empty() {
        return 0.0;
    }
    positions
        .iter()
        .map(|&p| crop_miss_rate_exact(p, glyph, canvas, crop))
        .sum::<f64>()
        / positions.len() as f64
}

/// Monte-Carlo miss rate: sample (image, crop offset) pairs uniformly.
pub fn measured_crop_miss(
    positions: &[(usize, usize)],
    glyph: usize,
    canvas: usize,
    crop: usize,
    samples: usize,
    seed: u64,
) -> f64 {
    if positions.is_empty() || samples == 0 {
        return 0.0;
    }
    let max_off = canvas - crop;
    let mut rng = rng_from(seed, 0x4d43, 0);
    let mut misses = 0usize;
    for _ in 0..samples {
        let (gt, gl) = positions[rng.gen_range(0..positions.len())];
        let t = rng.gen_range(0..=max_off);
        let l = rng.gen_range(0..=max_off);
        if !crop_contains_glyph(t, l, crop, gt, gl, glyph) {
            misses += 1;
        }
    }
    misses as f64 / samples as f64
}

// ---------------------------------------------------------------------------
// Split and per-channel standardization.
// ---------------------------------------------------------------------------

/// Per-channel standardization constants, fit on training data only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn fit(images: &[LabeledImage]) -> Result<Normalization> {
        let first = images.first().ok_or_else(|| Error::data("cannot fit normalization on an empty set"))?;
        let channels = first.pixels.dim(0);
        let per_channel = first.pixels.len() / channels;
        let n = (images.len() * per_channel) as f64;
        let mut mean = vec![0.0; channels];
        for img in images {
            for c in 0..channels {
                mean[c] += img.pixels.data()[c * per_channel..(c + 1) * per_channel]
                    .iter()
                    .sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; channels];
        for img in images {
            for c in 0..channels {
                var[c] += img.pixels.data()[c * per_channel..(c + 1) * per_channel]
                    .iter()
                    .map(|&v| (v - mean[c]) * (v - mean[c]))
                    .sum::<f64>();
            }
        }
        let std = var
            .iter()
            .map(|&v| {
                let s = (v / n).sqrt();
                if s > 0.0 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Normalization { mean, std })
    }

    pub fn apply(&self, images: &mut [LabeledImage]) {
        for img in images {
            let channels = img.pixels.dim(0);
            let per_channel = img.pixels.len() / channels;
            for c in 0..channels {
                let (m, s) = (self.mean[c], self.std[c]);
                for v in &mut img.pixels.data_mut()[c * per_channel..(c + 1) * per_channel] {
                    *v = (*v - m) / s;
                }
            }
        }
    }
}

/// Deterministic shuffled split; normalization constants come from the
/// train side and are applied to both.
pub fn split_and_normalize(
    images: Vec<LabeledImage>,
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<LabeledImage>, Vec<LabeledImage>, Normalization)> {
    if images.is_empty() {
        return Err(Error::data("cannot split an empty image list"));
    }
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(Error::config("train_fraction must be in [0, 1]"));
    }
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut rng = rng_from(seed, 0x53504c54, 0);
    use rand::seq::SliceRandom;
    order.shuffle(&mut rng);
    let train_count = (images.len() as f64 * train_fraction).round() as usize;
    let mut images: Vec<Option<LabeledImage>> = images.into_iter().map(Some).collect();
    let mut train = Vec::with_capacity(train_count);
    let mut test = Vec::with_capacity(images.len() - train_count);
    for (k, &idx) in order.iter().enumerate() {
        let img = images[idx].take().expect("each index visited once");
        if k < train_count {
            train.push(img);
        } else {
            test.push(img);
        }
    }
    let norm = Normalization::fit(&train)?;
    let mut train = train;
    let mut test = test;
    norm.apply(&mut train);
    norm.apply(&mut test);
    Ok((train, test, norm))
}
