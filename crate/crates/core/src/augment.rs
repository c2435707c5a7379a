//! Data augmentation and bag assembly: zero padding, region sampling,
//! horizontal reflection, and pairing instance sets with the shared
//! image-level label.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{Bag, LabelVector};
use crate::rng::ChaCha8Rng;
use crate::tensor::Tensor;

/// How crop offsets are chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    UniformRandom,
    /// The four corners plus the center of the padded image; requires a
    /// bag size of exactly 5.
    CornersCenter,
}

/// Bag construction parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BagSpec {
    /// Zero-padding width on each side before sampling.
    pub pad: usize,
    pub crop_size: usize,
    /// Regions per bag (m).
    pub bag_size: usize,
    pub flip_prob: f64,
    pub sampling: Sampling,
    /// Root of the per-image augmentation streams.
    pub seed: u64,
}

impl BagSpec {
    pub fn validate(&self, image_h: usize, image_w: usize) -> Result<()> {
        if self.bag_size == 0 {
            return Err(Error::config("bag size must be at least 1"));
        }
        if self.crop_size == 0 {
            return Err(Error::config("crop size must be positive"));
        }
        if self.crop_size > image_h + 2 * self.pad || self.crop_size > image_w + 2 * self.pad {
            return Err(Error::config(format!(
                "crop size {} exceeds padded image {}x{}",
                self.crop_size,
                image_h + 2 * self.pad,
                image_w + 2 * self.pad
            )));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::config("flip probability must be in [0, 1]"));
        }
        if self.sampling == Sampling::CornersCenter && self.bag_size != 5 {
            return Err(Error::config(format!(
                "corners_center sampling requires a bag size of 5, got {}",
                self.bag_size
            )));
        }
        Ok(())
    }
}

/// Zero-fill a border of `pad` pixels on all four sides.
pub fn pad2d(image: &Tensor, pad: usize) -> Result<Tensor> {
    if image.rank() != 3 {
        return Err(Error::shape(format!("pad2d expects (C,H,W), got {:?}", image.shape())));
    }
    if pad == 0 {
        return Ok(image.clone());
    }
    let (c, h, w) = (image.dim(0), image.dim(1), image.dim(2));
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let mut out = Tensor::zeros(&[c, ph, pw]);
    for ci in 0..c {
        for y in 0..h {
            let src = &image.data()[(ci * h + y) * w..(ci * h + y + 1) * w];
            let dst_base = (ci * ph + y + pad) * pw + pad;
            out.data_mut()[dst_base..dst_base + w].copy_from_slice(src);
        }
    }
    Ok(out)
}

/// Contiguous square sub-window copy.
pub fn crop(image: &Tensor, top: usize, left: usize, size: usize) -> Result<Tensor> {
    if image.rank() != 3 {
        return Err(Error::shape(format!("crop expects (C,H,W), got {:?}", image.shape())));
    }
    let (c, h, w) = (image.dim(0), image.dim(1), image.dim(2));
    if top + size > h || left + size > w {
        return Err(Error::shape(format!(
            "crop window (top {top}, left {left}, size {size}) leaves the {h}x{w} image"
        )));
    }
    let mut out = Tensor::zeros(&[c, size, size]);
    for ci in 0..c {
        for y in 0..size {
            let src_base = (ci * h + top + y) * w + left;
            let dst_base = (ci * size + y) * size;
            out.data_mut()[dst_base..dst_base + size]
                .copy_from_slice(&image.data()[src_base..src_base + size]);
        }
    }
    Ok(out)
}

/// Reverse the columns of every channel.
pub fn hflip(image: &Tensor) -> Result<Tensor> {
    if image.rank() != 3 {
        return Err(Error::shape(format!("hflip expects (C,H,W), got {:?}", image.shape())));
    }
    let (c, h, w) = (image.dim(0), image.dim(1), image.dim(2));
    let mut out = Tensor::zeros(&[c, h, w]);
    for ci in 0..c {
        for y in 0..h {
            let base = (ci * h + y) * w;
            for x in 0..w {
                out.data_mut()[base + x] = image.data()[base + w - 1 - x];
            }
        }
    }
    Ok(out)
}

/// Pad, sample `bag_size` crops, apply independent flips, and return the
/// regions as a bag carrying the original image-level label. Fully
/// determined by (image, spec, rng state); with `flip_prob` 0 no flip
/// deviates are drawn at all, so corners_center bags are a deterministic
/// function of the image alone.
pub fn make_bag(
    image: &Tensor,
    label: &LabelVector,
    spec: &BagSpec,
    rng: &mut ChaCha8Rng,
) -> Result<Bag> {
    if image.rank() != 3 {
        return Err(Error::shape(format!("make_bag expects (C,H,W), got {:?}", image.shape())));
    }
    spec.validate(image.dim(1), image.dim(2))?;
    let padded = pad2d(image, spec.pad)?;
    let (ph, pw) = (padded.dim(1), padded.dim(2));
    let (max_top, max_left) = (ph - spec.crop_size, pw - spec.crop_size);

    let offsets: Vec<(usize, usize)> = match spec.sampling {
        Sampling::UniformRandom => (0..spec.bag_size)
            .map(|_| {
                let top = rng.gen_range(0..=max_top);
                let left = rng.gen_range(0..=max_left);
                (top, left)
            })
            .collect(),
        Sampling::CornersCenter => vec![
            (0, 0),
            (0, max_left),
            (max_top, 0),
            (max_top, max_left),
            (max_top / 2, max_left / 2),
        ],
    };

    let mut instances = Vec::with_capacity(spec.bag_size);
    for (top, left) in offsets {
        let mut region = crop(&padded, top, left, spec.crop_size)?;
        if spec.flip_prob > 0.0 && rng.gen::<f64>() < spec.flip_prob {
            region = hflip(&region)?;
        }
        instances.push(region);
    }
    Bag::new(instances, label.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use proptest::prelude::*;
    use rand::Rng;

    fn rand_image(c: usize, h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = rng_from(seed, 0, 0);
        Tensor::from_vec(&[c, h, w], (0..c * h * w).map(|_| rng.gen()).collect()).unwrap()
    }

    fn spec(pad: usize, crop: usize, m: usize, flip: f64, sampling: Sampling) -> BagSpec {
        BagSpec { pad, crop_size: crop, bag_size: m, flip_prob: flip, sampling, seed: 0 }
    }

    #[test]
    fn pad_grows_border_and_zeroes_corners() {
        let img = rand_image(3, 32, 32, 1);
        let padded = pad2d(&img, 4).unwrap();
        assert_eq!(padded.shape(), &[3, 40, 40]);
        assert_eq!(padded.data()[0], 0.0);
        assert_eq!(padded.data()[39], 0.0);
        // interior preserved
        assert_eq!(padded.data()[(0 * 40 + 4) * 40 + 4], img.data()[0]);

        let same = pad2d(&img, 0).unwrap();
        assert_eq!(same, img);
    }

    #[test]
    fn crop_identity_and_bounds() {
        let img = rand_image(2, 8, 8, 2);
        assert_eq!(crop(&img, 0, 0, 8).unwrap(), img);
        assert!(crop(&img, 1, 0, 8).is_err());
        let c = crop(&img, 3, 5, 3).unwrap();
        assert_eq!(c.shape(), &[2, 3, 3]);
        assert_eq!(c.data()[0], img.data()[3 * 8 + 5]);
    }

    #[test]
    fn crop_of_constant_is_constant() {
        let img = Tensor::filled(&[1, 6, 6], 3.25);
        let c = crop(&img, 2, 1, 4).unwrap();
        assert!(c.data().iter().all(|&v| v == 3.25));
    }

    #[test]
    fn hflip_reverses_columns() {
        let img = Tensor::from_vec(&[1, 1, 2], vec![1.0, 2.0]).unwrap();
        assert_eq!(hflip(&img).unwrap().data(), &[2.0, 1.0]);

        let img = rand_image(3, 5, 7, 3);
        let flipped = hflip(&img).unwrap();
        for c in 0..3 {
            for y in 0..5 {
                for x in 0..7 {
                    assert_eq!(
                        flipped.data()[(c * 5 + y) * 7 + x],
                        img.data()[(c * 5 + y) * 7 + (6 - x)]
                    );
                }
            }
        }
    }

    proptest! {
        #[test]
        fn hflip_is_an_involution(c in 1usize..3, h in 1usize..9, w in 1usize..9, seed in 0u64..1000) {
            let img = rand_image(c, h, w, seed);
            let back = hflip(&hflip(&img).unwrap()).unwrap();
            prop_assert_eq!(back, img);
        }
    }

    #[test]
    fn five_crop_bag_shapes_and_label() {
        let img = rand_image(3, 32, 32, 4);
        let label = LabelVector::one_hot(7, 10).unwrap();
        let mut rng = rng_from(9, 0, 0);
        let bag = make_bag(
            &img,
            &label,
            &spec(4, 32, 5, 0.5, Sampling::UniformRandom),
            &mut rng,
        )
        .unwrap();
        assert_eq!(bag.size(), 5);
        for inst in bag.instances() {
            assert_eq!(inst.shape(), &[3, 32, 32]);
        }
        assert_eq!(bag.label(), &label);
    }

    #[test]
    fn identity_bag_returns_the_image() {
        let img = rand_image(3, 16, 16, 5);
        let label = LabelVector::one_hot(0, 2).unwrap();
        let mut rng = rng_from(10, 0, 0);
        let bag =
            make_bag(&img, &label, &spec(0, 16, 1, 0.0, Sampling::UniformRandom), &mut rng)
                .unwrap();
        assert_eq!(bag.size(), 1);
        assert_eq!(&bag.instances()[0], &img);
    }

    #[test]
    fn bags_replay_bit_identically() {
        let img = rand_image(3, 32, 32, 6);
        let label = LabelVector::one_hot(1, 10).unwrap();
        let s = spec(4, 32, 5, 0.5, Sampling::UniformRandom);
        let mut rng1 = rng_from(s.seed, 3, 17);
        let mut rng2 = rng_from(s.seed, 3, 17);
        let a = make_bag(&img, &label, &s, &mut rng1).unwrap();
        let b = make_bag(&img, &label, &s, &mut rng2).unwrap();
        for (x, y) in a.instances().iter().zip(b.instances()) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn corners_center_is_deterministic_without_flips() {
        let img = rand_image(3, 32, 32, 7);
        let label = LabelVector::one_hot(2, 10).unwrap();
        let s = spec(4, 32, 5, 0.0, Sampling::CornersCenter);
        // different rng streams must not matter
        let mut rng1 = rng_from(1, 1, 1);
        let mut rng2 = rng_from(2, 2, 2);
        let a = make_bag(&img, &label, &s, &mut rng1).unwrap();
        let b = make_bag(&img, &label, &s, &mut rng2).unwrap();
        for (x, y) in a.instances().iter().zip(b.instances()) {
            assert_eq!(x, y);
        }
        // center crop of the 40x40 padded image starts at (4, 4)
        let padded = pad2d(&img, 4).unwrap();
        assert_eq!(&a.instances()[4], &crop(&padded, 4, 4, 32).unwrap());
    }

    #[test]
    fn corners_center_requires_bag_of_five() {
        let img = rand_image(3, 32, 32, 8);
        let label = LabelVector::one_hot(0, 10).unwrap();
        let mut rng = rng_from(0, 0, 0);
        let res = make_bag(&img, &label, &spec(4, 32, 4, 0.0, Sampling::CornersCenter), &mut rng);
        assert!(res.is_err());
    }

    #[test]
    fn offsets_never_leave_the_padded_image() {
        let img = rand_image(3, 32, 32, 9);
        let label = LabelVector::one_hot(0, 10).unwrap();
        let s = spec(4, 32, 64, 0.0, Sampling::UniformRandom);
        let mut rng = rng_from(11, 0, 0);
        // make_bag would error internally on out-of-bounds crops
        let bag = make_bag(&img, &label, &s, &mut rng).unwrap();
        assert_eq!(bag.size(), 64);
    }

    #[test]
    fn oversized_crop_rejected() {
        let img = rand_image(3, 16, 16, 10);
        let label = LabelVector::one_hot(0, 2).unwrap();
        let mut rng = rng_from(0, 0, 0);
        assert!(
            make_bag(&img, &label, &spec(0, 20, 1, 0.0, Sampling::UniformRandom), &mut rng)
                .is_err()
        );
    }
}
