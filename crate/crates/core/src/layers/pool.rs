use crate::error::{Error, Result};
use crate::layers::{Layer, Mode, Param};
use crate::tensor::{
    avg_pool, avg_pool_backward, max_pool_backward, max_pool_with_indices, out_extent, Tensor,
};

/// Batched max pooling over (N, C, H, W).
#[derive(Clone, Debug)]
pub struct MaxPool2d {
    pub window: usize,
    pub stride: usize,
    pub padding: usize,
    cached: Option<(Vec<usize>, Vec<Vec<i64>>)>,
}

impl MaxPool2d {
    pub fn new(window: usize, stride: usize, padding: usize) -> MaxPool2d {
        MaxPool2d { window, stride, padding, cached: None }
    }
}

impl Layer for MaxPool2d {
    fn forward(&mut self, input: &Tensor, _mode: Mode) -> Result<Tensor> {
        let (n, c, h, w) = batch_dims(input)?;
        let out_h = out_extent(h, self.window, self.stride, self.padding)?;
        let out_w = out_extent(w, self.window, self.stride, self.padding)?;
        let mut out = Tensor::zeros(&[n, c, out_h, out_w]);
        let mut all_idx = Vec::with_capacity(n);
        let in_stride = c * h * w;
        let out_stride = c * out_h * out_w;
        for ni in 0..n {
            let img = Tensor::from_vec(
                &[c, h, w],
                input.data()[ni * in_stride..(ni + 1) * in_stride].to_vec(),
            )?;
            let (o, idx) = max_pool_with_indices(&img, self.window, self.stride, self.padding)?;
            out.data_mut()[ni * out_stride..(ni + 1) * out_stride].copy_from_slice(o.data());
            all_idx.push(idx);
        }
        self.cached = Some((vec![n, c, h, w], all_idx));
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let (in_shape, indices) = self
            .cached
            .as_ref()
            .ok_or_else(|| Error::numeric("max pool backward called before forward"))?;
        let (n, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
        let mut grad_input = Tensor::zeros(in_shape);
        let out_stride = grad_out.len() / n;
        let in_stride = c * h * w;
        for ni in 0..n {
            let g = Tensor::from_vec(
                &[c, grad_out.dim(2), grad_out.dim(3)],
                grad_out.data()[ni * out_stride..(ni + 1) * out_stride].to_vec(),
            )?;
            let gi = max_pool_backward(&[c, h, w], &indices[ni], &g)?;
            grad_input.data_mut()[ni * in_stride..(ni + 1) * in_stride]
                .copy_from_slice(gi.data());
        }
        Ok(grad_input)
    }

    fn visit_params(&mut self, _prefix: &str, _f: &mut dyn FnMut(String, &mut Param)) {}
}

/// Batched average pooling over (N, C, H, W).
#[derive(Clone, Debug)]
pub struct AvgPool2d {
    pub window: usize,
    pub stride: usize,
    pub padding: usize,
    cached_in_shape: Option<Vec<usize>>,
}

impl AvgPool2d {
    pub fn new(window: usize, stride: usize, padding: usize) -> AvgPool2d {
        AvgPool2d { window, stride, padding, cached_in_shape: None }
    }
}

impl Layer for AvgPool2d {
    fn forward(&mut self, input: &Tensor, _mode: Mode) -> Result<Tensor> {
        let (n, c, h, w) = batch_dims(input)?;
        let out_h = out_extent(h, self.window, self.stride, self.padding)?;
        let out_w = out_extent(w, self.window, self.stride, self.padding)?;
        let mut out = Tensor::zeros(&[n, c, out_h, out_w]);
        let in_stride = c * h * w;
        let out_stride = c * out_h * out_w;
        for ni in 0..n {
            let img = Tensor::from_vec(
                &[c, h, w],
                input.data()[ni * in_stride..(ni + 1) * in_stride].to_vec(),
            )?;
            let o = avg_pool(&img, self.window, self.stride, self.padding)?;
            out.data_mut()[ni * out_stride..(ni + 1) * out_stride].copy_from_slice(o.data());
        }
        self.cached_in_shape = Some(vec![n, c, h, w]);
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let in_shape = self
            .cached_in_shape
            .as_ref()
            .ok_or_else(|| Error::numeric("avg pool backward called before forward"))?;
        let (n, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
        let mut grad_input = Tensor::zeros(in_shape);
        let out_stride = grad_out.len() / n;
        let in_stride = c * h * w;
        for ni in 0..n {
            let g = Tensor::from_vec(
                &[c, grad_out.dim(2), grad_out.dim(3)],
                grad_out.data()[ni * out_stride..(ni + 1) * out_stride].to_vec(),
            )?;
            let gi = avg_pool_backward(&[c, h, w], self.window, self.stride, self.padding, &g)?;
            grad_input.data_mut()[ni * in_stride..(ni + 1) * in_stride]
                .copy_from_slice(gi.data());
        }
        Ok(grad_input)
    }

    fn visit_params(&mut self, _prefix: &str, _f: &mut dyn FnMut(String, &mut Param)) {}
}

fn batch_dims(input: &Tensor) -> Result<(usize, usize, usize, usize)> {
    if input.rank() != 4 {
        return Err(Error::shape(format!("pool layer expects (N,C,H,W), got {:?}", input.shape())));
    }
    Ok((input.dim(0), input.dim(1), input.dim(2), input.dim(3)))
}
