use crate::error::{Error, Result};
use crate::layers::{Layer, Mode, Param};
use crate::rng;
use crate::tensor::{col2im, im2col, mm, mm_abt, mm_atb, out_extent, Tensor};

/// Batched 2-D convolution layer over (N, C, H, W) inputs.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub weight: Param,
    pub bias: Param,
    cached_input: Option<Tensor>,
}

impl Conv2d {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut rng::ChaCha8Rng,
    ) -> Conv2d {
        let fan_in = in_channels * kernel * kernel;
        let std = (2.0 / fan_in as f64).sqrt();
        let weight = Tensor::randn(&[out_channels, in_channels, kernel, kernel], std, rng);
        Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight: Param::new(weight, true),
            bias: Param::new(Tensor::zeros(&[out_channels]), false),
            cached_input: None,
        }
    }

    fn check_input(&self, input: &Tensor) -> Result<(usize, usize, usize, usize, usize)> {
        if input.rank() != 4 {
            return Err(Error::shape(format!(
                "conv layer expects (N,C,H,W), got {:?}",
                input.shape()
            )));
        }
        let (n, c, h, w) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
        if c != self.in_channels {
            return Err(Error::shape(format!(
                "conv layer built for {} input channels, got {c}",
                self.in_channels
            )));
        }
        let out_h = out_extent(h, self.kernel, self.stride, self.padding)?;
        let out_w = out_extent(w, self.kernel, self.stride, self.padding)?;
        Ok((n, h, w, out_h, out_w))
    }
}

impl Layer for Conv2d {
    fn forward(&mut self, input: &Tensor, _mode: Mode) -> Result<Tensor> {
        let (n, h, w, out_h, out_w) = self.check_input(input)?;
        let k = self.in_channels * self.kernel * self.kernel;
        let t = out_h * out_w;
        let mut col = vec![0.0; k * t];
        let mut out = Tensor::zeros(&[n, self.out_channels, out_h, out_w]);
        let in_stride = self.in_channels * h * w;
        let out_stride = self.out_channels * t;
        for ni in 0..n {
            let img = &input.data()[ni * in_stride..(ni + 1) * in_stride];
            im2col(
                img,
                self.in_channels,
                h,
                w,
                self.kernel,
                self.kernel,
                self.stride,
                self.padding,
                out_h,
                out_w,
                &mut col,
            );
            let dst = &mut out.data_mut()[ni * out_stride..(ni + 1) * out_stride];
            mm(self.weight.value.data(), &col, self.out_channels, k, t, dst);
            for (o, &b) in self.bias.value.data().iter().enumerate() {
                dst[o * t..(o + 1) * t].iter_mut().for_each(|v| *v += b);
            }
        }
        self.cached_input = Some(input.clone());
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let input = self
            .cached_input
            .as_ref()
            .ok_or_else(|| Error::numeric("conv backward called before forward"))?;
        let (n, h, w, out_h, out_w) = self.check_input(input)?;
        if grad_out.shape() != [n, self.out_channels, out_h, out_w] {
            return Err(Error::shape(format!(
                "conv grad_out shape {:?}, expected ({n},{},{out_h},{out_w})",
                grad_out.shape(),
                self.out_channels
            )));
        }
        let k = self.in_channels * self.kernel * self.kernel;
        let t = out_h * out_w;
        let mut col = vec![0.0; k * t];
        let mut grad_col = vec![0.0; k * t];
        let mut gk = vec![0.0; self.out_channels * k];
        let mut grad_input = Tensor::zeros(input.shape());
        let in_stride = self.in_channels * h * w;
        let out_stride = self.out_channels * t;
        for ni in 0..n {
            let img = &input.data()[ni * in_stride..(ni + 1) * in_stride];
            let g = &grad_out.data()[ni * out_stride..(ni + 1) * out_stride];
            im2col(
                img,
                self.in_channels,
                h,
                w,
                self.kernel,
                self.kernel,
                self.stride,
                self.padding,
                out_h,
                out_w,
                &mut col,
            );
            for o in 0..self.out_channels {
                self.bias.grad.data_mut()[o] += g[o * t..(o + 1) * t].iter().sum::<f64>();
            }
            mm_abt(g, &col, self.out_channels, t, k, &mut gk);
            for (dst, &v) in self.weight.grad.data_mut().iter_mut().zip(&gk) {
                *dst += v;
            }
            mm_atb(self.weight.value.data(), g, self.out_channels, k, t, &mut grad_col);
            col2im(
                &grad_col,
                self.in_channels,
                h,
                w,
                self.kernel,
                self.kernel,
                self.stride,
                self.padding,
                out_h,
                out_w,
                &mut grad_input.data_mut()[ni * in_stride..(ni + 1) * in_stride],
            );
        }
        Ok(grad_input)
    }

    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        f(format!("{prefix}.weight"), &mut self.weight);
        f(format!("{prefix}.bias"), &mut self.bias);
    }
}
