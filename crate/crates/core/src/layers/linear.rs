use crate::error::{Error, Result};
use crate::layers::{Layer, Mode, Param};
use crate::rng;
use crate::tensor::{mm, mm_abt, mm_atb, Tensor};

/// Fully-connected layer. Accepts (N, F) or (N, C, H, W) input, flattening
/// the trailing dimensions.
#[derive(Clone, Debug)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    /// Row o holds the weights of output unit o: (out, in).
    pub weight: Param,
    pub bias: Param,
    cached_input: Option<Tensor>,
}

impl Linear {
    pub fn new(in_features: usize, out_features: usize, rng: &mut rng::ChaCha8Rng) -> Linear {
        let std = (2.0 / in_features as f64).sqrt();
        Linear {
            in_features,
            out_features,
            weight: Param::new(Tensor::randn(&[out_features, in_features], std, rng), true),
            bias: Param::new(Tensor::zeros(&[out_features]), false),
            cached_input: None,
        }
    }

    fn flatten(&self, input: &Tensor) -> Result<Tensor> {
        if input.rank() < 2 {
            return Err(Error::shape(format!(
                "linear layer expects a batch dimension, got {:?}",
                input.shape()
            )));
        }
        let n = input.dim(0);
        let f = input.len() / n;
        if f != self.in_features {
            return Err(Error::shape(format!(
                "linear layer built for {} features, got {f}",
                self.in_features
            )));
        }
        input.clone().reshape(&[n, f])
    }
}

impl Layer for Linear {
    fn forward(&mut self, input: &Tensor, _mode: Mode) -> Result<Tensor> {
        let x = self.flatten(input)?;
        let n = x.dim(0);
        let mut out = Tensor::zeros(&[n, self.out_features]);
        // out[n][o] = sum_f x[n][f] * w[o][f] + b[o]
        mm_abt(
            x.data(),
            self.weight.value.data(),
            n,
            self.in_features,
            self.out_features,
            out.data_mut(),
        );
        for ni in 0..n {
            let row = &mut out.data_mut()[ni * self.out_features..(ni + 1) * self.out_features];
            for (v, &b) in row.iter_mut().zip(self.bias.value.data()) {
                *v += b;
            }
        }
        self.cached_input = Some(x);
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let x = self
            .cached_input
            .as_ref()
            .ok_or_else(|| Error::numeric("linear backward called before forward"))?;
        let n = x.dim(0);
        if grad_out.shape() != [n, self.out_features] {
            return Err(Error::shape(format!(
                "linear grad_out shape {:?}, expected ({n},{})",
                grad_out.shape(),
                self.out_features
            )));
        }
        // dW[o][f] += sum_n g[n][o] * x[n][f]
        let mut gw = vec![0.0; self.out_features * self.in_features];
        mm_atb(grad_out.data(), x.data(), n, self.out_features, self.in_features, &mut gw);
        for (dst, &v) in self.weight.grad.data_mut().iter_mut().zip(&gw) {
            *dst += v;
        }
        for ni in 0..n {
            let row = &grad_out.data()[ni * self.out_features..(ni + 1) * self.out_features];
            for (b, &g) in self.bias.grad.data_mut().iter_mut().zip(row) {
                *b += g;
            }
        }
        // dx[n][f] = sum_o g[n][o] * w[o][f]
        let mut grad_input = Tensor::zeros(&[n, self.in_features]);
        mm(
            grad_out.data(),
            self.weight.value.data(),
            n,
            self.out_features,
            self.in_features,
            grad_input.data_mut(),
        );
        Ok(grad_input)
    }

    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        f(format!("{prefix}.weight"), &mut self.weight);
        f(format!("{prefix}.bias"), &mut self.bias);
    }
}
