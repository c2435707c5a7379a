use crate::error::{Error, Result};
use crate::layers::{Layer, Mode, Param};
use crate::tensor::Tensor;

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

/// Per-channel batch normalization over (N, C, H, W).
///
/// Train mode normalizes by batch statistics and folds them into the
/// running averages; Frozen mode uses batch statistics without updating;
/// Eval mode uses the running averages and errors if none exist yet.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub channels: usize,
    pub epsilon: f64,
    pub momentum: f64,
    pub gamma: Param,
    pub beta: Param,
    running_mean: Tensor,
    running_var: Tensor,
    /// Number of running-average updates, persisted as a state tensor so
    /// checkpoints restore eval-readiness.
    count: Tensor,
    cache: Option<BnCache>,
}

#[derive(Clone, Debug)]
struct BnCache {
    xhat: Tensor,
    inv_std: Vec<f64>,
    /// Elements per channel that went into the statistics.
    m: usize,
    batch_stats: bool,
}

impl BatchNorm {
    pub fn new(channels: usize) -> BatchNorm {
        BatchNorm {
            channels,
            epsilon: BN_EPSILON,
            momentum: BN_MOMENTUM,
            gamma: Param::new(Tensor::filled(&[channels], 1.0), false),
            beta: Param::new(Tensor::zeros(&[channels]), false),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::zeros(&[channels]),
            count: Tensor::zeros(&[1]),
            cache: None,
        }
    }

    pub fn has_running_stats(&self) -> bool {
        self.count.data()[0] > 0.0
    }

    fn check_input(&self, input: &Tensor) -> Result<(usize, usize, usize)> {
        if input.rank() != 4 {
            return Err(Error::shape(format!(
                "batch norm expects (N,C,H,W), got {:?}",
                input.shape()
            )));
        }
        if input.dim(1) != self.channels {
            return Err(Error::shape(format!(
                "batch norm built for {} channels, got {}",
                self.channels,
                input.dim(1)
            )));
        }
        Ok((input.dim(0), input.dim(2), input.dim(3)))
    }
}

impl Layer for BatchNorm {
    fn forward(&mut self, input: &Tensor, mode: Mode) -> Result<Tensor> {
        let (n, h, w) = self.check_input(input)?;
        let hw = h * w;
        let m = n * hw;
        let c = self.channels;

        let (mean, var) = match mode {
            Mode::Train | Mode::Frozen => {
                if m < 2 {
                    return Err(Error::shape(
                        "batch norm needs at least 2 elements per channel for batch statistics"
                            .to_string(),
                    ));
                }
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ni in 0..n {
                    for ci in 0..c {
                        let plane = &input.data()[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
                        mean[ci] += plane.iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|v| *v /= m as f64);
                for ni in 0..n {
                    for ci in 0..c {
                        let plane = &input.data()[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
                        var[ci] +=
                            plane.iter().map(|&x| (x - mean[ci]) * (x - mean[ci])).sum::<f64>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= m as f64);
                if mode == Mode::Train {
                    for ci in 0..c {
                        let rm = &mut self.running_mean.data_mut()[ci];
                        *rm = self.momentum * *rm + (1.0 - self.momentum) * mean[ci];
                        let rv = &mut self.running_var.data_mut()[ci];
                        *rv = self.momentum * *rv + (1.0 - self.momentum) * var[ci];
                    }
                    self.count.data_mut()[0] += 1.0;
                }
                (mean, var)
            }
            Mode::Eval => {
                if !self.has_running_stats() {
                    return Err(Error::config(
                        "batch norm evaluated before any running statistics exist".to_string(),
                    ));
                }
                (self.running_mean.data().to_vec(), self.running_var.data().to_vec())
            }
        };

        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + self.epsilon).sqrt()).collect();
        let mut xhat = Tensor::zeros(input.shape());
        let mut out = Tensor::zeros(input.shape());
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                let src = &input.data()[base..base + hw];
                let g = self.gamma.value.data()[ci];
                let b = self.beta.value.data()[ci];
                let (mu, is) = (mean[ci], inv_std[ci]);
                for k in 0..hw {
                    let xh = (src[k] - mu) * is;
                    xhat.data_mut()[base + k] = xh;
                    out.data_mut()[base + k] = g * xh + b;
                }
            }
        }
        self.cache = Some(BnCache {
            xhat,
            inv_std,
            m,
            batch_stats: mode != Mode::Eval,
        });
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::numeric("batch norm backward called before forward"))?;
        if grad_out.shape() != cache.xhat.shape() {
            return Err(Error::shape(format!(
                "batch norm grad_out shape {:?} does not match forward {:?}",
                grad_out.shape(),
                cache.xhat.shape()
            )));
        }
        let (n, h, w) = self.check_input(grad_out)?;
        let hw = h * w;
        let c = self.channels;
        let m = cache.m as f64;

        // per-channel reductions of dy and dy*xhat
        let mut sum_dy = vec![0.0; c];
        let mut sum_dy_xhat = vec![0.0; c];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                let g = &grad_out.data()[base..base + hw];
                let xh = &cache.xhat.data()[base..base + hw];
                for k in 0..hw {
                    sum_dy[ci] += g[k];
                    sum_dy_xhat[ci] += g[k] * xh[k];
                }
            }
        }
        for ci in 0..c {
            self.gamma.grad.data_mut()[ci] += sum_dy_xhat[ci];
            self.beta.grad.data_mut()[ci] += sum_dy[ci];
        }

        let mut grad_input = Tensor::zeros(grad_out.shape());
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                let g = &grad_out.data()[base..base + hw];
                let xh = &cache.xhat.data()[base..base + hw];
                let gamma = self.gamma.value.data()[ci];
                let is = cache.inv_std[ci];
                let dst = &mut grad_input.data_mut()[base..base + hw];
                if cache.batch_stats {
                    // dx = gamma*is/m * (m*dy - sum(dy) - xhat*sum(dy*xhat))
                    let a = gamma * is / m;
                    for k in 0..hw {
                        dst[k] = a * (m * g[k] - sum_dy[ci] - xh[k] * sum_dy_xhat[ci]);
                    }
                } else {
                    // statistics were constants (eval mode)
                    for k in 0..hw {
                        dst[k] = gamma * is * g[k];
                    }
                }
            }
        }
        Ok(grad_input)
    }

    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        f(format!("{prefix}.gamma"), &mut self.gamma);
        f(format!("{prefix}.beta"), &mut self.beta);
    }

    fn visit_state(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.running_mean"), &mut self.running_mean);
        f(format!("{prefix}.running_var"), &mut self.running_var);
        f(format!("{prefix}.count"), &mut self.count);
    }
}
