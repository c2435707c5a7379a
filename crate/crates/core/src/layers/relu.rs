use crate::error::{Error, Result};
use crate::layers::{Layer, Mode, Param};
use crate::tensor::{min_abs, relu, relu_backward, Tensor};

/// Elementwise max(0, x) with kink-distance tracking for the
/// finite-difference checks.
#[derive(Clone, Debug, Default)]
pub struct Relu {
    cached_input: Option<Tensor>,
    last_kink_gap: f64,
}

impl Relu {
    pub fn new() -> Relu {
        Relu { cached_input: None, last_kink_gap: f64::INFINITY }
    }
}

impl Layer for Relu {
    fn forward(&mut self, input: &Tensor, _mode: Mode) -> Result<Tensor> {
        let out = relu(input);
        self.last_kink_gap = min_abs(input.data());
        self.cached_input = Some(input.clone());
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let input = self
            .cached_input
            .as_ref()
            .ok_or_else(|| Error::numeric("relu backward called before forward"))?;
        relu_backward(input, grad_out)
    }

    fn visit_params(&mut self, _prefix: &str, _f: &mut dyn FnMut(String, &mut Param)) {}

    fn kink_gap(&self) -> f64 {
        self.last_kink_gap
    }
}
