//! Layer abstractions, both residual block types, and the parametric
//! architecture generator.
//!
//! Layers operate on batched (N, C, H, W) tensors, cache what their
//! backward pass needs during forward, and accumulate parameter gradients
//! in place. Gradients are hand-derived per layer; the chain rule is
//! realized as the reverse sweep in `Network::backward`.

mod arch;
mod block;
mod conv;
mod linear;
mod network;
mod norm;
mod pool;
mod relu;

pub use arch::{named_arch, plan_network, ArchSpec, BlockType, NetworkPlan, PlanRow, StemPool, StemSpec};
pub use block::{BasicBlock, BottleneckBlock};
pub use conv::Conv2d;
pub use linear::Linear;
pub use network::{build_network, Network};
pub use norm::BatchNorm;
pub use pool::{AvgPool2d, MaxPool2d};
pub use relu::Relu;

use crate::error::Result;
use crate::tensor::Tensor;

/// Forward-pass mode.
///
/// `Train` uses batch statistics and updates running averages; `Frozen`
/// uses batch statistics without touching running averages (pure function
/// of inputs, used by the finite-difference checks); `Eval` uses running
/// statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Frozen,
    Eval,
}

/// A trainable tensor with its gradient accumulator.
#[derive(Clone, Debug)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
    /// Whether weight decay applies (conv/fc weights yes; biases and
    /// batch-norm gamma/beta no).
    pub decay: bool,
}

impl Param {
    pub fn new(value: Tensor, decay: bool) -> Param {
        let grad = Tensor::zeros(value.shape());
        Param { value, grad, decay }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Common layer surface. `visit_params` and `visit_state` enumerate the
/// persistent tensors in a stable order under dotted names.
pub trait Layer {
    fn forward(&mut self, input: &Tensor, mode: Mode) -> Result<Tensor>;
    /// Consumes the cache of the last forward; accumulates parameter
    /// gradients and returns the gradient w.r.t. the layer input.
    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor>;
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param));
    fn visit_state(&mut self, _prefix: &str, _f: &mut dyn FnMut(String, &mut Tensor)) {}
    /// Distance of the last forward to the nearest ReLU kink inside this
    /// layer, infinity when the layer has none.
    fn kink_gap(&self) -> f64 {
        f64::INFINITY
    }
}

/// Layer type names with a gradient-check obligation. The gradcheck test
/// suite owns the matching table; adding a name here without a check
/// there fails the suite.
pub fn layer_type_names() -> &'static [&'static str] {
    &[
        "conv2d",
        "batch_norm",
        "relu",
        "max_pool",
        "avg_pool",
        "linear",
        "residual_basic",
        "residual_bottleneck",
    ]
}
