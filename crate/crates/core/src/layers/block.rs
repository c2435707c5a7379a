use crate::error::{Error, Result};
use crate::layers::{BatchNorm, Conv2d, Layer, Mode, Param, Relu};
use crate::rng;
use crate::tensor::{min_abs, relu, relu_backward, Tensor};

/// Residual block with two 3x3 convolutions. The shortcut is the identity
/// unless the block changes resolution or width, in which case it is a
/// 1x1 strided projection convolution followed by batch norm.
#[derive(Clone, Debug)]
pub struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm,
    relu1: Relu,
    conv2: Conv2d,
    bn2: BatchNorm,
    shortcut: Option<(Conv2d, BatchNorm)>,
    cached_sum: Option<Tensor>,
    last_kink_gap: f64,
}

impl BasicBlock {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        rng: &mut rng::ChaCha8Rng,
    ) -> BasicBlock {
        let shortcut = if stride != 1 || in_channels != out_channels {
            Some((
                Conv2d::new(in_channels, out_channels, 1, stride, 0, rng),
                BatchNorm::new(out_channels),
            ))
        } else {
            None
        };
        BasicBlock {
            conv1: Conv2d::new(in_channels, out_channels, 3, stride, 1, rng),
            bn1: BatchNorm::new(out_channels),
            relu1: Relu::new(),
            conv2: Conv2d::new(out_channels, out_channels, 3, 1, 1, rng),
            bn2: BatchNorm::new(out_channels),
            shortcut,
            cached_sum: None,
            last_kink_gap: f64::INFINITY,
        }
    }
}

impl Layer for BasicBlock {
    fn forward(&mut self, input: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut branch = self.conv1.forward(input, mode)?;
        branch = self.bn1.forward(&branch, mode)?;
        branch = self.relu1.forward(&branch, mode)?;
        branch = self.conv2.forward(&branch, mode)?;
        branch = self.bn2.forward(&branch, mode)?;

        let short = match &mut self.shortcut {
            Some((conv, bn)) => {
                let s = conv.forward(input, mode)?;
                bn.forward(&s, mode)?
            }
            None => input.clone(),
        };
        if branch.shape() != short.shape() {
            return Err(Error::shape(format!(
                "residual branch {:?} does not match shortcut {:?}",
                branch.shape(),
                short.shape()
            )));
        }
        branch.add_assign(&short)?;
        let out = relu(&branch);
        self.last_kink_gap = self.relu1.kink_gap().min(min_abs(branch.data()));
        self.cached_sum = Some(branch);
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let sum = self
            .cached_sum
            .as_ref()
            .ok_or_else(|| Error::numeric("block backward called before forward"))?;
        let grad_sum = relu_backward(sum, grad_out)?;

        let mut g = self.bn2.backward(&grad_sum)?;
        g = self.conv2.backward(&g)?;
        g = self.relu1.backward(&g)?;
        g = self.bn1.backward(&g)?;
        let mut grad_input = self.conv1.backward(&g)?;

        let grad_short = match &mut self.shortcut {
            Some((conv, bn)) => {
                let gs = bn.backward(&grad_sum)?;
                conv.backward(&gs)?
            }
            None => grad_sum,
        };
        grad_input.add_assign(&grad_short)?;
        Ok(grad_input)
    }

    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.conv1.visit_params(&format!("{prefix}.conv1"), f);
        self.bn1.visit_params(&format!("{prefix}.bn1"), f);
        self.conv2.visit_params(&format!("{prefix}.conv2"), f);
        self.bn2.visit_params(&format!("{prefix}.bn2"), f);
        if let Some((conv, bn)) = &mut self.shortcut {
            conv.visit_params(&format!("{prefix}.proj.conv"), f);
            bn.visit_params(&format!("{prefix}.proj.bn"), f);
        }
    }

    fn visit_state(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.bn1.visit_state(&format!("{prefix}.bn1"), f);
        self.bn2.visit_state(&format!("{prefix}.bn2"), f);
        if let Some((_, bn)) = &mut self.shortcut {
            bn.visit_state(&format!("{prefix}.proj.bn"), f);
        }
    }

    fn kink_gap(&self) -> f64 {
        self.last_kink_gap
    }
}

/// Residual block with a 1x1 / 3x3 / 1x1 convolution stack. The middle
/// convolution carries the stride when the block downsamples, and the
/// shortcut is always a 1x1 projection convolution plus batch norm.
#[derive(Clone, Debug)]
pub struct BottleneckBlock {
    conv1: Conv2d,
    bn1: BatchNorm,
    relu1: Relu,
    conv2: Conv2d,
    bn2: BatchNorm,
    relu2: Relu,
    conv3: Conv2d,
    bn3: BatchNorm,
    proj_conv: Conv2d,
    proj_bn: BatchNorm,
    cached_sum: Option<Tensor>,
    last_kink_gap: f64,
}

impl BottleneckBlock {
    pub fn new(
        in_channels: usize,
        mid_channels: usize,
        out_channels: usize,
        stride: usize,
        rng: &mut rng::ChaCha8Rng,
    ) -> BottleneckBlock {
        BottleneckBlock {
            conv1: Conv2d::new(in_channels, mid_channels, 1, 1, 0, rng),
            bn1: BatchNorm::new(mid_channels),
            relu1: Relu::new(),
            conv2: Conv2d::new(mid_channels, mid_channels, 3, stride, 1, rng),
            bn2: BatchNorm::new(mid_channels),
            relu2: Relu::new(),
            conv3: Conv2d::new(mid_channels, out_channels, 1, 1, 0, rng),
            bn3: BatchNorm::new(out_channels),
            proj_conv: Conv2d::new(in_channels, out_channels, 1, stride, 0, rng),
            proj_bn: BatchNorm::new(out_channels),
            cached_sum: None,
            last_kink_gap: f64::INFINITY,
        }
    }
}

impl Layer for BottleneckBlock {
    fn forward(&mut self, input: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut branch = self.conv1.forward(input, mode)?;
        branch = self.bn1.forward(&branch, mode)?;
        branch = self.relu1.forward(&branch, mode)?;
        branch = self.conv2.forward(&branch, mode)?;
        branch = self.bn2.forward(&branch, mode)?;
        branch = self.relu2.forward(&branch, mode)?;
        branch = self.conv3.forward(&branch, mode)?;
        branch = self.bn3.forward(&branch, mode)?;

        let s = self.proj_conv.forward(input, mode)?;
        let short = self.proj_bn.forward(&s, mode)?;
        if branch.shape() != short.shape() {
            return Err(Error::shape(format!(
                "residual branch {:?} does not match shortcut {:?}",
                branch.shape(),
                short.shape()
            )));
        }
        branch.add_assign(&short)?;
        let out = relu(&branch);
        self.last_kink_gap = self
            .relu1
            .kink_gap()
            .min(self.relu2.kink_gap())
            .min(min_abs(branch.data()));
        self.cached_sum = Some(branch);
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let sum = self
            .cached_sum
            .as_ref()
            .ok_or_else(|| Error::numeric("block backward called before forward"))?;
        let grad_sum = relu_backward(sum, grad_out)?;

        let mut g = self.bn3.backward(&grad_sum)?;
        g = self.conv3.backward(&g)?;
        g = self.relu2.backward(&g)?;
        g = self.bn2.backward(&g)?;
        g = self.conv2.backward(&g)?;
        g = self.relu1.backward(&g)?;
        g = self.bn1.backward(&g)?;
        let mut grad_input = self.conv1.backward(&g)?;

        let gs = self.proj_bn.backward(&grad_sum)?;
        let grad_short = self.proj_conv.backward(&gs)?;
        grad_input.add_assign(&grad_short)?;
        Ok(grad_input)
    }

    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.conv1.visit_params(&format!("{prefix}.conv1"), f);
        self.bn1.visit_params(&format!("{prefix}.bn1"), f);
        self.conv2.visit_params(&format!("{prefix}.conv2"), f);
        self.bn2.visit_params(&format!("{prefix}.bn2"), f);
        self.conv3.visit_params(&format!("{prefix}.conv3"), f);
        self.bn3.visit_params(&format!("{prefix}.bn3"), f);
        self.proj_conv.visit_params(&format!("{prefix}.proj.conv"), f);
        self.proj_bn.visit_params(&format!("{prefix}.proj.bn"), f);
    }

    fn visit_state(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.bn1.visit_state(&format!("{prefix}.bn1"), f);
        self.bn2.visit_state(&format!("{prefix}.bn2"), f);
        self.bn3.visit_state(&format!("{prefix}.bn3"), f);
        self.proj_bn.visit_state(&format!("{prefix}.proj.bn"), f);
    }

    fn kink_gap(&self) -> f64 {
        self.last_kink_gap
    }
}
