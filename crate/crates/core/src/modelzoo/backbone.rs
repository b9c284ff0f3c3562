//! Convolutional feature extractor shared by all variants: two 3x3 conv
//! blocks with relu and 2x2 mean pooling, so spatial dims shrink by 4x.

use rand::Rng;

use super::{ModelError, ModelResult};
use crate::autograd::{AgResult, Tape, Tensor, TensorId};

const C1: usize = 8;
const C2: usize = 16;

#[derive(Debug, Clone)]
pub struct Backbone {
    pub conv1: Tensor, // [8,  C, 3, 3]
    pub conv2: Tensor, // [16, 8, 3, 3]
    in_shape: [usize; 3],
}

impl Backbone {
    pub fn new<R: Rng>(in_shape: [usize; 3], rng: &mut R) -> ModelResult<Self> {
        let [c, h, w] = in_shape;
        if c == 0 || h % 4 != 0 || w % 4 != 0 || h < 4 || w < 4 {
            return Err(ModelError::InputShape {
                got: in_shape.to_vec(),
                why: "need nonzero channels and spatial dims divisible by 4".into(),
            });
        }
        let he1 = (2.0 / (c * 9) as f64).sqrt();
        let he2 = (2.0 / (C1 * 9) as f64).sqrt();
        Ok(Backbone {
            conv1: Tensor::randn(&[C1, c, 3, 3], he1, rng).requires_grad(true),
            conv2: Tensor::randn(&[C2, C1, 3, 3], he2, rng).requires_grad(true),
            in_shape,
        })
    }

    pub fn in_shape(&self) -> [usize; 3] {
        self.in_shape
    }

    /// Channel count and spatial dims of the output feature map.
    pub fn fm_shape(&self) -> [usize; 3] {
        let [_, h, w] = self.in_shape;
        [C2, h / 4, w / 4]
    }

    /// Flattened feature dimension.
    pub fn out_dim(&self) -> usize {
        let [c, h, w] = self.fm_shape();
        c * h * w
    }

    /// Puts both kernels on the tape once. Models that run several forward
    /// passes on one tape must share these ids so gradients accumulate on a
    /// single leaf per weight.
    pub fn register(&self, tape: &mut Tape) -> (TensorId, TensorId) {
        (tape.leaf(self.conv1.clone()), tape.leaf(self.conv2.clone()))
    }

    /// Appends the two conv blocks using already-registered kernel ids.
    /// Accepts `[C,H,W]` or `[B,C,H,W]` input ids; the output keeps the
    /// batch dimension.
    pub fn feature_map_with(
        &self,
        tape: &mut Tape,
        x: TensorId,
        kernels: (TensorId, TensorId),
    ) -> AgResult<TensorId> {
        let a = tape.conv2d(x, kernels.0, 1)?;
        let a = tape.relu(a)?;
        let a = tape.mean_pool2(a)?;
        let b = tape.conv2d(a, kernels.1, 1)?;
        let b = tape.relu(b)?;
        tape.mean_pool2(b)
    }

    /// Single-pass convenience: registers kernels and returns the map.
    pub fn feature_map(&self, tape: &mut Tape, x: TensorId) -> AgResult<TensorId> {
        let kernels = self.register(tape);
        self.feature_map_with(tape, x, kernels)
    }

    /// Feature map reshaped to `[batch, out_dim]`.
    pub fn features_with(
        &self,
        tape: &mut Tape,
        x: TensorId,
        kernels: (TensorId, TensorId),
        batch: usize,
    ) -> AgResult<TensorId> {
        let fm = self.feature_map_with(tape, x, kernels)?;
        tape.reshape(fm, &[batch, self.out_dim()])
    }

    pub fn params<'a>(&'a self, out: &mut Vec<(String, &'a Tensor)>) {
        out.push(("backbone.conv1".into(), &self.conv1));
        out.push(("backbone.conv2".into(), &self.conv2));
    }

    /// Assigns one of the backbone weights by name, shape-checked.
    pub fn set_param(&mut self, name: &str, value: Tensor) -> ModelResult<bool> {
        let slot = match name {
            "backbone.conv1" => &mut self.conv1,
            "backbone.conv2" => &mut self.conv2,
            _ => return Ok(false),
        };
        if slot.shape() != value.shape() {
            return Err(ModelError::ParamShape {
                name: name.into(),
                expected: slot.shape().to_vec(),
                got: value.shape().to_vec(),
            });
        }
        *slot = value.requires_grad(true);
        Ok(true)
    }
}
