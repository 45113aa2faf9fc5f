//! Small parameterised layers shared by the network modules.

use alloc::format;

use rand::Rng;

use crate::math;
use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Affine map `x·W + b` over the last axis of `x: [N, in]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / math::sqrt(fan_in as f64);
        Self {
            w: store.add_uniform(format!("{name}.w"), &[fan_in, fan_out], bound, rng),
            b: store.add_uniform(format!("{name}.b"), &[fan_out], bound, rng),
            fan_in,
            fan_out,
        }
    }

    pub fn zero(&self, store: &mut ParamStore) {
        store.get_mut(self.w).value.data_mut().fill(0.0);
        store.get_mut(self.b).value.data_mut().fill(0.0);
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.matmul(x, w)?;
        g.add(y, b)
    }
}

/// Same-padded 3D convolution over `[C, X, Y, Z]`.
#[derive(Debug, Clone, Copy)]
pub struct Conv3d {
    pub w: ParamId,
    pub b: ParamId,
}

impl Conv3d {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel * kernel;
        let bound = 1.0 / math::sqrt(fan_in as f64);
        Self {
            w: store.add_uniform(format!("{name}.w"), &[out_ch, in_ch, kernel, kernel, kernel], bound, rng),
            b: store.add_uniform(format!("{name}.b"), &[out_ch], bound, rng),
        }
    }

    pub fn zero(&self, store: &mut ParamStore) {
        store.get_mut(self.w).value.data_mut().fill(0.0);
        store.get_mut(self.b).value.data_mut().fill(0.0);
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.conv3d(x, w, b)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[width], 1.0)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[width])),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, axis: usize) -> Result<Var> {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layer_norm(x, axis, gain, bias)
    }
}
