//! Parameter bundles for the layers used across the network, with seeded
//! initialization.

use ndarray::{Array1, Array4};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, NodeId, ParamId, ParamStore, Real};
use crate::error::Result;

/// Convolution weights (and optional bias) registered in a [`ParamStore`].
#[derive(Debug, Clone, Copy)]
pub struct ConvParams {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

/// Per-channel affine parameters of a group normalization.
#[derive(Debug, Clone, Copy)]
pub struct GnParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

/// Standard normal draw; all randomness goes through f64 so f32 and f64
/// models built from one seed share the same weight sequence.
fn normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen::<f64>().max(1e-12);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Fan-out-scaled conv init: std = sqrt(2 / (c_out * k * k)). Used in the
/// backbone streams, where every conv is followed by a group norm.
pub fn conv_init<F: Real>(
    store: &mut ParamStore<F>,
    rng: &mut ChaCha8Rng,
    name: &str,
    c_out: usize,
    c_in: usize,
    k: usize,
    bias: bool,
    stride: usize,
    pad: usize,
) -> ConvParams {
    let std = (2.0 / (c_out * k * k) as f64).sqrt();
    conv_init_std(store, rng, name, c_out, c_in, k, std, bias, stride, pad)
}

/// Variance-preserving (Glorot) conv init: std = sqrt(2 / (fan_in + fan_out)).
/// Used for the fusion convs, which carry no normalization; fan-out scaling
/// there would amplify activations whenever c_in > c_out.
pub fn conv_init_glorot<F: Real>(
    store: &mut ParamStore<F>,
    rng: &mut ChaCha8Rng,
    name: &str,
    c_out: usize,
    c_in: usize,
    k: usize,
    bias: bool,
    stride: usize,
    pad: usize,
) -> ConvParams {
    let fan = ((c_in + c_out) * k * k) as f64;
    let std = (2.0 / fan).sqrt();
    conv_init_std(store, rng, name, c_out, c_in, k, std, bias, stride, pad)
}

/// Conv init with an explicit weight std. The detection head uses std = 0.01
/// so that initial logits are dominated by the classification prior bias.
pub fn conv_init_std<F: Real>(
    store: &mut ParamStore<F>,
    rng: &mut ChaCha8Rng,
    name: &str,
    c_out: usize,
    c_in: usize,
    k: usize,
    std: f64,
    bias: bool,
    stride: usize,
    pad: usize,
) -> ConvParams {
    let w = Array4::from_shape_fn((c_out, c_in, k, k), |_| F::from_f64(normal(rng) * std));
    let w = store.add(format!("{name}.w"), w.into_dyn());
    let b = bias.then(|| store.add(format!("{name}.b"), Array1::<F>::zeros(c_out).into_dyn()));
    ConvParams { w, b, stride, pad }
}

/// Group count: aim for 4 channels per group, at most 8 groups, and always
/// dividing the channel count.
pub fn group_count(channels: usize) -> usize {
    let mut g = (channels / 4).clamp(1, 8);
    while channels % g != 0 {
        g -= 1;
    }
    g
}

pub fn gn_init<F: Real>(store: &mut ParamStore<F>, name: &str, channels: usize) -> GnParams {
    let gamma = store.add(format!("{name}.gamma"), Array1::from_elem(channels, F::one()).into_dyn());
    let beta = store.add(format!("{name}.beta"), Array1::<F>::zeros(channels).into_dyn());
    GnParams {
        gamma,
        beta,
        groups: group_count(channels),
    }
}

impl ConvParams {
    pub fn apply<F: Real>(&self, g: &mut Graph<'_, F>, x: NodeId) -> Result<NodeId> {
        let w = g.param(self.w);
        let b = self.b.map(|b| g.param(b));
        g.conv2d(x, w, b, self.stride, self.pad)
    }
}

impl GnParams {
    pub fn apply<F: Real>(&self, g: &mut Graph<'_, F>, x: NodeId) -> Result<NodeId> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.group_norm(x, gamma, beta, self.groups, 1e-5)
    }
}
