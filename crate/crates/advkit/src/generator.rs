//! The noise generator G and the post-generation clipping step.
//!
//! G is a fixed decoder: a dense projection of the latent vector to a 4x4
//! grid with 256 channels, then repeated [2x nearest upsample, 3x3 conv,
//! channel norm, relu] blocks halving the channel count (floor 16) until the
//! spatial target is reached, and a final 3x3 conv squashed by tanh. The
//! layout is fully determined by `out_shape`, so capacity is reproducible.
//!
//! `clip_noise` maps the raw tanh output to the constraint set: an
//! elementwise clamp to the epsilon ball for additive perturbations, or an
//! affine rescale from (-1, 1) to [0, 1] for patches, whose pixels are
//! absolute colors rather than offsets.

use ndarray::{Array1, Array3, ArrayD, IxDyn};
use rand_distr::{Distribution, StandardNormal};

use crate::config::{derive_rng, Mode};
use crate::parallel::ExecMode;
use crate::tensor::{Graph, Tensor, Var};

const BASE_CHANNELS: usize = 256;
const BASE_SIDE: usize = 4;
const MIN_CHANNELS: usize = 16;
const INIT_STD: f64 = 0.02;
const NORM_EPS: f64 = 1e-5;

#[derive(Debug, thiserror::Error)]
pub enum GeneratorError {
    #[error("latent length {got} does not match latent_dim {want}")]
    LatentMismatch { got: usize, want: usize },
    #[error("unsupported output shape {0:?}: need C >= 1 and square H = W = 4 * 2^k with k >= 1")]
    BadShape((usize, usize, usize)),
    #[error("epsilon {0} must be positive and finite in perturbation mode")]
    BadEpsilon(f64),
    #[error("stored parameter set does not match the architecture: {0}")]
    ParamMismatch(String),
}

/// Draws the fixed standard-normal latent vector for an attack run.
pub fn sample_latent(seed: u64, latent_dim: usize) -> Array1<f64> {
    assert!(latent_dim >= 1, "latent_dim must be >= 1");
    let mut rng = derive_rng(seed, "generator/latent");
    Array1::from_shape_fn(latent_dim, |_| StandardNormal.sample(&mut rng))
}

/// Decoder network mapping a latent vector to a (C, H, W) noise image.
#[derive(Clone)]
pub struct GeneratorNet {
    pub latent_dim: usize,
    pub out_shape: (usize, usize, usize),
    pub architecture_tag: String,
    /// (name, tensor) pairs in a fixed order; the order is the serialization
    /// and optimizer contract.
    params: Vec<(String, Tensor)>,
    block_channels: Vec<usize>,
}

impl GeneratorNet {
    /// Builds a freshly initialized generator. Weights are zero-mean normal
    /// with std 0.02 from a stream derived from `seed`; norm scales start at
    /// one, all biases and norm shifts at zero.
    pub fn new(
        latent_dim: usize,
        out_shape: (usize, usize, usize),
        seed: u64,
    ) -> Result<Self, GeneratorError> {
        assert!(latent_dim >= 1, "latent_dim must be >= 1");
        let (c, h, w) = out_shape;
        let blocks = match block_count(c, h, w) {
            Some(b) => b,
            None => return Err(GeneratorError::BadShape(out_shape)),
        };
        let mut block_channels = Vec::with_capacity(blocks);
        let mut ch = BASE_CHANNELS;
        for _ in 0..blocks {
            ch = (ch / 2).max(MIN_CHANNELS);
            block_channels.push(ch);
        }

        let mut rng = derive_rng(seed, "generator/init");
        let mut normal = |shape: &[usize]| -> Tensor {
            ArrayD::from_shape_fn(IxDyn(shape), |_| {
                let v: f64 = StandardNormal.sample(&mut rng);
                v * INIT_STD
            })
        };

        let dense_out = BASE_CHANNELS * BASE_SIDE * BASE_SIDE;
        let mut params: Vec<(String, Tensor)> = Vec::new();
        params.push(("dense.w".into(), normal(&[latent_dim, dense_out])));
        params.push(("dense.b".into(), ArrayD::zeros(IxDyn(&[dense_out]))));
        let mut in_ch = BASE_CHANNELS;
        for (i, &out_ch) in block_channels.iter().enumerate() {
            params.push((
                format!("block{i}.conv.w"),
                normal(&[out_ch, in_ch, 3, 3]),
            ));
            params.push((format!("block{i}.conv.b"), ArrayD::zeros(IxDyn(&[out_ch]))));
            params.push((
                format!("block{i}.norm.gamma"),
                ArrayD::ones(IxDyn(&[out_ch])),
            ));
            params.push((format!("block{i}.norm.beta"), ArrayD::zeros(IxDyn(&[out_ch]))));
            in_ch = out_ch;
        }
        params.push(("final.conv.w".into(), normal(&[c, in_ch, 3, 3])));
        params.push(("final.conv.b".into(), ArrayD::zeros(IxDyn(&[c]))));

        Ok(Self {
            latent_dim,
            out_shape,
            architecture_tag: format!(
                "decoder-{BASE_SIDE}x{BASE_SIDE}x{BASE_CHANNELS}-blocks{blocks}-tanh"
            ),
            params,
            block_channels,
        })
    }

    /// Reconstructs a generator from serialized parameters, verifying every
    /// name and shape against a freshly derived architecture.
    pub fn from_named_params(
        latent_dim: usize,
        out_shape: (usize, usize, usize),
        entries: Vec<(String, Tensor)>,
    ) -> Result<Self, GeneratorError> {
        let mut net = Self::new(latent_dim, out_shape, 0)?;
        if entries.len() != net.params.len() {
            return Err(GeneratorError::ParamMismatch(format!(
                "{} tensors stored, architecture has {}",
                entries.len(),
                net.params.len()
            )));
        }
        for ((name, value), (want_name, slot)) in entries.into_iter().zip(net.params.iter_mut()) {
            if &name != want_name {
                return Err(GeneratorError::ParamMismatch(format!(
                    "tensor {name:?} where {want_name:?} was expected"
                )));
            }
            if value.shape() != slot.shape() {
                return Err(GeneratorError::ParamMismatch(format!(
                    "{name}: shape {:?} vs expected {:?}",
                    value.shape(),
                    slot.shape()
                )));
            }
            *slot = value;
        }
        Ok(net)
    }

    pub fn named_params(&self) -> &[(String, Tensor)] {
        &self.params
    }

    /// Mutable views over all parameter tensors in fixed order, for the
    /// optimizer step.
    pub fn param_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.params.iter_mut().map(|(_, t)| t).collect()
    }

    /// Inserts every parameter into `g` as a gradient-carrying leaf, in the
    /// same fixed order as `named_params`.
    pub fn insert_params(&self, g: &mut Graph) -> Vec<Var> {
        self.params
            .iter()
            .map(|(_, t)| g.leaf(t.clone()))
            .collect()
    }

    /// Traces the forward map inside `g`. `params` must come from
    /// `insert_params` (or constants of the same shapes) and `z` must hold a
    /// [1, latent_dim] row. Returns the [1, C, H, W] tanh output.
    pub fn trace(&self, g: &mut Graph, params: &[Var], z: Var) -> Var {
        assert_eq!(params.len(), self.params.len(), "parameter count mismatch");
        let (c, h, w) = self.out_shape;
        let mut it = params.iter().copied();
        let mut next = || it.next().expect("parameter list exhausted");

        let dense_w = next();
        let dense_b = next();
        let pre = g.matmul(z, dense_w);
        let pre = g.add_row(pre, dense_b);
        let mut x = g.reshape(pre, &[1, BASE_CHANNELS, BASE_SIDE, BASE_SIDE]);
        for _ in 0..self.block_channels.len() {
            let conv_w = next();
            let conv_b = next();
            let gamma = next();
            let beta = next();
            let up = g.upsample2x(x);
            let conv = g.conv2d(up, conv_w, Some(conv_b), 1, 1);
            let norm = g.channel_norm(conv, gamma, beta, NORM_EPS);
            x = g.relu(norm);
        }
        let final_w = next();
        let final_b = next();
        let out = g.conv2d(x, final_w, Some(final_b), 1, 1);
        debug_assert_eq!(g.value(out).shape(), &[1, c, h, w]);
        g.tanh(out)
    }

    /// Plain forward pass; convenience wrapper over a throwaway graph.
    pub fn generate(&self, z: &Array1<f64>, mode: ExecMode) -> Result<Array3<f64>, GeneratorError> {
        if z.len() != self.latent_dim {
            return Err(GeneratorError::LatentMismatch {
                got: z.len(),
                want: self.latent_dim,
            });
        }
        let mut g = Graph::new(mode);
        let params: Vec<Var> = self
            .params
            .iter()
            .map(|(_, t)| g.constant(t.clone()))
            .collect();
        let zr = g.constant(
            z.clone()
                .into_shape_with_order(IxDyn(&[1, self.latent_dim]))
                .expect("row reshape"),
        );
        let out = self.trace(&mut g, &params, zr);
        let (c, h, w) = self.out_shape;
        let full = g.value(out).clone();
        Ok(full
            .into_shape_with_order((c, h, w))
            .expect("squeeze batch axis"))
    }
}

fn block_count(c: usize, h: usize, w: usize) -> Option<usize> {
    if c == 0 || h != w || h < 2 * BASE_SIDE {
        return None;
    }
    let ratio = h / BASE_SIDE;
    if h % BASE_SIDE != 0 || !ratio.is_power_of_two() {
        return None;
    }
    Some(ratio.trailing_zeros() as usize)
}

/// Free-function form of the forward map.
pub fn generate_noise(
    net: &GeneratorNet,
    z: &Array1<f64>,
) -> Result<Array3<f64>, GeneratorError> {
    net.generate(z, ExecMode::default_mode())
}

/// Projects raw generator output onto the constraint set for `mode`.
///
/// Perturbation: elementwise clamp to [-epsilon, epsilon]. Patch: affine
/// rescale (v + 1) / 2, mapping the tanh range (-1, 1) onto [0, 1]; epsilon
/// is ignored because patches are constrained by area, not amplitude.
pub fn clip_noise(
    raw: &Array3<f64>,
    mode: Mode,
    epsilon: f64,
) -> Result<Array3<f64>, GeneratorError> {
    match mode {
        Mode::Perturbation => {
            if !(epsilon > 0.0 && epsilon.is_finite()) {
                return Err(GeneratorError::BadEpsilon(epsilon));
            }
            Ok(raw.mapv(|v| v.clamp(-epsilon, epsilon)))
        }
        Mode::Patch => Ok(raw.mapv(|v| (v + 1.0) / 2.0)),
    }
}
