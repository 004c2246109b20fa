//! Victim encoders: a small convolutional backbone trained with a
//! contrastive objective, frozen behind `EncoderHandle`, plus downstream
//! heads (linear probe or retrieval gallery) bound to one encoder id.
//!
//! The backbone is four 3x3 stride-2 conv+relu stages (16/32/64/128
//! channels) pooled to a 128-dim feature. Pre-training follows the usual
//! two-view recipe: seeded crop/flip/color-jitter augmentations, a two-layer
//! projection head, and the normalized-temperature cross-entropy loss at
//! tau = 0.5. The projection head is discarded from the returned handle.
//!
//! Nothing in this crate mutates a handle's parameters; defenses that
//! retrain produce new handles with new ids. The shared training core also
//! serves adversarial pre-training (defenses module): an optional PGD spec
//! replaces the second view by a loss-maximizing perturbation. With zero PGD
//! steps the core consumes no PGD randomness, so runs are bit-identical to
//! plain pre-training.

use std::fmt;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Array3, Array4, ArrayView3, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

use crate::config::{derive_rng, sha256_hex};
use crate::data::{resize_bilinear, Dataset};
use crate::parallel::ExecMode;
use crate::serialize::{read_named_tensors, write_named_tensors, SerializeError};
use crate::tensor::{conv2d_forward, Adam, Graph, Tensor, Var};

pub const FEATURE_DIM: usize = 128;
pub const STAGE_CHANNELS: [usize; 4] = [16, 32, 64, 128];
pub const PROJECTION_DIM: usize = 64;
pub const CONTRASTIVE_TAU: f64 = 0.5;
pub const CONTRASTIVE_LR: f64 = 1e-3;
pub const DEFAULT_PROBE_EPOCHS: usize = 30;
pub const PROBE_LR: f64 = 0.01;
pub const MIN_PRETRAIN_IMAGES: usize = 512;
const ARCH_TAG: &str = "conv4x3s2-16-32-64-128-gap";
const ENCODE_CHUNK: usize = 64;

#[derive(Debug, thiserror::Error)]
pub enum EncoderError {
    #[error("dataset has {got} images, pre-training needs at least {need}")]
    DatasetTooSmall { got: usize, need: usize },
    #[error("batch shape {got:?} does not match encoder input {want:?}")]
    ShapeMismatch { got: (usize, usize, usize), want: (usize, usize, usize) },
    #[error("feature row {0} has zero norm and cannot be normalized")]
    ZeroNormRow(usize),
    #[error("training loss became non-finite in epoch {0}")]
    NonFiniteLoss(usize),
    #[error("dataset has no labels; a labeled set is required")]
    Unlabeled,
    #[error("dataset holds a single class; need at least two")]
    SingleClass,
    #[error("checkpoint path {0} does not exist")]
    MissingFile(PathBuf),
    #[error("checkpoint manifest: {0}")]
    Manifest(String),
    #[error("unsupported architecture tag {0:?}")]
    UnsupportedArchitecture(String),
    #[error("head is bound to encoder {head:?} but was evaluated with {encoder:?}")]
    EncoderMismatch { head: String, encoder: String },
    #[error("operation needs a {want} head, got {got}")]
    HeadKind { want: &'static str, got: &'static str },
    #[error(transparent)]
    Weights(#[from] SerializeError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Pre-training method family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    SimclrStyle,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::SimclrStyle => "simclr_style",
        })
    }
}

/// How an encoder came to be; feeds the handle id digest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub method: String,
    pub dataset: String,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Free-form extras (final loss, defense parameters).
    pub note: String,
}

/// Four-stage convolutional backbone with global average pooling.
#[derive(Clone)]
pub struct ConvEncoder {
    pub input_shape: (usize, usize, usize),
    params: Vec<(String, Tensor)>,
}

impl ConvEncoder {
    pub fn new(input_shape: (usize, usize, usize), seed: u64) -> Self {
        let (c, _, _) = input_shape;
        let mut rng = derive_rng(seed, "encoder/init/backbone");
        let mut params = Vec::new();
        let mut in_ch = c;
        for (i, &out_ch) in STAGE_CHANNELS.iter().enumerate() {
            let fan_in = (in_ch * 9) as f64;
            let std = (2.0 / fan_in).sqrt();
            params.push((
                format!("stage{i}.conv.w"),
                gaussian(&mut rng, &[out_ch, in_ch, 3, 3], std),
            ));
            params.push((format!("stage{i}.conv.b"), Tensor::zeros(ndarray::IxDyn(&[out_ch]))));
            in_ch = out_ch;
        }
        Self { input_shape, params }
    }

    pub fn feature_dim(&self) -> usize {
        FEATURE_DIM
    }

    pub(crate) fn named_params(&self) -> &[(String, Tensor)] {
        &self.params
    }

    pub(crate) fn param_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.params.iter_mut().map(|(_, t)| t).collect()
    }

    /// Replaces parameters from named tensors, verifying names and shapes.
    pub(crate) fn load_named_params(
        &mut self,
        entries: Vec<(String, Tensor)>,
    ) -> Result<(), EncoderError> {
        if entries.len() != self.params.len() {
            return Err(EncoderError::Manifest(format!(
                "{} weight tensors stored, architecture has {}",
                entries.len(),
                self.params.len()
            )));
        }
        for ((name, value), (want, slot)) in entries.into_iter().zip(self.params.iter_mut()) {
            if &name != want {
                return Err(EncoderError::Manifest(format!(
                    "tensor {name:?} where {want:?} was expected"
                )));
            }
            if value.shape() != slot.shape() {
                return Err(EncoderError::Manifest(format!(
                    "{name}: shape {:?} vs expected {:?}",
                    value.shape(),
                    slot.shape()
                )));
            }
            *slot = value;
        }
        Ok(())
    }

    /// Plain forward pass to pooled features, [B, FEATURE_DIM].
    pub fn forward(&self, x: &Array4<f64>, mode: ExecMode) -> Array2<f64> {
        let mut cur = x.clone();
        for i in 0..STAGE_CHANNELS.len() {
            let w = as4(&self.params[2 * i].1);
            let b = as1(&self.params[2 * i + 1].1);
            cur = conv2d_forward(cur.view(), w.view(), Some(&b), 2, 1, mode);
            cur.mapv_inplace(|v| v.max(0.0));
        }
        let (n, c, h, w) = cur.dim();
        let scale = 1.0 / (h * w) as f64;
        Array2::from_shape_fn((n, c), |(bi, ci)| {
            cur.index_axis(Axis(0), bi)
                .index_axis(Axis(0), ci)
                .sum()
                * scale
        })
    }

    /// Inserts parameters as frozen constants (attack and evaluation paths).
    pub(crate) fn insert_frozen(&self, g: &mut Graph) -> Vec<Var> {
        self.params.iter().map(|(_, t)| g.constant(t.clone())).collect()
    }

    /// Inserts parameters as trainable leaves (pre-training and fine-tuning).
    pub(crate) fn insert_trainable(&self, g: &mut Graph) -> Vec<Var> {
        self.params.iter().map(|(_, t)| g.leaf(t.clone())).collect()
    }

    /// Traces the forward map inside `g`; `params` must follow the fixed
    /// parameter order.
    pub(crate) fn trace(&self, g: &mut Graph, params: &[Var], x: Var) -> Var {
        assert_eq!(params.len(), self.params.len());
        let mut cur = x;
        for i in 0..STAGE_CHANNELS.len() {
            let conv = g.conv2d(cur, params[2 * i], Some(params[2 * i + 1]), 2, 1);
            cur = g.relu(conv);
        }
        g.global_avg_pool(cur)
    }
}

/// Clamps `v` onto the epsilon ball around `r` intersected with `[0, 1]`,
/// such that the measured difference `|result - r|` never exceeds `eps`.
/// `r + eps` alone can round one ULP past the budget, so the bounds walk
/// back until the difference itself passes.
fn project_ball(v: f64, r: f64, eps: f64) -> f64 {
    let mut hi = r + eps;
    while hi - r > eps {
        hi = hi.next_down();
    }
    let mut lo = r - eps;
    while r - lo > eps {
        lo = lo.next_up();
    }
    v.min(hi).max(lo).clamp(0.0, 1.0)
}

fn gaussian(rng: &mut ChaCha20Rng, shape: &[usize], std: f64) -> Tensor {
    use rand_distr::{Distribution, StandardNormal};
    Tensor::from_shape_fn(ndarray::IxDyn(shape), |_| {
        let v: f64 = StandardNormal.sample(rng);
        v * std
    })
}

fn as4(t: &Tensor) -> Array4<f64> {
    t.clone().into_dimensionality().expect("rank-4 tensor")
}

fn as1(t: &Tensor) -> Array1<f64> {
    t.clone().into_dimensionality().expect("rank-1 tensor")
}

/// Two-layer projection head used only during pre-training.
#[derive(Clone)]
pub(crate) struct ProjectionHead {
    params: Vec<(String, Tensor)>,
}

impl ProjectionHead {
    pub(crate) fn new(seed: u64) -> Self {
        let mut rng = derive_rng(seed, "encoder/init/head");
        let params = vec![
            (
                "proj1.w".to_string(),
                gaussian(&mut rng, &[FEATURE_DIM, FEATURE_DIM], (2.0 / FEATURE_DIM as f64).sqrt()),
            ),
            ("proj1.b".to_string(), Tensor::zeros(ndarray::IxDyn(&[FEATURE_DIM]))),
            (
                "proj2.w".to_string(),
                gaussian(&mut rng, &[FEATURE_DIM, PROJECTION_DIM], (1.0 / FEATURE_DIM as f64).sqrt()),
            ),
            ("proj2.b".to_string(), Tensor::zeros(ndarray::IxDyn(&[PROJECTION_DIM]))),
        ];
        Self { params }
    }

    fn insert_trainable(&self, g: &mut Graph) -> Vec<Var> {
        self.params.iter().map(|(_, t)| g.leaf(t.clone())).collect()
    }

    fn insert_frozen(&self, g: &mut Graph) -> Vec<Var> {
        self.params.iter().map(|(_, t)| g.constant(t.clone())).collect()
    }

    fn param_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.params.iter_mut().map(|(_, t)| t).collect()
    }

    fn trace(&self, g: &mut Graph, params: &[Var], feats: Var) -> Var {
        let h1 = g.matmul(feats, params[0]);
        let h1 = g.add_row(h1, params[1]);
        let h1 = g.relu(h1);
        let h2 = g.matmul(h1, params[2]);
        g.add_row(h2, params[3])
    }
}

/// Frozen encoder plus identity and provenance. The id digests architecture,
/// weights, and provenance, so retrained variants never collide.
#[derive(Clone)]
pub struct EncoderHandle {
    net: ConvEncoder,
    pub id: String,
    pub provenance: Provenance,
}

impl EncoderHandle {
    pub(crate) fn from_parts(net: ConvEncoder, provenance: Provenance) -> Self {
        let id = compute_id(&net, &provenance);
        Self { net, id, provenance }
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        self.net.input_shape
    }

    pub fn feature_dim(&self) -> usize {
        self.net.feature_dim()
    }

    pub(crate) fn net(&self) -> &ConvEncoder {
        &self.net
    }

    /// Forward pass with input-shape validation.
    pub fn forward_batch(
        &self,
        x: &Array4<f64>,
        mode: ExecMode,
    ) -> Result<Array2<f64>, EncoderError> {
        let (_, c, h, w) = x.dim();
        if (c, h, w) != self.net.input_shape {
            return Err(EncoderError::ShapeMismatch {
                got: (c, h, w),
                want: self.net.input_shape,
            });
        }
        Ok(self.net.forward(x, mode))
    }
}

fn compute_id(net: &ConvEncoder, provenance: &Provenance) -> String {
    let mut bytes: Vec<u8> = Vec::new();
    bytes.extend_from_slice(ARCH_TAG.as_bytes());
    let (c, h, w) = net.input_shape;
    for d in [c, h, w] {
        bytes.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for (name, tensor) in net.named_params() {
        bytes.extend_from_slice(name.as_bytes());
        for &v in tensor.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    bytes.extend_from_slice(
        serde_json::to_string(provenance)
            .expect("provenance serializes")
            .as_bytes(),
    );
    format!("enc-{}", &sha256_hex(&bytes)[..12])
}

/// Feature rows plus a flag recording whether they were L2-normalized.
pub struct FeatureBatch {
    pub rows: Array2<f64>,
    pub normalized: bool,
}

/// Encodes a batch, optionally normalizing each feature row to unit L2 norm.
pub fn encode_batch(
    handle: &EncoderHandle,
    x: &Array4<f64>,
    normalize: bool,
) -> Result<FeatureBatch, EncoderError> {
    let mode = ExecMode::default_mode();
    let n = x.dim().0;
    let mut rows = Array2::<f64>::zeros((n, handle.feature_dim()));
    let mut start = 0;
    while start < n {
        let end = (start + ENCODE_CHUNK).min(n);
        let chunk = x.slice(ndarray::s![start..end, .., .., ..]).to_owned();
        let feats = handle.forward_batch(&chunk, mode)?;
        rows.slice_mut(ndarray::s![start..end, ..]).assign(&feats);
        start = end;
    }
    if normalize {
        for (i, mut row) in rows.axis_iter_mut(Axis(0)).enumerate() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(EncoderError::ZeroNormRow(i));
            }
            row.mapv_inplace(|v| v / norm);
        }
    }
    Ok(FeatureBatch { rows, normalized: normalize })
}

/// One random crop/flip/color-jitter view. Draw order is fixed (scale, row,
/// col, flip, brightness, contrast, saturation) so streams stay aligned.
pub(crate) fn augment_view(img: ArrayView3<'_, f64>, rng: &mut ChaCha20Rng) -> Array3<f64> {
    let (c, h, w) = img.dim();
    let scale: f64 = rng.gen_range(0.5..=1.0);
    let side_h = ((scale.sqrt() * h as f64).round() as usize).clamp(1, h);
    let side_w = ((scale.sqrt() * w as f64).round() as usize).clamp(1, w);
    let y0 = rng.gen_range(0..=h - side_h);
    let x0 = rng.gen_range(0..=w - side_w);
    let flip = rng.gen_bool(0.5);
    let brightness: f64 = 1.0 + rng.gen_range(-0.4..0.4);
    let contrast: f64 = 1.0 + rng.gen_range(-0.4..0.4);
    let saturation: f64 = 1.0 + rng.gen_range(-0.4..0.4);

    let crop = img.slice(ndarray::s![.., y0..y0 + side_h, x0..x0 + side_w]);
    let crop_f32 = crop.mapv(|v| v as f32);
    let resized = resize_bilinear(&crop_f32, h, w);
    let mut out = resized.mapv(f64::from);
    if flip {
        out.invert_axis(Axis(2));
    }

    out.mapv_inplace(|v| v * brightness);
    let mean = out.sum() / (c * h * w) as f64;
    out.mapv_inplace(|v| mean + (v - mean) * contrast);
    for y in 0..h {
        for x in 0..w {
            let mut gray = 0.0;
            for ch in 0..c {
                gray += out[[ch, y, x]];
            }
            gray /= c as f64;
            for ch in 0..c {
                let v = out[[ch, y, x]];
                out[[ch, y, x]] = gray + (v - gray) * saturation;
            }
        }
    }
    out.mapv_inplace(|v| v.clamp(0.0, 1.0));
    out
}

/// Inner-maximization settings for adversarial pre-training.
#[derive(Debug, Clone, Copy)]
pub(crate) struct PgdSpec {
    pub epsilon: f64,
    pub steps: usize,
}

pub(crate) struct ContrastiveOptions<'a> {
    pub dataset: &'a Dataset,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub pgd: Option<PgdSpec>,
}

pub(crate) struct ContrastiveOutcome {
    pub encoder: ConvEncoder,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub epoch_losses: Vec<f64>,
    /// Largest `|x' - x|` any PGD iterate ever reached; `None` without PGD.
    /// The projection bounds it by epsilon, and callers may hold it to that.
    pub pgd_max_deviation: Option<f64>,
}

/// Shared two-view contrastive loop. When `pgd` requests steps > 0, the
/// second view of every pair is replaced by its loss-maximizing PGD iterate
/// before the parameter step; with steps = 0 (or None) no PGD randomness is
/// consumed, so the run is bit-identical to plain pre-training.
pub(crate) fn contrastive_train_core(
    opts: ContrastiveOptions<'_>,
) -> Result<ContrastiveOutcome, EncoderError> {
    let ds = opts.dataset;
    if ds.len() < MIN_PRETRAIN_IMAGES {
        return Err(EncoderError::DatasetTooSmall { got: ds.len(), need: MIN_PRETRAIN_IMAGES });
    }
    let shape = ds.image_shape();
    let mode = ExecMode::default_mode();
    let mut encoder = ConvEncoder::new(shape, opts.seed);
    let mut head = ProjectionHead::new(opts.seed);
    let mut adam = Adam::new(CONTRASTIVE_LR, 0.9, 0.999);
    let pgd_steps = opts.pgd.map_or(0, |p| p.steps);

    let mut initial_loss = f64::NAN;
    let mut seen_first = false;
    let mut epoch_losses = Vec::with_capacity(opts.epochs);
    let mut pgd_max_deviation: Option<f64> = None;
    for epoch in 0..opts.epochs {
        let mut order: Vec<usize> = (0..ds.len()).collect();
        let mut shuffle_rng = derive_rng(opts.seed, &format!("encoder/shuffle/{epoch}"));
        order.shuffle(&mut shuffle_rng);

        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (bi, chunk) in order.chunks(opts.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let b = chunk.len();
            let (c, h, w) = shape;
            let mut views = Array4::<f64>::zeros((2 * b, c, h, w));
            let mut aug_rng = derive_rng(opts.seed, &format!("encoder/aug/{epoch}/{bi}"));
            let batch = ds.batch_f64(chunk);
            for (row, img) in batch.axis_iter(Axis(0)).enumerate() {
                let v1 = augment_view(img, &mut aug_rng);
                let v2 = augment_view(img, &mut aug_rng);
                views.index_axis_mut(Axis(0), row).assign(&v1);
                views.index_axis_mut(Axis(0), row + b).assign(&v2);
            }

            if pgd_steps > 0 {
                let spec = opts.pgd.expect("steps > 0 implies a spec");
                let mut pgd_rng =
                    derive_rng(opts.seed, &format!("encoder/pgd/{epoch}/{bi}"));
                let reference = views.slice(ndarray::s![b.., .., .., ..]).to_owned();
                let mut adv = reference.clone();
                for (v, &r) in adv.iter_mut().zip(reference.iter()) {
                    let moved = *v + pgd_rng.gen_range(-spec.epsilon..=spec.epsilon);
                    *v = project_ball(moved, r, spec.epsilon);
                }
                let step = 2.5 * spec.epsilon / pgd_steps as f64;
                for _ in 0..pgd_steps {
                    let mut full = views.clone();
                    full.slice_mut(ndarray::s![b.., .., .., ..]).assign(&adv);
                    let mut g = Graph::new(mode);
                    let x = g.leaf(full.into_dyn());
                    let enc_vars = encoder.insert_frozen(&mut g);
                    let head_vars = head.insert_frozen(&mut g);
                    let feats = encoder.trace(&mut g, &enc_vars, x);
                    let z = head.trace(&mut g, &head_vars, feats);
                    let loss = g.nt_xent(z, CONTRASTIVE_TAU);
                    let mut grads = g.backward(loss);
                    let gx = grads.take_or_zeros(x, g.value(x));
                    let gx4: Array4<f64> = gx.into_dimensionality().expect("rank 4");
                    for (row, gr) in adv.axis_iter_mut(Axis(0)).zip(
                        gx4.axis_iter(Axis(0)).skip(b),
                    ) {
                        let mut row = row;
                        ndarray::Zip::from(&mut row).and(&gr).for_each(|a, &gv| {
                            *a += step * gv.signum();
                        });
                    }
                    // Project back onto the epsilon ball, then the pixel box.
                    ndarray::Zip::from(&mut adv).and(&reference).for_each(|a, &r| {
                        *a = project_ball(*a, r, spec.epsilon);
                    });
                    let mut dev = 0.0_f64;
                    ndarray::Zip::from(&adv).and(&reference).for_each(|&a, &r| {
                        dev = dev.max((a - r).abs());
                    });
                    pgd_max_deviation = Some(pgd_max_deviation.unwrap_or(0.0).max(dev));
                }
                views.slice_mut(ndarray::s![b.., .., .., ..]).assign(&adv);
            }

            let mut g = Graph::new(mode);
            let x = g.constant(views.into_dyn());
            let enc_vars = encoder.insert_trainable(&mut g);
            let head_vars = head.insert_trainable(&mut g);
            let feats = encoder.trace(&mut g, &enc_vars, x);
            let z = head.trace(&mut g, &head_vars, feats);
            let loss = g.nt_xent(z, CONTRASTIVE_TAU);
            let loss_value = g.scalar(loss);
            if !loss_value.is_finite() {
                return Err(EncoderError::NonFiniteLoss(epoch));
            }
            if !seen_first {
                initial_loss = loss_value;
                seen_first = true;
            }
            loss_sum += loss_value;
            batches += 1;

            let mut grads = g.backward(loss);
            let all_vars: Vec<Var> = enc_vars.iter().chain(head_vars.iter()).copied().collect();
            let grad_tensors: Vec<Tensor> = all_vars
                .iter()
                .map(|v| grads.take_or_zeros(*v, g.value(*v)))
                .collect();
            let mut param_refs = encoder.param_tensors_mut();
            param_refs.extend(head.param_tensors_mut());
            adam.step(&mut param_refs, &grad_tensors);
        }
        epoch_losses.push(if batches > 0 { loss_sum / batches as f64 } else { f64::NAN });
    }

    let final_loss = epoch_losses.last().copied().unwrap_or(initial_loss);
    Ok(ContrastiveOutcome { encoder, initial_loss, final_loss, epoch_losses, pgd_max_deviation })
}

/// Pre-trains the toy encoder and returns it frozen, projection head
/// discarded.
pub fn train_toy_encoder(
    dataset: &Dataset,
    method: Method,
    seed: u64,
    epochs: usize,
    batch_size: usize,
) -> Result<EncoderHandle, EncoderError> {
    let outcome = contrastive_train_core(ContrastiveOptions {
        dataset,
        seed,
        epochs,
        batch_size,
        pgd: None,
    })?;
    let provenance = Provenance {
        method: method.to_string(),
        dataset: dataset.name.clone(),
        seed,
        epochs,
        batch_size,
        note: format!(
            "tau={CONTRASTIVE_TAU} lr={CONTRASTIVE_LR} final_loss={:.6}",
            outcome.final_loss
        ),
    };
    Ok(EncoderHandle::from_parts(outcome.encoder, provenance))
}

/// Classifier or retrieval head bound to the encoder that produced its
/// features.
#[derive(Debug, Clone)]
pub enum DownstreamHead {
    LinearProbe {
        /// [FEATURE_DIM, classes] weight matrix applied as `f * W + b`.
        weights: Array2<f64>,
        bias: Array1<f64>,
        classes: usize,
        encoder_id: String,
        epochs: usize,
        lr: f64,
    },
    RetrievalGallery {
        features: Array2<f64>,
        labels: Vec<usize>,
        normalized: bool,
        encoder_id: String,
    },
}

impl DownstreamHead {
    pub fn encoder_id(&self) -> &str {
        match self {
            DownstreamHead::LinearProbe { encoder_id, .. } => encoder_id,
            DownstreamHead::RetrievalGallery { encoder_id, .. } => encoder_id,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            DownstreamHead::LinearProbe { .. } => "linear_probe",
            DownstreamHead::RetrievalGallery { .. } => "retrieval_gallery",
        }
    }

    /// Argmax class predictions from feature rows (ties resolve to the
    /// lowest class index). Linear-probe heads only.
    pub fn predict(&self, features: &Array2<f64>) -> Result<Vec<usize>, EncoderError> {
        let DownstreamHead::LinearProbe { weights, bias, .. } = self else {
            return Err(EncoderError::HeadKind { want: "linear_probe", got: self.kind() });
        };
        let logits = features.dot(weights) + &bias.view().insert_axis(Axis(0));
        Ok(logits
            .axis_iter(Axis(0))
            .map(|row| {
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect())
    }
}

/// Fits a linear softmax classifier on fixed feature rows. Zero epochs
/// returns the all-zero initialization.
pub(crate) fn fit_linear_head(
    features: &Array2<f64>,
    labels: &[usize],
    classes: usize,
    epochs: usize,
    lr: f64,
    seed: u64,
) -> (Array2<f64>, Array1<f64>) {
    let dim = features.ncols();
    let mut w = Array2::<f64>::zeros((dim, classes));
    let mut b = Array1::<f64>::zeros(classes);
    let mut adam = Adam::new(lr, 0.9, 0.999);
    let mode = ExecMode::default_mode();
    let batch = 128usize;
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..features.nrows()).collect();
        let mut rng = derive_rng(seed, &format!("probe/shuffle/{epoch}"));
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            let rows = Array2::from_shape_fn((chunk.len(), dim), |(i, j)| {
                features[[chunk[i], j]]
            });
            let chunk_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let mut g = Graph::new(mode);
            let f = g.constant(rows.into_dyn());
            let wv = g.leaf(w.clone().into_dyn());
            let bv = g.leaf(b.clone().into_dyn());
            let logits = g.matmul(f, wv);
            let logits = g.add_row(logits, bv);
            let loss = g.softmax_cross_entropy(logits, Arc::new(chunk_labels));
            let mut grads = g.backward(loss);
            let gw = grads.take_or_zeros(wv, g.value(wv));
            let gb = grads.take_or_zeros(bv, g.value(bv));
            let mut wd = w.clone().into_dyn();
            let mut bd = b.clone().into_dyn();
            adam.step(&mut [&mut wd, &mut bd], &[gw, gb]);
            w = wd.into_dimensionality().expect("rank 2");
            b = bd.into_dimensionality().expect("rank 1");
        }
    }
    (w, b)
}

/// Trains a linear probe on frozen features.
pub fn train_linear_probe(
    handle: &EncoderHandle,
    labeled: &Dataset,
    epochs: usize,
    seed: u64,
) -> Result<DownstreamHead, EncoderError> {
    let labels = labeled.labels().ok_or(EncoderError::Unlabeled)?;
    let distinct: std::collections::BTreeSet<usize> = labels.iter().copied().collect();
    if distinct.len() < 2 {
        return Err(EncoderError::SingleClass);
    }
    let classes = labeled
        .class_count
        .unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    let all = labeled.range_f64(0..labeled.len());
    let feats = encode_batch(handle, &all, false)?;
    let (weights, bias) = fit_linear_head(&feats.rows, labels, classes, epochs, PROBE_LR, seed);
    Ok(DownstreamHead::LinearProbe {
        weights,
        bias,
        classes,
        encoder_id: handle.id.clone(),
        epochs,
        lr: PROBE_LR,
    })
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    architecture_tag: String,
    input_shape: [usize; 3],
    feature_dim: usize,
    id: String,
    provenance: Provenance,
}

/// Writes `manifest.json` + `weights.bin` under `dir`.
pub fn save_encoder(handle: &EncoderHandle, dir: &Path) -> Result<(), EncoderError> {
    std::fs::create_dir_all(dir)?;
    let (c, h, w) = handle.input_shape();
    let manifest = CheckpointManifest {
        architecture_tag: ARCH_TAG.to_string(),
        input_shape: [c, h, w],
        feature_dim: handle.feature_dim(),
        id: handle.id.clone(),
        provenance: handle.provenance.clone(),
    };
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    write_named_tensors(&dir.join("weights.bin"), handle.net.named_params())?;
    Ok(())
}

/// Loads a checkpoint directory, verifying the manifest against the stored
/// weights. The id is recomputed from content.
pub fn load_encoder(path: &Path) -> Result<EncoderHandle, EncoderError> {
    let manifest_path = path.join("manifest.json");
    if !manifest_path.exists() {
        return Err(EncoderError::MissingFile(manifest_path));
    }
    let manifest: CheckpointManifest =
        serde_json::from_str(&std::fs::read_to_string(&manifest_path)?)?;
    if manifest.architecture_tag != ARCH_TAG {
        return Err(EncoderError::UnsupportedArchitecture(manifest.architecture_tag));
    }
    if manifest.feature_dim != FEATURE_DIM {
        return Err(EncoderError::Manifest(format!(
            "manifest feature_dim {} but this architecture outputs {}",
            manifest.feature_dim, FEATURE_DIM
        )));
    }
    let [c, h, w] = manifest.input_shape;
    let mut net = ConvEncoder::new((c, h, w), 0);
    let entries = read_named_tensors(&path.join("weights.bin"))?;
    net.load_named_params(entries)?;
    Ok(EncoderHandle::from_parts(net, manifest.provenance))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic_classes, two_class_brightness};

    fn tiny_dataset(n: usize, seed: u64) -> Dataset {
        synthetic_classes("tiny", n, 4, (3, 16, 16), seed)
    }

    #[test]
    fn forward_shape_and_determinism() {
        let enc = ConvEncoder::new((3, 16, 16), 1);
        let x = tiny_dataset(8, 2).range_f64(0..8);
        let a = enc.forward(&x, ExecMode::Sequential);
        assert_eq!(a.dim(), (8, FEATURE_DIM));
        let b = enc.forward(&x, ExecMode::Parallel);
        assert_eq!(a.as_slice().unwrap(), b.as_slice().unwrap());
    }

    #[test]
    fn forward_is_permutation_equivariant() {
        let enc = ConvEncoder::new((3, 16, 16), 3);
        let x = tiny_dataset(6, 4).range_f64(0..6);
        let feats = enc.forward(&x, ExecMode::Sequential);
        let perm = [4usize, 0, 5, 2, 1, 3];
        let xp = {
            let mut out = x.clone();
            for (row, &src) in perm.iter().enumerate() {
                out.index_axis_mut(Axis(0), row)
                    .assign(&x.index_axis(Axis(0), src));
            }
            out
        };
        let featsp = enc.forward(&xp, ExecMode::Sequential);
        for (row, &src) in perm.iter().enumerate() {
            assert_eq!(
                featsp.row(row).to_vec(),
                feats.row(src).to_vec(),
                "row {row} must equal unpermuted row {src}"
            );
        }
    }

    #[test]
    fn trace_matches_plain_forward() {
        let enc = ConvEncoder::new((3, 16, 16), 5);
        let x = tiny_dataset(4, 6).range_f64(0..4);
        let plain = enc.forward(&x, ExecMode::Sequential);
        let mut g = Graph::new(ExecMode::Sequential);
        let xv = g.constant(x.into_dyn());
        let params = enc.insert_frozen(&mut g);
        let out = enc.trace(&mut g, &params, xv);
        let traced = g.value(out);
        assert_eq!(plain.into_dyn().as_slice().unwrap(), traced.as_slice().unwrap());
    }

    #[test]
    fn encode_batch_normalizes_rows_and_rejects_zero_features() {
        let ds = tiny_dataset(5, 7);
        let handle = EncoderHandle::from_parts(
            ConvEncoder::new((3, 16, 16), 8),
            Provenance {
                method: "simclr_style".into(),
                dataset: ds.name.clone(),
                seed: 8,
                epochs: 0,
                batch_size: 64,
                note: String::new(),
            },
        );
        let x = ds.range_f64(0..5);
        let fb = encode_batch(&handle, &x, true).unwrap();
        assert!(fb.normalized);
        for row in fb.rows.axis_iter(Axis(0)) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6);
        }
        let raw = encode_batch(&handle, &x, false).unwrap();
        assert!(!raw.normalized);

        let mut zeroed = ConvEncoder::new((3, 16, 16), 9);
        for t in zeroed.param_tensors_mut() {
            t.fill(0.0);
        }
        let zero_handle = EncoderHandle::from_parts(zeroed, handle.provenance.clone());
        assert!(matches!(
            encode_batch(&zero_handle, &x, true),
            Err(EncoderError::ZeroNormRow(0))
        ));
        let wrong = Array4::<f64>::zeros((2, 3, 8, 8));
        assert!(matches!(
            handle.forward_batch(&wrong, ExecMode::Sequential),
            Err(EncoderError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn augmentation_is_stream_deterministic_and_stays_in_range() {
        let ds = tiny_dataset(1, 10);
        let img = ds.range_f64(0..1);
        let view = img.index_axis(Axis(0), 0);
        let mut r1 = derive_rng(1, "aug-test");
        let mut r2 = derive_rng(1, "aug-test");
        let a = augment_view(view, &mut r1);
        let b = augment_view(view, &mut r2);
        assert_eq!(a.as_slice().unwrap(), b.as_slice().unwrap());
        assert_eq!(a.dim(), (3, 16, 16));
        assert!(a.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let c = augment_view(view, &mut r1);
        assert!(a.iter().zip(c.iter()).any(|(x, y)| x != y));
    }

    #[test]
    fn pretraining_rejects_small_datasets() {
        let ds = tiny_dataset(100, 11);
        assert!(matches!(
            train_toy_encoder(&ds, Method::SimclrStyle, 1, 1, 32),
            Err(EncoderError::DatasetTooSmall { got: 100, need: 512 })
        ));
    }

    #[test]
    fn pretraining_is_seed_deterministic_and_loss_decreases() {
        let ds = tiny_dataset(512, 12);
        let run = |seed| {
            contrastive_train_core(ContrastiveOptions {
                dataset: &ds,
                seed,
                epochs: 1,
                batch_size: 64,
                pgd: None,
            })
            .unwrap()
        };
        let a = run(100);
        let b = run(100);
        assert_eq!(
            a.final_loss.to_bits(),
            b.final_loss.to_bits(),
            "same seed must reproduce the loss bit-for-bit"
        );
        assert_eq!(a.epoch_losses.len(), 1);
        assert!(a.epoch_losses.iter().all(|l| l.is_finite()));
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.epoch_losses), bits(&b.epoch_losses));
        for ((_, ta), (_, tb)) in a.encoder.named_params().iter().zip(b.encoder.named_params()) {
            assert_eq!(ta.as_slice().unwrap(), tb.as_slice().unwrap());
        }
        assert!(
            a.final_loss < a.initial_loss,
            "one epoch should reduce the loss: {} -> {}",
            a.initial_loss,
            a.final_loss
        );
        let c = run(101);
        assert_ne!(a.final_loss.to_bits(), c.final_loss.to_bits());
    }

    #[test]
    fn one_hot_features_probe_to_near_perfect_accuracy() {
        let classes = 3;
        let n = 60;
        let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
        let feats = Array2::from_shape_fn((n, classes), |(i, j)| {
            if labels[i] == j {
                1.0
            } else {
                0.0
            }
        });
        let (w, b) = fit_linear_head(&feats, &labels, classes, 30, PROBE_LR, 1);
        let logits = feats.dot(&w) + &b.view().insert_axis(Axis(0));
        let correct = logits
            .axis_iter(Axis(0))
            .zip(&labels)
            .filter(|(row, &l)| {
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best == l
            })
            .count();
        assert!(correct as f64 / n as f64 >= 0.99, "{correct}/{n}");
    }

    #[test]
    fn zero_epoch_probe_keeps_its_initialization() {
        let feats = Array2::from_shape_fn((10, 4), |(i, j)| (i * 4 + j) as f64 / 40.0);
        let labels: Vec<usize> = (0..10).map(|i| i % 2).collect();
        let (w, b) = fit_linear_head(&feats, &labels, 2, 0, PROBE_LR, 1);
        assert!(w.iter().all(|&v| v == 0.0));
        assert!(b.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn probe_rejects_unlabeled_and_single_class_sets() {
        let enc = EncoderHandle::from_parts(
            ConvEncoder::new((3, 16, 16), 13),
            Provenance {
                method: "simclr_style".into(),
                dataset: "x".into(),
                seed: 13,
                epochs: 0,
                batch_size: 64,
                note: String::new(),
            },
        );
        let imgs = tiny_dataset(8, 14).images().to_owned();
        let unlabeled = Dataset::new("u", imgs.clone(), None, None).unwrap();
        assert!(matches!(
            train_linear_probe(&enc, &unlabeled, 1, 0),
            Err(EncoderError::Unlabeled)
        ));
        let single = Dataset::new("s", imgs, Some(vec![0; 8]), Some(4)).unwrap();
        assert!(matches!(
            train_linear_probe(&enc, &single, 1, 0),
            Err(EncoderError::SingleClass)
        ));
    }

    #[test]
    fn training_improves_probe_over_random_initialization() {
        let ds = two_class_brightness("sep", 512, (3, 16, 16), 15);
        let trained = train_toy_encoder(&ds, Method::SimclrStyle, 100, 2, 64).unwrap();
        let untrained = train_toy_encoder(&ds, Method::SimclrStyle, 100, 0, 64).unwrap();

        let accuracy = |handle: &EncoderHandle| -> f64 {
            let head = train_linear_probe(handle, &ds, 10, 0).unwrap();
            let feats = encode_batch(handle, &ds.range_f64(0..ds.len()), false).unwrap();
            let preds = head.predict(&feats.rows).unwrap();
            let hits = preds
                .iter()
                .zip(ds.labels().unwrap())
                .filter(|(p, l)| p == l)
                .count();
            hits as f64 / ds.len() as f64
        };
        let at = accuracy(&trained);
        let au = accuracy(&untrained);
        assert!(
            at >= 0.9,
            "trained encoder should separate the brightness classes, got {at}"
        );
        assert!(at >= au, "trained {at} vs untrained {au}");
    }

    #[test]
    fn checkpoint_roundtrip_preserves_identity_and_features() {
        let ds = tiny_dataset(6, 16);
        let handle = EncoderHandle::from_parts(
            ConvEncoder::new((3, 16, 16), 17),
            Provenance {
                method: "simclr_style".into(),
                dataset: ds.name.clone(),
                seed: 17,
                epochs: 0,
                batch_size: 64,
                note: "unit".into(),
            },
        );
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc");
        save_encoder(&handle, &path).unwrap();
        let back = load_encoder(&path).unwrap();
        assert_eq!(back.id, handle.id);
        let x = ds.range_f64(0..6);
        let a = handle.forward_batch(&x, ExecMode::Sequential).unwrap();
        let b = back.forward_batch(&x, ExecMode::Sequential).unwrap();
        assert_eq!(a.as_slice().unwrap(), b.as_slice().unwrap());

        assert!(matches!(
            load_encoder(&dir.path().join("missing")),
            Err(EncoderError::MissingFile(_))
        ));

        let manifest_path = path.join("manifest.json");
        let text = std::fs::read_to_string(&manifest_path).unwrap();
        std::fs::write(&manifest_path, text.replace("\"feature_dim\": 128", "\"feature_dim\": 64"))
            .unwrap();
        assert!(matches!(
            load_encoder(&path),
            Err(EncoderError::Manifest(_))
        ));
        let text = std::fs::read_to_string(&manifest_path)
            .unwrap()
            .replace(ARCH_TAG, "resnet50");
        std::fs::write(&manifest_path, text).unwrap();
        assert!(matches!(
            load_encoder(&path),
            Err(EncoderError::UnsupportedArchitecture(_))
        ));
    }

    #[test]
    fn handle_ids_track_weights_and_provenance() {
        let prov = Provenance {
            method: "simclr_style".into(),
            dataset: "d".into(),
            seed: 1,
            epochs: 1,
            batch_size: 64,
            note: String::new(),
        };
        let a = EncoderHandle::from_parts(ConvEncoder::new((3, 16, 16), 1), prov.clone());
        let b = EncoderHandle::from_parts(ConvEncoder::new((3, 16, 16), 1), prov.clone());
        assert_eq!(a.id, b.id);
        let c = EncoderHandle::from_parts(ConvEncoder::new((3, 16, 16), 2), prov.clone());
        assert_ne!(a.id, c.id);
        let mut prov2 = prov;
        prov2.note = "defended".into();
        let d = EncoderHandle::from_parts(ConvEncoder::new((3, 16, 16), 1), prov2);
        assert_ne!(a.id, d.id);
    }
}
