//! Universal noise training and application.
//!
//! One generator run produces a single noise artifact that is applied
//! unchanged to every input: an additive perturbation clipped to an
//! L-infinity ball, or an opaque square patch pasted at a fixed position.
//! The encoder under attack stays frozen; only generator weights move.

use std::path::Path;
use std::sync::Arc;

use ndarray::{Array1, Array2, Array3, Array4, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{derive_rng, AttackConfig, ConfigError, Mode, PatchPosition};
use crate::data::Dataset;
use crate::encoders::{EncoderError, EncoderHandle};
use crate::frequency::{FrequencyError, FrequencyFilter, DEFAULT_CUTOFF_FRACTION};
use crate::generator::{clip_noise, sample_latent, GeneratorError, GeneratorNet};
use crate::parallel::ExecMode;
use crate::serialize::{
    read_f32_raw, read_named_tensors, write_f32_raw, write_named_tensors, SerializeError,
};
use crate::tensor::{Adam, Graph, Tensor};

/// Adam momentum pair for the generator; beta1 is lowered as is usual for
/// adversarially trained decoders.
pub const GENERATOR_ADAM_BETAS: (f64, f64) = (0.5, 0.999);

const NOISE_FILE: &str = "noise.bin";
const MASK_FILE: &str = "mask.bin";
const META_FILE: &str = "meta.json";
const WEIGHTS_FILE: &str = "gen.weights";
const PREVIEW_FILE: &str = "preview.png";

#[derive(Debug, thiserror::Error)]
pub enum AttackError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Generator(#[from] GeneratorError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Frequency(#[from] FrequencyError),
    #[error(transparent)]
    Weights(#[from] SerializeError),
    #[error("patch fraction {fraction} of a {h}x{w} image rounds to side 0")]
    PatchTooSmall { fraction: f64, h: usize, w: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("surrogate set has {0} images; the contrastive term needs at least 2")]
    SurrogateTooSmall(usize),
    #[error("patch values must lie in [0, 1]; found {value} at flat index {index}")]
    PatchValueOutOfRange { index: usize, value: f64 },
    #[error("non-finite {what} at epoch {epoch} step {step}")]
    NonFinite {
        what: &'static str,
        epoch: usize,
        step: usize,
    },
    #[error("encoder produced a non-finite feature at flat index {0}")]
    NonFiniteFeature(usize),
    #[error("artifact invalid: {0}")]
    Artifact(String),
    #[error("artifact I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("artifact manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("png encode: {0}")]
    Png(#[from] image::ImageError),
}

/// Binary paste mask plus the square geometry it was built from.
#[derive(Debug, Clone)]
pub struct PatchMask {
    /// `(H, W)` grid of exact 0.0 / 1.0 values.
    pub grid: Array2<f64>,
    /// Top-left corner (row, col) of the square.
    pub origin: (usize, usize),
    /// Side length in pixels.
    pub side: usize,
}

impl PatchMask {
    /// Number of covered pixels; always `side * side`.
    pub fn area(&self) -> usize {
        self.side * self.side
    }
}

/// Builds the square paste mask for `fraction` of the image area.
///
/// The side is `floor(sqrt(fraction * H * W))`; a fraction small enough to
/// round the side to zero is an error. `BottomRight` sits flush against the
/// corner; `RandomFixed` draws the origin once from the seeded stream and
/// then keeps it fixed.
pub fn build_patch_mask(
    image_shape: (usize, usize, usize),
    fraction: f64,
    position: PatchPosition,
    seed: u64,
) -> Result<PatchMask, AttackError> {
    let (_, h, w) = image_shape;
    let side = ((fraction * (h * w) as f64).sqrt().floor()) as usize;
    if side == 0 {
        return Err(AttackError::PatchTooSmall { fraction, h, w });
    }
    let side = side.min(h).min(w);
    let origin = match position {
        PatchPosition::BottomRight => (h - side, w - side),
        PatchPosition::RandomFixed => {
            let mut rng = derive_rng(seed, "patch/origin");
            let r = rng.gen_range(0..=h - side);
            let c = rng.gen_range(0..=w - side);
            (r, c)
        }
    };
    let mut grid = Array2::<f64>::zeros((h, w));
    grid.slice_mut(ndarray::s![
        origin.0..origin.0 + side,
        origin.1..origin.1 + side
    ])
    .fill(1.0);
    Ok(PatchMask { grid, origin, side })
}

/// Adds one `[C, H, W]` noise image to every item of a `[B, C, H, W]` batch
/// and clamps the result back to `[0, 1]`.
pub fn apply_perturbation(
    x: &Array4<f64>,
    delta: &Array3<f64>,
) -> Result<Array4<f64>, AttackError> {
    let (_, c, h, w) = x.dim();
    if delta.dim() != (c, h, w) {
        return Err(AttackError::ShapeMismatch(format!(
            "batch items are {:?} but delta is {:?}",
            (c, h, w),
            delta.dim()
        )));
    }
    let mut out = x.clone();
    for mut img in out.axis_iter_mut(Axis(0)) {
        img += delta;
        img.mapv_inplace(|v| v.clamp(0.0, 1.0));
    }
    Ok(out)
}

/// Pastes a `[C, H, W]` patch with colors in `[0, 1]` over every batch item:
/// `x * (1 - m) + patch * m`. Pixels outside the mask are returned untouched.
pub fn apply_patch(
    x: &Array4<f64>,
    patch: &Array3<f64>,
    mask: &PatchMask,
) -> Result<Array4<f64>, AttackError> {
    let (_, c, h, w) = x.dim();
    if patch.dim() != (c, h, w) {
        return Err(AttackError::ShapeMismatch(format!(
            "batch items are {:?} but patch is {:?}",
            (c, h, w),
            patch.dim()
        )));
    }
    if mask.grid.dim() != (h, w) {
        return Err(AttackError::ShapeMismatch(format!(
            "image plane is {:?} but mask is {:?}",
            (h, w),
            mask.grid.dim()
        )));
    }
    if let Some((index, &value)) = patch
        .iter()
        .enumerate()
        .find(|(_, v)| !(0.0..=1.0).contains(*v))
    {
        return Err(AttackError::PatchValueOutOfRange { index, value });
    }
    let mut out = x.clone();
    for mut img in out.axis_iter_mut(Axis(0)) {
        for ci in 0..c {
            for ri in 0..h {
                for cj in 0..w {
                    if mask.grid[[ri, cj]] != 0.0 {
                        img[[ci, ri, cj]] = patch[[ci, ri, cj]];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// One logged optimizer step of the generator training loop.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    /// Weighted total objective.
    pub total: f64,
    /// Contrastive feature-divergence term, unweighted.
    pub adv: f64,
    /// High-frequency term, unweighted (never positive).
    pub hfc: f64,
    /// Pixel-space quality term, unweighted (never negative).
    pub quality: f64,
    /// Max absolute value of the stored noise after this step.
    pub delta_linf: f64,
}

/// A trained universal noise, self-describing enough to re-apply and audit.
///
/// For perturbations `delta` holds the clipped additive noise in
/// `[-epsilon, epsilon]`. For patches `delta` holds the raw generator output
/// in `(-1, 1)`; application rescales it to `[0, 1]` colors first, so the
/// stored tensor stays exactly what the generator produced.
#[derive(Clone)]
pub struct NoiseArtifact {
    pub mode: Mode,
    pub delta: Array3<f64>,
    /// `(H, W)` binary paste mask; all ones for perturbations.
    pub mask: Array2<f64>,
    /// Square geometry of the mask; `None` for perturbations.
    pub patch_geometry: Option<(usize, usize, usize)>,
    /// L-infinity budget the perturbation was clipped to.
    pub epsilon: f64,
    /// Fixed latent input the generator was trained against.
    pub latent: Array1<f64>,
    pub generator: GeneratorNet,
    /// Digest of the exact config that produced this artifact.
    pub config_digest: String,
    pub seed: u64,
    pub loss_trace: Vec<StepRecord>,
}

impl NoiseArtifact {
    /// Patch colors in `[0, 1]`, rescaled from the stored raw output.
    pub fn patch_colors(&self) -> Array3<f64> {
        self.delta.mapv(|v| (v + 1.0) * 0.5)
    }

    fn mask_struct(&self) -> PatchMask {
        let (origin_r, origin_c, side) = self
            .patch_geometry
            .unwrap_or((0, 0, self.mask.dim().0.min(self.mask.dim().1)));
        PatchMask {
            grid: self.mask.clone(),
            origin: (origin_r, origin_c),
            side,
        }
    }

    /// Applies the noise to a clean batch according to its mode.
    pub fn apply(&self, x: &Array4<f64>) -> Result<Array4<f64>, AttackError> {
        match self.mode {
            Mode::Perturbation => apply_perturbation(x, &self.delta),
            Mode::Patch => apply_patch(x, &self.patch_colors(), &self.mask_struct()),
        }
    }

    /// Checks the invariants the artifact promises its consumers.
    pub fn validate(&self) -> Result<(), AttackError> {
        let (_, h, w) = self.delta.dim();
        if self.mask.dim() != (h, w) {
            return Err(AttackError::Artifact(format!(
                "mask is {:?} but noise planes are {:?}",
                self.mask.dim(),
                (h, w)
            )));
        }
        if self.mask.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(AttackError::Artifact(
                "mask has values other than exact 0.0 / 1.0".into(),
            ));
        }
        if self.delta.iter().any(|v| !v.is_finite()) {
            return Err(AttackError::Artifact("noise has non-finite values".into()));
        }
        match self.mode {
            Mode::Perturbation => {
                if !(self.epsilon > 0.0) {
                    return Err(AttackError::Artifact(format!(
                        "epsilon must be positive, got {}",
                        self.epsilon
                    )));
                }
                if self.delta.iter().any(|v| v.abs() > self.epsilon) {
                    return Err(AttackError::Artifact(format!(
                        "perturbation exceeds the L-infinity budget {}",
                        self.epsilon
                    )));
                }
                if self.mask.iter().any(|&v| v != 1.0) {
                    return Err(AttackError::Artifact(
                        "perturbation mask must be all ones".into(),
                    ));
                }
            }
            Mode::Patch => {
                let Some((r, c, side)) = self.patch_geometry else {
                    return Err(AttackError::Artifact(
                        "patch artifact is missing its mask geometry".into(),
                    ));
                };
                if side == 0 || r + side > h || c + side > w {
                    return Err(AttackError::Artifact(format!(
                        "patch square ({r}, {c}) side {side} does not fit in {h}x{w}"
                    )));
                }
                let ones = self.mask.iter().filter(|&&v| v == 1.0).count();
                if ones != side * side {
                    return Err(AttackError::Artifact(format!(
                        "mask covers {ones} pixels but the square has {}",
                        side * side
                    )));
                }
                let square = self.mask.slice(ndarray::s![r..r + side, c..c + side]);
                if square.iter().any(|&v| v != 1.0) {
                    return Err(AttackError::Artifact(
                        "mask ones do not match the recorded square".into(),
                    ));
                }
                if self.delta.iter().any(|&v| v.abs() >= 1.0) {
                    return Err(AttackError::Artifact(
                        "raw patch values must lie strictly inside (-1, 1)".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// All-zero noise with the same geometry a trained artifact would have.
    /// Applying it is the identity (up to clamping, which zero never trips).
    pub fn zero_control(config: &AttackConfig) -> Result<Self, AttackError> {
        config.validate()?;
        let [c, h, w] = config.image_shape;
        let latent = sample_latent(config.seed, config.latent_dim);
        let generator = GeneratorNet::new(config.latent_dim, (c, h, w), config.seed)?;
        let (mask, patch_geometry) = mask_for_config(config)?;
        Ok(NoiseArtifact {
            mode: config.mode,
            delta: Array3::zeros((c, h, w)),
            mask,
            patch_geometry,
            epsilon: config.epsilon,
            latent,
            generator,
            config_digest: config.digest(),
            seed: config.seed,
            loss_trace: Vec::new(),
        })
    }

    /// Uniform random noise drawn once, matching the budget and geometry of a
    /// trained artifact: `U(-epsilon, epsilon)` per pixel for perturbations,
    /// raw `U(-1, 1)` for patches. The baseline a trained attack must beat.
    pub fn random_control(config: &AttackConfig, seed: u64) -> Result<Self, AttackError> {
        let mut artifact = Self::zero_control(config)?;
        let mut rng = derive_rng(seed, "attack/random_control");
        let bound = match config.mode {
            Mode::Perturbation => config.epsilon,
            // Strict interior keeps the raw-patch range invariant.
            Mode::Patch => 1.0 - 1e-9,
        };
        artifact.delta.mapv_inplace(|_| rng.gen_range(-bound..bound));
        artifact.seed = seed;
        Ok(artifact)
    }
}

fn mask_for_config(
    config: &AttackConfig,
) -> Result<(Array2<f64>, Option<(usize, usize, usize)>), AttackError> {
    let [_, h, w] = config.image_shape;
    match config.mode {
        Mode::Perturbation => Ok((Array2::ones((h, w)), None)),
        Mode::Patch => {
            let mask = build_patch_mask(
                (config.image_shape[0], h, w),
                config.patch_fraction,
                config.patch_position,
                config.seed,
            )?;
            let geometry = (mask.origin.0, mask.origin.1, mask.side);
            Ok((mask.grid, Some(geometry)))
        }
    }
}

/// Trains a universal noise against a frozen encoder.
///
/// One fixed latent is drawn up front; every step regenerates the noise from
/// it, builds adversarial images from the current surrogate minibatch, and
/// takes a single Adam step on the generator. Encoder weights enter the graph
/// as constants, so no gradient is ever computed for them. `epochs == 0`
/// skips the loop and returns the fresh generator's clipped output.
pub fn train_advencoder(
    config: &AttackConfig,
    encoder: &EncoderHandle,
    surrogate: &Dataset,
) -> Result<NoiseArtifact, AttackError> {
    config.validate()?;
    let [c, h, w] = config.image_shape;
    if surrogate.len() < 2 {
        return Err(AttackError::SurrogateTooSmall(surrogate.len()));
    }
    if surrogate.image_shape() != (c, h, w) {
        return Err(AttackError::ShapeMismatch(format!(
            "config expects {:?} images but the surrogate set holds {:?}",
            (c, h, w),
            surrogate.image_shape()
        )));
    }
    if encoder.input_shape() != (c, h, w) {
        return Err(AttackError::ShapeMismatch(format!(
            "config expects {:?} images but the encoder takes {:?}",
            (c, h, w),
            encoder.input_shape()
        )));
    }

    let mode = ExecMode::default_mode();
    let latent = sample_latent(config.seed, config.latent_dim);
    let mut gen = GeneratorNet::new(config.latent_dim, (c, h, w), config.seed)?;
    let (mask_grid, patch_geometry) = mask_for_config(config)?;
    let mask_arc = Arc::new(mask_grid.clone());
    let filter = Arc::new(FrequencyFilter::new(h, w, DEFAULT_CUTOFF_FRACTION)?);
    let mut adam = Adam::new(config.learning_rate, GENERATOR_ADAM_BETAS.0, GENERATOR_ADAM_BETAS.1);

    // The encoder is frozen, so clean features are computed once up front.
    let clean_all = surrogate.range_f64(0..surrogate.len());
    let clean_feats_all = encoder.forward_batch(&clean_all, mode)?;
    if let Some(pos) = clean_feats_all.iter().position(|v| !v.is_finite()) {
        return Err(AttackError::NonFiniteFeature(pos));
    }
    drop(clean_all);

    let z_row = latent
        .clone()
        .into_shape_with_order((1, config.latent_dim))
        .expect("latent reshapes to a row")
        .into_dyn();

    let mut loss_trace = Vec::new();
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..surrogate.len()).collect();
        let mut rng = derive_rng(config.seed, &format!("attack/shuffle/{epoch}"));
        order.shuffle(&mut rng);

        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            // A trailing singleton has no negatives; skip it.
            if chunk.len() < 2 {
                continue;
            }
            let x_clean = surrogate.batch_f64(chunk);
            let hfc_clean = filter.high_freq_batch(x_clean.view(), mode)?;
            let mut feats_clean = Array2::<f64>::zeros((chunk.len(), clean_feats_all.dim().1));
            for (row, &idx) in chunk.iter().enumerate() {
                feats_clean
                    .row_mut(row)
                    .assign(&clean_feats_all.row(idx));
            }

            let mut g = Graph::new(mode);
            let params = gen.insert_params(&mut g);
            let zv = g.constant(z_row.clone());
            let raw = gen.trace(&mut g, &params, zv); // [1, C, H, W]
            let x_clean_v = g.constant(x_clean.into_dyn());
            let (x_adv, stored_noise) = match config.mode {
                Mode::Perturbation => {
                    let delta = g.clamp(raw, -config.epsilon, config.epsilon);
                    let sum = g.add(x_clean_v, delta);
                    (g.clamp(sum, 0.0, 1.0), delta)
                }
                Mode::Patch => {
                    let half = g.scale(raw, 0.5);
                    let colors = g.add_scalar(half, 0.5);
                    let patch = g.reshape(colors, &[c, h, w]);
                    (g.paste(patch, x_clean_v, mask_arc.clone()), raw)
                }
            };

            let enc_params = encoder.net().insert_frozen(&mut g);
            let feats_adv = encoder.net().trace(&mut g, &enc_params, x_adv);
            if let Some(pos) = g.value(feats_adv).iter().position(|v| !v.is_finite()) {
                return Err(AttackError::NonFiniteFeature(pos));
            }
            let feats_clean_v = g.constant(feats_clean.into_dyn());
            let l_adv = g.adv_info_nce(feats_adv, feats_clean_v, config.tau);

            let low = g.spectral_low_pass(x_adv, filter.clone());
            let hfc_adv = g.sub(x_adv, low);
            let hfc_clean_v = g.constant(hfc_clean.into_dyn());
            let hfc_diff = g.sub(hfc_adv, hfc_clean_v);
            let hfc_gain = g.batch_l2_mean(hfc_diff);
            let l_hfc = g.scale(hfc_gain, -1.0);

            let quality_diff = g.sub(x_adv, x_clean_v);
            let l_q = g.batch_l2_mean(quality_diff);

            let adv_term = g.scale(l_adv, config.alpha);
            let hfc_term = g.scale(l_hfc, config.beta);
            let q_term = g.scale(l_q, config.lambda);
            let partial = g.add(adv_term, hfc_term);
            let total = g.add(partial, q_term);

            let record = StepRecord {
                epoch,
                step,
                total: scalar(g.value(total)),
                adv: scalar(g.value(l_adv)),
                hfc: scalar(g.value(l_hfc)),
                quality: scalar(g.value(l_q)),
                delta_linf: g
                    .value(stored_noise)
                    .iter()
                    .fold(0.0_f64, |m, v| m.max(v.abs())),
            };
            if !record.total.is_finite() {
                return Err(AttackError::NonFinite {
                    what: "training loss",
                    epoch,
                    step,
                });
            }

            let mut grads = g.backward(total);
            let mut tensors = gen.param_tensors_mut();
            let grad_list: Vec<Tensor> = params
                .iter()
                .zip(tensors.iter())
                .map(|(&v, t)| grads.take_or_zeros(v, t))
                .collect();
            adam.step(&mut tensors, &grad_list);
            loss_trace.push(record);
        }
    }

    let raw_final = gen.generate(&latent, mode)?;
    let delta = clip_noise(&raw_final, config.mode, config.epsilon)?;
    let delta = match config.mode {
        Mode::Perturbation => delta,
        // Patch artifacts store the raw tanh output; colors are rescaled at
        // application time.
        Mode::Patch => raw_final,
    };

    let artifact = NoiseArtifact {
        mode: config.mode,
        delta,
        mask: mask_grid,
        patch_geometry,
        epsilon: config.epsilon,
        latent,
        generator: gen,
        config_digest: config.digest(),
        seed: config.seed,
        loss_trace,
    };
    artifact.validate()?;
    Ok(artifact)
}

fn scalar(t: &Tensor) -> f64 {
    *t.iter().next().expect("scalar tensor is non-empty")
}

/// On-disk manifest stored next to the binary artifact files.
#[derive(Debug, Serialize, Deserialize)]
struct ArtifactManifest {
    tool_version: String,
    mode: Mode,
    shape: [usize; 3],
    epsilon: f64,
    seed: u64,
    config_digest: String,
    latent: Vec<f64>,
    /// (origin row, origin col, side); absent for perturbations.
    patch_geometry: Option<(usize, usize, usize)>,
    loss_trace: Vec<StepRecord>,
}

/// Writes an artifact directory: noise and mask as little-endian f32 in
/// C order, generator weights, a JSON manifest, and an 8-bit preview image.
pub fn save_artifact(artifact: &NoiseArtifact, dir: &Path) -> Result<(), AttackError> {
    artifact.validate()?;
    std::fs::create_dir_all(dir)?;
    let noise_f32: Vec<f32> = artifact.delta.iter().map(|&v| v as f32).collect();
    write_f32_raw(&dir.join(NOISE_FILE), &noise_f32)?;
    let mask_f32: Vec<f32> = artifact.mask.iter().map(|&v| v as f32).collect();
    write_f32_raw(&dir.join(MASK_FILE), &mask_f32)?;
    write_named_tensors(&dir.join(WEIGHTS_FILE), artifact.generator.named_params())?;

    let (c, h, w) = artifact.delta.dim();
    let manifest = ArtifactManifest {
        tool_version: crate::TOOL_VERSION.to_string(),
        mode: artifact.mode,
        shape: [c, h, w],
        epsilon: artifact.epsilon,
        seed: artifact.seed,
        config_digest: artifact.config_digest.clone(),
        latent: artifact.latent.to_vec(),
        patch_geometry: artifact.patch_geometry,
        loss_trace: artifact.loss_trace.clone(),
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(dir.join(META_FILE), json)?;

    write_preview(artifact, &dir.join(PREVIEW_FILE))?;
    Ok(())
}

/// Reads an artifact directory back. The f32 round trip can nudge a
/// perturbation a hair past the budget, so those values are re-clipped;
/// everything else must come back exactly as written.
pub fn load_artifact(dir: &Path) -> Result<NoiseArtifact, AttackError> {
    let json = std::fs::read_to_string(dir.join(META_FILE))?;
    let manifest: ArtifactManifest = serde_json::from_str(&json)?;
    let [c, h, w] = manifest.shape;

    let noise = read_f32_raw(&dir.join(NOISE_FILE))?;
    if noise.len() != c * h * w {
        return Err(AttackError::Artifact(format!(
            "noise.bin holds {} values but the manifest shape needs {}",
            noise.len(),
            c * h * w
        )));
    }
    let mut delta = Array3::from_shape_vec((c, h, w), noise.iter().map(|&v| v as f64).collect())
        .expect("length checked above");
    if manifest.mode == Mode::Perturbation {
        delta.mapv_inplace(|v| v.clamp(-manifest.epsilon, manifest.epsilon));
    }

    let mask_raw = read_f32_raw(&dir.join(MASK_FILE))?;
    if mask_raw.len() != h * w {
        return Err(AttackError::Artifact(format!(
            "mask.bin holds {} values but the image plane needs {}",
            mask_raw.len(),
            h * w
        )));
    }
    let mask = Array2::from_shape_vec((h, w), mask_raw.iter().map(|&v| v as f64).collect())
        .expect("length checked above");

    let entries = read_named_tensors(&dir.join(WEIGHTS_FILE))?;
    let generator = GeneratorNet::from_named_params(manifest.latent.len(), (c, h, w), entries)?;

    let artifact = NoiseArtifact {
        mode: manifest.mode,
        delta,
        mask,
        patch_geometry: manifest.patch_geometry,
        epsilon: manifest.epsilon,
        latent: Array1::from_vec(manifest.latent),
        generator,
        config_digest: manifest.config_digest,
        seed: manifest.seed,
        loss_trace: manifest.loss_trace,
    };
    artifact.validate()?;
    Ok(artifact)
}

/// Renders the noise to 8-bit. Perturbations map `[-epsilon, epsilon]` to the
/// full range via `(delta + epsilon) / (2 epsilon)`; patches render their
/// `[0, 1]` colors directly. Three channels render as RGB, anything else as
/// the channel mean in grayscale.
fn write_preview(artifact: &NoiseArtifact, path: &Path) -> Result<(), AttackError> {
    let (c, h, w) = artifact.delta.dim();
    let unit: Array3<f64> = match artifact.mode {
        Mode::Perturbation => artifact
            .delta
            .mapv(|v| (v + artifact.epsilon) / (2.0 * artifact.epsilon)),
        Mode::Patch => artifact.patch_colors(),
    };
    let to_byte = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    if c == 3 {
        let mut img = image::RgbImage::new(w as u32, h as u32);
        for ri in 0..h {
            for cj in 0..w {
                let px = image::Rgb([
                    to_byte(unit[[0, ri, cj]]),
                    to_byte(unit[[1, ri, cj]]),
                    to_byte(unit[[2, ri, cj]]),
                ]);
                img.put_pixel(cj as u32, ri as u32, px);
            }
        }
        img.save(path)?;
    } else {
        let mut img = image::GrayImage::new(w as u32, h as u32);
        for ri in 0..h {
            for cj in 0..w {
                let mean = (0..c).map(|ci| unit[[ci, ri, cj]]).sum::<f64>() / c as f64;
                img.put_pixel(cj as u32, ri as u32, image::Luma([to_byte(mean)]));
            }
        }
        img.save(path)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Split;
    use crate::data::synthetic_classes;
    use crate::encoders::{train_toy_encoder, Method};
    use crate::generator::generate_noise;

    fn toy_config(mode: Mode) -> AttackConfig {
        let mut cfg = AttackConfig::default();
        cfg.mode = mode;
        cfg.image_shape = [3, 16, 16];
        cfg.latent_dim = 8;
        cfg.epochs = 2;
        cfg.batch_size = 8;
        cfg.seed = 7;
        cfg
    }

    fn toy_encoder() -> &'static EncoderHandle {
        static ENCODER: std::sync::OnceLock<EncoderHandle> = std::sync::OnceLock::new();
        ENCODER.get_or_init(|| {
            let data = synthetic_classes("enc-train", 512, 4, (3, 16, 16), 11);
            train_toy_encoder(&data, Method::SimclrStyle, 11, 1, 64).unwrap()
        })
    }

    fn toy_surrogate() -> Dataset {
        synthetic_classes("surrogate", 32, 4, (3, 16, 16), 13)
    }

    #[test]
    fn bottom_right_mask_matches_hand_geometry() {
        let mask = build_patch_mask((3, 64, 64), 0.03, PatchPosition::BottomRight, 0).unwrap();
        assert_eq!(mask.side, 11);
        assert_eq!(mask.origin, (53, 53));
        assert_eq!(mask.area(), 121);
        assert_eq!(mask.grid.sum(), 121.0);
        assert_eq!(mask.grid[[53, 53]], 1.0);
        assert_eq!(mask.grid[[52, 53]], 0.0);
        assert_eq!(mask.grid[[63, 63]], 1.0);
    }

    #[test]
    fn full_fraction_covers_the_whole_plane() {
        let mask = build_patch_mask((3, 32, 32), 1.0, PatchPosition::BottomRight, 0).unwrap();
        assert_eq!(mask.side, 32);
        assert_eq!(mask.origin, (0, 0));
        assert_eq!(mask.grid.sum(), 1024.0);
    }

    #[test]
    fn vanishing_fraction_is_rejected() {
        let err = build_patch_mask((3, 64, 64), 0.0001, PatchPosition::BottomRight, 0);
        assert!(matches!(err, Err(AttackError::PatchTooSmall { .. })));
    }

    #[test]
    fn random_origin_is_seed_deterministic_and_in_bounds() {
        let a = build_patch_mask((3, 64, 64), 0.03, PatchPosition::RandomFixed, 5).unwrap();
        let b = build_patch_mask((3, 64, 64), 0.03, PatchPosition::RandomFixed, 5).unwrap();
        assert_eq!(a.origin, b.origin);
        assert!(a.origin.0 + a.side <= 64 && a.origin.1 + a.side <= 64);
        let c = build_patch_mask((3, 64, 64), 0.03, PatchPosition::RandomFixed, 6).unwrap();
        assert_ne!(a.origin, c.origin, "seeds 5 and 6 happen to collide");
    }

    #[test]
    fn zero_delta_is_the_identity() {
        let x = Array4::from_shape_fn((2, 3, 4, 4), |(b, c, i, j)| {
            (b + c + i + j) as f64 / 16.0
        });
        let out = apply_perturbation(&x, &Array3::zeros((3, 4, 4))).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn perturbation_adds_then_clamps() {
        let eps = 10.0 / 255.0;
        let x = Array4::from_elem((1, 3, 2, 2), 0.5);
        let delta = Array3::from_elem((3, 2, 2), eps);
        let out = apply_perturbation(&x, &delta).unwrap();
        assert!((out[[0, 0, 0, 0]] - (0.5 + eps)).abs() < 1e-15);

        let bright = Array4::from_elem((1, 3, 2, 2), 1.0);
        let clamped = apply_perturbation(&bright, &delta).unwrap();
        assert_eq!(clamped[[0, 1, 1, 1]], 1.0);
    }

    #[test]
    fn perturbation_shape_mismatch_is_rejected() {
        let x = Array4::zeros((1, 3, 4, 4));
        let err = apply_perturbation(&x, &Array3::zeros((3, 4, 5)));
        assert!(matches!(err, Err(AttackError::ShapeMismatch(_))));
    }

    #[test]
    fn patch_respects_the_mask_exactly() {
        let mask = build_patch_mask((3, 64, 64), 0.03, PatchPosition::BottomRight, 0).unwrap();
        let x = Array4::from_shape_fn((2, 3, 64, 64), |(b, c, i, j)| {
            ((b * 7 + c * 13 + i * 3 + j) % 97) as f64 / 96.0
        });
        let patch = Array3::from_elem((3, 64, 64), 1.0);
        let out = apply_patch(&x, &patch, &mask).unwrap();
        for b in 0..2 {
            for c in 0..3 {
                for i in 0..64 {
                    for j in 0..64 {
                        if mask.grid[[i, j]] == 1.0 {
                            assert_eq!(out[[b, c, i, j]], 1.0);
                        } else {
                            // Bitwise equality outside the mask.
                            assert_eq!(
                                out[[b, c, i, j]].to_bits(),
                                x[[b, c, i, j]].to_bits()
                            );
                        }
                    }
                }
            }
        }
        // An all-zero clean batch makes the covered area directly countable.
        let zeros = Array4::zeros((1, 3, 64, 64));
        let pasted = apply_patch(&zeros, &patch, &mask).unwrap();
        assert_eq!(pasted.index_axis(Axis(0), 0).index_axis(Axis(0), 0).sum(), 121.0);
    }

    #[test]
    fn degenerate_masks_paste_nothing_or_everything() {
        let x = Array4::from_elem((1, 1, 3, 3), 0.25);
        let patch = Array3::from_elem((1, 3, 3), 0.75);
        let empty = PatchMask {
            grid: Array2::zeros((3, 3)),
            origin: (0, 0),
            side: 0,
        };
        assert_eq!(apply_patch(&x, &patch, &empty).unwrap(), x);
        let full = PatchMask {
            grid: Array2::ones((3, 3)),
            origin: (0, 0),
            side: 3,
        };
        let out = apply_patch(&x, &patch, &full).unwrap();
        assert!(out.iter().all(|&v| v == 0.75));
    }

    #[test]
    fn out_of_range_patch_colors_are_rejected() {
        let x = Array4::zeros((1, 1, 3, 3));
        let mut patch = Array3::from_elem((1, 3, 3), 0.5);
        patch[[0, 1, 1]] = 1.5;
        let mask = PatchMask {
            grid: Array2::ones((3, 3)),
            origin: (0, 0),
            side: 3,
        };
        let err = apply_patch(&x, &patch, &mask);
        assert!(matches!(
            err,
            Err(AttackError::PatchValueOutOfRange { value, .. }) if value == 1.5
        ));
    }

    #[test]
    fn zero_epochs_returns_the_fresh_generator_output() {
        let mut cfg = toy_config(Mode::Perturbation);
        cfg.epochs = 0;
        let encoder = toy_encoder();
        let surrogate = toy_surrogate();
        let artifact = train_advencoder(&cfg, encoder, &surrogate).unwrap();
        assert!(artifact.loss_trace.is_empty());

        let latent = sample_latent(cfg.seed, cfg.latent_dim);
        let fresh = GeneratorNet::new(cfg.latent_dim, (3, 16, 16), cfg.seed).unwrap();
        let raw = generate_noise(&fresh, &latent).unwrap();
        let expected = clip_noise(&raw, Mode::Perturbation, cfg.epsilon).unwrap();
        assert_eq!(artifact.delta, expected);
    }

    #[test]
    fn training_is_deterministic_and_respects_the_budget() {
        let cfg = toy_config(Mode::Perturbation);
        let encoder = toy_encoder();
        let surrogate = toy_surrogate();
        let a = train_advencoder(&cfg, encoder, &surrogate).unwrap();
        let b = train_advencoder(&cfg, encoder, &surrogate).unwrap();
        assert_eq!(a.delta, b.delta);
        assert_eq!(a.loss_trace.len(), b.loss_trace.len());
        for (ra, rb) in a.loss_trace.iter().zip(&b.loss_trace) {
            assert_eq!(ra.total.to_bits(), rb.total.to_bits());
        }
        assert!(!a.loss_trace.is_empty());
        for rec in &a.loss_trace {
            assert!(rec.total.is_finite());
            assert!(rec.hfc <= 0.0);
            assert!(rec.quality >= 0.0);
            assert!(rec.delta_linf <= cfg.epsilon);
        }
        assert!(a.delta.iter().all(|v| v.abs() <= cfg.epsilon));
        a.validate().unwrap();
    }

    #[test]
    fn patch_training_keeps_pixels_outside_the_mask() {
        let cfg = toy_config(Mode::Patch);
        let encoder = toy_encoder();
        let surrogate = toy_surrogate();
        let artifact = train_advencoder(&cfg, encoder, &surrogate).unwrap();
        artifact.validate().unwrap();
        assert!(artifact.delta.iter().all(|v| v.abs() < 1.0));
        let (_, _, side) = artifact.patch_geometry.unwrap();
        assert_eq!(artifact.mask.sum() as usize, side * side);

        let x = surrogate.range_f64(0..4);
        let adv = artifact.apply(&x).unwrap();
        for b in 0..4 {
            for c in 0..3 {
                for i in 0..16 {
                    for j in 0..16 {
                        if artifact.mask[[i, j]] == 0.0 {
                            assert_eq!(
                                adv[[b, c, i, j]].to_bits(),
                                x[[b, c, i, j]].to_bits()
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn tiny_surrogate_is_rejected() {
        let cfg = toy_config(Mode::Perturbation);
        let encoder = toy_encoder();
        let one = toy_surrogate().subset(&[0], "single");
        let err = train_advencoder(&cfg, encoder, &one);
        assert!(matches!(err, Err(AttackError::SurrogateTooSmall(1))));
    }

    #[test]
    fn artifact_directory_round_trips() {
        let cfg = toy_config(Mode::Perturbation);
        let encoder = toy_encoder();
        let surrogate = toy_surrogate();
        let artifact = train_advencoder(&cfg, encoder, &surrogate).unwrap();

        let dir = tempfile::tempdir().unwrap();
        save_artifact(&artifact, dir.path()).unwrap();
        for name in [NOISE_FILE, MASK_FILE, META_FILE, WEIGHTS_FILE, PREVIEW_FILE] {
            assert!(dir.path().join(name).exists(), "{name} missing");
        }
        let back = load_artifact(dir.path()).unwrap();
        assert_eq!(back.mode, artifact.mode);
        assert_eq!(back.mask, artifact.mask);
        assert_eq!(back.latent, artifact.latent);
        assert_eq!(back.config_digest, artifact.config_digest);
        assert_eq!(back.loss_trace.len(), artifact.loss_trace.len());
        // The noise survives the f32 round trip to f32 precision.
        for (a, b) in artifact.delta.iter().zip(back.delta.iter()) {
            assert_eq!((*a as f32).to_bits(), (*b as f32).to_bits());
        }
        // Generator weights are stored at full precision.
        for ((na, ta), (nb, tb)) in artifact
            .generator
            .named_params()
            .iter()
            .zip(back.generator.named_params())
        {
            assert_eq!(na, nb);
            assert_eq!(ta, tb);
        }
        back.validate().unwrap();
    }

    #[test]
    fn tampered_mask_fails_to_load() {
        let cfg = toy_config(Mode::Patch);
        let encoder = toy_encoder();
        let surrogate = toy_surrogate();
        let artifact = train_advencoder(&cfg, encoder, &surrogate).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_artifact(&artifact, dir.path()).unwrap();

        let mut mask = read_f32_raw(&dir.path().join(MASK_FILE)).unwrap();
        mask[0] = 0.5;
        write_f32_raw(&dir.path().join(MASK_FILE), &mask).unwrap();
        let err = load_artifact(dir.path());
        assert!(matches!(err, Err(AttackError::Artifact(_))));
    }

    #[test]
    fn controls_match_the_trained_geometry() {
        let cfg = toy_config(Mode::Perturbation);
        let zero = NoiseArtifact::zero_control(&cfg).unwrap();
        assert!(zero.delta.iter().all(|&v| v == 0.0));
        zero.validate().unwrap();
        let x = Array4::from_elem((2, 3, 16, 16), 0.5);
        assert_eq!(zero.apply(&x).unwrap(), x);

        let rand = NoiseArtifact::random_control(&cfg, 99).unwrap();
        rand.validate().unwrap();
        assert!(rand.delta.iter().any(|&v| v != 0.0));
        assert!(rand.delta.iter().all(|v| v.abs() <= cfg.epsilon));
        let again = NoiseArtifact::random_control(&cfg, 99).unwrap();
        assert_eq!(rand.delta, again.delta);

        let patch_cfg = toy_config(Mode::Patch);
        let patch_rand = NoiseArtifact::random_control(&patch_cfg, 99).unwrap();
        patch_rand.validate().unwrap();
        assert!(patch_rand.delta.iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn split_display_is_stable() {
        // Keeps the dataset-naming convention used across modules honest.
        assert_eq!(Split::Train.to_string(), "train");
        assert_eq!(Split::Test.to_string(), "test");
    }
}
