//! Run configuration, validation, and content digests.
//!
//! An [`AttackConfig`] fully determines a noise-training run: given the same
//! config, encoder, and surrogate data, two runs produce the same artifact.
//! Its [`digest`](AttackConfig::digest) is a content hash over a canonical
//! field-ordered serialization and is stamped into every produced artifact so
//! downstream tooling can tell which settings made a file.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

/// Noise family being trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Additive noise bounded in L-infinity norm, applied to every pixel.
    Perturbation,
    /// Opaque patch with absolute colors pasted over a small region.
    Patch,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mode::Perturbation => write!(f, "perturbation"),
            Mode::Patch => write!(f, "patch"),
        }
    }
}

/// Placement rule for the square patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchPosition {
    /// Patch sits flush against the bottom-right image corner.
    BottomRight,
    /// Origin drawn once from the seeded stream, then fixed for the run.
    RandomFixed,
}

impl fmt::Display for PatchPosition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PatchPosition::BottomRight => write!(f, "bottom_right"),
            PatchPosition::RandomFixed => write!(f, "random_fixed"),
        }
    }
}

fn default_mode() -> Mode {
    Mode::Perturbation
}
fn default_epsilon() -> f64 {
    10.0 / 255.0
}
fn default_patch_fraction() -> f64 {
    0.03
}
fn default_patch_position() -> PatchPosition {
    PatchPosition::BottomRight
}
fn default_alpha() -> f64 {
    1.0
}
fn default_beta() -> f64 {
    5.0
}
fn default_lambda() -> f64 {
    1.0
}
fn default_tau() -> f64 {
    0.1
}
fn default_latent_dim() -> usize {
    100
}
fn default_epochs() -> usize {
    20
}
fn default_batch_size() -> usize {
    256
}
fn default_learning_rate() -> f64 {
    2e-4
}
fn default_seed() -> u64 {
    100
}
fn default_image_shape() -> [usize; 3] {
    [3, 64, 64]
}

/// Complete specification of a noise-training run.
///
/// Field names double as the config-file keys; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    /// Which noise family to train.
    #[serde(default = "default_mode")]
    pub mode: Mode,
    /// L-infinity budget for perturbation mode, in pixel units of `[0, 1]`.
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    /// Patch area as a fraction of image area, patch mode only.
    #[serde(default = "default_patch_fraction")]
    pub patch_fraction: f64,
    /// Patch placement rule.
    #[serde(default = "default_patch_position")]
    pub patch_position: PatchPosition,
    /// Weight of the contrastive feature-divergence term.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Weight of the high-frequency term.
    #[serde(default = "default_beta")]
    pub beta: f64,
    /// Weight of the pixel-space quality term.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Softmax temperature of the contrastive term.
    #[serde(default = "default_tau")]
    pub tau: f64,
    /// Length of the latent vector fed to the generator.
    #[serde(default = "default_latent_dim")]
    pub latent_dim: usize,
    /// Passes over the surrogate set. Zero is allowed and skips training.
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Surrogate minibatch size; the contrastive term needs at least 2.
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Adam step size for the generator.
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    /// Root seed; every random stream in the run derives from it.
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Image tensor shape as `[channels, height, width]`.
    #[serde(default = "default_image_shape")]
    pub image_shape: [usize; 3],
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            mode: default_mode(),
            epsilon: default_epsilon(),
            patch_fraction: default_patch_fraction(),
            patch_position: default_patch_position(),
            alpha: default_alpha(),
            beta: default_beta(),
            lambda: default_lambda(),
            tau: default_tau(),
            latent_dim: default_latent_dim(),
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            learning_rate: default_learning_rate(),
            seed: default_seed(),
            image_shape: default_image_shape(),
        }
    }
}

/// Configuration failures surfaced before any training starts.
#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{field} out of range: {detail}")]
    OutOfRange {
        field: &'static str,
        detail: String,
    },
    #[error("failed to parse config: {0}")]
    Parse(String),
    #[error("config I/O: {0}")]
    Io(#[from] std::io::Error),
}

impl AttackConfig {
    /// Checks every field against its allowed range and returns the config
    /// unchanged on success. Validation is idempotent.
    pub fn validate(&self) -> Result<(), ConfigError> {
        fn bad(field: &'static str, detail: String) -> ConfigError {
            ConfigError::OutOfRange { field, detail }
        }
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return Err(bad("epsilon", format!("{} not in (0, 1]", self.epsilon)));
        }
        if !(self.patch_fraction > 0.0 && self.patch_fraction <= 1.0) {
            return Err(bad(
                "patch_fraction",
                format!("{} not in (0, 1]", self.patch_fraction),
            ));
        }
        for (field, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("lambda", self.lambda),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(bad(field, format!("{v} must be finite and >= 0")));
            }
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(bad("tau", format!("{} must be positive", self.tau)));
        }
        if self.latent_dim == 0 {
            return Err(bad("latent_dim", "must be >= 1".into()));
        }
        if self.batch_size < 2 {
            return Err(bad(
                "batch_size",
                format!("{} too small; contrastive loss needs >= 2", self.batch_size),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(bad(
                "learning_rate",
                format!("{} must be positive", self.learning_rate),
            ));
        }
        let [c, h, w] = self.image_shape;
        if c == 0 || h < 2 || w < 2 {
            return Err(bad(
                "image_shape",
                format!("[{c}, {h}, {w}] needs channels >= 1 and spatial dims >= 2"),
            ));
        }
        Ok(())
    }

    /// Side length in pixels of the square patch implied by
    /// `patch_fraction` on this image shape.
    pub fn patch_side(&self) -> usize {
        let [_, h, w] = self.image_shape;
        ((self.patch_fraction * (h as f64) * (w as f64)).sqrt()).floor() as usize
    }

    /// Canonical one-key-per-line rendering used for digests and for the
    /// `config validate` CLI output. Field order is fixed; floats are printed
    /// with round-trip precision so equal configs render identically.
    pub fn canonical_text(&self) -> String {
        let [c, h, w] = self.image_shape;
        format!(
            "mode = \"{}\"\nepsilon = {:?}\npatch_fraction = {:?}\npatch_position = \"{}\"\n\
             alpha = {:?}\nbeta = {:?}\nlambda = {:?}\ntau = {:?}\nlatent_dim = {}\n\
             epochs = {}\nbatch_size = {}\nlearning_rate = {:?}\nseed = {}\n\
             image_shape = [{}, {}, {}]\n",
            self.mode,
            self.epsilon,
            self.patch_fraction,
            self.patch_position,
            self.alpha,
            self.beta,
            self.lambda,
            self.tau,
            self.latent_dim,
            self.epochs,
            self.batch_size,
            self.learning_rate,
            self.seed,
            c,
            h,
            w,
        )
    }

    /// 256-bit content digest of the canonical serialization, hex-encoded.
    pub fn digest(&self) -> String {
        sha256_hex(self.canonical_text().as_bytes())
    }

    /// Parses a config file, rejecting unknown keys, then validates it.
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: AttackConfig =
            toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a config file from disk.
    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }
}

/// Hex-encoded SHA-256 of raw bytes.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let out = hasher.finalize();
    let mut s = String::with_capacity(64);
    for b in out {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// Deterministic RNG for a named stream under a root seed.
///
/// Domain separation keeps independent consumers (latent sampling, weight
/// init, shuffling, ...) from sharing a stream: each `(seed, domain)` pair
/// maps to its own ChaCha20 state.
pub fn derive_rng(seed: u64, domain: &str) -> ChaCha20Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(domain.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha20Rng::from_seed(key)
}

/// Role a dataset plays in an experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    /// Used to pre-train the victim encoder.
    Pretraining,
    /// Unlabeled images the attacker optimizes noise on.
    Surrogate,
    /// Labeled task used to measure downstream damage.
    Downstream,
}

/// Which half of a dataset a stage consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// Provenance tag attached to datasets as they flow through a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRole {
    pub name: String,
    pub role: Role,
    pub split: Split,
    /// Number of label classes; `None` for unlabeled data.
    pub class_count: Option<usize>,
}

impl DatasetRole {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.name.is_empty() {
            return Err(ConfigError::OutOfRange {
                field: "name",
                detail: "dataset name must be non-empty".into(),
            });
        }
        if let Some(k) = self.class_count {
            if k == 0 {
                return Err(ConfigError::OutOfRange {
                    field: "class_count",
                    detail: "must be >= 1 when present".into(),
                });
            }
        }
        Ok(())
    }
}

/// Denominator convention for the attack success rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AsrMode {
    /// Fraction of clean-correct samples whose prediction flips. Default.
    CleanCorrect,
    /// Fraction of all samples whose prediction flips.
    FlipAll,
}

impl fmt::Display for AsrMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AsrMode::CleanCorrect => write!(f, "clean_correct"),
            AsrMode::FlipAll => write!(f, "flip_all"),
        }
    }
}

/// One evaluated setting: an (encoder, attack, downstream task) triple plus
/// the defense applied, with its headline metrics.
///
/// Retrieval runs fill `map_table` keyed by the requested k values; pure
/// classification runs leave it empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub encoder_id: String,
    pub surrogate: String,
    pub downstream: String,
    /// `None` for clean-baseline rows that carry no attack.
    pub mode: Option<Mode>,
    /// Artifact name, or `"none"` for clean baselines.
    pub attack: String,
    /// Defense kind, or `"none"`.
    pub defense: String,
    /// Swept scalar this row belongs to (epsilon, sigma, prune rate, ...).
    pub param: Option<f64>,
    pub seed: u64,
    pub tau: Option<f64>,
    pub clean_accuracy: Option<f64>,
    pub malicious_accuracy: Option<f64>,
    pub attack_success_rate: Option<f64>,
    pub asr_mode: AsrMode,
    /// Retrieval mAP keyed by requested k (pre-truncation key).
    pub map_table: BTreeMap<usize, f64>,
    /// True when some requested k exceeded the gallery and was truncated.
    pub map_truncated: bool,
}

impl EvalReport {
    /// Rejects any metric outside `[0, 1]`.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let check = |field: &'static str, v: Option<f64>| -> Result<(), ConfigError> {
            if let Some(x) = v {
                if !(0.0..=1.0).contains(&x) || !x.is_finite() {
                    return Err(ConfigError::OutOfRange {
                        field,
                        detail: format!("{x} not in [0, 1]"),
                    });
                }
            }
            Ok(())
        };
        check("clean_accuracy", self.clean_accuracy)?;
        check("malicious_accuracy", self.malicious_accuracy)?;
        check("attack_success_rate", self.attack_success_rate)?;
        for (k, v) in &self.map_table {
            if !(0.0..=1.0).contains(v) || !v.is_finite() {
                return Err(ConfigError::OutOfRange {
                    field: "map_table",
                    detail: format!("mAP@{k} = {v} not in [0, 1]"),
                });
            }
        }
        Ok(())
    }
}
