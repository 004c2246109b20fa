//! Defenses against universal noise: Gaussian input corruption, global
//! magnitude pruning, full fine-tuning, and adversarial pre-training.
//!
//! Every defense is non-destructive: input handles and batches are never
//! mutated, and existing noise artifacts are evaluated unchanged against the
//! defended model.

use std::collections::BTreeSet;
use std::sync::Arc;

use ndarray::{Array1, Array2, Array4};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::config::derive_rng;
use crate::data::Dataset;
use crate::encoders::{
    contrastive_train_core, train_toy_encoder, ContrastiveOptions, ConvEncoder, DownstreamHead,
    EncoderError, EncoderHandle, Method, PgdSpec, Provenance, CONTRASTIVE_LR, CONTRASTIVE_TAU,
};
use crate::parallel::ExecMode;
use crate::tensor::{Adam, Graph, Tensor};

/// Fine-tuning drives the fresh head faster than the pretrained body.
pub const FINETUNE_HEAD_LR_FACTOR: f64 = 10.0;
/// Minibatch size for fine-tuning, matching the probe trainer.
pub const FINETUNE_BATCH: usize = 128;

#[derive(Debug, thiserror::Error)]
pub enum DefenseError {
    #[error("sigma must be nonnegative and finite, got {0}")]
    BadSigma(f64),
    #[error("prune rate must lie in [0, 1], got {0}")]
    BadRate(f64),
    #[error("pgd_epsilon must be positive and finite when pgd_steps > 0, got {0}")]
    BadPgdEpsilon(f64),
    #[error("learning rate must be positive and finite, got {0}")]
    BadLearningRate(f64),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

/// One defense configuration, as it appears in plan files and reports.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DefenseSpec {
    Corruption {
        sigma: f64,
    },
    Finetune {
        epochs: usize,
        lr: f64,
    },
    Prune {
        rate: f64,
    },
    AdversarialTraining {
        pgd_steps: usize,
        pgd_epsilon: f64,
        epochs: usize,
    },
}

impl DefenseSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            DefenseSpec::Corruption { .. } => "corruption",
            DefenseSpec::Finetune { .. } => "finetune",
            DefenseSpec::Prune { .. } => "prune",
            DefenseSpec::AdversarialTraining { .. } => "adversarial_training",
        }
    }

    /// The scalar this spec sweeps, for the `param` column of report rows.
    pub fn param(&self) -> f64 {
        match self {
            DefenseSpec::Corruption { sigma } => *sigma,
            DefenseSpec::Finetune { epochs, .. } => *epochs as f64,
            DefenseSpec::Prune { rate } => *rate,
            DefenseSpec::AdversarialTraining { pgd_epsilon, .. } => *pgd_epsilon,
        }
    }

    pub fn validate(&self) -> Result<(), DefenseError> {
        match *self {
            DefenseSpec::Corruption { sigma } => {
                if sigma < 0.0 || !sigma.is_finite() {
                    return Err(DefenseError::BadSigma(sigma));
                }
            }
            DefenseSpec::Finetune { lr, .. } => {
                if !(lr > 0.0) || !lr.is_finite() {
                    return Err(DefenseError::BadLearningRate(lr));
                }
            }
            DefenseSpec::Prune { rate } => {
                if !(0.0..=1.0).contains(&rate) || !rate.is_finite() {
                    return Err(DefenseError::BadRate(rate));
                }
            }
            DefenseSpec::AdversarialTraining {
                pgd_steps,
                pgd_epsilon,
                ..
            } => {
                if pgd_steps > 0 && (!(pgd_epsilon > 0.0) || !pgd_epsilon.is_finite()) {
                    return Err(DefenseError::BadPgdEpsilon(pgd_epsilon));
                }
            }
        }
        Ok(())
    }
}

/// Adds i.i.d. `N(0, sigma^2)` noise to every pixel and clamps to `[0, 1]`.
///
/// `sigma == 0` returns the input bit-exactly and draws nothing, so the
/// degenerate sweep point is a true identity. Fixed seeds reproduce the
/// corruption bit-for-bit.
pub fn gaussian_corrupt(
    x: &Array4<f64>,
    sigma: f64,
    seed: u64,
) -> Result<Array4<f64>, DefenseError> {
    if sigma < 0.0 || !sigma.is_finite() {
        return Err(DefenseError::BadSigma(sigma));
    }
    let mut out = x.clone();
    if sigma == 0.0 {
        return Ok(out);
    }
    let mut rng = derive_rng(seed, "defense/gaussian");
    for v in out.iter_mut() {
        let n: f64 = StandardNormal.sample(&mut rng);
        *v = (*v + sigma * n).clamp(0.0, 1.0);
    }
    Ok(out)
}

/// Indices of the `count` smallest magnitudes, ties broken by index.
fn smallest_magnitude_indices(magnitudes: &[f64], count: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..magnitudes.len()).collect();
    idx.sort_by(|&a, &b| {
        magnitudes[a]
            .partial_cmp(&magnitudes[b])
            .expect("magnitudes are finite")
            .then(a.cmp(&b))
    });
    idx.truncate(count);
    idx
}

/// Global unstructured magnitude pruning over convolution and linear
/// weights; biases are exempt. Exactly `floor(rate * N)` entries go to zero,
/// chosen as the smallest magnitudes across all prunable tensors at once.
/// Returns a new handle; the input is untouched.
pub fn prune_encoder(handle: &EncoderHandle, rate: f64) -> Result<EncoderHandle, DefenseError> {
    if !(0.0..=1.0).contains(&rate) || !rate.is_finite() {
        return Err(DefenseError::BadRate(rate));
    }
    let mut entries: Vec<(String, Tensor)> = handle.net().named_params().to_vec();
    let mut magnitudes = Vec::new();
    let mut slots = Vec::new();
    for (ti, (name, tensor)) in entries.iter().enumerate() {
        if !name.ends_with(".w") {
            continue;
        }
        for (fi, v) in tensor.iter().enumerate() {
            magnitudes.push(v.abs());
            slots.push((ti, fi));
        }
    }
    let count = ((rate * magnitudes.len() as f64).floor() as usize).min(magnitudes.len());
    for &i in &smallest_magnitude_indices(&magnitudes, count) {
        let (ti, fi) = slots[i];
        entries[ti]
            .1
            .as_slice_mut()
            .expect("parameters are standard layout")[fi] = 0.0;
    }
    let mut net = ConvEncoder::new(handle.input_shape(), 0);
    net.load_named_params(entries)?;
    let mut provenance = handle.provenance.clone();
    provenance.note = format!("{} | pruned rate={rate}", provenance.note);
    Ok(EncoderHandle::from_parts(net, provenance))
}

/// Unfreezes the whole encoder and trains it jointly with a fresh linear
/// head by cross-entropy. The body moves at `lr`, the head at
/// [`FINETUNE_HEAD_LR_FACTOR`] times that. Zero epochs returns the input
/// weights unchanged under a new identity; the input handle itself is never
/// modified.
pub fn finetune_encoder(
    handle: &EncoderHandle,
    labeled: &Dataset,
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<(EncoderHandle, DownstreamHead), DefenseError> {
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(DefenseError::BadLearningRate(lr));
    }
    let labels = labeled.labels().ok_or(EncoderError::Unlabeled)?;
    let distinct: BTreeSet<usize> = labels.iter().copied().collect();
    if distinct.len() < 2 {
        return Err(EncoderError::SingleClass.into());
    }
    if labeled.image_shape() != handle.input_shape() {
        return Err(EncoderError::ShapeMismatch {
            got: labeled.image_shape(),
            want: handle.input_shape(),
        }
        .into());
    }
    let classes = labeled
        .class_count
        .unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));

    let head_lr = lr * FINETUNE_HEAD_LR_FACTOR;
    let mut net = handle.net().clone();
    let dim = net.feature_dim();
    let mut w = Array2::<f64>::zeros((dim, classes));
    let mut b = Array1::<f64>::zeros(classes);
    let mut body_adam = Adam::new(lr, 0.9, 0.999);
    let mut head_adam = Adam::new(head_lr, 0.9, 0.999);
    let mode = ExecMode::default_mode();

    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..labeled.len()).collect();
        let mut rng = derive_rng(seed, &format!("finetune/shuffle/{epoch}"));
        order.shuffle(&mut rng);
        for chunk in order.chunks(FINETUNE_BATCH) {
            let x = labeled.batch_f64(chunk);
            let chunk_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let mut g = Graph::new(mode);
            let xv = g.constant(x.into_dyn());
            let enc_vars = net.insert_trainable(&mut g);
            let feats = net.trace(&mut g, &enc_vars, xv);
            let wv = g.leaf(w.clone().into_dyn());
            let bv = g.leaf(b.clone().into_dyn());
            let logits = g.matmul(feats, wv);
            let logits = g.add_row(logits, bv);
            let loss = g.softmax_cross_entropy(logits, Arc::new(chunk_labels));
            if !g.scalar(loss).is_finite() {
                return Err(EncoderError::NonFiniteLoss(epoch).into());
            }
            let mut grads = g.backward(loss);
            let enc_grads: Vec<Tensor> = enc_vars
                .iter()
                .map(|v| grads.take_or_zeros(*v, g.value(*v)))
                .collect();
            let gw = grads.take_or_zeros(wv, g.value(wv));
            let gb = grads.take_or_zeros(bv, g.value(bv));
            let mut body_refs = net.param_tensors_mut();
            body_adam.step(&mut body_refs, &enc_grads);
            let mut wd = w.into_dyn();
            let mut bd = b.into_dyn();
            head_adam.step(&mut [&mut wd, &mut bd], &[gw, gb]);
            w = wd.into_dimensionality().expect("rank 2");
            b = bd.into_dimensionality().expect("rank 1");
        }
    }

    let provenance = Provenance {
        method: handle.provenance.method.clone(),
        dataset: labeled.name.clone(),
        seed,
        epochs,
        batch_size: FINETUNE_BATCH,
        note: format!(
            "finetuned from {} lr={lr} head_lr={head_lr}",
            handle.id
        ),
    };
    let tuned = EncoderHandle::from_parts(net, provenance);
    let head = DownstreamHead::LinearProbe {
        weights: w,
        bias: b,
        classes,
        encoder_id: tuned.id.clone(),
        epochs,
        lr: head_lr,
    };
    Ok((tuned, head))
}

/// Contrastive pre-training with the second view of every pair replaced by
/// its loss-maximizing PGD iterate (random start, step `2.5 * eps / steps`,
/// projected onto the epsilon ball after every step).
///
/// `pgd_steps == 0` consumes no PGD randomness and is bit-identical to
/// [`train_toy_encoder`] with matching arguments, identity included.
pub fn adversarial_train(
    dataset: &Dataset,
    pgd_steps: usize,
    pgd_epsilon: f64,
    epochs: usize,
    batch_size: usize,
    seed: u64,
) -> Result<EncoderHandle, DefenseError> {
    if pgd_steps == 0 {
        return Ok(train_toy_encoder(
            dataset,
            Method::SimclrStyle,
            seed,
            epochs,
            batch_size,
        )?);
    }
    if !(pgd_epsilon > 0.0) || !pgd_epsilon.is_finite() {
        return Err(DefenseError::BadPgdEpsilon(pgd_epsilon));
    }
    let outcome = contrastive_train_core(ContrastiveOptions {
        dataset,
        seed,
        epochs,
        batch_size,
        pgd: Some(PgdSpec {
            epsilon: pgd_epsilon,
            steps: pgd_steps,
        }),
    })?;
    if let Some(dev) = outcome.pgd_max_deviation {
        // The ball projection runs after every iterate; escaping it would be
        // a training bug, not an input problem.
        assert!(
            dev <= pgd_epsilon,
            "PGD iterate escaped the ball: {dev} > {pgd_epsilon}"
        );
    }
    let provenance = Provenance {
        method: Method::SimclrStyle.to_string(),
        dataset: dataset.name.clone(),
        seed,
        epochs,
        batch_size,
        note: format!(
            "tau={CONTRASTIVE_TAU} lr={CONTRASTIVE_LR} pgd_steps={pgd_steps} \
             pgd_epsilon={pgd_epsilon} final_loss={:.6}",
            outcome.final_loss
        ),
    };
    Ok(EncoderHandle::from_parts(outcome.encoder, provenance))
}
