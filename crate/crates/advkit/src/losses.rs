//! Attack objectives: contrastive feature divergence, high-frequency
//! divergence, and pixel-space quality.
//!
//! The total objective is `alpha * adv + beta * hfc + lambda * quality`.
//! Minimizing the contrastive term pushes each adversarial feature row away
//! from its own clean counterpart relative to the other clean rows in the
//! batch; the high-frequency term (always <= 0) rewards changing the image's
//! high band; the quality term (always >= 0) penalizes overall pixel drift.
//!
//! These functions compute the plain forward values with full input
//! validation. Training uses the identical math inside the autodiff graph
//! (`Graph::adv_info_nce`, spectral ops, `Graph::batch_l2_mean`); the tests
//! pin the two routes together and finite-difference the gradients.

use ndarray::{Array2, Array4, Axis};

use crate::frequency::{FrequencyError, FrequencyFilter};
use crate::parallel::ExecMode;

#[derive(Debug, thiserror::Error)]
pub enum LossError {
    #[error("feature row {0} has zero norm; cosine similarity is undefined")]
    ZeroNormRow(usize),
    #[error("batch of {0} is too small; the contrastive term needs >= 2")]
    BatchTooSmall(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("temperature {0} must be positive and finite")]
    BadTemperature(f64),
    #[error(transparent)]
    Frequency(#[from] FrequencyError),
}

fn check_finite(name: &'static str, it: impl IntoIterator<Item = f64>) -> Result<(), LossError> {
    for v in it {
        if !v.is_finite() {
            return Err(LossError::NonFinite(name));
        }
    }
    Ok(())
}

/// Contrastive divergence of adversarial feature rows against clean rows.
///
/// For each sample `i`, with `S` the cosine-similarity matrix between
/// adversarial and clean rows:
///
/// ```text
/// L_i = S[i, i] / tau  -  log sum_{j != i} exp(S[i, j] / tau)
/// ```
///
/// and the result is the batch mean of `L_i`. Driving it down decreases
/// self-similarity (the positive pair) against the in-batch negatives. The
/// log-sum-exp is computed against the row max, so extreme temperatures stay
/// finite.
pub fn adv_info_nce(
    adv: &Array2<f64>,
    clean: &Array2<f64>,
    tau: f64,
) -> Result<f64, LossError> {
    if adv.dim() != clean.dim() {
        return Err(LossError::ShapeMismatch(format!(
            "adv {:?} vs clean {:?}",
            adv.dim(),
            clean.dim()
        )));
    }
    let b = adv.nrows();
    if b < 2 {
        return Err(LossError::BatchTooSmall(b));
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(LossError::BadTemperature(tau));
    }
    check_finite("adv features", adv.iter().copied())?;
    check_finite("clean features", clean.iter().copied())?;

    let an = unit_rows(adv)?;
    let cn = unit_rows(clean)?;
    let s = an.dot(&cn.t());

    let mut total = 0.0;
    for i in 0..b {
        let max = (0..b)
            .filter(|&j| j != i)
            .map(|j| s[[i, j]])
            .fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = (0..b)
            .filter(|&j| j != i)
            .map(|j| ((s[[i, j]] - max) / tau).exp())
            .sum();
        total += s[[i, i]] / tau - (max / tau + sum.ln());
    }
    Ok(total / b as f64)
}

fn unit_rows(x: &Array2<f64>) -> Result<Array2<f64>, LossError> {
    let mut out = x.clone();
    for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(LossError::ZeroNormRow(i));
        }
        row.mapv_inplace(|v| v / norm);
    }
    Ok(out)
}

fn batch_l2_mean(diff: &Array4<f64>) -> f64 {
    let b = diff.dim().0;
    diff.axis_iter(Axis(0))
        .map(|s| s.iter().map(|v| v * v).sum::<f64>().sqrt())
        .sum::<f64>()
        / b as f64
}

fn check_pair(x_adv: &Array4<f64>, x: &Array4<f64>) -> Result<(), LossError> {
    if x_adv.dim() != x.dim() {
        return Err(LossError::ShapeMismatch(format!(
            "x_adv {:?} vs x {:?}",
            x_adv.dim(),
            x.dim()
        )));
    }
    check_finite("x_adv", x_adv.iter().copied())?;
    check_finite("x", x.iter().copied())?;
    Ok(())
}

/// High-frequency divergence term: the negated batch mean of the per-sample
/// L2 norm of `H(x_adv) - H(x)`, where `H` keeps everything outside the
/// low-pass disk with the given cutoff fraction. Always `<= 0`; minimizing
/// it maximizes high-band change.
pub fn hfc_loss(
    x_adv: &Array4<f64>,
    x: &Array4<f64>,
    cutoff_fraction: f64,
) -> Result<f64, LossError> {
    check_pair(x_adv, x)?;
    let (_, _, h, w) = x.dim();
    let filter = FrequencyFilter::new(h, w, cutoff_fraction)?;
    let mode = ExecMode::default_mode();
    let h_adv = filter.high_freq_batch(x_adv.view(), mode)?;
    let h_clean = filter.high_freq_batch(x.view(), mode)?;
    let diff = &h_adv - &h_clean;
    Ok(-batch_l2_mean(&diff))
}

/// Pixel-space quality term: batch mean of per-sample L2 distance between
/// adversarial and clean images. Always `>= 0`.
pub fn quality_loss(x_adv: &Array4<f64>, x: &Array4<f64>) -> Result<f64, LossError> {
    check_pair(x_adv, x)?;
    let diff = x_adv - x;
    Ok(batch_l2_mean(&diff))
}

/// Weighted combination of the three terms.
pub fn total_loss(l_adv: f64, l_hfc: f64, l_q: f64, alpha: f64, beta: f64, lambda: f64) -> f64 {
    alpha * l_adv + beta * l_hfc + lambda * l_q
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::derive_rng;
    use crate::parallel::ExecMode;
    use crate::tensor::Graph;
    use ndarray::{Array2, Array4};
    use rand::Rng;

    fn randn2(r: usize, c: usize, seed: u64) -> Array2<f64> {
        let mut rng = derive_rng(seed, "loss-test");
        Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
    }

    fn randn4(dims: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
        let mut rng = derive_rng(seed, "loss-test4");
        Array4::from_shape_fn(dims, |_| rng.gen_range(0.0..1.0))
    }

    /// Places unit rows at chosen angles so the cosine matrix is exact.
    fn rows_at_angles(angles: &[f64]) -> Array2<f64> {
        Array2::from_shape_fn((angles.len(), 2), |(i, j)| {
            if j == 0 {
                angles[i].cos()
            } else {
                angles[i].sin()
            }
        })
    }

    #[test]
    fn two_sample_case_reproduces_hand_value() {
        // Angles chosen so S(ai, ci) = 0.5 and S(ai, cj) = 0.2 for j != i:
        // per-sample value 0.5 - log(exp 0.2) = 0.3 at tau = 1.
        let phi = 0.5f64.acos(); // 1.0472
        let psi = 0.2f64.acos(); // 1.3694
        let adv = rows_at_angles(&[-phi, psi]);
        let clean = rows_at_angles(&[0.0, psi - phi]);
        let value = adv_info_nce(&adv, &clean, 1.0).unwrap();
        assert!((value - 0.3).abs() < 1e-9, "got {value}");
    }

    #[test]
    fn identical_rows_give_minus_log_b_minus_one() {
        // All similarities are 1, so L_i = 1/tau - log((B-1) e^{1/tau})
        //                              = -log(B-1).
        let row = [0.6f64, 0.8];
        let feats = Array2::from_shape_fn((4, 2), |(_, j)| row[j]);
        let value = adv_info_nce(&feats, &feats, 0.1).unwrap();
        assert!((value - (-(3f64).ln())).abs() < 1e-9, "got {value}");
    }

    #[test]
    fn orthogonal_adv_rows_give_minus_log_b_minus_one_at_unit_tau() {
        // Every adversarial row is orthogonal to every clean row: S = 0,
        // L_i = 0 - log((B-1) e^0) = -log 2 for B = 3.
        let clean = Array2::from_shape_fn((3, 3), |(i, j)| {
            if (i == 0 && j == 0) || (i == 1 && j == 1) || (i == 2 && j == 0) {
                1.0
            } else {
                0.0
            }
        });
        let adv = Array2::from_shape_fn((3, 3), |(_, j)| if j == 2 { 1.0 } else { 0.0 });
        let value = adv_info_nce(&adv, &clean, 1.0).unwrap();
        assert!((value - (-(2f64).ln())).abs() < 1e-9, "got {value}");
    }

    #[test]
    fn invariant_to_positive_row_rescaling() {
        let adv = randn2(5, 8, 1);
        let clean = randn2(5, 8, 2);
        let base = adv_info_nce(&adv, &clean, 0.1).unwrap();
        let mut scaled = adv.clone();
        for (i, mut row) in scaled.axis_iter_mut(Axis(0)).enumerate() {
            let k = 0.3 + i as f64;
            row.mapv_inplace(|v| v * k);
        }
        let rescaled = adv_info_nce(&scaled, &clean, 0.1).unwrap();
        assert!((base - rescaled).abs() < 1e-9);
    }

    #[test]
    fn invariant_to_simultaneous_batch_permutation() {
        let adv = randn2(6, 4, 3);
        let clean = randn2(6, 4, 4);
        let base = adv_info_nce(&adv, &clean, 0.2).unwrap();
        let perm = [3usize, 0, 5, 1, 4, 2];
        let padv = Array2::from_shape_fn(adv.dim(), |(i, j)| adv[[perm[i], j]]);
        let pclean = Array2::from_shape_fn(clean.dim(), |(i, j)| clean[[perm[i], j]]);
        let permuted = adv_info_nce(&padv, &pclean, 0.2).unwrap();
        assert!((base - permuted).abs() < 1e-9);
    }

    #[test]
    fn extreme_temperature_stays_finite() {
        let adv = randn2(8, 16, 5);
        let clean = randn2(8, 16, 6);
        let value = adv_info_nce(&adv, &clean, 0.01).unwrap();
        assert!(value.is_finite());
    }

    #[test]
    fn zero_norm_row_and_small_batch_are_rejected() {
        let mut adv = randn2(3, 4, 7);
        let clean = randn2(3, 4, 8);
        adv.row_mut(1).fill(0.0);
        assert!(matches!(
            adv_info_nce(&adv, &clean, 0.1),
            Err(LossError::ZeroNormRow(1))
        ));
        let one = randn2(1, 4, 9);
        assert!(matches!(
            adv_info_nce(&one, &one, 0.1),
            Err(LossError::BatchTooSmall(1))
        ));
        let two = randn2(2, 4, 10);
        let three = randn2(3, 4, 11);
        assert!(matches!(
            adv_info_nce(&two, &three, 0.1),
            Err(LossError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn hfc_loss_is_nonpositive_and_zero_on_identical_inputs() {
        let x = randn4((3, 2, 16, 16), 12);
        assert_eq!(hfc_loss(&x, &x, 0.25).unwrap(), 0.0);
        let mut bumped = x.clone();
        bumped[[0, 0, 3, 3]] += 0.3;
        let v = hfc_loss(&bumped, &x, 0.25).unwrap();
        assert!(v < 0.0);
    }

    #[test]
    fn hfc_loss_ignores_pure_low_band_shifts() {
        // A constant offset lives entirely inside the low-pass disk, so the
        // high-frequency bands of the two inputs agree.
        let x = randn4((2, 1, 16, 16), 13);
        let shifted = x.mapv(|v| v + 0.2);
        let v = hfc_loss(&shifted, &x, 0.25).unwrap();
        assert!(v.abs() < 1e-9);
    }

    #[test]
    fn quality_loss_matches_constant_vector_norm() {
        // x_adv - x == c everywhere on one sample: norm is c * sqrt(N).
        let x = randn4((1, 3, 8, 8), 14);
        let c = 0.3;
        let x_adv = x.mapv(|v| v + c);
        let n = (3 * 8 * 8) as f64;
        let expected = c * n.sqrt();
        let v = quality_loss(&x_adv, &x).unwrap();
        assert!((v - expected).abs() < 1e-9);
    }

    #[test]
    fn quality_loss_is_nonnegative_and_symmetric_in_sign() {
        let x = randn4((4, 3, 8, 8), 15);
        let delta = randn4((4, 3, 8, 8), 16).mapv(|v| 0.05 * v);
        let plus = quality_loss(&(&x + &delta), &x).unwrap();
        let minus = quality_loss(&(&x - &delta), &x).unwrap();
        assert!(plus >= 0.0);
        assert!((plus - minus).abs() < 1e-9);
    }

    #[test]
    fn total_loss_is_plain_weighted_arithmetic() {
        let v = total_loss(1.0, 2.0, 3.0, 1.0, 5.0, 1.0);
        assert!((v - 14.0).abs() < 1e-12);
        assert_eq!(total_loss(0.0, 0.0, 0.0, 1.0, 5.0, 1.0), 0.0);
        // beta = 0 removes the high-frequency term entirely.
        assert_eq!(total_loss(0.7, -4.0, 0.3, 1.0, 0.0, 1.0), 1.0);
    }

    #[test]
    fn non_finite_inputs_are_rejected() {
        let x = randn4((2, 1, 8, 8), 17);
        let mut bad = x.clone();
        bad[[0, 0, 0, 0]] = f64::INFINITY;
        assert!(matches!(
            quality_loss(&bad, &x),
            Err(LossError::NonFinite(_))
        ));
        assert!(matches!(hfc_loss(&bad, &x, 0.25), Err(LossError::NonFinite(_))));
    }

    #[test]
    fn plain_values_agree_with_graph_ops() {
        let adv = randn2(6, 10, 18);
        let clean = randn2(6, 10, 19);
        let plain = adv_info_nce(&adv, &clean, 0.1).unwrap();
        let mut g = Graph::new(ExecMode::Sequential);
        let a = g.leaf(adv.into_dyn());
        let c = g.constant(clean.into_dyn());
        let l = g.adv_info_nce(a, c, 0.1);
        assert!((plain - g.scalar(l)).abs() < 1e-12);

        let x = randn4((3, 2, 16, 16), 20);
        let x_adv = &x + &randn4((3, 2, 16, 16), 21).mapv(|v| 0.02 * v);
        let plain_q = quality_loss(&x_adv, &x).unwrap();
        let plain_h = hfc_loss(&x_adv, &x, 0.25).unwrap();

        let filter =
            std::sync::Arc::new(FrequencyFilter::new(16, 16, 0.25).unwrap());
        let mut g = Graph::new(ExecMode::Sequential);
        let xa = g.leaf(x_adv.clone().into_dyn());
        let xc = g.constant(x.clone().into_dyn());
        let dq = g.sub(xa, xc);
        let lq = g.batch_l2_mean(dq);
        assert!((plain_q - g.scalar(lq)).abs() < 1e-12);

        let lp_a = g.spectral_low_pass(xa, filter.clone());
        let hf_a = g.sub(xa, lp_a);
        let lp_c = g.spectral_low_pass(xc, filter.clone());
        let hf_c = g.sub(xc, lp_c);
        let dh = g.sub(hf_a, hf_c);
        let lh_pos = g.batch_l2_mean(dh);
        let lh = g.scale(lh_pos, -1.0);
        assert!((plain_h - g.scalar(lh)).abs() < 1e-9);
    }

    #[test]
    fn gradients_wrt_x_adv_match_finite_differences() {
        // Drives all three terms (and their weighted total) through the graph
        // at once and checks 20 coordinates of d total / d x_adv.
        let x = randn4((3, 1, 8, 8), 22).mapv(|v| 0.3 + 0.4 * v);
        let x_adv = &x + &randn4((3, 1, 8, 8), 23).mapv(|v| 0.03 * v);
        let filter =
            std::sync::Arc::new(FrequencyFilter::new(8, 8, 0.25).unwrap());

        // A tiny frozen projection stands in for the encoder so the
        // contrastive term sees feature rows.
        let proj = randn2(64, 6, 24);

        let eval = |xa: &Array4<f64>| -> (f64, Option<ndarray::ArrayD<f64>>) {
            let mut g = Graph::new(ExecMode::Sequential);
            let xav = g.leaf(xa.clone().into_dyn());
            let xcv = g.constant(x.clone().into_dyn());

            let flat = g.reshape(xav, &[3, 64]);
            let pw = g.constant(proj.clone().into_dyn());
            let feats_adv = g.matmul(flat, pw);
            let flat_c = g.reshape(xcv, &[3, 64]);
            let feats_clean = g.matmul(flat_c, pw);
            let l_adv = g.adv_info_nce(feats_adv, feats_clean, 0.5);

            let lp_a = g.spectral_low_pass(xav, filter.clone());
            let hf_a = g.sub(xav, lp_a);
            let lp_c = g.spectral_low_pass(xcv, filter.clone());
            let hf_c = g.sub(xcv, lp_c);
            let dh = g.sub(hf_a, hf_c);
            let lh_pos = g.batch_l2_mean(dh);
            let l_hfc = g.scale(lh_pos, -1.0);

            let dq = g.sub(xav, xcv);
            let l_q = g.batch_l2_mean(dq);

            let a = g.scale(l_adv, 1.0);
            let b = g.scale(l_hfc, 5.0);
            let c = g.scale(l_q, 1.0);
            let ab = g.add(a, b);
            let total = g.add(ab, c);
            let grads = g.backward(total);
            (g.scalar(total), grads.wrt(xav).cloned())
        };

        let (_, grad) = eval(&x_adv);
        let grad = grad.expect("x_adv must receive gradient");
        let mut rng = derive_rng(25, "loss-fd");
        for _ in 0..20 {
            let flat: usize = rng.gen_range(0..x_adv.len());
            let h = 1e-6;
            let mut plus = x_adv.clone();
            plus.as_slice_mut().unwrap()[flat] += h;
            let mut minus = x_adv.clone();
            minus.as_slice_mut().unwrap()[flat] -= h;
            let fd = (eval(&plus).0 - eval(&minus).0) / (2.0 * h);
            let ad = grad.as_slice().unwrap()[flat];
            let denom = fd.abs().max(ad.abs()).max(1e-6);
            assert!(
                (fd - ad).abs() / denom < 1e-3,
                "coord {flat}: fd {fd} vs ad {ad}"
            );
        }
    }
}
