//! Ideal low-pass / high-frequency decomposition in the 2-D FFT domain.
//!
//! A [`FrequencyFilter`] splits an image into the part inside a circular disk
//! of the centered spectrum (the low-pass component) and the remainder (the
//! high-frequency component). The disk radius is expressed as a fraction of
//! the maximum radial frequency, so the same `cutoff_fraction` selects the
//! same normalized band at any resolution.
//!
//! The split is exact: `low_pass(x) + high_freq(x) == x` up to FFT round-off,
//! and the two parts occupy disjoint frequency supports, so their energies
//! add back to the input energy. Both maps are linear and self-adjoint
//! (projection operators), which is what makes them cheap to differentiate
//! through: the backward pass of `low_pass` is `low_pass` itself.

use ndarray::{Array2, Array3, Array4, ArrayView2, ArrayView3, ArrayView4, Axis};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use std::sync::Arc;

use crate::parallel::{map_indexed, ExecMode};

/// Default disk radius as a fraction of the maximum radial frequency.
pub const DEFAULT_CUTOFF_FRACTION: f64 = 0.25;

#[derive(Debug, thiserror::Error)]
pub enum FrequencyError {
    #[error("input contains a non-finite value at flat index {0}")]
    NonFinite(usize),
    #[error("spatial dims must be at least 2x2, got {h}x{w}")]
    TooSmall { h: usize, w: usize },
    #[error("cutoff_fraction {0} not in (0, 1]")]
    BadCutoff(f64),
    #[error("expected spatial dims {eh}x{ew}, got {h}x{w}")]
    ShapeMismatch {
        eh: usize,
        ew: usize,
        h: usize,
        w: usize,
    },
}

/// Reusable low-pass filter for one spatial size.
pub struct FrequencyFilter {
    h: usize,
    w: usize,
    cutoff_fraction: f64,
    mask: Array2<f64>,
    fw_row: Arc<dyn Fft<f64>>,
    fw_col: Arc<dyn Fft<f64>>,
    inv_row: Arc<dyn Fft<f64>>,
    inv_col: Arc<dyn Fft<f64>>,
}

impl FrequencyFilter {
    pub fn new(h: usize, w: usize, cutoff_fraction: f64) -> Result<Self, FrequencyError> {
        if h < 2 || w < 2 {
            return Err(FrequencyError::TooSmall { h, w });
        }
        if !(cutoff_fraction > 0.0 && cutoff_fraction <= 1.0) {
            return Err(FrequencyError::BadCutoff(cutoff_fraction));
        }
        let mut planner = FftPlanner::new();
        Ok(FrequencyFilter {
            h,
            w,
            cutoff_fraction,
            mask: disk_mask(h, w, cutoff_fraction),
            fw_row: planner.plan_fft_forward(w),
            fw_col: planner.plan_fft_forward(h),
            inv_row: planner.plan_fft_inverse(w),
            inv_col: planner.plan_fft_inverse(h),
        })
    }

    pub fn spatial_dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn cutoff_fraction(&self) -> f64 {
        self.cutoff_fraction
    }

    /// Binary pass mask in unshifted FFT bin order (1 = kept by low-pass).
    pub fn mask(&self) -> &Array2<f64> {
        &self.mask
    }

    /// Low-pass of one already-validated plane. The imaginary residue of the
    /// inverse transform is discarded; for a symmetric binary mask it sits at
    /// round-off level (~1e-15), far below the 1e-9 the callers tolerate.
    fn low_pass_plane_unchecked(&self, plane: ArrayView2<'_, f64>) -> Array2<f64> {
        let (h, w) = (self.h, self.w);
        let mut buf: Vec<Complex<f64>> = plane.iter().map(|&v| Complex::new(v, 0.0)).collect();

        // Rows, then columns via transpose, in both directions.
        for row in buf.chunks_exact_mut(w) {
            self.fw_row.process(row);
        }
        let mut t = transpose(&buf, h, w);
        for col in t.chunks_exact_mut(h) {
            self.fw_col.process(col);
        }
        let mut spec = transpose(&t, w, h);

        for (i, v) in spec.iter_mut().enumerate() {
            *v *= self.mask[[i / w, i % w]];
        }

        for row in spec.chunks_exact_mut(w) {
            self.inv_row.process(row);
        }
        let mut t = transpose(&spec, h, w);
        for col in t.chunks_exact_mut(h) {
            self.inv_col.process(col);
        }
        let out = transpose(&t, w, h);

        let scale = 1.0 / (h as f64 * w as f64);
        Array2::from_shape_vec((h, w), out.iter().map(|c| c.re * scale).collect())
            .expect("shape preserved through FFT round trip")
    }

    fn check_image(&self, img: &ArrayView3<'_, f64>) -> Result<(), FrequencyError> {
        let (_, h, w) = img.dim();
        if (h, w) != (self.h, self.w) {
            return Err(FrequencyError::ShapeMismatch {
                eh: self.h,
                ew: self.w,
                h,
                w,
            });
        }
        if let Some(pos) = img.iter().position(|v| !v.is_finite()) {
            return Err(FrequencyError::NonFinite(pos));
        }
        Ok(())
    }

    /// Low-pass component of a `[C, H, W]` image.
    pub fn low_pass_image(&self, img: ArrayView3<'_, f64>) -> Result<Array3<f64>, FrequencyError> {
        self.check_image(&img)?;
        let (c, h, w) = img.dim();
        let mut out = Array3::zeros((c, h, w));
        for ch in 0..c {
            out.index_axis_mut(Axis(0), ch)
                .assign(&self.low_pass_plane_unchecked(img.index_axis(Axis(0), ch)));
        }
        Ok(out)
    }

    /// High-frequency component: the input minus its low-pass part.
    pub fn high_freq_image(&self, img: ArrayView3<'_, f64>) -> Result<Array3<f64>, FrequencyError> {
        let lp = self.low_pass_image(img)?;
        Ok(&img.to_owned() - &lp)
    }

    /// Batched low-pass over `[B, C, H, W]`, one plane per work item.
    pub fn low_pass_batch(
        &self,
        x: ArrayView4<'_, f64>,
        mode: ExecMode,
    ) -> Result<Array4<f64>, FrequencyError> {
        let (b, c, h, w) = x.dim();
        if (h, w) != (self.h, self.w) {
            return Err(FrequencyError::ShapeMismatch {
                eh: self.h,
                ew: self.w,
                h,
                w,
            });
        }
        if let Some(pos) = x.iter().position(|v| !v.is_finite()) {
            return Err(FrequencyError::NonFinite(pos));
        }
        let planes = map_indexed(mode, b * c, |i| {
            let (bi, ci) = (i / c, i % c);
            self.low_pass_plane_unchecked(x.index_axis(Axis(0), bi).index_axis(Axis(0), ci))
        });
        let mut out = Array4::zeros((b, c, h, w));
        for (i, plane) in planes.into_iter().enumerate() {
            out.index_axis_mut(Axis(0), i / c)
                .index_axis_mut(Axis(0), i % c)
                .assign(&plane);
        }
        Ok(out)
    }

    /// Batched high-frequency component over `[B, C, H, W]`.
    pub fn high_freq_batch(
        &self,
        x: ArrayView4<'_, f64>,
        mode: ExecMode,
    ) -> Result<Array4<f64>, FrequencyError> {
        let lp = self.low_pass_batch(x, mode)?;
        Ok(&x.to_owned() - &lp)
    }
}

fn transpose(buf: &[Complex<f64>], rows: usize, cols: usize) -> Vec<Complex<f64>> {
    let mut out = vec![Complex::new(0.0, 0.0); buf.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = buf[r * cols + c];
        }
    }
    out
}

/// Binary disk mask in unshifted FFT bin order.
///
/// Bin `(u, v)` maps to signed frequencies, each normalized by its axis
/// Nyquist; the radial distance is then scaled by `1/sqrt(2)` so the far
/// corner of the spectrum sits at 1. A bin is kept when that normalized
/// radius is at most `cutoff_fraction`. DC has radius 0 and is always kept.
pub fn disk_mask(h: usize, w: usize, cutoff_fraction: f64) -> Array2<f64> {
    let half_h = h as f64 / 2.0;
    let half_w = w as f64 / 2.0;
    Array2::from_shape_fn((h, w), |(u, v)| {
        let fu = if u <= h / 2 { u as f64 } else { u as f64 - h as f64 };
        let fv = if v <= w / 2 { v as f64 } else { v as f64 - w as f64 };
        let a = fu / half_h;
        let b = fv / half_w;
        let r = (a * a + b * b).sqrt() / std::f64::consts::SQRT_2;
        if r <= cutoff_fraction {
            1.0
        } else {
            0.0
        }
    })
}

/// One-shot low-pass of a `[C, H, W]` image.
pub fn low_pass_filter(
    img: &Array3<f64>,
    cutoff_fraction: f64,
) -> Result<Array3<f64>, FrequencyError> {
    let (_, h, w) = img.dim();
    FrequencyFilter::new(h, w, cutoff_fraction)?.low_pass_image(img.view())
}

/// One-shot high-frequency component of a `[C, H, W]` image.
pub fn high_freq_component(
    img: &Array3<f64>,
    cutoff_fraction: f64,
) -> Result<Array3<f64>, FrequencyError> {
    let (_, h, w) = img.dim();
    FrequencyFilter::new(h, w, cutoff_fraction)?.high_freq_image(img.view())
}
