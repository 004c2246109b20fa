//! Reverse-mode autodiff over `f64` ndarrays.
//!
//! A [`Graph`] is a define-by-run tape: operations append nodes holding their
//! forward values, and [`Graph::backward`] walks the tape in reverse,
//! accumulating gradients only into subtrees that can reach a trainable
//! [`Graph::leaf`]. Frozen networks participate in the forward pass through
//! [`Graph::constant`] nodes; gradients flow *through* them (for the data
//! path) but are never computed *for* them, which is what keeps attacking a
//! frozen encoder cheap.
//!
//! The op set is exactly what the networks and objectives in this crate
//! need; each backward formula is checked against central finite differences
//! in the tests below.

mod adam;
mod conv;

pub use adam::Adam;
pub use conv::{conv2d_backward_data, conv2d_backward_weights, conv2d_forward, out_dim};

use ndarray::{Array1, Array2, ArrayD, Axis, Ix2, Ix4, IxDyn};
use std::sync::Arc;

use crate::frequency::FrequencyFilter;
use crate::parallel::ExecMode;

pub type Tensor = ArrayD<f64>;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Constant,
    /// Elementwise sum; `b` may have a leading axis of 1 that broadcasts.
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Matmul(Var, Var),
    /// `[m, n] + [n]` row-broadcast bias.
    AddRow(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Upsample2x(Var),
    Relu(Var),
    Tanh(Var),
    /// Per-(sample, channel) normalization over the spatial extent with a
    /// learnable per-channel affine.
    ChannelNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    },
    GlobalAvgPool(Var),
    Reshape(Var),
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
    },
    /// Overwrite the masked region of every (constant) clean image with the
    /// single patch image.
    Paste {
        patch: Var,
        clean: Var,
        mask: Arc<Array2<f64>>,
    },
    /// Ideal low-pass projection; self-adjoint, so backward reapplies it.
    SpectralLowPass {
        x: Var,
        filter: Arc<FrequencyFilter>,
    },
    /// Mean over the batch of per-sample L2 norms.
    BatchL2Mean(Var),
    /// Contrastive divergence of adversarial rows against clean rows.
    AdvInfoNce {
        adv: Var,
        clean: Var,
        tau: f64,
    },
    /// Normalized-temperature cross entropy over two stacked views.
    NtXent {
        z: Var,
        tau: f64,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Arc<Vec<usize>>,
    },
    MeanAll(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `v`, if any path from the loss reached it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, or zeros shaped like `like` when the loss did not
    /// depend on it (e.g. an entirely dead ReLU path).
    pub fn take_or_zeros(&mut self, v: Var, like: &Tensor) -> Tensor {
        self.grads
            .get_mut(v.0)
            .and_then(|g| g.take())
            .unwrap_or_else(|| Tensor::zeros(like.raw_dim()))
    }
}

pub struct Graph {
    nodes: Vec<Node>,
    mode: ExecMode,
}

impl Graph {
    pub fn new(mode: ExecMode) -> Self {
        Graph {
            nodes: Vec::new(),
            mode,
        }
    }

    pub fn with_default_mode() -> Self {
        Self::new(ExecMode::default_mode())
    }

    pub fn mode(&self) -> ExecMode {
        self.mode
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable input: gradients will be produced for it.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Frozen input: participates in forward math, never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Scalar value of a 0-dim (or single-element) node.
    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        assert_eq!(t.len(), 1, "scalar() needs a single-element tensor");
        *t.iter().next().unwrap()
    }

    // ---- op builders -----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let broadcast_ok = va.shape() == vb.shape()
            || (va.ndim() == vb.ndim()
                && vb.shape()[0] == 1
                && va.shape()[1..] == vb.shape()[1..]);
        assert!(
            broadcast_ok,
            "add shapes {:?} vs {:?}",
            va.shape(),
            vb.shape()
        );
        let value = va + vb;
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(
            self.nodes[a.0].value.shape(),
            self.nodes[b.0].value.shape(),
            "sub shape mismatch"
        );
        let value = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Sub(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.nodes[a.0].value.mapv(|v| v * k);
        let ng = self.needs(a);
        self.push(value, Op::Scale(a, k), ng)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let value = self.nodes[a.0].value.mapv(|v| v + k);
        let ng = self.needs(a);
        self.push(value, Op::AddScalar(a), ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let va = as2(&self.nodes[a.0].value);
        let vb = as2(&self.nodes[b.0].value);
        assert_eq!(va.ncols(), vb.nrows(), "matmul inner dims");
        let value = va.dot(&vb).into_dyn();
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Matmul(a, b), ng)
    }

    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let va = as2(&self.nodes[a.0].value);
        let vb = &self.nodes[bias.0].value;
        assert_eq!(vb.ndim(), 1);
        assert_eq!(va.ncols(), vb.len());
        let mut out = va.to_owned();
        for mut row in out.axis_iter_mut(Axis(0)) {
            for (o, b) in row.iter_mut().zip(vb.iter()) {
                *o += *b;
            }
        }
        let ng = self.needs(a) || self.needs(bias);
        self.push(out.into_dyn(), Op::AddRow(a, bias), ng)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let vx = as4(&self.nodes[x.0].value);
        let vw = as4(&self.nodes[w.0].value);
        let bias = b.map(|bv| {
            Array1::from_iter(self.nodes[bv.0].value.iter().copied())
        });
        let value = conv2d_forward(vx.view(), vw.view(), bias.as_ref(), stride, pad, self.mode);
        let ng = self.needs(x) || self.needs(w) || b.map_or(false, |bv| self.needs(bv));
        self.push(value.into_dyn(), Op::Conv2d { x, w, b, stride, pad }, ng)
    }

    pub fn upsample2x(&mut self, x: Var) -> Var {
        let v = as4(&self.nodes[x.0].value);
        let (b, c, h, w) = v.dim();
        let mut out = ndarray::Array4::<f64>::zeros((b, c, 2 * h, 2 * w));
        for bi in 0..b {
            for ci in 0..c {
                for y in 0..2 * h {
                    for xx in 0..2 * w {
                        out[[bi, ci, y, xx]] = v[[bi, ci, y / 2, xx / 2]];
                    }
                }
            }
        }
        let ng = self.needs(x);
        self.push(out.into_dyn(), Op::Upsample2x(x), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.mapv(|v| v.max(0.0));
        let ng = self.needs(x);
        self.push(value, Op::Relu(x), ng)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.mapv(f64::tanh);
        let ng = self.needs(x);
        self.push(value, Op::Tanh(x), ng)
    }

    pub fn channel_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let v = as4(&self.nodes[x.0].value);
        let g = &self.nodes[gamma.0].value;
        let be = &self.nodes[beta.0].value;
        let (b, c, h, w) = v.dim();
        assert_eq!(g.len(), c);
        assert_eq!(be.len(), c);
        let mut out = ndarray::Array4::<f64>::zeros((b, c, h, w));
        for bi in 0..b {
            for ci in 0..c {
                let plane = v.index_axis(Axis(0), bi);
                let plane = plane.index_axis(Axis(0), ci);
                let n = (h * w) as f64;
                let mu = plane.sum() / n;
                let var = plane.iter().map(|p| (p - mu) * (p - mu)).sum::<f64>() / n;
                let inv = 1.0 / (var + eps).sqrt();
                let gc = g[[ci]];
                let bc = be[[ci]];
                let mut dst = out.index_axis_mut(Axis(0), bi);
                let mut dst = dst.index_axis_mut(Axis(0), ci);
                for (d, p) in dst.iter_mut().zip(plane.iter()) {
                    *d = gc * (p - mu) * inv + bc;
                }
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            out.into_dyn(),
            Op::ChannelNorm {
                x,
                gamma,
                beta,
                eps,
            },
            ng,
        )
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let v = as4(&self.nodes[x.0].value);
        let (b, c, h, w) = v.dim();
        let mut out = Array2::<f64>::zeros((b, c));
        for bi in 0..b {
            for ci in 0..c {
                out[[bi, ci]] = v
                    .index_axis(Axis(0), bi)
                    .index_axis(Axis(0), ci)
                    .sum()
                    / (h * w) as f64;
            }
        }
        let ng = self.needs(x);
        self.push(out.into_dyn(), Op::GlobalAvgPool(x), ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let v = &self.nodes[x.0].value;
        assert_eq!(v.len(), shape.iter().product::<usize>(), "reshape size");
        let value = v
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("checked element count");
        let ng = self.needs(x);
        self.push(value, Op::Reshape(x), ng)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        assert!(lo < hi);
        let value = self.nodes[x.0].value.mapv(|v| v.clamp(lo, hi));
        let ng = self.needs(x);
        self.push(value, Op::Clamp { x, lo, hi }, ng)
    }

    pub fn paste(&mut self, patch: Var, clean: Var, mask: Arc<Array2<f64>>) -> Var {
        let p = &self.nodes[patch.0].value;
        let cl = as4(&self.nodes[clean.0].value);
        let (b, c, h, w) = cl.dim();
        assert_eq!(p.shape(), &[c, h, w], "patch must match image shape");
        assert_eq!(mask.dim(), (h, w));
        let mut out = cl.to_owned();
        for bi in 0..b {
            for ci in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        if mask[[y, x]] != 0.0 {
                            out[[bi, ci, y, x]] = p[[ci, y, x]];
                        }
                    }
                }
            }
        }
        let ng = self.needs(patch) || self.needs(clean);
        self.push(out.into_dyn(), Op::Paste { patch, clean, mask }, ng)
    }

    pub fn spectral_low_pass(&mut self, x: Var, filter: Arc<FrequencyFilter>) -> Var {
        let v = as4(&self.nodes[x.0].value);
        let value = filter
            .low_pass_batch(v.view(), self.mode)
            .expect("trainer feeds finite tensors of the filter's size");
        let ng = self.needs(x);
        self.push(value.into_dyn(), Op::SpectralLowPass { x, filter }, ng)
    }

    pub fn batch_l2_mean(&mut self, x: Var) -> Var {
        let v = &self.nodes[x.0].value;
        let b = v.shape()[0];
        assert!(b > 0);
        let flat = flatten_rows(v);
        let mean = flat
            .axis_iter(Axis(0))
            .map(|row| row.iter().map(|p| p * p).sum::<f64>().sqrt())
            .sum::<f64>()
            / b as f64;
        let ng = self.needs(x);
        self.push(scalar_tensor(mean), Op::BatchL2Mean(x), ng)
    }

    pub fn adv_info_nce(&mut self, adv: Var, clean: Var, tau: f64) -> Var {
        let a = as2(&self.nodes[adv.0].value);
        let c = as2(&self.nodes[clean.0].value);
        assert_eq!(a.dim(), c.dim(), "feature batches must align");
        assert!(a.nrows() >= 2, "contrastive loss needs a batch of >= 2");
        assert!(tau > 0.0);
        let (an, _) = normalize_rows(&a.to_owned());
        let (cn, _) = normalize_rows(&c.to_owned());
        let s = an.dot(&cn.t());
        let b = s.nrows();
        let mut total = 0.0;
        for i in 0..b {
            let lse = off_diag_lse(&s, i, tau);
            total += s[[i, i]] / tau - lse;
        }
        let value = scalar_tensor(total / b as f64);
        let ng = self.needs(adv) || self.needs(clean);
        self.push(value, Op::AdvInfoNce { adv, clean, tau }, ng)
    }

    pub fn nt_xent(&mut self, z: Var, tau: f64) -> Var {
        let zv = as2(&self.nodes[z.0].value);
        let m = zv.nrows();
        assert!(m >= 4 && m % 2 == 0, "nt_xent expects two stacked views");
        assert!(tau > 0.0);
        let (zn, _) = normalize_rows(&zv.to_owned());
        let s = zn.dot(&zn.t());
        let n = m / 2;
        let mut total = 0.0;
        for i in 0..m {
            let p = (i + n) % m;
            let lse = off_diag_lse(&s, i, tau);
            total += -(s[[i, p]] / tau) + lse;
        }
        let value = scalar_tensor(total / m as f64);
        let ng = self.needs(z);
        self.push(value, Op::NtXent { z, tau }, ng)
    }

    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: Arc<Vec<usize>>) -> Var {
        let lv = as2(&self.nodes[logits.0].value);
        let (b, k) = lv.dim();
        assert_eq!(labels.len(), b);
        assert!(labels.iter().all(|&y| y < k), "label out of range");
        let mut total = 0.0;
        for (i, row) in lv.axis_iter(Axis(0)).enumerate() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[labels[i]];
        }
        let value = scalar_tensor(total / b as f64);
        let ng = self.needs(logits);
        self.push(value, Op::SoftmaxCrossEntropy { logits, labels }, ng)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let v = &self.nodes[x.0].value;
        let value = scalar_tensor(v.sum() / v.len() as f64);
        let ng = self.needs(x);
        self.push(value, Op::MeanAll(x), ng)
    }

    // ---- backward --------------------------------------------------------

    /// Accumulates `d loss / d node` for every node that can reach a leaf.
    /// `loss` must be a single-element tensor.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(
            self.nodes[loss.0].value.len(),
            1,
            "backward starts from a scalar"
        );
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(self.nodes[loss.0].value.raw_dim()));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                grads[idx] = None;
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            if matches!(self.nodes[idx].op, Op::Leaf) {
                grads[idx] = Some(g); // leaves keep their gradient
            }
        }
        Gradients { grads }
    }

    fn backprop_node(&self, idx: usize, g: &Tensor, grads: &mut Vec<Option<Tensor>>) {
        let acc = |grads: &mut Vec<Option<Tensor>>, v: Var, delta: Tensor| {
            if !self.needs(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &delta,
                slot @ None => *slot = Some(delta),
            }
        };

        match &self.nodes[idx].op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                let vb = &self.nodes[b.0].value;
                if vb.shape() == g.shape() {
                    acc(grads, *b, g.clone());
                } else {
                    // b broadcast along axis 0
                    let summed = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(grads, *b, summed);
                }
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.mapv(|v| -v));
            }
            Op::Scale(a, k) => acc(grads, *a, g.mapv(|v| v * k)),
            Op::AddScalar(a) => acc(grads, *a, g.clone()),
            Op::Matmul(a, b) => {
                let ga = as2(g);
                let va = as2(&self.nodes[a.0].value);
                let vb = as2(&self.nodes[b.0].value);
                if self.needs(*a) {
                    acc(grads, *a, ga.dot(&vb.t()).into_dyn());
                }
                if self.needs(*b) {
                    acc(grads, *b, va.t().dot(&ga).into_dyn());
                }
            }
            Op::AddRow(a, bias) => {
                acc(grads, *a, g.clone());
                if self.needs(*bias) {
                    let gb = as2(g).sum_axis(Axis(0));
                    acc(grads, *bias, gb.into_dyn());
                }
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let gy = as4(g);
                let vx = as4(&self.nodes[x.0].value);
                let vw = as4(&self.nodes[w.0].value);
                if self.needs(*x) {
                    let dx = conv2d_backward_data(
                        gy.view(),
                        vw.view(),
                        vx.dim(),
                        *stride,
                        *pad,
                        self.mode,
                    );
                    acc(grads, *x, dx.into_dyn());
                }
                let need_w = self.needs(*w);
                let need_b = b.map_or(false, |bv| self.needs(bv));
                if need_w || need_b {
                    let (dw, db) = conv2d_backward_weights(
                        gy.view(),
                        vx.view(),
                        vw.dim(),
                        *stride,
                        *pad,
                        self.mode,
                    );
                    if need_w {
                        acc(grads, *w, dw.into_dyn());
                    }
                    if let Some(bv) = b {
                        if need_b {
                            acc(grads, *bv, db.into_dyn());
                        }
                    }
                }
            }
            Op::Upsample2x(x) => {
                let gy = as4(g);
                let (b, c, h2, w2) = gy.dim();
                let (h, w) = (h2 / 2, w2 / 2);
                let mut dx = ndarray::Array4::<f64>::zeros((b, c, h, w));
                for bi in 0..b {
                    for ci in 0..c {
                        for y in 0..h2 {
                            for xx in 0..w2 {
                                dx[[bi, ci, y / 2, xx / 2]] += gy[[bi, ci, y, xx]];
                            }
                        }
                    }
                }
                acc(grads, *x, dx.into_dyn());
            }
            Op::Relu(x) => {
                let y = &self.nodes[idx].value;
                let dx = ndarray::Zip::from(g)
                    .and(y)
                    .map_collect(|&gv, &yv| if yv > 0.0 { gv } else { 0.0 });
                acc(grads, *x, dx);
            }
            Op::Tanh(x) => {
                let y = &self.nodes[idx].value;
                let dx = ndarray::Zip::from(g)
                    .and(y)
                    .map_collect(|&gv, &yv| gv * (1.0 - yv * yv));
                acc(grads, *x, dx);
            }
            Op::ChannelNorm { x, gamma, beta, eps } => {
                let v = as4(&self.nodes[x.0].value);
                let gm = &self.nodes[gamma.0].value;
                let gy = as4(g);
                let (b, c, h, w) = v.dim();
                let n = (h * w) as f64;
                let mut dx = ndarray::Array4::<f64>::zeros((b, c, h, w));
                let mut dgamma = Array1::<f64>::zeros(c);
                let mut dbeta = Array1::<f64>::zeros(c);
                for bi in 0..b {
                    for ci in 0..c {
                        let plane = v.index_axis(Axis(0), bi);
                        let plane = plane.index_axis(Axis(0), ci);
                        let gplane = gy.index_axis(Axis(0), bi);
                        let gplane = gplane.index_axis(Axis(0), ci);
                        let mu = plane.sum() / n;
                        let var =
                            plane.iter().map(|p| (p - mu) * (p - mu)).sum::<f64>() / n;
                        let inv = 1.0 / (var + eps).sqrt();
                        let gc = gm[[ci]];
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for (p, gv) in plane.iter().zip(gplane.iter()) {
                            let xhat = (p - mu) * inv;
                            let d = gv * gc;
                            mean_d += d;
                            mean_dx += d * xhat;
                            dgamma[ci] += gv * xhat;
                            dbeta[ci] += gv;
                        }
                        mean_d /= n;
                        mean_dx /= n;
                        let mut dplane = dx.index_axis_mut(Axis(0), bi);
                        let mut dplane = dplane.index_axis_mut(Axis(0), ci);
                        for ((dst, p), gv) in
                            dplane.iter_mut().zip(plane.iter()).zip(gplane.iter())
                        {
                            let xhat = (p - mu) * inv;
                            let d = gv * gc;
                            *dst = inv * (d - mean_d - xhat * mean_dx);
                        }
                    }
                }
                acc(grads, *x, dx.into_dyn());
                acc(grads, *gamma, dgamma.into_dyn());
                acc(grads, *beta, dbeta.into_dyn());
            }
            Op::GlobalAvgPool(x) => {
                let v = as4(&self.nodes[x.0].value);
                let (b, c, h, w) = v.dim();
                let gy = as2(g);
                let scale = 1.0 / (h * w) as f64;
                let mut dx = ndarray::Array4::<f64>::zeros((b, c, h, w));
                for bi in 0..b {
                    for ci in 0..c {
                        let gv = gy[[bi, ci]] * scale;
                        dx.index_axis_mut(Axis(0), bi)
                            .index_axis_mut(Axis(0), ci)
                            .fill(gv);
                    }
                }
                acc(grads, *x, dx.into_dyn());
            }
            Op::Reshape(x) => {
                let parent_shape = self.nodes[x.0].value.shape().to_vec();
                let dx = g
                    .as_standard_layout()
                    .to_owned()
                    .into_shape_with_order(IxDyn(&parent_shape))
                    .expect("same element count");
                acc(grads, *x, dx);
            }
            Op::Clamp { x, lo, hi } => {
                let v = &self.nodes[x.0].value;
                let dx = ndarray::Zip::from(g)
                    .and(v)
                    .map_collect(|&gv, &xv| if xv > *lo && xv < *hi { gv } else { 0.0 });
                acc(grads, *x, dx);
            }
            Op::Paste { patch, clean, mask } => {
                let gy = as4(g);
                let (b, c, h, w) = gy.dim();
                if self.needs(*patch) {
                    let mut dpatch = ndarray::Array3::<f64>::zeros((c, h, w));
                    for bi in 0..b {
                        for ci in 0..c {
                            for y in 0..h {
                                for x in 0..w {
                                    if mask[[y, x]] != 0.0 {
                                        dpatch[[ci, y, x]] += gy[[bi, ci, y, x]];
                                    }
                                }
                            }
                        }
                    }
                    acc(grads, *patch, dpatch.into_dyn());
                }
                if self.needs(*clean) {
                    let mut dclean = gy.to_owned();
                    for bi in 0..b {
                        for ci in 0..c {
                            for y in 0..h {
                                for x in 0..w {
                                    if mask[[y, x]] != 0.0 {
                                        dclean[[bi, ci, y, x]] = 0.0;
                                    }
                                }
                            }
                        }
                    }
                    acc(grads, *clean, dclean.into_dyn());
                }
            }
            Op::SpectralLowPass { x, filter } => {
                let gy = as4(g);
                let dx = filter
                    .low_pass_batch(gy.view(), self.mode)
                    .expect("gradient tensor is finite and correctly shaped");
                acc(grads, *x, dx.into_dyn());
            }
            Op::BatchL2Mean(x) => {
                let v = &self.nodes[x.0].value;
                let b = v.shape()[0];
                let gs = g.iter().next().copied().unwrap();
                let flat = flatten_rows(v);
                let mut dflat = Array2::<f64>::zeros(flat.dim());
                for (i, row) in flat.axis_iter(Axis(0)).enumerate() {
                    let norm = row.iter().map(|p| p * p).sum::<f64>().sqrt();
                    if norm > 0.0 {
                        let k = gs / (b as f64 * norm);
                        for (d, p) in dflat.row_mut(i).iter_mut().zip(row.iter()) {
                            *d = k * p;
                        }
                    }
                }
                let dx = dflat
                    .into_shape_with_order(IxDyn(v.shape()))
                    .expect("same element count");
                acc(grads, *x, dx);
            }
            Op::AdvInfoNce { adv, clean, tau } => {
                let a = as2(&self.nodes[adv.0].value).to_owned();
                let c = as2(&self.nodes[clean.0].value).to_owned();
                let gs = g.iter().next().copied().unwrap();
                let (an, anorm) = normalize_rows(&a);
                let (cn, cnorm) = normalize_rows(&c);
                let s = an.dot(&cn.t());
                let b = s.nrows();
                let mut ds = Array2::<f64>::zeros((b, b));
                for i in 0..b {
                    ds[[i, i]] += gs / (b as f64 * tau);
                    let max = off_diag_max(&s, i);
                    let denom: f64 = (0..b)
                        .filter(|&j| j != i)
                        .map(|j| ((s[[i, j]] - max) / tau).exp())
                        .sum();
                    for j in 0..b {
                        if j != i {
                            let p = ((s[[i, j]] - max) / tau).exp() / denom;
                            ds[[i, j]] -= gs * p / (b as f64 * tau);
                        }
                    }
                }
                if self.needs(*adv) {
                    let dan = ds.dot(&cn);
                    acc(grads, *adv, denormalize_rows(&dan, &an, &anorm).into_dyn());
                }
                if self.needs(*clean) {
                    let dcn = ds.t().dot(&an);
                    acc(grads, *clean, denormalize_rows(&dcn, &cn, &cnorm).into_dyn());
                }
            }
            Op::NtXent { z, tau } => {
                let zv = as2(&self.nodes[z.0].value).to_owned();
                let gs = g.iter().next().copied().unwrap();
                let (zn, znorm) = normalize_rows(&zv);
                let s = zn.dot(&zn.t());
                let m = s.nrows();
                let n = m / 2;
                let mut ds = Array2::<f64>::zeros((m, m));
                for i in 0..m {
                    let p = (i + n) % m;
                    ds[[i, p]] -= gs / (m as f64 * tau);
                    let max = off_diag_max(&s, i);
                    let denom: f64 = (0..m)
                        .filter(|&j| j != i)
                        .map(|j| ((s[[i, j]] - max) / tau).exp())
                        .sum();
                    for j in 0..m {
                        if j != i {
                            let q = ((s[[i, j]] - max) / tau).exp() / denom;
                            ds[[i, j]] += gs * q / (m as f64 * tau);
                        }
                    }
                }
                // s = zn zn^T uses zn on both sides.
                let dzn = ds.dot(&zn) + ds.t().dot(&zn);
                acc(grads, *z, denormalize_rows(&dzn, &zn, &znorm).into_dyn());
            }
            Op::SoftmaxCrossEntropy { logits, labels } => {
                let lv = as2(&self.nodes[logits.0].value);
                let (b, k) = lv.dim();
                let gs = g.iter().next().copied().unwrap();
                let mut dl = Array2::<f64>::zeros((b, k));
                for (i, row) in lv.axis_iter(Axis(0)).enumerate() {
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
                    for j in 0..k {
                        let p = (row[j] - max).exp() / denom;
                        let target = if labels[i] == j { 1.0 } else { 0.0 };
                        dl[[i, j]] = gs * (p - target) / b as f64;
                    }
                }
                acc(grads, *logits, dl.into_dyn());
            }
            Op::MeanAll(x) => {
                let v = &self.nodes[x.0].value;
                let gs = g.iter().next().copied().unwrap();
                let dx = Tensor::from_elem(v.raw_dim(), gs / v.len() as f64);
                acc(grads, *x, dx);
            }
        }
    }
}

// ---- shared small helpers ----------------------------------------------

fn scalar_tensor(v: f64) -> Tensor {
    Tensor::from_elem(IxDyn(&[]), v)
}

fn as2(t: &Tensor) -> ndarray::ArrayView2<'_, f64> {
    t.view()
        .into_dimensionality::<Ix2>()
        .expect("expected a rank-2 tensor")
}

fn as4(t: &Tensor) -> ndarray::ArrayView4<'_, f64> {
    t.view()
        .into_dimensionality::<Ix4>()
        .expect("expected a rank-4 tensor")
}

fn flatten_rows(t: &Tensor) -> Array2<f64> {
    let b = t.shape()[0];
    let rest: usize = t.shape()[1..].iter().product();
    t.as_standard_layout()
        .to_owned()
        .into_shape_with_order((b, rest))
        .expect("row flatten")
}

/// Unit-normalizes rows; returns the normalized matrix and original norms.
/// Rows must be non-zero (validated at the public API boundary).
fn normalize_rows(x: &Array2<f64>) -> (Array2<f64>, Vec<f64>) {
    let mut out = x.clone();
    let mut norms = Vec::with_capacity(x.nrows());
    for mut row in out.axis_iter_mut(Axis(0)) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm > 0.0, "zero-norm feature row has no cosine direction");
        row.mapv_inplace(|v| v / norm);
        norms.push(norm);
    }
    (out, norms)
}

/// Backward of row normalization: given dL/d(unit rows), the unit rows, and
/// the pre-normalization norms, produces dL/d(raw rows).
fn denormalize_rows(dn: &Array2<f64>, unit: &Array2<f64>, norms: &[f64]) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros(dn.dim());
    for i in 0..dn.nrows() {
        let dot: f64 = dn.row(i).iter().zip(unit.row(i).iter()).map(|(a, b)| a * b).sum();
        for (o, (d, u)) in out
            .row_mut(i)
            .iter_mut()
            .zip(dn.row(i).iter().zip(unit.row(i).iter()))
        {
            *o = (d - u * dot) / norms[i];
        }
    }
    out
}

fn off_diag_max(s: &Array2<f64>, i: usize) -> f64 {
    (0..s.ncols())
        .filter(|&j| j != i)
        .map(|j| s[[i, j]])
        .fold(f64::NEG_INFINITY, f64::max)
}

/// log sum exp over row i excluding the diagonal, with temperatures applied.
fn off_diag_lse(s: &Array2<f64>, i: usize, tau: f64) -> f64 {
    let max = off_diag_max(s, i);
    let sum: f64 = (0..s.ncols())
        .filter(|&j| j != i)
        .map(|j| ((s[[i, j]] - max) / tau).exp())
        .sum();
    max / tau + sum.ln()
}
