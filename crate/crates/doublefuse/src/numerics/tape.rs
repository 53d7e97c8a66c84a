//! Reverse-mode automatic differentiation over a per-step tape.
//!
//! A [`Tape`] records one forward pass as a flat list of nodes. Calling
//! [`Tape::backward`] walks the list in reverse, accumulates gradients into
//! the [`ParamStore`], and consumes the tape (a second call is an error).
//! There are no higher-order derivatives.
//!
//! Frozen sub-models run on their own throwaway tape; their outputs re-enter
//! the training tape through [`Tape::constant`], which is how "no gradients
//! through frozen weights" is enforced structurally rather than by flags.

use super::attn::{attention_backward, attention_forward, AttnPlan};
use super::kernels::{axpy, gemm_nn, gemm_nt, gemm_tn, softmax_rows_inplace};
use super::scalar::Scalar;
use super::tensor::{ParamId, ParamStore, Tensor};
use super::NumericsError;
use std::sync::Arc;

/// Handle to a tensor recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TensorId(usize);

enum Op<S: Scalar> {
    Leaf { param: ParamId, trainable: bool },
    Constant,
    /// `[m,k] · [n,k]^T -> [m,n]`
    MatmulNt { a: TensorId, b: TensorId },
    /// `[m,k] · [k,n] -> [m,n]`
    MatmulNn { a: TensorId, b: TensorId },
    AddRowBias { x: TensorId, bias: TensorId },
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Scale { x: TensorId, c: S },
    AddScalar { x: TensorId },
    Silu { x: TensorId },
    RmsNorm { x: TensorId, gain: TensorId, inv_rms: Vec<S> },
    SoftmaxLast { x: TensorId },
    Attention {
        q: TensorId,
        k: TensorId,
        v: TensorId,
        plan: Arc<AttnPlan>,
        heads: usize,
        probs: Vec<S>,
    },
    GatherRows { x: TensorId, idx: Arc<Vec<u32>> },
    ConcatRows { a: TensorId, b: TensorId },
    SliceRows { x: TensorId, start: usize },
    MeanAll { x: TensorId },
    SumAll { x: TensorId },
    CrossEntropyMean {
        logits: TensorId,
        targets: Arc<Vec<i64>>,
        probs: Vec<S>,
    },
}

impl<S: Scalar> Op<S> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::Constant => "constant",
            Op::MatmulNt { .. } => "matmul_nt",
            Op::MatmulNn { .. } => "matmul_nn",
            Op::AddRowBias { .. } => "add_row_bias",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::AddScalar { .. } => "add_scalar",
            Op::Silu { .. } => "silu",
            Op::RmsNorm { .. } => "rmsnorm",
            Op::SoftmaxLast { .. } => "softmax_lastdim",
            Op::Attention { .. } => "attention",
            Op::GatherRows { .. } => "gather_rows",
            Op::ConcatRows { .. } => "concat_rows",
            Op::SliceRows { .. } => "slice_rows",
            Op::MeanAll { .. } => "mean_all",
            Op::SumAll { .. } => "sum_all",
            Op::CrossEntropyMean { .. } => "cross_entropy_mean",
        }
    }
}

struct Node<S: Scalar> {
    shape: Vec<usize>,
    data: Arc<Vec<S>>,
    op: Op<S>,
}

/// Records one forward pass; see module docs.
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    consumed: bool,
    /// When set, every op output is scanned for NaN/Inf and panics on the
    /// first offender ("checked mode"; used with `f64` oracle runs).
    pub checked: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
            checked: false,
        }
    }

    pub fn checked() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
            checked: true,
        }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<S>, op: Op<S>) -> TensorId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        if self.checked && !data.iter().all(|v| v.is_finite()) {
            panic!("non-finite value produced by op `{}`", op.name());
        }
        self.nodes.push(Node {
            shape,
            data: Arc::new(data),
            op,
        });
        TensorId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: &Tensor<S>) -> TensorId {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            data: t.arc(),
            op: Op::Constant,
        });
        TensorId(self.nodes.len() - 1)
    }

    /// Bring a parameter onto the tape. Gradients reach the store on
    /// [`Tape::backward`] only if the parameter is trainable.
    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> TensorId {
        let p = store.get(id);
        self.nodes.push(Node {
            shape: p.value.shape().to_vec(),
            data: p.value.arc(),
            op: Op::Leaf {
                param: id,
                trainable: p.trainable,
            },
        });
        TensorId(self.nodes.len() - 1)
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn data(&self, id: TensorId) -> &[S] {
        &self.nodes[id.0].data
    }

    pub fn value(&self, id: TensorId) -> Tensor<S> {
        Tensor::from_arc(self.nodes[id.0].shape.clone(), Arc::clone(&self.nodes[id.0].data))
    }

    fn rows(&self, id: TensorId) -> usize {
        let s = &self.nodes[id.0].shape;
        if s.is_empty() {
            1
        } else {
            s[..s.len() - 1].iter().product()
        }
    }

    fn cols(&self, id: TensorId) -> usize {
        self.nodes[id.0].shape.last().copied().unwrap_or(1)
    }

    // ---- forward ops ----

    /// `a[m,k] · b[n,k]^T`, the linear-layer shape with weights `[out, in]`.
    pub fn matmul_nt(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (m, k) = (self.rows(a), self.cols(a));
        let (n, kb) = (self.rows(b), self.cols(b));
        assert_eq!(k, kb, "matmul_nt inner dims {k} vs {kb}");
        let mut out = vec![S::zero(); m * n];
        gemm_nt(self.data(a), self.data(b), m, k, n, &mut out);
        self.push(vec![m, n], out, Op::MatmulNt { a, b })
    }

    /// `a[m,k] · b[k,n]`.
    pub fn matmul_nn(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (m, k) = (self.rows(a), self.cols(a));
        let (kb, n) = (self.rows(b), self.cols(b));
        assert_eq!(k, kb, "matmul_nn inner dims {k} vs {kb}");
        let mut out = vec![S::zero(); m * n];
        gemm_nn(self.data(a), self.data(b), m, k, n, &mut out);
        self.push(vec![m, n], out, Op::MatmulNn { a, b })
    }

    /// Broadcast a `[n]` bias over the rows of `x[m,n]`.
    pub fn add_row_bias(&mut self, x: TensorId, bias: TensorId) -> TensorId {
        let n = self.cols(x);
        assert_eq!(self.nodes[bias.0].data.len(), n, "bias length mismatch");
        let bdat = Arc::clone(&self.nodes[bias.0].data);
        let out: Vec<S> = self
            .data(x)
            .chunks(n)
            .flat_map(|row| row.iter().zip(bdat.iter()).map(|(&a, &b)| a + b))
            .collect();
        self.push(self.nodes[x.0].shape.clone(), out, Op::AddRowBias { x, bias })
    }

    fn zip2(&mut self, a: TensorId, b: TensorId, f: impl Fn(S, S) -> S, op: Op<S>) -> TensorId {
        assert_eq!(
            self.nodes[a.0].shape, self.nodes[b.0].shape,
            "elementwise shape mismatch in {}",
            op.name()
        );
        let out: Vec<S> = self.data(a).iter().zip(self.data(b).iter()).map(|(&x, &y)| f(x, y)).collect();
        self.push(self.nodes[a.0].shape.clone(), out, op)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.zip2(a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.zip2(a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.zip2(a, b, |x, y| x * y, Op::Mul { a, b })
    }

    pub fn scale(&mut self, x: TensorId, c: S) -> TensorId {
        let out: Vec<S> = self.data(x).iter().map(|&v| v * c).collect();
        self.push(self.nodes[x.0].shape.clone(), out, Op::Scale { x, c })
    }

    pub fn add_scalar(&mut self, x: TensorId, c: S) -> TensorId {
        let out: Vec<S> = self.data(x).iter().map(|&v| v + c).collect();
        self.push(self.nodes[x.0].shape.clone(), out, Op::AddScalar { x })
    }

    pub fn silu(&mut self, x: TensorId) -> TensorId {
        let out: Vec<S> = self
            .data(x)
            .iter()
            .map(|&v| v / (S::one() + (-v).exp()))
            .collect();
        self.push(self.nodes[x.0].shape.clone(), out, Op::Silu { x })
    }

    /// RMS normalization over the last dimension: `x / sqrt(mean(x²)+eps) · gain`.
    pub fn rmsnorm(&mut self, x: TensorId, gain: TensorId, eps: S) -> TensorId {
        let n = self.cols(x);
        assert_eq!(self.nodes[gain.0].data.len(), n, "rmsnorm gain length mismatch");
        assert!(eps > S::zero(), "rmsnorm eps must be positive");
        let rows = self.rows(x);
        let gdat = Arc::clone(&self.nodes[gain.0].data);
        let xdat = Arc::clone(&self.nodes[x.0].data);
        let mut out = vec![S::zero(); rows * n];
        let mut inv_rms = vec![S::zero(); rows];
        let nf = S::from_f64(n as f64);
        for r in 0..rows {
            let row = &xdat[r * n..(r + 1) * n];
            let mut ms = S::zero();
            for &v in row {
                ms += v * v;
            }
            let r_inv = S::one() / (ms / nf + eps).sqrt();
            inv_rms[r] = r_inv;
            for (o, (&v, &g)) in out[r * n..(r + 1) * n].iter_mut().zip(row.iter().zip(gdat.iter())) {
                *o = v * r_inv * g;
            }
        }
        self.push(self.nodes[x.0].shape.clone(), out, Op::RmsNorm { x, gain, inv_rms })
    }

    /// Numerically stabilized softmax over the last dimension.
    pub fn softmax_lastdim(&mut self, x: TensorId) -> TensorId {
        let n = self.cols(x);
        assert!(n > 0 && !self.data(x).is_empty(), "softmax: empty input");
        let mut out = self.data(x).to_vec();
        softmax_rows_inplace(&mut out, n);
        self.push(self.nodes[x.0].shape.clone(), out, Op::SoftmaxLast { x })
    }

    /// Masked multi-head attention with rotary positions, executed per
    /// sample span. `q`, `k` must share width; `v` width equals the output
    /// width. Masked probabilities are exactly zero.
    pub fn attention(
        &mut self,
        q: TensorId,
        k: TensorId,
        v: TensorId,
        plan: Arc<AttnPlan>,
        heads: usize,
    ) -> TensorId {
        let d = self.cols(q);
        assert_eq!(d, self.cols(k), "attention q/k width mismatch");
        assert_eq!(d % heads, 0, "attention width not divisible by heads");
        assert_eq!(self.cols(v), d, "attention v width mismatch");
        let nq = self.rows(q);
        let (out, probs) = attention_forward(
            self.data(q),
            self.data(k),
            self.data(v),
            nq,
            self.rows(k),
            d,
            heads,
            &plan,
        );
        self.push(vec![nq, d], out, Op::Attention { q, k, v, plan, heads, probs })
    }

    /// `out[i,:] = x[idx[i],:]` — embedding lookup, row broadcast, reorder.
    pub fn gather_rows(&mut self, x: TensorId, idx: Arc<Vec<u32>>) -> TensorId {
        let n = self.cols(x);
        let rows = self.rows(x);
        let xdat = Arc::clone(&self.nodes[x.0].data);
        let mut out = vec![S::zero(); idx.len() * n];
        for (i, &src) in idx.iter().enumerate() {
            let src = src as usize;
            assert!(src < rows, "gather_rows index {src} out of {rows}");
            out[i * n..(i + 1) * n].copy_from_slice(&xdat[src * n..(src + 1) * n]);
        }
        let len = idx.len();
        self.push(vec![len, n], out, Op::GatherRows { x, idx })
    }

    pub fn concat_rows(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let n = self.cols(a);
        assert_eq!(n, self.cols(b), "concat_rows width mismatch");
        let (ra, rb) = (self.rows(a), self.rows(b));
        let mut out = Vec::with_capacity((ra + rb) * n);
        out.extend_from_slice(self.data(a));
        out.extend_from_slice(self.data(b));
        self.push(vec![ra + rb, n], out, Op::ConcatRows { a, b })
    }

    pub fn slice_rows(&mut self, x: TensorId, start: usize, len: usize) -> TensorId {
        let n = self.cols(x);
        assert!(start + len <= self.rows(x), "slice_rows out of range");
        let out = self.data(x)[start * n..(start + len) * n].to_vec();
        self.push(vec![len, n], out, Op::SliceRows { x, start })
    }

    pub fn mean_all(&mut self, x: TensorId) -> TensorId {
        let numel = self.nodes[x.0].data.len();
        let s: S = self.data(x).iter().copied().sum();
        self.push(vec![], vec![s / S::from_f64(numel as f64)], Op::MeanAll { x })
    }

    pub fn sum_all(&mut self, x: TensorId) -> TensorId {
        let s: S = self.data(x).iter().copied().sum();
        self.push(vec![], vec![s], Op::SumAll { x })
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`. Target `-1` means "ignore this row".
    pub fn cross_entropy_mean(&mut self, logits: TensorId, targets: Arc<Vec<i64>>) -> TensorId {
        let vocab = self.cols(logits);
        let rows = self.rows(logits);
        assert_eq!(rows, targets.len(), "cross_entropy target count mismatch");
        let mut probs = self.data(logits).to_vec();
        softmax_rows_inplace(&mut probs, vocab);
        let mut loss = S::zero();
        let mut count = 0usize;
        for (r, &t) in targets.iter().enumerate() {
            if t >= 0 {
                let p = probs[r * vocab + t as usize];
                loss += -(p.max(S::from_f64(1e-300))).ln();
                count += 1;
            }
        }
        assert!(count > 0, "cross_entropy: no unignored targets");
        let out = loss / S::from_f64(count as f64);
        self.push(vec![], vec![out], Op::CrossEntropyMean { logits, targets, probs })
    }

    // ---- backward ----

    /// Propagate gradients from a scalar loss to every reachable trainable
    /// parameter. Consumes the tape.
    pub fn backward(&mut self, loss: TensorId, store: &mut ParamStore<S>) -> Result<(), NumericsError> {
        if self.consumed {
            return Err(NumericsError::TapeConsumed);
        }
        if self.nodes[loss.0].data.len() != 1 {
            return Err(NumericsError::NonScalarLoss {
                shape: self.nodes[loss.0].shape.clone(),
            });
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);

        for i in (0..self.nodes.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            // Split borrows: the node being processed vs parent grad slots.
            let (node_shape, node_data_len) = (&self.nodes[i].shape, self.nodes[i].data.len());
            let _ = (node_shape, node_data_len);
            match &self.nodes[i].op {
                Op::Constant => {}
                Op::Leaf { param, trainable } => {
                    if *trainable {
                        store.accumulate_grad(*param, &g);
                    }
                }
                Op::MatmulNt { a, b } => {
                    let (a, b) = (*a, *b);
                    let (m, k) = (self.rows(a), self.cols(a));
                    let n = self.rows(b);
                    {
                        let mut da = vec![S::zero(); m * k];
                        gemm_nn(&g, self.data(b), m, n, k, &mut da);
                        acc(&mut grads[a.0], &da);
                    }
                    {
                        let mut db = vec![S::zero(); n * k];
                        gemm_tn(&g, self.data(a), m, n, k, &mut db);
                        acc(&mut grads[b.0], &db);
                    }
                }
                Op::MatmulNn { a, b } => {
                    let (a, b) = (*a, *b);
                    let (m, k) = (self.rows(a), self.cols(a));
                    let n = self.cols(b);
                    {
                        let mut da = vec![S::zero(); m * k];
                        gemm_nt(&g, self.data(b), m, n, k, &mut da);
                        acc(&mut grads[a.0], &da);
                    }
                    {
                        let mut db = vec![S::zero(); k * n];
                        gemm_tn(self.data(a), &g, m, k, n, &mut db);
                        acc(&mut grads[b.0], &db);
                    }
                }
                Op::AddRowBias { x, bias } => {
                    let (x, bias) = (*x, *bias);
                    let n = self.cols(x);
                    acc(&mut grads[x.0], &g);
                    let mut db = vec![S::zero(); n];
                    for row in g.chunks(n) {
                        for (d, &v) in db.iter_mut().zip(row.iter()) {
                            *d += v;
                        }
                    }
                    acc(&mut grads[bias.0], &db);
                }
                Op::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    acc(&mut grads[a.0], &g);
                    acc(&mut grads[b.0], &g);
                }
                Op::Sub { a, b } => {
                    let (a, b) = (*a, *b);
                    acc(&mut grads[a.0], &g);
                    let neg: Vec<S> = g.iter().map(|&v| -v).collect();
                    acc(&mut grads[b.0], &neg);
                }
                Op::Mul { a, b } => {
                    let (a, b) = (*a, *b);
                    let da: Vec<S> = g.iter().zip(self.data(b).iter()).map(|(&gv, &bv)| gv * bv).collect();
                    let db: Vec<S> = g.iter().zip(self.data(a).iter()).map(|(&gv, &av)| gv * av).collect();
                    acc(&mut grads[a.0], &da);
                    acc(&mut grads[b.0], &db);
                }
                Op::Scale { x, c } => {
                    let (x, c) = (*x, *c);
                    let dx: Vec<S> = g.iter().map(|&v| v * c).collect();
                    acc(&mut grads[x.0], &dx);
                }
                Op::AddScalar { x } => {
                    acc(&mut grads[x.0], &g);
                }
                Op::Silu { x } => {
                    let x = *x;
                    let dx: Vec<S> = g
                        .iter()
                        .zip(self.data(x).iter())
                        .map(|(&gv, &xv)| {
                            let s = S::one() / (S::one() + (-xv).exp());
                            gv * s * (S::one() + xv * (S::one() - s))
                        })
                        .collect();
                    acc(&mut grads[x.0], &dx);
                }
                Op::RmsNorm { x, gain, inv_rms } => {
                    let (x, gain) = (*x, *gain);
                    let n = self.cols(x);
                    let rows = self.rows(x);
                    let nf = S::from_f64(n as f64);
                    let xdat = Arc::clone(&self.nodes[x.0].data);
                    let gdat = Arc::clone(&self.nodes[gain.0].data);
                    let mut dx = vec![S::zero(); rows * n];
                    let mut dg = vec![S::zero(); n];
                    for r in 0..rows {
                        let r_inv = inv_rms[r];
                        let xr = &xdat[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let mut dot_dgx = S::zero();
                        for j in 0..n {
                            dot_dgx += gr[j] * gdat[j] * xr[j];
                            dg[j] += gr[j] * xr[j] * r_inv;
                        }
                        let coef = dot_dgx * r_inv * r_inv * r_inv / nf;
                        for j in 0..n {
                            dx[r * n + j] = gr[j] * gdat[j] * r_inv - xr[j] * coef;
                        }
                    }
                    acc(&mut grads[x.0], &dx);
                    acc(&mut grads[gain.0], &dg);
                }
                Op::SoftmaxLast { x } => {
                    let x = *x;
                    let n = self.cols(x);
                    let y = Arc::clone(&self.nodes[i].data);
                    let mut dx = vec![S::zero(); y.len()];
                    for (r, gr) in g.chunks(n).enumerate() {
                        let yr = &y[r * n..(r + 1) * n];
                        let mut dot = S::zero();
                        for j in 0..n {
                            dot += gr[j] * yr[j];
                        }
                        for j in 0..n {
                            dx[r * n + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    acc(&mut grads[x.0], &dx);
                }
                Op::Attention { q, k, v, plan, heads, probs } => {
                    let (q, k, v) = (*q, *k, *v);
                    let heads = *heads;
                    let plan = Arc::clone(plan);
                    let d = self.cols(q);
                    let (dq, dk, dv) = attention_backward(
                        &g,
                        self.data(q),
                        self.data(k),
                        self.data(v),
                        self.rows(q),
                        self.rows(k),
                        d,
                        heads,
                        &plan,
                        probs,
                    );
                    acc(&mut grads[q.0], &dq);
                    acc(&mut grads[k.0], &dk);
                    acc(&mut grads[v.0], &dv);
                }
                Op::GatherRows { x, idx } => {
                    let x = *x;
                    let idx = Arc::clone(idx);
                    let n = self.cols(x);
                    let mut dx = vec![S::zero(); self.nodes[x.0].data.len()];
                    for (i_row, &src) in idx.iter().enumerate() {
                        let src = src as usize;
                        axpy(S::one(), &g[i_row * n..(i_row + 1) * n], &mut dx[src * n..(src + 1) * n]);
                    }
                    acc(&mut grads[x.0], &dx);
                }
                Op::ConcatRows { a, b } => {
                    let (a, b) = (*a, *b);
                    let na = self.nodes[a.0].data.len();
                    acc(&mut grads[a.0], &g[..na]);
                    acc(&mut grads[b.0], &g[na..]);
                }
                Op::SliceRows { x, start } => {
                    let (x, start) = (*x, *start);
                    let n = self.cols(x);
                    let mut dx = vec![S::zero(); self.nodes[x.0].data.len()];
                    dx[start * n..start * n + g.len()].copy_from_slice(&g);
                    acc(&mut grads[x.0], &dx);
                }
                Op::MeanAll { x } => {
                    let x = *x;
                    let numel = self.nodes[x.0].data.len();
                    let gv = g[0] / S::from_f64(numel as f64);
                    let dx = vec![gv; numel];
                    acc(&mut grads[x.0], &dx);
                }
                Op::SumAll { x } => {
                    let x = *x;
                    let dx = vec![g[0]; self.nodes[x.0].data.len()];
                    acc(&mut grads[x.0], &dx);
                }
                Op::CrossEntropyMean { logits, targets, probs } => {
                    let logits = *logits;
                    let vocab = self.cols(logits);
                    let count = targets.iter().filter(|&&t| t >= 0).count();
                    let scale = g[0] / S::from_f64(count as f64);
                    let mut dx = vec![S::zero(); probs.len()];
                    for (r, &t) in targets.iter().enumerate() {
                        if t >= 0 {
                            let row = &probs[r * vocab..(r + 1) * vocab];
                            let drow = &mut dx[r * vocab..(r + 1) * vocab];
                            for j in 0..vocab {
                                drow[j] = row[j] * scale;
                            }
                            drow[t as usize] -= scale;
                        }
                    }
                    acc(&mut grads[logits.0], &dx);
                }
            }
        }
        Ok(())
    }
}

fn acc<S: Scalar>(slot: &mut Option<Vec<S>>, delta: &[S]) {
    match slot {
        Some(g) => {
            debug_assert_eq!(g.len(), delta.len());
            for (gi, di) in g.iter_mut().zip(delta.iter()) {
                *gi += *di;
            }
        }
        None => *slot = Some(delta.to_vec()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with<S: Scalar>(name: &str, shape: Vec<usize>, vals: Vec<S>) -> (ParamStore<S>, ParamId) {
        let mut ps = ParamStore::new();
        let id = ps.add(name, Tensor::new(shape, vals).unwrap(), true);
        (ps, id)
    }

    #[test]
    fn linear_loss_grad_is_input() {
        // loss = sum(w ∘ x), constant x  =>  dL/dw = x
        let (mut ps, w) = store_with("w", vec![3], vec![1.0f64, -2.0, 0.5]);
        let x = Tensor::new(vec![3], vec![3.0, 5.0, 7.0]).unwrap();
        let mut tape = Tape::new();
        let wt = tape.param(&ps, w);
        let xt = tape.constant(&x);
        let prod = tape.mul(wt, xt);
        let loss = tape.sum_all(prod);
        tape.backward(loss, &mut ps).unwrap();
        assert_eq!(ps.grad(w).unwrap(), &[3.0, 5.0, 7.0]);
    }

    #[test]
    fn quadratic_loss_grad_is_param() {
        // loss = sum(w²)/2  =>  dL/dw = w
        let (mut ps, w) = store_with("w", vec![4], vec![2.0f64, -1.0, 0.0, 3.5]);
        let mut tape = Tape::new();
        let wt = tape.param(&ps, w);
        let sq = tape.mul(wt, wt);
        let half = tape.scale(sq, 0.5);
        let loss = tape.sum_all(half);
        tape.backward(loss, &mut ps).unwrap();
        assert_eq!(ps.grad(w).unwrap(), &[2.0, -1.0, 0.0, 3.5]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let (mut ps, w) = store_with("w", vec![2], vec![1.0f64, 2.0]);
        let mut tape = Tape::new();
        let wt = tape.param(&ps, w);
        let err = tape.backward(wt, &mut ps).unwrap_err();
        assert!(matches!(err, NumericsError::NonScalarLoss { .. }));
    }

    #[test]
    fn double_backward_rejected() {
        let (mut ps, w) = store_with("w", vec![1], vec![1.0f64]);
        let mut tape = Tape::new();
        let wt = tape.param(&ps, w);
        let loss = tape.sum_all(wt);
        tape.backward(loss, &mut ps).unwrap();
        let err = tape.backward(loss, &mut ps).unwrap_err();
        assert!(matches!(err, NumericsError::TapeConsumed));
    }

    #[test]
    fn unreachable_param_gets_no_grad() {
        let mut ps = ParamStore::<f64>::new();
        let used = ps.add("used", Tensor::filled(vec![2], 1.0), true);
        let unused = ps.add("unused", Tensor::filled(vec![2], 1.0), true);
        let mut tape = Tape::new();
        let ut = tape.param(&ps, used);
        let loss = tape.sum_all(ut);
        tape.backward(loss, &mut ps).unwrap();
        assert!(ps.grad(used).is_some());
        assert!(ps.grad(unused).is_none());
    }

    #[test]
    fn frozen_param_gets_no_grad() {
        let mut ps = ParamStore::<f64>::new();
        let frozen = ps.add("frozen", Tensor::filled(vec![2], 1.0), false);
        let mut tape = Tape::new();
        let ft = tape.param(&ps, frozen);
        let loss = tape.sum_all(ft);
        tape.backward(loss, &mut ps).unwrap();
        assert!(ps.grad(frozen).is_none());
    }

    #[test]
    #[should_panic(expected = "non-finite")]
    fn checked_mode_catches_nan() {
        let mut tape = Tape::<f64>::checked();
        let x = tape.constant(&Tensor::new(vec![2], vec![1.0, 0.0]).unwrap());
        let inv = tape.constant(&Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
        // 1/0 via mul of x with a map is not representable; force NaN with 0*inf path:
        let big = tape.scale(x, f64::MAX);
        let _ = tape.mul(big, big); // overflows to inf -> panics
        let _ = inv;
    }
}
