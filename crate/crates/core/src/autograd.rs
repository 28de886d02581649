//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! Every value on the tape is a 2-D array; scalars are `1 x 1`. Operations
//! are recorded in creation order, which is a valid topological order, so the
//! backward sweep simply walks the tape in reverse. Parameters are not copied
//! onto the tape: a parameter node reads its value from the borrowed
//! [`ParamStore`], and its gradient is returned in a [`Gradients`] set aligned
//! with the store.
//!
//! Rows of several sequences can share one matrix. Attention and pooling take
//! a list of [`Segment`]s describing where each sequence lives; every other op
//! is row-wise and does not care.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{s, Array2, ArrayView2, Axis, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};

use crate::error::{Error, Result};

/// Floating-point element type of models and tapes (`f32` or `f64`).
pub trait Real:
    Float
    + FromPrimitive
    + LinalgScalar
    + ScalarOperand
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    const BITS: u32;

    fn of(x: f64) -> Self;

    fn as_f64(self) -> f64;
}

impl Real for f32 {
    const BITS: u32 = 32;

    fn of(x: f64) -> Self {
        x as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    const BITS: u32 = 64;

    fn of(x: f64) -> Self {
        x
    }

    fn as_f64(self) -> f64 {
        self
    }
}

/// Handle of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable matrices.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<F> {
    names: Vec<String>,
    values: Vec<Array2<F>>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Array2<F>) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Array2<F> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<F> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Array2<F>)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }
}

/// Gradients aligned with a [`ParamStore`]; unreached parameters hold zeros.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<F> {
    grads: Vec<Array2<F>>,
}

impl<F: Real> Gradients<F> {
    pub fn zeros_like(store: &ParamStore<F>) -> Self {
        Self {
            grads: store
                .values
                .iter()
                .map(|v| Array2::zeros(v.raw_dim()))
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Array2<F> {
        &self.grads[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Array2<F>> {
        self.grads.iter()
    }

    pub fn accumulate(&mut self, other: &Gradients<F>) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: F) {
        for g in &mut self.grads {
            g.mapv_inplace(|x| x * factor);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|g| g.iter())
            .map(|x| x.as_f64() * x.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    pub fn norm_of(&self, id: ParamId) -> f64 {
        self.grads[id.0]
            .iter()
            .map(|x| x.as_f64() * x.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    fn first_non_finite(&self) -> Option<usize> {
        self.grads
            .iter()
            .position(|g| g.iter().any(|x| !x.is_finite()))
    }
}

/// Where one sequence lives inside a row-packed matrix.
///
/// Rows `start..start + len` belong to the sequence; only the first `valid`
/// of them are real positions, the rest are right padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
    pub valid: usize,
}

impl Segment {
    pub fn unpadded(start: usize, len: usize) -> Self {
        Self {
            start,
            len,
            valid: len,
        }
    }
}

/// Handle of a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<F> {
    Param(usize),
    Const,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, F),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array2<F>,
        inv_std: Vec<F>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: Vec<Segment>,
        probs: Vec<Array2<F>>,
    },
    GatherRows {
        src: Var,
        rows: Vec<usize>,
    },
    Assemble {
        sources: Vec<Var>,
        map: Vec<(usize, usize)>,
    },
    SegmentMean {
        src: Var,
        segments: Vec<Segment>,
    },
    L2Normalize {
        src: Var,
        norms: Vec<F>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<F>,
        probs: Array2<F>,
    },
    WeightedMse {
        pred: Var,
        target: Array2<F>,
        weights: Vec<F>,
    },
    Sum(Vec<Var>),
}

struct Node<F> {
    value: Array2<F>,
    op: Op<F>,
}

/// Records operations for one forward pass.
pub struct Tape<'p, F: Real> {
    params: &'p ParamStore<F>,
    nodes: Vec<Node<F>>,
    param_vars: Vec<Option<Var>>,
}

const LN_EPS: f64 = 1e-5;

impl<'p, F: Real> Tape<'p, F> {
    pub fn new(params: &'p ParamStore<F>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamStore<F> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<F> {
        match self.nodes[v.0].op {
            Op::Param(id) => &self.params.values[id],
            _ => &self.nodes[v.0].value,
        }
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> F {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    fn push(&mut self, value: Array2<F>, op: Op<F>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Leaf for a parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let v = self.push(Array2::zeros((0, 0)), Op::Param(id.0));
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn constant(&mut self, value: Array2<F>) -> Var {
        self.push(value, Op::Const)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(&self.value(b).t());
        self.push(out, Op::MatMulNT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        self.push(out, Op::Add(a, b))
    }

    /// Adds the `1 x m` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        self.push(out, Op::AddRow(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: F) -> Var {
        let out = self.value(a).mapv(|x| x * factor);
        self.push(out, Op::Scale(a, factor))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(gelu);
        self.push(out, Op::Gelu(a))
    }

    /// Row-wise layer normalisation with affine `1 x d` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (n, d) = xv.dim();
        let df = F::of(d as f64);
        let eps = F::of(LN_EPS);
        let mut xhat = Array2::zeros((n, d));
        let mut inv_std = Vec::with_capacity(n);
        for (r, row) in xv.outer_iter().enumerate() {
            let mean = row.sum() / df;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / df;
            let is = F::one() / (var + eps).sqrt();
            inv_std.push(is);
            for (c, &v) in row.iter().enumerate() {
                xhat[[r, c]] = (v - mean) * is;
            }
        }
        let out = &xhat * self.value(gamma) + self.value(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Multi-head scaled dot-product attention, block-diagonal over
    /// `segments`. Padding rows of a segment are never attended to; with
    /// `causal`, row `i` of a segment sees only keys `j <= i`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: &[Segment],
        causal: bool,
    ) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, d) = qv.dim();
        assert_eq!(d % heads, 0);
        let dh = d / heads;
        let scale = F::one() / F::of(dh as f64).sqrt();
        let mut out = Array2::zeros((n, d));
        let mut probs = Vec::with_capacity(segments.len() * heads);
        for seg in segments {
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let qs = qv.slice(s![seg.start..seg.start + seg.len, cols.clone()]);
                let ks = kv.slice(s![seg.start..seg.start + seg.valid, cols.clone()]);
                let vs = vv.slice(s![seg.start..seg.start + seg.valid, cols.clone()]);
                let mut p = qs.dot(&ks.t());
                for (i, mut row) in p.outer_iter_mut().enumerate() {
                    let allowed = if causal { (i + 1).min(seg.valid) } else { seg.valid };
                    let mut max = F::neg_infinity();
                    for x in row.iter_mut().take(allowed) {
                        *x = *x * scale;
                        if *x > max {
                            max = *x;
                        }
                    }
                    let mut sum = F::zero();
                    for x in row.iter_mut().take(allowed) {
                        *x = (*x - max).exp();
                        sum += *x;
                    }
                    for (j, x) in row.iter_mut().enumerate() {
                        if j < allowed {
                            *x /= sum;
                        } else {
                            *x = F::zero();
                        }
                    }
                }
                let o = p.dot(&vs);
                out.slice_mut(s![seg.start..seg.start + seg.len, cols])
                    .assign(&o);
                probs.push(p);
            }
        }
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments: segments.to_vec(),
                probs,
            },
        )
    }

    /// Output row `i` is row `rows[i]` of `src`.
    pub fn gather_rows(&mut self, src: Var, rows: &[usize]) -> Var {
        let sv = self.value(src);
        let mut out = Array2::zeros((rows.len(), sv.ncols()));
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(i).assign(&sv.row(r));
        }
        self.push(
            out,
            Op::GatherRows {
                src,
                rows: rows.to_vec(),
            },
        )
    }

    /// Output row `i` is row `map[i].1` of `sources[map[i].0]`. All sources
    /// must share a column count.
    pub fn assemble(&mut self, sources: &[Var], map: &[(usize, usize)]) -> Var {
        let cols = self.value(sources[0]).ncols();
        let mut out = Array2::zeros((map.len(), cols));
        for (i, &(s, r)) in map.iter().enumerate() {
            out.row_mut(i).assign(&self.value(sources[s]).row(r));
        }
        self.push(
            out,
            Op::Assemble {
                sources: sources.to_vec(),
                map: map.to_vec(),
            },
        )
    }

    /// Concatenates the rows of `parts` in order.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let map: Vec<(usize, usize)> = parts
            .iter()
            .enumerate()
            .flat_map(|(s, &v)| (0..self.value(v).nrows()).map(move |r| (s, r)))
            .collect();
        self.assemble(parts, &map)
    }

    /// One output row per segment: the mean of its valid rows.
    pub fn segment_mean(&mut self, src: Var, segments: &[Segment]) -> Var {
        let sv = self.value(src);
        let mut out = Array2::zeros((segments.len(), sv.ncols()));
        for (i, seg) in segments.iter().enumerate() {
            let rows = sv.slice(s![seg.start..seg.start + seg.valid, ..]);
            let mut acc = out.row_mut(i);
            for r in rows.outer_iter() {
                acc += &r;
            }
            acc.mapv_inplace(|x| x / F::of(seg.valid as f64));
        }
        self.push(
            out,
            Op::SegmentMean {
                src,
                segments: segments.to_vec(),
            },
        )
    }

    pub fn l2_normalize_rows(&mut self, src: Var) -> Var {
        let sv = self.value(src);
        let norms: Vec<F> = sv
            .outer_iter()
            .map(|r| r.iter().map(|&x| x * x).sum::<F>().sqrt())
            .collect();
        let mut out = sv.clone();
        for (mut r, &nrm) in out.outer_iter_mut().zip(&norms) {
            r.mapv_inplace(|x| x / nrm);
        }
        self.push(out, Op::L2Normalize { src, norms })
    }

    /// `Σ_r weights[r] · CE(softmax(logits[r]), targets[r])` as a scalar.
    ///
    /// Entries of `logits` equal to `-inf` are excluded from the softmax,
    /// which is how candidate masks are expressed.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[F]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.nrows(), targets.len());
        assert_eq!(lv.nrows(), weights.len());
        let mut probs = Array2::zeros(lv.raw_dim());
        let mut total = F::zero();
        for (r, row) in lv.outer_iter().enumerate() {
            let lse = log_sum_exp(row.iter().copied());
            for (c, &z) in row.iter().enumerate() {
                probs[[r, c]] = if z == F::neg_infinity() {
                    F::zero()
                } else {
                    (z - lse).exp()
                };
            }
            total += weights[r] * (lse - row[targets[r]]);
        }
        self.push(
            Array2::from_elem((1, 1), total),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
        )
    }

    /// `Σ_r weights[r] · mean_c (pred[r,c] − target[r,c])²` as a scalar.
    pub fn weighted_mse(&mut self, pred: Var, target: Array2<F>, weights: &[F]) -> Var {
        let pv = self.value(pred);
        assert_eq!(pv.dim(), target.dim());
        let dcols = F::of(pv.ncols() as f64);
        let mut total = F::zero();
        for ((p, t), &w) in pv.outer_iter().zip(target.outer_iter()).zip(weights) {
            let se: F = p.iter().zip(t.iter()).map(|(&a, &b)| (a - b) * (a - b)).sum();
            total += w * se / dcols;
        }
        self.push(
            Array2::from_elem((1, 1), total),
            Op::WeightedMse {
                pred,
                target,
                weights: weights.to_vec(),
            },
        )
    }

    pub fn sum(&mut self, parts: &[Var]) -> Var {
        let mut out = self.value(parts[0]).clone();
        for &p in &parts[1..] {
            out += self.value(p);
        }
        self.push(out, Op::Sum(parts.to_vec()))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        assert_eq!(self.value(loss).dim(), (1, 1), "loss must be 1 x 1");
        self.backward_from(&[(loss, Array2::from_elem((1, 1), F::one()))])
    }

    /// Reverse sweep seeded with explicit upstream gradients.
    pub fn backward_from(&self, seeds: &[(Var, Array2<F>)]) -> Result<Gradients<F>> {
        let mut grads: Vec<Option<Array2<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            accumulate(&mut grads[v.0], g.view());
        }
        let mut out = Gradients::zeros_like(self.params);
        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &g, &mut grads, &mut out);
        }
        if let Some(p) = out.first_non_finite() {
            return Err(Error::numeric(
                0,
                format!("non-finite gradient for parameter {}", self.params.names[p]),
            ));
        }
        Ok(out)
    }

    fn backprop_node(
        &self,
        idx: usize,
        g: &Array2<F>,
        grads: &mut [Option<Array2<F>>],
        out: &mut Gradients<F>,
    ) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Param(id) => out.grads[*id] += g,
            Op::Const => {}
            Op::MatMul(a, b) => {
                let da = g.dot(&self.value(*b).t());
                let db = self.value(*a).t().dot(g);
                accumulate(&mut grads[a.0], da.view());
                accumulate(&mut grads[b.0], db.view());
            }
            Op::MatMulNT(a, b) => {
                let da = g.dot(self.value(*b));
                let db = g.t().dot(self.value(*a));
                accumulate(&mut grads[a.0], da.view());
                accumulate(&mut grads[b.0], db.view());
            }
            Op::Add(a, b) => {
                accumulate(&mut grads[a.0], g.view());
                accumulate(&mut grads[b.0], g.view());
            }
            Op::AddRow(a, b) => {
                accumulate(&mut grads[a.0], g.view());
                let db = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                accumulate(&mut grads[b.0], db.view());
            }
            Op::Scale(a, f) => {
                let f = *f;
                accumulate(&mut grads[a.0], g.mapv(|x| x * f).view());
            }
            Op::Gelu(a) => {
                let mut da = self.value(*a).mapv(gelu_grad);
                da *= g;
                accumulate(&mut grads[a.0], da.view());
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gam = self.value(*gamma);
                let dbeta = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                let dgamma = (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                let dxhat = g * gam;
                let (n, d) = dxhat.dim();
                let df = F::of(d as f64);
                let mut dx = Array2::zeros((n, d));
                for r in 0..n {
                    let row = dxhat.row(r);
                    let xh = xhat.row(r);
                    let m1 = row.sum() / df;
                    let m2 = row.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum::<F>() / df;
                    for c in 0..d {
                        dx[[r, c]] = inv_std[r] * (row[c] - m1 - xh[c] * m2);
                    }
                }
                accumulate(&mut grads[x.0], dx.view());
                accumulate(&mut grads[gamma.0], dgamma.view());
                accumulate(&mut grads[beta.0], dbeta.view());
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments,
                probs,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (n, d) = qv.dim();
                let dh = d / heads;
                let scale = F::one() / F::of(dh as f64).sqrt();
                let mut dq = Array2::zeros((n, d));
                let mut dk = Array2::zeros((n, d));
                let mut dv = Array2::zeros((n, d));
                let mut pi = 0;
                for seg in segments {
                    for h in 0..*heads {
                        let cols = h * dh..(h + 1) * dh;
                        let p = &probs[pi];
                        pi += 1;
                        let rows_q = seg.start..seg.start + seg.len;
                        let rows_k = seg.start..seg.start + seg.valid;
                        let go = g.slice(s![rows_q.clone(), cols.clone()]);
                        let qs = qv.slice(s![rows_q.clone(), cols.clone()]);
                        let ks = kv.slice(s![rows_k.clone(), cols.clone()]);
                        let vs = vv.slice(s![rows_k.clone(), cols.clone()]);
                        let dvs = p.t().dot(&go);
                        let dp = go.dot(&vs.t());
                        let mut ds = &dp * p;
                        for (mut dsr, pr) in ds.outer_iter_mut().zip(p.outer_iter()) {
                            let dot = dsr.sum();
                            for (x, &pp) in dsr.iter_mut().zip(pr.iter()) {
                                *x -= pp * dot;
                            }
                        }
                        let dqs = ds.dot(&ks).mapv(|x| x * scale);
                        let dks = ds.t().dot(&qs).mapv(|x| x * scale);
                        let mut t = dq.slice_mut(s![rows_q, cols.clone()]);
                        t += &dqs;
                        let mut t = dk.slice_mut(s![rows_k.clone(), cols.clone()]);
                        t += &dks;
                        let mut t = dv.slice_mut(s![rows_k, cols]);
                        t += &dvs;
                    }
                }
                accumulate(&mut grads[q.0], dq.view());
                accumulate(&mut grads[k.0], dk.view());
                accumulate(&mut grads[v.0], dv.view());
            }
            Op::GatherRows { src, rows } => {
                let mut ds = Array2::zeros(self.value(*src).raw_dim());
                for (i, &r) in rows.iter().enumerate() {
                    let mut t = ds.row_mut(r);
                    t += &g.row(i);
                }
                accumulate(&mut grads[src.0], ds.view());
            }
            Op::Assemble { sources, map } => {
                let mut ds: Vec<Array2<F>> = sources
                    .iter()
                    .map(|s| Array2::zeros(self.value(*s).raw_dim()))
                    .collect();
                for (i, &(s, r)) in map.iter().enumerate() {
                    let mut t = ds[s].row_mut(r);
                    t += &g.row(i);
                }
                for (s, d) in sources.iter().zip(ds) {
                    accumulate(&mut grads[s.0], d.view());
                }
            }
            Op::SegmentMean { src, segments } => {
                let mut ds = Array2::zeros(self.value(*src).raw_dim());
                for (i, seg) in segments.iter().enumerate() {
                    let gi = g.row(i).mapv(|x| x / F::of(seg.valid as f64));
                    for r in seg.start..seg.start + seg.valid {
                        ds.row_mut(r).assign(&gi);
                    }
                }
                accumulate(&mut grads[src.0], ds.view());
            }
            Op::L2Normalize { src, norms } => {
                let y = &node.value;
                let mut dx = Array2::zeros(y.raw_dim());
                for r in 0..y.nrows() {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let dot: F = yr.iter().zip(gr.iter()).map(|(&a, &b)| a * b).sum();
                    for c in 0..y.ncols() {
                        dx[[r, c]] = (gr[c] - yr[c] * dot) / norms[r];
                    }
                }
                accumulate(&mut grads[src.0], dx.view());
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let up = g[[0, 0]];
                let mut dl = probs.clone();
                for (r, mut row) in dl.outer_iter_mut().enumerate() {
                    row[targets[r]] -= F::one();
                    let w = weights[r] * up;
                    row.mapv_inplace(|x| x * w);
                }
                accumulate(&mut grads[logits.0], dl.view());
            }
            Op::WeightedMse {
                pred,
                target,
                weights,
            } => {
                let up = g[[0, 0]];
                let pv = self.value(*pred);
                let two_over_d = F::of(2.0 / pv.ncols() as f64);
                let mut dp = pv - target;
                for (mut row, &w) in dp.outer_iter_mut().zip(weights) {
                    let f = w * two_over_d * up;
                    row.mapv_inplace(|x| x * f);
                }
                accumulate(&mut grads[pred.0], dp.view());
            }
            Op::Sum(parts) => {
                for p in parts {
                    accumulate(&mut grads[p.0], g.view());
                }
            }
        }
    }
}

fn accumulate<F: Real>(slot: &mut Option<Array2<F>>, g: ArrayView2<F>) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g.to_owned()),
    }
}

/// Numerically stable `log Σ exp(x)`; `-inf` entries contribute nothing.
pub fn log_sum_exp<F: Real>(xs: impl Iterator<Item = F> + Clone) -> F {
    let max = xs.clone().fold(F::neg_infinity(), F::max);
    if max == F::neg_infinity() {
        return max;
    }
    let sum: F = xs.map(|x| (x - max).exp()).sum();
    max + sum.ln()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu<F: Real>(x: F) -> F {
    let c = F::of(GELU_C);
    let a = F::of(GELU_A);
    let half = F::of(0.5);
    half * x * (F::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<F: Real>(x: F) -> F {
    let c = F::of(GELU_C);
    let a = F::of(GELU_A);
    let half = F::of(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + F::of(3.0) * a * x * x)
}

/// Runs `loss_fn` on a fresh tape and returns the loss with its parameter
/// gradients.
pub fn parameter_gradients<'p, F, L>(store: &'p ParamStore<F>, loss_fn: L) -> Result<(F, Gradients<F>)>
where
    F: Real,
    L: FnOnce(&mut Tape<'p, F>) -> Result<Var>,
{
    let mut tape = Tape::new(store);
    let loss = loss_fn(&mut tape)?;
    let value = tape.scalar(loss);
    if !value.is_finite() {
        return Err(Error::numeric(0, "non-finite loss"));
    }
    let grads = tape.backward(loss)?;
    Ok((value, grads))
}
