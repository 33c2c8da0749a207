//! Conditioning context: analog reference selection and weighting, reference
//! and descriptor encoders, fusion, aggregation and the latent transition.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, CdlfError, Result};
use crate::numerics::gru::{gru_backward, gru_forward, gru_forward_unchecked, GruParams, GruStep};
use crate::numerics::matrix::{relu, Matrix};
use crate::numerics::params::{glorot_uniform, join, ParamGroup};
use crate::numerics::rng::RngStream;
use crate::scalar::Scalar;

/// One analog product: full trajectory (`T x D`) and standardized descriptor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ReferenceEntry<T> {
    pub id: String,
    pub trajectory: Matrix<T>,
    pub descriptor: Vec<T>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ReferenceLibrary<T> {
    pub entries: Vec<ReferenceEntry<T>>,
}

impl<T: Scalar> ReferenceLibrary<T> {
    pub fn new(entries: Vec<ReferenceEntry<T>>) -> Self {
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    /// `ReLU(W [h; w] + b)`
    Concat,
    /// `w * h`
    Multiplicative,
}

/// A selected reference: library index and squared descriptor distance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Selected<T> {
    pub index: usize,
    pub dist2: T,
}

fn dist2<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

/// The `k` nearest entries by squared Euclidean descriptor distance.
pub fn select_references<T: Scalar>(s: &[T], lib: &ReferenceLibrary<T>, k: usize) -> Result<Vec<Selected<T>>> {
    select_references_where(s, lib, k, |_| true)
}

/// As [`select_references`], restricted to entries accepted by `keep`.
pub fn select_references_where<T: Scalar>(
    s: &[T],
    lib: &ReferenceLibrary<T>,
    k: usize,
    keep: impl Fn(&ReferenceEntry<T>) -> bool,
) -> Result<Vec<Selected<T>>> {
    if k == 0 {
        return Err(CdlfError::InvalidArgument("reference count must be at least 1".into()));
    }
    let mut cands = Vec::with_capacity(lib.len());
    for (i, e) in lib.entries.iter().enumerate() {
        if !keep(e) {
            continue;
        }
        if e.descriptor.len() != s.len() {
            return Err(dim_err("select_references descriptor", s.len(), e.descriptor.len()));
        }
        cands.push(Selected {
            index: i,
            dist2: dist2(s, &e.descriptor),
        });
    }
    if cands.is_empty() {
        return Err(CdlfError::Empty("reference library"));
    }
    // stable sort keeps ascending library index on equal distances
    cands.sort_by(|a, b| a.dist2.partial_cmp(&b.dist2).unwrap_or(std::cmp::Ordering::Equal));
    cands.truncate(k);
    Ok(cands)
}

/// Softmax of `-gamma * dist2` with max-subtraction.
pub fn similarity_weights<T: Scalar>(dist2: &[T], gamma: T) -> Result<Vec<T>> {
    if gamma < T::zero() {
        return Err(CdlfError::InvalidArgument(format!("gamma must be >= 0, got {gamma}")));
    }
    if dist2.is_empty() {
        return Ok(Vec::new());
    }
    let logits: Vec<T> = dist2.iter().map(|&d| -gamma * d).collect();
    let mx = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let ex: Vec<T> = logits.iter().map(|&l| (l - mx).exp()).collect();
    let z: T = ex.iter().copied().sum();
    Ok(ex.into_iter().map(|e| e / z).collect())
}

/// Final hidden state of `enc` run over the trajectory rows from zero.
pub fn encode_reference<T: Scalar>(traj: &Matrix<T>, enc: &GruParams<T>) -> Result<Vec<T>> {
    Ok(encode_reference_steps(traj, enc)?
        .last()
        .map(|s| s.h_new.clone())
        .expect("non-empty"))
}

fn encode_reference_steps<T: Scalar>(traj: &Matrix<T>, enc: &GruParams<T>) -> Result<Vec<GruStep<T>>> {
    if traj.rows() == 0 {
        return Err(CdlfError::Empty("reference trajectory"));
    }
    let mut h = vec![T::zero(); enc.hidden()];
    let mut steps = Vec::with_capacity(traj.rows());
    for t in 0..traj.rows() {
        let st = gru_forward(&h, traj.row(t), enc)?;
        h.clone_from(&st.h_new);
        steps.push(st);
    }
    Ok(steps)
}

pub fn fuse_concat<T: Scalar>(h: &[T], omega: T, w: &Matrix<T>, b: &[T]) -> Result<Vec<T>> {
    if w.cols() != h.len() + 1 || w.rows() != b.len() {
        return Err(dim_err(
            "fuse_concat",
            format!("{} x {}", b.len(), h.len() + 1),
            format!("{:?}", w.shape()),
        ));
    }
    let mut inp = h.to_vec();
    inp.push(omega);
    let mut out = b.to_vec();
    w.matvec_acc(&inp, &mut out);
    Ok(out.into_iter().map(relu).collect())
}

pub fn fuse_multiplicative<T: Scalar>(h: &[T], omega: T) -> Vec<T> {
    h.iter().map(|&v| omega * v).collect()
}

/// Indices ordering `omega` descending; ties keep their input order.
pub fn weight_order<T: Scalar>(omega: &[T]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..omega.len()).collect();
    idx.sort_by(|&a, &b| omega[b].partial_cmp(&omega[a]).unwrap_or(std::cmp::Ordering::Equal));
    idx
}

/// Runs the aggregator over `fused` sorted by `omega` descending.
pub fn aggregate_references<T: Scalar>(fused: &[Vec<T>], omega: &[T], agg: &GruParams<T>) -> Result<Vec<T>> {
    Ok(aggregate_steps(fused, omega, agg)?.1.last().expect("non-empty").h_new.clone())
}

fn aggregate_steps<T: Scalar>(
    fused: &[Vec<T>],
    omega: &[T],
    agg: &GruParams<T>,
) -> Result<(Vec<usize>, Vec<GruStep<T>>)> {
    if fused.is_empty() {
        return Err(CdlfError::Empty("fused reference list"));
    }
    if fused.len() != omega.len() {
        return Err(dim_err("aggregate_references weights", fused.len(), omega.len()));
    }
    let order = weight_order(omega);
    let mut h = vec![T::zero(); agg.hidden()];
    let mut steps = Vec::with_capacity(order.len());
    for &k in &order {
        let st = gru_forward(&h, &fused[k], agg)?;
        h.clone_from(&st.h_new);
        steps.push(st);
    }
    Ok((order, steps))
}

/// Two-layer affine + ReLU descriptor encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct StaticEncoder<T> {
    pub w1: Matrix<T>,
    pub b1: Vec<T>,
    pub w2: Matrix<T>,
    pub b2: Vec<T>,
}

struct StaticCache<T> {
    s: Vec<T>,
    h1: Vec<T>,
    out: Vec<T>,
}

impl<T: Scalar> StaticEncoder<T> {
    pub fn zeros(input: usize, width: usize) -> Self {
        Self {
            w1: Matrix::zeros(width, input),
            b1: vec![T::zero(); width],
            w2: Matrix::zeros(width, width),
            b2: vec![T::zero(); width],
        }
    }

    fn forward_cached(&self, s: &[T]) -> Result<StaticCache<T>> {
        if s.len() != self.w1.cols() {
            return Err(dim_err("encode_static", self.w1.cols(), s.len()));
        }
        let mut a1 = self.b1.clone();
        self.w1.matvec_acc(s, &mut a1);
        let h1: Vec<T> = a1.into_iter().map(relu).collect();
        let mut a2 = self.b2.clone();
        self.w2.matvec_acc(&h1, &mut a2);
        Ok(StaticCache {
            s: s.to_vec(),
            h1,
            out: a2.into_iter().map(relu).collect(),
        })
    }

    fn backward(&self, c: &StaticCache<T>, d_out: &[T], g: &mut StaticEncoder<T>) {
        let one = T::one();
        let da2: Vec<T> = d_out
            .iter()
            .zip(&c.out)
            .map(|(&d, &o)| if o > T::zero() { d } else { T::zero() })
            .collect();
        g.w2.add_outer(one, &da2, &c.h1);
        for (gb, &d) in g.b2.iter_mut().zip(&da2) {
            *gb += d;
        }
        let dh1 = self.w2.matvec_t(&da2);
        let da1: Vec<T> = dh1
            .iter()
            .zip(&c.h1)
            .map(|(&d, &o)| if o > T::zero() { d } else { T::zero() })
            .collect();
        g.w1.add_outer(one, &da1, &c.s);
        for (gb, &d) in g.b1.iter_mut().zip(&da1) {
            *gb += d;
        }
    }
}

pub fn encode_static<T: Scalar>(s: &[T], enc: &StaticEncoder<T>) -> Result<Vec<T>> {
    Ok(enc.forward_cached(s)?.out)
}

/// `h_0 = W_0 c + b_0`
pub fn init_state<T: Scalar>(c: &[T], w0: &Matrix<T>, b0: &[T]) -> Result<Vec<T>> {
    if c.len() != w0.cols() || b0.len() != w0.rows() {
        return Err(dim_err("init_state", w0.cols(), c.len()));
    }
    let mut h = b0.to_vec();
    w0.matvec_acc(c, &mut h);
    Ok(h)
}

/// One transition step with input `[x_t; c]`.
pub fn transition<T: Scalar>(h_prev: &[T], x: &[T], c: &[T], p: &GruParams<T>) -> Result<GruStep<T>> {
    if x.len() + c.len() != p.input() {
        return Err(dim_err("transition input", p.input(), x.len() + c.len()));
    }
    let mut inp = Vec::with_capacity(p.input());
    inp.extend_from_slice(x);
    inp.extend_from_slice(c);
    gru_forward(h_prev, &inp, p)
}

pub(crate) fn transition_unchecked<T: Scalar>(h_prev: &[T], x: &[T], c: &[T], p: &GruParams<T>) -> GruStep<T> {
    let mut inp = Vec::with_capacity(p.input());
    inp.extend_from_slice(x);
    inp.extend_from_slice(c);
    gru_forward_unchecked(h_prev, &inp, p)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContextDims {
    pub data_dim: usize,
    pub descriptor_dim: usize,
    pub ref_dim: usize,
    pub static_dim: usize,
    pub hidden_dim: usize,
}

impl ContextDims {
    pub fn context_dim(&self) -> usize {
        self.ref_dim + self.static_dim
    }
}

/// Every learnable tensor of the context pipeline and transition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ContextParams<T> {
    pub ref_encoder: GruParams<T>,
    pub fuse_w: Matrix<T>,
    pub fuse_b: Vec<T>,
    pub aggregator: GruParams<T>,
    pub static_encoder: StaticEncoder<T>,
    pub w0: Matrix<T>,
    pub b0: Vec<T>,
    pub transition: GruParams<T>,
}

impl<T: Scalar> ContextParams<T> {
    pub fn zeros(d: ContextDims) -> Self {
        Self {
            ref_encoder: GruParams::zeros(d.ref_dim, d.data_dim),
            fuse_w: Matrix::zeros(d.ref_dim, d.ref_dim + 1),
            fuse_b: vec![T::zero(); d.ref_dim],
            aggregator: GruParams::zeros(d.ref_dim, d.ref_dim),
            static_encoder: StaticEncoder::zeros(d.descriptor_dim, d.static_dim),
            w0: Matrix::zeros(d.hidden_dim, d.context_dim()),
            b0: vec![T::zero(); d.hidden_dim],
            transition: GruParams::zeros(d.hidden_dim, d.data_dim + d.context_dim()),
        }
    }

    /// Glorot weights and zero biases, except the fusion projection which
    /// starts at `[I | 0]` so both fusion variants begin from the reference
    /// embedding itself.
    pub fn random(d: ContextDims, rng: &mut RngStream) -> Self {
        let mut p = Self::zeros(d);
        p.ref_encoder = GruParams::random(d.ref_dim, d.data_dim, &mut rng.substream(1));
        p.aggregator = GruParams::random(d.ref_dim, d.ref_dim, &mut rng.substream(2));
        let mut r3 = rng.substream(3);
        p.static_encoder.w1 = glorot_uniform(d.static_dim, d.descriptor_dim, &mut r3);
        p.static_encoder.w2 = glorot_uniform(d.static_dim, d.static_dim, &mut r3);
        p.w0 = glorot_uniform(d.hidden_dim, d.context_dim(), &mut rng.substream(4));
        p.transition = GruParams::random(d.hidden_dim, d.data_dim + d.context_dim(), &mut rng.substream(5));
        for i in 0..d.ref_dim {
            p.fuse_w[(i, i)] = T::one();
        }
        p
    }

    pub fn dims(&self) -> ContextDims {
        ContextDims {
            data_dim: self.ref_encoder.input(),
            descriptor_dim: self.static_encoder.w1.cols(),
            ref_dim: self.ref_encoder.hidden(),
            static_dim: self.static_encoder.w1.rows(),
            hidden_dim: self.transition.hidden(),
        }
    }
}

impl<T: Scalar> ParamGroup<T> for ContextParams<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[T])) {
        self.ref_encoder.visit(&join(prefix, "ref_encoder"), f);
        f(&join(prefix, "fuse_w"), self.fuse_w.data());
        f(&join(prefix, "fuse_b"), &self.fuse_b);
        self.aggregator.visit(&join(prefix, "aggregator"), f);
        f(&join(prefix, "static.w1"), self.static_encoder.w1.data());
        f(&join(prefix, "static.b1"), &self.static_encoder.b1);
        f(&join(prefix, "static.w2"), self.static_encoder.w2.data());
        f(&join(prefix, "static.b2"), &self.static_encoder.b2);
        f(&join(prefix, "w0"), self.w0.data());
        f(&join(prefix, "b0"), &self.b0);
        self.transition.visit(&join(prefix, "transition"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [T])) {
        self.ref_encoder.visit_mut(&join(prefix, "ref_encoder"), f);
        f(&join(prefix, "fuse_w"), self.fuse_w.data_mut());
        f(&join(prefix, "fuse_b"), &mut self.fuse_b);
        self.aggregator.visit_mut(&join(prefix, "aggregator"), f);
        f(&join(prefix, "static.w1"), self.static_encoder.w1.data_mut());
        f(&join(prefix, "static.b1"), &mut self.static_encoder.b1);
        f(&join(prefix, "static.w2"), self.static_encoder.w2.data_mut());
        f(&join(prefix, "static.b2"), &mut self.static_encoder.b2);
        f(&join(prefix, "w0"), self.w0.data_mut());
        f(&join(prefix, "b0"), &mut self.b0);
        self.transition.visit_mut(&join(prefix, "transition"), f);
    }
}

/// `c = [h_X; h_s]` and `h_0`, with the selection that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextVector<T> {
    pub h_refs: Vec<T>,
    pub h_static: Vec<T>,
    pub c: Vec<T>,
    pub h0: Vec<T>,
    pub selected: Vec<Selected<T>>,
    pub omega: Vec<T>,
}

pub struct ContextCache<T> {
    ref_steps: Vec<Vec<GruStep<T>>>,
    fused: Vec<Vec<T>>,
    order: Vec<usize>,
    agg_steps: Vec<GruStep<T>>,
    stat: StaticCache<T>,
}

/// Selection, weighting and encoding settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContextSettings<T> {
    pub k: usize,
    pub gamma: T,
    pub fusion: Fusion,
}

/// Builds the context from pre-selected references.
pub fn build_context<T: Scalar>(
    params: &ContextParams<T>,
    s: &[T],
    lib: &ReferenceLibrary<T>,
    selected: Vec<Selected<T>>,
    gamma: T,
    fusion: Fusion,
) -> Result<(ContextVector<T>, ContextCache<T>)> {
    let d2: Vec<T> = selected.iter().map(|r| r.dist2).collect();
    let omega = similarity_weights(&d2, gamma)?;
    let mut ref_steps = Vec::with_capacity(selected.len());
    let mut fused = Vec::with_capacity(selected.len());
    for (sel, &w) in selected.iter().zip(&omega) {
        let steps = encode_reference_steps(&lib.entries[sel.index].trajectory, &params.ref_encoder)?;
        let h = &steps.last().expect("non-empty").h_new;
        fused.push(match fusion {
            Fusion::Concat => fuse_concat(h, w, &params.fuse_w, &params.fuse_b)?,
            Fusion::Multiplicative => fuse_multiplicative(h, w),
        });
        ref_steps.push(steps);
    }
    let (order, agg_steps) = aggregate_steps(&fused, &omega, &params.aggregator)?;
    let h_refs = agg_steps.last().expect("non-empty").h_new.clone();
    let stat = params.static_encoder.forward_cached(s)?;
    let mut c = h_refs.clone();
    c.extend_from_slice(&stat.out);
    let h0 = init_state(&c, &params.w0, &params.b0)?;
    let ctx = ContextVector {
        h_refs,
        h_static: stat.out.clone(),
        c,
        h0,
        selected,
        omega,
    };
    Ok((
        ctx,
        ContextCache {
            ref_steps,
            fused,
            order,
            agg_steps,
            stat,
        },
    ))
}

/// Selects references (optionally excluding the focal id) and builds the context.
pub fn context_for<T: Scalar>(
    params: &ContextParams<T>,
    s: &[T],
    lib: &ReferenceLibrary<T>,
    settings: ContextSettings<T>,
    exclude_id: Option<&str>,
) -> Result<(ContextVector<T>, ContextCache<T>)> {
    let selected = select_references_where(s, lib, settings.k, |e| Some(e.id.as_str()) != exclude_id)?;
    build_context(params, s, lib, selected, settings.gamma, settings.fusion)
}

/// Backpropagates gradients on `c` and `h_0` into every context tensor.
pub fn context_backward<T: Scalar>(
    params: &ContextParams<T>,
    ctx: &ContextVector<T>,
    cache: &ContextCache<T>,
    d_c: &[T],
    d_h0: &[T],
    fusion: Fusion,
    grads: &mut ContextParams<T>,
) {
    let one = T::one();
    grads.w0.add_outer(one, d_h0, &ctx.c);
    for (g, &d) in grads.b0.iter_mut().zip(d_h0) {
        *g += d;
    }
    let mut dc = d_c.to_vec();
    params.w0.matvec_t_acc(d_h0, &mut dc);
    let dref = ctx.h_refs.len();
    params
        .static_encoder
        .backward(&cache.stat, &dc[dref..], &mut grads.static_encoder);

    let mut dh = dc[..dref].to_vec();
    let mut d_fused = vec![Vec::new(); cache.fused.len()];
    for (pos, st) in cache.agg_steps.iter().enumerate().rev() {
        let (dh_prev, dx) = gru_backward(st, &params.aggregator, &dh, &mut grads.aggregator);
        d_fused[cache.order[pos]] = dx;
        dh = dh_prev;
    }

    for (k, steps) in cache.ref_steps.iter().enumerate() {
        let h = &steps.last().expect("non-empty").h_new;
        let w = ctx.omega[k];
        let dh_k = match fusion {
            Fusion::Concat => {
                let da: Vec<T> = d_fused[k]
                    .iter()
                    .zip(&cache.fused[k])
                    .map(|(&d, &o)| if o > T::zero() { d } else { T::zero() })
                    .collect();
                let mut inp = h.clone();
                inp.push(w);
                grads.fuse_w.add_outer(one, &da, &inp);
                for (g, &d) in grads.fuse_b.iter_mut().zip(&da) {
                    *g += d;
                }
                let mut full = params.fuse_w.matvec_t(&da);
                full.truncate(h.len());
                full
            }
            Fusion::Multiplicative => d_fused[k].iter().map(|&d| d * w).collect(),
        };
        let mut dh = dh_k;
        for st in steps.iter().rev() {
            dh = gru_backward(st, &params.ref_encoder, &dh, &mut grads.ref_encoder).0;
        }
    }
}
