//! Gated Delta Net recurrence.
//!
//! The state `S` (d_v × d_k) evolves as
//! `S_t = S_{t-1} · α_t(I − β_t k_t k_tᵀ) + β_t v_t k_tᵀ` and is read with a
//! query, `o_t = S_t q_t`.
//!
//! Three evaluators share that recurrence:
//! - [`scan_sequential`] forms each transition densely and multiplies it
//!   into the state. It is the reference.
//! - [`scan_chunkwise`] composes the transitions of a chunk into one
//!   operator `T` and an accumulated write `W`, and touches the incoming
//!   state once per chunk. With `chunk = 1` it performs exactly the
//!   operations of the sequential path.
//! - [`scan_recurrent`] applies each transition as a rank-1 update; the
//!   adjoint recomputes states with it.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{HadError, Result};
use crate::numeric::linalg::{dot, gemm, matvec, matvec_t, MatRef};
use crate::numeric::{CustomOp, Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use crate::rng::Rng;

/// Steps between stored states during the backward recomputation.
const CHECKPOINT: usize = 64;

/// Bias of the retention gate at initialization; sigmoid(2) ≈ 0.88.
const ALPHA_BIAS_INIT: f64 = 2.0;

const KEY_EPS: f64 = 1e-6;

/// Recurrent memory, `d_v × d_k`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GdnState<F> {
    d_v: usize,
    d_k: usize,
    s: Vec<F>,
}

impl<F: Scalar> GdnState<F> {
    pub fn zeros(d_v: usize, d_k: usize) -> Self {
        GdnState {
            d_v,
            d_k,
            s: vec![F::zero(); d_v * d_k],
        }
    }

    pub fn from_tensor(t: Tensor<F>) -> Result<Self> {
        let (d_v, d_k) = t.dims2()?;
        Ok(GdnState {
            d_v,
            d_k,
            s: t.into_data(),
        })
    }

    pub fn to_tensor(&self) -> Tensor<F> {
        Tensor::new(vec![self.d_v, self.d_k], self.s.clone()).expect("state shape")
    }

    pub fn d_v(&self) -> usize {
        self.d_v
    }

    pub fn d_k(&self) -> usize {
        self.d_k
    }

    pub fn data(&self) -> &[F] {
        &self.s
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.s.iter().map(|x| x.f64() * x.f64()).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.s.iter().all(|x| x.is_finite())
    }
}

/// `m ← α(m − β (m k) kᵀ)` for a row-major `m` with `k.len()` columns.
fn apply_transition<F: Scalar>(m: &mut [F], k: &[F], alpha: F, beta: F) {
    for row in m.chunks_exact_mut(k.len()) {
        let c = beta * dot(row, k);
        for (x, &kj) in row.iter_mut().zip(k) {
            *x = alpha * (*x - c * kj);
        }
    }
}

/// `m += β v kᵀ`.
fn add_write<F: Scalar>(m: &mut [F], k: &[F], v: &[F], beta: F) {
    for (row, &vi) in m.chunks_exact_mut(k.len()).zip(v) {
        let bv = beta * vi;
        for (x, &kj) in row.iter_mut().zip(k) {
            *x += bv * kj;
        }
    }
}

fn set_identity<F: Scalar>(m: &mut [F], n: usize) {
    m.fill(F::zero());
    for i in 0..n {
        m[i * n + i] = F::one();
    }
}

/// One dense step: `out = s·A + β v kᵀ` with `A = α(I − β k kᵀ)` formed in
/// `a` (scratch, `d_k²`).
fn dense_step<F: Scalar>(s: &[F], k: &[F], v: &[F], alpha: F, beta: F, a: &mut [F], out: &mut [F]) {
    let (d_k, d_v) = (k.len(), v.len());
    set_identity(a, d_k);
    apply_transition(a, k, alpha, beta);
    gemm(MatRef::new(s, d_v, d_k), MatRef::new(a, d_k, d_k), out, false);
    add_write(out, k, v, beta);
}

/// A single update of the recurrence and its readout `o = S'q`.
pub fn gdn_step<F: Scalar>(
    state: &GdnState<F>,
    k: &[F],
    v: &[F],
    q: &[F],
    alpha: F,
    beta: F,
) -> Result<(GdnState<F>, Vec<F>)> {
    let (d_v, d_k) = (state.d_v, state.d_k);
    if k.len() != d_k || q.len() != d_k || v.len() != d_v {
        return Err(HadError::shape("gdn_step", &[d_v, d_k], &[v.len(), k.len(), q.len()]));
    }
    let mut a = vec![F::zero(); d_k * d_k];
    let mut s = vec![F::zero(); d_v * d_k];
    dense_step(&state.s, k, v, alpha, beta, &mut a, &mut s);
    let o = matvec(&s, d_v, d_k, q);
    Ok((GdnState { d_v, d_k, s }, o))
}

/// Per-step inputs of a scan, row-major: `k`, `q` are `L × d_k`, `v` is
/// `L × d_v`, `alpha` and `beta` have length `L`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanData<F> {
    pub k: Vec<F>,
    pub v: Vec<F>,
    pub q: Vec<F>,
    pub alpha: Vec<F>,
    pub beta: Vec<F>,
    pub d_k: usize,
    pub d_v: usize,
}

impl<F: Scalar> ScanData<F> {
    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.len();
        let ok = self.k.len() == l * self.d_k
            && self.q.len() == l * self.d_k
            && self.v.len() == l * self.d_v
            && self.beta.len() == l;
        if ok {
            Ok(())
        } else {
            Err(HadError::shape(
                "gdn scan",
                &[self.k.len(), self.v.len(), self.q.len()],
                &[l * self.d_k, l * self.d_v, l * self.d_k],
            ))
        }
    }

    fn step(&self, t: usize) -> (&[F], &[F], &[F], F, F) {
        let (dk, dv) = (self.d_k, self.d_v);
        (
            &self.k[t * dk..(t + 1) * dk],
            &self.v[t * dv..(t + 1) * dv],
            &self.q[t * dk..(t + 1) * dk],
            self.alpha[t],
            self.beta[t],
        )
    }

    /// Unit keys and queries, Gaussian values, gates uniform in (0.05, 0.95).
    pub fn random(len: usize, d_k: usize, d_v: usize, rng: &mut Rng) -> Self {
        let mut unit = |n: usize| -> Vec<F> {
            let mut out = Vec::with_capacity(n * d_k);
            for _ in 0..n {
                let row: Vec<f64> = (0..d_k).map(|_| StandardNormal.sample(rng)).collect();
                let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                out.extend(row.iter().map(|x| F::of(x / norm)));
            }
            out
        };
        let k = unit(len);
        let q = unit(len);
        let v = (0..len * d_v)
            .map(|_| F::of(StandardNormal.sample(rng)))
            .collect();
        let alpha = (0..len).map(|_| F::of(rng.random_range(0.05..0.95))).collect();
        let beta = (0..len).map(|_| F::of(rng.random_range(0.05..0.95))).collect();
        ScanData {
            k,
            v,
            q,
            alpha,
            beta,
            d_k,
            d_v,
        }
    }

    pub fn cast<G: Scalar>(&self) -> ScanData<G> {
        let c = |x: &[F]| x.iter().map(|&v| G::of(v.f64())).collect();
        ScanData {
            k: c(&self.k),
            v: c(&self.v),
            q: c(&self.q),
            alpha: c(&self.alpha),
            beta: c(&self.beta),
            d_k: self.d_k,
            d_v: self.d_v,
        }
    }
}

fn check_state<F: Scalar>(data: &ScanData<F>, s0: &GdnState<F>) -> Result<()> {
    data.validate()?;
    if s0.d_v != data.d_v || s0.d_k != data.d_k {
        return Err(HadError::shape("gdn initial state", &[s0.d_v, s0.d_k], &[data.d_v, data.d_k]));
    }
    Ok(())
}

/// Reference evaluation: one dense transition per step. Returns the
/// `L × d_v` outputs and the final state.
pub fn scan_sequential<F: Scalar>(data: &ScanData<F>, s0: &GdnState<F>) -> Result<(Vec<F>, GdnState<F>)> {
    check_state(data, s0)?;
    let (dk, dv) = (data.d_k, data.d_v);
    let mut s = s0.s.clone();
    let mut next = vec![F::zero(); dv * dk];
    let mut a = vec![F::zero(); dk * dk];
    let mut out = Vec::with_capacity(data.len() * dv);
    for t in 0..data.len() {
        let (k, v, q, alpha, beta) = data.step(t);
        dense_step(&s, k, v, alpha, beta, &mut a, &mut next);
        std::mem::swap(&mut s, &mut next);
        out.extend(matvec(&s, dv, dk, q));
    }
    Ok((out, GdnState { d_v: dv, d_k: dk, s }))
}

/// Chunk-wise evaluation. Within a chunk starting from state `S₀`, the
/// state after step t is `S₀·T_t + W_t`, where `T_t` composes the chunk's
/// transitions so far and `W_t` accumulates its writes. Outputs of all but
/// the chunk's last step are read as `S₀·(T_t q_t) + W_t q_t`, batched into
/// one product with `S₀`; the last step materializes the next state.
pub fn scan_chunkwise<F: Scalar>(
    data: &ScanData<F>,
    s0: &GdnState<F>,
    chunk: usize,
) -> Result<(Vec<F>, GdnState<F>)> {
    check_state(data, s0)?;
    if chunk == 0 {
        return Err(HadError::Config("chunk size must be at least 1".into()));
    }
    let (dk, dv, len) = (data.d_k, data.d_v, data.len());
    let mut s = s0.s.clone();
    let mut s_end = vec![F::zero(); dv * dk];
    let mut t_op = vec![F::zero(); dk * dk];
    let mut w = vec![F::zero(); dv * dk];
    let mut u = vec![F::zero(); chunk.saturating_sub(1) * dk];
    let mut out = vec![F::zero(); len * dv];
    let mut start = 0;
    while start < len {
        let end = (start + chunk).min(len);
        set_identity(&mut t_op, dk);
        w.fill(F::zero());
        for t in start..end {
            let (k, v, q, alpha, beta) = data.step(t);
            apply_transition(&mut t_op, k, alpha, beta);
            apply_transition(&mut w, k, alpha, beta);
            add_write(&mut w, k, v, beta);
            if t + 1 < end {
                let i = t - start;
                u[i * dk..(i + 1) * dk].copy_from_slice(&matvec(&t_op, dk, dk, q));
                out[t * dv..(t + 1) * dv].copy_from_slice(&matvec(&w, dv, dk, q));
            }
        }
        let n = end - start - 1;
        if n > 0 {
            gemm(
                MatRef::new(&u, n, dk),
                MatRef::new(&s, dv, dk).t(),
                &mut out[start * dv..(end - 1) * dv],
                true,
            );
        }
        gemm(MatRef::new(&s, dv, dk), MatRef::new(&t_op, dk, dk), &mut s_end, false);
        for (x, &wi) in s_end.iter_mut().zip(&w) {
            *x += wi;
        }
        std::mem::swap(&mut s, &mut s_end);
        let q = data.step(end - 1).2;
        out[(end - 1) * dv..end * dv].copy_from_slice(&matvec(&s, dv, dk, q));
        start = end;
    }
    Ok((out, GdnState { d_v: dv, d_k: dk, s }))
}

/// `s ← α(s − β (s k) kᵀ) + β v kᵀ` in O(d_v·d_k).
fn rank1_step<F: Scalar>(s: &mut [F], k: &[F], v: &[F], alpha: F, beta: F) {
    for (row, &vi) in s.chunks_exact_mut(k.len()).zip(v) {
        let c = beta * dot(row, k);
        let bv = beta * vi;
        for (x, &kj) in row.iter_mut().zip(k) {
            *x = alpha * (*x - c * kj) + bv * kj;
        }
    }
}

/// Step-by-step evaluation with rank-1 transitions.
pub fn scan_recurrent<F: Scalar>(data: &ScanData<F>, s0: &GdnState<F>) -> Result<(Vec<F>, GdnState<F>)> {
    check_state(data, s0)?;
    let (dk, dv) = (data.d_k, data.d_v);
    let mut s = s0.s.clone();
    let mut out = Vec::with_capacity(data.len() * dv);
    for t in 0..data.len() {
        let (k, v, q, alpha, beta) = data.step(t);
        rank1_step(&mut s, k, v, alpha, beta);
        out.extend(matvec(&s, dv, dk, q));
    }
    Ok((out, GdnState { d_v: dv, d_k: dk, s }))
}

/// Gradients of a scan with respect to each of its inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanGrads<F> {
    pub k: Vec<F>,
    pub v: Vec<F>,
    pub q: Vec<F>,
    pub alpha: Vec<F>,
    pub beta: Vec<F>,
    pub s0: Vec<F>,
}

/// Adjoint of the scan given the output gradient `d_out` (`L × d_v`).
///
/// States are recomputed from checkpoints stored every [`CHECKPOINT`]
/// steps. Walking backwards with `dS` the adjoint of `S_t`, `P = S_{t-1}`:
/// `dq = S_tᵀ dO`, `dS += dO qᵀ`, then
/// `dα = ⟨dS, P − β(Pk)kᵀ⟩`, `dβ = (dS k)·(v − αPk)`, `dv = β dS k`,
/// `dk = −αβ(Pᵀ dS k + dSᵀ P k) + β dSᵀ v`, and `dS ← α(dS − β(dS k)kᵀ)`.
pub fn scan_backward<F: Scalar>(data: &ScanData<F>, s0: &GdnState<F>, d_out: &[F]) -> Result<ScanGrads<F>> {
    check_state(data, s0)?;
    let (dk, dv, len) = (data.d_k, data.d_v, data.len());
    if d_out.len() != len * dv {
        return Err(HadError::shape("gdn backward", &[d_out.len()], &[len * dv]));
    }
    let mut checkpoints = Vec::with_capacity(len.div_ceil(CHECKPOINT));
    let mut s = s0.s.clone();
    for t in 0..len {
        if t % CHECKPOINT == 0 {
            checkpoints.push(s.clone());
        }
        let (k, v, _, alpha, beta) = data.step(t);
        rank1_step(&mut s, k, v, alpha, beta);
    }

    let mut g = ScanGrads {
        k: vec![F::zero(); len * dk],
        v: vec![F::zero(); len * dv],
        q: vec![F::zero(); len * dk],
        alpha: vec![F::zero(); len],
        beta: vec![F::zero(); len],
        s0: Vec::new(),
    };
    let mut ds = vec![F::zero(); dv * dk];
    let mut states: Vec<Vec<F>> = Vec::with_capacity(CHECKPOINT + 1);
    for (c, cp) in checkpoints.iter().enumerate().rev() {
        let start = c * CHECKPOINT;
        let end = (start + CHECKPOINT).min(len);
        states.clear();
        states.push(cp.clone());
        for t in start..end {
            let mut next = states.last().expect("seeded").clone();
            let (k, v, _, alpha, beta) = data.step(t);
            rank1_step(&mut next, k, v, alpha, beta);
            states.push(next);
        }
        for t in (start..end).rev() {
            let (k, v, q, alpha, beta) = data.step(t);
            let cur = &states[t - start + 1];
            let prev = &states[t - start];
            let d_o = &d_out[t * dv..(t + 1) * dv];

            g.q[t * dk..(t + 1) * dk].copy_from_slice(&matvec_t(cur, dv, dk, d_o));
            for (row, &oi) in ds.chunks_exact_mut(dk).zip(d_o) {
                for (x, &qj) in row.iter_mut().zip(q) {
                    *x += oi * qj;
                }
            }

            let pk = matvec(prev, dv, dk, k);
            let dsk = matvec(&ds, dv, dk, k);
            let ds_dot_p = dot(&ds, prev);
            g.alpha[t] = ds_dot_p - beta * dot(&dsk, &pk);
            g.beta[t] = dsk
                .iter()
                .zip(v)
                .zip(&pk)
                .fold(F::zero(), |acc, ((&a, &vi), &p)| acc + a * (vi - alpha * p));
            for (dvi, &a) in g.v[t * dv..(t + 1) * dv].iter_mut().zip(&dsk) {
                *dvi = beta * a;
            }
            let pt_dsk = matvec_t(prev, dv, dk, &dsk);
            let dst_pk = matvec_t(&ds, dv, dk, &pk);
            let dst_v = matvec_t(&ds, dv, dk, v);
            let ab = alpha * beta;
            for (j, dkj) in g.k[t * dk..(t + 1) * dk].iter_mut().enumerate() {
                *dkj = beta * dst_v[j] - ab * (pt_dsk[j] + dst_pk[j]);
            }
            apply_transition(&mut ds, k, alpha, beta);
        }
    }
    g.s0 = ds;
    Ok(g)
}

/// Which evaluator a graph-level scan uses for its forward values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScanMode {
    Sequential,
    Chunkwise(usize),
}

impl ScanMode {
    fn run<F: Scalar>(self, data: &ScanData<F>, s0: &GdnState<F>) -> Result<(Vec<F>, GdnState<F>)> {
        match self {
            ScanMode::Sequential => scan_sequential(data, s0),
            ScanMode::Chunkwise(c) => scan_chunkwise(data, s0, c),
        }
    }
}

struct ScanOp {
    d_k: usize,
    d_v: usize,
}

impl<F: Scalar> CustomOp<F> for ScanOp {
    fn name(&self) -> &'static str {
        "gdn_scan"
    }

    fn backward(&self, inputs: &[&Tensor<F>], _output: &Tensor<F>, grad: &[F]) -> Result<Vec<Option<Vec<F>>>> {
        let data = ScanData {
            k: inputs[0].data().to_vec(),
            v: inputs[1].data().to_vec(),
            q: inputs[2].data().to_vec(),
            alpha: inputs[3].data().to_vec(),
            beta: inputs[4].data().to_vec(),
            d_k: self.d_k,
            d_v: self.d_v,
        };
        let s0 = GdnState {
            d_v: self.d_v,
            d_k: self.d_k,
            s: inputs[5].data().to_vec(),
        };
        let g = scan_backward(&data, &s0, grad)?;
        Ok(vec![Some(g.k), Some(g.v), Some(g.q), Some(g.alpha), Some(g.beta), Some(g.s0)])
    }
}

/// Differentiable scan inside a graph. `k`, `q`: `(L, d_k)`; `v`: `(L, d_v)`;
/// `alpha`, `beta`: `L` entries in any shape; `s0`: `(d_v, d_k)`. Returns
/// the `(L, d_v)` outputs and the (non-differentiable) final state.
#[allow(clippy::too_many_arguments)]
pub fn gdn_scan<F: Scalar>(
    g: &mut Graph<F>,
    k: Var,
    v: Var,
    q: Var,
    alpha: Var,
    beta: Var,
    s0: Var,
    mode: ScanMode,
) -> Result<(Var, GdnState<F>)> {
    let (len, d_k) = g.value(k).dims2()?;
    let (len_v, d_v) = g.value(v).dims2()?;
    if g.shape(q) != [len, d_k] || len_v != len {
        return Err(HadError::shape("gdn_scan", g.shape(k), g.shape(q)));
    }
    if g.value(alpha).len() != len || g.value(beta).len() != len {
        return Err(HadError::shape("gdn_scan gates", g.shape(alpha), &[len]));
    }
    if g.shape(s0) != [d_v, d_k] {
        return Err(HadError::shape("gdn_scan state", g.shape(s0), &[d_v, d_k]));
    }
    let data = ScanData {
        k: g.value(k).data().to_vec(),
        v: g.value(v).data().to_vec(),
        q: g.value(q).data().to_vec(),
        alpha: g.value(alpha).data().to_vec(),
        beta: g.value(beta).data().to_vec(),
        d_k,
        d_v,
    };
    let state0 = GdnState::from_tensor(g.value(s0).clone())?;
    let (out, state) = mode.run(&data, &state0)?;
    let out = Tensor::new(vec![len, d_v], out)?;
    let var = g.custom(Box::new(ScanOp { d_k, d_v }), &[k, v, q, alpha, beta, s0], out);
    Ok((var, state))
}

/// Parameters of one GDN cell. Projections are stored input-major,
/// `(d_model, d_k)` etc., so that `x · W` maps rows of `x`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GdnCellParams {
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_q: ParamId,
    pub w_alpha: ParamId,
    pub b_alpha: ParamId,
    pub w_beta: ParamId,
    pub b_beta: ParamId,
    pub d_k: usize,
    pub d_v: usize,
}

impl GdnCellParams {
    pub fn init<F: Scalar>(
        store: &mut ParamStore<F>,
        prefix: &str,
        d_model: usize,
        d_k: usize,
        d_v: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let std = 1.0 / (d_model as f64).sqrt();
        Ok(GdnCellParams {
            w_k: store.add_normal(&format!("{prefix}.w_k"), &[d_model, d_k], std, rng)?,
            w_v: store.add_normal(&format!("{prefix}.w_v"), &[d_model, d_v], std, rng)?,
            w_q: store.add_normal(&format!("{prefix}.w_q"), &[d_model, d_k], std, rng)?,
            w_alpha: store.add_normal(&format!("{prefix}.w_alpha"), &[d_model, 1], std, rng)?,
            b_alpha: store.add_const(&format!("{prefix}.b_alpha"), &[1], ALPHA_BIAS_INIT)?,
            w_beta: store.add_normal(&format!("{prefix}.w_beta"), &[d_model, 1], std, rng)?,
            b_beta: store.add_const(&format!("{prefix}.b_beta"), &[1], 0.0)?,
            d_k,
            d_v,
        })
    }

    /// Looks up a cell's parameters by name prefix.
    pub fn find<F: Scalar>(store: &ParamStore<F>, prefix: &str) -> Result<Self> {
        let id = |s: &str| store.id(&format!("{prefix}.{s}"));
        let w_k = id("w_k")?;
        let w_v = id("w_v")?;
        Ok(GdnCellParams {
            w_k,
            w_v,
            w_q: id("w_q")?,
            w_alpha: id("w_alpha")?,
            b_alpha: id("b_alpha")?,
            w_beta: id("w_beta")?,
            b_beta: id("b_beta")?,
            d_k: store.get(w_k).shape()[1],
            d_v: store.get(w_v).shape()[1],
        })
    }
}

/// Projects `x` (`L × d_model`) to keys, values, queries and gates, then
/// scans. Returns the `(L, d_v)` outputs and the final state.
pub fn gdn_forward<F: Scalar>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    x: Var,
    p: &GdnCellParams,
    s0: &GdnState<F>,
    mode: ScanMode,
) -> Result<(Var, GdnState<F>)> {
    let eps = F::of(KEY_EPS);
    let gate = |g: &mut Graph<F>, w: ParamId, b: ParamId| -> Result<Var> {
        let w = g.param(store, w);
        let b = g.param(store, b);
        let z = g.matmul(x, w)?;
        let z = g.add_row(z, b)?;
        Ok(g.sigmoid(z))
    };
    let w_k = g.param(store, p.w_k);
    let w_v = g.param(store, p.w_v);
    let w_q = g.param(store, p.w_q);
    let k = g.matmul(x, w_k)?;
    let k = g.l2_normalize(k, 1, eps)?;
    let v = g.matmul(x, w_v)?;
    let q = g.matmul(x, w_q)?;
    let q = g.l2_normalize(q, 1, eps)?;
    let alpha = gate(g, p.w_alpha, p.b_alpha)?;
    let beta = gate(g, p.w_beta, p.b_beta)?;
    let s0 = g.constant(s0.to_tensor());
    gdn_scan(g, k, v, q, alpha, beta, s0, mode)
}

pub fn gdn_forward_sequential<F: Scalar>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    x: Var,
    p: &GdnCellParams,
    s0: &GdnState<F>,
) -> Result<(Var, GdnState<F>)> {
    gdn_forward(g, store, x, p, s0, ScanMode::Sequential)
}

pub fn gdn_forward_chunkwise<F: Scalar>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    x: Var,
    p: &GdnCellParams,
    s0: &GdnState<F>,
    chunk: usize,
) -> Result<(Var, GdnState<F>)> {
    gdn_forward(g, store, x, p, s0, ScanMode::Chunkwise(chunk))
}

/// Reverses the row order of a `(L, d)` node.
pub fn reverse_rows<F: Scalar>(g: &mut Graph<F>, x: Var) -> Result<Var> {
    let len = g.shape(x)[0];
    let rows: Vec<usize> = (0..len).rev().collect();
    g.gather(x, &rows)
}

/// `fwd(x) + reverse(rev(reverse(x)))` with independent parameter sets and
/// zero initial states.
pub fn bidirectional_gdn<F: Scalar>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    x: Var,
    fwd: &GdnCellParams,
    rev: &GdnCellParams,
    mode: ScanMode,
) -> Result<Var> {
    let (zf, _) = gdn_forward(g, store, x, fwd, &GdnState::zeros(fwd.d_v, fwd.d_k), mode)?;
    let xr = reverse_rows(g, x)?;
    let (zr, _) = gdn_forward(g, store, xr, rev, &GdnState::zeros(rev.d_v, rev.d_k), mode)?;
    let zr = reverse_rows(g, zr)?;
    g.add(zf, zr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::grad_check;
    use crate::rng;
    use proptest::prelude::*;

    fn max_diff<F: Scalar>(a: &[F], b: &[F]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x.f64() - y.f64()).abs())
            .fold(0.0, f64::max)
    }

    fn state(d_v: usize, d_k: usize, s: &[f64]) -> GdnState<f64> {
        GdnState {
            d_v,
            d_k,
            s: s.to_vec(),
        }
    }

    #[test]
    fn step_closed_forms() {
        let s = state(2, 2, &[0.3, -1.2, 2.5, 0.7]);
        let k = [0.6, 0.8];
        let (kept, _) = gdn_step(&s, &k, &[5.0, -3.0], &[1.0, 0.0], 1.0, 0.0).unwrap();
        assert_eq!(kept, s);

        let s = state(2, 2, &[2.0, 2.0, 2.0, 2.0]);
        let (decayed, _) = gdn_step(&s, &k, &[5.0, -3.0], &[1.0, 0.0], 0.5, 0.0).unwrap();
        assert_eq!(decayed.data(), &[1.0, 1.0, 1.0, 1.0]);

        let s = state(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let (next, o) = gdn_step(&s, &[1.0, 0.0], &[0.0, 1.0], &[1.0, 0.0], 1.0, 1.0).unwrap();
        assert_eq!(next.data(), &[0.0, 0.0, 1.0, 0.0]);
        assert_eq!(o, vec![0.0, 1.0]);

        assert!(matches!(
            gdn_step(&s, &[1.0], &[0.0, 1.0], &[1.0, 0.0], 1.0, 1.0),
            Err(HadError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn erase_then_write_reads_back_v() {
        let mut r = rng::from_seed(7);
        for _ in 0..50 {
            let d = r.random_range(2..12);
            let data = ScanData::<f64>::random(1, d, d, &mut r);
            let s0 = GdnState {
                d_v: d,
                d_k: d,
                s: (0..d * d).map(|_| r.random_range(-2.0..2.0)).collect(),
            };
            let (next, _) = gdn_step(&s0, &data.k, &data.v, &data.q, 1.0, 1.0).unwrap();
            let read = matvec(next.data(), d, d, &data.k);
            assert!(max_diff(&read, &data.v) <= 1e-6);
        }
    }

    #[test]
    fn zero_write_gate_decays_initial_state() {
        let mut r = rng::from_seed(3);
        let mut data = ScanData::<f64>::random(12, 4, 3, &mut r);
        data.beta.iter_mut().for_each(|b| *b = 0.0);
        let s0 = state(3, 4, &(0..12).map(|i| (i as f64 * 0.37).sin()).collect::<Vec<_>>());
        let (out, _) = scan_sequential(&data, &s0).unwrap();
        let mut decay = 1.0;
        for t in 0..12 {
            decay *= data.alpha[t];
            let want: Vec<f64> = matvec(s0.data(), 3, 4, &data.q[t * 4..(t + 1) * 4])
                .iter()
                .map(|x| x * decay)
                .collect();
            assert!(max_diff(&out[t * 3..(t + 1) * 3], &want) <= 1e-12);
        }
    }

    #[test]
    fn length_one_is_a_single_step() {
        let mut r = rng::from_seed(5);
        let data = ScanData::<f64>::random(1, 3, 2, &mut r);
        let s0 = state(2, 3, &[0.1, 0.2, 0.3, -0.4, 0.5, -0.6]);
        let (out, last) = scan_sequential(&data, &s0).unwrap();
        let (s1, o) = gdn_step(&s0, &data.k, &data.v, &data.q, data.alpha[0], data.beta[0]).unwrap();
        assert_eq!(out, o);
        assert_eq!(last, s1);
    }

    #[test]
    fn chunk_of_one_matches_sequential_bitwise() {
        let mut r = rng::from_seed(11);
        let data = ScanData::<f32>::random(40, 8, 6, &mut r);
        let s0 = GdnState::zeros(6, 8);
        let (a, sa) = scan_sequential(&data, &s0).unwrap();
        let (b, sb) = scan_chunkwise(&data, &s0, 1).unwrap();
        assert_eq!(a, b);
        assert_eq!(sa, sb);
    }

    #[test]
    fn chunkwise_examples() {
        let mut r = rng::from_seed(13);
        let data = ScanData::<f32>::random(30, 8, 8, &mut r);
        let s0 = GdnState::zeros(8, 8);
        let (a, _) = scan_sequential(&data, &s0).unwrap();
        let (b, _) = scan_chunkwise(&data, &s0, 64).unwrap();
        assert!(max_diff(&a, &b) <= 1e-5);

        let data = ScanData::<f64>::random(128, 16, 16, &mut r);
        let s0 = GdnState::zeros(16, 16);
        let (a, sa) = scan_sequential(&data, &s0).unwrap();
        let (b, sb) = scan_chunkwise(&data, &s0, 64).unwrap();
        assert!(max_diff(&a, &b) <= 1e-10);
        assert!(max_diff(sa.data(), sb.data()) <= 1e-10);
        let d32 = data.cast::<f32>();
        let s32 = GdnState::zeros(16, 16);
        let (a, _) = scan_sequential(&d32, &s32).unwrap();
        let (b, _) = scan_chunkwise(&d32, &s32, 64).unwrap();
        assert!(max_diff(&a, &b) <= 1e-5);

        let (c, _) = scan_recurrent(&data, &s0).unwrap();
        let (a, _) = scan_sequential(&data, &s0).unwrap();
        assert!(max_diff(&a, &c) <= 1e-10);
        assert!(scan_chunkwise(&data, &s0, 0).is_err());
    }

    #[test]
    fn state_norm_stays_bounded_over_long_runs() {
        let mut r = rng::from_seed(17);
        let (d, len) = (8, 10_000);
        let data = ScanData::<f32>::random(len, d, d, &mut r);
        let s0 = GdnState {
            d_v: d,
            d_k: d,
            s: (0..d * d).map(|_| r.random_range(-1.0..1.0)).collect(),
        };
        let mut bound = s0.frobenius_norm();
        let mut s = s0.clone();
        let mut a = vec![0.0; d * d];
        let mut next = vec![0.0; d * d];
        for t in 0..len {
            let (k, v, _, alpha, beta) = data.step(t);
            dense_step(&s.s, k, v, alpha, beta, &mut a, &mut next);
            std::mem::swap(&mut s.s, &mut next);
            bound += beta.f64() * v.iter().map(|x| x.f64() * x.f64()).sum::<f64>().sqrt();
            assert!(s.is_finite());
            assert!(s.frobenius_norm() <= bound * (1.0 + 1e-5));
        }
    }

    // Checks `scan_backward` against central differences of the scan itself,
    // including the initial-state gradient.
    #[test]
    fn scan_adjoint_matches_finite_differences() {
        let mut r = rng::from_seed(19);
        let (len, dk, dv) = (70, 3, 2); // crosses a checkpoint boundary
        let data = ScanData::<f64>::random(len, dk, dv, &mut r);
        let s0 = GdnState {
            d_v: dv,
            d_k: dk,
            s: (0..dv * dk).map(|_| r.random_range(-1.0..1.0)).collect(),
        };
        let w: Vec<f64> = (0..len * dv).map(|_| r.random_range(-1.0..1.0)).collect();
        let f = |d: &ScanData<f64>, s: &GdnState<f64>| -> f64 {
            let (o, _) = scan_recurrent(d, s).unwrap();
            dot(&o, &w)
        };
        let g = scan_backward(&data, &s0, &w).unwrap();
        let eps = 1e-6;
        let mut worst: f64 = 0.0;
        let fields: [(fn(&mut ScanData<f64>) -> &mut Vec<f64>, &Vec<f64>); 5] = [
            (|d| &mut d.k, &g.k),
            (|d| &mut d.v, &g.v),
            (|d| &mut d.q, &g.q),
            (|d| &mut d.alpha, &g.alpha),
            (|d| &mut d.beta, &g.beta),
        ];
        for (field, analytic) in fields {
            for i in (0..analytic.len()).step_by(7) {
                let mut p = data.clone();
                field(&mut p)[i] += eps;
                let mut m = data.clone();
                field(&mut m)[i] -= eps;
                let num = (f(&p, &s0) - f(&m, &s0)) / (2.0 * eps);
                worst = worst.max((num - analytic[i]).abs() / (1.0 + num.abs()));
            }
        }
        for i in 0..dv * dk {
            let mut p = s0.clone();
            p.s[i] += eps;
            let mut m = s0.clone();
            m.s[i] -= eps;
            let num = (f(&data, &p) - f(&data, &m)) / (2.0 * eps);
            worst = worst.max((num - g.s0[i]).abs() / (1.0 + num.abs()));
        }
        assert!(worst < 1e-7, "worst {worst}");
    }

    fn cell_store(d: usize, seed: u64) -> (ParamStore<f64>, GdnCellParams, GdnCellParams) {
        let mut r = rng::from_seed(seed);
        let mut store = ParamStore::new();
        let f = GdnCellParams::init(&mut store, "fwd", d, d, d, &mut r).unwrap();
        let b = GdnCellParams::init(&mut store, "rev", d, d, d, &mut r).unwrap();
        (store, f, b)
    }

    fn rand_x(len: usize, d: usize, seed: u64) -> Tensor<f64> {
        let mut r = rng::from_seed(seed);
        Tensor::new(vec![len, d], (0..len * d).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn cell_gradients_pass_grad_check() {
        let (store, f, b) = cell_store(4, 23);
        let x = rand_x(8, 4, 29);
        let w = rand_x(8, 4, 31);
        for mode in [ScanMode::Sequential, ScanMode::Chunkwise(3)] {
            let report = grad_check(&store, 1e-5, |g, s| {
                let xv = g.constant(x.clone());
                let out = bidirectional_gdn(g, s, xv, &f, &b, mode)?;
                let wv = g.constant(w.clone());
                let p = g.mul(out, wv)?;
                Ok(g.sum_all(p))
            })
            .unwrap();
            assert!(report.max_rel_error <= 1e-4, "{mode:?} {report:?}");
            assert_eq!(report.coords, store.num_scalars());
        }
    }

    #[test]
    fn bidirectional_matches_two_pass_construction() {
        let (store, f, b) = cell_store(8, 37);
        let x = rand_x(16, 8, 41);
        let mut g = Graph::<f64>::new();
        let xv = g.constant(x.clone());
        let both = bidirectional_gdn(&mut g, &store, xv, &f, &b, ScanMode::Chunkwise(4)).unwrap();

        // direct two-pass evaluation with explicitly reversed rows
        let z = GdnState::zeros(8, 8);
        let mut g2 = Graph::<f64>::new();
        let xf = g2.constant(x.clone());
        let (zf, _) = gdn_forward_sequential(&mut g2, &store, xf, &f, &z).unwrap();
        let rev_rows: Vec<f64> = (0..16).rev().flat_map(|i| x.row(i).to_vec()).collect();
        let xr = g2.constant(Tensor::new(vec![16, 8], rev_rows).unwrap());
        let (zr, _) = gdn_forward_sequential(&mut g2, &store, xr, &b, &z).unwrap();
        let zf = g2.value(zf);
        let zr = g2.value(zr);
        for t in 0..16 {
            for j in 0..8 {
                let want = zf.at2(t, j) + zr.at2(15 - t, j);
                assert!((g.value(both).at2(t, j) - want).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn suppressed_reverse_branch_leaves_forward_only() {
        let (mut store, f, b) = cell_store(4, 43);
        store.get_mut(b.b_beta).data_mut()[0] = -30.0;
        let x = rand_x(6, 4, 47);
        let mut g = Graph::<f64>::new();
        let xv = g.constant(x);
        let both = bidirectional_gdn(&mut g, &store, xv, &f, &b, ScanMode::Sequential).unwrap();
        let (fwd, _) = gdn_forward_sequential(&mut g, &store, xv, &f, &GdnState::zeros(4, 4)).unwrap();
        assert!(g.value(both).max_abs_diff(g.value(fwd)) < 1e-9);

        // L = 1: plain sum of the two cells' single steps
        let mut g = Graph::<f64>::new();
        let x1 = g.constant(rand_x(1, 4, 53));
        let both = bidirectional_gdn(&mut g, &store, x1, &f, &b, ScanMode::Sequential).unwrap();
        let (a, _) = gdn_forward_sequential(&mut g, &store, x1, &f, &GdnState::zeros(4, 4)).unwrap();
        let (c, _) = gdn_forward_sequential(&mut g, &store, x1, &b, &GdnState::zeros(4, 4)).unwrap();
        let sum = g.add(a, c).unwrap();
        assert_eq!(g.value(both), g.value(sum));
    }

    #[test]
    fn shape_errors() {
        let mut g = Graph::<f32>::new();
        let k = g.input(Tensor::zeros(&[3, 2]));
        let v = g.input(Tensor::zeros(&[3, 2]));
        let q = g.input(Tensor::zeros(&[3, 4]));
        let a = g.input(Tensor::zeros(&[3, 1]));
        let s0 = g.constant(Tensor::zeros(&[2, 2]));
        assert!(matches!(
            gdn_scan(&mut g, k, v, q, a, a, s0, ScanMode::Sequential),
            Err(HadError::ShapeMismatch { .. })
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn chunkwise_equivalence(len in 1usize..=96, d in 1usize..=16, c in prop::sample::select(vec![1usize, 2, 16, 64, 0]), seed in any::<u64>()) {
            let chunk = if c == 0 { len } else { c };
            let mut r = rng::from_seed(seed);
            let data = ScanData::<f64>::random(len, d, d, &mut r);
            let s0 = GdnState::zeros(d, d);
            let (a, _) = scan_sequential(&data, &s0).unwrap();
            let (b, _) = scan_chunkwise(&data, &s0, chunk).unwrap();
            prop_assert!(max_diff(&a, &b) <= 1e-10);
            let d32 = data.cast::<f32>();
            let s32 = GdnState::zeros(d, d);
            let (a, _) = scan_sequential(&d32, &s32).unwrap();
            let (b, _) = scan_chunkwise(&d32, &s32, chunk).unwrap();
            prop_assert!(max_diff(&a, &b) <= 1e-5);
        }
    }
}
