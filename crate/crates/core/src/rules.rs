//! Tokenwise recurrences for the delta-rule family.
//!
//! Every rule is written in the residual form
//! `S_t = S̄_t + k_t (z_t − S̄_t^T e_t)^T` with `S̄_t` the decayed state, so the
//! tied-gate reductions (GDR2 → KDA → GDN → DeltaNet) hold bitwise in a fixed
//! evaluation order. These functions are the ground truth for the chunkwise
//! engine.

use crate::error::{Error, Result};
use crate::math::{Matrix, Vector};
use crate::real::Real;

/// Recurrent memory `S ∈ R^{d_k × d_v}` of one head.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadState<T = f64> {
    pub s: Matrix<T>,
}

impl<T: Real> HeadState<T> {
    pub fn zeros(d_k: usize, d_v: usize) -> Self {
        HeadState {
            s: Matrix::zeros(d_k, d_v),
        }
    }

    pub fn new(s: Matrix<T>) -> Self {
        HeadState { s }
    }

    pub fn d_k(&self) -> usize {
        self.s.rows()
    }

    pub fn d_v(&self) -> usize {
        self.s.cols()
    }
}

/// Everything one recurrence step may consume.
///
/// Rules read the subset they need: linear attention uses `k, v`; Mamba-2 adds
/// a scalar decay (`alpha`, all entries equal); DeltaNet uses `beta`; Gated
/// DeltaNet uses scalar `alpha` and `beta`; KDA uses vector `alpha` and `beta`;
/// Gated Delta Rule-2 uses `alpha`, `b` and `w`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGates<T = f64> {
    pub q: Vector<T>,
    pub k: Vector<T>,
    pub v: Vector<T>,
    /// Channel decay in (0, 1], `exp(g)`.
    pub alpha: Vector<T>,
    pub beta: T,
    /// Erase gate over key channels.
    pub b: Vector<T>,
    /// Write gate over value channels.
    pub w: Vector<T>,
    /// Log-decay, ≤ 0.
    pub g: Vector<T>,
    /// Widens the erase-gate range to [0, 2].
    pub neg_eig: bool,
}

impl<T: Real> TokenGates<T> {
    /// Untied gates; `alpha` is derived from the log-decay `g`.
    pub fn gdr2(
        q: Vector<T>,
        k: Vector<T>,
        v: Vector<T>,
        g: Vector<T>,
        b: Vector<T>,
        w: Vector<T>,
    ) -> Self {
        let alpha = g.iter().map(|x| x.exp()).collect();
        TokenGates {
            q,
            k,
            v,
            alpha,
            beta: T::zero(),
            b,
            w,
            g,
            neg_eig: false,
        }
    }

    /// Tied gates `b = β·1`, `w = β·1`.
    pub fn tied(q: Vector<T>, k: Vector<T>, v: Vector<T>, g: Vector<T>, beta: T) -> Self {
        let b = vec![beta; k.len()];
        let w = vec![beta; v.len()];
        let mut gates = Self::gdr2(q, k, v, g, b, w);
        gates.beta = beta;
        gates
    }

    pub fn with_neg_eig(mut self, on: bool) -> Self {
        self.neg_eig = on;
        self
    }

    /// The scalar decay of the scalar-decay rules.
    fn alpha_scalar(&self, op: &'static str) -> Result<T> {
        let a0 = *self
            .alpha
            .first()
            .ok_or_else(|| Error::dim(op, "empty alpha"))?;
        if self.alpha.iter().any(|&a| a != a0) {
            return Err(Error::contract(op, "scalar-decay rule given a channel-varying alpha"));
        }
        Ok(a0)
    }

    /// Checks shapes and the gate ranges of `rule`.
    pub fn validate(&self, rule: RuleKind, d_k: usize, d_v: usize) -> Result<()> {
        const OP: &str = "TokenGates::validate";
        let check_len = |name: &str, len: usize, want: usize| {
            if len != want {
                Err(Error::dim(OP, format!("{name} has length {len}, expected {want}")))
            } else {
                Ok(())
            }
        };
        check_len("q", self.q.len(), d_k)?;
        check_len("k", self.k.len(), d_k)?;
        check_len("v", self.v.len(), d_v)?;
        if rule.uses_decay() {
            check_len("alpha", self.alpha.len(), d_k)?;
            check_alpha(OP, &self.alpha)?;
        }
        if rule.uses_beta() {
            check_unit(OP, "beta", &[self.beta], T::one())?;
        }
        if rule == RuleKind::Gdr2 {
            check_len("b", self.b.len(), d_k)?;
            check_len("w", self.w.len(), d_v)?;
            let b_max = if self.neg_eig { T::cast(2.0) } else { T::one() };
            check_unit(OP, "b", &self.b, b_max)?;
            check_unit(OP, "w", &self.w, T::one())?;
            if !self.g.is_empty() {
                check_len("g", self.g.len(), d_k)?;
                if let Some(x) = self.g.iter().find(|&&x| !(x <= T::zero())) {
                    return Err(Error::range(OP, format!("log-decay {x} > 0")));
                }
            }
        }
        Ok(())
    }
}

fn check_alpha<T: Real>(op: &'static str, alpha: &[T]) -> Result<()> {
    match alpha.iter().find(|&&a| !(a > T::zero() && a <= T::one())) {
        Some(a) => Err(Error::range(op, format!("decay {a} outside (0, 1]"))),
        None => Ok(()),
    }
}

fn check_unit<T: Real>(op: &'static str, name: &str, xs: &[T], max: T) -> Result<()> {
    match xs.iter().find(|&&x| !(x >= T::zero() && x <= max)) {
        Some(x) => Err(Error::range(op, format!("{name} = {x} outside [0, {max}]"))),
        None => Ok(()),
    }
}

/// Update rules of the family, in order of generality.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RuleKind {
    LinearAttention,
    Mamba2,
    DeltaNet,
    GatedDeltaNet,
    Kda,
    Gdr2,
}

impl RuleKind {
    pub const ALL: [RuleKind; 6] = [
        RuleKind::LinearAttention,
        RuleKind::Mamba2,
        RuleKind::DeltaNet,
        RuleKind::GatedDeltaNet,
        RuleKind::Kda,
        RuleKind::Gdr2,
    ];

    fn uses_decay(self) -> bool {
        matches!(
            self,
            RuleKind::Mamba2 | RuleKind::GatedDeltaNet | RuleKind::Kda | RuleKind::Gdr2
        )
    }

    fn uses_beta(self) -> bool {
        matches!(self, RuleKind::DeltaNet | RuleKind::GatedDeltaNet | RuleKind::Kda)
    }

    pub fn name(self) -> &'static str {
        match self {
            RuleKind::LinearAttention => "linear-attention",
            RuleKind::Mamba2 => "mamba2",
            RuleKind::DeltaNet => "deltanet",
            RuleKind::GatedDeltaNet => "gated-deltanet",
            RuleKind::Kda => "kda",
            RuleKind::Gdr2 => "gdr2",
        }
    }

    /// Advances `state` by one token under this rule.
    pub fn step<T: Real>(self, state: &HeadState<T>, gates: &TokenGates<T>) -> Result<HeadState<T>> {
        gates.validate(self, state.d_k(), state.d_v())?;
        match self {
            RuleKind::LinearAttention => step_linear_attention(state, &gates.k, &gates.v),
            RuleKind::Mamba2 => {
                step_mamba2(state, &gates.k, &gates.v, gates.alpha_scalar("step_mamba2")?)
            }
            RuleKind::DeltaNet => step_deltanet(state, &gates.k, &gates.v, gates.beta),
            RuleKind::GatedDeltaNet => step_gdn(
                state,
                &gates.k,
                &gates.v,
                gates.alpha_scalar("step_gdn")?,
                gates.beta,
            ),
            RuleKind::Kda => step_kda(state, &gates.k, &gates.v, &gates.alpha, gates.beta),
            RuleKind::Gdr2 => step_gdr2(state, gates).map(|(s, _)| s),
        }
    }
}

fn check_state_shapes<T: Real>(op: &'static str, state: &HeadState<T>, k: &[T], v: &[T]) -> Result<()> {
    if k.len() != state.d_k() || v.len() != state.d_v() {
        return Err(Error::dim(
            op,
            format!(
                "state {:?} with k of {} and v of {}",
                state.s.shape(),
                k.len(),
                v.len()
            ),
        ));
    }
    Ok(())
}

/// `r = S̄^T e`, `S = S̄ + k (z − r)^T`. Returns `(S, r)`.
fn residual_write<T: Real>(sbar: Matrix<T>, k: &[T], e: &[T], z: &[T]) -> (Matrix<T>, Vec<T>) {
    let r = sbar.t_dot_vec(e);
    let mut s = sbar;
    for (i, &ki) in k.iter().enumerate() {
        for ((sij, &zj), &rj) in s.row_mut(i).iter_mut().zip(z).zip(&r) {
            *sij += ki * (zj - rj);
        }
    }
    (s, r)
}

/// `S_t = S_{t−1} + k v^T`.
pub fn step_linear_attention<T: Real>(state: &HeadState<T>, k: &[T], v: &[T]) -> Result<HeadState<T>> {
    check_state_shapes("step_linear_attention", state, k, v)?;
    let mut s = state.s.clone();
    for (i, &ki) in k.iter().enumerate() {
        for (sij, &vj) in s.row_mut(i).iter_mut().zip(v) {
            *sij += ki * vj;
        }
    }
    Ok(HeadState { s })
}

/// `S_t = α S_{t−1} + k v^T`.
pub fn step_mamba2<T: Real>(state: &HeadState<T>, k: &[T], v: &[T], alpha: T) -> Result<HeadState<T>> {
    check_state_shapes("step_mamba2", state, k, v)?;
    check_alpha("step_mamba2", &[alpha])?;
    let mut s = state.s.map(|x| alpha * x);
    for (i, &ki) in k.iter().enumerate() {
        for (sij, &vj) in s.row_mut(i).iter_mut().zip(v) {
            *sij += ki * vj;
        }
    }
    Ok(HeadState { s })
}

/// `S_t = (I − β k k^T) S_{t−1} + β k v^T`.
pub fn step_deltanet<T: Real>(state: &HeadState<T>, k: &[T], v: &[T], beta: T) -> Result<HeadState<T>> {
    check_state_shapes("step_deltanet", state, k, v)?;
    check_unit("step_deltanet", "beta", &[beta], T::one())?;
    let e: Vec<T> = k.iter().map(|&x| beta * x).collect();
    let z: Vec<T> = v.iter().map(|&x| beta * x).collect();
    Ok(HeadState {
        s: residual_write(state.s.clone(), k, &e, &z).0,
    })
}

/// `S_t = α (I − β k k^T) S_{t−1} + β k v^T`.
pub fn step_gdn<T: Real>(state: &HeadState<T>, k: &[T], v: &[T], alpha: T, beta: T) -> Result<HeadState<T>> {
    check_state_shapes("step_gdn", state, k, v)?;
    check_alpha("step_gdn", &[alpha])?;
    check_unit("step_gdn", "beta", &[beta], T::one())?;
    let e: Vec<T> = k.iter().map(|&x| beta * x).collect();
    let z: Vec<T> = v.iter().map(|&x| beta * x).collect();
    Ok(HeadState {
        s: residual_write(state.s.map(|x| alpha * x), k, &e, &z).0,
    })
}

/// `S_t = (I − β k k^T) Diag(α) S_{t−1} + β k v^T`.
pub fn step_kda<T: Real>(
    state: &HeadState<T>,
    k: &[T],
    v: &[T],
    alpha: &[T],
    beta: T,
) -> Result<HeadState<T>> {
    check_state_shapes("step_kda", state, k, v)?;
    if alpha.len() != k.len() {
        return Err(Error::dim("step_kda", "alpha and k lengths differ"));
    }
    check_alpha("step_kda", alpha)?;
    check_unit("step_kda", "beta", &[beta], T::one())?;
    let e: Vec<T> = k.iter().map(|&x| beta * x).collect();
    let z: Vec<T> = v.iter().map(|&x| beta * x).collect();
    Ok(HeadState {
        s: residual_write(decay_rows(&state.s, alpha), k, &e, &z).0,
    })
}

fn decay_rows<T: Real>(s: &Matrix<T>, alpha: &[T]) -> Matrix<T> {
    let mut out = s.clone();
    for (i, &a) in alpha.iter().enumerate() {
        out.row_mut(i).iter_mut().for_each(|x| *x = a * *x);
    }
    out
}

/// One Gated Delta Rule-2 step:
/// `e = b⊙k`, `z = w⊙v`, `S̄ = Diag(α) S`, `r = S̄^T e`, `S_t = S̄ + k (z − r)^T`.
///
/// Returns the new state and the read `r`.
pub fn step_gdr2<T: Real>(state: &HeadState<T>, gates: &TokenGates<T>) -> Result<(HeadState<T>, Vec<T>)> {
    gates.validate(RuleKind::Gdr2, state.d_k(), state.d_v())?;
    let e: Vec<T> = gates.b.iter().zip(&gates.k).map(|(&b, &k)| b * k).collect();
    let z: Vec<T> = gates.w.iter().zip(&gates.v).map(|(&w, &v)| w * v).collect();
    let (s, r) = residual_write(decay_rows(&state.s, &gates.alpha), &gates.k, &e, &z);
    Ok((HeadState { s }, r))
}

/// `o = S^T q`.
pub fn read_output<T: Real>(state: &HeadState<T>, q: &[T]) -> Result<Vec<T>> {
    if q.len() != state.d_k() {
        return Err(Error::dim(
            "read_output",
            format!("q of {} against d_k = {}", q.len(), state.d_k()),
        ));
    }
    Ok(state.s.t_dot_vec(q))
}

fn check_objective_shapes(
    s: &Matrix<f64>,
    decayed: &Matrix<f64>,
    k: &[f64],
    e: &[f64],
    z: &[f64],
) -> Result<()> {
    if s.shape() != decayed.shape()
        || k.len() != s.rows()
        || e.len() != s.rows()
        || z.len() != s.cols()
    {
        return Err(Error::dim("online_objective", "inconsistent shapes"));
    }
    Ok(())
}

/// Local online objective `‖S − S̄‖_F² − 2⟨S^T k, z − S̄^T e⟩`.
pub fn online_objective(
    s: &Matrix<f64>,
    decayed: &Matrix<f64>,
    k: &[f64],
    e: &[f64],
    z: &[f64],
) -> Result<f64> {
    check_objective_shapes(s, decayed, k, e, z)?;
    let read = decayed.t_dot_vec(e);
    let target: Vec<f64> = z.iter().zip(&read).map(|(a, b)| a - b).collect();
    let sk = s.t_dot_vec(k);
    let inner: f64 = sk.iter().zip(&target).map(|(a, b)| a * b).sum();
    Ok(s.sub(decayed).frobenius_sq() - 2.0 * inner)
}

/// Gradient of [`online_objective`] with respect to `S`:
/// `2(S − S̄) − 2 k (z − S̄^T e)^T`.
pub fn online_objective_gradient(
    s: &Matrix<f64>,
    decayed: &Matrix<f64>,
    k: &[f64],
    e: &[f64],
    z: &[f64],
) -> Result<Matrix<f64>> {
    check_objective_shapes(s, decayed, k, e, z)?;
    let read = decayed.t_dot_vec(e);
    let target: Vec<f64> = z.iter().zip(&read).map(|(a, b)| a - b).collect();
    Ok(s.sub(decayed).scale(2.0).sub(&Matrix::outer(k, &target).scale(2.0)))
}

/// Outputs and every prefix state of a tokenwise run.
#[derive(Debug, Clone)]
pub struct ReferenceRun<T = f64> {
    /// `L × d_v`, row `t` is `S_t^T q_t`.
    pub outputs: Matrix<T>,
    /// `states[t]` is the state after token `t`.
    pub states: Vec<HeadState<T>>,
}

impl<T: Real> ReferenceRun<T> {
    pub fn final_state(&self) -> Option<&HeadState<T>> {
        self.states.last()
    }
}

/// Applies `rule` token by token from `s0`.
pub fn run_sequence_reference<T: Real>(
    rule: RuleKind,
    tokens: &[TokenGates<T>],
    s0: &HeadState<T>,
) -> Result<ReferenceRun<T>> {
    let mut outputs = Matrix::zeros(tokens.len(), s0.d_v());
    let mut states = Vec::with_capacity(tokens.len());
    let mut state = s0.clone();
    for (t, gates) in tokens.iter().enumerate() {
        state = rule.step(&state, gates)?;
        outputs.set_row(t, &read_output(&state, &gates.q)?);
        states.push(state.clone());
    }
    Ok(ReferenceRun { outputs, states })
}

/// Gradients of a Gated Delta Rule-2 sequence with respect to every input.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceGrads {
    pub dq: Matrix<f64>,
    pub dk: Matrix<f64>,
    pub dv: Matrix<f64>,
    pub db: Matrix<f64>,
    pub dw: Matrix<f64>,
    pub dg: Matrix<f64>,
    pub ds0: Matrix<f64>,
}

/// Reverse-mode sweep through the tokenwise Gated Delta Rule-2 recurrence.
///
/// `run` must come from [`run_sequence_reference`] with [`RuleKind::Gdr2`]
/// over the same `tokens` and `s0`. `d_out` is `∂L/∂O` and `d_final` is
/// `∂L/∂S_L`.
pub fn backward_sequence_reference(
    tokens: &[TokenGates<f64>],
    s0: &HeadState<f64>,
    run: &ReferenceRun<f64>,
    d_out: &Matrix<f64>,
    d_final: &Matrix<f64>,
) -> Result<ReferenceGrads> {
    const OP: &str = "backward_sequence_reference";
    let (d_k, d_v) = (s0.d_k(), s0.d_v());
    let len = tokens.len();
    if run.states.len() != len || d_out.shape() != (len, d_v) || d_final.shape() != (d_k, d_v) {
        return Err(Error::dim(OP, "run, upstream gradients and tokens disagree"));
    }
    let mut grads = ReferenceGrads {
        dq: Matrix::zeros(len, d_k),
        dk: Matrix::zeros(len, d_k),
        dv: Matrix::zeros(len, d_v),
        db: Matrix::zeros(len, d_k),
        dw: Matrix::zeros(len, d_v),
        dg: Matrix::zeros(len, d_k),
        ds0: Matrix::zeros(d_k, d_v),
    };
    let mut ds = d_final.clone();
    for t in (0..len).rev() {
        let gates = &tokens[t];
        let s_t = &run.states[t].s;
        let s_prev = if t == 0 { &s0.s } else { &run.states[t - 1].s };
        let d_o = d_out.row(t);

        // o = S_t^T q
        grads.dq.set_row(t, &s_t.dot_vec(d_o));
        ds.add_assign(&Matrix::outer(&gates.q, d_o));

        // S_t = S̄ + k (z − r)^T
        let sbar = decay_rows(s_prev, &gates.alpha);
        let e: Vec<f64> = gates.b.iter().zip(&gates.k).map(|(b, k)| b * k).collect();
        let z: Vec<f64> = gates.w.iter().zip(&gates.v).map(|(w, v)| w * v).collect();
        let r = sbar.t_dot_vec(&e);
        let zr: Vec<f64> = z.iter().zip(&r).map(|(a, b)| a - b).collect();
        let mut dk = ds.dot_vec(&zr);
        let dz = ds.t_dot_vec(&gates.k);

        // r = S̄^T e, with ∂L/∂r = −dz
        let mut dsbar = ds.clone();
        for (i, &ei) in e.iter().enumerate() {
            for (x, &dzj) in dsbar.row_mut(i).iter_mut().zip(&dz) {
                *x -= ei * dzj;
            }
        }
        let de: Vec<f64> = sbar.dot_vec(&dz).iter().map(|x| -x).collect();

        for j in 0..d_v {
            grads.dw[(t, j)] = dz[j] * gates.v[j];
            grads.dv[(t, j)] = dz[j] * gates.w[j];
        }
        for i in 0..d_k {
            grads.db[(t, i)] = de[i] * gates.k[i];
            dk[i] += de[i] * gates.b[i];
        }
        grads.dk.set_row(t, &dk);

        // S̄ = Diag(α) S_{t−1}, α = exp(g)
        for i in 0..d_k {
            let dalpha: f64 = dsbar.row(i).iter().zip(s_prev.row(i)).map(|(a, b)| a * b).sum();
            grads.dg[(t, i)] = dalpha * gates.alpha[i];
        }
        ds = decay_rows(&dsbar, &gates.alpha);
    }
    grads.ds0 = ds;
    Ok(grads)
}
