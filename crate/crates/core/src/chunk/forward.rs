use crate::chunk::HeadInputs;
use crate::error::{Error, Result};
use crate::math::{unitriangular_inverse, Matrix, SolvePrecision};
use crate::real::{Precision, Real};
use crate::rules::{read_output, step_gdr2, HeadState};

/// Smallest cumulative decay the binary32 engine accepts; below it `K̄ = K/γ`
/// would leave the normal range.
pub const GAMMA_FLOOR_F32: f64 = 1e-30;

/// Binary64 counterpart, chosen so that `γ^{-2}` in the backward stays finite.
pub const GAMMA_FLOOR_F64: f64 = 1e-150;

/// What the forward keeps for the backward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Retention {
    /// Keep every chunk workspace.
    #[default]
    Retain,
    /// Keep only each chunk's start state; the backward recomputes the rest.
    Recompute,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForwardOptions {
    pub chunk_size: usize,
    pub solve: SolvePrecision,
    pub retention: Retention,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        ForwardOptions {
            chunk_size: 64,
            solve: SolvePrecision::StrictBinary64,
            retention: Retention::Retain,
        }
    }
}

impl ForwardOptions {
    pub fn with_chunk_size(chunk_size: usize) -> Self {
        ForwardOptions {
            chunk_size,
            ..Default::default()
        }
    }
}

/// Local cumulative decay of one chunk.
#[derive(Debug, Clone, PartialEq)]
pub struct CumulativeDecay<T = f64> {
    /// `G_r = Σ_{i≤r} g_i`, carried in binary64.
    pub log: Matrix<f64>,
    /// `γ_r = exp(G_r)`.
    pub gamma: Matrix<T>,
    /// `exp(G)` before rounding to storage precision.
    pub gamma_f64: Matrix<f64>,
    /// `1/exp(G)` in binary64.
    pub inv_gamma_f64: Matrix<f64>,
}

impl<T: Real> CumulativeDecay<T> {
    /// `γ_C`, the decay over the whole chunk.
    pub fn last(&self) -> &[T] {
        self.gamma.row(self.gamma.rows() - 1)
    }

    /// `γ⊙m`, or `γ^{-1}⊙m` when `inverse`.
    fn scale_rows(&self, m: &Matrix<T>, inverse: bool) -> Matrix<T> {
        let f = if inverse { &self.inv_gamma_f64 } else { &self.gamma_f64 };
        let mut out = m.clone();
        for (o, &x) in out.data_mut().iter_mut().zip(f.data()) {
            *o = *o * T::cast(x);
        }
        out
    }
}

/// `γ_r = exp(Σ_{i≤r} g_i)`, with the running sums in binary64.
pub fn cumulate_decay<T: Real>(g: &Matrix<T>) -> Result<CumulativeDecay<T>> {
    const OP: &str = "cumulate_decay";
    if let Some(x) = g.data().iter().find(|x| !(x.as_f64() <= 0.0)) {
        return Err(Error::contract(OP, format!("log-decay entry {x} is positive")));
    }
    let (c, dk) = g.shape();
    let mut log = Matrix::zeros(c, dk);
    let mut acc = vec![0.0f64; dk];
    for r in 0..c {
        for (a, &x) in acc.iter_mut().zip(g.row(r)) {
            *a += x.as_f64();
        }
        log.set_row(r, &acc);
    }
    let floor = match T::PRECISION {
        Precision::Binary32 => GAMMA_FLOOR_F32,
        Precision::Binary64 => GAMMA_FLOOR_F64,
    };
    let gamma_f64 = log.map(f64::exp);
    if let Some((lg, _)) = log.data().iter().zip(gamma_f64.data()).find(|(_, &x)| x < floor) {
        return Err(Error::range(
            OP,
            format!("cumulative decay exp({lg}) is below {floor:e} for {}; use a shorter chunk", T::PRECISION),
        ));
    }
    Ok(CumulativeDecay {
        gamma: gamma_f64.cast(),
        inv_gamma_f64: gamma_f64.map(|x| 1.0 / x),
        gamma_f64,
        log,
    })
}

/// Decay-normalized gate matrices of a chunk.
#[derive(Debug, Clone, PartialEq)]
pub struct GateMatrices<T = f64> {
    /// `γ^{-1}⊙K`
    pub kbar: Matrix<T>,
    /// `γ⊙(B⊙K)`
    pub ebar: Matrix<T>,
    /// `W⊙V`
    pub z: Matrix<T>,
}

/// `K̄ = γ^{-1}⊙K`, `Ē = γ⊙(B⊙K)`, `Z = W⊙V`; `γ^{±1}` come from the log sums.
pub fn build_gate_matrices<T: Real>(
    inputs: &HeadInputs<T>,
    decay: &CumulativeDecay<T>,
) -> Result<GateMatrices<T>> {
    const OP: &str = "build_gate_matrices";
    if decay.gamma.shape() != inputs.k.shape() {
        return Err(Error::dim(OP, "decay and key shapes differ"));
    }
    if decay.gamma.data().iter().any(|&x| x == T::zero()) {
        return Err(Error::contract(OP, "cumulative decay underflowed to zero"));
    }
    Ok(GateMatrices {
        kbar: decay.scale_rows(&inputs.k, true),
        ebar: decay.scale_rows(&inputs.b.hadamard(&inputs.k), false),
        z: inputs.w.hadamard(&inputs.v),
    })
}

/// Intra-chunk score matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrices<T = f64> {
    /// `tril(Ē K̄^T, −1)`
    pub t: Matrix<T>,
    /// `tril(Q_γ K̄^T, 0)`
    pub aqk: Matrix<T>,
    /// Rows `γ_r⊙q_r`.
    pub qgamma: Matrix<T>,
}

/// `T = tril(Ē K̄^T, −1)` and `A_qk[r][s] = 1_{r≥s} q_r^T Diag(γ_r/γ_s) k_s`.
pub fn build_t_and_scores<T: Real>(
    q: &Matrix<T>,
    gates: &GateMatrices<T>,
    decay: &CumulativeDecay<T>,
) -> Result<ScoreMatrices<T>> {
    if q.shape() != gates.kbar.shape() || gates.ebar.shape() != gates.kbar.shape() {
        return Err(Error::dim("build_t_and_scores", "q, K̄ and Ē shapes differ"));
    }
    let qgamma = decay.scale_rows(q, false);
    let t = gates.ebar.dot_t_lower(&gates.kbar, -1);
    let aqk = qgamma.dot_t_lower(&gates.kbar, 0);
    Ok(ScoreMatrices { t, aqk, qgamma })
}

/// WY auxiliaries sharing one triangular inverse.
#[derive(Debug, Clone, PartialEq)]
pub struct WyAux<T = f64> {
    /// `(I + T)^{-1}`, unit lower triangular.
    pub a: Matrix<T>,
    /// Erase side, `A Ē`.
    pub y: Matrix<T>,
    /// Write side, `A Z`.
    pub u: Matrix<T>,
}

/// `A = (I + T)^{-1}` by forward substitution, `Y = A Ē`, `U = A Z`.
pub fn build_wy_aux<T: Real>(
    t: &Matrix<T>,
    ebar: &Matrix<T>,
    z: &Matrix<T>,
    solve: SolvePrecision,
) -> Result<WyAux<T>> {
    let a = unitriangular_inverse(t, solve)?;
    if ebar.rows() != t.rows() || z.rows() != t.rows() {
        return Err(Error::dim("build_wy_aux", "right-hand sides do not match T"));
    }
    let y = a.lower_dot(ebar);
    let u = a.lower_dot(z);
    Ok(WyAux { a, y, u })
}

/// Rows `(γ_C/γ_r)⊙k_r`, with the ratio formed in binary64.
pub fn tail_keys<T: Real>(k: &Matrix<T>, decay: &CumulativeDecay<T>) -> Matrix<T> {
    let c = k.rows();
    let last = decay.gamma_f64.row(c - 1);
    let mut out = k.clone();
    for r in 0..c {
        let inv = decay.inv_gamma_f64.row(r);
        for ((o, &g_last), &inv_r) in out.row_mut(r).iter_mut().zip(last).zip(inv) {
            *o = *o * T::cast(g_last * inv_r);
        }
    }
    out
}

/// `R = U − Y S₀`, `S₁ = Diag(γ_C) S₀ + K_tail^T R`. Returns `(S₁, R)`.
pub fn chunk_state_update<T: Real>(
    s0: &Matrix<T>,
    gamma_last: &[T],
    ktail: &Matrix<T>,
    y: &Matrix<T>,
    u: &Matrix<T>,
) -> Result<(Matrix<T>, Matrix<T>)> {
    if y.cols() != s0.rows()
        || u.cols() != s0.cols()
        || ktail.shape() != y.shape()
        || gamma_last.len() != s0.rows()
        || u.rows() != y.rows()
    {
        return Err(Error::dim(
            "chunk_state_update",
            format!(
                "S0 {:?}, Y {:?}, U {:?}, K_tail {:?}",
                s0.shape(),
                y.shape(),
                u.shape(),
                ktail.shape()
            ),
        ));
    }
    let r = u.sub(&y.dot(s0));
    let mut s1 = s0.clone();
    for (i, &g) in gamma_last.iter().enumerate() {
        s1.row_mut(i).iter_mut().for_each(|x| *x = g * *x);
    }
    s1.add_assign(&ktail.t_dot(&r));
    Ok((s1, r))
}

/// `O = Q_γ S₀ + A_qk R`.
pub fn chunk_output<T: Real>(
    qgamma: &Matrix<T>,
    aqk: &Matrix<T>,
    s0: &Matrix<T>,
    r: &Matrix<T>,
) -> Result<Matrix<T>> {
    if qgamma.cols() != s0.rows() || aqk.cols() != r.rows() || r.cols() != s0.cols() || aqk.rows() != qgamma.rows() {
        return Err(Error::dim("chunk_output", "inconsistent chunk shapes"));
    }
    let mut o = qgamma.dot(s0);
    o.add_assign(&aqk.lower_dot(r));
    Ok(o)
}

/// All derived tensors of one chunk, kept for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkWorkspace<T = f64> {
    /// Offset of the chunk's first token in its sequence.
    pub start: usize,
    /// State entering the chunk.
    pub s0: Matrix<T>,
    pub decay: CumulativeDecay<T>,
    pub kbar: Matrix<T>,
    pub ebar: Matrix<T>,
    pub z: Matrix<T>,
    pub t: Matrix<T>,
    pub a: Matrix<T>,
    pub y: Matrix<T>,
    pub u: Matrix<T>,
    pub ktail: Matrix<T>,
    pub qgamma: Matrix<T>,
    pub aqk: Matrix<T>,
    pub r: Matrix<T>,
}

impl<T: Real> ChunkWorkspace<T> {
    pub fn len(&self) -> usize {
        self.kbar.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn gamma(&self) -> &Matrix<T> {
        &self.decay.gamma
    }
}

/// Runs one chunk from `s0`. Returns `(O, S₁, workspace)`.
pub fn forward_chunk<T: Real>(
    chunk: &HeadInputs<T>,
    s0: &Matrix<T>,
    start: usize,
    solve: SolvePrecision,
) -> Result<(Matrix<T>, Matrix<T>, ChunkWorkspace<T>)> {
    if s0.shape() != (chunk.d_k(), chunk.d_v()) {
        return Err(Error::dim(
            "forward_chunk",
            format!("S0 is {:?}, expected {:?}", s0.shape(), (chunk.d_k(), chunk.d_v())),
        ));
    }
    let decay = cumulate_decay(&chunk.g)?;
    let gates = build_gate_matrices(chunk, &decay)?;
    let scores = build_t_and_scores(&chunk.q, &gates, &decay)?;
    let wy = build_wy_aux(&scores.t, &gates.ebar, &gates.z, solve)?;
    let ktail = tail_keys(&chunk.k, &decay);
    let (mut s1, r) = chunk_state_update(s0, decay.last(), &ktail, &wy.y, &wy.u)?;
    let mut out = chunk_output(&scores.qgamma, &scores.aqk, s0, &r)?;
    if chunk.len() == 1 {
        // A one-token chunk is the recurrence itself; stepping it directly
        // skips the γ·γ^{-1} round trip.
        let gates = &chunk.tokens()[0];
        let (state, _) = step_gdr2(&HeadState::new(s0.clone()), gates)?;
        out.set_row(0, &read_output(&state, &gates.q)?);
        s1 = state.s;
    }
    let ws = ChunkWorkspace {
        start,
        s0: s0.clone(),
        decay,
        kbar: gates.kbar,
        ebar: gates.ebar,
        z: gates.z,
        t: scores.t,
        a: wy.a,
        y: wy.y,
        u: wy.u,
        ktail,
        qgamma: scores.qgamma,
        aqk: scores.aqk,
        r,
    };
    Ok((out, s1, ws))
}

/// What the forward retained for one chunk.
#[derive(Debug, Clone, PartialEq)]
pub enum ChunkRecord<T = f64> {
    Retained(ChunkWorkspace<T>),
    Checkpoint { start: usize, len: usize, s0: Matrix<T> },
}

impl<T: Real> ChunkRecord<T> {
    pub fn start(&self) -> usize {
        match self {
            ChunkRecord::Retained(ws) => ws.start,
            ChunkRecord::Checkpoint { start, .. } => *start,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ChunkRecord::Retained(ws) => ws.len(),
            ChunkRecord::Checkpoint { len, .. } => *len,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Result of a chunked sequence forward.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkedForward<T = f64> {
    /// `L × d_v`
    pub outputs: Matrix<T>,
    pub final_state: Matrix<T>,
    pub chunks: Vec<ChunkRecord<T>>,
    pub options: ForwardOptions,
}

impl<T: Real> ChunkedForward<T> {
    /// Retained workspaces, or `None` in recompute mode.
    pub fn workspaces(&self) -> Option<Vec<&ChunkWorkspace<T>>> {
        self.chunks
            .iter()
            .map(|c| match c {
                ChunkRecord::Retained(ws) => Some(ws),
                ChunkRecord::Checkpoint { .. } => None,
            })
            .collect()
    }
}

/// Chunked forward over a whole sequence, threading the state from `s0`.
/// The last chunk is shortened when `C` does not divide `L`.
pub fn forward_chunked<T: Real>(
    inputs: &HeadInputs<T>,
    s0: &Matrix<T>,
    options: ForwardOptions,
) -> Result<ChunkedForward<T>> {
    const OP: &str = "forward_chunked";
    if options.chunk_size == 0 {
        return Err(Error::contract(OP, "chunk size must be at least 1"));
    }
    if inputs.is_empty() {
        return Err(Error::contract(OP, "empty sequence"));
    }
    inputs.validate()?;
    let len = inputs.len();
    let mut outputs = Matrix::zeros(len, inputs.d_v());
    let mut state = s0.clone();
    let mut chunks = Vec::with_capacity(len.div_ceil(options.chunk_size));
    let mut start = 0;
    while start < len {
        let end = (start + options.chunk_size).min(len);
        let chunk = inputs.slice(start, end);
        let (out, s1, ws) = forward_chunk(&chunk, &state, start, options.solve)?;
        outputs.set_rows(start, &out);
        chunks.push(match options.retention {
            Retention::Retain => ChunkRecord::Retained(ws),
            Retention::Recompute => ChunkRecord::Checkpoint {
                start,
                len: end - start,
                s0: state.clone(),
            },
        });
        state = s1;
        start = end;
    }
    Ok(ChunkedForward {
        outputs,
        final_state: state,
        chunks,
        options,
    })
}

/// State after the first `r` tokens of the chunk (1-based, `1 ≤ r ≤ C`):
/// `Diag(γ_r)(S₀ + K̄_{≤r}^T R_{≤r})`.
pub fn prefix_state<T: Real>(ws: &ChunkWorkspace<T>, r: usize) -> Result<Matrix<T>> {
    if r == 0 || r > ws.len() {
        return Err(Error::range(
            "prefix_state",
            format!("prefix {r} outside 1..={}", ws.len()),
        ));
    }
    let mut s = ws.s0.clone();
    s.add_assign(&ws.kbar.slice_rows(0, r).t_dot(&ws.r.slice_rows(0, r)));
    for (i, &g) in ws.decay.gamma.row(r - 1).iter().enumerate() {
        s.row_mut(i).iter_mut().for_each(|x| *x = g * *x);
    }
    Ok(s)
}
