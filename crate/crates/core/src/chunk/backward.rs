use crate::chunk::forward::{forward_chunk, ChunkRecord, ChunkWorkspace, ChunkedForward, CumulativeDecay};
use crate::chunk::HeadInputs;
use crate::error::{Error, Result};
use crate::math::matrix::dot_slices;
use crate::math::Matrix;
use crate::real::Real;

/// How `∂L/∂A` is accumulated from the WY auxiliaries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WyAccumulation {
    /// Channel gates stay inside the products: `dU Zᵀ + dY Ēᵀ`.
    #[default]
    GateAware,
    /// Raw `v_s` and `γ_s⊙k_s` with the gates post-scaled by their channel
    /// means. Only correct when every gate row is a constant.
    ScalarPostScaled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BackwardOptions {
    pub wy: WyAccumulation,
}

/// Gradients of one head sequence (or chunk) with respect to every input.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkGrads<T = f64> {
    pub dq: Matrix<T>,
    pub dk: Matrix<T>,
    pub dv: Matrix<T>,
    pub db: Matrix<T>,
    pub dw: Matrix<T>,
    pub dg: Matrix<T>,
    /// Gradient with respect to the state entering the sequence (or chunk).
    pub ds0: Matrix<T>,
}

impl<T: Real> ChunkGrads<T> {
    pub fn zeros(len: usize, d_k: usize, d_v: usize) -> Self {
        ChunkGrads {
            dq: Matrix::zeros(len, d_k),
            dk: Matrix::zeros(len, d_k),
            dv: Matrix::zeros(len, d_v),
            db: Matrix::zeros(len, d_k),
            dw: Matrix::zeros(len, d_v),
            dg: Matrix::zeros(len, d_k),
            ds0: Matrix::zeros(d_k, d_v),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, m)| m.is_finite())
    }

    /// Named views, in declaration order.
    pub fn tensors(&self) -> [(&'static str, &Matrix<T>); 7] {
        [
            ("dq", &self.dq),
            ("dk", &self.dk),
            ("dv", &self.dv),
            ("db", &self.db),
            ("dw", &self.dw),
            ("dg", &self.dg),
            ("ds0", &self.ds0),
        ]
    }
}

fn check_shape<T: Real>(op: &'static str, name: &str, m: &Matrix<T>, want: (usize, usize)) -> Result<()> {
    if m.shape() != want {
        return Err(Error::dim(op, format!("{name} is {:?}, expected {want:?}", m.shape())));
    }
    Ok(())
}

/// Contributions of the output block `O = Q_γ S₀ + A_qk R`.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputVjp<T = f64> {
    pub daqk: Matrix<T>,
    pub dr: Matrix<T>,
    pub dqgamma: Matrix<T>,
    pub ds0: Matrix<T>,
}

pub fn vjp_output<T: Real>(d_out: &Matrix<T>, ws: &ChunkWorkspace<T>) -> Result<OutputVjp<T>> {
    check_shape("vjp_output", "dO", d_out, ws.r.shape())?;
    Ok(OutputVjp {
        daqk: d_out.dot_t_lower(&ws.r, 0),
        dr: ws.aqk.t_dot(d_out),
        dqgamma: d_out.dot_t(&ws.s0),
        ds0: ws.qgamma.t_dot(d_out),
    })
}

/// Contributions of the state update `S₁ = Diag(γ_C) S₀ + K_tailᵀ R`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVjp<T = f64> {
    pub dr: Matrix<T>,
    /// `C × d_k`, row `r` is `dS_C ρ_r`.
    pub dktail: Matrix<T>,
    pub ds0: Matrix<T>,
    /// `rowsum(dS_C ⊙ S₀)`, kept in binary64.
    pub dgamma_c: Vec<f64>,
}

pub fn vjp_state<T: Real>(ds_c: &Matrix<T>, ws: &ChunkWorkspace<T>) -> Result<StateVjp<T>> {
    check_shape("vjp_state", "dS_C", ds_c, ws.s0.shape())?;
    let gamma_c = ws.decay.last();
    let mut ds0 = ds_c.clone();
    for (i, &g) in gamma_c.iter().enumerate() {
        ds0.row_mut(i).iter_mut().for_each(|x| *x = g * *x);
    }
    let dgamma_c = (0..ds_c.rows())
        .map(|i| {
            ds_c.row(i)
                .iter()
                .zip(ws.s0.row(i))
                .map(|(a, b)| a.as_f64() * b.as_f64())
                .sum()
        })
        .collect();
    Ok(StateVjp {
        dr: ws.ktail.dot(ds_c),
        dktail: ws.r.dot_t(ds_c),
        ds0,
        dgamma_c,
    })
}

/// Contributions of the residual `R = U − Y S₀`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualVjp<T = f64> {
    pub du: Matrix<T>,
    pub dy: Matrix<T>,
    pub ds0: Matrix<T>,
}

pub fn vjp_residual<T: Real>(dr: &Matrix<T>, ws: &ChunkWorkspace<T>) -> Result<ResidualVjp<T>> {
    check_shape("vjp_residual", "dR", dr, ws.r.shape())?;
    Ok(ResidualVjp {
        du: dr.clone(),
        dy: dr.dot_t(&ws.s0).map(|x| -x),
        ds0: ws.y.t_dot(dr).map(|x| -x),
    })
}

/// Contributions of `Y = A Ē`, `U = A Z`.
#[derive(Debug, Clone, PartialEq)]
pub struct WyVjp<T = f64> {
    pub da: Matrix<T>,
    pub dz: Matrix<T>,
    pub debar: Matrix<T>,
}

/// Gate-aware accumulation: `dA = dU Zᵀ + dY Ēᵀ` with the gates already
/// inside `Z` and `Ē`.
pub fn vjp_wy<T: Real>(du: &Matrix<T>, dy: &Matrix<T>, ws: &ChunkWorkspace<T>) -> Result<WyVjp<T>> {
    check_shape("vjp_wy", "dU", du, ws.u.shape())?;
    check_shape("vjp_wy", "dY", dy, ws.y.shape())?;
    let mut da = du.dot_t(&ws.z);
    da.add_assign(&dy.dot_t(&ws.ebar));
    Ok(WyVjp {
        da,
        dz: ws.a.t_dot(du),
        debar: ws.a.t_dot(dy),
    })
}

/// Scalar post-scaling of `dA`: `mean(w_s)(dU_r·v_s) + mean(b_s)(dY_r·(γ_s⊙k_s))`.
/// Agrees with [`vjp_wy`] only when each gate row is constant.
pub fn vjp_wy_scalar_post_scaled<T: Real>(
    du: &Matrix<T>,
    dy: &Matrix<T>,
    ws: &ChunkWorkspace<T>,
    chunk: &HeadInputs<T>,
) -> Result<WyVjp<T>> {
    let mut out = vjp_wy(du, dy, ws)?;
    let mean = |row: &[T]| T::cast(row.iter().map(|x| x.as_f64()).sum::<f64>() / row.len() as f64);
    let gk = ws.decay.gamma.hadamard(&chunk.k);
    let c = ws.len();
    for r in 0..c {
        for s in 0..c {
            out.da[(r, s)] = mean(chunk.w.row(s)) * dot_slices(du.row(r), chunk.v.row(s))
                + mean(chunk.b.row(s)) * dot_slices(dy.row(r), gk.row(s));
        }
    }
    Ok(out)
}

/// `dT = −tril(Aᵀ dA Aᵀ, −1)` for `A = (I + T)^{-1}`.
pub fn vjp_inverse<T: Real>(da: &Matrix<T>, a: &Matrix<T>) -> Result<Matrix<T>> {
    check_shape("vjp_inverse", "dA", da, a.shape())?;
    if a.rows() != a.cols() {
        return Err(Error::dim("vjp_inverse", "A is not square"));
    }
    Ok(a.t_dot(da).dot_t(a).tril(-1).map(|x| -x))
}

/// Pulls `dT` and `dA_qk` back to `(dĒ, dK̄, dQ_γ)`.
pub fn vjp_t_and_scores<T: Real>(
    dt: &Matrix<T>,
    daqk: &Matrix<T>,
    ws: &ChunkWorkspace<T>,
) -> Result<(Matrix<T>, Matrix<T>, Matrix<T>)> {
    let c = ws.len();
    check_shape("vjp_t_and_scores", "dT", dt, (c, c))?;
    check_shape("vjp_t_and_scores", "dA_qk", daqk, (c, c))?;
    let debar = dt.lower_dot(&ws.kbar);
    let mut dkbar = dt.t_dot(&ws.ebar);
    let dqgamma = daqk.lower_dot(&ws.kbar);
    dkbar.add_assign(&daqk.t_dot(&ws.qgamma));
    Ok((debar, dkbar, dqgamma))
}

/// Upstream partials reaching the gate-level tensors of a chunk.
#[derive(Debug, Clone, Copy)]
pub struct ElementwiseUpstream<'a, T = f64> {
    pub debar: &'a Matrix<T>,
    pub dkbar: &'a Matrix<T>,
    pub dqgamma: &'a Matrix<T>,
    pub dktail: &'a Matrix<T>,
    pub dz: &'a Matrix<T>,
    pub dgamma_c: &'a [f64],
}

#[derive(Debug, Clone, PartialEq)]
pub struct ElementwiseGrads<T = f64> {
    pub dq: Matrix<T>,
    pub dk: Matrix<T>,
    pub dv: Matrix<T>,
    pub db: Matrix<T>,
    pub dw: Matrix<T>,
    /// Every appearance of `γ` summed into one accumulator, in binary64.
    pub dgamma: Matrix<f64>,
}

/// Pulls the partials through `K̄ = γ^{-1}⊙K`, `Ē = γ⊙B⊙K`, `Z = W⊙V`,
/// `Q_γ = γ⊙Q` and the tail keys `exp(G_C − G_r)⊙k_r`.
pub fn vjp_elementwise<T: Real>(
    up: ElementwiseUpstream<'_, T>,
    chunk: &HeadInputs<T>,
    decay: &CumulativeDecay<T>,
) -> Result<ElementwiseGrads<T>> {
    const OP: &str = "vjp_elementwise";
    let (c, dk_n, dv_n) = (chunk.len(), chunk.d_k(), chunk.d_v());
    for (name, m) in [("dĒ", up.debar), ("dK̄", up.dkbar), ("dQ_γ", up.dqgamma), ("dK_tail", up.dktail)] {
        check_shape(OP, name, m, (c, dk_n))?;
    }
    check_shape(OP, "dZ", up.dz, (c, dv_n))?;
    check_shape(OP, "γ", &decay.gamma, (c, dk_n))?;
    if up.dgamma_c.len() != dk_n {
        return Err(Error::dim(OP, "dγ_C length differs from d_k"));
    }

    let dw = up.dz.hadamard(&chunk.v);
    let dv = up.dz.hadamard(&chunk.w);
    let mut dq = Matrix::zeros(c, dk_n);
    let mut dk = Matrix::zeros(c, dk_n);
    let mut db = Matrix::zeros(c, dk_n);
    let mut dgamma = Matrix::<f64>::zeros(c, dk_n);
    let last = decay.gamma_f64.row(c - 1);
    let mut tail_to_last = vec![0.0f64; dk_n];
    for r in 0..c {
        for i in 0..dk_n {
            let inv64 = decay.inv_gamma_f64[(r, i)];
            let gamma = decay.gamma[(r, i)];
            let inv = T::cast(inv64);
            let ratio = last[i] * inv64;
            let (k, b, q) = (chunk.k[(r, i)], chunk.b[(r, i)], chunk.q[(r, i)]);
            let (de, dkb, dqg, dkt) = (
                up.debar[(r, i)],
                up.dkbar[(r, i)],
                up.dqgamma[(r, i)],
                up.dktail[(r, i)],
            );
            db[(r, i)] = de * gamma * k;
            dk[(r, i)] = de * gamma * b + dkb * inv + dkt * T::cast(ratio);
            dq[(r, i)] = dqg * gamma;
            let (k, b, q) = (k.as_f64(), b.as_f64(), q.as_f64());
            let (de, dkb, dqg, dkt) = (de.as_f64(), dkb.as_f64(), dqg.as_f64(), dkt.as_f64());
            dgamma[(r, i)] = de * b * k - dkb * k * inv64 * inv64 + dqg * q - dkt * k * ratio * inv64;
            tail_to_last[i] += dkt * k * inv64;
        }
    }
    for (i, x) in dgamma.row_mut(c - 1).iter_mut().enumerate() {
        *x += tail_to_last[i] + up.dgamma_c[i];
    }
    Ok(ElementwiseGrads { dq, dk, dv, db, dw, dgamma })
}

/// `dG_cum = dγ⊙γ`, then `dg_i = Σ_{r≥i} dG_cum_r`.
pub fn vjp_decay<T: Real>(dgamma: &Matrix<f64>, decay: &CumulativeDecay<T>) -> Result<Matrix<T>> {
    check_shape("vjp_decay", "dγ", dgamma, decay.log.shape())?;
    let (c, dk) = dgamma.shape();
    let mut out = Matrix::zeros(c, dk);
    let mut acc = vec![0.0f64; dk];
    for r in (0..c).rev() {
        for (i, a) in acc.iter_mut().enumerate() {
            *a += dgamma[(r, i)] * decay.gamma_f64[(r, i)];
        }
        out.set_row(r, &acc.iter().map(|&x| T::cast(x)).collect::<Vec<_>>());
    }
    Ok(out)
}

/// `∂L/∂β` of a tied row: `⟨dB_row, 1⟩ + ⟨dW_row, 1⟩`.
pub fn tied_beta_gradient<T: Real>(db_row: &[T], dw_row: &[T]) -> T {
    db_row.iter().chain(dw_row).fold(T::zero(), |a, &x| a + x)
}

/// Backward through one chunk given its upstream `dO` and `dS_C`.
pub fn backward_chunk<T: Real>(
    chunk: &HeadInputs<T>,
    ws: &ChunkWorkspace<T>,
    d_out: &Matrix<T>,
    ds_c: &Matrix<T>,
    options: BackwardOptions,
) -> Result<ChunkGrads<T>> {
    let out = vjp_output(d_out, ws)?;
    let state = vjp_state(ds_c, ws)?;
    let mut dr = out.dr;
    dr.add_assign(&state.dr);
    let res = vjp_residual(&dr, ws)?;
    let wy = match options.wy {
        WyAccumulation::GateAware => vjp_wy(&res.du, &res.dy, ws)?,
        WyAccumulation::ScalarPostScaled => vjp_wy_scalar_post_scaled(&res.du, &res.dy, ws, chunk)?,
    };
    let dt = vjp_inverse(&wy.da, &ws.a)?;
    let (debar_t, dkbar, dqgamma_s) = vjp_t_and_scores(&dt, &out.daqk, ws)?;
    let debar = wy.debar.add(&debar_t);
    let dqgamma = out.dqgamma.add(&dqgamma_s);
    let el = vjp_elementwise(
        ElementwiseUpstream {
            debar: &debar,
            dkbar: &dkbar,
            dqgamma: &dqgamma,
            dktail: &state.dktail,
            dz: &wy.dz,
            dgamma_c: &state.dgamma_c,
        },
        chunk,
        &ws.decay,
    )?;
    let dg = vjp_decay(&el.dgamma, &ws.decay)?;
    let mut ds0 = out.ds0;
    ds0.add_assign(&state.ds0);
    ds0.add_assign(&res.ds0);
    Ok(ChunkGrads {
        dq: el.dq,
        dk: el.dk,
        dv: el.dv,
        db: el.db,
        dw: el.dw,
        dg,
        ds0,
    })
}

/// Reverse sweep over the chunks of a [`ChunkedForward`], threading `dS`
/// across chunk boundaries. Checkpointed chunks are recomputed from their
/// start state.
pub fn backward_chunked<T: Real>(
    inputs: &HeadInputs<T>,
    forward: &ChunkedForward<T>,
    d_out: &Matrix<T>,
    d_final: &Matrix<T>,
    options: BackwardOptions,
) -> Result<ChunkGrads<T>> {
    const OP: &str = "backward_chunked";
    let (len, d_k, d_v) = (inputs.len(), inputs.d_k(), inputs.d_v());
    check_shape(OP, "dO", d_out, (len, d_v))?;
    check_shape(OP, "dS_final", d_final, (d_k, d_v))?;
    let mut at = 0;
    for rec in &forward.chunks {
        if rec.start() != at || rec.is_empty() {
            return Err(Error::contract(OP, format!("no workspace for the chunk starting at token {at}")));
        }
        at += rec.len();
    }
    if at != len {
        return Err(Error::contract(OP, format!("workspaces cover {at} of {len} tokens")));
    }

    let mut grads = ChunkGrads::zeros(len, d_k, d_v);
    let mut ds = d_final.clone();
    for rec in forward.chunks.iter().rev() {
        let (start, end) = (rec.start(), rec.start() + rec.len());
        let chunk = inputs.slice(start, end);
        let recomputed;
        let ws = match rec {
            ChunkRecord::Retained(ws) => ws,
            ChunkRecord::Checkpoint { s0, .. } => {
                recomputed = forward_chunk(&chunk, s0, start, forward.options.solve)?.2;
                &recomputed
            }
        };
        let g = backward_chunk(&chunk, ws, &d_out.slice_rows(start, end), &ds, options)?;
        grads.dq.set_rows(start, &g.dq);
        grads.dk.set_rows(start, &g.dk);
        grads.dv.set_rows(start, &g.dv);
        grads.db.set_rows(start, &g.db);
        grads.dw.set_rows(start, &g.dw);
        grads.dg.set_rows(start, &g.dg);
        ds = g.ds0;
    }
    grads.ds0 = ds;
    Ok(grads)
}
