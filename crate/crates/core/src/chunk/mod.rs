//! Chunkwise WY-form forward, gate-aware backward and varlen packing.
//!
//! Inside a chunk the decay is absorbed into normalized keys
//! (`K̄ = γ^{-1}⊙K`, `Ē = γ⊙B⊙K`), the rank-one edits are accumulated through
//! the unit-lower-triangular inverse `A = (I + T)^{-1}`, and only the
//! end-of-chunk state is carried to the next chunk.

mod backward;
mod forward;
mod packed;

pub use backward::{
    backward_chunk, backward_chunked, tied_beta_gradient, vjp_decay, vjp_elementwise,
    vjp_inverse, vjp_output, vjp_residual, vjp_state, vjp_t_and_scores, vjp_wy, vjp_wy_scalar_post_scaled, BackwardOptions,
    ChunkGrads, ElementwiseGrads, ElementwiseUpstream, OutputVjp, ResidualVjp, StateVjp, WyAccumulation, WyVjp,
};
pub use forward::{
    build_gate_matrices, build_t_and_scores, build_wy_aux, chunk_output, chunk_state_update,
    cumulate_decay, forward_chunk, forward_chunked, prefix_state, tail_keys, ChunkRecord,
    ChunkWorkspace, ChunkedForward, CumulativeDecay, ForwardOptions, GateMatrices, Retention,
    ScoreMatrices, WyAux, GAMMA_FLOOR_F32, GAMMA_FLOOR_F64,
};
pub use packed::{backward_packed, forward_packed, PackedBatch, PackedForward};

use crate::error::{Error, Result};
use crate::math::Matrix;
use crate::real::Real;
use crate::rules::{HeadState, TokenGates};

/// Row-stacked per-token tensors of one head over a sequence (or a chunk).
#[derive(Debug, Clone, PartialEq)]
pub struct HeadInputs<T = f64> {
    /// `L × d_k`
    pub q: Matrix<T>,
    /// `L × d_k`
    pub k: Matrix<T>,
    /// `L × d_v`
    pub v: Matrix<T>,
    /// Erase gates, `L × d_k`.
    pub b: Matrix<T>,
    /// Write gates, `L × d_v`.
    pub w: Matrix<T>,
    /// Log-decay, `L × d_k`, ≤ 0.
    pub g: Matrix<T>,
    pub neg_eig: bool,
}

impl<T: Real> HeadInputs<T> {
    pub fn len(&self) -> usize {
        self.q.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn d_k(&self) -> usize {
        self.q.cols()
    }

    pub fn d_v(&self) -> usize {
        self.v.cols()
    }

    /// Shape and gate-range checks.
    pub fn validate(&self) -> Result<()> {
        const OP: &str = "HeadInputs::validate";
        let (l, dk, dv) = (self.len(), self.d_k(), self.d_v());
        for (name, m, cols) in [
            ("k", &self.k, dk),
            ("b", &self.b, dk),
            ("g", &self.g, dk),
            ("v", &self.v, dv),
            ("w", &self.w, dv),
        ] {
            if m.shape() != (l, cols) {
                return Err(Error::dim(
                    OP,
                    format!("{name} is {:?}, expected {:?}", m.shape(), (l, cols)),
                ));
            }
        }
        let b_max = if self.neg_eig { 2.0 } else { 1.0 };
        if let Some(x) = self.b.data().iter().find(|x| !(x.as_f64() >= 0.0 && x.as_f64() <= b_max)) {
            return Err(Error::range(OP, format!("erase gate {x} outside [0, {b_max}]")));
        }
        if let Some(x) = self.w.data().iter().find(|x| !(x.as_f64() >= 0.0 && x.as_f64() <= 1.0)) {
            return Err(Error::range(OP, format!("write gate {x} outside [0, 1]")));
        }
        if let Some(x) = self.g.data().iter().find(|x| !(x.as_f64() <= 0.0)) {
            return Err(Error::range(OP, format!("log-decay {x} > 0")));
        }
        Ok(())
    }

    /// Rows `start..end` of every tensor.
    pub fn slice(&self, start: usize, end: usize) -> Self {
        HeadInputs {
            q: self.q.slice_rows(start, end),
            k: self.k.slice_rows(start, end),
            v: self.v.slice_rows(start, end),
            b: self.b.slice_rows(start, end),
            w: self.w.slice_rows(start, end),
            g: self.g.slice_rows(start, end),
            neg_eig: self.neg_eig,
        }
    }

    /// Concatenates sequences along the token axis.
    pub fn concat(parts: &[HeadInputs<T>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("HeadInputs::concat", "no parts"))?;
        let total: usize = parts.iter().map(|p| p.len()).sum();
        let stack = |pick: fn(&HeadInputs<T>) -> &Matrix<T>| -> Result<Matrix<T>> {
            let cols = pick(first).cols();
            let mut out = Matrix::zeros(total, cols);
            let mut at = 0;
            for p in parts {
                let m = pick(p);
                if m.cols() != cols {
                    return Err(Error::dim("HeadInputs::concat", "head dims differ between parts"));
                }
                out.set_rows(at, m);
                at += m.rows();
            }
            Ok(out)
        };
        Ok(HeadInputs {
            q: stack(|p| &p.q)?,
            k: stack(|p| &p.k)?,
            v: stack(|p| &p.v)?,
            b: stack(|p| &p.b)?,
            w: stack(|p| &p.w)?,
            g: stack(|p| &p.g)?,
            neg_eig: first.neg_eig,
        })
    }

    /// Per-token gate bundles for the tokenwise reference.
    pub fn tokens(&self) -> Vec<TokenGates<T>> {
        (0..self.len())
            .map(|t| {
                TokenGates::gdr2(
                    self.q.row(t).to_vec(),
                    self.k.row(t).to_vec(),
                    self.v.row(t).to_vec(),
                    self.g.row(t).to_vec(),
                    self.b.row(t).to_vec(),
                    self.w.row(t).to_vec(),
                )
                .with_neg_eig(self.neg_eig)
            })
            .collect()
    }

    pub fn cast<U: Real>(&self) -> HeadInputs<U> {
        HeadInputs {
            q: self.q.cast(),
            k: self.k.cast(),
            v: self.v.cast(),
            b: self.b.cast(),
            w: self.w.cast(),
            g: self.g.cast(),
            neg_eig: self.neg_eig,
        }
    }

    /// A zero state of matching shape.
    pub fn zero_state(&self) -> HeadState<T> {
        HeadState::zeros(self.d_k(), self.d_v())
    }
}
