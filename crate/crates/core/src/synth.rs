//! Seeded random instances for the verification suites.

use crate::chunk::HeadInputs;
use crate::math::{l2_normalize_rows, Matrix, Rng, L2_EPS};

/// Shape and gate ranges of a random head sequence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadSpec {
    pub len: usize,
    pub d_k: usize,
    pub d_v: usize,
    /// Per-step decay is drawn from `[alpha_min, 1)`.
    pub alpha_min: f64,
    pub neg_eig: bool,
}

impl HeadSpec {
    pub fn new(len: usize, d_k: usize, d_v: usize) -> Self {
        HeadSpec {
            len,
            d_k,
            d_v,
            alpha_min: 0.8,
            neg_eig: false,
        }
    }

    pub fn alpha_min(mut self, alpha_min: f64) -> Self {
        self.alpha_min = alpha_min;
        self
    }

    pub fn neg_eig(mut self, on: bool) -> Self {
        self.neg_eig = on;
        self
    }
}

/// Rows drawn uniformly on `[-1, 1)` then L2-normalized.
pub fn unit_rows(rng: &mut Rng, rows: usize, cols: usize) -> Matrix<f64> {
    l2_normalize_rows(&rng.matrix(rows, cols, -1.0, 1.0), L2_EPS)
}

/// Unit-norm `q, k`; `v ∈ [-1, 1)`; independent `b, w` per channel;
/// `g = ln α` with `α ∈ [alpha_min, 1)`.
pub fn head_inputs(rng: &mut Rng, spec: HeadSpec) -> HeadInputs<f64> {
    let HeadSpec { len, d_k, d_v, .. } = spec;
    let b_max = if spec.neg_eig { 2.0 } else { 1.0 };
    let q = unit_rows(rng, len, d_k);
    let k = unit_rows(rng, len, d_k);
    let v = rng.matrix(len, d_v, -1.0, 1.0);
    let b = rng.matrix(len, d_k, 0.0, b_max);
    let w = rng.matrix(len, d_v, 0.0, 1.0);
    let g = rng.matrix(len, d_k, spec.alpha_min, 1.0).map(f64::ln);
    HeadInputs {
        q,
        k,
        v,
        b,
        w,
        g,
        neg_eig: spec.neg_eig,
    }
}

/// Replaces `b` and `w` by a per-token scalar `β ∈ [0, 1)` broadcast over
/// channels, and the decay by a per-token scalar.
pub fn tie_gates(rng: &mut Rng, inputs: &HeadInputs<f64>) -> HeadInputs<f64> {
    let mut out = inputs.clone();
    for t in 0..inputs.len() {
        let beta = rng.uniform(0.0, 1.0);
        out.b.row_mut(t).fill(beta);
        out.w.row_mut(t).fill(beta);
        let g = inputs.g[(t, 0)];
        out.g.row_mut(t).fill(g);
    }
    out
}

/// Entries uniform on `[-scale, scale)`.
pub fn random_state(rng: &mut Rng, d_k: usize, d_v: usize, scale: f64) -> Matrix<f64> {
    rng.matrix(d_k, d_v, -scale, scale)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn instances_satisfy_the_gate_contract() {
        let mut rng = Rng::seed(1);
        for neg in [false, true] {
            let x = head_inputs(&mut rng, HeadSpec::new(20, 5, 3).neg_eig(neg));
            x.validate().unwrap();
            for t in 0..20 {
                let n: f64 = x.k.row(t).iter().map(|v| v * v).sum();
                assert!((n - 1.0).abs() < 1e-12);
            }
        }
    }
}
