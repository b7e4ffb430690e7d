//! The `gdr2` subcommands. Each builds a [`Report`](crate::Report); cases run
//! in parallel and are recorded in case order.

pub mod bench;
pub mod decode;
pub mod equivalence;
pub mod gradients;
pub mod recall;
pub mod reductions;

use gdr2_core::chunk::HeadInputs;
use gdr2_core::layer::{init_params, LayerConfig, LayerParams};
use gdr2_core::rules::{run_sequence_reference, HeadState, RuleKind};
use gdr2_core::{Matrix, Rng};

use crate::error::Result;

/// Seed of case `index` in suite `tag`, mixed so neighbouring cases draw
/// unrelated streams.
pub(crate) fn case_seed(base: u64, tag: u64, index: usize) -> u64 {
    let mut rng = Rng::seed(base ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    rng.fork(index as u64).next_u64()
}

/// Outputs and final state of the tokenwise rule.
pub(crate) fn tokenwise(rule: RuleKind, x: &HeadInputs<f64>, s0: &Matrix<f64>) -> Result<(Matrix<f64>, Matrix<f64>)> {
    let run = run_sequence_reference(rule, &x.tokens(), &HeadState::new(s0.clone()))?;
    let last = run.final_state().map_or_else(|| s0.clone(), |s| s.s.clone());
    Ok((run.outputs, last))
}

/// Random offsets splitting `len` tokens into up to four nonempty sequences.
pub(crate) fn ragged_offsets(rng: &mut Rng, len: usize) -> Vec<usize> {
    let parts = (1 + rng.below(4)).min(len);
    let mut cuts: Vec<usize> = rng.permutation(len - 1).into_iter().take(parts - 1).map(|c| c + 1).collect();
    cuts.sort_unstable();
    let mut cu = vec![0];
    cu.extend(cuts);
    cu.push(len);
    cu
}

/// Initialized parameters with every tensor perturbed, so no gradient or
/// reduction is trivially zero.
pub(crate) fn perturbed_params(config: LayerConfig, rng: &mut Rng) -> Result<LayerParams<f64>> {
    let mut p = init_params::<f64>(config, rng)?;
    for (name, m) in p.tensors_mut() {
        let amp = if matches!(name, "rms" | "delta" | "a") { 0.2 } else { 0.5 };
        let noise = rng.matrix(m.rows(), m.cols(), -amp, amp);
        let scale = if name.starts_with('w') { 4.0 } else { 1.0 };
        *m = m.scale(scale).add(&noise);
    }
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn offsets_are_strictly_increasing() {
        let mut rng = Rng::seed(1);
        for len in [1, 2, 5, 64] {
            for _ in 0..20 {
                let cu = ragged_offsets(&mut rng, len);
                assert_eq!((cu[0], *cu.last().unwrap()), (0, len));
                assert!(cu.windows(2).all(|w| w[0] < w[1]));
            }
        }
    }

    #[test]
    fn case_seeds_differ() {
        assert_ne!(case_seed(0, 1, 0), case_seed(0, 1, 1));
        assert_ne!(case_seed(0, 1, 0), case_seed(0, 2, 0));
        assert_eq!(case_seed(5, 1, 3), case_seed(5, 1, 3));
    }
}
