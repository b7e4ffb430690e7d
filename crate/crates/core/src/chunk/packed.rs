use crate::chunk::backward::{backward_chunked, BackwardOptions, ChunkGrads};
use crate::chunk::forward::{forward_chunked, ChunkedForward, ForwardOptions};
use crate::chunk::HeadInputs;
use crate::error::{Error, Result};
use crate::math::Matrix;
use crate::real::Real;

/// Variable-length sequences packed back to back along the token axis.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedBatch<T = f64> {
    /// One entry per head, each covering all packed tokens.
    pub heads: Vec<HeadInputs<T>>,
    /// Sequence `n` owns tokens `cu_seqlens[n]..cu_seqlens[n + 1]`.
    pub cu_seqlens: Vec<usize>,
    /// Optional start states, indexed `[sequence][head]`; zeros otherwise.
    pub initial_states: Option<Vec<Vec<Matrix<T>>>>,
}

impl<T: Real> PackedBatch<T> {
    pub fn new(heads: Vec<HeadInputs<T>>, cu_seqlens: Vec<usize>) -> Result<Self> {
        let batch = PackedBatch {
            heads,
            cu_seqlens,
            initial_states: None,
        };
        batch.validate()?;
        Ok(batch)
    }

    pub fn with_initial_states(mut self, states: Vec<Vec<Matrix<T>>>) -> Result<Self> {
        self.initial_states = Some(states);
        self.validate()?;
        Ok(self)
    }

    pub fn num_sequences(&self) -> usize {
        self.cu_seqlens.len().saturating_sub(1)
    }

    pub fn total_tokens(&self) -> usize {
        self.cu_seqlens.last().copied().unwrap_or(0)
    }

    /// `(start, end)` of every sequence.
    pub fn segments(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.cu_seqlens.windows(2).map(|w| (w[0], w[1]))
    }

    pub fn validate(&self) -> Result<()> {
        const OP: &str = "PackedBatch::validate";
        let cu = &self.cu_seqlens;
        if cu.len() < 2 || cu[0] != 0 {
            return Err(Error::contract(OP, "offsets must start at 0 and describe at least one sequence"));
        }
        if let Some(n) = cu.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::contract(
                OP,
                format!("sequence {n} is empty or offsets decrease ({} -> {})", cu[n], cu[n + 1]),
            ));
        }
        if self.heads.is_empty() {
            return Err(Error::contract(OP, "no heads"));
        }
        for (h, head) in self.heads.iter().enumerate() {
            if head.len() != self.total_tokens() {
                return Err(Error::contract(
                    OP,
                    format!("head {h} has {} tokens, offsets end at {}", head.len(), self.total_tokens()),
                ));
            }
            head.validate()?;
        }
        if let Some(states) = &self.initial_states {
            if states.len() != self.num_sequences() || states.iter().any(|s| s.len() != self.heads.len()) {
                return Err(Error::dim(OP, "initial states must be indexed [sequence][head]"));
            }
            for per_head in states {
                for (s, head) in per_head.iter().zip(&self.heads) {
                    if s.shape() != (head.d_k(), head.d_v()) {
                        return Err(Error::dim(OP, "initial state shape differs from its head"));
                    }
                }
            }
        }
        Ok(())
    }

    fn initial_state(&self, seq: usize, head: usize) -> Matrix<T> {
        match &self.initial_states {
            Some(s) => s[seq][head].clone(),
            None => Matrix::zeros(self.heads[head].d_k(), self.heads[head].d_v()),
        }
    }
}

/// Packed outputs plus the per-sequence runs the backward needs.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedForward<T = f64> {
    /// One `total × d_v` matrix per head.
    pub outputs: Vec<Matrix<T>>,
    /// `[sequence][head]`
    pub final_states: Vec<Vec<Matrix<T>>>,
    /// `[sequence][head]`
    pub runs: Vec<Vec<ChunkedForward<T>>>,
}

/// Runs every `(sequence, head)` pair independently; chunking restarts at each
/// sequence boundary.
pub fn forward_packed<T: Real>(batch: &PackedBatch<T>, options: ForwardOptions) -> Result<PackedForward<T>> {
    batch.validate()?;
    let total = batch.total_tokens();
    let mut outputs: Vec<Matrix<T>> = batch.heads.iter().map(|h| Matrix::zeros(total, h.d_v())).collect();
    let mut final_states = Vec::with_capacity(batch.num_sequences());
    let mut runs = Vec::with_capacity(batch.num_sequences());
    for (seq, (start, end)) in batch.segments().enumerate() {
        let mut seq_states = Vec::with_capacity(batch.heads.len());
        let mut seq_runs = Vec::with_capacity(batch.heads.len());
        for (h, head) in batch.heads.iter().enumerate() {
            let run = forward_chunked(&head.slice(start, end), &batch.initial_state(seq, h), options)?;
            outputs[h].set_rows(start, &run.outputs);
            seq_states.push(run.final_state.clone());
            seq_runs.push(run);
        }
        final_states.push(seq_states);
        runs.push(seq_runs);
    }
    Ok(PackedForward {
        outputs,
        final_states,
        runs,
    })
}

/// Gradients indexed `[sequence][head]`; `d_out` holds one `total × d_v`
/// matrix per head and `d_final` (zeros if absent) is `[sequence][head]`.
pub fn backward_packed<T: Real>(
    batch: &PackedBatch<T>,
    forward: &PackedForward<T>,
    d_out: &[Matrix<T>],
    d_final: Option<&[Vec<Matrix<T>>]>,
    options: BackwardOptions,
) -> Result<Vec<Vec<ChunkGrads<T>>>> {
    const OP: &str = "backward_packed";
    if d_out.len() != batch.heads.len() || forward.runs.len() != batch.num_sequences() {
        return Err(Error::dim(OP, "upstream gradients or runs do not match the batch"));
    }
    if let Some(df) = d_final {
        if df.len() != batch.num_sequences() || df.iter().any(|s| s.len() != batch.heads.len()) {
            return Err(Error::dim(OP, "final-state gradients must be indexed [sequence][head]"));
        }
    }
    let mut out = Vec::with_capacity(batch.num_sequences());
    for (seq, (start, end)) in batch.segments().enumerate() {
        let mut per_head = Vec::with_capacity(batch.heads.len());
        for (h, head) in batch.heads.iter().enumerate() {
            let ds = match d_final {
                Some(df) => df[seq][h].clone(),
                None => Matrix::zeros(head.d_k(), head.d_v()),
            };
            per_head.push(backward_chunked(
                &head.slice(start, end),
                &forward.runs[seq][h],
                &d_out[h].slice_rows(start, end),
                &ds,
                options,
            )?);
        }
        out.push(per_head);
    }
    Ok(out)
}
