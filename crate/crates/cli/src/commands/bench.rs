//! `bench`: tokenwise recurrence against the chunked engine, serial, one head.
//!
//! Timings are the fastest of `reps` runs. The forward series runs in the
//! configured precision (binary32 by default); the forward+backward series
//! runs in binary64, the only precision of the tokenwise backward.

use std::hint::black_box;
use std::time::Instant;

use gdr2_core::chunk::{backward_chunked, forward_chunked, BackwardOptions, ForwardOptions, HeadInputs, Retention};
use gdr2_core::rules::{backward_sequence_reference, read_output, run_sequence_reference, step_gdr2, RuleKind};
use gdr2_core::synth::{head_inputs, HeadSpec};
use gdr2_core::{Matrix, Precision, Real, Rng};

use super::case_seed;
use crate::config::RunConfig;
use crate::error::Result;
use crate::report::{Bound, BenchRow, Report};

pub const SPEEDUP_MIN: f64 = 5.0;
pub const SPEEDUP_LEN: usize = 4096;
pub const SPEEDUP_CHUNK: usize = 64;
/// Head dimension of the default shapes.
pub const HEAD_DIM: usize = 64;
/// Longest sequence of the forward+backward series; the tokenwise backward
/// keeps every prefix state.
const FWD_BWD_MAX_LEN: usize = 4096;

fn best_of(reps: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    let mut best = f64::INFINITY;
    for _ in 0..reps {
        let start = Instant::now();
        f()?;
        best = best.min(start.elapsed().as_secs_f64());
    }
    Ok(best)
}

/// Streaming recurrence: one state update and one read per token.
fn tokenwise_forward<T: Real>(x: &HeadInputs<T>) -> Result<Matrix<T>> {
    let tokens = x.tokens();
    let mut state = x.zero_state();
    let mut out = Matrix::zeros(x.len(), x.d_v());
    for (t, g) in tokens.iter().enumerate() {
        let (next, _) = step_gdr2(&state, g)?;
        out.set_row(t, &read_output(&next, &g.q)?);
        state = next;
    }
    Ok(out)
}

fn chunked_forward<T: Real>(x: &HeadInputs<T>, chunk: usize) -> Result<Matrix<T>> {
    let opts = ForwardOptions {
        chunk_size: chunk,
        retention: Retention::Recompute,
        ..Default::default()
    };
    let s0 = Matrix::zeros(x.d_k(), x.d_v());
    Ok(forward_chunked(x, &s0, opts)?.outputs)
}

fn row(engine: &str, pass: &str, precision: Precision, len: usize, chunk: Option<usize>, d: (usize, usize), secs: f64) -> BenchRow {
    BenchRow {
        engine: engine.to_string(),
        pass: pass.to_string(),
        precision: precision.to_string(),
        len,
        chunk,
        d_k: d.0,
        d_v: d.1,
        seconds: secs,
        tokens_per_second: len as f64 / secs,
    }
}

fn forward_series<T: Real>(x: &HeadInputs<f64>, chunks: &[usize], reps: usize) -> Result<Vec<BenchRow>> {
    let x = x.cast::<T>();
    let d = (x.d_k(), x.d_v());
    let len = x.len();
    let mut rows = Vec::new();
    let secs = best_of(reps, || {
        black_box(tokenwise_forward(&x)?);
        Ok(())
    })?;
    rows.push(row("tokenwise", "fwd", T::PRECISION, len, None, d, secs));
    for &c in chunks {
        let secs = best_of(reps, || {
            black_box(chunked_forward(&x, c)?);
            Ok(())
        })?;
        rows.push(row("chunked", "fwd", T::PRECISION, len, Some(c), d, secs));
    }
    Ok(rows)
}

fn fwd_bwd_series(x: &HeadInputs<f64>, chunks: &[usize], reps: usize) -> Result<Vec<BenchRow>> {
    let d = (x.d_k(), x.d_v());
    let len = x.len();
    let s0 = x.zero_state();
    let mut rows = Vec::new();
    let secs = best_of(reps, || {
        let tokens = x.tokens();
        let run = run_sequence_reference(RuleKind::Gdr2, &tokens, &s0)?;
        let last = run.final_state().expect("len ≥ 1").s.clone();
        black_box(backward_sequence_reference(&tokens, &s0, &run, &run.outputs, &last)?);
        Ok(())
    })?;
    rows.push(row("tokenwise", "fwd+bwd", Precision::Binary64, len, None, d, secs));
    for &c in chunks {
        let secs = best_of(reps, || {
            let opts = ForwardOptions {
                chunk_size: c,
                retention: Retention::Recompute,
                ..Default::default()
            };
            let fwd = forward_chunked(x, &s0.s, opts)?;
            black_box(backward_chunked(x, &fwd, &fwd.outputs, &fwd.final_state, BackwardOptions::default())?);
            Ok(())
        })?;
        rows.push(row("chunked", "fwd+bwd", Precision::Binary64, len, Some(c), d, secs));
    }
    Ok(rows)
}

fn seconds_of(rows: &[BenchRow], engine: &str, pass: &str, len: usize, chunk: Option<usize>) -> Option<f64> {
    rows.iter()
        .find(|r| r.engine == engine && r.pass == pass && r.len == len && r.chunk == chunk)
        .map(|r| r.seconds)
}

/// Runs the series and builds the report. The speedup at L = 4096, C = 64 is
/// asserted whenever that point was measured in binary32.
pub fn run(cfg: &RunConfig) -> Result<(Report, Vec<BenchRow>)> {
    let lens = RunConfig::sweep(cfg.len, &[1024, 4096, 16384]);
    let chunks = RunConfig::sweep(cfg.chunk, &[16, 64, 128]);
    let d_k = cfg.d_k.unwrap_or(HEAD_DIM);
    let d_v = cfg.d_v.unwrap_or(HEAD_DIM);
    let precision = cfg.precision.unwrap_or(Precision::Binary32);
    let mut rows = Vec::new();
    for (i, &len) in lens.iter().enumerate() {
        let mut rng = Rng::seed(case_seed(cfg.seed, 31, i));
        let x = head_inputs(&mut rng, HeadSpec::new(len, d_k, d_v));
        rows.extend(match precision {
            Precision::Binary32 => forward_series::<f32>(&x, &chunks, cfg.reps)?,
            Precision::Binary64 => forward_series::<f64>(&x, &chunks, cfg.reps)?,
        });
        if len <= FWD_BWD_MAX_LEN {
            rows.extend(fwd_bwd_series(&x, &chunks, cfg.reps)?);
        }
    }

    let mut report = Report::new();
    for r in &rows {
        let id = format!(
            "{},{},{},L={},C={},d_k={},d_v={}",
            r.engine,
            r.pass,
            r.precision,
            r.len,
            r.chunk.map_or_else(|| "-".to_string(), |c| c.to_string()),
            r.d_k,
            r.d_v
        );
        report.info("bench", &id, "tokens_per_second", r.tokens_per_second);
    }
    for pass in ["fwd", "fwd+bwd"] {
        for &len in &lens {
            let Some(base) = seconds_of(&rows, "tokenwise", pass, len, None) else {
                continue;
            };
            for &c in &chunks {
                let Some(secs) = seconds_of(&rows, "chunked", pass, len, Some(c)) else {
                    continue;
                };
                let speedup = base / secs;
                let id = format!("{pass},L={len},C={c},d_k={d_k},d_v={d_v}");
                let asserted = pass == "fwd"
                    && precision == Precision::Binary32
                    && len == SPEEDUP_LEN
                    && c == SPEEDUP_CHUNK;
                if asserted {
                    report.check("throughput", &id, "speedup", speedup, Bound::Ge(SPEEDUP_MIN));
                } else {
                    report.info("throughput", &id, "speedup", speedup);
                }
            }
        }
    }
    Ok((report, rows))
}
