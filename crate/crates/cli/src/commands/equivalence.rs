//! `check-equivalence`: chunked forward against the tokenwise recurrence,
//! packed against per-sequence runs, and layer decoding against the chunked
//! layer.

use gdr2_core::chunk::{forward_chunked, forward_packed, ForwardOptions, HeadInputs, PackedBatch};
use gdr2_core::layer::{decode_sequence, forward_layer, forward_layer_from, DecodeState, GateMode, LayerConfig, LayerKernel};
use gdr2_core::rules::RuleKind;
use gdr2_core::synth::{head_inputs, random_state, HeadSpec};
use gdr2_core::{Matrix, Precision, Real, Rng};
use rayon::prelude::*;

use super::{case_seed, perturbed_params, ragged_offsets, tokenwise};
use crate::config::RunConfig;
use crate::error::Result;
use crate::report::{Bound, Report};

pub const TOL_F64: f64 = 1e-10;
pub const TOL_F64_C1: f64 = 1e-14;
pub const TOL_F32: f64 = 5e-3;
pub const TOL_VARLEN: f64 = 1e-14;
pub const TOL_DECODE: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Case {
    pub len: usize,
    pub chunk: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub heads: usize,
    pub random_s0: bool,
    pub packed: bool,
    pub precision: Precision,
    pub neg_eig: bool,
}

impl Case {
    pub fn id(&self) -> String {
        format!(
            "L={},C={},d_k={},d_v={},H={},s0={},{},{}",
            self.len,
            self.chunk,
            self.d_k,
            self.d_v,
            self.heads,
            if self.random_s0 { "rand" } else { "zero" },
            if self.packed { "packed" } else { "unpacked" },
            self.precision
        )
    }

    pub fn tolerance(&self) -> f64 {
        match (self.precision, self.chunk) {
            (Precision::Binary32, _) => TOL_F32,
            (Precision::Binary64, 1) => TOL_F64_C1,
            (Precision::Binary64, _) => TOL_F64,
        }
    }
}

/// The sweep, narrowed by any dimension the config pins.
pub fn cases(cfg: &RunConfig) -> Vec<Case> {
    let mut out = Vec::new();
    for &precision in &cfg.precisions() {
        for len in RunConfig::sweep(cfg.len, &[1, 33, 256]) {
            for chunk in RunConfig::sweep(cfg.chunk, &[1, 2, 3, 16, 64]) {
                for d_k in RunConfig::sweep(cfg.d_k, &[4, 16, 64]) {
                    for d_v in RunConfig::sweep(cfg.d_v, &[4, 16, 64]) {
                        for heads in RunConfig::sweep(cfg.heads, &[1, 2]) {
                            for random_s0 in [false, true] {
                                for packed in [false, true] {
                                    out.push(Case {
                                        len,
                                        chunk,
                                        d_k,
                                        d_v,
                                        heads,
                                        random_s0,
                                        packed,
                                        precision,
                                        neg_eig: cfg.neg_eig,
                                    });
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

struct Instance {
    heads: Vec<HeadInputs<f64>>,
    cu: Vec<usize>,
    /// `[sequence][head]`
    s0: Vec<Vec<Matrix<f64>>>,
}

fn instance(case: &Case, seed: u64) -> Instance {
    let mut rng = Rng::seed(seed);
    let spec = HeadSpec::new(case.len, case.d_k, case.d_v).neg_eig(case.neg_eig);
    let heads: Vec<_> = (0..case.heads).map(|_| head_inputs(&mut rng, spec)).collect();
    let cu = if case.packed { ragged_offsets(&mut rng, case.len) } else { vec![0, case.len] };
    let s0 = (0..cu.len() - 1)
        .map(|_| {
            (0..case.heads)
                .map(|_| {
                    if case.random_s0 {
                        random_state(&mut rng, case.d_k, case.d_v, 1.0)
                    } else {
                        Matrix::zeros(case.d_k, case.d_v)
                    }
                })
                .collect()
        })
        .collect();
    Instance { heads, cu, s0 }
}

/// Max |diff| of outputs and final states against the binary64 recurrence run
/// on the engine's own (rounded) inputs.
fn compare<T: Real>(inst: &Instance, chunk: usize, packed: bool) -> Result<f64> {
    let opts = ForwardOptions::with_chunk_size(chunk);
    let heads: Vec<HeadInputs<T>> = inst.heads.iter().map(|h| h.cast()).collect();
    let s0: Vec<Vec<Matrix<T>>> = inst.s0.iter().map(|s| s.iter().map(|m| m.cast()).collect()).collect();
    let (outputs, finals): (Vec<Matrix<T>>, Vec<Vec<Matrix<T>>>) = if packed {
        let batch = PackedBatch::new(heads.clone(), inst.cu.clone())?.with_initial_states(s0.clone())?;
        let run = forward_packed(&batch, opts)?;
        (run.outputs, run.final_states)
    } else {
        let mut outs = Vec::new();
        let mut fin = Vec::new();
        for (h, x) in heads.iter().enumerate() {
            let run = forward_chunked(x, &s0[0][h], opts)?;
            outs.push(run.outputs);
            fin.push(run.final_state);
        }
        (outs, vec![fin])
    };
    let mut err: f64 = 0.0;
    for (seq, w) in inst.cu.windows(2).enumerate() {
        for (h, x) in heads.iter().enumerate() {
            let x64 = x.cast::<f64>().slice(w[0], w[1]);
            let (o, s) = tokenwise(RuleKind::Gdr2, &x64, &s0[seq][h].cast())?;
            err = err
                .max(outputs[h].slice_rows(w[0], w[1]).cast::<f64>().max_abs_diff(&o))
                .max(finals[seq][h].cast::<f64>().max_abs_diff(&s));
        }
    }
    Ok(err)
}

pub fn run_case(case: &Case, seed: u64) -> Result<f64> {
    let inst = instance(case, seed);
    match case.precision {
        Precision::Binary64 => compare::<f64>(&inst, case.chunk, case.packed),
        Precision::Binary32 => compare::<f32>(&inst, case.chunk, case.packed),
    }
}

fn oracle_suite(cfg: &RunConfig) -> Result<Report> {
    let cases = cases(cfg);
    let errs: Vec<Result<f64>> = cases
        .par_iter()
        .enumerate()
        .map(|(i, c)| run_case(c, case_seed(cfg.seed, 1, i)))
        .collect();
    let mut report = Report::new();
    for (c, err) in cases.iter().zip(errs) {
        report.check("equivalence", &c.id(), "max_abs_diff", err?, Bound::Le(c.tolerance()));
    }
    Ok(report)
}

/// Packed execution against each sequence run alone, binary64.
fn varlen_suite(cfg: &RunConfig) -> Result<Report> {
    let shapes: [(usize, usize, usize, usize); 6] =
        [(4, 3, 1, 2), (16, 16, 2, 16), (5, 7, 2, 3), (64, 64, 1, 64), (16, 4, 3, 1), (8, 8, 2, 7)];
    let results: Vec<Result<(String, f64)>> = shapes
        .par_iter()
        .enumerate()
        .map(|(i, &(d_k, d_v, heads, chunk))| {
            let mut rng = Rng::seed(case_seed(cfg.seed, 2, i));
            let lens: Vec<usize> = (0..2 + rng.below(4)).map(|_| 1 + rng.below(90)).collect();
            let mut cu = vec![0];
            for l in &lens {
                cu.push(cu.last().unwrap() + l);
            }
            let total = *cu.last().unwrap();
            let spec = HeadSpec::new(total, d_k, d_v).neg_eig(cfg.neg_eig);
            let xs: Vec<_> = (0..heads).map(|_| head_inputs(&mut rng, spec)).collect();
            let s0: Vec<Vec<Matrix>> = lens
                .iter()
                .map(|_| (0..heads).map(|_| random_state(&mut rng, d_k, d_v, 1.0)).collect())
                .collect();
            let opts = ForwardOptions::with_chunk_size(chunk);
            let batch = PackedBatch::new(xs.clone(), cu.clone())?.with_initial_states(s0.clone())?;
            let packed = forward_packed(&batch, opts)?;
            let mut err: f64 = 0.0;
            for (n, w) in cu.windows(2).enumerate() {
                for (h, x) in xs.iter().enumerate() {
                    let alone = forward_chunked(&x.slice(w[0], w[1]), &s0[n][h], opts)?;
                    err = err
                        .max(packed.outputs[h].slice_rows(w[0], w[1]).max_abs_diff(&alone.outputs))
                        .max(packed.final_states[n][h].max_abs_diff(&alone.final_state));
                }
            }
            let id = format!("lens={lens:?},d_k={d_k},d_v={d_v},H={heads},C={chunk}").replace(' ', "");
            Ok((id, err))
        })
        .collect();
    let mut report = Report::new();
    for r in results {
        let (id, err) = r?;
        report.check("varlen", &id, "max_abs_diff", err, Bound::Le(TOL_VARLEN));
    }
    Ok(report)
}

fn decode_configs(cfg: &RunConfig) -> Result<Vec<LayerConfig>> {
    let mut out = Vec::new();
    for mode in GateMode::ALL {
        let plain = LayerConfig {
            gate_mode: mode,
            chunk_size: 16,
            ..Default::default()
        };
        let grouped = LayerConfig {
            d_model: 12,
            heads: 2,
            value_heads: 4,
            d_k: 6,
            d_v: 5,
            conv_width: 3,
            chunk_size: 7,
            gate_mode: mode,
            ..Default::default()
        };
        let mut local = cfg.clone();
        local.gate_mode = None;
        local.neg_eig &= mode == GateMode::Untied;
        for base in [plain, grouped] {
            out.push(local.layer_config(base)?);
        }
    }
    Ok(out)
}

/// Max |diff| over outputs, head states and conv tails of two layer states.
fn state_diff(a: &DecodeState<f64>, b: &DecodeState<f64>) -> f64 {
    let heads = a
        .heads
        .iter()
        .zip(&b.heads)
        .map(|(x, y)| x.s.max_abs_diff(&y.s))
        .fold(0.0, f64::max);
    heads
        .max(a.conv_q.max_abs_diff(&b.conv_q))
        .max(a.conv_k.max_abs_diff(&b.conv_k))
        .max(a.conv_v.max_abs_diff(&b.conv_v))
}

/// One 64-token stream: chunked layer vs token-by-token decoding, and a
/// chunked prefix continued by decoding.
fn decode_case(config: LayerConfig, seed: u64, len: usize) -> Result<f64> {
    let mut rng = Rng::seed(seed);
    let p = perturbed_params(config, &mut rng)?;
    let x = rng.matrix(len, config.d_model, -1.0, 1.0);
    let chunked = forward_layer(&p, &x, LayerKernel::Chunked)?;
    let (y, state) = decode_sequence(&p, &x, &DecodeState::fresh(&config))?;
    let mut err = chunked.y.max_abs_diff(&y).max(state_diff(&chunked.state, &state));

    let split = len / 3;
    let head = forward_layer(&p, &x.slice_rows(0, split), LayerKernel::Chunked)?;
    let (tail_y, tail_state) = decode_sequence(&p, &x.slice_rows(split, len), &head.state)?;
    err = err
        .max(tail_y.max_abs_diff(&chunked.y.slice_rows(split, len)))
        .max(state_diff(&tail_state, &chunked.state));

    let resumed = forward_layer_from(&p, &x.slice_rows(split, len), &head.state, LayerKernel::Chunked)?;
    err = err.max(resumed.y.max_abs_diff(&chunked.y.slice_rows(split, len)));
    Ok(err)
}

fn decode_suite(cfg: &RunConfig) -> Result<Report> {
    let configs = decode_configs(cfg)?;
    let len = 64;
    let errs: Vec<Result<f64>> = configs
        .par_iter()
        .enumerate()
        .map(|(i, c)| decode_case(*c, case_seed(cfg.seed, 3, i), len))
        .collect();
    let mut report = Report::new();
    for (c, err) in configs.iter().zip(errs) {
        let id = format!(
            "{},L={len},d_model={},H={},H_v={},d_k={},d_v={},width={},C={}",
            c.gate_mode, c.d_model, c.heads, c.value_heads, c.d_k, c.d_v, c.conv_width, c.chunk_size
        );
        report.check("decode", &id, "max_abs_diff", err?, Bound::Le(TOL_DECODE));
    }
    Ok(report)
}

pub fn run(cfg: &RunConfig) -> Result<Report> {
    let mut report = oracle_suite(cfg)?;
    report.extend(varlen_suite(cfg)?);
    report.extend(decode_suite(cfg)?);
    Ok(report)
}
