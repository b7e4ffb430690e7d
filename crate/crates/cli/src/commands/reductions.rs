//! `check-reductions`: tying the gates recovers each member of the family at
//! the step, sequence, chunk and layer levels.

use gdr2_core::chunk::{forward_chunked, ForwardOptions, HeadInputs};
use gdr2_core::layer::{forward_layer, GateMode, LayerConfig, LayerKernel};
use gdr2_core::rules::{read_output, run_sequence_reference, HeadState, RuleKind, TokenGates};
use gdr2_core::synth::{random_state, unit_rows};
use gdr2_core::{Matrix, Rng};
use rayon::prelude::*;

use super::{case_seed, perturbed_params};
use crate::config::RunConfig;
use crate::error::Result;
use crate::report::{Bound, Report};

pub const TOL: f64 = 1e-12;

/// One edge of the lattice: the general rule on gates constrained so that it
/// must equal the special one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Edge {
    /// `b = w = β·1`.
    Gdr2ToKda,
    /// KDA with `α = a·1`.
    KdaToGdn,
    /// Gated DeltaNet with `α = 1`.
    GdnToDeltaNet,
    /// `b = 0`, `w = 1`, `α = a·1`.
    Gdr2ToMamba2,
}

impl Edge {
    pub const ALL: [Edge; 4] = [Edge::Gdr2ToKda, Edge::KdaToGdn, Edge::GdnToDeltaNet, Edge::Gdr2ToMamba2];

    pub fn rules(self) -> (RuleKind, RuleKind) {
        match self {
            Edge::Gdr2ToKda => (RuleKind::Gdr2, RuleKind::Kda),
            Edge::KdaToGdn => (RuleKind::Kda, RuleKind::GatedDeltaNet),
            Edge::GdnToDeltaNet => (RuleKind::GatedDeltaNet, RuleKind::DeltaNet),
            Edge::Gdr2ToMamba2 => (RuleKind::Gdr2, RuleKind::Mamba2),
        }
    }

    fn name(self) -> String {
        let (a, b) = self.rules();
        format!("{}->{}", a.name(), b.name())
    }

    /// Tolerance; the Mamba-2 edge has no erase term left, so the tokenwise
    /// levels are exact. The chunked form sums in a different order.
    fn bound(self, level: &str) -> Bound {
        match (self, level) {
            (Edge::Gdr2ToMamba2, "step" | "sequence") => Bound::Le(0.0),
            _ => Bound::Le(TOL),
        }
    }

    fn tokens(self, rng: &mut Rng, len: usize, d_k: usize, d_v: usize) -> Vec<TokenGates> {
        let q = unit_rows(rng, len, d_k);
        let k = unit_rows(rng, len, d_k);
        let v = rng.matrix(len, d_v, -1.0, 1.0);
        (0..len)
            .map(|t| {
                let (qt, kt, vt) = (q.row(t).to_vec(), k.row(t).to_vec(), v.row(t).to_vec());
                let beta = rng.uniform(0.0, 1.0);
                let scalar = rng.uniform(0.8, 1.0).ln();
                match self {
                    Edge::Gdr2ToKda => {
                        let g = rng.vector(d_k, 0.8, 1.0).into_iter().map(f64::ln).collect();
                        TokenGates::tied(qt, kt, vt, g, beta)
                    }
                    Edge::KdaToGdn => TokenGates::tied(qt, kt, vt, vec![scalar; d_k], beta),
                    Edge::GdnToDeltaNet => TokenGates::tied(qt, kt, vt, vec![0.0; d_k], beta),
                    Edge::Gdr2ToMamba2 => {
                        TokenGates::gdr2(qt, kt, vt, vec![scalar; d_k], vec![0.0; d_k], vec![1.0; d_v])
                    }
                }
            })
            .collect()
    }
}

/// The same tokens as row-stacked kernel inputs.
fn stack(tokens: &[TokenGates], neg_eig: bool) -> Result<HeadInputs> {
    let rows = |pick: fn(&TokenGates) -> &Vec<f64>| -> Result<Matrix> {
        let cols = pick(&tokens[0]).len();
        let data = tokens.iter().flat_map(|t| pick(t).iter().copied()).collect();
        Ok(Matrix::from_vec(tokens.len(), cols, data)?)
    };
    Ok(HeadInputs {
        q: rows(|t| &t.q)?,
        k: rows(|t| &t.k)?,
        v: rows(|t| &t.v)?,
        b: rows(|t| &t.b)?,
        w: rows(|t| &t.w)?,
        g: rows(|t| &t.g)?,
        neg_eig,
    })
}

fn run_diff(a: &gdr2_core::rules::ReferenceRun, b: &gdr2_core::rules::ReferenceRun) -> f64 {
    let states = a
        .states
        .iter()
        .zip(&b.states)
        .map(|(x, y)| x.s.max_abs_diff(&y.s))
        .fold(0.0, f64::max);
    states.max(a.outputs.max_abs_diff(&b.outputs))
}

/// `(level, max diff)` for one edge and seed.
fn edge_case(edge: Edge, seed: u64, len: usize, chunk: usize, d_k: usize, d_v: usize) -> Result<Vec<(&'static str, f64)>> {
    let mut rng = Rng::seed(seed);
    let (general, special) = edge.rules();
    let s0 = HeadState::new(random_state(&mut rng, d_k, d_v, 1.0));

    let one = edge.tokens(&mut rng, 1, d_k, d_v);
    let a = general.step(&s0, &one[0])?;
    let b = special.step(&s0, &one[0])?;
    let step = a
        .s
        .max_abs_diff(&b.s)
        .max(Matrix::column(&read_output(&a, &one[0].q)?).max_abs_diff(&Matrix::column(&read_output(&b, &one[0].q)?)));

    let tokens = edge.tokens(&mut rng, len, d_k, d_v);
    let ra = run_sequence_reference(general, &tokens, &s0)?;
    let rb = run_sequence_reference(special, &tokens, &s0)?;
    let sequence = run_diff(&ra, &rb);

    let x = stack(&tokens, false)?;
    let run = forward_chunked(&x, &s0.s, ForwardOptions::with_chunk_size(chunk))?;
    let last = &rb.final_state().expect("len ≥ 1").s;
    let chunked = run.outputs.max_abs_diff(&rb.outputs).max(run.final_state.max_abs_diff(last));
    Ok(vec![("step", step), ("sequence", sequence), ("chunk", chunked)])
}

fn layer_configs(cfg: &RunConfig) -> Vec<LayerConfig> {
    let mut out = Vec::new();
    for mode in [GateMode::Kda, GateMode::Gdn, GateMode::DeltaNet, GateMode::Mamba2] {
        let small = LayerConfig {
            d_model: 8,
            heads: 1,
            value_heads: 1,
            d_k: 4,
            d_v: 4,
            chunk_size: cfg.chunk.unwrap_or(16),
            gate_mode: mode,
            ..Default::default()
        };
        let grouped = LayerConfig {
            d_model: 12,
            heads: 2,
            value_heads: 4,
            d_k: 6,
            d_v: 5,
            conv_width: 3,
            chunk_size: cfg.chunk.unwrap_or(16),
            gate_mode: mode,
            ..Default::default()
        };
        out.extend([small, grouped]);
    }
    out
}

/// Widened erase range with every gate already in [0, 1] must not change a bit.
fn neg_eig_case(seed: u64, len: usize, chunk: usize, d_k: usize, d_v: usize) -> Result<Vec<(&'static str, f64)>> {
    let mut rng = Rng::seed(seed);
    let tokens = Edge::Gdr2ToKda.tokens(&mut rng, len, d_k, d_v);
    let untied: Vec<TokenGates> = tokens
        .into_iter()
        .map(|t| {
            let b = rng.vector(d_k, 0.0, 1.0);
            let w = rng.vector(d_v, 0.0, 1.0);
            TokenGates::gdr2(t.q, t.k, t.v, t.g, b, w)
        })
        .collect();
    let widened: Vec<TokenGates> = untied.iter().cloned().map(|t| t.with_neg_eig(true)).collect();
    let s0 = HeadState::new(random_state(&mut rng, d_k, d_v, 1.0));
    let a = run_sequence_reference(RuleKind::Gdr2, &untied, &s0)?;
    let b = run_sequence_reference(RuleKind::Gdr2, &widened, &s0)?;
    let opts = ForwardOptions::with_chunk_size(chunk);
    let ca = forward_chunked(&stack(&untied, false)?, &s0.s, opts)?;
    let cb = forward_chunked(&stack(&widened, true)?, &s0.s, opts)?;
    let chunked = ca.outputs.max_abs_diff(&cb.outputs).max(ca.final_state.max_abs_diff(&cb.final_state));
    Ok(vec![("sequence", run_diff(&a, &b)), ("chunk", chunked)])
}

pub fn run(cfg: &RunConfig) -> Result<Report> {
    let len = cfg.len.unwrap_or(64);
    let chunk = cfg.chunk.unwrap_or(16);
    let dims: Vec<(usize, usize)> = match (cfg.d_k, cfg.d_v) {
        (None, None) => vec![(4, 3), (16, 16), (7, 12)],
        (k, v) => vec![(k.unwrap_or(16), v.unwrap_or(16))],
    };
    let mut jobs = Vec::new();
    for edge in Edge::ALL {
        for &(d_k, d_v) in &dims {
            jobs.push((edge, d_k, d_v));
        }
    }
    let results: Vec<Result<Vec<(&str, f64)>>> = jobs
        .par_iter()
        .enumerate()
        .map(|(i, &(edge, d_k, d_v))| edge_case(edge, case_seed(cfg.seed, 21, i), len, chunk, d_k, d_v))
        .collect();
    let mut report = Report::new();
    for (&(edge, d_k, d_v), r) in jobs.iter().zip(results) {
        for (level, diff) in r? {
            let id = format!("{},{level},L={len},C={chunk},d_k={d_k},d_v={d_v}", edge.name());
            report.check("reductions", &id, "max_abs_diff", diff, edge.bound(level));
        }
    }

    let configs = layer_configs(cfg);
    let layer: Vec<Result<f64>> = configs
        .par_iter()
        .enumerate()
        .map(|(i, c)| {
            let mut rng = Rng::seed(case_seed(cfg.seed, 22, i));
            let p = perturbed_params(*c, &mut rng)?;
            let x = rng.matrix(len, c.d_model, -1.0, 1.0);
            let engine = forward_layer(&p, &x, LayerKernel::Chunked)?;
            let rule = forward_layer(&p, &x, LayerKernel::Tokenwise)?;
            Ok(engine.y.max_abs_diff(&rule.y))
        })
        .collect();
    for (c, r) in configs.iter().zip(layer) {
        let id = format!(
            "gdr2->{},layer,L={len},C={},H={},H_v={},d_k={},d_v={}",
            c.gate_mode.rule().name(),
            c.chunk_size,
            c.heads,
            c.value_heads,
            c.d_k,
            c.d_v
        );
        report.check("reductions", &id, "max_abs_diff", r?, Bound::Le(TOL));
    }

    for (i, &(d_k, d_v)) in dims.iter().enumerate() {
        for (level, diff) in neg_eig_case(case_seed(cfg.seed, 23, i), len, chunk, d_k, d_v)? {
            let id = format!("neg_eig-clamped,{level},L={len},C={chunk},d_k={d_k},d_v={d_v}");
            report.check("reductions", &id, "max_abs_diff", diff, Bound::Le(0.0));
        }
    }
    Ok(report)
}
