//! `check-gradients`: the analytic backward against central differences of the
//! tokenwise recurrence, chunk-size invariance, layer-level differences, the
//! scalar post-scaled negative control, the tied-β gradient and the
//! one-step minimizer property. Binary64 only.

use gdr2_core::chunk::{
    backward_chunked, forward_chunked, tied_beta_gradient, BackwardOptions, ChunkGrads, ForwardOptions, HeadInputs,
    WyAccumulation,
};
use gdr2_core::gradcheck::{central_difference, central_difference_matrix, half_square_loss, rel_error_matrix};
use gdr2_core::layer::{backward_layer, forward_layer, GateMode, LayerConfig, LayerKernel, LayerParams};
use gdr2_core::rules::{online_objective_gradient, step_gdr2, HeadState, RuleKind, TokenGates};
use gdr2_core::synth::{head_inputs, random_state, tie_gates, unit_rows, HeadSpec};
use gdr2_core::{Matrix, Precision, Rng};
use rayon::prelude::*;

use super::{case_seed, perturbed_params, tokenwise};
use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::report::{Bound, Report};

pub const TOL_KERNEL: f64 = 1e-6;
pub const TOL_LAYER: f64 = 1e-5;
pub const TOL_INVARIANCE: f64 = 1e-12;
pub const TOL_TIED_BETA: f64 = 1e-8;
pub const TOL_MINIMIZER: f64 = 1e-12;
/// The negative control must miss the finite differences by at least this.
pub const CONTROL_GAP: f64 = 1e-3;

const FIELDS: [&str; 7] = ["q", "k", "v", "b", "w", "g", "s0"];

/// Keeps every gate 1e-3 inside its range so central differences never
/// leave the contract.
fn with_margins(mut x: HeadInputs) -> HeadInputs {
    x.b = x.b.map(|b| 1e-3 + b * 0.998);
    x.w = x.w.map(|w| 1e-3 + w * 0.998);
    x.g = x.g.map(|g| g.min(-1e-3));
    x
}

fn field<'a>(x: &'a mut HeadInputs, s0: &'a mut Matrix, name: &str) -> &'a mut Matrix {
    match name {
        "q" => &mut x.q,
        "k" => &mut x.k,
        "v" => &mut x.v,
        "b" => &mut x.b,
        "w" => &mut x.w,
        "g" => &mut x.g,
        _ => s0,
    }
}

fn grad<'a>(g: &'a ChunkGrads, name: &str) -> &'a Matrix {
    match name {
        "q" => &g.dq,
        "k" => &g.dk,
        "v" => &g.dv,
        "b" => &g.db,
        "w" => &g.dw,
        "g" => &g.dg,
        _ => &g.ds0,
    }
}

fn tokenwise_loss(x: &HeadInputs, s0: &Matrix) -> f64 {
    let (o, s) = tokenwise(RuleKind::Gdr2, x, s0).expect("perturbed inputs stay in contract");
    half_square_loss(&o, &s)
}

/// Central differences of `½‖O‖² + ½‖S_L‖²` for every input tensor.
fn fd_grads(x: &HeadInputs, s0: &Matrix) -> Vec<Matrix> {
    FIELDS
        .iter()
        .map(|&name| {
            let (mut xc, mut sc) = (x.clone(), s0.clone());
            let base = field(&mut xc, &mut sc, name).clone();
            central_difference_matrix(&base, |m| {
                *field(&mut xc, &mut sc, name) = m.clone();
                tokenwise_loss(&xc, &sc)
            })
        })
        .collect()
}

fn chunked_grads(x: &HeadInputs, s0: &Matrix, chunk: usize, wy: WyAccumulation) -> Result<ChunkGrads> {
    let fwd = forward_chunked(x, s0, ForwardOptions::with_chunk_size(chunk))?;
    Ok(backward_chunked(x, &fwd, &fwd.outputs, &fwd.final_state, BackwardOptions { wy })?)
}

#[derive(Debug, Clone, Copy)]
struct KernelCase {
    len: usize,
    d_k: usize,
    d_v: usize,
    chunk: usize,
    random_s0: bool,
    neg_eig: bool,
}

impl KernelCase {
    fn id(&self) -> String {
        format!(
            "L={},d_k={},d_v={},C={},s0={}{}",
            self.len,
            self.d_k,
            self.d_v,
            self.chunk,
            if self.random_s0 { "rand" } else { "zero" },
            if self.neg_eig { ",neg_eig" } else { "" }
        )
    }

    fn instance(&self, seed: u64) -> (HeadInputs, Matrix) {
        let mut rng = Rng::seed(seed);
        let spec = HeadSpec::new(self.len, self.d_k, self.d_v).neg_eig(self.neg_eig);
        let x = with_margins(head_inputs(&mut rng, spec));
        let s0 = if self.random_s0 {
            random_state(&mut rng, self.d_k, self.d_v, 0.5)
        } else {
            Matrix::zeros(self.d_k, self.d_v)
        };
        (x, s0)
    }
}

fn kernel_cases(cfg: &RunConfig) -> Vec<KernelCase> {
    let lens = RunConfig::sweep(cfg.len.map(|l| l.min(33)), &[4, 12, 33]);
    let dims = [(3, 3), (3, 4), (3, 8), (4, 3), (4, 4), (4, 8), (8, 3), (8, 4), (8, 8)];
    let chunks = RunConfig::sweep(cfg.chunk, &[1, 3, 4, 16, 64]);
    let mut out = Vec::new();
    let mut i = 0;
    for &len in &lens {
        for &(d_k, d_v) in &dims {
            let d_k = cfg.d_k.unwrap_or(d_k);
            let d_v = cfg.d_v.unwrap_or(d_v);
            out.push(KernelCase {
                len,
                d_k,
                d_v,
                chunk: chunks[i % chunks.len()],
                random_s0: i % 3 != 0,
                neg_eig: cfg.neg_eig || i % 5 == 4,
            });
            i += 1;
        }
    }
    out
}

fn kernel_suite(cfg: &RunConfig) -> Result<Report> {
    let cases = kernel_cases(cfg);
    let results: Vec<Result<Vec<f64>>> = cases
        .par_iter()
        .enumerate()
        .map(|(i, c)| {
            let (x, s0) = c.instance(case_seed(cfg.seed, 11, i));
            let analytic = chunked_grads(&x, &s0, c.chunk, WyAccumulation::GateAware)?;
            let fd = fd_grads(&x, &s0);
            Ok(FIELDS
                .iter()
                .zip(&fd)
                .map(|(name, f)| rel_error_matrix(grad(&analytic, name), f))
                .collect())
        })
        .collect();
    let mut report = Report::new();
    for (c, errs) in cases.iter().zip(results) {
        for (name, err) in FIELDS.iter().zip(errs?) {
            report.check("gradients", &c.id(), &format!("rel_err_d{name}"), err, Bound::Le(TOL_KERNEL));
        }
    }
    Ok(report)
}

/// Gradients under C ∈ {1, 2, 7, 16} against C = 64 on sequences spanning
/// several 64-token chunks.
fn invariance_suite(cfg: &RunConfig) -> Result<Report> {
    let shapes = [(70, 4, 3), (130, 8, 8), (64, 5, 2), (97, 16, 16)];
    let results: Vec<Result<Vec<(usize, f64)>>> = shapes
        .par_iter()
        .enumerate()
        .map(|(i, &(len, d_k, d_v))| {
            let mut rng = Rng::seed(case_seed(cfg.seed, 12, i));
            let x = with_margins(head_inputs(&mut rng, HeadSpec::new(len, d_k, d_v).neg_eig(cfg.neg_eig)));
            let s0 = random_state(&mut rng, d_k, d_v, 0.5);
            let reference = chunked_grads(&x, &s0, 64, WyAccumulation::GateAware)?;
            [1, 2, 7, 16]
                .iter()
                .map(|&c| {
                    let g = chunked_grads(&x, &s0, c, WyAccumulation::GateAware)?;
                    let err = FIELDS
                        .iter()
                        .map(|n| rel_error_matrix(grad(&g, n), grad(&reference, n)))
                        .fold(0.0, f64::max);
                    Ok((c, err))
                })
                .collect()
        })
        .collect();
    let mut report = Report::new();
    for (&(len, d_k, d_v), r) in shapes.iter().zip(results) {
        for (c, err) in r? {
            let id = format!("L={len},d_k={d_k},d_v={d_v},C={c}_vs_64");
            report.check("chunk-invariance", &id, "max_rel_diff", err, Bound::Le(TOL_INVARIANCE));
        }
    }
    Ok(report)
}

fn layer_configs(cfg: &RunConfig) -> Vec<(String, LayerConfig)> {
    let small = |mode| LayerConfig {
        d_model: 8,
        heads: 1,
        value_heads: 1,
        d_k: 4,
        d_v: 4,
        conv_width: 4,
        chunk_size: 4,
        gate_mode: mode,
        ..Default::default()
    };
    let grouped = LayerConfig {
        d_model: 6,
        heads: 2,
        value_heads: 4,
        d_k: 3,
        d_v: 2,
        conv_width: 3,
        chunk_size: 4,
        ..Default::default()
    };
    let mut out = vec![
        ("small".to_string(), small(GateMode::Untied)),
        (
            "neg_eig".to_string(),
            LayerConfig {
                neg_eig: true,
                ..small(GateMode::Untied)
            },
        ),
        ("grouped".to_string(), grouped),
    ];
    for mode in [GateMode::Kda, GateMode::Gdn, GateMode::DeltaNet, GateMode::Mamba2] {
        out.push((format!("small-{mode}"), small(mode)));
    }
    if let Some(c) = cfg.chunk {
        for (_, l) in &mut out {
            l.chunk_size = c;
        }
    }
    out
}

fn layer_loss(p: &LayerParams, x: &Matrix) -> f64 {
    let y = forward_layer(p, x, LayerKernel::Chunked).expect("valid layer").y;
    0.5 * y.frobenius_sq()
}

/// Per-tensor relative error of the layer backward, plus `dx`.
fn layer_case(config: LayerConfig, seed: u64, len: usize) -> Result<Vec<(String, f64)>> {
    let mut rng = Rng::seed(seed);
    let p = perturbed_params(config, &mut rng)?;
    let x = rng.matrix(len, config.d_model, -1.0, 1.0);
    let fwd = forward_layer(&p, &x, LayerKernel::Chunked)?;
    let grads = backward_layer(&p, &fwd, &fwd.y)?;
    let mut out = Vec::new();
    for (name, analytic) in grads.params.tensors() {
        let base = p.tensor(name).expect("same layout").clone();
        let mut probe = p.clone();
        let fd = central_difference_matrix(&base, |m| {
            *probe.tensor_mut(name).expect("same layout") = m.clone();
            layer_loss(&probe, &x)
        });
        out.push((format!("rel_err_d{name}"), rel_error_matrix(analytic, &fd)));
    }
    let fd = central_difference_matrix(&x, |xm| layer_loss(&p, xm));
    out.push(("rel_err_dx".to_string(), rel_error_matrix(&grads.dx, &fd)));
    Ok(out)
}

fn layer_suite(cfg: &RunConfig) -> Result<Report> {
    let configs = layer_configs(cfg);
    let results: Vec<Result<Vec<(String, f64)>>> = configs
        .par_iter()
        .enumerate()
        .map(|(i, (_, c))| layer_case(*c, case_seed(cfg.seed, 13, i), 9))
        .collect();
    let mut report = Report::new();
    for ((id, _), r) in configs.iter().zip(results) {
        for (metric, err) in r? {
            report.check("layer-gradients", id, &metric, err, Bound::Le(TOL_LAYER));
        }
    }
    Ok(report)
}

/// Scalar post-scaled `dA` on untied gates must miss the differences; the
/// gate-aware path on the same instance must not. On tied gates the two
/// accumulations coincide.
fn control_suite(cfg: &RunConfig) -> Result<Report> {
    let mut report = Report::new();
    for i in 0..3 {
        let mut rng = Rng::seed(case_seed(cfg.seed, 14, i));
        let (len, d_k, d_v, c) = [(12, 4, 3, 4), (20, 6, 5, 8), (33, 5, 4, 16)][i];
        let x = with_margins(head_inputs(&mut rng, HeadSpec::new(len, d_k, d_v)));
        let s0 = random_state(&mut rng, d_k, d_v, 0.5);
        let fd = fd_grads(&x, &s0);
        let worst = |g: &ChunkGrads| {
            FIELDS
                .iter()
                .zip(&fd)
                .map(|(n, f)| rel_error_matrix(grad(g, n), f))
                .fold(0.0, f64::max)
        };
        let id = format!("L={len},d_k={d_k},d_v={d_v},C={c}");
        let scalar = chunked_grads(&x, &s0, c, WyAccumulation::ScalarPostScaled)?;
        report.expect_fail(
            "negative-control",
            &format!("{id},scalar-post-scaled,untied"),
            "max_rel_err",
            worst(&scalar),
            Bound::Ge(CONTROL_GAP),
        );
        let aware = chunked_grads(&x, &s0, c, WyAccumulation::GateAware)?;
        report.check(
            "negative-control",
            &format!("{id},gate-aware,untied"),
            "max_rel_err",
            worst(&aware),
            Bound::Le(TOL_KERNEL),
        );

        let tied = tie_gates(&mut rng, &x);
        let a = chunked_grads(&tied, &s0, c, WyAccumulation::GateAware)?;
        let b = chunked_grads(&tied, &s0, c, WyAccumulation::ScalarPostScaled)?;
        let diff = FIELDS
            .iter()
            .map(|n| rel_error_matrix(grad(&b, n), grad(&a, n)))
            .fold(0.0, f64::max);
        report.check(
            "negative-control",
            &format!("{id},scalar-post-scaled,tied"),
            "max_rel_diff_vs_gate_aware",
            diff,
            Bound::Le(TOL_INVARIANCE),
        );
    }
    Ok(report)
}

/// `∂L/∂β_t = ⟨dB_t, 1⟩ + ⟨dW_t, 1⟩` against differences in `β`.
fn tied_beta_suite(cfg: &RunConfig) -> Result<Report> {
    let mut report = Report::new();
    for (i, &(len, d_k, d_v, c)) in [(20, 4, 3, 16), (33, 6, 4, 8), (9, 3, 3, 1)].iter().enumerate() {
        let mut rng = Rng::seed(case_seed(cfg.seed, 15, i));
        let x = with_margins(head_inputs(&mut rng, HeadSpec::new(len, d_k, d_v)));
        let tied = tie_gates(&mut rng, &x);
        let s0 = random_state(&mut rng, d_k, d_v, 0.5);
        let beta: Vec<f64> = (0..len).map(|t| 1e-3 + tied.b[(t, 0)] * 0.998).collect();
        let with_beta = |beta: &[f64]| {
            let mut y = tied.clone();
            for (t, &bt) in beta.iter().enumerate() {
                y.b.row_mut(t).fill(bt);
                y.w.row_mut(t).fill(bt);
            }
            y
        };
        let base = with_beta(&beta);
        let g = chunked_grads(&base, &s0, c, WyAccumulation::GateAware)?;
        let analytic: Vec<f64> = (0..len).map(|t| tied_beta_gradient(g.db.row(t), g.dw.row(t))).collect();
        let fd = central_difference(&beta, |b| tokenwise_loss(&with_beta(b), &s0));
        let err = gdr2_core::gradcheck::rel_error(&analytic, &fd);
        report.check(
            "tied-beta",
            &format!("L={len},d_k={d_k},d_v={d_v},C={c}"),
            "rel_err_dbeta",
            err,
            Bound::Le(TOL_TIED_BETA),
        );
    }
    Ok(report)
}

/// The updated state zeroes the gradient of the local online objective.
fn minimizer_suite(cfg: &RunConfig) -> Result<Report> {
    let mut report = Report::new();
    for i in 0..24 {
        let mut rng = Rng::seed(case_seed(cfg.seed, 16, i));
        let d_k = 1 + rng.below(16);
        let d_v = 1 + rng.below(16);
        let neg_eig = i % 2 == 1;
        let b_max = if neg_eig { 2.0 } else { 1.0 };
        let state = HeadState::new(random_state(&mut rng, d_k, d_v, 1.0));
        let q = unit_rows(&mut rng, 1, d_k).row(0).to_vec();
        let k = unit_rows(&mut rng, 1, d_k).row(0).to_vec();
        let v = rng.vector(d_v, -1.0, 1.0);
        let g: Vec<f64> = rng.vector(d_k, 0.5, 1.0).into_iter().map(f64::ln).collect();
        let b = rng.vector(d_k, 0.0, b_max);
        let w = rng.vector(d_v, 0.0, 1.0);
        let gates = TokenGates::gdr2(q, k.clone(), v.clone(), g, b.clone(), w.clone()).with_neg_eig(neg_eig);
        let (next, _) = step_gdr2(&state, &gates)?;
        let mut sbar = state.s.clone();
        for (row, &a) in gates.alpha.iter().enumerate() {
            sbar.row_mut(row).iter_mut().for_each(|x| *x *= a);
        }
        let e: Vec<f64> = b.iter().zip(&k).map(|(b, k)| b * k).collect();
        let z: Vec<f64> = w.iter().zip(&v).map(|(w, v)| w * v).collect();
        let grad = online_objective_gradient(&next.s, &sbar, &k, &e, &z)?;
        let id = format!("d_k={d_k},d_v={d_v}{}", if neg_eig { ",neg_eig" } else { "" });
        report.check("minimizer", &id, "max_abs_grad", grad.max_abs(), Bound::Le(TOL_MINIMIZER));
    }
    Ok(report)
}

pub fn run(cfg: &RunConfig) -> Result<Report> {
    if cfg.precision == Some(Precision::Binary32) {
        return Err(CliError::Usage("check-gradients runs in binary64 only".into()));
    }
    let mut report = kernel_suite(cfg)?;
    report.extend(invariance_suite(cfg)?);
    report.extend(layer_suite(cfg)?);
    report.extend(control_suite(cfg)?);
    report.extend(tied_beta_suite(cfg)?);
    report.extend(minimizer_suite(cfg)?);
    Ok(report)
}
