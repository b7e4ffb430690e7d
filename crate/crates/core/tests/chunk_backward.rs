use gdr2_core::chunk::{
    backward_chunk, backward_chunked, backward_packed, forward_chunk, forward_chunked, forward_packed,
    tied_beta_gradient, vjp_decay, vjp_elementwise, vjp_inverse, vjp_output, vjp_residual, vjp_state,
    vjp_t_and_scores, vjp_wy, vjp_wy_scalar_post_scaled, BackwardOptions, ChunkGrads, ChunkWorkspace,
    ElementwiseUpstream, ForwardOptions, HeadInputs, PackedBatch, Retention, WyAccumulation,
};
use gdr2_core::gradcheck::{central_difference_matrix, half_square_loss, rel_error_matrix};
use gdr2_core::math::{forward_substitution_unitriangular, SolvePrecision};
use gdr2_core::rules::{backward_sequence_reference, run_sequence_reference, HeadState, RuleKind};
use gdr2_core::synth::{head_inputs, random_state, tie_gates, HeadSpec};
use gdr2_core::{Error, Matrix, Rng};
use proptest::prelude::*;

const FIELDS: [&str; 7] = ["q", "k", "v", "b", "w", "g", "s0"];

/// Keeps every gate at least 1e-3 away from its range limits so central
/// differences never leave the contract.
fn with_margins(mut x: HeadInputs) -> HeadInputs {
    x.b = x.b.map(|b| 1e-3 + b * 0.998);
    x.w = x.w.map(|w| 1e-3 + w * 0.998);
    x.g = x.g.map(|g| g.min(-1e-3));
    x
}

fn instance(seed: u64, len: usize, d_k: usize, d_v: usize, s0_scale: f64) -> (HeadInputs, Matrix) {
    let mut rng = Rng::seed(seed);
    let x = with_margins(head_inputs(&mut rng, HeadSpec::new(len, d_k, d_v)));
    let s0 = random_state(&mut rng, d_k, d_v, s0_scale);
    (x, s0)
}

fn field<'a>(x: &'a mut HeadInputs, s0: &'a mut Matrix, name: &str) -> &'a mut Matrix {
    match name {
        "q" => &mut x.q,
        "k" => &mut x.k,
        "v" => &mut x.v,
        "b" => &mut x.b,
        "w" => &mut x.w,
        "g" => &mut x.g,
        "s0" => s0,
        _ => unreachable!(),
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
        "s0" => &g.ds0,
        _ => unreachable!(),
    }
}

/// `½‖O‖² (+ ½‖S_L‖²)` on the tokenwise recurrence.
fn tokenwise_loss(x: &HeadInputs, s0: &Matrix, with_state: bool) -> f64 {
    let run = run_sequence_reference(RuleKind::Gdr2, &x.tokens(), &HeadState::new(s0.clone())).unwrap();
    let last = &run.final_state().unwrap().s;
    if with_state {
        half_square_loss(&run.outputs, last)
    } else {
        0.5 * run.outputs.frobenius_sq()
    }
}

fn fd_grads(x: &HeadInputs, s0: &Matrix, with_state: bool) -> Vec<Matrix> {
    FIELDS
        .iter()
        .map(|&name| {
            let (mut xc, mut sc) = (x.clone(), s0.clone());
            let base = field(&mut xc, &mut sc, name).clone();
            central_difference_matrix(&base, |m| {
                *field(&mut xc, &mut sc, name) = m.clone();
                tokenwise_loss(&xc, &sc, with_state)
            })
        })
        .collect()
}

fn chunked_grads(x: &HeadInputs, s0: &Matrix, c: usize, with_state: bool, wy: WyAccumulation) -> ChunkGrads {
    let fwd = forward_chunked(x, s0, ForwardOptions::with_chunk_size(c)).unwrap();
    let ds = if with_state {
        fwd.final_state.clone()
    } else {
        Matrix::zeros(x.d_k(), x.d_v())
    };
    backward_chunked(x, &fwd, &fwd.outputs.clone(), &ds, BackwardOptions { wy }).unwrap()
}

fn workspace(x: &HeadInputs, s0: &Matrix) -> ChunkWorkspace {
    forward_chunk(x, s0, 0, SolvePrecision::StrictBinary64).unwrap().2
}

fn inner(a: &Matrix, b: &Matrix) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

#[test]
fn vjp_output_examples() {
    let (x, s0) = instance(1, 6, 4, 3, 0.5);
    let ws = workspace(&x, &s0);
    let z = vjp_output(&Matrix::zeros(6, 3), &ws).unwrap();
    for m in [&z.daqk, &z.dr, &z.dqgamma, &z.ds0] {
        assert!(m.data().iter().all(|&v| v == 0.0));
    }

    let one = x.slice(0, 1);
    let ws1 = workspace(&one, &s0);
    let d_o = Matrix::from_rows(&[[0.3, -1.2, 0.7]]);
    let v = vjp_output(&d_o, &ws1).unwrap();
    assert_eq!(v.daqk[(0, 0)], inner(&d_o, &ws1.r));

    let mut rng = Rng::seed(2);
    let d_o = rng.matrix(6, 3, -1.0, 1.0);
    let v = vjp_output(&d_o, &ws).unwrap();
    let fd = central_difference_matrix(&ws.aqk, |aqk| {
        inner(&d_o, &ws.qgamma.dot(&s0).add(&aqk.tril(0).dot(&ws.r)))
    });
    assert!(rel_error_matrix(&v.daqk, &fd.tril(0)) <= 1e-8);
}

#[test]
fn vjp_state_examples() {
    let (x, s0) = instance(3, 7, 4, 3, 0.5);
    let ws = workspace(&x, &s0);
    let z = vjp_state(&Matrix::zeros(4, 3), &ws).unwrap();
    assert!(z.dr.data().iter().chain(z.dktail.data()).chain(z.ds0.data()).all(|&v| v == 0.0));
    assert!(z.dgamma_c.iter().all(|&v| v == 0.0));

    let mut rng = Rng::seed(4);
    let ds_c = rng.matrix(4, 3, -1.0, 1.0);
    let ws0 = workspace(&x, &Matrix::zeros(4, 3));
    assert!(vjp_state(&ds_c, &ws0).unwrap().dgamma_c.iter().all(|&v| v == 0.0));

    let st = vjp_state(&ds_c, &ws).unwrap();
    let res = vjp_residual(&st.dr, &ws).unwrap();
    let analytic = st.ds0.add(&res.ds0);
    let fd = central_difference_matrix(&s0, |s| {
        let r = ws.u.sub(&ws.y.dot(s));
        let mut s1 = s.clone();
        for i in 0..4 {
            let g = ws.decay.last()[i];
            s1.row_mut(i).iter_mut().for_each(|v| *v *= g);
        }
        inner(&ds_c, &s1.add(&ws.ktail.t_dot(&r)))
    });
    assert!(rel_error_matrix(&analytic, &fd) <= 1e-8);
}

#[test]
fn vjp_residual_examples() {
    let (x, s0) = instance(5, 7, 4, 3, 0.5);
    let mut rng = Rng::seed(6);
    let dr = rng.matrix(7, 3, -1.0, 1.0);
    let ws0 = workspace(&x, &Matrix::zeros(4, 3));
    let v = vjp_residual(&dr, &ws0).unwrap();
    assert!(v.dy.data().iter().all(|&x| x == 0.0));
    // Y does not depend on S₀, so −Yᵀ dR survives a zero start state.
    assert_eq!(v.ds0, ws0.y.t_dot(&dr).map(|x| -x));
    assert_eq!(v.du, dr);

    let ws = workspace(&x, &s0);
    let v = vjp_residual(&dr, &ws).unwrap();
    let fd = central_difference_matrix(&ws.y, |y| inner(&dr, &ws.u.sub(&y.dot(&s0))));
    assert!(rel_error_matrix(&v.dy, &fd) <= 1e-8);
}

#[test]
fn vjp_wy_examples() {
    let mut rng = Rng::seed(7);
    let (mut x, s0) = instance(8, 9, 4, 3, 0.5);
    let du = rng.matrix(9, 3, -1.0, 1.0);
    x.w = Matrix::zeros(9, 3);
    let ws = workspace(&x, &s0);
    let v = vjp_wy(&du, &Matrix::zeros(9, 4), &ws).unwrap();
    assert!(v.da.data().iter().all(|&a| a == 0.0));
}

#[test]
fn scalar_post_scaling_agrees_only_when_tied() {
    let mut worst_untied = f64::INFINITY;
    for seed in 0..8 {
        let mut rng = Rng::seed(900 + seed);
        let base = head_inputs(&mut rng, HeadSpec::new(16, 6, 5));
        let s0 = random_state(&mut rng, 6, 5, 0.5);
        let du = rng.matrix(16, 5, -1.0, 1.0);
        let dy = rng.matrix(16, 6, -1.0, 1.0);

        let tied = tie_gates(&mut rng, &base);
        let ws = workspace(&tied, &s0);
        let a = vjp_wy(&du, &dy, &ws).unwrap();
        let b = vjp_wy_scalar_post_scaled(&du, &dy, &ws, &tied).unwrap();
        assert!(a.da.max_abs_diff(&b.da) <= 1e-12);

        let ws = workspace(&base, &s0);
        let a = vjp_wy(&du, &dy, &ws).unwrap();
        let b = vjp_wy_scalar_post_scaled(&du, &dy, &ws, &base).unwrap();
        worst_untied = worst_untied.min(a.da.max_abs_diff(&b.da));
    }
    assert!(worst_untied > 1e-3, "{worst_untied}");
}

#[test]
fn vjp_inverse_examples() {
    let mut rng = Rng::seed(9);
    let da = rng.matrix(5, 5, -1.0, 1.0);
    let dt = vjp_inverse(&da, &Matrix::identity(5)).unwrap();
    assert_eq!(dt, da.tril(-1).map(|x| -x));
    assert!(vjp_inverse(&Matrix::<f64>::zeros(5, 5), &Matrix::identity(5)).unwrap().data().iter().all(|&x| x == 0.0));

    let t = rng.matrix(8, 8, -0.5, 0.5).tril(-1);
    let da = rng.matrix(8, 8, -1.0, 1.0);
    let a = forward_substitution_unitriangular(&t, &Matrix::identity(8)).unwrap();
    let fd = central_difference_matrix(&t, |t| {
        inner(&da, &forward_substitution_unitriangular(&t.tril(-1), &Matrix::identity(8)).unwrap())
    });
    assert!(rel_error_matrix(&vjp_inverse(&da, &a).unwrap(), &fd.tril(-1)) <= 1e-8);
}

#[test]
fn vjp_t_and_scores_examples() {
    let (x, s0) = instance(10, 2, 3, 2, 0.5);
    let ws = workspace(&x, &s0);
    let (a, b, c) = vjp_t_and_scores(&Matrix::zeros(2, 2), &Matrix::zeros(2, 2), &ws).unwrap();
    assert!(a.data().iter().chain(b.data()).chain(c.data()).all(|&v| v == 0.0));

    let dt = Matrix::from_rows(&[[0.0, 0.0], [1.7, 0.0]]);
    let (debar, dkbar, _) = vjp_t_and_scores(&dt, &Matrix::zeros(2, 2), &ws).unwrap();
    for i in 0..3 {
        assert_eq!(debar[(0, i)], 0.0);
        assert!((debar[(1, i)] - 1.7 * ws.kbar[(0, i)]).abs() < 1e-15);
        assert!((dkbar[(0, i)] - 1.7 * ws.ebar[(1, i)]).abs() < 1e-15);
        assert_eq!(dkbar[(1, i)], 0.0);
    }

    let (x, s0) = instance(11, 8, 4, 3, 0.5);
    let ws = workspace(&x, &s0);
    let mut rng = Rng::seed(12);
    let dt = rng.matrix(8, 8, -1.0, 1.0).tril(-1);
    let daqk = rng.matrix(8, 8, -1.0, 1.0).tril(0);
    let loss = |e: &Matrix, k: &Matrix, q: &Matrix| inner(&dt, &e.dot_t(k).tril(-1)) + inner(&daqk, &q.dot_t(k).tril(0));
    let (debar, dkbar, dqg) = vjp_t_and_scores(&dt, &daqk, &ws).unwrap();
    let fe = central_difference_matrix(&ws.ebar, |e| loss(e, &ws.kbar, &ws.qgamma));
    let fk = central_difference_matrix(&ws.kbar, |k| loss(&ws.ebar, k, &ws.qgamma));
    let fq = central_difference_matrix(&ws.qgamma, |q| loss(&ws.ebar, &ws.kbar, q));
    assert!(rel_error_matrix(&debar, &fe) <= 1e-8);
    assert!(rel_error_matrix(&dkbar, &fk) <= 1e-8);
    assert!(rel_error_matrix(&dqg, &fq) <= 1e-8);
}

#[test]
fn vjp_elementwise_examples() {
    let (mut x, s0) = instance(13, 6, 4, 3, 0.5);
    let ws = workspace(&x, &s0);
    let zk = Matrix::zeros(6, 4);
    let zv = Matrix::zeros(6, 3);
    let up = ElementwiseUpstream {
        debar: &zk,
        dkbar: &zk,
        dqgamma: &zk,
        dktail: &zk,
        dz: &zv,
        dgamma_c: &[0.0; 4],
    };
    let g = vjp_elementwise(up, &x, &ws.decay).unwrap();
    for m in [&g.dq, &g.dk, &g.dv, &g.db, &g.dw] {
        assert!(m.data().iter().all(|&v| v == 0.0));
    }
    assert!(g.dgamma.data().iter().all(|&v| v == 0.0));

    x.g = Matrix::zeros(6, 4);
    let ws = workspace(&x, &s0);
    let mut rng = Rng::seed(14);
    let (de, dkb, dkt) = (rng.matrix(6, 4, -1.0, 1.0), rng.matrix(6, 4, -1.0, 1.0), rng.matrix(6, 4, -1.0, 1.0));
    let up = ElementwiseUpstream {
        debar: &de,
        dkbar: &dkb,
        dqgamma: &zk,
        dktail: &dkt,
        dz: &zv,
        dgamma_c: &[0.0; 4],
    };
    let g = vjp_elementwise(up, &x, &ws.decay).unwrap();
    let want = de.hadamard(&x.b).add(&dkb).add(&dkt);
    assert!(g.dk.max_abs_diff(&want) <= 1e-15);
}

fn chunk_loss(x: &HeadInputs, s0: &Matrix, d_o: &Matrix, ds: &Matrix) -> f64 {
    let (o, s1, _) = forward_chunk(x, s0, 0, SolvePrecision::StrictBinary64).unwrap();
    inner(d_o, &o) + inner(ds, &s1)
}

#[test]
fn single_chunk_gradients_match_finite_differences() {
    let (x, s0) = instance(15, 8, 4, 4, 0.5);
    let mut rng = Rng::seed(16);
    let d_o = rng.matrix(8, 4, -1.0, 1.0);
    let ds = rng.matrix(4, 4, -1.0, 1.0);
    let ws = workspace(&x, &s0);
    let g = backward_chunk(&x, &ws, &d_o, &ds, BackwardOptions::default()).unwrap();
    for name in FIELDS {
        let (mut xc, mut sc) = (x.clone(), s0.clone());
        let base = field(&mut xc, &mut sc, name).clone();
        let fd = central_difference_matrix(&base, |m| {
            *field(&mut xc, &mut sc, name) = m.clone();
            chunk_loss(&xc, &sc, &d_o, &ds)
        });
        let err = rel_error_matrix(grad(&g, name), &fd);
        assert!(err <= 1e-8, "{name}: {err}");
    }
}

#[test]
fn vjp_decay_examples() {
    let (x, _) = instance(17, 1, 3, 2, 0.5);
    let ws = workspace(&x, &Matrix::zeros(3, 2));
    let dgamma = Matrix::from_rows(&[[0.5, -1.0, 2.0]]);
    let dg = vjp_decay(&dgamma, &ws.decay).unwrap();
    for i in 0..3 {
        assert_eq!(dg[(0, i)], dgamma[(0, i)] * ws.decay.gamma[(0, i)]);
    }
    let zero = vjp_decay(&Matrix::zeros(1, 3), &ws.decay).unwrap();
    assert!(zero.data().iter().all(|&v| v == 0.0));
}

#[test]
fn tied_beta_gradient_examples() {
    assert_eq!(tied_beta_gradient::<f64>(&[0.0, 0.0], &[0.0]), 0.0);
    assert_eq!(tied_beta_gradient(&[1.0, 2.0], &[3.0]), 6.0);

    let mut rng = Rng::seed(18);
    let base = with_margins(head_inputs(&mut rng, HeadSpec::new(10, 4, 3)));
    let x = tie_gates(&mut rng, &base);
    let s0 = random_state(&mut rng, 4, 3, 0.5);
    let g = chunked_grads(&x, &s0, 4, true, WyAccumulation::GateAware);
    for t in [0, 4, 9] {
        let beta = x.b[(t, 0)];
        let fd = gdr2_core::gradcheck::central_difference(&[beta], |b| {
            let mut xt = x.clone();
            xt.b.row_mut(t).fill(b[0]);
            xt.w.row_mut(t).fill(b[0]);
            tokenwise_loss(&xt, &s0, true)
        })[0];
        let got = tied_beta_gradient(g.db.row(t), g.dw.row(t));
        assert!((got - fd).abs() <= 1e-8 * fd.abs().max(1.0), "t={t}: {got} vs {fd}");
    }
}

#[test]
fn zero_upstream_gives_zero_gradients() {
    let (x, s0) = instance(19, 20, 4, 3, 0.5);
    let fwd = forward_chunked(&x, &s0, ForwardOptions::with_chunk_size(8)).unwrap();
    let g = backward_chunked(&x, &fwd, &Matrix::zeros(20, 3), &Matrix::zeros(4, 3), BackwardOptions::default()).unwrap();
    for (_, m) in g.tensors() {
        assert!(m.data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn full_finite_difference_sweep() {
    let (x, s0) = instance(20, 12, 4, 4, 0.5);
    let fd = fd_grads(&x, &s0, true);
    let g = chunked_grads(&x, &s0, 4, true, WyAccumulation::GateAware);
    for (name, f) in FIELDS.iter().zip(&fd) {
        let err = rel_error_matrix(grad(&g, name), f);
        assert!(err <= 1e-6, "{name}: {err}");
    }
}

#[test]
fn finite_difference_invariant_over_random_instances() {
    let mut case = 0;
    for &len in &[4, 12, 33] {
        for &(d_k, d_v) in &[(3, 4), (4, 8), (8, 3)] {
            for &(s0_scale, with_state) in &[(0.0, false), (0.5, true), (0.5, false)] {
                case += 1;
                if case % 4 == 3 && len == 33 {
                    continue;
                }
                let (x, s0) = instance(3000 + case, len, d_k, d_v, s0_scale);
                let fd = fd_grads(&x, &s0, with_state);
                let g = chunked_grads(&x, &s0, 8, with_state, WyAccumulation::GateAware);
                for (name, f) in FIELDS.iter().zip(&fd) {
                    let err = rel_error_matrix(grad(&g, name), f);
                    assert!(err <= 1e-6, "case {case} L={len} d_k={d_k} d_v={d_v} {name}: {err}");
                }
            }
        }
    }
    assert!(case >= 20);
}

#[test]
fn agrees_with_tokenwise_backpropagation() {
    let (x, s0) = instance(21, 50, 5, 4, 0.5);
    let st = HeadState::new(s0.clone());
    let run = run_sequence_reference(RuleKind::Gdr2, &x.tokens(), &st).unwrap();
    let last = run.final_state().unwrap().s.clone();
    let r = backward_sequence_reference(&x.tokens(), &st, &run, &run.outputs, &last).unwrap();
    let g = chunked_grads(&x, &s0, 16, true, WyAccumulation::GateAware);
    for (a, b) in [(&g.dq, &r.dq), (&g.dk, &r.dk), (&g.dv, &r.dv), (&g.db, &r.db), (&g.dw, &r.dw), (&g.dg, &r.dg), (&g.ds0, &r.ds0)] {
        assert!(a.max_abs_diff(b) <= 1e-10, "{}", a.max_abs_diff(b));
    }
}

#[test]
fn gradients_are_chunk_size_invariant() {
    let (x, s0) = instance(22, 64, 8, 8, 0.5);
    let base = chunked_grads(&x, &s0, 64, true, WyAccumulation::GateAware);
    for c in [1, 2, 7, 16] {
        let g = chunked_grads(&x, &s0, c, true, WyAccumulation::GateAware);
        for ((name, a), (_, b)) in g.tensors().iter().zip(base.tensors().iter()) {
            assert!(a.max_abs_diff(b) <= 1e-12, "C={c} {name}: {}", a.max_abs_diff(b));
        }
    }
}

#[test]
fn backward_is_linear_in_the_upstream_bitwise() {
    let (x, s0) = instance(23, 30, 4, 5, 0.5);
    let fwd = forward_chunked(&x, &s0, ForwardOptions::with_chunk_size(8)).unwrap();
    let mut rng = Rng::seed(24);
    let d_o = rng.matrix(30, 5, -1.0, 1.0);
    let ds = rng.matrix(4, 5, -1.0, 1.0);
    let base = backward_chunked(&x, &fwd, &d_o, &ds, BackwardOptions::default()).unwrap();
    for a in [2.0, -0.5] {
        let g = backward_chunked(&x, &fwd, &d_o.scale(a), &ds.scale(a), BackwardOptions::default()).unwrap();
        for ((name, m), (_, b)) in g.tensors().iter().zip(base.tensors().iter()) {
            assert_eq!(**m, b.scale(a), "a={a} {name}");
        }
    }
}

#[test]
fn scalar_post_scaled_backward_fails_finite_differences() {
    let (x, s0) = instance(25, 12, 4, 4, 0.5);
    let fd = fd_grads(&x, &s0, true);
    let g = chunked_grads(&x, &s0, 12, true, WyAccumulation::ScalarPostScaled);
    let worst = FIELDS
        .iter()
        .zip(&fd)
        .map(|(name, f)| rel_error_matrix(grad(&g, name), f))
        .fold(0.0, f64::max);
    assert!(worst > 1e-3, "{worst}");
}

#[test]
fn recompute_mode_is_bitwise_identical() {
    let (x, s0) = instance(26, 45, 4, 3, 0.5);
    let mut opts = ForwardOptions::with_chunk_size(16);
    let kept = forward_chunked(&x, &s0, opts).unwrap();
    opts.retention = Retention::Recompute;
    let ckpt = forward_chunked(&x, &s0, opts).unwrap();
    let a = backward_chunked(&x, &kept, &kept.outputs, &kept.final_state, BackwardOptions::default()).unwrap();
    let b = backward_chunked(&x, &ckpt, &ckpt.outputs, &ckpt.final_state, BackwardOptions::default()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn missing_workspaces_are_contract_errors() {
    let (x, s0) = instance(27, 20, 3, 3, 0.5);
    let mut fwd = forward_chunked(&x, &s0, ForwardOptions::with_chunk_size(8)).unwrap();
    fwd.chunks.remove(1);
    let err = backward_chunked(&x, &fwd, &Matrix::zeros(20, 3), &Matrix::zeros(3, 3), BackwardOptions::default());
    assert!(matches!(err, Err(Error::Contract { .. })));
}

#[test]
fn packed_backward_matches_per_sequence() {
    let mut rng = Rng::seed(28);
    let heads: Vec<_> = (0..2).map(|_| head_inputs(&mut rng, HeadSpec::new(23, 4, 3))).collect();
    let cu = vec![0, 5, 6, 23];
    let opts = ForwardOptions::with_chunk_size(4);
    let batch = PackedBatch::new(heads.clone(), cu.clone()).unwrap();
    let fwd = forward_packed(&batch, opts).unwrap();
    let grads = backward_packed(&batch, &fwd, &fwd.outputs, None, BackwardOptions::default()).unwrap();
    for (n, w) in cu.windows(2).enumerate() {
        for (h, head) in heads.iter().enumerate() {
            let x = head.slice(w[0], w[1]);
            let alone = forward_chunked(&x, &Matrix::zeros(4, 3), opts).unwrap();
            let g = backward_chunked(&x, &alone, &alone.outputs, &Matrix::zeros(4, 3), BackwardOptions::default()).unwrap();
            assert_eq!(grads[n][h], g);
        }
    }
}

#[test]
fn binary32_gradients_track_binary64() {
    let (x, s0) = instance(29, 24, 4, 4, 0.5);
    let g64 = chunked_grads(&x, &s0, 8, true, WyAccumulation::GateAware);
    let (x32, s32) = (x.cast::<f32>(), s0.cast::<f32>());
    let fwd = forward_chunked(&x32, &s32, ForwardOptions::with_chunk_size(8)).unwrap();
    let g32 = backward_chunked(&x32, &fwd, &fwd.outputs, &fwd.final_state, BackwardOptions::default()).unwrap();
    for ((name, a), (_, b)) in g32.tensors().iter().zip(g64.tensors().iter()) {
        let err = rel_error_matrix(&a.cast::<f64>(), b);
        assert!(err <= 5e-2, "{name}: {err}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn chunked_backward_matches_tokenwise_backpropagation(
        seed in any::<u64>(),
        len in 1usize..40,
        c in 1usize..20,
        d_k in 1usize..6,
        d_v in 1usize..6,
    ) {
        let (x, s0) = instance(seed, len, d_k, d_v, 1.0);
        let st = HeadState::new(s0.clone());
        let run = run_sequence_reference(RuleKind::Gdr2, &x.tokens(), &st).unwrap();
        let last = run.final_state().unwrap().s.clone();
        let r = backward_sequence_reference(&x.tokens(), &st, &run, &run.outputs, &last).unwrap();
        let g = chunked_grads(&x, &s0, c, true, WyAccumulation::GateAware);
        for (a, b) in [(&g.dq, &r.dq), (&g.dk, &r.dk), (&g.dv, &r.dv), (&g.db, &r.db), (&g.dw, &r.dw), (&g.dg, &r.dg), (&g.ds0, &r.ds0)] {
            prop_assert!(a.max_abs_diff(b) <= 1e-10);
        }
    }
}
