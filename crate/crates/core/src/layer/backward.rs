use crate::chunk::{backward_chunked, tied_beta_gradient, BackwardOptions, ChunkGrads};
use crate::error::{Error, Result};
use crate::layer::{GateMode, LayerForward, LayerParams};
use crate::math::{sigmoid, silu, softplus, Matrix, L2_EPS};
use crate::real::Real;

/// Parameter and input gradients of one layer call.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads<T = f64> {
    pub params: LayerParams<T>,
    pub dx: Matrix<T>,
    /// Kernel-level gradients per value head.
    pub heads: Vec<ChunkGrads<T>>,
}

fn dsigmoid<T: Real>(z: T) -> T {
    let s = sigmoid(z);
    s * (T::one() - s)
}

fn dsilu<T: Real>(z: T) -> T {
    let s = sigmoid(z);
    s * (T::one() + z * (T::one() - s))
}

/// Pulls `dn` back through `n = a / max(‖a‖, eps)` row by row.
fn l2_vjp<T: Real>(a: &Matrix<T>, dn: &Matrix<T>) -> Matrix<T> {
    let mut da = Matrix::zeros(a.rows(), a.cols());
    for t in 0..a.rows() {
        let row = a.row(t);
        let norm = row.iter().map(|&x| x.as_f64() * x.as_f64()).sum::<f64>().sqrt();
        let g = dn.row(t);
        if norm > L2_EPS {
            let inv = T::cast(1.0 / norm);
            let proj = row.iter().zip(g).fold(T::zero(), |s, (&x, &d)| s + x * inv * d);
            for ((o, &x), &d) in da.row_mut(t).iter_mut().zip(row).zip(g) {
                *o = (d - x * inv * proj) * inv;
            }
        } else {
            let inv = T::cast(1.0 / L2_EPS);
            for (o, &d) in da.row_mut(t).iter_mut().zip(g) {
                *o = d * inv;
            }
        }
    }
    da
}

/// Returns `(d_kernel, d_input)` for [`causal_conv`](crate::layer::causal_conv);
/// the input gradient covers only the new rows, not the history.
fn conv_vjp<T: Real>(padded: &Matrix<T>, kernel: &Matrix<T>, dout: &Matrix<T>) -> (Matrix<T>, Matrix<T>) {
    let (ch, width) = kernel.shape();
    let mut dker = Matrix::zeros(ch, width);
    let mut dpad = Matrix::zeros(padded.rows(), ch);
    for t in 0..dout.rows() {
        for j in 0..width {
            for c in 0..ch {
                let d = dout[(t, c)];
                dker[(c, j)] += d * padded[(t + j, c)];
                dpad[(t + j, c)] += d * kernel[(c, j)];
            }
        }
    }
    (dker, dpad.slice_rows(width - 1, padded.rows()))
}

fn join_cols<T: Real>(parts: &[Matrix<T>]) -> Matrix<T> {
    let width = parts[0].cols();
    let mut out = Matrix::zeros(parts[0].rows(), width * parts.len());
    for (h, p) in parts.iter().enumerate() {
        out.set_cols(h * width, p);
    }
    out
}

/// Reverse pass of a chunked [`forward_layer`](crate::layer::forward_layer)
/// call with upstream `dy`.
pub fn backward_layer<T: Real>(params: &LayerParams<T>, fwd: &LayerForward<T>, dy: &Matrix<T>) -> Result<LayerGrads<T>> {
    const OP: &str = "backward_layer";
    let cache = fwd
        .cache
        .as_ref()
        .ok_or_else(|| Error::contract(OP, "forward ran without retained activations"))?;
    let c = params.config;
    let len = cache.x.rows();
    if dy.shape() != (len, c.d_model) {
        return Err(Error::dim(OP, format!("dY is {:?}, expected {:?}", dy.shape(), (len, c.d_model))));
    }
    let x = &cache.x;
    let mut g = LayerParams::zeros(c)?;

    g.wo = cache.mixed.t_dot(dy);
    let dmixed = dy.dot_t(&params.wo);
    let dnormed = dmixed.zip_map(&cache.gate_pre, |d, z| d * silu(z));
    let dgate_pre = dmixed
        .hadamard(&cache.normed)
        .zip_map(&cache.gate_pre, |d, z| d * dsilu(z));
    g.wgate = x.t_dot(&dgate_pre);
    let mut dx = dgate_pre.dot_t(&params.wgate);

    // RMSNorm per value head.
    let d_v = c.d_v;
    let mut d_out = Vec::with_capacity(c.value_heads);
    for (j, oj) in cache.o.iter().enumerate() {
        let weight = params.rms.row(j).to_vec();
        let mut doj = Matrix::zeros(len, d_v);
        for t in 0..len {
            let inv = cache.inv_rms[j][t];
            let row = oj.row(t);
            let dn = &dnormed.row(t)[j * d_v..(j + 1) * d_v];
            let mut s = 0.0f64;
            for i in 0..d_v {
                g.rms[(j, i)] += dn[i] * row[i] * T::cast(inv);
                s += (dn[i] * weight[i]).as_f64() * row[i].as_f64();
            }
            let coef = T::cast(inv * inv * inv * s / d_v as f64);
            for i in 0..d_v {
                doj[(t, i)] = dn[i] * weight[i] * T::cast(inv) - row[i] * coef;
            }
        }
        d_out.push(doj);
    }

    // Recurrence per value head; key-side gradients sum over each group.
    let zero_state = Matrix::zeros(c.d_k, c.d_v);
    let mut heads = Vec::with_capacity(c.value_heads);
    for (j, doj) in d_out.iter().enumerate() {
        heads.push(backward_chunked(&cache.heads[j], &cache.runs[j], doj, &zero_state, BackwardOptions::default())?);
    }
    let mut dq = vec![Matrix::zeros(len, c.d_k); c.heads];
    let mut dk = dq.clone();
    let mut dg = dq.clone();
    let mut db = dq.clone();
    for (j, hg) in heads.iter().enumerate() {
        let h = j % c.heads;
        dq[h].add_assign(&hg.dq);
        dk[h].add_assign(&hg.dk);
        dg[h].add_assign(&hg.dg);
        db[h].add_assign(&hg.db);
    }

    // Gates.
    match c.gate_mode {
        GateMode::Untied => {
            let scale = if c.neg_eig { T::cast(2.0) } else { T::one() };
            let pre = cache.erase_pre.as_ref().expect("untied forward keeps the erase pre-activation");
            let de = join_cols(&db).zip_map(pre, |d, z| d * scale * dsigmoid(z));
            let pre = cache.write_pre.as_ref().expect("untied forward keeps the write pre-activation");
            let dws: Vec<_> = heads.iter().map(|hg| hg.dw.clone()).collect();
            let dwp = join_cols(&dws).zip_map(pre, |d, z| d * dsigmoid(z));
            let (wb, ww) = (params.wb.as_ref().expect("untied"), params.ww.as_ref().expect("untied"));
            g.wb = Some(x.t_dot(&de));
            g.ww = Some(x.t_dot(&dwp));
            dx.add_assign(&de.dot_t(wb));
            dx.add_assign(&dwp.dot_t(ww));
        }
        GateMode::Kda | GateMode::Gdn | GateMode::DeltaNet => {
            let pre = cache.erase_pre.as_ref().expect("tied forward keeps the beta pre-activation");
            let mut dbeta = Matrix::zeros(len, c.heads);
            for (j, hg) in heads.iter().enumerate() {
                for t in 0..len {
                    dbeta[(t, j % c.heads)] += tied_beta_gradient(hg.db.row(t), hg.dw.row(t));
                }
            }
            let dpre = dbeta.zip_map(pre, |d, z| d * dsigmoid(z));
            g.wb = Some(x.t_dot(&dpre));
            dx.add_assign(&dpre.dot_t(params.wb.as_ref().expect("tied")));
        }
        GateMode::Mamba2 => {}
    }

    // Log-decay branch, in binary64.
    if let (Some(pre), Some(a), Some(wf)) = (&cache.decay_pre, &params.a, &params.wf) {
        let per_head = pre.cols() / c.heads;
        let mut df = Matrix::<f64>::zeros(len, pre.cols());
        let mut da = Matrix::<f64>::zeros(1, c.heads);
        for (h, dgh) in dg.iter().enumerate() {
            let slope = a[(0, h)].as_f64().exp();
            for t in 0..len {
                for i in 0..c.d_k {
                    let fi = h * per_head + i % per_head;
                    let f = pre[(t, fi)];
                    let d = dgh[(t, i)].as_f64();
                    df[(t, fi)] -= d * slope * sigmoid(f);
                    da[(0, h)] -= d * slope * softplus(f);
                }
            }
        }
        let delta: Vec<f64> = (0..df.cols()).map(|i| (0..len).map(|t| df[(t, i)]).sum()).collect();
        let df = df.cast::<T>();
        g.delta = Some(Matrix::from_vec(1, delta.len(), delta)?.cast());
        g.a = Some(da.cast());
        g.wf = Some(x.t_dot(&df));
        dx.add_assign(&df.dot_t(wf));
    }

    // q, k, v paths: normalization, SiLU, convolution, projection.
    let paths = [
        (join_cols(&dq), Some(&cache.act_q), &cache.conv_q, &cache.padded_q, &params.conv_q, &params.wq),
        (join_cols(&dk), Some(&cache.act_k), &cache.conv_k, &cache.padded_k, &params.conv_k, &params.wk),
        (
            join_cols(&heads.iter().map(|hg| hg.dv.clone()).collect::<Vec<_>>()),
            None,
            &cache.conv_v,
            &cache.padded_v,
            &params.conv_v,
            &params.wv,
        ),
    ];
    let mut path_grads = Vec::with_capacity(3);
    for (d, act, conv, padded, ker, w) in paths {
        let dact = match act {
            Some(act) => {
                let parts: Vec<_> = (0..c.heads)
                    .map(|h| {
                        let (lo, hi) = (h * c.d_k, (h + 1) * c.d_k);
                        l2_vjp(&act.slice_cols(lo, hi), &d.slice_cols(lo, hi))
                    })
                    .collect();
                join_cols(&parts)
            }
            None => d,
        };
        let dconv = dact.zip_map(conv, |d, z| d * dsilu(z));
        let (dker, dpre) = conv_vjp(padded, ker, &dconv);
        dx.add_assign(&dpre.dot_t(w));
        path_grads.push((dker, x.t_dot(&dpre)));
    }
    let mut it = path_grads.into_iter();
    (g.conv_q, g.wq) = it.next().expect("three paths");
    (g.conv_k, g.wk) = it.next().expect("three paths");
    (g.conv_v, g.wv) = it.next().expect("three paths");

    Ok(LayerGrads { params: g, dx, heads })
}
