use crate::chunk::{forward_chunked, ChunkedForward, ForwardOptions, HeadInputs, Retention};
use crate::error::{Error, Result};
use crate::layer::{GateMode, LayerConfig, LayerParams};
use crate::math::{l2_normalize_rows, sigmoid, silu, softplus, Matrix, L2_EPS, RMS_EPS};
use crate::real::Real;
use crate::rules::{run_sequence_reference, HeadState, TokenGates};

/// Which recurrence engine the layer runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LayerKernel {
    /// Chunkwise engine in model precision; keeps activations for backward.
    #[default]
    Chunked,
    /// The gate mode's own tokenwise rule with the state in binary64.
    Tokenwise,
}

/// Everything needed to continue a token stream.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeState<T = f64> {
    /// One state per value head, always binary64.
    pub heads: Vec<HeadState<f64>>,
    /// Last `conv_width − 1` pre-convolution inputs of each path.
    pub conv_q: Matrix<T>,
    pub conv_k: Matrix<T>,
    pub conv_v: Matrix<T>,
}

impl<T: Real> DecodeState<T> {
    pub fn fresh(config: &LayerConfig) -> Self {
        let tail = config.conv_width - 1;
        DecodeState {
            heads: vec![HeadState::zeros(config.d_k, config.d_v); config.value_heads],
            conv_q: Matrix::zeros(tail, config.key_dim()),
            conv_k: Matrix::zeros(tail, config.key_dim()),
            conv_v: Matrix::zeros(tail, config.value_dim()),
        }
    }

    fn check(&self, config: &LayerConfig) -> Result<()> {
        let tail = config.conv_width - 1;
        let ok = self.heads.len() == config.value_heads
            && self.heads.iter().all(|h| h.s.shape() == (config.d_k, config.d_v))
            && self.conv_q.shape() == (tail, config.key_dim())
            && self.conv_k.shape() == (tail, config.key_dim())
            && self.conv_v.shape() == (tail, config.value_dim());
        if !ok {
            return Err(Error::dim("DecodeState", "state does not match the layer configuration"));
        }
        if self.heads.iter().any(|h| !h.s.is_finite()) {
            return Err(Error::range("DecodeState", "non-finite recurrent state"));
        }
        Ok(())
    }
}

/// Per-head `q`, `k` (unit rows) and `v` after projection, convolution and SiLU.
#[derive(Debug, Clone, PartialEq)]
pub struct Projections<T = f64> {
    /// One `L × d_k` matrix per key head.
    pub q: Vec<Matrix<T>>,
    pub k: Vec<Matrix<T>>,
    /// One `L × d_v` matrix per value head.
    pub v: Vec<Matrix<T>>,
}

/// Erase gates per key head and write gates per value head.
#[derive(Debug, Clone, PartialEq)]
pub struct Gates<T = f64> {
    pub b: Vec<Matrix<T>>,
    pub w: Vec<Matrix<T>>,
}

/// Activations retained by a chunked forward for [`backward_layer`](crate::layer::backward_layer).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCache<T = f64> {
    pub x: Matrix<T>,
    /// Pre-convolution inputs with the history rows prepended.
    pub padded_q: Matrix<T>,
    pub padded_k: Matrix<T>,
    pub padded_v: Matrix<T>,
    /// Convolution outputs before SiLU.
    pub conv_q: Matrix<T>,
    pub conv_k: Matrix<T>,
    pub conv_v: Matrix<T>,
    /// SiLU outputs of the q and k paths before normalization.
    pub act_q: Matrix<T>,
    pub act_k: Matrix<T>,
    pub erase_pre: Option<Matrix<T>>,
    pub write_pre: Option<Matrix<T>>,
    /// `x·W_f + δ` in binary64.
    pub decay_pre: Option<Matrix<f64>>,
    /// Kernel inputs per value head.
    pub heads: Vec<HeadInputs<T>>,
    pub runs: Vec<ChunkedForward<T>>,
    /// Kernel outputs per value head.
    pub o: Vec<Matrix<T>>,
    /// `1/sqrt(mean(o²) + eps)` per value head and token.
    pub inv_rms: Vec<Vec<f64>>,
    pub normed: Matrix<T>,
    pub gate_pre: Matrix<T>,
    pub mixed: Matrix<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerForward<T = f64> {
    /// `L × d_model`
    pub y: Matrix<T>,
    pub state: DecodeState<T>,
    /// Present for [`LayerKernel::Chunked`].
    pub cache: Option<LayerCache<T>>,
}

/// Depthwise causal convolution: `out[t][c] = Σ_j ker[c][j] · padded[t + j][c]`
/// where `padded` carries `width − 1` history rows before the `L` new rows.
pub fn causal_conv<T: Real>(padded: &Matrix<T>, kernel: &Matrix<T>) -> Result<Matrix<T>> {
    let (ch, width) = kernel.shape();
    if padded.cols() != ch || padded.rows() < width {
        return Err(Error::dim(
            "causal_conv",
            format!("input {:?} with kernel {:?}", padded.shape(), kernel.shape()),
        ));
    }
    let len = padded.rows() + 1 - width;
    let mut out = Matrix::zeros(len, ch);
    for t in 0..len {
        for j in 0..width {
            let src = padded.row(t + j);
            for (c, o) in out.row_mut(t).iter_mut().enumerate() {
                *o += kernel[(c, j)] * src[c];
            }
        }
    }
    Ok(out)
}

fn stack_rows<T: Real>(top: &Matrix<T>, bottom: &Matrix<T>) -> Matrix<T> {
    let mut out = Matrix::zeros(top.rows() + bottom.rows(), bottom.cols());
    out.set_rows(0, top);
    out.set_rows(top.rows(), bottom);
    out
}

fn split_cols<T: Real>(m: &Matrix<T>, parts: usize, width: usize) -> Vec<Matrix<T>> {
    (0..parts).map(|h| m.slice_cols(h * width, (h + 1) * width)).collect()
}

fn check_input<T: Real>(config: &LayerConfig, x: &Matrix<T>) -> Result<()> {
    if x.rows() == 0 || x.cols() != config.d_model {
        return Err(Error::dim(
            "layer",
            format!("input is {:?}, expected L × {} with L ≥ 1", x.shape(), config.d_model),
        ));
    }
    Ok(())
}

struct Path<T> {
    padded: Matrix<T>,
    conv: Matrix<T>,
    act: Matrix<T>,
}

fn run_path<T: Real>(x: &Matrix<T>, w: &Matrix<T>, tail: &Matrix<T>, kernel: &Matrix<T>) -> Result<Path<T>> {
    let padded = stack_rows(tail, &x.dot(w));
    let conv = causal_conv(&padded, kernel)?;
    let act = conv.map(silu);
    Ok(Path { padded, conv, act })
}

fn tail_of<T: Real>(padded: &Matrix<T>, width: usize) -> Matrix<T> {
    padded.slice_rows(padded.rows() + 1 - width, padded.rows())
}

/// Projections from a fresh (zero) convolution history.
pub fn project_qkv<T: Real>(params: &LayerParams<T>, x: &Matrix<T>) -> Result<Projections<T>> {
    let c = &params.config;
    check_input(c, x)?;
    let fresh = DecodeState::fresh(c);
    let q = run_path(x, &params.wq, &fresh.conv_q, &params.conv_q)?;
    let k = run_path(x, &params.wk, &fresh.conv_k, &params.conv_k)?;
    let v = run_path(x, &params.wv, &fresh.conv_v, &params.conv_v)?;
    Ok(normalize(c, &q.act, &k.act, &v.act))
}

fn normalize<T: Real>(c: &LayerConfig, q: &Matrix<T>, k: &Matrix<T>, v: &Matrix<T>) -> Projections<T> {
    Projections {
        q: split_cols(q, c.heads, c.d_k).iter().map(|m| l2_normalize_rows(m, L2_EPS)).collect(),
        k: split_cols(k, c.heads, c.d_k).iter().map(|m| l2_normalize_rows(m, L2_EPS)).collect(),
        v: split_cols(v, c.value_heads, c.d_v),
    }
}

fn gate_preacts<T: Real>(params: &LayerParams<T>, x: &Matrix<T>) -> (Option<Matrix<T>>, Option<Matrix<T>>) {
    (params.wb.as_ref().map(|w| x.dot(w)), params.ww.as_ref().map(|w| x.dot(w)))
}

fn gates_from<T: Real>(c: &LayerConfig, len: usize, erase: Option<&Matrix<T>>, write: Option<&Matrix<T>>) -> Gates<T> {
    let broadcast = |col: Vec<T>, width: usize| {
        let mut m = Matrix::zeros(len, width);
        for (t, v) in col.into_iter().enumerate() {
            m.row_mut(t).fill(v);
        }
        m
    };
    match c.gate_mode {
        GateMode::Untied => {
            let scale = if c.neg_eig { T::cast(2.0) } else { T::one() };
            let b = erase.expect("untied gates carry an erase projection").map(|z| scale * sigmoid(z));
            let w = write.expect("untied gates carry a write projection").map(sigmoid);
            Gates {
                b: split_cols(&b, c.heads, c.d_k),
                w: split_cols(&w, c.value_heads, c.d_v),
            }
        }
        GateMode::Kda | GateMode::Gdn | GateMode::DeltaNet => {
            let beta = erase.expect("tied gates carry a beta projection").map(sigmoid);
            let column = |h: usize| (0..len).map(|t| beta[(t, h)]).collect::<Vec<_>>();
            Gates {
                b: (0..c.heads).map(|h| broadcast(column(h), c.d_k)).collect(),
                w: (0..c.value_heads).map(|j| broadcast(column(j % c.heads), c.d_v)).collect(),
            }
        }
        GateMode::Mamba2 => Gates {
            b: vec![Matrix::zeros(len, c.d_k); c.heads],
            w: vec![Matrix::filled(len, c.d_v, T::one()); c.value_heads],
        },
    }
}

/// `b = σ(x W_b)` (doubled with the widened erase range) and `w = σ(x W_w)`;
/// tied modes broadcast one `β` per key head to both.
pub fn compute_gates<T: Real>(params: &LayerParams<T>, x: &Matrix<T>) -> Result<Gates<T>> {
    check_input(&params.config, x)?;
    let (e, w) = gate_preacts(params, x);
    Ok(gates_from(&params.config, x.rows(), e.as_ref(), w.as_ref()))
}

fn decay_preact<T: Real>(params: &LayerParams<T>, x: &Matrix<T>) -> Option<Matrix<f64>> {
    let (wf, delta) = (params.wf.as_ref()?, params.delta.as_ref()?);
    let mut f = x.dot(wf).cast::<f64>();
    for t in 0..f.rows() {
        for (v, d) in f.row_mut(t).iter_mut().zip(delta.row(0)) {
            *v += d.as_f64();
        }
    }
    Some(f)
}

/// Log-decay per key head from the binary64 pre-activation.
fn decay_from<T: Real>(params: &LayerParams<T>, len: usize, pre: Option<&Matrix<f64>>) -> Vec<Matrix<T>> {
    let c = &params.config;
    let (Some(pre), Some(a)) = (pre, params.a.as_ref()) else {
        return vec![Matrix::zeros(len, c.d_k); c.heads];
    };
    let per_head = pre.cols() / c.heads;
    (0..c.heads)
        .map(|h| {
            let slope = a[(0, h)].as_f64().exp();
            let mut g = Matrix::zeros(len, c.d_k);
            for t in 0..len {
                for i in 0..c.d_k {
                    let f = pre[(t, h * per_head + i % per_head)];
                    g[(t, i)] = T::cast(-slope * softplus(f));
                }
            }
            g
        })
        .collect()
}

/// `g = −exp(a) ⊙ softplus(x W_f + δ)`, evaluated in binary64 and cast at the
/// kernel boundary. Zero when the gate mode has no decay.
pub fn compute_log_decay<T: Real>(params: &LayerParams<T>, x: &Matrix<T>) -> Result<Vec<Matrix<T>>> {
    check_input(&params.config, x)?;
    let pre = decay_preact(params, x);
    Ok(decay_from(params, x.rows(), pre.as_ref()))
}

/// Replicates key-side tensors across value-head groups: value head `j`
/// receives key head `j mod H`.
pub fn broadcast_group_heads<M: Clone>(key_side: &[M], group_factor: usize) -> Result<Vec<M>> {
    if group_factor == 0 || key_side.is_empty() {
        return Err(Error::contract("broadcast_group_heads", "group factor and head count must be ≥ 1"));
    }
    Ok((0..key_side.len() * group_factor)
        .map(|j| key_side[j % key_side.len()].clone())
        .collect())
}

fn tokens_for<T: Real>(mode: GateMode, head: &HeadInputs<T>) -> Vec<TokenGates<f64>> {
    let h = head.cast::<f64>();
    (0..h.len())
        .map(|t| {
            let (q, k, v, g) = (h.q.row(t).to_vec(), h.k.row(t).to_vec(), h.v.row(t).to_vec(), h.g.row(t).to_vec());
            if mode.is_tied() {
                TokenGates::tied(q, k, v, g, h.b[(t, 0)])
            } else {
                TokenGates::gdr2(q, k, v, g, h.b.row(t).to_vec(), h.w.row(t).to_vec()).with_neg_eig(h.neg_eig)
            }
        })
        .collect()
}

/// Runs the layer from a fresh state.
pub fn forward_layer<T: Real>(params: &LayerParams<T>, x: &Matrix<T>, kernel: LayerKernel) -> Result<LayerForward<T>> {
    forward_layer_from(params, x, &DecodeState::fresh(&params.config), kernel)
}

/// Runs the layer continuing from `state`.
pub fn forward_layer_from<T: Real>(
    params: &LayerParams<T>,
    x: &Matrix<T>,
    state: &DecodeState<T>,
    kernel: LayerKernel,
) -> Result<LayerForward<T>> {
    let c = params.config;
    c.validate()?;
    check_input(&c, x)?;
    state.check(&c)?;
    let len = x.rows();

    let pq = run_path(x, &params.wq, &state.conv_q, &params.conv_q)?;
    let pk = run_path(x, &params.wk, &state.conv_k, &params.conv_k)?;
    let pv = run_path(x, &params.wv, &state.conv_v, &params.conv_v)?;
    let proj = normalize(&c, &pq.act, &pk.act, &pv.act);
    let (erase_pre, write_pre) = gate_preacts(params, x);
    let gates = gates_from(&c, len, erase_pre.as_ref(), write_pre.as_ref());
    let decay_pre = decay_preact(params, x);
    let g = decay_from(params, len, decay_pre.as_ref());

    let factor = c.group_factor();
    let q = broadcast_group_heads(&proj.q, factor)?;
    let k = broadcast_group_heads(&proj.k, factor)?;
    let b = broadcast_group_heads(&gates.b, factor)?;
    let g = broadcast_group_heads(&g, factor)?;
    let heads: Vec<HeadInputs<T>> = (0..c.value_heads)
        .map(|j| HeadInputs {
            q: q[j].clone(),
            k: k[j].clone(),
            v: proj.v[j].clone(),
            b: b[j].clone(),
            w: gates.w[j].clone(),
            g: g[j].clone(),
            neg_eig: c.neg_eig,
        })
        .collect();

    let mut o = Vec::with_capacity(c.value_heads);
    let mut finals = Vec::with_capacity(c.value_heads);
    let mut runs = Vec::new();
    for (head, s0) in heads.iter().zip(&state.heads) {
        match kernel {
            LayerKernel::Chunked => {
                let opts = ForwardOptions {
                    chunk_size: c.chunk_size,
                    solve: c.solve,
                    retention: Retention::Retain,
                };
                let run = forward_chunked(head, &s0.s.cast(), opts)?;
                o.push(run.outputs.clone());
                finals.push(HeadState::new(run.final_state.cast()));
                runs.push(run);
            }
            LayerKernel::Tokenwise => {
                let run = run_sequence_reference(c.gate_mode.rule(), &tokens_for(c.gate_mode, head), s0)?;
                o.push(run.outputs.cast());
                finals.push(run.final_state().expect("L ≥ 1").clone());
            }
        }
    }

    let mut normed = Matrix::zeros(len, c.value_dim());
    let mut inv_rms = Vec::with_capacity(c.value_heads);
    for (j, oj) in o.iter().enumerate() {
        let weight = params.rms.row(j);
        let mut inv_j = Vec::with_capacity(len);
        for t in 0..len {
            let row = oj.row(t);
            let ms = row.iter().map(|&v| v.as_f64() * v.as_f64()).sum::<f64>() / c.d_v as f64;
            let inv = 1.0 / (ms + RMS_EPS).sqrt();
            let inv_t = T::cast(inv);
            for (i, (&v, &w)) in row.iter().zip(weight).enumerate() {
                normed[(t, j * c.d_v + i)] = v * inv_t * w;
            }
            inv_j.push(inv);
        }
        inv_rms.push(inv_j);
    }
    let gate_pre = x.dot(&params.wgate);
    let mixed = normed.zip_map(&gate_pre, |n, z| n * silu(z));
    let y = mixed.dot(&params.wo);

    let width = c.conv_width;
    let new_state = DecodeState {
        heads: finals,
        conv_q: tail_of(&pq.padded, width),
        conv_k: tail_of(&pk.padded, width),
        conv_v: tail_of(&pv.padded, width),
    };
    let cache = (kernel == LayerKernel::Chunked).then(|| LayerCache {
        x: x.clone(),
        padded_q: pq.padded,
        padded_k: pk.padded,
        padded_v: pv.padded,
        conv_q: pq.conv,
        conv_k: pk.conv,
        conv_v: pv.conv,
        act_q: pq.act,
        act_k: pk.act,
        erase_pre,
        write_pre,
        decay_pre,
        heads,
        runs,
        o,
        inv_rms,
        normed,
        gate_pre,
        mixed,
    });
    Ok(LayerForward {
        y,
        state: new_state,
        cache,
    })
}

/// One token through the recurrent path.
pub fn decode_step<T: Real>(
    params: &LayerParams<T>,
    state: &DecodeState<T>,
    x_t: &[T],
) -> Result<(Vec<T>, DecodeState<T>)> {
    let x = Matrix::from_vec(1, x_t.len(), x_t.to_vec())?;
    let out = forward_layer_from(params, &x, state, LayerKernel::Tokenwise)?;
    Ok((out.y.row(0).to_vec(), out.state))
}

/// [`decode_step`] over every row of `x`.
pub fn decode_sequence<T: Real>(
    params: &LayerParams<T>,
    x: &Matrix<T>,
    state: &DecodeState<T>,
) -> Result<(Matrix<T>, DecodeState<T>)> {
    check_input(&params.config, x)?;
    let mut y = Matrix::zeros(x.rows(), params.config.d_model);
    let mut state = state.clone();
    for t in 0..x.rows() {
        let (row, next) = decode_step(params, &state, x.row(t))?;
        y.set_row(t, &row);
        state = next;
    }
    Ok((y, state))
}
