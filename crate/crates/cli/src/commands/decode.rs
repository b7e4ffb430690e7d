//! `decode`: greedy generation from a checkpoint through the recurrent path.
//!
//! A checkpoint is a tensor file holding the layer tensors under their
//! parameter names plus `embed` (`V × d_model`) and `readout`
//! (`d_model × V`). The layer dimensions come from the run configuration.
//! The state dump holds `state.{j}` (binary64, one per value head) and the
//! convolution tails `tail.conv_q`, `tail.conv_k`, `tail.conv_v`.

use std::path::Path;

use gdr2_core::layer::{decode_step, forward_layer, init_params, DecodeState, LayerConfig, LayerKernel, LayerParams};
use gdr2_core::rules::HeadState;
use gdr2_core::{Matrix, Precision, Real, Rng};

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::report::{Bound, Report};
use crate::tensor_io::{TensorError, TensorFile};

pub const TOL_PROMPT_STATE: f64 = 1e-10;
/// Binary32 models: the chunked layer runs in binary32 while decoding keeps
/// the state in binary64.
pub const TOL_PROMPT_STATE_F32: f64 = 5e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T = f64> {
    pub layer: LayerParams<T>,
    pub embed: Matrix<T>,
    pub readout: Matrix<T>,
}

impl<T: Real> Checkpoint<T> {
    pub fn vocab(&self) -> usize {
        self.embed.rows()
    }

    pub fn to_file(&self) -> TensorFile {
        let mut f = TensorFile::new();
        for (name, m) in self.layer.tensors() {
            f.push_matrix(name, m);
        }
        f.push_matrix("embed", &self.embed);
        f.push_matrix("readout", &self.readout);
        f
    }

    pub fn from_file(file: &TensorFile, config: LayerConfig) -> Result<Self> {
        let mut named = Vec::new();
        for t in &file.tensors {
            if t.name != "embed" && t.name != "readout" {
                named.push((t.name.clone(), t.to_matrix::<T>()?));
            }
        }
        let layer = LayerParams::from_named(config, named)?;
        let embed: Matrix<T> = file.matrix("embed")?;
        let readout: Matrix<T> = file.matrix("readout")?;
        if embed.cols() != config.d_model || readout.shape() != (config.d_model, embed.rows()) {
            return Err(TensorError::Shape {
                name: "embed/readout".into(),
                detail: format!(
                    "embed {:?} and readout {:?} do not fit d_model = {}",
                    embed.shape(),
                    readout.shape(),
                    config.d_model
                ),
            }
            .into());
        }
        Ok(Checkpoint { layer, embed, readout })
    }

    /// Freshly initialized layer, normal embeddings and a small random readout.
    pub fn random(config: LayerConfig, vocab: usize, seed: u64) -> Result<Self> {
        let mut rng = Rng::seed(seed);
        let layer = init_params::<f64>(config, &mut rng)?;
        let embed = Matrix::from_vec(vocab, config.d_model, (0..vocab * config.d_model).map(|_| rng.normal()).collect())?;
        let readout = rng.matrix(config.d_model, vocab, -0.5, 0.5);
        Ok(Checkpoint {
            layer: layer.cast(),
            embed: embed.cast(),
            readout: readout.cast(),
        })
    }

    fn logits(&self, x_t: &[T], y_t: &[T]) -> Vec<f64> {
        let h: Vec<T> = x_t.iter().zip(y_t).map(|(&a, &b)| a + b).collect();
        self.readout.t_dot_vec(&h).into_iter().map(|z| z.as_f64()).collect()
    }
}

impl From<TensorError> for CliError {
    fn from(source: TensorError) -> Self {
        CliError::Tensor {
            path: "<memory>".into(),
            source,
        }
    }
}

/// Whitespace-separated token ids; errors carry the byte offset of the token.
pub fn parse_prompt(text: &str, vocab: usize, path: &Path) -> Result<Vec<usize>> {
    let mut tokens = Vec::new();
    let mut offset = 0;
    for piece in text.split_inclusive(char::is_whitespace) {
        let word = piece.trim_end();
        if !word.is_empty() {
            let err = |detail: String| CliError::Prompt {
                path: path.to_path_buf(),
                offset,
                detail,
            };
            let id: usize = word.parse().map_err(|_| err(format!("token {word:?} is not an id")))?;
            if id >= vocab {
                return Err(err(format!("token {id} outside the vocabulary of {vocab}")));
            }
            tokens.push(id);
        }
        offset += piece.len();
    }
    if tokens.is_empty() {
        return Err(CliError::Prompt {
            path: path.to_path_buf(),
            offset: text.len(),
            detail: "empty prompt".into(),
        });
    }
    Ok(tokens)
}

pub fn state_file<T: Real>(state: &DecodeState<T>) -> TensorFile {
    let mut f = TensorFile::new();
    for (j, h) in state.heads.iter().enumerate() {
        f.push_matrix(format!("state.{j}"), &h.s);
    }
    f.push_matrix("tail.conv_q", &state.conv_q);
    f.push_matrix("tail.conv_k", &state.conv_k);
    f.push_matrix("tail.conv_v", &state.conv_v);
    f
}

pub fn state_from_file<T: Real>(file: &TensorFile, config: &LayerConfig) -> Result<DecodeState<T>> {
    let heads = (0..config.value_heads)
        .map(|j| Ok(HeadState::new(file.matrix::<f64>(&format!("state.{j}"))?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(DecodeState {
        heads,
        conv_q: file.matrix("tail.conv_q")?,
        conv_k: file.matrix("tail.conv_k")?,
        conv_v: file.matrix("tail.conv_v")?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoded<T = f64> {
    /// Prompt followed by the generated tokens.
    pub tokens: Vec<usize>,
    pub generated: Vec<usize>,
    pub state: DecodeState<T>,
    pub report: Report,
}

/// Feeds the prompt token by token, then extends it greedily by `steps`
/// tokens. Also checks the state after the prompt against the chunked layer.
pub fn generate<T: Real>(ckpt: &Checkpoint<T>, prompt: &[usize], steps: usize) -> Result<Decoded<T>> {
    let config = ckpt.layer.config;
    let mut state = DecodeState::fresh(&config);
    let mut last = Vec::new();
    for &tok in prompt {
        let x_t = ckpt.embed.row(tok);
        let (y_t, next) = decode_step(&ckpt.layer, &state, x_t)?;
        last = ckpt.logits(x_t, &y_t);
        state = next;
    }

    let mut x = Matrix::zeros(prompt.len(), config.d_model);
    for (t, &tok) in prompt.iter().enumerate() {
        x.set_row(t, ckpt.embed.row(tok));
    }
    let chunked = forward_layer(&ckpt.layer, &x, LayerKernel::Chunked)?;
    let mut diff: f64 = 0.0;
    for (a, b) in chunked.state.heads.iter().zip(&state.heads) {
        diff = diff.max(a.s.max_abs_diff(&b.s));
    }
    diff = diff
        .max(chunked.state.conv_q.max_abs_diff(&state.conv_q))
        .max(chunked.state.conv_k.max_abs_diff(&state.conv_k))
        .max(chunked.state.conv_v.max_abs_diff(&state.conv_v));
    let mut report = Report::new();
    report.check(
        "decode",
        &format!("prompt={},gate_mode={},{}", prompt.len(), config.gate_mode, T::PRECISION),
        "state_vs_chunked",
        diff,
        Bound::Le(match T::PRECISION {
            Precision::Binary64 => TOL_PROMPT_STATE,
            Precision::Binary32 => TOL_PROMPT_STATE_F32,
        }),
    );

    let mut tokens = prompt.to_vec();
    let mut generated = Vec::with_capacity(steps);
    for _ in 0..steps {
        let next_tok = (0..last.len()).fold(0, |b, i| if last[i] > last[b] { i } else { b });
        generated.push(next_tok);
        tokens.push(next_tok);
        let x_t = ckpt.embed.row(next_tok);
        let (y_t, next) = decode_step(&ckpt.layer, &state, x_t)?;
        last = ckpt.logits(x_t, &y_t);
        state = next;
    }
    Ok(Decoded {
        tokens,
        generated,
        state,
        report,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeOutput {
    pub tokens: Vec<usize>,
    pub generated: Vec<usize>,
    pub state: TensorFile,
    pub report: Report,
}

fn run_typed<T: Real>(file: &TensorFile, config: LayerConfig, prompt_path: &Path, steps: usize) -> Result<DecodeOutput> {
    let ckpt = Checkpoint::<T>::from_file(file, config)?;
    let text = std::fs::read_to_string(prompt_path).map_err(|e| CliError::io(prompt_path, e))?;
    let prompt = parse_prompt(&text, ckpt.vocab(), prompt_path)?;
    let out = generate(&ckpt, &prompt, steps)?;
    Ok(DecodeOutput {
        tokens: out.tokens,
        generated: out.generated,
        state: state_file(&out.state),
        report: out.report,
    })
}

/// Layer configuration of a checkpoint: the run configuration's keys over
/// the defaults.
pub fn checkpoint_config(cfg: &RunConfig) -> Result<LayerConfig> {
    cfg.layer_config(LayerConfig::default())
}

/// Precision is the configured one, else that of the stored `wq`.
pub fn run(cfg: &RunConfig, params: &Path, prompt: &Path, steps: usize) -> Result<DecodeOutput> {
    let file = TensorFile::read(params)?;
    let config = checkpoint_config(cfg)?;
    let stored = file.get("wq").map(|t| t.precision());
    let with_path = |e: CliError| match e {
        CliError::Tensor { source, .. } => CliError::Tensor {
            path: params.to_path_buf(),
            source,
        },
        other => other,
    };
    match cfg.precision.or(stored).unwrap_or(Precision::Binary64) {
        Precision::Binary64 => run_typed::<f64>(&file, config, prompt, steps),
        Precision::Binary32 => run_typed::<f32>(&file, config, prompt, steps),
    }
    .map_err(with_path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prompt_errors_carry_byte_offsets() {
        let p = Path::new("p.txt");
        assert_eq!(parse_prompt(" 1 2\n3\t", 16, p).unwrap(), vec![1, 2, 3]);
        match parse_prompt("1 22 x", 16, p).unwrap_err() {
            CliError::Prompt { offset, .. } => assert_eq!(offset, 2),
            e => panic!("{e}"),
        }
        match parse_prompt("1  4 x5", 16, p).unwrap_err() {
            CliError::Prompt { offset, detail, .. } => {
                assert_eq!(offset, 5);
                assert!(detail.contains("x5"));
            }
            e => panic!("{e}"),
        }
        assert!(parse_prompt("  \n", 16, p).is_err());
    }

    #[test]
    fn checkpoint_round_trips() {
        let config = LayerConfig::default();
        let ckpt = Checkpoint::<f32>::random(config, 16, 4).unwrap();
        let bytes = ckpt.to_file().to_bytes().unwrap();
        let back = Checkpoint::<f32>::from_file(&TensorFile::from_bytes(&bytes).unwrap(), config).unwrap();
        assert_eq!(back, ckpt);
        assert!(Checkpoint::<f64>::from_file(&TensorFile::from_bytes(&bytes).unwrap(), config).is_err());
    }
}
