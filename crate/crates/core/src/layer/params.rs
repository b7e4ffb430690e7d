use crate::error::{Error, Result};
use crate::layer::LayerConfig;
use crate::math::{Matrix, Rng};
use crate::real::Real;

/// Checkpoint names, in file order.
pub const PARAM_NAMES: [&str; 14] = [
    "wq", "wk", "wv", "wb", "ww", "wf", "a", "delta", "wgate", "wo", "conv_q", "conv_k", "conv_v", "rms",
];

/// Xavier gain for every linear weight.
const GAIN: f64 = 0.176_776_695_296_636_9; // 2^-2.5

/// Weights are stored `in × out`, so a projection is `x · W`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T = f64> {
    pub config: LayerConfig,
    pub wq: Matrix<T>,
    pub wk: Matrix<T>,
    pub wv: Matrix<T>,
    pub wb: Option<Matrix<T>>,
    pub ww: Option<Matrix<T>>,
    pub wf: Option<Matrix<T>>,
    /// `1 × H` log-slopes, one per key head.
    pub a: Option<Matrix<T>>,
    /// `1 × decay_width` biases.
    pub delta: Option<Matrix<T>>,
    pub wgate: Matrix<T>,
    pub wo: Matrix<T>,
    /// `channels × conv_width` depthwise kernels.
    pub conv_q: Matrix<T>,
    pub conv_k: Matrix<T>,
    pub conv_v: Matrix<T>,
    /// `H_v × d_v` RMSNorm weights.
    pub rms: Matrix<T>,
}

/// Shape of every tensor the configuration carries, in [`PARAM_NAMES`] order.
fn shapes(c: &LayerConfig) -> Vec<(&'static str, (usize, usize))> {
    let (dm, kd, vd, w) = (c.d_model, c.key_dim(), c.value_dim(), c.conv_width);
    let mut out = vec![("wq", (dm, kd)), ("wk", (dm, kd)), ("wv", (dm, vd))];
    if let Some(n) = c.erase_width() {
        out.push(("wb", (dm, n)));
    }
    if let Some(n) = c.write_width() {
        out.push(("ww", (dm, n)));
    }
    if let Some(n) = c.decay_width() {
        out.push(("wf", (dm, n)));
        out.push(("a", (1, c.heads)));
        out.push(("delta", (1, n)));
    }
    out.extend([
        ("wgate", (dm, vd)),
        ("wo", (vd, dm)),
        ("conv_q", (kd, w)),
        ("conv_k", (kd, w)),
        ("conv_v", (vd, w)),
        ("rms", (c.value_heads, c.d_v)),
    ]);
    out
}

impl<T: Real> LayerParams<T> {
    /// All-zero parameters of the right shapes.
    pub fn zeros(config: LayerConfig) -> Result<Self> {
        config.validate()?;
        let named = shapes(&config)
            .into_iter()
            .map(|(n, (r, c))| (n.to_string(), Matrix::zeros(r, c)))
            .collect();
        Self::from_named(config, named)
    }

    /// Present tensors with their checkpoint names.
    pub fn tensors(&self) -> Vec<(&'static str, &Matrix<T>)> {
        let mut out = vec![("wq", &self.wq), ("wk", &self.wk), ("wv", &self.wv)];
        for (n, m) in [
            ("wb", &self.wb),
            ("ww", &self.ww),
            ("wf", &self.wf),
            ("a", &self.a),
            ("delta", &self.delta),
        ] {
            if let Some(m) = m {
                out.push((n, m));
            }
        }
        out.extend([
            ("wgate", &self.wgate),
            ("wo", &self.wo),
            ("conv_q", &self.conv_q),
            ("conv_k", &self.conv_k),
            ("conv_v", &self.conv_v),
            ("rms", &self.rms),
        ]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Matrix<T>)> {
        let mut out = vec![("wq", &mut self.wq), ("wk", &mut self.wk), ("wv", &mut self.wv)];
        for (n, m) in [
            ("wb", &mut self.wb),
            ("ww", &mut self.ww),
            ("wf", &mut self.wf),
            ("a", &mut self.a),
            ("delta", &mut self.delta),
        ] {
            if let Some(m) = m {
                out.push((n, m));
            }
        }
        out.extend([
            ("wgate", &mut self.wgate),
            ("wo", &mut self.wo),
            ("conv_q", &mut self.conv_q),
            ("conv_k", &mut self.conv_k),
            ("conv_v", &mut self.conv_v),
            ("rms", &mut self.rms),
        ]);
        out
    }

    pub fn tensor(&self, name: &str) -> Option<&Matrix<T>> {
        self.tensors().into_iter().find(|(n, _)| *n == name).map(|(_, m)| m)
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Matrix<T>> {
        self.tensors_mut().into_iter().find(|(n, _)| *n == name).map(|(_, m)| m)
    }

    /// Rebuilds parameters from named tensors, checking names and shapes
    /// against `config`.
    pub fn from_named(config: LayerConfig, tensors: Vec<(String, Matrix<T>)>) -> Result<Self> {
        const OP: &str = "LayerParams::from_named";
        config.validate()?;
        let expected = shapes(&config);
        let mut slots: Vec<Option<Matrix<T>>> = vec![None; PARAM_NAMES.len()];
        for (name, m) in tensors {
            let Some(&(_, shape)) = expected.iter().find(|(n, _)| *n == name) else {
                return Err(Error::contract(OP, format!("unexpected tensor {name:?}")));
            };
            if m.shape() != shape {
                return Err(Error::dim(OP, format!("{name} is {:?}, expected {shape:?}", m.shape())));
            }
            let idx = PARAM_NAMES.iter().position(|n| *n == name).expect("expected names are known");
            if slots[idx].replace(m).is_some() {
                return Err(Error::contract(OP, format!("tensor {name:?} given twice")));
            }
        }
        let mut take = |name: &str| -> Result<Option<Matrix<T>>> {
            let idx = PARAM_NAMES.iter().position(|n| *n == name).expect("known name");
            let want = expected.iter().any(|(n, _)| *n == name);
            match (slots[idx].take(), want) {
                (Some(m), true) => Ok(Some(m)),
                (None, false) => Ok(None),
                (None, true) => Err(Error::contract(OP, format!("missing tensor {name:?}"))),
                (Some(_), false) => unreachable!("rejected above"),
            }
        };
        let req = |m: Option<Matrix<T>>| m.expect("required tensors are always expected");
        Ok(LayerParams {
            config,
            wq: req(take("wq")?),
            wk: req(take("wk")?),
            wv: req(take("wv")?),
            wb: take("wb")?,
            ww: take("ww")?,
            wf: take("wf")?,
            a: take("a")?,
            delta: take("delta")?,
            wgate: req(take("wgate")?),
            wo: req(take("wo")?),
            conv_q: req(take("conv_q")?),
            conv_k: req(take("conv_k")?),
            conv_v: req(take("conv_v")?),
            rms: req(take("rms")?),
        })
    }

    /// Owned `(name, tensor)` pairs in checkpoint order.
    pub fn into_named(self) -> Vec<(String, Matrix<T>)> {
        self.tensors().into_iter().map(|(n, m)| (n.to_string(), m.clone())).collect()
    }

    pub fn cast<U: Real>(&self) -> LayerParams<U> {
        let named = self.tensors().into_iter().map(|(n, m)| (n.to_string(), m.cast())).collect();
        LayerParams::from_named(self.config, named).expect("same layout")
    }

    /// `self −= lr · grad`, tensor by tensor.
    pub fn descend(&mut self, grad: &LayerParams<T>, lr: T) {
        for ((_, p), (_, g)) in self.tensors_mut().into_iter().zip(grad.tensors()) {
            for (x, &d) in p.data_mut().iter_mut().zip(g.data()) {
                *x -= lr * d;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, m)| m.is_finite())
    }

    pub fn num_values(&self) -> usize {
        self.tensors().iter().map(|(_, m)| m.data().len()).sum()
    }
}

/// `gain · sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    GAIN * (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// `x` with `softplus(x) = y`, for `y > 0`.
fn softplus_inverse(y: f64) -> f64 {
    if y > 20.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// `i`-th of `n` points spaced geometrically over `[lo, hi]`; the geometric
/// midpoint when `n = 1`.
fn geometric(lo: f64, hi: f64, i: usize, n: usize) -> f64 {
    if n == 1 {
        (lo * hi).sqrt()
    } else {
        lo * (hi / lo).powf(i as f64 / (n - 1) as f64)
    }
}

/// Xavier-uniform linear weights, uniform conv kernels with bound
/// `1/sqrt(width)`, unit RMSNorm weights. `exp(a)` is geometric over `[1, 8]`
/// across key heads; `δ` is set so the decay at zero input is spread over
/// `[0.9, 0.999]` across the decay channels of a head.
pub fn init_params<T: Real>(config: LayerConfig, rng: &mut Rng) -> Result<LayerParams<T>> {
    config.validate()?;
    let mut named = Vec::new();
    for (name, (r, c)) in shapes(&config) {
        let m = match name {
            "a" => Matrix::from_vec(1, c, (0..c).map(|h| geometric(1.0, 8.0, h, c).ln()).collect())?,
            "delta" => {
                let per_head = config.decay_channels().expect("delta implies a decay branch");
                let vals = (0..c)
                    .map(|i| {
                        let (h, ch) = (i / per_head, i % per_head);
                        let slope = geometric(1.0, 8.0, h, config.heads);
                        let alpha = if per_head == 1 {
                            (0.9f64 * 0.999).sqrt()
                        } else {
                            0.9 + (0.999 - 0.9) * ch as f64 / (per_head - 1) as f64
                        };
                        softplus_inverse(-alpha.ln() / slope)
                    })
                    .collect();
                Matrix::from_vec(1, c, vals)?
            }
            "conv_q" | "conv_k" | "conv_v" => {
                let bound = 1.0 / (c as f64).sqrt();
                rng.matrix(r, c, -bound, bound)
            }
            "rms" => Matrix::filled(r, c, 1.0),
            _ => {
                let bound = xavier_bound(r, c);
                rng.matrix(r, c, -bound, bound)
            }
        };
        named.push((name.to_string(), m.cast()));
    }
    LayerParams::from_named(config, named)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layer::GateMode;

    #[test]
    fn init_is_deterministic_and_bounded() {
        let cfg = LayerConfig::default();
        let a: LayerParams = init_params(cfg, &mut Rng::seed(5)).unwrap();
        let b: LayerParams = init_params(cfg, &mut Rng::seed(5)).unwrap();
        assert_eq!(a, b);
        let bound = xavier_bound(cfg.d_model, cfg.key_dim());
        assert!(a.wq.data().iter().all(|x| x.abs() <= bound));
        assert!(a.rms.data().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn xavier_mean_magnitude() {
        let cfg = LayerConfig {
            d_model: 100,
            heads: 1,
            value_heads: 1,
            d_k: 100,
            d_v: 4,
            ..Default::default()
        };
        let p: LayerParams = init_params(cfg, &mut Rng::seed(6)).unwrap();
        let bound = xavier_bound(100, 100);
        let mean = p.wq.data().iter().map(|x| x.abs()).sum::<f64>() / 1e4;
        assert!((mean / (bound / 2.0) - 1.0).abs() < 0.05);
    }

    #[test]
    fn decay_init_spans_the_target_range() {
        let cfg = LayerConfig::default();
        let p: LayerParams = init_params(cfg, &mut Rng::seed(7)).unwrap();
        let a = p.a.as_ref().unwrap();
        assert!((a[(0, 0)].exp() - 1.0).abs() < 1e-12);
        assert!((a[(0, 1)].exp() - 8.0).abs() < 1e-12);
        let delta = p.delta.as_ref().unwrap();
        for h in 0..2 {
            for (c, want) in [(0, 0.9), (15, 0.999)] {
                let d = delta[(0, h * 16 + c)];
                let alpha = (-a[(0, h)].exp() * (d.exp().ln_1p())).exp();
                assert!((alpha - want).abs() < 1e-12, "{alpha} vs {want}");
            }
        }
    }

    #[test]
    fn named_round_trip_and_layout_checks() {
        for mode in GateMode::ALL {
            let cfg = LayerConfig {
                gate_mode: mode,
                ..Default::default()
            };
            let p: LayerParams = init_params(cfg, &mut Rng::seed(8)).unwrap();
            let names: Vec<_> = p.tensors().iter().map(|(n, _)| *n).collect();
            assert_eq!(names.contains(&"ww"), mode == GateMode::Untied);
            let back = LayerParams::from_named(cfg, p.clone().into_named()).unwrap();
            assert_eq!(back, p);
        }
        let cfg = LayerConfig::default();
        let mut named = LayerParams::<f64>::zeros(cfg).unwrap().into_named();
        named.pop();
        assert!(LayerParams::from_named(cfg, named.clone()).is_err());
        named.push(("bogus".into(), Matrix::zeros(1, 1)));
        assert!(LayerParams::from_named(cfg, named).is_err());
    }
}
