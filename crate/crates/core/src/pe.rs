//! Sinusoidal positional encodings with a tunable temperature.
//!
//! A scalar `x` maps to `d_out` values: entry `2i` is `sin(x′ / T^(2i/b))` and entry
//! `2i+1` is `cos(x′ / T^(2i/b))`, where `x′ = 2πx` when `two_pi_scale` is on and
//! `b` is either the per-scalar output length (default) or the model dimension.
//! Points concatenate two `D/2` encodings and anchors concatenate four, which puts
//! an anchor's encoding in `R^{2D}` before the positional-query MLP brings it back
//! to `R^D`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Mlp;
use crate::tensor::{sigmoid, ParamStore, Tape, Tensor, Var};

/// Logit bound giving coordinates in `[1e-4, 1 − 1e-4]`.
pub const LOGIT_CLAMP: f64 = 9.21;
pub const EPS_BOX: f64 = 1e-4;

/// Which length normalizes the frequency exponent.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ExponentBase {
    /// The length of the encoded vector for a single scalar.
    #[default]
    OutputDim,
    /// The model dimension `D`, regardless of how the encoding is tiled.
    ModelDim,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PeConfig {
    pub d_model: usize,
    pub temperature: f64,
    pub two_pi_scale: bool,
    pub exponent_base: ExponentBase,
}

impl Default for PeConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            temperature: 20.0,
            two_pi_scale: true,
            exponent_base: ExponentBase::OutputDim,
        }
    }
}

impl PeConfig {
    pub fn with_temperature(mut self, t: f64) -> Self {
        self.temperature = t;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || !self.d_model.is_multiple_of(4) {
            return Err(Error::Config {
                key: "pe.d_model".into(),
                detail: format!("{} is not a positive multiple of 4", self.d_model),
            });
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config {
                key: "pe.temperature".into(),
                detail: format!("{} must be positive and finite", self.temperature),
            });
        }
        Ok(())
    }

    /// Angular multipliers `f_i` with `PE(x)_{2i} = sin(f_i·x)`, for `d_out` outputs.
    pub fn frequencies(&self, d_out: usize) -> Result<Vec<f64>> {
        if !d_out.is_multiple_of(2) {
            return Err(Error::contract(format!(
                "positional encoding length must be even, got {d_out}"
            )));
        }
        let base = match self.exponent_base {
            ExponentBase::OutputDim => d_out,
            ExponentBase::ModelDim => self.d_model,
        } as f64;
        let scale = if self.two_pi_scale {
            std::f64::consts::TAU
        } else {
            1.0
        };
        Ok((0..d_out / 2)
            .map(|i| scale / self.temperature.powf(2.0 * i as f64 / base))
            .collect())
    }
}

/// Encodes one normalized coordinate into `d_out` values.
pub fn pe_scalar(x: f64, d_out: usize, cfg: &PeConfig) -> Result<Vec<f64>> {
    let freqs = cfg.frequencies(d_out)?;
    let mut out = Vec::with_capacity(d_out);
    for f in freqs {
        let (s, c) = (f * x).sin_cos();
        out.push(s);
        out.push(c);
    }
    Ok(out)
}

/// `Cat(PE(x), PE(y))`, length `D`.
pub fn pe_point(x: f64, y: f64, cfg: &PeConfig) -> Result<Vec<f64>> {
    let half = cfg.d_model / 2;
    let mut out = pe_scalar(x, half, cfg)?;
    out.extend(pe_scalar(y, half, cfg)?);
    Ok(out)
}

/// `Cat(PE(x), PE(y), PE(w), PE(h))`, length `2D`.
pub fn pe_anchor(a: &AnchorBox, cfg: &PeConfig) -> Result<Vec<f64>> {
    let half = cfg.d_model / 2;
    let mut out = Vec::with_capacity(2 * cfg.d_model);
    for c in a.coords() {
        out.extend(pe_scalar(c, half, cfg)?);
    }
    Ok(out)
}

/// Normalized box `(cx, cy, w, h)` stored as inverse-sigmoid logits.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorBox {
    pub logits: [f64; 4],
}

impl AnchorBox {
    pub fn from_logits(logits: [f64; 4]) -> Self {
        Self { logits }
    }

    pub fn from_coords(coords: [f64; 4]) -> Self {
        Self {
            logits: coords.map(crate::decoder::inverse_sigmoid),
        }
    }

    /// `(cx, cy, w, h)`, each in `[1e-4, 1 − 1e-4]`.
    pub fn coords(&self) -> [f64; 4] {
        self.logits
            .map(|l| sigmoid(l.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)))
    }

    pub fn is_valid(&self) -> bool {
        self.logits.iter().all(|l| l.is_finite())
            && self.coords().iter().all(|&c| c > 0.0 && c < 1.0)
    }
}

/// Encodes an `n × k` tensor of coordinates into `n × (k·D/2)` on the tape.
pub fn encode_coords(tape: &mut Tape, coords: Var, cfg: &PeConfig) -> Result<Var> {
    let freqs = cfg.frequencies(cfg.d_model / 2)?;
    tape.sincos(coords, &freqs)
}

/// Shared anchor → positional-query MLP: linear(2D → D), ReLU, linear(D → D).
#[derive(Clone, Debug)]
pub struct PositionalQueryMlp {
    pub mlp: Mlp,
}

impl PositionalQueryMlp {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d_model: usize, rng: &mut R) -> Self {
        Self {
            mlp: Mlp::new(store, name, &[2 * d_model, d_model, d_model], rng),
        }
    }

    /// `anchor_coords` is `n × 4` in sigmoid space; output is `n × D`.
    pub fn forward(&self, tape: &mut Tape, anchor_coords: Var, cfg: &PeConfig) -> Result<Var> {
        let enc = encode_coords(tape, anchor_coords, cfg)?;
        if tape.shape(enc)[1] != self.mlp.d_in() {
            return Err(Error::contract(format!(
                "positional MLP expects {} inputs, anchor encoding has {}",
                self.mlp.d_in(),
                tape.shape(enc)[1]
            )));
        }
        self.mlp.forward(tape, enc)
    }
}

/// `P_q = MLP(PE(A_q))` for a single anchor, evaluated without recording gradients.
pub fn positional_query(
    a: &AnchorBox,
    params: &PositionalQueryMlp,
    store: &ParamStore,
    cfg: &PeConfig,
) -> Result<Vec<f64>> {
    let mut tape = Tape::with_params(store, false);
    let coords = tape.constant(Tensor::from_parts(vec![1, 4], a.coords().to_vec()));
    let p = params.forward(&mut tape, coords, cfg)?;
    Ok(tape.value(p).data().to_vec())
}

/// Cell centers `((j + 0.5)/W, (i + 0.5)/H)` in row-major order.
pub fn grid_centers(h: usize, w: usize) -> Vec<(f64, f64)> {
    (0..h)
        .flat_map(|i| (0..w).map(move |j| ((j as f64 + 0.5) / w as f64, (i as f64 + 0.5) / h as f64)))
        .collect()
}

/// `pe_point` of every cell center as an `(H·W) × D` tensor.
pub fn grid_encoding(h: usize, w: usize, cfg: &PeConfig) -> Result<Tensor> {
    let mut data = Vec::with_capacity(h * w * cfg.d_model);
    for (x, y) in grid_centers(h, w) {
        data.extend(pe_point(x, y, cfg)?);
    }
    Tensor::new(vec![h * w, cfg.d_model], data)
}
