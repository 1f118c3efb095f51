//! Patch encoder plus decoder, sharing one parameter store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{multi_head_attention_tape, FeatureGrid};
use crate::decoder::{Decoder, DecoderConfig, DecoderOutput, ForwardOptions, GridVar};
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear};
use crate::pe::grid_encoding;
use crate::tensor::{ParamStore, Tape, Tensor, Var};

use super::scene::Scene;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub patch_size: usize,
    pub image_size: usize,
    pub encoder_layers: usize,
    pub decoder: DecoderConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            patch_size: 8,
            image_size: 64,
            encoder_layers: 1,
            decoder: DecoderConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config {
                key: "model.patch_size".into(),
                detail: format!("must divide image_size = {}", self.image_size),
            });
        }
        self.decoder.validate()
    }
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln1: LayerNorm,
    ffn1: Linear,
    ffn2: Linear,
    ln2: LayerNorm,
}

/// Encoder followed by the anchor decoder.
#[derive(Clone, Debug)]
pub struct Detector {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub decoder: Decoder,
    embed: Linear,
    encoder: Vec<EncoderLayer>,
    pos: Tensor,
}

impl Detector {
    /// Fresh model; `seed` fully determines the initialization.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = cfg.decoder.d_model;
        let p = cfg.patch_size;
        let embed = Linear::new(&mut store, "encoder.patch_embed", p * p, d, &mut rng);
        let encoder = (0..cfg.encoder_layers)
            .map(|l| {
                let n = format!("encoder.layers.{l}");
                let mut lin = |s: &str, a, b| Linear::new(&mut store, &format!("{n}.{s}"), a, b, &mut rng);
                let (q, k, v, o) = (lin("attn.q", d, d), lin("attn.k", d, d), lin("attn.v", d, d), lin("attn.out", d, d));
                let ffn1 = lin("ffn.0", d, cfg.decoder.d_ffn);
                let ffn2 = lin("ffn.1", cfg.decoder.d_ffn, d);
                EncoderLayer {
                    q,
                    k,
                    v,
                    o,
                    ffn1,
                    ffn2,
                    ln1: LayerNorm::new(&mut store, &format!("{n}.norm1"), d),
                    ln2: LayerNorm::new(&mut store, &format!("{n}.norm2"), d),
                }
            })
            .collect();
        let decoder = Decoder::new(&mut store, cfg.decoder.clone(), &mut rng)?;
        let side = cfg.grid_side();
        let pos = grid_encoding(side, side, &cfg.decoder.pe())?;
        Ok(Self {
            cfg,
            store,
            decoder,
            embed,
            encoder,
            pos,
        })
    }

    /// `(H·W) × P²` matrix of non-overlapping patches, row-major over the grid.
    pub fn patchify(&self, scene: &Scene) -> Result<Tensor> {
        let n = self.cfg.image_size;
        if scene.size != n || scene.image.len() != n * n {
            return Err(Error::shape("patchify", &[scene.size, scene.size], &[n, n]));
        }
        let p = self.cfg.patch_size;
        let side = n / p;
        let mut out = Vec::with_capacity(n * n);
        for gi in 0..side {
            for gj in 0..side {
                for r in 0..p {
                    let row = (gi * p + r) * n + gj * p;
                    out.extend_from_slice(&scene.image[row..row + p]);
                }
            }
        }
        Tensor::matrix(side * side, p * p, out)
    }

    /// Patch tokens before the encoder layers.
    pub fn embed_patches(&self, tape: &mut Tape, scene: &Scene) -> Result<Var> {
        let patches = tape.constant(self.patchify(scene)?);
        self.embed.forward(tape, patches)
    }

    /// Encoded feature tokens on the tape.
    pub fn encode(&self, tape: &mut Tape, scene: &Scene) -> Result<GridVar> {
        let side = self.cfg.grid_side();
        let heads = self.cfg.decoder.n_heads;
        let mut x = self.embed_patches(tape, scene)?;
        let pos = tape.constant(self.pos.clone());
        for layer in &self.encoder {
            let qk = tape.add(x, pos)?;
            let q = layer.q.forward(tape, qk)?;
            let k = layer.k.forward(tape, qk)?;
            let v = layer.v.forward(tape, x)?;
            let (a, _) = multi_head_attention_tape(tape, q, k, v, heads, None)?;
            let a = layer.o.forward(tape, a)?;
            let r = tape.add(x, a)?;
            let x1 = layer.ln1.forward(tape, r)?;
            let h = layer.ffn1.forward(tape, x1)?;
            let h = tape.relu(h)?;
            let f = layer.ffn2.forward(tape, h)?;
            let r = tape.add(x1, f)?;
            x = layer.ln2.forward(tape, r)?;
        }
        Ok(GridVar {
            features: x,
            h: side,
            w: side,
        })
    }

    /// Encoded features as a plain grid.
    pub fn features(&self, scene: &Scene) -> Result<FeatureGrid> {
        let mut tape = Tape::with_params(&self.store, false);
        let g = self.encode(&mut tape, scene)?;
        FeatureGrid::new(g.h, g.w, tape.value(g.features).clone())
    }

    pub fn forward(&self, tape: &mut Tape, scene: &Scene, opts: ForwardOptions) -> Result<DecoderOutput> {
        let grid = self.encode(tape, scene)?;
        self.decoder.forward(tape, grid, opts)
    }

    /// Inference pass without gradient bookkeeping.
    pub fn infer(&self, scene: &Scene, opts: ForwardOptions) -> Result<DecoderOutput> {
        let mut tape = Tape::with_params(&self.store, false);
        self.forward(&mut tape, scene, opts)
    }

    /// Parameter groups by name prefix, for gradient-flow reporting.
    pub fn param_groups(&self) -> Vec<(&'static str, Vec<String>)> {
        let groups = [
            ("anchors", "anchors."),
            ("patterns", "patterns"),
            ("pe_mlp", "pe_mlp."),
            ("csq_mlp", "csq_mlp."),
            ("ref_wh_mlp", "ref_wh_mlp."),
            ("class_head", "class_head."),
            ("box_head", "box_head."),
            ("decoder_layers", "layers."),
            ("encoder", "encoder."),
        ];
        groups
            .iter()
            .map(|(g, prefix)| {
                let names = self
                    .store
                    .ids()
                    .map(|id| self.store.name(id).to_string())
                    .filter(|n| n.starts_with(prefix))
                    .collect();
                (*g, names)
            })
            .collect()
    }
}
