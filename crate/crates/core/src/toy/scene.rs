//! Synthetic rectangle scenes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::Targets;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub image_size: usize,
    pub min_boxes: usize,
    pub max_boxes: usize,
    pub min_extent: f64,
    pub max_extent: f64,
    pub n_classes: usize,
    pub noise_std: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            min_boxes: 1,
            max_boxes: 8,
            min_extent: 0.05,
            max_extent: 0.7,
            n_classes: 3,
            noise_std: 0.05,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, detail: &str| {
            Err(Error::Config {
                key: format!("data.{key}"),
                detail: detail.into(),
            })
        };
        if self.image_size == 0 {
            return bad("image_size", "must be positive");
        }
        if self.min_boxes == 0 || self.min_boxes > self.max_boxes {
            return bad("min_boxes", "need 1 ≤ min_boxes ≤ max_boxes");
        }
        if !(self.min_extent > 0.0 && self.min_extent <= self.max_extent && self.max_extent <= 1.0) {
            return bad("min_extent", "need 0 < min_extent ≤ max_extent ≤ 1");
        }
        if self.n_classes == 0 {
            return bad("n_classes", "must be positive");
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad("noise_std", "must be finite and non-negative");
        }
        Ok(())
    }

    /// Fill-intensity band `[lo, hi]` of class `c`.
    pub fn band(&self, c: usize) -> (f64, f64) {
        let step = 0.75 / self.n_classes as f64;
        let lo = 0.25 + step * c as f64;
        (lo, lo + 0.8 * step)
    }
}

/// Which pool a scene is drawn from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub size: usize,
    /// Row-major intensities in `[0, 1]`.
    pub image: Vec<f64>,
    pub targets: Targets,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Independent stream for one `(seed, split, index)` triple.
pub fn scene_rng(seed: u64, split: Split, index: u64) -> ChaCha8Rng {
    let salt = match split {
        Split::Train => 0x7472_6169_6e00_0000,
        Split::Val => 0x7661_6c00_0000_0000,
    };
    ChaCha8Rng::seed_from_u64(splitmix(splitmix(seed ^ salt) ^ index))
}

pub fn generate_scene<R: Rng>(rng: &mut R, cfg: &SceneConfig) -> Scene {
    let n = cfg.image_size;
    let k = rng.random_range(cfg.min_boxes..=cfg.max_boxes);
    let mut image = vec![0.0f64; n * n];
    let mut targets = Targets::default();
    for _ in 0..k {
        let w = rng.random_range(cfg.min_extent..=cfg.max_extent);
        let h = rng.random_range(cfg.min_extent..=cfg.max_extent);
        let cx = rng.random_range(w / 2.0..=1.0 - w / 2.0);
        let cy = rng.random_range(h / 2.0..=1.0 - h / 2.0);
        let class = rng.random_range(0..cfg.n_classes);
        let (lo, hi) = cfg.band(class);
        let v = rng.random_range(lo..=hi);
        for i in 0..n {
            let py = (i as f64 + 0.5) / n as f64;
            if (py - cy).abs() > h / 2.0 {
                continue;
            }
            for j in 0..n {
                let px = (j as f64 + 0.5) / n as f64;
                if (px - cx).abs() <= w / 2.0 {
                    let p = &mut image[i * n + j];
                    *p = p.max(v);
                }
            }
        }
        targets.boxes.push([cx, cy, w, h]);
        targets.classes.push(class);
    }
    if cfg.noise_std > 0.0 {
        let noise = Normal::new(0.0, cfg.noise_std).expect("validated noise std");
        for p in &mut image {
            *p = (*p + noise.sample(rng)).clamp(0.0, 1.0);
        }
    }
    Scene {
        size: n,
        image,
        targets,
    }
}

/// Scene `index` of `split` under `seed`.
pub fn scene_at(seed: u64, split: Split, index: u64, cfg: &SceneConfig) -> Scene {
    generate_scene(&mut scene_rng(seed, split, index), cfg)
}
