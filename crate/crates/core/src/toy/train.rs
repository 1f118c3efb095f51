//! Experiment configuration, the training loop and validation.

use serde::{Deserialize, Serialize};

use crate::decoder::ForwardOptions;
use crate::error::{Error, Result};
use crate::loss::{detr_loss, LossBreakdown, LossConfig, Targets};
use crate::tensor::Tape;

use super::eval::{area_terciles, default_thresholds, detections_from_layer, evaluate_ap, ApReport, MAX_DETECTIONS};
use super::model::{Detector, ModelConfig};
use super::optim::{clip_grad_norm, scheduled_lr, AdamW};
use super::scene::{scene_at, Scene, SceneConfig, Split};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Size of the training pool; scenes are regenerated from their index on demand.
    pub n_train_scenes: usize,
    pub n_val_scenes: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Fraction of `steps` after which the learning rate drops.
    pub lr_drop_fraction: f64,
    pub lr_drop_factor: f64,
    /// Global gradient-norm cap; 0 disables clipping.
    pub grad_clip: f64,
    /// Validation every this many steps (0: only at the end).
    pub eval_every: usize,
    /// Training-loss log period in steps.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 2,
            n_train_scenes: 100_000,
            n_val_scenes: 300,
            lr: 3e-4,
            weight_decay: 1e-4,
            lr_drop_fraction: 0.8,
            lr_drop_factor: 0.1,
            grad_clip: 0.1,
            eval_every: 0,
            log_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn drop_step(&self) -> usize {
        (self.steps as f64 * self.lr_drop_fraction).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, detail: &str| {
            Err(Error::Config {
                key: format!("train.{key}"),
                detail: detail.into(),
            })
        };
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        if self.n_train_scenes == 0 {
            return bad("n_train_scenes", "must be positive");
        }
        if self.n_val_scenes == 0 {
            return bad("n_val_scenes", "must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", "must be positive and finite");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay", "must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.lr_drop_fraction) {
            return bad("lr_drop_fraction", "must lie in [0, 1]");
        }
        if !(self.lr_drop_factor > 0.0 && self.lr_drop_factor <= 1.0) {
            return bad("lr_drop_factor", "must lie in (0, 1]");
        }
        if !(self.grad_clip >= 0.0 && self.grad_clip.is_finite()) {
            return bad("grad_clip", "must be non-negative");
        }
        if self.log_every == 0 {
            return bad("log_every", "must be positive");
        }
        Ok(())
    }
}

/// Everything needed to reproduce one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: SceneConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
}


impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        if self.data.n_classes != self.model.decoder.n_classes {
            return Err(Error::Config {
                key: "model.decoder.n_classes".into(),
                detail: format!("must equal data.n_classes = {}", self.data.n_classes),
            });
        }
        if self.data.image_size != self.model.image_size {
            return Err(Error::Config {
                key: "model.image_size".into(),
                detail: format!("must equal data.image_size = {}", self.data.image_size),
            });
        }
        Ok(())
    }

    /// Model initialization seed, distinct from the data streams.
    pub fn init_seed(&self) -> u64 {
        self.seed.wrapping_mul(0x2545_F491_4F6C_DD1D) ^ 0x1D
    }
}

/// One line of the metric log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MetricRecord {
    Step {
        step: usize,
        lr: f64,
        loss: f64,
        last_layer_loss: f64,
        last_class: f64,
        last_l1: f64,
        last_giou: f64,
        grad_norm: f64,
    },
    Eval {
        step: usize,
        ap: f64,
        ap50: f64,
        ap75: f64,
        ap_small: f64,
        ap_medium: f64,
        ap_large: f64,
    },
}

impl MetricRecord {
    pub fn eval(step: usize, r: &ApReport) -> Self {
        MetricRecord::Eval {
            step,
            ap: r.ap,
            ap50: r.ap50,
            ap75: r.ap75,
            ap_small: r.ap_small,
            ap_medium: r.ap_medium,
            ap_large: r.ap_large,
        }
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub detector: Detector,
    pub log: Vec<MetricRecord>,
    pub final_eval: ApReport,
}

impl TrainOutcome {
    /// JSON-lines rendering of the log.
    pub fn log_jsonl(&self) -> String {
        metrics_jsonl(&self.log)
    }
}

pub fn metrics_jsonl(log: &[MetricRecord]) -> String {
    let mut s = String::new();
    for r in log {
        s.push_str(&serde_json::to_string(r).expect("metric records serialize"));
        s.push('\n');
    }
    s
}

#[derive(Serialize)]
struct BatchDump<'a> {
    step: usize,
    scene_indices: &'a [u64],
    targets: Vec<&'a Targets>,
    error: String,
}

fn batch_indices(cfg: &TrainConfig, step: usize) -> Vec<u64> {
    (0..cfg.batch_size)
        .map(|b| ((step * cfg.batch_size + b) % cfg.n_train_scenes) as u64)
        .collect()
}

/// Forward, loss and backward on one scene; gradients are added into the store.
pub fn accumulate_scene_gradients(det: &mut Detector, scene: &Scene, loss_cfg: &LossConfig, scale: f64) -> Result<LossBreakdown> {
    let mut tape = Tape::with_params(&det.store, true);
    let out = det.forward(&mut tape, scene, ForwardOptions::default())?;
    let (loss, breakdown) = detr_loss(&mut tape, &out.predictions, &scene.targets, loss_cfg, None)?;
    let loss = tape.scale(loss, scale)?;
    if !tape.value(loss).is_finite() {
        return Err(Error::NonFinite { op: "loss" });
    }
    tape.backward(loss)?;
    tape.write_param_grads(&mut det.store);
    Ok(breakdown)
}

/// One optimizer step on `scenes`; returns the batch-mean breakdown and the pre-clip gradient norm.
pub fn train_step(
    det: &mut Detector,
    opt: &mut AdamW,
    scenes: &[Scene],
    loss_cfg: &LossConfig,
    lr: f64,
    grad_clip: f64,
) -> Result<(LossBreakdown, f64)> {
    det.store.zero_grads();
    let scale = 1.0 / scenes.len() as f64;
    let mut total = LossBreakdown::default();
    for s in scenes {
        let b = accumulate_scene_gradients(det, s, loss_cfg, scale)?;
        total.add(&b);
    }
    let total = total.scaled(scale);
    if !total.total.is_finite() {
        return Err(Error::NonFinite { op: "loss" });
    }
    let norm = if grad_clip > 0.0 {
        clip_grad_norm(&mut det.store, grad_clip)
    } else {
        super::optim::grad_norm(&det.store)
    };
    if !norm.is_finite() {
        return Err(Error::NonFinite { op: "gradient" });
    }
    opt.step(&mut det.store, lr);
    Ok((total, norm))
}

pub fn val_scenes(cfg: &ExperimentConfig, n: usize) -> Vec<Scene> {
    (0..n as u64).map(|i| scene_at(cfg.seed, Split::Val, i, &cfg.data)).collect()
}

/// Top-100 last-layer detections on each scene and the AP report.
pub fn evaluate(det: &Detector, scenes: &[Scene]) -> Result<ApReport> {
    let mut dets = Vec::new();
    for (i, s) in scenes.iter().enumerate() {
        let out = det.infer(s, ForwardOptions::default())?;
        let last = out.trace.last().expect("decoder has layers");
        dets.extend(detections_from_layer(last, i, MAX_DETECTIONS));
    }
    let gts: Vec<Targets> = scenes.iter().map(|s| s.targets.clone()).collect();
    Ok(evaluate_ap(
        &dets,
        &gts,
        det.cfg.decoder.n_classes,
        &default_thresholds(),
        area_terciles(&gts),
    ))
}

/// Trains a fresh model from `cfg`, calling `on_record` for every log line as it is produced.
pub fn train_with<F: FnMut(&MetricRecord)>(cfg: &ExperimentConfig, mut on_record: F) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut det = Detector::new(cfg.model.clone(), cfg.init_seed())?;
    let mut opt = AdamW::new(&det.store, cfg.train.weight_decay);
    let val = val_scenes(cfg, cfg.train.n_val_scenes);
    let t = &cfg.train;
    let drop_at = t.drop_step();
    let mut log = Vec::new();
    let mut push = |r: MetricRecord, log: &mut Vec<MetricRecord>| {
        on_record(&r);
        log.push(r);
    };
    for step in 0..t.steps {
        let idx = batch_indices(t, step);
        let scenes: Vec<Scene> = idx.iter().map(|&i| scene_at(cfg.seed, Split::Train, i, &cfg.data)).collect();
        let lr = scheduled_lr(t.lr, step, drop_at, t.lr_drop_factor);
        let (b, norm) = match train_step(&mut det, &mut opt, &scenes, &cfg.loss, lr, t.grad_clip) {
            Ok(v) => v,
            Err(e @ (Error::NonFinite { .. } | Error::Domain { .. })) => {
                let dump = BatchDump {
                    step,
                    scene_indices: &idx,
                    targets: scenes.iter().map(|s| &s.targets).collect(),
                    error: e.to_string(),
                };
                return Err(Error::NonFiniteLoss {
                    step,
                    diagnostic: serde_json::to_string(&dump).expect("dump serializes"),
                });
            }
            Err(e) => return Err(e),
        };
        if step % t.log_every == 0 || step + 1 == t.steps {
            let last = b.last();
            push(
                MetricRecord::Step {
                    step,
                    lr,
                    loss: b.total,
                    last_layer_loss: last.total,
                    last_class: last.class,
                    last_l1: last.l1,
                    last_giou: last.giou,
                    grad_norm: norm,
                },
                &mut log,
            );
        }
        if t.eval_every > 0 && (step + 1) % t.eval_every == 0 && step + 1 != t.steps {
            let r = evaluate(&det, &val)?;
            push(MetricRecord::eval(step + 1, &r), &mut log);
        }
    }
    let final_eval = evaluate(&det, &val)?;
    push(MetricRecord::eval(t.steps, &final_eval), &mut log);
    Ok(TrainOutcome {
        detector: det,
        log,
        final_eval,
    })
}

pub fn train(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    train_with(cfg, |_| {})
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.train.steps = 3;
        cfg.train.batch_size = 1;
        cfg.train.n_val_scenes = 4;
        cfg.model.decoder.n_layers = 2;
        cfg.model.decoder.n_anchors = 4;
        cfg.model.decoder.n_patterns = 1;
        cfg
    }

    #[test]
    fn zero_steps_keeps_init() {
        let mut cfg = tiny();
        cfg.train.steps = 0;
        let out = train(&cfg).unwrap();
        let fresh = Detector::new(cfg.model.clone(), cfg.init_seed()).unwrap();
        for id in fresh.store.ids() {
            assert_eq!(fresh.store.get(id).data(), out.detector.store.get(id).data());
        }
        assert_eq!(out.log.len(), 1);
    }

    #[test]
    fn runs_are_reproducible() {
        let a = train(&tiny()).unwrap();
        let b = train(&tiny()).unwrap();
        assert_eq!(a.log_jsonl(), b.log_jsonl());
        assert_eq!(a.log.len(), 4);
    }

    #[test]
    fn config_errors_name_the_key() {
        let mut cfg = tiny();
        cfg.train.batch_size = 0;
        match cfg.validate() {
            Err(Error::Config { key, .. }) => assert_eq!(key, "train.batch_size"),
            other => panic!("unexpected {other:?}"),
        }
        let mut cfg = tiny();
        cfg.data.n_classes = 4;
        assert!(matches!(cfg.validate(), Err(Error::Config { .. })));
    }

    #[test]
    fn json_round_trip_and_unknown_keys() {
        let cfg = tiny();
        let s = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<ExperimentConfig>(&s).unwrap(), cfg);
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"train": {"stepz": 3}}"#).is_err());
    }
}
