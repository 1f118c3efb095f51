use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use dabdetr_core::attention::{entropy, second_moments, softmax_map};
use dabdetr_core::checkpoint::Checkpoint;
use dabdetr_core::decoder::ForwardOptions;
use dabdetr_core::io::Gray;
use dabdetr_core::pe::grid_centers;
use dabdetr_core::tensor::sigmoid;
use dabdetr_core::toy::experiments::{directional_claims, run_row, sweep_temperature as run_sweep, AblationRow};
use dabdetr_core::toy::train::{evaluate, metrics_jsonl, train_with, val_scenes};
use dabdetr_core::toy::{scene_at, ApReport, Detector, ExperimentConfig, MetricRecord, Split};
use dabdetr_core::Error as CoreError;
use serde::Serialize;

use crate::error::CliError;
use crate::manifest::Run;
use crate::{config, tables, ConfigArgs, SplitArg};

const CHECKPOINT: &str = "checkpoint.ckpt";
const METRICS: &str = "metrics.jsonl";

fn resolve(args: &ConfigArgs) -> Result<ExperimentConfig, CliError> {
    let mut o = config::parse_overrides(&args.overrides)?;
    if let Some(s) = args.seed {
        o.push(("seed".into(), s.to_string()));
    }
    if let Some(s) = args.steps {
        o.push(("train.steps".into(), s.to_string()));
    }
    config::load(args.config.as_deref(), &o)
}

fn to_json<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("serializable")
}

/// Rebuilds the model a checkpoint was saved from.
pub fn load_checkpoint(path: &Path) -> Result<(ExperimentConfig, Detector), CliError> {
    let ck = Checkpoint::load(path)?;
    let cfg: ExperimentConfig = serde_json::from_value(ck.config.clone())
        .map_err(|e| CoreError::Checkpoint(format!("embedded config: {e}")))?;
    let mut det = Detector::new(cfg.model.clone(), cfg.init_seed())?;
    ck.apply_to(&mut det.store)?;
    Ok((cfg, det))
}

fn ap_line(r: &ApReport) -> String {
    format!(
        "AP {:.4}  AP50 {:.4}  AP75 {:.4}  APS {:.4}  APM {:.4}  APL {:.4}",
        r.ap, r.ap50, r.ap75, r.ap_small, r.ap_medium, r.ap_large
    )
}

pub fn train(out: &Path, args: &ConfigArgs) -> Result<(), CliError> {
    let cfg = resolve(args)?;
    let mut run = Run::start(out, "train", to_json(&cfg), cfg.seed)?;
    let metrics_path = run.output(METRICS)?;
    let mut metrics = BufWriter::new(File::create(&metrics_path)?);
    let mut io_err = None;
    let result = train_with(&cfg, |r| {
        let line = serde_json::to_string(r).expect("record serializes");
        if let Err(e) = writeln!(metrics, "{line}").and_then(|_| metrics.flush()) {
            io_err.get_or_insert(e);
        }
    });
    if let Some(e) = io_err {
        return Err(e.into());
    }
    let outcome = match result {
        Ok(o) => o,
        Err(CoreError::NonFiniteLoss { step, diagnostic }) => {
            let p = run.output("nonfinite_batch.json")?;
            std::fs::write(&p, &diagnostic)?;
            return Err(CoreError::NonFiniteLoss {
                step,
                diagnostic: format!("batch dumped to {}", p.display()),
            }
            .into());
        }
        Err(e) => return Err(e.into()),
    };
    let ck_path = run.output(CHECKPOINT)?;
    Checkpoint::from_store(to_json(&cfg), &outcome.detector.store).save(&ck_path)?;
    println!("{}", ap_line(&outcome.final_eval));
    run.finish("ok")
}

pub fn eval(
    checkpoint: &Path,
    n_scenes: Option<usize>,
    seed: Option<u64>,
    expect: Option<&Path>,
    out: &Path,
) -> Result<(), CliError> {
    if n_scenes == Some(0) {
        return Err(CliError::Usage("--n-scenes must be positive".into()));
    }
    let (mut cfg, det) = load_checkpoint(checkpoint)?;
    if let Some(p) = expect {
        let want = config::load(Some(p), &[])?;
        if let Some(field) = config::first_difference(&to_json(&cfg.model), &to_json(&want.model), "model") {
            return Err(CliError::Data(format!("checkpoint and config disagree at `{field}`")));
        }
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let n = n_scenes.unwrap_or(cfg.train.n_val_scenes);
    let mut run = Run::start(out, "eval", to_json(&cfg), cfg.seed)?;
    let report = evaluate(&det, &val_scenes(&cfg, n))?;
    let log = vec![MetricRecord::eval(cfg.train.steps, &report)];
    std::fs::write(run.output(METRICS)?, metrics_jsonl(&log))?;
    std::fs::write(run.output("eval.json")?, serde_json::to_string_pretty(&report).expect("report"))?;
    println!("{}", ap_line(&report));
    run.finish("ok")
}

#[derive(Serialize)]
struct MapSummary {
    layer: usize,
    head: usize,
    query: usize,
    kind: &'static str,
    csv: String,
    pgm: String,
    entropy: f64,
    second_moment_x: f64,
    second_moment_y: f64,
    argmax: usize,
}

#[derive(Serialize)]
struct QuerySummary {
    layer: usize,
    query: usize,
    reference: [f64; 4],
    modulation: [f64; 2],
}

#[derive(Serialize)]
struct AttentionSummary {
    grid: [usize; 2],
    queries: Vec<QuerySummary>,
    maps: Vec<MapSummary>,
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}

pub fn dump_attention(checkpoint: &Path, scene_seed: u64, scene_index: u64, queries: &[usize], out: &Path) -> Result<(), CliError> {
    let (cfg, det) = load_checkpoint(checkpoint)?;
    let mut run = Run::start(out, "dump-attention", to_json(&cfg), scene_seed)?;
    let scene = scene_at(scene_seed, Split::Val, scene_index, &cfg.data);
    Gray::from_unit(scene.size, scene.size, &scene.image)?.save(&run.output("scene.pgm")?)?;
    let trace = det
        .infer(
            &scene,
            ForwardOptions {
                record_maps: true,
                ..Default::default()
            },
        )?
        .trace;
    let last = trace.last().expect("decoder has layers");
    let nq = last.class_logits.rows();
    let selected: Vec<usize> = if queries.is_empty() {
        let mut order: Vec<usize> = (0..nq).collect();
        let best = |q: usize| last.class_logits.row(q).iter().copied().fold(f64::NEG_INFINITY, f64::max);
        order.sort_by(|&a, &b| best(b).total_cmp(&best(a)));
        order.truncate(3);
        order
    } else {
        queries.to_vec()
    };
    if let Some(&bad) = selected.iter().find(|&&q| q >= nq) {
        return Err(CliError::Usage(format!("query {bad} out of range (model has {nq})")));
    }
    let side = cfg.model.grid_side();
    let hw = side * side;
    let positions = grid_centers(side, side);
    let mut summary = AttentionSummary {
        grid: [side, side],
        queries: Vec::new(),
        maps: Vec::new(),
    };
    for (l, layer) in trace.layers.iter().enumerate() {
        let maps = [
            ("positional", layer.positional_logits.as_ref(), true),
            ("content", layer.content_logits.as_ref(), true),
            ("combined", layer.attention.as_ref(), false),
        ];
        for &q in &selected {
            let r = layer.reference.row(q);
            let reference = [sigmoid(r[0]), sigmoid(r[1]), sigmoid(r[2]), sigmoid(r[3])];
            let m = layer.modulation.row(q);
            summary.queries.push(QuerySummary {
                layer: l,
                query: q,
                reference,
                modulation: [m[0], m[1]],
            });
            for (kind, t, needs_softmax) in maps {
                let t = t.expect("maps recorded");
                let heads = t.shape()[0];
                for h in 0..heads {
                    let off = (h * nq + q) * hw;
                    let values = &t.data()[off..off + hw];
                    let stem = format!("l{l}_h{h}_q{q}_{kind}");
                    let csv_name = format!("{stem}.csv");
                    let pgm_name = format!("{stem}.pgm");
                    tables::write_matrix(&run.output(&csv_name)?, side, side, values)?;
                    Gray::from_values(side, side, values)?.save(&run.output(&pgm_name)?)?;
                    let p = if needs_softmax { softmax_map(values) } else { values.to_vec() };
                    let (mx, my) = second_moments(&p, &positions, (reference[0], reference[1]));
                    summary.maps.push(MapSummary {
                        layer: l,
                        head: h,
                        query: q,
                        kind,
                        csv: csv_name,
                        pgm: pgm_name,
                        entropy: entropy(&p),
                        second_moment_x: mx,
                        second_moment_y: my,
                        argmax: argmax(values),
                    });
                }
            }
        }
    }
    std::fs::write(run.output("summary.json")?, serde_json::to_string_pretty(&summary).expect("summary"))?;
    println!("wrote {} maps for queries {:?}", summary.maps.len(), selected);
    run.finish("ok")
}

pub fn sweep_temperature(temps: &[f64], out: &Path, args: &ConfigArgs) -> Result<(), CliError> {
    if temps.is_empty() {
        return Err(CliError::Usage("--temps needs at least one value".into()));
    }
    let cfg = resolve(args)?;
    let mut run = Run::start(out, "sweep-temperature", to_json(&cfg), cfg.seed)?;
    let rows = run_sweep(&cfg, temps)?;
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.temperature.to_string(),
                r.report.ap.to_string(),
                r.report.ap50.to_string(),
                r.report.ap75.to_string(),
                r.report.ap_small.to_string(),
                r.report.ap_medium.to_string(),
                r.report.ap_large.to_string(),
                r.entropy.to_string(),
            ]
        })
        .collect();
    tables::write_table(
        &run.output("sweep.csv")?,
        &["temperature", "ap", "ap50", "ap75", "ap_s", "ap_m", "ap_l", "positional_entropy"],
        &table,
    )?;
    for r in &rows {
        println!("T = {:<8} {}  entropy {:.4}", r.temperature, ap_line(&r.report), r.entropy);
    }
    run.finish("ok")
}

pub fn ablate(seeds: &[u64], out: &Path, args: &ConfigArgs) -> Result<(), CliError> {
    if seeds.is_empty() {
        return Err(CliError::Usage("--seeds needs at least one value".into()));
    }
    let cfg = resolve(args)?;
    let mut run = Run::start(out, "ablate", to_json(&cfg), cfg.seed)?;
    let mut results = Vec::new();
    for row in AblationRow::ALL {
        let r = run_row(&cfg, row, seeds)?;
        println!("{:<18} median AP {:.4}  per seed {:?}", row.name(), r.median_ap(), r.aps());
        results.push(r);
    }
    let mut header = vec!["row".to_string(), "median_ap".to_string()];
    header.extend(seeds.iter().map(|s| format!("ap_seed_{s}")));
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let table: Vec<Vec<String>> = results
        .iter()
        .map(|r| {
            let mut row = vec![r.row.name().to_string(), r.median_ap().to_string()];
            row.extend(r.aps().iter().map(|a| a.to_string()));
            row
        })
        .collect();
    tables::write_table(&run.output("ablation.csv")?, &header_refs, &table)?;
    let claims = directional_claims(&results);
    let rows: Vec<Vec<String>> = claims
        .iter()
        .map(|c| {
            vec![
                c.claim.clone(),
                c.lhs.to_string(),
                c.rhs.to_string(),
                c.holds.to_string(),
                c.tied.to_string(),
            ]
        })
        .collect();
    tables::write_table(&run.output("comparisons.csv")?, &["claim", "lhs", "rhs", "holds", "tied"], &rows)?;
    for c in &claims {
        let verdict = if c.holds {
            "holds"
        } else if c.tied {
            "TIED"
        } else {
            "FAILS"
        };
        println!("{:<28} {:.4} vs {:.4}  {verdict}", c.claim, c.lhs, c.rhs);
    }
    run.finish("ok")
}

pub fn viz_anchors(checkpoint: &Path, out: &Path) -> Result<(), CliError> {
    let (cfg, det) = load_checkpoint(checkpoint)?;
    let mut run = Run::start(out, "viz-anchors", to_json(&cfg), cfg.seed)?;
    let anchors = det.decoder.anchors(&det.store);
    let rows: Vec<Vec<String>> = anchors
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let mut r = vec![i.to_string()];
            r.extend(a.coords().iter().map(|v| v.to_string()));
            r
        })
        .collect();
    tables::write_table(&run.output("anchors.csv")?, &["index", "cx", "cy", "w", "h"], &rows)?;
    let mut img = Gray::new(256, 256);
    for a in &anchors {
        img.draw_box(a.coords(), 160);
        let [cx, cy, _, _] = a.coords();
        let (x, y) = (((cx * 256.0) as usize).min(255), ((cy * 256.0) as usize).min(255));
        img.set(x, y, 255);
    }
    img.save(&run.output("anchors.pgm")?)?;
    println!("wrote {} anchors", anchors.len());
    run.finish("ok")
}

pub fn dump_scenes(seed: u64, count: u64, split: SplitArg, out: &Path) -> Result<(), CliError> {
    let cfg = ExperimentConfig {
        seed,
        ..Default::default()
    };
    let split = match split {
        SplitArg::Train => Split::Train,
        SplitArg::Val => Split::Val,
    };
    let mut run = Run::start(out, "dump-scenes", to_json(&cfg), seed)?;
    let mut sidecar = String::new();
    for i in 0..count {
        let s = scene_at(seed, split, i, &cfg.data);
        let name = format!("scene_{i:04}.pgm");
        Gray::from_unit(s.size, s.size, &s.image)?.save(&run.output(&name)?)?;
        let line = serde_json::json!({
            "index": i,
            "image": name,
            "boxes": s.targets.boxes,
            "classes": s.targets.classes,
        });
        sidecar.push_str(&line.to_string());
        sidecar.push('\n');
    }
    std::fs::write(run.output("boxes.jsonl")?, sidecar)?;
    println!("wrote {count} scenes");
    run.finish("ok")
}
