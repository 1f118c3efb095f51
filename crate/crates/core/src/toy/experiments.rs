//! Ablation rows, temperature sweeps and their summaries.

use serde::{Deserialize, Serialize};

use crate::attention::positional_map_entropy;
use crate::decoder::AnchorDims;
use crate::error::Result;

use super::eval::ApReport;
use super::train::{train, ExperimentConfig};

/// Gap below which two medians count as tied.
pub const TIE_MARGIN: f64 = 0.005;

/// Temperatures swept by default.
pub const DEFAULT_TEMPERATURES: [f64; 7] = [2.0, 5.0, 10.0, 20.0, 50.0, 100.0, 10000.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationRow {
    Full,
    NoAnchorUpdate,
    NoModulation,
    /// Center-only anchors: width and height frozen and modulation off.
    Point2d,
    /// Temperature left at 10000.
    NoTemperature,
}

impl AblationRow {
    pub const ALL: [AblationRow; 5] = [
        AblationRow::Full,
        AblationRow::NoAnchorUpdate,
        AblationRow::NoModulation,
        AblationRow::Point2d,
        AblationRow::NoTemperature,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationRow::Full => "full",
            AblationRow::NoAnchorUpdate => "no_anchor_update",
            AblationRow::NoModulation => "no_modulation",
            AblationRow::Point2d => "anchor_2d",
            AblationRow::NoTemperature => "temperature_10000",
        }
    }

    pub fn apply(self, base: &ExperimentConfig) -> ExperimentConfig {
        let mut cfg = base.clone();
        let d = &mut cfg.model.decoder;
        match self {
            AblationRow::Full => {}
            AblationRow::NoAnchorUpdate => d.anchor_update = false,
            AblationRow::NoModulation => d.modulation = false,
            AblationRow::Point2d => {
                d.anchor_dims = AnchorDims::Point2d;
                d.modulation = false;
            }
            AblationRow::NoTemperature => d.temperature = 10000.0,
        }
        cfg
    }
}

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowResult {
    pub row: AblationRow,
    pub seeds: Vec<u64>,
    pub reports: Vec<ApReport>,
}

impl RowResult {
    pub fn aps(&self) -> Vec<f64> {
        self.reports.iter().map(|r| r.ap).collect()
    }

    pub fn median_ap(&self) -> f64 {
        median(&self.aps())
    }
}

/// `lhs ≥ rhs` on median AP, failing on ties within [`TIE_MARGIN`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Directional {
    pub claim: String,
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
    pub tied: bool,
}

impl Directional {
    pub fn new(claim: impl Into<String>, lhs: f64, rhs: f64) -> Self {
        let tied = (lhs - rhs).abs() <= TIE_MARGIN;
        Self {
            claim: claim.into(),
            lhs,
            rhs,
            holds: lhs > rhs && !tied,
            tied,
        }
    }
}

/// Trains `row` once per seed.
pub fn run_row(base: &ExperimentConfig, row: AblationRow, seeds: &[u64]) -> Result<RowResult> {
    let mut reports = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut cfg = row.apply(base);
        cfg.seed = seed;
        reports.push(train(&cfg)?.final_eval);
    }
    Ok(RowResult {
        row,
        seeds: seeds.to_vec(),
        reports,
    })
}

/// The two directional claims checked on an ablation battery, when the rows are present.
pub fn directional_claims(rows: &[RowResult]) -> Vec<Directional> {
    let med = |r: AblationRow| rows.iter().find(|x| x.row == r).map(RowResult::median_ap);
    let mut out = Vec::new();
    if let (Some(a), Some(b)) = (med(AblationRow::Full), med(AblationRow::NoAnchorUpdate)) {
        out.push(Directional::new("full >= no_anchor_update", a, b));
    }
    if let (Some(a), Some(b)) = (med(AblationRow::NoModulation), med(AblationRow::Point2d)) {
        out.push(Directional::new("anchor_4d >= anchor_2d", a, b));
    }
    out
}

/// Mean positional-map entropy over fixed reference points on an `n × n` grid.
pub fn mean_positional_entropy(cfg: &ExperimentConfig, n: usize) -> Result<f64> {
    let pe = cfg.model.decoder.pe();
    let refs = [(0.5, 0.5), (0.2, 0.3), (0.8, 0.7), (0.35, 0.9), (0.65, 0.15)];
    let mut total = 0.0;
    for r in refs {
        total += positional_map_entropy(r, n, &pe)?;
    }
    Ok(total / refs.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub temperature: f64,
    pub report: ApReport,
    pub entropy: f64,
}

/// One model per temperature, all with the base seed.
pub fn sweep_temperature(base: &ExperimentConfig, temps: &[f64]) -> Result<Vec<SweepRow>> {
    temps
        .iter()
        .map(|&t| {
            let mut cfg = base.clone();
            cfg.model.decoder.temperature = t;
            let report = train(&cfg)?.final_eval;
            let side = cfg.model.grid_side();
            Ok(SweepRow {
                temperature: t,
                report,
                entropy: mean_positional_entropy(&cfg, side)?,
            })
        })
        .collect()
}
