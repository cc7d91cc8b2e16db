//! Dataset evaluation and the TFCM / gated-phase-encoder ablation matrix.

use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{AecError, Result};
use crate::kv::KvMap;
use crate::metrics::{erle, rtf, si_sdr, timed, EvalRecord};
use crate::net::{param_count, NetConfig, TaylorAecNet};
use crate::pipeline::{Pipeline, PipelineConfig};
use crate::simulate::{list_items, read_item, Scenario, SynthItem};
use crate::train::{prepare_items, train, TrainConfig, NET_CONFIG_FILE};

/// Loads a post-filter checkpoint. The network config is read from
/// `net.txt` beside the checkpoint when present, else from `kv`.
pub fn load_net(checkpoint: &Path, kv: &KvMap) -> Result<TaylorAecNet> {
    let side = checkpoint
        .parent()
        .unwrap_or(Path::new("."))
        .join(NET_CONFIG_FILE);
    let config = if side.is_file() {
        let mut merged = KvMap::read(&side)?;
        merged.merge(&kv.filtered("net."));
        NetConfig::from_kv(&merged)?
    } else {
        NetConfig::from_kv(kv)?
    };
    TaylorAecNet::load(config, checkpoint)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    /// Seconds excluded from the start of each item before ERLE is
    /// measured, so the adaptive filter's convergence is not scored.
    /// Capped at half the item.
    pub erle_skip_secs: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { erle_skip_secs: 1.0 }
    }
}

impl EvalConfig {
    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let c = Self {
            erle_skip_secs: kv.get_or("eval.erle_skip_s", Self::default().erle_skip_secs)?,
        };
        if !(c.erle_skip_secs >= 0.0) {
            return Err(AecError::config("eval.erle_skip_s must be >= 0"));
        }
        Ok(c)
    }
}

/// Runs the pipeline on one item and scores it. ERLE is reported for
/// far-end single talk only; SI-SDR whenever near-end speech is present.
pub fn evaluate_item(pipeline: &Pipeline, item: &SynthItem, cfg: &EvalConfig) -> Result<EvalRecord> {
    let m = &item.mixture;
    let (out, secs) = timed(|| pipeline.process(&m.d, &m.x));
    let out = out?.output;
    let n = m.d.len();
    let skip = ((cfg.erle_skip_secs * m.d.sample_rate as f64) as usize).min(n / 2);
    let erle_db = match item.scenario {
        Scenario::FarEnd => Some(erle(&m.d, &out, Some(skip..n))?),
        _ => None,
    };
    let si_sdr_db = match item.scenario {
        Scenario::FarEnd => None,
        _ => Some(si_sdr(&m.s, &out)?),
    };
    Ok(EvalRecord {
        id: item.id.clone(),
        scenario: item.scenario.as_str().to_string(),
        erle_db,
        si_sdr_db,
        rtf: rtf(secs, m.d.duration_secs())?,
    })
}

/// Evaluates items in parallel; records keep the input order.
pub fn evaluate_items(
    pipeline: &Pipeline,
    items: &[SynthItem],
    cfg: &EvalConfig,
) -> Result<Vec<EvalRecord>> {
    items.par_iter().map(|it| evaluate_item(pipeline, it, cfg)).collect()
}

/// Reads every item directory under `dataset_dir`.
pub fn read_dataset(dataset_dir: &Path) -> Result<Vec<SynthItem>> {
    let dirs = list_items(dataset_dir)?;
    if dirs.is_empty() {
        return Err(AecError::EmptyDataset);
    }
    dirs.par_iter().map(|d| read_item(d)).collect()
}

/// Mean metrics over one scenario.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioSummary {
    pub scenario: String,
    pub items: usize,
    pub erle_db: Option<f64>,
    pub si_sdr_db: Option<f64>,
    pub rtf: f64,
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (n, s) = v.fold((0usize, 0.0), |(n, s), x| (n + 1, s + x));
    (n > 0).then(|| s / n as f64)
}

/// Per-scenario means in ST-FE, ST-NE, DT order; empty scenarios are skipped.
pub fn summarize(records: &[EvalRecord]) -> Vec<ScenarioSummary> {
    [Scenario::FarEnd, Scenario::NearEnd, Scenario::DoubleTalk]
        .iter()
        .filter_map(|sc| {
            let rs: Vec<&EvalRecord> = records.iter().filter(|r| r.scenario == sc.as_str()).collect();
            if rs.is_empty() {
                return None;
            }
            Some(ScenarioSummary {
                scenario: sc.as_str().to_string(),
                items: rs.len(),
                erle_db: mean(rs.iter().filter_map(|r| r.erle_db)),
                si_sdr_db: mean(rs.iter().filter_map(|r| r.si_sdr_db)),
                rtf: mean(rs.iter().map(|r| r.rtf)).unwrap_or(0.0),
            })
        })
        .collect()
}

/// Writes records as JSON lines.
pub fn write_report(path: &Path, records: &[EvalRecord]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r).map_err(|e| AecError::Parse(e.to_string()))?);
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| AecError::io(path, e))
}

/// The three ablation rows: (name, use_tfcm, gated_pe).
pub const ABLATION_VARIANTS: [(&str, bool, bool); 3] = [
    ("base", false, false),
    ("+TFCM", true, false),
    ("+gated PE", true, true),
];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub name: String,
    pub params: usize,
    pub steps: u64,
    /// Mean total loss over the last epoch.
    pub final_loss: f64,
    pub erle_st_fe_db: Option<f64>,
    pub si_sdr_db: Option<f64>,
    pub rtf: f64,
}

/// Trains each variant of `net` on `items` and evaluates the resulting
/// pipeline on the same items.
pub fn run_ablation(
    items: &[SynthItem],
    net: &NetConfig,
    train_cfg: &TrainConfig,
    pipeline: &PipelineConfig,
    eval: &EvalConfig,
) -> Result<Vec<AblationRow>> {
    if items.is_empty() {
        return Err(AecError::EmptyDataset);
    }
    let mixtures: Vec<_> = items.iter().map(|it| (it.id.clone(), it.mixture.clone())).collect();
    let prepared = prepare_items(&mixtures, pipeline)?;
    let mut rows = Vec::new();
    for (name, tfcm, gated) in ABLATION_VARIANTS {
        let cfg = net.clone().with_ablation(tfcm, gated);
        let summary = train(&prepared, &cfg, train_cfg, None)?;
        let last = &summary.records[summary.records.len().saturating_sub(items.len())..];
        let final_loss = mean(last.iter().map(|r| r.total)).unwrap_or(f64::NAN);
        let model = TaylorAecNet::with_store(cfg.clone(), summary.trainer.store)?;
        let records = evaluate_items(&Pipeline::new(pipeline.clone(), Some(model)), items, eval)?;
        rows.push(AblationRow {
            name: name.to_string(),
            params: param_count(&cfg)?,
            steps: summary.trainer.step,
            final_loss,
            erle_st_fe_db: mean(
                records
                    .iter()
                    .filter(|r| r.scenario == Scenario::FarEnd.as_str())
                    .filter_map(|r| r.erle_db),
            ),
            si_sdr_db: mean(records.iter().filter_map(|r| r.si_sdr_db)),
            rtf: mean(records.iter().map(|r| r.rtf)).unwrap_or(0.0),
        });
    }
    Ok(rows)
}

fn opt(v: Option<f64>) -> String {
    v.map_or("-".into(), |v| format!("{v:.2}"))
}

fn delta(v: Option<f64>, base: Option<f64>) -> String {
    match (v, base) {
        (Some(a), Some(b)) => format!("{:+.2}", a - b),
        _ => "-".into(),
    }
}

/// Plain-text comparison table with deltas against the first row.
pub fn format_ablation(rows: &[AblationRow]) -> String {
    let mut s = format!(
        "{:<10} {:>9} {:>6} {:>10} {:>9} {:>8} {:>9} {:>8} {:>6}\n",
        "config", "params", "steps", "loss", "ERLE", "dERLE", "SI-SDR", "dSISDR", "RTF"
    );
    let base = rows.first();
    for r in rows {
        s.push_str(&format!(
            "{:<10} {:>9} {:>6} {:>10.4} {:>9} {:>8} {:>9} {:>8} {:>6.3}\n",
            r.name,
            r.params,
            r.steps,
            r.final_loss,
            opt(r.erle_st_fe_db),
            delta(r.erle_st_fe_db, base.and_then(|b| b.erle_st_fe_db)),
            opt(r.si_sdr_db),
            delta(r.si_sdr_db, base.and_then(|b| b.si_sdr_db)),
            r.rtf
        ));
    }
    s
}
