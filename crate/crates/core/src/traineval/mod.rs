//! Training, metrics, ablations, and the slate-diversity case study.

mod case_study;
mod metrics;
mod train;

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

pub use case_study::{case_study, diversity_from_scores, CaseStudy, ChannelStats, SignTest};
pub use metrics::{auc, logloss, relaimpr, EvalMetrics};
pub use train::{
    evaluate, predict, split_by_day, train, EpochMetrics, TrainConfig, TrainReport, ADAGRAD_EPSILON, THREADS_ENV,
};

use crate::error::{Error, Result};
use crate::features::{Sample, VocabManifest};
use crate::model::{Ablation, Ablations, Model, ModelConfig};

/// Everything `eval` reports for one checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub auc: f64,
    pub logloss: f64,
    pub samples: usize,
    pub baseline_auc: Option<f64>,
    pub relaimpr_vs_baseline: Option<f64>,
    pub diversity: Option<CaseStudy>,
}

impl MetricsReport {
    pub fn new(m: EvalMetrics, baseline: Option<EvalMetrics>) -> Result<Self> {
        Ok(Self {
            auc: m.auc,
            logloss: m.logloss,
            samples: m.samples,
            baseline_auc: baseline.map(|b| b.auc),
            relaimpr_vs_baseline: baseline.map(|b| relaimpr(m.auc, b.auc)).transpose()?,
            diversity: None,
        })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("metric\tvalue\n");
        let _ = writeln!(out, "samples\t{}", self.samples);
        let _ = writeln!(out, "auc\t{:.6}", self.auc);
        let _ = writeln!(out, "logloss\t{:.6}", self.logloss);
        if let (Some(b), Some(r)) = (self.baseline_auc, self.relaimpr_vs_baseline) {
            let _ = writeln!(out, "baseline_auc\t{b:.6}");
            let _ = writeln!(out, "relaimpr_pct\t{r:.2}");
        }
        if let Some(d) = &self.diversity {
            for c in &d.channels {
                let _ = writeln!(out, "{}_mean_categories\t{:.4}", c.channel, c.mean_categories);
                let _ = writeln!(out, "{}_mean_brands\t{:.4}", c.channel, c.mean_brands);
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    /// `none` for the full model, otherwise the flag name.
    pub flag: String,
    pub label: String,
    pub metrics: EvalMetrics,
}

/// Trains the full model and each single-flag ablation with the same seeds.
pub fn ablate(
    base: &ModelConfig,
    manifest: &VocabManifest,
    train_set: &[Sample],
    test_set: &[Sample],
    cfg: &TrainConfig,
) -> Result<Vec<AblationRow>> {
    let mut runs = vec![(None, base.ablations)];
    for a in Ablation::ALL {
        let mut flags = base.ablations;
        flags.set(a, true);
        runs.push((Some(a), flags));
    }
    runs.into_iter()
        .map(|(a, flags)| {
            let mut mc = base.clone();
            mc.ablations = flags;
            let mut model = Model::new(mc, manifest.clone())?;
            let report = train(&mut model, train_set, test_set, cfg)?;
            Ok(AblationRow {
                flag: a.map_or("none".into(), |a| a.flag().into()),
                label: a.map_or("DPAN".into(), |a| format!("w/o {}", a.label())),
                metrics: report.final_test,
            })
        })
        .collect()
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut out = String::from("flag\tmodel\tauc\tlogloss\n");
    for r in rows {
        let _ = writeln!(out, "{}\t{}\t{:.6}\t{:.6}", r.flag, r.label, r.metrics.auc, r.metrics.logloss);
    }
    out
}

pub fn epoch_table(report: &TrainReport) -> String {
    let mut out = String::from("epoch\ttrain_loss\ttest_auc\ttest_logloss\n");
    for e in &report.epochs {
        let (a, l) = e.test.map_or((f64::NAN, f64::NAN), |m| (m.auc, m.logloss));
        let _ = writeln!(out, "{}\t{:.6}\t{a:.6}\t{l:.6}", e.epoch, e.train_loss);
    }
    out
}

/// Writes `text` prefixed by the resolved config as `#` lines.
pub fn write_with_config(path: &Path, config: &str, text: &str) -> Result<()> {
    let mut out = String::new();
    for l in config.lines() {
        let _ = writeln!(out, "# {l}");
    }
    out.push_str(text);
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Machine-readable summary: `{ "config": {...}, "result": ... }`.
pub fn write_summary<T: Serialize>(path: &Path, config: &str, result: &T) -> Result<()> {
    let cfg: std::collections::BTreeMap<&str, &str> = config
        .lines()
        .filter_map(|l| l.split_once('=').map(|(k, v)| (k.trim(), v.trim())))
        .collect();
    let value = serde_json::json!({ "config": cfg, "result": result });
    let text = serde_json::to_string_pretty(&value).map_err(|e| Error::Contract(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Flags enabled in `a`, comma-separated, or `none`.
pub fn describe_ablations(a: &Ablations) -> String {
    let v: Vec<&str> = a.active().iter().map(|x| x.flag()).collect();
    if v.is_empty() {
        "none".into()
    } else {
        v.join(",")
    }
}
