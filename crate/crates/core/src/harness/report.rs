//! The experiment report and its file forms: nested JSON, long CSVs and a
//! plain-text comparison table.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::HarnessError;
use crate::dataset::DatasetStats;
use crate::metrics::MetricSpec;
use crate::ranking::{ConsistencyVerdict, ModelRanking, SweepResult, TauResult};
use crate::targetset::Strategy;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub model: String,
    /// Mean over runs of the per-run mean metric.
    pub mean: f64,
    /// Standard deviation of the per-run means; 0 for a single run.
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricResult {
    pub metric: MetricSpec,
    pub summaries: Vec<ModelSummary>,
    pub ranking: ModelRanking,
    /// Against the full ranking of the same metric; absent for the full
    /// strategy itself or when no full ranking was computed.
    pub tau_vs_full: Option<TauResult>,
    pub consistency: Option<ConsistencyVerdict>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategyResult {
    pub strategy: Strategy,
    /// Negatives per target set; absent for the full strategy.
    pub eta: Option<usize>,
    pub runs: usize,
    pub metrics: Vec<MetricResult>,
}

/// One model's mean metric in one evaluation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunValue {
    pub strategy: Strategy,
    pub eta: Option<usize>,
    pub run: usize,
    pub run_seed: u64,
    pub model: String,
    pub metric: MetricSpec,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub model: String,
    pub architecture: String,
    pub parameters: usize,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_validation_hr10: Option<f64>,
    pub checkpoint: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub dataset_hash: String,
    pub base_seed: u64,
    pub seed_derivation: String,
    pub code_version: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingReport {
    pub experiment: String,
    pub dataset: String,
    pub dataset_stats: DatasetStats,
    pub split: String,
    pub models: Vec<String>,
    pub training: Vec<TrainingSummary>,
    pub results: Vec<StrategyResult>,
    pub run_values: Vec<RunValue>,
    pub sweep: Option<SweepResult>,
    pub warnings: Vec<String>,
    pub provenance: Provenance,
}

impl RankingReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        serde_json::from_str(text).map_err(|e| HarnessError::Config(format!("report.json: {e}")))
    }

    pub fn strategy(&self, strategy: Strategy) -> Option<&StrategyResult> {
        self.results.iter().find(|r| r.strategy == strategy)
    }

    /// Recomputes every stored tau from the stored rank vectors.
    pub fn check_taus(&self) -> Result<(), HarnessError> {
        for r in &self.results {
            for m in &r.metrics {
                let Some(tau) = &m.tau_vs_full else { continue };
                let full = self
                    .strategy(Strategy::Full)
                    .and_then(|f| f.metrics.iter().find(|x| x.metric == m.metric))
                    .ok_or_else(|| HarnessError::Config("tau stored without a full ranking".into()))?;
                let again = crate::ranking::kendall_tau_a(&m.ranking, &full.ranking)
                    .map_err(|e| HarnessError::Config(e.to_string()))?;
                if &again != tau {
                    return Err(HarnessError::Config(format!(
                        "stored tau {} for {} {} does not match rank vectors ({})",
                        tau.tau,
                        r.strategy.name(),
                        m.metric,
                        again.tau
                    )));
                }
            }
        }
        Ok(())
    }
}

fn eta_cell(eta: Option<usize>) -> String {
    eta.map_or_else(|| "full".to_string(), |e| e.to_string())
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// One row per (strategy, metric, model).
pub fn summary_csv(report: &RankingReport) -> String {
    let mut out = String::from("dataset,strategy,eta,metric,model,mean,std,rank,tau_vs_full,consistent\n");
    for r in &report.results {
        for m in &r.metrics {
            for s in &m.summaries {
                let rank = m.ranking.rank_of(&s.model).unwrap_or(0);
                let tau = m.tau_vs_full.map(|t| t.tau.to_string()).unwrap_or_default();
                let consistent = m
                    .consistency
                    .as_ref()
                    .map(|c| c.consistent.to_string())
                    .unwrap_or_default();
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{},{},{},{}",
                    csv_field(&report.dataset),
                    r.strategy.name(),
                    eta_cell(r.eta),
                    m.metric,
                    csv_field(&s.model),
                    s.mean,
                    s.std,
                    rank,
                    tau,
                    consistent
                );
            }
        }
    }
    out
}

/// Every run-level mean the summaries are computed from.
pub fn runs_csv(report: &RankingReport) -> String {
    let mut out = String::from("dataset,strategy,eta,run,run_seed,metric,model,value\n");
    for v in &report.run_values {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            csv_field(&report.dataset),
            v.strategy.name(),
            eta_cell(v.eta),
            v.run,
            v.run_seed,
            v.metric,
            csv_field(&v.model),
            v.value
        );
    }
    out
}

/// Long format for plotting rank against sample size.
pub fn sweep_csv(report: &RankingReport, sweep: &SweepResult) -> String {
    let mut out = String::from("dataset,strategy,eta,effective_eta,metric,model,mean,rank,tau_vs_full\n");
    for p in &sweep.points {
        for e in &p.ranking.entries {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                csv_field(&report.dataset),
                sweep.strategy.name(),
                p.eta,
                p.effective_eta.map_or_else(|| "full".to_string(), |e| e.to_string()),
                sweep.metric,
                csv_field(&e.model),
                e.mean.map(|m| m.to_string()).unwrap_or_default(),
                e.rank,
                p.tau_vs_full.tau
            );
        }
    }
    out
}

/// Rank 1 is marked `**` (bold), rank 2 `__` (underline); the glyph bar
/// has one block per model beaten plus one.
fn annotate(mean: f64, rank: usize, models: usize) -> String {
    let mark = match rank {
        1 => "**",
        2 => "__",
        _ => "  ",
    };
    let glyphs = "■".repeat(models + 1 - rank);
    format!("{mark}{mean:.4}{mark} ({rank}) {glyphs:<width$}", width = models)
}

/// Models as columns, one row per strategy, tau against full at the end.
pub fn text_table(report: &RankingReport) -> String {
    let mut out = String::new();
    let s = &report.dataset_stats;
    let _ = writeln!(
        out,
        "{} on {} ({} users, {} items, {} split)",
        report.experiment, report.dataset, s.users, s.items, report.split
    );
    let metrics: Vec<MetricSpec> = {
        let mut seen = Vec::new();
        for r in &report.results {
            for m in &r.metrics {
                if !seen.contains(&m.metric) {
                    seen.push(m.metric);
                }
            }
        }
        seen
    };
    let n = report.models.len();
    // marks, mean, " (k) ", glyphs and a two-space gap
    let cell = 4 + 6 + 6 + n + 2;
    for metric in metrics {
        let _ = writeln!(out, "\n{metric}");
        let mut header = format!("{:<16}", "strategy");
        for m in &report.models {
            let _ = write!(header, "{:<cell$}", m);
        }
        header.push_str("tau");
        let _ = writeln!(out, "{}", header.trim_end());
        for r in &report.results {
            let Some(res) = r.metrics.iter().find(|m| m.metric == metric) else {
                continue;
            };
            let label = match r.eta {
                Some(e) => format!("{} ({e})", r.strategy.name()),
                None => r.strategy.name().to_string(),
            };
            let mut line = format!("{label:<16}");
            for model in &report.models {
                let mean = res.summaries.iter().find(|s| &s.model == model).map(|s| s.mean);
                let rank = res.ranking.rank_of(model);
                let text = match (mean, rank) {
                    (Some(v), Some(k)) => annotate(v, k, n),
                    _ => "-".into(),
                };
                let _ = write!(line, "{text:<cell$}");
            }
            match &res.tau_vs_full {
                Some(t) => {
                    let (num, den) = t.reduced();
                    let consistent = if res.consistency.as_ref().is_some_and(|c| c.consistent) {
                        "consistent"
                    } else {
                        "inconsistent"
                    };
                    let _ = write!(line, "{:.2} ({num}/{den}, {consistent})", t.tau);
                }
                None => line.push('-'),
            }
            let _ = writeln!(out, "{}", line.trim_end());
        }
    }
    out.push_str("\n**x** best, __x__ second best; (k) rank; one ■ per model ranked at or below.\n");
    out
}

/// One written artifact with its content hash.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmitManifest {
    pub files: Vec<ManifestEntry>,
    /// Artifacts not written, with the reason.
    pub absent: BTreeMap<String, String>,
}

/// Writes `report.json`, `summary.csv`, `runs.csv`, `table.txt`,
/// `sweep.csv` (only with a sweep) and `manifest.json` into `dir`.
pub fn emit_reports(report: &RankingReport, dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    fs::create_dir_all(dir).map_err(|e| HarnessError::io("report", dir, e))?;
    let mut files = vec![
        ("report.json", report.to_json()),
        ("summary.csv", summary_csv(report)),
        ("runs.csv", runs_csv(report)),
        ("table.txt", text_table(report)),
    ];
    let mut absent = BTreeMap::new();
    match &report.sweep {
        Some(sweep) => files.push(("sweep.csv", sweep_csv(report, sweep))),
        None => {
            absent.insert("sweep.csv".to_string(), "no sample-size sweep in this run".to_string());
        }
    }
    let stale = dir.join("sweep.csv");
    if report.sweep.is_none() && stale.exists() {
        fs::remove_file(&stale).map_err(|e| HarnessError::io("report", &stale, e))?;
    }
    let mut written = Vec::new();
    let mut entries = Vec::new();
    for (name, body) in files {
        let path = dir.join(name);
        fs::write(&path, &body).map_err(|e| HarnessError::io("report", &path, e))?;
        entries.push(ManifestEntry {
            file: name.to_string(),
            sha256: hex::encode(Sha256::digest(body.as_bytes())),
        });
        written.push(path);
    }
    let manifest = EmitManifest { files: entries, absent };
    let path = dir.join("manifest.json");
    let mut body = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    body.push('\n');
    fs::write(&path, body).map_err(|e| HarnessError::io("report", &path, e))?;
    written.push(path);
    Ok(written)
}
