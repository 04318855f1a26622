//! Runs a matrix of training configs over several seeds and tabulates
//! test metrics as mean ± std plus per-seed values.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::{echo_config, parse_config_str, TrainConfig};
use crate::dataset::LabeledSet;
use crate::error::{Error, Result};
use crate::loss::ConsistencyVariant;
use crate::net::SegNet;
use crate::tensor::Image;
use crate::train::{evaluate, train, EpochLog, EvalReport, TrainOutput};

/// Paper-style ablation grid values for the unlabeled weight.
pub const LAMBDA_SWEEP: [f64; 4] = [0.009, 0.01, 0.03, 0.05];

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentEntry {
    pub name: String,
    pub config: TrainConfig,
}

/// JSON matrix file: a base config, named override objects and seeds.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixSpec {
    #[serde(default)]
    pub base: Value,
    pub runs: Vec<RunSpec>,
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    pub name: String,
    #[serde(default)]
    pub overrides: Value,
}

fn merge(base: &mut Value, over: &Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                merge(b.entry(k.clone()).or_insert(Value::Null), v);
            }
        }
        (b, o) => *b = o.clone(),
    }
}

impl MatrixSpec {
    /// Resolves every run into a validated config. Errors name the run.
    pub fn entries(&self) -> Result<Vec<ExperimentEntry>> {
        if self.runs.is_empty() {
            return Err(Error::invalid("runs", "need at least one run"));
        }
        if self.seeds.is_empty() {
            return Err(Error::invalid("seeds", "need at least one seed"));
        }
        self.runs
            .iter()
            .map(|r| {
                let mut v = if self.base.is_null() { Value::Object(Default::default()) } else { self.base.clone() };
                if !r.overrides.is_null() {
                    merge(&mut v, &r.overrides);
                }
                let config = parse_config_str(&v.to_string()).map_err(|e| match e {
                    Error::InvalidArgument { name, detail } => {
                        Error::InvalidArgument { name: format!("runs[{}].{name}", r.name), detail }
                    }
                    Error::Config(m) => Error::Config(format!("run `{}`: {m}", r.name)),
                    other => other,
                })?;
                Ok(ExperimentEntry { name: r.name.clone(), config })
            })
            .collect()
    }
}

/// Labeled-only baseline against cut-paste consistency with the given base.
pub fn comparison_matrix(base: &TrainConfig) -> Vec<ExperimentEntry> {
    vec![
        ExperimentEntry { name: "supervised".into(), config: base.clone().supervised() },
        ExperimentEntry { name: format!("cut-paste-{}", base.variant.name()), config: base.clone() },
    ]
}

/// Every combination of the three synthesis toggles, the four background
/// variants and the unlabeled-weight sweep.
pub fn ablation_matrix(base: &TrainConfig) -> Vec<ExperimentEntry> {
    let mut out = Vec::new();
    for bits in 0..8u8 {
        let (blur, noise, color) = (bits & 4 != 0, bits & 2 != 0, bits & 1 != 0);
        for variant in ConsistencyVariant::ALL {
            for lambda_u in LAMBDA_SWEEP {
                let mut c = base.clone();
                c.synth.mask_blur = blur;
                c.synth.background_noise = noise;
                c.synth.color_matching = color;
                c.variant = variant;
                c.lambda_u = lambda_u;
                out.push(ExperimentEntry {
                    name: format!(
                        "blur={} noise={} color={} bg={} lambda_u={lambda_u}",
                        u8::from(blur),
                        u8::from(noise),
                        u8::from(color),
                        variant.name()
                    ),
                    config: c,
                });
            }
        }
    }
    out
}

#[derive(Clone, Debug, Serialize)]
pub struct RunRecord {
    pub config: String,
    pub seed: u64,
    pub metrics: Option<EvalReport>,
    pub best_epoch: Option<u64>,
    pub epochs_run: Option<usize>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    /// Sample standard deviation; zero for a single value.
    pub fn of(values: &[f64]) -> Option<Stat> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var =
            if values.len() > 1 { values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
        Some(Stat { mean, std: var.sqrt() })
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ConfigSummary {
    pub config: String,
    pub completed: usize,
    pub failed: usize,
    pub jaccard: Option<Stat>,
    pub f1: Option<Stat>,
    pub auc_pr: Option<Stat>,
    /// `(seed, jaccard)` for every completed run.
    pub per_seed_jaccard: Vec<(u64, f64)>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ExperimentReport {
    pub inputs_hash: String,
    pub seeds: Vec<u64>,
    pub summaries: Vec<ConfigSummary>,
    pub runs: Vec<RunRecord>,
}

impl ExperimentReport {
    pub fn summary(&self, config: &str) -> Option<&ConfigSummary> {
        self.summaries.iter().find(|s| s.config == config)
    }

    /// Aligned text table, one row per config.
    pub fn to_table(&self) -> String {
        let fmt = |s: &Option<Stat>| {
            s.as_ref().map_or("-".to_string(), |s| format!("{:.2} ± {:.2}", 100.0 * s.mean, 100.0 * s.std))
        };
        let rows: Vec<[String; 6]> = self
            .summaries
            .iter()
            .map(|s| {
                let seeds =
                    s.per_seed_jaccard.iter().map(|(_, j)| format!("{:.2}", 100.0 * j)).collect::<Vec<_>>().join(" ");
                [
                    s.config.clone(),
                    format!("{}/{}", s.completed, s.completed + s.failed),
                    fmt(&s.jaccard),
                    fmt(&s.f1),
                    fmt(&s.auc_pr),
                    seeds,
                ]
            })
            .collect();
        let header = ["config", "runs", "jaccard %", "f1 %", "auc-pr %", "per-seed jaccard %"].map(String::from);
        let mut widths = header.clone().map(|h| h.chars().count());
        for r in &rows {
            for (w, c) in widths.iter_mut().zip(r) {
                *w = (*w).max(c.chars().count());
            }
        }
        let mut out = String::new();
        for r in std::iter::once(&header).chain(&rows) {
            let cells: Vec<String> = r.iter().zip(widths).map(|(c, w)| format!("{c:<w$}")).collect();
            let _ = writeln!(out, "{}", cells.join("  ").trim_end());
        }
        out
    }
}

/// Data shared by every run in a matrix.
pub struct ExperimentData<'a> {
    pub labeled: &'a LabeledSet,
    pub unlabeled: &'a [Image],
    pub test: &'a LabeledSet,
    pub inputs_hash: String,
}

fn write_run_outputs(
    dir: &Path,
    cfg: &TrainConfig,
    out: &TrainOutput,
    metrics: &EvalReport,
    inputs_hash: &str,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_training_outputs(dir, cfg, out, inputs_hash)?;
    let path = dir.join("metrics.json");
    std::fs::write(&path, serde_json::to_string_pretty(metrics)?).map_err(|e| Error::io(&path, e))
}

/// Resolved config, run record, checkpoints and the per-epoch log.
pub fn write_training_outputs(dir: &Path, cfg: &TrainConfig, out: &TrainOutput, inputs_hash: &str) -> Result<()> {
    let write = |name: &str, text: String| {
        let p = dir.join(name);
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    write("config.json", echo_config(cfg)?)?;
    let run = serde_json::json!({
        "seed": cfg.seed,
        "inputs_sha256": inputs_hash,
        "best_epoch": out.best_epoch,
        "stopped_early": out.stopped_early,
        "class_balance": out.balance,
        "train_ids": out.train_ids,
        "val_ids": out.val_ids,
    });
    write("run.json", serde_json::to_string_pretty(&run)?)?;
    out.student.save(&dir.join("params.cpt"))?;
    out.teacher.save(&dir.join("teacher.cpt"))?;
    write("log.jsonl", log_lines(&out.log)?)
}

pub fn log_lines(log: &[EpochLog]) -> Result<String> {
    let mut s = String::new();
    for l in log {
        s.push_str(&serde_json::to_string(l)?);
        s.push('\n');
    }
    Ok(s)
}

/// Runs every `(entry, seed)` pair. Failed runs are recorded, not fatal.
/// With `out_dir`, each run and the final report are written to disk.
pub fn run_experiment(
    entries: &[ExperimentEntry],
    seeds: &[u64],
    data: &ExperimentData<'_>,
    out_dir: Option<&Path>,
    mut progress: impl FnMut(&RunRecord),
) -> Result<ExperimentReport> {
    if entries.is_empty() || seeds.is_empty() {
        return Err(Error::invalid("experiment", "need at least one config and one seed"));
    }
    let mut runs = Vec::new();
    for (k, entry) in entries.iter().enumerate() {
        for &seed in seeds {
            let mut cfg = entry.config.clone();
            cfg.seed = seed;
            let result = train(&cfg, data.labeled, data.unlabeled, |_| {}).and_then(|out| {
                let net = SegNet::new(out.student.architecture());
                let metrics = evaluate(&net, &out.student, data.test, cfg.threshold)?;
                if let Some(dir) = out_dir {
                    let run_dir: PathBuf = dir.join(format!("run-{k:03}")).join(format!("seed-{seed}"));
                    write_run_outputs(&run_dir, &cfg, &out, &metrics, &data.inputs_hash)?;
                }
                Ok((out, metrics))
            });
            let record = match result {
                Ok((out, metrics)) => RunRecord {
                    config: entry.name.clone(),
                    seed,
                    metrics: Some(metrics),
                    best_epoch: Some(out.best_epoch),
                    epochs_run: Some(out.log.len()),
                    error: None,
                },
                Err(e) => RunRecord {
                    config: entry.name.clone(),
                    seed,
                    metrics: None,
                    best_epoch: None,
                    epochs_run: None,
                    error: Some(e.to_string()),
                },
            };
            progress(&record);
            runs.push(record);
        }
    }
    let summaries = entries
        .iter()
        .map(|e| {
            let mine: Vec<&RunRecord> = runs.iter().filter(|r| r.config == e.name).collect();
            let ok: Vec<&EvalReport> = mine.iter().filter_map(|r| r.metrics.as_ref()).collect();
            let auc: Vec<f64> = ok.iter().filter_map(|m| m.auc_pr).collect();
            ConfigSummary {
                config: e.name.clone(),
                completed: ok.len(),
                failed: mine.len() - ok.len(),
                jaccard: Stat::of(&ok.iter().map(|m| m.jaccard).collect::<Vec<_>>()),
                f1: Stat::of(&ok.iter().map(|m| m.f1).collect::<Vec<_>>()),
                auc_pr: Stat::of(&auc),
                per_seed_jaccard: mine.iter().filter_map(|r| r.metrics.as_ref().map(|m| (r.seed, m.jaccard))).collect(),
            }
        })
        .collect();
    let report = ExperimentReport { inputs_hash: data.inputs_hash.clone(), seeds: seeds.to_vec(), summaries, runs };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join("report.json");
        std::fs::write(&json, serde_json::to_string_pretty(&report)?).map_err(|e| Error::io(&json, e))?;
        let txt = dir.join("report.txt");
        std::fs::write(&txt, report.to_table()).map_err(|e| Error::io(&txt, e))?;
    }
    Ok(report)
}
