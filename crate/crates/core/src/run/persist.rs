//! Run directories: config snapshot, plan, round CSVs, plot data, summary,
//! model and a manifest written last.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::{AtStage, RoundRecord, RunConfig, Stage, StageError, Trainer};
use crate::error::{Error, Result};
use crate::federation::RoundKind;
use crate::graph::ParamStore;
use crate::graph::{Architecture, ModelProfile};
use crate::latency::{total_latency, CutAssignment, Cuts, Fleet, LatencyBreakdown};
use crate::planner::evolve;
use crate::metrics::{DomainReport, MetricReport};

pub const CSV_SCHEMA: &str = "rounds-v1;metrics-v1";
const LOCK: &str = ".lock";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRow {
    pub round: usize,
    pub epoch: usize,
    pub kind: RoundKind,
    pub client: usize,
    pub domain: usize,
    pub cluster: usize,
    pub kld: f64,
    pub score: f64,
    pub global_kld: f64,
    pub global_score: f64,
    pub d_loss: f64,
    pub g_loss: f64,
    pub d_real: f64,
    pub d_fake: f64,
    pub d_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub round: usize,
    pub domain: String,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub fpr: f64,
    pub generation_score: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanDoc {
    pub fleet: String,
    pub architecture: String,
    pub batch: usize,
    pub cuts: Vec<Cuts>,
    pub profiles: Vec<String>,
    pub breakdown: LatencyBreakdown,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub scenario: String,
    pub seed: u64,
    pub flags: Vec<String>,
    pub epochs: usize,
    pub rounds: usize,
    pub round_kinds: Vec<RoundKind>,
    pub steps: u64,
    pub d_forwards_per_step: f64,
    pub g_forwards_per_step: f64,
    pub messages: u64,
    pub latency_seconds: f64,
    pub report: MetricReport,
    pub classifier_sha256: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub status: String,
    pub failed_stage: Option<String>,
    pub error: Option<String>,
    pub seed: u64,
    pub csv_schema: String,
    pub config: String,
    pub artifacts: Vec<String>,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub versions: BTreeMap<String, String>,
}

/// Trained parameters: one store per client and its server replica.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredModel {
    pub cuts: Vec<Cuts>,
    pub clients: Vec<ParamStore>,
    pub server: Vec<ParamStore>,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn write(dir: &Path, name: &str, bytes: &[u8], artifacts: &mut Vec<String>) -> Result<()> {
    let path = dir.join(name);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    if !artifacts.iter().any(|a| a == name) {
        artifacts.push(name.to_string());
    }
    Ok(())
}

fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| Error::Usage(e.to_string()))
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(file);
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

pub fn round_rows(trainer: &Trainer, records: &[RoundRecord]) -> Vec<RoundRow> {
    let mut rows = Vec::new();
    for rec in records {
        for (&k, c) in &rec.state.clients {
            let l = rec.losses.get(&k).copied().unwrap_or_default();
            rows.push(RoundRow {
                round: rec.state.round,
                epoch: rec.epoch,
                kind: rec.state.kind,
                client: k,
                domain: trainer.domain_of(k),
                cluster: c.cluster,
                kld: c.kld,
                score: c.score,
                global_kld: c.global_kld,
                global_score: c.global_score,
                d_loss: l.d_loss,
                g_loss: l.g_loss,
                d_real: l.d_real,
                d_fake: l.d_fake,
                d_accuracy: l.d_accuracy,
            });
        }
    }
    rows
}

fn metric_rows(round: usize, reports: &[DomainReport]) -> Vec<MetricRow> {
    reports
        .iter()
        .map(|r| MetricRow {
            round,
            domain: r.domain.clone(),
            accuracy: r.metrics.accuracy,
            precision: r.metrics.precision,
            recall: r.metrics.recall,
            f1: r.metrics.f1,
            fpr: r.metrics.fpr,
            generation_score: r.generation_score,
        })
        .collect()
}

/// Series files `plots/<name>.csv` with `round,value` rows.
fn plot_series(rounds: &[RoundRow], metrics: &[MetricRow]) -> BTreeMap<String, Vec<(usize, f64)>> {
    let mut series: BTreeMap<String, Vec<(usize, f64)>> = BTreeMap::new();
    let mut by_round: BTreeMap<usize, Vec<&RoundRow>> = BTreeMap::new();
    for r in rounds {
        by_round.entry(r.round).or_default().push(r);
    }
    for (round, rows) in by_round {
        let n = rows.len() as f64;
        for (name, v) in [
            ("d_loss", rows.iter().map(|r| r.d_loss).sum::<f64>() / n),
            ("g_loss", rows.iter().map(|r| r.g_loss).sum::<f64>() / n),
            ("d_accuracy", rows.iter().map(|r| r.d_accuracy).sum::<f64>() / n),
        ] {
            series.entry(name.to_string()).or_default().push((round, v));
        }
    }
    for m in metrics {
        let mut push = |name: &str, v: f64| {
            series.entry(format!("{name}_{}", m.domain)).or_default().push((m.round, v));
        };
        push("accuracy", m.accuracy);
        push("precision", m.precision);
        push("recall", m.recall);
        push("f1", m.f1);
        push("fpr", m.fpr);
        if let Some(g) = m.generation_score {
            push("generation_score", g);
        }
    }
    series
}

fn write_plots(dir: &Path, rounds: &[RoundRow], metrics: &[MetricRow], artifacts: &mut Vec<String>) -> Result<()> {
    #[derive(Serialize)]
    struct Point {
        round: usize,
        value: f64,
    }
    for (name, points) in plot_series(rounds, metrics) {
        let rows: Vec<Point> = points.into_iter().map(|(round, value)| Point { round, value }).collect();
        write(dir, &format!("plots/{name}.csv"), &csv_bytes(&rows)?, artifacts)?;
    }
    Ok(())
}

struct Lock(PathBuf);

impl Lock {
    fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOCK);
        OpenOptions::new().write(true).create_new(true).open(&path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::AlreadyExists {
                Error::Usage(format!("run directory {} is locked by another writer", dir.display()))
            } else {
                Error::io(&path, e)
            }
        })?;
        Ok(Self(path))
    }
}

impl Drop for Lock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

fn manifest(config: &RunConfig, started: u64, artifacts: &[String], failure: Option<&StageError>) -> RunManifest {
    RunManifest {
        status: if failure.is_some() { "failed" } else { "complete" }.into(),
        failed_stage: failure.map(|f| f.stage.to_string()),
        error: failure.map(|f| f.source.to_string()),
        seed: config.seed,
        csv_schema: CSV_SCHEMA.into(),
        config: "config.toml".into(),
        artifacts: artifacts.to_vec(),
        started_unix: started,
        finished_unix: now(),
        versions: [("huscf-core".to_string(), env!("CARGO_PKG_VERSION").to_string())].into(),
    }
}

fn plan_doc(
    config: &RunConfig,
    fleet: &Fleet,
    assignment: &CutAssignment,
    profile: &ModelProfile,
) -> std::result::Result<PlanDoc, StageError> {
    Ok(PlanDoc {
        fleet: config.fleet.clone(),
        architecture: config.architecture.clone(),
        batch: config.batch,
        cuts: assignment.cuts.clone(),
        profiles: fleet.clients.iter().map(|c| c.profile_name.clone()).collect(),
        breakdown: total_latency(fleet, assignment, profile).at(Stage::Plan)?,
    })
}

/// Plan cuts for the config's fleet and architecture without training.
pub fn plan(config: &RunConfig) -> std::result::Result<PlanDoc, StageError> {
    config.validate().at(Stage::Config)?;
    let architecture = Architecture::load(&config.architecture).at(Stage::Config)?;
    let fleet = Fleet::load(&config.fleet).at(Stage::Config)?.with_batch(config.batch);
    let profile = architecture.profile().at(Stage::Plan)?;
    let mut ga = config.ga.clone();
    ga.seed = ga.seed.wrapping_add(config.seed);
    let outcome = evolve(&ga, &fleet, &profile).at(Stage::Plan)?;
    plan_doc(config, &fleet, &outcome.assignment, &profile)
}

/// Train and evaluate `config`, writing everything under `dir`.
pub fn run(config: &RunConfig, dir: &Path) -> std::result::Result<RunSummary, StageError> {
    let _lock = Lock::acquire(dir).at(Stage::Persist)?;
    let started = now();
    let mut artifacts = Vec::new();
    let result = run_inner(config, dir, &mut artifacts);
    let m = manifest(config, started, &artifacts, result.as_ref().err());
    let text = serde_json::to_string_pretty(&m).map_err(Error::from).at(Stage::Persist)?;
    write(dir, "manifest.json", text.as_bytes(), &mut Vec::new()).at(Stage::Persist)?;
    result
}

fn run_inner(config: &RunConfig, dir: &Path, artifacts: &mut Vec<String>) -> std::result::Result<RunSummary, StageError> {
    write(dir, "config.toml", config.to_toml().as_bytes(), artifacts).at(Stage::Persist)?;
    let mut t = Trainer::new(config.clone())?;
    let plan = plan_doc(config, &t.fleet, &t.plan.assignment, &t.profile)?;
    let text = serde_json::to_string_pretty(&plan).map_err(Error::from).at(Stage::Persist)?;
    write(dir, "plan.json", text.as_bytes(), artifacts).at(Stage::Persist)?;

    let mut metrics = Vec::new();
    let mut last_report = None;
    while t.epoch < config.epochs {
        let closed = t.train_epoch()?.map(|r| r.state.round);
        if let Some(round) = closed {
            let rows = round_rows(&t, &t.rounds);
            write(dir, "rounds.csv", &csv_bytes(&rows).at(Stage::Persist)?, artifacts).at(Stage::Persist)?;
            let due = config.eval.every > 0 && round % config.eval.every == 0;
            if due {
                let r = t.evaluate(round)?;
                metrics.extend(metric_rows(round, &r));
                write(dir, "metrics.csv", &csv_bytes(&metrics).at(Stage::Persist)?, artifacts).at(Stage::Persist)?;
                last_report = Some((round, t.epoch, r));
            }
        }
    }
    let final_round = t.rounds.len();
    let report = match last_report {
        Some((round, epoch, r)) if round == final_round && epoch == t.epoch => r,
        _ => {
            let r = t.evaluate(final_round)?;
            metrics.extend(metric_rows(final_round, &r));
            r
        }
    };
    let rows = round_rows(&t, &t.rounds);
    write(dir, "rounds.csv", &csv_bytes(&rows).at(Stage::Persist)?, artifacts).at(Stage::Persist)?;
    write(dir, "metrics.csv", &csv_bytes(&metrics).at(Stage::Persist)?, artifacts).at(Stage::Persist)?;
    write_plots(dir, &rows, &metrics, artifacts).at(Stage::Persist)?;

    let model = StoredModel {
        cuts: t.plan.assignment.cuts.clone(),
        clients: t.system.clients.values().map(|c| c.store.clone()).collect(),
        server: t.system.server.values().cloned().collect(),
    };
    let text = serde_json::to_string(&model).map_err(Error::from).at(Stage::Persist)?;
    write(dir, "model.json", text.as_bytes(), artifacts).at(Stage::Persist)?;
    let mut hashes = BTreeMap::new();
    for (d, f) in &t.frozen {
        let name = format!("classifiers/{}.json", t.domains[*d].name);
        let text = serde_json::to_string(f).map_err(Error::from).at(Stage::Persist)?;
        write(dir, &name, text.as_bytes(), artifacts).at(Stage::Persist)?;
        hashes.insert(t.domains[*d].name.clone(), f.sha256.clone());
    }

    let summary = RunSummary {
        scenario: t.scenario.name.clone(),
        seed: config.seed,
        flags: config.flags.iter().map(ToString::to_string).collect(),
        epochs: t.epoch,
        rounds: t.rounds.len(),
        round_kinds: t.rounds.iter().map(|r| r.state.kind).collect(),
        steps: t.steps,
        d_forwards_per_step: t.d_forwards as f64 / t.steps.max(1) as f64,
        g_forwards_per_step: t.g_forwards as f64 / t.steps.max(1) as f64,
        messages: t.audit.messages,
        latency_seconds: t.latency,
        report: MetricReport {
            domains: report,
            latency_seconds: t.latency,
        },
        classifier_sha256: hashes,
    };
    let text = serde_json::to_string_pretty(&summary).map_err(Error::from).at(Stage::Persist)?;
    write(dir, "summary.json", text.as_bytes(), artifacts).at(Stage::Persist)?;
    Ok(summary)
}

/// Rebuild plot data from the CSVs of an existing run.
pub fn regenerate_plots(dir: &Path) -> Result<Vec<String>> {
    let manifest = dir.join("manifest.json");
    if !manifest.exists() {
        return Err(Error::io(&manifest, std::io::Error::from(std::io::ErrorKind::NotFound)));
    }
    let rounds: Vec<RoundRow> = read_csv(&dir.join("rounds.csv"))?;
    let metrics: Vec<MetricRow> = if dir.join("metrics.csv").exists() {
        read_csv(&dir.join("metrics.csv"))?
    } else {
        Vec::new()
    };
    let mut written = Vec::new();
    write_plots(dir, &rounds, &metrics, &mut written)?;
    Ok(written)
}

/// Re-evaluate the stored model of a finished run. With `train_classifiers`
/// missing frozen classifiers are trained and stored; otherwise they must
/// exist when generation scores are enabled.
pub fn evaluate_dir(dir: &Path, train_classifiers: bool) -> std::result::Result<Vec<DomainReport>, StageError> {
    let config = RunConfig::load(&dir.join("config.toml")).at(Stage::Config)?;
    let model_path = dir.join("model.json");
    let text = fs::read_to_string(&model_path).map_err(|e| Error::io(&model_path, e)).at(Stage::Config)?;
    let model: StoredModel = serde_json::from_str(&text).map_err(Error::from).at(Stage::Config)?;
    let mut t = Trainer::new(config.clone())?;
    if model.cuts != t.plan.assignment.cuts || model.clients.len() != t.system.clients.len() {
        return Err(StageError {
            stage: Stage::Config,
            source: Error::Usage("stored model does not match the run's plan".into()),
        });
    }
    for (k, store) in model.clients.into_iter().enumerate() {
        let mut s = store;
        s.zero_grad_reset();
        t.system.clients.get_mut(&k).expect("same clients").store = s;
    }
    for (k, store) in model.server.into_iter().enumerate() {
        let mut s = store;
        s.zero_grad_reset();
        t.system.server.insert(k, s);
    }
    if config.eval.generation_score {
        for d in 0..t.domains.len() {
            let path = dir.join(format!("classifiers/{}.json", t.domains[d].name));
            match crate::metrics::FrozenClassifier::load(&path, d) {
                Ok(f) => {
                    t.frozen.insert(d, f);
                }
                Err(e) if !train_classifiers => return Err(StageError { stage: Stage::Evaluate, source: e }),
                Err(_) => {
                    let f = t.frozen_classifier(d).at(Stage::Evaluate)?.clone();
                    let text = serde_json::to_string(&f).map_err(Error::from).at(Stage::Persist)?;
                    write(dir, &format!("classifiers/{}.json", t.domains[d].name), text.as_bytes(), &mut Vec::new())
                        .at(Stage::Persist)?;
                }
            }
        }
    }
    let round = config.rounds();
    let reports = t.evaluate(round)?;
    let text = serde_json::to_string_pretty(&reports).map_err(Error::from).at(Stage::Persist)?;
    write(dir, "eval.json", text.as_bytes(), &mut Vec::new()).at(Stage::Persist)?;
    Ok(reports)
}
