//! End-to-end pipeline: plan cuts, split-train, federate every E epochs,
//! evaluate.

mod config;
mod persist;
#[cfg(test)]
mod tests;

pub use config::{parse_flags, EvalSection, FederationSection, Flag, RunConfig, FLAG_NAMES};
pub use persist::{
    evaluate_dir, plan, regenerate_plots, run, MetricRow, PlanDoc, RoundRow, RunManifest, RunSummary, StoredModel, CSV_SCHEMA,
};

use std::collections::BTreeMap;
use std::fmt;

use rand::distributions::WeightedIndex;
use rand::prelude::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{partition, ClientShard, DomainData, Scenario};
use crate::error::{Error, Result};
use crate::federation::{federation_round, ClusterState, FederationConfig, RoundInput};
use crate::graph::{Architecture, Mode, ModelProfile, Net};
use crate::latency::{Cuts, Fleet};
use crate::metrics::{classifier_eval, generation_score_of, latency_report, ClassMetrics, DomainReport, FrozenClassifier};
use crate::optim::Adam;
use crate::planner::{evolve, GaOutcome};
use crate::split::{training_step, ClientBatch, SplitMessage, SplitSystem, Transport};
use crate::tensor::Tensor;

const ORDER_SEED: u64 = 0x5EED_0001;
const NOISE_SEED: u64 = 0x5EED_0002;
const INIT_SEED: u64 = 0x5EED_0003;
const EVAL_SEED: u64 = 0x5EED_0004;
const FROZEN_SEED: u64 = 0x5EED_0005;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Config,
    Plan,
    Data,
    Init,
    Train,
    Federate,
    Evaluate,
    Persist,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Config => "config",
            Stage::Plan => "plan",
            Stage::Data => "data",
            Stage::Init => "init",
            Stage::Train => "train",
            Stage::Federate => "federate",
            Stage::Evaluate => "evaluate",
            Stage::Persist => "persist",
        };
        f.write_str(s)
    }
}

#[derive(Debug, thiserror::Error)]
#[error("[{stage}] {source}")]
pub struct StageError {
    pub stage: Stage,
    #[source]
    pub source: Error,
}

pub(crate) trait AtStage<T> {
    fn at(self, stage: Stage) -> std::result::Result<T, StageError>;
}

impl<T> AtStage<T> for Result<T> {
    fn at(self, stage: Stage) -> std::result::Result<T, StageError> {
        self.map_err(|source| StageError { stage, source })
    }
}

/// Checks every message crossing the split: only cut-boundary activations
/// or gradients with the tensor shape of that boundary.
#[derive(Clone, Debug, Default)]
pub struct AuditBus {
    shapes: BTreeMap<(Net, usize), Vec<usize>>,
    pub messages: u64,
    pub violations: Vec<String>,
}

impl AuditBus {
    pub fn new(sys: &SplitSystem) -> Self {
        let mut shapes = BTreeMap::new();
        for net in [Net::Generator, Net::Discriminator] {
            let n = sys.network(net);
            for b in 1..n.major_count() {
                shapes.insert((net, b), n.blocks[b - 1].output_shape().to_vec());
            }
        }
        Self {
            shapes,
            ..Self::default()
        }
    }
}

impl Transport for AuditBus {
    fn carry(&mut self, msg: SplitMessage) -> SplitMessage {
        self.messages += 1;
        match self.shapes.get(&(msg.network, msg.boundary)) {
            Some(s) if s.as_slice() == msg.payload.sample_shape() && msg.payload.rows() == msg.rows => {}
            _ => self.violations.push(format!(
                "client {} {} message at layer {} with shape {:?}",
                msg.client,
                msg.network.tag(),
                msg.boundary,
                msg.payload.shape()
            )),
        }
        msg
    }
}

/// Per-client means over the steps since the last round.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossMeans {
    pub d_loss: f64,
    pub g_loss: f64,
    pub d_real: f64,
    pub d_fake: f64,
    pub d_accuracy: f64,
    pub steps: u64,
}

impl LossMeans {
    fn add(&mut self, d_loss: f64, g_loss: f64, d_real: f64, d_fake: f64, d_accuracy: f64) {
        self.d_loss += d_loss;
        self.g_loss += g_loss;
        self.d_real += d_real;
        self.d_fake += d_fake;
        self.d_accuracy += d_accuracy;
        self.steps += 1;
    }

    fn mean(&self) -> Self {
        let n = self.steps.max(1) as f64;
        Self {
            d_loss: self.d_loss / n,
            g_loss: self.g_loss / n,
            d_real: self.d_real / n,
            d_fake: self.d_fake / n,
            d_accuracy: self.d_accuracy / n,
            steps: self.steps,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub epoch: usize,
    pub state: ClusterState,
    pub losses: BTreeMap<usize, LossMeans>,
}

/// State of one training run.
pub struct Trainer {
    pub config: RunConfig,
    pub architecture: Architecture,
    pub fleet: Fleet,
    pub scenario: Scenario,
    pub profile: ModelProfile,
    pub plan: GaOutcome,
    pub latency: f64,
    pub domains: Vec<DomainData>,
    pub shards: Vec<ClientShard>,
    pub system: SplitSystem,
    pub federation: FederationConfig,
    pub audit: AuditBus,
    pub epoch: usize,
    pub steps: u64,
    pub d_forwards: u64,
    pub g_forwards: u64,
    pub rounds: Vec<RoundRecord>,
    pub frozen: BTreeMap<usize, FrozenClassifier>,
    optims: BTreeMap<usize, Adam>,
    input: RoundInput,
    window: BTreeMap<usize, LossMeans>,
    present: BTreeMap<usize, Vec<usize>>,
}

impl Trainer {
    pub fn new(config: RunConfig) -> std::result::Result<Self, StageError> {
        config.validate().at(Stage::Config)?;
        let architecture = Architecture::load(&config.architecture).at(Stage::Config)?;
        let fleet = Fleet::load(&config.fleet).at(Stage::Config)?.with_batch(config.batch);
        let scenario = Scenario::load(&config.scenario).at(Stage::Config)?;
        if fleet.len() != scenario.client_count() {
            return Err(StageError {
                stage: Stage::Config,
                source: Error::config(
                    "fleet",
                    format!(
                        "fleet has {} clients but scenario {} has {}",
                        fleet.len(),
                        scenario.name,
                        scenario.client_count()
                    ),
                ),
            });
        }
        if scenario.classes != architecture.classes {
            return Err(StageError {
                stage: Stage::Config,
                source: Error::config(
                    "scenario",
                    format!(
                        "scenario has {} classes, architecture {} has {}",
                        scenario.classes, architecture.name, architecture.classes
                    ),
                ),
            });
        }

        let profile = architecture.profile().at(Stage::Plan)?;
        let mut ga = config.ga.clone();
        ga.seed = ga.seed.wrapping_add(config.seed);
        let plan = evolve(&ga, &fleet, &profile).at(Stage::Plan)?;
        let latency = latency_report(&fleet, &plan.assignment, &profile).at(Stage::Plan)?;

        let domains = scenario.load_domains(&config.data_root, config.seed).at(Stage::Data)?;
        let trains: Vec<_> = domains.iter().map(|d| d.train.clone()).collect();
        let shards = partition(&trains, &scenario, config.seed).at(Stage::Data)?;
        if let Some(d) = domains.iter().find(|d| d.train.sample_shape != architecture.sample_shape) {
            return Err(StageError {
                stage: Stage::Data,
                source: Error::config(
                    "scenario",
                    format!(
                        "domain {} has samples {:?}, architecture expects {:?}",
                        d.name, d.train.sample_shape, architecture.sample_shape
                    ),
                ),
            });
        }

        let (g, d) = architecture.build(!config.has(Flag::NoBatchnorm)).at(Stage::Init)?;
        let cuts: BTreeMap<usize, Cuts> = plan.assignment.cuts.iter().copied().enumerate().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ INIT_SEED);
        let system = SplitSystem::new(g, d, &cuts, &mut rng).at(Stage::Init)?;
        let audit = AuditBus::new(&system);
        let optims = cuts.keys().map(|&k| (k, Adam::new(config.optimizer))).collect();
        let input = RoundInput {
            summaries: BTreeMap::new(),
            sizes: shards.iter().map(|s| (s.client, s.size())).collect(),
            label_counts: shards.iter().map(|s| (s.client, s.data.label_histogram())).collect(),
        };
        let present = shards
            .iter()
            .map(|s| {
                let h = s.data.label_histogram();
                (s.client, (0..h.len()).filter(|&c| h[c] > 0).collect())
            })
            .collect();
        let federation = config.federation(domains.len());
        Ok(Self {
            config,
            architecture,
            fleet,
            scenario,
            profile,
            plan,
            latency,
            domains,
            shards,
            system,
            federation,
            audit,
            epoch: 0,
            steps: 0,
            d_forwards: 0,
            g_forwards: 0,
            rounds: Vec::new(),
            frozen: BTreeMap::new(),
            optims,
            input,
            window: BTreeMap::new(),
            present,
        })
    }

    pub fn domain_of(&self, client: usize) -> usize {
        self.shards[client].domain
    }

    /// One epoch: as many steps as the largest shard needs; smaller shards
    /// cycle. Federates when the epoch closes a round. Returns the round
    /// record if one happened.
    pub fn train_epoch(&mut self) -> std::result::Result<Option<&RoundRecord>, StageError> {
        self.epoch += 1;
        let b = self.config.batch;
        let seed = self.config.seed;
        let orders: Vec<Vec<usize>> = self
            .shards
            .iter()
            .map(|s| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ORDER_SEED);
                rng.set_stream(((self.epoch as u64) << 20) | s.client as u64);
                let mut o: Vec<usize> = (0..s.size()).collect();
                o.shuffle(&mut rng);
                o
            })
            .collect();
        let steps = self.shards.iter().map(|s| s.size().div_ceil(b)).max().unwrap_or(0);
        let noise_dim = self.architecture.noise_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ NOISE_SEED);
        rng.set_stream(self.epoch as u64);
        let saturating = self.config.has(Flag::Saturating);
        for s in 0..steps {
            let mut batches = BTreeMap::new();
            for (shard, order) in self.shards.iter().zip(&orders) {
                if order.is_empty() {
                    continue;
                }
                let idx: Vec<usize> = (s * b..s * b + b).map(|i| order[i % order.len()]).collect();
                let (real, labels) = shard.data.batch(&idx);
                let noise = Tensor::from_vec(&[b, noise_dim], (0..b * noise_dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect());
                let present = &self.present[&shard.client];
                let fake_labels = (0..b).map(|_| present[rng.gen_range(0..present.len())]).collect();
                batches.insert(
                    shard.client,
                    ClientBatch {
                        real,
                        labels,
                        noise,
                        fake_labels,
                    },
                );
            }
            let report =
                training_step(&mut self.system, &mut self.optims, &batches, saturating, &mut self.audit).at(Stage::Train)?;
            if let Some(v) = self.audit.violations.first() {
                return Err(StageError {
                    stage: Stage::Train,
                    source: Error::Protocol(format!("audit: {v}")),
                });
            }
            self.steps += 1;
            self.d_forwards += report.d_forwards;
            self.g_forwards += report.g_forwards;
            for (&k, &d) in &report.d_loss {
                let w = self.window.entry(k).or_default();
                w.add(d, report.g_loss[&k], report.d_real[&k], report.d_fake[&k], report.d_accuracy[&k]);
                if !(d.is_finite() && report.g_loss[&k].is_finite()) {
                    return Err(StageError {
                        stage: Stage::Train,
                        source: Error::Invariant(format!("client {k}: non-finite loss at epoch {}", self.epoch)),
                    });
                }
            }
            for (k, m) in &report.middle {
                self.input.summaries.entry(*k).or_default().add_rows(m);
            }
        }
        if self.epoch % self.config.epochs_per_round == 0 && self.rounds.len() < self.config.rounds() {
            self.federate()?;
            return Ok(self.rounds.last());
        }
        Ok(None)
    }

    fn federate(&mut self) -> std::result::Result<(), StageError> {
        let round = self.rounds.len() + 1;
        let state = federation_round(
            &mut self.system,
            round,
            &mut self.input,
            &self.federation,
            self.config.seed.wrapping_add(round as u64),
        )
        .at(Stage::Federate)?;
        let losses = std::mem::take(&mut self.window).iter().map(|(&k, w)| (k, w.mean())).collect();
        self.rounds.push(RoundRecord {
            epoch: self.epoch,
            state,
            losses,
        });
        Ok(())
    }

    /// Samples from the domain's generator: each row is drawn by one member
    /// client, chosen with probability proportional to its data size.
    pub fn generate(&self, domain: usize, labels: &[usize], seed: u64) -> Result<Tensor> {
        let members: Vec<&ClientShard> = self.shards.iter().filter(|s| s.domain == domain).collect();
        let weights = WeightedIndex::new(members.iter().map(|s| s.size())).map_err(|e| Error::Usage(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let picks: Vec<usize> = labels.iter().map(|_| weights.sample(&mut rng)).collect();
        let g = &self.system.generator;
        let noise_dim = self.architecture.noise_dim;
        let mut rows: Vec<Option<Vec<f32>>> = vec![None; labels.len()];
        let mut sample_shape = Vec::new();
        for (m, shard) in members.iter().enumerate() {
            let idx: Vec<usize> = (0..labels.len()).filter(|&i| picks[i] == m).collect();
            if idx.is_empty() {
                continue;
            }
            let z = Tensor::from_vec(
                &[idx.len(), noise_dim],
                (0..idx.len() * noise_dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
            );
            let l: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let mut store = self.system.monolithic_store(shard.client);
            let (x, _) = g.forward(0..g.major_count(), &mut store, z, Some(&l), Mode::Eval)?;
            sample_shape = x.sample_shape().to_vec();
            for (j, &i) in idx.iter().enumerate() {
                rows[i] = Some(x.row(j).to_vec());
            }
        }
        let mut shape = vec![labels.len()];
        shape.extend(sample_shape);
        Ok(Tensor::from_vec(&shape, rows.into_iter().flat_map(Option::unwrap_or_default).collect()))
    }

    /// Frozen scoring classifier for `domain`, trained on first use.
    pub fn frozen_classifier(&mut self, domain: usize) -> Result<&FrozenClassifier> {
        if !self.frozen.contains_key(&domain) {
            let f = FrozenClassifier::train(
                &self.domains[domain],
                &self.config.eval.classifier,
                self.config.seed ^ FROZEN_SEED ^ domain as u64,
            )?;
            self.frozen.insert(domain, f);
        }
        Ok(&self.frozen[&domain])
    }

    /// Classifier-on-generated metrics (and generation score when enabled)
    /// for every domain.
    pub fn evaluate(&mut self, round: usize) -> std::result::Result<Vec<DomainReport>, StageError> {
        let mut out = Vec::new();
        for d in 0..self.domains.len() {
            let seed = self.config.seed ^ EVAL_SEED ^ ((round as u64) << 8) ^ d as u64;
            let metrics = self.classifier_metrics(d, seed).at(Stage::Evaluate)?;
            let generation_score = if self.config.eval.generation_score {
                self.frozen_classifier(d).at(Stage::Evaluate)?;
                let frozen = &self.frozen[&d];
                let mut counter = 0u64;
                let mut gen = |labels: &[usize]| {
                    counter += 1;
                    self.generate(d, labels, seed ^ 0xA5A5 ^ (counter << 32))
                };
                Some(generation_score_of(&mut gen, frozen, self.config.eval.n_gen, seed).at(Stage::Evaluate)?)
            } else {
                None
            };
            out.push(DomainReport {
                domain: self.domains[d].name.clone(),
                metrics,
                generation_score,
            });
        }
        Ok(out)
    }

    pub fn classifier_metrics(&self, domain: usize, seed: u64) -> Result<ClassMetrics> {
        let mut counter = 0u64;
        let mut gen = |labels: &[usize]| {
            counter += 1;
            self.generate(domain, labels, seed ^ (counter << 32))
        };
        classifier_eval(
            &mut gen,
            &self.domains[domain].test,
            self.config.eval.n_gen,
            &self.config.eval.classifier,
            seed,
        )
    }

    /// Train every remaining epoch.
    pub fn train_all(&mut self) -> std::result::Result<(), StageError> {
        while self.epoch < self.config.epochs {
            self.train_epoch()?;
        }
        Ok(())
    }
}
