//! Run configuration document.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::federation::{FederationConfig, KldSource};
use crate::metrics::FitConfig;
use crate::optim::AdamConfig;
use crate::planner::GaConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Flag {
    /// One global cluster at every round.
    NoClustering,
    /// Size-only weights (beta treated as 0).
    NoKld,
    /// Label histograms replace activation softmaxes in the divergence.
    KldLabels,
    NoBatchnorm,
    /// Literal `log(1 - D(G(z)))` generator loss.
    Saturating,
}

pub const FLAG_NAMES: [&str; 5] = ["no-clustering", "no-kld", "kld-labels", "no-batchnorm", "saturating"];

impl FromStr for Flag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "no-clustering" => Ok(Flag::NoClustering),
            "no-kld" => Ok(Flag::NoKld),
            "kld-labels" => Ok(Flag::KldLabels),
            "no-batchnorm" => Ok(Flag::NoBatchnorm),
            "saturating" => Ok(Flag::Saturating),
            other => Err(Error::config(
                "flags",
                format!("unknown flag `{other}` (known: {})", FLAG_NAMES.join(", ")),
            )),
        }
    }
}

impl fmt::Display for Flag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let i = *self as usize;
        f.write_str(FLAG_NAMES[i])
    }
}

/// Parse a comma-separated flag list.
pub fn parse_flags(list: &str) -> Result<Vec<Flag>> {
    let mut flags: Vec<Flag> = list
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(str::parse)
        .collect::<Result<_>>()?;
    flags.sort();
    flags.dedup();
    Ok(flags)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FederationSection {
    pub beta: f64,
    /// Cluster count; defaults to the scenario's domain count.
    pub k: Option<usize>,
    pub warmup_rounds: usize,
}

impl Default for FederationSection {
    fn default() -> Self {
        Self {
            beta: 150.0,
            k: None,
            warmup_rounds: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub n_gen: usize,
    /// Also evaluate every this many rounds; 0 evaluates only at the end.
    pub every: usize,
    pub generation_score: bool,
    pub classifier: FitConfig,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            n_gen: 3000,
            every: 0,
            generation_score: true,
            classifier: FitConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Bundled architecture name or path.
    pub architecture: String,
    /// Bundled fleet name or path.
    pub fleet: String,
    /// Bundled scenario name or path.
    pub scenario: String,
    /// Root for idx-image domain files.
    pub data_root: PathBuf,
    pub epochs: usize,
    /// Epochs between federation rounds.
    pub epochs_per_round: usize,
    pub batch: usize,
    pub seed: u64,
    pub flags: Vec<Flag>,
    pub federation: FederationSection,
    pub ga: GaConfig,
    pub optimizer: AdamConfig,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            architecture: "desk-dense".into(),
            fleet: "desk8".into(),
            scenario: "desk-2-domain-non-iid".into(),
            data_root: PathBuf::from("data"),
            epochs: 150,
            epochs_per_round: 5,
            batch: 32,
            seed: 0,
            flags: Vec::new(),
            federation: FederationSection::default(),
            ga: GaConfig::desk(),
            optimizer: AdamConfig::default(),
            eval: EvalSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn has(&self, flag: Flag) -> bool {
        self.flags.contains(&flag)
    }

    pub fn rounds(&self) -> usize {
        self.epochs / self.epochs_per_round.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs_per_round == 0 {
            return Err(Error::config("epochs_per_round", "must be at least 1"));
        }
        if self.epochs < self.epochs_per_round {
            return Err(Error::config(
                "epochs",
                format!("{} epochs is fewer than one round of {}", self.epochs, self.epochs_per_round),
            ));
        }
        if self.batch == 0 {
            return Err(Error::config("batch", "must be at least 1"));
        }
        if !(self.federation.beta >= 0.0) {
            return Err(Error::config("federation.beta", "must be >= 0"));
        }
        if self.federation.k == Some(0) {
            return Err(Error::config("federation.k", "must be at least 1"));
        }
        if self.eval.n_gen == 0 {
            return Err(Error::config("eval.n_gen", "must be positive"));
        }
        self.ga.validate()
    }

    pub fn federation(&self, domains: usize) -> FederationConfig {
        FederationConfig {
            beta: self.federation.beta,
            k: self.federation.k.unwrap_or(domains),
            clustering: !self.has(Flag::NoClustering),
            kld_weighting: !self.has(Flag::NoKld),
            source: if self.has(Flag::KldLabels) {
                KldSource::Labels
            } else {
                KldSource::Activations
            },
            warmup_rounds: self.federation.warmup_rounds,
        }
    }
}
