//! Classifier-on-generated-data metrics, the inception-style generation
//! score, clustering agreement and per-iteration latency.

mod classifier;

pub use classifier::{softmax_rows, Classifier, FitConfig};

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, DomainData};
use crate::error::{Error, Result};
use crate::graph::ModelProfile;
use crate::latency::{total_latency, CutAssignment, Fleet};
use crate::tensor::Tensor;

/// Minimum held-out accuracy of a frozen scoring classifier.
pub const FROZEN_MIN_ACCURACY: f64 = 0.97;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    /// `matrix[truth][predicted]`.
    pub matrix: Vec<Vec<usize>>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub fpr: f64,
}

impl Confusion {
    pub fn new(truth: &[usize], predicted: &[usize], classes: usize) -> Self {
        let mut matrix = vec![vec![0; classes]; classes];
        for (&t, &p) in truth.iter().zip(predicted) {
            matrix[t][p] += 1;
        }
        Self { matrix }
    }

    /// Accuracy plus macro-averaged precision, recall, F1 and one-vs-all FPR.
    /// Undefined ratios count as 0.
    pub fn metrics(&self) -> ClassMetrics {
        let c = self.matrix.len();
        let total: usize = self.matrix.iter().flatten().sum();
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let mut m = ClassMetrics {
            accuracy: ratio((0..c).map(|i| self.matrix[i][i]).sum(), total),
            ..ClassMetrics::default()
        };
        for k in 0..c {
            let tp = self.matrix[k][k];
            let actual: usize = self.matrix[k].iter().sum();
            let predicted: usize = (0..c).map(|i| self.matrix[i][k]).sum();
            let fp = predicted - tp;
            let p = ratio(tp, predicted);
            let r = ratio(tp, actual);
            m.precision += p;
            m.recall += r;
            m.f1 += if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
            m.fpr += ratio(fp, total - actual);
        }
        let c = c.max(1) as f64;
        m.precision /= c;
        m.recall /= c;
        m.f1 /= c;
        m.fpr /= c;
        m
    }
}

/// Balanced labels `0..classes` repeated to `n`, shuffled.
pub fn uniform_labels(n: usize, classes: usize, seed: u64) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    labels
}

/// Something that produces one sample per requested label.
pub type GenerateFn<'a> = dyn FnMut(&[usize]) -> Result<Tensor> + 'a;

fn generate_dataset(generate: &mut GenerateFn, labels: Vec<usize>, classes: usize) -> Result<Dataset> {
    let mut features = Vec::new();
    let mut sample_shape = Vec::new();
    for chunk in labels.chunks(500) {
        let x = generate(chunk)?;
        if x.rows() != chunk.len() {
            return Err(Error::Usage(format!("generator returned {} rows for {} labels", x.rows(), chunk.len())));
        }
        sample_shape = x.sample_shape().to_vec();
        features.extend_from_slice(x.data());
    }
    Ok(Dataset {
        sample_shape,
        features,
        labels,
        classes,
    })
}

/// Train a fresh classifier on `n_gen` generated samples with uniform labels
/// and score it on the real `test` set.
pub fn classifier_eval(
    generate: &mut GenerateFn,
    test: &Dataset,
    n_gen: usize,
    fit: &FitConfig,
    seed: u64,
) -> Result<ClassMetrics> {
    let labels = uniform_labels(n_gen, test.classes, seed);
    if let Some(c) = (0..test.classes).find(|c| !labels.contains(c)) {
        return Err(Error::Usage(format!("class {c} absent from {n_gen} generated labels")));
    }
    let data = generate_dataset(generate, labels, test.classes)?;
    let mut clf = Classifier::new(&test.sample_shape, test.classes, seed ^ 0xC1A5)?;
    clf.fit(&data, fit, seed ^ 0xF17)?;
    let pred = clf.predict_dataset(test)?;
    Ok(Confusion::new(&test.labels, &pred, test.classes).metrics())
}

/// `exp(mean_x KLD(p(y|x) || p_bar))` over predicted class distributions.
pub fn generation_score(probs: &[Vec<f64>]) -> Result<f64> {
    let Some(first) = probs.first() else {
        return Err(Error::Usage("generation score of zero samples".into()));
    };
    let mut marginal = vec![0.0; first.len()];
    for p in probs {
        for (m, v) in marginal.iter_mut().zip(p) {
            *m += v / probs.len() as f64;
        }
    }
    let mut total = 0.0;
    for p in probs {
        total += crate::federation::kld(p, &marginal)?;
    }
    Ok((total / probs.len() as f64).exp())
}

/// A scoring classifier trained once per domain and stored with its hash.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrozenClassifier {
    pub domain: String,
    pub accuracy: f64,
    pub sha256: String,
    pub classifier: Classifier,
}

impl FrozenClassifier {
    /// Train on the domain's training split; refuse if held-out accuracy is
    /// below [`FROZEN_MIN_ACCURACY`].
    pub fn train(domain: &DomainData, fit: &FitConfig, seed: u64) -> Result<Self> {
        let mut clf = Classifier::new(&domain.train.sample_shape, domain.train.classes, seed)?;
        clf.fit(&domain.train, fit, seed ^ 0xF12)?;
        let pred = clf.predict_dataset(&domain.test)?;
        let accuracy = Confusion::new(&domain.test.labels, &pred, domain.test.classes).metrics().accuracy;
        if accuracy < FROZEN_MIN_ACCURACY {
            return Err(Error::Invariant(format!(
                "frozen classifier for {} reaches {accuracy:.4} < {FROZEN_MIN_ACCURACY}",
                domain.name
            )));
        }
        Ok(Self {
            domain: domain.name.clone(),
            accuracy,
            sha256: clf.content_hash(),
            classifier: clf,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Load and verify the content hash.
    pub fn load(path: &Path, domain: usize) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|_| Error::MissingClassifier {
            domain,
            hint: format!(
                "{} not found; run `huscf eval --train-classifiers` on the run directory first",
                path.display()
            ),
        })?;
        let f: Self = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        if f.classifier.content_hash() != f.sha256 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                message: "classifier content hash mismatch".into(),
            });
        }
        Ok(f)
    }

    pub fn score(&self, samples: &Tensor) -> Result<f64> {
        generation_score(&self.classifier.probabilities(samples)?)
    }
}

/// Generation score of `n_gen` samples with uniform labels.
pub fn generation_score_of(
    generate: &mut GenerateFn,
    frozen: &FrozenClassifier,
    n_gen: usize,
    seed: u64,
) -> Result<f64> {
    let classes = frozen.classifier.classes;
    let data = generate_dataset(generate, uniform_labels(n_gen, classes, seed), classes)?;
    let idx: Vec<usize> = (0..data.len()).collect();
    frozen.score(&data.batch(&idx).0)
}

/// Seconds per training iteration for the planned cuts.
pub fn latency_report(fleet: &Fleet, assignment: &CutAssignment, profile: &ModelProfile) -> Result<f64> {
    Ok(total_latency(fleet, assignment, profile)?.total)
}

/// Adjusted Rand index between two labelings of the same items.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len();
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0u64; kb]; ka];
    for (&x, &y) in a.iter().zip(b) {
        table[x][y] += 1;
    }
    let pairs = |v: u64| (v * v.saturating_sub(1)) as f64 / 2.0;
    let index: f64 = table.iter().flatten().map(|&v| pairs(v)).sum();
    let rows: f64 = table.iter().map(|r| pairs(r.iter().sum())).sum();
    let cols: f64 = (0..kb).map(|j| pairs(table.iter().map(|r| r[j]).sum())).sum();
    let total = pairs(n as u64);
    let expected = if total > 0.0 { rows * cols / total } else { 0.0 };
    let max = (rows + cols) / 2.0;
    if max == expected {
        return if index == expected { 1.0 } else { 0.0 };
    }
    (index - expected) / (max - expected)
}

/// Final per-domain evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainReport {
    pub domain: String,
    #[serde(flatten)]
    pub metrics: ClassMetrics,
    pub generation_score: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub domains: Vec<DomainReport>,
    pub latency_seconds: f64,
}
