//! Small softmax classifiers used by the evaluation metrics.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::{LayerSpec, Mode, Net, Network, ParamStore};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch: 64,
            lr: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Classifier {
    pub sample_shape: Vec<usize>,
    pub classes: usize,
    pub layers: Vec<LayerSpec>,
    pub params: ParamStore,
}

fn layers_for(sample_shape: &[usize], classes: usize) -> Vec<LayerSpec> {
    let leaky = LayerSpec::LeakyRelu { slope: 0.2 };
    match *sample_shape {
        [c, h, w] if h % 4 == 0 && w % 4 == 0 => vec![
            LayerSpec::Conv2d {
                in_channels: c,
                out_channels: 8,
                kernel: 4,
                stride: 2,
                padding: 1,
            },
            leaky.clone(),
            LayerSpec::Conv2d {
                in_channels: 8,
                out_channels: 16,
                kernel: 4,
                stride: 2,
                padding: 1,
            },
            leaky,
            LayerSpec::Flatten,
            LayerSpec::Dense {
                inputs: 16 * (h / 4) * (w / 4),
                outputs: classes,
            },
        ],
        _ => {
            let n: usize = sample_shape.iter().product();
            vec![
                LayerSpec::Flatten,
                LayerSpec::Dense { inputs: n, outputs: 64 },
                leaky.clone(),
                LayerSpec::Dense { inputs: 64, outputs: 64 },
                leaky,
                LayerSpec::Dense {
                    inputs: 64,
                    outputs: classes,
                },
            ]
        }
    }
}

/// Row-wise softmax of logits.
pub fn softmax_rows(logits: &Tensor) -> Vec<Vec<f64>> {
    (0..logits.rows())
        .map(|r| {
            let row: Vec<f64> = logits.row(r).iter().map(|&v| v as f64).collect();
            crate::federation::softmax(&row)
        })
        .collect()
}

impl Classifier {
    /// Two hidden dense layers for vector samples, two strided convolutions
    /// for image samples.
    pub fn new(sample_shape: &[usize], classes: usize, seed: u64) -> Result<Self> {
        let layers = layers_for(sample_shape, classes);
        let net = Network::new(Net::Discriminator, sample_shape.to_vec(), layers.clone())?;
        let params = net.init_params(&mut ChaCha8Rng::seed_from_u64(seed));
        Ok(Self {
            sample_shape: sample_shape.to_vec(),
            classes,
            layers,
            params,
        })
    }

    fn network(&self) -> Result<Network> {
        Network::new(Net::Discriminator, self.sample_shape.clone(), self.layers.clone())
    }

    /// Minibatch cross-entropy training with Adam.
    pub fn fit(&mut self, data: &Dataset, cfg: &FitConfig, seed: u64) -> Result<()> {
        if data.is_empty() {
            return Err(Error::InsufficientData("classifier training set is empty".into()));
        }
        let net = self.network()?;
        let n = net.major_count();
        let mut adam = Adam::new(AdamConfig {
            lr: cfg.lr,
            beta1: 0.9,
            ..AdamConfig::default()
        });
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..data.len()).collect();
        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(cfg.batch.max(1)) {
                let (x, labels) = data.batch(chunk);
                let (logits, cache) = net.forward(0..n, &mut self.params, x, None, Mode::Train)?;
                let probs = softmax_rows(&logits);
                let b = chunk.len() as f64;
                let mut g = Vec::with_capacity(logits.len());
                for (p, &l) in probs.iter().zip(&labels) {
                    for (c, &pc) in p.iter().enumerate() {
                        g.push(((pc - f64::from(u8::from(c == l))) / b) as f32);
                    }
                }
                let cache = cache.expect("train mode");
                net.backward(&mut self.params, cache, Tensor::from_vec(logits.shape(), g))?;
                adam.step(Net::Discriminator, &mut [&mut self.params]);
            }
        }
        Ok(())
    }

    pub fn probabilities(&self, x: &Tensor) -> Result<Vec<Vec<f64>>> {
        let net = self.network()?;
        let mut params = self.params.clone();
        let mut out = Vec::with_capacity(x.rows());
        for start in (0..x.rows()).step_by(512) {
            let end = (start + 512).min(x.rows());
            let (logits, _) = net.forward(0..net.major_count(), &mut params, x.slice_rows(start, end), None, Mode::Eval)?;
            out.extend(softmax_rows(&logits));
        }
        Ok(out)
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        Ok(self
            .probabilities(x)?
            .iter()
            .map(|p| {
                p.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                    .0
            })
            .collect())
    }

    pub fn predict_dataset(&self, data: &Dataset) -> Result<Vec<usize>> {
        let idx: Vec<usize> = (0..data.len()).collect();
        self.predict(&data.batch(&idx).0)
    }

    /// sha256 of the canonical JSON encoding.
    pub fn content_hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("classifier serializes");
        hex::encode(Sha256::digest(bytes))
    }
}
