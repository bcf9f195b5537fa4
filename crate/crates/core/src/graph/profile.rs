//! Static cost accounting: FLOPs, parameter counts and activation sizes per
//! major layer. This is the vocabulary shared by the planner and the trainer.

use serde::{Deserialize, Serialize};

use super::network::Network;
use super::params::Net;
use crate::error::{Error, Result};

/// Bytes per activation element (32-bit floats).
pub const ACTIVATION_ELEMENT_BYTES: u64 = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub name: String,
    /// Forward FLOPs per sample.
    pub flops_fwd: f64,
    /// Backward FLOPs per sample.
    pub flops_bwd: f64,
    /// Bytes of the block output per sample.
    pub activation_bytes: f64,
    pub param_count: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetProfile {
    pub layers: Vec<LayerCost>,
}

impl NetProfile {
    /// Synthetic profile from per-layer forward FLOPs and output bytes;
    /// backward is twice forward.
    pub fn from_costs(flops_fwd: &[f64], activation_bytes: &[f64]) -> Self {
        assert_eq!(flops_fwd.len(), activation_bytes.len());
        Self {
            layers: flops_fwd
                .iter()
                .zip(activation_bytes)
                .enumerate()
                .map(|(i, (&f, &a))| LayerCost {
                    name: format!("layer {}", i + 1),
                    flops_fwd: f,
                    flops_bwd: 2.0 * f,
                    activation_bytes: a,
                    param_count: 0,
                })
                .collect(),
        }
    }

    pub fn major_count(&self) -> usize {
        self.layers.len()
    }

    pub fn middle(&self) -> usize {
        self.layers.len().div_ceil(2)
    }

    /// Cost entry of a 1-based major layer.
    pub fn layer(&self, index: usize) -> &LayerCost {
        &self.layers[index - 1]
    }

    /// Forward FLOPs summed over 1-based layers `first..=last`.
    pub fn flops_fwd(&self, first: usize, last: usize) -> f64 {
        self.layers[first - 1..last].iter().map(|l| l.flops_fwd).sum()
    }

    pub fn flops_bwd(&self, first: usize, last: usize) -> f64 {
        self.layers[first - 1..last].iter().map(|l| l.flops_bwd).sum()
    }

    pub fn activation_bytes(&self, index: usize) -> f64 {
        self.layers[index - 1].activation_bytes
    }
}

/// Per-layer costs of both networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelProfile {
    pub generator: NetProfile,
    pub discriminator: NetProfile,
}

impl ModelProfile {
    pub fn net(&self, net: Net) -> &NetProfile {
        match net {
            Net::Generator => &self.generator,
            Net::Discriminator => &self.discriminator,
        }
    }

    pub fn from_networks(generator: &Network, discriminator: &Network) -> Result<Self> {
        let p = Self {
            generator: net_profile(generator),
            discriminator: net_profile(discriminator),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        for (tag, np) in [("G", &self.generator), ("D", &self.discriminator)] {
            if np.layers.len() < 3 {
                return Err(Error::Invariant(format!(
                    "{tag} has {} major layers; head, middle and tail need at least 3",
                    np.layers.len()
                )));
            }
            for (i, l) in np.layers.iter().enumerate() {
                if !(l.activation_bytes > 0.0) {
                    return Err(Error::Invariant(format!(
                        "{tag} layer {} has non-positive activation size",
                        i + 1
                    )));
                }
                if l.flops_bwd < l.flops_fwd || l.flops_fwd < 0.0 {
                    return Err(Error::Invariant(format!(
                        "{tag} layer {} has backward FLOPs below forward FLOPs",
                        i + 1
                    )));
                }
            }
        }
        Ok(())
    }
}

fn net_profile(net: &Network) -> NetProfile {
    NetProfile {
        layers: net
            .blocks
            .iter()
            .map(|b| {
                let major = b.major_layer();
                let flops = major.flops_fwd(b.major_input_shape()) as f64;
                let params: u64 = b
                    .layers
                    .iter()
                    .enumerate()
                    .flat_map(|(l, layer)| layer.param_shapes(&b.shapes[l]))
                    .filter(|p| p.trainable)
                    .map(|p| p.shape.iter().product::<usize>() as u64)
                    .sum();
                let out: u64 = b.output_shape().iter().product::<usize>() as u64;
                LayerCost {
                    name: major.describe(),
                    flops_fwd: flops,
                    flops_bwd: 2.0 * flops,
                    activation_bytes: (out * ACTIVATION_ELEMENT_BYTES) as f64,
                    param_count: params,
                }
            })
            .collect(),
    }
}

/// One row of the accounting table for a batch.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AccountRow {
    pub net: Net,
    pub layer: usize,
    pub name: String,
    pub flops_fwd: f64,
    pub flops_bwd: f64,
    pub activation_bytes: f64,
    pub param_count: u64,
}

/// Per-layer FLOPs and activation bytes for a batch of `batch` samples.
pub fn account(profile: &ModelProfile, batch: usize) -> Vec<AccountRow> {
    let b = batch as f64;
    [Net::Generator, Net::Discriminator]
        .into_iter()
        .flat_map(|net| {
            profile
                .net(net)
                .layers
                .iter()
                .enumerate()
                .map(move |(i, l)| AccountRow {
                    net,
                    layer: i + 1,
                    name: l.name.clone(),
                    flops_fwd: b * l.flops_fwd,
                    flops_bwd: b * l.flops_bwd,
                    activation_bytes: b * l.activation_bytes,
                    param_count: l.param_count,
                })
        })
        .collect()
}
