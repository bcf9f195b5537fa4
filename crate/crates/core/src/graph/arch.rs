//! Architecture documents: both networks of a conditional GAN as ordered
//! layer lists, with the two bundled stacks.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::layer::LayerSpec;
use super::network::Network;
use super::params::Net;
use super::profile::ModelProfile;
use crate::error::{Error, Result};

const CONV_CGAN: &str = include_str!("../../assets/arch/conv-cgan.toml");
const DESK_DENSE: &str = include_str!("../../assets/arch/desk-dense.toml");

pub const BUNDLED_ARCHITECTURES: &[&str] = &["conv-cgan", "desk-dense"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub name: String,
    pub classes: usize,
    pub noise_dim: usize,
    /// Per-sample shape of real data.
    pub sample_shape: Vec<usize>,
    pub generator: Vec<LayerSpec>,
    pub discriminator: Vec<LayerSpec>,
}

impl Architecture {
    pub fn bundled(name: &str) -> Option<Self> {
        let text = match name {
            "conv-cgan" => CONV_CGAN,
            "desk-dense" => DESK_DENSE,
            _ => return None,
        };
        Some(toml::from_str(text).expect("bundled architecture parses"))
    }

    pub fn from_toml(text: &str, origin: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })
    }

    /// Bundled name or a path to a TOML architecture file.
    pub fn load(spec: &str) -> Result<Self> {
        if let Some(a) = Self::bundled(spec) {
            return Ok(a);
        }
        let path = Path::new(spec);
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("architecture serializes")
    }

    /// Build both networks, with batchnorm layers dropped when `batchnorm` is false.
    pub fn build(&self, batchnorm: bool) -> Result<(Network, Network)> {
        let keep = |l: &&LayerSpec| batchnorm || !matches!(l, LayerSpec::BatchNorm { .. });
        let g = Network::new(
            Net::Generator,
            vec![self.noise_dim],
            self.generator.iter().filter(keep).cloned().collect(),
        )?;
        let d = Network::new(
            Net::Discriminator,
            self.sample_shape.clone(),
            self.discriminator.iter().filter(keep).cloned().collect(),
        )?;
        if g.output_shape() != &self.sample_shape[..] {
            return Err(Error::config(
                "G output",
                format!(
                    "generator emits {:?} but samples are {:?}",
                    g.output_shape(),
                    self.sample_shape
                ),
            ));
        }
        if d.output_shape() != [1] {
            return Err(Error::config(
                "D output",
                format!("discriminator emits {:?}, expected [1]", d.output_shape()),
            ));
        }
        Ok((g, d))
    }

    pub fn profile(&self) -> Result<ModelProfile> {
        let (g, d) = self.build(true)?;
        ModelProfile::from_networks(&g, &d)
    }
}
