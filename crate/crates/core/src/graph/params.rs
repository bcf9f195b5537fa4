use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::layer::ParamName;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Net {
    Generator,
    Discriminator,
}

impl Net {
    pub fn tag(self) -> &'static str {
        match self {
            Net::Generator => "G",
            Net::Discriminator => "D",
        }
    }
}

/// Addresses one tensor: network, major-layer block (0-based), layer inside
/// the block, tensor name.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamKey {
    pub net: Net,
    pub block: usize,
    pub layer: usize,
    pub name: ParamName,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Param<S: Scalar = f32> {
    pub value: Tensor<S>,
    #[serde(skip_serializing, default = "empty_tensor")]
    pub grad: Tensor<S>,
    /// Buffers such as batchnorm running statistics are not trainable but are
    /// still aggregated with the weights.
    pub trainable: bool,
}

fn empty_tensor<S: Scalar>() -> Tensor<S> {
    Tensor::zeros(&[0])
}

/// Flat parameter map with matching gradient arrays.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct ParamStore<S: Scalar = f32> {
    #[serde(with = "entries_as_list")]
    entries: BTreeMap<ParamKey, Param<S>>,
}

mod entries_as_list {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Scalar, Z: Serializer>(
        map: &BTreeMap<ParamKey, Param<S>>,
        ser: Z,
    ) -> Result<Z::Ok, Z::Error> {
        ser.collect_seq(map.iter())
    }

    pub fn deserialize<'de, S: Scalar, D: Deserializer<'de>>(
        de: D,
    ) -> Result<BTreeMap<ParamKey, Param<S>>, D::Error> {
        let list: Vec<(ParamKey, Param<S>)> = Vec::deserialize(de)?;
        Ok(list
            .into_iter()
            .map(|(k, mut p)| {
                if p.grad.shape() != p.value.shape() {
                    p.grad = Tensor::zeros(p.value.shape());
                }
                (k, p)
            })
            .collect())
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, key: ParamKey, value: Tensor<S>, trainable: bool) {
        let grad = Tensor::zeros(value.shape());
        self.entries.insert(
            key,
            Param {
                value,
                grad,
                trainable,
            },
        );
    }

    pub fn get(&self, key: &ParamKey) -> Option<&Param<S>> {
        self.entries.get(key)
    }

    pub fn get_mut(&mut self, key: &ParamKey) -> Option<&mut Param<S>> {
        self.entries.get_mut(key)
    }

    pub fn contains(&self, key: &ParamKey) -> bool {
        self.entries.contains_key(key)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamKey, &Param<S>)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&ParamKey, &mut Param<S>)> {
        self.entries.iter_mut()
    }

    pub fn keys(&self) -> impl Iterator<Item = &ParamKey> {
        self.entries.keys()
    }

    pub fn zero_grad(&mut self) {
        for p in self.entries.values_mut() {
            p.grad.fill(S::zero());
        }
    }

    /// Reallocate zeroed gradients matching each value (after deserializing).
    pub fn zero_grad_reset(&mut self) {
        for p in self.entries.values_mut() {
            p.grad = Tensor::zeros(p.value.shape());
        }
    }

    /// Zero the gradients of one network only.
    pub fn zero_grad_net(&mut self, net: Net) {
        for (k, p) in self.entries.iter_mut() {
            if k.net == net {
                p.grad.fill(S::zero());
            }
        }
    }

    /// Copy of every tensor of `net` whose block lies in `blocks`.
    pub fn extract(&self, net: Net, blocks: Range<usize>) -> ParamStore<S> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| k.net == net && blocks.contains(&k.block))
                .map(|(k, p)| (*k, p.clone()))
                .collect(),
        }
    }

    /// Insert (overwriting) every entry of `other`.
    pub fn merge(&mut self, other: ParamStore<S>) {
        self.entries.extend(other.entries);
    }

    pub fn param_count(&self) -> usize {
        self.entries
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(|p| p.value.all_finite())
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| {
                    (
                        *k,
                        Param {
                            value: p.value.cast(),
                            grad: p.grad.cast(),
                            trainable: p.trainable,
                        },
                    )
                })
                .collect(),
        }
    }
}
