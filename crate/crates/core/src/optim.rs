//! Adam over the trainable tensors of one or more parameter stores.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::graph::{Net, ParamKey, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Moment estimates keyed by tensor; the step counter is per network so the
/// generator and discriminator keep independent bias corrections.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    steps: BTreeMap<Net, u64>,
    moments: BTreeMap<ParamKey, Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            steps: BTreeMap::new(),
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self, net: Net) -> u64 {
        self.steps.get(&net).copied().unwrap_or(0)
    }

    /// Apply one update to every trainable tensor of `net` found in `stores`
    /// and zero those gradients.
    pub fn step(&mut self, net: Net, stores: &mut [&mut ParamStore]) {
        let t = self.steps.entry(net).or_insert(0);
        *t += 1;
        let t = *t as i32;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for store in stores.iter_mut() {
            for (key, p) in store.iter_mut() {
                if key.net != net || !p.trainable {
                    continue;
                }
                let mo = self.moments.entry(*key).or_insert_with(|| Moments {
                    m: vec![0.0; p.value.len()],
                    v: vec![0.0; p.value.len()],
                });
                let grads = p.grad.data().to_vec();
                for (i, (w, g)) in p.value.data_mut().iter_mut().zip(grads).enumerate() {
                    let g = g as f64;
                    mo.m[i] = c.beta1 * mo.m[i] + (1.0 - c.beta1) * g;
                    mo.v[i] = c.beta2 * mo.v[i] + (1.0 - c.beta2) * g * g;
                    let mhat = mo.m[i] / bc1;
                    let vhat = mo.v[i] / bc2;
                    *w -= (c.lr * mhat / (vhat.sqrt() + c.eps)) as f32;
                }
                p.grad.fill(0.0);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::ParamName;
    use crate::tensor::Tensor;

    fn key(net: Net) -> ParamKey {
        ParamKey {
            net,
            block: 0,
            layer: 0,
            name: ParamName::Weight,
        }
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut s = ParamStore::new();
        s.insert(key(Net::Generator), Tensor::from_vec(&[2], vec![1.0, 1.0]), true);
        s.get_mut(&key(Net::Generator)).unwrap().grad = Tensor::from_vec(&[2], vec![3.0, -0.5]);
        let mut adam = Adam::new(AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        });
        adam.step(Net::Generator, &mut [&mut s]);
        let p = s.get(&key(Net::Generator)).unwrap();
        // Bias-corrected m/sqrt(v) is sign(g) on the first step.
        assert!((p.value.data()[0] - 0.9).abs() < 1e-6);
        assert!((p.value.data()[1] - 1.1).abs() < 1e-6);
        assert!(p.grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn other_network_is_untouched() {
        let mut s = ParamStore::new();
        s.insert(key(Net::Discriminator), Tensor::from_vec(&[1], vec![1.0]), true);
        s.get_mut(&key(Net::Discriminator)).unwrap().grad = Tensor::from_vec(&[1], vec![1.0]);
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(Net::Generator, &mut [&mut s]);
        let p = s.get(&key(Net::Discriminator)).unwrap();
        assert_eq!(p.value.data(), &[1.0]);
        assert_eq!(p.grad.data(), &[1.0]);
        assert_eq!(adam.steps(Net::Generator), 1);
        assert_eq!(adam.steps(Net::Discriminator), 0);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut s = ParamStore::new();
        s.insert(key(Net::Generator), Tensor::from_vec(&[1], vec![5.0]), true);
        let mut adam = Adam::new(AdamConfig {
            lr: 0.05,
            beta1: 0.9,
            ..AdamConfig::default()
        });
        for _ in 0..2000 {
            let p = s.get_mut(&key(Net::Generator)).unwrap();
            let w = p.value.data()[0];
            p.grad = Tensor::from_vec(&[1], vec![2.0 * (w - 2.0)]);
            adam.step(Net::Generator, &mut [&mut s]);
        }
        assert!((s.get(&key(Net::Generator)).unwrap().value.data()[0] - 2.0).abs() < 1e-2);
    }
}
