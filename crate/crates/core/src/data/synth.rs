//! Two-dimensional Gaussian-mixture domains, one isotropic component per
//! class with means on a circle.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianDomain {
    /// Distance of each class mean from the layout centre.
    pub radius: f64,
    /// Per-axis standard deviation.
    pub spread: f64,
    /// Class `c` sits at slot `c + rotation_slots` of the circle.
    #[serde(default)]
    pub rotation_slots: usize,
    /// Translation of the whole layout.
    #[serde(default)]
    pub offset: [f64; 2],
}

impl GaussianDomain {
    pub fn validate(&self, classes: usize) -> Result<()> {
        if classes < 2 {
            return Err(Error::Scenario(format!(
                "a mixture domain needs at least 2 classes, got {classes}"
            )));
        }
        if !(self.spread > 0.0 && self.spread.is_finite()) {
            return Err(Error::Scenario(format!(
                "degenerate covariance: spread {} must be positive",
                self.spread
            )));
        }
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return Err(Error::Scenario(format!(
                "radius {} must be positive",
                self.radius
            )));
        }
        Ok(())
    }

    pub fn mean(&self, class: usize, classes: usize) -> [f64; 2] {
        let slot = (class + self.rotation_slots) % classes;
        let angle = std::f64::consts::TAU * slot as f64 / classes as f64;
        [
            self.radius * angle.cos() + self.offset[0],
            self.radius * angle.sin() + self.offset[1],
        ]
    }
}

/// `per_class` samples of every class, labels interleaved `0, 1, .., C-1, 0, ..`.
pub fn synth_domain(
    domain: &GaussianDomain,
    classes: usize,
    per_class: usize,
    seed: u64,
) -> Result<Dataset> {
    domain.validate(classes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = per_class * classes;
    let mut features = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        let m = domain.mean(c, classes);
        for mu in m {
            let z: f64 = StandardNormal.sample(&mut rng);
            features.push((mu + domain.spread * z) as f32);
        }
        labels.push(c);
    }
    Ok(Dataset {
        sample_shape: vec![2],
        features,
        labels,
        classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn phi(x: f64) -> f64 {
        // Abramowitz-Stegun 7.1.26 complement for the normal tail.
        let t = 1.0 / (1.0 + 0.3275911 * x.abs() / std::f64::consts::SQRT_2);
        let poly = t
            * (0.254829592
                + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
        let erf = 1.0 - poly * (-(x * x) / 2.0).exp();
        if x >= 0.0 {
            0.5 * (1.0 + erf)
        } else {
            0.5 * (1.0 - erf)
        }
    }

    #[test]
    fn two_classes_unit_apart_are_linearly_separable() {
        // Two classes on a circle of radius 0.5 sit 1 apart.
        let d = GaussianDomain {
            radius: 0.5,
            spread: 0.15,
            rotation_slots: 0,
            offset: [0.0, 0.0],
        };
        let bayes = phi(0.5 / d.spread);
        assert!(bayes > 0.99, "closed-form Bayes accuracy {bayes}");
        let ds = synth_domain(&d, 2, 5000, 3).unwrap();
        // The Bayes rule for equal isotropic covariances is the bisector x = 0.
        let correct = (0..ds.len())
            .filter(|&i| (ds.sample(i)[0] < 0.0) == (ds.labels[i] == 1))
            .count();
        let acc = correct as f64 / ds.len() as f64;
        assert!(acc > 0.99 && (acc - bayes).abs() < 0.01, "{acc} vs {bayes}");
    }

    #[test]
    fn seed_repeat_is_identical() {
        let d = GaussianDomain {
            radius: 1.0,
            spread: 0.2,
            rotation_slots: 1,
            offset: [0.3, 0.0],
        };
        assert_eq!(synth_domain(&d, 4, 50, 9).unwrap(), synth_domain(&d, 4, 50, 9).unwrap());
        assert_ne!(synth_domain(&d, 4, 50, 9).unwrap(), synth_domain(&d, 4, 50, 10).unwrap());
    }

    #[test]
    fn offset_moves_every_mean() {
        let a = GaussianDomain {
            radius: 1.0,
            spread: 0.2,
            rotation_slots: 0,
            offset: [0.0, 0.0],
        };
        let b = GaussianDomain {
            offset: [0.0, 0.75],
            ..a.clone()
        };
        for c in 0..4 {
            let (ma, mb) = (a.mean(c, 4), b.mean(c, 4));
            let d = ((ma[0] - mb[0]).powi(2) + (ma[1] - mb[1]).powi(2)).sqrt();
            assert!(d >= 0.75 - 1e-12);
        }
    }

    #[test]
    fn degenerate_spread_rejected() {
        let d = GaussianDomain {
            radius: 1.0,
            spread: 0.0,
            rotation_slots: 0,
            offset: [0.0, 0.0],
        };
        assert!(matches!(synth_domain(&d, 4, 10, 0), Err(Error::Scenario(_))));
        let d = GaussianDomain { spread: 0.1, ..d };
        assert!(synth_domain(&d, 1, 10, 0).is_err());
    }
}
