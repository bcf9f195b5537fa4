//! One synchronous cGAN training step over the split system.

use std::collections::BTreeMap;

use super::{PassInput, SplitSystem, Transport};
use crate::error::Result;
use crate::graph::{Mode, Net};
use crate::optim::Adam;
use crate::tensor::Tensor;

const P_CLAMP: f64 = 1e-7;

/// Client-local inputs for one step. Noise and fake labels are drawn by the
/// caller so the step itself is deterministic.
#[derive(Clone, Debug)]
pub struct ClientBatch {
    pub real: Tensor,
    pub labels: Vec<usize>,
    pub noise: Tensor,
    pub fake_labels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GanLosses {
    pub d_loss: f64,
    pub g_loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepReport {
    pub d_loss: BTreeMap<usize, f64>,
    pub g_loss: BTreeMap<usize, f64>,
    /// Mean D output on real and on generated rows, before the D update.
    pub d_real: BTreeMap<usize, f64>,
    pub d_fake: BTreeMap<usize, f64>,
    /// Share of real rows scored above 1/2 and generated rows below it.
    pub d_accuracy: BTreeMap<usize, f64>,
    /// Middle-block D activations on real rows, per client.
    pub middle: BTreeMap<usize, Tensor>,
    pub d_forwards: u64,
    pub g_forwards: u64,
}

/// Mean binary cross-entropy of probabilities `p` against `target`, and its
/// gradient with respect to `p`.
pub fn bce(p: &Tensor, target: f64) -> (f64, Tensor) {
    let n = p.len().max(1) as f64;
    let mut loss = 0.0;
    let grad: Vec<f32> = p
        .data()
        .iter()
        .map(|&v| {
            let q = (v as f64).clamp(P_CLAMP, 1.0 - P_CLAMP);
            loss -= target * q.ln() + (1.0 - target) * (1.0 - q).ln();
            ((-(target / q) + (1.0 - target) / (1.0 - q)) / n) as f32
        })
        .collect();
    (loss / n, Tensor::from_vec(p.shape(), grad))
}

/// D loss `BCE(real, 1) + BCE(fake, 0)`; G loss `BCE(fake, 1)`, or the
/// literal `mean log(1 - D(fake))` when `saturating`.
pub fn gan_losses(real: &Tensor, fake: &Tensor, saturating: bool) -> GanLosses {
    let (lr, _) = bce(real, 1.0);
    let (lf, _) = bce(fake, 0.0);
    let g_loss = if saturating {
        -bce(fake, 0.0).0
    } else {
        bce(fake, 1.0).0
    };
    GanLosses {
        d_loss: lr + lf,
        g_loss,
    }
}

pub(crate) fn g_loss_grad(p: &Tensor, saturating: bool) -> (f64, Tensor) {
    if saturating {
        let (l, g) = bce(p, 0.0);
        (-l, g.map(|v| -v))
    } else {
        bce(p, 1.0)
    }
}

fn share(t: &Tensor, real: bool) -> f64 {
    let hits = t.data().iter().filter(|&&v| (v > 0.5) == real).count();
    hits as f64 / t.len().max(1) as f64
}

fn mean(t: &Tensor) -> f64 {
    t.data().iter().map(|&v| v as f64).sum::<f64>() / t.len().max(1) as f64
}

/// D on real rows, D on generated rows, D update; then G regenerates the
/// same rows and is updated through a third D pass. Three D forwards and two
/// G forwards per call.
pub fn training_step(
    sys: &mut SplitSystem,
    optims: &mut BTreeMap<usize, Adam>,
    batches: &BTreeMap<usize, ClientBatch>,
    saturating: bool,
    bus: &mut dyn Transport,
) -> Result<StepReport> {
    let d0 = sys.forward_calls(Net::Discriminator);
    let g0 = sys.forward_calls(Net::Generator);
    let mut report = StepReport::default();

    let real: PassInput = batches
        .iter()
        .map(|(&k, b)| (k, (b.real.clone(), b.labels.clone())))
        .collect();
    let pass = sys.forward(Net::Discriminator, real, Mode::Train, bus)?;
    report.middle = pass.middle;
    let mut grads = BTreeMap::new();
    for (&k, p) in &pass.outputs {
        let (l, g) = bce(p, 1.0);
        report.d_loss.insert(k, l);
        report.d_real.insert(k, mean(p));
        report.d_accuracy.insert(k, share(p, true) / 2.0);
        grads.insert(k, g);
    }
    sys.backward(pass.cache.expect("train cache"), grads, bus)?;

    let noise: PassInput = batches
        .iter()
        .map(|(&k, b)| (k, (b.noise.clone(), b.fake_labels.clone())))
        .collect();
    let fakes = sys.forward(Net::Generator, noise.clone(), Mode::Train, bus)?;
    let fake_in: PassInput = fakes
        .outputs
        .into_iter()
        .map(|(k, x)| (k, (x, batches[&k].fake_labels.clone())))
        .collect();
    let pass = sys.forward(Net::Discriminator, fake_in, Mode::Train, bus)?;
    let mut grads = BTreeMap::new();
    for (&k, p) in &pass.outputs {
        let (l, g) = bce(p, 0.0);
        *report.d_loss.get_mut(&k).expect("same clients") += l;
        report.d_fake.insert(k, mean(p));
        *report.d_accuracy.get_mut(&k).expect("same clients") += share(p, false) / 2.0;
        grads.insert(k, g);
    }
    sys.backward(pass.cache.expect("train cache"), grads, bus)?;
    for (k, opt) in optims.iter_mut() {
        if let (Some(c), Some(s)) = (sys.clients.get_mut(k), sys.server.get_mut(k)) {
            opt.step(Net::Discriminator, &mut [&mut c.store, s]);
        }
    }
    sys.params_changed(Net::Discriminator);

    let gen = sys.forward(Net::Generator, noise, Mode::Train, bus)?;
    let fake_in: PassInput = gen
        .outputs
        .into_iter()
        .map(|(k, x)| (k, (x, batches[&k].fake_labels.clone())))
        .collect();
    let pass = sys.forward(Net::Discriminator, fake_in, Mode::Train, bus)?;
    let mut grads = BTreeMap::new();
    for (&k, p) in &pass.outputs {
        let (l, g) = g_loss_grad(p, saturating);
        report.g_loss.insert(k, l);
        grads.insert(k, g);
    }
    let dx = sys.backward(pass.cache.expect("train cache"), grads, bus)?;
    sys.zero_grad(Net::Discriminator);
    sys.backward(gen.cache.expect("train cache"), dx, bus)?;
    for (k, opt) in optims.iter_mut() {
        if let (Some(c), Some(s)) = (sys.clients.get_mut(k), sys.server.get_mut(k)) {
            opt.step(Net::Generator, &mut [&mut c.store, s]);
        }
    }
    sys.params_changed(Net::Generator);

    report.d_forwards = sys.forward_calls(Net::Discriminator) - d0;
    report.g_forwards = sys.forward_calls(Net::Generator) - g0;
    Ok(report)
}
