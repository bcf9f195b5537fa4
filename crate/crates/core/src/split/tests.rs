use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::graph::{Architecture, ParamKey, ParamName};
use crate::optim::{Adam, AdamConfig};

fn desk(batchnorm: bool) -> (Network, Network) {
    Architecture::bundled("desk-dense").unwrap().build(batchnorm).unwrap()
}

fn random_cuts(rng: &mut ChaCha8Rng, n_g: usize, n_d: usize) -> Cuts {
    let gp = Cuts::pairs(n_g);
    let dp = Cuts::pairs(n_d);
    let (gh, gt) = gp[rng.gen_range(0..gp.len())];
    let (dh, dt) = dp[rng.gen_range(0..dp.len())];
    Cuts::new(gh, gt, dh, dt)
}

fn random_rows(rng: &mut ChaCha8Rng, rows: usize, width: usize) -> Tensor {
    Tensor::from_vec(&[rows, width], (0..rows * width).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

fn system(cuts: &[Cuts], seed: u64, batchnorm: bool) -> SplitSystem {
    let (g, d) = desk(batchnorm);
    let map = cuts.iter().copied().enumerate().collect();
    SplitSystem::new(g, d, &map, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

/// Run both networks split and per client monolithically with the same
/// upstream gradients; return the largest output and gradient gap.
fn split_vs_monolithic(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = rng.gen_range(1..5);
    let cuts: Vec<Cuts> = (0..k).map(|_| random_cuts(&mut rng, 5, 5)).collect();
    let mut sys = system(&cuts, seed, false);
    let mut worst = 0.0f64;
    for net in [Net::Generator, Net::Discriminator] {
        let width = sys.network(net).input_shape[0];
        let mut inputs = PassInput::new();
        for c in 0..k {
            let rows = rng.gen_range(1..6);
            let labels = (0..rows).map(|_| rng.gen_range(0..4)).collect();
            inputs.insert(c, (random_rows(&mut rng, rows, width), labels));
        }
        let mut bus = InProcessBus::default();
        let out = sys.forward(net, inputs.clone(), Mode::Train, &mut bus).unwrap();
        let upstream: BTreeMap<usize, Tensor> = out
            .outputs
            .iter()
            .map(|(&c, y)| (c, random_rows(&mut rng, y.rows(), y.row_len()).reshape(y.shape())))
            .collect();
        let gx = sys.backward(out.cache.unwrap(), upstream.clone(), &mut bus).unwrap();
        let network = sys.network(net).clone();
        let n = network.major_count();
        for c in 0..k {
            let mut mono = sys.monolithic_store(c);
            mono.zero_grad();
            let (x, labels) = inputs[&c].clone();
            let (y, cache) = network.forward(0..n, &mut mono, x, Some(&labels), Mode::Train).unwrap();
            worst = worst.max(y.max_abs_diff(&out.outputs[&c]));
            let g = network.backward(&mut mono, cache.unwrap(), upstream[&c].clone()).unwrap();
            worst = worst.max(g.max_abs_diff(&gx[&c]));
            let split = sys.monolithic_store(c);
            for (key, p) in mono.iter().filter(|(key, _)| key.net == net) {
                worst = worst.max(p.grad.max_abs_diff(&split.get(key).unwrap().grad));
            }
        }
    }
    worst
}

#[test]
fn split_matches_monolithic_on_random_cuts() {
    for seed in 0..100 {
        let gap = split_vs_monolithic(seed);
        assert!(gap <= 1e-6, "seed {seed}: {gap}");
    }
}

#[test]
fn heterogeneous_device_patterns_match_monolithic() {
    // Weakest and strongest placement patterns on one server.
    let cuts = [Cuts::new(1, 5, 1, 5), Cuts::new(2, 4, 2, 4), Cuts::new(1, 4, 2, 5)];
    let mut sys = system(&cuts, 3, false);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let inputs: PassInput = (0..3)
        .map(|c| (c, (random_rows(&mut rng, 4, 2), vec![0, 1, 2, 3])))
        .collect();
    let out = sys
        .forward(Net::Discriminator, inputs.clone(), Mode::Eval, &mut InProcessBus::default())
        .unwrap();
    for c in 0..3 {
        let mut mono = sys.monolithic_store(c);
        let (x, l) = inputs[&c].clone();
        let (y, _) = sys.discriminator.forward(0..5, &mut mono, x, Some(&l), Mode::Eval).unwrap();
        assert!(y.max_abs_diff(&out.outputs[&c]) <= 1e-7);
    }
}

#[test]
fn concatenation_and_attribution() {
    let cuts = [Cuts::new(1, 4, 1, 4), Cuts::new(1, 5, 2, 4), Cuts::new(2, 4, 2, 4)];
    let mut sys = system(&cuts, 1, false);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let inputs: PassInput = (0..3)
        .map(|c| (c, (random_rows(&mut rng, 3, 16), vec![c; 3])))
        .collect();
    let out = sys
        .forward(Net::Generator, inputs, Mode::Train, &mut InProcessBus::default())
        .unwrap();
    let layers = &out.cache.as_ref().unwrap().server.layers;
    // Blocks 1..4 (0-based 1, 2, 3): clients 0 and 1 enter together at block 1.
    assert_eq!(layers[0].block, 1);
    assert_eq!(layers[0].layout, vec![(0, 0..3), (1, 3..6)]);
    assert_eq!(layers[1].layout, vec![(0, 0..3), (1, 3..6), (2, 6..9)]);
    // Client 1 keeps its rows one block longer than the others.
    assert_eq!(layers[2].layout, vec![(1, 0..3)]);
    assert_eq!(out.outputs.len(), 3);
    assert!(out.outputs.values().all(|y| y.shape() == [3, 2]));
}

#[test]
fn minimal_span_is_one_server_layer() {
    let mut sys = system(&[Cuts::new(2, 4, 2, 4)], 0, false);
    let inputs: PassInput = [(0, (Tensor::zeros(&[2, 2]), vec![0, 1]))].into();
    let out = sys
        .forward(Net::Discriminator, inputs, Mode::Train, &mut InProcessBus::default())
        .unwrap();
    let layers = &out.cache.unwrap().server.layers;
    assert_eq!(layers.len(), 1);
    assert_eq!(layers[0].block, sys.discriminator.middle() - 1);
    assert_eq!(out.middle[&0].shape(), &[2, 32]);
}

#[test]
fn conv_cgan_device1_boundaries() {
    let arch = Architecture::bundled("conv-cgan").unwrap();
    let (g, d) = arch.build(true).unwrap();
    let n_d = d.major_count();
    let map = [(0, Cuts::new(1, g.major_count(), 1, n_d))].into();
    let mut sys = SplitSystem::new(g, d, &map, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let (msg, _) = sys
        .client_forward_head(0, Net::Generator, Tensor::zeros(&[2, 100]), &[1, 2], Mode::Eval)
        .unwrap();
    assert_eq!(msg.payload.shape(), &[2, 256, 7, 7]);
    let inputs: PassInput = [(0, (Tensor::zeros(&[2, 1, 28, 28]), vec![4, 5]))].into();
    let out = sys
        .forward(Net::Discriminator, inputs, Mode::Eval, &mut InProcessBus::default())
        .unwrap();
    assert_eq!(out.outputs[&0].shape(), &[2, 1]);
}

#[test]
fn identity_head_forwards_its_input() {
    let mut sys = system(&[Cuts::new(1, 4, 1, 4)], 0, false);
    let w = ParamKey {
        net: Net::Discriminator,
        block: 0,
        layer: 1,
        name: ParamName::Weight,
    };
    let store = &mut sys.clients.get_mut(&0).unwrap().store;
    // Dense 6 -> 32: copy the first six inputs through.
    let mut eye = vec![0.0f32; 32 * 6];
    for i in 0..6 {
        eye[i * 6 + i] = 1.0;
    }
    store.get_mut(&w).unwrap().value = Tensor::from_vec(&[32, 6], eye);
    let x = Tensor::from_vec(&[1, 2], vec![0.25, 0.75]);
    let (msg, _) = sys
        .client_forward_head(0, Net::Discriminator, x, &[2], Mode::Eval)
        .unwrap();
    // Leaky ReLU keeps positives; the one-hot label lands at position 2 + 2.
    assert_eq!(&msg.payload.data()[..6], &[0.25, 0.75, 0.0, 0.0, 1.0, 0.0]);
}

#[test]
fn missing_and_stale_messages_are_protocol_errors() {
    let mut sys = system(&[Cuts::new(1, 4, 1, 4), Cuts::new(2, 5, 1, 5)], 0, false);
    let (m0, _) = sys
        .client_forward_head(0, Net::Generator, Tensor::zeros(&[1, 16]), &[0], Mode::Train)
        .unwrap();
    match sys.server_forward(Net::Generator, &[0, 1], vec![m0], Mode::Train) {
        Err(Error::Protocol(m)) => assert!(m.contains("client 1"), "{m}"),
        other => panic!("{other:?}"),
    }
    let inputs: PassInput = [(0, (Tensor::zeros(&[1, 2]), vec![0]))].into();
    let mut bus = InProcessBus::default();
    let out = sys.forward(Net::Discriminator, inputs, Mode::Train, &mut bus).unwrap();
    sys.params_changed(Net::Discriminator);
    let g = [(0, Tensor::zeros(&[1, 1]))].into();
    match sys.backward(out.cache.unwrap(), g, &mut bus) {
        Err(Error::Protocol(m)) => assert!(m.contains("stale"), "{m}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn zero_upstream_and_absent_clients_leave_zero_gradients() {
    let mut sys = system(&[Cuts::new(1, 4, 2, 5), Cuts::new(2, 5, 1, 4)], 2, false);
    let inputs: PassInput = [(0, (Tensor::from_vec(&[2, 2], vec![0.5, -0.2, 0.1, 0.9]), vec![1, 3]))].into();
    let mut bus = InProcessBus::default();
    let out = sys.forward(Net::Discriminator, inputs, Mode::Train, &mut bus).unwrap();
    let gx = sys
        .backward(out.cache.unwrap(), [(0, Tensor::zeros(&[2, 1]))].into(), &mut bus)
        .unwrap();
    assert!(gx[&0].data().iter().all(|&v| v == 0.0));
    for c in 0..2 {
        for (_, p) in sys.monolithic_store(c).iter() {
            assert!(p.grad.data().iter().all(|&v| v == 0.0));
        }
    }
    let inputs: PassInput = [(0, (Tensor::from_vec(&[1, 2], vec![0.5, -0.2]), vec![1]))].into();
    let out = sys.forward(Net::Discriminator, inputs, Mode::Train, &mut bus).unwrap();
    sys.backward(out.cache.unwrap(), [(0, Tensor::from_vec(&[1, 1], vec![1.0]))].into(), &mut bus)
        .unwrap();
    assert!(sys.monolithic_store(0).iter().any(|(_, p)| p.grad.data().iter().any(|&v| v != 0.0)));
    assert!(sys
        .monolithic_store(1)
        .iter()
        .all(|(_, p)| p.grad.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn server_blocks_needing_labels_are_refused() {
    let (g, d) = desk(false);
    let mut d = d;
    d.blocks[2].layers.insert(
        0,
        crate::graph::LayerSpec::EmbedConcat {
            classes: 4,
            dim: None,
            reshape: None,
        },
    );
    let map = [(0, Cuts::new(1, 4, 1, 4))].into();
    assert!(SplitSystem::new(g, d, &map, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
}

fn batch(rng: &mut ChaCha8Rng, rows: usize) -> ClientBatch {
    let labels: Vec<usize> = (0..rows).map(|_| rng.gen_range(0..4)).collect();
    let mut real = Vec::new();
    for &l in &labels {
        let a = std::f64::consts::TAU * l as f64 / 4.0;
        real.push((a.cos() + 0.1 * rng.gen_range(-1.0..1.0)) as f32);
        real.push((a.sin() + 0.1 * rng.gen_range(-1.0..1.0)) as f32);
    }
    ClientBatch {
        real: Tensor::from_vec(&[rows, 2], real),
        labels,
        noise: random_rows(rng, rows, 16),
        fake_labels: (0..rows).map(|_| rng.gen_range(0..4)).collect(),
    }
}

fn optims(k: usize) -> BTreeMap<usize, Adam> {
    (0..k).map(|c| (c, Adam::new(AdamConfig::default()))).collect()
}

#[test]
fn step_runs_three_d_and_two_g_passes_and_audits_clean() {
    let mut sys = system(&[Cuts::new(1, 4, 1, 5), Cuts::new(2, 5, 2, 4)], 5, false);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let batches: BTreeMap<usize, ClientBatch> = (0..2).map(|c| (c, batch(&mut rng, 8))).collect();
    let mut bus = InProcessBus::recording();
    let r = training_step(&mut sys, &mut optims(2), &batches, false, &mut bus).unwrap();
    assert_eq!(r.d_forwards, 3);
    assert_eq!(r.g_forwards, 2);
    assert!(r.d_loss.values().chain(r.g_loss.values()).all(|v| v.is_finite()));
    // Messages are activations or gradients at cut boundaries, never layer 0
    // (raw samples), and carry no label field.
    assert!(!bus.log.is_empty());
    for rec in &bus.log {
        assert!(rec.boundary >= 1);
    }
    let (m, _) = sys
        .client_forward_head(0, Net::Discriminator, batches[&0].real.clone(), &batches[&0].labels, Mode::Eval)
        .unwrap();
    let json = serde_json::to_value(&m).unwrap();
    let mut fields: Vec<&str> = json.as_object().unwrap().keys().map(String::as_str).collect();
    fields.sort_unstable();
    assert_eq!(fields, ["boundary", "client", "kind", "network", "payload", "rows"]);
    assert_ne!(m.payload.row_len(), batches[&0].real.row_len());
    for (_, p) in sys.monolithic_store(0).iter() {
        assert!(p.grad.data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn untrained_discriminator_at_one_half() {
    let mut sys = system(&[Cuts::new(1, 4, 1, 4)], 0, false);
    for (key, p) in sys.clients.get_mut(&0).unwrap().store.iter_mut() {
        if key.net == Net::Discriminator && key.block == 4 {
            p.value.fill(0.0);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let batches = [(0, batch(&mut rng, 6))].into();
    let r = training_step(&mut sys, &mut optims(1), &batches, false, &mut InProcessBus::default()).unwrap();
    assert!((r.d_loss[&0] - 2.0 * std::f64::consts::LN_2).abs() < 1e-6);
    assert!((r.d_real[&0] - 0.5).abs() < 1e-7);
}

#[test]
fn losses_at_known_outputs() {
    let ones = Tensor::from_vec(&[2, 1], vec![1.0, 1.0]);
    let zeros = Tensor::from_vec(&[2, 1], vec![0.0, 0.0]);
    let half = Tensor::from_vec(&[2, 1], vec![0.5, 0.5]);
    assert!(gan_losses(&ones, &zeros, false).d_loss < 1e-6);
    let l = gan_losses(&half, &half, false);
    assert!((l.d_loss - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
    assert!((l.g_loss - std::f64::consts::LN_2).abs() < 1e-12);
    assert!((gan_losses(&half, &half, true).g_loss + std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn g_loss_gradient_matches_finite_difference() {
    // Toy: p = sigmoid(w2 * leaky(w1 * x)); d/dw of BCE(p, 1) by hand vs numerically.
    let loss = |w1: f64, w2: f64, sat: bool| -> f64 {
        let h = w1 * 0.7;
        let h = if h > 0.0 { h } else { 0.2 * h };
        let p = 1.0 / (1.0 + (-(w2 * h)).exp());
        let t = Tensor::from_vec(&[1, 1], vec![p as f32]);
        g_loss_grad_pub(&t, sat).0
    };
    for sat in [false, true] {
        let (w1, w2): (f64, f64) = (0.8, -0.4);
        let h = w1 * 0.7;
        let p = 1.0 / (1.0 + (-(w2 * h)).exp());
        let t = Tensor::from_vec(&[1, 1], vec![p as f32]);
        let dl_dp = g_loss_grad_pub(&t, sat).1.data()[0] as f64;
        let analytic = dl_dp * p * (1.0 - p) * h;
        let eps = 1e-3;
        let numeric = (loss(w1, w2 + eps, sat) - loss(w1, w2 - eps, sat)) / (2.0 * eps);
        assert!((analytic - numeric).abs() < 1e-4, "{sat}: {analytic} vs {numeric}");
    }
}

fn g_loss_grad_pub(p: &Tensor, sat: bool) -> (f64, Tensor) {
    super::step::g_loss_grad(p, sat)
}

#[test]
fn discriminator_learns_on_one_client() {
    let mut sys = system(&[Cuts::new(2, 4, 2, 4)], 11, false);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut opt = optims(1);
    let mut losses = Vec::new();
    for _ in 0..200 {
        let batches = [(0, batch(&mut rng, 32))].into();
        let r = training_step(&mut sys, &mut opt, &batches, false, &mut InProcessBus::default()).unwrap();
        losses.push(r.d_loss[&0]);
    }
    let first: f64 = losses[..10].iter().sum::<f64>() / 10.0;
    let last: f64 = losses[150..].iter().sum::<f64>() / 50.0;
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn seeded_steps_are_bit_identical() {
    let run = || {
        let mut sys = system(&[Cuts::new(1, 4, 1, 5), Cuts::new(2, 5, 2, 4)], 8, true);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut opt = optims(2);
        let mut out = Vec::new();
        for _ in 0..5 {
            let batches: BTreeMap<usize, ClientBatch> = (0..2).map(|c| (c, batch(&mut rng, 4))).collect();
            let r = training_step(&mut sys, &mut opt, &batches, false, &mut InProcessBus::default()).unwrap();
            out.extend(r.d_loss.values().chain(r.g_loss.values()).map(|v| v.to_bits()));
        }
        (out, sys.monolithic_store(1))
    };
    assert_eq!(run(), run());
}
