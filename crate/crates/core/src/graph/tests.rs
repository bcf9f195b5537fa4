use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{check_layer, random_cases, LAYER_KINDS};
use super::*;
use crate::tensor::Tensor;

#[test]
fn finite_differences_for_every_layer_kind() {
    for (k, kind) in LAYER_KINDS.iter().enumerate() {
        for (i, case) in random_cases(kind, 10, 100 + k as u64).unwrap().iter().enumerate() {
            let r = check_layer(case, i as u64, 1e-3).unwrap();
            assert!(r.checked > 0);
            assert!(
                r.max_rel_error < 1e-4,
                "{kind} {:?} x{}: {}",
                r.input_shape,
                r.rows,
                r.max_rel_error
            );
        }
    }
}

#[test]
fn gradcheck_catches_a_wrong_gradient() {
    // A sigmoid checked with a deliberately coarse step must report the
    // truncation error rather than pass silently.
    let case = super::gradcheck::GradCase {
        spec: LayerSpec::Sigmoid,
        input_shape: vec![6],
        rows: 3,
    };
    assert!(check_layer(&case, 0, 1.0).unwrap().max_rel_error > 1e-3);
}

/// Multiply-accumulates of a direct convolution, counted one tap at a time,
/// padded taps included as the closed form assumes.
fn conv_macs(cin: usize, cout: usize, k: usize, ho: usize, wo: usize) -> u64 {
    let mut macs = 0u64;
    for _co in 0..cout {
        for _oy in 0..ho {
            for _ox in 0..wo {
                for _ci in 0..cin {
                    for _ky in 0..k {
                        for _kx in 0..k {
                            macs += 1;
                        }
                    }
                }
            }
        }
    }
    macs
}

/// Naive scatter form of a transposed convolution, counting every tap.
fn conv_t_macs(cin: usize, cout: usize, k: usize, h: usize, w: usize) -> u64 {
    let mut macs = 0u64;
    for _ci in 0..cin {
        for _y in 0..h {
            for _x in 0..w {
                for _co in 0..cout {
                    for _ky in 0..k {
                        for _kx in 0..k {
                            macs += 1;
                        }
                    }
                }
            }
        }
    }
    macs
}

#[test]
fn conv_cgan_convolutions_match_mac_counter() {
    let arch = Architecture::bundled("conv-cgan").unwrap();
    let (g, d) = arch.build(true).unwrap();
    let mut seen = 0;
    for net in [&g, &d] {
        for block in &net.blocks {
            let input = block.major_input_shape();
            let layer = block.major_layer();
            let fwd = layer.flops_fwd(input);
            match *layer {
                LayerSpec::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    ..
                } => {
                    let out = layer.output_shape(input).unwrap();
                    assert_eq!(fwd, 2 * conv_macs(in_channels, out_channels, kernel, out[1], out[2]));
                    seen += 1;
                }
                LayerSpec::ConvTranspose2d {
                    in_channels,
                    out_channels,
                    kernel,
                    ..
                } => {
                    assert_eq!(fwd, 2 * conv_t_macs(in_channels, out_channels, kernel, input[1], input[2]));
                    seen += 1;
                }
                _ => {}
            }
        }
    }
    assert!(seen >= 4);
    let p = arch.profile().unwrap();
    assert_eq!(account(&p, 3), account(&p, 3));
    for row in account(&p, 1) {
        assert_eq!(row.flops_bwd, 2.0 * row.flops_fwd);
    }
}

#[test]
fn activation_bytes_of_a_feature_map() {
    // 128 x 7 x 7 floats.
    let p = Architecture::bundled("conv-cgan").unwrap().profile().unwrap();
    let hit = p
        .generator
        .layers
        .iter()
        .chain(&p.discriminator.layers)
        .any(|l| l.activation_bytes == 25088.0);
    assert!(hit);
    let dense = LayerSpec::Dense {
        inputs: 100,
        outputs: 10,
    };
    assert_eq!(dense.flops_fwd(&[100]), 2000);
}

#[test]
fn conv_cgan_generator_emits_images() {
    let arch = Architecture::bundled("conv-cgan").unwrap();
    let (g, _) = arch.build(true).unwrap();
    let mut store = g.init_params::<f32, _>(&mut ChaCha8Rng::seed_from_u64(0));
    let z = Tensor::zeros(&[2, 100]);
    let (y, _) = g
        .forward(0..g.major_count(), &mut store, z, Some(&[3, 7]), Mode::Eval)
        .unwrap();
    assert_eq!(y.shape(), &[2, 1, 28, 28]);
    assert!(y.data().iter().all(|v| v.abs() <= 1.0));
}

fn desk_nets() -> (Network, Network) {
    Architecture::bundled("desk-dense").unwrap().build(false).unwrap()
}

#[test]
fn composition_over_every_split_point() {
    let (g, _) = desk_nets();
    let n = g.major_count();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let store = g.init_params::<f32, _>(&mut rng);
    let z = Tensor::from_vec(&[5, 16], (0..80).map(|_| rng.gen_range(-1.0..1.0)).collect());
    let labels = [0, 1, 2, 3, 1];
    let (whole, _) = g
        .forward(0..n, &mut store.clone(), z.clone(), Some(&labels), Mode::Train)
        .unwrap();
    for b in 1..n {
        let mut s = store.clone();
        let (mid, _) = g.forward(0..b, &mut s, z.clone(), Some(&labels), Mode::Train).unwrap();
        let (out, _) = g.forward(b..n, &mut s, mid, Some(&labels), Mode::Train).unwrap();
        assert!(out.max_abs_diff(&whole) <= 1e-7, "split at {b}");
    }
}

#[test]
fn same_seed_same_bits() {
    let run = || {
        let (_, d) = desk_nets();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = d.init_params::<f32, _>(&mut rng);
        let x = Tensor::from_vec(&[6, 2], (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let labels = [0, 1, 2, 3, 0, 1];
        let (y, cache) = d
            .forward(0..d.major_count(), &mut store, x, Some(&labels), Mode::Train)
            .unwrap();
        let gx = d.backward(&mut store, cache.unwrap(), y.map(|v| v - 0.5)).unwrap();
        (y, gx, store)
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0.data(), b.0.data());
    assert_eq!(a.1.data(), b.1.data());
    for ((ka, pa), (kb, pb)) in a.2.iter().zip(b.2.iter()) {
        assert_eq!(ka, kb);
        assert_eq!(pa.grad.data(), pb.grad.data());
    }
}

#[test]
fn zero_grad_clears_everything() {
    let (_, d) = desk_nets();
    let mut store = d.init_params::<f32, _>(&mut ChaCha8Rng::seed_from_u64(2));
    let x = Tensor::from_vec(&[2, 2], vec![0.3, -0.4, 1.0, 0.2]);
    let (y, cache) = d.forward(0..5, &mut store, x, Some(&[1, 2]), Mode::Train).unwrap();
    d.backward(&mut store, cache.unwrap(), y).unwrap();
    assert!(store.iter().any(|(_, p)| p.grad.data().iter().any(|&g| g != 0.0)));
    store.zero_grad();
    for (_, p) in store.iter() {
        assert_eq!(p.grad.shape(), p.value.shape());
        assert!(p.grad.data().iter().all(|&g| g == 0.0));
    }
}

