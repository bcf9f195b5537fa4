//! Central finite-difference checks of the analytic backward pass, one layer
//! at a time, in `f64`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels::{self, LayerAt, LayerIo, Mode};
use super::layer::LayerSpec;
use super::params::{Net, ParamKey, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LAYER_KINDS: &[&str] = &[
    "dense",
    "conv2d",
    "conv_transpose2d",
    "batch_norm",
    "relu",
    "leaky_relu",
    "tanh",
    "sigmoid",
    "embed_concat",
    "flatten",
    "reshape",
];

/// Gradient errors are divided by `max(|analytic|, |numeric|, REL_FLOOR)`.
pub const REL_FLOOR: f64 = 1e-2;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub layer: String,
    pub input_shape: Vec<usize>,
    pub rows: usize,
    /// Number of scalar derivatives compared.
    pub checked: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCase {
    pub spec: LayerSpec,
    pub input_shape: Vec<usize>,
    pub rows: usize,
}

/// Draw values with magnitude in `[0.05, 1]` so that no perturbation crosses
/// a ReLU kink.
fn away_from_zero(rng: &mut ChaCha8Rng) -> f64 {
    let m = rng.gen_range(0.05..1.0);
    if rng.gen_bool(0.5) {
        m
    } else {
        -m
    }
}

/// `count` random small configurations of one layer kind.
pub fn random_cases(kind: &str, count: usize, seed: u64) -> Result<Vec<GradCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut rows = rng.gen_range(2..5);
        let vec_shape = |rng: &mut ChaCha8Rng| vec![rng.gen_range(1..7)];
        let map_shape = |rng: &mut ChaCha8Rng| {
            vec![rng.gen_range(1..4), rng.gen_range(1..5), rng.gen_range(1..5)]
        };
        let (spec, input_shape) = match kind {
            "dense" => {
                let i = rng.gen_range(1..7);
                (
                    LayerSpec::Dense {
                        inputs: i,
                        outputs: rng.gen_range(1..7),
                    },
                    vec![i],
                )
            }
            "conv2d" | "conv_transpose2d" => {
                let kernel = rng.gen_range(1..4);
                let stride = rng.gen_range(1..3);
                let padding = rng.gen_range(0..kernel.min(2));
                let cin = rng.gen_range(1..4);
                let cout = rng.gen_range(1..4);
                let h = rng.gen_range(kernel..6);
                let w = rng.gen_range(kernel..6);
                let spec = if kind == "conv2d" {
                    LayerSpec::Conv2d {
                        in_channels: cin,
                        out_channels: cout,
                        kernel,
                        stride,
                        padding,
                    }
                } else {
                    LayerSpec::ConvTranspose2d {
                        in_channels: cin,
                        out_channels: cout,
                        kernel,
                        stride,
                        padding,
                    }
                };
                (spec, vec![cin, h, w])
            }
            "batch_norm" => {
                // Two-row batches make the normalization nearly a sign
                // function, where a 1e-3 step is no longer in the linear regime.
                rows = rng.gen_range(4..7);
                let shape = if rng.gen_bool(0.5) {
                    vec_shape(&mut rng)
                } else {
                    map_shape(&mut rng)
                };
                (
                    LayerSpec::BatchNorm {
                        eps: 1e-5,
                        momentum: 0.1,
                    },
                    shape,
                )
            }
            "relu" => (LayerSpec::Relu, map_shape(&mut rng)),
            "leaky_relu" => (
                LayerSpec::LeakyRelu {
                    slope: rng.gen_range(0.01..0.5),
                },
                vec_shape(&mut rng),
            ),
            "tanh" => (LayerSpec::Tanh, vec_shape(&mut rng)),
            "sigmoid" => (LayerSpec::Sigmoid, map_shape(&mut rng)),
            "embed_concat" => {
                let classes = rng.gen_range(2..6);
                if rng.gen_bool(0.5) {
                    (
                        LayerSpec::EmbedConcat {
                            classes,
                            dim: Some(rng.gen_range(1..5)),
                            reshape: None,
                        },
                        vec_shape(&mut rng),
                    )
                } else {
                    let (h, w) = (rng.gen_range(1..4), rng.gen_range(1..4));
                    (
                        LayerSpec::EmbedConcat {
                            classes,
                            dim: Some(h * w),
                            reshape: Some(vec![1, h, w]),
                        },
                        vec![rng.gen_range(1..3), h, w],
                    )
                }
            }
            "flatten" => (LayerSpec::Flatten, map_shape(&mut rng)),
            "reshape" => {
                let (a, b) = (rng.gen_range(1..4), rng.gen_range(1..4));
                (LayerSpec::Reshape { shape: vec![a, b] }, vec![a * b])
            }
            other => return Err(Error::Usage(format!("unknown layer kind {other}"))),
        };
        out.push(GradCase {
            spec,
            input_shape,
            rows,
        });
    }
    Ok(out)
}

/// Compare the analytic input and parameter gradients of `sum(r * layer(x))`
/// against central differences with step `step`.
pub fn check_layer(case: &GradCase, seed: u64, step: f64) -> Result<GradCheck> {
    let spec = &case.spec;
    let input_shape = &case.input_shape;
    let output_shape = spec
        .output_shape(input_shape)
        .map_err(|m| Error::config(spec.name(), m))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let at = LayerAt {
        net: Net::Discriminator,
        block: 0,
        layer: 0,
    };
    let io = LayerIo {
        spec,
        at,
        input_shape,
        output_shape: &output_shape,
    };

    let mut store = ParamStore::<f64>::new();
    for ps in spec.param_shapes(input_shape) {
        let len: usize = ps.shape.iter().product();
        let data = (0..len)
            .map(|_| {
                if ps.trainable {
                    away_from_zero(&mut rng)
                } else {
                    rng.gen_range(0.5..1.5)
                }
            })
            .collect();
        store.insert(
            ParamKey {
                net: at.net,
                block: 0,
                layer: 0,
                name: ps.name,
            },
            Tensor::from_vec(&ps.shape, data),
            ps.trainable,
        );
    }

    let mut shape = vec![case.rows];
    shape.extend_from_slice(input_shape);
    let n_in: usize = shape.iter().product();
    let x = Tensor::from_vec(&shape, (0..n_in).map(|_| away_from_zero(&mut rng)).collect());
    let labels: Option<Vec<usize>> = match spec {
        LayerSpec::EmbedConcat { classes, .. } => {
            Some((0..case.rows).map(|_| rng.gen_range(0..*classes)).collect())
        }
        _ => None,
    };
    let n_out = case.rows * output_shape.iter().product::<usize>();
    let r: Vec<f64> = (0..n_out).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let groups = [0..case.rows];

    let loss = |store: &mut ParamStore<f64>, x: Tensor<f64>| -> Result<f64> {
        let (y, _) = kernels::forward(&io, &mut [store], &groups, x, labels.as_deref(), Mode::Train)?;
        Ok(y.data().iter().zip(&r).map(|(a, b)| a * b).sum())
    };

    let (y, cache) = kernels::forward(
        &io,
        &mut [&mut store],
        &groups,
        x.clone(),
        labels.as_deref(),
        Mode::Train,
    )?;
    let cache = cache.ok_or_else(|| Error::Usage("train forward kept no cache".into()))?;
    let gy = Tensor::from_vec(y.shape(), r.clone());
    let gx = kernels::backward(&io, &mut [&mut store], &groups, cache, gy)?;

    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut compare = |analytic: f64, numeric: f64| {
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR);
        worst = worst.max(err);
        checked += 1;
    };

    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= step;
        let numeric = (loss(&mut store.clone(), plus)? - loss(&mut store.clone(), minus)?) / (2.0 * step);
        compare(gx.data()[i], numeric);
    }

    let keys: Vec<ParamKey> = store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(k, _)| *k)
        .collect();
    for key in keys {
        let len = store.get(&key).map(|p| p.value.len()).unwrap_or(0);
        for i in 0..len {
            let mut plus = store.clone();
            plus.get_mut(&key).expect("key").value.data_mut()[i] += step;
            let mut minus = store.clone();
            minus.get_mut(&key).expect("key").value.data_mut()[i] -= step;
            let numeric = (loss(&mut plus, x.clone())? - loss(&mut minus, x.clone())?) / (2.0 * step);
            compare(store.get(&key).expect("key").grad.data()[i], numeric);
        }
    }

    Ok(GradCheck {
        layer: spec.describe(),
        input_shape: input_shape.clone(),
        rows: case.rows,
        checked,
        max_rel_error: worst,
    })
}
