use std::ops::Range;

use rand::Rng;

use super::kernels::{self, LayerAt, LayerCache, LayerIo, Mode};
use super::layer::{Init, LayerSpec, ParamName};
use super::params::{Net, ParamKey, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// A major layer together with the auxiliary layers that travel with it.
/// Auxiliary layers in front of the first major layer (label embedding)
/// belong to the first block.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub layers: Vec<LayerSpec>,
    /// Per-sample input shape of every layer, plus the block output at the end.
    pub shapes: Vec<Vec<usize>>,
    pub major: usize,
}

impl Block {
    pub fn input_shape(&self) -> &[usize] {
        &self.shapes[0]
    }

    pub fn output_shape(&self) -> &[usize] {
        self.shapes.last().expect("block has shapes")
    }

    pub fn major_layer(&self) -> &LayerSpec {
        &self.layers[self.major]
    }

    pub fn major_input_shape(&self) -> &[usize] {
        &self.shapes[self.major]
    }

    pub fn needs_labels(&self) -> bool {
        self.layers.iter().any(LayerSpec::needs_labels)
    }
}

#[derive(Clone, Debug)]
pub struct BlockCache<S: Scalar> {
    layers: Vec<LayerCache<S>>,
}

/// Intermediates of a forward pass over a contiguous block range.
#[derive(Clone, Debug)]
pub struct SegmentCache<S: Scalar> {
    blocks: Range<usize>,
    caches: Vec<BlockCache<S>>,
}

impl<S: Scalar> SegmentCache<S> {
    pub fn blocks(&self) -> Range<usize> {
        self.blocks.clone()
    }
}

/// Sequential network split into major-layer blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub net: Net,
    pub input_shape: Vec<usize>,
    pub blocks: Vec<Block>,
}

impl Network {
    pub fn new(net: Net, input_shape: Vec<usize>, layers: Vec<LayerSpec>) -> Result<Self> {
        let mut blocks: Vec<Block> = Vec::new();
        let mut pending: Vec<LayerSpec> = Vec::new();
        for layer in layers {
            if layer.is_major() {
                let mut block_layers = std::mem::take(&mut pending);
                let major = block_layers.len();
                block_layers.push(layer);
                blocks.push(Block {
                    layers: block_layers,
                    shapes: Vec::new(),
                    major,
                });
            } else if let Some(last) = blocks.last_mut() {
                last.layers.push(layer);
            } else {
                pending.push(layer);
            }
        }
        if !pending.is_empty() {
            return Err(Error::config(
                format!("{} network", net.tag()),
                "no major layer in architecture",
            ));
        }

        let mut shape = input_shape.clone();
        for (b, block) in blocks.iter_mut().enumerate() {
            block.shapes.push(shape.clone());
            for (l, layer) in block.layers.iter().enumerate() {
                shape = layer.output_shape(&shape).map_err(|m| {
                    Error::config(
                        format!("{} block {} layer {l} ({})", net.tag(), b + 1, layer.name()),
                        m,
                    )
                })?;
                block.shapes.push(shape.clone());
            }
        }
        Ok(Self {
            net,
            input_shape,
            blocks,
        })
    }

    /// Number of major layers, `n` in cut notation.
    pub fn major_count(&self) -> usize {
        self.blocks.len()
    }

    /// 1-based index of the middle major layer, `ceil(n / 2)`.
    pub fn middle(&self) -> usize {
        self.blocks.len().div_ceil(2)
    }

    pub fn output_shape(&self) -> &[usize] {
        self.blocks.last().expect("non-empty network").output_shape()
    }

    /// He-uniform for weights feeding a ReLU-family activation, Xavier-uniform
    /// otherwise; biases zero; batchnorm affine identity.
    pub fn init_params<S: Scalar, R: Rng>(&self, rng: &mut R) -> ParamStore<S> {
        let mut store = ParamStore::new();
        for (b, block) in self.blocks.iter().enumerate() {
            let relu_follows = block.layers[block.major + 1..]
                .iter()
                .find(|l| !matches!(l, LayerSpec::BatchNorm { .. }))
                .is_some_and(LayerSpec::is_relu_family);
            for (l, layer) in block.layers.iter().enumerate() {
                for ps in layer.param_shapes(&block.shapes[l]) {
                    let init = match ps.name {
                        ParamName::Weight => {
                            let (fan_in, fan_out) = ps.fans;
                            if relu_follows {
                                Init::Uniform((6.0 / fan_in as f64).sqrt())
                            } else {
                                Init::Uniform((6.0 / (fan_in + fan_out) as f64).sqrt())
                            }
                        }
                        ParamName::Table => Init::Uniform(1.0),
                        ParamName::Gamma | ParamName::RunningVar => Init::Ones,
                        ParamName::Bias | ParamName::Beta | ParamName::RunningMean => Init::Zeros,
                    };
                    let len: usize = ps.shape.iter().product();
                    let data: Vec<S> = match init {
                        Init::Zeros => vec![S::zero(); len],
                        Init::Ones => vec![S::one(); len],
                        Init::Uniform(bound) => (0..len)
                            .map(|_| S::lit(rng.gen_range(-bound..=bound)))
                            .collect(),
                    };
                    store.insert(
                        ParamKey {
                            net: self.net,
                            block: b,
                            layer: l,
                            name: ps.name,
                        },
                        Tensor::from_vec(&ps.shape, data),
                        ps.trainable,
                    );
                }
            }
        }
        store
    }

    fn check_input<S: Scalar>(&self, block: usize, x: &Tensor<S>) -> Result<()> {
        let expected = self.blocks[block].input_shape();
        if x.shape().len() < 1 || x.sample_shape() != expected {
            let b = &self.blocks[block];
            return Err(Error::config(
                format!(
                    "{} block {} ({})",
                    self.net.tag(),
                    block + 1,
                    b.major_layer().describe()
                ),
                format!("expected per-sample input {expected:?}, got {:?}", x.shape()),
            ));
        }
        Ok(())
    }

    /// Run one block with row groups, each group using its own parameter store.
    pub fn block_forward<S: Scalar>(
        &self,
        block: usize,
        stores: &mut [&mut ParamStore<S>],
        groups: &[Range<usize>],
        x: Tensor<S>,
        labels: Option<&[usize]>,
        mode: Mode,
    ) -> Result<(Tensor<S>, Option<BlockCache<S>>)> {
        self.check_input(block, &x)?;
        debug_assert_eq!(stores.len(), groups.len());
        let spec = &self.blocks[block];
        let mut caches = Vec::with_capacity(spec.layers.len());
        let mut h = x;
        for (l, layer) in spec.layers.iter().enumerate() {
            let io = LayerIo {
                spec: layer,
                at: LayerAt {
                    net: self.net,
                    block,
                    layer: l,
                },
                input_shape: &spec.shapes[l],
                output_shape: &spec.shapes[l + 1],
            };
            let (y, cache) = kernels::forward(&io, stores, groups, h, labels, mode)?;
            if let Some(c) = cache {
                caches.push(c);
            }
            h = y;
        }
        let cache = (mode == Mode::Train).then_some(BlockCache { layers: caches });
        Ok((h, cache))
    }

    pub fn block_backward<S: Scalar>(
        &self,
        block: usize,
        stores: &mut [&mut ParamStore<S>],
        groups: &[Range<usize>],
        cache: BlockCache<S>,
        gy: Tensor<S>,
    ) -> Result<Tensor<S>> {
        let spec = &self.blocks[block];
        if gy.sample_shape() != spec.output_shape() {
            return Err(Error::config(
                format!("{} block {}", self.net.tag(), block + 1),
                format!(
                    "upstream gradient {:?} does not match output {:?}",
                    gy.shape(),
                    spec.output_shape()
                ),
            ));
        }
        let mut g = gy;
        for (l, layer_cache) in cache.layers.into_iter().enumerate().rev() {
            let layer = &spec.layers[l];
            let io = LayerIo {
                spec: layer,
                at: LayerAt {
                    net: self.net,
                    block,
                    layer: l,
                },
                input_shape: &spec.shapes[l],
                output_shape: &spec.shapes[l + 1],
            };
            g = kernels::backward(&io, stores, groups, layer_cache, g)?;
        }
        Ok(g)
    }

    /// Forward over blocks `range` (0-based, half-open) with a single store.
    pub fn forward<S: Scalar>(
        &self,
        range: Range<usize>,
        store: &mut ParamStore<S>,
        input: Tensor<S>,
        labels: Option<&[usize]>,
        mode: Mode,
    ) -> Result<(Tensor<S>, Option<SegmentCache<S>>)> {
        if range.is_empty() || range.end > self.blocks.len() {
            return Err(Error::Usage(format!(
                "segment {range:?} outside {} blocks",
                self.blocks.len()
            )));
        }
        let groups = [0..input.rows()];
        let mut caches = Vec::with_capacity(range.len());
        let mut h = input;
        for b in range.clone() {
            let (y, cache) = self.block_forward(b, &mut [&mut *store], &groups, h, labels, mode)?;
            caches.extend(cache);
            h = y;
        }
        let cache = (mode == Mode::Train).then_some(SegmentCache {
            blocks: range,
            caches,
        });
        Ok((h, cache))
    }

    /// Backward through a cached segment; parameter gradients accumulate
    /// into `store`, the gradient w.r.t. the segment input is returned.
    pub fn backward<S: Scalar>(
        &self,
        store: &mut ParamStore<S>,
        cache: SegmentCache<S>,
        gy: Tensor<S>,
    ) -> Result<Tensor<S>> {
        let groups = [0..gy.rows()];
        let mut g = gy;
        for (b, block_cache) in cache.blocks.clone().zip(cache.caches).rev() {
            g = self.block_backward(b, &mut [&mut *store], &groups, block_cache, g)?;
        }
        Ok(g)
    }

    pub fn describe_blocks(&self, range: Range<usize>) -> Vec<String> {
        self.blocks[range]
            .iter()
            .map(|b| b.major_layer().describe())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mlp() -> Network {
        Network::new(
            Net::Discriminator,
            vec![3],
            vec![
                LayerSpec::Dense {
                    inputs: 3,
                    outputs: 4,
                },
                LayerSpec::Tanh,
                LayerSpec::Dense {
                    inputs: 4,
                    outputs: 2,
                },
            ],
        )
        .unwrap()
    }

    #[test]
    fn identity_dense_passes_input_through() {
        let net = Network::new(
            Net::Generator,
            vec![3],
            vec![LayerSpec::Dense {
                inputs: 3,
                outputs: 3,
            }],
        )
        .unwrap();
        let mut store = net.init_params::<f64, _>(&mut ChaCha8Rng::seed_from_u64(1));
        let key = ParamKey {
            net: Net::Generator,
            block: 0,
            layer: 0,
            name: ParamName::Weight,
        };
        let w = store.get_mut(&key).unwrap();
        w.value = Tensor::from_vec(&[3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]);
        let x = Tensor::from_vec(&[2, 3], vec![0.5, -1.0, 2.0, 3.0, 0.0, -0.25]);
        let (y, _) = net.forward(0..1, &mut store, x.clone(), None, Mode::Eval).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn tanh_of_zero_is_zero() {
        let net = Network::new(Net::Generator, vec![2], vec![LayerSpec::Dense { inputs: 2, outputs: 2 }, LayerSpec::Tanh]).unwrap();
        let mut store = net.init_params::<f32, _>(&mut ChaCha8Rng::seed_from_u64(0));
        // zero bias and zero input give a zero pre-activation
        let (y, _) = net
            .forward(0..1, &mut store, Tensor::zeros(&[4, 2]), None, Mode::Train)
            .unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_mismatch_names_the_layer() {
        let net = mlp();
        let mut store = net.init_params::<f32, _>(&mut ChaCha8Rng::seed_from_u64(0));
        let err = net
            .forward(0..2, &mut store, Tensor::zeros(&[1, 5]), None, Mode::Eval)
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("D block 1"), "{msg}");
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let net = mlp();
        let mut store = net.init_params::<f64, _>(&mut ChaCha8Rng::seed_from_u64(3));
        let x = Tensor::from_vec(&[2, 3], vec![0.1, 0.2, -0.3, 1.0, -2.0, 0.5]);
        let (_, cache) = net.forward(0..2, &mut store, x, None, Mode::Train).unwrap();
        let gx = net
            .backward(&mut store, cache.unwrap(), Tensor::zeros(&[2, 2]))
            .unwrap();
        assert!(gx.data().iter().all(|&v| v == 0.0));
        assert!(store.iter().all(|(_, p)| p.grad.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn dense_backward_matches_analytic_form() {
        let net = Network::new(
            Net::Generator,
            vec![2],
            vec![LayerSpec::Dense {
                inputs: 2,
                outputs: 2,
            }],
        )
        .unwrap();
        let mut store = net.init_params::<f64, _>(&mut ChaCha8Rng::seed_from_u64(0));
        let wkey = ParamKey {
            net: Net::Generator,
            block: 0,
            layer: 0,
            name: ParamName::Weight,
        };
        store.get_mut(&wkey).unwrap().value = Tensor::from_vec(&[2, 2], vec![1., 2., 3., 4.]);
        let x = Tensor::from_vec(&[1, 2], vec![0.5, -1.0]);
        let (_, cache) = net.forward(0..1, &mut store, x, None, Mode::Train).unwrap();
        let g = Tensor::from_vec(&[1, 2], vec![1.0, 2.0]);
        let gx = net.backward(&mut store, cache.unwrap(), g).unwrap();
        // W^T g
        assert_eq!(gx.data(), &[7.0, 10.0]);
        // g x^T
        assert_eq!(store.get(&wkey).unwrap().grad.data(), &[0.5, -1.0, 1.0, -2.0]);
    }

    #[test]
    fn backward_accumulates_rather_than_overwrites() {
        let net = mlp();
        let mut store = net.init_params::<f64, _>(&mut ChaCha8Rng::seed_from_u64(5));
        let x = Tensor::from_vec(&[1, 3], vec![0.3, -0.7, 0.2]);
        let g = Tensor::from_vec(&[1, 2], vec![1.0, -1.0]);
        let run = |store: &mut ParamStore<f64>| {
            let (_, c) = net.forward(0..2, store, x.clone(), None, Mode::Train).unwrap();
            net.backward(store, c.unwrap(), g.clone()).unwrap();
        };
        run(&mut store);
        let once: Vec<f64> = store.iter().flat_map(|(_, p)| p.grad.data().to_vec()).collect();
        run(&mut store);
        let twice: Vec<f64> = store.iter().flat_map(|(_, p)| p.grad.data().to_vec()).collect();
        for (a, b) in once.iter().zip(&twice) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
        store.zero_grad();
        assert!(store.iter().all(|(_, p)| p.grad.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn leading_embedding_joins_first_block() {
        let net = Network::new(
            Net::Generator,
            vec![4],
            vec![
                LayerSpec::EmbedConcat {
                    classes: 3,
                    dim: None,
                    reshape: None,
                },
                LayerSpec::Dense {
                    inputs: 7,
                    outputs: 2,
                },
                LayerSpec::Relu,
            ],
        )
        .unwrap();
        assert_eq!(net.blocks.len(), 1);
        assert_eq!(net.blocks[0].major, 1);
        assert!(net.blocks[0].needs_labels());
    }
}
