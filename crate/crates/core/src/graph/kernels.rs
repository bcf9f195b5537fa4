//! Forward and backward kernels for every layer kind.
//!
//! Rows of a batch are partitioned into contiguous groups; each group reads
//! its parameters from its own store. A single group covering the whole
//! batch is the ordinary single-model case. Batchnorm statistics are always
//! taken over the whole batch, so it is the only layer that couples groups.

use std::ops::Range;

use super::layer::{LayerSpec, ParamName};
use super::params::{Net, Param, ParamKey, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Position of a layer inside a network.
#[derive(Clone, Copy, Debug)]
pub(crate) struct LayerAt {
    pub net: Net,
    pub block: usize,
    pub layer: usize,
}

impl LayerAt {
    fn key(self, name: ParamName) -> ParamKey {
        ParamKey {
            net: self.net,
            block: self.block,
            layer: self.layer,
            name,
        }
    }

    fn label(self, spec: &LayerSpec) -> String {
        format!(
            "{} block {} layer {} ({})",
            self.net.tag(),
            self.block + 1,
            self.layer,
            spec.name()
        )
    }
}

#[derive(Clone, Debug)]
pub(crate) enum LayerCache<S: Scalar> {
    Input(Tensor<S>),
    Output(Tensor<S>),
    BatchNorm {
        xhat: Tensor<S>,
        inv_std: Vec<f64>,
    },
    Embed {
        labels: Vec<usize>,
        input_shape: Vec<usize>,
    },
    Shape(Vec<usize>),
}

fn lookup<'a, S: Scalar>(
    store: &'a ParamStore<S>,
    at: LayerAt,
    spec: &LayerSpec,
    name: ParamName,
) -> Result<&'a Param<S>> {
    store
        .get(&at.key(name))
        .ok_or_else(|| Error::config(at.label(spec), format!("missing parameter {name:?}")))
}

fn lookup_mut<'a, S: Scalar>(
    store: &'a mut ParamStore<S>,
    at: LayerAt,
    spec: &LayerSpec,
    name: ParamName,
) -> Result<&'a mut Param<S>> {
    store
        .get_mut(&at.key(name))
        .ok_or_else(|| Error::config(at.label(spec), format!("missing parameter {name:?}")))
}

#[inline]
fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut acc = [S::zero(); 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = S::zero();
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy<S: Scalar>(y: &mut [S], x: &[S], alpha: S) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[derive(Clone, Copy)]
struct ConvGeom {
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(spec: &LayerSpec, input: &[usize], output: &[usize]) -> Self {
        let (cin, cout, k, stride, pad) = match *spec {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            }
            | LayerSpec::ConvTranspose2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => (in_channels, out_channels, kernel, stride, padding),
            _ => unreachable!("not a convolution"),
        };
        Self {
            cin,
            cout,
            k,
            stride,
            pad,
            h: input[1],
            w: input[2],
            ho: output[1],
            wo: output[2],
        }
    }

    /// Input coordinate touched by output position `o` and kernel tap `t`.
    #[inline]
    fn conv_src(&self, o: usize, t: usize, limit: usize) -> Option<usize> {
        (o * self.stride + t).checked_sub(self.pad).filter(|&v| v < limit)
    }
}

fn conv_forward_row<S: Scalar>(g: &ConvGeom, w: &[S], b: &[S], x: &[S], y: &mut [S]) {
    let k = g.k;
    for co in 0..g.cout {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let mut acc = b[co];
                for ci in 0..g.cin {
                    let wbase = ((co * g.cin + ci) * k) * k;
                    for ky in 0..k {
                        let Some(iy) = g.conv_src(oy, ky, g.h) else { continue };
                        let xrow = &x[(ci * g.h + iy) * g.w..(ci * g.h + iy + 1) * g.w];
                        for kx in 0..k {
                            if let Some(ix) = g.conv_src(ox, kx, g.w) {
                                acc += w[wbase + ky * k + kx] * xrow[ix];
                            }
                        }
                    }
                }
                y[(co * g.ho + oy) * g.wo + ox] = acc;
            }
        }
    }
}

fn conv_backward_row<S: Scalar>(
    g: &ConvGeom,
    w: &[S],
    x: &[S],
    gy: &[S],
    gx: &mut [S],
    gw: &mut [f64],
    gb: &mut [f64],
) {
    let k = g.k;
    for co in 0..g.cout {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let gv = gy[(co * g.ho + oy) * g.wo + ox];
                if gv == S::zero() {
                    continue;
                }
                gb[co] += gv.as_f64();
                for ci in 0..g.cin {
                    let wbase = ((co * g.cin + ci) * k) * k;
                    for ky in 0..k {
                        let Some(iy) = g.conv_src(oy, ky, g.h) else { continue };
                        for kx in 0..k {
                            if let Some(ix) = g.conv_src(ox, kx, g.w) {
                                let xi = (ci * g.h + iy) * g.w + ix;
                                gx[xi] += w[wbase + ky * k + kx] * gv;
                                gw[wbase + ky * k + kx] += (x[xi] * gv).as_f64();
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Output coordinate written by input position `i` and kernel tap `t`.
#[inline]
fn convt_dst(g: &ConvGeom, i: usize, t: usize, limit: usize) -> Option<usize> {
    (i * g.stride + t).checked_sub(g.pad).filter(|&v| v < limit)
}

fn convt_forward_row<S: Scalar>(g: &ConvGeom, w: &[S], b: &[S], x: &[S], y: &mut [S]) {
    let k = g.k;
    for co in 0..g.cout {
        y[co * g.ho * g.wo..(co + 1) * g.ho * g.wo].fill(b[co]);
    }
    for ci in 0..g.cin {
        for iy in 0..g.h {
            for ix in 0..g.w {
                let v = x[(ci * g.h + iy) * g.w + ix];
                if v == S::zero() {
                    continue;
                }
                for co in 0..g.cout {
                    let wbase = ((ci * g.cout + co) * k) * k;
                    for ky in 0..k {
                        let Some(oy) = convt_dst(g, iy, ky, g.ho) else { continue };
                        for kx in 0..k {
                            if let Some(ox) = convt_dst(g, ix, kx, g.wo) {
                                y[(co * g.ho + oy) * g.wo + ox] += w[wbase + ky * k + kx] * v;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn convt_backward_row<S: Scalar>(
    g: &ConvGeom,
    w: &[S],
    x: &[S],
    gy: &[S],
    gx: &mut [S],
    gw: &mut [f64],
    gb: &mut [f64],
) {
    let k = g.k;
    for co in 0..g.cout {
        gb[co] += gy[co * g.ho * g.wo..(co + 1) * g.ho * g.wo]
            .iter()
            .map(|v| v.as_f64())
            .sum::<f64>();
    }
    for ci in 0..g.cin {
        for iy in 0..g.h {
            for ix in 0..g.w {
                let xi = (ci * g.h + iy) * g.w + ix;
                let xv = x[xi];
                let mut acc = S::zero();
                for co in 0..g.cout {
                    let wbase = ((ci * g.cout + co) * k) * k;
                    for ky in 0..k {
                        let Some(oy) = convt_dst(g, iy, ky, g.ho) else { continue };
                        for kx in 0..k {
                            if let Some(ox) = convt_dst(g, ix, kx, g.wo) {
                                let gv = gy[(co * g.ho + oy) * g.wo + ox];
                                acc += w[wbase + ky * k + kx] * gv;
                                gw[wbase + ky * k + kx] += (xv * gv).as_f64();
                            }
                        }
                    }
                }
                gx[xi] += acc;
            }
        }
    }
}

fn add_f64_into<S: Scalar>(dst: &mut Tensor<S>, src: &[f64]) {
    for (d, s) in dst.data_mut().iter_mut().zip(src) {
        *d += S::lit(*s);
    }
}

pub(crate) struct LayerIo<'a> {
    pub spec: &'a LayerSpec,
    pub at: LayerAt,
    pub input_shape: &'a [usize],
    pub output_shape: &'a [usize],
}

fn batch_shape(rows: usize, sample: &[usize]) -> Vec<usize> {
    let mut s = Vec::with_capacity(sample.len() + 1);
    s.push(rows);
    s.extend_from_slice(sample);
    s
}

pub(crate) fn forward<S: Scalar>(
    io: &LayerIo<'_>,
    stores: &mut [&mut ParamStore<S>],
    groups: &[Range<usize>],
    x: Tensor<S>,
    labels: Option<&[usize]>,
    mode: Mode,
) -> Result<(Tensor<S>, Option<LayerCache<S>>)> {
    let spec = io.spec;
    let at = io.at;
    let rows = x.rows();
    let train = mode == Mode::Train;
    match spec {
        LayerSpec::Dense { inputs, outputs } => {
            let mut y = Tensor::batch(rows, &[*outputs]);
            for (g, range) in groups.iter().enumerate() {
                let w = lookup(stores[g], at, spec, ParamName::Weight)?.value.data();
                let b = lookup(stores[g], at, spec, ParamName::Bias)?.value.data();
                for r in range.clone() {
                    let xr = x.row(r);
                    let yr = y.row_mut(r);
                    for o in 0..*outputs {
                        yr[o] = b[o] + dot(&w[o * inputs..(o + 1) * inputs], xr);
                    }
                }
            }
            Ok((y, train.then_some(LayerCache::Input(x))))
        }
        LayerSpec::Conv2d { .. } | LayerSpec::ConvTranspose2d { .. } => {
            let geom = ConvGeom::new(spec, io.input_shape, io.output_shape);
            let transpose = matches!(spec, LayerSpec::ConvTranspose2d { .. });
            let mut y = Tensor::batch(rows, io.output_shape);
            for (g, range) in groups.iter().enumerate() {
                let w = lookup(stores[g], at, spec, ParamName::Weight)?.value.data();
                let b = lookup(stores[g], at, spec, ParamName::Bias)?.value.data();
                for r in range.clone() {
                    if transpose {
                        convt_forward_row(&geom, w, b, x.row(r), y.row_mut(r));
                    } else {
                        conv_forward_row(&geom, w, b, x.row(r), y.row_mut(r));
                    }
                }
            }
            Ok((y, train.then_some(LayerCache::Input(x))))
        }
        LayerSpec::BatchNorm { eps, momentum } => {
            batchnorm_forward(io, stores, groups, x, mode, *eps, *momentum)
        }
        LayerSpec::Relu => {
            let y = x.map(|v| if v > S::zero() { v } else { S::zero() });
            Ok((y, train.then_some(LayerCache::Input(x))))
        }
        LayerSpec::LeakyRelu { slope } => {
            let s = S::lit(*slope);
            let y = x.map(|v| if v > S::zero() { v } else { v * s });
            Ok((y, train.then_some(LayerCache::Input(x))))
        }
        LayerSpec::Tanh => {
            let y = x.map(|v| v.tanh());
            let cache = train.then(|| LayerCache::Output(y.clone()));
            Ok((y, cache))
        }
        LayerSpec::Sigmoid => {
            let y = x.map(|v| S::one() / (S::one() + (-v).exp()));
            let cache = train.then(|| LayerCache::Output(y.clone()));
            Ok((y, cache))
        }
        LayerSpec::EmbedConcat { classes, dim, .. } => {
            let labels = labels.ok_or_else(|| Error::config(at.label(spec), "labels required"))?;
            if labels.len() != rows {
                return Err(Error::config(
                    at.label(spec),
                    format!("{} labels for {rows} rows", labels.len()),
                ));
            }
            if let Some(bad) = labels.iter().find(|&&l| l >= *classes) {
                return Err(Error::config(
                    at.label(spec),
                    format!("label {bad} outside {classes} classes"),
                ));
            }
            let in_len = x.row_len();
            let code_len = dim.unwrap_or(*classes);
            let mut y = Tensor::batch(rows, io.output_shape);
            for (g, range) in groups.iter().enumerate() {
                let table = match dim {
                    Some(_) => Some(lookup(stores[g], at, spec, ParamName::Table)?.value.data()),
                    None => None,
                };
                for r in range.clone() {
                    let yr = y.row_mut(r);
                    yr[..in_len].copy_from_slice(x.row(r));
                    let code = &mut yr[in_len..];
                    match table {
                        Some(t) => code.copy_from_slice(&t[labels[r] * code_len..(labels[r] + 1) * code_len]),
                        None => code[labels[r]] = S::one(),
                    }
                }
            }
            let cache = train.then(|| LayerCache::Embed {
                labels: labels.to_vec(),
                input_shape: x.shape().to_vec(),
            });
            Ok((y, cache))
        }
        LayerSpec::Flatten | LayerSpec::Reshape { .. } => {
            let in_shape = x.shape().to_vec();
            let y = x.reshape(&batch_shape(rows, io.output_shape));
            Ok((y, train.then_some(LayerCache::Shape(in_shape))))
        }
    }
}

pub(crate) fn backward<S: Scalar>(
    io: &LayerIo<'_>,
    stores: &mut [&mut ParamStore<S>],
    groups: &[Range<usize>],
    cache: LayerCache<S>,
    gy: Tensor<S>,
) -> Result<Tensor<S>> {
    let spec = io.spec;
    let at = io.at;
    let rows = gy.rows();
    match (spec, cache) {
        (LayerSpec::Dense { inputs, outputs }, LayerCache::Input(x)) => {
            let mut gx = Tensor::batch(rows, &[*inputs]);
            for (g, range) in groups.iter().enumerate() {
                let p = lookup_mut(stores[g], at, spec, ParamName::Weight)?;
                let (w, gw) = (p.value.data(), p.grad.data_mut());
                for r in range.clone() {
                    let xr = x.row(r);
                    let gyr = gy.row(r);
                    let gxr = gx.row_mut(r);
                    for o in 0..*outputs {
                        let gv = gyr[o];
                        if gv == S::zero() {
                            continue;
                        }
                        axpy(gxr, &w[o * inputs..(o + 1) * inputs], gv);
                        axpy(&mut gw[o * inputs..(o + 1) * inputs], xr, gv);
                    }
                }
                let gb = lookup_mut(stores[g], at, spec, ParamName::Bias)?.grad.data_mut();
                for r in range.clone() {
                    for (b, &v) in gb.iter_mut().zip(gy.row(r)) {
                        *b += v;
                    }
                }
            }
            Ok(gx)
        }
        (LayerSpec::Conv2d { .. } | LayerSpec::ConvTranspose2d { .. }, LayerCache::Input(x)) => {
            let geom = ConvGeom::new(spec, io.input_shape, io.output_shape);
            let transpose = matches!(spec, LayerSpec::ConvTranspose2d { .. });
            let mut gx = Tensor::batch(rows, io.input_shape);
            for (g, range) in groups.iter().enumerate() {
                let p = lookup_mut(stores[g], at, spec, ParamName::Weight)?;
                let mut gw = vec![0.0f64; p.value.len()];
                let mut gb = vec![0.0f64; geom.cout];
                for r in range.clone() {
                    let (xr, gyr) = (x.row(r), gy.row(r));
                    let gxr = gx.row_mut(r);
                    if transpose {
                        convt_backward_row(&geom, p.value.data(), xr, gyr, gxr, &mut gw, &mut gb);
                    } else {
                        conv_backward_row(&geom, p.value.data(), xr, gyr, gxr, &mut gw, &mut gb);
                    }
                }
                add_f64_into(&mut p.grad, &gw);
                let pb = lookup_mut(stores[g], at, spec, ParamName::Bias)?;
                add_f64_into(&mut pb.grad, &gb);
            }
            Ok(gx)
        }
        (LayerSpec::BatchNorm { .. }, LayerCache::BatchNorm { xhat, inv_std }) => {
            batchnorm_backward(io, stores, groups, xhat, &inv_std, gy)
        }
        (LayerSpec::Relu, LayerCache::Input(x)) => Ok(Tensor::from_vec(
            gy.shape(),
            gy.data()
                .iter()
                .zip(x.data())
                .map(|(&g, &v)| if v > S::zero() { g } else { S::zero() })
                .collect(),
        )),
        (LayerSpec::LeakyRelu { slope }, LayerCache::Input(x)) => {
            let s = S::lit(*slope);
            Ok(Tensor::from_vec(
                gy.shape(),
                gy.data()
                    .iter()
                    .zip(x.data())
                    .map(|(&g, &v)| if v > S::zero() { g } else { g * s })
                    .collect(),
            ))
        }
        (LayerSpec::Tanh, LayerCache::Output(y)) => Ok(Tensor::from_vec(
            gy.shape(),
            gy.data()
                .iter()
                .zip(y.data())
                .map(|(&g, &v)| g * (S::one() - v * v))
                .collect(),
        )),
        (LayerSpec::Sigmoid, LayerCache::Output(y)) => Ok(Tensor::from_vec(
            gy.shape(),
            gy.data()
                .iter()
                .zip(y.data())
                .map(|(&g, &v)| g * v * (S::one() - v))
                .collect(),
        )),
        (
            LayerSpec::EmbedConcat { classes, dim, .. },
            LayerCache::Embed {
                labels,
                input_shape,
            },
        ) => {
            let mut gx = Tensor::zeros(&input_shape);
            let in_len = gx.row_len();
            for r in 0..rows {
                gx.row_mut(r).copy_from_slice(&gy.row(r)[..in_len]);
            }
            if let Some(d) = dim {
                for (g, range) in groups.iter().enumerate() {
                    let p = lookup_mut(stores[g], at, spec, ParamName::Table)?;
                    debug_assert_eq!(p.grad.len(), classes * d);
                    let gt = p.grad.data_mut();
                    for r in range.clone() {
                        let l = labels[r];
                        for (t, &v) in gt[l * d..(l + 1) * d].iter_mut().zip(&gy.row(r)[in_len..]) {
                            *t += v;
                        }
                    }
                }
            }
            Ok(gx)
        }
        (LayerSpec::Flatten | LayerSpec::Reshape { .. }, LayerCache::Shape(shape)) => {
            Ok(gy.reshape(&shape))
        }
        (spec, _) => Err(Error::Usage(format!(
            "cache does not belong to {}",
            at.label(spec)
        ))),
    }
}

fn bn_dims(shape: &[usize]) -> (usize, usize, usize) {
    let rows = shape[0];
    let channels = shape[1];
    let spatial: usize = shape[2..].iter().product();
    (rows, channels, spatial)
}

fn batchnorm_forward<S: Scalar>(
    io: &LayerIo<'_>,
    stores: &mut [&mut ParamStore<S>],
    groups: &[Range<usize>],
    x: Tensor<S>,
    mode: Mode,
    eps: f64,
    momentum: f64,
) -> Result<(Tensor<S>, Option<LayerCache<S>>)> {
    let (spec, at) = (io.spec, io.at);
    let (rows, channels, spatial) = bn_dims(x.shape());
    let idx = |r: usize, c: usize, s: usize| (r * channels + c) * spatial + s;
    let mut y = Tensor::zeros(x.shape());

    if mode == Mode::Eval {
        for (g, range) in groups.iter().enumerate() {
            let gamma = lookup(stores[g], at, spec, ParamName::Gamma)?.value.data();
            let beta = lookup(stores[g], at, spec, ParamName::Beta)?.value.data();
            let mean = lookup(stores[g], at, spec, ParamName::RunningMean)?.value.data();
            let var = lookup(stores[g], at, spec, ParamName::RunningVar)?.value.data();
            for c in 0..channels {
                let inv = S::lit(1.0 / (var[c].as_f64() + eps).sqrt());
                for r in range.clone() {
                    for s in 0..spatial {
                        let i = idx(r, c, s);
                        y.data_mut()[i] = gamma[c] * (x.data()[i] - mean[c]) * inv + beta[c];
                    }
                }
            }
        }
        return Ok((y, None));
    }

    let n = (rows * spatial) as f64;
    let mut xhat = Tensor::zeros(x.shape());
    let mut inv_std = vec![0.0; channels];
    let mut means = vec![0.0; channels];
    let mut vars = vec![0.0; channels];
    for c in 0..channels {
        let mut sum = 0.0f64;
        for r in 0..rows {
            for s in 0..spatial {
                sum += x.data()[idx(r, c, s)].as_f64();
            }
        }
        let mean = sum / n;
        let mut sq = 0.0f64;
        for r in 0..rows {
            for s in 0..spatial {
                let d = x.data()[idx(r, c, s)].as_f64() - mean;
                sq += d * d;
            }
        }
        let var = sq / n;
        let inv = 1.0 / (var + eps).sqrt();
        for r in 0..rows {
            for s in 0..spatial {
                let i = idx(r, c, s);
                xhat.data_mut()[i] = S::lit((x.data()[i].as_f64() - mean) * inv);
            }
        }
        inv_std[c] = inv;
        means[c] = mean;
        vars[c] = if n > 1.0 { sq / (n - 1.0) } else { var };
    }
    for (g, range) in groups.iter().enumerate() {
        {
            let gamma = lookup(stores[g], at, spec, ParamName::Gamma)?.value.data();
            let beta = lookup(stores[g], at, spec, ParamName::Beta)?.value.data();
            for r in range.clone() {
                for c in 0..channels {
                    for s in 0..spatial {
                        let i = idx(r, c, s);
                        y.data_mut()[i] = gamma[c] * xhat.data()[i] + beta[c];
                    }
                }
            }
        }
        for (name, batch_stat) in [(ParamName::RunningMean, &means), (ParamName::RunningVar, &vars)] {
            let p = lookup_mut(stores[g], at, spec, name)?;
            for (run, &stat) in p.value.data_mut().iter_mut().zip(batch_stat.iter()) {
                *run = S::lit((1.0 - momentum) * run.as_f64() + momentum * stat);
            }
        }
    }
    Ok((y, Some(LayerCache::BatchNorm { xhat, inv_std })))
}

fn batchnorm_backward<S: Scalar>(
    io: &LayerIo<'_>,
    stores: &mut [&mut ParamStore<S>],
    groups: &[Range<usize>],
    xhat: Tensor<S>,
    inv_std: &[f64],
    gy: Tensor<S>,
) -> Result<Tensor<S>> {
    let (spec, at) = (io.spec, io.at);
    let (rows, channels, spatial) = bn_dims(gy.shape());
    let idx = |r: usize, c: usize, s: usize| (r * channels + c) * spatial + s;
    let n = (rows * spatial) as f64;

    // per-row gamma, since groups own their affine parameters
    let mut row_gamma = vec![vec![0.0f64; channels]; rows];
    for (g, range) in groups.iter().enumerate() {
        let p = lookup_mut(stores[g], at, spec, ParamName::Gamma)?;
        for r in range.clone() {
            for c in 0..channels {
                row_gamma[r][c] = p.value.data()[c].as_f64();
            }
        }
        let gg = p.grad.data_mut();
        for c in 0..channels {
            let mut acc = 0.0f64;
            for r in range.clone() {
                for s in 0..spatial {
                    let i = idx(r, c, s);
                    acc += gy.data()[i].as_f64() * xhat.data()[i].as_f64();
                }
            }
            gg[c] += S::lit(acc);
        }
        let gb = lookup_mut(stores[g], at, spec, ParamName::Beta)?.grad.data_mut();
        for c in 0..channels {
            let mut acc = 0.0f64;
            for r in range.clone() {
                for s in 0..spatial {
                    acc += gy.data()[idx(r, c, s)].as_f64();
                }
            }
            gb[c] += S::lit(acc);
        }
    }

    let mut gx = Tensor::zeros(gy.shape());
    for c in 0..channels {
        let mut sum_d = 0.0f64;
        let mut sum_dx = 0.0f64;
        for r in 0..rows {
            for s in 0..spatial {
                let i = idx(r, c, s);
                let d = gy.data()[i].as_f64() * row_gamma[r][c];
                sum_d += d;
                sum_dx += d * xhat.data()[i].as_f64();
            }
        }
        for r in 0..rows {
            for s in 0..spatial {
                let i = idx(r, c, s);
                let d = gy.data()[i].as_f64() * row_gamma[r][c];
                let xh = xhat.data()[i].as_f64();
                gx.data_mut()[i] = S::lit(inv_std[c] / n * (n * d - sum_d - xh * sum_dx));
            }
        }
    }
    Ok(gx)
}
