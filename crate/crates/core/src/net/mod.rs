//! Small fully convolutional classifiers built from GMR or dense
//! convolutions.
//!
//! Networks follow three construction rules: every convolution has
//! stride 1 with "same" padding, the only spatial downsampling is an
//! average pool followed by a 1×1 channel mix, and the head is a global
//! average pool plus a linear classifier. With GMR convolutions this makes
//! the logits invariant to quarter turns and flips of the input.

mod container;
mod data;
mod train;

pub use container::{
    load_network, network_from_bytes, network_to_bytes, read_network, save_network, write_network, NETWORK_MAGIC,
};
pub use data::{Dataset, RingShape, SyntheticDatasetSpec};
pub use train::{
    accuracy, evaluate, softmax_cross_entropy, train, AngleAccuracy, DemoConfig, DemoReport, TrainConfig, TrainLog,
    TwinReport,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::conv::{
    conv_direct, conv_direct_backward, gmr_conv_backward_with_basis, gmr_conv_tape, ConvConfig, GmrTape,
};
use crate::error::{GmrError, Result};
use crate::gmr_kernel::{default_rings, parameter_count, GmrLayerParams};
use crate::scalar::{gemm, Layout};
use crate::tensor::{avg_pool, Tensor};

/// Declarative description of one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    GmrConv {
        k: usize,
        n: usize,
        c_in: usize,
        c_out: usize,
        stride: usize,
    },
    DenseConv {
        k: usize,
        c_in: usize,
        c_out: usize,
        stride: usize,
    },
    Relu,
    /// non-overlapping average pool, then a 1×1 channel mix
    AvgPoolDownsample {
        window: usize,
        c_in: usize,
        c_out: usize,
    },
    GlobalAvgPool,
    LinearHead {
        c_in: usize,
        classes: usize,
    },
    Bias {
        channels: usize,
    },
}

/// A layer with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    GmrConv(GmrLayerParams),
    /// `(C_out, C_in, k, k)`
    DenseConv(Tensor),
    Relu,
    /// mix is `(C_out, C_in)`
    AvgPoolDownsample {
        window: usize,
        mix: Tensor,
    },
    GlobalAvgPool,
    /// `(classes, C_in)`
    LinearHead(Tensor),
    Bias(Tensor),
}

impl Layer {
    pub fn spec(&self) -> LayerSpec {
        match self {
            Layer::GmrConv(p) => {
                LayerSpec::GmrConv { k: p.geometry.k, n: p.geometry.n, c_in: p.c_in(), c_out: p.c_out(), stride: 1 }
            }
            Layer::DenseConv(k) => {
                let s = k.shape();
                LayerSpec::DenseConv { k: s[2], c_in: s[1], c_out: s[0], stride: 1 }
            }
            Layer::Relu => LayerSpec::Relu,
            Layer::AvgPoolDownsample { window, mix } => {
                LayerSpec::AvgPoolDownsample { window: *window, c_in: mix.shape()[1], c_out: mix.shape()[0] }
            }
            Layer::GlobalAvgPool => LayerSpec::GlobalAvgPool,
            Layer::LinearHead(w) => LayerSpec::LinearHead { c_in: w.shape()[1], classes: w.shape()[0] },
            Layer::Bias(b) => LayerSpec::Bias { channels: b.len() },
        }
    }

    pub fn parameter_count(&self) -> usize {
        match self {
            Layer::GmrConv(p) => parameter_count(p.c_in(), p.c_out(), &p.geometry).0,
            Layer::DenseConv(t) | Layer::LinearHead(t) | Layer::Bias(t) => t.len(),
            Layer::AvgPoolDownsample { mix, .. } => mix.len(),
            Layer::Relu | Layer::GlobalAvgPool => 0,
        }
    }
}

fn kaiming(shape: &[usize], fan_in: usize, gain: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let normal = Normal::new(0.0, (gain / fan_in as f64).sqrt()).expect("finite std");
    Tensor::from_fn(shape, |_| normal.sample(rng))
}

/// Rescales fan-in `c_in * n` weights to fan-in `c_in * sum_i (sum M_i)^2`,
/// the gain of the materialized kernel on slowly varying inputs. A dense
/// Kaiming kernel has the same gain there.
fn rescale_to_basis_energy(p: &mut GmrLayerParams) -> Result<()> {
    let basis = p.basis()?;
    let energy: f64 = (0..basis.n()).map(|i| basis.ring(i).iter().sum::<f64>().powi(2)).sum();
    let s = (basis.n() as f64 / energy).sqrt();
    p.weights.w.data_mut().iter_mut().for_each(|w| *w *= s);
    Ok(())
}

/// Where a tensor sits in the network: feature map or flat features.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Stage {
    Spatial(usize),
    Flat(usize),
}

impl LayerSpec {
    fn check(&self, stage: Stage) -> Result<Stage> {
        let want_spatial = |c: usize| match stage {
            Stage::Spatial(have) if have == c => Ok(()),
            Stage::Spatial(have) => Err(GmrError::ChannelMismatch { expected: c, got: have }),
            Stage::Flat(_) => Err(GmrError::Architecture(format!("{self:?} needs a feature map"))),
        };
        match *self {
            LayerSpec::GmrConv { k, n, c_in, c_out, stride } => {
                if stride != 1 {
                    return Err(GmrError::Architecture(format!(
                        "convolution stride {stride}: only stride 1 keeps equivariance"
                    )));
                }
                crate::gmr_kernel::ring_geometry(k, n, 2)?;
                want_spatial(c_in)?;
                Ok(Stage::Spatial(c_out))
            }
            LayerSpec::DenseConv { k, c_in, c_out, stride } => {
                if stride != 1 {
                    return Err(GmrError::Architecture(format!(
                        "convolution stride {stride}: only stride 1 is allowed"
                    )));
                }
                if k % 2 == 0 {
                    return Err(GmrError::UnsupportedWidth(k));
                }
                want_spatial(c_in)?;
                Ok(Stage::Spatial(c_out))
            }
            LayerSpec::Relu => Ok(stage),
            LayerSpec::AvgPoolDownsample { window, c_in, c_out } => {
                if window < 1 {
                    return Err(GmrError::Architecture("pool window must be positive".into()));
                }
                want_spatial(c_in)?;
                Ok(Stage::Spatial(c_out))
            }
            LayerSpec::GlobalAvgPool => match stage {
                Stage::Spatial(c) => Ok(Stage::Flat(c)),
                Stage::Flat(_) => Err(GmrError::Architecture("global pooling applied twice".into())),
            },
            LayerSpec::LinearHead { c_in, classes } => match stage {
                Stage::Flat(c) if c == c_in => Ok(Stage::Flat(classes)),
                Stage::Flat(c) => Err(GmrError::ChannelMismatch { expected: c_in, got: c }),
                Stage::Spatial(_) => Err(GmrError::Architecture("the head must follow global average pooling".into())),
            },
            LayerSpec::Bias { channels } => match stage {
                Stage::Spatial(c) | Stage::Flat(c) if c == channels => Ok(stage),
                Stage::Spatial(c) | Stage::Flat(c) => Err(GmrError::ChannelMismatch { expected: channels, got: c }),
            },
        }
    }
}

/// Checks a layer sequence against the construction rules and returns
/// the class count.
pub fn validate_specs(specs: &[LayerSpec], in_channels: usize) -> Result<usize> {
    let mut stage = Stage::Spatial(in_channels);
    for s in specs {
        stage = s.check(stage)?;
    }
    match stage {
        Stage::Flat(classes) => Ok(classes),
        Stage::Spatial(_) => Err(GmrError::Architecture("network must end in a pooled head".into())),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub in_channels: usize,
    pub layers: Vec<Layer>,
}

/// Per-layer parameter gradients, aligned with [`Network::layers`].
#[derive(Clone, Debug, PartialEq)]
pub enum LayerGrad {
    None,
    Gmr { weights: Tensor, log_sigma: Vec<f64> },
    Dense(Tensor),
}

enum Cache {
    None,
    Input(Tensor),
    Gmr { input: Tensor, basis: Tensor, tape: GmrTape<f64> },
    Pool { pooled: Tensor },
    Relu { mask: Vec<bool> },
    Gap { shape: Vec<usize> },
}

fn add_bias(x: &mut Tensor, b: &Tensor) {
    let c = b.len();
    let inner = x.len() / (x.shape()[0] * c);
    for (i, v) in x.data_mut().iter_mut().enumerate() {
        *v += b.data()[(i / inner) % c];
    }
}

/// `(B, C_in, P)` → `(B, C_out, P)` with a `(C_out, C_in)` matrix.
fn mix_channels(x: &Tensor, mix: &Tensor) -> Result<Tensor> {
    let (c_out, c_in) = (mix.shape()[0], mix.shape()[1]);
    if x.shape()[1] != c_in {
        return Err(GmrError::ChannelMismatch { expected: c_in, got: x.shape()[1] });
    }
    let b = x.shape()[0];
    let p = x.len() / (b * c_in);
    let mut shape = x.shape().to_vec();
    shape[1] = c_out;
    let mut out = Tensor::zeros(&shape);
    for (y, xb) in out.data_mut().chunks_exact_mut(c_out * p).zip(x.data().chunks_exact(c_in * p)) {
        gemm(c_out, c_in, p, mix.data(), Layout::Normal, xb, Layout::Normal, 0.0, y);
    }
    Ok(out)
}

impl Network {
    /// Builds a network from specs with Kaiming-style initialization.
    pub fn from_specs(specs: &[LayerSpec], in_channels: usize, seed: u64) -> Result<Self> {
        validate_specs(specs, in_channels)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = specs
            .iter()
            .enumerate()
            .map(|(i, s)| {
                Ok(match *s {
                    LayerSpec::GmrConv { k, n, c_in, c_out, .. } => {
                        let mut p = GmrLayerParams::init(k, n, 2, c_in, c_out, seed.wrapping_add(1 + i as u64))?;
                        rescale_to_basis_energy(&mut p)?;
                        Layer::GmrConv(p)
                    }
                    LayerSpec::DenseConv { k, c_in, c_out, .. } => {
                        Layer::DenseConv(kaiming(&[c_out, c_in, k, k], c_in * k * k, 2.0, &mut rng))
                    }
                    LayerSpec::Relu => Layer::Relu,
                    LayerSpec::AvgPoolDownsample { window, c_in, c_out } => {
                        Layer::AvgPoolDownsample { window, mix: kaiming(&[c_out, c_in], c_in, 2.0, &mut rng) }
                    }
                    LayerSpec::GlobalAvgPool => Layer::GlobalAvgPool,
                    LayerSpec::LinearHead { c_in, classes } => {
                        Layer::LinearHead(kaiming(&[classes, c_in], c_in, 1.0, &mut rng))
                    }
                    LayerSpec::Bias { channels } => Layer::Bias(Tensor::zeros(&[channels])),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { in_channels, layers })
    }

    /// Re-checks the construction rules against the current layers.
    pub fn validate(&self) -> Result<usize> {
        validate_specs(&self.specs(), self.in_channels)
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(Layer::spec).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(Layer::parameter_count).sum()
    }

    /// Logits `(B, classes)` for inputs `(B, C, H, W)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_cached(x, false)?.0)
    }

    fn forward_cached(&self, x: &Tensor, keep: bool) -> Result<(Tensor, Vec<Cache>)> {
        let mut h = x.clone();
        let mut caches = Vec::with_capacity(if keep { self.layers.len() } else { 0 });
        for layer in &self.layers {
            let (next, cache) = match layer {
                Layer::GmrConv(p) => {
                    let cfg = ConvConfig::same(p.geometry.k, 2);
                    let basis = p.basis()?.rings;
                    let (y, tape) = gmr_conv_tape(&h, &p.weights.w, &basis, &cfg)?;
                    (y, Cache::Gmr { input: h, basis, tape })
                }
                Layer::DenseConv(k) => {
                    let y = conv_direct(&h, k, &ConvConfig::same(k.shape()[2], 2))?;
                    (y, Cache::Input(h))
                }
                Layer::Relu => {
                    let mask: Vec<bool> = h.data().iter().map(|&v| v > 0.0).collect();
                    let y = h.map(|v| v.max(0.0));
                    (y, Cache::Relu { mask })
                }
                Layer::AvgPoolDownsample { window, mix } => {
                    let pooled = avg_pool(&h, *window)?;
                    let y = mix_channels(&pooled, mix)?;
                    (y, Cache::Pool { pooled })
                }
                Layer::GlobalAvgPool => {
                    let (b, c) = (h.shape()[0], h.shape()[1]);
                    let p = h.len() / (b * c);
                    let y = Tensor::from_fn(&[b, c], |i| h.data()[i * p..(i + 1) * p].iter().sum::<f64>() / p as f64);
                    (y, Cache::Gap { shape: h.shape().to_vec() })
                }
                Layer::LinearHead(w) => {
                    let y = mix_channels(&h.clone().reshape(&[h.shape()[0], h.shape()[1], 1])?, w)?;
                    let y = y.reshape(&[h.shape()[0], w.shape()[0]])?;
                    (y, Cache::Input(h))
                }
                Layer::Bias(b) => {
                    let mut y = h;
                    if y.shape()[1] != b.len() {
                        return Err(GmrError::ChannelMismatch { expected: b.len(), got: y.shape()[1] });
                    }
                    add_bias(&mut y, b);
                    (y, Cache::None)
                }
            };
            h = next;
            if keep {
                caches.push(cache);
            }
        }
        Ok((h, caches))
    }

    /// Forward pass plus parameter gradients of `Σ grad_logits · logits`.
    /// Returns the logits and one [`LayerGrad`] per layer.
    pub fn backward_with<F>(&self, x: &Tensor, grad_logits: F) -> Result<(Tensor, Vec<LayerGrad>)>
    where
        F: FnOnce(&Tensor) -> Result<Tensor>,
    {
        let (logits, caches) = self.forward_cached(x, true)?;
        let mut g = grad_logits(&logits)?;
        let mut grads = vec![LayerGrad::None; self.layers.len()];
        for (i, (layer, cache)) in self.layers.iter().zip(caches).enumerate().rev() {
            let need_input = i > 0;
            match (layer, cache) {
                (Layer::GmrConv(p), Cache::Gmr { input, basis, tape }) => {
                    let cfg = ConvConfig::same(p.geometry.k, 2);
                    let gr = gmr_conv_backward_with_basis(&input, &p.weights.w, &basis, &cfg, &g, Some(&tape))?;
                    let log_sigma = crate::conv::sigma_gradient(p, &gr.grad_basis)?;
                    grads[i] = LayerGrad::Gmr { weights: gr.grad_weights, log_sigma };
                    g = gr.grad_input;
                }
                (Layer::DenseConv(k), Cache::Input(input)) => {
                    let cfg = ConvConfig::same(k.shape()[2], 2);
                    let (gx, gk) = conv_direct_backward(&input, k, &cfg, &g)?;
                    grads[i] = LayerGrad::Dense(gk);
                    g = gx;
                }
                (Layer::Relu, Cache::Relu { mask }) => {
                    for (v, m) in g.data_mut().iter_mut().zip(mask) {
                        if !m {
                            *v = 0.0;
                        }
                    }
                }
                (Layer::AvgPoolDownsample { window, mix }, Cache::Pool { pooled }) => {
                    let (c_out, c_in) = (mix.shape()[0], mix.shape()[1]);
                    let b = g.shape()[0];
                    let p = g.len() / (b * c_out);
                    let mut gmix = Tensor::zeros(mix.shape());
                    let mut gpooled = Tensor::zeros(pooled.shape());
                    for bi in 0..b {
                        let gy = &g.data()[bi * c_out * p..(bi + 1) * c_out * p];
                        let xb = &pooled.data()[bi * c_in * p..(bi + 1) * c_in * p];
                        gemm(c_out, p, c_in, gy, Layout::Normal, xb, Layout::Transposed, 1.0, gmix.data_mut());
                        gemm(
                            c_in,
                            c_out,
                            p,
                            mix.data(),
                            Layout::Transposed,
                            gy,
                            Layout::Normal,
                            0.0,
                            &mut gpooled.data_mut()[bi * c_in * p..(bi + 1) * c_in * p],
                        );
                    }
                    grads[i] = LayerGrad::Dense(gmix);
                    if need_input {
                        g = unpool(&gpooled, *window)?;
                    }
                }
                (Layer::GlobalAvgPool, Cache::Gap { shape }) => {
                    let (b, c) = (shape[0], shape[1]);
                    let p: usize = shape[2..].iter().product();
                    let scale = 1.0 / p as f64;
                    let gd = g.data().to_vec();
                    g = Tensor::from_fn(&shape, |i| gd[(i / p) % (b * c)] * scale);
                }
                (Layer::LinearHead(w), Cache::Input(input)) => {
                    let (classes, c_in) = (w.shape()[0], w.shape()[1]);
                    let b = input.shape()[0];
                    let mut gw = Tensor::zeros(w.shape());
                    gemm(
                        classes,
                        b,
                        c_in,
                        g.data(),
                        Layout::Transposed,
                        input.data(),
                        Layout::Normal,
                        0.0,
                        gw.data_mut(),
                    );
                    let mut gx = Tensor::zeros(&[b, c_in]);
                    gemm(b, classes, c_in, g.data(), Layout::Normal, w.data(), Layout::Normal, 0.0, gx.data_mut());
                    grads[i] = LayerGrad::Dense(gw);
                    g = gx;
                }
                (Layer::Bias(bias), Cache::None) => {
                    let c = bias.len();
                    let inner = g.len() / (g.shape()[0] * c);
                    let mut gb = Tensor::zeros(&[c]);
                    for (j, v) in g.data().iter().enumerate() {
                        gb.data_mut()[(j / inner) % c] += v;
                    }
                    grads[i] = LayerGrad::Dense(gb);
                }
                _ => unreachable!("cache kind always matches its layer"),
            }
        }
        Ok((logits, grads))
    }

    /// Mutable views of every trainable array, in a fixed order, for the
    /// optimizer.
    pub(crate) fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::GmrConv(p) => {
                    out.push(p.weights.w.data_mut());
                    out.push(&mut p.sigma.log_sigma);
                }
                Layer::DenseConv(t) | Layer::LinearHead(t) | Layer::Bias(t) => out.push(t.data_mut()),
                Layer::AvgPoolDownsample { mix, .. } => out.push(mix.data_mut()),
                Layer::Relu | Layer::GlobalAvgPool => {}
            }
        }
        out
    }

    pub(crate) fn clip_sigmas(&mut self) {
        for layer in &mut self.layers {
            if let Layer::GmrConv(p) = layer {
                p.clip();
            }
        }
    }
}

impl LayerGrad {
    /// Flat gradient arrays aligned with `Network::params_mut`.
    pub(crate) fn arrays(&self) -> Vec<&[f64]> {
        match self {
            LayerGrad::None => vec![],
            LayerGrad::Gmr { weights, log_sigma } => vec![weights.data(), log_sigma],
            LayerGrad::Dense(t) => vec![t.data()],
        }
    }
}

/// Adjoint of non-overlapping average pooling.
fn unpool(g: &Tensor, window: usize) -> Result<Tensor> {
    let s = g.shape();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (oh, ow) = (h * window, w * window);
    let scale = 1.0 / (window * window) as f64;
    let mut out = Vec::with_capacity(b * c * oh * ow);
    for plane in g.data().chunks(h * w) {
        for y in 0..oh {
            let row = &plane[(y / window) * w..(y / window + 1) * w];
            out.extend((0..ow).map(|x| row[x / window] * scale));
        }
    }
    Tensor::new(&[b, c, oh, ow], out)
}

/// The conv kind used by one twin.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvKind {
    Gmr,
    Dense,
}

/// Three-stage twin topology: conv(k_large) → relu → pool-downsample,
/// twice, then conv(k_small) → relu → global pool → linear head.
/// `widths` are `(k_large, k_small)`.
pub fn twin_specs(kind: ConvKind, base_channels: usize, classes: usize, widths: (usize, usize)) -> Vec<LayerSpec> {
    let c = base_channels;
    let conv = |k: usize, c_in: usize, c_out: usize| match kind {
        ConvKind::Gmr => LayerSpec::GmrConv { k, n: default_rings(k), c_in, c_out, stride: 1 },
        ConvKind::Dense => LayerSpec::DenseConv { k, c_in, c_out, stride: 1 },
    };
    let (kl, ks) = widths;
    vec![
        conv(kl, 1, c),
        LayerSpec::Bias { channels: c },
        LayerSpec::Relu,
        LayerSpec::AvgPoolDownsample { window: 2, c_in: c, c_out: c },
        conv(kl, c, 2 * c),
        LayerSpec::Bias { channels: 2 * c },
        LayerSpec::Relu,
        LayerSpec::AvgPoolDownsample { window: 2, c_in: 2 * c, c_out: 2 * c },
        conv(ks, 2 * c, 2 * c),
        LayerSpec::Bias { channels: 2 * c },
        LayerSpec::Relu,
        LayerSpec::GlobalAvgPool,
        LayerSpec::LinearHead { c_in: 2 * c, classes },
        LayerSpec::Bias { channels: classes },
    ]
}

/// GMR twin (k = 9 then 5) and a dense twin of the same topology using
/// the conventional k = 3 everywhere.
pub fn build_twin_networks(base_channels: usize, classes: usize, seed: u64) -> Result<(Network, Network)> {
    let gmr = Network::from_specs(&twin_specs(ConvKind::Gmr, base_channels, classes, (9, 5)), 1, seed)?;
    let dense = Network::from_specs(&twin_specs(ConvKind::Dense, base_channels, classes, (3, 3)), 1, seed)?;
    Ok((gmr, dense))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{flip, rel_error, rot90};

    #[test]
    fn construction_rejects_stride_and_bad_chains() {
        let bad = [LayerSpec::GmrConv { k: 5, n: 3, c_in: 1, c_out: 2, stride: 2 }];
        assert!(matches!(validate_specs(&bad, 1), Err(GmrError::Architecture(_))));
        let bad = [LayerSpec::DenseConv { k: 3, c_in: 1, c_out: 2, stride: 2 }];
        assert!(matches!(validate_specs(&bad, 1), Err(GmrError::Architecture(_))));
        let bad = [LayerSpec::DenseConv { k: 3, c_in: 2, c_out: 2, stride: 1 }];
        assert!(matches!(validate_specs(&bad, 1), Err(GmrError::ChannelMismatch { .. })));
        let bad = [LayerSpec::LinearHead { c_in: 1, classes: 2 }];
        assert!(matches!(validate_specs(&bad, 1), Err(GmrError::Architecture(_))));
        let bad = [LayerSpec::Relu];
        assert!(validate_specs(&bad, 1).is_err());
        assert_eq!(validate_specs(&twin_specs(ConvKind::Gmr, 4, 3, (9, 5)), 1).unwrap(), 3);
    }

    #[test]
    fn twins_share_topology_and_gmr_is_smaller() {
        for c in [16, 24, 32] {
            let (g, d) = build_twin_networks(c, 4, 1).unwrap();
            assert_eq!(g.layers.len(), d.layers.len());
            assert!(g.parameter_count() < d.parameter_count(), "c={c}");
        }
    }

    #[test]
    fn logits_are_finite_and_gmr_logits_invariant() {
        let (g, d) = build_twin_networks(4, 4, 3).unwrap();
        let x = Tensor::randn(&[2, 1, 24, 24], &mut ChaCha8Rng::seed_from_u64(1));
        let lg = g.forward(&x).unwrap();
        let ld = d.forward(&x).unwrap();
        assert_eq!(lg.shape(), &[2, 4]);
        assert!(lg.data().iter().chain(ld.data()).all(|v| v.is_finite()));
        let r = g.forward(&rot90(&x, 1, (2, 3)).unwrap()).unwrap();
        assert!(rel_error(&r, &lg).unwrap() <= 1e-8);
        let f = g.forward(&flip(&x, 3).unwrap()).unwrap();
        assert!(rel_error(&f, &lg).unwrap() <= 1e-8);
    }

    #[test]
    fn unpool_is_adjoint_of_avg_pool() {
        let x = Tensor::from_fn(&[1, 2, 4, 6], |i| (i as f64 * 0.37).sin());
        let g = Tensor::from_fn(&[1, 2, 2, 3], |i| (i as f64 * 0.91).cos());
        let lhs: f64 = avg_pool(&x, 2).unwrap().data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(unpool(&g, 2).unwrap().data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-14);
    }

    #[test]
    fn specs_round_trip_through_json() {
        let s = twin_specs(ConvKind::Gmr, 4, 4, (9, 5));
        let j = serde_json::to_string(&s).unwrap();
        assert!(j.contains("\"kind\":\"gmr_conv\""));
        let back: Vec<LayerSpec> = serde_json::from_str(&j).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn network_gradients_match_finite_differences() {
        for kind in [ConvKind::Gmr, ConvKind::Dense] {
            let mut net = Network::from_specs(&twin_specs(kind, 2, 3, (5, 3)), 1, 4).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let x = Tensor::randn(&[2, 1, 12, 12], &mut rng);
            let target = Tensor::randn(&[2, 3], &mut rng);
            let loss = |n: &Network| {
                let y = n.forward(&x).unwrap();
                0.5 * y.data().iter().zip(target.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
            };
            let (_, grads) = net.backward_with(&x, |y| Ok(y.zip_map(&target, |a, b| a - b).unwrap())).unwrap();
            let flat: Vec<Vec<f64>> = grads.iter().flat_map(|g| g.arrays()).map(|a| a.to_vec()).collect();
            for (a, grad) in flat.iter().enumerate() {
                let len = grad.len();
                for j in [0, len / 2, len - 1] {
                    let h = 1e-5;
                    net.params_mut()[a][j] += h;
                    let lp = loss(&net);
                    net.params_mut()[a][j] -= 2.0 * h;
                    let lm = loss(&net);
                    net.params_mut()[a][j] += h;
                    let fd = (lp - lm) / (2.0 * h);
                    let an = grad[j];
                    assert!((fd - an).abs() <= 1e-5 * (1.0 + an.abs()), "{kind:?} array {a} idx {j}: fd {fd} vs {an}");
                }
            }
        }
    }
}
