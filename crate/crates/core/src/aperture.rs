//! Aperture stage: an encoder-decoder whose skip connections are gated by
//! spatial and channel attention conditioned on the input and output
//! f-numbers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::nn::layers::{ActivationLayer, Conv2d, Module};
use crate::nn::ops::{self, Activation};
use crate::nn::optim::Parameter;
use crate::nn::tensor::Tensor;
use crate::nn::unet::{Conditioning, SkipGate, UNet, UNetConfig};
use crate::noise::{add_residual, full_frame_residual, image_tensor};
use crate::raw::{RawImage, PLANES};
use crate::training::{train_residual_net, LossCurve, StageSchedule, TrainSample};

/// f-numbers are divided by this before entering the network.
pub const F_NUMBER_SCALE: f64 = 22.0;
/// Variance guard of the adaptive layer's normalization.
pub const ADAPTIVE_EPS: f64 = 1e-5;
/// Squeeze ratio of the channel branch.
pub const CHANNEL_REDUCTION: usize = 4;

/// Normalized conditioning pair for f-numbers `n_in → n_out`.
pub fn aperture_conditioning(n_in: f64, n_out: f64) -> Conditioning {
    [n_in / F_NUMBER_SCALE, n_out / F_NUMBER_SCALE]
}

#[derive(Debug, Clone)]
struct AdaptiveCache {
    xhat: Tensor,
    /// `sqrt(var + eps)` per (sample, channel).
    std: Vec<f64>,
    gamma: Vec<f64>,
    cond: Vec<Conditioning>,
}

/// Instance normalization whose scale and shift are affine in the
/// conditioning pair: `y = (W_σ·c + b_σ)·x̂ + (W_μ·c + b_μ)`.
#[derive(Debug, Clone)]
pub struct AdaptiveApertureLayer {
    /// `[1, 1, 2, C]`.
    pub w_sigma: Parameter,
    /// `[1, 1, 1, C]`.
    pub b_sigma: Parameter,
    pub w_mu: Parameter,
    pub b_mu: Parameter,
    cache: Option<AdaptiveCache>,
}

impl AdaptiveApertureLayer {
    /// Zero conditioning weights, unit scale and zero shift, i.e. plain
    /// instance normalization.
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            w_sigma: Parameter::new(format!("{name}.w_sigma"), Tensor::zeros([1, 1, 2, channels])),
            b_sigma: Parameter::new(format!("{name}.b_sigma"), Tensor::full([1, 1, 1, channels], 1.0)),
            w_mu: Parameter::new(format!("{name}.w_mu"), Tensor::zeros([1, 1, 2, channels])),
            b_mu: Parameter::new(format!("{name}.b_mu"), Tensor::zeros([1, 1, 1, channels])),
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.b_sigma.value.channels()
    }

    fn modulation(&self, cond: &Conditioning) -> (Vec<f64>, Vec<f64>) {
        let c = self.channels();
        let ws = self.w_sigma.value.data();
        let wm = self.w_mu.value.data();
        let gamma = (0..c)
            .map(|k| ws[k] * cond[0] + ws[c + k] * cond[1] + self.b_sigma.value.data()[k])
            .collect();
        let beta = (0..c)
            .map(|k| wm[k] * cond[0] + wm[c + k] * cond[1] + self.b_mu.value.data()[k])
            .collect();
        (gamma, beta)
    }

    pub fn forward(&mut self, x: &Tensor, cond: &[Conditioning]) -> Result<Tensor> {
        let [n, h, w, c] = x.shape();
        if c != self.channels() {
            return Err(Error::dim(format!("adaptive layer has {} channels, input {c}", self.channels())));
        }
        if cond.len() != n {
            return Err(Error::dim(format!("{} conditioning pairs for a batch of {n}", cond.len())));
        }
        let hw = (h * w) as f64;
        let mut xhat = Tensor::zeros(x.shape());
        let mut out = Tensor::zeros(x.shape());
        let mut std = vec![0.0; n * c];
        let mut gammas = vec![0.0; n * c];
        for b in 0..n {
            let (gamma, beta) = self.modulation(&cond[b]);
            for k in 0..c {
                let mut mean = 0.0;
                for y in 0..h {
                    for xx in 0..w {
                        mean += x.at(b, y, xx, k);
                    }
                }
                mean /= hw;
                let mut var = 0.0;
                for y in 0..h {
                    for xx in 0..w {
                        var += (x.at(b, y, xx, k) - mean).powi(2);
                    }
                }
                let s = (var / hw + ADAPTIVE_EPS).sqrt();
                for y in 0..h {
                    for xx in 0..w {
                        let i = x.index(b, y, xx, k);
                        let v = (x.data()[i] - mean) / s;
                        xhat.data_mut()[i] = v;
                        out.data_mut()[i] = gamma[k] * v + beta[k];
                    }
                }
                std[b * c + k] = s;
                gammas[b * c + k] = gamma[k];
            }
        }
        self.cache = Some(AdaptiveCache {
            xhat,
            std,
            gamma: gammas,
            cond: cond.to_vec(),
        });
        Ok(out)
    }

    pub fn backward(&mut self, g: &Tensor) -> Result<Tensor> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::State("adaptive layer backward before forward".into()))?;
        cache.xhat.ensure_shape(g)?;
        let [n, h, w, c] = g.shape();
        let hw = (h * w) as f64;
        let mut dx = Tensor::zeros(g.shape());
        let mut dws = Tensor::zeros([1, 1, 2, c]);
        let mut dbs = Tensor::zeros([1, 1, 1, c]);
        let mut dwm = Tensor::zeros([1, 1, 2, c]);
        let mut dbm = Tensor::zeros([1, 1, 1, c]);
        for b in 0..n {
            let cond = cache.cond[b];
            for k in 0..c {
                let (mut d_beta, mut d_gamma) = (0.0, 0.0);
                for y in 0..h {
                    for xx in 0..w {
                        let i = g.index(b, y, xx, k);
                        d_beta += g.data()[i];
                        d_gamma += g.data()[i] * cache.xhat.data()[i];
                    }
                }
                dws.data_mut()[k] += d_gamma * cond[0];
                dws.data_mut()[c + k] += d_gamma * cond[1];
                dbs.data_mut()[k] += d_gamma;
                dwm.data_mut()[k] += d_beta * cond[0];
                dwm.data_mut()[c + k] += d_beta * cond[1];
                dbm.data_mut()[k] += d_beta;
                let gamma = cache.gamma[b * c + k];
                let s = cache.std[b * c + k];
                // With dx̂ = γ·g: mean(dx̂) = γ·d_beta/hw, mean(dx̂·x̂) = γ·d_gamma/hw.
                let m1 = gamma * d_beta / hw;
                let m2 = gamma * d_gamma / hw;
                for y in 0..h {
                    for xx in 0..w {
                        let i = g.index(b, y, xx, k);
                        let xh = cache.xhat.data()[i];
                        dx.data_mut()[i] = (gamma * g.data()[i] - m1 - xh * m2) / s;
                    }
                }
            }
        }
        self.w_sigma.accumulate(&dws)?;
        self.b_sigma.accumulate(&dbs)?;
        self.w_mu.accumulate(&dwm)?;
        self.b_mu.accumulate(&dbm)?;
        Ok(dx)
    }
}

impl Module for AdaptiveApertureLayer {
    fn parameters(&self) -> Vec<&Parameter> {
        vec![&self.w_sigma, &self.b_sigma, &self.w_mu, &self.b_mu]
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.w_sigma, &mut self.b_sigma, &mut self.w_mu, &mut self.b_mu]
    }
}

/// `F_l · β_s · β_c` with `β_s: [N,H,W,1]` broadcast over channels and
/// `β_c: [N,1,1,C]` broadcast over space.
pub fn apply_attention(f: &Tensor, beta_s: &Tensor, beta_c: &Tensor) -> Result<Tensor> {
    let [n, h, w, c] = f.shape();
    if beta_s.shape() != [n, h, w, 1] || beta_c.shape() != [n, 1, 1, c] {
        return Err(Error::dim(format!(
            "attention maps {:?} and {:?} do not broadcast to {:?}",
            beta_s.shape(),
            beta_c.shape(),
            f.shape()
        )));
    }
    Ok(Tensor::from_fn(f.shape(), |b, y, x, k| {
        f.at(b, y, x, k) * beta_s.at(b, y, x, 0) * beta_c.at(b, 0, 0, k)
    }))
}

/// Bias-free 1×1 convolution. Used in front of instance normalization,
/// which would cancel a bias exactly.
#[derive(Debug, Clone)]
pub struct Projection {
    pub weight: Parameter,
    input: Option<Tensor>,
}

impl Projection {
    pub fn new<R: Rng>(name: &str, cin: usize, cout: usize, rng: &mut R) -> Self {
        let std = (2.0 / cin as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        Self {
            weight: Parameter::new(
                format!("{name}.weight"),
                Tensor::from_fn([1, 1, cin, cout], |_, _, _, _| normal.sample(rng)),
            ),
            input: None,
        }
    }

    fn zero_bias(&self) -> Tensor {
        Tensor::zeros([1, 1, 1, self.weight.value.shape()[3]])
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        ops::conv2d(x, &self.weight.value, &self.zero_bias(), 1, 0)
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let y = self.apply(x)?;
        self.input = Some(x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, g: &Tensor) -> Result<Tensor> {
        let x = self
            .input
            .take()
            .ok_or_else(|| Error::State(format!("{}: backward before forward", self.weight.name)))?;
        let (dx, dw, _) = ops::conv2d_backward(&x, &self.weight.value, 1, 0, g)?;
        self.weight.accumulate(&dw)?;
        Ok(dx)
    }
}

impl Module for Projection {
    fn parameters(&self) -> Vec<&Parameter> {
        vec![&self.weight]
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.weight]
    }
}

/// Spatial attention: two projections with adaptive normalization, summed,
/// ReLU, then a projection to one channel, adaptive normalization and
/// sigmoid.
#[derive(Debug, Clone)]
pub struct SpatialBranch {
    pub proj_skip: Projection,
    pub norm_skip: AdaptiveApertureLayer,
    pub proj_gating: Projection,
    pub norm_gating: AdaptiveApertureLayer,
    relu: ActivationLayer,
    pub proj_out: Projection,
    pub norm_out: AdaptiveApertureLayer,
    sigmoid: ActivationLayer,
}

impl SpatialBranch {
    pub fn new<R: Rng>(name: &str, skip_c: usize, gating_c: usize, inter_c: usize, rng: &mut R) -> Self {
        Self {
            proj_skip: Projection::new(&format!("{name}.proj_skip"), skip_c, inter_c, rng),
            norm_skip: AdaptiveApertureLayer::new(&format!("{name}.norm_skip"), inter_c),
            proj_gating: Projection::new(&format!("{name}.proj_gating"), gating_c, inter_c, rng),
            norm_gating: AdaptiveApertureLayer::new(&format!("{name}.norm_gating"), inter_c),
            relu: ActivationLayer::new(Activation::Relu),
            proj_out: Projection::new(&format!("{name}.proj_out"), inter_c, 1, rng),
            norm_out: AdaptiveApertureLayer::new(&format!("{name}.norm_out"), 1),
            sigmoid: ActivationLayer::new(Activation::Sigmoid),
        }
    }

    /// Returns `β_s` of shape `[N, H, W, 1]`.
    pub fn forward(&mut self, skip: &Tensor, gating: &Tensor, cond: &[Conditioning]) -> Result<Tensor> {
        let a = self.proj_skip.forward(skip)?;
        let a = self.norm_skip.forward(&a, cond)?;
        let b = self.proj_gating.forward(gating)?;
        let b = self.norm_gating.forward(&b, cond)?;
        let u = self.relu.forward(&a.add(&b)?);
        let p = self.proj_out.forward(&u)?;
        let p = self.norm_out.forward(&p, cond)?;
        Ok(self.sigmoid.forward(&p))
    }

    /// Returns `(d_skip, d_gating)`.
    pub fn backward(&mut self, g: &Tensor) -> Result<(Tensor, Tensor)> {
        let g = self.sigmoid.backward(g)?;
        let g = self.norm_out.backward(&g)?;
        let g = self.proj_out.backward(&g)?;
        let g = self.relu.backward(&g)?;
        let ga = self.norm_skip.backward(&g)?;
        let d_skip = self.proj_skip.backward(&ga)?;
        let gb = self.norm_gating.backward(&g)?;
        let d_gating = self.proj_gating.backward(&gb)?;
        Ok((d_skip, d_gating))
    }
}

impl Module for SpatialBranch {
    fn parameters(&self) -> Vec<&Parameter> {
        let mut v = self.proj_skip.parameters();
        v.extend(self.norm_skip.parameters());
        v.extend(self.proj_gating.parameters());
        v.extend(self.norm_gating.parameters());
        v.extend(self.proj_out.parameters());
        v.extend(self.norm_out.parameters());
        v
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v = self.proj_skip.parameters_mut();
        v.extend(self.norm_skip.parameters_mut());
        v.extend(self.proj_gating.parameters_mut());
        v.extend(self.norm_gating.parameters_mut());
        v.extend(self.proj_out.parameters_mut());
        v.extend(self.norm_out.parameters_mut());
        v
    }
}

/// Channel attention: both inputs projected to the skip width, summed,
/// ReLU, pooled, then squeeze and excitation with a sigmoid.
#[derive(Debug, Clone)]
pub struct ChannelBranch {
    pub proj_skip: Conv2d,
    pub proj_gating: Conv2d,
    relu: ActivationLayer,
    pooled_shape: Option<[usize; 4]>,
    pub squeeze: Conv2d,
    relu_mid: ActivationLayer,
    pub excite: Conv2d,
    sigmoid: ActivationLayer,
}

impl ChannelBranch {
    pub fn new<R: Rng>(name: &str, skip_c: usize, gating_c: usize, rng: &mut R) -> Self {
        let mid = (skip_c / CHANNEL_REDUCTION).max(1);
        Self {
            proj_skip: Conv2d::new(&format!("{name}.proj_skip"), 1, skip_c, skip_c, rng),
            proj_gating: Conv2d::new(&format!("{name}.proj_gating"), 1, gating_c, skip_c, rng),
            relu: ActivationLayer::new(Activation::Relu),
            pooled_shape: None,
            squeeze: Conv2d::new(&format!("{name}.squeeze"), 1, skip_c, mid, rng),
            relu_mid: ActivationLayer::new(Activation::Relu),
            excite: Conv2d::new(&format!("{name}.excite"), 1, mid, skip_c, rng),
            sigmoid: ActivationLayer::new(Activation::Sigmoid),
        }
    }

    /// Returns `β_c` of shape `[N, 1, 1, C]`.
    pub fn forward(&mut self, skip: &Tensor, gating: &Tensor) -> Result<Tensor> {
        let a = self.proj_skip.forward(skip)?;
        let b = self.proj_gating.forward(gating)?;
        let u = self.relu.forward(&a.add(&b)?);
        self.pooled_shape = Some(u.shape());
        let v = ops::global_avg_pool(&u);
        let e = self.squeeze.forward(&v)?;
        let e = self.relu_mid.forward(&e);
        let e = self.excite.forward(&e)?;
        Ok(self.sigmoid.forward(&e))
    }

    pub fn backward(&mut self, g: &Tensor) -> Result<(Tensor, Tensor)> {
        let shape = self
            .pooled_shape
            .take()
            .ok_or_else(|| Error::State("channel branch backward before forward".into()))?;
        let g = self.sigmoid.backward(g)?;
        let g = self.excite.backward(&g)?;
        let g = self.relu_mid.backward(&g)?;
        let g = self.squeeze.backward(&g)?;
        let g = ops::global_avg_pool_backward(shape, &g);
        let g = self.relu.backward(&g)?;
        let d_skip = self.proj_skip.backward(&g)?;
        let d_gating = self.proj_gating.backward(&g)?;
        Ok((d_skip, d_gating))
    }
}

impl Module for ChannelBranch {
    fn parameters(&self) -> Vec<&Parameter> {
        let mut v = self.proj_skip.parameters();
        v.extend(self.proj_gating.parameters());
        v.extend(self.squeeze.parameters());
        v.extend(self.excite.parameters());
        v
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v = self.proj_skip.parameters_mut();
        v.extend(self.proj_gating.parameters_mut());
        v.extend(self.squeeze.parameters_mut());
        v.extend(self.excite.parameters_mut());
        v
    }
}

#[derive(Debug, Clone)]
struct GateCache {
    skip: Tensor,
    beta_s: Tensor,
    beta_c: Tensor,
}

/// Skip gate combining both attention branches multiplicatively.
#[derive(Debug, Clone)]
pub struct AttentionGate {
    pub spatial: SpatialBranch,
    pub channel: ChannelBranch,
    cache: Option<GateCache>,
}

impl AttentionGate {
    pub fn new<R: Rng>(name: &str, skip_c: usize, gating_c: usize, rng: &mut R) -> Self {
        let inter = (skip_c / 2).max(1);
        Self {
            spatial: SpatialBranch::new(&format!("{name}.spatial"), skip_c, gating_c, inter, rng),
            channel: ChannelBranch::new(&format!("{name}.channel"), skip_c, gating_c, rng),
            cache: None,
        }
    }

    /// Attention maps of the most recent forward pass.
    pub fn last_maps(&self) -> Option<(&Tensor, &Tensor)> {
        self.cache.as_ref().map(|c| (&c.beta_s, &c.beta_c))
    }
}

impl Module for AttentionGate {
    fn parameters(&self) -> Vec<&Parameter> {
        let mut v = self.spatial.parameters();
        v.extend(self.channel.parameters());
        v
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v = self.spatial.parameters_mut();
        v.extend(self.channel.parameters_mut());
        v
    }
}

impl SkipGate for AttentionGate {
    fn forward(&mut self, skip: &Tensor, gating: &Tensor, cond: &[Conditioning]) -> Result<Tensor> {
        if skip.shape()[..3] != gating.shape()[..3] {
            return Err(Error::dim(format!(
                "gating signal {:?} not aligned with skip {:?}",
                gating.shape(),
                skip.shape()
            )));
        }
        let beta_s = self.spatial.forward(skip, gating, cond)?;
        let beta_c = self.channel.forward(skip, gating)?;
        let out = apply_attention(skip, &beta_s, &beta_c)?;
        self.cache = Some(GateCache {
            skip: skip.clone(),
            beta_s,
            beta_c,
        });
        Ok(out)
    }

    fn backward(&mut self, g: &Tensor) -> Result<(Tensor, Tensor)> {
        let GateCache { skip, beta_s, beta_c } = self
            .cache
            .take()
            .ok_or_else(|| Error::State("attention gate backward before forward".into()))?;
        skip.ensure_shape(g)?;
        let [n, h, w, c] = skip.shape();
        let mut d_skip = Tensor::zeros(skip.shape());
        let mut d_bs = Tensor::zeros(beta_s.shape());
        let mut d_bc = Tensor::zeros(beta_c.shape());
        for b in 0..n {
            for y in 0..h {
                for x in 0..w {
                    let bs = beta_s.at(b, y, x, 0);
                    let mut acc = 0.0;
                    for k in 0..c {
                        let i = skip.index(b, y, x, k);
                        let bc = beta_c.at(b, 0, 0, k);
                        let gf = g.data()[i] * skip.data()[i];
                        d_skip.data_mut()[i] = g.data()[i] * bs * bc;
                        acc += gf * bc;
                        let j = beta_c.index(b, 0, 0, k);
                        d_bc.data_mut()[j] += gf * bs;
                    }
                    let j = beta_s.index(b, y, x, 0);
                    d_bs.data_mut()[j] = acc;
                }
            }
        }
        let (ds_skip, ds_gating) = self.spatial.backward(&d_bs)?;
        let (dc_skip, dc_gating) = self.channel.backward(&d_bc)?;
        d_skip.add_assign(&ds_skip)?;
        d_skip.add_assign(&dc_skip)?;
        let d_gating = ds_gating.add(&dc_gating)?;
        Ok((d_skip, d_gating))
    }
}

/// Residual aperture network on `I ⊕ n₁/22 ⊕ n₂/22` (6 channels).
#[derive(Debug, Clone)]
pub struct ApertureNet {
    net: UNet<AttentionGate>,
}

impl ApertureNet {
    pub fn default_config() -> UNetConfig {
        UNetConfig {
            in_channels: PLANES + 2,
            out_channels: PLANES,
            base_width: 16,
            levels: 3,
        }
    }

    pub fn new(seed: u64) -> Self {
        Self::with_config(Self::default_config(), seed).expect("default config is valid")
    }

    pub fn with_config(config: UNetConfig, seed: u64) -> Result<Self> {
        if config.in_channels != PLANES + 2 || config.out_channels != PLANES {
            return Err(Error::param("aperture network must map 6 channels to 4"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = UNet::new("aperture", config, &mut rng, |l, skip_c, gating_c, rng| {
            AttentionGate::new(&format!("aperture.gate{l}"), skip_c, gating_c, rng)
        })?;
        Ok(Self { net })
    }

    pub fn unet(&self) -> &UNet<AttentionGate> {
        &self.net
    }

    pub fn unet_mut(&mut self) -> &mut UNet<AttentionGate> {
        &mut self.net
    }
}

/// Network input: the image with two constant planes `n_in/22`, `n_out/22`.
pub fn aperture_input(image: &RawImage, n_in: f64, n_out: f64) -> Result<Tensor> {
    if !(n_in > 0.0 && n_out > 0.0) {
        return Err(Error::param(format!("f-numbers {n_in}, {n_out} must be positive")));
    }
    let [c1, c2] = aperture_conditioning(n_in, n_out);
    let planes = Tensor::from_fn([1, image.height(), image.width(), 2], |_, _, _, k| if k == 0 { c1 } else { c2 });
    ops::concat_channels(&image_tensor(image), &planes)
}

/// `clip(image + net(image ⊕ n_in ⊕ n_out))`.
pub fn aperture_forward(image: &RawImage, n_in: f64, n_out: f64, net: &mut ApertureNet) -> Result<RawImage> {
    let input = aperture_input(image, n_in, n_out)?;
    let residual = full_frame_residual(&mut net.net, &input, aperture_conditioning(n_in, n_out))?;
    add_residual(image, &residual)
}

/// Aperture training example: denoised input at `n_in`, capture at `n_out`.
#[derive(Debug, Clone)]
pub struct AperturePair {
    pub input: RawImage,
    pub target: RawImage,
    pub n_in: f64,
    pub n_out: f64,
}

pub fn aperture_sample(pair: &AperturePair) -> Result<TrainSample> {
    pair.input.ensure_same_shape(&pair.target)?;
    let input = aperture_input(&pair.input, pair.n_in, pair.n_out)?;
    let residual: Vec<f64> = pair
        .target
        .data()
        .iter()
        .zip(pair.input.data())
        .map(|(t, i)| t - i)
        .collect();
    Ok(TrainSample {
        input,
        target: Tensor::from_vec([1, pair.input.height(), pair.input.width(), PLANES], residual)?,
        cond: aperture_conditioning(pair.n_in, pair.n_out),
    })
}

/// Checks that every pair widens the aperture (`n_out < n_in`).
pub fn validate_aperture_pairs(pairs: &[AperturePair]) -> Result<()> {
    if pairs.is_empty() {
        return Err(Error::degenerate("aperture stage has no training pairs"));
    }
    for (i, p) in pairs.iter().enumerate() {
        if !(p.n_out < p.n_in) {
            return Err(Error::param(format!(
                "aperture pair {i} goes from f/{} to f/{}; only narrower-to-wider pairs are allowed",
                p.n_in, p.n_out
            )));
        }
    }
    Ok(())
}

pub fn train_aperture(pairs: &[AperturePair], net: &mut ApertureNet, schedule: &StageSchedule) -> Result<LossCurve> {
    validate_aperture_pairs(pairs)?;
    let samples = pairs.iter().map(aperture_sample).collect::<Result<Vec<_>>>()?;
    train_residual_net(&mut net.net, &samples, schedule)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{gradient_check_with_floor, GradCheckReport};
    use crate::nn::ops::l1_loss;
    use proptest::prelude::*;
    use rand::Rng;

    fn randn(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor {
        let d = Normal::new(0.0, 1.0).unwrap();
        Tensor::from_fn(shape, |_, _, _, _| d.sample(rng))
    }

    fn randomize<M: Module>(m: &mut M, rng: &mut ChaCha8Rng, scale: f64) {
        for p in m.parameters_mut() {
            for v in p.value.data_mut() {
                *v = rng.random_range(-scale..scale);
            }
        }
    }

    // Keeps ReLU inputs of the pooled path away from the kink, where central
    // differences are meaningless.
    fn positive_biases<M: Module>(m: &mut M, rng: &mut ChaCha8Rng) {
        for p in m.parameters_mut() {
            if p.name.ends_with(".bias") {
                for v in p.value.data_mut() {
                    *v = rng.random_range(0.1..0.5);
                }
            }
        }
    }

    fn floor(analytic: &[f64]) -> f64 {
        1e-4 * analytic.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    fn projection_loss(out: &Tensor, proj: &Tensor) -> f64 {
        out.data().iter().zip(proj.data()).map(|(a, b)| a * b).sum()
    }

    /// Gradient check of `sum(proj · module(x))` over parameters and inputs.
    fn check<M: Module + Clone>(
        module: &M,
        inputs: &[Tensor],
        run: impl Fn(&mut M, &[Tensor]) -> Tensor,
        back: impl Fn(&mut M, &Tensor) -> Vec<Tensor>,
        seed: u64,
    ) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = module.clone();
        m.zero_grad();
        let out = run(&mut m, inputs);
        let proj = randn(out.shape(), &mut rng);
        let d_inputs = back(&mut m, &proj);
        let mut analytic = m.flat_grads();
        for d in &d_inputs {
            analytic.extend_from_slice(d.data());
        }
        let np = module.parameter_count();
        let mut theta = module.flat_values();
        for x in inputs {
            theta.extend_from_slice(x.data());
        }
        let mut probe = module.clone();
        let report = gradient_check_with_floor(
            |t| {
                probe.set_flat_values(&t[..np]).unwrap();
                let mut off = np;
                let xs: Vec<Tensor> = inputs
                    .iter()
                    .map(|x| {
                        let v = Tensor::from_vec(x.shape(), t[off..off + x.len()].to_vec()).unwrap();
                        off += x.len();
                        v
                    })
                    .collect();
                projection_loss(&run(&mut probe, &xs), &proj)
            },
            &analytic,
            &theta,
            1e-5,
            floor(&analytic),
        )
        .unwrap();
        report.max_rel_error
    }

    fn conds(n: usize) -> Vec<Conditioning> {
        (0..n).map(|i| aperture_conditioning(8.0 + i as f64, 4.0)).collect()
    }

    #[test]
    fn degenerate_adaptive_layer_is_instance_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = randn([2, 5, 4, 3], &mut rng);
        let mut layer = AdaptiveApertureLayer::new("a", 3);
        let y = layer.forward(&x, &conds(2)).unwrap();
        for b in 0..2 {
            for k in 0..3 {
                let vals: Vec<f64> = (0..5).flat_map(|i| (0..4).map(move |j| (i, j))).map(|(i, j)| x.at(b, i, j, k)).collect();
                let m = vals.iter().sum::<f64>() / 20.0;
                let v = vals.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 20.0;
                for i in 0..5 {
                    for j in 0..4 {
                        let expect = (x.at(b, i, j, k) - m) / (v + 1e-5).sqrt();
                        assert!((y.at(b, i, j, k) - expect).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn constant_input_gives_conditioned_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut layer = AdaptiveApertureLayer::new("a", 2);
        randomize(&mut layer, &mut rng, 1.0);
        let x = Tensor::full([1, 3, 3, 2], 0.7);
        let cond = [aperture_conditioning(8.0, 4.0)];
        let y = layer.forward(&x, &cond).unwrap();
        let wm = layer.w_mu.value.data().to_vec();
        let bm = layer.b_mu.value.data().to_vec();
        for k in 0..2 {
            let expect = wm[k] * cond[0][0] + wm[2 + k] * cond[0][1] + bm[k];
            for i in 0..3 {
                for j in 0..3 {
                    assert!((y.at(0, i, j, k) - expect).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn adaptive_layer_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut layer = AdaptiveApertureLayer::new("a", 3);
        randomize(&mut layer, &mut rng, 1.0);
        let x = randn([2, 8, 8, 3], &mut rng);
        let cond = conds(2);
        let err = check(
            &layer,
            &[x],
            |m, xs| m.forward(&xs[0], &cond).unwrap(),
            |m, g| vec![m.backward(g).unwrap()],
            4,
        );
        assert!(err < 1e-4, "{err}");
    }

    fn gate_inputs(rng: &mut ChaCha8Rng) -> (Tensor, Tensor) {
        (randn([2, 8, 8, 4], rng), randn([2, 8, 8, 6], rng))
    }

    #[test]
    fn spatial_branch_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut branch = SpatialBranch::new("s", 4, 6, 3, &mut rng);
        randomize(&mut branch, &mut rng, 1.0);
        let (s, g) = gate_inputs(&mut rng);
        let cond = conds(2);
        let err = check(
            &branch,
            &[s, g],
            |m, xs| m.forward(&xs[0], &xs[1], &cond).unwrap(),
            |m, g| {
                let (a, b) = m.backward(g).unwrap();
                vec![a, b]
            },
            6,
        );
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn channel_branch_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut branch = ChannelBranch::new("c", 4, 6, &mut rng);
        randomize(&mut branch, &mut rng, 1.0);
        positive_biases(&mut branch, &mut rng);
        let (s, g) = gate_inputs(&mut rng);
        let err = check(
            &branch,
            &[s, g],
            |m, xs| m.forward(&xs[0], &xs[1]).unwrap(),
            |m, g| {
                let (a, b) = m.backward(g).unwrap();
                vec![a, b]
            },
            8,
        );
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn gate_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut gate = AttentionGate::new("g", 4, 6, &mut rng);
        randomize(&mut gate, &mut rng, 1.0);
        positive_biases(&mut gate.channel, &mut rng);
        let (s, g) = gate_inputs(&mut rng);
        let cond = conds(2);
        let err = check(
            &gate,
            &[s, g],
            |m, xs| SkipGate::forward(m, &xs[0], &xs[1], &cond).unwrap(),
            |m, g| {
                let (a, b) = SkipGate::backward(m, g).unwrap();
                vec![a, b]
            },
            10,
        );
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn zero_final_layers_give_half_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut gate = AttentionGate::new("g", 4, 6, &mut rng);
        for p in gate.spatial.proj_out.parameters_mut() {
            p.value = Tensor::zeros(p.value.shape());
        }
        gate.spatial.norm_out.b_sigma.value = Tensor::zeros([1, 1, 1, 1]);
        for p in gate.channel.excite.parameters_mut() {
            p.value = Tensor::zeros(p.value.shape());
        }
        let (s, g) = gate_inputs(&mut rng);
        SkipGate::forward(&mut gate, &s, &g, &conds(2)).unwrap();
        let (bs, bc) = gate.last_maps().unwrap();
        assert!(bs.data().iter().all(|&v| v == 0.5));
        assert!(bc.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn branches_match_manual_replay() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut gate = AttentionGate::new("g", 4, 6, &mut rng);
        randomize(&mut gate, &mut rng, 0.8);
        let (s, g) = gate_inputs(&mut rng);
        let cond = conds(2);
        let bs = gate.spatial.forward(&s, &g, &cond).unwrap();
        let bc = gate.channel.forward(&s, &g).unwrap();

        let sp = &gate.spatial;
        let norm = |layer: &AdaptiveApertureLayer, x: &Tensor| layer.clone().forward(x, &cond).unwrap();
        let a = norm(&sp.norm_skip, &sp.proj_skip.apply(&s).unwrap());
        let b = norm(&sp.norm_gating, &sp.proj_gating.apply(&g).unwrap());
        let u = a.add(&b).unwrap().map(|v| v.max(0.0));
        let p = norm(&sp.norm_out, &sp.proj_out.apply(&u).unwrap());
        let expect_s = p.map(ops::sigmoid);
        assert_eq!(bs, expect_s);

        let ch = &gate.channel;
        let u = ch
            .proj_skip
            .apply(&s)
            .unwrap()
            .add(&ch.proj_gating.apply(&g).unwrap())
            .unwrap()
            .map(|v| v.max(0.0));
        let v = ops::global_avg_pool(&u);
        let e = ch.squeeze.apply(&v).unwrap().map(|v| v.max(0.0));
        let expect_c = ch.excite.apply(&e).unwrap().map(ops::sigmoid);
        assert_eq!(bc, expect_c);
    }

    #[test]
    fn apply_attention_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let f = randn([2, 3, 4, 5], &mut rng);
        let ones_s = Tensor::full([2, 3, 4, 1], 1.0);
        let ones_c = Tensor::full([2, 1, 1, 5], 1.0);
        assert_eq!(apply_attention(&f, &ones_s, &ones_c).unwrap(), f);
        let zero_c = Tensor::zeros([2, 1, 1, 5]);
        assert!(apply_attention(&f, &ones_s, &zero_c).unwrap().data().iter().all(|&v| v == 0.0));
        let bs = Tensor::from_fn([2, 3, 4, 1], |_, _, _, _| rng.random_range(0.0..1.0));
        let bc = Tensor::from_fn([2, 1, 1, 5], |_, _, _, _| rng.random_range(0.0..1.0));
        let out = apply_attention(&f, &bs, &bc).unwrap();
        for n in 0..2 {
            for y in 0..3 {
                for x in 0..4 {
                    for k in 0..5 {
                        assert_eq!(out.at(n, y, x, k), f.at(n, y, x, k) * bs.at(n, y, x, 0) * bc.at(n, 0, 0, k));
                    }
                }
            }
        }
        assert!(apply_attention(&f, &Tensor::zeros([2, 3, 3, 1]), &bc).is_err());
    }

    fn random_image(h: usize, w: usize, seed: u64) -> RawImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RawImage::from_planes(h, w, (0..h * w * PLANES).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn untrained_net_is_identity() {
        let mut net = ApertureNet::new(0);
        let img = random_image(9, 7, 1);
        assert_eq!(aperture_forward(&img, 8.0, 4.0, &mut net).unwrap(), img);
    }

    #[test]
    fn direction_rule_and_empty_set() {
        let mut net = ApertureNet::new(0);
        let img = random_image(8, 8, 1);
        let bad = AperturePair {
            input: img.clone(),
            target: img.clone(),
            n_in: 4.0,
            n_out: 8.0,
        };
        assert!(train_aperture(&[bad], &mut net, &StageSchedule::default()).is_err());
        assert!(matches!(
            train_aperture(&[], &mut net, &StageSchedule::default()),
            Err(Error::DegenerateData(_))
        ));
    }

    #[test]
    fn identical_pairs_have_zero_loss() {
        let mut net = ApertureNet::with_config(UNetConfig { base_width: 4, ..ApertureNet::default_config() }, 0).unwrap();
        let img = random_image(8, 8, 1);
        let pair = AperturePair {
            input: img.clone(),
            target: img,
            n_in: 8.0,
            n_out: 4.0,
        };
        let schedule = StageSchedule {
            epochs: 1,
            patch_size: 8,
            ..Default::default()
        };
        let curve = train_aperture(&[pair], &mut net, &schedule).unwrap();
        assert!(curve.steps.iter().all(|&l| l == 0.0));
    }

    #[test]
    fn full_network_loss_gradients() {
        let cfg = UNetConfig {
            base_width: 4,
            levels: 2,
            ..ApertureNet::default_config()
        };
        let mut net = ApertureNet::with_config(cfg, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for p in net.unet_mut().parameters_mut() {
            if p.name.ends_with(".bias") && !p.name.contains("gate") {
                for v in p.value.data_mut() {
                    *v = rng.random_range(0.1..0.5);
                }
            }
        }
        for v in net.unet_mut().head_mut().weight.value.data_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
        let img = random_image(8, 8, 2);
        let target = random_image(8, 8, 3);
        let sample = aperture_sample(&AperturePair {
            input: img,
            target,
            n_in: 11.0,
            n_out: 4.0,
        })
        .unwrap();
        let smoothing = Some(0.1);
        let cond = [sample.cond];
        net.unet_mut().zero_grad();
        let out = net.unet_mut().forward(&sample.input, &cond).unwrap();
        let (_, g) = l1_loss(&out, &sample.target, smoothing).unwrap();
        net.unet_mut().backward(&g).unwrap();
        let analytic = net.unet().flat_grads();
        let theta = net.unet().flat_values();
        let mut probe = net.clone();
        let report: GradCheckReport = gradient_check_with_floor(
            |t| {
                probe.unet_mut().set_flat_values(t).unwrap();
                let o = probe.unet_mut().forward(&sample.input, &cond).unwrap();
                l1_loss(&o, &sample.target, smoothing).unwrap().0
            },
            &analytic,
            &theta,
            1e-5,
            floor(&analytic),
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn attention_maps_strictly_inside_unit_interval(seed in 0u64..10_000, scale in 0.1..3.0f64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut gate = AttentionGate::new("g", 4, 6, &mut rng);
            randomize(&mut gate, &mut rng, scale);
            let (s, g) = gate_inputs(&mut rng);
            SkipGate::forward(&mut gate, &s, &g, &conds(2)).unwrap();
            let (bs, bc) = gate.last_maps().unwrap();
            prop_assert!(bs.data().iter().chain(bc.data()).all(|&v| v > 0.0 && v < 1.0));
        }

        #[test]
        fn apply_attention_is_one_lipschitz(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = randn([1, 3, 3, 2], &mut rng);
            let b = randn([1, 3, 3, 2], &mut rng);
            let bs = Tensor::from_fn([1, 3, 3, 1], |_, _, _, _| rng.random_range(0.0..1.0));
            let bc = Tensor::from_fn([1, 1, 1, 2], |_, _, _, _| rng.random_range(0.0..1.0));
            let fa = apply_attention(&a, &bs, &bc).unwrap();
            let fb = apply_attention(&b, &bs, &bc).unwrap();
            for i in 0..a.len() {
                prop_assert!((fa.data()[i] - fb.data()[i]).abs() <= (a.data()[i] - b.data()[i]).abs() + 1e-15);
            }
        }
    }
}
