//! Encoder-decoder with skip connections, shared by the denoiser and the
//! aperture network. Skip features pass through a [`SkipGate`] before being
//! concatenated with the upsampled decoder features.

use rand::Rng;

use super::layers::{Conv2d, ConvBlock, Module};
use super::ops::{self, ResampleMode};
use super::optim::Parameter;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Topology of a [`UNet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Width of the finest level; each coarser level doubles it.
    pub base_width: usize,
    /// Number of resolution levels (at least 1).
    pub levels: usize,
}

impl UNetConfig {
    pub fn width(&self, level: usize) -> usize {
        self.base_width << level
    }

    /// Spatial extents must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.levels - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.base_width == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::param(format!("invalid U-net configuration {self:?}")));
        }
        Ok(())
    }
}

/// Per-sample conditioning passed through to gates.
pub type Conditioning = [f64; 2];

/// Transformation applied to a skip connection given the gating signal (the
/// coarser decoder feature, already resampled to the skip's size).
pub trait SkipGate: Module {
    fn forward(&mut self, skip: &Tensor, gating: &Tensor, cond: &[Conditioning]) -> Result<Tensor>;
    /// Returns `(d_skip, d_gating)`.
    fn backward(&mut self, grad: &Tensor) -> Result<(Tensor, Tensor)>;
}

/// Pass-through gate.
#[derive(Debug, Clone, Default)]
pub struct NoGate {
    gating_shape: Option<[usize; 4]>,
}

impl Module for NoGate {
    fn parameters(&self) -> Vec<&Parameter> {
        Vec::new()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        Vec::new()
    }
}

impl SkipGate for NoGate {
    fn forward(&mut self, skip: &Tensor, gating: &Tensor, _cond: &[Conditioning]) -> Result<Tensor> {
        self.gating_shape = Some(gating.shape());
        Ok(skip.clone())
    }

    fn backward(&mut self, grad: &Tensor) -> Result<(Tensor, Tensor)> {
        let shape = self
            .gating_shape
            .take()
            .ok_or_else(|| Error::State("gate backward before forward".into()))?;
        Ok((grad.clone(), Tensor::zeros(shape)))
    }
}

#[derive(Debug, Clone, Default)]
struct UNetCache {
    skip_shapes: Vec<[usize; 4]>,
    /// Shape of the coarser feature fed into each decoder level.
    lower_shapes: Vec<[usize; 4]>,
}

/// Encoder-decoder network. The output head is a zero-initialized 1×1
/// convolution, so a fresh network outputs exactly zero.
#[derive(Debug, Clone)]
pub struct UNet<G: SkipGate> {
    config: UNetConfig,
    encoders: Vec<ConvBlock>,
    decoders: Vec<ConvBlock>,
    gates: Vec<G>,
    head: Conv2d,
    cache: UNetCache,
}

impl<G: SkipGate> UNet<G> {
    /// `make_gate(level, skip_channels, gating_channels)` builds the gate for
    /// each skip level.
    pub fn new<R: Rng>(
        name: &str,
        config: UNetConfig,
        rng: &mut R,
        mut make_gate: impl FnMut(usize, usize, usize, &mut R) -> G,
    ) -> Result<Self> {
        config.validate()?;
        let mut encoders = Vec::with_capacity(config.levels);
        let mut cin = config.in_channels;
        for l in 0..config.levels {
            encoders.push(ConvBlock::new(&format!("{name}.enc{l}"), cin, config.width(l), rng));
            cin = config.width(l);
        }
        let mut decoders = Vec::new();
        let mut gates = Vec::new();
        for l in 0..config.levels - 1 {
            let (skip_c, lower_c) = (config.width(l), config.width(l + 1));
            gates.push(make_gate(l, skip_c, lower_c, rng));
            decoders.push(ConvBlock::new(&format!("{name}.dec{l}"), skip_c + lower_c, skip_c, rng));
        }
        let head = Conv2d::zeros(&format!("{name}.head"), 1, config.width(0), config.out_channels);
        Ok(Self {
            config,
            encoders,
            decoders,
            gates,
            head,
            cache: UNetCache::default(),
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn gates(&self) -> &[G] {
        &self.gates
    }

    pub fn gates_mut(&mut self) -> &mut [G] {
        &mut self.gates
    }

    pub fn head_mut(&mut self) -> &mut Conv2d {
        &mut self.head
    }

    pub fn forward(&mut self, x: &Tensor, cond: &[Conditioning]) -> Result<Tensor> {
        let cfg = self.config;
        if x.channels() != cfg.in_channels {
            return Err(Error::dim(format!(
                "network expects {} input channels, got {}",
                cfg.in_channels,
                x.channels()
            )));
        }
        let m = cfg.size_multiple();
        if !x.height().is_multiple_of(m) || !x.width().is_multiple_of(m) {
            return Err(Error::dim(format!(
                "spatial extents {}x{} must be multiples of {m}",
                x.height(),
                x.width()
            )));
        }
        let mut skips = Vec::with_capacity(cfg.levels);
        let mut h = x.clone();
        for l in 0..cfg.levels {
            if l > 0 {
                h = ops::avg_pool2(&h)?;
            }
            h = self.encoders[l].forward(&h)?;
            skips.push(h.clone());
        }
        let mut cache = UNetCache {
            skip_shapes: skips.iter().map(Tensor::shape).collect(),
            lower_shapes: vec![[0; 4]; cfg.levels.saturating_sub(1)],
        };
        let mut lower = skips.pop().expect("at least one level");
        for l in (0..cfg.levels - 1).rev() {
            let skip = &skips[l];
            cache.lower_shapes[l] = lower.shape();
            let up = ops::resample(&lower, skip.height(), skip.width(), ResampleMode::Bilinear)?;
            let gated = self.gates[l].forward(skip, &up, cond)?;
            let cat = ops::concat_channels(&up, &gated)?;
            lower = self.decoders[l].forward(&cat)?;
        }
        self.cache = cache;
        self.head.forward(&lower)
    }

    /// Backpropagates `grad` (shaped like the output) and returns the input
    /// gradient.
    pub fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let cfg = self.config;
        let cache = std::mem::take(&mut self.cache);
        if cache.skip_shapes.len() != cfg.levels {
            return Err(Error::State("U-net backward before forward".into()));
        }
        let mut g = self.head.backward(grad)?;
        let mut skip_grads: Vec<Option<Tensor>> = vec![None; cfg.levels];
        for l in 0..cfg.levels - 1 {
            let g_cat = self.decoders[l].backward(&g)?;
            let (g_up, g_gated) = ops::split_channels(&g_cat, cfg.width(l + 1))?;
            let (g_skip, g_gating) = self.gates[l].backward(&g_gated)?;
            let g_up = g_up.add(&g_gating)?;
            g = ops::resample_backward(cache.lower_shapes[l], &g_up, ResampleMode::Bilinear)?;
            skip_grads[l] = Some(g_skip);
        }
        for l in (0..cfg.levels).rev() {
            let mut g_out = g;
            if let Some(s) = skip_grads[l].take() {
                g_out.add_assign(&s)?;
            }
            let g_in = self.encoders[l].backward(&g_out)?;
            g = if l > 0 {
                ops::avg_pool2_backward(cache.skip_shapes[l - 1], &g_in)
            } else {
                g_in
            };
        }
        Ok(g)
    }
}

impl<G: SkipGate> Module for UNet<G> {
    fn parameters(&self) -> Vec<&Parameter> {
        let mut v = Vec::new();
        for e in &self.encoders {
            v.extend(e.parameters());
        }
        for (d, gate) in self.decoders.iter().zip(&self.gates) {
            v.extend(gate.parameters());
            v.extend(d.parameters());
        }
        v.extend(self.head.parameters());
        v
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v = Vec::new();
        for e in &mut self.encoders {
            v.extend(e.parameters_mut());
        }
        for (d, gate) in self.decoders.iter_mut().zip(&mut self.gates) {
            v.extend(gate.parameters_mut());
            v.extend(d.parameters_mut());
        }
        v.extend(self.head.parameters_mut());
        v
    }
}

/// Replicate-pads `x` on the bottom/right so both extents are multiples of
/// `m`.
pub fn pad_to_multiple(x: &Tensor, m: usize) -> Tensor {
    let [n, h, w, c] = x.shape();
    let ph = h.div_ceil(m) * m;
    let pw = w.div_ceil(m) * m;
    if (ph, pw) == (h, w) {
        return x.clone();
    }
    Tensor::from_fn([n, ph, pw, c], |b, y, xx, k| x.at(b, y.min(h - 1), xx.min(w - 1), k))
}

/// Crops the top-left `h × w` window.
pub fn crop_to(x: &Tensor, h: usize, w: usize) -> Tensor {
    let [n, xh, xw, c] = x.shape();
    if (xh, xw) == (h, w) {
        return x.clone();
    }
    Tensor::from_fn([n, h, w, c], |b, y, xx, k| x.at(b, y, xx, k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::gradient_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn net(seed: u64) -> UNet<NoGate> {
        let cfg = UNetConfig {
            in_channels: 3,
            out_channels: 2,
            base_width: 3,
            levels: 3,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        UNet::new("t", cfg, &mut rng, |_, _, _, _| NoGate::default()).unwrap()
    }

    #[test]
    fn fresh_network_outputs_zero() {
        let mut n = net(1);
        let x = Tensor::full([2, 8, 8, 3], 0.3);
        let y = n.forward(&x, &[]).unwrap();
        assert_eq!(y.shape(), [2, 8, 8, 2]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut n = net(1);
        assert!(n.forward(&Tensor::zeros([1, 6, 8, 3]), &[]).is_err());
        assert!(n.forward(&Tensor::zeros([1, 8, 8, 2]), &[]).is_err());
        assert!(n.backward(&Tensor::zeros([1, 8, 8, 2])).is_err());
    }

    #[test]
    fn full_network_gradient_check() {
        let mut n = net(3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let normal = Normal::new(0.0, 0.5).unwrap();
        // Nonzero head and positive biases keep every unit alive so no
        // gradient is small enough to drown in finite-difference roundoff.
        for v in n.head_mut().weight.value.data_mut() {
            *v = normal.sample(&mut rng);
        }
        for p in n.parameters_mut() {
            if p.name.ends_with(".bias") {
                for v in p.value.data_mut() {
                    *v = rng.random_range(0.1..0.5);
                }
            }
        }
        let x = Tensor::from_fn([1, 8, 8, 3], |_, _, _, _| normal.sample(&mut rng));
        let target = Tensor::from_fn([1, 8, 8, 2], |_, _, _, _| normal.sample(&mut rng));
        n.zero_grad();
        let y = n.forward(&x, &[]).unwrap();
        let (_, g) = ops::l1_loss(&y, &target, Some(0.1)).unwrap();
        let dx = n.backward(&g).unwrap();
        let mut analytic = n.flat_grads();
        analytic.extend_from_slice(dx.data());
        let np = n.parameter_count();
        let mut theta = n.flat_values();
        theta.extend_from_slice(x.data());
        let mut probe = n.clone();
        let f = |t: &[f64]| {
            probe.set_flat_values(&t[..np]).unwrap();
            let x = Tensor::from_vec([1, 8, 8, 3], t[np..].to_vec()).unwrap();
            let y = probe.forward(&x, &[]).unwrap();
            ops::l1_loss(&y, &target, Some(0.1)).unwrap().0
        };
        let rep = gradient_check(f, &analytic, &theta, 1e-5).unwrap();
        assert!(rep.max_rel_error < 1e-4, "{rep:?}");
    }

    #[test]
    fn padding_helpers() {
        let x = Tensor::from_fn([1, 3, 5, 1], |_, y, x, _| (y * 5 + x) as f64);
        let p = pad_to_multiple(&x, 4);
        assert_eq!(p.shape(), [1, 4, 8, 1]);
        assert_eq!(p.at(0, 3, 7, 0), x.at(0, 2, 4, 0));
        assert_eq!(crop_to(&p, 3, 5), x);
    }
}
