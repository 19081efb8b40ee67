//! Latent encoding, forward noising, the image adapter and the tapped
//! denoiser, plus single-pass feature extraction.

mod adapter;
mod schedule;
mod unet;

use candle_core::{Module, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use adapter::ImageAdapter;
pub use schedule::{add_noise, mix_noise, NoiseSchedule};
pub use unet::{FeatureTapSet, TapShape, UNet, UNetConfig, STAGES};

use crate::error::{Error, Result};
use crate::nn::{self, ConvSpec, Scope};

/// Downsampling factor between image and latent.
pub const LATENT_FACTOR: usize = 8;

/// Maps an image batch `(B, 3, H, W)` in `[-1, 1]` to latents
/// `(B, C, H / factor, W / factor)`.
pub trait LatentEncoder: Send + Sync + std::fmt::Debug {
    fn factor(&self) -> usize;
    fn channels(&self) -> usize;
    fn encode(&self, x: &Tensor) -> Result<Tensor>;
}

/// Fixed, seeded patch-embedding encoder: a stride-8 convolution expressed as
/// pixel-unshuffle followed by a 1x1 convolution. Never trained.
#[derive(Debug)]
pub struct PatchEncoder {
    proj: nn::Conv2d,
    channels: usize,
}

impl PatchEncoder {
    pub fn new(s: &Scope, channels: usize) -> Result<Self> {
        let fan_in = 3 * LATENT_FACTOR * LATENT_FACTOR;
        Ok(Self {
            proj: nn::conv2d(&s.pp("proj"), fan_in, channels, ConvSpec::k1())?,
            channels,
        })
    }
}

impl LatentEncoder for PatchEncoder {
    fn factor(&self) -> usize {
        LATENT_FACTOR
    }

    fn channels(&self) -> usize {
        self.channels
    }

    fn encode(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.proj.forward(&nn::pixel_unshuffle(x, LATENT_FACTOR)?)?)
    }
}

/// How `eps` is chosen when forming `z_t`.
#[derive(Debug, Clone)]
pub enum NoisePolicy {
    /// `eps = 0`; inference default.
    Zero,
    /// Standard normal noise from a seeded stream.
    Seeded(u64),
    /// Caller-supplied noise with the latent's shape.
    Given(Tensor),
}

pub fn standard_normal_like(shape: &[usize], seed: u64, like: &Tensor) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v: Vec<f32> = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z as f32
        })
        .collect();
    Ok(Tensor::from_vec(v, shape, like.device())?.to_dtype(like.dtype())?)
}

/// Which backbone implementation to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    Mini,
    Pretrained,
}

impl std::str::FromStr for BackboneKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mini" => Ok(Self::Mini),
            "pretrained" => Ok(Self::Pretrained),
            other => Err(Error::Config(format!(
                "backbone must be \"mini\" or \"pretrained\", got {other:?}"
            ))),
        }
    }
}

impl std::fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Mini => "mini",
            Self::Pretrained => "pretrained",
        })
    }
}

/// Latent encoder plus tapped denoiser.
pub trait DenoiserBackbone {
    fn encode(&self, x: &Tensor) -> Result<Tensor>;
    fn denoise_with_taps(
        &self,
        z_t: &Tensor,
        t: usize,
        cond: &Tensor,
        adapter: Option<&[Tensor]>,
    ) -> Result<FeatureTapSet>;
    /// Down-stage shapes for an input image of side `input_size`.
    fn down_tap_shapes(&self, input_size: usize) -> Vec<TapShape>;
    /// Up-stage shapes for an input image of side `input_size`.
    fn up_tap_shapes(&self, input_size: usize) -> Vec<TapShape>;
    fn cross_dim(&self) -> usize;
    fn latent_factor(&self) -> usize;
    /// Number of denoiser passes run so far.
    fn denoiser_calls(&self) -> usize;
}

#[derive(Debug)]
pub struct Backbone {
    encoder: Box<dyn LatentEncoder>,
    unet: UNet,
}

impl Backbone {
    pub fn new(encoder: Box<dyn LatentEncoder>, unet: UNet) -> Result<Self> {
        if encoder.channels() != unet.config().latent_channels {
            return Err(Error::shape(
                "latent channels",
                unet.config().latent_channels,
                encoder.channels(),
            ));
        }
        Ok(Self { encoder, unet })
    }

    /// Seeded patch encoder under `vae.` and a U-Net under `unet.`.
    pub fn mini(store_root: &Scope, cfg: UNetConfig) -> Result<Self> {
        let encoder = PatchEncoder::new(&store_root.pp("vae"), cfg.latent_channels)?;
        let unet = UNet::new(&store_root.pp("unet"), cfg)?;
        Self::new(Box::new(encoder), unet)
    }

    pub fn unet(&self) -> &UNet {
        &self.unet
    }
}

impl DenoiserBackbone for Backbone {
    fn encode(&self, x: &Tensor) -> Result<Tensor> {
        self.encoder.encode(x)
    }

    fn denoise_with_taps(
        &self,
        z_t: &Tensor,
        t: usize,
        cond: &Tensor,
        adapter: Option<&[Tensor]>,
    ) -> Result<FeatureTapSet> {
        self.unet.forward_taps(z_t, t, cond, adapter)
    }

    fn down_tap_shapes(&self, input_size: usize) -> Vec<TapShape> {
        let latent = input_size / self.encoder.factor();
        (0..STAGES)
            .map(|i| self.unet.config().down_tap(i, latent))
            .collect()
    }

    fn up_tap_shapes(&self, input_size: usize) -> Vec<TapShape> {
        let latent = input_size / self.encoder.factor();
        (0..STAGES)
            .map(|j| self.unet.config().up_tap(j, latent))
            .collect()
    }

    fn cross_dim(&self) -> usize {
        self.unet.config().cross_dim
    }

    fn latent_factor(&self) -> usize {
        self.encoder.factor()
    }

    fn denoiser_calls(&self) -> usize {
        self.unet.calls()
    }
}

/// Encodes `x`, forms `z_t` at timestep `t` and runs exactly one denoiser
/// pass under `cond`, adding the image adapter's maps to the down stages.
pub fn extract_features(
    backbone: &dyn DenoiserBackbone,
    schedule: &NoiseSchedule,
    x: &Tensor,
    t: usize,
    cond: &Tensor,
    adapter: Option<&ImageAdapter>,
    noise: &NoisePolicy,
) -> Result<FeatureTapSet> {
    schedule.check(t)?;
    let (_, d) = cond.dims2()?;
    if d != backbone.cross_dim() {
        return Err(Error::shape("condition width", backbone.cross_dim(), d));
    }
    let z0 = backbone.encode(x)?;
    let eps = match noise {
        NoisePolicy::Zero => z0.zeros_like()?,
        NoisePolicy::Seeded(seed) => standard_normal_like(z0.dims(), *seed, &z0)?,
        NoisePolicy::Given(e) => e.clone(),
    };
    let z_t = add_noise(schedule, &z0, t, &eps)?;
    let maps = adapter.map(|a| a.forward(x)).transpose()?;
    backbone.denoise_with_taps(&z_t, t, cond, maps.as_deref())
}
