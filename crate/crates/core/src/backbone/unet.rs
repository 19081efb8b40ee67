//! Text-conditioned denoising U-Net with four resolution stages, instrumented
//! to return the output of every down and up stage.
//!
//! Parameter names follow the diffusers `UNet2DConditionModel` layout so a
//! latent-diffusion checkpoint can be loaded into the same code.

use std::sync::atomic::{AtomicUsize, Ordering};

use candle_core::{DType, Module, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, check_finite, ConvSpec, Scope, SiluExt};

pub const STAGES: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub latent_channels: usize,
    pub block_channels: [usize; STAGES],
    pub layers_per_block: usize,
    /// Cross-attention after each resnet of down stage `i` (highest resolution first).
    pub down_attention: [bool; STAGES],
    /// Cross-attention in up stage `j` (lowest resolution first).
    pub up_attention: [bool; STAGES],
    pub mid_attention: bool,
    pub head_dim: usize,
    pub cross_dim: usize,
    pub norm_groups: usize,
}

impl UNetConfig {
    /// Small randomly initialised network for tests and desk-scale runs.
    pub fn mini(cross_dim: usize) -> Self {
        Self {
            latent_channels: 4,
            block_channels: [8, 16, 32, 32],
            layers_per_block: 1,
            // cross-attention over the full prompt set only at 8x8
            down_attention: [false, false, false, true],
            up_attention: [true, false, false, false],
            mid_attention: true,
            head_dim: 32,
            cross_dim,
            norm_groups: 4,
        }
    }

    /// Stable Diffusion v1.5 geometry.
    pub fn sd15() -> Self {
        Self {
            latent_channels: 4,
            block_channels: [320, 640, 1280, 1280],
            layers_per_block: 2,
            down_attention: [true, true, true, false],
            up_attention: [false, true, true, true],
            mid_attention: true,
            head_dim: 40,
            cross_dim: 768,
            norm_groups: 32,
        }
    }

    pub fn time_embed_dim(&self) -> usize {
        self.block_channels[0] * 4
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers_per_block == 0 || self.cross_dim == 0 || self.head_dim == 0 {
            return Err(Error::Config("unet sizes must be positive".into()));
        }
        for &c in &self.block_channels {
            if c == 0 || c % self.norm_groups != 0 {
                return Err(Error::Config(format!(
                    "unet channels {c} not divisible by {} norm groups",
                    self.norm_groups
                )));
            }
        }
        Ok(())
    }

    /// `(channels, side)` of down stage `i` for a latent of side `latent`.
    pub fn down_tap(&self, i: usize, latent: usize) -> TapShape {
        TapShape {
            channels: self.block_channels[i],
            size: latent >> i,
        }
    }

    /// `(channels, side)` of up stage `j`; resolution grows with `j`.
    pub fn up_tap(&self, j: usize, latent: usize) -> TapShape {
        self.down_tap(STAGES - 1 - j, latent)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TapShape {
    pub channels: usize,
    pub size: usize,
}

/// Feature maps captured during one denoiser pass, NCHW.
#[derive(Debug, Clone)]
pub struct FeatureTapSet {
    pub down: Vec<Tensor>,
    pub up: Vec<Tensor>,
}

impl FeatureTapSet {
    pub fn shapes(&self) -> Result<(Vec<TapShape>, Vec<TapShape>)> {
        let f = |v: &Vec<Tensor>| -> Result<Vec<TapShape>> {
            v.iter()
                .map(|t| {
                    let (_, c, h, _) = t.dims4()?;
                    Ok(TapShape {
                        channels: c,
                        size: h,
                    })
                })
                .collect()
        };
        Ok((f(&self.down)?, f(&self.up)?))
    }
}

fn timestep_embedding(t: f64, dim: usize, batch: usize, dtype: DType) -> Result<Tensor> {
    let half = dim / 2;
    let mut v = vec![0f64; dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        // cos first, then sin
        v[i] = (t * freq).cos();
        v[half + i] = (t * freq).sin();
    }
    let row = Tensor::from_vec(v, (1, dim), &candle_core::Device::Cpu)?.to_dtype(dtype)?;
    Ok(row.repeat((batch, 1))?)
}

#[derive(Debug)]
struct ResnetBlock {
    norm1: nn::GroupNorm,
    conv1: nn::Conv2d,
    time_emb_proj: candle_nn::Linear,
    norm2: nn::GroupNorm,
    conv2: nn::Conv2d,
    shortcut: Option<nn::Conv2d>,
}

impl ResnetBlock {
    fn new(s: &Scope, cin: usize, cout: usize, temb: usize, groups: usize) -> Result<Self> {
        Ok(Self {
            norm1: nn::group_norm(&s.pp("norm1"), nn::groups_for(cin, groups), cin)?,
            conv1: nn::conv2d(&s.pp("conv1"), cin, cout, ConvSpec::k3())?,
            time_emb_proj: nn::linear(&s.pp("time_emb_proj"), temb, cout)?,
            norm2: nn::group_norm(&s.pp("norm2"), nn::groups_for(cout, groups), cout)?,
            conv2: nn::conv2d(&s.pp("conv2"), cout, cout, ConvSpec::k3())?,
            shortcut: if cin != cout {
                Some(nn::conv2d(
                    &s.pp("conv_shortcut"),
                    cin,
                    cout,
                    ConvSpec::k1(),
                )?)
            } else {
                None
            },
        })
    }

    fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward(x)?.silu_fused()?)?;
        let t = self
            .time_emb_proj
            .forward(&temb.silu_fused()?)?
            .unsqueeze(2)?
            .unsqueeze(3)?;
        let h = h.broadcast_add(&t)?;
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu_fused()?)?;
        let skip = match &self.shortcut {
            Some(c) => c.forward(x)?,
            None => x.clone(),
        };
        Ok((skip + h)?)
    }
}

#[derive(Debug)]
struct Attention {
    to_q: candle_nn::Linear,
    to_k: candle_nn::Linear,
    to_v: candle_nn::Linear,
    to_out: candle_nn::Linear,
    heads: usize,
    scale: f64,
}

impl Attention {
    fn new(s: &Scope, query_dim: usize, context_dim: usize, head_dim: usize) -> Result<Self> {
        let heads = (query_dim / head_dim).max(1);
        let inner = heads * head_dim;
        Ok(Self {
            to_q: nn::linear_no_bias(&s.pp("to_q"), query_dim, inner)?,
            to_k: nn::linear_no_bias(&s.pp("to_k"), context_dim, inner)?,
            to_v: nn::linear_no_bias(&s.pp("to_v"), context_dim, inner)?,
            to_out: nn::linear(&s.pp("to_out").pp(0), inner, query_dim)?,
            heads,
            scale: 1.0 / (head_dim as f64).sqrt(),
        })
    }

    fn split_heads(&self, t: &Tensor) -> Result<Tensor> {
        // (..., n, inner) -> (..., heads, n, head_dim)
        let dims = t.dims().to_vec();
        let n = dims[dims.len() - 2];
        let inner = dims[dims.len() - 1];
        let mut shape = dims[..dims.len() - 2].to_vec();
        shape.extend([n, self.heads, inner / self.heads]);
        let r = t.reshape(shape)?;
        let nd = r.rank();
        Ok(r.transpose(nd - 3, nd - 2)?.contiguous()?)
    }

    /// `x`: `(B, N, C)`; `context`: `(B, M, Cc)` or a shared `(M, Cc)`.
    fn forward(&self, x: &Tensor, context: Option<&Tensor>) -> Result<Tensor> {
        let (b, n, _) = x.dims3()?;
        let ctx = context.unwrap_or(x);
        let q = self.split_heads(&self.to_q.forward(x)?)?;
        let k = self.split_heads(&self.to_k.forward(ctx)?)?;
        let v = self.split_heads(&self.to_v.forward(ctx)?)?;
        let scores = (q.broadcast_matmul(&k.t()?)? * self.scale)?;
        let probs = nn::softmax_last(&scores)?;
        let out = probs.broadcast_matmul(&v)?;
        let out = out.transpose(1, 2)?.contiguous()?.reshape((b, n, ()))?;
        Ok(self.to_out.forward(&out)?)
    }
}

#[derive(Debug)]
struct GegluFeedForward {
    proj: candle_nn::Linear,
    out: candle_nn::Linear,
}

impl GegluFeedForward {
    fn new(s: &Scope, dim: usize) -> Result<Self> {
        let inner = dim * 4;
        Ok(Self {
            proj: nn::linear(&s.pp("net.0.proj"), dim, inner * 2)?,
            out: nn::linear(&s.pp("net.2"), inner, dim)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.proj.forward(x)?;
        let parts = h.chunk(2, D::Minus1)?;
        let h = (&parts[0] * parts[1].gelu_erf()?)?;
        Ok(self.out.forward(&h)?)
    }
}

#[derive(Debug)]
struct TransformerBlock {
    norm1: nn::LayerNorm,
    attn1: Attention,
    norm2: nn::LayerNorm,
    attn2: Attention,
    norm3: nn::LayerNorm,
    ff: GegluFeedForward,
}

#[derive(Debug)]
struct SpatialTransformer {
    norm: nn::GroupNorm,
    proj_in: nn::Conv2d,
    block: TransformerBlock,
    proj_out: nn::Conv2d,
}

impl SpatialTransformer {
    fn new(s: &Scope, ch: usize, cfg: &UNetConfig) -> Result<Self> {
        let b = s.pp("transformer_blocks.0");
        Ok(Self {
            norm: nn::group_norm(&s.pp("norm"), nn::groups_for(ch, cfg.norm_groups), ch)?,
            proj_in: nn::conv2d(&s.pp("proj_in"), ch, ch, ConvSpec::k1())?,
            block: TransformerBlock {
                norm1: nn::layer_norm(&b.pp("norm1"), ch)?,
                attn1: Attention::new(&b.pp("attn1"), ch, ch, cfg.head_dim)?,
                norm2: nn::layer_norm(&b.pp("norm2"), ch)?,
                attn2: Attention::new(&b.pp("attn2"), ch, cfg.cross_dim, cfg.head_dim)?,
                norm3: nn::layer_norm(&b.pp("norm3"), ch)?,
                ff: GegluFeedForward::new(&b.pp("ff"), ch)?,
            },
            proj_out: nn::conv2d(&s.pp("proj_out"), ch, ch, ConvSpec::k1())?,
        })
    }

    fn forward(&self, x: &Tensor, cond: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let y = self.proj_in.forward(&self.norm.forward(x)?)?;
        let y = y.flatten_from(2)?.transpose(1, 2)?.contiguous()?; // (B, HW, C)
        let blk = &self.block;
        let y = (blk.attn1.forward(&blk.norm1.forward(&y)?, None)? + &y)?;
        let y = (blk.attn2.forward(&blk.norm2.forward(&y)?, Some(cond))? + &y)?;
        let y = (blk.ff.forward(&blk.norm3.forward(&y)?)? + &y)?;
        let y = y.transpose(1, 2)?.contiguous()?.reshape((b, c, h, w))?;
        Ok((self.proj_out.forward(&y)? + x)?)
    }
}

#[derive(Debug)]
struct Layer {
    resnet: ResnetBlock,
    attention: Option<SpatialTransformer>,
}

impl Layer {
    fn forward(&self, x: &Tensor, temb: &Tensor, cond: &Tensor) -> Result<Tensor> {
        let h = self.resnet.forward(x, temb)?;
        match &self.attention {
            Some(a) => a.forward(&h, cond),
            None => Ok(h),
        }
    }
}

#[derive(Debug)]
struct Stage {
    layers: Vec<Layer>,
    resample: Option<nn::Conv2d>,
}

/// The denoising network. Forward passes are counted.
#[derive(Debug)]
pub struct UNet {
    cfg: UNetConfig,
    conv_in: nn::Conv2d,
    time_linear_1: candle_nn::Linear,
    time_linear_2: candle_nn::Linear,
    down: Vec<Stage>,
    mid: Layer,
    mid_resnet: ResnetBlock,
    up: Vec<Stage>,
    calls: AtomicUsize,
}

impl UNet {
    pub fn new(s: &Scope, cfg: UNetConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.block_channels;
        let temb = cfg.time_embed_dim();
        let g = cfg.norm_groups;

        let mut skip_channels = vec![c[0]];
        let mut down = Vec::new();
        let mut ch = c[0];
        for i in 0..STAGES {
            let ds = s.pp("down_blocks").pp(i);
            let mut layers = Vec::new();
            for l in 0..cfg.layers_per_block {
                let resnet = ResnetBlock::new(&ds.pp("resnets").pp(l), ch, c[i], temb, g)?;
                ch = c[i];
                let attention = if cfg.down_attention[i] {
                    Some(SpatialTransformer::new(
                        &ds.pp("attentions").pp(l),
                        ch,
                        &cfg,
                    )?)
                } else {
                    None
                };
                layers.push(Layer { resnet, attention });
                skip_channels.push(ch);
            }
            let resample = if i + 1 < STAGES {
                skip_channels.push(ch);
                Some(nn::conv2d(
                    &ds.pp("downsamplers.0.conv"),
                    ch,
                    ch,
                    ConvSpec::down2(),
                )?)
            } else {
                None
            };
            down.push(Stage { layers, resample });
        }

        let ms = s.pp("mid_block");
        let mid = Layer {
            resnet: ResnetBlock::new(&ms.pp("resnets.0"), ch, ch, temb, g)?,
            attention: if cfg.mid_attention {
                Some(SpatialTransformer::new(&ms.pp("attentions.0"), ch, &cfg)?)
            } else {
                None
            },
        };
        let mid_resnet = ResnetBlock::new(&ms.pp("resnets.1"), ch, ch, temb, g)?;

        let mut up = Vec::new();
        for j in 0..STAGES {
            let level = STAGES - 1 - j;
            let us = s.pp("up_blocks").pp(j);
            let mut layers = Vec::new();
            for l in 0..=cfg.layers_per_block {
                let skip = skip_channels.pop().expect("skip bookkeeping");
                let resnet =
                    ResnetBlock::new(&us.pp("resnets").pp(l), ch + skip, c[level], temb, g)?;
                ch = c[level];
                let attention = if cfg.up_attention[j] {
                    Some(SpatialTransformer::new(
                        &us.pp("attentions").pp(l),
                        ch,
                        &cfg,
                    )?)
                } else {
                    None
                };
                layers.push(Layer { resnet, attention });
            }
            let resample = if j + 1 < STAGES {
                Some(nn::conv2d(
                    &us.pp("upsamplers.0.conv"),
                    ch,
                    ch,
                    ConvSpec::k3(),
                )?)
            } else {
                None
            };
            up.push(Stage { layers, resample });
        }
        debug_assert!(skip_channels.is_empty());

        Ok(Self {
            conv_in: nn::conv2d(&s.pp("conv_in"), cfg.latent_channels, c[0], ConvSpec::k3())?,
            time_linear_1: nn::linear(&s.pp("time_embedding.linear_1"), c[0], temb)?,
            time_linear_2: nn::linear(&s.pp("time_embedding.linear_2"), temb, temb)?,
            cfg,
            down,
            mid,
            mid_resnet,
            up,
            calls: AtomicUsize::new(0),
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.cfg
    }

    /// Number of forward passes run so far.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    /// One denoiser pass over `z_t` under the shared condition `cond` `(K, d)`.
    /// `adapter`, when given, is added to the output of down stage `i` before
    /// it feeds the skip connection and the next stage.
    pub fn forward_taps(
        &self,
        z_t: &Tensor,
        t: usize,
        cond: &Tensor,
        adapter: Option<&[Tensor]>,
    ) -> Result<FeatureTapSet> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let (b, c, h, w) = z_t.dims4()?;
        if c != self.cfg.latent_channels {
            return Err(Error::shape("latent channels", self.cfg.latent_channels, c));
        }
        if h != w || h % (1 << (STAGES - 1)) != 0 {
            return Err(Error::shape(
                "latent size",
                "square, divisible by 8",
                (h, w),
            ));
        }
        let (_, d) = cond.dims2()?;
        if d != self.cfg.cross_dim {
            return Err(Error::shape("condition width", self.cfg.cross_dim, d));
        }
        if let Some(a) = adapter {
            if a.len() != STAGES {
                return Err(Error::shape("adapter maps", STAGES, a.len()));
            }
        }

        let temb = timestep_embedding(t as f64, self.cfg.block_channels[0], b, z_t.dtype())?;
        let temb = self
            .time_linear_2
            .forward(&self.time_linear_1.forward(&temb)?.silu_fused()?)?;

        let mut x = self.conv_in.forward(z_t)?;
        let mut skips = vec![x.clone()];
        let mut down_taps = Vec::with_capacity(STAGES);
        for (i, stage) in self.down.iter().enumerate() {
            let n = stage.layers.len();
            for (l, layer) in stage.layers.iter().enumerate() {
                x = layer.forward(&x, &temb, cond)?;
                if l + 1 == n {
                    if let Some(a) = adapter {
                        if a[i].dims() != x.dims() {
                            return Err(Error::shape(
                                format!("adapter map {i}"),
                                x.dims(),
                                a[i].dims(),
                            ));
                        }
                        x = (x + &a[i])?;
                    }
                }
                skips.push(x.clone());
            }
            check_finite(&x, || format!("down stage {}", i + 1))?;
            down_taps.push(x.clone());
            if let Some(ds) = &stage.resample {
                x = ds.forward(&x)?;
                skips.push(x.clone());
            }
        }

        x = self.mid.forward(&x, &temb, cond)?;
        x = self.mid_resnet.forward(&x, &temb)?;

        let mut up_taps = Vec::with_capacity(STAGES);
        for (j, stage) in self.up.iter().enumerate() {
            for layer in &stage.layers {
                let skip = skips.pop().expect("skip bookkeeping");
                x = Tensor::cat(&[&x, &skip], 1)?;
                x = layer.forward(&x, &temb, cond)?;
            }
            check_finite(&x, || format!("up stage {}", j + 1))?;
            up_taps.push(x.clone());
            if let Some(us) = &stage.resample {
                let (_, _, hh, ww) = x.dims4()?;
                x = us.forward(&x.upsample_nearest2d(hh * 2, ww * 2)?)?;
            }
        }
        Ok(FeatureTapSet {
            down: down_taps,
            up: up_taps,
        })
    }
}
