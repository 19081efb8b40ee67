use candle_core::{Module, Tensor};

use super::unet::{TapShape, STAGES};
use crate::error::{Error, Result};
use crate::nn::{self, ConvSpec, Scope};

#[derive(Debug)]
struct ResidualConv {
    conv1: nn::Conv2d,
    conv2: nn::Conv2d,
}

impl ResidualConv {
    fn new(s: &Scope, ch: usize) -> Result<Self> {
        Ok(Self {
            conv1: nn::conv2d(&s.pp("conv1"), ch, ch, ConvSpec::k3())?,
            conv2: nn::conv2d(&s.pp("conv2"), ch, ch, ConvSpec::k3())?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.conv2.forward(&self.conv1.forward(x)?.relu()?)?;
        Ok((x + h)?)
    }
}

#[derive(Debug)]
struct AdapterStage {
    down: Option<nn::Conv2d>,
    blocks: [ResidualConv; 2],
    proj: nn::Conv2d,
}

/// Convolutional pyramid that reads the image directly and produces one map
/// per down stage of the denoiser, shaped like that stage's output.
///
/// The first stage patch-embeds the image at the latent downsampling factor;
/// later stages halve the resolution with a stride-2 convolution. Each stage
/// runs two residual blocks and a 1x1 projection to the tap's channel count.
#[derive(Debug)]
pub struct ImageAdapter {
    factor: usize,
    stem: nn::Conv2d,
    stages: Vec<AdapterStage>,
    shapes: Vec<TapShape>,
}

impl ImageAdapter {
    /// `zero_output` starts every projection at zero so the adapter is inert
    /// until trained.
    pub fn new(
        s: &Scope,
        factor: usize,
        tap_shapes: &[TapShape],
        zero_output: bool,
    ) -> Result<Self> {
        if tap_shapes.len() != STAGES {
            return Err(Error::shape("adapter tap shapes", STAGES, tap_shapes.len()));
        }
        for w in tap_shapes.windows(2) {
            if w[1].size * 2 != w[0].size {
                return Err(Error::shape(
                    "adapter tap sizes",
                    "each stage half the previous",
                    tap_shapes.iter().map(|t| t.size).collect::<Vec<_>>(),
                ));
            }
        }
        let width: Vec<usize> = tap_shapes.iter().map(|t| t.channels).collect();
        let stem = nn::conv2d(&s.pp("stem"), 3 * factor * factor, width[0], ConvSpec::k1())?;
        let mut stages = Vec::with_capacity(STAGES);
        for i in 0..STAGES {
            let st = s.pp("stages").pp(i);
            let down = if i == 0 {
                None
            } else {
                Some(nn::conv2d(
                    &st.pp("down"),
                    width[i - 1],
                    width[i],
                    ConvSpec::down2(),
                )?)
            };
            let proj_spec = if zero_output {
                ConvSpec::k1().zeroed()
            } else {
                ConvSpec::k1()
            };
            stages.push(AdapterStage {
                down,
                blocks: [
                    ResidualConv::new(&st.pp("blocks.0"), width[i])?,
                    ResidualConv::new(&st.pp("blocks.1"), width[i])?,
                ],
                proj: nn::conv2d(&st.pp("proj"), width[i], tap_shapes[i].channels, proj_spec)?,
            });
        }
        Ok(Self {
            factor,
            stem,
            stages,
            shapes: tap_shapes.to_vec(),
        })
    }

    pub fn tap_shapes(&self) -> &[TapShape] {
        &self.shapes
    }

    /// `x`: `(B, 3, H, W)` image batch. Returns one map per down stage.
    pub fn forward(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let (_, c, h, w) = x.dims4()?;
        let expect = self.shapes[0].size * self.factor;
        if c != 3 || h != expect || w != expect {
            return Err(Error::shape(
                "adapter input",
                (3, expect, expect),
                (c, h, w),
            ));
        }
        let mut x = self.stem.forward(&nn::pixel_unshuffle(x, self.factor)?)?;
        let mut out = Vec::with_capacity(STAGES);
        for stage in &self.stages {
            if let Some(d) = &stage.down {
                x = d.forward(&x)?;
            }
            for b in &stage.blocks {
                x = b.forward(&x)?;
            }
            out.push(stage.proj.forward(&x)?);
        }
        Ok(out)
    }
}
