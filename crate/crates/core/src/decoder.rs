//! Quality feature decoder and score regression head.
//!
//! The decoder resizes each up-stage map to a common grid, unifies its
//! channels with a 3x3 convolution followed by squeeze-and-excite, concatenates
//! the levels and narrows the result through a stack of 3x3 convolutions to an
//! eight-channel quality feature map. The head flattens that map and regresses
//! one unbounded score.

use candle_core::{DType, Device, Module, Tensor};
use serde::{Deserialize, Serialize};

use crate::backbone::{TapShape, STAGES};
use crate::error::{Error, Result};
use crate::nn::{self, check_finite, ConvSpec, Scope, SiluExt, SqueezeExcite};

/// Side of the quality feature map.
pub const QUALITY_SIZE: usize = 64;
/// Channels of the quality feature map.
pub const QUALITY_CHANNELS: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    /// Channels every level is projected to before concatenation.
    pub unify_channels: usize,
    /// Output channels of the narrowing convolutions; the last must be 8.
    pub reduce_channels: Vec<usize>,
    pub se_ratio: usize,
    /// Hidden widths of the three-layer regression head.
    pub head_hidden: [usize; 2],
    /// Which up-stage levels feed the decoder.
    pub use_levels: [bool; STAGES],
}

impl DecoderConfig {
    /// Full-width decoder: 4 x 512 -> 2048 -> 512 -> 128 -> 32 -> 8.
    pub fn full() -> Self {
        Self {
            unify_channels: 512,
            reduce_channels: vec![512, 128, 32, 8],
            se_ratio: 16,
            head_hidden: [1024, 128],
            use_levels: [true; STAGES],
        }
    }

    /// Narrow variant with the same topology, sized for CPU training.
    pub fn desk() -> Self {
        Self {
            unify_channels: 8,
            reduce_channels: vec![16, 8, 8, 8],
            se_ratio: 4,
            head_hidden: [16, 16],
            use_levels: [true; STAGES],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.unify_channels == 0 || self.se_ratio == 0 {
            return Err(Error::Config("decoder widths must be positive".into()));
        }
        if self.reduce_channels.last() != Some(&QUALITY_CHANNELS) {
            return Err(Error::Config(format!(
                "decoder must end with {QUALITY_CHANNELS} channels, got {:?}",
                self.reduce_channels
            )));
        }
        if self.reduce_channels.contains(&0) || self.head_hidden.contains(&0) {
            return Err(Error::Config("decoder widths must be positive".into()));
        }
        if !self.use_levels.iter().any(|&u| u) {
            return Err(Error::Config("decoder needs at least one level".into()));
        }
        Ok(())
    }

    pub fn concat_channels(&self) -> usize {
        self.unify_channels * self.use_levels.iter().filter(|&&u| u).count()
    }
}

#[derive(Debug)]
struct Level {
    conv: nn::Conv2d,
    se: SqueezeExcite,
}

/// Shapes observed inside one decoder pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QfdTrace {
    pub concat_channels: usize,
    pub reduce_channels: Vec<usize>,
}

#[derive(Debug)]
pub struct QualityFeatureDecoder {
    levels: Vec<Option<Level>>,
    reduce: Vec<nn::Conv2d>,
    inputs: Vec<TapShape>,
}

impl QualityFeatureDecoder {
    pub fn new(s: &Scope, cfg: &DecoderConfig, inputs: &[TapShape]) -> Result<Self> {
        cfg.validate()?;
        if inputs.len() != STAGES {
            return Err(Error::shape("decoder inputs", STAGES, inputs.len()));
        }
        let mut levels = Vec::with_capacity(STAGES);
        for (i, tap) in inputs.iter().enumerate() {
            levels.push(if cfg.use_levels[i] {
                let ls = s.pp("levels").pp(i);
                Some(Level {
                    conv: nn::conv2d(
                        &ls.pp("conv"),
                        tap.channels,
                        cfg.unify_channels,
                        ConvSpec::k3(),
                    )?,
                    se: SqueezeExcite::new(&ls.pp("se"), cfg.unify_channels, cfg.se_ratio)?,
                })
            } else {
                None
            });
        }
        let mut ch = cfg.concat_channels();
        let mut reduce = Vec::new();
        for (k, &out) in cfg.reduce_channels.iter().enumerate() {
            reduce.push(nn::conv2d(&s.pp("reduce").pp(k), ch, out, ConvSpec::k3())?);
            ch = out;
        }
        Ok(Self {
            levels,
            reduce,
            inputs: inputs.to_vec(),
        })
    }

    pub fn forward(&self, up: &[Tensor]) -> Result<Tensor> {
        Ok(self.forward_traced(up)?.0)
    }

    /// Like [`forward`](Self::forward), also reporting intermediate widths.
    pub fn forward_traced(&self, up: &[Tensor]) -> Result<(Tensor, QfdTrace)> {
        if up.len() != STAGES {
            return Err(Error::shape("decoder input maps", STAGES, up.len()));
        }
        let mut parts = Vec::with_capacity(STAGES);
        for (i, (x, level)) in up.iter().zip(&self.levels).enumerate() {
            let (_, c, h, w) = x.dims4()?;
            let want = self.inputs[i];
            if (c, h, w) != (want.channels, want.size, want.size) {
                return Err(Error::shape(
                    format!("decoder input {i}"),
                    (want.channels, want.size, want.size),
                    (c, h, w),
                ));
            }
            if let Some(level) = level {
                let r = nn::resize_bilinear(x, QUALITY_SIZE, QUALITY_SIZE)?;
                parts.push(level.se.forward(&level.conv.forward(&r)?)?);
            }
        }
        let mut x = Tensor::cat(&parts, 1)?;
        let concat_channels = x.dim(1)?;
        let mut widths = Vec::with_capacity(self.reduce.len());
        let last = self.reduce.len() - 1;
        for (k, conv) in self.reduce.iter().enumerate() {
            x = conv.forward(&x)?;
            if k != last {
                x = x.silu_fused()?;
            }
            widths.push(x.dim(1)?);
        }
        check_finite(&x, || "quality feature decoder".into())?;
        Ok((
            x,
            QfdTrace {
                concat_channels,
                reduce_channels: widths,
            },
        ))
    }
}

/// Three-layer MLP over the flattened `(64, 64, 8)` map.
#[derive(Debug)]
pub struct RegressionHead {
    fc1: candle_nn::Linear,
    fc2: candle_nn::Linear,
    fc3: candle_nn::Linear,
}

pub const HEAD_INPUT: usize = QUALITY_SIZE * QUALITY_SIZE * QUALITY_CHANNELS;

impl RegressionHead {
    pub fn new(s: &Scope, hidden: [usize; 2]) -> Result<Self> {
        Ok(Self {
            fc1: nn::linear(&s.pp("fc1"), HEAD_INPUT, hidden[0])?,
            fc2: nn::linear(&s.pp("fc2"), hidden[0], hidden[1])?,
            fc3: nn::linear(&s.pp("fc3"), hidden[1], 1)?,
        })
    }

    pub fn input_width(&self) -> usize {
        self.fc1.weight().dim(1).unwrap_or(0)
    }

    /// `fq`: `(B, 8, 64, 64)`. Returns `(B,)` scores.
    pub fn forward(&self, fq: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = fq.dims4()?;
        if (c, h, w) != (QUALITY_CHANNELS, QUALITY_SIZE, QUALITY_SIZE) {
            return Err(Error::shape(
                "quality feature map",
                (QUALITY_CHANNELS, QUALITY_SIZE, QUALITY_SIZE),
                (c, h, w),
            ));
        }
        // height, width, channel order
        let flat = fq
            .permute((0, 2, 3, 1))?
            .contiguous()?
            .reshape((b, HEAD_INPUT))?;
        let x = self.fc1.forward(&flat)?.silu_fused()?;
        let x = self.fc2.forward(&x)?.silu_fused()?;
        let y = self.fc3.forward(&x)?.squeeze(1)?;
        check_finite(&y, || "regression head".into())?;
        Ok(y)
    }
}

/// Host copy of one `(64, 64, 8)` quality feature map, height-major.
#[derive(Debug, Clone, PartialEq)]
pub struct QualityFeatureMap {
    values: Vec<f32>,
}

impl QualityFeatureMap {
    pub const LEN: usize = HEAD_INPUT;

    pub fn from_values(values: Vec<f32>) -> Result<Self> {
        if values.len() != Self::LEN {
            return Err(Error::shape("quality feature map", Self::LEN, values.len()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                stage: "quality feature map".into(),
            });
        }
        Ok(Self { values })
    }

    /// Splits an NCHW batch into per-image maps.
    pub fn from_batch(t: &Tensor) -> Result<Vec<Self>> {
        let (b, c, h, w) = t.dims4()?;
        if (c, h, w) != (QUALITY_CHANNELS, QUALITY_SIZE, QUALITY_SIZE) {
            return Err(Error::shape(
                "quality feature map",
                (QUALITY_CHANNELS, QUALITY_SIZE, QUALITY_SIZE),
                (c, h, w),
            ));
        }
        let hwc = t
            .permute((0, 2, 3, 1))?
            .contiguous()?
            .to_dtype(DType::F32)?;
        (0..b)
            .map(|i| Self::from_values(hwc.get(i)?.flatten_all()?.to_vec1::<f32>()?))
            .collect()
    }

    /// Stacks maps back into an NCHW batch.
    pub fn to_batch(maps: &[&QualityFeatureMap], dtype: DType) -> Result<Tensor> {
        let ts = maps
            .iter()
            .map(|m| {
                Tensor::from_slice(
                    &m.values,
                    (QUALITY_SIZE, QUALITY_SIZE, QUALITY_CHANNELS),
                    &Device::Cpu,
                )?
                .permute((2, 0, 1))
            })
            .collect::<candle_core::Result<Vec<_>>>()?;
        Ok(Tensor::stack(&ts, 0)?.contiguous()?.to_dtype(dtype)?)
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (QUALITY_SIZE, QUALITY_SIZE, QUALITY_CHANNELS)
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Init, ParamStore};

    fn taps(shapes: &[TapShape], dtype: DType, fill: f64) -> Vec<Tensor> {
        shapes
            .iter()
            .map(|s| {
                Tensor::full(fill, (2, s.channels, s.size, s.size), &Device::Cpu)
                    .unwrap()
                    .to_dtype(dtype)
                    .unwrap()
            })
            .collect()
    }

    fn geometry() -> Vec<TapShape> {
        [(16, 8), (16, 16), (8, 32), (8, 64)]
            .iter()
            .map(|&(channels, size)| TapShape { channels, size })
            .collect()
    }

    #[test]
    fn output_shape_and_trace() {
        let store = ParamStore::new(0, DType::F32);
        let qfd =
            QualityFeatureDecoder::new(&store.scope("qfd"), &DecoderConfig::desk(), &geometry())
                .unwrap();
        let (out, trace) = qfd
            .forward_traced(&taps(&geometry(), DType::F32, 0.1))
            .unwrap();
        assert_eq!(out.dims(), &[2, 8, 64, 64]);
        assert_eq!(trace.concat_channels, 32);
        assert_eq!(trace.reduce_channels, vec![16, 8, 8, 8]);
    }

    #[test]
    fn zero_taps_with_zero_biases_give_zero() {
        let store = ParamStore::new(0, DType::F64);
        let cfg = DecoderConfig::desk();
        for i in 0..STAGES {
            store
                .get(
                    &format!("qfd.levels.{i}.conv.bias"),
                    &[cfg.unify_channels],
                    Init::Zeros,
                )
                .unwrap();
        }
        for (k, &c) in cfg.reduce_channels.iter().enumerate() {
            store
                .get(&format!("qfd.reduce.{k}.bias"), &[c], Init::Zeros)
                .unwrap();
        }
        let qfd = QualityFeatureDecoder::new(&store.scope("qfd"), &cfg, &geometry()).unwrap();
        let out = qfd.forward(&taps(&geometry(), DType::F64, 0.0)).unwrap();
        let v = out.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(v.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn wrong_inputs_are_rejected() {
        let store = ParamStore::new(0, DType::F32);
        let qfd =
            QualityFeatureDecoder::new(&store.scope("qfd"), &DecoderConfig::desk(), &geometry())
                .unwrap();
        let mut t = taps(&geometry(), DType::F32, 0.0);
        assert!(qfd.forward(&t[..3]).is_err());
        t[1] = Tensor::zeros((2, 16, 8, 8), DType::F32, &Device::Cpu).unwrap();
        assert!(qfd.forward(&t).is_err());
        let bad = DecoderConfig {
            reduce_channels: vec![16, 4],
            ..DecoderConfig::desk()
        };
        assert!(QualityFeatureDecoder::new(&store.scope("q2"), &bad, &geometry()).is_err());
    }

    #[test]
    fn level_selection_shrinks_the_concat() {
        let store = ParamStore::new(0, DType::F32);
        let cfg = DecoderConfig {
            use_levels: [false, true, false, true],
            ..DecoderConfig::desk()
        };
        let qfd = QualityFeatureDecoder::new(&store.scope("qfd"), &cfg, &geometry()).unwrap();
        let (out, trace) = qfd
            .forward_traced(&taps(&geometry(), DType::F32, 0.3))
            .unwrap();
        assert_eq!(trace.concat_channels, 16);
        assert_eq!(out.dims(), &[2, 8, 64, 64]);
    }

    #[test]
    fn head_regresses_one_score_per_map() {
        let store = ParamStore::new(0, DType::F64);
        let head = RegressionHead::new(&store.scope("head"), [4, 3]).unwrap();
        assert_eq!(head.input_width(), 32768);
        let fq = Tensor::randn(0f64, 1.0, (3, 8, 64, 64), &Device::Cpu).unwrap();
        let y = head.forward(&fq).unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(y.len(), 3);
        for i in 0..3 {
            let single = head
                .forward(&fq.narrow(0, i, 1).unwrap())
                .unwrap()
                .to_vec1::<f64>()
                .unwrap();
            assert!((single[0] - y[i]).abs() < 1e-12);
        }
        assert_eq!(head.forward(&fq).unwrap().to_vec1::<f64>().unwrap(), y);
        assert!(head
            .forward(&Tensor::zeros((1, 8, 32, 32), DType::F64, &Device::Cpu).unwrap())
            .is_err());
    }

    #[test]
    fn zero_map_and_zero_biases_give_zero_score() {
        let store = ParamStore::new(0, DType::F64);
        for (n, w) in [("fc1", 4), ("fc2", 3), ("fc3", 1)] {
            store
                .get(&format!("head.{n}.bias"), &[w], Init::Zeros)
                .unwrap();
        }
        let head = RegressionHead::new(&store.scope("head"), [4, 3]).unwrap();
        let y = head
            .forward(&Tensor::zeros((1, 8, 64, 64), DType::F64, &Device::Cpu).unwrap())
            .unwrap();
        assert_eq!(y.to_vec1::<f64>().unwrap(), vec![0.0]);
    }

    #[test]
    fn host_maps_round_trip_through_batches() {
        let t = Tensor::randn(0f32, 1.0, (2, 8, 64, 64), &Device::Cpu).unwrap();
        let maps = QualityFeatureMap::from_batch(&t).unwrap();
        assert_eq!(maps.len(), 2);
        assert_eq!(maps[0].shape(), (64, 64, 8));
        let back = QualityFeatureMap::to_batch(&[&maps[0], &maps[1]], DType::F32).unwrap();
        let d = (back - &t)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f32>()
            .unwrap();
        assert_eq!(d, 0.0);
    }
}
