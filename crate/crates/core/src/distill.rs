//! The distilled student: a small CNN whose output is aligned to the
//! teacher's quality feature map, trained against a frozen teacher.

use std::path::{Path, PathBuf};

use candle_core::{DType, Module, Tensor};
use serde::{Deserialize, Serialize};

use crate::dataset::PreprocessedImage;
use crate::decoder::{QualityFeatureMap, RegressionHead, QUALITY_CHANNELS, QUALITY_SIZE};
use crate::error::{Error, Result};
use crate::model::{Precision, QualityModel, TeacherModel};
use crate::nn::{self, check_finite, ConvSpec, ParamStore, Scope, SiluExt};
use crate::training::{
    margin_loss_t, mse_loss_t, scalar, LogRecord, LossConfig, Samples, TrainLog, TrainSchedule,
    Trainer,
};

/// Produces the last feature map of a student backbone.
pub trait StudentBackbone: std::fmt::Debug {
    fn out_channels(&self) -> usize;
    fn forward(&self, x: &Tensor) -> Result<Tensor>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentConfig {
    pub input_size: usize,
    /// Patch size of the stem.
    pub patch: usize,
    /// Channels of each stage; every stage after the first halves resolution.
    pub stage_channels: Vec<usize>,
    pub head_hidden: [usize; 2],
    pub precision: Precision,
    pub seed: u64,
}

impl StudentConfig {
    pub fn small() -> Self {
        Self {
            input_size: crate::dataset::INPUT_SIZE,
            patch: 8,
            stage_channels: vec![16, 24, 32],
            head_hidden: [16, 16],
            precision: Precision::F32,
            seed: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.is_empty() || self.stage_channels.contains(&0) {
            return Err(Error::Config(
                "student.stage_channels must be non-empty and positive".into(),
            ));
        }
        if self.patch == 0 || !self.input_size.is_multiple_of(self.patch) {
            return Err(Error::Config(format!(
                "student.patch {} must divide the input size {}",
                self.patch, self.input_size
            )));
        }
        let mut side = self.input_size / self.patch;
        for _ in 1..self.stage_channels.len() {
            if side < 2 {
                return Err(Error::Config(
                    "student has more stages than resolution".into(),
                ));
            }
            side = side.div_ceil(2);
        }
        if self.head_hidden.contains(&0) {
            return Err(Error::Config("student.head_hidden must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug)]
struct Block {
    down: Option<nn::Conv2d>,
    conv1: nn::Conv2d,
    conv2: nn::Conv2d,
}

/// Patch stem followed by residual conv stages.
#[derive(Debug)]
pub struct SmallCnn {
    patch: usize,
    stem: nn::Conv2d,
    blocks: Vec<Block>,
    out_channels: usize,
}

impl SmallCnn {
    pub fn new(s: &Scope, cfg: &StudentConfig) -> Result<Self> {
        let ch = &cfg.stage_channels;
        let stem = nn::conv2d(
            &s.pp("stem"),
            3 * cfg.patch * cfg.patch,
            ch[0],
            ConvSpec::k1(),
        )?;
        let mut blocks = Vec::with_capacity(ch.len());
        for (i, &c) in ch.iter().enumerate() {
            let b = s.pp("blocks").pp(i);
            blocks.push(Block {
                down: if i == 0 {
                    None
                } else {
                    Some(nn::conv2d(&b.pp("down"), ch[i - 1], c, ConvSpec::down2())?)
                },
                conv1: nn::conv2d(&b.pp("conv1"), c, c, ConvSpec::k3())?,
                conv2: nn::conv2d(&b.pp("conv2"), c, c, ConvSpec::k3())?,
            });
        }
        Ok(Self {
            patch: cfg.patch,
            stem,
            blocks,
            out_channels: *ch.last().expect("validated"),
        })
    }
}

impl StudentBackbone for SmallCnn {
    fn out_channels(&self) -> usize {
        self.out_channels
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = self
            .stem
            .forward(&nn::pixel_unshuffle(x, self.patch)?)?
            .silu_fused()?;
        for b in &self.blocks {
            if let Some(d) = &b.down {
                h = d.forward(&h)?.silu_fused()?;
            }
            let r = b.conv2.forward(&b.conv1.forward(&h)?.silu_fused()?)?;
            h = (h + r)?.silu_fused()?;
        }
        Ok(h)
    }
}

/// Student with an alignment head matching the teacher's quality map and a
/// score head of the same form as the teacher's.
#[derive(Debug)]
pub struct StudentModel {
    config: StudentConfig,
    store: ParamStore,
    backbone: Box<dyn StudentBackbone>,
    align: nn::Conv2d,
    head: RegressionHead,
}

#[derive(Debug)]
pub struct StudentOutput {
    pub quality: Tensor,
    pub scores: Tensor,
}

impl StudentModel {
    pub fn new(config: StudentConfig) -> Result<Self> {
        let store = ParamStore::new(config.seed, config.precision.dtype());
        Self::from_store(config, store)
    }

    pub fn from_store(config: StudentConfig, store: ParamStore) -> Result<Self> {
        config.validate()?;
        let root = store.scope("student");
        let backbone = SmallCnn::new(&root.pp("backbone"), &config)?;
        Self::with_backbone(config, store, Box::new(backbone))
    }

    /// Wraps any backbone whose parameters live in `store`.
    pub fn with_backbone(
        config: StudentConfig,
        store: ParamStore,
        backbone: Box<dyn StudentBackbone>,
    ) -> Result<Self> {
        let root = store.scope("student");
        let align = nn::conv2d(
            &root.pp("align"),
            backbone.out_channels(),
            QUALITY_CHANNELS,
            ConvSpec::k1(),
        )?;
        let head = RegressionHead::new(&root.pp("head"), config.head_hidden)?;
        Ok(Self {
            config,
            store,
            backbone,
            align,
            head,
        })
    }

    pub fn config(&self) -> &StudentConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn parameter_count(&self) -> usize {
        self.store.parameter_count()
    }

    pub fn forward(&self, x: &Tensor) -> Result<StudentOutput> {
        let (_, c, h, w) = x.dims4()?;
        let s = self.config.input_size;
        if (c, h, w) != (3, s, s) {
            return Err(Error::shape("student input", (3, s, s), (c, h, w)));
        }
        let f = self.backbone.forward(x)?;
        let f = nn::resize_bilinear(&f, QUALITY_SIZE, QUALITY_SIZE)?;
        let quality = self.align.forward(&f)?;
        check_finite(&quality, || "student feature map".into())?;
        let scores = self.head.forward(&quality)?;
        Ok(StudentOutput { quality, scores })
    }

    /// Host feature maps and scores for a batch, in input order.
    pub fn student_forward(
        &self,
        images: &[&PreprocessedImage],
    ) -> Result<Vec<(QualityFeatureMap, f64)>> {
        let x = PreprocessedImage::batch(images, self.store.dtype())?;
        let out = self.forward(&x)?;
        let maps = QualityFeatureMap::from_batch(&out.quality.detach())?;
        let scores = out.scores.detach().to_dtype(DType::F64)?.to_vec1::<f64>()?;
        Ok(maps.into_iter().zip(scores).collect())
    }
}

impl QualityModel for StudentModel {
    fn input_size(&self) -> usize {
        self.config.input_size
    }

    fn dtype(&self) -> DType {
        self.store.dtype()
    }

    fn score_tensor(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward(x)?.scores)
    }
}

/// Mean squared error over every element of two feature maps.
pub fn distill_loss(teacher: &QualityFeatureMap, student: &QualityFeatureMap) -> Result<f64> {
    let (a, b) = (teacher.values(), student.values());
    if a.len() != b.len() {
        return Err(Error::shape("feature maps", a.len(), b.len()));
    }
    let sum: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (f64::from(*x) - f64::from(*y)).powi(2))
        .sum();
    Ok(sum / a.len() as f64)
}

/// Element-wise MSE between batched feature maps, differentiable in `student`.
pub fn distill_loss_t(teacher: &Tensor, student: &Tensor) -> Result<Tensor> {
    if teacher.dims() != student.dims() {
        return Err(Error::shape("feature maps", teacher.dims(), student.dims()));
    }
    Ok((student - teacher)?.sqr()?.mean_all()?)
}

/// Teacher quality maps for every image, computed once without noise.
pub fn teacher_targets(
    teacher: &TeacherModel,
    images: &[PreprocessedImage],
) -> Result<Vec<QualityFeatureMap>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(4) {
        let refs: Vec<&PreprocessedImage> = chunk.iter().collect();
        let x = PreprocessedImage::batch(&refs, teacher.store().dtype())?;
        let q = teacher
            .forward(&x, &crate::backbone::NoisePolicy::Zero)?
            .quality
            .detach();
        out.extend(QualityFeatureMap::from_batch(&q)?);
    }
    Ok(out)
}

/// On-disk store of teacher quality maps keyed by teacher checkpoint hash
/// and image content hash.
#[derive(Debug, Clone)]
pub struct FeatureCache {
    dir: PathBuf,
    checkpoint_hash: String,
}

const CACHE_MAGIC: &[u8; 8] = b"DPQFMAP1";

impl FeatureCache {
    pub fn new(dir: impl Into<PathBuf>, checkpoint_hash: impl Into<String>) -> Self {
        Self {
            dir: dir.into(),
            checkpoint_hash: checkpoint_hash.into(),
        }
    }

    fn path(&self, image_hash: &str) -> PathBuf {
        self.dir
            .join(&self.checkpoint_hash)
            .join(format!("{image_hash}.qfm"))
    }

    pub fn encode(map: &QualityFeatureMap) -> Vec<u8> {
        let mut out = Vec::with_capacity(CACHE_MAGIC.len() + 4 * map.values().len());
        out.extend_from_slice(CACHE_MAGIC);
        for v in map.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<QualityFeatureMap> {
        let body = bytes
            .strip_prefix(CACHE_MAGIC.as_slice())
            .ok_or_else(|| Error::Checkpoint("feature cache entry has a bad header".into()))?;
        if body.len() != 4 * QualityFeatureMap::LEN {
            return Err(Error::Checkpoint(format!(
                "feature cache entry holds {} bytes, expected {}",
                body.len(),
                4 * QualityFeatureMap::LEN
            )));
        }
        let values = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        QualityFeatureMap::from_values(values)
    }

    pub fn get(&self, image_hash: &str) -> Result<Option<QualityFeatureMap>> {
        let p = self.path(image_hash);
        match std::fs::read(&p) {
            Ok(b) => Self::decode(&b).map(Some),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(Error::io(p, e)),
        }
    }

    pub fn put(&self, image_hash: &str, map: &QualityFeatureMap) -> Result<()> {
        let p = self.path(image_hash);
        let dir = p.parent().unwrap_or(Path::new("."));
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        std::fs::write(&p, Self::encode(map)).map_err(|e| Error::io(p, e))
    }

    /// Teacher maps for `images`, reading and filling the cache.
    pub fn targets(
        &self,
        teacher: &TeacherModel,
        images: &[PreprocessedImage],
    ) -> Result<Vec<QualityFeatureMap>> {
        let hashes: Vec<String> = images.iter().map(|i| i.content_hash()).collect();
        let mut out: Vec<Option<QualityFeatureMap>> =
            hashes.iter().map(|h| self.get(h)).collect::<Result<_>>()?;
        let missing: Vec<usize> = (0..images.len()).filter(|&i| out[i].is_none()).collect();
        if !missing.is_empty() {
            let todo: Vec<PreprocessedImage> = missing.iter().map(|&i| images[i].clone()).collect();
            for (&i, m) in missing.iter().zip(teacher_targets(teacher, &todo)?) {
                self.put(&hashes[i], &m)?;
                out[i] = Some(m);
            }
        }
        Ok(out.into_iter().map(|m| m.expect("filled")).collect())
    }
}

/// Student training options beyond the schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    /// Multiplier on the feature-matching term; 1 reproduces the plain sum,
    /// 0 drops it.
    pub distill_weight: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            distill_weight: 1.0,
        }
    }
}

/// Trains `student` against precomputed teacher maps `targets` (aligned with
/// `train.images`). The teacher itself is never touched.
pub fn train_student(
    student: &StudentModel,
    train: &Samples,
    targets: &[QualityFeatureMap],
    val: &Samples,
    schedule: &TrainSchedule,
    loss: &LossConfig,
    distill: &DistillConfig,
) -> Result<TrainLog> {
    schedule.validate("student")?;
    if train.len() < 2 {
        return Err(Error::Invalid(format!(
            "training set has {} image(s), need >= 2",
            train.len()
        )));
    }
    if targets.len() != train.len() {
        return Err(Error::shape("teacher targets", train.len(), targets.len()));
    }
    let store = student.store();
    let vars = store.vars_where(|_| true);
    let mut tr = Trainer::new(schedule, store, vars)?;
    let dtype = store.dtype();
    'outer: for epoch in 0..schedule.epochs {
        tr.start_epoch(epoch);
        for batch in tr.epoch_batches(train.len()) {
            let imgs: Vec<&PreprocessedImage> = batch.iter().map(|&i| &train.images[i]).collect();
            let maps: Vec<&QualityFeatureMap> = batch.iter().map(|&i| &targets[i]).collect();
            let y: Vec<f64> = batch.iter().map(|&i| train.scores[i]).collect();
            let x = PreprocessedImage::batch(&imgs, dtype)?;
            let fq = QualityFeatureMap::to_batch(&maps, dtype)?;
            let out = student.forward(&x)?;
            let yt = Tensor::new(y.as_slice(), x.device())?.to_dtype(dtype)?;
            let dl = distill_loss_t(&fq, &out.quality)?;
            let mse = mse_loss_t(&yt, &out.scores)?;
            let margin = margin_loss_t(&y, &out.scores, loss.lambda)?;
            let total = ((&dl * distill.distill_weight)? + (&mse + &margin)?)?;
            let record = LogRecord {
                step: tr.log.steps() + 1,
                epoch,
                lr: 0.0,
                mse: scalar(&mse)?,
                margin: scalar(&margin)?,
                distill: Some(scalar(&dl)?),
                total: scalar(&total)?,
                val_plcc: None,
                val_srcc: None,
            };
            tr.step(&total, record)?;
            tr.maybe_validate(student, val)?;
            if tr.done() {
                break 'outer;
            }
        }
    }
    tr.finish()
}

/// Mean feature MSE of `student` against `targets` over `images`.
pub fn feature_mse(
    student: &StudentModel,
    images: &[PreprocessedImage],
    targets: &[QualityFeatureMap],
) -> Result<f64> {
    if images.len() != targets.len() || images.is_empty() {
        return Err(Error::shape("feature targets", images.len(), targets.len()));
    }
    let mut sum = 0.0;
    for (chunk, tchunk) in images.chunks(8).zip(targets.chunks(8)) {
        let refs: Vec<&PreprocessedImage> = chunk.iter().collect();
        for ((m, _), t) in student.student_forward(&refs)?.iter().zip(tchunk) {
            sum += distill_loss(t, m)?;
        }
    }
    Ok(sum / images.len() as f64)
}
