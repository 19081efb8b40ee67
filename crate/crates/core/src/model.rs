//! The teacher bundle: condition, adapters, backbone, decoder and head wired
//! into one scoring model.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::backbone::{
    extract_features, Backbone, BackboneKind, DenoiserBackbone, FeatureTapSet, ImageAdapter,
    NoisePolicy, NoiseSchedule, UNetConfig,
};
use crate::conditioning::{
    build_condition, ConditionMatrix, PromptTemplate, TextAdapter, TextEncoder,
};
use crate::dataset::{preprocess_image_to, PreprocessedImage};
use crate::decoder::{DecoderConfig, QfdTrace, QualityFeatureDecoder, RegressionHead};
use crate::error::{Error, Result};
use crate::nn::{Init, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Self::F32),
            "f64" => Ok(Self::F64),
            other => Err(Error::Config(format!(
                "precision must be f32 or f64, got {other:?}"
            ))),
        }
    }
}

/// Everything needed to rebuild a teacher's architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneKind,
    pub input_size: usize,
    pub timestep: usize,
    pub precision: Precision,
    pub seed: u64,
    pub unet: UNetConfig,
    pub decoder: DecoderConfig,
    pub text_adapter_hidden: usize,
    pub use_text_adapter: bool,
    pub use_image_adapter: bool,
    /// Start the image adapter's output projections at zero.
    pub image_adapter_zero_init: bool,
    pub template: TemplateSnapshot,
}

/// Serialisable copy of a [`PromptTemplate`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateSnapshot {
    pub scenes: Vec<String>,
    pub distortions: Vec<String>,
    pub quality_levels: Vec<String>,
}

impl From<&PromptTemplate> for TemplateSnapshot {
    fn from(t: &PromptTemplate) -> Self {
        Self {
            scenes: t.scenes.clone(),
            distortions: t.distortions.clone(),
            quality_levels: t.quality_levels.clone(),
        }
    }
}

impl TemplateSnapshot {
    pub fn to_template(&self) -> Result<PromptTemplate> {
        PromptTemplate::new(
            self.scenes.clone(),
            self.distortions.clone(),
            self.quality_levels.clone(),
        )
    }
}

impl ModelConfig {
    /// Mini backbone and narrow decoder with the given condition width.
    pub fn mini(cross_dim: usize) -> Self {
        Self {
            backbone: BackboneKind::Mini,
            input_size: crate::dataset::INPUT_SIZE,
            timestep: 1,
            precision: Precision::F32,
            seed: 0,
            unet: UNetConfig::mini(cross_dim),
            decoder: DecoderConfig::desk(),
            text_adapter_hidden: cross_dim,
            use_text_adapter: true,
            use_image_adapter: true,
            image_adapter_zero_init: true,
            template: (&PromptTemplate::default_template()).into(),
        }
    }

    pub fn cross_dim(&self) -> usize {
        self.unet.cross_dim
    }

    pub fn validate(&self) -> Result<()> {
        self.unet.validate()?;
        self.decoder.validate()?;
        self.template.to_template()?;
        let f = crate::backbone::LATENT_FACTOR << (crate::backbone::STAGES - 1);
        if self.input_size == 0 || !self.input_size.is_multiple_of(f) {
            return Err(Error::Config(format!(
                "model.input_size must be a positive multiple of {f}, got {}",
                self.input_size
            )));
        }
        if self.timestep == 0 {
            return Err(Error::Config("model.timestep must be >= 1".into()));
        }
        if self.text_adapter_hidden == 0 {
            return Err(Error::Config(
                "model.text_adapter_hidden must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Which parameter groups the optimiser updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainScope {
    /// Everything except the fixed latent encoder and the base condition.
    Full,
    /// Adapters, decoder and head; the denoiser is frozen.
    AdaptersAndDecoder,
    /// Decoder and head only.
    DecoderOnly,
}

impl std::str::FromStr for TrainScope {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "adapters_and_decoder" => Ok(Self::AdaptersAndDecoder),
            "decoder_only" => Ok(Self::DecoderOnly),
            other => Err(Error::Config(format!(
                "train scope must be full, adapters_and_decoder or decoder_only, got {other:?}"
            ))),
        }
    }
}

impl TrainScope {
    pub fn includes(self, name: &str) -> bool {
        let group = name.split('.').next().unwrap_or("");
        match group {
            "vae" | "condition" => false,
            "unet" => self == TrainScope::Full,
            "text_adapter" | "image_adapter" => self != TrainScope::DecoderOnly,
            _ => true,
        }
    }
}

/// Anything that scores preprocessed images.
pub trait QualityModel {
    fn input_size(&self) -> usize;
    fn dtype(&self) -> DType;

    /// Differentiable scores for an NCHW batch.
    fn score_tensor(&self, x: &Tensor) -> Result<Tensor>;

    /// Scores in input order, evaluated in chunks without noise.
    fn predict_batch(&self, images: &[&PreprocessedImage]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(8) {
            let x = PreprocessedImage::batch(chunk, self.dtype())?;
            let y = self.score_tensor(&x)?.detach().to_dtype(DType::F64)?;
            out.extend(y.to_vec1::<f64>()?);
        }
        Ok(out)
    }
}

/// The diffusion-feature teacher.
#[derive(Debug)]
pub struct TeacherModel {
    config: ModelConfig,
    store: ParamStore,
    base_condition: Tensor,
    text_adapter: Option<TextAdapter>,
    backbone: Backbone,
    image_adapter: Option<ImageAdapter>,
    qfd: QualityFeatureDecoder,
    head: RegressionHead,
    schedule: NoiseSchedule,
}

/// Outputs of one teacher pass.
#[derive(Debug)]
pub struct TeacherOutput {
    pub taps: FeatureTapSet,
    pub quality: Tensor,
    pub scores: Tensor,
    pub trace: QfdTrace,
}

impl TeacherModel {
    /// Fresh model whose constant condition comes from `encoder`.
    pub fn new(config: ModelConfig, encoder: &dyn TextEncoder) -> Result<Self> {
        config.validate()?;
        if encoder.width() != config.cross_dim() {
            return Err(Error::shape(
                "text encoder width",
                config.cross_dim(),
                encoder.width(),
            ));
        }
        let condition = build_condition(encoder, &config.template.to_template()?)?;
        let store = ParamStore::new(config.seed, config.precision.dtype());
        Self::assemble(config, store, Some(&condition))
    }

    /// Rebuilds a model around parameters that already hold
    /// `condition.base`.
    pub fn from_store(config: ModelConfig, store: ParamStore) -> Result<Self> {
        config.validate()?;
        Self::assemble(config, store, None)
    }

    fn assemble(
        config: ModelConfig,
        store: ParamStore,
        condition: Option<&ConditionMatrix>,
    ) -> Result<Self> {
        let root = store.scope("");
        let k = config.template.to_template()?.len();
        let d = config.cross_dim();
        if let Some(c) = condition {
            if c.shape() != (k, d) {
                return Err(Error::shape("condition matrix", (k, d), c.shape()));
            }
            store.preload("condition.base", c.to_tensor(store.dtype())?);
        }
        let base_condition = store.get("condition.base", &[k, d], Init::Zeros)?;
        let base_condition = base_condition.detach();

        let backbone = match config.backbone {
            BackboneKind::Mini => Backbone::mini(&root, config.unet.clone())?,
            BackboneKind::Pretrained => {
                return Err(Error::Config(
                    "model.backbone: the pretrained backbone is not available in this build".into(),
                ))
            }
        };
        Self::finish(config, store, base_condition, backbone)
    }

    pub(crate) fn finish(
        config: ModelConfig,
        store: ParamStore,
        base_condition: Tensor,
        backbone: Backbone,
    ) -> Result<Self> {
        let root = store.scope("");
        let d = config.cross_dim();
        let text_adapter = if config.use_text_adapter {
            Some(TextAdapter::new(
                &root.pp("text_adapter"),
                d,
                config.text_adapter_hidden,
            )?)
        } else {
            None
        };
        let image_adapter = if config.use_image_adapter {
            Some(ImageAdapter::new(
                &root.pp("image_adapter"),
                backbone.latent_factor(),
                &backbone.down_tap_shapes(config.input_size),
                config.image_adapter_zero_init,
            )?)
        } else {
            None
        };
        let qfd = QualityFeatureDecoder::new(
            &root.pp("qfd"),
            &config.decoder,
            &backbone.up_tap_shapes(config.input_size),
        )?;
        let head = RegressionHead::new(&root.pp("head"), config.decoder.head_hidden)?;
        Ok(Self {
            config,
            store,
            base_condition,
            text_adapter,
            backbone,
            image_adapter,
            qfd,
            head,
            schedule: NoiseSchedule::stable_diffusion(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn image_adapter(&self) -> Option<&ImageAdapter> {
        self.image_adapter.as_ref()
    }

    pub fn text_adapter(&self) -> Option<&TextAdapter> {
        self.text_adapter.as_ref()
    }

    pub fn decoder(&self) -> &QualityFeatureDecoder {
        &self.qfd
    }

    pub fn head(&self) -> &RegressionHead {
        &self.head
    }

    /// The encoder's pooled sentence embeddings, before the text adapter.
    pub fn base_condition(&self) -> &Tensor {
        &self.base_condition
    }

    /// The condition fed to cross-attention.
    pub fn condition(&self) -> Result<Tensor> {
        match &self.text_adapter {
            Some(a) => a.forward(&self.base_condition),
            None => Ok(self.base_condition.clone()),
        }
    }

    /// Learnable parameters; the stored base condition is a constant and
    /// is not counted.
    pub fn parameter_count(&self) -> usize {
        self.store
            .named_vars()
            .iter()
            .filter(|(n, _)| !n.starts_with("condition."))
            .map(|(_, v)| v.elem_count())
            .sum()
    }

    pub fn features(&self, x: &Tensor, noise: &NoisePolicy) -> Result<FeatureTapSet> {
        let cond = self.condition()?;
        extract_features(
            &self.backbone,
            &self.schedule,
            x,
            self.config.timestep,
            &cond,
            self.image_adapter.as_ref(),
            noise,
        )
    }

    pub fn forward(&self, x: &Tensor, noise: &NoisePolicy) -> Result<TeacherOutput> {
        let taps = self.features(x, noise)?;
        let (quality, trace) = self.qfd.forward_traced(&taps.up)?;
        let scores = self.head.forward(&quality)?;
        Ok(TeacherOutput {
            taps,
            quality,
            scores,
            trace,
        })
    }

    /// Scores one decoded image end to end.
    pub fn predict(&self, image: &image::DynamicImage) -> Result<f64> {
        let p = preprocess_image_to(image, self.config.input_size)?;
        Ok(self.predict_batch(&[&p])?[0])
    }
}

impl QualityModel for TeacherModel {
    fn input_size(&self) -> usize {
        self.config.input_size
    }

    fn dtype(&self) -> DType {
        self.store.dtype()
    }

    fn score_tensor(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward(x, &NoisePolicy::Zero)?.scores)
    }
}
