//! Run configuration: one flat `key = value` document covering the model,
//! losses, both training schedules, data, seeds and output.
//!
//! Every key has a default (see `assets/default_config.kv`). Any key can be
//! overridden from the environment as `DPIQA_<KEY>` with dots replaced by
//! underscores, e.g. `DPIQA_TEACHER_LR=1e-4`.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;

use crate::backbone::{BackboneKind, UNetConfig};
use crate::conditioning::PromptTemplate;
use crate::dataset::SPLIT_REPEATS;
use crate::decoder::DecoderConfig;
use crate::distill::{DistillConfig, StudentConfig};
use crate::error::{Error, Result};
use crate::kv::{split_list, KvDoc};
use crate::model::{ModelConfig, Precision, TrainScope};
use crate::training::{LossConfig, TrainSchedule};

pub const DEFAULT_CONFIG: &str = include_str!("../assets/default_config.kv");

pub const ENV_PREFIX: &str = "DPIQA_";

/// Named dataset whose published schedule supplies the decay epochs and
/// validation step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetProfile {
    Clive,
    Koniq,
    Livefb,
    Spaq,
    Custom,
}

impl FromStr for DatasetProfile {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "clive" => Self::Clive,
            "koniq" => Self::Koniq,
            "livefb" => Self::Livefb,
            "spaq" => Self::Spaq,
            "custom" => Self::Custom,
            other => {
                return Err(Error::Config(format!(
                    "data.profile: expected clive, koniq, livefb, spaq or custom, got {other:?}"
                )))
            }
        })
    }
}

impl DatasetProfile {
    pub fn name(self) -> &'static str {
        match self {
            Self::Clive => "clive",
            Self::Koniq => "koniq",
            Self::Livefb => "livefb",
            Self::Spaq => "spaq",
            Self::Custom => "custom",
        }
    }

    pub fn teacher_decay(self) -> Vec<usize> {
        match self {
            Self::Koniq => vec![5],
            Self::Livefb => vec![2],
            _ => vec![],
        }
    }

    pub fn student_decay(self) -> Vec<usize> {
        match self {
            Self::Clive => vec![10, 25],
            Self::Koniq => vec![5],
            Self::Livefb => vec![4],
            Self::Spaq => vec![6],
            Self::Custom => vec![],
        }
    }

    pub fn validation_step(self) -> usize {
        match self {
            Self::Clive => 50,
            _ => 250,
        }
    }
}

/// Schedule fields as written in the config. `None` means "take it from the
/// dataset profile".
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub decay_epochs: Option<Vec<usize>>,
    pub decay_factor: f64,
    pub validation_step: Option<usize>,
    pub max_steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub backbone: BackboneKind,
    pub weights: Option<PathBuf>,
    pub timestep: usize,
    /// Text-encoder output width `d`.
    pub text_width: usize,
    pub text_seed: u64,
    pub template: Option<PathBuf>,
    pub text_adapter: bool,
    pub image_adapter: bool,
    pub precision: Precision,
    pub model_seed: u64,
    pub lambda: f64,
    pub teacher: ScheduleConfig,
    pub train_scope: TrainScope,
    pub student: ScheduleConfig,
    pub distill_weight: f64,
    pub student_seed: u64,
    pub profile: DatasetProfile,
    pub manifest: Option<PathBuf>,
    pub cross_manifest: Option<PathBuf>,
    pub val_fraction: f64,
    pub split_seeds: Vec<u64>,
    pub train_seed: u64,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneKind::Mini,
            weights: None,
            timestep: 1,
            text_width: 768,
            text_seed: 0,
            template: None,
            text_adapter: true,
            image_adapter: true,
            precision: Precision::F32,
            model_seed: 0,
            lambda: 0.25,
            teacher: ScheduleConfig {
                lr: 1e-5,
                batch_size: 12,
                epochs: 15,
                decay_epochs: None,
                decay_factor: 0.2,
                validation_step: None,
                max_steps: 0,
            },
            train_scope: TrainScope::Full,
            student: ScheduleConfig {
                lr: 1e-4,
                batch_size: 24,
                epochs: 30,
                decay_epochs: None,
                decay_factor: 0.2,
                validation_step: None,
                max_steps: 0,
            },
            distill_weight: 1.0,
            student_seed: 1,
            profile: DatasetProfile::Koniq,
            manifest: None,
            cross_manifest: None,
            val_fraction: 0.1,
            split_seeds: (0..SPLIT_REPEATS as u64).collect(),
            train_seed: 0,
            output_dir: PathBuf::from("runs"),
        }
    }
}

fn parse<T: FromStr>(doc: &KvDoc, key: &str, into: &mut T) -> Result<()>
where
    T::Err: std::fmt::Display,
{
    if let Some(v) = doc.get(key) {
        *into = v
            .parse()
            .map_err(|e| Error::Config(format!("{key}: cannot parse {v:?}: {e}")))?;
    }
    Ok(())
}

fn parse_bool(doc: &KvDoc, key: &str, into: &mut bool) -> Result<()> {
    if let Some(v) = doc.get(key) {
        *into = match v {
            "true" | "yes" | "1" => true,
            "false" | "no" | "0" => false,
            _ => {
                return Err(Error::Config(format!(
                    "{key}: expected true or false, got {v:?}"
                )))
            }
        };
    }
    Ok(())
}

fn parse_path(doc: &KvDoc, key: &str, into: &mut Option<PathBuf>) {
    if let Some(v) = doc.get(key) {
        *into = (!v.is_empty()).then(|| PathBuf::from(v));
    }
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    split_list(v)
        .iter()
        .map(|s| {
            s.parse()
                .map_err(|e| Error::Config(format!("{key}: cannot parse {s:?}: {e}")))
        })
        .collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(", ")
}

fn path_str(p: &Option<PathBuf>) -> String {
    p.as_ref()
        .map(|p| p.display().to_string())
        .unwrap_or_default()
}

fn scope_name(s: TrainScope) -> &'static str {
    match s {
        TrainScope::Full => "full",
        TrainScope::AdaptersAndDecoder => "adapters_and_decoder",
        TrainScope::DecoderOnly => "decoder_only",
    }
}

impl ScheduleConfig {
    fn read(&mut self, doc: &KvDoc, section: &str) -> Result<()> {
        let key = |f: &str| format!("{section}.{f}");
        parse(doc, &key("lr"), &mut self.lr)?;
        parse(doc, &key("batch_size"), &mut self.batch_size)?;
        parse(doc, &key("epochs"), &mut self.epochs)?;
        parse(doc, &key("decay_factor"), &mut self.decay_factor)?;
        parse(doc, &key("max_steps"), &mut self.max_steps)?;
        let k = key("decay_epochs");
        if let Some(v) = doc.get(&k) {
            self.decay_epochs = match v {
                "auto" => None,
                "none" | "" => Some(vec![]),
                _ => Some(parse_list(&k, v)?),
            };
        }
        let k = key("validation_step");
        if let Some(v) = doc.get(&k) {
            self.validation_step = match v {
                "auto" => None,
                _ => Some(
                    v.parse()
                        .map_err(|e| Error::Config(format!("{k}: cannot parse {v:?}: {e}")))?,
                ),
            };
        }
        Ok(())
    }

    fn write(&self, doc: &mut KvDoc, section: &str) {
        let mut put = |f: &str, v: String| doc.insert(format!("{section}.{f}"), v);
        put("lr", format!("{:e}", self.lr));
        put("batch_size", self.batch_size.to_string());
        put("epochs", self.epochs.to_string());
        put(
            "decay_epochs",
            match &self.decay_epochs {
                None => "auto".into(),
                Some(v) if v.is_empty() => "none".into(),
                Some(v) => join(v),
            },
        );
        put("decay_factor", self.decay_factor.to_string());
        put(
            "validation_step",
            self.validation_step
                .map_or("auto".into(), |v| v.to_string()),
        );
        put("max_steps", self.max_steps.to_string());
    }

    fn resolve(&self, decay: Vec<usize>, validation_step: usize, seed: u64) -> TrainSchedule {
        TrainSchedule {
            lr: self.lr,
            batch_size: self.batch_size,
            epochs: self.epochs,
            decay_epochs: self.decay_epochs.clone().unwrap_or(decay),
            decay_factor: self.decay_factor,
            validation_step: self.validation_step.unwrap_or(validation_step),
            max_steps: self.max_steps,
            seed,
        }
    }
}

impl RunConfig {
    /// Reads a config document on top of the defaults. Unknown keys are
    /// errors so typos do not pass silently.
    pub fn from_kv(doc: &KvDoc) -> Result<Self> {
        let known = Self::default().to_kv();
        if let Some(k) = doc.keys().find(|k| known.get(k).is_none()) {
            return Err(Error::Config(format!("{k}: unknown key")));
        }
        let mut c = Self::default();
        parse(doc, "model.backbone", &mut c.backbone)?;
        parse_path(doc, "model.weights", &mut c.weights);
        parse(doc, "model.timestep", &mut c.timestep)?;
        parse(doc, "model.text_width", &mut c.text_width)?;
        parse(doc, "model.text_seed", &mut c.text_seed)?;
        parse_path(doc, "model.template", &mut c.template);
        parse_bool(doc, "model.text_adapter", &mut c.text_adapter)?;
        parse_bool(doc, "model.image_adapter", &mut c.image_adapter)?;
        parse(doc, "model.precision", &mut c.precision)?;
        parse(doc, "model.seed", &mut c.model_seed)?;
        parse(doc, "loss.lambda", &mut c.lambda)?;
        c.teacher.read(doc, "teacher")?;
        parse(doc, "teacher.scope", &mut c.train_scope)?;
        c.student.read(doc, "student")?;
        parse(doc, "student.distill_weight", &mut c.distill_weight)?;
        parse(doc, "student.seed", &mut c.student_seed)?;
        parse(doc, "data.profile", &mut c.profile)?;
        parse_path(doc, "data.manifest", &mut c.manifest);
        parse_path(doc, "data.cross_manifest", &mut c.cross_manifest);
        parse(doc, "data.val_fraction", &mut c.val_fraction)?;
        if let Some(v) = doc.get("seeds.splits") {
            c.split_seeds = parse_list("seeds.splits", v)?;
        }
        parse(doc, "seeds.train", &mut c.train_seed)?;
        if let Some(v) = doc.get("output.dir") {
            c.output_dir = PathBuf::from(v);
        }
        c.validate()?;
        Ok(c)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let doc = KvDoc::parse(text).map_err(|e| Error::Config(format!("config {e}")))?;
        Self::from_kv(&doc)
    }

    /// Reads `path` (or only the defaults when `None`), then applies
    /// environment overrides from `env`, then explicit `key = value`
    /// overrides.
    pub fn load(
        path: Option<&Path>,
        env: impl IntoIterator<Item = (String, String)>,
        overrides: &[(String, String)],
    ) -> Result<Self> {
        let mut doc = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                KvDoc::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => KvDoc::default(),
        };
        let env: Vec<(String, String)> = env
            .into_iter()
            .filter(|(k, _)| k.starts_with(ENV_PREFIX))
            .collect();
        for key in Self::default().to_kv().keys() {
            let name = env_name(key);
            if let Some((_, v)) = env.iter().find(|(k, _)| *k == name) {
                doc.insert(key.to_string(), v.trim().to_string());
            }
        }
        for (k, v) in overrides {
            doc.insert(k.trim().to_string(), v.trim().to_string());
        }
        Self::from_kv(&doc)
    }

    /// The complete effective configuration; parsing it back yields `self`.
    pub fn to_kv(&self) -> KvDoc {
        let mut d = KvDoc::default();
        let mut put = |k: &str, v: String| d.insert(k.to_string(), v);
        put("model.backbone", self.backbone.to_string());
        put("model.weights", path_str(&self.weights));
        put("model.timestep", self.timestep.to_string());
        put("model.text_width", self.text_width.to_string());
        put("model.text_seed", self.text_seed.to_string());
        put("model.template", path_str(&self.template));
        put("model.text_adapter", self.text_adapter.to_string());
        put("model.image_adapter", self.image_adapter.to_string());
        put(
            "model.precision",
            match self.precision {
                Precision::F32 => "f32",
                Precision::F64 => "f64",
            }
            .into(),
        );
        put("model.seed", self.model_seed.to_string());
        put("loss.lambda", self.lambda.to_string());
        self.teacher.write(&mut d, "teacher");
        d.insert("teacher.scope".into(), scope_name(self.train_scope).into());
        self.student.write(&mut d, "student");
        let mut put = |k: &str, v: String| d.insert(k.to_string(), v);
        put("student.distill_weight", self.distill_weight.to_string());
        put("student.seed", self.student_seed.to_string());
        put("data.profile", self.profile.name().into());
        put("data.manifest", path_str(&self.manifest));
        put("data.cross_manifest", path_str(&self.cross_manifest));
        put("data.val_fraction", self.val_fraction.to_string());
        put("seeds.splits", join(&self.split_seeds));
        put("seeds.train", self.train_seed.to_string());
        put("output.dir", self.output_dir.display().to_string());
        d
    }

    /// Checks every field, naming the first offending one.
    pub fn validate(&self) -> Result<()> {
        let bad = |k: &str, msg: String| Err(Error::Config(format!("{k}: {msg}")));
        if self.timestep == 0 {
            return bad("model.timestep", "must be >= 1".into());
        }
        if self.text_width == 0 {
            return bad("model.text_width", "must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad(
                "loss.lambda",
                format!("must be in [0, 1], got {}", self.lambda),
            );
        }
        if !(self.distill_weight.is_finite() && self.distill_weight >= 0.0) {
            return bad(
                "student.distill_weight",
                format!("must be non-negative, got {}", self.distill_weight),
            );
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(
                "data.val_fraction",
                format!("must be in [0, 1), got {}", self.val_fraction),
            );
        }
        if self.split_seeds.len() != SPLIT_REPEATS {
            return bad(
                "seeds.splits",
                format!(
                    "expected {SPLIT_REPEATS} seeds, got {}",
                    self.split_seeds.len()
                ),
            );
        }
        if self.backbone == BackboneKind::Pretrained && self.weights.is_none() {
            return bad(
                "model.weights",
                "required for the pretrained backbone".into(),
            );
        }
        self.teacher_schedule().validate("teacher")?;
        self.student_schedule().validate("student")?;
        Ok(())
    }

    pub fn teacher_schedule(&self) -> TrainSchedule {
        self.teacher.resolve(
            self.profile.teacher_decay(),
            self.profile.validation_step(),
            self.train_seed,
        )
    }

    pub fn student_schedule(&self) -> TrainSchedule {
        self.student.resolve(
            self.profile.student_decay(),
            self.profile.validation_step(),
            self.train_seed,
        )
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            lambda: self.lambda,
        }
    }

    pub fn distill(&self) -> DistillConfig {
        DistillConfig {
            distill_weight: self.distill_weight,
        }
    }

    /// The configured template file, or the built-in one.
    pub fn load_template(&self) -> Result<PromptTemplate> {
        match &self.template {
            None => Ok(PromptTemplate::default_template()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|_| {
                    Error::Config(format!("model.template: cannot read {}", p.display()))
                })?;
                PromptTemplate::parse(&text)
            }
        }
    }

    /// Teacher architecture for this run.
    pub fn model_config(&self) -> Result<ModelConfig> {
        let d = self.text_width;
        let mut m = match self.backbone {
            BackboneKind::Mini => ModelConfig::mini(d),
            BackboneKind::Pretrained => {
                let mut m = ModelConfig::mini(d);
                m.backbone = BackboneKind::Pretrained;
                m.unet = UNetConfig::sd15();
                m.unet.cross_dim = d;
                m.decoder = DecoderConfig::full();
                m
            }
        };
        m.timestep = self.timestep;
        m.precision = self.precision;
        m.seed = self.model_seed;
        m.use_text_adapter = self.text_adapter;
        m.use_image_adapter = self.image_adapter;
        m.text_adapter_hidden = d;
        m.template = (&self.load_template()?).into();
        m.validate()?;
        Ok(m)
    }

    pub fn student_config(&self) -> StudentConfig {
        StudentConfig {
            precision: self.precision,
            seed: self.student_seed,
            ..StudentConfig::small()
        }
    }

    /// Fails with the field name when a command needs a manifest that is
    /// unset or missing.
    pub fn require_manifest(&self) -> Result<&Path> {
        match &self.manifest {
            None => Err(Error::Config("data.manifest: required but not set".into())),
            Some(p) if !p.is_file() => Err(Error::Config(format!(
                "data.manifest: {} does not exist",
                p.display()
            ))),
            Some(p) => Ok(p),
        }
    }
}

pub fn env_name(key: &str) -> String {
    format!(
        "{ENV_PREFIX}{}",
        key.to_ascii_uppercase().replace(['.', '-'], "_")
    )
}
