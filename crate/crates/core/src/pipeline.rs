//! End-to-end commands over a [`RunConfig`]: train the teacher on the split
//! protocol, distill a student, predict, evaluate and draw saliency maps.
//! Each returns a serialisable report; nothing here reads the wall clock, so
//! reports are reproducible for fixed seeds.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use serde::Serialize;

use crate::backbone::BackboneKind;
use crate::checkpoint::FORMAT_VERSION;
use crate::checkpoint::{
    content_hash, ensure_all_used, Checkpoint, CheckpointKind, CheckpointMeta,
};
use crate::conditioning::HashTextEncoder;
use crate::config::RunConfig;
use crate::dataset::{load_image, load_manifest, make_split, make_splits, preprocess_image_to};
use crate::dataset::{ImageRecord, PreprocessedImage};
use crate::distill::{train_student, FeatureCache, StudentConfig, StudentModel};
use crate::error::{Error, Result};
use crate::eval::{evaluate_samples, saliency_map, EvalMode, EvalReport, SplitMetrics};
use crate::model::{ModelConfig, QualityModel, TeacherModel};
use crate::training::{train_teacher, Samples, TrainLog};

/// A manifest with every image decoded and preprocessed.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub id: String,
    pub records: Vec<ImageRecord>,
    pub samples: Samples,
}

impl Dataset {
    pub fn load(manifest: &Path, input_size: usize) -> Result<Self> {
        let records = load_manifest(manifest)?;
        if records.is_empty() {
            return Err(Error::Manifest {
                path: manifest.to_path_buf(),
                message: "no rows".into(),
            });
        }
        let mut images = Vec::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            let img = load_image(&r.image_ref)
                .and_then(|img| preprocess_image_to(&img, input_size))
                .map_err(|e| Error::ManifestRow {
                    path: manifest.to_path_buf(),
                    row: i + 1,
                    message: e.to_string(),
                })?;
            images.push(img);
        }
        let scores = records.iter().map(|r| r.mos_norm).collect();
        Ok(Self {
            id: records[0].dataset_id.clone(),
            samples: Samples::new(images, scores)?,
            records,
        })
    }
}

/// A teacher or student restored from a checkpoint.
#[derive(Debug)]
pub enum LoadedModel {
    Teacher(TeacherModel),
    Student(StudentModel),
}

impl LoadedModel {
    pub fn kind(&self) -> CheckpointKind {
        match self {
            Self::Teacher(_) => CheckpointKind::Teacher,
            Self::Student(_) => CheckpointKind::Student,
        }
    }

    fn inner(&self) -> &dyn QualityModel {
        match self {
            Self::Teacher(m) => m,
            Self::Student(m) => m,
        }
    }
}

impl QualityModel for LoadedModel {
    fn input_size(&self) -> usize {
        self.inner().input_size()
    }

    fn dtype(&self) -> DType {
        self.inner().dtype()
    }

    fn score_tensor(&self, x: &Tensor) -> Result<Tensor> {
        self.inner().score_tensor(x)
    }
}

/// A loaded checkpoint with its metadata and content hash.
#[derive(Debug)]
pub struct Loaded {
    pub model: LoadedModel,
    pub meta: CheckpointMeta,
    pub hash: String,
}

fn meta_config<T: serde::de::DeserializeOwned>(meta: &CheckpointMeta) -> Result<T> {
    serde_json::from_value(meta.config.clone())
        .map_err(|e| Error::Checkpoint(format!("architecture record: {e}")))
}

/// Restores any checkpoint. Every stored tensor must be used.
pub fn load_checkpoint(path: &Path) -> Result<Loaded> {
    let (ckpt, hash) = Checkpoint::load(path)?;
    let meta = ckpt.meta.clone();
    let model = match meta.kind {
        CheckpointKind::Teacher => {
            let config: ModelConfig = meta_config(&meta)?;
            let store = ckpt.into_store(config.precision.dtype());
            let m = TeacherModel::from_store(config, store)?;
            ensure_all_used(m.store())?;
            LoadedModel::Teacher(m)
        }
        CheckpointKind::Student => {
            let config: StudentConfig = meta_config(&meta)?;
            let store = ckpt.into_store(config.precision.dtype());
            let m = StudentModel::from_store(config, store)?;
            ensure_all_used(m.store())?;
            LoadedModel::Student(m)
        }
    };
    Ok(Loaded { model, meta, hash })
}

/// A fresh teacher as configured.
pub fn build_teacher(cfg: &RunConfig) -> Result<TeacherModel> {
    let mc = cfg.model_config()?;
    match mc.backbone {
        BackboneKind::Mini => {
            TeacherModel::new(mc, &HashTextEncoder::new(cfg.text_width, cfg.text_seed))
        }
        BackboneKind::Pretrained => Err(Error::Config(
            "model.backbone: the pretrained backbone is not available in this build".into(),
        )),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_log(path: &Path, log: &TrainLog) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    log.write_jsonl(&mut BufWriter::new(f))
}

pub fn to_json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).map_err(|e| Error::Invalid(e.to_string()))
}

fn log_extra(log: &TrainLog) -> BTreeMap<String, String> {
    let mut extra = BTreeMap::new();
    extra.insert("steps".into(), log.steps().to_string());
    if let Some(s) = log.best_step {
        extra.insert("best_step".into(), s.to_string());
    }
    if let Some(s) = log.best_val_srcc {
        extra.insert("best_val_srcc".into(), format!("{s:.17e}"));
    }
    extra
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplitCheckpoint {
    pub repeat_index: usize,
    pub seed: u64,
    /// File name inside the output directory.
    pub file: String,
    pub hash: String,
    pub steps: usize,
    pub best_step: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainTeacherReport {
    pub report: EvalReport,
    pub checkpoints: Vec<SplitCheckpoint>,
}

/// Trains one teacher per split (the first `splits` of the configured five)
/// and evaluates each on its test part. Writes checkpoints, logs, the
/// effective config and `teacher_report.json` under the output directory.
pub fn train_teacher_splits(cfg: &RunConfig, splits: usize) -> Result<TrainTeacherReport> {
    cfg.validate()?;
    if !(1..=cfg.split_seeds.len()).contains(&splits) {
        return Err(Error::Config(format!(
            "splits: must be between 1 and {}, got {splits}",
            cfg.split_seeds.len()
        )));
    }
    let manifest = cfg.require_manifest()?;
    let mc = cfg.model_config()?;
    let data = Dataset::load(manifest, mc.input_size)?;
    let plans = make_splits(data.samples.len(), &cfg.split_seeds)?;
    let out = &cfg.output_dir;
    write_file(
        &out.join("effective_config.kv"),
        cfg.to_kv().to_string().as_bytes(),
    )?;

    let schedule = cfg.teacher_schedule();
    let mut metrics = Vec::new();
    let mut checkpoints = Vec::new();
    for plan in plans.iter().take(splits) {
        log::info!(
            "split {} (seed {}): {} train / {} test",
            plan.repeat_index,
            plan.seed,
            plan.train.len(),
            plan.test.len()
        );
        let model = build_teacher(cfg)?;
        let (train, val) = data
            .samples
            .subset(&plan.train)
            .carve_validation(cfg.val_fraction, cfg.train_seed);
        let log = train_teacher(
            &model,
            &train,
            &val,
            &schedule,
            &cfg.loss(),
            cfg.train_scope,
        )?;
        let (plcc, srcc) = evaluate_samples(&model, &data.samples.subset(&plan.test))?;
        metrics.push(SplitMetrics {
            seed: plan.seed,
            plcc,
            srcc,
        });
        let meta = CheckpointMeta {
            format_version: FORMAT_VERSION,
            kind: CheckpointKind::Teacher,
            config: serde_json::to_value(model.config())
                .map_err(|e| Error::Checkpoint(e.to_string()))?,
            dataset_id: data.id.clone(),
            split_seed: plan.seed,
            repeat_index: plan.repeat_index,
            extra: log_extra(&log),
        };
        let file = format!("teacher_split{}.safetensors", plan.repeat_index);
        let hash = Checkpoint::from_store(meta, model.store())?.save(&out.join(&file))?;
        write_log(
            &out.join(format!("teacher_split{}.log.jsonl", plan.repeat_index)),
            &log,
        )?;
        checkpoints.push(SplitCheckpoint {
            repeat_index: plan.repeat_index,
            seed: plan.seed,
            file,
            hash,
            steps: log.steps(),
            best_step: log.best_step,
        });
    }
    // one digest standing for all split checkpoints
    let joined: String = checkpoints.iter().map(|c| c.hash.as_str()).collect();
    let report = EvalReport::new(
        data.id.clone(),
        content_hash(joined.as_bytes()),
        EvalMode::Splits,
        metrics,
    )?;
    let r = TrainTeacherReport {
        report,
        checkpoints,
    };
    write_file(&out.join("teacher_report.json"), to_json(&r)?.as_bytes())?;
    Ok(r)
}

/// Refuses a teacher checkpoint whose condition or timestep differs from the
/// configuration.
pub fn check_compatible(teacher: &ModelConfig, cfg: &RunConfig) -> Result<()> {
    let want = cfg.model_config()?;
    let mut problems = Vec::new();
    if teacher.cross_dim() != want.cross_dim() {
        problems.push(format!(
            "model.text_width: checkpoint has d = {}, config has {}",
            teacher.cross_dim(),
            want.cross_dim()
        ));
    }
    if teacher.timestep != want.timestep {
        problems.push(format!(
            "model.timestep: checkpoint has t = {}, config has {}",
            teacher.timestep, want.timestep
        ));
    }
    if teacher.template != want.template {
        problems.push("model.template: checkpoint was trained with a different template".into());
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "teacher checkpoint does not match the config: {}",
            problems.join("; ")
        )))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Metrics {
    pub plcc: f64,
    pub srcc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DistillReport {
    pub dataset_id: String,
    pub split_seed: u64,
    pub teacher_checkpoint_hash: String,
    pub student_checkpoint_hash: String,
    pub teacher: Metrics,
    pub student: Metrics,
    pub teacher_parameters: usize,
    pub student_parameters: usize,
    pub steps: usize,
}

/// Distills a student from a teacher checkpoint on the teacher's own train
/// split and compares both on its test split.
pub fn distill(cfg: &RunConfig, teacher_path: &Path) -> Result<DistillReport> {
    cfg.validate()?;
    let manifest = cfg.require_manifest()?;
    let loaded = load_checkpoint(teacher_path)?;
    let LoadedModel::Teacher(teacher) = &loaded.model else {
        return Err(Error::Config(format!(
            "teacher: {} is a student checkpoint",
            teacher_path.display()
        )));
    };
    check_compatible(teacher.config(), cfg)?;
    let data = Dataset::load(manifest, teacher.config().input_size)?;
    if data.id != loaded.meta.dataset_id {
        return Err(Error::Config(format!(
            "data.manifest: dataset {:?} differs from the teacher's {:?}",
            data.id, loaded.meta.dataset_id
        )));
    }
    let plan = make_split(
        data.samples.len(),
        loaded.meta.split_seed,
        loaded.meta.repeat_index,
    );
    let train_all = data.samples.subset(&plan.train);
    let test = data.samples.subset(&plan.test);

    let cache = FeatureCache::new(cfg.output_dir.join("feature_cache"), loaded.hash.clone());
    let (train, val) = train_all.carve_validation(cfg.val_fraction, cfg.train_seed);
    let targets = cache.targets(teacher, &train.images)?;
    let sc = StudentConfig {
        input_size: teacher.config().input_size,
        ..cfg.student_config()
    };
    let student = StudentModel::new(sc)?;
    let log = train_student(
        &student,
        &train,
        &targets,
        &val,
        &cfg.student_schedule(),
        &cfg.loss(),
        &cfg.distill(),
    )?;
    let (tp, ts) = evaluate_samples(teacher, &test)?;
    let (sp, ss) = evaluate_samples(&student, &test)?;
    let meta = CheckpointMeta {
        format_version: FORMAT_VERSION,
        kind: CheckpointKind::Student,
        config: serde_json::to_value(student.config())
            .map_err(|e| Error::Checkpoint(e.to_string()))?,
        dataset_id: data.id.clone(),
        split_seed: plan.seed,
        repeat_index: plan.repeat_index,
        extra: log_extra(&log),
    };
    let out = &cfg.output_dir;
    let hash =
        Checkpoint::from_store(meta, student.store())?.save(&out.join("student.safetensors"))?;
    write_log(&out.join("student.log.jsonl"), &log)?;
    let report = DistillReport {
        dataset_id: data.id,
        split_seed: plan.seed,
        teacher_checkpoint_hash: loaded.hash.clone(),
        student_checkpoint_hash: hash,
        teacher: Metrics { plcc: tp, srcc: ts },
        student: Metrics { plcc: sp, srcc: ss },
        teacher_parameters: teacher.parameter_count(),
        student_parameters: student.parameter_count(),
        steps: log.steps(),
    };
    write_file(
        &out.join("distill_report.json"),
        to_json(&report)?.as_bytes(),
    )?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Prediction {
    pub image: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    /// Saliency file name, beside the report.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub saliency: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PredictReport {
    pub checkpoint_hash: String,
    pub kind: CheckpointKind,
    pub predictions: Vec<Prediction>,
}

impl PredictReport {
    pub fn failures(&self) -> usize {
        self.predictions
            .iter()
            .filter(|p| p.error.is_some())
            .count()
    }
}

fn saliency_name(dir: &Path, index: usize, image: &Path) -> PathBuf {
    let stem = image
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into());
    dir.join(format!("{index:03}_{stem}_saliency.png"))
}

/// Scores each image in order. Unreadable images become error records.
/// With `saliency_dir`, also writes one saliency PNG per scored image.
pub fn predict(
    loaded: &Loaded,
    images: &[PathBuf],
    saliency_dir: Option<&Path>,
) -> Result<PredictReport> {
    let model = &loaded.model;
    let mut predictions = Vec::with_capacity(images.len());
    for (i, path) in images.iter().enumerate() {
        let pre = load_image(path).and_then(|img| preprocess_image_to(&img, model.input_size()));
        let mut p = Prediction {
            image: path.clone(),
            score: None,
            saliency: None,
            error: None,
        };
        match pre {
            Err(e) => p.error = Some(e.to_string()),
            Ok(img) => {
                p.score = Some(model.predict_batch(&[&img])?[0]);
                if let Some(dir) = saliency_dir {
                    let out = saliency_name(dir, i, path);
                    let map = saliency_map(model, &img)?;
                    write_file(&out, &map.to_png_bytes()?)?;
                    p.saliency = out.file_name().map(|f| f.to_string_lossy().into_owned());
                }
            }
        }
        predictions.push(p);
    }
    Ok(PredictReport {
        checkpoint_hash: loaded.hash.clone(),
        kind: model.kind(),
        predictions,
    })
}

/// Split protocol on one manifest, or zero-shot evaluation on `cross`.
pub fn evaluate(
    loaded: &Loaded,
    cfg: &RunConfig,
    manifest: &Path,
    cross: Option<&Path>,
) -> Result<EvalReport> {
    let size = loaded.model.input_size();
    let home = Dataset::load(manifest, size)?;
    match cross {
        None => {
            let plans = make_splits(home.samples.len(), &cfg.split_seeds)?;
            let mut metrics = Vec::new();
            for plan in &plans {
                let (plcc, srcc) =
                    evaluate_samples(&loaded.model, &home.samples.subset(&plan.test))?;
                metrics.push(SplitMetrics {
                    seed: plan.seed,
                    plcc,
                    srcc,
                });
            }
            EvalReport::new(home.id, loaded.hash.clone(), EvalMode::Splits, metrics)
        }
        Some(other) => {
            let target = Dataset::load(other, size)?;
            let (plcc, srcc) = crate::eval::cross_dataset_eval(
                &loaded.model,
                &home.id,
                &target.id,
                &target.samples,
            )?;
            let mut r = EvalReport::new(
                target.id,
                loaded.hash.clone(),
                EvalMode::CrossDataset,
                vec![SplitMetrics {
                    seed: 0,
                    plcc,
                    srcc,
                }],
            )?;
            r.train_dataset_id = Some(home.id);
            Ok(r)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SaliencyRecord {
    pub image: PathBuf,
    pub map: PathBuf,
    /// Top-left, top-right, bottom-left, bottom-right.
    pub quadrant_means: [f64; 4],
}

/// Writes one saliency PNG per image into `dir`.
pub fn saliency(loaded: &Loaded, images: &[PathBuf], dir: &Path) -> Result<Vec<SaliencyRecord>> {
    let mut out = Vec::with_capacity(images.len());
    for (i, path) in images.iter().enumerate() {
        let img: PreprocessedImage =
            preprocess_image_to(&load_image(path)?, loaded.model.input_size())?;
        let map = saliency_map(&loaded.model, &img)?;
        let file = saliency_name(dir, i, path);
        write_file(&file, &map.to_png_bytes()?)?;
        out.push(SaliencyRecord {
            image: path.clone(),
            map: file,
            quadrant_means: map.quadrant_means(),
        });
    }
    Ok(out)
}
