//! Correlation metrics, the median-of-splits report, cross-dataset
//! evaluation and gradient saliency maps.

use std::path::Path;

use candle_core::{DType, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::dataset::{PreprocessedImage, SplitPlan};
use crate::error::{Error, Result};
use crate::model::QualityModel;
use crate::training::Samples;

fn check_pair(y: &[f64], yp: &[f64]) -> Result<()> {
    if y.len() != yp.len() {
        return Err(Error::shape("metric inputs", y.len(), yp.len()));
    }
    if y.len() < 2 {
        return Err(Error::Invalid(format!(
            "correlation needs n >= 2, got {}",
            y.len()
        )));
    }
    if y.iter().chain(yp).any(|v| !v.is_finite()) {
        return Err(Error::Invalid("correlation of non-finite values".into()));
    }
    Ok(())
}

fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::Invalid(
            "correlation of a constant vector is undefined".into(),
        ));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Pearson linear correlation, without any nonlinear remapping.
pub fn plcc(y: &[f64], yp: &[f64]) -> Result<f64> {
    check_pair(y, yp)?;
    pearson(y, yp)
}

/// 1-based ranks; tied values share the average of their positions.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties.
pub fn srcc(y: &[f64], yp: &[f64]) -> Result<f64> {
    check_pair(y, yp)?;
    pearson(&average_ranks(y), &average_ranks(yp))
}

/// Median; the mean of the middle two for even lengths.
pub fn median(v: &[f64]) -> Result<f64> {
    if v.is_empty() {
        return Err(Error::Invalid("median of nothing".into()));
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    Ok(if s.len() % 2 == 1 {
        s[m]
    } else {
        (s[m - 1] + s[m]) / 2.0
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    Splits,
    CrossDataset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub seed: u64,
    pub plcc: f64,
    pub srcc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset_id: String,
    /// Training dataset, for cross-dataset reports.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_dataset_id: Option<String>,
    pub checkpoint_hash: String,
    pub mode: EvalMode,
    pub splits: Vec<SplitMetrics>,
    pub median_plcc: f64,
    pub median_srcc: f64,
}

impl EvalReport {
    pub fn new(
        dataset_id: impl Into<String>,
        checkpoint_hash: impl Into<String>,
        mode: EvalMode,
        splits: Vec<SplitMetrics>,
    ) -> Result<Self> {
        let p: Vec<f64> = splits.iter().map(|s| s.plcc).collect();
        let s: Vec<f64> = splits.iter().map(|s| s.srcc).collect();
        Ok(Self {
            dataset_id: dataset_id.into(),
            train_dataset_id: None,
            checkpoint_hash: checkpoint_hash.into(),
            mode,
            median_plcc: median(&p)?,
            median_srcc: median(&s)?,
            splits,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Invalid(e.to_string()))
    }
}

/// Metrics of `model` on the test indices of `split`.
pub fn evaluate_split(
    model: &dyn QualityModel,
    split: &SplitPlan,
    data: &Samples,
) -> Result<(f64, f64)> {
    if split.test.is_empty() {
        return Err(Error::Invalid("empty test set".into()));
    }
    if let Some(&i) = split.test.iter().find(|&&i| i >= data.len()) {
        return Err(Error::Invalid(format!(
            "split index {i} outside dataset of {}",
            data.len()
        )));
    }
    evaluate_samples(model, &data.subset(&split.test))
}

pub fn evaluate_samples(model: &dyn QualityModel, data: &Samples) -> Result<(f64, f64)> {
    let pred = model.predict_batch(&data.refs())?;
    Ok((plcc(&data.scores, &pred)?, srcc(&data.scores, &pred)?))
}

/// Zero-shot metrics of a model trained on `train_id` over all of `data`.
/// The target scores are used only for the metrics.
pub fn cross_dataset_eval(
    model: &dyn QualityModel,
    train_id: &str,
    test_id: &str,
    data: &Samples,
) -> Result<(f64, f64)> {
    if train_id == test_id {
        return Err(Error::Protocol(format!(
            "cross-dataset evaluation needs distinct datasets, both are {train_id:?}"
        )));
    }
    evaluate_samples(model, data)
}

/// Single-channel gradient saliency, values in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    pub size: usize,
    pub values: Vec<f32>,
}

impl SaliencyMap {
    pub fn max(&self) -> f32 {
        self.values.iter().copied().fold(0.0, f32::max)
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let px: Vec<u8> = self
            .values
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let img = image::GrayImage::from_raw(self.size as u32, self.size as u32, px)
            .ok_or_else(|| Error::Image("saliency buffer size".into()))?;
        let mut out = std::io::Cursor::new(Vec::new());
        img.write_to(&mut out, image::ImageFormat::Png)
            .map_err(|e| Error::Image(e.to_string()))?;
        Ok(out.into_inner())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_png_bytes()?).map_err(|e| Error::io(path, e))
    }

    /// Mean saliency of the four quadrants: top-left, top-right,
    /// bottom-left, bottom-right.
    pub fn quadrant_means(&self) -> [f64; 4] {
        let h = self.size / 2;
        let mut sums = [0.0f64; 4];
        for r in 0..self.size {
            for c in 0..self.size {
                let q = usize::from(r >= h) * 2 + usize::from(c >= h);
                sums[q] += f64::from(self.values[r * self.size + c]);
            }
        }
        let per = (self.size * self.size / 4).max(1) as f64;
        sums.map(|s| s / per)
    }
}

/// |d score / d pixel|, maximum over channels, min-max normalised. A flat
/// gradient yields an all-zero map.
pub fn saliency_map(model: &dyn QualityModel, image: &PreprocessedImage) -> Result<SaliencyMap> {
    let size = image.size();
    let x = Var::from_tensor(&image.to_tensor(model.dtype())?.unsqueeze(0)?)?;
    let y = model.score_tensor(x.as_tensor())?;
    let grads = y.sum_all()?.backward()?;
    let Some(g) = grads.get(x.as_tensor()) else {
        // the score does not depend on the pixels at all
        return Ok(SaliencyMap {
            size,
            values: vec![0.0; size * size],
        });
    };
    let m = g.abs()?.squeeze(0)?.max(0)?.to_dtype(DType::F64)?;
    let v = m.flatten_all()?.to_vec1::<f64>()?;
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let values = if hi > lo && hi.is_finite() {
        v.iter().map(|x| ((x - lo) / (hi - lo)) as f32).collect()
    } else {
        vec![0.0; v.len()]
    };
    Ok(SaliencyMap { size, values })
}

/// Convenience for tests and tools: a model scoring a fixed tensor function.
#[derive(Debug)]
pub struct FnModel<F: Fn(&Tensor) -> candle_core::Result<Tensor>> {
    pub input_size: usize,
    pub dtype: DType,
    pub f: F,
}

impl<F: Fn(&Tensor) -> candle_core::Result<Tensor>> QualityModel for FnModel<F> {
    fn input_size(&self) -> usize {
        self.input_size
    }

    fn dtype(&self) -> DType {
        self.dtype
    }

    fn score_tensor(&self, x: &Tensor) -> Result<Tensor> {
        Ok((self.f)(x)?)
    }
}
