//! Dataset manifests, score normalisation, image preprocessing and the
//! repeated 8:2 split protocol.
//!
//! A manifest is a UTF-8 CSV with a header row containing at least
//! `image_path` and `mos` (an optional `mos_std` column is accepted and
//! ignored). Image paths are resolved relative to the manifest's directory.
//! An optional sidecar `<manifest>.meta` in `key = value` form may declare
//! `dataset_id`, `scale_min` and `scale_max`; without a declared scale the
//! observed score range is used.

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use image::DynamicImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kv::KvDoc;
use crate::nn::bilinear_taps;

/// Side length of the square network input.
pub const INPUT_SIZE: usize = 512;

/// Number of repeated random splits in the evaluation protocol.
pub const SPLIT_REPEATS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_ref: PathBuf,
    pub mos_raw: f64,
    pub mos_norm: f64,
    pub dataset_id: String,
}

/// Maps raw scores affinely onto `[0, 1]` using the declared scale.
/// A zero-width scale maps everything to `0.5`.
pub fn normalize_scores(raw: &[f64], scale_min: f64, scale_max: f64) -> Result<Vec<f64>> {
    if !(scale_min <= scale_max) || !scale_min.is_finite() || !scale_max.is_finite() {
        return Err(Error::Invalid(format!(
            "invalid score scale [{scale_min}, {scale_max}]"
        )));
    }
    for (index, &value) in raw.iter().enumerate() {
        if !(value >= scale_min && value <= scale_max) {
            return Err(Error::ScoreOutOfScale {
                index,
                value,
                min: scale_min,
                max: scale_max,
            });
        }
    }
    let range = scale_max - scale_min;
    Ok(raw
        .iter()
        .map(|&v| {
            if range == 0.0 {
                0.5
            } else {
                (v - scale_min) / range
            }
        })
        .collect())
}

/// Metadata from a manifest sidecar file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ManifestMeta {
    pub dataset_id: Option<String>,
    pub scale_min: Option<f64>,
    pub scale_max: Option<f64>,
}

impl ManifestMeta {
    pub fn parse(text: &str) -> Result<Self> {
        let doc = KvDoc::parse(text).map_err(|e| Error::Config(format!("sidecar {e}")))?;
        let num = |key: &str| -> Result<Option<f64>> {
            doc.get(key)
                .map(|v| {
                    v.parse::<f64>()
                        .ok()
                        .filter(|x| x.is_finite())
                        .ok_or_else(|| Error::Config(format!("sidecar {key}: not a number: {v:?}")))
                })
                .transpose()
        };
        let meta = ManifestMeta {
            dataset_id: doc.get("dataset_id").map(str::to_string),
            scale_min: num("scale_min")?,
            scale_max: num("scale_max")?,
        };
        if meta.scale_min.is_some() != meta.scale_max.is_some() {
            return Err(Error::Config(
                "sidecar must declare both scale_min and scale_max or neither".into(),
            ));
        }
        Ok(meta)
    }

    pub fn sidecar_path(manifest: &Path) -> PathBuf {
        let mut s = manifest.as_os_str().to_owned();
        s.push(".meta");
        PathBuf::from(s)
    }
}

#[derive(Debug, Deserialize)]
struct ManifestRow {
    image_path: String,
    mos: String,
}

/// One manifest row before score normalisation.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRow {
    pub image_path: String,
    pub mos: f64,
}

/// Parses manifest CSV text without touching the filesystem. Row numbers in
/// errors are 1-based data rows (the header is row 0).
pub fn parse_manifest_rows(text: &str, origin: &Path) -> Result<Vec<RawRow>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| Error::Manifest {
        path: origin.to_path_buf(),
        message: format!("unreadable header: {e}"),
    })?;
    for required in ["image_path", "mos"] {
        if !headers.iter().any(|h| h == required) {
            return Err(Error::Manifest {
                path: origin.to_path_buf(),
                message: format!("missing required column {required:?}"),
            });
        }
    }
    let mut rows = Vec::new();
    for (i, rec) in reader.deserialize::<ManifestRow>().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| Error::ManifestRow {
            path: origin.to_path_buf(),
            row,
            message: e.to_string(),
        })?;
        let mos = rec
            .mos
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| Error::ManifestRow {
                path: origin.to_path_buf(),
                row,
                message: format!("non-numeric MOS {:?}", rec.mos),
            })?;
        if rec.image_path.is_empty() {
            return Err(Error::ManifestRow {
                path: origin.to_path_buf(),
                row,
                message: "empty image_path".into(),
            });
        }
        rows.push(RawRow {
            image_path: rec.image_path,
            mos,
        });
    }
    if rows.is_empty() {
        return Err(Error::Manifest {
            path: origin.to_path_buf(),
            message: "manifest has no rows".into(),
        });
    }
    Ok(rows)
}

/// Turns parsed rows into records, normalising over the whole manifest.
pub fn records_from_rows(
    rows: &[RawRow],
    meta: &ManifestMeta,
    base_dir: &Path,
    default_id: &str,
) -> Result<Vec<ImageRecord>> {
    let raw: Vec<f64> = rows.iter().map(|r| r.mos).collect();
    let (lo, hi) = match (meta.scale_min, meta.scale_max) {
        (Some(lo), Some(hi)) => (lo, hi),
        _ => raw
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            }),
    };
    let norm = normalize_scores(&raw, lo, hi)?;
    let dataset_id = meta
        .dataset_id
        .clone()
        .unwrap_or_else(|| default_id.to_string());
    Ok(rows
        .iter()
        .zip(norm)
        .map(|(r, n)| ImageRecord {
            image_ref: base_dir.join(&r.image_path),
            mos_raw: r.mos,
            mos_norm: n,
            dataset_id: dataset_id.clone(),
        })
        .collect())
}

/// Reads a manifest and its optional sidecar. Every image reference must
/// exist on disk.
pub fn load_manifest(path: &Path) -> Result<Vec<ImageRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let rows = parse_manifest_rows(&text, path)?;
    let sidecar = ManifestMeta::sidecar_path(path);
    let meta = if sidecar.exists() {
        let t = std::fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
        ManifestMeta::parse(&t)?
    } else {
        ManifestMeta::default()
    };
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let default_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    let records = records_from_rows(&rows, &meta, base, &default_id)?;
    for (i, r) in records.iter().enumerate() {
        if !r.image_ref.is_file() {
            return Err(Error::ManifestRow {
                path: path.to_path_buf(),
                row: i + 1,
                message: format!("image not found: {}", r.image_ref.display()),
            });
        }
    }
    Ok(records)
}

/// A square RGB image resized for the network with values in `[-1, 1]`,
/// stored height-major, then width, then channel.
#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessedImage {
    size: usize,
    pixels: Vec<f32>,
}

impl PreprocessedImage {
    pub fn from_pixels(size: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != size * size * 3 {
            return Err(Error::shape(
                "preprocessed image",
                size * size * 3,
                pixels.len(),
            ));
        }
        Ok(Self { size, pixels })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// `(height, width, channels)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.size, self.size, 3)
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    /// Channel-first `(3, H, W)` tensor.
    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        Ok(Self::batch(&[self], dtype)?.squeeze(0)?)
    }

    /// Stacks images into an NCHW batch.
    pub fn batch(images: &[&PreprocessedImage], dtype: DType) -> Result<Tensor> {
        let Some(first) = images.first() else {
            return Err(Error::Invalid("empty image batch".into()));
        };
        let s = first.size;
        let plane = s * s;
        let mut v = vec![0f32; images.len() * 3 * plane];
        for (im, out) in images.iter().zip(v.chunks_mut(3 * plane)) {
            if im.size != s {
                return Err(Error::shape("image batch side", s, im.size));
            }
            for (i, px) in im.pixels.chunks_exact(3).enumerate() {
                out[i] = px[0];
                out[plane + i] = px[1];
                out[2 * plane + i] = px[2];
            }
        }
        Ok(Tensor::from_vec(v, (images.len(), 3, s, s), &Device::Cpu)?.to_dtype(dtype)?)
    }

    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update((self.size as u64).to_le_bytes());
        for p in &self.pixels {
            h.update(p.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Resizes to `INPUT_SIZE` square and rescales to `[-1, 1]`.
pub fn preprocess_image(image: &DynamicImage) -> Result<PreprocessedImage> {
    preprocess_image_to(image, INPUT_SIZE)
}

/// As [`preprocess_image`] with an explicit output side length.
pub fn preprocess_image_to(image: &DynamicImage, size: usize) -> Result<PreprocessedImage> {
    let rgb = image.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    preprocess_rgb8(w, h, rgb.as_raw(), size)
}

/// Bilinear resize of packed RGB8 pixels followed by the `[0,255] -> [-1,1]` map.
pub fn preprocess_rgb8(
    width: usize,
    height: usize,
    rgb: &[u8],
    size: usize,
) -> Result<PreprocessedImage> {
    if width == 0 || height == 0 {
        return Err(Error::Image("image has zero pixels".into()));
    }
    if size == 0 {
        return Err(Error::Invalid("output size must be positive".into()));
    }
    if rgb.len() != width * height * 3 {
        return Err(Error::shape("rgb buffer", width * height * 3, rgb.len()));
    }
    let rows = bilinear_taps(height, size);
    let cols = bilinear_taps(width, size);
    // horizontal pass into (height, size, 3)
    let mut tmp = vec![0f64; height * size * 3];
    for y in 0..height {
        let src = &rgb[y * width * 3..(y + 1) * width * 3];
        for (x, &(lo, hi, f)) in cols.iter().enumerate() {
            for c in 0..3 {
                let a = src[lo * 3 + c] as f64;
                let b = src[hi * 3 + c] as f64;
                tmp[(y * size + x) * 3 + c] = a * (1.0 - f) + b * f;
            }
        }
    }
    let mut pixels = vec![0f32; size * size * 3];
    for (y, &(lo, hi, f)) in rows.iter().enumerate() {
        for x in 0..size {
            for c in 0..3 {
                let a = tmp[(lo * size + x) * 3 + c];
                let b = tmp[(hi * size + x) * 3 + c];
                let v = a * (1.0 - f) + b * f;
                pixels[(y * size + x) * 3 + c] = (v / 127.5 - 1.0) as f32;
            }
        }
    }
    Ok(PreprocessedImage { size, pixels })
}

/// Decodes PNG or JPEG bytes. Grayscale and alpha images are converted to RGB
/// during preprocessing.
pub fn decode_image(bytes: &[u8]) -> Result<DynamicImage> {
    image::load_from_memory(bytes).map_err(|e| Error::Image(e.to_string()))
}

pub fn load_image(path: &Path) -> Result<DynamicImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes).map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

/// One seeded 8:2 train/test partition of record indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub seed: u64,
    pub repeat_index: usize,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Training-set size for `n` records: `floor(0.8 n)`.
pub fn train_size(n: usize) -> usize {
    n * 4 / 5
}

pub fn make_split(n_records: usize, seed: u64, repeat_index: usize) -> SplitPlan {
    let mut idx: Vec<usize> = (0..n_records).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let test = idx.split_off(train_size(n_records));
    SplitPlan {
        seed,
        repeat_index,
        train: idx,
        test,
    }
}

/// The repeated split protocol: one independent shuffle per seed.
pub fn make_splits(n_records: usize, seeds: &[u64]) -> Result<Vec<SplitPlan>> {
    if n_records < SPLIT_REPEATS {
        return Err(Error::Protocol(format!(
            "{n_records} records cannot support {SPLIT_REPEATS} repeated splits"
        )));
    }
    if seeds.len() != SPLIT_REPEATS {
        return Err(Error::Protocol(format!(
            "expected {SPLIT_REPEATS} split seeds, got {}",
            seeds.len()
        )));
    }
    Ok(seeds
        .iter()
        .enumerate()
        .map(|(i, &s)| make_split(n_records, s, i))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn normalizes_endpoints_and_midpoint() {
        assert_eq!(
            normalize_scores(&[0.0, 50.0, 100.0], 0.0, 100.0).unwrap(),
            vec![0.0, 0.5, 1.0]
        );
        assert_eq!(normalize_scores(&[2.5], 1.0, 5.0).unwrap(), vec![0.375]);
        assert_eq!(
            normalize_scores(&[4.0, 4.0], 4.0, 4.0).unwrap(),
            vec![0.5, 0.5]
        );
    }

    #[test]
    fn out_of_scale_names_the_index() {
        match normalize_scores(&[1.0, 6.0], 1.0, 5.0) {
            Err(Error::ScoreOutOfScale { index, .. }) => assert_eq!(index, 1),
            other => panic!("unexpected {other:?}"),
        }
        assert!(normalize_scores(&[1.0], 5.0, 1.0).is_err());
        assert!(normalize_scores(&[f64::NAN], 0.0, 1.0).is_err());
    }

    #[test]
    fn manifest_rows_parse_and_report_bad_rows() {
        let p = Path::new("m.csv");
        let rows = parse_manifest_rows("image_path,mos,mos_std\na.png,1.0,0.1\nb.png, 5 ,0.2\n", p)
            .unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1].mos, 5.0);
        match parse_manifest_rows("image_path,mos\na.png,1\nb.png,abc\n", p) {
            Err(Error::ManifestRow { row, .. }) => assert_eq!(row, 2),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            parse_manifest_rows("image_path,mos\n", p),
            Err(Error::Manifest { .. })
        ));
        assert!(matches!(
            parse_manifest_rows("path,score\na,1\n", p),
            Err(Error::Manifest { .. })
        ));
    }

    #[test]
    fn records_use_observed_range_without_sidecar() {
        let rows: Vec<RawRow> = [1.0, 3.0, 5.0]
            .iter()
            .map(|&m| RawRow {
                image_path: "x.png".into(),
                mos: m,
            })
            .collect();
        let recs =
            records_from_rows(&rows, &ManifestMeta::default(), Path::new("/d"), "toy").unwrap();
        let n: Vec<f64> = recs.iter().map(|r| r.mos_norm).collect();
        assert_eq!(n, vec![0.0, 0.5, 1.0]);
        assert_eq!(recs[0].image_ref, Path::new("/d/x.png"));
        let one =
            records_from_rows(&rows[..1], &ManifestMeta::default(), Path::new("."), "t").unwrap();
        assert_eq!(one[0].mos_norm, 0.5);
    }

    #[test]
    fn sidecar_declares_scale() {
        let m = ManifestMeta::parse("dataset_id = koniq\nscale_min = 1\nscale_max = 5\n").unwrap();
        assert_eq!(m.dataset_id.as_deref(), Some("koniq"));
        assert_eq!((m.scale_min, m.scale_max), (Some(1.0), Some(5.0)));
        assert!(ManifestMeta::parse("scale_min = 1\n").is_err());
        assert!(ManifestMeta::parse("scale_min = x\nscale_max = 2\n").is_err());
    }

    #[test]
    fn identity_resize_keeps_pixels() {
        let (w, h) = (4, 3);
        let rgb: Vec<u8> = (0..w * h * 3).map(|i| (i * 7 % 256) as u8).collect();
        // non-square input is stretched, so use a square one for identity
        let sq: Vec<u8> = (0..4 * 4 * 3).map(|i| (i * 13 % 256) as u8).collect();
        let out = preprocess_rgb8(4, 4, &sq, 4).unwrap();
        for (o, s) in out.pixels().iter().zip(&sq) {
            assert_eq!(*o, (*s as f64 / 127.5 - 1.0) as f32);
        }
        let out = preprocess_rgb8(w, h, &rgb, 8).unwrap();
        assert_eq!(out.shape(), (8, 8, 3));
    }

    #[test]
    fn black_maps_to_minus_one_and_white_to_one() {
        let black = preprocess_rgb8(3, 5, &[0u8; 45], 16).unwrap();
        assert!(black.pixels().iter().all(|&p| p == -1.0));
        let white = preprocess_rgb8(3, 5, &[255u8; 45], 16).unwrap();
        assert!(white.pixels().iter().all(|&p| p == 1.0));
    }

    #[test]
    fn zero_pixel_image_is_rejected() {
        assert!(preprocess_rgb8(0, 4, &[], 8).is_err());
    }

    #[test]
    fn grayscale_and_alpha_are_converted() {
        let gray = DynamicImage::ImageLuma8(image::GrayImage::from_pixel(5, 5, image::Luma([255])));
        let p = preprocess_image_to(&gray, 4).unwrap();
        assert!(p.pixels().iter().all(|&v| v == 1.0));
        let rgba = DynamicImage::ImageRgba8(image::RgbaImage::from_pixel(
            3,
            3,
            image::Rgba([0, 0, 0, 0]),
        ));
        let p = preprocess_image_to(&rgba, 4).unwrap();
        assert!(p.pixels().iter().all(|&v| v == -1.0));
    }

    #[test]
    fn split_sizes() {
        let s = make_split(10, 1, 0);
        assert_eq!((s.train.len(), s.test.len()), (8, 2));
        let s = make_split(1162, 1, 0);
        assert_eq!((s.train.len(), s.test.len()), (929, 233));
        assert!(make_splits(4, &[1, 2, 3, 4, 5]).is_err());
        assert!(make_splits(10, &[1, 2]).is_err());
        assert_eq!(
            make_splits(10, &[9, 9, 9, 9, 9]).unwrap(),
            make_splits(10, &[9, 9, 9, 9, 9]).unwrap()
        );
    }

    proptest! {
        #[test]
        fn splits_are_exhaustive_disjoint_partitions(n in 5usize..400, seeds in proptest::array::uniform5(any::<u64>())) {
            for plan in make_splits(n, &seeds).unwrap() {
                prop_assert_eq!(plan.train.len(), n * 4 / 5);
                let mut all: Vec<usize> = plan.train.iter().chain(&plan.test).copied().collect();
                all.sort_unstable();
                prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            }
        }

        #[test]
        fn normalization_is_monotone(mut raw in proptest::collection::vec(-1e3f64..1e3, 2..30)) {
            raw.sort_by(|a, b| a.partial_cmp(b).unwrap());
            raw.dedup();
            prop_assume!(raw.len() >= 2);
            let n = normalize_scores(&raw, raw[0], *raw.last().unwrap()).unwrap();
            for w in n.windows(2) {
                prop_assert!(w[0] < w[1]);
            }
            prop_assert!(n.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
