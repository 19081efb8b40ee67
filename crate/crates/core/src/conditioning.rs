//! The constant text condition: template expansion, sentence pooling and the
//! residual text adapter.

use std::collections::HashSet;

use candle_core::{DType, Device, Module, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::kv::KvDoc;
use crate::nn::{self, fnv1a, Scope};

/// The shipped default template file.
pub const DEFAULT_TEMPLATE: &str = include_str!("../assets/default_template.kv");

/// Lists substituted into
/// `a photo of a {scene} with {distortion} distortion, which is of {quality} quality.`
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub scenes: Vec<String>,
    pub distortions: Vec<String>,
    pub quality_levels: Vec<String>,
}

impl PromptTemplate {
    pub fn new(
        scenes: Vec<String>,
        distortions: Vec<String>,
        quality_levels: Vec<String>,
    ) -> Result<Self> {
        let tpl = Self {
            scenes,
            distortions,
            quality_levels,
        };
        tpl.validate()?;
        Ok(tpl)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, list) in [
            ("scenes", &self.scenes),
            ("distortions", &self.distortions),
            ("quality_levels", &self.quality_levels),
        ] {
            if list.is_empty() {
                return Err(Error::Template(format!("{name} is empty")));
            }
            let mut seen = HashSet::new();
            for item in list {
                if item.trim().is_empty() {
                    return Err(Error::Template(format!("{name} has an empty entry")));
                }
                if !seen.insert(item) {
                    return Err(Error::Template(format!("{name} repeats {item:?}")));
                }
            }
        }
        for (name, list) in [("scenes", &self.scenes), ("distortions", &self.distortions)] {
            if !list.iter().any(|s| s == "other") {
                return Err(Error::Template(format!("{name} must include \"other\"")));
            }
        }
        Ok(())
    }

    /// Parses a template file with `scenes`, `distortions` and
    /// `quality_levels` keys.
    pub fn parse(text: &str) -> Result<Self> {
        let doc = KvDoc::parse(text).map_err(|e| Error::Template(e.to_string()))?;
        Self::from_doc(&doc, "")
    }

    pub(crate) fn from_doc(doc: &KvDoc, prefix: &str) -> Result<Self> {
        let list = |key: &str| {
            doc.get_list(&format!("{prefix}{key}"))
                .ok_or_else(|| Error::Template(format!("missing key {prefix}{key}")))
        };
        Self::new(
            list("scenes")?,
            list("distortions")?,
            list("quality_levels")?,
        )
    }

    pub fn default_template() -> Self {
        Self::parse(DEFAULT_TEMPLATE).expect("shipped template is valid")
    }

    /// `K`, the number of sentences.
    pub fn len(&self) -> usize {
        self.scenes.len() * self.distortions.len() * self.quality_levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_kv(&self) -> String {
        format!(
            "scenes = {}\ndistortions = {}\nquality_levels = {}\n",
            self.scenes.join(", "),
            self.distortions.join(", "),
            self.quality_levels.join(", ")
        )
    }
}

pub fn sentence(scene: &str, distortion: &str, quality: &str) -> String {
    format!("a photo of a {scene} with {distortion} distortion, which is of {quality} quality.")
}

/// Every template sentence, scene-major with the quality level varying fastest.
pub fn expand_templates(tpl: &PromptTemplate) -> Result<Vec<String>> {
    tpl.validate()?;
    let mut out = Vec::with_capacity(tpl.len());
    for s in &tpl.scenes {
        for d in &tpl.distortions {
            for q in &tpl.quality_levels {
                out.push(sentence(s, d, q));
            }
        }
    }
    Ok(out)
}

/// Anything that maps a sentence to per-token embeddings of a fixed width.
pub trait TextEncoder {
    fn width(&self) -> usize;
    fn token_embeddings(&self, sentence: &str) -> std::result::Result<Vec<Vec<f32>>, String>;
}

/// Deterministic stand-in encoder: each lowercase word or punctuation mark
/// maps to a standard-normal vector seeded by its hash.
#[derive(Debug, Clone)]
pub struct HashTextEncoder {
    width: usize,
    seed: u64,
}

impl HashTextEncoder {
    pub fn new(width: usize, seed: u64) -> Self {
        Self { width, seed }
    }

    pub fn tokenize(sentence: &str) -> Vec<String> {
        let mut tokens = Vec::new();
        let mut word = String::new();
        for ch in sentence.chars() {
            if ch.is_alphanumeric() || ch == '_' {
                word.extend(ch.to_lowercase());
                continue;
            }
            if !word.is_empty() {
                tokens.push(std::mem::take(&mut word));
            }
            if !ch.is_whitespace() {
                tokens.push(ch.to_string());
            }
        }
        if !word.is_empty() {
            tokens.push(word);
        }
        tokens
    }

    fn token_vector(&self, token: &str) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(token.as_bytes()));
        (0..self.width)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z as f32
            })
            .collect()
    }
}

impl TextEncoder for HashTextEncoder {
    fn width(&self) -> usize {
        self.width
    }

    fn token_embeddings(&self, sentence: &str) -> std::result::Result<Vec<Vec<f32>>, String> {
        Ok(Self::tokenize(sentence)
            .iter()
            .map(|t| self.token_vector(t))
            .collect())
    }
}

/// Mean of a sentence's token embeddings.
pub fn embed_sentence(encoder: &dyn TextEncoder, sentence: &str) -> Result<Vec<f32>> {
    let tokens = encoder
        .token_embeddings(sentence)
        .map_err(|message| Error::Encoder { index: 0, message })?;
    mean_pool(&tokens, encoder.width()).map_err(|message| Error::Encoder { index: 0, message })
}

fn mean_pool(tokens: &[Vec<f32>], width: usize) -> std::result::Result<Vec<f32>, String> {
    if tokens.is_empty() {
        return Err("sentence produced no tokens".into());
    }
    let mut acc = vec![0f64; width];
    for t in tokens {
        if t.len() != width {
            return Err(format!("token width {} != encoder width {width}", t.len()));
        }
        for (a, v) in acc.iter_mut().zip(t) {
            *a += *v as f64;
        }
    }
    let n = tokens.len() as f64;
    Ok(acc.into_iter().map(|a| (a / n) as f32).collect())
}

/// The `K x d` matrix of pooled sentence embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionMatrix {
    rows: usize,
    width: usize,
    values: Vec<f32>,
}

impl ConditionMatrix {
    pub fn from_rows(rows: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != rows * width {
            return Err(Error::shape("condition matrix", rows * width, values.len()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                stage: "condition matrix".into(),
            });
        }
        Ok(Self {
            rows,
            width,
            values,
        })
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (rows, width) = t.dims2()?;
        let values = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        Self::from_rows(rows, width, values)
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.width)
    }

    pub fn row(&self, k: usize) -> &[f32] {
        &self.values[k * self.width..(k + 1) * self.width]
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        Ok(
            Tensor::from_slice(&self.values, (self.rows, self.width), &Device::Cpu)?
                .to_dtype(dtype)?,
        )
    }
}

/// Pools every template sentence and stacks them in expansion order.
pub fn build_condition(encoder: &dyn TextEncoder, tpl: &PromptTemplate) -> Result<ConditionMatrix> {
    let sentences = expand_templates(tpl)?;
    let width = encoder.width();
    let mut values = Vec::with_capacity(sentences.len() * width);
    for (index, s) in sentences.iter().enumerate() {
        let tokens = encoder
            .token_embeddings(s)
            .map_err(|message| Error::Encoder { index, message })?;
        let pooled =
            mean_pool(&tokens, width).map_err(|message| Error::Encoder { index, message })?;
        values.extend(pooled);
    }
    ConditionMatrix::from_rows(sentences.len(), width, values)
}

/// Residual two-layer map applied row-wise to the condition matrix:
/// `C = E + fc2(gelu(fc1(E)))`. The output layer starts at zero.
#[derive(Debug, Clone)]
pub struct TextAdapter {
    fc1: candle_nn::Linear,
    fc2: candle_nn::Linear,
    width: usize,
}

impl TextAdapter {
    pub fn new(scope: &Scope, width: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            fc1: nn::linear(&scope.pp("fc1"), width, hidden)?,
            fc2: nn::linear_zero(&scope.pp("fc2"), hidden, width)?,
            width,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// The correction term alone, without the residual.
    pub fn delta(&self, base: &Tensor) -> Result<Tensor> {
        let h = self.fc1.forward(base)?.gelu_erf()?;
        Ok(self.fc2.forward(&h)?)
    }

    pub fn forward(&self, base: &Tensor) -> Result<Tensor> {
        let (_, d) = base.dims2()?;
        if d != self.width {
            return Err(Error::shape("text adapter input width", self.width, d));
        }
        Ok((base + self.delta(base)?)?)
    }
}

/// Host-level convenience around [`TextAdapter::forward`].
pub fn apply_text_adapter(
    adapter: &TextAdapter,
    base: &ConditionMatrix,
    dtype: DType,
) -> Result<ConditionMatrix> {
    let out = adapter.forward(&base.to_tensor(dtype)?)?;
    ConditionMatrix::from_tensor(&out)
}
