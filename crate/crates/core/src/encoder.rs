//! Frozen toy dual encoder.
//!
//! The text side maps a prompt (a sequence of token embeddings) through a
//! fixed positional mixing matrix, mean pooling, a linear projection and L2
//! normalization. The image side is a fixed linear map followed by L2
//! normalization. Both are deterministic functions of their parameters, and
//! nothing in this module is ever mutated after construction.

use std::collections::HashMap;
use std::ops::Range;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::{norm, Matrix};
use crate::math::{l2_normalize, FeatureVector};
use crate::seed;

/// The placeholder replaced by a classname in hand-crafted templates.
pub const CLASS_PLACEHOLDER: &str = "[CLASS]";
const PLACEHOLDER_TOKEN: &str = "[class]";

/// Whitespace tokenization with lowercase folding. Leading and trailing
/// punctuation is stripped from each token, so `"[CLASS],"` and `"flower."`
/// become `"[class]"` and `"flower"`.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|raw| {
            raw.trim_matches(|c: char| c.is_ascii_punctuation() && c != '[' && c != ']' && c != '_')
                .to_lowercase()
        })
        .filter(|t| !t.is_empty())
        .collect()
}

/// A template split around its single `[CLASS]` placeholder.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSkeleton {
    pub prefix: Vec<String>,
    pub suffix: Vec<String>,
}

impl TemplateSkeleton {
    pub fn parse(template: &str) -> Result<Self> {
        let tokens = tokenize(template);
        let slots: Vec<usize> = tokens
            .iter()
            .enumerate()
            .filter(|(_, t)| t.as_str() == PLACEHOLDER_TOKEN)
            .map(|(i, _)| i)
            .collect();
        match slots.as_slice() {
            [at] => Ok(Self { prefix: tokens[..*at].to_vec(), suffix: tokens[at + 1..].to_vec() }),
            [] => Err(Error::Template(format!("no {CLASS_PLACEHOLDER} placeholder in {template:?}"))),
            _ => Err(Error::Template(format!(
                "{} {CLASS_PLACEHOLDER} placeholders in {template:?}, expected one",
                slots.len()
            ))),
        }
    }

    /// Number of context tokens, i.e. everything except the placeholder.
    pub fn context_len(&self) -> usize {
        self.prefix.len() + self.suffix.len()
    }

    pub fn context_tokens(&self) -> impl Iterator<Item = &String> {
        self.prefix.iter().chain(&self.suffix)
    }
}

/// Deterministic unit-norm embedding row for `token` under `seed`.
///
/// Registered tokens and unknown tokens share this generator, so a token
/// missing from a vocabulary resolves to exactly the row it would have had
/// if it had been registered.
pub fn token_row(token: &str, width: usize, seed: u64) -> Vec<f64> {
    let mut rng = seed::rng(seed, &format!("token:{token}"));
    loop {
        let row: Vec<f64> = (0..width).map(|_| rng.sample(StandardNormal)).collect();
        let n = norm(&row);
        if n > 0.0 {
            return row.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Token strings and their frozen embedding table.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    table: Matrix,
    seed: u64,
}

impl Vocabulary {
    pub fn build(classnames: &[String], templates: &[String], embed_width: usize, seed: u64) -> Result<Self> {
        if classnames.is_empty() {
            return Err(Error::Config("no classnames given".into()));
        }
        if embed_width < 2 {
            return Err(Error::Config(format!("embedding width must be at least 2, got {embed_width}")));
        }
        let mut seen = HashMap::new();
        for name in classnames {
            let toks = tokenize(name);
            if toks.is_empty() {
                return Err(Error::Config(format!("classname {name:?} has no tokens")));
            }
            if toks.iter().any(|t| t == PLACEHOLDER_TOKEN) {
                return Err(Error::Config(format!("classname {name:?} contains the class placeholder")));
            }
            if let Some(prev) = seen.insert(toks, name) {
                return Err(Error::Config(format!("duplicate classname {name:?} (same tokens as {prev:?})")));
            }
        }

        let mut tokens: Vec<String> = Vec::new();
        let mut index = HashMap::new();
        let mut register = |t: &str| {
            if !index.contains_key(t) {
                index.insert(t.to_string(), tokens.len());
                tokens.push(t.to_string());
            }
        };
        for template in templates {
            for t in tokenize(template).iter().filter(|t| t.as_str() != PLACEHOLDER_TOKEN) {
                register(t);
            }
        }
        for name in classnames {
            for t in tokenize(name) {
                register(&t);
            }
        }
        let rows: Vec<Vec<f64>> = tokens.iter().map(|t| token_row(t, embed_width, seed)).collect();
        let table = Matrix::from_rows(&rows, embed_width)?;
        Ok(Self { tokens, index, table, seed })
    }

    /// Reassembles a vocabulary from persisted parts.
    pub fn from_parts(tokens: Vec<String>, table: Matrix, seed: u64) -> Result<Self> {
        if tokens.len() != table.rows() {
            return Err(Error::Shape(format!("{} tokens for {} table rows", tokens.len(), table.rows())));
        }
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Config(format!("token {t:?} appears twice")));
            }
        }
        Ok(Self { tokens, index, table, seed })
    }

    pub fn embed_width(&self) -> usize {
        self.table.cols()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn table(&self) -> &Matrix {
        &self.table
    }

    pub fn lookup(&self, token: &str) -> Option<&[f64]> {
        self.index.get(token).map(|&i| self.table.row(i))
    }

    /// Embedding row for a token, falling back to the hashed row for
    /// tokens that were never registered.
    pub fn embedding(&self, token: &str) -> Vec<f64> {
        match self.lookup(token) {
            Some(row) => row.to_vec(),
            None => token_row(token, self.embed_width(), self.seed),
        }
    }

    pub fn checksum(&self) -> u64 {
        let mut bytes = Vec::new();
        for t in &self.tokens {
            bytes.extend_from_slice(t.as_bytes());
            bytes.push(0);
        }
        bytes.extend_from_slice(&self.seed.to_le_bytes());
        matrix_bytes(&self.table, &mut bytes);
        seed::fnv1a(&bytes)
    }
}

/// One class's prompt as a sequence of token embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSequence {
    pub embeddings: Matrix,
    pub class_slot: Range<usize>,
}

impl PromptSequence {
    pub fn new(embeddings: Matrix, class_slot: Range<usize>) -> Result<Self> {
        if class_slot.is_empty() || class_slot.end > embeddings.rows() {
            return Err(Error::Shape(format!(
                "class slot {class_slot:?} invalid for a prompt of length {}",
                embeddings.rows()
            )));
        }
        Ok(Self { embeddings, class_slot })
    }

    pub fn len(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.rows() == 0
    }

    pub fn width(&self) -> usize {
        self.embeddings.cols()
    }

    /// Row indices that hold context (non-classname) tokens.
    pub fn context_rows(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(|r| !self.class_slot.contains(r))
    }
}

/// Token rows for a classname.
pub fn classname_rows(classname: &str, vocab: &Vocabulary) -> Result<Vec<Vec<f64>>> {
    let toks = tokenize(classname);
    if toks.is_empty() {
        return Err(Error::Config(format!("classname {classname:?} has no tokens")));
    }
    Ok(toks.iter().map(|t| vocab.embedding(t)).collect())
}

pub fn build_handcrafted_prompt(template: &str, classname: &str, vocab: &Vocabulary) -> Result<PromptSequence> {
    let skeleton = TemplateSkeleton::parse(template)?;
    let class_rows = classname_rows(classname, vocab)?;
    let mut rows: Vec<Vec<f64>> = skeleton.prefix.iter().map(|t| vocab.embedding(t)).collect();
    let start = rows.len();
    rows.extend(class_rows);
    let end = rows.len();
    rows.extend(skeleton.suffix.iter().map(|t| vocab.embedding(t)));
    PromptSequence::new(Matrix::from_rows(&rows, vocab.embed_width())?, start..end)
}

/// Parameters of the frozen text encoder for prompts of one length.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoderParams {
    pub positional_mix: Matrix,
    pub projection: Matrix,
    pub seed: u64,
}

impl TextEncoderParams {
    /// Mixing matrix `I + N(0, 0.3²/L)`, projection entries `N(0, 1/E)`.
    pub fn generate(prompt_len: usize, embed_width: usize, feature_dim: usize, seed: u64) -> Result<Self> {
        if prompt_len == 0 || embed_width == 0 || feature_dim == 0 {
            return Err(Error::Config("text encoder dimensions must be positive".into()));
        }
        let mut rng = seed::rng(seed, "text-encoder:mix");
        let mut positional_mix = Matrix::identity(prompt_len);
        let mix_scale = 0.3 / (prompt_len as f64).sqrt();
        for x in positional_mix.as_mut_slice() {
            *x += mix_scale * rng.sample::<f64, _>(StandardNormal);
        }
        let mut rng = seed::rng(seed, "text-encoder:projection");
        let proj_scale = 1.0 / (embed_width as f64).sqrt();
        let data = (0..embed_width * feature_dim)
            .map(|_| proj_scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let projection = Matrix::from_vec(embed_width, feature_dim, data)?;
        Ok(Self { positional_mix, projection, seed })
    }

    pub fn prompt_len(&self) -> usize {
        self.positional_mix.rows()
    }

    pub fn embed_width(&self) -> usize {
        self.projection.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.projection.cols()
    }

    pub fn checksum(&self) -> u64 {
        let mut bytes = self.seed.to_le_bytes().to_vec();
        matrix_bytes(&self.positional_mix, &mut bytes);
        matrix_bytes(&self.projection, &mut bytes);
        seed::fnv1a(&bytes)
    }

    fn check_prompt(&self, prompt: &PromptSequence) -> Result<()> {
        if prompt.len() != self.prompt_len() || prompt.width() != self.embed_width() {
            return Err(Error::Shape(format!(
                "prompt is {}x{}, encoder expects {}x{}",
                prompt.len(),
                prompt.width(),
                self.prompt_len(),
                self.embed_width()
            )));
        }
        Ok(())
    }

    /// Unnormalized feature `projectionᵀ · mean_rows(positional_mix · embeddings)`.
    pub(crate) fn pre_norm(&self, prompt: &PromptSequence) -> Vec<f64> {
        let len = self.prompt_len();
        let width = self.embed_width();
        let mut pooled = vec![0.0; width];
        for i in 0..len {
            for j in 0..len {
                let m = self.positional_mix.get(i, j);
                if m == 0.0 {
                    continue;
                }
                for (p, &x) in pooled.iter_mut().zip(prompt.embeddings.row(j)) {
                    *p += m * x;
                }
            }
        }
        for p in &mut pooled {
            *p /= len as f64;
        }
        self.projection.tr_mul_vec(&pooled)
    }
}

pub fn encode_text(prompt: &PromptSequence, params: &TextEncoderParams) -> Result<FeatureVector> {
    params.check_prompt(prompt)?;
    l2_normalize(&params.pre_norm(prompt))
}

/// Vector-Jacobian product of [`encode_text`]: the gradient with respect to
/// the prompt embeddings of `⟨upstream, encode_text(prompt)⟩`.
pub fn encode_text_grad(prompt: &PromptSequence, params: &TextEncoderParams, upstream: &[f64]) -> Result<Matrix> {
    params.check_prompt(prompt)?;
    if upstream.len() != params.feature_dim() {
        return Err(Error::Shape(format!(
            "cotangent has dimension {}, feature dimension is {}",
            upstream.len(),
            params.feature_dim()
        )));
    }
    let z = params.pre_norm(prompt);
    let n = norm(&z);
    if n == 0.0 {
        return Err(Error::DegenerateInput("text feature vanished before normalization".into()));
    }
    // d normalize(z) = (I - f fᵀ) / ‖z‖
    let f: Vec<f64> = z.iter().map(|x| x / n).collect();
    let fg: f64 = f.iter().zip(upstream).map(|(a, b)| a * b).sum();
    let dz: Vec<f64> = upstream.iter().zip(&f).map(|(g, fi)| (g - fg * fi) / n).collect();
    let dpooled = params.projection.mul_vec(&dz);

    let len = params.prompt_len();
    let mut grad = Matrix::zeros(len, params.embed_width());
    for j in 0..len {
        let weight: f64 = (0..len).map(|i| params.positional_mix.get(i, j)).sum::<f64>() / len as f64;
        for (g, &d) in grad.row_mut(j).iter_mut().zip(&dpooled) {
            *g = weight * d;
        }
    }
    Ok(grad)
}

/// Parameters of the frozen image encoder: a `feature_dim × sample_dim` map.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageEncoderParams {
    pub weights: Matrix,
    pub seed: u64,
}

impl ImageEncoderParams {
    /// Gaussian map with entries `N(0, 1/sample_dim)`.
    pub fn generate(sample_dim: usize, feature_dim: usize, seed: u64) -> Result<Self> {
        if sample_dim == 0 || feature_dim == 0 {
            return Err(Error::Config("image encoder dimensions must be positive".into()));
        }
        let mut rng = seed::rng(seed, "image-encoder");
        let scale = 1.0 / (sample_dim as f64).sqrt();
        let data = (0..sample_dim * feature_dim)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Ok(Self { weights: Matrix::from_vec(feature_dim, sample_dim, data)?, seed })
    }

    pub fn sample_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn feature_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn checksum(&self) -> u64 {
        let mut bytes = self.seed.to_le_bytes().to_vec();
        matrix_bytes(&self.weights, &mut bytes);
        seed::fnv1a(&bytes)
    }
}

pub fn encode_image(sample: &[f64], params: &ImageEncoderParams) -> Result<FeatureVector> {
    if sample.len() != params.sample_dim() {
        return Err(Error::Shape(format!(
            "sample has dimension {}, image encoder expects {}",
            sample.len(),
            params.sample_dim()
        )));
    }
    l2_normalize(&params.weights.mul_vec(sample))
}

/// The frozen encoder pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoders {
    pub text: TextEncoderParams,
    pub image: ImageEncoderParams,
}

impl Encoders {
    pub fn new(text: TextEncoderParams, image: ImageEncoderParams) -> Result<Self> {
        if text.feature_dim() != image.feature_dim() {
            return Err(Error::Shape(format!(
                "text features have dimension {}, image features {}",
                text.feature_dim(),
                image.feature_dim()
            )));
        }
        Ok(Self { text, image })
    }

    pub fn encode_text(&self, prompt: &PromptSequence) -> Result<FeatureVector> {
        encode_text(prompt, &self.text)
    }

    pub fn encode_image(&self, sample: &[f64]) -> Result<FeatureVector> {
        encode_image(sample, &self.image)
    }

    pub fn checksum(&self) -> u64 {
        self.text.checksum() ^ self.image.checksum().rotate_left(1)
    }
}

fn matrix_bytes(m: &Matrix, out: &mut Vec<u8>) {
    out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
    for x in m.as_slice() {
        out.extend_from_slice(&x.to_bits().to_le_bytes());
    }
}
