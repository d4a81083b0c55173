//! Few-shot tuning of shared prompt context vectors on base classes.
//!
//! The encoders and vocabulary are borrowed immutably throughout; the only
//! state that changes during training is the [`ContextBlock`].

use std::cell::RefCell;
use std::f64::consts::PI;

use rand::seq::SliceRandom;

use crate::archive::Archive;
use crate::encoder::{classname_rows, encode_text, encode_text_grad, Encoders, PromptSequence, TemplateSkeleton, Vocabulary};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::math::{FeatureVector, Temperature};
use crate::scoring::{class_posterior, ClassId, ClassUniverse};
use crate::seed;

pub const DEFAULT_TEMPLATE: &str = "a photo of a [CLASS]";

/// The M learnable context vectors shared by every class prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextBlock {
    pub vectors: Matrix,
    pub origin_template: String,
    /// Context rows placed before the classname; the rest follow it.
    pub class_position: usize,
}

impl ContextBlock {
    pub fn len(&self) -> usize {
        self.vectors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.rows() == 0
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let mut a = Archive::new();
        a.push_matrix("context", &self.vectors)?;
        a.push_text("meta.origin_template", &self.origin_template)?;
        Ok(a)
    }

    pub fn from_archive(archive: &Archive) -> Result<Self> {
        let vectors = archive.matrix("context")?;
        let origin_template = archive.text("meta.origin_template")?;
        let skeleton = TemplateSkeleton::parse(&origin_template)?;
        if skeleton.context_len() != vectors.rows() {
            return Err(Error::Shape(format!(
                "template {origin_template:?} has {} context tokens, archive holds {} vectors",
                skeleton.context_len(),
                vectors.rows()
            )));
        }
        Ok(Self { vectors, origin_template, class_position: skeleton.prefix.len() })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr_init: f64,
    pub warmup_lr: f64,
    pub warmup_epochs: usize,
    pub max_epochs: usize,
    pub shots: usize,
    pub seed: u64,
    pub tau: Temperature,
    /// `None` trains on the full few-shot set every step.
    pub batch_size: Option<usize>,
    pub template: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_init: 0.02,
            warmup_lr: 1e-5,
            warmup_epochs: 1,
            max_epochs: 200,
            shots: 16,
            seed: 7,
            tau: Temperature::DEFAULT,
            batch_size: None,
            template: DEFAULT_TEMPLATE.to_string(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.warmup_lr > 0.0 && self.lr_init > self.warmup_lr && self.lr_init.is_finite()) {
            return Err(Error::Config(format!(
                "learning rates must satisfy lr_init > warmup_lr > 0 (got {} and {})",
                self.lr_init, self.warmup_lr
            )));
        }
        if self.shots == 0 {
            return Err(Error::Config("shots must be at least 1".into()));
        }
        if self.batch_size == Some(0) {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        TemplateSkeleton::parse(&self.template)?;
        Ok(())
    }
}

/// Context initialized to the embeddings of the template's own tokens.
pub fn init_context(template: &str, vocab: &Vocabulary) -> Result<ContextBlock> {
    let skeleton = TemplateSkeleton::parse(template)?;
    if skeleton.context_len() == 0 {
        return Err(Error::Template(format!("template {template:?} has no context tokens")));
    }
    let rows: Vec<Vec<f64>> = skeleton.context_tokens().map(|t| vocab.embedding(t)).collect();
    Ok(ContextBlock {
        vectors: Matrix::from_rows(&rows, vocab.embed_width())?,
        origin_template: template.to_string(),
        class_position: skeleton.prefix.len(),
    })
}

/// Learned prompt for one class: context rows around the classname rows.
pub fn assemble_prompt(
    context: &ContextBlock,
    class_id: ClassId,
    vocab: &Vocabulary,
    universe: &ClassUniverse,
) -> Result<PromptSequence> {
    let classname = universe.classname(class_id)?;
    if context.vectors.cols() != vocab.embed_width() {
        return Err(Error::Shape(format!(
            "context width {} differs from vocabulary width {}",
            context.vectors.cols(),
            vocab.embed_width()
        )));
    }
    let class_rows = classname_rows(classname, vocab)?;
    let split = context.class_position;
    let mut rows: Vec<Vec<f64>> = (0..split).map(|r| context.vectors.row(r).to_vec()).collect();
    rows.extend(class_rows);
    let class_end = rows.len();
    rows.extend((split..context.len()).map(|r| context.vectors.row(r).to_vec()));
    PromptSequence::new(Matrix::from_rows(&rows, vocab.embed_width())?, split..class_end)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub sample: Vec<f64>,
    pub label: ClassId,
}

/// Indexed read access to training samples.
pub trait SampleSource {
    fn len(&self) -> usize;
    fn get(&self, index: usize) -> &LabeledSample;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl SampleSource for [LabeledSample] {
    fn len(&self) -> usize {
        <[LabeledSample]>::len(self)
    }

    fn get(&self, index: usize) -> &LabeledSample {
        &self[index]
    }
}

impl SampleSource for Vec<LabeledSample> {
    fn len(&self) -> usize {
        Vec::len(self)
    }

    fn get(&self, index: usize) -> &LabeledSample {
        &self[index]
    }
}

/// Wraps a source and records the label of every sample handed out.
pub struct LoggedSource<'a, S: SampleSource + ?Sized> {
    inner: &'a S,
    log: RefCell<Vec<ClassId>>,
}

impl<'a, S: SampleSource + ?Sized> LoggedSource<'a, S> {
    pub fn new(inner: &'a S) -> Self {
        Self { inner, log: RefCell::new(Vec::new()) }
    }

    pub fn accessed_labels(&self) -> Vec<ClassId> {
        self.log.borrow().clone()
    }
}

impl<S: SampleSource + ?Sized> SampleSource for LoggedSource<'_, S> {
    fn len(&self) -> usize {
        self.inner.len()
    }

    fn get(&self, index: usize) -> &LabeledSample {
        let s = self.inner.get(index);
        self.log.borrow_mut().push(s.label);
        s
    }
}

/// Image features paired with base-class positions, precomputed once since
/// the image encoder is frozen.
struct EncodedBatch {
    feats: Vec<FeatureVector>,
    targets: Vec<usize>,
}

fn encode_batch<'s>(
    samples: impl IntoIterator<Item = &'s LabeledSample>,
    encoders: &Encoders,
    universe: &ClassUniverse,
) -> Result<EncodedBatch> {
    let mut feats = Vec::new();
    let mut targets = Vec::new();
    for s in samples {
        let pos = universe.base_ids().iter().position(|&id| id == s.label).ok_or_else(|| {
            Error::Config(format!("training label {} is not a base class", s.label))
        })?;
        feats.push(encoders.encode_image(&s.sample)?);
        targets.push(pos);
    }
    if feats.is_empty() {
        return Err(Error::Data("empty training batch".into()));
    }
    Ok(EncodedBatch { feats, targets })
}

fn loss_and_grad(
    context: &ContextBlock,
    batch: &EncodedBatch,
    encoders: &Encoders,
    vocab: &Vocabulary,
    universe: &ClassUniverse,
    tau: Temperature,
) -> Result<(f64, Matrix)> {
    let prompts = universe
        .base_ids()
        .iter()
        .map(|&id| assemble_prompt(context, id, vocab, universe))
        .collect::<Result<Vec<_>>>()?;
    let text_feats = prompts.iter().map(|p| encode_text(p, &encoders.text)).collect::<Result<Vec<_>>>()?;

    let n = batch.feats.len() as f64;
    let dim = encoders.text.feature_dim();
    let mut loss = 0.0;
    // d loss / d text feature, one row per base class.
    let mut upstream = vec![vec![0.0; dim]; text_feats.len()];
    for (x, &y) in batch.feats.iter().zip(&batch.targets) {
        let p = class_posterior(x, &text_feats, tau)?;
        loss -= p[y].ln() / n;
        for (k, pk) in p.iter().enumerate() {
            let coef = (pk - if k == y { 1.0 } else { 0.0 }) / (n * tau.value());
            for (u, xi) in upstream[k].iter_mut().zip(x.iter()) {
                *u += coef * xi;
            }
        }
    }

    let mut grad = Matrix::zeros(context.len(), context.vectors.cols());
    for (prompt, up) in prompts.iter().zip(&upstream) {
        let g = encode_text_grad(prompt, &encoders.text, up)?;
        for (ctx_row, prompt_row) in prompt.context_rows().enumerate() {
            for (a, b) in grad.row_mut(ctx_row).iter_mut().zip(g.row(prompt_row)) {
                *a += b;
            }
        }
    }
    Ok((loss, grad))
}

/// Mean cross-entropy of the true labels under the base-class posterior and
/// its gradient with respect to the context vectors.
pub fn coop_loss(
    context: &ContextBlock,
    batch: &[LabeledSample],
    encoders: &Encoders,
    vocab: &Vocabulary,
    universe: &ClassUniverse,
    tau: Temperature,
) -> Result<(f64, Matrix)> {
    let encoded = encode_batch(batch, encoders, universe)?;
    loss_and_grad(context, &encoded, encoders, vocab, universe, tau)
}

/// Constant warmup followed by cosine annealing, per epoch.
pub fn lr_schedule(epoch: usize, config: &TrainConfig) -> Result<f64> {
    if epoch >= config.max_epochs {
        return Err(Error::Range(format!("epoch {epoch} outside 0..{}", config.max_epochs)));
    }
    if epoch < config.warmup_epochs {
        return Ok(config.warmup_lr);
    }
    let t = (epoch - config.warmup_epochs) as f64;
    let total = (config.max_epochs - config.warmup_epochs) as f64;
    Ok(config.lr_init * 0.5 * (1.0 + (PI * t / total).cos()))
}

/// Trains the context and also returns the full-batch loss before each
/// epoch followed by the final loss.
pub fn train_coop_traced<S: SampleSource + ?Sized>(
    data: &S,
    config: &TrainConfig,
    encoders: &Encoders,
    vocab: &Vocabulary,
    universe: &ClassUniverse,
) -> Result<(ContextBlock, Vec<f64>)> {
    config.validate()?;
    let samples: Vec<&LabeledSample> = (0..data.len()).map(|i| data.get(i)).collect();
    for s in &samples {
        if !universe.is_base(s.label) {
            return Err(Error::Config(format!("training label {} is not a base class", s.label)));
        }
    }
    for &id in universe.base_ids() {
        let count = samples.iter().filter(|s| s.label == id).count();
        if count != config.shots {
            return Err(Error::Data(format!("base class {id} has {count} samples, expected {} shots", config.shots)));
        }
    }

    let mut context = init_context(&config.template, vocab)?;
    let full = encode_batch(samples.iter().copied(), encoders, universe)?;
    let mut losses = Vec::with_capacity(config.max_epochs + 1);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut rng = seed::rng(config.seed, "train:shuffle");

    for epoch in 0..config.max_epochs {
        let lr = lr_schedule(epoch, config)?;
        match config.batch_size {
            None => {
                let (loss, grad) = loss_and_grad(&context, &full, encoders, vocab, universe, config.tau)?;
                losses.push(loss);
                sgd_step(&mut context, &grad, lr)?;
            }
            Some(size) => {
                losses.push(loss_and_grad(&context, &full, encoders, vocab, universe, config.tau)?.0);
                order.shuffle(&mut rng);
                for chunk in order.chunks(size) {
                    let mini = EncodedBatch {
                        feats: chunk.iter().map(|&i| full.feats[i].clone()).collect(),
                        targets: chunk.iter().map(|&i| full.targets[i]).collect(),
                    };
                    let (_, grad) = loss_and_grad(&context, &mini, encoders, vocab, universe, config.tau)?;
                    sgd_step(&mut context, &grad, lr)?;
                }
            }
        }
    }
    losses.push(loss_and_grad(&context, &full, encoders, vocab, universe, config.tau)?.0);
    Ok((context, losses))
}

pub fn train_coop<S: SampleSource + ?Sized>(
    data: &S,
    config: &TrainConfig,
    encoders: &Encoders,
    vocab: &Vocabulary,
    universe: &ClassUniverse,
) -> Result<ContextBlock> {
    train_coop_traced(data, config, encoders, vocab, universe).map(|(c, _)| c)
}

fn sgd_step(context: &mut ContextBlock, grad: &Matrix, lr: f64) -> Result<()> {
    for (v, g) in context.vectors.as_mut_slice().iter_mut().zip(grad.as_slice()) {
        *v -= lr * g;
    }
    if context.vectors.as_slice().iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("context diverged to a non-finite value".into()));
    }
    Ok(())
}
