//! Test-time prompt fusion.
//!
//! For each test input, MCM scores are taken with learned prompts over the
//! base classes and with hand-crafted prompts over the new classes. Their
//! ratio `α = s_fs / (s_fs + s_zs)` blends the two prompt sets class by
//! class, the blended prompts are re-encoded, and the input is classified
//! over all K′ classes. The two ablations (constant α and the stage-1
//! classifier combination) live here too.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, RwLock};

use crate::encoder::{build_handcrafted_prompt, encode_text, PromptSequence, TextEncoderParams, Vocabulary};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::math::{FeatureVector, Temperature};
use crate::scoring::{class_posterior, mcm_score, ClassId, ClassUniverse, MCMScore};
use crate::tuning::{assemble_prompt, ContextBlock};

/// Learned and hand-crafted prompts for every class, with their encodings.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptBank {
    learned: BTreeMap<ClassId, PromptSequence>,
    handcrafted: BTreeMap<ClassId, PromptSequence>,
    learned_feats: BTreeMap<ClassId, FeatureVector>,
    handcrafted_feats: BTreeMap<ClassId, FeatureVector>,
}

impl PromptBank {
    /// Builds both prompt sets for every class of `universe`, the learned
    /// ones from `context` and the hand-crafted ones from the context's
    /// origin template.
    pub fn build(
        context: &ContextBlock,
        vocab: &Vocabulary,
        universe: &ClassUniverse,
        text: &TextEncoderParams,
    ) -> Result<Self> {
        let mut learned = BTreeMap::new();
        let mut handcrafted = BTreeMap::new();
        for id in universe.all_ids() {
            learned.insert(id, assemble_prompt(context, id, vocab, universe)?);
            let name = universe.classname(id)?;
            handcrafted.insert(id, build_handcrafted_prompt(&context.origin_template, name, vocab)?);
        }
        Self::from_sequences(learned, handcrafted, text)
    }

    pub fn from_sequences(
        learned: BTreeMap<ClassId, PromptSequence>,
        handcrafted: BTreeMap<ClassId, PromptSequence>,
        text: &TextEncoderParams,
    ) -> Result<Self> {
        if learned.keys().ne(handcrafted.keys()) {
            return Err(Error::Config("learned and hand-crafted prompts cover different classes".into()));
        }
        for (id, fs) in &learned {
            let zs = &handcrafted[id];
            if fs.embeddings.shape() != zs.embeddings.shape() {
                return Err(Error::Shape(format!(
                    "class {id}: learned prompt is {:?}, hand-crafted prompt is {:?}",
                    fs.embeddings.shape(),
                    zs.embeddings.shape()
                )));
            }
            if fs.class_slot != zs.class_slot
                || fs.class_slot.clone().any(|r| fs.embeddings.row(r) != zs.embeddings.row(r))
            {
                return Err(Error::Config(format!("class {id}: classname rows differ between prompt sets")));
            }
        }
        let encode_all = |m: &BTreeMap<ClassId, PromptSequence>| {
            m.iter()
                .map(|(&id, p)| Ok((id, encode_text(p, text)?)))
                .collect::<Result<BTreeMap<_, _>>>()
        };
        Ok(Self {
            learned_feats: encode_all(&learned)?,
            handcrafted_feats: encode_all(&handcrafted)?,
            learned,
            handcrafted,
        })
    }

    pub fn learned(&self) -> &BTreeMap<ClassId, PromptSequence> {
        &self.learned
    }

    pub fn handcrafted(&self) -> &BTreeMap<ClassId, PromptSequence> {
        &self.handcrafted
    }

    pub fn learned_feature(&self, id: ClassId) -> Result<&FeatureVector> {
        self.learned_feats.get(&id).ok_or_else(|| Error::Config(format!("no learned prompt for class {id}")))
    }

    pub fn handcrafted_feature(&self, id: ClassId) -> Result<&FeatureVector> {
        self.handcrafted_feats
            .get(&id)
            .ok_or_else(|| Error::Config(format!("no hand-crafted prompt for class {id}")))
    }

    fn covers(&self, universe: &ClassUniverse) -> Result<()> {
        if self.learned.len() != universe.num_total() || universe.all_ids().any(|id| !self.learned.contains_key(&id)) {
            return Err(Error::Config("prompt bank does not cover the class universe".into()));
        }
        Ok(())
    }
}

/// Per-input blending weight and the two MCM scores it came from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionWeight {
    pub alpha: f64,
    pub s_fs: MCMScore,
    pub s_zs: MCMScore,
}

/// MCM over learned base-class prompts and over hand-crafted new-class
/// prompts.
pub fn stage1_scores(
    image_feat: &[f64],
    bank: &PromptBank,
    universe: &ClassUniverse,
    tau: Temperature,
) -> Result<(MCMScore, MCMScore)> {
    universe.require_open()?;
    let base = universe.base_ids().iter().map(|&id| bank.learned_feature(id).cloned()).collect::<Result<Vec<_>>>()?;
    let new = universe.new_ids().iter().map(|&id| bank.handcrafted_feature(id).cloned()).collect::<Result<Vec<_>>>()?;
    Ok((mcm_score(image_feat, &base, tau)?, mcm_score(image_feat, &new, tau)?))
}

pub fn compute_alpha(s_fs: MCMScore, s_zs: MCMScore) -> Result<FusionWeight> {
    if !(s_fs.value > 0.0 && s_zs.value > 0.0) {
        return Err(Error::Range(format!("MCM scores must be positive, got {} and {}", s_fs.value, s_zs.value)));
    }
    Ok(FusionWeight { alpha: s_fs.value / (s_fs.value + s_zs.value), s_fs, s_zs })
}

/// `α · learned + (1 − α) · hand-crafted`, elementwise over every class's
/// full prompt.
pub fn fuse_prompts(bank: &PromptBank, alpha: f64) -> Result<BTreeMap<ClassId, PromptSequence>> {
    check_alpha(alpha)?;
    bank.learned
        .iter()
        .map(|(&id, fs)| {
            let zs = &bank.handcrafted[&id];
            if fs.embeddings.shape() != zs.embeddings.shape() {
                return Err(Error::Shape(format!("class {id}: prompt shapes differ")));
            }
            let data = fs
                .embeddings
                .as_slice()
                .iter()
                .zip(zs.embeddings.as_slice())
                .map(|(&a, &b)| alpha * a + (1.0 - alpha) * b)
                .collect();
            let (rows, cols) = fs.embeddings.shape();
            let fused = PromptSequence::new(Matrix::from_vec(rows, cols, data)?, fs.class_slot.clone())?;
            Ok((id, fused))
        })
        .collect()
}

fn check_alpha(alpha: f64) -> Result<()> {
    if (0.0..=1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(Error::Range(format!("fusion weight {alpha} outside [0, 1]")))
    }
}

fn fused_features(bank: &PromptBank, alpha: f64, text: &TextEncoderParams) -> Result<Vec<FeatureVector>> {
    fuse_prompts(bank, alpha)?.values().map(|p| encode_text(p, text)).collect()
}

/// Dynamic fusion with one temperature for both stages.
pub fn predict_open(
    image_feat: &[f64],
    bank: &PromptBank,
    universe: &ClassUniverse,
    text: &TextEncoderParams,
    tau: Temperature,
) -> Result<(Vec<f64>, FusionWeight)> {
    predict_open_with(image_feat, bank, universe, text, tau, tau, None)
}

/// Dynamic fusion with separate stage-1 and stage-2 temperatures and an
/// optional α cache.
pub fn predict_open_with(
    image_feat: &[f64],
    bank: &PromptBank,
    universe: &ClassUniverse,
    text: &TextEncoderParams,
    stage1_tau: Temperature,
    tau: Temperature,
    cache: Option<&AlphaCache>,
) -> Result<(Vec<f64>, FusionWeight)> {
    bank.covers(universe)?;
    let (s_fs, s_zs) = stage1_scores(image_feat, bank, universe, stage1_tau)?;
    let weight = compute_alpha(s_fs, s_zs)?;
    let posterior = match cache {
        Some(cache) => class_posterior(image_feat, &cache.features(bank, weight.alpha, text)?, tau)?,
        None => class_posterior(image_feat, &fused_features(bank, weight.alpha, text)?, tau)?,
    };
    Ok((posterior, weight))
}

/// Input-independent fusion with a constant α.
pub fn predict_fixed_alpha(
    image_feat: &[f64],
    bank: &PromptBank,
    universe: &ClassUniverse,
    text: &TextEncoderParams,
    tau: Temperature,
    alpha: f64,
) -> Result<Vec<f64>> {
    check_alpha(alpha)?;
    bank.covers(universe)?;
    class_posterior(image_feat, &fused_features(bank, alpha, text)?, tau)
}

/// One K′-way softmax with learned base-class features and hand-crafted
/// new-class features; no fusion.
pub fn predict_classifier_combo(
    image_feat: &[f64],
    bank: &PromptBank,
    universe: &ClassUniverse,
    tau: Temperature,
) -> Result<Vec<f64>> {
    universe.require_open()?;
    bank.covers(universe)?;
    let feats = universe
        .all_ids()
        .map(|id| {
            if universe.is_base(id) {
                bank.learned_feature(id).cloned()
            } else {
                bank.handcrafted_feature(id).cloned()
            }
        })
        .collect::<Result<Vec<_>>>()?;
    class_posterior(image_feat, &feats, tau)
}

pub fn predict_learned_only(image_feat: &[f64], bank: &PromptBank, universe: &ClassUniverse, tau: Temperature) -> Result<Vec<f64>> {
    bank.covers(universe)?;
    let feats = universe.all_ids().map(|id| bank.learned_feature(id).cloned()).collect::<Result<Vec<_>>>()?;
    class_posterior(image_feat, &feats, tau)
}

pub fn predict_handcrafted_only(image_feat: &[f64], bank: &PromptBank, universe: &ClassUniverse, tau: Temperature) -> Result<Vec<f64>> {
    bank.covers(universe)?;
    let feats = universe.all_ids().map(|id| bank.handcrafted_feature(id).cloned()).collect::<Result<Vec<_>>>()?;
    class_posterior(image_feat, &feats, tau)
}

/// Fused text features keyed by α quantized to `1/bins`.
///
/// Readers never observe a partially built entry; two threads racing on the
/// same bin may both compute it, and the first insert wins.
#[derive(Debug)]
pub struct AlphaCache {
    bins: u32,
    entries: RwLock<HashMap<u32, Arc<Vec<FeatureVector>>>>,
}

impl Default for AlphaCache {
    fn default() -> Self {
        Self::new(256)
    }
}

impl AlphaCache {
    pub fn new(bins: u32) -> Self {
        assert!(bins > 0, "alpha cache needs at least one bin");
        Self { bins, entries: RwLock::new(HashMap::new()) }
    }

    pub fn quantize(&self, alpha: f64) -> (u32, f64) {
        let bin = (alpha.clamp(0.0, 1.0) * f64::from(self.bins)).round() as u32;
        (bin, f64::from(bin) / f64::from(self.bins))
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("alpha cache lock poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn features(&self, bank: &PromptBank, alpha: f64, text: &TextEncoderParams) -> Result<Arc<Vec<FeatureVector>>> {
        let (bin, quantized) = self.quantize(alpha);
        if let Some(hit) = self.entries.read().expect("alpha cache lock poisoned").get(&bin) {
            return Ok(Arc::clone(hit));
        }
        let computed = Arc::new(fused_features(bank, quantized, text)?);
        let mut entries = self.entries.write().expect("alpha cache lock poisoned");
        Ok(Arc::clone(entries.entry(bin).or_insert(computed)))
    }
}

/// The predictors compared in evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Predictor {
    Dynamic,
    FixedAlpha(f64),
    ClassifierCombo,
    LearnedOnly,
    HandcraftedOnly,
}

impl Predictor {
    pub fn name(&self) -> String {
        match self {
            Predictor::Dynamic => "dynamic".into(),
            Predictor::FixedAlpha(a) => format!("fixed:{a}"),
            Predictor::ClassifierCombo => "combo".into(),
            Predictor::LearnedOnly => "learned".into(),
            Predictor::HandcraftedOnly => "handcrafted".into(),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "dynamic" => Ok(Predictor::Dynamic),
            "combo" => Ok(Predictor::ClassifierCombo),
            "learned" => Ok(Predictor::LearnedOnly),
            "handcrafted" => Ok(Predictor::HandcraftedOnly),
            _ => {
                let value = s
                    .strip_prefix("fixed:")
                    .ok_or_else(|| Error::Config(format!("unknown predictor {s:?}")))?;
                let alpha: f64 =
                    value.parse().map_err(|_| Error::Config(format!("bad fixed alpha {value:?}")))?;
                check_alpha(alpha)?;
                Ok(Predictor::FixedAlpha(alpha))
            }
        }
    }

    /// File-name friendly form of [`Predictor::name`].
    pub fn slug(&self) -> String {
        self.name().replace(':', "_")
    }
}

/// A K′-way posterior, plus the α used when the predictor has one.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub posterior: Vec<f64>,
    pub alpha: Option<f64>,
}

/// Everything needed to classify test inputs over all K′ classes.
#[derive(Debug)]
pub struct FusionModel {
    pub bank: PromptBank,
    pub universe: ClassUniverse,
    pub text: TextEncoderParams,
    pub tau: Temperature,
    /// Temperature of the stage-1 MCM scores; defaults to `tau`.
    pub stage1_tau: Temperature,
    pub cache: Option<AlphaCache>,
}

impl FusionModel {
    pub fn new(bank: PromptBank, universe: ClassUniverse, text: TextEncoderParams, tau: Temperature) -> Result<Self> {
        bank.covers(&universe)?;
        Ok(Self { bank, universe, text, tau, stage1_tau: tau, cache: None })
    }

    pub fn predict(&self, predictor: Predictor, image_feat: &[f64]) -> Result<Prediction> {
        let (posterior, alpha) = match predictor {
            Predictor::Dynamic => {
                let (p, w) = predict_open_with(
                    image_feat,
                    &self.bank,
                    &self.universe,
                    &self.text,
                    self.stage1_tau,
                    self.tau,
                    self.cache.as_ref(),
                )?;
                (p, Some(w.alpha))
            }
            Predictor::FixedAlpha(a) => {
                (predict_fixed_alpha(image_feat, &self.bank, &self.universe, &self.text, self.tau, a)?, Some(a))
            }
            Predictor::ClassifierCombo => {
                (predict_classifier_combo(image_feat, &self.bank, &self.universe, self.tau)?, None)
            }
            Predictor::LearnedOnly => (predict_learned_only(image_feat, &self.bank, &self.universe, self.tau)?, None),
            Predictor::HandcraftedOnly => {
                (predict_handcrafted_only(image_feat, &self.bank, &self.universe, self.tau)?, None)
            }
        };
        Ok(Prediction { posterior, alpha })
    }
}
