//! Class posteriors, maximum concept matching (MCM) scores, and ID/OOD
//! thresholding.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::error::{Error, Result};
use crate::math::{cosine_similarity, softmax_with_temperature, FeatureVector, Temperature};

/// Class label. Ids of one universe are exactly `1..=K′`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ClassId(pub u32);

impl ClassId {
    /// Position of this class in a K′-way probability vector.
    pub fn index(self) -> usize {
        self.0 as usize - 1
    }

    pub fn from_index(i: usize) -> Self {
        ClassId(i as u32 + 1)
    }
}

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Partition of the label space into base (tuned) and new (open) classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassUniverse {
    base_ids: Vec<ClassId>,
    new_ids: Vec<ClassId>,
    classnames: BTreeMap<ClassId, String>,
}

impl ClassUniverse {
    pub fn new(base_ids: Vec<ClassId>, new_ids: Vec<ClassId>, classnames: BTreeMap<ClassId, String>) -> Result<Self> {
        if base_ids.is_empty() {
            return Err(Error::Config("universe needs at least one base class".into()));
        }
        let mut all = BTreeSet::new();
        for id in base_ids.iter().chain(&new_ids) {
            if !all.insert(*id) {
                return Err(Error::Config(format!("class {id} listed twice")));
            }
        }
        let total = all.len() as u32;
        if all.iter().map(|c| c.0).ne(1..=total) {
            return Err(Error::Config(format!("class ids must be exactly 1..={total}")));
        }
        if classnames.keys().ne(all.iter()) {
            return Err(Error::Config("classnames must cover exactly the class ids".into()));
        }
        Ok(Self { base_ids, new_ids, classnames })
    }

    pub fn base_ids(&self) -> &[ClassId] {
        &self.base_ids
    }

    pub fn new_ids(&self) -> &[ClassId] {
        &self.new_ids
    }

    /// K.
    pub fn num_base(&self) -> usize {
        self.base_ids.len()
    }

    /// K′.
    pub fn num_total(&self) -> usize {
        self.base_ids.len() + self.new_ids.len()
    }

    /// All class ids in ascending order, i.e. posterior order.
    pub fn all_ids(&self) -> impl Iterator<Item = ClassId> {
        (1..=self.num_total() as u32).map(ClassId)
    }

    pub fn contains(&self, id: ClassId) -> bool {
        id.0 >= 1 && (id.0 as usize) <= self.num_total()
    }

    pub fn is_base(&self, id: ClassId) -> bool {
        self.base_ids.contains(&id)
    }

    pub fn is_new(&self, id: ClassId) -> bool {
        self.new_ids.contains(&id)
    }

    pub fn classname(&self, id: ClassId) -> Result<&str> {
        self.classnames
            .get(&id)
            .map(String::as_str)
            .ok_or_else(|| Error::Config(format!("unknown class id {id}")))
    }

    pub fn classnames(&self) -> &BTreeMap<ClassId, String> {
        &self.classnames
    }

    pub fn require_open(&self) -> Result<()> {
        if self.new_ids.is_empty() {
            return Err(Error::Config("open-class evaluation needs at least one new class".into()));
        }
        Ok(())
    }
}

/// Maximum of a class posterior, together with the size of the class set it
/// was taken over.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MCMScore {
    pub value: f64,
    pub class_set_size: usize,
}

/// Softmax over cosine similarities between one image feature and each text
/// feature, in the given order.
pub fn class_posterior(image_feat: &[f64], text_feats: &[FeatureVector], tau: Temperature) -> Result<Vec<f64>> {
    if text_feats.is_empty() {
        return Err(Error::Shape("class posterior over an empty class set".into()));
    }
    let sims = text_feats
        .iter()
        .map(|t| cosine_similarity(image_feat, t))
        .collect::<Result<Vec<_>>>()?;
    softmax_with_temperature(&sims, tau)
}

pub fn mcm_score(image_feat: &[f64], text_feats: &[FeatureVector], tau: Temperature) -> Result<MCMScore> {
    let posterior = class_posterior(image_feat, text_feats, tau)?;
    let value = posterior.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(MCMScore { value, class_set_size: posterior.len() })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Id,
    Ood,
}

/// ID when the score reaches the threshold (inclusive), OOD below it.
pub fn ood_decide(score: MCMScore, lambda: f64) -> Result<Decision> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Range(format!("threshold {lambda} outside [0, 1]")));
    }
    Ok(if score.value >= lambda { Decision::Id } else { Decision::Ood })
}

/// Largest threshold that keeps at least `retention` of the ID scores at or
/// above it.
pub fn calibrate_lambda(id_scores: &[MCMScore], retention: f64) -> Result<f64> {
    if id_scores.is_empty() {
        return Err(Error::Shape("no ID scores to calibrate on".into()));
    }
    if !(retention > 0.0 && retention <= 1.0) {
        return Err(Error::Range(format!("retention {retention} outside (0, 1]")));
    }
    let mut values: Vec<f64> = id_scores.iter().map(|s| s.value).collect();
    values.sort_by(|a, b| b.total_cmp(a));
    let n = values.len();
    // Number of scores that must survive; the slack absorbs products such
    // as 0.7 * 10 = 7.000000000000001.
    let keep = ((retention * n as f64) - 1e-9).ceil().clamp(1.0, n as f64) as usize;
    Ok(values[keep - 1])
}
