//! Synthetic open-class tasks, base/new splitting and few-shot sampling.

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::archive::Archive;
use crate::error::{Error, Result};
use crate::linalg::{norm, Matrix};
use crate::scoring::{ClassId, ClassUniverse};
use crate::seed;
use crate::tuning::LabeledSample;

/// Shape of a synthetic task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub n_classes: usize,
    pub dim: usize,
    pub noise_scale: f64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self { n_classes: 8, dim: 16, noise_scale: 0.35, train_per_class: 64, test_per_class: 100, seed: 7 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    pub universe: ClassUniverse,
    pub prototypes: BTreeMap<ClassId, Vec<f64>>,
    pub noise_scale: f64,
    /// Base-class samples only.
    pub train_pool: Vec<LabeledSample>,
    /// Samples of every class.
    pub test_pool: Vec<LabeledSample>,
    pub seed: u64,
}

impl SyntheticTask {
    pub fn dim(&self) -> usize {
        self.prototypes.values().next().map_or(0, Vec::len)
    }

    pub fn classnames(&self) -> Vec<String> {
        self.universe.classnames().values().cloned().collect()
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let mut a = Archive::new();
        let dim = self.dim();
        let protos: Vec<Vec<f64>> = self.prototypes.values().cloned().collect();
        a.push_matrix("task.prototypes", &Matrix::from_rows(&protos, dim)?)?;
        let ids = |v: &[ClassId]| v.iter().map(|c| f64::from(c.0)).collect::<Vec<_>>();
        a.push("task.base_ids", &[self.universe.num_base()], &ids(self.universe.base_ids()))?;
        a.push("task.new_ids", &[self.universe.new_ids().len()], &ids(self.universe.new_ids()))?;
        for (key, pool) in [("train", &self.train_pool), ("test", &self.test_pool)] {
            let rows: Vec<Vec<f64>> = pool.iter().map(|s| s.sample.clone()).collect();
            a.push_matrix(&format!("task.{key}.samples"), &Matrix::from_rows(&rows, dim)?)?;
            let labels: Vec<f64> = pool.iter().map(|s| f64::from(s.label.0)).collect();
            a.push(&format!("task.{key}.labels"), &[labels.len()], &labels)?;
        }
        a.push_text("meta.task.classnames", &self.classnames().join("\n"))?;
        a.push_text("meta.task.noise_scale", &self.noise_scale.to_string())?;
        a.push_text("meta.task.seed", &self.seed.to_string())?;
        Ok(a)
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        let to_ids = |v: Vec<f64>| -> Result<Vec<ClassId>> {
            v.into_iter()
                .map(|x| {
                    if x.fract() == 0.0 && x >= 1.0 && x <= f64::from(u32::MAX) {
                        Ok(ClassId(x as u32))
                    } else {
                        Err(Error::Archive(format!("bad class id {x}")))
                    }
                })
                .collect()
        };
        let names: Vec<String> = a.text("meta.task.classnames")?.split('\n').map(str::to_string).collect();
        let classnames: BTreeMap<ClassId, String> =
            names.into_iter().enumerate().map(|(i, n)| (ClassId::from_index(i), n)).collect();
        let universe = ClassUniverse::new(to_ids(a.vector("task.base_ids")?)?, to_ids(a.vector("task.new_ids")?)?, classnames)?;
        let protos = a.matrix("task.prototypes")?;
        if protos.rows() != universe.num_total() {
            return Err(Error::Archive(format!("{} prototypes for {} classes", protos.rows(), universe.num_total())));
        }
        let prototypes = (0..protos.rows()).map(|r| (ClassId::from_index(r), protos.row(r).to_vec())).collect();
        let pool = |key: &str| -> Result<Vec<LabeledSample>> {
            let samples = a.matrix(&format!("task.{key}.samples"))?;
            let labels = to_ids(a.vector(&format!("task.{key}.labels"))?)?;
            if labels.len() != samples.rows() || samples.cols() != protos.cols() {
                return Err(Error::Archive(format!("{key} pool shape mismatch")));
            }
            Ok(labels
                .into_iter()
                .enumerate()
                .map(|(r, label)| LabeledSample { sample: samples.row(r).to_vec(), label })
                .collect())
        };
        let parse = |key: &str| a.text(key);
        let noise_scale = parse("meta.task.noise_scale")?
            .parse()
            .map_err(|_| Error::Archive("bad noise scale".into()))?;
        let seed = parse("meta.task.seed")?.parse().map_err(|_| Error::Archive("bad seed".into()))?;
        Ok(Self { universe, prototypes, noise_scale, train_pool: pool("train")?, test_pool: pool("test")?, seed })
    }
}

pub fn synthetic_classname(index: usize) -> String {
    format!("class_{index:02}")
}

/// Seeded shuffle; the first `⌈n/2⌉` ids become base classes.
pub fn split_base_new(class_ids: &[ClassId], classnames: BTreeMap<ClassId, String>, seed: u64) -> Result<ClassUniverse> {
    if class_ids.len() < 2 {
        return Err(Error::Config(format!("need at least 2 classes to split, got {}", class_ids.len())));
    }
    let mut shuffled = class_ids.to_vec();
    shuffled.shuffle(&mut seed::rng(seed, "split"));
    let n_base = class_ids.len().div_ceil(2);
    let mut base = shuffled[..n_base].to_vec();
    let mut new = shuffled[n_base..].to_vec();
    base.sort();
    new.sort();
    ClassUniverse::new(base, new, classnames)
}

/// Rounds through `f32` so tasks survive the archive unchanged.
fn f32_exact(v: f64) -> f64 {
    f64::from(v as f32)
}

pub fn generate_synthetic_task(spec: &TaskSpec) -> Result<SyntheticTask> {
    if spec.n_classes < 2 || spec.dim < 2 {
        return Err(Error::Config(format!(
            "synthetic task needs at least 2 classes and 2 dimensions, got {} and {}",
            spec.n_classes, spec.dim
        )));
    }
    if !(spec.noise_scale > 0.0 && spec.noise_scale.is_finite()) {
        return Err(Error::Config(format!("noise scale must be positive, got {}", spec.noise_scale)));
    }
    if spec.train_per_class == 0 || spec.test_per_class == 0 {
        return Err(Error::Config("pools need at least one sample per class".into()));
    }
    let ids: Vec<ClassId> = (0..spec.n_classes).map(ClassId::from_index).collect();
    let classnames: BTreeMap<ClassId, String> = ids.iter().map(|&id| (id, synthetic_classname(id.index()))).collect();
    let universe = split_base_new(&ids, classnames, spec.seed)?;

    let mut rng = seed::rng(spec.seed, "task:prototypes");
    let mut prototypes = BTreeMap::new();
    for &id in &ids {
        let v: Vec<f64> = loop {
            let v: Vec<f64> = (0..spec.dim).map(|_| rng.sample(StandardNormal)).collect();
            if norm(&v) > 0.0 {
                break v;
            }
        };
        let n = norm(&v);
        prototypes.insert(id, v.into_iter().map(|x| f32_exact(x / n)).collect::<Vec<f64>>());
    }

    let draw = |rng: &mut rand_chacha::ChaCha8Rng, id: ClassId| LabeledSample {
        sample: prototypes[&id]
            .iter()
            .map(|&p| f32_exact(p + spec.noise_scale * rng.sample::<f64, _>(StandardNormal)))
            .collect(),
        label: id,
    };
    let mut rng = seed::rng(spec.seed, "task:train");
    let train_pool = universe
        .base_ids()
        .iter()
        .flat_map(|&id| std::iter::repeat_n(id, spec.train_per_class))
        .map(|id| draw(&mut rng, id))
        .collect();
    let mut rng = seed::rng(spec.seed, "task:test");
    let test_pool = ids
        .iter()
        .flat_map(|&id| std::iter::repeat_n(id, spec.test_per_class))
        .map(|id| draw(&mut rng, id))
        .collect();

    Ok(SyntheticTask { universe, prototypes, noise_scale: spec.noise_scale, train_pool, test_pool, seed: spec.seed })
}

/// Exactly `shots` training samples per base class, drawn without
/// replacement. Only the training pool is read.
pub fn sample_few_shot(task: &SyntheticTask, shots: usize, seed: u64) -> Result<Vec<LabeledSample>> {
    if shots == 0 {
        return Err(Error::Config("shots must be at least 1".into()));
    }
    let mut rng = seed::rng(seed, "few-shot");
    let mut out = Vec::with_capacity(shots * task.universe.num_base());
    for &id in task.universe.base_ids() {
        let pool: Vec<&LabeledSample> = task.train_pool.iter().filter(|s| s.label == id).collect();
        if pool.len() < shots {
            return Err(Error::Data(format!("base class {id} has {} training samples, {shots} shots requested", pool.len())));
        }
        out.extend(pool.choose_multiple(&mut rng, shots).map(|&s| s.clone()));
    }
    Ok(out)
}
