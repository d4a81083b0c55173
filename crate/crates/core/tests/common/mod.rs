//! Shared fixtures, naive reference implementations and property checks.

#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ttpt::encoder::{tokenize, Encoders, ImageEncoderParams, TextEncoderParams, Vocabulary};
use ttpt::fusion::PromptBank;
use ttpt::linalg::Matrix;
use ttpt::math::Temperature;
use ttpt::scoring::{ClassId, ClassUniverse};
use ttpt::tuning::{init_context, ContextBlock, LabeledSample};

pub mod checks;
pub mod naive;

pub const TEMPLATES: [&str; 4] = ["a photo of a [CLASS]", "[CLASS] in the wild", "a blurry [CLASS] photo", "itap of a [CLASS]"];

/// A small random open-class problem with a perturbed (not freshly
/// initialized) context.
pub struct Instance {
    pub vocab: Vocabulary,
    pub encoders: Encoders,
    pub universe: ClassUniverse,
    pub context: ContextBlock,
    pub batch: Vec<LabeledSample>,
    pub tau: Temperature,
    pub template: String,
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f7e)
}

pub fn gaussian(rng: &mut impl Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(rand_distr::StandardNormal)).collect()
}

pub fn unit(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    let v = gaussian(rng, n, 1.0);
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

/// `n_base` base and `n_new` new classes with shuffled ids.
pub fn instance(seed: u64, n_base: usize, n_new: usize, taus: &[f64]) -> Instance {
    let mut r = rng(seed);
    let total = n_base + n_new;
    let two_tokens = r.random_bool(0.3);
    let names: Vec<String> = (0..total)
        .map(|i| if two_tokens { format!("kind{i} thing{i}") } else { format!("class_{i:02}") })
        .collect();
    let template = TEMPLATES[r.random_range(0..TEMPLATES.len())].to_string();
    let embed_width = r.random_range(4..=8);
    let feature_dim = r.random_range(3..=6);
    let sample_dim = r.random_range(3..=6);
    let vocab = Vocabulary::build(&names, std::slice::from_ref(&template), embed_width, r.random()).unwrap();
    let prompt_len = tokenize(&template).len() - 1 + tokenize(&names[0]).len();
    let text = TextEncoderParams::generate(prompt_len, embed_width, feature_dim, r.random()).unwrap();
    let image = ImageEncoderParams::generate(sample_dim, feature_dim, r.random()).unwrap();
    let encoders = Encoders::new(text, image).unwrap();

    let mut ids: Vec<ClassId> = (1..=total as u32).map(ClassId).collect();
    ids.shuffle(&mut r);
    let classnames: BTreeMap<ClassId, String> = (1..=total as u32).map(|i| (ClassId(i), names[i as usize - 1].clone())).collect();
    let universe = ClassUniverse::new(ids[..n_base].to_vec(), ids[n_base..].to_vec(), classnames).unwrap();

    let mut context = init_context(&template, &vocab).unwrap();
    for x in context.vectors.as_mut_slice() {
        *x += 0.3 * r.sample::<f64, _>(rand_distr::StandardNormal);
    }
    let batch = (0..r.random_range(3..=10))
        .map(|_| LabeledSample {
            sample: gaussian(&mut r, sample_dim, 1.0),
            label: universe.base_ids()[r.random_range(0..n_base)],
        })
        .collect();
    let tau = Temperature::new(taus[r.random_range(0..taus.len())]).unwrap();
    Instance { vocab, encoders, universe, context, batch, tau, template }
}

impl Instance {
    pub fn bank(&self) -> PromptBank {
        PromptBank::build(&self.context, &self.vocab, &self.universe, &self.encoders.text).unwrap()
    }

    pub fn feature_dim(&self) -> usize {
        self.encoders.text.feature_dim()
    }
}

pub fn matrix_of(rows: usize, cols: usize, data: Vec<f64>) -> Matrix {
    Matrix::from_vec(rows, cols, data).unwrap()
}
