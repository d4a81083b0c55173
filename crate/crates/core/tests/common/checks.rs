//! Measurements and property runners shared by the test suites and the
//! acceptance runner.

use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};

use ttpt::encoder::encode_text;
use ttpt::encoder::encode_text_grad;
use ttpt::fusion::{
    fuse_prompts, predict_classifier_combo, predict_fixed_alpha, predict_handcrafted_only, predict_learned_only,
    predict_open, stage1_scores,
};
use ttpt::math::{argmax, cosine_similarity, l2_normalize, softmax_with_temperature, Temperature};
use ttpt::scoring::mcm_score;
use ttpt::tuning::{coop_loss, init_context, train_coop, LabeledSample, TrainConfig};

use super::{gaussian, instance, naive, rng, unit, Instance};

pub const FD_STEP: f64 = 1e-5;

/// Largest entrywise relative error, with entries far below the gradient's
/// own scale compared against that scale instead.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = numeric.iter().chain(analytic).fold(0.0f64, |m, x| m.max(x.abs()));
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-3 * scale).max(1e-12))
        .fold(0.0, f64::max)
}

/// Central differences of `coop_loss` over every context entry.
pub fn coop_gradient_error(seed: u64) -> f64 {
    let inst = instance(seed, 2 + seed as usize % 3, 1 + seed as usize % 2, &[1.0, 0.1, 0.01]);
    let loss = |ctx: &ttpt::tuning::ContextBlock| {
        coop_loss(ctx, &inst.batch, &inst.encoders, &inst.vocab, &inst.universe, inst.tau).unwrap()
    };
    let (_, grad) = loss(&inst.context);
    let mut numeric = Vec::new();
    for i in 0..inst.context.vectors.as_slice().len() {
        let mut plus = inst.context.clone();
        plus.vectors.as_mut_slice()[i] += FD_STEP;
        let mut minus = inst.context.clone();
        minus.vectors.as_mut_slice()[i] -= FD_STEP;
        numeric.push((loss(&plus).0 - loss(&minus).0) / (2.0 * FD_STEP));
    }
    relative_error(grad.as_slice(), &numeric)
}

/// Central differences of `⟨u, encode_text(prompt)⟩` over every prompt entry.
pub fn text_gradient_error(seed: u64) -> f64 {
    let inst = instance(seed, 2, 2, &[1.0]);
    let mut r = rng(seed ^ 0xabc);
    let bank = inst.bank();
    let prompt = bank.learned().values().next().unwrap().clone();
    let upstream = gaussian(&mut r, inst.feature_dim(), 1.0);
    let f = |p: &ttpt::encoder::PromptSequence| {
        let feat = encode_text(p, &inst.encoders.text).unwrap();
        feat.iter().zip(&upstream).map(|(a, b)| a * b).sum::<f64>()
    };
    let grad = encode_text_grad(&prompt, &inst.encoders.text, &upstream).unwrap();
    let mut numeric = Vec::new();
    for i in 0..prompt.embeddings.as_slice().len() {
        let mut plus = prompt.clone();
        plus.embeddings.as_mut_slice()[i] += FD_STEP;
        let mut minus = prompt.clone();
        minus.embeddings.as_mut_slice()[i] -= FD_STEP;
        numeric.push((f(&plus) - f(&minus)) / (2.0 * FD_STEP));
    }
    relative_error(grad.as_slice(), &numeric)
}

/// Largest per-probability gap between `predict_open` and the naive
/// pipeline, plus the α gap. K ≤ 4, K′ ≤ 8.
pub fn oracle_gap(seed: u64) -> (f64, f64) {
    let mut r = rng(seed ^ 0x0_9ac1e);
    let k = 1 + seed as usize % 4;
    let new = 1 + (seed as usize / 4) % (8 - k).min(4);
    let inst = instance(seed, k, new, &[1.0, 0.1, 0.01]);
    let image = unit(&mut r, inst.feature_dim());
    let bank = inst.bank();
    let (post, weight) = predict_open(&image, &bank, &inst.universe, &inst.encoders.text, inst.tau).unwrap();
    let reference = naive::predict_open(&image, &inst.context, &inst.vocab, &inst.universe, &inst.encoders.text, inst.tau.value());
    assert_eq!(post.len(), reference.posterior.len());
    let gap = post.iter().zip(&reference.posterior).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    (gap, (weight.alpha - reference.alpha).abs())
}

/// A property with its case budget.
pub struct Property {
    pub name: &'static str,
    pub cases: u32,
    pub run: fn(u32) -> Result<(), String>,
}

pub const PROPERTIES: [Property; 8] = [
    Property { name: "softmax normalization", cases: 200, run: softmax_normalization },
    Property { name: "temperature argmax invariance", cases: 200, run: temperature_argmax },
    Property { name: "cosine scale invariance", cases: 200, run: cosine_scale },
    Property { name: "MCM lower bound", cases: 200, run: mcm_lower_bound },
    Property { name: "alpha range and ratio", cases: 100, run: alpha_ratio },
    Property { name: "fusion convexity and endpoints", cases: 100, run: fusion_convexity },
    Property { name: "frozen encoder checksums", cases: 25, run: frozen_checksums },
    Property { name: "identity collapse at zero epochs", cases: 25, run: identity_collapse },
];

fn runner(cases: u32) -> TestRunner {
    TestRunner::new(Config { cases, failure_persistence: None, ..Config::default() })
}

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<(), TestCaseError> {
    if ok {
        Ok(())
    } else {
        Err(TestCaseError::fail(msg()))
    }
}

fn run<S: Strategy>(cases: u32, strategy: S, test: impl Fn(S::Value) -> Result<(), TestCaseError>) -> Result<(), String>
where
    S::Value: std::fmt::Debug,
{
    runner(cases).run(&strategy, test).map_err(|e| e.to_string())
}

fn tau() -> impl Strategy<Value = Temperature> {
    (0.005f64..10.0).prop_map(|t| Temperature::new(t).unwrap())
}

pub fn softmax_normalization(cases: u32) -> Result<(), String> {
    run(cases, (prop::collection::vec(-50.0f64..50.0, 1..12), tau()), |(logits, tau)| {
        let p = softmax_with_temperature(&logits, tau).unwrap();
        let total: f64 = p.iter().sum();
        check((total - 1.0).abs() <= 1e-9, || format!("sum {total}"))?;
        check(p.iter().all(|&x| x >= 0.0), || "negative probability".into())
    })
}

pub fn temperature_argmax(cases: u32) -> Result<(), String> {
    let distinct = prop::collection::vec(-1.0f64..1.0, 2..10).prop_filter("ties", |v| {
        let mut s = v.clone();
        s.sort_by(f64::total_cmp);
        s.windows(2).all(|w| w[1] - w[0] > 1e-9)
    });
    run(cases, (distinct, tau(), tau()), |(logits, a, b)| {
        let want = argmax(&logits);
        let pa = softmax_with_temperature(&logits, a).unwrap();
        let pb = softmax_with_temperature(&logits, b).unwrap();
        check(argmax(&pa) == want && argmax(&pb) == want, || "argmax moved with temperature".into())
    })
}

pub fn cosine_scale(cases: u32) -> Result<(), String> {
    let pair = (2usize..10).prop_flat_map(|n| {
        let v = || prop::collection::vec(-10.0f64..10.0, n).prop_filter("zero", |v| v.iter().any(|x| x.abs() > 1e-3));
        (v(), v())
    });
    run(cases, (pair, 1e-3f64..1e3), |((a, b), c)| {
        let base = cosine_similarity(&a, &b).unwrap();
        let scaled: Vec<f64> = a.iter().map(|x| c * x).collect();
        let got = cosine_similarity(&scaled, &b).unwrap();
        let got2 = cosine_similarity(&b, &scaled).unwrap();
        check((got - base).abs() <= 1e-12 && (got2 - base).abs() <= 1e-12, || format!("{base} vs {got} / {got2}"))
    })
}

pub fn mcm_lower_bound(cases: u32) -> Result<(), String> {
    let input = (2usize..8, 1usize..9, any::<u64>()).prop_map(|(d, n, seed)| {
        let mut r = rng(seed);
        let image = unit(&mut r, d);
        let feats: Vec<_> = (0..n).map(|_| l2_normalize(&gaussian(&mut r, d, 1.0)).unwrap()).collect();
        (image, feats)
    });
    run(cases, (input, tau()), |((image, feats), tau)| {
        let s = mcm_score(&image, &feats, tau).unwrap();
        let n = feats.len() as f64;
        check(s.value >= 1.0 / n - 1e-12 && s.value <= 1.0 + 1e-12, || format!("score {} with {n} classes", s.value))?;
        check(s.class_set_size == feats.len(), || "class set size".into())
    })
}

fn small_instance() -> impl Strategy<Value = u64> {
    any::<u64>()
}

fn sized(seed: u64) -> Instance {
    instance(seed, 1 + seed as usize % 4, 1 + (seed as usize / 7) % 4, &[1.0, 0.1, 0.01])
}

pub fn alpha_ratio(cases: u32) -> Result<(), String> {
    run(cases, small_instance(), |seed| {
        let inst = sized(seed);
        let image = unit(&mut rng(seed ^ 1), inst.feature_dim());
        let bank = inst.bank();
        let (_, w) = predict_open(&image, &bank, &inst.universe, &inst.encoders.text, inst.tau).unwrap();
        let (fs, zs) = stage1_scores(&image, &bank, &inst.universe, inst.tau).unwrap();
        check(w.alpha > 0.0 && w.alpha < 1.0, || format!("alpha {}", w.alpha))?;
        check((w.alpha - fs.value / (fs.value + zs.value)).abs() <= 1e-12, || "alpha is not the score ratio".into())?;
        check(w.s_fs == fs && w.s_zs == zs, || "reported scores differ from stage one".into())
    })
}

pub fn fusion_convexity(cases: u32) -> Result<(), String> {
    run(cases, (small_instance(), 0.0f64..=1.0), |(seed, alpha)| {
        let inst = sized(seed);
        let bank = inst.bank();
        let fused = fuse_prompts(&bank, alpha).unwrap();
        for (id, p) in &fused {
            let fs = bank.learned()[id].embeddings.as_slice();
            let zs = bank.handcrafted()[id].embeddings.as_slice();
            for ((&x, &a), &b) in p.embeddings.as_slice().iter().zip(fs).zip(zs) {
                check((x - (alpha * a + (1.0 - alpha) * b)).abs() <= 1e-12, || "not the convex blend".into())?;
                check(x >= a.min(b) - 1e-12 && x <= a.max(b) + 1e-12, || "blend outside its endpoints".into())?;
            }
        }
        check(fuse_prompts(&bank, 1.0).unwrap() == *bank.learned(), || "alpha 1 is not the learned prompt".into())?;
        check(fuse_prompts(&bank, 0.0).unwrap() == *bank.handcrafted(), || "alpha 0 is not the hand-crafted prompt".into())?;
        let image = unit(&mut rng(seed ^ 2), inst.feature_dim());
        let text = &inst.encoders.text;
        let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-12);
        let one = predict_fixed_alpha(&image, &bank, &inst.universe, text, inst.tau, 1.0).unwrap();
        let zero = predict_fixed_alpha(&image, &bank, &inst.universe, text, inst.tau, 0.0).unwrap();
        check(close(&one, &predict_learned_only(&image, &bank, &inst.universe, inst.tau).unwrap()), || "alpha 1 posterior".into())?;
        check(close(&zero, &predict_handcrafted_only(&image, &bank, &inst.universe, inst.tau).unwrap()), || "alpha 0 posterior".into())
    })
}

fn balanced_batch(inst: &Instance, shots: usize, seed: u64) -> Vec<LabeledSample> {
    let mut r = rng(seed ^ 3);
    let dim = inst.encoders.image.sample_dim();
    inst.universe
        .base_ids()
        .iter()
        .flat_map(|&id| std::iter::repeat_n(id, shots))
        .map(|label| LabeledSample { sample: gaussian(&mut r, dim, 1.0), label })
        .collect()
}

fn train_config(inst: &Instance, shots: usize, epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig { max_epochs: epochs, shots, seed, tau: inst.tau, template: inst.template.clone(), ..TrainConfig::default() }
}

pub fn frozen_checksums(cases: u32) -> Result<(), String> {
    run(cases, small_instance(), |seed| {
        let inst = sized(seed);
        let before = (inst.encoders.checksum(), inst.vocab.checksum());
        let encoders = inst.encoders.clone();
        let batch = balanced_batch(&inst, 2, seed);
        let ctx = train_coop(&batch, &train_config(&inst, 2, 3, seed), &inst.encoders, &inst.vocab, &inst.universe).unwrap();
        check(ctx.vectors.as_slice().iter().all(|x| x.is_finite()), || "non-finite context".into())?;
        check((inst.encoders.checksum(), inst.vocab.checksum()) == before, || "training changed a frozen checksum".into())?;
        check(inst.encoders == encoders, || "training changed the encoders".into())
    })
}

pub fn identity_collapse(cases: u32) -> Result<(), String> {
    run(cases, (small_instance(), 0.0f64..=1.0), |(seed, alpha)| {
        let inst = sized(seed);
        let batch = balanced_batch(&inst, 1, seed);
        let ctx = train_coop(&batch, &train_config(&inst, 1, 0, seed), &inst.encoders, &inst.vocab, &inst.universe).unwrap();
        check(ctx == init_context(&inst.template, &inst.vocab).unwrap(), || "zero epochs moved the context".into())?;
        let bank = ttpt::fusion::PromptBank::build(&ctx, &inst.vocab, &inst.universe, &inst.encoders.text).unwrap();
        let image = unit(&mut rng(seed ^ 4), inst.feature_dim());
        let (u, text, tau) = (&inst.universe, &inst.encoders.text, inst.tau);
        let reference = predict_handcrafted_only(&image, &bank, u, tau).unwrap();
        let others = [
            predict_open(&image, &bank, u, text, tau).unwrap().0,
            predict_fixed_alpha(&image, &bank, u, text, tau, alpha).unwrap(),
            predict_classifier_combo(&image, &bank, u, tau).unwrap(),
            predict_learned_only(&image, &bank, u, tau).unwrap(),
        ];
        for p in &others {
            let gap = p.iter().zip(&reference).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            check(gap <= 1e-12, || format!("predictors differ by {gap}"))?;
        }
        Ok(())
    })
}
