//! Straightforward re-derivations used as oracles. Nothing here calls the
//! library's numeric code; only plain data is read from its types.

#![allow(clippy::needless_range_loop)]

use ttpt::encoder::{tokenize, TextEncoderParams, Vocabulary};
use ttpt::scoring::{ClassId, ClassUniverse};
use ttpt::tuning::ContextBlock;

pub type Rows = Vec<Vec<f64>>;

fn row(vocab: &Vocabulary, token: &str) -> Vec<f64> {
    vocab.lookup(token).expect("fixture tokens are registered").to_vec()
}

/// Hand-crafted prompt: every template token, classname tokens in place of
/// the placeholder.
pub fn handcrafted_rows(template: &str, classname: &str, vocab: &Vocabulary) -> Rows {
    let mut out = Vec::new();
    for tok in template.split_whitespace() {
        if tok == "[CLASS]" {
            out.extend(tokenize(classname).iter().map(|t| row(vocab, t)));
        } else {
            out.push(row(vocab, tok));
        }
    }
    out
}

/// Learned prompt: context vectors with the classname spliced in where the
/// template's placeholder was.
pub fn learned_rows(context: &ContextBlock, classname: &str, vocab: &Vocabulary) -> Rows {
    let before = context.origin_template.split_whitespace().take_while(|t| *t != "[CLASS]").count();
    let ctx: Rows = (0..context.vectors.rows()).map(|r| context.vectors.row(r).to_vec()).collect();
    let mut out = ctx[..before].to_vec();
    out.extend(tokenize(classname).iter().map(|t| row(vocab, t)));
    out.extend(ctx[before..].iter().cloned());
    out
}

/// Mix, mean-pool, project, normalize; written out index by index.
pub fn encode(rows: &Rows, params: &TextEncoderParams) -> Vec<f64> {
    let l = rows.len();
    let e = rows[0].len();
    let d = params.projection.cols();
    let mut mixed = vec![vec![0.0; e]; l];
    for i in 0..l {
        for j in 0..l {
            for k in 0..e {
                mixed[i][k] += params.positional_mix.get(i, j) * rows[j][k];
            }
        }
    }
    let mut z = vec![0.0; d];
    for c in 0..d {
        for k in 0..e {
            let pooled: f64 = mixed.iter().map(|m| m[k]).sum::<f64>() / l as f64;
            z[c] += pooled * params.projection.get(k, c);
        }
    }
    let n = z.iter().map(|x| x * x).sum::<f64>().sqrt();
    z.iter().map(|x| x / n).collect()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let ab: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let aa: f64 = a.iter().map(|x| x * x).sum();
    let bb: f64 = b.iter().map(|x| x * x).sum();
    ab / (aa.sqrt() * bb.sqrt())
}

/// Textbook softmax without max subtraction; fine for |logit / tau| ≤ 100.
pub fn softmax(logits: &[f64], tau: f64) -> Vec<f64> {
    let e: Vec<f64> = logits.iter().map(|x| (x / tau).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

pub fn posterior(image: &[f64], feats: &[Vec<f64>], tau: f64) -> Vec<f64> {
    softmax(&feats.iter().map(|t| cosine(image, t)).collect::<Vec<_>>(), tau)
}

pub fn max(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::MIN, f64::max)
}

pub struct NaiveOpen {
    pub posterior: Vec<f64>,
    pub alpha: f64,
    pub s_fs: f64,
    pub s_zs: f64,
}

/// MCM over learned base prompts and hand-crafted new prompts, α from their
/// ratio, then one posterior over every class with α-blended prompts.
pub fn predict_open(
    image: &[f64],
    context: &ContextBlock,
    vocab: &Vocabulary,
    universe: &ClassUniverse,
    params: &TextEncoderParams,
    tau: f64,
) -> NaiveOpen {
    let name = |id: &ClassId| universe.classnames()[id].clone();
    let learned = |id: &ClassId| learned_rows(context, &name(id), vocab);
    let hand = |id: &ClassId| handcrafted_rows(&context.origin_template, &name(id), vocab);

    let base_feats: Vec<Vec<f64>> = universe.base_ids().iter().map(|id| encode(&learned(id), params)).collect();
    let new_feats: Vec<Vec<f64>> = universe.new_ids().iter().map(|id| encode(&hand(id), params)).collect();
    let s_fs = max(&posterior(image, &base_feats, tau));
    let s_zs = max(&posterior(image, &new_feats, tau));
    let alpha = s_fs / (s_fs + s_zs);

    let mut ids: Vec<ClassId> = universe.classnames().keys().copied().collect();
    ids.sort();
    let fused: Vec<Vec<f64>> = ids
        .iter()
        .map(|id| {
            let (l, h) = (learned(id), hand(id));
            let rows: Rows = l
                .iter()
                .zip(&h)
                .map(|(a, b)| a.iter().zip(b).map(|(x, y)| alpha * x + (1.0 - alpha) * y).collect())
                .collect();
            encode(&rows, params)
        })
        .collect();
    NaiveOpen { posterior: posterior(image, &fused, tau), alpha, s_fs, s_zs }
}
