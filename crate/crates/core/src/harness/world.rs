//! The frozen "pretrained" dual encoder for a synthetic task.
//!
//! The image encoder stands in for contrastive pretraining: it is a fixed
//! linear map chosen so that each class prototype lands near the text
//! feature of that class's hand-crafted prompt, up to a seeded per-class
//! misalignment and a shared modality offset.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::archive::Archive;
use crate::encoder::{build_handcrafted_prompt, tokenize, Encoders, ImageEncoderParams, TemplateSkeleton, TextEncoderParams, Vocabulary};
use crate::error::{Error, Result};
use crate::linalg::{dot, norm, solve, Matrix};
use crate::math::{l2_normalize, FeatureVector};
use crate::seed;
use crate::tuning::DEFAULT_TEMPLATE;

use super::task::SyntheticTask;

const RIDGE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct WorldConfig {
    pub embed_width: usize,
    pub feature_dim: usize,
    pub template: String,
    pub seed: u64,
    /// Norm of the per-class offset between image and text targets.
    pub misalignment: f64,
    /// Norm of the offset shared by every image target.
    pub modality_gap: f64,
    /// Norm of an extra offset shared by the base-class image targets only.
    pub base_shift: f64,
    /// Weight of a direction common to every class's text feature, which
    /// packs the classes into a cap as template-dominated text features do.
    pub text_common: f64,
    /// Norm of the hand-crafted text features before normalization, relative
    /// to what random classname embeddings would give.
    pub text_scale: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            embed_width: 16,
            feature_dim: 8,
            template: DEFAULT_TEMPLATE.to_string(),
            seed: 7,
            misalignment: 0.0,
            modality_gap: 0.0,
            base_shift: 0.75,
            text_common: 0.0,
            text_scale: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub vocab: Vocabulary,
    pub encoders: Encoders,
    pub template: String,
}

fn random_unit(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = norm(&v);
        if n > 0.0 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Gram-Schmidt; vectors already in the span of earlier ones are skipped.
fn orthonormalize<'a>(vectors: impl IntoIterator<Item = &'a [f64]>) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for v in vectors {
        let mut u = v.to_vec();
        for b in &basis {
            let c = dot(&u, b);
            u.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
        }
        let n = norm(&u);
        if n > 1e-9 * norm(v).max(1e-300) {
            basis.push(u.into_iter().map(|x| x / n).collect());
        }
    }
    basis
}

impl World {
    pub fn build(task: &SyntheticTask, cfg: &WorldConfig) -> Result<Self> {
        let skeleton = TemplateSkeleton::parse(&cfg.template)?;
        let classnames = task.classnames();
        let vocab = Vocabulary::build(&classnames, std::slice::from_ref(&cfg.template), cfg.embed_width, seed::derive(cfg.seed, "world:vocab"))?;
        let ids: Vec<_> = task.universe.all_ids().collect();
        let prompts = ids
            .iter()
            .map(|&id| build_handcrafted_prompt(&cfg.template, task.universe.classname(id)?, &vocab))
            .collect::<Result<Vec<_>>>()?;
        let len = prompts[0].len();
        if prompts.iter().any(|p| p.len() != len || p.class_slot.len() != 1) {
            return Err(Error::Config("every classname must be a single token".into()));
        }
        debug_assert_eq!(len, skeleton.context_len() + 1);
        let text = TextEncoderParams::generate(len, cfg.embed_width, cfg.feature_dim, seed::derive(cfg.seed, "world:text"))?;

        // Text features that reproduce the prototype geometry: an isometry
        // from the prototype span into feature space.
        let protos: Vec<&[f64]> = task.prototypes.values().map(Vec::as_slice).collect();
        let span = orthonormalize(protos.iter().copied());
        if span.len() > cfg.feature_dim || cfg.feature_dim > cfg.embed_width {
            return Err(Error::Config(format!(
                "need classes' span ({}) <= feature_dim ({}) <= embed_width ({})",
                span.len(),
                cfg.feature_dim,
                cfg.embed_width
            )));
        }
        let mut rng = seed::rng(cfg.seed, "world:alignment");
        let draws: Vec<Vec<f64>> = (0..span.len()).map(|_| random_unit(&mut rng, cfg.feature_dim)).collect();
        let frame = orthonormalize(draws.iter().map(Vec::as_slice));
        if frame.len() != span.len() {
            return Err(Error::DegenerateInput("random frame is rank deficient".into()));
        }
        let common = random_unit(&mut rng, cfg.feature_dim);
        let text_targets: Vec<FeatureVector> = protos
            .iter()
            .map(|p| {
                let mut t: Vec<f64> = common.iter().map(|c| cfg.text_common * c).collect();
                for (b, f) in span.iter().zip(&frame) {
                    let c = dot(p, b);
                    t.iter_mut().zip(f).for_each(|(x, y)| *x += c * y);
                }
                l2_normalize(&t)
            })
            .collect::<Result<_>>()?;

        // The encoder is linear before normalization, so each classname
        // embedding can be solved for directly.
        let pooling: Vec<f64> = (0..len)
            .map(|j| (0..len).map(|i| text.positional_mix.get(i, j)).sum::<f64>() / len as f64)
            .collect();
        let slot = prompts[0].class_slot.start;
        if pooling[slot].abs() < 1e-9 {
            return Err(Error::DegenerateInput("class slot has no weight in the text encoder".into()));
        }
        let mut pooled_common = vec![0.0; cfg.embed_width];
        for (j, w) in pooling.iter().enumerate().filter(|&(j, _)| j != slot) {
            pooled_common.iter_mut().zip(prompts[0].embeddings.row(j)).for_each(|(p, x)| *p += w * x);
        }
        let z_common = text.projection.tr_mul_vec(&pooled_common);
        let scale = cfg.text_scale * prompts.iter().map(|p| norm(&text.pre_norm(p))).sum::<f64>() / prompts.len() as f64;
        let p = &text.projection;
        let mut ptp = Matrix::zeros(cfg.feature_dim, cfg.feature_dim);
        for a in 0..cfg.feature_dim {
            for b in 0..cfg.feature_dim {
                ptp.set(a, b, (0..cfg.embed_width).map(|e| p.get(e, a) * p.get(e, b)).sum());
            }
        }
        let mut table = vocab.table().clone();
        for (&id, t) in ids.iter().zip(&text_targets) {
            let y: Vec<f64> = t.iter().zip(&z_common).map(|(t, c)| scale * t - c).collect();
            let row = p.mul_vec(&solve(&ptp, &y)?);
            let name = &tokenize(task.universe.classname(id)?)[0];
            let token = vocab
                .tokens()
                .iter()
                .position(|tok| tok == name)
                .ok_or_else(|| Error::Config(format!("classname {name:?} missing from vocabulary")))?;
            table.row_mut(token).iter_mut().zip(&row).for_each(|(e, r)| *e = r / pooling[slot]);
        }
        let vocab = Vocabulary::from_parts(vocab.tokens().to_vec(), table, vocab.seed())?;

        // Image targets: the text targets plus the configured offsets.
        let gap = random_unit(&mut rng, cfg.feature_dim);
        let shift = random_unit(&mut rng, cfg.feature_dim);
        let mut targets = Vec::with_capacity(ids.len());
        for (&id, t) in ids.iter().zip(&text_targets) {
            let offset = random_unit(&mut rng, cfg.feature_dim);
            let s = if task.universe.is_base(id) { cfg.base_shift } else { 0.0 };
            let target: Vec<f64> = (0..cfg.feature_dim)
                .map(|i| t[i] + cfg.misalignment * offset[i] + cfg.modality_gap * gap[i] + s * shift[i])
                .collect();
            targets.push(l2_normalize(&target)?);
        }

        // Least squares W = T (PᵀP + λI)⁻¹ Pᵀ over the prototypes, so
        // W·proto_k ≈ target_k; noise outside their span is dropped.
        let n = protos.len();
        let mut gram = Matrix::zeros(n, n);
        for a in 0..n {
            for b in 0..n {
                gram.set(a, b, dot(protos[a], protos[b]) + if a == b { RIDGE } else { 0.0 });
            }
        }
        let mut weights = Matrix::zeros(cfg.feature_dim, task.dim());
        for i in 0..cfg.feature_dim {
            let rhs: Vec<f64> = targets.iter().map(|t| t[i]).collect();
            let coef = solve(&gram, &rhs)?;
            for (c, p) in coef.iter().zip(&protos) {
                for (w, x) in weights.row_mut(i).iter_mut().zip(p.iter()) {
                    *w += c * x;
                }
            }
        }
        let image = ImageEncoderParams { weights, seed: seed::derive(cfg.seed, "world:image") };
        Ok(Self { vocab, encoders: Encoders::new(text, image)?, template: cfg.template.clone() })
    }

    pub fn checksum(&self) -> u64 {
        self.vocab.checksum() ^ self.encoders.checksum().rotate_left(7)
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let mut a = Archive::new();
        a.push_matrix("vocab.table", self.vocab.table())?;
        a.push_text("meta.vocab.tokens", &self.vocab.tokens().join("\n"))?;
        a.push_matrix("text.positional_mix", &self.encoders.text.positional_mix)?;
        a.push_matrix("text.projection", &self.encoders.text.projection)?;
        a.push_matrix("image.weights", &self.encoders.image.weights)?;
        Ok(a)
    }
}
