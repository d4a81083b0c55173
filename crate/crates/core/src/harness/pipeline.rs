//! End-to-end drivers: generate, split, sample, train, fuse, evaluate.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::fusion::{AlphaCache, FusionModel, PromptBank, Predictor};
use crate::math::Temperature;
use crate::scoring::ClassId;
use crate::tuning::{train_coop_traced, ContextBlock, LabeledSample, LoggedSource};

use super::config::RunConfig;
use super::report::{emit_report, evaluate_open, EvalReport, RunEcho};
use super::task::{generate_synthetic_task, sample_few_shot, SyntheticTask};
use super::world::World;

/// A task, its frozen world and a trained context.
#[derive(Debug, Clone)]
pub struct Trained {
    pub task: SyntheticTask,
    pub world: World,
    pub few_shot: Vec<LabeledSample>,
    pub context: ContextBlock,
    pub losses: Vec<f64>,
    /// Labels of every sample the trainer read, in access order.
    pub training_accesses: Vec<ClassId>,
}

#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub trained: Trained,
    /// One report per requested predictor, in request order.
    pub reports: Vec<EvalReport>,
}

/// Trains on an existing task.
pub fn train_on(task: SyntheticTask, cfg: &RunConfig) -> Result<Trained> {
    cfg.validate()?;
    let world = World::build(&task, &cfg.world_config())?;
    let few_shot = sample_few_shot(&task, cfg.shots, cfg.seed)?;
    let logged = LoggedSource::new(&few_shot);
    let (context, losses) =
        train_coop_traced(&logged, &cfg.train_config(), &world.encoders, &world.vocab, &task.universe)?;
    let training_accesses = logged.accessed_labels();
    Ok(Trained { task, world, few_shot, context, losses, training_accesses })
}

pub fn train(cfg: &RunConfig) -> Result<Trained> {
    cfg.validate()?;
    train_on(generate_synthetic_task(&cfg.task_spec())?, cfg)
}

pub fn build_model(task: &SyntheticTask, world: &World, context: &ContextBlock, cfg: &RunConfig) -> Result<FusionModel> {
    let bank = PromptBank::build(context, &world.vocab, &task.universe, &world.encoders.text)?;
    let mut model = FusionModel::new(bank, task.universe.clone(), world.encoders.text.clone(), cfg.tau)?;
    model.stage1_tau = cfg.stage1_tau();
    if cfg.alpha_cache {
        model.cache = Some(AlphaCache::default());
    }
    Ok(model)
}

pub fn evaluate_predictor(
    model: &FusionModel,
    predictor: Predictor,
    task: &SyntheticTask,
    world: &World,
    cfg: &RunConfig,
) -> Result<EvalReport> {
    let echo = RunEcho {
        predictor: predictor.name(),
        seed: cfg.seed,
        shots: cfg.shots,
        epochs: cfg.epochs,
        tau: model.tau.value(),
        stage1_tau: model.stage1_tau.value(),
    };
    let classify = |x: &[f64]| {
        let feat = world.encoders.encode_image(x)?;
        model.predict(predictor, &feat)
    };
    evaluate_open(classify, &task.test_pool, &task.universe, echo)
}

/// Evaluates every requested predictor against an already trained context.
pub fn evaluate_all(task: &SyntheticTask, world: &World, context: &ContextBlock, cfg: &RunConfig) -> Result<Vec<EvalReport>> {
    let model = build_model(task, world, context, cfg)?;
    cfg.predictors
        .iter()
        .map(|&p| evaluate_predictor(&model, p, task, world, cfg))
        .collect()
}

pub fn run_pipeline(cfg: &RunConfig) -> Result<PipelineRun> {
    let trained = train(cfg)?;
    let reports = evaluate_all(&trained.task, &trained.world, &trained.context, cfg)?;
    Ok(PipelineRun { trained, reports })
}

pub fn run_pipeline_file(path: impl AsRef<Path>) -> Result<PipelineRun> {
    run_pipeline(&RunConfig::load(path)?)
}

/// Writes `report_<predictor>.txt` files into `dir`.
pub fn write_reports(reports: &[EvalReport], dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    reports
        .iter()
        .map(|r| {
            let slug = Predictor::parse(&r.echo.predictor).map_or_else(|_| r.echo.predictor.clone(), |p| p.slug());
            let path = dir.join(format!("report_{slug}.txt"));
            emit_report(r, &path)?;
            Ok(path)
        })
        .collect()
}

/// Trains once, then evaluates dynamic fusion with each stage-1
/// temperature. Reports come back sorted by temperature, ascending.
pub fn run_temperature_sweep(cfg: &RunConfig, taus: &[Temperature]) -> Result<Vec<EvalReport>> {
    if taus.is_empty() {
        return Err(Error::Config("temperature sweep needs at least one value".into()));
    }
    let trained = train(cfg)?;
    let mut taus = taus.to_vec();
    taus.sort_by(|a, b| a.value().total_cmp(&b.value()));
    let mut model = build_model(&trained.task, &trained.world, &trained.context, cfg)?;
    taus.into_iter()
        .map(|tau| {
            model.stage1_tau = tau;
            if cfg.alpha_cache {
                model.cache = Some(AlphaCache::default());
            }
            evaluate_predictor(&model, Predictor::Dynamic, &trained.task, &trained.world, cfg)
        })
        .collect()
}

/// Retrains for each shot count on one shared task. Reports come back
/// sorted by shot count.
pub fn run_shot_sweep(cfg: &RunConfig, shot_counts: &[usize]) -> Result<Vec<EvalReport>> {
    if shot_counts.is_empty() || shot_counts.contains(&0) {
        return Err(Error::Config("shot sweep needs one or more counts, each at least 1".into()));
    }
    cfg.validate()?;
    let task = generate_synthetic_task(&cfg.task_spec())?;
    let mut counts = shot_counts.to_vec();
    counts.sort_unstable();
    counts
        .into_iter()
        .map(|shots| {
            let entry = RunConfig { shots, ..cfg.clone() };
            let trained = train_on(task.clone(), &entry)?;
            let model = build_model(&trained.task, &trained.world, &trained.context, &entry)?;
            evaluate_predictor(&model, Predictor::Dynamic, &trained.task, &trained.world, &entry)
        })
        .collect()
}
