//! Toy training on synthetic scenes and held-out evaluation.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::losses::{class_frequencies, class_weights, total_loss, LossValues};
use crate::metrics::{random_baseline_miou, ConfusionMatrix, Metrics};
use crate::model::{prepare, Prepared, SscModel};
use crate::param::{AdamConfig, ParamStore};
use crate::scene::{synthesize, VoxelGrid};

/// Seed of the `i`-th training scene.
pub fn train_scene_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_add(i as u64)
}

/// Seed of the `i`-th held-out scene; disjoint from the training seeds for
/// any realistic scene count.
pub fn eval_scene_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_add(1_000_000 + i as u64)
}

pub fn build_scenes(cfg: &PipelineConfig, seeds: impl IntoIterator<Item = u64>) -> Result<Vec<Prepared>> {
    let synth = cfg.synth_config()?;
    seeds
        .into_iter()
        .map(|s| prepare(cfg, synthesize(s, &synth)?))
        .collect()
}

/// Freshly initialised model and parameters for `cfg`.
pub fn init_model(cfg: &PipelineConfig) -> Result<(SscModel, ParamStore)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(7);
    let mut store = ParamStore::new();
    let model = SscModel::new(&mut store, *cfg, &mut rng)?;
    Ok((model, store))
}

pub fn scene_class_weights(cfg: &PipelineConfig, scenes: &[Prepared]) -> Vec<f64> {
    let grids: Vec<&VoxelGrid> = scenes.iter().map(|p| &p.sample.grid).collect();
    class_weights(&class_frequencies(&grids, cfg.num_classes))
}

/// Loss components of one scene without touching gradients.
pub fn scene_loss(model: &SscModel, store: &ParamStore, scene: &Prepared, weights: &[f64]) -> Result<LossValues> {
    let mut g = Graph::new();
    let out = model.forward(&mut g, store, scene)?;
    let comps = model.losses(&mut g, &out, scene, weights)?;
    Ok(LossValues::read(&g, &comps))
}

pub fn mean_total_loss(model: &SscModel, store: &ParamStore, scenes: &[Prepared], weights: &[f64]) -> Result<f64> {
    let mut sum = 0.0;
    for s in scenes {
        sum += scene_loss(model, store, s, weights)?.total(&model.cfg.loss);
    }
    Ok(sum / scenes.len() as f64)
}

/// Pooled confusion-matrix metrics of `model` over `scenes`.
pub fn evaluate_scenes(model: &SscModel, store: &ParamStore, scenes: &[Prepared]) -> Result<Metrics> {
    let mut cm = ConfusionMatrix::new(model.cfg.num_classes);
    for s in scenes {
        let mut g = Graph::new();
        let out = model.forward(&mut g, store, s)?;
        let pred = model.predict(&g, &out, s)?;
        cm.accumulate(&pred, &s.sample.grid)?;
    }
    Ok(cm.metrics())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub scene: usize,
    pub losses: LossValues,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: SscModel,
    /// Final parameters, or the last finite ones after a divergence.
    pub store: ParamStore,
    pub log: Vec<StepLog>,
    pub class_weights: Vec<f64>,
    /// Mean total loss over the training scenes before the first update.
    pub initial_loss: f64,
    /// Mean total loss over the training scenes after the last update.
    pub final_loss: f64,
    /// Held-out metrics; `None` when the parameters no longer give finite
    /// outputs after a divergence.
    pub eval: Option<Metrics>,
    pub random_miou: f64,
    pub diverged: Option<String>,
}

/// Runs Adam on the total loss, one training scene per step in turn.
pub fn train(
    cfg: &PipelineConfig,
    train_scenes: &[Prepared],
    eval_scenes: &[Prepared],
    mut on_step: impl FnMut(&StepLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_scenes.is_empty() || eval_scenes.is_empty() {
        return Err(crate::error::config_err("training needs at least one training and one held-out scene"));
    }
    let (model, mut store) = init_model(cfg)?;
    let weights = scene_class_weights(cfg, train_scenes);
    let initial_loss = mean_total_loss(&model, &store, train_scenes, &weights)?;
    let adam = AdamConfig::with_lr(cfg.learning_rate);
    let mut log = Vec::with_capacity(cfg.steps);
    let mut diverged = None;

    for step in 0..cfg.steps {
        let idx = step % train_scenes.len();
        let scene = &train_scenes[idx];
        let last_good = store.clone();
        let attempt = (|| -> Result<StepLog> {
            let mut g = Graph::new();
            let out = model.forward(&mut g, &store, scene)?;
            let comps = model.losses(&mut g, &out, scene, &weights)?;
            let loss = total_loss(&mut g, &comps, &cfg.loss)?;
            let total = g.value(loss).item();
            if !total.is_finite() {
                return Err(Error::NonFinite(format!("total loss at step {step}")));
            }
            let grads = g.backward(loss)?;
            store.zero_grad();
            grads.accumulate_into(&mut store);
            store.adam_step(&adam)?;
            Ok(StepLog {
                step,
                scene: idx,
                losses: LossValues::read(&g, &comps),
                total,
            })
        })();
        match attempt {
            Ok(entry) => {
                on_step(&entry);
                log.push(entry);
            }
            Err(Error::NonFinite(what)) => {
                store = last_good;
                diverged = Some(format!("step {step}: non-finite {what}"));
                break;
            }
            Err(e) => return Err(e),
        }
    }

    let final_loss = if diverged.is_none() {
        mean_total_loss(&model, &store, train_scenes, &weights)?
    } else {
        f64::NAN
    };
    let eval = match evaluate_scenes(&model, &store, eval_scenes) {
        Ok(m) => Some(m),
        Err(Error::NonFinite(_)) if diverged.is_some() => None,
        Err(e) => return Err(e),
    };
    let gts: Vec<&VoxelGrid> = eval_scenes.iter().map(|p| &p.sample.grid).collect();
    let random_miou = random_baseline_miou(&gts, cfg.num_classes);
    Ok(TrainOutcome {
        model,
        store,
        log,
        class_weights: weights,
        initial_loss,
        final_loss,
        eval,
        random_miou,
        diverged,
    })
}

/// Generates the configured training and held-out scenes and trains on them.
pub fn train_toy(cfg: &PipelineConfig, on_step: impl FnMut(&StepLog)) -> Result<TrainOutcome> {
    let train_set = build_scenes(cfg, (0..cfg.train_scenes).map(|i| train_scene_seed(cfg.seed, i)))?;
    let eval_set = build_scenes(cfg, (0..cfg.eval_scenes).map(|i| eval_scene_seed(cfg.seed, i)))?;
    train(cfg, &train_set, &eval_set, on_step)
}
