//! Momentum gradient descent over synthetic scenes, plus dataset-level
//! evaluation.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::Scene;
use crate::error::{Error, Result};
use crate::grouping_head::GroupingConfig;
use crate::metrics::{evaluate, EvalReport, SceneCounts};
use crate::model::{predict, prepare, scene_loss, ModelConfig, PreparedScene};
use crate::numerics::{Graph, ParamStore, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub steps: usize,
    pub batch_size: usize,
    /// Gradient norm cap per stage; 0 disables clipping.
    pub clip_norm: f64,
    /// Linear ramp from `lr / warmup_steps` up to `lr`.
    pub warmup_steps: usize,
    pub schedule: Schedule,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    /// Half-cosine decay from `lr` at step 0 to 0 at the last step.
    #[default]
    Cosine,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            momentum: 0.9,
            steps: 500,
            batch_size: 4,
            clip_norm: 1.0,
            warmup_steps: 100,
            schedule: Schedule::Cosine,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.clip_norm >= 0.0) {
            return Err(Error::Config(format!(
                "clip_norm must be non-negative, got {}",
                self.clip_norm
            )));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let mut lr = match self.schedule {
            Schedule::Constant => self.lr,
            Schedule::Cosine => {
                let progress = step as f64 / self.steps.max(1) as f64;
                0.5 * self.lr * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        };
        if step < self.warmup_steps {
            lr *= (step + 1) as f64 / self.warmup_steps as f64;
        }
        lr
    }
}

/// Everything a training or evaluation run needs besides the data.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }
}

/// Batch-mean losses before the update at `step`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub mask: f64,
    pub group: f64,
}

pub fn loss_csv(log: &[StepRecord]) -> String {
    let mut out = String::from("step,loss,mask,group\n");
    for r in log {
        writeln!(out, "{},{},{},{}", r.step, r.loss, r.mask, r.group).expect("write to string");
    }
    out
}

struct SceneGrad {
    loss: f64,
    mask: f64,
    group: f64,
    grads: ParamStore,
}

fn scene_grad(params: &ParamStore, cfg: &ModelConfig, prep: &PreparedScene) -> Result<SceneGrad> {
    let mut g = Graph::new();
    let loss = scene_loss(&mut g, params, cfg, prep)?;
    let value = |v| g.value(v).item();
    let mut mask = 0.0;
    let mut group = 0.0;
    for stage in [loss.first, loss.second].into_iter().flatten() {
        mask += value(stage.mask);
        group += value(stage.group);
    }
    let total = value(loss.total);
    let mut grads = params.clone();
    grads.zero_grads();
    if total.is_finite() {
        let back = g.backward(loss.total)?;
        g.accumulate_param_grads(&back, &mut grads)?;
    }
    Ok(SceneGrad {
        loss: total,
        mask,
        group,
        grads,
    })
}

fn thread_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start {workers} workers: {e}")))
}

/// Cycles through shuffled epochs of scene indices.
struct BatchSampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
}

impl BatchSampler {
    fn new(n: usize, seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: (0..n).collect(),
            pos: n,
        }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.order.shuffle(&mut self.rng);
                    self.pos = 0;
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

/// Trains from `params` on `scenes` and returns the final parameters with
/// one log record per step. Scene gradients run on `workers` threads and are
/// summed in batch order, so results do not depend on the thread count.
pub fn train(
    scenes: &[&Scene],
    cfg: &RunConfig,
    mut params: ParamStore,
    workers: usize,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<(ParamStore, Vec<StepRecord>)> {
    cfg.validate()?;
    let tc = &cfg.train;
    if scenes.is_empty() && tc.steps > 0 {
        return Err(Error::InvalidArgument("no training scenes".into()));
    }
    let pool = thread_pool(workers)?;
    let prepared: Vec<PreparedScene> = pool.install(|| {
        scenes
            .par_iter()
            .map(|s| prepare(s, &cfg.model))
            .collect::<Result<_>>()
    })?;
    let mut velocity: BTreeMap<String, Tensor> = params
        .iter()
        .map(|(k, v)| (k.to_owned(), Tensor::zeros(v.dims())))
        .collect();
    let mut sampler = BatchSampler::new(prepared.len(), tc.seed);
    let mut log = Vec::with_capacity(tc.steps);
    for step in 0..tc.steps {
        let batch = sampler.next_batch(tc.batch_size);
        let results: Vec<SceneGrad> = pool.install(|| {
            batch
                .par_iter()
                .map(|&i| scene_grad(&params, &cfg.model, &prepared[i]))
                .collect::<Result<_>>()
        })?;
        params.zero_grads();
        let inv = 1.0 / batch.len() as f64;
        let mut rec = StepRecord {
            step,
            loss: 0.0,
            mask: 0.0,
            group: 0.0,
        };
        for (&i, r) in batch.iter().zip(&results) {
            if !r.loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "step {step}: loss on scene {} is {}",
                    prepared[i].scene.id, r.loss
                )));
            }
            rec.loss += r.loss * inv;
            rec.mask += r.mask * inv;
            rec.group += r.group * inv;
            for (name, grad) in r.grads.grads() {
                params.accumulate_grad(name, grad)?;
            }
        }
        params.scale_grads(inv);
        for prefixes in cfg.model.stage_prefixes() {
            let in_stage = |name: &str| {
                name.split_once('.')
                    .is_some_and(|(p, _)| prefixes.contains(&p))
            };
            let norm = params.grad_norm_where(in_stage);
            if !norm.is_finite() {
                return Err(Error::NonFinite(format!(
                    "step {step}: gradient norm is {norm}"
                )));
            }
            if tc.clip_norm > 0.0 && norm > tc.clip_norm {
                params.scale_grads_where(in_stage, tc.clip_norm / norm);
            }
        }
        let lr = tc.lr_at(step);
        for (name, value, grad) in params.params_and_grads_mut() {
            let v = velocity.get_mut(name).expect("velocity per param");
            for ((v, p), g) in v
                .data_mut()
                .iter_mut()
                .zip(value.data_mut())
                .zip(grad.data())
            {
                *v = tc.momentum * *v + g;
                *p -= lr * *v;
            }
        }
        on_step(&rec);
        log.push(rec);
    }
    params.zero_grads();
    Ok((params, log))
}

/// Micro-averaged metrics over `scenes`, at the model's instance level.
pub fn evaluate_scenes(
    scenes: &[&Scene],
    params: &ParamStore,
    model: &ModelConfig,
    grouping: &GroupingConfig,
    workers: usize,
) -> Result<EvalReport> {
    let pool = thread_pool(workers)?;
    let counts: Vec<SceneCounts> = pool.install(|| {
        scenes
            .par_iter()
            .map(|s| {
                let prep = prepare(s, model)?;
                let out = predict(params, model, &prep, grouping)?;
                evaluate(&out.prediction, &s.annotation, model.instance_level())
            })
            .collect::<Result<_>>()
    })?;
    let mut total = SceneCounts::default();
    for c in &counts {
        total.merge(c);
    }
    Ok(total.report())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{in_memory_dataset, Split, SynthConfig};
    use crate::model::Mode;

    fn tiny() -> (crate::dataio::Dataset, RunConfig) {
        let data = SynthConfig {
            train_scenes: 4,
            eval_scenes: 2,
            paragraphs: 2,
            lines_per_paragraph: 2,
            words_per_line: 2,
            image_height: 64,
            image_width: 64,
            paragraph_margin: 4,
            channels: 8,
            ..SynthConfig::default()
        };
        let mut cfg = RunConfig::default();
        cfg.model.dim = 8;
        cfg.model.layers = 1;
        cfg.model.hidden = 16;
        cfg.train.steps = 6;
        cfg.train.batch_size = 2;
        (in_memory_dataset(&data).unwrap(), cfg)
    }

    #[test]
    fn sampler_covers_each_epoch() {
        let mut s = BatchSampler::new(5, 3);
        let mut first: Vec<usize> = s.next_batch(5);
        first.sort();
        assert_eq!(first, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn zero_steps_returns_initialization() {
        let (data, mut cfg) = tiny();
        cfg.train.steps = 0;
        let init = cfg.model.init_params(8, 1).unwrap();
        let scenes: Vec<&Scene> = data.split(Split::Train).collect();
        let (out, log) = train(&scenes, &cfg, init.clone(), 1, |_| {}).unwrap();
        assert!(log.is_empty());
        assert_eq!(out, init);
    }

    #[test]
    fn deterministic_across_worker_counts() {
        let (data, cfg) = tiny();
        let scenes: Vec<&Scene> = data.split(Split::Train).collect();
        let init = cfg.model.init_params(8, 1).unwrap();
        let (a, la) = train(&scenes, &cfg, init.clone(), 1, |_| {}).unwrap();
        let (b, lb) = train(&scenes, &cfg, init, 3, |_| {}).unwrap();
        assert_eq!(loss_csv(&la), loss_csv(&lb));
        assert_eq!(a, b);
        assert!(la
            .iter()
            .all(|r| r.loss >= 0.0 && r.mask >= 0.0 && r.group >= 0.0));
    }

    #[test]
    fn cascade_trains_and_evaluates() {
        let (data, mut cfg) = tiny();
        cfg.model.mode = Mode::Cascade;
        let scenes: Vec<&Scene> = data.split(Split::Train).collect();
        let init = cfg.model.init_params(8, 2).unwrap();
        let (params, log) = train(&scenes, &cfg, init, 2, |_| {}).unwrap();
        assert_eq!(log.len(), 6);
        let eval: Vec<&Scene> = data.split(Split::Eval).collect();
        let report =
            evaluate_scenes(&eval, &params, &cfg.model, &GroupingConfig::default(), 2).unwrap();
        assert!((0.0..=1.0).contains(&report.paragraph.pq));
    }

    #[test]
    fn nan_loss_names_the_step() {
        let (data, mut cfg) = tiny();
        cfg.train.steps = 1;
        let scenes: Vec<&Scene> = data.split(Split::Train).collect();
        let mut init = cfg.model.init_params(8, 1).unwrap();
        init.insert("sa.l0.wq", Tensor::full(&[8, 8], f64::NAN));
        let err = train(&scenes, &cfg, init, 1, |_| {}).unwrap_err();
        assert!(
            matches!(&err, Error::NonFinite(m) if m.starts_with("step 0")),
            "{err}"
        );
    }

    #[test]
    fn schedule_shape() {
        let tc = TrainConfig {
            lr: 1.0,
            steps: 100,
            warmup_steps: 10,
            ..TrainConfig::default()
        };
        assert!((tc.lr_at(0) - 0.1).abs() < 1e-3);
        assert!(tc.lr_at(9) > tc.lr_at(5));
        assert!(tc.lr_at(50) < tc.lr_at(20));
        assert!(tc.lr_at(99) < 1e-3);
        let flat = TrainConfig {
            schedule: Schedule::Constant,
            warmup_steps: 0,
            ..tc
        };
        assert_eq!(flat.lr_at(77), 1.0);
    }

    #[test]
    fn csv_layout() {
        let log = [StepRecord {
            step: 0,
            loss: 1.5,
            mask: 1.0,
            group: 0.5,
        }];
        assert_eq!(loss_csv(&log), "step,loss,mask,group\n0,1.5,1,0.5\n");
    }
}
