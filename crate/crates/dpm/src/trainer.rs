//! Two-step alternating optimization: every iteration updates encoder +
//! prototypes with the mask generator frozen, then re-runs the same batch
//! and updates only the mask generator. Plain SGD with momentum, weight
//! decay, and cosine learning-rate decay.

use std::collections::HashMap;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DataSample, Dataset, Split};
use crate::encoder::Binding;
use crate::error::DpmError;
use crate::graph::Graph;
use crate::model::{self, ModelConfig, Sample};
use crate::tensor::{FreezeGroup, ParamStore};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: usize,
    /// Identities per batch.
    pub batch_p: usize,
    /// Instances per identity.
    pub batch_k: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Checkpoint every this many iterations; 0 = final only.
    pub checkpoint_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 1000,
            batch_p: 4,
            batch_k: 16,
            base_lr: 0.008,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
            checkpoint_interval: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), DpmError> {
        if self.batch_p < 2 || self.batch_k < 2 {
            return Err(DpmError::invalid(
                "batch",
                format!("P={} K={}; triplet mining needs P >= 2 and K >= 2", self.batch_p, self.batch_k),
            ));
        }
        if self.base_lr <= 0.0 {
            return Err(DpmError::invalid("base_lr", format!("{} <= 0", self.base_lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(DpmError::invalid("momentum", format!("{} not in [0,1)", self.momentum)));
        }
        if self.weight_decay < 0.0 {
            return Err(DpmError::invalid("weight_decay", format!("{} < 0", self.weight_decay)));
        }
        Ok(())
    }
}

/// Which parameter groups each of the two per-iteration steps updates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FreezePlan {
    pub step1: Vec<FreezeGroup>,
    pub step2: Vec<FreezeGroup>,
}

impl Default for FreezePlan {
    fn default() -> Self {
        FreezePlan {
            step1: vec![FreezeGroup::Encoder, FreezeGroup::Prototype],
            step2: vec![FreezeGroup::Hmg],
        }
    }
}

impl FreezePlan {
    /// The two steps must be disjoint and jointly cover all groups.
    pub fn validate(&self) -> Result<(), DpmError> {
        for g in FreezeGroup::ALL {
            let in1 = self.step1.contains(&g);
            let in2 = self.step2.contains(&g);
            if in1 && in2 {
                return Err(DpmError::invalid(
                    "freeze_plan",
                    format!("{} appears in both steps", g.name()),
                ));
            }
            if !in1 && !in2 {
                return Err(DpmError::invalid(
                    "freeze_plan",
                    format!("{} is never trained", g.name()),
                ));
            }
        }
        Ok(())
    }
}

/// Cosine decay: base * 0.5 * (1 + cos(pi * iter / total)).
pub fn lr_schedule(iter: usize, total: usize, base: f64) -> f64 {
    if total == 0 {
        return base;
    }
    base * 0.5 * (1.0 + (std::f64::consts::PI * iter as f64 / total as f64).cos())
}

/// P*K batch: P distinct identities, K instances each, sampled with
/// replacement when an identity has fewer than K images.
pub fn sample_batch<'d>(
    train: &[&'d DataSample],
    p: usize,
    k: usize,
    rng: &mut impl Rng,
) -> Result<Vec<&'d DataSample>, DpmError> {
    let mut by_id: HashMap<usize, Vec<&DataSample>> = HashMap::new();
    for s in train {
        by_id.entry(s.id).or_default().push(s);
    }
    if by_id.len() < p {
        return Err(DpmError::invalid(
            "batch_p",
            format!("need {p} identities, dataset has {}", by_id.len()),
        ));
    }
    let mut ids: Vec<usize> = by_id.keys().copied().collect();
    ids.sort_unstable();
    ids.partial_shuffle(rng, p);
    let mut batch = Vec::with_capacity(p * k);
    for &id in ids.iter().take(p) {
        let pool = &by_id[&id];
        if pool.len() >= k {
            let mut idx: Vec<usize> = (0..pool.len()).collect();
            idx.partial_shuffle(rng, k);
            batch.extend(idx.iter().take(k).map(|&i| pool[i]));
        } else {
            batch.extend((0..k).map(|_| pool[rng.gen_range(0..pool.len())]));
        }
    }
    Ok(batch)
}

/// Loss components of one optimization step.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct StepLosses {
    pub cls: f64,
    pub masked_cls: f64,
    pub hem: f64,
    pub triplet: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct IterMetrics {
    pub iter: usize,
    pub lr: f64,
    pub step1: StepLosses,
    pub step2: StepLosses,
}

/// CSV header matching `metrics_row`.
pub const METRICS_HEADER: &str = "iter,step,L_cls,L_Mcls,L_hem,L_tri,total,lr";

pub fn metrics_rows(m: &IterMetrics) -> [String; 2] {
    let row = |step: usize, l: &StepLosses| {
        format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            m.iter, step, l.cls, l.masked_cls, l.hem, l.triplet, l.total, m.lr
        )
    };
    [row(1, &m.step1), row(2, &m.step2)]
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: ModelConfig,
    pub plan: FreezePlan,
    pub store: ParamStore<f32>,
    velocity: HashMap<String, Vec<f32>>,
    rng: ChaCha8Rng,
}

impl Trainer {
    /// Fresh trainer with newly initialized parameters.
    pub fn new(cfg: TrainConfig, model_cfg: ModelConfig) -> Result<Self, DpmError> {
        cfg.validate()?;
        model_cfg.validate()?;
        let plan = FreezePlan::default();
        plan.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        model::init_params(&model_cfg, &mut rng, &mut store)?;
        Ok(Trainer { cfg, model: model_cfg, plan, store, velocity: HashMap::new(), rng })
    }

    /// Resume from existing parameters (e.g., a loaded checkpoint).
    pub fn with_store(
        cfg: TrainConfig,
        model_cfg: ModelConfig,
        store: ParamStore<f32>,
    ) -> Result<Self, DpmError> {
        cfg.validate()?;
        model_cfg.validate()?;
        let plan = FreezePlan::default();
        plan.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Trainer { cfg, model: model_cfg, plan, store, velocity: HashMap::new(), rng })
    }

    fn to_samples(&self, batch: &[&DataSample]) -> Vec<Sample<f32>> {
        batch
            .iter()
            .map(|s| Sample { image: s.image.clone(), camera: s.camera, label: s.id })
            .collect()
    }

    /// One forward/backward/update pass over `batch` touching only `active`
    /// groups; every other parameter is bound as a constant.
    pub fn optimize_step(
        &mut self,
        batch: &[Sample<f32>],
        active: &[FreezeGroup],
        lr: f64,
        step_no: usize,
    ) -> Result<StepLosses, DpmError> {
        let step_ctx = |e: DpmError| match e {
            DpmError::NonFinite { context } => {
                DpmError::non_finite(format!("{context} (step {step_no})"))
            }
            other => other,
        };
        let mut g = Graph::new();
        let b = Binding::bind(&self.store, &mut g, |grp| active.contains(&grp));
        let out = model::forward_batch(&mut g, &b, &self.model, batch).map_err(step_ctx)?;
        let losses = StepLosses {
            cls: g.value(out.parts.cls).item() as f64,
            masked_cls: g.value(out.parts.masked_cls).item() as f64,
            hem: g.value(out.parts.hem).item() as f64,
            triplet: g.value(out.parts.triplet).item() as f64,
            total: g.value(out.total).item() as f64,
        };
        g.backward(out.total).map_err(step_ctx)?;
        let (mom, wd, lr) = (self.cfg.momentum as f32, self.cfg.weight_decay as f32, lr as f32);
        for name in self.store.names().to_vec() {
            let var = b.get(&name);
            let p = self.store.get_mut(&name).expect("bound name exists");
            if !(p.trainable && active.contains(&p.group)) {
                continue;
            }
            let Some(grad) = g.grad(var) else { continue };
            if !grad.is_finite() {
                return Err(DpmError::non_finite(format!("gradient of {name} (step {step_no})")));
            }
            let vel = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; p.value.numel()]);
            for ((w, v), gr) in p.value.data_mut().iter_mut().zip(vel.iter_mut()).zip(grad.data()) {
                *v = mom * *v + *gr + wd * *w;
                *w -= lr * *v;
            }
        }
        Ok(losses)
    }

    /// Both freeze steps on one freshly sampled batch.
    pub fn train_iteration(&mut self, train: &[&DataSample], iter: usize) -> Result<IterMetrics, DpmError> {
        let lr = lr_schedule(iter, self.cfg.iterations, self.cfg.base_lr);
        let batch = sample_batch(train, self.cfg.batch_p, self.cfg.batch_k, &mut self.rng)?;
        let samples = self.to_samples(&batch);
        let plan = self.plan.clone();
        let step1 = self.optimize_step(&samples, &plan.step1, lr, 1)?;
        // step 1 moved the encoder, so step 2 re-runs the forward pass
        let step2 = self.optimize_step(&samples, &plan.step2, lr, 2)?;
        Ok(IterMetrics { iter, lr, step1, step2 })
    }

    /// Full training loop; `on_iter` sees every iteration's metrics and the
    /// current parameters (for metrics streaming and checkpointing).
    pub fn run(
        &mut self,
        dataset: &Dataset,
        mut on_iter: impl FnMut(&IterMetrics, &ParamStore<f32>) -> Result<(), DpmError>,
    ) -> Result<(), DpmError> {
        let train: Vec<&DataSample> = dataset.split(Split::Train).collect();
        if train.is_empty() {
            return Err(DpmError::invalid("dataset", "no training samples".to_string()));
        }
        for iter in 0..self.cfg.iterations {
            let m = self.train_iteration(&train, iter)?;
            on_iter(&m, &self.store)?;
        }
        Ok(())
    }
}
