//! Mini-batch training with Adam, one-cycle scheduling, optional gate pruning
//! and early stopping.

use log::{debug, info};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::data::Samples;
use crate::error::{Error, Result};
use crate::heads::{HeadConfig, HeadVariant};
use crate::lora::GateSet;
use crate::metrics::mse;
use crate::model::{Batch, Model};
use crate::optim::{clip_grad_norm, one_cycle_lr, Adam};
use crate::params::{GradMode, ParamGroup, ParamStore};
use crate::pruner::{run_workflow, ImportanceMethod, PruneSchedule, WorkflowReport};
use crate::rng::{derive, Rng64};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub clip_norm: Option<f64>,
    /// Samples per forward pass during evaluation.
    pub eval_chunk: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 2e-4,
            max_epochs: 15,
            batch_size: 16,
            patience: 3,
            clip_norm: Some(1.0),
            eval_chunk: 256,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.max_epochs == 0 || self.batch_size == 0 || self.eval_chunk == 0 {
            return Err(Error::Config("lr, epochs, batch size and eval chunk must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pruning {
    pub schedule: PruneSchedule,
    pub method: ImportanceMethod,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub steps: usize,
    pub epochs: usize,
    pub train_loss: Vec<f64>,
    /// Validation MSE at each epoch end once pruning is complete.
    pub val_history: Vec<f64>,
    pub best_val: f64,
    pub stopped_early: bool,
    pub pruning: Option<WorkflowReport>,
}

/// Validation MSE of `model` over every sample.
pub fn evaluate(model: &Model, data: &Samples, chunk: usize) -> Result<f64> {
    let pred = model.predict_all(&data.inputs, chunk)?;
    mse(&pred, &data.targets)
}

fn check_samples(model: &Model, data: &Samples, what: &str) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Input(format!("{what} set is empty")));
    }
    if data.lookback != model.seq_len() || data.horizon != model.horizon() {
        return Err(Error::Config(format!(
            "{what} samples are ({}, {}) but the model expects ({}, {})",
            data.lookback,
            data.horizon,
            model.seq_len(),
            model.horizon()
        )));
    }
    Ok(())
}

struct Loop<'a> {
    cfg: &'a TrainConfig,
    data: &'a Samples,
    opt: Adam,
    order: Vec<usize>,
    pos: usize,
    step: usize,
    epoch: usize,
    total: usize,
    rng: Rng64,
    epoch_loss: (f64, usize),
    losses: Vec<f64>,
}

impl<'a> Loop<'a> {
    fn new(cfg: &'a TrainConfig, data: &'a Samples, rng: Rng64) -> Self {
        let per_epoch = data.len().div_ceil(cfg.batch_size);
        let mut l = Loop {
            cfg,
            data,
            opt: Adam::new(),
            order: (0..data.len()).collect(),
            pos: 0,
            step: 0,
            epoch: 0,
            total: per_epoch * cfg.max_epochs,
            rng,
            epoch_loss: (0.0, 0),
            losses: Vec::new(),
        };
        l.order.shuffle(&mut l.rng);
        l
    }

    fn done(&self) -> bool {
        self.step >= self.total
    }

    /// One optimizer step; returns whether it closed an epoch.
    fn step(&mut self, model: &mut Model) -> Result<bool> {
        let end = (self.pos + self.cfg.batch_size).min(self.order.len());
        let idx = &self.order[self.pos..end];
        let (x, y) = self.data.gather(idx);
        let batch = Batch::new(x, y, idx.len())?;
        let lr = one_cycle_lr(self.step, self.total, self.cfg.lr)?;
        let (loss, mut grads) = model.loss_and_grads(&batch, GradMode::Trainable).map_err(|e| match e {
            Error::Diverged(m) => Error::Diverged(format!("{m} at step {} (epoch {}, lr {lr:e})", self.step, self.epoch)),
            other => other,
        })?;
        if let Some(c) = self.cfg.clip_norm {
            clip_grad_norm(&mut grads, c);
        }
        self.opt.step(&mut model.store, &grads, lr)?;
        self.epoch_loss.0 += loss;
        self.epoch_loss.1 += 1;
        self.step += 1;
        self.pos = end;
        if self.pos < self.order.len() {
            return Ok(false);
        }
        self.losses.push(self.epoch_loss.0 / self.epoch_loss.1 as f64);
        debug!("epoch {} train loss {:.6}", self.epoch, self.losses.last().unwrap());
        self.epoch_loss = (0.0, 0);
        self.epoch += 1;
        self.pos = 0;
        self.order.shuffle(&mut self.rng);
        Ok(true)
    }
}

/// Contiguous batches covering `data` in order.
pub fn batches(data: &Samples, size: usize) -> Result<Vec<Batch>> {
    (0..data.len())
        .collect::<Vec<_>>()
        .chunks(size.max(1))
        .map(|idx| {
            let (x, y) = data.gather(idx);
            Batch::new(x, y, idx.len())
        })
        .collect()
}

/// Train every trainable parameter of `model`. With `pruning`, gate pruning
/// rounds are interleaved first; early stopping starts once the mask is
/// final, and the best validation state is restored at the end.
pub fn train(
    model: &mut Model,
    train: &Samples,
    val: &Samples,
    cfg: &TrainConfig,
    pruning: Option<&Pruning>,
    seed: u64,
) -> Result<TrainReport> {
    cfg.validate()?;
    check_samples(model, train, "training")?;
    check_samples(model, val, "validation")?;
    let mut lp = Loop::new(cfg, train, derive(seed, 100));
    let mut report = TrainReport::default();

    if let Some(pr) = pruning {
        if model.lora.is_none() {
            return Err(Error::Config("pruning needs gated adapters".into()));
        }
        let pool = batches(val, cfg.batch_size)?;
        let per_trial = pr.schedule.val_batches_per_trial.min(pool.len());
        let mut prune_rng = derive(seed, 101);
        let rep = run_workflow(
            model,
            &pr.schedule,
            pr.method,
            &mut prune_rng,
            |m, alpha| {
                for _ in 0..alpha {
                    if lp.done() {
                        break;
                    }
                    lp.step(m)?;
                }
                Ok(())
            },
            |rng| {
                rand::seq::index::sample(rng, pool.len(), per_trial)
                    .into_iter()
                    .map(|i| pool[i].clone())
                    .collect()
            },
        )?;
        info!("pruning finished after {} steps with {} gates masked", lp.step, rep.final_mask.len());
        report.pruning = Some(rep);
    }

    let mut best = evaluate(model, val, cfg.eval_chunk)?;
    let mut best_state: (ParamStore, Option<GateSet>) = (model.store.clone(), model.lora.clone());
    report.val_history.push(best);
    let mut since_best = 0;
    while !lp.done() {
        if !lp.step(model)? {
            continue;
        }
        let v = evaluate(model, val, cfg.eval_chunk)?;
        report.val_history.push(v);
        if v < best {
            best = v;
            best_state = (model.store.clone(), model.lora.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                report.stopped_early = true;
                debug!("early stop at epoch {}", lp.epoch);
                break;
            }
        }
    }
    model.store = best_state.0;
    model.lora = best_state.1;
    report.best_val = best;
    report.steps = lp.step;
    report.epochs = lp.epoch;
    report.train_loss = lp.losses;
    Ok(report)
}

/// Train embedding, encoder and a throwaway linear head on `source`, and
/// return the resulting parameter store.
pub fn pretrain_backbone(
    backbone: &BackboneConfig,
    source: &Samples,
    val: &Samples,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<ParamStore> {
    let head = HeadConfig::new(HeadVariant::Linear, backbone.n_patches(), backbone.d_model, source.horizon, 1);
    let mut model = Model::new(backbone.clone(), head, None, seed)?;
    model.store.set_group_trainable(ParamGroup::Embedding, true);
    model.store.set_group_trainable(ParamGroup::Backbone, true);
    let rep = train(&mut model, source, val, cfg, None, seed)?;
    info!("pretraining finished: val MSE {:.5} after {} epochs", rep.best_val, rep.epochs);
    Ok(model.store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::FfnKind;
    use crate::data::{channel_independent, make_windows, synth_generate, random_spec, NormStats};

    fn tiny() -> BackboneConfig {
        BackboneConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            seq_len: 16,
            patch_len: 4,
            ffn: FfnKind::Glu,
        }
    }

    fn samples(seed: u64, len: usize) -> Samples {
        let ds = synth_generate(&random_spec("s", len, 1, seed), seed).unwrap();
        let ds = NormStats::fit(&ds).unwrap().normalize(&ds).unwrap();
        channel_independent(&make_windows(&ds, 16, 4, 2).unwrap(), 1, 16, 4)
    }

    fn head(v: HeadVariant) -> HeadConfig {
        HeadConfig::new(v, 4, 8, 4, 2)
    }

    #[test]
    fn linear_probe_fits_zero_data() {
        let zeros = Samples {
            lookback: 16,
            horizon: 4,
            inputs: vec![0.0; 16 * 20],
            targets: vec![0.0; 4 * 20],
        };
        let mut m = Model::new(tiny(), head(HeadVariant::Linear), None, 0).unwrap();
        for id in m.store.ids().collect::<Vec<_>>() {
            if m.store.entry(id).group != ParamGroup::Head {
                let shape = m.store.value(id).shape().to_vec();
                m.store.set_value(id, crate::autodiff::Tensor::zeros(&shape)).unwrap();
            }
        }
        let cfg = TrainConfig { max_epochs: 2, batch_size: 4, ..TrainConfig::default() };
        let rep = train(&mut m, &zeros, &zeros, &cfg, None, 0).unwrap();
        assert_eq!(rep.best_val, 0.0);
        assert!(rep.train_loss.iter().all(|&l| l == 0.0));
    }

    #[test]
    fn training_reduces_validation_loss() {
        let tr = samples(1, 400);
        let va = samples(2, 200);
        let mut m = Model::new(tiny(), head(HeadVariant::Linear), None, 1).unwrap();
        let before = evaluate(&m, &va, 64).unwrap();
        let cfg = TrainConfig { lr: 1e-2, max_epochs: 5, batch_size: 16, ..TrainConfig::default() };
        let rep = train(&mut m, &tr, &va, &cfg, None, 1).unwrap();
        assert!(rep.best_val < before, "{} !< {before}", rep.best_val);
        // the restored model carries the best recorded validation loss
        assert_eq!(evaluate(&m, &va, 64).unwrap(), rep.best_val);
        let mut best = f64::INFINITY;
        for v in &rep.val_history {
            best = best.min(*v);
        }
        assert_eq!(best, rep.best_val);
    }

    #[test]
    fn training_is_deterministic() {
        let tr = samples(3, 300);
        let va = samples(4, 150);
        let cfg = TrainConfig { lr: 5e-3, max_epochs: 3, ..TrainConfig::default() };
        let pr = Pruning {
            schedule: PruneSchedule { alpha: 3, trials: 2, val_batches_per_trial: 2, ..PruneSchedule::default() },
            method: ImportanceMethod::Dsic,
        };
        let run = || {
            let mut m = Model::new(tiny(), head(HeadVariant::ProjDown), Some(2), 5).unwrap();
            let rep = train(&mut m, &tr, &va, &cfg, Some(&pr), 9).unwrap();
            (m, rep)
        };
        let (a, ra) = run();
        let (b, rb) = run();
        assert!(a.store.bit_eq(&b.store));
        assert_eq!(ra, rb);
        let p = ra.pruning.unwrap();
        assert!(p.budget_met);
        assert_eq!(a.masked().len(), 7);
    }

    #[test]
    fn pruning_requires_adapters() {
        let tr = samples(5, 200);
        let mut m = Model::new(tiny(), head(HeadVariant::Linear), None, 0).unwrap();
        let pr = Pruning { schedule: PruneSchedule::default(), method: ImportanceMethod::Dsic };
        assert!(train(&mut m, &tr, &tr, &TrainConfig::default(), Some(&pr), 0).is_err());
    }

    #[test]
    fn mismatched_samples_rejected() {
        let tr = samples(6, 200);
        let mut m = Model::new(tiny(), HeadConfig::new(HeadVariant::Linear, 4, 8, 5, 1), None, 0).unwrap();
        assert!(matches!(train(&mut m, &tr, &tr, &TrainConfig::default(), None, 0), Err(Error::Config(_))));
    }
}
