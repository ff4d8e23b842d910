//! Self-supervised pre-training: next-item cross-entropy plus trajectory-
//! and step-level contrastive alignment.

mod losses;
mod pairing;

pub use losses::{
    info_nce, rec_loss, rec_loss_batch, sample_sla_step, sla_loss, spt_objective, symmetric_nce, symmetric_nce_value,
    tla_loss, Similarity,
};
pub use pairing::{check_shared_depth, select_positive_pairs, Partner, PositivePairing};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::corpus::SplitInstance;
use crate::error::{Error, Result};
use crate::evalrank::{evaluate, MetricsReport, DEFAULT_KS};
use crate::optim::{AdamW, AdamWConfig};
use crate::reasoner::{initial_states, ArchitectureConfig, Bound, Dropout, ModelParameters, PackedBatch};
use crate::rng::{derive_seed, rng_from};

const TAG_INIT: u64 = 1;
const TAG_SHUFFLE: u64 = 2;
const TAG_BATCH: u64 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SptConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub tau: f64,
    pub similarity: Similarity,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub max_epochs: usize,
    /// Train instances drawn per epoch; all of them when unset.
    pub epoch_instances: Option<usize>,
    pub seed: u64,
}

impl Default for SptConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            gamma: 0.1,
            tau: 1.0,
            similarity: Similarity::Dot,
            lr: 1e-3,
            weight_decay: 0.01,
            batch_size: 1024,
            patience: 10,
            max_epochs: 200,
            epoch_instances: None,
            seed: 0,
        }
    }
}

impl SptConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.alpha >= 0.0 && self.gamma >= 0.0) {
            return fail("alpha and gamma must be >= 0");
        }
        if !(self.tau > 0.0) {
            return fail("tau must be > 0");
        }
        if !(self.lr > 0.0) || self.weight_decay < 0.0 {
            return fail("lr must be > 0 and weight_decay >= 0");
        }
        if self.batch_size == 0 || self.patience == 0 || self.max_epochs == 0 {
            return fail("batch_size, patience and max_epochs must be >= 1");
        }
        if self.epoch_instances == Some(0) {
            return fail("epoch_instances must be >= 1 when set");
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig { lr: self.lr, weight_decay: self.weight_decay, ..Default::default() }
    }
}

/// One row of a training curve: epoch plus named values in fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveRow {
    pub epoch: usize,
    pub columns: Vec<(String, f64)>,
}

impl CurveRow {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.columns.iter().find(|(n, _)| n == name).map(|&(_, v)| v)
    }
}

/// CSV with an `epoch` column followed by the first row's column names.
pub fn curves_csv(rows: &[CurveRow]) -> String {
    let mut out = String::from("epoch");
    if let Some(first) = rows.first() {
        for (name, _) in &first.columns {
            out.push(',');
            out.push_str(name);
        }
    }
    out.push('\n');
    for row in rows {
        out.push_str(&row.epoch.to_string());
        for (_, v) in &row.columns {
            out.push(',');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    out
}

pub type Validator<'a> = dyn FnMut(&ModelParameters) -> Result<MetricsReport> + 'a;

/// Optional callbacks for the training loops.
#[derive(Default)]
pub struct TrainHooks<'a> {
    /// Replaces the default validation pass.
    pub validator: Option<Box<Validator<'a>>>,
    pub on_epoch: Option<Box<dyn FnMut(&CurveRow) + 'a>>,
}

/// Loss components of one batch.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BatchLoss {
    pub total: f64,
    pub rec: f64,
    pub tla: f64,
    pub sla: f64,
    pub depth: usize,
}

#[derive(Debug, Clone)]
pub struct SptOutcome {
    pub best: ModelParameters,
    pub best_epoch: usize,
    pub best_valid: MetricsReport,
    pub curves: Vec<CurveRow>,
    pub epochs_run: usize,
}

/// Loss and gradients for one mini-batch; all randomness derives from
/// `batch_seed`.
pub fn spt_batch(
    params: &ModelParameters,
    batch: &[&SplitInstance],
    cfg: &SptConfig,
    batch_seed: u64,
) -> Result<(BatchLoss, Vec<Option<Tensor>>)> {
    let arch = &params.config;
    let mut rng = rng_from(batch_seed);
    let k = arch.draw_training_depth(&mut rng);
    let inputs: Vec<&[usize]> = batch.iter().map(|s| s.input.as_slice()).collect();
    let targets: Vec<usize> = batch.iter().map(|s| s.target).collect();
    if let Some(&bad) = targets.iter().find(|&&t| t >= params.num_items) {
        return Err(Error::OutOfVocabulary { index: bad, num_items: params.num_items });
    }
    let seeds = |tag: u64, members: &[usize]| -> Vec<u64> {
        members.iter().map(|&i| derive_seed(batch_seed, &[batch[i].key(), tag])).collect()
    };
    let everyone: Vec<usize> = (0..batch.len()).collect();

    let tape = Tape::new();
    let bound = Bound::new(&tape, params, true);
    let packed = PackedBatch::new(&inputs, params.num_items, arch.max_len)?;
    let t0 = initial_states(params, &packed.layout, &seeds(0, &everyone));
    let drop = Dropout::new(arch.dropout, seeds(1, &everyone));
    let run = bound.unroll(&packed, t0, k, &drop)?;
    let p = run.final_repr(&tape);
    let rec = rec_loss_batch(&tape, bound.logits(p), &targets);
    let mut total = rec;
    let mut loss = BatchLoss { depth: k, ..Default::default() };

    if cfg.alpha > 0.0 {
        let pairing = select_positive_pairs(&targets, k, &mut rng)?;
        let second = pairing.second_pass_members();
        let pool = if second.is_empty() {
            p
        } else {
            let second_inputs: Vec<&[usize]> = second.iter().map(|&i| inputs[i]).collect();
            let packed2 = PackedBatch::new(&second_inputs, params.num_items, arch.max_len)?;
            let t0 = initial_states(params, &packed2.layout, &seeds(2, &second));
            let drop2 = Dropout::new(arch.dropout, seeds(3, &second));
            let run2 = bound.unroll(&packed2, t0, pairing.depth, &drop2)?;
            check_shared_depth(run.depth(), run2.depth())?;
            tape.concat_rows(p, run2.final_repr(&tape))
        };
        let p_hat = tape.gather_rows(pool, &pairing.partner_rows());
        let tla = tla_loss(&tape, p, p_hat, cfg.tau, cfg.similarity)?;
        loss.tla = tape.scalar(tla);
        total = tape.add(total, tape.scale(tla, cfg.alpha));
    }
    if cfg.gamma > 0.0 {
        if let Some(b) = sample_sla_step(k, &mut rng) {
            let sla = sla_loss(&tape, &run, b, cfg.tau, cfg.similarity)?;
            loss.sla = tape.scalar(sla);
            total = tape.add(total, tape.scale(sla, cfg.gamma));
        }
    }
    loss.rec = tape.scalar(rec);
    loss.total = tape.scalar(total);
    if !loss.total.is_finite() {
        return Ok((loss, Vec::new()));
    }
    let mut grads = tape.backward(total);
    let grads = bound.vars().iter().map(|&v| grads.take(v)).collect();
    Ok((loss, grads))
}

/// Default validation: NDCG@10 and friends on `valid` at inference depth.
pub fn default_validator(valid: &[SplitInstance]) -> impl FnMut(&ModelParameters) -> Result<MetricsReport> + '_ {
    move |p: &ModelParameters| evaluate(p, valid, &DEFAULT_KS, p.config.inference_depth())
}

/// Epoch-wise shuffled subset of the training instances.
pub fn epoch_order(n: usize, take: Option<usize>, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_from(derive_seed(seed, &[TAG_SHUFFLE, epoch as u64])));
    if let Some(m) = take {
        order.truncate(m);
    }
    order
}

pub fn valid_columns(report: &MetricsReport) -> Vec<(String, f64)> {
    report.metrics.iter().map(|(k, v)| (format!("valid_{k}"), v.as_f64().unwrap_or(f64::NAN))).collect()
}

/// Mini-batch training with early stopping on validation NDCG@10.
pub fn train_spt(
    train: &[SplitInstance],
    valid: &[SplitInstance],
    num_items: usize,
    arch: &ArchitectureConfig,
    cfg: &SptConfig,
    hooks: TrainHooks<'_>,
) -> Result<SptOutcome> {
    arch.validate()?;
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::contract("no training instances"));
    }
    let init = ModelParameters::init(arch, num_items, derive_seed(cfg.seed, &[TAG_INIT]))?;
    train_spt_from(init, train, valid, cfg, hooks)
}

/// As [`train_spt`], starting from given parameters.
pub fn train_spt_from(
    mut params: ModelParameters,
    train: &[SplitInstance],
    valid: &[SplitInstance],
    cfg: &SptConfig,
    hooks: TrainHooks<'_>,
) -> Result<SptOutcome> {
    cfg.validate()?;
    let TrainHooks { validator, mut on_epoch } = hooks;
    let mut validator: Box<Validator<'_>> = match validator {
        Some(v) => v,
        None => {
            if valid.is_empty() {
                return Err(Error::contract("no validation instances"));
            }
            Box::new(default_validator(valid))
        }
    };
    let mut opt = AdamW::new(cfg.optimizer(), &params);
    let mut best: Option<(f64, usize, ModelParameters, MetricsReport)> = None;
    let mut since_best = 0;
    let mut curves = Vec::new();
    let mut epochs_run = 0;

    for epoch in 1..=cfg.max_epochs {
        epochs_run = epoch;
        let order = epoch_order(train.len(), cfg.epoch_instances, cfg.seed, epoch);
        let mut sums = BatchLoss::default();
        let mut depth_sum = 0usize;
        let mut batches = 0usize;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&SplitInstance> = chunk.iter().map(|&i| &train[i]).collect();
            let seed = derive_seed(cfg.seed, &[TAG_BATCH, epoch as u64, b as u64]);
            let (loss, grads) = spt_batch(&params, &batch, cfg, seed)?;
            if !loss.total.is_finite() {
                return Err(Error::Divergence { epoch, detail: format!("batch {b}: loss {}", loss.total) });
            }
            opt.step(&mut params, &grads)?;
            if !params.all_finite() {
                return Err(Error::Divergence { epoch, detail: format!("batch {b}: non-finite parameters") });
            }
            let w = chunk.len() as f64;
            sums.total += loss.total * w;
            sums.rec += loss.rec * w;
            sums.tla += loss.tla * w;
            sums.sla += loss.sla * w;
            depth_sum += loss.depth;
            batches += 1;
        }
        let n = order.len() as f64;
        let report = validator(&params)?;
        let score = report.ndcg10();
        let mut columns = vec![
            ("loss".to_string(), sums.total / n),
            ("rec".to_string(), sums.rec / n),
            ("tla".to_string(), sums.tla / n),
            ("sla".to_string(), sums.sla / n),
            ("mean_depth".to_string(), depth_sum as f64 / batches as f64),
        ];
        columns.extend(valid_columns(&report));
        let row = CurveRow { epoch, columns };
        if let Some(cb) = on_epoch.as_mut() {
            cb(&row);
        }
        curves.push(row);

        if best.as_ref().is_none_or(|(s, ..)| score > *s) {
            best = Some((score, epoch, params.clone(), report));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    let (_, best_epoch, best, best_valid) = best.expect("at least one epoch ran");
    Ok(SptOutcome { best, best_epoch, best_valid, curves, epochs_run })
}

#[cfg(test)]
mod tests;
