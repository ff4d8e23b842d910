//! Reinforcement post-training with grouped rollouts and a clipped,
//! KL-regularized policy-gradient surrogate.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::corpus::SplitInstance;
use crate::error::{Error, Result};
use crate::evalrank::{rank_of, MetricName, MetricsReport};
use crate::optim::{AdamW, AdamWConfig};
use crate::pretrain::{default_validator, epoch_order, valid_columns, CurveRow, TrainHooks, Validator};
use crate::reasoner::{batch_step_reprs, initial_states, Bound, Dropout, ModelParameters, PackedBatch, SeedRecord};
use crate::rng::{derive_seed, rng_from};

const TAG_FILTER: u64 = 11;
const TAG_POOL: u64 = 12;
const TAG_SHUFFLE: u64 = 13;
const TAG_BATCH: u64 = 14;
/// Rollouts scored per forward pass.
const ROLLOUT_CHUNK: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlMode {
    /// `exp(Δ) − Δ − 1` on summed target log-probabilities, `Δ = ref − new`.
    Estimator,
    /// Exact KL between final-step catalog distributions.
    ExactFinal,
}

impl std::str::FromStr for KlMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "estimator" => Ok(KlMode::Estimator),
            "exact_final" => Ok(KlMode::ExactFinal),
            _ => Err(Error::Config(format!("unknown kl mode `{s}`"))),
        }
    }
}

impl std::fmt::Display for KlMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            KlMode::Estimator => "estimator",
            KlMode::ExactFinal => "exact_final",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RptConfig {
    pub group_size: usize,
    pub epsilon: f64,
    pub beta: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub reward_metric: MetricName,
    pub std_floor: f64,
    pub inner_updates: usize,
    pub kl_mode: KlMode,
    /// Instances per rollout batch.
    pub batch_size: usize,
    pub trials: usize,
    pub rank_cutoff: usize,
    pub patience: usize,
    pub max_epochs: usize,
    /// Trainable instances visited per epoch; all when unset.
    pub epoch_instances: Option<usize>,
    /// Train instances sampled before difficulty filtering; all when unset.
    pub pool_size: Option<usize>,
    pub seed: u64,
}

impl Default for RptConfig {
    fn default() -> Self {
        Self {
            group_size: 4,
            epsilon: 0.2,
            beta: 1.0,
            lr: 1e-4,
            weight_decay: 0.01,
            reward_metric: MetricName::Recall(10),
            std_floor: 1e-8,
            inner_updates: 1,
            kl_mode: KlMode::Estimator,
            batch_size: 1024,
            trials: 3,
            rank_cutoff: 100,
            patience: 10,
            max_epochs: 100,
            epoch_instances: None,
            pool_size: None,
            seed: 0,
        }
    }
}

impl RptConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.group_size < 2 {
            return fail("group_size must be >= 2");
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return fail("epsilon must lie in (0, 1)");
        }
        if !(self.beta >= 0.0) {
            return fail("beta must be >= 0");
        }
        if !(self.lr > 0.0) || self.weight_decay < 0.0 {
            return fail("lr must be > 0 and weight_decay >= 0");
        }
        if !(self.std_floor > 0.0) {
            return fail("std_floor must be > 0");
        }
        if self.inner_updates == 0 || self.batch_size == 0 || self.trials == 0 || self.rank_cutoff == 0 {
            return fail("inner_updates, batch_size, trials and rank_cutoff must be >= 1");
        }
        if self.patience == 0 || self.max_epochs == 0 {
            return fail("patience and max_epochs must be >= 1");
        }
        if self.epoch_instances == Some(0) || self.pool_size == Some(0) {
            return fail("epoch_instances and pool_size must be >= 1 when set");
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig { lr: self.lr, weight_decay: self.weight_decay, ..Default::default() }
    }
}

/// Current, sampling and reference policies.
#[derive(Debug, Clone)]
pub struct PolicyTriplet {
    pub current: ModelParameters,
    pub old: ModelParameters,
    reference: ModelParameters,
}

impl PolicyTriplet {
    pub fn new(reference: ModelParameters) -> Self {
        Self { current: reference.clone(), old: reference.clone(), reference }
    }

    pub fn reference(&self) -> &ModelParameters {
        &self.reference
    }

    /// `π_old ← π_θ`.
    pub fn snapshot(&mut self) {
        self.old = self.current.clone();
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub seed: SeedRecord,
    /// `log π_old(target)` at steps `1..=k`.
    pub step_logprobs: Vec<f64>,
    /// Rank of the target under the final-step logits.
    pub final_rank: usize,
    pub reward: f64,
    pub advantage: f64,
    pub ref_logprob: f64,
}

impl Rollout {
    pub fn old_logprob(&self) -> f64 {
        self.step_logprobs.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    pub instance: SplitInstance,
    pub rollouts: Vec<Rollout>,
}

fn log_softmax_at(row: ndarray::ArrayView1<f64>, target: usize) -> f64 {
    let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row[target] - lse
}

/// Per-step target log-probabilities and final ranks for explicit seeds.
fn score_seeded(
    params: &ModelParameters,
    inputs: &[&[usize]],
    targets: &[usize],
    depth: usize,
    seeds: &[u64],
) -> Result<Vec<(Vec<f64>, usize)>> {
    let mut out = Vec::with_capacity(inputs.len());
    let e = params.item_embeddings();
    for start in (0..inputs.len()).step_by(ROLLOUT_CHUNK) {
        let end = (start + ROLLOUT_CHUNK).min(inputs.len());
        let steps = batch_step_reprs(params, &inputs[start..end], depth, &seeds[start..end])?;
        let logits: Vec<Tensor> = steps.iter().map(|s| s.dot(&e.t())).collect();
        for r in 0..end - start {
            let t = targets[start + r];
            let lps = logits.iter().map(|l| log_softmax_at(l.row(r), t)).collect();
            let rank = rank_of(logits[depth - 1].row(r), t);
            out.push((lps, rank));
        }
    }
    Ok(out)
}

/// Ranks of each instance's target over `trials` stochastic passes.
pub fn trial_ranks(
    params: &ModelParameters,
    instances: &[SplitInstance],
    trials: usize,
    depth: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    let mut inputs = Vec::with_capacity(instances.len() * trials);
    let mut targets = Vec::with_capacity(inputs.capacity());
    let mut seeds = Vec::with_capacity(inputs.capacity());
    for inst in instances {
        for t in 0..trials {
            inputs.push(inst.input.as_slice());
            targets.push(inst.target);
            seeds.push(derive_seed(seed, &[TAG_FILTER, inst.key(), t as u64]));
        }
    }
    let scored = score_seeded(params, &inputs, &targets, depth, &seeds)?;
    Ok(scored.chunks(trials).map(|c| c.iter().map(|(_, r)| *r).collect()).collect())
}

/// An instance is kept unless every trial ranks its target past the cutoff.
pub fn keep_instance(ranks: &[usize], cutoff: usize) -> bool {
    ranks.iter().any(|&r| r <= cutoff)
}

pub fn filter_trainable(
    params: &ModelParameters,
    instances: &[SplitInstance],
    trials: usize,
    rank_cutoff: usize,
    seed: u64,
) -> Result<Vec<SplitInstance>> {
    let ranks = trial_ranks(params, instances, trials, params.config.inference_depth(), seed)?;
    Ok(instances.iter().zip(&ranks).filter(|(_, r)| keep_instance(r, rank_cutoff)).map(|(i, _)| i.clone()).collect())
}

/// Samples `G` rollouts per instance from `policy_old` at a fixed depth,
/// dropout off; rewards and advantages are left at zero.
pub fn rollout_groups(
    policy_old: &ModelParameters,
    instances: &[SplitInstance],
    group_size: usize,
    depth: usize,
    rng: &mut impl Rng,
) -> Result<Vec<RolloutGroup>> {
    if group_size < 2 {
        return Err(Error::contract("group size must be >= 2"));
    }
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    let mut seeds = Vec::new();
    for inst in instances {
        for _ in 0..group_size {
            inputs.push(inst.input.as_slice());
            targets.push(inst.target);
            seeds.push(rng.random::<u64>());
        }
    }
    let scored = score_seeded(policy_old, &inputs, &targets, depth, &seeds)?;
    let mut groups = Vec::with_capacity(instances.len());
    for (g, inst) in instances.iter().enumerate() {
        let rollouts = (0..group_size)
            .map(|i| {
                let j = g * group_size + i;
                let (step_logprobs, final_rank) = scored[j].clone();
                Rollout {
                    seed: SeedRecord { state_seed: seeds[j], depth, dropout_seed: None },
                    step_logprobs,
                    final_rank,
                    reward: 0.0,
                    advantage: 0.0,
                    ref_logprob: 0.0,
                }
            })
            .collect();
        groups.push(RolloutGroup { instance: inst.clone(), rollouts });
    }
    Ok(groups)
}

pub fn rollout_group(
    policy_old: &ModelParameters,
    instance: &SplitInstance,
    group_size: usize,
    depth: usize,
    rng: &mut impl Rng,
) -> Result<RolloutGroup> {
    Ok(rollout_groups(policy_old, std::slice::from_ref(instance), group_size, depth, rng)?.remove(0))
}

pub fn compute_rewards(group: &RolloutGroup, metric: MetricName) -> Vec<f64> {
    group.rollouts.iter().map(|r| metric.value(r.final_rank)).collect()
}

/// Population z-scores; all zero when the spread is below `std_floor`.
pub fn compute_advantages(rewards: &[f64], std_floor: f64) -> Vec<f64> {
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let std = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    if std < std_floor {
        return vec![0.0; rewards.len()];
    }
    rewards.iter().map(|r| (r - mean) / std).collect()
}

/// Fills rewards and advantages in place.
pub fn score_group(group: &mut RolloutGroup, metric: MetricName, std_floor: f64) {
    let rewards = compute_rewards(group, metric);
    let adv = compute_advantages(&rewards, std_floor);
    for ((r, reward), a) in group.rollouts.iter_mut().zip(rewards).zip(adv) {
        r.reward = reward;
        r.advantage = a;
    }
}

/// `log π(y | x)` of one rollout replayed under `policy`.
pub fn trajectory_logprob(policy: &ModelParameters, group: &RolloutGroup, index: usize) -> Result<f64> {
    let rollout = group
        .rollouts
        .get(index)
        .ok_or_else(|| Error::contract(format!("no rollout {index} in a group of {}", group.rollouts.len())))?;
    let inputs = [group.instance.input.as_slice()];
    let scored =
        score_seeded(policy, &inputs, &[group.instance.target], rollout.seed.depth, &[rollout.seed.state_seed])?;
    Ok(scored[0].0.iter().sum())
}

/// Sets each rollout's reference log-probability by replay under `reference`.
pub fn fill_reference_logprobs(reference: &ModelParameters, groups: &mut [RolloutGroup]) -> Result<()> {
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    let mut seeds = Vec::new();
    let depth = groups.first().and_then(|g| g.rollouts.first()).map_or(1, |r| r.seed.depth);
    for g in groups.iter() {
        for r in &g.rollouts {
            if r.seed.depth != depth {
                return Err(Error::contract("rollouts in one batch must share a depth"));
            }
            inputs.push(g.instance.input.as_slice());
            targets.push(g.instance.target);
            seeds.push(r.seed.state_seed);
        }
    }
    let scored = score_seeded(reference, &inputs, &targets, depth, &seeds)?;
    let mut it = scored.into_iter();
    for g in groups.iter_mut() {
        for r in g.rollouts.iter_mut() {
            r.ref_logprob = it.next().expect("one score per rollout").0.iter().sum();
        }
    }
    Ok(())
}

/// Plain-value surrogate, to be maximized.
pub fn grpo_objective(
    new_lp: &[f64],
    old_lp: &[f64],
    ref_lp: &[f64],
    advantages: &[f64],
    epsilon: f64,
    beta: f64,
) -> Result<f64> {
    let g = new_lp.len();
    if old_lp.len() != g || ref_lp.len() != g || advantages.len() != g || g == 0 {
        return Err(Error::contract("objective inputs must be aligned and non-empty"));
    }
    let mut total = 0.0;
    for i in 0..g {
        let ratio = (new_lp[i] - old_lp[i]).exp();
        if !ratio.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite ratio for rollout {i}: new {} old {}",
                new_lp[i], old_lp[i]
            )));
        }
        let a = advantages[i];
        let surrogate = (ratio * a).min(ratio.clamp(1.0 - epsilon, 1.0 + epsilon) * a);
        let d = ref_lp[i] - new_lp[i];
        total += surrogate - beta * (d.exp() - d - 1.0);
    }
    Ok(total / g as f64)
}

/// Statistics of one surrogate evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct UpdateStats {
    pub objective: f64,
    pub kl: f64,
    pub clip_fraction: f64,
    pub max_ratio_dev: f64,
}

/// Negated surrogate on the tape under `policy`, plus its gradients.
pub fn grpo_batch(
    policy: &ModelParameters,
    reference: &ModelParameters,
    groups: &[RolloutGroup],
    cfg: &RptConfig,
) -> Result<(UpdateStats, Vec<Option<Tensor>>)> {
    let rollouts: Vec<(&SplitInstance, &Rollout)> =
        groups.iter().flat_map(|g| g.rollouts.iter().map(move |r| (&g.instance, r))).collect();
    if rollouts.is_empty() {
        return Err(Error::contract("no rollouts to optimize"));
    }
    let depth = rollouts[0].1.seed.depth;
    if rollouts.iter().any(|(_, r)| r.seed.depth != depth) {
        return Err(Error::contract("rollouts in one batch must share a depth"));
    }
    let n = rollouts.len();
    let column = |f: &dyn Fn(&Rollout) -> f64| Tensor::from_shape_fn((n, 1), |(i, _)| f(rollouts[i].1));
    let old = column(&|r| r.old_logprob());
    let adv = column(&|r| r.advantage);
    let inputs: Vec<&[usize]> = rollouts.iter().map(|(i, _)| i.input.as_slice()).collect();
    let targets: Vec<usize> = rollouts.iter().map(|(i, _)| i.target).collect();
    let seeds: Vec<u64> = rollouts.iter().map(|(_, r)| r.seed.state_seed).collect();

    let tape = Tape::new();
    let bound = Bound::new(&tape, policy, true);
    let packed = PackedBatch::new(&inputs, policy.num_items, policy.config.max_len)?;
    let t0 = initial_states(policy, &packed.layout, &seeds);
    let run = bound.unroll(&packed, t0, depth, &Dropout::off())?;
    let mut new_lp: Option<Var> = None;
    let mut final_logits = None;
    for step in 1..=depth {
        let logits = bound.logits(run.last_rows(&tape, step));
        let lp = tape.log_softmax_pick(logits, &targets);
        new_lp = Some(match new_lp {
            None => lp,
            Some(acc) => tape.add(acc, lp),
        });
        final_logits = Some(logits);
    }
    let new_lp = new_lp.expect("depth >= 1");

    let ratio = tape.exp(tape.sub(new_lp, tape.constant(old)));
    let unclipped = tape.mul_const(ratio, adv.clone());
    let clipped = tape.mul_const(tape.clamp(ratio, 1.0 - cfg.epsilon, 1.0 + cfg.epsilon), adv);
    let surrogate = tape.mean(tape.minimum(unclipped, clipped));
    let kl = match cfg.kl_mode {
        KlMode::Estimator => {
            let reference_lp = column(&|r| r.ref_logprob);
            let d = tape.sub(tape.constant(reference_lp), new_lp);
            tape.mean(tape.add_scalar(tape.sub(tape.exp(d), d), -1.0))
        }
        KlMode::ExactFinal => {
            let ref_logits = crate::reasoner::batch_logits(reference, &inputs, depth, &seeds)?;
            let ref_log_probs = log_softmax_rows(&ref_logits);
            let lp = tape.log_softmax(final_logits.expect("depth >= 1"));
            let kl_terms = tape.mul(tape.exp(lp), tape.sub(lp, tape.constant(ref_log_probs)));
            tape.scale(tape.sum(kl_terms), 1.0 / n as f64)
        }
    };
    let objective = tape.sub(surrogate, tape.scale(kl, cfg.beta));
    let loss = tape.scale(objective, -1.0);

    let ratios = tape.value(ratio).clone();
    if ratios.iter().any(|r| !r.is_finite()) {
        return Err(Error::Numeric("non-finite importance ratio".into()));
    }
    let clipped_count = ratios.iter().filter(|&&r| (r - 1.0).abs() > cfg.epsilon).count();
    let stats = UpdateStats {
        objective: tape.scalar(objective),
        kl: tape.scalar(kl),
        clip_fraction: clipped_count as f64 / n as f64,
        max_ratio_dev: ratios.iter().fold(0.0, |m, &r| m.max((r - 1.0).abs())),
    };
    let mut grads = tape.backward(loss);
    let grads = bound.vars().iter().map(|&v| grads.take(v)).collect();
    Ok((stats, grads))
}

fn log_softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// Group-advantage checks over non-degenerate groups.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct AdvantageCheck {
    pub groups: usize,
    pub degenerate: usize,
    pub max_abs_mean: f64,
    pub max_std_dev: f64,
}

impl AdvantageCheck {
    pub fn observe(&mut self, group: &RolloutGroup, std_floor: f64) {
        self.groups += 1;
        let rewards: Vec<f64> = group.rollouts.iter().map(|r| r.reward).collect();
        let n = rewards.len() as f64;
        let rmean = rewards.iter().sum::<f64>() / n;
        let rstd = (rewards.iter().map(|r| (r - rmean).powi(2)).sum::<f64>() / n).sqrt();
        if rstd < std_floor {
            self.degenerate += 1;
            return;
        }
        let adv: Vec<f64> = group.rollouts.iter().map(|r| r.advantage).collect();
        let mean = adv.iter().sum::<f64>() / n;
        let std = (adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
        self.max_abs_mean = self.max_abs_mean.max(mean.abs());
        self.max_std_dev = self.max_std_dev.max((std - 1.0).abs());
    }

    pub fn merge(&mut self, other: &AdvantageCheck) {
        self.groups += other.groups;
        self.degenerate += other.degenerate;
        self.max_abs_mean = self.max_abs_mean.max(other.max_abs_mean);
        self.max_std_dev = self.max_std_dev.max(other.max_std_dev);
    }
}

#[derive(Debug, Clone)]
pub struct RptOutcome {
    pub best: ModelParameters,
    pub best_epoch: usize,
    pub best_valid: MetricsReport,
    /// Validation of the starting checkpoint; never a best candidate.
    pub initial_valid: MetricsReport,
    pub curves: Vec<CurveRow>,
    /// One row per rollout batch.
    pub iterations: Vec<CurveRow>,
    pub trainable: usize,
    pub pool: usize,
    pub advantages: AdvantageCheck,
    /// Largest |ratio − 1| seen on the first inner update of any batch.
    pub first_update_ratio_dev: f64,
    pub epochs_run: usize,
}

/// Post-trains from a pre-trained checkpoint, which stays frozen as the
/// reference policy.
pub fn train_rpt(
    spt: &ModelParameters,
    train: &[SplitInstance],
    valid: &[SplitInstance],
    cfg: &RptConfig,
    hooks: TrainHooks<'_>,
) -> Result<RptOutcome> {
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
    let depth = spt.config.inference_depth();
    let mut pool: Vec<SplitInstance> = train.to_vec();
    if let Some(m) = cfg.pool_size {
        pool.shuffle(&mut rng_from(derive_seed(cfg.seed, &[TAG_POOL])));
        pool.truncate(m);
    }
    let trainable = filter_trainable(spt, &pool, cfg.trials, cfg.rank_cutoff, cfg.seed)?;
    if trainable.is_empty() {
        return Err(Error::contract("difficulty filter kept no instances"));
    }

    let mut policies = PolicyTriplet::new(spt.clone());
    let mut opt = AdamW::new(cfg.optimizer(), &policies.current);
    let initial_valid = validator(&policies.current)?;
    let mut best: Option<(f64, usize, ModelParameters, MetricsReport)> = None;
    let mut since_best = 0;
    let mut curves = Vec::new();
    let mut iterations = Vec::new();
    let mut advantages = AdvantageCheck::default();
    let mut first_update_ratio_dev: f64 = 0.0;
    let mut epochs_run = 0;

    for epoch in 1..=cfg.max_epochs {
        epochs_run = epoch;
        let order = epoch_order(trainable.len(), cfg.epoch_instances, derive_seed(cfg.seed, &[TAG_SHUFFLE]), epoch);
        let mut epoch_adv = AdvantageCheck::default();
        let (mut reward_sum, mut kl_sum, mut obj_sum, mut clip_sum, mut updates) = (0.0, 0.0, 0.0, 0.0, 0usize);
        let mut rollouts_seen = 0usize;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            policies.snapshot();
            let batch: Vec<SplitInstance> = chunk.iter().map(|&i| trainable[i].clone()).collect();
            let mut rng = rng_from(derive_seed(cfg.seed, &[TAG_BATCH, epoch as u64, b as u64]));
            let mut groups = rollout_groups(&policies.old, &batch, cfg.group_size, depth, &mut rng)?;
            let mut batch_adv = AdvantageCheck::default();
            for g in groups.iter_mut() {
                score_group(g, cfg.reward_metric, cfg.std_floor);
                batch_adv.observe(g, cfg.std_floor);
            }
            fill_reference_logprobs(policies.reference(), &mut groups)?;
            let mean_reward = groups.iter().flat_map(|g| g.rollouts.iter().map(|r| r.reward)).sum::<f64>()
                / (groups.len() * cfg.group_size) as f64;
            let mut last = UpdateStats::default();
            for u in 0..cfg.inner_updates {
                let (stats, grads) = grpo_batch(&policies.current, policies.reference(), &groups, cfg)?;
                if !stats.objective.is_finite() {
                    return Err(Error::Divergence { epoch, detail: format!("batch {b}: objective {}", stats.objective) });
                }
                if u == 0 {
                    first_update_ratio_dev = first_update_ratio_dev.max(stats.max_ratio_dev);
                }
                opt.step(&mut policies.current, &grads)?;
                if !policies.current.all_finite() {
                    return Err(Error::Divergence { epoch, detail: format!("batch {b}: non-finite parameters") });
                }
                kl_sum += stats.kl;
                obj_sum += stats.objective;
                clip_sum += stats.clip_fraction;
                updates += 1;
                last = stats;
            }
            reward_sum += mean_reward * groups.len() as f64;
            rollouts_seen += groups.len();
            iterations.push(CurveRow {
                epoch: iterations.len() + 1,
                columns: vec![
                    ("epoch".into(), epoch as f64),
                    ("mean_reward".into(), mean_reward),
                    ("adv_max_abs_mean".into(), batch_adv.max_abs_mean),
                    ("adv_max_std_dev".into(), batch_adv.max_std_dev),
                    ("degenerate_groups".into(), batch_adv.degenerate as f64),
                    ("clip_fraction".into(), last.clip_fraction),
                    ("kl".into(), last.kl),
                    ("objective".into(), last.objective),
                ],
            });
            epoch_adv.merge(&batch_adv);
        }
        advantages.merge(&epoch_adv);
        let report = validator(&policies.current)?;
        let score = report.ndcg10();
        let mut columns = vec![
            ("objective".to_string(), obj_sum / updates as f64),
            ("kl".to_string(), kl_sum / updates as f64),
            ("clip_fraction".to_string(), clip_sum / updates as f64),
            ("mean_reward".to_string(), reward_sum / rollouts_seen as f64),
            ("adv_max_abs_mean".to_string(), epoch_adv.max_abs_mean),
            ("adv_max_std_dev".to_string(), epoch_adv.max_std_dev),
        ];
        columns.extend(valid_columns(&report));
        let row = CurveRow { epoch, columns };
        if let Some(cb) = on_epoch.as_mut() {
            cb(&row);
        }
        curves.push(row);
        if best.as_ref().is_none_or(|(s, ..)| score > *s) {
            best = Some((score, epoch, policies.current.clone(), report));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    let (_, best_epoch, best, best_valid) = best.expect("at least one epoch ran");
    Ok(RptOutcome {
        best,
        best_epoch,
        best_valid,
        initial_valid,
        curves,
        iterations,
        trainable: trainable.len(),
        pool: pool.len(),
        advantages,
        first_update_ratio_dev,
        epochs_run,
    })
}
