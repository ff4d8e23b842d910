//! Full-catalog ranking metrics.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use ndarray::ArrayView1;
use serde::{Deserialize, Serialize};

use crate::corpus::{Split, SplitInstance};
use crate::error::{Error, Result};
use crate::reasoner::{batch_logits, ModelParameters};
use crate::rng::derive_seed;

pub const DEFAULT_KS: [usize; 3] = [5, 10, 20];
/// Base seed for evaluation-time initial states.
pub const EVAL_SEED: u64 = 0x5EED_0E7A;
const EVAL_BATCH: usize = 256;

/// 1-based rank: items with a higher logit, or an equal logit and lower
/// index, are ranked ahead.
pub fn rank_of(logits: ArrayView1<f64>, target: usize) -> usize {
    let t = logits[target];
    let mut ahead = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > t || (v == t && i < target) {
            ahead += 1;
        }
    }
    ahead + 1
}

pub fn recall_at_k(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0
    } else {
        0.0
    }
}

pub fn ndcg_at_k(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum MetricName {
    Recall(usize),
    Ndcg(usize),
}

impl MetricName {
    pub fn value(self, rank: usize) -> f64 {
        match self {
            MetricName::Recall(k) => recall_at_k(rank, k),
            MetricName::Ndcg(k) => ndcg_at_k(rank, k),
        }
    }
}

impl fmt::Display for MetricName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricName::Recall(k) => write!(f, "Recall@{k}"),
            MetricName::Ndcg(k) => write!(f, "NDCG@{k}"),
        }
    }
}

impl FromStr for MetricName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unknown metric `{s}` (expected Recall@K or NDCG@K)"));
        let (name, k) = s.split_once('@').ok_or_else(bad)?;
        let k: usize = k.parse().map_err(|_| bad())?;
        if k == 0 {
            return Err(bad());
        }
        match name.to_ascii_lowercase().as_str() {
            "recall" => Ok(MetricName::Recall(k)),
            "ndcg" => Ok(MetricName::Ndcg(k)),
            _ => Err(bad()),
        }
    }
}

impl TryFrom<String> for MetricName {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<MetricName> for String {
    fn from(m: MetricName) -> String {
        m.to_string()
    }
}

/// Metrics in report order: all Recall@K, then all NDCG@K.
pub fn metric_names(ks: &[usize]) -> Vec<MetricName> {
    let mut out: Vec<MetricName> = ks.iter().map(|&k| MetricName::Recall(k)).collect();
    out.extend(ks.iter().map(|&k| MetricName::Ndcg(k)));
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankingResult {
    pub instance: SplitInstance,
    pub target_rank: usize,
}

/// Per-instance initial-state seed used by every evaluation pass.
pub fn eval_state_seed(instance: &SplitInstance) -> u64 {
    derive_seed(EVAL_SEED, &[instance.key()])
}

/// Ranks for many instances, batched; dropout off, fixed evaluation seeds.
pub fn rank_instances(params: &ModelParameters, instances: &[SplitInstance], depth: usize) -> Result<Vec<RankingResult>> {
    if depth == 0 {
        return Err(Error::contract("depth must be >= 1"));
    }
    let mut out = Vec::with_capacity(instances.len());
    for chunk in instances.chunks(EVAL_BATCH) {
        let inputs: Vec<&[usize]> = chunk.iter().map(|s| s.input.as_slice()).collect();
        let seeds: Vec<u64> = chunk.iter().map(eval_state_seed).collect();
        let logits = batch_logits(params, &inputs, depth, &seeds)?;
        for (row, inst) in logits.rows().into_iter().zip(chunk) {
            if inst.target >= params.num_items {
                return Err(Error::OutOfVocabulary { index: inst.target, num_items: params.num_items });
            }
            out.push(RankingResult { instance: inst.clone(), target_rank: rank_of(row, inst.target) });
        }
    }
    Ok(out)
}

pub fn full_rank(params: &ModelParameters, instance: &SplitInstance, depth: usize) -> Result<RankingResult> {
    Ok(rank_instances(params, std::slice::from_ref(instance), depth)?.remove(0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub split: Split,
    pub depth: usize,
    /// Metric name to mean value, in report order.
    pub metrics: serde_json::Map<String, serde_json::Value>,
    pub n_instances: usize,
    pub checkpoint: Option<String>,
    pub wall_clock_secs: f64,
}

impl MetricsReport {
    pub fn from_values(split: Split, depth: usize, n_instances: usize, values: &[(MetricName, f64)]) -> Self {
        let metrics = values.iter().map(|(n, v)| (n.to_string(), (*v).into())).collect();
        Self { split, depth, metrics, n_instances, checkpoint: None, wall_clock_secs: 0.0 }
    }

    pub fn get(&self, name: MetricName) -> Option<f64> {
        self.metrics.get(&name.to_string()).and_then(|v| v.as_f64())
    }

    pub fn ndcg10(&self) -> f64 {
        self.get(MetricName::Ndcg(10)).unwrap_or(0.0)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Averages metrics over ranked instances.
pub fn summarize(ranks: &[RankingResult], ks: &[usize], split: Split, depth: usize) -> Result<MetricsReport> {
    if ranks.is_empty() {
        return Err(Error::contract("cannot evaluate an empty split"));
    }
    let mut metrics = serde_json::Map::new();
    for name in metric_names(ks) {
        let mean = ranks.iter().map(|r| name.value(r.target_rank)).sum::<f64>() / ranks.len() as f64;
        metrics.insert(name.to_string(), mean.into());
    }
    Ok(MetricsReport { split, depth, metrics, n_instances: ranks.len(), checkpoint: None, wall_clock_secs: 0.0 })
}

pub fn evaluate(
    params: &ModelParameters,
    instances: &[SplitInstance],
    ks: &[usize],
    depth: usize,
) -> Result<MetricsReport> {
    if instances.is_empty() {
        return Err(Error::contract("cannot evaluate an empty split"));
    }
    let start = Instant::now();
    let ranks = rank_instances(params, instances, depth)?;
    let mut report = summarize(&ranks, ks, instances[0].split, depth)?;
    report.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok(report)
}
