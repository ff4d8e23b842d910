use ndarray::{ArrayView1, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::reasoner::Unrolled;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Similarity {
    Dot,
    Cosine,
}

impl std::str::FromStr for Similarity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dot" => Ok(Similarity::Dot),
            "cosine" => Ok(Similarity::Cosine),
            _ => Err(Error::Config(format!("unknown similarity `{s}`"))),
        }
    }
}

impl std::fmt::Display for Similarity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Similarity::Dot => "dot",
            Similarity::Cosine => "cosine",
        })
    }
}

const COSINE_EPS: f64 = 1e-12;

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// `−log softmax(logits)[target]`.
pub fn rec_loss(logits: ArrayView1<f64>, target: usize) -> Result<f64> {
    if target >= logits.len() {
        return Err(Error::OutOfVocabulary { index: target, num_items: logits.len() });
    }
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("non-finite logits".into()));
    }
    Ok(log_sum_exp(logits.iter().copied()) - logits[target])
}

fn similarity(a: ArrayView1<f64>, b: ArrayView1<f64>, sim: Similarity) -> f64 {
    match sim {
        Similarity::Dot => a.dot(&b),
        Similarity::Cosine => {
            let na = a.dot(&a).sqrt().max(COSINE_EPS);
            let nb = b.dot(&b).sqrt().max(COSINE_EPS);
            a.dot(&b) / (na * nb)
        }
    }
}

/// InfoNCE of `x` against the candidate rows, where row `positive` is the
/// positive.
pub fn info_nce(x: ArrayView1<f64>, positive: usize, candidates: &Tensor, tau: f64, sim: Similarity) -> Result<f64> {
    if candidates.nrows() == 0 {
        return Err(Error::contract("InfoNCE needs at least one candidate"));
    }
    if positive >= candidates.nrows() {
        return Err(Error::contract("positive must be one of the candidates"));
    }
    if !(tau > 0.0) {
        return Err(Error::contract("tau must be positive"));
    }
    let scores: Vec<f64> = candidates.axis_iter(Axis(0)).map(|y| similarity(x, y, sim) / tau).collect();
    Ok(log_sum_exp(scores.iter().copied()) - scores[positive])
}

pub fn spt_objective(l_rec: f64, l_tla: f64, l_sla: f64, alpha: f64, gamma: f64) -> f64 {
    l_rec + alpha * l_tla + gamma * l_sla
}

/// Mean cross-entropy over rows of `logits`.
pub fn rec_loss_batch(tape: &Tape, logits: Var, targets: &[usize]) -> Var {
    let lp = tape.log_softmax_pick(logits, targets);
    tape.scale(tape.mean(lp), -1.0)
}

/// Mean over rows `i` of InfoNCE(a_i, b_i, {b_j}).
fn nce_rows(tape: &Tape, a: Var, b: Var, tau: f64) -> Var {
    let s = tape.scale(tape.matmul_nt(a, b), 1.0 / tau);
    let diag: Vec<usize> = (0..tape.shape(a).0).collect();
    rec_loss_batch(tape, s, &diag)
}

/// `½[F(a, b, B_b) + F(b, a, B_a)]` averaged over rows.
pub fn symmetric_nce(tape: &Tape, a: Var, b: Var, tau: f64, sim: Similarity) -> Result<Var> {
    let (sa, sb) = (tape.shape(a), tape.shape(b));
    if sa != sb {
        return Err(Error::ShapeMismatch { expected: format!("{sa:?}"), found: format!("{sb:?}") });
    }
    if !(tau > 0.0) {
        return Err(Error::contract("tau must be positive"));
    }
    let (a, b) = match sim {
        Similarity::Dot => (a, b),
        Similarity::Cosine => (tape.l2_normalize_rows(a, COSINE_EPS), tape.l2_normalize_rows(b, COSINE_EPS)),
    };
    let fwd = nce_rows(tape, a, b, tau);
    let bwd = nce_rows(tape, b, a, tau);
    Ok(tape.scale(tape.add(fwd, bwd), 0.5))
}

/// Trajectory-level alignment between final representations and their
/// partners.
pub fn tla_loss(tape: &Tape, p: Var, p_hat: Var, tau: f64, sim: Similarity) -> Result<Var> {
    symmetric_nce(tape, p, p_hat, tau, sim)
}

/// Draws the intermediate step `b ~ U{1..k−1}`; `None` when `k = 1`.
pub fn sample_sla_step(k: usize, rng: &mut impl Rng) -> Option<usize> {
    (k >= 2).then(|| rng.random_range(1..k))
}

/// Step-level alignment between step `b` and the final step of one pass.
pub fn sla_loss(tape: &Tape, run: &Unrolled, b: usize, tau: f64, sim: Similarity) -> Result<Var> {
    let k = run.depth();
    if !(1..k).contains(&b) {
        return Err(Error::contract(format!("intermediate step {b} outside 1..{k}")));
    }
    let tb = run.last_rows(tape, b);
    let tk = run.last_rows(tape, k);
    symmetric_nce(tape, tb, tk, tau, sim)
}

/// Plain-value TLA/SLA on given representations.
pub fn symmetric_nce_value(a: &Tensor, b: &Tensor, tau: f64, sim: Similarity) -> Result<f64> {
    let tape = Tape::new();
    let (av, bv) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let out = symmetric_nce(&tape, av, bv, tau, sim)?;
    Ok(tape.scalar(out))
}
