use std::cell::Cell;

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::Aggregation;
use super::params::{BlockSlots, LayerSlots, ModelParameters, ParamSlots};
use crate::autodiff::{SeqLayout, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, dropout_mask, normal_matrix, rng_from};

pub const LN_EPS: f64 = 1e-12;

/// Several input sequences packed row-wise, one segment per sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedBatch {
    pub layout: SeqLayout,
    pub items: Vec<usize>,
    pub positions: Vec<usize>,
}

impl PackedBatch {
    pub fn new<S: AsRef<[usize]>>(inputs: &[S], num_items: usize, max_len: usize) -> Result<Self> {
        let mut items = Vec::new();
        for s in inputs {
            let s = s.as_ref();
            if s.is_empty() {
                return Err(Error::contract("input sequence must be non-empty"));
            }
            if s.len() > max_len {
                return Err(Error::contract(format!("input length {} exceeds max_len {max_len}", s.len())));
            }
            if let Some(&bad) = s.iter().find(|&&i| i >= num_items) {
                return Err(Error::OutOfVocabulary { index: bad, num_items });
            }
            items.extend_from_slice(s);
        }
        let layout = SeqLayout::from_lengths(inputs.iter().map(|s| s.as_ref().len()));
        let positions = layout.positions();
        Ok(Self { layout, items, positions })
    }
}

/// Seeded inverted dropout; each application draws fresh per-segment masks.
#[derive(Debug)]
pub struct Dropout {
    rate: f64,
    seeds: Vec<u64>,
    counter: Cell<u64>,
}

impl Dropout {
    pub fn off() -> Self {
        Self { rate: 0.0, seeds: Vec::new(), counter: Cell::new(0) }
    }

    /// One seed per segment of every layout this is applied to.
    pub fn new(rate: f64, seeds: Vec<u64>) -> Self {
        Self { rate, seeds, counter: Cell::new(0) }
    }

    pub fn is_active(&self) -> bool {
        self.rate > 0.0 && !self.seeds.is_empty()
    }

    fn apply(&self, tape: &Tape, x: Var, layout: &SeqLayout) -> Var {
        if !self.is_active() {
            return x;
        }
        assert_eq!(self.seeds.len(), layout.len(), "one dropout seed per segment");
        let call = self.counter.get();
        self.counter.set(call + 1);
        let cols = tape.shape(x).1;
        let mut mask = Array2::zeros((layout.rows(), cols));
        for (&(start, len), &seed) in layout.segments().iter().zip(&self.seeds) {
            let m = dropout_mask(len, cols, self.rate, &mut rng_from(derive_seed(seed, &[call])));
            mask.slice_mut(ndarray::s![start..start + len, ..]).assign(&m);
        }
        tape.mul_const(x, mask)
    }
}

/// Model parameters placed on a tape, either as trainable leaves or constants.
pub struct Bound<'t> {
    pub tape: &'t Tape,
    pub params: &'t ModelParameters,
    vars: Vec<Var>,
}

/// Output of a batched unroll: the anchor and states `T_1..T_k`.
pub struct Unrolled {
    pub layout: SeqLayout,
    pub h: Var,
    pub states: Vec<Var>,
}

impl Unrolled {
    pub fn depth(&self) -> usize {
        self.states.len()
    }

    /// Last-position rows of `T_step` (1-based), one per segment.
    pub fn last_rows(&self, tape: &Tape, step: usize) -> Var {
        tape.gather_rows(self.states[step - 1], &self.layout.last_rows())
    }

    pub fn final_repr(&self, tape: &Tape) -> Var {
        self.last_rows(tape, self.depth())
    }
}

impl<'t> Bound<'t> {
    pub fn new(tape: &'t Tape, params: &'t ModelParameters, trainable: bool) -> Self {
        let vars = params
            .tensors()
            .iter()
            .map(|t| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) })
            .collect();
        Self { tape, params, vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn slots(&self) -> &'t ParamSlots {
        self.params.slots()
    }

    fn v(&self, i: usize) -> Var {
        self.vars[i]
    }

    fn norm(&self, x: Var, (g, b): (usize, usize)) -> Var {
        self.tape.layer_norm(x, self.v(g), self.v(b), LN_EPS)
    }

    fn affine(&self, x: Var, w: usize, b: usize) -> Var {
        let m = self.tape.matmul(x, self.v(w));
        self.tape.add_row(m, self.v(b))
    }

    fn layer(&self, x: Var, s: &LayerSlots, layout: &SeqLayout, drop: &Dropout) -> Var {
        let t = self.tape;
        let a = self.norm(x, s.ln1);
        let q = self.affine(a, s.wq, s.bq);
        let k = self.affine(a, s.wk, s.bk);
        let v = self.affine(a, s.wv, s.bv);
        let att = t.causal_attention(q, k, v, layout, self.params.config.heads);
        let o = self.affine(att, s.wo, s.bo);
        let x = t.add(x, drop.apply(t, o, layout));
        let b = self.norm(x, s.ln2);
        let f = t.gelu(self.affine(b, s.w1, s.b1));
        let f = self.affine(f, s.w2, s.b2);
        t.add(x, drop.apply(t, f, layout))
    }

    pub fn block(&self, x: Var, block: &BlockSlots, layout: &SeqLayout, drop: &Dropout) -> Var {
        let mut x = x;
        for s in &block.layers {
            x = self.layer(x, s, layout, drop);
        }
        match block.final_ln {
            Some(ln) => self.norm(x, ln),
            None => x,
        }
    }

    /// Item plus position embeddings.
    pub fn embed(&self, batch: &PackedBatch) -> Var {
        let s = self.slots();
        let e = self.tape.gather_rows(self.v(s.item_embedding), &batch.items);
        let p = self.tape.gather_rows(self.v(s.position_embedding), &batch.positions);
        self.tape.add(e, p)
    }

    /// Anchor `H = pre(embed(x))`.
    pub fn encode(&self, batch: &PackedBatch, drop: &Dropout) -> Var {
        let x = self.embed(batch);
        self.block(x, &self.slots().pre, &batch.layout, drop)
    }

    /// `T_next = core(LN(f(T_prev, H)))`.
    pub fn core_step(&self, t_prev: Var, h: Var, layout: &SeqLayout, drop: &Dropout) -> Result<Var> {
        let (ts, hs) = (self.tape.shape(t_prev), self.tape.shape(h));
        if ts != hs {
            return Err(Error::ShapeMismatch { expected: format!("{hs:?}"), found: format!("{ts:?}") });
        }
        let merged = match (self.params.config.aggregation, self.slots().merge) {
            (Aggregation::Add, _) => self.tape.add(t_prev, h),
            (Aggregation::Concat, Some((w, b))) => {
                let cat = self.tape.concat_cols(t_prev, h);
                self.affine(cat, w, b)
            }
            (Aggregation::Concat, None) => unreachable!("concat layout always has merge tensors"),
        };
        let m = self.norm(merged, self.slots().recur_ln);
        Ok(self.block(m, &self.slots().core, layout, drop))
    }

    /// Runs `depth` core steps from the given initial state.
    pub fn unroll(&self, batch: &PackedBatch, t0: Tensor, depth: usize, drop: &Dropout) -> Result<Unrolled> {
        if depth == 0 {
            return Err(Error::contract("depth must be >= 1"));
        }
        let layout = &batch.layout;
        let h = self.encode(batch, drop);
        // steps at or before `cut` are detached when truncation is on
        let cut = self.params.config.backprop_steps.map_or(0, |m| depth.saturating_sub(m));
        let mut t = self.tape.constant(t0);
        let mut states = Vec::with_capacity(depth);
        for step in 1..=depth {
            t = self.core_step(t, h, layout, drop)?;
            if step <= cut {
                let detached = self.tape.value(t).clone();
                t = self.tape.constant(detached);
            }
            states.push(t);
        }
        Ok(Unrolled { layout: layout.clone(), h, states })
    }

    /// `p · Eᵀ` for each row of `p`.
    pub fn logits(&self, p: Var) -> Var {
        self.tape.matmul_nt(p, self.v(self.slots().item_embedding))
    }
}

/// `T_0` rows for every segment, each drawn from its own seed.
pub fn initial_states(params: &ModelParameters, layout: &SeqLayout, seeds: &[u64]) -> Tensor {
    assert_eq!(seeds.len(), layout.len(), "one state seed per segment");
    let d = params.config.embed_dim;
    let mut t0 = Array2::zeros((layout.rows(), d));
    for (&(start, len), &seed) in layout.segments().iter().zip(seeds) {
        t0.slice_mut(ndarray::s![start..start + len, ..]).assign(&init_state(params, len, seed));
    }
    t0
}

/// `T_0 ~ N(0, σ₁²)` of shape `n × d`.
pub fn init_state(params: &ModelParameters, n: usize, seed: u64) -> Tensor {
    normal_matrix(n, params.config.embed_dim, params.config.sigma1, &mut rng_from(seed))
}

/// Everything needed to reproduce one trajectory exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub state_seed: u64,
    pub depth: usize,
    pub dropout_seed: Option<u64>,
}

/// States `T_0..T_k` of a single input.
#[derive(Debug, Clone, PartialEq)]
pub struct ReasoningTrajectory {
    pub h: Tensor,
    pub states: Vec<Tensor>,
    pub seed: SeedRecord,
}

impl ReasoningTrajectory {
    pub fn depth(&self) -> usize {
        self.states.len() - 1
    }

    /// Last-position row of `T_step`.
    pub fn repr_at(&self, step: usize) -> Array1<f64> {
        let t = &self.states[step];
        t.row(t.nrows() - 1).to_owned()
    }

    pub fn final_repr(&self) -> Array1<f64> {
        self.repr_at(self.depth())
    }
}

fn dropout_for(params: &ModelParameters, seed: Option<u64>) -> Dropout {
    match seed {
        Some(s) => Dropout::new(params.config.dropout, vec![s]),
        None => Dropout::off(),
    }
}

/// Anchor of one sequence with dropout off.
pub fn encode_input(params: &ModelParameters, input: &[usize]) -> Result<Tensor> {
    let batch = PackedBatch::new(&[input], params.num_items, params.config.max_len)?;
    let tape = Tape::new();
    let bound = Bound::new(&tape, params, false);
    let h = bound.encode(&batch, &Dropout::off());
    let out = tape.value(h).clone();
    Ok(out)
}

/// One recurrence step on plain tensors with dropout off.
pub fn core_step(params: &ModelParameters, t_prev: &Tensor, h: &Tensor) -> Result<Tensor> {
    if t_prev.dim() != h.dim() {
        return Err(Error::ShapeMismatch { expected: format!("{:?}", h.dim()), found: format!("{:?}", t_prev.dim()) });
    }
    let tape = Tape::new();
    let bound = Bound::new(&tape, params, false);
    let layout = SeqLayout::from_lengths([h.nrows()]);
    let (t, hv) = (tape.constant(t_prev.clone()), tape.constant(h.clone()));
    let next = bound.core_step(t, hv, &layout, &Dropout::off())?;
    let out = tape.value(next).clone();
    Ok(out)
}

/// Runs `k` steps from a freshly drawn initial state, dropout off.
pub fn reason(params: &ModelParameters, input: &[usize], k: usize, rng: &mut impl Rng) -> Result<ReasoningTrajectory> {
    let record = SeedRecord { state_seed: rng.random(), depth: k, dropout_seed: None };
    replay(params, input, &record)
}

/// Recomputes a trajectory from its seed record.
pub fn replay(params: &ModelParameters, input: &[usize], record: &SeedRecord) -> Result<ReasoningTrajectory> {
    let batch = PackedBatch::new(&[input], params.num_items, params.config.max_len)?;
    let tape = Tape::new();
    let bound = Bound::new(&tape, params, false);
    let t0 = init_state(params, input.len(), record.state_seed);
    let drop = dropout_for(params, record.dropout_seed);
    let run = bound.unroll(&batch, t0.clone(), record.depth, &drop)?;
    let mut states = vec![t0];
    states.extend(run.states.iter().map(|&s| tape.value(s).clone()));
    let h = tape.value(run.h).clone();
    Ok(ReasoningTrajectory { h, states, seed: *record })
}

/// Logits over the whole catalog: `E · p`.
pub fn score(params: &ModelParameters, p: &Array1<f64>) -> Result<Array1<f64>> {
    let e = params.item_embeddings();
    if p.len() != e.ncols() {
        return Err(Error::ShapeMismatch { expected: format!("{}", e.ncols()), found: format!("{}", p.len()) });
    }
    Ok(e.dot(p))
}

/// Final representations (`B × d`) for a batch, dropout off.
pub fn batch_final_repr<S: AsRef<[usize]>>(
    params: &ModelParameters,
    inputs: &[S],
    depth: usize,
    state_seeds: &[u64],
) -> Result<Tensor> {
    let batch = PackedBatch::new(inputs, params.num_items, params.config.max_len)?;
    let tape = Tape::new();
    let bound = Bound::new(&tape, params, false);
    let t0 = initial_states(params, &batch.layout, state_seeds);
    let run = bound.unroll(&batch, t0, depth, &Dropout::off())?;
    let p = run.final_repr(&tape);
    let out = tape.value(p).clone();
    Ok(out)
}

/// Catalog logits (`B × N`) for a batch, dropout off.
pub fn batch_logits<S: AsRef<[usize]>>(
    params: &ModelParameters,
    inputs: &[S],
    depth: usize,
    state_seeds: &[u64],
) -> Result<Tensor> {
    let p = batch_final_repr(params, inputs, depth, state_seeds)?;
    Ok(p.dot(&params.item_embeddings().t()))
}

/// Per-step last-position representations `[B × d; depth]`, dropout off.
pub fn batch_step_reprs<S: AsRef<[usize]>>(
    params: &ModelParameters,
    inputs: &[S],
    depth: usize,
    state_seeds: &[u64],
) -> Result<Vec<Tensor>> {
    let batch = PackedBatch::new(inputs, params.num_items, params.config.max_len)?;
    let tape = Tape::new();
    let bound = Bound::new(&tape, params, false);
    let t0 = initial_states(params, &batch.layout, state_seeds);
    let run = bound.unroll(&batch, t0, depth, &Dropout::off())?;
    let last = batch.layout.last_rows();
    Ok(run.states.iter().map(|&s| tape.value(s).select(Axis(0), &last)).collect())
}
