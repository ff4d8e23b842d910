use ndarray::{array, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

/// Compares tape gradients against central differences for every input.
fn check<F>(inputs: Vec<Tensor>, build: F)
where
    F: Fn(&Tape, &[Var]) -> Var,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&tape, &vars);
    let grads = tape.backward(out);

    let eval = |inputs: &[Tensor]| {
        let t = Tape::new();
        let vs: Vec<Var> = inputs.iter().map(|x| t.constant(x.clone())).collect();
        let o = build(&t, &vs);
        t.scalar(o)
    };

    let h = 1e-6;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).cloned().unwrap_or_else(|| Array2::zeros(input.dim()));
        for idx in 0..input.len() {
            let (r, c) = (idx / input.ncols(), idx % input.ncols());
            let mut plus = inputs.clone();
            plus[i][[r, c]] += h;
            let mut minus = inputs.clone();
            minus[i][[r, c]] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic[[r, c]];
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            assert!(
                (a - numeric).abs() / denom < 1e-5,
                "input {i} [{r},{c}]: analytic {a} vs numeric {numeric}"
            );
        }
    }
}

/// Weighted sum so every output element carries a distinct gradient.
fn project(tape: &Tape, x: Var, seed: u64) -> Var {
    let (r, c) = tape.shape(x);
    let w = tape.constant(random(r, c, seed));
    let m = tape.mul(x, w);
    tape.sum(m)
}

#[test]
fn matmul_grads() {
    check(vec![random(3, 4, 1), random(4, 2, 2)], |t, v| {
        let m = t.matmul(v[0], v[1]);
        project(t, m, 9)
    });
    check(vec![random(3, 4, 3), random(5, 4, 4)], |t, v| {
        let m = t.matmul_nt(v[0], v[1]);
        project(t, m, 9)
    });
}

#[test]
fn elementwise_grads() {
    check(vec![random(2, 3, 5), random(2, 3, 6)], |t, v| {
        let a = t.add(v[0], v[1]);
        let s = t.sub(a, v[1]);
        let m = t.mul(s, v[1]);
        let e = t.exp(m);
        let g = t.gelu(e);
        let sc = t.scale(g, -0.7);
        let sh = t.add_scalar(sc, 0.3);
        project(t, sh, 10)
    });
}

#[test]
fn row_ops_grads() {
    check(vec![random(4, 3, 7), random(1, 3, 8), random(2, 3, 11)], |t, v| {
        let a = t.add_row(v[0], v[1]);
        let g = t.gather_rows(a, &[3, 0, 0, 2]);
        let r = t.concat_rows(g, v[2]);
        let c = t.concat_cols(r, r);
        let mask = random(6, 6, 12);
        let d = t.mul_const(c, mask);
        project(t, d, 13)
    });
}

#[test]
fn layer_norm_grads() {
    check(vec![random(3, 5, 14), random(1, 5, 15), random(1, 5, 16)], |t, v| {
        let y = t.layer_norm(v[0], v[1], v[2], 1e-5);
        project(t, y, 17)
    });
}

#[test]
fn softmax_family_grads() {
    check(vec![random(3, 6, 18)], |t, v| {
        let p = t.log_softmax_pick(v[0], &[0, 5, 2]);
        project(t, p, 19)
    });
    check(vec![random(3, 6, 20)], |t, v| {
        let p = t.log_softmax(v[0]);
        project(t, p, 21)
    });
    check(vec![random(3, 4, 22)], |t, v| {
        let n = t.l2_normalize_rows(v[0], 1e-12);
        let m = t.mean(n);
        let s = t.sum(n);
        let both = t.concat_rows(m, s);
        project(t, both, 23)
    });
}

#[test]
fn clamp_and_minimum_grads() {
    // values kept away from the kinks so central differences are exact
    let a = array![[0.5, 1.5, 0.9], [1.1, 0.7, 1.3]];
    let b = array![[0.6, 1.25, 0.2], [1.4, 0.1, 2.0]];
    check(vec![a, b], |t, v| {
        let c = t.clamp(v[0], 0.8, 1.2);
        let m = t.minimum(c, v[1]);
        project(t, m, 24)
    });
}

#[test]
fn attention_grads_and_masking() {
    let layout = SeqLayout::from_lengths([3, 1, 4]);
    let rows = layout.rows();
    check(vec![random(rows, 4, 25), random(rows, 4, 26), random(rows, 4, 27)], |t, v| {
        let o = t.causal_attention(v[0], v[1], v[2], &layout, 2);
        project(t, o, 28)
    });

    // row i never depends on later rows nor on other segments
    let (q, k, v) = (random(rows, 4, 29), random(rows, 4, 30), random(rows, 4, 31));
    let base = {
        let t = Tape::new();
        let (a, b, c) = (t.constant(q.clone()), t.constant(k.clone()), t.constant(v.clone()));
        let o = t.causal_attention(a, b, c, &layout, 2);
        let out = t.value(o).clone();
        out
    };
    let mut k2 = k.clone();
    let mut v2 = v.clone();
    for c in 0..4 {
        k2[[2, c]] += 5.0;
        v2[[2, c]] -= 3.0;
    }
    let t = Tape::new();
    let (a, b, c) = (t.constant(q), t.constant(k2), t.constant(v2));
    let o = t.causal_attention(a, b, c, &layout, 2);
    let changed = t.value(o).clone();
    for r in [0usize, 1, 3, 4, 5, 6, 7] {
        assert_eq!(base.row(r), changed.row(r), "row {r} leaked");
    }
    assert_ne!(base.row(2), changed.row(2));
}

#[test]
fn constants_get_no_gradient() {
    let t = Tape::new();
    let p = t.param(random(2, 2, 32));
    let c = t.constant(random(2, 2, 33));
    let m = t.mul(p, c);
    let s = t.sum(m);
    let g = t.backward(s);
    assert!(g.get(p).is_some());
    assert!(g.get(c).is_none());
}

#[test]
fn layout_helpers() {
    let l = SeqLayout::from_lengths([2, 3]);
    assert_eq!(l.rows(), 5);
    assert_eq!(l.last_rows(), vec![1, 4]);
    assert_eq!(l.positions(), vec![0, 1, 0, 1, 2]);
    assert_eq!(l.repeated(2).last_rows(), vec![1, 4, 6, 9]);
}
