//! Segment-confined causal multi-head attention kernels.
//!
//! Rows are packed sequences; head `h` owns columns `h*dh .. (h+1)*dh`.
//! Row `i` of a segment attends to rows `0..=i` of the same segment only.

use ndarray::Array2;

use super::{SeqLayout, Tensor};

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

/// Returns the attention output and the per-(segment, head) probability
/// matrices, ordered `segment * heads + head`.
pub(super) fn forward(q: &Tensor, k: &Tensor, v: &Tensor, layout: &SeqLayout, heads: usize) -> (Tensor, Vec<Tensor>) {
    let width = q.ncols();
    assert!(heads > 0 && width % heads == 0, "width {width} not divisible by {heads} heads");
    let dh = width / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (q, k, v) = (q.as_standard_layout(), k.as_standard_layout(), v.as_standard_layout());
    let (qs, ks, vs) = (
        q.as_slice().expect("contiguous q"),
        k.as_slice().expect("contiguous k"),
        v.as_slice().expect("contiguous v"),
    );
    let mut out = Array2::<f64>::zeros(q.dim());
    let os = out.as_slice_mut().expect("contiguous output");
    let mut probs = Vec::with_capacity(layout.len() * heads);
    let mut scores = Vec::new();

    for &(start, len) in layout.segments() {
        for h in 0..heads {
            let off = h * dh;
            let mut p = Array2::<f64>::zeros((len, len));
            for i in 0..len {
                let qi = &qs[(start + i) * width + off..][..dh];
                scores.clear();
                let mut max = f64::NEG_INFINITY;
                for j in 0..=i {
                    let kj = &ks[(start + j) * width + off..][..dh];
                    let s = dot(qi, kj) * scale;
                    max = max.max(s);
                    scores.push(s);
                }
                let mut total = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    total += *s;
                }
                let orow = &mut os[(start + i) * width + off..][..dh];
                for (j, s) in scores.iter().enumerate() {
                    let pij = s / total;
                    p[[i, j]] = pij;
                    axpy(pij, &vs[(start + j) * width + off..][..dh], orow);
                }
            }
            probs.push(p);
        }
    }
    (out, probs)
}

pub(super) fn backward(
    dout: &Tensor,
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    probs: &[Tensor],
    layout: &SeqLayout,
    heads: usize,
) -> (Tensor, Tensor, Tensor) {
    let width = q.ncols();
    let dh = width / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let dout = dout.as_standard_layout();
    let (q, k, v) = (q.as_standard_layout(), k.as_standard_layout(), v.as_standard_layout());
    let (gs, qs, ks, vs) = (
        dout.as_slice().expect("contiguous grad"),
        q.as_slice().expect("contiguous q"),
        k.as_slice().expect("contiguous k"),
        v.as_slice().expect("contiguous v"),
    );
    let mut dq = Array2::<f64>::zeros(q.dim());
    let mut dk = Array2::<f64>::zeros(q.dim());
    let mut dv = Array2::<f64>::zeros(q.dim());
    let (dqs, dks, dvs) = (
        dq.as_slice_mut().unwrap(),
        dk.as_slice_mut().unwrap(),
        dv.as_slice_mut().unwrap(),
    );
    let mut dscore = Vec::new();

    for (seg, &(start, len)) in layout.segments().iter().enumerate() {
        for h in 0..heads {
            let off = h * dh;
            let p = &probs[seg * heads + h];
            for i in 0..len {
                let gi = &gs[(start + i) * width + off..][..dh];
                dscore.clear();
                let mut weighted = 0.0;
                for j in 0..=i {
                    let pij = p[[i, j]];
                    let vj = &vs[(start + j) * width + off..][..dh];
                    let dp = dot(gi, vj);
                    weighted += dp * pij;
                    dscore.push(dp);
                    axpy(pij, gi, &mut dvs[(start + j) * width + off..][..dh]);
                }
                let qi_row = (start + i) * width + off;
                for (j, dp) in dscore.iter().enumerate() {
                    let ds = p[[i, j]] * (dp - weighted) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj_row = (start + j) * width + off;
                    axpy(ds, &ks[kj_row..][..dh], &mut dqs[qi_row..][..dh]);
                    axpy(ds, &qs[qi_row..][..dh], &mut dks[kj_row..][..dh]);
                }
            }
        }
    }
    (dq, dk, dv)
}
