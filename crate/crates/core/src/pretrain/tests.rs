use std::cell::Cell;

use ndarray::{array, Array1, Array2};
use proptest::prelude::*;

use super::*;
use crate::corpus::{build_dataset, synthetic_events, Split};
use crate::evalrank::MetricName;
use crate::reasoner::{batch_step_reprs, Aggregation};

/// Literal per-instance InfoNCE sums, independent of the batched kernels.
fn direct_symmetric(a: &Tensor, b: &Tensor, tau: f64) -> f64 {
    let f = |x: Array1<f64>, pos: usize, cands: &Tensor| {
        let num = (x.dot(&cands.row(pos)) / tau).exp();
        let den: f64 = cands.rows().into_iter().map(|y| (x.dot(&y) / tau).exp()).sum();
        -(num / den).ln()
    };
    let n = a.nrows();
    (0..n).map(|i| 0.5 * (f(a.row(i).to_owned(), i, b) + f(b.row(i).to_owned(), i, a))).sum::<f64>() / n as f64
}

fn fixture() -> (Tensor, Tensor) {
    let p = array![[0.3, -1.2, 0.5], [1.1, 0.4, -0.7], [-0.6, 0.9, 0.2], [0.05, -0.3, 1.4]];
    let q = array![[0.2, -0.8, 0.9], [1.3, 0.1, -0.2], [-0.4, 1.2, -0.5], [0.7, -0.6, 1.0]];
    (p, q)
}

#[test]
fn rec_loss_examples() {
    let uniform = Array1::zeros(100);
    assert!((rec_loss(uniform.view(), 17).unwrap() - 4.605_170_185_988_091).abs() < 1e-6);
    assert!((rec_loss(array![1.0, 0.0].view(), 0).unwrap() - 0.313_261_687_518_222_8).abs() < 1e-9);
    let mut prev = f64::INFINITY;
    for margin in [0.0, 1.0, 2.0, 5.0, 10.0, 30.0] {
        let l = rec_loss(array![margin, 0.0, 0.0].view(), 0).unwrap();
        assert!(l < prev && l >= 0.0);
        prev = l;
    }
    assert!(prev < 1e-12);
    assert!(matches!(rec_loss(array![f64::NAN, 0.0].view(), 0), Err(Error::Numeric(_))));
}

#[test]
fn info_nce_examples() {
    let x = array![1.0, 0.0];
    let single = array![[0.3, 0.7]];
    assert_eq!(info_nce(x.view(), 0, &single, 1.0, Similarity::Dot).unwrap(), 0.0);
    let equal = array![[0.0, 1.0], [0.0, 2.0], [0.0, -1.0], [0.0, 5.0]];
    assert!((info_nce(x.view(), 2, &equal, 1.0, Similarity::Dot).unwrap() - 4f64.ln()).abs() < 1e-12);
    let two = array![[1.0, 0.0], [0.0, 1.0]];
    assert!((info_nce(x.view(), 0, &two, 1.0, Similarity::Dot).unwrap() - 0.313_261_687_518_222_8).abs() < 1e-12);
    assert!(info_nce(x.view(), 0, &Array2::zeros((0, 2)), 1.0, Similarity::Dot).is_err());
}

#[test]
fn tla_matches_direct_summation() {
    let (p, q) = fixture();
    // values frozen from the direct-summation oracle
    let dot1 = symmetric_nce_value(&p, &q, 1.0, Similarity::Dot).unwrap();
    assert!((dot1 - 0.599_350_460_360_639).abs() < 1e-6);
    assert!((dot1 - direct_symmetric(&p, &q, 1.0)).abs() < 1e-12);
    let dot_half = symmetric_nce_value(&p, &q, 0.5, Similarity::Dot).unwrap();
    assert!((dot_half - 0.380_512_820_707_850).abs() < 1e-6);
    let cos = symmetric_nce_value(&p, &q, 0.2, Similarity::Cosine).unwrap();
    assert!((cos - 0.320_998_067_135_400).abs() < 1e-6);
}

#[test]
fn tla_degenerate_cases() {
    let one = array![[0.4, -2.0, 1.0]];
    assert_eq!(symmetric_nce_value(&one, &array![[3.0, 1.0, 0.0]], 1.0, Similarity::Dot).unwrap(), 0.0);
    // all-zero representations make every similarity equal
    let zeros = Array2::zeros((5, 3));
    let v = symmetric_nce_value(&zeros, &zeros, 1.0, Similarity::Dot).unwrap();
    assert!((v - 5f64.ln()).abs() < 1e-12);
    assert!(symmetric_nce_value(&zeros, &Array2::zeros((4, 3)), 1.0, Similarity::Dot).is_err());
}

#[test]
fn sla_matches_direct_summation() {
    let tb = array![[0.5, 0.1, -0.3], [-1.0, 0.2, 0.8], [0.4, 0.4, 0.4]];
    let tk = array![[0.6, -0.2, 0.1], [-0.7, 0.5, 0.9], [0.0, 1.0, -0.3]];
    let v = symmetric_nce_value(&tb, &tk, 1.0, Similarity::Dot).unwrap();
    assert!((v - 0.736_677_693_308_216).abs() < 1e-6);

    // on a real unroll the loss reads step-b and step-k last-position rows
    let arch = ArchitectureConfig { embed_dim: 4, ffn_dim: 8, dropout: 0.0, max_len: 8, ..Default::default() };
    let params = ModelParameters::init(&arch, 12, 3).unwrap();
    let inputs = vec![vec![1usize, 2, 3], vec![4, 5], vec![6, 7, 8, 9]];
    let seeds = [1u64, 2, 3];
    let steps = batch_step_reprs(&params, &inputs, 3, &seeds).unwrap();
    let tape = Tape::new();
    let bound = Bound::new(&tape, &params, false);
    let packed = PackedBatch::new(&inputs, 12, 8).unwrap();
    let run = bound.unroll(&packed, initial_states(&params, &packed.layout, &seeds), 3, &Dropout::off()).unwrap();
    for b in 1..3 {
        let got = tape.scalar(sla_loss(&tape, &run, b, 1.0, Similarity::Dot).unwrap());
        assert!((got - direct_symmetric(&steps[b - 1], &steps[2], 1.0)).abs() < 1e-9);
    }
    assert!(sla_loss(&tape, &run, 3, 1.0, Similarity::Dot).is_err());
}

#[test]
fn sla_step_sampling() {
    let mut rng = rng_from(4);
    assert_eq!(sample_sla_step(1, &mut rng), None);
    assert!((0..50).all(|_| sample_sla_step(2, &mut rng) == Some(1)));
    let draws: Vec<usize> = (0..2000).map(|_| sample_sla_step(4, &mut rng).unwrap()).collect();
    for b in 1..4 {
        let c = draws.iter().filter(|&&x| x == b).count();
        assert!((550..780).contains(&c), "step {b}: {c}");
    }
}

#[test]
fn objective_examples() {
    assert_eq!(spt_objective(1.3, 7.0, 9.0, 0.0, 0.0), 1.3);
    assert!((spt_objective(1.0, 0.5, 0.2, 0.1, 0.3) - 1.11).abs() < 1e-12);
}

#[test]
fn pairing_rules() {
    let mut rng = rng_from(0);
    let pair = select_positive_pairs(&[7, 7], 3, &mut rng).unwrap();
    assert_eq!(pair.partners, vec![Partner::SameTarget(1), Partner::SameTarget(0)]);
    let distinct = select_positive_pairs(&[1, 2, 3], 2, &mut rng).unwrap();
    assert!(distinct.partners.iter().all(|p| *p == Partner::SecondPass));
    assert_eq!(distinct.partner_rows(), vec![3, 4, 5]);
    let mixed = select_positive_pairs(&[5, 9, 5, 4], 2, &mut rng).unwrap();
    assert_eq!(mixed.partner_rows(), vec![2, 4, 0, 5]);
    assert_eq!(mixed.second_pass_members(), vec![1, 3]);
    assert!(select_positive_pairs(&[], 1, &mut rng).is_err());
    assert!(check_shared_depth(3, 3).is_ok());
    assert!(check_shared_depth(3, 4).is_err());
}

fn toy(users: usize, items: usize) -> (crate::corpus::Splits, usize) {
    let ds = build_dataset(&synthetic_events(users, items, (5, 9), 13), 8);
    (ds.splits().unwrap(), ds.num_items)
}

fn small_arch() -> ArchitectureConfig {
    ArchitectureConfig { embed_dim: 8, ffn_dim: 16, max_len: 8, k_bar: 2, dropout: 0.2, ..Default::default() }
}

#[test]
fn batch_loss_decomposes() {
    let (splits, n) = toy(12, 15);
    let params = ModelParameters::init(&small_arch(), n, 5).unwrap();
    let batch: Vec<&SplitInstance> = splits.train.iter().take(8).collect();
    let full = SptConfig { alpha: 0.3, gamma: 0.5, ..Default::default() };
    let (lf, _) = spt_batch(&params, &batch, &full, 77).unwrap();
    let (lr, _) = spt_batch(&params, &batch, &SptConfig { alpha: 0.0, gamma: 0.0, ..full.clone() }, 77).unwrap();
    let (lt, _) = spt_batch(&params, &batch, &SptConfig { gamma: 0.0, ..full.clone() }, 77).unwrap();
    assert!((lf.total - spt_objective(lf.rec, lf.tla, lf.sla, 0.3, 0.5)).abs() < 1e-12);
    assert!((lr.total - lf.rec).abs() < 1e-12);
    assert!((lt.total - lf.rec - 0.3 * lf.tla).abs() < 1e-12);
    assert!(lf.tla > 0.0 && lf.sla >= 0.0);
}

#[test]
fn spt_loss_finite_difference_spot_check() {
    let (splits, n) = toy(6, 10);
    let arch = ArchitectureConfig { embed_dim: 4, ffn_dim: 6, dropout: 0.3, ..small_arch() };
    let params = ModelParameters::init(&arch, n, 9).unwrap();
    let batch: Vec<&SplitInstance> = splits.train.iter().take(5).collect();
    let cfg = SptConfig { alpha: 0.2, gamma: 0.7, ..Default::default() };
    let (_, grads) = spt_batch(&params, &batch, &cfg, 3).unwrap();
    let h = 1e-6;
    let slots = [params.slots().item_embedding, params.slots().core.layers[0].w1, params.slots().pre.layers[0].wv];
    for slot in slots {
        let g = grads[slot].as_ref().unwrap();
        for (r, c) in [(0, 0), (1, 2), (3, 1)] {
            let mut plus = params.clone();
            plus.tensors_mut()[slot][[r, c]] += h;
            let mut minus = params.clone();
            minus.tensors_mut()[slot][[r, c]] -= h;
            let num = (spt_batch(&plus, &batch, &cfg, 3).unwrap().0.total
                - spt_batch(&minus, &batch, &cfg, 3).unwrap().0.total)
                / (2.0 * h);
            let a = g[[r, c]];
            assert!((a - num).abs() <= 1e-5 * a.abs().max(num.abs()).max(1e-4), "{a} vs {num}");
        }
    }
}

fn flat_report(v: f64) -> MetricsReport {
    MetricsReport::from_values(Split::Valid, 3, 1, &[(MetricName::Ndcg(10), v)])
}

#[test]
fn early_stopping_after_patience_plus_one() {
    let (splits, n) = toy(10, 12);
    let calls = Cell::new(0);
    let cfg = SptConfig { batch_size: 16, patience: 3, max_epochs: 50, ..Default::default() };
    let hooks = TrainHooks {
        validator: Some(Box::new(|_: &ModelParameters| {
            calls.set(calls.get() + 1);
            Ok(flat_report(0.25))
        })),
        on_epoch: None,
    };
    let out = train_spt(&splits.train, &[], n, &small_arch(), &cfg, hooks).unwrap();
    assert_eq!(calls.get(), 4);
    assert_eq!(out.epochs_run, 4);
    assert_eq!(out.best_epoch, 1);
}

#[test]
fn best_checkpoint_is_argmax() {
    let (splits, n) = toy(10, 12);
    let script = [0.1, 0.3, 0.2, 0.5, 0.4, 0.45, 0.1];
    let calls = Cell::new(0);
    let cfg = SptConfig { batch_size: 16, patience: 3, max_epochs: 50, ..Default::default() };
    let hooks = TrainHooks {
        validator: Some(Box::new(|_: &ModelParameters| {
            let i = calls.get();
            calls.set(i + 1);
            Ok(flat_report(script[i]))
        })),
        on_epoch: None,
    };
    let out = train_spt(&splits.train, &[], n, &small_arch(), &cfg, hooks).unwrap();
    assert_eq!(out.best_epoch, 4);
    assert_eq!(out.epochs_run, 7);
    let best_curve = out.curves.iter().map(|r| r.get("valid_NDCG@10").unwrap()).fold(f64::MIN, f64::max);
    assert_eq!(out.best_valid.ndcg10(), best_curve);
}

#[test]
fn divergence_is_reported() {
    let (splits, n) = toy(8, 10);
    let arch = ArchitectureConfig { init_std: 1e200, ..small_arch() };
    let cfg = SptConfig { batch_size: 8, ..Default::default() };
    let hooks = TrainHooks { validator: Some(Box::new(|_: &ModelParameters| Ok(flat_report(0.0)))), on_epoch: None };
    let err = train_spt(&splits.train, &[], n, &arch, &cfg, hooks).unwrap_err();
    assert!(matches!(err, Error::Divergence { epoch: 1, .. }), "{err}");
}

#[test]
fn curves_csv_layout() {
    let rows = vec![
        CurveRow { epoch: 1, columns: vec![("loss".into(), 1.5), ("x".into(), 0.25)] },
        CurveRow { epoch: 2, columns: vec![("loss".into(), 1.0), ("x".into(), 0.5)] },
    ];
    assert_eq!(curves_csv(&rows), "epoch,loss,x\n1,1.5,0.25\n2,1,0.5\n");
}

#[test]
fn concat_aggregation_trains() {
    let (splits, n) = toy(10, 12);
    let arch = ArchitectureConfig { aggregation: Aggregation::Concat, ..small_arch() };
    let cfg = SptConfig { batch_size: 16, max_epochs: 2, ..Default::default() };
    let out = train_spt(&splits.train, &splits.valid, n, &arch, &cfg, TrainHooks::default()).unwrap();
    assert_eq!(out.curves.len(), 2);
    assert!(out.curves.iter().all(|r| r.get("loss").unwrap().is_finite()));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn alignment_is_permutation_invariant(
        vals in proptest::collection::vec(-2.0f64..2.0, 24),
        shift in 1usize..4,
    ) {
        let a = Array2::from_shape_vec((4, 3), vals[..12].to_vec()).unwrap();
        let b = Array2::from_shape_vec((4, 3), vals[12..].to_vec()).unwrap();
        let perm: Vec<usize> = (0..4).map(|i| (i + shift) % 4).collect();
        let (pa, pb) = (a.select(ndarray::Axis(0), &perm), b.select(ndarray::Axis(0), &perm));
        for sim in [Similarity::Dot, Similarity::Cosine] {
            let x = symmetric_nce_value(&a, &b, 0.7, sim).unwrap();
            let y = symmetric_nce_value(&pa, &pb, 0.7, sim).unwrap();
            prop_assert!((x - y).abs() < 1e-10);
            prop_assert!(x >= 0.0);
        }
    }

    #[test]
    fn info_nce_is_nonnegative(vals in proptest::collection::vec(-3.0f64..3.0, 15), pos in 0usize..4) {
        let x = Array1::from(vals[..3].to_vec());
        let c = Array2::from_shape_vec((4, 3), vals[3..].to_vec()).unwrap();
        prop_assert!(info_nce(x.view(), pos, &c, 0.5, Similarity::Dot).unwrap() >= 0.0);
    }
}
