//! Forward latency versus reasoning depth, and metric-versus-depth tables.

use std::time::Instant;

use super::report::Table;
use crate::corpus::SplitInstance;
use crate::error::{Error, Result};
use crate::evalrank::{evaluate, metric_names};
use crate::reasoner::{batch_logits, ModelParameters};
use crate::rng::derive_seed;

pub const DEFAULT_BENCH_BATCH: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatencyRow {
    pub depth: usize,
    /// Fastest observed seconds per forward pass.
    pub secs: f64,
    /// `secs` over the first row's `secs`.
    pub ratio: f64,
}

/// Fastest wall-clock time of a full-catalog forward pass over `inputs` at
/// each depth. Depths are interleaved within every repeat so slow drift in
/// machine speed hits all of them alike.
pub fn measure_latency(
    params: &ModelParameters,
    inputs: &[Vec<usize>],
    depths: &[usize],
    repeats: usize,
) -> Result<Vec<LatencyRow>> {
    if inputs.is_empty() || depths.is_empty() || repeats == 0 {
        return Err(Error::contract("latency needs inputs, depths and at least one repeat"));
    }
    let seeds: Vec<u64> = (0..inputs.len() as u64).map(|i| derive_seed(0xBE4C, &[i])).collect();
    batch_logits(params, inputs, depths[0], &seeds)?;
    let mut best = vec![f64::INFINITY; depths.len()];
    for _ in 0..repeats {
        for (i, &depth) in depths.iter().enumerate() {
            let start = Instant::now();
            let out = batch_logits(params, inputs, depth, &seeds)?;
            std::hint::black_box(&out);
            best[i] = best[i].min(start.elapsed().as_secs_f64());
        }
    }
    Ok(depths.iter().zip(&best).map(|(&depth, &secs)| LatencyRow { depth, secs, ratio: secs / best[0] }).collect())
}

/// Least-squares `y ≈ a + b·x`; returns `(a, b, r²)`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Result<(f64, f64, f64)> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::contract("a fit needs at least two aligned points"));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::contract("a fit needs at least two distinct x values"));
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let b = sxy / sxx;
    let a = my - b * mx;
    let ss_tot: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let ss_res: f64 = xs.iter().zip(ys).map(|(x, y)| (y - a - b * x).powi(2)).sum();
    let r2 = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    Ok((a, b, r2))
}

pub fn latency_table(rows: &[LatencyRow]) -> Table {
    Table {
        columns: vec!["depth".into(), "secs".into(), "ratio".into()],
        rows: rows.iter().map(|r| vec![r.depth as f64, r.secs, r.ratio]).collect(),
    }
}

/// Evaluates one checkpoint at several inference depths.
pub fn depth_table(params: &ModelParameters, instances: &[SplitInstance], depths: &[usize], ks: &[usize]) -> Result<Table> {
    let names = metric_names(ks);
    let mut columns = vec!["depth".to_string()];
    columns.extend(names.iter().map(|n| n.to_string()));
    let mut rows = Vec::with_capacity(depths.len());
    for &depth in depths {
        let report = evaluate(params, instances, ks, depth)?;
        let mut row = vec![depth as f64];
        row.extend(names.iter().map(|&n| report.get(n).unwrap_or(f64::NAN)));
        rows.push(row);
    }
    Ok(Table { columns, rows })
}

/// Bench inputs: the first `batch` instances, cycled when fewer exist.
pub fn bench_inputs(instances: &[SplitInstance], batch: usize) -> Vec<Vec<usize>> {
    instances.iter().cycle().take(batch).map(|s| s.input.clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reasoner::ArchitectureConfig;

    #[test]
    fn fit_examples() {
        let (a, b, r2) = linear_fit(&[1.0, 2.0, 3.0, 4.0], &[3.0, 5.0, 7.0, 9.0]).unwrap();
        assert!((a - 1.0).abs() < 1e-12 && (b - 2.0).abs() < 1e-12 && (r2 - 1.0).abs() < 1e-12);
        let (_, _, r2) = linear_fit(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
        assert!((r2 - 0.64).abs() < 1e-12);
        assert!(linear_fit(&[1.0, 1.0], &[1.0, 2.0]).is_err());
        assert!(linear_fit(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn latency_rows_are_relative_to_first_depth() {
        let cfg = ArchitectureConfig { embed_dim: 8, ffn_dim: 16, max_len: 6, ..Default::default() };
        let params = ModelParameters::init(&cfg, 20, 1).unwrap();
        let inputs = vec![vec![1, 2, 3], vec![4, 5]];
        let rows = measure_latency(&params, &inputs, &[1, 2, 4], 3).unwrap();
        assert_eq!(rows.iter().map(|r| r.depth).collect::<Vec<_>>(), [1, 2, 4]);
        assert_eq!(rows[0].ratio, 1.0);
        assert!(rows.iter().all(|r| r.secs > 0.0));
        let t = latency_table(&rows);
        assert_eq!(t.column("depth").unwrap(), [1.0, 2.0, 4.0]);
    }
}
