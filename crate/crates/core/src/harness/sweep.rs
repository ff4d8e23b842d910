//! Cross-product hyperparameter grids over config keys.

use super::config::RunConfig;
use crate::error::{Error, Result};

/// Ordered `(key, values)` axes; cells enumerate the cross product with the
/// last axis varying fastest.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SweepGrid {
    pub axes: Vec<(String, Vec<String>)>,
}

fn axis(key: &str, values: &[&str]) -> (String, Vec<String>) {
    (key.to_string(), values.iter().map(|v| v.to_string()).collect())
}

impl SweepGrid {
    /// Pre-training grid over mean depth and the two alignment weights.
    pub fn spt_default() -> Self {
        Self {
            axes: vec![
                axis("arch.k_bar", &["3", "4", "6"]),
                axis("spt.alpha", &["0.1", "0.2", "0.3"]),
                axis("spt.gamma", &["0.1", "0.3", "0.5", "0.7"]),
            ],
        }
    }

    /// Post-training grid over learning rate and KL weight.
    pub fn rpt_default() -> Self {
        Self { axes: vec![axis("rpt.lr", &["0.0005", "0.0003", "0.0001"]), axis("rpt.beta", &["0.5", "1.0"])] }
    }

    /// Parses one `key=v1,v2,...` axis.
    pub fn parse_axis(s: &str) -> Result<(String, Vec<String>)> {
        let (k, vs) = s.split_once('=').ok_or_else(|| Error::Config(format!("expected key=v1,v2,..., got `{s}`")))?;
        let values: Vec<String> = vs.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect();
        if values.is_empty() {
            return Err(Error::Config(format!("axis `{k}` has no values")));
        }
        Ok((k.trim().to_string(), values))
    }

    pub fn len(&self) -> usize {
        if self.axes.is_empty() {
            0
        } else {
            self.axes.iter().map(|(_, v)| v.len()).product()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cells(&self) -> Vec<Vec<(String, String)>> {
        let mut out: Vec<Vec<(String, String)>> = vec![Vec::new()];
        for (key, values) in &self.axes {
            out = out
                .into_iter()
                .flat_map(|prefix| {
                    values.iter().map(move |v| {
                        let mut cell = prefix.clone();
                        cell.push((key.clone(), v.clone()));
                        cell
                    })
                })
                .collect();
        }
        if self.axes.is_empty() {
            Vec::new()
        } else {
            out
        }
    }

    /// Applies each cell to `base`; fails on the first invalid cell before
    /// anything runs.
    pub fn configs(&self, base: &RunConfig) -> Result<Vec<(String, RunConfig)>> {
        self.cells()
            .into_iter()
            .map(|cell| {
                let mut cfg = base.clone();
                cfg.apply(&cell)?;
                Ok((cell_name(&cell), cfg))
            })
            .collect()
    }
}

/// Directory-safe cell name, e.g. `k_bar=3_alpha=0.1`.
pub fn cell_name(cell: &[(String, String)]) -> String {
    cell.iter()
        .map(|(k, v)| format!("{}={v}", k.rsplit('.').next().unwrap_or(k)))
        .collect::<Vec<_>>()
        .join("_")
}
