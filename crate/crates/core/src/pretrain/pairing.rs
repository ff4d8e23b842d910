use std::collections::HashMap;

use rand::seq::IndexedRandom;
use rand::Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Partner {
    /// Main-pass representation of another batch instance with the same
    /// target.
    SameTarget(usize),
    /// A second stochastic pass over the instance's own input.
    SecondPass,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PositivePairing {
    pub partners: Vec<Partner>,
    /// Depth shared by both members of every pair.
    pub depth: usize,
}

impl PositivePairing {
    /// Instances that need a second pass, in batch order.
    pub fn second_pass_members(&self) -> Vec<usize> {
        (0..self.partners.len()).filter(|&i| self.partners[i] == Partner::SecondPass).collect()
    }

    /// Row of each partner in `[main rows; second-pass rows]`.
    pub fn partner_rows(&self) -> Vec<usize> {
        let n = self.partners.len();
        let mut next_second = n;
        self.partners
            .iter()
            .map(|p| match *p {
                Partner::SameTarget(j) => j,
                Partner::SecondPass => {
                    next_second += 1;
                    next_second - 1
                }
            })
            .collect()
    }
}

/// Pairs every instance with a same-target batch mate when one exists,
/// otherwise with a second pass of itself.
pub fn select_positive_pairs(targets: &[usize], depth: usize, rng: &mut impl Rng) -> Result<PositivePairing> {
    if targets.is_empty() {
        return Err(Error::contract("cannot pair an empty batch"));
    }
    let mut by_target: HashMap<usize, Vec<usize>> = HashMap::new();
    for (i, &t) in targets.iter().enumerate() {
        by_target.entry(t).or_default().push(i);
    }
    let partners = targets
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let mates: Vec<usize> = by_target[t].iter().copied().filter(|&j| j != i).collect();
            match mates.choose(rng) {
                Some(&j) => Partner::SameTarget(j),
                None => Partner::SecondPass,
            }
        })
        .collect();
    Ok(PositivePairing { partners, depth })
}

/// Both members of a pair must have been unrolled to the same depth.
pub fn check_shared_depth(main: usize, partner: usize) -> Result<()> {
    if main != partner {
        return Err(Error::contract(format!("positive pair depth mismatch: {main} vs {partner}")));
    }
    Ok(())
}
