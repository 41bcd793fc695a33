use serde::{Deserialize, Serialize};

use super::thresholds::Thresholds;
use crate::error::{Error, Result};

/// Per-category index sets over a token grid plus their union and
/// complement. Category sets may overlap; `spurious` lists each index once.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpuriousPartition {
    pub total: usize,
    pub fp: Vec<usize>,
    pub gp: Vec<usize>,
    pub ah: Vec<usize>,
    pub reg: Vec<usize>,
    pub spurious: Vec<usize>,
    pub regular: Vec<usize>,
}

fn normalized(set: &[usize], total: usize, name: &str) -> Result<Vec<usize>> {
    let mut v = set.to_vec();
    v.sort_unstable();
    v.dedup();
    if let Some(&bad) = v.last().filter(|&&i| i >= total) {
        return Err(Error::invalid(format!(
            "{name} index {bad} outside a {total}-token grid"
        )));
    }
    Ok(v)
}

/// Combines category sets into a partition of `0..total`.
pub fn build_partition(
    fp: &[usize],
    gp: &[usize],
    ah: &[usize],
    reg: &[usize],
    total: usize,
) -> Result<SpuriousPartition> {
    let fp = normalized(fp, total, "fp")?;
    let gp = normalized(gp, total, "gp")?;
    let ah = normalized(ah, total, "ah")?;
    let reg = normalized(reg, total, "reg")?;
    let mut mask = vec![false; total];
    for &i in fp.iter().chain(&gp).chain(&ah).chain(&reg) {
        mask[i] = true;
    }
    let spurious = (0..total).filter(|&i| mask[i]).collect();
    let regular = (0..total).filter(|&i| !mask[i]).collect();
    Ok(SpuriousPartition {
        total,
        fp,
        gp,
        ah,
        reg,
        spurious,
        regular,
    })
}

impl SpuriousPartition {
    pub fn all_regular(total: usize) -> Self {
        Self {
            total,
            regular: (0..total).collect(),
            ..Default::default()
        }
    }

    pub fn spurious_mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.total];
        for &i in &self.spurious {
            m[i] = true;
        }
        m
    }

    pub fn ratio(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.spurious.len() as f64 / self.total as f64
        }
    }

    pub fn report(&self, grid: [usize; 2], thresholds: &Thresholds) -> PartitionReport {
        PartitionReport {
            grid,
            fp: self.fp.clone(),
            gp: self.gp.clone(),
            ah: self.ah.clone(),
            reg: self.reg.clone(),
            spurious: self.spurious.clone(),
            regular: self.regular.clone(),
            thresholds: thresholds.clone(),
        }
    }
}

/// JSON export of a partition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionReport {
    pub grid: [usize; 2],
    pub fp: Vec<usize>,
    pub gp: Vec<usize>,
    pub ah: Vec<usize>,
    pub reg: Vec<usize>,
    pub spurious: Vec<usize>,
    pub regular: Vec<usize>,
    pub thresholds: Thresholds,
}

impl PartitionReport {
    pub fn into_partition(self) -> Result<SpuriousPartition> {
        let total = self.grid[0] * self.grid[1];
        let p = build_partition(&self.fp, &self.gp, &self.ah, &self.reg, total)?;
        if p.spurious != self.spurious || p.regular != self.regular {
            return Err(Error::invalid(
                "partition report is inconsistent with its category sets",
            ));
        }
        Ok(p)
    }
}
