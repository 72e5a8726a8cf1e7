//! Site × label stratified train/validation/test assignment.
//!
//! Allocation happens in two rounding stages so that per-site counts and
//! global counts are both exact integers as close to the ideal as possible:
//!
//! 1. Global split sizes by largest remainder over `N · fraction`.
//! 2. A site × split table rounded so rows sum to site sizes, columns sum to
//!    the global sizes, and every cell is the floor or ceiling of
//!    `site_size · fraction` (controlled rounding, solved as a small flow).
//! 3. Inside each site, the same rounding splits the site's allocation
//!    between the two labels.
//!
//! Each (site, label) group is sorted by id, shuffled with a stream derived
//! from the group name, and cut into consecutive train/val/test runs.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Label, SubjectRecord};
use crate::error::{Error, Result};
use crate::numcore::SeededRng;

pub const DEFAULT_FRACTIONS: [f64; 3] = [0.70, 0.15, 0.15];

const FRAC_EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// subject_id → split. Serializes as a JSON object in id order.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SplitAssignment(BTreeMap<String, Split>);

impl SplitAssignment {
    pub fn get(&self, subject_id: &str) -> Option<Split> {
        self.0.get(subject_id).copied()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn ids(&self, split: Split) -> Vec<&str> {
        self.0
            .iter()
            .filter(|(_, s)| **s == split)
            .map(|(id, _)| id.as_str())
            .collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.0.values().filter(|s| **s == split).count()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Split)> {
        self.0.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Integer apportionment of `total` by `weights` (which sum to 1): floors
/// first, then one extra unit to the largest fractional parts, ties to the
/// earlier index.
pub fn largest_remainder(total: usize, weights: &[f64]) -> Vec<usize> {
    let quotas: Vec<f64> = weights.iter().map(|w| w * total as f64).collect();
    let mut out: Vec<usize> = quotas.iter().map(|q| (q + FRAC_EPS).floor() as usize).collect();
    let assigned: usize = out.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    let frac = |k: usize| (quotas[k] - out[k] as f64).max(0.0);
    order.sort_by(|&a, &b| frac(b).total_cmp(&frac(a)).then(a.cmp(&b)));
    for &k in order.iter().take(total.saturating_sub(assigned)) {
        out[k] += 1;
    }
    out
}

/// Rounds a real table to integers with prescribed integer row and column
/// totals, moving every cell to its floor or ceiling.
///
/// Cells start at their floors; the remaining units are placed by augmenting
/// paths on the bipartite graph of rows and columns whose edges are the cells
/// with a fractional part. Larger fractional parts are tried first.
pub fn controlled_round(quotas: &[Vec<f64>], row_totals: &[usize], col_totals: &[usize]) -> Result<Vec<Vec<usize>>> {
    let rows = quotas.len();
    let cols = col_totals.len();
    let mut table: Vec<Vec<usize>> = quotas
        .iter()
        .map(|r| r.iter().map(|q| (q + FRAC_EPS).floor().max(0.0) as usize).collect())
        .collect();
    let open: Vec<Vec<bool>> = quotas
        .iter()
        .zip(&table)
        .map(|(q, t)| q.iter().zip(t).map(|(q, &f)| q - f as f64 > FRAC_EPS).collect())
        .collect();
    let mut row_need: Vec<i64> = (0..rows)
        .map(|r| row_totals[r] as i64 - table[r].iter().sum::<usize>() as i64)
        .collect();
    let mut col_need: Vec<i64> = (0..cols)
        .map(|k| col_totals[k] as i64 - table.iter().map(|r| r[k]).sum::<usize>() as i64)
        .collect();
    if row_need.iter().chain(&col_need).any(|&d| d < 0) || row_need.iter().sum::<i64>() != col_need.iter().sum::<i64>() {
        return Err(Error::Contract("controlled rounding: totals inconsistent with quotas".into()));
    }

    // extra[r][k] == true once cell (r, k) has been rounded up
    let mut extra = vec![vec![false; cols]; rows];
    let col_order: Vec<Vec<usize>> = quotas
        .iter()
        .zip(&table)
        .map(|(q, t)| {
            let mut ks: Vec<usize> = (0..cols).collect();
            ks.sort_by(|&a, &b| (q[b] - t[b] as f64).total_cmp(&(q[a] - t[a] as f64)).then(a.cmp(&b)));
            ks
        })
        .collect();

    fn augment(
        r: usize,
        open: &[Vec<bool>],
        extra: &mut [Vec<bool>],
        col_need: &mut [i64],
        col_order: &[Vec<usize>],
        visited: &mut [bool],
    ) -> bool {
        for &k in &col_order[r] {
            if !open[r][k] || extra[r][k] || visited[k] {
                continue;
            }
            visited[k] = true;
            if col_need[k] > 0 {
                col_need[k] -= 1;
                extra[r][k] = true;
                return true;
            }
            // column k is full: try to move one of its units elsewhere
            for r2 in 0..extra.len() {
                if extra[r2][k] && augment(r2, open, extra, col_need, col_order, visited) {
                    extra[r2][k] = false;
                    extra[r][k] = true;
                    return true;
                }
            }
        }
        false
    }

    for r in 0..rows {
        while row_need[r] > 0 {
            let mut visited = vec![false; cols];
            if !augment(r, &open, &mut extra, &mut col_need, &col_order, &mut visited) {
                return Err(Error::Contract("controlled rounding has no feasible solution".into()));
            }
            row_need[r] -= 1;
        }
    }
    for r in 0..rows {
        for k in 0..cols {
            if extra[r][k] {
                table[r][k] += 1;
            }
        }
    }
    Ok(table)
}

/// Site × label stratified assignment with exact global split sizes.
pub fn stratified_split(records: &[SubjectRecord], fractions: [f64; 3], rng: &SeededRng) -> Result<SplitAssignment> {
    if fractions.iter().any(|f| *f < 0.0 || !f.is_finite()) {
        return Err(Error::InvalidParameter(format!("split fractions must be >= 0, got {fractions:?}")));
    }
    if (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidParameter(format!("split fractions must sum to 1, got {fractions:?}")));
    }

    // site → label → ids
    let mut groups: BTreeMap<&str, BTreeMap<Label, Vec<&str>>> = BTreeMap::new();
    for r in records {
        if r.site_id.is_empty() {
            return Err(Error::InvalidParameter(format!("subject {} has no site_id", r.subject_id)));
        }
        groups
            .entry(r.site_id.as_str())
            .or_default()
            .entry(r.label)
            .or_default()
            .push(r.subject_id.as_str());
    }

    let global = largest_remainder(records.len(), &fractions);
    let sites: Vec<&str> = groups.keys().copied().collect();
    let site_sizes: Vec<usize> = groups.values().map(|g| g.values().map(Vec::len).sum()).collect();
    let site_quotas: Vec<Vec<f64>> = site_sizes
        .iter()
        .map(|&n| fractions.iter().map(|f| f * n as f64).collect())
        .collect();
    let site_table = controlled_round(&site_quotas, &site_sizes, &global)?;

    let mut out = BTreeMap::new();
    for (s, site) in sites.iter().enumerate() {
        let by_label = &groups[site];
        let n_site = site_sizes[s] as f64;
        let labels: Vec<Label> = by_label.keys().copied().collect();
        let label_sizes: Vec<usize> = by_label.values().map(Vec::len).collect();
        let quotas: Vec<Vec<f64>> = label_sizes
            .iter()
            .map(|&n| site_table[s].iter().map(|&a| n as f64 * a as f64 / n_site).collect())
            .collect();
        let label_table = controlled_round(&quotas, &label_sizes, &site_table[s])?;

        for (l, label) in labels.iter().enumerate() {
            let mut ids = by_label[label].clone();
            ids.sort_unstable();
            rng.child(&format!("split/{site}/{label}")).shuffle(&mut ids);
            let mut it = ids.into_iter();
            for (k, split) in Split::ALL.iter().enumerate() {
                for id in it.by_ref().take(label_table[l][k]) {
                    out.insert(id.to_string(), *split);
                }
            }
        }
    }
    Ok(SplitAssignment(out))
}
