//! Functional connectivity graphs from ROI time series.
//!
//! A subject's `T × R` time series becomes an `R × R` Pearson correlation
//! matrix, which is sparsified by proportional thresholding: the
//! `k = ceil(density · R(R−1)/2)` pairs with the largest `|r|` become
//! undirected edges carrying their signed `r`. Node features are always the
//! full, unthresholded correlation rows.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::Label;
use crate::error::{Error, Result};
use crate::numcore::{SeededRng, Tensor2};

pub const DEFAULT_DENSITY: f64 = 0.20;

/// One subject's ROI signals: `T` timepoints (rows) by `R` regions (columns).
#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeriesMatrix {
    pub subject_id: String,
    data: Tensor2,
}

impl TimeSeriesMatrix {
    pub fn new(subject_id: impl Into<String>, data: Tensor2) -> Result<Self> {
        if data.rows() < 2 {
            return Err(Error::InvalidParameter(format!(
                "time series needs at least 2 timepoints, got {}",
                data.rows()
            )));
        }
        if data.cols() == 0 {
            return Err(Error::InvalidParameter("time series has no regions".into()));
        }
        if !data.is_finite() {
            return Err(Error::NonFinite("time series contains NaN or infinite values".into()));
        }
        Ok(TimeSeriesMatrix {
            subject_id: subject_id.into(),
            data,
        })
    }

    pub fn timepoints(&self) -> usize {
        self.data.rows()
    }

    pub fn regions(&self) -> usize {
        self.data.cols()
    }

    pub fn data(&self) -> &Tensor2 {
        &self.data
    }

    /// Reads a headerless numeric CSV (one row per timepoint).
    pub fn read_csv(path: &Path, subject_id: impl Into<String>) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| csv_error(path, e))?;
        let mut cols = None;
        let mut data = Vec::new();
        let mut rows = 0;
        for (idx, record) in reader.records().enumerate() {
            let line = idx + 1;
            let record = record.map_err(|e| csv_error(path, e))?;
            if cols.is_some_and(|c| c != record.len()) {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line,
                    message: format!("expected {} columns, found {}", cols.unwrap(), record.len()),
                });
            }
            cols = Some(record.len());
            for field in record.iter() {
                let v: f64 = field.parse().map_err(|_| Error::Parse {
                    path: path.to_path_buf(),
                    line,
                    message: format!("not a number: {field:?}"),
                })?;
                data.push(v);
            }
            rows += 1;
        }
        let cols = cols.ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: "empty time series file".into(),
        })?;
        TimeSeriesMatrix::new(subject_id, Tensor2::from_vec(rows, cols, data)?)
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::with_capacity(self.data.len() * 20);
        for t in 0..self.data.rows() {
            let row: Vec<String> = self.data.row(t).iter().map(|v| v.to_string()).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::io(path, source),
        kind => Error::Parse {
            path: path.to_path_buf(),
            line,
            message: format!("{kind:?}"),
        },
    }
}

/// Symmetric matrix of Pearson coefficients with a unit diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationMatrix(Tensor2);

impl CorrelationMatrix {
    /// Validates symmetry (1e-12), range `[−1, 1]` and an exact unit diagonal.
    pub fn from_tensor(t: Tensor2) -> Result<Self> {
        let n = t.rows();
        if t.cols() != n {
            return Err(Error::Shape {
                op: "correlation matrix",
                lhs: t.shape(),
                rhs: (n, n),
            });
        }
        for i in 0..n {
            if t.get(i, i) != 1.0 {
                return Err(Error::InvalidParameter(format!("diagonal entry {i} is not 1")));
            }
            for j in 0..n {
                let v = t.get(i, j);
                if !(-1.0..=1.0).contains(&v) {
                    return Err(Error::InvalidParameter(format!("entry ({i}, {j}) = {v} outside [-1, 1]")));
                }
                if (v - t.get(j, i)).abs() > 1e-12 {
                    return Err(Error::InvalidParameter(format!("matrix not symmetric at ({i}, {j})")));
                }
            }
        }
        Ok(CorrelationMatrix(t))
    }

    pub fn size(&self) -> usize {
        self.0.rows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0.get(i, j)
    }

    pub fn as_tensor(&self) -> &Tensor2 {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor2 {
        self.0
    }
}

/// Pearson correlation between every pair of columns.
///
/// Two-pass: column means first, then centered cross products. A constant
/// column has no defined correlation; its off-diagonal entries are set to 0
/// and a warning is logged.
pub fn pearson(ts: &TimeSeriesMatrix) -> CorrelationMatrix {
    let x = ts.data();
    let (t, r) = x.shape();
    let mut centered = vec![0.0; t * r];
    let mut ss = vec![0.0; r];
    let mut constant = vec![false; r];
    for j in 0..r {
        let (mut lo, mut hi, mut sum) = (f64::INFINITY, f64::NEG_INFINITY, 0.0);
        for k in 0..t {
            let v = x.get(k, j);
            lo = lo.min(v);
            hi = hi.max(v);
            sum += v;
        }
        constant[j] = lo == hi;
        let mean = sum / t as f64;
        for k in 0..t {
            let c = x.get(k, j) - mean;
            centered[j * t + k] = c;
            ss[j] += c * c;
        }
    }
    let flat: Vec<usize> = (0..r).filter(|&j| constant[j]).collect();
    if !flat.is_empty() {
        log::warn!(
            "subject {}: zero-variance regions {:?}; their correlations are set to 0",
            ts.subject_id,
            flat
        );
    }

    let mut out = Tensor2::identity(r);
    for i in 0..r {
        for j in (i + 1)..r {
            let v = if constant[i] || constant[j] {
                0.0
            } else {
                let ci = &centered[i * t..(i + 1) * t];
                let cj = &centered[j * t..(j + 1) * t];
                let dot: f64 = ci.iter().zip(cj).map(|(a, b)| a * b).sum();
                (dot / (ss[i] * ss[j]).sqrt()).clamp(-1.0, 1.0)
            };
            out.set(i, j, v);
            out.set(j, i, v);
        }
    }
    CorrelationMatrix(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub i: usize,
    pub j: usize,
    pub weight: f64,
}

/// A thresholded, weighted, undirected functional connectivity graph.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConnectomeGraph {
    pub subject_id: String,
    pub label: Option<Label>,
    pub site_id: String,
    node_count: usize,
    density: f64,
    /// Sorted by `(i, j)` with `i < j`.
    edges: Vec<Edge>,
    node_features: Tensor2,
    #[serde(default)]
    augmented: bool,
}

impl ConnectomeGraph {
    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn edge_pairs(&self) -> Vec<(usize, usize)> {
        self.edges.iter().map(|e| (e.i, e.j)).collect()
    }

    pub fn node_features(&self) -> &Tensor2 {
        &self.node_features
    }

    pub fn density(&self) -> f64 {
        self.density
    }

    /// True for graphs produced by [`augment_gaussian`].
    pub fn is_augmented(&self) -> bool {
        self.augmented
    }

    pub fn with_subject(mut self, subject_id: impl Into<String>, label: Option<Label>, site_id: impl Into<String>) -> Self {
        self.subject_id = subject_id.into();
        self.label = label;
        self.site_id = site_id.into();
        self
    }

    /// The unthresholded correlation matrix carried as node features.
    pub fn correlation(&self) -> CorrelationMatrix {
        CorrelationMatrix(self.node_features.clone())
    }

    /// Unit diagonal plus the retained edge weights; zero elsewhere.
    pub fn reconstructed_matrix(&self) -> CorrelationMatrix {
        let mut t = Tensor2::identity(self.node_count);
        for e in &self.edges {
            t.set(e.i, e.j, e.weight);
            t.set(e.j, e.i, e.weight);
        }
        CorrelationMatrix(t)
    }

    /// Same nodes and features, keeping only the edges for which `keep`
    /// returns true (in their original order).
    pub fn filter_edges(&self, mut keep: impl FnMut(usize, &Edge) -> bool) -> ConnectomeGraph {
        let mut g = self.clone();
        g.edges = self
            .edges
            .iter()
            .enumerate()
            .filter(|(idx, e)| keep(*idx, e))
            .map(|(_, e)| *e)
            .collect();
        g
    }

    /// Relabels ROI `i` as `perm[i]`. Square correlation features are
    /// permuted on both axes, so the result is the graph that would be built
    /// from the relabeled time series.
    pub fn permuted(&self, perm: &[usize]) -> Result<ConnectomeGraph> {
        self.permute(perm, true)
    }

    /// Moves node `i` to position `perm[i]`, carrying its feature row and
    /// edges along. Feature columns are left alone.
    pub fn reordered(&self, perm: &[usize]) -> Result<ConnectomeGraph> {
        self.permute(perm, false)
    }

    fn permute(&self, perm: &[usize], relabel_columns: bool) -> Result<ConnectomeGraph> {
        let n = self.node_count;
        let mut seen = vec![false; n];
        if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::InvalidParameter("not a permutation of the node set".into()));
        }
        let f = &self.node_features;
        let mut features = Tensor2::zeros(n, f.cols());
        if relabel_columns && f.cols() == n {
            for i in 0..n {
                for j in 0..n {
                    features.set(perm[i], perm[j], f.get(i, j));
                }
            }
        } else {
            for i in 0..n {
                for j in 0..f.cols() {
                    features.set(perm[i], j, f.get(i, j));
                }
            }
        }
        let mut edges: Vec<Edge> = self
            .edges
            .iter()
            .map(|e| {
                let (a, b) = (perm[e.i], perm[e.j]);
                Edge {
                    i: a.min(b),
                    j: a.max(b),
                    weight: e.weight,
                }
            })
            .collect();
        edges.sort_by_key(|e| (e.i, e.j));
        Ok(ConnectomeGraph {
            node_features: features,
            edges,
            ..self.clone()
        })
    }
}

/// Number of edges kept at `density` for an `n`-node matrix.
pub fn threshold_edge_count(n: usize, density: f64) -> usize {
    let pairs = n * n.saturating_sub(1) / 2;
    let exact = density * pairs as f64;
    // absorb representation error such as 0.2 * 6670 = 1334.0000000000002
    let k = (exact - 1e-9 * exact.max(1.0)).ceil().max(0.0) as usize;
    k.min(pairs)
}

fn check_density(density: f64) -> Result<()> {
    if !(density > 0.0 && density <= 1.0) {
        return Err(Error::InvalidParameter(format!("density must be in (0, 1], got {density}")));
    }
    Ok(())
}

/// Keeps the strongest `ceil(density · R(R−1)/2)` connections by `|r|`.
///
/// Ties at the cut are broken by ascending `(i, j)`.
pub fn proportional_threshold(c: &CorrelationMatrix, density: f64) -> Result<ConnectomeGraph> {
    check_density(density)?;
    let n = c.size();
    let k = threshold_edge_count(n, density);
    let mut pairs = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            pairs.push(Edge {
                i,
                j,
                weight: c.get(i, j),
            });
        }
    }
    pairs.sort_by(|a, b| {
        b.weight
            .abs()
            .total_cmp(&a.weight.abs())
            .then((a.i, a.j).cmp(&(b.i, b.j)))
    });
    pairs.truncate(k);
    pairs.sort_by_key(|e| (e.i, e.j));
    Ok(ConnectomeGraph {
        subject_id: String::new(),
        label: None,
        site_id: String::new(),
        node_count: n,
        density,
        edges: pairs,
        node_features: c.as_tensor().clone(),
        augmented: false,
    })
}

/// Correlation plus thresholding, with subject metadata attached.
pub fn build_graph(ts: &TimeSeriesMatrix, density: f64, label: Option<Label>, site_id: &str) -> Result<ConnectomeGraph> {
    let corr = pearson(ts);
    Ok(proportional_threshold(&corr, density)?.with_subject(ts.subject_id.clone(), label, site_id))
}

/// Noisy copies of a training graph.
///
/// Each copy adds i.i.d. `N(0, sigma²)` noise to the upper triangle of the
/// correlation matrix, mirrors it, clamps to `[−1, 1]`, restores the unit
/// diagonal and re-thresholds at the graph's density. Copies are tagged as
/// augmented so evaluation can refuse them.
pub fn augment_gaussian(g: &ConnectomeGraph, rng: &mut SeededRng, sigma: f64, copies: usize) -> Result<Vec<ConnectomeGraph>> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidParameter(format!("sigma must be >= 0, got {sigma}")));
    }
    let n = g.node_count;
    let base = &g.node_features;
    if base.shape() != (n, n) {
        return Err(Error::Contract("augmentation needs correlation-row node features".into()));
    }
    let mut out = Vec::with_capacity(copies);
    for _ in 0..copies {
        let mut m = base.clone();
        for i in 0..n {
            for j in (i + 1)..n {
                let v = (base.get(i, j) + rng.normal(0.0, sigma)).clamp(-1.0, 1.0);
                m.set(i, j, v);
                m.set(j, i, v);
            }
            m.set(i, i, 1.0);
        }
        let mut copy = proportional_threshold(&CorrelationMatrix(m), g.density)?.with_subject(
            g.subject_id.clone(),
            g.label,
            g.site_id.clone(),
        );
        copy.augmented = true;
        out.push(copy);
    }
    Ok(out)
}
