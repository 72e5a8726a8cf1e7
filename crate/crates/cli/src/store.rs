//! On-disk graph store: one `<subject_id>.json` per graph in a directory.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use connectome_gnn::dataset::{Split, SplitAssignment, SubjectRecord};
use connectome_gnn::graphbuild::{build_graph, ConnectomeGraph};
use connectome_gnn::io::{read_json, write_json};
use rayon::prelude::*;

pub const GRAPH_DIR: &str = "graphs";

/// A subject whose graph could not be built.
#[derive(Debug)]
pub struct BuildFailure {
    pub subject_id: String,
    pub error: String,
}

#[derive(Debug, Default)]
pub struct BuildResult {
    /// Successful graphs in manifest order.
    pub graphs: Vec<ConnectomeGraph>,
    pub failures: Vec<BuildFailure>,
}

impl BuildResult {
    /// `built N graphs; edges min/mean/max a/b/c`.
    pub fn summary(&self) -> String {
        let counts: Vec<usize> = self.graphs.iter().map(|g| g.edges().len()).collect();
        let mut s = format!("built {} graphs", counts.len());
        if let (Some(min), Some(max)) = (counts.iter().min(), counts.iter().max()) {
            let mean = counts.iter().sum::<usize>() as f64 / counts.len() as f64;
            s.push_str(&format!("; edges min/mean/max {min}/{mean:.1}/{max}"));
        }
        if !self.failures.is_empty() {
            s.push_str(&format!("; {} failed", self.failures.len()));
        }
        s
    }
}

/// Builds every subject's graph, collecting per-subject failures instead of
/// stopping at the first.
pub fn build_all(records: &[SubjectRecord], density: f64) -> BuildResult {
    let results: Vec<_> = records
        .par_iter()
        .map(|r| {
            r.load_timeseries()
                .and_then(|ts| build_graph(&ts, density, Some(r.label), &r.site_id))
                .map_err(|e| BuildFailure {
                    subject_id: r.subject_id.clone(),
                    error: format!("{:#}", anyhow::Error::new(e)),
                })
        })
        .collect();
    let mut out = BuildResult::default();
    for r in results {
        match r {
            Ok(g) => out.graphs.push(g),
            Err(f) => out.failures.push(f),
        }
    }
    out
}

fn graph_path(dir: &Path, subject_id: &str) -> PathBuf {
    dir.join(format!("{subject_id}.json"))
}

pub fn write_graphs(dir: &Path, graphs: &[ConnectomeGraph]) -> Result<()> {
    for g in graphs {
        write_json(&graph_path(dir, &g.subject_id), g)?;
    }
    Ok(())
}

/// Every `*.json` graph in `dir`, ordered by subject id.
pub fn read_graphs(dir: &Path) -> Result<Vec<ConnectomeGraph>> {
    let mut paths = Vec::new();
    for entry in std::fs::read_dir(dir).with_context(|| format!("listing graph store {}", dir.display()))? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "json") {
            paths.push(path);
        }
    }
    paths.sort();
    if paths.is_empty() {
        bail!("graph store {} is empty", dir.display());
    }
    let mut graphs: Vec<ConnectomeGraph> = paths
        .iter()
        .map(|p| read_json(p).with_context(|| format!("reading graph {}", p.display())))
        .collect::<Result<_>>()?;
    graphs.sort_by(|a, b| a.subject_id.cmp(&b.subject_id));
    Ok(graphs)
}

pub fn read_split(path: &Path) -> Result<SplitAssignment> {
    read_json(path).with_context(|| format!("reading split {}", path.display()))
}

/// Graphs of each split, in input order. Every graph must be assigned and
/// every assigned subject must have a graph.
pub fn partition(graphs: &[ConnectomeGraph], split: &SplitAssignment) -> Result<[Vec<ConnectomeGraph>; 3]> {
    let mut parts: [Vec<ConnectomeGraph>; 3] = Default::default();
    for g in graphs {
        let Some(s) = split.get(&g.subject_id) else {
            bail!("subject {} has no split assignment", g.subject_id);
        };
        parts[s as usize].push(g.clone());
    }
    let assigned: usize = parts.iter().map(Vec::len).sum();
    if assigned != split.len() {
        bail!("split assigns {} subjects but only {assigned} have graphs", split.len());
    }
    Ok(parts)
}

pub fn split_index(s: Split) -> usize {
    s as usize
}

#[cfg(test)]
mod tests {
    use super::*;
    use connectome_gnn::dataset::{generate_synthetic, SyntheticSpec};

    fn small_spec() -> SyntheticSpec {
        SyntheticSpec {
            n_subjects: 10,
            n_sites: 2,
            ..SyntheticSpec::standard(0.6, 3)
        }
    }

    #[test]
    fn one_unreadable_file_among_ten() {
        let dir = tempfile::tempdir().unwrap();
        let mut records = generate_synthetic(&small_spec(), dir.path()).unwrap();
        records[4].timeseries_path = dir.path().join("missing.csv");
        let r = build_all(&records, 0.2);
        assert_eq!(r.graphs.len(), 9);
        assert_eq!(r.failures.len(), 1);
        assert_eq!(r.failures[0].subject_id, records[4].subject_id);
        assert!(r.summary().contains("1 failed"));
        assert!(r.graphs.iter().all(|g| g.edges().len() == 149));
    }

    #[test]
    fn store_round_trip_and_partition() {
        let dir = tempfile::tempdir().unwrap();
        let records = generate_synthetic(&small_spec(), &dir.path().join("cohort")).unwrap();
        let built = build_all(&records, 0.2);
        let store = dir.path().join(GRAPH_DIR);
        write_graphs(&store, &built.graphs).unwrap();
        let back = read_graphs(&store).unwrap();
        assert_eq!(back.len(), 10);
        for g in &back {
            let orig = built.graphs.iter().find(|o| o.subject_id == g.subject_id).unwrap();
            assert_eq!(g, orig);
        }
        let split = connectome_gnn::dataset::stratified_split(
            &records,
            connectome_gnn::dataset::DEFAULT_FRACTIONS,
            &connectome_gnn::numcore::SeededRng::new(1),
        )
        .unwrap();
        let parts = partition(&back, &split).unwrap();
        assert_eq!(parts.iter().map(Vec::len).sum::<usize>(), 10);
        assert!(parts[split_index(Split::Test)].iter().all(|g| g.label.is_some()));
        assert!(partition(&back[1..], &split).is_err());
    }
}
