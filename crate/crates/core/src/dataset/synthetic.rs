//! Synthetic cohorts with planted class differences.
//!
//! Every ROI signal is unit-variance Gaussian noise, except that each planted
//! pair `e = (i, j)` shares a latent factor `s_e(t)`:
//!
//! ```text
//! x_i(t) = sqrt(1 − Σ_{e∋i} λ²_{e,i}) · n_i(t) + Σ_{e∋i} λ_{e,i} · s_e(t) + offset(site, i)
//! λ²_{e,i} = ρ · sqrt(deg_j / deg_i)
//! ```
//!
//! so the population correlation of every planted pair is exactly `ρ`, and
//! hub nodes (high planted degree) spread their variance over their
//! partners. Typically developing subjects use `ρ_TD = 0.2`; ASD subjects use
//! `ρ_ASD = tanh(atanh(ρ_TD) + effect_size)`, i.e. `effect_size` is a shift
//! in Fisher-z units. Each subject then draws its own planted correlation
//! `tanh(atanh(ρ_class) + τ·ε)` with `ε ~ N(0, 1)` shared by all of the
//! subject's planted pairs (`τ` = `heterogeneity`, default 0). A positive
//! `τ` makes the classes overlap. All values are capped at 95% of the
//! largest `ρ` the planted topology admits. Site offsets are per-ROI constant means, which leave
//! correlations untouched but make raw signals differ across sites.
//!
//! Subject `k` has label ASD when `k` is even and site `(k / 2) mod n_sites`,
//! so every site holds an ASD/TD pair for each two subjects.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{manifest_line, Label, SubjectRecord};
use crate::error::{Error, Result};
use crate::graphbuild::TimeSeriesMatrix;
use crate::io::write_atomic;
use crate::numcore::{SeededRng, Tensor2};

/// Planted-pair correlation for typically developing subjects.
pub const BASE_CORRELATION: f64 = 0.2;

/// Default between-subject std of the planted Fisher-z value.
pub const DEFAULT_HETEROGENEITY: f64 = 0.0;

fn default_heterogeneity() -> f64 {
    DEFAULT_HETEROGENEITY
}

const SITE_OFFSET_STD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_subjects: usize,
    pub n_rois: usize,
    pub n_sites: usize,
    pub planted_edges: Vec<(usize, usize)>,
    pub effect_size: f64,
    pub timepoints: usize,
    pub seed: u64,
    /// Between-subject std of the planted Fisher-z value.
    #[serde(default = "default_heterogeneity")]
    pub heterogeneity: f64,
}

/// Default hub layout: two hubs at `n/4` and `n/2`, each joined to
/// `partners` other ROIs spaced through the atlas. Small atlases get fewer
/// partners, down to none, so that hubs and partners stay distinct.
pub fn planted_star(n_rois: usize, partners: usize) -> Vec<(usize, usize)> {
    let partners = partners.min(n_rois.saturating_sub(2) / 2);
    let hubs = [n_rois / 4, n_rois / 2];
    let mut used: Vec<usize> = hubs.to_vec();
    let mut edges = Vec::new();
    let mut cursor = 0;
    for &h in &hubs {
        for _ in 0..partners {
            let mut p = (h + 3 + 5 * cursor) % n_rois;
            while used.contains(&p) {
                p = (p + 1) % n_rois;
            }
            used.push(p);
            cursor += 1;
            edges.push((h.min(p), h.max(p)));
        }
    }
    edges
}

impl SyntheticSpec {
    /// 200 subjects, 39 ROIs, 17 sites, 200 timepoints, two-hub star with two
    /// partners per hub.
    pub fn standard(effect_size: f64, seed: u64) -> Self {
        SyntheticSpec {
            n_subjects: 200,
            n_rois: 39,
            n_sites: 17,
            planted_edges: planted_star(39, 2),
            effect_size,
            timepoints: 200,
            seed,
            heterogeneity: DEFAULT_HETEROGENEITY,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.n_subjects == 0 || self.n_sites == 0 {
            return bad("synthetic cohort needs at least one subject and one site".into());
        }
        if self.n_rois < 2 || self.timepoints < 2 {
            return bad("synthetic cohort needs at least 2 ROIs and 2 timepoints".into());
        }
        if !(0.0..=1.0).contains(&self.effect_size) {
            return bad(format!("effect_size must be in [0, 1], got {}", self.effect_size));
        }
        if !(self.heterogeneity >= 0.0 && self.heterogeneity.is_finite()) {
            return bad(format!("heterogeneity must be finite and >= 0, got {}", self.heterogeneity));
        }
        let mut seen = std::collections::HashSet::new();
        for &(i, j) in &self.planted_edges {
            if i >= self.n_rois || j >= self.n_rois || i == j {
                return bad(format!("planted edge ({i}, {j}) is not a valid ROI pair"));
            }
            if !seen.insert((i.min(j), i.max(j))) {
                return bad(format!("planted edge ({i}, {j}) listed twice"));
            }
        }
        Ok(())
    }

    fn degrees(&self) -> Vec<usize> {
        let mut d = vec![0; self.n_rois];
        for &(i, j) in &self.planted_edges {
            d[i] += 1;
            d[j] += 1;
        }
        d
    }

    /// Largest planted correlation allowed (95% of the feasible maximum).
    pub fn correlation_cap(&self) -> f64 {
        let d = self.degrees();
        let mut load = vec![0.0_f64; self.n_rois];
        for &(i, j) in &self.planted_edges {
            load[i] += (d[j] as f64 / d[i] as f64).sqrt();
            load[j] += (d[i] as f64 / d[j] as f64).sqrt();
        }
        let worst = load.iter().cloned().fold(0.0, f64::max);
        if worst == 0.0 {
            1.0
        } else {
            0.95 / worst
        }
    }

    /// Class-centre correlation of planted pairs, before subject jitter.
    pub fn planted_correlation(&self, label: Label) -> f64 {
        let cap = self.correlation_cap();
        let rho = match label {
            Label::Td => BASE_CORRELATION,
            Label::Asd => (BASE_CORRELATION.atanh() + self.effect_size).tanh(),
        };
        if rho > cap {
            log::warn!("planted correlation {rho:.3} exceeds the feasible cap; using {cap:.3}");
        }
        rho.min(cap)
    }

    pub fn subject_id(k: usize) -> String {
        format!("sub-{:04}", k + 1)
    }

    pub fn site_id(s: usize) -> String {
        format!("site-{:02}", s + 1)
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticSubject {
    pub subject_id: String,
    pub label: Label,
    pub site_id: String,
    pub series: TimeSeriesMatrix,
}

#[derive(Clone, Debug)]
pub struct SyntheticCohort {
    pub spec: SyntheticSpec,
    pub subjects: Vec<SyntheticSubject>,
}

/// Generates the cohort in memory.
pub fn synthesize(spec: &SyntheticSpec) -> Result<SyntheticCohort> {
    spec.validate()?;
    let master = SeededRng::new(spec.seed);
    let degrees = spec.degrees();
    let cap = spec.correlation_cap();
    let (r, t) = (spec.n_rois, spec.timepoints);

    let site_offsets: Vec<Vec<f64>> = (0..spec.n_sites)
        .map(|s| {
            let mut rng = master.child_indexed("site", s as u64);
            (0..r).map(|_| rng.normal(0.0, SITE_OFFSET_STD)).collect()
        })
        .collect();

    let mut subjects = Vec::with_capacity(spec.n_subjects);
    for k in 0..spec.n_subjects {
        let label = if k % 2 == 0 { Label::Asd } else { Label::Td };
        let site = (k / 2) % spec.n_sites;
        let mut rng = master.child_indexed("subject", k as u64);
        let centre = spec.planted_correlation(label).atanh();
        let rho = (centre + spec.heterogeneity * rng.normal(0.0, 1.0)).tanh().clamp(-cap, cap);

        // loadings[i] = [(edge index, λ)]
        let mut loadings: Vec<Vec<(usize, f64)>> = vec![Vec::new(); r];
        for (e, &(i, j)) in spec.planted_edges.iter().enumerate() {
            // a negative draw flips the sign of one side's loading
            let li = (rho.abs() * (degrees[j] as f64 / degrees[i] as f64).sqrt()).sqrt();
            let lj = rho.signum() * (rho.abs() * (degrees[i] as f64 / degrees[j] as f64).sqrt()).sqrt();
            loadings[i].push((e, li));
            loadings[j].push((e, lj));
        }
        let noise_scale: Vec<f64> = loadings
            .iter()
            .map(|ls| (1.0 - ls.iter().map(|(_, l)| l * l).sum::<f64>()).max(0.0).sqrt())
            .collect();

        let mut data = Tensor2::zeros(t, r);
        let mut factors = vec![0.0; spec.planted_edges.len()];
        for step in 0..t {
            for f in factors.iter_mut() {
                *f = rng.normal(0.0, 1.0);
            }
            for i in 0..r {
                let shared: f64 = loadings[i].iter().map(|&(e, l)| l * factors[e]).sum();
                let v = noise_scale[i] * rng.normal(0.0, 1.0) + shared + site_offsets[site][i];
                data.set(step, i, v);
            }
        }
        let subject_id = SyntheticSpec::subject_id(k);
        subjects.push(SyntheticSubject {
            series: TimeSeriesMatrix::new(subject_id.clone(), data)?,
            subject_id,
            label,
            site_id: SyntheticSpec::site_id(site),
        });
    }
    Ok(SyntheticCohort {
        spec: spec.clone(),
        subjects,
    })
}

/// Writes `manifest.jsonl`, `timeseries/<id>.csv` and `synthetic_spec.json`
/// under `out_dir`; returns the records with resolved paths.
pub fn generate_synthetic(spec: &SyntheticSpec, out_dir: &Path) -> Result<Vec<SubjectRecord>> {
    let cohort = synthesize(spec)?;
    let mut manifest = String::new();
    let mut records = Vec::with_capacity(cohort.subjects.len());
    for s in &cohort.subjects {
        let rel = PathBuf::from("timeseries").join(format!("{}.csv", s.subject_id));
        write_atomic(&out_dir.join(&rel), s.series.to_csv_string().as_bytes())?;
        let mut rec = SubjectRecord {
            subject_id: s.subject_id.clone(),
            label: s.label,
            site_id: s.site_id.clone(),
            timeseries_path: rel,
        };
        manifest.push_str(&manifest_line(&rec));
        manifest.push('\n');
        rec.timeseries_path = out_dir.join(&rec.timeseries_path);
        records.push(rec);
    }
    write_atomic(&out_dir.join("manifest.jsonl"), manifest.as_bytes())?;
    crate::io::write_json(&out_dir.join("synthetic_spec.json"), spec)?;
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphbuild::pearson;

    fn class_gap(spec: &SyntheticSpec) -> f64 {
        let cohort = synthesize(spec).unwrap();
        let (mut sum, mut n) = ([0.0; 2], [0usize; 2]);
        for s in &cohort.subjects {
            let c = pearson(&s.series);
            let mean_abs: f64 = spec.planted_edges.iter().map(|&(i, j)| c.get(i, j).abs()).sum::<f64>()
                / spec.planted_edges.len() as f64;
            sum[s.label.class_index()] += mean_abs;
            n[s.label.class_index()] += 1;
        }
        sum[1] / n[1] as f64 - sum[0] / n[0] as f64
    }

    #[test]
    fn planted_star_shape() {
        let e = planted_star(39, 2);
        assert_eq!(e.len(), 4);
        let hubs = [9, 19];
        for (k, &(i, j)) in e.iter().enumerate() {
            assert!(i < j);
            assert!(i == hubs[k / 2] || j == hubs[k / 2]);
        }
    }

    #[test]
    fn planted_star_fits_small_atlases() {
        assert!(planted_star(3, 2).is_empty());
        assert_eq!(planted_star(4, 2).len(), 2);
        for n in 0..12 {
            let e = planted_star(n, 2);
            let mut spec = SyntheticSpec::standard(0.6, 1);
            spec.n_rois = n.max(2);
            spec.planted_edges = e;
            assert!(n < 2 || spec.validate().is_ok(), "{n}");
        }
    }

    #[test]
    fn no_effect_means_no_gap() {
        let gap = class_gap(&SyntheticSpec::standard(0.0, 5));
        assert!(gap.abs() < 0.05, "{gap}");
    }

    #[test]
    fn strong_effect_separates_classes() {
        let gap = class_gap(&SyntheticSpec::standard(0.6, 5));
        assert!(gap > 0.2, "{gap}");
    }

    #[test]
    fn sites_and_labels() {
        let spec = SyntheticSpec::standard(0.6, 1);
        let cohort = synthesize(&spec).unwrap();
        let sites: std::collections::BTreeSet<_> = cohort.subjects.iter().map(|s| s.site_id.clone()).collect();
        assert_eq!(sites.len(), 17);
        assert_eq!(cohort.subjects.iter().filter(|s| s.label == Label::Asd).count(), 100);
    }

    #[test]
    fn heterogeneity_widens_within_class_spread() {
        let spread = |tau: f64| {
            let mut spec = SyntheticSpec::standard(0.6, 8);
            spec.n_subjects = 120;
            spec.timepoints = 400;
            spec.heterogeneity = tau;
            let cohort = synthesize(&spec).unwrap();
            let v: Vec<f64> = cohort
                .subjects
                .iter()
                .filter(|s| s.label == Label::Asd)
                .map(|s| {
                    let c = pearson(&s.series);
                    spec.planted_edges.iter().map(|&(i, j)| c.get(i, j)).sum::<f64>() / spec.planted_edges.len() as f64
                })
                .collect();
            let m = v.iter().sum::<f64>() / v.len() as f64;
            (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
        };
        let (flat, wide) = (spread(0.0), spread(0.4));
        assert!(wide > 2.0 * flat, "{flat} vs {wide}");
    }

    #[test]
    fn invalid_specs() {
        let mut spec = SyntheticSpec::standard(1.5, 1);
        assert!(spec.validate().is_err());
        spec.effect_size = 0.5;
        spec.planted_edges.push(spec.planted_edges[0]);
        assert!(spec.validate().is_err());
        spec.planted_edges = vec![(3, 3)];
        assert!(spec.validate().is_err());
        spec.planted_edges = vec![(1, 2)];
        spec.heterogeneity = -0.1;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn files_are_byte_identical_across_runs() {
        let mut spec = SyntheticSpec::standard(0.6, 3);
        spec.n_subjects = 6;
        spec.timepoints = 20;
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate_synthetic(&spec, a.path()).unwrap();
        generate_synthetic(&spec, b.path()).unwrap();
        for rel in ["manifest.jsonl", "timeseries/sub-0004.csv", "synthetic_spec.json"] {
            assert_eq!(
                std::fs::read(a.path().join(rel)).unwrap(),
                std::fs::read(b.path().join(rel)).unwrap()
            );
        }
        let recs = crate::dataset::load_manifest(&a.path().join("manifest.jsonl")).unwrap();
        assert_eq!(recs.len(), 6);
        assert_eq!(recs[3].load_timeseries().unwrap().timepoints(), 20);
    }
}
