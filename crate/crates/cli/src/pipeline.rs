//! Pipeline stages: load → split → augment and train → evaluate → explain.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use connectome_gnn::dataset::{stratified_split, synthesize, Label, SplitAssignment, SubjectRecord, DEFAULT_FRACTIONS};
use connectome_gnn::explain::{cohort_saliency, explain_all, mask_fidelity, saliency, ExplainConfig, Fidelity, SaliencyReport};
use connectome_gnn::graphbuild::{build_graph, ConnectomeGraph};
use connectome_gnn::io::{write_atomic, write_json};
use connectome_gnn::models::{Architecture, ModelCheckpoint};
use connectome_gnn::numcore::SeededRng;
use connectome_gnn::trainer::{
    augment_pool, evaluate, history_csv, predict_all, predicted_label, train_ensemble, EnsembleModel, EnsembleOutcome,
    MetricsReport, ENSEMBLE_MANIFEST,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, EFFECTIVE_CONFIG};
use crate::store::{build_all, partition};

pub const METRICS_FILE: &str = "metrics.json";
pub const SPLIT_FILE: &str = "split.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const HISTORY_DIR: &str = "history";
pub const EXPLAIN_DIR: &str = "explain";

/// Subjects with graphs, plus the planted edges when the cohort is synthetic.
#[derive(Clone, Debug)]
pub struct Cohort {
    pub records: Vec<SubjectRecord>,
    /// Same order as `records`.
    pub graphs: Vec<ConnectomeGraph>,
    pub planted: Option<Vec<(usize, usize)>>,
}

pub fn load_cohort(cfg: &RunConfig) -> Result<Cohort> {
    let cohort = if let Some(path) = &cfg.manifest {
        let records = connectome_gnn::dataset::load_manifest(path)?;
        let built = build_all(&records, cfg.density);
        if !built.failures.is_empty() {
            let list: Vec<String> = built.failures.iter().map(|f| format!("{}: {}", f.subject_id, f.error)).collect();
            bail!("{} subjects failed:\n  {}", list.len(), list.join("\n  "));
        }
        Cohort {
            records,
            graphs: built.graphs,
            planted: None,
        }
    } else if let Some(dir) = &cfg.graphs {
        let graphs = crate::store::read_graphs(dir)?;
        let records = graphs
            .iter()
            .map(|g| {
                let Some(label) = g.label else {
                    bail!("graph {} has no label", g.subject_id);
                };
                Ok(SubjectRecord {
                    subject_id: g.subject_id.clone(),
                    label,
                    site_id: g.site_id.clone(),
                    timeseries_path: PathBuf::new(),
                })
            })
            .collect::<Result<_>>()?;
        Cohort {
            records,
            graphs,
            planted: None,
        }
    } else if let Some(spec) = &cfg.synthetic {
        let synthetic = synthesize(spec)?;
        let graphs = synthetic
            .subjects
            .par_iter()
            .map(|s| build_graph(&s.series, cfg.density, Some(s.label), &s.site_id))
            .collect::<connectome_gnn::Result<Vec<_>>>()?;
        let records = synthetic
            .subjects
            .iter()
            .map(|s| SubjectRecord {
                subject_id: s.subject_id.clone(),
                label: s.label,
                site_id: s.site_id.clone(),
                timeseries_path: PathBuf::new(),
            })
            .collect();
        Cohort {
            records,
            graphs,
            planted: Some(spec.planted_edges.clone()),
        }
    } else {
        bail!("no input cohort configured");
    };
    if let Some(r) = cfg.atlas_size {
        if let Some(g) = cohort.graphs.iter().find(|g| g.node_count() != r) {
            bail!("graph {} has {} ROIs, expected {r}", g.subject_id, g.node_count());
        }
    }
    Ok(cohort)
}

/// The configured split file, or a fresh stratified split from the seed.
pub fn split_cohort(cfg: &RunConfig, records: &[SubjectRecord]) -> Result<SplitAssignment> {
    match &cfg.split {
        Some(path) => crate::store::read_split(path),
        None => Ok(stratified_split(records, DEFAULT_FRACTIONS, &SeededRng::new(cfg.seed).child("split"))?),
    }
}

/// Augments the training graphs and trains `members` models.
pub fn train_stage(
    cfg: &RunConfig,
    members: usize,
    train: &[ConnectomeGraph],
    val: &[ConnectomeGraph],
) -> Result<(EnsembleOutcome, usize)> {
    let Some(first) = train.first() else {
        bail!("training split is empty");
    };
    let pool = augment_pool(train, cfg.sigma, cfg.copies, &SeededRng::new(cfg.seed).child("augment"))?;
    log::info!("training pool {} graphs ({} originals), validation {}", pool.len(), train.len(), val.len());
    let template = cfg.model_template(first.node_features().cols());
    let outcome = train_ensemble(&template, &pool, val, &cfg.train_config(), members)?;
    Ok((outcome, pool.len()))
}

pub fn write_training_artifacts(out: &Path, outcome: &EnsembleOutcome) -> Result<()> {
    outcome.ensemble.save(&out.join(CHECKPOINT_DIR))?;
    for (i, h) in outcome.histories.iter().enumerate() {
        write_atomic(&out.join(HISTORY_DIR).join(format!("member_{i}.csv")), history_csv(h).as_bytes())?;
    }
    Ok(())
}

/// A checkpoint file, or a directory holding an ensemble manifest.
pub fn load_net(path: &Path) -> Result<EnsembleModel> {
    if path.is_dir() && path.join(ENSEMBLE_MANIFEST).exists() {
        Ok(EnsembleModel::load(path)?)
    } else if path.is_dir() {
        bail!("{} has no {ENSEMBLE_MANIFEST}", path.display());
    } else {
        Ok(EnsembleModel::new(vec![ModelCheckpoint::load(path)?])?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SetCounts {
    pub train: usize,
    pub train_pool: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub architecture: Architecture,
    pub members: usize,
    /// Class counted as positive by precision and recall.
    pub positive_class: Label,
    pub counts: SetCounts,
    /// 1-based epoch each member's weights come from.
    pub best_epochs: Vec<usize>,
    pub val: Option<MetricsReport>,
    pub test: MetricsReport,
    /// Each member alone on the test set.
    pub member_test: Vec<MetricsReport>,
}

pub fn evaluate_stage(
    ensemble: &EnsembleModel,
    val: &[ConnectomeGraph],
    test: &[ConnectomeGraph],
) -> Result<(Option<MetricsReport>, MetricsReport, Vec<MetricsReport>)> {
    let val_report = if val.is_empty() { None } else { Some(evaluate(ensemble, val)?) };
    let test_report = evaluate(ensemble, test)?;
    let members = ensemble
        .members()
        .iter()
        .map(|m| evaluate(&m.model, test))
        .collect::<connectome_gnn::Result<Vec<_>>>()?;
    Ok((val_report, test_report, members))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectExplanation {
    pub subject_id: String,
    pub label: Option<Label>,
    pub predicted: Label,
    pub correct: bool,
    /// Fraction of the top-k mask edges that are planted, k = planted count.
    pub planted_precision: Option<f64>,
    pub fidelity: Fidelity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplainSummary {
    /// Edges kept in the fidelity and precision checks.
    pub k: usize,
    pub subjects: Vec<SubjectExplanation>,
    /// Cohort saliency ranking, most salient ROI first.
    pub roi_ranking: Vec<usize>,
}

impl ExplainSummary {
    /// Share of correctly classified subjects whose planted precision is at
    /// least `min_precision`; `None` without ground truth or correct subjects.
    pub fn recovery_rate(&self, min_precision: f64) -> Option<f64> {
        let correct: Vec<f64> = self
            .subjects
            .iter()
            .filter(|s| s.correct)
            .map(|s| s.planted_precision)
            .collect::<Option<_>>()?;
        if correct.is_empty() {
            return None;
        }
        Some(correct.iter().filter(|p| **p >= min_precision).count() as f64 / correct.len() as f64)
    }
}

const DEFAULT_FIDELITY_K: usize = 10;

/// Edge masks and saliency for `graphs`, written under `out/explain`.
pub fn explain_stage(
    net: &EnsembleModel,
    graphs: &[ConnectomeGraph],
    cfg: &ExplainConfig,
    seed: u64,
    planted: Option<&[(usize, usize)]>,
    out: &Path,
) -> Result<ExplainSummary> {
    if graphs.is_empty() {
        bail!("nothing to explain");
    }
    let dir = out.join(EXPLAIN_DIR);
    let masks = explain_all(net, graphs, cfg, &SeededRng::new(seed).child("explain"))?;
    let probas = predict_all(net, graphs)?;
    let planted_set: Option<BTreeSet<(usize, usize)>> = planted.map(|p| p.iter().map(|&(i, j)| (i.min(j), i.max(j))).collect());
    let k = planted_set.as_ref().map_or(DEFAULT_FIDELITY_K, BTreeSet::len);

    let mut subjects = Vec::with_capacity(graphs.len());
    for ((g, mask), p) in graphs.iter().zip(&masks).zip(&probas) {
        write_atomic(&dir.join("edge_masks").join(format!("{}.csv", g.subject_id)), mask.to_csv().as_bytes())?;
        let kk = k.min(g.edges().len());
        let predicted = predicted_label(*p);
        subjects.push(SubjectExplanation {
            subject_id: g.subject_id.clone(),
            label: g.label,
            predicted,
            correct: g.label == Some(predicted),
            planted_precision: planted_set.as_ref().map(|set| {
                let hits = mask.top_k(kk).iter().filter(|e| set.contains(e)).count();
                if kk == 0 { 0.0 } else { hits as f64 / kk as f64 }
            }),
            fidelity: mask_fidelity(net, g, mask, kk)?,
        });
    }

    let reports: Vec<SaliencyReport> = graphs
        .par_iter()
        .map(|g| saliency(net, g))
        .collect::<connectome_gnn::Result<_>>()?;
    for r in &reports {
        let id = r.subject_id.as_deref().unwrap_or("cohort");
        write_atomic(&dir.join("saliency").join(format!("{id}.csv")), r.to_csv().as_bytes())?;
    }
    let cohort = cohort_saliency(&reports)?;
    write_atomic(&dir.join("saliency_cohort.csv"), cohort.to_csv().as_bytes())?;
    write_json(&dir.join("saliency_cohort.json"), &cohort)?;

    let summary = ExplainSummary {
        k,
        subjects,
        roi_ranking: cohort.ranking(),
    };
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

pub struct Prepared {
    pub cohort: Cohort,
    pub train: Vec<ConnectomeGraph>,
    pub val: Vec<ConnectomeGraph>,
    pub test: Vec<ConnectomeGraph>,
}

/// Loads the cohort and splits it without writing anything.
pub fn load_split(cfg: &RunConfig) -> Result<(Prepared, SplitAssignment)> {
    cfg.validate().context("config")?;
    let cohort = load_cohort(cfg).context("load stage failed")?;
    let split = split_cohort(cfg, &cohort.records).context("split stage failed")?;
    let [train, val, test] = partition(&cohort.graphs, &split).context("split stage failed")?;
    Ok((Prepared { cohort, train, val, test }, split))
}

/// [`load_split`], echoing the effective config and the split to `cfg.out`.
pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    cfg.validate().context("config")?;
    write_atomic(&cfg.out.join(EFFECTIVE_CONFIG), cfg.to_json().as_bytes())?;
    log::info!("effective config:\n{}", cfg.to_json());
    let (prepared, split) = load_split(cfg)?;
    write_json(&cfg.out.join(SPLIT_FILE), &split)?;
    Ok(prepared)
}

/// Trains without touching the test set; returns validation metrics when
/// there is a validation split.
pub fn run_training(cfg: &RunConfig) -> Result<Option<MetricsReport>> {
    let Prepared { train, val, .. } = prepare(cfg)?;
    let (outcome, _) = train_stage(cfg, cfg.members, &train, &val).context("train stage failed")?;
    write_training_artifacts(&cfg.out, &outcome)?;
    if val.is_empty() {
        return Ok(None);
    }
    Ok(Some(evaluate(&outcome.ensemble, &val).context("evaluate stage failed")?))
}

#[derive(Clone, Debug)]
pub struct PipelineOutput {
    pub metrics: RunMetrics,
    pub explain: Option<ExplainSummary>,
}

/// Runs every stage and writes all artifacts under `cfg.out`.
pub fn run_pipeline(cfg: &RunConfig) -> Result<PipelineOutput> {
    let out = &cfg.out;
    let Prepared { cohort, train, val, test } = prepare(cfg)?;
    let (outcome, pool) = train_stage(cfg, cfg.members, &train, &val).context("train stage failed")?;
    write_training_artifacts(out, &outcome)?;

    let ens = &outcome.ensemble;
    let (val_report, test_report, member_test) = evaluate_stage(ens, &val, &test).context("evaluate stage failed")?;
    let metrics = RunMetrics {
        architecture: cfg.arch,
        members: ens.len(),
        positive_class: Label::Asd,
        counts: SetCounts {
            train: train.len(),
            train_pool: pool,
            val: val.len(),
            test: test.len(),
        },
        best_epochs: ens.members().iter().map(|m| m.metadata.best_epoch).collect(),
        val: val_report,
        test: test_report,
        member_test,
    };
    write_json(&out.join(METRICS_FILE), &metrics)?;

    let explain = match &cfg.explain {
        Some(e) => Some(explain_stage(ens, &test, e, cfg.seed, cohort.planted.as_deref(), out).context("explain stage failed")?),
        None => None,
    };
    Ok(PipelineOutput { metrics, explain })
}
