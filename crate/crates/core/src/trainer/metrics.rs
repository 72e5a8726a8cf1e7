//! Classification metrics with ASD as the positive class.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Label;
use crate::error::{Error, Result};
use crate::graphbuild::ConnectomeGraph;
use crate::models::{GraphNet, GraphStructure};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tn: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tp: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tn + self.fp + self.fn_ + self.tp
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    /// `TP / (TP + FP)`; 0 when nothing is predicted ASD.
    pub precision: f64,
    /// `TP / (TP + FN)`; 0 when no subject is ASD.
    pub recall: f64,
    /// `None` when the evaluated set contains a single class.
    pub auc: Option<f64>,
    pub confusion: Confusion,
    pub n: usize,
}

/// Predicted class for a probability vector: the argmax, with exact ties
/// going to TD (index 0).
pub fn predicted_label(proba: [f64; 2]) -> Label {
    if proba[1] > proba[0] {
        Label::Asd
    } else {
        Label::Td
    }
}

/// Mann–Whitney AUC: the probability that a random ASD subject scores above
/// a random TD subject, ties counting one half.
///
/// The pair count is accumulated in half-units as an integer, so the result
/// is bit-identical to summing over all pairs.
pub fn auc(scores: &[f64], labels: &[Label]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("NaN score passed to auc".into()));
    }
    let mut neg: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, l)| **l == Label::Td)
        .map(|(s, _)| *s)
        .collect();
    let n_pos = labels.len() - neg.len();
    if n_pos == 0 || neg.is_empty() {
        return Err(Error::Contract("auc needs at least one ASD and one TD subject".into()));
    }
    neg.sort_by(f64::total_cmp);
    let mut half_units: u128 = 0;
    for (s, _) in scores.iter().zip(labels).filter(|(_, l)| **l == Label::Asd) {
        let below = neg.partition_point(|&v| v < *s);
        let not_above = neg.partition_point(|&v| v <= *s);
        half_units += 2 * below as u128 + (not_above - below) as u128;
    }
    Ok(half_units as f64 / (2 * n_pos as u128 * neg.len() as u128) as f64)
}

/// Metrics from per-subject `[p(TD), p(ASD)]` vectors.
pub fn metrics_from_probabilities(probas: &[[f64; 2]], labels: &[Label]) -> Result<MetricsReport> {
    if probas.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} labels",
            probas.len(),
            labels.len()
        )));
    }
    if probas.is_empty() {
        return Err(Error::Contract("cannot evaluate an empty set".into()));
    }
    let mut c = Confusion::default();
    for (p, &truth) in probas.iter().zip(labels) {
        match (truth, predicted_label(*p)) {
            (Label::Td, Label::Td) => c.tn += 1,
            (Label::Td, Label::Asd) => c.fp += 1,
            (Label::Asd, Label::Td) => c.fn_ += 1,
            (Label::Asd, Label::Asd) => c.tp += 1,
        }
    }
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let scores: Vec<f64> = probas.iter().map(|p| p[1]).collect();
    let both_classes = labels.contains(&Label::Asd) && labels.contains(&Label::Td);
    Ok(MetricsReport {
        accuracy: ratio(c.tp + c.tn, c.total()),
        precision: ratio(c.tp, c.tp + c.fp),
        recall: ratio(c.tp, c.tp + c.fn_),
        auc: if both_classes { Some(auc(&scores, labels)?) } else { None },
        confusion: c,
        n: c.total(),
    })
}

/// Checks that every graph is an original, labeled subject graph.
pub fn require_evaluable(graphs: &[ConnectomeGraph]) -> Result<Vec<Label>> {
    graphs
        .iter()
        .map(|g| {
            if g.is_augmented() {
                return Err(Error::Contract(format!(
                    "augmented graph for {} passed to evaluation",
                    g.subject_id
                )));
            }
            g.label
                .ok_or_else(|| Error::Contract(format!("graph {} has no label", g.subject_id)))
        })
        .collect()
}

/// Evaluation-mode probabilities for each graph, in input order.
pub fn predict_all<N: GraphNet + ?Sized>(net: &N, graphs: &[ConnectomeGraph]) -> Result<Vec<[f64; 2]>> {
    graphs
        .par_iter()
        .map(|g| {
            let s = GraphStructure::from_graph(g)?;
            net.proba(&s, g.node_features())
        })
        .collect()
}

/// Evaluates a frozen model or ensemble on labeled, non-augmented graphs.
pub fn evaluate<N: GraphNet + ?Sized>(net: &N, graphs: &[ConnectomeGraph]) -> Result<MetricsReport> {
    let labels = require_evaluable(graphs)?;
    let probas = predict_all(net, graphs)?;
    metrics_from_probabilities(&probas, &labels)
}
