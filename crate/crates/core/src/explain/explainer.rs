//! Edge-mask explanations by gradient descent on per-edge logits.
//!
//! For a frozen model and a graph whose prediction is class `c`, the mask
//! logits `m_e` minimize
//!
//! ```text
//! L(m) = −log p_c(graph with edge e scaled by σ(m_e))
//!        + λ_size · Σ σ(m_e) + λ_ent · Σ H(σ(m_e))
//! ```
//!
//! with `H` the binary entropy, using Adam. See [`crate::models::layers`] for
//! how GCN and GAT layers apply the mask.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Label;
use crate::error::{Error, Result};
use crate::graphbuild::ConnectomeGraph;
use crate::models::{GraphInput, GraphNet, GraphStructure};
use crate::numcore::{adam_step, AdamConfig, AdamState, SeededRng, Tape, Tensor2};
use crate::trainer::predicted_label;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplainConfig {
    pub steps: usize,
    pub lr: f64,
    pub size_weight: f64,
    pub entropy_weight: f64,
    /// Std of the normal draw for the initial mask logits.
    pub init_std: f64,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        ExplainConfig {
            steps: 200,
            lr: 0.01,
            size_weight: 0.005,
            entropy_weight: 1.0,
            init_std: 0.1,
        }
    }
}

impl ExplainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && self.size_weight >= 0.0
            && self.entropy_weight >= 0.0
            && self.init_std >= 0.0
            && self.init_std.is_finite();
        if !ok {
            return Err(Error::InvalidParameter(format!("invalid explainer config {self:?}")));
        }
        Ok(())
    }
}

/// Learned mask values aligned with the explained graph's edge list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeMask {
    pub subject_id: String,
    /// Class whose probability the mask preserves.
    pub target: Label,
    pub edges: Vec<(usize, usize)>,
    pub values: Vec<f64>,
    pub final_loss: f64,
}

impl EdgeMask {
    /// `(i, j, value)` by descending value, ties by `(i, j)`.
    pub fn ranked(&self) -> Vec<(usize, usize, f64)> {
        let mut r: Vec<(usize, usize, f64)> = self.edges.iter().zip(&self.values).map(|(&(i, j), &v)| (i, j, v)).collect();
        r.sort_by(|a, b| b.2.total_cmp(&a.2).then((a.0, a.1).cmp(&(b.0, b.1))));
        r
    }

    /// Indices into the edge list of the `k` highest-valued edges.
    pub fn top_k_indices(&self, k: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.edges.len()).collect();
        idx.sort_by(|&a, &b| self.values[b].total_cmp(&self.values[a]).then(self.edges[a].cmp(&self.edges[b])));
        idx.truncate(k);
        idx
    }

    pub fn top_k(&self, k: usize) -> Vec<(usize, usize)> {
        self.top_k_indices(k).into_iter().map(|e| self.edges[e]).collect()
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }

    /// `i,j,mask_value`, highest first.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("i,j,mask_value\n");
        for (i, j, v) in self.ranked() {
            let _ = writeln!(s, "{i},{j},{v}");
        }
        s
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Explains `graph` starting from `N(0, init_std)` mask logits drawn from
/// `rng`.
pub fn gnn_explain<N: GraphNet + ?Sized>(
    net: &N,
    graph: &ConnectomeGraph,
    cfg: &ExplainConfig,
    rng: &mut SeededRng,
) -> Result<EdgeMask> {
    let init: Vec<f64> = (0..graph.edges().len()).map(|_| rng.normal(0.0, cfg.init_std)).collect();
    gnn_explain_from(net, graph, cfg, init)
}

/// Explains `graph` starting from the given mask logits (one per edge).
pub fn gnn_explain_from<N: GraphNet + ?Sized>(
    net: &N,
    graph: &ConnectomeGraph,
    cfg: &ExplainConfig,
    init_logits: Vec<f64>,
) -> Result<EdgeMask> {
    cfg.validate()?;
    let e = graph.edges().len();
    if init_logits.len() != e {
        return Err(Error::Contract(format!("{} initial logits for {e} edges", init_logits.len())));
    }
    let structure = GraphStructure::from_graph(graph)?;
    let target = predicted_label(net.proba(&structure, graph.node_features())?);
    let edges = graph.edge_pairs();
    if e == 0 {
        return Ok(EdgeMask {
            subject_id: graph.subject_id.clone(),
            target,
            edges,
            values: Vec::new(),
            final_loss: 0.0,
        });
    }
    let mut onehot = Tensor2::zeros(1, 2);
    onehot.set(0, target.class_index(), -1.0);

    let mut logits = vec![Tensor2::from_vec(e, 1, init_logits)?];
    let mut adam = AdamState::new(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        &logits,
    );
    let diverged = |step: usize, loss: f64| Error::Divergence {
        epoch: 0,
        batch: step,
        loss,
    };
    let mut final_loss = f64::NAN;
    for step in 1..=cfg.steps {
        let mut tape = Tape::new();
        let m = tape.param(logits[0].clone());
        let x = tape.constant(graph.node_features().clone());
        let p = tape.sigmoid(m)?;
        let neg_m = tape.scale(m, -1.0)?;
        let q = tape.sigmoid(neg_m)?; // 1 − p without cancellation
        let input = GraphInput {
            structure: &structure,
            features: x,
            edge_mask: Some(p),
        };
        let loss = (|| -> Result<_> {
            let z = net.logits(&mut tape, &input)?;
            let lsm = tape.log_softmax_rows(z)?;
            let pick = tape.constant(onehot.clone());
            let ce = tape.mul(lsm, pick)?;
            let ce = tape.sum(ce)?;
            let size = tape.sum(p)?;
            let size = tape.scale(size, cfg.size_weight)?;
            let log_p = tape.log(p)?;
            let log_q = tape.log(q)?;
            let a = tape.mul(p, log_p)?;
            let b = tape.mul(q, log_q)?;
            let h = tape.add(a, b)?;
            let h = tape.sum(h)?;
            let ent = tape.scale(h, -cfg.entropy_weight)?;
            let total = tape.add(ce, size)?;
            tape.add(total, ent)
        })()
        .map_err(|err| match err {
            Error::NonFinite(_) => diverged(step, f64::NAN),
            other => other,
        })?;
        final_loss = tape.scalar(loss);
        let mut grads = tape.backward(loss)?;
        let g = grads.take(m).expect("mask logits are a tape parameter");
        adam_step(&mut logits, &[g], &mut adam)?;
        if !logits[0].is_finite() {
            return Err(diverged(step, final_loss));
        }
    }
    Ok(EdgeMask {
        subject_id: graph.subject_id.clone(),
        target,
        edges,
        values: logits[0].data().iter().map(|&v| sigmoid(v)).collect(),
        final_loss,
    })
}

/// Explains each graph on its own stream `rng.child("explain/<subject>")`,
/// in parallel.
pub fn explain_all<N: GraphNet + ?Sized>(
    net: &N,
    graphs: &[ConnectomeGraph],
    cfg: &ExplainConfig,
    rng: &SeededRng,
) -> Result<Vec<EdgeMask>> {
    graphs
        .par_iter()
        .map(|g| {
            let mut r = rng.child(&format!("explain/{}", g.subject_id));
            gnn_explain(net, g, cfg, &mut r)
        })
        .collect()
}

/// Change in the probability of the originally predicted class when only
/// the top-`k` mask edges are kept, and when they are removed. Both drops
/// are `p_full − p_subgraph`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fidelity {
    pub full_probability: f64,
    pub keep_drop: f64,
    pub remove_drop: f64,
}

pub fn mask_fidelity<N: GraphNet + ?Sized>(net: &N, graph: &ConnectomeGraph, mask: &EdgeMask, k: usize) -> Result<Fidelity> {
    let e = graph.edges().len();
    if mask.edges != graph.edge_pairs() {
        return Err(Error::Contract("mask does not belong to this graph".into()));
    }
    if k > e {
        return Err(Error::Contract(format!("k = {k} exceeds the {e} edges")));
    }
    let mut top = vec![false; e];
    for idx in mask.top_k_indices(k) {
        top[idx] = true;
    }
    let full = net.proba(&GraphStructure::from_graph(graph)?, graph.node_features())?;
    let c = predicted_label(full).class_index();
    let prob = |g: &ConnectomeGraph| -> Result<f64> {
        Ok(net.proba(&GraphStructure::from_graph(g)?, g.node_features())?[c])
    };
    let kept = graph.filter_edges(|idx, _| top[idx]);
    let removed = graph.filter_edges(|idx, _| !top[idx]);
    Ok(Fidelity {
        full_probability: full[c],
        keep_drop: full[c] - prob(&kept)?,
        remove_drop: full[c] - prob(&removed)?,
    })
}
