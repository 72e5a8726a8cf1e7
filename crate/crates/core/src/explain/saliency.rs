//! Gradient saliency per ROI.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataset::Label;
use crate::error::{Error, Result};
use crate::graphbuild::ConnectomeGraph;
use crate::models::{softmax, GraphInput, GraphNet, GraphStructure};
use crate::numcore::{Tape, Tensor2};
use crate::trainer::predicted_label;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoiImportance {
    pub roi_index: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub roi_label: Option<String>,
    /// Gradient norm (subject) or its cohort mean.
    pub score: f64,
    pub percentage: f64,
}

/// ROI importances ranked by descending percentage (ties by ROI index).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencyReport {
    /// `None` for a cohort average.
    pub subject_id: Option<String>,
    /// Predicted class whose logit was differentiated; `None` for a cohort.
    pub predicted: Option<Label>,
    pub n_subjects: usize,
    /// True when every gradient was zero and uniform percentages were used.
    pub uniform_fallback: bool,
    pub entries: Vec<RoiImportance>,
}

fn ranked(scores: &[f64], percentages: &[f64]) -> Vec<RoiImportance> {
    let mut entries: Vec<RoiImportance> = scores
        .iter()
        .zip(percentages)
        .enumerate()
        .map(|(roi_index, (&score, &percentage))| RoiImportance {
            roi_index,
            roi_label: None,
            score,
            percentage,
        })
        .collect();
    entries.sort_by(|a, b| b.percentage.total_cmp(&a.percentage).then(a.roi_index.cmp(&b.roi_index)));
    entries
}

impl SaliencyReport {
    /// Percentages in ROI order.
    pub fn percentages(&self) -> Vec<f64> {
        let mut p = vec![0.0; self.entries.len()];
        for e in &self.entries {
            p[e.roi_index] = e.percentage;
        }
        p
    }

    /// ROI indices from most to least salient.
    pub fn ranking(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.roi_index).collect()
    }

    pub fn with_roi_labels(mut self, labels: &[String]) -> Result<Self> {
        if labels.len() != self.entries.len() {
            return Err(Error::Contract(format!(
                "{} ROI labels for {} ROIs",
                labels.len(),
                self.entries.len()
            )));
        }
        for e in &mut self.entries {
            e.roi_label = Some(labels[e.roi_index].clone());
        }
        Ok(self)
    }

    /// `rank,roi_index,roi_label,percentage,score`, most salient first.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("rank,roi_index,roi_label,percentage,score\n");
        for (rank, e) in self.entries.iter().enumerate() {
            let label = e.roi_label.as_deref().unwrap_or("");
            let _ = writeln!(s, "{},{},{},{},{}", rank + 1, e.roi_index, label, e.percentage, e.score);
        }
        s
    }
}

/// Per-node L2 norm of the gradient of the predicted class's logit with
/// respect to that node's feature row, normalized to percentages.
pub fn saliency<N: GraphNet + ?Sized>(net: &N, graph: &ConnectomeGraph) -> Result<SaliencyReport> {
    let structure = GraphStructure::from_graph(graph)?;
    let n = graph.node_count();
    let mut tape = Tape::new();
    let x = tape.param(graph.node_features().clone());
    let input = GraphInput {
        structure: &structure,
        features: x,
        edge_mask: None,
    };
    let z = net.logits(&mut tape, &input)?;
    let p = softmax(tape.value(z).data());
    let predicted = predicted_label([p[0], p[1]]);
    let mut onehot = Tensor2::zeros(1, 2);
    onehot.set(0, predicted.class_index(), 1.0);
    let pick = tape.constant(onehot);
    let chosen = tape.mul(z, pick)?;
    let chosen = tape.sum(chosen)?;
    let mut grads = tape.backward(chosen)?;
    let g = grads.take(x).expect("features are a tape parameter");
    let scores: Vec<f64> = (0..n)
        .map(|i| g.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let total: f64 = scores.iter().sum();
    let uniform = total == 0.0;
    let percentages: Vec<f64> = if uniform {
        log::warn!("zero saliency gradient for {}; reporting uniform importance", graph.subject_id);
        vec![100.0 / n as f64; n]
    } else {
        scores.iter().map(|s| 100.0 * s / total).collect()
    };
    Ok(SaliencyReport {
        subject_id: Some(graph.subject_id.clone()),
        predicted: Some(predicted),
        n_subjects: 1,
        uniform_fallback: uniform,
        entries: ranked(&scores, &percentages),
    })
}

/// Averages per-ROI percentages (and scores) over subject reports.
pub fn cohort_saliency(reports: &[SaliencyReport]) -> Result<SaliencyReport> {
    let Some(first) = reports.first() else {
        return Err(Error::Contract("cohort saliency over zero subjects".into()));
    };
    let n = first.entries.len();
    let mut pct = vec![0.0; n];
    let mut score = vec![0.0; n];
    for r in reports {
        if r.entries.len() != n {
            return Err(Error::Contract("saliency reports disagree on ROI count".into()));
        }
        for e in &r.entries {
            pct[e.roi_index] += e.percentage;
            score[e.roi_index] += e.score;
        }
    }
    let m = reports.len() as f64;
    let pct: Vec<f64> = pct.iter().map(|v| v / m).collect();
    let score: Vec<f64> = score.iter().map(|v| v / m).collect();
    Ok(SaliencyReport {
        subject_id: None,
        predicted: None,
        n_subjects: reports.len(),
        uniform_fallback: reports.iter().all(|r| r.uniform_fallback),
        entries: ranked(&score, &pct),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphbuild::{build_graph, TimeSeriesMatrix};
    use crate::models::{Architecture, Model, ModelConfig};
    use crate::numcore::{SeededRng, Var};

    /// `logit_c = w_c · Σ_i a_i · sum(x_i)`.
    struct NodeWeighted {
        node_weights: Vec<f64>,
        class_weights: [f64; 2],
    }

    impl GraphNet for NodeWeighted {
        fn input_dim(&self) -> usize {
            self.node_weights.len()
        }

        fn logits(&self, tape: &mut Tape, input: &GraphInput) -> Result<Var> {
            let n = self.node_weights.len();
            let a = tape.constant(Tensor2::from_vec(1, n, self.node_weights.clone())?);
            let pooled = tape.matmul(a, input.features)?; // 1×d
            let d = tape.shape(input.features).1;
            let w = tape.constant(Tensor2::from_fn(d, 2, |_, c| self.class_weights[c]));
            tape.matmul(pooled, w)
        }
    }

    fn graph(n: usize, seed: u64) -> ConnectomeGraph {
        let mut rng = SeededRng::new(seed);
        let ts = TimeSeriesMatrix::new("s1", Tensor2::from_fn(40, n, |_, _| rng.normal(0.0, 1.0))).unwrap();
        build_graph(&ts, 0.3, Some(Label::Td), "site").unwrap()
    }

    #[test]
    fn symmetric_model_gives_equal_percentages() {
        let g = graph(6, 1);
        let net = NodeWeighted {
            node_weights: vec![1.0 / 6.0; 6],
            class_weights: [0.5, -0.25],
        };
        let r = saliency(&net, &g).unwrap();
        for p in r.percentages() {
            assert!((p - 100.0 / 6.0).abs() < 1e-9);
        }
        assert_eq!(r.predicted, Some(Label::Td));
    }

    #[test]
    fn concentrated_gradient() {
        let g = graph(5, 2);
        let net = NodeWeighted {
            node_weights: vec![0.0, 0.0, 3.0, 0.0, 0.0],
            class_weights: [1.0, -1.0],
        };
        let r = saliency(&net, &g).unwrap();
        assert_eq!(r.ranking()[0], 2);
        assert!((r.entries[0].percentage - 100.0).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_falls_back_to_uniform() {
        let g = graph(4, 3);
        let net = NodeWeighted {
            node_weights: vec![0.0; 4],
            class_weights: [1.0, 1.0],
        };
        let r = saliency(&net, &g).unwrap();
        assert!(r.uniform_fallback);
        assert_eq!(r.percentages(), vec![25.0; 4]);
    }

    #[test]
    fn percentages_sum_to_100_and_scale_invariance() {
        let g = graph(10, 4);
        let model = Model::new(ModelConfig::preset(Architecture::Gat, 10, 1)).unwrap();
        let r = saliency(&model, &g).unwrap();
        assert!((r.percentages().iter().sum::<f64>() - 100.0).abs() < 1e-9);
        assert!(r.entries.windows(2).all(|w| w[0].percentage >= w[1].percentage));

        let base = NodeWeighted {
            node_weights: vec![0.1, 0.5, 0.2, 0.9, 0.3, 0.05, 0.4, 0.6, 0.7, 0.8],
            class_weights: [1.0, 0.2],
        };
        let scaled = NodeWeighted {
            node_weights: base.node_weights.clone(),
            class_weights: [3.0, 0.6],
        };
        let a = saliency(&base, &g).unwrap();
        let b = saliency(&scaled, &g).unwrap();
        assert_eq!(a.ranking(), b.ranking());
        for (x, y) in a.percentages().iter().zip(b.percentages()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn cohort_average_and_csv() {
        let g1 = graph(3, 5);
        let mut g2 = graph(3, 6);
        g2.subject_id = "s2".into();
        let n1 = NodeWeighted {
            node_weights: vec![1.0, 0.0, 0.0],
            class_weights: [1.0, -1.0],
        };
        let n2 = NodeWeighted {
            node_weights: vec![0.0, 1.0, 0.0],
            class_weights: [1.0, -1.0],
        };
        let c = cohort_saliency(&[saliency(&n1, &g1).unwrap(), saliency(&n2, &g2).unwrap()]).unwrap();
        let p = c.percentages();
        assert!((p[0] - 50.0).abs() < 1e-12 && (p[1] - 50.0).abs() < 1e-12 && p[2] == 0.0);
        assert_eq!(c.n_subjects, 2);
        assert!(cohort_saliency(&[]).is_err());

        let labels: Vec<String> = ["PCC", "Precuneus", "mPFC"].iter().map(|s| s.to_string()).collect();
        let csv = c.with_roi_labels(&labels).unwrap().to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "rank,roi_index,roi_label,percentage,score");
        assert!(lines[1].starts_with("1,0,PCC,50,"));
        assert!(lines[3].starts_with("3,2,mPFC,0,"));
    }
}
