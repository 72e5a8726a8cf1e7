//! Post-hoc explanations: gradient saliency per ROI and learned edge masks.

mod explainer;
mod saliency;

pub use explainer::{explain_all, gnn_explain, gnn_explain_from, mask_fidelity, EdgeMask, ExplainConfig, Fidelity};
pub use saliency::{cohort_saliency, saliency, RoiImportance, SaliencyReport};
