//! Graph classifiers: a two-layer GCN baseline, a deeper GCN with batch
//! normalization, and a two-layer multi-head GAT.
//!
//! Every architecture ends in global mean pooling and a linear layer to two
//! logits (index 1 = ASD).

mod checkpoint;
pub mod layers;

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graphbuild::ConnectomeGraph;
use crate::numcore::{SeededRng, Tape, Tensor2, Var};

pub use checkpoint::{ModelCheckpoint, TrainingMetadata, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use layers::{
    batchnorm, dropedge, dropout, gat_attention, gat_layer, gcn_layer, global_mean_pool, linear, AttentionHead, BatchStats,
    GraphInput, GraphStructure, HeadMerge, Mode, Propagation,
};

pub const NUM_CLASSES: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    GcnBaseline,
    GcnOptimised,
    Gat,
}

impl Architecture {
    pub const ALL: [Architecture; 3] = [Architecture::GcnBaseline, Architecture::GcnOptimised, Architecture::Gat];

    pub fn as_str(self) -> &'static str {
        match self {
            Architecture::GcnBaseline => "gcn_baseline",
            Architecture::GcnOptimised => "gcn_optimised",
            Architecture::Gat => "gat",
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Architecture {
    type Err = Error;

    /// Accepts both `gcn_baseline` and `gcn-baseline` spellings.
    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "gcn_baseline" => Ok(Architecture::GcnBaseline),
            "gcn_optimised" | "gcn_optimized" => Ok(Architecture::GcnOptimised),
            "gat" => Ok(Architecture::Gat),
            _ => Err(Error::InvalidParameter(format!("unknown architecture {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub architecture: Architecture,
    /// Node feature width; equals the ROI count for correlation-row features.
    pub input_dim: usize,
    /// Output width of each message-passing layer. For GAT layers that
    /// concatenate heads, each head is `hidden / heads` wide.
    pub hidden: Vec<usize>,
    pub heads: usize,
    pub dropout: f64,
    pub dropedge: f64,
    pub batchnorm: bool,
    pub seed: u64,
}

impl ModelConfig {
    pub fn preset(architecture: Architecture, input_dim: usize, seed: u64) -> Self {
        let (hidden, heads, dropout, dropedge, batchnorm) = match architecture {
            Architecture::GcnBaseline => (vec![64, 32], 1, 0.3, 0.0, false),
            Architecture::GcnOptimised => (vec![64, 64, 64], 1, 0.0, 0.0, true),
            Architecture::Gat => (vec![64, 64], 2, 0.5, 0.2, false),
        };
        ModelConfig {
            architecture,
            input_dim,
            hidden,
            heads,
            dropout,
            dropedge,
            batchnorm,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.input_dim == 0 {
            return bad("input_dim must be positive".into());
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad(format!("hidden widths must be non-empty and positive, got {:?}", self.hidden));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if !(0.0..1.0).contains(&self.dropedge) {
            return bad(format!("dropedge must be in [0, 1), got {}", self.dropedge));
        }
        if self.heads == 0 {
            return bad("heads must be positive".into());
        }
        if self.architecture == Architecture::Gat {
            let last = self.hidden.len() - 1;
            for (l, &h) in self.hidden[..last].iter().enumerate() {
                if h % self.heads != 0 {
                    return bad(format!("GAT layer {} width {h} is not divisible by {} heads", l + 1, self.heads));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor2,
}

#[derive(Clone, Copy, Debug)]
enum Init {
    Glorot { fan_in: usize, fan_out: usize },
    Zeros,
    Ones,
}

#[derive(Clone, Debug)]
struct NormSlots {
    gamma: usize,
    beta: usize,
    running_mean: usize,
    running_var: usize,
}

#[derive(Clone, Debug)]
enum LayerPlan {
    Gcn { weight: usize, bias: usize },
    Gat { heads: Vec<(usize, usize)>, merge: HeadMerge },
}

#[derive(Clone, Debug)]
struct Block {
    layer: LayerPlan,
    norm: Option<NormSlots>,
}

#[derive(Clone, Debug, Default)]
struct Layout {
    params: Vec<(String, (usize, usize), Init)>,
    buffers: Vec<(String, (usize, usize), Init)>,
    blocks: Vec<Block>,
    head: (usize, usize),
}

impl Layout {
    fn param(&mut self, name: String, shape: (usize, usize), init: Init) -> usize {
        self.params.push((name, shape, init));
        self.params.len() - 1
    }

    fn buffer(&mut self, name: String, shape: (usize, usize), init: Init) -> usize {
        self.buffers.push((name, shape, init));
        self.buffers.len() - 1
    }

    fn glorot(&mut self, name: String, fan_in: usize, fan_out: usize) -> usize {
        self.param(name, (fan_in, fan_out), Init::Glorot { fan_in, fan_out })
    }

    fn build(config: &ModelConfig) -> Result<Layout> {
        config.validate()?;
        let mut lay = Layout::default();
        let mut width = config.input_dim;
        let depth = config.hidden.len();
        for (l, &out) in config.hidden.iter().enumerate() {
            let tag = match config.architecture {
                Architecture::Gat => format!("gat{}", l + 1),
                _ => format!("gcn{}", l + 1),
            };
            let layer = match config.architecture {
                Architecture::GcnBaseline | Architecture::GcnOptimised => LayerPlan::Gcn {
                    weight: lay.glorot(format!("{tag}.weight"), width, out),
                    bias: lay.param(format!("{tag}.bias"), (1, out), Init::Zeros),
                },
                Architecture::Gat => {
                    let (merge, head_dim) = if l + 1 < depth {
                        (HeadMerge::Concat, out / config.heads)
                    } else {
                        (HeadMerge::Average, out)
                    };
                    let heads = (0..config.heads)
                        .map(|h| {
                            let w = lay.glorot(format!("{tag}.head{h}.weight"), width, head_dim);
                            let a = lay.glorot(format!("{tag}.head{h}.att"), 2 * head_dim, 1);
                            (w, a)
                        })
                        .collect();
                    LayerPlan::Gat { heads, merge }
                }
            };
            let norm = config.batchnorm.then(|| NormSlots {
                gamma: lay.param(format!("bn{}.gamma", l + 1), (1, out), Init::Ones),
                beta: lay.param(format!("bn{}.beta", l + 1), (1, out), Init::Zeros),
                running_mean: lay.buffer(format!("bn{}.running_mean", l + 1), (1, out), Init::Zeros),
                running_var: lay.buffer(format!("bn{}.running_var", l + 1), (1, out), Init::Ones),
            });
            lay.blocks.push(Block { layer, norm });
            width = out;
        }
        lay.head = (
            lay.glorot("head.weight".into(), width, NUM_CLASSES),
            lay.param("head.bias".into(), (1, NUM_CLASSES), Init::Zeros),
        );
        Ok(lay)
    }
}

fn init_tensor(shape: (usize, usize), init: Init, rng: &mut SeededRng) -> Tensor2 {
    match init {
        Init::Zeros => Tensor2::zeros(shape.0, shape.1),
        Init::Ones => Tensor2::ones(shape.0, shape.1),
        Init::Glorot { fan_in, fan_out } => {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            Tensor2::from_fn(shape.0, shape.1, |_, _| rng.uniform_range(-limit, limit))
        }
    }
}

/// Batch statistics from a training-mode forward pass, keyed by buffer.
#[derive(Clone, Debug, Default)]
pub struct RunningUpdates(Vec<(usize, usize, BatchStats)>);

impl RunningUpdates {
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Result of [`Model::forward`].
pub struct ForwardOutput {
    /// `1 × 2` logits.
    pub logits: Var,
    pub running: RunningUpdates,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    layout: Layout,
    params: Vec<NamedTensor>,
    buffers: Vec<NamedTensor>,
}

impl Model {
    /// Fresh model with Glorot-uniform weights, zero biases and unit
    /// batchnorm scales, drawn from the config's seed.
    pub fn new(config: ModelConfig) -> Result<Self> {
        let layout = Layout::build(&config)?;
        let mut rng = SeededRng::new(config.seed).child("init");
        let params = layout
            .params
            .iter()
            .map(|(name, shape, init)| NamedTensor {
                name: name.clone(),
                tensor: init_tensor(*shape, *init, &mut rng),
            })
            .collect();
        let buffers = layout
            .buffers
            .iter()
            .map(|(name, shape, init)| NamedTensor {
                name: name.clone(),
                tensor: init_tensor(*shape, *init, &mut rng),
            })
            .collect();
        Ok(Model {
            config,
            layout,
            params,
            buffers,
        })
    }

    /// Rebuilds a model from named tensors; every parameter and buffer of
    /// the config's layout must be present exactly once with its shape.
    pub fn from_tensors(config: ModelConfig, tensors: Vec<NamedTensor>) -> Result<Self> {
        let layout = Layout::build(&config)?;
        let mut by_name: HashMap<String, Tensor2> = HashMap::new();
        for t in tensors {
            if by_name.insert(t.name.clone(), t.tensor).is_some() {
                return Err(Error::Format(format!("duplicate tensor {:?}", t.name)));
            }
        }
        let mut take = |specs: &[(String, (usize, usize), Init)]| -> Result<Vec<NamedTensor>> {
            specs
                .iter()
                .map(|(name, shape, _)| {
                    let tensor = by_name
                        .remove(name)
                        .ok_or_else(|| Error::Format(format!("missing tensor {name:?}")))?;
                    if tensor.shape() != *shape {
                        return Err(Error::Format(format!(
                            "tensor {name:?} has shape {:?}, expected {shape:?}",
                            tensor.shape()
                        )));
                    }
                    Ok(NamedTensor {
                        name: name.clone(),
                        tensor,
                    })
                })
                .collect()
        };
        let params = take(&layout.params)?;
        let buffers = take(&layout.buffers)?;
        if let Some(extra) = by_name.keys().min() {
            return Err(Error::Format(format!("unexpected tensor {extra:?}")));
        }
        Ok(Model {
            config,
            layout,
            params,
            buffers,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[NamedTensor] {
        &self.params
    }

    pub fn buffers(&self) -> &[NamedTensor] {
        &self.buffers
    }

    pub fn param_tensors(&self) -> Vec<Tensor2> {
        self.params.iter().map(|p| p.tensor.clone()).collect()
    }

    /// Overwrites parameter values in layout order.
    pub fn set_param_tensors(&mut self, values: &[Tensor2]) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::Contract(format!(
                "expected {} parameter tensors, got {}",
                self.params.len(),
                values.len()
            )));
        }
        for (p, v) in self.params.iter_mut().zip(values) {
            if p.tensor.shape() != v.shape() {
                return Err(Error::Shape {
                    op: "set_param_tensors",
                    lhs: p.tensor.shape(),
                    rhs: v.shape(),
                });
            }
            p.tensor = v.clone();
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Records the parameters on `tape`, as trainable params or constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    tape.param(p.tensor.clone())
                } else {
                    tape.constant(p.tensor.clone())
                }
            })
            .collect()
    }

    /// Records one forward pass. `train` supplies the dropout stream and
    /// switches batchnorm to batch statistics; `None` is evaluation mode.
    /// DropEdge is applied by the caller when building `input.structure`.
    pub fn forward(&self, tape: &mut Tape, bound: &[Var], input: &GraphInput, mut train: Option<&mut SeededRng>) -> Result<ForwardOutput> {
        if bound.len() != self.params.len() {
            return Err(Error::Contract(format!(
                "expected {} bound parameters, got {}",
                self.params.len(),
                bound.len()
            )));
        }
        let (n, d) = tape.shape(input.features);
        if n != input.structure.node_count() || d != self.config.input_dim {
            return Err(Error::Shape {
                op: "model input",
                lhs: (n, d),
                rhs: (input.structure.node_count(), self.config.input_dim),
            });
        }
        let mut prop = Propagation::new();
        let mut running = RunningUpdates::default();
        let mut h = input.features;
        let depth = self.layout.blocks.len();
        for (l, block) in self.layout.blocks.iter().enumerate() {
            h = match &block.layer {
                LayerPlan::Gcn { weight, bias } => gcn_layer(tape, &mut prop, input, h, bound[*weight], bound[*bias])?,
                LayerPlan::Gat { heads, merge } => {
                    let heads: Vec<AttentionHead> = heads
                        .iter()
                        .map(|&(w, a)| AttentionHead {
                            weight: bound[w],
                            att: bound[a],
                        })
                        .collect();
                    gat_layer(tape, &mut prop, input, h, &heads, *merge)?
                }
            };
            if let Some(norm) = &block.norm {
                let rm = &self.buffers[norm.running_mean].tensor;
                let rv = &self.buffers[norm.running_var].tensor;
                let (y, stats) = batchnorm(tape, h, bound[norm.gamma], bound[norm.beta], (rm, rv), train.is_some())?;
                h = y;
                if let Some(stats) = stats {
                    running.0.push((norm.running_mean, norm.running_var, stats));
                }
            }
            h = match block.layer {
                LayerPlan::Gcn { .. } => tape.relu(h)?,
                LayerPlan::Gat { .. } => tape.elu(h, layers::ELU_ALPHA)?,
            };
            if l + 1 < depth {
                if let Some(rng) = train.as_deref_mut() {
                    h = dropout(tape, h, self.config.dropout, rng)?;
                }
            }
        }
        let pooled = global_mean_pool(tape, h)?;
        let logits = linear(tape, pooled, bound[self.layout.head.0], bound[self.layout.head.1])?;
        Ok(ForwardOutput { logits, running })
    }

    /// Exponential moving average update of the batchnorm running
    /// statistics: `r ← (1 − m) r + m · batch`.
    pub fn apply_running_updates(&mut self, updates: RunningUpdates) {
        let m = layers::BATCHNORM_MOMENTUM;
        for (mean_idx, var_idx, stats) in updates.0 {
            let blend = |old: &Tensor2, new: &Tensor2| {
                old.zip_map(new, |o, b| (1.0 - m) * o + m * b)
                    .expect("running statistics keep their layout shape")
            };
            self.buffers[mean_idx].tensor = blend(&self.buffers[mean_idx].tensor, &stats.mean);
            self.buffers[var_idx].tensor = blend(&self.buffers[var_idx].tensor, &stats.var_unbiased);
        }
    }
}

/// A frozen graph classifier that can be differentiated with respect to
/// its input features and edge mask.
pub trait GraphNet: Sync {
    fn input_dim(&self) -> usize;

    /// Evaluation-mode `1 × 2` output whose softmax is the class
    /// probability vector.
    fn logits(&self, tape: &mut Tape, input: &GraphInput) -> Result<Var>;

    /// Evaluation-mode class probabilities `[p(TD), p(ASD)]`.
    fn proba(&self, structure: &GraphStructure, features: &Tensor2) -> Result<[f64; 2]> {
        let mut tape = Tape::new();
        let x = tape.constant(features.clone());
        let input = GraphInput {
            structure,
            features: x,
            edge_mask: None,
        };
        let z = self.logits(&mut tape, &input)?;
        let p = softmax(tape.value(z).data());
        Ok([p[0], p[1]])
    }
}

impl GraphNet for Model {
    fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    fn logits(&self, tape: &mut Tape, input: &GraphInput) -> Result<Var> {
        let bound = self.bind(tape, false);
        Ok(self.forward(tape, &bound, input, None)?.logits)
    }
}

/// Numerically stable softmax of a short vector.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Evaluation-mode class probabilities `[p(TD), p(ASD)]` for one graph.
pub fn predict_proba<N: GraphNet + ?Sized>(net: &N, graph: &ConnectomeGraph) -> Result<[f64; 2]> {
    let structure = GraphStructure::from_graph(graph)?;
    net.proba(&structure, graph.node_features())
}
