//! GNN building blocks recorded on a [`Tape`].
//!
//! Every layer works on dense `n × d` node-feature matrices. Edge masks, when
//! present, are an `E × 1` column of values in `(0, 1)` aligned with the
//! graph's edge list:
//!
//! * GCN: the normalized propagation matrix is computed from the binary
//!   adjacency with self-loops, `P = D̂^{-1/2} Â D̂^{-1/2}`; masking scales
//!   each off-diagonal entry `P_ij = P_ji` by `mask[e]`. Self-loops are never
//!   masked and the degrees are not recomputed.
//! * GAT: `log mask[e]` is added to the pre-softmax scores `e_ij` and
//!   `e_ji`, so `α_ij ∝ mask[e] · exp(e_ij)`.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::graphbuild::ConnectomeGraph;
use crate::numcore::{SeededRng, Tape, Tensor2, Var};

pub const GAT_NEGATIVE_SLOPE: f64 = 0.2;
pub const ELU_ALPHA: f64 = 1.0;
pub const BATCHNORM_EPS: f64 = 1e-5;
pub const BATCHNORM_MOMENTUM: f64 = 0.1;

/// Per-graph constants shared by every layer.
#[derive(Clone, Debug)]
pub struct GraphStructure {
    n: usize,
    pairs: Arc<[(usize, usize)]>,
    /// Row-major `n × n`: neighbors plus self.
    neighbor_mask: Arc<[bool]>,
    gcn_diag: Tensor2,
    gcn_offdiag: Tensor2,
    gcn_full: Tensor2,
}

impl GraphStructure {
    pub fn new(n: usize, pairs: &[(usize, usize)]) -> Result<Self> {
        let mut mask = vec![false; n * n];
        for i in 0..n {
            mask[i * n + i] = true;
        }
        for &(i, j) in pairs {
            if i >= n || j >= n || i == j {
                return Err(Error::Contract(format!("invalid edge ({i}, {j}) for {n} nodes")));
            }
            mask[i * n + j] = true;
            mask[j * n + i] = true;
        }
        let deg: Vec<f64> = (0..n)
            .map(|i| mask[i * n..(i + 1) * n].iter().filter(|&&m| m).count() as f64)
            .collect();
        let mut gcn_diag = Tensor2::zeros(n, n);
        let mut gcn_offdiag = Tensor2::zeros(n, n);
        for i in 0..n {
            gcn_diag.set(i, i, 1.0 / deg[i]);
            for j in 0..n {
                if i != j && mask[i * n + j] {
                    gcn_offdiag.set(i, j, 1.0 / (deg[i] * deg[j]).sqrt());
                }
            }
        }
        let gcn_full = gcn_diag.zip_map(&gcn_offdiag, |a, b| a + b)?;
        Ok(GraphStructure {
            n,
            pairs: pairs.to_vec().into(),
            neighbor_mask: mask.into(),
            gcn_diag,
            gcn_offdiag,
            gcn_full,
        })
    }

    pub fn from_graph(g: &ConnectomeGraph) -> Result<Self> {
        Self::new(g.node_count(), &g.edge_pairs())
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    pub fn edge_count(&self) -> usize {
        self.pairs.len()
    }

    pub fn pairs(&self) -> &Arc<[(usize, usize)]> {
        &self.pairs
    }

    /// `D̂^{-1/2} Â D̂^{-1/2}` for the unmasked graph.
    pub fn normalized_adjacency(&self) -> &Tensor2 {
        &self.gcn_full
    }
}

/// Node features, structure and optional edge mask for one forward pass.
pub struct GraphInput<'a> {
    pub structure: &'a GraphStructure,
    pub features: Var,
    pub edge_mask: Option<Var>,
}

/// Tape nodes derived once per forward pass and reused by every layer.
pub struct Propagation {
    gcn: Option<Var>,
    attention_bias: Option<Var>,
}

impl Propagation {
    pub fn new() -> Self {
        Propagation {
            gcn: None,
            attention_bias: None,
        }
    }

    fn gcn(&mut self, tape: &mut Tape, input: &GraphInput) -> Result<Var> {
        if let Some(v) = self.gcn {
            return Ok(v);
        }
        let s = input.structure;
        let v = match input.edge_mask {
            None => tape.constant(s.gcn_full.clone()),
            Some(mask) => {
                let scattered = tape.scatter_sym(mask, s.pairs.clone(), s.n)?;
                let off = tape.constant(s.gcn_offdiag.clone());
                let diag = tape.constant(s.gcn_diag.clone());
                let scaled = tape.mul(off, scattered)?;
                tape.add(diag, scaled)?
            }
        };
        self.gcn = Some(v);
        Ok(v)
    }

    fn attention_bias(&mut self, tape: &mut Tape, input: &GraphInput) -> Result<Option<Var>> {
        let Some(mask) = input.edge_mask else {
            return Ok(None);
        };
        if let Some(v) = self.attention_bias {
            return Ok(Some(v));
        }
        let log_mask = tape.log(mask)?;
        let v = tape.scatter_sym(log_mask, input.structure.pairs.clone(), input.structure.n)?;
        self.attention_bias = Some(v);
        Ok(Some(v))
    }
}

impl Default for Propagation {
    fn default() -> Self {
        Self::new()
    }
}

fn check_rows(tape: &Tape, h: Var, n: usize, op: &'static str) -> Result<()> {
    if tape.shape(h).0 != n {
        return Err(Error::Shape {
            op,
            lhs: tape.shape(h),
            rhs: (n, tape.shape(h).1),
        });
    }
    Ok(())
}

/// `H' = P H W + b` (activation left to the caller).
pub fn gcn_layer(tape: &mut Tape, prop: &mut Propagation, input: &GraphInput, h: Var, weight: Var, bias: Var) -> Result<Var> {
    check_rows(tape, h, input.structure.n, "gcn_layer")?;
    let hw = tape.matmul(h, weight)?;
    let p = prop.gcn(tape, input)?;
    let agg = tape.matmul(p, hw)?;
    tape.add(agg, bias)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadMerge {
    Concat,
    Average,
}

/// One attention head's parameters: `W` is `in × d`, `att` is `2d × 1`
/// (first half scores the receiving node, second half the neighbor).
#[derive(Clone, Copy, Debug)]
pub struct AttentionHead {
    pub weight: Var,
    pub att: Var,
}

/// Attention coefficients for one head, `n × n`, rows summing to 1 over
/// `N(i) ∪ {i}`.
pub fn gat_attention(tape: &mut Tape, prop: &mut Propagation, input: &GraphInput, wh: Var, att: Var) -> Result<Var> {
    let d = tape.shape(wh).1;
    if tape.shape(att) != (2 * d, 1) {
        return Err(Error::Shape {
            op: "gat attention vector",
            lhs: tape.shape(att),
            rhs: (2 * d, 1),
        });
    }
    let dst_idx: Vec<usize> = (0..d).collect();
    let src_idx: Vec<usize> = (d..2 * d).collect();
    let a_dst = tape.gather_rows(att, &dst_idx)?;
    let a_src = tape.gather_rows(att, &src_idx)?;
    let s_dst = tape.matmul(wh, a_dst)?; // n×1
    let s_src = tape.matmul(wh, a_src)?; // n×1
    let s_src_t = tape.transpose(s_src)?; // 1×n
    let scores = tape.add(s_dst, s_src_t)?;
    let mut scores = tape.leaky_relu(scores, GAT_NEGATIVE_SLOPE)?;
    if let Some(bias) = prop.attention_bias(tape, input)? {
        scores = tape.add(scores, bias)?;
    }
    tape.softmax_rows(scores, Some(input.structure.neighbor_mask.clone()))
}

pub fn gat_layer(
    tape: &mut Tape,
    prop: &mut Propagation,
    input: &GraphInput,
    h: Var,
    heads: &[AttentionHead],
    merge: HeadMerge,
) -> Result<Var> {
    check_rows(tape, h, input.structure.n, "gat_layer")?;
    if heads.is_empty() {
        return Err(Error::Contract("GAT layer needs at least one head".into()));
    }
    let mut outs = Vec::with_capacity(heads.len());
    for head in heads {
        let wh = tape.matmul(h, head.weight)?;
        let alpha = gat_attention(tape, prop, input, wh, head.att)?;
        outs.push(tape.matmul(alpha, wh)?);
    }
    match merge {
        HeadMerge::Concat => tape.concat_cols(&outs),
        HeadMerge::Average => {
            let mut acc = outs[0];
            for &o in &outs[1..] {
                acc = tape.add(acc, o)?;
            }
            tape.scale(acc, 1.0 / heads.len() as f64)
        }
    }
}

/// Batch statistics observed by a training-mode batchnorm, used to update
/// the running estimates afterwards.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Tensor2,
    pub var_unbiased: Tensor2,
}

/// Batch normalization over the node dimension of one graph.
///
/// Training mode normalizes with the graph's own (biased) statistics and
/// returns them; evaluation mode uses the frozen running estimates.
pub fn batchnorm(
    tape: &mut Tape,
    x: Var,
    gamma: Var,
    beta: Var,
    running: (&Tensor2, &Tensor2),
    train: bool,
) -> Result<(Var, Option<BatchStats>)> {
    let n = tape.shape(x).0;
    if train {
        let mean = tape.mean_rows(x)?;
        let xc = tape.sub(x, mean)?;
        let sq = tape.mul(xc, xc)?;
        let var = tape.mean_rows(sq)?;
        let eps = tape.constant(Tensor2::scalar(BATCHNORM_EPS));
        let var_eps = tape.add(var, eps)?;
        let inv = tape.powf(var_eps, -0.5)?;
        let xn = tape.mul(xc, inv)?;
        let scaled = tape.mul(xn, gamma)?;
        let y = tape.add(scaled, beta)?;
        let correction = if n > 1 { n as f64 / (n as f64 - 1.0) } else { 1.0 };
        let stats = BatchStats {
            mean: tape.value(mean).clone(),
            var_unbiased: tape.value(var).map(|v| v * correction),
        };
        Ok((y, Some(stats)))
    } else {
        let (rm, rv) = running;
        let mean = tape.constant(rm.clone());
        let inv = tape.constant(rv.map(|v| 1.0 / (v + BATCHNORM_EPS).sqrt()));
        let xc = tape.sub(x, mean)?;
        let xn = tape.mul(xc, inv)?;
        let scaled = tape.mul(xn, gamma)?;
        Ok((tape.add(scaled, beta)?, None))
    }
}

/// Column-wise mean over nodes: `n × d → 1 × d`.
pub fn global_mean_pool(tape: &mut Tape, h: Var) -> Result<Var> {
    if tape.shape(h).0 == 0 {
        return Err(Error::Contract("cannot pool an empty graph".into()));
    }
    tape.mean_rows(h)
}

pub fn linear(tape: &mut Tape, x: Var, weight: Var, bias: Var) -> Result<Var> {
    let y = tape.matmul(x, weight)?;
    tape.add(y, bias)
}

/// Inverted dropout: keeps each entry with probability `1 − rate` and
/// rescales by `1 / (1 − rate)`.
pub fn dropout(tape: &mut Tape, x: Var, rate: f64, rng: &mut SeededRng) -> Result<Var> {
    if rate <= 0.0 {
        return Ok(x);
    }
    let (r, c) = tape.shape(x);
    let scale = 1.0 / (1.0 - rate);
    let mask = Tensor2::from_fn(r, c, |_, _| if rng.bernoulli(rate) { 0.0 } else { scale });
    let m = tape.constant(mask);
    tape.mul(x, m)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Removes each undirected edge independently with probability `rate` in
/// training mode; evaluation mode returns the graph untouched and draws no
/// random numbers.
pub fn dropedge(graph: &ConnectomeGraph, rate: f64, rng: &mut SeededRng, mode: Mode) -> Result<ConnectomeGraph> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidParameter(format!("dropedge rate must be in [0, 1), got {rate}")));
    }
    if mode == Mode::Eval || rate == 0.0 {
        return Ok(graph.clone());
    }
    Ok(graph.filter_edges(|_, _| !rng.bernoulli(rate)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{gradcheck, Tensor2, DEFAULT_STEP};

    fn random(rng: &mut SeededRng, r: usize, c: usize) -> Tensor2 {
        Tensor2::from_fn(r, c, |_, _| rng.normal(0.0, 1.0))
    }

    fn path4() -> GraphStructure {
        GraphStructure::new(4, &[(0, 1), (1, 2), (2, 3)]).unwrap()
    }

    #[test]
    fn isolated_node_reduces_to_linear() {
        let s = GraphStructure::new(1, &[]).unwrap();
        let mut tape = Tape::new();
        let h = tape.constant(Tensor2::from_rows(&[vec![1.0, 2.0]]));
        let w = tape.constant(Tensor2::from_rows(&[vec![0.5, -1.0, 2.0], vec![1.0, 0.0, -0.5]]));
        let b = tape.constant(Tensor2::from_rows(&[vec![0.1, 0.2, 0.3]]));
        let input = GraphInput {
            structure: &s,
            features: h,
            edge_mask: None,
        };
        let out = gcn_layer(&mut tape, &mut Propagation::new(), &input, h, w, b).unwrap();
        assert_eq!(tape.value(out), &Tensor2::from_rows(&[vec![2.6, -0.8, 1.3]]));
    }

    #[test]
    fn connected_pair_with_identity_weight() {
        let s = GraphStructure::new(2, &[(0, 1)]).unwrap();
        let mut tape = Tape::new();
        let hv = vec![0.3, -1.5];
        let h = tape.constant(Tensor2::from_rows(&[hv.clone(), hv.clone()]));
        let w = tape.constant(Tensor2::identity(2));
        let b = tape.constant(Tensor2::from_rows(&[vec![1.0, 1.0]]));
        let input = GraphInput {
            structure: &s,
            features: h,
            edge_mask: None,
        };
        let out = gcn_layer(&mut tape, &mut Propagation::new(), &input, h, w, b).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert!((tape.value(out).get(i, j) - (hv[j] + 1.0)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn gcn_matches_dense_oracle_on_path() {
        let mut rng = SeededRng::new(4);
        let hv = random(&mut rng, 4, 3);
        let wv = random(&mut rng, 3, 2);
        // Â with self-loops, degrees 2,3,3,2
        let a_hat = Tensor2::from_rows(&[
            vec![1.0, 1.0, 0.0, 0.0],
            vec![1.0, 1.0, 1.0, 0.0],
            vec![0.0, 1.0, 1.0, 1.0],
            vec![0.0, 0.0, 1.0, 1.0],
        ]);
        let deg = [2.0_f64, 3.0, 3.0, 2.0];
        let norm = Tensor2::from_fn(4, 4, |i, j| a_hat.get(i, j) / (deg[i] * deg[j]).sqrt());
        let expected = norm.matmul(&hv).unwrap().matmul(&wv).unwrap();

        let s = path4();
        let mut tape = Tape::new();
        let h = tape.constant(hv);
        let w = tape.constant(wv);
        let b = tape.constant(Tensor2::zeros(1, 2));
        let input = GraphInput {
            structure: &s,
            features: h,
            edge_mask: None,
        };
        let out = gcn_layer(&mut tape, &mut Propagation::new(), &input, h, w, b).unwrap();
        for (x, y) in tape.value(out).data().iter().zip(expected.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn unit_mask_leaves_gcn_unchanged() {
        let mut rng = SeededRng::new(8);
        let s = path4();
        let hv = random(&mut rng, 4, 3);
        let wv = random(&mut rng, 3, 2);
        let run = |mask: Option<Tensor2>| {
            let mut tape = Tape::new();
            let h = tape.constant(hv.clone());
            let w = tape.constant(wv.clone());
            let b = tape.constant(Tensor2::zeros(1, 2));
            let m = mask.map(|m| tape.constant(m));
            let input = GraphInput {
                structure: &s,
                features: h,
                edge_mask: m,
            };
            let out = gcn_layer(&mut tape, &mut Propagation::new(), &input, h, w, b).unwrap();
            tape.value(out).clone()
        };
        let plain = run(None);
        let masked = run(Some(Tensor2::ones(3, 1)));
        for (a, b) in plain.data().iter().zip(masked.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    fn gat_alpha(s: &GraphStructure, hv: Tensor2, wv: Tensor2, av: Tensor2) -> Tensor2 {
        let mut tape = Tape::new();
        let h = tape.constant(hv);
        let w = tape.constant(wv);
        let a = tape.constant(av);
        let input = GraphInput {
            structure: s,
            features: h,
            edge_mask: None,
        };
        let wh = tape.matmul(h, w).unwrap();
        let alpha = gat_attention(&mut tape, &mut Propagation::new(), &input, wh, a).unwrap();
        tape.value(alpha).clone()
    }

    #[test]
    fn single_node_attention_is_one() {
        let s = GraphStructure::new(1, &[]).unwrap();
        let alpha = gat_alpha(&s, Tensor2::from_rows(&[vec![0.4, 2.0]]), Tensor2::identity(2), Tensor2::ones(4, 1));
        assert_eq!(alpha.get(0, 0), 1.0);
    }

    #[test]
    fn identical_neighbors_share_attention() {
        let s = GraphStructure::new(3, &[(0, 1), (0, 2)]).unwrap();
        let mut rng = SeededRng::new(3);
        let shared = vec![0.7, -0.2];
        let hv = Tensor2::from_rows(&[vec![1.0, 1.0], shared.clone(), shared]);
        let alpha = gat_alpha(&s, hv, random(&mut rng, 2, 3), random(&mut rng, 6, 1));
        assert!((alpha.get(0, 1) - alpha.get(0, 2)).abs() < 1e-15);
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let s = GraphStructure::new(5, &[(0, 1), (0, 3), (1, 2), (2, 4), (3, 4), (1, 4)]).unwrap();
        let mut rng = SeededRng::new(12);
        let alpha = gat_alpha(&s, random(&mut rng, 5, 4), random(&mut rng, 4, 3), random(&mut rng, 6, 1));
        for i in 0..5 {
            let row: f64 = (0..5).map(|j| alpha.get(i, j)).sum();
            assert!((row - 1.0).abs() < 1e-12);
            for j in 0..5 {
                let neighbor = i == j || s.neighbor_mask[i * 5 + j];
                assert_eq!(alpha.get(i, j) > 0.0, neighbor);
            }
        }
    }

    #[test]
    fn pooling() {
        let mut tape = Tape::new();
        let h = tape.constant(Tensor2::from_rows(&[vec![1.0, -2.0], vec![-1.0, 2.0]]));
        let p = global_mean_pool(&mut tape, h).unwrap();
        assert_eq!(tape.value(p), &Tensor2::zeros(1, 2));
        let empty = tape.constant(Tensor2::zeros(0, 3));
        assert!(global_mean_pool(&mut tape, empty).is_err());

        let mut rng = SeededRng::new(6);
        let hv = random(&mut rng, 6, 8);
        let h = tape.constant(hv.clone());
        let p = global_mean_pool(&mut tape, h).unwrap();
        for j in 0..8 {
            let mean = (0..6).map(|i| hv.get(i, j)).sum::<f64>() / 6.0;
            assert!((tape.value(p).get(0, j) - mean).abs() < 1e-15);
        }
    }

    #[test]
    fn layer_gradients() {
        let mut rng = SeededRng::new(21);
        let s = GraphStructure::new(6, &[(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (0, 5), (1, 4)]).unwrap();
        let probe = random(&mut rng, 6, 4);
        let params = vec![
            random(&mut rng, 6, 3), // features
            random(&mut rng, 3, 4), // gcn weight
            random(&mut rng, 1, 4), // gcn bias
            random(&mut rng, 3, 2), // gat head weights
            random(&mut rng, 4, 1),
            random(&mut rng, 3, 2),
            random(&mut rng, 4, 1),
            Tensor2::from_fn(7, 1, |_, _| rng.uniform_range(0.2, 0.9)), // edge mask
            Tensor2::from_fn(1, 4, |_, _| rng.uniform_range(0.5, 1.5)), // bn gamma
            random(&mut rng, 1, 4),                                      // bn beta
        ];
        let rm = Tensor2::zeros(1, 4);
        let rv = Tensor2::ones(1, 4);
        for masked in [false, true] {
            for train_bn in [false, true] {
                let f = |tape: &mut Tape, p: &[Var]| {
                    let input = GraphInput {
                        structure: &s,
                        features: p[0],
                        edge_mask: masked.then_some(p[7]),
                    };
                    let mut prop = Propagation::new();
                    let g = gcn_layer(tape, &mut prop, &input, p[0], p[1], p[2])?;
                    let (g, _) = batchnorm(tape, g, p[8], p[9], (&rm, &rv), train_bn)?;
                    let heads = [
                        AttentionHead { weight: p[3], att: p[4] },
                        AttentionHead { weight: p[5], att: p[6] },
                    ];
                    let a = gat_layer(tape, &mut prop, &input, p[0], &heads, HeadMerge::Concat)?;
                    let b = gat_layer(tape, &mut prop, &input, p[0], &heads, HeadMerge::Average)?;
                    let b = tape.elu(b, ELU_ALPHA)?;
                    let mix = tape.add(g, a)?;
                    let probe = tape.constant(probe.clone());
                    let weighted = tape.mul(mix, probe)?;
                    let pooled = global_mean_pool(tape, weighted)?;
                    let s1 = tape.sum(pooled)?;
                    let s2 = tape.sum(b)?;
                    tape.add(s1, s2)
                };
                let err = gradcheck(f, &params, DEFAULT_STEP).unwrap();
                assert!(err < 1e-4, "masked={masked} train_bn={train_bn}: {err}");
            }
        }
    }

    #[test]
    fn dropedge_modes() {
        let mut rng = SeededRng::new(1);
        let ts = crate::graphbuild::TimeSeriesMatrix::new("s", random(&mut rng, 40, 10)).unwrap();
        let g = crate::graphbuild::build_graph(&ts, 0.5, None, "x").unwrap();
        let mut r = SeededRng::new(2);
        assert_eq!(dropedge(&g, 0.0, &mut r, Mode::Train).unwrap().edges(), g.edges());
        let mut before = r.clone();
        assert_eq!(dropedge(&g, 0.5, &mut r, Mode::Eval).unwrap().edges(), g.edges());
        assert_eq!(r.uniform(), before.uniform());
        let dropped = dropedge(&g, 0.5, &mut r, Mode::Train).unwrap();
        assert!(dropped.edges().len() < g.edges().len());
        assert_eq!(dropped.node_count(), g.node_count());
        assert!(dropedge(&g, 1.0, &mut r, Mode::Train).is_err());
    }
}
