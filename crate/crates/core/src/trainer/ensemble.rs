//! Independently seeded members combined by averaging their probabilities.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{train, EpochRecord, TrainConfig};
use crate::error::{Error, Result};
use crate::graphbuild::ConnectomeGraph;
use crate::io::{read_json, write_json};
use crate::models::{Architecture, GraphInput, GraphNet, GraphStructure, ModelCheckpoint, ModelConfig};
use crate::numcore::{SeededRng, Tape, Tensor2, Var};

pub const ENSEMBLE_MANIFEST: &str = "ensemble.json";

/// Seed of member `i`: a child stream of the base seed, so members differ in
/// initialization, shuffling, dropout and DropEdge.
pub fn member_seed(base_seed: u64, i: usize) -> u64 {
    SeededRng::new(base_seed).child_indexed("member", i as u64).seed()
}

#[derive(Clone, Debug)]
pub struct EnsembleModel {
    members: Vec<ModelCheckpoint>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    file: String,
    seed: u64,
    architecture: Architecture,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    members: Vec<ManifestEntry>,
}

impl EnsembleModel {
    pub fn new(members: Vec<ModelCheckpoint>) -> Result<Self> {
        let Some(first) = members.first() else {
            return Err(Error::Contract("an ensemble needs at least one member".into()));
        };
        let (arch, dim) = (first.model.config().architecture, first.model.config().input_dim);
        for (i, m) in members.iter().enumerate() {
            let c = m.model.config();
            if c.architecture != arch || c.input_dim != dim {
                return Err(Error::Contract(format!(
                    "member {i} is {} with input {}, expected {arch} with input {dim}",
                    c.architecture, c.input_dim
                )));
            }
        }
        Ok(EnsembleModel { members })
    }

    pub fn members(&self) -> &[ModelCheckpoint] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn seeds(&self) -> Vec<u64> {
        self.members.iter().map(|m| m.model.config().seed).collect()
    }

    /// Writes `member_<i>.ckpt` files plus an `ensemble.json` index.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut entries = Vec::new();
        for (i, m) in self.members.iter().enumerate() {
            let file = format!("member_{i}.ckpt");
            m.save(&dir.join(&file))?;
            entries.push(ManifestEntry {
                file,
                seed: m.model.config().seed,
                architecture: m.model.config().architecture,
            });
        }
        write_json(&dir.join(ENSEMBLE_MANIFEST), &Manifest { members: entries })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest = read_json(&dir.join(ENSEMBLE_MANIFEST))?;
        let members = manifest
            .members
            .iter()
            .map(|e| ModelCheckpoint::load(&dir.join(&e.file)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(members)
    }

    fn member_probas(&self, structure: &GraphStructure, features: &Tensor2) -> Result<Vec<[f64; 2]>> {
        self.members.iter().map(|m| m.model.proba(structure, features)).collect()
    }
}

/// Arithmetic mean of member probability vectors, accumulated in member
/// order.
pub fn mean_probabilities(member_probas: &[[f64; 2]]) -> Result<[f64; 2]> {
    if member_probas.is_empty() {
        return Err(Error::Contract("soft vote over zero members".into()));
    }
    let mut acc = [0.0; 2];
    for p in member_probas {
        acc[0] += p[0];
        acc[1] += p[1];
    }
    let m = member_probas.len() as f64;
    Ok([acc[0] / m, acc[1] / m])
}

/// Soft-vote class probabilities `[p(TD), p(ASD)]` for one graph.
pub fn soft_vote(ensemble: &EnsembleModel, graph: &ConnectomeGraph) -> Result<[f64; 2]> {
    let s = GraphStructure::from_graph(graph)?;
    ensemble.proba(&s, graph.node_features())
}

impl GraphNet for EnsembleModel {
    fn input_dim(&self) -> usize {
        self.members[0].model.config().input_dim
    }

    /// `log` of the mean member probabilities, whose softmax is the soft vote.
    fn logits(&self, tape: &mut Tape, input: &GraphInput) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for m in &self.members {
            let z = m.model.logits(tape, input)?;
            let p = tape.softmax_rows(z, None)?;
            acc = Some(match acc {
                None => p,
                Some(a) => tape.add(a, p)?,
            });
        }
        let mean = tape.scale(acc.expect("ensemble is non-empty"), 1.0 / self.members.len() as f64)?;
        tape.log(mean)
    }

    fn proba(&self, structure: &GraphStructure, features: &Tensor2) -> Result<[f64; 2]> {
        mean_probabilities(&self.member_probas(structure, features)?)
    }
}

#[derive(Clone, Debug)]
pub struct EnsembleOutcome {
    pub ensemble: EnsembleModel,
    pub histories: Vec<Vec<EpochRecord>>,
}

/// Trains `members` models from `template` on the same data. Member `i`
/// uses seed [`member_seed`]`(cfg.seed, i)` for both its initialization and
/// its training streams. Members train concurrently on the rayon pool.
pub fn train_ensemble(
    template: &ModelConfig,
    train_graphs: &[ConnectomeGraph],
    val_graphs: &[ConnectomeGraph],
    cfg: &TrainConfig,
    members: usize,
) -> Result<EnsembleOutcome> {
    if members == 0 {
        return Err(Error::InvalidParameter("members must be at least 1".into()));
    }
    cfg.validate()?;
    let results: Vec<_> = (0..members)
        .into_par_iter()
        .map(|i| {
            let seed = member_seed(cfg.seed, i);
            let config = ModelConfig {
                seed,
                ..template.clone()
            };
            let model = crate::models::Model::new(config)?;
            log::info!("training ensemble member {} of {members} (seed {seed})", i + 1);
            train(model, train_graphs, val_graphs, cfg, &SeededRng::new(seed).child("train"))
        })
        .collect::<Result<_>>()?;
    let (checkpoints, histories) = results.into_iter().map(|o| (o.checkpoint, o.history)).unzip();
    Ok(EnsembleOutcome {
        ensemble: EnsembleModel::new(checkpoints)?,
        histories,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{predict_proba, softmax, Model, TrainingMetadata};

    fn softmax_pair(z: &[f64]) -> [f64; 2] {
        let p = softmax(z);
        [p[0], p[1]]
    }

    fn checkpoint(arch: Architecture, dim: usize, seed: u64) -> ModelCheckpoint {
        let mut c = ModelConfig::preset(arch, dim, seed);
        c.hidden = c.hidden.iter().map(|h| h / 8).collect();
        ModelCheckpoint::new(Model::new(c).unwrap(), TrainingMetadata::default())
    }

    fn graph(n: usize, seed: u64) -> ConnectomeGraph {
        let mut rng = SeededRng::new(seed);
        let data = Tensor2::from_fn(30, n, |_, _| rng.normal(0.0, 1.0));
        let ts = crate::graphbuild::TimeSeriesMatrix::new("g", data).unwrap();
        crate::graphbuild::build_graph(&ts, 0.3, Some(crate::dataset::Label::Asd), "s").unwrap()
    }

    #[test]
    fn mean_of_two_members() {
        let p = mean_probabilities(&[[0.9, 0.1], [0.7, 0.3]]).unwrap();
        assert!((p[0] - 0.8).abs() < 1e-15 && (p[1] - 0.2).abs() < 1e-15);
        assert!(mean_probabilities(&[]).is_err());
    }

    #[test]
    fn mean_matches_accumulation_oracle() {
        let mut rng = SeededRng::new(2);
        let probas: Vec<[f64; 2]> = (0..5)
            .map(|_| {
                let a = rng.uniform();
                [1.0 - a, a]
            })
            .collect();
        let got = mean_probabilities(&probas).unwrap();
        let oracle: f64 = probas.iter().map(|p| p[1]).sum::<f64>() / 5.0;
        assert!((got[1] - oracle).abs() <= 1e-15);
        assert!((got[0] + got[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_member_and_identical_members() {
        let g = graph(8, 1);
        let m = checkpoint(Architecture::Gat, 8, 4);
        let single = EnsembleModel::new(vec![m.clone()]).unwrap();
        assert_eq!(soft_vote(&single, &g).unwrap(), predict_proba(&m.model, &g).unwrap());
        let triple = EnsembleModel::new(vec![m.clone(), m.clone(), m.clone()]).unwrap();
        let a = soft_vote(&triple, &g).unwrap();
        let b = predict_proba(&m.model, &g).unwrap();
        assert!((a[1] - b[1]).abs() < 1e-15);
    }

    #[test]
    fn vote_argmax_ignores_member_order() {
        let g = graph(8, 2);
        let members: Vec<ModelCheckpoint> = (0..4).map(|s| checkpoint(Architecture::GcnBaseline, 8, s)).collect();
        let fwd = soft_vote(&EnsembleModel::new(members.clone()).unwrap(), &g).unwrap();
        let mut rev = members;
        rev.reverse();
        let back = soft_vote(&EnsembleModel::new(rev).unwrap(), &g).unwrap();
        assert_eq!(fwd[1] > fwd[0], back[1] > back[0]);
        assert!((fwd[1] - back[1]).abs() < 1e-15);
    }

    #[test]
    fn logits_softmax_to_vote() {
        let g = graph(8, 3);
        let ens = EnsembleModel::new((0..3).map(|s| checkpoint(Architecture::Gat, 8, s)).collect()).unwrap();
        let s = GraphStructure::from_graph(&g).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(g.node_features().clone());
        let input = GraphInput {
            structure: &s,
            features: x,
            edge_mask: None,
        };
        let z = ens.logits(&mut tape, &input).unwrap();
        let via_logits = softmax_pair(tape.value(z).data());
        let direct = soft_vote(&ens, &g).unwrap();
        assert!((via_logits[1] - direct[1]).abs() < 1e-12);
    }

    #[test]
    fn mismatched_members_rejected() {
        assert!(EnsembleModel::new(vec![]).is_err());
        let a = checkpoint(Architecture::Gat, 8, 0);
        let b = checkpoint(Architecture::Gat, 9, 0);
        let c = checkpoint(Architecture::GcnBaseline, 8, 0);
        assert!(EnsembleModel::new(vec![a.clone(), b]).is_err());
        assert!(EnsembleModel::new(vec![a, c]).is_err());
    }

    #[test]
    fn member_seeds_are_distinct_and_stable() {
        let seeds: Vec<u64> = (0..5).map(|i| member_seed(42, i)).collect();
        for i in 0..5 {
            for j in 0..i {
                assert_ne!(seeds[i], seeds[j]);
            }
        }
        assert_eq!(seeds, (0..5).map(|i| member_seed(42, i)).collect::<Vec<_>>());
    }

    #[test]
    fn save_and_load_round_trip() {
        let ens = EnsembleModel::new((0..2).map(|s| checkpoint(Architecture::GcnOptimised, 6, s)).collect()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ens.save(dir.path()).unwrap();
        let back = EnsembleModel::load(dir.path()).unwrap();
        assert_eq!(back.seeds(), ens.seeds());
        for (a, b) in back.members().iter().zip(ens.members()) {
            assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
        }
    }
}
