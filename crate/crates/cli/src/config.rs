//! Run configuration, layered as CLI flag > config file > `CONNECTOME_SEED`
//! (seed only) > default.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use connectome_gnn::dataset::SyntheticSpec;
use connectome_gnn::explain::ExplainConfig;
use connectome_gnn::models::{Architecture, ModelConfig};
use connectome_gnn::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

pub const SEED_ENV: &str = "CONNECTOME_SEED";
pub const EFFECTIVE_CONFIG: &str = "config.json";

/// Members trained when none are requested: an ensemble for GAT, a single
/// model for the GCN variants.
pub fn default_members(arch: Architecture) -> usize {
    match arch {
        Architecture::Gat => 5,
        Architecture::GcnBaseline | Architecture::GcnOptimised => 1,
    }
}

/// A fully resolved run. Serialized as the effective config, which reloads
/// through [`ConfigLayer`] to reproduce the run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub manifest: Option<PathBuf>,
    /// In-memory synthetic cohort, used instead of a manifest.
    pub synthetic: Option<SyntheticSpec>,
    /// Prebuilt graph store, used instead of a manifest.
    pub graphs: Option<PathBuf>,
    /// Existing split file; computed from the seed when unset.
    pub split: Option<PathBuf>,
    pub out: PathBuf,
    /// Expected ROI count of every graph, when set.
    pub atlas_size: Option<usize>,
    pub arch: Architecture,
    pub members: usize,
    pub dropedge: f64,
    pub density: f64,
    pub sigma: f64,
    pub copies: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Explain the test subjects after evaluation when set.
    pub explain: Option<ExplainConfig>,
}

/// One source of settings; unset fields fall through to the next layer.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConfigLayer {
    pub manifest: Option<PathBuf>,
    pub synthetic: Option<SyntheticSpec>,
    pub graphs: Option<PathBuf>,
    pub split: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub atlas_size: Option<usize>,
    pub arch: Option<Architecture>,
    pub members: Option<usize>,
    pub dropedge: Option<f64>,
    pub density: Option<f64>,
    pub sigma: Option<f64>,
    pub copies: Option<usize>,
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub seed: Option<u64>,
    pub explain: Option<ExplainConfig>,
}

impl ConfigLayer {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Fields of `self`, falling back to `lower`.
    pub fn over(self, lower: ConfigLayer) -> ConfigLayer {
        ConfigLayer {
            manifest: self.manifest.or(lower.manifest),
            synthetic: self.synthetic.or(lower.synthetic),
            graphs: self.graphs.or(lower.graphs),
            split: self.split.or(lower.split),
            out: self.out.or(lower.out),
            atlas_size: self.atlas_size.or(lower.atlas_size),
            arch: self.arch.or(lower.arch),
            members: self.members.or(lower.members),
            dropedge: self.dropedge.or(lower.dropedge),
            density: self.density.or(lower.density),
            sigma: self.sigma.or(lower.sigma),
            copies: self.copies.or(lower.copies),
            epochs: self.epochs.or(lower.epochs),
            lr: self.lr.or(lower.lr),
            batch_size: self.batch_size.or(lower.batch_size),
            seed: self.seed.or(lower.seed),
            explain: self.explain.or(lower.explain),
        }
    }

    /// Applies defaults and validates. `env_seed` is the raw value of
    /// [`SEED_ENV`], consulted only when no layer sets a seed.
    pub fn resolve(self, env_seed: Option<&str>) -> Result<RunConfig> {
        let d = TrainConfig::default();
        let arch = self.arch.unwrap_or(Architecture::Gat);
        let seed = match (self.seed, env_seed) {
            (Some(s), _) => s,
            (None, Some(raw)) => raw
                .trim()
                .parse()
                .with_context(|| format!("{SEED_ENV}={raw:?} is not an unsigned integer"))?,
            (None, None) => d.seed,
        };
        let Some(out) = self.out else {
            bail!("no output directory (--out)");
        };
        let cfg = RunConfig {
            manifest: self.manifest,
            synthetic: self.synthetic,
            graphs: self.graphs,
            split: self.split,
            out,
            atlas_size: self.atlas_size,
            arch,
            members: self.members.unwrap_or_else(|| default_members(arch)),
            dropedge: self.dropedge.unwrap_or(ModelConfig::preset(arch, 1, 0).dropedge),
            density: self.density.unwrap_or(d.density),
            sigma: self.sigma.unwrap_or(d.sigma),
            copies: self.copies.unwrap_or(d.copies),
            epochs: self.epochs.unwrap_or(d.epochs),
            lr: self.lr.unwrap_or(d.lr),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            seed,
            explain: self.explain,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl From<RunConfig> for ConfigLayer {
    fn from(c: RunConfig) -> Self {
        ConfigLayer {
            manifest: c.manifest,
            synthetic: c.synthetic,
            graphs: c.graphs,
            split: c.split,
            out: Some(c.out),
            atlas_size: c.atlas_size,
            arch: Some(c.arch),
            members: Some(c.members),
            dropedge: Some(c.dropedge),
            density: Some(c.density),
            sigma: Some(c.sigma),
            copies: Some(c.copies),
            epochs: Some(c.epochs),
            lr: Some(c.lr),
            batch_size: Some(c.batch_size),
            seed: Some(c.seed),
            explain: c.explain,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let inputs = [self.manifest.is_some(), self.synthetic.is_some(), self.graphs.is_some()];
        match inputs.iter().filter(|b| **b).count() {
            0 => bail!("no input: pass --manifest, --graphs or --synthetic"),
            1 => {}
            _ => bail!("set only one of a manifest, a graph store and a synthetic cohort"),
        }
        if let Some(spec) = &self.synthetic {
            spec.validate().context("synthetic cohort")?;
            if let Some(r) = self.atlas_size {
                if r != spec.n_rois {
                    bail!("atlas_size {r} disagrees with the synthetic cohort's {} ROIs", spec.n_rois);
                }
            }
        }
        if self.atlas_size == Some(0) {
            bail!("atlas_size must be positive");
        }
        if self.members == 0 {
            bail!("members must be at least 1");
        }
        if !(0.0..1.0).contains(&self.dropedge) {
            bail!("dropedge must be in [0, 1), got {}", self.dropedge);
        }
        self.train_config().validate()?;
        // Input width is only known once graphs exist; 1 exercises the rest.
        self.model_template(1).validate()?;
        if let Some(e) = &self.explain {
            e.validate()?;
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            lr: self.lr,
            batch_size: self.batch_size,
            density: self.density,
            sigma: self.sigma,
            copies: self.copies,
            seed: self.seed,
        }
    }

    pub fn model_template(&self, input_dim: usize) -> ModelConfig {
        ModelConfig {
            dropedge: self.dropedge,
            ..ModelConfig::preset(self.arch, input_dim, self.seed)
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> ConfigLayer {
        ConfigLayer {
            out: Some("run".into()),
            manifest: Some("m.jsonl".into()),
            ..ConfigLayer::default()
        }
    }

    #[test]
    fn documented_defaults() {
        let c = base().resolve(None).unwrap();
        assert_eq!(c.density, 0.20);
        assert_eq!(c.sigma, 0.05);
        assert_eq!(c.copies, 5);
        assert_eq!(c.epochs, 100);
        assert_eq!(c.lr, 0.001);
        assert_eq!(c.batch_size, 16);
        assert_eq!(c.arch, Architecture::Gat);
        assert_eq!(c.members, 5);
        assert_eq!(c.dropedge, 0.2);
        let gcn = ConfigLayer {
            arch: Some(Architecture::GcnBaseline),
            ..base()
        }
        .resolve(None)
        .unwrap();
        assert_eq!((gcn.members, gcn.dropedge), (1, 0.0));
    }

    #[test]
    fn precedence() {
        let flags = ConfigLayer {
            epochs: Some(7),
            ..ConfigLayer::default()
        };
        let file = ConfigLayer {
            epochs: Some(50),
            lr: Some(0.01),
            seed: Some(9),
            ..base()
        };
        let c = flags.clone().over(file.clone()).resolve(Some("3")).unwrap();
        assert_eq!((c.epochs, c.lr, c.seed), (7, 0.01, 9));
        let c = flags.over(base()).resolve(Some(" 3 ")).unwrap();
        assert_eq!(c.seed, 3);
        assert!(base().resolve(Some("x")).is_err());
    }

    #[test]
    fn echoed_config_reproduces_itself() {
        let c = ConfigLayer {
            explain: Some(ExplainConfig::default()),
            arch: Some(Architecture::GcnOptimised),
            ..base()
        }
        .resolve(None)
        .unwrap();
        let layer: ConfigLayer = serde_json::from_str(&c.to_json()).unwrap();
        assert_eq!(layer.resolve(Some("77")).unwrap(), c);
    }

    #[test]
    fn rejects_invalid() {
        let bad = [
            ConfigLayer { epochs: Some(0), ..base() },
            ConfigLayer { members: Some(0), ..base() },
            ConfigLayer { dropedge: Some(1.0), ..base() },
            ConfigLayer { density: Some(0.0), ..base() },
            ConfigLayer { batch_size: Some(0), ..base() },
            ConfigLayer { synthetic: Some(SyntheticSpec::standard(0.6, 1)), ..base() },
            ConfigLayer { out: None, ..base() },
            ConfigLayer { manifest: None, ..base() },
        ];
        for layer in bad {
            assert!(layer.clone().resolve(None).is_err(), "{layer:?}");
        }
        let atlas = ConfigLayer {
            manifest: None,
            synthetic: Some(SyntheticSpec::standard(0.6, 1)),
            atlas_size: Some(116),
            ..base()
        };
        assert!(atlas.resolve(None).is_err());
        assert!(serde_json::from_str::<ConfigLayer>(r#"{"epochz": 3}"#).is_err());
    }
}
