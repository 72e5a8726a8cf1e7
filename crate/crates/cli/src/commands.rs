use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use connectome_gnn::dataset::{generate_synthetic, load_manifest, stratified_split, SyntheticSpec, DEFAULT_FRACTIONS};
use connectome_gnn::explain::ExplainConfig;
use connectome_gnn::io::write_json;
use connectome_gnn::models::Architecture;
use connectome_gnn::numcore::SeededRng;
use connectome_gnn::trainer::evaluate;

use crate::config::{ConfigLayer, RunConfig, SEED_ENV};
use crate::pipeline::{explain_stage, load_net, load_split, run_pipeline, run_training, SPLIT_FILE};
use crate::store::{build_all, write_graphs, GRAPH_DIR};

#[derive(Debug, Parser)]
#[command(name = "connectome", version, about = "Connectome graph classification with GCN/GAT models")]
pub struct Cli {
    /// Worker threads for parallel stages (default: all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic cohort (manifest plus time-series CSVs).
    Synth(SynthArgs),
    /// Build one thresholded graph per manifest subject.
    BuildGraphs(BuildArgs),
    /// Site- and label-stratified train/val/test split of a manifest.
    Split(SplitArgs),
    /// Train a single model.
    Train(RunFlags),
    /// Train independently seeded members for soft voting.
    TrainEnsemble(RunFlags),
    /// Evaluate a checkpoint or ensemble directory on one split.
    Evaluate(EvaluateArgs),
    /// Edge masks and saliency for the test split.
    Explain(ExplainArgs),
    /// Split, augment, train, evaluate and optionally explain.
    Pipeline(RunFlags),
    /// Plot-ready tables from pipeline output directories.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub subjects: usize,
    #[arg(long, default_value_t = 39)]
    pub rois: usize,
    #[arg(long, default_value_t = 17)]
    pub sites: usize,
    #[arg(long, default_value_t = 0.6)]
    pub effect: f64,
    /// Std of the per-subject Fisher-z jitter on planted edges.
    #[arg(long, default_value_t = 0.0)]
    pub heterogeneity: f64,
    #[arg(long, default_value_t = 200)]
    pub timepoints: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
}

impl SynthArgs {
    pub fn spec(&self) -> SyntheticSpec {
        let mut spec = SyntheticSpec::standard(self.effect, self.seed);
        if self.rois != spec.n_rois {
            spec.planted_edges = connectome_gnn::dataset::planted_star(self.rois, 2);
        }
        SyntheticSpec {
            n_subjects: self.subjects,
            n_rois: self.rois,
            n_sites: self.sites,
            heterogeneity: self.heterogeneity,
            timepoints: self.timepoints,
            ..spec
        }
    }
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value_t = 0.20)]
    pub density: f64,
    /// Graphs go to `<out>/graphs`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Run settings shared by the training commands. Unset flags fall back to
/// `--config`, then to the documented defaults.
#[derive(Debug, Clone, Default, Args)]
pub struct RunFlags {
    /// JSON config file; an earlier run's `config.json` works.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Graph store written by `build-graphs`.
    #[arg(long)]
    pub graphs: Option<PathBuf>,
    /// Split file written by `split`.
    #[arg(long)]
    pub split: Option<PathBuf>,
    /// Use the standard synthetic cohort instead of a manifest.
    #[arg(long)]
    pub synthetic: bool,
    #[arg(long, requires = "synthetic")]
    pub effect: Option<f64>,
    #[arg(long, requires = "synthetic", default_value_t = 42)]
    pub synthetic_seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub atlas_size: Option<usize>,
    /// Edge density kept by the threshold [default: 0.20]
    #[arg(long)]
    pub density: Option<f64>,
    /// Augmentation noise std [default: 0.05]
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Augmented copies per training subject [default: 5]
    #[arg(long)]
    pub copies: Option<usize>,
    /// [default: 100]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// [default: 0.001]
    #[arg(long)]
    pub lr: Option<f64>,
    /// [default: 16]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// [default: gat]
    #[arg(long, value_parser = parse_arch)]
    pub arch: Option<Architecture>,
    /// [default: 5 for gat, 1 otherwise]
    #[arg(long)]
    pub members: Option<usize>,
    /// [default: 0.2 for gat, 0 otherwise]
    #[arg(long)]
    pub dropedge: Option<f64>,
    /// [default: $CONNECTOME_SEED, else 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Explain the test subjects after evaluation.
    #[arg(long)]
    pub explain: bool,
    /// Optimization steps per edge mask [default: 200]
    #[arg(long)]
    pub explain_steps: Option<usize>,
}

fn parse_arch(s: &str) -> std::result::Result<Architecture, String> {
    s.parse::<Architecture>().map_err(|e| e.to_string())
}

impl RunFlags {
    pub fn layer(&self) -> ConfigLayer {
        let explain = (self.explain || self.explain_steps.is_some()).then(|| {
            let d = ExplainConfig::default();
            ExplainConfig {
                steps: self.explain_steps.unwrap_or(d.steps),
                ..d
            }
        });
        ConfigLayer {
            manifest: self.manifest.clone(),
            synthetic: self
                .synthetic
                .then(|| SyntheticSpec::standard(self.effect.unwrap_or(0.6), self.synthetic_seed)),
            graphs: self.graphs.clone(),
            split: self.split.clone(),
            out: self.out.clone(),
            atlas_size: self.atlas_size,
            arch: self.arch,
            members: self.members,
            dropedge: self.dropedge,
            density: self.density,
            sigma: self.sigma,
            copies: self.copies,
            epochs: self.epochs,
            lr: self.lr,
            batch_size: self.batch_size,
            seed: self.seed,
            explain,
        }
    }

    /// Flags over the config file, with `CONNECTOME_SEED` as seed fallback.
    pub fn resolve(&self, overrides: ConfigLayer) -> Result<RunConfig> {
        let file = match &self.config {
            Some(p) => ConfigLayer::load(p)?,
            None => ConfigLayer::default(),
        };
        let env = std::env::var(SEED_ENV).ok();
        overrides.over(self.layer()).over(file).resolve(env.as_deref())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SetChoice {
    Val,
    Test,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Checkpoint file or ensemble directory.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value_t = SetChoice::Test)]
    pub set: SetChoice,
    #[command(flatten)]
    pub run: RunFlags,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub run: RunFlags,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Pipeline output directory; repeat to compare runs.
    #[arg(long = "run", required = true)]
    pub runs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(raw) => Ok(Some(raw.trim().parse().with_context(|| format!("{SEED_ENV}={raw:?}"))?)),
        Err(_) => Ok(None),
    }
}

fn print_json<T: serde::Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => {
            let records = generate_synthetic(&a.spec(), &a.out)?;
            println!("wrote {} subjects to {}", records.len(), a.out.join("manifest.jsonl").display());
        }
        Command::BuildGraphs(a) => cmd_build_graphs(&a.manifest, a.density, &a.out)?,
        Command::Split(a) => {
            let records = load_manifest(&a.manifest)?;
            let seed = a.seed.or(env_seed()?).unwrap_or(0);
            let split = stratified_split(&records, DEFAULT_FRACTIONS, &SeededRng::new(seed).child("split"))?;
            write_json(&a.out.join(SPLIT_FILE), &split)?;
            println!("{}", split_line(&split));
        }
        Command::Train(flags) => {
            if flags.members.is_some_and(|m| m != 1) {
                bail!("train fits one model; use train-ensemble for --members");
            }
            let cfg = flags.resolve(ConfigLayer {
                members: Some(1),
                ..ConfigLayer::default()
            })?;
            report_training(&cfg, run_training(&cfg)?);
        }
        Command::TrainEnsemble(flags) => {
            let cfg = flags.resolve(ConfigLayer::default())?;
            report_training(&cfg, run_training(&cfg)?);
        }
        Command::Evaluate(a) => {
            let cfg = a.run.resolve(ConfigLayer::default())?;
            let net = load_net(&a.checkpoint)?;
            let (p, _) = load_split(&cfg)?;
            let (graphs, name) = match a.set {
                SetChoice::Val => (&p.val, "val"),
                SetChoice::Test => (&p.test, "test"),
            };
            let report = evaluate(&net, graphs).context("evaluate stage failed")?;
            write_json(&cfg.out.join(format!("metrics_{name}.json")), &report)?;
            print_json(&report);
        }
        Command::Explain(a) => {
            let cfg = a.run.resolve(ConfigLayer::default())?;
            let net = load_net(&a.checkpoint)?;
            let (p, _) = load_split(&cfg)?;
            let ecfg = cfg.explain.clone().unwrap_or_default();
            let summary = explain_stage(&net, &p.test, &ecfg, cfg.seed, p.cohort.planted.as_deref(), &cfg.out)
                .context("explain stage failed")?;
            let top: Vec<String> = summary.roi_ranking.iter().take(5).map(|r| r.to_string()).collect();
            println!("explained {} subjects; most salient ROIs {}", summary.subjects.len(), top.join(", "));
            if let Some(rate) = summary.recovery_rate(0.6) {
                println!("planted precision >= 0.6 on {:.1}% of correct subjects", 100.0 * rate);
            }
        }
        Command::Pipeline(flags) => {
            let cfg = flags.resolve(ConfigLayer::default())?;
            let out = run_pipeline(&cfg)?;
            print_json(&out.metrics.test);
        }
        Command::Report(a) => {
            for path in crate::report::write_report(&a.runs, &a.out)? {
                println!("{}", path.display());
            }
        }
    }
    Ok(())
}

fn split_line(split: &connectome_gnn::dataset::SplitAssignment) -> String {
    use connectome_gnn::dataset::Split;
    format!(
        "train {} / val {} / test {}",
        split.count(Split::Train),
        split.count(Split::Val),
        split.count(Split::Test)
    )
}

fn report_training(cfg: &RunConfig, val: Option<connectome_gnn::trainer::MetricsReport>) {
    match val {
        Some(r) => println!("trained {} x {}; val accuracy {:.4}", cfg.members, cfg.arch, r.accuracy),
        None => println!("trained {} x {}; no validation split", cfg.members, cfg.arch),
    }
}

/// Builds and stores every graph; fails after writing the good ones when
/// any subject fails.
pub fn cmd_build_graphs(manifest: &Path, density: f64, out: &Path) -> Result<()> {
    let records = load_manifest(manifest)?;
    if !(density > 0.0 && density <= 1.0) {
        bail!("density must be in (0, 1], got {density}");
    }
    let built = build_all(&records, density);
    write_graphs(&out.join(GRAPH_DIR), &built.graphs)?;
    println!("{}", built.summary());
    if !built.failures.is_empty() {
        for f in &built.failures {
            eprintln!("failed {}: {}", f.subject_id, f.error);
        }
        bail!("{} of {} subjects failed", built.failures.len(), records.len());
    }
    Ok(())
}
