//! Command-line surface. Flags override config-file values, which override
//! defaults; every run writes the fully resolved config next to its reports.

mod commands;

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::data::SplitKind;
use crate::model::{FeatureSet, HyperParams};

pub use commands::{
    cmd_ablate_layers, cmd_ablate_sparsity, cmd_analyze, cmd_eval, cmd_gradcheck, cmd_train,
    load_split, AblationRow, DataSplit, EvalRecord,
};

#[derive(Debug, Parser)]
#[command(name = "imcgae", version, about = "Graph autoencoder for rating matrix completion")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Leave-one-out heuristic correlation analysis of a rating file.
    Analyze(RunArgs),
    /// Train, keep the best-test parameters, write a checkpoint.
    Train(RunArgs),
    /// Evaluate a checkpoint on the test side, imputing unseen nodes.
    Eval(RunArgs),
    /// Train on subsampled training sets against a shared test set.
    AblateSparsity(RunArgs),
    /// Train with 1 to 5 propagation layers.
    AblateLayers(RunArgs),
    /// Finite-difference check of every differentiable primitive.
    Gradcheck(RunArgs),
}

impl Command {
    pub fn parts(&self) -> (CommandKind, &RunArgs) {
        match self {
            Command::Analyze(a) => (CommandKind::Analyze, a),
            Command::Train(a) => (CommandKind::Train, a),
            Command::Eval(a) => (CommandKind::Eval, a),
            Command::AblateSparsity(a) => (CommandKind::AblateSparsity, a),
            Command::AblateLayers(a) => (CommandKind::AblateLayers, a),
            Command::Gradcheck(a) => (CommandKind::Gradcheck, a),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CommandKind {
    Analyze,
    Train,
    Eval,
    AblateSparsity,
    AblateLayers,
    Gradcheck,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Feature {
    Identical,
    Role,
    Latent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitArg {
    /// Separate --train and --test files.
    Files,
    /// Uniform random holdout of --split-fraction of the ratings.
    Random,
    /// Every rating of --split-fraction of the users moves to the test side.
    Node,
}

impl From<SplitArg> for SplitKind {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Files => SplitKind::CanonicalFiles,
            SplitArg::Random => SplitKind::RandomHoldout,
            SplitArg::Node => SplitKind::NodeHoldout,
        }
    }
}

/// Flags shared by every subcommand. Unset flags fall back to the config
/// file and then to defaults.
#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// TOML file with any of the options below (underscored names).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Field separator; `\t` or `tab` for tabs. Default tab.
    #[arg(long)]
    pub delimiter: Option<String>,
    #[arg(long, value_enum)]
    pub split: Option<SplitArg>,
    /// Held-out share for random and node splits. Default 0.1.
    #[arg(long)]
    pub split_fraction: Option<f64>,
    /// Seed for holdout splits and sparsity subsampling. Default 0.
    #[arg(long)]
    pub split_seed: Option<u64>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub dim_id: Option<usize>,
    #[arg(long)]
    pub dim_role: Option<usize>,
    #[arg(long)]
    pub dim_lat: Option<usize>,
    #[arg(long)]
    pub dim_dec: Option<usize>,
    #[arg(long)]
    pub p0: Option<f64>,
    #[arg(long)]
    pub theta: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Input features to enable, comma separated. Default all three.
    #[arg(long, value_enum, value_delimiter = ',')]
    pub features: Option<Vec<Feature>>,
    /// Training-set ratios for ablate-sparsity.
    #[arg(long, value_delimiter = ',')]
    pub ratio_list: Option<Vec<f64>>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Checkpoint read by eval. Default `<out>/ckpt.bin`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

/// On-disk config: the same options as [`RunArgs`]. Also the format of
/// `config.resolved`, which therefore reproduces a run when fed back.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub command: Option<CommandKind>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test: Option<PathBuf>,
    pub delimiter: Option<String>,
    pub split: Option<SplitArg>,
    pub split_fraction: Option<f64>,
    pub split_seed: Option<u64>,
    pub layers: Option<usize>,
    pub dim_id: Option<usize>,
    pub dim_role: Option<usize>,
    pub dim_dec: Option<usize>,
    pub dim_lat: Option<usize>,
    pub p0: Option<f64>,
    pub theta: Option<f64>,
    pub lambda: Option<f64>,
    pub lr: Option<f64>,
    pub epochs: Option<usize>,
    pub seed: Option<u64>,
    pub features: Option<Vec<Feature>>,
    pub ratio_list: Option<Vec<f64>>,
    pub out: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

pub const DEFAULT_RATIOS: [f64; 5] = [1.0, 0.2, 0.1, 0.05, 0.01];

/// Fully resolved settings of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub command: CommandKind,
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub delimiter: String,
    pub split: SplitArg,
    pub split_fraction: f64,
    pub split_seed: u64,
    pub hyper: HyperParams,
    pub ratios: Vec<f64>,
    pub out: PathBuf,
    pub checkpoint: Option<PathBuf>,
}

fn unescape_delimiter(d: &str) -> String {
    match d {
        "\\t" | "tab" => "\t".to_owned(),
        other => other.to_owned(),
    }
}

fn feature_set(list: &[Feature]) -> FeatureSet {
    FeatureSet {
        identical: list.contains(&Feature::Identical),
        role: list.contains(&Feature::Role),
        latent: list.contains(&Feature::Latent),
    }
}

fn feature_list(f: FeatureSet) -> Vec<Feature> {
    [
        (f.identical, Feature::Identical),
        (f.role, Feature::Role),
        (f.latent, Feature::Latent),
    ]
    .into_iter()
    .filter_map(|(on, x)| on.then_some(x))
    .collect()
}

impl RunConfig {
    /// Merges flags over an optional config file over defaults.
    pub fn resolve(command: CommandKind, args: &RunArgs) -> anyhow::Result<Self> {
        let file = match &args.config {
            Some(p) => ConfigFile::load(p)?,
            None => ConfigFile::default(),
        };
        let d = HyperParams::default();
        macro_rules! pick {
            ($field:ident, $default:expr) => {
                args.$field.clone().or(file.$field.clone()).unwrap_or($default)
            };
        }
        let features = args.features.clone().or(file.features.clone());
        let hyper = HyperParams {
            layers: pick!(layers, d.layers),
            dim_id: pick!(dim_id, d.dim_id),
            dim_role: pick!(dim_role, d.dim_role),
            dim_lat: pick!(dim_lat, d.dim_lat),
            dim_dec: pick!(dim_dec, d.dim_dec),
            p0: pick!(p0, d.p0),
            theta: pick!(theta, d.theta),
            lambda: pick!(lambda, d.lambda),
            lr: pick!(lr, d.lr),
            epochs: pick!(epochs, d.epochs),
            seed: pick!(seed, d.seed),
            features: features.as_deref().map_or(d.features, feature_set),
        };
        let cfg = RunConfig {
            command,
            train: args.train.clone().or(file.train.clone()),
            test: args.test.clone().or(file.test.clone()),
            delimiter: unescape_delimiter(&pick!(delimiter, "\t".to_owned())),
            split: pick!(split, SplitArg::Files),
            split_fraction: pick!(split_fraction, 0.1),
            split_seed: pick!(split_seed, 0),
            hyper,
            ratios: pick!(ratio_list, DEFAULT_RATIOS.to_vec()),
            out: pick!(out, PathBuf::from("runs/latest")),
            checkpoint: args.checkpoint.clone().or(file.checkpoint.clone()),
        };
        cfg.check()?;
        Ok(cfg)
    }

    /// Validates values and that every referenced input exists.
    pub fn check(&self) -> anyhow::Result<()> {
        if self.command != CommandKind::Gradcheck {
            self.hyper.validate()?;
            let train = self
                .train
                .as_ref()
                .context("--train is required for this command")?;
            ensure_exists(train)?;
            if let Some(t) = &self.test {
                ensure_exists(t)?;
            }
            let needs_test = self.command != CommandKind::Analyze;
            if needs_test && self.split == SplitArg::Files && self.test.is_none() {
                bail!("--test is required with --split files");
            }
        }
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            bail!("--split-fraction must lie in (0, 1), got {}", self.split_fraction);
        }
        if self.ratios.is_empty() || self.ratios.iter().any(|r| !(*r > 0.0 && *r <= 1.0)) {
            bail!("--ratio-list entries must lie in (0, 1]");
        }
        if self.command == CommandKind::Eval {
            ensure_exists(&self.checkpoint_path())?;
        }
        Ok(())
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint
            .clone()
            .unwrap_or_else(|| self.out.join("ckpt.bin"))
    }

    pub fn to_file(&self) -> ConfigFile {
        let h = &self.hyper;
        ConfigFile {
            command: Some(self.command),
            train: self.train.clone(),
            test: self.test.clone(),
            delimiter: Some(self.delimiter.clone()),
            split: Some(self.split),
            split_fraction: Some(self.split_fraction),
            split_seed: Some(self.split_seed),
            layers: Some(h.layers),
            dim_id: Some(h.dim_id),
            dim_role: Some(h.dim_role),
            dim_lat: Some(h.dim_lat),
            dim_dec: Some(h.dim_dec),
            p0: Some(h.p0),
            theta: Some(h.theta),
            lambda: Some(h.lambda),
            lr: Some(h.lr),
            epochs: Some(h.epochs),
            seed: Some(h.seed),
            features: Some(feature_list(h.features)),
            ratio_list: Some(self.ratios.clone()),
            out: Some(self.out.clone()),
            checkpoint: self.checkpoint.clone(),
        }
    }

    pub fn resolved_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string(&self.to_file())?)
    }
}

fn ensure_exists(p: &Path) -> anyhow::Result<()> {
    if !p.exists() {
        bail!("{} does not exist", p.display());
    }
    Ok(())
}

/// Parses `argv`-style arguments and runs the command.
pub fn run(cli: Cli) -> anyhow::Result<()> {
    let (kind, args) = cli.command.parts();
    let cfg = RunConfig::resolve(kind, args)?;
    match kind {
        CommandKind::Analyze => cmd_analyze(&cfg).map(drop),
        CommandKind::Train => cmd_train(&cfg).map(drop),
        CommandKind::Eval => cmd_eval(&cfg).map(drop),
        CommandKind::AblateSparsity => cmd_ablate_sparsity(&cfg).map(drop),
        CommandKind::AblateLayers => cmd_ablate_layers(&cfg).map(drop),
        CommandKind::Gradcheck => {
            let results = cmd_gradcheck(&cfg)?;
            let failed: Vec<&str> = results
                .iter()
                .filter(|r| !r.passed)
                .map(|r| r.name.as_str())
                .collect();
            if !failed.is_empty() {
                bail!("gradient check failed for: {}", failed.join(", "));
            }
            Ok(())
        }
    }
}
