//! Run configuration: defaults, then a TOML file, then command-line flags.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use fusionseg::{ModelConfig, Profile, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    /// Hold out one of `folds` folds for validation.
    #[default]
    Kfold,
    /// 8:1:1 train/validation/test partition.
    Ratio,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub images: Option<PathBuf>,
    pub masks: Option<PathBuf>,
    pub split: SplitKind,
    pub folds: usize,
    pub fold: usize,
    pub split_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            images: None,
            masks: None,
            split: SplitKind::Kfold,
            folds: 5,
            fold: 0,
            split_seed: 0,
        }
    }
}

/// Model keys a config file may set on top of the chosen profile.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelOverrides {
    pub profile: Option<Profile>,
    pub input_size: Option<usize>,
    pub embed_dim: Option<usize>,
    pub depths: Option<[usize; 4]>,
    pub heads: Option<[usize; 4]>,
    pub window: Option<usize>,
    pub mlp_ratio: Option<usize>,
    pub use_catm: Option<bool>,
    pub use_afb: Option<bool>,
}

impl ModelOverrides {
    fn apply(&self, cfg: &mut ModelConfig) {
        macro_rules! set {
            ($($f:ident),*) => {$(if let Some(v) = self.$f { cfg.$f = v; })*};
        }
        set!(input_size, embed_dim, depths, heads, window, mlp_ratio, use_catm, use_afb);
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub model: ModelOverrides,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub output: Option<PathBuf>,
}

impl FileConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Validation(format!("config: {}", e.message().trim())))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("config: cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProfileArg {
    Tiny,
    Paper,
}

impl From<ProfileArg> for Profile {
    fn from(p: ProfileArg) -> Self {
        match p {
            ProfileArg::Tiny => Profile::Tiny,
            ProfileArg::Paper => Profile::Paper,
        }
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct TrainArgs {
    /// TOML config file; flags given here take precedence over it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub profile: Option<ProfileArg>,
    /// Fold held out for validation.
    #[arg(long)]
    pub fold: Option<usize>,
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long, value_enum)]
    pub split: Option<SplitKind>,
    #[arg(long)]
    pub no_catm: bool,
    #[arg(long)]
    pub no_afb: bool,
    #[arg(long)]
    pub no_augment: bool,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub input_size: Option<usize>,
    #[arg(long)]
    pub images: Option<PathBuf>,
    #[arg(long)]
    pub masks: Option<PathBuf>,
    /// Run directory for checkpoints, history and manifest.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Fully resolved and validated settings of a training run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub output: PathBuf,
}

pub const DEFAULT_OUTPUT: &str = "runs/latest";

impl RunConfig {
    /// Merges defaults, the optional config file and `args`, then
    /// validates. Data paths are only required when `require_data` is set.
    pub fn resolve(args: &TrainArgs, require_data: bool) -> Result<Self, CliError> {
        let file = match &args.config {
            Some(p) => FileConfig::load(p)?,
            None => FileConfig::default(),
        };
        let profile = args
            .profile
            .map(Profile::from)
            .or(file.model.profile)
            .unwrap_or(Profile::Tiny);
        let mut model = ModelConfig::for_profile(profile);
        file.model.apply(&mut model);
        if let Some(w) = args.window {
            model.window = w;
        }
        if let Some(s) = args.input_size {
            model.input_size = s;
        }
        if args.no_catm {
            model.use_catm = false;
        }
        if args.no_afb {
            model.use_afb = false;
        }

        let mut train = file.train;
        macro_rules! flag {
            ($($f:ident),*) => {$(if let Some(v) = args.$f { train.$f = v; })*};
        }
        flag!(epochs, lr, weight_decay, batch_size, seed);
        if args.no_augment {
            train.augment = false;
        }

        let mut data = file.data;
        if let Some(p) = &args.images {
            data.images = Some(p.clone());
        }
        if let Some(p) = &args.masks {
            data.masks = Some(p.clone());
        }
        if let Some(k) = args.fold {
            data.fold = k;
        }
        if let Some(n) = args.folds {
            data.folds = n;
        }
        if let Some(s) = args.split {
            data.split = s;
        }

        let output = args.out.clone().or(file.output).unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT));
        let cfg = Self { model, train, data, output };
        cfg.validate(require_data)?;
        Ok(cfg)
    }

    pub fn validate(&self, require_data: bool) -> Result<(), CliError> {
        prefixed("model", self.model.validate())?;
        prefixed("train", self.train.validate())?;
        let d = &self.data;
        if d.split == SplitKind::Kfold {
            if d.folds < 2 {
                return Err(CliError::Validation(format!("data.folds: need at least 2 folds, got {}", d.folds)));
            }
            if d.fold >= d.folds {
                return Err(CliError::Validation(format!("data.fold: {} is out of range for {} folds", d.fold, d.folds)));
            }
        }
        if require_data {
            for (key, path) in [("data.images", &d.images), ("data.masks", &d.masks)] {
                match path {
                    None => return Err(CliError::Validation(format!("{key}: required path is missing"))),
                    Some(p) if !p.is_dir() => {
                        return Err(CliError::Validation(format!("{key}: {} is not a directory", p.display())))
                    }
                    _ => {}
                }
            }
        }
        Ok(())
    }
}

fn prefixed(section: &str, r: fusionseg::Result<()>) -> Result<(), CliError> {
    r.map_err(|e| match e {
        fusionseg::Error::Config { key, msg } => CliError::Validation(format!("{section}.{key}: {msg}")),
        other => CliError::Validation(format!("{section}: {other}")),
    })
}
