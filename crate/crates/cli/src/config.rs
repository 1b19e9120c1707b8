//! `key = value` run configuration files.

use std::path::{Path, PathBuf};

use igu_lora::ig::QuadMode;
use igu_lora::score::UncertaintyCentering;
use igu_lora::tasks::PlantedSpec;
use igu_lora::trainer::{Ablation, OptimizerKind, TrainConfig};

use crate::CliError;

/// Every accepted key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("learning_rate", "optimizer step size"),
    ("batch_size", "rows per mini-batch"),
    ("epochs", "maximum number of epochs"),
    ("n_quad", "quadrature intervals N"),
    ("quad_mode", "stochastic | full"),
    ("beta", "sets beta1 and beta2 together"),
    ("beta1", "smoothing of the sensitivity mean"),
    ("beta2", "smoothing of the uncertainty"),
    ("epsilon", "SNR denominator floor"),
    ("optimizer", "sgd | adam"),
    ("patience", "validation evaluations without improvement before stopping"),
    ("seed", "training seed"),
    ("ablation", "none | no_alpha | multiplicative_score"),
    ("svd_every", "recompute SVD views every this many steps"),
    ("centering", "updated | prior"),
    ("r0", "initial rank per layer"),
    ("b_final", "final total rank budget"),
    ("start_epoch", "first epoch of the pruning window"),
    ("end_epoch", "end of the pruning window"),
    ("prune_interval", "prune boundary spacing in epochs"),
    ("gamma", "accepted, inert"),
    ("t_init", "accepted, inert"),
    ("t_final", "accepted, inert"),
    ("delta_t", "accepted, inert"),
    ("layer_dims", "comma-separated layer widths, e.g. 16,32,8"),
    ("planted_ranks", "comma-separated teacher update ranks, e.g. 6,2"),
    ("noise_std", "target noise standard deviation"),
    ("n_train", "training rows"),
    ("n_val", "validation rows"),
    ("n_test", "test rows"),
    ("data_seed", "dataset seed (defaults to seed)"),
    ("data_csv", "CSV file to train on instead of the planted task"),
    ("split", "train,val,test fractions for data_csv"),
];

#[derive(Debug, Clone, PartialEq)]
pub enum TaskSource {
    Planted(PlantedSpec),
    Csv {
        path: PathBuf,
        layer_dims: Vec<usize>,
        fractions: [f64; 3],
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub task: TaskSource,
    data_seed_explicit: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            task: TaskSource::Planted(PlantedSpec::default()),
            data_seed_explicit: false,
        }
    }
}

impl RunConfig {
    /// Overrides the training seed, and the data seed unless it was set explicitly.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.train.seed = seed;
        if !self.data_seed_explicit {
            match &mut self.task {
                TaskSource::Planted(spec) => spec.seed = seed,
                TaskSource::Csv { seed: s, .. } => *s = seed,
            }
        }
        self
    }
}

fn bad(key: &str, msg: impl Into<String>) -> CliError {
    CliError::Config {
        key: key.to_string(),
        msg: msg.into(),
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, CliError> {
    v.parse().map_err(|_| bad(key, format!("cannot parse {v:?}")))
}

fn list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>, CliError> {
    v.split(',').map(|x| num(key, x.trim())).collect()
}

/// Parses a configuration text; relative `data_csv` paths resolve against `base`.
pub fn parse_config(text: &str, base: &Path) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    let mut planted = PlantedSpec::default();
    let mut csv_path: Option<PathBuf> = None;
    let mut fractions = [0.8, 0.1, 0.1];
    let mut seen: Vec<String> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| bad(line, format!("line {}: expected `key = value`", i + 1)))?;
        let (key, v) = (key.trim(), value.trim());
        if !KEYS.iter().any(|(k, _)| *k == key) {
            return Err(bad(key, format!("line {}: unknown key", i + 1)));
        }
        if seen.iter().any(|k| k == key) {
            return Err(bad(key, format!("line {}: duplicate key", i + 1)));
        }
        seen.push(key.to_string());
        let t = &mut cfg.train;
        match key {
            "learning_rate" => t.learning_rate = num(key, v)?,
            "batch_size" => t.batch_size = num(key, v)?,
            "epochs" => t.epochs = num(key, v)?,
            "n_quad" => t.n_quad = num(key, v)?,
            "quad_mode" => {
                t.quad_mode = match v {
                    "stochastic" => QuadMode::Stochastic,
                    "full" => QuadMode::Full,
                    _ => return Err(bad(key, format!("expected stochastic|full, got {v:?}"))),
                }
            }
            "beta" => {
                t.beta1 = num(key, v)?;
                t.beta2 = t.beta1;
            }
            "beta1" => t.beta1 = num(key, v)?,
            "beta2" => t.beta2 = num(key, v)?,
            "epsilon" => t.epsilon = num(key, v)?,
            "optimizer" => {
                t.optimizer = match v {
                    "sgd" => OptimizerKind::Sgd,
                    "adam" => OptimizerKind::Adam,
                    _ => return Err(bad(key, format!("expected sgd|adam, got {v:?}"))),
                }
            }
            "patience" => t.patience = num(key, v)?,
            "seed" => t.seed = num(key, v)?,
            "ablation" => {
                t.ablation = match v {
                    "none" => Ablation::None,
                    "no_alpha" => Ablation::NoAlpha,
                    "multiplicative_score" => Ablation::MultiplicativeScore,
                    _ => return Err(bad(key, format!("unknown ablation {v:?}"))),
                }
            }
            "svd_every" => t.svd_every = num(key, v)?,
            "centering" => {
                t.centering = match v {
                    "updated" => UncertaintyCentering::Updated,
                    "prior" => UncertaintyCentering::Prior,
                    _ => return Err(bad(key, format!("expected updated|prior, got {v:?}"))),
                }
            }
            "r0" => t.schedule.r0 = num(key, v)?,
            "b_final" => t.schedule.b_final = num(key, v)?,
            "start_epoch" => t.schedule.start_epoch = num(key, v)?,
            "end_epoch" => t.schedule.end_epoch = num(key, v)?,
            "prune_interval" => t.schedule.interval = num(key, v)?,
            "gamma" => t.schedule.gamma = num(key, v)?,
            "t_init" => t.schedule.t_init = num(key, v)?,
            "t_final" => t.schedule.t_final = num(key, v)?,
            "delta_t" => t.schedule.delta_t = num(key, v)?,
            "layer_dims" => planted.layer_dims = list(key, v)?,
            "planted_ranks" => planted.ranks = list(key, v)?,
            "noise_std" => planted.noise_std = num(key, v)?,
            "n_train" => planted.n_train = num(key, v)?,
            "n_val" => planted.n_val = num(key, v)?,
            "n_test" => planted.n_test = num(key, v)?,
            "data_seed" => {
                planted.seed = num(key, v)?;
                cfg.data_seed_explicit = true;
            }
            "data_csv" => csv_path = Some(base.join(v)),
            "split" => {
                let f: Vec<f64> = list(key, v)?;
                fractions = f
                    .try_into()
                    .map_err(|_| bad(key, "expected three comma-separated fractions"))?;
            }
            _ => unreachable!("key list checked above"),
        }
    }
    if !cfg.data_seed_explicit {
        planted.seed = cfg.train.seed;
    }
    cfg.task = match csv_path {
        Some(path) => {
            if planted.layer_dims.len() < 2 {
                return Err(bad("layer_dims", "data_csv needs at least input and output widths"));
            }
            TaskSource::Csv {
                path,
                layer_dims: planted.layer_dims,
                fractions,
                seed: planted.seed,
            }
        }
        None => {
            planted.validate().map_err(|e| bad("planted_ranks", e.to_string()))?;
            TaskSource::Planted(planted)
        }
    };
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| bad("config", format!("{}: {e}", path.display())))?;
    parse_config(&text, path.parent().unwrap_or(Path::new(".")))
}
