//! Layered run settings: command-line flags override `--config` entries,
//! which override built-in defaults.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use salt_core::model::ModelConfig;
use salt_core::train::TrainSchedule;
use serde::Deserialize;

use crate::{CliError, CliResult, Common, ModelArgs};

/// Worker-thread cap read from the environment.
pub const THREADS_VAR: &str = "SALT_THREADS";

/// The `[data]` table of a config file.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSettings {
    pub n_jets: Option<usize>,
    pub classes: Option<usize>,
    pub pt_min: Option<f64>,
    pub val_fraction: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    seed: Option<u64>,
    model: toml::Table,
    train: TrainSchedule,
    data: DataSettings,
}

#[derive(Clone, Debug)]
pub struct Settings {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainSchedule,
    pub data: DataSettings,
    out: Option<PathBuf>,
    /// Model fields set by the config file or a flag rather than defaulted.
    explicit: BTreeSet<String>,
}

impl Settings {
    pub fn load(common: &Common, args: Option<&ModelArgs>) -> CliResult<Self> {
        let file = match &common.config {
            Some(path) => read_config(path)?,
            None => FileConfig::default(),
        };
        let mut explicit: BTreeSet<String> = file.model.keys().cloned().collect();
        let mut model: ModelConfig = file
            .model
            .try_into()
            .map_err(|e| CliError::Usage(format!("invalid [model] table: {e}")))?;
        if let Some(a) = args {
            apply_model_args(&mut model, a, &mut explicit);
        }
        let seed = common.seed.or(file.seed).unwrap_or(model.seed);
        model.seed = seed;
        Ok(Self {
            seed,
            model,
            train: file.train,
            data: file.data,
            out: common.out.clone(),
            explicit,
        })
    }

    /// Whether the model field `name` was given rather than defaulted.
    pub fn is_explicit(&self, name: &str) -> bool {
        self.explicit.contains(name)
    }

    /// The `--out` directory, created if needed.
    pub fn out_dir(&self) -> CliResult<&Path> {
        let dir = self
            .out
            .as_deref()
            .ok_or_else(|| CliError::Usage("this command requires --out DIR".into()))?;
        fs::create_dir_all(dir).map_err(salt_core::Error::from)?;
        Ok(dir)
    }

    /// The `--out` directory when one was given, created if needed.
    pub fn optional_out_dir(&self) -> CliResult<Option<&Path>> {
        match self.out {
            Some(_) => self.out_dir().map(Some),
            None => Ok(None),
        }
    }
}

fn read_config(path: &Path) -> CliResult<FileConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
}

fn apply_model_args(m: &mut ModelConfig, a: &ModelArgs, explicit: &mut BTreeSet<String>) {
    let mut mark = |name: &str| {
        explicit.insert(name.to_string());
    };
    if let Some(v) = a.variant {
        m.variant = v;
        mark("variant");
    }
    if let Some(k) = a.sort_key {
        m.sort_key = k;
        mark("sort_key");
    }
    if let Some(n) = a.n {
        m.n = n;
        mark("n");
    }
    if let Some(p) = a.p {
        m.proj = p;
        mark("proj");
    }
    if let Some(f) = &a.filters {
        m.filters = f.clone();
        mark("filters");
    }
    if let Some(l) = a.layers {
        m.layers = l;
        mark("layers");
    }
    if let Some(d) = a.dtype {
        m.dtype = d;
        mark("dtype");
    }
    if let Some(c) = a.classes {
        m.classes = c;
        mark("classes");
    }
    let ab = &mut m.ablation;
    ab.no_conv |= a.no_conv;
    ab.no_partition |= a.no_partition;
    ab.partition_key_only |= a.partition_key_only;
    ab.partition_value_only |= a.partition_value_only;
    ab.share_ef |= a.share_ef;
}

/// Training worker threads: `SALT_THREADS` when set, otherwise 1 (the
/// bitwise-reproducible setting).
pub fn threads() -> CliResult<usize> {
    match std::env::var(THREADS_VAR) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(t) if t > 0 => Ok(t),
            _ => Err(CliError::Usage(format!("{THREADS_VAR} must be a positive integer, got `{v}`"))),
        },
        Err(_) => Ok(1),
    }
}
