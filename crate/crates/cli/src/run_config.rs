//! Run configuration files: a profile, optional overrides of individual
//! training fields, corpus paths and an optional synthetic corpus spec.
//!
//! ```toml
//! profile = "cross-domain"
//! seed = 3
//! workers = 2
//!
//! [paths]
//! labeled = "corpus/labeled.json"
//! external = "corpus/external.json"
//! test = "corpus/test.json"
//! out = "runs/a"
//!
//! [train]
//! n_s = 16
//! cdl_steps = 4
//! ```
//!
//! Relative paths resolve against the directory holding the file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use cdl::synthgen::SynthSpec;
use cdl::{Profile, TrainConfig};

use crate::CliError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labeled: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub external: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

impl Paths {
    fn rebase(self, base: &Path) -> Self {
        let join = |p: Option<PathBuf>| p.map(|p| if p.is_relative() { base.join(p) } else { p });
        Paths {
            labeled: join(self.labeled),
            external: join(self.external),
            test: join(self.test),
            out: join(self.out),
        }
    }
}

/// The file as written by the user.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    pub profile: Option<String>,
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    /// Accepted for compatibility; only `cpu` exists.
    pub device: Option<String>,
    #[serde(default)]
    pub paths: Paths,
    /// Field-by-field overrides of the profile's training defaults.
    #[serde(default)]
    pub train: toml::Table,
    pub synth: Option<SynthSpec>,
}

impl RunConfigFile {
    /// Parses config text; `origin` only labels error messages.
    pub fn parse(text: &str, origin: &Path) -> Result<Self, CliError> {
        let file: RunConfigFile =
            toml::from_str(text).map_err(|e| CliError::Config(format!("{}: {e}", origin.display())))?;
        if let Some(d) = &file.device {
            if d != "cpu" {
                return Err(CliError::Config(format!("unsupported device `{d}` (only `cpu`)")));
            }
        }
        Ok(file)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let file = Self::parse(&text, path)?;
        let parent = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let base = std::path::absolute(parent)
            .map_err(|e| CliError::io(path, e))?;
        Ok(RunConfigFile {
            paths: file.paths.rebase(&base),
            ..file
        })
    }
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub profile: Option<String>,
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub out: Option<PathBuf>,
}

/// Fully resolved configuration, echoed into the output directory.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub profile: Profile,
    pub workers: usize,
    pub paths: Paths,
    pub train: TrainConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthSpec>,
}

impl RunConfig {
    /// Profile defaults, then `[train]` overrides, then command-line values.
    pub fn resolve(file: RunConfigFile, cli: &Overrides) -> Result<Self, CliError> {
        let name = cli
            .profile
            .clone()
            .or(file.profile)
            .unwrap_or_else(|| Profile::OpenSet.name().to_string());
        let profile: Profile = name.parse().map_err(|e: cdl::Error| CliError::Config(e.to_string()))?;

        let mut table = toml::Table::try_from(profile.defaults()).expect("training defaults serialize");
        for (key, value) in file.train {
            if !table.contains_key(&key) && !OPTIONAL_TRAIN_KEYS.contains(&key.as_str()) {
                return Err(CliError::Config(format!("unknown [train] field `{key}`")));
            }
            table.insert(key, value);
        }
        let mut train: TrainConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(format!("[train]: {e}")))?;
        if let Some(seed) = cli.seed.or(file.seed) {
            train.seed = seed;
        }
        train.validate().map_err(|e| CliError::Config(e.to_string()))?;

        let workers = cli.workers.or(file.workers).unwrap_or(1);
        if workers == 0 {
            return Err(CliError::Config("workers must be at least 1".into()));
        }
        let mut paths = file.paths;
        if let Some(out) = &cli.out {
            paths.out = Some(out.clone());
        }
        let mut synth = file.synth;
        if let (Some(s), Some(seed)) = (synth.as_mut(), cli.seed) {
            s.seed = seed;
        }
        Ok(RunConfig {
            profile,
            workers,
            paths,
            train,
            synth,
        })
    }

    pub fn out_dir(&self) -> PathBuf {
        self.paths.out.clone().unwrap_or_else(|| PathBuf::from("cdl-out"))
    }

    /// Existing path for a required input, or a config error naming it.
    pub fn require(&self, what: &str, path: &Option<PathBuf>) -> Result<PathBuf, CliError> {
        let p = path
            .clone()
            .ok_or_else(|| CliError::Config(format!("no {what} path given (set paths.{what})")))?;
        if !p.exists() {
            return Err(CliError::Config(format!("{what} path {} does not exist", p.display())));
        }
        Ok(p)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("resolved config serializes")
    }

    /// Writes `resolved-config.toml` into `dir`, creating it.
    pub fn echo(&self, dir: &Path) -> Result<PathBuf, CliError> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let path = dir.join("resolved-config.toml");
        std::fs::write(&path, self.to_toml()).map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }
}

/// Training fields with serde defaults, absent from a serialized profile
/// only if a future profile omits them.
const OPTIONAL_TRAIN_KEYS: [&str; 4] = ["pseudo_label_mode", "positional_encoding", "main_stream", "aux_stream"];

/// Reads a `resolved-config.toml` written by an earlier command.
#[derive(Clone, Debug, Deserialize)]
pub struct EchoedConfig {
    pub paths: Paths,
    pub train: TrainConfig,
}

impl EchoedConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }
}
