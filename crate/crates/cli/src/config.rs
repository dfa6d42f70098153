//! Run configuration: TOML on disk, canonical JSON for digests.

use std::fs;
use std::path::{Path, PathBuf};

use ncmfair::data::{CRIMES_SENSITIVE_DEFAULT, CRIMES_TARGET_DEFAULT};
use ncmfair::fair::{FairTrainConfig, FairnessLoss};
use ncmfair::ncm::GenTrainConfig;
use ncmfair::tradeoff::PlotOptions;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

/// Exogenous dimension used on the real-data table unless configured.
pub const CRIMES_DEFAULT_D_U: usize = 8;

fn default_n() -> usize {
    5000
}

fn default_train_fraction() -> f64 {
    0.8
}

fn default_sensitive() -> String {
    CRIMES_SENSITIVE_DEFAULT.to_string()
}

fn default_target() -> String {
    CRIMES_TARGET_DEFAULT.to_string()
}

fn default_test_rows() -> usize {
    200
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSpec {
    Synthetic {
        #[serde(default = "default_n")]
        n: usize,
        #[serde(default = "default_train_fraction")]
        train_fraction: f64,
        /// SCM coefficients as JSON; the bundled SCM when absent.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        scm: Option<PathBuf>,
    },
    Crimes {
        path: PathBuf,
        #[serde(default = "default_sensitive")]
        sensitive_column: String,
        #[serde(default = "default_target")]
        target_column: String,
        #[serde(default = "default_test_rows")]
        test_rows: usize,
    },
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec::Synthetic {
            n: default_n(),
            train_fraction: default_train_fraction(),
            scm: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub lambdas: Vec<f64>,
    pub repeats: usize,
    /// Thread count. Results do not depend on it, so it is not digested.
    #[serde(skip_serializing)]
    pub workers: usize,
    pub methods: Vec<FairnessLoss>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            lambdas: vec![0.0, 0.1, 0.5, 1.0, 2.0, 5.0, 10.0],
            repeats: 3,
            workers: 1,
            methods: vec![FairnessLoss::Mmd, FairnessLoss::MeanMse],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataSpec,
    pub stage1: GenTrainConfig,
    pub stage2: FairTrainConfig,
    pub sweep: SweepConfig,
    pub plot: PlotOptions,
    /// Where artifacts go. Not part of the digest.
    #[serde(skip_serializing)]
    pub output_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        Self::from_toml_with(text, &[])
    }

    /// Parses `text` after applying dotted-key assignments such as
    /// `stage1.lambda_ctf=0`.
    pub fn from_toml_with(text: &str, sets: &[String]) -> CliResult<Self> {
        Self::from_parts(text, None, sets)
    }

    /// Like [`RunConfig::from_toml_with`], with `crimes` replacing the data
    /// section by the Crimes table at that path before assignments apply.
    pub fn from_parts(text: &str, crimes: Option<&Path>, sets: &[String]) -> CliResult<Self> {
        let mut raw: toml::Table = toml::from_str(text)?;
        if let Some(path) = crimes {
            let mut data = toml::Table::new();
            data.insert("source".into(), "crimes".into());
            data.insert("path".into(), path.to_string_lossy().into_owned().into());
            raw.insert("data".into(), data.into());
        }
        for s in sets {
            apply_set(&mut raw, s)?;
        }
        if let Some(toml::Value::Table(data)) = raw.get_mut("data") {
            data.entry("source").or_insert_with(|| "synthetic".into());
        }
        let mut cfg: RunConfig = toml::Value::Table(raw.clone()).try_into()?;
        let d_u_given = raw
            .get("stage1")
            .and_then(|s| s.as_table())
            .is_some_and(|s| s.contains_key("d_u"));
        if matches!(cfg.data, DataSpec::Crimes { .. }) && !d_u_given {
            cfg.stage1.d_u = CRIMES_DEFAULT_D_U;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, crimes: Option<&Path>, sets: &[String]) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| ncmfair::Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::from_parts(&text, crimes, sets)
    }

    pub fn validate(&self) -> CliResult<()> {
        self.stage1.validate()?;
        self.stage2.validate()?;
        match &self.data {
            DataSpec::Synthetic { n, train_fraction, .. } => {
                if *n < 2 {
                    return Err(CliError::Usage("synthetic n must be at least 2".into()));
                }
                if !(*train_fraction > 0.0 && *train_fraction < 1.0) {
                    return Err(CliError::Usage(format!("train_fraction must lie in (0, 1), got {train_fraction}")));
                }
            }
            DataSpec::Crimes { test_rows, .. } => {
                if *test_rows == 0 {
                    return Err(CliError::Usage("test_rows must be at least 1".into()));
                }
            }
        }
        if self.sweep.lambdas.is_empty() || self.sweep.repeats == 0 || self.sweep.methods.is_empty() {
            return Err(CliError::Usage("sweep needs lambdas, methods and at least one repeat".into()));
        }
        if self.sweep.lambdas.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
            return Err(CliError::Usage("sweep lambdas must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// Key-sorted JSON of everything that influences results.
    pub fn canonical_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn digest(&self) -> String {
        digest_value(&self.canonical_json())
    }

    /// Digest of the settings that determine the artifacts of `scope`.
    pub fn scope_digest(&self, scope: Scope) -> String {
        let mut v = self.canonical_json();
        let obj = v.as_object_mut().expect("config is an object");
        let keep: &[&str] = match scope {
            Scope::Data => &["seed", "data"],
            Scope::Stage1 => &["seed", "data", "stage1"],
            Scope::Stage2 => &["seed", "data", "stage1", "stage2", "sweep"],
            Scope::Plot => return digest_value(&v),
        };
        obj.retain(|k, _| keep.contains(&k.as_str()));
        digest_value(&v)
    }
}

/// Pipeline stages, each depending on a growing part of the config.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    Data,
    Stage1,
    Stage2,
    Plot,
}

fn apply_set(table: &mut toml::Table, assignment: &str) -> CliResult<()> {
    let (key, value) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("expected KEY=VALUE, got '{assignment}'")))?;
    let value: toml::Value = match toml::from_str::<toml::Table>(&format!("v = {value}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(value.to_string()),
    };
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, parents) = parts.split_last().expect("split yields one part");
    let mut cur = table;
    for p in parents {
        cur = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| CliError::Usage(format!("'{p}' in '{key}' is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

pub fn digest_value(v: &serde_json::Value) -> String {
    // serde_json maps are key-sorted, so this string is canonical
    let text = serde_json::to_string(v).expect("JSON values serialize");
    hex(&Sha256::digest(text.as_bytes()))
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
