//! Run configuration: preset < file < environment < command line.
//!
//! The file is TOML with the same layout as the resolved `run_config.toml`
//! written next to every run. Environment overrides use
//! `TRINAS_<SECTION>__<KEY>` (e.g. `TRINAS_SEARCH__LAMBDA=0.1`) or
//! `TRINAS_<KEY>` for top-level keys; `--set section.key=value` does the same
//! on the command line. Values are parsed as TOML, falling back to a string.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::ValueEnum;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use trinity_nas::archio::TrainConfig;
use trinity_nas::screening::ScreeningConfig;
use trinity_nas::search::SearchConfig;
use trinity_nas::seeding::substream;
use trinity_nas::supernet::SupernetConfig;
use trinity_nas::toytask::DatasetSpec;

use crate::Failure;

pub const ENV_PREFIX: &str = "TRINAS_";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Minutes on one CPU core.
    Desk,
    /// Published hyperparameters and supernet widths.
    Paper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

/// Dataset section; the dataset seed is derived from the run seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub image_size: usize,
    pub classes: usize,
    pub train_pool: usize,
    pub split_fraction: f64,
    pub test: usize,
    pub noise: f64,
    pub separable: bool,
}

impl DataConfig {
    fn desk() -> Self {
        let d = DatasetSpec::desk(0);
        Self {
            image_size: d.image_size,
            classes: d.classes,
            train_pool: d.train_pool,
            split_fraction: d.split_fraction,
            test: d.test,
            noise: d.noise,
            separable: d.separable,
        }
    }

    pub fn spec(&self, run_seed: u64) -> DatasetSpec {
        DatasetSpec {
            seed: substream(run_seed, "dataset").next_u64(),
            image_size: self.image_size,
            channels: 3,
            classes: self.classes,
            train_pool: self.train_pool,
            split_fraction: self.split_fraction,
            test: self.test,
            noise: self.noise,
            separable: self.separable,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub precision: Precision,
    /// Use the rayon pool for kernels and evaluation.
    pub parallel: bool,
    pub supernet: SupernetConfig,
    pub data: DataConfig,
    pub screening: ScreeningConfig,
    pub search: SearchConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn preset(profile: Profile) -> Self {
        match profile {
            Profile::Desk => Self {
                profile,
                seed: 0,
                out_dir: PathBuf::from("runs/desk"),
                precision: Precision::F32,
                parallel: true,
                supernet: SupernetConfig::desk(),
                data: DataConfig::desk(),
                screening: ScreeningConfig::desk(),
                search: SearchConfig::desk(),
                train: TrainConfig::desk(),
            },
            Profile::Paper => Self {
                profile,
                seed: 0,
                out_dir: PathBuf::from("runs/paper"),
                precision: Precision::F32,
                parallel: true,
                supernet: SupernetConfig::paper(),
                data: DataConfig::desk(),
                screening: ScreeningConfig::paper(),
                search: SearchConfig::paper(),
                train: TrainConfig {
                    epochs: 24,
                    ..TrainConfig::desk()
                },
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.supernet.validate()?;
        self.screening.validate()?;
        self.search.validate()?;
        self.train.validate()?;
        self.data.spec(self.seed).validate()?;
        if self.data.image_size != self.supernet.image_size {
            return Err(Failure::Config(format!(
                "data.image_size {} differs from supernet.image_size {}",
                self.data.image_size, self.supernet.image_size
            ))
            .into());
        }
        if self.data.classes != self.supernet.classes {
            return Err(Failure::Config(format!(
                "data.classes {} differs from supernet.classes {}",
                self.data.classes, self.supernet.classes
            ))
            .into());
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Command-line layer: explicit flags plus `--set` pairs.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub profile: Option<Profile>,
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub set: Vec<String>,
}

fn parse_scalar(raw: &str) -> Value {
    match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => Value::String(raw.to_string()),
    }
}

fn insert_path(root: &mut Table, path: &[String], value: Value, origin: &str) -> Result<()> {
    let (last, parents) = path.split_last().expect("non-empty key path");
    let mut t = root;
    for p in parents {
        t = match t.get_mut(p) {
            Some(Value::Table(sub)) => sub,
            _ => return Err(Failure::Config(format!("{origin}: unknown section {p:?}")).into()),
        };
    }
    if !t.contains_key(last) {
        return Err(Failure::Config(format!("{origin}: unknown key {:?}", path.join("."))).into());
    }
    t.insert(last.clone(), value);
    Ok(())
}

fn merge(base: &mut Table, over: Table, prefix: &str) -> Result<()> {
    for (k, v) in over {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o, &path)?,
            (Some(_), Value::Table(_)) | (Some(Value::Table(_)), _) => {
                return Err(Failure::Config(format!("config file: {path} has the wrong shape")).into())
            }
            (Some(slot), v) => *slot = v,
            // optional keys (e.g. clip_norm) are absent from the preset table
            (None, v) => {
                base.insert(k, v);
            }
        }
    }
    Ok(())
}

/// `TRINAS_SEARCH__LAMBDA` → `["search", "lambda"]`.
pub fn env_key_path(var: &str) -> Option<Vec<String>> {
    let rest = var.strip_prefix(ENV_PREFIX)?;
    if rest.is_empty() {
        return None;
    }
    Some(rest.split("__").map(str::to_ascii_lowercase).collect())
}

/// Resolves the configuration from all layers. `env` is passed explicitly
/// so tests do not depend on the process environment.
pub fn resolve(file: Option<&Path>, env: &[(String, String)], cli: &Overrides) -> Result<RunConfig> {
    let file_table: Option<Table> = match file {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Failure::Missing {
                path: p.to_path_buf(),
                hint: format!("config file unreadable: {e}"),
            })?;
            Some(text.parse::<Table>().map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?)
        }
        None => None,
    };
    let env_profile = env.iter().find(|(k, _)| k == "TRINAS_PROFILE").map(|(_, v)| v.as_str());
    let profile = match (cli.profile, env_profile, file_table.as_ref().and_then(|t| t.get("profile"))) {
        (Some(p), _, _) => p,
        (None, Some(v), _) => Profile::from_str(v, true).map_err(|_| Failure::Config(format!("TRINAS_PROFILE: unknown profile {v:?}")))?,
        (None, None, Some(v)) => v
            .clone()
            .try_into()
            .map_err(|_| Failure::Config(format!("config file: unknown profile {v}")))?,
        _ => Profile::Desk,
    };
    let mut table: Table = Table::try_from(RunConfig::preset(profile)).expect("preset serializes");
    if let Some(t) = file_table {
        merge(&mut table, t, "")?;
    }
    let mut env_pairs: Vec<_> = env.iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
    env_pairs.sort();
    for (k, v) in env_pairs {
        let path = env_key_path(k).ok_or_else(|| Failure::Config(format!("{k}: empty key")))?;
        insert_path(&mut table, &path, parse_scalar(v), k)?;
    }
    for s in &cli.set {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Failure::Config(format!("--set {s:?}: expected section.key=value")))?;
        let path: Vec<String> = k.split('.').map(str::to_string).collect();
        insert_path(&mut table, &path, parse_scalar(v), &format!("--set {k}"))?;
    }
    if let Some(s) = cli.seed {
        table.insert("seed".into(), Value::Integer(i64::try_from(s).map_err(|_| Failure::Config("seed too large".into()))?));
    }
    if let Some(o) = &cli.out_dir {
        table.insert("out_dir".into(), Value::String(o.display().to_string()));
    }
    table.insert("profile".into(), Value::try_from(profile).expect("enum serializes"));
    let cfg: RunConfig = Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Failure::Config(format!("invalid configuration: {e}")))?;
    cfg.validate().context("configuration rejected")?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect()
    }

    #[test]
    fn presets_validate_and_round_trip() {
        for p in [Profile::Desk, Profile::Paper] {
            let c = RunConfig::preset(p);
            c.validate().unwrap();
            let back: RunConfig = toml::from_str(&c.to_toml()).unwrap();
            assert_eq!(back, c);
        }
    }

    #[test]
    fn precedence_cli_over_env_over_file() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("c.toml");
        std::fs::write(&f, "seed = 3\n[search]\nlambda = 0.5\nepochs = 6\n").unwrap();
        let e = env(&[("TRINAS_SEARCH__LAMBDA", "0.25"), ("OTHER", "x")]);
        let c = resolve(Some(&f), &e, &Overrides::default()).unwrap();
        assert_eq!((c.seed, c.search.lambda, c.search.epochs), (3, 0.25, 6));
        let cli = Overrides {
            seed: Some(9),
            set: vec!["search.lambda=0.125".into()],
            ..Default::default()
        };
        let c = resolve(Some(&f), &e, &cli).unwrap();
        assert_eq!((c.seed, c.search.lambda), (9, 0.125));
    }

    #[test]
    fn unknown_keys_are_errors() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("c.toml");
        std::fs::write(&f, "[search]\nlamda = 0.5\n").unwrap();
        assert!(resolve(Some(&f), &[], &Overrides::default()).is_err());
        assert!(resolve(None, &env(&[("TRINAS_SEARCH__LAMDA", "1")]), &Overrides::default()).is_err());
        let cli = Overrides {
            set: vec!["nosuch.key=1".into()],
            ..Default::default()
        };
        assert!(resolve(None, &[], &cli).is_err());
    }

    #[test]
    fn file_profile_selects_preset() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("c.toml");
        std::fs::write(&f, "profile = \"paper\"\n").unwrap();
        let c = resolve(Some(&f), &[], &Overrides::default()).unwrap();
        assert_eq!(c.supernet, SupernetConfig::paper());
        let c = resolve(Some(&f), &env(&[("TRINAS_PROFILE", "desk")]), &Overrides::default()).unwrap();
        assert_eq!(c.supernet, SupernetConfig::desk());
    }

    #[test]
    fn inconsistent_sections_rejected() {
        let cli = Overrides {
            set: vec!["data.classes=3".into()],
            ..Default::default()
        };
        assert!(resolve(None, &[], &cli).is_err());
    }
}
