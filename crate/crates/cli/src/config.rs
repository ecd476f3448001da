//! Run configuration: TOML files with `include`, dotted `--set` overrides and
//! cross-module validation.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use qdp::env::EnvConfig;
use qdp::net::NetConfig;
use qdp::sdqn::TrainConfig;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed; every random component derives a named sub-stream from it.
    pub seed: u64,
    pub out_dir: String,
    /// Rollout workers stepped in lockstep.
    pub workers: usize,
    pub env: EnvConfig,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub run: RunOptions,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: "runs".into(),
            workers: 1,
            env: EnvConfig::default(),
            net: NetConfig::default(),
            train: TrainConfig::default(),
            run: RunOptions::default(),
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunOptions {
    /// Rotate each training observation by a random multiple of 15 degrees.
    pub rotate_observations: bool,
    /// Checkpoint after this many completed rounds of episodes; 0 disables.
    pub checkpoint_every: usize,
    /// Newest checkpoints kept on disk; 0 keeps all.
    pub keep_checkpoints: usize,
    /// Gradient steps per environment step once warm.
    pub updates_per_step: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            rotate_observations: true,
            checkpoint_every: 10,
            keep_checkpoints: 3,
            updates_per_step: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub seeds: usize,
    /// Evaluation episode `i` uses seed `seed_base + i`, disjoint from training.
    pub seed_base: u64,
    /// Episodes used to find the median proposed θ for the fixed-θ baseline.
    pub probe_seeds: usize,
    pub probe_seed_base: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            seeds: 30,
            seed_base: 1_000_000,
            probe_seeds: 10,
            probe_seed_base: 2_000_000,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        let cfg = |m: String| Err(CliError::Config(m));
        self.env.validate().or_else(|e| cfg(format!("env: {e}")))?;
        self.net.validate().or_else(|e| cfg(format!("net: {e}")))?;
        self.train.validate().or_else(|e| cfg(format!("train: {e}")))?;
        if self.seed > i64::MAX as u64 {
            return cfg("seed: must fit in a signed 64-bit integer".into());
        }
        if self.workers == 0 {
            return cfg("workers: must be >= 1".into());
        }
        if self.run.updates_per_step == 0 {
            return cfg("run.updates_per_step: must be >= 1".into());
        }
        let cam = &self.env.camera;
        if cam.resolution != self.net.image_size {
            return cfg(format!(
                "net.image_size: {} differs from env.camera.resolution {}",
                self.net.image_size, cam.resolution
            ));
        }
        if cam.crop_size() != self.net.crop_size {
            return cfg(format!(
                "net.crop_size: {} differs from the camera's crop size {}",
                self.net.crop_size,
                cam.crop_size()
            ));
        }
        let bins = self.env.primitive.num_bins();
        if bins != self.net.theta_bins {
            return cfg(format!(
                "net.theta_bins: {} differs from the primitive's {bins} bins",
                self.net.theta_bins
            ));
        }
        if self.train.batch_size > self.train.buffer_capacity || self.train.warmup < self.train.batch_size {
            return cfg("train.warmup: must be >= batch_size, and batch_size <= buffer_capacity".into());
        }
        Ok(())
    }

    /// Exact TOML text of this config, sufficient to reproduce a run.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml_str(text: &str) -> Result<Self, CliError> {
        let table: Table = text.parse().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        Self::from_table(table)
    }

    fn from_table(table: Table) -> Result<Self, CliError> {
        let cfg: RunConfig = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.to_string().trim().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// This config with `key.path=value` overrides applied.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self, CliError> {
        let mut table: Table = self.to_toml().parse().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        Self::from_table(table)
    }

    /// Loads `path` (resolving includes) or the defaults, then applies
    /// `key.path=value` overrides in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut table = match path {
            Some(p) => load_table(p, &mut BTreeSet::new())?,
            None => Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        Self::from_table(table)
    }
}

fn load_table(path: &Path, seen: &mut BTreeSet<PathBuf>) -> Result<Table, CliError> {
    let canon = path
        .canonicalize()
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    if !seen.insert(canon.clone()) {
        return Err(CliError::Config(format!("include cycle through {}", path.display())));
    }
    let text = std::fs::read_to_string(&canon).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let mut table: Table = text
        .parse()
        .map_err(|e: toml::de::Error| CliError::Config(format!("{}: {e}", path.display())))?;
    let includes = match table.remove("include") {
        None => vec![],
        Some(Value::String(s)) => vec![s],
        Some(Value::Array(a)) => a
            .into_iter()
            .map(|v| match v {
                Value::String(s) => Ok(s),
                other => Err(CliError::Config(format!("include: expected a path, got {other}"))),
            })
            .collect::<Result<_, _>>()?,
        Some(other) => return Err(CliError::Config(format!("include: expected a path or list, got {other}"))),
    };
    let dir = canon.parent().unwrap_or(Path::new("."));
    let mut merged = Table::new();
    for inc in includes {
        let sub = load_table(&dir.join(inc), seen)?;
        merge(&mut merged, sub);
    }
    merge(&mut merged, table);
    seen.remove(&canon);
    Ok(merged)
}

/// Deep merge; values in `top` win.
fn merge(base: &mut Table, top: Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// `a.b.c=value`, where value is TOML (`0.5`, `true`, `[1, 2]`, `"x"`) or a bare string.
pub fn apply_override(table: &mut Table, spec: &str) -> Result<(), CliError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{spec}` must look like key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("override key `{key}` is malformed")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = match entry {
            Value::Table(t) => t,
            _ => return Err(CliError::Config(format!("override key `{key}`: `{p}` is not a section"))),
        };
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
