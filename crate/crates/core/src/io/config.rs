use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use toml::{Table, Value};

use crate::envs::{DslConfig, EnvConfig, EnvKind, LbfConfig, PpConfig};
use crate::error::{Error, Result};
use crate::models::{ModelVariantConfig, Variant};
use crate::pool::PoolMode;
use crate::rl::TrainingConfig;

/// Everything needed to start (or reproduce) a run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub env: EnvConfig,
    pub model: ModelVariantConfig,
    pub training: TrainingConfig,
    pub pool_mode: PoolMode,
    pub pool_size: usize,
    pub seed: u64,
    pub out: Option<PathBuf>,
    /// Single-threaded environment stepping.
    pub deterministic: bool,
}

/// Command-line values that take precedence over the config file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConfigOverrides {
    pub env: Option<EnvKind>,
    pub variant: Option<Variant>,
    pub seed: Option<u64>,
    pub steps: Option<u64>,
    pub lr_rl: Option<f64>,
    pub lr_ed: Option<f64>,
    pub entropy_beta: Option<f64>,
    pub envs: Option<usize>,
    pub update_freq: Option<usize>,
    pub pool_mode: Option<PoolMode>,
    pub pool_size: Option<usize>,
    pub out: Option<PathBuf>,
    pub deterministic: bool,
}

const TOP_KEYS: [&str; 9] = ["env", "seed", "pool_mode", "pool_size", "out", "deterministic", "training", "model", "env_params"];

/// Default pool size: ten policies, or three for the reduced speaker-listener
/// setting.
pub fn default_pool_size(kind: EnvKind) -> usize {
    match kind {
        EnvKind::Dsl => 3,
        EnvKind::Lbf | EnvKind::Pp => 10,
    }
}

impl RunConfig {
    /// Defaults for `kind`.
    pub fn new(kind: EnvKind) -> Self {
        RunConfig {
            env: EnvConfig::default_for(kind),
            model: ModelVariantConfig::default(),
            training: TrainingConfig::for_env(kind),
            pool_mode: PoolMode::Paired,
            pool_size: default_pool_size(kind),
            seed: 0,
            out: None,
            deterministic: false,
        }
    }

    /// Reads `path` (if any), applies `overrides` and validates the result.
    pub fn load(path: Option<&Path>, overrides: &ConfigOverrides) -> Result<Self> {
        let table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                text.parse::<Table>().map_err(|e| Error::config("config", format!("{}: {e}", p.display())))?
            }
            None => Table::new(),
        };
        Self::from_table(table, overrides)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table = text.parse::<Table>().map_err(|e| Error::config("config", e.to_string()))?;
        Self::from_table(table, &ConfigOverrides::default())
    }

    fn from_table(mut t: Table, o: &ConfigOverrides) -> Result<Self> {
        for key in t.keys() {
            if !TOP_KEYS.contains(&key.as_str()) {
                return Err(Error::config(key.as_str(), "unknown key"));
            }
        }
        apply_overrides(&mut t, o);

        let kind: EnvKind = match t.get("env") {
            None => return Err(Error::config("env", "required")),
            Some(Value::String(s)) => s.parse()?,
            Some(_) => return Err(Error::config("env", "expected a string")),
        };
        let mut cfg = RunConfig::new(kind);
        if let Some(v) = t.get("seed") {
            cfg.seed = integer(v, "seed")?;
        }
        if let Some(v) = t.get("pool_mode") {
            cfg.pool_mode = string(v, "pool_mode")?.parse()?;
        }
        if let Some(v) = t.get("pool_size") {
            cfg.pool_size = integer(v, "pool_size")? as usize;
        }
        if let Some(v) = t.get("out") {
            cfg.out = Some(PathBuf::from(string(v, "out")?));
        }
        if let Some(v) = t.get("deterministic") {
            cfg.deterministic = v.as_bool().ok_or_else(|| Error::config("deterministic", "expected true or false"))?;
        }
        cfg.training = merge_section(&t, "training", &cfg.training)?;
        cfg.model = merge_section(&t, "model", &cfg.model)?;
        cfg.env = match cfg.env {
            EnvConfig::Dsl(c) => EnvConfig::Dsl(merge_section::<DslConfig>(&t, "env_params", &c)?),
            EnvConfig::Lbf(c) => EnvConfig::Lbf(merge_section::<LbfConfig>(&t, "env_params", &c)?),
            EnvConfig::Pp(c) => EnvConfig::Pp(merge_section::<PpConfig>(&t, "env_params", &c)?),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.training.validate()?;
        self.model.validate()?;
        match &self.env {
            EnvConfig::Dsl(c) => c.validate()?,
            EnvConfig::Lbf(c) => c.validate()?,
            EnvConfig::Pp(c) => c.validate()?,
        }
        if self.pool_size == 0 {
            return Err(Error::config("pool_size", "must be positive"));
        }
        if self.pool_mode == PoolMode::Cartesian && self.env.kind() != EnvKind::Dsl {
            return Err(Error::config("pool_mode", "cartesian pools exist only for dsl"));
        }
        Ok(())
    }

    /// The config in the file format accepted by [`RunConfig::load`].
    pub fn to_toml(&self) -> Result<String> {
        let mut t = Table::new();
        t.insert("env".into(), Value::String(self.env.kind().to_string()));
        t.insert("seed".into(), Value::Integer(self.seed as i64));
        t.insert("pool_mode".into(), Value::String(self.pool_mode.to_string()));
        t.insert("pool_size".into(), Value::Integer(self.pool_size as i64));
        if let Some(out) = &self.out {
            t.insert("out".into(), Value::String(out.display().to_string()));
        }
        t.insert("deterministic".into(), Value::Boolean(self.deterministic));
        t.insert("training".into(), to_table(&self.training)?);
        t.insert("model".into(), to_table(&self.model)?);
        let env = match &self.env {
            EnvConfig::Dsl(c) => to_table(c)?,
            EnvConfig::Lbf(c) => to_table(c)?,
            EnvConfig::Pp(c) => to_table(c)?,
        };
        t.insert("env_params".into(), env);
        toml::to_string(&t).map_err(|e| Error::Usage(format!("config echo: {e}")))
    }
}

fn apply_overrides(t: &mut Table, o: &ConfigOverrides) {
    if let Some(k) = o.env {
        t.insert("env".into(), Value::String(k.to_string()));
    }
    if let Some(s) = o.seed {
        t.insert("seed".into(), Value::Integer(s as i64));
    }
    if let Some(m) = o.pool_mode {
        t.insert("pool_mode".into(), Value::String(m.to_string()));
    }
    if let Some(k) = o.pool_size {
        t.insert("pool_size".into(), Value::Integer(k as i64));
    }
    if let Some(p) = &o.out {
        t.insert("out".into(), Value::String(p.display().to_string()));
    }
    if o.deterministic {
        t.insert("deterministic".into(), Value::Boolean(true));
    }
    // A section that is not a table is left alone for merge_section to report.
    let set = |t: &mut Table, name: &str, entries: Vec<(&str, Value)>| {
        if entries.is_empty() {
            return;
        }
        let slot = t.entry(name).or_insert_with(|| Value::Table(Table::new()));
        if let Value::Table(s) = slot {
            for (k, v) in entries {
                s.insert(k.into(), v);
            }
        }
    };
    set(t, "model", o.variant.map(|v| ("variant", Value::String(v.to_string()))).into_iter().collect());
    let training: Vec<(&str, Value)> = [
        o.steps.map(|v| ("total_steps", Value::Integer(v as i64))),
        o.lr_rl.map(|v| ("lr_rl", Value::Float(v))),
        o.lr_ed.map(|v| ("lr_ed", Value::Float(v))),
        o.entropy_beta.map(|v| ("entropy_beta", Value::Float(v))),
        o.envs.map(|v| ("n_envs", Value::Integer(v as i64))),
        o.update_freq.map(|v| ("update_freq", Value::Integer(v as i64))),
    ]
    .into_iter()
    .flatten()
    .collect();
    set(t, "training", training);
}

fn integer(v: &Value, key: &str) -> Result<u64> {
    match v.as_integer() {
        Some(i) if i >= 0 => Ok(i as u64),
        Some(_) => Err(Error::config(key, "must not be negative")),
        None => Err(Error::config(key, "expected an integer")),
    }
}

fn string<'a>(v: &'a Value, key: &str) -> Result<&'a str> {
    v.as_str().ok_or_else(|| Error::config(key, "expected a string"))
}

fn to_table<T: Serialize>(x: &T) -> Result<Value> {
    Value::try_from(x).map_err(|e| Error::Usage(format!("config echo: {e}")))
}

/// Overlays section `name` of `t` on the serialized `base`, rejecting keys
/// `base` does not have.
fn merge_section<T: Serialize + DeserializeOwned>(t: &Table, name: &str, base: &T) -> Result<T> {
    let Some(section) = t.get(name) else {
        return clone_via_toml(base);
    };
    let section = section.as_table().ok_or_else(|| Error::config(name, "expected a table"))?;
    let Value::Table(mut merged) = to_table(base)? else {
        return Err(Error::Usage(format!("section `{name}` does not serialize to a table")));
    };
    for (k, v) in section {
        if !merged.contains_key(k) {
            return Err(Error::config(format!("{name}.{k}"), "unknown key"));
        }
        let v = match (&merged[k], v) {
            // Integers are accepted where a real is expected.
            (Value::Float(_), Value::Integer(i)) => Value::Float(*i as f64),
            _ => v.clone(),
        };
        merged.insert(k.clone(), v);
    }
    T::deserialize(Value::Table(merged)).map_err(|e| Error::config(name, e.to_string()))
}

fn clone_via_toml<T: Serialize + DeserializeOwned>(x: &T) -> Result<T> {
    T::deserialize(to_table(x)?).map_err(|e| Error::Usage(e.to_string()))
}
