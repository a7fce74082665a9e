//! Run configuration: built-in defaults, overridden by a flat JSON file,
//! overridden by command-line flags.

use std::path::{Path, PathBuf};

use clap::Args;
use dgmn::forgetting::TauMode;
use dgmn::{DgmnConfig, Variant};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::CliError;

/// Options that are not model hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunOptions {
    pub data: Option<PathBuf>,
    pub valid: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub train_fraction: f64,
    /// 0 trains a single model on a train/validation split.
    pub folds: usize,
    pub clusters: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            data: None,
            valid: None,
            out: None,
            train_fraction: 0.7,
            folds: 0,
            clusters: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: DgmnConfig,
    pub run: RunOptions,
}

impl RunConfig {
    /// The flat form written to `config.json`; loading it reproduces the run.
    pub fn to_flat(&self) -> Map<String, Value> {
        let mut map = object(&self.model);
        map.extend(object(&self.run));
        map
    }
}

fn object<S: Serialize>(value: &S) -> Map<String, Value> {
    match serde_json::to_value(value) {
        Ok(Value::Object(map)) => map,
        _ => unreachable!("config types serialize to objects"),
    }
}

/// Hyperparameter flags shared by the commands that build a model.
#[derive(Args, Debug, Default, Clone)]
pub struct ModelFlags {
    /// Number of latent concept slots
    #[arg(long)]
    pub concepts: Option<usize>,
    #[arg(long = "d-k")]
    pub key_dim: Option<usize>,
    #[arg(long = "d-v")]
    pub value_dim: Option<usize>,
    #[arg(long)]
    pub num_questions: Option<usize>,
    #[arg(long)]
    pub tau: Option<f64>,
    /// relative or absolute
    #[arg(long)]
    pub tau_mode: Option<String>,
    #[arg(long)]
    pub mu: Option<f64>,
    #[arg(long)]
    pub binary_adjacency: Option<bool>,
    #[arg(long)]
    pub gcn_layers: Option<usize>,
    #[arg(long = "l-max")]
    pub lapse_cap: Option<usize>,
    #[arg(long = "t-max")]
    pub trials_cap: Option<usize>,
    #[arg(long)]
    pub rank_floor: Option<f64>,
    /// full, no_rank, no_graph, no_forget or basic
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long = "lr")]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub max_seq_len: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl ModelFlags {
    fn overrides(&self) -> Result<Map<String, Value>, CliError> {
        let mut map = Map::new();
        let mut put = |key: &str, value: Option<Value>| {
            if let Some(v) = value {
                map.insert(key.to_string(), v);
            }
        };
        put("concepts", self.concepts.map(Value::from));
        put("d_k", self.key_dim.map(Value::from));
        put("d_v", self.value_dim.map(Value::from));
        put("num_questions", self.num_questions.map(Value::from));
        put("tau", self.tau.map(Value::from));
        if let Some(mode) = &self.tau_mode {
            let parsed: TauMode = serde_json::from_value(Value::from(mode.as_str()))
                .map_err(|_| CliError::Usage(format!("--tau-mode must be relative or absolute, got `{mode}`")))?;
            put("tau_mode", Some(serde_json::to_value(parsed).expect("enum")));
        }
        put("mu", self.mu.map(Value::from));
        put("binary_adjacency", self.binary_adjacency.map(Value::from));
        put("gcn_layers", self.gcn_layers.map(Value::from));
        put("l_max", self.lapse_cap.map(Value::from));
        put("t_max", self.trials_cap.map(Value::from));
        put("rank_floor", self.rank_floor.map(Value::from));
        put("variant", self.variant.map(|v| Value::from(v.as_str())));
        put("learning_rate", self.learning_rate.map(Value::from));
        put("batch_size", self.batch_size.map(Value::from));
        put("max_seq_len", self.max_seq_len.map(Value::from));
        put("epochs", self.epochs.map(Value::from));
        put("seed", self.seed.map(Value::from));
        Ok(map)
    }
}

/// Layers `file` and then `flags` (plus `run_flags`) over `base`.
pub fn resolve(
    base: RunConfig,
    file: Option<&Path>,
    flags: &ModelFlags,
    run_flags: Map<String, Value>,
) -> Result<RunConfig, CliError> {
    let model_keys = object(&base.model);
    let run_keys = object(&base.run);
    let mut model = model_keys.clone();
    let mut run = run_keys.clone();
    let mut layers = Vec::new();
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        match serde_json::from_str::<Value>(&text) {
            Ok(Value::Object(map)) => layers.push(map),
            Ok(_) => return Err(CliError::Usage(format!("{}: config must be a JSON object", path.display()))),
            Err(e) => return Err(CliError::Usage(format!("{}: {e}", path.display()))),
        }
    }
    layers.push(flags.overrides()?);
    layers.push(run_flags);
    for layer in layers {
        for (key, value) in layer {
            if model_keys.contains_key(&key) {
                model.insert(key, value);
            } else if run_keys.contains_key(&key) {
                run.insert(key, value);
            } else {
                return Err(CliError::Usage(format!("unknown config key `{key}`")));
            }
        }
    }
    let model: DgmnConfig =
        serde_json::from_value(Value::Object(model)).map_err(|e| CliError::Usage(format!("config: {e}")))?;
    let run: RunOptions =
        serde_json::from_value(Value::Object(run)).map_err(|e| CliError::Usage(format!("config: {e}")))?;
    Ok(RunConfig { model, run })
}

#[cfg(test)]
mod tests {
    use std::io::Write;

    use super::*;

    fn defaults() -> RunConfig {
        RunConfig {
            model: DgmnConfig::default(),
            run: RunOptions::default(),
        }
    }

    #[test]
    fn flags_override_file_override_defaults() {
        let mut file = tempfile::NamedTempFile::new().unwrap();
        write!(file, r#"{{"d_k": 12, "mu": 0.5, "folds": 3}}"#).unwrap();
        let flags = ModelFlags {
            mu: Some(0.1),
            ..Default::default()
        };
        let cfg = resolve(defaults(), Some(file.path()), &flags, Map::new()).unwrap();
        assert_eq!(cfg.model.key_dim, 12);
        assert_eq!(cfg.model.mu, 0.1);
        assert_eq!(cfg.model.value_dim, 100);
        assert_eq!(cfg.run.folds, 3);
        assert_eq!(cfg.run.train_fraction, 0.7);
    }

    #[test]
    fn unknown_keys_are_usage_errors() {
        let mut file = tempfile::NamedTempFile::new().unwrap();
        write!(file, r#"{{"d_q": 12}}"#).unwrap();
        let err = resolve(defaults(), Some(file.path()), &ModelFlags::default(), Map::new()).unwrap_err();
        assert!(matches!(err, CliError::Usage(ref m) if m.contains("d_q")), "{err}");
    }

    #[test]
    fn flat_echo_reproduces_config() {
        let mut cfg = defaults();
        cfg.model.variant = Variant::NoGraph;
        cfg.run.data = Some("x.csv".into());
        let mut file = tempfile::NamedTempFile::new().unwrap();
        write!(file, "{}", Value::Object(cfg.to_flat())).unwrap();
        let back = resolve(defaults(), Some(file.path()), &ModelFlags::default(), Map::new()).unwrap();
        assert_eq!(back, cfg);
    }
}
