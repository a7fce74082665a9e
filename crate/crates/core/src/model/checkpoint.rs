use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::lcg::LatentConceptGraph;
use crate::scalar::Scalar;

use super::{DgmnConfig, DgmnModel, Progress};

pub const CHECKPOINT_VERSION: u32 = 1;
const FORMAT: &str = "dgmn-checkpoint";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NamedTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizerState {
    step: u64,
    first: Vec<NamedTensor>,
    second: Vec<NamedTensor>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphState {
    adjacency: NamedTensor,
    degree: Vec<f64>,
    built_at: u64,
}

/// Shuffling is derived from the seed and the epoch counter, so these two
/// values are the whole random state.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RngState {
    seed: u64,
    epochs_completed: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    format: String,
    version: u32,
    config: DgmnConfig,
    parameters: Vec<NamedTensor>,
    optimizer: OptimizerState,
    graph: GraphState,
    progress: Progress,
    rng: RngState,
}

fn export<T: Scalar>(name: &str, t: &Tensor<T>) -> NamedTensor {
    NamedTensor {
        name: name.to_string(),
        shape: t.shape().to_vec(),
        data: t.data().iter().map(|x| x.as_f64()).collect(),
    }
}

fn import<T: Scalar>(t: &NamedTensor) -> Result<Tensor<T>> {
    Tensor::new(t.shape.clone(), t.data.iter().map(|&x| T::lit(x)).collect())
        .map_err(|e| Error::Checkpoint(format!("tensor `{}`: {e}", t.name)))
}

/// Moment buffers must list exactly the model's parameters, in order.
fn import_moments<T: Scalar>(names: &[&str], stored: &[NamedTensor], which: &str) -> Result<Vec<Tensor<T>>> {
    if stored.len() != names.len() {
        return Err(Error::Checkpoint(format!(
            "{which} moments hold {} tensors, model has {}",
            stored.len(),
            names.len()
        )));
    }
    names
        .iter()
        .zip(stored)
        .map(|(&name, t)| {
            if t.name != name {
                return Err(Error::Checkpoint(format!("{which} moment `{}` where `{name}` was expected", t.name)));
            }
            import(t)
        })
        .collect()
}

pub fn save_checkpoint<T: Scalar>(model: &DgmnModel<T>, path: impl AsRef<Path>) -> Result<()> {
    let names: Vec<&str> = model.named_params().iter().map(|(n, _)| *n).collect();
    let file = CheckpointFile {
        format: FORMAT.into(),
        version: CHECKPOINT_VERSION,
        config: model.config.clone(),
        parameters: model.named_params().iter().map(|(n, t)| export(n, t)).collect(),
        optimizer: OptimizerState {
            step: model.optimizer.step,
            first: names.iter().zip(&model.optimizer.first).map(|(n, t)| export(n, t)).collect(),
            second: names.iter().zip(&model.optimizer.second).map(|(n, t)| export(n, t)).collect(),
        },
        graph: GraphState {
            adjacency: export("adjacency", &model.graph.adjacency),
            degree: model.graph.degree.iter().map(|d| d.as_f64()).collect(),
            built_at: model.graph.built_at,
        },
        progress: model.progress,
        rng: RngState {
            seed: model.config.seed,
            epochs_completed: model.progress.epochs_completed,
        },
    };
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, serde_json::to_vec(&file)?)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<DgmnModel<T>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let head: serde_json::Value = serde_json::from_str(&text)?;
    if head.get("format").and_then(|f| f.as_str()) != Some(FORMAT) {
        return Err(Error::Checkpoint(format!("{} is not a model checkpoint", path.display())));
    }
    match head.get("version").and_then(|v| v.as_u64()) {
        Some(v) if v == u64::from(CHECKPOINT_VERSION) => {}
        other => {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {}, this build reads version {CHECKPOINT_VERSION}",
                other.map_or_else(|| "<missing>".to_string(), |v| v.to_string())
            )))
        }
    }
    let file: CheckpointFile = serde_json::from_value(head)?;
    if file.rng.seed != file.config.seed || file.rng.epochs_completed != file.progress.epochs_completed {
        return Err(Error::Checkpoint("random state disagrees with config and progress".into()));
    }

    let mut model = DgmnModel::<T>::new(file.config)?;
    let names: Vec<&'static str> = model.named_params().iter().map(|(n, _)| *n).collect();
    if file.parameters.len() != names.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} parameters, model has {}",
            file.parameters.len(),
            names.len()
        )));
    }
    for p in &file.parameters {
        model.set_param(&p.name, import(p)?)?;
    }
    model.optimizer.step = file.optimizer.step;
    model.optimizer.first = import_moments(&names, &file.optimizer.first, "first")?;
    model.optimizer.second = import_moments(&names, &file.optimizer.second, "second")?;

    let adjacency: Tensor<T> = import(&file.graph.adjacency)?;
    let n = model.config.concepts;
    if adjacency.shape() != [n, n] || file.graph.degree.len() != n {
        return Err(Error::Checkpoint(format!("graph does not have {n} concepts")));
    }
    model.graph = LatentConceptGraph {
        adjacency,
        degree: file.graph.degree.iter().map(|&d| T::lit(d)).collect(),
        built_at: file.graph.built_at,
    };
    model.progress = file.progress;
    Ok(model)
}

/// Loads a checkpoint and insists it was written with `expected`. The epoch
/// budget is not compared since resuming usually changes it.
pub fn load_checkpoint_expecting<T: Scalar>(path: impl AsRef<Path>, expected: &DgmnConfig) -> Result<DgmnModel<T>> {
    let model = load_checkpoint(path)?;
    let expected = DgmnConfig {
        epochs: model.config.epochs,
        ..expected.clone()
    };
    if let Some((field, found, expected)) = model.config.first_difference(&expected) {
        return Err(Error::ConfigMismatch { field, found, expected });
    }
    Ok(model)
}
