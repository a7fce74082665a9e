//! The full memory network: parameters, per-step forward pass, loss, training
//! and evaluation.

mod checkpoint;
mod config;
mod forward;
mod gradcheck;
mod optim;
mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::forgetting::{ForgettingParams, ForgettingVars};
use crate::init::{glorot, zeros};
use crate::lcg::{build_graph, GcnParams, GcnVars, LatentConceptGraph};
use crate::memory::{AttentionMemoryParams, MemoryDims, MemoryVars};
use crate::scalar::Scalar;

pub use checkpoint::{load_checkpoint, load_checkpoint_expecting, save_checkpoint, CHECKPOINT_VERSION};
pub use config::{DgmnConfig, Variant};
pub use forward::{BatchForward, LaneState, StepDiagnostic, StepOutput, PROB_CLAMP};
pub use gradcheck::{model_grad_check, ModelGradCheck};
pub use optim::{clip_global_norm, Adam};
pub use train::{EpochReport, Evaluation, PredictionRecord, PREDICTION_HEADER};

/// Counters that let training resume where it left off.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub epochs_completed: usize,
    pub batches_seen: u64,
}

#[derive(Clone, Debug)]
pub struct DgmnModel<T> {
    config: DgmnConfig,
    pub memory: AttentionMemoryParams<T>,
    pub forgetting: ForgettingParams<T>,
    pub gcn: GcnParams<T>,
    /// `[|Q|, 2N]`, or `[|Q|, N]` without the graph branch.
    pub predict_w: Tensor<T>,
    pub predict_b: Tensor<T>,
    pub graph: LatentConceptGraph<T>,
    pub optimizer: Adam<T>,
    pub progress: Progress,
}

/// Tape handles for every trainable parameter of one forward pass.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub memory: MemoryVars,
    pub forgetting: ForgettingVars,
    pub gcn: GcnVars,
    pub predict_w: Var,
    pub predict_b: Var,
}

impl ModelVars {
    /// Same order as [`DgmnModel::named_params`].
    pub fn list(&self) -> Vec<Var> {
        let mut out = self.memory.list();
        out.extend(self.forgetting.list());
        out.extend(self.gcn.list());
        out.push(self.predict_w);
        out.push(self.predict_b);
        out
    }
}

impl<T: Scalar> DgmnModel<T> {
    pub fn new(config: DgmnConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let dims = MemoryDims {
            concepts: config.concepts,
            key_dim: config.key_dim,
            value_dim: config.value_dim,
            questions: config.num_questions,
        };
        let memory = AttentionMemoryParams::new(dims, &mut rng);
        let forgetting = ForgettingParams::new(config.concepts, config.forgetting_settings(), &mut rng);
        let gcn = GcnParams::new(config.concepts, config.key_dim, config.gcn_layers, &mut rng)?;
        let predict_w = glorot(&mut rng, config.num_questions, config.prediction_width());
        let predict_b = zeros(config.num_questions);
        let graph = build_graph(&memory.initial_state, &config.graph_settings(), 0);
        let mut model = Self {
            optimizer: Adam::new(&config, &[]),
            config,
            memory,
            forgetting,
            gcn,
            predict_w,
            predict_b,
            graph,
            progress: Progress::default(),
        };
        let shapes: Vec<Vec<usize>> = model.named_params().iter().map(|(_, t)| t.shape().to_vec()).collect();
        model.optimizer = Adam::new(&model.config, &shapes);
        Ok(model)
    }

    pub fn config(&self) -> &DgmnConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    /// Every trainable tensor with a stable name, in a fixed order.
    pub fn named_params(&self) -> Vec<(&'static str, &Tensor<T>)> {
        let mut out = self.memory.named();
        out.extend(self.forgetting.named());
        out.extend(self.gcn.named());
        out.push(("predict.w", &self.predict_w));
        out.push(("predict.b", &self.predict_b));
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        let mut out = self.memory.named_mut();
        out.extend(self.forgetting.named_mut());
        out.extend(self.gcn.named_mut());
        out.push(("predict.w", &mut self.predict_w));
        out.push(("predict.b", &mut self.predict_b));
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn register(&self, tape: &mut Tape<T>) -> ModelVars {
        ModelVars {
            memory: self.memory.register(tape),
            forgetting: self.forgetting.register(tape),
            gcn: self.gcn.register(tape),
            predict_w: tape.param(self.predict_w.clone()),
            predict_b: tape.param(self.predict_b.clone()),
        }
    }

    /// Rebuilds the concept graph from a batch-level memory state `[N, d_v]`.
    pub fn rebuild_graph(&mut self, state: &Tensor<T>) {
        let built_at = self.progress.batches_seen;
        self.graph = build_graph(state, &self.config.graph_settings(), built_at);
    }

    /// One optimizer step; `grads` follow [`named_params`](Self::named_params).
    pub fn apply_gradients(&mut self, grads: &[Tensor<T>]) -> Result<()> {
        let mut optimizer = std::mem::replace(&mut self.optimizer, Adam::new(&self.config, &[]));
        let mut params: Vec<&mut Tensor<T>> = self.named_params_mut().into_iter().map(|(_, p)| p).collect();
        let result = optimizer.update(&mut params, grads);
        self.optimizer = optimizer;
        result
    }

    /// Overwrites one named parameter; used by tests and checkpoint loading.
    pub fn set_param(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let mut params = self.named_params_mut();
        let (_, slot) = params
            .iter_mut()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))?;
        if slot.shape() != value.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter `{name}` has shape {:?}, expected {:?}",
                value.shape(),
                slot.shape()
            )));
        }
        **slot = value;
        Ok(())
    }
}

#[cfg(test)]
mod tests;
