use crate::autodiff::{Tape, Tensor, Var};
use crate::data::MiniBatch;
use crate::error::{Error, Result};
use crate::forgetting::{forget_gate, forget_summary, forget_vector, relevant_concepts, ForgettingState};
use crate::lcg::{gcn_forward, graph_summary};
use crate::memory::{concept_summary, embed_question, read, relevance, write, StudentMemoryState};
use crate::scalar::Scalar;

use super::{DgmnModel, ModelVars};

/// Predictions are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before the loss.
pub const PROB_CLAMP: f64 = 1e-7;

/// Recurrent state of one sequence lane.
#[derive(Clone, Debug)]
pub struct LaneState {
    pub memory: StudentMemoryState,
    pub forgetting: ForgettingState,
}

/// Most relevant concept at a step and its forgetting counters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StepDiagnostic {
    pub concept: usize,
    pub lapse: usize,
    pub trials: usize,
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    /// Predicted probability of a correct answer, shape `[]`.
    pub prob: Var,
    pub weights: Var,
    /// `o_t`.
    pub summary: Var,
    /// `z_m`; equals `summary` when the forgetting gate is ablated.
    pub memory_summary: Var,
    /// `z_g`; absent when the graph branch is ablated.
    pub graph_summary: Option<Var>,
    pub relevant: Vec<usize>,
    pub diagnostic: StepDiagnostic,
}

/// Result of running every lane of a mini-batch on one tape.
#[derive(Clone, Debug)]
pub struct BatchForward<T> {
    /// One `[]` probability per observed step, lane-major.
    pub probs: Vec<Var>,
    pub prob_values: Vec<T>,
    pub labels: Vec<T>,
    /// Attention weights of each observed step.
    pub weights: Vec<Vec<T>>,
    /// Elementwise mean over lanes of the final `M_v`.
    pub mean_state: Tensor<T>,
}

impl<T: Scalar> DgmnModel<T> {
    pub fn new_lane(&self, vars: &ModelVars) -> LaneState {
        LaneState {
            memory: StudentMemoryState::initial(&vars.memory),
            forgetting: ForgettingState::new(self.config.concepts),
        }
    }

    /// GCN output over the current concept graph, computed once per tape.
    pub fn graph_hidden(&self, tape: &mut Tape<T>, vars: &ModelVars) -> Result<Option<Var>> {
        if !self.config.variant.uses_graph() {
            return Ok(None);
        }
        gcn_forward(tape, &vars.gcn, vars.memory.concept_keys, &self.graph).map(Some)
    }

    /// Prediction for `question` from the lane state before it is answered.
    pub fn forward_step(
        &self,
        tape: &mut Tape<T>,
        vars: &ModelVars,
        hidden: Option<Var>,
        lane: &LaneState,
        question: usize,
    ) -> Result<StepOutput> {
        let variant = self.config.variant;
        let key = embed_question(tape, &vars.memory, question)?;
        let weights = relevance(tape, key, vars.memory.concept_keys)?;
        let read_out = read(tape, weights, &lane.memory)?;
        let summary = concept_summary(tape, &vars.memory, read_out, key)?;

        let settings = self.config.forgetting_settings();
        let w = tape.value(weights)?.data().to_vec();
        let relevant = relevant_concepts(&w, settings.tau, settings.tau_mode);
        let features = lane.forgetting.features::<T>(&relevant, &settings);
        let concept = argmax(&w);
        let (lapse, trials) = features.raw[concept];

        let memory_summary = if variant.uses_forgetting() {
            let f = forget_vector(tape, &vars.forgetting, &features.normalized)?;
            let fs = forget_summary(tape, weights, f)?;
            forget_gate(tape, &vars.forgetting, summary, fs)?.0
        } else {
            summary
        };
        let graph_summary = match (variant.uses_graph(), hidden) {
            (true, Some(h)) => Some(graph_summary(tape, &vars.gcn, weights, h)?),
            (true, None) => return Err(Error::Config("graph variant needs the GCN output".into())),
            _ => None,
        };
        let input = match graph_summary {
            Some(zg) => tape.concat(&[memory_summary, zg])?,
            None => memory_summary,
        };
        let w_row = tape.row(vars.predict_w, question)?;
        let b = tape.row(vars.predict_b, question)?;
        let dot = tape.matmul(w_row, input)?;
        let logit = tape.add(dot, b)?;
        let prob = tape.sigmoid(logit)?;
        Ok(StepOutput {
            prob,
            weights,
            summary,
            memory_summary,
            graph_summary,
            relevant,
            diagnostic: StepDiagnostic { concept, lapse, trials },
        })
    }

    /// Folds the observed answer into the lane: memory write, then counters.
    pub fn step_update(
        &self,
        tape: &mut Tape<T>,
        vars: &ModelVars,
        lane: &mut LaneState,
        question: usize,
        correct: bool,
        step: &StepOutput,
    ) -> Result<()> {
        let (memory, _) = write(
            tape,
            &vars.memory,
            &lane.memory,
            question,
            correct,
            step.summary,
            step.weights,
        )?;
        lane.memory = memory;
        lane.forgetting.observe(&step.relevant);
        Ok(())
    }

    /// Runs every lane of `batch` under teacher forcing.
    pub fn forward_batch(&self, tape: &mut Tape<T>, vars: &ModelVars, batch: &MiniBatch) -> Result<BatchForward<T>> {
        let hidden = self.graph_hidden(tape, vars)?;
        let observed = batch.num_observed();
        if observed == 0 {
            return Err(Error::EmptyBatch);
        }
        let mut out = BatchForward {
            probs: Vec::with_capacity(observed),
            prob_values: Vec::with_capacity(observed),
            labels: Vec::with_capacity(observed),
            weights: Vec::with_capacity(observed),
            mean_state: Tensor::zeros(&[self.config.concepts, self.config.value_dim]),
        };
        let mut lanes = 0usize;
        for lane_index in 0..batch.batch_size {
            let steps = batch.lane(lane_index);
            if steps.is_empty() {
                continue;
            }
            let mut lane = self.new_lane(vars);
            for s in &steps {
                let step = self.forward_step(tape, vars, hidden, &lane, s.question)?;
                out.prob_values.push(scalar_value(tape, step.prob)?);
                out.weights.push(tape.value(step.weights)?.data().to_vec());
                out.probs.push(step.prob);
                out.labels.push(if s.correct { T::one() } else { T::zero() });
                self.step_update(tape, vars, &mut lane, s.question, s.correct, &step)?;
            }
            for (acc, &v) in out.mean_state.data_mut().iter_mut().zip(tape.value(lane.memory.m_v)?.data()) {
                *acc += v;
            }
            lanes += 1;
        }
        let scale = T::one() / T::lit(lanes as f64);
        for v in out.mean_state.data_mut() {
            *v *= scale;
        }
        Ok(out)
    }

    /// Per-step loss weights from the concept graph degrees: `Σ_j w_j D̂(j, j)`
    /// min-max scaled over the batch to `[rank_floor, 1]`. All ones when the
    /// variant does not rank or the scores are indistinguishable.
    pub fn question_ranks(&self, weights: &[Vec<T>]) -> Vec<T> {
        if !self.config.variant.uses_ranking() {
            return vec![T::one(); weights.len()];
        }
        let degree = &self.graph.degree;
        let scores: Vec<T> = weights
            .iter()
            .map(|w| w.iter().zip(degree).map(|(&a, &d)| a * d).sum())
            .collect();
        rank_scale(&scores, T::lit(self.config.rank_floor))
    }

    /// `(1/M) Σ r_m · BCE(clamp(p_m), y_m)`. `ranks` enter as constants.
    pub fn batch_loss(&self, tape: &mut Tape<T>, forward: &BatchForward<T>, ranks: &[T]) -> Result<Var> {
        if ranks.len() != forward.probs.len() {
            return Err(Error::ShapeMismatch {
                op: "batch_loss",
                lhs: vec![forward.probs.len()],
                rhs: vec![ranks.len()],
            });
        }
        let m = forward.probs.len();
        let eps = T::lit(PROB_CLAMP);
        let probs = tape.concat(&forward.probs)?;
        let clamped = tape.clamp(probs, eps, T::one() - eps)?;
        let terms = tape.bce(clamped, &forward.labels)?;
        let r = tape.constant(Tensor::vector(ranks.to_vec()));
        let weighted = tape.mul(terms, r)?;
        let total = tape.sum(weighted)?;
        tape.mul_scalar(total, T::one() / T::lit(m as f64))
    }

    /// Loss and one gradient per named parameter. Parameters the variant does
    /// not use get zeros. `ranks` overrides the batch's own ranking.
    pub fn loss_and_gradients(
        &self,
        batch: &MiniBatch,
        ranks: Option<&[T]>,
    ) -> Result<(T, Vec<Tensor<T>>, BatchForward<T>)> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape);
        let forward = self.forward_batch(&mut tape, &vars, batch)?;
        let owned;
        let ranks = match ranks {
            Some(r) => r,
            None => {
                owned = self.question_ranks(&forward.weights);
                &owned
            }
        };
        let loss = self.batch_loss(&mut tape, &forward, ranks)?;
        let value = scalar_value(&tape, loss)?;
        let mut grads = tape.backward(loss)?;
        let out = vars
            .list()
            .into_iter()
            .zip(self.named_params())
            .map(|(v, (_, p))| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect();
        Ok((value, out, forward))
    }

    /// Loss only; `ranks` as in [`loss_and_gradients`](Self::loss_and_gradients).
    pub fn loss(&self, batch: &MiniBatch, ranks: Option<&[T]>) -> Result<T> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape);
        let forward = self.forward_batch(&mut tape, &vars, batch)?;
        let ranks = match ranks {
            Some(r) => r.to_vec(),
            None => self.question_ranks(&forward.weights),
        };
        let loss = self.batch_loss(&mut tape, &forward, &ranks)?;
        scalar_value(&tape, loss)
    }
}

/// Value of a `[]` node.
pub(crate) fn scalar_value<T: Scalar>(tape: &Tape<T>, var: Var) -> Result<T> {
    let t = tape.value(var)?;
    t.item().ok_or_else(|| Error::NonScalarLoss {
        shape: t.shape().to_vec(),
    })
}

fn argmax<T: Scalar>(w: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in w.iter().enumerate() {
        if v > w[best] {
            best = i;
        }
    }
    best
}

/// Min-max scaling to `[floor, 1]`; flat inputs map to all ones.
pub(crate) fn rank_scale<T: Scalar>(scores: &[T], floor: T) -> Vec<T> {
    let (lo, hi) = scores
        .iter()
        .fold((T::infinity(), T::neg_infinity()), |(lo, hi), &s| (lo.min(s), hi.max(s)));
    let span = hi - lo;
    let tol = T::lit(1e-9) * hi.abs().max(T::one());
    // written so a NaN span also falls back to flat ranks
    if scores.is_empty() || span.partial_cmp(&tol) != Some(std::cmp::Ordering::Greater) {
        return vec![T::one(); scores.len()];
    }
    scores
        .iter()
        .map(|&s| floor + (T::one() - floor) * (s - lo) / span)
        .collect()
}
