//! Attention memory: static concept keys, per-student concept state,
//! attentive read, concept summary, and the erase/add write.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::init::{gaussian, glorot, zeros, EMBEDDING_SIGMA};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryDims {
    pub concepts: usize,
    pub key_dim: usize,
    pub value_dim: usize,
    pub questions: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMemoryParams<T> {
    /// `[N, d_k]` concept embedding memory.
    pub concept_keys: Tensor<T>,
    /// `[N, d_v]` learned initial concept state, copied into every lane.
    pub initial_state: Tensor<T>,
    /// `[|Q|, d_k]` question embedding.
    pub question_embed: Tensor<T>,
    /// `[2|Q|, d_v]` question-answer embedding, row `q + y·|Q|`.
    pub answer_embed: Tensor<T>,
    pub summary_w: Tensor<T>,
    pub summary_b: Tensor<T>,
    pub erase_w: Tensor<T>,
    pub erase_b: Tensor<T>,
    pub add_w: Tensor<T>,
    pub add_b: Tensor<T>,
}

/// The memory parameters as recorded on one tape.
#[derive(Clone, Copy, Debug)]
pub struct MemoryVars {
    pub concept_keys: Var,
    pub initial_state: Var,
    pub question_embed: Var,
    pub answer_embed: Var,
    pub summary_w: Var,
    pub summary_b: Var,
    pub erase_w: Var,
    pub erase_b: Var,
    pub add_w: Var,
    pub add_b: Var,
}

impl<T: Scalar> AttentionMemoryParams<T> {
    pub fn new<R: Rng + ?Sized>(dims: MemoryDims, rng: &mut R) -> Self {
        let MemoryDims {
            concepts: n,
            key_dim: dk,
            value_dim: dv,
            questions: q,
        } = dims;
        Self {
            concept_keys: gaussian(rng, &[n, dk], EMBEDDING_SIGMA),
            initial_state: gaussian(rng, &[n, dv], EMBEDDING_SIGMA),
            question_embed: gaussian(rng, &[q, dk], EMBEDDING_SIGMA),
            answer_embed: gaussian(rng, &[2 * q, dv], EMBEDDING_SIGMA),
            summary_w: glorot(rng, n, dv + dk),
            summary_b: zeros(n),
            erase_w: glorot(rng, dv, dv + n),
            erase_b: zeros(dv),
            add_w: glorot(rng, dv, dv + n),
            add_b: zeros(dv),
        }
    }

    pub fn dims(&self) -> MemoryDims {
        MemoryDims {
            concepts: self.concept_keys.shape()[0],
            key_dim: self.concept_keys.shape()[1],
            value_dim: self.initial_state.shape()[1],
            questions: self.question_embed.shape()[0],
        }
    }

    pub fn named(&self) -> Vec<(&'static str, &Tensor<T>)> {
        vec![
            ("memory.concept_keys", &self.concept_keys),
            ("memory.initial_state", &self.initial_state),
            ("memory.question_embed", &self.question_embed),
            ("memory.answer_embed", &self.answer_embed),
            ("memory.summary_w", &self.summary_w),
            ("memory.summary_b", &self.summary_b),
            ("memory.erase_w", &self.erase_w),
            ("memory.erase_b", &self.erase_b),
            ("memory.add_w", &self.add_w),
            ("memory.add_b", &self.add_b),
        ]
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        vec![
            ("memory.concept_keys", &mut self.concept_keys),
            ("memory.initial_state", &mut self.initial_state),
            ("memory.question_embed", &mut self.question_embed),
            ("memory.answer_embed", &mut self.answer_embed),
            ("memory.summary_w", &mut self.summary_w),
            ("memory.summary_b", &mut self.summary_b),
            ("memory.erase_w", &mut self.erase_w),
            ("memory.erase_b", &mut self.erase_b),
            ("memory.add_w", &mut self.add_w),
            ("memory.add_b", &mut self.add_b),
        ]
    }

    pub fn register(&self, tape: &mut Tape<T>) -> MemoryVars {
        MemoryVars {
            concept_keys: tape.param(self.concept_keys.clone()),
            initial_state: tape.param(self.initial_state.clone()),
            question_embed: tape.param(self.question_embed.clone()),
            answer_embed: tape.param(self.answer_embed.clone()),
            summary_w: tape.param(self.summary_w.clone()),
            summary_b: tape.param(self.summary_b.clone()),
            erase_w: tape.param(self.erase_w.clone()),
            erase_b: tape.param(self.erase_b.clone()),
            add_w: tape.param(self.add_w.clone()),
            add_b: tape.param(self.add_b.clone()),
        }
    }
}

impl MemoryVars {
    /// Same order as [`AttentionMemoryParams::named`].
    pub fn list(&self) -> Vec<Var> {
        vec![
            self.concept_keys,
            self.initial_state,
            self.question_embed,
            self.answer_embed,
            self.summary_w,
            self.summary_b,
            self.erase_w,
            self.erase_b,
            self.add_w,
            self.add_b,
        ]
    }
}

/// Concept state `M_v` of one sequence lane.
#[derive(Clone, Copy, Debug)]
pub struct StudentMemoryState {
    pub m_v: Var,
}

impl StudentMemoryState {
    pub fn initial(vars: &MemoryVars) -> Self {
        Self {
            m_v: vars.initial_state,
        }
    }
}

/// Erase and add signals of one write.
#[derive(Clone, Copy, Debug)]
pub struct WriteSignals {
    pub erase: Var,
    pub add: Var,
}

pub fn embed_question<T: Scalar>(tape: &mut Tape<T>, vars: &MemoryVars, question: usize) -> Result<Var> {
    let bound = tape.value(vars.question_embed)?.shape()[0];
    if question >= bound {
        return Err(Error::IndexOutOfRange {
            what: "question",
            index: question,
            bound,
        });
    }
    tape.row(vars.question_embed, question)
}

/// `w_t = softmax(M_k · k_t)`.
pub fn relevance<T: Scalar>(tape: &mut Tape<T>, key: Var, concept_keys: Var) -> Result<Var> {
    let logits = tape.matmul(concept_keys, key)?;
    tape.softmax(logits)
}

/// `r_t = Σ_i w_t(i) M_v(i)`.
pub fn read<T: Scalar>(tape: &mut Tape<T>, weights: Var, state: &StudentMemoryState) -> Result<Var> {
    tape.matmul(weights, state.m_v)
}

/// `o_t = tanh(W_o [r_t, k_t] + b_o)`.
pub fn concept_summary<T: Scalar>(tape: &mut Tape<T>, vars: &MemoryVars, read: Var, key: Var) -> Result<Var> {
    let joined = tape.concat(&[read, key])?;
    let pre = tape.affine(vars.summary_w, joined, vars.summary_b)?;
    tape.tanh(pre)
}

/// Erase-then-add update of the concept state after observing `(q, y)`.
#[allow(clippy::too_many_arguments)]
pub fn write<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &MemoryVars,
    state: &StudentMemoryState,
    question: usize,
    correct: bool,
    summary: Var,
    weights: Var,
) -> Result<(StudentMemoryState, WriteSignals)> {
    let rows = tape.value(vars.answer_embed)?.shape()[0];
    let questions = rows / 2;
    let index = question + usize::from(correct) * questions;
    if question >= questions {
        return Err(Error::IndexOutOfRange {
            what: "question",
            index: question,
            bound: questions,
        });
    }
    let answer = tape.row(vars.answer_embed, index)?;
    let update = tape.concat(&[answer, summary])?;
    let erase_pre = tape.affine(vars.erase_w, update, vars.erase_b)?;
    let erase = tape.sigmoid(erase_pre)?;
    let add_pre = tape.affine(vars.add_w, update, vars.add_b)?;
    let add = tape.tanh(add_pre)?;

    let erase_mask = tape.outer(weights, erase)?;
    let keep = tape.rsub_scalar(T::one(), erase_mask)?;
    let erased = tape.mul(state.m_v, keep)?;
    let added = tape.outer(weights, add)?;
    let m_v = tape.add(erased, added)?;
    Ok((StudentMemoryState { m_v }, WriteSignals { erase, add }))
}
