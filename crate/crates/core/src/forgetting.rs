//! Concept-level forgetting: Time Lapse and Trials bookkeeping over the
//! concepts a question attends to, the forgetting layer, and the forget gate.
//!
//! Lapse counts steps since a concept was last exercised (exclusive of the
//! current step); Trials counts exercises including the current attempt.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::Result;
use crate::init::{glorot, zeros};
use crate::scalar::Scalar;

/// How the relevancy threshold is applied to the attention weights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TauMode {
    /// `w(i) / max_j w(j) >= tau`; never empty.
    #[default]
    Relative,
    /// `w(i) > tau`; may be empty.
    Absolute,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForgettingSettings {
    pub tau: f64,
    pub tau_mode: TauMode,
    pub lapse_cap: usize,
    pub trials_cap: usize,
}

impl Default for ForgettingSettings {
    fn default() -> Self {
        Self {
            tau: 0.8,
            tau_mode: TauMode::Relative,
            lapse_cap: 100,
            trials_cap: 100,
        }
    }
}

/// `C(q_t)`: indices of the concepts relevant to the current question.
pub fn relevant_concepts<T: Scalar>(weights: &[T], tau: f64, mode: TauMode) -> Vec<usize> {
    let tau = T::lit(tau);
    match mode {
        TauMode::Relative => {
            let max = weights.iter().fold(T::neg_infinity(), |m, &w| m.max(w));
            if max <= T::zero() {
                return (0..weights.len()).collect();
            }
            (0..weights.len()).filter(|&i| weights[i] / max >= tau).collect()
        }
        TauMode::Absolute => (0..weights.len()).filter(|&i| weights[i] > tau).collect(),
    }
}

/// Per-lane forgetting counters. Time is 1-based within a window.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ForgettingState {
    last_seen: Vec<Option<usize>>,
    trials: Vec<usize>,
    t: usize,
}

/// Raw and normalized features of one step.
#[derive(Clone, Debug, PartialEq)]
pub struct ForgettingFeatures<T> {
    /// Per concept `(lapse, trials)` before normalization; lapse is capped.
    pub raw: Vec<(usize, usize)>,
    /// `[N, 2]`, columns lapse and trials, each in `[0, 1]`.
    pub normalized: Tensor<T>,
}

impl ForgettingState {
    pub fn new(concepts: usize) -> Self {
        Self {
            last_seen: vec![None; concepts],
            trials: vec![0; concepts],
            t: 1,
        }
    }

    pub fn time(&self) -> usize {
        self.t
    }

    pub fn last_seen(&self, concept: usize) -> Option<usize> {
        self.last_seen[concept]
    }

    pub fn trials(&self, concept: usize) -> usize {
        self.trials[concept]
    }

    pub fn concepts(&self) -> usize {
        self.trials.len()
    }

    /// Features at the current step, read before [`observe`](Self::observe).
    pub fn features<T: Scalar>(&self, relevant: &[usize], settings: &ForgettingSettings) -> ForgettingFeatures<T> {
        let n = self.concepts();
        let mut current = vec![false; n];
        for &c in relevant {
            current[c] = true;
        }
        let lapse_cap = settings.lapse_cap.max(1);
        let trials_cap = settings.trials_cap.max(1);
        let mut raw = Vec::with_capacity(n);
        let mut normalized = Vec::with_capacity(2 * n);
        for ((seen, &count), &now) in self.last_seen.iter().zip(&self.trials).zip(&current) {
            let lapse = seen.map_or(lapse_cap, |s| (self.t - s).min(lapse_cap));
            let trials = count + usize::from(now);
            raw.push((lapse, trials));
            normalized.push(T::lit(lapse as f64 / lapse_cap as f64));
            normalized.push(T::lit(trials.min(trials_cap) as f64 / trials_cap as f64));
        }
        ForgettingFeatures {
            raw,
            normalized: Tensor::new(vec![n, 2], normalized).expect("n x 2 features"),
        }
    }

    /// Records an attempt on `relevant` at the current step and advances time.
    pub fn observe(&mut self, relevant: &[usize]) {
        for &c in relevant {
            self.trials[c] += 1;
            self.last_seen[c] = Some(self.t);
        }
        self.t += 1;
    }

    /// Rewrites the counters; intended for tests that probe ablation wiring.
    pub fn set_counters(&mut self, concept: usize, last_seen: Option<usize>, trials: usize) {
        self.last_seen[concept] = last_seen;
        self.trials[concept] = trials;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForgettingParams<T> {
    /// `[N, 2N]` forgetting layer.
    pub forget_w: Tensor<T>,
    pub forget_b: Tensor<T>,
    /// `[N, N]` gate weight on the concept summary.
    pub gate_summary_w: Tensor<T>,
    /// `[N, N]` gate weight on the forget summary.
    pub gate_forget_w: Tensor<T>,
    pub settings: ForgettingSettings,
}

#[derive(Clone, Copy, Debug)]
pub struct ForgettingVars {
    pub forget_w: Var,
    pub forget_b: Var,
    pub gate_summary_w: Var,
    pub gate_forget_w: Var,
}

impl<T: Scalar> ForgettingParams<T> {
    pub fn new<R: Rng + ?Sized>(concepts: usize, settings: ForgettingSettings, rng: &mut R) -> Self {
        Self {
            forget_w: glorot(rng, concepts, 2 * concepts),
            forget_b: zeros(concepts),
            gate_summary_w: glorot(rng, concepts, concepts),
            gate_forget_w: glorot(rng, concepts, concepts),
            settings,
        }
    }

    pub fn named(&self) -> Vec<(&'static str, &Tensor<T>)> {
        vec![
            ("forgetting.forget_w", &self.forget_w),
            ("forgetting.forget_b", &self.forget_b),
            ("forgetting.gate_summary_w", &self.gate_summary_w),
            ("forgetting.gate_forget_w", &self.gate_forget_w),
        ]
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        vec![
            ("forgetting.forget_w", &mut self.forget_w),
            ("forgetting.forget_b", &mut self.forget_b),
            ("forgetting.gate_summary_w", &mut self.gate_summary_w),
            ("forgetting.gate_forget_w", &mut self.gate_forget_w),
        ]
    }

    pub fn register(&self, tape: &mut Tape<T>) -> ForgettingVars {
        ForgettingVars {
            forget_w: tape.param(self.forget_w.clone()),
            forget_b: tape.param(self.forget_b.clone()),
            gate_summary_w: tape.param(self.gate_summary_w.clone()),
            gate_forget_w: tape.param(self.gate_forget_w.clone()),
        }
    }
}

impl ForgettingVars {
    pub fn list(&self) -> Vec<Var> {
        vec![self.forget_w, self.forget_b, self.gate_summary_w, self.gate_forget_w]
    }
}

/// `f_t = tanh(W_f · flatten(F_t) + b_f)`; the features enter as a constant.
pub fn forget_vector<T: Scalar>(tape: &mut Tape<T>, vars: &ForgettingVars, features: &Tensor<T>) -> Result<Var> {
    let flat = Tensor::vector(features.data().to_vec());
    let input = tape.constant(flat);
    let pre = tape.affine(vars.forget_w, input, vars.forget_b)?;
    tape.tanh(pre)
}

/// `fs_t = w_t ∘ f_t`.
pub fn forget_summary<T: Scalar>(tape: &mut Tape<T>, weights: Var, forget: Var) -> Result<Var> {
    tape.mul(weights, forget)
}

/// Gated combination `z_m = gw ∘ o_t + (1 - gw) ∘ fs_t` with
/// `gw = sigmoid(W_1 o_t + W_2 fs_t)`. Returns `(z_m, gw)`.
pub fn forget_gate<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ForgettingVars,
    summary: Var,
    forget_summary: Var,
) -> Result<(Var, Var)> {
    let a = tape.matmul(vars.gate_summary_w, summary)?;
    let b = tape.matmul(vars.gate_forget_w, forget_summary)?;
    let pre = tape.add(a, b)?;
    let gate = tape.sigmoid(pre)?;
    let kept = tape.mul(gate, summary)?;
    let complement = tape.rsub_scalar(T::one(), gate)?;
    let forgotten = tape.mul(complement, forget_summary)?;
    Ok((tape.add(kept, forgotten)?, gate))
}
