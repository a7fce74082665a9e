use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forgetting::{ForgettingSettings, TauMode};
use crate::lcg::{GraphSettings, MAX_GCN_LAYERS};

/// Ablation variants.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Full,
    /// Gate and ranking removed: `z_m = o_t`.
    NoForget,
    /// Graph and ranking removed: prediction from `z_m` alone.
    NoGraph,
    /// Everything except question ranking.
    NoRank,
    /// Plain key-value memory.
    Basic,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::NoForget,
        Variant::NoGraph,
        Variant::NoRank,
        Variant::Basic,
    ];

    pub fn uses_forgetting(self) -> bool {
        matches!(self, Variant::Full | Variant::NoGraph | Variant::NoRank)
    }

    pub fn uses_graph(self) -> bool {
        matches!(self, Variant::Full | Variant::NoForget | Variant::NoRank)
    }

    pub fn uses_ranking(self) -> bool {
        self == Variant::Full
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoForget => "no_forget",
            Variant::NoGraph => "no_graph",
            Variant::NoRank => "no_rank",
            Variant::Basic => "basic",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s.replace('-', "_"))
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

/// Model and training hyperparameters. Serialized with flat keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DgmnConfig {
    /// Number of latent concept slots `N`.
    pub concepts: usize,
    #[serde(rename = "d_k")]
    pub key_dim: usize,
    #[serde(rename = "d_v")]
    pub value_dim: usize,
    /// `|Q|`; 0 means "take it from the training data".
    pub num_questions: usize,
    pub tau: f64,
    pub tau_mode: TauMode,
    pub mu: f64,
    pub binary_adjacency: bool,
    pub gcn_layers: usize,
    #[serde(rename = "l_max")]
    pub lapse_cap: usize,
    #[serde(rename = "t_max")]
    pub trials_cap: usize,
    pub rank_floor: f64,
    pub variant: Variant,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    /// Global gradient-norm clip applied before each optimizer step; 0 disables.
    pub grad_clip: f64,
    pub batch_size: usize,
    pub max_seq_len: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for DgmnConfig {
    fn default() -> Self {
        Self {
            concepts: 20,
            key_dim: 50,
            value_dim: 100,
            num_questions: 0,
            tau: 0.8,
            tau_mode: TauMode::Relative,
            mu: 0.25,
            binary_adjacency: false,
            gcn_layers: 2,
            lapse_cap: 100,
            trials_cap: 100,
            rank_floor: 0.1,
            variant: Variant::Full,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            grad_clip: 5.0,
            batch_size: 32,
            max_seq_len: 200,
            epochs: 10,
            seed: 0,
        }
    }
}

impl DgmnConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.concepts == 0 || self.key_dim == 0 || self.value_dim == 0 {
            return fail("concepts, d_k and d_v must be positive".into());
        }
        if self.num_questions == 0 {
            return fail("num_questions must be positive".into());
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return fail(format!("tau must lie in (0, 1], got {}", self.tau));
        }
        if !(0.0..=1.0).contains(&self.mu) {
            return fail(format!("mu must lie in [0, 1], got {}", self.mu));
        }
        if self.gcn_layers == 0 || self.gcn_layers > MAX_GCN_LAYERS {
            return fail(format!("gcn_layers must lie in [1, {MAX_GCN_LAYERS}]"));
        }
        if self.lapse_cap == 0 || self.trials_cap == 0 {
            return fail("l_max and t_max must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.rank_floor) {
            return fail(format!("rank_floor must lie in [0, 1], got {}", self.rank_floor));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate must be positive".into());
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return fail("adam betas must lie in [0, 1)".into());
        }
        if self.adam_epsilon <= 0.0 || self.grad_clip < 0.0 {
            return fail("adam_epsilon must be positive and grad_clip non-negative".into());
        }
        if self.batch_size == 0 || self.max_seq_len == 0 {
            return fail("batch_size and max_seq_len must be positive".into());
        }
        Ok(())
    }

    pub fn forgetting_settings(&self) -> ForgettingSettings {
        ForgettingSettings {
            tau: self.tau,
            tau_mode: self.tau_mode,
            lapse_cap: self.lapse_cap,
            trials_cap: self.trials_cap,
        }
    }

    pub fn graph_settings(&self) -> GraphSettings {
        GraphSettings {
            mu: self.mu,
            binary_adjacency: self.binary_adjacency,
        }
    }

    /// Width of the prediction layer input.
    pub fn prediction_width(&self) -> usize {
        if self.variant.uses_graph() {
            2 * self.concepts
        } else {
            self.concepts
        }
    }

    /// Field-by-field comparison; returns the first field that differs.
    pub fn first_difference(&self, other: &DgmnConfig) -> Option<(String, String, String)> {
        let a = serde_json::to_value(self).ok()?;
        let b = serde_json::to_value(other).ok()?;
        let (a, b) = (a.as_object()?, b.as_object()?);
        a.iter().find_map(|(k, va)| {
            let vb = b.get(k)?;
            (va != vb).then(|| (k.clone(), va.to_string(), vb.to_string()))
        })
    }
}
