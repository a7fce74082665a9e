use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{batch, Dataset};
use crate::error::{Error, Result};
use crate::metrics::auc;
use crate::scalar::Scalar;

use super::forward::scalar_value;
use super::optim::clip_global_norm;
use super::DgmnModel;

/// One line of the training report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    /// 1-based, counted across resumed runs.
    pub epoch: usize,
    pub loss: f64,
    /// AUC of the predictions made during the epoch's training pass.
    pub train_auc: Option<f64>,
    pub valid_auc: Option<f64>,
    pub wall_ms: u64,
}

pub const PREDICTION_HEADER: &str = "seq,t,q,y,p,concept,lapse,trials";

/// One evaluated step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PredictionRecord {
    pub seq: usize,
    /// 1-based position in the full sequence.
    pub t: usize,
    pub q: usize,
    pub y: bool,
    pub p: f64,
    pub concept: usize,
    pub lapse: usize,
    pub trials: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Evaluation {
    pub predictions: Vec<PredictionRecord>,
}

impl Evaluation {
    pub fn auc(&self) -> Result<f64> {
        let scores: Vec<f64> = self.predictions.iter().map(|r| r.p).collect();
        let labels: Vec<bool> = self.predictions.iter().map(|r| r.y).collect();
        auc(&scores, &labels)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(32 * (self.predictions.len() + 1));
        out.push_str(PREDICTION_HEADER);
        out.push('\n');
        for r in &self.predictions {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.seq,
                r.t,
                r.q,
                u8::from(r.y),
                r.p,
                r.concept,
                r.lapse,
                r.trials
            );
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Shuffle seed of one epoch.
fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

impl<T: Scalar> DgmnModel<T> {
    fn check_questions(&self, ds: &Dataset) -> Result<()> {
        match ds.max_question_id() {
            Some(q) if q >= self.config.num_questions => Err(Error::Data(format!(
                "{}: question id {q} exceeds the model's {} questions",
                ds.name, self.config.num_questions
            ))),
            _ => Ok(()),
        }
    }

    /// One pass over `data`. Returns the epoch report without `valid_auc`.
    pub fn train_epoch(&mut self, data: &Dataset) -> Result<EpochReport> {
        self.check_questions(data)?;
        let start = Instant::now();
        let epoch = self.progress.epochs_completed + 1;
        let batches = batch(
            data,
            self.config.batch_size,
            self.config.max_seq_len,
            epoch_seed(self.config.seed, epoch),
        )?;
        let mut loss_sum = 0.0;
        let mut observed = 0usize;
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        for (index, mb) in batches.iter().enumerate() {
            let diverged = |detail: String| Error::Divergence {
                epoch,
                batch: index + 1,
                detail,
            };
            let (loss, mut grads, forward) = self.loss_and_gradients(mb, None)?;
            if !loss.is_finite() {
                return Err(diverged(format!("loss is {loss}")));
            }
            let norm = clip_global_norm(&mut grads, self.config.grad_clip);
            if !norm.is_finite() {
                return Err(diverged("gradient norm is not finite".into()));
            }
            self.apply_gradients(&grads)?;
            if let Some((name, _)) = self.named_params().into_iter().find(|(_, p)| !p.is_finite()) {
                return Err(diverged(format!("parameter {name} is not finite")));
            }
            self.progress.batches_seen += 1;
            if self.config.variant.uses_graph() {
                self.rebuild_graph(&forward.mean_state);
            }
            let m = forward.labels.len();
            loss_sum += loss.as_f64() * m as f64;
            observed += m;
            scores.extend(forward.prob_values.iter().map(|p| p.as_f64()));
            labels.extend(forward.labels.iter().map(|&y| y > T::zero()));
            log::debug!("epoch {epoch} batch {} loss {:.6} grad_norm {norm:.4}", index + 1, loss.as_f64());
        }
        self.progress.epochs_completed = epoch;
        Ok(EpochReport {
            epoch,
            loss: if observed > 0 { loss_sum / observed as f64 } else { 0.0 },
            train_auc: auc(&scores, &labels).ok(),
            valid_auc: None,
            wall_ms: start.elapsed().as_millis() as u64,
        })
    }

    /// Trains for `epochs` more epochs, evaluating on `valid` after each one.
    /// `on_epoch` sees every report as soon as it is complete.
    pub fn fit(
        &mut self,
        train: &Dataset,
        valid: Option<&Dataset>,
        epochs: usize,
        mut on_epoch: impl FnMut(&EpochReport) -> Result<()>,
    ) -> Result<Vec<EpochReport>> {
        let mut reports = Vec::with_capacity(epochs);
        for _ in 0..epochs {
            let start = Instant::now();
            let mut report = self.train_epoch(train)?;
            if let Some(v) = valid {
                report.valid_auc = self.evaluate(v)?.auc().ok();
            }
            report.wall_ms = start.elapsed().as_millis() as u64;
            log::info!(
                "epoch {} loss {:.5} train_auc {:?} valid_auc {:?}",
                report.epoch,
                report.loss,
                report.train_auc,
                report.valid_auc
            );
            on_epoch(&report)?;
            reports.push(report);
        }
        Ok(reports)
    }

    /// Teacher-forced predictions for every step of `data`, in windows of
    /// `max_seq_len` exactly as during training.
    pub fn evaluate(&self, data: &Dataset) -> Result<Evaluation> {
        self.check_questions(data)?;
        let mut predictions = Vec::with_capacity(data.num_interactions());
        for (seq, sequence) in data.sequences.iter().enumerate() {
            let mut t = 0;
            for window in sequence.windows(self.config.max_seq_len) {
                let mut tape = Tape::new();
                let vars = self.register(&mut tape);
                let hidden = self.graph_hidden(&mut tape, &vars)?;
                let mut lane = self.new_lane(&vars);
                for step in window {
                    t += 1;
                    let out = self.forward_step(&mut tape, &vars, hidden, &lane, step.question)?;
                    let p = scalar_value(&tape, out.prob)?.as_f64();
                    if !p.is_finite() {
                        return Err(Error::Divergence {
                            epoch: self.progress.epochs_completed,
                            batch: 0,
                            detail: format!("prediction for sequence {seq} step {t} is {p}"),
                        });
                    }
                    predictions.push(PredictionRecord {
                        seq,
                        t,
                        q: step.question,
                        y: step.correct,
                        p: p.clamp(super::PROB_CLAMP, 1.0 - super::PROB_CLAMP),
                        concept: out.diagnostic.concept,
                        lapse: out.diagnostic.lapse,
                        trials: out.diagnostic.trials,
                    });
                    self.step_update(&mut tape, &vars, &mut lane, step.question, step.correct, &out)?;
                }
            }
        }
        Ok(Evaluation { predictions })
    }
}
