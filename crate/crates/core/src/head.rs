//! Answer scoring over entity positions, KL training objective, and the
//! Hits@1 / F1 metrics.

use std::collections::HashSet;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::encoder::{gather_rows, GradientSet, ModelParameters};
use crate::error::{Error, Result};
use crate::kg::EntityId;
use crate::serialize::{NodeToken, SerializedSubgraph};

/// Floor applied to predicted probabilities before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

/// Softmax distribution over a set of candidate positions.
#[derive(Clone, Debug, PartialEq)]
pub struct AnswerScores {
    pub positions: Vec<usize>,
    pub logits: Vec<f64>,
    pub scores: Vec<f64>,
}

impl AnswerScores {
    pub fn from_logits(positions: Vec<usize>, logits: Vec<f64>) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::invalid("no candidate positions to score"));
        }
        if positions.len() != logits.len() {
            return Err(Error::Shape("positions and logits differ in length".into()));
        }
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
        let total: f64 = exps.iter().sum();
        let scores = exps.into_iter().map(|e| e / total).collect();
        Ok(Self {
            positions,
            logits,
            scores,
        })
    }

    /// Index (into `positions`) of the top score; ties go to the lowest position.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for i in 1..self.scores.len() {
            let better = self.scores[i] > self.scores[best]
                || (self.scores[i] == self.scores[best]
                    && self.positions[i] < self.positions[best]);
            if better {
                best = i;
            }
        }
        best
    }

    pub fn top_position(&self) -> usize {
        self.positions[self.argmax()]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TargetDistribution {
    pub positions: Vec<usize>,
    pub probs: Vec<f64>,
}

impl ModelParameters {
    /// Logit per candidate position via the active scoring head, softmaxed
    /// over the candidates only.
    pub fn score_positions(
        &self,
        hidden: &Array2<f64>,
        positions: &[usize],
    ) -> Result<AnswerScores> {
        if positions.is_empty() {
            return Err(Error::invalid("no entity positions to score"));
        }
        if let Some(&p) = positions.iter().find(|&&p| p >= hidden.nrows()) {
            return Err(Error::Shape(format!(
                "position {p} outside {} rows",
                hidden.nrows()
            )));
        }
        let head = self.active_head();
        let rows = gather_rows(hidden, positions);
        let z = rows.dot(self.value(head.w));
        let b = self.value(head.b)[[0, 0]];
        let logits = z.column(0).iter().map(|v| v + b).collect();
        AnswerScores::from_logits(positions.to_vec(), logits)
    }

    /// Gradient w.r.t. the hidden states given `d_logits`, accumulating head
    /// weight gradients into `grads`.
    pub fn head_backward(
        &self,
        hidden: &Array2<f64>,
        positions: &[usize],
        d_logits: &[f64],
        grads: &mut GradientSet,
    ) -> Array2<f64> {
        let head = self.active_head();
        let w = self.value(head.w);
        let mut dh = Array2::zeros(hidden.raw_dim());
        for (&p, &g) in positions.iter().zip(d_logits) {
            let mut row = dh.row_mut(p);
            row.scaled_add(g, &w.column(0));
        }
        let (dw, db) = grads.slots2(head.w, head.b);
        if let Some(dw) = dw {
            for (&p, &g) in positions.iter().zip(d_logits) {
                let mut col = dw.column_mut(0);
                col.scaled_add(g, &hidden.row(p));
            }
        }
        if let Some(db) = db {
            db[[0, 0]] += d_logits.iter().sum::<f64>();
        }
        dh
    }
}

/// Uniform distribution over the absolute positions of answer entities
/// present in the serialized graph. Candidate universe is every entity
/// position. Returns `None` when no answer is present.
pub fn build_target(
    answers: &HashSet<EntityId>,
    serialized: &SerializedSubgraph,
    n_q: usize,
) -> Option<TargetDistribution> {
    let positions: Vec<usize> = serialized
        .entity_positions()
        .into_iter()
        .map(|p| p + n_q)
        .collect();
    let hits: Vec<bool> = serialized
        .tokens()
        .iter()
        .filter(|t| t.is_entity())
        .map(|t| matches!(t, NodeToken::Entity(e) if answers.contains(e)))
        .collect();
    target_from_mask(positions, &hits)
}

/// Uniform target over candidates flagged in `is_answer`.
pub fn target_from_mask(positions: Vec<usize>, is_answer: &[bool]) -> Option<TargetDistribution> {
    let present = is_answer.iter().filter(|&&b| b).count();
    if present == 0 {
        return None;
    }
    let p = 1.0 / present as f64;
    let probs = is_answer.iter().map(|&b| if b { p } else { 0.0 }).collect();
    Some(TargetDistribution { positions, probs })
}

fn check_distribution(name: &str, p: &[f64]) -> Result<()> {
    if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::invalid(format!(
            "{name} has negative or non-finite entries"
        )));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-6 {
        return Err(Error::invalid(format!("{name} sums to {s}, not 1")));
    }
    Ok(())
}

/// `KL(target ‖ predicted)` with `0 · ln(0/·) = 0` and predictions floored at
/// [`PROB_FLOOR`].
pub fn kl_loss(target: &TargetDistribution, predicted: &AnswerScores) -> Result<f64> {
    if target.positions != predicted.positions {
        return Err(Error::invalid(
            "target and prediction cover different positions",
        ));
    }
    check_distribution("target", &target.probs)?;
    check_distribution("prediction", &predicted.scores)?;
    Ok(kl_divergence(&target.probs, &predicted.scores))
}

pub fn kl_divergence(target: &[f64], predicted: &[f64]) -> f64 {
    target
        .iter()
        .zip(predicted)
        .filter(|(t, _)| **t > 0.0)
        .map(|(t, p)| t * (t / p.max(PROB_FLOOR)).ln())
        .sum()
}

/// Gradient of [`kl_loss`] w.r.t. the logits behind `predicted`.
pub fn kl_loss_grad(target: &TargetDistribution, predicted: &AnswerScores) -> Vec<f64> {
    let s = &predicted.scores;
    let ds: Vec<f64> = target
        .probs
        .iter()
        .zip(s)
        .map(|(&t, &p)| {
            if t > 0.0 && p >= PROB_FLOOR {
                -t / p
            } else {
                0.0
            }
        })
        .collect();
    let inner: f64 = s.iter().zip(&ds).map(|(p, d)| p * d).sum();
    s.iter().zip(&ds).map(|(p, d)| p * (d - inner)).collect()
}

/// 1 when the top-scored candidate is an answer.
pub fn hits_at_1(scores: &AnswerScores, answer_positions: &HashSet<usize>) -> u8 {
    u8::from(answer_positions.contains(&scores.top_position()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub fn from_counts(correct: usize, predicted: usize, gold: usize) -> Self {
        let precision = if predicted == 0 {
            0.0
        } else {
            correct as f64 / predicted as f64
        };
        let recall = if gold == 0 {
            0.0
        } else {
            correct as f64 / gold as f64
        };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            precision,
            recall,
            f1,
        }
    }
}

/// Predicted set: candidates scoring at least `tau · max score`. `gold_total`
/// counts every gold answer, including ones missing from the candidates.
pub fn f1(
    scores: &AnswerScores,
    answer_positions: &HashSet<usize>,
    gold_total: usize,
    tau: f64,
) -> Result<Prf> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::invalid(format!("threshold {tau} outside (0, 1]")));
    }
    let max = scores
        .scores
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let predicted: Vec<usize> = scores
        .positions
        .iter()
        .zip(&scores.scores)
        .filter(|(_, &s)| s >= tau * max)
        .map(|(&p, _)| p)
        .collect();
    let correct = predicted
        .iter()
        .filter(|p| answer_positions.contains(p))
        .count();
    Ok(Prf::from_counts(correct, predicted.len(), gold_total))
}
