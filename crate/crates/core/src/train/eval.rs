use serde::{Deserialize, Serialize};

use super::{predict, Example};
use crate::encoder::ModelParameters;
use crate::error::{Error, Result};
use crate::head::{f1, hits_at_1, Prf};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleResult {
    pub id: usize,
    pub hits1: u8,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub answer_in_input: bool,
    pub prediction: String,
    pub prediction_score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub hits1: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tau: f64,
    /// Fraction of samples with at least one gold answer in the input.
    pub answer_coverage: f64,
    pub structural_mask: bool,
    pub params_total: usize,
    pub params_updated: usize,
    pub rows: Vec<SampleResult>,
}

/// Corpus Hits@1 and F1 (macro-averaged over samples). Samples whose answers
/// are absent from the input count as misses.
pub fn evaluate(model: &ModelParameters, examples: &[Example], tau: f64) -> Result<EvalReport> {
    if examples.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty dataset"));
    }
    let mut rows = Vec::with_capacity(examples.len());
    for ex in examples {
        let scores = predict(model, ex)?;
        let hit = hits_at_1(&scores, &ex.answer_positions);
        let Prf {
            precision,
            recall,
            f1,
        } = f1(&scores, &ex.answer_positions, ex.gold_total, tau)?;
        let best = scores.argmax();
        rows.push(SampleResult {
            id: ex.id,
            hits1: hit,
            precision,
            recall,
            f1,
            answer_in_input: !ex.answer_positions.is_empty(),
            prediction: ex.label(scores.positions[best]).to_string(),
            prediction_score: scores.scores[best],
        });
    }
    let n = rows.len() as f64;
    let mean = |f: fn(&SampleResult) -> f64| rows.iter().map(f).sum::<f64>() / n;
    let counts = model.param_counts();
    Ok(EvalReport {
        samples: rows.len(),
        hits1: mean(|r| r.hits1 as f64),
        precision: mean(|r| r.precision),
        recall: mean(|r| r.recall),
        f1: mean(|r| r.f1),
        tau,
        answer_coverage: mean(|r| r.answer_in_input as u8 as f64),
        structural_mask: model.config().graph_attention == crate::mask::GraphAttention::Structural,
        params_total: counts.total,
        params_updated: counts.trainable,
        rows,
    })
}
