//! Retrieve-then-reason inference over a full knowledge graph.

use serde::{Deserialize, Serialize};

use crate::encoder::{Mode, ModelParameters};
use crate::error::{Error, Result};
use crate::kg::{EntityId, KnowledgeGraph};
use crate::retrieval::{retrieve_subgraph, ModelScorer, RetrievalConfig};
use crate::sequencer::{build_input, Vocabulary};
use crate::serialize::{serialize_subgraph, Subgraph};
use crate::train::{REASONING_ADAPTER, RETRIEVAL_ADAPTER};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Inference {
    pub answer: String,
    pub score: f64,
    /// Entity labels with their scores, best first.
    pub table: Vec<(String, f64)>,
    pub subgraph_triples: usize,
    pub topic_only: bool,
}

/// Copies of `model` with the retrieval and the reasoning adapter active.
pub fn split_adapters(model: &ModelParameters) -> Result<(ModelParameters, ModelParameters)> {
    for name in [RETRIEVAL_ADAPTER, REASONING_ADAPTER] {
        if !model.has_adapter(name) {
            return Err(Error::invalid(format!("model has no {name:?} adapter set")));
        }
    }
    let mut retr = model.clone();
    retr.set_active_adapter(Some(RETRIEVAL_ADAPTER))?;
    let mut reas = model.clone();
    reas.set_active_adapter(Some(REASONING_ADAPTER))?;
    Ok((retr, reas))
}

/// Scores the entities of `subgraph` for `question` with the model's active
/// adapter and head.
pub fn reason_over(
    model: &ModelParameters,
    vocab: &Vocabulary,
    g: &KnowledgeGraph,
    question: &str,
    subgraph: &Subgraph,
) -> Result<Inference> {
    let ser = serialize_subgraph(g, subgraph)?;
    let c = model.config();
    let input = build_input(vocab, question, &ser, c.max_len, c.graph_attention)?;
    let h = model.forward(&input, Mode::Eval)?;
    let scores = model.score_positions(&h, &input.entity_positions())?;
    let n_q = input.question_len();
    let mut table: Vec<(usize, String, f64)> = scores
        .positions
        .iter()
        .zip(&scores.scores)
        .map(|(&p, &s)| (p, input.graph.labels()[p - n_q].clone(), s))
        .collect();
    table.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
    let (_, answer, score) = table[0].clone();
    Ok(Inference {
        answer,
        score,
        table: table.into_iter().map(|(_, l, s)| (l, s)).collect(),
        subgraph_triples: subgraph.triples.len(),
        topic_only: subgraph.triples.is_empty(),
    })
}

pub fn infer(
    model: &ModelParameters,
    vocab: &Vocabulary,
    g: &KnowledgeGraph,
    question: &str,
    topics: &[EntityId],
    cfg: &RetrievalConfig,
) -> Result<Inference> {
    if topics.is_empty() {
        return Err(Error::invalid("inference needs at least one topic entity"));
    }
    let (retr, reas) = split_adapters(model)?;
    let scorer = ModelScorer::new(&retr, vocab)?;
    let subgraph = retrieve_subgraph(&scorer, g, question, topics, cfg)?;
    if subgraph.triples.is_empty() {
        log::warn!("retrieval returned only the topic entities; answering with the topic");
        let label = g.entity_label(topics[0]).to_string();
        return Ok(Inference {
            answer: label.clone(),
            score: 1.0,
            table: vec![(label, 1.0)],
            subgraph_triples: 0,
            topic_only: true,
        });
    }
    reason_over(&reas, vocab, g, question, &subgraph)
}
