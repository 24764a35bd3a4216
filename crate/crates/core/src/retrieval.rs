//! Question–relation scoring and iterative top-k relation expansion.
//!
//! Candidate relations are encoded as isolated relation tokens after the
//! question. Every candidate shares the first graph position, so with the
//! structural mask a relation's score depends only on the question and the
//! relation itself, never on which other candidates are present or their
//! order.

use std::collections::{BTreeSet, HashMap, HashSet, VecDeque};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{derive_seed, QaRecord};
use crate::encoder::{Mode, ModelParameters};
use crate::error::{Error, Result};
use crate::head::target_from_mask;
use crate::kg::{EntityId, KnowledgeGraph, RelationId};
use crate::mask::GraphAttention;
use crate::sequencer::{build_input, InputSequence, Vocabulary};
use crate::serialize::{NodeToken, SerializedSubgraph, Subgraph};
use crate::train::{Example, RETRIEVAL_ADAPTER};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelationScore {
    pub relation: RelationId,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    /// Relations kept per expanded entity.
    pub k: usize,
    pub max_hops: usize,
    /// Expansion stops before the subgraph would exceed this many entities.
    pub entity_cap: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            k: 3,
            max_hops: 3,
            entity_cap: 1000,
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.max_hops == 0 || self.entity_cap == 0 {
            return Err(Error::invalid(
                "k, max_hops and entity_cap must be at least 1",
            ));
        }
        Ok(())
    }
}

/// Scores relations for a question. Implementations must give each relation
/// a score that does not depend on the other candidates.
pub trait RelationScorer {
    fn score(&self, question: &str, candidates: &[(RelationId, &str)]) -> Result<Vec<f64>>;
}

impl<F> RelationScorer for F
where
    F: Fn(&str, RelationId, &str) -> f64,
{
    fn score(&self, question: &str, candidates: &[(RelationId, &str)]) -> Result<Vec<f64>> {
        Ok(candidates
            .iter()
            .map(|&(r, l)| self(question, r, l))
            .collect())
    }
}

/// Builds relation-scoring inputs, chunked to fit `max_len`. Returned inputs
/// cover `labels` in order.
pub fn relation_inputs(
    vocab: &Vocabulary,
    max_len: usize,
    question: &str,
    relations: &[(RelationId, &str)],
) -> Result<Vec<InputSequence>> {
    let n_q = vocab.tokenize(question).len();
    if n_q == 0 {
        return Err(Error::invalid("question is empty"));
    }
    let room = max_len.saturating_sub(n_q);
    if room == 0 {
        return Err(Error::invalid(
            "question leaves no room for relation tokens",
        ));
    }
    let mut out = Vec::new();
    for chunk in relations.chunks(room) {
        let ser = SerializedSubgraph::from_parts(
            chunk.iter().map(|&(r, _)| NodeToken::Relation(r)).collect(),
            chunk.iter().map(|&(_, l)| l.to_string()).collect(),
            [],
            Vec::new(),
        )?;
        let mut input = build_input(vocab, question, &ser, max_len, GraphAttention::Structural)?;
        for p in &mut input.positions[n_q..] {
            *p = n_q;
        }
        out.push(input);
    }
    Ok(out)
}

/// Scores relations with the encoder and the retrieval adapter's head.
pub struct ModelScorer<'a> {
    model: &'a ModelParameters,
    vocab: &'a Vocabulary,
}

impl<'a> ModelScorer<'a> {
    pub fn new(model: &'a ModelParameters, vocab: &'a Vocabulary) -> Result<Self> {
        if model.active_adapter() != Some(RETRIEVAL_ADAPTER) {
            return Err(Error::invalid(
                "relation scoring needs the retrieval adapter active",
            ));
        }
        Ok(Self { model, vocab })
    }
}

impl RelationScorer for ModelScorer<'_> {
    fn score(&self, question: &str, candidates: &[(RelationId, &str)]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(candidates.len());
        for input in relation_inputs(
            self.vocab,
            self.model.config().max_len,
            question,
            candidates,
        )? {
            let h = self.model.forward(&input, Mode::Eval)?;
            let scores = self
                .model
                .score_positions(&h, &input.relation_positions())?;
            out.extend(scores.logits);
        }
        Ok(out)
    }
}

/// Scores `candidates` in relation-id order.
pub fn score_relations(
    scorer: &dyn RelationScorer,
    g: &KnowledgeGraph,
    question: &str,
    candidates: &BTreeSet<RelationId>,
) -> Result<Vec<RelationScore>> {
    if candidates.is_empty() {
        return Ok(Vec::new());
    }
    let labelled: Vec<(RelationId, &str)> = candidates
        .iter()
        .map(|&r| (r, g.relation_label(r)))
        .collect();
    let scores = scorer.score(question, &labelled)?;
    if scores.len() != labelled.len() {
        return Err(Error::Shape(
            "scorer returned the wrong number of scores".into(),
        ));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!(
            "score of relation {}",
            labelled[i].1
        )));
    }
    Ok(labelled
        .iter()
        .zip(scores)
        .map(|(&(relation, _), score)| RelationScore { relation, score })
        .collect())
}

/// Expands from the topics hop by hop. Each newly reached entity keeps its
/// `k` best incident relations (ties by relation id) and contributes every
/// incident triple bearing one of them. Expansion stops before the entity
/// count would pass `entity_cap`.
pub fn retrieve_subgraph(
    scorer: &dyn RelationScorer,
    g: &KnowledgeGraph,
    question: &str,
    topics: &[EntityId],
    cfg: &RetrievalConfig,
) -> Result<Subgraph> {
    cfg.validate()?;
    let mut seen = HashSet::new();
    let topics: Vec<EntityId> = topics.iter().copied().filter(|t| seen.insert(*t)).collect();
    for &t in &topics {
        g.incident(t)?;
    }
    let mut reached: HashSet<EntityId> = topics.iter().copied().collect();
    let mut chosen: BTreeSet<usize> = BTreeSet::new();
    let mut cache: HashMap<RelationId, f64> = HashMap::new();
    let mut frontier = topics.clone();
    'hops: for _hop in 0..cfg.max_hops {
        if frontier.is_empty() || reached.len() >= cfg.entity_cap {
            break;
        }
        let fresh: BTreeSet<RelationId> = frontier
            .iter()
            .flat_map(|&e| g.incident(e).expect("checked entity"))
            .map(|&i| g.triples()[i].relation)
            .filter(|r| !cache.contains_key(r))
            .collect();
        for s in score_relations(scorer, g, question, &fresh)? {
            cache.insert(s.relation, s.score);
        }
        let mut next = Vec::new();
        for &e in &frontier {
            let incident = g.incident(e)?;
            let mut rels: Vec<RelationId> = incident
                .iter()
                .map(|&i| g.triples()[i].relation)
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect();
            rels.sort_by(|a, b| cache[b].total_cmp(&cache[a]).then(a.cmp(b)));
            rels.truncate(cfg.k);
            for &i in incident {
                let t = g.triples()[i];
                if !rels.contains(&t.relation) || chosen.contains(&i) {
                    continue;
                }
                let new: Vec<EntityId> = [t.head, t.tail]
                    .into_iter()
                    .filter(|x| !reached.contains(x))
                    .collect::<BTreeSet<_>>()
                    .into_iter()
                    .collect();
                if reached.len() + new.len() > cfg.entity_cap {
                    break 'hops;
                }
                chosen.insert(i);
                for x in new {
                    reached.insert(x);
                    next.push(x);
                }
            }
        }
        frontier = next;
    }
    let triples = chosen.into_iter().map(|i| g.triples()[i]).collect();
    Ok(Subgraph::new(topics, triples))
}

/// A retrieved subgraph as a dataset record, so the reasoning stage can read
/// it unchanged.
pub fn retrieved_record(g: &KnowledgeGraph, template: &QaRecord, subgraph: &Subgraph) -> QaRecord {
    QaRecord {
        id: template.id,
        question: template.question.clone(),
        topics: subgraph
            .topics
            .iter()
            .map(|&e| g.entity_label(e).to_string())
            .collect(),
        triples: subgraph
            .triples
            .iter()
            .map(|t| {
                [
                    g.entity_label(t.head).to_string(),
                    g.relation_label(t.relation).to_string(),
                    g.entity_label(t.tail).to_string(),
                ]
            })
            .collect(),
        answers: template.answers.clone(),
        path: Vec::new(),
        split: template.split,
    }
}

/// Whether every gold answer of `record` is an entity of `subgraph`.
pub fn answers_covered(g: &KnowledgeGraph, record: &QaRecord, subgraph: &Subgraph) -> bool {
    let ents: HashSet<EntityId> = subgraph.entities().into_iter().collect();
    record
        .answers
        .iter()
        .all(|a| g.entity_id(a).is_some_and(|e| ents.contains(&e)))
}

/// One retrieval training instance: a question, the relations at one hop
/// of a shortest topic–answer path, and sampled frontier negatives.
#[derive(Clone, Debug, PartialEq)]
pub struct RelationPair {
    pub sample_id: usize,
    pub question: String,
    pub hop: usize,
    /// Positives and negatives, sorted by relation id.
    pub candidates: Vec<RelationId>,
    pub positives: BTreeSet<RelationId>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MinedPairs {
    pub pairs: Vec<RelationPair>,
    /// Records with no topic–answer path within `max_hops`.
    pub skipped: usize,
}

fn bfs(g: &KnowledgeGraph, sources: &[EntityId], limit: usize) -> HashMap<EntityId, usize> {
    let mut dist = HashMap::new();
    let mut queue = VecDeque::new();
    for &s in sources {
        if dist.insert(s, 0).is_none() {
            queue.push_back(s);
        }
    }
    while let Some(e) = queue.pop_front() {
        let d = dist[&e];
        if d == limit {
            continue;
        }
        for t in g.neighborhood(e).unwrap_or_default() {
            let n = t.other(e).expect("incident triple");
            if let std::collections::hash_map::Entry::Vacant(v) = dist.entry(n) {
                v.insert(d + 1);
                queue.push_back(n);
            }
        }
    }
    dist
}

/// Mines per-hop relation supervision from shortest topic–answer paths.
/// At hop `h` the frontier is the set of shortest-path entities at distance
/// `h − 1`; positives are relations of shortest-path edges leaving it, and up
/// to `max_negatives` of its other incident relations are sampled uniformly.
pub fn mine_training_pairs(
    g: &KnowledgeGraph,
    records: &[QaRecord],
    max_hops: usize,
    max_negatives: usize,
    seed: u64,
) -> Result<MinedPairs> {
    let mut out = MinedPairs::default();
    for (ri, rec) in records.iter().enumerate() {
        let topics: Vec<EntityId> = rec.topics.iter().filter_map(|t| g.entity_id(t)).collect();
        let answers: Vec<EntityId> = rec.answers.iter().filter_map(|a| g.entity_id(a)).collect();
        let from_topic = bfs(g, &topics, max_hops);
        let Some(depth) = answers
            .iter()
            .filter_map(|a| from_topic.get(a).copied())
            .filter(|&d| d > 0)
            .min()
        else {
            out.skipped += 1;
            continue;
        };
        let nearest: Vec<EntityId> = answers
            .iter()
            .copied()
            .filter(|a| from_topic.get(a) == Some(&depth))
            .collect();
        let to_answer = bfs(g, &nearest, depth);
        let on_path = |e: EntityId, h: usize| {
            from_topic.get(&e) == Some(&h) && to_answer.get(&e) == Some(&(depth - h))
        };
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, ri as u64));
        for hop in 1..=depth {
            let frontier: BTreeSet<EntityId> = from_topic
                .keys()
                .copied()
                .filter(|&e| on_path(e, hop - 1))
                .collect();
            let mut positives = BTreeSet::new();
            let mut all = BTreeSet::new();
            for &e in &frontier {
                for t in g.neighborhood(e)? {
                    all.insert(t.relation);
                    let n = t.other(e).expect("incident triple");
                    if on_path(n, hop) {
                        positives.insert(t.relation);
                    }
                }
            }
            let others: Vec<RelationId> = all.difference(&positives).copied().collect();
            let take = others.len().min(max_negatives);
            let mut candidates: Vec<RelationId> = sample(&mut rng, others.len(), take)
                .into_iter()
                .map(|i| others[i])
                .chain(positives.iter().copied())
                .collect();
            candidates.sort();
            out.pairs.push(RelationPair {
                sample_id: rec.id,
                question: rec.question.clone(),
                hop,
                candidates,
                positives,
            });
        }
    }
    Ok(out)
}

/// Turns a mined pair into a training example over relation positions with a
/// uniform target on the positives.
pub fn relation_example(
    vocab: &Vocabulary,
    g: &KnowledgeGraph,
    max_len: usize,
    pair: &RelationPair,
) -> Result<Example> {
    let labelled: Vec<(RelationId, &str)> = pair
        .candidates
        .iter()
        .map(|&r| (r, g.relation_label(r)))
        .collect();
    let mut inputs = relation_inputs(vocab, max_len, &pair.question, &labelled)?;
    if inputs.len() != 1 {
        return Err(Error::invalid(format!(
            "{} candidate relations do not fit in max_len {max_len}",
            labelled.len()
        )));
    }
    let input = inputs.remove(0);
    let candidates = input.relation_positions();
    let is_pos: Vec<bool> = pair
        .candidates
        .iter()
        .map(|r| pair.positives.contains(r))
        .collect();
    let answer_positions = candidates
        .iter()
        .zip(&is_pos)
        .filter(|(_, &p)| p)
        .map(|(&c, _)| c)
        .collect();
    Ok(Example {
        id: pair.sample_id,
        target: target_from_mask(candidates.clone(), &is_pos),
        candidates,
        input,
        answer_positions,
        gold_total: pair.positives.len(),
    })
}
