//! Adaptation-tuning data: random-walk reasoning paths, distractor subgraphs
//! that always contain the path, and template-based questions.

mod record;
pub mod synthetic;

pub use synthetic::{relation_label, synthetic_graph, SyntheticKgConfig};

pub use record::{
    apply_question_overrides, read_records, validate_record, write_records, Dataset, GraphSample,
    QaRecord, Split,
};

use std::collections::{BTreeSet, HashMap, HashSet, VecDeque};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::{EntityId, KnowledgeGraph, RelationId, Triple};
use crate::serialize::Subgraph;

pub const MAX_HOPS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathStep {
    pub relation: RelationId,
    pub entity: EntityId,
    /// Whether the step followed the triple from head to tail.
    pub forward: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasoningPath {
    pub start: EntityId,
    pub steps: Vec<PathStep>,
    /// Set when the walk hit a dead end before the sampled hop count.
    pub truncated: bool,
}

impl ReasoningPath {
    pub fn hops(&self) -> usize {
        self.steps.len()
    }

    pub fn answer(&self) -> EntityId {
        self.steps.last().map_or(self.start, |s| s.entity)
    }

    pub fn entities(&self) -> Vec<EntityId> {
        let mut seen = HashSet::new();
        std::iter::once(self.start)
            .chain(self.steps.iter().map(|s| s.entity))
            .filter(|e| seen.insert(*e))
            .collect()
    }

    pub fn relations(&self) -> Vec<RelationId> {
        self.steps.iter().map(|s| s.relation).collect()
    }

    pub fn triples(&self) -> Vec<Triple> {
        let mut cur = self.start;
        self.steps
            .iter()
            .map(|s| {
                let t = if s.forward {
                    Triple::new(cur, s.relation, s.entity)
                } else {
                    Triple::new(s.entity, s.relation, cur)
                };
                cur = s.entity;
                t
            })
            .collect()
    }

    /// `topic, r1, e1, r2, e2, ...` as labels.
    pub fn labels(&self, g: &KnowledgeGraph) -> Vec<String> {
        let mut out = vec![g.entity_label(self.start).to_string()];
        for s in &self.steps {
            out.push(g.relation_label(s.relation).to_string());
            out.push(g.entity_label(s.entity).to_string());
        }
        out
    }
}

/// Random walk of a uniformly drawn length in `1..=max_hops`.
pub fn sample_path<R: Rng>(
    g: &KnowledgeGraph,
    topic: EntityId,
    max_hops: usize,
    rng: &mut R,
) -> Result<ReasoningPath> {
    sample_path_between(g, topic, 1, max_hops, rng)
}

/// Random walk of a uniformly drawn length in `min_hops..=max_hops`. Each step
/// picks uniformly among incident triples that do not lead straight back to
/// the previous entity; a dead end stops the walk early and flags the path.
pub fn sample_path_between<R: Rng>(
    g: &KnowledgeGraph,
    topic: EntityId,
    min_hops: usize,
    max_hops: usize,
    rng: &mut R,
) -> Result<ReasoningPath> {
    if !(1..=MAX_HOPS).contains(&max_hops) || min_hops == 0 || min_hops > max_hops {
        return Err(Error::invalid(format!(
            "hop range {min_hops}..={max_hops} outside 1..={MAX_HOPS}"
        )));
    }
    if g.incident(topic)?.is_empty() {
        return Err(Error::invalid(format!(
            "topic {:?} has no incident triples",
            g.entity_label(topic)
        )));
    }
    let hops = rng.random_range(min_hops..=max_hops);
    let mut steps = Vec::with_capacity(hops);
    let mut cur = topic;
    let mut prev: Option<EntityId> = None;
    let mut truncated = false;
    for _ in 0..hops {
        let options: Vec<usize> = g
            .incident(cur)?
            .iter()
            .copied()
            .filter(|&i| Some(g.triples()[i].other(cur).expect("incident")) != prev)
            .collect();
        let Some(&pick) = options.choose(rng) else {
            truncated = true;
            break;
        };
        let t = g.triples()[pick];
        let forward = t.head == cur;
        let next = if forward { t.tail } else { t.head };
        steps.push(PathStep {
            relation: t.relation,
            entity: next,
            forward,
        });
        prev = Some(cur);
        cur = next;
    }
    if truncated {
        log::debug!(
            "walk from {} stopped after {} of {hops} hops",
            topic,
            steps.len()
        );
    }
    Ok(ReasoningPath {
        start: topic,
        steps,
        truncated,
    })
}

/// Path triples plus randomized breadth-limited expansion around the topic
/// until `entity_budget` entities are included or nothing is left to add.
/// Triples come back in knowledge-graph order.
pub fn extract_subgraph<R: Rng>(
    g: &KnowledgeGraph,
    path: &ReasoningPath,
    entity_budget: usize,
    rng: &mut R,
) -> Result<Subgraph> {
    let path_entities = path.entities();
    if entity_budget < path_entities.len() {
        return Err(Error::invalid(format!(
            "entity budget {entity_budget} is below the {} entities on the path",
            path_entities.len()
        )));
    }
    let index: HashMap<Triple, usize> = g
        .triples()
        .iter()
        .enumerate()
        .map(|(i, t)| (*t, i))
        .collect();
    let mut chosen: BTreeSet<usize> = BTreeSet::new();
    for t in path.triples() {
        let i = *index
            .get(&t)
            .ok_or_else(|| Error::invalid("path step is not a triple of the graph"))?;
        chosen.insert(i);
    }
    let mut included: Vec<EntityId> = path_entities;
    let mut in_set: HashSet<EntityId> = included.iter().copied().collect();

    while included.len() < entity_budget {
        let dist = hop_distances(g, path.start, &chosen);
        let mut best = usize::MAX;
        let mut group: Vec<usize> = Vec::new();
        for &e in &included {
            let d = dist.get(&e).copied().unwrap_or(usize::MAX - 1);
            for &i in g.incident(e)? {
                if chosen.contains(&i) {
                    continue;
                }
                if d < best {
                    best = d;
                    group.clear();
                }
                if d == best && !group.contains(&i) {
                    group.push(i);
                }
            }
        }
        let Some(&pick) = group.choose(rng) else {
            break;
        };
        chosen.insert(pick);
        let t = g.triples()[pick];
        for e in [t.head, t.tail] {
            if in_set.insert(e) {
                included.push(e);
            }
        }
    }
    Ok(Subgraph::new(
        vec![path.start],
        chosen.into_iter().map(|i| g.triples()[i]).collect(),
    ))
}

fn hop_distances(
    g: &KnowledgeGraph,
    start: EntityId,
    triples: &BTreeSet<usize>,
) -> HashMap<EntityId, usize> {
    let mut adj: HashMap<EntityId, Vec<EntityId>> = HashMap::new();
    for &i in triples {
        let t = g.triples()[i];
        adj.entry(t.head).or_default().push(t.tail);
        adj.entry(t.tail).or_default().push(t.head);
    }
    let mut dist = HashMap::from([(start, 0)]);
    let mut queue = VecDeque::from([start]);
    while let Some(e) = queue.pop_front() {
        let d = dist[&e];
        for &n in adj.get(&e).map(Vec::as_slice).unwrap_or_default() {
            if let std::collections::hash_map::Entry::Vacant(v) = dist.entry(n) {
                v.insert(d + 1);
                queue.push_back(n);
            }
        }
    }
    dist
}

/// Entities reached from `topics` by following `relations` in order inside
/// `triples`, in either direction.
pub fn follow_relations(
    triples: &[Triple],
    topics: &[EntityId],
    relations: &[RelationId],
) -> BTreeSet<EntityId> {
    let mut cur: BTreeSet<EntityId> = topics.iter().copied().collect();
    for &r in relations {
        let mut next = BTreeSet::new();
        for t in triples.iter().filter(|t| t.relation == r) {
            if cur.contains(&t.head) {
                next.insert(t.tail);
            }
            if cur.contains(&t.tail) {
                next.insert(t.head);
            }
        }
        cur = next;
    }
    cur
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionTemplate {
    pub hops: usize,
    pub pattern: String,
}

impl QuestionTemplate {
    /// Checks that `pattern` mentions `{e0}` and exactly `{r1}..{r<hops>}`.
    pub fn new(hops: usize, pattern: impl Into<String>) -> Result<Self> {
        let pattern = pattern.into();
        if !pattern.contains("{e0}") {
            return Err(Error::invalid(format!("template {pattern:?} lacks {{e0}}")));
        }
        for i in 1..=MAX_HOPS {
            let has = pattern.contains(&format!("{{r{i}}}"));
            if has != (i <= hops) {
                return Err(Error::invalid(format!(
                    "template {pattern:?} must use exactly {{r1}}..{{r{hops}}}"
                )));
            }
        }
        Ok(Self { hops, pattern })
    }

    pub fn fill(&self, topic: &str, relations: &[&str]) -> String {
        let mut out = self.pattern.replace("{e0}", topic);
        for (i, r) in relations.iter().enumerate() {
            out = out.replace(&format!("{{r{}}}", i + 1), r);
        }
        out
    }
}

pub fn default_templates() -> Vec<QuestionTemplate> {
    let raw: [(usize, &str); 11] = [
        (1, "what is the {r1} of {e0}?"),
        (1, "which entity is the {r1} of {e0}?"),
        (1, "tell me the {r1} of {e0}."),
        (2, "what is the {r2} of the {r1} of {e0}?"),
        (2, "which entity is the {r2} of the {r1} of {e0}?"),
        (2, "starting from {e0}, follow {r1} and then {r2}."),
        (3, "what is the {r3} of the {r2} of the {r1} of {e0}?"),
        (
            3,
            "which entity is the {r3} of the {r2} of the {r1} of {e0}?",
        ),
        (3, "starting from {e0}, follow {r1}, then {r2}, then {r3}."),
        (
            4,
            "what is the {r4} of the {r3} of the {r2} of the {r1} of {e0}?",
        ),
        (
            4,
            "starting from {e0}, follow {r1}, then {r2}, then {r3}, then {r4}.",
        ),
    ];
    raw.iter()
        .map(|&(h, p)| QuestionTemplate::new(h, p).expect("built-in template"))
        .collect()
}

/// Instantiates a uniformly chosen template whose hop count matches the path.
pub fn synthesize_question<R: Rng>(
    g: &KnowledgeGraph,
    path: &ReasoningPath,
    templates: &[QuestionTemplate],
    rng: &mut R,
) -> Result<String> {
    let matching: Vec<&QuestionTemplate> =
        templates.iter().filter(|t| t.hops == path.hops()).collect();
    let template = matching
        .choose(rng)
        .ok_or_else(|| Error::invalid(format!("no question template for {} hops", path.hops())))?;
    let rels: Vec<&str> = path
        .steps
        .iter()
        .map(|s| g.relation_label(s.relation))
        .collect();
    Ok(template.fill(g.entity_label(path.start), &rels))
}

/// A generated sample in id space.
#[derive(Clone, Debug)]
pub struct QaSample {
    pub question: String,
    pub topics: Vec<EntityId>,
    pub subgraph: Subgraph,
    pub answers: BTreeSet<EntityId>,
    pub path: ReasoningPath,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatagenConfig {
    pub min_hops: usize,
    pub max_hops: usize,
    /// Entities per extracted subgraph (path entities included).
    pub entity_budget: usize,
    pub val_fraction: f64,
    /// Fraction of highest-degree entities used as topics.
    pub topic_quantile: f64,
    /// Walk attempts per sample before giving up on reaching `min_hops`.
    pub max_attempts: usize,
}

impl Default for DatagenConfig {
    fn default() -> Self {
        Self {
            min_hops: 1,
            max_hops: MAX_HOPS,
            entity_budget: 12,
            val_fraction: 0.05,
            topic_quantile: 1.0,
            max_attempts: 32,
        }
    }
}

/// Seed for sample `index`, independent of how many samples came before.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Generates one sample: path, then subgraph, then question.
pub fn generate_sample<R: Rng>(
    g: &KnowledgeGraph,
    topic: EntityId,
    cfg: &DatagenConfig,
    templates: &[QuestionTemplate],
    rng: &mut R,
) -> Result<Option<QaSample>> {
    for _ in 0..cfg.max_attempts.max(1) {
        let path = sample_path_between(g, topic, cfg.min_hops, cfg.max_hops, rng)?;
        if path.hops() < cfg.min_hops {
            continue;
        }
        let subgraph =
            extract_subgraph(g, &path, cfg.entity_budget.max(path.entities().len()), rng)?;
        let question = synthesize_question(g, &path, templates, rng)?;
        let answers = follow_relations(&subgraph.triples, &[topic], &path.relations());
        debug_assert!(answers.contains(&path.answer()));
        return Ok(Some(QaSample {
            question,
            topics: vec![topic],
            subgraph,
            answers,
            path,
        }));
    }
    Ok(None)
}

/// Generates `n_samples` records; the last `round(n · val_fraction)` form the
/// validation split. Output depends only on the seed.
pub fn generate_dataset(
    g: &KnowledgeGraph,
    n_samples: usize,
    topic_pool: &[EntityId],
    cfg: &DatagenConfig,
    templates: &[QuestionTemplate],
    seed: u64,
) -> Result<Dataset> {
    if n_samples == 0 {
        return Err(Error::invalid("n_samples must be at least 1"));
    }
    if topic_pool.is_empty() {
        return Err(Error::invalid("topic pool is empty"));
    }
    let pool: Vec<EntityId> = topic_pool
        .iter()
        .copied()
        .filter(|&e| g.degree(e) > 0)
        .collect();
    let skipped = topic_pool.len() - pool.len();
    if skipped > 0 {
        log::warn!("skipping {skipped} isolated topic entities");
    }
    if pool.is_empty() {
        return Err(Error::invalid("every topic entity in the pool is isolated"));
    }
    if !(0.0..1.0).contains(&cfg.val_fraction) {
        return Err(Error::invalid("val_fraction must lie in [0, 1)"));
    }
    let n_val = (n_samples as f64 * cfg.val_fraction).round() as usize;
    let n_train = n_samples - n_val;
    let mut records = Vec::with_capacity(n_samples);
    let mut attempt = 0u64;
    while records.len() < n_samples {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, attempt));
        attempt += 1;
        if attempt > (n_samples as u64 + 1) * 64 {
            return Err(Error::invalid(format!(
                "could only generate {} of {n_samples} samples with hops {}..={}",
                records.len(),
                cfg.min_hops,
                cfg.max_hops
            )));
        }
        let topic = *pool.choose(&mut rng).expect("non-empty pool");
        let Some(sample) = generate_sample(g, topic, cfg, templates, &mut rng)? else {
            continue;
        };
        let id = records.len();
        let split = if id < n_train {
            Split::Train
        } else {
            Split::Validation
        };
        records.push(QaRecord::from_sample(g, &sample, id, split));
    }
    Ok(Dataset { records })
}
