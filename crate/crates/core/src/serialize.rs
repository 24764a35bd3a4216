//! Breadth-first linearization of a subgraph into a deduplicated token
//! sequence, plus the triple-local adjacency that the attention mask reads.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::{EntityId, KnowledgeGraph, RelationId, Triple};

/// A question-relevant fragment of a knowledge graph.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subgraph {
    pub topics: Vec<EntityId>,
    pub triples: Vec<Triple>,
}

impl Subgraph {
    pub fn new(topics: Vec<EntityId>, triples: Vec<Triple>) -> Self {
        Self { topics, triples }
    }

    /// Distinct entities in topic order followed by first appearance in the
    /// triple list.
    pub fn entities(&self) -> Vec<EntityId> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for &e in self
            .topics
            .iter()
            .chain(self.triples.iter().flat_map(|t| [&t.head, &t.tail]))
        {
            if seen.insert(e) {
                out.push(e);
            }
        }
        out
    }

    fn validate(&self, g: &KnowledgeGraph) -> Result<()> {
        if self.topics.is_empty() {
            return Err(Error::InvalidSubgraph("no topic entity".into()));
        }
        for &e in &self.topics {
            if e.0 >= g.num_entities() {
                return Err(Error::UnknownEntity(e.0));
            }
        }
        for t in &self.triples {
            for e in [t.head, t.tail] {
                if e.0 >= g.num_entities() {
                    return Err(Error::UnknownEntity(e.0));
                }
            }
            if t.relation.0 >= g.num_relations() {
                return Err(Error::UnknownRelation(t.relation.0));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NodeToken {
    Entity(EntityId),
    Relation(RelationId),
}

impl NodeToken {
    pub fn is_entity(&self) -> bool {
        matches!(self, NodeToken::Entity(_))
    }

    pub fn kind(&self) -> &'static str {
        match self {
            NodeToken::Entity(_) => "entity",
            NodeToken::Relation(_) => "relation",
        }
    }
}

/// Serialized subgraph: node tokens with their surface labels, symmetric
/// position adjacency, and the positions of topic entities.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SerializedSubgraph {
    tokens: Vec<NodeToken>,
    labels: Vec<String>,
    /// Unordered pairs stored as `(i, j)` with `i < j`.
    adjacency: BTreeSet<(usize, usize)>,
    topic_positions: Vec<usize>,
    /// Set when some triples were not reachable from the topic entities and
    /// were appended after the breadth-first part.
    pub unreachable_triples: bool,
}

impl SerializedSubgraph {
    /// Assembles a serialized subgraph from parts, checking that every
    /// adjacency pair references a valid position.
    pub fn from_parts(
        tokens: Vec<NodeToken>,
        labels: Vec<String>,
        adjacency: impl IntoIterator<Item = (usize, usize)>,
        topic_positions: Vec<usize>,
    ) -> Result<Self> {
        if tokens.len() != labels.len() {
            return Err(Error::Shape("token and label counts differ".into()));
        }
        let n = tokens.len();
        let mut adj = BTreeSet::new();
        for (i, j) in adjacency {
            if i >= n || j >= n {
                return Err(Error::InvalidSubgraph(format!(
                    "adjacency pair ({i}, {j}) outside {n} tokens"
                )));
            }
            if i != j {
                adj.insert((i.min(j), i.max(j)));
            }
        }
        if topic_positions.iter().any(|&p| p >= n) {
            return Err(Error::InvalidSubgraph("topic position out of range".into()));
        }
        Ok(Self {
            tokens,
            labels,
            adjacency: adj,
            topic_positions,
            unreachable_triples: false,
        })
    }

    pub fn tokens(&self) -> &[NodeToken] {
        &self.tokens
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn adjacency(&self) -> &BTreeSet<(usize, usize)> {
        &self.adjacency
    }

    pub fn is_adjacent(&self, i: usize, j: usize) -> bool {
        i != j && self.adjacency.contains(&(i.min(j), i.max(j)))
    }

    pub fn topic_positions(&self) -> &[usize] {
        &self.topic_positions
    }

    pub fn entity_positions(&self) -> Vec<usize> {
        self.positions_where(NodeToken::is_entity)
    }

    pub fn relation_positions(&self) -> Vec<usize> {
        self.positions_where(|t| !t.is_entity())
    }

    fn positions_where(&self, pred: impl Fn(&NodeToken) -> bool) -> Vec<usize> {
        self.tokens
            .iter()
            .enumerate()
            .filter(|(_, t)| pred(t))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn position_of(&self, token: NodeToken) -> Option<usize> {
        self.tokens.iter().position(|&t| t == token)
    }

    /// Keeps the longest prefix of at most `budget` tokens and drops adjacency
    /// pairs that would dangle. Position 0 is always kept.
    pub fn truncate(&self, budget: usize) -> SerializedSubgraph {
        let keep = budget.max(1).min(self.tokens.len());
        SerializedSubgraph {
            tokens: self.tokens[..keep].to_vec(),
            labels: self.labels[..keep].to_vec(),
            adjacency: self
                .adjacency
                .iter()
                .copied()
                .filter(|&(_, j)| j < keep)
                .collect(),
            topic_positions: self
                .topic_positions
                .iter()
                .copied()
                .filter(|&p| p < keep)
                .collect(),
            unreachable_triples: self.unreachable_triples,
        }
    }

    /// `pos<TAB>kind<TAB>label` per token, then an `adjacency` line and one
    /// `i<TAB>j` line per unordered pair.
    pub fn debug_dump(&self) -> String {
        let mut out = String::new();
        for (i, (t, l)) in self.tokens.iter().zip(&self.labels).enumerate() {
            let _ = writeln!(out, "{i}\t{}\t{l}", t.kind());
        }
        out.push_str("adjacency\n");
        for (i, j) in &self.adjacency {
            let _ = writeln!(out, "{i}\t{j}");
        }
        out
    }
}

/// Serializes `sg` by breadth-first search over triples from its topic
/// entities. Within a hop, triples are visited in subgraph list order; each
/// visited triple contributes its head, relation and tail unless already
/// emitted.
pub fn serialize_subgraph(g: &KnowledgeGraph, sg: &Subgraph) -> Result<SerializedSubgraph> {
    sg.validate(g)?;

    let mut out = Emitter::new(g);
    let mut reached: HashSet<EntityId> = HashSet::new();
    let mut frontier: Vec<EntityId> = Vec::new();
    for &t in &sg.topics {
        if reached.insert(t) {
            frontier.push(t);
        }
        out.push(NodeToken::Entity(t));
    }
    let topic_positions: Vec<usize> = frontier
        .iter()
        .map(|&t| out.index[&NodeToken::Entity(t)])
        .collect();

    let mut visited = vec![false; sg.triples.len()];
    while !frontier.is_empty() {
        let in_frontier: HashSet<EntityId> = frontier.iter().copied().collect();
        let mut next = Vec::new();
        for (i, t) in sg.triples.iter().enumerate() {
            if visited[i] || !(in_frontier.contains(&t.head) || in_frontier.contains(&t.tail)) {
                continue;
            }
            visited[i] = true;
            out.visit(t);
            for e in [t.head, t.tail] {
                if reached.insert(e) {
                    next.push(e);
                }
            }
        }
        frontier = next;
    }

    let mut unreachable = false;
    for (i, t) in sg.triples.iter().enumerate() {
        if !visited[i] {
            unreachable = true;
            out.visit(t);
        }
    }
    if unreachable {
        log::warn!("subgraph contains triples unreachable from its topic entities");
    }

    Ok(SerializedSubgraph {
        tokens: out.tokens,
        labels: out.labels,
        adjacency: out.adjacency,
        topic_positions,
        unreachable_triples: unreachable,
    })
}

struct Emitter<'g> {
    g: &'g KnowledgeGraph,
    tokens: Vec<NodeToken>,
    labels: Vec<String>,
    index: HashMap<NodeToken, usize>,
    adjacency: BTreeSet<(usize, usize)>,
}

impl<'g> Emitter<'g> {
    fn new(g: &'g KnowledgeGraph) -> Self {
        Self {
            g,
            tokens: Vec::new(),
            labels: Vec::new(),
            index: HashMap::new(),
            adjacency: BTreeSet::new(),
        }
    }

    fn push(&mut self, tok: NodeToken) -> usize {
        if let Some(&i) = self.index.get(&tok) {
            return i;
        }
        let i = self.tokens.len();
        self.tokens.push(tok);
        self.labels.push(match tok {
            NodeToken::Entity(e) => self.g.entity_label(e).to_string(),
            NodeToken::Relation(r) => self.g.relation_label(r).to_string(),
        });
        self.index.insert(tok, i);
        i
    }

    fn visit(&mut self, t: &Triple) {
        let h = self.push(NodeToken::Entity(t.head));
        let r = self.push(NodeToken::Relation(t.relation));
        let tl = self.push(NodeToken::Entity(t.tail));
        for (a, b) in [(h, r), (h, tl), (r, tl)] {
            if a != b {
                self.adjacency.insert((a.min(b), a.max(b)));
            }
        }
    }
}
