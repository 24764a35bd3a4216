//! Knowledge graph storage: interned entity and relation labels, a
//! deduplicated triple list, and a per-entity incidence index covering both
//! directions.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EntityId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RelationId(pub usize);

impl fmt::Display for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "e{}", self.0)
    }
}

impl fmt::Display for RelationId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Triple {
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: EntityId,
}

impl Triple {
    pub fn new(head: EntityId, relation: RelationId, tail: EntityId) -> Self {
        Self {
            head,
            relation,
            tail,
        }
    }

    pub fn touches(&self, e: EntityId) -> bool {
        self.head == e || self.tail == e
    }

    /// The endpoint opposite to `e`, or `None` when `e` is not an endpoint.
    /// A self-loop returns `e` itself.
    pub fn other(&self, e: EntityId) -> Option<EntityId> {
        if self.head == e {
            Some(self.tail)
        } else if self.tail == e {
            Some(self.head)
        } else {
            None
        }
    }
}

/// Interning symbol table.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
struct Symbols {
    labels: Vec<String>,
    index: HashMap<String, usize>,
}

impl Symbols {
    fn intern(&mut self, label: &str) -> usize {
        if let Some(&id) = self.index.get(label) {
            return id;
        }
        let id = self.labels.len();
        self.labels.push(label.to_string());
        self.index.insert(label.to_string(), id);
        id
    }

    fn get(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }
}

/// Incrementally builds a [`KnowledgeGraph`]; exact duplicate triples are
/// collapsed and labels are interned in first-appearance order.
#[derive(Debug, Default)]
pub struct GraphBuilder {
    entities: Symbols,
    relations: Symbols,
    triples: Vec<Triple>,
    seen: HashSet<Triple>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entity(&mut self, label: &str) -> EntityId {
        EntityId(self.entities.intern(label))
    }

    pub fn relation(&mut self, label: &str) -> RelationId {
        RelationId(self.relations.intern(label))
    }

    /// Adds a triple by labels. Returns `false` when it was a duplicate.
    pub fn add(&mut self, head: &str, relation: &str, tail: &str) -> bool {
        let h = self.entity(head);
        let r = self.relation(relation);
        let t = self.entity(tail);
        self.add_ids(Triple::new(h, r, t))
    }

    pub fn add_ids(&mut self, triple: Triple) -> bool {
        debug_assert!(triple.head.0 < self.entities.labels.len());
        debug_assert!(triple.tail.0 < self.entities.labels.len());
        debug_assert!(triple.relation.0 < self.relations.labels.len());
        if self.seen.insert(triple) {
            self.triples.push(triple);
            true
        } else {
            false
        }
    }

    pub fn num_triples(&self) -> usize {
        self.triples.len()
    }

    pub fn build(self) -> Result<KnowledgeGraph> {
        if self.entities.labels.is_empty() {
            return Err(Error::invalid(
                "a knowledge graph needs at least one entity",
            ));
        }
        let mut adjacency = vec![Vec::new(); self.entities.labels.len()];
        for (i, t) in self.triples.iter().enumerate() {
            adjacency[t.head.0].push(i);
            if t.tail != t.head {
                adjacency[t.tail.0].push(i);
            }
        }
        Ok(KnowledgeGraph {
            entities: self.entities,
            relations: self.relations,
            triples: self.triples,
            adjacency,
        })
    }
}

/// Immutable triple store. Ids are dense and contiguous from zero.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KnowledgeGraph {
    entities: Symbols,
    relations: Symbols,
    triples: Vec<Triple>,
    /// Triple indices incident to each entity, in triple-list order.
    adjacency: Vec<Vec<usize>>,
}

impl KnowledgeGraph {
    /// Loads a `head<TAB>relation<TAB>tail` file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::load_with_symbols(path, None, None)
    }

    /// Loads a triple file, optionally pinning the id order with companion
    /// label files (one label per line). Labels listed there but absent from
    /// the triples become isolated entities / unused relations.
    pub fn load_with_symbols(
        path: impl AsRef<Path>,
        entities: Option<&Path>,
        relations: Option<&Path>,
    ) -> Result<Self> {
        let path = path.as_ref();
        let mut b = GraphBuilder::new();
        if let Some(p) = entities {
            for label in read_label_file(p)? {
                b.entity(&label);
            }
        }
        if let Some(p) = relations {
            for label in read_label_file(p)? {
                b.relation(&label);
            }
        }
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let line = line.trim_end_matches('\r');
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("expected 3 tab-separated fields, found {}", fields.len()),
                });
            }
            if fields.iter().any(|f| f.is_empty()) {
                return Err(Error::Parse {
                    line: i + 1,
                    message: "empty field".into(),
                });
            }
            b.add(fields[0], fields[1], fields[2]);
        }
        if b.num_triples() == 0 {
            return Err(Error::EmptyGraph(path.to_path_buf()));
        }
        b.build()
    }

    /// Builds a graph from label triples (used for self-contained dataset records).
    pub fn from_label_triples<'a, I>(triples: I) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a str, &'a str, &'a str)>,
    {
        let mut b = GraphBuilder::new();
        for (h, r, t) in triples {
            b.add(h, r, t);
        }
        b.build()
    }

    /// Writes the graph as TSV plus `entities.txt` / `relations.txt` companions
    /// next to it.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::new();
        for t in &self.triples {
            out.push_str(self.entity_label(t.head));
            out.push('\t');
            out.push_str(self.relation_label(t.relation));
            out.push('\t');
            out.push_str(self.entity_label(t.tail));
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))?;
        let dir = path.parent().unwrap_or(Path::new("."));
        let ents = self.entities.labels.join("\n") + "\n";
        let rels = self.relations.labels.join("\n") + "\n";
        let ep = dir.join("entities.txt");
        fs::write(&ep, ents).map_err(|e| Error::io(&ep, e))?;
        let rp = dir.join("relations.txt");
        fs::write(&rp, rels).map_err(|e| Error::io(&rp, e))?;
        Ok(())
    }

    pub fn num_entities(&self) -> usize {
        self.entities.labels.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.labels.len()
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn entity_label(&self, e: EntityId) -> &str {
        &self.entities.labels[e.0]
    }

    pub fn relation_label(&self, r: RelationId) -> &str {
        &self.relations.labels[r.0]
    }

    pub fn entity_id(&self, label: &str) -> Option<EntityId> {
        self.entities.get(label).map(EntityId)
    }

    pub fn relation_id(&self, label: &str) -> Option<RelationId> {
        self.relations.get(label).map(RelationId)
    }

    pub fn entities(&self) -> impl Iterator<Item = EntityId> {
        (0..self.num_entities()).map(EntityId)
    }

    fn check_entity(&self, e: EntityId) -> Result<()> {
        if e.0 < self.num_entities() {
            Ok(())
        } else {
            Err(Error::UnknownEntity(e.0))
        }
    }

    /// Indices into [`triples`](Self::triples) of every triple incident to `e`.
    pub fn incident(&self, e: EntityId) -> Result<&[usize]> {
        self.check_entity(e)?;
        Ok(&self.adjacency[e.0])
    }

    /// Every triple with `e` as head or tail, in triple-list order. A self-loop
    /// is listed once.
    pub fn neighborhood(&self, e: EntityId) -> Result<Vec<Triple>> {
        Ok(self.incident(e)?.iter().map(|&i| self.triples[i]).collect())
    }

    /// Distinct relations on triples incident to `e`.
    pub fn outgoing_relations(&self, e: EntityId) -> Result<BTreeSet<RelationId>> {
        Ok(self
            .incident(e)?
            .iter()
            .map(|&i| self.triples[i].relation)
            .collect())
    }

    pub fn degree(&self, e: EntityId) -> usize {
        self.adjacency.get(e.0).map_or(0, Vec::len)
    }

    /// Entities sorted by decreasing degree (ties by id), keeping the top
    /// `quantile` fraction and skipping isolated ones.
    pub fn top_degree_entities(&self, quantile: f64) -> Vec<EntityId> {
        let mut ents: Vec<EntityId> = self.entities().filter(|&e| self.degree(e) > 0).collect();
        ents.sort_by(|a, b| self.degree(*b).cmp(&self.degree(*a)).then(a.cmp(b)));
        let keep = ((ents.len() as f64) * quantile.clamp(0.0, 1.0)).ceil() as usize;
        ents.truncate(keep.max(1).min(ents.len()));
        ents
    }
}

fn read_label_file(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(|l| l.trim_end_matches('\r'))
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}
