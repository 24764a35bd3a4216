use std::collections::{HashMap, HashSet, VecDeque};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::QaSample;
use crate::error::{Error, Result};
use crate::kg::{EntityId, GraphBuilder, KnowledgeGraph};
use crate::serialize::Subgraph;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

/// One JSON-lines record. Everything is stored by label so a record is
/// self-contained.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QaRecord {
    pub id: usize,
    pub question: String,
    pub topics: Vec<String>,
    pub triples: Vec<[String; 3]>,
    pub answers: Vec<String>,
    /// `topic, r1, e1, ...`; empty when unknown.
    #[serde(default)]
    pub path: Vec<String>,
    pub split: Split,
}

impl QaRecord {
    pub fn from_sample(g: &KnowledgeGraph, s: &QaSample, id: usize, split: Split) -> Self {
        QaRecord {
            id,
            question: s.question.clone(),
            topics: s
                .topics
                .iter()
                .map(|&e| g.entity_label(e).to_string())
                .collect(),
            triples: s
                .subgraph
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
            answers: s
                .answers
                .iter()
                .map(|&e| g.entity_label(e).to_string())
                .collect(),
            path: s.path.labels(g),
            split,
        }
    }

    pub fn hops(&self) -> usize {
        self.path.len().saturating_sub(1) / 2
    }

    /// Builds the record's own small graph (topics interned first).
    pub fn to_graph_sample(&self) -> Result<GraphSample> {
        if self.topics.is_empty() {
            return Err(Error::InvalidSubgraph(format!(
                "record {} has no topic",
                self.id
            )));
        }
        let mut b = GraphBuilder::new();
        let topics: Vec<EntityId> = self.topics.iter().map(|t| b.entity(t)).collect();
        for [h, r, t] in &self.triples {
            b.add(h, r, t);
        }
        let graph = b.build()?;
        let answers = self
            .answers
            .iter()
            .filter_map(|a| graph.entity_id(a))
            .collect();
        let subgraph = Subgraph::new(topics, graph.triples().to_vec());
        Ok(GraphSample {
            graph,
            subgraph,
            answers,
            gold_total: self.answers.len(),
        })
    }
}

/// A record resolved into id space over its own local graph.
#[derive(Clone, Debug)]
pub struct GraphSample {
    pub graph: KnowledgeGraph,
    pub subgraph: Subgraph,
    /// Gold answers that occur in the subgraph.
    pub answers: HashSet<EntityId>,
    /// Number of gold answers including those missing from the subgraph.
    pub gold_total: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub records: Vec<QaRecord>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &QaRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn with_hops(&self, hops: usize) -> Dataset {
        Dataset {
            records: self
                .records
                .iter()
                .filter(|r| r.hops() == hops)
                .cloned()
                .collect(),
        }
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_records(path, &self.records)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Dataset {
            records: read_records(path)?,
        })
    }
}

pub fn write_records(path: impl AsRef<Path>, records: &[QaRecord]) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<QaRecord>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: QaRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Replaces templated questions with externally generated ones. The override
/// file holds `id<TAB>question` lines. Returns how many were replaced.
pub fn apply_question_overrides(records: &mut [QaRecord], path: impl AsRef<Path>) -> Result<usize> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let index: HashMap<usize, usize> = records.iter().enumerate().map(|(i, r)| (r.id, i)).collect();
    let mut n = 0;
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, question) = line.split_once('\t').ok_or_else(|| Error::Parse {
            line: lineno + 1,
            message: "expected id<TAB>question".into(),
        })?;
        let id: usize = id.trim().parse().map_err(|_| Error::Parse {
            line: lineno + 1,
            message: format!("bad sample id {id:?}"),
        })?;
        let &i = index.get(&id).ok_or_else(|| Error::Parse {
            line: lineno + 1,
            message: format!("no sample with id {id}"),
        })?;
        if question.trim().is_empty() {
            return Err(Error::Parse {
                line: lineno + 1,
                message: "empty question".into(),
            });
        }
        records[i].question = question.to_string();
        n += 1;
    }
    Ok(n)
}

/// Checks the sample invariants: answers non-empty, path triples inside the
/// subgraph, topics inside the subgraph, and every answer reachable from a
/// topic within the path's hop count.
pub fn validate_record(r: &QaRecord) -> Result<()> {
    let bad = |m: String| Err(Error::InvalidSubgraph(format!("record {}: {m}", r.id)));
    if r.answers.is_empty() {
        return bad("no answers".into());
    }
    if r.question.trim().is_empty() {
        return bad("empty question".into());
    }
    let mut adj: HashMap<&str, Vec<&str>> = HashMap::new();
    let mut edges: HashSet<(&str, &str, &str)> = HashSet::new();
    for [h, rel, t] in &r.triples {
        adj.entry(h).or_default().push(t);
        adj.entry(t).or_default().push(h);
        edges.insert((h, rel, t));
    }
    for t in &r.topics {
        if !r.triples.is_empty() && !adj.contains_key(t.as_str()) {
            return bad(format!("topic {t:?} not in subgraph"));
        }
    }
    if !r.path.is_empty() {
        if r.path.len().is_multiple_of(2) {
            return bad("path has even length".into());
        }
        for w in r.path.windows(3).step_by(2) {
            let (a, rel, b) = (w[0].as_str(), w[1].as_str(), w[2].as_str());
            if !edges.contains(&(a, rel, b)) && !edges.contains(&(b, rel, a)) {
                return bad(format!(
                    "path triple ({a}, {rel}, {b}) missing from subgraph"
                ));
            }
        }
        // shortest-path reachability of each answer
        let mut dist: HashMap<&str, usize> = HashMap::new();
        let mut queue = VecDeque::new();
        for t in &r.topics {
            dist.insert(t, 0);
            queue.push_back(t.as_str());
        }
        while let Some(e) = queue.pop_front() {
            let d = dist[e];
            for &n in adj.get(e).map(Vec::as_slice).unwrap_or_default() {
                if !dist.contains_key(n) {
                    dist.insert(n, d + 1);
                    queue.push_back(n);
                }
            }
        }
        for a in &r.answers {
            match dist.get(a.as_str()) {
                Some(&d) if d <= r.hops() => {}
                _ => return bad(format!("answer {a:?} not within {} hops", r.hops())),
            }
        }
    }
    Ok(())
}
