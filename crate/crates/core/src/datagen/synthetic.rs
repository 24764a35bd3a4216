//! Random typed knowledge graphs for experiments and tests.
//!
//! Entities are split into types; every relation has a fixed domain and range
//! type, and each entity of the domain type gets an outgoing edge for the
//! relation with probability `edge_prob`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::{GraphBuilder, KnowledgeGraph};

const RELATION_WORDS: [&str; 24] = [
    "parent",
    "spouse",
    "employer",
    "capital",
    "founder",
    "member",
    "location",
    "author",
    "director",
    "genre",
    "language",
    "sibling",
    "teammate",
    "neighbor",
    "partner",
    "mentor",
    "rival",
    "owner",
    "producer",
    "successor",
    "student",
    "sponsor",
    "publisher",
    "designer",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticKgConfig {
    pub entities: usize,
    pub relations: usize,
    pub types: usize,
    pub edge_prob: f64,
    pub seed: u64,
}

impl Default for SyntheticKgConfig {
    fn default() -> Self {
        Self {
            entities: 240,
            relations: 16,
            types: 4,
            edge_prob: 0.6,
            seed: 0,
        }
    }
}

pub fn relation_label(i: usize) -> String {
    match RELATION_WORDS.get(i) {
        Some(w) => (*w).to_string(),
        None => format!("relation {i}"),
    }
}

pub fn synthetic_graph(cfg: &SyntheticKgConfig) -> Result<KnowledgeGraph> {
    if cfg.entities < 2 || cfg.relations == 0 || cfg.types == 0 || cfg.types > cfg.entities {
        return Err(Error::invalid(
            "synthetic graph needs >= 2 entities, >= 1 relation and type",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut b = GraphBuilder::new();
    let labels: Vec<String> = (0..cfg.entities).map(|i| format!("e{i}")).collect();
    for l in &labels {
        b.entity(l);
    }
    let type_of = |e: usize| e % cfg.types;
    let members: Vec<Vec<usize>> = (0..cfg.types)
        .map(|t| (0..cfg.entities).filter(|&e| type_of(e) == t).collect())
        .collect();
    let signatures: Vec<(usize, usize)> = (0..cfg.relations)
        .map(|_| {
            (
                rng.random_range(0..cfg.types),
                rng.random_range(0..cfg.types),
            )
        })
        .collect();
    for (ri, &(dom, ran)) in signatures.iter().enumerate() {
        let rel = relation_label(ri);
        for &h in &members[dom] {
            if rng.random::<f64>() >= cfg.edge_prob {
                continue;
            }
            let pool = &members[ran];
            let t = pool[rng.random_range(0..pool.len())];
            if t != h {
                b.add(&labels[h], &rel, &labels[t]);
            }
        }
    }
    b.build()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_sized() {
        let cfg = SyntheticKgConfig::default();
        let a = synthetic_graph(&cfg).unwrap();
        let b = synthetic_graph(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.num_entities(), 240);
        assert!(a.num_relations() >= 15);
        assert!(a.triples().len() > 200);
    }
}
