#![allow(dead_code)]

use graphreason::encoder::{ModelConfig, ModelParameters};
use graphreason::kg::GraphBuilder;
use graphreason::sequencer::{build_input, InputSequence};
use graphreason::{serialize_subgraph, GraphAttention, KnowledgeGraph, Subgraph, Vocabulary};

pub fn tiny_graph() -> KnowledgeGraph {
    let mut b = GraphBuilder::new();
    b.add("A", "r", "B");
    b.add("B", "s", "C");
    b.add("A", "s", "D");
    b.build().unwrap()
}

pub fn vocab() -> Vocabulary {
    Vocabulary::build([
        "what is the s of the r of a ?",
        "who is the r of a ?",
        "a b c d e f r s t",
    ])
}

pub fn config(layers: usize, d: usize, heads: usize, vocab: &Vocabulary) -> ModelConfig {
    ModelConfig {
        layers,
        d_model: d,
        heads,
        d_ff: 2 * d,
        max_len: 32,
        vocab_size: vocab.len(),
        adapter_width: 4,
        dropout: 0.0,
        seed: 11,
        ..ModelConfig::default()
    }
}

pub fn model(layers: usize, d: usize, heads: usize, vocab: &Vocabulary) -> ModelParameters {
    ModelParameters::new(config(layers, d, heads, vocab)).unwrap()
}

pub fn input(
    vocab: &Vocabulary,
    question: &str,
    g: &KnowledgeGraph,
    sg: &Subgraph,
) -> InputSequence {
    let s = serialize_subgraph(g, sg).unwrap();
    build_input(vocab, question, &s, 32, GraphAttention::Structural).unwrap()
}

pub fn tiny_input(vocab: &Vocabulary) -> InputSequence {
    let g = tiny_graph();
    let sg = Subgraph::new(vec![g.entity_id("A").unwrap()], g.triples().to_vec());
    input(vocab, "what is the s of the r of A?", &g, &sg)
}
