//! Word-level tokenizer, vocabulary, and assembly of the joint
//! `question ++ graph` input with its attention mask.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mask::{build_mask_with, AttentionMask, GraphAttention};
use crate::serialize::SerializedSubgraph;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
const PAD_TOKEN: &str = "[PAD]";
const UNK_TOKEN: &str = "[UNK]";

/// Lowercases and splits on whitespace; every other non-alphanumeric
/// character becomes a token of its own.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            cur.extend(ch.to_lowercase());
        } else {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            if !ch.is_whitespace() {
                out.extend(std::iter::once(ch.to_lowercase().collect::<String>()));
            }
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        let mut v = Vocabulary {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        v.insert(PAD_TOKEN);
        v.insert(UNK_TOKEN);
        v
    }
}

impl Vocabulary {
    /// Builds a vocabulary from every word in `texts`, in first-appearance order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut v = Self::default();
        for t in texts {
            for w in split_words(t) {
                v.insert(&w);
            }
        }
        v
    }

    fn insert(&mut self, tok: &str) -> usize {
        if let Some(&i) = self.index.get(tok) {
            return i;
        }
        let i = self.tokens.len();
        self.tokens.push(tok.to_string());
        self.index.insert(tok.to_string(), i);
        i
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        split_words(text)
            .iter()
            .map(|w| self.id(w).unwrap_or(UNK))
            .collect()
    }

    /// Subword ids for a node label; an empty label maps to `[UNK]`.
    pub fn tokenize_label(&self, label: &str) -> Vec<usize> {
        let ids = self.tokenize(label);
        if ids.is_empty() {
            vec![UNK]
        } else {
            ids
        }
    }

    fn file_contents(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    /// Hex SHA-256 of the vocabulary file contents.
    pub fn hash(&self) -> String {
        hex_digest(self.file_contents().as_bytes())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.file_contents()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut v = Vocabulary {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for (i, line) in text.lines().enumerate() {
            if v.index.contains_key(line) {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("duplicate token {line:?}"),
                });
            }
            v.insert(line);
        }
        if v.id(PAD_TOKEN) != Some(PAD) || v.id(UNK_TOKEN) != Some(UNK) {
            return Err(Error::Parse {
                line: 1,
                message: "vocabulary must start with [PAD] and [UNK]".into(),
            });
        }
        Ok(v)
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// A fully assembled model input. Embeddings are computed from it by the
/// encoder; this type only holds ids, positions and the mask.
#[derive(Clone, Debug)]
pub struct InputSequence {
    pub question_ids: Vec<usize>,
    pub graph: SerializedSubgraph,
    /// Subword ids of every graph node label (padding nodes hold `[PAD]`).
    pub node_ids: Vec<Vec<usize>>,
    /// Position-table index of every token, `0..l` unless overridden.
    pub positions: Vec<usize>,
    pub mask: AttentionMask,
}

impl InputSequence {
    pub fn question_len(&self) -> usize {
        self.question_ids.len()
    }

    pub fn len(&self) -> usize {
        self.question_ids.len() + self.node_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Absolute positions of entity tokens.
    pub fn entity_positions(&self) -> Vec<usize> {
        let n_q = self.question_len();
        self.graph
            .entity_positions()
            .into_iter()
            .map(|p| p + n_q)
            .collect()
    }

    /// Absolute positions of relation tokens.
    pub fn relation_positions(&self) -> Vec<usize> {
        let n_q = self.question_len();
        self.graph
            .relation_positions()
            .into_iter()
            .map(|p| p + n_q)
            .collect()
    }

    /// Appends `[PAD]` tokens up to `total`. Padding is invisible to every
    /// other position and is never an entity or relation position.
    pub fn pad_to(&self, total: usize) -> InputSequence {
        let l = self.len();
        assert!(total >= l, "cannot pad to a shorter length");
        let mut out = self.clone();
        out.node_ids.extend((l..total).map(|_| vec![PAD]));
        out.positions.extend(l..total);
        out.mask = self.mask.padded(total);
        out
    }
}

/// Builds `question ++ graph`, truncating the graph segment to fit `max_len`.
pub fn build_input(
    vocab: &Vocabulary,
    question: &str,
    serialized: &SerializedSubgraph,
    max_len: usize,
    graph_attention: GraphAttention,
) -> Result<InputSequence> {
    let question_ids = vocab.tokenize(question);
    if question_ids.is_empty() {
        return Err(Error::invalid("question is empty"));
    }
    if serialized.is_empty() {
        return Err(Error::invalid("serialized subgraph is empty"));
    }
    let n_q = question_ids.len();
    if n_q + 1 > max_len {
        return Err(Error::invalid(format!(
            "question of {n_q} tokens leaves no room for the topic entity within {max_len}"
        )));
    }
    let graph = if n_q + serialized.len() > max_len {
        serialized.truncate(max_len - n_q)
    } else {
        serialized.clone()
    };
    let node_ids = graph
        .labels()
        .iter()
        .map(|l| vocab.tokenize_label(l))
        .collect();
    let mask = build_mask_with(n_q, &graph, graph_attention)?;
    let positions = (0..n_q + graph.len()).collect();
    Ok(InputSequence {
        question_ids,
        graph,
        node_ids,
        positions,
        mask,
    })
}
