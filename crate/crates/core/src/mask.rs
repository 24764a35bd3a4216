//! Constrained self-attention mask over `question ++ serialized subgraph`.
//!
//! Visibility rules, with `n_q` question tokens first:
//! - question tokens see every question token;
//! - graph tokens see every question token;
//! - graph tokens see themselves and the graph tokens they share a triple with;
//! - question tokens never see graph tokens.
//!
//! Blocked cells hold [`NEG_INF`], a large finite negative value, so that
//! softmax after max-shifting stays NaN-free and blocked weights underflow to 0.

use std::fmt::Write as _;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::serialize::SerializedSubgraph;

pub const NEG_INF: f64 = -1.0e9;

/// How graph tokens attend to each other.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphAttention {
    /// Only within shared triples (plus self).
    #[default]
    Structural,
    /// Ablation: the whole graph block is visible.
    Full,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask {
    values: Array2<f64>,
    n_q: usize,
}

impl AttentionMask {
    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn question_len(&self) -> usize {
        self.n_q
    }

    pub fn allows(&self, i: usize, j: usize) -> bool {
        self.values[[i, j]] == 0.0
    }

    /// Extends the mask to `total` positions with padding tokens that only
    /// see themselves and are invisible to every other position.
    pub fn padded(&self, total: usize) -> AttentionMask {
        let l = self.len();
        assert!(total >= l, "cannot pad to a shorter length");
        let mut values = Array2::from_elem((total, total), NEG_INF);
        values.slice_mut(ndarray::s![..l, ..l]).assign(&self.values);
        for p in l..total {
            values[[p, p]] = 0.0;
        }
        AttentionMask {
            values,
            n_q: self.n_q,
        }
    }

    /// `l` lines of `l` characters: `1` where attention is allowed, `.` where blocked.
    pub fn debug_dump(&self) -> String {
        let mut out = String::new();
        for row in self.values.rows() {
            for &v in row {
                out.push(if v == 0.0 { '1' } else { '.' });
            }
            let _ = writeln!(out);
        }
        out
    }
}

pub fn build_mask(n_q: usize, serialized: &SerializedSubgraph) -> Result<AttentionMask> {
    build_mask_with(n_q, serialized, GraphAttention::Structural)
}

pub fn build_mask_with(
    n_q: usize,
    serialized: &SerializedSubgraph,
    graph: GraphAttention,
) -> Result<AttentionMask> {
    if n_q == 0 {
        return Err(Error::invalid(
            "attention mask needs at least one question token",
        ));
    }
    let n_g = serialized.len();
    let l = n_q + n_g;
    let mut values = Array2::from_elem((l, l), NEG_INF);
    // question rows see the question; graph rows see the question
    values.slice_mut(ndarray::s![.., ..n_q]).fill(0.0);
    match graph {
        GraphAttention::Structural => {
            for i in 0..n_g {
                values[[n_q + i, n_q + i]] = 0.0;
            }
            for &(i, j) in serialized.adjacency() {
                if i >= n_g || j >= n_g {
                    return Err(Error::InvalidSubgraph(format!(
                        "adjacency pair ({i}, {j}) outside {n_g} graph tokens"
                    )));
                }
                values[[n_q + i, n_q + j]] = 0.0;
                values[[n_q + j, n_q + i]] = 0.0;
            }
        }
        GraphAttention::Full => {
            values.slice_mut(ndarray::s![n_q.., n_q..]).fill(0.0);
        }
    }
    Ok(AttentionMask { values, n_q })
}
