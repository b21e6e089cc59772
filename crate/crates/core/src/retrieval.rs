//! Exact inner-product retrieval: a full scan per interest, then a merge that
//! keeps each item's best score.

use std::cmp::Ordering;
use std::collections::HashMap;

use crate::autograd::kernels::dot;
use crate::error::{Error, Result};
use crate::model::InterestSet;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scored {
    pub id: usize,
    pub score: f32,
}

/// Higher score first; equal scores go to the lower id.
pub fn rank_order(a: &Scored, b: &Scored) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then(a.id.cmp(&b.id))
}

/// Frozen candidate embeddings with their item ids.
#[derive(Clone, Debug)]
pub struct RetrievalIndex {
    items: Tensor<f32>,
    ids: Vec<usize>,
}

impl RetrievalIndex {
    /// Row `i` of `items` is item `i`.
    pub fn new(items: Tensor<f32>) -> Result<Self> {
        let ids = (0..items.rows()).collect();
        Self::with_ids(items, ids)
    }

    pub fn with_ids(items: Tensor<f32>, ids: Vec<usize>) -> Result<Self> {
        if items.rows() != ids.len() {
            return Err(Error::Shape {
                op: "retrieval index",
                lhs: items.shape().to_vec(),
                rhs: vec![ids.len()],
            });
        }
        if !items.is_finite() {
            return Err(Error::Numeric("retrieval index holds non-finite embeddings".into()));
        }
        let mut sorted = ids.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::data("retrieval index ids must be unique"));
        }
        Ok(RetrievalIndex { items, ids })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.items.cols()
    }

    /// The exact `k_each` best items for one query vector.
    pub fn top_k(&self, query: &[f32], k_each: usize) -> Result<Vec<Scored>> {
        if k_each == 0 {
            return Err(Error::contract("k_each must be at least 1"));
        }
        if query.len() != self.dim() {
            return Err(Error::Shape {
                op: "top_k",
                lhs: vec![query.len()],
                rhs: self.items.shape().to_vec(),
            });
        }
        let k = if k_each > self.len() {
            log::warn!("k_each {k_each} clamped to index size {}", self.len());
            self.len()
        } else {
            k_each
        };
        let mut all: Vec<Scored> = self
            .ids
            .iter()
            .enumerate()
            .map(|(r, &id)| Scored {
                id,
                score: dot(query, self.items.row(r)),
            })
            .collect();
        if k < all.len() {
            all.select_nth_unstable_by(k - 1, rank_order);
            all.truncate(k);
        }
        all.sort_unstable_by(rank_order);
        Ok(all)
    }

    /// One ranked list per interest.
    pub fn top_k_per_interest(&self, interests: &InterestSet<f32>, k_each: usize) -> Result<Vec<Vec<Scored>>> {
        (0..interests.len())
            .map(|j| self.top_k(interests.interest(j), k_each))
            .collect()
    }
}

/// Union of the per-interest lists, each id at its best score, ranked and cut to `k`.
pub fn merge_truncate(lists: &[Vec<Scored>], k: usize) -> Vec<Scored> {
    let mut best: HashMap<usize, f32> = HashMap::new();
    for s in lists.iter().flatten() {
        best.entry(s.id)
            .and_modify(|v| {
                if s.score > *v {
                    *v = s.score
                }
            })
            .or_insert(s.score);
    }
    let mut merged: Vec<Scored> = best.into_iter().map(|(id, score)| Scored { id, score }).collect();
    merged.sort_unstable_by(rank_order);
    merged.truncate(k);
    merged
}

/// Per-interest depth before merging.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthRule {
    /// `ceil(1.5·K/k)` items per interest.
    Oversample,
    /// `K` items per interest.
    Full,
}

impl DepthRule {
    pub fn k_each(self, k_final: usize, interests: usize) -> usize {
        match self {
            DepthRule::Oversample => (3 * k_final).div_ceil(2 * interests.max(1)).max(1),
            DepthRule::Full => k_final,
        }
    }
}

/// Retrieve → merge → truncate for one interest set.
pub fn retrieve(index: &RetrievalIndex, interests: &InterestSet<f32>, k_final: usize, rule: DepthRule) -> Result<Vec<Scored>> {
    if k_final == 0 {
        return Err(Error::contract("K must be at least 1"));
    }
    let lists = index.top_k_per_interest(interests, rule.k_each(k_final, interests.len()))?;
    Ok(merge_truncate(&lists, k_final))
}
