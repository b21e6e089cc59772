//! Hit-rate evaluation by replaying held-out next items against the index.

use std::collections::HashSet;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{eval_requests, EvalRequest, UserTrace};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::retrieval::{merge_truncate, DepthRule, RetrievalIndex, Scored};

pub const DEFAULT_CUTOFFS: [usize; 4] = [50, 100, 500, 1000];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub cutoffs: Vec<usize>,
    pub depth: DepthRule,
    /// Drop items already in the request history from the results.
    pub filter_history: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            cutoffs: DEFAULT_CUTOFFS.to_vec(),
            depth: DepthRule::Oversample,
            filter_history: false,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cutoffs.is_empty() || self.cutoffs.contains(&0) {
            return Err(Error::config("cutoffs must be a nonempty list of positive counts"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HitRate {
    pub k: usize,
    pub hits: usize,
    pub rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub requests: usize,
    pub skipped: usize,
    pub depth: DepthRule,
    pub filter_history: bool,
    pub hit_rates: Vec<HitRate>,
}

impl EvalReport {
    pub fn rate(&self, k: usize) -> Option<f64> {
        self.hit_rates.iter().find(|h| h.k == k).map(|h| h.rate)
    }

    /// True when the hit rate never drops as the cutoff grows.
    pub fn is_monotone(&self) -> bool {
        let mut rows = self.hit_rates.clone();
        rows.sort_by_key(|h| h.k);
        rows.windows(2).all(|w| w[0].rate <= w[1].rate)
    }

    /// Aligned text table with one column per cutoff.
    pub fn table(&self, label: &str) -> String {
        let mut out = String::new();
        let _ = write!(out, "{:<16}", "model");
        for h in &self.hit_rates {
            let _ = write!(out, "{:>10}", format!("HR@{}", h.k));
        }
        let _ = write!(out, "\n{label:<16}");
        for h in &self.hit_rates {
            let _ = write!(out, "{:>10.4}", h.rate);
        }
        out.push('\n');
        out
    }
}

/// Merged retrieval lists for every cutoff of one request, sharing a single
/// scan per interest at the deepest needed depth.
pub fn retrieve_at_cutoffs(
    index: &RetrievalIndex,
    interests: &crate::model::InterestSet<f32>,
    cutoffs: &[usize],
    depth: DepthRule,
    exclude: &HashSet<usize>,
) -> Result<Vec<Vec<Scored>>> {
    let k = interests.len();
    let deepest = cutoffs.iter().map(|&c| depth.k_each(c, k)).max().unwrap_or(1);
    let lists: Vec<Vec<Scored>> = index
        .top_k_per_interest(interests, (deepest + exclude.len()).min(index.len()))?
        .into_iter()
        .map(|l| l.into_iter().filter(|s| !exclude.contains(&s.id)).collect())
        .collect();
    Ok(cutoffs
        .iter()
        .map(|&c| {
            let each = depth.k_each(c, k);
            let cut: Vec<Vec<Scored>> = lists.iter().map(|l| l[..each.min(l.len())].to_vec()).collect();
            merge_truncate(&cut, c)
        })
        .collect())
}

/// Fraction of requests whose held-out item is retrieved, at every cutoff.
pub fn hit_rate(
    model: &Model<f32>,
    index: &RetrievalIndex,
    requests: &[EvalRequest<'_>],
    cfg: &EvalConfig,
    config_hash: &str,
) -> Result<EvalReport> {
    cfg.validate()?;
    if requests.is_empty() {
        return Err(Error::data("no evaluation requests"));
    }
    let hits_per_request = requests
        .par_iter()
        .map(|req| -> Result<Vec<bool>> {
            let interests = model.interests(req.history)?;
            let exclude: HashSet<usize> = if cfg.filter_history {
                req.history.iter().map(|r| r.item_id).collect()
            } else {
                HashSet::new()
            };
            let lists = retrieve_at_cutoffs(index, &interests, &cfg.cutoffs, cfg.depth, &exclude)?;
            Ok(lists.iter().map(|l| l.iter().any(|s| s.id == req.held_out)).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    let hit_rates = cfg
        .cutoffs
        .iter()
        .enumerate()
        .map(|(c, &k)| {
            let hits = hits_per_request.iter().filter(|h| h[c]).count();
            HitRate {
                k,
                hits,
                rate: hits as f64 / requests.len() as f64,
            }
        })
        .collect();
    Ok(EvalReport {
        config_hash: config_hash.to_string(),
        requests: requests.len(),
        skipped: 0,
        depth: cfg.depth,
        filter_history: cfg.filter_history,
        hit_rates,
    })
}

/// Builds the index from `model`, replays the held-out last item of every
/// trace and reports hit rates.
pub fn evaluate(
    model: &Model<f32>,
    traces: &[UserTrace],
    cfg: &EvalConfig,
    config_hash: &str,
) -> Result<EvalReport> {
    let (requests, skipped) = eval_requests(traces, model.config().max_seq_len);
    if skipped > 0 {
        log::warn!("{skipped} evaluation traces are too short and were skipped");
    }
    let index = RetrievalIndex::new(model.item_matrix()?)?;
    let mut report = hit_rate(model, &index, &requests, cfg, config_hash)?;
    report.skipped = skipped;
    Ok(report)
}
