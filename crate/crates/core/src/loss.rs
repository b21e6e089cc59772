//! In-batch softmax over max-over-interests scores with popularity
//! correction and label smoothing, plus the streaming popularity estimate.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    /// Mass moved from the positive onto the negatives, in `[0, 1)`.
    pub smoothing: f64,
    /// Subtract `log q(item)` from every logit column.
    pub logq: bool,
    pub estimator_decay: f64,
    pub estimator_floor: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            smoothing: 0.1,
            logq: true,
            estimator_decay: 0.9999,
            estimator_floor: 1e-6,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.smoothing) {
            return Err(Error::config(format!(
                "smoothing must be in [0, 1), got {}",
                self.smoothing
            )));
        }
        if !(self.estimator_decay > 0.0 && self.estimator_decay <= 1.0) {
            return Err(Error::config("estimator decay must be in (0, 1]"));
        }
        if !(self.estimator_floor > 0.0 && self.estimator_floor <= 1.0) {
            return Err(Error::config("estimator floor must be in (0, 1]"));
        }
        Ok(())
    }
}

/// Soft targets and softmax support for a batch whose row `i` has positive `items[i]`.
///
/// Columns holding the same item as row `i`'s positive are excluded from row
/// `i`. The positive gets `1-α`; the remaining `α` is split evenly over the
/// allowed negatives, or returned to the positive when there are none.
pub fn smoothed_targets(items: &[usize], alpha: f64) -> Result<(Vec<f64>, Vec<bool>)> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::config(format!("smoothing must be in [0, 1), got {alpha}")));
    }
    let b = items.len();
    let mut weights = vec![0.0; b * b];
    let mut allowed = vec![false; b * b];
    for i in 0..b {
        let row = i * b;
        for j in 0..b {
            allowed[row + j] = j == i || items[j] != items[i];
        }
        let negatives = allowed[row..row + b].iter().filter(|&&a| a).count() - 1;
        if negatives == 0 || alpha == 0.0 {
            weights[row + i] = 1.0;
            continue;
        }
        let share = alpha / negatives as f64;
        for j in 0..b {
            if j != i && allowed[row + j] {
                weights[row + j] = share;
            }
        }
        weights[row + i] = 1.0 - alpha;
    }
    Ok((weights, allowed))
}

/// Logits `[B×B]`: entry `(i, j)` is `max_r ⟨x_j, u_{i,r}⟩` for stacked
/// interests `[(B·k)×d]` and candidates `[B×d]`.
pub fn in_batch_logits<T: Scalar>(tape: &mut Tape<'_, T>, interests: Var, items: Var, k: usize) -> Result<Var> {
    let xt = tape.transpose(items);
    let s = tape.matmul(interests, xt)?;
    tape.group_max(s, k)
}

/// Subtracts `log q_j` from column `j`.
pub fn logq_correct<T: Scalar>(tape: &mut Tape<'_, T>, logits: Var, q: &[f64]) -> Result<Var> {
    if let Some(bad) = q.iter().find(|&&p| !(p > 0.0 && p <= 1.0)) {
        return Err(Error::contract(format!("sampling probability {bad} outside (0, 1]")));
    }
    let shift = tape.constant(vec![q.len()], q.iter().map(|&p| T::of(-p.ln())).collect())?;
    tape.add_row(logits, shift)
}

pub struct BatchLoss {
    pub loss: Var,
    /// Corrected logits `[B×B]`.
    pub logits: Var,
    pub allowed: Vec<bool>,
}

/// The training objective for one batch: mean over rows of the smoothed
/// cross-entropy of popularity-corrected in-batch logits.
pub fn batch_loss<T: Scalar>(
    tape: &mut Tape<'_, T>,
    interests: Var,
    candidates: Var,
    k: usize,
    items: &[usize],
    q: Option<&[f64]>,
    alpha: f64,
) -> Result<BatchLoss> {
    let b = items.len();
    if b < 2 {
        return Err(Error::contract(format!("in-batch softmax needs at least 2 rows, got {b}")));
    }
    if tape.value(candidates).rows() != b || tape.value(interests).rows() != b * k {
        return Err(Error::Shape {
            op: "batch_loss",
            lhs: tape.value(interests).shape().to_vec(),
            rhs: tape.value(candidates).shape().to_vec(),
        });
    }
    let mut logits = in_batch_logits(tape, interests, candidates, k)?;
    if let Some(q) = q {
        if q.len() != b {
            return Err(Error::contract(format!("{} probabilities for {b} columns", q.len())));
        }
        logits = logq_correct(tape, logits, q)?;
    }
    let (weights, allowed) = smoothed_targets(items, alpha)?;
    let loss = tape.softmax_cross_entropy(logits, &weights, Some(&allowed))?;
    Ok(BatchLoss {
        loss,
        logits,
        allowed,
    })
}

/// Fraction of rows whose positive holds the largest allowed logit (lowest
/// column wins ties).
pub fn in_batch_accuracy<T: Scalar>(logits: &Tensor<T>, allowed: &[bool]) -> f64 {
    let (b, c) = logits.dims2();
    let hits = (0..b)
        .filter(|&i| {
            let row = logits.row(i);
            let mut best = 0;
            let mut first = true;
            for j in 0..c {
                if allowed[i * c + j] && (first || row[j] > row[best]) {
                    best = j;
                    first = false;
                }
            }
            best == i
        })
        .count();
    hits as f64 / b as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
struct Decayed {
    mass: f64,
    /// Step at which `mass` was last brought up to date.
    step: u64,
}

/// Global item popularity as exponentially decayed occurrence counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrequencyEstimator {
    decay: f64,
    floor: f64,
    step: u64,
    total: f64,
    counts: BTreeMap<usize, Decayed>,
}

impl FrequencyEstimator {
    pub fn new(decay: f64, floor: f64) -> Result<Self> {
        if !(decay > 0.0 && decay <= 1.0) {
            return Err(Error::contract(format!("decay {decay} outside (0, 1]")));
        }
        if !(floor > 0.0 && floor <= 1.0) {
            return Err(Error::contract(format!("floor {floor} outside (0, 1]")));
        }
        Ok(FrequencyEstimator {
            decay,
            floor,
            step: 0,
            total: 0.0,
            counts: BTreeMap::new(),
        })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Advances one step, decaying all mass, then adds one per occurrence.
    pub fn update(&mut self, items: &[usize]) {
        self.step += 1;
        self.total = self.total * self.decay + items.len() as f64;
        for &x in items {
            let step = self.step;
            let decay = self.decay;
            let e = self.counts.entry(x).or_insert(Decayed { mass: 0.0, step });
            e.mass = e.mass * decay.powi((step - e.step) as i32) + 1.0;
            e.step = step;
        }
    }

    /// Decayed share of `item` before flooring.
    pub fn raw_estimate(&self, item: usize) -> f64 {
        match self.counts.get(&item) {
            Some(e) if self.total > 0.0 => {
                e.mass * self.decay.powi((self.step - e.step) as i32) / self.total
            }
            _ => 0.0,
        }
    }

    pub fn estimate(&self, item: usize) -> f64 {
        self.raw_estimate(item).clamp(self.floor, 1.0)
    }

    pub fn observed(&self) -> impl Iterator<Item = usize> + '_ {
        self.counts.keys().copied()
    }
}
