//! Checks shared by the focused integration tests and the acceptance report.
//! Every oracle here is computed independently of the code under test.

#![allow(dead_code)]

use std::cmp::Ordering;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use seqformer::autograd::{check_gradient, check_param_gradients, Axis, GradCheckReport, Tape, Var};
use seqformer::compression::{CompressionLayout, CostModel, Window};
use seqformer::config::RunConfig;
use seqformer::data::Dataset;
use seqformer::embedding::{InteractionLabels, InteractionRecord};
use seqformer::eval::{evaluate, EvalReport};
use seqformer::loss::{batch_loss, smoothed_targets};
use seqformer::model::{InterestSet, Model, ModelConfig};
use seqformer::params::ParamStore;
use seqformer::retrieval::RetrievalIndex;
use seqformer::train::{batch_objective, run, StepMetrics};
use seqformer::transformer::{AttentionMask, MaskMode, PositionEncoding, Transformer, TransformerConfig};
use seqformer::Tensor;

/// Outcome of one acceptance criterion.
#[derive(Clone, Debug)]
pub struct Check {
    pub pass: bool,
    pub detail: String,
}

impl Check {
    pub fn new(pass: bool, detail: impl Into<String>) -> Self {
        Check {
            pass,
            detail: detail.into(),
        }
    }
}

pub fn random(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

// ---------------------------------------------------------------- gradients

pub const GRAD_H: f64 = 1e-3;
pub const GRAD_TOL: f64 = 1e-4;

/// Contracts any output to a scalar with fixed positive weights so every
/// output coordinate reaches the checked gradient and sums never cancel.
pub fn project(t: &mut Tape<'_, f64>, y: Var) -> Var {
    let n = t.value(y).numel();
    let shape = t.value(y).shape().to_vec();
    let w: Vec<f64> = (0..n).map(|i| 0.5 + (i * 7919 % 23) as f64 / 23.0).collect();
    let w = t.constant(shape, w).unwrap();
    let p = t.mul(y, w).unwrap();
    t.sum(p)
}

fn unary(h: f64, x: &Tensor<f64>, f: impl Fn(&mut Tape<'_, f64>, Var) -> Var) -> GradCheckReport {
    let store = ParamStore::new();
    check_gradient(
        &store,
        |t, x| {
            let y = f(t, x);
            Ok(project(t, y))
        },
        x,
        h,
    )
    .unwrap()
}

/// Every differentiable op on the shapes drawn from `seed`, checked at step `h`.
pub fn op_checks(seed: u64, h: f64) -> Vec<(&'static str, GradCheckReport)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = rng.gen_range(2..5);
    let c = rng.gen_range(2..5);
    let k = rng.gen_range(1..5);
    let heads = rng.gen_range(1..3);
    let x = random(&mut rng, vec![r, c]);
    let other = random(&mut rng, vec![r, c]);
    let right = random(&mut rng, vec![c, k]);
    let left = random(&mut rng, vec![k, r]);
    let bias = random(&mut rng, vec![c]);
    let wide = random(&mut rng, vec![r, 4 * heads]);
    let gain = random(&mut rng, vec![4 * heads]);
    let square = random(&mut rng, vec![r, r]);
    // Group members differ by at least 0.05 so no step crosses the max kink.
    let mut pairs = random(&mut rng, vec![2 * r, 3]);
    for g in 0..r {
        for col in 0..3 {
            let (a, b) = (pairs.data()[2 * g * 3 + col], pairs.data()[(2 * g + 1) * 3 + col]);
            if (a - b).abs() < 0.05 {
                pairs.data_mut()[(2 * g + 1) * 3 + col] = a + if b >= a { 0.05 } else { -0.05 };
            }
        }
    }
    let flags: Arc<[bool]> = (0..r * r).map(|i| i % r <= i / r).collect::<Vec<_>>().into();

    let leaf = |t: &mut Tape<'_, f64>, v: &Tensor<f64>| t.leaf(v.clone());
    let mut out = vec![
        ("matmul_left", unary(h, &x, |t, x| { let b = leaf(t, &right); t.matmul(x, b).unwrap() })),
        ("matmul_right", unary(h, &x, |t, x| { let a = leaf(t, &left); t.matmul(a, x).unwrap() })),
        ("transpose", unary(h, &x, |t, x| t.transpose(x))),
        ("add", unary(h, &x, |t, x| { let o = leaf(t, &other); t.add(x, o).unwrap() })),
        ("sub", unary(h, &x, |t, x| { let o = leaf(t, &other); t.sub(o, x).unwrap() })),
        ("mul", unary(h, &x, |t, x| { let o = leaf(t, &other); t.mul(x, o).unwrap() })),
        ("scale", unary(h, &x, |t, x| t.scale(x, -1.7))),
        ("add_scalar", unary(h, &x, |t, x| t.add_scalar(x, 0.4))),
        ("add_row", unary(h, &x, |t, x| { let b = leaf(t, &bias); t.add_row(x, b).unwrap() })),
        ("add_row_bias", unary(h, &bias, |t, b| { let x = leaf(t, &other); t.add_row(x, b).unwrap() })),
        ("silu", unary(h, &x, |t, x| t.silu(x))),
        ("sqrt", unary(h, &x, |t, x| { let e = t.exp(x); t.sqrt(e) })),
        ("log", unary(h, &x, |t, x| { let e = t.exp(x); let s = t.add_scalar(e, 0.5); t.log(s) })),
        ("exp", unary(h, &x, |t, x| t.exp(x))),
        ("concat_cols", unary(h, &x, |t, x| { let o = leaf(t, &other); t.concat_cols(&[x, o]).unwrap() })),
        ("concat_rows", unary(h, &x, |t, x| { let o = leaf(t, &other); t.concat_rows(&[o, x]).unwrap() })),
        ("concat", unary(h, &bias, |t, b| { let o = leaf(t, &gain); t.concat(&[b, o]).unwrap() })),
        ("slice_rows", unary(h, &x, |t, x| t.slice_rows(x, 1, r - 1).unwrap())),
        ("slice_cols", unary(h, &x, |t, x| t.slice_cols(x, 1, c - 1).unwrap())),
        ("reshape", unary(h, &x, |t, x| t.reshape(x, vec![r * c]).unwrap())),
        ("mean_rows", unary(h, &x, |t, x| t.mean_over_axis(x, Axis::Rows))),
        ("mean_cols", unary(h, &x, |t, x| t.mean_over_axis(x, Axis::Cols))),
        ("sum", unary(h, &x, |t, x| t.sum(x))),
        ("rms_norm_x", unary(h, &wide, |t, x| { let g = leaf(t, &gain); t.rms_norm(x, g, 1e-6).unwrap() })),
        ("rms_norm_gain", unary(h, &gain, |t, g| { let x = leaf(t, &wide); t.rms_norm(x, g, 1e-6).unwrap() })),
        ("masked_softmax", unary(h, &square, |t, x| t.masked_softmax(x, &flags).unwrap())),
        ("rope", unary(h, &wide, |t, x| t.rope(x, 4, 3, 10_000.0).unwrap())),
        ("group_max", unary(h, &pairs, |t, x| t.group_max(x, 2).unwrap())),
    ];

    let items: Vec<usize> = (0..r).map(|_| rng.gen_range(0..r)).collect();
    let (w, allowed) = smoothed_targets(&items, 0.1).unwrap();
    let store = ParamStore::new();
    out.push((
        "softmax_cross_entropy",
        check_gradient(&store, |t, x| t.softmax_cross_entropy(x, &w, Some(&allowed)), &square, h).unwrap(),
    ));

    let mut store = ParamStore::<f64>::new();
    let table = store.add("table", random(&mut rng, vec![r + 2, 3])).unwrap();
    let ids: Vec<usize> = (0..5).map(|_| rng.gen_range(0..r + 2)).collect();
    let gather_ids = ids.clone();
    out.push((
        "gather",
        check_param_gradients(&mut store, |t| { let g = t.gather(table, &gather_ids)?; Ok(project(t, g)) }, h).unwrap(),
    ));
    out.push((
        "gather_sum",
        check_param_gradients(
            &mut store,
            |t| { let g = t.gather_sum(table, ids.clone(), vec![0, 2, 2, 5])?; Ok(project(t, g)) },
            h,
        )
        .unwrap(),
    ));
    out
}

/// Worst report per op over `cases` shape draws.
pub fn op_suite(cases: u64, h: f64) -> Vec<(&'static str, GradCheckReport)> {
    let mut worst: Vec<(&'static str, GradCheckReport)> = Vec::new();
    for seed in 0..cases {
        for (name, report) in op_checks(seed, h) {
            match worst.iter_mut().find(|(n, _)| *n == name) {
                Some((_, w)) => w.merge(&report),
                None => worst.push((name, report)),
            }
        }
    }
    worst
}

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        dim: 8,
        layers: 2,
        heads: 2,
        interests: 4,
        max_seq_len: 20,
        compression: CompressionLayout {
            windows: vec![Window { size: 4, count: 2 }, Window { size: 2, count: 2 }],
            raw_tail: 8,
        },
        item_vocab: 40,
        tag_vocab: 4,
        ..ModelConfig::default()
    }
}

pub fn random_history(rng: &mut ChaCha8Rng, n: usize, items: usize, tags: usize) -> Vec<InteractionRecord> {
    (0..n)
        .map(|_| {
            let duration = rng.gen_range(5.0..300.0f64).round();
            InteractionRecord {
                item_id: rng.gen_range(0..items),
                watch_time: (duration * rng.gen_range(0.0..1.0f64)).round(),
                duration,
                tag_id: rng.gen_range(0..tags),
                labels: InteractionLabels {
                    like: rng.gen_bool(0.3),
                    comment: rng.gen_bool(0.2),
                    follow: rng.gen_bool(0.1),
                },
            }
        })
        .collect()
}

/// Finite-difference check of the batch objective over every parameter of
/// the tiny model: B=3 full-length histories, logQ on, smoothing 0.1.
pub fn full_objective_check(h: f64) -> GradCheckReport {
    let mut model = Model::<f64>::new(tiny_config(), 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let histories: Vec<_> = (0..3).map(|_| random_history(&mut rng, 20, 40, 4)).collect();
    let positives = [3usize, 17, 29];
    let q = [0.2, 0.05, 0.5];
    let net = model.net.clone();
    let batch: Vec<_> = histories.iter().map(|h| h.as_slice()).zip(positives).collect();
    check_param_gradients(
        &mut model.params,
        |t| Ok(batch_objective(t, &net, &batch, Some(&q), 0.1)?.loss),
        h,
    )
    .unwrap()
}

// -------------------------------------------------------------- compression

pub fn table_layout() -> CompressionLayout {
    CompressionLayout {
        windows: vec![Window { size: 64, count: 2 }, Window { size: 16, count: 5 }],
        raw_tail: 48,
    }
}

/// Fill rule written out directly: the raw tail takes the newest items, then
/// windows fill newest-first and the oldest filled window may be partial.
/// Returns the (start, len) of each pooled window followed by the raw count.
pub fn fill_oracle(windows: &[usize], raw_tail: usize, n: usize) -> (Vec<(usize, usize)>, usize) {
    let raw = n.min(raw_tail);
    let mut remaining = n - raw;
    let mut groups = Vec::new();
    for &w in windows.iter().rev() {
        if remaining == 0 {
            break;
        }
        let take = w.min(remaining);
        remaining -= take;
        groups.push((remaining, take));
    }
    groups.reverse();
    (groups, raw)
}

pub fn expand(layout: &CompressionLayout) -> Vec<usize> {
    layout
        .windows
        .iter()
        .flat_map(|w| std::iter::repeat_n(w.size, w.count))
        .collect()
}

pub fn compression_counts() -> Check {
    let standard = CompressionLayout::standard();
    let table = table_layout();
    let a = standard.compressed_len();
    let b = table.compressed_len();
    let planned = standard.plan(256).unwrap().len();
    Check::new(
        a == 55 && b == 55 && planned == 55,
        format!("standard layout {a} tokens, planned {planned}, 64,64,16x5+48 list {b} tokens (expect 55)"),
    )
}

// ------------------------------------------------------------------- cost

pub const COST_BOUND: f64 = 1.3;

/// Attention multiply-adds of the compressed 256-item path relative to the raw
/// 64-item path, group encoder included.
pub fn cost_ratio(cfg: &ModelConfig) -> (f64, f64) {
    let model = CostModel {
        dim: cfg.dim,
        backbone_layers: cfg.layers,
        encoder_layers: 1,
        query_tokens: cfg.interests,
    };
    let compressed = CompressionLayout::standard().attention_cost(256, &model).unwrap();
    let raw = CompressionLayout::identity(64).attention_cost(64, &model).unwrap();
    (
        compressed.total() as f64 / raw.total() as f64,
        compressed.backbone as f64 / raw.backbone as f64,
    )
}

pub fn cost_check(cfg: &ModelConfig) -> Check {
    let (total, backbone) = cost_ratio(cfg);
    let mut passing_depth = None;
    for layers in 1..=64 {
        let c = ModelConfig { layers, ..cfg.clone() };
        if cost_ratio(&c).0 <= COST_BOUND {
            passing_depth = Some(layers);
            break;
        }
    }
    Check::new(
        total <= COST_BOUND,
        format!(
            "compressed/raw = {total:.3} with the group encoder (bound {COST_BOUND}); backbone only {backbone:.3}; \
             d={} L={} k={}; bound first met at L={}",
            cfg.dim,
            cfg.layers,
            cfg.interests,
            passing_depth.map_or("none".into(), |l| l.to_string())
        ),
    )
}

// ------------------------------------------------------------------- loss

/// Per-row smoothed cross-entropy in plain f64, the oracle for the tape loss.
pub fn row_losses(logits: &[f64], b: usize, weights: &[f64], allowed: &[bool]) -> Vec<f64> {
    (0..b)
        .map(|i| {
            let row = &logits[i * b..(i + 1) * b];
            let max = (0..b).filter(|&j| allowed[i * b + j]).map(|j| row[j]).fold(f64::MIN, f64::max);
            let z: f64 = (0..b).filter(|&j| allowed[i * b + j]).map(|j| (row[j] - max).exp()).sum();
            let lse = max + z.ln();
            (0..b)
                .filter(|&j| allowed[i * b + j])
                .map(|j| weights[i * b + j] * (lse - row[j]))
                .sum()
        })
        .collect()
}

/// Tape loss for a batch given raw in-batch logits (k=1, identity candidates).
pub fn tape_loss(logits: &[f64], b: usize, items: &[usize], q: Option<&[f64]>, alpha: f64) -> f64 {
    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    let u = tape.constant(vec![b, b], logits.to_vec()).unwrap();
    let mut eye = vec![0.0; b * b];
    for i in 0..b {
        eye[i * b + i] = 1.0;
    }
    let x = tape.constant(vec![b, b], eye).unwrap();
    let out = batch_loss(&mut tape, u, x, 1, items, q, alpha).unwrap();
    tape.value(out.loss).item()
}

pub fn loss_identities() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut worst_logq: f64 = 0.0;
    let mut worst_hard: f64 = 0.0;
    let mut worst_uniform: f64 = 0.0;
    for trial in 0..50 {
        let b = [2, 4, 8, 64][trial % 4];
        let logits: Vec<f64> = (0..b * b).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let items: Vec<usize> = (0..b).map(|_| rng.gen_range(0..b + 2)).collect();
        // Uniform q shifts every column equally, so every row loss is unchanged.
        let (w, allowed) = smoothed_targets(&items, 0.1).unwrap();
        let shifted: Vec<f64> = logits.iter().map(|v| v - (0.01f64).ln()).collect();
        let plain = row_losses(&logits, b, &w, &allowed);
        let moved = row_losses(&shifted, b, &w, &allowed);
        for (p, m) in plain.iter().zip(&moved) {
            worst_logq = worst_logq.max((p - m).abs());
        }
        let with_q = tape_loss(&logits, b, &items, Some(&vec![0.01; b]), 0.1);
        let without = tape_loss(&logits, b, &items, None, 0.1);
        worst_logq = worst_logq.max((with_q - without).abs());

        // α = 0 is the hard loss: one-hot targets, exactly.
        let (w0, allowed0) = smoothed_targets(&items, 0.0).unwrap();
        let one_hot = (0..b * b).all(|ij| w0[ij] == if ij / b == ij % b { 1.0 } else { 0.0 });
        let hard: f64 = (0..b)
            .map(|i| {
                let row = &logits[i * b..(i + 1) * b];
                let max = (0..b).filter(|&j| allowed0[i * b + j]).map(|j| row[j]).fold(f64::MIN, f64::max);
                let z: f64 = (0..b).filter(|&j| allowed0[i * b + j]).map(|j| (row[j] - max).exp()).sum();
                max + z.ln() - row[i]
            })
            .sum::<f64>()
            / b as f64;
        let got = tape_loss(&logits, b, &items, None, 0.0);
        worst_hard = worst_hard.max(if one_hot { (got - hard).abs() } else { f64::INFINITY });
    }
    for b in [2usize, 4, 64] {
        let items: Vec<usize> = (0..b).collect();
        let got = tape_loss(&vec![0.0; b * b], b, &items, None, 0.1);
        worst_uniform = worst_uniform.max((got - (b as f64).ln()).abs());
    }
    let pass = worst_logq < 1e-9 && worst_hard < 1e-12 && worst_uniform < 1e-9;
    Check::new(
        pass,
        format!(
            "uniform-q shift {worst_logq:.1e} (<1e-9); α=0 vs hard {worst_hard:.1e} (one-hot targets, <1e-12); \
             uniform logits vs log B {worst_uniform:.1e} (<1e-9, B=2,4,64)"
        ),
    )
}

// -------------------------------------------------------------- causality

fn causal_backbone(store: &mut ParamStore<f64>, seed: u64) -> Transformer {
    let cfg = TransformerConfig {
        dim: 8,
        layers: 2,
        heads: 2,
        ffn_multiplier: 4,
        mask_mode: MaskMode::Causal,
        position_encoding: PositionEncoding::Rotary,
        rope_base: 10_000.0,
        norm_eps: 1e-6,
    };
    Transformer::new(store, "backbone", cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn run_causal(store: &ParamStore<f64>, net: &Transformer, x: &Tensor<f64>) -> Tensor<f64> {
    let mut tape = Tape::new(store);
    let v = tape.leaf(x.clone());
    let n = x.rows();
    let y = net.forward(&mut tape, v, &AttentionMask::causal(n), 0).unwrap();
    tape.value(y).clone()
}

/// Perturbs every token from a random position onward and counts prefix
/// outputs that change in any bit.
pub fn suffix_perturbations(trials: usize) -> (usize, usize) {
    let mut store = ParamStore::new();
    let net = causal_backbone(&mut store, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut broken = 0;
    for _ in 0..trials {
        let n = rng.gen_range(2..=16);
        let x = random(&mut rng, vec![n, 8]);
        let j = rng.gen_range(1..n);
        let mut y = x.clone();
        for v in &mut y.data_mut()[j * 8..] {
            *v += rng.gen_range(-2.0..2.0);
        }
        let a = run_causal(&store, &net, &x);
        let b = run_causal(&store, &net, &y);
        let same = a.data()[..j * 8]
            .iter()
            .zip(&b.data()[..j * 8])
            .all(|(p, q)| p.to_bits() == q.to_bits());
        if !same {
            broken += 1;
        }
    }
    (trials, broken)
}

/// Largest `j` such that perturbing query tokens `j+1..k` leaves some earlier
/// interest changed; returns the number of violating trials.
pub fn query_token_isolation(trials: usize) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let base = Model::<f64>::new(tiny_config(), 13).unwrap();
    let k = base.config().interests;
    let d = base.config().dim;
    let qid = base.net.query_tokens();
    let mut violations = 0;
    for _ in 0..trials {
        let n = rng.gen_range(1..=20);
        let history = random_history(&mut rng, n, 40, 4);
        let before = base.interests(&history).unwrap();
        let j = rng.gen_range(0..k - 1);
        let mut perturbed = base.clone();
        for v in &mut perturbed.params.get_mut(qid).data_mut()[(j + 1) * d..] {
            *v += rng.gen_range(-1.0..1.0);
        }
        let after = perturbed.interests(&history).unwrap();
        let same = before.vectors.data()[..(j + 1) * d]
            .iter()
            .zip(&after.vectors.data()[..(j + 1) * d])
            .all(|(p, q)| p.to_bits() == q.to_bits());
        let later_moved = before.vectors.data()[(j + 1) * d..] != after.vectors.data()[(j + 1) * d..];
        if !same || !later_moved {
            violations += 1;
        }
    }
    violations
}

pub fn causality_check() -> Check {
    let (trials, broken) = suffix_perturbations(1000);
    let q_violations = query_token_isolation(50);
    Check::new(
        broken == 0 && q_violations == 0,
        format!(
            "{broken}/{trials} suffix perturbations changed a prefix bit; \
             {q_violations}/50 query-token perturbations changed an earlier interest"
        ),
    )
}

// -------------------------------------------------------------- retrieval

pub const RETRIEVAL_CUTOFFS: [usize; 4] = [50, 100, 500, 1000];

/// Score of one row as a left-to-right f32 sum.
pub fn full_sort_score(row: &[f32], query: &[f32]) -> f32 {
    row.iter().zip(query).fold(0.0f32, |s, (a, b)| s + a * b)
}

/// Full-sort oracle: scores as a left-to-right f32 sum, sorted by score
/// descending and id ascending.
pub fn full_sort(items: &[f32], dim: usize, query: &[f32]) -> Vec<usize> {
    let n = items.len() / dim;
    let mut scored: Vec<(usize, f32)> = (0..n)
        .map(|i| {
            let row = &items[i * dim..(i + 1) * dim];
            (i, full_sort_score(row, query))
        })
        .collect();
    scored.sort_by(|a, b| match b.1.partial_cmp(&a.1).unwrap() {
        Ordering::Equal => a.0.cmp(&b.0),
        o => o,
    });
    scored.into_iter().map(|(i, _)| i).collect()
}

/// Item table with exact duplicate rows so that tie order is exercised.
pub fn retrieval_items(n: usize, dim: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items: Vec<f32> = (0..n * dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    for _ in 0..n / 20 {
        let src = rng.gen_range(0..n);
        let dst = rng.gen_range(0..n);
        let row: Vec<f32> = items[src * dim..(src + 1) * dim].to_vec();
        items[dst * dim..(dst + 1) * dim].copy_from_slice(&row);
    }
    items
}

pub fn retrieval_exactness() -> Check {
    let (n, dim, queries, k) = (10_000, 32, 100, 4);
    let items = retrieval_items(n, dim, 17);
    let index = RetrievalIndex::new(Tensor::matrix(n, dim, items.clone()).unwrap()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let mut mismatches = 0;
    let mut compared = 0;
    for _ in 0..queries {
        let v: Vec<f32> = (0..k * dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let set = InterestSet {
            vectors: Tensor::matrix(k, dim, v).unwrap(),
        };
        let oracle: Vec<Vec<usize>> = (0..k).map(|j| full_sort(&items, dim, set.interest(j))).collect();
        for &cut in &RETRIEVAL_CUTOFFS {
            let got = index.top_k_per_interest(&set, cut).unwrap();
            for (j, list) in got.iter().enumerate() {
                compared += 1;
                let ids: Vec<usize> = list.iter().map(|s| s.id).collect();
                if ids[..] != oracle[j][..cut] {
                    mismatches += 1;
                }
            }
        }
    }
    Check::new(
        mismatches == 0,
        format!("{mismatches}/{compared} ranked lists differ from the full-sort oracle (|X|={n}, {queries} queries x k={k}, K=50,100,500,1000, 5% duplicated rows)"),
    )
}

// --------------------------------------------------------------- training

pub const MA_WINDOW: usize = 20;
pub const EARLY_STEPS: usize = 200;
pub const BASELINE_HR50: f64 = 50.0 / 10_000.0;
pub const MARGIN_TOLERANCE: f64 = 0.2;

pub struct PlantedRun {
    pub metrics: Vec<StepMetrics>,
    pub report: EvalReport,
    pub secs: f64,
}

pub fn planted_run(cfg: &RunConfig, data: &Dataset) -> PlantedRun {
    let start = Instant::now();
    let (trainer, metrics) = run(cfg, &data.train, None, None).unwrap();
    let report = evaluate(&trainer.model, &data.eval, &cfg.eval, &cfg.hash()).unwrap();
    PlantedRun {
        metrics,
        report,
        secs: start.elapsed().as_secs_f64(),
    }
}

/// Number of places where the trailing moving average of the first
/// `EARLY_STEPS` losses fails to strictly decrease, and its end points.
pub fn early_trend(losses: &[f64]) -> (usize, f64, f64) {
    let head = &losses[..losses.len().min(EARLY_STEPS)];
    let ma = seqformer::train::moving_average(head, MA_WINDOW);
    let rises = ma.windows(2).filter(|w| w[1] >= w[0]).count();
    (rises, ma.first().copied().unwrap_or(f64::NAN), ma.last().copied().unwrap_or(f64::NAN))
}

pub fn eval_requests_count(data: &Dataset, max: usize) -> usize {
    seqformer::data::eval_requests(&data.eval, max).0.len()
}

pub fn reference_config() -> RunConfig {
    let text = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/reference.json"))
        .expect("configs/reference.json");
    RunConfig::from_json_str(&text).unwrap()
}

/// A run small enough to train in well under a second.
pub fn small_run_config() -> RunConfig {
    let mut cfg = RunConfig {
        data: seqformer::data::WorldSpec {
            item_count: 300,
            user_count: 40,
            eval_user_count: 20,
            ..seqformer::data::WorldSpec::default()
        },
        ..RunConfig::default()
    };
    cfg.model.item_vocab = 300;
    cfg.model.dim = 16;
    cfg.model.heads = 2;
    cfg.train.batch_size = 16;
    cfg.train.steps = 30;
    cfg.train.checkpoint_every = 10;
    cfg.eval.cutoffs = vec![5, 10, 50];
    cfg
}
