//! Shortening long histories: older items are pooled window by window through
//! a shared bidirectional encoder while the most recent items stay raw.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Axis, Tape, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Scalar;
use crate::transformer::{AttentionMask, MaskMode, PositionEncoding, Transformer, TransformerConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Window {
    pub size: usize,
    pub count: usize,
}

/// Window levels listed oldest first, followed by an uncompressed tail.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompressionLayout {
    pub windows: Vec<Window>,
    pub raw_tail: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    /// Pooled group from a window wider than the narrowest level.
    Early { group: usize },
    /// Pooled group from the narrowest window level.
    Mid { group: usize },
    /// An uncompressed item at this position of the original history.
    Raw { position: usize },
}

/// One output token of the plan: history items `start..start+len`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
    pub provenance: Provenance,
}

impl CompressionLayout {
    /// 2×64 and 5×16 windows ahead of a 48-item tail: 256 items in, 55 tokens out.
    pub fn standard() -> Self {
        CompressionLayout {
            windows: vec![Window { size: 64, count: 2 }, Window { size: 16, count: 5 }],
            raw_tail: 48,
        }
    }

    /// No pooling: every item of a history up to `len` long stays raw.
    pub fn identity(len: usize) -> Self {
        CompressionLayout {
            windows: Vec::new(),
            raw_tail: len,
        }
    }

    pub fn capacity(&self) -> usize {
        self.windows.iter().map(|w| w.size * w.count).sum::<usize>() + self.raw_tail
    }

    pub fn compressed_len(&self) -> usize {
        self.windows.iter().map(|w| w.count).sum::<usize>() + self.raw_tail
    }

    pub fn validate(&self, max_seq_len: usize) -> Result<()> {
        if self.windows.iter().any(|w| w.size == 0 || w.count == 0) {
            return Err(Error::config("compression windows need positive size and count"));
        }
        if self.capacity() != max_seq_len {
            return Err(Error::config(format!(
                "compression layout covers {} items but max_seq_len is {max_seq_len}",
                self.capacity()
            )));
        }
        if self.compressed_len() == 0 {
            return Err(Error::config("compression layout produces no tokens"));
        }
        Ok(())
    }

    /// Window sizes expanded one entry per window, oldest first.
    fn window_sizes(&self) -> Vec<usize> {
        self.windows
            .iter()
            .flat_map(|w| std::iter::repeat_n(w.size, w.count))
            .collect()
    }

    /// Effective segmentation of a history of `seq_len` items, in chronological
    /// order. Items fill the raw tail first, then windows from newest to
    /// oldest; the oldest filled window may be partial.
    pub fn plan(&self, seq_len: usize) -> Result<Vec<Segment>> {
        if seq_len == 0 {
            return Err(Error::contract("cannot compress an empty history"));
        }
        if seq_len > self.capacity() {
            return Err(Error::contract(format!(
                "history of {seq_len} items exceeds layout capacity {}",
                self.capacity()
            )));
        }
        let narrowest = self.windows.iter().map(|w| w.size).min().unwrap_or(0);
        let tail = seq_len.min(self.raw_tail);
        let mut remaining = seq_len - tail;
        let mut groups = Vec::new();
        for size in self.window_sizes().into_iter().rev() {
            if remaining == 0 {
                break;
            }
            let len = size.min(remaining);
            remaining -= len;
            groups.push((remaining, len, size > narrowest));
        }
        groups.reverse();

        let mut segments = Vec::with_capacity(groups.len() + tail);
        let (mut early, mut mid) = (0, 0);
        for (start, len, is_early) in groups {
            let provenance = if is_early {
                early += 1;
                Provenance::Early { group: early - 1 }
            } else {
                mid += 1;
                Provenance::Mid { group: mid - 1 }
            };
            segments.push(Segment { start, len, provenance });
        }
        for position in seq_len - tail..seq_len {
            segments.push(Segment {
                start: position,
                len: 1,
                provenance: Provenance::Raw { position },
            });
        }
        Ok(segments)
    }

    /// Attention-score multiply-adds for a history of `seq_len` items followed
    /// by `query_tokens` readout tokens.
    pub fn attention_cost(&self, seq_len: usize, cost: &CostModel) -> Result<AttentionCost> {
        let segments = self.plan(seq_len)?;
        let m = (segments.len() + cost.query_tokens) as u64;
        let d = cost.dim as u64;
        let backbone = cost.backbone_layers as u64 * m * m * d;
        let group_encoder = segments
            .iter()
            .filter(|s| !matches!(s.provenance, Provenance::Raw { .. }))
            .map(|s| (s.len * s.len) as u64 * d)
            .sum::<u64>()
            * cost.encoder_layers as u64;
        Ok(AttentionCost {
            backbone,
            group_encoder,
        })
    }
}

/// Architecture terms needed to count attention work.
#[derive(Clone, Copy, Debug)]
pub struct CostModel {
    pub dim: usize,
    pub backbone_layers: usize,
    pub encoder_layers: usize,
    pub query_tokens: usize,
}

/// `Σ_layers m²·d`, summed over heads (each head contributes `m²·d/M`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionCost {
    pub backbone: u64,
    pub group_encoder: u64,
}

impl AttentionCost {
    pub fn total(&self) -> u64 {
        self.backbone + self.group_encoder
    }
}

/// A compressed token stream still living on the tape.
#[derive(Clone, Debug)]
pub struct CompressedSequence {
    pub tokens: Var,
    pub provenance: Vec<Provenance>,
}

/// Shared single-layer bidirectional encoder that pools each window to one token.
#[derive(Clone, Debug)]
pub struct Compressor {
    layout: CompressionLayout,
    encoder: Transformer,
}

impl Compressor {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        layout: CompressionLayout,
        dim: usize,
        heads: usize,
        norm_eps: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let cfg = TransformerConfig {
            dim,
            layers: 1,
            heads,
            ffn_multiplier: 4,
            mask_mode: MaskMode::Bidirectional,
            position_encoding: PositionEncoding::None,
            rope_base: 10_000.0,
            norm_eps,
        };
        let encoder = Transformer::new(store, "group_encoder", cfg, rng)?;
        Ok(Compressor { layout, encoder })
    }

    pub fn layout(&self) -> &CompressionLayout {
        &self.layout
    }

    pub fn encoder(&self) -> &Transformer {
        &self.encoder
    }

    /// Mean over positions of the encoded group `[g×d]`; returns `[1×d]`.
    pub fn encode_group<T: Scalar>(&self, tape: &mut Tape<'_, T>, group: Var) -> Result<Var> {
        let (g, _) = tape.value(group).dims2();
        let size_limit = self.layout.windows.iter().map(|w| w.size).max().unwrap_or(0);
        if g == 0 || g > size_limit {
            return Err(Error::contract(format!(
                "group of {g} tokens outside 1..={size_limit}"
            )));
        }
        let encoded = self.encoder.forward(tape, group, &AttentionMask::bidirectional(g), 0)?;
        let pooled = tape.mean_over_axis(encoded, Axis::Rows);
        tape.reshape(pooled, vec![1, self.encoder.config().dim])
    }

    /// Replaces each planned window of `tokens` `[n×d]` by its pooled token.
    pub fn compress<T: Scalar>(&self, tape: &mut Tape<'_, T>, tokens: Var) -> Result<CompressedSequence> {
        let (n, _) = tape.value(tokens).dims2();
        let segments = self.layout.plan(n)?;
        let mut parts = Vec::with_capacity(segments.len());
        let mut provenance = Vec::with_capacity(segments.len());
        let raw_start = segments
            .iter()
            .position(|s| matches!(s.provenance, Provenance::Raw { .. }))
            .unwrap_or(segments.len());
        for s in &segments[..raw_start] {
            let group = tape.slice_rows(tokens, s.start, s.len)?;
            parts.push(self.encode_group(tape, group)?);
            provenance.push(s.provenance);
        }
        if raw_start < segments.len() {
            let first = segments[raw_start].start;
            parts.push(tape.slice_rows(tokens, first, n - first)?);
            provenance.extend(segments[raw_start..].iter().map(|s| s.provenance));
        }
        let tokens = if parts.len() == 1 {
            parts[0]
        } else {
            tape.concat_rows(&parts)?
        };
        Ok(CompressedSequence { tokens, provenance })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn counts(layout: &CompressionLayout, n: usize) -> Vec<usize> {
        layout.plan(n).unwrap().iter().map(|s| s.len).collect()
    }

    #[test]
    fn standard_layout_shapes() {
        let l = CompressionLayout::standard();
        assert_eq!(l.capacity(), 256);
        assert_eq!(l.plan(256).unwrap().len(), 55);
        assert_eq!(l.plan(48).unwrap().len(), 48);
        assert_eq!(l.plan(1).unwrap().len(), 1);
        assert!(l.plan(0).is_err());
        assert!(l.plan(257).is_err());
    }

    #[test]
    fn partial_oldest_window_forms_smaller_group() {
        let l = CompressionLayout::standard();
        let c = counts(&l, 100);
        assert_eq!(&c[..4], &[4, 16, 16, 16]);
        assert_eq!(c.len(), 52);
        let c = counts(&l, 200);
        assert_eq!(&c[..7], &[8, 64, 16, 16, 16, 16, 16]);
    }

    #[test]
    fn provenance_tags_follow_window_levels() {
        let p: Vec<_> = CompressionLayout::standard()
            .plan(256)
            .unwrap()
            .into_iter()
            .map(|s| s.provenance)
            .collect();
        assert_eq!(p[0], Provenance::Early { group: 0 });
        assert_eq!(p[1], Provenance::Early { group: 1 });
        assert_eq!(p[2], Provenance::Mid { group: 0 });
        assert_eq!(p[6], Provenance::Mid { group: 4 });
        assert_eq!(p[7], Provenance::Raw { position: 208 });
    }

    #[test]
    fn validate_checks_capacity() {
        assert!(CompressionLayout::standard().validate(256).is_ok());
        assert!(matches!(
            CompressionLayout::standard().validate(200),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn single_member_group_is_the_encoded_token() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = Compressor::new(&mut store, CompressionLayout::standard(), 8, 2, 1e-6, &mut rng).unwrap();
        let mut t = Tape::new(&store);
        let x = t.constant(vec![1, 8], (0..8).map(|i| 0.1 * i as f64).collect()).unwrap();
        let pooled = c.encode_group(&mut t, x).unwrap();
        let encoded = c.encoder().forward(&mut t, x, &AttentionMask::bidirectional(1), 0).unwrap();
        assert_eq!(t.value(pooled).data(), t.value(encoded).data());
    }

    #[test]
    fn identity_layout_passes_tokens_through() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = Compressor::new(&mut store, CompressionLayout::identity(5), 4, 1, 1e-6, &mut rng).unwrap();
        let mut t = Tape::new(&store);
        let data: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let x = t.constant(vec![5, 4], data.clone()).unwrap();
        let out = c.compress(&mut t, x).unwrap();
        assert_eq!(t.value(out.tokens).data(), &data[..]);
        assert_eq!(out.provenance.len(), 5);
    }
}
