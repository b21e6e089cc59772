//! Pre-norm transformer stack: RMS normalization, masked multi-head attention
//! with optional rotary positions, and a SiLU-gated feed-forward layer.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    Causal,
    Bidirectional,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionEncoding {
    Rotary,
    None,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_multiplier: usize,
    pub mask_mode: MaskMode,
    pub position_encoding: PositionEncoding,
    pub rope_base: f64,
    pub norm_eps: f64,
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        if self.layers == 0 || self.ffn_multiplier == 0 {
            return Err(Error::config("layers and ffn_multiplier must be positive"));
        }
        if self.position_encoding == PositionEncoding::Rotary && !self.head_dim().is_multiple_of(2) {
            return Err(Error::config("rotary positions need an even head width"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// `allowed[i][j]`: position i may attend to position j.
#[derive(Clone, Debug)]
pub struct AttentionMask {
    n: usize,
    allowed: Arc<[bool]>,
    valid: Vec<bool>,
}

impl AttentionMask {
    pub fn causal(n: usize) -> Self {
        let allowed = (0..n * n).map(|k| k % n <= k / n).collect::<Vec<_>>();
        AttentionMask {
            n,
            allowed: allowed.into(),
            valid: vec![true; n],
        }
    }

    pub fn bidirectional(n: usize) -> Self {
        Self::padded(n, n)
    }

    /// Full attention among the first `valid_len` positions; the padding
    /// positions after them attend to nothing and are attended by nothing.
    pub fn padded(n: usize, valid_len: usize) -> Self {
        let allowed = (0..n * n)
            .map(|k| k / n < valid_len && k % n < valid_len)
            .collect::<Vec<_>>();
        AttentionMask {
            n,
            allowed: allowed.into(),
            valid: (0..n).map(|i| i < valid_len).collect(),
        }
    }

    pub fn for_mode(mode: MaskMode, n: usize) -> Self {
        match mode {
            MaskMode::Causal => Self::causal(n),
            MaskMode::Bidirectional => Self::bidirectional(n),
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.n + j]
    }

    pub fn flags(&self) -> &Arc<[bool]> {
        &self.allowed
    }

    fn validate(&self) -> Result<()> {
        for i in 0..self.n {
            if self.valid[i] && !(0..self.n).any(|j| self.allowed(i, j)) {
                return Err(Error::contract(format!(
                    "attention row {i} may attend to no valid position"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Block {
    attn_norm: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    ffn_norm: ParamId,
    w_gate: ParamId,
    w_up: ParamId,
    w_down: ParamId,
}

#[derive(Clone, Debug)]
pub struct Transformer {
    cfg: TransformerConfig,
    blocks: Vec<Block>,
    final_norm: ParamId,
}

fn linear_init<T: Scalar>(
    store: &mut ParamStore<T>,
    name: String,
    fan_in: usize,
    fan_out: usize,
    rng: &mut impl Rng,
) -> Result<ParamId> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let w = (0..fan_in * fan_out)
        .map(|_| T::of(rng.gen_range(-bound..bound)))
        .collect();
    store.add(name, Tensor::matrix(fan_in, fan_out, w)?)
}

fn ones<T: Scalar>(store: &mut ParamStore<T>, name: String, d: usize) -> Result<ParamId> {
    store.add(name, Tensor::vector(vec![T::one(); d]))
}

/// `x / sqrt(mean(x²) + eps) ⊙ gain`, row-wise.
pub fn rms_norm<T: Scalar>(tape: &mut Tape<'_, T>, x: Var, gain: Var, eps: f64) -> Result<Var> {
    tape.rms_norm(x, gain, eps)
}

impl Transformer {
    /// Registers parameters under `prefix` (e.g. `backbone`).
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: TransformerConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let h = d * cfg.ffn_multiplier;
        let mut blocks = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let p = |n: &str| format!("{prefix}.{l}.{n}");
            blocks.push(Block {
                attn_norm: ones(store, p("attn_norm"), d)?,
                wq: linear_init(store, p("wq"), d, d, rng)?,
                wk: linear_init(store, p("wk"), d, d, rng)?,
                wv: linear_init(store, p("wv"), d, d, rng)?,
                wo: linear_init(store, p("wo"), d, d, rng)?,
                ffn_norm: ones(store, p("ffn_norm"), d)?,
                w_gate: linear_init(store, p("w_gate"), d, h, rng)?,
                w_up: linear_init(store, p("w_up"), d, h, rng)?,
                w_down: linear_init(store, p("w_down"), h, d, rng)?,
            });
        }
        let final_norm = ones(store, format!("{prefix}.final_norm"), d)?;
        Ok(Transformer {
            cfg,
            blocks,
            final_norm,
        })
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.cfg
    }

    /// All layers plus the final norm over `tokens` `[n×d]`; returns every
    /// top-layer position. Row `i` sits at rotary position `pos0 + i`.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        tokens: Var,
        mask: &AttentionMask,
        pos0: usize,
    ) -> Result<Var> {
        let mut x = tokens;
        for layer in 0..self.blocks.len() {
            x = self.attention_block(tape, layer, x, mask, pos0)?;
        }
        let g = tape.param(self.final_norm);
        rms_norm(tape, x, g, self.cfg.norm_eps)
    }

    /// Forward with the mask implied by the configured mode.
    pub fn run<T: Scalar>(&self, tape: &mut Tape<'_, T>, tokens: Var) -> Result<Var> {
        let n = tape.value(tokens).rows();
        let mask = AttentionMask::for_mode(self.cfg.mask_mode, n);
        self.forward(tape, tokens, &mask, 0)
    }

    /// `x + MHA(norm(x))`, then `+ FFN(norm(·))`.
    pub fn attention_block<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        layer: usize,
        x: Var,
        mask: &AttentionMask,
        pos0: usize,
    ) -> Result<Var> {
        let (n, d) = tape.value(x).dims2();
        if n == 0 || d != self.cfg.dim {
            return Err(Error::Shape {
                op: "attention_block",
                lhs: vec![n, d],
                rhs: vec![self.cfg.dim],
            });
        }
        if mask.len() != n {
            return Err(Error::Shape {
                op: "attention_block mask",
                lhs: vec![n, n],
                rhs: vec![mask.len(), mask.len()],
            });
        }
        mask.validate()?;
        let b = &self.blocks[layer];
        let eps = self.cfg.norm_eps;

        let g = tape.param(b.attn_norm);
        let hn = rms_norm(tape, x, g, eps)?;
        let attn = self.multi_head_attention(tape, b, hn, mask, pos0)?;
        let x = tape.add(x, attn)?;

        let g = tape.param(b.ffn_norm);
        let hn = rms_norm(tape, x, g, eps)?;
        let w_gate = tape.param(b.w_gate);
        let w_up = tape.param(b.w_up);
        let w_down = tape.param(b.w_down);
        let gate = tape.matmul(hn, w_gate)?;
        let gate = tape.silu(gate);
        let up = tape.matmul(hn, w_up)?;
        let h = tape.mul(gate, up)?;
        let ffn = tape.matmul(h, w_down)?;
        tape.add(x, ffn)
    }

    fn multi_head_attention<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        b: &Block,
        x: Var,
        mask: &AttentionMask,
        pos0: usize,
    ) -> Result<Var> {
        let hd = self.cfg.head_dim();
        let wq = tape.param(b.wq);
        let wk = tape.param(b.wk);
        let wv = tape.param(b.wv);
        let wo = tape.param(b.wo);
        let mut q = tape.matmul(x, wq)?;
        let mut k = tape.matmul(x, wk)?;
        let v = tape.matmul(x, wv)?;
        if self.cfg.position_encoding == PositionEncoding::Rotary {
            q = tape.rope(q, hd, pos0, self.cfg.rope_base)?;
            k = tape.rope(k, hd, pos0, self.cfg.rope_base)?;
        }
        let scale = T::of(1.0 / (hd as f64).sqrt());
        let mut heads = Vec::with_capacity(self.cfg.heads);
        for h in 0..self.cfg.heads {
            let qh = tape.slice_cols(q, h * hd, hd)?;
            let kh = tape.slice_cols(k, h * hd, hd)?;
            let vh = tape.slice_cols(v, h * hd, hd)?;
            let kt = tape.transpose(kh);
            let s = tape.matmul(qh, kt)?;
            let s = tape.scale(s, scale);
            let p = tape.masked_softmax(s, mask.flags())?;
            heads.push(tape.matmul(p, vh)?);
        }
        let o = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat_cols(&heads)?
        };
        tape.matmul(o, wo)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(mode: MaskMode, pos: PositionEncoding, layers: usize) -> TransformerConfig {
        TransformerConfig {
            dim: 8,
            layers,
            heads: 2,
            ffn_multiplier: 4,
            mask_mode: mode,
            position_encoding: pos,
            rope_base: 10_000.0,
            norm_eps: 1e-6,
        }
    }

    #[test]
    fn rms_norm_hand_values() {
        let s = ParamStore::<f64>::new();
        let mut t = Tape::new(&s);
        let x = t.constant(vec![2], vec![3.0, 4.0]).unwrap();
        let g = t.constant(vec![2], vec![1.0, 1.0]).unwrap();
        let y = rms_norm(&mut t, x, g, 0.0).unwrap();
        let rms = 12.5f64.sqrt();
        assert!((t.value(y).data()[0] - 3.0 / rms).abs() < 1e-12);
        assert!((t.value(y).data()[1] - 4.0 / rms).abs() < 1e-12);

        let z = t.constant(vec![2], vec![0.0, 0.0]).unwrap();
        let y = rms_norm(&mut t, z, g, 1e-6).unwrap();
        assert_eq!(t.value(y).data(), &[0.0, 0.0]);
    }

    #[test]
    fn causal_mask_layout() {
        let m = AttentionMask::causal(3);
        assert!(m.allowed(0, 0) && !m.allowed(0, 1));
        assert!(m.allowed(2, 0) && m.allowed(2, 2));
        let p = AttentionMask::padded(3, 2);
        assert!(p.allowed(1, 0) && !p.allowed(2, 2) && !p.allowed(0, 2));
    }

    #[test]
    fn single_token_causal_block_runs() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let tf = Transformer::new(&mut store, "tf", cfg(MaskMode::Causal, PositionEncoding::Rotary, 1), &mut rng).unwrap();
        let mut t = Tape::new(&store);
        let x = t.constant(vec![1, 8], (0..8).map(|i| i as f64 * 0.1).collect()).unwrap();
        let y = tf.run(&mut t, x).unwrap();
        assert_eq!(t.value(y).dims2(), (1, 8));
        assert!(t.value(y).is_finite());
    }

    #[test]
    fn bidirectional_identical_tokens_give_identical_rows() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tf = Transformer::new(&mut store, "enc", cfg(MaskMode::Bidirectional, PositionEncoding::None, 1), &mut rng).unwrap();
        let mut t = Tape::new(&store);
        let row: Vec<f64> = (0..8).map(|i| (i as f64).sin()).collect();
        let x = t.constant(vec![2, 8], [row.clone(), row].concat()).unwrap();
        let y = tf.run(&mut t, x).unwrap();
        assert_eq!(t.value(y).row(0), t.value(y).row(1));
    }

    #[test]
    fn mask_size_mismatch_and_config_errors() {
        let bad = TransformerConfig { heads: 3, ..cfg(MaskMode::Causal, PositionEncoding::Rotary, 1) };
        assert!(bad.validate().is_err());
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tf = Transformer::new(&mut store, "tf", cfg(MaskMode::Causal, PositionEncoding::Rotary, 1), &mut rng).unwrap();
        let mut t = Tape::new(&store);
        let x = t.constant(vec![2, 8], vec![0.1; 16]).unwrap();
        assert!(tf.forward(&mut t, x, &AttentionMask::causal(3), 0).is_err());
    }
}
