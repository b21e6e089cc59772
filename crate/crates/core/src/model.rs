//! The full user tower: fused item tokens, compressed history, a causal
//! backbone and learned query tokens whose outputs are the user's interests.

use rand::SeedableRng;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::compression::{CompressionLayout, Compressor};
use crate::embedding::{Attribute, BucketSpec, EmbedderShape, InteractionRecord, TokenEmbedder};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};
use crate::transformer::{AttentionMask, MaskMode, PositionEncoding, Transformer, TransformerConfig};

/// Upper bound on query tokens per user.
pub const MAX_INTERESTS: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub interests: usize,
    pub max_seq_len: usize,
    pub compression: CompressionLayout,
    pub item_vocab: usize,
    pub tag_vocab: usize,
    pub attributes: Vec<Attribute>,
    pub watch_time_buckets: BucketSpec,
    pub duration_buckets: BucketSpec,
    pub ffn_multiplier: usize,
    pub rope_base: f64,
    pub norm_eps: f64,
    /// L2-normalize interests and candidate embeddings before scoring.
    pub normalize: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 32,
            layers: 2,
            heads: 4,
            interests: 4,
            max_seq_len: 256,
            compression: CompressionLayout::standard(),
            item_vocab: 10_000,
            tag_vocab: 8,
            attributes: vec![
                Attribute::WatchTime,
                Attribute::Duration,
                Attribute::Tag,
                Attribute::Labels,
            ],
            watch_time_buckets: BucketSpec {
                max_value: 600.0,
                bucket_count: 600,
            },
            duration_buckets: BucketSpec {
                max_value: 300.0,
                bucket_count: 1000,
            },
            ffn_multiplier: 4,
            rope_base: 10_000.0,
            norm_eps: 1e-6,
            normalize: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.layers == 0 || self.heads == 0 || self.max_seq_len == 0 {
            return Err(Error::config("dim, layers, heads and max_seq_len must be positive"));
        }
        if self.interests == 0 || self.interests > MAX_INTERESTS {
            return Err(Error::config(format!(
                "interests must be in 1..={MAX_INTERESTS}, got {}",
                self.interests
            )));
        }
        if self.item_vocab == 0 || self.tag_vocab == 0 {
            return Err(Error::config("vocabularies must be nonempty"));
        }
        self.compression.validate(self.max_seq_len)?;
        self.watch_time_buckets.validate()?;
        self.duration_buckets.validate()?;
        self.backbone_config().validate()
    }

    fn backbone_config(&self) -> TransformerConfig {
        TransformerConfig {
            dim: self.dim,
            layers: self.layers,
            heads: self.heads,
            ffn_multiplier: self.ffn_multiplier,
            mask_mode: MaskMode::Causal,
            position_encoding: PositionEncoding::Rotary,
            rope_base: self.rope_base,
            norm_eps: self.norm_eps,
        }
    }
}

/// Structure of the network; parameter values live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Network {
    cfg: ModelConfig,
    embedder: TokenEmbedder,
    compressor: Compressor,
    backbone: Transformer,
    queries: ParamId,
}

/// Outputs at the query positions, one row per interest.
#[derive(Clone, Debug, PartialEq)]
pub struct InterestSet<T: Scalar> {
    pub vectors: Tensor<T>,
}

impl<T: Scalar> InterestSet<T> {
    pub fn len(&self) -> usize {
        self.vectors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn interest(&self, j: usize) -> &[T] {
        self.vectors.row(j)
    }
}

/// `max_j ⟨candidate, u_j⟩` and the winning `j` (lowest on ties).
pub fn score<T: Scalar>(candidate: &[T], interests: &InterestSet<T>) -> Result<(T, usize)> {
    let (k, d) = interests.vectors.dims2();
    if candidate.len() != d {
        return Err(Error::Shape {
            op: "score",
            lhs: vec![candidate.len()],
            rhs: vec![k, d],
        });
    }
    let mut best = (T::neg_infinity(), 0);
    for j in 0..k {
        let s = crate::autograd::kernels::dot(candidate, interests.interest(j));
        if s > best.0 {
            best = (s, j);
        }
    }
    Ok(best)
}

/// Scales each row of `x` to unit L2 norm.
pub fn l2_normalize<T: Scalar>(tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
    let d = tape.value(x).cols();
    let gain = tape.constant(vec![d], vec![T::of(1.0 / (d as f64).sqrt()); d])?;
    tape.rms_norm(x, gain, 0.0)
}

impl Network {
    /// Registers all parameters in `store`, drawing initial values from `seed`.
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embedder = TokenEmbedder::new(
            store,
            &EmbedderShape {
                dim: cfg.dim,
                item_vocab: cfg.item_vocab,
                tag_vocab: cfg.tag_vocab,
                attributes: &cfg.attributes,
                watch_time_buckets: &cfg.watch_time_buckets,
                duration_buckets: &cfg.duration_buckets,
            },
            &mut rng,
        )?;
        let compressor = Compressor::new(
            store,
            cfg.compression.clone(),
            cfg.dim,
            cfg.heads,
            cfg.norm_eps,
            &mut rng,
        )?;
        let backbone = Transformer::new(store, "backbone", cfg.backbone_config(), &mut rng)?;
        let bound = 1.0 / (cfg.dim as f64).sqrt();
        let q = (0..cfg.interests * cfg.dim)
            .map(|_| T::of(rng.gen_range(-bound..bound)))
            .collect();
        let queries = store.add("query_tokens", Tensor::matrix(cfg.interests, cfg.dim, q)?)?;
        Ok(Network {
            cfg,
            embedder,
            compressor,
            backbone,
            queries,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn embedder(&self) -> &TokenEmbedder {
        &self.embedder
    }

    pub fn compressor(&self) -> &Compressor {
        &self.compressor
    }

    pub fn query_tokens(&self) -> ParamId {
        self.queries
    }

    pub fn item_table(&self) -> ParamId {
        self.embedder.item.id
    }

    /// Keeps at most `max_seq_len` of the newest records.
    pub fn clip_history<'a>(&self, history: &'a [InteractionRecord]) -> &'a [InteractionRecord] {
        let max = self.cfg.max_seq_len;
        if history.len() > max {
            log::warn!(
                "history of {} items truncated to the newest {max}",
                history.len()
            );
            &history[history.len() - max..]
        } else {
            history
        }
    }

    /// Interest vectors `[k×d]` for one chronological history.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, history: &[InteractionRecord]) -> Result<Var> {
        if history.is_empty() {
            return Err(Error::contract("history must contain at least one item"));
        }
        let history = self.clip_history(history);
        let tokens = self.embedder.tokens(tape, history)?;
        let compressed = self.compressor.compress(tape, tokens)?;
        let m = compressed.provenance.len();
        let k = self.cfg.interests;
        let q = tape.param(self.queries);
        let seq = tape.concat_rows(&[compressed.tokens, q])?;
        let out = self.backbone.forward(tape, seq, &AttentionMask::causal(m + k), 0)?;
        let u = tape.slice_rows(out, m, k)?;
        if self.cfg.normalize {
            l2_normalize(tape, u)
        } else {
            Ok(u)
        }
    }

    /// Candidate embeddings `[n×d]` for item ids, as used for scoring.
    pub fn candidates<T: Scalar>(&self, tape: &mut Tape<'_, T>, items: &[usize]) -> Result<Var> {
        let x = self.embedder.item.lookup_many(tape, items)?;
        if self.cfg.normalize {
            l2_normalize(tape, x)
        } else {
            Ok(x)
        }
    }

    /// Frozen-parameter inference.
    pub fn interests<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        history: &[InteractionRecord],
    ) -> Result<InterestSet<T>> {
        let mut tape = Tape::new(params);
        let u = self.forward(&mut tape, history)?;
        Ok(InterestSet {
            vectors: tape.value(u).clone().with_requires_grad(false),
        })
    }

    /// The full candidate matrix `[|X|×d]` in the form used for scoring.
    pub fn item_matrix<T: Scalar>(&self, params: &ParamStore<T>) -> Result<Tensor<T>> {
        let table = params.get(self.item_table());
        if !self.cfg.normalize {
            return Ok(table.clone().with_requires_grad(false));
        }
        let mut tape = Tape::new(params);
        let x = tape.leaf(table.clone().with_requires_grad(false));
        let x = l2_normalize(&mut tape, x)?;
        Ok(tape.value(x).clone())
    }
}

/// A network together with its parameter values.
#[derive(Clone, Debug)]
pub struct Model<T: Scalar> {
    pub net: Network,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let net = Network::new(&mut params, cfg, seed)?;
        Ok(Model { net, params })
    }

    pub fn config(&self) -> &ModelConfig {
        self.net.config()
    }

    pub fn interests(&self, history: &[InteractionRecord]) -> Result<InterestSet<T>> {
        self.net.interests(&self.params, history)
    }

    pub fn item_matrix(&self) -> Result<Tensor<T>> {
        self.net.item_matrix(&self.params)
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            net: self.net.clone(),
            params: self.params.cast(),
        }
    }
}
