//! Item tokens: id and side-attribute lookups fused by one affine layer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Side attributes a token can be built from, in the order they are concatenated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attribute {
    WatchTime,
    Duration,
    Tag,
    Labels,
}

impl Attribute {
    pub fn name(self) -> &'static str {
        match self {
            Attribute::WatchTime => "watch_time",
            Attribute::Duration => "duration",
            Attribute::Tag => "tag",
            Attribute::Labels => "labels",
        }
    }
}

/// Uniform bucketing of a nonnegative continuous attribute.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BucketSpec {
    pub max_value: f64,
    pub bucket_count: usize,
}

impl BucketSpec {
    pub fn new(max_value: f64, bucket_count: usize) -> Result<Self> {
        let spec = BucketSpec {
            max_value,
            bucket_count,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.max_value.is_finite() && self.max_value > 0.0) || self.bucket_count == 0 {
            return Err(Error::config(format!("invalid bucket spec {self:?}")));
        }
        Ok(())
    }

    /// `int(min(v, max)/max · count)`, clamped to the last bucket.
    pub fn bucketize(&self, value: f64) -> Result<usize> {
        if !value.is_finite() || value < 0.0 {
            return Err(Error::contract(format!(
                "bucketize needs a finite nonnegative value, got {value}"
            )));
        }
        let raw = (value.min(self.max_value) / self.max_value * self.bucket_count as f64) as usize;
        Ok(raw.min(self.bucket_count - 1))
    }
}

/// Binary engagement flags attached to one watch event.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InteractionLabels {
    pub like: bool,
    pub comment: bool,
    pub follow: bool,
}

impl InteractionLabels {
    pub const COUNT: usize = 3;

    pub fn active(&self) -> impl Iterator<Item = usize> {
        [self.like, self.comment, self.follow]
            .into_iter()
            .enumerate()
            .filter_map(|(i, on)| on.then_some(i))
    }
}

/// One positively watched item with its side information.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InteractionRecord {
    pub item_id: usize,
    pub watch_time: f64,
    pub duration: f64,
    pub tag_id: usize,
    #[serde(default)]
    pub labels: InteractionLabels,
}

impl InteractionRecord {
    pub fn validate(&self, item_vocab: usize, tag_vocab: usize) -> Result<()> {
        if self.item_id >= item_vocab {
            return Err(Error::data(format!(
                "item id {} outside vocabulary of {item_vocab}",
                self.item_id
            )));
        }
        if self.tag_id >= tag_vocab {
            return Err(Error::data(format!("tag id {} outside {tag_vocab} tags", self.tag_id)));
        }
        for (name, v) in [("watch_time", self.watch_time), ("duration", self.duration)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::data(format!("{name} must be finite and nonnegative, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct EmbeddingTable {
    pub name: String,
    pub id: ParamId,
    pub rows: usize,
    pub dim: usize,
}

impl EmbeddingTable {
    /// Registers a table initialized uniformly in `[-1/√d, 1/√d]`.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        rows: usize,
        dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let bound = 1.0 / (dim as f64).sqrt();
        let data = (0..rows * dim)
            .map(|_| T::of(rng.gen_range(-bound..bound)))
            .collect();
        let id = store.add(name, Tensor::matrix(rows, dim, data)?)?;
        Ok(EmbeddingTable {
            name: name.to_string(),
            id,
            rows,
            dim,
        })
    }

    /// Single row as a `[d]` vector.
    pub fn lookup<T: Scalar>(&self, tape: &mut Tape<'_, T>, id: usize) -> Result<Var> {
        let v = self.lookup_many(tape, &[id])?;
        tape.reshape(v, vec![self.dim])
    }

    /// Rows `ids` as an `[n×d]` matrix.
    pub fn lookup_many<T: Scalar>(&self, tape: &mut Tape<'_, T>, ids: &[usize]) -> Result<Var> {
        tape.gather(self.id, ids)
    }
}

/// `activation([item, attrs...] · W + b)` with W of shape `[(1+|F|)·d × d]`.
pub fn fuse_token<T: Scalar>(
    tape: &mut Tape<'_, T>,
    item_emb: Var,
    attr_embs: &[Var],
    weight: Var,
    bias: Var,
) -> Result<Var> {
    let d = tape.value(item_emb).cols();
    let expect_in = (1 + attr_embs.len()) * d;
    let (w_in, w_out) = tape.value(weight).dims2();
    if w_in != expect_in || w_out != d {
        return Err(Error::Shape {
            op: "fuse_token",
            lhs: vec![expect_in, d],
            rhs: tape.value(weight).shape().to_vec(),
        });
    }
    for &a in attr_embs {
        if tape.value(a).dims2() != tape.value(item_emb).dims2() {
            return Err(Error::Shape {
                op: "fuse_token",
                lhs: tape.value(item_emb).shape().to_vec(),
                rhs: tape.value(a).shape().to_vec(),
            });
        }
    }
    let mut parts = Vec::with_capacity(1 + attr_embs.len());
    parts.push(item_emb);
    parts.extend_from_slice(attr_embs);
    let x = tape.concat_cols(&parts)?;
    let h = tape.matmul(x, weight)?;
    let h = tape.add_row(h, bias)?;
    Ok(tape.silu(h))
}

/// Parameter handles for the whole token pipeline.
#[derive(Clone, Debug)]
pub struct TokenEmbedder {
    pub item: EmbeddingTable,
    attributes: Vec<(Attribute, EmbeddingTable)>,
    pub watch_time_buckets: BucketSpec,
    pub duration_buckets: BucketSpec,
    pub fuse_weight: ParamId,
    pub fuse_bias: ParamId,
    dim: usize,
    tag_vocab: usize,
}

pub struct EmbedderShape<'a> {
    pub dim: usize,
    pub item_vocab: usize,
    pub tag_vocab: usize,
    pub attributes: &'a [Attribute],
    pub watch_time_buckets: &'a BucketSpec,
    pub duration_buckets: &'a BucketSpec,
}

impl TokenEmbedder {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        shape: &EmbedderShape<'_>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let d = shape.dim;
        for (i, a) in shape.attributes.iter().enumerate() {
            if shape.attributes[..i].contains(a) {
                return Err(Error::config(format!("attribute `{}` listed twice", a.name())));
            }
        }
        shape.watch_time_buckets.validate()?;
        shape.duration_buckets.validate()?;
        let item = EmbeddingTable::new(store, "embed.item", shape.item_vocab, d, rng)?;
        let mut attributes = Vec::new();
        for &a in shape.attributes {
            let rows = match a {
                Attribute::WatchTime => shape.watch_time_buckets.bucket_count,
                Attribute::Duration => shape.duration_buckets.bucket_count,
                Attribute::Tag => shape.tag_vocab,
                Attribute::Labels => InteractionLabels::COUNT,
            };
            let table = EmbeddingTable::new(store, &format!("embed.{}", a.name()), rows, d, rng)?;
            attributes.push((a, table));
        }
        let fan_in = (1 + attributes.len()) * d;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = (0..fan_in * d)
            .map(|_| T::of(rng.gen_range(-bound..bound)))
            .collect();
        let fuse_weight = store.add("fuse.weight", Tensor::matrix(fan_in, d, w)?)?;
        let fuse_bias = store.add("fuse.bias", Tensor::zeros(vec![d]))?;
        Ok(TokenEmbedder {
            item,
            attributes,
            watch_time_buckets: shape.watch_time_buckets.clone(),
            duration_buckets: shape.duration_buckets.clone(),
            fuse_weight,
            fuse_bias,
            dim: d,
            tag_vocab: shape.tag_vocab,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn attributes(&self) -> impl Iterator<Item = Attribute> + '_ {
        self.attributes.iter().map(|(a, _)| *a)
    }

    /// Fused tokens `[n×d]` for a chronological list of records.
    pub fn tokens<T: Scalar>(&self, tape: &mut Tape<'_, T>, records: &[InteractionRecord]) -> Result<Var> {
        if records.is_empty() {
            return Err(Error::contract("cannot embed an empty record list"));
        }
        for r in records {
            r.validate(self.item.rows, self.tag_vocab)?;
        }
        let ids: Vec<usize> = records.iter().map(|r| r.item_id).collect();
        let item = self.item.lookup_many(tape, &ids)?;
        let mut attrs = Vec::with_capacity(self.attributes.len());
        for (a, table) in &self.attributes {
            let v = match a {
                Attribute::WatchTime => {
                    let b = records
                        .iter()
                        .map(|r| self.watch_time_buckets.bucketize(r.watch_time))
                        .collect::<Result<Vec<_>>>()?;
                    table.lookup_many(tape, &b)?
                }
                Attribute::Duration => {
                    let b = records
                        .iter()
                        .map(|r| self.duration_buckets.bucketize(r.duration))
                        .collect::<Result<Vec<_>>>()?;
                    table.lookup_many(tape, &b)?
                }
                Attribute::Tag => {
                    let t: Vec<usize> = records.iter().map(|r| r.tag_id).collect();
                    table.lookup_many(tape, &t)?
                }
                Attribute::Labels => {
                    let mut ids = Vec::new();
                    let mut offsets = vec![0];
                    for r in records {
                        ids.extend(r.labels.active());
                        offsets.push(ids.len());
                    }
                    tape.gather_sum(table.id, ids, offsets)?
                }
            };
            attrs.push(v);
        }
        let w = tape.param(self.fuse_weight);
        let b = tape.param(self.fuse_bias);
        fuse_token(tape, item, &attrs, w, b)
    }
}
