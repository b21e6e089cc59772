//! Synthetic users with several planted interest clusters, the
//! newline-delimited JSON dataset format, example splits and the seeded batch
//! stream.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::embedding::{InteractionLabels, InteractionRecord};
use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// Parameters of the synthetic world. Everything generated is a pure
/// function of this value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldSpec {
    pub item_count: usize,
    pub cluster_count: usize,
    pub user_count: usize,
    pub eval_user_count: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Owned clusters per user, drawn uniformly from this inclusive range.
    pub min_interests: usize,
    pub max_interests: usize,
    /// Per-step chance of switching to another owned cluster.
    pub drift_prob: f64,
    /// Per-step chance of emitting an item from any cluster.
    pub noise_prob: f64,
    pub seed: u64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        WorldSpec {
            item_count: 10_000,
            cluster_count: 8,
            user_count: 2_000,
            eval_user_count: 2_000,
            min_len: 21,
            max_len: 31,
            min_interests: 4,
            max_interests: 4,
            drift_prob: 0.2,
            noise_prob: 0.05,
            seed: 7,
        }
    }
}

const ITEM_STREAM: u64 = u64::MAX;
const CLUSTER_STREAM: u64 = u64::MAX - 1;

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::config(m));
        if self.cluster_count == 0 || self.item_count < self.cluster_count {
            return fail(format!(
                "need 1 ≤ cluster_count ≤ item_count, got {} clusters for {} items",
                self.cluster_count, self.item_count
            ));
        }
        if self.user_count == 0 {
            return fail("user_count must be positive".into());
        }
        if self.min_len < 2 || self.max_len < self.min_len {
            return fail(format!(
                "trace length range {}..={} must start at 2 or more",
                self.min_len, self.max_len
            ));
        }
        if self.min_interests == 0
            || self.max_interests < self.min_interests
            || self.max_interests > self.cluster_count
        {
            return fail(format!(
                "interests per user {}..={} must lie within 1..={}",
                self.min_interests, self.max_interests, self.cluster_count
            ));
        }
        for (name, p) in [("drift_prob", self.drift_prob), ("noise_prob", self.noise_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return fail(format!("{name} must be in [0, 1], got {p}"));
            }
        }
        Ok(())
    }
}

/// Fixed per-item facts: owning cluster and duration in seconds.
#[derive(Clone, Debug, PartialEq)]
pub struct Catalog {
    pub cluster_of: Vec<usize>,
    pub members: Vec<Vec<usize>>,
    pub duration: Vec<f64>,
}

impl Catalog {
    /// Balanced random assignment of items to clusters.
    pub fn new(spec: &WorldSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(CLUSTER_STREAM);
        let mut order: Vec<usize> = (0..spec.item_count).collect();
        order.shuffle(&mut rng);
        let mut cluster_of = vec![0; spec.item_count];
        let mut members = vec![Vec::new(); spec.cluster_count];
        for (rank, &item) in order.iter().enumerate() {
            let c = rank % spec.cluster_count;
            cluster_of[item] = c;
            members[c].push(item);
        }
        members.iter_mut().for_each(|m| m.sort_unstable());
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(ITEM_STREAM);
        let duration = (0..spec.item_count)
            .map(|_| rng.gen_range(5.0..=300.0f64).round())
            .collect();
        Ok(Catalog {
            cluster_of,
            members,
            duration,
        })
    }
}

/// What the model may see: one user's chronological watch events.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UserTrace {
    pub user: u64,
    pub records: Vec<InteractionRecord>,
}

/// Planted structure behind a trace, for diagnostics only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruth {
    pub user: u64,
    pub owned_clusters: Vec<usize>,
    pub active_cluster: Vec<usize>,
    pub noise: Vec<bool>,
}

/// Deterministic trace of user `user`, drawn from its own random stream.
pub fn generate_user(spec: &WorldSpec, catalog: &Catalog, user: u64) -> (UserTrace, GroundTruth) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(user);
    let len = rng.gen_range(spec.min_len..=spec.max_len);
    let owned_count = rng.gen_range(spec.min_interests..=spec.max_interests);
    let mut clusters: Vec<usize> = (0..spec.cluster_count).collect();
    clusters.shuffle(&mut rng);
    let mut owned = clusters[..owned_count].to_vec();
    owned.sort_unstable();

    let mut active = owned[rng.gen_range(0..owned.len())];
    let mut records = Vec::with_capacity(len);
    let mut active_cluster = Vec::with_capacity(len);
    let mut noise = Vec::with_capacity(len);
    for step in 0..len {
        if step > 0 && owned.len() > 1 && rng.gen_bool(spec.drift_prob) {
            let others: Vec<usize> = owned.iter().copied().filter(|&c| c != active).collect();
            active = others[rng.gen_range(0..others.len())];
        }
        let is_noise = rng.gen_bool(spec.noise_prob);
        let item = if is_noise {
            rng.gen_range(0..spec.item_count)
        } else {
            let m = &catalog.members[active];
            m[rng.gen_range(0..m.len())]
        };
        let duration = catalog.duration[item];
        let fraction = if is_noise {
            rng.gen_range(0.0..0.4)
        } else {
            rng.gen_range(0.5..=1.0)
        };
        let engaged = if is_noise { 0.2 } else { 1.0 };
        let labels = InteractionLabels {
            like: rng.gen_bool(0.1 * engaged),
            comment: rng.gen_bool(0.03 * engaged),
            follow: rng.gen_bool(0.01 * engaged),
        };
        records.push(InteractionRecord {
            item_id: item,
            watch_time: (duration * fraction).round().min(duration),
            duration,
            tag_id: catalog.cluster_of[item],
            labels,
        });
        active_cluster.push(active);
        noise.push(is_noise);
    }
    (
        UserTrace { user, records },
        GroundTruth {
            user,
            owned_clusters: owned,
            active_cluster,
            noise,
        },
    )
}

/// Training users `0..user_count` and evaluation users after them.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: WorldSpec,
    pub train: Vec<UserTrace>,
    pub eval: Vec<UserTrace>,
}

pub fn generate(spec: &WorldSpec) -> Result<(Dataset, Vec<GroundTruth>)> {
    let catalog = Catalog::new(spec)?;
    let total = (spec.user_count + spec.eval_user_count) as u64;
    let (traces, truth): (Vec<_>, Vec<_>) = (0..total).map(|u| generate_user(spec, &catalog, u)).unzip();
    let mut traces = traces;
    let eval = traces.split_off(spec.user_count);
    Ok((
        Dataset {
            spec: spec.clone(),
            train: traces,
            eval,
        },
        truth,
    ))
}

/// History (oldest dropped beyond `max_seq_len`) and the final item held out.
pub fn next_item_split(trace: &UserTrace, max_seq_len: usize) -> Option<(&[InteractionRecord], usize)> {
    let n = trace.records.len();
    if n < 2 || max_seq_len == 0 {
        return None;
    }
    let start = (n - 1).saturating_sub(max_seq_len);
    Some((&trace.records[start..n - 1], trace.records[n - 1].item_id))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRequest<'a> {
    pub history: &'a [InteractionRecord],
    pub held_out: usize,
}

/// One request per evaluation trace; traces shorter than 2 are counted and skipped.
pub fn eval_requests(traces: &[UserTrace], max_seq_len: usize) -> (Vec<EvalRequest<'_>>, usize) {
    let mut skipped = 0;
    let requests = traces
        .iter()
        .filter_map(|t| {
            let r = next_item_split(t, max_seq_len);
            if r.is_none() {
                skipped += 1;
            }
            r.map(|(history, held_out)| EvalRequest { history, held_out })
        })
        .collect();
    (requests, skipped)
}

/// A training example: predict `records[target]` of `traces[trace]` from what precedes it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ExampleRef {
    pub trace: u32,
    pub target: u32,
}

/// Every position of every trace with at least `min_history` items before it.
pub fn training_examples(traces: &[UserTrace], min_history: usize) -> Vec<ExampleRef> {
    let min_history = min_history.max(1);
    traces
        .iter()
        .enumerate()
        .flat_map(|(i, t)| {
            (min_history..t.records.len()).map(move |target| ExampleRef {
                trace: i as u32,
                target: target as u32,
            })
        })
        .collect()
}

impl ExampleRef {
    pub fn resolve<'a>(&self, traces: &'a [UserTrace], max_seq_len: usize) -> (&'a [InteractionRecord], usize) {
        let records = &traces[self.trace as usize].records;
        let t = self.target as usize;
        let start = t.saturating_sub(max_seq_len);
        (&records[start..t], records[t].item_id)
    }
}

/// Epoch-aware shuffled batches. Batch `b` of epoch `e` is a pure function of
/// `(seed, e, b)`, so a run can resume at any step.
#[derive(Clone, Debug)]
pub struct BatchStream {
    examples: usize,
    batch_size: usize,
    seed: u64,
    cached_epoch: Option<(u64, Vec<u32>)>,
}

impl BatchStream {
    pub fn new(examples: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size < 2 {
            return Err(Error::config(format!("batch size must be at least 2, got {batch_size}")));
        }
        if examples < batch_size {
            return Err(Error::data(format!(
                "{examples} examples cannot fill a batch of {batch_size}"
            )));
        }
        Ok(BatchStream {
            examples,
            batch_size,
            seed,
            cached_epoch: None,
        })
    }

    /// Full batches per epoch; leftover examples join the last batch.
    pub fn batches_per_epoch(&self) -> u64 {
        (self.examples / self.batch_size) as u64
    }

    pub fn position(&self, step: u64) -> (u64, u64) {
        (step / self.batches_per_epoch(), step % self.batches_per_epoch())
    }

    pub fn epoch_order(&self, epoch: u64) -> Vec<u32> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch);
        let mut order: Vec<u32> = (0..self.examples as u32).collect();
        order.shuffle(&mut rng);
        order
    }

    /// Example indices of global step `step` (0-based).
    pub fn batch(&mut self, step: u64) -> Vec<usize> {
        let (epoch, b) = self.position(step);
        if self.cached_epoch.as_ref().is_none_or(|(e, _)| *e != epoch) {
            self.cached_epoch = Some((epoch, self.epoch_order(epoch)));
        }
        let order = &self.cached_epoch.as_ref().expect("just cached").1;
        let start = b as usize * self.batch_size;
        let end = if b + 1 == self.batches_per_epoch() {
            self.examples
        } else {
            start + self.batch_size
        };
        order[start..end].iter().map(|&i| i as usize).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub config_hash: String,
    pub spec: WorldSpec,
    pub train_traces: usize,
    pub eval_traces: usize,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TRAIN_FILE: &str = "train.ndjson";
pub const EVAL_FILE: &str = "eval.ndjson";
pub const TRUTH_FILE: &str = "truth.ndjson";

fn write_ndjson<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for row in rows {
        serde_json::to_writer(&mut w, row)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_ndjson<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row = serde_json::from_str(&line)
            .map_err(|e| Error::data(format!("{}:{}: {e}", path.display(), n + 1)))?;
        rows.push(row);
    }
    Ok(rows)
}

/// Writes traces, ground truth and a manifest stamped with `config_hash` into `dir`.
pub fn write_dataset(dir: &Path, data: &Dataset, truth: &[GroundTruth], config_hash: &str) -> Result<DatasetManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_ndjson(&dir.join(TRAIN_FILE), &data.train)?;
    write_ndjson(&dir.join(EVAL_FILE), &data.eval)?;
    write_ndjson(&dir.join(TRUTH_FILE), truth)?;
    let manifest = DatasetManifest {
        schema_version: SCHEMA_VERSION,
        config_hash: config_hash.to_string(),
        spec: data.spec.clone(),
        train_traces: data.train.len(),
        eval_traces: data.eval.len(),
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(Error::data(format!(
            "dataset schema version {} is not the supported {SCHEMA_VERSION}",
            manifest.schema_version
        )));
    }
    Ok(manifest)
}

/// Loads a dataset directory, checking it against its manifest.
pub fn read_dataset(dir: &Path) -> Result<(DatasetManifest, Dataset)> {
    let manifest = read_manifest(dir)?;
    let train: Vec<UserTrace> = read_ndjson(&dir.join(TRAIN_FILE))?;
    let eval: Vec<UserTrace> = read_ndjson(&dir.join(EVAL_FILE))?;
    if train.len() != manifest.train_traces || eval.len() != manifest.eval_traces {
        return Err(Error::data(format!(
            "manifest lists {}+{} traces but files hold {}+{}",
            manifest.train_traces,
            manifest.eval_traces,
            train.len(),
            eval.len()
        )));
    }
    let spec = &manifest.spec;
    for r in train.iter().chain(&eval).flat_map(|t| &t.records) {
        r.validate(spec.item_count, spec.cluster_count)?;
    }
    let data = Dataset {
        spec: manifest.spec.clone(),
        train,
        eval,
    };
    Ok((manifest, data))
}
