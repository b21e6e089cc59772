//! Sweeps that retrain one model per value of a single configuration axis and
//! tabulate in-batch accuracy and hit rates.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::compression::CompressionLayout;
use crate::config::RunConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::{evaluate, HitRate};
use crate::train::run;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    /// Longest history fed to the model, uncompressed.
    SeqLen,
    /// Number of query tokens `k`.
    QueryTokens,
    /// Backbone depth `L`.
    Layers,
    /// `raw64`, `raw256` or `compressed256`.
    Compression,
}

impl AblationAxis {
    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::SeqLen => "seq_len",
            AblationAxis::QueryTokens => "query_tokens",
            AblationAxis::Layers => "layers",
            AblationAxis::Compression => "compression",
        }
    }

    pub fn default_values(self) -> Vec<String> {
        let v: &[&str] = match self {
            AblationAxis::SeqLen => &["8", "16", "32", "64", "128", "256"],
            AblationAxis::QueryTokens => &["1", "2", "3", "4"],
            AblationAxis::Layers => &["1", "2", "3", "4"],
            AblationAxis::Compression => &COMPRESSION_VARIANTS,
        };
        v.iter().map(|s| s.to_string()).collect()
    }
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "seq_len" => Ok(AblationAxis::SeqLen),
            "query_tokens" => Ok(AblationAxis::QueryTokens),
            "layers" => Ok(AblationAxis::Layers),
            "compression" => Ok(AblationAxis::Compression),
            _ => Err(Error::config(format!(
                "unknown ablation axis `{s}` (expected seq_len, query_tokens, layers or compression)"
            ))),
        }
    }
}

pub const COMPRESSION_VARIANTS: [&str; 3] = ["raw64", "raw256", "compressed256"];

fn parse_count(axis: AblationAxis, value: &str) -> Result<usize> {
    value
        .parse()
        .map_err(|_| Error::config(format!("{axis} value `{value}` is not a positive integer")))
}

/// `base` with one axis set to `value`.
pub fn variant(base: &RunConfig, axis: AblationAxis, value: &str) -> Result<RunConfig> {
    let mut cfg = base.clone();
    match axis {
        AblationAxis::SeqLen => {
            let n = parse_count(axis, value)?;
            cfg.model.max_seq_len = n;
            cfg.model.compression = CompressionLayout::identity(n);
        }
        AblationAxis::QueryTokens => cfg.model.interests = parse_count(axis, value)?,
        AblationAxis::Layers => cfg.model.layers = parse_count(axis, value)?,
        AblationAxis::Compression => {
            let (len, layout) = match value {
                "raw64" => (64, CompressionLayout::identity(64)),
                "raw256" => (256, CompressionLayout::identity(256)),
                "compressed256" => (256, CompressionLayout::standard()),
                _ => {
                    return Err(Error::config(format!(
                        "compression value `{value}` is not one of {}",
                        COMPRESSION_VARIANTS.join(", ")
                    )))
                }
            };
            cfg.model.max_seq_len = len;
            cfg.model.compression = layout;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: String,
    pub config_hash: String,
    /// Mean in-batch accuracy over the last tenth of training.
    pub in_batch_accuracy: f64,
    pub final_loss: f64,
    pub hit_rates: Vec<HitRate>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub axis: AblationAxis,
    pub base_config_hash: String,
    pub points: Vec<SweepPoint>,
}

impl SweepReport {
    pub fn table(&self) -> String {
        let mut out = format!("{:<16}{:>12}{:>10}", self.axis.name(), "accuracy", "loss");
        let cutoffs: Vec<usize> = self.points.first().map_or(Vec::new(), |p| p.hit_rates.iter().map(|h| h.k).collect());
        for k in &cutoffs {
            let _ = write!(out, "{:>10}", format!("HR@{k}"));
        }
        out.push('\n');
        for p in &self.points {
            let _ = write!(out, "{:<16}{:>12.4}{:>10.4}", p.value, p.in_batch_accuracy, p.final_loss);
            for h in &p.hit_rates {
                let _ = write!(out, "{:>10.4}", h.rate);
            }
            out.push('\n');
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{},in_batch_accuracy,final_loss", self.axis.name());
        let cutoffs: Vec<usize> = self.points.first().map_or(Vec::new(), |p| p.hit_rates.iter().map(|h| h.k).collect());
        for k in &cutoffs {
            let _ = write!(out, ",hr_at_{k}");
        }
        out.push('\n');
        for p in &self.points {
            let _ = write!(out, "{},{},{}", p.value, p.in_batch_accuracy, p.final_loss);
            for h in &p.hit_rates {
                let _ = write!(out, ",{}", h.rate);
            }
            out.push('\n');
        }
        out
    }
}

/// Trains and evaluates one model per value, in the given order, all with the
/// base seed.
pub fn sweep(base: &RunConfig, axis: AblationAxis, values: &[String], data: &Dataset) -> Result<SweepReport> {
    if values.is_empty() {
        return Err(Error::config("an ablation needs at least one value"));
    }
    let mut points = Vec::with_capacity(values.len());
    for value in values {
        let cfg = variant(base, axis, value)?;
        log::info!("{axis}={value}: training {} steps", cfg.train.steps);
        let (trainer, metrics) = run(&cfg, &data.train, None, None)?;
        let tail = (metrics.len() / 10).max(1).min(metrics.len());
        let last = &metrics[metrics.len() - tail..];
        let in_batch_accuracy = last.iter().map(|m| m.accuracy).sum::<f64>() / tail.max(1) as f64;
        let final_loss = last.iter().map(|m| m.loss).sum::<f64>() / tail.max(1) as f64;
        let report = evaluate(&trainer.model, &data.eval, &cfg.eval, &cfg.hash())?;
        points.push(SweepPoint {
            value: value.clone(),
            config_hash: cfg.hash(),
            in_batch_accuracy,
            final_loss,
            hit_rates: report.hit_rates,
        });
    }
    Ok(SweepReport {
        axis,
        base_config_hash: base.hash(),
        points,
    })
}
