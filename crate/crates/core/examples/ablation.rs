//! Retrains along one axis on the planted world and prints the sweep table.
//!
//! `cargo run --release --example ablation -- [axis] [steps] [value ...]`

use seqformer::ablate::{sweep, AblationAxis};
use seqformer::config::RunConfig;
use seqformer::data::generate;

fn main() -> seqformer::Result<()> {
    let mut args = std::env::args().skip(1);
    let axis: AblationAxis = args.next().unwrap_or_else(|| "query_tokens".into()).parse()?;
    let steps: u64 = args.next().map_or(300, |s| s.parse().expect("steps"));
    let values: Vec<String> = args.collect();
    let values = if values.is_empty() { axis.default_values() } else { values };

    let mut cfg = RunConfig::default();
    cfg.train.steps = steps;
    let (data, _) = generate(&cfg.data)?;
    let report = sweep(&cfg, axis, &values, &data)?;
    print!("{}", report.table());
    Ok(())
}
