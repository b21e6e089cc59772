//! Generates the default planted-interest world, writes it to a directory and
//! shows one user's planted structure next to their trace.
//!
//! `cargo run --release --example gen_data -- [out_dir]`

use seqformer::config::RunConfig;
use seqformer::data::{generate, training_examples, write_dataset};

fn main() -> seqformer::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "data/example".into());
    let cfg = RunConfig::default();
    let (data, truth) = generate(&cfg.data)?;
    let manifest = write_dataset(out.as_ref(), &data, &truth, &cfg.data_hash())?;
    println!(
        "{} training traces, {} evaluation traces, {} training examples -> {out} (data hash {})",
        manifest.train_traces,
        manifest.eval_traces,
        training_examples(&data.train, cfg.train.min_history).len(),
        manifest.config_hash
    );

    let (trace, planted) = (&data.train[0], &truth[0]);
    println!("user {} owns clusters {:?}", trace.user, planted.owned_clusters);
    for (i, r) in trace.records.iter().enumerate() {
        println!(
            "{i:>3}  item {:>5}  tag {}  active {}  watched {:>3}/{:<3}{}",
            r.item_id,
            r.tag_id,
            planted.active_cluster[i],
            r.watch_time,
            r.duration,
            if planted.noise[i] { "  noise" } else { "" }
        );
    }
    Ok(())
}
