//! Trains briefly on the planted world, then retrieves for one evaluation
//! user and shows which interest ranked each item and which planted cluster
//! the item belongs to.
//!
//! `cargo run --release --example retrieve -- [steps] [user_index]`

use std::collections::BTreeMap;

use seqformer::config::RunConfig;
use seqformer::data::{generate, next_item_split, Catalog};
use seqformer::model::score;
use seqformer::retrieval::{retrieve, DepthRule, RetrievalIndex};
use seqformer::train::run;

fn main() -> seqformer::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: u64 = args.next().map_or(600, |s| s.parse().expect("steps"));
    let user: usize = args.next().map_or(0, |s| s.parse().expect("user index"));

    let mut cfg = RunConfig::default();
    cfg.train.steps = steps;
    let (data, truth) = generate(&cfg.data)?;
    let catalog = Catalog::new(&cfg.data)?;
    let (trainer, _) = run(&cfg, &data.train, None, None)?;
    let model = &trainer.model;

    let trace = &data.eval[user];
    let planted = &truth[cfg.data.user_count + user];
    let (history, held_out) = next_item_split(trace, model.config().max_seq_len).expect("trace has two items");
    println!(
        "user {} owns clusters {:?}; held-out item {held_out} is in cluster {}",
        trace.user, planted.owned_clusters, catalog.cluster_of[held_out]
    );

    let interests = model.interests(history)?;
    let items = model.item_matrix()?;
    let index = RetrievalIndex::new(items.clone())?;
    let results = retrieve(&index, &interests, 50, DepthRule::Oversample)?;
    let mut by_interest: BTreeMap<usize, BTreeMap<usize, usize>> = BTreeMap::new();
    for (rank, s) in results.iter().enumerate() {
        let (_, j) = score(items.row(s.id), &interests)?;
        let cluster = catalog.cluster_of[s.id];
        *by_interest.entry(j).or_default().entry(cluster).or_default() += 1;
        if rank < 10 {
            let mark = if s.id == held_out { "  <- held out" } else { "" };
            println!("{:>3}  item {:>5}  cluster {cluster}  interest {j}  score {:.4}{mark}", rank + 1, s.id, s.score);
        }
    }
    println!("top-50 items per interest, by planted cluster:");
    for (j, clusters) in by_interest {
        println!("  interest {j}: {clusters:?}");
    }
    Ok(())
}
