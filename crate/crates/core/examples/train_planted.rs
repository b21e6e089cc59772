//! Generates a planted-interest world, trains for a few hundred steps and
//! prints the loss curve and hit rates.
//!
//! `cargo run --release --example train_planted -- [steps] [key.path=value ...]`

use std::time::Instant;

use seqformer::config::RunConfig;
use seqformer::data::{eval_requests, generate};
use seqformer::eval::hit_rate;
use seqformer::retrieval::RetrievalIndex;
use seqformer::train::{moving_average, Trainer};

fn main() -> seqformer::Result<()> {
    env_logger::init();
    let mut args = std::env::args().skip(1);
    let steps: u64 = args.next().map_or(300, |s| s.parse().expect("steps"));
    let overrides: Vec<String> = args.collect();

    let mut cfg = RunConfig::default().with_overrides(&overrides)?;
    cfg.train.steps = steps;
    let interests = cfg.model.interests;

    let (data, _truth) = generate(&cfg.data)?;
    let mut trainer = Trainer::new(&cfg, &data.train)?;
    println!("{} training examples", trainer.example_count());

    let start = Instant::now();
    let mut losses = Vec::new();
    while trainer.step < steps {
        let m = trainer.step(&data.train)?;
        losses.push(m.loss);
        if m.step % 20 == 0 {
            println!(
                "step {:>5}  loss {:.4}  acc {:.3}  {:.1}s",
                m.step,
                m.loss,
                m.accuracy,
                start.elapsed().as_secs_f64()
            );
        }
    }
    let head = &losses[..losses.len().min(200)];
    let ma = moving_average(head, 20);
    let rises = ma.windows(2).filter(|w| w[1] >= w[0]).count();
    if let (Some(first), Some(last)) = (ma.first(), ma.last()) {
        println!("20-step loss average over the first 200 steps: {first:.4} -> {last:.4}, {rises} non-decreasing moves");
    }

    let (requests, _) = eval_requests(&data.eval, cfg.model.max_seq_len);
    let index = RetrievalIndex::new(trainer.model.item_matrix()?)?;
    let report = hit_rate(&trainer.model, &index, &requests, &cfg.eval, &cfg.hash())?;
    print!("{}", report.table(&format!("k={interests}")));
    Ok(())
}
