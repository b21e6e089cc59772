//! Prints how a history is split into pooled and raw tokens, and the attention
//! work of the compressed 256-item path against a raw 64-item path.
//!
//! `cargo run --release --example compression_layout -- [history_len ...]`

use seqformer::compression::{CompressionLayout, CostModel, Provenance};

fn main() -> seqformer::Result<()> {
    let lens: Vec<usize> = std::env::args().skip(1).map(|s| s.parse().expect("length")).collect();
    let lens = if lens.is_empty() { vec![256, 100, 30] } else { lens };
    let layout = CompressionLayout::standard();
    for n in lens {
        let plan = layout.plan(n)?;
        let describe: Vec<String> = plan
            .iter()
            .filter(|s| !matches!(s.provenance, Provenance::Raw { .. }))
            .map(|s| format!("{}..{}", s.start, s.start + s.len))
            .collect();
        let raw = plan.len() - describe.len();
        println!("{n:>3} items -> {:>2} tokens: pooled [{}] + {raw} raw", plan.len(), describe.join(" "));
    }

    println!("\nattention multiply-adds, d=32, k=4");
    println!("{:>2} {:>12} {:>12} {:>12} {:>7}", "L", "raw 64", "backbone", "encoder", "ratio");
    for layers in 1..=6 {
        let cost = CostModel {
            dim: 32,
            backbone_layers: layers,
            encoder_layers: 1,
            query_tokens: 4,
        };
        let raw = CompressionLayout::identity(64).attention_cost(64, &cost)?;
        let compressed = layout.attention_cost(256, &cost)?;
        println!(
            "{layers:>2} {:>12} {:>12} {:>12} {:>7.3}",
            raw.total(),
            compressed.backbone,
            compressed.group_encoder,
            compressed.total() as f64 / raw.total() as f64
        );
    }
    Ok(())
}
