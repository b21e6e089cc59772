//! Central-difference check of the whole training objective on a tiny model,
//! at two step sizes. A correct gradient leaves only the O(h²) term, so the
//! discrepancy falls about a hundredfold per tenfold smaller step.
//!
//! `cargo run --release --example gradient_check`

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use seqformer::autograd::check_param_gradients;
use seqformer::compression::{CompressionLayout, Window};
use seqformer::embedding::{InteractionLabels, InteractionRecord};
use seqformer::model::{Model, ModelConfig};
use seqformer::train::batch_objective;

fn main() -> seqformer::Result<()> {
    let cfg = ModelConfig {
        dim: 8,
        layers: 2,
        heads: 2,
        interests: 4,
        max_seq_len: 20,
        compression: CompressionLayout {
            windows: vec![Window { size: 4, count: 2 }, Window { size: 2, count: 2 }],
            raw_tail: 8,
        },
        item_vocab: 40,
        tag_vocab: 4,
        ..ModelConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let histories: Vec<Vec<InteractionRecord>> = (0..3)
        .map(|_| {
            (0..20)
                .map(|_| InteractionRecord {
                    item_id: rng.gen_range(0..40),
                    watch_time: rng.gen_range(0.0..60.0f64).round(),
                    duration: 60.0,
                    tag_id: rng.gen_range(0..4),
                    labels: InteractionLabels::default(),
                })
                .collect()
        })
        .collect();
    let batch: Vec<_> = histories.iter().map(|h| h.as_slice()).zip([3, 17, 29]).collect();
    let q = [0.2, 0.05, 0.5];

    for h in [1e-2, 1e-3, 1e-4] {
        let mut model = Model::<f64>::new(cfg.clone(), 11)?;
        let net = model.net.clone();
        let report = check_param_gradients(
            &mut model.params,
            |t| Ok(batch_objective(t, &net, &batch, Some(&q), 0.1)?.loss),
            h,
        )?;
        println!(
            "h={h:.0e}: {} coordinates, max relative error {:.2e}, max normwise error {:.2e}",
            report.coordinates, report.max_rel_error, report.max_normwise_error
        );
        if let Some(w) = report.worst {
            println!("  worst at {}[{}]: analytic {:.6e}, numeric {:.6e}", w.tensor, w.index, w.analytic, w.numeric);
        }
    }
    Ok(())
}
