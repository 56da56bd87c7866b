//! Short adversarial training run on a tiny generated corpus, printing the
//! objective components as they fall.
//!
//! ```sh
//! cargo run --release --example train_toy
//! ```

use bigraphgan::cli::run_training_steps;
use bigraphgan::data::{load_dataset, make_dataset, Split};
use bigraphgan::net::{LossWeights, ModelConfig, OptimHyper, TrainState, Variant};

fn main() -> bigraphgan::Result<()> {
    let dir = std::env::temp_dir().join("bigraphgan_train_toy");
    make_dataset(8, 2, 11, 32, 32, &dir)?;
    let dataset = load_dataset(&dir)?;
    let train_pairs = dataset.split(Split::Train);

    let cfg = ModelConfig {
        variant: Variant::B6,
        image_h: 32,
        image_w: 32,
        t_blocks: 2,
        channels: 32,
        graph_nodes: 16,
        graph_cprime: 16,
        ..ModelConfig::default()
    };
    let mut state = TrainState::<f32>::new(cfg, OptimHyper::default(), 1)?;
    println!(
        "training b6 on {} pairs, {} generator parameters",
        train_pairs.len(),
        state.gen.scalar_count()
    );

    let weights = LossWeights::default();
    for chunk in 0..6 {
        let upto = (chunk + 1) * 50;
        let records = run_training_steps(&mut state, &train_pairs, upto, 1, &weights)?;
        let last = records.last().unwrap();
        println!(
            "step {:4}  total {:7.4}  l1 {:6.4}  per {:6.4}  gan {:5.3}/{:5.3}  d {:6.4}",
            last.step, last.total, last.l1, last.per, last.gan_app, last.gan_sha, last.d_loss
        );
    }
    Ok(())
}
