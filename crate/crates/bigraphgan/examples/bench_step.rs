//! Rough timing of one training step at the toy-experiment scale.

use std::time::Instant;

use bigraphgan::data::{synth_identity, synth_pose};
use bigraphgan::net::{
    prepare_sample, train_step, LossWeights, ModelConfig, OptimHyper, TrainState, Variant,
};

fn main() {
    let variant = std::env::args()
        .nth(1)
        .map(|s| Variant::parse(&s).expect("variant"))
        .unwrap_or(Variant::B6);
    let cfg = ModelConfig {
        variant,
        image_h: 64,
        image_w: 64,
        t_blocks: 4,
        channels: 64,
        graph_nodes: 32,
        graph_cprime: 32,
        ..ModelConfig::default()
    };
    let mut state = TrainState::<f32>::new(cfg.clone(), OptimHyper::default(), 1).unwrap();

    let id = synth_identity(1);
    let (skel_a, img_a) = synth_pose(&id, 2, 64, 64);
    let (skel_b, img_b) = synth_pose(&id, 3, 64, 64);
    let pair = bigraphgan::data::SamplePair {
        stem: "bench".into(),
        split: bigraphgan::data::Split::Train,
        image_a: img_a,
        image_b: img_b,
        skel_a,
        skel_b,
    };
    let batch = vec![prepare_sample(&cfg, &pair)];
    let weights = LossWeights::default();

    // warmup
    train_step(&mut state, &batch, &weights).unwrap();
    let n = 10;
    let start = Instant::now();
    for _ in 0..n {
        train_step(&mut state, &batch, &weights).unwrap();
    }
    let dt = start.elapsed().as_secs_f64() / n as f64;
    println!(
        "variant {:?}: {:.3} s/step -> {:.1} min for 2000 steps",
        variant,
        dt,
        dt * 2000.0 / 60.0
    );
}
