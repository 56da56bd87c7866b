//! Pose transfer on one pair: briefly train, then run the generator and dump
//! the fused result, the intermediate image, and the attention mask as PPM
//! files.
//!
//! ```sh
//! cargo run --release --example infer_pair -- out/infer
//! ```

use std::path::PathBuf;

use bigraphgan::cli::run_training_steps;
use bigraphgan::data::{
    from_model_range, hcat_images, heatmap_to_gray, load_dataset, make_dataset, write_ppm, Split,
};
use bigraphgan::net::{
    prepare_sample, run_generator, LossWeights, ModelConfig, OptimHyper, TrainState, Variant,
};

fn main() -> bigraphgan::Result<()> {
    let out: PathBuf = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "out/infer".into())
        .into();
    std::fs::create_dir_all(&out).map_err(|e| bigraphgan::Error::io(out.display().to_string(), e))?;

    let corpus = std::env::temp_dir().join("bigraphgan_infer_pair");
    make_dataset(6, 1, 31, 32, 32, &corpus)?;
    let dataset = load_dataset(&corpus)?;
    let train_pairs = dataset.split(Split::Train);
    let test_pair = dataset.split(Split::Test)[0];

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
    let mut state = TrainState::<f32>::new(cfg.clone(), OptimHyper::default(), 2)?;
    run_training_steps(&mut state, &train_pairs, 200, 1, &LossWeights::default())?;

    let s = prepare_sample::<f32>(&cfg, test_pair);
    let (result, intermediate, attention) =
        run_generator(&cfg, &state.gen, &state.gen_params, &s.i_a, &s.p_a, &s.p_b)?;

    write_ppm(&out.join("result.ppm"), &from_model_range(&result))?;
    write_ppm(&out.join("intermediate.ppm"), &from_model_range(&intermediate))?;
    if let Some(mask) = attention {
        let m = mask.to_f64();
        let plane = 32 * 32;
        let mut data = Vec::with_capacity(3 * plane);
        for _ in 0..3 {
            data.extend_from_slice(m.data());
        }
        let gray = bigraphgan::tensor::Tensor::from_vec(vec![3, 32, 32], data)?;
        write_ppm(&out.join("attention.ppm"), &gray)?;
    }
    let grid = hcat_images(
        &[
            test_pair.image_a.clone(),
            heatmap_to_gray(&s.p_b)?,
            from_model_range(&result),
            test_pair.image_b.clone(),
        ],
        2,
    )?;
    write_ppm(&out.join("grid.ppm"), &grid)?;
    println!(
        "wrote result.ppm, intermediate.ppm, attention.ppm, grid.ppm to {}",
        out.display()
    );
    println!("grid columns: source | target pose | output | target");
    Ok(())
}
