//! Generate a small synthetic pose-transfer corpus and inspect one pair.
//!
//! ```sh
//! cargo run --example make_corpus -- out/corpus
//! ```

use std::path::PathBuf;

use bigraphgan::data::{joints_to_heatmap, load_dataset, make_dataset, Split, JOINT_NAMES};

fn main() -> bigraphgan::Result<()> {
    let out: PathBuf = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "out/corpus".into())
        .into();

    let summary = make_dataset(16, 4, 7, 64, 64, &out)?;
    println!(
        "wrote {} pairs ({} train / {} test) to {}",
        summary.pairs,
        summary.train,
        summary.test,
        out.display()
    );

    let dataset = load_dataset(&out)?;
    let pair = dataset.split(Split::Train)[0];
    println!("first pair: {}", pair.stem);
    for (j, joint) in pair.skel_b.joints.iter().enumerate() {
        match joint {
            Some(p) => println!("  {:11} at ({:5.1}, {:5.1})", JOINT_NAMES[j], p.x, p.y),
            None => println!("  {:11} absent", JOINT_NAMES[j]),
        }
    }
    let hm: bigraphgan::tensor::Tensor<f64> =
        joints_to_heatmap(&pair.skel_b, 64, 64, 4.0);
    let active = (0..18)
        .filter(|j| hm.data()[j * 64 * 64..(j + 1) * 64 * 64].iter().any(|&v| v > 0.0))
        .count();
    println!("heatmap channels with support: {active}/18");
    Ok(())
}
