//! Pixel metrics on a generated corpus: SSIM, Mask-SSIM, and PSNR for the
//! two reference baselines (ground truth against itself, and copying the
//! source image).
//!
//! ```sh
//! cargo run --example evaluate
//! ```

use bigraphgan::cli::EVAL_MASK_MARGIN;
use bigraphgan::data::{load_dataset, make_dataset, Split};
use bigraphgan::metrics::{masked_ssim, pose_mask, psnr, ssim, MetricReport};

fn main() -> bigraphgan::Result<()> {
    let dir = std::env::temp_dir().join("bigraphgan_evaluate");
    make_dataset(24, 8, 21, 64, 64, &dir)?;
    let dataset = load_dataset(&dir)?;
    let pairs = dataset.split(Split::Test);

    for (label, use_target) in [("ground truth vs itself", true), ("copy-source baseline", false)] {
        let mut report = MetricReport::default();
        for pair in &pairs {
            let pred = if use_target {
                &pair.image_b
            } else {
                &pair.image_a
            };
            let mask = pose_mask(&pair.skel_b, 64, 64, EVAL_MASK_MARGIN);
            report.push(
                pair.stem.clone(),
                ssim(pred, &pair.image_b)?,
                masked_ssim(pred, &pair.image_b, &mask)?,
                psnr(pred, &pair.image_b)?,
            );
        }
        println!("{label} ({} samples):", report.len());
        print!("{}", report.summary_lines());
    }
    Ok(())
}
