//! Export the seeded perceptual-extractor weights as a container file. The
//! file doubles as a template: edit or regenerate the tensors and point a
//! run configuration at it via `perceptual_weights = "..."`.
//!
//! ```sh
//! cargo run --example export_perceptual -- out/perceptual.bgg
//! ```

use std::path::PathBuf;

use bigraphgan::checkpoint::{load_perceptual, save_perceptual};
use bigraphgan::net::PerceptualNet;

fn main() -> bigraphgan::Result<()> {
    let out: PathBuf = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "out/perceptual.bgg".into())
        .into();
    if let Some(parent) = out.parent() {
        std::fs::create_dir_all(parent)
            .map_err(|e| bigraphgan::Error::io(parent.display().to_string(), e))?;
    }

    let channels = 64;
    let per = PerceptualNet::<f32>::init(channels)?;
    save_perceptual(&out, &per, channels)?;
    println!("wrote {}", out.display());

    let tensors = load_perceptual::<f32>(&out)?;
    for (name, t) in &tensors {
        println!("  {name}: {:?}", t.shape());
    }
    Ok(())
}
