//! Save a model, reload it and compare logits.
//!
//! cargo run --release --example checkpoint_roundtrip

use otce::blocks::{OtceConfig, OtceModel};
use otce::checkpoint;

fn main() -> otce::Result<()> {
    let cfg = OtceConfig::small("SMSEAM", 16, 32)?;
    let model = OtceModel::<f32>::build(&cfg, 5)?;
    let dir = std::env::temp_dir().join("otce-checkpoint-example");
    checkpoint::save(&model, &dir)?;
    let manifest = std::fs::read_to_string(dir.join("manifest.txt"))?;
    for line in manifest.lines().filter(|l| l.starts_with("tensor")).take(4) {
        println!("{line}");
    }
    println!("...");
    let back = checkpoint::load::<f32>(&dir)?;
    let toks = [3, 1, 4, 1, 5, 9, 2, 6];
    let diff = model
        .logits(&toks, 1, 8)?
        .max_abs_diff(&back.logits(&toks, 1, 8)?);
    println!(
        "{} parameters reloaded, max logit difference {diff}",
        back.num_params()
    );
    std::fs::remove_dir_all(&dir)?;
    Ok(())
}
