//! Rope-mode ablation: one model per mode, same seed and data order, ranked
//! by eval loss.
//!
//! cargo run --release --example ablation -- [steps]

use otce::harness::{ablate, render_ablation, Axis, TrainConfig};

fn main() -> otce::Result<()> {
    let steps: u64 = std::env::args()
        .nth(1)
        .map(|s| s.parse().expect("steps"))
        .unwrap_or(60);
    let cfg = TrainConfig::default().apply(&format!(
        "steps = {steps}\neval_every = {steps}\nlr_scale = 0.1\nmodel.layout = SMAM\ntask.seq_len = 32\ntask.n_pairs = 4\ntask.n_queries = 4"
    ))?;
    let rows = ablate(&cfg, Axis::RopeMode)?;
    print!("{}", render_ablation("rope_mode", &rows));
    Ok(())
}
