//! Train a small hybrid on associative recall and watch eval accuracy.
//!
//! cargo run --release --example train_mqar -- [steps]

use otce::harness::{train, TrainConfig};

fn main() -> otce::Result<()> {
    let steps: u64 = std::env::args()
        .nth(1)
        .map(|s| s.parse().expect("steps"))
        .unwrap_or(200);
    let cfg = TrainConfig::default().apply(&format!(
        "steps = {steps}\neval_every = {}\nlr_scale = 0.1\ntask.seq_len = 64\ntask.n_queries = 8\nwall_time = true",
        (steps / 4).max(1)
    ))?;
    println!(
        "{} layers ({}), d_model {}, {} steps",
        cfg.model.n_layers(),
        cfg.model.layout,
        cfg.model.d_model,
        steps
    );
    let mut out = std::io::stdout();
    let o = train::<f32>(&cfg, Some(&mut out))?;
    let last = o.records.last().expect("at least one record");
    println!(
        "{} params, final eval loss {:.3} (chance {:.3}), accuracy {:.3}",
        o.model.num_params(),
        last.eval_loss,
        ((cfg.task.vocab_size - 1) as f64 / 2.0).ln(),
        last.task_accuracy
    );
    Ok(())
}
