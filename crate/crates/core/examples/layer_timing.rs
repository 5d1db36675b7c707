//! Forward and backward wall time of each layer type at one shape.
//!
//! cargo run --release --example layer_timing -- [batch] [len] [d_model]

use std::time::Instant;

use otce::blocks::{OtceConfig, OtceModel};
use otce::params::Session;

fn time_layout(layout: &str, b: usize, l: usize, d: usize) -> otce::Result<(f64, f64)> {
    let mut cfg = OtceConfig::small(layout, d, 65)?;
    cfg.n_heads = 4;
    cfg.d_state = 8;
    cfg.ffn_hidden = 2 * d;
    cfg.moe_hidden = d;
    let model = OtceModel::<f32>::build(&cfg, 0)?;
    let tokens: Vec<usize> = (0..b * l).map(|i| (i * 7) % 65).collect();
    let mask = vec![true; b * l];
    let reps = 3;
    let (mut fwd, mut bwd) = (0.0, 0.0);
    for _ in 0..reps {
        let t0 = Instant::now();
        let mut s = Session::new(&model.store);
        let loss = model.loss(&mut s, &tokens, &tokens, &mask, b, l)?;
        let t1 = Instant::now();
        let _ = s.backward(loss)?;
        fwd += (t1 - t0).as_secs_f64();
        bwd += t1.elapsed().as_secs_f64();
    }
    Ok((fwd / reps as f64, bwd / reps as f64))
}

fn main() -> otce::Result<()> {
    let args: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let (b, l, d) = (
        args.first().copied().unwrap_or(16),
        args.get(1).copied().unwrap_or(64),
        args.get(2).copied().unwrap_or(64),
    );
    println!("batch {b} len {l} d_model {d}");
    let (base_f, base_b) = time_layout("SM", b, l, d)?;
    println!(
        "{:<6} fwd {:>8.1} ms  bwd {:>8.1} ms",
        "SM",
        base_f * 1e3,
        base_b * 1e3
    );
    for layout in ["SMSM", "SMAM", "SMSE", "SMAE", "SMSM"] {
        let (f, bw) = time_layout(layout, b, l, d)?;
        let tail = &layout[2..];
        println!(
            "{:<6} fwd {:>8.1} ms  bwd {:>8.1} ms",
            format!("+{tail}"),
            (f - base_f) * 1e3,
            (bw - base_b) * 1e3
        );
    }
    Ok(())
}
