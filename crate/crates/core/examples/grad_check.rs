//! Whole-model gradient check against central differences in 64-bit.
//!
//! cargo run --release --example grad_check

use otce::harness::verify::{grad_check_config, model_grad_error};
use otce::positional::RopeMode;

fn main() -> otce::Result<()> {
    for rope in RopeMode::ALL {
        let cfg = grad_check_config(rope)?;
        let err = model_grad_error(&cfg, 3, 1e-5, 1e-6)?;
        println!(
            "SMAM D=8 N=4 rope={:<5} max relative error {err:.2e}",
            rope.name()
        );
    }
    Ok(())
}
