//! One selective SSM layer: convolution or rotary variant, exact or Euler
//! discretisation, and step-by-step decoding from a carried state.
//!
//! cargo run --release --example selective_scan

use std::sync::Arc;

use otce::params::{ParamStore, Session};
use otce::positional::{PosCtx, RopeTable, DEFAULT_BASE};
use otce::ssm::{Discretization, SsmConfig, SsmLayer};
use otce::tensor::{rng, Tensor};

fn run(cfg: &SsmConfig, x: &Tensor<f64>) -> otce::Result<Tensor<f64>> {
    let mut store = ParamStore::<f64>::new();
    let table = cfg
        .rope
        .then(|| RopeTable::new(cfg.d_state, 64, DEFAULT_BASE).map(Arc::new))
        .transpose()?;
    let layer = SsmLayer::init(&mut store, "ssm", cfg, table, 1.0, &mut rng(4))?;
    let mut s = Session::new(&store);
    let xv = s.g.constant(x.clone());
    let y = layer.forward(&mut s, xv, &PosCtx::new(x.shape()[1]))?;
    Ok(s.g.value(y).clone())
}

fn main() -> otce::Result<()> {
    let x = Tensor::<f64>::randn([1, 12, 16], 1.0, &mut rng(9));
    for rope in [false, true] {
        let mut cfg = SsmConfig::new(16, 8, rope);
        println!(
            "rope={rope:<5} inner width {} dt_rank {} conv {} skip {} params {}",
            cfg.inner(),
            cfg.dt_rank,
            cfg.conv_width,
            cfg.d_skip,
            cfg.param_count()
        );
        let exact = run(&cfg, &x)?;
        cfg.discretization = Discretization::Euler;
        let euler = run(&cfg, &x)?;
        println!(
            "  output {:?}, exact vs Euler max |diff| {:.2e}",
            exact.shape(),
            exact.max_abs_diff(&euler)
        );
    }
    Ok(())
}
