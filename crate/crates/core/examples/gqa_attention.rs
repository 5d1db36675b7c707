//! Grouped-query attention with rotary positions, plus the cost model.
//!
//! cargo run --release --example gqa_attention

use std::sync::Arc;

use otce::attention::{attention_cost, AttnConfig, AttnLayer};
use otce::params::ParamStore;
use otce::positional::{RopeTable, DEFAULT_BASE};
use otce::tensor::{rng, Tensor};

fn main() -> otce::Result<()> {
    let cfg = AttnConfig {
        d_model: 32,
        n_heads: 8,
        n_kv_groups: 2,
        rope: true,
    };
    let mut store = ParamStore::<f64>::new();
    let table = Arc::new(RopeTable::new(cfg.head_dim(), 128, DEFAULT_BASE)?);
    let layer = AttnLayer::init(&mut store, "attn", &cfg, Some(table), 1.0, &mut rng(1))?;
    println!(
        "{} query heads share {} key/value heads; {} parameters",
        cfg.n_heads,
        cfg.n_kv_groups,
        cfg.param_count()
    );

    let x = Tensor::<f64>::randn([2, 10, 32], 1.0, &mut rng(2));
    let pos: Vec<i64> = (0..10).collect();
    let y = layer.apply(&store, &x, &pos, true)?;
    println!("output shape {:?}", y.shape());

    // Changing the last token leaves every earlier output alone.
    let mut x2 = x.clone();
    x2.data_mut()[9 * 32] += 1.0;
    let y2 = layer.apply(&store, &x2, &pos, true)?;
    let early = (0..9 * 32)
        .map(|i| (y.data()[i] - y2.data()[i]).abs())
        .fold(0.0, f64::max);
    println!("max change before the edited position: {early:.1e}");

    println!(
        "\n{:>4} {:>6} {:>6} {:>3} {:>16} {:>14}",
        "B", "L", "D", "h", "flops", "activations"
    );
    for (b, l, d, h) in [
        (1, 2048, 1024, 16),
        (8, 4096, 1024, 16),
        (1, 131072, 4096, 32),
    ] {
        let c = attention_cost(b, l, d, h)?;
        println!(
            "{b:>4} {l:>6} {d:>6} {h:>3} {:>16} {:>14}",
            c.flops_total, c.act_mem_elems
        );
    }
    Ok(())
}
