//! Top-k routing and the three expert-sharing schemes at an equal budget.
//!
//! cargo run --release --example moe_sharing

use otce::experts::{moe_forward, route_topk, MoeConfig, MoeLayer, Sharing};
use otce::params::ParamStore;
use otce::tensor::{rng, Tensor};

fn main() -> otce::Result<()> {
    let mut r = rng(3);
    let centroids = Tensor::<f64>::randn([4, 8], 1.0, &mut r);
    let token = Tensor::<f64>::randn([8], 1.0, &mut r).into_data();
    for k in 1..=4 {
        let gates = route_topk(&token, &centroids, k)?;
        let shown: Vec<String> = gates.iter().map(|g| format!("{g:.3}")).collect();
        println!(
            "k={k} gates [{}] sum {:.3}",
            shown.join(", "),
            gates.iter().sum::<f64>()
        );
    }

    println!("\nD=1024, 4 experts, top-2, cohesive width 1024");
    println!(
        "{:<10} {:>10} {:>10} {:>10} {:>8}",
        "sharing", "total", "shared", "private", "ratio"
    );
    for sharing in [Sharing::Sei, Sharing::Cohesive, Sharing::Expansive] {
        let cfg = MoeConfig::equal_budget(1024, 4, 2, 1024, sharing);
        let mut store = ParamStore::<f32>::new();
        let layer = MoeLayer::init(&mut store, "moe", &cfg, 1.0, &mut r)?;
        let c = layer.param_count(&store);
        println!(
            "{:<10} {:>10} {:>10} {:>10} {:>8.3}",
            sharing.name(),
            c.total,
            c.shared,
            c.private,
            c.ratio
        );
    }

    let cfg = MoeConfig::equal_budget(8, 4, 2, 12, Sharing::Cohesive);
    let mut store = ParamStore::<f64>::new();
    let layer = MoeLayer::init(&mut store, "moe", &cfg, 1.0, &mut r)?;
    let x = Tensor::<f64>::randn([1, 3, 8], 1.0, &mut r);
    let y = moe_forward(&store, &layer, &x)?;
    println!("\ncohesive layer on [1, 3, 8]: output {:?}", y.shape());
    let v: Vec<_> = layer.experts.iter().map(|e| e.v).collect();
    println!("every expert's V handle: {v:?} (one shared matrix)");
    Ok(())
}
