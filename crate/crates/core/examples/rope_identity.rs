//! Rotated query/key inner products depend only on the position offset.
//!
//! cargo run --release --example rope_identity

use otce::positional::{rope_inner_identity, RopeTable, DEFAULT_BASE};
use otce::tensor::{rng, Tensor};

fn main() -> otce::Result<()> {
    let table = RopeTable::new(8, 4096, DEFAULT_BASE)?;
    let mut r = rng(7);
    let wc = Tensor::<f64>::randn([8, 5], 1.0, &mut r);
    let wb = Tensor::<f64>::randn([8, 5], 1.0, &mut r);
    let xj = Tensor::<f64>::randn([5], 1.0, &mut r).into_data();
    let xi = Tensor::<f64>::randn([5], 1.0, &mut r).into_data();

    println!(
        "{:>6} {:>6} {:>12} {:>12} {:>10}",
        "j", "i", "rotated", "offset-form", "|diff|"
    );
    for (j, i) in [(3, 1), (103, 101), (2050, 2048), (40, 7), (1000, 967)] {
        let (lhs, rhs) = rope_inner_identity(&xj, &xi, j, i, &wc, &wb, &table)?;
        println!(
            "{j:>6} {i:>6} {lhs:>12.6} {rhs:>12.6} {:>10.1e}",
            (lhs - rhs).abs()
        );
    }
    println!("pairs with equal j - i give equal scores: rows 1-3 and 4-5 match");
    Ok(())
}
