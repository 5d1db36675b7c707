//! The scalar-decay selective scan equals a masked matrix product.
//!
//! `y = (1SS(a) ∘ C·Bᵀ)·x` where `1SS(a)[j, i] = a_j ⋯ a_{i+1}` for `j ≥ i`.
//!
//! cargo run --release --example ssd_duality

use otce::ssm::{materialize_sss, scan_recurrent};
use otce::tensor::{rng, Tensor};

fn main() -> otce::Result<()> {
    let (l, n) = (6, 4);
    let mut r = rng(11);
    let a = Tensor::<f64>::uniform([1, l], 0.5, 1.0, &mut r);
    let b = Tensor::<f64>::randn([1, l, n], 1.0, &mut r);
    let c = Tensor::<f64>::randn([1, l, n], 1.0, &mut r);
    let x = Tensor::<f64>::randn([1, l, 1], 1.0, &mut r);

    let da = Tensor::from_fn([1, l, 1, n], |i| a.data()[i / n]);
    let y_scan = scan_recurrent(&da, &b.clone().reshape([1, l, 1, n])?, &c, &x, None)?;

    let m = materialize_sss(&a, &b, &c)?.reshape([l, l])?;
    println!("semiseparable matrix (lower triangular):");
    for row in m.data().chunks(l) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:>8.3}")).collect();
        println!("  {}", cells.join(""));
    }
    let y_mat = m.matmul(&x.clone().reshape([l, 1])?)?;
    println!("\n{:>4} {:>12} {:>12}", "t", "scan", "matrix");
    for t in 0..l {
        println!(
            "{t:>4} {:>12.8} {:>12.8}",
            y_scan.data()[t],
            y_mat.data()[t]
        );
    }
    println!(
        "max |diff| = {:.2e}",
        y_scan.reshape([l, 1])?.max_abs_diff(&y_mat)
    );
    Ok(())
}
