//! Synthetic task batches, their oracle solvers, and the binary export.
//!
//! cargo run --release --example task_batches

use otce::tasks::{decode_chars, gen_batch, oracle_accuracy, write_batch, TaskKind, TaskSpec};

fn main() -> otce::Result<()> {
    for kind in TaskKind::ALL {
        let spec = TaskSpec {
            seq_len: 32,
            ..TaskSpec::new(kind)
        };
        let b = gen_batch(&spec, 2, 0)?;
        let (t, y, m) = b.row(0);
        println!("{}", kind.name());
        if kind == TaskKind::CharLm {
            println!("  text    {:?}", decode_chars(t));
        } else {
            println!("  tokens  {t:?}");
        }
        let answers: Vec<String> = (0..t.len())
            .filter(|&i| m[i])
            .map(|i| format!("@{i}→{}", y[i]))
            .collect();
        println!("  targets {}", answers.join(" "));
        println!("  oracle accuracy {:.3}", oracle_accuracy(&spec, &b));
        let mut buf = Vec::new();
        write_batch(&mut buf, kind, &b)?;
        println!("  export  {} bytes", buf.len());
    }
    Ok(())
}
