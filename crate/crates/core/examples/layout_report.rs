//! Layout strings, stage tags and per-class parameter counts for the
//! eight-layer width-1024 configurations.
//!
//! cargo run --release --example layout_report

use otce::blocks::{parse_layout, stage_tags, OtceConfig};

fn main() -> otce::Result<()> {
    for text in ["SMSMSMSMAMSMSMAM", "SM + SE×11 + AE×2 + SE×8 + SM + AM"] {
        let l = parse_layout(text)?;
        println!("{text}\n  -> {} layers, rendered {}", l.len(), l.render());
    }
    if let Err(e) = parse_layout("SMSX") {
        println!("SMSX -> {e}");
    }

    for (name, layout, expresser) in [
        ("otce", "SMSMSMSMAMSMSMAM", true),
        ("jamba", "SMSMSMSMAMSMSMSM", false),
    ] {
        let cfg = OtceConfig::base_1024(layout)?;
        let rep = cfg.report(1, 2048)?;
        let tags: Vec<String> = stage_tags(&cfg.layout, expresser)
            .iter()
            .map(|t| format!("{t:?}"))
            .collect();
        println!("\n{name}: {layout}");
        println!("  stages    {}", tags.join(" "));
        println!(
            "  params    total {:.1}M  embedding {}  ssm {}  attn {}  mlp {}  norm {}",
            rep.total as f64 / 1e6,
            rep.embedding,
            rep.ssm,
            rep.attn,
            rep.mlp,
            rep.norm
        );
        println!(
            "  flops     attention {:.3e}  scan {:.3e}  (B=1, L=2048)",
            rep.attn_flops as f64, rep.ssm_scan_flops as f64
        );
    }
    Ok(())
}
