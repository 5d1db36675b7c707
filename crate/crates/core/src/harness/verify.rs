//! Property suites run by `otce verify`.

use rand::Rng as _;

use crate::attention::attention_cost;
use crate::blocks::{OtceConfig, OtceModel};
use crate::error::{Error, Result};
use crate::experts::{route_topk, MoeConfig, MoeLayer, Sharing};
use crate::params::{ParamStore, Session};
use crate::positional::{rope_inner_identity, RopeMode, RopeTable, DEFAULT_BASE};
use crate::ssm::{materialize_sss, scan_recurrent};
use crate::tensor::{rng, Tensor};

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct Check {
    pub suite: &'static str,
    pub name: String,
    /// Human-readable bound, e.g. `< 1e-9`.
    pub tolerance: String,
    pub observed: f64,
    pub passed: bool,
}

impl std::fmt::Display for Check {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "[{}] {:<9} {:<52} observed {:<12.4e} tol {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.suite,
            self.name,
            self.observed,
            self.tolerance
        )
    }
}

fn below(suite: &'static str, name: impl Into<String>, observed: f64, tol: f64) -> Check {
    Check {
        suite,
        name: name.into(),
        tolerance: format!("< {tol:e}"),
        observed,
        passed: observed < tol,
    }
}

fn holds(suite: &'static str, name: impl Into<String>, ok: bool) -> Check {
    Check {
        suite,
        name: name.into(),
        tolerance: "holds".into(),
        observed: if ok { 1.0 } else { 0.0 },
        passed: ok,
    }
}

pub const SUITES: [&str; 5] = ["rope", "duality", "grads", "moe", "cost"];

/// Runs one suite by name, or every suite for `all`.
pub fn run(suite: &str) -> Result<Vec<Check>> {
    match suite {
        "rope" => rope_suite(),
        "duality" => duality_suite(),
        "grads" => grads_suite(),
        "moe" => moe_suite(),
        "cost" => cost_suite(),
        "all" => {
            let mut out = Vec::new();
            for s in SUITES {
                out.extend(run(s)?);
            }
            Ok(out)
        }
        _ => Err(Error::Config(format!(
            "unknown suite `{suite}` (rope|duality|grads|moe|cost|all)"
        ))),
    }
}

/// Largest `|⟨R_j Wc x_j, R_i Wb x_i⟩ − g(x_j, x_i, j − i)|` over `trials`
/// random draws with `d ∈ {2, 8, 16}`.
pub fn rope_identity_gap(trials: usize, seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    let tables: Vec<RopeTable> = [2, 8, 16]
        .iter()
        .map(|&d| RopeTable::new(d, 1024, DEFAULT_BASE))
        .collect::<Result<_>>()?;
    for t in 0..trials {
        let table = &tables[t % 3];
        let d = table.dim();
        let m = r.random_range(1..=16);
        let wc = Tensor::<f64>::randn([d, m], 1.0, &mut r);
        let wb = Tensor::<f64>::randn([d, m], 1.0, &mut r);
        let xj: Vec<f64> = Tensor::<f64>::randn([m], 1.0, &mut r).into_data();
        let xi: Vec<f64> = Tensor::<f64>::randn([m], 1.0, &mut r).into_data();
        let j = r.random_range(0..1024);
        let i = r.random_range(0..1024);
        let (lhs, rhs) = rope_inner_identity(&xj, &xi, j, i, &wc, &wb, table)?;
        worst = worst.max((lhs - rhs).abs());
    }
    Ok(worst)
}

fn rope_suite() -> Result<Vec<Check>> {
    let gap = rope_identity_gap(1000, 1)?;
    let table = RopeTable::new(16, 256, DEFAULT_BASE)?;
    let mut r = rng(2);
    let mut norm_gap = 0.0f64;
    let mut rel_gap = 0.0f64;
    for _ in 0..200 {
        let x = Tensor::<f64>::randn([16], 1.0, &mut r).into_data();
        let y = Tensor::<f64>::randn([16], 1.0, &mut r).into_data();
        let (p, q, s) = (
            r.random_range(0..100i64),
            r.random_range(0..100i64),
            r.random_range(0..100i64),
        );
        let rot = |v: &[f64], pos: i64| -> Result<Vec<f64>> {
            let mut v = v.to_vec();
            table.rotate(&mut v, pos)?;
            Ok(v)
        };
        let n0: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let n1: f64 = rot(&x, p)?.iter().map(|v| v * v).sum::<f64>().sqrt();
        norm_gap = norm_gap.max((n0 - n1).abs());
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| u * v).sum::<f64>();
        let a = dot(&rot(&x, p)?, &rot(&y, q)?);
        let b = dot(&rot(&x, p + s)?, &rot(&y, q + s)?);
        rel_gap = rel_gap.max((a - b).abs());
    }
    Ok(vec![
        below(
            "rope",
            "inner-product identity, 1000 draws, d in {2,8,16}",
            gap,
            1e-9,
        ),
        below("rope", "rotation preserves norm", norm_gap, 1e-12),
        below("rope", "score depends on offset only", rel_gap, 1e-10),
    ])
}

/// Largest gap between the recurrent scan and `(1SS(a) ∘ C·Bᵀ)·x` over
/// every `L ≤ max_len` for `seeds` seeds, with `N` cycling through `1..=16`.
pub fn duality_gap(seeds: u64, max_len: usize) -> Result<f64> {
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let mut r = rng(1000 + seed);
        for l in 1..=max_len {
            let n = 1 + (seed as usize + l) % 16;
            let a = Tensor::<f64>::uniform([1, l], 0.0, 1.0, &mut r);
            let b = Tensor::<f64>::randn([1, l, n], 1.0, &mut r);
            let c = Tensor::<f64>::randn([1, l, n], 1.0, &mut r);
            let x = Tensor::<f64>::randn([1, l, 1], 1.0, &mut r);
            let da = Tensor::from_fn([1, l, 1, n], |i| a.data()[i / n]);
            let db = b.clone().reshape([1, l, 1, n])?;
            let y = scan_recurrent(&da, &db, &c, &x, None)?;
            let m = materialize_sss(&a, &b, &c)?.reshape([l, l])?;
            let ym = m.matmul(&x.clone().reshape([l, 1])?)?;
            worst = worst.max(y.reshape([l, 1])?.max_abs_diff(&ym));
        }
    }
    Ok(worst)
}

fn duality_suite() -> Result<Vec<Check>> {
    Ok(vec![below(
        "duality",
        "scan == (1SS(a) o CB^T) x, L<=64, N<=16, 100 seeds",
        duality_gap(100, 64)?,
        1e-10,
    )])
}

/// Largest relative error between backprop and central differences over
/// every parameter element of a 64-bit model. Relative errors use
/// `max(|a|, |n|, floor)` as the denominator.
pub fn model_grad_error(cfg: &OtceConfig, seed: u64, h: f64, floor: f64) -> Result<f64> {
    let mut model = OtceModel::<f64>::build(cfg, seed)?;
    let mut r = rng(seed + 1);
    let (bs, l) = (2, 5);
    let tokens: Vec<usize> = (0..bs * l).map(|_| r.random_range(0..cfg.vocab)).collect();
    let targets: Vec<usize> = (0..bs * l).map(|_| r.random_range(0..cfg.vocab)).collect();
    let mask = vec![true; bs * l];
    let loss_of = |m: &OtceModel<f64>| -> Result<f64> {
        let mut s = Session::new(&m.store);
        let loss = m.loss(&mut s, &tokens, &targets, &mask, bs, l)?;
        Ok(s.g.value(loss).item())
    };
    let grads = {
        let mut s = Session::new(&model.store);
        let loss = model.loss(&mut s, &tokens, &targets, &mask, bs, l)?;
        s.backward(loss)?
    };
    let ids: Vec<_> = model.store.ids().collect();
    let mut worst = 0.0f64;
    for id in ids {
        let n = model.store.get(id).numel();
        for k in 0..n {
            let orig = model.store.get(id).data()[k];
            model.store.get_mut(id).data_mut()[k] = orig + h;
            let up = loss_of(&model)?;
            model.store.get_mut(id).data_mut()[k] = orig - h;
            let down = loss_of(&model)?;
            model.store.get_mut(id).data_mut()[k] = orig;
            let num = (up - down) / (2.0 * h);
            let ana = grads[id.index()].as_ref().map_or(0.0, |g| g.data()[k]);
            worst = worst.max((ana - num).abs() / ana.abs().max(num.abs()).max(floor));
        }
    }
    Ok(worst)
}

/// The two-layer `SMAM` model used for gradient checks.
pub fn grad_check_config(rope: RopeMode) -> Result<OtceConfig> {
    let mut c = OtceConfig::small("SMAM", 8, 11)?;
    c.d_state = 4;
    c.n_heads = 2;
    c.kv_groups = 2;
    c.ffn_hidden = 16;
    c.rope_mode = rope;
    Ok(c)
}

fn grads_suite() -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for rope in [RopeMode::Both, RopeMode::None] {
        let err = model_grad_error(&grad_check_config(rope)?, 3, 1e-5, 1e-6)?;
        out.push(below(
            "grads",
            format!("SMAM D=8 N=4 rope={} vs central FD", rope.name()),
            err,
            1e-4,
        ));
    }
    Ok(out)
}

/// Checks on routing, V aliasing and equal budgets at `D = 1024`, `N = 4`,
/// `K = 2`.
fn moe_suite() -> Result<Vec<Check>> {
    let mut out = Vec::new();
    let mut r = rng(5);
    let (d, n) = (16, 4);
    let centroids = Tensor::<f64>::randn([n, d], 1.0, &mut r);
    let (mut support_ok, mut sum_ok) = (true, true);
    for k in 1..=n {
        for _ in 0..100 {
            let tok = Tensor::<f64>::randn([d], 1.0, &mut r).into_data();
            let gates = route_topk(&tok, &centroids, k)?;
            support_ok &= gates.iter().filter(|&&g| g > 0.0).count() == k;
            let s: f64 = gates.iter().sum();
            sum_ok &= if k == n {
                (s - 1.0).abs() < 1e-12
            } else {
                s < 1.0 - 1e-12
            };
        }
    }
    out.push(holds(
        "moe",
        "gate support has exactly K experts",
        support_ok,
    ));
    out.push(holds("moe", "gate sum <= 1, equal iff K = N", sum_ok));

    let mut store = ParamStore::<f64>::new();
    let cfg = MoeConfig::equal_budget(8, 4, 2, 12, Sharing::Cohesive);
    let layer = MoeLayer::init(&mut store, "moe", &cfg, 1.0, &mut r)?;
    let shared = layer
        .shared_v
        .ok_or_else(|| Error::Contract("cohesive layer without shared V".into()))?;
    let v0 = layer.experts[0]
        .v
        .ok_or_else(|| Error::Contract("expert without V".into()))?;
    store.get_mut(v0).data_mut()[0] = 42.0;
    let aliased = layer
        .experts
        .iter()
        .all(|e| e.v.is_some_and(|v| store.get(v).data()[0] == 42.0))
        && store.get(shared).data()[0] == 42.0;
    out.push(holds(
        "moe",
        "cohesive V write-through visible in every expert",
        aliased,
    ));

    let (d, n, k, f) = (1024, 4, 2, 1024);
    let mut totals = Vec::new();
    for sharing in [Sharing::Sei, Sharing::Cohesive, Sharing::Expansive] {
        let mut store = ParamStore::<f32>::new();
        let layer = MoeLayer::init(
            &mut store,
            "moe",
            &MoeConfig::equal_budget(d, n, k, f, sharing),
            1.0,
            &mut r,
        )?;
        let count = layer.param_count(&store);
        out.push(below(
            "moe",
            format!("{} shared:private = 1:8 (|ratio - 8|)", sharing.name()),
            (count.ratio - 8.0).abs(),
            0.08,
        ));
        totals.push(count.total as f64);
    }
    let mean = totals.iter().sum::<f64>() / 3.0;
    let spread = totals
        .iter()
        .map(|t| (t - mean).abs() / mean)
        .fold(0.0, f64::max);
    out.push(below(
        "moe",
        "sei/cohesive/expansive totals within 0.5%",
        spread,
        0.005,
    ));
    Ok(out)
}

/// `(8BLD² + 4BL²D, 11BLD + 5BL²h)` computed directly.
pub fn cost_formula(b: u64, l: u64, d: u64, h: u64) -> (u128, u128) {
    let (b, l, d, h) = (b as u128, l as u128, d as u128, h as u128);
    (
        8 * b * l * d * d + 4 * b * l * l * d,
        11 * b * l * d + 5 * b * l * l * h,
    )
}

fn cost_suite() -> Result<Vec<Check>> {
    let mut r = rng(6);
    let mut mismatches = 0;
    for _ in 0..50 {
        let (b, l, d, h) = (
            r.random_range(1..=64u64),
            r.random_range(1..=8192u64),
            r.random_range(1..=8192u64),
            r.random_range(1..=64u64),
        );
        let c = attention_cost(b, l, d, h)?;
        if (c.flops_total, c.act_mem_elems) != cost_formula(b, l, d, h) {
            mismatches += 1;
        }
    }
    Ok(vec![Check {
        suite: "cost",
        name: "attention_cost == 8BLD^2+4BL^2D, 11BLD+5BL^2h (50 tuples)".into(),
        tolerance: "== 0 mismatches".into(),
        observed: mismatches as f64,
        passed: mismatches == 0,
    }])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quick_suites_pass() {
        for s in ["rope", "cost"] {
            for c in run(s).unwrap() {
                assert!(c.passed, "{c}");
            }
        }
    }

    #[test]
    fn unknown_suite_is_rejected() {
        assert!(run("everything").is_err());
    }
}
