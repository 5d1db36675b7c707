//! Causal multi-head attention with grouped key/value heads, the unnormalised
//! masked-kernel form, and analytic cost accounting.

use std::sync::Arc;

use crate::autograd::Var;
use crate::error::{shape_err, Error, Result};
use crate::params::{ParamId, ParamStore, Session};
use crate::positional::{rope, rope_query, PosCtx, RopeTable};
use crate::tensor::{Real, Rng, Tensor};

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AttnConfig {
    pub d_model: usize,
    pub n_heads: usize,
    /// Number of key/value heads; each serves `n_heads / n_kv_groups` query heads.
    pub n_kv_groups: usize,
    pub rope: bool,
}

impl AttnConfig {
    pub fn new(d_model: usize, n_heads: usize, n_kv_groups: usize, rope: bool) -> Result<Self> {
        let cfg = AttnConfig {
            d_model,
            n_heads,
            n_kv_groups,
            rope,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        if self.n_kv_groups == 0 || !self.n_heads.is_multiple_of(self.n_kv_groups) {
            return Err(Error::Config(format!(
                "{} heads not divisible by {} key/value groups",
                self.n_heads, self.n_kv_groups
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn kv_dim(&self) -> usize {
        self.n_kv_groups * self.head_dim()
    }

    pub fn param_count(&self) -> usize {
        2 * self.d_model * self.d_model + 2 * self.d_model * self.kv_dim()
    }
}

#[derive(Clone, Debug)]
pub struct AttnLayer {
    pub cfg: AttnConfig,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub table: Option<Arc<RopeTable>>,
}

impl AttnLayer {
    pub fn init<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: &AttnConfig,
        table: Option<Arc<RopeTable>>,
        out_scale: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        if cfg.rope && table.as_ref().is_none_or(|t| t.dim() != cfg.head_dim()) {
            return Err(Error::Config(format!(
                "rotary attention needs a table of the head dimension {}",
                cfg.head_dim()
            )));
        }
        let (d, kv) = (cfg.d_model, cfg.kv_dim());
        let sd = 1.0 / (d as f64).sqrt();
        Ok(AttnLayer {
            cfg: cfg.clone(),
            w_q: store.normal(format!("{prefix}.w_q"), &[d, d], sd, rng),
            w_k: store.normal(format!("{prefix}.w_k"), &[d, kv], sd, rng),
            w_v: store.normal(format!("{prefix}.w_v"), &[d, kv], sd, rng),
            w_o: store.normal(format!("{prefix}.w_o"), &[d, d], sd * out_scale, rng),
            table: if cfg.rope { table } else { None },
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.w_q, self.w_k, self.w_v, self.w_o]
    }

    /// `x: [B, L, D] → [B, L, D]`.
    pub fn forward<T: Real>(
        &self,
        s: &mut Session<T>,
        x: Var,
        ctx: &PosCtx,
        causal: bool,
    ) -> Result<Var> {
        let (bs, l) = match *s.g.shape(x) {
            [b, l, _] => (b, l),
            _ => {
                return Err(shape_err(
                    "attention",
                    s.g.shape(x),
                    &[0, 0, self.cfg.d_model],
                ))
            }
        };
        if ctx.len() != l {
            return Err(shape_err("attention", &[l], &[ctx.len()]));
        }
        let (h, g, dh) = (self.cfg.n_heads, self.cfg.n_kv_groups, self.cfg.head_dim());
        let r = h / g;
        let heads = |s: &mut Session<T>, w: ParamId, n: usize| -> Result<Var> {
            let w = s.param(w);
            let y = s.g.matmul(x, w)?;
            let y = s.g.reshape(y, &[bs, l, n, dh])?;
            s.g.permute(y, &[0, 2, 1, 3])
        };
        let mut q = heads(s, self.w_q, h)?;
        let mut k = heads(s, self.w_k, g)?;
        let v = heads(s, self.w_v, g)?;
        if let Some(table) = &self.table {
            q = rope_query(&mut s.g, q, ctx, table)?;
            k = rope(&mut s.g, k, &ctx.positions, table)?;
        }
        // Query heads of one group become consecutive row blocks.
        let q = s.g.reshape(q, &[bs, g, r * l, dh])?;
        let scores = s.g.matmul_t(q, k)?;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let att = if causal {
            s.g.causal_softmax(scores, scale, l)?
        } else {
            let z = s.g.scale(scores, scale);
            s.g.softmax(z)?
        };
        let y = s.g.matmul(att, v)?;
        let y = s.g.reshape(y, &[bs, h, l, dh])?;
        let y = s.g.permute(y, &[0, 2, 1, 3])?;
        let y = s.g.reshape(y, &[bs, l, h * dh])?;
        let w_o = s.param(self.w_o);
        s.g.matmul(y, w_o)
    }

    /// Evaluates the layer on plain tensors with explicit position ids.
    pub fn apply<T: Real>(
        &self,
        store: &ParamStore<T>,
        x: &Tensor<T>,
        pos_ids: &[i64],
        causal: bool,
    ) -> Result<Tensor<T>> {
        let mut s = Session::new(store);
        let xv = s.g.constant(x.clone());
        let ctx = PosCtx {
            positions: pos_ids.to_vec(),
            length_base: None,
        };
        let y = self.forward(&mut s, xv, &ctx, causal)?;
        Ok(s.g.value(y).clone())
    }
}

/// `(mask ∘ Q·Kᵀ)·V` with no softmax. `Q, K: [B, L, d]`, `V: [B, L, dv]`,
/// `mask: [L, L]` or `[B, L, L]`.
pub fn masked_kernel_attention<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    mask: &Tensor<T>,
) -> Result<Tensor<T>> {
    if q.ndim() != 3 || k.shape() != q.shape() || v.ndim() != 3 || v.shape()[..2] != q.shape()[..2]
    {
        return Err(shape_err("masked_kernel_attention", q.shape(), v.shape()));
    }
    let (bs, l) = (q.shape()[0], q.shape()[1]);
    let per_batch = match mask.shape() {
        [a, b] if *a == l && *b == l => false,
        [b0, a, b] if *b0 == bs && *a == l && *b == l => true,
        _ => return Err(shape_err("masked_kernel_attention", mask.shape(), &[l, l])),
    };
    let kt = crate::autograd::permute_tensor(k, &[0, 2, 1]);
    let mut scores = q.matmul(&kt)?;
    for (i, s) in scores.data_mut().iter_mut().enumerate() {
        let m = if per_batch {
            mask.data()[i]
        } else {
            mask.data()[i % (l * l)]
        };
        *s *= m;
    }
    scores.matmul(v)
}

/// Lower-triangular mask of ones.
pub fn causal_mask<T: Real>(l: usize) -> Tensor<T> {
    Tensor::from_fn(
        [l, l],
        |i| if i % l <= i / l { T::one() } else { T::zero() },
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
pub struct CostReport {
    pub flops_total: u128,
    pub flops_qkv: u128,
    pub flops_scores: u128,
    pub flops_weighted: u128,
    pub flops_out: u128,
    pub act_mem_elems: u128,
}

/// Forward FLOPs (multiply and add counted separately) and saved activation
/// elements of one attention layer.
pub fn attention_cost(batch: u64, len: u64, d_model: u64, heads: u64) -> Result<CostReport> {
    if batch == 0 || len == 0 || d_model == 0 || heads == 0 {
        return Err(Error::Contract(
            "attention_cost needs positive arguments".into(),
        ));
    }
    let (b, l, d, h) = (batch as u128, len as u128, d_model as u128, heads as u128);
    let flops_qkv = 6 * b * l * d * d;
    let flops_scores = 2 * b * l * l * d;
    let flops_weighted = 2 * b * l * l * d;
    let flops_out = 2 * b * l * d * d;
    Ok(CostReport {
        flops_total: flops_qkv + flops_scores + flops_weighted + flops_out,
        flops_qkv,
        flops_scores,
        flops_weighted,
        flops_out,
        act_mem_elems: 11 * b * l * d + 5 * b * l * l * h,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{finite_diff_grad, max_rel_err};
    use crate::positional::DEFAULT_BASE;
    use crate::tensor::rng;

    /// Per-element attention with explicit loops; the reference for one layer.
    fn naive(
        store: &ParamStore<f64>,
        layer: &AttnLayer,
        x: &Tensor<f64>,
        causal: bool,
    ) -> Tensor<f64> {
        let (bs, l, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (h, g, dh) = (
            layer.cfg.n_heads,
            layer.cfg.n_kv_groups,
            layer.cfg.head_dim(),
        );
        let q = x.matmul(store.get(layer.w_q)).unwrap();
        let k = x.matmul(store.get(layer.w_k)).unwrap();
        let v = x.matmul(store.get(layer.w_v)).unwrap();
        let mut y = Tensor::<f64>::zeros([bs, l, d]);
        for b in 0..bs {
            for head in 0..h {
                let kvh = head / (h / g);
                for i in 0..l {
                    let keys = if causal { i + 1 } else { l };
                    let s: Vec<f64> = (0..keys)
                        .map(|j| {
                            (0..dh)
                                .map(|c| q.at(&[b, i, head * dh + c]) * k.at(&[b, j, kvh * dh + c]))
                                .sum::<f64>()
                                / (dh as f64).sqrt()
                        })
                        .collect();
                    let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = s.iter().map(|v| (v - m).exp()).sum();
                    for c in 0..dh {
                        let val: f64 = (0..keys)
                            .map(|j| (s[j] - m).exp() / z * v.at(&[b, j, kvh * dh + c]))
                            .sum();
                        y.data_mut()[(b * l + i) * d + head * dh + c] = val;
                    }
                }
            }
        }
        y.matmul(store.get(layer.w_o)).unwrap()
    }

    fn layer(h: usize, g: usize, rope: bool) -> (ParamStore<f64>, AttnLayer) {
        let mut store = ParamStore::new();
        let cfg = AttnConfig::new(8, h, g, rope).unwrap();
        let table = Arc::new(RopeTable::new(cfg.head_dim(), 64, DEFAULT_BASE).unwrap());
        let l = AttnLayer::init(&mut store, "attn", &cfg, Some(table), 1.0, &mut rng(1)).unwrap();
        (store, l)
    }

    #[test]
    fn matches_naive_oracle_with_grouped_heads() {
        for (h, g) in [(1, 1), (2, 2), (4, 2), (4, 1)] {
            let (store, l) = layer(h, g, false);
            let x = Tensor::<f64>::randn([2, 5, 8], 1.0, &mut rng(2));
            for causal in [true, false] {
                let y = l.apply(&store, &x, &[0, 1, 2, 3, 4], causal).unwrap();
                assert!(
                    y.max_abs_diff(&naive(&store, &l, &x, causal)) < 1e-12,
                    "h={h} g={g}"
                );
            }
        }
    }

    #[test]
    fn single_token_reduces_to_value_path() {
        let (store, l) = layer(2, 1, false);
        let x = Tensor::<f64>::randn([1, 1, 8], 1.0, &mut rng(3));
        let y = l.apply(&store, &x, &[0], true).unwrap();
        let mut vfull = x.matmul(store.get(l.w_v)).unwrap().into_data();
        vfull = [vfull.clone(), vfull].concat();
        let want = Tensor::new([1, 1, 8], vfull)
            .unwrap()
            .matmul(store.get(l.w_o))
            .unwrap();
        assert!(y.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn causal_output_ignores_future_tokens() {
        let (store, l) = layer(2, 2, true);
        let x = Tensor::<f64>::randn([1, 6, 8], 1.0, &mut rng(4));
        let mut x2 = x.clone();
        for v in &mut x2.data_mut()[4 * 8..] {
            *v -= 2.0;
        }
        let pos: Vec<i64> = (0..6).collect();
        let a = l.apply(&store, &x, &pos, true).unwrap();
        let b = l.apply(&store, &x2, &pos, true).unwrap();
        assert_eq!(a.data()[..4 * 8], b.data()[..4 * 8]);
    }

    #[test]
    fn rope_output_is_shift_invariant() {
        let (store, l) = layer(2, 1, true);
        let x = Tensor::<f64>::randn([1, 5, 8], 1.0, &mut rng(5));
        let a = l.apply(&store, &x, &[0, 1, 2, 3, 4], true).unwrap();
        let b = l.apply(&store, &x, &[17, 18, 19, 20, 21], true).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-9);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (store, l) = layer(4, 2, true);
        let x = Tensor::<f64>::randn([1, 4, 8], 1.0, &mut rng(6));
        let w = Tensor::<f64>::randn([1, 4, 8], 1.0, &mut rng(7));
        let pos = [0, 1, 2, 3];
        let mut s = Session::new(&store);
        let xv = s.g.param(x.clone());
        let y = l.forward(&mut s, xv, &PosCtx::new(4), true).unwrap();
        let wv = s.g.constant(w.clone());
        let p = s.g.mul(y, wv).unwrap();
        let loss = s.g.sum(p);
        let grads = s.backward(loss).unwrap();
        let gx = s.g.backward(loss).unwrap();
        let fd = finite_diff_grad(
            |x| {
                l.apply(&store, x, &pos, true)
                    .unwrap()
                    .zip_map(&w, |a, b| a * b)
                    .unwrap()
                    .sum()
            },
            &x,
            1e-6,
        );
        assert!(max_rel_err(gx.get(xv).unwrap(), &fd, 1e-3) < 1e-6);
        let wq = store.get(l.w_q).clone();
        let fdq = finite_diff_grad(
            |wq| {
                let mut st = store.clone();
                *st.get_mut(l.w_q) = wq.clone();
                l.apply(&st, &x, &pos, true)
                    .unwrap()
                    .zip_map(&w, |a, b| a * b)
                    .unwrap()
                    .sum()
            },
            &wq,
            1e-6,
        );
        assert!(max_rel_err(grads[l.w_q.index()].as_ref().unwrap(), &fdq, 1e-3) < 1e-6);
    }

    #[test]
    fn masked_kernel_examples() {
        let mut r = rng(8);
        let q = Tensor::<f64>::randn([1, 1, 3], 1.0, &mut r);
        let k = Tensor::<f64>::randn([1, 1, 3], 1.0, &mut r);
        let v = Tensor::<f64>::randn([1, 1, 2], 1.0, &mut r);
        let y = masked_kernel_attention(&q, &k, &v, &Tensor::ones([1, 1])).unwrap();
        let dot: f64 = q.data().iter().zip(k.data()).map(|(a, b)| a * b).sum();
        assert!((y.data()[0] - dot * v.data()[0]).abs() < 1e-15);
        let q = Tensor::<f64>::randn([2, 4, 3], 1.0, &mut r);
        let v = Tensor::<f64>::randn([2, 4, 2], 1.0, &mut r);
        let z = masked_kernel_attention(&q, &q, &v, &Tensor::zeros([4, 4])).unwrap();
        assert_eq!(z.max_abs(), 0.0);
    }

    #[test]
    fn cost_examples() {
        let c = attention_cost(1, 1, 1, 1).unwrap();
        assert_eq!((c.flops_total, c.act_mem_elems), (12, 16));
        assert_eq!(attention_cost(1, 2, 4, 1).unwrap().flops_total, 320);
        let a = attention_cost(3, 5, 7, 2).unwrap();
        let b = attention_cost(3, 10, 7, 2).unwrap();
        assert_eq!(b.flops_scores, 4 * a.flops_scores);
        assert!(attention_cost(0, 1, 1, 1).is_err());
    }
}
