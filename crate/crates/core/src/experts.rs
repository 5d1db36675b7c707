//! Feed-forward variants and mixture-of-experts layers with three ways of
//! sharing parameters between experts:
//!
//! * `sei`: an always-on shared expert next to the routed ones;
//! * `cohesive`: every expert's `V` is one tensor;
//! * `expansive`: a shared FFN runs first and each routed expert gates its output
//!   with a private `W3` before its own FFN.

use crate::autograd::Var;
use crate::error::{shape_err, Error, Result};
use crate::params::{ParamId, ParamStore, Session};
use crate::tensor::{Real, Rng, Tensor};

#[derive(
    Clone, Copy, Debug, Default, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum FfnVariant {
    /// `silu(xW)·W2`
    Plain,
    /// `(silu(xW) ⊙ xV)·W2`
    #[serde(rename = "swiglu")]
    SwiGlu,
    /// `(silu(xW) ⊙ σ(xV))·W2`
    #[serde(rename = "swisig_dglu")]
    SwiSigDglu,
    /// `(silu(xW) ⊙ tanh(xV))·W2`
    #[default]
    #[serde(rename = "switanh_dglu")]
    SwiTanhDglu,
}

impl FfnVariant {
    pub const ALL: [FfnVariant; 4] = [
        FfnVariant::Plain,
        FfnVariant::SwiGlu,
        FfnVariant::SwiSigDglu,
        FfnVariant::SwiTanhDglu,
    ];

    pub fn gated(self) -> bool {
        self != FfnVariant::Plain
    }

    pub fn name(self) -> &'static str {
        match self {
            FfnVariant::Plain => "plain",
            FfnVariant::SwiGlu => "swiglu",
            FfnVariant::SwiSigDglu => "swisig_dglu",
            FfnVariant::SwiTanhDglu => "switanh_dglu",
        }
    }

    /// Hidden width giving the same parameter count as a plain FFN of width
    /// `f_plain`: gated variants carry three matrices instead of two.
    pub fn budget_width(self, f_plain: usize) -> usize {
        if self.gated() {
            (2 * f_plain + 1) / 3
        } else {
            f_plain
        }
    }
}

impl std::str::FromStr for FfnVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FfnVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown FFN variant `{s}`")))
    }
}

#[derive(
    Clone, Copy, Debug, Default, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize,
)]
#[serde(rename_all = "lowercase")]
pub enum Sharing {
    None,
    Sei,
    #[default]
    Cohesive,
    Expansive,
}

impl Sharing {
    pub const ALL: [Sharing; 4] = [
        Sharing::None,
        Sharing::Sei,
        Sharing::Cohesive,
        Sharing::Expansive,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Sharing::None => "none",
            Sharing::Sei => "sei",
            Sharing::Cohesive => "cohesive",
            Sharing::Expansive => "expansive",
        }
    }
}

impl std::str::FromStr for Sharing {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Sharing::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown sharing mode `{s}` (none|sei|cohesive|expansive)"
                ))
            })
    }
}

#[derive(Clone, Debug)]
pub struct Ffn {
    pub variant: FfnVariant,
    pub d_model: usize,
    pub hidden: usize,
    pub w: ParamId,
    pub v: Option<ParamId>,
    pub w2: ParamId,
}

impl Ffn {
    pub fn init<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        variant: FfnVariant,
        d_model: usize,
        hidden: usize,
        out_scale: f64,
        rng: &mut Rng,
    ) -> Self {
        let sd = 1.0 / (d_model as f64).sqrt();
        let w = store.normal(format!("{prefix}.w"), &[d_model, hidden], sd, rng);
        let v = variant
            .gated()
            .then(|| store.normal(format!("{prefix}.v"), &[d_model, hidden], sd, rng));
        let w2 = store.normal(
            format!("{prefix}.w2"),
            &[hidden, d_model],
            out_scale / (hidden as f64).sqrt(),
            rng,
        );
        Ffn {
            variant,
            d_model,
            hidden,
            w,
            v,
            w2,
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.w];
        ids.extend(self.v);
        ids.push(self.w2);
        ids
    }

    pub fn param_count(&self) -> usize {
        self.d_model * self.hidden * if self.variant.gated() { 3 } else { 2 }
    }

    /// `x: [.., D] → [.., D]`.
    pub fn forward<T: Real>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let w = s.param(self.w);
        let a = s.g.matmul(x, w)?;
        let a = s.g.silu(a)?;
        let h = if self.variant.gated() {
            let v = self
                .v
                .ok_or_else(|| Error::Config(format!("{} FFN without V", self.variant.name())))?;
            let v = s.param(v);
            let b = s.g.matmul(x, v)?;
            let b = match self.variant {
                FfnVariant::SwiGlu => b,
                FfnVariant::SwiSigDglu => s.g.sigmoid(b)?,
                _ => s.g.tanh(b)?,
            };
            s.g.mul(a, b)?
        } else {
            a
        };
        let w2 = s.param(self.w2);
        s.g.matmul(h, w2)
    }
}

/// Evaluates an FFN on a plain tensor.
pub fn ffn_forward<T: Real>(store: &ParamStore<T>, ffn: &Ffn, x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut s = Session::new(store);
    let xv = s.g.constant(x.clone());
    let y = ffn.forward(&mut s, xv)?;
    Ok(s.g.value(y).clone())
}

/// Raw softmax affinities of the `k` best experts, zero elsewhere. Ties at the
/// cut go to the lower index.
pub fn route_topk<T: Real>(token: &[T], centroids: &Tensor<T>, k: usize) -> Result<Vec<T>> {
    let n = centroids.shape()[0];
    if centroids.ndim() != 2 || centroids.shape()[1] != token.len() {
        return Err(shape_err("route_topk", centroids.shape(), &[token.len()]));
    }
    if k == 0 || k > n {
        return Err(Error::Config(format!("top-k must be in 1..={n}, got {k}")));
    }
    let mut aff: Vec<T> = centroids
        .data()
        .chunks(token.len())
        .map(|e| e.iter().zip(token).map(|(&a, &b)| a * b).sum())
        .collect();
    crate::autograd::softmax_in_place(&mut aff)?;
    let keep = top_k_indices(&aff, k);
    let mut gates = vec![T::zero(); n];
    for i in keep {
        gates[i] = aff[i];
    }
    Ok(gates)
}

fn top_k_indices<T: Real>(aff: &[T], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..aff.len()).collect();
    order.sort_by(|&a, &b| {
        aff[b]
            .partial_cmp(&aff[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order.truncate(k);
    order
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MoeConfig {
    pub d_model: usize,
    pub n_experts: usize,
    pub top_k: usize,
    pub sharing: Sharing,
    pub variant: FfnVariant,
    /// Hidden width of each routed expert.
    pub expert_hidden: usize,
    /// Hidden width of the shared FFN (`sei`, `expansive`); unused otherwise.
    pub shared_hidden: usize,
    /// Weight of the router importance loss; 0 disables it.
    pub aux_coef: f64,
}

impl MoeConfig {
    /// Sizes the experts so every sharing mode spends roughly the parameters of
    /// a cohesive layer with hidden width `f` and keeps shared:private at
    /// `1 : 2N` (the cohesive ratio for a three-matrix expert).
    pub fn equal_budget(
        d_model: usize,
        n_experts: usize,
        top_k: usize,
        f: usize,
        sharing: Sharing,
    ) -> Self {
        let (expert_hidden, shared_hidden) = match sharing {
            Sharing::None | Sharing::Cohesive => (f, 0),
            Sharing::Sei => (div_round(2 * f, 3), div_round(f, 3)),
            // shared FFN 3·D·F_s, private N·(D² + 3·D·F_p)
            Sharing::Expansive => (
                div_round((2 * f).saturating_sub(d_model), 3).max(1),
                div_round(f, 3),
            ),
        };
        MoeConfig {
            d_model,
            n_experts,
            top_k,
            sharing,
            variant: FfnVariant::SwiTanhDglu,
            expert_hidden,
            shared_hidden,
            aux_coef: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 || self.top_k > self.n_experts {
            return Err(Error::Config(format!(
                "top-k {} outside 1..={}",
                self.top_k, self.n_experts
            )));
        }
        if self.sharing == Sharing::Cohesive && !self.variant.gated() {
            return Err(Error::Config(
                "cohesive sharing needs a gated expert with a V matrix".into(),
            ));
        }
        if matches!(self.sharing, Sharing::Sei | Sharing::Expansive) && self.shared_hidden == 0 {
            return Err(Error::Config("shared FFN width must be positive".into()));
        }
        Ok(())
    }
}

fn div_round(a: usize, b: usize) -> usize {
    (a + b / 2) / b
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct MoeParamCount {
    pub total: usize,
    pub shared: usize,
    pub private: usize,
    pub router: usize,
    /// `private / shared`; infinite when nothing is shared.
    pub ratio: f64,
}

#[derive(Clone, Debug)]
pub struct MoeLayer {
    pub cfg: MoeConfig,
    /// `[N, D]`
    pub centroids: ParamId,
    pub experts: Vec<Ffn>,
    pub shared_v: Option<ParamId>,
    pub shared_ffn: Option<Ffn>,
    /// `[D, D]` per expert (expansive).
    pub w3: Vec<ParamId>,
}

impl MoeLayer {
    pub fn init<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: &MoeConfig,
        out_scale: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let centroids = store.normal(
            format!("{prefix}.centroids"),
            &[cfg.n_experts, d],
            1.0 / (d as f64).sqrt(),
            rng,
        );
        let shared_v = (cfg.sharing == Sharing::Cohesive).then(|| {
            store.normal(
                format!("{prefix}.shared_v"),
                &[d, cfg.expert_hidden],
                1.0 / (d as f64).sqrt(),
                rng,
            )
        });
        let shared_ffn = matches!(cfg.sharing, Sharing::Sei | Sharing::Expansive).then(|| {
            Ffn::init(
                store,
                &format!("{prefix}.shared"),
                cfg.variant,
                d,
                cfg.shared_hidden,
                out_scale,
                rng,
            )
        });
        let mut experts = Vec::with_capacity(cfg.n_experts);
        let mut w3 = Vec::new();
        for i in 0..cfg.n_experts {
            let p = format!("{prefix}.expert{i}");
            let ffn = match shared_v {
                Some(v) => {
                    let w = store.normal(
                        format!("{p}.w"),
                        &[d, cfg.expert_hidden],
                        1.0 / (d as f64).sqrt(),
                        rng,
                    );
                    let w2 = store.normal(
                        format!("{p}.w2"),
                        &[cfg.expert_hidden, d],
                        out_scale / (cfg.expert_hidden as f64).sqrt(),
                        rng,
                    );
                    Ffn {
                        variant: cfg.variant,
                        d_model: d,
                        hidden: cfg.expert_hidden,
                        w,
                        v: Some(v),
                        w2,
                    }
                }
                None => Ffn::init(store, &p, cfg.variant, d, cfg.expert_hidden, out_scale, rng),
            };
            if cfg.sharing == Sharing::Expansive {
                w3.push(store.normal(format!("{p}.w3"), &[d, d], 1.0 / (d as f64).sqrt(), rng));
            }
            experts.push(ffn);
        }
        Ok(MoeLayer {
            cfg: cfg.clone(),
            centroids,
            experts,
            shared_v,
            shared_ffn,
            w3,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.centroids];
        ids.extend(self.shared_ffn.iter().flat_map(|f| f.param_ids()));
        for e in &self.experts {
            ids.extend(e.param_ids());
        }
        ids.extend(&self.w3);
        ids.sort();
        ids.dedup();
        ids
    }

    pub fn param_count<T: Real>(&self, store: &ParamStore<T>) -> MoeParamCount {
        let mut shared_ids: Vec<ParamId> = self.shared_v.into_iter().collect();
        shared_ids.extend(self.shared_ffn.iter().flat_map(|f| f.param_ids()));
        let private_ids: Vec<ParamId> = self
            .experts
            .iter()
            .flat_map(|e| e.param_ids())
            .chain(self.w3.iter().copied())
            .filter(|id| !shared_ids.contains(id))
            .collect();
        let shared = store.numel_of(&shared_ids);
        let private = store.numel_of(&private_ids);
        let router = store.get(self.centroids).numel();
        MoeParamCount {
            total: shared + private + router,
            shared,
            private,
            router,
            ratio: if shared == 0 {
                f64::INFINITY
            } else {
                private as f64 / shared as f64
            },
        }
    }

    /// Routed (plus shared) expert output without the residual.
    /// `x: [B, L, D]`; also returns the importance loss when enabled.
    pub fn forward<T: Real>(&self, s: &mut Session<T>, x: Var) -> Result<(Var, Option<Var>)> {
        let shape = s.g.shape(x).to_vec();
        let d = self.cfg.d_model;
        if shape.last() != Some(&d) {
            return Err(shape_err("moe", &shape, &[d]));
        }
        let t = shape.iter().product::<usize>() / d;
        let n = self.cfg.n_experts;
        let flat = s.g.reshape(x, &[t, d])?;
        let e = s.param(self.centroids);
        let logits = s.g.matmul_t(flat, e)?;
        let aff = s.g.softmax(logits)?;

        let mut routed: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (row, a) in s.g.value(aff).data().chunks(n).enumerate() {
            for i in top_k_indices(a, self.cfg.top_k) {
                routed[i].push(row);
            }
        }

        let shared_out = match (&self.shared_ffn, self.cfg.sharing) {
            (Some(f), Sharing::Sei | Sharing::Expansive) => Some(f.forward(s, flat)?),
            _ => None,
        };
        let mut out = match (self.cfg.sharing, shared_out) {
            (Sharing::Sei, Some(so)) => Some(so),
            _ => None,
        };
        for (i, rows) in routed.iter().enumerate() {
            if rows.is_empty() {
                continue;
            }
            let xi = match (self.cfg.sharing, shared_out) {
                (Sharing::Expansive, Some(so)) => {
                    let si = s.g.gather_rows(so, rows)?;
                    let w3 = s.param(self.w3[i]);
                    let gate = s.g.matmul(si, w3)?;
                    s.g.mul(si, gate)?
                }
                _ => s.g.gather_rows(flat, rows)?,
            };
            let yi = self.experts[i].forward(s, xi)?;
            let gidx: Vec<usize> = rows.iter().map(|r| r * n + i).collect();
            let gi = s.g.gather_elems(aff, &gidx)?;
            let yi = s.g.scale_rows(yi, gi)?;
            let yi = s.g.scatter_rows(yi, rows, t)?;
            out = Some(match out {
                Some(o) => s.g.add(o, yi)?,
                None => yi,
            });
        }
        let out = out.expect("every token reaches at least one expert");
        let out = s.g.reshape(out, &shape)?;

        let aux = if self.cfg.aux_coef > 0.0 {
            // N·Σ_i (mean_t aff_{t,i})²: minimal when affinity mass is uniform.
            let imp = s.g.sum_leading(aff);
            let imp = s.g.scale(imp, T::of(1.0 / t as f64));
            let sq = s.g.mul(imp, imp)?;
            let total = s.g.sum(sq);
            Some(s.g.scale(total, T::of(self.cfg.aux_coef * n as f64)))
        } else {
            None
        };
        Ok((out, aux))
    }
}

/// `x + MoE(x)` on a plain tensor.
pub fn moe_forward<T: Real>(
    store: &ParamStore<T>,
    moe: &MoeLayer,
    x: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut s = Session::new(store);
    let xv = s.g.constant(x.clone());
    let (y, _) = moe.forward(&mut s, xv)?;
    let y = s.g.add(y, xv)?;
    Ok(s.g.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{finite_diff_grad, max_rel_err};
    use crate::tensor::rng;

    /// Evaluates every expert on every token and weights by the top-k gates.
    fn dense_oracle(store: &ParamStore<f64>, moe: &MoeLayer, x: &Tensor<f64>) -> Tensor<f64> {
        let d = moe.cfg.d_model;
        let mut out = x.data().to_vec();
        for (r, tok) in x.data().chunks(d).enumerate() {
            let gates = route_topk(tok, store.get(moe.centroids), moe.cfg.top_k).unwrap();
            let xt = Tensor::new([1, d], tok.to_vec()).unwrap();
            let shared = moe
                .shared_ffn
                .as_ref()
                .map(|f| ffn_forward(store, f, &xt).unwrap());
            if moe.cfg.sharing == Sharing::Sei {
                for (o, v) in out[r * d..(r + 1) * d]
                    .iter_mut()
                    .zip(shared.as_ref().unwrap().data())
                {
                    *o += v;
                }
            }
            for (i, ffn) in moe.experts.iter().enumerate() {
                let inp = if moe.cfg.sharing == Sharing::Expansive {
                    let sh = shared.as_ref().unwrap();
                    let gate = sh.matmul(store.get(moe.w3[i])).unwrap();
                    sh.zip_map(&gate, |a, b| a * b).unwrap()
                } else {
                    xt.clone()
                };
                let y = ffn_forward(store, ffn, &inp).unwrap();
                for (o, v) in out[r * d..(r + 1) * d].iter_mut().zip(y.data()) {
                    *o += gates[i] * v;
                }
            }
        }
        Tensor::new(x.shape().to_vec(), out).unwrap()
    }

    fn layer(sharing: Sharing, n: usize, k: usize) -> (ParamStore<f64>, MoeLayer) {
        let mut store = ParamStore::new();
        let cfg = MoeConfig::equal_budget(6, n, k, 12, sharing);
        let moe = MoeLayer::init(&mut store, "moe", &cfg, 1.0, &mut rng(21)).unwrap();
        (store, moe)
    }

    #[test]
    fn variants_vanish_at_zero_input() {
        let mut store = ParamStore::<f64>::new();
        for v in FfnVariant::ALL {
            let f = Ffn::init(&mut store, v.name(), v, 4, 6, 1.0, &mut rng(1));
            let y = ffn_forward(&store, &f, &Tensor::zeros([2, 4])).unwrap();
            assert_eq!(y.max_abs(), 0.0);
        }
    }

    #[test]
    fn switanh_with_zero_v_is_closed() {
        let mut store = ParamStore::<f64>::new();
        let f = Ffn::init(
            &mut store,
            "f",
            FfnVariant::SwiTanhDglu,
            4,
            6,
            1.0,
            &mut rng(2),
        );
        *store.get_mut(f.v.unwrap()) = Tensor::zeros([4, 6]);
        let y = ffn_forward(&store, &f, &Tensor::randn([3, 4], 1.0, &mut rng(3))).unwrap();
        assert_eq!(y.max_abs(), 0.0);
    }

    #[test]
    fn variants_match_straight_line_formulas() {
        let mut store = ParamStore::<f64>::new();
        let x = Tensor::<f64>::randn([2, 4], 1.0, &mut rng(4));
        for v in FfnVariant::ALL {
            let f = Ffn::init(&mut store, v.name(), v, 4, 5, 1.0, &mut rng(5));
            let a = x
                .matmul(store.get(f.w))
                .unwrap()
                .map(|z| z / (1.0 + (-z).exp()));
            let h = match v {
                FfnVariant::Plain => a,
                _ => {
                    let b = x.matmul(store.get(f.v.unwrap())).unwrap();
                    let b = match v {
                        FfnVariant::SwiGlu => b,
                        FfnVariant::SwiSigDglu => b.map(|z| 1.0 / (1.0 + (-z).exp())),
                        _ => b.map(f64::tanh),
                    };
                    a.zip_map(&b, |p, q| p * q).unwrap()
                }
            };
            let want = h.matmul(store.get(f.w2)).unwrap();
            assert!(ffn_forward(&store, &f, &x).unwrap().max_abs_diff(&want) < 1e-12);
        }
    }

    #[test]
    fn budget_width_matches_plain_parameters() {
        assert_eq!(FfnVariant::SwiTanhDglu.budget_width(3072), 2048);
        assert_eq!(FfnVariant::Plain.budget_width(3072), 3072);
    }

    #[test]
    fn routing_examples() {
        let e = Tensor::<f64>::new([2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let g = route_topk(&[10.0, 0.0], &e, 1).unwrap();
        assert!(g[0] > 0.9999 && g[1] == 0.0);
        let full = route_topk(&[0.3, -0.2], &e, 2).unwrap();
        assert!((full.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        let tie = route_topk(&[0.0, 0.0], &e, 1).unwrap();
        assert_eq!(tie, vec![0.5, 0.0]);
        assert!(route_topk(&[0.0, 0.0], &e, 3).is_err());
    }

    #[test]
    fn sparse_dispatch_matches_dense_oracle() {
        for sharing in Sharing::ALL {
            let (store, moe) = layer(sharing, 4, 2);
            let x = Tensor::<f64>::randn([2, 5, 6], 1.0, &mut rng(6));
            let y = moe_forward(&store, &moe, &x).unwrap();
            assert!(
                y.max_abs_diff(&dense_oracle(&store, &moe, &x)) < 1e-12,
                "{sharing:?}"
            );
        }
    }

    #[test]
    fn single_expert_is_ffn_plus_residual() {
        let (store, moe) = layer(Sharing::None, 1, 1);
        let x = Tensor::<f64>::randn([1, 3, 6], 1.0, &mut rng(7));
        let want = ffn_forward(&store, &moe.experts[0], &x)
            .unwrap()
            .zip_map(&x, |a, b| a + b)
            .unwrap();
        assert!(moe_forward(&store, &moe, &x).unwrap().max_abs_diff(&want) < 1e-14);
    }

    #[test]
    fn cohesive_ratio_is_one_to_eight() {
        let (store, moe) = layer(Sharing::Cohesive, 4, 2);
        let c = moe.param_count(&store);
        assert_eq!(c.shared, 6 * 12);
        assert_eq!(c.private, 8 * 6 * 12);
        assert_eq!(c.ratio, 8.0);
        let (store, moe) = layer(Sharing::None, 4, 2);
        assert_eq!(moe.param_count(&store).shared, 0);
    }

    #[test]
    fn moe_gradient_matches_finite_differences() {
        for sharing in Sharing::ALL {
            let (store, moe) = layer(sharing, 4, 2);
            let x = Tensor::<f64>::randn([1, 4, 6], 1.0, &mut rng(8));
            let w = Tensor::<f64>::randn([1, 4, 6], 1.0, &mut rng(9));
            let mut s = Session::new(&store);
            let xv = s.g.param(x.clone());
            let (y, _) = moe.forward(&mut s, xv).unwrap();
            let wv = s.g.constant(w.clone());
            let p = s.g.mul(y, wv).unwrap();
            let loss = s.g.sum(p);
            let grads = s.backward(loss).unwrap();
            for id in moe.param_ids() {
                let fd = finite_diff_grad(
                    |p| {
                        let mut st = store.clone();
                        *st.get_mut(id) = p.clone();
                        let mut s = Session::new(&st);
                        let xv = s.g.constant(x.clone());
                        let (y, _) = moe.forward(&mut s, xv).unwrap();
                        s.g.value(y).zip_map(&w, |a, b| a * b).unwrap().sum()
                    },
                    store.get(id),
                    1e-6,
                );
                let g = grads[id.index()]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(store.get(id).shape().to_vec()));
                let err = max_rel_err(&g, &fd, 1e-4);
                assert!(err < 1e-5, "{sharing:?} {}: {err}", store.name(id));
            }
        }
    }
}
