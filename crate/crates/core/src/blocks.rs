//! Layout strings, stage tags, RMS normalisation and the full model.
//!
//! A layout is a sequence of `(mixer, ffn)` pairs written as letters: `S`
//! (selective SSM) or `A` (attention) followed by `M` (MLP) or `E` (experts).
//! `SMSMSMSMAMSMSMAM` is eight pre-norm residual layers.

use std::fmt;
use std::sync::Arc;

use crate::attention::{attention_cost, AttnConfig, AttnLayer};
use crate::autograd::{Function, Var};
use crate::error::{shape_err, Error, Result};
use crate::experts::{Ffn, FfnVariant, MoeConfig, MoeLayer, Sharing};
use crate::params::{ParamId, ParamStore, Session};
use crate::positional::{PosCtx, RopeMode, RopeTable, DEFAULT_BASE};
use crate::ssm::{Discretization, SsmConfig, SsmLayer};
use crate::tensor::{rng, Real, Tensor};

pub const RMS_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mixer {
    Ssm,
    Attn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FfnKind {
    Mlp,
    Moe,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LayoutSpec {
    pub pairs: Vec<(Mixer, FfnKind)>,
}

impl LayoutSpec {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn render(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for LayoutSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (m, k) in &self.pairs {
            let a = if *m == Mixer::Ssm { 'S' } else { 'A' };
            let b = if *k == FfnKind::Mlp { 'M' } else { 'E' };
            write!(f, "{a}{b}")?;
        }
        Ok(())
    }
}

impl std::str::FromStr for LayoutSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        parse_layout(s)
    }
}

impl serde::Serialize for LayoutSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.render())
    }
}

impl<'de> serde::Deserialize<'de> for LayoutSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        parse_layout(&s).map_err(serde::de::Error::custom)
    }
}

/// Parses a compact layout (`SMSMAM`) or a sum of repeated segments
/// (`SM + SE×11 + AE×2`; `x` and `*` also work as the repeat sign).
/// Errors carry the character offset in `s`.
pub fn parse_layout(s: &str) -> Result<LayoutSpec> {
    let mut pairs = Vec::new();
    let mut offset = 0;
    for segment in s.split('+') {
        let lead = segment.len() - segment.trim_start().len();
        let body = segment.trim();
        let base = offset + lead;
        let (letters, reps) = match body.find(['×', 'x', '*']) {
            Some(i) => {
                let sign_len = body[i..].chars().next().unwrap().len_utf8();
                let count = body[i + sign_len..].trim();
                let n: usize = count.parse().map_err(|_| Error::Parse {
                    pos: base + i + sign_len,
                    msg: format!("bad repeat count `{count}`"),
                })?;
                if n == 0 {
                    return Err(Error::Parse {
                        pos: base + i + sign_len,
                        msg: "repeat count must be positive".into(),
                    });
                }
                (body[..i].trim_end(), n)
            }
            None => (body, 1),
        };
        if letters.is_empty() {
            return Err(Error::Parse {
                pos: base,
                msg: "empty layout segment".into(),
            });
        }
        let mut seg = Vec::new();
        let chars: Vec<(usize, char)> = letters.char_indices().collect();
        for (k, &(i, c)) in chars.iter().enumerate() {
            let pos = base + i;
            if k % 2 == 0 {
                let m = match c {
                    'S' => Mixer::Ssm,
                    'A' => Mixer::Attn,
                    _ => {
                        return Err(Error::Parse {
                            pos,
                            msg: format!("expected S or A, found `{c}`"),
                        })
                    }
                };
                seg.push((m, FfnKind::Mlp));
            } else {
                seg.last_mut().unwrap().1 = match c {
                    'M' => FfnKind::Mlp,
                    'E' => FfnKind::Moe,
                    _ => {
                        return Err(Error::Parse {
                            pos,
                            msg: format!("expected M or E, found `{c}`"),
                        })
                    }
                };
            }
        }
        if !chars.len().is_multiple_of(2) {
            return Err(Error::Parse {
                pos: base + letters.len(),
                msg: "layout ends with a mixer and no FFN letter".into(),
            });
        }
        for _ in 0..reps {
            pairs.extend_from_slice(&seg);
        }
        offset += segment.len() + 1;
    }
    Ok(LayoutSpec { pairs })
}

/// Named stage a layer belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Observer,
    Thinker,
    Conceiver,
    Expresser,
}

/// Observer: leading SSM layers; Expresser: a final `AM` pair when enabled;
/// Conceiver: the SSM run right before the tail; Thinker: everything between.
pub fn stage_tags(layout: &LayoutSpec, expresser: bool) -> Vec<Stage> {
    let n = layout.len();
    let mut tags = vec![Stage::Thinker; n];
    let mut end = n;
    if expresser && n > 0 && layout.pairs[n - 1] == (Mixer::Attn, FfnKind::Mlp) {
        tags[n - 1] = Stage::Expresser;
        end -= 1;
    }
    let first_attn = layout.pairs[..end].iter().position(|p| p.0 == Mixer::Attn);
    let Some(first_attn) = first_attn else {
        tags[..end].iter_mut().for_each(|t| *t = Stage::Observer);
        return tags;
    };
    tags[..first_attn]
        .iter_mut()
        .for_each(|t| *t = Stage::Observer);
    let mut i = end;
    while i > first_attn && layout.pairs[i - 1].0 == Mixer::Ssm {
        i -= 1;
        tags[i] = Stage::Conceiver;
    }
    tags
}

/// `x / sqrt(mean(x²) + ε) ⊙ w` over the last axis.
pub fn rmsnorm<T: Real>(x: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    let d = x.last_dim();
    if w.numel() != d || d == 0 {
        return Err(shape_err("rmsnorm", x.shape(), w.shape()));
    }
    let eps = T::of(RMS_EPS);
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(d) {
        let ms = row.iter().map(|&v| v * v).sum::<T>() / T::of(d as f64);
        let r = T::one() / (ms + eps).sqrt();
        for (v, &wi) in row.iter_mut().zip(w.data()) {
            *v = *v * r * wi;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

struct RmsNormFn;

impl<T: Real> Function<T> for RmsNormFn {
    fn name(&self) -> &'static str {
        "rmsnorm"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (x, w) = (inputs[0], inputs[1]);
        let d = x.last_dim();
        let eps = T::of(RMS_EPS);
        let inv_d = T::one() / T::of(d as f64);
        let mut gx = vec![T::zero(); x.numel()];
        let mut gw = vec![T::zero(); d];
        for ((xr, gr), gxr) in x
            .data()
            .chunks(d)
            .zip(grad.data().chunks(d))
            .zip(gx.chunks_mut(d))
        {
            let ms = xr.iter().map(|&v| v * v).sum::<T>() * inv_d;
            let r = T::one() / (ms + eps).sqrt();
            let mut dot = T::zero();
            for k in 0..d {
                dot += gr[k] * w.data()[k] * xr[k];
                gw[k] += gr[k] * xr[k] * r;
            }
            let c = dot * r * r * r * inv_d;
            for k in 0..d {
                gxr[k] = gr[k] * w.data()[k] * r - xr[k] * c;
            }
        }
        Ok(vec![
            needs[0]
                .then(|| Tensor::new(x.shape().to_vec(), gx))
                .transpose()?,
            needs[1]
                .then(|| Tensor::new(w.shape().to_vec(), gw))
                .transpose()?,
        ])
    }
}

fn rmsnorm_var<T: Real>(s: &mut Session<T>, x: Var, w: ParamId) -> Result<Var> {
    let w = s.param(w);
    let y = rmsnorm(s.g.value(x), s.g.value(w))?;
    Ok(s.g.custom(&[x, w], y, Box::new(RmsNormFn)))
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct OtceConfig {
    pub d_model: usize,
    pub n_heads: usize,
    /// Key/value heads in each attention layer.
    pub kv_groups: usize,
    pub d_state: usize,
    pub vocab: usize,
    pub layout: LayoutSpec,
    pub rope_mode: RopeMode,
    pub rope_base: f64,
    /// Longest sequence the rotary tables cover.
    pub max_len: usize,
    /// Enables log-length query scaling with this training length.
    pub length_base: Option<usize>,
    pub ssm_expand: usize,
    /// Convolution width of SSM layers without rotary positions.
    pub conv_width: usize,
    pub discretization: Discretization,
    pub ffn_hidden: usize,
    pub mlp_variant: FfnVariant,
    /// Hidden width of the last layer's MLP when it differs from `ffn_hidden`.
    pub tail_ffn_hidden: Option<usize>,
    pub n_experts: usize,
    pub top_k: usize,
    pub sharing: Sharing,
    /// Cohesive-equivalent expert width; other sharing modes are sized to the
    /// same budget.
    pub moe_hidden: usize,
    pub aux_coef: f64,
    pub expresser: bool,
}

impl OtceConfig {
    /// Small defaults around a given layout; everything else is public.
    pub fn small(layout: &str, d_model: usize, vocab: usize) -> Result<Self> {
        let layout = parse_layout(layout)?;
        let expresser = layout.pairs.last() == Some(&(Mixer::Attn, FfnKind::Mlp));
        Ok(OtceConfig {
            d_model,
            n_heads: 2,
            kv_groups: 2,
            d_state: 8,
            vocab,
            layout,
            rope_mode: RopeMode::Both,
            rope_base: DEFAULT_BASE,
            max_len: 512,
            length_base: None,
            ssm_expand: 2,
            conv_width: 4,
            discretization: Discretization::Exact,
            ffn_hidden: 4 * d_model,
            mlp_variant: FfnVariant::SwiTanhDglu,
            tail_ffn_hidden: None,
            n_experts: 4,
            top_k: 2,
            sharing: Sharing::Cohesive,
            moe_hidden: 2 * d_model,
            aux_coef: 0.0,
            expresser,
        })
    }

    /// Eight-layer configuration at model width 1024 with the given layout
    /// (convolution positions, no rotary positions, no experts).
    pub fn base_1024(layout: &str) -> Result<Self> {
        let mut c = Self::small(layout, 1024, 130_528)?;
        c.n_heads = 16;
        c.kv_groups = 8;
        c.d_state = 16;
        c.rope_mode = RopeMode::None;
        c.ffn_hidden = 4096;
        c.max_len = 4096;
        Ok(c)
    }

    pub fn n_layers(&self) -> usize {
        self.layout.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layout.is_empty() {
            return Err(Error::Config("empty layout".into()));
        }
        if self.expresser && self.layout.pairs.last() != Some(&(Mixer::Attn, FfnKind::Mlp)) {
            return Err(Error::Config(format!(
                "expresser enabled but layout `{}` does not end with AM",
                self.layout
            )));
        }
        if self.vocab == 0 || self.d_model == 0 {
            return Err(Error::Config("vocab and d_model must be positive".into()));
        }
        if let Some(b) = self.length_base {
            if b < 2 {
                return Err(Error::Config(format!(
                    "length base must be at least 2, got {b}"
                )));
            }
        }
        self.attn_config().validate()?;
        if self.layout.pairs.iter().any(|p| p.1 == FfnKind::Moe) {
            self.moe_config().validate()?;
        }
        if self.rope_mode.ssm() && !self.d_state.is_multiple_of(2) {
            return Err(Error::Config(
                "rotary SSM needs an even state dimension".into(),
            ));
        }
        Ok(())
    }

    pub fn ssm_config(&self) -> SsmConfig {
        let mut c = SsmConfig::new(self.d_model, self.d_state, self.rope_mode.ssm());
        c.expand = self.ssm_expand;
        if !c.rope {
            c.conv_width = self.conv_width;
        }
        c.discretization = self.discretization;
        c
    }

    pub fn attn_config(&self) -> AttnConfig {
        AttnConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_kv_groups: self.kv_groups,
            rope: self.rope_mode.attn(),
        }
    }

    pub fn moe_config(&self) -> MoeConfig {
        let mut c = MoeConfig::equal_budget(
            self.d_model,
            self.n_experts,
            self.top_k,
            self.moe_hidden,
            self.sharing,
        );
        c.aux_coef = self.aux_coef;
        c
    }

    fn mlp_params(&self, hidden: usize) -> usize {
        self.d_model * hidden * if self.mlp_variant.gated() { 3 } else { 2 }
    }

    /// Per-class parameter totals from the layer configurations, and forward
    /// FLOPs of the attention and scan kernels at batch `b`, length `l`.
    pub fn report(&self, b: u64, l: u64) -> Result<ModelReport> {
        let cfg = self;
        let d = cfg.d_model;
        let ssm_cfg = cfg.ssm_config();
        let mut rep = ModelReport {
            embedding: cfg.vocab * d,
            ssm: 0,
            attn: 0,
            mlp: 0,
            moe: 0,
            norm: (2 * cfg.n_layers() + 1) * d,
            total: 0,
            attn_flops: 0,
            ssm_scan_flops: 0,
        };
        for (i, &(m, f)) in cfg.layout.pairs.iter().enumerate() {
            match m {
                Mixer::Ssm => {
                    rep.ssm += ssm_cfg.param_count();
                    rep.ssm_scan_flops +=
                        3 * 2 * (b * l) as u128 * (ssm_cfg.inner() * ssm_cfg.d_state) as u128;
                }
                Mixer::Attn => {
                    rep.attn += cfg.attn_config().param_count();
                    rep.attn_flops +=
                        attention_cost(b, l, d as u64, cfg.n_heads as u64)?.flops_total;
                }
            }
            match f {
                FfnKind::Mlp => {
                    let hidden = match cfg.tail_ffn_hidden {
                        Some(h) if i + 1 == cfg.n_layers() => h,
                        _ => cfg.ffn_hidden,
                    };
                    rep.mlp += cfg.mlp_params(hidden);
                }
                FfnKind::Moe => rep.moe += cfg.moe_params(),
            }
        }
        rep.total = rep.embedding + rep.ssm + rep.attn + rep.mlp + rep.moe + rep.norm;
        Ok(rep)
    }

    fn moe_params(&self) -> usize {
        let c = self.moe_config();
        let d = self.d_model;
        let m = if c.variant.gated() { 3 } else { 2 };
        let router = c.n_experts * d;
        match c.sharing {
            Sharing::None => router + c.n_experts * m * d * c.expert_hidden,
            Sharing::Cohesive => {
                router + d * c.expert_hidden + c.n_experts * 2 * d * c.expert_hidden
            }
            Sharing::Sei => {
                router + m * d * c.shared_hidden + c.n_experts * m * d * c.expert_hidden
            }
            Sharing::Expansive => {
                router + m * d * c.shared_hidden + c.n_experts * (d * d + m * d * c.expert_hidden)
            }
        }
    }
}

#[derive(Clone, Debug)]
pub enum MixerLayer {
    Ssm(SsmLayer),
    Attn(AttnLayer),
}

#[derive(Clone, Debug)]
pub enum FfnLayer {
    Mlp(Ffn),
    Moe(MoeLayer),
}

#[derive(Clone, Debug)]
pub struct Block {
    pub stage: Stage,
    pub norm1: ParamId,
    pub mixer: MixerLayer,
    pub norm2: ParamId,
    pub ffn: FfnLayer,
}

#[derive(Clone, Debug)]
pub struct OtceModel<T> {
    pub cfg: OtceConfig,
    pub store: ParamStore<T>,
    /// `[vocab, D]`, also the output head.
    pub embed: ParamId,
    pub blocks: Vec<Block>,
    pub final_norm: ParamId,
}

/// Parameter totals per class plus attention and scan FLOPs for one forward
/// pass. FLOPs count a multiply-add as 2.
#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct ModelReport {
    pub embedding: usize,
    pub ssm: usize,
    pub attn: usize,
    pub mlp: usize,
    pub moe: usize,
    pub norm: usize,
    pub total: usize,
    pub attn_flops: u128,
    /// `3·B·L·E·N·2` per SSM layer (state decay, input write, readout).
    pub ssm_scan_flops: u128,
}

impl<T: Real> OtceModel<T> {
    pub fn build(cfg: &OtceConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut r = rng(seed);
        let mut store = ParamStore::new();
        let d = cfg.d_model;
        let embed = store.normal("embed", &[cfg.vocab, d], 1.0 / (d as f64).sqrt(), &mut r);
        let out_scale = 1.0 / (2.0 * cfg.n_layers() as f64).sqrt();
        let ssm_table = cfg
            .rope_mode
            .ssm()
            .then(|| RopeTable::new(cfg.d_state, cfg.max_len, cfg.rope_base).map(Arc::new))
            .transpose()?;
        let attn_cfg = cfg.attn_config();
        let attn_table = cfg
            .rope_mode
            .attn()
            .then(|| RopeTable::new(attn_cfg.head_dim(), cfg.max_len, cfg.rope_base).map(Arc::new))
            .transpose()?;
        let tags = stage_tags(&cfg.layout, cfg.expresser);
        let mut blocks = Vec::with_capacity(cfg.n_layers());
        for (i, &(m, f)) in cfg.layout.pairs.iter().enumerate() {
            let p = format!("layers.{i}");
            let norm1 = store.add(format!("{p}.norm1"), Tensor::ones([d]));
            let mixer = match m {
                Mixer::Ssm => MixerLayer::Ssm(SsmLayer::init(
                    &mut store,
                    &format!("{p}.ssm"),
                    &cfg.ssm_config(),
                    ssm_table.clone(),
                    out_scale,
                    &mut r,
                )?),
                Mixer::Attn => MixerLayer::Attn(AttnLayer::init(
                    &mut store,
                    &format!("{p}.attn"),
                    &attn_cfg,
                    attn_table.clone(),
                    out_scale,
                    &mut r,
                )?),
            };
            let norm2 = store.add(format!("{p}.norm2"), Tensor::ones([d]));
            let ffn = match f {
                FfnKind::Mlp => {
                    let hidden = match cfg.tail_ffn_hidden {
                        Some(h) if i + 1 == cfg.n_layers() => h,
                        _ => cfg.ffn_hidden,
                    };
                    FfnLayer::Mlp(Ffn::init(
                        &mut store,
                        &format!("{p}.mlp"),
                        cfg.mlp_variant,
                        d,
                        hidden,
                        out_scale,
                        &mut r,
                    ))
                }
                FfnKind::Moe => FfnLayer::Moe(MoeLayer::init(
                    &mut store,
                    &format!("{p}.moe"),
                    &cfg.moe_config(),
                    out_scale,
                    &mut r,
                )?),
            };
            blocks.push(Block {
                stage: tags[i],
                norm1,
                mixer,
                norm2,
                ffn,
            });
        }
        let final_norm = store.add("final_norm", Tensor::ones([d]));
        Ok(OtceModel {
            cfg: cfg.clone(),
            store,
            embed,
            blocks,
            final_norm,
        })
    }

    pub fn num_params(&self) -> usize {
        self.store.numel()
    }

    /// `tokens: [B·L]` row-major → logits `[B, L, vocab]`, plus the summed
    /// router auxiliary loss when any is enabled.
    pub fn forward(
        &self,
        s: &mut Session<T>,
        tokens: &[usize],
        batch: usize,
        len: usize,
    ) -> Result<(Var, Option<Var>)> {
        if tokens.len() != batch * len || len == 0 {
            return Err(shape_err("model_forward", &[tokens.len()], &[batch, len]));
        }
        if len > self.cfg.max_len {
            return Err(Error::Index(format!(
                "sequence length {len} exceeds max_len {}",
                self.cfg.max_len
            )));
        }
        let ctx = PosCtx {
            positions: (0..len as i64).collect(),
            length_base: self.cfg.length_base,
        };
        let e = s.param(self.embed);
        let mut h = s.g.embedding(e, tokens, &[batch, len])?;
        let mut aux: Option<Var> = None;
        for b in &self.blocks {
            let x = rmsnorm_var(s, h, b.norm1)?;
            let y = match &b.mixer {
                MixerLayer::Ssm(l) => l.forward(s, x, &ctx)?,
                MixerLayer::Attn(l) => l.forward(s, x, &ctx, true)?,
            };
            h = s.g.add(h, y)?;
            let x = rmsnorm_var(s, h, b.norm2)?;
            let y = match &b.ffn {
                FfnLayer::Mlp(f) => f.forward(s, x)?,
                FfnLayer::Moe(m) => {
                    let (y, a) = m.forward(s, x)?;
                    if let Some(a) = a {
                        aux = Some(match aux {
                            Some(t) => s.g.add(t, a)?,
                            None => a,
                        });
                    }
                    y
                }
            };
            h = s.g.add(h, y)?;
        }
        let h = rmsnorm_var(s, h, self.final_norm)?;
        let logits = s.g.matmul_t(h, e)?;
        Ok((logits, aux))
    }

    /// Masked next-token cross-entropy (plus router loss).
    pub fn loss(
        &self,
        s: &mut Session<T>,
        tokens: &[usize],
        targets: &[usize],
        mask: &[bool],
        batch: usize,
        len: usize,
    ) -> Result<Var> {
        let (logits, aux) = self.forward(s, tokens, batch, len)?;
        let ce = s.g.cross_entropy(logits, targets, mask)?;
        match aux {
            Some(a) => s.g.add(ce, a),
            None => Ok(ce),
        }
    }

    /// Logits on plain data.
    pub fn logits(&self, tokens: &[usize], batch: usize, len: usize) -> Result<Tensor<T>> {
        let mut s = Session::new(&self.store);
        let (l, _) = self.forward(&mut s, tokens, batch, len)?;
        Ok(s.g.value(l).clone())
    }

    pub fn report(&self, b: u64, l: u64) -> Result<ModelReport> {
        self.cfg.report(b, l)
    }
}

/// `u = h + Attn(norm(h))`, `out = u + MLP(norm(u))` for the final block.
pub fn expresser_forward<T: Real>(model: &OtceModel<T>, h: &Tensor<T>) -> Result<Tensor<T>> {
    let b = model
        .blocks
        .last()
        .filter(|b| b.stage == Stage::Expresser)
        .ok_or_else(|| Error::Config("model has no expresser block".into()))?;
    let (MixerLayer::Attn(attn), FfnLayer::Mlp(mlp)) = (&b.mixer, &b.ffn) else {
        return Err(Error::Config(
            "expresser block must be attention + MLP".into(),
        ));
    };
    let mut s = Session::new(&model.store);
    let hv = s.g.constant(h.clone());
    let len = h.shape().get(1).copied().unwrap_or(0);
    let ctx = PosCtx {
        positions: (0..len as i64).collect(),
        length_base: model.cfg.length_base,
    };
    let x = rmsnorm_var(&mut s, hv, b.norm1)?;
    let a = attn.forward(&mut s, x, &ctx, true)?;
    let u = s.g.add(hv, a)?;
    let x = rmsnorm_var(&mut s, u, b.norm2)?;
    let m = mlp.forward(&mut s, x)?;
    let out = s.g.add(u, m)?;
    Ok(s.g.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{finite_diff_grad, max_rel_err};

    #[test]
    fn parses_table_layout() {
        let l = parse_layout("SMSMSMSMAMSMSMAM").unwrap();
        assert_eq!(l.len(), 8);
        let attn: Vec<usize> = (0..8).filter(|&i| l.pairs[i].0 == Mixer::Attn).collect();
        assert_eq!(attn, vec![4, 7]);
        assert_eq!(l.render(), "SMSMSMSMAMSMSMAM");
        assert_eq!(
            parse_layout("SE").unwrap().pairs,
            vec![(Mixer::Ssm, FfnKind::Moe)]
        );
    }

    #[test]
    fn parses_expanded_form() {
        let l = parse_layout("SM + SE×11 + AE×2 + SE×8 + SM + AM").unwrap();
        assert_eq!(l.len(), 24);
        assert_eq!(l.pairs[0], (Mixer::Ssm, FfnKind::Mlp));
        assert_eq!(l.pairs[12], (Mixer::Attn, FfnKind::Moe));
        assert_eq!(l.pairs[23], (Mixer::Attn, FfnKind::Mlp));
    }

    #[test]
    fn parse_errors_report_position() {
        match parse_layout("SMSX") {
            Err(Error::Parse { pos, .. }) => assert_eq!(pos, 3),
            other => panic!("{other:?}"),
        }
        match parse_layout("SMS") {
            Err(Error::Parse { pos, .. }) => assert_eq!(pos, 3),
            other => panic!("{other:?}"),
        }
        match parse_layout("SM + QM") {
            Err(Error::Parse { pos, .. }) => assert_eq!(pos, 5),
            other => panic!("{other:?}"),
        }
        assert!(parse_layout("").is_err());
        assert!(parse_layout("SM×0").is_err());
    }

    #[test]
    fn stage_tags_follow_layout() {
        use Stage::*;
        let otce = stage_tags(&parse_layout("SMSMSMSMAMSMSMAM").unwrap(), true);
        assert_eq!(
            otce,
            vec![Observer, Observer, Observer, Observer, Thinker, Conceiver, Conceiver, Expresser]
        );
        let jamba = stage_tags(&parse_layout("SMSMSMSMAMSMSMSM").unwrap(), false);
        assert_eq!(jamba[7], Conceiver);
        assert_eq!(jamba[4], Thinker);
    }

    #[test]
    fn expresser_requires_am_tail() {
        let mut c = OtceConfig::small("SMSM", 8, 11).unwrap();
        assert!(!c.expresser);
        c.expresser = true;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn rmsnorm_matches_formula_and_is_scale_invariant() {
        let x = Tensor::<f64>::randn([3, 5], 1.0, &mut rng(1));
        let w = Tensor::<f64>::randn([5], 1.0, &mut rng(2));
        let y = rmsnorm(&x, &w).unwrap();
        for (r, row) in x.data().chunks(5).enumerate() {
            let rms = (row.iter().map(|v| v * v).sum::<f64>() / 5.0 + RMS_EPS).sqrt();
            for (k, (&v, &g)) in row.iter().zip(w.data()).enumerate() {
                assert!((y.at(&[r, k]) - v / rms * g).abs() < 1e-12);
            }
        }
        let y3 = rmsnorm(&x.map(|v| 3.0 * v), &w).unwrap();
        assert!(y3.max_abs_diff(&y) < 1e-5);
    }

    #[test]
    fn same_seed_builds_identical_parameters() {
        let c = OtceConfig::small("SMAE", 8, 11).unwrap();
        let a = OtceModel::<f64>::build(&c, 3).unwrap();
        let b = OtceModel::<f64>::build(&c, 3).unwrap();
        for id in a.store.ids() {
            assert_eq!(a.store.get(id), b.store.get(id));
        }
    }

    #[test]
    fn forward_shape_causality_and_range_check() {
        let c = OtceConfig::small("SMAM", 8, 11).unwrap();
        let m = OtceModel::<f64>::build(&c, 4).unwrap();
        let toks = [1, 2, 3, 4, 5, 6];
        let l = m.logits(&toks, 1, 6).unwrap();
        assert_eq!(l.shape(), &[1, 6, 11]);
        assert!(l.all_finite());
        let l2 = m.logits(&[1, 2, 3, 4, 9, 0], 1, 6).unwrap();
        assert!(l.data()[..4 * 11]
            .iter()
            .zip(&l2.data()[..4 * 11])
            .all(|(a, b)| (a - b).abs() < 1e-9));
        assert!(matches!(m.logits(&[11], 1, 1), Err(Error::Index(_))));
        assert!(m.logits(&[3], 1, 1).unwrap().all_finite());
    }

    #[test]
    fn report_matches_flat_enumeration() {
        for layout in ["SMAM", "SEAE", "SMSEAESM"] {
            for sharing in Sharing::ALL {
                for rope in RopeMode::ALL {
                    let mut c = OtceConfig::small(layout, 12, 17).unwrap();
                    c.sharing = sharing;
                    c.rope_mode = rope;
                    let m = OtceModel::<f32>::build(&c, 0).unwrap();
                    assert_eq!(
                        m.report(1, 1).unwrap().total,
                        m.num_params(),
                        "{layout} {sharing:?} {rope:?}"
                    );
                }
            }
        }
    }

    #[test]
    fn zero_output_projection_makes_expresser_a_pass_through() {
        let c = OtceConfig::small("SMAM", 8, 11).unwrap();
        let mut m = OtceModel::<f64>::build(&c, 5).unwrap();
        let last = m.blocks.last().unwrap().clone();
        let MixerLayer::Attn(a) = &last.mixer else {
            panic!()
        };
        *m.store.get_mut(a.w_o) = Tensor::zeros([8, 8]);
        let h = Tensor::<f64>::randn([1, 4, 8], 1.0, &mut rng(6));
        let out = expresser_forward(&m, &h).unwrap();
        let FfnLayer::Mlp(f) = &last.ffn else {
            panic!()
        };
        let normed = rmsnorm(&h, m.store.get(last.norm2)).unwrap();
        let want = crate::experts::ffn_forward(&m.store, f, &normed)
            .unwrap()
            .zip_map(&h, |a, b| a + b)
            .unwrap();
        assert!(out.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn base_1024_parameter_totals() {
        let otce = OtceConfig::base_1024("SMSMSMSMAMSMSMAM")
            .unwrap()
            .report(1, 1)
            .unwrap();
        let jamba = OtceConfig::base_1024("SMSMSMSMAMSMSMSM")
            .unwrap()
            .report(1, 1)
            .unwrap();
        let close = |got: usize, want: f64| ((got as f64 - want) / want).abs() < 0.02;
        assert!(close(otce.total, 281e6), "{otce:?}");
        assert!(close(jamba.total, 283e6), "{jamba:?}");
        assert_eq!(otce.attn, 2 * 3_145_728);
        assert_eq!(jamba.ssm - otce.ssm, otce.ssm / 6);
    }

    #[test]
    fn rmsnorm_gradient_matches_finite_differences() {
        let x = Tensor::<f64>::randn([2, 6], 1.0, &mut rng(7));
        let w = Tensor::<f64>::randn([6], 1.0, &mut rng(8));
        let p = Tensor::<f64>::randn([2, 6], 1.0, &mut rng(9));
        let mut store = ParamStore::new();
        let wid = store.add("w", w.clone());
        let mut s = Session::new(&store);
        let xv = s.g.param(x.clone());
        let y = rmsnorm_var(&mut s, xv, wid).unwrap();
        let pv = s.g.constant(p.clone());
        let q = s.g.mul(y, pv).unwrap();
        let loss = s.g.sum(q);
        let gw = s.backward(loss).unwrap()[wid.index()].clone().unwrap();
        let gx = s.g.backward(loss).unwrap().take(xv).unwrap();
        let f = |x: &Tensor<f64>, w: &Tensor<f64>| {
            rmsnorm(x, w)
                .unwrap()
                .zip_map(&p, |a, b| a * b)
                .unwrap()
                .sum()
        };
        assert!(max_rel_err(&gx, &finite_diff_grad(|x| f(x, &w), &x, 1e-6), 1e-3) < 1e-7);
        assert!(max_rel_err(&gw, &finite_diff_grad(|w| f(&x, w), &w, 1e-6), 1e-3) < 1e-7);
    }
}
