//! Selective state-space layer.
//!
//! The standalone functions ([`selective_project`], [`discretize_zoh`],
//! [`scan_recurrent`], [`materialize_sss`], [`s6_rope_forward`]) work on plain
//! tensors and mirror the textbook formulation step by step. [`SsmLayer`] is the
//! trainable block used by models; its scan is one fused kernel that never
//! materialises the `[B, L, D, N]` discretised tensors.

use std::sync::Arc;

use rand::Rng as _;

use crate::autograd::{softplus, Function, Var};
use crate::error::{shape_err, Error, Result};
use crate::params::{ParamId, ParamStore, Session};
use crate::positional::{apply_rope, length_scale_tensor, rope, rope_query, PosCtx, RopeTable};
use crate::tensor::{Real, Rng, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Discretization {
    /// Zero-order hold: `dB = (exp(Δ·A) − 1)/A · B`.
    #[default]
    Exact,
    /// First-order: `dB = Δ·B`.
    Euler,
}

impl std::str::FromStr for Discretization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" | "zoh" => Ok(Discretization::Exact),
            "euler" => Ok(Discretization::Euler),
            _ => Err(Error::Config(format!(
                "unknown discretization `{s}` (exact|euler)"
            ))),
        }
    }
}

/// `(dA, coef)` with `dB = coef·B`.
#[inline(always)]
fn zoh<T: Real>(dt: T, a: T, mode: Discretization) -> (T, T) {
    let x = dt * a;
    match mode {
        Discretization::Euler => (x.exp(), dt),
        Discretization::Exact if a == T::zero() => (T::one(), dt),
        // One transcendental per element; `exp − 1` only where it keeps
        // full relative precision.
        Discretization::Exact if x.abs() < T::of(1e-2) => {
            let m = x.exp_m1();
            (m + T::one(), m / a)
        }
        Discretization::Exact => {
            let da = x.exp();
            (da, (da - T::one()) / a)
        }
    }
}

fn dims3<T: Real>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [b, l, d] => Ok((b, l, d)),
        _ => Err(shape_err(op, t.shape(), &[0, 0, 0])),
    }
}

/// Input-dependent projections of the selective scan.
#[derive(Clone, Debug)]
pub struct SelectiveWeights<T> {
    /// `[D, N]`
    pub w_b: Tensor<T>,
    /// `[D, N]`
    pub w_c: Tensor<T>,
    /// `[D, R]`
    pub w_dt_down: Tensor<T>,
    /// `[R, D]`
    pub w_dt_up: Tensor<T>,
    /// `[D]`
    pub dt_bias: Tensor<T>,
}

/// `Δ = softplus(x·W_dt + dt_bias)`, `B = x·W_b`, `C = x·W_c`.
pub fn selective_project<T: Real>(
    x: &Tensor<T>,
    w: &SelectiveWeights<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (_, _, d) = dims3("selective_project", x)?;
    if w.dt_bias.numel() != d {
        return Err(shape_err("selective_project", x.shape(), w.dt_bias.shape()));
    }
    let b = x.matmul(&w.w_b)?;
    let c = x.matmul(&w.w_c)?;
    let mut dt = x.matmul(&w.w_dt_down)?.matmul(&w.w_dt_up)?;
    let bias = w.dt_bias.data();
    for (i, v) in dt.data_mut().iter_mut().enumerate() {
        *v = softplus(*v + bias[i % d]);
    }
    Ok((dt, b, c))
}

/// Discretises a diagonal `A` (`[D, N]`, entries ≤ 0) per token:
/// returns `dA, dB` of shape `[B, L, D, N]`.
pub fn discretize_zoh<T: Real>(
    dt: &Tensor<T>,
    a: &Tensor<T>,
    bmat: &Tensor<T>,
    mode: Discretization,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (bs, l, d) = dims3("discretize_zoh", dt)?;
    let n = a.last_dim();
    if a.shape() != [d, n] || bmat.shape() != [bs, l, n] {
        return Err(shape_err("discretize_zoh", a.shape(), bmat.shape()));
    }
    if let Some(bad) = dt.data().iter().find(|v| **v <= T::zero()) {
        return Err(Error::Domain {
            op: "discretize_zoh",
            msg: format!("step size must be positive, got {bad}"),
        });
    }
    let shape = vec![bs, l, d, n];
    let mut da = Vec::with_capacity(bs * l * d * n);
    let mut db = Vec::with_capacity(bs * l * d * n);
    for bl in 0..bs * l {
        let brow = &bmat.data()[bl * n..(bl + 1) * n];
        for e in 0..d {
            let step = dt.data()[bl * d + e];
            for (k, &bk) in brow.iter().enumerate() {
                let (x, coef) = zoh(step, a.data()[e * n + k], mode);
                da.push(x);
                db.push(coef * bk);
            }
        }
    }
    Ok((Tensor::new(shape.clone(), da)?, Tensor::new(shape, db)?))
}

/// `h_t = dA_t ⊙ h_{t−1} + dB_t·x_t`, `y_t = Σ_n C_t ⊙ h_t (+ D ⊙ x_t)` from
/// a zero prior state.
pub fn scan_recurrent<T: Real>(
    da: &Tensor<T>,
    db: &Tensor<T>,
    cmat: &Tensor<T>,
    x: &Tensor<T>,
    d_skip: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let (bs, l, d) = dims3("scan_recurrent", x)?;
    let n = cmat.last_dim();
    if da.shape() != [bs, l, d, n] || db.shape() != da.shape() || cmat.shape() != [bs, l, n] {
        return Err(shape_err("scan_recurrent", da.shape(), cmat.shape()));
    }
    if let Some(s) = d_skip {
        if s.numel() != d {
            return Err(shape_err("scan_recurrent", s.shape(), &[d]));
        }
    }
    let mut y = vec![T::zero(); bs * l * d];
    let mut h = vec![T::zero(); d * n];
    for b in 0..bs {
        h.iter_mut().for_each(|v| *v = T::zero());
        for t in 0..l {
            let bl = b * l + t;
            let c = &cmat.data()[bl * n..(bl + 1) * n];
            for e in 0..d {
                let xv = x.data()[bl * d + e];
                let off = (bl * d + e) * n;
                let mut acc = T::zero();
                for k in 0..n {
                    let hk = &mut h[e * n + k];
                    *hk = da.data()[off + k] * *hk + db.data()[off + k] * xv;
                    acc += c[k] * *hk;
                }
                if let Some(s) = d_skip {
                    acc += s.data()[e] * xv;
                }
                y[bl * d + e] = acc;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), y)
}

/// Semiseparable matrix `M[j, i] = (a_j ⋯ a_{i+1})·⟨C_j, B_i⟩` for `j ≥ i`.
///
/// With `a` of shape `[B, L]` the result is `[B, L, L]`; with a per-channel
/// `[B, L, D]` it is `[B, D, L, L]`.
pub fn materialize_sss<T: Real>(
    a: &Tensor<T>,
    bmat: &Tensor<T>,
    cmat: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (bs, l, n) = dims3("materialize_sss", bmat)?;
    if cmat.shape() != bmat.shape() || a.ndim() < 2 || a.shape()[..2] != [bs, l] || a.ndim() > 3 {
        return Err(shape_err("materialize_sss", a.shape(), bmat.shape()));
    }
    let ch = if a.ndim() == 3 { a.shape()[2] } else { 1 };
    let mut m = vec![T::zero(); bs * ch * l * l];
    for b in 0..bs {
        for e in 0..ch {
            let mat = &mut m[(b * ch + e) * l * l..(b * ch + e + 1) * l * l];
            for j in 0..l {
                let cj = &cmat.data()[(b * l + j) * n..(b * l + j + 1) * n];
                let mut prod = T::one();
                for i in (0..=j).rev() {
                    let bi = &bmat.data()[(b * l + i) * n..(b * l + i + 1) * n];
                    let dot: T = cj.iter().zip(bi).map(|(&x, &y)| x * y).sum();
                    mat[j * l + i] = prod * dot;
                    prod *= a.data()[(b * l + i) * ch + e];
                }
            }
        }
    }
    let shape = if a.ndim() == 3 {
        vec![bs, ch, l, l]
    } else {
        vec![bs, l, l]
    };
    Tensor::new(shape, m)
}

/// Selective scan with rotary positions on `B` and `C`: projection, rotation,
/// discretisation, scan. No convolution and no skip term.
pub fn s6_rope_forward<T: Real>(
    x: &Tensor<T>,
    pos_ids: &[i64],
    w: &SelectiveWeights<T>,
    a: &Tensor<T>,
    table: &RopeTable,
    mode: Discretization,
) -> Result<Tensor<T>> {
    if table.dim() != w.w_b.last_dim() {
        return Err(shape_err("s6_rope_forward", &[table.dim()], w.w_b.shape()));
    }
    let (dt, b, c) = selective_project(x, w)?;
    let b = apply_rope(&b, pos_ids, table)?;
    let c = apply_rope(&c, pos_ids, table)?;
    let (da, db) = discretize_zoh(&dt, a, &b, mode)?;
    scan_recurrent(&da, &db, &c, x, None)
}

/// Left-padded depthwise convolution over `[B, L, D]`; `kernel[d, j]` weights
/// lag `j`.
pub fn depthwise_causal_conv<T: Real>(x: &Tensor<T>, kernel: &Tensor<T>) -> Result<Tensor<T>> {
    let (bs, l, d) = dims3("depthwise_causal_conv", x)?;
    if kernel.ndim() != 2 || kernel.shape()[0] != d || kernel.shape()[1] == 0 {
        return Err(shape_err(
            "depthwise_causal_conv",
            x.shape(),
            kernel.shape(),
        ));
    }
    let k = kernel.shape()[1];
    let mut out = vec![T::zero(); x.numel()];
    for b in 0..bs {
        for t in 0..l {
            for j in 0..k.min(t + 1) {
                let src = ((b * l + t - j) * d)..((b * l + t - j + 1) * d);
                let dst = (b * l + t) * d;
                for (e, &xv) in x.data()[src].iter().enumerate() {
                    out[dst + e] += kernel.data()[e * k + j] * xv;
                }
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

struct ConvFn;

impl<T: Real> Function<T> for ConvFn {
    fn name(&self) -> &'static str {
        "causal_conv"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (x, kernel) = (inputs[0], inputs[1]);
        let (bs, l, d) = dims3("causal_conv", x)?;
        let k = kernel.shape()[1];
        let mut gx = vec![T::zero(); x.numel()];
        let mut gk = vec![T::zero(); kernel.numel()];
        for b in 0..bs {
            for t in 0..l {
                for j in 0..k.min(t + 1) {
                    let src = (b * l + t - j) * d;
                    let dst = (b * l + t) * d;
                    for e in 0..d {
                        let g = grad.data()[dst + e];
                        gx[src + e] += g * kernel.data()[e * k + j];
                        gk[e * k + j] += g * x.data()[src + e];
                    }
                }
            }
        }
        Ok(vec![
            needs[0]
                .then(|| Tensor::new(x.shape().to_vec(), gx))
                .transpose()?,
            needs[1]
                .then(|| Tensor::new(kernel.shape().to_vec(), gk))
                .transpose()?,
        ])
    }
}

/// Fused scan inputs: `u, Δ: [B, L, E]`, `A_log: [E, N]`, `B, C: [B, L, N]`,
/// optional skip `[E]`.
struct ScanFn<T> {
    mode: Discretization,
    cache: ScanCache<T>,
}

/// Per-element `h_t`, `dA_t` and the input coefficient, each `[B, L, E, N]`.
#[derive(Default)]
struct ScanCache<T> {
    states: Vec<T>,
    da: Vec<T>,
    coef: Vec<T>,
}

struct ScanDims {
    bs: usize,
    l: usize,
    e: usize,
    n: usize,
}

fn scan_dims<T: Real>(
    u: &Tensor<T>,
    dt: &Tensor<T>,
    a_log: &Tensor<T>,
    b: &Tensor<T>,
    c: &Tensor<T>,
) -> Result<ScanDims> {
    let (bs, l, e) = dims3("selective_scan", u)?;
    let n = a_log.last_dim();
    if dt.shape() != u.shape()
        || a_log.shape() != [e, n]
        || b.shape() != [bs, l, n]
        || c.shape() != b.shape()
    {
        return Err(shape_err("selective_scan", u.shape(), b.shape()));
    }
    Ok(ScanDims { bs, l, e, n })
}

fn scan_fused<T: Real>(
    inputs: &[&Tensor<T>],
    mode: Discretization,
    keep: bool,
) -> Result<(Tensor<T>, ScanCache<T>)> {
    let (u, dt, a_log, bm, cm) = (inputs[0], inputs[1], inputs[2], inputs[3], inputs[4]);
    let skip = inputs.get(5).map(|s| s.data());
    let ScanDims { bs, l, e, n } = scan_dims(u, dt, a_log, bm, cm)?;
    let a: Vec<T> = a_log.data().iter().map(|&v| -v.exp()).collect();
    let (ud, dtd, bd, cd) = (u.data(), dt.data(), bm.data(), cm.data());
    let mut y = vec![T::zero(); bs * l * e];
    let cells = if keep { bs * l * e * n } else { 0 };
    let mut cache = ScanCache {
        states: vec![T::zero(); cells],
        da: vec![T::zero(); cells],
        coef: vec![T::zero(); cells],
    };
    let mut h = vec![T::zero(); e * n];
    for b in 0..bs {
        h.iter_mut().for_each(|v| *v = T::zero());
        for t in 0..l {
            let bl = b * l + t;
            let brow = &bd[bl * n..(bl + 1) * n];
            let crow = &cd[bl * n..(bl + 1) * n];
            for ch in 0..e {
                let i = bl * e + ch;
                let (xv, step) = (ud[i], dtd[i]);
                let hrow = &mut h[ch * n..(ch + 1) * n];
                let arow = &a[ch * n..(ch + 1) * n];
                let mut acc = T::zero();
                if keep {
                    let cells = i * n..(i + 1) * n;
                    let da_out = &mut cache.da[cells.clone()];
                    let co_out = &mut cache.coef[cells.clone()];
                    for k in 0..n {
                        let (da, coef) = zoh(step, arow[k], mode);
                        hrow[k] = da * hrow[k] + coef * brow[k] * xv;
                        acc += crow[k] * hrow[k];
                        da_out[k] = da;
                        co_out[k] = coef;
                    }
                    cache.states[cells].copy_from_slice(hrow);
                } else {
                    for k in 0..n {
                        let (da, coef) = zoh(step, arow[k], mode);
                        hrow[k] = da * hrow[k] + coef * brow[k] * xv;
                        acc += crow[k] * hrow[k];
                    }
                }
                if let Some(s) = skip {
                    acc += s[ch] * xv;
                }
                y[i] = acc;
            }
        }
    }
    Ok((Tensor::new(u.shape().to_vec(), y)?, cache))
}

impl<T: Real> Function<T> for ScanFn<T> {
    fn name(&self) -> &'static str {
        "selective_scan"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (u, dt, a_log, bm, cm) = (inputs[0], inputs[1], inputs[2], inputs[3], inputs[4]);
        let skip = inputs.get(5);
        let ScanDims { bs, l, e, n } = scan_dims(u, dt, a_log, bm, cm)?;
        let a: Vec<T> = a_log.data().iter().map(|&v| -v.exp()).collect();
        let (ud, dtd, bd, cd) = (u.data(), dt.data(), bm.data(), cm.data());
        let ScanCache {
            states,
            da: das,
            coef: coefs,
        } = &self.cache;
        let gy = grad.data();
        let mut gu = vec![T::zero(); u.numel()];
        let mut gdt = vec![T::zero(); dt.numel()];
        let mut ga = vec![T::zero(); a.len()];
        let mut gb = vec![T::zero(); bm.numel()];
        let mut gc = vec![T::zero(); cm.numel()];
        let mut gskip = vec![T::zero(); e];
        let mut gh = vec![T::zero(); e * n];
        let zero_row = vec![T::zero(); n];
        for b in 0..bs {
            gh.iter_mut().for_each(|v| *v = T::zero());
            for t in (0..l).rev() {
                let bl = b * l + t;
                let brow = &bd[bl * n..(bl + 1) * n];
                let crow = &cd[bl * n..(bl + 1) * n];
                let gb_row = &mut gb[bl * n..(bl + 1) * n];
                let gc_row = &mut gc[bl * n..(bl + 1) * n];
                for ch in 0..e {
                    let i = bl * e + ch;
                    let (g_y, xv, step) = (gy[i], ud[i], dtd[i]);
                    let cells = i * n..(i + 1) * n;
                    let h_t = &states[cells.clone()];
                    let h_prev = if t > 0 {
                        &states[(i - e) * n..(i - e + 1) * n]
                    } else {
                        &zero_row[..]
                    };
                    let da_row = &das[cells.clone()];
                    let co_row = &coefs[cells];
                    let arow = &a[ch * n..(ch + 1) * n];
                    let ga_row = &mut ga[ch * n..(ch + 1) * n];
                    let gh_row = &mut gh[ch * n..(ch + 1) * n];
                    let mut g_dt = T::zero();
                    let mut g_u = T::zero();
                    if let Some(s) = skip {
                        g_u += g_y * s.data()[ch];
                        gskip[ch] += g_y * xv;
                    }
                    for k in 0..n {
                        let (ak, da, coef) = (arow[k], da_row[k], co_row[k]);
                        gc_row[k] += g_y * h_t[k];
                        let g = gh_row[k] + g_y * crow[k];
                        let g_da = g * h_prev[k];
                        let g_coef = g * brow[k] * xv;
                        gb_row[k] += g * coef * xv;
                        g_u += g * coef * brow[k];
                        g_dt += g_da * da * ak;
                        ga_row[k] += g_da * da * step;
                        match self.mode {
                            Discretization::Euler => g_dt += g_coef,
                            Discretization::Exact if ak == T::zero() => {
                                g_dt += g_coef;
                                ga_row[k] += g_coef * step * step / T::of(2.0);
                            }
                            Discretization::Exact => {
                                g_dt += g_coef * da;
                                // d/dA of expm1(Δ·A)/A
                                ga_row[k] += g_coef * (step * da - coef) / ak;
                            }
                        }
                        gh_row[k] = g * da;
                    }
                    gdt[i] = g_dt;
                    gu[i] += g_u;
                }
            }
        }
        // A = −exp(A_log) ⇒ dA/dA_log = A
        let ga_log: Vec<T> = ga.iter().zip(&a).map(|(&g, &av)| g * av).collect();
        let mut out = vec![
            needs[0]
                .then(|| Tensor::new(u.shape().to_vec(), gu))
                .transpose()?,
            needs[1]
                .then(|| Tensor::new(dt.shape().to_vec(), gdt))
                .transpose()?,
            needs[2]
                .then(|| Tensor::new(a_log.shape().to_vec(), ga_log))
                .transpose()?,
            needs[3]
                .then(|| Tensor::new(bm.shape().to_vec(), gb))
                .transpose()?,
            needs[4]
                .then(|| Tensor::new(cm.shape().to_vec(), gc))
                .transpose()?,
        ];
        if let Some(s) = skip {
            out.push(
                needs[5]
                    .then(|| Tensor::new(s.shape().to_vec(), gskip))
                    .transpose()?,
            );
        }
        Ok(out)
    }
}

/// Differentiable fused scan. `A = −exp(A_log)` is formed inside the kernel.
#[allow(clippy::too_many_arguments)]
pub fn selective_scan<T: Real>(
    s: &mut Session<T>,
    u: Var,
    dt: Var,
    a_log: Var,
    bm: Var,
    cm: Var,
    d_skip: Option<Var>,
    mode: Discretization,
) -> Result<Var> {
    let mut ins = vec![u, dt, a_log, bm, cm];
    ins.extend(d_skip);
    let vals: Vec<&Tensor<T>> = ins.iter().map(|&v| s.g.value(v)).collect();
    let (y, cache) = scan_fused(&vals, mode, true)?;
    Ok(s.g.custom(&ins, y, Box::new(ScanFn { mode, cache })))
}

/// Differentiable [`depthwise_causal_conv`].
pub fn causal_conv<T: Real>(s: &mut Session<T>, x: Var, kernel: Var) -> Result<Var> {
    let y = depthwise_causal_conv(s.g.value(x), s.g.value(kernel))?;
    Ok(s.g.custom(&[x, kernel], y, Box::new(ConvFn)))
}

/// Recurrent state for token-by-token decoding of one layer's scan.
#[derive(Clone, Debug)]
pub struct ScanState<T> {
    /// `[batch, E, N]`
    pub h: Tensor<T>,
    pub step: usize,
}

impl<T: Real> ScanState<T> {
    pub fn new(batch: usize, channels: usize, d_state: usize) -> Self {
        ScanState {
            h: Tensor::zeros([batch, channels, d_state]),
            step: 0,
        }
    }

    /// Advances one token. `u, dt: [batch, E]`, `b, c: [batch, N]`,
    /// `a: [E, N]` (negative); returns `y: [batch, E]`.
    pub fn advance(
        &mut self,
        u: &Tensor<T>,
        dt: &Tensor<T>,
        a: &Tensor<T>,
        b: &Tensor<T>,
        c: &Tensor<T>,
        mode: Discretization,
    ) -> Result<Tensor<T>> {
        let (bs, e, n) = dims3("scan_step", &self.h)?;
        if u.shape() != [bs, e]
            || dt.shape() != [bs, e]
            || a.shape() != [e, n]
            || b.shape() != [bs, n]
            || c.shape() != [bs, n]
        {
            return Err(shape_err("scan_step", u.shape(), self.h.shape()));
        }
        let mut y = vec![T::zero(); bs * e];
        let h = self.h.data_mut();
        for bi in 0..bs {
            for ch in 0..e {
                let mut acc = T::zero();
                for k in 0..n {
                    let (da, coef) = zoh(dt.data()[bi * e + ch], a.data()[ch * n + k], mode);
                    let hk = &mut h[(bi * e + ch) * n + k];
                    *hk = da * *hk + coef * b.data()[bi * n + k] * u.data()[bi * e + ch];
                    acc += c.data()[bi * n + k] * *hk;
                }
                y[bi * e + ch] = acc;
            }
        }
        self.step += 1;
        Tensor::new([bs, e], y)
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SsmConfig {
    pub d_model: usize,
    pub d_state: usize,
    pub expand: usize,
    /// Width of the depthwise causal convolution; 0 disables it.
    pub conv_width: usize,
    pub dt_rank: usize,
    pub d_skip: bool,
    pub rope: bool,
    pub discretization: Discretization,
}

impl SsmConfig {
    /// Conventional block: expansion 2, width-4 convolution and skip term,
    /// both dropped when rotary positions are injected into `B` and `C`.
    pub fn new(d_model: usize, d_state: usize, rope: bool) -> Self {
        SsmConfig {
            d_model,
            d_state,
            expand: 2,
            conv_width: if rope { 0 } else { 4 },
            dt_rank: d_model.div_ceil(16),
            d_skip: !rope,
            rope,
            discretization: Discretization::Exact,
        }
    }

    pub fn inner(&self) -> usize {
        self.expand * self.d_model
    }

    /// Parameters of one layer, by formula.
    pub fn param_count(&self) -> usize {
        let (d, ei, n, r) = (self.d_model, self.inner(), self.d_state, self.dt_rank);
        d * 2 * ei
            + ei * self.conv_width
            + 2 * ei * n
            + 2 * ei * r
            + ei
            + ei * n
            + if self.d_skip { ei } else { 0 }
            + ei * d
    }
}

/// Trainable selective-SSM block: in-projection into a scan branch and a gate
/// branch, optional causal convolution, selective scan, `silu` gate,
/// out-projection.
#[derive(Clone, Debug)]
pub struct SsmLayer {
    pub cfg: SsmConfig,
    pub in_proj: ParamId,
    pub conv: Option<ParamId>,
    pub w_b: ParamId,
    pub w_c: ParamId,
    pub w_dt_down: ParamId,
    pub w_dt_up: ParamId,
    pub dt_bias: ParamId,
    pub a_log: ParamId,
    pub d_skip: Option<ParamId>,
    pub out_proj: ParamId,
    pub table: Option<Arc<RopeTable>>,
}

impl SsmLayer {
    /// `out_scale` multiplies the out-projection init (depth scaling).
    pub fn init<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: &SsmConfig,
        table: Option<Arc<RopeTable>>,
        out_scale: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        if cfg.rope && table.as_ref().is_none_or(|t| t.dim() != cfg.d_state) {
            return Err(Error::Config(format!(
                "rotary SSM needs a table of dimension d_state = {}",
                cfg.d_state
            )));
        }
        if cfg.rope && (cfg.conv_width > 0 || cfg.d_skip) {
            return Err(Error::Config(
                "rotary SSM has no convolution and no skip term".into(),
            ));
        }
        let (d, ei, n, r) = (cfg.d_model, cfg.inner(), cfg.d_state, cfg.dt_rank);
        let sd = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
        let in_proj = store.normal(format!("{prefix}.in_proj"), &[d, 2 * ei], sd(d), rng);
        let conv = (cfg.conv_width > 0).then(|| {
            store.normal(
                format!("{prefix}.conv"),
                &[ei, cfg.conv_width],
                sd(cfg.conv_width),
                rng,
            )
        });
        let w_b = store.normal(format!("{prefix}.w_b"), &[ei, n], sd(ei), rng);
        let w_c = store.normal(format!("{prefix}.w_c"), &[ei, n], sd(ei), rng);
        let w_dt_down = store.normal(format!("{prefix}.w_dt_down"), &[ei, r], sd(ei), rng);
        let w_dt_up = store.normal(format!("{prefix}.w_dt_up"), &[r, ei], sd(r), rng);
        // Δ starts log-uniform in [1e-3, 1e-1]; bias is its softplus inverse.
        let bias: Vec<T> = (0..ei)
            .map(|_| {
                let dt = rng.random_range(1e-3f64.ln()..1e-1f64.ln()).exp();
                T::of(dt + (-(-dt).exp_m1()).ln())
            })
            .collect();
        let dt_bias = store.add(format!("{prefix}.dt_bias"), Tensor::new([ei], bias)?);
        let a_log = store.add(
            format!("{prefix}.a_log"),
            Tensor::from_fn([ei, n], |i| T::of(((i % n) as f64 + 1.0).ln())),
        );
        let d_skip = cfg
            .d_skip
            .then(|| store.add(format!("{prefix}.d_skip"), Tensor::ones([ei])));
        let out_proj = store.normal(
            format!("{prefix}.out_proj"),
            &[ei, d],
            sd(ei) * out_scale,
            rng,
        );
        Ok(SsmLayer {
            cfg: cfg.clone(),
            in_proj,
            conv,
            w_b,
            w_c,
            w_dt_down,
            w_dt_up,
            dt_bias,
            a_log,
            d_skip,
            out_proj,
            table: if cfg.rope { table } else { None },
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.in_proj];
        ids.extend(self.conv);
        ids.extend([
            self.w_b,
            self.w_c,
            self.w_dt_down,
            self.w_dt_up,
            self.dt_bias,
            self.a_log,
        ]);
        ids.extend(self.d_skip);
        ids.push(self.out_proj);
        ids
    }

    pub fn selective_weights<T: Real>(&self, store: &ParamStore<T>) -> SelectiveWeights<T> {
        SelectiveWeights {
            w_b: store.get(self.w_b).clone(),
            w_c: store.get(self.w_c).clone(),
            w_dt_down: store.get(self.w_dt_down).clone(),
            w_dt_up: store.get(self.w_dt_up).clone(),
            dt_bias: store.get(self.dt_bias).clone(),
        }
    }

    /// Diagonal `A = −exp(A_log)`.
    pub fn a_matrix<T: Real>(&self, store: &ParamStore<T>) -> Tensor<T> {
        store.get(self.a_log).map(|v| -v.exp())
    }

    /// `x: [B, L, D] → [B, L, D]`.
    pub fn forward<T: Real>(&self, s: &mut Session<T>, x: Var, ctx: &PosCtx) -> Result<Var> {
        let ei = self.cfg.inner();
        let w_in = s.param(self.in_proj);
        let xz = s.g.matmul(x, w_in)?;
        let mut u = s.g.slice_last(xz, 0, ei)?;
        let z = s.g.slice_last(xz, ei, ei)?;
        if let Some(k) = self.conv {
            let k = s.param(k);
            u = causal_conv(s, u, k)?;
        }
        let u = s.g.silu(u)?;

        let (wb, wc) = (s.param(self.w_b), s.param(self.w_c));
        let mut bm = s.g.matmul(u, wb)?;
        let mut cm = s.g.matmul(u, wc)?;
        if let Some(table) = &self.table {
            bm = rope(&mut s.g, bm, &ctx.positions, table)?;
            cm = rope_query(&mut s.g, cm, ctx, table)?;
        }
        let (down, up, bias) = (
            s.param(self.w_dt_down),
            s.param(self.w_dt_up),
            s.param(self.dt_bias),
        );
        let dt = s.g.matmul(u, down)?;
        let dt = s.g.matmul(dt, up)?;
        let dt = s.g.add(dt, bias)?;
        let dt = s.g.softplus(dt)?;

        let a_log = s.param(self.a_log);
        let skip = self.d_skip.map(|p| s.param(p));
        let y = selective_scan(s, u, dt, a_log, bm, cm, skip, self.cfg.discretization)?;
        let gate = s.g.silu(z)?;
        let y = s.g.mul(y, gate)?;
        let w_out = s.param(self.out_proj);
        s.g.matmul(y, w_out)
    }
}

/// Per-position query scale tensor for the SSM `C` side; exposed for tests.
pub fn c_length_scale<T: Real>(ctx: &PosCtx, d_state: usize) -> Result<Option<Tensor<T>>> {
    ctx.length_base
        .map(|b| length_scale_tensor(&ctx.positions, d_state, b))
        .transpose()
}
