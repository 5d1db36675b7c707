//! Rotary position embeddings and log-length query scaling.
//!
//! Channels are rotated in adjacent pairs `(2i, 2i+1)` at frequency
//! `θ_i = base^(−2i/d)` (zero-based `i`). Rotating the query side by `j` and the
//! key side by `i` leaves an inner product that depends on `j − i` only, which is
//! what lets the same table serve attention `Q/K` and the SSM `C/B` projections.

use std::sync::Arc;

use crate::autograd::{Function, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const DEFAULT_BASE: f64 = 10_000.0;

/// Precomputed `cos`/`sin` of `pos·θ_i` for `pos < max_len`.
#[derive(Clone, Debug)]
pub struct RopeTable {
    dim: usize,
    max_len: usize,
    base: f64,
    theta: Vec<f64>,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl RopeTable {
    pub fn new(dim: usize, max_len: usize, base: f64) -> Result<Self> {
        if dim == 0 || !dim.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "rotary dimension must be even and positive, got {dim}"
            )));
        }
        if base <= 1.0 {
            return Err(Error::Config(format!(
                "rotary base must exceed 1, got {base}"
            )));
        }
        let half = dim / 2;
        let theta: Vec<f64> = (0..half)
            .map(|i| base.powf(-2.0 * i as f64 / dim as f64))
            .collect();
        let mut cos = Vec::with_capacity(max_len * half);
        let mut sin = Vec::with_capacity(max_len * half);
        for pos in 0..max_len {
            for &t in &theta {
                let (s, c) = (pos as f64 * t).sin_cos();
                cos.push(c);
                sin.push(s);
            }
        }
        Ok(RopeTable {
            dim,
            max_len,
            base,
            theta,
            cos,
            sin,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    /// `cos(pos·θ_i)` for every pair `i`.
    pub fn cos(&self, pos: usize) -> &[f64] {
        let h = self.dim / 2;
        &self.cos[pos * h..(pos + 1) * h]
    }

    pub fn sin(&self, pos: usize) -> &[f64] {
        let h = self.dim / 2;
        &self.sin[pos * h..(pos + 1) * h]
    }

    /// Cos/sin rows for a signed position; negative positions rotate backwards.
    fn rows(&self, pos: i64) -> Result<(&[f64], &[f64], f64)> {
        let p = pos.unsigned_abs() as usize;
        if p >= self.max_len {
            return Err(Error::Index(format!(
                "position {pos} outside rotary table of length {}",
                self.max_len
            )));
        }
        Ok((self.cos(p), self.sin(p), if pos < 0 { -1.0 } else { 1.0 }))
    }

    /// Rotates one `dim`-vector in place by position `pos`.
    pub fn rotate<T: Real>(&self, x: &mut [T], pos: i64) -> Result<()> {
        if x.len() != self.dim {
            return Err(crate::error::shape_err("rotate", &[x.len()], &[self.dim]));
        }
        let (c, s, sign) = self.rows(pos)?;
        for (i, pair) in x.chunks_exact_mut(2).enumerate() {
            let (cs, sn) = (T::of(c[i]), T::of(sign * s[i]));
            let (a, b) = (pair[0], pair[1]);
            pair[0] = a * cs - b * sn;
            pair[1] = a * sn + b * cs;
        }
        Ok(())
    }
}

/// Rotates `x` of shape `[.., L, d]`; `positions[l]` is the position of row `l`.
pub fn apply_rope<T: Real>(
    x: &Tensor<T>,
    positions: &[i64],
    table: &RopeTable,
) -> Result<Tensor<T>> {
    let d = x.last_dim();
    if x.ndim() < 2 || d != table.dim() || x.shape()[x.ndim() - 2] != positions.len() {
        return Err(crate::error::shape_err(
            "apply_rope",
            x.shape(),
            &[positions.len(), table.dim()],
        ));
    }
    let mut out = x.clone();
    let l = positions.len();
    for (r, row) in out.data_mut().chunks_mut(d).enumerate() {
        table.rotate(row, positions[r % l])?;
    }
    Ok(out)
}

struct RopeFn {
    table: Arc<RopeTable>,
    positions: Vec<i64>,
}

impl<T: Real> Function<T> for RopeFn {
    fn name(&self) -> &'static str {
        "rope"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let neg: Vec<i64> = self.positions.iter().map(|p| -p).collect();
        Ok(vec![Some(apply_rope(grad, &neg, &self.table)?)])
    }
}

/// Differentiable [`apply_rope`].
pub fn rope<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    positions: &[i64],
    table: &Arc<RopeTable>,
) -> Result<Var> {
    let out = apply_rope(g.value(x), positions, table)?;
    let positions = positions.to_vec();
    Ok(g.custom(
        &[x],
        out,
        Box::new(RopeFn {
            table: table.clone(),
            positions,
        }),
    ))
}

/// Both sides of the relative-position identity for one pair of tokens.
///
/// `C = Wc·xj` and `B = Wb·xi`. The left value is `⟨R_j C, R_i B⟩`; the right
/// value is `Σ_k Re[(C_k)(B_k)* e^{i(j−i)θ_k}]` with each channel pair read as a
/// complex number.
pub fn rope_inner_identity(
    xj: &[f64],
    xi: &[f64],
    j: usize,
    i: usize,
    wc: &Tensor<f64>,
    wb: &Tensor<f64>,
    table: &RopeTable,
) -> Result<(f64, f64)> {
    let project = |w: &Tensor<f64>, x: &[f64]| -> Result<Vec<f64>> {
        let col = Tensor::new([x.len(), 1], x.to_vec())?;
        Ok(w.matmul(&col)?.into_data())
    };
    let c = project(wc, xj)?;
    let b = project(wb, xi)?;
    if c.len() != table.dim() || b.len() != table.dim() {
        return Err(crate::error::shape_err(
            "rope_inner_identity",
            wc.shape(),
            wb.shape(),
        ));
    }
    let (mut rc, mut rb) = (c.clone(), b.clone());
    table.rotate(&mut rc, j as i64)?;
    table.rotate(&mut rb, i as i64)?;
    let lhs = rc.iter().zip(&rb).map(|(x, y)| x * y).sum();

    let phi = j as f64 - i as f64;
    let rhs = table
        .theta()
        .iter()
        .enumerate()
        .map(|(k, &t)| {
            let (c1, c2, b1, b2) = (c[2 * k], c[2 * k + 1], b[2 * k], b[2 * k + 1]);
            let (s, co) = (phi * t).sin_cos();
            // Re[(c1 + i c2)(b1 − i b2)(cos + i sin)]
            (c1 * b1 + c2 * b2) * co - (c2 * b1 - c1 * b2) * s
        })
        .sum();
    Ok((lhs, rhs))
}

/// `max(1, ln pos / ln base_len)`; positions 0 and 1 map to 1.
pub fn log_length_scale(pos: usize, base_len: usize) -> Result<f64> {
    if base_len < 2 {
        return Err(Error::Config(format!(
            "log-length base must be at least 2, got {base_len}"
        )));
    }
    if pos <= 1 {
        return Ok(1.0);
    }
    Ok(((pos as f64).ln() / (base_len as f64).ln()).max(1.0))
}

/// Which sublayers receive rotary positions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RopeMode {
    None,
    Attn,
    Ssm,
    Both,
}

impl RopeMode {
    pub const ALL: [RopeMode; 4] = [
        RopeMode::None,
        RopeMode::Attn,
        RopeMode::Ssm,
        RopeMode::Both,
    ];

    pub fn ssm(self) -> bool {
        matches!(self, RopeMode::Ssm | RopeMode::Both)
    }

    pub fn attn(self) -> bool {
        matches!(self, RopeMode::Attn | RopeMode::Both)
    }

    pub fn name(self) -> &'static str {
        match self {
            RopeMode::None => "none",
            RopeMode::Attn => "attn",
            RopeMode::Ssm => "ssm",
            RopeMode::Both => "both",
        }
    }
}

impl std::str::FromStr for RopeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RopeMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown rope mode `{s}` (none|attn|ssm|both)")))
    }
}

/// Positions of the current sequence plus the optional extrapolation base.
#[derive(Clone, Debug)]
pub struct PosCtx {
    pub positions: Vec<i64>,
    /// Training length; when set, query-side vectors are scaled by
    /// [`log_length_scale`].
    pub length_base: Option<usize>,
}

impl PosCtx {
    pub fn new(len: usize) -> Self {
        PosCtx {
            positions: (0..len as i64).collect(),
            length_base: None,
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Rotates a `[.., L, d]` query-side tensor and applies the length scale.
pub(crate) fn rope_query<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    ctx: &PosCtx,
    table: &Arc<RopeTable>,
) -> Result<Var> {
    let r = rope(g, x, &ctx.positions, table)?;
    match ctx.length_base {
        Some(base) => {
            let s = g.constant(length_scale_tensor(&ctx.positions, table.dim(), base)?);
            g.mul(r, s)
        }
        None => Ok(r),
    }
}

/// Per-position scale factors as a `[L, d]` constant, ready to broadcast
/// against `[.., L, d]` query-side tensors.
pub fn length_scale_tensor<T: Real>(
    positions: &[i64],
    d: usize,
    base_len: usize,
) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(positions.len() * d);
    for &pos in positions {
        let s = T::of(log_length_scale(pos.unsigned_abs() as usize, base_len)?);
        data.extend(std::iter::repeat_n(s, d));
    }
    Tensor::new([positions.len(), d], data)
}
