//! Focal attention biases: additive attention-logit matrices that leave
//! in-window token pairs at 0 and push out-of-window pairs to a suppression
//! value.
//!
//! Two parameterizations are supported. An *absolute* bias stores one value
//! per spatial (query, key) pair. A *relative* bias stores a
//! `(2m−1)×(2m−1)` table indexed by the pair's row/column offset, shared by
//! every position. Both materialize into an `N_t×N_t` matrix (spatial tokens
//! plus the class token at index 0) through [`gather_index`]; the class
//! token's row and column are never biased.

mod histogram;
pub mod schedule;

use std::sync::Arc;

pub use histogram::{bias_histogram, Histogram};
pub use schedule::{round_to_odd, MrfaMode, WindowSchedule};

use crate::autodiff::GatherIndex;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Square patch grid: `m` patches per side, each `patch_px` pixels wide.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GridShape {
    m: usize,
    patch_px: usize,
}

impl GridShape {
    pub fn new(m: usize, patch_px: usize) -> Result<Self> {
        if m < 2 || patch_px < 1 {
            return Err(Error::Config(format!(
                "grid needs m >= 2 and patch_px >= 1, got m={m}, patch_px={patch_px}"
            )));
        }
        Ok(GridShape { m, patch_px })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn patch_px(&self) -> usize {
        self.patch_px
    }

    /// Number of spatial tokens, `m²`.
    pub fn spatial_tokens(&self) -> usize {
        self.m * self.m
    }

    /// Smallest window side that reaches every token from any center.
    pub fn global_side(&self) -> usize {
        2 * self.m - 1
    }

    /// Side of the relative table, `2m − 1`.
    pub fn table_side(&self) -> usize {
        2 * self.m - 1
    }

    /// `(row, col)` of a spatial token.
    pub fn coords(&self, token: usize) -> (usize, usize) {
        (token / self.m, token % self.m)
    }

    /// Signed `(row_i − row_j, col_i − col_j)`.
    pub fn offset(&self, i: usize, j: usize) -> (isize, isize) {
        let (ri, ci) = self.coords(i);
        let (rj, cj) = self.coords(j);
        (ri as isize - rj as isize, ci as isize - cj as isize)
    }
}

/// Odd window side in patch units, `3 ≤ side ≤ 2m − 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct WindowSpec {
    side: usize,
}

impl WindowSpec {
    pub const LOCAL: usize = 3;

    pub fn new(side: usize, grid: GridShape) -> Result<Self> {
        if side.is_multiple_of(2) || side < Self::LOCAL || side > grid.global_side() {
            return Err(Error::Config(format!(
                "window side {side} must be odd and within [3, {}] for a {}x{} grid",
                grid.global_side(),
                grid.m(),
                grid.m()
            )));
        }
        Ok(WindowSpec { side })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    /// Chebyshev radius `(side − 1) / 2`.
    pub fn radius(&self) -> usize {
        (self.side - 1) / 2
    }
}

/// Out-of-window initialization value; `0` disables suppression.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct SuppressionValue(f64);

impl SuppressionValue {
    pub const DEFAULT: f64 = -100.0;

    pub fn new(v: f64) -> Result<Self> {
        if !v.is_finite() || v > 0.0 {
            return Err(Error::Config(format!(
                "suppression value must be finite and <= 0, got {v}"
            )));
        }
        Ok(SuppressionValue(v))
    }

    pub fn value(&self) -> f64 {
        self.0
    }
}

impl Default for SuppressionValue {
    fn default() -> Self {
        SuppressionValue(Self::DEFAULT)
    }
}

/// Whether key `j` lies inside the square window centered on query `i`.
pub fn window_membership(i: usize, j: usize, w: WindowSpec, grid: GridShape) -> bool {
    let (dr, dc) = grid.offset(i, j);
    dr.unsigned_abs().max(dc.unsigned_abs()) <= w.radius()
}

/// Full `N×N` absolute bias, `N = m²` or `m² + 1` with the class token at
/// index 0.
pub fn build_absolute_bias<T: Scalar>(
    w: WindowSpec,
    grid: GridShape,
    v: SuppressionValue,
    with_class: bool,
) -> Tensor<T> {
    let s = grid.spatial_tokens();
    let off = usize::from(with_class);
    let n = s + off;
    let sup = T::cast(v.value());
    let mut out = Tensor::zeros(vec![n, n]);
    let data = out.data_mut();
    for i in 0..s {
        for j in 0..s {
            if !window_membership(i, j, w, grid) {
                data[(i + off) * n + j + off] = sup;
            }
        }
    }
    out
}

/// Entries of an `N×N` absolute bias that never change: the class token's
/// row and column.
pub fn frozen_mask(grid: GridShape, with_class: bool) -> Vec<bool> {
    let n = grid.spatial_tokens() + usize::from(with_class);
    (0..n * n).map(|k| with_class && (k / n == 0 || k % n == 0)).collect()
}

/// Row-major `m²×m²` map from a token pair to its offset's cell in the
/// relative table.
pub fn relative_index_map(grid: GridShape) -> Vec<u32> {
    let s = grid.spatial_tokens();
    let side = grid.table_side() as isize;
    let shift = grid.m() as isize - 1;
    let mut out = Vec::with_capacity(s * s);
    for i in 0..s {
        for j in 0..s {
            let (dr, dc) = grid.offset(i, j);
            out.push(((dr + shift) * side + (dc + shift)) as u32);
        }
    }
    out
}

/// `(2m−1)×(2m−1)` relative table with a zero window centered on offset
/// `(0, 0)`.
pub fn build_relative_table<T: Scalar>(w: WindowSpec, grid: GridShape, v: SuppressionValue) -> Tensor<T> {
    let side = grid.table_side();
    let center = grid.m() - 1;
    let sup = T::cast(v.value());
    Tensor::from_fn(vec![side, side], |k| {
        let (r, c) = (k / side, k % side);
        let cheb = r.abs_diff(center).max(c.abs_diff(center));
        if cheb <= w.radius() {
            T::zero()
        } else {
            sup
        }
    })
}

/// Gathers a relative table into the `N×N` bias it parameterizes.
pub fn materialize_relative_bias<T: Scalar>(table: &Tensor<T>, grid: GridShape, with_class: bool) -> Result<Tensor<T>> {
    let side = grid.table_side();
    if table.shape() != [side, side] {
        return Err(Error::Shape(format!(
            "relative table {:?} for a {}x{} grid (expected [{side}, {side}])",
            table.shape(),
            grid.m(),
            grid.m()
        )));
    }
    let index = gather_index(BiasKind::Relative, grid, with_class);
    let n = grid.spatial_tokens() + usize::from(with_class);
    let data = index
        .iter()
        .map(|ix| ix.map_or(T::zero(), |ix| table.data()[ix as usize]))
        .collect();
    Tensor::new(vec![n, n], data)
}

/// How a layer's focal bias is stored.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BiasKind {
    /// One value per spatial query/key pair (`m⁴` per head).
    Absolute,
    /// One value per spatial offset (`(2m−1)²` per head).
    Relative,
}

impl BiasKind {
    /// Parameters stored per head.
    pub fn entries_per_head(self, grid: GridShape) -> usize {
        match self {
            BiasKind::Absolute => grid.spatial_tokens() * grid.spatial_tokens(),
            BiasKind::Relative => grid.table_side() * grid.table_side(),
        }
    }
}

/// For every cell of the materialized `N×N` bias, the stored parameter it
/// reads, or `None` for the class token's row and column.
pub fn gather_index(kind: BiasKind, grid: GridShape, with_class: bool) -> GatherIndex {
    let s = grid.spatial_tokens();
    let off = usize::from(with_class);
    let n = s + off;
    let rel = matches!(kind, BiasKind::Relative).then(|| relative_index_map(grid));
    let mut out = Vec::with_capacity(n * n);
    for qi in 0..n {
        for kj in 0..n {
            if qi < off || kj < off {
                out.push(None);
                continue;
            }
            let (i, j) = (qi - off, kj - off);
            out.push(Some(match &rel {
                Some(map) => map[i * s + j],
                None => (i * s + j) as u32,
            }));
        }
    }
    Arc::from(out)
}

/// Initial stored parameters of one layer: `[heads, entries_per_head]`,
/// one row per head window.
pub fn init_bias_table<T: Scalar>(
    kind: BiasKind,
    windows: &[WindowSpec],
    grid: GridShape,
    v: SuppressionValue,
) -> Tensor<T> {
    let per_head = kind.entries_per_head(grid);
    let mut data = Vec::with_capacity(windows.len() * per_head);
    for &w in windows {
        let head = match kind {
            BiasKind::Absolute => build_absolute_bias::<T>(w, grid, v, false),
            BiasKind::Relative => build_relative_table::<T>(w, grid, v),
        };
        data.extend_from_slice(head.data());
    }
    Tensor::new(vec![windows.len(), per_head], data).expect("table shape")
}

/// One decoupled decay step, `θ ← (1 − λ)·θ − α·∇`, skipping frozen entries.
/// The arithmetic runs in `f64` and rounds once per step.
pub fn bias_decay_step<T: Scalar>(
    param: &mut Tensor<T>,
    lambda: f64,
    alpha: f64,
    grad: &[T],
    frozen: Option<&[bool]>,
) -> Result<()> {
    if !(0.0..1.0).contains(&lambda) {
        return Err(Error::Config(format!("decay rate must be in [0, 1), got {lambda}")));
    }
    if grad.len() != param.numel() || frozen.is_some_and(|f| f.len() != param.numel()) {
        return Err(Error::Shape(format!(
            "decay step on {:?} with gradient of length {}",
            param.shape(),
            grad.len()
        )));
    }
    let keep = 1.0 - lambda;
    for (k, (p, g)) in param.data_mut().iter_mut().zip(grad).enumerate() {
        if frozen.is_some_and(|f| f[k]) {
            continue;
        }
        *p = T::cast(keep * p.widen() - alpha * g.widen());
    }
    Ok(())
}
