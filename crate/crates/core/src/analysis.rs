//! Mean attention distance and focal-bias distributions.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::focal_bias::{bias_histogram, GridShape, Histogram};
use crate::model::ViTPModel;
use crate::tensor::{Scalar, Tensor};

const ROW_SUM_TOL: f64 = 1e-4;

/// Mean attention distance in pixels of one head.
///
/// `attn` is `[b, N, N]` with `N = m²` or `m² + 1` (class token first).
/// Only spatial queries and keys count; each restricted row is renormalized
/// before weighting the Euclidean query–key distance.
pub fn mean_attention_distance<T: Scalar>(attn: &Tensor<T>, grid: GridShape) -> Result<f64> {
    let s = attn.shape();
    let spatial = grid.spatial_tokens();
    if s.len() != 3 || s[1] != s[2] || !(s[1] == spatial || s[1] == spatial + 1) {
        return Err(Error::Input(format!(
            "attention of shape {s:?} does not fit a {m}x{m} grid",
            m = grid.m()
        )));
    }
    let (b, n) = (s[0], s[1]);
    let off = n - spatial;
    let dist = distance_table(grid);
    let data = attn.data();
    let mut total = 0.0;
    for bi in 0..b {
        for q in 0..n {
            let row = &data[(bi * n + q) * n..(bi * n + q + 1) * n];
            let sum: f64 = row.iter().map(|v| v.widen()).sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::Input(format!(
                    "attention row {q} of batch item {bi} sums to {sum}"
                )));
            }
            if q < off {
                continue;
            }
            let keys = &row[off..];
            let mass: f64 = keys.iter().map(|v| v.widen()).sum();
            if mass <= 0.0 {
                continue;
            }
            let i = q - off;
            let weighted: f64 = keys
                .iter()
                .enumerate()
                .map(|(j, a)| a.widen() * dist[i * spatial + j])
                .sum();
            total += weighted / mass;
        }
    }
    Ok(total / (b * spatial) as f64)
}

/// Pixel distances between all spatial token pairs, row-major.
fn distance_table(grid: GridShape) -> Vec<f64> {
    let n = grid.spatial_tokens();
    let p = grid.patch_px() as f64;
    let mut out = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let (dr, dc) = grid.offset(i, j);
            out.push(p * ((dr * dr + dc * dc) as f64).sqrt());
        }
    }
    out
}

/// MAD of uniform attention: the mean pairwise pixel distance of the grid.
pub fn uniform_mad(grid: GridShape) -> f64 {
    let d = distance_table(grid);
    d.iter().sum::<f64>() / d.len() as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct MadRow {
    pub layer: usize,
    pub head: usize,
    pub window_side_at_init: usize,
    pub mad_px: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MadReport {
    pub grid: GridShape,
    pub batch: usize,
    pub rows: Vec<MadRow>,
}

impl MadReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,head,window_side_at_init,mad_px\n");
        for r in &self.rows {
            writeln!(out, "{},{},{},{}", r.layer, r.head, r.window_side_at_init, r.mad_px).unwrap();
        }
        out
    }

    pub fn get(&self, layer: usize, head: usize) -> Option<&MadRow> {
        self.rows.iter().find(|r| r.layer == layer && r.head == head)
    }

    /// `[layer][head]` MAD values.
    pub fn matrix(&self) -> Vec<Vec<f64>> {
        let layers = self.rows.iter().map(|r| r.layer + 1).max().unwrap_or(0);
        let mut out = vec![Vec::new(); layers];
        for r in &self.rows {
            out[r.layer].push(r.mad_px);
        }
        out
    }
}

/// Runs `images` through the model with attention capture and measures
/// every head. Models without focal bias report the global side `2m − 1`
/// as their initial window.
pub fn mad_report<T: Scalar>(model: &ViTPModel<T>, images: &Tensor<T>) -> Result<MadReport> {
    let grid = model.config().grid()?;
    let (_, maps) = model.logits_and_attention(images)?;
    let biased = model.config().bias_mode.kind().is_some();
    let mut rows = Vec::new();
    for (layer, heads) in maps.iter().enumerate() {
        for (head, attn) in heads.iter().enumerate() {
            let window_side_at_init = if biased {
                model.schedule().side(layer, head).side()
            } else {
                grid.global_side()
            };
            rows.push(MadRow {
                layer,
                head,
                window_side_at_init,
                mad_px: mean_attention_distance(attn, grid)?,
            });
        }
    }
    Ok(MadReport {
        grid,
        batch: images.shape()[0],
        rows,
    })
}

/// Histogram of every stored focal-bias entry of the model. Without an
/// explicit range the bins span `[min(values, v), max(values, 0)]`.
pub fn model_bias_histogram<T: Scalar>(
    model: &ViTPModel<T>,
    bins: usize,
    range: Option<(f64, f64)>,
) -> Result<Histogram> {
    let values: Vec<f64> = (0..model.config().depth)
        .filter_map(|l| model.focal_bias(l))
        .flat_map(|t| t.data().iter().map(|v| v.widen()))
        .collect();
    if values.is_empty() {
        return Err(Error::Config("model has no focal bias to histogram".into()));
    }
    let (lo, hi) = range.unwrap_or_else(|| {
        let lo = values.iter().copied().fold(model.config().suppression, f64::min);
        let hi = values.iter().copied().fold(0.0, f64::max);
        if lo < hi {
            (lo, hi)
        } else {
            (hi - 1.0, hi)
        }
    });
    bias_histogram(values, bins, lo, hi)
}

/// Mean absolute value of all stored focal-bias entries (0 without bias).
pub fn bias_mean_abs<T: Scalar>(model: &ViTPModel<T>) -> f64 {
    let (sum, count) = (0..model.config().depth)
        .filter_map(|l| model.focal_bias(l))
        .fold((0.0, 0usize), |(s, c), t| (s + t.sum_abs(), c + t.numel()));
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}
