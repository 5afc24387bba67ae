//! Window-size assignments for the three multi-scale receptive field modes.

use std::fmt;

use crate::error::{Error, Result};
use crate::focal_bias::{GridShape, WindowSpec};

/// How window sizes vary across the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum MrfaMode {
    /// All heads of a layer share one window; windows grow with depth.
    Depth,
    /// Windows grow across the heads of every layer.
    #[default]
    Width,
    /// Windows grow across heads, and the per-layer minimum grows with depth.
    DepthWidth,
}

impl MrfaMode {
    pub const ALL: [MrfaMode; 3] = [MrfaMode::Depth, MrfaMode::Width, MrfaMode::DepthWidth];

    pub fn as_str(self) -> &'static str {
        match self {
            MrfaMode::Depth => "D",
            MrfaMode::Width => "W",
            MrfaMode::DepthWidth => "DW",
        }
    }

    /// Accepts `D`, `W`, `DW`, optionally prefixed with `MRFA-`.
    pub fn parse(s: &str) -> Option<Self> {
        let s = s.trim();
        let s = s.strip_prefix("MRFA-").or_else(|| s.strip_prefix("mrfa-")).unwrap_or(s);
        match s.to_ascii_uppercase().as_str() {
            "D" => Some(MrfaMode::Depth),
            "W" => Some(MrfaMode::Width),
            "DW" | "WD" => Some(MrfaMode::DepthWidth),
            _ => None,
        }
    }
}

impl fmt::Display for MrfaMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "MRFA-{}", self.as_str())
    }
}

/// Nearest odd integer to `x`; a tie between two odd neighbours goes to
/// the larger one.
pub fn round_to_odd(x: f64) -> usize {
    assert!(x >= 1.0, "round_to_odd needs x >= 1, got {x}");
    let mut lower = x.floor() as usize;
    if lower.is_multiple_of(2) {
        lower -= 1;
    }
    let below = x - lower as f64;
    let above = (lower + 2) as f64 - x;
    if below < above {
        lower
    } else {
        lower + 2
    }
}

/// [`round_to_odd`] of the exact rational `num / den`.
fn round_ratio_to_odd(num: u64, den: u64) -> usize {
    debug_assert!(den > 0 && num >= den);
    let mut lower = num / den;
    if lower.is_multiple_of(2) {
        lower -= 1;
    }
    let below = num - lower * den;
    let above = (lower + 2) * den - num;
    if below < above {
        lower as usize
    } else {
        lower as usize + 2
    }
}

/// `count` odd sides stepping evenly from `lo` to `hi`. A single point is
/// the global side `hi`.
fn odd_steps(lo: usize, hi: usize, count: usize) -> Vec<usize> {
    if count == 1 {
        return vec![hi];
    }
    let den = (count - 1) as u64;
    (0..count as u64)
        .map(|i| round_ratio_to_odd(lo as u64 * den + i * (hi - lo) as u64, den))
        .collect()
}

/// Per-(layer, head) window sides realizing an MRFA mode.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WindowSchedule {
    mode: MrfaMode,
    grid: GridShape,
    sides: Vec<Vec<WindowSpec>>,
}

impl WindowSchedule {
    /// Interpolates odd window sides between the 3×3 local window and the
    /// global side `2m − 1`.
    ///
    /// With a single head (width modes) or a single layer (depth modes) the
    /// one interpolation point is the global side.
    pub fn build(mode: MrfaMode, layers: usize, heads: usize, grid: GridShape) -> Result<Self> {
        if layers == 0 || heads == 0 {
            return Err(Error::Config(format!(
                "window schedule needs at least one layer and head, got {layers}x{heads}"
            )));
        }
        let lo = WindowSpec::LOCAL;
        let hi = grid.global_side();
        let raw: Vec<Vec<usize>> = match mode {
            MrfaMode::Width => vec![odd_steps(lo, hi, heads); layers],
            MrfaMode::Depth => odd_steps(lo, hi, layers).into_iter().map(|s| vec![s; heads]).collect(),
            MrfaMode::DepthWidth => odd_steps(lo, hi, layers)
                .into_iter()
                .map(|min| odd_steps(min, hi, heads))
                .collect(),
        };
        let sides = raw
            .into_iter()
            .map(|row| {
                row.into_iter()
                    .map(|s| WindowSpec::new(s, grid))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(WindowSchedule { mode, grid, sides })
    }

    pub fn mode(&self) -> MrfaMode {
        self.mode
    }

    pub fn grid(&self) -> GridShape {
        self.grid
    }

    pub fn layers(&self) -> usize {
        self.sides.len()
    }

    pub fn heads(&self) -> usize {
        self.sides[0].len()
    }

    pub fn side(&self, layer: usize, head: usize) -> WindowSpec {
        self.sides[layer][head]
    }

    pub fn layer(&self, layer: usize) -> &[WindowSpec] {
        &self.sides[layer]
    }

    /// Plain side lengths, `[layer][head]`.
    pub fn side_matrix(&self) -> Vec<Vec<usize>> {
        self.sides
            .iter()
            .map(|row| row.iter().map(|w| w.side()).collect())
            .collect()
    }
}

impl fmt::Display for WindowSchedule {
    /// One line per layer: `layer <l>: [s0,s1,...]`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (l, row) in self.side_matrix().iter().enumerate() {
            let joined: Vec<String> = row.iter().map(|s| s.to_string()).collect();
            writeln!(f, "layer {l}: [{}]", joined.join(","))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(m: usize) -> GridShape {
        GridShape::new(m, 2).unwrap()
    }

    #[test]
    fn round_to_odd_examples() {
        assert_eq!(round_to_odd(3.0), 3);
        assert_eq!(round_to_odd(5.545), 5);
        assert_eq!(round_to_odd(8.091), 9);
        assert_eq!(round_to_odd(6.0), 7);
        assert_eq!(round_to_odd(1.0), 1);
        assert_eq!(round_to_odd(1.99), 1);
        assert_eq!(round_to_odd(2.01), 3);
    }

    #[test]
    fn rational_rounding_agrees_with_float_away_from_ties() {
        for den in 1..20u64 {
            for num in den..40 * den {
                let x = num as f64 / den as f64;
                // exact ties are pinned below; float noise could flip them
                if (x - x.round()).abs() < 1e-9 && (x.round() as u64).is_multiple_of(2) {
                    continue;
                }
                assert_eq!(round_ratio_to_odd(num, den), round_to_odd(x), "{num}/{den}");
            }
        }
        assert_eq!(round_ratio_to_odd(6, 1), 7);
        assert_eq!(round_ratio_to_odd(12, 2), 7);
    }

    #[test]
    fn width_mode_examples() {
        let s = WindowSchedule::build(MrfaMode::Width, 2, 4, grid(4)).unwrap();
        assert_eq!(s.side_matrix(), vec![vec![3, 5, 5, 7]; 2]);

        let s = WindowSchedule::build(MrfaMode::Width, 1, 12, grid(16)).unwrap();
        assert_eq!(s.side_matrix()[0], vec![3, 5, 9, 11, 13, 15, 19, 21, 23, 25, 29, 31]);
    }

    #[test]
    fn depth_mode_example() {
        let s = WindowSchedule::build(MrfaMode::Depth, 3, 2, grid(4)).unwrap();
        assert_eq!(s.side_matrix(), vec![vec![3, 3], vec![5, 5], vec![7, 7]]);
    }

    #[test]
    fn depth_width_mode_raises_minimum_with_depth() {
        let s = WindowSchedule::build(MrfaMode::DepthWidth, 3, 3, grid(8)).unwrap();
        // minima 3, 9, 15; then steps to 15 within each layer
        assert_eq!(s.side_matrix(), vec![vec![3, 9, 15], vec![9, 13, 15], vec![15, 15, 15]]);
    }

    #[test]
    fn single_point_is_global() {
        let s = WindowSchedule::build(MrfaMode::Width, 2, 1, grid(5)).unwrap();
        assert_eq!(s.side_matrix(), vec![vec![9], vec![9]]);
        let s = WindowSchedule::build(MrfaMode::Depth, 1, 3, grid(5)).unwrap();
        assert_eq!(s.side_matrix(), vec![vec![9, 9, 9]]);
    }

    #[test]
    fn rejects_empty_network() {
        assert!(WindowSchedule::build(MrfaMode::Width, 0, 3, grid(4)).is_err());
        assert!(WindowSchedule::build(MrfaMode::Width, 3, 0, grid(4)).is_err());
    }

    #[test]
    fn mode_parsing() {
        assert_eq!(MrfaMode::parse("MRFA-DW"), Some(MrfaMode::DepthWidth));
        assert_eq!(MrfaMode::parse("w"), Some(MrfaMode::Width));
        assert_eq!(MrfaMode::parse("X"), None);
        for m in MrfaMode::ALL {
            assert_eq!(MrfaMode::parse(&m.to_string()), Some(m));
        }
    }
}
