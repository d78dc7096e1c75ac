//! Raster ("sweep") and serpentine ("zigzag") plane scans.

use super::{GridDims, Permutation, ScanOrder};
use crate::error::Result;

/// Row-major raster order. Consecutive rows are not adjacent at the wrap.
pub struct Sweep;

impl ScanOrder for Sweep {
    fn name(&self) -> &'static str {
        "sweep"
    }

    fn variant_count(&self) -> usize {
        1
    }

    fn build(&self, dims: &GridDims, _variant: usize) -> Result<Permutation> {
        let (w, h) = dims.as_plane("sweep")?;
        Ok(Permutation::identity(w * h))
    }
}

/// Corner a zigzag scan starts from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ZigzagStart {
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
}

/// Boustrophedon scan: every step moves to a 4-neighbour.
///
/// Eight variants: `variant / 2` picks the start corner (top-left,
/// top-right, bottom-left, bottom-right) and `variant % 2` the primary axis
/// (0 sweeps rows, 1 sweeps columns). Cycling `variant % 2` first means
/// an order receptive field of 2 already alternates row and column passes.
pub struct Zigzag;

impl Zigzag {
    pub fn decode(variant: usize) -> (ZigzagStart, bool) {
        let start = match variant / 2 {
            0 => ZigzagStart::TopLeft,
            1 => ZigzagStart::TopRight,
            2 => ZigzagStart::BottomLeft,
            _ => ZigzagStart::BottomRight,
        };
        (start, variant % 2 == 1)
    }

    /// Visited `(x, y)` coordinates in order.
    pub fn path(width: usize, height: usize, variant: usize) -> Vec<(usize, usize)> {
        let (start, column_major) = Self::decode(variant);
        let (flip_x, flip_y) = match start {
            ZigzagStart::TopLeft => (false, false),
            ZigzagStart::TopRight => (true, false),
            ZigzagStart::BottomLeft => (false, true),
            ZigzagStart::BottomRight => (true, true),
        };
        let mut out = Vec::with_capacity(width * height);
        let (outer, inner) = if column_major { (width, height) } else { (height, width) };
        for o in 0..outer {
            for i in 0..inner {
                let i = if o % 2 == 0 { i } else { inner - 1 - i };
                let (x, y) = if column_major { (o, i) } else { (i, o) };
                let x = if flip_x { width - 1 - x } else { x };
                let y = if flip_y { height - 1 - y } else { y };
                out.push((x, y));
            }
        }
        out
    }
}

impl ScanOrder for Zigzag {
    fn name(&self) -> &'static str {
        "zigzag"
    }

    fn variant_count(&self) -> usize {
        8
    }

    fn build(&self, dims: &GridDims, variant: usize) -> Result<Permutation> {
        let (w, h) = dims.as_plane("zigzag")?;
        let order = Self::path(w, h, variant).into_iter().map(|(x, y)| y * w + x).collect();
        Ok(Permutation::new(order)?)
    }
}
