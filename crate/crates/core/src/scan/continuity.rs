use serde::{Deserialize, Serialize};

use super::{invert, GridDims, ScanError};

/// Locality statistics of a scan order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContinuityReport {
    pub is_space_filling: bool,
    /// Largest Manhattan distance between consecutive cells (0 for paths
    /// shorter than two cells).
    pub max_step: usize,
    /// Steps longer than one cell.
    pub breaks: usize,
}

/// Checks bijectivity and measures spatial continuity of `order` on `dims`.
pub fn validate(order: &[usize], dims: &GridDims) -> Result<ContinuityReport, ScanError> {
    if order.len() != dims.cells() {
        return Err(ScanError::LengthMismatch {
            expected: dims.cells(),
            got: order.len(),
        });
    }
    invert(order)?;
    let mut max_step = 0;
    let mut breaks = 0;
    for w in order.windows(2) {
        let (x0, y0, t0) = dims.coords(w[0]);
        let (x1, y1, t1) = dims.coords(w[1]);
        let d = x0.abs_diff(x1) + y0.abs_diff(y1) + t0.abs_diff(t1);
        max_step = max_step.max(d);
        if d > 1 {
            breaks += 1;
        }
    }
    Ok(ContinuityReport {
        is_space_filling: true,
        max_step,
        breaks,
    })
}
