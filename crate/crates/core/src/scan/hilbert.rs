//! Generalised Hilbert ("gilbert") curve for arbitrary rectangles.
//!
//! The recursion splits the longer axis, preferring even sub-extents so the
//! pieces join with unit steps. Any `width × height` grid gets a continuous
//! path; a `1 × n` grid degenerates to a straight line.

use super::{GridDims, Permutation, ScanOrder};
use crate::error::Result;

fn sgn(v: i64) -> i64 {
    v.signum()
}

#[allow(clippy::too_many_arguments)]
fn recurse(out: &mut Vec<(usize, usize)>, mut x: i64, mut y: i64, ax: i64, ay: i64, bx: i64, by: i64) {
    let w = (ax + ay).abs();
    let h = (bx + by).abs();
    let (dax, day) = (sgn(ax), sgn(ay));
    let (dbx, dby) = (sgn(bx), sgn(by));

    if h == 1 {
        for _ in 0..w {
            out.push((x as usize, y as usize));
            x += dax;
            y += day;
        }
        return;
    }
    if w == 1 {
        for _ in 0..h {
            out.push((x as usize, y as usize));
            x += dbx;
            y += dby;
        }
        return;
    }

    let (mut ax2, mut ay2) = (ax / 2, ay / 2);
    let (mut bx2, mut by2) = (bx / 2, by / 2);
    let w2 = (ax2 + ay2).abs();
    let h2 = (bx2 + by2).abs();

    if 2 * w > 3 * h {
        if w2 % 2 != 0 && w > 2 {
            ax2 += dax;
            ay2 += day;
        }
        // Long strip: two halves along the major axis.
        recurse(out, x, y, ax2, ay2, bx, by);
        recurse(out, x + ax2, y + ay2, ax - ax2, ay - ay2, bx, by);
    } else {
        if h2 % 2 != 0 && h > 2 {
            bx2 += dbx;
            by2 += dby;
        }
        // Up, across, down.
        recurse(out, x, y, bx2, by2, ax2, ay2);
        recurse(out, x + bx2, y + by2, ax, ay, bx - bx2, by - by2);
        recurse(
            out,
            x + (ax - dax) + (bx2 - dbx),
            y + (ay - day) + (by2 - dby),
            -bx2,
            -by2,
            -(ax - ax2),
            -(ay - ay2),
        );
    }
}

/// Visited `(x, y)` cells of the generalised Hilbert curve on `width × height`,
/// starting at the origin and running along the longer axis unless the
/// parity of the extents forces the other one.
pub fn gilbert_path(width: usize, height: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(width * height);
    let (w, h) = (width as i64, height as i64);
    // A path from the origin to the far corner of the major axis needs the
    // two end cells to have compatible checkerboard colours. With an odd
    // major extent and an even minor one that fails, so the other axis leads.
    let x_major = match (width % 2, height % 2) {
        (1, 0) => false,
        (0, 1) => true,
        _ => width >= height,
    };
    if x_major {
        recurse(&mut out, 0, 0, w, 0, 0, h);
    } else {
        recurse(&mut out, 0, 0, 0, h, w, 0);
    }
    out
}

/// Generalised Hilbert scan with eight variants: bit 0 mirrors x, bit 1
/// mirrors y, bit 2 builds the curve on the transposed grid first.
pub struct Hilbert;

impl Hilbert {
    pub fn path(width: usize, height: usize, variant: usize) -> Vec<(usize, usize)> {
        let flip_x = variant & 1 == 1;
        let flip_y = variant & 2 == 2;
        let transpose = variant & 4 == 4;
        let base = if transpose {
            gilbert_path(height, width).into_iter().map(|(a, b)| (b, a)).collect()
        } else {
            gilbert_path(width, height)
        };
        base.into_iter()
            .map(|(x, y)| {
                let x = if flip_x { width - 1 - x } else { x };
                let y = if flip_y { height - 1 - y } else { y };
                (x, y)
            })
            .collect()
    }
}

impl ScanOrder for Hilbert {
    fn name(&self) -> &'static str {
        "hilbert"
    }

    fn variant_count(&self) -> usize {
        8
    }

    fn build(&self, dims: &GridDims, variant: usize) -> Result<Permutation> {
        let (w, h) = dims.as_plane("hilbert")?;
        let order = Self::path(w, h, variant).into_iter().map(|(x, y)| y * w + x).collect();
        Ok(Permutation::new(order)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scan::validate;

    #[test]
    fn degenerate_strip_is_a_line() {
        for dims in [GridDims::plane(1, 5), GridDims::plane(5, 1)] {
            let p = Hilbert.generate(&dims, 0).unwrap();
            assert_eq!(p.order(), &[0, 1, 2, 3, 4]);
        }
    }

    #[test]
    fn two_by_two_is_continuous() {
        for v in 0..8 {
            let d = GridDims::plane(2, 2);
            let p = Hilbert.generate(&d, v).unwrap();
            let r = validate(p.order(), &d).unwrap();
            assert_eq!(r.max_step, 1);
        }
    }

    #[test]
    fn eight_by_eight_fills_without_breaks() {
        let d = GridDims::plane(8, 8);
        let p = Hilbert.generate(&d, 0).unwrap();
        let r = validate(p.order(), &d).unwrap();
        assert!(r.is_space_filling);
        assert_eq!(r.breaks, 0);
    }

    #[test]
    fn power_of_two_square_matches_classic_curve_ends() {
        // The classic 4x4 Hilbert curve runs from (0,0) to (3,0).
        let p = gilbert_path(4, 4);
        assert_eq!(p.first(), Some(&(0, 0)));
        assert_eq!(p.last(), Some(&(3, 0)));
    }

    #[test]
    fn every_rectangle_up_to_48_is_continuous() {
        for w in 1..=48 {
            for h in 1..=48 {
                let p: Vec<usize> = gilbert_path(w, h).into_iter().map(|(x, y)| y * w + x).collect();
                assert_eq!(validate(&p, &GridDims::plane(w, h)).unwrap().breaks, 0, "{w}x{h}");
            }
        }
    }
}
