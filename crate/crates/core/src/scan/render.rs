use super::GridDims;

/// Draws a scan order as arrows on the grid, one block of rows per frame.
/// Each cell shows the direction to the next visited cell; `*` marks a jump
/// to a non-adjacent cell, `●` the final cell.
pub fn render_arrows(order: &[usize], dims: &GridDims) -> String {
    let (frames, w, h) = match *dims {
        GridDims::Plane { width, height } => (1, width, height),
        GridDims::Volume { frames, width, height } => (frames, width, height),
    };
    let mut glyph = vec!['?'; frames * w * h];
    for (k, &cell) in order.iter().enumerate() {
        let g = match order.get(k + 1) {
            None => '●',
            Some(&next) => {
                let (x0, y0, t0) = dims.coords(cell);
                let (x1, y1, t1) = dims.coords(next);
                match (x1 as i64 - x0 as i64, y1 as i64 - y0 as i64, t1 as i64 - t0 as i64) {
                    (1, 0, 0) => '→',
                    (-1, 0, 0) => '←',
                    (0, 1, 0) => '↓',
                    (0, -1, 0) => '↑',
                    (0, 0, 1) => '⊙',
                    (0, 0, -1) => '⊗',
                    _ => '*',
                }
            }
        };
        if cell < glyph.len() {
            glyph[cell] = g;
        }
    }
    let mut out = String::new();
    for t in 0..frames {
        if frames > 1 {
            out.push_str(&format!("frame {t}\n"));
        }
        for y in 0..h {
            let row: Vec<String> = (0..w).map(|x| glyph[t * w * h + y * w + x].to_string()).collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
    }
    out
}
