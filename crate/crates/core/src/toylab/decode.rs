use crate::error::{invalid, Result};
use crate::tensor::{Scalar, Tensor};

/// Decodes one `(h, w)` heatmap plane to `(row, col)` in heatmap pixels.
///
/// Argmax (lowest flat index on ties), then a quarter-pixel step toward the
/// highest of the in-bounds 4-neighbors. No step when those neighbors are
/// all equal, including the single-pixel case.
pub fn decode_plane<T: Scalar>(plane: &[T], h: usize, w: usize) -> Result<(f64, f64)> {
    if plane.len() != h * w || plane.is_empty() {
        return invalid("decode_keypoints", format!("plane of {} values for {h}×{w}", plane.len()));
    }
    let mut best = 0;
    for (i, v) in plane.iter().enumerate() {
        if *v > plane[best] {
            best = i;
        }
    }
    let (y, x) = (best / w, best % w);
    // Up, left, right, down: increasing flat index.
    let mut neighbors = Vec::with_capacity(4);
    if y > 0 {
        neighbors.push((-1.0, 0.0, plane[best - w]));
    }
    if x > 0 {
        neighbors.push((0.0, -1.0, plane[best - 1]));
    }
    if x + 1 < w {
        neighbors.push((0.0, 1.0, plane[best + 1]));
    }
    if y + 1 < h {
        neighbors.push((1.0, 0.0, plane[best + w]));
    }
    let (mut dy, mut dx) = (0.0, 0.0);
    if let Some(&(_, _, first)) = neighbors.first() {
        if neighbors.iter().any(|n| n.2 != first) {
            let mut pick = neighbors[0];
            for n in &neighbors[1..] {
                if n.2 > pick.2 {
                    pick = *n;
                }
            }
            dy = 0.25 * pick.0;
            dx = 0.25 * pick.1;
        }
    }
    Ok((y as f64 + dy, x as f64 + dx))
}

/// Per-sample, per-channel decoded coordinates of an `(n, K, h, w)` heatmap stack.
pub fn decode_keypoints<T: Scalar>(heatmaps: &Tensor<T>) -> Result<Vec<Vec<(f64, f64)>>> {
    let d = heatmaps.dims();
    (0..d.n)
        .map(|n| (0..d.c).map(|c| decode_plane(heatmaps.plane(n, c), d.h, d.w)).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toylab::task::render_heatmap;

    fn plane(h: usize, w: usize, pts: &[(usize, usize, f64)]) -> Vec<f64> {
        let mut p = vec![0.0; h * w];
        for &(y, x, v) in pts {
            p[y * w + x] = v;
        }
        p
    }

    #[test]
    fn lone_peak_has_no_offset() {
        let p = plane(10, 12, &[(5, 7, 1.0)]);
        assert_eq!(decode_plane(&p, 10, 12).unwrap(), (5.0, 7.0));
    }

    #[test]
    fn quarter_step_toward_second_highest() {
        let p = plane(10, 12, &[(5, 7, 1.0), (5, 8, 0.5)]);
        assert_eq!(decode_plane(&p, 10, 12).unwrap(), (5.0, 7.25));
        let p = plane(10, 12, &[(5, 7, 1.0), (4, 7, 0.5), (6, 7, 0.2)]);
        assert_eq!(decode_plane(&p, 10, 12).unwrap(), (4.75, 7.0));
    }

    #[test]
    fn ties_break_to_lowest_index() {
        let p = plane(4, 4, &[(1, 1, 1.0), (2, 2, 1.0)]);
        assert_eq!(decode_plane(&p, 4, 4).unwrap(), (1.0, 1.0));
        // left and right neighbors tie, up/down lower: step left.
        let p = plane(4, 4, &[(1, 1, 1.0), (1, 0, 0.5), (1, 2, 0.5)]);
        assert_eq!(decode_plane(&p, 4, 4).unwrap(), (1.0, 0.75));
    }

    #[test]
    fn flat_map_decodes_to_origin() {
        assert_eq!(decode_plane(&[0.3; 9], 3, 3).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn border_argmax_ignores_missing_neighbors() {
        let p = plane(3, 3, &[(0, 0, 1.0), (0, 1, 0.4)]);
        assert_eq!(decode_plane(&p, 3, 3).unwrap(), (0.0, 0.25));
    }

    #[test]
    fn axis_offset_gaussian_within_quarter_pixel() {
        for &(cy, cx) in &[(5.0, 7.0), (5.0, 7.3), (8.2, 2.0), (3.5, 9.0), (10.0, 11.6)] {
            let p = render_heatmap(16, cy, cx, 1.5);
            let (y, x) = decode_plane(&p, 16, 16).unwrap();
            assert!((y - cy).abs() <= 0.25 + 1e-12 && (x - cx).abs() <= 0.25 + 1e-12, "{cy},{cx} -> {y},{x}");
        }
    }
}
