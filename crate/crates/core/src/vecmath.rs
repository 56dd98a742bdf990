//! Small shared numeric helpers: cosine similarity and area resampling.

use ndarray::Array2;

/// Norms below this threshold are treated as zero.
pub const ZERO_NORM_EPS: f64 = 1e-12;

/// Dot product of two equal-length slices.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Euclidean norm.
pub fn l2_norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Cosine similarity, `None` when either vector has near-zero norm.
///
/// Panics on length mismatch; callers validate dimensions first.
pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    assert_eq!(a.len(), b.len(), "cosine over mismatched dimensions");
    let na = l2_norm(a);
    let nb = l2_norm(b);
    if na < ZERO_NORM_EPS || nb < ZERO_NORM_EPS {
        return None;
    }
    Some(dot(a, b) / (na * nb))
}

/// Box-filter (area) resampling of a 2D map to an arbitrary size.
///
/// Each output pixel averages the exact fractional source window it
/// covers, so constant maps stay constant and mass is preserved up to
/// rounding. Used for attention-to-feature alignment and for mask
/// downsampling.
pub fn resample_area(src: &Array2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (ih, iw) = src.dim();
    assert!(ih > 0 && iw > 0, "resample_area on empty input");
    assert!(out_h > 0 && out_w > 0, "resample_area to empty output");
    let sy = ih as f64 / out_h as f64;
    let sx = iw as f64 / out_w as f64;
    let mut out = Array2::zeros((out_h, out_w));
    for oy in 0..out_h {
        let y0 = oy as f64 * sy;
        let y1 = (oy + 1) as f64 * sy;
        let iy0 = y0.floor() as usize;
        let iy1 = (y1.ceil() as usize).min(ih);
        for ox in 0..out_w {
            let x0 = ox as f64 * sx;
            let x1 = (ox + 1) as f64 * sx;
            let ix0 = x0.floor() as usize;
            let ix1 = (x1.ceil() as usize).min(iw);
            let mut acc = 0.0;
            let mut area = 0.0;
            for iy in iy0..iy1 {
                let wy = (y1.min((iy + 1) as f64) - y0.max(iy as f64)).max(0.0);
                if wy == 0.0 {
                    continue;
                }
                for ix in ix0..ix1 {
                    let wx = (x1.min((ix + 1) as f64) - x0.max(ix as f64)).max(0.0);
                    if wx == 0.0 {
                        continue;
                    }
                    acc += src[(iy, ix)] * (wy * wx);
                    area += wy * wx;
                }
            }
            out[(oy, ox)] = acc / area;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn cosine_of_parallel_vectors_is_one() {
        let s = cosine(&[1.0, 2.0], &[2.0, 4.0]).unwrap();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_of_orthogonal_vectors_is_zero() {
        let s = cosine(&[1.0, 0.0], &[0.0, 3.0]).unwrap();
        assert!(s.abs() < 1e-12);
    }

    #[test]
    fn cosine_rejects_zero_norm() {
        assert!(cosine(&[0.0, 0.0], &[1.0, 0.0]).is_none());
    }

    #[test]
    fn resample_preserves_constants_exactly() {
        let src = Array2::from_elem((5, 7), 1.0);
        let out = resample_area(&src, 3, 4);
        for v in out.iter() {
            assert_eq!(*v, 1.0);
        }
    }

    #[test]
    fn resample_integer_downscale_averages_blocks() {
        let src = array![[1.0, 3.0], [5.0, 7.0]];
        let out = resample_area(&src, 1, 1);
        assert!((out[(0, 0)] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn resample_identity_at_same_size() {
        let src = array![[1.0, 2.0], [3.0, 4.0]];
        let out = resample_area(&src, 2, 2);
        assert_eq!(src, out);
    }

    #[test]
    fn resample_upscale_replicates_pixels() {
        let src = array![[2.0, 8.0]];
        let out = resample_area(&src, 1, 4);
        assert_eq!(out, array![[2.0, 2.0, 8.0, 8.0]]);
    }
}
