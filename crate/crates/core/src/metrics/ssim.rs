//! Structural similarity between grayscale images.
//!
//! Classic single-scale SSIM with an 11x11 Gaussian window of sigma
//! 1.5 and the usual stabilizers K1 = 0.01, K2 = 0.03 on an 8-bit
//! dynamic range. Inputs are [0, 1] intensities and are scaled
//! internally; the window is only evaluated where it fully fits, and
//! the score is the mean over those positions.

use ndarray::Array2;

use super::MetricsError;

const WINDOW: usize = 11;
const SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;
const L: f64 = 255.0;

fn gaussian_window() -> [[f64; WINDOW]; WINDOW] {
    let mut w = [[0.0; WINDOW]; WINDOW];
    let c = (WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, row) in w.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let dy = i as f64 - c;
            let dx = j as f64 - c;
            *v = (-(dy * dy + dx * dx) / (2.0 * SIGMA * SIGMA)).exp();
            sum += *v;
        }
    }
    for row in &mut w {
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    w
}

/// Mean SSIM over all fully contained windows.
pub fn ssim(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64, MetricsError> {
    if a.dim() != b.dim() {
        return Err(MetricsError::ShapeMismatch {
            what: format!("images {:?} vs {:?}", a.dim(), b.dim()),
        });
    }
    let (h, w) = a.dim();
    if h < WINDOW || w < WINDOW {
        return Err(MetricsError::ShapeMismatch {
            what: format!("image {h}x{w} smaller than the {WINDOW}x{WINDOW} window"),
        });
    }
    let window = gaussian_window();
    let c1 = (K1 * L) * (K1 * L);
    let c2 = (K2 * L) * (K2 * L);
    let mut total = 0.0;
    let mut count = 0usize;
    for y in 0..=h - WINDOW {
        for x in 0..=w - WINDOW {
            let mut mu_a = 0.0;
            let mut mu_b = 0.0;
            let mut aa = 0.0;
            let mut bb = 0.0;
            let mut ab = 0.0;
            for (dy, row) in window.iter().enumerate() {
                for (dx, &wv) in row.iter().enumerate() {
                    let pa = a[(y + dy, x + dx)] * L;
                    let pb = b[(y + dy, x + dx)] * L;
                    mu_a += wv * pa;
                    mu_b += wv * pb;
                    aa += wv * pa * pa;
                    bb += wv * pb * pb;
                    ab += wv * pa * pb;
                }
            }
            let var_a = aa - mu_a * mu_a;
            let var_b = bb - mu_b * mu_b;
            let cov = ab - mu_a * mu_b;
            let score = ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
                / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
            total += score;
            count += 1;
        }
    }
    Ok(total / count as f64)
}
