//! Affective region localization.
//!
//! A frozen vision backbone exposes patch features and CLS-to-patch
//! attention maps. Selected attention layers are averaged into a patch
//! saliency map, the saliency modulates the patch features, and a small
//! trainable decoder turns the modulated features into a dense mask.
//! Thresholding plus a largest-component sweep yields the final binary
//! region and its bounding box.

pub mod backbone;
pub mod decoder;

use std::collections::BTreeMap;
use std::io;
use std::path::{Path, PathBuf};

use image::GrayImage;
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clients::ClientError;
use decoder::DecoderParams;

#[derive(Debug, Error)]
pub enum RegionError {
    #[error("layer set is empty")]
    EmptyLayerSet,
    #[error("attention layer {layer} not available")]
    LayerOutOfRange { layer: usize },
    #[error("shape mismatch: {what}")]
    ShapeMismatch { what: String },
    #[error("non-finite value in {what}")]
    NonFiniteValue { what: String },
    #[error("loss became non-finite at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("training dataset is empty")]
    EmptyDataset,
    #[error("threshold {0} outside [0, 1]")]
    InvalidThreshold(f64),
    #[error("attention weights invalid: {what}")]
    BadAttention { what: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {message}")]
    Image { path: PathBuf, message: String },
    #[error(transparent)]
    Client(#[from] ClientError),
}

/// Which backbone layers contribute to the saliency average.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSet {
    indices: Vec<usize>,
}

impl LayerSet {
    pub fn new(mut indices: Vec<usize>) -> Result<Self, RegionError> {
        indices.sort_unstable();
        indices.dedup();
        if indices.is_empty() {
            return Err(RegionError::EmptyLayerSet);
        }
        Ok(LayerSet { indices })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Frozen backbone outputs for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneOutput {
    /// N x D patch feature matrix, patches in row-major grid order.
    pub patch_features: Array2<f64>,
    /// Per-layer CLS-to-patch attention weights, each of length N.
    pub cls_attentions: BTreeMap<usize, Vec<f64>>,
    /// Patch grid (rows, cols) with rows * cols == N.
    pub grid: (usize, usize),
}

impl BackboneOutput {
    /// Check internal consistency: grid matches N, every attention row
    /// has N nonnegative finite entries summing to at most one.
    pub fn validate(&self) -> Result<(), RegionError> {
        let n = self.patch_features.nrows();
        let (hp, wp) = self.grid;
        if hp * wp != n {
            return Err(RegionError::ShapeMismatch {
                what: format!("grid {hp}x{wp} does not cover {n} patches"),
            });
        }
        if self.patch_features.iter().any(|v| !v.is_finite()) {
            return Err(RegionError::NonFiniteValue {
                what: "patch features".to_string(),
            });
        }
        for (layer, weights) in &self.cls_attentions {
            if weights.len() != n {
                return Err(RegionError::ShapeMismatch {
                    what: format!("attention layer {layer} has {} entries, expected {n}", weights.len()),
                });
            }
            let mut sum = 0.0;
            for &w in weights {
                if !w.is_finite() || w < 0.0 {
                    return Err(RegionError::BadAttention {
                        what: format!("layer {layer} weight {w}"),
                    });
                }
                sum += w;
            }
            if sum > 1.0 + 1e-9 {
                return Err(RegionError::BadAttention {
                    what: format!("layer {layer} sums to {sum}"),
                });
            }
        }
        Ok(())
    }
}

/// Any provider of patch features and CLS attentions.
pub trait Backbone: Send + Sync {
    fn layer_count(&self) -> usize;
    fn forward(&self, image_path: &Path) -> Result<BackboneOutput, RegionError>;
}

/// Average the CLS-to-patch attention over the selected layers.
pub fn aggregate_attention(out: &BackboneOutput, layers: &LayerSet) -> Result<Vec<f64>, RegionError> {
    let n = out.patch_features.nrows();
    let mut acc = vec![0.0; n];
    for &layer in layers.indices() {
        let weights = out
            .cls_attentions
            .get(&layer)
            .ok_or(RegionError::LayerOutOfRange { layer })?;
        if weights.len() != n {
            return Err(RegionError::ShapeMismatch {
                what: format!("attention layer {layer} length {}", weights.len()),
            });
        }
        for (a, w) in acc.iter_mut().zip(weights) {
            *a += w;
        }
    }
    let scale = 1.0 / layers.len() as f64;
    for a in &mut acc {
        *a *= scale;
    }
    Ok(acc)
}

/// Modulate patch features by the saliency map, returning the patch
/// grid as (rows, cols, dim) with each feature row scaled by its patch
/// weight.
pub fn focus_features(out: &BackboneOutput, m_patch: &[f64]) -> Result<Array3<f64>, RegionError> {
    let n = out.patch_features.nrows();
    let d = out.patch_features.ncols();
    let (hp, wp) = out.grid;
    if m_patch.len() != n {
        return Err(RegionError::ShapeMismatch {
            what: format!("saliency length {} for {n} patches", m_patch.len()),
        });
    }
    let mut g = Array3::zeros((hp, wp, d));
    for i in 0..hp {
        for j in 0..wp {
            let p = i * wp + j;
            for k in 0..d {
                g[(i, j, k)] = m_patch[p] * out.patch_features[(p, k)];
            }
        }
    }
    Ok(g)
}

/// Inclusive pixel bounding box; x indexes columns, y indexes rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

/// The localized affective region.
#[derive(Debug, Clone, PartialEq)]
pub struct AffectiveMask {
    /// Raw decoder probabilities.
    pub dense: Array2<f64>,
    /// Largest connected component of the thresholded map.
    pub binary: Array2<bool>,
    /// Inclusive bounding box of the component, absent when no pixel
    /// passes the threshold.
    pub bbox: Option<BBox>,
}

/// Threshold the dense map, keep the largest 4-connected component
/// (scan order breaks ties), and compute its inclusive bounding box.
pub fn postprocess(dense: &Array2<f64>, threshold: f64) -> Result<AffectiveMask, RegionError> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(RegionError::InvalidThreshold(threshold));
    }
    let (h, w) = dense.dim();
    let thresholded: Vec<bool> = dense.iter().map(|&v| v >= threshold).collect();
    let mut labels = vec![0usize; h * w];
    let mut best_label = 0usize;
    let mut best_size = 0usize;
    let mut next = 1usize;
    let mut queue = std::collections::VecDeque::new();
    for start in 0..h * w {
        if !thresholded[start] || labels[start] != 0 {
            continue;
        }
        let label = next;
        next += 1;
        let mut size = 0usize;
        labels[start] = label;
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            size += 1;
            let (y, x) = (p / w, p % w);
            let mut visit = |q: usize| {
                if thresholded[q] && labels[q] == 0 {
                    labels[q] = label;
                    queue.push_back(q);
                }
            };
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
        }
        if size > best_size {
            best_size = size;
            best_label = label;
        }
    }
    let mut binary = Array2::from_elem((h, w), false);
    let mut bbox: Option<BBox> = None;
    if best_label != 0 {
        for p in 0..h * w {
            if labels[p] == best_label {
                let (y, x) = (p / w, p % w);
                binary[(y, x)] = true;
                bbox = Some(match bbox {
                    None => BBox { x0: x, y0: y, x1: x, y1: y },
                    Some(b) => BBox {
                        x0: b.x0.min(x),
                        y0: b.y0.min(y),
                        x1: b.x1.max(x),
                        y1: b.y1.max(y),
                    },
                });
            }
        }
    }
    Ok(AffectiveMask {
        dense: dense.clone(),
        binary,
        bbox,
    })
}

/// Full localization: forward, aggregate, focus, decode, postprocess.
pub fn localize(
    backbone: &dyn Backbone,
    image_path: &Path,
    layers: &LayerSet,
    params: &DecoderParams,
    threshold: f64,
) -> Result<AffectiveMask, RegionError> {
    let out = backbone.forward(image_path)?;
    out.validate()?;
    let m_patch = aggregate_attention(&out, layers)?;
    let g = focus_features(&out, &m_patch)?;
    let dense = decoder::predict_map(params, &g)?;
    postprocess(&dense, threshold)
}

/// Write a binary mask as an 8-bit grayscale image, 255 inside.
pub fn save_mask_png(mask: &Array2<bool>, path: &Path) -> Result<(), RegionError> {
    let (h, w) = mask.dim();
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([if mask[(y as usize, x as usize)] { 255u8 } else { 0u8 }])
    });
    img.save(path).map_err(|e| RegionError::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Read a grayscale image back into a binary mask; 128 and above is
/// inside.
pub fn load_mask_png(path: &Path) -> Result<Array2<bool>, RegionError> {
    let img = image::open(path)
        .map_err(|e| RegionError::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?
        .to_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        img.get_pixel(x as u32, y as u32)[0] >= 128
    }))
}

/// Load a grayscale image into row-major [0, 1] intensities.
pub fn load_gray(path: &Path) -> Result<Array2<f64>, RegionError> {
    let img = image::open(path)
        .map_err(|e| RegionError::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?
        .to_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        img.get_pixel(x as u32, y as u32)[0] as f64 / 255.0
    }))
}

/// Write [0, 1] intensities as an 8-bit grayscale image.
pub fn save_gray(gray: &Array2<f64>, path: &Path) -> Result<(), RegionError> {
    let (h, w) = gray.dim();
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        let v = gray[(y as usize, x as usize)].clamp(0.0, 1.0);
        image::Luma([(v * 255.0).round() as u8])
    });
    img.save(path).map_err(|e| RegionError::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn two_layer_output() -> BackboneOutput {
        let mut attn = BTreeMap::new();
        attn.insert(0, vec![0.1, 0.2, 0.3, 0.4]);
        attn.insert(1, vec![0.3, 0.0, 0.1, 0.2]);
        BackboneOutput {
            patch_features: array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0], [7.0, 8.0]],
            cls_attentions: attn,
            grid: (2, 2),
        }
    }

    #[test]
    fn aggregate_is_elementwise_layer_mean() {
        let out = two_layer_output();
        let layers = LayerSet::new(vec![0, 1]).unwrap();
        let m = aggregate_attention(&out, &layers).unwrap();
        let expected = [0.2, 0.1, 0.2, 0.3];
        for (got, want) in m.iter().zip(expected) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn aggregate_single_layer_is_identity() {
        let out = two_layer_output();
        let layers = LayerSet::new(vec![1]).unwrap();
        let m = aggregate_attention(&out, &layers).unwrap();
        assert_eq!(m, vec![0.3, 0.0, 0.1, 0.2]);
    }

    #[test]
    fn missing_layer_is_out_of_range() {
        let out = two_layer_output();
        let layers = LayerSet::new(vec![7]).unwrap();
        let err = aggregate_attention(&out, &layers).unwrap_err();
        assert!(matches!(err, RegionError::LayerOutOfRange { layer: 7 }));
    }

    #[test]
    fn layer_set_sorts_and_dedups() {
        let layers = LayerSet::new(vec![3, 1, 3, 2]).unwrap();
        assert_eq!(layers.indices(), &[1, 2, 3]);
        assert!(matches!(LayerSet::new(vec![]), Err(RegionError::EmptyLayerSet)));
    }

    #[test]
    fn focus_scales_each_patch_row() {
        let out = two_layer_output();
        let g = focus_features(&out, &[0.5, 1.0, 0.0, 2.0]).unwrap();
        assert_eq!(g.dim(), (2, 2, 2));
        assert_eq!(g[(0, 0, 0)], 0.5);
        assert_eq!(g[(0, 0, 1)], 1.0);
        assert_eq!(g[(0, 1, 0)], 3.0);
        assert_eq!(g[(1, 0, 0)], 0.0);
        assert_eq!(g[(1, 1, 1)], 16.0);
    }

    #[test]
    fn validate_rejects_bad_grid_and_weights() {
        let mut out = two_layer_output();
        out.grid = (3, 2);
        assert!(matches!(out.validate(), Err(RegionError::ShapeMismatch { .. })));

        let mut out = two_layer_output();
        out.cls_attentions.insert(2, vec![0.5, 0.6, 0.2, 0.1]);
        assert!(matches!(out.validate(), Err(RegionError::BadAttention { .. })));

        let mut out = two_layer_output();
        out.cls_attentions.insert(2, vec![0.1, -0.1, 0.2, 0.1]);
        assert!(matches!(out.validate(), Err(RegionError::BadAttention { .. })));

        assert!(two_layer_output().validate().is_ok());
    }

    #[test]
    fn postprocess_keeps_largest_component() {
        let dense = array![
            [0.9, 0.9, 0.0, 0.8],
            [0.9, 0.0, 0.0, 0.8],
            [0.0, 0.0, 0.0, 0.8],
            [0.7, 0.0, 0.0, 0.8]
        ];
        let mask = postprocess(&dense, 0.5).unwrap();
        // The right column has four pixels; the top-left block has three.
        assert!(mask.binary[(0, 3)]);
        assert!(mask.binary[(3, 3)]);
        assert!(!mask.binary[(0, 0)]);
        assert!(!mask.binary[(3, 0)]);
        assert_eq!(mask.bbox, Some(BBox { x0: 3, y0: 0, x1: 3, y1: 3 }));
    }

    #[test]
    fn postprocess_tie_keeps_first_in_scan_order() {
        let dense = array![
            [0.9, 0.0, 0.9],
            [0.9, 0.0, 0.9],
            [0.0, 0.0, 0.0]
        ];
        let mask = postprocess(&dense, 0.5).unwrap();
        assert!(mask.binary[(0, 0)]);
        assert!(mask.binary[(1, 0)]);
        assert!(!mask.binary[(0, 2)]);
        assert_eq!(mask.bbox, Some(BBox { x0: 0, y0: 0, x1: 0, y1: 1 }));
    }

    #[test]
    fn postprocess_threshold_is_inclusive() {
        let dense = array![[0.5, 0.49]];
        let mask = postprocess(&dense, 0.5).unwrap();
        assert!(mask.binary[(0, 0)]);
        assert!(!mask.binary[(0, 1)]);
    }

    #[test]
    fn postprocess_empty_map_has_no_box() {
        let dense = Array2::from_elem((4, 4), 0.1);
        let mask = postprocess(&dense, 0.5).unwrap();
        assert!(mask.binary.iter().all(|&b| !b));
        assert_eq!(mask.bbox, None);
    }

    #[test]
    fn postprocess_diagonal_pixels_are_separate_components() {
        let dense = array![
            [0.9, 0.0],
            [0.0, 0.9]
        ];
        let mask = postprocess(&dense, 0.5).unwrap();
        let count = mask.binary.iter().filter(|&&b| b).count();
        assert_eq!(count, 1);
        assert!(mask.binary[(0, 0)]);
    }

    #[test]
    fn mask_png_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mask.png");
        let mask = Array2::from_shape_fn((5, 7), |(y, x)| (x + y) % 3 == 0);
        save_mask_png(&mask, &path).unwrap();
        let back = load_mask_png(&path).unwrap();
        assert_eq!(mask, back);
    }

    #[test]
    fn gray_png_round_trips_quantized() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gray.png");
        let gray = Array2::from_shape_fn((4, 4), |(y, x)| (y as f64 * 4.0 + x as f64) / 16.0);
        save_gray(&gray, &path).unwrap();
        let back = load_gray(&path).unwrap();
        for (a, b) in gray.iter().zip(back.iter()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }
}
