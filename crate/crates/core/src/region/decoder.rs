//! Trainable mask decoder.
//!
//! A two-layer pointwise network runs on each modulated patch feature,
//! producing one logit per patch. The logit grid is upsampled
//! bilinearly (corner-aligned) to the output resolution and squashed
//! through a logistic. Training is plain gradient descent on the mean
//! squared error against reference masks, with analytically derived
//! gradients all the way through the upsampling.

use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::RegionError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Tanh,
}

impl Activation {
    fn apply(&self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the activation value.
    fn derivative_from_output(&self, h: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => 1.0 - h * h,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    /// hidden x d weight matrix.
    pub w1: Array2<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
    pub activation: Activation,
    pub out_h: usize,
    pub out_w: usize,
}

impl DecoderParams {
    pub fn zeros(d: usize, hidden: usize, out_h: usize, out_w: usize) -> Self {
        DecoderParams {
            w1: Array2::zeros((hidden, d)),
            b1: vec![0.0; hidden],
            w2: vec![0.0; hidden],
            b2: 0.0,
            activation: Activation::Tanh,
            out_h,
            out_w,
        }
    }

    pub fn seeded(d: usize, hidden: usize, out_h: usize, out_w: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let small = |rng: &mut ChaCha8Rng| rng.random_range(-0.1..0.1);
        let w1 = Array2::from_shape_fn((hidden, d), |_| small(&mut rng));
        let b1 = (0..hidden).map(|_| small(&mut rng)).collect();
        let w2 = (0..hidden).map(|_| small(&mut rng)).collect();
        let b2 = small(&mut rng);
        DecoderParams {
            w1,
            b1,
            w2,
            b2,
            activation: Activation::Tanh,
            out_h,
            out_w,
        }
    }

    pub fn hidden(&self) -> usize {
        self.w1.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn save_json(&self, path: &Path) -> Result<(), RegionError> {
        let doc = DecoderDoc::from(self);
        let text = serde_json::to_string_pretty(&doc).expect("decoder params serialize");
        fs::write(path, text).map_err(|e| RegionError::Io {
            path: path.to_path_buf(),
            source: e,
        })
    }

    pub fn load_json(path: &Path) -> Result<Self, RegionError> {
        let text = fs::read_to_string(path).map_err(|e| RegionError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let doc: DecoderDoc = serde_json::from_str(&text).map_err(|e| RegionError::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        doc.into_params()
    }
}

/// Flat serialized form; w1 is row-major.
#[derive(Debug, Serialize, Deserialize)]
struct DecoderDoc {
    hidden: usize,
    input_dim: usize,
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: f64,
    activation: Activation,
    out_h: usize,
    out_w: usize,
}

impl From<&DecoderParams> for DecoderDoc {
    fn from(p: &DecoderParams) -> Self {
        DecoderDoc {
            hidden: p.hidden(),
            input_dim: p.input_dim(),
            w1: p.w1.iter().copied().collect(),
            b1: p.b1.clone(),
            w2: p.w2.clone(),
            b2: p.b2,
            activation: p.activation,
            out_h: p.out_h,
            out_w: p.out_w,
        }
    }
}

impl DecoderDoc {
    fn into_params(self) -> Result<DecoderParams, RegionError> {
        let w1 = Array2::from_shape_vec((self.hidden, self.input_dim), self.w1).map_err(|_| {
            RegionError::ShapeMismatch {
                what: "serialized first-layer weights".to_string(),
            }
        })?;
        if self.b1.len() != self.hidden || self.w2.len() != self.hidden {
            return Err(RegionError::ShapeMismatch {
                what: "serialized bias or second-layer length".to_string(),
            });
        }
        Ok(DecoderParams {
            w1,
            b1: self.b1,
            w2: self.w2,
            b2: self.b2,
            activation: self.activation,
            out_h: self.out_h,
            out_w: self.out_w,
        })
    }
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Corner-aligned source coordinate and interpolation weight for one
/// output index.
fn align_corners(dst: usize, dst_len: usize, src_len: usize) -> (usize, usize, f64) {
    if dst_len <= 1 || src_len <= 1 {
        return (0, 0, 0.0);
    }
    let pos = dst as f64 * (src_len - 1) as f64 / (dst_len - 1) as f64;
    let lo = pos.floor() as usize;
    let lo = lo.min(src_len - 1);
    let hi = (lo + 1).min(src_len - 1);
    (lo, hi, pos - lo as f64)
}

/// Corner-aligned bilinear upsampling; identity when shapes match.
pub fn bilinear_resize(src: &Array2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (sh, sw) = src.dim();
    Array2::from_shape_fn((out_h, out_w), |(i, j)| {
        let (y0, y1, wy) = align_corners(i, out_h, sh);
        let (x0, x1, wx) = align_corners(j, out_w, sw);
        (1.0 - wy) * (1.0 - wx) * src[(y0, x0)]
            + (1.0 - wy) * wx * src[(y0, x1)]
            + wy * (1.0 - wx) * src[(y1, x0)]
            + wy * wx * src[(y1, x1)]
    })
}

/// Adjoint of the bilinear upsampling: scatter output-space gradients
/// back onto the source grid with the same weights.
fn bilinear_adjoint(grad_out: &Array2<f64>, src_h: usize, src_w: usize) -> Array2<f64> {
    let (oh, ow) = grad_out.dim();
    let mut grad_src = Array2::zeros((src_h, src_w));
    for i in 0..oh {
        let (y0, y1, wy) = align_corners(i, oh, src_h);
        for j in 0..ow {
            let (x0, x1, wx) = align_corners(j, ow, src_w);
            let g = grad_out[(i, j)];
            grad_src[(y0, x0)] += (1.0 - wy) * (1.0 - wx) * g;
            grad_src[(y0, x1)] += (1.0 - wy) * wx * g;
            grad_src[(y1, x0)] += wy * (1.0 - wx) * g;
            grad_src[(y1, x1)] += wy * wx * g;
        }
    }
    grad_src
}

fn forward_patches(
    params: &DecoderParams,
    g: &Array3<f64>,
) -> Result<(Array2<f64>, Vec<Vec<f64>>), RegionError> {
    let (hp, wp, d) = g.dim();
    if d != params.input_dim() {
        return Err(RegionError::ShapeMismatch {
            what: format!("feature dim {d}, decoder expects {}", params.input_dim()),
        });
    }
    let hidden = params.hidden();
    let mut logits = Array2::zeros((hp, wp));
    let mut activations = Vec::with_capacity(hp * wp);
    for i in 0..hp {
        for j in 0..wp {
            let mut h = vec![0.0; hidden];
            for (r, hr) in h.iter_mut().enumerate() {
                let mut s = params.b1[r];
                for k in 0..d {
                    s += params.w1[(r, k)] * g[(i, j, k)];
                }
                *hr = params.activation.apply(s);
            }
            let mut z = params.b2;
            for (r, hr) in h.iter().enumerate() {
                z += params.w2[r] * hr;
            }
            logits[(i, j)] = z;
            activations.push(h);
        }
    }
    Ok((logits, activations))
}

/// Decode a modulated patch grid into a dense probability map.
pub fn predict_map(params: &DecoderParams, g: &Array3<f64>) -> Result<Array2<f64>, RegionError> {
    let (logits, _) = forward_patches(params, g)?;
    let resized = bilinear_resize(&logits, params.out_h, params.out_w);
    Ok(resized.mapv(logistic))
}

/// Mean squared error between a predicted map and its reference.
pub fn mask_loss(predicted: &Array2<f64>, reference: &Array2<f64>) -> Result<f64, RegionError> {
    if predicted.dim() != reference.dim() {
        return Err(RegionError::ShapeMismatch {
            what: format!("loss shapes {:?} vs {:?}", predicted.dim(), reference.dim()),
        });
    }
    let n = predicted.len() as f64;
    let sum: f64 = predicted
        .iter()
        .zip(reference.iter())
        .map(|(p, r)| (p - r) * (p - r))
        .sum();
    Ok(sum / n)
}

struct Gradients {
    w1: Array2<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: f64,
}

fn sample_gradients(
    params: &DecoderParams,
    g: &Array3<f64>,
    reference: &Array2<f64>,
) -> Result<(f64, Gradients), RegionError> {
    let (hp, wp, d) = g.dim();
    let (logits, activations) = forward_patches(params, g)?;
    let resized = bilinear_resize(&logits, params.out_h, params.out_w);
    let predicted = resized.mapv(logistic);
    let loss = mask_loss(&predicted, reference)?;

    let n = predicted.len() as f64;
    let grad_u = Array2::from_shape_fn(predicted.dim(), |idx| {
        let m = predicted[idx];
        (2.0 / n) * (m - reference[idx]) * m * (1.0 - m)
    });
    let grad_z = bilinear_adjoint(&grad_u, hp, wp);

    let hidden = params.hidden();
    let mut gw1 = Array2::zeros((hidden, d));
    let mut gb1 = vec![0.0; hidden];
    let mut gw2 = vec![0.0; hidden];
    let mut gb2 = 0.0;
    for i in 0..hp {
        for j in 0..wp {
            let dz = grad_z[(i, j)];
            if dz == 0.0 {
                continue;
            }
            let h = &activations[i * wp + j];
            gb2 += dz;
            for r in 0..hidden {
                gw2[r] += dz * h[r];
                let rgrad = dz * params.w2[r] * params.activation.derivative_from_output(h[r]);
                gb1[r] += rgrad;
                for k in 0..d {
                    gw1[(r, k)] += rgrad * g[(i, j, k)];
                }
            }
        }
    }
    Ok((
        loss,
        Gradients {
            w1: gw1,
            b1: gb1,
            w2: gw2,
            b2: gb2,
        },
    ))
}

/// Average loss and gradients over a dataset of (features, reference)
/// pairs.
fn batch_gradients(
    params: &DecoderParams,
    dataset: &[(Array3<f64>, Array2<f64>)],
) -> Result<(f64, Gradients), RegionError> {
    let mut total_loss = 0.0;
    let mut acc = Gradients {
        w1: Array2::zeros(params.w1.dim()),
        b1: vec![0.0; params.hidden()],
        w2: vec![0.0; params.hidden()],
        b2: 0.0,
    };
    for (g, reference) in dataset {
        let (loss, grads) = sample_gradients(params, g, reference)?;
        total_loss += loss;
        acc.w1 += &grads.w1;
        for (a, b) in acc.b1.iter_mut().zip(&grads.b1) {
            *a += b;
        }
        for (a, b) in acc.w2.iter_mut().zip(&grads.w2) {
            *a += b;
        }
        acc.b2 += grads.b2;
    }
    let scale = 1.0 / dataset.len() as f64;
    acc.w1 *= scale;
    for a in &mut acc.b1 {
        *a *= scale;
    }
    for a in &mut acc.w2 {
        *a *= scale;
    }
    acc.b2 *= scale;
    Ok((total_loss * scale, acc))
}

/// Gradient-descend the decoder on a dataset. Returns the trained
/// parameters and the loss trace, one entry before training plus one
/// after each step.
pub fn train_decoder(
    dataset: &[(Array3<f64>, Array2<f64>)],
    init: DecoderParams,
    steps: usize,
    lr: f64,
) -> Result<(DecoderParams, Vec<f64>), RegionError> {
    if dataset.is_empty() {
        return Err(RegionError::EmptyDataset);
    }
    let mut params = init;
    let mut trace = Vec::with_capacity(steps + 1);
    for step in 0..=steps {
        let (loss, grads) = batch_gradients(&params, dataset)?;
        if !loss.is_finite() {
            return Err(RegionError::NonFiniteLoss { step });
        }
        trace.push(loss);
        if step == steps {
            break;
        }
        params.w1.zip_mut_with(&grads.w1, |p, g| *p -= lr * g);
        for (p, g) in params.b1.iter_mut().zip(&grads.b1) {
            *p -= lr * g;
        }
        for (p, g) in params.w2.iter_mut().zip(&grads.w2) {
            *p -= lr * g;
        }
        params.b2 -= lr * grads.b2;
    }
    Ok((params, trace))
}
