//! Backbone implementations: a deterministic in-process test backbone
//! and a wire client for real feature extractors.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use super::{Backbone, BackboneOutput, RegionError};
use crate::clients::{ClientError, JsonClient, TransportConfig};
use crate::vecmath::resample_area;

const SIDE: usize = 64;
const PATCH: usize = 8;
const GRID: usize = SIDE / PATCH;
const N_PATCHES: usize = GRID * GRID;
const DIM: usize = 16;
const LAYERS: usize = 4;

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(1e-12);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// A tiny frozen vision transformer over 8x8 grayscale patches. All
/// weights derive from the seed, so outputs are reproducible across
/// runs and platforms.
#[derive(Debug, Clone)]
pub struct TinyBackbone {
    projection: Vec<f64>,
    cls: Vec<f64>,
    wq: Vec<Vec<f64>>,
    wk: Vec<Vec<f64>>,
}

impl TinyBackbone {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (PATCH * PATCH) as f64;
        let projection = (0..DIM * PATCH * PATCH)
            .map(|_| normal(&mut rng) * scale.sqrt())
            .collect();
        let cls = (0..DIM).map(|_| normal(&mut rng) * 0.1).collect();
        let head_scale = 1.0 / (DIM as f64).sqrt();
        let mut wq = Vec::with_capacity(LAYERS);
        let mut wk = Vec::with_capacity(LAYERS);
        for _ in 0..LAYERS {
            wq.push((0..DIM * DIM).map(|_| normal(&mut rng) * head_scale).collect());
            wk.push((0..DIM * DIM).map(|_| normal(&mut rng) * head_scale).collect());
        }
        TinyBackbone {
            projection,
            cls,
            wq,
            wk,
        }
    }

    fn project(&self, patch: &[f64]) -> Vec<f64> {
        (0..DIM)
            .map(|r| {
                patch
                    .iter()
                    .enumerate()
                    .map(|(k, v)| self.projection[r * PATCH * PATCH + k] * v)
                    .sum()
            })
            .collect()
    }
}

fn matvec(mat: &[f64], v: &[f64]) -> Vec<f64> {
    (0..DIM)
        .map(|r| (0..DIM).map(|c| mat[r * DIM + c] * v[c]).sum())
        .collect()
}

fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

impl Backbone for TinyBackbone {
    fn layer_count(&self) -> usize {
        LAYERS
    }

    fn forward(&self, image_path: &Path) -> Result<BackboneOutput, RegionError> {
        let gray = super::load_gray(image_path)?;
        let small = resample_area(&gray, SIDE, SIDE);

        let mut tokens: Vec<Vec<f64>> = Vec::with_capacity(N_PATCHES + 1);
        tokens.push(self.cls.clone());
        for pi in 0..GRID {
            for pj in 0..GRID {
                let mut patch = Vec::with_capacity(PATCH * PATCH);
                for y in 0..PATCH {
                    for x in 0..PATCH {
                        patch.push(small[(pi * PATCH + y, pj * PATCH + x)]);
                    }
                }
                tokens.push(self.project(&patch));
            }
        }

        let mut cls_attentions = BTreeMap::new();
        let inv_sqrt_d = 1.0 / (DIM as f64).sqrt();
        for layer in 0..LAYERS {
            let queries: Vec<Vec<f64>> = tokens.iter().map(|t| matvec(&self.wq[layer], t)).collect();
            let keys: Vec<Vec<f64>> = tokens.iter().map(|t| matvec(&self.wk[layer], t)).collect();
            let mut rows = Vec::with_capacity(tokens.len());
            for q in &queries {
                let scores: Vec<f64> = keys
                    .iter()
                    .map(|k| q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() * inv_sqrt_d)
                    .collect();
                rows.push(softmax(&scores));
            }
            // CLS row without its self-attention entry; the remainder
            // over the patches sums to below one.
            cls_attentions.insert(layer, rows[0][1..].to_vec());

            let mut next = Vec::with_capacity(tokens.len());
            for (i, token) in tokens.iter().enumerate() {
                let mut mixed = vec![0.0; DIM];
                for (j, other) in tokens.iter().enumerate() {
                    let p = rows[i][j];
                    for (m, o) in mixed.iter_mut().zip(other) {
                        *m += p * o;
                    }
                }
                next.push(
                    token
                        .iter()
                        .zip(&mixed)
                        .map(|(t, m)| t + 0.5 * m)
                        .collect(),
                );
            }
            tokens = next;
        }

        let patch_features = Array2::from_shape_fn((N_PATCHES, DIM), |(p, k)| tokens[p + 1][k]);
        let out = BackboneOutput {
            patch_features,
            cls_attentions,
            grid: (GRID, GRID),
        };
        out.validate()?;
        Ok(out)
    }
}

/// Wire backbone: sends the image path and wanted layers, receives
/// patch features, per-layer CLS attentions, and the patch grid.
pub struct ClientBackbone {
    client: JsonClient,
    layers: usize,
}

impl ClientBackbone {
    pub fn from_config(cfg: &TransportConfig, layers: usize) -> Result<Self, ClientError> {
        Ok(ClientBackbone {
            client: JsonClient::from_config(cfg)?,
            layers,
        })
    }
}

impl Backbone for ClientBackbone {
    fn layer_count(&self) -> usize {
        self.layers
    }

    fn forward(&self, image_path: &Path) -> Result<BackboneOutput, RegionError> {
        let request = json!({
            "image_path": image_path.to_string_lossy(),
            "layers": (0..self.layers).collect::<Vec<usize>>(),
        });
        let response = self.client.call(&request)?;
        let features: Vec<Vec<f64>> =
            serde_json::from_value(response.get("patch_features").cloned().unwrap_or_default())
                .map_err(|e| ClientError::BadResponse {
                    message: format!("patch_features: {e}"),
                })?;
        let n = features.len();
        let d = features.first().map(|r| r.len()).unwrap_or(0);
        if n == 0 || d == 0 || features.iter().any(|r| r.len() != d) {
            return Err(ClientError::BadResponse {
                message: "patch_features must be a nonempty rectangular matrix".to_string(),
            }
            .into());
        }
        let mut patch_features = Array2::zeros((n, d));
        for (i, row) in features.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                patch_features[(i, j)] = *v;
            }
        }
        let raw_attn: BTreeMap<String, Vec<f64>> =
            serde_json::from_value(response.get("cls_attentions").cloned().unwrap_or_default())
                .map_err(|e| ClientError::BadResponse {
                    message: format!("cls_attentions: {e}"),
                })?;
        let mut cls_attentions = BTreeMap::new();
        for (key, weights) in raw_attn {
            let layer: usize = key.parse().map_err(|_| ClientError::BadResponse {
                message: format!("attention layer key {key:?}"),
            })?;
            cls_attentions.insert(layer, weights);
        }
        let grid: (usize, usize) =
            serde_json::from_value(response.get("grid").cloned().unwrap_or_default()).map_err(
                |e| ClientError::BadResponse {
                    message: format!("grid: {e}"),
                },
            )?;
        let out = BackboneOutput {
            patch_features,
            cls_attentions,
            grid,
        };
        out.validate()?;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn checker_image(dir: &Path, name: &str, period: usize) -> std::path::PathBuf {
        let gray = Array2::from_shape_fn((96, 80), |(y, x)| {
            if (y / period + x / period) % 2 == 0 {
                0.9
            } else {
                0.1
            }
        });
        let path = dir.join(name);
        crate::region::save_gray(&gray, &path).unwrap();
        path
    }

    #[test]
    fn tiny_backbone_produces_valid_output() {
        let dir = tempfile::tempdir().unwrap();
        let path = checker_image(dir.path(), "img.png", 8);
        let backbone = TinyBackbone::new(7);
        let out = backbone.forward(&path).unwrap();
        assert_eq!(out.grid, (8, 8));
        assert_eq!(out.patch_features.dim(), (64, 16));
        assert_eq!(out.cls_attentions.len(), 4);
        out.validate().unwrap();
        for weights in out.cls_attentions.values() {
            let sum: f64 = weights.iter().sum();
            assert!(sum > 0.0 && sum <= 1.0 + 1e-9);
        }
    }

    #[test]
    fn tiny_backbone_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let path = checker_image(dir.path(), "img.png", 8);
        let a = TinyBackbone::new(7).forward(&path).unwrap();
        let b = TinyBackbone::new(7).forward(&path).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn different_images_change_the_features() {
        let dir = tempfile::tempdir().unwrap();
        let a_path = checker_image(dir.path(), "a.png", 8);
        let b_path = checker_image(dir.path(), "b.png", 16);
        let backbone = TinyBackbone::new(7);
        let a = backbone.forward(&a_path).unwrap();
        let b = backbone.forward(&b_path).unwrap();
        assert_ne!(a.patch_features, b.patch_features);
    }

    #[test]
    fn client_backbone_parses_wire_response() {
        let reply = r#"{"patch_features":[[1,0],[0,1],[0.5,0.5],[0.25,0.75]],"cls_attentions":{"0":[0.1,0.2,0.3,0.1]},"grid":[2,2]}"#;
        let cfg = TransportConfig::Subprocess {
            cmd: vec![
                "/bin/sh".to_string(),
                "-c".to_string(),
                format!("while read line; do echo '{reply}'; done"),
            ],
            timeout_secs: 10,
        };
        let backbone = ClientBackbone::from_config(&cfg, 1).unwrap();
        let out = backbone.forward(Path::new("ignored.png")).unwrap();
        assert_eq!(out.grid, (2, 2));
        assert_eq!(out.patch_features.dim(), (4, 2));
        assert_eq!(out.cls_attentions[&0], vec![0.1, 0.2, 0.3, 0.1]);
    }
}
