//! Noise prediction backends.
//!
//! Everything the editor needs from a diffusion model sits behind the
//! `Denoiser` trait, so the algebra can be exercised with closed-form
//! predictors and the full pipeline with a remote model. Four backends
//! ship in-process: an all-zero predictor, the analytic optimum for a
//! Gaussian data distribution, a seeded convolutional toy model with
//! real attention and feature maps, and a JSON wire client.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use super::{inject_attention, Denoiser, DenoiserOutput, DseeError, InjectionSpec, Latent, NoiseSchedule};
use crate::clients::{ClientError, JsonClient, TransportConfig};
use crate::providers::fnv1a64;

/// Predicts zero noise everywhere. Under this backend the DDIM maps
/// are pure rescalings, which makes round trips exactly checkable.
pub struct ZeroDenoiser;

impl Denoiser for ZeroDenoiser {
    fn predict(
        &self,
        latent: &Latent,
        _t: usize,
        _condition: Option<&str>,
        _want_maps: bool,
        _inject: Option<&InjectionSpec>,
    ) -> Result<DenoiserOutput, DseeError> {
        Ok(DenoiserOutput::plain(Latent::zeros(latent.raw_dim())))
    }
}

/// The optimal noise predictor when the clean data is zero-mean
/// Gaussian with the given per-pixel variance. Its prediction is a
/// timestep-dependent rescaling of the input latent.
pub struct AnalyticDenoiser {
    sigma2: f64,
    schedule: NoiseSchedule,
}

impl AnalyticDenoiser {
    pub fn new(sigma2: f64, schedule: NoiseSchedule) -> Self {
        AnalyticDenoiser { sigma2, schedule }
    }

    pub fn coefficient(&self, t: usize) -> f64 {
        let ab = self.schedule.alpha_bar(t);
        (1.0 - ab).sqrt() / (ab * self.sigma2 + 1.0 - ab)
    }
}

impl Denoiser for AnalyticDenoiser {
    fn predict(
        &self,
        latent: &Latent,
        t: usize,
        _condition: Option<&str>,
        _want_maps: bool,
        _inject: Option<&InjectionSpec>,
    ) -> Result<DenoiserOutput, DseeError> {
        if t > self.schedule.steps() {
            return Err(DseeError::StepOutOfRange {
                t,
                direction: super::Direction::Denoise,
                steps: self.schedule.steps(),
            });
        }
        let coef = self.coefficient(t);
        Ok(DenoiserOutput::plain(latent.mapv(|v| coef * v)))
    }
}

/// A two-layer depthwise convolutional predictor with a derived
/// attention map. All weights come from the seed, the condition text
/// perturbs the prediction through a seeded field, and injections
/// modulate the internal features directly.
pub struct StructuredDenoiser {
    seed: u64,
}

impl StructuredDenoiser {
    pub fn new(seed: u64) -> Self {
        StructuredDenoiser { seed }
    }

    fn kernel(&self, layer: usize, channel: usize) -> [f64; 9] {
        let tag = format!("conv{layer}:{channel}");
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a64(tag.as_bytes()));
        let mut k = [0.0; 9];
        for v in &mut k {
            *v = rng.random_range(-0.5..0.5);
        }
        k
    }

    fn conv_layer(&self, x: &Latent, layer: usize) -> Latent {
        let (c, h, w) = x.dim();
        let mut out = Latent::zeros((c, h, w));
        for ch in 0..c {
            let kernel = self.kernel(layer, ch);
            for i in 0..h {
                for j in 0..w {
                    let mut acc = 0.0;
                    for dy in 0..3usize {
                        for dx in 0..3usize {
                            let y = i + dy;
                            let x_ = j + dx;
                            if y == 0 || x_ == 0 || y > h || x_ > w {
                                continue;
                            }
                            acc += kernel[dy * 3 + dx] * x[(ch, y - 1, x_ - 1)];
                        }
                    }
                    out[(ch, i, j)] = acc.tanh();
                }
            }
        }
        out
    }

    fn cond_field(&self, shape: (usize, usize, usize), condition: Option<&str>, t: usize) -> Latent {
        let tag = format!("{}:{}:{t}", self.seed, condition.unwrap_or(""));
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a64(tag.as_bytes()));
        Latent::from_shape_fn(shape, |_| rng.random_range(-0.2..0.2))
    }
}

fn attention_map(f: &Latent) -> Array2<f64> {
    let (c, h, w) = f.dim();
    let mut a = Array2::zeros((h, w));
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                a[(i, j)] += f[(ch, i, j)].abs();
            }
        }
    }
    a.mapv_inplace(|v| v / c as f64);
    let max = a.iter().cloned().fold(0.0f64, f64::max);
    if max > 0.0 {
        a.mapv_inplace(|v| v / max);
    }
    a
}

impl Denoiser for StructuredDenoiser {
    fn predict(
        &self,
        latent: &Latent,
        t: usize,
        condition: Option<&str>,
        want_maps: bool,
        inject: Option<&InjectionSpec>,
    ) -> Result<DenoiserOutput, DseeError> {
        let f1 = self.conv_layer(latent, 0);
        let attn = attention_map(&f1);
        let f1 = match inject {
            Some(spec) if spec.layers.contains(&0) => {
                inject_attention(&f1, spec.attn_rec, spec.lambda_att)
            }
            _ => f1,
        };
        let f2 = self.conv_layer(&f1, 1);
        let f2 = match inject {
            Some(spec) if spec.layers.contains(&1) => {
                inject_attention(&f2, spec.attn_rec, spec.lambda_att)
            }
            _ => f2,
        };
        let field = self.cond_field(latent.dim(), condition, t);
        let mut eps = Latent::zeros(latent.raw_dim());
        for ((e, &f), &n) in eps.iter_mut().zip(f2.iter()).zip(field.iter()) {
            *e = 0.25 * f + n;
        }
        Ok(DenoiserOutput {
            eps,
            attn: want_maps.then(|| attn),
            feat: want_maps.then(|| f2.clone()),
        })
    }

    fn consumes_injection(&self) -> bool {
        true
    }
}

fn latent_to_nested(x: &Latent) -> Vec<Vec<Vec<f64>>> {
    let (c, h, w) = x.dim();
    (0..c)
        .map(|ch| {
            (0..h)
                .map(|i| (0..w).map(|j| x[(ch, i, j)]).collect())
                .collect()
        })
        .collect()
}

fn nested_to_latent(v: Vec<Vec<Vec<f64>>>) -> Result<Latent, ClientError> {
    let c = v.len();
    let h = v.first().map(|p| p.len()).unwrap_or(0);
    let w = v.first().and_then(|p| p.first()).map(|r| r.len()).unwrap_or(0);
    if c == 0 || h == 0 || w == 0 {
        return Err(ClientError::BadResponse {
            message: "latent must be a nonempty 3d array".to_string(),
        });
    }
    let mut out = Latent::zeros((c, h, w));
    for (ch, plane) in v.iter().enumerate() {
        if plane.len() != h {
            return Err(ClientError::BadResponse {
                message: "ragged latent planes".to_string(),
            });
        }
        for (i, row) in plane.iter().enumerate() {
            if row.len() != w {
                return Err(ClientError::BadResponse {
                    message: "ragged latent rows".to_string(),
                });
            }
            for (j, &val) in row.iter().enumerate() {
                out[(ch, i, j)] = val;
            }
        }
    }
    Ok(out)
}

fn matrix_from_nested(v: Vec<Vec<f64>>) -> Result<Array2<f64>, ClientError> {
    let h = v.len();
    let w = v.first().map(|r| r.len()).unwrap_or(0);
    if h == 0 || w == 0 || v.iter().any(|r| r.len() != w) {
        return Err(ClientError::BadResponse {
            message: "attention must be a nonempty rectangular matrix".to_string(),
        });
    }
    let mut out = Array2::zeros((h, w));
    for (i, row) in v.iter().enumerate() {
        for (j, &val) in row.iter().enumerate() {
            out[(i, j)] = val;
        }
    }
    Ok(out)
}

/// Wire predictor: ships the latent as nested arrays and reads back
/// the noise estimate with optional attention and feature maps.
/// Injections cannot cross the wire, so the editor applies them to the
/// returned features instead.
pub struct ClientDenoiser {
    client: JsonClient,
}

impl ClientDenoiser {
    pub fn from_config(cfg: &TransportConfig) -> Result<Self, ClientError> {
        Ok(ClientDenoiser {
            client: JsonClient::from_config(cfg)?,
        })
    }
}

impl Denoiser for ClientDenoiser {
    fn predict(
        &self,
        latent: &Latent,
        t: usize,
        condition: Option<&str>,
        want_maps: bool,
        inject: Option<&InjectionSpec>,
    ) -> Result<DenoiserOutput, DseeError> {
        let request = json!({
            "latent": latent_to_nested(latent),
            "t": t,
            "condition": condition,
            "want_attention": want_maps,
            "layers": inject.map(|s| s.layers.to_vec()).unwrap_or_default(),
        });
        let response = self.client.call(&request).map_err(DseeError::Client)?;
        let eps_value = response.get("eps").cloned().ok_or_else(|| {
            DseeError::Client(ClientError::BadResponse {
                message: "missing eps".to_string(),
            })
        })?;
        let eps_nested: Vec<Vec<Vec<f64>>> = serde_json::from_value(eps_value).map_err(|e| {
            DseeError::Client(ClientError::BadResponse {
                message: format!("eps: {e}"),
            })
        })?;
        let eps = nested_to_latent(eps_nested).map_err(DseeError::Client)?;
        if eps.dim() != latent.dim() {
            return Err(DseeError::ShapeMismatch {
                what: format!("remote eps {:?} for latent {:?}", eps.dim(), latent.dim()),
            });
        }
        let attn = match response.get("attn") {
            Some(v) if !v.is_null() => {
                let nested: Vec<Vec<f64>> = serde_json::from_value(v.clone()).map_err(|e| {
                    DseeError::Client(ClientError::BadResponse {
                        message: format!("attn: {e}"),
                    })
                })?;
                Some(matrix_from_nested(nested).map_err(DseeError::Client)?)
            }
            _ => None,
        };
        let feat = match response.get("feat") {
            Some(v) if !v.is_null() => {
                let nested: Vec<Vec<Vec<f64>>> = serde_json::from_value(v.clone()).map_err(|e| {
                    DseeError::Client(ClientError::BadResponse {
                        message: format!("feat: {e}"),
                    })
                })?;
                Some(nested_to_latent(nested).map_err(DseeError::Client)?)
            }
            _ => None,
        };
        Ok(DenoiserOutput { eps, attn, feat })
    }

    fn exclusive(&self) -> bool {
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsee::random_latent;

    #[test]
    fn zero_backend_predicts_zeros() {
        let x = random_latent(2, 3, 3, 0);
        let out = ZeroDenoiser.predict(&x, 5, None, false, None).unwrap();
        assert!(out.eps.iter().all(|&v| v == 0.0));
        assert!(out.attn.is_none());
    }

    #[test]
    fn analytic_backend_matches_closed_form() {
        let schedule = NoiseSchedule::default_sd();
        let den = AnalyticDenoiser::new(2.0, schedule.clone());
        let x = random_latent(1, 2, 2, 1);
        let t = 7;
        let ab = schedule.alpha_bar(t);
        let coef = (1.0 - ab).sqrt() / (ab * 2.0 + 1.0 - ab);
        let out = den.predict(&x, t, None, false, None).unwrap();
        for (e, v) in out.eps.iter().zip(x.iter()) {
            assert!((e - coef * v).abs() < 1e-15);
        }
    }

    #[test]
    fn analytic_backend_rejects_out_of_range_timesteps() {
        let schedule = NoiseSchedule::default_sd();
        let den = AnalyticDenoiser::new(1.0, schedule);
        let x = random_latent(1, 2, 2, 2);
        assert!(den.predict(&x, 51, None, false, None).is_err());
    }

    #[test]
    fn structured_backend_is_deterministic() {
        let x = random_latent(3, 5, 5, 3);
        let a = StructuredDenoiser::new(9).predict(&x, 4, Some("rain"), true, None).unwrap();
        let b = StructuredDenoiser::new(9).predict(&x, 4, Some("rain"), true, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn condition_and_timestep_change_the_prediction() {
        let den = StructuredDenoiser::new(9);
        let x = random_latent(2, 4, 4, 4);
        let base = den.predict(&x, 4, None, false, None).unwrap().eps;
        let conditioned = den.predict(&x, 4, Some("rain"), false, None).unwrap().eps;
        let later = den.predict(&x, 5, None, false, None).unwrap().eps;
        assert_ne!(base, conditioned);
        assert_ne!(base, later);
    }

    #[test]
    fn structured_attention_is_normalized() {
        let den = StructuredDenoiser::new(9);
        let x = random_latent(2, 6, 6, 5);
        let out = den.predict(&x, 3, None, true, None).unwrap();
        let attn = out.attn.unwrap();
        assert_eq!(attn.dim(), (6, 6));
        let max = attn.iter().cloned().fold(0.0f64, f64::max);
        assert!((max - 1.0).abs() < 1e-12);
        assert!(attn.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(out.feat.is_some());
    }

    #[test]
    fn injection_modulates_the_prediction() {
        let den = StructuredDenoiser::new(9);
        assert!(den.consumes_injection());
        let x = random_latent(2, 4, 4, 6);
        let attn = Array2::from_elem((4, 4), 1.0);
        let plain = den.predict(&x, 3, None, false, None).unwrap().eps;
        let spec = InjectionSpec {
            attn_rec: &attn,
            lambda_att: 0.5,
            layers: &[0],
        };
        let modulated = den.predict(&x, 3, None, false, Some(&spec)).unwrap().eps;
        assert_ne!(plain, modulated);

        let null_spec = InjectionSpec {
            attn_rec: &attn,
            lambda_att: 0.0,
            layers: &[0],
        };
        let unchanged = den.predict(&x, 3, None, false, Some(&null_spec)).unwrap().eps;
        assert_eq!(plain, unchanged);
    }

    #[test]
    fn injection_site_selection_matters() {
        let den = StructuredDenoiser::new(9);
        let x = random_latent(2, 4, 4, 7);
        let attn = Array2::from_elem((4, 4), 1.0);
        let at0 = InjectionSpec {
            attn_rec: &attn,
            lambda_att: 0.5,
            layers: &[0],
        };
        let at1 = InjectionSpec {
            attn_rec: &attn,
            lambda_att: 0.5,
            layers: &[1],
        };
        let e0 = den.predict(&x, 3, None, false, Some(&at0)).unwrap().eps;
        let e1 = den.predict(&x, 3, None, false, Some(&at1)).unwrap().eps;
        assert_ne!(e0, e1);
    }

    #[test]
    fn client_backend_parses_wire_response() {
        let reply = r#"{"eps":[[[0.1,0.2],[0.3,0.4]]],"attn":[[0.5,0.5],[0.25,1.0]],"feat":null}"#;
        let cfg = TransportConfig::Subprocess {
            cmd: vec![
                "/bin/sh".to_string(),
                "-c".to_string(),
                format!("while read line; do echo '{reply}'; done"),
            ],
            timeout_secs: 10,
        };
        let den = ClientDenoiser::from_config(&cfg).unwrap();
        assert!(den.exclusive());
        let x = random_latent(1, 2, 2, 8);
        let out = den.predict(&x, 3, Some("storm"), true, None).unwrap();
        assert!((out.eps[(0, 0, 0)] - 0.1).abs() < 1e-12);
        assert!((out.eps[(0, 1, 1)] - 0.4).abs() < 1e-12);
        let attn = out.attn.unwrap();
        assert_eq!(attn.dim(), (2, 2));
        assert!(out.feat.is_none());
    }

    #[test]
    fn client_backend_rejects_wrong_shape() {
        let reply = r#"{"eps":[[[0.1,0.2]]]}"#;
        let cfg = TransportConfig::Subprocess {
            cmd: vec![
                "/bin/sh".to_string(),
                "-c".to_string(),
                format!("while read line; do echo '{reply}'; done"),
            ],
            timeout_secs: 10,
        };
        let den = ClientDenoiser::from_config(&cfg).unwrap();
        let x = random_latent(1, 2, 2, 9);
        assert!(matches!(
            den.predict(&x, 3, None, false, None),
            Err(DseeError::ShapeMismatch { .. })
        ));
    }
}
