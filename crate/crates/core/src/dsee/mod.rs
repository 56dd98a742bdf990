//! Deterministic latent editing.
//!
//! The editor runs entirely on DDIM algebra: a source latent is
//! inverted to noise, then two trajectories are denoised in lockstep.
//! The reconstruction path replays the unconditional prediction; the
//! editing path follows classifier-free guidance toward the emotion
//! prompt, is spatially fused with the reconstruction outside the
//! edited region at every step, and can modulate its features with the
//! reconstruction attention. The final steps run unfused so the region
//! boundary settles.

pub mod denoiser;

use std::collections::BTreeMap;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clients::ClientError;
use crate::vecmath::resample_area;

/// Latent tensor shaped (channels, height, width).
pub type Latent = Array3<f64>;

#[derive(Debug, Error)]
pub enum DseeError {
    #[error("schedule invalid: {reason}")]
    BadSchedule { reason: String },
    #[error("timestep {t} out of range for {direction:?} on a {steps}-step schedule")]
    StepOutOfRange {
        t: usize,
        direction: Direction,
        steps: usize,
    },
    #[error("shape mismatch: {what}")]
    ShapeMismatch { what: String },
    #[error("latent became non-finite at timestep {t}")]
    NonFiniteLatent { t: usize },
    #[error("mask value {value} outside [0, 1]")]
    MaskOutOfRange { value: f64 },
    #[error("mask value {value} is fractional but soft masks are disabled")]
    MaskNotBinary { value: f64 },
    #[error("configuration invalid: {reason}")]
    BadConfig { reason: String },
    #[error("injection needs reconstruction attention at timestep {t} but none was returned")]
    MissingMaps { t: usize },
    #[error(transparent)]
    Client(#[from] ClientError),
}

/// Cumulative signal levels for a diffusion process. Index 0 is the
/// clean image, index T the noisiest state.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alphas_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn from_alphas_bar(alphas_bar: Vec<f64>) -> Result<Self, DseeError> {
        if alphas_bar.len() < 2 {
            return Err(DseeError::BadSchedule {
                reason: "need at least one step".to_string(),
            });
        }
        if (alphas_bar[0] - 1.0).abs() > 1e-12 {
            return Err(DseeError::BadSchedule {
                reason: format!("first level must be 1, got {}", alphas_bar[0]),
            });
        }
        for pair in alphas_bar.windows(2) {
            if !pair[1].is_finite() || pair[1] <= 0.0 || pair[1] > 1.0 {
                return Err(DseeError::BadSchedule {
                    reason: format!("level {} outside (0, 1]", pair[1]),
                });
            }
            if pair[1] >= pair[0] {
                return Err(DseeError::BadSchedule {
                    reason: "levels must strictly decrease".to_string(),
                });
            }
        }
        Ok(NoiseSchedule { alphas_bar })
    }

    fn from_betas(betas: Vec<f64>) -> Result<Self, DseeError> {
        let mut alphas_bar = Vec::with_capacity(betas.len() + 1);
        alphas_bar.push(1.0);
        let mut acc = 1.0;
        for beta in betas {
            if !(0.0..1.0).contains(&beta) || beta == 0.0 {
                return Err(DseeError::BadSchedule {
                    reason: format!("beta {beta} outside (0, 1)"),
                });
            }
            acc *= 1.0 - beta;
            alphas_bar.push(acc);
        }
        NoiseSchedule::from_alphas_bar(alphas_bar)
    }

    /// Betas interpolated linearly between the endpoints.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self, DseeError> {
        if steps == 0 {
            return Err(DseeError::BadSchedule {
                reason: "need at least one step".to_string(),
            });
        }
        let betas = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        NoiseSchedule::from_betas(betas)
    }

    /// Betas whose square roots are linear between the square roots of
    /// the endpoints.
    pub fn scaled_linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self, DseeError> {
        if steps == 0 {
            return Err(DseeError::BadSchedule {
                reason: "need at least one step".to_string(),
            });
        }
        let (s, e) = (beta_start.sqrt(), beta_end.sqrt());
        let betas = (0..steps)
            .map(|i| {
                let b = if steps == 1 {
                    s
                } else {
                    s + (e - s) * i as f64 / (steps - 1) as f64
                };
                b * b
            })
            .collect();
        NoiseSchedule::from_betas(betas)
    }

    /// The 50-step schedule used by the reference latent editor.
    pub fn default_sd() -> Self {
        NoiseSchedule::scaled_linear(50, 0.00085, 0.012).expect("static schedule")
    }

    pub fn steps(&self) -> usize {
        self.alphas_bar.len() - 1
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alphas_bar[t]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Denoise,
    Invert,
}

/// One deterministic DDIM transition. Denoising maps timestep t to
/// t - 1 and accepts t in [1, T]; inversion maps t to t + 1 and
/// accepts t in [0, T - 1]. Both share the clean-image estimate, so a
/// denoise step undoes an inversion step evaluated with the same
/// noise prediction.
pub fn ddim_step(
    schedule: &NoiseSchedule,
    x: &Latent,
    eps: &Latent,
    t: usize,
    direction: Direction,
) -> Result<Latent, DseeError> {
    let steps = schedule.steps();
    let (src, dst) = match direction {
        Direction::Denoise => {
            if t < 1 || t > steps {
                return Err(DseeError::StepOutOfRange { t, direction, steps });
            }
            (schedule.alpha_bar(t), schedule.alpha_bar(t - 1))
        }
        Direction::Invert => {
            if t >= steps {
                return Err(DseeError::StepOutOfRange { t, direction, steps });
            }
            (schedule.alpha_bar(t), schedule.alpha_bar(t + 1))
        }
    };
    if x.dim() != eps.dim() {
        return Err(DseeError::ShapeMismatch {
            what: format!("latent {:?} vs noise {:?}", x.dim(), eps.dim()),
        });
    }
    let a_src = src.sqrt();
    let b_src = (1.0 - src).sqrt();
    let a_dst = dst.sqrt();
    let b_dst = (1.0 - dst).sqrt();
    let mut next = Latent::zeros(x.raw_dim());
    for ((n, &xv), &ev) in next.iter_mut().zip(x.iter()).zip(eps.iter()) {
        let x0_hat = (xv - b_src * ev) / a_src;
        let out = a_dst * x0_hat + b_dst * ev;
        if !out.is_finite() {
            return Err(DseeError::NonFiniteLatent { t });
        }
        *n = out;
    }
    Ok(next)
}

/// Per-step auxiliary outputs captured from a denoiser.
#[derive(Debug, Clone, PartialEq)]
pub struct StepMaps {
    pub attn: Option<Array2<f64>>,
    pub feat: Option<Latent>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathKind {
    Inversion,
    Reconstruction,
    Editing,
}

/// An ordered latent sequence plus whatever maps were recorded along
/// the way, keyed by the timestep the prediction was evaluated at.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTrajectory {
    pub states: Vec<Latent>,
    pub path_kind: PathKind,
    pub maps: BTreeMap<usize, StepMaps>,
}

/// Feature injection request: modulate features with the
/// reconstruction attention at the listed sites.
pub struct InjectionSpec<'a> {
    pub attn_rec: &'a Array2<f64>,
    pub lambda_att: f64,
    pub layers: &'a [usize],
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserOutput {
    pub eps: Latent,
    pub attn: Option<Array2<f64>>,
    pub feat: Option<Latent>,
}

impl DenoiserOutput {
    pub fn plain(eps: Latent) -> Self {
        DenoiserOutput {
            eps,
            attn: None,
            feat: None,
        }
    }
}

/// A noise predictor. Implementations that model internal features may
/// consume injections themselves; the editor applies the modulation to
/// the returned features otherwise.
pub trait Denoiser: Send + Sync {
    fn predict(
        &self,
        latent: &Latent,
        t: usize,
        condition: Option<&str>,
        want_maps: bool,
        inject: Option<&InjectionSpec>,
    ) -> Result<DenoiserOutput, DseeError>;

    /// Whether predictions must not run concurrently.
    fn exclusive(&self) -> bool {
        false
    }

    /// Whether the backend applies injections inside its forward pass.
    fn consumes_injection(&self) -> bool {
        false
    }
}

/// Invert a clean latent to the noisiest state. Each transition
/// evaluates the noise prediction at the destination timestep, which
/// keeps inversion and denoising numerically aligned.
pub fn invert(
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    x0: &Latent,
    condition: Option<&str>,
) -> Result<LatentTrajectory, DseeError> {
    let mut states = Vec::with_capacity(schedule.steps() + 1);
    states.push(x0.clone());
    let mut x = x0.clone();
    for t in 0..schedule.steps() {
        let out = denoiser.predict(&x, t + 1, condition, false, None)?;
        x = ddim_step(schedule, &x, &out.eps, t, Direction::Invert)?;
        states.push(x.clone());
    }
    Ok(LatentTrajectory {
        states,
        path_kind: PathKind::Inversion,
        maps: BTreeMap::new(),
    })
}

/// Classifier-free guided noise prediction.
pub fn guided_eps(
    denoiser: &dyn Denoiser,
    x: &Latent,
    t: usize,
    prompt: Option<&str>,
    guidance_scale: f64,
) -> Result<Latent, DseeError> {
    Ok(guided_eps_full(denoiser, x, t, prompt, guidance_scale, false, None)?.eps)
}

fn guided_eps_full(
    denoiser: &dyn Denoiser,
    x: &Latent,
    t: usize,
    prompt: Option<&str>,
    guidance_scale: f64,
    want_maps: bool,
    inject: Option<&InjectionSpec>,
) -> Result<DenoiserOutput, DseeError> {
    match prompt {
        None => denoiser.predict(x, t, None, want_maps, inject),
        Some(p) => {
            let unc = denoiser.predict(x, t, None, false, inject)?;
            let cond = denoiser.predict(x, t, Some(p), want_maps, inject)?;
            if unc.eps.dim() != cond.eps.dim() {
                return Err(DseeError::ShapeMismatch {
                    what: "conditional and unconditional predictions".to_string(),
                });
            }
            let mut eps = Latent::zeros(unc.eps.raw_dim());
            for ((e, &u), &c) in eps.iter_mut().zip(unc.eps.iter()).zip(cond.eps.iter()) {
                *e = u + guidance_scale * (c - u);
            }
            Ok(DenoiserOutput {
                eps,
                attn: cond.attn,
                feat: cond.feat,
            })
        }
    }
}

/// Plain guided sampling from a noisy latent down to the clean state.
pub fn sample_guided(
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    x_noisy: &Latent,
    prompt: Option<&str>,
    guidance_scale: f64,
) -> Result<LatentTrajectory, DseeError> {
    let mut states = Vec::with_capacity(schedule.steps() + 1);
    states.push(x_noisy.clone());
    let mut x = x_noisy.clone();
    for t in (1..=schedule.steps()).rev() {
        let eps = guided_eps(denoiser, &x, t, prompt, guidance_scale)?;
        x = ddim_step(schedule, &x, &eps, t, Direction::Denoise)?;
        states.push(x.clone());
    }
    Ok(LatentTrajectory {
        states,
        path_kind: PathKind::Editing,
        maps: BTreeMap::new(),
    })
}

/// Blend the editing and reconstruction latents through a spatial
/// mask. Fully masked and fully unmasked positions copy their source
/// exactly, so untouched background is preserved bit for bit.
pub fn fuse(edit: &Latent, rec: &Latent, mask: &Array2<f64>) -> Result<Latent, DseeError> {
    if edit.dim() != rec.dim() {
        return Err(DseeError::ShapeMismatch {
            what: format!("editing {:?} vs reconstruction {:?}", edit.dim(), rec.dim()),
        });
    }
    let (c, h, w) = edit.dim();
    if mask.dim() != (h, w) {
        return Err(DseeError::ShapeMismatch {
            what: format!("mask {:?} vs latent {:?}", mask.dim(), (h, w)),
        });
    }
    let mut out = Latent::zeros(edit.raw_dim());
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                let m = mask[(i, j)];
                out[(ch, i, j)] = if m == 0.0 {
                    rec[(ch, i, j)]
                } else if m == 1.0 {
                    edit[(ch, i, j)]
                } else {
                    m * edit[(ch, i, j)] + (1.0 - m) * rec[(ch, i, j)]
                };
            }
        }
    }
    Ok(out)
}

/// Amplify features where the reconstruction attends. The attention is
/// area-resampled onto the feature grid when sizes differ; a zero
/// weight returns the features untouched.
pub fn inject_attention(feat: &Latent, attn_rec: &Array2<f64>, lambda_att: f64) -> Latent {
    if lambda_att == 0.0 {
        return feat.clone();
    }
    let (c, h, w) = feat.dim();
    let attn = if attn_rec.dim() == (h, w) {
        attn_rec.clone()
    } else {
        resample_area(attn_rec, h, w)
    };
    let mut out = Latent::zeros(feat.raw_dim());
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                let f = feat[(ch, i, j)];
                out[(ch, i, j)] = f + lambda_att * attn[(i, j)] * f;
            }
        }
    }
    out
}

/// Area-resample a mask onto the latent grid, rebinarizing at one half
/// unless soft masks are requested.
pub fn resample_mask(mask: &Array2<f64>, h: usize, w: usize, soft: bool) -> Array2<f64> {
    let out = resample_area(mask, h, w);
    if soft {
        out
    } else {
        out.mapv(|v| if v >= 0.5 { 1.0 } else { 0.0 })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditConfig {
    pub guidance_scale: f64,
    pub lambda_att: f64,
    pub harmonize_steps: usize,
    pub injection_layers: Vec<usize>,
    pub soft_mask: bool,
    pub record_maps: bool,
}

impl Default for EditConfig {
    fn default() -> Self {
        EditConfig {
            guidance_scale: 7.5,
            lambda_att: 0.5,
            harmonize_steps: 5,
            injection_layers: vec![0],
            soft_mask: false,
            record_maps: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditOutcome {
    pub final_latent: Latent,
    pub inversion: LatentTrajectory,
    pub reconstruction: LatentTrajectory,
    pub editing: LatentTrajectory,
}

fn validate_mask(mask: &Array2<f64>, soft: bool) -> Result<(), DseeError> {
    for &m in mask.iter() {
        if !m.is_finite() || !(0.0..=1.0).contains(&m) {
            return Err(DseeError::MaskOutOfRange { value: m });
        }
        if !soft && m != 0.0 && m != 1.0 {
            return Err(DseeError::MaskNotBinary { value: m });
        }
    }
    Ok(())
}

/// Region-aware emotion edit of a clean latent.
///
/// The latent is inverted unconditionally, then reconstruction and
/// editing trajectories are denoised in lockstep. While more than
/// `harmonize_steps` transitions remain, the editing latent is fused
/// with the reconstruction through the mask after every step and the
/// reconstruction attention modulates the editing features; the final
/// transitions run pure guidance so the composite settles.
pub fn edit(
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    x0: &Latent,
    prompt: Option<&str>,
    mask: &Array2<f64>,
    cfg: &EditConfig,
) -> Result<EditOutcome, DseeError> {
    if !cfg.guidance_scale.is_finite() {
        return Err(DseeError::BadConfig {
            reason: format!("guidance scale {}", cfg.guidance_scale),
        });
    }
    if !cfg.lambda_att.is_finite() || cfg.lambda_att < 0.0 {
        return Err(DseeError::BadConfig {
            reason: format!("injection weight {}", cfg.lambda_att),
        });
    }
    if cfg.harmonize_steps > schedule.steps() {
        return Err(DseeError::BadConfig {
            reason: format!(
                "harmonize steps {} exceed schedule steps {}",
                cfg.harmonize_steps,
                schedule.steps()
            ),
        });
    }
    validate_mask(mask, cfg.soft_mask)?;
    let (_, h, w) = x0.dim();
    let mask = if mask.dim() == (h, w) {
        mask.clone()
    } else {
        resample_mask(mask, h, w, cfg.soft_mask)
    };

    let inversion = invert(denoiser, schedule, x0, None)?;
    let x_noisy = inversion.states.last().expect("inversion has states").clone();

    let inject_active = cfg.lambda_att != 0.0 && !cfg.injection_layers.is_empty();
    let mut x_rec = x_noisy.clone();
    let mut x_edit = x_noisy.clone();
    let mut rec_states = vec![x_noisy.clone()];
    let mut edit_states = vec![x_noisy];
    let mut rec_maps = BTreeMap::new();
    let mut edit_maps = BTreeMap::new();

    for t in (1..=schedule.steps()).rev() {
        let harmonizing = t <= cfg.harmonize_steps;
        let want_rec_maps = cfg.record_maps || (inject_active && !harmonizing);
        let rec_out = denoiser.predict(&x_rec, t, None, want_rec_maps, None)?;
        let attn_rec = rec_out.attn.clone();
        x_rec = ddim_step(schedule, &x_rec, &rec_out.eps, t, Direction::Denoise)?;
        rec_states.push(x_rec.clone());
        if cfg.record_maps {
            rec_maps.insert(
                t,
                StepMaps {
                    attn: rec_out.attn,
                    feat: rec_out.feat,
                },
            );
        }

        let spec_storage;
        let inject = if inject_active && !harmonizing {
            let attn = attn_rec.as_ref().ok_or(DseeError::MissingMaps { t })?;
            spec_storage = InjectionSpec {
                attn_rec: attn,
                lambda_att: cfg.lambda_att,
                layers: &cfg.injection_layers,
            };
            Some(&spec_storage)
        } else {
            None
        };
        let edit_out = guided_eps_full(
            denoiser,
            &x_edit,
            t,
            prompt,
            cfg.guidance_scale,
            cfg.record_maps,
            inject,
        )?;
        let mut feat = edit_out.feat;
        if let Some(spec) = inject {
            if !denoiser.consumes_injection() {
                if let Some(f) = feat.as_ref() {
                    feat = Some(inject_attention(f, spec.attn_rec, spec.lambda_att));
                }
            }
        }
        x_edit = ddim_step(schedule, &x_edit, &edit_out.eps, t, Direction::Denoise)?;
        if !harmonizing {
            x_edit = fuse(&x_edit, &x_rec, &mask)?;
        }
        edit_states.push(x_edit.clone());
        if cfg.record_maps {
            edit_maps.insert(
                t,
                StepMaps {
                    attn: edit_out.attn,
                    feat,
                },
            );
        }
    }

    Ok(EditOutcome {
        final_latent: x_edit,
        inversion,
        reconstruction: LatentTrajectory {
            states: rec_states,
            path_kind: PathKind::Reconstruction,
            maps: rec_maps,
        },
        editing: LatentTrajectory {
            states: edit_states,
            path_kind: PathKind::Editing,
            maps: edit_maps,
        },
    })
}

/// Standard normal latent from a fixed seed.
pub fn random_latent(channels: usize, h: usize, w: usize, seed: u64) -> Latent {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Latent::from_shape_fn((channels, h, w), |_| {
        let u1: f64 = rng.random::<f64>().max(1e-12);
        let u2: f64 = rng.random();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    })
}

#[cfg(test)]
mod tests {
    use super::denoiser::{AnalyticDenoiser, StructuredDenoiser, ZeroDenoiser};
    use super::*;

    #[test]
    fn default_schedule_shape_and_monotonicity() {
        let s = NoiseSchedule::default_sd();
        assert_eq!(s.steps(), 50);
        assert_eq!(s.alpha_bar(0), 1.0);
        for t in 1..=50 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            assert!(s.alpha_bar(t) > 0.0);
        }
    }

    #[test]
    fn scaled_linear_matches_hand_computation() {
        let s = NoiseSchedule::scaled_linear(3, 0.01, 0.04).unwrap();
        // Square roots 0.1, 0.15, 0.2 give betas 0.01, 0.0225, 0.04.
        let b = [0.01, 0.0225, 0.04];
        let mut acc = 1.0;
        for (t, beta) in b.iter().enumerate() {
            acc *= 1.0 - beta;
            assert!((s.alpha_bar(t + 1) - acc).abs() < 1e-15);
        }
    }

    #[test]
    fn bad_schedules_are_rejected() {
        assert!(NoiseSchedule::from_alphas_bar(vec![1.0]).is_err());
        assert!(NoiseSchedule::from_alphas_bar(vec![0.9, 0.5]).is_err());
        assert!(NoiseSchedule::from_alphas_bar(vec![1.0, 0.5, 0.6]).is_err());
        assert!(NoiseSchedule::from_alphas_bar(vec![1.0, 0.5, 0.0]).is_err());
        assert!(NoiseSchedule::linear(0, 0.1, 0.2).is_err());
    }

    #[test]
    fn step_ranges_are_enforced() {
        let s = NoiseSchedule::default_sd();
        let x = random_latent(1, 2, 2, 0);
        let e = Latent::zeros((1, 2, 2));
        assert!(matches!(
            ddim_step(&s, &x, &e, 0, Direction::Denoise),
            Err(DseeError::StepOutOfRange { .. })
        ));
        assert!(ddim_step(&s, &x, &e, 1, Direction::Denoise).is_ok());
        assert!(ddim_step(&s, &x, &e, 50, Direction::Denoise).is_ok());
        assert!(matches!(
            ddim_step(&s, &x, &e, 51, Direction::Denoise),
            Err(DseeError::StepOutOfRange { .. })
        ));
        assert!(ddim_step(&s, &x, &e, 0, Direction::Invert).is_ok());
        assert!(ddim_step(&s, &x, &e, 49, Direction::Invert).is_ok());
        assert!(matches!(
            ddim_step(&s, &x, &e, 50, Direction::Invert),
            Err(DseeError::StepOutOfRange { .. })
        ));
    }

    #[test]
    fn single_step_is_algebraically_invertible() {
        let s = NoiseSchedule::default_sd();
        let x = random_latent(2, 3, 3, 1);
        let eps = random_latent(2, 3, 3, 2);
        for t in [0, 10, 49] {
            let up = ddim_step(&s, &x, &eps, t, Direction::Invert).unwrap();
            let back = ddim_step(&s, &up, &eps, t + 1, Direction::Denoise).unwrap();
            for (a, b) in x.iter().zip(back.iter()) {
                assert!((a - b).abs() < 1e-10, "t={t}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn zero_noise_inversion_scales_by_final_signal_level() {
        let s = NoiseSchedule::default_sd();
        let x0 = random_latent(2, 4, 4, 3);
        let traj = invert(&ZeroDenoiser, &s, &x0, None).unwrap();
        assert_eq!(traj.states.len(), 51);
        let scale = s.alpha_bar(50).sqrt();
        for (a, b) in traj.states[50].iter().zip(x0.iter()) {
            assert!((a - scale * b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_noise_round_trip_recovers_the_latent() {
        let s = NoiseSchedule::default_sd();
        let x0 = random_latent(4, 8, 8, 4);
        let up = invert(&ZeroDenoiser, &s, &x0, None).unwrap();
        let down = sample_guided(&ZeroDenoiser, &s, up.states.last().unwrap(), None, 7.5).unwrap();
        for (a, b) in down.states.last().unwrap().iter().zip(x0.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn analytic_round_trip_stays_tight() {
        let s = NoiseSchedule::default_sd();
        let den = AnalyticDenoiser::new(1.0, s.clone());
        let x0 = random_latent(4, 8, 8, 5);
        let up = invert(&den, &s, &x0, None).unwrap();
        let down = sample_guided(&den, &s, up.states.last().unwrap(), None, 7.5).unwrap();
        let num: f64 = down
            .states
            .last()
            .unwrap()
            .iter()
            .zip(x0.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let den_norm: f64 = x0.iter().map(|v| v * v).sum();
        let rel = (num / den_norm).sqrt();
        assert!(rel < 1e-3, "relative error {rel}");
    }

    #[test]
    fn guidance_interpolates_predictions() {
        let den = StructuredDenoiser::new(7);
        let x = random_latent(2, 6, 6, 8);
        let unc = den.predict(&x, 10, None, false, None).unwrap().eps;
        let cond = den.predict(&x, 10, Some("dusk"), false, None).unwrap().eps;
        let g0 = guided_eps(&den, &x, 10, Some("dusk"), 0.0).unwrap();
        let g1 = guided_eps(&den, &x, 10, Some("dusk"), 1.0).unwrap();
        for (a, b) in g0.iter().zip(unc.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in g1.iter().zip(cond.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        let g2 = guided_eps(&den, &x, 10, Some("dusk"), 2.0).unwrap();
        for ((g, &u), &c) in g2.iter().zip(unc.iter()).zip(cond.iter()) {
            assert!((g - (u + 2.0 * (c - u))).abs() < 1e-12);
        }
    }

    #[test]
    fn fuse_copies_exact_values_at_binary_positions() {
        let edit_lat = random_latent(2, 4, 4, 9);
        let rec_lat = random_latent(2, 4, 4, 10);
        let mask = Array2::from_shape_fn((4, 4), |(i, j)| if (i + j) % 2 == 0 { 1.0 } else { 0.0 });
        let fused = fuse(&edit_lat, &rec_lat, &mask).unwrap();
        for ch in 0..2 {
            for i in 0..4 {
                for j in 0..4 {
                    let want = if mask[(i, j)] == 1.0 {
                        edit_lat[(ch, i, j)]
                    } else {
                        rec_lat[(ch, i, j)]
                    };
                    assert_eq!(fused[(ch, i, j)].to_bits(), want.to_bits());
                }
            }
        }
    }

    #[test]
    fn fuse_blends_soft_values() {
        let edit_lat = Latent::from_elem((1, 1, 1), 2.0);
        let rec_lat = Latent::from_elem((1, 1, 1), 0.0);
        let mask = Array2::from_elem((1, 1), 0.25);
        let fused = fuse(&edit_lat, &rec_lat, &mask).unwrap();
        assert!((fused[(0, 0, 0)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn inject_with_zero_weight_is_identity() {
        let feat = random_latent(3, 5, 5, 11);
        let attn = Array2::from_elem((5, 5), 0.7);
        let out = inject_attention(&feat, &attn, 0.0);
        assert_eq!(out, feat);
    }

    #[test]
    fn inject_with_unit_attention_doubles_features() {
        let feat = random_latent(3, 8, 8, 12);
        let attn = Array2::from_elem((4, 4), 1.0);
        let out = inject_attention(&feat, &attn, 1.0);
        for (o, f) in out.iter().zip(feat.iter()) {
            assert_eq!(o.to_bits(), (2.0 * f).to_bits());
        }
    }

    #[test]
    fn resample_mask_rebinarizes_unless_soft() {
        let mask = Array2::from_shape_fn((4, 4), |(_, j)| if j < 2 { 1.0 } else { 0.0 });
        let hard = resample_mask(&mask, 2, 2, false);
        assert!(hard.iter().all(|&v| v == 0.0 || v == 1.0));
        let soft = resample_mask(&mask, 1, 1, true);
        assert!((soft[(0, 0)] - 0.5).abs() < 1e-12);
    }

    fn small_schedule() -> NoiseSchedule {
        NoiseSchedule::scaled_linear(8, 0.00085, 0.012).unwrap()
    }

    #[test]
    fn edit_preserves_background_at_every_step() {
        let s = small_schedule();
        let den = StructuredDenoiser::new(21);
        let x0 = random_latent(2, 6, 6, 13);
        let mask = Array2::from_shape_fn((6, 6), |(i, _)| if i < 3 { 1.0 } else { 0.0 });
        let cfg = EditConfig {
            harmonize_steps: 0,
            record_maps: false,
            ..EditConfig::default()
        };
        let out = edit(&den, &s, &x0, Some("storm"), &mask, &cfg).unwrap();
        assert_eq!(out.editing.states.len(), out.reconstruction.states.len());
        for (step, (e, r)) in out
            .editing
            .states
            .iter()
            .zip(out.reconstruction.states.iter())
            .enumerate()
        {
            for ch in 0..2 {
                for i in 3..6 {
                    for j in 0..6 {
                        assert!(
                            (e[(ch, i, j)] - r[(ch, i, j)]).abs() < 1e-7,
                            "step {step} ch {ch} ({i},{j})"
                        );
                    }
                }
            }
        }
        // The masked half must actually change.
        let diff: f64 = (0..3)
            .flat_map(|i| (0..6).map(move |j| (i, j)))
            .map(|(i, j)| (out.final_latent[(0, i, j)] - out.reconstruction.states.last().unwrap()[(0, i, j)]).abs())
            .sum();
        assert!(diff > 1e-6);
    }

    #[test]
    fn zero_mask_reproduces_reconstruction_exactly() {
        let s = small_schedule();
        let den = StructuredDenoiser::new(3);
        let x0 = random_latent(2, 4, 4, 14);
        let mask = Array2::from_elem((4, 4), 0.0);
        let cfg = EditConfig {
            harmonize_steps: 0,
            ..EditConfig::default()
        };
        let out = edit(&den, &s, &x0, Some("storm"), &mask, &cfg).unwrap();
        assert_eq!(out.final_latent, *out.reconstruction.states.last().unwrap());
    }

    #[test]
    fn record_maps_captures_attention_per_step() {
        let s = small_schedule();
        let den = StructuredDenoiser::new(5);
        let x0 = random_latent(2, 4, 4, 15);
        let mask = Array2::from_elem((4, 4), 1.0);
        let cfg = EditConfig {
            harmonize_steps: 2,
            record_maps: true,
            ..EditConfig::default()
        };
        let out = edit(&den, &s, &x0, Some("storm"), &mask, &cfg).unwrap();
        assert_eq!(out.reconstruction.maps.len(), s.steps());
        assert_eq!(out.editing.maps.len(), s.steps());
        for maps in out.reconstruction.maps.values() {
            assert!(maps.attn.is_some());
            assert!(maps.feat.is_some());
        }
    }

    #[test]
    fn fractional_mask_requires_soft_mode() {
        let s = small_schedule();
        let x0 = random_latent(1, 4, 4, 16);
        let mask = Array2::from_elem((4, 4), 0.5);
        let cfg = EditConfig::default();
        assert!(matches!(
            edit(&ZeroDenoiser, &s, &x0, None, &mask, &cfg),
            Err(DseeError::MaskNotBinary { .. })
        ));
        let soft_cfg = EditConfig {
            soft_mask: true,
            lambda_att: 0.0,
            ..EditConfig::default()
        };
        assert!(edit(&ZeroDenoiser, &s, &x0, None, &mask, &soft_cfg).is_ok());
    }

    #[test]
    fn out_of_range_mask_is_rejected() {
        let s = small_schedule();
        let x0 = random_latent(1, 4, 4, 17);
        let mask = Array2::from_elem((4, 4), 1.5);
        assert!(matches!(
            edit(&ZeroDenoiser, &s, &x0, None, &mask, &EditConfig::default()),
            Err(DseeError::MaskOutOfRange { .. })
        ));
    }

    #[test]
    fn mask_is_resampled_to_latent_resolution() {
        let s = small_schedule();
        let den = StructuredDenoiser::new(6);
        let x0 = random_latent(2, 4, 4, 18);
        let mask = Array2::from_shape_fn((16, 16), |(i, _)| if i < 8 { 1.0 } else { 0.0 });
        let cfg = EditConfig {
            harmonize_steps: 0,
            ..EditConfig::default()
        };
        let out = edit(&den, &s, &x0, Some("storm"), &mask, &cfg).unwrap();
        let rec = out.reconstruction.states.last().unwrap();
        for ch in 0..2 {
            for i in 2..4 {
                for j in 0..4 {
                    assert_eq!(out.final_latent[(ch, i, j)].to_bits(), rec[(ch, i, j)].to_bits());
                }
            }
        }
    }

    struct NanDenoiser;

    impl Denoiser for NanDenoiser {
        fn predict(
            &self,
            latent: &Latent,
            _t: usize,
            _condition: Option<&str>,
            _want_maps: bool,
            _inject: Option<&InjectionSpec>,
        ) -> Result<DenoiserOutput, DseeError> {
            Ok(DenoiserOutput::plain(Latent::from_elem(latent.raw_dim(), f64::NAN)))
        }
    }

    #[test]
    fn non_finite_predictions_surface_as_errors() {
        let s = small_schedule();
        let x0 = random_latent(1, 2, 2, 19);
        assert!(matches!(
            invert(&NanDenoiser, &s, &x0, None),
            Err(DseeError::NonFiniteLatent { .. })
        ));
    }

    #[test]
    fn harmonize_steps_cannot_exceed_schedule() {
        let s = small_schedule();
        let x0 = random_latent(1, 2, 2, 20);
        let mask = Array2::from_elem((2, 2), 1.0);
        let cfg = EditConfig {
            harmonize_steps: 9,
            ..EditConfig::default()
        };
        assert!(matches!(
            edit(&ZeroDenoiser, &s, &x0, None, &mask, &cfg),
            Err(DseeError::BadConfig { .. })
        ));
    }
}
