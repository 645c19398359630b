use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAX_BETA: f64 = 0.999;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conditioning {
    None,
    MaskConcat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiffusionConfig {
    pub schedule: ScheduleKind,
    pub timesteps: usize,
    pub cosine_offset: f64,
    pub beta_start: f64,
    pub beta_end: f64,
    pub conditioning: Conditioning,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            schedule: ScheduleKind::Cosine,
            timesteps: 1000,
            cosine_offset: 0.008,
            beta_start: 1e-4,
            beta_end: 0.02,
            conditioning: Conditioning::None,
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.timesteps < 2 {
            return Err(Error::InvalidConfig(format!(
                "timesteps must be >= 2, got {}",
                self.timesteps
            )));
        }
        if !(self.cosine_offset > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "cosine offset must be positive, got {}",
                self.cosine_offset
            )));
        }
        if self.schedule == ScheduleKind::Linear
            && !(self.beta_start > 0.0 && self.beta_start <= self.beta_end && self.beta_end <= MAX_BETA)
        {
            return Err(Error::InvalidConfig(format!(
                "linear betas must satisfy 0 < start <= end <= {MAX_BETA}, got {}..{}",
                self.beta_start, self.beta_end
            )));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form; stored in checkpoints.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        crate::data::hex_digest(&Sha256::digest(json))
    }
}

/// Per-timestep coefficients, indexed by `t` in `0..=T`.
///
/// Index 0 holds the `alpha_bar = 1` convention (`beta = 0`), so every
/// `t - 1` lookup for `t >= 1` is valid.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    posterior_vars: Vec<f64>,
}

/// `f(t) = cos^2(((t/T + s) / (1 + s)) * pi/2)`.
pub fn cosine_f(t: f64, total: f64, s: f64) -> f64 {
    let c = ((t / total + s) / (1.0 + s) * FRAC_PI_2).cos();
    c * c
}

pub fn make_schedule(cfg: &DiffusionConfig) -> Result<NoiseSchedule> {
    cfg.validate()?;
    let t_max = cfg.timesteps;
    let mut betas = vec![0.0; t_max + 1];
    match cfg.schedule {
        ScheduleKind::Linear => {
            for (t, b) in betas.iter_mut().enumerate().skip(1) {
                let frac = (t - 1) as f64 / (t_max - 1) as f64;
                *b = cfg.beta_start + frac * (cfg.beta_end - cfg.beta_start);
            }
        }
        ScheduleKind::Cosine => {
            let f0 = cosine_f(0.0, t_max as f64, cfg.cosine_offset);
            let ab = |t: usize| cosine_f(t as f64, t_max as f64, cfg.cosine_offset) / f0;
            for (t, b) in betas.iter_mut().enumerate().skip(1) {
                *b = (1.0 - ab(t) / ab(t - 1)).min(MAX_BETA);
            }
        }
    }
    Ok(NoiseSchedule::from_betas(betas))
}

impl NoiseSchedule {
    /// `betas[0]` must be 0; `alpha_bar` is the running product of `1 - beta`.
    fn from_betas(betas: Vec<f64>) -> Self {
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for &a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        let mut posterior_vars = vec![0.0; betas.len()];
        for t in 1..betas.len() {
            posterior_vars[t] = betas[t] * (1.0 - alpha_bars[t - 1]) / (1.0 - alpha_bars[t]);
        }
        Self {
            betas,
            alphas,
            alpha_bars,
            posterior_vars,
        }
    }

    /// Number of diffusion steps `T`.
    pub fn timesteps(&self) -> usize {
        self.betas.len() - 1
    }
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }
    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t]
    }
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }
    pub fn posterior_var(&self, t: usize) -> f64 {
        self.posterior_vars[t]
    }

    /// Coefficients `(c_x0, c_xt)` of the posterior mean at step `t >= 1`.
    pub fn posterior_coefficients(&self, t: usize) -> (f64, f64) {
        let ab = self.alpha_bars[t];
        let ab_prev = self.alpha_bars[t - 1];
        (
            ab_prev.sqrt() * self.betas[t] / (1.0 - ab),
            self.alphas[t].sqrt() * (1.0 - ab_prev) / (1.0 - ab),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(kind: ScheduleKind, t: usize) -> DiffusionConfig {
        DiffusionConfig {
            schedule: kind,
            timesteps: t,
            ..Default::default()
        }
    }

    #[test]
    fn cosine_alpha_bar_matches_closed_form() {
        let t = 1000;
        let s = make_schedule(&cfg(ScheduleKind::Cosine, t)).unwrap();
        assert_eq!(s.alpha_bar(0), 1.0);
        // Direct evaluation of f(t)/f(0) wherever the clip is inactive.
        let f0 = cosine_f(0.0, t as f64, 0.008);
        for step in [1, 10, 250, 500, 900, 990] {
            let closed = cosine_f(step as f64, t as f64, 0.008) / f0;
            assert!((s.alpha_bar(step) - closed).abs() < 1e-12 * closed.max(1e-300) + 1e-15, "t={step}");
        }
        assert!(s.alpha_bar(t) < 0.01);
        for step in 1..=t {
            assert!(s.alpha_bar(step) < s.alpha_bar(step - 1));
            assert!(s.beta(step) > 0.0 && s.beta(step) <= MAX_BETA);
            assert!(s.posterior_var(step) >= 0.0);
        }
        assert_eq!(s.beta(t), MAX_BETA);
    }

    #[test]
    fn linear_endpoints() {
        let s = make_schedule(&cfg(ScheduleKind::Linear, 1000)).unwrap();
        assert_eq!(s.beta(1), 1e-4);
        assert!((s.beta(1000) - 0.02).abs() < 1e-15);
        assert_eq!(s.timesteps(), 1000);
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(make_schedule(&cfg(ScheduleKind::Cosine, 1)).is_err());
        let bad = DiffusionConfig {
            cosine_offset: 0.0,
            ..Default::default()
        };
        assert!(matches!(make_schedule(&bad), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn posterior_at_first_step_keeps_x0_only() {
        for kind in [ScheduleKind::Cosine, ScheduleKind::Linear] {
            let s = make_schedule(&cfg(kind, 50)).unwrap();
            let (a, b) = s.posterior_coefficients(1);
            assert!((a - 1.0).abs() < 1e-12);
            assert_eq!(b, 0.0);
            assert_eq!(s.posterior_var(1), 0.0);
        }
    }

    #[test]
    fn fingerprint_tracks_config() {
        let a = DiffusionConfig::default();
        let mut b = a.clone();
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.timesteps = 10;
        assert_ne!(a.fingerprint(), b.fingerprint());
    }
}
