//! Noise schedules, the forward noising process, clean-latent
//! prediction, and the deterministic DDIM step.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Cosine,
    Linear,
}

/// How the clean latent is predicted from the noisy latent and the
/// noise estimate.
///
/// `DdimStandard` inverts the forward process exactly. `LiteralAlt` is
/// the alternative transcription with a bare alpha-bar in the first
/// denominator; it is kept behind this switch for comparison runs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum X0Mode {
    #[default]
    DdimStandard,
    PaperEq2,
}

/// Per-timestep cumulative alpha coefficients, strictly decreasing in
/// (0, 1), with index 0 reserved as the implicit terminal value 1.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    /// alpha_bar[t-1] holds the coefficient for timestep t in 1..=T.
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.alpha_bar.len()
    }

    /// Cumulative alpha at timestep t, with t = 0 giving 1.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Ok(1.0);
        }
        self.alpha_bar
            .get(t - 1)
            .copied()
            .ok_or_else(|| Error::contract(format!("timestep {t} out of 1..={}", self.steps())))
    }

    /// The raw coefficient sequence, for JSON dumps and cross-checks.
    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.alpha_bar).expect("schedule serializes")
    }
}

/// Builds a schedule of `t_steps` coefficients.
///
/// Cosine: squared cosine ramp with a 0.0025 half-pi offset, normalized
/// so the t=0 endpoint is exactly 1. Linear: betas linearly spaced in
/// [1e-4, 0.2] with alpha_bar as the running product of (1 - beta).
pub fn make_schedule(kind: ScheduleKind, t_steps: usize) -> Result<NoiseSchedule> {
    if t_steps == 0 {
        return Err(Error::contract("schedule needs at least one step"));
    }
    let alpha_bar: Vec<f64> = match kind {
        ScheduleKind::Cosine => {
            let f = |t: f64| {
                let angle = (t / t_steps as f64) * std::f64::consts::FRAC_PI_2 * 0.995
                    + 0.0025 * std::f64::consts::FRAC_PI_2;
                angle.cos().powi(2)
            };
            let f0 = f(0.0);
            (1..=t_steps).map(|t| f(t as f64) / f0).collect()
        }
        ScheduleKind::Linear => {
            let (beta_lo, beta_hi) = (1e-4, 0.2);
            let mut acc = 1.0;
            (0..t_steps)
                .map(|i| {
                    let frac = if t_steps == 1 {
                        0.0
                    } else {
                        i as f64 / (t_steps - 1) as f64
                    };
                    let beta = beta_lo + (beta_hi - beta_lo) * frac;
                    acc *= 1.0 - beta;
                    acc
                })
                .collect()
        }
    };
    debug_assert!(alpha_bar.windows(2).all(|w| w[0] > w[1]));
    Ok(NoiseSchedule { kind, alpha_bar })
}

/// A latent mid-trajectory, tagged with its timestep and origin seed.
#[derive(Clone, Debug)]
pub struct LatentState {
    pub x_t: Tensor,
    pub t: usize,
    pub seed: u64,
}

/// Forward noising: sqrt(ab_t) * x0 + sqrt(1 - ab_t) * eps.
pub fn add_noise(
    tape: &Tape,
    x0: &Tensor,
    eps: &Tensor,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    if x0.shape() != eps.shape() {
        return Err(Error::shape(format!(
            "add_noise: {:?} vs {:?}",
            x0.shape(),
            eps.shape()
        )));
    }
    if t == 0 {
        return Err(Error::contract("add_noise: t must be >= 1"));
    }
    let ab = sched.alpha_bar(t)?;
    let a = tape.scale(x0, ab.sqrt())?;
    let b = tape.scale(eps, (1.0 - ab).sqrt())?;
    tape.add(&a, &b)
}

/// Clean-latent prediction from the current latent and the noise
/// estimate. Participates in the tape so training losses can flow
/// through it.
pub fn predict_x0(
    tape: &Tape,
    x_t: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    sched: &NoiseSchedule,
    mode: X0Mode,
) -> Result<Tensor> {
    if x_t.shape() != eps_hat.shape() {
        return Err(Error::shape(format!(
            "predict_x0: {:?} vs {:?}",
            x_t.shape(),
            eps_hat.shape()
        )));
    }
    if t == 0 {
        return Err(Error::contract("predict_x0: t must be >= 1"));
    }
    let ab = sched.alpha_bar(t)?;
    match mode {
        X0Mode::DdimStandard => {
            // (x_t - sqrt(1 - ab) * eps_hat) / sqrt(ab)
            let noise = tape.scale(eps_hat, (1.0 - ab).sqrt())?;
            let num = tape.sub(x_t, &noise)?;
            tape.scale(&num, 1.0 / ab.sqrt())
        }
        X0Mode::PaperEq2 => {
            // x_t / ab + ((1 - sqrt(ab)) / sqrt(ab)) * eps_hat
            let first = tape.scale(x_t, 1.0 / ab)?;
            let coef = (1.0 - ab.sqrt()) / ab.sqrt();
            let second = tape.scale(eps_hat, coef)?;
            tape.add(&first, &second)
        }
    }
}

/// Deterministic DDIM transition to timestep t-1 (eta = 0), with
/// alpha_bar(0) = 1 so the final step returns the clean estimate.
pub fn ddim_step(
    tape: &Tape,
    x0_hat: &Tensor,
    x_t: &Tensor,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    if x0_hat.shape() != x_t.shape() {
        return Err(Error::shape(format!(
            "ddim_step: {:?} vs {:?}",
            x0_hat.shape(),
            x_t.shape()
        )));
    }
    if t == 0 || t > sched.steps() {
        return Err(Error::contract(format!(
            "ddim_step: t {t} out of 1..={}",
            sched.steps()
        )));
    }
    let ab_t = sched.alpha_bar(t)?;
    let ab_prev = sched.alpha_bar(t - 1)?;
    // eps_hat implied by (x0_hat, x_t), then re-noise to t-1.
    let scaled_x0 = tape.scale(x0_hat, ab_t.sqrt())?;
    let num = tape.sub(x_t, &scaled_x0)?;
    let eps_hat = tape.scale(&num, 1.0 / (1.0 - ab_t).sqrt())?;
    let a = tape.scale(x0_hat, ab_prev.sqrt())?;
    let b = tape.scale(&eps_hat, (1.0 - ab_prev).sqrt())?;
    tape.add(&a, &b)
}
