//! Coarse-to-fine decoding: stage initialization, guided velocities, Euler
//! integration and stage transitions; plus the single-scale baseline.

use std::time::Instant;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::backbone::{time_tensor, LatentCode, VelocityModel};
use crate::error::invalid;
use crate::noise::NoiseSource;
use crate::resample::{upsample, UpsampleMode};
use crate::schedules::{ScaleSchedule, NoiseInterpolant};
use crate::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub cfg_scale: f64,
    /// Signal coefficient of the stage transition. `None` uses the interpolant's
    /// signal coefficient at the stage start time.
    pub alpha: Option<f64>,
    /// Noise coefficient of the stage transition. `None` uses the interpolant's
    /// noise coefficient at the stage start time.
    pub beta: Option<f64>,
    pub seed: u64,
    pub upsample: UpsampleMode,
    /// Keep every intermediate state in the trajectory.
    pub record_steps: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            cfg_scale: 2.0,
            alpha: None,
            beta: None,
            seed: 0,
            upsample: UpsampleMode::Bilinear,
            record_steps: false,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.cfg_scale >= 0.0) {
            return Err(invalid!("cfg_scale must be >= 0, got {}", self.cfg_scale));
        }
        let a = self.alpha.unwrap_or(1.0);
        let b = self.beta.unwrap_or(1.0);
        if a < 0.0 || b < 0.0 || (a == 0.0 && b == 0.0) {
            return Err(invalid!("stage-init coefficients must be >= 0 and not both zero"));
        }
        Ok(())
    }

    /// Network evaluations per integration step.
    pub fn evals_per_step(&self) -> usize {
        evals_per_step(self.cfg_scale)
    }

    /// `(alpha, beta)` for entering stage `s > 1`.
    pub fn stage_coefficients(&self, schedule: &ScaleSchedule, s: usize) -> Result<(f64, f64)> {
        let (t0, _) = schedule.bounds(s)?;
        let (a, b) = NoiseInterpolant::Linear.coefficients(t0)?;
        Ok((self.alpha.unwrap_or(a), self.beta.unwrap_or(b)))
    }
}

pub fn evals_per_step(cfg_scale: f64) -> usize {
    if cfg_scale == 1.0 {
        1
    } else {
        2
    }
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    /// Final state of every stage, coarsest first.
    pub stage_outputs: Vec<Tensor>,
    /// Every integration state per stage (including the initial one) when recording is enabled.
    pub steps: Vec<Vec<Tensor>>,
    /// Logical network evaluations per image.
    pub forward_passes: usize,
    pub stage_seconds: Vec<f64>,
}

impl Trajectory {
    pub fn final_output(&self) -> &Tensor {
        self.stage_outputs.last().expect("trajectory has at least one stage")
    }

    /// Final output clamped to the image value range.
    pub fn reconstruction(&self) -> Result<Tensor> {
        Ok(self.final_output().clamp(-1.0, 1.0)?)
    }
}

/// `alpha * Up(prev) + beta * eps`, or a standard normal sample when there is no
/// previous stage.
#[allow(clippy::too_many_arguments)]
pub fn init_from(
    prev: Option<&Tensor>,
    batch: usize,
    target: (usize, usize),
    alpha: f64,
    beta: f64,
    mode: UpsampleMode,
    noise: &mut NoiseSource,
    like: &Tensor,
) -> Result<Tensor> {
    let shape = [3, target.0, target.1];
    match prev {
        None => noise.batch(batch, &shape, like.dtype(), like.device()),
        Some(prev) => {
            let up = upsample(prev, target.0, target.1, mode)?;
            if beta == 0.0 {
                return Ok((up * alpha)?);
            }
            let eps = noise.batch(batch, &shape, like.dtype(), like.device())?;
            Ok(((up * alpha)? + (eps * beta)?)?)
        }
    }
}

/// Initial state of stage `s` (1-based): pure noise for `s = 1`, otherwise the
/// upsampled and re-noised output of stage `s - 1`.
pub fn init_stage(
    prev: Option<&Tensor>,
    schedule: &ScaleSchedule,
    s: usize,
    config: &SamplerConfig,
    noise: &mut NoiseSource,
    like: &Tensor,
) -> Result<Tensor> {
    let target = schedule.resolution(s)?;
    let batch = like.dim(0)?;
    match (s, prev) {
        (1, None) => init_from(None, batch, target, 1.0, 1.0, config.upsample, noise, like),
        (1, Some(_)) => Err(invalid!("stage 1 starts from noise; no previous output expected")),
        (_, None) => Err(invalid!("stage {s} needs the previous stage's output")),
        (_, Some(p)) => {
            let expected = schedule.resolution(s - 1)?;
            let got = (p.dim(2)?, p.dim(3)?);
            if got != expected {
                return Err(invalid!(
                    "previous output is {}x{}, stage {} expects {}x{}",
                    got.0,
                    got.1,
                    s - 1,
                    expected.0,
                    expected.1
                ));
            }
            let (a, b) = config.stage_coefficients(schedule, s)?;
            init_from(Some(p), batch, target, a, b, config.upsample, noise, like)
        }
    }
}

/// Guided velocity `mu(x, t, null) + cfg * (mu(x, t, z) - mu(x, t, null))`.
/// With `cfg_scale == 1` only the conditional branch is evaluated.
pub fn cfg_velocity<M: VelocityModel + ?Sized>(
    model: &M,
    x: &Tensor,
    t: &Tensor,
    z: &LatentCode,
    cfg_scale: f64,
) -> Result<Tensor> {
    if cfg_scale == 1.0 {
        return model.velocity(x, t, crate::backbone::Conditioning::Latent(z));
    }
    let (c, u) = model.velocity_pair(x, t, z)?;
    Ok((&u + ((c - &u)? * cfg_scale)?)?)
}

/// One explicit Euler step `x + (t1 - t0) v`.
pub fn euler_step(x: &Tensor, t0: f64, t1: f64, v: &Tensor) -> Result<Tensor> {
    if !(t1 > t0) {
        return Err(invalid!("Euler step needs increasing times, got {t0} -> {t1}"));
    }
    Ok((x + (v * (t1 - t0))?)?)
}

/// Integrates one stage over its timestep grid starting from `x`.
/// Returns the final state, the recorded states, and the number of evaluations.
pub fn integrate_stage<M: VelocityModel + ?Sized>(
    model: &M,
    mut x: Tensor,
    grid: &[f64],
    z: &LatentCode,
    cfg_scale: f64,
    record: bool,
    detach: bool,
) -> Result<(Tensor, Vec<Tensor>, usize)> {
    let b = x.dim(0)?;
    let mut states = Vec::new();
    if record {
        states.push(x.clone());
    }
    let mut evals = 0;
    for w in grid.windows(2) {
        let t = time_tensor(w[0], b, x.dtype(), x.device())?;
        let v = cfg_velocity(model, &x, &t, z, cfg_scale)?;
        x = euler_step(&x, w[0], w[1], &v)?;
        if detach {
            x = x.detach();
        }
        evals += evals_per_step(cfg_scale);
        if record {
            states.push(x.clone());
        }
    }
    Ok((x, states, evals))
}

/// Runs every stage of `schedule`: `N_s` guided Euler steps per stage with
/// upsample-and-renoise transitions between stages.
pub fn decode_multiscale<M: VelocityModel + ?Sized>(
    model: &M,
    z: &LatentCode,
    schedule: &ScaleSchedule,
    config: &SamplerConfig,
    noise: &mut NoiseSource,
) -> Result<Trajectory> {
    config.validate()?;
    let like = z.tensor().narrow(1, 0, 1)?.detach();
    let mut prev: Option<Tensor> = None;
    let mut traj = Trajectory {
        stage_outputs: Vec::with_capacity(schedule.num_stages()),
        steps: Vec::new(),
        forward_passes: 0,
        stage_seconds: Vec::with_capacity(schedule.num_stages()),
    };
    for s in 1..=schedule.num_stages() {
        let start = Instant::now();
        let x0 = init_stage(prev.as_ref(), schedule, s, config, noise, &like)?;
        let grid = schedule.timestep_grid(s)?;
        let (x, states, evals) = integrate_stage(model, x0, &grid, z, config.cfg_scale, config.record_steps, true)?;
        traj.forward_passes += evals;
        traj.stage_seconds.push(start.elapsed().as_secs_f64());
        if config.record_steps {
            traj.steps.push(states);
        }
        traj.stage_outputs.push(x.clone());
        prev = Some(x);
    }
    Ok(traj)
}

/// Full-resolution baseline: one stage of `num_steps` Euler steps over `[0, 1]`.
pub fn decode_singlescale<M: VelocityModel + ?Sized>(
    model: &M,
    z: &LatentCode,
    resolution: usize,
    num_steps: usize,
    config: &SamplerConfig,
    noise: &mut NoiseSource,
) -> Result<Trajectory> {
    if num_steps == 0 {
        return Err(invalid!("num_steps must be at least 1"));
    }
    let schedule = ScaleSchedule::with_bounds(resolution, &[num_steps], vec![(0.0, 1.0)])?;
    decode_multiscale(model, z, &schedule, config, noise)
}

/// Analytic cost of decoding with `schedule` under a per-step cost model, counting
/// guidance evaluations.
pub fn analytic_cost(schedule: &ScaleSchedule, cfg_scale: f64, step_cost: impl Fn(usize, usize) -> f64) -> f64 {
    schedule
        .resolutions()
        .iter()
        .zip(schedule.steps_per_stage())
        .map(|(&(h, w), &n)| n as f64 * step_cost(h, w))
        .sum::<f64>()
        * evals_per_step(cfg_scale) as f64
}
