//! Resolution ladder, per-stage time grids and the noise interpolant.
//!
//! Stages are numbered from 1 (coarsest) to `S` (full resolution). Time runs
//! from 0 (pure noise) to 1 (clean data).

use serde::{Deserialize, Serialize};

use crate::error::invalid;
use crate::Result;

/// Parameters that determine a [`ScaleSchedule`]; this is what run configs carry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub base_resolution: usize,
    pub num_stages: usize,
    pub steps_per_stage: Vec<usize>,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            base_resolution: 16,
            num_stages: 3,
            steps_per_stage: vec![10, 10, 10],
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<ScaleSchedule> {
        make_scale_schedule(self.base_resolution, self.num_stages, &self.steps_per_stage)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleSchedule {
    base_resolution: usize,
    resolutions: Vec<(usize, usize)>,
    steps_per_stage: Vec<usize>,
    stage_bounds: Vec<(f64, f64)>,
}

/// Builds the doubling ladder `base * 2^(s-1)` with a uniform partition of `[0, 1]`.
pub fn make_scale_schedule(
    base_resolution: usize,
    num_stages: usize,
    steps_per_stage: &[usize],
) -> Result<ScaleSchedule> {
    if num_stages == 0 {
        return Err(invalid!("num_stages must be at least 1"));
    }
    let bounds = (1..=num_stages)
        .map(|s| ((s - 1) as f64 / num_stages as f64, s as f64 / num_stages as f64))
        .collect();
    ScaleSchedule::with_bounds(base_resolution, steps_per_stage, bounds)
}

impl ScaleSchedule {
    /// Schedule with explicit stage bounds. Bounds must be ordered, non-overlapping,
    /// start at 0 and end at 1.
    pub fn with_bounds(
        base_resolution: usize,
        steps_per_stage: &[usize],
        stage_bounds: Vec<(f64, f64)>,
    ) -> Result<Self> {
        if base_resolution < 8 || !base_resolution.is_power_of_two() {
            return Err(invalid!(
                "base resolution must be a power of two >= 8, got {base_resolution}"
            ));
        }
        let s = stage_bounds.len();
        if s == 0 {
            return Err(invalid!("schedule needs at least one stage"));
        }
        if steps_per_stage.len() != s {
            return Err(invalid!(
                "steps_per_stage has {} entries for {} stages",
                steps_per_stage.len(),
                s
            ));
        }
        if steps_per_stage.contains(&0) {
            return Err(invalid!("every stage needs at least one step"));
        }
        if stage_bounds[0].0 != 0.0 || stage_bounds[s - 1].1 != 1.0 {
            return Err(invalid!("stage bounds must start at 0 and end at 1"));
        }
        for (i, &(a, b)) in stage_bounds.iter().enumerate() {
            if !(0.0..1.0).contains(&a) || b <= a || b > 1.0 {
                return Err(invalid!("stage {} has invalid bounds ({a}, {b})", i + 1));
            }
            if i > 0 && a < stage_bounds[i - 1].1 {
                return Err(invalid!("stage {} overlaps its predecessor", i + 1));
            }
        }
        let resolutions = (0..s)
            .map(|i| {
                let r = base_resolution << i;
                (r, r)
            })
            .collect();
        Ok(Self {
            base_resolution,
            resolutions,
            steps_per_stage: steps_per_stage.to_vec(),
            stage_bounds,
        })
    }

    pub fn num_stages(&self) -> usize {
        self.resolutions.len()
    }

    pub fn base_resolution(&self) -> usize {
        self.base_resolution
    }

    pub fn resolutions(&self) -> &[(usize, usize)] {
        &self.resolutions
    }

    pub fn steps_per_stage(&self) -> &[usize] {
        &self.steps_per_stage
    }

    pub fn stage_bounds(&self) -> &[(f64, f64)] {
        &self.stage_bounds
    }

    pub fn total_steps(&self) -> usize {
        self.steps_per_stage.iter().sum()
    }

    pub fn final_resolution(&self) -> (usize, usize) {
        self.resolutions[self.num_stages() - 1]
    }

    fn check_stage(&self, s: usize) -> Result<usize> {
        if s == 0 || s > self.num_stages() {
            return Err(invalid!("stage {s} out of range 1..={}", self.num_stages()));
        }
        Ok(s - 1)
    }

    /// Resolution `(H_s, W_s)` of stage `s` (1-based).
    pub fn resolution(&self, s: usize) -> Result<(usize, usize)> {
        Ok(self.resolutions[self.check_stage(s)?])
    }

    /// `(t_s^0, t_s^1)` of stage `s` (1-based).
    pub fn bounds(&self, s: usize) -> Result<(f64, f64)> {
        Ok(self.stage_bounds[self.check_stage(s)?])
    }

    pub fn steps(&self, s: usize) -> Result<usize> {
        Ok(self.steps_per_stage[self.check_stage(s)?])
    }

    /// `N_s + 1` linearly spaced times from `t_s^0` to `t_s^1`, endpoints exact.
    pub fn timestep_grid(&self, s: usize) -> Result<Vec<f64>> {
        let i = self.check_stage(s)?;
        let (a, b) = self.stage_bounds[i];
        let n = self.steps_per_stage[i];
        let mut grid: Vec<f64> = (0..=n).map(|k| a + (b - a) * (k as f64 / n as f64)).collect();
        grid[n] = b;
        Ok(grid)
    }

    /// Stage whose half-open interval `[t_s^0, t_s^1)` contains `t`; `t = 1` maps to `S`.
    pub fn scale_for_timestep(&self, t: f64) -> Result<usize> {
        if !(0.0..=1.0).contains(&t) {
            return Err(invalid!("time {t} outside [0, 1]"));
        }
        let last = self.num_stages();
        if t >= self.stage_bounds[last - 1].1 {
            return Ok(last);
        }
        self.stage_bounds
            .iter()
            .position(|&(a, b)| a <= t && t < b)
            .map(|i| i + 1)
            .ok_or_else(|| invalid!("time {t} falls in a gap between stages"))
    }

    /// Copy of this schedule with one step per stage, as used by distilled students.
    pub fn one_step(&self) -> Self {
        Self {
            steps_per_stage: vec![1; self.num_stages()],
            ..self.clone()
        }
    }
}

/// The forward-noising interpolant `x_t = alpha_t * x + sigma_t * eps`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseInterpolant {
    /// `alpha_t = t`, `sigma_t = 1 - t`.
    #[default]
    Linear,
}

impl NoiseInterpolant {
    pub fn alpha(&self, t: f64) -> f64 {
        match self {
            NoiseInterpolant::Linear => t,
        }
    }

    pub fn sigma(&self, t: f64) -> f64 {
        match self {
            NoiseInterpolant::Linear => 1.0 - t,
        }
    }

    pub fn coefficients(&self, t: f64) -> Result<(f64, f64)> {
        if !(0.0..=1.0).contains(&t) {
            return Err(invalid!("time {t} outside [0, 1]"));
        }
        Ok((self.alpha(t), self.sigma(t)))
    }
}

/// `(alpha_t, sigma_t)` of the default linear interpolant.
pub fn interpolant_coefficients(t: f64) -> Result<(f64, f64)> {
    NoiseInterpolant::Linear.coefficients(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ladder_of_four_with_thirty_steps() {
        let s = make_scale_schedule(32, 4, &[30, 30, 30, 30]).unwrap();
        let r: Vec<usize> = s.resolutions().iter().map(|r| r.0).collect();
        assert_eq!(r, vec![32, 64, 128, 256]);
        assert_eq!(s.total_steps(), 120);
    }

    #[test]
    fn single_stage() {
        let s = make_scale_schedule(64, 1, &[120]).unwrap();
        assert_eq!(s.resolutions(), &[(64, 64)]);
        assert_eq!(s.stage_bounds(), &[(0.0, 1.0)]);
    }

    #[test]
    fn three_stage_bounds() {
        let s = make_scale_schedule(16, 3, &[4, 4, 4]).unwrap();
        let r: Vec<usize> = s.resolutions().iter().map(|r| r.0).collect();
        assert_eq!(r, vec![16, 32, 64]);
        assert_eq!(s.stage_bounds(), &[(0.0, 1.0 / 3.0), (1.0 / 3.0, 2.0 / 3.0), (2.0 / 3.0, 1.0)]);
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(make_scale_schedule(24, 2, &[1, 1]).is_err());
        assert!(make_scale_schedule(4, 1, &[1]).is_err());
        assert!(make_scale_schedule(32, 2, &[1]).is_err());
        assert!(make_scale_schedule(32, 2, &[1, 0]).is_err());
        assert!(make_scale_schedule(32, 0, &[]).is_err());
    }

    #[test]
    fn grids() {
        let s = make_scale_schedule(16, 2, &[2, 2]).unwrap();
        assert_eq!(s.timestep_grid(1).unwrap(), vec![0.0, 0.25, 0.5]);
        let s = make_scale_schedule(16, 1, &[4]).unwrap();
        assert_eq!(s.timestep_grid(1).unwrap(), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        let s = make_scale_schedule(32, 4, &[30; 4]).unwrap();
        let g = s.timestep_grid(4).unwrap();
        assert_eq!(g.len(), 31);
        assert_eq!(g[0], 0.75);
        assert_eq!(g[30], 1.0);
        for w in g.windows(2) {
            assert!(((w[1] - w[0]) - 1.0 / 120.0).abs() < 1e-12);
        }
        assert!(s.timestep_grid(0).is_err());
        assert!(s.timestep_grid(5).is_err());
    }

    #[test]
    fn stage_lookup() {
        let s = make_scale_schedule(32, 4, &[30; 4]).unwrap();
        assert_eq!(s.scale_for_timestep(0.10).unwrap(), 1);
        assert_eq!(s.scale_for_timestep(1.0).unwrap(), 4);
        assert_eq!(s.scale_for_timestep(0.25).unwrap(), 2);
        assert_eq!(s.scale_for_timestep(0.0).unwrap(), 1);
        assert!(s.scale_for_timestep(-0.01).is_err());
        assert!(s.scale_for_timestep(1.01).is_err());
    }

    #[test]
    fn interpolant_endpoints() {
        assert_eq!(interpolant_coefficients(1.0).unwrap(), (1.0, 0.0));
        assert_eq!(interpolant_coefficients(0.0).unwrap(), (0.0, 1.0));
        let (a, s) = interpolant_coefficients(0.3).unwrap();
        assert!((a - 0.3).abs() < 1e-15 && (s - 0.7).abs() < 1e-15);
        assert!(interpolant_coefficients(1.5).is_err());
    }

    #[test]
    fn custom_bounds_validation() {
        assert!(ScaleSchedule::with_bounds(16, &[1, 1], vec![(0.0, 0.4), (0.4, 1.0)]).is_ok());
        assert!(ScaleSchedule::with_bounds(16, &[1, 1], vec![(0.0, 0.6), (0.4, 1.0)]).is_err());
        assert!(ScaleSchedule::with_bounds(16, &[1, 1], vec![(0.1, 0.6), (0.6, 1.0)]).is_err());
    }

    proptest! {
        #[test]
        fn schedule_invariants(stages in 1usize..7, steps in proptest::collection::vec(1usize..40, 7), t in 0.0f64..=1.0) {
            let s = make_scale_schedule(8, stages, &steps[..stages]).unwrap();
            let total: f64 = s.stage_bounds().iter().map(|(a, b)| b - a).sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            for w in s.resolutions().windows(2) {
                prop_assert_eq!(w[1].0, 2 * w[0].0);
            }
            let stage = s.scale_for_timestep(t).unwrap();
            let grid = s.timestep_grid(stage).unwrap();
            prop_assert!(grid[0] <= t && t <= grid[grid.len() - 1]);
            let h = grid[1] - grid[0];
            for w in grid.windows(2) {
                prop_assert!(w[1] > w[0]);
                prop_assert!(((w[1] - w[0]) - h).abs() <= 1e-12 * h.abs().max(1.0));
            }
            let (a, sg) = interpolant_coefficients(t).unwrap();
            prop_assert!((a + sg - 1.0).abs() < 1e-15);
        }
    }
}
