//! Timestep mathematics: noise-coefficient tables and the position-dependent
//! token-level timestep function.
//!
//! A [`NoiseSchedule`] tabulates the per-step coefficients `alpha[t]` and their
//! running products `alpha_bar[t]` over `T` diffusion steps. A [`TimestepPlan`]
//! maps a sentence-level timestep `t` (ranging over `[0, N+T]`) to a
//! token-level timestep `f(n, t)` for every position `n`, using a point-slope
//! line through a moving start point and a fixed anchor point. Left positions
//! get smaller timesteps, so they denoise earlier than right positions.
//!
//! All types are immutable after construction and every operation is a pure
//! function, so values can be shared freely across threads.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor applied to `alpha_bar` values after clamping, keeping the tables
/// strictly positive.
pub const ALPHA_BAR_FLOOR: f64 = 1e-5;

/// Default offset for [`NoiseSchedule::sqrt`].
pub const DEFAULT_SQRT_OFFSET: f64 = 1e-4;

/// Noise-coefficient tables over `total_steps` diffusion steps.
///
/// `alpha_bar[t]` is the cumulative signal coefficient at step `t` and
/// `alpha[t] = alpha_bar[t] / alpha_bar[t-1]` for `t >= 1`. `alpha[0]` holds
/// the embedding-step coefficient and is set to `alpha[1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    total_steps: usize,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Square-root schedule: `alpha_bar[t] = 1 - sqrt(t/T + offset)`, clamped
    /// into `(ALPHA_BAR_FLOOR, 1]`.
    pub fn sqrt(total_steps: usize, offset: f64) -> Result<Self> {
        if total_steps == 0 {
            return Err(Error::InvalidArgument(
                "total_steps must be positive".into(),
            ));
        }
        if !(offset > 0.0 && offset < 1.0) || !offset.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "offset must lie in (0, 1), got {offset}"
            )));
        }
        let t_max = total_steps as f64;
        let alpha_bar: Vec<f64> = (0..=total_steps)
            .map(|t| {
                let raw = 1.0 - (t as f64 / t_max + offset).sqrt();
                raw.clamp(ALPHA_BAR_FLOOR, 1.0)
            })
            .collect();
        Self::from_alpha_bar(alpha_bar).map_err(|_| {
            Error::InvalidArgument(format!(
                "offset {offset} too large for {total_steps} steps: clamped table is not strictly decreasing"
            ))
        })
    }

    /// Build a schedule from an explicit `alpha_bar` table of length `T + 1`.
    ///
    /// The table must be strictly decreasing and contained in `(0, 1]`.
    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.len() < 2 {
            return Err(Error::InvalidArgument(
                "alpha_bar needs at least two entries".into(),
            ));
        }
        for (t, &v) in alpha_bar.iter().enumerate() {
            if !(v > 0.0 && v <= 1.0) || !v.is_finite() {
                return Err(Error::Numeric(format!(
                    "alpha_bar[{t}] = {v} outside (0, 1]"
                )));
            }
            if t > 0 && v >= alpha_bar[t - 1] {
                return Err(Error::Numeric(format!(
                    "alpha_bar not strictly decreasing at t = {t}"
                )));
            }
        }
        let mut alpha = Vec::with_capacity(alpha_bar.len());
        alpha.push(f64::NAN); // placeholder, replaced by alpha[1] below
        for t in 1..alpha_bar.len() {
            alpha.push(alpha_bar[t] / alpha_bar[t - 1]);
        }
        alpha[0] = alpha[1];
        Ok(Self {
            total_steps: alpha_bar.len() - 1,
            alpha,
            alpha_bar,
        })
    }

    /// Number of diffusion steps `T`.
    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    /// Per-step coefficient `alpha[t]`, `t` in `[0, T]`.
    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    /// Cumulative coefficient `alpha_bar[t]`, `t` in `[0, T]`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// Embedding-step coefficient; the variance of the embedding step is
    /// `1 - alpha0()`.
    pub fn alpha0(&self) -> f64 {
        self.alpha[0]
    }
}

/// How real-valued `f(n, t)` is turned into an integer table index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rounding {
    /// Round to the nearest integer (ties away from zero).
    #[default]
    Nearest,
    /// Truncate toward zero.
    Floor,
}

impl Rounding {
    fn apply(self, x: f64) -> f64 {
        match self {
            Rounding::Nearest => x.round(),
            Rounding::Floor => x.floor(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
enum PlanKind {
    /// Point-slope line through the moving start point and a fixed anchor.
    Anchored { anchor_pos: f64, anchor_t: f64 },
    /// Baseline where every position shares the sentence-level timestep.
    Uniform,
}

/// Maps sentence-level timesteps to per-position token-level timesteps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimestepPlan {
    target_len: usize,
    total_steps: usize,
    kind: PlanKind,
    rounding: Rounding,
}

/// Change of a token's timestep across one sentence-level step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MovementSpeed {
    pub position: usize,
    pub from_t: f64,
    pub to_t: f64,
    /// `f(n, to_t) - f(n, from_t)`, computed before rounding.
    pub speed: f64,
}

impl TimestepPlan {
    /// Plan with an explicit anchor point `(anchor_pos, anchor_t)`.
    ///
    /// `anchor_pos` must exceed `target_len`: the start point can reach
    /// `(target_len, 0)`, and the slope denominator `anchor_pos - n_s` must
    /// stay away from zero.
    pub fn anchored(
        target_len: usize,
        total_steps: usize,
        anchor_pos: f64,
        anchor_t: f64,
        rounding: Rounding,
    ) -> Result<Self> {
        if target_len == 0 || total_steps == 0 {
            return Err(Error::InvalidArgument(
                "target_len and total_steps must be positive".into(),
            ));
        }
        if !(anchor_pos > target_len as f64) {
            return Err(Error::InvalidArgument(format!(
                "anchor position {anchor_pos} must exceed target length {target_len}"
            )));
        }
        if !anchor_t.is_finite() || anchor_t < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "anchor timestep {anchor_t} must be finite and non-negative"
            )));
        }
        Ok(Self {
            target_len,
            total_steps,
            kind: PlanKind::Anchored {
                anchor_pos,
                anchor_t,
            },
            rounding,
        })
    }

    /// Default anchor `(2N, T)` with nearest-integer rounding.
    pub fn default_anchored(target_len: usize, total_steps: usize) -> Result<Self> {
        Self::anchored(
            target_len,
            total_steps,
            2.0 * target_len as f64,
            total_steps as f64,
            Rounding::Nearest,
        )
    }

    /// Uniform baseline: `f(n, t) = clip(t, 0, T)` for every position, with
    /// sentence-level domain `[0, T]`.
    pub fn uniform(target_len: usize, total_steps: usize) -> Result<Self> {
        if target_len == 0 || total_steps == 0 {
            return Err(Error::InvalidArgument(
                "target_len and total_steps must be positive".into(),
            ));
        }
        Ok(Self {
            target_len,
            total_steps,
            kind: PlanKind::Uniform,
            rounding: Rounding::Nearest,
        })
    }

    pub fn target_len(&self) -> usize {
        self.target_len
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn rounding(&self) -> Rounding {
        self.rounding
    }

    pub fn is_uniform(&self) -> bool {
        matches!(self.kind, PlanKind::Uniform)
    }

    /// Anchor point `(n_e, t_e)` for anchored plans.
    pub fn anchor(&self) -> Option<(f64, f64)> {
        match self.kind {
            PlanKind::Anchored {
                anchor_pos,
                anchor_t,
            } => Some((anchor_pos, anchor_t)),
            PlanKind::Uniform => None,
        }
    }

    /// Largest valid sentence-level timestep: `N + T` for anchored plans,
    /// `T` for the uniform baseline.
    pub fn max_sentence_t(&self) -> usize {
        match self.kind {
            PlanKind::Anchored { .. } => self.target_len + self.total_steps,
            PlanKind::Uniform => self.total_steps,
        }
    }

    fn check_sentence_t(&self, t: f64) -> Result<()> {
        let max = self.max_sentence_t() as f64;
        if !t.is_finite() || t < 0.0 || t > max {
            return Err(Error::InvalidArgument(format!(
                "sentence-level timestep {t} outside [0, {max}]"
            )));
        }
        Ok(())
    }

    fn check_position(&self, n: usize) -> Result<()> {
        if n == 0 || n > self.target_len {
            return Err(Error::InvalidArgument(format!(
                "position {n} outside [1, {}]",
                self.target_len
            )));
        }
        Ok(())
    }

    /// Start point `(n_s, t_s)` of the timestep line at sentence-level `t`.
    ///
    /// For anchored plans this is `(clip(N - t, 0, N), clip(t - N, 0, T))`;
    /// for the uniform baseline the line is flat through `(0, clip(t, 0, T))`.
    pub fn start_point(&self, t: f64) -> Result<(f64, f64)> {
        self.check_sentence_t(t)?;
        let n_len = self.target_len as f64;
        let t_max = self.total_steps as f64;
        match self.kind {
            PlanKind::Anchored { .. } => {
                Ok(((n_len - t).clamp(0.0, n_len), (t - n_len).clamp(0.0, t_max)))
            }
            PlanKind::Uniform => Ok((0.0, t.clamp(0.0, t_max))),
        }
    }

    /// The point-slope line evaluated at position `n`, before the `[0, T]`
    /// clip. Unlike the clipped timestep, this is ordered across positions
    /// everywhere (left lines never sit above right lines in slope).
    pub fn token_timestep_line(&self, n: usize, t: f64) -> Result<f64> {
        self.check_position(n)?;
        let (n_s, t_s) = self.start_point(t)?;
        match self.kind {
            PlanKind::Anchored {
                anchor_pos,
                anchor_t,
            } => {
                let slope = (anchor_t - t_s) / (anchor_pos - n_s);
                Ok(slope * (n as f64 - n_s) + t_s)
            }
            PlanKind::Uniform => Ok(t_s),
        }
    }

    /// Token-level timestep before rounding: the point-slope line evaluated at
    /// position `n` and clipped into `[0, T]`.
    pub fn token_timestep_real(&self, n: usize, t: f64) -> Result<f64> {
        let line = self.token_timestep_line(n, t)?;
        Ok(line.clamp(0.0, self.total_steps as f64))
    }

    /// Token-level timestep as a table index, after the plan's rounding rule.
    pub fn token_timestep(&self, n: usize, t: f64) -> Result<usize> {
        let real = self.token_timestep_real(n, t)?;
        let rounded = self.rounding.apply(real);
        Ok(rounded.clamp(0.0, self.total_steps as f64) as usize)
    }

    /// Token-level timesteps for every position `1..=N` at sentence-level `t`.
    pub fn token_steps(&self, t: f64) -> Result<Vec<usize>> {
        (1..=self.target_len)
            .map(|n| self.token_timestep(n, t))
            .collect()
    }

    /// Speed of movement of position `n` between two sentence-level timesteps.
    pub fn movement_speed(&self, n: usize, from_t: f64, to_t: f64) -> Result<MovementSpeed> {
        let from = self.token_timestep_real(n, from_t)?;
        let to = self.token_timestep_real(n, to_t)?;
        Ok(MovementSpeed {
            position: n,
            from_t,
            to_t,
            speed: to - from,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn approx(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn sqrt_schedule_first_entry() {
        // alpha_bar[0] = 1 - sqrt(1e-4) = 0.99
        let s = NoiseSchedule::sqrt(2000, 1e-4).unwrap();
        assert!(approx(s.alpha_bar(0), 0.99, 1e-12));
        assert_eq!(s.total_steps(), 2000);
    }

    #[test]
    fn sqrt_schedule_small_offset_limit() {
        // For T = 4 and offset -> 0: 1 - sqrt(t/4) = [1, 0.5, 0.29289, 0.13397, 0],
        // the last entry clamped to the floor.
        let s = NoiseSchedule::sqrt(4, 1e-12).unwrap();
        let expect = [1.0, 0.5, 1.0 - 0.5f64.sqrt(), 1.0 - 0.75f64.sqrt()];
        for (t, &e) in expect.iter().enumerate() {
            assert!(
                approx(s.alpha_bar(t), e, 1e-5),
                "t={t}: {} vs {e}",
                s.alpha_bar(t)
            );
        }
        assert!(approx(s.alpha_bar(4), ALPHA_BAR_FLOOR, 1e-15));
    }

    #[test]
    fn sqrt_schedule_tables_consistent() {
        let s = NoiseSchedule::sqrt(100, 1e-4).unwrap();
        for t in 1..=100 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1), "not decreasing at {t}");
            assert!(s.alpha_bar(t) > 0.0 && s.alpha_bar(t) <= 1.0);
            let ratio = s.alpha_bar(t) / s.alpha_bar(t - 1);
            assert!(approx(s.alpha(t), ratio, 1e-12));
        }
        assert_eq!(s.alpha0(), s.alpha(1));
    }

    #[test]
    fn sqrt_schedule_rejects_bad_inputs() {
        assert!(NoiseSchedule::sqrt(0, 1e-4).is_err());
        assert!(NoiseSchedule::sqrt(100, 0.0).is_err());
        assert!(NoiseSchedule::sqrt(100, 1.0).is_err());
        // Large offset drives several tail entries onto the floor.
        assert!(NoiseSchedule::sqrt(10, 0.2).is_err());
    }

    #[test]
    fn from_alpha_bar_validates() {
        assert!(NoiseSchedule::from_alpha_bar(vec![0.9, 0.9]).is_err());
        assert!(NoiseSchedule::from_alpha_bar(vec![0.9, -0.1]).is_err());
        assert!(NoiseSchedule::from_alpha_bar(vec![0.9]).is_err());
        let s = NoiseSchedule::from_alpha_bar(vec![0.81, 0.25]).unwrap();
        assert!(approx(s.alpha(1), 0.25 / 0.81, 1e-15));
    }

    #[test]
    fn start_point_examples() {
        // N = 10, T = 2000
        let plan = TimestepPlan::default_anchored(10, 2000).unwrap();
        assert_eq!(plan.start_point(0.0).unwrap(), (10.0, 0.0));
        assert_eq!(plan.start_point(2010.0).unwrap(), (0.0, 2000.0));
        assert_eq!(plan.start_point(1005.0).unwrap(), (0.0, 995.0));
        assert!(plan.start_point(-1.0).is_err());
        assert!(plan.start_point(2011.0).is_err());
    }

    #[test]
    fn token_timestep_examples() {
        // N = 10, T = 2000, anchor (20, 2000), nearest rounding.
        let plan = TimestepPlan::default_anchored(10, 2000).unwrap();
        for n in 1..=10 {
            assert_eq!(plan.token_timestep(n, 0.0).unwrap(), 0);
            assert_eq!(plan.token_timestep(n, 2010.0).unwrap(), 2000);
        }
        // t = 5: start (5, 0), slope 2000/15; position 8 sits 3 to the right.
        assert_eq!(plan.token_timestep(8, 5.0).unwrap(), 400);
        // Negative pre-clip value clips to zero.
        assert_eq!(plan.token_timestep(3, 5.0).unwrap(), 0);
        // t = 1010: start (0, 1000), slope 50.
        assert_eq!(plan.token_timestep(10, 1010.0).unwrap(), 1500);
        assert!(plan.token_timestep(0, 5.0).is_err());
        assert!(plan.token_timestep(11, 5.0).is_err());
    }

    #[test]
    fn movement_speed_examples() {
        let plan = TimestepPlan::default_anchored(10, 2000).unwrap();
        let zero = plan.movement_speed(1, 500.0, 500.0).unwrap();
        assert_eq!(zero.speed, 0.0);
        // For t >= N the unclipped slope in t is 1 - n/(2N).
        let v5 = plan.movement_speed(5, 1005.0, 1010.0).unwrap().speed;
        let v9 = plan.movement_speed(9, 1005.0, 1010.0).unwrap().speed;
        assert!(approx(v5, 5.0 * (1.0 - 5.0 / 20.0), 1e-9));
        assert!(approx(v9, 5.0 * (1.0 - 9.0 / 20.0), 1e-9));
        assert!(v5 > v9 && v9 > 0.0);
    }

    #[test]
    fn uniform_plan_examples() {
        let plan = TimestepPlan::uniform(10, 2000).unwrap();
        assert_eq!(plan.max_sentence_t(), 2000);
        for n in 1..=10 {
            assert_eq!(plan.token_timestep(n, 0.0).unwrap(), 0);
            assert_eq!(plan.token_timestep(n, 2000.0).unwrap(), 2000);
            assert_eq!(plan.token_timestep(n, 1000.0).unwrap(), 1000);
        }
        // Identical movement speed across positions.
        let v1 = plan.movement_speed(1, 100.0, 400.0).unwrap().speed;
        let v10 = plan.movement_speed(10, 100.0, 400.0).unwrap().speed;
        assert_eq!(v1, v10);
        assert_eq!(v1, 300.0);
    }

    #[test]
    fn anchored_rejects_degenerate_anchor() {
        assert!(TimestepPlan::anchored(10, 100, 10.0, 100.0, Rounding::Nearest).is_err());
        assert!(TimestepPlan::anchored(10, 100, 9.0, 100.0, Rounding::Nearest).is_err());
        assert!(TimestepPlan::anchored(10, 100, 10.5, 100.0, Rounding::Nearest).is_ok());
    }

    #[test]
    fn floor_rounding() {
        let plan = TimestepPlan::anchored(10, 2000, 20.0, 2000.0, Rounding::Floor).unwrap();
        // t = 4: start (6, 0), slope 2000/14; n = 8 gives 2000*2/14 = 285.71 -> 285.
        assert_eq!(plan.token_timestep(8, 4.0).unwrap(), 285);
        let nearest = TimestepPlan::anchored(10, 2000, 20.0, 2000.0, Rounding::Nearest).unwrap();
        assert_eq!(nearest.token_timestep(8, 4.0).unwrap(), 286);
    }

    #[test]
    fn monotone_in_position_and_time_exhaustive() {
        for (len, steps) in [(5usize, 20usize), (10, 100)] {
            let plan = TimestepPlan::default_anchored(len, steps).unwrap();
            let max_t = plan.max_sentence_t();
            for t in 0..=max_t {
                let row = plan.token_steps(t as f64).unwrap();
                for w in row.windows(2) {
                    assert!(w[0] <= w[1], "position monotonicity broke at t={t}");
                }
            }
            for n in 1..=len {
                let mut prev = plan.token_timestep(n, 0.0).unwrap();
                for t in 1..=max_t {
                    let cur = plan.token_timestep(n, t as f64).unwrap();
                    assert!(cur >= prev, "time monotonicity broke at n={n}, t={t}");
                    prev = cur;
                }
            }
        }
    }

    #[test]
    fn boundary_conditions() {
        let plan = TimestepPlan::default_anchored(7, 33).unwrap();
        for n in 1..=7 {
            assert_eq!(plan.token_timestep(n, 0.0).unwrap(), 0);
            assert_eq!(plan.token_timestep(n, 40.0).unwrap(), 33);
        }
    }
}
