//! Log-barrier box constraints and their temperature schedule.
//!
//! For a parameter bounded by `(lower, upper)` the penalty is
//! `-(1/T)·[ln(x - lower) + ln(upper - x)]`, shifted so the midpoint costs
//! nothing. It grows without bound at either wall, and raising the
//! temperature `T` flattens it so the parameter can use the whole interval.

use crate::error::{Error, Result};
use crate::fmath;
use crate::rig::ParamGroupId;

/// Open interval `(lower, upper)`.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Bounds {
    pub lower: f64,
    pub upper: f64,
}

impl Bounds {
    pub fn new(lower: f64, upper: f64) -> Result<Self> {
        if !(lower < upper) || !lower.is_finite() || !upper.is_finite() {
            return Err(Error::InvalidInput("bounds need lower < upper, both finite".into()));
        }
        Ok(Bounds { lower, upper })
    }

    pub fn symmetric(half_width: f64) -> Self {
        Bounds { lower: -half_width, upper: half_width }
    }

    pub fn contains(&self, x: f64) -> bool {
        x > self.lower && x < self.upper
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.lower + self.upper)
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }

    /// `x` if strictly inside, otherwise the interior point `1e-6·width`
    /// away from the nearest wall.
    pub fn clamp_interior(&self, x: f64) -> f64 {
        let margin = 1e-6 * self.width();
        if x <= self.lower {
            self.lower + margin
        } else if x >= self.upper {
            self.upper - margin
        } else if x.is_nan() {
            self.midpoint()
        } else {
            x
        }
    }

    /// `|x - mid| / (width/2)`: 0 at the midpoint, 1 at a wall.
    pub fn usage(&self, x: f64) -> f64 {
        (x - self.midpoint()).abs() / (0.5 * self.width())
    }

    fn check(&self, x: f64) -> Result<()> {
        if self.contains(x) {
            Ok(())
        } else {
            Err(Error::OutOfBounds { value: x, lower: self.lower, upper: self.upper })
        }
    }
}

/// Barrier penalty at `x`, zero at the midpoint.
pub fn barrier_value(x: f64, lower: f64, upper: f64, temperature: f64) -> Result<f64> {
    let b = Bounds { lower, upper };
    b.check(x)?;
    let half = 0.5 * (upper - lower);
    let raw = fmath::ln(x - lower) + fmath::ln(upper - x);
    Ok(-(raw - 2.0 * fmath::ln(half)) / temperature)
}

/// `d/dx` of [`barrier_value`].
pub fn barrier_gradient(x: f64, lower: f64, upper: f64, temperature: f64) -> Result<f64> {
    Bounds { lower, upper }.check(x)?;
    Ok((1.0 / (upper - x) - 1.0 / (x - lower)) / temperature)
}

/// Per-group bounds on the *deltas*. Pose groups are absolute (radians or
/// meters); intrinsic groups are fractions of the initial value.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BarrierSpec {
    pub groups: [Bounds; 8],
}

impl Default for BarrierSpec {
    fn default() -> Self {
        default_bounds()
    }
}

impl BarrierSpec {
    pub fn group(&self, g: ParamGroupId) -> Bounds {
        self.groups[g.index()]
    }

    pub fn set(&mut self, g: ParamGroupId, b: Bounds) {
        self.groups[g.index()] = b;
    }

    /// Bounds on a delta of group `g` whose base value is `initial`
    /// (only used by the relative intrinsic groups).
    pub fn delta_bounds(&self, g: ParamGroupId, initial: f64) -> Bounds {
        let b = self.group(g);
        if g.is_intrinsic() {
            let scale = initial.abs();
            Bounds { lower: b.lower * scale, upper: b.upper * scale }
        } else {
            b
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (g, b) in ParamGroupId::ALL.iter().zip(self.groups.iter()) {
            Bounds::new(b.lower, b.upper)?;
            if !b.contains(0.0) {
                return Err(Error::InvalidInput(alloc::format!("bounds of {} must contain zero", g.name())));
            }
        }
        Ok(())
    }
}

/// ±2% on intrinsics, ±0.625° / ±2.5° on φ/ρ rotations, ±0.125 m / ±0.5 m on
/// φ/ρ translations.
pub fn default_bounds() -> BarrierSpec {
    let deg = core::f64::consts::PI / 180.0;
    let intrinsic = Bounds::symmetric(0.02);
    BarrierSpec {
        groups: [
            Bounds::symmetric(0.625 * deg),
            Bounds::symmetric(0.125),
            Bounds::symmetric(2.5 * deg),
            Bounds::symmetric(0.5),
            intrinsic,
            intrinsic,
            intrinsic,
            intrinsic,
        ],
    }
}

/// Geometric ramp from `t_start` to `t_end` over `total_iters`.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TemperatureSchedule {
    pub t_start: f64,
    pub t_end: f64,
    pub total_iters: usize,
}

impl Default for TemperatureSchedule {
    fn default() -> Self {
        TemperatureSchedule { t_start: 1.0, t_end: 1e4, total_iters: 5000 }
    }
}

impl TemperatureSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_start > 0.0 && self.t_start <= self.t_end && self.t_end.is_finite()) {
            return Err(Error::InvalidInput("temperature schedule needs 0 < t_start <= t_end".into()));
        }
        Ok(())
    }
}

/// `t_start·(t_end/t_start)^(iter/total)`; iterations past the end hold `t_end`.
pub fn temperature(schedule: &TemperatureSchedule, iter: usize) -> f64 {
    if schedule.total_iters == 0 || iter >= schedule.total_iters {
        return schedule.t_end;
    }
    if iter == 0 {
        return schedule.t_start;
    }
    let frac = iter as f64 / schedule.total_iters as f64;
    schedule.t_start * fmath::pow(schedule.t_end / schedule.t_start, frac)
}
