//! Lévy measures and the per-level quantities derived from them.
//!
//! A level `l` of the discretization is fixed by its step size `h = S0^-l`.
//! The jump threshold `delta` is then chosen so that jumps of size at least
//! `delta` arrive at rate exactly `1/h`; smaller jumps are dropped. Everything
//! the simulation needs about a level (threshold, rate, compensator) is
//! bundled in [`LevelParams`].

use rand::Rng;

use crate::error::{config, domain, Result};

/// Interface for a one-dimensional Lévy measure with bounded support.
///
/// Implementors supply the tail mass and the moment callbacks. The jump
/// threshold defaults to a bisection on the (monotone) tail mass.
pub trait LevyMeasure: Clone + Send + Sync {
    type Jumps: JumpLaw;

    /// Radius `x*` beyond which the measure has no mass.
    fn truncation(&self) -> f64;

    /// `nu(|x| >= delta)`.
    fn tail_mass(&self, delta: f64) -> Result<f64>;

    /// `int_{|x| >= delta} x nu(dx)`, the drift compensator of the retained jumps.
    fn first_moment_outside(&self, delta: f64) -> Result<f64>;

    /// `int_{|x| < delta} x^2 nu(dx)`, the variance of the discarded small jumps.
    fn second_moment_inside(&self, delta: f64) -> Result<f64>;

    /// `int_{|x| >= delta} x^2 nu(dx)`.
    fn second_moment_outside(&self, delta: f64) -> Result<f64>;

    /// Threshold `delta` with `tail_mass(delta) = 1/h`.
    fn jump_threshold(&self, h: f64) -> Result<f64> {
        threshold_by_bisection(self, h)
    }

    /// Normalized law of the retained jumps, `1{|x| >= delta} nu(dx) / tail_mass(delta)`.
    fn jump_law(&self, delta: f64) -> Result<Self::Jumps>;
}

/// Law of a single retained jump: a magnitude given by its quantile function
/// and an independent sign.
pub trait JumpLaw: Send + Sync {
    /// Magnitude at uniform level `u` in `[0, 1]`.
    fn magnitude(&self, u: f64) -> f64;

    /// Probability that a jump is positive.
    fn positive_fraction(&self) -> f64;

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let r = self.magnitude(rng.random::<f64>());
        if rng.random::<f64>() < self.positive_fraction() {
            r
        } else {
            -r
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Support {
    /// Density on `[-x*, 0) ∪ (0, x*]`.
    Symmetric,
    /// Density on `(0, x*]` only. Used to exercise nonzero compensators.
    Positive,
}

/// Truncated stable Lévy measure with density `c |x|^(-1-phi)` for `0 < |x| <= x*`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StableMeasure {
    c: f64,
    phi: f64,
    xstar: f64,
    support: Support,
}

impl StableMeasure {
    pub fn symmetric(c: f64, phi: f64, xstar: f64) -> Result<Self> {
        Self::with_support(c, phi, xstar, Support::Symmetric)
    }

    pub fn one_sided(c: f64, phi: f64, xstar: f64) -> Result<Self> {
        Self::with_support(c, phi, xstar, Support::Positive)
    }

    pub fn with_support(c: f64, phi: f64, xstar: f64, support: Support) -> Result<Self> {
        if !(c.is_finite() && c > 0.0) {
            return Err(config(format!("stable intensity c must be positive, got {c}")));
        }
        if !(phi > 0.0 && phi < 2.0) {
            return Err(config(format!("stability index phi must lie in (0, 2), got {phi}")));
        }
        if !(xstar.is_finite() && xstar > 0.0) {
            return Err(config(format!("truncation radius x* must be positive, got {xstar}")));
        }
        Ok(StableMeasure { c, phi, xstar, support })
    }

    pub fn c(&self) -> f64 {
        self.c
    }

    pub fn phi(&self) -> f64 {
        self.phi
    }

    pub fn xstar(&self) -> f64 {
        self.xstar
    }

    pub fn support(&self) -> Support {
        self.support
    }

    /// Number of half-lines carrying mass.
    fn sides(&self) -> f64 {
        match self.support {
            Support::Symmetric => 2.0,
            Support::Positive => 1.0,
        }
    }

    fn check_ball(&self, delta: f64, allow_zero: bool) -> Result<()> {
        let lower_ok = if allow_zero { delta >= 0.0 } else { delta > 0.0 };
        if lower_ok && delta <= self.xstar {
            Ok(())
        } else {
            Err(domain(format!(
                "radius {delta} outside {}0, {}]",
                if allow_zero { "[" } else { "(" },
                self.xstar
            )))
        }
    }
}

impl LevyMeasure for StableMeasure {
    type Jumps = StableJumps;

    fn truncation(&self) -> f64 {
        self.xstar
    }

    fn tail_mass(&self, delta: f64) -> Result<f64> {
        self.check_ball(delta, false)?;
        let phi = self.phi;
        Ok(self.sides() * self.c * (delta.powf(-phi) - self.xstar.powf(-phi)) / phi)
    }

    fn first_moment_outside(&self, delta: f64) -> Result<f64> {
        self.check_ball(delta, false)?;
        match self.support {
            Support::Symmetric => Ok(0.0),
            Support::Positive => {
                let p = 1.0 - self.phi;
                if p.abs() < 1e-14 {
                    Ok(self.c * (self.xstar / delta).ln())
                } else {
                    Ok(self.c * (self.xstar.powf(p) - delta.powf(p)) / p)
                }
            }
        }
    }

    fn second_moment_inside(&self, delta: f64) -> Result<f64> {
        self.check_ball(delta, true)?;
        let p = 2.0 - self.phi;
        Ok(self.sides() * self.c / p * delta.powf(p))
    }

    fn second_moment_outside(&self, delta: f64) -> Result<f64> {
        self.check_ball(delta, true)?;
        let p = 2.0 - self.phi;
        Ok(self.sides() * self.c / p * (self.xstar.powf(p) - delta.powf(p)))
    }

    fn jump_threshold(&self, h: f64) -> Result<f64> {
        if !(h.is_finite() && h > 0.0) {
            return Err(domain(format!("step size must be positive, got {h}")));
        }
        let phi = self.phi;
        let base = phi / (self.sides() * self.c * h) + self.xstar.powf(-phi);
        Ok(base.powf(-1.0 / phi))
    }

    fn jump_law(&self, delta: f64) -> Result<StableJumps> {
        if !(delta > 0.0 && delta < self.xstar) {
            return Err(domain(format!(
                "no jumps to sample: threshold {delta} must lie in (0, {})",
                self.xstar
            )));
        }
        let phi = self.phi;
        let lo = delta.powf(-phi);
        let inv_phi = 1.0 / phi;
        let int_pow = (inv_phi.fract() == 0.0 && inv_phi <= 8.0).then_some(inv_phi as i32);
        Ok(StableJumps {
            lo,
            span: lo - self.xstar.powf(-phi),
            inv_phi,
            int_pow,
            positive: match self.support {
                Support::Symmetric => 0.5,
                Support::Positive => 1.0,
            },
        })
    }
}

/// Closed-form inverse-CDF sampler for retained stable jumps.
///
/// `|x| = (delta^-phi - u (delta^-phi - x*^-phi))^(-1/phi)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StableJumps {
    lo: f64,
    span: f64,
    inv_phi: f64,
    int_pow: Option<i32>,
    positive: f64,
}

impl JumpLaw for StableJumps {
    #[inline]
    fn magnitude(&self, u: f64) -> f64 {
        let base = self.lo - u * self.span;
        match self.int_pow {
            Some(k) => base.powi(-k),
            None => base.powf(-self.inv_phi),
        }
    }

    fn positive_fraction(&self) -> f64 {
        self.positive
    }

    #[inline]
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        // One 64-bit draw: 53 bits for the magnitude, one for the sign.
        let bits: u64 = rng.random();
        let u = (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        let r = self.magnitude(u);
        let negative = if self.positive >= 1.0 {
            false
        } else {
            bits & 1 == 1
        };
        if negative {
            -r
        } else {
            r
        }
    }
}

/// Jump law for measures that only provide [`LevyMeasure::tail_mass`]:
/// the magnitude quantile is found by bisection on the tail.
#[derive(Clone, Debug)]
pub struct BisectionJumps<M> {
    measure: M,
    delta: f64,
    tail: f64,
    positive: f64,
}

impl<M: LevyMeasure> BisectionJumps<M> {
    pub fn new(measure: M, delta: f64, positive_fraction: f64) -> Result<Self> {
        if !(delta > 0.0 && delta < measure.truncation()) {
            return Err(domain(format!(
                "no jumps to sample: threshold {delta} must lie in (0, {})",
                measure.truncation()
            )));
        }
        let tail = measure.tail_mass(delta)?;
        Ok(BisectionJumps {
            measure,
            delta,
            tail,
            positive: positive_fraction,
        })
    }
}

impl<M: LevyMeasure> JumpLaw for BisectionJumps<M> {
    fn magnitude(&self, u: f64) -> f64 {
        // Solve tail_mass(r) = (1 - u) * tail_mass(delta) on [delta, x*].
        let target = (1.0 - u) * self.tail;
        let (mut lo, mut hi) = (self.delta, self.measure.truncation());
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            match self.measure.tail_mass(mid) {
                Ok(t) if t > target => lo = mid,
                _ => hi = mid,
            }
        }
        0.5 * (lo + hi)
    }

    fn positive_fraction(&self) -> f64 {
        self.positive
    }
}

/// Solves `tail_mass(delta) = 1/h` by bisection on `(0, x*]`, iterating to
/// floating-point resolution.
pub fn threshold_by_bisection<M: LevyMeasure>(measure: &M, h: f64) -> Result<f64> {
    if !(h.is_finite() && h > 0.0) {
        return Err(domain(format!("step size must be positive, got {h}")));
    }
    let target = 1.0 / h;
    let xstar = measure.truncation();
    let mut hi = xstar;
    let mut lo = xstar;
    // Walk down until the tail exceeds the target; infinite activity guarantees this.
    loop {
        lo *= 0.5;
        if lo < f64::MIN_POSITIVE {
            return Err(domain(format!(
                "tail mass never reaches {target}; measure must have infinite activity"
            )));
        }
        if measure.tail_mass(lo)? > target {
            break;
        }
        hi = lo;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if measure.tail_mass(mid)? > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Free-function form of [`LevyMeasure::tail_mass`].
pub fn tail_mass<M: LevyMeasure>(measure: &M, delta: f64) -> Result<f64> {
    measure.tail_mass(delta)
}

pub fn jump_threshold<M: LevyMeasure>(measure: &M, h: f64) -> Result<f64> {
    measure.jump_threshold(h)
}

pub fn small_jump_variance<M: LevyMeasure>(measure: &M, delta: f64) -> Result<f64> {
    measure.second_moment_inside(delta)
}

pub fn drift_compensator<M: LevyMeasure>(measure: &M, delta: f64) -> Result<f64> {
    measure.first_moment_outside(delta)
}

pub fn sample_jump<M: LevyMeasure, R: Rng + ?Sized>(
    measure: &M,
    delta: f64,
    rng: &mut R,
) -> Result<f64> {
    Ok(measure.jump_law(delta)?.sample(rng))
}

/// Lévy triplet: jump measure, Brownian variance `sigma` and drift `b`.
#[derive(Clone, Debug, PartialEq)]
pub struct LevyModel<M = StableMeasure> {
    pub measure: M,
    pub sigma: f64,
    pub drift: f64,
}

impl<M: LevyMeasure> LevyModel<M> {
    pub fn new(measure: M, sigma: f64, drift: f64) -> Result<Self> {
        if !(sigma.is_finite() && sigma >= 0.0) {
            return Err(config(format!("diffusion coefficient must be finite and >= 0, got {sigma}")));
        }
        if !drift.is_finite() {
            return Err(config(format!("drift must be finite, got {drift}")));
        }
        Ok(LevyModel { measure, sigma, drift })
    }

    /// Pure-jump model with no Brownian part and no drift.
    pub fn pure_jump(measure: M) -> Self {
        LevyModel { measure, sigma: 0.0, drift: 0.0 }
    }

    pub fn level(&self, level: u32, s0: u32) -> Result<LevelParams> {
        LevelParams::new(&self.measure, level, s0)
    }
}

/// Discretization data for one level.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LevelParams {
    pub level: u32,
    /// Step size `h = S0^-level`.
    pub h: f64,
    /// Jumps smaller than this are dropped.
    pub delta: f64,
    /// Arrival rate of retained jumps; equals `1/h`.
    pub lambda: f64,
    /// Compensator of the retained jumps.
    pub f0: f64,
}

impl LevelParams {
    pub fn new<M: LevyMeasure>(measure: &M, level: u32, s0: u32) -> Result<Self> {
        if s0 < 2 {
            return Err(config(format!("mesh ratio S0 must be an integer >= 2, got {s0}")));
        }
        let h = (s0 as f64).powi(-(level as i32));
        Self::with_step(measure, level, h)
    }

    pub fn with_step<M: LevyMeasure>(measure: &M, level: u32, h: f64) -> Result<Self> {
        let delta = measure.jump_threshold(h)?;
        let lambda = 1.0 / h;
        if !(delta > 0.0 && delta < measure.truncation()) {
            return Err(domain(format!(
                "jump threshold {delta} for h = {h} falls outside (0, {})",
                measure.truncation()
            )));
        }
        let tail = measure.tail_mass(delta)?;
        if ((tail - lambda) / lambda).abs() > 1e-10 {
            return Err(domain(format!(
                "jump threshold {delta} gives rate {tail}, expected {lambda}"
            )));
        }
        let f0 = measure.first_moment_outside(delta)?;
        Ok(LevelParams { level, h, delta, lambda, f0 })
    }
}
