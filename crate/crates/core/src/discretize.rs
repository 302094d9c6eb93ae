//! Single-level discretization of the Lévy-driven SDE over one unit of time.
//!
//! Retained jumps arrive as a Poisson process with rate `1/h`; the arrival
//! grid is then refined so that no gap exceeds `h`. The Euler recursion runs
//! over the refined grid. [`LevelKernel`] is the resulting unit-time
//! transition kernel.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::levy_measure::{JumpLaw, LevelParams, LevyMeasure, LevyModel};
use crate::rng::SimRng;
use crate::Result;

/// Grid points closer to the horizon than this are snapped onto it.
pub(crate) const TIME_EPS: f64 = 1e-12;

/// Coefficient function `a(y)` multiplying the driving noise.
#[derive(Clone)]
pub enum Coefficient {
    Zero,
    Constant(f64),
    /// `a(y) = k * y`.
    Linear(f64),
    Custom(Arc<dyn Fn(f64) -> f64 + Send + Sync>),
}

impl Coefficient {
    #[inline]
    pub fn eval(&self, y: f64) -> f64 {
        match self {
            Coefficient::Zero => 0.0,
            Coefficient::Constant(k) => *k,
            Coefficient::Linear(k) => k * y,
            Coefficient::Custom(f) => f(y),
        }
    }
}

impl fmt::Debug for Coefficient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Coefficient::Zero => f.write_str("Zero"),
            Coefficient::Constant(k) => write!(f, "Constant({k})"),
            Coefficient::Linear(k) => write!(f, "Linear({k})"),
            Coefficient::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

/// `dY = a(Y-) dX`, `Y_0 = y0`.
#[derive(Clone, Debug)]
pub struct SdeSpec {
    pub coeff: Coefficient,
    pub y0: f64,
}

impl SdeSpec {
    pub fn new(coeff: Coefficient, y0: f64) -> Self {
        SdeSpec { coeff, y0 }
    }

    /// `a(y) = y`, the geometric model.
    pub fn geometric(y0: f64) -> Self {
        SdeSpec { coeff: Coefficient::Linear(1.0), y0 }
    }
}

/// Refined time grid on `(0, 1]` with the jump carried at each point.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct JumpSkeleton {
    pub times: Vec<f64>,
    pub heights: Vec<f64>,
}

impl JumpSkeleton {
    /// Number of grid points `k`.
    pub fn k(&self) -> usize {
        self.times.len()
    }

    pub fn jumps(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.times
            .iter()
            .zip(&self.heights)
            .filter(|(_, h)| **h != 0.0)
            .map(|(t, h)| (*t, *h))
    }

    pub fn max_gap(&self) -> f64 {
        let mut prev = 0.0;
        let mut gap: f64 = 0.0;
        for &t in &self.times {
            gap = gap.max(t - prev);
            prev = t;
        }
        gap
    }

    fn push(&mut self, t: f64, dl: f64) {
        self.times.push(t);
        self.heights.push(dl);
    }
}

#[inline]
pub(crate) fn exp_waiting_time(rate: f64, rng: &mut SimRng) -> f64 {
    // 1 - U lies in (0, 1], so the log is finite.
    -(1.0 - rng.random::<f64>()).ln() / rate
}

/// Lazily generates a level skeleton: arrivals and their heights are drawn as
/// the walk reaches them, refinement points are inserted on the fly.
pub(crate) struct SkeletonWalker {
    h: f64,
    rate: f64,
    t: f64,
    next_arrival: f64,
    done: bool,
}

impl SkeletonWalker {
    pub(crate) fn new(h: f64, rate: f64, rng: &mut SimRng) -> Self {
        let next_arrival = exp_waiting_time(rate, rng);
        SkeletonWalker { h, rate, t: 0.0, next_arrival, done: false }
    }

    /// Next grid point and the jump it carries.
    #[inline]
    pub(crate) fn next<J: JumpLaw>(&mut self, jumps: &J, rng: &mut SimRng) -> Option<(f64, f64)> {
        if self.done {
            return None;
        }
        let cand = self.t + self.h;
        if self.next_arrival < 1.0 && self.next_arrival <= cand {
            self.t = self.next_arrival;
            let dl = jumps.sample(rng);
            self.next_arrival = self.t + exp_waiting_time(self.rate, rng);
            return Some((self.t, dl));
        }
        if cand >= 1.0 - TIME_EPS {
            self.t = 1.0;
            self.done = true;
            return Some((1.0, 0.0));
        }
        self.t = cand;
        Some((cand, 0.0))
    }
}

/// Refinement of a sorted list of jump arrivals on `(0, 1)`: grid points are
/// `min(previous + h, next arrival)` until the horizon is reached.
pub fn refine_jump_times(arrivals: &[(f64, f64)], h: f64) -> JumpSkeleton {
    let mut skel = JumpSkeleton::default();
    let mut t = 0.0;
    let mut next = arrivals.iter().copied().filter(|(s, _)| *s < 1.0).peekable();
    loop {
        let cand = t + h;
        match next.peek() {
            Some(&(s, dl)) if s <= cand => {
                skel.push(s, dl);
                t = s;
                next.next();
            }
            _ if cand >= 1.0 - TIME_EPS => {
                skel.push(1.0, 0.0);
                return skel;
            }
            _ => {
                skel.push(cand, 0.0);
                t = cand;
            }
        }
    }
}

/// `y + a(y) (sqrt(Sigma) dW + dL + (b - F0) dt)`.
pub fn euler_step<M>(
    y: f64,
    dw: f64,
    dl: f64,
    dt: f64,
    lp: &LevelParams,
    model: &LevyModel<M>,
    spec: &SdeSpec,
) -> f64 {
    y + spec.coeff.eval(y) * (model.sigma.sqrt() * dw + dl + (model.drift - lp.f0) * dt)
}

/// A unit-time Markov transition with a cost count.
pub trait Transition: Send + Sync {
    fn level(&self) -> u32;

    /// Advances `y` by one unit of time; returns the new state and the number
    /// of Euler sub-steps used.
    fn propagate(&self, y: f64, rng: &mut SimRng) -> (f64, u64);
}

/// The level-`l` kernel `Q^l`, with every per-level constant precomputed.
#[derive(Clone, Debug)]
pub struct LevelKernel<J> {
    pub(crate) lp: LevelParams,
    pub(crate) jumps: J,
    pub(crate) coeff: Coefficient,
    pub(crate) sqrt_sigma: f64,
    /// `b - F0`.
    pub(crate) drift: f64,
}

impl<J: JumpLaw> LevelKernel<J> {
    pub fn params(&self) -> &LevelParams {
        &self.lp
    }

    #[inline]
    fn increment(&self, y: f64, dw: f64, dl: f64, dt: f64) -> f64 {
        y + self.coeff.eval(y) * (self.sqrt_sigma * dw + dl + self.drift * dt)
    }

    /// Runs the recursion along a given skeleton. `dw` holds standard Brownian
    /// increments per sub-interval; `None` means a zero Brownian path.
    pub fn propagate_along(&self, mut y: f64, skel: &JumpSkeleton, dw: Option<&[f64]>) -> f64 {
        let mut prev = 0.0;
        for (i, (&t, &dl)) in skel.times.iter().zip(&skel.heights).enumerate() {
            let w = dw.map_or(0.0, |w| w[i]);
            y = self.increment(y, w, dl, t - prev);
            prev = t;
        }
        y
    }

    pub fn skeleton(&self, rng: &mut SimRng) -> JumpSkeleton {
        let mut walker = SkeletonWalker::new(self.lp.h, self.lp.lambda, rng);
        let mut skel = JumpSkeleton::default();
        while let Some((t, dl)) = walker.next(&self.jumps, rng) {
            skel.push(t, dl);
        }
        skel
    }
}

impl<M: LevyMeasure> LevyModel<M> {
    pub fn kernel(&self, lp: LevelParams, coeff: Coefficient) -> Result<LevelKernel<M::Jumps>> {
        Ok(LevelKernel {
            jumps: self.measure.jump_law(lp.delta)?,
            coeff,
            sqrt_sigma: self.sigma.sqrt(),
            drift: self.drift - lp.f0,
            lp,
        })
    }
}

impl<J: JumpLaw> Transition for LevelKernel<J> {
    fn level(&self) -> u32 {
        self.lp.level
    }

    #[inline]
    fn propagate(&self, mut y: f64, rng: &mut SimRng) -> (f64, u64) {
        let mut walker = SkeletonWalker::new(self.lp.h, self.lp.lambda, rng);
        let mut prev = 0.0;
        let mut steps = 0u64;
        while let Some((t, dl)) = walker.next(&self.jumps, rng) {
            let dt = t - prev;
            let dw = if self.sqrt_sigma > 0.0 {
                dt.sqrt() * rng.sample::<f64, _>(StandardNormal)
            } else {
                0.0
            };
            y = self.increment(y, dw, dl, dt);
            prev = t;
            steps += 1;
        }
        (y, steps)
    }
}

/// Draws one level skeleton.
pub fn generate_skeleton<M: LevyMeasure>(
    lp: &LevelParams,
    model: &LevyModel<M>,
    rng: &mut SimRng,
) -> Result<JumpSkeleton> {
    Ok(model.kernel(*lp, Coefficient::Zero)?.skeleton(rng))
}

/// One draw from `Q^l(y0, .)`.
pub fn propagate_q<M: LevyMeasure>(
    y0: f64,
    lp: &LevelParams,
    model: &LevyModel<M>,
    spec: &SdeSpec,
    rng: &mut SimRng,
) -> Result<f64> {
    Ok(model.kernel(*lp, spec.coeff.clone())?.propagate(y0, rng).0)
}
