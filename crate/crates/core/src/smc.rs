//! Bootstrap particle filter with ESS-triggered multinomial resampling.

use std::fmt;
use std::sync::Arc;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rayon::prelude::*;

use crate::bench::CostCounter;
use crate::discretize::Transition;
use crate::error::{config, Error};
use crate::rng::{tag, SimRng, StreamKey};
use crate::Result;

/// Rayon work granule for per-particle loops.
pub(crate) const PAR_CHUNK: usize = 256;

/// Potential `G_k` of a Feynman–Kac model, evaluated at the state `y`
/// reached at step `k >= 1` from the state `prev` at step `k - 1`.
pub trait Potential: Send + Sync {
    fn eval(&self, k: usize, prev: f64, y: f64) -> f64;
}

impl<F> Potential for F
where
    F: Fn(usize, f64, f64) -> f64 + Send + Sync,
{
    fn eval(&self, k: usize, prev: f64, y: f64) -> f64 {
        self(k, prev, y)
    }
}

/// `G ≡ 1`.
#[derive(Clone, Copy, Debug, Default)]
pub struct UnitPotential;

impl Potential for UnitPotential {
    fn eval(&self, _: usize, _: f64, _: f64) -> f64 {
        1.0
    }
}

/// A function whose filtering expectation is tracked.
#[derive(Clone)]
pub struct TestFunction {
    pub name: String,
    f: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    /// Unbounded functions fall outside the convergence theory; reports flag them.
    pub bounded: bool,
}

impl TestFunction {
    pub fn new(name: impl Into<String>, bounded: bool, f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        TestFunction { name: name.into(), f: Arc::new(f), bounded }
    }

    pub fn one() -> Self {
        Self::new("one", true, |_| 1.0)
    }

    pub fn identity() -> Self {
        Self::new("y", false, |y| y)
    }

    #[inline]
    pub fn eval(&self, y: f64) -> f64 {
        (self.f)(y)
    }
}

impl fmt::Debug for TestFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TestFunction").field("name", &self.name).field("bounded", &self.bounded).finish()
    }
}

/// `(sum w^2)^-1` for normalized weights.
pub fn ess(weights: &[f64]) -> f64 {
    1.0 / weights.iter().map(|w| w * w).sum::<f64>()
}

/// Weighted particle population.
#[derive(Clone, Debug, PartialEq)]
pub struct Ensemble {
    pub states: Vec<f64>,
    pub weights: Vec<f64>,
    /// Current step `k`.
    pub time: usize,
    /// Accumulated log normalizing-constant estimate.
    pub log_nc: f64,
}

impl Ensemble {
    pub fn uniform(states: Vec<f64>) -> Self {
        let n = states.len();
        Ensemble { weights: vec![1.0 / n as f64; n], states, time: 0, log_nc: 0.0 }
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn ess(&self) -> f64 {
        ess(&self.weights)
    }

    /// Self-normalized estimate `sum_i w_i f(y_i)`.
    pub fn estimate(&self, f: &TestFunction) -> f64 {
        weighted_sum(&self.states, &self.weights, f)
    }

    /// Unnormalized estimate `exp(log_nc) * sum_i w_i f(y_i)`.
    pub fn nc_estimate(&self, f: &TestFunction) -> f64 {
        self.log_nc.exp() * self.estimate(f)
    }

    /// Multiplies the weights by the potential values `g` and renormalizes;
    /// the log normalizing constant grows by `log sum_i w_i g_i`.
    pub fn reweight(&mut self, g: &[f64]) -> Result<()> {
        let step = self.time;
        let total = reweight_in_place(&mut self.weights, g).ok_or(Error::Degeneracy { step, branch: None })?;
        self.log_nc += total.ln();
        Ok(())
    }
}

/// `sum_i w_i f(y_i)` over particles with positive weight, so that a
/// zero-weight particle never turns an overflowing `f` into NaN.
pub(crate) fn weighted_sum(states: &[f64], weights: &[f64], f: &TestFunction) -> f64 {
    states.iter().zip(weights).filter(|(_, w)| **w > 0.0).map(|(y, w)| w * f.eval(*y)).sum()
}

/// Returns the pre-normalization total, or `None` when it is zero or not finite.
pub(crate) fn reweight_in_place(weights: &mut [f64], g: &[f64]) -> Option<f64> {
    assert_eq!(weights.len(), g.len());
    let mut total = 0.0;
    for (w, gi) in weights.iter_mut().zip(g) {
        *w *= gi;
        total += *w;
    }
    if !(total > 0.0 && total.is_finite()) {
        return None;
    }
    let inv = 1.0 / total;
    weights.iter_mut().for_each(|w| *w *= inv);
    Some(total)
}

/// Free-function form of [`Ensemble::reweight`].
pub fn reweight(mut ens: Ensemble, g: &[f64]) -> Result<Ensemble> {
    ens.reweight(g)?;
    Ok(ens)
}

/// `n` i.i.d. categorical draws from `weights`.
pub fn multinomial_indices(weights: &[f64], n: usize, rng: &mut SimRng) -> Vec<usize> {
    let dist = WeightedIndex::new(weights).expect("resampling weights must be normalized and nonnegative");
    (0..n).map(|_| dist.sample(rng)).collect()
}

/// Multinomial resampling; weights reset to `1/N`, `log_nc` unchanged.
pub fn multinomial_resample(ens: &Ensemble, rng: &mut SimRng) -> Ensemble {
    let idx = multinomial_indices(&ens.weights, ens.len(), rng);
    Ensemble {
        states: idx.iter().map(|&i| ens.states[i]).collect(),
        weights: vec![1.0 / ens.len() as f64; ens.len()],
        time: ens.time,
        log_nc: ens.log_nc,
    }
}

/// Feynman–Kac model: initial state, unit-time kernel, potentials `G_1..G_n`.
pub struct FeynmanKacModel<'a, K: ?Sized, P: ?Sized> {
    pub kernel: &'a K,
    pub potential: &'a P,
    pub horizon: usize,
    pub y0: f64,
}

impl<K: ?Sized, P: ?Sized> Clone for FeynmanKacModel<'_, K, P> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<K: ?Sized, P: ?Sized> Copy for FeynmanKacModel<'_, K, P> {}

/// Filter-level diagnostics and estimates after reweighting at one step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepSummary {
    pub step: usize,
    pub ess: f64,
    pub resampled: bool,
    /// `log sum_i w_{k-1} G_k` at this step.
    pub log_increment: f64,
    /// Accumulated log normalizing constant up to this step.
    pub log_nc: f64,
    /// Self-normalized estimate per registered test function.
    pub estimates: Vec<f64>,
}

/// Output of a single-level particle filter run.
#[derive(Clone, Debug)]
pub struct PfReport {
    pub level: u32,
    pub particles: usize,
    pub threshold: f64,
    pub test_names: Vec<String>,
    /// Names of registered functions that are unbounded.
    pub unbounded: Vec<String>,
    pub steps: Vec<StepSummary>,
    pub cost: CostCounter,
    /// Smallest and largest potential value seen over all particles and steps.
    pub potential_range: (f64, f64),
    pub final_ensemble: Ensemble,
}

impl PfReport {
    pub fn last(&self) -> &StepSummary {
        self.steps.last().expect("a filter run has at least one step")
    }

    pub fn estimate(&self, f: usize) -> f64 {
        self.last().estimates[f]
    }

    pub fn log_nc(&self) -> f64 {
        self.last().log_nc
    }

    /// `zeta_n(f) = exp(log_nc) * sum_i w_n f`.
    pub fn nc_estimate(&self, f: usize) -> f64 {
        self.log_nc().exp() * self.estimate(f)
    }
}

pub(crate) fn propagate_all<K: Transition + ?Sized>(kernel: &K, states: &mut [f64], key: StreamKey) -> u64 {
    states
        .par_iter_mut()
        .with_min_len(PAR_CHUNK)
        .enumerate()
        .map(|(i, y)| {
            let mut rng = key.child(i as u64).rng();
            let (next, steps) = kernel.propagate(*y, &mut rng);
            *y = next;
            steps
        })
        .sum()
}

pub(crate) fn potential_values<P: Potential + ?Sized>(potential: &P, k: usize, prev: &[f64], states: &[f64]) -> Vec<f64> {
    prev.par_iter()
        .with_min_len(PAR_CHUNK)
        .zip(states.par_iter())
        .map(|(p, y)| potential.eval(k, *p, *y))
        .collect()
}

pub(crate) fn check_threshold(threshold: f64) -> Result<()> {
    if threshold > 0.0 && threshold <= 1.0 {
        Ok(())
    } else {
        Err(config(format!("resampling threshold H must lie in (0, 1], got {threshold}")))
    }
}

pub(crate) fn range_of(values: &[f64], acc: &mut (f64, f64)) {
    for &v in values {
        acc.0 = acc.0.min(v);
        acc.1 = acc.1.max(v);
    }
}

/// Runs the particle filter with `particles` particles and resampling threshold `threshold`.
pub fn run_pf<K, P>(
    model: FeynmanKacModel<'_, K, P>,
    particles: usize,
    threshold: f64,
    tests: &[TestFunction],
    key: StreamKey,
) -> Result<PfReport>
where
    K: Transition + ?Sized,
    P: Potential + ?Sized,
{
    if particles < 2 {
        return Err(config(format!("a particle filter needs at least 2 particles, got {particles}")));
    }
    if model.horizon == 0 {
        return Err(config("filter horizon must be at least 1"));
    }
    check_threshold(threshold)?;
    let start = std::time::Instant::now();
    let prop_key = key.child(tag::PROPAGATE);
    let res_key = key.child(tag::RESAMPLE);

    let mut ens = Ensemble::uniform(vec![model.y0; particles]);
    let mut prev = ens.states.clone();
    let mut cost = CostCounter::default();
    let mut steps = Vec::with_capacity(model.horizon);
    let mut range = (f64::INFINITY, f64::NEG_INFINITY);

    for k in 1..=model.horizon {
        prev.copy_from_slice(&ens.states);
        cost.euler_steps += propagate_all(model.kernel, &mut ens.states, prop_key.child(k as u64));
        cost.kernel_draws += particles as u64;
        ens.time = k;

        let g = potential_values(model.potential, k, &prev, &ens.states);
        range_of(&g, &mut range);
        let before = ens.log_nc;
        ens.reweight(&g)?;
        let ess_k = ens.ess();
        let estimates = tests.iter().map(|f| ens.estimate(f)).collect();
        let resampled = ess_k / (particles as f64) < threshold;
        if resampled {
            ens = multinomial_resample(&ens, &mut res_key.child(k as u64).rng());
        }
        steps.push(StepSummary {
            step: k,
            ess: ess_k,
            resampled,
            log_increment: ens.log_nc - before,
            log_nc: ens.log_nc,
            estimates,
        });
    }
    cost.wall_time += start.elapsed().as_secs_f64();

    Ok(PfReport {
        level: model.kernel.level(),
        particles,
        threshold,
        test_names: tests.iter().map(|f| f.name.clone()).collect(),
        unbounded: tests.iter().filter(|f| !f.bounded).map(|f| f.name.clone()).collect(),
        steps,
        cost,
        potential_range: range,
        final_ensemble: ens,
    })
}
