//! Multilevel particle filter.
//!
//! Level 0 is a plain particle filter. Each level `l >= 1` runs a coupled
//! filter whose pairs move under `M^l` and are resampled jointly by a
//! maximal-coupling mixture; the level estimates then telescope.

use std::fmt;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rayon::prelude::*;

use crate::bench::CostCounter;
use crate::couple::CoupledTransition;
use crate::discretize::Coefficient;
use crate::error::{config, Branch, Error};
use crate::levy_measure::{LevyMeasure, LevyModel};
use crate::rng::{tag, SimRng, StreamKey};
use crate::smc::{self, check_threshold, range_of, reweight_in_place, FeynmanKacModel, PfReport, Potential, TestFunction, PAR_CHUNK};
use crate::Result;

/// Mixture mass at or above which the residual branch is never taken.
pub const COMMON_MASS_EPS: f64 = 1e-12;

/// Rate exponents, accuracy target and proportionality constants for allocation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MlConfig {
    pub epsilon: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub s0: u32,
    pub c_level: f64,
    pub c_samples: f64,
}

impl Default for MlConfig {
    fn default() -> Self {
        MlConfig { epsilon: 0.1, alpha: 1.5, beta: 3.0, gamma: 1.0, s0: 2, c_level: 1.0, c_samples: 1.0 }
    }
}

impl MlConfig {
    pub fn with_epsilon(epsilon: f64) -> Self {
        MlConfig { epsilon, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(config(format!("epsilon must be positive and finite, got {}", self.epsilon)));
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("c_level", self.c_level), ("c_samples", self.c_samples)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.s0 < 2 {
            return Err(config(format!("s0 must be an integer >= 2, got {}", self.s0)));
        }
        Ok(())
    }

    pub fn h(&self, l: u32) -> f64 {
        (self.s0 as f64).powi(-(l as i32))
    }

    /// `L = ceil(c_level * (-ln eps) / (alpha ln s0))`, never negative.
    pub fn max_level(&self) -> u32 {
        let raw = self.c_level * (-self.epsilon.ln()) / (self.alpha * (self.s0 as f64).ln());
        (raw - 1e-9).ceil().max(0.0) as u32
    }

    pub fn cost_case(&self) -> CostCase {
        let d = self.beta - 2.0 * self.gamma;
        if d.abs() < 1e-12 {
            CostCase::BetaEqualsTwoGamma
        } else if d > 0.0 {
            CostCase::BetaAboveTwoGamma
        } else {
            CostCase::BetaBelowTwoGamma
        }
    }
}

/// The three MLPF cost regimes, by comparing `beta` with `2 gamma`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CostCase {
    BetaAboveTwoGamma,
    BetaEqualsTwoGamma,
    BetaBelowTwoGamma,
}

impl fmt::Display for CostCase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CostCase::BetaAboveTwoGamma => "beta>2gamma",
            CostCase::BetaEqualsTwoGamma => "beta=2gamma",
            CostCase::BetaBelowTwoGamma => "beta<2gamma",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Allocation {
    pub max_level: u32,
    /// `N_0..N_L`.
    pub particles: Vec<usize>,
    pub k_factor: f64,
    pub cost_case: CostCase,
    pub warnings: Vec<String>,
}

/// Finest level and per-level sample sizes for a target accuracy.
pub fn allocate_levels(cfg: &MlConfig) -> Result<Allocation> {
    cfg.validate()?;
    let mut warnings = Vec::new();
    if cfg.epsilon >= 1.0 {
        warnings.push(format!("epsilon = {} >= 1: the finest level may be 0", cfg.epsilon));
    }
    let big_l = cfg.max_level();
    let k_factor = if (cfg.beta - cfg.gamma).abs() < 1e-12 {
        big_l.max(1) as f64
    } else if cfg.beta > cfg.gamma {
        1.0
    } else {
        cfg.h(big_l).powf((cfg.beta - cfg.gamma) / 2.0)
    };
    let scale = cfg.c_samples * cfg.epsilon.powi(-2) * k_factor;
    let particles = (0..=big_l)
        .map(|l| {
            let n = scale * cfg.h(l).powf((cfg.beta + cfg.gamma) / 2.0);
            ((n - 1e-9).ceil() as usize).max(2)
        })
        .collect();
    Ok(Allocation { max_level: big_l, particles, k_factor, cost_case: cfg.cost_case(), warnings })
}

/// Single-level filter at the same finest level with `N = ceil(c_samples eps^-2)`.
pub fn allocate_single_level(cfg: &MlConfig) -> Result<(u32, usize)> {
    cfg.validate()?;
    let n = cfg.c_samples * cfg.epsilon.powi(-2);
    Ok((cfg.max_level(), ((n - 1e-9).ceil() as usize).max(2)))
}

/// Pairs of fine and coarse particles with independently normalized weights.
#[derive(Clone, Debug, PartialEq)]
pub struct CoupledEnsemble {
    pub fine_states: Vec<f64>,
    pub coarse_states: Vec<f64>,
    pub fine_weights: Vec<f64>,
    pub coarse_weights: Vec<f64>,
    pub level: u32,
    pub time: usize,
    pub fine_log_nc: f64,
    pub coarse_log_nc: f64,
}

impl CoupledEnsemble {
    pub fn uniform(level: u32, fine: Vec<f64>, coarse: Vec<f64>) -> Self {
        assert_eq!(fine.len(), coarse.len());
        let w = vec![1.0 / fine.len() as f64; fine.len()];
        CoupledEnsemble {
            fine_states: fine,
            coarse_states: coarse,
            fine_weights: w.clone(),
            coarse_weights: w,
            level,
            time: 0,
            fine_log_nc: 0.0,
            coarse_log_nc: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.fine_states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fine_states.is_empty()
    }

    /// Minimum of the two branch effective sample sizes.
    pub fn ess(&self) -> f64 {
        smc::ess(&self.fine_weights).min(smc::ess(&self.coarse_weights))
    }

    pub fn fine_estimate(&self, f: &TestFunction) -> f64 {
        smc::weighted_sum(&self.fine_states, &self.fine_weights, f)
    }

    pub fn coarse_estimate(&self, f: &TestFunction) -> f64 {
        smc::weighted_sum(&self.coarse_states, &self.coarse_weights, f)
    }

    /// Reweights both branches independently with their own potential values.
    pub fn reweight(&mut self, g_fine: &[f64], g_coarse: &[f64]) -> Result<()> {
        let step = self.time;
        let tf = reweight_in_place(&mut self.fine_weights, g_fine)
            .ok_or(Error::Degeneracy { step, branch: Some(Branch::Fine) })?;
        let tc = reweight_in_place(&mut self.coarse_weights, g_coarse)
            .ok_or(Error::Degeneracy { step, branch: Some(Branch::Coarse) })?;
        self.fine_log_nc += tf.ln();
        self.coarse_log_nc += tc.ln();
        Ok(())
    }
}

/// Free-function form of [`CoupledEnsemble::reweight`].
pub fn coupled_reweight(mut ce: CoupledEnsemble, g_fine: &[f64], g_coarse: &[f64]) -> Result<CoupledEnsemble> {
    ce.reweight(g_fine, g_coarse)?;
    Ok(ce)
}

/// Decomposition `w = min(w_f, w_c) + residual` of two weight vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct Mixture {
    pub common: Vec<f64>,
    /// `sum_i min(w_f, w_c)`, clamped to `[0, 1]`.
    pub mass: f64,
    /// Unnormalized residuals, each summing to `1 - mass`.
    pub fine_residual: Vec<f64>,
    pub coarse_residual: Vec<f64>,
}

impl Mixture {
    pub fn new(wf: &[f64], wc: &[f64]) -> Self {
        assert_eq!(wf.len(), wc.len());
        let common: Vec<f64> = wf.iter().zip(wc).map(|(a, b)| a.min(*b)).collect();
        let mass = common.iter().sum::<f64>().clamp(0.0, 1.0);
        let resid = |w: &[f64]| -> Vec<f64> { w.iter().zip(&common).map(|(a, m)| (a - m).max(0.0)).collect() };
        Mixture { fine_residual: resid(wf), coarse_residual: resid(wc), common, mass }
    }

    /// Draws `n` ancestor pairs from the coupling.
    pub fn sample(&self, n: usize, rng: &mut SimRng) -> Vec<(usize, usize)> {
        let always_common = self.mass >= 1.0 - COMMON_MASS_EPS;
        let common = (self.mass > 0.0).then(|| WeightedIndex::new(&self.common).expect("common weights"));
        let residual = (!always_common).then(|| {
            (
                WeightedIndex::new(&self.fine_residual).expect("fine residual weights"),
                WeightedIndex::new(&self.coarse_residual).expect("coarse residual weights"),
            )
        });
        (0..n)
            .map(|_| match (&common, &residual) {
                (Some(c), _) if always_common => {
                    let i = c.sample(rng);
                    (i, i)
                }
                (Some(c), Some(_)) if rng.random::<f64>() < self.mass => {
                    let i = c.sample(rng);
                    (i, i)
                }
                (_, Some((rf, rc))) => (rf.sample(rng), rc.sample(rng)),
                _ => unreachable!("mixture has neither a common nor a residual branch"),
            })
            .collect()
    }
}

/// Ancestor index pairs and the common mass used by one coupled resampling.
#[derive(Clone, Debug, PartialEq)]
pub struct CoupledDraw {
    pub ancestors: Vec<(usize, usize)>,
    pub common_mass: f64,
}

/// Coupled resampling; returns the resampled ensemble and the draw used.
pub fn coupled_resample(ce: &CoupledEnsemble, rng: &mut SimRng) -> (CoupledEnsemble, CoupledDraw) {
    let mix = Mixture::new(&ce.fine_weights, &ce.coarse_weights);
    let n = ce.len();
    let ancestors = mix.sample(n, rng);
    let w = vec![1.0 / n as f64; n];
    let out = CoupledEnsemble {
        fine_states: ancestors.iter().map(|&(i, _)| ce.fine_states[i]).collect(),
        coarse_states: ancestors.iter().map(|&(_, j)| ce.coarse_states[j]).collect(),
        fine_weights: w.clone(),
        coarse_weights: w,
        level: ce.level,
        time: ce.time,
        fine_log_nc: ce.fine_log_nc,
        coarse_log_nc: ce.coarse_log_nc,
    };
    (out, CoupledDraw { ancestors, common_mass: mix.mass })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoupledStep {
    pub step: usize,
    pub ess_fine: f64,
    pub ess_coarse: f64,
    pub resampled: bool,
    /// Common mass of the coupled resampling, when one happened.
    pub common_mass: Option<f64>,
    pub fine_log_nc: f64,
    pub coarse_log_nc: f64,
    pub fine_estimates: Vec<f64>,
    pub coarse_estimates: Vec<f64>,
}

/// Output of one coupled filter at level `l >= 1`.
#[derive(Clone, Debug)]
pub struct CoupledReport {
    pub level: u32,
    pub particles: usize,
    pub threshold: f64,
    pub test_names: Vec<String>,
    pub steps: Vec<CoupledStep>,
    pub cost: CostCounter,
    pub potential_range: (f64, f64),
    pub final_ensemble: CoupledEnsemble,
}

impl CoupledReport {
    pub fn last(&self) -> &CoupledStep {
        self.steps.last().expect("a filter run has at least one step")
    }
}

/// The coupled filter at level `l`, propagating pairs under `kernel`.
pub fn run_coupled_pf<K, P>(
    model: FeynmanKacModel<'_, K, P>,
    particles: usize,
    threshold: f64,
    tests: &[TestFunction],
    key: StreamKey,
) -> Result<CoupledReport>
where
    K: CoupledTransition + ?Sized,
    P: Potential + ?Sized,
{
    let level = model.kernel.level();
    if level == 0 {
        return Err(config("coupled filters start at level 1"));
    }
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

    let mut ce = CoupledEnsemble::uniform(level, vec![model.y0; particles], vec![model.y0; particles]);
    let mut prev_f = ce.fine_states.clone();
    let mut prev_c = ce.coarse_states.clone();
    let mut cost = CostCounter::default();
    let mut steps = Vec::with_capacity(model.horizon);
    let mut range = (f64::INFINITY, f64::NEG_INFINITY);

    for k in 1..=model.horizon {
        prev_f.copy_from_slice(&ce.fine_states);
        prev_c.copy_from_slice(&ce.coarse_states);
        let step_key = prop_key.child(k as u64);
        cost.euler_steps += ce
            .fine_states
            .par_iter_mut()
            .with_min_len(PAR_CHUNK)
            .zip(ce.coarse_states.par_iter_mut())
            .enumerate()
            .map(|(i, (yf, yc))| {
                let mut rng = step_key.child(i as u64).rng();
                let (f, c, s) = model.kernel.propagate_pair(*yf, *yc, &mut rng);
                *yf = f;
                *yc = c;
                s
            })
            .sum::<u64>();
        cost.kernel_draws += particles as u64;
        ce.time = k;

        let gf = smc::potential_values(model.potential, k, &prev_f, &ce.fine_states);
        let gc = smc::potential_values(model.potential, k, &prev_c, &ce.coarse_states);
        range_of(&gf, &mut range);
        range_of(&gc, &mut range);
        ce.reweight(&gf, &gc)?;
        let ess_fine = smc::ess(&ce.fine_weights);
        let ess_coarse = smc::ess(&ce.coarse_weights);
        let fine_estimates = tests.iter().map(|f| ce.fine_estimate(f)).collect();
        let coarse_estimates = tests.iter().map(|f| ce.coarse_estimate(f)).collect();
        let resampled = ess_fine.min(ess_coarse) / (particles as f64) < threshold;
        let mut common_mass = None;
        if resampled {
            let (next, draw) = coupled_resample(&ce, &mut res_key.child(k as u64).rng());
            ce = next;
            common_mass = Some(draw.common_mass);
        }
        steps.push(CoupledStep {
            step: k,
            ess_fine,
            ess_coarse,
            resampled,
            common_mass,
            fine_log_nc: ce.fine_log_nc,
            coarse_log_nc: ce.coarse_log_nc,
            fine_estimates,
            coarse_estimates,
        });
    }
    cost.wall_time += start.elapsed().as_secs_f64();

    Ok(CoupledReport {
        level,
        particles,
        threshold,
        test_names: tests.iter().map(|f| f.name.clone()).collect(),
        steps,
        cost,
        potential_range: range,
        final_ensemble: ce,
    })
}

/// Result of one level of a multilevel run.
#[derive(Clone, Debug)]
pub enum LevelRun {
    Base(PfReport),
    Coupled(CoupledReport),
}

impl LevelRun {
    pub fn level(&self) -> u32 {
        match self {
            LevelRun::Base(r) => r.level,
            LevelRun::Coupled(r) => r.level,
        }
    }

    pub fn particles(&self) -> usize {
        match self {
            LevelRun::Base(r) => r.particles,
            LevelRun::Coupled(r) => r.particles,
        }
    }

    pub fn cost(&self) -> CostCounter {
        match self {
            LevelRun::Base(r) => r.cost,
            LevelRun::Coupled(r) => r.cost,
        }
    }

    pub fn horizon(&self) -> usize {
        match self {
            LevelRun::Base(r) => r.steps.len(),
            LevelRun::Coupled(r) => r.steps.len(),
        }
    }

    pub fn potential_range(&self) -> (f64, f64) {
        match self {
            LevelRun::Base(r) => r.potential_range,
            LevelRun::Coupled(r) => r.potential_range,
        }
    }

    /// Level contribution to the filtering estimate of `f` at step `k` (1-based).
    pub fn filter_term(&self, k: usize, f: usize) -> f64 {
        match self {
            LevelRun::Base(r) => r.steps[k - 1].estimates[f],
            LevelRun::Coupled(r) => {
                let s = &r.steps[k - 1];
                s.fine_estimates[f] - s.coarse_estimates[f]
            }
        }
    }

    /// `(log scale, signed multiplier)` pairs whose sum is the level's
    /// normalizing-constant contribution at the final step.
    fn nc_terms(&self, f: usize) -> Vec<(f64, f64)> {
        match self {
            LevelRun::Base(r) => vec![(r.log_nc(), r.estimate(f))],
            LevelRun::Coupled(r) => {
                let s = r.last();
                vec![(s.fine_log_nc, s.fine_estimates[f]), (s.coarse_log_nc, -s.coarse_estimates[f])]
            }
        }
    }
}

/// Output of a multilevel run over levels `0..=L`.
#[derive(Clone, Debug)]
pub struct MlReport {
    pub levels: Vec<LevelRun>,
    pub test_names: Vec<String>,
    pub unbounded: Vec<String>,
}

impl MlReport {
    pub fn max_level(&self) -> u32 {
        self.levels.len() as u32 - 1
    }

    pub fn cost(&self) -> CostCounter {
        let mut c = CostCounter::default();
        for l in &self.levels {
            c += l.cost();
        }
        c
    }

    pub fn filter_estimate(&self, f: usize) -> Result<MlEstimate> {
        ml_filter_estimate(&self.levels, f)
    }

    pub fn nc_estimate(&self, f: usize) -> Result<MlNcEstimate> {
        ml_nc_estimate(&self.levels, f)
    }
}

/// Runs the filter at level 0 and a coupled filter at each level `1..=L`,
/// each on its own stream `key.child(LEVEL).child(l)`.
#[allow(clippy::too_many_arguments)]
pub fn run_mlpf<M, P>(
    model: &LevyModel<M>,
    coeff: &Coefficient,
    s0: u32,
    potential: &P,
    horizon: usize,
    y0: f64,
    particles: &[usize],
    threshold: f64,
    tests: &[TestFunction],
    key: StreamKey,
) -> Result<MlReport>
where
    M: LevyMeasure,
    P: Potential + ?Sized,
{
    if particles.is_empty() {
        return Err(config("a multilevel run needs at least level 0"));
    }
    let level_key = key.child(tag::LEVEL);
    let levels = particles
        .par_iter()
        .enumerate()
        .map(|(l, &n)| run_level(model, coeff, s0, potential, horizon, y0, l as u32, n, threshold, tests, level_key.child(l as u64)))
        .collect::<Result<Vec<_>>>()?;
    Ok(MlReport {
        levels,
        test_names: tests.iter().map(|f| f.name.clone()).collect(),
        unbounded: tests.iter().filter(|f| !f.bounded).map(|f| f.name.clone()).collect(),
    })
}

/// One level of [`run_mlpf`], on the stream it would receive there.
#[allow(clippy::too_many_arguments)]
pub fn run_level<M, P>(
    model: &LevyModel<M>,
    coeff: &Coefficient,
    s0: u32,
    potential: &P,
    horizon: usize,
    y0: f64,
    level: u32,
    particles: usize,
    threshold: f64,
    tests: &[TestFunction],
    key: StreamKey,
) -> Result<LevelRun>
where
    M: LevyMeasure,
    P: Potential + ?Sized,
{
    if level == 0 {
        let k = model.kernel(model.level(0, s0)?, coeff.clone())?;
        let fk = FeynmanKacModel { kernel: &k, potential, horizon, y0 };
        Ok(LevelRun::Base(smc::run_pf(fk, particles, threshold, tests, key)?))
    } else {
        let k = model.coupled_kernel(model.level(level, s0)?, model.level(level - 1, s0)?, coeff.clone())?;
        let fk = FeynmanKacModel { kernel: &k, potential, horizon, y0 };
        Ok(LevelRun::Coupled(run_coupled_pf(fk, particles, threshold, tests, key)?))
    }
}

fn check_levels(levels: &[LevelRun]) -> Result<()> {
    if levels.is_empty() {
        return Err(config("level 0 is missing"));
    }
    for (l, run) in levels.iter().enumerate() {
        if run.level() != l as u32 {
            return Err(config(format!("level {l} is missing (found level {} in its place)", run.level())));
        }
        if (l == 0) != matches!(run, LevelRun::Base(_)) {
            return Err(config(format!("level {l} has the wrong filter type")));
        }
    }
    let n = levels[0].horizon();
    if levels.iter().any(|r| r.horizon() != n) {
        return Err(config("levels were run over different horizons"));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlEstimate {
    pub value: f64,
    /// Level-0 estimate followed by the level differences.
    pub contributions: Vec<f64>,
}

/// Telescoped filtering estimate of test function `f` at the final step.
pub fn ml_filter_estimate(levels: &[LevelRun], f: usize) -> Result<MlEstimate> {
    check_levels(levels)?;
    ml_filter_estimate_at(levels, levels[0].horizon(), f)
}

/// Telescoped filtering estimate at step `k`.
pub fn ml_filter_estimate_at(levels: &[LevelRun], k: usize, f: usize) -> Result<MlEstimate> {
    check_levels(levels)?;
    if k == 0 || k > levels[0].horizon() {
        return Err(config(format!("step {k} is outside 1..={}", levels[0].horizon())));
    }
    let contributions: Vec<f64> = levels.iter().map(|r| r.filter_term(k, f)).collect();
    let value = contributions.iter().sum();
    Ok(MlEstimate { value, contributions })
}

/// Signed normalizing-constant estimate; the telescoped sum can be negative.
#[derive(Clone, Debug, PartialEq)]
pub struct MlNcEstimate {
    pub value: f64,
    pub negative: bool,
    /// `ln |value|`, computed without overflow.
    pub log_abs: f64,
    pub contributions: Vec<f64>,
}

/// Telescoped estimate of `zeta_n(f)`.
pub fn ml_nc_estimate(levels: &[LevelRun], f: usize) -> Result<MlNcEstimate> {
    check_levels(levels)?;
    let terms: Vec<Vec<(f64, f64)>> = levels.iter().map(|r| r.nc_terms(f)).collect();
    let scale = terms.iter().flatten().map(|t| t.0).fold(f64::NEG_INFINITY, f64::max);
    let contributions: Vec<f64> = terms.iter().map(|ts| ts.iter().map(|(lg, m)| lg.exp() * m).sum()).collect();
    let scaled: f64 = terms.iter().map(|ts| ts.iter().map(|(lg, m)| (lg - scale).exp() * m).sum::<f64>()).sum();
    let log_abs = scale + scaled.abs().ln();
    let value = if scale.is_finite() && scale.abs() < 700.0 { scale.exp() * scaled } else { scaled.signum() * log_abs.exp() };
    Ok(MlNcEstimate { value, negative: value < 0.0, log_abs, contributions })
}
