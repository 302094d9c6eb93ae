//! Experiment harness: rate fits, reference solutions, MSE-versus-cost sweeps.

use std::fmt::{self, Write as _};
use std::ops::AddAssign;
use std::path::Path;

use rayon::prelude::*;

use crate::couple::CoupledTransition;
use crate::discretize::SdeSpec;
use crate::error::{config, Error};
use crate::levy_measure::{LevyMeasure, LevyModel};
use crate::mlpf::{allocate_levels, allocate_single_level, run_mlpf, MlConfig};
use crate::models::{BarrierProblem, FilterProblem};
use crate::rng::{tag, StreamKey};
use crate::smc::{run_pf, FeynmanKacModel, Potential, TestFunction, UnitPotential};
use crate::Result;

/// Simulation cost in Euler sub-steps; wall time is informational.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CostCounter {
    pub euler_steps: u64,
    pub kernel_draws: u64,
    pub wall_time: f64,
}

impl AddAssign for CostCounter {
    fn add_assign(&mut self, o: Self) {
        self.euler_steps += o.euler_steps;
        self.kernel_draws += o.kernel_draws;
        self.wall_time += o.wall_time;
    }
}

/// Formats with 17 significant digits.
pub fn fmt17(x: f64) -> String {
    format!("{x:.16e}")
}

/// Mean and standard error of the mean.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (m, f64::NAN);
    }
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (v / n).sqrt())
}

/// Least-squares line `y = intercept + slope x`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    /// Root-mean-square residual.
    pub residual: f64,
    /// Standard error of the slope; NaN with fewer than 3 points.
    pub slope_se: f64,
}

pub fn fit_line(x: &[f64], y: &[f64]) -> Option<LineFit> {
    let n = x.len();
    if n < 2 || n != y.len() {
        return None;
    }
    let nf = n as f64;
    let mx = x.iter().sum::<f64>() / nf;
    let my = y.iter().sum::<f64>() / nf;
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    let slope_se = if n > 2 { (ss / (nf - 2.0) / sxx).sqrt() } else { f64::NAN };
    Some(LineFit { slope, intercept, residual: (ss / nf).sqrt(), slope_se })
}

/// Monte Carlo moments of the level increment `Y^l - Y^(l-1)` at time 1.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelMoments {
    pub level: u32,
    pub samples: usize,
    pub mean_diff: f64,
    pub se_diff: f64,
    pub mean_sq: f64,
    pub se_sq: f64,
    pub cost: CostCounter,
}

/// Fitted exponent of a per-level quantity against `h_l` on base-2 logs.
#[derive(Clone, Debug, PartialEq)]
pub struct RateFit {
    pub levels: Vec<u32>,
    pub values: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub exponent: f64,
    pub intercept: f64,
    pub residual: f64,
    pub exponent_se: f64,
    /// Levels dropped because their value is within 2 s.e. of 0.
    pub excluded: Vec<u32>,
    /// Set when fewer than 3 levels survived exclusion and all were fitted.
    pub noise_dominated: bool,
    pub warnings: Vec<String>,
}

impl RateFit {
    fn new(name: &str, s0: u32, levels: &[u32], values: &[f64], ses: &[f64]) -> Result<Self> {
        let mut warnings = Vec::new();
        let mut keep = Vec::new();
        let mut excluded = Vec::new();
        for (i, &l) in levels.iter().enumerate() {
            if values[i] > 2.0 * ses[i] && values[i] > 0.0 {
                keep.push(i);
            } else {
                excluded.push(l);
                warnings.push(format!(
                    "{name}: level {l} excluded, value {:.3e} within 2 s.e. ({:.3e}) of 0",
                    values[i], ses[i]
                ));
            }
        }
        let mut noise_dominated = false;
        if keep.len() < 3 {
            noise_dominated = true;
            warnings.push(format!(
                "{name}: only {} levels distinguishable from 0; fitting all levels, estimate is noise dominated",
                keep.len()
            ));
            keep = (0..levels.len()).filter(|&i| values[i] > 0.0).collect();
            excluded.clear();
        }
        let lh = (s0 as f64).log2();
        let x: Vec<f64> = keep.iter().map(|&i| -(levels[i] as f64) * lh).collect();
        let y: Vec<f64> = keep.iter().map(|&i| values[i].log2()).collect();
        let fit = fit_line(&x, &y).ok_or_else(|| config(format!("{name}: not enough positive levels to fit a rate")))?;
        if !fit.slope.is_finite() {
            return Err(Error::Domain(format!("{name}: fitted exponent is not finite")));
        }
        Ok(RateFit {
            levels: keep.iter().map(|&i| levels[i]).collect(),
            values: keep.iter().map(|&i| values[i]).collect(),
            std_errors: keep.iter().map(|&i| ses[i]).collect(),
            exponent: fit.slope,
            intercept: fit.intercept,
            residual: fit.residual,
            exponent_se: fit.slope_se,
            excluded,
            noise_dominated,
            warnings,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RateReport {
    pub per_level: Vec<LevelMoments>,
    /// Weak rate from `|E[Y^l - Y^(l-1)]|`.
    pub alpha: RateFit,
    /// Strong rate from `E|Y^l - Y^(l-1)|^2`.
    pub beta: RateFit,
}

/// Moments of the increment at one level from `samples` coupled draws.
pub fn level_moments<M: LevyMeasure>(
    model: &LevyModel<M>,
    spec: &SdeSpec,
    s0: u32,
    level: u32,
    samples: usize,
    key: StreamKey,
) -> Result<LevelMoments> {
    if level == 0 {
        return Err(config("increments start at level 1"));
    }
    if samples < 2 {
        return Err(config("need at least 2 samples per level"));
    }
    let k = model.coupled_kernel(model.level(level, s0)?, model.level(level - 1, s0)?, spec.coeff.clone())?;
    let start = std::time::Instant::now();
    let draws: Vec<(f64, u64)> = (0..samples)
        .into_par_iter()
        .with_min_len(256)
        .map(|i| {
            let (f, c, s) = k.propagate_pair(spec.y0, spec.y0, &mut key.child(i as u64).rng());
            (f - c, s)
        })
        .collect();
    let d: Vec<f64> = draws.iter().map(|p| p.0).collect();
    let sq: Vec<f64> = d.iter().map(|x| x * x).collect();
    let (mean_diff, se_diff) = mean_se(&d);
    let (mean_sq, se_sq) = mean_se(&sq);
    let cost = CostCounter {
        euler_steps: draws.iter().map(|p| p.1).sum(),
        kernel_draws: samples as u64,
        wall_time: start.elapsed().as_secs_f64(),
    };
    Ok(LevelMoments { level, samples, mean_diff, se_diff, mean_sq, se_sq, cost })
}

/// Weak and strong rate fits over levels `min_level..=max_level`.
pub fn estimate_rates<M: LevyMeasure>(
    model: &LevyModel<M>,
    spec: &SdeSpec,
    s0: u32,
    min_level: u32,
    max_level: u32,
    samples: usize,
    key: StreamKey,
) -> Result<RateReport> {
    if max_level < 4 {
        return Err(config(format!("at least 4 levels required for a fit, got max level {max_level}")));
    }
    if min_level == 0 || max_level < min_level + 2 {
        return Err(config(format!("need levels 1 <= min < max with at least 3 levels, got {min_level}..={max_level}")));
    }
    let lk = key.child(tag::LEVEL);
    let per_level = (min_level..=max_level)
        .map(|l| level_moments(model, spec, s0, l, samples, lk.child(l as u64)))
        .collect::<Result<Vec<_>>>()?;
    let levels: Vec<u32> = per_level.iter().map(|m| m.level).collect();
    let alpha = RateFit::new(
        "alpha",
        s0,
        &levels,
        &per_level.iter().map(|m| m.mean_diff.abs()).collect::<Vec<_>>(),
        &per_level.iter().map(|m| m.se_diff).collect::<Vec<_>>(),
    )?;
    let beta = RateFit::new(
        "beta",
        s0,
        &levels,
        &per_level.iter().map(|m| m.mean_sq).collect::<Vec<_>>(),
        &per_level.iter().map(|m| m.se_sq).collect::<Vec<_>>(),
    )?;
    Ok(RateReport { per_level, alpha, beta })
}

impl RateReport {
    /// Delimited per-level table followed by the fits.
    pub fn render(&self) -> String {
        let mut s = String::from("level\tsamples\tmean_diff\tse_diff\tmean_sq\tse_sq\teuler_steps\n");
        for m in &self.per_level {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                m.level,
                m.samples,
                fmt17(m.mean_diff),
                fmt17(m.se_diff),
                fmt17(m.mean_sq),
                fmt17(m.se_sq),
                m.cost.euler_steps
            );
        }
        for (name, f) in [("alpha", &self.alpha), ("beta", &self.beta)] {
            let lv: Vec<String> = f.levels.iter().map(u32::to_string).collect();
            let _ = writeln!(s, "# {name} = {}", fmt17(f.exponent));
            let _ = writeln!(s, "# {name}_se = {}", fmt17(f.exponent_se));
            let _ = writeln!(s, "# {name}_residual = {}", fmt17(f.residual));
            let _ = writeln!(s, "# {name}_levels = {}", lv.join(","));
            let _ = writeln!(s, "# {name}_noise_dominated = {}", f.noise_dominated);
            for w in &f.warnings {
                let _ = writeln!(s, "# warning: {w}");
            }
        }
        s
    }
}

/// What a filter run estimates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Estimand {
    /// Final-step filtering expectation of test function `f`.
    Filter(usize),
    /// Normalizing constant `zeta_n(f)`.
    NormalizingConstant(usize),
}

/// Estimation problem plugged into the harness.
#[derive(Clone, Debug)]
pub enum Problem {
    Filter(FilterProblem),
    Barrier(BarrierProblem),
    /// `G = 1` over `horizon` steps from `y0`.
    Unit { horizon: usize, y0: f64 },
}

impl Problem {
    pub fn horizon(&self) -> usize {
        match self {
            Problem::Filter(p) => p.horizon(),
            Problem::Barrier(b) => b.horizon,
            Problem::Unit { horizon, .. } => *horizon,
        }
    }

    pub fn y0(&self) -> f64 {
        match self {
            Problem::Filter(p) => p.sde.y0,
            Problem::Barrier(b) => b.y0,
            Problem::Unit { y0, .. } => *y0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Experiment<M: LevyMeasure = crate::levy_measure::StableMeasure> {
    pub model: LevyModel<M>,
    pub sde: SdeSpec,
    pub s0: u32,
    pub threshold: f64,
    pub problem: Problem,
    pub tests: Vec<TestFunction>,
    pub estimand: Estimand,
}

/// One estimator run.
#[derive(Clone, Debug, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub cost: CostCounter,
    pub max_level: u32,
    pub particles: Vec<usize>,
    /// Per-level contributions, level 0 first (a single entry for a plain filter).
    pub contributions: Vec<f64>,
}

impl<M: LevyMeasure> Experiment<M> {
    fn with_potential<T>(&self, run: impl FnOnce(&(dyn Potential + '_)) -> Result<T>) -> Result<T> {
        match &self.problem {
            Problem::Filter(p) => run(&p.potential),
            Problem::Barrier(b) => run(&b.potential()),
            Problem::Unit { .. } => run(&UnitPotential),
        }
    }

    /// Single-level particle filter at `level` with `particles` particles.
    pub fn run_pf(&self, level: u32, particles: usize, key: StreamKey) -> Result<Estimate> {
        let k = self.model.kernel(self.model.level(level, self.s0)?, self.sde.coeff.clone())?;
        let r = self.with_potential(|pot| {
            let fk = FeynmanKacModel { kernel: &k, potential: pot, horizon: self.problem.horizon(), y0: self.problem.y0() };
            run_pf(fk, particles, self.threshold, &self.tests, key)
        })?;
        let value = match self.estimand {
            Estimand::Filter(f) => r.estimate(f),
            Estimand::NormalizingConstant(f) => r.nc_estimate(f),
        };
        Ok(Estimate { value, cost: r.cost, max_level: level, particles: vec![particles], contributions: vec![value] })
    }

    /// Multilevel filter over levels `0..particles.len()`.
    pub fn run_mlpf(&self, particles: &[usize], key: StreamKey) -> Result<Estimate> {
        let r = self.with_potential(|pot| {
            run_mlpf(
                &self.model,
                &self.sde.coeff,
                self.s0,
                pot,
                self.problem.horizon(),
                self.problem.y0(),
                particles,
                self.threshold,
                &self.tests,
                key,
            )
        })?;
        let (value, contributions) = match self.estimand {
            Estimand::Filter(f) => {
                let e = r.filter_estimate(f)?;
                (e.value, e.contributions)
            }
            Estimand::NormalizingConstant(f) => {
                let e = r.nc_estimate(f)?;
                (e.value, e.contributions)
            }
        };
        Ok(Estimate { value, cost: r.cost(), max_level: r.max_level(), particles: particles.to_vec(), contributions })
    }

    pub fn run(&self, estimator: EstimatorKind, ml: &MlConfig, key: StreamKey) -> Result<Estimate> {
        match estimator {
            EstimatorKind::Pf => {
                let (l, n) = allocate_single_level(ml)?;
                self.run_pf(l, n, key)
            }
            EstimatorKind::Mlpf => self.run_mlpf(&allocate_levels(ml)?.particles, key),
        }
    }
}

/// Reference value from independent high-resolution filter replicates.
#[derive(Clone, Debug, PartialEq)]
pub struct Reference {
    pub value: f64,
    pub se: f64,
    pub level: u32,
    pub particles: usize,
    pub replicates: Vec<f64>,
    pub cost: CostCounter,
}

pub fn reference_solution<M: LevyMeasure>(
    exp: &Experiment<M>,
    level: u32,
    particles: usize,
    replicates: usize,
    key: StreamKey,
) -> Result<Reference> {
    if replicates < 2 {
        return Err(config("a reference needs at least 2 replicates"));
    }
    let rk = key.child(tag::REFERENCE);
    let runs = (0..replicates)
        .map(|r| exp.run_pf(level, particles, rk.child(r as u64)))
        .collect::<Result<Vec<_>>>()?;
    let values: Vec<f64> = runs.iter().map(|e| e.value).collect();
    let (value, se) = mean_se(&values);
    let mut cost = CostCounter::default();
    for r in &runs {
        cost += r.cost;
    }
    Ok(Reference { value, se, level, particles, replicates: values, cost })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EstimatorKind {
    Pf,
    Mlpf,
}

impl EstimatorKind {
    fn stream(self) -> u64 {
        match self {
            EstimatorKind::Pf => 1,
            EstimatorKind::Mlpf => 2,
        }
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EstimatorKind::Pf => "pf",
            EstimatorKind::Mlpf => "mlpf",
        })
    }
}

impl std::str::FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pf" => Ok(EstimatorKind::Pf),
            "mlpf" => Ok(EstimatorKind::Mlpf),
            _ => Err(config(format!("unknown estimator {s:?}, expected pf or mlpf"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub estimator: EstimatorKind,
    pub epsilon: f64,
    pub replicate: usize,
    pub max_level: u32,
    pub particles: Vec<usize>,
    pub estimate: f64,
    pub contributions: Vec<f64>,
    pub cost: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepPoint {
    pub estimator: EstimatorKind,
    pub epsilon: f64,
    pub max_level: u32,
    pub particles: Vec<usize>,
    pub mean_cost: f64,
    pub mse: f64,
    /// Standard error of the MSE over replicates.
    pub mse_se: f64,
    /// Replicate variance of each level contribution.
    pub level_variances: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sweep {
    pub estimator: EstimatorKind,
    pub rows: Vec<SweepRow>,
    pub points: Vec<SweepPoint>,
    /// Fit of `log10 MSE` on `log10 cost` across the grid.
    pub fit: Option<LineFit>,
    pub reference: f64,
}

/// Mean squared error against `reference` and mean cost at every `epsilon`.
pub fn mse_vs_cost<M: LevyMeasure>(
    exp: &Experiment<M>,
    estimator: EstimatorKind,
    ml: &MlConfig,
    epsilons: &[f64],
    replicates: usize,
    reference: f64,
    key: StreamKey,
) -> Result<Sweep> {
    if epsilons.is_empty() {
        return Err(config("epsilon grid is empty"));
    }
    if replicates < 20 {
        return Err(config(format!("sweeps need at least 20 replicates, got {replicates}")));
    }
    if !reference.is_finite() {
        return Err(config("reference value is not finite"));
    }
    let sk = key.child(tag::REPLICATE).child(estimator.stream());
    let mut rows = Vec::with_capacity(epsilons.len() * replicates);
    let mut points = Vec::with_capacity(epsilons.len());
    for (ei, &eps) in epsilons.iter().enumerate() {
        let cfg = MlConfig { epsilon: eps, ..*ml };
        let ek = sk.child(ei as u64);
        let runs = (0..replicates)
            .into_par_iter()
            .map(|r| exp.run(estimator, &cfg, ek.child(r as u64)))
            .collect::<Result<Vec<_>>>()?;
        let sq: Vec<f64> = runs.iter().map(|e| (e.value - reference).powi(2)).collect();
        let (mse, mse_se) = mean_se(&sq);
        let mean_cost = runs.iter().map(|e| e.cost.euler_steps as f64).sum::<f64>() / replicates as f64;
        let nl = runs[0].contributions.len();
        let level_variances = (0..nl)
            .map(|l| {
                let v: Vec<f64> = runs.iter().map(|e| e.contributions[l]).collect();
                let (_, se) = mean_se(&v);
                se * se * replicates as f64
            })
            .collect();
        points.push(SweepPoint {
            estimator,
            epsilon: eps,
            max_level: runs[0].max_level,
            particles: runs[0].particles.clone(),
            mean_cost,
            mse,
            mse_se,
            level_variances,
        });
        rows.extend(runs.into_iter().enumerate().map(|(r, e)| SweepRow {
            estimator,
            epsilon: eps,
            replicate: r,
            max_level: e.max_level,
            particles: e.particles,
            estimate: e.value,
            contributions: e.contributions,
            cost: e.cost.euler_steps,
        }));
    }
    let usable: Vec<&SweepPoint> = points.iter().filter(|p| p.mse > 0.0 && p.mean_cost > 0.0).collect();
    let fit = fit_line(
        &usable.iter().map(|p| p.mean_cost.log10()).collect::<Vec<_>>(),
        &usable.iter().map(|p| p.mse.log10()).collect::<Vec<_>>(),
    );
    Ok(Sweep { estimator, rows, points, fit, reference })
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(";")
}

impl Sweep {
    /// One row per replicate.
    pub fn render_rows(&self) -> String {
        let mut s = String::from("estimator\tepsilon\treplicate\tmax_level\tparticles\testimate\tcost\tcontributions\n");
        for r in &self.rows {
            let c: Vec<String> = r.contributions.iter().map(|x| fmt17(*x)).collect();
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.estimator,
                fmt17(r.epsilon),
                r.replicate,
                r.max_level,
                join(&r.particles),
                fmt17(r.estimate),
                r.cost,
                c.join(";")
            );
        }
        s
    }

    /// Two columns: `log10(mean cost)` and `log10(MSE)`.
    pub fn render_plot(&self) -> String {
        let mut s = String::from("log10_cost\tlog10_mse\n");
        for p in &self.points {
            let _ = writeln!(s, "{}\t{}", fmt17(p.mean_cost.log10()), fmt17(p.mse.log10()));
        }
        s
    }

    /// `key = value` lines with the per-epsilon points and the fitted slope.
    pub fn render_summary(&self) -> String {
        let mut s = String::new();
        let e = self.estimator;
        let _ = writeln!(s, "{e}.reference = {}", fmt17(self.reference));
        for (i, p) in self.points.iter().enumerate() {
            let _ = writeln!(s, "{e}.point{i}.epsilon = {}", fmt17(p.epsilon));
            let _ = writeln!(s, "{e}.point{i}.max_level = {}", p.max_level);
            let _ = writeln!(s, "{e}.point{i}.particles = {}", join(&p.particles));
            let _ = writeln!(s, "{e}.point{i}.mean_cost = {}", fmt17(p.mean_cost));
            let _ = writeln!(s, "{e}.point{i}.mse = {}", fmt17(p.mse));
            let _ = writeln!(s, "{e}.point{i}.mse_se = {}", fmt17(p.mse_se));
        }
        match self.fit {
            Some(f) => {
                let _ = writeln!(s, "{e}.slope = {}", fmt17(f.slope));
                let _ = writeln!(s, "{e}.slope_se = {}", fmt17(f.slope_se));
                let _ = writeln!(s, "{e}.intercept = {}", fmt17(f.intercept));
            }
            None => {
                let _ = writeln!(s, "{e}.slope = nan");
            }
        }
        s
    }
}

pub fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|source| Error::Io { path: path.to_path_buf(), source })
}
