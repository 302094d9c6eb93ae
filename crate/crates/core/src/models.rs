//! Experiment models: the stable-driven geometric SDE observed in Gaussian
//! noise, and the annealed knock-out barrier option.

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rand_distr::{Distribution, StandardNormal};

use crate::discretize::{SdeSpec, Transition};
use crate::error::{config, Error};
use crate::levy_measure::{LevyMeasure, LevyModel};
use crate::rng::{tag, StreamKey};
use crate::smc::{Potential, TestFunction};
use crate::Result;

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// `(2 pi)^-1/2 exp(-(z - y)^2 / 2)`.
#[inline]
pub fn gaussian_potential(z: f64, y: f64) -> f64 {
    let d = z - y;
    INV_SQRT_2PI * (-0.5 * d * d).exp()
}

/// Unit-variance Gaussian likelihood of the `k`-th observation.
#[derive(Clone, Debug)]
pub struct GaussianObs {
    pub observations: Vec<f64>,
}

impl Potential for GaussianObs {
    fn eval(&self, k: usize, _prev: f64, y: f64) -> f64 {
        gaussian_potential(self.observations[k - 1], y)
    }
}

/// Filtering of `dY = Y dL` from noisy observations at times `1..=n`.
#[derive(Clone, Debug)]
pub struct FilterProblem {
    pub sde: SdeSpec,
    pub potential: GaussianObs,
    pub obs_variance: f64,
}

impl FilterProblem {
    pub fn new(observations: Vec<f64>) -> Result<Self> {
        Self::with_sde(SdeSpec::geometric(1.0), observations)
    }

    pub fn with_sde(sde: SdeSpec, observations: Vec<f64>) -> Result<Self> {
        if observations.is_empty() {
            return Err(config("a filtering problem needs at least one observation"));
        }
        if let Some(i) = observations.iter().position(|z| !z.is_finite()) {
            return Err(config(format!("observation {} is not finite", i + 1)));
        }
        Ok(FilterProblem { sde, potential: GaussianObs { observations }, obs_variance: 1.0 })
    }

    pub fn observations(&self) -> &[f64] {
        &self.potential.observations
    }

    pub fn horizon(&self) -> usize {
        self.potential.observations.len()
    }

    /// Simulates a hidden path with the level-`level` kernel and observes it
    /// in unit Gaussian noise.
    pub fn synthetic<M: LevyMeasure>(model: &LevyModel<M>, level: u32, s0: u32, n: usize, key: StreamKey) -> Result<Self> {
        let sde = SdeSpec::geometric(1.0);
        let k = model.kernel(model.level(level, s0)?, sde.coeff.clone())?;
        let key = key.child(tag::DATA);
        let mut y = sde.y0;
        let mut obs = Vec::with_capacity(n);
        for step in 1..=n {
            let mut rng = key.child(step as u64).rng();
            y = k.propagate(y, &mut rng).0;
            let noise: f64 = StandardNormal.sample(&mut rng);
            obs.push(y + noise);
        }
        Self::with_sde(sde, obs)
    }
}

/// Parsed and rescaled return series.
#[derive(Clone, Debug, PartialEq)]
pub struct Returns {
    pub values: Vec<f64>,
    /// Standard deviation the raw values were divided by.
    pub scale: f64,
    pub header: Option<String>,
}

/// Divides by the sample standard deviation (denominator `n - 1`).
pub fn normalize_unit_variance(values: &[f64]) -> Option<(Vec<f64>, f64)> {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let sd = var.sqrt();
    if !(sd > 0.0 && sd.is_finite()) {
        return None;
    }
    Some((values.iter().map(|v| v / sd).collect(), sd))
}

/// Reads one number per line; `#` lines and blank lines are skipped and a
/// non-numeric first line is taken as a header.
pub fn read_returns(path: &Path) -> Result<Returns> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
    let data_err = |line: usize, msg: String| Error::Data { path: path.to_path_buf(), line, msg };
    let mut values = Vec::new();
    let mut header = None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        match line.parse::<f64>() {
            Ok(v) if v.is_finite() => values.push(v),
            Ok(_) => return Err(data_err(i + 1, format!("value is not finite: {line:?}"))),
            Err(_) if values.is_empty() && header.is_none() => header = Some(line.to_string()),
            Err(_) => return Err(data_err(i + 1, format!("cannot parse {line:?} as a number"))),
        }
    }
    if values.len() < 2 {
        return Err(data_err(0, format!("need at least 2 values, found {}", values.len())));
    }
    let (values, scale) =
        normalize_unit_variance(&values).ok_or_else(|| data_err(0, "values have zero variance".to_string()))?;
    Ok(Returns { values, scale, header })
}

/// Loads a return series as observations of the default filtering problem.
pub fn load_returns(path: &Path) -> Result<FilterProblem> {
    FilterProblem::new(read_returns(path)?.values)
}

/// Knock-out barrier option priced through annealed potentials.
#[derive(Clone, Debug, PartialEq)]
pub struct BarrierProblem {
    pub strike: f64,
    pub low: f64,
    pub high: f64,
    pub y0: f64,
    pub horizon: usize,
    /// `kappa_0..=kappa_n`.
    pub kappa: Vec<f64>,
    /// When set, `|y - S|` is replaced by `max(y - S, floor)`.
    pub floor: Option<f64>,
}

impl Default for BarrierProblem {
    fn default() -> Self {
        Self::new(1.25, 0.0, 5.0, 1.0, 100).expect("default barrier problem is valid")
    }
}

impl BarrierProblem {
    /// Linear schedule `kappa_k = k / n`.
    pub fn new(strike: f64, low: f64, high: f64, y0: f64, horizon: usize) -> Result<Self> {
        let kappa = (0..=horizon).map(|k| k as f64 / horizon as f64).collect();
        Self::with_schedule(strike, low, high, y0, kappa, None)
    }

    pub fn with_schedule(strike: f64, low: f64, high: f64, y0: f64, kappa: Vec<f64>, floor: Option<f64>) -> Result<Self> {
        if kappa.len() < 2 {
            return Err(config("barrier horizon must be at least 1"));
        }
        if !(0.0 <= low && low < high) || strike.is_nan() || !y0.is_finite() {
            return Err(config(format!("barrier needs 0 <= low < high, got [{low}, {high}]")));
        }
        let n = kappa.len() - 1;
        if kappa[0] != 0.0 || kappa[n] != 1.0 || kappa.windows(2).any(|w| w[1] < w[0]) {
            return Err(config("kappa schedule must be nondecreasing from 0 to 1"));
        }
        if let Some(f) = floor {
            if !(f > 0.0) {
                return Err(config(format!("regularization floor must be positive, got {f}")));
            }
        }
        Ok(BarrierProblem { strike, low, high, y0, horizon: n, kappa, floor })
    }

    pub fn with_floor(mut self, floor: f64) -> Result<Self> {
        if !(floor > 0.0) {
            return Err(config(format!("regularization floor must be positive, got {floor}")));
        }
        self.floor = Some(floor);
        Ok(self)
    }

    #[inline]
    fn distance(&self, y: f64) -> f64 {
        match self.floor {
            None => (y - self.strike).abs(),
            Some(f) => (y - self.strike).max(f),
        }
    }

    /// Annealed weight `G~_k(y)`.
    #[inline]
    pub fn annealed(&self, k: usize, y: f64) -> f64 {
        let kp = self.kappa[k];
        if kp == 0.0 {
            1.0
        } else {
            self.distance(y).powf(kp)
        }
    }

    #[inline]
    pub fn inside(&self, y: f64) -> bool {
        self.low <= y && y <= self.high
    }

    /// `f / G~_n`, the quantity whose normalizing constant is the option value.
    pub fn correction(&self, y: f64) -> f64 {
        let pay = (y - self.strike).max(0.0);
        if pay == 0.0 {
            0.0
        } else {
            pay / self.distance(y)
        }
    }

    pub fn potential(&self) -> BarrierPotential<'_> {
        BarrierPotential { problem: self, undefined: AtomicU64::new(0) }
    }

    pub fn correction_function(&self) -> TestFunction {
        let p = self.clone();
        TestFunction::new("payoff_correction", true, move |y| p.correction(y))
    }
}

/// Step-`k` potential `(G~_k(y) / G~_(k-1)(prev)) 1[a,b](y)`.
pub fn barrier_potential(k: usize, y: f64, prev_y: f64, prob: &BarrierProblem) -> Option<f64> {
    if !prob.inside(y) {
        return Some(0.0);
    }
    let denom = prob.annealed(k - 1, prev_y);
    if denom > 0.0 {
        Some(prob.annealed(k, y) / denom)
    } else {
        None
    }
}

/// Barrier potential that counts evaluations with an undefined ratio and weights them 0.
#[derive(Debug)]
pub struct BarrierPotential<'a> {
    problem: &'a BarrierProblem,
    undefined: AtomicU64,
}

impl BarrierPotential<'_> {
    pub fn undefined_count(&self) -> u64 {
        self.undefined.load(Ordering::Relaxed)
    }
}

impl Potential for BarrierPotential<'_> {
    fn eval(&self, k: usize, prev: f64, y: f64) -> f64 {
        barrier_potential(k, y, prev, self.problem).unwrap_or_else(|| {
            self.undefined.fetch_add(1, Ordering::Relaxed);
            0.0
        })
    }
}

/// Payoff `max(y - S, 0)` and the importance correction `f / G~_n`.
pub fn barrier_value_function(y: f64, strike: f64) -> (f64, f64) {
    let pay = (y - strike).max(0.0);
    let corr = if pay == 0.0 { 0.0 } else { pay / (y - strike).abs() };
    (pay, corr)
}

/// `e^y`, unbounded.
pub fn exp_fn() -> TestFunction {
    TestFunction::new("exp", false, f64::exp)
}

/// `e^y 1{|y| < 10}`.
pub fn truncated_exp() -> TestFunction {
    TestFunction::new("exp_trunc", true, |y| if y.abs() < 10.0 { y.exp() } else { 0.0 })
}

/// Test functions reported by the filtering experiments.
pub fn filter_test_functions() -> Vec<TestFunction> {
    vec![exp_fn(), truncated_exp(), TestFunction::identity(), TestFunction::one()]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::levy_measure::StableMeasure;
    use crate::rng::SimRng;
    use crate::smc::{run_pf, FeynmanKacModel};
    use proptest::prelude::*;
    use rand::Rng;
    use std::io::Write;

    fn write(lines: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(lines.as_bytes()).unwrap();
        f
    }

    #[test]
    fn gaussian_examples() {
        assert!((gaussian_potential(0.3, 0.3) - 0.398942).abs() < 1e-6);
        assert!((gaussian_potential(1.5, 0.5) - 0.241971).abs() < 1e-6);
        assert_eq!(gaussian_potential(2.0, -1.0), gaussian_potential(-1.0, 2.0));
    }

    #[test]
    fn barrier_potential_examples() {
        let p = BarrierProblem::with_schedule(1.25, 0.0, 5.0, 1.0, vec![0.0, 1.0], None).unwrap();
        assert_eq!(barrier_potential(1, 6.0, 1.0, &p), Some(0.0));
        assert_eq!(barrier_potential(1, -0.1, 1.0, &p), Some(0.0));
        assert!((barrier_potential(1, 2.0, 1.0, &p).unwrap() - 0.75).abs() < 1e-15);
        let flat = BarrierProblem::with_schedule(1.25, 0.0, 5.0, 1.0, vec![0.0, 0.0, 1.0], None).unwrap();
        assert_eq!(barrier_potential(1, 3.0, 1.0, &flat), Some(1.0));
        assert_eq!(barrier_potential(1, 7.0, 1.0, &flat), Some(0.0));
    }

    #[test]
    fn undefined_ratio_is_flagged_and_zero() {
        let p = BarrierProblem::new(1.25, 0.0, 5.0, 1.0, 4).unwrap();
        assert_eq!(barrier_potential(2, 2.0, 1.25, &p), None);
        let g = p.potential();
        assert_eq!(g.eval(2, 1.25, 2.0), 0.0);
        assert_eq!(g.undefined_count(), 1);
    }

    #[test]
    fn value_function_examples() {
        assert_eq!(barrier_value_function(2.0, 1.25), (0.75, 1.0));
        assert_eq!(barrier_value_function(1.0, 1.25), (0.0, 0.0));
        assert_eq!(barrier_value_function(1.25, 1.25), (0.0, 0.0));
        let p = BarrierProblem::default();
        assert_eq!(p.correction(2.0), 1.0);
        assert_eq!(p.correction(1.25), 0.0);
    }

    #[test]
    fn floor_regularization() {
        let p = BarrierProblem::default().with_floor(0.001).unwrap();
        assert!((p.annealed(100, 1.0) - 0.001).abs() < 1e-15);
        assert!((p.correction(1.2505) - 0.0005 / 0.001).abs() < 1e-9);
        assert_eq!(p.correction(2.0), 1.0);
        assert!(BarrierProblem::default().with_floor(0.0).is_err());
    }

    #[test]
    fn default_barrier_configuration() {
        let p = BarrierProblem::default();
        assert_eq!((p.strike, p.low, p.high, p.y0, p.horizon), (1.25, 0.0, 5.0, 1.0, 100));
        assert_eq!(p.kappa[0], 0.0);
        assert_eq!(p.kappa[100], 1.0);
        assert_eq!(p.kappa[50], 0.5);
    }

    #[test]
    fn invalid_barrier_configurations() {
        assert!(BarrierProblem::new(1.25, 5.0, 0.0, 1.0, 10).is_err());
        assert!(BarrierProblem::new(1.25, -1.0, 5.0, 1.0, 10).is_err());
        assert!(BarrierProblem::new(1.25, 0.0, 5.0, 1.0, 0).is_err());
        assert!(BarrierProblem::with_schedule(1.25, 0.0, 5.0, 1.0, vec![0.0, 0.7, 0.5, 1.0], None).is_err());
        assert!(BarrierProblem::with_schedule(1.25, 0.0, 5.0, 1.0, vec![0.1, 1.0], None).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn barrier_potentials_telescope(seed in any::<u64>(), n in 1usize..30) {
            let p = BarrierProblem::new(1.25, 0.0, 5.0, 1.0, n).unwrap();
            let mut rng: SimRng = StreamKey::new(seed).rng();
            let mut prev = p.y0;
            let mut product = 1.0;
            for k in 1..=n {
                let y = rng.random::<f64>() * 4.5 + 0.2;
                product *= barrier_potential(k, y, prev, &p).unwrap();
                prop_assert!((product - p.annealed(k, y)).abs() <= 1e-10 * p.annealed(k, y).max(1.0));
                prev = y;
            }
        }
    }

    #[test]
    fn load_returns_normalizes() {
        let f = write("1\n-1\n");
        let r = load_returns(f.path()).unwrap();
        let z = r.observations();
        assert!((z[0] - 0.7071067811865475).abs() < 1e-12);
        assert!((z[1] + 0.7071067811865475).abs() < 1e-12);
    }

    #[test]
    fn load_returns_reads_header_and_comments() {
        let f = write("# daily log returns\nreturn\n0.01\n\n-0.02\n# mid comment\n0.005\n");
        let r = read_returns(f.path()).unwrap();
        assert_eq!(r.header.as_deref(), Some("return"));
        assert_eq!(r.values.len(), 3);
    }

    #[test]
    fn load_returns_errors() {
        let f = write("0.1\n0.2\nabc\n");
        match load_returns(f.path()) {
            Err(Error::Data { line: 3, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        let f = write("0.3\n0.3\n0.3\n");
        assert!(matches!(load_returns(f.path()), Err(Error::Data { .. })));
        let f = write("0.3\n");
        assert!(matches!(load_returns(f.path()), Err(Error::Data { .. })));
        let missing = Path::new("/nonexistent/returns.txt");
        match load_returns(missing) {
            Err(e @ Error::Io { .. }) => assert!(e.to_string().contains("/nonexistent/returns.txt")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn normalization_is_idempotent() {
        let raw: Vec<f64> = (0..50).map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.013).collect();
        let (once, _) = normalize_unit_variance(&raw).unwrap();
        let (twice, sd) = normalize_unit_variance(&once).unwrap();
        assert!((sd - 1.0).abs() < 1e-12);
        assert!(once.iter().zip(&twice).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn synthetic_problem_is_deterministic() {
        let m = LevyModel::pure_jump(StableMeasure::symmetric(1.0, 0.5, 1.0).unwrap());
        let a = FilterProblem::synthetic(&m, 6, 2, 10, StreamKey::new(3)).unwrap();
        let b = FilterProblem::synthetic(&m, 6, 2, 10, StreamKey::new(3)).unwrap();
        assert_eq!(a.observations(), b.observations());
        assert_eq!(a.horizon(), 10);
        assert!(FilterProblem::new(vec![]).is_err());
        assert!(FilterProblem::new(vec![f64::NAN]).is_err());
    }

    #[test]
    fn exponential_and_truncated_estimates_agree() {
        let m = LevyModel::pure_jump(StableMeasure::symmetric(1.0, 0.5, 1.0).unwrap());
        let prob = FilterProblem::synthetic(&m, 8, 2, 10, StreamKey::new(4)).unwrap();
        let k = m.kernel(m.level(4, 2).unwrap(), prob.sde.coeff.clone()).unwrap();
        let fk = FeynmanKacModel { kernel: &k, potential: &prob.potential, horizon: prob.horizon(), y0: prob.sde.y0 };
        let fs = [exp_fn(), truncated_exp()];
        let (mut a, mut b) = (vec![], vec![]);
        for r in 0..20 {
            let rep = run_pf(fk, 2000, 0.5, &fs, StreamKey::new(5).child(r)).unwrap();
            a.push(rep.estimate(0));
            b.push(rep.estimate(1));
        }
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let sd = (a.iter().map(|x| (x - ma).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt();
        assert!((ma - mb).abs() <= 3.0 * sd.max(1e-300) || ma == mb,
            "{ma} vs {mb}");
        assert!(!fs[0].bounded);
        assert!(fs[1].bounded);
    }
}
