//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use levy_mlpf::bench::EstimatorKind;
use levy_mlpf::levy_measure::{LevyModel, StableMeasure};
use levy_mlpf::mlpf::MlConfig;
use levy_mlpf::{Error, Result};

pub const CONFIG_BEGIN: &str = "# [config]";
pub const CONFIG_END: &str = "# [end config]";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProblemKind {
    Filter,
    Barrier,
}

impl FromStr for ProblemKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "filter" => Ok(ProblemKind::Filter),
            "barrier" => Ok(ProblemKind::Barrier),
            _ => Err(format!("expected filter or barrier, got {s:?}")),
        }
    }
}

impl std::fmt::Display for ProblemKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ProblemKind::Filter => "filter",
            ProblemKind::Barrier => "barrier",
        })
    }
}

/// Annealing schedule for the barrier potentials.
#[derive(Clone, Debug, PartialEq)]
pub enum Kappa {
    Linear,
    Explicit(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub threads: Option<usize>,
    pub out: PathBuf,
    pub c: f64,
    pub phi: f64,
    pub xstar: f64,
    pub sigma: f64,
    pub drift: f64,
    pub y0: f64,
    pub s0: u32,
    pub threshold: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub c_level: f64,
    pub c_samples: f64,
    pub epsilon: Vec<f64>,
    pub levels: Option<u32>,
    pub min_level: u32,
    pub particles: Vec<usize>,
    pub samples: usize,
    pub estimator: Option<EstimatorKind>,
    pub data: Option<PathBuf>,
    pub horizon: Option<usize>,
    pub synthetic_level: u32,
    pub unit_potential: bool,
    pub strike: f64,
    pub low: f64,
    pub high: f64,
    pub floor: Option<f64>,
    pub kappa: Kappa,
    pub replicates: usize,
    pub problem: ProblemKind,
    pub reference_level: Option<u32>,
    pub reference_particles: usize,
    pub reference_replicates: usize,
    pub reference_value: Option<f64>,
    pub reference_se: Option<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 20241014,
            threads: None,
            out: PathBuf::from("out"),
            c: 1.0,
            phi: 0.5,
            xstar: 1.0,
            sigma: 0.0,
            drift: 0.0,
            y0: 1.0,
            s0: 2,
            threshold: 0.5,
            alpha: 1.5,
            beta: 3.0,
            gamma: 1.0,
            c_level: 1.0,
            c_samples: 1.0,
            epsilon: Vec::new(),
            levels: None,
            min_level: 1,
            particles: Vec::new(),
            samples: 100_000,
            estimator: None,
            data: None,
            horizon: None,
            synthetic_level: 10,
            unit_potential: false,
            strike: 1.25,
            low: 0.0,
            high: 5.0,
            floor: None,
            kappa: Kappa::Linear,
            replicates: 50,
            problem: ProblemKind::Filter,
            reference_level: None,
            reference_particles: 100_000,
            reference_replicates: 10,
            reference_value: None,
            reference_se: None,
        }
    }
}

fn bad(key: &str, value: &str, why: impl std::fmt::Display) -> Error {
    Error::Config(format!("invalid value {value:?} for `{key}`: {why}"))
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| bad(key, v, e))
}

fn opt<T: FromStr>(key: &str, v: &str) -> Result<Option<T>>
where
    T::Err: std::fmt::Display,
{
    if v.is_empty() {
        Ok(None)
    } else {
        parse(key, v).map(Some)
    }
}

fn list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(|s| parse(key, s)).collect()
}

fn show_opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map(T::to_string).unwrap_or_default()
}

fn show_list<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn positive(key: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("`{key}` must be positive and finite, got {v}")))
    }
}

impl RunConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "seed" => self.seed = parse(key, v)?,
            "threads" => self.threads = opt(key, v)?,
            "out" => self.out = PathBuf::from(v),
            "c" => self.c = parse(key, v)?,
            "phi" => self.phi = parse(key, v)?,
            "xstar" => self.xstar = parse(key, v)?,
            "sigma" => self.sigma = parse(key, v)?,
            "drift" => self.drift = parse(key, v)?,
            "y0" => self.y0 = parse(key, v)?,
            "s0" => self.s0 = parse(key, v)?,
            "threshold" => self.threshold = parse(key, v)?,
            "alpha" => self.alpha = parse(key, v)?,
            "beta" => self.beta = parse(key, v)?,
            "gamma" => self.gamma = parse(key, v)?,
            "c_level" => self.c_level = parse(key, v)?,
            "c_samples" => self.c_samples = parse(key, v)?,
            "epsilon" => self.epsilon = list(key, v)?,
            "levels" => self.levels = opt(key, v)?,
            "min_level" => self.min_level = parse(key, v)?,
            "particles" => self.particles = list(key, v)?,
            "samples" => self.samples = parse(key, v)?,
            "estimator" => self.estimator = opt(key, v)?,
            "data" => self.data = (!v.is_empty()).then(|| PathBuf::from(v)),
            "horizon" => self.horizon = opt(key, v)?,
            "synthetic_level" => self.synthetic_level = parse(key, v)?,
            "unit_potential" => self.unit_potential = parse(key, v)?,
            "strike" => self.strike = parse(key, v)?,
            "low" => self.low = parse(key, v)?,
            "high" => self.high = parse(key, v)?,
            "floor" => self.floor = opt(key, v)?,
            "kappa" => {
                self.kappa = if v == "linear" { Kappa::Linear } else { Kappa::Explicit(list(key, v)?) };
            }
            "replicates" => self.replicates = parse(key, v)?,
            "problem" => self.problem = parse(key, v)?,
            "reference_level" => self.reference_level = opt(key, v)?,
            "reference_particles" => self.reference_particles = parse(key, v)?,
            "reference_replicates" => self.reference_replicates = parse(key, v)?,
            "reference_value" => self.reference_value = opt(key, v)?,
            "reference_se" => self.reference_se = opt(key, v)?,
            other => return Err(Error::Config(format!("unknown configuration key `{other}`"))),
        }
        Ok(())
    }

    /// Applies every `key = value` line; `#` lines and blanks are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("config line {}: expected `key = value`, got {line:?}", i + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    #[cfg(test)]
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// All settings in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("seed", self.seed.to_string()),
            ("threads", show_opt(&self.threads)),
            ("out", self.out.display().to_string()),
            ("c", self.c.to_string()),
            ("phi", self.phi.to_string()),
            ("xstar", self.xstar.to_string()),
            ("sigma", self.sigma.to_string()),
            ("drift", self.drift.to_string()),
            ("y0", self.y0.to_string()),
            ("s0", self.s0.to_string()),
            ("threshold", self.threshold.to_string()),
            ("alpha", self.alpha.to_string()),
            ("beta", self.beta.to_string()),
            ("gamma", self.gamma.to_string()),
            ("c_level", self.c_level.to_string()),
            ("c_samples", self.c_samples.to_string()),
            ("epsilon", show_list(&self.epsilon)),
            ("levels", show_opt(&self.levels)),
            ("min_level", self.min_level.to_string()),
            ("particles", show_list(&self.particles)),
            ("samples", self.samples.to_string()),
            ("estimator", show_opt(&self.estimator)),
            ("data", self.data.as_ref().map(|p| p.display().to_string()).unwrap_or_default()),
            ("horizon", show_opt(&self.horizon)),
            ("synthetic_level", self.synthetic_level.to_string()),
            ("unit_potential", self.unit_potential.to_string()),
            ("strike", self.strike.to_string()),
            ("low", self.low.to_string()),
            ("high", self.high.to_string()),
            ("floor", show_opt(&self.floor)),
            (
                "kappa",
                match &self.kappa {
                    Kappa::Linear => "linear".to_string(),
                    Kappa::Explicit(k) => show_list(k),
                },
            ),
            ("replicates", self.replicates.to_string()),
            ("problem", self.problem.to_string()),
            ("reference_level", show_opt(&self.reference_level)),
            ("reference_particles", self.reference_particles.to_string()),
            ("reference_replicates", self.reference_replicates.to_string()),
            ("reference_value", show_opt(&self.reference_value)),
            ("reference_se", show_opt(&self.reference_se)),
        ]
    }

    #[cfg(test)]
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// The resolved configuration as a commented block for report headers.
    pub fn to_block(&self) -> String {
        let mut s = format!("{CONFIG_BEGIN}\n");
        for (k, v) in self.entries() {
            let _ = writeln!(s, "# {k} = {v}");
        }
        s.push_str(CONFIG_END);
        s.push('\n');
        s
    }

    /// Extracts the configuration block from a report, if present.
    pub fn block_from_report(text: &str) -> Option<String> {
        let start = text.lines().position(|l| l.trim() == CONFIG_BEGIN)?;
        let body: Vec<&str> = text
            .lines()
            .skip(start + 1)
            .take_while(|l| l.trim() != CONFIG_END)
            .map(|l| l.strip_prefix("# ").unwrap_or(l))
            .collect();
        Some(body.join("\n"))
    }

    /// Cross-field checks, reported per field.
    pub fn validate(&self) -> Result<()> {
        for (k, v) in [("c", self.c), ("xstar", self.xstar), ("threshold", self.threshold)] {
            positive(k, v)?;
        }
        self.model()?;
        if self.threshold > 1.0 {
            return Err(Error::Config(format!("`threshold` must lie in (0, 1], got {}", self.threshold)));
        }
        if !self.y0.is_finite() {
            return Err(Error::Config("`y0` must be finite".into()));
        }
        self.ml(0.5)?.validate()?;
        if let Some(e) = self.epsilon.iter().find(|e| !(**e > 0.0 && e.is_finite())) {
            return Err(Error::Config(format!("`epsilon` entries must be positive, got {e}")));
        }
        if self.particles.iter().any(|n| *n < 2) {
            return Err(Error::Config("`particles` entries must be at least 2".into()));
        }
        if self.samples < 2 {
            return Err(Error::Config("`samples` must be at least 2".into()));
        }
        if self.threads == Some(0) {
            return Err(Error::Config("`threads` must be at least 1".into()));
        }
        if self.horizon == Some(0) {
            return Err(Error::Config("`horizon` must be at least 1".into()));
        }
        if !(0.0 <= self.low && self.low < self.high) {
            return Err(Error::Config(format!("`low` and `high` need 0 <= low < high, got {} and {}", self.low, self.high)));
        }
        if let Some(f) = self.floor {
            positive("floor", f)?;
        }
        if let Some(se) = self.reference_se {
            if !(se >= 0.0) {
                return Err(Error::Config(format!("`reference_se` must be nonnegative, got {se}")));
            }
        }
        if self.reference_particles < 2 || self.reference_replicates < 2 {
            return Err(Error::Config("`reference_particles` and `reference_replicates` must be at least 2".into()));
        }
        Ok(())
    }

    pub fn model(&self) -> Result<LevyModel> {
        let m = StableMeasure::symmetric(self.c, self.phi, self.xstar).map_err(to_config)?;
        LevyModel::new(m, self.sigma, self.drift).map_err(to_config)
    }

    pub fn ml(&self, epsilon: f64) -> Result<MlConfig> {
        let ml = MlConfig {
            epsilon,
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
            s0: self.s0,
            c_level: self.c_level,
            c_samples: self.c_samples,
        };
        ml.validate()?;
        Ok(ml)
    }

    /// Largest accuracy target whose allocation has finest level `l`.
    pub fn epsilon_for_level(&self, l: u32) -> f64 {
        (self.s0 as f64).powf(-self.alpha * l as f64 / self.c_level)
    }
}

fn to_config(e: Error) -> Error {
    match e {
        Error::Domain(m) => Error::Config(m),
        other => other,
    }
}
