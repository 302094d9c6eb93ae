use std::fmt::Write as _;
use std::path::Path;

use levy_mlpf::bench::{
    estimate_rates, fmt17, mse_vs_cost, reference_solution, write_file, Estimand, EstimatorKind, Experiment, Problem,
};
use levy_mlpf::discretize::SdeSpec;
use levy_mlpf::mlpf::{allocate_levels, allocate_single_level, ml_filter_estimate_at, run_mlpf, LevelRun};
use levy_mlpf::models::{filter_test_functions, read_returns, BarrierProblem, FilterProblem};
use levy_mlpf::rng::StreamKey;
use levy_mlpf::smc::{run_pf, FeynmanKacModel, Potential, TestFunction, UnitPotential};
use levy_mlpf::{Error, Result};

use crate::config::{Kappa, ProblemKind, RunConfig};

const SYNTHETIC_HORIZON: usize = 10;
const BARRIER_HORIZON: usize = 100;
const DEFAULT_LEVELS: u32 = 4;
const DEFAULT_RATE_LEVELS: u32 = 8;

/// Estimator, finest level and particle counts for one filter or barrier run.
#[derive(Clone, Debug, PartialEq)]
pub struct Plan {
    pub estimator: EstimatorKind,
    pub max_level: u32,
    pub particles: Vec<usize>,
}

pub fn plan(cfg: &RunConfig) -> Result<Plan> {
    let estimator = cfg.estimator.unwrap_or(EstimatorKind::Mlpf);
    let eps = match cfg.epsilon.first() {
        Some(&e) => e,
        None => cfg.epsilon_for_level(cfg.levels.unwrap_or(DEFAULT_LEVELS)),
    };
    let ml = cfg.ml(eps)?;
    if let Some(l) = cfg.levels.filter(|&l| !cfg.epsilon.is_empty() && l != ml.max_level()) {
        return Err(Error::Config(format!("`levels` = {l} conflicts with `epsilon` = {eps}, which allocates L = {}", ml.max_level())));
    }
    match estimator {
        EstimatorKind::Pf => {
            if cfg.particles.len() > 1 {
                return Err(Error::Config("`particles` takes a single value for the pf estimator".into()));
            }
            let (level, n) = allocate_single_level(&ml)?;
            Ok(Plan { estimator, max_level: level, particles: vec![cfg.particles.first().copied().unwrap_or(n)] })
        }
        EstimatorKind::Mlpf if !cfg.particles.is_empty() => {
            let l = cfg.particles.len() as u32 - 1;
            if let Some(given) = cfg.levels.filter(|&g| g != l) {
                return Err(Error::Config(format!(
                    "`levels` = {given} needs {} `particles` entries, got {}",
                    given + 1,
                    cfg.particles.len()
                )));
            }
            Ok(Plan { estimator, max_level: l, particles: cfg.particles.clone() })
        }
        EstimatorKind::Mlpf => {
            let a = allocate_levels(&ml)?;
            for w in &a.warnings {
                eprintln!("warning: {w}");
            }
            Ok(Plan { estimator, max_level: a.max_level, particles: a.particles })
        }
    }
}

fn header(title: &str, cfg: &RunConfig) -> String {
    format!("# levy-mlpf {title}\n{}", cfg.to_block())
}

fn out_file(cfg: &RunConfig, name: &str) -> Result<std::path::PathBuf> {
    std::fs::create_dir_all(&cfg.out).map_err(|source| Error::Io { path: cfg.out.clone(), source })?;
    Ok(cfg.out.join(name))
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

pub fn rates(cfg: &RunConfig) -> Result<String> {
    let model = cfg.model()?;
    let spec = SdeSpec::geometric(cfg.y0);
    let max_level = cfg.levels.unwrap_or(DEFAULT_RATE_LEVELS);
    let r = estimate_rates(&model, &spec, cfg.s0, cfg.min_level, max_level, cfg.samples, StreamKey::new(cfg.seed))?;
    let report = format!("{}{}", header("rates", cfg), r.render());
    let path = out_file(cfg, "rates.tsv")?;
    write_file(&path, &report)?;
    let mut s = String::new();
    for (name, f) in [("alpha", &r.alpha), ("beta", &r.beta)] {
        let _ = writeln!(s, "{name} = {} (s.e. {}, levels {})", fmt17(f.exponent), fmt17(f.exponent_se), join(&f.levels));
        for w in &f.warnings {
            eprintln!("warning: {w}");
        }
    }
    let _ = writeln!(s, "report: {}", path.display());
    Ok(s)
}

pub fn filter_problem(cfg: &RunConfig) -> Result<(FilterProblem, Option<f64>)> {
    let sde = SdeSpec::geometric(cfg.y0);
    match &cfg.data {
        Some(path) => {
            if cfg.horizon.is_some() {
                eprintln!("warning: `horizon` is ignored when `data` is given");
            }
            let r = read_returns(path)?;
            Ok((FilterProblem::with_sde(sde, r.values)?, Some(r.scale)))
        }
        None => {
            let n = cfg.horizon.unwrap_or(SYNTHETIC_HORIZON);
            let p = FilterProblem::synthetic(&cfg.model()?, cfg.synthetic_level, cfg.s0, n, StreamKey::new(cfg.seed))?;
            Ok((FilterProblem::with_sde(sde, p.observations().to_vec())?, None))
        }
    }
}

/// Per-step estimates, one row per step.
struct FilterOutput {
    rows: Vec<Vec<f64>>,
    cost: u64,
    potential_range: (f64, f64),
    log_nc: Option<f64>,
    nc: Option<f64>,
}

fn run_filter_with(
    cfg: &RunConfig,
    plan: &Plan,
    potential: &dyn Potential,
    horizon: usize,
    tests: &[TestFunction],
) -> Result<FilterOutput> {
    let model = cfg.model()?;
    let sde = SdeSpec::geometric(cfg.y0);
    let key = StreamKey::new(cfg.seed);
    match plan.estimator {
        EstimatorKind::Pf => {
            let k = model.kernel(model.level(plan.max_level, cfg.s0)?, sde.coeff.clone())?;
            let fk = FeynmanKacModel { kernel: &k, potential, horizon, y0: cfg.y0 };
            let r = run_pf(fk, plan.particles[0], cfg.threshold, tests, key)?;
            Ok(FilterOutput {
                rows: r.steps.iter().map(|s| s.estimates.clone()).collect(),
                cost: r.cost.euler_steps,
                potential_range: r.potential_range,
                log_nc: Some(r.log_nc()),
                nc: None,
            })
        }
        EstimatorKind::Mlpf => {
            let r =
                run_mlpf(&model, &sde.coeff, cfg.s0, potential, horizon, cfg.y0, &plan.particles, cfg.threshold, tests, key)?;
            let rows = (1..=horizon)
                .map(|k| (0..tests.len()).map(|f| ml_filter_estimate_at(&r.levels, k, f).map(|e| e.value)).collect())
                .collect::<Result<Vec<Vec<f64>>>>()?;
            let one = tests.iter().position(|t| t.name == "one").expect("filter tests include f = 1");
            Ok(FilterOutput {
                rows,
                cost: r.cost().euler_steps,
                potential_range: potential_range(&r.levels),
                log_nc: None,
                nc: Some(r.nc_estimate(one)?.value),
            })
        }
    }
}

fn potential_range(levels: &[LevelRun]) -> (f64, f64) {
    levels.iter().map(LevelRun::potential_range).fold((f64::INFINITY, f64::NEG_INFINITY), |a, b| (a.0.min(b.0), a.1.max(b.1)))
}

pub fn filter(cfg: &RunConfig) -> Result<String> {
    let (problem, scale) = filter_problem(cfg)?;
    let plan = plan(cfg)?;
    let tests = filter_test_functions();
    let horizon = problem.horizon();
    let out = if cfg.unit_potential {
        run_filter_with(cfg, &plan, &UnitPotential, horizon, &tests)?
    } else {
        run_filter_with(cfg, &plan, &problem.potential, horizon, &tests)?
    };

    let mut report = header("filter", cfg);
    let _ = writeln!(report, "# estimator = {}", plan.estimator);
    let _ = writeln!(report, "# max_level = {}", plan.max_level);
    let _ = writeln!(report, "# particles = {}", join(&plan.particles));
    let _ = writeln!(report, "# horizon = {horizon}");
    let _ = writeln!(report, "# euler_steps = {}", out.cost);
    if let Some(s) = scale {
        let _ = writeln!(report, "# data_scale = {}", fmt17(s));
    }
    let _ = writeln!(report, "# potential_range = {},{}", fmt17(out.potential_range.0), fmt17(out.potential_range.1));
    let unbounded: Vec<&str> = tests.iter().filter(|t| !t.bounded).map(|t| t.name.as_str()).collect();
    let _ = writeln!(report, "# unbounded = {}", unbounded.join(","));
    if let Some(l) = out.log_nc {
        let _ = writeln!(report, "# log_normalizing_constant = {}", fmt17(l));
    }
    if let Some(z) = out.nc {
        let _ = writeln!(report, "# normalizing_constant = {}", fmt17(z));
    }
    let names: Vec<&str> = tests.iter().map(|t| t.name.as_str()).collect();
    let _ = writeln!(report, "step\tobservation\t{}", names.join("\t"));
    for (k, row) in out.rows.iter().enumerate() {
        let vals: Vec<String> = row.iter().map(|v| fmt17(*v)).collect();
        let _ = writeln!(report, "{}\t{}\t{}", k + 1, fmt17(problem.observations()[k]), vals.join("\t"));
    }
    let path = out_file(cfg, "filter.tsv")?;
    write_file(&path, &report)?;

    let last = out.rows.last().expect("horizon is at least 1");
    let mut s = String::new();
    for (name, v) in names.iter().zip(last) {
        let _ = writeln!(s, "{name} = {}", fmt17(*v));
    }
    let _ = writeln!(s, "euler_steps = {}", out.cost);
    let _ = writeln!(s, "report: {}", path.display());
    Ok(s)
}

pub fn barrier_problem(cfg: &RunConfig) -> Result<BarrierProblem> {
    let p = match &cfg.kappa {
        Kappa::Linear => {
            let n = cfg.horizon.unwrap_or(BARRIER_HORIZON);
            BarrierProblem::new(cfg.strike, cfg.low, cfg.high, cfg.y0, n)?
        }
        Kappa::Explicit(k) => {
            if let Some(n) = cfg.horizon.filter(|&n| n + 1 != k.len()) {
                return Err(Error::Config(format!("`kappa` needs horizon + 1 = {} entries, got {}", n + 1, k.len())));
            }
            BarrierProblem::with_schedule(cfg.strike, cfg.low, cfg.high, cfg.y0, k.clone(), None)?
        }
    };
    match cfg.floor {
        Some(f) => p.with_floor(f),
        None => Ok(p),
    }
}

pub fn barrier(cfg: &RunConfig) -> Result<String> {
    let problem = barrier_problem(cfg)?;
    let plan = plan(cfg)?;
    let model = cfg.model()?;
    let sde = SdeSpec::geometric(cfg.y0);
    let key = StreamKey::new(cfg.seed);
    let tests = [problem.correction_function()];
    let potential = problem.potential();

    let (value, contributions, cost, negative) = match plan.estimator {
        EstimatorKind::Pf => {
            let k = model.kernel(model.level(plan.max_level, cfg.s0)?, sde.coeff.clone())?;
            let fk = FeynmanKacModel { kernel: &k, potential: &potential, horizon: problem.horizon, y0: cfg.y0 };
            let r = run_pf(fk, plan.particles[0], cfg.threshold, &tests, key)?;
            let v = r.nc_estimate(0);
            (v, vec![v], r.cost.euler_steps, false)
        }
        EstimatorKind::Mlpf => {
            let r = run_mlpf(
                &model,
                &sde.coeff,
                cfg.s0,
                &potential,
                problem.horizon,
                cfg.y0,
                &plan.particles,
                cfg.threshold,
                &tests,
                key,
            )?;
            let e = r.nc_estimate(0)?;
            (e.value, e.contributions, r.cost().euler_steps, e.negative)
        }
    };

    let mut body = String::new();
    let _ = writeln!(body, "estimator = {}", plan.estimator);
    let _ = writeln!(body, "max_level = {}", plan.max_level);
    let _ = writeln!(body, "particles = {}", join(&plan.particles));
    let _ = writeln!(body, "value = {}", fmt17(value));
    let _ = writeln!(body, "sign = {}", if negative { "negative" } else { "nonnegative" });
    for (l, c) in contributions.iter().enumerate() {
        let _ = writeln!(body, "level{l}.contribution = {}", fmt17(*c));
    }
    let _ = writeln!(body, "euler_steps = {cost}");
    let undefined = potential.undefined_count();
    if undefined > 0 {
        let _ = writeln!(body, "undefined_potentials = {undefined}");
        eprintln!("warning: {undefined} potential evaluations hit y = strike and were weighted 0; consider `floor`");
    }
    if negative {
        eprintln!("warning: estimate is negative; the multilevel normalizing-constant estimator can take negative values");
    }
    if let Some(reference) = cfg.reference_value {
        let se = cfg.reference_se.unwrap_or(0.0);
        let ok = (value - reference).abs() <= 3.0 * se;
        let _ = writeln!(body, "reference = {}", fmt17(reference));
        let _ = writeln!(body, "reference_se = {}", fmt17(se));
        let _ = writeln!(body, "reference_check = {}", if ok { "PASS" } else { "FAIL" });
    }
    let path = out_file(cfg, "barrier.txt")?;
    write_file(&path, &format!("{}{body}", header("barrier", cfg)))?;
    Ok(format!("{body}report: {}\n", path.display()))
}

/// The `1.5 L` grid `epsilon = s0^(-alpha L)` for `L = 1..=5`.
pub fn default_epsilon_grid(cfg: &RunConfig) -> Vec<f64> {
    (1..=5).map(|l| cfg.epsilon_for_level(l)).collect()
}

pub fn sweep(cfg: &RunConfig) -> Result<String> {
    let epsilons = cfg.epsilon.clone();
    if epsilons.is_empty() {
        return Err(Error::Config("epsilon grid is empty".into()));
    }
    let model = cfg.model()?;
    let sde = SdeSpec::geometric(cfg.y0);
    let (problem, tests, estimand) = match cfg.problem {
        ProblemKind::Filter => {
            let (p, _) = filter_problem(cfg)?;
            let tests = filter_test_functions();
            let problem = if cfg.unit_potential {
                Problem::Unit { horizon: p.horizon(), y0: cfg.y0 }
            } else {
                Problem::Filter(p)
            };
            (problem, tests, Estimand::Filter(0))
        }
        ProblemKind::Barrier => {
            let b = barrier_problem(cfg)?;
            let tests = vec![b.correction_function()];
            (Problem::Barrier(b), tests, Estimand::NormalizingConstant(0))
        }
    };
    let exp = Experiment { model, sde, s0: cfg.s0, threshold: cfg.threshold, problem, tests, estimand };
    let key = StreamKey::new(cfg.seed);
    let ml = cfg.ml(epsilons[0])?;
    let finest = epsilons.iter().map(|&e| cfg.ml(e).map(|m| m.max_level())).collect::<Result<Vec<_>>>()?;
    let finest = finest.into_iter().max().unwrap_or(0);

    let (reference, reference_se) = match cfg.reference_value {
        Some(v) => (v, cfg.reference_se.unwrap_or(0.0)),
        None => {
            let level = cfg.reference_level.unwrap_or(finest + 3);
            let r = reference_solution(&exp, level, cfg.reference_particles, cfg.reference_replicates, key)?;
            (r.value, r.se)
        }
    };
    let estimators = match cfg.estimator {
        Some(e) => vec![e],
        None => vec![EstimatorKind::Pf, EstimatorKind::Mlpf],
    };
    let mut rows = header("sweep", cfg);
    let mut summary = header("sweep", cfg);
    let _ = writeln!(summary, "reference = {}", fmt17(reference));
    let _ = writeln!(summary, "reference_se = {}", fmt17(reference_se));
    let mut s = String::new();
    let _ = writeln!(s, "reference = {} (s.e. {})", fmt17(reference), fmt17(reference_se));
    for (i, &e) in estimators.iter().enumerate() {
        let sw = mse_vs_cost(&exp, e, &ml, &epsilons, cfg.replicates, reference, key)?;
        let table = sw.render_rows();
        rows.push_str(if i == 0 { &table } else { table.split_once('\n').map_or("", |t| t.1) });
        summary.push_str(&sw.render_summary());
        let plot = out_file(cfg, &format!("sweep_{e}.tsv"))?;
        write_file(&plot, &format!("{}{}", header("sweep", cfg), sw.render_plot()))?;
        match sw.fit {
            Some(f) => {
                let _ = writeln!(s, "{e} slope = {} (s.e. {})", fmt17(f.slope), fmt17(f.slope_se));
            }
            None => {
                let _ = writeln!(s, "{e} slope = nan");
            }
        }
    }
    let rows_path = out_file(cfg, "sweep_rows.tsv")?;
    write_file(&rows_path, &rows)?;
    let summary_path = out_file(cfg, "sweep_summary.txt")?;
    write_file(&summary_path, &summary)?;
    let _ = writeln!(s, "report: {}", summary_path.display());
    Ok(s)
}

/// Reads a config file, or the embedded block of an earlier report.
pub fn read_config(path: &Path) -> Result<String> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
    Ok(RunConfig::block_from_report(&text).unwrap_or(text))
}
