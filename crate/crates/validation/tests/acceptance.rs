//! Acceptance suite: one PASS/FAIL line per criterion.

use std::time::Instant;

use levy_mlpf::bench::{estimate_rates, mse_vs_cost, reference_solution, Estimand, EstimatorKind, Experiment, Problem};
use levy_mlpf::couple::{refine_coupled, CoupledTransition};
use levy_mlpf::discretize::{refine_jump_times, Coefficient, SdeSpec, Transition};
use levy_mlpf::levy_measure::{jump_threshold, small_jump_variance, tail_mass, LevyModel, StableMeasure};
use levy_mlpf::mlpf::{allocate_levels, coupled_resample, run_mlpf, CoupledEnsemble, MlConfig};
use levy_mlpf::models::{exp_fn, filter_test_functions, gaussian_potential, BarrierProblem, FilterProblem, GaussianObs};
use levy_mlpf::rng::StreamKey;
use levy_mlpf::smc::{ess, run_pf, Ensemble, FeynmanKacModel, TestFunction};
use levy_mlpf_validation::{ks_critical_1pct, ks_statistic, mean_se, within};
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};
use rand::Rng;

const SEED: u64 = 20241014;
const S0: u32 = 2;

fn model() -> LevyModel {
    LevyModel::pure_jump(StableMeasure::symmetric(1.0, 0.5, 1.0).unwrap())
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn report(id: u32, name: &str, start: Instant, o: &Outcome) {
    println!(
        "{} criterion {id} ({name}): {} [{:.1}s]",
        if o.pass { "PASS" } else { "FAIL" },
        o.detail,
        start.elapsed().as_secs_f64()
    );
}

fn rates() -> (Outcome, Outcome) {
    let t = Instant::now();
    let r = estimate_rates(&model(), &SdeSpec::geometric(1.0), S0, 1, 8, 100_000, StreamKey::new(SEED)).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let b = r.beta.exponent;
    let a = r.alpha.exponent;
    let fast = secs <= 300.0;
    let beta = Outcome {
        pass: (2.3..=3.3).contains(&b) && fast,
        detail: format!("beta_hat = {b:.4} (s.e. {:.4}), window [2.3, 3.3], runtime {secs:.1}s <= 300s", r.beta.exponent_se),
    };
    let mut detail = format!("alpha_hat = {a:.4} (s.e. {:.4}), window [1.0, 1.8]", r.alpha.exponent_se);
    if r.alpha.noise_dominated {
        detail.push_str("; note: every level is within 2 s.e. of 0, fit is noise dominated");
    }
    let alpha = Outcome { pass: (1.0..=1.8).contains(&a) && fast, detail };
    (beta, alpha)
}

fn analytic() -> Outcome {
    let m = StableMeasure::symmetric(1.0, 0.5, 1.0).unwrap();
    let rel = |x: f64, want: f64| ((x - want) / want).abs();
    let mut worst: f64 = 0.0;
    for (l, want) in [(0u32, 0.64), (2, 0.25), (3, 1.0 / 9.0)] {
        let h = (S0 as f64).powi(-(l as i32));
        let d = jump_threshold(&m, h).unwrap();
        worst = worst.max(rel(d, want));
        worst = worst.max(rel(tail_mass(&m, want).unwrap(), 1.0 / h));
    }
    worst = worst.max(rel(small_jump_variance(&m, 0.25).unwrap(), 1.0 / 6.0));
    Outcome { pass: worst <= 1e-9, detail: format!("largest relative error {worst:.2e} <= 1e-9") }
}

fn coupling_marginals() -> Outcome {
    let m = model();
    let coeff = Coefficient::Linear(1.0);
    let n = 10_000;
    let crit = ks_critical_1pct(n, n);
    let key = StreamKey::new(SEED).child(4);
    let mut parts = Vec::new();
    let mut pass = true;
    for l in [2u32, 4, 6] {
        let fine = m.level(l, S0).unwrap();
        let coarse = m.level(l - 1, S0).unwrap();
        let mk = m.coupled_kernel(fine, coarse, coeff.clone()).unwrap();
        let qf = m.kernel(fine, coeff.clone()).unwrap();
        let qc = m.kernel(coarse, coeff.clone()).unwrap();
        let lk = key.child(l as u64);
        let pairs: Vec<(f64, f64)> = (0..n)
            .map(|i| {
                let (a, b, _) = mk.propagate_pair(1.0, 1.0, &mut lk.child(0).child(i as u64).rng());
                (a, b)
            })
            .collect();
        let f: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let c: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let q_l: Vec<f64> = (0..n).map(|i| qf.propagate(1.0, &mut lk.child(1).child(i as u64).rng()).0).collect();
        let q_prev: Vec<f64> = (0..n).map(|i| qc.propagate(1.0, &mut lk.child(2).child(i as u64).rng()).0).collect();
        let d_f = ks_statistic(&f, &q_l);
        let d_c = ks_statistic(&c, &q_prev);
        pass &= d_f <= crit && d_c <= crit;
        parts.push(format!("l={l}: D_fine={d_f:.4}, D_coarse={d_c:.4}"));
    }
    Outcome { pass, detail: format!("{}; critical {crit:.4}", parts.join("; ")) }
}

fn exponential_weights(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

fn resampling_unbiased() -> Outcome {
    let key = StreamKey::new(SEED).child(5);
    let repeats = 10_000;
    let mut worst: f64 = 0.0;
    let mut masses = Vec::new();
    for pair in 0..20u64 {
        let mut rng = key.child(pair).rng();
        let n = rng.random_range(2..=40usize);
        let (wf, wc) = match pair {
            0 => {
                let w = exponential_weights(&mut rng, n);
                (w.clone(), w)
            }
            1 => {
                let h = n / 2;
                let mut a = exponential_weights(&mut rng, h);
                let mut b = exponential_weights(&mut rng, n - h);
                a.extend(std::iter::repeat_n(0.0, n - h));
                b.splice(0..0, std::iter::repeat_n(0.0, h));
                (a, b)
            }
            _ => (exponential_weights(&mut rng, n), exponential_weights(&mut rng, n)),
        };
        let yf: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
        let yc: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
        let mut ce = CoupledEnsemble::uniform(1, yf.clone(), yc.clone());
        ce.fine_weights = wf.clone();
        ce.coarse_weights = wc.clone();
        let mut mf = Vec::with_capacity(repeats);
        let mut mc = Vec::with_capacity(repeats);
        let mut mass = 0.0;
        for r in 0..repeats {
            let (out, draw) = coupled_resample(&ce, &mut key.child(pair).child(1 + r as u64).rng());
            mass = draw.common_mass;
            mf.push(out.fine_states.iter().sum::<f64>() / n as f64);
            mc.push(out.coarse_states.iter().sum::<f64>() / n as f64);
        }
        masses.push(mass);
        for (means, w, y) in [(&mf, &wf, &yf), (&mc, &wc, &yc)] {
            let target: f64 = w.iter().zip(y).map(|(a, b)| a * b).sum();
            let (m, se) = mean_se(means);
            worst = worst.max((m - target).abs() / se);
        }
    }
    let lo = masses.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = masses.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Outcome {
        pass: worst <= 4.0 && lo == 0.0 && hi >= 1.0 - 1e-12,
        detail: format!("largest |z| = {worst:.2} over 20 pairs x 2 branches (<= 4); common mass range [{lo:.3}, {hi:.3}]"),
    }
}

fn nc_oracle() -> Outcome {
    let m = model();
    let level = 3;
    let k = m.kernel(m.level(level, S0).unwrap(), Coefficient::Linear(1.0)).unwrap();
    let obs = vec![1.2, 0.8];
    let pot = GaussianObs { observations: obs.clone() };
    let tests = [TestFunction::one()];
    let key = StreamKey::new(SEED).child(6);
    let fk = FeynmanKacModel { kernel: &k, potential: &pot, horizon: 2, y0: 1.0 };
    let pf: Vec<f64> =
        (0..100).map(|r| run_pf(fk, 10_000, 0.5, &tests, key.child(0).child(r)).unwrap().nc_estimate(0)).collect();
    let pf = mean_se(&pf);

    // Outer draws of Y_1, inner conditional draws of Y_2 given each Y_1.
    let inner = 10;
    let outer: Vec<f64> = (0..100_000u64)
        .map(|i| {
            let mut rng = key.child(1).child(i).rng();
            let y1 = k.propagate(1.0, &mut rng).0;
            let g2: f64 = (0..inner).map(|_| gaussian_potential(obs[1], k.propagate(y1, &mut rng).0)).sum::<f64>();
            gaussian_potential(obs[0], y1) * g2 / inner as f64
        })
        .collect();
    let oracle = mean_se(&outer);
    Outcome {
        pass: within(pf, oracle, 3.0),
        detail: format!(
            "PF {:.6e} +- {:.2e}, nested MC {:.6e} +- {:.2e}, |diff| / combined s.e. = {:.2} (<= 3)",
            pf.0,
            pf.1,
            oracle.0,
            oracle.1,
            (pf.0 - oracle.0).abs() / (pf.1.powi(2) + oracle.1.powi(2)).sqrt()
        ),
    }
}

fn cost_slopes() -> Outcome {
    let m = model();
    let key = StreamKey::new(SEED);
    let problem = FilterProblem::synthetic(&m, 10, S0, 10, key).unwrap();
    let exp = Experiment {
        model: m,
        sde: SdeSpec::geometric(1.0),
        s0: S0,
        threshold: 0.5,
        problem: Problem::Filter(problem),
        tests: vec![exp_fn()],
        estimand: Estimand::Filter(0),
    };
    let ml = MlConfig::default();
    let epsilons: Vec<f64> = (1..=5).map(|l| 2f64.powf(-1.5 * l as f64)).collect();
    let reference = reference_solution(&exp, 8, 100_000, 10, key).unwrap();
    let pf = mse_vs_cost(&exp, EstimatorKind::Pf, &ml, &epsilons, 50, reference.value, key).unwrap();
    let mlpf = mse_vs_cost(&exp, EstimatorKind::Mlpf, &ml, &epsilons, 50, reference.value, key).unwrap();
    let ps = pf.fit.map_or(f64::NAN, |f| f.slope);
    let ms = mlpf.fit.map_or(f64::NAN, |f| f.slope);
    let cheaper = (3..5).all(|i| mlpf.points[i].mean_cost < pf.points[i].mean_cost);
    let pf_ok = (-0.82..=-0.52).contains(&ps);
    let ml_ok = ms <= -0.8;
    let costs: Vec<String> =
        (3..5).map(|i| format!("{:.3e} vs {:.3e}", mlpf.points[i].mean_cost, pf.points[i].mean_cost)).collect();
    Outcome {
        pass: pf_ok && ml_ok && cheaper,
        detail: format!(
            "PF slope {ps:.3} in [-0.82, -0.52]: {}; MLPF slope {ms:.3} <= -0.8: {}; MLPF cost < PF cost at two smallest eps ({}): {}; reference {:.6} +- {:.1e}",
            yes(pf_ok),
            yes(ml_ok),
            costs.join(", "),
            yes(cheaper),
            reference.value,
            reference.se
        ),
    }
}

fn yes(b: bool) -> &'static str {
    if b {
        "yes"
    } else {
        "no"
    }
}

fn barrier() -> Outcome {
    let m = model();
    let key = StreamKey::new(SEED).child(8);
    let problem = BarrierProblem::default();
    let exp = Experiment {
        model: m,
        sde: SdeSpec::geometric(problem.y0),
        s0: S0,
        threshold: 0.5,
        tests: vec![problem.correction_function()],
        problem: Problem::Barrier(problem),
        estimand: Estimand::NormalizingConstant(0),
    };
    let alloc = allocate_levels(&MlConfig::with_epsilon(2f64.powi(-6))).unwrap();
    let ml: Vec<f64> =
        (0..100u64).map(|r| exp.run_mlpf(&alloc.particles, key.child(0).child(r)).unwrap().value).collect();
    let ml = mean_se(&ml);
    let reference = reference_solution(&exp, 7, 100_000, 10, key).unwrap();
    let r = (reference.value, reference.se);
    let mut detail = format!(
        "L = {}, N_l = {:?}: ML {:.6e} +- {:.2e}, level-7 PF reference {:.6e} +- {:.2e}, within 3 combined s.e.",
        alloc.max_level, alloc.particles, ml.0, ml.1, r.0, r.1
    );
    if ml == (0.0, 0.0) && r == (0.0, 0.0) {
        detail.push_str("; note: degenerate, both estimates are exactly 0");
    }
    Outcome { pass: within(ml, r, 3.0), detail }
}

fn runner() -> TestRunner {
    let config = Config { cases: 1000, failure_persistence: None, ..Config::default() };
    TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha))
}

fn suite<S: Strategy>(
    name: &str,
    strategy: S,
    test: impl Fn(S::Value) -> Result<(), TestCaseError>,
) -> (String, bool) {
    match runner().run(&strategy, test) {
        Ok(()) => (format!("{name} ok"), true),
        Err(e) => (format!("{name} failed: {e}"), false),
    }
}

fn sorted_arrivals() -> impl Strategy<Value = Vec<(f64, f64)>> {
    prop::collection::vec((0.0..1.0f64, -1.0..1.0f64), 0..30).prop_map(|mut v| {
        v.sort_by(|a, b| a.0.total_cmp(&b.0));
        v.dedup_by(|a, b| a.0 == b.0);
        v
    })
}

fn properties() -> Outcome {
    let mut results = Vec::new();

    results.push(suite(
        "weight normalization",
        prop::collection::vec((0.0..1.0f64, 1e-6..10.0f64), 1..200),
        |v| {
            let mut ens = Ensemble::uniform(vec![0.0; v.len()]);
            ens.weights = v.iter().map(|p| p.0 + 1e-9).collect();
            let s: f64 = ens.weights.iter().sum();
            ens.weights.iter_mut().for_each(|w| *w /= s);
            let g: Vec<f64> = v.iter().map(|p| p.1).collect();
            ens.reweight(&g).map_err(|e| TestCaseError::fail(e.to_string()))?;
            let total: f64 = ens.weights.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            prop_assert!(ens.weights.iter().all(|w| *w >= 0.0));
            Ok(())
        },
    ));

    results.push(suite("ESS bounds", prop::collection::vec(0.0..1.0f64, 1..300), |raw| {
        let s: f64 = raw.iter().sum();
        prop_assume!(s > 0.0);
        let w: Vec<f64> = raw.iter().map(|x| x / s).collect();
        let e = ess(&w);
        let n = w.len() as f64;
        prop_assert!(e >= 1.0 - 1e-9 && e <= n * (1.0 + 1e-9), "ess {} for n {}", e, n);
        Ok(())
    }));

    results.push(suite("skeleton gap bound", (sorted_arrivals(), 0u32..10, any::<u64>()), |(arr, l, seed)| {
        let h = 2f64.powi(-(l as i32));
        let s = refine_jump_times(&arr, h);
        prop_assert!(s.max_gap() <= h + 1e-12);
        prop_assert!((s.times.last().copied().unwrap_or(0.0) - 1.0).abs() < 1e-12);
        let m = model();
        let k = m.kernel(m.level(l.min(8), S0).unwrap(), Coefficient::Linear(1.0)).unwrap();
        let drawn = k.skeleton(&mut StreamKey::new(seed).rng());
        prop_assert!(drawn.max_gap() <= k.params().h + 1e-12);
        Ok(())
    }));

    results.push(suite("coarse times within fine times", (sorted_arrivals(), 1u32..10, 0.01..1.0f64), |(arr, l, dc)| {
        let hf = 2f64.powi(-(l as i32));
        let cs = refine_coupled(&arr, hf, 2.0 * hf, dc);
        prop_assert!(cs.coarse.times.iter().all(|t| cs.fine.times.contains(t)));
        prop_assert!(cs.fine.max_gap() <= hf + 1e-12);
        prop_assert!(cs.coarse.max_gap() <= 2.0 * hf + 1e-12);
        Ok(())
    }));

    let one_sided = LevyModel::pure_jump(StableMeasure::one_sided(1.0, 0.5, 1.0).unwrap());
    results.push(suite("compensated zero mean", (0u32..=6, -2.0..2.0f64, any::<u64>()), |(l, y0, seed)| {
        let k = one_sided.kernel(one_sided.level(l, S0).unwrap(), Coefficient::Constant(1.0)).unwrap();
        let key = StreamKey::new(seed);
        let d: Vec<f64> = (0..2000u64).map(|i| k.propagate(y0, &mut key.child(i).rng()).0 - y0).collect();
        let (m, se) = mean_se(&d);
        prop_assert!((m / se).abs() < 5.0, "level {} mean {} se {}", l, m, se);
        Ok(())
    }));

    let pool1 = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let pool2 = rayon::ThreadPoolBuilder::new().num_threads(2).build().unwrap();
    let dm = model();
    results.push(suite(
        "determinism under seed",
        (any::<u64>(), 2usize..600, 1usize..4, 0u32..3),
        |(seed, n, horizon, level)| {
            let obs: Vec<f64> = (0..horizon).map(|k| 1.0 + 0.1 * k as f64).collect();
            let pot = GaussianObs { observations: obs };
            let tests = filter_test_functions();
            let key = StreamKey::new(seed);
            let go = || {
                let k = dm.kernel(dm.level(level, S0).unwrap(), Coefficient::Linear(1.0)).unwrap();
                let fk = FeynmanKacModel { kernel: &k, potential: &pot, horizon, y0: 1.0 };
                let r = run_pf(fk, n, 0.5, &tests, key).unwrap();
                let ml = run_mlpf(&dm, &Coefficient::Linear(1.0), S0, &pot, horizon, 1.0, &[n, n / 2 + 2], 0.5, &tests, key)
                    .unwrap();
                let lnc = r.log_nc();
                (r.final_ensemble.states, r.final_ensemble.weights, lnc, ml.filter_estimate(2).unwrap().value)
            };
            let a = pool1.install(go);
            let b = pool2.install(go);
            let c = pool1.install(go);
            prop_assert!(a.0 == b.0 && a.1 == b.1 && a.2.to_bits() == b.2.to_bits() && a.3.to_bits() == b.3.to_bits());
            prop_assert!(a.0 == c.0 && a.3.to_bits() == c.3.to_bits());
            Ok(())
        },
    ));

    let pass = results.iter().all(|r| r.1);
    let names: Vec<String> = results.into_iter().map(|r| r.0).collect();
    Outcome { pass, detail: format!("1000 cases each: {}", names.join("; ")) }
}

fn main() {
    let mut failed = Vec::new();
    let mut record = |id: u32, name: &str, start: Instant, o: Outcome| {
        report(id, name, start, &o);
        if !o.pass {
            failed.push(id);
        }
    };

    let t = Instant::now();
    let (beta, alpha) = rates();
    record(1, "strong rate", t, beta);
    record(2, "weak rate", t, alpha);
    let t = Instant::now();
    record(3, "analytic formulas", t, analytic());
    let t = Instant::now();
    record(4, "coupling marginals", t, coupling_marginals());
    let t = Instant::now();
    record(5, "coupled resampling unbiasedness", t, resampling_unbiased());
    let t = Instant::now();
    record(6, "normalizing constant", t, nc_oracle());
    let t = Instant::now();
    record(7, "cost-slope separation", t, cost_slopes());
    let t = Instant::now();
    record(8, "barrier option", t, barrier());
    let t = Instant::now();
    record(9, "property suites", t, properties());

    if failed.is_empty() {
        println!("acceptance: all 9 criteria passed");
    } else {
        println!("acceptance: {} of 9 criteria failed: {failed:?}", failed.len());
        std::process::exit(1);
    }
}
