//! Coupled fine/coarse kernel.
//!
//! A single fine jump stream drives both resolutions. The coarse level keeps
//! only the fine jumps of size at least its own threshold and refines its
//! grid with the coarse step; the fine grid is the union of both grids. The
//! two Euler recursions share Brownian increments: a coarse increment is the
//! sum of the fine increments it spans.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::discretize::{exp_waiting_time, Coefficient, JumpSkeleton, LevelKernel, TIME_EPS};
use crate::error::config;
use crate::levy_measure::{JumpLaw, LevelParams, LevyMeasure, LevyModel};
use crate::rng::SimRng;
use crate::Result;

/// One point of the joint grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct CoupledEvent {
    pub t: f64,
    pub fine_jump: f64,
    /// The point also belongs to the coarse grid.
    pub coarse: bool,
    pub coarse_jump: f64,
}

/// Streams the joint grid for one unit of time. Three clocks run side by
/// side: the fine arrivals, the fine refinement chain (anchored at fine
/// arrivals and fine refinement points only) and the coarse refinement chain
/// (anchored at coarse points).
struct CoupledWalker {
    h_fine: f64,
    h_coarse: f64,
    rate: f64,
    delta_coarse: f64,
    t_fine: f64,
    t_coarse: f64,
    next_arrival: f64,
    done: bool,
}

impl CoupledWalker {
    fn new(h_fine: f64, h_coarse: f64, rate: f64, delta_coarse: f64, rng: &mut SimRng) -> Self {
        CoupledWalker {
            h_fine,
            h_coarse,
            rate,
            delta_coarse,
            t_fine: 0.0,
            t_coarse: 0.0,
            next_arrival: exp_waiting_time(rate, rng),
            done: false,
        }
    }

    #[inline]
    fn next<J: JumpLaw>(&mut self, jumps: &J, rng: &mut SimRng) -> Option<CoupledEvent> {
        if self.done {
            return None;
        }
        let cf = self.t_fine + self.h_fine;
        let cc = self.t_coarse + self.h_coarse;
        let ta = self.next_arrival;
        if ta < 1.0 && ta <= cf && ta <= cc + TIME_EPS {
            let dl = jumps.sample(rng);
            self.next_arrival = ta + exp_waiting_time(self.rate, rng);
            self.t_fine = ta;
            let big = dl.abs() >= self.delta_coarse;
            let coarse = big || (cc - ta).abs() <= TIME_EPS;
            if coarse {
                self.t_coarse = ta;
            }
            return Some(CoupledEvent {
                t: ta,
                fine_jump: dl,
                coarse,
                coarse_jump: if big { dl } else { 0.0 },
            });
        }
        let m = cf.min(cc);
        if m >= 1.0 - TIME_EPS {
            self.done = true;
            return Some(CoupledEvent { t: 1.0, fine_jump: 0.0, coarse: true, coarse_jump: 0.0 });
        }
        if cf - m <= TIME_EPS {
            self.t_fine = m;
        }
        let coarse = cc - m <= TIME_EPS;
        if coarse {
            self.t_coarse = m;
        }
        Some(CoupledEvent { t: m, fine_jump: 0.0, coarse, coarse_jump: 0.0 })
    }
}

/// Joint fine/coarse skeleton with the shared Brownian path.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CoupledSkeleton {
    pub fine: JumpSkeleton,
    pub coarse: JumpSkeleton,
    /// Standard Brownian increment over each fine sub-interval.
    pub fine_dw: Vec<f64>,
    /// Fine grid points that are also coarse grid points.
    pub on_coarse: Vec<bool>,
}

impl CoupledSkeleton {
    fn push(&mut self, ev: CoupledEvent, dw: f64) {
        self.fine.times.push(ev.t);
        self.fine.heights.push(ev.fine_jump);
        self.fine_dw.push(dw);
        self.on_coarse.push(ev.coarse);
        if ev.coarse {
            self.coarse.times.push(ev.t);
            self.coarse.heights.push(ev.coarse_jump);
        }
    }

    /// Brownian increments over the coarse sub-intervals.
    pub fn coarse_dw(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.coarse.k());
        let mut acc = 0.0;
        for (dw, on) in self.fine_dw.iter().zip(&self.on_coarse) {
            acc += dw;
            if *on {
                out.push(acc);
                acc = 0.0;
            }
        }
        out
    }
}

/// Builds the joint grid from given fine arrivals, without randomness.
pub fn refine_coupled(arrivals: &[(f64, f64)], h_fine: f64, h_coarse: f64, delta_coarse: f64) -> CoupledSkeleton {
    let mut out = CoupledSkeleton::default();
    let mut it = arrivals.iter().copied();
    let mut next = it.next();
    let (mut tf, mut tc) = (0.0f64, 0.0f64);
    loop {
        let cf = tf + h_fine;
        let cc = tc + h_coarse;
        if let Some((ta, dl)) = next.filter(|(ta, _)| *ta < 1.0 && *ta <= cf && *ta <= cc + TIME_EPS) {
            next = it.next();
            tf = ta;
            let big = dl.abs() >= delta_coarse;
            let coarse = big || (cc - ta).abs() <= TIME_EPS;
            if coarse {
                tc = ta;
            }
            out.push(
                CoupledEvent { t: ta, fine_jump: dl, coarse, coarse_jump: if big { dl } else { 0.0 } },
                0.0,
            );
            continue;
        }
        let m = cf.min(cc);
        if m >= 1.0 - TIME_EPS {
            out.push(CoupledEvent { t: 1.0, fine_jump: 0.0, coarse: true, coarse_jump: 0.0 }, 0.0);
            return out;
        }
        if cf - m <= TIME_EPS {
            tf = m;
        }
        let coarse = cc - m <= TIME_EPS;
        if coarse {
            tc = m;
        }
        out.push(CoupledEvent { t: m, fine_jump: 0.0, coarse, coarse_jump: 0.0 }, 0.0);
    }
}

/// A unit-time coupling of two transitions.
pub trait CoupledTransition: Send + Sync {
    /// Fine level `l`; the coarse level is `l - 1`.
    fn level(&self) -> u32;

    /// Returns the new fine and coarse states and the Euler sub-steps used
    /// by both recursions together.
    fn propagate_pair(&self, y_fine: f64, y_coarse: f64, rng: &mut SimRng) -> (f64, f64, u64);
}

/// The coupled kernel `M^l` pairing `Q^l` with `Q^(l-1)`.
#[derive(Clone, Debug)]
pub struct CoupledKernel<J> {
    fine: LevelKernel<J>,
    coarse_lp: LevelParams,
    /// `b - F0` at the coarse level.
    coarse_drift: f64,
}

impl<J: JumpLaw> CoupledKernel<J> {
    pub fn fine_params(&self) -> &LevelParams {
        &self.fine.lp
    }

    pub fn coarse_params(&self) -> &LevelParams {
        &self.coarse_lp
    }

    fn walker(&self, rng: &mut SimRng) -> CoupledWalker {
        CoupledWalker::new(self.fine.lp.h, self.coarse_lp.h, self.fine.lp.lambda, self.coarse_lp.delta, rng)
    }

    #[inline]
    fn brownian(&self, dt: f64, rng: &mut SimRng) -> f64 {
        if self.fine.sqrt_sigma > 0.0 {
            dt.sqrt() * rng.sample::<f64, _>(StandardNormal)
        } else {
            0.0
        }
    }

    pub fn skeleton(&self, rng: &mut SimRng) -> CoupledSkeleton {
        let mut walker = self.walker(rng);
        let mut out = CoupledSkeleton::default();
        let mut prev = 0.0;
        while let Some(ev) = walker.next(&self.fine.jumps, rng) {
            let dw = self.brownian(ev.t - prev, rng);
            prev = ev.t;
            out.push(ev, dw);
        }
        out
    }

    /// Runs both recursions along a materialized joint skeleton.
    pub fn propagate_along(&self, mut yf: f64, mut yc: f64, cs: &CoupledSkeleton) -> (f64, f64) {
        let (mut pf, mut pc, mut acc) = (0.0, 0.0, 0.0);
        let coeff = &self.fine.coeff;
        let s = self.fine.sqrt_sigma;
        for i in 0..cs.fine.k() {
            let t = cs.fine.times[i];
            let dw = cs.fine_dw[i];
            yf += coeff.eval(yf) * (s * dw + cs.fine.heights[i] + self.fine.drift * (t - pf));
            pf = t;
            acc += dw;
            if cs.on_coarse[i] {
                let dl = if cs.fine.heights[i].abs() >= self.coarse_lp.delta { cs.fine.heights[i] } else { 0.0 };
                yc += coeff.eval(yc) * (s * acc + dl + self.coarse_drift * (t - pc));
                pc = t;
                acc = 0.0;
            }
        }
        (yf, yc)
    }
}

impl<J: JumpLaw> CoupledTransition for CoupledKernel<J> {
    fn level(&self) -> u32 {
        self.fine.lp.level
    }

    #[inline]
    fn propagate_pair(&self, mut yf: f64, mut yc: f64, rng: &mut SimRng) -> (f64, f64, u64) {
        let mut walker = self.walker(rng);
        let coeff = &self.fine.coeff;
        let s = self.fine.sqrt_sigma;
        let (mut pf, mut pc, mut acc) = (0.0, 0.0, 0.0);
        let mut steps = 0u64;
        while let Some(ev) = walker.next(&self.fine.jumps, rng) {
            let dt = ev.t - pf;
            let dw = self.brownian(dt, rng);
            yf += coeff.eval(yf) * (s * dw + ev.fine_jump + self.fine.drift * dt);
            pf = ev.t;
            acc += dw;
            steps += 1;
            if ev.coarse {
                yc += coeff.eval(yc) * (s * acc + ev.coarse_jump + self.coarse_drift * (ev.t - pc));
                pc = ev.t;
                acc = 0.0;
                steps += 1;
            }
        }
        (yf, yc, steps)
    }
}

impl<M: LevyMeasure> LevyModel<M> {
    pub fn coupled_kernel(
        &self,
        fine: LevelParams,
        coarse: LevelParams,
        coeff: Coefficient,
    ) -> Result<CoupledKernel<M::Jumps>> {
        if fine.level != coarse.level + 1 {
            return Err(config(format!(
                "coupled levels must be adjacent, got fine {} and coarse {}",
                fine.level, coarse.level
            )));
        }
        if !(fine.delta < coarse.delta && fine.h < coarse.h) {
            return Err(config(format!(
                "fine level must be strictly finer: h {} vs {}, delta {} vs {}",
                fine.h, coarse.h, fine.delta, coarse.delta
            )));
        }
        Ok(CoupledKernel {
            fine: self.kernel(fine, coeff)?,
            coarse_drift: self.drift - coarse.f0,
            coarse_lp: coarse,
        })
    }
}

pub fn generate_coupled_skeleton<M: LevyMeasure>(
    lp_fine: &LevelParams,
    lp_coarse: &LevelParams,
    model: &LevyModel<M>,
    rng: &mut SimRng,
) -> Result<CoupledSkeleton> {
    Ok(model.coupled_kernel(*lp_fine, *lp_coarse, Coefficient::Zero)?.skeleton(rng))
}

/// One draw from `M^l((y_fine, y_coarse), .)`.
pub fn propagate_m<M: LevyMeasure>(
    y_fine: f64,
    y_coarse: f64,
    lp_fine: &LevelParams,
    lp_coarse: &LevelParams,
    model: &LevyModel<M>,
    coeff: &Coefficient,
    rng: &mut SimRng,
) -> Result<(f64, f64)> {
    let k = model.coupled_kernel(*lp_fine, *lp_coarse, coeff.clone())?;
    let (a, b, _) = k.propagate_pair(y_fine, y_coarse, rng);
    Ok((a, b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discretize::{propagate_q, SdeSpec, Transition};
    use crate::levy_measure::StableMeasure;
    use crate::rng::StreamKey;

    fn model() -> LevyModel {
        LevyModel::pure_jump(StableMeasure::symmetric(1.0, 0.5, 1.0).unwrap())
    }

    fn levels(m: &LevyModel, l: u32) -> (LevelParams, LevelParams) {
        (m.level(l, 2).unwrap(), m.level(l - 1, 2).unwrap())
    }

    fn ks_two_sample(a: &mut [f64], b: &mut [f64]) -> f64 {
        a.sort_by(|x, y| x.partial_cmp(y).unwrap());
        b.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let (n, m) = (a.len(), b.len());
        let (mut i, mut j, mut d) = (0, 0, 0.0f64);
        while i < n && j < m {
            let x = a[i].min(b[j]);
            while i < n && a[i] <= x {
                i += 1;
            }
            while j < m && b[j] <= x {
                j += 1;
            }
            d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
        }
        d
    }

    #[test]
    fn coarse_grid_is_contained_in_fine_grid() {
        let m = model();
        let mut rng = StreamKey::new(1).rng();
        for case in 0..2000u32 {
            let (f, c) = levels(&m, 1 + case % 8);
            let cs = generate_coupled_skeleton(&f, &c, &m, &mut rng).unwrap();
            assert!(cs.fine.max_gap() <= f.h + 1e-12);
            assert!(cs.coarse.max_gap() <= c.h + 1e-12);
            assert_eq!(*cs.coarse.times.last().unwrap(), 1.0);
            let mut fi = 0;
            for (t, dl) in cs.coarse.times.iter().zip(&cs.coarse.heights) {
                while cs.fine.times[fi] != *t {
                    fi += 1;
                }
                if *dl != 0.0 {
                    assert_eq!(*dl, cs.fine.heights[fi]);
                    assert!(dl.abs() >= c.delta);
                }
            }
            let big_fine = cs.fine.jumps().filter(|(_, x)| x.abs() >= c.delta).count();
            assert_eq!(big_fine, cs.coarse.jumps().count());
        }
    }

    #[test]
    fn walker_matches_deterministic_refinement() {
        let m = model();
        for seed in 0..300 {
            let (f, c) = levels(&m, 1 + seed as u32 % 7);
            let cs = generate_coupled_skeleton(&f, &c, &m, &mut StreamKey::new(seed).rng()).unwrap();
            let arrivals: Vec<_> = cs.fine.jumps().collect();
            assert_eq!(refine_coupled(&arrivals, f.h, c.h, c.delta), cs);
        }
    }

    #[test]
    fn all_big_jumps_pass_to_coarse() {
        let arrivals = [(0.1, 0.9), (0.35, -0.7), (0.8, 0.6)];
        let cs = refine_coupled(&arrivals, 0.25, 0.5, 0.5);
        let fine: Vec<_> = cs.fine.jumps().collect();
        let coarse: Vec<_> = cs.coarse.jumps().collect();
        assert_eq!(fine, coarse);
        assert_eq!(fine.len(), 3);
    }

    #[test]
    fn no_jumps_give_nested_pure_grids() {
        let cs = refine_coupled(&[], 0.25, 0.5, 0.5);
        assert_eq!(cs.coarse.times, vec![0.5, 1.0]);
        assert_eq!(cs.fine.times, vec![0.25, 0.5, 0.75, 1.0]);
        assert_eq!(cs.on_coarse, vec![false, true, false, true]);
    }

    #[test]
    fn small_jump_breaks_coarse_refinement_chain_only_for_fine() {
        // A small fine jump at 0.3 re-anchors the fine chain (next at 0.55) but
        // not the coarse chain (next at 0.5); the union carries both.
        let cs = refine_coupled(&[(0.3, 0.1)], 0.25, 0.5, 0.5);
        assert_eq!(cs.coarse.times, vec![0.5, 1.0]);
        assert_eq!(cs.fine.times, vec![0.25, 0.3, 0.5, 0.55, 0.8, 1.0]);
        assert!(cs.coarse.heights.iter().all(|h| *h == 0.0));
    }

    #[test]
    fn surviving_fraction_is_rate_ratio() {
        let m = model();
        let (f, c) = levels(&m, 4);
        let mut rng = StreamKey::new(4).rng();
        let (mut total, mut kept) = (0usize, 0usize);
        while total < 100_000 {
            let cs = generate_coupled_skeleton(&f, &c, &m, &mut rng).unwrap();
            total += cs.fine.jumps().count();
            kept += cs.coarse.jumps().count();
        }
        let p = kept as f64 / total as f64;
        let se = (0.25 / total as f64).sqrt();
        assert!((p - 0.5).abs() < 4.0 * se, "fraction {p}");
    }

    #[test]
    fn zero_coefficient_pair_is_unchanged() {
        let m = model();
        let (f, c) = levels(&m, 3);
        let mut rng = StreamKey::new(2).rng();
        for _ in 0..100 {
            let out = propagate_m(1.5, -2.0, &f, &c, &m, &Coefficient::Zero, &mut rng).unwrap();
            assert_eq!(out, (1.5, -2.0));
        }
    }

    #[test]
    fn additive_difference_is_sum_of_small_jumps() {
        let m = model();
        let (f, c) = levels(&m, 3);
        let k = m.coupled_kernel(f, c, Coefficient::Constant(1.0)).unwrap();
        for seed in 0..200 {
            let cs = k.skeleton(&mut StreamKey::new(seed).rng());
            let (yf, yc, _) = k.propagate_pair(0.0, 0.0, &mut StreamKey::new(seed).rng());
            let small: f64 = cs.fine.jumps().filter(|(_, x)| x.abs() < c.delta).map(|(_, x)| x).sum();
            assert!((yf - yc - small).abs() < 1e-12);
        }
    }

    #[test]
    fn one_sided_measure_uses_both_compensators() {
        let m = LevyModel::pure_jump(StableMeasure::one_sided(1.0, 0.5, 1.0).unwrap());
        let (f, c) = (m.level(3, 2).unwrap(), m.level(2, 2).unwrap());
        assert!(f.f0 > c.f0);
        let k = m.coupled_kernel(f, c, Coefficient::Constant(1.0)).unwrap();
        for seed in 0..200 {
            let cs = k.skeleton(&mut StreamKey::new(seed).rng());
            let (yf, yc, _) = k.propagate_pair(0.0, 0.0, &mut StreamKey::new(seed).rng());
            let fine_sum: f64 = cs.fine.heights.iter().sum();
            let coarse_sum: f64 = cs.coarse.heights.iter().sum();
            assert!((yf - (fine_sum - f.f0)).abs() < 1e-12);
            assert!((yc - (coarse_sum - c.f0)).abs() < 1e-12);
        }
    }

    #[test]
    fn brownian_increments_are_shared() {
        let m = LevyModel::new(StableMeasure::symmetric(1.0, 0.5, 1.0).unwrap(), 0.4, 0.2).unwrap();
        let (f, c) = levels(&m, 3);
        let k = m.coupled_kernel(f, c, Coefficient::Linear(1.0)).unwrap();
        for seed in 0..200 {
            let cs = k.skeleton(&mut StreamKey::new(seed).rng());
            let cdw = cs.coarse_dw();
            assert_eq!(cdw.len(), cs.coarse.k());
            let total_f: f64 = cs.fine_dw.iter().sum();
            let total_c: f64 = cdw.iter().sum();
            assert!((total_f - total_c).abs() < 1e-12);
            // streamed and materialized recursions agree bit for bit
            let (yf, yc, _) = k.propagate_pair(1.0, 1.0, &mut StreamKey::new(seed).rng());
            let (af, ac) = k.propagate_along(1.0, 1.0, &cs);
            assert_eq!((yf.to_bits(), yc.to_bits()), (af.to_bits(), ac.to_bits()));
        }
    }

    #[test]
    fn level_mismatch_is_rejected() {
        let m = model();
        let a = m.level(3, 2).unwrap();
        let b = m.level(1, 2).unwrap();
        assert!(m.coupled_kernel(a, b, Coefficient::Zero).is_err());
        assert!(m.coupled_kernel(b, a, Coefficient::Zero).is_err());
    }

    #[test]
    fn marginals_match_single_level_kernels() {
        let m = model();
        let spec = SdeSpec::geometric(1.0);
        let n = 10_000;
        let crit = 1.627_6 * (2.0 / n as f64).sqrt();
        for l in [2u32, 5] {
            let (f, c) = levels(&m, l);
            let k = m.coupled_kernel(f, c, spec.coeff.clone()).unwrap();
            let mut rng = StreamKey::new(40 + l as u64).rng();
            let (mut fine, mut coarse): (Vec<f64>, Vec<f64>) =
                (0..n).map(|_| { let (a, b, _) = k.propagate_pair(1.0, 1.0, &mut rng); (a, b) }).unzip();
            let mut qf: Vec<f64> = (0..n).map(|_| propagate_q(1.0, &f, &m, &spec, &mut rng).unwrap()).collect();
            let mut qc: Vec<f64> = (0..n).map(|_| propagate_q(1.0, &c, &m, &spec, &mut rng).unwrap()).collect();
            assert!(ks_two_sample(&mut fine, &mut qf) < crit);
            assert!(ks_two_sample(&mut coarse, &mut qc) < crit);
        }
    }

    /// `E|Y^l - Y^(l-1)|^2` for `a(y) = y`, `y0 = 1`, from the jump moments:
    /// the coarse path is a product over big jumps, the fine path multiplies it
    /// by an independent product over the small ones.
    fn strong_error_closed_form(m: &StableMeasure, fine: f64, coarse: f64) -> f64 {
        let big = m.second_moment_outside(coarse).unwrap();
        let small = m.second_moment_inside(coarse).unwrap() - m.second_moment_inside(fine).unwrap();
        big.exp() * (small.exp() - 1.0)
    }

    #[test]
    fn strong_error_matches_closed_form() {
        let m = model();
        let k_spec = SdeSpec::geometric(1.0);
        let n = 100_000;
        for l in [2u32, 4, 6] {
            let (f, c) = levels(&m, l);
            let k = m.coupled_kernel(f, c, k_spec.coeff.clone()).unwrap();
            let mut rng = StreamKey::new(70 + l as u64).rng();
            let sq: Vec<f64> = (0..n).map(|_| { let (a, b, _) = k.propagate_pair(1.0, 1.0, &mut rng); (a - b).powi(2) }).collect();
            let mean = sq.iter().sum::<f64>() / n as f64;
            let var = sq.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
            let exact = strong_error_closed_form(&m.measure, f.delta, c.delta);
            assert!((mean - exact).abs() < 4.0 * (var / n as f64).sqrt(), "level {l}: {mean} vs {exact}");
        }
    }

    #[test]
    fn replay_is_deterministic() {
        let m = LevyModel::new(StableMeasure::symmetric(1.0, 0.5, 1.0).unwrap(), 0.2, 0.1).unwrap();
        let (f, c) = levels(&m, 4);
        let k = m.coupled_kernel(f, c, Coefficient::Linear(1.0)).unwrap();
        for seed in 0..1000 {
            let a = k.propagate_pair(1.0, 1.0, &mut StreamKey::new(seed).rng());
            let b = k.propagate_pair(1.0, 1.0, &mut StreamKey::new(seed).rng());
            assert_eq!(a.0.to_bits(), b.0.to_bits());
            assert_eq!(a.1.to_bits(), b.1.to_bits());
            assert_eq!(a.2, b.2);
        }
    }

    #[test]
    fn coupled_cost_counts_both_grids() {
        let m = model();
        let (f, c) = levels(&m, 5);
        let k = m.coupled_kernel(f, c, Coefficient::Linear(1.0)).unwrap();
        let single = m.kernel(f, Coefficient::Linear(1.0)).unwrap();
        assert_eq!(single.level(), 5);
        for seed in 0..100 {
            let cs = k.skeleton(&mut StreamKey::new(seed).rng());
            let (_, _, steps) = k.propagate_pair(1.0, 1.0, &mut StreamKey::new(seed).rng());
            assert_eq!(steps as usize, cs.fine.k() + cs.coarse.k());
        }
    }
}
