//! Optimal EH/IT scheduling and power control for a fixed relay selection.
//!
//! Selected relays behave as extra sources carrying the aggregated demand of
//! the sources they serve, which reduces the problem to multi-source
//! scheduling over one shared EH phase of length `tau0`. For fixed `tau0`
//! each source's minimum IT time has a closed form (power-capped regime) or
//! is the root of a strictly decreasing convex equation; the total length is
//! convex in `tau0`, so [`nl_powmu`] bisects on its derivative.

mod lambert;

pub use lambert::lambert_w0;

use serde::{Deserialize, Serialize};
use std::f64::consts::LN_2;

use crate::error::{Error, Result};
use crate::model::{harvest_rate, rate, Assignment, EhParams, NetworkInstance, SystemParams};

/// Default bisection half-width on `tau0`, seconds.
pub const DEFAULT_EPS: f64 = 1e-9;

/// Which physical transmitter an effective source stands for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Node {
    Source(usize),
    /// 1-based relay index.
    Relay(usize),
}

/// A transmitter of the reduced problem: an original source, or a selected
/// relay forwarding everything it collected.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectiveSource {
    pub demand: f64,
    /// Uplink gain to its destination.
    pub gain: f64,
    pub eh: EhParams,
    /// Received downlink power.
    pub p_rx: f64,
    pub node: Node,
}

impl EffectiveSource {
    pub fn new(demand: f64, gain: f64, eh: EhParams, p_rx: f64, node: Node) -> Self {
        Self { demand, gain, eh, p_rx, node }
    }

    pub fn harvest(&self) -> f64 {
        harvest_rate(&self.eh, self.p_rx)
    }

    /// `gamma = g (Psi - M Omega) / (W N0 (1 - Omega))`.
    pub fn gamma(&self, sys: &SystemParams) -> f64 {
        self.gain * self.harvest() / sys.noise_power()
    }

    /// Harvest-weighted gain `phi = g (Psi - M Omega) / (1 - Omega)`.
    pub fn phi(&self) -> f64 {
        self.gain * self.harvest()
    }

    fn bits_per_hz(&self, sys: &SystemParams) -> f64 {
        self.demand / sys.bandwidth_w
    }

    fn validate(&self) -> Result<()> {
        if !(self.demand > 0.0 && self.gain > 0.0 && self.p_rx >= 0.0) {
            return Err(Error::InvalidParameter(format!("bad effective source {self:?}")));
        }
        Ok(())
    }
}

/// EH time, per-source IT times and powers, and the objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub tau0: f64,
    pub it_time: Vec<f64>,
    pub power: Vec<f64>,
    pub total: f64,
}

/// IT time when transmitting at the power cap.
pub fn it_time_pmax(src: &EffectiveSource, sys: &SystemParams) -> f64 {
    src.demand / rate(sys.p_max, src.gain, sys)
}

/// EH time at which the harvest exactly funds [`it_time_pmax`] at `P^max`.
pub fn tau0_threshold(src: &EffectiveSource, sys: &SystemParams) -> f64 {
    sys.p_max * it_time_pmax(src, sys) / src.harvest()
}

/// EH time needed to deliver the demand in IT time `tau`:
/// `(tau / gamma) (2^{D/(W tau)} - 1)`.
pub fn eh_time_for(src: &EffectiveSource, sys: &SystemParams, tau: f64) -> f64 {
    let u = src.bits_per_hz(sys) * LN_2 / tau;
    tau * u.exp_m1() / src.gamma(sys)
}

/// Infimum of [`eh_time_for`] as `tau -> inf`: `D ln2 / (W gamma)`.
pub fn eh_time_limit(src: &EffectiveSource, sys: &SystemParams) -> f64 {
    src.bits_per_hz(sys) * LN_2 / src.gamma(sys)
}

fn eh_time_slope(gamma: f64, u: f64) -> f64 {
    (u.exp_m1() - u * u.exp()) / gamma
}

/// Minimum IT time for a fixed EH time `tau0`.
pub fn solve_subproblem(src: &EffectiveSource, sys: &SystemParams, tau0: f64) -> Result<f64> {
    src.validate()?;
    let limit = eh_time_limit(src, sys);
    if !(tau0 > limit) {
        return Err(Error::Infeasible { tau0, limit });
    }
    let tau_bar = it_time_pmax(src, sys);
    if tau0 >= tau0_threshold(src, sys) {
        return Ok(tau_bar);
    }

    let gamma = src.gamma(sys);
    let c_ln2 = src.bits_per_hz(sys) * LN_2;
    let residual = |tau: f64| tau * (c_ln2 / tau).exp_m1() / gamma - tau0;

    // The EH-time curve is convex and decreasing in tau, so Newton from the
    // left endpoint never overshoots the root.
    let mut tau = tau_bar;
    for _ in 0..200 {
        let h = residual(tau);
        if h.abs() <= 1e-14 * tau0 {
            return Ok(tau);
        }
        let slope = eh_time_slope(gamma, c_ln2 / tau);
        if !(slope < 0.0) || !h.is_finite() {
            break;
        }
        let next = tau - h / slope;
        if !(next > tau) {
            return Ok(tau);
        }
        if (next - tau) <= 1e-15 * next {
            return Ok(next);
        }
        tau = next;
    }

    let (mut lo, mut hi) = (tau_bar, tau_bar.max(tau) * 2.0);
    while residual(hi) > 0.0 {
        lo = hi;
        hi *= 2.0;
        if !hi.is_finite() {
            return Err(Error::Infeasible { tau0, limit });
        }
    }
    for _ in 0..300 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if residual(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// `d tau / d tau0` at the subproblem solution; zero in the power-capped regime.
pub fn it_time_slope(src: &EffectiveSource, sys: &SystemParams, tau0: f64, tau: f64) -> f64 {
    if tau0 >= tau0_threshold(src, sys) {
        return 0.0;
    }
    let u = src.bits_per_hz(sys) * LN_2 / tau;
    1.0 / eh_time_slope(src.gamma(sys), u)
}

/// `alpha = W0((gamma - 1) / e) + 1`.
pub fn alpha(gamma: f64) -> Result<f64> {
    Ok(lambert_w0((gamma - 1.0) / std::f64::consts::E)? + 1.0)
}

/// Unconstrained single-source optimum of `tau0 + tau(tau0)`, ignoring the
/// power cap: `D ln2 / (W alpha gamma) (2^{alpha/ln2} - 1)`.
pub fn tau0_unconstrained_optimum(src: &EffectiveSource, sys: &SystemParams) -> Result<f64> {
    let gamma = src.gamma(sys);
    if !(gamma > 0.0) {
        return Err(Error::InvalidParameter(format!("gamma must be positive, got {gamma}")));
    }
    let a = alpha(gamma)?;
    Ok(src.bits_per_hz(sys) * LN_2 / (a * gamma) * a.exp_m1())
}

/// Optimal EH time of the single-source problem with the power cap active.
pub fn single_source_tau0(src: &EffectiveSource, sys: &SystemParams) -> Result<f64> {
    Ok(tau0_unconstrained_optimum(src, sys)?.min(tau0_threshold(src, sys)))
}

/// Bracket `[lb, ub]` on the optimal EH time.
///
/// `ub` is the largest power-cap threshold; `lb` the largest single-source
/// optimum. Each single-source optimum is the Lambert-W stationary point,
/// capped at that source's threshold, since past it the IT time stops
/// shrinking.
pub fn tau0_bounds(sources: &[EffectiveSource], sys: &SystemParams) -> Result<(f64, f64)> {
    if sources.is_empty() {
        return Err(Error::InvalidParameter("no effective sources".into()));
    }
    let mut lb = 0.0f64;
    let mut ub = 0.0f64;
    for src in sources {
        src.validate()?;
        lb = lb.max(single_source_tau0(src, sys)?);
        ub = ub.max(tau0_threshold(src, sys));
    }
    Ok((lb, ub))
}

/// Objective `g(tau0) = tau0 + sum_i tau_i(tau0)`.
pub fn schedule_length_at(sources: &[EffectiveSource], sys: &SystemParams, tau0: f64) -> Result<f64> {
    let mut total = tau0;
    for src in sources {
        total += solve_subproblem(src, sys, tau0)?;
    }
    Ok(total)
}

fn objective_slope(sources: &[EffectiveSource], sys: &SystemParams, tau0: f64) -> Result<f64> {
    let mut d = 1.0;
    for src in sources {
        let tau = solve_subproblem(src, sys, tau0)?;
        d += it_time_slope(src, sys, tau0, tau);
    }
    Ok(d)
}

/// Build the schedule implied by EH time `tau0`.
pub fn schedule_at(sources: &[EffectiveSource], sys: &SystemParams, tau0: f64) -> Result<Schedule> {
    let mut it_time = Vec::with_capacity(sources.len());
    let mut power = Vec::with_capacity(sources.len());
    for src in sources {
        let tau = solve_subproblem(src, sys, tau0)?;
        let snr = (src.bits_per_hz(sys) * LN_2 / tau).exp_m1();
        let p = (snr * sys.noise_power() / src.gain).clamp(0.0, sys.p_max);
        it_time.push(tau);
        power.push(p);
    }
    let total = tau0 + it_time.iter().sum::<f64>();
    Ok(Schedule { tau0, it_time, power, total })
}

/// Bisection on the EH time using the sign of the objective's derivative.
pub fn nl_powmu(sources: &[EffectiveSource], sys: &SystemParams, eps: f64) -> Result<Schedule> {
    if !(eps > 0.0) {
        return Err(Error::InvalidParameter(format!("eps must be positive, got {eps}")));
    }
    let (mut lb, mut ub) = tau0_bounds(sources, sys)?;
    debug_assert!(lb <= ub, "bounds out of order: {lb} > {ub}");
    let mut tau0 = 0.5 * (lb + ub);
    while ub - lb >= 2.0 * eps {
        tau0 = 0.5 * (lb + ub);
        if tau0 <= lb || tau0 >= ub {
            break;
        }
        let d = objective_slope(sources, sys, tau0)?;
        if d >= 0.0 {
            ub = tau0;
        }
        if d <= 0.0 {
            lb = tau0;
        }
    }
    schedule_at(sources, sys, tau0)
}

/// Reduce an assignment to its effective sources: every original source,
/// followed by each selected relay (ascending index) carrying the summed
/// demand of its sources. Unselected relays do not transmit.
pub fn expand_assignment(inst: &NetworkInstance, a: &Assignment) -> Result<Vec<EffectiveSource>> {
    a.validate(inst.n_sources, inst.k_relays)?;
    let mut out = Vec::with_capacity(inst.n_sources + inst.k_relays);
    let mut relay_load = vec![0.0; inst.k_relays + 1];
    for (i, &j) in a.choice.iter().enumerate() {
        out.push(EffectiveSource::new(
            inst.demand[i],
            inst.ul_src[i][j],
            *inst.source_eh(i),
            inst.source_p_rx(i),
            Node::Source(i),
        ));
        relay_load[j] += inst.demand[i];
    }
    for j in 1..=inst.k_relays {
        if relay_load[j] > 0.0 {
            out.push(EffectiveSource::new(
                relay_load[j],
                inst.ul_relay[j - 1],
                *inst.relay_eh(j),
                inst.relay_p_rx(j),
                Node::Relay(j),
            ));
        }
    }
    Ok(out)
}

/// Optimal schedule for a fixed assignment.
pub fn schedule_assignment(inst: &NetworkInstance, a: &Assignment, eps: f64) -> Result<Schedule> {
    let sources = expand_assignment(inst, a)?;
    nl_powmu(&sources, &inst.sys, eps)
}

/// Largest relative violation of each constraint family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleCheck {
    pub energy: f64,
    pub demand: f64,
    pub power: f64,
    pub nonneg: f64,
    /// `|total - (tau0 + sum it_time)| / total`.
    pub objective: f64,
    pub feasible: bool,
}

pub const FEASIBILITY_TOL: f64 = 1e-7;

/// Check a schedule against energy causality, demand, power caps and
/// non-negativity. Entries of `s` follow [`expand_assignment`] order.
pub fn verify_schedule(inst: &NetworkInstance, a: &Assignment, s: &Schedule) -> Result<ScheduleCheck> {
    let sources = expand_assignment(inst, a)?;
    if s.it_time.len() != sources.len() || s.power.len() != sources.len() {
        return Err(Error::Shape(format!(
            "schedule has {} entries, assignment implies {}",
            s.it_time.len(),
            sources.len()
        )));
    }
    let sys = &inst.sys;
    let (mut energy, mut demand, mut power, mut nonneg) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let scale = s.total.abs().max(f64::MIN_POSITIVE);
    nonneg = nonneg.max(-s.tau0 / scale);
    for ((src, &tau), &p) in sources.iter().zip(&s.it_time).zip(&s.power) {
        nonneg = nonneg.max(-tau / scale).max(-p / sys.p_max);
        let budget = src.harvest() * s.tau0;
        let spent = p * tau;
        energy = energy.max(if budget > 0.0 { (spent - budget) / budget } else if spent > 0.0 { f64::INFINITY } else { 0.0 });
        let delivered = tau * rate(p, src.gain, sys);
        demand = demand.max((src.demand - delivered) / src.demand);
        power = power.max((p - sys.p_max) / sys.p_max);
    }
    let objective = (s.total - (s.tau0 + s.it_time.iter().sum::<f64>())).abs() / scale;
    let feasible = [energy, demand, power, nonneg, objective]
        .iter()
        .all(|v| *v <= FEASIBILITY_TOL);
    Ok(ScheduleCheck { energy, demand, power, nonneg, objective, feasible })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    /// A source whose `gamma` and `D/W` are set directly.
    fn synthetic(gamma: f64, bits_per_hz: f64, snr_max: f64) -> (EffectiveSource, SystemParams) {
        let sys = SystemParams { p_ap: 1.0, p_max: 1.0, bandwidth_w: 1.0, noise_n0: 1.0 };
        // harvest fixed by the EH curve at p_rx; gain solves gamma = g h / (W N0).
        let eh = EhParams::default();
        let p_rx = 0.02;
        let h = harvest_rate(&eh, p_rx);
        let gain = gamma / h;
        let mut sys = sys;
        // P^max g / (W N0) = snr_max
        sys.p_max = snr_max / gain;
        (EffectiveSource::new(bits_per_hz, gain, eh, p_rx, Node::Source(0)), sys)
    }

    #[test]
    fn it_time_pmax_cases() {
        let (src, sys) = synthetic(1.0, 1.0, 1.0);
        assert_relative_eq!(it_time_pmax(&src, &sys), 1.0, max_relative = 1e-14);
        let (src, _) = synthetic(1.0, 50.0, 3.0);
        let sys = SystemParams { p_ap: 4.0, p_max: 3.0 * 1e-6 / src.gain, bandwidth_w: 1e6, noise_n0: 1e-12 };
        assert_relative_eq!(it_time_pmax(&src, &sys), 2.5e-5, max_relative = 1e-14);
        let double = EffectiveSource { demand: 2.0 * src.demand, ..src };
        assert_relative_eq!(it_time_pmax(&double, &sys), 5e-5, max_relative = 1e-14);
    }

    #[test]
    fn threshold_energy_balance() {
        let (src, mut sys) = synthetic(1.0, 1.0, 1.0);
        sys.p_max = src.harvest();
        assert_relative_eq!(tau0_threshold(&src, &sys), it_time_pmax(&src, &sys), max_relative = 1e-14);
        sys.p_max = src.harvest() / 2.0;
        let sys2 = SystemParams { p_max: src.harvest() / 2.0, ..sys };
        // Halving P^max changes tau_bar too; compare via the definition.
        assert_relative_eq!(
            tau0_threshold(&src, &sys2),
            0.5 * it_time_pmax(&src, &sys2),
            max_relative = 1e-14
        );
    }

    #[test]
    fn threshold_at_paper_defaults() {
        let sys = SystemParams::default();
        let eh = EhParams::default();
        let p_rx = 4.0 * 5e-5;
        let h = harvest_rate(&eh, p_rx);
        let gain = sys.noise_power() / sys.p_max;
        let src = EffectiveSource::new(50.0, gain, eh, p_rx, Node::Source(0));
        assert_relative_eq!(tau0_threshold(&src, &sys), 0.01 * (50.0 / 1e6) / h, max_relative = 1e-12);
    }

    #[test]
    fn subproblem_reference_root() {
        // gamma = 10, D/W = 1: (1/10)(2^1 - 1) = 0.1 at tau = 1.
        let (src, sys) = synthetic(10.0, 1.0, 1e6);
        let tau = solve_subproblem(&src, &sys, 0.1).unwrap();
        assert_relative_eq!(tau, 1.0, max_relative = 1e-12);
        // Limit D ln2 / (W gamma) = 0.0693...
        assert!(matches!(solve_subproblem(&src, &sys, 0.069), Err(Error::Infeasible { .. })));
        let t0 = tau0_threshold(&src, &sys);
        assert_eq!(solve_subproblem(&src, &sys, t0 * 1.5).unwrap(), it_time_pmax(&src, &sys));
    }

    #[test]
    fn subproblem_near_limit_and_monotone() {
        let (src, sys) = synthetic(10.0, 1.0, 1e3);
        let limit = eh_time_limit(&src, &sys);
        let thr = tau0_threshold(&src, &sys);
        let mut prev = f64::INFINITY;
        for i in 1..200 {
            let tau0 = limit + (thr - limit) * (i as f64 / 200.0).powi(3);
            let tau = solve_subproblem(&src, &sys, tau0).unwrap();
            assert!(tau > it_time_pmax(&src, &sys));
            assert!(tau < prev, "not decreasing at {tau0}");
            let back = eh_time_for(&src, &sys, tau);
            assert_relative_eq!(back, tau0, max_relative = 1e-10);
            prev = tau;
        }
    }

    #[test]
    fn alpha_at_unit_gamma() {
        assert_eq!(alpha(1.0).unwrap(), 1.0);
        let (src, sys) = synthetic(1.0, 1.0, 1e6);
        let expected = LN_2 * (2f64.powf(1.0 / LN_2) - 1.0);
        assert_relative_eq!(tau0_unconstrained_optimum(&src, &sys).unwrap(), expected, max_relative = 1e-12);
    }

    fn grid_min(sources: &[EffectiveSource], sys: &SystemParams, lo: f64, hi: f64) -> f64 {
        let mut best = (f64::INFINITY, lo);
        let n = 4000;
        for i in 0..=n {
            let t = lo + (hi - lo) * i as f64 / n as f64;
            if let Ok(v) = schedule_length_at(sources, sys, t) {
                if v < best.0 {
                    best = (v, t);
                }
            }
        }
        let step = (hi - lo) / n as f64;
        let (mut a, mut b) = ((best.1 - step).max(lo), (best.1 + step).min(hi));
        for _ in 0..200 {
            let m1 = a + (b - a) / 3.0;
            let m2 = b - (b - a) / 3.0;
            let f1 = schedule_length_at(sources, sys, m1).unwrap_or(f64::INFINITY);
            let f2 = schedule_length_at(sources, sys, m2).unwrap_or(f64::INFINITY);
            if f1 < f2 {
                b = m2;
            } else {
                a = m1;
            }
        }
        best.0.min(schedule_length_at(sources, sys, 0.5 * (a + b)).unwrap())
    }

    #[test]
    fn single_source_matches_grid() {
        for &(gamma, snr) in &[(0.01, 0.5), (0.5, 2.0), (5.0, 3.0), (5.0, 1e4)] {
            let (src, sys) = synthetic(gamma, 1.0, snr);
            let s = nl_powmu(&[src], &sys, 1e-12).unwrap();
            let lo = eh_time_limit(&src, &sys) * (1.0 + 1e-9);
            let hi = 2.0 * tau0_threshold(&src, &sys);
            let oracle = grid_min(&[src], &sys, lo, hi);
            assert_relative_eq!(s.total, oracle, max_relative = 1e-6);
        }
    }

    #[test]
    fn bounds_bracket_grid_optimum() {
        let (a, sys) = synthetic(0.2, 1.0, 1.0);
        let (b, _) = synthetic(2.0, 0.5, 1.0);
        let b = EffectiveSource { gain: b.gain, demand: 0.5, ..a };
        let srcs = [a, b];
        let (lb, ub) = tau0_bounds(&srcs, &sys).unwrap();
        assert!(lb <= ub);
        let s = nl_powmu(&srcs, &sys, 1e-12).unwrap();
        assert!(s.tau0 >= lb - 1e-12 && s.tau0 <= ub + 1e-12);
    }

    #[test]
    fn expand_counts_and_aggregates() {
        let (geo, eh, sys) = Default::default();
        let inst = crate::model::sample_instance(2, 2, &geo, &eh, &sys, 3).unwrap();
        let direct = expand_assignment(&inst, &Assignment::all_direct(2)).unwrap();
        assert_eq!(direct.len(), 2);
        let both = expand_assignment(&inst, &Assignment::new(vec![1, 1])).unwrap();
        assert_eq!(both.len(), 3);
        assert_eq!(both[2].demand, inst.demand[0] + inst.demand[1]);
        assert_eq!(both[2].node, Node::Relay(1));
        assert_eq!(both[2].gain, inst.ul_relay[0]);
        let mixed = expand_assignment(&inst, &Assignment::new(vec![1, 0])).unwrap();
        assert_eq!(mixed.len(), 3);
        assert_eq!(mixed[0].gain, inst.ul_src[0][1]);
        assert_eq!(mixed[1].gain, inst.ul_src[1][0]);
        assert!(expand_assignment(&inst, &Assignment::new(vec![3, 0])).is_err());
    }

    #[test]
    fn verify_flags_violations() {
        let (geo, eh, sys) = Default::default();
        let inst = crate::model::sample_instance(3, 2, &geo, &eh, &sys, 9).unwrap();
        let a = Assignment::new(vec![1, 2, 0]);
        let s = schedule_assignment(&inst, &a, DEFAULT_EPS).unwrap();
        let ok = verify_schedule(&inst, &a, &s).unwrap();
        assert!(ok.feasible, "{ok:?}");

        let mut halved = s.clone();
        halved.tau0 *= 0.5;
        halved.total = halved.tau0 + halved.it_time.iter().sum::<f64>();
        let bad = verify_schedule(&inst, &a, &halved).unwrap();
        assert!(bad.energy > 0.0 && !bad.feasible);

        let mut hot = s.clone();
        hot.power[0] = inst.sys.p_max * 1.5;
        let bad = verify_schedule(&inst, &a, &hot).unwrap();
        assert!(bad.power > 0.0 && !bad.feasible);
    }

    #[test]
    fn rejects_degenerate_inputs() {
        let (src, sys) = synthetic(1.0, 1.0, 1.0);
        let zero = EffectiveSource { demand: 0.0, ..src };
        assert!(nl_powmu(&[zero], &sys, 1e-9).is_err());
        assert!(nl_powmu(&[src], &sys, 0.0).is_err());
        assert!(nl_powmu(&[], &sys, 1e-9).is_err());
        // Tiny demand drives the whole schedule towards zero.
        let tiny = EffectiveSource { demand: 1e-12, ..src };
        let s = nl_powmu(&[tiny], &sys, 1e-15).unwrap();
        assert!(s.total < 1e-10);
    }
}
