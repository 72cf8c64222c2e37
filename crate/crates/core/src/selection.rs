//! Relay assignment search.
//!
//! [`enumerate_optimal`] is the brute-force reference; [`bba`] is a
//! depth-first branch-and-bound over per-source choices that returns the same
//! optimum. Heuristics: [`or_select`] (opportunistic relaying on DL/UL gains)
//! and [`criterion_select`] (harvest-weighted max-min score with a direct-link
//! fallback).

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{rate, Assignment, NetworkInstance};
use crate::par::{self, Exec};
use crate::scheduler::{expand_assignment, nl_powmu, EffectiveSource, Node, Schedule, DEFAULT_EPS};

pub const DEFAULT_ENUM_CAP: u64 = 1_000_000;

/// Slack applied before pruning so bisection round-off cannot cut the optimum.
const PRUNE_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchOpts {
    pub eps: f64,
    /// Largest `(K+1)^N` that [`enumerate_optimal`] accepts.
    pub cap: u64,
    pub exec: Exec,
}

impl Default for SearchOpts {
    fn default() -> Self {
        Self { eps: DEFAULT_EPS, cap: DEFAULT_ENUM_CAP, exec: Exec::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub assignment: Assignment,
    pub schedule: Schedule,
    /// Search-tree nodes visited (enumeration counts every leaf).
    pub nodes_explored: u64,
    /// Complete assignments scheduled at leaves.
    pub leaves_evaluated: u64,
    /// Wall-clock seconds.
    pub elapsed: f64,
}

fn assignment_count(inst: &NetworkInstance) -> u128 {
    (inst.k_relays as u128 + 1).saturating_pow(inst.n_sources as u32)
}

/// Schedule every assignment and keep the shortest; ties go to the
/// lexicographically smallest assignment.
pub fn enumerate_optimal(inst: &NetworkInstance, opts: &SearchOpts) -> Result<SelectionResult> {
    inst.validate()?;
    let start = Instant::now();
    let count = assignment_count(inst);
    if count > opts.cap as u128 {
        return Err(Error::EnumerationCap { count, cap: opts.cap });
    }
    let (n, k) = (inst.n_sources, inst.k_relays);
    let totals = par::try_map_indexed(opts.exec, count as usize, |idx| {
        let a = Assignment::from_index(idx as u64, n, k);
        nl_powmu(&expand_assignment(inst, &a)?, &inst.sys, opts.eps).map(|s| s.total)
    })?;
    // First minimum in index order is the lexicographic tie winner.
    let best = totals
        .iter()
        .enumerate()
        .fold(0usize, |best, (i, t)| if *t < totals[best] { i } else { best });
    let assignment = Assignment::from_index(best as u64, n, k);
    let schedule = nl_powmu(&expand_assignment(inst, &assignment)?, &inst.sys, opts.eps)?;
    Ok(SelectionResult {
        assignment,
        schedule,
        nodes_explored: count as u64,
        leaves_evaluated: count as u64,
        elapsed: start.elapsed().as_secs_f64(),
    })
}

/// Harvest-weighted direct-link quality `phi = g^{AP} (Psi - M Omega)/(1 - Omega)`
/// of source `i`.
pub fn source_phi(inst: &NetworkInstance, i: usize) -> f64 {
    inst.ul_src[i][0] * inst.source_harvest(i)
}

/// Same quantity for relay `j` (1-based).
pub fn relay_phi(inst: &NetworkInstance, j: usize) -> f64 {
    inst.ul_relay[j - 1] * inst.relay_harvest(j)
}

/// Max-min relaying score of relay `j >= 1` for source `i`; for `j = 0` the
/// direct-link term `g_{S_i}^{AP} phi_{S_i}`.
pub fn criterion_score(inst: &NetworkInstance, i: usize, j: usize) -> f64 {
    let phi_s = source_phi(inst, i);
    if j == 0 {
        return inst.ul_src[i][0] * phi_s;
    }
    (inst.ul_src[i][j] * phi_s).min(inst.ul_relay[j - 1] * relay_phi(inst, j))
}

/// Necessary condition for relaying through `j`:
/// `min(g_S^R phi_S, g_R^AP phi_S) > g_S^AP phi_S`.
pub fn relay_condition_holds(inst: &NetworkInstance, i: usize, j: usize) -> bool {
    let phi_s = source_phi(inst, i);
    (inst.ul_src[i][j] * phi_s).min(inst.ul_relay[j - 1] * phi_s) > inst.ul_src[i][0] * phi_s
}

/// Index of the largest score over `1..=k`; ties keep the smallest index.
fn argmax_relay(k: usize, score: impl Fn(usize) -> f64) -> usize {
    let mut best = 1;
    let mut best_score = score(1);
    for j in 2..=k {
        let s = score(j);
        if s > best_score {
            best = j;
            best_score = s;
        }
    }
    best
}

/// Opportunistic relaying choice for one source.
pub fn or_choice(inst: &NetworkInstance, i: usize) -> usize {
    if inst.k_relays == 0 {
        return 0;
    }
    let h_s = inst.dl_gain[i];
    argmax_relay(inst.k_relays, |j| {
        (inst.ul_src[i][j] * h_s).min(inst.ul_relay[j - 1] * inst.relay_dl(j))
    })
}

/// Opportunistic relaying: per source, the relay maximizing
/// `min(g_S^R h_AP^S, g_R^AP h_AP^R)`. With no relays, everything is direct.
pub fn or_select(inst: &NetworkInstance) -> Assignment {
    Assignment::new((0..inst.n_sources).map(|i| or_choice(inst, i)).collect())
}

/// Per source, the relay with the best [`criterion_score`], kept only if
/// [`relay_condition_holds`]; otherwise direct.
pub fn criterion_select(inst: &NetworkInstance) -> Assignment {
    let choice = (0..inst.n_sources)
        .map(|i| {
            if inst.k_relays == 0 {
                return 0;
            }
            let j = argmax_relay(inst.k_relays, |j| criterion_score(inst, i, j));
            if relay_condition_holds(inst, i, j) {
                j
            } else {
                0
            }
        })
        .collect();
    Assignment::new(choice)
}

/// Effective sources for a prefix `0..prefix.len()` of the sources, relays
/// carrying only the prefix load.
fn expand_prefix(inst: &NetworkInstance, prefix: &[usize]) -> Vec<EffectiveSource> {
    let mut out = Vec::with_capacity(prefix.len() + inst.k_relays);
    let mut load = vec![0.0; inst.k_relays + 1];
    for (i, &j) in prefix.iter().enumerate() {
        out.push(EffectiveSource::new(
            inst.demand[i],
            inst.ul_src[i][j],
            *inst.source_eh(i),
            inst.source_p_rx(i),
            Node::Source(i),
        ));
        load[j] += inst.demand[i];
    }
    for j in 1..=inst.k_relays {
        if load[j] > 0.0 {
            out.push(EffectiveSource::new(
                load[j],
                inst.ul_relay[j - 1],
                *inst.relay_eh(j),
                inst.relay_p_rx(j),
                Node::Relay(j),
            ));
        }
    }
    out
}

/// Best-case IT time of source `i` routed through `j`, both hops at `P^max`.
fn best_case_it(inst: &NetworkInstance, i: usize, j: usize) -> f64 {
    let sys = &inst.sys;
    let d = inst.demand[i];
    let first = d / rate(sys.p_max, inst.ul_src[i][j], sys);
    if j == 0 {
        first
    } else {
        first + d / rate(sys.p_max, inst.ul_relay[j - 1], sys)
    }
}

/// Admissible bound for every completion of `prefix`: the optimal length of
/// the prefix-only network plus, for each unassigned source, its cheapest
/// power-capped IT time over all routes.
///
/// Per-node IT time at fixed EH time is superadditive in demand and never
/// below demand over the capped rate, so neither term can exceed its share
/// of any completion.
pub fn node_lower_bound(inst: &NetworkInstance, prefix: &[usize], eps: f64) -> Result<f64> {
    if prefix.len() > inst.n_sources {
        return Err(Error::Shape(format!("prefix of length {} exceeds n={}", prefix.len(), inst.n_sources)));
    }
    let head = if prefix.is_empty() {
        0.0
    } else {
        nl_powmu(&expand_prefix(inst, prefix), &inst.sys, eps)?.total
    };
    let tail: f64 = (prefix.len()..inst.n_sources)
        .map(|i| {
            (0..=inst.k_relays)
                .map(|j| best_case_it(inst, i, j))
                .fold(f64::INFINITY, f64::min)
        })
        .sum();
    Ok(head + tail)
}

/// Feasible completion of `prefix` using the opportunistic-relaying choice
/// for every unassigned source.
pub fn node_upper_bound(inst: &NetworkInstance, prefix: &[usize], eps: f64) -> Result<(Assignment, Schedule)> {
    if prefix.len() > inst.n_sources {
        return Err(Error::Shape(format!("prefix of length {} exceeds n={}", prefix.len(), inst.n_sources)));
    }
    let mut choice = prefix.to_vec();
    choice.extend((prefix.len()..inst.n_sources).map(|i| or_choice(inst, i)));
    let a = Assignment::new(choice);
    let s = nl_powmu(&expand_assignment(inst, &a)?, &inst.sys, eps)?;
    Ok((a, s))
}

struct Incumbent {
    assignment: Assignment,
    schedule: Schedule,
}

impl Incumbent {
    fn offer(&mut self, a: Assignment, s: Schedule) {
        let better = s.total < self.schedule.total
            || (s.total == self.schedule.total && a < self.assignment);
        if better {
            self.assignment = a;
            self.schedule = s;
        }
    }
}

struct Bba<'a> {
    inst: &'a NetworkInstance,
    eps: f64,
    /// Child visiting order per source, best criterion score first.
    order: Vec<Vec<usize>>,
    best: Incumbent,
    nodes: u64,
    leaves: u64,
}

impl Bba<'_> {
    fn visit(&mut self, prefix: &mut Vec<usize>) -> Result<()> {
        self.nodes += 1;
        let n = self.inst.n_sources;
        if prefix.len() == n {
            self.leaves += 1;
            let a = Assignment::new(prefix.clone());
            let s = nl_powmu(&expand_assignment(self.inst, &a)?, &self.inst.sys, self.eps)?;
            self.best.offer(a, s);
            return Ok(());
        }
        if !prefix.is_empty() {
            let lb = node_lower_bound(self.inst, prefix, self.eps)?;
            if lb > self.best.schedule.total * (1.0 + PRUNE_SLACK) {
                return Ok(());
            }
            let (a, s) = node_upper_bound(self.inst, prefix, self.eps)?;
            self.best.offer(a, s);
        }
        let depth = prefix.len();
        for c in 0..self.order[depth].len() {
            let j = self.order[depth][c];
            prefix.push(j);
            self.visit(prefix)?;
            prefix.pop();
        }
        Ok(())
    }
}

/// Branch-and-bound over relay choices: sources in index order, children in
/// descending [`criterion_score`] order, incumbent seeded by
/// [`node_upper_bound`] at the root.
pub fn bba(inst: &NetworkInstance, opts: &SearchOpts) -> Result<SelectionResult> {
    inst.validate()?;
    let start = Instant::now();
    let order = (0..inst.n_sources)
        .map(|i| {
            let mut js: Vec<usize> = (0..=inst.k_relays).collect();
            // Stable sort keeps smaller j first on equal scores.
            js.sort_by(|&a, &b| criterion_score(inst, i, b).total_cmp(&criterion_score(inst, i, a)));
            js
        })
        .collect();
    let (a, s) = node_upper_bound(inst, &[], opts.eps)?;
    let mut search = Bba {
        inst,
        eps: opts.eps,
        order,
        best: Incumbent { assignment: a, schedule: s },
        nodes: 0,
        leaves: 0,
    };
    search.visit(&mut Vec::with_capacity(inst.n_sources))?;
    Ok(SelectionResult {
        assignment: search.best.assignment,
        schedule: search.best.schedule,
        nodes_explored: search.nodes,
        leaves_evaluated: search.leaves,
        elapsed: start.elapsed().as_secs_f64(),
    })
}

/// Schedule a fixed assignment and wrap it as a [`SelectionResult`].
pub fn evaluate_assignment(inst: &NetworkInstance, a: Assignment, eps: f64) -> Result<SelectionResult> {
    let start = Instant::now();
    let schedule = nl_powmu(&expand_assignment(inst, &a)?, &inst.sys, eps)?;
    Ok(SelectionResult {
        assignment: a,
        schedule,
        nodes_explored: 1,
        leaves_evaluated: 1,
        elapsed: start.elapsed().as_secs_f64(),
    })
}
