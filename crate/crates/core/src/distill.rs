//! Teacher-student training and parameter-budget architecture search.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neural::{param_count, train_examples, ArchSpec, ConvNetSpec, Examples, LossKind, Model, TrainConfig, TrainHistory};

/// Train `student` against truth labels and the teacher's soft outputs.
/// Teacher logits are computed once, in infer mode.
pub fn distill_train(
    teacher: &Model,
    student: &ArchSpec,
    train: &Examples,
    val: &Examples,
    cfg: &TrainConfig,
) -> Result<(Model, TrainHistory)> {
    if teacher.arch.logit_shape() != student.logit_shape() {
        return Err(Error::Shape("teacher and student heads differ".into()));
    }
    let logits = match cfg.loss {
        LossKind::Distill { .. } => Some(teacher.logits(&train.x)?),
        LossKind::Ce => None,
    };
    train_examples(student, train, val, cfg, logits.as_deref(), teacher.normalizer.clone())
}

/// An architecture family addressed by per-layer node counts.
pub trait NodeSpace: Sized + Clone {
    fn nodes(&self) -> Vec<usize>;
    fn with_nodes(&self, nodes: &[usize]) -> Result<Self>;
    /// Whether layer `i` may be removed (node count 0).
    fn removable(&self, i: usize) -> bool;
    fn param_count(&self) -> Result<usize>;
}

impl NodeSpace for ConvNetSpec {
    fn nodes(&self) -> Vec<usize> {
        ConvNetSpec::nodes(self)
    }

    fn with_nodes(&self, nodes: &[usize]) -> Result<Self> {
        let mut s = self.clone();
        s.set_nodes(nodes)?;
        Ok(s)
    }

    fn removable(&self, i: usize) -> bool {
        ConvNetSpec::removable(self, i)
    }

    fn param_count(&self) -> Result<usize> {
        param_count(&self.arch("probe")?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PsaResult<S> {
    pub spec: S,
    pub params: usize,
    pub early_stop: bool,
}

/// Sequential parameter search: from the last layer to the first, set each
/// layer's node count to the menu value bringing the parameter count
/// closest to `target`, stopping once within `delta`. The current value is
/// kept on ties; among menu values the first listed wins.
pub fn seq_psa<S: NodeSpace>(start: &S, target: usize, menu: &[usize], delta: f64) -> Result<PsaResult<S>> {
    let dist = |p: usize| (target as f64 - p as f64).abs();
    let mut cur = start.clone();
    let mut params = cur.param_count()?;
    if dist(params) < delta {
        return Ok(PsaResult { spec: cur, params, early_stop: true });
    }
    let layers = cur.nodes().len();
    for k in (0..layers).rev() {
        let nodes = cur.nodes();
        let mut best: Option<(S, usize)> = None;
        let mut best_d = dist(params);
        for &m in menu {
            if m == nodes[k] || (m == 0 && !cur.removable(k)) {
                continue;
            }
            let mut cand = nodes.clone();
            cand[k] = m;
            let Ok(spec) = cur.with_nodes(&cand) else { continue };
            let p = spec.param_count()?;
            if dist(p) < best_d {
                best_d = dist(p);
                best = Some((spec, p));
            }
        }
        if let Some((spec, p)) = best {
            cur = spec;
            params = p;
        }
        if best_d < delta {
            return Ok(PsaResult { spec: cur, params, early_stop: true });
        }
    }
    Ok(PsaResult { spec: cur, params, early_stop: false })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    /// Allowed node counts; must contain 0.
    pub menu: Vec<usize>,
    /// Stop once `ub - lb < eps_params`.
    pub eps_params: usize,
    /// Seq-PSA tolerance as a fraction of the target.
    pub delta_frac: f64,
    /// Validation CE a student must beat.
    pub v_threshold: f64,
    pub train: TrainConfig,
}

impl SearchConfig {
    pub fn new(v_threshold: f64, train: TrainConfig) -> Self {
        Self { menu: vec![64, 32, 24, 16, 8, 2, 0], eps_params: 300, delta_frac: 0.02, v_threshold, train }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.menu.contains(&0) {
            return Err(Error::InvalidParameter("node menu must contain 0".into()));
        }
        if self.eps_params == 0 || !(self.v_threshold > 0.0) || !(self.delta_frac >= 0.0) {
            return Err(Error::InvalidParameter("eps must be at least 1 and the loss threshold positive".into()));
        }
        self.train.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchRecord {
    pub iteration: usize,
    pub target: usize,
    pub realized: usize,
    pub nodes: Vec<usize>,
    /// Active block count.
    pub depth: usize,
    pub val_ce: f64,
    /// Bounds before this iteration's update.
    pub ub: usize,
    pub lb: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchTrace {
    pub teacher_params: usize,
    pub v_threshold: f64,
    pub eps_params: usize,
    pub records: Vec<SearchRecord>,
    /// Record index of the returned student.
    pub selected: usize,
    /// Set when no student met the threshold and the lowest-loss one was kept.
    pub fallback: bool,
    pub final_ub: usize,
    pub final_lb: usize,
}

impl SearchTrace {
    /// Bracket checks: `lb <= ub`, `ub` only shrinks after a pass and `lb`
    /// only grows after a failure.
    pub fn invariants_hold(&self) -> bool {
        let mut prev: Option<&SearchRecord> = None;
        for r in &self.records {
            if r.lb > r.ub {
                return false;
            }
            if let Some(p) = prev {
                let ok = if p.passed { r.ub <= p.ub && r.lb == p.lb } else { r.lb >= p.lb && r.ub == p.ub };
                if !ok {
                    return false;
                }
            }
            prev = Some(r);
        }
        self.final_lb <= self.final_ub
    }
}

/// Bisection on the student's parameter budget. Each iteration shrinks or
/// grows the previous student to the midpoint budget, distills it and moves
/// the bracket by whether its validation CE beats the threshold.
pub fn dasa(
    teacher: &Model,
    teacher_spec: &ConvNetSpec,
    train: &Examples,
    val: &Examples,
    sc: &SearchConfig,
) -> Result<(Model, SearchTrace)> {
    sc.validate()?;
    let omega_sc = teacher.param_count();
    if teacher_spec.param_count()? != omega_sc {
        return Err(Error::Shape("teacher spec does not describe the teacher model".into()));
    }
    let (mut ub, mut lb) = (omega_sc, 0usize);
    let mut spec = teacher_spec.clone();
    let mut records = Vec::new();
    let mut models = Vec::new();
    while ub - lb >= sc.eps_params {
        let target = (ub + lb) / 2;
        let psa = seq_psa(&spec, target, &sc.menu, sc.delta_frac * target as f64)?;
        spec = psa.spec;
        let arch = spec.arch("stu-sc-net")?;
        let (student, hist) = distill_train(teacher, &arch, train, val, &sc.train)?;
        let val_ce = hist.final_val_ce();
        let passed = val_ce < sc.v_threshold;
        records.push(SearchRecord {
            iteration: records.len() + 1,
            target,
            realized: psa.params,
            nodes: spec.nodes(),
            depth: spec.depth(),
            val_ce,
            ub,
            lb,
            passed,
        });
        models.push(student);
        if passed {
            ub = target;
        } else {
            lb = target;
        }
    }
    if records.is_empty() {
        return Err(Error::InvalidParameter(format!("eps {} leaves no room to search below {omega_sc}", sc.eps_params)));
    }
    let passing = records.iter().enumerate().filter(|(_, r)| r.passed).min_by_key(|(i, r)| (r.realized, *i));
    let (selected, fallback) = match passing {
        Some((i, _)) => (i, false),
        None => {
            let i = records
                .iter()
                .enumerate()
                .min_by(|a, b| a.1.val_ce.total_cmp(&b.1.val_ce))
                .map(|(i, _)| i)
                .expect("nonempty");
            (i, true)
        }
    };
    let trace = SearchTrace {
        teacher_params: omega_sc,
        v_threshold: sc.v_threshold,
        eps_params: sc.eps_params,
        records,
        selected,
        fallback,
        final_ub: ub,
        final_lb: lb,
    };
    Ok((models.swap_remove(selected), trace))
}

/// Upper bound on DASA iterations: `ceil(log2(omega / eps)) + 1`.
pub fn max_iterations(omega: usize, eps: usize) -> usize {
    ((omega as f64 / eps as f64).log2().ceil().max(0.0) as usize) + 1
}
