//! Benchmark comparison of selection methods on a dataset split.

use std::path::Path;
use std::time::Instant;

use anyhow::Result;
use serde::{Deserialize, Serialize};

use relaynet::dataset::{DatasetMeta, DatasetSample};
use relaynet::model::{Assignment, NetworkInstance};
use relaynet::neural::Model;
use relaynet::par::{self, Exec};
use relaynet::selection::{bba, criterion_select, evaluate_assignment, or_select, SearchOpts};

/// Reference points from the original study, echoed for comparison.
pub const PAPER_REFERENCE: &str = "paper reference (4 sources, 2 relays, full scale): optimality gap SC-NET 20%, \
SKIN-NET 22%, OR 34%; relay cooperation shortens the schedule by up to 95% for N=2";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub method: String,
    pub mean_total_s: f64,
    pub mean_optimality_gap: f64,
    /// Per-instance selection plus scheduling time; absent without timing.
    pub mean_runtime_s: Option<f64>,
    /// Per-source agreement with the optimal selection (learned methods).
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfigEcho {
    pub n: usize,
    pub k: usize,
    pub split: String,
    pub dataset_seed: u64,
    pub models: Vec<String>,
    pub timing: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub instances: usize,
    pub rows: Vec<MethodRow>,
    /// Mean `(L_direct - L_opt) / L_direct`.
    pub relay_improvement: f64,
    pub config: EvalConfigEcho,
    pub paper_reference: String,
}

#[derive(Debug, Clone, Copy)]
struct Outcome {
    total: f64,
    runtime: f64,
    hits: usize,
}

fn run_method(inst: &NetworkInstance, opts: &SearchOpts, select: impl Fn() -> Result<Assignment>, label: &Assignment) -> Result<Outcome> {
    let t = Instant::now();
    let a = select()?;
    let r = evaluate_assignment(inst, a, opts.eps)?;
    let runtime = t.elapsed().as_secs_f64();
    let hits = r.assignment.choice.iter().zip(&label.choice).filter(|(x, y)| x == y).count();
    Ok(Outcome { total: r.schedule.total, runtime, hits })
}

/// Run bba, OR, the relay criterion, all-direct and every model on each
/// sample. Without timing the instances are processed in parallel.
pub fn evaluate(
    meta: &DatasetMeta,
    samples: &[DatasetSample],
    models: &[(String, Model)],
    split: &str,
    timing: bool,
) -> Result<EvalReport> {
    anyhow::ensure!(!samples.is_empty(), "split {split} is empty");
    let opts = SearchOpts { exec: Exec::Sequential, ..SearchOpts::default() };
    let exec = if timing { Exec::Sequential } else { Exec::Parallel };
    let names: Vec<String> = ["bba", "or", "criterion", "direct"]
        .iter()
        .map(|s| s.to_string())
        .chain(models.iter().map(|(n, _)| n.clone()))
        .collect();

    let per_instance = par::try_map_indexed(exec, samples.len(), |i| -> Result<Vec<Outcome>> {
        let s = &samples[i];
        let inst = meta.instance(s)?;
        let t = Instant::now();
        let opt = bba(&inst, &opts)?;
        let ref_time = t.elapsed().as_secs_f64();
        let label = opt.assignment.clone();
        let n = inst.n_sources;
        let mut out = vec![Outcome { total: opt.schedule.total, runtime: ref_time, hits: n }];
        out.push(run_method(&inst, &opts, || Ok(or_select(&inst)), &label)?);
        out.push(run_method(&inst, &opts, || Ok(criterion_select(&inst)), &label)?);
        out.push(run_method(&inst, &opts, || Ok(Assignment::all_direct(n)), &label)?);
        for (_, m) in models {
            out.push(run_method(&inst, &opts, || Ok(m.predict(&s.input)?), &label)?);
        }
        Ok(out)
    })?;

    let count = samples.len() as f64;
    let sources = (samples.len() * meta.n) as f64;
    let rows = names
        .iter()
        .enumerate()
        .map(|(m, name)| {
            let (mut total, mut gap, mut runtime, mut hits) = (0.0, 0.0, 0.0, 0usize);
            for o in &per_instance {
                let opt = o[0].total;
                total += o[m].total;
                gap += (o[m].total - opt) / opt;
                runtime += o[m].runtime;
                hits += o[m].hits;
            }
            MethodRow {
                method: name.clone(),
                mean_total_s: total / count,
                mean_optimality_gap: gap / count,
                mean_runtime_s: timing.then_some(runtime / count),
                accuracy: (m >= 4).then_some(hits as f64 / sources),
            }
        })
        .collect();
    let relay_improvement = per_instance.iter().map(|o| (o[3].total - o[0].total) / o[3].total).sum::<f64>() / count;
    Ok(EvalReport {
        instances: samples.len(),
        rows,
        relay_improvement,
        config: EvalConfigEcho {
            n: meta.n,
            k: meta.k,
            split: split.to_string(),
            dataset_seed: meta.seed,
            models: models.iter().map(|(n, _)| n.clone()).collect(),
            timing,
        },
        paper_reference: PAPER_REFERENCE.to_string(),
    })
}

impl EvalReport {
    pub fn row(&self, method: &str) -> Option<&MethodRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    /// Header `method,mean_total,gap,runtime,accuracy`; empty cells for
    /// missing values.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["method", "mean_total", "gap", "runtime", "accuracy"])?;
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        for r in &self.rows {
            w.write_record([
                r.method.clone(),
                r.mean_total_s.to_string(),
                r.mean_optimality_gap.to_string(),
                opt(r.mean_runtime_s),
                opt(r.accuracy),
            ])?;
        }
        Ok(String::from_utf8(w.into_inner()?)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write(&self, dir: &Path, name: &str) -> Result<()> {
        std::fs::write(dir.join(format!("{name}.csv")), self.to_csv()?)?;
        std::fs::write(dir.join(format!("{name}.json")), self.to_json()?)?;
        Ok(())
    }

    /// Human-readable table with the reference footer.
    pub fn render(&self) -> String {
        let mut s = format!(
            "{} instances, N={} K={} ({})\n{:<14} {:>14} {:>10} {:>12} {:>9}\n",
            self.instances, self.config.n, self.config.k, self.config.split, "method", "mean_total_s", "gap", "runtime_s", "accuracy"
        );
        for r in &self.rows {
            let rt = r.mean_runtime_s.map_or("-".into(), |v| format!("{v:.3e}"));
            let acc = r.accuracy.map_or("-".into(), |v| format!("{:.2}%", 100.0 * v));
            s.push_str(&format!(
                "{:<14} {:>14.6e} {:>9.2}% {:>12} {:>9}\n",
                r.method,
                r.mean_total_s,
                100.0 * r.mean_optimality_gap,
                rt,
                acc
            ));
        }
        s.push_str(&format!("relay improvement over all-direct: {:.2}%\n", 100.0 * self.relay_improvement));
        s.push_str(&self.paper_reference);
        s.push('\n');
        s
    }
}
