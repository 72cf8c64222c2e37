//! Command-line front end: dataset generation, solving, training,
//! distillation, architecture search and evaluation.

pub mod report;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use relaynet::dataset::{generate_dataset, Dataset, DatasetConfig};
use relaynet::distill::{dasa, distill_train, SearchConfig};
use relaynet::model::{sample_instance, Assignment, EhParams, GeometryConfig, NetworkInstance, SystemParams};
use relaynet::neural::{
    make_rel_net, make_sc_net, make_skin_net, make_student, train_examples, ArchSpec, ConvNetSpec, Examples,
    LossKind, Model, TrainConfig, TrainHistory, STUDENT_NODES,
};
use relaynet::par::Exec;
use relaynet::scheduler::verify_schedule;
use relaynet::selection::{bba, criterion_select, enumerate_optimal, evaluate_assignment, or_select, SearchOpts};

pub use report::{evaluate, EvalReport};

#[derive(Debug, Parser)]
#[command(name = "relaynet", version, about = "Relay selection for wireless-powered networks")]
pub struct Cli {
    /// Master seed.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    /// Print machine-readable JSON summaries.
    #[arg(long, global = true)]
    pub json: bool,
    /// Disable data-parallel work.
    #[arg(long, global = true)]
    pub sequential: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a labeled dataset.
    GenData(GenDataArgs),
    /// Solve one instance.
    Solve(SolveArgs),
    /// Train a classifier.
    Train(TrainArgs),
    /// Distill a student from a trained teacher.
    Distill(DistillArgs),
    /// Search for a small student under a loss threshold.
    Search(SearchArgs),
    /// Compare selection methods on a dataset split.
    Evaluate(EvalArgs),
}

fn positive(s: &str) -> std::result::Result<usize, String> {
    match s.parse::<usize>() {
        Ok(v) if v > 0 => Ok(v),
        _ => Err(format!("expected a positive integer, got {s:?}")),
    }
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, value_parser = positive)]
    pub n: usize,
    #[arg(long, default_value_t = 2)]
    pub k: usize,
    #[arg(long, default_value_t = 20_000)]
    pub train: usize,
    #[arg(long, default_value_t = 2_000)]
    pub val: usize,
    #[arg(long, default_value_t = 1_000)]
    pub test: usize,
    /// File prefix inside the output directory.
    #[arg(long, default_value = "data")]
    pub name: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Bba,
    Enumerate,
    Or,
    Criterion,
    Direct,
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    #[arg(long, value_enum, default_value = "bba")]
    pub method: Method,
    #[arg(long, value_parser = positive, default_value = "3")]
    pub n: usize,
    #[arg(long, default_value_t = 2)]
    pub k: usize,
    /// Instance JSON; sampled from `--seed` when absent.
    #[arg(long)]
    pub instance: Option<PathBuf>,
    /// Bisection tolerance on the EH time, seconds.
    #[arg(long, default_value_t = relaynet::scheduler::DEFAULT_EPS)]
    pub eps: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ArchKind {
    ScNet,
    SkinNet,
    RelNet,
    /// Student shape trained on labels only.
    Mini,
}

#[derive(Debug, Clone, Args)]
pub struct Optim {
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 128, value_parser = positive)]
    pub batch: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset prefix; defaults to `<out>/data`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "sc-net")]
    pub arch: ArchKind,
    #[command(flatten)]
    pub optim: Optim,
    /// Output name; defaults to the architecture.
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct KdArgs {
    #[arg(long, default_value_t = 0.5)]
    pub lambda1: f64,
    #[arg(long, default_value_t = 0.5)]
    pub lambda2: f64,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
}

#[derive(Debug, Args)]
pub struct DistillArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub teacher: PathBuf,
    /// Student node counts: stem, block, tail...
    #[arg(long, value_delimiter = ',', default_values_t = STUDENT_NODES)]
    pub nodes: Vec<usize>,
    #[command(flatten)]
    pub kd: KdArgs,
    #[command(flatten)]
    pub optim: Optim,
    #[arg(long, default_value = "stu-sc-net")]
    pub name: String,
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub teacher: PathBuf,
    /// Validation CE a student must beat.
    #[arg(long, default_value_t = 1.5)]
    pub vth: f64,
    #[arg(long, default_value_t = 300, value_parser = positive)]
    pub eps: usize,
    #[arg(long, value_delimiter = ',', default_values_t = [64, 32, 24, 16, 8, 2, 0])]
    pub menu: Vec<usize>,
    /// Seq-PSA tolerance as a fraction of the target.
    #[arg(long, default_value_t = 0.02)]
    pub delta_frac: f64,
    #[command(flatten)]
    pub kd: KdArgs,
    /// Epochs per search iteration.
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 128, value_parser = positive)]
    pub batch: usize,
    #[arg(long, default_value = "dasa")]
    pub name: String,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Model files to compare; the method name is the file stem.
    #[arg(long = "model")]
    pub models: Vec<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Omit runtimes so the report is byte-deterministic.
    #[arg(long)]
    pub no_timing: bool,
    #[arg(long, default_value = "report")]
    pub name: String,
}

/// Parse arguments, run, and map the outcome to an exit code:
/// 0 ok, 2 usage, 3 runtime failure.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            3
        }
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    std::fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    let exec = if cli.sequential { Exec::Sequential } else { Exec::Parallel };
    match &cli.command {
        Command::GenData(a) => cmd_gen_data(cli, a, exec),
        Command::Solve(a) => cmd_solve(cli, a, exec),
        Command::Train(a) => cmd_train(cli, a),
        Command::Distill(a) => cmd_distill(cli, a),
        Command::Search(a) => cmd_search(cli, a),
        Command::Evaluate(a) => cmd_evaluate(cli, a),
    }
}

fn emit(cli: &Cli, value: serde_json::Value, text: String) {
    if cli.json {
        println!("{}", serde_json::to_string_pretty(&value).expect("json value"));
    } else {
        println!("{text}");
    }
}

fn cmd_gen_data(cli: &Cli, a: &GenDataArgs, exec: Exec) -> Result<()> {
    let cfg = DatasetConfig::new(a.n, a.k, a.train, a.val, a.test, cli.seed);
    let d = generate_dataset(&cfg, exec)?;
    let prefix = cli.out.join(&a.name);
    d.save(&prefix)?;
    emit(
        cli,
        json!({ "prefix": prefix, "meta": d.meta }),
        format!(
            "wrote {} ({} train / {} val / {} test, N={} K={}, input {}x4)",
            prefix.display(),
            d.train.len(),
            d.val.len(),
            d.test.len(),
            d.meta.n,
            d.meta.k,
            d.meta.rows
        ),
    );
    Ok(())
}

fn cmd_solve(cli: &Cli, a: &SolveArgs, exec: Exec) -> Result<()> {
    let inst: NetworkInstance = match &a.instance {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
        None => sample_instance(a.n, a.k, &GeometryConfig::default(), &EhParams::default(), &SystemParams::default(), cli.seed)?,
    };
    inst.validate()?;
    let opts = SearchOpts { eps: a.eps, exec, ..SearchOpts::default() };
    let r = match a.method {
        Method::Bba => bba(&inst, &opts)?,
        Method::Enumerate => enumerate_optimal(&inst, &opts)?,
        Method::Or => evaluate_assignment(&inst, or_select(&inst), a.eps)?,
        Method::Criterion => evaluate_assignment(&inst, criterion_select(&inst), a.eps)?,
        Method::Direct => evaluate_assignment(&inst, Assignment::all_direct(inst.n_sources), a.eps)?,
    };
    let check = verify_schedule(&inst, &r.assignment, &r.schedule)?;
    let v = json!({
        "method": format!("{:?}", a.method).to_lowercase(),
        "assignment": r.assignment,
        "schedule": r.schedule,
        "verify": check,
        "nodes_explored": r.nodes_explored,
        "leaves_evaluated": r.leaves_evaluated,
        "elapsed_s": r.elapsed,
    });
    println!("{}", serde_json::to_string_pretty(&v)?);
    if !check.feasible {
        bail!("schedule violates constraints: {check:?}");
    }
    Ok(())
}

fn load_data(cli: &Cli, data: &Option<PathBuf>) -> Result<Dataset> {
    let prefix = data.clone().unwrap_or_else(|| cli.out.join("data"));
    Dataset::load(&prefix).with_context(|| format!("loading dataset {}", prefix.display()))
}

fn examples(d: &Dataset) -> (Examples, Examples) {
    let norm = &d.meta.normalization;
    (Examples::from_samples(&d.train, norm), Examples::from_samples(&d.val, norm))
}

fn train_config(cli: &Cli, o: &Optim, loss: LossKind) -> TrainConfig {
    TrainConfig { learning_rate: o.lr, batch_size: o.batch, epochs: o.epochs, seed: cli.seed, loss }
}

fn write_model(cli: &Cli, name: &str, model: &Model, hist: &TrainHistory) -> Result<PathBuf> {
    let path = cli.out.join(format!("{name}.model.json"));
    model.save(&path)?;
    std::fs::write(cli.out.join(format!("{name}.curve.csv")), hist.to_csv())?;
    Ok(path)
}

fn summary(cli: &Cli, name: &str, path: &Path, model: &Model, hist: &TrainHistory) {
    let last = hist.epochs.last();
    emit(
        cli,
        json!({ "model": path, "params": model.param_count(), "history": hist }),
        format!(
            "{name}: {} params, val CE {:.4} -> {:.4}, val accuracy {}; wrote {}",
            model.param_count(),
            hist.initial_val_ce,
            hist.final_val_ce(),
            last.map_or("-".into(), |e| format!("{:.2}%", 100.0 * e.val_accuracy)),
            path.display()
        ),
    );
}

fn arch_for(kind: ArchKind, n: usize, k: usize) -> Result<ArchSpec> {
    Ok(match kind {
        ArchKind::ScNet => make_sc_net(n, k)?,
        ArchKind::SkinNet => make_skin_net(n, k)?,
        ArchKind::RelNet => make_rel_net(n, k)?,
        ArchKind::Mini => {
            let mut a = make_student(n, k, &STUDENT_NODES)?;
            a.name = "mini-sc-net".into();
            a
        }
    })
}

fn cmd_train(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let d = load_data(cli, &a.data)?;
    let arch = arch_for(a.arch, d.meta.n, d.meta.k)?;
    let (tr, va) = examples(&d);
    let cfg = train_config(cli, &a.optim, LossKind::Ce);
    let name = a.name.clone().unwrap_or_else(|| arch.name.clone());
    let (model, hist) = match train_examples(&arch, &tr, &va, &cfg, None, Some(d.meta.normalization.clone())) {
        Ok(r) => r,
        Err(e) => bail!("training {name} failed: {e}"),
    };
    let path = write_model(cli, &name, &model, &hist)?;
    summary(cli, &name, &path, &model, &hist);
    Ok(())
}

fn kd_loss(kd: &KdArgs) -> LossKind {
    LossKind::Distill { lambda1: kd.lambda1, lambda2: kd.lambda2, temperature: kd.temperature }
}

fn load_teacher(p: &Path) -> Result<Model> {
    Model::load(p).with_context(|| format!("loading teacher {}", p.display()))
}

fn cmd_distill(cli: &Cli, a: &DistillArgs) -> Result<()> {
    let d = load_data(cli, &a.data)?;
    let teacher = load_teacher(&a.teacher)?;
    let arch = make_student(d.meta.n, d.meta.k, &a.nodes)?;
    let (tr, va) = examples(&d);
    let cfg = train_config(cli, &a.optim, kd_loss(&a.kd));
    let (model, hist) = distill_train(&teacher, &arch, &tr, &va, &cfg)?;
    let path = write_model(cli, &a.name, &model, &hist)?;
    summary(cli, &a.name, &path, &model, &hist);
    Ok(())
}

/// Recover the convolutional family of a trained teacher.
pub fn teacher_spec(teacher: &Model) -> Result<ConvNetSpec> {
    let (n, k) = (teacher.arch.n, teacher.arch.k);
    for spec in [ConvNetSpec::sc_net(n, k)?, ConvNetSpec::skin_net(n, k)?] {
        if spec.arch("probe")?.layers == teacher.arch.layers {
            return Ok(spec);
        }
    }
    bail!("teacher {:?} is not an SC-NET or SKIN-NET model", teacher.arch.name)
}

fn cmd_search(cli: &Cli, a: &SearchArgs) -> Result<()> {
    let d = load_data(cli, &a.data)?;
    let teacher = load_teacher(&a.teacher)?;
    let spec = teacher_spec(&teacher)?;
    let (tr, va) = examples(&d);
    let train = TrainConfig { learning_rate: a.lr, batch_size: a.batch, epochs: a.epochs, seed: cli.seed, loss: kd_loss(&a.kd) };
    let sc = SearchConfig { menu: a.menu.clone(), eps_params: a.eps, delta_frac: a.delta_frac, v_threshold: a.vth, train };
    let (model, trace) = dasa(&teacher, &spec, &tr, &va, &sc)?;
    let path = cli.out.join(format!("{}.model.json", a.name));
    model.save(&path)?;
    let trace_path = cli.out.join(format!("{}.trace.json", a.name));
    std::fs::write(&trace_path, serde_json::to_string_pretty(&trace)?)?;
    let mut text = format!("teacher {} params; {} iterations\n", trace.teacher_params, trace.records.len());
    for r in &trace.records {
        text.push_str(&format!(
            "  it {:>2}: target {:>6} realized {:>6} nodes {:?} L_C {} val CE {:.4} [{}] lb {} ub {}\n",
            r.iteration,
            r.target,
            r.realized,
            r.nodes,
            r.depth,
            r.val_ce,
            if r.passed { "pass" } else { "fail" },
            r.lb,
            r.ub
        ));
    }
    let sel = &trace.records[trace.selected];
    text.push_str(&format!(
        "selected iteration {} ({} params){}; wrote {} and {}\n",
        sel.iteration,
        model.param_count(),
        if trace.fallback { ", no student met the threshold: lowest loss kept" } else { "" },
        path.display(),
        trace_path.display()
    ));
    text.push_str("paper reference: 1508 trainable parameters in 8 iterations at cross-entropy below 1.5 (3 sources, 2 relays)");
    emit(cli, json!({ "model": path, "trace": trace }), text);
    Ok(())
}

fn cmd_evaluate(cli: &Cli, a: &EvalArgs) -> Result<()> {
    let d = load_data(cli, &a.data)?;
    let samples = match a.split.as_str() {
        "train" => &d.train,
        "val" => &d.val,
        "test" => &d.test,
        s => bail!("unknown split {s:?}"),
    };
    let mut models = Vec::new();
    for p in &a.models {
        let m = Model::load(p).with_context(|| format!("loading model {}", p.display()))?;
        if (m.arch.n, m.arch.k) != (d.meta.n, d.meta.k) {
            bail!("model {} is for N={} K={}, dataset has N={} K={}", p.display(), m.arch.n, m.arch.k, d.meta.n, d.meta.k);
        }
        let stem = p.file_name().and_then(|s| s.to_str()).unwrap_or("model");
        let name = stem.strip_suffix(".model.json").unwrap_or(stem).to_string();
        models.push((name, m));
    }
    let report = evaluate(&d.meta, samples, &models, &a.split, !a.no_timing)?;
    report.write(&cli.out, &a.name)?;
    if cli.json {
        println!("{}", report.to_json()?);
    } else {
        print!("{}", report.render());
    }
    Ok(())
}
