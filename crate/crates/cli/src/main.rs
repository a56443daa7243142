//! `dtdl`: synthesize households, train, disaggregate, evaluate and sweep.

mod config;
mod data;
mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::anyhow;
use clap::{Parser, Subcommand};
use dtdl::experiment::{self, SplitSizes};
use dtdl::{gradcheck, model_io, synth_household};

use crate::config::RunConfig;

#[derive(Parser, Debug)]
#[command(version, about = "Energy disaggregation with deep temporal dictionary learning")]
struct Cli {
    /// JSON run configuration; unknown keys are rejected.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// `key=value` override, dotted into the configuration. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,

    /// Worker threads for the parallel kernels.
    #[arg(long, default_value_t = 1, global = true)]
    threads: usize,

    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Dataset manifest or the directory holding it.
    #[arg(long, global = true)]
    data: Option<PathBuf>,

    #[arg(long, global = true)]
    model: Option<PathBuf>,

    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Write a synthetic household (channel CSVs, manifest, truth).
    Synth,
    /// Train on the training part of a dataset; writes model.json and training_log.csv.
    Train,
    /// Disaggregate a dataset's mains with a trained model; writes report.json and report.csv.
    Disaggregate,
    /// Score DTDL and both baselines on the test part; writes metrics.json.
    Eval,
    /// Validation accuracy over a hyperparameter grid; writes sweep.csv.
    Sweep,
    /// Finite-difference checks of the analytic gradients.
    Gradcheck,
}

/// Exit status classes: 1 runtime, 2 configuration, 3 numeric.
#[derive(Debug)]
enum Failure {
    Config(anyhow::Error),
    Numeric(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Runtime(_) => 1,
            Failure::Config(_) => 2,
            Failure::Numeric(_) => 3,
        }
    }

    fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Config(e) | Failure::Numeric(e) | Failure::Runtime(e) => e,
        }
    }
}

type Outcome<T> = std::result::Result<T, Failure>;

trait Classify<T> {
    fn config(self) -> Outcome<T>;
    fn compute(self) -> Outcome<T>;
    fn runtime(self) -> Outcome<T>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for std::result::Result<T, E> {
    fn config(self) -> Outcome<T> {
        self.map_err(|e| Failure::Config(e.into()))
    }

    /// Non-finite values and singular systems are numeric failures.
    fn compute(self) -> Outcome<T> {
        self.map_err(|e| {
            let e: anyhow::Error = e.into();
            match e.downcast_ref::<dtdl::Error>() {
                Some(dtdl::Error::NonFinite { .. } | dtdl::Error::Singular) => Failure::Numeric(e),
                _ => Failure::Runtime(e),
            }
        })
    }

    fn runtime(self) -> Outcome<T> {
        self.map_err(|e| Failure::Runtime(e.into()))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error());
            ExitCode::from(f.code())
        }
    }
}

fn resolve(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut sets = cli.sets.clone();
    let path_set = |key: &str, p: &Path| format!("{key}={}", serde_json::Value::String(p.display().to_string()));
    if let Some(p) = &cli.data {
        sets.push(path_set("data", p));
    }
    if let Some(p) = &cli.model {
        sets.push(path_set("model", p));
    }
    if let Some(p) = &cli.out {
        sets.push(path_set("out", p));
    }
    if let Some(s) = cli.seed {
        sets.push(format!("seed={s}"));
    }
    RunConfig::resolve(cli.config.as_deref(), &sets)
}

fn run(cli: &Cli) -> Outcome<()> {
    let cfg = resolve(cli).config()?;
    if cli.threads == 0 {
        return Err(Failure::Config(anyhow!("--threads must be at least 1")));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
        .runtime()?;
    match cli.command {
        Command::Synth => synth(&cfg),
        Command::Train => train(&cfg),
        Command::Disaggregate => disaggregate(&cfg),
        Command::Eval => eval(&cfg),
        Command::Sweep => sweep(&cfg),
        Command::Gradcheck => run_gradcheck(&cfg),
    }
}

fn synth(cfg: &RunConfig) -> Outcome<()> {
    let out = cfg.out_dir().config()?;
    let hh = synth_household(&cfg.synth).compute()?;
    data::write_synthetic(out, "synthetic", &hh).runtime()?;
    println!(
        "wrote {} devices x {} samples to {}",
        hh.device_names.len(),
        hh.duration,
        out.display()
    );
    Ok(())
}

fn train(cfg: &RunConfig) -> Outcome<()> {
    let out = cfg.out_dir().config()?;
    let house = data::load(cfg.data_path().config()?).config()?;
    let ds = house.windowed(cfg.hyper.omega).config()?;
    let split = cfg.eval().split(&ds).config()?;
    let model = dtdl::train(&split.train, &cfg.hyper).compute()?;
    output::ensure_dir(out).runtime()?;
    output::write_model(out, &model).runtime()?;
    let last = model.training_log.last();
    println!(
        "trained on {} windows: {:?} after {} iterations, J = {}",
        split.train.windows(),
        model.status,
        model.training_log.len(),
        last.map_or(f64::NAN, |e| e.objective.j)
    );
    Ok(())
}

fn disaggregate(cfg: &RunConfig) -> Outcome<()> {
    let out = cfg.out_dir().config()?;
    let model = model_io::load_dtdl(cfg.model_path().config()?).config()?;
    let house = data::load(cfg.data_path().config()?).config()?;
    let report = dtdl::disaggregate_signal(&model, &house.mains, &cfg.disaggregation).compute()?;
    output::ensure_dir(out).runtime()?;
    output::write_report(out, &report).runtime()?;
    for (name, total) in report.device_names.iter().zip(&report.totals) {
        println!("{name:>16} {:>12.1} Wh", total / 3600.0);
    }
    Ok(())
}

fn eval(cfg: &RunConfig) -> Outcome<()> {
    let out = cfg.out_dir().config()?;
    let house = data::load(cfg.data_path().config()?).config()?;
    let mut eval_cfg = cfg.eval();
    let loaded = match &cfg.model {
        Some(p) => Some(model_io::load_dtdl(p).config()?),
        None => None,
    };
    if let Some(m) = &loaded {
        eval_cfg.hyper = m.hyper.clone();
    }
    let ds = house.windowed(eval_cfg.hyper.omega).config()?;
    let split = eval_cfg.split(&ds).config()?;
    let trained_here = loaded.is_none();
    let model = match loaded {
        Some(m) => m,
        None => dtdl::train(&split.train, &eval_cfg.hyper).compute()?,
    };
    let evaluation = experiment::evaluate_with(model, &split, &eval_cfg, ds.device_names()).compute()?;
    let report = evaluation.metrics_report(&eval_cfg, &split);
    output::ensure_dir(out).runtime()?;
    if trained_here {
        output::write_model(out, &evaluation.model).runtime()?;
    }
    output::write_json(&out.join(output::METRICS), &report).runtime()?;
    let SplitSizes { train, validation, test } = report.windows;
    println!("windows: train {train}, validation {validation}, test {test}");
    for m in &report.methods {
        println!(
            "{:>5}  acc {:>7.2}  F {:>7.2}  precision {:>7.2}  recall {:>7.2}",
            m.method, m.metrics.acc, m.metrics.f_score, m.metrics.precision, m.metrics.recall
        );
    }
    Ok(())
}

fn sweep(cfg: &RunConfig) -> Outcome<()> {
    let out = cfg.out_dir().config()?;
    let house = data::load(cfg.data_path().config()?).config()?;
    let eval_cfg = cfg.eval();
    let cells = cfg.sweep.cells(&eval_cfg.hyper);
    for hp in &cells {
        hp.validate().config()?;
        house.windowed(hp.omega).config()?;
    }
    let rows = experiment::validate_grid(|omega| house.windowed(omega), &cfg.sweep, &eval_cfg).compute()?;
    output::ensure_dir(out).runtime()?;
    output::write_sweep(out, &rows).runtime()?;
    if let Some(best) = rows.iter().max_by(|a, b| a.validation_acc.total_cmp(&b.validation_acc)) {
        println!(
            "{} cells; best m={} omega={} lambda2={} lambda3={} lambda4={} validation acc {:.2}",
            rows.len(),
            best.m,
            best.omega,
            best.lambda2,
            best.lambda3,
            best.lambda4,
            best.validation_acc
        );
    }
    Ok(())
}

fn run_gradcheck(cfg: &RunConfig) -> Outcome<()> {
    let checks = gradcheck::run_suite(cfg.hyper.seed, cfg.gradcheck_cases);
    for c in &checks {
        println!(
            "{:<4} {:<48} entries {:>4}  max rel err {:.3e}",
            if c.passed { "ok" } else { "FAIL" },
            c.name,
            c.entries,
            c.max_rel_error
        );
    }
    if let Some(out) = &cfg.out {
        output::ensure_dir(out).runtime()?;
        output::write_json(&out.join(output::GRADCHECK), &checks).runtime()?;
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        return Err(Failure::Numeric(anyhow!("{failed} of {} gradient checks failed", checks.len())));
    }
    println!("all {} gradient checks passed (tolerance {:e})", checks.len(), gradcheck::REL_TOL);
    Ok(())
}
