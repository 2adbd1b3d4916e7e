use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use slefno::bench::{
    dump_sample_images, forgetting_csv, render_tables, run_sequence, Predictor, RunConfig,
    RunReport, SEED_ENV,
};
use slefno::cl::Method;
use slefno::metrics::{accuracy_r, rel_l2};
use slefno::ood::Route;
use slefno::taskgen::{check_disjoint, default_sequence, generate, TaskDataset, TaskSpec};
use slefno::{Error, Result};

#[derive(Parser)]
#[command(
    name = "slefno",
    version,
    about = "Continual learning benchmark for Fourier neural operators"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Full,
    Desk,
}

#[derive(Subcommand)]
enum Command {
    /// Generate task datasets from a JSON list of task specs.
    Taskgen {
        /// Spec file; the default four-task sequence when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        grid: usize,
        #[arg(long, default_value_t = 0, env = SEED_ENV)]
        seed: u64,
    },
    /// Run the sequential protocol and write checkpoints and a report.
    Run {
        /// JSON run configuration; fields left out take preset values.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "desk")]
        preset: Preset,
        #[arg(long)]
        method: Option<Method>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Evaluate the latest checkpoint of a run on a dataset's test split.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Task index for task-aware methods.
        #[arg(long)]
        task: Option<usize>,
        /// Directory for prediction, target and error images.
        #[arg(long)]
        images: Option<PathBuf>,
    },
    /// Render a report as tables and CSV files, optionally with images.
    Report {
        #[arg(long)]
        report: PathBuf,
        /// Directory for CSV tables; next to the report when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Dump images of the first test sample of every task.
        #[arg(long)]
        images: bool,
    },
}

fn read_config(path: Option<&Path>, preset: Preset, method: Option<Method>) -> Result<RunConfig> {
    let mut base = match preset {
        Preset::Full => serde_json::to_value(RunConfig::full(Method::Naive, 0))?,
        Preset::Desk => serde_json::to_value(RunConfig::desk(Method::Naive, 0))?,
    };
    if let Some(p) = path {
        let overlay: serde_json::Value = serde_json::from_str(&fs::read_to_string(p)?)?;
        let serde_json::Value::Object(fields) = overlay else {
            return Err(Error::Format("run config must be a JSON object".into()));
        };
        for (k, v) in fields {
            base[k] = v;
        }
    }
    let mut cfg: RunConfig = serde_json::from_value(base)?;
    if let Some(m) = method {
        cfg.method = m;
    }
    cfg.apply_env()?;
    Ok(cfg)
}

fn taskgen(spec: Option<&Path>, out: &Path, grid: usize, seed: u64) -> Result<serde_json::Value> {
    let specs: Vec<TaskSpec> = match spec {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?)?,
        None => default_sequence(grid, seed),
    };
    check_disjoint(&specs)?;
    fs::create_dir_all(out)?;
    let mut files = Vec::new();
    for s in &specs {
        let path = out.join(format!("{}.dset", s.id));
        generate(s)?.save(&path)?;
        files.push(path);
    }
    Ok(json!({ "datasets": files }))
}

fn run(
    config: Option<&Path>,
    preset: Preset,
    method: Option<Method>,
    out: &Path,
    stop_after: Option<usize>,
) -> Result<serde_json::Value> {
    let mut cfg = read_config(config, preset, method)?;
    if stop_after.is_some() {
        cfg.stop_after_stage = stop_after;
    }
    cfg.validate()?;
    fs::create_dir_all(out)?;
    fs::write(out.join("config.json"), serde_json::to_string_pretty(&cfg)?)?;
    let tasks = cfg.load_datasets()?;
    let outcome = run_sequence(&cfg, &tasks, Some(out), None)?;
    if let Some(r) = &outcome.report {
        print!("{}", render_tables(r)?);
    }
    Ok(json!({
        "out": out,
        "last_stage": outcome.last_stage,
        "complete": outcome.report.is_some(),
    }))
}

fn eval(
    run: &Path,
    dataset: &Path,
    task: Option<usize>,
    images: Option<&Path>,
) -> Result<serde_json::Value> {
    let predictor = Predictor::open(run)?;
    let data = TaskDataset::load(dataset)?;
    if data.test.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut rels = Vec::new();
    let mut routes = Vec::new();
    for (i, s) in data.test.iter().enumerate() {
        let (pred, route) = predictor.predict(&s.input, task)?;
        rels.push(rel_l2(pred.data(), s.target.data())?);
        if let Some(r) = route {
            routes.push(match r {
                Route::Task(t) => json!({ "task": t }),
                Route::Novel { nearest } => json!({ "novel": true, "nearest": nearest }),
            });
        }
        if let Some(dir) = images {
            dump_sample_images(dir, &format!("{}_{i}", data.id), &pred, &s.target)?;
        }
    }
    let mean = rels.iter().sum::<f64>() / rels.len() as f64;
    Ok(json!({
        "task": data.id,
        "stage": predictor.stage,
        "rel_l2": rels,
        "mean_rel_l2": mean,
        "accuracy": accuracy_r(mean, &predictor.config.metrics),
        "routes": routes,
    }))
}

fn report(path: &Path, out: Option<&Path>, images: bool) -> Result<serde_json::Value> {
    let r = RunReport::from_json(&fs::read_to_string(path)?)?;
    r.check_consistency()?;
    print!("{}", render_tables(&r)?);
    let run_dir = path.parent().unwrap_or(Path::new("."));
    let out = out.unwrap_or(run_dir);
    fs::create_dir_all(out)?;
    fs::write(out.join("accuracy.csv"), r.accuracy.to_csv())?;
    fs::write(out.join("forgetting.csv"), forgetting_csv(&r.accuracy)?)?;
    let mut written = Vec::new();
    if images {
        let predictor = Predictor::open(run_dir)?;
        let tasks = r.config.load_datasets()?;
        for (j, t) in tasks.iter().enumerate().take(predictor.stage + 1) {
            let s = t.test.first().ok_or(Error::EmptyDataset)?;
            let (pred, _) = predictor.predict(&s.input, Some(j))?;
            written.extend(dump_sample_images(
                &out.join("images"),
                &t.id,
                &pred,
                &s.target,
            )?);
        }
    }
    Ok(json!({ "tables": out, "images": written }))
}

fn dispatch(cli: Cli) -> Result<serde_json::Value> {
    match cli.command {
        Command::Taskgen {
            spec,
            out,
            grid,
            seed,
        } => taskgen(spec.as_deref(), &out, grid, seed),
        Command::Run {
            config,
            preset,
            method,
            out,
            stop_after,
        } => run(config.as_deref(), preset, method, &out, stop_after),
        Command::Eval {
            run,
            dataset,
            task,
            images,
        } => eval(&run, &dataset, task, images.as_deref()),
        Command::Report {
            report: path,
            out,
            images,
        } => report(&path, out.as_deref(), images),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(v) => {
            if !v.is_null() {
                eprintln!("{v}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!(
                "{}",
                json!({ "error": { "kind": e.kind(), "message": e.to_string() } })
            );
            ExitCode::FAILURE
        }
    }
}
