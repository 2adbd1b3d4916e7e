//! Sequential protocol runner: trains a task sequence with one strategy,
//! evaluates after every stage, persists checkpoints and writes reports.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::cl::{
    self, stage_rng, Hyper, Method, MethodOptions, StageContext, StageStats, Strategy, RNG_INIT,
};
use crate::error::{Error, Result};
use crate::fno::{FnoConfig, FnoModel};
use crate::metrics::{accuracy_r, EvalMatrix, MetricConfig};
use crate::ood::Route;
use crate::taskgen::{default_sequence, generate_sequence, TaskDataset, TaskSpec, INPUT_CHANNELS};
use crate::tensor::container::{
    blocks_to_params, params_to_blocks, Container, KIND_CHECKPOINT, KIND_STATE,
};
use crate::tensor::GridField;

pub const SEED_ENV: &str = "SLEFNO_SEED";
pub const DESK_EWC_LAMBDA: f64 = 10.0;
pub const DESK_LR_SCALE: f64 = 3.0;
pub const LR_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub method: Method,
    pub seed: u64,
    pub model: FnoConfig,
    pub metrics: MetricConfig,
    /// Grid of generated tasks.
    pub grid: usize,
    /// Dataset files, in sequence order. Generated from `tasks` (or the
    /// default sequence) when empty.
    pub datasets: Vec<PathBuf>,
    pub tasks: Option<Vec<TaskSpec>>,
    pub epochs_first: usize,
    pub epochs_later: usize,
    pub lr_floor: f64,
    /// Optimizer settings of the first stage, shared by every method.
    pub pretrain: Hyper,
    /// Settings of later stages; the method's defaults when absent.
    pub hyper: Option<Hyper>,
    /// Multiplies the default learning rate of later stages.
    pub lr_scale: f64,
    /// Multiplies the default weight decay of later stages.
    pub weight_decay_scale: f64,
    /// Replaces the default EWC penalty weight.
    pub ewc_lambda: Option<f64>,
    pub options: MethodOptions,
    /// Stop after this stage, leaving checkpoints for a later resume.
    pub stop_after_stage: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::full(Method::Naive, 0)
    }
}

impl RunConfig {
    /// Full-size model and epoch budget.
    pub fn full(method: Method, seed: u64) -> Self {
        Self {
            method,
            seed,
            model: FnoConfig::default(),
            metrics: MetricConfig::default(),
            grid: 64,
            datasets: Vec::new(),
            tasks: None,
            epochs_first: 3000,
            epochs_later: 1500,
            lr_floor: LR_FLOOR,
            pretrain: Hyper {
                lr: 1e-3,
                weight_decay: 0.0,
                batch_size: 4,
                lambda: 0.0,
            },
            hyper: None,
            lr_scale: 1.0,
            weight_decay_scale: 1.0,
            ewc_lambda: None,
            options: MethodOptions::default(),
            stop_after_stage: None,
        }
    }

    /// Small model and epoch budget that run on one core in minutes.
    ///
    /// Gradients of the small model are far weaker than at full size, so
    /// coupled weight decay drags it to zero and the EWC weight freezes it;
    /// both are scaled down. Later tasks get far fewer optimizer steps than
    /// at full size, which a larger learning rate partly makes up for.
    pub fn desk(method: Method, seed: u64) -> Self {
        let mut c = Self::full(method, seed);
        c.grid = 16;
        c.model.hidden = 8;
        c.model.modes = 6;
        c.epochs_first = 300;
        c.epochs_later = 150;
        c.lr_scale = DESK_LR_SCALE;
        c.weight_decay_scale = 0.0;
        c.ewc_lambda = Some(DESK_EWC_LAMBDA);
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.metrics.validate()?;
        if self.model.in_channels != INPUT_CHANNELS {
            return Err(Error::InvalidArgument(format!(
                "model must take {INPUT_CHANNELS} input channels"
            )));
        }
        if !(self.lr_scale > 0.0)
            || !(self.weight_decay_scale >= 0.0)
            || self.ewc_lambda.is_some_and(|l| !(l >= 0.0))
        {
            return Err(Error::InvalidArgument(
                "weight decay scale and EWC weight must be nonnegative".into(),
            ));
        }
        if self.epochs_first == 0 || self.epochs_later == 0 {
            return Err(Error::InvalidArgument("epochs must be positive".into()));
        }
        for h in [Some(self.pretrain), self.hyper].into_iter().flatten() {
            if h.batch_size == 0 || !(h.lr > 0.0) || h.weight_decay < 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "invalid optimizer settings {h:?}"
                )));
            }
        }
        Ok(())
    }

    pub fn stage_hyper(&self, stage: usize) -> Hyper {
        if stage == 0 {
            self.pretrain
        } else {
            self.hyper.unwrap_or_else(|| {
                let mut h = self.method.default_hyper();
                h.lr *= self.lr_scale;
                h.weight_decay *= self.weight_decay_scale;
                if let (Method::Ewc, Some(l)) = (self.method, self.ewc_lambda) {
                    h.lambda = l;
                }
                h
            })
        }
    }

    pub fn epochs(&self, stage: usize) -> usize {
        if stage == 0 {
            self.epochs_first
        } else {
            self.epochs_later
        }
    }

    /// Apply the seed override from the environment, if set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v.trim().parse().map_err(|_| {
                Error::InvalidArgument(format!("{SEED_ENV}=`{v}` is not an unsigned integer"))
            })?;
        }
        Ok(())
    }

    /// Hash of everything that determines the results; `stop_after_stage`
    /// is excluded so a run can be resumed with a different stop point.
    pub fn fingerprint(&self) -> Result<u32> {
        let mut c = self.clone();
        c.stop_after_stage = None;
        Ok(crc32fast::hash(serde_json::to_string(&c)?.as_bytes()))
    }

    pub fn load_datasets(&self) -> Result<Vec<TaskDataset>> {
        if !self.datasets.is_empty() {
            return self.datasets.iter().map(|p| TaskDataset::load(p)).collect();
        }
        let specs = self
            .tasks
            .clone()
            .unwrap_or_else(|| default_sequence(self.grid, self.seed));
        generate_sequence(&specs)
    }
}

/// Outcome of the first stage, reusable by every method with the same seed,
/// model and pretraining settings.
#[derive(Clone, Debug)]
pub struct Pretrained {
    pub model: FnoModel,
    pub stats: StageStats,
}

/// Train the first stage from scratch.
pub fn pretrain(cfg: &RunConfig, tasks: &[TaskDataset]) -> Result<Pretrained> {
    let first = tasks.first().ok_or(Error::EmptyDataset)?;
    let mut model = initial_model(cfg)?;
    let ctx = stage_context(cfg, 0, first);
    let stats = cl::train_stage(
        &mut model,
        &mut cl::Naive,
        &ctx,
        cfg.epochs_first,
        cfg.lr_floor,
    )?;
    Ok(Pretrained { model, stats })
}

fn initial_model(cfg: &RunConfig) -> Result<FnoModel> {
    let seed = stage_rng(cfg.seed, 0, RNG_INIT).next_u64();
    FnoModel::new(cfg.model.clone(), seed)
}

fn stage_context<'a>(cfg: &RunConfig, stage: usize, task: &'a TaskDataset) -> StageContext<'a> {
    StageContext {
        stage,
        task,
        hyper: cfg.stage_hyper(stage),
        metrics: cfg.metrics,
        seed: cfg.seed,
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoutingStats {
    pub correct: usize,
    pub total: usize,
    /// Inputs no detector accepted; counted as misses.
    pub novel: usize,
}

impl RoutingStats {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            return 0.0;
        }
        self.correct as f64 / self.total as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageForgetting {
    pub per_task: Vec<f64>,
    pub mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub backbone: usize,
    /// Parameters added for each task on top of the backbone.
    pub added: Vec<usize>,
    /// `added / backbone` per task.
    pub ratio: Vec<f64>,
}

/// Everything a run measures. Contains no wall-clock data, so identical
/// runs serialize identically.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub method: Method,
    pub seed: u64,
    pub config: RunConfig,
    pub accuracy: EvalMatrix,
    /// Mean test relative error behind each accuracy entry.
    pub rel_l2: Vec<Vec<Option<f64>>>,
    pub avg_accuracy: Vec<f64>,
    /// Forgetting after stages 1.., one entry per stage.
    pub forgetting: Vec<StageForgetting>,
    pub params: ParamCounts,
    pub routing: Option<Vec<RoutingStats>>,
    pub training: Vec<StageStats>,
}

impl RunReport {
    pub fn final_mean_forgetting(&self) -> Option<f64> {
        self.forgetting.last().map(|f| f.mean)
    }

    /// Recompute the derived fields from the stored matrix and compare.
    pub fn check_consistency(&self) -> Result<()> {
        let stages = self.accuracy.completed_stages();
        if stages == 0 {
            return Err(Error::MissingEntries(
                "report has no completed stage".into(),
            ));
        }
        for k in 0..stages {
            if self.accuracy.avg_accuracy(k)? != self.avg_accuracy[k] {
                return Err(Error::Format(format!(
                    "average accuracy of stage {k} disagrees"
                )));
            }
            if k > 0 {
                let (per_task, mean) = self.accuracy.forgetting(k)?;
                let f = &self.forgetting[k - 1];
                if f.per_task != per_task || f.mean != mean {
                    return Err(Error::Format(format!("forgetting of stage {k} disagrees")));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Partial results carried inside each stage checkpoint.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
struct Progress {
    rows: Vec<Vec<f64>>,
    rel: Vec<Vec<f64>>,
    routing: Vec<RoutingStats>,
    training: Vec<StageStats>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Timings {
    /// Wall seconds of each stage run in this invocation, by stage index.
    pub stages: Vec<Option<f64>>,
    pub total: f64,
}

pub struct RunOutcome {
    pub report: Option<RunReport>,
    pub model: FnoModel,
    pub strategy: Box<dyn Strategy>,
    pub timings: Timings,
    /// Index of the last completed stage.
    pub last_stage: usize,
}

pub fn checkpoint_path(dir: &Path, stage: usize) -> PathBuf {
    dir.join(format!("stage_{stage}.ckpt"))
}

pub fn state_path(dir: &Path, stage: usize) -> PathBuf {
    dir.join(format!("stage_{stage}.state"))
}

/// Evaluate every task up to `stage` on its test split.
fn evaluate_stage(
    cfg: &RunConfig,
    strategy: &dyn Strategy,
    model: &FnoModel,
    tasks: &[TaskDataset],
    stage: usize,
) -> Result<(Vec<f64>, Vec<f64>, Option<RoutingStats>)> {
    let mut acc = Vec::new();
    let mut rels = Vec::new();
    let mut routing: Option<RoutingStats> = None;
    for (j, task) in tasks.iter().enumerate().take(stage + 1) {
        if task.test.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut sum = 0.0;
        for s in &task.test {
            let (pred, route) = strategy.predict(model, &s.input, j)?;
            sum += crate::metrics::rel_l2(pred.data(), s.target.data())?;
            if let Some(r) = route {
                let st = routing.get_or_insert_with(RoutingStats::default);
                st.total += 1;
                match r {
                    Route::Task(t) if t == j => st.correct += 1,
                    Route::Task(_) => {}
                    Route::Novel { .. } => st.novel += 1,
                }
            }
        }
        let rel = sum / task.test.len() as f64;
        rels.push(rel);
        acc.push(accuracy_r(rel, &cfg.metrics));
    }
    Ok((acc, rels, routing))
}

fn save_stage(
    dir: &Path,
    cfg: &RunConfig,
    stage: usize,
    model: &FnoModel,
    strategy: &dyn Strategy,
    progress: &Progress,
) -> Result<()> {
    let mut ck = Container::new(
        KIND_CHECKPOINT,
        json!({
            "stage": stage,
            "fingerprint": cfg.fingerprint()?,
            "config": cfg,
            "progress": progress,
        }),
    );
    for b in params_to_blocks(&model.params, "") {
        ck.push(b);
    }
    // state first: a checkpoint without its state is never picked up
    strategy.save_state()?.save(&state_path(dir, stage))?;
    ck.save(&checkpoint_path(dir, stage))
}

struct Restored {
    stage: usize,
    model: FnoModel,
    progress: Progress,
}

fn restore_latest(
    dir: &Path,
    cfg: &RunConfig,
    strategy: &mut dyn Strategy,
    stages: usize,
) -> Result<Option<Restored>> {
    for stage in (0..stages).rev() {
        let (cp, sp) = (checkpoint_path(dir, stage), state_path(dir, stage));
        if !(cp.exists() && sp.exists()) {
            continue;
        }
        let ck = Container::load(&cp, KIND_CHECKPOINT)?;
        let found = ck.metadata["fingerprint"].as_u64().unwrap_or(u64::MAX);
        if found != cfg.fingerprint()? as u64 {
            return Err(Error::ResumeMismatch(format!(
                "{} was written by a different configuration",
                cp.display()
            )));
        }
        let params = blocks_to_params(&ck.blocks, "")?;
        let model = FnoModel::from_params(cfg.model.clone(), params)?;
        strategy.load_state(&Container::load(&sp, KIND_STATE)?)?;
        let progress: Progress = serde_json::from_value(ck.metadata["progress"].clone())?;
        return Ok(Some(Restored {
            stage,
            model,
            progress,
        }));
    }
    Ok(None)
}

fn build_report(
    cfg: &RunConfig,
    tasks: &[TaskDataset],
    model: &FnoModel,
    strategy: &dyn Strategy,
    progress: &Progress,
) -> Result<RunReport> {
    let labels: Vec<String> = tasks.iter().map(|t| t.id.clone()).collect();
    let accuracy = EvalMatrix::from_rows(labels.clone(), &progress.rows)?;
    let stages = progress.rows.len();
    let avg_accuracy = (0..stages)
        .map(|k| accuracy.avg_accuracy(k))
        .collect::<Result<Vec<_>>>()?;
    let forgetting = (1..stages)
        .map(|k| {
            accuracy
                .forgetting(k)
                .map(|(per_task, mean)| StageForgetting { per_task, mean })
        })
        .collect::<Result<Vec<_>>>()?;
    let backbone = model.backbone_param_count();
    let added: Vec<usize> = (0..labels.len())
        .map(|t| strategy.added_params(model, t))
        .collect();
    let ratio = added.iter().map(|a| *a as f64 / backbone as f64).collect();
    let mut rel_l2 = vec![vec![None; labels.len()]; labels.len()];
    for (k, row) in progress.rel.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            rel_l2[k][j] = Some(*v);
        }
    }
    Ok(RunReport {
        method: cfg.method,
        seed: cfg.seed,
        config: cfg.clone(),
        accuracy,
        rel_l2,
        avg_accuracy,
        forgetting,
        params: ParamCounts {
            backbone,
            added,
            ratio,
        },
        routing: (!progress.routing.is_empty()).then(|| progress.routing.clone()),
        training: progress.training.clone(),
    })
}

/// Run (or resume) the protocol. With `out` set, checkpoints are written
/// after every stage and an existing run in that directory is continued.
/// `pretrained` replaces first-stage training.
pub fn run_sequence(
    cfg: &RunConfig,
    tasks: &[TaskDataset],
    out: Option<&Path>,
    pretrained: Option<&Pretrained>,
) -> Result<RunOutcome> {
    cfg.validate()?;
    if tasks.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let start = Instant::now();
    let mut strategy = cl::build(cfg.method, &cfg.options);
    let mut timings = Timings {
        stages: vec![None; tasks.len()],
        total: 0.0,
    };
    let restored = match out {
        Some(dir) => restore_latest(dir, cfg, strategy.as_mut(), tasks.len())?,
        None => None,
    };
    let (mut model, mut progress, first) = match restored {
        Some(r) => {
            log::info!("resuming after stage {}", r.stage);
            (r.model, r.progress, r.stage + 1)
        }
        None => (initial_model(cfg)?, Progress::default(), 0),
    };
    let last = cfg
        .stop_after_stage
        .map_or(tasks.len() - 1, |s| s.min(tasks.len() - 1));
    for stage in first..=last {
        let t0 = Instant::now();
        let task = &tasks[stage];
        let ctx = stage_context(cfg, stage, task);
        let stats = match (stage, pretrained) {
            (0, Some(p)) => {
                model = p.model.clone();
                strategy.begin_task(&mut model, &ctx)?;
                strategy.end_task(&mut model, &ctx)?;
                p.stats
            }
            _ => cl::train_stage(
                &mut model,
                strategy.as_mut(),
                &ctx,
                cfg.epochs(stage),
                cfg.lr_floor,
            )?,
        };
        let (acc, rel, routing) = evaluate_stage(cfg, strategy.as_ref(), &model, tasks, stage)?;
        log::info!(
            "stage {stage} ({}): train rel {:.4} -> {:.4}, accuracy {:?}",
            task.id,
            stats.train_rel_before,
            stats.train_rel_after,
            acc
        );
        progress.rows.push(acc);
        progress.rel.push(rel);
        progress.training.push(stats);
        if let Some(r) = routing {
            progress.routing.push(r);
        }
        if let Some(dir) = out {
            save_stage(dir, cfg, stage, &model, strategy.as_ref(), &progress)?;
        }
        timings.stages[stage] = Some(t0.elapsed().as_secs_f64());
    }
    timings.total = start.elapsed().as_secs_f64();
    let complete = progress.rows.len() == tasks.len();
    let report = if complete {
        Some(build_report(
            cfg,
            tasks,
            &model,
            strategy.as_ref(),
            &progress,
        )?)
    } else {
        None
    };
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(
            dir.join("timings.json"),
            serde_json::to_string_pretty(&timings)?,
        )?;
        if let Some(r) = &report {
            fs::write(dir.join("report.json"), r.to_json()?)?;
            fs::write(dir.join("accuracy.csv"), r.accuracy.to_csv())?;
        }
    }
    Ok(RunOutcome {
        report,
        model,
        last_stage: progress.rows.len().saturating_sub(1),
        strategy,
        timings,
    })
}

/// Accuracy and forgetting tables, one row per stage.
pub fn render_tables(report: &RunReport) -> Result<String> {
    let m = &report.accuracy;
    let stages = m.completed_stages();
    if stages == 0 {
        return Err(Error::MissingEntries(
            "report has no completed stage".into(),
        ));
    }
    let labels = m.labels();
    let mut s = String::new();
    let _ = write!(s, "{:<8}", "stage");
    for l in labels {
        let _ = write!(s, "{l:>9}");
    }
    let _ = writeln!(s, "{:>10}", "avg.acc");
    for k in 0..stages {
        let _ = write!(s, "{:<8}", labels[k]);
        for j in 0..labels.len() {
            match m.get(k, j) {
                Some(v) => {
                    let _ = write!(s, "{v:>9.4}");
                }
                None => {
                    let _ = write!(s, "{:>9}", "-");
                }
            }
        }
        let _ = writeln!(s, "{:>10.4}", m.avg_accuracy(k)?);
    }
    if stages > 1 {
        let _ = writeln!(s);
        let _ = write!(s, "{:<8}", "stage");
        for l in &labels[..labels.len() - 1] {
            let _ = write!(s, "{:>9}", format!("F_{l}"));
        }
        let _ = writeln!(s, "{:>10}", "meanF");
        for k in 1..stages {
            let (per_task, mean) = m.forgetting(k)?;
            let _ = write!(s, "{:<8}", labels[k]);
            for j in 0..labels.len() - 1 {
                match per_task.get(j) {
                    Some(v) => {
                        let _ = write!(s, "{v:>9.4}");
                    }
                    None => {
                        let _ = write!(s, "{:>9}", "-");
                    }
                }
            }
            let _ = writeln!(s, "{mean:>10.4}");
        }
    }
    Ok(s)
}

/// Forgetting table as CSV: `stage,F_A,...,meanF`.
pub fn forgetting_csv(m: &EvalMatrix) -> Result<String> {
    let labels = m.labels();
    let mut s = String::from("stage");
    for l in &labels[..labels.len().saturating_sub(1)] {
        s.push_str(&format!(",F_{l}"));
    }
    s.push_str(",meanF\n");
    for k in 1..m.completed_stages() {
        let (per_task, mean) = m.forgetting(k)?;
        s.push_str(&labels[k]);
        for j in 0..labels.len() - 1 {
            s.push(',');
            if let Some(v) = per_task.get(j) {
                s.push_str(&v.to_string());
            }
        }
        s.push_str(&format!(",{mean}\n"));
    }
    Ok(s)
}

/// A trained model with its strategy, loaded from a run directory.
pub struct Predictor {
    pub config: RunConfig,
    pub model: FnoModel,
    pub strategy: Box<dyn Strategy>,
    pub stage: usize,
}

impl Predictor {
    /// Load the latest completed stage in `dir`.
    pub fn open(dir: &Path) -> Result<Self> {
        let mut stage = None;
        for entry in fs::read_dir(dir)? {
            let name = entry?.file_name().to_string_lossy().into_owned();
            if let Some(k) = name
                .strip_prefix("stage_")
                .and_then(|r| r.strip_suffix(".ckpt"))
            {
                if let Ok(k) = k.parse::<usize>() {
                    if state_path(dir, k).exists() {
                        stage = stage.max(Some(k));
                    }
                }
            }
        }
        let stage =
            stage.ok_or_else(|| Error::Format(format!("no checkpoint in {}", dir.display())))?;
        let ck = Container::load(&checkpoint_path(dir, stage), KIND_CHECKPOINT)?;
        let config: RunConfig = serde_json::from_value(ck.metadata["config"].clone())?;
        let model = FnoModel::from_params(config.model.clone(), blocks_to_params(&ck.blocks, "")?)?;
        let mut strategy = cl::build(config.method, &config.options);
        strategy.load_state(&Container::load(&state_path(dir, stage), KIND_STATE)?)?;
        Ok(Self {
            config,
            model,
            strategy,
            stage,
        })
    }

    /// Predict for `task`; routed strategies ignore it and report the route.
    pub fn predict(
        &self,
        x: &GridField,
        task: Option<usize>,
    ) -> Result<(GridField, Option<Route>)> {
        let routed = self.config.method == Method::Sle;
        let task = match task {
            Some(t) if t > self.stage => {
                return Err(Error::InvalidArgument(format!(
                    "task {t} not trained yet (last stage {})",
                    self.stage
                )))
            }
            Some(t) => t,
            None if routed => 0,
            None => {
                return Err(Error::InvalidArgument(format!(
                    "{} needs a task index",
                    self.config.method
                )))
            }
        };
        self.strategy.predict(&self.model, x, task)
    }
}

/// Binary greyscale image scaled to `[lo, hi]`.
pub fn write_pgm(
    path: &Path,
    plane: &[f64],
    height: usize,
    width: usize,
    lo: f64,
    hi: f64,
) -> Result<()> {
    if plane.len() != height * width {
        return Err(Error::Shape(format!(
            "{} values for a {height}x{width} image",
            plane.len()
        )));
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend(
        plane
            .iter()
            .map(|v| (((v - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Prediction, target and absolute error of one sample as three images
/// sharing the target's value range.
pub fn dump_sample_images(
    dir: &Path,
    stem: &str,
    pred: &GridField,
    target: &GridField,
) -> Result<Vec<PathBuf>> {
    if !pred.same_shape(target) {
        return Err(Error::Shape("prediction and target differ in shape".into()));
    }
    let (h, w) = (target.height(), target.width());
    let t = target.plane(0);
    let p = pred.plane(0);
    let lo = t.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = t.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let err: Vec<f64> = p.iter().zip(t).map(|(a, b)| (a - b).abs()).collect();
    let emax = err.iter().copied().fold(0.0, f64::max);
    let paths = vec![
        dir.join(format!("{stem}_pred.pgm")),
        dir.join(format!("{stem}_target.pgm")),
        dir.join(format!("{stem}_error.pgm")),
    ];
    write_pgm(&paths[0], p, h, w, lo, hi)?;
    write_pgm(&paths[1], t, h, w, lo, hi)?;
    write_pgm(&paths[2], &err, h, w, 0.0, emax)?;
    Ok(paths)
}
