//! Continual-learning strategies behind one trainer.
//!
//! Stage 0 trains the backbone from scratch on the first task for every
//! strategy. Later stages apply the strategy's own mechanism: extra loss
//! terms, gradient surgery, replayed samples, or task-specific parameters.

pub mod ewc;
pub mod gem;
pub mod lora;
pub mod lwf;
pub mod ogd;
pub mod piggyback;
pub mod replay;
pub mod sle;

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fno::FnoModel;
use crate::metrics::{mean_rel_l2, sobolev_loss, MetricConfig};
use crate::ood::Route;
use crate::taskgen::{Sample, TaskDataset};
use crate::tensor::container::Container;
use crate::tensor::{cosine_lr, Adam, AdamConfig, GridField, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Naive,
    Ewc,
    Lwf,
    Reservoir,
    Kmeans,
    Ogd,
    Gem,
    Piggyback,
    Lora,
    Sle,
}

impl Method {
    pub const ALL: [Method; 10] = [
        Method::Naive,
        Method::Ewc,
        Method::Lwf,
        Method::Reservoir,
        Method::Kmeans,
        Method::Ogd,
        Method::Gem,
        Method::Piggyback,
        Method::Lora,
        Method::Sle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Naive => "naive",
            Method::Ewc => "ewc",
            Method::Lwf => "lwf",
            Method::Reservoir => "reservoir",
            Method::Kmeans => "kmeans",
            Method::Ogd => "ogd",
            Method::Gem => "gem",
            Method::Piggyback => "piggyback",
            Method::Lora => "lora",
            Method::Sle => "sle",
        }
    }

    /// Learning rate, weight decay, batch size and regularization weight
    /// used for the continual stages.
    pub fn default_hyper(self) -> Hyper {
        let h = |lr, weight_decay, batch_size, lambda| Hyper {
            lr,
            weight_decay,
            batch_size,
            lambda,
        };
        match self {
            Method::Naive => h(1e-3, 0.0, 1, 0.0),
            Method::Sle => h(1e-2, 0.0, 4, 0.0),
            Method::Lwf => h(1e-3, 1e-2, 2, 0.3),
            Method::Ewc => h(5e-3, 1e-2, 2, ewc::DEFAULT_LAMBDA),
            Method::Reservoir | Method::Kmeans => h(1e-3, 1e-2, 1, 0.0),
            Method::Ogd => h(1e-4, 1e-4, 2, 0.0),
            Method::Gem => h(5e-4, 0.0, 2, 0.0),
            Method::Piggyback => h(1e-2, 0.0, 2, 0.0),
            Method::Lora => h(1e-3, 1e-4, 4, 0.0),
        }
    }

    /// Whether prior tasks are evaluated with parameters that later stages
    /// never touch.
    pub fn isolates_tasks(self) -> bool {
        matches!(self, Method::Piggyback | Method::Lora | Method::Sle)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown method `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Strength of the method's regularizer (EWC, LwF); unused otherwise.
    pub lambda: f64,
}

/// Knobs of individual strategies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MethodOptions {
    pub ogd_alpha: f64,
    pub ogd_cap: usize,
    pub ogd_energy: f64,
    /// Tolerance of the A-GEM alignment test; 0 gives the hard rule.
    pub gem_eps: f64,
    pub piggyback_binarize: bool,
    pub piggyback_threshold: f64,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    /// Retained modes of each SLE branch; the backbone's count when absent.
    pub sle_modes: Option<usize>,
    pub replay_first: usize,
    pub replay_later: usize,
    pub router_features: usize,
    pub router_margin: f64,
    /// Detector modes per task, capped at one less than the task's sample
    /// count; the energy rule when absent.
    pub router_modes: Option<usize>,
}

impl Default for MethodOptions {
    fn default() -> Self {
        Self {
            ogd_alpha: 1.0,
            ogd_cap: ogd::DEFAULT_CAP,
            ogd_energy: ogd::DEFAULT_ENERGY,
            gem_eps: 0.0,
            piggyback_binarize: false,
            piggyback_threshold: 0.5,
            lora_rank: 4,
            lora_alpha: 8.0,
            sle_modes: None,
            replay_first: 16,
            replay_later: 1,
            router_features: crate::ood::rff::DEFAULT_FEATURES,
            router_margin: crate::ood::kpca::DEFAULT_MARGIN,
            router_modes: Some(crate::ood::DEFAULT_MODES),
        }
    }
}

/// Independent generator for one (seed, stage, purpose) triple, so no RNG
/// state has to survive between stages.
pub fn stage_rng(seed: u64, stage: usize, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stage as u64) << 8) | purpose);
    rng
}

pub const RNG_SHUFFLE: u64 = 1;
pub const RNG_METHOD: u64 = 2;
pub const RNG_INIT: u64 = 3;

/// Everything a strategy may consult about the stage being trained.
pub struct StageContext<'a> {
    pub stage: usize,
    pub task: &'a TaskDataset,
    pub hyper: Hyper,
    pub metrics: MetricConfig,
    pub seed: u64,
}

impl StageContext<'_> {
    pub fn rng(&self, purpose: u64) -> ChaCha8Rng {
        stage_rng(self.seed, self.stage, purpose)
    }
}

pub trait Strategy {
    fn method(&self) -> Method;

    /// Prepare parameters and state before training on `ctx.task`.
    fn begin_task(&mut self, _model: &mut FnoModel, _ctx: &StageContext) -> Result<()> {
        Ok(())
    }

    /// Samples iterated every epoch.
    fn training_samples(&self, task: &TaskDataset) -> Vec<Sample> {
        task.train.clone()
    }

    /// Prediction under the parameters of `task`.
    fn forward(&self, model: &FnoModel, tape: &mut Tape, x: Var, _task: usize) -> Result<Var> {
        model.forward(tape, x)
    }

    /// Extra per-sample loss; `index` points into `training_samples`.
    fn sample_extra(&self, _tape: &mut Tape, _pred: Var, _index: usize) -> Result<Option<Var>> {
        Ok(None)
    }

    /// Extra per-batch loss depending only on the parameters.
    fn penalty(&self, _model: &FnoModel, _tape: &mut Tape) -> Result<Option<Var>> {
        Ok(None)
    }

    /// Modify the accumulated gradients before the optimizer step.
    fn adjust_gradients(&mut self, _model: &mut FnoModel, _ctx: &StageContext) -> Result<()> {
        Ok(())
    }

    /// Update method state after training on `ctx.task`.
    fn end_task(&mut self, _model: &mut FnoModel, _ctx: &StageContext) -> Result<()> {
        Ok(())
    }

    /// Prediction at evaluation time. Task-aware strategies use `task`;
    /// routed strategies choose their own and report the route.
    fn predict(
        &self,
        model: &FnoModel,
        x: &GridField,
        task: usize,
    ) -> Result<(GridField, Option<Route>)> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.to_tensor());
        let y = self.forward(model, &mut tape, xv, task)?;
        Ok((GridField::from_tensor(tape.value(y).clone())?, None))
    }

    /// Parameters added for `task` on top of the backbone.
    fn added_params(&self, _model: &FnoModel, _task: usize) -> usize {
        0
    }

    fn save_state(&self) -> Result<Container>;

    fn load_state(&mut self, state: &Container) -> Result<()>;
}

pub fn build(method: Method, options: &MethodOptions) -> Box<dyn Strategy> {
    match method {
        Method::Naive => Box::new(Naive),
        Method::Ewc => Box::new(ewc::Ewc::default()),
        Method::Lwf => Box::new(lwf::Lwf::default()),
        Method::Reservoir => Box::new(replay::Replay::new(replay::Policy::Reservoir, options)),
        Method::Kmeans => Box::new(replay::Replay::new(replay::Policy::Kmeans, options)),
        Method::Ogd => Box::new(ogd::Ogd::new(options)),
        Method::Gem => Box::new(gem::Gem::new(options)),
        Method::Piggyback => Box::new(piggyback::Piggyback::new(options)),
        Method::Lora => Box::new(lora::Lora::new(options)),
        Method::Sle => Box::new(sle::Sle::new(options)),
    }
}

/// Plain fine-tuning of every parameter.
pub struct Naive;

impl Strategy for Naive {
    fn method(&self) -> Method {
        Method::Naive
    }

    fn save_state(&self) -> Result<Container> {
        Ok(empty_state(Method::Naive))
    }

    fn load_state(&mut self, _state: &Container) -> Result<()> {
        Ok(())
    }
}

pub(crate) fn empty_state(method: Method) -> Container {
    Container::new(
        crate::tensor::container::KIND_STATE,
        serde_json::json!({ "method": method.name() }),
    )
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageStats {
    /// Mean training-split relative error before the stage's first step.
    pub train_rel_before: f64,
    /// The same after training.
    pub train_rel_after: f64,
    pub steps: u64,
}

/// Mean relative error over `samples` under the parameters of `task`,
/// bypassing any routing.
pub fn task_rel(
    strategy: &dyn Strategy,
    model: &FnoModel,
    samples: &[Sample],
    task: usize,
) -> Result<f64> {
    let mut preds = Vec::with_capacity(samples.len());
    let mut tape = Tape::new();
    for s in samples {
        tape.clear();
        let x = tape.constant(s.input.to_tensor());
        let y = strategy.forward(model, &mut tape, x, task)?;
        preds.push(GridField::from_tensor(tape.value(y).clone())?);
    }
    let targets: Vec<GridField> = samples.iter().map(|s| s.target.clone()).collect();
    mean_rel_l2(&preds, &targets)
}

/// Mean relative error of `strategy`'s predictions over `samples`.
pub fn evaluate_rel(
    strategy: &dyn Strategy,
    model: &FnoModel,
    samples: &[Sample],
    task: usize,
) -> Result<f64> {
    let preds = samples
        .iter()
        .map(|s| strategy.predict(model, &s.input, task).map(|p| p.0))
        .collect::<Result<Vec<_>>>()?;
    let targets: Vec<GridField> = samples.iter().map(|s| s.target.clone()).collect();
    mean_rel_l2(&preds, &targets)
}

/// Gradient of the mean Sobolev loss over `samples`, evaluated with the
/// strategy's forward under `task`; leaves it in the store's gradient slots.
pub(crate) fn accumulate_loss_gradient(
    strategy: &dyn Strategy,
    model: &mut FnoModel,
    samples: &[&Sample],
    task: usize,
    lambda: f64,
) -> Result<f64> {
    model.params.zero_grad();
    let mut tape = Tape::new();
    let mut total: Option<Var> = None;
    for s in samples {
        let x = tape.constant(s.input.to_tensor());
        let pred = strategy.forward(model, &mut tape, x, task)?;
        let l = sobolev_loss(&mut tape, pred, &s.target.to_tensor(), lambda)?;
        total = Some(match total {
            Some(t) => tape.add(t, l)?,
            None => l,
        });
    }
    let total = total.ok_or(Error::EmptyDataset)?;
    let loss = tape.scale(total, 1.0 / samples.len() as f64);
    let value = tape.value(loss).item().unwrap_or(f64::NAN);
    tape.backward(loss, &mut model.params)?;
    Ok(value)
}

/// One stage: `begin_task`, the epoch loop with a cosine learning-rate
/// schedule, rounding of all parameters to `f32`, then `end_task`.
pub fn train_stage(
    model: &mut FnoModel,
    strategy: &mut dyn Strategy,
    ctx: &StageContext,
    epochs: usize,
    lr_floor: f64,
) -> Result<StageStats> {
    if ctx.task.train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if ctx.hyper.batch_size == 0 {
        return Err(Error::InvalidArgument(
            "batch size must be at least 1".into(),
        ));
    }
    strategy.begin_task(model, ctx)?;
    let train_rel_before = task_rel(strategy, model, &ctx.task.train, ctx.stage)?;
    let samples = strategy.training_samples(ctx.task);
    let mut adam = Adam::new(AdamConfig {
        lr: ctx.hyper.lr,
        weight_decay: ctx.hyper.weight_decay,
        ..AdamConfig::default()
    });
    let mut rng = ctx.rng(RNG_SHUFFLE);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut tape = Tape::new();
    for epoch in 0..epochs {
        adam.set_lr(cosine_lr(
            ctx.hyper.lr,
            lr_floor.min(ctx.hyper.lr),
            epoch,
            epochs,
        ));
        order.shuffle(&mut rng);
        for batch in order.chunks(ctx.hyper.batch_size) {
            model.params.zero_grad();
            tape.clear();
            let mut total: Option<Var> = None;
            for &i in batch {
                let s = &samples[i];
                let x = tape.constant(s.input.to_tensor());
                let pred = strategy.forward(model, &mut tape, x, ctx.stage)?;
                let mut l = sobolev_loss(
                    &mut tape,
                    pred,
                    &s.target.to_tensor(),
                    ctx.metrics.sobolev_lambda,
                )?;
                if let Some(extra) = strategy.sample_extra(&mut tape, pred, i)? {
                    l = tape.add(l, extra)?;
                }
                total = Some(match total {
                    Some(t) => tape.add(t, l)?,
                    None => l,
                });
            }
            let total = total.expect("chunks are never empty");
            let mut loss = tape.scale(total, 1.0 / batch.len() as f64);
            if let Some(p) = strategy.penalty(model, &mut tape)? {
                loss = tape.add(loss, p)?;
            }
            if !tape.value(loss).is_finite() {
                return Err(Error::NonFinite("training loss"));
            }
            tape.backward(loss, &mut model.params)?;
            strategy.adjust_gradients(model, ctx)?;
            adam.step(&mut model.params);
        }
    }
    model.params.quantize_f32();
    model.params.zero_grad();
    let train_rel_after = task_rel(strategy, model, &ctx.task.train, ctx.stage)?;
    strategy.end_task(model, ctx)?;
    Ok(StageStats {
        train_rel_before,
        train_rel_after,
        steps: adam.steps(),
    })
}

/// Flattened gradients of every trainable entry, in store order.
pub(crate) fn flat_grads(model: &FnoModel) -> Vec<f64> {
    model
        .params
        .iter()
        .filter(|(_, e)| e.trainable)
        .flat_map(|(_, e)| e.grad.iter().copied())
        .collect()
}

/// Inverse of [`flat_grads`].
pub(crate) fn set_flat_grads(model: &mut FnoModel, flat: &[f64]) {
    let mut off = 0;
    for (_, e) in model.params.iter_mut().filter(|(_, e)| e.trainable) {
        let n = e.grad.len();
        e.grad.copy_from_slice(&flat[off..off + n]);
        off += n;
    }
}
