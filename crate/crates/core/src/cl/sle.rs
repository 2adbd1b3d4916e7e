//! Single-layer extension: each new task adds one gated spectral branch fed
//! by the lifted input, and inputs are routed to a branch by per-task
//! novelty detectors.

use std::sync::Arc;

use serde_json::json;

use super::{Method, MethodOptions, StageContext, Strategy, RNG_INIT};
use crate::error::{Error, Result};
use crate::fno::{init_pointwise, init_spectral, spectral_layer, Activation, FnoModel, Plain};
use crate::ood::{median_bandwidth, RffMap, Route, Router};
use crate::tensor::container::{Block, Container, KIND_DETECTOR, KIND_STATE};
use crate::tensor::{GridField, Tape, Var};

pub fn branch_prefix(task: usize) -> String {
    format!("sle.{task}")
}

/// Parameter count of one branch: spectral weights, pointwise map, bias and
/// gate.
pub fn branch_param_count(hidden: usize, modes: usize) -> usize {
    2 * hidden * hidden * modes * modes + hidden * hidden + hidden + 1
}

pub struct Sle {
    options: MethodOptions,
    router: Option<Router>,
}

impl Sle {
    pub fn new(options: &MethodOptions) -> Self {
        Self {
            options: options.clone(),
            router: None,
        }
    }

    pub fn router(&self) -> Option<&Router> {
        self.router.as_ref()
    }

    fn branch_modes(&self, model: &FnoModel) -> usize {
        self.options.sle_modes.unwrap_or(model.config.modes)
    }

    /// Forward with the branch of `task` added after the backbone body.
    pub fn forward_branch(model: &FnoModel, tape: &mut Tape, x: Var, task: usize) -> Result<Var> {
        let z0 = model.lift(tape, &Plain, x)?;
        let zl = model.body(tape, &Plain, z0)?;
        if task == 0 {
            return model.project(tape, &Plain, zl);
        }
        let prefix = branch_prefix(task);
        let gate_name = format!("{prefix}.gate");
        if !model.params.contains(&gate_name) {
            return Err(Error::InvalidArgument(format!("no branch for task {task}")));
        }
        let branch = spectral_layer(tape, &model.params, &Plain, &prefix, z0, Activation::Gelu)?;
        let gate = tape.param_named(&model.params, &gate_name)?;
        let gated = tape.mul_scalar(branch, gate)?;
        let z = tape.add(zl, gated)?;
        model.project(tape, &Plain, z)
    }

    fn route(&self, x: &GridField) -> Result<Route> {
        self.router
            .as_ref()
            .ok_or(Error::EmptyRouter)?
            .route(x.data())
    }
}

impl Strategy for Sle {
    fn method(&self) -> Method {
        Method::Sle
    }

    fn begin_task(&mut self, model: &mut FnoModel, ctx: &StageContext) -> Result<()> {
        if ctx.stage == 0 {
            return Ok(());
        }
        model.params.set_trainable(|_| true, false);
        let prefix = branch_prefix(ctx.stage);
        let gate = format!("{prefix}.gate");
        if model.params.contains(&gate) {
            let own = format!("{prefix}.");
            model.params.set_trainable(|n| n.starts_with(&own), true);
            return Ok(());
        }
        let c = model.config.hidden;
        let modes = self.branch_modes(model);
        let mut rng = ctx.rng(RNG_INIT);
        init_spectral(
            &mut model.params,
            &mut rng,
            &format!("{prefix}.spectral"),
            c,
            c,
            modes,
        )?;
        init_pointwise(&mut model.params, &mut rng, &prefix, c, c)?;
        model.params.insert(gate, vec![1], vec![0.0], true)?;
        Ok(())
    }

    fn forward(&self, model: &FnoModel, tape: &mut Tape, x: Var, task: usize) -> Result<Var> {
        Self::forward_branch(model, tape, x, task)
    }

    fn end_task(&mut self, _model: &mut FnoModel, ctx: &StageContext) -> Result<()> {
        let inputs: Vec<Vec<f64>> = ctx
            .task
            .train
            .iter()
            .map(|s| s.input.data().to_vec())
            .collect();
        if self.router.is_none() {
            let sigma = median_bandwidth(&inputs)?;
            let map = RffMap::new(
                inputs[0].len(),
                self.options.router_features,
                ctx.seed,
                sigma,
            )?;
            self.router = Some(Router::new(Arc::new(map), self.options.router_margin));
        }
        let router = self.router.as_mut().expect("router set above");
        router.add_task(ctx.stage, &inputs, self.options.router_modes)?;
        Ok(())
    }

    fn predict(
        &self,
        model: &FnoModel,
        x: &GridField,
        _task: usize,
    ) -> Result<(GridField, Option<Route>)> {
        let route = self.route(x)?;
        let mut tape = Tape::new();
        let xv = tape.constant(x.to_tensor());
        let y = Self::forward_branch(model, &mut tape, xv, route.task())?;
        Ok((GridField::from_tensor(tape.value(y).clone())?, Some(route)))
    }

    fn added_params(&self, model: &FnoModel, task: usize) -> usize {
        let prefix = format!("{}.", branch_prefix(task));
        model.params.count_values(|n| n.starts_with(&prefix))
    }

    fn save_state(&self) -> Result<Container> {
        let mut c = Container::new(KIND_STATE, json!({ "method": "sle" }));
        if let Some(r) = &self.router {
            let inner = r.to_container();
            c.metadata["router"] = inner.metadata;
            for b in inner.blocks {
                c.push(Block {
                    name: format!("router.{}", b.name),
                    ..b
                });
            }
        }
        Ok(c)
    }

    fn load_state(&mut self, state: &Container) -> Result<()> {
        self.router = match state.metadata.get("router") {
            None => None,
            Some(meta) => {
                let mut inner = Container::new(KIND_DETECTOR, meta.clone());
                for b in &state.blocks {
                    if let Some(rest) = b.name.strip_prefix("router.") {
                        inner.push(Block {
                            name: rest.to_string(),
                            ..b.clone()
                        });
                    }
                }
                Some(Router::from_container(&inner)?)
            }
        };
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::super::testutil::*;
    use super::super::train_stage;
    use super::*;

    #[test]
    fn closed_gate_reproduces_backbone() {
        let b = tiny_task("B", 2, [1.8, 2.1]);
        let mut model = FnoModel::new(tiny_config(), 6).unwrap();
        model.params.quantize_f32();
        let mut sle = Sle::new(&MethodOptions::default());
        sle.begin_task(&mut model, &ctx(1, &b, Method::Sle.default_hyper()))
            .unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(b.train[0].input.to_tensor());
        let y = sle.forward(&model, &mut tape, x, 1).unwrap();
        assert_eq!(
            GridField::from_tensor(tape.value(y).clone()).unwrap(),
            model.predict(&b.train[0].input).unwrap()
        );
        let cfg = tiny_config();
        assert_eq!(
            sle.added_params(&model, 1),
            branch_param_count(cfg.hidden, cfg.modes)
        );
        assert_eq!(
            model.params.count_values(|n| n.starts_with("sle.1.")),
            2 * 16 * 4 + 16 + 4 + 1
        );
    }

    #[test]
    fn stages_train_branch_only_and_route() {
        let opts = MethodOptions {
            router_features: 512,
            ..MethodOptions::default()
        };
        let a = tiny_task("A", 1, [0.5, 0.9]);
        let b = tiny_task("B", 2, [1.8, 2.1]);
        let mut model = FnoModel::new(tiny_config(), 6).unwrap();
        model.params.quantize_f32();
        let mut sle = Sle::new(&opts);
        let hyper = Method::Sle.default_hyper();
        train_stage(&mut model, &mut sle, &ctx(0, &a, hyper), 2, 1e-5).unwrap();
        let backbone = model.params.clone();
        train_stage(&mut model, &mut sle, &ctx(1, &b, hyper), 4, 1e-5).unwrap();
        for name in model.backbone_names() {
            assert_eq!(
                model.params.by_name(&name).unwrap().value,
                backbone.by_name(&name).unwrap().value
            );
        }
        assert_ne!(model.params.by_name("sle.1.gate").unwrap().value[0], 0.0);
        for s in &a.train {
            let (y, route) = sle.predict(&model, &s.input, 99).unwrap();
            assert_eq!(route.unwrap().task(), 0);
            assert_eq!(y, backbone_predict(&model, &s.input));
        }
        for s in &b.train {
            assert_eq!(
                sle.predict(&model, &s.input, 0).unwrap().1,
                Some(Route::Task(1))
            );
        }

        let mut back = Sle::new(&opts);
        let bytes = sle.save_state().unwrap().to_bytes().unwrap();
        back.load_state(&Container::from_bytes(&bytes, KIND_STATE).unwrap())
            .unwrap();
        let x = &b.test[0].input;
        assert_eq!(
            back.predict(&model, x, 0).unwrap(),
            sle.predict(&model, x, 0).unwrap()
        );
    }

    fn backbone_predict(model: &FnoModel, x: &GridField) -> GridField {
        model.predict(x).unwrap()
    }
}
