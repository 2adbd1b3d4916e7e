//! Per-task multiplicative masks over frozen backbone weights.

use serde_json::json;

use super::{Method, MethodOptions, StageContext, Strategy};
use crate::error::Result;
use crate::fno::{FnoModel, WeightMap};
use crate::tensor::container::{Container, KIND_STATE};
use crate::tensor::{ParamStore, Tape, Var};

pub fn mask_name(task: usize, name: &str) -> String {
    format!("mask.{task}.{name}")
}

/// Entries that receive a mask: every weight tensor, including the real
/// view of spectral weights. Biases stay shared.
pub fn is_masked(name: &str) -> bool {
    name.ends_with(".weight") || name.ends_with(".spectral")
}

/// Weights multiplied elementwise by task `task`'s masks.
pub struct MaskMap {
    pub task: usize,
    pub binarize: Option<f64>,
}

impl WeightMap for MaskMap {
    fn weight(&self, tape: &mut Tape, store: &ParamStore, name: &str) -> Result<Var> {
        let w = tape.param_named(store, name)?;
        let mname = mask_name(self.task, name);
        if !store.contains(&mname) {
            return Ok(w);
        }
        let mut m = tape.param_named(store, &mname)?;
        if let Some(t) = self.binarize {
            m = tape.binarize(m, t);
        }
        tape.mul(w, m)
    }
}

pub struct Piggyback {
    options: MethodOptions,
}

impl Piggyback {
    pub fn new(options: &MethodOptions) -> Self {
        Self {
            options: options.clone(),
        }
    }

    fn map(&self, task: usize) -> MaskMap {
        MaskMap {
            task,
            binarize: self
                .options
                .piggyback_binarize
                .then_some(self.options.piggyback_threshold),
        }
    }
}

impl Strategy for Piggyback {
    fn method(&self) -> Method {
        Method::Piggyback
    }

    fn begin_task(&mut self, model: &mut FnoModel, ctx: &StageContext) -> Result<()> {
        if ctx.stage == 0 {
            return Ok(());
        }
        model.params.set_trainable(|_| true, false);
        for name in model.backbone_names().into_iter().filter(|n| is_masked(n)) {
            let m = mask_name(ctx.stage, &name);
            if !model.params.contains(&m) {
                let shape = model.params.by_name(&name)?.shape.clone();
                let n = shape.iter().product();
                model.params.insert(m, shape, vec![1.0; n], true)?;
            }
        }
        let prefix = format!("mask.{}.", ctx.stage);
        model.params.set_trainable(|n| n.starts_with(&prefix), true);
        Ok(())
    }

    fn forward(&self, model: &FnoModel, tape: &mut Tape, x: Var, task: usize) -> Result<Var> {
        if task == 0 {
            model.forward(tape, x)
        } else {
            model.forward_with(tape, &self.map(task), x)
        }
    }

    fn added_params(&self, model: &FnoModel, task: usize) -> usize {
        let prefix = format!("mask.{task}.");
        model.params.count_values(|n| n.starts_with(&prefix))
    }

    fn save_state(&self) -> Result<Container> {
        Ok(Container::new(KIND_STATE, json!({ "method": "piggyback" })))
    }

    fn load_state(&mut self, _state: &Container) -> Result<()> {
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::super::testutil::*;
    use super::super::train_stage;
    use super::*;

    #[test]
    fn unit_masks_reproduce_backbone_and_train_alone() {
        let a = tiny_task("A", 1, [0.5, 0.9]);
        let b = tiny_task("B", 2, [1.8, 2.1]);
        let mut model = FnoModel::new(tiny_config(), 6).unwrap();
        model.params.quantize_f32();
        let mut pb = Piggyback::new(&MethodOptions::default());
        let hyper = Method::Piggyback.default_hyper();
        pb.begin_task(&mut model, &ctx(1, &b, hyper)).unwrap();
        let x = &b.train[0].input;
        let base = model.predict(x).unwrap();
        assert_eq!(pb.predict(&model, x, 1).unwrap().0, base);

        let before = model.params.clone();
        train_stage(&mut model, &mut pb, &ctx(1, &b, hyper), 3, 1e-5).unwrap();
        for name in model.backbone_names() {
            assert_eq!(
                model.params.by_name(&name).unwrap(),
                before.by_name(&name).unwrap()
            );
        }
        assert_ne!(pb.predict(&model, x, 1).unwrap().0, base);
        assert_eq!(
            pb.predict(&model, &a.train[0].input, 0).unwrap().0,
            model.predict(&a.train[0].input).unwrap()
        );
        let cfg = tiny_config();
        let weights = cfg.param_count()
            - model
                .backbone_names()
                .iter()
                .filter(|n| !is_masked(n))
                .map(|n| model.params.by_name(n).unwrap().len())
                .sum::<usize>();
        assert_eq!(pb.added_params(&model, 1), weights);
    }

    #[test]
    fn binarized_masks_gate_weights() {
        let b = tiny_task("B", 2, [1.8, 2.1]);
        let mut model = FnoModel::new(tiny_config(), 6).unwrap();
        model.params.quantize_f32();
        let opts = MethodOptions {
            piggyback_binarize: true,
            ..MethodOptions::default()
        };
        let mut pb = Piggyback::new(&opts);
        pb.begin_task(&mut model, &ctx(1, &b, Method::Piggyback.default_hyper()))
            .unwrap();
        for (_, e) in model
            .params
            .iter_mut()
            .filter(|(_, e)| e.name.starts_with("mask."))
        {
            e.value.iter_mut().for_each(|v| *v = 0.2);
        }
        // all weights gated off leaves only biases
        let mut zeroed = model.clone();
        for name in model.backbone_names().iter().filter(|n| is_masked(n)) {
            let id = zeroed.params.require(name).unwrap();
            zeroed
                .params
                .get_mut(id)
                .value
                .iter_mut()
                .for_each(|v| *v = 0.0);
        }
        let x = &b.train[0].input;
        assert_eq!(
            pb.predict(&model, x, 1).unwrap().0,
            zeroed.predict(x).unwrap()
        );
    }
}
