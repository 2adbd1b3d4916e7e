//! Elastic weight consolidation with an empirical diagonal Fisher per task.

use std::sync::Arc;

use serde_json::json;

use super::{Method, StageContext, Strategy};
use crate::error::{Error, Result};
use crate::fno::FnoModel;
use crate::tensor::container::{Block, Container, Dtype, KIND_STATE};
use crate::tensor::{Tape, Tensor, Var};

pub const DEFAULT_LAMBDA: f64 = 2e7;

/// Mean of squared per-sample gradients.
pub fn fisher_from_gradients(grads: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = grads.first().ok_or(Error::EmptyDataset)?;
    let mut f = vec![0.0; first.len()];
    for g in grads {
        if g.len() != f.len() {
            return Err(Error::Shape("gradients differ in length".into()));
        }
        for (fi, gi) in f.iter_mut().zip(g) {
            *fi += gi * gi;
        }
    }
    let n = grads.len() as f64;
    f.iter_mut().for_each(|v| *v /= n);
    Ok(f)
}

/// `(λ/2)·Σ F·(θ − θ*)²`.
pub fn penalty_value(fisher: &[f64], anchor: &[f64], theta: &[f64], lambda: f64) -> f64 {
    0.5 * lambda
        * fisher
            .iter()
            .zip(anchor)
            .zip(theta)
            .map(|((f, a), t)| f * (t - a) * (t - a))
            .sum::<f64>()
}

/// Fisher and anchor of one finished task, per backbone entry.
#[derive(Clone, Debug, PartialEq)]
struct Consolidated {
    fisher: Vec<Vec<f64>>,
    anchor: Vec<Vec<f64>>,
}

#[derive(Default)]
pub struct Ewc {
    names: Vec<String>,
    tasks: Vec<Consolidated>,
    lambda: f64,
}

impl Ewc {
    /// Per-sample gradients of `½‖ŷ − y‖²` over the backbone, flattened.
    fn sample_gradients(model: &FnoModel, ctx: &StageContext) -> Result<Vec<Vec<f64>>> {
        let names = model.backbone_names();
        let mut work = model.clone();
        work.params.set_trainable(|_| true, true);
        let mut out = Vec::with_capacity(ctx.task.train.len());
        let mut tape = Tape::new();
        for s in &ctx.task.train {
            tape.clear();
            work.params.zero_grad();
            let x = tape.constant(s.input.to_tensor());
            let pred = work.forward(&mut tape, x)?;
            let y = tape.constant(s.target.to_tensor());
            let d = tape.sub(pred, y)?;
            let sq = tape.sum_squares(d);
            let loss = tape.scale(sq, 0.5);
            tape.backward(loss, &mut work.params)?;
            let mut flat = Vec::new();
            for n in &names {
                flat.extend_from_slice(&work.params.by_name(n)?.grad);
            }
            out.push(flat);
        }
        Ok(out)
    }

    pub fn consolidated_tasks(&self) -> usize {
        self.tasks.len()
    }
}

impl Strategy for Ewc {
    fn method(&self) -> Method {
        Method::Ewc
    }

    fn begin_task(&mut self, model: &mut FnoModel, ctx: &StageContext) -> Result<()> {
        self.lambda = ctx.hyper.lambda;
        self.names = model.backbone_names();
        Ok(())
    }

    fn penalty(&self, model: &FnoModel, tape: &mut Tape) -> Result<Option<Var>> {
        if self.tasks.is_empty() || self.lambda == 0.0 {
            return Ok(None);
        }
        let mut total: Option<Var> = None;
        for task in &self.tasks {
            for ((name, f), a) in self.names.iter().zip(&task.fisher).zip(&task.anchor) {
                let e = model.params.by_name(name)?;
                let theta = tape.param_named(&model.params, name)?;
                let anchor = tape.constant(Tensor::new(e.shape.clone(), a.clone())?);
                let d = tape.sub(theta, anchor)?;
                let term = tape.weighted_sum_squares(d, Arc::from(f.as_slice()))?;
                total = Some(match total {
                    Some(t) => tape.add(t, term)?,
                    None => term,
                });
            }
        }
        Ok(total.map(|t| tape.scale(t, 0.5 * self.lambda)))
    }

    fn end_task(&mut self, model: &mut FnoModel, ctx: &StageContext) -> Result<()> {
        self.names = model.backbone_names();
        let grads = Self::sample_gradients(model, ctx)?;
        let flat = fisher_from_gradients(&grads)?;
        let mut fisher = Vec::new();
        let mut anchor = Vec::new();
        let mut off = 0;
        for n in &self.names {
            let e = model.params.by_name(n)?;
            fisher.push(flat[off..off + e.len()].to_vec());
            anchor.push(e.value.clone());
            off += e.len();
        }
        self.tasks.push(Consolidated { fisher, anchor });
        Ok(())
    }

    fn save_state(&self) -> Result<Container> {
        let mut c = Container::new(
            KIND_STATE,
            json!({ "method": "ewc", "names": self.names, "tasks": self.tasks.len(), "lambda": self.lambda }),
        );
        for (k, t) in self.tasks.iter().enumerate() {
            for ((n, f), a) in self.names.iter().zip(&t.fisher).zip(&t.anchor) {
                c.push(Block::new(
                    format!("fisher.{k}.{n}"),
                    vec![f.len()],
                    Dtype::F64,
                    f.clone(),
                ));
                c.push(Block::new(
                    format!("anchor.{k}.{n}"),
                    vec![a.len()],
                    Dtype::F64,
                    a.clone(),
                ));
            }
        }
        Ok(c)
    }

    fn load_state(&mut self, state: &Container) -> Result<()> {
        let names: Vec<String> = serde_json::from_value(state.metadata["names"].clone())?;
        let count = state.metadata["tasks"]
            .as_u64()
            .ok_or_else(|| Error::Format("EWC state lacks task count".into()))?;
        let mut tasks = Vec::new();
        for k in 0..count {
            let mut fisher = Vec::new();
            let mut anchor = Vec::new();
            for n in &names {
                fisher.push(state.block(&format!("fisher.{k}.{n}"))?.data.clone());
                anchor.push(state.block(&format!("anchor.{k}.{n}"))?.data.clone());
            }
            tasks.push(Consolidated { fisher, anchor });
        }
        self.names = names;
        self.tasks = tasks;
        self.lambda = state.metadata["lambda"].as_f64().unwrap_or(0.0);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::super::testutil::*;
    use super::super::Hyper;
    use super::*;

    #[test]
    fn fisher_is_mean_square() {
        let f = fisher_from_gradients(&[vec![1.0, -2.0], vec![3.0, 0.0]]).unwrap();
        assert_eq!(f, vec![5.0, 2.0]);
        assert!(fisher_from_gradients(&[]).is_err());
        assert!(fisher_from_gradients(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn penalty_closed_form() {
        let v = penalty_value(&[2.0, 0.5], &[1.0, 1.0], &[3.0, -1.0], 4.0);
        assert_eq!(v, 0.5 * 4.0 * (2.0 * 4.0 + 0.5 * 4.0));
    }

    fn model_and_task() -> (FnoModel, crate::taskgen::TaskDataset) {
        (
            FnoModel::new(tiny_config(), 9).unwrap(),
            tiny_task("A", 2, [0.5, 0.9]),
        )
    }

    #[test]
    fn fisher_matches_finite_differences() {
        let (model, task) = model_and_task();
        let hyper = Hyper {
            lambda: 1.0,
            ..Method::Ewc.default_hyper()
        };
        let c = ctx(0, &task, hyper);
        let grads = Ewc::sample_gradients(&model, &c).unwrap();
        // spot-check a handful of coordinates with central differences
        let names = model.backbone_names();
        let loss = |m: &FnoModel, s: &crate::taskgen::Sample| {
            let p = m.predict(&s.input).unwrap();
            0.5 * p
                .data()
                .iter()
                .zip(s.target.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
        };
        let mut offset = 0;
        for n in &names {
            let len = model.params.by_name(n).unwrap().len();
            for &j in &[0, len / 2, len - 1] {
                for (si, s) in task.train.iter().enumerate() {
                    let h = 1e-6;
                    let mut plus = model.clone();
                    let id = plus.params.require(n).unwrap();
                    plus.params.get_mut(id).value[j] += h;
                    let mut minus = model.clone();
                    minus.params.get_mut(id).value[j] -= h;
                    let fd = (loss(&plus, s) - loss(&minus, s)) / (2.0 * h);
                    let g = grads[si][offset + j];
                    assert!(
                        (fd - g).abs() <= 1e-4 * fd.abs().max(g.abs()).max(1e-3),
                        "{n}[{j}] sample {si}: {fd} vs {g}"
                    );
                }
            }
            offset += len;
        }
    }

    #[test]
    fn tape_penalty_matches_value_and_state_round_trips() {
        let (mut model, task) = model_and_task();
        let hyper = Hyper {
            lambda: 3.0,
            ..Method::Ewc.default_hyper()
        };
        let c = ctx(0, &task, hyper);
        let mut ewc = Ewc::default();
        ewc.begin_task(&mut model, &c).unwrap();
        ewc.end_task(&mut model, &c).unwrap();
        for (_, e) in model.params.iter_mut() {
            for (i, v) in e.value.iter_mut().enumerate() {
                *v += 0.01 * ((i % 7) as f64 - 3.0);
            }
        }
        let mut tape = Tape::new();
        let p = ewc.penalty(&model, &mut tape).unwrap().unwrap();
        let mut expected = 0.0;
        for (n, (f, a)) in ewc
            .names
            .iter()
            .zip(ewc.tasks[0].fisher.iter().zip(&ewc.tasks[0].anchor))
        {
            expected += penalty_value(f, a, &model.params.by_name(n).unwrap().value, 3.0);
        }
        let got = tape.value(p).item().unwrap();
        assert!((got - expected).abs() <= 1e-12 * expected.abs().max(1.0));

        let mut back = Ewc::default();
        back.load_state(&ewc.save_state().unwrap()).unwrap();
        assert_eq!(back.tasks, ewc.tasks);
        assert_eq!(back.lambda, 3.0);
    }

    #[test]
    fn penalty_vanishes_at_anchor() {
        let (mut model, task) = model_and_task();
        let c = ctx(
            0,
            &task,
            Hyper {
                lambda: 1.0,
                ..Method::Ewc.default_hyper()
            },
        );
        let mut ewc = Ewc::default();
        ewc.begin_task(&mut model, &c).unwrap();
        ewc.end_task(&mut model, &c).unwrap();
        let mut tape = Tape::new();
        let p = ewc.penalty(&model, &mut tape).unwrap().unwrap();
        assert_eq!(tape.value(p).item(), Some(0.0));
    }
}
