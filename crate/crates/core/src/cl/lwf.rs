//! Learning without forgetting: distillation toward the model as it stood
//! before the current stage.

use serde_json::json;

use super::{Method, StageContext, Strategy};
use crate::error::Result;
use crate::fno::FnoModel;
use crate::tensor::container::{Container, KIND_STATE};
use crate::tensor::{Tape, Tensor, Var};

/// `λ·mean((student − teacher)²)` over one sample's grid.
pub fn distill_value(student: &[f64], teacher: &[f64], lambda: f64) -> f64 {
    let n = student.len() as f64;
    lambda
        * student
            .iter()
            .zip(teacher)
            .map(|(s, t)| (s - t) * (s - t))
            .sum::<f64>()
        / n
}

#[derive(Default)]
pub struct Lwf {
    lambda: f64,
    /// Teacher predictions on the current training split.
    teacher: Vec<Tensor>,
}

impl Strategy for Lwf {
    fn method(&self) -> Method {
        Method::Lwf
    }

    fn begin_task(&mut self, model: &mut FnoModel, ctx: &StageContext) -> Result<()> {
        self.lambda = ctx.hyper.lambda;
        self.teacher.clear();
        if ctx.stage == 0 {
            return Ok(());
        }
        for s in &ctx.task.train {
            self.teacher.push(model.predict(&s.input)?.to_tensor());
        }
        Ok(())
    }

    fn sample_extra(&self, tape: &mut Tape, pred: Var, index: usize) -> Result<Option<Var>> {
        let Some(t) = self.teacher.get(index) else {
            return Ok(None);
        };
        if self.lambda == 0.0 {
            return Ok(None);
        }
        let t = tape.constant(t.clone());
        let d = tape.sub(pred, t)?;
        let sq = tape.sum_squares(d);
        let n = tape.value(pred).len() as f64;
        Ok(Some(tape.scale(sq, self.lambda / n)))
    }

    fn end_task(&mut self, _model: &mut FnoModel, _ctx: &StageContext) -> Result<()> {
        self.teacher.clear();
        Ok(())
    }

    fn save_state(&self) -> Result<Container> {
        Ok(Container::new(
            KIND_STATE,
            json!({ "method": "lwf", "lambda": self.lambda }),
        ))
    }

    fn load_state(&mut self, state: &Container) -> Result<()> {
        self.lambda = state.metadata["lambda"].as_f64().unwrap_or(0.0);
        self.teacher.clear();
        Ok(())
    }
}
