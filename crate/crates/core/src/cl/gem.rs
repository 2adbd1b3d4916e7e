//! Averaged gradient episodic memory: the update may not increase the loss
//! on stored samples to first order.

use serde_json::json;

use super::replay::{quota, Memory, Policy};
use super::{
    accumulate_loss_gradient, flat_grads, set_flat_grads, Method, MethodOptions, StageContext,
    Strategy, RNG_METHOD,
};
use crate::error::Result;
use crate::fno::FnoModel;
use crate::tensor::container::{Container, KIND_STATE};

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Project `g` so that `⟨g̃, g_ref⟩ ≥ ε·‖g‖·‖g_ref‖`; `ε = 0` is the hard
/// rule `g̃ = g − (⟨g, g_ref⟩/‖g_ref‖²)·g_ref` applied when the inner
/// product is negative. Returns whether a projection happened.
pub fn agem_project(g: &mut [f64], g_ref: &[f64], eps: f64) -> bool {
    let rr = dot(g_ref, g_ref);
    if rr == 0.0 {
        log::warn!("reference gradient vanished; update left unconstrained");
        return false;
    }
    let target = eps * dot(g, g).sqrt() * rr.sqrt();
    let gr = dot(g, g_ref);
    if gr >= target {
        return false;
    }
    let c = (target - gr) / rr;
    for (gi, ri) in g.iter_mut().zip(g_ref) {
        *gi += c * ri;
    }
    true
}

pub struct Gem {
    options: MethodOptions,
    memory: Memory,
    projections: u64,
}

impl Gem {
    pub fn new(options: &MethodOptions) -> Self {
        Self {
            options: options.clone(),
            memory: Memory::default(),
            projections: 0,
        }
    }

    pub fn memory(&self) -> &Memory {
        &self.memory
    }

    /// Steps whose gradient was projected since construction or loading.
    pub fn projections(&self) -> u64 {
        self.projections
    }
}

impl Strategy for Gem {
    fn method(&self) -> Method {
        Method::Gem
    }

    fn adjust_gradients(&mut self, model: &mut FnoModel, ctx: &StageContext) -> Result<()> {
        if self.memory.is_empty() {
            return Ok(());
        }
        let mut g = flat_grads(model);
        let refs: Vec<&_> = self.memory.samples.iter().collect();
        accumulate_loss_gradient(self, model, &refs, ctx.stage, ctx.metrics.sobolev_lambda)?;
        let g_ref = flat_grads(model);
        if agem_project(&mut g, &g_ref, self.options.gem_eps) {
            self.projections += 1;
        }
        set_flat_grads(model, &g);
        Ok(())
    }

    fn end_task(&mut self, _model: &mut FnoModel, ctx: &StageContext) -> Result<()> {
        let mut rng = ctx.rng(RNG_METHOD);
        self.memory.absorb(
            Policy::Kmeans,
            ctx.task,
            ctx.stage,
            quota(&self.options, ctx.stage),
            &mut rng,
        )
    }

    fn save_state(&self) -> Result<Container> {
        let mut c = Container::new(
            KIND_STATE,
            json!({ "method": "gem", "memory_tasks": self.memory.tasks }),
        );
        self.memory.write(&mut c);
        Ok(c)
    }

    fn load_state(&mut self, state: &Container) -> Result<()> {
        let tasks: Vec<usize> = serde_json::from_value(state.metadata["memory_tasks"].clone())?;
        self.memory = Memory::read(state, tasks)?;
        Ok(())
    }
}
