//! Per-task low-rank additive updates to the frozen pointwise weights.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde_json::json;

use super::{Method, MethodOptions, StageContext, Strategy, RNG_INIT};
use crate::error::{Error, Result};
use crate::fno::{FnoModel, WeightMap};
use crate::tensor::container::{Container, KIND_STATE};
use crate::tensor::{ParamStore, Tape, Var};

pub const B_STD: f64 = 0.01;

pub fn adapter_names(task: usize, name: &str) -> (String, String) {
    (
        format!("lora.{task}.{name}.a"),
        format!("lora.{task}.{name}.b"),
    )
}

/// Pointwise weight matrices; spectral weights are not adapted.
pub fn is_adapted(name: &str) -> bool {
    name.ends_with(".weight")
}

/// Insert factors `a: [co, rank]` (zeros) and `b: [rank, ci]` (Gaussian)
/// for the `[co, ci]` weight `name`.
pub fn init_adapter(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    task: usize,
    name: &str,
    co: usize,
    ci: usize,
    rank: usize,
) -> Result<()> {
    if rank == 0 || rank > co.min(ci) {
        return Err(Error::InvalidArgument(format!(
            "rank {rank} invalid for a {co}x{ci} weight"
        )));
    }
    let (an, bn) = adapter_names(task, name);
    let normal = Normal::new(0.0, B_STD).expect("positive deviation");
    store.insert(an, vec![co, rank], vec![0.0; co * rank], true)?;
    store.insert(
        bn,
        vec![rank, ci],
        (0..rank * ci).map(|_| normal.sample(rng)).collect(),
        true,
    )?;
    Ok(())
}

/// `W + (α/r)·A·B` for adapted weights of task `task`.
pub struct LowRankMap {
    pub task: usize,
    pub alpha: f64,
}

impl WeightMap for LowRankMap {
    fn weight(&self, tape: &mut Tape, store: &ParamStore, name: &str) -> Result<Var> {
        let w = tape.param_named(store, name)?;
        let (an, bn) = adapter_names(self.task, name);
        if !store.contains(&an) {
            return Ok(w);
        }
        let rank = store.by_name(&an)?.shape[1];
        let a = tape.param_named(store, &an)?;
        let b = tape.param_named(store, &bn)?;
        let ab = tape.matmul(a, b)?;
        let ab = tape.scale(ab, self.alpha / rank as f64);
        tape.add(w, ab)
    }
}

pub struct Lora {
    options: MethodOptions,
}

impl Lora {
    pub fn new(options: &MethodOptions) -> Self {
        Self {
            options: options.clone(),
        }
    }
}

impl Strategy for Lora {
    fn method(&self) -> Method {
        Method::Lora
    }

    fn begin_task(&mut self, model: &mut FnoModel, ctx: &StageContext) -> Result<()> {
        if ctx.stage == 0 {
            return Ok(());
        }
        model.params.set_trainable(|_| true, false);
        let mut rng = ctx.rng(RNG_INIT);
        for name in model.backbone_names().into_iter().filter(|n| is_adapted(n)) {
            if model.params.contains(&adapter_names(ctx.stage, &name).0) {
                continue;
            }
            let (co, ci) = match model.params.by_name(&name)?.shape[..] {
                [co, ci] => (co, ci),
                _ => return Err(Error::Shape(format!("`{name}` is not a matrix"))),
            };
            let rank = self.options.lora_rank.min(co).min(ci);
            init_adapter(&mut model.params, &mut rng, ctx.stage, &name, co, ci, rank)?;
        }
        let prefix = format!("lora.{}.", ctx.stage);
        model.params.set_trainable(|n| n.starts_with(&prefix), true);
        Ok(())
    }

    fn forward(&self, model: &FnoModel, tape: &mut Tape, x: Var, task: usize) -> Result<Var> {
        if task == 0 {
            return model.forward(tape, x);
        }
        let map = LowRankMap {
            task,
            alpha: self.options.lora_alpha,
        };
        model.forward_with(tape, &map, x)
    }

    fn added_params(&self, model: &FnoModel, task: usize) -> usize {
        let prefix = format!("lora.{task}.");
        model.params.count_values(|n| n.starts_with(&prefix))
    }

    fn save_state(&self) -> Result<Container> {
        Ok(Container::new(KIND_STATE, json!({ "method": "lora" })))
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
    use rand::SeedableRng;

    #[test]
    fn rank_checks() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(init_adapter(&mut store, &mut rng, 1, "w", 3, 5, 4).is_err());
        assert!(init_adapter(&mut store, &mut rng, 1, "w", 3, 5, 0).is_err());
        init_adapter(&mut store, &mut rng, 1, "w", 3, 5, 3).unwrap();
        assert_eq!(store.by_name("lora.1.w.a").unwrap().shape, vec![3, 3]);
        assert_eq!(store.by_name("lora.1.w.b").unwrap().shape, vec![3, 5]);
        assert!(store
            .by_name("lora.1.w.a")
            .unwrap()
            .value
            .iter()
            .all(|v| *v == 0.0));
        let b = &store.by_name("lora.1.w.b").unwrap().value;
        assert!(b.iter().all(|v| v.abs() < 0.06) && b.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn adapted_weight_matches_dense_product() {
        let mut store = ParamStore::new();
        store
            .insert("w", vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], false)
            .unwrap();
        store
            .insert("lora.1.w.a", vec![2, 1], vec![1.0, -1.0], true)
            .unwrap();
        store
            .insert("lora.1.w.b", vec![1, 3], vec![0.5, 0.0, 2.0], true)
            .unwrap();
        let mut tape = Tape::new();
        let v = LowRankMap {
            task: 1,
            alpha: 2.0,
        }
        .weight(&mut tape, &store, "w")
        .unwrap();
        assert_eq!(tape.value(v).data(), &[2.0, 2.0, 7.0, 3.0, 5.0, 2.0]);
    }

    #[test]
    fn zero_init_preserves_backbone_and_training_leaves_it_frozen() {
        let b = tiny_task("B", 2, [1.8, 2.1]);
        let mut model = FnoModel::new(tiny_config(), 6).unwrap();
        model.params.quantize_f32();
        let mut lora = Lora::new(&MethodOptions::default());
        let hyper = Method::Lora.default_hyper();
        lora.begin_task(&mut model, &ctx(1, &b, hyper)).unwrap();
        let x = &b.train[0].input;
        assert_eq!(
            lora.predict(&model, x, 1).unwrap().0,
            model.predict(x).unwrap()
        );
        // proj.1 maps 8 -> 1 channel, so its rank is clamped to 1
        assert_eq!(
            model
                .params
                .by_name("lora.1.proj.1.weight.a")
                .unwrap()
                .shape,
            vec![1, 1]
        );
        let before = model.params.clone();
        train_stage(&mut model, &mut lora, &ctx(1, &b, hyper), 3, 1e-5).unwrap();
        for name in model.backbone_names() {
            assert_eq!(
                model.params.by_name(&name).unwrap(),
                before.by_name(&name).unwrap()
            );
        }
        assert!(lora.added_params(&model, 1) > 0);
        assert_eq!(lora.added_params(&model, 2), 0);
    }
}
