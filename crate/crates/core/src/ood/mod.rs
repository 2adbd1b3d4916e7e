//! Task identification from raw inputs: one reconstruction-error detector per
//! known task over a shared random-feature map, argmin routing and a novelty
//! threshold.

pub mod kpca;
pub mod rff;

use std::sync::Arc;

use serde_json::json;

use crate::error::{Error, Result};
use crate::tensor::container::{Block, Container, Dtype, KIND_DETECTOR};

pub use kpca::{calibrate_threshold, KpcaModel, Spectrum};

/// Detector modes per task used by default. Every detector keeps the same
/// count so raw residuals stay comparable; at full rank the narrow tasks
/// reconstruct their own training inputs exactly and their thresholds
/// collapse to zero.
pub const DEFAULT_MODES: usize = 4;
pub use rff::{median_bandwidth, RffMap};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Route {
    Task(usize),
    /// No detector accepts the input; `nearest` is the best-scoring task.
    Novel {
        nearest: usize,
    },
}

impl Route {
    pub fn task(self) -> usize {
        match self {
            Route::Task(t) | Route::Novel { nearest: t } => t,
        }
    }
}

/// Index of the smallest score together with the novelty decision.
pub fn route_scores(scores: &[f64], tau: f64) -> Result<Route> {
    let (best, min) = scores
        .iter()
        .copied()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .ok_or(Error::EmptyRouter)?;
    Ok(if min > tau {
        Route::Novel { nearest: best }
    } else {
        Route::Task(best)
    })
}

#[derive(Clone, Debug)]
pub struct Router {
    map: Arc<RffMap>,
    detectors: Vec<KpcaModel>,
    margin: f64,
}

impl Router {
    pub fn new(map: Arc<RffMap>, margin: f64) -> Self {
        Self {
            map,
            detectors: Vec::new(),
            margin,
        }
    }

    pub fn map(&self) -> &RffMap {
        &self.map
    }

    pub fn detectors(&self) -> &[KpcaModel] {
        &self.detectors
    }

    /// Global novelty threshold: the largest per-task threshold.
    pub fn tau(&self) -> f64 {
        self.detectors.iter().map(|d| d.tau).fold(0.0, f64::max)
    }

    pub fn features(&self, inputs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        inputs.iter().map(|x| self.map.map(x)).collect()
    }

    /// Fit and register a detector for `task` on its training inputs. A
    /// fixed mode count is capped at one less than the number of inputs.
    pub fn add_task(
        &mut self,
        task: usize,
        inputs: &[Vec<f64>],
        modes: Option<usize>,
    ) -> Result<&KpcaModel> {
        if self.detectors.iter().any(|d| d.task == task) {
            return Err(Error::InvalidArgument(format!(
                "task {task} already has a detector"
            )));
        }
        let feats = self.features(inputs)?;
        let modes = modes.map(|k| k.min(feats.len().saturating_sub(1)));
        let model = KpcaModel::fit(task, &feats, modes, self.margin)?;
        self.detectors.push(model);
        Ok(self.detectors.last().unwrap())
    }

    pub fn push_detector(&mut self, model: KpcaModel) {
        self.detectors.push(model);
    }

    pub fn scores(&self, x: &[f64]) -> Result<Vec<f64>> {
        if self.detectors.is_empty() {
            return Err(Error::EmptyRouter);
        }
        let z = self.map.map(x)?;
        Ok(self.detectors.iter().map(|d| d.score(&z)).collect())
    }

    pub fn route(&self, x: &[f64]) -> Result<Route> {
        let scores = self.scores(x)?;
        Ok(match route_scores(&scores, self.tau())? {
            Route::Task(i) => Route::Task(self.detectors[i].task),
            Route::Novel { nearest } => Route::Novel {
                nearest: self.detectors[nearest].task,
            },
        })
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(
            KIND_DETECTOR,
            json!({
                "input_dim": self.map.input_dim(),
                "features": self.map.features(),
                "seed": self.map.seed(),
                "sigma": self.map.sigma(),
                "margin": self.margin,
                "detectors": self.detectors.iter().map(|d| json!({
                    "task": d.task,
                    "modes": d.modes(),
                    "tau": d.tau,
                })).collect::<Vec<_>>(),
            }),
        );
        for (i, d) in self.detectors.iter().enumerate() {
            let dim = d.mean.len();
            c.push(Block::new(
                format!("{i}.mean"),
                vec![dim],
                Dtype::F64,
                d.mean.clone(),
            ));
            c.push(Block::new(
                format!("{i}.directions"),
                vec![d.modes(), dim],
                Dtype::F64,
                d.directions.iter().flatten().copied().collect(),
            ));
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let meta = &c.metadata;
        let num = |k: &str| {
            meta[k]
                .as_f64()
                .ok_or_else(|| Error::Format(format!("detector header lacks `{k}`")))
        };
        let map = RffMap::new(
            num("input_dim")? as usize,
            num("features")? as usize,
            meta["seed"]
                .as_u64()
                .ok_or_else(|| Error::Format("detector header lacks `seed`".into()))?,
            num("sigma")?,
        )?;
        let mut router = Router::new(Arc::new(map), num("margin")?);
        let list = meta["detectors"]
            .as_array()
            .ok_or_else(|| Error::Format("detector header lacks `detectors`".into()))?;
        for (i, d) in list.iter().enumerate() {
            let mean = c.block(&format!("{i}.mean"))?.data.clone();
            let dirs = c.block(&format!("{i}.directions"))?;
            let dim = mean.len();
            let directions = if dim == 0 {
                Vec::new()
            } else {
                dirs.data.chunks(dim).map(|r| r.to_vec()).collect()
            };
            router.detectors.push(KpcaModel {
                task: d["task"].as_u64().unwrap_or(i as u64) as usize,
                mean,
                directions,
                tau: d["tau"]
                    .as_f64()
                    .ok_or_else(|| Error::Format("detector lacks tau".into()))?,
            });
        }
        Ok(router)
    }

    /// Shares the feature map with a freshly loaded router when parameters
    /// match, avoiding a regeneration of the projection matrix.
    pub fn map_arc(&self) -> Arc<RffMap> {
        self.map.clone()
    }
}

/// Identification accuracy per task when every detector keeps `k` modes
/// (capped by its sample count), for each `k` in `ks`. Routing is by argmin
/// alone; thresholds play no part. Rows follow `ks`, columns the tasks.
pub fn mode_study(
    map: &RffMap,
    train: &[Vec<Vec<f64>>],
    test: &[Vec<Vec<f64>>],
    ks: &[usize],
) -> Result<Vec<Vec<f64>>> {
    if train.is_empty() || train.len() != test.len() {
        return Err(Error::InvalidArgument(
            "mode study needs matching, nonempty train and test sets".into(),
        ));
    }
    let feats = |xs: &[Vec<f64>]| xs.iter().map(|x| map.map(x)).collect::<Result<Vec<_>>>();
    let mut fitted = Vec::new();
    for xs in train {
        let f = feats(xs)?;
        let spec = Spectrum::fit(&f)?;
        fitted.push((f, spec));
    }
    let test_feats: Vec<Vec<Vec<f64>>> = test.iter().map(|xs| feats(xs)).collect::<Result<_>>()?;
    let mut table = Vec::with_capacity(ks.len());
    for &k in ks {
        let models: Vec<KpcaModel> = fitted
            .iter()
            .enumerate()
            .map(|(t, (f, spec))| {
                let cap = (spec.samples - 1).min(spec.mean.len());
                KpcaModel::from_spectrum(t, spec, f, Some(k.min(cap)), kpca::DEFAULT_MARGIN)
            })
            .collect::<Result<_>>()?;
        let mut row = Vec::with_capacity(test.len());
        for (t, zs) in test_feats.iter().enumerate() {
            if zs.is_empty() {
                return Err(Error::EmptyDataset);
            }
            let mut hits = 0;
            for z in zs {
                let scores: Vec<f64> = models.iter().map(|m| m.score(z)).collect();
                if route_scores(&scores, f64::INFINITY)?.task() == t {
                    hits += 1;
                }
            }
            row.push(hits as f64 / zs.len() as f64);
        }
        table.push(row);
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn routing_rules() {
        assert_eq!(route_scores(&[0.1, 0.5, 0.3], 1.0).unwrap(), Route::Task(0));
        assert_eq!(
            route_scores(&[2.0, 3.0], 1.0).unwrap(),
            Route::Novel { nearest: 0 }
        );
        assert!(matches!(route_scores(&[], 1.0), Err(Error::EmptyRouter)));
    }

    #[test]
    fn mode_study_separates_clusters() {
        let map = RffMap::new(3, 256, 1, 0.5).unwrap();
        let a: Vec<Vec<f64>> = (0..6).map(|i| vec![1.0, 0.05 * i as f64, 0.0]).collect();
        let b: Vec<Vec<f64>> = (0..3).map(|i| vec![0.0, 0.05 * i as f64, 1.0]).collect();
        let test = vec![vec![vec![1.0, 0.12, 0.0]], vec![vec![0.0, 0.07, 1.0]]];
        let table = mode_study(&map, &[a, b], &test, &[1, 10]).unwrap();
        assert_eq!(table, vec![vec![1.0, 1.0], vec![1.0, 1.0]]);
        assert!(mode_study(&map, &[], &[], &[1]).is_err());
    }

    #[test]
    fn fixed_modes_capped_by_samples() {
        let map = Arc::new(RffMap::new(2, 64, 3, 1.0).unwrap());
        let mut r = Router::new(map, 1.5);
        let xs: Vec<Vec<f64>> = (0..3).map(|i| vec![1.0, 0.1 * i as f64]).collect();
        assert_eq!(r.add_task(0, &xs, Some(DEFAULT_MODES)).unwrap().modes(), 2);
        assert!(r.add_task(0, &xs, Some(1)).is_err());
    }

    #[test]
    fn two_clusters_route_and_round_trip() {
        let map = Arc::new(RffMap::new(3, 256, 1, 0.5).unwrap());
        let mut r = Router::new(map, 1.5);
        assert!(matches!(r.route(&[1.0, 0.0, 0.0]), Err(Error::EmptyRouter)));
        let a: Vec<Vec<f64>> = (0..6).map(|i| vec![1.0, 0.05 * i as f64, 0.0]).collect();
        let b: Vec<Vec<f64>> = (0..6).map(|i| vec![0.0, 0.05 * i as f64, 1.0]).collect();
        r.add_task(0, &a, Some(1)).unwrap();
        r.add_task(1, &b, Some(1)).unwrap();
        assert_eq!(r.route(&[1.0, 0.12, 0.0]).unwrap(), Route::Task(0));
        assert_eq!(r.route(&[0.0, 0.12, 1.0]).unwrap(), Route::Task(1));
        assert_eq!(
            r.route(&[0.0, 0.36, 3.0]).unwrap(),
            r.route(&[0.0, 0.12, 1.0]).unwrap()
        );
        let back = Router::from_container(
            &Container::from_bytes(&r.to_container().to_bytes().unwrap(), KIND_DETECTOR).unwrap(),
        )
        .unwrap();
        assert_eq!(back.detectors(), r.detectors());
        assert_eq!(
            back.scores(&[0.3, 0.2, 0.1]).unwrap(),
            r.scores(&[0.3, 0.2, 0.1]).unwrap()
        );
    }
}
