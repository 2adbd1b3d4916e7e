//! Rehearsal from a small episodic memory filled at the end of each task.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use super::{Method, MethodOptions, StageContext, Strategy, RNG_METHOD};
use crate::error::{Error, Result};
use crate::fno::FnoModel;
use crate::taskgen::{Sample, TaskDataset};
use crate::tensor::container::{Block, Container, Dtype, KIND_STATE};
use crate::tensor::GridField;

pub const KMEANS_MAX_ITER: usize = 100;

/// Algorithm R: a uniform sample of `capacity` indices from a stream of
/// `n` items, in reservoir order.
pub fn reservoir_sample(n: usize, capacity: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut res: Vec<usize> = (0..n.min(capacity)).collect();
    for i in capacity..n {
        let j = rng.gen_range(0..=i);
        if j < capacity {
            res[j] = i;
        }
    }
    res
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's algorithm from k-means++ seeding. Returns centroids and the
/// assignment of every point.
pub fn kmeans(
    points: &[Vec<f64>],
    k: usize,
    rng: &mut ChaCha8Rng,
    max_iter: usize,
) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!(
            "cannot form {k} clusters from {n} points"
        )));
    }
    let mut centroids = vec![points[rng.gen_range(0..n)].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.gen::<f64>() * total;
            let mut pick = n - 1;
            for (i, d) in d2.iter().enumerate() {
                if u < *d {
                    pick = i;
                    break;
                }
                u -= d;
            }
            pick
        } else {
            rng.gen_range(0..n)
        };
        centroids.push(points[next].clone());
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &centroids[centroids.len() - 1]));
        }
    }
    let nearest = |p: &[f64], cs: &[Vec<f64>]| {
        cs.iter()
            .enumerate()
            .map(|(i, c)| (i, sq_dist(p, c)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(i, _)| i)
            .unwrap()
    };
    let mut assign: Vec<usize> = points.iter().map(|p| nearest(p, &centroids)).collect();
    for _ in 0..max_iter {
        let dim = points[0].len();
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assign) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            // an emptied cluster keeps its previous centroid
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centroids)).collect();
        if next == assign {
            break;
        }
        assign = next;
    }
    Ok((centroids, assign))
}

/// For each centroid, the index of the closest point; duplicates removed,
/// first occurrence kept.
pub fn kmeans_select(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    let (centroids, _) = kmeans(points, k, rng, KMEANS_MAX_ITER)?;
    let mut out = Vec::with_capacity(k);
    for c in &centroids {
        let best = points
            .iter()
            .enumerate()
            .map(|(i, p)| (i, sq_dist(p, c)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(i, _)| i)
            .unwrap();
        if !out.contains(&best) {
            out.push(best);
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Policy {
    Reservoir,
    Kmeans,
}

/// Stored samples with the task each came from.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Memory {
    pub samples: Vec<Sample>,
    pub tasks: Vec<usize>,
}

impl Memory {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Add `quota` training samples of `task` chosen by `policy`.
    pub fn absorb(
        &mut self,
        policy: Policy,
        task: &TaskDataset,
        stage: usize,
        quota: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        let quota = quota.min(task.train.len());
        if quota == 0 {
            return Ok(());
        }
        let picked = match policy {
            Policy::Reservoir => reservoir_sample(task.train.len(), quota, rng),
            Policy::Kmeans => {
                let points: Vec<Vec<f64>> =
                    task.train.iter().map(|s| s.input.data().to_vec()).collect();
                kmeans_select(&points, quota, rng)?
            }
        };
        for i in picked {
            self.samples.push(task.train[i].clone());
            self.tasks.push(stage);
        }
        Ok(())
    }

    pub fn write(&self, c: &mut Container) {
        for (i, s) in self.samples.iter().enumerate() {
            for (part, f) in [("input", &s.input), ("target", &s.target)] {
                c.push(Block::new(
                    format!("memory.{i}.{part}"),
                    vec![f.channels(), f.height(), f.width()],
                    Dtype::F32,
                    f.data().to_vec(),
                ));
            }
        }
    }

    pub fn read(c: &Container, tasks: Vec<usize>) -> Result<Self> {
        let field = |name: String| -> Result<GridField> {
            let b = c.block(&name)?;
            match b.shape[..] {
                [ch, h, w] => GridField::new(ch, h, w, b.data.clone()),
                _ => Err(Error::Format(format!("memory block `{name}` is not 3-d"))),
            }
        };
        let samples = (0..tasks.len())
            .map(|i| {
                Ok(Sample {
                    input: field(format!("memory.{i}.input"))?,
                    target: field(format!("memory.{i}.target"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { samples, tasks })
    }
}

pub(crate) fn quota(options: &MethodOptions, stage: usize) -> usize {
    if stage == 0 {
        options.replay_first
    } else {
        options.replay_later
    }
}

pub struct Replay {
    policy: Policy,
    options: MethodOptions,
    memory: Memory,
}

impl Replay {
    pub fn new(policy: Policy, options: &MethodOptions) -> Self {
        Self {
            policy,
            options: options.clone(),
            memory: Memory::default(),
        }
    }

    pub fn memory(&self) -> &Memory {
        &self.memory
    }
}

impl Strategy for Replay {
    fn method(&self) -> Method {
        match self.policy {
            Policy::Reservoir => Method::Reservoir,
            Policy::Kmeans => Method::Kmeans,
        }
    }

    fn training_samples(&self, task: &TaskDataset) -> Vec<Sample> {
        let mut s = task.train.clone();
        s.extend(self.memory.samples.iter().cloned());
        s
    }

    fn end_task(&mut self, _model: &mut FnoModel, ctx: &StageContext) -> Result<()> {
        let mut rng = ctx.rng(RNG_METHOD);
        self.memory.absorb(
            self.policy,
            ctx.task,
            ctx.stage,
            quota(&self.options, ctx.stage),
            &mut rng,
        )
    }

    fn save_state(&self) -> Result<Container> {
        let mut c = Container::new(
            KIND_STATE,
            json!({ "method": self.method().name(), "memory_tasks": self.memory.tasks }),
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

#[cfg(test)]
mod tests {
    use super::super::testutil::*;
    use super::super::{stage_rng, Hyper};
    use super::*;
    use crate::cl::Strategy;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn reservoir_is_uniform() {
        let (n, cap, trials) = (10, 3, 30_000);
        let mut hits = vec![0usize; n];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..trials {
            for i in reservoir_sample(n, cap, &mut rng) {
                hits[i] += 1;
            }
        }
        let expect = trials as f64 * cap as f64 / n as f64;
        let sd = (trials as f64 * 0.3 * 0.7).sqrt();
        for h in hits {
            assert!((h as f64 - expect).abs() < 5.0 * sd, "{h} vs {expect}");
        }
    }

    proptest! {
        #[test]
        fn reservoir_returns_distinct_in_range(n in 0usize..40, cap in 0usize..10, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r = reservoir_sample(n, cap, &mut rng);
            prop_assert_eq!(r.len(), n.min(cap));
            let mut s = r.clone();
            s.sort();
            s.dedup();
            prop_assert_eq!(s.len(), r.len());
            prop_assert!(r.iter().all(|&i| i < n));
        }
    }

    fn sse(points: &[Vec<f64>], assign: &[usize], k: usize) -> f64 {
        let dim = points[0].len();
        let mut total = 0.0;
        for c in 0..k {
            let members: Vec<&Vec<f64>> = points
                .iter()
                .zip(assign)
                .filter(|(_, &a)| a == c)
                .map(|(p, _)| p)
                .collect();
            if members.is_empty() {
                continue;
            }
            let mean: Vec<f64> = (0..dim)
                .map(|j| members.iter().map(|p| p[j]).sum::<f64>() / members.len() as f64)
                .collect();
            total += members.iter().map(|p| sq_dist(p, &mean)).sum::<f64>();
        }
        total
    }

    #[test]
    fn lloyd_reaches_exhaustive_optimum_on_separated_clusters() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let centers = [[0.0, 0.0], [5.0, 5.0], [-5.0, 6.0]];
        let points: Vec<Vec<f64>> = (0..9)
            .map(|i| {
                let c = centers[i % 3];
                vec![
                    c[0] + rng.gen_range(-0.5..0.5),
                    c[1] + rng.gen_range(-0.5..0.5),
                ]
            })
            .collect();
        // brute force over every assignment of 9 points to 3 labels
        let mut best = f64::INFINITY;
        for code in 0..3usize.pow(9) {
            let mut a = vec![0; 9];
            let mut c = code;
            for slot in a.iter_mut() {
                *slot = c % 3;
                c /= 3;
            }
            best = best.min(sse(&points, &a, 3));
        }
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (_, assign) = kmeans(&points, 3, &mut rng, KMEANS_MAX_ITER).unwrap();
            assert!((sse(&points, &assign, 3) - best).abs() < 1e-12);
        }
    }

    #[test]
    fn selection_picks_one_point_per_cluster() {
        let points = vec![vec![0.0], vec![0.1], vec![10.0], vec![10.2], vec![20.0]];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut sel = kmeans_select(&points, 3, &mut rng).unwrap();
        sel.sort();
        assert_eq!(sel.len(), 3);
        assert!(sel[0] <= 1 && (2..=3).contains(&sel[1]) && sel[2] == 4);
        assert!(kmeans_select(&points, 6, &mut rng).is_err());
        let same = vec![vec![1.0]; 4];
        assert_eq!(kmeans_select(&same, 3, &mut rng).unwrap().len(), 1);
    }

    #[test]
    fn memory_follows_quotas_and_round_trips() {
        let opts = MethodOptions {
            replay_first: 3,
            replay_later: 1,
            ..MethodOptions::default()
        };
        for policy in [Policy::Reservoir, Policy::Kmeans] {
            let mut r = Replay::new(policy, &opts);
            let a = tiny_task("A", 1, [0.5, 0.9]);
            let b = tiny_task("B", 2, [1.8, 2.1]);
            let mut model = FnoModel::new(tiny_config(), 1).unwrap();
            r.end_task(
                &mut model,
                &ctx(
                    0,
                    &a,
                    Hyper {
                        ..Method::Naive.default_hyper()
                    },
                ),
            )
            .unwrap();
            assert_eq!(r.training_samples(&b).len(), b.train.len() + 3);
            r.end_task(&mut model, &ctx(1, &b, Method::Naive.default_hyper()))
                .unwrap();
            assert_eq!(r.memory().tasks, vec![0, 0, 0, 1]);
            for s in &r.memory().samples[..3] {
                assert!(a.train.contains(s));
            }
            let mut back = Replay::new(policy, &opts);
            let bytes = r.save_state().unwrap().to_bytes().unwrap();
            back.load_state(&Container::from_bytes(&bytes, KIND_STATE).unwrap())
                .unwrap();
            assert_eq!(back.memory(), r.memory());
        }
    }

    #[test]
    fn selection_is_deterministic_per_stage() {
        let a = tiny_task("A", 1, [0.5, 0.9]);
        let pick = |stage| {
            let mut m = Memory::default();
            m.absorb(
                Policy::Reservoir,
                &a,
                stage,
                2,
                &mut stage_rng(9, stage, RNG_METHOD),
            )
            .unwrap();
            m.samples
        };
        assert_eq!(pick(0), pick(0));
    }
}
