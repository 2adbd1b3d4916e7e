//! Orthogonal gradient descent with a compressed per-group gradient basis.

use serde_json::json;

use super::{accumulate_loss_gradient, Method, MethodOptions, StageContext, Strategy};
use crate::error::{Error, Result};
use crate::fno::FnoModel;
use crate::tensor::container::{Block, Container, Dtype, KIND_STATE};
use crate::tensor::linalg::row_svd;

pub const DEFAULT_CAP: usize = 32;
pub const DEFAULT_ENERGY: f64 = 0.95;
/// Residuals below this fraction of the gradient norm are treated as lying
/// in the span of the basis.
pub const GS_TOLERANCE: f64 = 1e-8;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `g − α·Σ⟨g, b⟩ b` in place, for an orthonormal basis.
pub fn ogd_project(g: &mut [f64], basis: &[Vec<f64>], alpha: f64) {
    let coefs: Vec<f64> = basis.iter().map(|b| dot(g, b)).collect();
    for (c, b) in coefs.iter().zip(basis) {
        for (gi, bi) in g.iter_mut().zip(b) {
            *gi -= alpha * c * bi;
        }
    }
}

/// Orthonormal directions with their singular values, strongest first.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Basis {
    pub directions: Vec<Vec<f64>>,
    pub sigma: Vec<f64>,
}

impl Basis {
    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }
}

/// Gradients whose residual against `basis` (and against earlier accepted
/// gradients) exceeds the tolerance.
pub fn novel_gradients(basis: &[Vec<f64>], grads: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut span: Vec<Vec<f64>> = basis.to_vec();
    let mut kept = Vec::new();
    for g in grads {
        let norm = dot(g, g).sqrt();
        if norm == 0.0 {
            continue;
        }
        let mut r = g.clone();
        for _ in 0..2 {
            for b in &span {
                let c = dot(&r, b);
                for (ri, bi) in r.iter_mut().zip(b) {
                    *ri -= c * bi;
                }
            }
        }
        let rn = dot(&r, &r).sqrt();
        if rn < GS_TOLERANCE * norm {
            continue;
        }
        r.iter_mut().for_each(|x| *x /= rn);
        span.push(r);
        kept.push(g.clone());
    }
    kept
}

/// Merge new gradients into `basis`: rows `σ_i b_i` and the novel raw
/// gradients are stacked, decomposed, and the shortest prefix of singular
/// directions holding `energy` of the squared spectrum is kept, at most
/// `cap` of them.
pub fn basis_update_and_compress(
    basis: &Basis,
    grads: &[Vec<f64>],
    energy: f64,
    cap: usize,
) -> Result<Basis> {
    if !(energy > 0.0 && energy <= 1.0) || cap == 0 {
        return Err(Error::InvalidArgument(format!(
            "energy {energy} and cap {cap} out of range"
        )));
    }
    if let Some(d) = basis.directions.first().map(Vec::len) {
        if grads.iter().any(|g| g.len() != d) {
            return Err(Error::Shape("gradient length differs from basis".into()));
        }
    }
    let mut rows: Vec<Vec<f64>> = basis
        .directions
        .iter()
        .zip(&basis.sigma)
        .map(|(b, s)| b.iter().map(|x| x * s).collect())
        .collect();
    rows.extend(novel_gradients(&basis.directions, grads));
    let (sigma, dirs) = row_svd(&rows);
    let total: f64 = sigma.iter().map(|s| s * s).sum();
    if total == 0.0 {
        return Ok(Basis::default());
    }
    let mut keep = sigma.len();
    let mut acc = 0.0;
    for (k, s) in sigma.iter().enumerate() {
        acc += s * s;
        if acc >= energy * total {
            keep = k + 1;
            break;
        }
    }
    let keep = keep.min(cap);
    let mut directions: Vec<Vec<f64>> = dirs.into_iter().take(keep).collect();
    for i in 0..directions.len() {
        let (head, tail) = directions.split_at_mut(i);
        for b in head.iter() {
            let c = dot(&tail[0], b);
            for (x, y) in tail[0].iter_mut().zip(b) {
                *x -= c * y;
            }
        }
        let n = dot(&tail[0], &tail[0]).sqrt();
        tail[0].iter_mut().for_each(|x| *x /= n);
    }
    Ok(Basis {
        directions,
        sigma: sigma[..keep].to_vec(),
    })
}

/// Parameter group of a backbone entry.
pub fn group_of(name: &str) -> String {
    if let Some(rest) = name.strip_prefix("layers.") {
        let l = rest.split('.').next().unwrap_or("");
        format!("layers.{l}")
    } else {
        name.split('.').next().unwrap_or(name).to_string()
    }
}

pub struct Ogd {
    options: MethodOptions,
    /// Group name and the backbone entries it spans, in store order.
    groups: Vec<(String, Vec<String>)>,
    bases: Vec<Basis>,
}

impl Ogd {
    pub fn new(options: &MethodOptions) -> Self {
        Self {
            options: options.clone(),
            groups: Vec::new(),
            bases: Vec::new(),
        }
    }

    pub fn bases(&self) -> &[Basis] {
        &self.bases
    }

    fn ensure_groups(&mut self, model: &FnoModel) {
        if !self.groups.is_empty() {
            return;
        }
        for n in model.backbone_names() {
            let g = group_of(&n);
            match self.groups.iter_mut().find(|(name, _)| *name == g) {
                Some((_, members)) => members.push(n),
                None => self.groups.push((g, vec![n])),
            }
        }
        self.bases = vec![Basis::default(); self.groups.len()];
    }

    fn group_grad(model: &FnoModel, members: &[String]) -> Result<Vec<f64>> {
        let mut g = Vec::new();
        for n in members {
            g.extend_from_slice(&model.params.by_name(n)?.grad);
        }
        Ok(g)
    }
}

impl Strategy for Ogd {
    fn method(&self) -> Method {
        Method::Ogd
    }

    fn begin_task(&mut self, model: &mut FnoModel, _ctx: &StageContext) -> Result<()> {
        self.ensure_groups(model);
        Ok(())
    }

    fn adjust_gradients(&mut self, model: &mut FnoModel, _ctx: &StageContext) -> Result<()> {
        for ((_, members), basis) in self.groups.iter().zip(&self.bases) {
            if basis.is_empty() {
                continue;
            }
            let mut g = Self::group_grad(model, members)?;
            ogd_project(&mut g, &basis.directions, self.options.ogd_alpha);
            let mut off = 0;
            for n in members {
                let id = model.params.require(n)?;
                let e = model.params.get_mut(id);
                let len = e.grad.len();
                e.grad.copy_from_slice(&g[off..off + len]);
                off += len;
            }
        }
        Ok(())
    }

    fn end_task(&mut self, model: &mut FnoModel, ctx: &StageContext) -> Result<()> {
        self.ensure_groups(model);
        let mut harvested: Vec<Vec<Vec<f64>>> = vec![Vec::new(); self.groups.len()];
        let refs: Vec<&_> = ctx.task.train.iter().collect();
        for batch in refs.chunks(ctx.hyper.batch_size.max(1)) {
            accumulate_loss_gradient(self, model, batch, ctx.stage, ctx.metrics.sobolev_lambda)?;
            for ((_, members), out) in self.groups.iter().zip(harvested.iter_mut()) {
                out.push(Self::group_grad(model, members)?);
            }
        }
        model.params.zero_grad();
        for (basis, grads) in self.bases.iter_mut().zip(&harvested) {
            *basis = basis_update_and_compress(
                basis,
                grads,
                self.options.ogd_energy,
                self.options.ogd_cap,
            )?;
        }
        Ok(())
    }

    fn save_state(&self) -> Result<Container> {
        let mut c = Container::new(
            KIND_STATE,
            json!({
                "method": "ogd",
                "groups": self.groups,
            }),
        );
        for ((name, _), basis) in self.groups.iter().zip(&self.bases) {
            let dim = basis.directions.first().map_or(0, Vec::len);
            c.push(Block::new(
                format!("basis.{name}.directions"),
                vec![basis.len(), dim],
                Dtype::F64,
                basis.directions.iter().flatten().copied().collect(),
            ));
            c.push(Block::new(
                format!("basis.{name}.sigma"),
                vec![basis.len()],
                Dtype::F64,
                basis.sigma.clone(),
            ));
        }
        Ok(c)
    }

    fn load_state(&mut self, state: &Container) -> Result<()> {
        let groups: Vec<(String, Vec<String>)> =
            serde_json::from_value(state.metadata["groups"].clone())?;
        let mut bases = Vec::new();
        for (name, _) in &groups {
            let d = state.block(&format!("basis.{name}.directions"))?;
            let sigma = state.block(&format!("basis.{name}.sigma"))?.data.clone();
            let dim = d.shape.get(1).copied().unwrap_or(0);
            let directions = if dim == 0 {
                Vec::new()
            } else {
                d.data.chunks(dim).map(<[f64]>::to_vec).collect()
            };
            bases.push(Basis { directions, sigma });
        }
        self.groups = groups;
        self.bases = bases;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::super::testutil::*;
    use super::*;
    use crate::cl::Strategy;
    use nalgebra::DMatrix;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_rows(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect()
    }

    #[test]
    fn groups_follow_layers() {
        assert_eq!(group_of("lift.1.weight"), "lift");
        assert_eq!(group_of("layers.3.spectral"), "layers.3");
        assert_eq!(group_of("proj.0.bias"), "proj");
    }

    #[test]
    fn projection_is_orthogonal() {
        let basis =
            basis_update_and_compress(&Basis::default(), &random_rows(6, 40, 1), 1.0, 32).unwrap();
        assert_eq!(basis.len(), 6);
        for g in random_rows(200, 40, 2) {
            let mut p = g.clone();
            ogd_project(&mut p, &basis.directions, 1.0);
            for b in &basis.directions {
                assert!(dot(&p, b).abs() < 1e-10 * dot(&g, &g).sqrt());
            }
        }
    }

    #[test]
    fn gram_schmidt_drops_spanned_gradients() {
        let rows = random_rows(2, 5, 3);
        let combo: Vec<f64> = rows[0]
            .iter()
            .zip(&rows[1])
            .map(|(a, b)| 2.0 * a - b)
            .collect();
        let kept = novel_gradients(
            &[],
            &[rows[0].clone(), rows[1].clone(), combo, vec![0.0; 5]],
        );
        assert_eq!(kept.len(), 2);
    }

    #[test]
    fn compression_matches_svd_oracle() {
        let d = 30;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        // rows with a decaying spectrum
        let rows: Vec<Vec<f64>> = (0..20)
            .map(|i| {
                (0..d)
                    .map(|_| rng.gen_range(-1.0..1.0) * 0.7f64.powi(i))
                    .collect()
            })
            .collect();
        let basis = basis_update_and_compress(&Basis::default(), &rows, 0.95, 32).unwrap();
        let m = DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]);
        let sv = m.clone().svd(false, false).singular_values;
        let mut s: Vec<f64> = sv.iter().copied().collect();
        s.sort_by(|a, b| b.total_cmp(a));
        let total: f64 = s.iter().map(|x| x * x).sum();
        let mut acc = 0.0;
        let mut k = 0;
        while acc < 0.95 * total {
            acc += s[k] * s[k];
            k += 1;
        }
        assert_eq!(basis.len(), k);
        for (a, b) in basis.sigma.iter().zip(&s) {
            assert!((a - b).abs() < 1e-9 * s[0]);
        }
        let captured: f64 = rows
            .iter()
            .map(|r| {
                basis
                    .directions
                    .iter()
                    .map(|b| dot(r, b).powi(2))
                    .sum::<f64>()
            })
            .sum();
        assert!(captured >= 0.95 * total * (1.0 - 1e-12));
    }

    #[test]
    fn cap_limits_basis() {
        let basis =
            basis_update_and_compress(&Basis::default(), &random_rows(40, 50, 5), 1.0, 32).unwrap();
        assert_eq!(basis.len(), 32);
        let more = basis_update_and_compress(&basis, &random_rows(10, 50, 6), 1.0, 32).unwrap();
        assert_eq!(more.len(), 32);
        assert!(basis_update_and_compress(&basis, &random_rows(1, 49, 6), 1.0, 32).is_err());
    }

    proptest! {
        #[test]
        fn merged_basis_is_orthonormal(seed in any::<u64>(), n in 1usize..12, m in 1usize..12) {
            let first = basis_update_and_compress(&Basis::default(), &random_rows(n, 16, seed), 0.95, 8).unwrap();
            let merged = basis_update_and_compress(&first, &random_rows(m, 16, seed ^ 1), 0.95, 8).unwrap();
            prop_assert!(merged.len() <= 8);
            for (i, a) in merged.directions.iter().enumerate() {
                for (j, b) in merged.directions.iter().enumerate() {
                    let want = if i == j { 1.0 } else { 0.0 };
                    prop_assert!((dot(a, b) - want).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn training_steps_stay_orthogonal_to_stored_gradients() {
        let a = tiny_task("A", 1, [0.5, 0.9]);
        let b = tiny_task("B", 2, [1.8, 2.1]);
        let mut model = FnoModel::new(tiny_config(), 2).unwrap();
        let mut ogd = Ogd::new(&MethodOptions::default());
        let hyper = Method::Ogd.default_hyper();
        ogd.begin_task(&mut model, &ctx(0, &a, hyper)).unwrap();
        ogd.end_task(&mut model, &ctx(0, &a, hyper)).unwrap();
        assert!(ogd.bases().iter().all(|b| !b.is_empty()));
        let c = ctx(1, &b, hyper);
        ogd.begin_task(&mut model, &c).unwrap();
        let refs: Vec<&_> = b.train.iter().collect();
        accumulate_loss_gradient(&ogd, &mut model, &refs[..2], 1, 1e-3).unwrap();
        ogd.adjust_gradients(&mut model, &c).unwrap();
        for ((_, members), basis) in ogd.groups.iter().zip(ogd.bases()) {
            let g = Ogd::group_grad(&model, members).unwrap();
            for d in &basis.directions {
                assert!(dot(&g, d).abs() < 1e-10 * dot(&g, &g).sqrt().max(1e-30));
            }
        }
        let mut back = Ogd::new(&MethodOptions::default());
        back.load_state(&ogd.save_state().unwrap()).unwrap();
        assert_eq!(back.bases(), ogd.bases());
        assert_eq!(back.groups, ogd.groups);
    }
}
