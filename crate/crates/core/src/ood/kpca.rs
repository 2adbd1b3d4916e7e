//! PCA in random-feature space with reconstruction-error scoring.

use crate::error::{Error, Result};
use crate::tensor::linalg::symmetric_eigen;

pub const DEFAULT_ENERGY: f64 = 0.99;
pub const DEFAULT_MARGIN: f64 = 1.5;

/// Mean and principal directions of a set of feature vectors, with
/// eigenvalues of the centered second moment `(1/N)·Σ z̃ z̃ᵀ` in descending
/// order. Only directions with non-negligible variance are kept, at most
/// `N − 1`.
#[derive(Clone, Debug)]
pub struct Spectrum {
    pub mean: Vec<f64>,
    pub eigenvalues: Vec<f64>,
    pub directions: Vec<Vec<f64>>,
    pub samples: usize,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl Spectrum {
    pub fn fit(features: &[Vec<f64>]) -> Result<Self> {
        let n = features.len();
        if n < 2 {
            return Err(Error::InvalidArgument(
                "KPCA needs at least two samples".into(),
            ));
        }
        let d = features[0].len();
        if d == 0 || features.iter().any(|f| f.len() != d) {
            return Err(Error::Shape("feature vectors differ in length".into()));
        }
        let mut mean = vec![0.0; d];
        for f in features {
            for (m, v) in mean.iter_mut().zip(f) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let centered: Vec<Vec<f64>> = features
            .iter()
            .map(|f| f.iter().zip(&mean).map(|(a, b)| a - b).collect())
            .collect();

        let (mut eigenvalues, mut directions) = if n <= d {
            let mut gram = vec![0.0; n * n];
            for i in 0..n {
                for j in i..n {
                    let g = dot(&centered[i], &centered[j]);
                    gram[i * n + j] = g;
                    gram[j * n + i] = g;
                }
            }
            let (mu, vecs) = symmetric_eigen(&gram, n);
            let mut vals = Vec::new();
            let mut dirs = Vec::new();
            for (m, v) in mu.iter().zip(&vecs) {
                if *m <= 0.0 {
                    continue;
                }
                let mut u = vec![0.0; d];
                for (coef, z) in v.iter().zip(&centered) {
                    for (ui, zi) in u.iter_mut().zip(z) {
                        *ui += coef * zi;
                    }
                }
                let s = 1.0 / m.sqrt();
                u.iter_mut().for_each(|x| *x *= s);
                vals.push(m / n as f64);
                dirs.push(u);
            }
            (vals, dirs)
        } else {
            let mut cov = vec![0.0; d * d];
            for z in &centered {
                for a in 0..d {
                    for b in a..d {
                        cov[a * d + b] += z[a] * z[b] / n as f64;
                    }
                }
            }
            for a in 0..d {
                for b in 0..a {
                    cov[a * d + b] = cov[b * d + a];
                }
            }
            symmetric_eigen(&cov, d)
        };
        let top = eigenvalues.first().copied().unwrap_or(0.0);
        let keep = eigenvalues
            .iter()
            .take_while(|&&l| l > 1e-12 * top && l > 0.0)
            .count()
            .min(n - 1);
        eigenvalues.truncate(keep);
        directions.truncate(keep);
        // polish orthonormality lost to round-off in the Gram route
        for i in 0..directions.len() {
            for j in 0..i {
                let p = dot(&directions[i], &directions[j]);
                let (head, tail) = directions.split_at_mut(i);
                for (a, b) in tail[0].iter_mut().zip(&head[j]) {
                    *a -= p * b;
                }
            }
            let norm = dot(&directions[i], &directions[i]).sqrt();
            directions[i].iter_mut().for_each(|x| *x /= norm);
        }
        Ok(Self {
            mean,
            eigenvalues,
            directions,
            samples: n,
        })
    }

    /// Smallest mode count whose eigenvalues capture `energy` of the total.
    pub fn modes_for_energy(&self, energy: f64) -> usize {
        let total: f64 = self.eigenvalues.iter().sum();
        if total <= 0.0 {
            return 0;
        }
        let mut acc = 0.0;
        for (k, l) in self.eigenvalues.iter().enumerate() {
            acc += l;
            if acc >= energy * total {
                return k + 1;
            }
        }
        self.eigenvalues.len()
    }
}

/// Reconstruction residual `‖z − (z̄ + Σ⟨z − z̄, u_k⟩ u_k)‖₂`.
pub fn residual_score(z: &[f64], mean: &[f64], directions: &[Vec<f64>]) -> f64 {
    let mut r: Vec<f64> = z.iter().zip(mean).map(|(a, b)| a - b).collect();
    for u in directions {
        let c = dot(&r, u);
        for (ri, ui) in r.iter_mut().zip(u) {
            *ri -= c * ui;
        }
    }
    dot(&r, &r).sqrt()
}

/// `max(scores) × margin`.
pub fn calibrate_threshold(scores: &[f64], margin: f64) -> Result<f64> {
    if scores.len() < 2 {
        return Err(Error::InvalidArgument(
            "threshold calibration needs two scores".into(),
        ));
    }
    if !(margin >= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "margin must be at least 1, got {margin}"
        )));
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(max * margin)
}

/// One task's detector.
#[derive(Clone, Debug, PartialEq)]
pub struct KpcaModel {
    pub task: usize,
    pub mean: Vec<f64>,
    pub directions: Vec<Vec<f64>>,
    pub tau: f64,
}

impl KpcaModel {
    /// Fit on `features` keeping `modes` directions, or the energy rule when
    /// `None`, and calibrate the threshold on the training scores.
    pub fn fit(
        task: usize,
        features: &[Vec<f64>],
        modes: Option<usize>,
        margin: f64,
    ) -> Result<Self> {
        let spec = Spectrum::fit(features)?;
        Self::from_spectrum(task, &spec, features, modes, margin)
    }

    pub fn from_spectrum(
        task: usize,
        spec: &Spectrum,
        features: &[Vec<f64>],
        modes: Option<usize>,
        margin: f64,
    ) -> Result<Self> {
        let d = spec.mean.len();
        let k = match modes {
            Some(k) => {
                if k > (spec.samples - 1).min(d) {
                    return Err(Error::InvalidArgument(format!(
                        "{k} modes exceed min(D, N - 1) = {}",
                        (spec.samples - 1).min(d)
                    )));
                }
                k.min(spec.directions.len())
            }
            None => spec.modes_for_energy(DEFAULT_ENERGY),
        };
        let mut model = Self {
            task,
            mean: spec.mean.clone(),
            directions: spec.directions[..k].to_vec(),
            tau: 0.0,
        };
        let scores: Vec<f64> = features.iter().map(|z| model.score(z)).collect();
        // a tiny floor keeps the threshold positive when training data is
        // reconstructed exactly
        model.tau = calibrate_threshold(&scores, margin)?.max(1e-12);
        Ok(model)
    }

    pub fn modes(&self) -> usize {
        self.directions.len()
    }

    pub fn score(&self, z: &[f64]) -> f64 {
        residual_score(z, &self.mean, &self.directions)
    }
}
