//! Random Fourier features approximating a Gaussian kernel on unit-normalized
//! inputs.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub const DEFAULT_FEATURES: usize = 4096;

/// `z = sqrt(2/D)·cos(Ω x' + b)` with `x' = x/‖x‖`, Gaussian `Ω` of scale
/// `1/σ` and uniform phases `b`. Row `r` of `Ω` is drawn from its own RNG
/// stream, so the map is fully determined by `(dim, features, seed, σ)`.
#[derive(Clone, Debug)]
pub struct RffMap {
    input_dim: usize,
    features: usize,
    seed: u64,
    sigma: f64,
    // Gaussian draws before the 1/σ scale, stored at single precision
    omega: Vec<f32>,
    phase: Vec<f64>,
}

impl RffMap {
    pub fn new(input_dim: usize, features: usize, seed: u64, sigma: f64) -> Result<Self> {
        if input_dim == 0 || features == 0 {
            return Err(Error::InvalidArgument(
                "feature map needs positive dimensions".into(),
            ));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "bandwidth must be positive, got {sigma}"
            )));
        }
        let mut omega = Vec::with_capacity(input_dim * features);
        let mut phase = Vec::with_capacity(features);
        for r in 0..features {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(r as u64);
            phase.push(rng.gen_range(0.0..2.0 * PI));
            omega.extend((0..input_dim).map(|_| rng.sample::<f64, _>(StandardNormal) as f32));
        }
        Ok(Self {
            input_dim,
            features,
            seed,
            sigma,
            omega,
            phase,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn map(&self, x: &[f64]) -> Result<Vec<f64>> {
        let xn = normalize(x)?;
        if xn.len() != self.input_dim {
            return Err(Error::Shape(format!(
                "feature map expects {} inputs, got {}",
                self.input_dim,
                xn.len()
            )));
        }
        let scale = (2.0 / self.features as f64).sqrt();
        let inv_sigma = 1.0 / self.sigma;
        Ok((0..self.features)
            .map(|r| {
                let row = &self.omega[r * self.input_dim..(r + 1) * self.input_dim];
                let dot: f64 = row.iter().zip(&xn).map(|(w, v)| *w as f64 * v).sum();
                scale * (dot * inv_sigma + self.phase[r]).cos()
            })
            .collect())
    }
}

/// `x / ‖x‖₂`.
pub fn normalize(x: &[f64]) -> Result<Vec<f64>> {
    let n: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n == 0.0 || !n.is_finite() {
        return Err(Error::ZeroNorm("router input"));
    }
    Ok(x.iter().map(|v| v / n).collect())
}

/// Median Euclidean distance over all pairs of normalized inputs.
pub fn median_bandwidth(inputs: &[Vec<f64>]) -> Result<f64> {
    if inputs.len() < 2 {
        return Err(Error::InvalidArgument(
            "bandwidth heuristic needs two inputs".into(),
        ));
    }
    let normed = inputs
        .iter()
        .map(|x| normalize(x))
        .collect::<Result<Vec<_>>>()?;
    let mut d = Vec::with_capacity(normed.len() * (normed.len() - 1) / 2);
    for i in 0..normed.len() {
        for j in i + 1..normed.len() {
            d.push(
                normed[i]
                    .iter()
                    .zip(&normed[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt(),
            );
        }
    }
    d.sort_by(f64::total_cmp);
    let m = d.len();
    let med = if m % 2 == 1 {
        d[m / 2]
    } else {
        0.5 * (d[m / 2 - 1] + d[m / 2])
    };
    if med <= 0.0 {
        return Err(Error::InvalidArgument(
            "inputs are identical after normalization".into(),
        ));
    }
    Ok(med)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scale_invariant_and_sized() {
        let m = RffMap::new(6, DEFAULT_FEATURES, 3, 0.7).unwrap();
        let x = [0.3, -1.0, 2.0, 0.5, 0.0, 1.5];
        let x5: Vec<f64> = x.iter().map(|v| 5.0 * v).collect();
        let (a, b) = (m.map(&x).unwrap(), m.map(&x5).unwrap());
        assert_eq!(a.len(), 4096);
        for (p, q) in a.iter().zip(&b) {
            assert!((p - q).abs() < 1e-12);
        }
        assert!(matches!(m.map(&[0.0; 6]), Err(Error::ZeroNorm(_))));
    }

    #[test]
    fn approximates_gaussian_kernel() {
        let dim = 10;
        let sigma = 0.8;
        let m = RffMap::new(dim, 4096, 11, sigma).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut err = 0.0;
        for _ in 0..200 {
            let x: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let y: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let (xn, yn) = (normalize(&x).unwrap(), normalize(&y).unwrap());
            let d2: f64 = xn.iter().zip(&yn).map(|(a, b)| (a - b) * (a - b)).sum();
            let exact = (-d2 / (2.0 * sigma * sigma)).exp();
            let (zx, zy) = (m.map(&x).unwrap(), m.map(&y).unwrap());
            let approx: f64 = zx.iter().zip(&zy).map(|(a, b)| a * b).sum();
            err += (approx - exact).abs();
        }
        assert!(err / 200.0 < 0.02, "mean abs error {}", err / 200.0);
    }

    #[test]
    fn deterministic_per_seed() {
        let a = RffMap::new(4, 32, 5, 1.0).unwrap();
        let b = RffMap::new(4, 32, 5, 1.0).unwrap();
        let x = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(a.map(&x).unwrap(), b.map(&x).unwrap());
        let c = RffMap::new(4, 32, 6, 1.0).unwrap();
        assert_ne!(a.map(&x).unwrap(), c.map(&x).unwrap());
    }

    #[test]
    fn median_of_pairs() {
        let xs = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]];
        // distances sqrt2, 2, sqrt2
        assert!((median_bandwidth(&xs).unwrap() - 2f64.sqrt()).abs() < 1e-12);
    }
}
