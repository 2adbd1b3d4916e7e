//! Two-dimensional discrete Fourier transforms on row-major planes.
//!
//! The forward transform is unnormalized; the inverse carries the `1/(H·W)`
//! factor so that `ifft2(fft2(x)) == x`.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftDirection, FftPlanner};

use crate::error::{shape_err, Error, Result};

thread_local! {
    static PLANS: RefCell<PlanCache> = RefCell::new(PlanCache::default());
}

struct PlanCache {
    planner: FftPlanner<f64>,
    plans: HashMap<(usize, bool), Arc<dyn Fft<f64>>>,
}

impl Default for PlanCache {
    fn default() -> Self {
        Self {
            planner: FftPlanner::new(),
            plans: HashMap::new(),
        }
    }
}

impl PlanCache {
    fn plan(&mut self, len: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
        let planner = &mut self.planner;
        self.plans
            .entry((len, inverse))
            .or_insert_with(|| {
                let dir = if inverse {
                    FftDirection::Inverse
                } else {
                    FftDirection::Forward
                };
                planner.plan_fft(len, dir)
            })
            .clone()
    }
}

fn transform(data: &mut [Complex64], height: usize, width: usize, inverse: bool) {
    PLANS.with(|cache| {
        let mut cache = cache.borrow_mut();
        let row_plan = cache.plan(width, inverse);
        let col_plan = cache.plan(height, inverse);
        for row in data.chunks_exact_mut(width) {
            row_plan.process(row);
        }
        let mut column = vec![Complex64::new(0.0, 0.0); height];
        for x in 0..width {
            for y in 0..height {
                column[y] = data[y * width + x];
            }
            col_plan.process(&mut column);
            for y in 0..height {
                data[y * width + x] = column[y];
            }
        }
    });
}

fn check(len: usize, height: usize, width: usize) -> Result<()> {
    if height == 0 || width == 0 {
        return Err(Error::InvalidArgument(format!(
            "fft2 needs positive dimensions, got {height}x{width}"
        )));
    }
    if len != height * width {
        return Err(shape_err(format!(
            "plane of {len} values does not match {height}x{width}"
        )));
    }
    Ok(())
}

/// Forward transform of a real plane.
pub fn fft2_real(plane: &[f64], height: usize, width: usize) -> Result<Vec<Complex64>> {
    check(plane.len(), height, width)?;
    if plane.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("fft2 input"));
    }
    let mut data: Vec<Complex64> = plane.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    transform(&mut data, height, width, false);
    Ok(data)
}

/// Forward transform of a complex plane.
pub fn fft2(plane: &[Complex64], height: usize, width: usize) -> Result<Vec<Complex64>> {
    check(plane.len(), height, width)?;
    if plane.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
        return Err(Error::NonFinite("fft2 input"));
    }
    let mut data = plane.to_vec();
    transform(&mut data, height, width, false);
    Ok(data)
}

/// Inverse transform, normalized by `1/(H·W)`.
pub fn ifft2(spectrum: &[Complex64], height: usize, width: usize) -> Result<Vec<Complex64>> {
    check(spectrum.len(), height, width)?;
    if spectrum
        .iter()
        .any(|v| !v.re.is_finite() || !v.im.is_finite())
    {
        return Err(Error::NonFinite("ifft2 input"));
    }
    let mut data = spectrum.to_vec();
    transform(&mut data, height, width, true);
    let scale = 1.0 / (height * width) as f64;
    for v in &mut data {
        *v *= scale;
    }
    Ok(data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_plane(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    /// Textbook O(N²) DFT, independent of the FFT path.
    fn direct_dft(plane: &[f64], h: usize, w: usize) -> Vec<Complex64> {
        let mut out = vec![Complex64::new(0.0, 0.0); h * w];
        for ky in 0..h {
            for kx in 0..w {
                let mut acc = Complex64::new(0.0, 0.0);
                for y in 0..h {
                    for x in 0..w {
                        let theta = -2.0
                            * std::f64::consts::PI
                            * ((ky * y) as f64 / h as f64 + (kx * x) as f64 / w as f64);
                        acc += plane[y * w + x] * Complex64::from_polar(1.0, theta);
                    }
                }
                out[ky * w + kx] = acc;
            }
        }
        out
    }

    #[test]
    fn round_trip_64() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_plane(&mut rng, 64 * 64);
        let back = ifft2(&fft2_real(&x, 64, 64).unwrap(), 64, 64).unwrap();
        let dev = x
            .iter()
            .zip(&back)
            .map(|(a, b)| (a - b.re).abs().max(b.im.abs()))
            .fold(0.0, f64::max);
        assert!(dev < 1e-10, "max deviation {dev}");
    }

    #[test]
    fn zeros_map_to_zeros() {
        let spec = fft2_real(&[0.0; 12], 3, 4).unwrap();
        assert!(spec.iter().all(|c| c.norm() == 0.0));
    }

    #[test]
    fn parseval_against_direct_dft() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_plane(&mut rng, 64);
        let fast = fft2_real(&x, 8, 8).unwrap();
        let slow = direct_dft(&x, 8, 8);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).norm() < 1e-10);
        }
        let energy: f64 = x.iter().map(|v| v * v).sum();
        let spectral: f64 = slow.iter().map(|c| c.norm_sqr()).sum::<f64>() / 64.0;
        assert!(((energy - spectral) / energy).abs() < 1e-10);
        let spectral_fast: f64 = fast.iter().map(|c| c.norm_sqr()).sum::<f64>() / 64.0;
        assert!(((energy - spectral_fast) / energy).abs() < 1e-10);
    }

    #[test]
    fn linearity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_plane(&mut rng, 6 * 10);
        let y = random_plane(&mut rng, 6 * 10);
        let (a, b) = (0.7, -2.3);
        let combo: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
        let fx = fft2_real(&x, 6, 10).unwrap();
        let fy = fft2_real(&y, 6, 10).unwrap();
        let fc = fft2_real(&combo, 6, 10).unwrap();
        for i in 0..60 {
            assert!((fc[i] - (a * fx[i] + b * fy[i])).norm() < 1e-10);
        }
    }

    #[test]
    fn rejects_non_finite_and_bad_shapes() {
        assert!(matches!(
            fft2_real(&[1.0, f64::NAN, 0.0, 0.0], 2, 2),
            Err(Error::NonFinite(_))
        ));
        assert!(fft2_real(&[1.0; 5], 2, 2).is_err());
        assert!(fft2_real(&[], 0, 3).is_err());
    }
}
