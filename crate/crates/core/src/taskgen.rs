//! Synthetic field-regression tasks.
//!
//! Each input holds five snapshots of a band-limited random scalar field
//! that is advected and diffused over time, squashed into a concentration
//! range, plus two coordinate channels. The target is a saturated
//! time-averaged gradient magnitude of the snapshots.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::tensor::container::{Block, Container, Dtype, KIND_DATASET};
use crate::tensor::{tape::grid_gradient, GridField};

pub const SNAPSHOTS: usize = 5;
pub const INPUT_CHANNELS: usize = SNAPSHOTS + 2;

const DIFFUSION: f64 = 1e-4;
const CONTRAST: f64 = 1.5;
const GRADIENT_SCALE: f64 = 2.0 * PI * 4.0;
const SOFT_EPS: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: String,
    pub seed: u64,
    pub grid: usize,
    pub train: usize,
    pub test: usize,
    /// Upper end of the concentration range.
    pub amplitude: [f64; 2],
    /// Centre of the excited wavenumber shell, in cycles per domain.
    pub wavenumber: [f64; 2],
    /// Power-law decay of the mode amplitudes with |k|.
    pub decay: [f64; 2],
    /// Advection speed in domain lengths per snapshot.
    pub speed: [f64; 2],
    /// Gain of the saturating target map.
    pub gain: f64,
}

impl TaskSpec {
    fn axes(&self) -> [(&'static str, [f64; 2]); 4] {
        [
            ("amplitude", self.amplitude),
            ("wavenumber", self.wavenumber),
            ("decay", self.decay),
            ("speed", self.speed),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid < 2 || self.train == 0 || self.test == 0 {
            return Err(Error::InvalidArgument(format!(
                "task `{}` needs grid >= 2 and at least one train and test sample",
                self.id
            )));
        }
        for (name, [lo, hi]) in self.axes() {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::InvalidArgument(format!(
                    "task `{}`: {name} range [{lo}, {hi}] is invalid",
                    self.id
                )));
            }
        }
        if self.amplitude[0] <= 0.0 || self.wavenumber[0] < 1.0 || self.speed[0] < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "task `{}`: amplitude must be positive and wavenumber at least 1",
                self.id
            )));
        }
        if !(self.gain > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "task `{}`: gain must be positive",
                self.id
            )));
        }
        Ok(())
    }
}

/// Four mutually out-of-distribution tasks: a broad pretraining task A and
/// three narrow tasks, with D on the highest wavenumber band.
pub fn default_sequence(grid: usize, seed: u64) -> Vec<TaskSpec> {
    let base = |id: &str, k: u64, train, test, amplitude, wavenumber| TaskSpec {
        id: id.to_string(),
        seed: seed.wrapping_mul(1000).wrapping_add(k),
        grid,
        train,
        test,
        amplitude,
        wavenumber,
        decay: [1.0, 1.5],
        speed: [0.02, 0.05],
        gain: 1.5,
    };
    vec![
        base("A", 1, 160, 40, [0.5, 0.9], [1.0, 2.5]),
        base("B", 2, 8, 2, [1.8, 2.1], [1.5, 2.0]),
        base("C", 3, 8, 2, [0.2, 0.3], [2.0, 2.5]),
        base("D", 4, 8, 2, [1.2, 1.4], [3.0, 4.0]),
    ]
}

fn overlaps(a: [f64; 2], b: [f64; 2]) -> bool {
    a[0] <= b[1] && b[0] <= a[1]
}

/// Every pair of tasks must be separated along at least one parameter axis.
pub fn check_disjoint(specs: &[TaskSpec]) -> Result<()> {
    for (i, a) in specs.iter().enumerate() {
        for b in &specs[i + 1..] {
            if a.id == b.id {
                return Err(Error::InvalidArgument(format!(
                    "duplicate task id `{}`",
                    a.id
                )));
            }
            let separated = a
                .axes()
                .iter()
                .zip(b.axes().iter())
                .any(|((_, x), (_, y))| !overlaps(*x, *y));
            if !separated {
                return Err(Error::InvalidArgument(format!(
                    "tasks `{}` and `{}` overlap on every parameter axis",
                    a.id, b.id
                )));
            }
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub input: GridField,
    pub target: GridField,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskDataset {
    pub id: String,
    pub spec: Option<TaskSpec>,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

struct Mode {
    kx: f64,
    ky: f64,
    amp: f64,
    phase: f64,
}

fn draw(rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

/// Saturated time-averaged gradient magnitude of the snapshot channels.
pub fn target_functional(input: &GridField, gain: f64) -> Result<GridField> {
    if input.channels() != INPUT_CHANNELS {
        return Err(Error::Shape(format!(
            "inputs need {INPUT_CHANNELS} channels, got {}",
            input.channels()
        )));
    }
    let (h, w) = (input.height(), input.width());
    let plane = h * w;
    let grads = grid_gradient(&input.data()[..SNAPSHOTS * plane], SNAPSHOTS, h, w);
    let mut out = vec![0.0; plane];
    for t in 0..SNAPSHOTS {
        let gy = &grads[t * plane..(t + 1) * plane];
        let gx = &grads[(SNAPSHOTS + t) * plane..(SNAPSHOTS + t + 1) * plane];
        for p in 0..plane {
            out[p] += (gx[p] * gx[p] + gy[p] * gy[p] + SOFT_EPS * SOFT_EPS).sqrt();
        }
    }
    for v in &mut out {
        *v = (gain * *v / (SNAPSHOTS as f64 * GRADIENT_SCALE)).tanh();
    }
    let mut f = GridField::new(1, h, w, out)?;
    f.quantize_f32();
    Ok(f)
}

/// The two normalized coordinate meshes, x along columns and y along rows.
pub fn coordinate_channels(n: usize) -> (Vec<f64>, Vec<f64>) {
    let denom = (n - 1) as f64;
    let mut xs = Vec::with_capacity(n * n);
    let mut ys = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            xs.push(j as f64 / denom);
            ys.push(i as f64 / denom);
        }
    }
    (xs, ys)
}

fn generate_sample(spec: &TaskSpec, index: u64) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index);
    let n = spec.grid;
    let amplitude = draw(&mut rng, spec.amplitude);
    let kc = draw(&mut rng, spec.wavenumber);
    let decay = draw(&mut rng, spec.decay);
    let speed = draw(&mut rng, spec.speed);
    let heading = rng.gen_range(0.0..2.0 * PI);
    let (vx, vy) = (speed * heading.cos(), speed * heading.sin());

    let kmax = (kc + 1.0).ceil() as i64;
    let mut modes = Vec::new();
    for ky in 0..=kmax {
        for kx in -kmax..=kmax {
            if ky == 0 && kx <= 0 {
                continue;
            }
            let k = ((kx * kx + ky * ky) as f64).sqrt();
            if (k - kc).abs() > 0.75 {
                continue;
            }
            let g: f64 = rng.sample(StandardNormal);
            modes.push(Mode {
                kx: kx as f64,
                ky: ky as f64,
                amp: g * k.powf(-decay),
                phase: rng.gen_range(0.0..2.0 * PI),
            });
        }
    }
    if modes.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "task `{}`: no wavevectors near |k| = {kc}",
            spec.id
        )));
    }

    let plane = n * n;
    let mut raw = vec![0.0; SNAPSHOTS * plane];
    for t in 0..SNAPSHOTS {
        let tf = t as f64;
        for m in &modes {
            let k2 = 4.0 * PI * PI * (m.kx * m.kx + m.ky * m.ky);
            let a = m.amp * (-DIFFUSION * k2 * tf).exp();
            let shift = 2.0 * PI * (m.kx * vx + m.ky * vy) * tf;
            for i in 0..n {
                for j in 0..n {
                    let arg =
                        2.0 * PI * (m.kx * j as f64 + m.ky * i as f64) / n as f64 - shift + m.phase;
                    raw[t * plane + i * n + j] += a * arg.cos();
                }
            }
        }
    }
    let rms = (raw[..plane].iter().map(|v| v * v).sum::<f64>() / plane as f64).sqrt();
    let norm = if rms > 0.0 { CONTRAST / rms } else { 0.0 };
    let mut data: Vec<f64> = raw
        .iter()
        .map(|v| amplitude * (0.5 + 0.5 * (norm * v).tanh()))
        .collect();
    let (xs, ys) = coordinate_channels(n);
    data.extend(xs);
    data.extend(ys);
    let mut input = GridField::new(INPUT_CHANNELS, n, n, data)?;
    input.quantize_f32();
    let target = target_functional(&input, spec.gain)?;
    Ok(Sample { input, target })
}

pub fn generate(spec: &TaskSpec) -> Result<TaskDataset> {
    spec.validate()?;
    let total = (spec.train + spec.test) as u64;
    let mut samples = (0..total)
        .map(|i| generate_sample(spec, i))
        .collect::<Result<Vec<_>>>()?;
    let test = samples.split_off(spec.train);
    Ok(TaskDataset {
        id: spec.id.clone(),
        spec: Some(spec.clone()),
        train: samples,
        test,
    })
}

/// Generate a whole sequence after checking the tasks are pairwise separated.
pub fn generate_sequence(specs: &[TaskSpec]) -> Result<Vec<TaskDataset>> {
    check_disjoint(specs)?;
    specs.iter().map(generate).collect()
}

fn stack(samples: &[Sample], target: bool) -> (Vec<usize>, Vec<f64>) {
    let fields: Vec<&GridField> = samples
        .iter()
        .map(|s| if target { &s.target } else { &s.input })
        .collect();
    let shape = match fields.first() {
        Some(f) => vec![fields.len(), f.channels(), f.height(), f.width()],
        None => vec![0, 0, 0, 0],
    };
    let data = fields
        .iter()
        .flat_map(|f| f.data().iter().copied())
        .collect();
    (shape, data)
}

fn unstack(inputs: &Block, targets: &Block) -> Result<Vec<Sample>> {
    let (is, ts) = (&inputs.shape, &targets.shape);
    if is.len() != 4 || ts.len() != 4 || is[0] != ts[0] {
        return Err(Error::Format(
            "dataset blocks have inconsistent shapes".into(),
        ));
    }
    if is[0] == 0 {
        return Ok(Vec::new());
    }
    let (ni, nt) = (is[1] * is[2] * is[3], ts[1] * ts[2] * ts[3]);
    (0..is[0])
        .map(|k| {
            Ok(Sample {
                input: GridField::new(
                    is[1],
                    is[2],
                    is[3],
                    inputs.data[k * ni..(k + 1) * ni].to_vec(),
                )?,
                target: GridField::new(
                    ts[1],
                    ts[2],
                    ts[3],
                    targets.data[k * nt..(k + 1) * nt].to_vec(),
                )?,
            })
        })
        .collect()
}

impl TaskDataset {
    pub fn to_container(&self) -> Container {
        let mut c = Container::new(
            KIND_DATASET,
            json!({
                "task": self.id,
                "train": self.train.len(),
                "test": self.test.len(),
                "spec": self.spec,
            }),
        );
        for (split, samples) in [("train", &self.train), ("test", &self.test)] {
            for (what, target) in [("inputs", false), ("targets", true)] {
                let (shape, data) = stack(samples, target);
                c.push(Block::new(
                    format!("{split}_{what}"),
                    shape,
                    Dtype::F32,
                    data,
                ));
            }
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let id = c.metadata["task"]
            .as_str()
            .ok_or_else(|| Error::Format("dataset header lacks a task id".into()))?
            .to_string();
        let spec = match &c.metadata["spec"] {
            serde_json::Value::Null => None,
            v => Some(serde_json::from_value(v.clone()).map_err(|e| Error::Format(e.to_string()))?),
        };
        let train = unstack(c.block("train_inputs")?, c.block("train_targets")?)?;
        let test = unstack(c.block("test_inputs")?, c.block("test_targets")?)?;
        Ok(Self {
            id,
            spec,
            train,
            test,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path, KIND_DATASET)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(id: &str, amplitude: [f64; 2]) -> TaskSpec {
        TaskSpec {
            id: id.into(),
            seed: 7,
            grid: 12,
            train: 3,
            test: 2,
            amplitude,
            wavenumber: [1.5, 2.5],
            decay: [1.0, 1.5],
            speed: [0.02, 0.05],
            gain: 1.5,
        }
    }

    #[test]
    fn default_counts() {
        let specs = default_sequence(16, 0);
        let counts: Vec<(usize, usize)> = specs.iter().map(|s| (s.train, s.test)).collect();
        assert_eq!(counts, vec![(160, 40), (8, 2), (8, 2), (8, 2)]);
        check_disjoint(&specs).unwrap();
    }

    #[test]
    fn deterministic_and_finite() {
        let a = generate(&tiny("A", [0.5, 0.9])).unwrap();
        let b = generate(&tiny("A", [0.5, 0.9])).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.train.len(), a.test.len()), (3, 2));
        for s in a.train.iter().chain(&a.test) {
            assert!(s.input.is_finite() && s.target.is_finite());
            assert_eq!(s.input.channels(), INPUT_CHANNELS);
        }
        assert_ne!(a.train[0].input, a.train[1].input);
    }

    #[test]
    fn targets_follow_from_inputs() {
        let spec = tiny("A", [0.5, 0.9]);
        let d = generate(&spec).unwrap();
        for s in &d.train {
            assert_eq!(target_functional(&s.input, spec.gain).unwrap(), s.target);
        }
    }

    #[test]
    fn coordinate_channels_are_fixed_meshes() {
        let d = generate(&tiny("A", [0.5, 0.9])).unwrap();
        let n = 12;
        let x = d.train[0].input.plane(SNAPSHOTS);
        let y = d.train[0].input.plane(SNAPSHOTS + 1);
        assert_eq!(x[0], 0.0);
        assert_eq!(x[n - 1], 1.0);
        assert_eq!(y[(n - 1) * n], 1.0);
    }

    #[test]
    fn overlapping_tasks_rejected() {
        let err = check_disjoint(&[tiny("A", [0.5, 0.9]), tiny("B", [0.8, 1.0])]);
        assert!(err.is_err());
        check_disjoint(&[tiny("A", [0.5, 0.9]), tiny("B", [1.0, 1.2])]).unwrap();
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = tiny("A", [0.9, 0.5]);
        assert!(generate(&s).is_err());
        s.amplitude = [0.5, 0.9];
        s.train = 0;
        assert!(generate(&s).is_err());
    }
}
