//! Fourier neural operator: pointwise lifting, a stack of spectral layers
//! with pointwise residual maps, pointwise projection.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{GridField, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Gelu,
    Identity,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FnoConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub hidden: usize,
    pub layers: usize,
    pub modes: usize,
    pub lifting_ratio: usize,
    pub projection_ratio: usize,
    pub activation: Activation,
}

impl Default for FnoConfig {
    fn default() -> Self {
        Self {
            in_channels: 7,
            out_channels: 1,
            hidden: 64,
            layers: 4,
            modes: 16,
            lifting_ratio: 2,
            projection_ratio: 2,
            activation: Activation::Gelu,
        }
    }
}

impl FnoConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("in_channels", self.in_channels),
            ("out_channels", self.out_channels),
            ("hidden", self.hidden),
            ("layers", self.layers),
            ("modes", self.modes),
            ("lifting_ratio", self.lifting_ratio),
            ("projection_ratio", self.projection_ratio),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }

    pub fn lift_width(&self) -> usize {
        self.hidden * self.lifting_ratio
    }

    pub fn proj_width(&self) -> usize {
        self.hidden * self.projection_ratio
    }

    /// Closed-form parameter count of the backbone.
    pub fn param_count(&self) -> usize {
        let (c, m) = (self.hidden, self.modes);
        let (lw, pw) = (self.lift_width(), self.proj_width());
        let lifting = self.in_channels * lw + lw + lw * c + c;
        let layer = 2 * c * c * m * m + c * c + c;
        let projection = c * pw + pw + pw * self.out_channels + self.out_channels;
        lifting + self.layers * layer + projection
    }
}

/// Resolves the weight a forward pass should use for a named backbone entry.
/// Strategies override this to apply masks or low-rank updates.
pub trait WeightMap {
    fn weight(&self, tape: &mut Tape, store: &ParamStore, name: &str) -> Result<Var>;
}

/// Uses every entry as stored.
pub struct Plain;

impl WeightMap for Plain {
    fn weight(&self, tape: &mut Tape, store: &ParamStore, name: &str) -> Result<Var> {
        tape.param_named(store, name)
    }
}

fn act(tape: &mut Tape, v: Var, a: Activation) -> Var {
    match a {
        Activation::Gelu => tape.gelu(v),
        Activation::Identity => v,
    }
}

/// Pointwise affine map `weight·x + bias` over channels.
pub fn pointwise(
    tape: &mut Tape,
    store: &ParamStore,
    map: &dyn WeightMap,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    let w = map.weight(tape, store, &format!("{prefix}.weight"))?;
    let b = map.weight(tape, store, &format!("{prefix}.bias"))?;
    tape.channel_mix(w, x, Some(b))
}

/// One Fourier layer: `act(spectral(z) + W·z + b)`, with entries
/// `{prefix}.spectral`, `{prefix}.weight`, `{prefix}.bias`.
pub fn spectral_layer(
    tape: &mut Tape,
    store: &ParamStore,
    map: &dyn WeightMap,
    prefix: &str,
    z: Var,
    activation: Activation,
) -> Result<Var> {
    let r = map.weight(tape, store, &format!("{prefix}.spectral"))?;
    let s = tape.spectral_conv(z, r)?;
    let local = pointwise(tape, store, map, prefix, z)?;
    let sum = tape.add(s, local)?;
    Ok(act(tape, sum, activation))
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
}

/// Insert a pointwise map `[co, ci]` plus bias, uniform in `±1/sqrt(ci)`.
pub fn init_pointwise(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    ci: usize,
    co: usize,
) -> Result<()> {
    let bound = 1.0 / (ci as f64).sqrt();
    store.insert(
        format!("{prefix}.weight"),
        vec![co, ci],
        uniform(rng, co * ci, bound),
        true,
    )?;
    store.insert(
        format!("{prefix}.bias"),
        vec![co],
        uniform(rng, co, bound),
        true,
    )?;
    Ok(())
}

/// Complex spectral weights `[ci, co, m, m, 2]` with magnitude uniform in
/// `[0, 1/(ci·co))` and uniform phase.
pub fn init_spectral(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    name: &str,
    ci: usize,
    co: usize,
    modes: usize,
) -> Result<()> {
    let scale = 1.0 / (ci * co) as f64;
    let n = ci * co * modes * modes;
    let mut data = Vec::with_capacity(2 * n);
    for _ in 0..n {
        let mag = scale * rng.gen::<f64>();
        let phase = 2.0 * PI * rng.gen::<f64>();
        data.push(mag * phase.cos());
        data.push(mag * phase.sin());
    }
    store.insert(name, vec![ci, co, modes, modes, 2], data, true)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct FnoModel {
    pub config: FnoConfig,
    pub params: ParamStore,
}

impl FnoModel {
    pub fn new(config: FnoConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let c = config.hidden;
        init_pointwise(
            &mut params,
            &mut rng,
            "lift.0",
            config.in_channels,
            config.lift_width(),
        )?;
        init_pointwise(&mut params, &mut rng, "lift.1", config.lift_width(), c)?;
        for l in 0..config.layers {
            init_spectral(
                &mut params,
                &mut rng,
                &format!("layers.{l}.spectral"),
                c,
                c,
                config.modes,
            )?;
            init_pointwise(&mut params, &mut rng, &format!("layers.{l}"), c, c)?;
        }
        init_pointwise(&mut params, &mut rng, "proj.0", c, config.proj_width())?;
        init_pointwise(
            &mut params,
            &mut rng,
            "proj.1",
            config.proj_width(),
            config.out_channels,
        )?;
        Ok(Self { config, params })
    }

    /// Wrap an existing store, checking it holds every backbone entry with
    /// the shape the config implies.
    pub fn from_params(config: FnoConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let reference = Self::new(config.clone(), 0)?;
        for (_, e) in reference.params.iter() {
            let found = params.by_name(&e.name)?;
            if found.shape != e.shape {
                return Err(Error::Shape(format!(
                    "`{}` has shape {:?}, config implies {:?}",
                    e.name, found.shape, e.shape
                )));
            }
        }
        Ok(Self { config, params })
    }

    /// Names of the backbone entries, in registration order.
    pub fn backbone_names(&self) -> Vec<String> {
        let mut names = vec![
            "lift.0.weight".to_string(),
            "lift.0.bias".into(),
            "lift.1.weight".into(),
            "lift.1.bias".into(),
        ];
        for l in 0..self.config.layers {
            for part in ["spectral", "weight", "bias"] {
                names.push(format!("layers.{l}.{part}"));
            }
        }
        names.extend(
            [
                "proj.0.weight",
                "proj.0.bias",
                "proj.1.weight",
                "proj.1.bias",
            ]
            .map(String::from),
        );
        names
    }

    pub fn backbone_param_count(&self) -> usize {
        self.backbone_names()
            .iter()
            .map(|n| self.params.by_name(n).map(|e| e.len()).unwrap_or(0))
            .sum()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        match *x.shape() {
            [c, h, w] if c == self.config.in_channels => {
                if 2 * self.config.modes > h.min(w) {
                    return Err(Error::InvalidArgument(format!(
                        "{} modes do not fit a {}x{} grid",
                        self.config.modes, h, w
                    )));
                }
                Ok(())
            }
            _ => Err(Error::Shape(format!(
                "model expects [{}, h, w] input, got {:?}",
                self.config.in_channels,
                x.shape()
            ))),
        }
    }

    pub fn lift(&self, tape: &mut Tape, map: &dyn WeightMap, x: Var) -> Result<Var> {
        self.check_input(tape.value(x))?;
        let h = pointwise(tape, &self.params, map, "lift.0", x)?;
        let h = act(tape, h, self.config.activation);
        pointwise(tape, &self.params, map, "lift.1", h)
    }

    pub fn body(&self, tape: &mut Tape, map: &dyn WeightMap, z0: Var) -> Result<Var> {
        let mut z = z0;
        for l in 0..self.config.layers {
            let a = if l + 1 == self.config.layers {
                Activation::Identity
            } else {
                self.config.activation
            };
            z = spectral_layer(tape, &self.params, map, &format!("layers.{l}"), z, a)?;
        }
        Ok(z)
    }

    pub fn project(&self, tape: &mut Tape, map: &dyn WeightMap, z: Var) -> Result<Var> {
        let h = pointwise(tape, &self.params, map, "proj.0", z)?;
        let h = act(tape, h, self.config.activation);
        pointwise(tape, &self.params, map, "proj.1", h)
    }

    pub fn forward_with(&self, tape: &mut Tape, map: &dyn WeightMap, x: Var) -> Result<Var> {
        let z0 = self.lift(tape, map, x)?;
        let zl = self.body(tape, map, z0)?;
        self.project(tape, map, zl)
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        self.forward_with(tape, &Plain, x)
    }

    /// Forward pass without gradient bookkeeping beyond a scratch tape.
    pub fn predict(&self, x: &GridField) -> Result<GridField> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.to_tensor());
        let y = self.forward(&mut tape, xv)?;
        GridField::from_tensor(tape.value(y).clone())
    }
}
