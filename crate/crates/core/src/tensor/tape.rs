//! Reverse-mode automatic differentiation over an explicit operation tape.
//!
//! Every operation appends one node holding its output value. `backward`
//! walks the nodes from the loss back to the first recorded node, so the
//! traversal order is exactly the reverse of the recording order.

use std::cell::RefCell;
use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;

use super::fft;
use super::params::{ParamId, ParamStore};
use super::Tensor;
use crate::error::{shape_err, Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Precomputed partial DFT matrices for one grid size and mode selection.
///
/// Rows keep the frequency indices `0..ceil(m/2)` and `n-floor(m/2)..n`,
/// i.e. the low-frequency corner blocks of the unshifted spectrum.
#[derive(Debug)]
pub struct SpectralBasis {
    height: usize,
    width: usize,
    rows: Vec<usize>,
    cols: Vec<usize>,
    eh_re: Vec<f64>,
    eh_im: Vec<f64>,
    ew_re: Vec<f64>,
    ew_im: Vec<f64>,
}

thread_local! {
    static BASES: RefCell<HashMap<(usize, usize, usize, usize), Arc<SpectralBasis>>> =
        RefCell::new(HashMap::new());
}

/// Frequency indices kept when retaining `modes` frequencies on an axis of length `n`.
pub fn retained_indices(n: usize, modes: usize) -> Vec<usize> {
    let low = modes.div_ceil(2);
    let high = modes / 2;
    (0..low).chain(n - high..n).collect()
}

impl SpectralBasis {
    pub fn shared(
        height: usize,
        width: usize,
        modes_h: usize,
        modes_w: usize,
    ) -> Result<Arc<Self>> {
        if modes_h == 0 || modes_w == 0 || modes_h > height || modes_w > width {
            return Err(Error::InvalidArgument(format!(
                "modes {modes_h}x{modes_w} do not fit a {height}x{width} grid"
            )));
        }
        Ok(BASES.with(|b| {
            b.borrow_mut()
                .entry((height, width, modes_h, modes_w))
                .or_insert_with(|| Arc::new(Self::build(height, width, modes_h, modes_w)))
                .clone()
        }))
    }

    fn build(height: usize, width: usize, modes_h: usize, modes_w: usize) -> Self {
        let rows = retained_indices(height, modes_h);
        let cols = retained_indices(width, modes_w);
        let table = |freqs: &[usize], n: usize| {
            let mut re = Vec::with_capacity(freqs.len() * n);
            let mut im = Vec::with_capacity(freqs.len() * n);
            for &k in freqs {
                for p in 0..n {
                    // reduce k*p mod n first so the angle stays exact for large grids
                    let theta = -2.0 * PI * ((k * p) % n) as f64 / n as f64;
                    re.push(theta.cos());
                    im.push(theta.sin());
                }
            }
            (re, im)
        };
        let (eh_re, eh_im) = table(&rows, height);
        let (ew_re, ew_im) = table(&cols, width);
        Self {
            height,
            width,
            rows,
            cols,
            eh_re,
            eh_im,
            ew_re,
            ew_im,
        }
    }

    pub fn rows(&self) -> &[usize] {
        &self.rows
    }

    pub fn cols(&self) -> &[usize] {
        &self.cols
    }

    fn modes(&self) -> (usize, usize) {
        (self.rows.len(), self.cols.len())
    }

    /// Retained block of the unnormalized forward DFT of a real plane.
    fn forward(&self, plane: &[f64], out: &mut [Complex64]) {
        let (h, w) = (self.height, self.width);
        let (mh, mw) = self.modes();
        let mut t_re = vec![0.0; h * mw];
        let mut t_im = vec![0.0; h * mw];
        for y in 0..h {
            let row = &plane[y * w..(y + 1) * w];
            for b in 0..mw {
                let er = &self.ew_re[b * w..(b + 1) * w];
                let ei = &self.ew_im[b * w..(b + 1) * w];
                let mut sr = 0.0;
                let mut si = 0.0;
                for x in 0..w {
                    sr += row[x] * er[x];
                    si += row[x] * ei[x];
                }
                t_re[y * mw + b] = sr;
                t_im[y * mw + b] = si;
            }
        }
        for a in 0..mh {
            let hr = &self.eh_re[a * h..(a + 1) * h];
            let hi = &self.eh_im[a * h..(a + 1) * h];
            for b in 0..mw {
                let mut sr = 0.0;
                let mut si = 0.0;
                for y in 0..h {
                    let (tr, ti) = (t_re[y * mw + b], t_im[y * mw + b]);
                    sr += hr[y] * tr - hi[y] * ti;
                    si += hr[y] * ti + hi[y] * tr;
                }
                out[a * mw + b] = Complex64::new(sr, si);
            }
        }
    }

    /// Real part of the unnormalized inverse DFT of a spectrum supported on
    /// the retained block.
    fn inverse_real(&self, spec: &[Complex64], out: &mut [f64]) {
        let (h, w) = (self.height, self.width);
        let (mh, mw) = self.modes();
        let mut u_re = vec![0.0; h * mw];
        let mut u_im = vec![0.0; h * mw];
        for a in 0..mh {
            let hr = &self.eh_re[a * h..(a + 1) * h];
            let hi = &self.eh_im[a * h..(a + 1) * h];
            for y in 0..h {
                // conj(e_h) * Y
                let (cr, ci) = (hr[y], -hi[y]);
                for b in 0..mw {
                    let s = spec[a * mw + b];
                    u_re[y * mw + b] += cr * s.re - ci * s.im;
                    u_im[y * mw + b] += cr * s.im + ci * s.re;
                }
            }
        }
        out.iter_mut().for_each(|v| *v = 0.0);
        for y in 0..h {
            let row = &mut out[y * w..(y + 1) * w];
            for b in 0..mw {
                let ur = u_re[y * mw + b];
                let ui = u_im[y * mw + b];
                let er = &self.ew_re[b * w..(b + 1) * w];
                let ei = &self.ew_im[b * w..(b + 1) * w];
                // Re(conj(e_w) * u) = e_re*u_re + e_im*u_im
                for x in 0..w {
                    row[x] += er[x] * ur + ei[x] * ui;
                }
            }
        }
    }
}

enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    Sum(Var),
    SumSquares(Var),
    WeightedSumSquares(Var, Arc<[f64]>),
    Gelu(Var),
    ChannelMix {
        w: Var,
        x: Var,
        b: Option<Var>,
    },
    MatMul(Var, Var),
    SpectralConv {
        x: Var,
        r: Var,
        basis: Arc<SpectralBasis>,
        spectrum: Vec<Complex64>,
    },
    Fft2(Var),
    Ifft2(Var),
    RealPart(Var),
    GridGrad(Var),
    Binarize(Var),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Recorded computation graph. One tape serves one forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients of a scalar loss with respect to every recorded node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

// tanh through exp; the libm tanh dominated forward time
fn fast_tanh(u: f64) -> f64 {
    1.0 - 2.0 / ((2.0 * u).exp() + 1.0)
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + fast_tanh(GELU_K * (x + GELU_C * x * x * x)))
}

fn gelu_grad(x: f64) -> f64 {
    let t = fast_tanh(GELU_K * (x + GELU_C * x * x * x));
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

/// Finite-difference derivative along one axis of a plane: central in the
/// interior, one-sided at the two boundaries, spacing `1/(n-1)`.
fn axis_diff(plane: &[f64], h: usize, w: usize, along_rows: bool, out: &mut [f64]) {
    let (n, stride, lines, line_stride) = if along_rows {
        (h, w, w, 1)
    } else {
        (w, 1, h, w)
    };
    if n < 2 {
        out.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let inv = (n - 1) as f64;
    for line in 0..lines {
        let base = line * line_stride;
        let at = |i: usize| base + i * stride;
        out[at(0)] = (plane[at(1)] - plane[at(0)]) * inv;
        out[at(n - 1)] = (plane[at(n - 1)] - plane[at(n - 2)]) * inv;
        for i in 1..n - 1 {
            out[at(i)] = (plane[at(i + 1)] - plane[at(i - 1)]) * 0.5 * inv;
        }
    }
}

/// Adjoint of [`axis_diff`]; accumulates into `out`.
fn axis_diff_adjoint(g: &[f64], h: usize, w: usize, along_rows: bool, out: &mut [f64]) {
    let (n, stride, lines, line_stride) = if along_rows {
        (h, w, w, 1)
    } else {
        (w, 1, h, w)
    };
    if n < 2 {
        return;
    }
    let inv = (n - 1) as f64;
    for line in 0..lines {
        let base = line * line_stride;
        let at = |i: usize| base + i * stride;
        let g0 = g[at(0)] * inv;
        out[at(1)] += g0;
        out[at(0)] -= g0;
        let gn = g[at(n - 1)] * inv;
        out[at(n - 1)] += gn;
        out[at(n - 2)] -= gn;
        for i in 1..n - 1 {
            let gi = g[at(i)] * 0.5 * inv;
            out[at(i + 1)] += gi;
            out[at(i - 1)] -= gi;
        }
    }
}

/// Spatial gradient of every channel of a `[c, h, w]` array, returned as
/// `[2, c, h, w]` with the row derivative first.
pub fn grid_gradient(data: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let plane = h * w;
    let mut out = vec![0.0; 2 * c * plane];
    for ch in 0..c {
        let src = &data[ch * plane..(ch + 1) * plane];
        axis_diff(src, h, w, true, &mut out[ch * plane..(ch + 1) * plane]);
        let off = c * plane + ch * plane;
        axis_diff(src, h, w, false, &mut out[off..off + plane]);
    }
    out
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn complex_view(data: &[f64]) -> Vec<Complex64> {
    data.chunks_exact(2)
        .map(|p| Complex64::new(p[0], p[1]))
        .collect()
}

fn flatten_complex(data: &[Complex64], out: &mut Vec<f64>) {
    for c in data {
        out.push(c.re);
        out.push(c.im);
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drop every recorded node so the tape can be reused.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.consumed = false;
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let e = store.get(id);
        let t =
            Tensor::new(e.shape.clone(), e.value.clone()).expect("store keeps shapes consistent");
        self.push(t, Op::Param(id))
    }

    pub fn param_named(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        Ok(self.param(store, store.require(name)?))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.val(a), self.val(b), "add")?;
        let data = self
            .val(a)
            .data()
            .iter()
            .zip(self.val(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(self.val(a).shape().to_vec(), data)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.val(a), self.val(b), "sub")?;
        let data = self
            .val(a)
            .data()
            .iter()
            .zip(self.val(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let t = Tensor::new(self.val(a).shape().to_vec(), data)?;
        Ok(self.push(t, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.val(a), self.val(b), "mul")?;
        let data = self
            .val(a)
            .data()
            .iter()
            .zip(self.val(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(self.val(a).shape().to_vec(), data)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let src = self.val(a);
        let t = Tensor {
            shape: src.shape().to_vec(),
            data: src.data().iter().map(|x| x * factor).collect(),
        };
        self.push(t, Op::Scale(a, factor))
    }

    /// Multiply every element of `x` by the single value held in `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self
            .val(s)
            .item()
            .ok_or_else(|| shape_err("mul_scalar needs a one-element factor"))?;
        let src = self.val(x);
        let t = Tensor {
            shape: src.shape().to_vec(),
            data: src.data().iter().map(|v| v * sv).collect(),
        };
        Ok(self.push(t, Op::MulScalar(x, s)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.val(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let s = self.val(a).data().iter().map(|v| v * v).sum();
        self.push(Tensor::scalar(s), Op::SumSquares(a))
    }

    /// `Σ wᵢ·aᵢ²` with constant weights.
    pub fn weighted_sum_squares(&mut self, a: Var, weights: Arc<[f64]>) -> Result<Var> {
        if weights.len() != self.val(a).len() {
            return Err(shape_err("weighted_sum_squares weight length"));
        }
        let s = self
            .val(a)
            .data()
            .iter()
            .zip(weights.iter())
            .map(|(v, w)| w * v * v)
            .sum();
        Ok(self.push(Tensor::scalar(s), Op::WeightedSumSquares(a, weights)))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let src = self.val(a);
        let t = Tensor {
            shape: src.shape().to_vec(),
            data: src.data().iter().map(|&v| gelu(v)).collect(),
        };
        self.push(t, Op::Gelu(a))
    }

    /// Pointwise channel mixing: `out[o, p] = Σᵢ w[o, i]·x[i, p] + b[o]`.
    pub fn channel_mix(&mut self, w: Var, x: Var, b: Option<Var>) -> Result<Var> {
        let (wt, xt) = (self.val(w), self.val(x));
        let (co, ci) = match *wt.shape() {
            [co, ci] => (co, ci),
            _ => {
                return Err(shape_err(format!(
                    "channel_mix weight must be 2-D, got {:?}",
                    wt.shape()
                )))
            }
        };
        if xt.shape().first() != Some(&ci) {
            return Err(shape_err(format!(
                "channel_mix expects {} input channels, got {:?}",
                ci,
                xt.shape()
            )));
        }
        let p = xt.len() / ci;
        let mut out = vec![0.0; co * p];
        let (wd, xd) = (wt.data(), xt.data());
        for o in 0..co {
            let row = &mut out[o * p..(o + 1) * p];
            for i in 0..ci {
                let wv = wd[o * ci + i];
                if wv == 0.0 {
                    continue;
                }
                let src = &xd[i * p..(i + 1) * p];
                for (r, s) in row.iter_mut().zip(src) {
                    *r += wv * s;
                }
            }
        }
        if let Some(b) = b {
            let bt = self.val(b);
            if bt.len() != co {
                return Err(shape_err(format!(
                    "channel_mix bias needs {co} values, got {}",
                    bt.len()
                )));
            }
            for o in 0..co {
                let bv = bt.data()[o];
                out[o * p..(o + 1) * p].iter_mut().for_each(|v| *v += bv);
            }
        }
        let mut shape = xt.shape().to_vec();
        shape[0] = co;
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::ChannelMix { w, x, b }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.val(a), self.val(b));
        let (k, r, d) = match (at.shape(), bt.shape()) {
            ([k, r], [r2, d]) if r == r2 => (*k, *r, *d),
            _ => {
                return Err(shape_err(format!(
                    "matmul {:?} x {:?}",
                    at.shape(),
                    bt.shape()
                )))
            }
        };
        let mut out = vec![0.0; k * d];
        for i in 0..k {
            for j in 0..r {
                let av = at.data()[i * r + j];
                for c in 0..d {
                    out[i * d + c] += av * bt.data()[j * d + c];
                }
            }
        }
        let t = Tensor::new(vec![k, d], out)?;
        Ok(self.push(t, Op::MatMul(a, b)))
    }

    /// Spectral convolution on a `[ci, h, w]` field with complex weights
    /// stored as `[ci, co, mh, mw, 2]`: forward DFT, truncation to the
    /// retained corner blocks, per-mode channel mixing, inverse DFT, real part.
    pub fn spectral_conv(&mut self, x: Var, r: Var) -> Result<Var> {
        let (xt, rt) = (self.val(x), self.val(r));
        let (ci, h, w) = match *xt.shape() {
            [ci, h, w] => (ci, h, w),
            _ => {
                return Err(shape_err(format!(
                    "spectral_conv input must be [c, h, w], got {:?}",
                    xt.shape()
                )))
            }
        };
        let (rci, co, mh, mw) = match *rt.shape() {
            [a, b, c, d, 2] => (a, b, c, d),
            _ => {
                return Err(shape_err(format!(
                    "spectral weights must be [ci, co, mh, mw, 2], got {:?}",
                    rt.shape()
                )))
            }
        };
        if rci != ci {
            return Err(shape_err(format!(
                "spectral weights expect {rci} channels, input has {ci}"
            )));
        }
        let basis = SpectralBasis::shared(h, w, mh, mw)?;
        let plane = h * w;
        let modes = mh * mw;
        let mut spectrum = vec![Complex64::new(0.0, 0.0); ci * modes];
        for i in 0..ci {
            basis.forward(
                &xt.data()[i * plane..(i + 1) * plane],
                &mut spectrum[i * modes..(i + 1) * modes],
            );
        }
        let rd = rt.data();
        let norm = 1.0 / plane as f64;
        let mut out = vec![0.0; co * plane];
        let mut mixed = vec![Complex64::new(0.0, 0.0); modes];
        for o in 0..co {
            mixed.iter_mut().for_each(|m| *m = Complex64::new(0.0, 0.0));
            for i in 0..ci {
                let base = (i * co + o) * modes;
                let xs = &spectrum[i * modes..(i + 1) * modes];
                for k in 0..modes {
                    let rv = Complex64::new(rd[2 * (base + k)], rd[2 * (base + k) + 1]);
                    mixed[k] += xs[k] * rv;
                }
            }
            let dst = &mut out[o * plane..(o + 1) * plane];
            basis.inverse_real(&mixed, dst);
            dst.iter_mut().for_each(|v| *v *= norm);
        }
        let t = Tensor::new(vec![co, h, w], out)?;
        Ok(self.push(
            t,
            Op::SpectralConv {
                x,
                r,
                basis,
                spectrum,
            },
        ))
    }

    /// Unnormalized 2-D DFT of each channel of a real `[c, h, w]` array,
    /// returned as `[c, h, w, 2]` (real, imaginary).
    pub fn fft2(&mut self, a: Var) -> Result<Var> {
        let src = self.val(a);
        let (c, h, w) = match *src.shape() {
            [c, h, w] => (c, h, w),
            _ => {
                return Err(shape_err(format!(
                    "fft2 needs [c, h, w], got {:?}",
                    src.shape()
                )))
            }
        };
        let mut out = Vec::with_capacity(2 * src.len());
        for ch in 0..c {
            let spec = fft::fft2_real(&src.data()[ch * h * w..(ch + 1) * h * w], h, w)?;
            flatten_complex(&spec, &mut out);
        }
        let t = Tensor::new(vec![c, h, w, 2], out)?;
        Ok(self.push(t, Op::Fft2(a)))
    }

    /// Normalized inverse DFT of a complex `[c, h, w, 2]` array.
    pub fn ifft2(&mut self, a: Var) -> Result<Var> {
        let src = self.val(a);
        let (c, h, w) = match *src.shape() {
            [c, h, w, 2] => (c, h, w),
            _ => {
                return Err(shape_err(format!(
                    "ifft2 needs [c, h, w, 2], got {:?}",
                    src.shape()
                )))
            }
        };
        let mut out = Vec::with_capacity(src.len());
        for ch in 0..c {
            let spec = complex_view(&src.data()[2 * ch * h * w..2 * (ch + 1) * h * w]);
            flatten_complex(&fft::ifft2(&spec, h, w)?, &mut out);
        }
        let t = Tensor::new(src.shape().to_vec(), out)?;
        Ok(self.push(t, Op::Ifft2(a)))
    }

    /// Real part of a complex array whose last axis has length 2.
    pub fn real_part(&mut self, a: Var) -> Result<Var> {
        let src = self.val(a);
        if src.shape().last() != Some(&2) {
            return Err(shape_err("real_part needs a trailing axis of length 2"));
        }
        let shape = src.shape()[..src.shape().len() - 1].to_vec();
        let data = src.data().iter().step_by(2).copied().collect();
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::RealPart(a)))
    }

    /// Spatial gradient of a `[c, h, w]` array, shape `[2, c, h, w]`.
    pub fn grid_grad(&mut self, a: Var) -> Result<Var> {
        let src = self.val(a);
        let (c, h, w) = match *src.shape() {
            [c, h, w] => (c, h, w),
            _ => {
                return Err(shape_err(format!(
                    "grid_grad needs [c, h, w], got {:?}",
                    src.shape()
                )))
            }
        };
        let t = Tensor::new(vec![2, c, h, w], grid_gradient(src.data(), c, h, w))?;
        Ok(self.push(t, Op::GridGrad(a)))
    }

    /// Hard threshold at `threshold` with a straight-through gradient.
    pub fn binarize(&mut self, a: Var, threshold: f64) -> Var {
        let src = self.val(a);
        let t = Tensor {
            shape: src.shape().to_vec(),
            data: src
                .data()
                .iter()
                .map(|&v| if v >= threshold { 1.0 } else { 0.0 })
                .collect(),
        };
        self.push(t, Op::Binarize(a))
    }

    /// Gradients of `loss` with respect to every node. Consumes the tape.
    pub fn gradients(&mut self, loss: Var) -> Result<Gradients> {
        Ok(Gradients {
            grads: self.run_backward(loss)?,
        })
    }

    /// Accumulate the gradient of `loss` into the trainable entries of
    /// `store`. Frozen entries are left untouched (zero after `zero_grad`).
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.run_backward(loss)?;
        for (node, g) in self.nodes.iter().zip(grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, g) {
                store.accumulate_grad(*id, &g);
            }
        }
        Ok(())
    }

    fn run_backward(&mut self, loss: Var) -> Result<Vec<Option<Vec<f64>>>> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::InvalidArgument(
                "loss is not recorded on this tape".into(),
            ));
        }
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(grads)
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; len])
        }
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                for (d, s) in acc(grads, *a, g.len()).iter_mut().zip(g) {
                    *d += s;
                }
                for (d, s) in acc(grads, *b, g.len()).iter_mut().zip(g) {
                    *d += s;
                }
            }
            Op::Sub(a, b) => {
                for (d, s) in acc(grads, *a, g.len()).iter_mut().zip(g) {
                    *d += s;
                }
                for (d, s) in acc(grads, *b, g.len()).iter_mut().zip(g) {
                    *d -= s;
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.val(*a).data(), self.val(*b).data());
                let ga = acc(grads, *a, g.len());
                for i in 0..g.len() {
                    ga[i] += g[i] * bv[i];
                }
                let gb = acc(grads, *b, g.len());
                for i in 0..g.len() {
                    gb[i] += g[i] * av[i];
                }
            }
            Op::Scale(a, f) => {
                for (d, s) in acc(grads, *a, g.len()).iter_mut().zip(g) {
                    *d += f * s;
                }
            }
            Op::MulScalar(x, s) => {
                let sv = self.val(*s).data()[0];
                let xv = self.val(*x).data();
                let dot: f64 = g.iter().zip(xv).map(|(a, b)| a * b).sum();
                for (d, gi) in acc(grads, *x, g.len()).iter_mut().zip(g) {
                    *d += sv * gi;
                }
                acc(grads, *s, 1)[0] += dot;
            }
            Op::Sum(a) => {
                let n = self.val(*a).len();
                acc(grads, *a, n).iter_mut().for_each(|d| *d += g[0]);
            }
            Op::SumSquares(a) => {
                let av = self.val(*a).data();
                let ga = acc(grads, *a, av.len());
                for i in 0..av.len() {
                    ga[i] += 2.0 * g[0] * av[i];
                }
            }
            Op::WeightedSumSquares(a, w) => {
                let av = self.val(*a).data();
                let ga = acc(grads, *a, av.len());
                for i in 0..av.len() {
                    ga[i] += 2.0 * g[0] * w[i] * av[i];
                }
            }
            Op::Gelu(a) => {
                let av = self.val(*a).data();
                let ga = acc(grads, *a, av.len());
                for i in 0..av.len() {
                    ga[i] += g[i] * gelu_grad(av[i]);
                }
            }
            Op::ChannelMix { w, x, b } => {
                let (wt, xt) = (self.val(*w), self.val(*x));
                let (co, ci) = (wt.shape()[0], wt.shape()[1]);
                let p = xt.len() / ci;
                let (wd, xd) = (wt.data(), xt.data());
                {
                    let gx = acc(grads, *x, xd.len());
                    for o in 0..co {
                        let go = &g[o * p..(o + 1) * p];
                        for i in 0..ci {
                            let wv = wd[o * ci + i];
                            if wv == 0.0 {
                                continue;
                            }
                            for (d, s) in gx[i * p..(i + 1) * p].iter_mut().zip(go) {
                                *d += wv * s;
                            }
                        }
                    }
                }
                {
                    let gw = acc(grads, *w, wd.len());
                    for o in 0..co {
                        let go = &g[o * p..(o + 1) * p];
                        for i in 0..ci {
                            let xi = &xd[i * p..(i + 1) * p];
                            gw[o * ci + i] += go.iter().zip(xi).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                }
                if let Some(b) = b {
                    let gb = acc(grads, *b, co);
                    for o in 0..co {
                        gb[o] += g[o * p..(o + 1) * p].iter().sum::<f64>();
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (at, bt) = (self.val(*a), self.val(*b));
                let (k, r) = (at.shape()[0], at.shape()[1]);
                let d = bt.shape()[1];
                let (ad, bd) = (at.data(), bt.data());
                {
                    let ga = acc(grads, *a, ad.len());
                    for i in 0..k {
                        for j in 0..r {
                            let mut s = 0.0;
                            for c in 0..d {
                                s += g[i * d + c] * bd[j * d + c];
                            }
                            ga[i * r + j] += s;
                        }
                    }
                }
                let gb = acc(grads, *b, bd.len());
                for i in 0..k {
                    for j in 0..r {
                        let av = ad[i * r + j];
                        for c in 0..d {
                            gb[j * d + c] += av * g[i * d + c];
                        }
                    }
                }
            }
            Op::SpectralConv {
                x,
                r,
                basis,
                spectrum,
            } => {
                let (xt, rt) = (self.val(*x), self.val(*r));
                let (ci, h, w) = (xt.shape()[0], xt.shape()[1], xt.shape()[2]);
                let co = rt.shape()[1];
                let modes = rt.shape()[2] * rt.shape()[3];
                let plane = h * w;
                let norm = 1.0 / plane as f64;
                let rd = rt.data();
                let mut g_mixed = vec![Complex64::new(0.0, 0.0); co * modes];
                for o in 0..co {
                    let dst = &mut g_mixed[o * modes..(o + 1) * modes];
                    basis.forward(&g[o * plane..(o + 1) * plane], dst);
                    dst.iter_mut().for_each(|v| *v *= norm);
                }
                {
                    let gr = acc(grads, *r, rd.len());
                    for i in 0..ci {
                        let xs = &spectrum[i * modes..(i + 1) * modes];
                        for o in 0..co {
                            let base = (i * co + o) * modes;
                            let gy = &g_mixed[o * modes..(o + 1) * modes];
                            for k in 0..modes {
                                let v = xs[k].conj() * gy[k];
                                gr[2 * (base + k)] += v.re;
                                gr[2 * (base + k) + 1] += v.im;
                            }
                        }
                    }
                }
                let gx = acc(grads, *x, xt.len());
                let mut g_spec = vec![Complex64::new(0.0, 0.0); modes];
                let mut plane_buf = vec![0.0; plane];
                for i in 0..ci {
                    g_spec
                        .iter_mut()
                        .for_each(|v| *v = Complex64::new(0.0, 0.0));
                    for o in 0..co {
                        let base = (i * co + o) * modes;
                        let gy = &g_mixed[o * modes..(o + 1) * modes];
                        for k in 0..modes {
                            let rv = Complex64::new(rd[2 * (base + k)], -rd[2 * (base + k) + 1]);
                            g_spec[k] += rv * gy[k];
                        }
                    }
                    basis.inverse_real(&g_spec, &mut plane_buf);
                    for (d, s) in gx[i * plane..(i + 1) * plane].iter_mut().zip(&plane_buf) {
                        *d += s;
                    }
                }
            }
            Op::Fft2(a) => {
                let (c, h, w) = {
                    let s = self.val(*a).shape();
                    (s[0], s[1], s[2])
                };
                let ga = acc(grads, *a, c * h * w);
                let scale = (h * w) as f64;
                for ch in 0..c {
                    let gs = complex_view(&g[2 * ch * h * w..2 * (ch + 1) * h * w]);
                    let back = fft::ifft2(&gs, h, w).expect("finite gradient");
                    for (d, v) in ga[ch * h * w..(ch + 1) * h * w].iter_mut().zip(&back) {
                        *d += scale * v.re;
                    }
                }
            }
            Op::Ifft2(a) => {
                let (c, h, w) = {
                    let s = self.val(*a).shape();
                    (s[0], s[1], s[2])
                };
                let ga = acc(grads, *a, 2 * c * h * w);
                let scale = 1.0 / (h * w) as f64;
                for ch in 0..c {
                    let gs = complex_view(&g[2 * ch * h * w..2 * (ch + 1) * h * w]);
                    let fwd = fft::fft2(&gs, h, w).expect("finite gradient");
                    for (k, v) in fwd.iter().enumerate() {
                        ga[2 * (ch * h * w + k)] += scale * v.re;
                        ga[2 * (ch * h * w + k) + 1] += scale * v.im;
                    }
                }
            }
            Op::RealPart(a) => {
                let ga = acc(grads, *a, 2 * g.len());
                for (i, gi) in g.iter().enumerate() {
                    ga[2 * i] += gi;
                }
            }
            Op::GridGrad(a) => {
                let s = self.val(*a).shape();
                let (c, h, w) = (s[0], s[1], s[2]);
                let plane = h * w;
                let ga = acc(grads, *a, c * plane);
                for ch in 0..c {
                    let dst = &mut ga[ch * plane..(ch + 1) * plane];
                    axis_diff_adjoint(&g[ch * plane..(ch + 1) * plane], h, w, true, dst);
                    let off = c * plane + ch * plane;
                    axis_diff_adjoint(&g[off..off + plane], h, w, false, dst);
                }
            }
            Op::Binarize(a) => {
                for (d, s) in acc(grads, *a, g.len()).iter_mut().zip(g) {
                    *d += s;
                }
            }
        }
    }
}
