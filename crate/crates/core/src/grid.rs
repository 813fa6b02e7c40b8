//! Periodic sample lattices standing in for compactly supported functions on R^N.
//!
//! Lattice points sit at `x_i = -W + i*h` on every axis, so the origin is a
//! lattice point and offsets are read in minimal-image convention.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type C64 = Complex64;
pub type Point = [f64; 3];

const MAX_POINTS_1D: usize = 1 << 16;
const MAX_POINTS_2D: usize = 1024;
const MAX_POINTS_3D: usize = 128;

fn default_margin() -> f64 {
    0.1
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub dim: usize,
    pub box_half_width: f64,
    pub points_per_axis: usize,
    #[serde(default = "default_margin")]
    pub margin: f64,
}

impl GridSpec {
    pub fn new(dim: usize, box_half_width: f64, points_per_axis: usize, margin: f64) -> Result<Self> {
        let spec = GridSpec { dim, box_half_width, points_per_axis, margin };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.dim) {
            return Err(Error::InvalidGrid(format!("dim {} not in 1..=3", self.dim)));
        }
        if !(self.box_half_width.is_finite() && self.box_half_width > 0.0) {
            return Err(Error::InvalidGrid("box_half_width must be positive".into()));
        }
        let n = self.points_per_axis;
        if n < 32 || !n.is_power_of_two() {
            return Err(Error::InvalidGrid(format!("points_per_axis {n} must be a power of two >= 32")));
        }
        let cap = match self.dim {
            1 => MAX_POINTS_1D,
            2 => MAX_POINTS_2D,
            _ => MAX_POINTS_3D,
        };
        if n > cap {
            return Err(Error::InvalidGrid(format!("points_per_axis {n} exceeds cap {cap} for dim {}", self.dim)));
        }
        if !(self.margin > 0.0 && self.margin < 1.0) {
            return Err(Error::InvalidGrid("margin must lie in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn h(&self) -> f64 {
        2.0 * self.box_half_width / self.points_per_axis as f64
    }

    pub fn len(&self) -> usize {
        self.points_per_axis.pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn cell_volume(&self) -> f64 {
        self.h().powi(self.dim as i32)
    }

    pub fn coord(&self, i: usize) -> f64 {
        -self.box_half_width + i as f64 * self.h()
    }

    /// Minimal-image coordinate of offset index `j`.
    pub fn offset_coord(&self, j: usize) -> f64 {
        let n = self.points_per_axis;
        if j < n / 2 {
            j as f64 * self.h()
        } else {
            (j as f64 - n as f64) * self.h()
        }
    }

    pub fn wavenumber(&self, j: usize) -> f64 {
        let n = self.points_per_axis as i64;
        let m = if (j as i64) < n / 2 { j as i64 } else { j as i64 - n };
        std::f64::consts::PI / self.box_half_width * m as f64
    }

    pub fn unravel(&self, idx: usize) -> [usize; 3] {
        let n = self.points_per_axis;
        let mut out = [0usize; 3];
        let mut rem = idx;
        for d in (0..self.dim).rev() {
            out[d] = rem % n;
            rem /= n;
        }
        out
    }

    pub fn ravel(&self, ix: [usize; 3]) -> usize {
        let n = self.points_per_axis;
        let mut idx = 0;
        for &i in ix.iter().take(self.dim) {
            idx = idx * n + i;
        }
        idx
    }

    pub fn point(&self, idx: usize) -> Point {
        let ix = self.unravel(idx);
        let mut x = [0.0; 3];
        for d in 0..self.dim {
            x[d] = self.coord(ix[d]);
        }
        x
    }

    pub fn wave_vector(&self, idx: usize) -> Point {
        let ix = self.unravel(idx);
        let mut k = [0.0; 3];
        for d in 0..self.dim {
            k[d] = self.wavenumber(ix[d]);
        }
        k
    }

    pub fn wrap(&self, i: i64) -> usize {
        i.rem_euclid(self.points_per_axis as i64) as usize
    }

    /// Index of the lattice point nearest to `x` along one axis, clamped to the box.
    pub fn nearest_index(&self, x: f64) -> usize {
        let i = ((x + self.box_half_width) / self.h()).round();
        i.clamp(0.0, (self.points_per_axis - 1) as f64) as usize
    }

    pub fn interior_half_width(&self) -> f64 {
        (1.0 - self.margin) * self.box_half_width
    }

    pub fn with_points(&self, points_per_axis: usize) -> Result<Self> {
        GridSpec::new(self.dim, self.box_half_width, points_per_axis, self.margin)
    }

    pub fn refined(&self) -> Result<Self> {
        self.with_points(2 * self.points_per_axis)
    }

    pub fn unit_ball_volume(&self) -> f64 {
        unit_ball_volume(self.dim)
    }
}

pub fn unit_ball_volume(dim: usize) -> f64 {
    match dim {
        1 => 2.0,
        2 => std::f64::consts::PI,
        _ => 4.0 / 3.0 * std::f64::consts::PI,
    }
}

pub fn dist2(a: &Point, b: &Point, dim: usize) -> f64 {
    (0..dim).map(|d| (a[d] - b[d]).powi(2)).sum()
}

/// Multi-index alpha with `order = sum(entries)`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MultiIndex(pub Vec<usize>);

impl MultiIndex {
    pub fn zero(dim: usize) -> Self {
        MultiIndex(vec![0; dim])
    }

    pub fn unit(dim: usize, axis: usize) -> Self {
        let mut e = vec![0; dim];
        e[axis] = 1;
        MultiIndex(e)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn order(&self) -> usize {
        self.0.iter().sum()
    }

    /// All multi-indices of exactly `order`, lexicographically descending.
    pub fn of_order(dim: usize, order: usize) -> Vec<MultiIndex> {
        fn rec(dim: usize, left: usize, prefix: &mut Vec<usize>, out: &mut Vec<MultiIndex>) {
            if prefix.len() + 1 == dim {
                prefix.push(left);
                out.push(MultiIndex(prefix.clone()));
                prefix.pop();
                return;
            }
            for e in (0..=left).rev() {
                prefix.push(e);
                rec(dim, left - e, prefix, out);
                prefix.pop();
            }
        }
        let mut out = Vec::new();
        rec(dim, order, &mut Vec::with_capacity(dim), &mut out);
        out
    }

    /// All multi-indices with order at most `max_order`, by total degree then lexicographic.
    pub fn up_to(dim: usize, max_order: usize) -> Vec<MultiIndex> {
        (0..=max_order).flat_map(|k| MultiIndex::of_order(dim, k)).collect()
    }

    pub fn le(&self, other: &MultiIndex) -> bool {
        self.0.iter().zip(&other.0).all(|(a, b)| a <= b)
    }

    pub fn sub(&self, other: &MultiIndex) -> MultiIndex {
        MultiIndex(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }

    pub fn add(&self, other: &MultiIndex) -> MultiIndex {
        MultiIndex(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }

    pub fn factorial(&self) -> f64 {
        self.0.iter().map(|&a| factorial(a)).product()
    }

    /// Product of binomial coefficients C(alpha_i, beta_i).
    pub fn binomial(&self, beta: &MultiIndex) -> f64 {
        self.0.iter().zip(&beta.0).map(|(&a, &b)| factorial(a) / (factorial(b) * factorial(a - b))).product()
    }

    pub fn monomial(&self, z: &Point) -> f64 {
        self.0.iter().enumerate().map(|(d, &e)| z[d].powi(e as i32)).product()
    }
}

pub fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Support {
    pub center: Point,
    pub radius: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridFunction {
    pub spec: GridSpec,
    pub channels: usize,
    /// Channel-major samples, `channels * n^N` entries.
    pub values: Vec<C64>,
    pub support: Option<Support>,
}

impl GridFunction {
    pub fn zeros(spec: GridSpec, channels: usize) -> Self {
        GridFunction { spec, channels, values: vec![C64::default(); channels * spec.len()], support: None }
    }

    pub fn from_values(spec: GridSpec, channels: usize, values: Vec<C64>) -> Result<Self> {
        if channels == 0 || values.len() != channels * spec.len() {
            return Err(Error::InvalidParameter(format!(
                "expected {} samples for {channels} channel(s), got {}",
                channels * spec.len(),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
            return Err(Error::InvalidParameter("non-finite sample".into()));
        }
        Ok(GridFunction { spec, channels, values, support: None })
    }

    pub fn from_fn(spec: GridSpec, f: impl Fn(&Point) -> C64) -> Self {
        let values = (0..spec.len()).map(|i| f(&spec.point(i))).collect();
        GridFunction { spec, channels: 1, values, support: None }
    }

    pub fn from_channels(spec: GridSpec, channels: Vec<Vec<C64>>) -> Result<Self> {
        let c = channels.len();
        GridFunction::from_values(spec, c, channels.into_iter().flatten().collect())
    }

    pub fn with_support(mut self, support: Option<Support>) -> Self {
        self.support = support;
        self
    }

    pub fn channel(&self, c: usize) -> &[C64] {
        let n = self.spec.len();
        &self.values[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [C64] {
        let n = self.spec.len();
        &mut self.values[c * n..(c + 1) * n]
    }

    pub fn single(&self, c: usize) -> GridFunction {
        GridFunction { spec: self.spec, channels: 1, values: self.channel(c).to_vec(), support: self.support }
    }

    /// Euclidean magnitude over channels at lattice index `i`.
    pub fn magnitude(&self, i: usize) -> f64 {
        if self.channels == 1 {
            return self.values[i].norm();
        }
        let n = self.spec.len();
        (0..self.channels).map(|c| self.values[c * n + i].norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn magnitudes(&self) -> Vec<f64> {
        (0..self.spec.len()).map(|i| self.magnitude(i)).collect()
    }

    pub fn max_magnitude(&self) -> f64 {
        (0..self.spec.len()).map(|i| self.magnitude(i)).fold(0.0, f64::max)
    }

    pub fn scaled(&self, c: C64) -> GridFunction {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v *= c);
        out
    }

    fn check_compatible(&self, other: &GridFunction) -> Result<()> {
        if self.spec != other.spec {
            return Err(Error::InvalidParameter("grid mismatch".into()));
        }
        if self.channels != other.channels {
            return Err(Error::ChannelMismatch { expected: self.channels, got: other.channels });
        }
        Ok(())
    }

    pub fn add(&self, other: &GridFunction) -> Result<GridFunction> {
        self.check_compatible(other)?;
        let mut out = self.clone();
        out.values.iter_mut().zip(&other.values).for_each(|(a, b)| *a += b);
        out.support = merge_support(self.support, other.support, self.spec.dim);
        Ok(out)
    }

    pub fn sub(&self, other: &GridFunction) -> Result<GridFunction> {
        self.check_compatible(other)?;
        let mut out = self.clone();
        out.values.iter_mut().zip(&other.values).for_each(|(a, b)| *a -= b);
        out.support = merge_support(self.support, other.support, self.spec.dim);
        Ok(out)
    }

    /// Pointwise Hermitian pairing sum_c u_c conj(v_c), single channel out.
    pub fn pairing(&self, other: &GridFunction) -> Result<GridFunction> {
        self.check_compatible(other)?;
        let n = self.spec.len();
        let mut values = vec![C64::default(); n];
        for c in 0..self.channels {
            for (i, v) in values.iter_mut().enumerate() {
                *v += self.values[c * n + i] * other.values[c * n + i].conj();
            }
        }
        let support = match (self.support, other.support) {
            (Some(a), Some(b)) if a.radius <= b.radius => Some(a),
            (Some(_), Some(b)) => Some(b),
            (s, None) | (None, s) => s,
        };
        Ok(GridFunction { spec: self.spec, channels: 1, values, support })
    }

    /// Discrete L^2 inner product sum u conj(v) h^N over all channels.
    pub fn inner(&self, other: &GridFunction) -> Result<C64> {
        self.check_compatible(other)?;
        let s: C64 = self.values.iter().zip(&other.values).map(|(a, b)| a * b.conj()).sum();
        Ok(s * self.spec.cell_volume())
    }

    /// Largest magnitude outside the declared support, relative to the overall maximum.
    pub fn support_leakage(&self) -> f64 {
        let Some(s) = self.support else { return 0.0 };
        let max = self.max_magnitude();
        if max == 0.0 {
            return 0.0;
        }
        let r2 = s.radius * s.radius;
        let mut leak: f64 = 0.0;
        for i in 0..self.spec.len() {
            if dist2(&self.spec.point(i), &s.center, self.spec.dim) > r2 {
                leak = leak.max(self.magnitude(i));
            }
        }
        leak / max
    }

    /// Trigonometric interpolant of channel `c` differentiated by `alpha`, evaluated at `x`.
    pub fn eval_fourier(&self, c: usize, x: &Point, alpha: &MultiIndex) -> C64 {
        let spec = self.spec;
        let hat = forward(&spec, self.channel(c));
        let n = spec.points_per_axis;
        let w = spec.box_half_width;
        let mut acc = C64::default();
        for (idx, fh) in hat.iter().enumerate() {
            let ix = spec.unravel(idx);
            let mut factor = C64::new(1.0, 0.0);
            let mut phase = 0.0;
            let mut skip = false;
            for d in 0..spec.dim {
                let k = spec.wavenumber(ix[d]);
                let a = alpha.0[d];
                if ix[d] == n / 2 && a % 2 == 1 {
                    skip = true;
                    break;
                }
                factor *= C64::new(0.0, k).powu(a as u32);
                phase += k * (x[d] + w);
            }
            if !skip {
                acc += fh * factor * C64::from_polar(1.0, phase);
            }
        }
        acc / spec.len() as f64
    }
}

fn merge_support(a: Option<Support>, b: Option<Support>, dim: usize) -> Option<Support> {
    let (a, b) = (a?, b?);
    let d = dist2(&a.center, &b.center, dim).sqrt();
    if d + b.radius <= a.radius {
        return Some(a);
    }
    if d + a.radius <= b.radius {
        return Some(b);
    }
    Some(Support { center: a.center, radius: d + b.radius.max(a.radius) })
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plan(n: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            p.plan_fft_inverse(n)
        } else {
            p.plan_fft_forward(n)
        }
    })
}

/// In-place N-dimensional DFT; the inverse includes the 1/n^N factor.
pub(crate) fn fft_nd(spec: &GridSpec, data: &mut [C64], inverse: bool) {
    let n = spec.points_per_axis;
    let dim = spec.dim;
    let total = spec.len();
    let fft = plan(n, inverse);
    let mut scratch = vec![C64::default(); fft.get_inplace_scratch_len()];
    fft.process_with_scratch(data, &mut scratch);
    if dim > 1 {
        let mut block: Vec<C64> = Vec::new();
        for axis in 0..dim - 1 {
            let stride = n.pow((dim - 1 - axis) as u32);
            block.resize(n * stride, C64::default());
            for outer in 0..total / (n * stride) {
                let base = outer * n * stride;
                // Transpose the (n, stride) slab so each axis line is contiguous.
                for j in 0..n {
                    for inner in 0..stride {
                        block[inner * n + j] = data[base + j * stride + inner];
                    }
                }
                fft.process_with_scratch(&mut block, &mut scratch);
                for j in 0..n {
                    for inner in 0..stride {
                        data[base + j * stride + inner] = block[inner * n + j];
                    }
                }
            }
        }
    }
    if inverse {
        let s = 1.0 / total as f64;
        data.iter_mut().for_each(|v| *v *= s);
    }
}

pub(crate) fn forward(spec: &GridSpec, data: &[C64]) -> Vec<C64> {
    let mut out = data.to_vec();
    fft_nd(spec, &mut out, false);
    out
}

pub(crate) fn inverse(spec: &GridSpec, mut data: Vec<C64>) -> Vec<C64> {
    fft_nd(spec, &mut data, true);
    data
}

/// Applies a Fourier multiplier `m(xi)` to every channel.
pub fn apply_multiplier(f: &GridFunction, mult: impl Fn(&Point) -> C64) -> GridFunction {
    let spec = f.spec;
    let table: Vec<C64> = (0..spec.len()).map(|i| mult(&spec.wave_vector(i))).collect();
    let mut out = f.clone();
    for c in 0..f.channels {
        let mut hat = forward(&spec, f.channel(c));
        hat.iter_mut().zip(&table).for_each(|(a, m)| *a *= m);
        out.channel_mut(c).copy_from_slice(&inverse(&spec, hat));
    }
    out
}

/// Symbol of the spectral derivative, with the Nyquist mode dropped for odd orders.
pub(crate) fn derivative_symbol(spec: &GridSpec, alpha: &MultiIndex) -> Vec<C64> {
    let n = spec.points_per_axis;
    (0..spec.len())
        .map(|idx| {
            let ix = spec.unravel(idx);
            let mut s = C64::new(1.0, 0.0);
            for d in 0..spec.dim {
                let a = alpha.0[d];
                if a == 0 {
                    continue;
                }
                if ix[d] == n / 2 && a % 2 == 1 {
                    return C64::default();
                }
                s *= C64::new(0.0, spec.wavenumber(ix[d])).powu(a as u32);
            }
            s
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DerivMethod {
    #[default]
    Spectral,
    FiniteDifference,
}

pub fn derivative(f: &GridFunction, alpha: &MultiIndex, method: DerivMethod) -> Result<GridFunction> {
    if alpha.dim() != f.spec.dim {
        return Err(Error::InvalidParameter(format!("multi-index of length {} on a {}-D grid", alpha.dim(), f.spec.dim)));
    }
    if alpha.order() > 6 {
        return Err(Error::OrderTooHigh(alpha.order()));
    }
    if alpha.order() == 0 {
        return Ok(f.clone());
    }
    match method {
        DerivMethod::Spectral => {
            let spec = f.spec;
            let symbol = derivative_symbol(&spec, alpha);
            let mut out = f.clone();
            for c in 0..f.channels {
                let mut hat = forward(&spec, f.channel(c));
                hat.iter_mut().zip(&symbol).for_each(|(a, s)| *a *= s);
                out.channel_mut(c).copy_from_slice(&inverse(&spec, hat));
            }
            Ok(out)
        }
        DerivMethod::FiniteDifference => {
            let mut out = f.clone();
            for d in 0..f.spec.dim {
                let a = alpha.0[d];
                for _ in 0..a / 2 {
                    out = central_difference(&out, d, true);
                }
                if a % 2 == 1 {
                    out = central_difference(&out, d, false);
                }
            }
            Ok(out)
        }
    }
}

fn central_difference(f: &GridFunction, axis: usize, second: bool) -> GridFunction {
    let spec = f.spec;
    let h = spec.h();
    let n = spec.len();
    let mut out = f.clone();
    for c in 0..f.channels {
        let src = f.channel(c);
        let dst = &mut out.values[c * n..(c + 1) * n];
        for (i, slot) in dst.iter_mut().enumerate() {
            let mut ix = spec.unravel(i);
            let i0 = ix[axis] as i64;
            ix[axis] = spec.wrap(i0 + 1);
            let fp = src[spec.ravel(ix)];
            ix[axis] = spec.wrap(i0 - 1);
            let fm = src[spec.ravel(ix)];
            *slot = if second { (fp - 2.0 * src[i] + fm) / (h * h) } else { (fp - fm) / (2.0 * h) };
        }
    }
    out
}

/// The registered smooth bump exp(1 - 1/(1-|z|^2)) as a function of |z|^2.
pub fn bump(r2: f64) -> f64 {
    if r2 < 1.0 {
        (1.0 - 1.0 / (1.0 - r2)).exp()
    } else {
        0.0
    }
}

/// Mollifier profiles supported in the unit ball.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Profile {
    /// Unit-mass bump.
    Bump,
    /// Gaussian exp(-|z|^2 / (2 sigma^2)) truncated to the unit ball, unit mass.
    Gaussian { sigma: f64 },
    /// bump(z) * (1 + c |z|^2), unit mass.
    Quadratic { c: f64 },
    /// bump(z) * cos(frequency * z_1), unit L^1 norm.
    Oscillatory { frequency: f64 },
    /// bump(z) * q(z) with q chosen so that all moments 0 < |alpha| <= order vanish.
    MomentCorrected { order: usize },
}

impl Profile {
    /// Lattice quadrature weights of the profile at scale `t` (they already carry h^N),
    /// laid out in minimal-image offset order.
    pub fn weights(&self, spec: &GridSpec, t: f64) -> Result<Vec<f64>> {
        if !(t > 0.0 && t.is_finite()) {
            return Err(Error::ScaleOutOfRange(t));
        }
        if t >= spec.box_half_width {
            return Err(Error::SupportOverflow(t));
        }
        let n = spec.points_per_axis;
        let reach = (t / spec.h()).ceil() as i64;
        let mut offsets: Vec<(usize, Point)> = Vec::new();
        let dim = spec.dim;
        let mut ix = [0i64; 3];
        let span = (2 * reach + 1) as usize;
        for flat in 0..span.pow(dim as u32) {
            let mut rem = flat;
            for d in (0..dim).rev() {
                ix[d] = (rem % span) as i64 - reach;
                rem /= span;
            }
            let mut z = [0.0; 3];
            let mut lat = [0usize; 3];
            for d in 0..dim {
                z[d] = ix[d] as f64 * spec.h() / t;
                lat[d] = spec.wrap(ix[d]);
            }
            if z.iter().map(|v| v * v).sum::<f64>() < 1.0 {
                offsets.push((spec.ravel(lat), z));
            }
        }
        let mut w = vec![0.0; n.pow(dim as u32)];
        match self {
            Profile::Bump => {
                for (i, z) in &offsets {
                    w[*i] = bump(r2(z));
                }
                normalize_sum(&mut w)?;
            }
            Profile::Gaussian { sigma } => {
                if *sigma <= 0.0 {
                    return Err(Error::InvalidParameter("gaussian sigma must be positive".into()));
                }
                for (i, z) in &offsets {
                    w[*i] = (-r2(z) / (2.0 * sigma * sigma)).exp();
                }
                normalize_sum(&mut w)?;
            }
            Profile::Quadratic { c } => {
                for (i, z) in &offsets {
                    w[*i] = bump(r2(z)) * (1.0 + c * r2(z));
                }
                normalize_sum(&mut w)?;
            }
            Profile::Oscillatory { frequency } => {
                for (i, z) in &offsets {
                    w[*i] = bump(r2(z)) * (frequency * z[0]).cos();
                }
                let l1: f64 = w.iter().map(|v| v.abs()).sum();
                if l1 == 0.0 {
                    return Err(Error::InvalidParameter("degenerate oscillatory profile".into()));
                }
                w.iter_mut().for_each(|v| *v /= l1);
            }
            Profile::MomentCorrected { order } => {
                moment_corrected(&mut w, &offsets, dim, *order)?;
            }
        }
        Ok(w)
    }

    /// DFT of the lattice weights; multiplying a spectrum by it convolves with phi_t.
    pub fn transfer(&self, spec: &GridSpec, t: f64) -> Result<Vec<C64>> {
        let w = self.weights(spec, t)?;
        let data: Vec<C64> = w.into_iter().map(|v| C64::new(v, 0.0)).collect();
        Ok(forward(spec, &data))
    }

    pub fn is_nonnegative(&self) -> bool {
        matches!(self, Profile::Bump | Profile::Gaussian { .. })
    }
}

fn r2(z: &Point) -> f64 {
    z.iter().map(|v| v * v).sum()
}

fn normalize_sum(w: &mut [f64]) -> Result<()> {
    let s: f64 = w.iter().sum();
    if s <= 0.0 {
        return Err(Error::InvalidParameter("profile has non-positive mass".into()));
    }
    w.iter_mut().for_each(|v| *v /= s);
    Ok(())
}

const MOMENT_TOL: f64 = 1e-10;

fn moment_corrected(w: &mut [f64], offsets: &[(usize, Point)], dim: usize, order: usize) -> Result<()> {
    if order > 8 {
        return Err(Error::MomentCorrectionFailed(order));
    }
    let basis = MultiIndex::up_to(dim, order);
    let k = basis.len();
    let mut gram = nalgebra::DMatrix::<f64>::zeros(k, k);
    let vals: Vec<Vec<f64>> = offsets.iter().map(|(_, z)| basis.iter().map(|b| b.monomial(z)).collect()).collect();
    for ((_, z), v) in offsets.iter().zip(&vals) {
        let b = bump(r2(z));
        for a in 0..k {
            for c in 0..k {
                gram[(a, c)] += b * v[a] * v[c];
            }
        }
    }
    let mut rhs = nalgebra::DVector::<f64>::zeros(k);
    rhs[0] = 1.0;
    let lu = gram.clone().full_piv_lu();
    let mut coef = lu.solve(&rhs).ok_or(Error::MomentCorrectionFailed(order))?;
    let resid = &rhs - &gram * &coef;
    if let Some(corr) = lu.solve(&resid) {
        coef += corr;
    }
    for ((i, z), v) in offsets.iter().zip(&vals) {
        let q: f64 = v.iter().zip(coef.iter()).map(|(a, b)| a * b).sum();
        w[*i] = bump(r2(z)) * q;
    }
    let mut worst: f64 = 0.0;
    for (a, alpha) in basis.iter().enumerate() {
        let m: f64 = offsets.iter().zip(&vals).map(|((i, _), v)| w[*i] * v[a]).sum();
        let target = if alpha.order() == 0 { 1.0 } else { 0.0 };
        worst = worst.max((m - target).abs());
    }
    if worst > MOMENT_TOL {
        return Err(Error::MomentCorrectionFailed(order));
    }
    Ok(())
}

/// f * phi_t via the lattice transfer function.
pub fn convolve_scaled(f: &GridFunction, profile: &Profile, t: f64) -> Result<GridFunction> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::ScaleOutOfRange(t));
    }
    let transfer = profile.transfer(&f.spec, t)?;
    convolve_with_transfer(f, &transfer, t)
}

pub(crate) fn convolve_with_transfer(f: &GridFunction, transfer: &[C64], t: f64) -> Result<GridFunction> {
    let spec = f.spec;
    let support = match f.support {
        Some(s) => {
            let grown = Support { center: s.center, radius: s.radius + t };
            if (0..spec.dim).any(|d| s.center[d].abs() + grown.radius > spec.box_half_width) {
                return Err(Error::SupportOverflow(grown.radius));
            }
            Some(grown)
        }
        None => None,
    };
    let mut out = f.clone();
    for c in 0..f.channels {
        let mut hat = forward(&spec, f.channel(c));
        hat.iter_mut().zip(transfer).for_each(|(a, m)| *a *= m);
        out.channel_mut(c).copy_from_slice(&inverse(&spec, hat));
    }
    out.support = support;
    Ok(out)
}

/// Lattice indices of cells whose centers lie in the open ball B(x, t).
pub fn ball_cells(spec: &GridSpec, x: &Point, t: f64) -> Vec<usize> {
    let dim = spec.dim;
    let h = spec.h();
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    for d in 0..dim {
        lo[d] = spec.nearest_index(x[d] - t).saturating_sub(1);
        hi[d] = (spec.nearest_index(x[d] + t) + 1).min(spec.points_per_axis - 1);
    }
    let mut out = Vec::new();
    let mut ix = lo;
    loop {
        let mut d2 = 0.0;
        for d in 0..dim {
            d2 += (-spec.box_half_width + ix[d] as f64 * h - x[d]).powi(2);
        }
        if d2 < t * t {
            out.push(spec.ravel(ix));
        }
        let mut d = dim;
        loop {
            if d == 0 {
                return out;
            }
            d -= 1;
            if ix[d] < hi[d] {
                ix[d] += 1;
                break;
            }
            ix[d] = lo[d];
        }
    }
}

pub fn ball_inside(spec: &GridSpec, x: &Point, t: f64) -> bool {
    (0..spec.dim).all(|d| x[d].abs() + t <= spec.box_half_width)
}

/// Mean of `f` over the cells of B(x, t), normalized by the discrete ball measure.
pub fn ball_average(f: &GridFunction, x: &Point, t: f64) -> Result<C64> {
    if f.channels != 1 {
        return Err(Error::ChannelMismatch { expected: 1, got: f.channels });
    }
    if !(t > 0.0) || !ball_inside(&f.spec, x, t) {
        return Err(Error::BallOutsideDomain);
    }
    let cells = ball_cells(&f.spec, x, t);
    if cells.is_empty() {
        return Err(Error::BallOutsideDomain);
    }
    let s: C64 = cells.iter().map(|&i| f.values[i]).sum();
    Ok(s / cells.len() as f64)
}

pub fn lp_norm(f: &GridFunction, p: f64) -> Result<f64> {
    if !(p > 0.0 && p.is_finite()) {
        return Err(Error::OutOfRange(format!("lp_norm needs 0 < p < inf, got {p}")));
    }
    Ok(lp_of_magnitudes(&f.magnitudes(), p, f.spec.cell_volume()))
}

pub fn linf_norm(f: &GridFunction) -> f64 {
    f.max_magnitude()
}

/// Norm for 0 < p <= inf, with p = inf handled as the sup norm.
pub fn lp_or_inf(f: &GridFunction, p: f64) -> Result<f64> {
    if p.is_infinite() {
        Ok(linf_norm(f))
    } else {
        lp_norm(f, p)
    }
}

pub(crate) fn lp_of_magnitudes(mags: &[f64], p: f64, cell: f64) -> f64 {
    let s: f64 = if p == 1.0 {
        mags.iter().sum()
    } else if p == 2.0 {
        mags.iter().map(|m| m * m).sum()
    } else {
        mags.iter().map(|m| m.powf(p)).sum()
    };
    (s * cell).powf(1.0 / p)
}

/// Smoothed indicator of the radial interval [0, radius], with edge width `edge`.
pub fn plateau(r: f64, radius: f64, edge: f64) -> f64 {
    0.5 * (libm::erf((radius - r) / edge) + libm::erf((radius + r) / edge))
}

/// Gaussian envelope with a cutoff that vanishes to double precision beyond 6 widths.
pub fn gaussian_envelope(r: f64, width: f64) -> f64 {
    (-(r / width).powi(2)).exp() * plateau(r, 5.0 * width, width / 6.0)
}

pub const FAMILY_NAMES: [&str; 5] = ["gaussian_bump", "polynomial_bump", "oscillating_bump", "stream_field", "dilation_family"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestFamily {
    pub name: String,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base: Option<Box<TestFamily>>,
}

impl TestFamily {
    pub fn new(name: &str, params: &[(&str, f64)]) -> Self {
        TestFamily {
            name: name.to_string(),
            params: params.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            base: None,
        }
    }

    pub fn dilated(base: TestFamily, lambda: f64) -> Self {
        TestFamily { name: "dilation_family".into(), params: [("lambda".to_string(), lambda)].into(), base: Some(Box::new(base)) }
    }

    pub fn param(&self, key: &str, default: f64) -> f64 {
        self.params.get(key).copied().unwrap_or(default)
    }

    pub fn center(&self, dim: usize) -> Point {
        let all = self.param("center", 0.0);
        let mut c = [0.0; 3];
        for (d, slot) in c.iter_mut().enumerate().take(dim) {
            *slot = self.param(&format!("center_{d}"), all);
        }
        c
    }

    /// Human-readable label used as the row key in reports.
    pub fn label(&self) -> String {
        match &self.base {
            Some(b) => format!("{}@{}", b.label(), self.param("lambda", 1.0)),
            None => {
                let p: Vec<String> = self.params.iter().map(|(k, v)| format!("{k}={v}")).collect();
                if p.is_empty() {
                    self.name.clone()
                } else {
                    format!("{}[{}]", self.name, p.join(","))
                }
            }
        }
    }

    /// Unwraps dilation layers into the leaf family and the accumulated factor.
    pub fn resolve(&self) -> Result<(&TestFamily, f64)> {
        match self.name.as_str() {
            "dilation_family" => {
                let lambda = self.param("lambda", f64::NAN);
                if !(lambda.is_finite() && lambda > 0.0) {
                    return Err(Error::InvalidParameter("dilation_family needs lambda > 0".into()));
                }
                let base = self.base.as_deref().ok_or_else(|| Error::InvalidParameter("dilation_family needs a base family".into()))?;
                let (leaf, inner) = base.resolve()?;
                Ok((leaf, inner * lambda))
            }
            n if FAMILY_NAMES.contains(&n) => Ok((self, 1.0)),
            n => Err(Error::UnknownFamily(n.to_string())),
        }
    }
}

enum Leaf {
    Gaussian { center: Point, width: f64, amp: f64 },
    Polynomial { center: Point, radius: f64, edge: f64, terms: Vec<(MultiIndex, f64)> },
    Oscillating { center: Point, width: f64, freq: f64, amp: f64 },
}

impl Leaf {
    fn parse(fam: &TestFamily, dim: usize) -> Result<Leaf> {
        let pos = |key: &str, default: f64| -> Result<f64> {
            let v = fam.param(key, default);
            if v.is_finite() && v > 0.0 {
                Ok(v)
            } else {
                Err(Error::InvalidParameter(format!("{}.{key} must be positive", fam.name)))
            }
        };
        let center = fam.center(dim);
        match fam.name.as_str() {
            "gaussian_bump" | "stream_field" => {
                Ok(Leaf::Gaussian { center, width: pos("width", 0.1)?, amp: fam.param("amplitude", 1.0) })
            }
            "oscillating_bump" => Ok(Leaf::Oscillating {
                center,
                width: pos("width", 0.1)?,
                freq: fam.param("frequency", 10.0),
                amp: fam.param("amplitude", 1.0),
            }),
            "polynomial_bump" => {
                let mut terms = Vec::new();
                for (k, v) in &fam.params {
                    let Some(rest) = k.strip_prefix('c') else { continue };
                    if !rest.starts_with(|ch: char| ch.is_ascii_digit()) {
                        continue;
                    }
                    let exps: std::result::Result<Vec<usize>, _> = rest.split('_').map(|s| s.parse::<usize>()).collect();
                    let exps = exps.map_err(|_| Error::InvalidParameter(format!("bad coefficient key {k}")))?;
                    if exps.len() != dim {
                        return Err(Error::InvalidParameter(format!("coefficient key {k} needs {dim} exponents")));
                    }
                    terms.push((MultiIndex(exps), *v));
                }
                if terms.is_empty() {
                    terms.push((MultiIndex::zero(dim), 1.0));
                }
                Ok(Leaf::Polynomial { center, radius: pos("radius", 1.0)?, edge: pos("edge", 0.25)?, terms })
            }
            other => Err(Error::UnknownFamily(other.to_string())),
        }
    }

    fn support(&self) -> Support {
        match self {
            Leaf::Gaussian { center, width, .. } | Leaf::Oscillating { center, width, .. } => Support { center: *center, radius: 6.0 * width },
            Leaf::Polynomial { center, radius, edge, .. } => Support { center: *center, radius: radius + 7.0 * edge },
        }
    }

    fn eval(&self, x: &Point, dim: usize) -> f64 {
        match self {
            Leaf::Gaussian { center, width, amp } => amp * gaussian_envelope(dist2(x, center, dim).sqrt(), *width),
            Leaf::Oscillating { center, width, freq, amp } => {
                amp * gaussian_envelope(dist2(x, center, dim).sqrt(), *width) * (freq * (x[0] - center[0])).cos()
            }
            Leaf::Polynomial { center, radius, edge, terms } => {
                let mut z = [0.0; 3];
                for d in 0..dim {
                    z[d] = x[d] - center[d];
                }
                let p: f64 = terms.iter().map(|(a, c)| c * a.monomial(&z)).sum();
                p * plateau(dist2(x, center, dim).sqrt(), *radius, *edge)
            }
        }
    }
}

/// Samples a registered family. Scalar families are replicated across channels;
/// `stream_field` needs `channels == dim` and returns the rotated gradient of a Gaussian.
pub fn sample(family: &TestFamily, spec: &GridSpec, channels: usize) -> Result<GridFunction> {
    spec.validate()?;
    if channels == 0 {
        return Err(Error::InvalidParameter("channels must be >= 1".into()));
    }
    let (leaf_fam, lambda) = family.resolve()?;
    let dim = spec.dim;
    let leaf = Leaf::parse(leaf_fam, dim)?;
    let base_support = leaf.support();
    let mut center = [0.0; 3];
    for d in 0..dim {
        center[d] = base_support.center[d] / lambda;
    }
    let support = Support { center, radius: base_support.radius / lambda };
    let limit = spec.interior_half_width();
    if (0..dim).any(|d| support.center[d].abs() + support.radius > limit) {
        return Err(Error::SupportExceedsMargin(format!(
            "{} needs radius {:.4} around {:?}, interior half-width is {limit:.4}",
            family.label(),
            support.radius,
            &support.center[..dim]
        )));
    }
    let scalar: Vec<C64> = (0..spec.len())
        .map(|i| {
            let mut x = spec.point(i);
            x.iter_mut().for_each(|v| *v *= lambda);
            C64::new(leaf.eval(&x, dim), 0.0)
        })
        .collect();
    let psi = GridFunction { spec: *spec, channels: 1, values: scalar, support: Some(support) };
    if leaf_fam.name == "stream_field" {
        if dim < 2 || channels != dim {
            return Err(Error::ChannelMismatch { expected: dim.max(2), got: channels });
        }
        let dx = derivative(&psi, &MultiIndex::unit(dim, 0), DerivMethod::Spectral)?;
        let dy = derivative(&psi, &MultiIndex::unit(dim, 1), DerivMethod::Spectral)?;
        let inv = 1.0 / lambda;
        let mut chans = vec![dy.values.iter().map(|v| v * inv).collect::<Vec<_>>(), dx.values.iter().map(|v| -v * inv).collect()];
        if dim == 3 {
            chans.push(vec![C64::default(); spec.len()]);
        }
        return Ok(GridFunction::from_channels(*spec, chans)?.with_support(Some(support)));
    }
    let mut values = Vec::with_capacity(channels * spec.len());
    for _ in 0..channels {
        values.extend_from_slice(&psi.values);
    }
    Ok(GridFunction { spec: *spec, channels, values, support: Some(support) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn spec1(n: usize) -> GridSpec {
        GridSpec::new(1, 4.0, n, 0.1).unwrap()
    }

    fn spec2(n: usize) -> GridSpec {
        GridSpec::new(2, 2.0, n, 0.1).unwrap()
    }

    #[test]
    fn rejects_bad_grids() {
        assert!(GridSpec::new(2, 1.0, 48, 0.1).is_err());
        assert!(GridSpec::new(2, 1.0, 16, 0.1).is_err());
        assert!(GridSpec::new(2, 1.0, 2048, 0.1).is_err());
        assert!(GridSpec::new(3, 1.0, 256, 0.1).is_err());
        assert!(GridSpec::new(4, 1.0, 32, 0.1).is_err());
    }

    #[test]
    fn multi_index_ordering() {
        let m = MultiIndex::up_to(2, 2);
        let want: Vec<Vec<usize>> = vec![vec![0, 0], vec![1, 0], vec![0, 1], vec![2, 0], vec![1, 1], vec![0, 2]];
        assert_eq!(m.into_iter().map(|a| a.0).collect::<Vec<_>>(), want);
        assert_eq!(MultiIndex::up_to(3, 3).len(), 20);
    }

    #[test]
    fn gaussian_bump_peak_is_one() {
        let f = sample(&TestFamily::new("gaussian_bump", &[("width", 0.1)]), &spec1(256), 1).unwrap();
        let centre = f.spec.nearest_index(0.0);
        assert!((f.values[centre].re - 1.0).abs() < 1e-15);
        assert!((linf_norm(&f) - 1.0).abs() < 1e-15);
        assert!(f.support_leakage() <= 1e-12);
    }

    #[test]
    fn dilation_samples_base_at_scaled_points() {
        let spec = spec1(256);
        let base = TestFamily::new("gaussian_bump", &[("width", 0.3), ("center", 0.5)]);
        let base_f = sample(&base, &spec, 1).unwrap();
        let dil = sample(&TestFamily::dilated(base, 2.0), &spec, 1).unwrap();
        // x_i = -4 + i h, so 2 x_i is lattice point 2i - 128.
        for i in 64..192 {
            assert_eq!(dil.values[i], base_f.values[2 * i - 128]);
        }
    }

    #[test]
    fn polynomial_bump_matches_direct_evaluation() {
        let fam = TestFamily::new("polynomial_bump", &[("c0", 1.0), ("c1", -2.0), ("c2", 0.5), ("radius", 1.2), ("edge", 0.2), ("center", 0.3)]);
        let spec = spec1(256);
        let f = sample(&fam, &spec, 1).unwrap();
        for &i in &[100usize, 128, 150] {
            let x = spec.coord(i);
            let z = x - 0.3;
            let r = z.abs();
            let chi = 0.5 * (libm::erf((1.2 - r) / 0.2) + libm::erf((1.2 + r) / 0.2));
            let want = (1.0 - 2.0 * z + 0.5 * z * z) * chi;
            assert!((f.values[i].re - want).abs() < 1e-14);
        }
    }

    #[test]
    fn support_margin_enforced() {
        let fam = TestFamily::new("gaussian_bump", &[("width", 0.7)]);
        assert!(matches!(sample(&fam, &spec1(256), 1), Err(Error::SupportExceedsMargin(_))));
        assert!(matches!(sample(&TestFamily::new("nope", &[]), &spec1(256), 1), Err(Error::UnknownFamily(_))));
    }

    #[test]
    fn spectral_derivative_of_pure_mode() {
        let spec = spec1(256);
        let l = 2.0 * spec.box_half_width;
        let k = 2.0 * PI / l * 3.0;
        let f = GridFunction::from_fn(spec, |x| C64::new((k * x[0]).sin(), 0.0));
        let d = derivative(&f, &MultiIndex(vec![1]), DerivMethod::Spectral).unwrap();
        let err = (0..spec.len()).map(|i| (d.values[i].re - k * (k * spec.coord(i)).cos()).abs()).fold(0.0, f64::max);
        assert!(err <= 1e-10, "{err}");
        assert_eq!(derivative(&f, &MultiIndex(vec![0]), DerivMethod::Spectral).unwrap(), f);
        assert!(matches!(derivative(&f, &MultiIndex(vec![7]), DerivMethod::Spectral), Err(Error::OrderTooHigh(7))));
    }

    #[test]
    fn second_derivative_agrees_with_richardson_finite_differences() {
        let fam = TestFamily::new("gaussian_bump", &[("width", 0.3)]);
        let alpha = MultiIndex(vec![2]);
        let coarse = sample(&fam, &spec1(512), 1).unwrap();
        let fine = sample(&fam, &spec1(1024), 1).unwrap();
        let spectral = derivative(&fine, &alpha, DerivMethod::Spectral).unwrap().values[512].re;
        let fd_h = derivative(&coarse, &alpha, DerivMethod::FiniteDifference).unwrap().values[256].re;
        let fd_h2 = derivative(&fine, &alpha, DerivMethod::FiniteDifference).unwrap().values[512].re;
        let richardson = (4.0 * fd_h2 - fd_h) / 3.0;
        // Closed form of d^2/dx^2 exp(-x^2/w^2) at 0 is -2/w^2.
        let exact = -2.0 / 0.09;
        assert!((spectral - exact).abs() < 1e-9 * exact.abs());
        let fd_err = (fd_h2 - exact).abs();
        assert!((richardson - exact).abs() < 0.05 * fd_err);
    }

    #[test]
    fn convolution_preserves_constants_and_mass() {
        let spec = spec2(64);
        let f = GridFunction::from_fn(spec, |_| C64::new(2.5, -1.0));
        for t in [0.5, 0.25, 0.1] {
            let g = convolve_scaled(&f, &Profile::Bump, t).unwrap();
            assert!(g.values.iter().all(|v| (v - C64::new(2.5, -1.0)).norm() < 1e-13));
        }
        let bumpf = sample(&TestFamily::new("gaussian_bump", &[("width", 0.2)]), &spec, 1).unwrap();
        let g = convolve_scaled(&bumpf, &Profile::Bump, 0.5).unwrap();
        let m0: C64 = bumpf.values.iter().sum();
        let m1: C64 = g.values.iter().sum();
        assert!((m0 - m1).norm() < 1e-12 * m0.norm());
    }

    #[test]
    fn gaussian_profile_transfer_matches_closed_form() {
        let spec = spec1(512);
        let sigma = 0.15;
        for t in [1.0, 0.5] {
            let tr = Profile::Gaussian { sigma }.transfer(&spec, t).unwrap();
            for j in [0usize, 1, 5, 17, 40] {
                let k = spec.wavenumber(j);
                let want = (-(sigma * t * k).powi(2) / 2.0).exp();
                assert!((tr[j].re - want).abs() < 1e-8, "t={t} j={j} {} vs {want}", tr[j].re);
            }
        }
        let f = GridFunction::from_fn(spec, |x| C64::from_polar(1.0, spec.wavenumber(7) * x[0]));
        let g = convolve_scaled(&f, &Profile::Gaussian { sigma }, 0.5).unwrap();
        let want = (-(sigma * 0.5 * spec.wavenumber(7)).powi(2) / 2.0).exp();
        assert!(f.values.iter().zip(&g.values).all(|(a, b)| (a * want - b).norm() < 1e-8));
    }

    #[test]
    fn scaling_covariance_of_convolution() {
        let spec = GridSpec::new(1, 4.0, 4096, 0.1).unwrap();
        let families = [
            TestFamily::new("gaussian_bump", &[("width", 0.4)]),
            TestFamily::new("polynomial_bump", &[("c0", 1.0), ("c1", 0.5), ("radius", 0.8), ("edge", 0.2)]),
            TestFamily::new("oscillating_bump", &[("width", 0.4), ("frequency", 3.0)]),
        ];
        for fam in &families {
            let f = sample(fam, &spec, 1).unwrap();
            for lambda in [2.0f64, 4.0] {
                let fl = sample(&TestFamily::dilated(fam.clone(), lambda), &spec, 1).unwrap();
                for t in [0.125, 0.25] {
                    let lhs = convolve_scaled(&fl, &Profile::Bump, t).unwrap();
                    let rhs = convolve_scaled(&f, &Profile::Bump, lambda * t).unwrap();
                    let scale = linf_norm(&rhs);
                    let n = spec.points_per_axis as i64;
                    let l = lambda as i64;
                    let mut worst: f64 = 0.0;
                    for i in 0..n {
                        let j = l * i - (l - 1) * n / 2;
                        if (0..n).contains(&j) {
                            worst = worst.max((lhs.values[i as usize] - rhs.values[j as usize]).norm());
                        }
                    }
                    assert!(worst <= 1e-8 * scale, "{} lambda={lambda} t={t}: {worst:e}", fam.label());
                }
            }
        }
    }

    #[test]
    fn ball_average_basics() {
        let spec = spec1(256);
        let one = GridFunction::from_fn(spec, |_| C64::new(1.0, 0.0));
        let id = GridFunction::from_fn(spec, |x| C64::new(x[0], 0.0));
        for t in [0.1, 0.77, 2.0] {
            assert!((ball_average(&one, &[0.3, 0.0, 0.0], t).unwrap().re - 1.0).abs() < 1e-15);
            assert!(ball_average(&id, &[0.0; 3], t).unwrap().norm() < 1e-15);
        }
        assert!(matches!(ball_average(&one, &[3.9, 0.0, 0.0], 0.5), Err(Error::BallOutsideDomain)));
    }

    #[test]
    fn ball_average_matches_refined_quadrature() {
        let fam = TestFamily::new("gaussian_bump", &[("width", 0.1)]);
        let coarse_spec = spec2(256);
        let f = sample(&fam, &coarse_spec, 1).unwrap();
        let avg = ball_average(&f, &[0.0; 3], 0.5).unwrap().re;
        // Oracle: the ball integral on a 4x finer lattice, over the coarse ball measure.
        let fine = GridSpec::new(2, 2.0, 1024, 0.1).unwrap();
        let hf = fine.h();
        let mut integral = 0.0;
        for i in 0..fine.len() {
            let x = fine.point(i);
            if x[0] * x[0] + x[1] * x[1] < 0.25 {
                integral += (-(x[0] * x[0] + x[1] * x[1]) / 0.01).exp() * hf * hf;
            }
        }
        let measure = ball_cells(&coarse_spec, &[0.0; 3], 0.5).len() as f64 * coarse_spec.cell_volume();
        assert!((avg - integral / measure).abs() <= 1e-6 * avg.abs());
    }

    #[test]
    fn plateau_norm_matches_closed_form_integral() {
        let spec = GridSpec::new(1, 4.0, 2048, 0.1).unwrap();
        let fam = TestFamily::new("polynomial_bump", &[("c0", 3.0), ("radius", 1.0), ("edge", 0.02)]);
        let f = sample(&fam, &spec, 1).unwrap();
        // Oracle: 9 * integral of plateau^2, by composite Simpson on a fine independent mesh.
        let m = 200_000;
        let (a, b) = (-1.5f64, 1.5f64);
        let hs = (b - a) / m as f64;
        let g = |x: f64| {
            let p = 0.5 * (libm::erf((1.0 - x.abs()) / 0.02) + libm::erf((1.0 + x.abs()) / 0.02));
            9.0 * p * p
        };
        let mut s = g(a) + g(b);
        for k in 1..m {
            s += g(a + k as f64 * hs) * if k % 2 == 1 { 4.0 } else { 2.0 };
        }
        let oracle = (s * hs / 3.0).sqrt();
        let got = lp_norm(&f, 2.0).unwrap();
        assert!((got - oracle).abs() < 1e-10 * oracle, "{got} vs {oracle}");
        assert!((got - 18f64.sqrt()).abs() < 0.02 * 18f64.sqrt());
        let c = -2.5;
        let scaled = lp_norm(&f.scaled(C64::new(c, 0.0)), 1.5).unwrap();
        assert!((scaled - 2.5 * lp_norm(&f, 1.5).unwrap()).abs() < 1e-12 * scaled);
    }

    #[test]
    fn quadrature_consistency_under_refinement() {
        let families = registry_2d();
        for fam in &families {
            for &p in &[0.75, 1.0, 2.0] {
                let a = lp_norm(&sample(fam, &spec2(128), 1).unwrap(), p).unwrap().powf(p);
                let b = lp_norm(&sample(fam, &spec2(256), 1).unwrap(), p).unwrap().powf(p);
                assert!((a - b).abs() <= 0.01 * b, "{} p={p}", fam.label());
            }
        }
    }

    fn registry_2d() -> Vec<TestFamily> {
        vec![
            TestFamily::new("gaussian_bump", &[("width", 0.2), ("center_0", 0.2)]),
            TestFamily::new("polynomial_bump", &[("c0_0", 1.0), ("c1_0", 0.5), ("c0_2", -0.3), ("radius", 0.6), ("edge", 0.15)]),
            TestFamily::new("oscillating_bump", &[("width", 0.25), ("frequency", 6.0)]),
            TestFamily::dilated(TestFamily::new("gaussian_bump", &[("width", 0.25)]), 2.0),
        ]
    }

    #[test]
    fn stream_field_is_divergence_free() {
        let spec = spec2(128);
        let v = sample(&TestFamily::new("stream_field", &[("width", 0.2)]), &spec, 2).unwrap();
        let dx = derivative(&v.single(0), &MultiIndex(vec![1, 0]), DerivMethod::Spectral).unwrap();
        let dy = derivative(&v.single(1), &MultiIndex(vec![0, 1]), DerivMethod::Spectral).unwrap();
        let div = dx.add(&dy).unwrap();
        assert!(linf_norm(&div) <= 1e-10 * linf_norm(&v));
    }

    #[test]
    fn fourier_evaluation_reproduces_samples_and_derivatives() {
        let spec = spec1(128);
        let f = sample(&TestFamily::new("gaussian_bump", &[("width", 0.4)]), &spec, 1).unwrap();
        let v = f.eval_fourier(0, &[spec.coord(70), 0.0, 0.0], &MultiIndex(vec![0]));
        assert!((v - f.values[70]).norm() < 1e-13);
        let d = derivative(&f, &MultiIndex(vec![1]), DerivMethod::Spectral).unwrap();
        let v1 = f.eval_fourier(0, &[spec.coord(70), 0.0, 0.0], &MultiIndex(vec![1]));
        assert!((v1 - d.values[70]).norm() < 1e-12);
    }

    fn bandlimited(spec: GridSpec, seed: u64) -> GridFunction {
        let modes = [(1.0, 0.3), (3.0, -1.1), (5.0, 0.7)];
        let s = seed as f64 * 0.37;
        GridFunction::from_fn(spec, move |x| {
            let mut v = C64::default();
            for (k, a) in modes {
                let kk = PI / spec.box_half_width * k;
                v += C64::from_polar(a + s, kk * (x[0] + 0.5 * x[1]) + s);
            }
            v
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn derivative_and_convolution_are_linear(a in -3.0f64..3.0, b in -3.0f64..3.0, seed in 0u64..50) {
            let spec = spec2(32);
            let f = bandlimited(spec, seed);
            let g = bandlimited(spec, seed + 7).scaled(C64::new(0.0, 1.0));
            let combo = f.scaled(C64::new(a, 0.0)).add(&g.scaled(C64::new(b, 0.0))).unwrap();
            let alpha = MultiIndex(vec![1, 1]);
            let lhs = derivative(&combo, &alpha, DerivMethod::Spectral).unwrap();
            let rhs = derivative(&f, &alpha, DerivMethod::Spectral).unwrap().scaled(C64::new(a, 0.0))
                .add(&derivative(&g, &alpha, DerivMethod::Spectral).unwrap().scaled(C64::new(b, 0.0))).unwrap();
            let scale = linf_norm(&lhs).max(1e-300);
            prop_assert!(linf_norm(&lhs.sub(&rhs).unwrap()) <= 1e-10 * scale);
            let lhs = convolve_scaled(&combo, &Profile::Bump, 0.25).unwrap();
            let rhs = convolve_scaled(&f, &Profile::Bump, 0.25).unwrap().scaled(C64::new(a, 0.0))
                .add(&convolve_scaled(&g, &Profile::Bump, 0.25).unwrap().scaled(C64::new(b, 0.0))).unwrap();
            let scale = linf_norm(&lhs).max(1e-300);
            prop_assert!(linf_norm(&lhs.sub(&rhs).unwrap()) <= 1e-10 * scale);
        }

        #[test]
        fn derivative_commutes_with_convolution(seed in 0u64..50, t in 0.05f64..1.0, ax in 0usize..2) {
            let spec = spec2(32);
            let f = bandlimited(spec, seed);
            let alpha = MultiIndex::unit(2, ax);
            let a = derivative(&convolve_scaled(&f, &Profile::Bump, t).unwrap(), &alpha, DerivMethod::Spectral).unwrap();
            let b = convolve_scaled(&derivative(&f, &alpha, DerivMethod::Spectral).unwrap(), &Profile::Bump, t).unwrap();
            prop_assert!(linf_norm(&a.sub(&b).unwrap()) <= 1e-8 * linf_norm(&a).max(1.0));
        }
    }
}
