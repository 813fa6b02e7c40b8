//! Linear differential operators with trigonometric-polynomial coefficients.
//!
//! Coefficients are finite sums `c_j exp(i k_j . x)`, so every derivative, conjugate
//! and transpose needed by the adjoint is exact. Symbols follow two conventions:
//! `principal_symbol` uses `(i xi)^alpha` (what `apply` does to a pure mode), while
//! `symbol_probe` uses `xi^alpha` for the ellipticity certificate.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{apply_multiplier, derivative, dist2, forward, inverse, DerivMethod, GridFunction, GridSpec, MultiIndex, Point, C64};

/// Coefficients whose symbols differ by less than this are treated as constant.
const CONSTANT_TOL: f64 = 1e-14;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrigPoly {
    /// (amplitude, wave vector) pairs; the k = 0 term is the constant part.
    pub terms: Vec<(C64, Point)>,
}

impl TrigPoly {
    pub fn constant(c: C64) -> Self {
        TrigPoly { terms: vec![(c, [0.0; 3])] }
    }

    pub fn real(c: f64) -> Self {
        TrigPoly::constant(C64::new(c, 0.0))
    }

    pub fn zero() -> Self {
        TrigPoly { terms: Vec::new() }
    }

    /// a sin(k . x) = (a / 2i) e^{ikx} - (a / 2i) e^{-ikx}.
    pub fn sin(a: C64, k: Point) -> Self {
        let c = a / C64::new(0.0, 2.0);
        TrigPoly { terms: vec![(c, k), (-c, neg(&k))] }
    }

    pub fn cos(a: C64, k: Point) -> Self {
        let c = a / 2.0;
        TrigPoly { terms: vec![(c, k), (c, neg(&k))] }
    }

    pub fn plus(mut self, other: &TrigPoly) -> Self {
        self.terms.extend(other.terms.iter().copied());
        self.simplified()
    }

    pub fn scaled(&self, s: C64) -> Self {
        TrigPoly { terms: self.terms.iter().map(|&(c, k)| (c * s, k)).collect() }.simplified()
    }

    pub fn eval(&self, x: &Point) -> C64 {
        self.terms.iter().map(|&(c, k)| c * C64::from_polar(1.0, k[0] * x[0] + k[1] * x[1] + k[2] * x[2])).sum()
    }

    pub fn derivative(&self, alpha: &MultiIndex) -> Self {
        let terms = self
            .terms
            .iter()
            .map(|&(c, k)| {
                let mut f = c;
                for (d, &a) in alpha.0.iter().enumerate() {
                    f *= C64::new(0.0, k[d]).powu(a as u32);
                }
                (f, k)
            })
            .collect();
        TrigPoly { terms }.simplified()
    }

    pub fn conj(&self) -> Self {
        TrigPoly { terms: self.terms.iter().map(|&(c, k)| (c.conj(), neg(&k))).collect() }
    }

    pub fn is_constant(&self) -> bool {
        self.terms.iter().all(|(c, k)| k.iter().all(|v| *v == 0.0) || c.norm() <= CONSTANT_TOL)
    }

    pub fn sup_bound(&self) -> f64 {
        self.terms.iter().map(|(c, _)| c.norm()).sum()
    }

    /// Merges equal wave vectors and drops zero amplitudes.
    fn simplified(self) -> Self {
        let mut out: Vec<(C64, Point)> = Vec::new();
        for (c, k) in self.terms {
            match out.iter_mut().find(|(_, q)| *q == k) {
                Some(slot) => slot.0 += c,
                None => out.push((c, k)),
            }
        }
        out.retain(|(c, _)| *c != C64::default());
        TrigPoly { terms: out }
    }
}

fn neg(k: &Point) -> Point {
    [-k[0], -k[1], -k[2]]
}

/// Matrix coefficient, `rows` outputs by `cols` inputs, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoefMatrix {
    pub rows: usize,
    pub cols: usize,
    pub entries: Vec<TrigPoly>,
}

impl CoefMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        CoefMatrix { rows, cols, entries: vec![TrigPoly::zero(); rows * cols] }
    }

    pub fn get(&self, r: usize, c: usize) -> &TrigPoly {
        &self.entries[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, p: TrigPoly) {
        self.entries[r * self.cols + c] = p;
    }

    pub fn eval(&self, x: &Point) -> DMatrix<C64> {
        DMatrix::from_fn(self.rows, self.cols, |r, c| self.get(r, c).eval(x))
    }

    pub fn adjoint(&self) -> Self {
        let mut out = CoefMatrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.set(c, r, self.get(r, c).conj());
            }
        }
        out
    }

    pub fn derivative(&self, alpha: &MultiIndex) -> Self {
        CoefMatrix { rows: self.rows, cols: self.cols, entries: self.entries.iter().map(|e| e.derivative(alpha)).collect() }
    }

    fn add_scaled(&mut self, other: &CoefMatrix, s: f64) {
        for (a, b) in self.entries.iter_mut().zip(&other.entries) {
            *a = std::mem::replace(a, TrigPoly::zero()).plus(&b.scaled(C64::new(s, 0.0)));
        }
    }

    pub fn is_zero(&self) -> bool {
        self.entries.iter().all(|e| e.terms.is_empty())
    }

    pub fn is_constant(&self) -> bool {
        self.entries.iter().all(TrigPoly::is_constant)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffOperator {
    pub name: String,
    pub dim: usize,
    pub order: usize,
    pub n_in: usize,
    pub n_out: usize,
    pub terms: Vec<(MultiIndex, CoefMatrix)>,
    pub domain_center: Point,
    pub domain_radius: f64,
}

impl DiffOperator {
    /// Builds an operator, merging repeated multi-indices and dropping zero terms.
    pub fn new(name: &str, dim: usize, n_in: usize, n_out: usize, terms: Vec<(MultiIndex, CoefMatrix)>) -> Result<Self> {
        let mut merged: BTreeMap<MultiIndex, CoefMatrix> = BTreeMap::new();
        for (alpha, a) in terms {
            if alpha.dim() != dim || a.rows != n_out || a.cols != n_in {
                return Err(Error::InvalidParameter(format!("term {:?} does not match a {n_out}x{n_in} operator on N = {dim}", alpha.0)));
            }
            match merged.get_mut(&alpha) {
                Some(slot) => slot.add_scaled(&a, 1.0),
                None => {
                    merged.insert(alpha, a);
                }
            }
        }
        let terms: Vec<_> = merged.into_iter().filter(|(_, a)| !a.is_zero()).collect();
        let order = terms.iter().map(|(a, _)| a.order()).max().ok_or_else(|| Error::InvalidParameter(format!("operator `{name}` has no terms")))?;
        Ok(DiffOperator { name: name.to_string(), dim, order, n_in, n_out, terms, domain_center: [0.0; 3], domain_radius: f64::INFINITY })
    }

    pub fn with_domain(mut self, center: Point, radius: f64) -> Self {
        self.domain_center = center;
        self.domain_radius = radius;
        self
    }

    pub fn is_constant_coefficient(&self) -> bool {
        self.terms.iter().all(|(_, a)| a.is_constant())
    }

    /// Coefficient matrix of `alpha` at `x` (zero when the term is absent).
    pub fn coefficient(&self, alpha: &MultiIndex, x: &Point) -> DMatrix<C64> {
        self.terms.iter().find(|(a, _)| a == alpha).map_or_else(|| DMatrix::zeros(self.n_out, self.n_in), |(_, c)| c.eval(x))
    }

    /// sum_alpha a_alpha(x) (i xi)^alpha.
    pub fn symbol(&self, x: &Point, xi: &Point) -> DMatrix<C64> {
        let mut s = DMatrix::zeros(self.n_out, self.n_in);
        for (alpha, a) in &self.terms {
            let mut w = C64::new(1.0, 0.0);
            for d in 0..self.dim {
                w *= C64::new(0.0, xi[d]).powu(alpha.0[d] as u32);
            }
            s += a.eval(x) * w;
        }
        s
    }

    pub fn principal_symbol(&self, x: &Point, xi: &Point) -> DMatrix<C64> {
        principal_part(self).symbol(x, xi)
    }
}

fn check_domain(a: &DiffOperator, u: &GridFunction) -> Result<()> {
    if !a.domain_radius.is_finite() {
        return Ok(());
    }
    let spec = u.spec;
    if let Some(s) = u.support {
        if dist2(&s.center, &a.domain_center, spec.dim).sqrt() + s.radius > a.domain_radius {
            return Err(Error::SupportOutsideDomainBall);
        }
        return Ok(());
    }
    let top = u.max_magnitude();
    let r2 = a.domain_radius * a.domain_radius;
    let leak = (0..spec.len()).filter(|&i| dist2(&spec.point(i), &a.domain_center, spec.dim) > r2).map(|i| u.magnitude(i)).fold(0.0, f64::max);
    if leak > 1e-12 * top {
        return Err(Error::SupportOutsideDomainBall);
    }
    Ok(())
}

/// sum_alpha a_alpha(x) d^alpha u, spectral derivatives, pointwise matrix products.
pub fn apply(a: &DiffOperator, u: &GridFunction) -> Result<GridFunction> {
    if u.channels != a.n_in {
        return Err(Error::ChannelMismatch { expected: a.n_in, got: u.channels });
    }
    if u.spec.dim != a.dim {
        return Err(Error::InvalidParameter(format!("operator on N = {} applied to a {}-D grid", a.dim, u.spec.dim)));
    }
    check_domain(a, u)?;
    let spec = u.spec;
    let n = spec.len();
    let points: Vec<Point> = (0..n).map(|i| spec.point(i)).collect();
    let mut out = GridFunction::zeros(spec, a.n_out);
    for (alpha, coef) in &a.terms {
        let du = derivative(u, alpha, DerivMethod::Spectral)?;
        for r in 0..a.n_out {
            for c in 0..a.n_in {
                let e = coef.get(r, c);
                if e.terms.is_empty() {
                    continue;
                }
                let src = du.channel(c);
                let dst = &mut out.values[r * n..(r + 1) * n];
                if e.is_constant() {
                    let k = e.eval(&[0.0; 3]);
                    dst.iter_mut().zip(src).for_each(|(d, s)| *d += k * s);
                } else {
                    dst.iter_mut().zip(src).zip(&points).for_each(|((d, s), x)| *d += e.eval(x) * s);
                }
            }
        }
    }
    out.support = u.support;
    Ok(out)
}

/// A* with b_beta = sum_{alpha >= beta} (-1)^|alpha| C(alpha, beta) d^{alpha - beta}(a_alpha^H).
pub fn adjoint(a: &DiffOperator) -> Result<DiffOperator> {
    let mut terms = Vec::new();
    for (alpha, coef) in &a.terms {
        let ah = coef.adjoint();
        let sign = if alpha.order() % 2 == 0 { 1.0 } else { -1.0 };
        for beta in MultiIndex::up_to(a.dim, alpha.order()).into_iter().filter(|b| b.le(alpha)) {
            let mut d = ah.derivative(&alpha.sub(&beta));
            let w = sign * alpha.binomial(&beta);
            d.entries.iter_mut().for_each(|e| *e = e.scaled(C64::new(w, 0.0)));
            terms.push((beta, d));
        }
    }
    let name = format!("{}*", a.name);
    let out = DiffOperator::new(&name, a.dim, a.n_out, a.n_in, terms)?;
    Ok(out.with_domain(a.domain_center, a.domain_radius))
}

pub fn principal_part(a: &DiffOperator) -> DiffOperator {
    let mut out = a.clone();
    out.terms.retain(|(alpha, _)| alpha.order() == a.order);
    out.name = format!("{}_principal", a.name);
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SymbolProbe {
    pub point: Point,
    pub sphere_samples: Vec<Point>,
    pub min_singular_value: f64,
    /// The xi at which the minimum is attained.
    pub worst_direction: Point,
    pub convention: String,
}

impl SymbolProbe {
    pub fn elliptic(&self, threshold: f64) -> bool {
        self.min_singular_value >= threshold
    }
}

/// Quasi-uniform unit vectors: equiangular in 2-D, Fibonacci lattice in 3-D.
pub fn sphere_samples(dim: usize, count: usize) -> Vec<Point> {
    match dim {
        1 => vec![[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]],
        2 => (0..count)
            .map(|j| {
                let t = 2.0 * std::f64::consts::PI * j as f64 / count as f64;
                [t.cos(), t.sin(), 0.0]
            })
            .collect(),
        _ => {
            let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
            (0..count)
                .map(|j| {
                    let z = 1.0 - 2.0 * (j as f64 + 0.5) / count as f64;
                    let r = (1.0 - z * z).sqrt();
                    let t = golden * j as f64;
                    [r * t.cos(), r * t.sin(), z]
                })
                .collect()
        }
    }
}

fn min_singular(m: &DMatrix<C64>) -> f64 {
    let s = m.clone().svd(false, false).singular_values;
    // Injectivity needs n_in singular values; a wide matrix is never injective.
    if m.nrows() < m.ncols() {
        return 0.0;
    }
    s.iter().copied().fold(f64::INFINITY, f64::min)
}

/// min over sampled unit xi of the smallest singular value of sum_{|alpha| = m} a_alpha(x0) xi^alpha.
pub fn symbol_probe(a: &DiffOperator, x0: &Point, n_sphere: usize) -> SymbolProbe {
    let samples = sphere_samples(a.dim, n_sphere.max(1));
    let mut best = f64::INFINITY;
    let mut worst_direction = samples[0];
    let principal: Vec<(&MultiIndex, DMatrix<C64>)> = a.terms.iter().filter(|(al, _)| al.order() == a.order).map(|(al, c)| (al, c.eval(x0))).collect();
    for xi in &samples {
        let mut s = DMatrix::zeros(a.n_out, a.n_in);
        for (alpha, c) in &principal {
            let w: f64 = (0..a.dim).map(|d| xi[d].powi(alpha.0[d] as i32)).product();
            s += c * C64::new(w, 0.0);
        }
        let v = min_singular(&s);
        if v < best {
            best = v;
            worst_direction = *xi;
        }
    }
    SymbolProbe { point: *x0, sphere_samples: samples, min_singular_value: best, worst_direction, convention: "xi^alpha".into() }
}

/// Ellipticity over several base points; NotElliptic below `threshold`.
pub fn certify_elliptic(a: &DiffOperator, points: &[Point], n_sphere: usize, threshold: f64) -> Result<f64> {
    let worst = points.iter().map(|x| symbol_probe(a, x, n_sphere).min_singular_value).fold(f64::INFINITY, f64::min);
    if worst < threshold {
        return Err(Error::NotElliptic(worst));
    }
    Ok(worst)
}

/// (1 + |xi|^2)^(-m/2) on the lattice frequencies.
pub fn bessel_potential(f: &GridFunction, m: usize) -> Result<GridFunction> {
    if m == 0 {
        return Err(Error::InvalidParameter("bessel_potential needs m >= 1".into()));
    }
    let half = m as f64 / 2.0;
    Ok(apply_multiplier(f, |xi| C64::new((1.0 + xi[0] * xi[0] + xi[1] * xi[1] + xi[2] * xi[2]).powf(-half), 0.0)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayReport {
    /// (L, rms residual of a degree-L polynomial fit of ln|K| against ln|y|) on [1/2, W/2].
    pub fit_residuals: Vec<(usize, f64)>,
    /// Local log-log slopes on consecutive octaves of [1/2, W/2].
    pub far_slopes: Vec<(f64, f64)>,
    pub near_slope: f64,
    pub boundary_ratio: f64,
    pub mass: f64,
    pub asymmetry: f64,
    pub superpolynomial: bool,
}

/// Spectral roll-off for the kernel: exp(-(|xi| / xi_c)^16) with xi_c at 2/3 of Nyquist.
/// A hard Nyquist cut of the slowly decaying symbol leaves an algebraic lattice
/// ripple in the far field; the smooth roll-off keeps the tail super-polynomial.
pub fn kernel_rolloff(spec: &GridSpec, xi: &Point) -> f64 {
    let nyquist = std::f64::consts::PI / spec.h();
    let r = (xi[0] * xi[0] + xi[1] * xi[1] + xi[2] * xi[2]).sqrt() / (2.0 / 3.0 * nyquist);
    (-r.powi(16)).exp()
}

/// Lattice Bessel kernel K_m (unit mass) centred at the origin lattice point.
pub fn bessel_kernel(m: usize, spec: &GridSpec) -> Result<(GridFunction, DecayReport)> {
    let n = spec.points_per_axis;
    let dim = spec.dim;
    let origin = spec.ravel([n / 2, if dim > 1 { n / 2 } else { 0 }, if dim > 2 { n / 2 } else { 0 }]);
    let mut delta = GridFunction::zeros(*spec, 1);
    delta.values[origin] = C64::new(1.0 / spec.cell_volume(), 0.0);
    if m == 0 {
        return Err(Error::InvalidParameter("bessel_kernel needs m >= 1".into()));
    }
    let half = m as f64 / 2.0;
    let k = apply_multiplier(&delta, |xi| C64::new((1.0 + xi[0] * xi[0] + xi[1] * xi[1] + xi[2] * xi[2]).powf(-half) * kernel_rolloff(spec, xi), 0.0));
    let peak = k.values[origin].norm();
    let mut boundary: f64 = 0.0;
    for i in 0..spec.len() {
        let ix = spec.unravel(i);
        if (0..dim).any(|d| ix[d] == 0) {
            boundary = boundary.max(k.values[i].norm());
        }
    }
    let boundary_ratio = boundary / peak;
    if boundary_ratio > 1e-8 {
        return Err(Error::BoxTooSmall(format!("|K| at the box edge is {boundary_ratio:.2e} of the peak (needs <= 1e-8)")));
    }
    let mass = k.values.iter().map(|v| v.re).sum::<f64>() * spec.cell_volume();
    let asymmetry = lattice_asymmetry(&k) / peak;
    // Radial profile along the first axis.
    let h = spec.h();
    let axis = |j: usize| {
        let mut ix = spec.unravel(origin);
        ix[0] = n / 2 + j;
        k.values[spec.ravel(ix)].norm()
    };
    let samples = |lo: f64, hi: f64| -> Vec<(f64, f64)> {
        let a = (lo / h).ceil() as usize;
        let b = ((hi / h).floor() as usize).min(n / 2 - 1);
        (a.max(1)..=b).map(|j| ((j as f64 * h).ln(), axis(j).ln())).filter(|(_, v)| v.is_finite()).collect()
    };
    let near = samples(2.0 * h, 0.25);
    let near_slope = linear_slope(&near);
    let far = samples(0.5, spec.box_half_width / 2.0);
    let fit_residuals = [2usize, 4, 6].iter().map(|&l| (l, poly_fit_residual(&far, l))).collect();
    let mut far_slopes = Vec::new();
    let mut lo = 0.5;
    while lo * 2.0 <= spec.box_half_width / 2.0 + 1e-12 {
        let s = samples(lo, lo * 2.0);
        if s.len() >= 2 {
            far_slopes.push((lo, linear_slope(&s)));
        }
        lo *= 2.0;
    }
    // Faster than any power: octave slopes keep steepening.
    let superpolynomial = far_slopes.len() >= 2 && far_slopes.windows(2).all(|w| w[1].1 < w[0].1);
    Ok((k, DecayReport { fit_residuals, far_slopes, near_slope, boundary_ratio, mass, asymmetry, superpolynomial }))
}

fn lattice_asymmetry(k: &GridFunction) -> f64 {
    let spec = k.spec;
    let n = spec.points_per_axis;
    let dim = spec.dim;
    let mirror = |i: usize| (n - i) % n;
    let mut worst: f64 = 0.0;
    for i in 0..spec.len() {
        let ix = spec.unravel(i);
        // Offsets from the origin index n/2; reflection j -> -j is i -> n - i (mod n).
        let rel: Vec<usize> = (0..dim).map(|d| (ix[d] + n - n / 2) % n).collect();
        let back = |r: &[usize]| {
            let mut jx = [0usize; 3];
            for d in 0..dim {
                jx[d] = (r[d] + n / 2) % n;
            }
            spec.ravel(jx)
        };
        let v = k.values[i];
        for d in 0..dim {
            let mut r = rel.clone();
            r[d] = mirror(r[d]);
            worst = worst.max((k.values[back(&r)] - v).norm());
        }
        if dim >= 2 {
            let mut r = rel.clone();
            r.swap(0, 1);
            worst = worst.max((k.values[back(&r)] - v).norm());
        }
    }
    worst
}

fn linear_slope(pts: &[(f64, f64)]) -> f64 {
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

/// RMS residual of a least-squares polynomial fit of degree `deg`.
fn poly_fit_residual(pts: &[(f64, f64)], deg: usize) -> f64 {
    if pts.len() <= deg + 1 {
        return 0.0;
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / pts.len() as f64;
    let span = pts.iter().map(|p| (p.0 - mx).abs()).fold(0.0, f64::max).max(1e-300);
    let a = DMatrix::from_fn(pts.len(), deg + 1, |r, c| ((pts[r].0 - mx) / span).powi(c as i32));
    let b = DMatrix::from_fn(pts.len(), 1, |r, _| pts[r].1);
    let svd = a.clone().svd(true, true);
    let x = svd.solve(&b, 1e-13).unwrap_or_else(|_| DMatrix::zeros(deg + 1, 1));
    let r = &a * x - b;
    (r.norm_squared() / pts.len() as f64).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    Stream2d,
    Curl3d,
    CustomProjection,
}

#[derive(Clone, Debug)]
pub struct KernelField {
    pub field: GridFunction,
    /// |A* v|_2 / |v|_2 when an A* was supplied.
    pub constraint_ratio: Option<f64>,
}

fn deriv(f: &GridFunction, c: usize, axis: usize) -> Result<GridFunction> {
    derivative(&f.single(c), &MultiIndex::unit(f.spec.dim, axis), DerivMethod::Spectral)
}

fn l2(f: &GridFunction) -> f64 {
    f.values.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
}

/// Fields annihilated by A*: stream functions, curls, or a spectral projection off range(A).
pub fn kernel_field(kind: KernelKind, generator: &GridFunction, a_star: Option<&DiffOperator>) -> Result<KernelField> {
    let spec = generator.spec;
    let field = match kind {
        KernelKind::Stream2d => {
            if spec.dim != 2 || generator.channels != 1 {
                return Err(Error::InvalidParameter("stream_2d needs a scalar generator on N = 2".into()));
            }
            let dy = deriv(generator, 0, 1)?;
            let dx = deriv(generator, 0, 0)?.scaled(C64::new(-1.0, 0.0));
            GridFunction::from_channels(spec, vec![dy.values, dx.values])?
        }
        KernelKind::Curl3d => {
            if spec.dim != 3 || generator.channels != 3 {
                return Err(Error::InvalidParameter("curl_3d needs a 3-channel generator on N = 3".into()));
            }
            let d = |c: usize, a: usize| deriv(generator, c, a).map(|g| g.values);
            let sub = |a: Vec<C64>, b: Vec<C64>| a.into_iter().zip(b).map(|(x, y)| x - y).collect::<Vec<_>>();
            GridFunction::from_channels(spec, vec![sub(d(2, 1)?, d(1, 2)?), sub(d(0, 2)?, d(2, 0)?), sub(d(1, 0)?, d(0, 1)?)])?
        }
        KernelKind::CustomProjection => {
            let a_star = a_star.ok_or_else(|| Error::InvalidParameter("custom_projection needs the operator A*".into()))?;
            if !a_star.is_constant_coefficient() {
                return Err(Error::ProjectionUnavailable);
            }
            if generator.channels != a_star.n_in {
                return Err(Error::ChannelMismatch { expected: a_star.n_in, got: generator.channels });
            }
            project_off_range(a_star, generator)?
        }
    };
    let field = field.with_support(generator.support);
    let constraint_ratio = match a_star {
        Some(op) if op.n_in == field.channels => {
            let unsupported = GridFunction { support: None, ..field.clone() };
            let r = apply(op, &unsupported)?;
            let den = l2(&field);
            Some(if den > 0.0 { l2(&r) / den } else { 0.0 })
        }
        _ => None,
    };
    Ok(KernelField { field, constraint_ratio })
}

/// v - T^H (T T^H)^+ T v per frequency, T the symbol of the constant-coefficient A*.
fn project_off_range(a_star: &DiffOperator, v: &GridFunction) -> Result<GridFunction> {
    let spec = v.spec;
    let n = spec.len();
    let c = v.channels;
    let hats: Vec<Vec<C64>> = (0..c).map(|ch| forward(&spec, v.channel(ch))).collect();
    let mut out: Vec<Vec<C64>> = vec![vec![C64::default(); n]; c];
    for i in 0..n {
        let xi = spec.wave_vector(i);
        let t = a_star.symbol(&[0.0; 3], &xi);
        let vec = DMatrix::from_fn(c, 1, |r, _| hats[r][i]);
        let tt = &t * t.adjoint();
        let tn = tt.norm();
        let proj = if tn > 0.0 {
            let pinv = tt.pseudo_inverse(1e-12 * tn).map_err(|e| Error::InvalidParameter(e.to_string()))?;
            t.adjoint() * pinv * (&t * &vec)
        } else {
            DMatrix::zeros(c, 1)
        };
        for r in 0..c {
            out[r][i] = vec[(r, 0)] - proj[(r, 0)];
        }
    }
    let channels = out.into_iter().map(|h| inverse(&spec, h)).collect();
    GridFunction::from_channels(spec, channels)
}

fn scalar(dim: usize, alpha: &[usize], c: TrigPoly) -> (MultiIndex, CoefMatrix) {
    let mut m = CoefMatrix::zeros(1, 1);
    m.set(0, 0, c);
    let mut a = alpha.to_vec();
    a.resize(dim, 0);
    (MultiIndex(a), m)
}

fn entry(dim: usize, rows: usize, cols: usize, alpha: &[usize], r: usize, c: usize, p: TrigPoly) -> (MultiIndex, CoefMatrix) {
    let mut m = CoefMatrix::zeros(rows, cols);
    m.set(r, c, p);
    let mut a = alpha.to_vec();
    a.resize(dim, 0);
    (MultiIndex(a), m)
}

pub fn gradient(dim: usize) -> DiffOperator {
    let terms = (0..dim).map(|d| entry(dim, dim, 1, &MultiIndex::unit(dim, d).0, d, 0, TrigPoly::real(1.0))).collect();
    DiffOperator::new(&format!("gradient{dim}d"), dim, 1, dim, terms).expect("gradient terms are well formed")
}

pub fn laplacian(dim: usize) -> DiffOperator {
    let terms = (0..dim).map(|d| scalar(dim, &MultiIndex::unit(dim, d).add(&MultiIndex::unit(dim, d)).0, TrigPoly::real(1.0))).collect();
    DiffOperator::new(&format!("laplacian{dim}d"), dim, 1, 1, terms).expect("laplacian terms are well formed")
}

/// {dx, dy + i c(x) dx} with c(x) = amp sin(x_0): first-order elliptic for any real amp.
pub fn varcoef_first_order(amp: f64) -> DiffOperator {
    let c = TrigPoly::sin(C64::new(0.0, amp), [1.0, 0.0, 0.0]);
    let terms = vec![
        entry(2, 2, 1, &[1, 0], 0, 0, TrigPoly::real(1.0)),
        entry(2, 2, 1, &[0, 1], 1, 0, TrigPoly::real(1.0)),
        entry(2, 2, 1, &[1, 0], 1, 0, c),
    ];
    DiffOperator::new("varcoef_first_order", 2, 1, 2, terms).expect("first-order system terms are well formed")
}

/// (1 + amp sin x) dxx + dyy + amp cos(y) dx + amp/2: elliptic for |amp| < 1.
pub fn varcoef_second_order(amp: f64) -> DiffOperator {
    let a = TrigPoly::real(1.0).plus(&TrigPoly::sin(C64::new(amp, 0.0), [1.0, 0.0, 0.0]));
    let terms = vec![
        scalar(2, &[2, 0], a),
        scalar(2, &[0, 2], TrigPoly::real(1.0)),
        scalar(2, &[1, 0], TrigPoly::cos(C64::new(amp, 0.0), [0.0, 1.0, 0.0])),
        scalar(2, &[0, 0], TrigPoly::real(amp / 2.0)),
    ];
    DiffOperator::new("varcoef_second_order", 2, 1, 1, terms).expect("second-order terms are well formed")
}

/// a(x) dx + b on N = 1 with a = a0 + a1 sin(k x).
pub fn varcoef_1d(a0: f64, a1: f64, k: f64, b: f64) -> DiffOperator {
    let a = TrigPoly::real(a0).plus(&TrigPoly::sin(C64::new(a1, 0.0), [k, 0.0, 0.0]));
    let mut terms = vec![scalar(1, &[1], a)];
    if b != 0.0 {
        terms.push(scalar(1, &[0], TrigPoly::real(b)));
    }
    DiffOperator::new("varcoef_1d", 1, 1, 1, terms).expect("1-D terms are well formed")
}

/// grad u + u (every component), the lower-order perturbation of the gradient.
pub fn gradient_shift(dim: usize, shift: f64) -> DiffOperator {
    let mut op = gradient(dim);
    let mut m = CoefMatrix::zeros(dim, 1);
    for d in 0..dim {
        m.set(d, 0, TrigPoly::real(shift));
    }
    op.terms.insert(0, (MultiIndex::zero(dim), m));
    op.name = format!("gradient_shift{dim}d");
    op
}

/// dx alone on N = 2 (scalar in, scalar out): the standard non-elliptic example.
pub fn dx_only() -> DiffOperator {
    DiffOperator::new("dx2d", 2, 1, 1, vec![scalar(2, &[1, 0], TrigPoly::real(1.0))]).expect("dx terms are well formed")
}

pub const REGISTRY: &[&str] =
    &["gradient2d", "gradient3d", "laplacian2d", "varcoef_first_order", "varcoef_second_order", "varcoef_1d", "gradient_shift2d", "dx2d"];

/// Operator by registry name; missing parameters take their documented defaults.
pub fn operator_by_name(name: &str, params: &BTreeMap<String, f64>) -> Result<DiffOperator> {
    let get = |k: &str, d: f64| params.get(k).copied().unwrap_or(d);
    let op = match name {
        "gradient2d" => gradient(2),
        "gradient3d" => gradient(3),
        "laplacian2d" => laplacian(2),
        "varcoef_first_order" => varcoef_first_order(get("c_amplitude", 0.3)),
        "varcoef_second_order" => {
            let amp = get("amplitude", 0.3);
            if amp.abs() >= 1.0 {
                return Err(Error::InvalidParameter(format!("varcoef_second_order needs |amplitude| < 1, got {amp}")));
            }
            varcoef_second_order(amp)
        }
        "varcoef_1d" => varcoef_1d(get("a0", 2.0), get("a1", 1.0), get("k", 1.0), get("b", 0.0)),
        "gradient_shift2d" => gradient_shift(2, get("shift", 1.0)),
        "dx2d" => dx_only(),
        other => return Err(Error::InvalidParameter(format!("unknown operator `{other}`"))),
    };
    Ok(match (params.get("domain_radius"), params.get("domain_center_0")) {
        (Some(&r), c0) => {
            let c = [c0.copied().unwrap_or(0.0), get("domain_center_1", 0.0), get("domain_center_2", 0.0)];
            op.with_domain(c, r)
        }
        _ => op,
    })
}

/// sum_x <a, b> h^N over all channels.
pub fn l2_pairing(a: &GridFunction, b: &GridFunction) -> Result<C64> {
    if a.channels != b.channels {
        return Err(Error::ChannelMismatch { expected: a.channels, got: b.channels });
    }
    Ok(a.values.iter().zip(&b.values).map(|(x, y)| x * y.conj()).sum::<C64>() * a.spec.cell_volume())
}

/// |<A phi, psi> - <phi, A* psi>| / (|A phi|_2 |psi|_2 + |phi|_2 |A* psi|_2).
pub fn duality_defect(a: &DiffOperator, a_star: &DiffOperator, phi: &GridFunction, psi: &GridFunction) -> Result<f64> {
    let aphi = apply(a, phi)?;
    let apsi = apply(a_star, psi)?;
    let lhs = l2_pairing(&aphi, psi)?;
    let rhs = l2_pairing(phi, &apsi)?;
    let h = phi.spec.cell_volume();
    let scale = (l2(&aphi) * l2(psi) + l2(phi) * l2(&apsi)) * h;
    Ok(if scale > 0.0 { (lhs - rhs).norm() / scale } else { 0.0 })
}

/// max_{alpha, x} |a_alpha(x) - b_alpha(x)| over `points`.
pub fn coefficient_distance(a: &DiffOperator, b: &DiffOperator, points: &[Point]) -> f64 {
    let mut alphas: Vec<&MultiIndex> = a.terms.iter().map(|t| &t.0).chain(b.terms.iter().map(|t| &t.0)).collect();
    alphas.sort();
    alphas.dedup();
    let mut worst: f64 = 0.0;
    for alpha in alphas {
        for x in points {
            let d = a.coefficient(alpha, x) - b.coefficient(alpha, x);
            worst = worst.max(d.iter().map(|v| v.norm()).fold(0.0, f64::max));
        }
    }
    worst
}
