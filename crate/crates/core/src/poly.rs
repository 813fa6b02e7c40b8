//! Polynomial spaces, bump-weighted orthonormal bases on cubes, local projections,
//! Taylor polynomials and the Poincare deviation operator T.
//!
//! Polynomials live in shifted coordinates `z = (x - center) / scale`. A projector
//! on the cube `Q` uses `center = x_Q` and `scale = side(Q)`; the weight is the
//! radial bump `bump(|2z|^2)`, supported in the ball inscribed in the unit cube and
//! normalized to unit discrete mass, unless the caller supplies lattice weights.
//! Keeping the weight inside the inscribed ball is what lets the ball-restricted
//! projection P_{x,t,f} reproduce polynomials.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{bump, GridFunction, GridSpec, MultiIndex, Point, C64};
use crate::norms::ScaleSet;

/// Above this Gram condition number the basis is refused.
pub const MAX_CONDITION: f64 = 1e12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolySpace {
    pub dim: usize,
    pub max_degree: usize,
    pub monomials: Vec<MultiIndex>,
}

impl PolySpace {
    pub fn new(dim: usize, max_degree: usize) -> Self {
        PolySpace { dim, max_degree, monomials: MultiIndex::up_to(dim, max_degree) }
    }

    pub fn len(&self) -> usize {
        self.monomials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.monomials.is_empty()
    }

    pub fn index_of(&self, a: &MultiIndex) -> Option<usize> {
        self.monomials.iter().position(|m| m == a)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cube {
    pub center: Point,
    pub side: f64,
}

impl Cube {
    pub fn contains(&self, x: &Point, dim: usize) -> bool {
        (0..dim).all(|d| (x[d] - self.center[d]).abs() < self.side / 2.0)
    }

    pub fn inside_box(&self, spec: &GridSpec) -> bool {
        (0..spec.dim).all(|d| self.center[d].abs() + self.side / 2.0 <= spec.box_half_width)
    }

    pub fn scaled(&self, a: f64) -> Cube {
        Cube { center: self.center, side: a * self.side }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Polynomial {
    pub space: PolySpace,
    pub coeffs: Vec<C64>,
    pub center: Point,
    pub scale: f64,
}

impl Polynomial {
    pub fn zero(space: PolySpace, center: Point, scale: f64) -> Self {
        let coeffs = vec![C64::default(); space.len()];
        Polynomial { space, coeffs, center, scale }
    }

    pub fn shifted(&self, x: &Point) -> Point {
        let mut z = [0.0; 3];
        for d in 0..self.space.dim {
            z[d] = (x[d] - self.center[d]) / self.scale;
        }
        z
    }

    pub fn eval(&self, x: &Point) -> C64 {
        let z = self.shifted(x);
        self.space.monomials.iter().zip(&self.coeffs).map(|(a, c)| c * a.monomial(&z)).sum()
    }

    pub fn sample(&self, spec: &GridSpec) -> GridFunction {
        GridFunction::from_fn(*spec, |x| self.eval(x))
    }

    pub fn max_abs_coeff(&self) -> f64 {
        self.coeffs.iter().map(|c| c.norm()).fold(0.0, f64::max)
    }
}

/// Orthonormal polynomial basis on a cube under a discrete weighted inner product.
#[derive(Clone, Debug)]
pub struct PolyProjector {
    pub cube: Cube,
    pub space: PolySpace,
    /// Lattice cells carrying weight, with their shifted coordinates and weights (sum 1).
    pub cells: Vec<usize>,
    pub coords: Vec<Point>,
    pub weights: Vec<f64>,
    /// Row i holds pi_i in the monomial basis.
    pub basis_coeffs: Vec<Vec<f64>>,
    /// Row i holds pi_i at `cells`.
    pub basis_values: Vec<Vec<f64>>,
    pub gram_residual: f64,
    pub condition: f64,
    /// Continuum normalization of the built-in bump weight; None for caller weights.
    eta_norm: Option<f64>,
}

fn inscribed_bump(z: &Point, dim: usize) -> f64 {
    bump(4.0 * (0..dim).map(|d| z[d] * z[d]).sum::<f64>())
}

/// Cells of the open cube, with shifted coordinates.
fn cube_lattice(spec: &GridSpec, cube: &Cube) -> Vec<(usize, Point)> {
    let dim = spec.dim;
    let h = spec.h();
    let half = cube.side / 2.0;
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    for d in 0..dim {
        lo[d] = spec.nearest_index(cube.center[d] - half).saturating_sub(1);
        hi[d] = (spec.nearest_index(cube.center[d] + half) + 1).min(spec.points_per_axis - 1);
    }
    let mut out = Vec::new();
    let mut ix = lo;
    loop {
        let mut z = [0.0; 3];
        let mut inside = true;
        for d in 0..dim {
            z[d] = (-spec.box_half_width + ix[d] as f64 * h - cube.center[d]) / cube.side;
            inside &= z[d].abs() < 0.5;
        }
        if inside {
            out.push((spec.ravel(ix), z));
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

/// Bump-weighted projector on `cube` for polynomials of degree <= m - 1.
pub fn build_projector(spec: &GridSpec, cube: Cube, m: usize) -> Result<PolyProjector> {
    if m == 0 {
        return Err(Error::InvalidParameter("projector needs m >= 1".into()));
    }
    if !(cube.side > 0.0) || !cube.inside_box(spec) {
        return Err(Error::BallOutsideDomain);
    }
    let pts = cube_lattice(spec, &cube);
    let raw: Vec<f64> = pts.iter().map(|(_, z)| inscribed_bump(z, spec.dim)).collect();
    let mass: f64 = raw.iter().sum();
    if mass == 0.0 {
        return Err(Error::IllConditioned(f64::INFINITY));
    }
    let dz = (spec.h() / cube.side).powi(spec.dim as i32);
    let mut proj = finish(spec, cube, m, pts.iter().map(|p| p.0).collect(), pts.iter().map(|p| p.1).collect(), raw.iter().map(|w| w / mass).collect())?;
    proj.eta_norm = Some(1.0 / (mass * dz));
    Ok(proj)
}

/// Projector under caller-supplied nonnegative lattice weights (normalized here to unit sum).
pub fn build_projector_weighted(spec: &GridSpec, cube: Cube, m: usize, cells: &[(usize, f64)]) -> Result<PolyProjector> {
    if m == 0 {
        return Err(Error::InvalidParameter("projector needs m >= 1".into()));
    }
    let kept: Vec<(usize, f64)> = cells.iter().copied().filter(|&(_, w)| w > 0.0).collect();
    let mass: f64 = kept.iter().map(|c| c.1).sum();
    if !(mass > 0.0) || kept.iter().any(|c| !c.1.is_finite()) {
        return Err(Error::InvalidParameter("projector weights must be finite with positive mass".into()));
    }
    let coords = kept
        .iter()
        .map(|&(i, _)| {
            let x = spec.point(i);
            let mut z = [0.0; 3];
            for d in 0..spec.dim {
                z[d] = (x[d] - cube.center[d]) / cube.side;
            }
            z
        })
        .collect();
    finish(spec, cube, m, kept.iter().map(|c| c.0).collect(), coords, kept.iter().map(|c| c.1 / mass).collect())
}

fn finish(spec: &GridSpec, cube: Cube, m: usize, cells: Vec<usize>, coords: Vec<Point>, weights: Vec<f64>) -> Result<PolyProjector> {
    let space = PolySpace::new(spec.dim, m - 1);
    let k = space.len();
    let mono: Vec<Vec<f64>> = (0..k).map(|a| coords.iter().map(|z| space.monomials[a].monomial(z)).collect()).collect();
    let ip = |u: &[f64], v: &[f64]| -> f64 { u.iter().zip(v).zip(&weights).map(|((a, b), w)| a * b * w).sum() };

    let gram = DMatrix::from_fn(k, k, |a, b| ip(&mono[a], &mono[b]));
    let eig = SymmetricEigen::new(gram).eigenvalues;
    let (lo, hi) = eig.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    if !(condition <= MAX_CONDITION) {
        return Err(Error::IllConditioned(condition));
    }

    // Modified Gram-Schmidt with one reorthogonalization pass.
    let mut values: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut coeffs: Vec<Vec<f64>> = Vec::with_capacity(k);
    for a in 0..k {
        let mut v = mono[a].clone();
        let mut c = vec![0.0; k];
        c[a] = 1.0;
        for _pass in 0..2 {
            for j in 0..values.len() {
                let r = ip(&v, &values[j]);
                v.iter_mut().zip(&values[j]).for_each(|(x, q)| *x -= r * q);
                c.iter_mut().zip(&coeffs[j]).for_each(|(x, q)| *x -= r * q);
            }
        }
        let norm = ip(&v, &v).sqrt();
        if !(norm > 0.0) {
            return Err(Error::IllConditioned(f64::INFINITY));
        }
        v.iter_mut().for_each(|x| *x /= norm);
        c.iter_mut().for_each(|x| *x /= norm);
        values.push(v);
        coeffs.push(c);
    }
    let mut residual: f64 = 0.0;
    for i in 0..k {
        for j in 0..k {
            let g = ip(&values[i], &values[j]);
            residual = residual.max((g - if i == j { 1.0 } else { 0.0 }).abs());
        }
    }
    Ok(PolyProjector { cube, space, cells, coords, weights, basis_coeffs: coeffs, basis_values: values, gram_residual: residual, condition, eta_norm: None })
}

impl PolyProjector {
    fn to_monomial(&self, c: &[C64]) -> Vec<C64> {
        let k = self.space.len();
        let mut out = vec![C64::default(); k];
        for (ci, row) in c.iter().zip(&self.basis_coeffs) {
            for a in 0..k {
                out[a] += ci * row[a];
            }
        }
        out
    }

    /// P_{Q,f}, optionally with f restricted sharply to the open ball B(x, t).
    pub fn project(&self, f: &GridFunction, restrict: Option<(Point, f64)>) -> Result<Polynomial> {
        if f.channels != 1 {
            return Err(Error::ChannelMismatch { expected: 1, got: f.channels });
        }
        let dim = f.spec.dim;
        let keep: Vec<bool> = match restrict {
            None => vec![true; self.cells.len()],
            Some((x, t)) => self.cells.iter().map(|&i| crate::grid::dist2(&f.spec.point(i), &x, dim) < t * t).collect(),
        };
        let c: Vec<C64> = self
            .basis_values
            .iter()
            .map(|pi| {
                let mut s = C64::default();
                for j in 0..self.cells.len() {
                    if keep[j] {
                        s += f.values[self.cells[j]] * pi[j] * self.weights[j];
                    }
                }
                s
            })
            .collect();
        Ok(Polynomial { space: self.space.clone(), coeffs: self.to_monomial(&c), center: self.cube.center, scale: self.cube.side })
    }

    /// The i-th orthonormal basis polynomial.
    pub fn basis_polynomial(&self, i: usize) -> Polynomial {
        let coeffs = self.basis_coeffs[i].iter().map(|&v| C64::new(v, 0.0)).collect();
        Polynomial { space: self.space.clone(), coeffs, center: self.cube.center, scale: self.cube.side }
    }

    /// d_x^alpha d_y^beta phi_Q(x, y) for the built-in weight, |alpha|, |beta| <= 1.
    pub fn kernel_derivative(&self, alpha: &MultiIndex, beta: &MultiIndex, x: &Point, y: &Point) -> Result<f64> {
        let kappa = self.eta_norm.ok_or(Error::InvalidParameter("kernel derivatives need the built-in weight".into()))?;
        if alpha.order() > 1 || beta.order() > 1 {
            return Err(Error::OrderTooHigh(alpha.order().max(beta.order())));
        }
        let dim = self.space.dim;
        let l = self.cube.side;
        let shift = |p: &Point| {
            let mut z = [0.0; 3];
            for d in 0..dim {
                z[d] = (p[d] - self.cube.center[d]) / l;
            }
            z
        };
        let (zx, zy) = (shift(x), shift(y));
        let eta = kappa * inscribed_bump(&zy, dim);
        let eta_d = match beta.0.iter().position(|&b| b == 1) {
            None => eta,
            Some(d) => {
                let s = 4.0 * (0..dim).map(|e| zy[e] * zy[e]).sum::<f64>();
                if s >= 1.0 {
                    0.0
                } else {
                    -eta / (1.0 - s).powi(2) * 8.0 * zy[d]
                }
            }
        };
        let mut acc = 0.0;
        for row in &self.basis_coeffs {
            let px = poly_derivative(&self.space, row, alpha, &zx);
            let py = poly_derivative(&self.space, row, &MultiIndex::zero(dim), &zy);
            let term = if beta.order() == 0 {
                py * eta
            } else {
                poly_derivative(&self.space, row, beta, &zy) * eta + py * eta_d
            };
            acc += px * term;
        }
        Ok(acc * l.powi(-(dim as i32) - alpha.order() as i32 - beta.order() as i32))
    }
}

/// d_z^alpha of sum_a c_a z^a.
fn poly_derivative(space: &PolySpace, coeffs: &[f64], alpha: &MultiIndex, z: &Point) -> f64 {
    let mut acc = 0.0;
    for (a, c) in space.monomials.iter().zip(coeffs) {
        if !alpha.le(a) {
            continue;
        }
        let rest = a.sub(alpha);
        acc += c * (a.factorial() / rest.factorial()) * rest.monomial(z);
    }
    acc
}

/// Weighted least-squares fit in P_{m-1}, shifted coordinates `(x - center) / scale`.
/// Solved by SVD pseudo-inverse, so the normal equations (and hence the vanishing
/// weighted moments of the residual) hold even when the cells cannot pin down
/// every coefficient.
pub fn weighted_fit(spec: &GridSpec, cells: &[usize], weights: &[f64], values: &[C64], center: Point, scale: f64, m: usize) -> Polynomial {
    let space = PolySpace::new(spec.dim, m.saturating_sub(1));
    let k = space.len();
    let rows = cells.len();
    let zs: Vec<Point> = cells
        .iter()
        .map(|&i| {
            let x = spec.point(i);
            let mut z = [0.0; 3];
            for d in 0..spec.dim {
                z[d] = (x[d] - center[d]) / scale;
            }
            z
        })
        .collect();
    let a = DMatrix::from_fn(rows, k, |r, c| weights[r].sqrt() * space.monomials[c].monomial(&zs[r]));
    let b = DMatrix::from_fn(rows, 2, |r, c| {
        let v = values[r] * weights[r].sqrt();
        if c == 0 {
            v.re
        } else {
            v.im
        }
    });
    let svd = a.svd(true, true);
    let tol = svd.singular_values.max() * 1e-12 * (rows.max(k) as f64);
    let sol = svd.solve(&b, tol).unwrap_or_else(|_| DMatrix::zeros(k, 2));
    let coeffs = (0..k).map(|c| C64::new(sol[(c, 0)], sol[(c, 1)])).collect();
    Polynomial { space, coeffs, center, scale }
}

/// Taylor polynomial of degree `degree` at `x0`, with spectral derivatives.
pub fn taylor_poly(f: &GridFunction, x0: &Point, degree: usize) -> Result<Polynomial> {
    if degree > 5 {
        return Err(Error::OrderTooHigh(degree));
    }
    if f.channels != 1 {
        return Err(Error::ChannelMismatch { expected: 1, got: f.channels });
    }
    let space = PolySpace::new(f.spec.dim, degree);
    let coeffs = space.monomials.iter().map(|a| f.eval_fourier(0, x0, a) / a.factorial()).collect();
    Ok(Polynomial { space, coeffs, center: *x0, scale: 1.0 })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoincareOptions {
    /// Evaluation sublattice stride; 1 evaluates every lattice point.
    pub stride: usize,
}

impl Default for PoincareOptions {
    fn default() -> Self {
        PoincareOptions { stride: 4 }
    }
}

/// Tf on an evaluation sublattice, with every per-scale average kept.
#[derive(Clone, Debug)]
pub struct PoincareField {
    pub spec: GridSpec,
    pub stride: usize,
    pub scales: Vec<f64>,
    /// Lattice indices of the evaluation points.
    pub points: Vec<usize>,
    /// Tf at `points`.
    pub values: Vec<f64>,
    /// `per_scale[s][j]`: (avg over B(x_j, t_s) of |(f - P)/t^m|^alpha)^(1/alpha).
    pub per_scale: Vec<Vec<f64>>,
}

impl PoincareField {
    /// (sum_j Tf(x_j)^p * (stride h)^N)^(1/p).
    pub fn lp(&self, p: f64) -> f64 {
        let cell = (self.stride as f64 * self.spec.h()).powi(self.spec.dim as i32);
        (self.values.iter().map(|v| v.powf(p)).sum::<f64>() * cell).powf(1.0 / p)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().cloned().fold(0.0, f64::max)
    }

    /// Full-resolution field with Tf at evaluation points and 0 elsewhere.
    pub fn to_grid(&self) -> GridFunction {
        let mut g = GridFunction::zeros(self.spec, 1);
        for (&i, &v) in self.points.iter().zip(&self.values) {
            g.values[i] = C64::new(v, 0.0);
        }
        g
    }
}

/// Translation-invariant pieces of P_{x,t,f} for lattice centres x.
struct Template {
    offsets: Vec<[i64; 3]>,
    basis: Vec<Vec<f64>>,
    weights: Vec<f64>,
}

fn template(spec: &GridSpec, t: f64, m: usize) -> Result<Template> {
    let dim = spec.dim;
    let origin = spec.points_per_axis / 2;
    let proj = build_projector(spec, Cube { center: [0.0; 3], side: 2.0 * t }, m)?;
    let mut offsets = Vec::new();
    let mut basis = vec![Vec::new(); proj.basis_values.len()];
    let mut weights = Vec::new();
    for (j, &cell) in proj.cells.iter().enumerate() {
        // Sharp restriction to the open ball B(x, t), whose cells contain all the weight.
        let z = proj.coords[j];
        if 4.0 * (0..dim).map(|d| z[d] * z[d]).sum::<f64>() >= 1.0 {
            continue;
        }
        let ix = spec.unravel(cell);
        let mut o = [0i64; 3];
        for d in 0..dim {
            o[d] = ix[d] as i64 - origin as i64;
        }
        offsets.push(o);
        for (i, row) in proj.basis_values.iter().enumerate() {
            basis[i].push(row[j]);
        }
        weights.push(proj.weights[j]);
    }
    Ok(Template { offsets, basis, weights })
}

/// T f(x) = sup_t ( avg_{B(x,t)} |(f - P_{x,t,f}) / t^m|^alpha )^(1/alpha), where
/// P_{x,t,f} projects f restricted to B(x, t) on the cube Q(x, 2t).
pub fn poincare_lhs(f: &GridFunction, m: usize, alpha: f64, scales: &ScaleSet, opts: &PoincareOptions) -> Result<PoincareField> {
    if f.channels != 1 {
        return Err(Error::ChannelMismatch { expected: 1, got: f.channels });
    }
    if !(alpha >= 1.0) {
        return Err(Error::OutOfRange(format!("poincare alpha must be >= 1, got {alpha}")));
    }
    if m == 0 {
        return Err(Error::InvalidParameter("poincare needs m >= 1".into()));
    }
    scales.validate()?;
    let spec = f.spec;
    let dim = spec.dim;
    let stride = opts.stride.max(1);
    let ts = scales.scales.clone();
    let t_max = ts[0];
    let templates: Vec<Template> = ts.iter().map(|&t| template(&spec, t, m)).collect::<Result<_>>()?;

    let n = spec.points_per_axis;
    let mut points = Vec::new();
    for i in 0..spec.len() {
        let ix = spec.unravel(i);
        if (0..dim).any(|d| ix[d] % stride != 0) {
            continue;
        }
        let x = spec.point(i);
        if (0..dim).all(|d| x[d].abs() + t_max <= spec.box_half_width) {
            points.push(i);
        }
    }
    if points.is_empty() {
        return Err(Error::BallOutsideDomain);
    }

    let mut per_scale = vec![vec![0.0; points.len()]; ts.len()];
    let scale_rows: Vec<Vec<f64>> = {
        use rayon::prelude::*;
        points
            .par_iter()
            .map(|&i| {
                let x = spec.point(i);
                let ix = spec.unravel(i);
                let mut row = vec![0.0; ts.len()];
                for (s, tpl) in templates.iter().enumerate() {
                    let t = ts[s];
                    if let Some(sup) = f.support {
                        if crate::grid::dist2(&x, &sup.center, dim).sqrt() >= sup.radius + t {
                            continue;
                        }
                    }
                    let vals: Vec<C64> = tpl
                        .offsets
                        .iter()
                        .map(|o| {
                            let mut j = [0usize; 3];
                            for d in 0..dim {
                                j[d] = (ix[d] as i64 + o[d]) as usize;
                            }
                            debug_assert!(j.iter().take(dim).all(|&v| v < n));
                            f.values[spec.ravel(j)]
                        })
                        .collect();
                    let c: Vec<C64> = tpl.basis.iter().map(|pi| vals.iter().zip(pi).zip(&tpl.weights).map(|((v, p), w)| v * p * w).sum()).collect();
                    let scale = t.powi(m as i32);
                    let mut acc = 0.0;
                    for (j, v) in vals.iter().enumerate() {
                        let p: C64 = c.iter().zip(&tpl.basis).map(|(ci, pi)| ci * pi[j]).sum();
                        acc += ((v - p).norm() / scale).powf(alpha);
                    }
                    row[s] = (acc / vals.len() as f64).powf(1.0 / alpha);
                }
                row
            })
            .collect()
    };
    let mut values = vec![0.0; points.len()];
    for (j, row) in scale_rows.iter().enumerate() {
        for s in 0..ts.len() {
            per_scale[s][j] = row[s];
            values[j] = f64::max(values[j], row[s]);
        }
    }
    Ok(PoincareField { spec, stride, scales: ts, points, values, per_scale })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{ball_cells, derivative, sample, DerivMethod, TestFamily};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn spec1() -> GridSpec {
        GridSpec::new(1, 2.0, 256, 0.1).unwrap()
    }

    #[test]
    fn space_sizes() {
        assert_eq!(PolySpace::new(2, 2).len(), 6);
        assert_eq!(PolySpace::new(3, 3).len(), 20);
        assert_eq!(PolySpace::new(1, 0).len(), 1);
    }

    #[test]
    fn constant_basis_for_m1() {
        let p = build_projector(&spec1(), Cube { center: [0.1, 0.0, 0.0], side: 0.5 }, 1).unwrap();
        assert_eq!(p.basis_coeffs.len(), 1);
        assert!((p.basis_coeffs[0][0] - 1.0).abs() < 1e-14);
        assert!(p.gram_residual < 1e-13);
    }

    #[test]
    fn symmetric_weight_gives_odd_second_basis() {
        let p = build_projector(&spec1(), Cube { center: [0.0; 3], side: 0.5 }, 2).unwrap();
        // pi_2 = c * z exactly when the lattice weight is symmetric.
        assert!(p.basis_coeffs[1][0].abs() < 1e-12);
        let ip: f64 = p.basis_values[0].iter().zip(&p.basis_values[1]).zip(&p.weights).map(|((a, b), w)| a * b * w).sum();
        assert!(ip.abs() < 1e-14);
    }

    #[test]
    fn basis_matches_cholesky_oracle() {
        let spec = spec1();
        let cube = Cube { center: [0.3, 0.0, 0.0], side: 0.75 };
        let p = build_projector(&spec, cube, 3).unwrap();
        // Oracle: G = L L^T on the monomial Gram matrix; rows of L^{-1} are the
        // coefficients of the same (triangular, positive-leading) orthonormal basis.
        let k = 3;
        let g = DMatrix::from_fn(k, k, |a, b| p.coords.iter().zip(&p.weights).map(|(z, w)| z[0].powi((a + b) as i32) * w).sum::<f64>());
        let l = g.cholesky().unwrap().l();
        let linv = l.try_inverse().unwrap();
        for i in 0..k {
            for a in 0..k {
                assert!((p.basis_coeffs[i][a] - linv[(i, a)]).abs() < 1e-9 * linv[(i, a)].abs().max(1.0), "{i},{a}");
            }
        }
    }

    #[test]
    fn ill_conditioned_is_reported() {
        let spec = GridSpec::new(1, 2.0, 32, 0.1).unwrap();
        let r = build_projector(&spec, Cube { center: [0.0; 3], side: 0.3 }, 5);
        assert!(matches!(r, Err(Error::IllConditioned(_))));
    }

    #[test]
    fn projection_reproduces_polynomials_and_zero() {
        let spec = GridSpec::new(2, 2.0, 128, 0.1).unwrap();
        let proj = build_projector(&spec, Cube { center: [0.2, -0.1, 0.0], side: 0.5 }, 3).unwrap();
        let f = GridFunction::from_fn(spec, |x| C64::new(1.0 - 2.0 * x[0] + 0.5 * x[0] * x[1] + x[1] * x[1], 0.3 * x[1]));
        let p = proj.project(&f, None).unwrap();
        for i in 0..spec.len() {
            assert!((p.eval(&spec.point(i)) - f.values[i]).norm() < 1e-9);
        }
        let z = proj.project(&GridFunction::zeros(spec, 1), None).unwrap();
        assert_eq!(z.max_abs_coeff(), 0.0);
    }

    #[test]
    fn affine_fit_of_square_matches_normal_equations() {
        let spec = spec1();
        let proj = build_projector(&spec, Cube { center: [0.0; 3], side: 1.0 }, 2).unwrap();
        let f = GridFunction::from_fn(spec, |x| C64::new(x[0] * x[0], 0.0));
        let p = proj.project(&f, None).unwrap();
        // Weighted least squares in z: minimize sum w (z^2 - a - b z)^2 (x = z here).
        let mom = |k: i32| proj.coords.iter().zip(&proj.weights).map(|(z, w)| z[0].powi(k) * w).sum::<f64>();
        let g = nalgebra::Matrix2::new(mom(0), mom(1), mom(1), mom(2));
        let rhs = nalgebra::Vector2::new(mom(2), mom(3));
        let sol = g.lu().solve(&rhs).unwrap();
        assert!((p.coeffs[0].re - sol[0]).abs() < 1e-12);
        assert!((p.coeffs[1].re - sol[1]).abs() < 1e-12);
    }

    #[test]
    fn projection_is_idempotent() {
        let spec = GridSpec::new(2, 2.0, 128, 0.1).unwrap();
        let proj = build_projector(&spec, Cube { center: [0.0; 3], side: 0.5 }, 2).unwrap();
        let f = sample(&TestFamily::new("gaussian_bump", &[("width", 0.15)]), &spec, 1).unwrap();
        let p = proj.project(&f, None).unwrap();
        let q = proj.project(&p.sample(&spec), None).unwrap();
        for (a, b) in p.coeffs.iter().zip(&q.coeffs) {
            assert!((a - b).norm() < 1e-9 * p.max_abs_coeff().max(1.0));
        }
    }

    #[test]
    fn weighted_projector_reproduces() {
        let spec = spec1();
        let cube = Cube { center: [0.0; 3], side: 0.5 };
        let cells: Vec<(usize, f64)> = (0..spec.len()).filter(|&i| cube.contains(&spec.point(i), 1)).map(|i| (i, 1.0 + spec.point(i)[0])).collect();
        let proj = build_projector_weighted(&spec, cube, 3, &cells).unwrap();
        assert!(proj.gram_residual < 1e-10);
        let f = GridFunction::from_fn(spec, |x| C64::new(2.0 - x[0] * x[0], 0.0));
        let p = proj.project(&f, None).unwrap();
        assert!((p.eval(&[1.5, 0.0, 0.0]).re - (2.0 - 2.25)).abs() < 1e-9);
    }

    #[test]
    fn kernel_bound_is_scale_stable() {
        let spec = GridSpec::new(1, 2.0, 1024, 0.1).unwrap();
        let mut consts = Vec::new();
        for j in 1..=4 {
            let l = 0.5f64.powi(j);
            let proj = build_projector(&spec, Cube { center: [0.0; 3], side: l }, 2).unwrap();
            let mut best: f64 = 0.0;
            for a in 0..=1usize {
                for b in 0..=1usize {
                    let (am, bm) = (MultiIndex(vec![a]), MultiIndex(vec![b]));
                    for &xi in proj.cells.iter().step_by(2) {
                        for &yi in &proj.cells {
                            let (x, y) = (spec.point(xi), spec.point(yi));
                            let x2 = [2.0 * x[0], 0.0, 0.0];
                            let v = proj.kernel_derivative(&am, &bm, &x2, &y).unwrap().abs();
                            best = best.max(v * l.powi(1 + (a + b) as i32));
                        }
                    }
                }
            }
            consts.push(best);
        }
        let (lo, hi) = consts.iter().fold((f64::INFINITY, 0.0f64), |(l, h), &v| (l.min(v), h.max(v)));
        assert!(hi / lo <= 2.0, "{consts:?}");
    }

    #[test]
    fn kernel_integrates_to_reproduction() {
        let spec = spec1();
        let proj = build_projector(&spec, Cube { center: [0.25, 0.0, 0.0], side: 0.5 }, 2).unwrap();
        let x = [0.6, 0.0, 0.0];
        let h = spec.h();
        let s: f64 = proj.cells.iter().map(|&i| proj.kernel_derivative(&MultiIndex(vec![0]), &MultiIndex(vec![0]), &x, &spec.point(i)).unwrap() * spec.point(i)[0] * h).sum();
        assert!((s - 0.6).abs() < 1e-12);
    }

    #[test]
    fn taylor_reproduces_polynomial_and_degree0() {
        let spec = GridSpec::new(1, 4.0, 256, 0.1).unwrap();
        let f = sample(&TestFamily::new("polynomial_bump", &[("c0", 1.0), ("c1", -2.0), ("c3", 0.5), ("radius", 2.0), ("edge", 0.2)]), &spec, 1).unwrap();
        let x0 = [0.3, 0.0, 0.0];
        let p = taylor_poly(&f, &x0, 3).unwrap();
        let want = [1.0 - 0.6 + 0.5 * 0.027, -2.0 + 1.5 * 0.09, 1.5 * 0.3, 0.5];
        for (c, w) in p.coeffs.iter().zip(want) {
            assert!((c.re - w).abs() < 1e-8, "{c} {w}");
        }
        let p0 = taylor_poly(&f, &x0, 0).unwrap();
        assert!((p0.coeffs[0].re - f.eval_fourier(0, &x0, &MultiIndex(vec![0])).re).abs() < 1e-14);
        assert!(matches!(taylor_poly(&f, &x0, 6), Err(Error::OrderTooHigh(6))));
    }

    #[test]
    fn taylor_remainder_constant_is_dimensional() {
        let spec = GridSpec::new(2, 2.0, 128, 0.1).unwrap();
        let f = sample(&TestFamily::new("gaussian_bump", &[("width", 0.2)]), &spec, 1).unwrap();
        let m = 2usize;
        let x0 = [0.125, 0.0625, 0.0];
        let mut dm: f64 = 0.0;
        for a in MultiIndex::of_order(2, m) {
            dm = dm.max(derivative(&f, &a, DerivMethod::Spectral).unwrap().max_magnitude());
        }
        let bound = 2f64.powi(m as i32) / crate::grid::factorial(m);
        for t in [0.125, 0.0625] {
            let p = taylor_poly(&f, &x0, m - 1).unwrap();
            let err = ball_cells(&spec, &x0, t).iter().map(|&i| (f.values[i] - p.eval(&spec.point(i))).norm()).fold(0.0, f64::max);
            let c = err / (t.powi(m as i32) * dm);
            assert!(c <= bound, "t={t} C={c}");
        }
    }

    #[test]
    fn random_polynomial_reproduction_on_doubled_cube() {
        let spec = GridSpec::new(2, 2.0, 128, 0.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..5 {
            let space = PolySpace::new(2, 2);
            let cube = Cube { center: [rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), 0.0], side: 0.5 };
            let proj = build_projector(&spec, cube, 3).unwrap();
            let coeffs: Vec<C64> = (0..space.len()).map(|_| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect();
            let truth = Polynomial { space, coeffs, center: cube.center, scale: cube.side };
            let p = proj.project(&truth.sample(&spec), None).unwrap();
            let big = cube.scaled(2.0);
            let mut err: f64 = 0.0;
            let mut top: f64 = 0.0;
            for i in 0..spec.len() {
                let x = spec.point(i);
                if big.contains(&x, 2) {
                    err = err.max((p.eval(&x) - truth.eval(&x)).norm());
                    top = top.max(truth.eval(&x).norm());
                }
            }
            assert!(err <= 1e-8 * top, "{err} {top}");
        }
    }

    #[test]
    fn poincare_vanishes_on_interior_polynomials() {
        let spec = GridSpec::new(2, 2.0, 128, 0.1).unwrap();
        let f = sample(&TestFamily::new("polynomial_bump", &[("c0_0", 1.0), ("c1_0", 0.5), ("c0_1", -1.0), ("radius", 1.0), ("edge", 0.1)]), &spec, 1).unwrap();
        let field = poincare_lhs(&f, 2, 1.0, &ScaleSet::dyadic(3, false), &PoincareOptions { stride: 8 }).unwrap();
        for (&i, &v) in field.points.iter().zip(&field.values) {
            let x = spec.point(i);
            if (x[0] * x[0] + x[1] * x[1]).sqrt() + 0.5 < 0.6 {
                assert!(v < 1e-9, "{x:?} {v}");
            }
        }
    }

    /// Dense oracle: weighted normal equations on the ball cells of one (x, t).
    fn dense_poincare(f: &GridFunction, x: &Point, t: f64, m: usize, alpha: f64) -> f64 {
        let spec = f.spec;
        let h = spec.h();
        let cells = ball_cells(&spec, x, t);
        let k = m;
        let zs: Vec<f64> = cells.iter().map(|&i| (spec.point(i)[0] - x[0]) / (2.0 * t)).collect();
        // Bump weight over the cube Q(x, 2t), normalized over the whole cube.
        let all: f64 = (0..spec.len()).map(|i| (spec.point(i)[0] - x[0]) / (2.0 * t)).filter(|z| z.abs() < 0.5).map(|z| bump(4.0 * z * z)).sum();
        let ws: Vec<f64> = zs.iter().map(|z| bump(4.0 * z * z) / all).collect();
        let g = DMatrix::from_fn(k, k, |a, b| {
            let all_cells: f64 = (0..spec.len())
                .map(|i| (spec.point(i)[0] - x[0]) / (2.0 * t))
                .filter(|z| z.abs() < 0.5)
                .map(|z| bump(4.0 * z * z) / all * z.powi((a + b) as i32))
                .sum();
            all_cells
        });
        let rhs = nalgebra::DVector::from_fn(k, |a, _| cells.iter().zip(&zs).zip(&ws).map(|((&i, z), w)| f.values[i].re * z.powi(a as i32) * w).sum::<f64>());
        let c = g.lu().solve(&rhs).unwrap();
        let _ = h;
        let mut acc = 0.0;
        for (&i, z) in cells.iter().zip(&zs) {
            let p: f64 = (0..k).map(|a| c[a] * z.powi(a as i32)).sum();
            acc += ((f.values[i].re - p).abs() / t.powi(m as i32)).powf(alpha);
        }
        (acc / cells.len() as f64).powf(1.0 / alpha)
    }

    #[test]
    fn poincare_matches_dense_oracle_for_monomial() {
        let spec = GridSpec::new(1, 2.0, 256, 0.1).unwrap();
        let m = 2;
        let f = sample(&TestFamily::new("polynomial_bump", &[("c2", 0.5), ("radius", 1.0), ("edge", 0.1)]), &spec, 1).unwrap();
        let scales = ScaleSet { scales: vec![0.25], includes_cell_scale: false, global: false };
        let field = poincare_lhs(&f, m, 1.2, &scales, &PoincareOptions { stride: 1 }).unwrap();
        for &xv in &[0.0, 0.1875, -0.3125] {
            let i = spec.nearest_index(xv);
            let j = field.points.iter().position(|&p| p == i).unwrap();
            let want = dense_poincare(&f, &spec.point(i), 0.25, m, 1.2);
            assert!((field.values[j] - want).abs() < 1e-6 * want.max(1e-300), "{} {want}", field.values[j]);
        }
    }

    #[test]
    fn weighted_fit_residual_has_vanishing_moments() {
        let spec = GridSpec::new(2, 2.0, 64, 0.1).unwrap();
        let cells: Vec<usize> = (0..spec.len()).filter(|&i| {
            let x = spec.point(i);
            x[0].abs() < 0.2 && (x[1] - 0.1).abs() < 0.15
        }).collect();
        let weights: Vec<f64> = cells.iter().map(|&i| 1.0 + spec.point(i)[0]).collect();
        let values: Vec<C64> = cells.iter().map(|&i| C64::new(spec.point(i)[0].exp(), spec.point(i)[1].sin())).collect();
        let p = weighted_fit(&spec, &cells, &weights, &values, [0.0, 0.1, 0.0], 0.4, 2);
        for a in MultiIndex::up_to(2, 1) {
            let mom: C64 = cells.iter().zip(&weights).zip(&values).map(|((&i, w), v)| (v - p.eval(&spec.point(i))) * w * a.monomial(&p.shifted(&spec.point(i)))).sum();
            assert!(mom.norm() < 1e-13, "{a:?} {mom}");
        }
        // A single cell cannot fix an affine fit; the residual still vanishes there.
        let one = weighted_fit(&spec, &cells[..1], &weights[..1], &values[..1], [0.0, 0.1, 0.0], 0.4, 2);
        assert!((one.eval(&spec.point(cells[0])) - values[0]).norm() < 1e-13);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]

        #[test]
        fn poincare_is_homogeneous(c in -3.0f64..3.0, w in 0.1f64..0.25) {
            let spec = GridSpec::new(1, 2.0, 128, 0.1).unwrap();
            let f = sample(&TestFamily::new("gaussian_bump", &[("width", w)]), &spec, 1).unwrap();
            let sc = ScaleSet::dyadic(3, false);
            let opts = PoincareOptions { stride: 4 };
            let a = poincare_lhs(&f, 1, 1.0, &sc, &opts).unwrap();
            let b = poincare_lhs(&f.scaled(C64::new(c, 0.0)), 1, 1.0, &sc, &opts).unwrap();
            for (x, y) in a.values.iter().zip(&b.values) {
                prop_assert!((y - c.abs() * x).abs() <= 1e-12 * (1.0 + y.abs()));
            }
        }
    }
}
