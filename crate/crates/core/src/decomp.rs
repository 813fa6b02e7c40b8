//! Goldberg split, rough atoms, Whitney-cube Calderon-Zygmund decompositions and
//! the finite atomic ladder built from them.
//!
//! Atoms and bad parts are stored sparsely (cells + values); a full-grid copy per
//! term would not fit in memory once the ladder emits thousands of terms.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{bump, convolve_scaled, dist2, lp_norm, GridFunction, GridSpec, MultiIndex, Point, Profile, C64};
use crate::norms::{bmo_norm, gamma_p, grand_maximal, holder_seminorm, hp_norm, nontangential_maximal, np_exponent, MaximalDictionary, ScaleSet};
use crate::poly::{weighted_fit, Polynomial};

/// verify_atom tolerances.
pub const SIZE_TOL: f64 = 1e-9;
pub const MOMENT_TOL: f64 = 1e-7;
/// Whitney expansion Q -> Q*.
pub const EXPANSION: f64 = 9.0 / 8.0;
/// Documented bound on |g| / alpha for levels alpha >= max(M f) / 8.
pub const GOOD_CONSTANT_BOUND: f64 = 32.0;
/// The ladder counts as diverged when the final residual seminorm exceeds the
/// first-level one by more than this factor; coarse lattices wobble by a few percent
/// before the level sets are deep enough to shrink the residual.
pub const DIVERGENCE_FACTOR: f64 = 1.25;
/// Ladder pieces below this fraction of |f1|_inf are folded into the residual.
pub const NOISE_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparseField {
    pub cells: Vec<usize>,
    pub values: Vec<C64>,
}

impl SparseField {
    fn from_map(map: BTreeMap<usize, C64>) -> Self {
        let (cells, values) = map.into_iter().unzip();
        SparseField { cells, values }
    }

    pub fn sup(&self) -> f64 {
        self.values.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn add_into(&self, g: &mut GridFunction, scale: C64) {
        for (&i, v) in self.cells.iter().zip(&self.values) {
            g.values[i] += v * scale;
        }
    }

    pub fn to_grid(&self, spec: &GridSpec) -> GridFunction {
        let mut g = GridFunction::zeros(*spec, 1);
        self.add_into(&mut g, C64::new(1.0, 0.0));
        g
    }

    pub fn scaled(&self, c: f64) -> SparseField {
        SparseField { cells: self.cells.clone(), values: self.values.iter().map(|v| v * c).collect() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum Region {
    Ball { center: Point, radius: f64 },
    Cube { center: Point, side: f64 },
}

impl Region {
    pub fn center(&self) -> Point {
        match self {
            Region::Ball { center, .. } | Region::Cube { center, .. } => *center,
        }
    }

    /// Radius r deciding the atom kind; half the side for cubes.
    pub fn radius(&self) -> f64 {
        match self {
            Region::Ball { radius, .. } => *radius,
            Region::Cube { side, .. } => side / 2.0,
        }
    }

    pub fn measure(&self, dim: usize) -> f64 {
        match self {
            Region::Ball { radius, .. } => crate::grid::unit_ball_volume(dim) * radius.powi(dim as i32),
            Region::Cube { side, .. } => side.powi(dim as i32),
        }
    }

    pub fn contains(&self, x: &Point, dim: usize) -> bool {
        match self {
            Region::Ball { center, radius } => dist2(x, center, dim) <= radius * radius,
            Region::Cube { center, side } => (0..dim).all(|d| (x[d] - center[d]).abs() <= side / 2.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AtomKind {
    Standard,
    Rough,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub field: SparseField,
    pub region: Region,
    pub p: f64,
    pub kind: AtomKind,
    pub size_defect: f64,
    pub moment_defects: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AtomCheck {
    pub size_defect: f64,
    pub max_moment_defect: f64,
    pub support_leak: f64,
    pub size_ok: bool,
    pub moments_ok: bool,
    pub support_ok: bool,
}

impl AtomCheck {
    pub fn passed(&self) -> bool {
        self.size_ok && self.moments_ok && self.support_ok
    }
}

/// Relative moments |int (x - c)^gamma a| / (|a|_inf r^|gamma| |B|) for |gamma| <= m - 1.
fn relative_moments(spec: &GridSpec, field: &SparseField, region: &Region, m: usize) -> Vec<f64> {
    if m == 0 {
        return Vec::new();
    }
    let dim = spec.dim;
    let c = region.center();
    let r = region.radius();
    let sup = field.sup();
    let cell = spec.cell_volume();
    let scale = sup * region.measure(dim);
    MultiIndex::up_to(dim, m - 1)
        .iter()
        .map(|g| {
            let s: C64 = field
                .cells
                .iter()
                .zip(&field.values)
                .map(|(&i, v)| {
                    let x = spec.point(i);
                    let mut z = [0.0; 3];
                    for d in 0..dim {
                        z[d] = (x[d] - c[d]) / r;
                    }
                    v * g.monomial(&z) * cell
                })
                .sum();
            if scale > 0.0 {
                s.norm() / scale
            } else {
                0.0
            }
        })
        .collect()
}

/// Assembles an atom of kind fixed by the region radius, normalized to size defect 1.
pub fn make_atom(spec: &GridSpec, field: SparseField, region: Region, p: f64, m: usize) -> (f64, Atom) {
    let dim = spec.dim;
    let sup = field.sup();
    let coef = sup * region.measure(dim).powf(1.0 / p);
    let field = if coef > 0.0 { field.scaled(1.0 / coef) } else { field };
    let kind = if region.radius() >= 1.0 { AtomKind::Rough } else { AtomKind::Standard };
    let size_defect = field.sup() * region.measure(dim).powf(1.0 / p);
    let moment_defects = if kind == AtomKind::Standard { relative_moments(spec, &field, &region, m) } else { Vec::new() };
    (coef, Atom { field, region, p, kind, size_defect, moment_defects })
}

/// Recomputes the size and moment conditions of an h^p atom with moments to order m - 1.
pub fn verify_atom(spec: &GridSpec, a: &Atom, p: f64, m: usize) -> AtomCheck {
    let dim = spec.dim;
    let size_defect = a.field.sup() * a.region.measure(dim).powf(1.0 / p);
    let needs_moments = a.region.radius() < 1.0;
    let max_moment_defect = if needs_moments { relative_moments(spec, &a.field, &a.region, m).into_iter().fold(0.0, f64::max) } else { 0.0 };
    let sup = a.field.sup();
    let leak = a
        .field
        .cells
        .iter()
        .zip(&a.field.values)
        .filter(|(&i, _)| !a.region.contains(&spec.point(i), dim))
        .map(|(_, v)| v.norm())
        .fold(0.0, f64::max);
    let support_leak = if sup > 0.0 { leak / sup } else { 0.0 };
    AtomCheck {
        size_defect,
        max_moment_defect,
        support_leak,
        size_ok: size_defect <= 1.0 + SIZE_TOL,
        moments_ok: max_moment_defect <= MOMENT_TOL,
        support_ok: support_leak <= 1e-12,
    }
}

#[derive(Clone, Debug)]
pub struct GoldbergSplit {
    pub f1: GridFunction,
    pub f2: GridFunction,
    pub moment_defect: f64,
    pub reconstruction_error: f64,
}

/// Largest |sum_y w(y) z^alpha| over 0 < |alpha| <= order for the lattice mollifier.
pub fn mollifier_moment_defect(spec: &GridSpec, profile: &Profile, t: f64, order: usize) -> Result<f64> {
    let w = profile.weights(spec, t)?;
    let mut worst: f64 = 0.0;
    for alpha in MultiIndex::up_to(spec.dim, order).into_iter().filter(|a| a.order() > 0) {
        let mut s = 0.0;
        for (i, &wi) in w.iter().enumerate() {
            if wi == 0.0 {
                continue;
            }
            let ix = spec.unravel(i);
            let mut z = [0.0; 3];
            for d in 0..spec.dim {
                z[d] = spec.offset_coord(ix[d]) / t;
            }
            s += wi * alpha.monomial(&z);
        }
        worst = worst.max(s.abs());
    }
    Ok(worst)
}

/// f = f1 + f2 with f2 = phi_t * f, phi moment-corrected to order `l`.
pub fn goldberg_split(f: &GridFunction, l: usize, t: f64) -> Result<GoldbergSplit> {
    let profile = Profile::MomentCorrected { order: l };
    let moment_defect = mollifier_moment_defect(&f.spec, &profile, t, l)?;
    let f2 = convolve_scaled(f, &profile, t)?;
    let f1 = GridFunction { support: f2.support, ..f.sub(&f2)? };
    let back = f1.add(&f2)?;
    let reconstruction_error = back.values.iter().zip(&f.values).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
    Ok(GoldbergSplit { f1, f2, moment_defect, reconstruction_error })
}

/// Smooth partition of unity on R: psi1(s) + psi1(s - 1) = 1 on [0, 1], support (-1, 1).
fn psi1(s: f64) -> f64 {
    let g = |u: f64| if u > 0.0 { (-1.0 / u).exp() } else { 0.0 };
    let a = s.abs();
    if a >= 1.0 {
        return 0.0;
    }
    let (p, q) = (g(1.0 - a), g(a));
    p / (p + q)
}

/// Rough atoms of f2 on the side-2 cubes around integer points.
pub fn rough_atoms(f2: &GridFunction, p: f64) -> Result<Vec<(f64, Atom)>> {
    if f2.channels != 1 {
        return Err(Error::ChannelMismatch { expected: 1, got: f2.channels });
    }
    let spec = f2.spec;
    let dim = spec.dim;
    let w = spec.box_half_width.floor() as i64;
    let top = f2.max_magnitude();
    if top == 0.0 {
        return Ok(Vec::new());
    }
    let span = (2 * w + 1) as usize;
    let mut out = Vec::new();
    for flat in 0..span.pow(dim as u32) {
        let mut rem = flat;
        let mut k = [0.0; 3];
        for d in (0..dim).rev() {
            k[d] = ((rem % span) as i64 - w) as f64;
            rem /= span;
        }
        let mut map = BTreeMap::new();
        for i in 0..spec.len() {
            let x = spec.point(i);
            if (0..dim).any(|d| (x[d] - k[d]).abs() >= 1.0) {
                continue;
            }
            let psi: f64 = (0..dim).map(|d| psi1(x[d] - k[d])).product();
            let v = f2.values[i] * psi;
            if v != C64::default() {
                map.insert(i, v);
            }
        }
        let field = SparseField::from_map(map);
        // Terms below this are rounding noise of the periodic convolution.
        if field.sup() <= 1e-14 * top {
            continue;
        }
        out.push(make_atom(&spec, field, Region::Cube { center: k, side: 2.0 }, p, 0));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WhitneyCube {
    /// Lowest cell index on each axis and the side in cells.
    pub lo: [usize; 3],
    pub cells_per_side: usize,
    pub center: Point,
    pub side: f64,
}

/// Exact squared Euclidean distance transform (Felzenszwalb-Huttenlocher) in cell units.
fn distance_transform(spec: &GridSpec, inside: &[bool]) -> Vec<f64> {
    let n = spec.points_per_axis;
    let dim = spec.dim;
    let big = 1e30;
    let mut d: Vec<f64> = inside.iter().map(|&b| if b { big } else { 0.0 }).collect();
    let mut line = vec![0.0; n];
    let mut out = vec![0.0; n];
    let mut v = vec![0usize; n];
    let mut z = vec![0.0; n + 1];
    for axis in 0..dim {
        let stride = n.pow((dim - 1 - axis) as u32);
        for base in 0..spec.len() {
            if (base / stride) % n != 0 {
                continue;
            }
            for j in 0..n {
                line[j] = d[base + j * stride];
            }
            // Lower envelope of parabolas.
            let mut k = 0usize;
            v[0] = 0;
            z[0] = f64::NEG_INFINITY;
            z[1] = f64::INFINITY;
            for q in 1..n {
                loop {
                    let r = v[k];
                    let s = ((line[q] + (q * q) as f64) - (line[r] + (r * r) as f64)) / (2.0 * (q as f64 - r as f64));
                    if s <= z[k] && k > 0 {
                        k -= 1;
                        continue;
                    }
                    if s <= z[k] {
                        v[0] = q;
                        z[0] = f64::NEG_INFINITY;
                        z[1] = f64::INFINITY;
                        break;
                    }
                    k += 1;
                    v[k] = q;
                    z[k] = s;
                    z[k + 1] = f64::INFINITY;
                    break;
                }
            }
            k = 0;
            for q in 0..n {
                while z[k + 1] < q as f64 {
                    k += 1;
                }
                let r = v[k];
                out[q] = (q as f64 - r as f64).powi(2) + line[r];
            }
            for j in 0..n {
                d[base + j * stride] = out[j];
            }
        }
    }
    d
}

/// Whitney cubes of the cell set `inside`: maximal lattice-aligned dyadic cubes Q
/// inside the set with diam Q <= dist(Q, complement), single cells as the floor.
/// The box boundary counts as complement. Returned in Morton order.
pub fn whitney_cubes(spec: &GridSpec, inside: &[bool]) -> Vec<WhitneyCube> {
    let n = spec.points_per_axis;
    let dim = spec.dim;
    let h = spec.h();
    let edt = distance_transform(spec, inside);
    let dist: Vec<f64> = (0..spec.len())
        .map(|i| {
            if !inside[i] {
                return 0.0;
            }
            let ix = spec.unravel(i);
            let wall = (0..dim).map(|d| (ix[d] + 1).min(n - ix[d]) as f64).fold(f64::INFINITY, f64::min);
            edt[i].sqrt().min(wall) * h
        })
        .collect();
    let mut out = Vec::new();
    let mut stack = vec![([0usize; 3], n)];
    while let Some((lo, s)) = stack.pop() {
        let mut min_d = f64::INFINITY;
        let mut any = false;
        for flat in 0..s.pow(dim as u32) {
            let mut rem = flat;
            let mut ix = [0usize; 3];
            for d in (0..dim).rev() {
                ix[d] = lo[d] + rem % s;
                rem /= s;
            }
            let dv = dist[spec.ravel(ix)];
            min_d = min_d.min(dv);
            any |= dv > 0.0;
        }
        if !any {
            continue;
        }
        let diam = (dim as f64).sqrt() * s as f64 * h;
        // Distance from the cube to the complement, measured between cell faces.
        if min_d > 0.0 && (s == 1 || diam <= min_d - h) {
            let mut center = [0.0; 3];
            for d in 0..dim {
                center[d] = spec.coord(lo[d]) + (s as f64 - 1.0) * h / 2.0;
            }
            out.push(WhitneyCube { lo, cells_per_side: s, center, side: s as f64 * h });
            continue;
        }
        if s == 1 {
            continue;
        }
        let half = s / 2;
        // Reverse push keeps pops in Morton order.
        for child in (0..(1usize << dim)).rev() {
            let mut c = lo;
            for d in 0..dim {
                if child >> (dim - 1 - d) & 1 == 1 {
                    c[d] += half;
                }
            }
            stack.push((c, half));
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct CZDecomposition {
    pub level: f64,
    pub m: usize,
    pub spec: GridSpec,
    pub open_set: Vec<bool>,
    pub cubes: Vec<WhitneyCube>,
    /// eta_k on the cells of Q_k* (restricted to the open set).
    pub partition: Vec<SparseField>,
    pub bad_parts: Vec<SparseField>,
    pub polynomials: Vec<Polynomial>,
    pub good_part: GridFunction,
    pub max_overlap: usize,
    pub partition_error: f64,
    pub reconstruction_error: f64,
    /// max over k, |gamma| <= m - 1 of |int (x - x_k)^gamma beta_k| / (|f|_inf l_k^(N + |gamma|)).
    pub max_moment_defect: f64,
    /// max |g| / level.
    pub good_constant: f64,
}

impl CZDecomposition {
    pub fn bad_sum(&self) -> GridFunction {
        let mut b = GridFunction::zeros(self.spec, 1);
        for beta in &self.bad_parts {
            beta.add_into(&mut b, C64::new(1.0, 0.0));
        }
        b
    }

    /// max_k max_cells |D_fd eta_k| * l_k over first-order finite differences.
    pub fn partition_derivative_constant(&self) -> f64 {
        let spec = self.spec;
        let n = spec.points_per_axis;
        let h = spec.h();
        let mut worst: f64 = 0.0;
        let mut dense = vec![0.0f64; spec.len()];
        for (eta, cube) in self.partition.iter().zip(&self.cubes) {
            for (&i, v) in eta.cells.iter().zip(&eta.values) {
                dense[i] = v.re;
            }
            for &i in &eta.cells {
                let ix = spec.unravel(i);
                for d in 0..spec.dim {
                    let mut a = ix;
                    let mut b = ix;
                    a[d] = (ix[d] + 1).min(n - 1);
                    b[d] = ix[d].saturating_sub(1);
                    let g = (dense[spec.ravel(a)] - dense[spec.ravel(b)]) / (2.0 * h);
                    worst = worst.max(g.abs() * cube.side);
                }
            }
            for &i in &eta.cells {
                dense[i] = 0.0;
            }
        }
        worst
    }
}

/// Cells of Q* (expanded cube) that lie in the open set, with the unnormalized bump.
fn expanded_cells(spec: &GridSpec, cube: &WhitneyCube, open: &[bool]) -> Vec<(usize, f64)> {
    let dim = spec.dim;
    let n = spec.points_per_axis as i64;
    let h = spec.h();
    let half = EXPANSION * cube.side / 2.0;
    let reach = (half / h).ceil() as i64 + 1;
    let mut lo = [0i64; 3];
    let mut span = [1i64; 3];
    for d in 0..dim {
        let c = ((cube.center[d] + spec.box_half_width) / h).round() as i64;
        lo[d] = (c - reach).max(0);
        span[d] = (c + reach).min(n - 1) - lo[d] + 1;
    }
    let total: i64 = span.iter().take(dim).product();
    let mut out = Vec::new();
    for flat in 0..total {
        let mut rem = flat;
        let mut ix = [0usize; 3];
        for d in (0..dim).rev() {
            ix[d] = (lo[d] + rem % span[d]) as usize;
            rem /= span[d];
        }
        let i = spec.ravel(ix);
        if !open[i] {
            continue;
        }
        let x = spec.point(i);
        let mut w = 1.0;
        for d in 0..dim {
            let s = (x[d] - cube.center[d]) / half;
            w *= bump(s * s);
        }
        if w > 0.0 {
            out.push((i, w));
        }
    }
    out
}

/// Calderon-Zygmund decomposition of f at `level` against a precomputed grand maximal field.
pub fn cz_from_maximal(f: &GridFunction, maximal: &GridFunction, level: f64, m: usize) -> Result<CZDecomposition> {
    if f.channels != 1 {
        return Err(Error::ChannelMismatch { expected: 1, got: f.channels });
    }
    if !(level > 0.0) {
        return Err(Error::OutOfRange(format!("CZ level must be positive, got {level}")));
    }
    let spec = f.spec;
    let dim = spec.dim;
    let open: Vec<bool> = maximal.values.iter().map(|v| v.re > level).collect();
    let cubes = whitney_cubes(&spec, &open);
    let raw: Vec<Vec<(usize, f64)>> = cubes.iter().map(|c| expanded_cells(&spec, c, &open)).collect();
    let mut total = vec![0.0f64; spec.len()];
    let mut count = vec![0usize; spec.len()];
    for cells in &raw {
        for &(i, w) in cells {
            total[i] += w;
            count[i] += 1;
        }
    }
    let fsup = f.max_magnitude();
    let mut partition = Vec::with_capacity(cubes.len());
    let mut bad_parts = Vec::with_capacity(cubes.len());
    let mut polynomials = Vec::with_capacity(cubes.len());
    let mut good = f.clone();
    good.support = None;
    let mut max_moment: f64 = 0.0;
    let cell = spec.cell_volume();
    for (cube, cells) in cubes.iter().zip(&raw) {
        let idx: Vec<usize> = cells.iter().map(|c| c.0).collect();
        let eta: Vec<f64> = cells.iter().map(|&(i, w)| w / total[i]).collect();
        let vals: Vec<C64> = idx.iter().map(|&i| f.values[i]).collect();
        let poly = weighted_fit(&spec, &idx, &eta, &vals, cube.center, cube.side, m);
        let beta: Vec<C64> = idx.iter().zip(&eta).zip(&vals).map(|((&i, e), v)| (v - poly.eval(&spec.point(i))) * *e).collect();
        for (&i, b) in idx.iter().zip(&beta) {
            good.values[i] -= b;
        }
        for g in MultiIndex::up_to(dim, m.saturating_sub(1)) {
            let s: C64 = idx.iter().zip(&beta).map(|(&i, b)| b * g.monomial(&poly.shifted(&spec.point(i))) * cell).sum();
            if fsup > 0.0 {
                max_moment = max_moment.max(s.norm() / (fsup * cube.side.powi(dim as i32)));
            }
        }
        partition.push(SparseField { cells: idx.clone(), values: eta.iter().map(|&e| C64::new(e, 0.0)).collect() });
        bad_parts.push(SparseField { cells: idx, values: beta });
        polynomials.push(poly);
    }
    let mut psum = vec![0.0f64; spec.len()];
    for eta in &partition {
        for (&i, v) in eta.cells.iter().zip(&eta.values) {
            psum[i] += v.re;
        }
    }
    let partition_error = (0..spec.len()).map(|i| (psum[i] - if open[i] { 1.0 } else { 0.0 }).abs()).fold(0.0, f64::max);
    let mut recon = good.clone();
    for b in &bad_parts {
        b.add_into(&mut recon, C64::new(1.0, 0.0));
    }
    let reconstruction_error = recon.values.iter().zip(&f.values).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
    let good_constant = good.max_magnitude() / level;
    Ok(CZDecomposition {
        level,
        m,
        spec,
        open_set: open,
        cubes,
        partition,
        bad_parts,
        polynomials,
        good_part: good,
        max_overlap: count.into_iter().max().unwrap_or(0),
        partition_error,
        reconstruction_error,
        max_moment_defect: max_moment,
        good_constant,
    })
}

/// Non-local scales {2^j <= W/2, ..., 1/32} plus the cell scale: the decomposition
/// acts on H^p data, and a sup capped at t < 1 cannot see past unit distance, which
/// leaves |g| / alpha unbounded once the level set is more than a unit deep.
pub fn cz_scales(spec: &GridSpec) -> ScaleSet {
    let up = (spec.box_half_width / 2.0).log2().floor().max(0.0) as usize;
    ScaleSet::global(up, 5, true)
}

/// CZ decomposition at `level` for the grand maximal function over `dict`.
/// An empty level set yields the identity decomposition g = f.
pub fn cz_decompose(f: &GridFunction, level: f64, m: usize, dict: &MaximalDictionary) -> Result<CZDecomposition> {
    let mf = grand_maximal(f, dict, &cz_scales(&f.spec))?;
    cz_from_maximal(f, &mf, level, m)
}

/// Sum of partition functions on each cell, for the partition-of-unity check.
pub fn partition_sum(cz: &CZDecomposition) -> Vec<f64> {
    let mut s = vec![0.0; cz.spec.len()];
    for eta in &cz.partition {
        for (&i, v) in eta.cells.iter().zip(&eta.values) {
            s[i] += v.re;
        }
    }
    s
}

#[derive(Clone, Debug)]
pub struct Truncation {
    pub b_sharp: GridFunction,
    pub rho: GridFunction,
    pub kept: usize,
    pub rho_sup: f64,
}

/// Splits the bad part by cube side: b# keeps cubes with side >= delta, rho the rest.
pub fn truncate_bad_part(cz: &CZDecomposition, delta: f64) -> Result<Truncation> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::OutOfRange(format!("truncation delta must lie in (0, 1), got {delta}")));
    }
    let mut b_sharp = GridFunction::zeros(cz.spec, 1);
    let mut rho = GridFunction::zeros(cz.spec, 1);
    let mut kept = 0;
    for (beta, cube) in cz.bad_parts.iter().zip(&cz.cubes) {
        if cube.side >= delta {
            beta.add_into(&mut b_sharp, C64::new(1.0, 0.0));
            kept += 1;
        } else {
            beta.add_into(&mut rho, C64::new(1.0, 0.0));
        }
    }
    let rho_sup = rho.max_magnitude();
    Ok(Truncation { b_sharp, rho, kept, rho_sup })
}

/// Holder seminorm of order gamma_p for p < 1, bmo norm for p = 1.
pub fn residual_seminorm(r: &GridFunction, p: f64) -> Result<f64> {
    let g = gamma_p(p, r.spec.dim);
    if g > 0.0 {
        holder_seminorm(r, g.min(1.0))
    } else {
        bmo_norm(r)
    }
}

#[derive(Clone, Debug)]
pub struct AtomicDecomposition {
    pub p: f64,
    pub m: usize,
    pub standard: Vec<(f64, Atom)>,
    pub rough: Vec<(f64, Atom)>,
    pub residual: GridFunction,
    pub residual_sup: f64,
    pub residual_seminorm: f64,
    /// Residual seminorm after each ladder level, top level first.
    pub ladder_seminorms: Vec<f64>,
    pub thresholds: Vec<f64>,
    pub coeff_lp_sum: f64,
    pub source_hp_norm: f64,
    pub reconstruction_error: f64,
}

impl AtomicDecomposition {
    pub fn coefficient_ratio(&self) -> f64 {
        if self.source_hp_norm > 0.0 {
            self.coeff_lp_sum / self.source_hp_norm.powf(self.p)
        } else {
            0.0
        }
    }

    pub fn atoms(&self) -> impl Iterator<Item = &(f64, Atom)> {
        self.standard.iter().chain(&self.rough)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AtomicOptions {
    /// Ladder depth in octaves. None descends until the level set would reach the margin band.
    pub levels: Option<usize>,
    /// Goldberg mollifier scale.
    pub split_scale: f64,
    pub dictionary: MaximalDictionary,
    /// Aperture of the ladder's maximal function. Whitney cube means sit a few cube
    /// sides from the complement, where centered test functions no longer see them.
    pub aperture: f64,
    pub scales: ScaleSet,
}

impl Default for AtomicOptions {
    fn default() -> Self {
        AtomicOptions { levels: None, split_scale: 1.0, dictionary: MaximalDictionary::default(), aperture: 1.0, scales: ScaleSet::default() }
    }
}

/// Ladder piece A_{j,k} = beta_{j,k} - sum_l (beta_{j-1,l} eta_{j,k} - Q_{k,l} eta_{j-1,l}),
/// where Q_{k,l} restores the moments of beta_{j-1,l} eta_{j,k} against eta_{j-1,l}.
/// Sum over k of A_{j,k} is b_j - b_{j-1} exactly because the Q_{k,l} sum to the
/// projection of a moment-free function, which is zero.
fn ladder_pieces(cur: &CZDecomposition, prev: Option<&CZDecomposition>) -> Vec<BTreeMap<usize, C64>> {
    let spec = cur.spec;
    let m = cur.m;
    let mut pieces: Vec<BTreeMap<usize, C64>> = cur.bad_parts.iter().map(|b| b.cells.iter().copied().zip(b.values.iter().copied()).collect()).collect();
    let Some(prev) = prev else { return pieces };
    // Cell -> (k, eta_{j,k}) at the current level.
    let mut owners: BTreeMap<usize, Vec<(usize, f64)>> = BTreeMap::new();
    for (k, eta) in cur.partition.iter().enumerate() {
        for (&i, v) in eta.cells.iter().zip(&eta.values) {
            owners.entry(i).or_default().push((k, v.re));
        }
    }
    for (l, beta_l) in prev.bad_parts.iter().enumerate() {
        let eta_l = &prev.partition[l];
        let cube_l = &prev.cubes[l];
        let mut touching: Vec<usize> = beta_l.cells.iter().filter_map(|i| owners.get(i)).flatten().map(|&(k, _)| k).collect();
        touching.sort_unstable();
        touching.dedup();
        let weights: Vec<f64> = eta_l.values.iter().map(|v| v.re).collect();
        for k in touching {
            // u = beta_l eta_k. Fitting u / eta_l over all of supp eta_l makes the
            // fits over k sum to the fit of f - P_l, which vanishes.
            let eta_k: Vec<f64> = beta_l
                .cells
                .iter()
                .map(|i| owners.get(i).and_then(|list| list.iter().find(|o| o.0 == k)).map_or(0.0, |o| o.1))
                .collect();
            let vals: Vec<C64> = beta_l.values.iter().zip(&eta_k).zip(&weights).map(|((b, ek), el)| b * *ek / *el).collect();
            let q = weighted_fit(&spec, &beta_l.cells, &weights, &vals, cube_l.center, cube_l.side, m);
            let piece = &mut pieces[k];
            for (((&i, b), ek), el) in beta_l.cells.iter().zip(&beta_l.values).zip(&eta_k).zip(&weights) {
                let v = q.eval(&spec.point(i)) * *el - b * *ek;
                if v != C64::default() {
                    *piece.entry(i).or_default() += v;
                }
            }
        }
    }
    pieces
}

/// Atomic decomposition: Goldberg split, rough atoms of f2, and a CZ ladder on f1 at
/// thresholds 2^i from just above max(M f1) down `levels` octaves.
pub fn atomic_decompose(f: &GridFunction, p: f64, m: usize, opts: &AtomicOptions) -> Result<AtomicDecomposition> {
    if !(opts.aperture >= 0.0 && opts.aperture.is_finite()) {
        return Err(Error::InvalidParameter(format!("aperture must be finite and >= 0, got {}", opts.aperture)));
    }
    if f.channels != 1 {
        return Err(Error::ChannelMismatch { expected: 1, got: f.channels });
    }
    let spec = f.spec;
    let dim = spec.dim;
    let np = np_exponent(p, dim)?;
    if m < np + 1 {
        return Err(Error::InvalidParameter(format!("atoms for p = {p} need m >= {}", np + 1)));
    }
    let source_hp_norm = hp_norm(f, p, &Profile::Bump, &opts.scales)?;
    let empty = |residual: GridFunction| AtomicDecomposition {
        p,
        m,
        standard: Vec::new(),
        rough: Vec::new(),
        residual_sup: residual.max_magnitude(),
        residual,
        residual_seminorm: 0.0,
        ladder_seminorms: Vec::new(),
        thresholds: Vec::new(),
        coeff_lp_sum: 0.0,
        source_hp_norm,
        reconstruction_error: 0.0,
    };
    if f.max_magnitude() == 0.0 {
        return Ok(empty(GridFunction::zeros(spec, 1)));
    }
    let split = goldberg_split(f, np, opts.split_scale)?;
    let rough = rough_atoms(&split.f2, p)?;
    let f1 = split.f1;
    let mf = nontangential_maximal(&f1, &opts.dictionary, &cz_scales(&spec), opts.aperture)?;
    let top = mf.values.iter().map(|v| v.re).fold(0.0, f64::max);
    let mut standard = Vec::new();
    let mut thresholds = Vec::new();
    let mut ladder_seminorms = Vec::new();
    let mut residual = GridFunction { support: None, ..f1.clone() };
    let scale = f1.max_magnitude();
    let mut dropped = Vec::new();
    if top > 0.0 {
        let i_top = top.log2().ceil() as i32;
        // Left to itself the ladder descends until the open set would reach the margin
        // band, where the box walls cap the Whitney cubes. It also stops early once
        // |g| / alpha leaves the documented bound, since deeper pieces would then
        // exceed the atom size the level promises.
        let auto = opts.levels.is_none();
        let levels = opts.levels.unwrap_or_else(|| {
            let limit = spec.interior_half_width();
            let margin_peak = (0..spec.len())
                .filter(|&i| spec.point(i).iter().take(dim).any(|x| x.abs() > limit))
                .map(|i| mf.values[i].re)
                .fold(NOISE_FLOOR * top, f64::max);
            (1..).take_while(|&j| 2f64.powi(i_top - j) > margin_peak).count().max(1)
        });
        let mut prev: Option<CZDecomposition> = None;
        for j in 1..=levels {
            let level = 2f64.powi(i_top - j as i32);
            let cz = cz_from_maximal(&f1, &mf, level, m)?;
            if auto && j > 1 && cz.good_constant > GOOD_CONSTANT_BOUND {
                break;
            }
            for (k, piece) in ladder_pieces(&cz, prev.as_ref()).into_iter().enumerate() {
                let field = SparseField::from_map(piece);
                // Rounding residue of exact cancellations; normalizing it would
                // manufacture an atom whose moments are pure noise.
                if field.sup() <= NOISE_FLOOR * scale {
                    if !field.is_empty() {
                        dropped.push(field);
                    }
                    continue;
                }
                let center = cz.cubes[k].center;
                let reach = field.cells.iter().map(|&i| dist2(&spec.point(i), &center, dim)).fold(0.0, f64::max).sqrt();
                let region = Region::Ball { center, radius: reach + spec.h() / 2.0 };
                standard.push(make_atom(&spec, field, region, p, m));
            }
            residual = GridFunction { support: None, ..cz.good_part.clone() };
            for d in &dropped {
                d.add_into(&mut residual, C64::new(1.0, 0.0));
            }
            ladder_seminorms.push(residual_seminorm(&residual, p)?);
            thresholds.push(level);
            prev = Some(cz);
        }
    }
    if let (Some(first), Some(last)) = (ladder_seminorms.first(), ladder_seminorms.last()) {
        if *last > DIVERGENCE_FACTOR * first {
            let trail: Vec<String> = ladder_seminorms.iter().map(|s| format!("{s:.3e}")).collect();
            return Err(Error::LadderDiverged(format!("residual seminorm went from {first:.3e} to {last:.3e} ({})", trail.join(", "))));
        }
    }
    let mut recon = residual.clone();
    for (c, a) in standard.iter().chain(&rough) {
        a.field.add_into(&mut recon, C64::new(*c, 0.0));
    }
    let reconstruction_error = recon.values.iter().zip(&f.values).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
    let coeff_lp_sum = standard.iter().chain(&rough).map(|(c, _)| c.powf(p)).sum();
    let residual_seminorm = ladder_seminorms.last().copied().unwrap_or(0.0);
    Ok(AtomicDecomposition {
        p,
        m,
        standard,
        rough,
        residual_sup: residual.max_magnitude(),
        residual,
        residual_seminorm,
        ladder_seminorms,
        thresholds,
        coeff_lp_sum,
        source_hp_norm,
        reconstruction_error,
    })
}

/// (sum |f|^p)^(1/p) helper used by reports on decomposition pieces.
pub fn piece_lp(f: &GridFunction, p: f64) -> Result<f64> {
    lp_norm(f, p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{sample, TestFamily};
    use proptest::prelude::*;

    fn spec2(n: usize) -> GridSpec {
        GridSpec::new(2, 4.0, n, 0.1).unwrap()
    }

    fn bump_at(spec: &GridSpec, w: f64, c: f64) -> GridFunction {
        sample(&TestFamily::new("gaussian_bump", &[("width", w), ("center_0", c)]), spec, 1).unwrap()
    }

    #[test]
    fn partition_psi_sums_to_one() {
        for i in 0..=100 {
            let s = -2.0 + 0.04 * i as f64;
            let total: f64 = (-3..=3).map(|k| psi1(s - k as f64)).sum();
            assert!((total - 1.0).abs() < 1e-15, "{s}");
        }
    }

    #[test]
    fn goldberg_split_identity_and_moments() {
        let spec = spec2(64);
        let f = bump_at(&spec, 0.3, 0.0);
        let s = goldberg_split(&f, 2, 1.0).unwrap();
        assert!(s.reconstruction_error <= 1e-13);
        assert!(s.moment_defect <= 1e-10);
        // Low modes pass through phi_t almost untouched.
        let low = GridFunction::from_fn(spec, |x| C64::new((std::f64::consts::PI / 4.0 * x[0]).cos(), 0.0));
        let ls = goldberg_split(&low, 2, 1.0).unwrap();
        assert!(ls.f1.max_magnitude() < 0.05, "{}", ls.f1.max_magnitude());
        assert!(matches!(goldberg_split(&f, 9, 1.0), Err(Error::MomentCorrectionFailed(9))));
    }

    #[test]
    fn rough_atoms_reconstruct_and_are_normalized() {
        let spec = spec2(64);
        let f = bump_at(&spec, 0.1, 0.25);
        let atoms = rough_atoms(&f, 0.8).unwrap();
        // Support straddles x = 0 and y = 0, so a 3 x 3 block of cubes sees it.
        assert!(atoms.len() <= 9, "{}", atoms.len());
        let mut sum = GridFunction::zeros(spec, 1);
        for (mu, a) in &atoms {
            assert!((a.size_defect - 1.0).abs() < 1e-12);
            assert_eq!(a.kind, AtomKind::Rough);
            a.field.add_into(&mut sum, C64::new(*mu, 0.0));
        }
        let err = sum.values.iter().zip(&f.values).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        assert!(err <= 1e-10);
        assert!(rough_atoms(&GridFunction::zeros(spec, 1), 1.0).unwrap().is_empty());
    }

    #[test]
    fn verify_atom_cases() {
        let spec = GridSpec::new(2, 2.0, 128, 0.1).unwrap();
        let r = 0.25;
        let center = [0.1, -0.2, 0.0];
        let cells: Vec<usize> = (0..spec.len()).filter(|&i| dist2(&spec.point(i), &center, 2) < r * r).collect();
        let raw: Vec<f64> = cells.iter().map(|&i| bump(dist2(&spec.point(i), &center, 2) / (r * r))).collect();
        let mean = raw.iter().sum::<f64>() / raw.len() as f64;
        let region = Region::Ball { center, radius: r };
        let zero_mean = SparseField { cells: cells.clone(), values: raw.iter().map(|v| C64::new(v - mean, 0.0)).collect() };
        let (_, a) = make_atom(&spec, zero_mean, region, 1.0, 1);
        assert!(verify_atom(&spec, &a, 1.0, 1).passed());
        let plain = SparseField { cells, values: raw.iter().map(|&v| C64::new(v, 0.0)).collect() };
        let (_, b) = make_atom(&spec, plain.clone(), region, 1.0, 1);
        let check = verify_atom(&spec, &b, 1.0, 1);
        assert!(check.size_ok && !check.moments_ok);
        let big = Region::Cube { center: [0.0; 3], side: 4.0 };
        let (_, c) = make_atom(&spec, plain, big, 1.0, 1);
        assert_eq!(c.kind, AtomKind::Rough);
        assert!(verify_atom(&spec, &c, 1.0, 1).passed());
    }

    #[test]
    fn distance_transform_matches_brute_force() {
        let spec = GridSpec::new(2, 2.0, 32, 0.1).unwrap();
        let inside: Vec<bool> = (0..spec.len()).map(|i| {
            let x = spec.point(i);
            x[0] * x[0] + 2.0 * x[1] * x[1] < 1.2 && x[0] > -0.7
        }).collect();
        let d = distance_transform(&spec, &inside);
        for i in 0..spec.len() {
            let a = spec.unravel(i);
            let mut best = if inside[i] { f64::INFINITY } else { 0.0 };
            for j in 0..spec.len() {
                if !inside[j] {
                    let b = spec.unravel(j);
                    let e = (a[0] as f64 - b[0] as f64).powi(2) + (a[1] as f64 - b[1] as f64).powi(2);
                    best = best.min(e);
                }
            }
            assert_eq!(d[i], best);
        }
    }

    #[test]
    fn whitney_cover_is_exact_and_bounded() {
        let spec = GridSpec::new(2, 2.0, 64, 0.1).unwrap();
        let inside: Vec<bool> = (0..spec.len()).map(|i| {
            let x = spec.point(i);
            (x[0] - 0.2).powi(2) + x[1] * x[1] < 0.8
        }).collect();
        let cubes = whitney_cubes(&spec, &inside);
        let mut covered = vec![0usize; spec.len()];
        for c in &cubes {
            for flat in 0..c.cells_per_side.pow(2) {
                let ix = [c.lo[0] + flat / c.cells_per_side, c.lo[1] + flat % c.cells_per_side, 0];
                covered[spec.ravel(ix)] += 1;
            }
        }
        for i in 0..spec.len() {
            assert_eq!(covered[i], inside[i] as usize, "cell {i}");
        }
        assert!(cubes.iter().any(|c| c.cells_per_side >= 4));
    }

    #[test]
    fn cz_identity_above_max() {
        let spec = spec2(64);
        let f = bump_at(&spec, 0.3, 0.0);
        let cz = cz_decompose(&f, 10.0, 1, &MaximalDictionary::default()).unwrap();
        assert!(cz.cubes.is_empty() && cz.bad_parts.is_empty());
        assert_eq!(cz.good_part.values, f.values);
    }

    #[test]
    fn cz_invariants_m1_and_m2() {
        let spec = spec2(128);
        let f = bump_at(&spec, 0.3, 0.2);
        let dict = MaximalDictionary::default();
        let mf = grand_maximal(&f, &dict, &cz_scales(&spec)).unwrap();
        let top = mf.values.iter().map(|v| v.re).fold(0.0, f64::max);
        for m in [1usize, 2] {
            for level in [top / 2.0, top / 4.0, top / 8.0] {
                let cz = cz_from_maximal(&f, &mf, level, m).unwrap();
                assert!(!cz.cubes.is_empty());
                assert!(cz.reconstruction_error <= 1e-9);
                assert!(cz.max_moment_defect <= 1e-7, "m={m} level={level} {}", cz.max_moment_defect);
                let sum = partition_sum(&cz);
                for i in 0..spec.len() {
                    let want = if cz.open_set[i] { 1.0 } else { 0.0 };
                    assert!((sum[i] - want).abs() <= 1e-10);
                    assert_eq!(cz.open_set[i], mf.values[i].re > level);
                }
                assert!(cz.max_overlap <= 12usize.pow(2));
                assert!(cz.good_constant <= GOOD_CONSTANT_BOUND, "m={m} level={level} c={}", cz.good_constant);
                let back = cz.good_part.add(&cz.bad_sum()).unwrap();
                assert!(back.values.iter().zip(&f.values).all(|(a, b)| (a - b).norm() <= 1e-9));
            }
        }
    }

    #[test]
    fn truncation_extremes_and_trend() {
        let spec = spec2(128);
        let f = bump_at(&spec, 0.3, 0.0);
        let cz = cz_decompose(&f, 0.1, 1, &MaximalDictionary::default()).unwrap();
        let smallest = cz.cubes.iter().map(|c| c.side).fold(f64::INFINITY, f64::min);
        let t = truncate_bad_part(&cz, smallest * 0.5).unwrap();
        assert_eq!(t.rho_sup, 0.0);
        let t = truncate_bad_part(&cz, 0.99).unwrap();
        assert!(cz.cubes.iter().all(|c| c.side < 0.99));
        assert_eq!(t.b_sharp.max_magnitude(), 0.0);
        let mut last = f64::INFINITY;
        for delta in [0.5, 0.25, 0.125] {
            let rs = truncate_bad_part(&cz, delta).unwrap().rho_sup;
            assert!(rs <= last);
            last = rs;
        }
    }

    #[test]
    fn atomic_decomposition_roundtrip() {
        let spec = spec2(64);
        let f = bump_at(&spec, 0.3, 0.0);
        let opts = AtomicOptions::default();
        let dec = atomic_decompose(&f, 1.0, 1, &opts).unwrap();
        assert!(dec.reconstruction_error <= 1e-9, "{}", dec.reconstruction_error);
        assert!(!dec.standard.is_empty(), "{:?} {} rough", dec.thresholds, dec.rough.len());
        for (_, a) in dec.atoms() {
            let c = verify_atom(&spec, a, 1.0, 1);
            assert!(c.passed(), "{c:?} {:?} cells {} sum {}", a.region, a.field.cells.len(), a.field.values.iter().sum::<C64>());
        }
        assert!(dec.coefficient_ratio().is_finite());
        let z = atomic_decompose(&GridFunction::zeros(spec, 1), 1.0, 1, &opts).unwrap();
        assert!(z.standard.is_empty() && z.rough.is_empty());
    }

    #[test]
    fn ladder_residual_shrinks_with_depth() {
        let spec = spec2(128);
        let f = bump_at(&spec, 0.3, 0.0);
        let mut last = f64::INFINITY;
        for levels in [4, 6, 8] {
            let opts = AtomicOptions { levels: Some(levels), ..AtomicOptions::default() };
            let dec = atomic_decompose(&f, 1.0, 1, &opts).unwrap();
            assert!(dec.residual_seminorm < last, "levels={levels} {} vs {last}", dec.residual_seminorm);
            last = dec.residual_seminorm;
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(6))]

        #[test]
        fn cz_reconstruction_is_exact(c in -0.8f64..0.8, w in 0.15f64..0.4, level in 0.05f64..0.6) {
            let spec = spec2(64);
            let f = bump_at(&spec, w, c);
            let cz = cz_decompose(&f, level, 1, &MaximalDictionary::default()).unwrap();
            prop_assert!(cz.reconstruction_error <= 1e-9);
            prop_assert!(cz.max_moment_defect <= 1e-7);
        }
    }
}
