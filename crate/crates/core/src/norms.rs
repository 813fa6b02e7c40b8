//! Maximal operators and (quasi-)norm evaluators.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{
    convolve_with_transfer, derivative, forward, inverse, linf_norm, lp_of_magnitudes, lp_or_inf, DerivMethod, GridFunction, GridSpec,
    MultiIndex, Profile, C64,
};

/// Scales standing in for the continuous sup over 0 < t < 1, or over all t > 0
/// when `global` is set (the non-local maximal functions of H^p).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleSet {
    pub scales: Vec<f64>,
    #[serde(default)]
    pub includes_cell_scale: bool,
    #[serde(default)]
    pub global: bool,
}

impl ScaleSet {
    /// {2^-1, ..., 2^-levels}.
    pub fn dyadic(levels: usize, includes_cell_scale: bool) -> Self {
        ScaleSet { scales: (1..=levels).map(|j| 0.5f64.powi(j as i32)).collect(), includes_cell_scale, global: false }
    }

    /// {2^up, ..., 2^-down}; scales at or above the box half-width are rejected on use.
    pub fn global(up: usize, down: usize, includes_cell_scale: bool) -> Self {
        let scales = (-(up as i32)..=down as i32).map(|j| 0.5f64.powi(j)).collect();
        ScaleSet { scales, includes_cell_scale, global: true }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() {
            return Err(Error::EmptyScaleSet);
        }
        for w in self.scales.windows(2) {
            if !(w[1] < w[0]) {
                return Err(Error::InvalidParameter("scales must be strictly decreasing".into()));
            }
        }
        let top = if self.global { f64::INFINITY } else { 1.0 };
        if let Some(&t) = self.scales.iter().find(|&&t| !(t > 0.0 && t < top)) {
            return Err(Error::ScaleOutOfRange(t));
        }
        Ok(())
    }

    /// The scales actually evaluated on `spec`, cell scale last when requested.
    pub fn resolved(&self, spec: &GridSpec) -> Result<Vec<f64>> {
        self.validate()?;
        let mut out = self.scales.clone();
        if self.includes_cell_scale {
            let h = spec.h();
            if out.last().is_some_and(|&t| t > h) && h < 1.0 {
                out.push(h);
            }
        }
        Ok(out)
    }
}

impl Default for ScaleSet {
    fn default() -> Self {
        ScaleSet::dyadic(5, true)
    }
}

/// Finite test-profile family for the grand maximal function.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaximalDictionary {
    pub profiles: Vec<Profile>,
}

impl Default for MaximalDictionary {
    fn default() -> Self {
        MaximalDictionary {
            profiles: vec![Profile::Bump, Profile::Quadratic { c: -1.5 }, Profile::Oscillatory { frequency: std::f64::consts::PI }],
        }
    }
}

impl MaximalDictionary {
    pub fn single(profile: Profile) -> Self {
        MaximalDictionary { profiles: vec![profile] }
    }

    /// Largest discrete L^1 norm over profiles and evaluated scales.
    pub fn l1_bound(&self, spec: &GridSpec, scales: &ScaleSet) -> Result<f64> {
        let mut best: f64 = 0.0;
        for p in &self.profiles {
            for t in scales.resolved(spec)? {
                let w = p.weights(spec, t)?;
                best = best.max(w.iter().map(|v| v.abs()).sum());
            }
        }
        Ok(best)
    }
}

/// Pointwise max over scales of |u * phi_t|, single channel out.
pub fn small_maximal(u: &GridFunction, profile: &Profile, scales: &ScaleSet) -> Result<GridFunction> {
    let spec = u.spec;
    let ts = scales.resolved(&spec)?;
    let n = spec.len();
    let mut best = vec![0.0f64; n];
    let hats: Vec<Vec<C64>> = (0..u.channels).map(|c| forward(&spec, u.channel(c))).collect();
    let mut support = None;
    for &t in &ts {
        let tr = profile.transfer(&spec, t)?;
        let mut mag2 = vec![0.0f64; n];
        for hat in &hats {
            let prod: Vec<C64> = hat.iter().zip(&tr).map(|(a, b)| a * b).collect();
            let g = inverse(&spec, prod);
            mag2.iter_mut().zip(&g).for_each(|(m, v)| *m += v.norm_sqr());
        }
        best.iter_mut().zip(&mag2).for_each(|(b, m)| *b = b.max(m.sqrt()));
        if let Some(s) = u.support {
            support = Some(crate::grid::Support { center: s.center, radius: s.radius + ts[0] });
        }
    }
    let values = best.into_iter().map(|v| C64::new(v, 0.0)).collect();
    Ok(GridFunction { spec, channels: 1, values, support })
}

/// Convolution at every scale, returned per scale (used by oracles and reports).
pub fn convolutions(u: &GridFunction, profile: &Profile, scales: &ScaleSet) -> Result<Vec<(f64, GridFunction)>> {
    let spec = u.spec;
    let mut out = Vec::new();
    let unsupported = GridFunction { support: None, ..u.clone() };
    for t in scales.resolved(&spec)? {
        let tr = profile.transfer(&spec, t)?;
        out.push((t, convolve_with_transfer(&unsupported, &tr, t)?));
    }
    Ok(out)
}

pub fn hp_norm(u: &GridFunction, p: f64, profile: &Profile, scales: &ScaleSet) -> Result<f64> {
    if !(p > 0.0 && p.is_finite()) {
        return Err(Error::OutOfRange(format!("hp_norm needs 0 < p < inf, got {p}")));
    }
    let m = small_maximal(u, profile, scales)?;
    crate::grid::lp_norm(&m, p)
}

pub fn grand_maximal(f: &GridFunction, dict: &MaximalDictionary, scales: &ScaleSet) -> Result<GridFunction> {
    let mut iter = dict.profiles.iter();
    let first = iter.next().ok_or(Error::EmptyDictionary)?;
    let mut out = small_maximal(f, first, scales)?;
    for p in iter {
        let m = small_maximal(f, p, scales)?;
        out.values.iter_mut().zip(&m.values).for_each(|(a, b)| {
            if b.re > a.re {
                *a = *b
            }
        });
    }
    Ok(out)
}

/// Grand maximal function with aperture: sup over profiles, scales t and centers
/// within `aperture * t` of x of |u * phi_t|.
pub fn nontangential_maximal(u: &GridFunction, dict: &MaximalDictionary, scales: &ScaleSet, aperture: f64) -> Result<GridFunction> {
    if dict.profiles.is_empty() {
        return Err(Error::EmptyDictionary);
    }
    let spec = u.spec;
    let ts = scales.resolved(&spec)?;
    let hats: Vec<Vec<C64>> = (0..u.channels).map(|c| forward(&spec, u.channel(c))).collect();
    let mut best = vec![0.0f64; spec.len()];
    for profile in &dict.profiles {
        for &t in &ts {
            let tr = profile.transfer(&spec, t)?;
            let mut mag2 = vec![0.0f64; spec.len()];
            for hat in &hats {
                let prod: Vec<C64> = hat.iter().zip(&tr).map(|(a, b)| a * b).collect();
                let g = inverse(&spec, prod);
                mag2.iter_mut().zip(&g).for_each(|(m, v)| *m += v.norm_sqr());
            }
            let mag: Vec<f64> = mag2.into_iter().map(f64::sqrt).collect();
            let spread = if aperture > 0.0 { disk_max(&spec, &mag, aperture * t + spec.h() / 2.0) } else { mag };
            best.iter_mut().zip(&spread).for_each(|(b, m)| *b = b.max(*m));
        }
    }
    let values = best.into_iter().map(|v| C64::new(v, 0.0)).collect();
    Ok(GridFunction { spec, channels: 1, values, support: None })
}

/// Radii of the ball family: one cell, then doubling up to a quarter of the box side.
pub fn ball_radii(spec: &GridSpec) -> Vec<f64> {
    let h = spec.h();
    let mut out = vec![h];
    while out.last().unwrap() * 2.0 <= spec.box_half_width / 2.0 + 1e-12 {
        let next = out.last().unwrap() * 2.0;
        out.push(next);
    }
    out
}

/// Integer offsets of the discrete ball of radius `rho` (open ball, cell-center rule).
fn ball_offsets(spec: &GridSpec, rho: f64) -> Vec<[i64; 3]> {
    let r = rho / spec.h();
    let reach = r.ceil() as i64;
    let dim = spec.dim;
    let span = (2 * reach + 1) as usize;
    let mut out = Vec::new();
    for flat in 0..span.pow(dim as u32) {
        let mut rem = flat;
        let mut o = [0i64; 3];
        for d in (0..dim).rev() {
            o[d] = (rem % span) as i64 - reach;
            rem /= span;
        }
        let d2: i64 = o.iter().map(|v| v * v).sum();
        if (d2 as f64) < r * r {
            out.push(o);
        }
    }
    out
}

/// Averages of `g` over the discrete ball of radius `rho` around every lattice center.
fn ball_means(spec: &GridSpec, g: &[f64], rho: f64) -> (Vec<f64>, usize) {
    let offsets = ball_offsets(spec, rho);
    let count = offsets.len();
    let mut ind = vec![C64::default(); spec.len()];
    for o in &offsets {
        let mut ix = [0usize; 3];
        for d in 0..spec.dim {
            ix[d] = spec.wrap(-o[d]);
        }
        ind[spec.ravel(ix)] = C64::new(1.0, 0.0);
    }
    let ih = forward(spec, &ind);
    let gh = forward(spec, &g.iter().map(|&v| C64::new(v, 0.0)).collect::<Vec<_>>());
    let prod: Vec<C64> = gh.iter().zip(&ih).map(|(a, b)| a * b).collect();
    let sums = inverse(spec, prod);
    (sums.into_iter().map(|s| s.re / count as f64).collect(), count)
}

/// Sliding max along the last axis with periodic window [-w, w].
fn sliding_max_last_axis(spec: &GridSpec, a: &[f64], w: usize) -> Vec<f64> {
    let n = spec.points_per_axis;
    let mut out = vec![0.0; a.len()];
    if w == 0 {
        out.copy_from_slice(a);
        return out;
    }
    let mut deque: std::collections::VecDeque<(i64, f64)> = std::collections::VecDeque::new();
    let w = w as i64;
    for (line, dst) in a.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
        deque.clear();
        let at = |j: i64| line[j.rem_euclid(n as i64) as usize];
        for j in -w..(n as i64 + w) {
            let v = at(j);
            while deque.back().is_some_and(|&(_, b)| b <= v) {
                deque.pop_back();
            }
            deque.push_back((j, v));
            let centre = j - w;
            if centre >= 0 {
                while deque.front().is_some_and(|&(k, _)| k < centre - w) {
                    deque.pop_front();
                }
                dst[centre as usize] = deque.front().unwrap().1;
            }
        }
    }
    out
}

/// For each x, the max of `a(c)` over centers c with |x - c| < rho.
fn disk_max(spec: &GridSpec, a: &[f64], rho: f64) -> Vec<f64> {
    let dim = spec.dim;
    let r = rho / spec.h();
    let reach = r.ceil() as i64;
    let mut prefixes: Vec<([i64; 3], usize)> = Vec::new();
    let span = (2 * reach + 1) as usize;
    for flat in 0..span.pow((dim - 1) as u32) {
        let mut rem = flat;
        let mut o = [0i64; 3];
        for d in (0..dim - 1).rev() {
            o[d] = (rem % span) as i64 - reach;
            rem /= span;
        }
        let s: i64 = o.iter().map(|v| v * v).sum();
        let left = r * r - s as f64;
        if left <= 0.0 {
            continue;
        }
        // Largest integer dx with dx^2 < left.
        let mut w = left.sqrt().floor() as i64;
        while (w * w) as f64 >= left {
            w -= 1;
        }
        prefixes.push((o, w.max(0) as usize));
    }
    let mut widths: Vec<usize> = prefixes.iter().map(|p| p.1).collect();
    widths.sort_unstable();
    widths.dedup();
    let mut out = vec![f64::NEG_INFINITY; a.len()];
    for w in widths {
        let slid = sliding_max_last_axis(spec, a, w);
        for (o, _) in prefixes.iter().filter(|p| p.1 == w) {
            for (i, slot) in out.iter_mut().enumerate() {
                let mut ix = spec.unravel(i);
                for d in 0..dim - 1 {
                    ix[d] = spec.wrap(ix[d] as i64 + o[d]);
                }
                let v = slid[spec.ravel(ix)];
                if v > *slot {
                    *slot = v;
                }
            }
        }
    }
    out
}

fn maximal_of(spec: &GridSpec, g: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0f64; g.len()];
    for rho in ball_radii(spec) {
        let (means, _) = ball_means(spec, g, rho);
        let m = disk_max(spec, &means, rho);
        out.iter_mut().zip(&m).for_each(|(a, b)| *a = a.max(*b));
    }
    out
}

/// Hardy-Littlewood maximal function over lattice-centred balls of radii `ball_radii`.
pub fn hl_maximal(f: &GridFunction) -> GridFunction {
    let spec = f.spec;
    let m = maximal_of(&spec, &f.magnitudes());
    GridFunction { spec, channels: 1, values: m.into_iter().map(|v| C64::new(v, 0.0)).collect(), support: None }
}

/// Fractional maximal function, with t^N read as |B|/omega_N for the discrete ball measure
/// so that M_1 = omega_N * M holds on the lattice.
pub fn fractional_maximal(f: &GridFunction, q: f64) -> Result<GridFunction> {
    if !(q > 0.0 && q.is_finite()) {
        return Err(Error::OutOfRange(format!("fractional_maximal needs q > 0, got {q}")));
    }
    let spec = f.spec;
    let omega = spec.unit_ball_volume();
    let g: Vec<f64> = f.magnitudes().into_iter().map(|v| v.powf(q)).collect();
    let m = maximal_of(&spec, &g);
    let values = m.into_iter().map(|v| C64::new((omega * v.max(0.0)).powf(1.0 / q), 0.0)).collect();
    Ok(GridFunction { spec, channels: 1, values, support: None })
}

/// Sum over |gamma| <= k of ||D^gamma v||_q (q = inf allowed).
pub fn sobolev_norm(v: &GridFunction, k: usize, q: f64) -> Result<f64> {
    if !(q > 1.0) {
        return Err(Error::OutOfRange(format!("sobolev_norm needs q in (1, inf], got {q}")));
    }
    let mut total = 0.0;
    for gamma in MultiIndex::up_to(v.spec.dim, k) {
        total += lp_or_inf(&derivative(v, &gamma, DerivMethod::Spectral)?, q)?;
    }
    Ok(total)
}

/// Sum over |beta| <= m (or |beta| = m when `homogeneous`) of ||D^beta f||_{h^p}.
pub fn hardy_sobolev_norm(f: &GridFunction, m: usize, p: f64, profile: &Profile, scales: &ScaleSet, homogeneous: bool) -> Result<f64> {
    let mut total = 0.0;
    for beta in MultiIndex::up_to(f.spec.dim, m) {
        if homogeneous && beta.order() != m {
            continue;
        }
        total += hp_norm(&derivative(f, &beta, DerivMethod::Spectral)?, p, profile, scales)?;
    }
    Ok(total)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HolderOptions {
    /// Largest |h|; defaults to half the declared support diameter, else W/2.
    pub cap: Option<f64>,
    /// Sweep every lattice vector up to the cap instead of thinning long ones.
    pub exhaustive: bool,
}

/// Offsets exhaustive up to 8 cells, then thinned to a sublattice whose spacing doubles per octave.
fn holder_offsets(dim: usize, cap_cells: f64, exhaustive: bool) -> Vec<[i64; 3]> {
    let reach = cap_cells.floor() as i64;
    let span = (2 * reach + 1) as usize;
    let mut out = Vec::new();
    for flat in 0..span.pow(dim as u32) {
        let mut rem = flat;
        let mut o = [0i64; 3];
        for d in (0..dim).rev() {
            o[d] = (rem % span) as i64 - reach;
            rem /= span;
        }
        // Half space: the first nonzero component is positive.
        match o.iter().take(dim).find(|&&v| v != 0) {
            Some(&v) if v > 0 => {}
            _ => continue,
        }
        let len = (o.iter().map(|v| v * v).sum::<i64>() as f64).sqrt();
        if len > cap_cells {
            continue;
        }
        if !exhaustive && len > 8.0 {
            let stride = 1i64 << ((len / 8.0).log2().floor() as u32);
            if o.iter().take(dim).any(|v| v % stride != 0) {
                continue;
            }
        }
        out.push(o);
    }
    out
}

pub fn holder_seminorm(f: &GridFunction, r: f64) -> Result<f64> {
    holder_seminorm_with(f, r, &HolderOptions::default())
}

/// Sum over |alpha| = k of the discrete s-Holder (Zygmund when s = 1) seminorm of D^alpha f,
/// with r = k + s. Only pairs that do not wrap around the periodic box are used.
pub fn holder_seminorm_with(f: &GridFunction, r: f64, opts: &HolderOptions) -> Result<f64> {
    if !(r > 0.0 && r.is_finite()) {
        return Err(Error::OutOfRange(format!("holder exponent must be positive, got {r}")));
    }
    let k = (r.ceil() as usize).saturating_sub(1);
    let s = r - k as f64;
    let spec = f.spec;
    let h = spec.h();
    let cap = opts.cap.unwrap_or_else(|| f.support.map(|s| s.radius).unwrap_or(spec.box_half_width / 2.0));
    let offsets = holder_offsets(spec.dim, cap / h, opts.exhaustive);
    let n = spec.points_per_axis as i64;
    let mut total = 0.0;
    for alpha in MultiIndex::of_order(spec.dim, k) {
        let g = derivative(f, &alpha, DerivMethod::Spectral)?;
        let mut best: f64 = 0.0;
        for o in &offsets {
            let len = (o.iter().map(|v| v * v).sum::<i64>() as f64).sqrt() * h;
            let denom = len.powf(s);
            for i in 0..spec.len() {
                let ix = spec.unravel(i);
                let mut plus = ix;
                let mut minus = ix;
                let mut ok = true;
                for d in 0..spec.dim {
                    let p = ix[d] as i64 + o[d];
                    let m = ix[d] as i64 - o[d];
                    if p < 0 || p >= n || (s == 1.0 && (m < 0 || m >= n)) {
                        ok = false;
                        break;
                    }
                    plus[d] = p as usize;
                    minus[d] = m.max(0) as usize;
                }
                if !ok {
                    continue;
                }
                let (ip, im) = (spec.ravel(plus), spec.ravel(minus));
                let mut acc = 0.0;
                for c in 0..g.channels {
                    let ch = g.channel(c);
                    let diff = if s == 1.0 { ch[ip] + ch[im] - 2.0 * ch[i] } else { ch[ip] - ch[i] };
                    acc += diff.norm_sqr();
                }
                best = best.max(acc.sqrt() / denom);
            }
        }
        total += best;
    }
    Ok(total)
}

/// Lattice-aligned cubes of side 2^j cells at half-side spacing, split at unit measure.
pub fn bmo_norm(f: &GridFunction) -> Result<f64> {
    if f.channels != 1 {
        return Err(Error::ChannelMismatch { expected: 1, got: f.channels });
    }
    let spec = f.spec;
    let n = spec.points_per_axis;
    let dim = spec.dim;
    let h = spec.h();
    let mut small: f64 = 0.0;
    let mut large: f64 = 0.0;
    let mut side = 1usize;
    while side <= n {
        let step = (side / 2).max(1);
        let measure = (side as f64 * h).powi(dim as i32);
        let positions = (n - side) / step + 1;
        let count = side.pow(dim as u32) as f64;
        for flat in 0..positions.pow(dim as u32) {
            let mut rem = flat;
            let mut lo = [0usize; 3];
            for d in (0..dim).rev() {
                lo[d] = (rem % positions) * step;
                rem /= positions;
            }
            let cells = cube_cells(&spec, lo, side);
            if measure < 1.0 {
                let mean: C64 = cells.iter().map(|&i| f.values[i]).sum::<C64>() / count;
                let osc: f64 = cells.iter().map(|&i| (f.values[i] - mean).norm()).sum::<f64>() / count;
                small = small.max(osc);
            } else {
                let avg: f64 = cells.iter().map(|&i| f.values[i].norm()).sum::<f64>() / count;
                large = large.max(avg);
            }
        }
        side *= 2;
    }
    Ok(small + large)
}

pub(crate) fn cube_cells(spec: &GridSpec, lo: [usize; 3], side: usize) -> Vec<usize> {
    let dim = spec.dim;
    let mut out = Vec::with_capacity(side.pow(dim as u32));
    for flat in 0..side.pow(dim as u32) {
        let mut rem = flat;
        let mut ix = [0usize; 3];
        for d in (0..dim).rev() {
            ix[d] = lo[d] + rem % side;
            rem /= side;
        }
        out.push(spec.ravel(ix));
    }
    out
}

/// N_p = floor(N (1/p - 1)) for p in (0, 1].
pub fn np_exponent(p: f64, dim: usize) -> Result<usize> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::OutOfRange(format!("N_p needs 0 < p <= 1, got {p}")));
    }
    Ok((dim as f64 * (1.0 / p - 1.0) + 1e-12).floor() as usize)
}

/// gamma_p = N (1/p - 1).
pub fn gamma_p(p: f64, dim: usize) -> f64 {
    dim as f64 * (1.0 / p - 1.0)
}

/// p* = Np / (N - mp), infinite at p = N/m.
pub fn sobolev_exponent(p: f64, dim: usize, m: usize) -> Result<f64> {
    let n = dim as f64;
    let mf = m as f64;
    if !(p > 0.0) || p > n / mf {
        return Err(Error::OutOfRange(format!("p* needs 0 < p <= N/m = {}, got {p}", n / mf)));
    }
    if p == n / mf {
        return Ok(f64::INFINITY);
    }
    Ok(n * p / (n - mf * p))
}

/// Returns r with 1/r = 1/p + 1/q and whether 1/r < 1 + m/N holds.
pub fn admissible(p: f64, q: f64, dim: usize, m: usize) -> Result<(f64, bool)> {
    let n = dim as f64;
    let mf = m as f64;
    if !(p > n / (n + mf) && p <= n / mf) {
        return Err(Error::OutOfRange(format!("p = {p} violates N/(N+m) < p <= N/m ({} < p <= {})", n / (n + mf), n / mf)));
    }
    if !(q > 1.0) {
        return Err(Error::OutOfRange(format!("q = {q} violates 1 < q <= inf")));
    }
    let inv_r = 1.0 / p + 1.0 / q;
    Ok((1.0 / inv_r, inv_r < 1.0 + mf / n))
}

/// The L^p norm computed from a precomputed magnitude field.
pub fn lp_from_field(f: &GridFunction, p: f64) -> f64 {
    let mags: Vec<f64> = f.values.iter().map(|v| v.re.abs()).collect();
    if p.is_infinite() {
        return mags.iter().cloned().fold(0.0, f64::max);
    }
    lp_of_magnitudes(&mags, p, f.spec.cell_volume())
}

pub fn sup_norm(f: &GridFunction) -> f64 {
    linf_norm(f)
}
