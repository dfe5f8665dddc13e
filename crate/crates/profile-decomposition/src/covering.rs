//! Separated nets, coverings, quadrature grids and partitions of unity.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{unit_ball_volume, ManifoldModel, NormalChart};
use crate::scalar::{from_usize, lex_cmp, lit, norm, to_f64, Real};

/// Geodesic ball given by an ambient center and a radius.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ball<T> {
    pub center: Vec<T>,
    pub radius: T,
}

impl<T: Real> Ball<T> {
    pub fn new(center: Vec<T>, radius: T) -> Self {
        Ball { center, radius }
    }
}

/// Cartesian quadrature on the coordinate ball `Ω_r`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QuadratureGrid<T> {
    pub dimension: usize,
    pub radius: T,
    pub resolution: usize,
    nodes: Vec<T>,
    pub weights: Vec<T>,
}

impl<T: Real> QuadratureGrid<T> {
    /// `resolution` cells per axis across the diameter. Cut cells are subsampled
    /// `8^N` times; weights are rescaled so their sum is the exact volume.
    pub fn ball(dimension: usize, radius: T, resolution: usize) -> Self {
        let n = dimension;
        let res = resolution.max(2);
        let cell = lit::<T>(2.0) * radius / from_usize(res);
        let cell_vol = cell.powi(n as i32);
        let sub = 8usize;
        let half = lit::<T>(0.5);
        let mut nodes = Vec::new();
        let mut weights = Vec::new();
        let r2 = radius * radius;
        for flat in 0..res.pow(n as u32) {
            let mut rem = flat;
            let mut lo = vec![T::zero(); n];
            for c in lo.iter_mut() {
                *c = -radius + from_usize::<T>(rem % res) * cell;
                rem /= res;
            }
            let mut far2 = T::zero();
            let mut near2 = T::zero();
            for &l in &lo {
                let h = l + cell;
                let far = l.abs().max(h.abs());
                far2 += far * far;
                let near = if l <= T::zero() && h >= T::zero() { T::zero() } else { l.abs().min(h.abs()) };
                near2 += near * near;
            }
            if near2 >= r2 {
                continue;
            }
            if far2 <= r2 {
                nodes.extend(lo.iter().map(|l| *l + half * cell));
                weights.push(cell_vol);
                continue;
            }
            let mut count = 0usize;
            let mut centroid = vec![T::zero(); n];
            for s in 0..sub.pow(n as u32) {
                let mut rem = s;
                let mut p = vec![T::zero(); n];
                for (a, c) in p.iter_mut().enumerate() {
                    *c = lo[a] + (from_usize::<T>(rem % sub) + half) * cell / from_usize(sub);
                    rem /= sub;
                }
                if p.iter().map(|c| *c * *c).sum::<T>() < r2 {
                    count += 1;
                    for (c, pc) in centroid.iter_mut().zip(&p) {
                        *c += *pc;
                    }
                }
            }
            if count == 0 {
                continue;
            }
            nodes.extend(centroid.iter().map(|c| *c / from_usize(count)));
            weights.push(cell_vol * from_usize(count) / from_usize(sub.pow(n as u32)));
        }
        let exact = unit_ball_volume::<T>(n) * radius.powi(n as i32);
        let total: T = weights.iter().copied().sum();
        for w in weights.iter_mut() {
            *w *= exact / total;
        }
        QuadratureGrid {
            dimension: n,
            radius,
            resolution: res,
            nodes,
            weights,
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn node(&self, k: usize) -> &[T] {
        &self.nodes[k * self.dimension..(k + 1) * self.dimension]
    }

    pub fn total_weight(&self) -> T {
        self.weights.iter().copied().sum()
    }
}

/// Tensor grid of `resolution^N` nodes on the cube `[-half_width, half_width]^N`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxGrid<T> {
    pub dimension: usize,
    pub half_width: T,
    pub resolution: usize,
}

impl<T: Real> BoxGrid<T> {
    pub fn new(dimension: usize, half_width: T, resolution: usize) -> Self {
        BoxGrid {
            dimension,
            half_width,
            resolution: resolution.max(2),
        }
    }

    pub fn len(&self) -> usize {
        self.resolution.pow(self.dimension as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn spacing(&self) -> T {
        lit::<T>(2.0) * self.half_width / from_usize(self.resolution - 1)
    }

    pub fn multi_index(&self, k: usize) -> Vec<usize> {
        let mut rem = k;
        (0..self.dimension)
            .map(|_| {
                let i = rem % self.resolution;
                rem /= self.resolution;
                i
            })
            .collect()
    }

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        idx.iter().rev().fold(0, |acc, i| acc * self.resolution + i)
    }

    pub fn node(&self, k: usize) -> Vec<T> {
        let h = self.spacing();
        self.multi_index(k)
            .into_iter()
            .map(|i| -self.half_width + from_usize::<T>(i) * h)
            .collect()
    }

    /// Axis neighbours of node `k` (up to `2N`).
    pub fn neighbors(&self, k: usize) -> Vec<usize> {
        let idx = self.multi_index(k);
        let mut out = Vec::with_capacity(2 * self.dimension);
        for a in 0..self.dimension {
            if idx[a] > 0 {
                let mut j = idx.clone();
                j[a] -= 1;
                out.push(self.flat_index(&j));
            }
            if idx[a] + 1 < self.resolution {
                let mut j = idx.clone();
                j[a] += 1;
                out.push(self.flat_index(&j));
            }
        }
        out
    }

    /// Multilinear interpolation of `width`-vector samples; `None` outside the cube.
    pub fn interpolate(&self, samples: &[T], width: usize, x: &[T]) -> Option<Vec<T>> {
        let n = self.dimension;
        let h = self.spacing();
        let tol = h * lit(1e-9);
        let mut base = Vec::with_capacity(n);
        let mut frac = Vec::with_capacity(n);
        for &c in x {
            let u = (c + self.half_width) / h;
            if u < -tol / h || u > from_usize::<T>(self.resolution - 1) + tol / h {
                return None;
            }
            let i = to_f64(u.floor()).max(0.0) as usize;
            let i = i.min(self.resolution - 2);
            base.push(i);
            frac.push((u - from_usize(i)).max(T::zero()).min(T::one()));
        }
        let mut out = vec![T::zero(); width];
        for corner in 0..(1usize << n) {
            let mut w = T::one();
            let mut idx = base.clone();
            for a in 0..n {
                if corner >> a & 1 == 1 {
                    idx[a] += 1;
                    w *= frac[a];
                } else {
                    w *= T::one() - frac[a];
                }
            }
            if w == T::zero() {
                continue;
            }
            let k = self.flat_index(&idx);
            for (o, s) in out.iter_mut().zip(&samples[k * width..(k + 1) * width]) {
                *o += w * *s;
            }
        }
        Some(out)
    }
}

fn keys_weight<T: Real>(t: T) -> T {
    let t = t.abs();
    if t <= T::one() {
        (lit::<T>(1.5) * t - lit(2.5)) * t * t + T::one()
    } else if t < lit(2.0) {
        ((lit::<T>(-0.5) * t + lit(2.5)) * t - lit(4.0)) * t + lit(2.0)
    } else {
        T::zero()
    }
}

impl<T: Real> BoxGrid<T> {
    /// Cubic convolution (Keys, `a = -1/2`) of scalar samples; `None` outside the cube.
    pub fn interpolate_cubic(&self, samples: &[T], x: &[T]) -> Option<T> {
        let n = self.dimension;
        let h = self.spacing();
        let last = self.resolution as i64 - 1;
        let mut base = Vec::with_capacity(n);
        let mut frac = Vec::with_capacity(n);
        for &c in x {
            let u = (c + self.half_width) / h;
            if u < lit(-1e-9) || u > from_usize::<T>(self.resolution - 1) + lit(1e-9) {
                return None;
            }
            let i = (to_f64(u.floor()) as i64).clamp(0, last - 1);
            base.push(i);
            frac.push(u - lit(i as f64));
        }
        let mut out = T::zero();
        let mut idx = vec![0usize; n];
        for tap in 0..4usize.pow(n as u32) {
            let mut rem = tap;
            let mut w = T::one();
            for a in 0..n {
                let o = (rem % 4) as i64 - 1;
                rem /= 4;
                w *= keys_weight(frac[a] - lit(o as f64));
                idx[a] = (base[a] + o).clamp(0, last) as usize;
            }
            if w != T::zero() {
                out += w * samples[self.flat_index(&idx)];
            }
        }
        Some(out)
    }
}

/// Uniform hash of points by global coordinates.
#[derive(Clone, Debug, Default)]
pub struct SpatialHash {
    cell: f64,
    buckets: HashMap<Vec<i64>, Vec<usize>>,
}

impl SpatialHash {
    pub fn new(cell: f64) -> Self {
        SpatialHash {
            cell,
            buckets: HashMap::new(),
        }
    }

    fn key<T: Real>(&self, x: &[T]) -> Vec<i64> {
        x.iter().map(|c| (to_f64(*c) / self.cell).floor() as i64).collect()
    }

    pub fn insert<T: Real>(&mut self, x: &[T], id: usize) {
        let k = self.key(x);
        self.buckets.entry(k).or_default().push(id);
    }

    /// Ids whose cells meet the cube of half-width `r` around `x` (a superset of the ball).
    pub fn query<T: Real>(&self, x: &[T], r: T) -> Vec<usize> {
        let lo: Vec<i64> = x.iter().map(|c| ((to_f64(*c) - to_f64(r)) / self.cell).floor() as i64).collect();
        let hi: Vec<i64> = x.iter().map(|c| ((to_f64(*c) + to_f64(r)) / self.cell).floor() as i64).collect();
        let mut out = Vec::new();
        let mut key = lo.clone();
        loop {
            if let Some(b) = self.buckets.get(&key) {
                out.extend_from_slice(b);
            }
            let mut a = 0;
            loop {
                if a == key.len() {
                    out.sort_unstable();
                    return out;
                }
                if key[a] < hi[a] {
                    key[a] += 1;
                    break;
                }
                key[a] = lo[a];
                a += 1;
            }
        }
    }
}

/// A `ρ̂`-separated set of centers whose `ρ`-balls cover a region.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DiscreteNet<T> {
    pub centers: Vec<Vec<T>>,
    pub global: Vec<Vec<T>>,
    pub separation: T,
    pub cover_radius: T,
    pub region: Vec<Ball<T>>,
    #[serde(skip)]
    hash: SpatialHash,
}

fn check_scales<T: Real>(model: &ManifoldModel<T>, rho: T, rho_hat: T) -> Result<()> {
    let half = lit::<T>(0.5);
    if !(rho * half < rho_hat && rho_hat < rho && rho * lit(8.0) < model.injectivity_floor) {
        return Err(Error::Construction(format!(
            "scales must satisfy rho/2 < rho_hat < rho < r(M)/8; got rho={rho}, rho_hat={rho_hat}, r(M)={}",
            model.injectivity_floor
        )));
    }
    Ok(())
}

impl<T: Real> DiscreteNet<T> {
    fn index(model: &ManifoldModel<T>, centers: Vec<Vec<T>>, separation: T, cover_radius: T, region: Vec<Ball<T>>) -> Self {
        let global: Vec<Vec<T>> = centers.iter().map(|c| model.global_coords(c)).collect();
        let mut hash = SpatialHash::new(to_f64(cover_radius));
        for (i, g) in global.iter().enumerate() {
            hash.insert(g, i);
        }
        DiscreteNet {
            centers,
            global,
            separation,
            cover_radius,
            region,
            hash,
        }
    }

    /// Net from explicit centers (for example a group orbit); separation is verified.
    pub fn from_points(
        model: &ManifoldModel<T>,
        centers: Vec<Vec<T>>,
        separation: T,
        cover_radius: T,
        region: Vec<Ball<T>>,
    ) -> Result<Self> {
        let net = Self::index(model, centers, separation, cover_radius, region);
        for i in 0..net.len() {
            for (j, d) in net.within(model, &net.centers[i], separation) {
                if j != i && d < separation * (T::one() - lit(1e-9)) {
                    return Err(Error::Construction(format!("centers {i} and {j} closer than separation")));
                }
            }
        }
        Ok(net)
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    /// Candidate ids for a geodesic query of radius `r` around ambient `x`.
    pub fn candidates(&self, model: &ManifoldModel<T>, x: &[T], r: T) -> Vec<usize> {
        self.hash.query(&model.global_coords(x), r * model.coord_factor())
    }

    /// Centers with `d(x, y) < r`, with distances, in index order.
    pub fn within(&self, model: &ManifoldModel<T>, x: &[T], r: T) -> Vec<(usize, T)> {
        self.candidates(model, x, r)
            .into_iter()
            .filter_map(|i| {
                let (lo, _) = model.distance_bracket(x, &self.centers[i]);
                if lo >= r {
                    return None;
                }
                let d = model.distance(x, &self.centers[i]);
                (d < r).then_some((i, d))
            })
            .collect()
    }

    /// Index of the center coinciding with `x` within `tol`.
    pub fn index_of(&self, model: &ManifoldModel<T>, x: &[T], tol: T) -> Option<usize> {
        self.within(model, x, tol.max(T::min_positive_value()))
            .into_iter()
            .min_by(|a, b| a.1.partial_cmp(&b.1).expect("finite distance"))
            .map(|(i, _)| i)
    }

    /// Nearest center to `x`.
    pub fn nearest(&self, model: &ManifoldModel<T>, x: &[T]) -> Option<(usize, T)> {
        let mut r = self.cover_radius;
        for _ in 0..40 {
            let found = self.within(model, x, r);
            if let Some(best) = found
                .into_iter()
                .min_by(|a, b| a.1.partial_cmp(&b.1).expect("finite").then(a.0.cmp(&b.0)))
            {
                return Some(best);
            }
            r = r * lit(2.0);
        }
        None
    }

    /// Whether ambient point `x` lies in the region the net was built for.
    pub fn region_contains(&self, model: &ManifoldModel<T>, x: &[T]) -> bool {
        self.region.iter().any(|b| model.distance(x, &b.center) < b.radius)
    }
}

/// Greedy maximal `ρ̂`-separated set over a candidate lattice of spacing `ρ̂/8`.
///
/// Candidates are scanned in row-major order (axis 0 fastest) over the snapped
/// bounding box of the region; `seed` shifts the lattice anchor within one cell.
/// Only centers within `ρ` of the region are kept.
pub fn build_net<T: Real>(model: &ManifoldModel<T>, region: &[Ball<T>], rho: T, rho_hat: T, seed: u64) -> Result<DiscreteNet<T>> {
    check_scales(model, rho, rho_hat)?;
    if region.is_empty() {
        return Err(Error::Domain("empty region".into()));
    }
    let n = model.dimension;
    for b in region {
        if b.center.len() != model.ambient_dim() || !b.center.iter().all(|c| c.is_finite()) {
            return Err(Error::Domain("region ball is not a point of the model".into()));
        }
        if b.radius + rho >= lit(1.0e5) {
            return Err(Error::Domain("region ball too large to discretize".into()));
        }
    }
    let h = rho_hat / lit(8.0);
    let factor = model.coord_factor();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let anchor: Vec<T> = (0..n)
        .map(|_| if seed == 0 { T::zero() } else { lit::<T>(rng.gen_range(0.0..1.0)) * h })
        .collect();
    let mut lo = vec![T::infinity(); n];
    let mut hi = vec![T::neg_infinity(); n];
    for b in region {
        let g = model.global_coords(&b.center);
        let r = b.radius * factor;
        for a in 0..n {
            lo[a] = lo[a].min(g[a] - r);
            hi[a] = hi[a].max(g[a] + r);
        }
    }
    let mut counts = Vec::with_capacity(n);
    let mut start = Vec::with_capacity(n);
    for a in 0..n {
        let i0 = ((lo[a] - anchor[a]) / h).floor();
        let i1 = ((hi[a] - anchor[a]) / h).ceil();
        start.push(anchor[a] + i0 * h);
        counts.push(to_f64(i1 - i0) as usize + 1);
    }
    let total: usize = counts.iter().product();
    if total > 50_000_000 {
        return Err(Error::Domain(format!("region needs {total} net candidates")));
    }
    let mut hash = SpatialHash::new(to_f64(rho_hat * factor));
    let mut centers: Vec<Vec<T>> = Vec::new();
    let mut globals: Vec<Vec<T>> = Vec::new();
    let thresh = rho_hat * (T::one() - lit(1e-9));
    let mut g = vec![T::zero(); n];
    for flat in 0..total {
        let mut rem = flat;
        for a in 0..n {
            g[a] = start[a] + from_usize::<T>(rem % counts[a]) * h;
            rem /= counts[a];
        }
        let p = model.from_global(&g);
        let ok = hash.query(&g, rho_hat * factor).into_iter().all(|j| {
            let (dlo, dhi) = model.distance_bracket(&p, &centers[j]);
            if dlo >= thresh {
                return true;
            }
            if dhi < thresh {
                return false;
            }
            model.distance(&p, &centers[j]) >= thresh
        });
        if ok {
            hash.insert(&g, centers.len());
            centers.push(p);
            globals.push(g.clone());
        }
    }
    let kept: Vec<Vec<T>> = centers
        .into_iter()
        .filter(|c| region.iter().any(|b| model.distance(c, &b.center) < b.radius + rho))
        .collect();
    if kept.is_empty() {
        return Err(Error::Domain("region unreachable by charts".into()));
    }
    Ok(DiscreteNet::index(model, kept, rho_hat, rho, region.to_vec()))
}

/// Points of a tensor lattice of spacing `spacing` lying inside the region.
pub fn dense_region_samples<T: Real>(model: &ManifoldModel<T>, region: &[Ball<T>], spacing: T) -> Vec<Vec<T>> {
    let n = model.dimension;
    let factor = model.coord_factor();
    let mut lo = vec![T::infinity(); n];
    let mut hi = vec![T::neg_infinity(); n];
    for b in region {
        let g = model.global_coords(&b.center);
        for a in 0..n {
            lo[a] = lo[a].min(g[a] - b.radius * factor);
            hi[a] = hi[a].max(g[a] + b.radius * factor);
        }
    }
    let counts: Vec<usize> = (0..n).map(|a| to_f64(((hi[a] - lo[a]) / spacing).ceil()) as usize + 1).collect();
    let mut out = Vec::new();
    for flat in 0..counts.iter().product::<usize>() {
        let mut rem = flat;
        let g: Vec<T> = (0..n)
            .map(|a| {
                let i = rem % counts[a];
                rem /= counts[a];
                lo[a] + from_usize::<T>(i) * spacing
            })
            .collect();
        let p = model.from_global(&g);
        if region.iter().any(|b| model.distance(&p, &b.center) < b.radius) {
            out.push(p);
        }
    }
    out
}

/// Largest distance from a sample to its nearest center.
pub fn cover_gap<T: Real>(model: &ManifoldModel<T>, net: &DiscreteNet<T>, samples: &[Vec<T>]) -> T {
    samples
        .iter()
        .map(|s| net.nearest(model, s).map(|(_, d)| d).unwrap_or(T::infinity()))
        .fold(T::zero(), T::max)
}

/// Smallest pairwise distance between centers (infinite for a single center).
pub fn min_separation<T: Real>(model: &ManifoldModel<T>, net: &DiscreteNet<T>) -> T {
    let mut best = T::infinity();
    for i in 0..net.len() {
        for (j, d) in net.within(model, &net.centers[i], net.separation * lit(2.0)) {
            if j != i {
                best = best.min(d);
            }
        }
    }
    best
}

/// Maximum over `samples` of the number of centers within `r`.
pub fn covering_multiplicity<T: Real>(model: &ManifoldModel<T>, net: &DiscreteNet<T>, r: T, samples: &[Vec<T>]) -> usize {
    samples.iter().map(|s| net.within(model, s, r).len()).max().unwrap_or(0)
}

/// Checks `#{y' : d(y', y) < D} <= c vol(B(D+ρ)) / vol(B(ρ/4))` at every center.
/// Returns the worst ratio of count to volume bound.
pub fn packing_ratio<T: Real>(model: &ManifoldModel<T>, net: &DiscreteNet<T>, d: T) -> T {
    let (_, big) = model.ball_volume_bounds(d + net.cover_radius);
    let (small, _) = model.ball_volume_bounds(net.cover_radius / lit(4.0));
    let bound = big / small;
    (0..net.len())
        .map(|i| from_usize::<T>(net.within(model, &net.centers[i], d).len()) / bound)
        .fold(T::zero(), T::max)
}

/// Radial template: 1 on `[0, 0.6]`, quintic smoothstep down to 0 at 1.
pub fn bump_template<T: Real>(t: T) -> T {
    let a = lit::<T>(0.6);
    if t <= a {
        return T::one();
    }
    if t >= T::one() {
        return T::zero();
    }
    let s = (t - a) / (T::one() - a);
    let s3 = s * s * s;
    T::one() - s3 * (lit::<T>(10.0) - lit::<T>(15.0) * s + lit::<T>(6.0) * s * s)
}

/// `χ_y = b(d(·,y)/ρ) / Σ_{y'} b(d(·,y')/ρ)`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct PartitionOfUnity<T> {
    pub rho: T,
}

impl<T: Real> PartitionOfUnity<T> {
    fn raw(&self, model: &ManifoldModel<T>, x: &[T], y: &[T]) -> T {
        let (lo, hi) = model.distance_bracket(x, y);
        if lo >= self.rho {
            return T::zero();
        }
        if hi <= self.rho * lit(0.6) {
            return T::one();
        }
        bump_template(model.distance(x, y) / self.rho)
    }

    /// All nonzero weights `(center, χ_center(x))` at `x`.
    pub fn weights(&self, model: &ManifoldModel<T>, net: &DiscreteNet<T>, x: &[T]) -> Result<Vec<(usize, T)>> {
        let mut out: Vec<(usize, T)> = net
            .candidates(model, x, self.rho)
            .into_iter()
            .filter_map(|i| {
                let b = self.raw(model, x, &net.centers[i]);
                (b > T::zero()).then_some((i, b))
            })
            .collect();
        let total: T = out.iter().map(|(_, b)| *b).sum();
        if total < lit(1e-12) {
            return Err(Error::Construction(format!(
                "partition denominator {total} below 1e-12: point not covered"
            )));
        }
        for (_, b) in out.iter_mut() {
            *b /= total;
        }
        Ok(out)
    }

    /// `χ_y(x)` for center index `y`.
    pub fn chi(&self, model: &ManifoldModel<T>, net: &DiscreteNet<T>, y: usize, x: &[T]) -> Result<T> {
        let own = self.raw(model, x, &net.centers[y]);
        if own == T::zero() {
            return Ok(T::zero());
        }
        let w = self.weights(model, net, x)?;
        Ok(w.into_iter().find(|(i, _)| *i == y).map(|(_, c)| c).unwrap_or(T::zero()))
    }
}

pub fn build_partition_of_unity<T: Real>(model: &ManifoldModel<T>, net: &DiscreteNet<T>) -> Result<PartitionOfUnity<T>> {
    let pu = PartitionOfUnity { rho: net.cover_radius };
    for c in &net.centers {
        pu.weights(model, net, c)?;
    }
    Ok(pu)
}

/// Sampled sup norms `[|χ|, |∇χ|, |∇²χ|]` of `χ_y ∘ e_y` on `Ω_ρ`.
pub fn partition_derivative_constants<T: Real>(
    model: &ManifoldModel<T>,
    net: &DiscreteNet<T>,
    pu: &PartitionOfUnity<T>,
    chart: &NormalChart<T>,
    y: usize,
    samples_per_axis: usize,
) -> Result<[T; 3]> {
    let n = model.dimension;
    let m = samples_per_axis.max(3);
    let h = lit::<T>(1e-3);
    let two = lit::<T>(2.0);
    let f = |xi: &[T]| -> Result<T> { pu.chi(model, net, y, &chart.forward(xi)?) };
    let mut out = [T::zero(); 3];
    for flat in 0..m.pow(n as u32) {
        let mut rem = flat;
        let xi: Vec<T> = (0..n)
            .map(|_| {
                let i = rem % m;
                rem /= m;
                pu.rho * (lit::<T>(-1.0) + two * from_usize::<T>(i) / from_usize(m - 1))
            })
            .collect();
        if norm(&xi) >= pu.rho - h * two {
            continue;
        }
        let f0 = f(&xi)?;
        out[0] = out[0].max(f0.abs());
        let mut grad2 = T::zero();
        for a in 0..n {
            let mut p = xi.clone();
            let mut q = xi.clone();
            p[a] += h;
            q[a] -= h;
            let fp = f(&p)?;
            let fq = f(&q)?;
            grad2 += ((fp - fq) / (two * h)).powi(2);
            out[2] = out[2].max(((fp - two * f0 + fq) / (h * h)).abs());
            for b in (a + 1)..n {
                let mut pp = xi.clone();
                let mut pm = xi.clone();
                let mut mp = xi.clone();
                let mut mm = xi.clone();
                pp[a] += h;
                pp[b] += h;
                pm[a] += h;
                pm[b] -= h;
                mp[a] -= h;
                mp[b] += h;
                mm[a] -= h;
                mm[b] -= h;
                let mixed = (f(&pp)? - f(&pm)? - f(&mp)? + f(&mm)?) / (lit::<T>(4.0) * h * h);
                out[2] = out[2].max(mixed.abs());
            }
        }
        out[1] = out[1].max(grad2.sqrt());
    }
    Ok(out)
}

/// Deterministic ordering of center ids by ambient coordinates.
pub fn lex_sorted<T: Real>(net: &DiscreteNet<T>, ids: &mut [usize]) {
    ids.sort_by(|a, b| lex_cmp(&net.centers[*a], &net.centers[*b], T::zero()));
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, proptest};

    fn flat() -> ManifoldModel<f64> {
        ManifoldModel::euclidean(2).unwrap()
    }

    #[test]
    fn quadrature_weights_sum_to_volume() {
        for res in [8, 31, 64] {
            let g = QuadratureGrid::<f64>::ball(2, 0.5, res);
            assert!((g.total_weight() - std::f64::consts::PI * 0.25).abs() < 1e-12);
            assert!((0..g.len()).all(|k| norm(g.node(k)) < 0.5));
        }
        let g3 = QuadratureGrid::<f64>::ball(3, 0.5, 12);
        assert!((g3.total_weight() - 4.0 / 3.0 * std::f64::consts::PI * 0.125).abs() < 1e-12);
    }

    #[test]
    fn quadrature_second_moment() {
        // ∫_{|x|<r} |x|^2 = π r^4 / 2 in the plane
        let g = QuadratureGrid::<f64>::ball(2, 0.5, 64);
        let m: f64 = (0..g.len()).map(|k| g.weights[k] * norm(g.node(k)).powi(2)).sum();
        let exact = std::f64::consts::PI * 0.0625 / 2.0;
        assert!((m / exact - 1.0).abs() < 2e-3);
    }

    #[test]
    fn box_interpolation_is_exact_on_affine_data() {
        let b = BoxGrid::<f64>::new(2, 1.0, 9);
        let samples: Vec<f64> = (0..b.len()).flat_map(|k| {
            let x = b.node(k);
            vec![2.0 * x[0] - x[1] + 0.5, x[1]]
        }).collect();
        let v = b.interpolate(&samples, 2, &[0.123, -0.77]).unwrap();
        assert!((v[0] - (0.246 + 0.77 + 0.5)).abs() < 1e-14);
        assert!(b.interpolate(&samples, 2, &[1.2, 0.0]).is_none());
    }

    #[test]
    fn small_region_gives_one_center() {
        let m = flat();
        let net = build_net(&m, &[Ball::new(vec![0.0, 0.0], 0.04)], 0.5, 0.4, 0).unwrap();
        // the scan box spans a single candidate cell pair; any two kept centers would violate separation
        assert_eq!(net.len(), 1);
    }

    #[test]
    fn square_is_covered_and_separated() {
        let m = flat();
        let region = vec![Ball::new(vec![2.0, 2.0], 2.0 * 2f64.sqrt())];
        let net = build_net(&m, &region, 0.8, 0.45, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let samples: Vec<Vec<f64>> = (0..10_000).map(|_| vec![rng.gen_range(0.0..4.0), rng.gen_range(0.0..4.0)]).collect();
        assert!(cover_gap(&m, &net, &samples) < 0.8);
        assert!(min_separation(&m, &net) >= 0.45 * (1.0 - 1e-9));
    }

    #[test]
    fn greedy_net_is_a_lattice_in_the_interior() {
        let m = flat();
        let region = vec![Ball::new(vec![0.0, 0.0], 3.0)];
        let net = build_net(&m, &region, 0.5, 0.4, 0).unwrap();
        let (c, _) = net.nearest(&m, &[0.0, 0.0]).unwrap();
        let y = net.centers[c].clone();
        for v in [[0.4, 0.0], [0.2, 0.35], [-0.2, 0.35], [0.0, 0.7]] {
            let q = [y[0] + v[0], y[1] + v[1]];
            assert!(net.index_of(&m, &q, 1e-9).is_some(), "missing {q:?}");
        }
    }

    #[test]
    fn multiplicity_on_integer_points() {
        let m = flat();
        let centers: Vec<Vec<f64>> = (-10..=10).map(|i| vec![i as f64, 0.0]).collect();
        let net = DiscreteNet::from_points(&m, centers, 1.0, 1.5, vec![]).unwrap();
        let samples: Vec<Vec<f64>> = (0..200).map(|i| vec![-5.0 + 0.05 * i as f64, 0.0]).collect();
        assert_eq!(covering_multiplicity(&m, &net, 1.1, &samples), 3);
        assert_eq!(covering_multiplicity(&m, &net, 0.4, &samples), 1);
    }

    #[test]
    fn multiplicity_is_window_independent() {
        let m = flat();
        let net = build_net(&m, &[Ball::new(vec![0.0, 0.0], 6.0)], 0.5, 0.4, 0).unwrap();
        let a = dense_region_samples(&m, &[Ball::new(vec![-2.0, 0.0], 1.0)], 0.02);
        let b = dense_region_samples(&m, &[Ball::new(vec![2.2, 0.35], 1.0)], 0.02);
        assert_eq!(covering_multiplicity(&m, &net, 0.5, &a), covering_multiplicity(&m, &net, 0.5, &b));
    }

    #[test]
    fn single_center_partition_is_one() {
        let m = flat();
        let net = DiscreteNet::from_points(&m, vec![vec![0.0, 0.0]], 0.4, 0.5, vec![]).unwrap();
        let pu = build_partition_of_unity(&m, &net).unwrap();
        assert_eq!(pu.chi(&m, &net, 0, &[0.2, 0.3]).unwrap(), 1.0);
        assert!(pu.weights(&m, &net, &[0.6, 0.0]).is_err());
    }

    #[test]
    fn lattice_partition_constants_match_across_interior_centers() {
        let m = std::sync::Arc::new(flat());
        let net = build_net(&m, &[Ball::new(vec![0.0, 0.0], 4.0)], 0.5, 0.4, 0).unwrap();
        let pu = build_partition_of_unity(&m, &net).unwrap();
        let mut consts = Vec::new();
        for q in [[0.0, 0.0], [0.8, 0.0], [0.4, 0.7]] {
            let (y, _) = net.nearest(&m, &q).unwrap();
            let chart = crate::geometry::make_normal_chart(&m, &net.centers[y], 0.5, 1).unwrap();
            consts.push(partition_derivative_constants(&m, &net, &pu, &chart, y, 21).unwrap());
        }
        for c in &consts[1..] {
            for a in 0..3 {
                assert!((c[a] - consts[0][a]).abs() < 1e-6 * (1.0 + consts[0][a]), "{c:?} vs {:?}", consts[0]);
            }
        }
    }

    #[test]
    fn cubic_interpolation_reproduces_quadratics() {
        let g = BoxGrid::new(2, 1.0, 21);
        let f = |x: &[f64]| 0.3 + x[0] - 2.0 * x[1] + x[0] * x[1] + 0.5 * x[1] * x[1];
        let samples: Vec<f64> = (0..g.len()).map(|k| f(&g.node(k))).collect();
        for x in [[0.13, -0.41], [-0.77, 0.52], [0.0, 0.0]] {
            assert!((g.interpolate_cubic(&samples, &x).unwrap() - f(&x)).abs() < 1e-12);
        }
        assert!(g.interpolate_cubic(&samples, &[1.2, 0.0]).is_none());
    }

    #[test]
    fn bump_template_shape() {
        assert_eq!(bump_template(0.3_f64), 1.0);
        assert_eq!(bump_template(1.2_f64), 0.0);
        assert!((bump_template(0.8_f64) - 0.5).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn partition_sums_to_one(x in -2.5f64..2.5, y in -2.5f64..2.5) {
            let m = flat();
            let net = build_net(&m, &[Ball::new(vec![0.0, 0.0], 3.0)], 0.5, 0.4, 3).unwrap();
            let pu = PartitionOfUnity { rho: 0.5 };
            let w = pu.weights(&m, &net, &[x, y]).unwrap();
            let s: f64 = w.iter().map(|(_, c)| c).sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
            prop_assert!(w.iter().all(|(i, c)| *c >= 0.0 && m.distance(&net.centers[*i], &[x, y]) < 0.5));
        }

        #[test]
        fn cover_and_separation_hold_for_every_model(kind in 0usize..3, seed in 0u64..20) {
            let m = match kind {
                0 => flat(),
                1 => ManifoldModel::hyperbolic(2).unwrap(),
                _ => ManifoldModel::perturbed_euclidean(2, crate::geometry::MetricBump::isotropic(vec![0.0, 0.0], 1.5, 0.15)).unwrap(),
            };
            let region = vec![Ball::new(m.from_global(&[0.3, -0.2]), 1.2)];
            let net = build_net(&m, &region, 0.5, 0.4, seed).unwrap();
            let samples = dense_region_samples(&m, &region, 0.15);
            prop_assert!(cover_gap(&m, &net, &samples) < 0.5);
            prop_assert!(min_separation(&m, &net) >= 0.4 * (1.0 - 1e-9));
        }
    }
}
