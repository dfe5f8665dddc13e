//! The manifold at infinity as a chart graph: gluing data, its validation, the glued
//! manifold with limit metric and limit partition, and global profiles on it.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covering::{BoxGrid, QuadratureGrid};
use crate::error::{Error, Result};
use crate::funcspace::{Atlas, ChartFunction};
use crate::linalg;
use crate::scalar::{from_usize, lit, norm, to_f64, Real};
use crate::trailing::{box_jacobians, metric_compatibility, LimitMetric, TrailingSystem, TransitionMapEstimate};

pub const DISJOINT_DOMAINS: &str = "disjoint-domains";
pub const OVERLAP_STRUCTURE: &str = "overlap-structure";
pub const DIFFEOMORPHISM: &str = "diffeomorphism";
pub const IDENTITY: &str = "identity";
pub const INVERSE: &str = "inverse";
pub const COCYCLE: &str = "cocycle";
pub const BOUNDARY: &str = "boundary";

/// One ordered chart pair: `ψ_ji` sampled on the box grid of chart `i`, and `Ω_ij`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GluingPair<T> {
    pub i: usize,
    pub j: usize,
    /// `N` coordinates (in chart `j`) per box node of chart `i`.
    pub map: Vec<T>,
    /// `'1'` where the box node lies in `Ω_ij`.
    pub overlap: String,
}

impl<T> GluingPair<T> {
    pub fn in_overlap(&self, k: usize) -> bool {
        self.overlap.as_bytes().get(k) == Some(&b'1')
    }
}

/// Chart domains `Ω_i = offset_i + Ω_ρ`, overlaps and transition maps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GluingData<T> {
    pub dimension: usize,
    pub charts: usize,
    pub rho: T,
    pub grid: BoxGrid<T>,
    pub offsets: Vec<Vec<T>>,
    pub pairs: Vec<GluingPair<T>>,
}

pub fn bitmap(bits: impl IntoIterator<Item = bool>) -> String {
    bits.into_iter().map(|b| if b { '1' } else { '0' }).collect()
}

fn default_offsets<T: Real>(n: usize, charts: usize, rho: T) -> Vec<Vec<T>> {
    (0..charts)
        .map(|i| {
            let mut o = vec![T::zero(); n];
            o[0] = rho * lit(4.0) * from_usize(i);
            o
        })
        .collect()
}

impl<T: Real> GluingData<T> {
    pub fn pair(&self, i: usize, j: usize) -> Option<&GluingPair<T>> {
        self.pairs.iter().find(|p| p.i == i && p.j == j)
    }

    pub fn pair_mut(&mut self, i: usize, j: usize) -> Option<&mut GluingPair<T>> {
        self.pairs.iter_mut().find(|p| p.i == i && p.j == j)
    }

    /// `ψ_ji(ξ)` by interpolation on the box grid of chart `i`.
    pub fn apply(&self, i: usize, j: usize, xi: &[T]) -> Option<Vec<T>> {
        self.pair(i, j).and_then(|p| self.grid.interpolate(&p.map, self.dimension, xi))
    }

    /// Gluing data of charts at Euclidean positions `shifts` with translation maps.
    pub fn translations(rho: T, shifts: &[Vec<T>], resolution: usize) -> Self {
        let n = shifts[0].len();
        let grid = BoxGrid::new(n, rho * lit(2.0), resolution);
        let mut pairs = Vec::new();
        for (i, si) in shifts.iter().enumerate() {
            for (j, sj) in shifts.iter().enumerate() {
                let d: Vec<T> = si.iter().zip(sj).map(|(a, b)| *a - *b).collect();
                if norm(&d) >= rho * lit(2.0) {
                    continue;
                }
                let mut map = Vec::with_capacity(grid.len() * n);
                let mut bits = Vec::with_capacity(grid.len());
                for k in 0..grid.len() {
                    let x = grid.node(k);
                    let y: Vec<T> = x.iter().zip(&d).map(|(a, b)| *a + *b).collect();
                    bits.push(norm(&x) < rho && norm(&y) < rho);
                    map.extend(y);
                }
                pairs.push(GluingPair { i, j, map, overlap: bitmap(bits) });
            }
        }
        GluingData {
            dimension: n,
            charts: shifts.len(),
            rho,
            grid,
            offsets: default_offsets(n, shifts.len(), rho),
            pairs,
        }
    }

    /// Gluing data from estimated transitions keyed `(i, j) ↦ ψ_ij`.
    pub fn from_transitions(charts: usize, rho: T, transitions: &BTreeMap<(usize, usize), TransitionMapEstimate<T>>) -> Result<Self> {
        let first = transitions.values().next().ok_or_else(|| Error::Construction("no transition maps".into()))?;
        let grid = first.grid.clone();
        let n = grid.dimension;
        let pairs = transitions
            .values()
            .map(|e| GluingPair {
                i: e.j,
                j: e.i,
                map: e.samples.clone(),
                overlap: bitmap(e.domain.iter().copied()),
            })
            .collect();
        Ok(GluingData {
            dimension: n,
            charts,
            rho,
            grid,
            offsets: default_offsets(n, charts, rho),
            pairs,
        })
    }

    pub fn to_f64(&self) -> GluingData<f64> {
        GluingData {
            dimension: self.dimension,
            charts: self.charts,
            rho: to_f64(self.rho),
            grid: BoxGrid::new(self.dimension, to_f64(self.grid.half_width), self.grid.resolution),
            offsets: self.offsets.iter().map(|o| o.iter().map(|v| to_f64(*v)).collect()).collect(),
            pairs: self
                .pairs
                .iter()
                .map(|p| GluingPair {
                    i: p.i,
                    j: p.j,
                    map: p.map.iter().map(|v| to_f64(*v)).collect(),
                    overlap: p.overlap.clone(),
                })
                .collect(),
        }
    }
}

/// Worst violation of one gluing condition; `residual` is 0 for exact data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionCheck {
    pub condition: String,
    pub passed: bool,
    pub residual: f64,
    /// Chart indices and box-node coordinates of the worst offender.
    pub location: Option<(Vec<usize>, Vec<f64>)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GluingReport {
    pub passed: bool,
    pub checks: Vec<ConditionCheck>,
}

impl GluingReport {
    pub fn violated(&self) -> Vec<&str> {
        self.checks.iter().filter(|c| !c.passed).map(|c| c.condition.as_str()).collect()
    }

    pub fn residual(&self, condition: &str) -> Option<f64> {
        self.checks.iter().find(|c| c.condition == condition).map(|c| c.residual)
    }

    pub fn max_residual(&self) -> f64 {
        self.checks.iter().map(|c| c.residual).fold(0.0, f64::max)
    }

    pub fn summary(&self) -> String {
        if self.passed {
            return "all gluing conditions hold".into();
        }
        self.checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| format!("{} (residual {:.3e} at {:?})", c.condition, c.residual, c.location))
            .collect::<Vec<_>>()
            .join("; ")
    }
}

struct Worst<T> {
    value: T,
    location: Option<(Vec<usize>, Vec<f64>)>,
}

impl<T: Real> Worst<T> {
    fn new() -> Self {
        Worst { value: T::zero(), location: None }
    }

    fn offer(&mut self, v: T, charts: &[usize], at: &[T]) {
        if v > self.value {
            self.value = v;
            self.location = Some((charts.to_vec(), at.iter().map(|x| to_f64(*x)).collect()));
        }
    }

    fn check(self, name: &str, tol: T) -> ConditionCheck {
        ConditionCheck {
            condition: name.into(),
            passed: self.value <= tol,
            residual: to_f64(self.value),
            location: self.location,
        }
    }
}

fn max_diff<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(x, y)| (*x - *y).abs()).fold(T::zero(), T::max)
}

/// Checks every gluing condition on the box grid. Never fails; violations are reported.
pub fn validate_gluing_data<T: Real>(gd: &GluingData<T>, tol: T) -> GluingReport {
    let n = gd.dimension;
    let grid = &gd.grid;
    let rho = gd.rho;
    let h = grid.spacing();
    let nodes: Vec<Vec<T>> = (0..grid.len()).map(|k| grid.node(k)).collect();
    let inside: Vec<bool> = nodes.iter().map(|x| norm(x) < rho).collect();
    let mut checks = Vec::new();

    let mut disjoint = Worst::new();
    for i in 0..gd.offsets.len() {
        for j in i + 1..gd.offsets.len() {
            let d: Vec<T> = gd.offsets[i].iter().zip(&gd.offsets[j]).map(|(a, b)| *a - *b).collect();
            disjoint.offer(rho * lit(2.0) - norm(&d), &[i, j], &gd.offsets[j]);
        }
    }
    checks.push(disjoint.check(DISJOINT_DOMAINS, T::zero()));

    let mut structure = Worst::new();
    let mut defects = 0usize;
    let mut last = None;
    if gd.offsets.len() != gd.charts {
        defects += 1;
    }
    for i in 0..gd.charts {
        match gd.pair(i, i) {
            Some(p) if (0..grid.len()).all(|k| p.in_overlap(k) == inside[k]) => {}
            _ => {
                defects += 1;
                last = Some(vec![i, i]);
            }
        }
    }
    for p in &gd.pairs {
        let sizes_ok = p.map.len() == grid.len() * n && p.overlap.len() == grid.len() && p.i < gd.charts && p.j < gd.charts;
        let nonempty = p.overlap.contains('1');
        let mirrored = gd.pair(p.j, p.i).map(|q| q.overlap.contains('1'));
        let contained = (0..grid.len()).all(|k| !p.in_overlap(k) || inside[k]);
        if !sizes_ok || mirrored != Some(nonempty) || !contained {
            defects += 1;
            last = Some(vec![p.i, p.j]);
        }
    }
    if let Some(c) = last {
        structure.location = Some((c, Vec::new()));
    }
    structure.value = from_usize::<T>(defects);
    checks.push(structure.check(OVERLAP_STRUCTURE, T::zero()));

    let valid = |p: &GluingPair<T>| p.map.len() == grid.len() * n && p.overlap.len() == grid.len();

    let mut identity = Worst::new();
    for i in 0..gd.charts {
        if let Some(p) = gd.pair(i, i).filter(|p| valid(p)) {
            for k in (0..grid.len()).filter(|&k| inside[k]) {
                identity.offer(max_diff(&p.map[k * n..(k + 1) * n], &nodes[k]), &[i], &nodes[k]);
            }
        }
    }
    checks.push(identity.check(IDENTITY, tol));

    let mut diffeo = Worst::new();
    let mut boundary = Worst::new();
    let det_floor = lit::<T>(1e-3);
    for p in gd.pairs.iter().filter(|p| valid(p) && p.i != p.j) {
        let jac = box_jacobians(grid, &p.map);
        let mut lipschitz = T::zero();
        for k in (0..grid.len()).filter(|&k| p.in_overlap(k)) {
            let d = &jac[k * n * n..(k + 1) * n * n];
            lipschitz = lipschitz.max(d.iter().map(|v| *v * *v).sum::<T>().sqrt());
        }
        let grid_tol = h * lipschitz * lit(1.01) + tol;
        for k in (0..grid.len()).filter(|&k| p.in_overlap(k)) {
            let det = linalg::determinant(&jac[k * n * n..(k + 1) * n * n], n);
            let img = norm(&p.map[k * n..(k + 1) * n]);
            diffeo.offer((det_floor - det).max(img - rho - grid_tol), &[p.i, p.j], &nodes[k]);
            let on_edge = grid.neighbors(k).into_iter().any(|m| inside[m] && !p.in_overlap(m));
            if on_edge {
                boundary.offer(rho - img - grid_tol, &[p.i, p.j], &nodes[k]);
            }
        }
    }
    checks.push(diffeo.check(DIFFEOMORPHISM, T::zero()));

    let mut inverse = Worst::new();
    for p in gd.pairs.iter().filter(|p| valid(p) && p.i != p.j) {
        let Some(q) = gd.pair(p.j, p.i).filter(|q| valid(q)) else { continue };
        for k in (0..grid.len()).filter(|&k| p.in_overlap(k)) {
            let img = &p.map[k * n..(k + 1) * n];
            if let Some(back) = grid.interpolate(&q.map, n, img) {
                inverse.offer(max_diff(&back, &nodes[k]), &[p.i, p.j], &nodes[k]);
            }
        }
    }
    checks.push(inverse.check(INVERSE, tol));

    let mut cocycle = Worst::new();
    for p in gd.pairs.iter().filter(|p| valid(p) && p.i != p.j) {
        let (i, j) = (p.i, p.j);
        for l in 0..gd.charts {
            if l == i || l == j {
                continue;
            }
            let (Some(il), Some(jl)) = (gd.pair(i, l).filter(|q| valid(q)), gd.pair(j, l).filter(|q| valid(q))) else {
                continue;
            };
            for k in (0..grid.len()).filter(|&k| p.in_overlap(k) && il.in_overlap(k)) {
                let eta = &p.map[k * n..(k + 1) * n];
                if norm(eta) >= rho {
                    continue;
                }
                if let Some(via) = grid.interpolate(&jl.map, n, eta) {
                    cocycle.offer(max_diff(&via, &il.map[k * n..(k + 1) * n]), &[i, j, l], &nodes[k]);
                }
            }
        }
    }
    checks.push(cocycle.check(COCYCLE, tol));
    checks.push(boundary.check(BOUNDARY, T::zero()));

    GluingReport {
        passed: checks.iter().all(|c| c.passed),
        checks,
    }
}

/// `φ(η) = η + δ b((η - c)/r) e_0` with `b = (1 - t²)^3`, supported in `B(c, r)`.
fn local_shift<T: Real>(eta: &[T], c: &[T], r: T, delta: T) -> Vec<T> {
    let t2 = eta.iter().zip(c).map(|(a, b)| (*a - *b) * (*a - *b)).sum::<T>() / (r * r);
    let mut out = eta.to_vec();
    if t2 < T::one() {
        out[0] += delta * (T::one() - t2).powi(3);
    }
    out
}

/// Inverse of [`local_shift`] by fixed-point iteration.
fn local_shift_inverse<T: Real>(eta: &[T], c: &[T], r: T, delta: T) -> Vec<T> {
    let mut x = eta.to_vec();
    for _ in 0..200 {
        let fx = local_shift(&x, c, r, delta);
        let step = eta[0] - fx[0];
        x[0] += step;
        if step.abs() < lit(1e-15) {
            break;
        }
    }
    x
}

/// The five constructed violations, each with the condition it breaks.
pub fn constructed_violations<T: Real>(rho: T, resolution: usize) -> Vec<(&'static str, GluingData<T>)> {
    let two = |a: f64, b: f64| vec![lit::<T>(a), lit::<T>(b)];
    let s = to_f64(rho);
    let pair_shifts = vec![two(0.0, 0.0), two(0.8 * s, 0.0)];
    let tri_shifts = vec![two(0.0, 0.0), two(0.8 * s, 0.0), two(0.4 * s, 0.4 * s * 3f64.sqrt())];
    let mut out = Vec::new();

    let mut overlapping = GluingData::translations(rho, &pair_shifts, resolution);
    overlapping.offsets[1] = overlapping.offsets[0].iter().map(|v| *v + rho).collect();
    out.push((DISJOINT_DOMAINS, overlapping));

    let mut asymmetric = GluingData::translations(rho, &pair_shifts, resolution);
    let p = asymmetric.pair_mut(1, 0).expect("pair present");
    p.overlap = bitmap(std::iter::repeat(false).take(p.overlap.len()));
    out.push((OVERLAP_STRUCTURE, asymmetric));

    let mut not_inverse = GluingData::translations(rho, &pair_shifts, resolution);
    let (c, r, delta) = (two(-0.4 * s, 0.0), rho * lit(0.4), rho * lit(0.06));
    let p = not_inverse.pair_mut(0, 1).expect("pair present");
    for k in 0..p.overlap.len() {
        let v = local_shift(&p.map[2 * k..2 * k + 2], &c, r, delta);
        p.map[2 * k..2 * k + 2].copy_from_slice(&v);
    }
    out.push((INVERSE, not_inverse));

    // compose ψ_20 with a compactly supported shift inside the triple overlap
    let mut broken = GluingData::translations(rho, &tri_shifts, resolution);
    let c = two(0.0, -0.4 * s / 3f64.sqrt());
    let p = broken.pair_mut(0, 2).expect("pair present");
    for k in 0..p.overlap.len() {
        let v = local_shift(&p.map[2 * k..2 * k + 2], &c, r, delta);
        p.map[2 * k..2 * k + 2].copy_from_slice(&v);
    }
    let grid = broken.grid.clone();
    let shift: Vec<T> = tri_shifts[2].iter().zip(&tri_shifts[0]).map(|(a, b)| *a - *b).collect();
    let p = broken.pair_mut(2, 0).expect("pair present");
    for k in 0..p.overlap.len() {
        let pre = local_shift_inverse(&grid.node(k), &c, r, delta);
        let v: Vec<T> = pre.iter().zip(&shift).map(|(a, b)| *a + *b).collect();
        p.map[2 * k..2 * k + 2].copy_from_slice(&v);
    }
    out.push((COCYCLE, broken));

    // two charts glued by the identity along a half ball
    let mut half = GluingData::translations(rho, &[two(0.0, 0.0), two(0.0, 0.0)], resolution);
    half.offsets = default_offsets(2, 2, rho);
    let grid = half.grid.clone();
    for p in half.pairs.iter_mut().filter(|p| p.i != p.j) {
        p.overlap = bitmap((0..grid.len()).map(|k| {
            let x = grid.node(k);
            norm(&x) < rho && x[0] > T::zero()
        }));
    }
    out.push((BOUNDARY, half));
    out
}

/// `M_∞` as a chart graph with limit metric and limit partition.
#[derive(Clone, Debug)]
pub struct GluedManifold<T: Real> {
    pub gluing: GluingData<T>,
    pub metrics: Vec<LimitMetric<T>>,
    pub eta: Vec<ChartFunction<T>>,
    pub transitions: BTreeMap<(usize, usize), TransitionMapEstimate<T>>,
    pub grid: Arc<QuadratureGrid<T>>,
    pub validation: GluingReport,
    /// Tolerance the gluing data was validated with.
    pub tolerance: T,
    /// Per chart and quadrature node: every center whose ball contains the point is indexed.
    pub covered: Vec<Vec<bool>>,
    pub partition_defect: T,
    pub metric_defect: T,
    pub provenance: String,
}

/// A point of `M_∞`: chart index and coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct ChartPoint<T> {
    pub chart: usize,
    pub coords: Vec<T>,
}

impl<T: Real> GluedManifold<T> {
    pub fn charts(&self) -> usize {
        self.gluing.charts
    }

    /// Coordinates of `p` in chart `target`, when `p` lies in `Ω_ρ` there.
    pub fn identify(&self, p: &ChartPoint<T>, target: usize) -> Result<Option<Vec<T>>> {
        if p.chart == target {
            return Ok(Some(p.coords.clone()));
        }
        let Some(psi) = self.transitions.get(&(target, p.chart)) else { return Ok(None) };
        let c = psi.eval(&p.coords)?;
        Ok((norm(&c) < self.gluing.rho).then_some(c))
    }

    /// Shortest path through chart origins, edges weighted by `|ψ_ij(0)|`.
    pub fn chart_distance(&self, from: usize, to: usize) -> Result<T> {
        let n = self.gluing.dimension;
        let mut adj: Vec<Vec<(usize, f64)>> = vec![Vec::new(); self.charts()];
        for (&(i, j), psi) in &self.transitions {
            if i != j {
                adj[i].push((j, to_f64(norm(&psi.eval(&vec![T::zero(); n])?))));
            }
        }
        #[derive(PartialEq)]
        struct Item(f64, usize);
        impl Eq for Item {}
        impl PartialOrd for Item {
            fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
                Some(self.cmp(o))
            }
        }
        impl Ord for Item {
            fn cmp(&self, o: &Self) -> Ordering {
                o.0.total_cmp(&self.0).then(o.1.cmp(&self.1))
            }
        }
        let mut dist = vec![f64::INFINITY; self.charts()];
        let mut heap = BinaryHeap::new();
        dist[from] = 0.0;
        heap.push(Item(0.0, from));
        while let Some(Item(d, u)) = heap.pop() {
            if d > dist[u] {
                continue;
            }
            for &(v, w) in &adj[u] {
                if d + w < dist[v] {
                    dist[v] = d + w;
                    heap.push(Item(d + w, v));
                }
            }
        }
        if dist[to].is_finite() {
            Ok(lit(dist[to]))
        } else {
            Err(Error::Domain(format!("charts {from} and {to} are not connected")))
        }
    }

    pub fn flatness_defect(&self) -> T {
        self.metrics.iter().map(|m| m.field.flatness_defect()).fold(T::zero(), T::max)
    }

    pub fn document(&self) -> GluedDocument {
        GluedDocument {
            provenance: self.provenance.clone(),
            quadrature_resolution: self.grid.resolution,
            gluing: self.gluing.to_f64(),
            metric_samples: self.metrics.iter().map(|m| m.field.values.iter().map(|v| to_f64(*v)).collect()).collect(),
            eta_samples: self.eta.iter().map(|e| e.values.iter().map(|v| to_f64(*v)).collect()).collect(),
            validation: self.validation.clone(),
            tolerance: to_f64(self.tolerance),
            partition_defect: to_f64(self.partition_defect),
            metric_defect: to_f64(self.metric_defect),
        }
    }
}

/// JSON form of a glued manifold.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GluedDocument {
    pub provenance: String,
    pub quadrature_resolution: usize,
    pub gluing: GluingData<f64>,
    pub metric_samples: Vec<Vec<f64>>,
    pub eta_samples: Vec<Vec<f64>>,
    pub validation: GluingReport,
    pub tolerance: f64,
    pub partition_defect: f64,
    pub metric_defect: f64,
}

/// `max |Σ_{i ∈ J_j} η_i ∘ ψ_ij - 1|` over sampled covered nodes.
pub fn partition_defect<T: Real>(
    grid: &QuadratureGrid<T>,
    js: &[Vec<usize>],
    covered: &[Vec<bool>],
    eta: &[ChartFunction<T>],
    transitions: &BTreeMap<(usize, usize), TransitionMapEstimate<T>>,
    stride: usize,
) -> Result<T> {
    let mut worst = T::zero();
    for (j, members) in js.iter().enumerate() {
        let parts: Vec<Result<T>> = (0..grid.len())
            .step_by(stride.max(1))
            .filter(|&k| covered[j][k])
            .collect::<Vec<_>>()
            .par_iter()
            .map(|&k| -> Result<T> {
                let xi = grid.node(k);
                let mut s = T::zero();
                for &i in members {
                    let psi = transitions
                        .get(&(i, j))
                        .ok_or_else(|| Error::Domain(format!("transition ({i}, {j}) missing")))?;
                    let at = psi.eval(xi)?;
                    s += eta[i].eval(&at).ok_or_else(|| Error::Domain("limit partition without sampler".into()))?;
                }
                Ok((s - T::one()).abs())
            })
            .collect();
        for p in parts {
            worst = worst.max(p?);
        }
    }
    Ok(worst)
}

/// Quadrature nodes of each chart whose point has all `ρ`-close centers indexed, at the last retained `k`.
pub fn covered_nodes<T: Real>(atlas: &Atlas<T>, ts: &TrailingSystem<T>) -> Result<Vec<Vec<bool>>> {
    let k = *ts.retained.last().ok_or_else(|| Error::Domain("no retained indices".into()))?;
    let ord = &ts.orderings[k];
    (0..ts.charts())
        .map(|j| {
            let chart = atlas.chart(ord[j]);
            (0..atlas.grid.len())
                .map(|q| {
                    let x = chart.forward(atlas.grid.node(q))?;
                    Ok(atlas.net.within(&atlas.model, &x, atlas.rho).iter().all(|(c, _)| ord.contains(c)))
                })
                .collect()
        })
        .collect()
}

/// Validates the estimated gluing data and assembles `M_∞`.
pub fn assemble_infinity_manifold<T: Real>(
    atlas: &Atlas<T>,
    ts: &TrailingSystem<T>,
    transitions: BTreeMap<(usize, usize), TransitionMapEstimate<T>>,
    metrics: Vec<LimitMetric<T>>,
    eta: Vec<ChartFunction<T>>,
    tol: T,
) -> Result<GluedManifold<T>> {
    if let Some(bad) = transitions.values().find(|e| !e.converged) {
        return Err(Error::Construction(format!(
            "transition ({}, {}) did not converge (oscillation {})",
            bad.i, bad.j, bad.residual
        )));
    }
    let gluing = GluingData::from_transitions(ts.charts(), atlas.rho, &transitions)?;
    // multilinear interpolation of curved maps is exact only to second order
    let c2 = transitions.values().map(|e| e.derivative_bounds[1]).fold(T::zero(), T::max);
    let h = gluing.grid.spacing();
    let tolerance = tol + h * h * c2;
    let validation = validate_gluing_data(&gluing, tolerance);
    if !validation.passed {
        return Err(Error::Construction(format!("gluing data rejected: {}", validation.summary())));
    }
    let covered = covered_nodes(atlas, ts)?;
    let stride = (atlas.grid.len() / 400).max(1);
    let partition_defect = partition_defect(&atlas.grid, &ts.j_sets, &covered, &eta, &transitions, stride)?;
    let metric_defect = metric_compatibility(atlas, &transitions, &metrics, stride)?;
    let cores: Vec<usize> = ts.tail().iter().map(|&k| ts.cores[k]).collect();
    Ok(GluedManifold {
        gluing,
        metrics,
        eta,
        transitions,
        grid: atlas.grid.clone(),
        validation,
        tolerance,
        covered,
        partition_defect,
        metric_defect,
        provenance: format!("trailing system with I_max {} and tail cores {:?}", ts.i_max, cores),
    })
}

/// A function on `M_∞` given by compatible chart samples `w_i`.
#[derive(Clone, Debug)]
pub struct GlobalProfile<T: Real> {
    pub manifold: Arc<GluedManifold<T>>,
    pub locals: Vec<ChartFunction<T>>,
    /// Worst `|w_i ∘ ψ_ij - w_j|` relative to `sup |w|`.
    pub compatibility: T,
}

impl<T: Real> GlobalProfile<T> {
    pub fn eval(&self, p: &ChartPoint<T>) -> Option<T> {
        self.locals.get(p.chart).and_then(|w| w.eval(&p.coords))
    }

    pub fn is_zero(&self) -> bool {
        self.locals.iter().all(|w| w.values.iter().all(|v| *v == T::zero()))
    }

    pub fn sup_abs(&self) -> T {
        self.locals.iter().map(|w| w.sup_abs()).fold(T::zero(), T::max)
    }
}

/// Checks overlap compatibility of the locals and builds the global profile.
pub fn assemble_global_profile<T: Real>(gm: Arc<GluedManifold<T>>, locals: Vec<ChartFunction<T>>, tol: T) -> Result<GlobalProfile<T>> {
    if locals.len() != gm.charts() {
        return Err(Error::Domain(format!("{} locals for {} charts", locals.len(), gm.charts())));
    }
    if locals.iter().any(|w| w.values.len() != gm.grid.len()) {
        return Err(Error::Domain("local profile not sampled on the manifold grid".into()));
    }
    let scale = locals.iter().map(|w| w.sup_abs()).fold(T::zero(), T::max);
    let mut worst = T::zero();
    let mut at = None;
    if scale > T::zero() {
        for (&(i, j), psi) in &gm.transitions {
            if i == j {
                continue;
            }
            for k in 0..gm.grid.len() {
                let xi = gm.grid.node(k);
                let img = psi.eval(xi)?;
                if norm(&img) >= gm.gluing.rho {
                    continue;
                }
                let wi = locals[i].eval(&img).ok_or_else(|| Error::Domain(format!("local profile {i} has no sampler")))?;
                let d = (wi - locals[j].values[k]).abs() / scale;
                if d > worst {
                    worst = d;
                    at = Some((i, j, xi.to_vec()));
                }
            }
        }
    }
    if worst > tol {
        let (i, j, xi) = at.expect("offender recorded");
        return Err(Error::Construction(format!(
            "local profiles {i} and {j} disagree by {worst} (relative) at {xi:?} in chart {j}"
        )));
    }
    Ok(GlobalProfile {
        manifold: gm,
        locals,
        compatibility: worst,
    })
}

/// `(‖w‖_{H^{1,2}(M_∞)}, ‖w‖_{L^p(M_∞)})` by `η`-weighted chart sums with `g̃`.
pub fn infinity_norms<T: Real>(gp: &GlobalProfile<T>, p: T) -> (T, T) {
    let gm = &gp.manifold;
    let grid = &gm.grid;
    let n = grid.dimension;
    let mut h12 = T::zero();
    let mut lp = T::zero();
    for (i, w) in gp.locals.iter().enumerate() {
        let field = &gm.metrics[i].field;
        for k in 0..grid.len() {
            let eta = gm.eta[i].values[k];
            if eta == T::zero() {
                continue;
            }
            let vol = grid.weights[k] * eta * field.sqrt_det[k];
            let mut e = w.values[k] * w.values[k];
            if !w.gradients.is_empty() {
                let g = w.gradient(k);
                let inv = field.inverse_at(k);
                for a in 0..n {
                    for b in 0..n {
                        e += inv[a * n + b] * g[a] * g[b];
                    }
                }
            }
            h12 += vol * e;
            lp += vol * w.values[k].abs().powf(p);
        }
    }
    (h12.sqrt(), lp.powf(T::one() / p))
}

/// Equivalent norm on `M_∞`: `(Σ_i ‖η_i w_i‖²_{H^{1,2}(Ω_ρ, g̃_i)})^{1/2}`, gradients of `η_i` by central differences.
pub fn infinity_equivalent_norm<T: Real>(gp: &GlobalProfile<T>) -> Result<T> {
    let gm = &gp.manifold;
    let grid = &gm.grid;
    let n = grid.dimension;
    let h = T::fd_step();
    let mut total = T::zero();
    for (i, w) in gp.locals.iter().enumerate() {
        let field = &gm.metrics[i].field;
        let eta = &gm.eta[i];
        let sampler = eta
            .sampler()
            .ok_or_else(|| Error::Domain(format!("partition limit of chart {i} has no sampler")))?;
        for k in 0..grid.len() {
            let wk = w.values[k];
            let gw: Vec<T> = if w.gradients.is_empty() { vec![T::zero(); n] } else { w.gradient(k).to_vec() };
            if wk == T::zero() && gw.iter().all(|g| *g == T::zero()) {
                continue;
            }
            let e = eta.values[k];
            let xi = grid.node(k);
            let mut grad = vec![T::zero(); n];
            for a in 0..n {
                let mut xp = xi.to_vec();
                let mut xm = xi.to_vec();
                xp[a] += h;
                xm[a] -= h;
                let de = (sampler(&xp) - sampler(&xm)) / (h + h);
                grad[a] = e * gw[a] + wk * de;
            }
            let inv = field.inverse_at(k);
            let mut energy = e * e * wk * wk;
            for a in 0..n {
                for b in 0..n {
                    energy += inv[a * n + b] * grad[a] * grad[b];
                }
            }
            total += grid.weights[k] * field.sqrt_det[k] * energy;
        }
    }
    Ok(total.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covering::{build_net, Ball};
    use crate::funcspace::{pullback, weak_limit_estimate, ManifoldFunction};
    use crate::geometry::{ManifoldModel, MetricBump};
    use crate::trailing::{build_trailing_system, estimate_limit_metric, estimate_limit_partition, estimate_transition_limits, stabilize_intersections};
    use std::f64::consts::PI;

    fn hex_shifts() -> Vec<Vec<f64>> {
        let mut s = vec![vec![0.0, 0.0]];
        for a in 0..6 {
            let t = PI / 3.0 * a as f64;
            s.push(vec![0.4 * t.cos(), 0.4 * t.sin()]);
        }
        s
    }

    #[test]
    fn lattice_gluing_passes_exactly() {
        let gd = GluingData::translations(0.5, &hex_shifts(), 33);
        let r = validate_gluing_data(&gd, 1e-10);
        assert!(r.passed, "{}", r.summary());
        assert!(r.max_residual() < 1e-10);
        assert_eq!(r.checks.len(), 7);
    }

    #[test]
    fn each_violation_is_named() {
        for (name, gd) in constructed_violations(0.5, 65) {
            let r = validate_gluing_data(&gd, 5e-3);
            assert!(!r.passed, "{name} accepted");
            assert_eq!(r.violated(), vec![name], "{}", r.summary());
        }
    }

    #[test]
    fn gluing_json_round_trip() {
        let gd = GluingData::translations(0.5, &hex_shifts()[..3], 9);
        let s = serde_json::to_string(&gd).unwrap();
        let back: GluingData<f64> = serde_json::from_str(&s).unwrap();
        assert_eq!(gd, back);
    }

    fn bump(c: Vec<f64>, r: f64, a: f64) -> ManifoldFunction<f64> {
        let cc = c.clone();
        let cg = c.clone();
        ManifoldFunction::new("bump", vec![Ball::new(c, r)], move |x: &[f64]| {
            let t = ((x[0] - cc[0]).powi(2) + (x[1] - cc[1]).powi(2)) / (r * r);
            if t < 1.0 {
                a * (1.0 - t).powi(3)
            } else {
                0.0
            }
        })
        .with_gradient(move |x: &[f64]| {
            let d = [x[0] - cg[0], x[1] - cg[1]];
            let t = (d[0] * d[0] + d[1] * d[1]) / (r * r);
            if t < 1.0 {
                let s = -6.0 * a * (1.0 - t).powi(2) / (r * r);
                vec![s * d[0], s * d[1]]
            } else {
                vec![0.0, 0.0]
            }
        })
    }

    struct Built {
        atlas: Atlas<f64>,
        ts: TrailingSystem<f64>,
        gm: Arc<GluedManifold<f64>>,
    }

    fn runaway(model: ManifoldModel<f64>, start: [f64; 2], step: [f64; 2], kmax: usize) -> Built {
        let m = Arc::new(model);
        let pts: Vec<Vec<f64>> = (0..kmax).map(|k| vec![start[0] + step[0] * k as f64, start[1] + step[1] * k as f64]).collect();
        let region: Vec<Ball<f64>> = pts.iter().map(|p| Ball::new(p.clone(), 1.6)).collect();
        let net = build_net(&m, &region, 0.5, 0.4, 0).unwrap();
        let atlas = Atlas::new(m.clone(), Arc::new(net), 32, 0).unwrap();
        let core: Vec<Vec<f64>> = pts.iter().map(|p| atlas.net.centers[atlas.net.nearest(&m, p).unwrap().0].clone()).collect();
        let ts = build_trailing_system(&m, &atlas.net, &core, 12).unwrap();
        let ts = stabilize_intersections(&m, &atlas.net, &ts, 0.5).unwrap();
        let psi = estimate_transition_limits(&atlas, &ts, 1e-6, false).unwrap();
        let metrics: Vec<_> = (0..=12).map(|i| estimate_limit_metric(&atlas, &ts, i, 1e-6).unwrap()).collect();
        let eta: Vec<_> = (0..=12).map(|i| estimate_limit_partition(&atlas, &ts, i).unwrap()).collect();
        let gm = Arc::new(assemble_infinity_manifold(&atlas, &ts, psi, metrics, eta, 1e-8).unwrap());
        Built { atlas, ts, gm }
    }

    #[test]
    fn euclidean_runaway_manifold_is_flat_lattice() {
        let b = runaway(ManifoldModel::euclidean(2).unwrap(), [0.0, 0.0], [0.4, 0.0], 16);
        let gm = &b.gm;
        assert!(gm.flatness_defect() < 1e-9);
        assert!(gm.partition_defect < 1e-9, "{}", gm.partition_defect);
        assert!(gm.metric_defect < 1e-6);
        assert!(gm.covered[0].iter().filter(|c| **c).count() > gm.grid.len() / 3);
        let k = *b.ts.retained.last().unwrap();
        for j in 1..gm.charts() {
            let y0 = &b.atlas.net.centers[b.ts.center(k, 0)];
            let yj = &b.atlas.net.centers[b.ts.center(k, j)];
            let d = ((y0[0] - yj[0]).powi(2) + (y0[1] - yj[1]).powi(2)).sqrt();
            let g = gm.chart_distance(0, j).unwrap();
            assert!((g - d).abs() <= 0.01 * d, "{g} vs {d}");
        }
        let doc = gm.document();
        let back: GluedDocument = serde_json::from_str(&serde_json::to_string(&doc).unwrap()).unwrap();
        assert!(validate_gluing_data(&back.gluing, 1e-8).passed);
    }

    #[test]
    fn perturbed_runaway_limit_is_flat() {
        let model = ManifoldModel::perturbed_euclidean(2, MetricBump::isotropic(vec![0.0, 0.0], 1.5, 0.15)).unwrap();
        let b = runaway(model, [0.0, -1.2], [0.0, -0.7], 12);
        assert!(b.gm.flatness_defect() < 1e-3);
    }

    #[test]
    fn global_profile_norms_and_compatibility() {
        let b = runaway(ManifoldModel::euclidean(2).unwrap(), [0.0, 0.0], [0.4, 0.0], 16);
        let seq: Vec<ManifoldFunction<f64>> = (0..16)
            .map(|k| bump(b.atlas.net.centers[b.ts.cores[k]].clone(), 0.25, 1.0))
            .collect();
        let locals: Vec<ChartFunction<f64>> = (0..b.gm.charts())
            .map(|i| {
                let pulls: Vec<ChartFunction<f64>> = b
                    .ts
                    .retained
                    .iter()
                    .map(|&k| {
                        let g = b.atlas.geometry(b.ts.center(k, i)).unwrap();
                        let f = seq[k].clone();
                        let chart = g.chart.clone();
                        pullback(&b.atlas, &seq[k], &g).with_sampler(Arc::new(move |xi: &[f64]| f.eval(&chart.forward(xi).unwrap())))
                    })
                    .collect();
                weak_limit_estimate(&pulls, 4, 1e-8).unwrap().limit
            })
            .collect();
        let gp = assemble_global_profile(b.gm.clone(), locals.clone(), 1e-8).unwrap();
        assert!(gp.compatibility < 1e-10);
        let (h12, l6) = infinity_norms(&gp, 6.0);
        // ‖b‖² = A²πR²/7 + 1.2πA², ∫|b|^6 = πR²/19
        let h12_exact = (PI * 0.0625 / 7.0 + 1.2 * PI).sqrt();
        let l6_exact = (PI * 0.0625 / 19.0f64).powf(1.0 / 6.0);
        assert!((h12 - h12_exact).abs() < 0.005 * h12_exact, "{h12} vs {h12_exact}");
        assert!((l6 - l6_exact).abs() < 0.005 * l6_exact);

        let mut bad = locals;
        for (k, v) in bad[1].values.iter_mut().enumerate() {
            let x = b.gm.grid.node(k);
            if x[0] < 0.0 {
                *v += 1e-6;
            }
        }
        let err = assemble_global_profile(b.gm.clone(), bad, 1e-7).unwrap_err();
        assert!(matches!(err, Error::Construction(_)));
    }

    #[test]
    fn zero_profile_has_zero_norms() {
        let b = runaway(ManifoldModel::euclidean(2).unwrap(), [0.0, 0.0], [0.4, 0.0], 12);
        let locals = (0..b.gm.charts()).map(|_| ChartFunction::zero(b.gm.grid.clone())).collect();
        let gp = assemble_global_profile(b.gm.clone(), locals, 1e-8).unwrap();
        assert!(gp.is_zero());
        assert_eq!(infinity_norms(&gp, 4.0), (0.0, 0.0));
    }
}
