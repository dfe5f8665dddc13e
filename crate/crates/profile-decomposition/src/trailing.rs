//! Trailing systems, stable intersection patterns, and limits of transition maps,
//! pullback metrics and partition weights along a diverging core sequence.

use std::collections::BTreeMap;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covering::{BoxGrid, DiscreteNet};
use crate::error::{Error, Result};
use crate::funcspace::{tail_range, Atlas, ChartFunction, ValueFn};
use crate::geometry::{ManifoldModel, MetricField, NormalChart};
use crate::linalg;
use crate::scalar::{from_usize, lex_cmp, lit, norm, to_f64, Real};

/// Orderings `i ↦ y_{k;i}` of the net around a core sequence `y_k`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrailingSystem<T> {
    pub i_max: usize,
    /// Net index of `y_k` for every `k` (0-based).
    pub cores: Vec<usize>,
    /// `orderings[k][i]` is the net index of `y_{k;i}`.
    pub orderings: Vec<Vec<usize>>,
    pub distances: Vec<Vec<T>>,
    /// Retained `k` (0-based), increasing.
    pub retained: Vec<usize>,
    /// Stable intersection sets `J_i`; empty before stabilization.
    pub j_sets: Vec<Vec<usize>>,
}

impl<T: Real> TrailingSystem<T> {
    pub fn center(&self, k: usize, i: usize) -> usize {
        self.orderings[k][i]
    }

    pub fn is_stabilized(&self) -> bool {
        !self.j_sets.is_empty()
    }

    /// Last quarter of the retained indices.
    pub fn tail(&self) -> &[usize] {
        &self.retained[tail_range(self.retained.len())]
    }

    pub fn charts(&self) -> usize {
        self.i_max + 1
    }

    /// Index pairs `(i, j)` with `j ∈ J_i`.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (i, js) in self.j_sets.iter().enumerate() {
            for &j in js {
                out.push((i, j));
            }
        }
        out
    }
}

/// Distance ordering of the net around `y`, ties broken lexicographically on ambient
/// coordinates, truncated to `count` entries.
pub fn ordering_around<T: Real>(model: &ManifoldModel<T>, net: &DiscreteNet<T>, y: &[T], count: usize) -> Result<Vec<(usize, T)>> {
    if count > net.len() {
        return Err(Error::Domain(format!("net has {} centers, ordering needs {count}", net.len())));
    }
    let mut r = net.cover_radius * lit(2.0);
    loop {
        let mut found = net.within(model, y, r);
        if found.len() >= count || found.len() == net.len() {
            let tie = lit::<T>(1e-9);
            found.sort_by(|a, b| a.1.partial_cmp(&b.1).expect("finite distance"));
            // lexicographic order inside groups of equal distance
            let mut start = 0;
            while start < found.len() {
                let mut end = start + 1;
                while end < found.len() && found[end].1 - found[start].1 <= tie * (T::one() + found[start].1) {
                    end += 1;
                }
                found[start..end].sort_by(|a, b| lex_cmp(&net.centers[a.0], &net.centers[b.0], T::zero()));
                start = end;
            }
            found.truncate(count);
            return Ok(found);
        }
        r = r * lit(2.0);
    }
}

/// Builds the trailing system of a core sequence given as points of the net.
pub fn build_trailing_system<T: Real>(model: &ManifoldModel<T>, net: &DiscreteNet<T>, core: &[Vec<T>], i_max: usize) -> Result<TrailingSystem<T>> {
    let mut ids = Vec::with_capacity(core.len());
    for (k, y) in core.iter().enumerate() {
        let id = net
            .index_of(model, y, lit(1e-9))
            .ok_or_else(|| Error::Domain(format!("core point {} is not a net center", k + 1)))?;
        ids.push(id);
    }
    build_from_indices(model, net, &ids, i_max)
}

pub fn build_from_indices<T: Real>(model: &ManifoldModel<T>, net: &DiscreteNet<T>, cores: &[usize], i_max: usize) -> Result<TrailingSystem<T>> {
    let mut orderings = Vec::with_capacity(cores.len());
    let mut distances = Vec::with_capacity(cores.len());
    for &c in cores {
        let ord = ordering_around(model, net, &net.centers[c], i_max + 1)?;
        if ord.len() < i_max + 1 {
            return Err(Error::Domain(format!("net too small for I_max = {i_max}")));
        }
        debug_assert_eq!(ord[0].0, c);
        orderings.push(ord.iter().map(|(i, _)| *i).collect());
        distances.push(ord.iter().map(|(_, d)| *d).collect());
    }
    Ok(TrailingSystem {
        i_max,
        cores: cores.to_vec(),
        orderings,
        distances,
        retained: (0..cores.len()).collect(),
        j_sets: Vec::new(),
    })
}

fn pattern<T: Real>(model: &ManifoldModel<T>, net: &DiscreteNet<T>, ts: &TrailingSystem<T>, k: usize, rho: T) -> Vec<Vec<usize>> {
    let ord = &ts.orderings[k];
    (0..=ts.i_max)
        .map(|i| {
            (0..=ts.i_max)
                .filter(|&j| i == j || model.distance(&net.centers[ord[i]], &net.centers[ord[j]]) < rho * lit(2.0))
                .collect()
        })
        .collect()
}

/// Keeps the indices `k` whose ball-intersection pattern equals the pattern at the
/// last index, and records it as `J_i`.
pub fn stabilize_intersections<T: Real>(
    model: &ManifoldModel<T>,
    net: &DiscreteNet<T>,
    ts: &TrailingSystem<T>,
    rho: T,
) -> Result<TrailingSystem<T>> {
    if ts.i_max < 1 {
        return Err(Error::Domain("stabilization needs I_max >= 1".into()));
    }
    let last = *ts.retained.last().ok_or_else(|| Error::Extraction("empty trailing system".into()))?;
    let target = pattern(model, net, ts, last, rho);
    let retained: Vec<usize> = ts
        .retained
        .iter()
        .copied()
        .filter(|&k| pattern(model, net, ts, k, rho) == target)
        .collect();
    if retained.len() < 8 {
        return Err(Error::Extraction(format!(
            "only {} indices share a stable intersection pattern; increase K_max",
            retained.len()
        )));
    }
    let mut out = ts.clone();
    out.retained = retained;
    out.j_sets = target;
    Ok(out)
}

/// Tail limit of `ψ_{ij,k} = e_{y_{k;i}}^{-1} ∘ e_{y_{k;j}}` on `[-2ρ, 2ρ]^N`.
#[derive(Clone, Debug)]
pub struct TransitionMapEstimate<T: Real> {
    pub i: usize,
    pub j: usize,
    pub grid: BoxGrid<T>,
    /// `N` coordinates per box node.
    pub samples: Vec<T>,
    /// `N x N` Jacobian per box node.
    pub jacobians: Vec<T>,
    /// Sup-norm oscillation over the tail.
    pub residual: T,
    /// Sup-norm oscillation over all retained indices, when requested.
    pub full_residual: Option<T>,
    pub converged: bool,
    /// `{ξ ∈ Ω_ρ : |ψ_ij(ξ)| < ρ}` on the box grid.
    pub domain: Vec<bool>,
    pub max_image_norm: T,
    pub derivative_bounds: [T; 2],
    tail_charts: Arc<Vec<(NormalChart<T>, NormalChart<T>)>>,
}

impl<T: Real> TransitionMapEstimate<T> {
    /// Tail-averaged evaluation at an arbitrary point.
    pub fn eval(&self, xi: &[T]) -> Result<Vec<T>> {
        if self.i == self.j {
            return Ok(xi.to_vec());
        }
        let n = xi.len();
        let mut out = vec![T::zero(); n];
        for (ci, cj) in self.tail_charts.iter() {
            let v = ci.inverse(&cj.forward(xi)?)?;
            for a in 0..n {
                out[a] += v[a];
            }
        }
        let m = from_usize::<T>(self.tail_charts.len());
        Ok(out.into_iter().map(|v| v / m).collect())
    }

    /// Central-difference Jacobian of [`Self::eval`].
    pub fn jacobian_at(&self, xi: &[T], h: T) -> Result<Vec<T>> {
        let n = xi.len();
        let mut jac = vec![T::zero(); n * n];
        for c in 0..n {
            let mut p = xi.to_vec();
            let mut q = xi.to_vec();
            p[c] += h;
            q[c] -= h;
            let fp = self.eval(&p)?;
            let fq = self.eval(&q)?;
            for r in 0..n {
                jac[r * n + c] = (fp[r] - fq[r]) / (lit::<T>(2.0) * h);
            }
        }
        Ok(jac)
    }

    pub fn sample(&self, k: usize) -> &[T] {
        let n = self.grid.dimension;
        &self.samples[k * n..(k + 1) * n]
    }
}

fn tail_chart_pairs<T: Real>(atlas: &Atlas<T>, ts: &TrailingSystem<T>, ks: &[usize], i: usize, j: usize) -> Vec<(NormalChart<T>, NormalChart<T>)> {
    ks.iter()
        .map(|&k| (atlas.chart(ts.center(k, i)), atlas.chart(ts.center(k, j))))
        .collect()
}

pub(crate) fn box_jacobians<T: Real>(grid: &BoxGrid<T>, samples: &[T]) -> Vec<T> {
    let n = grid.dimension;
    let h = grid.spacing();
    let mut out = vec![T::zero(); grid.len() * n * n];
    for k in 0..grid.len() {
        let idx = grid.multi_index(k);
        for c in 0..n {
            let (lo, hi) = (idx[c].saturating_sub(1), (idx[c] + 1).min(grid.resolution - 1));
            let mut a = idx.clone();
            let mut b = idx.clone();
            a[c] = lo;
            b[c] = hi;
            let (ka, kb) = (grid.flat_index(&a), grid.flat_index(&b));
            let span = h * from_usize(hi - lo);
            for r in 0..n {
                out[k * n * n + r * n + c] = (samples[kb * n + r] - samples[ka * n + r]) / span;
            }
        }
    }
    out
}

fn second_difference_bound<T: Real>(grid: &BoxGrid<T>, samples: &[T]) -> T {
    let n = grid.dimension;
    let h = grid.spacing();
    let mut worst = T::zero();
    for k in 0..grid.len() {
        let idx = grid.multi_index(k);
        for c in 0..n {
            if idx[c] == 0 || idx[c] + 1 == grid.resolution {
                continue;
            }
            let mut a = idx.clone();
            let mut b = idx.clone();
            a[c] -= 1;
            b[c] += 1;
            let (ka, kb) = (grid.flat_index(&a), grid.flat_index(&b));
            for r in 0..n {
                let d2 = (samples[ka * n + r] - lit::<T>(2.0) * samples[k * n + r] + samples[kb * n + r]) / (h * h);
                worst = worst.max(d2.abs());
            }
        }
    }
    worst
}

/// Samples `ψ_{ij,k}` for one index `k` on the box grid.
fn sample_transition<T: Real>(atlas: &Atlas<T>, ci: &NormalChart<T>, cj: &NormalChart<T>) -> Result<Vec<T>> {
    let grid = &atlas.box_grid;
    let n = grid.dimension;
    let mut out = Vec::with_capacity(grid.len() * n);
    for k in 0..grid.len() {
        out.extend(ci.inverse(&cj.forward(&grid.node(k))?)?);
    }
    Ok(out)
}

fn oscillation<T: Real>(histories: &[Vec<T>]) -> T {
    let len = histories[0].len();
    let mut worst = T::zero();
    for c in 0..len {
        let mut lo = T::infinity();
        let mut hi = T::neg_infinity();
        for h in histories {
            lo = lo.min(h[c]);
            hi = hi.max(h[c]);
        }
        worst = worst.max(hi - lo);
    }
    worst
}

/// Estimates `ψ_ij` for every `(i, j)` with `j ∈ J_i`.
pub fn estimate_transition_limits<T: Real>(
    atlas: &Atlas<T>,
    ts: &TrailingSystem<T>,
    tol: T,
    full_history: bool,
) -> Result<BTreeMap<(usize, usize), TransitionMapEstimate<T>>> {
    if !ts.is_stabilized() {
        return Err(Error::Domain("trailing system is not stabilized".into()));
    }
    let grid = atlas.box_grid.clone();
    let n = grid.dimension;
    let rho = atlas.rho;
    let range = atlas.model.injectivity_floor * lit(0.75);
    let tail = ts.tail().to_vec();
    let results: Vec<Result<TransitionMapEstimate<T>>> = ts
        .pairs()
        .par_iter()
        .map(|&(i, j)| -> Result<TransitionMapEstimate<T>> {
            let charts = tail_chart_pairs(atlas, ts, &tail, i, j);
            let (samples, residual, full_residual) = if i == j {
                let ident: Vec<T> = (0..grid.len()).flat_map(|k| grid.node(k)).collect();
                (ident, T::zero(), full_history.then(T::zero))
            } else {
                let hist: Vec<Vec<T>> = charts.iter().map(|(ci, cj)| sample_transition(atlas, ci, cj)).collect::<Result<_>>()?;
                let residual = oscillation(&hist);
                let full = if full_history {
                    let mut all = hist.clone();
                    for &k in &ts.retained {
                        if tail.contains(&k) {
                            continue;
                        }
                        all.push(sample_transition(atlas, &atlas.chart(ts.center(k, i)), &atlas.chart(ts.center(k, j)))?);
                    }
                    Some(oscillation(&all))
                } else {
                    None
                };
                let m = from_usize::<T>(hist.len());
                let mut avg = vec![T::zero(); grid.len() * n];
                for h in &hist {
                    for (a, v) in avg.iter_mut().zip(h) {
                        *a += *v;
                    }
                }
                avg.iter_mut().for_each(|a| *a /= m);
                (avg, residual, full)
            };
            let jacobians = box_jacobians(&grid, &samples);
            let domain = (0..grid.len())
                .map(|k| norm(&grid.node(k)) < rho && norm(&samples[k * n..(k + 1) * n]) < rho)
                .collect();
            let max_image_norm = (0..grid.len()).map(|k| norm(&samples[k * n..(k + 1) * n])).fold(T::zero(), T::max);
            let c1 = jacobians.iter().fold(T::zero(), |m, v| m.max(v.abs()));
            let c2 = second_difference_bound(&grid, &samples);
            Ok(TransitionMapEstimate {
                i,
                j,
                grid: grid.clone(),
                samples,
                jacobians,
                residual,
                full_residual,
                converged: residual <= tol && max_image_norm < range,
                domain,
                max_image_norm,
                derivative_bounds: [c1, c2],
                tail_charts: Arc::new(charts),
            })
        })
        .collect();
    let mut out = BTreeMap::new();
    for r in results {
        let e = r?;
        out.insert((e.i, e.j), e);
    }
    Ok(out)
}

/// Tail average of the pullback metrics at `y_{k;i}`.
#[derive(Clone, Debug)]
pub struct LimitMetric<T: Real> {
    pub i: usize,
    pub field: MetricField<T>,
    pub residual: T,
    pub converged: bool,
    tail_charts: Vec<NormalChart<T>>,
}

impl<T: Real> LimitMetric<T> {
    /// Off-grid evaluation through the tail charts.
    pub fn metric_at(&self, xi: &[T]) -> Result<Vec<T>> {
        let mut acc: Option<Vec<T>> = None;
        for c in &self.tail_charts {
            let g = c.metric_at(xi)?;
            acc = Some(match acc {
                None => g,
                Some(a) => a.into_iter().zip(g).map(|(x, y)| x + y).collect(),
            });
        }
        let m = from_usize::<T>(self.tail_charts.len());
        Ok(acc.expect("non-empty tail").into_iter().map(|v| v / m).collect())
    }

    /// Deviation of `g̃(0)` from the identity and largest first derivative at 0.
    pub fn origin_defects(&self, h: T) -> Result<(T, T)> {
        let n = self.field.dimension;
        let zero = vec![T::zero(); n];
        let g0 = self.metric_at(&zero)?;
        let mut d1 = T::zero();
        for c in 0..n {
            let mut p = zero.clone();
            let mut q = zero.clone();
            p[c] = h;
            q[c] = -h;
            let gp = self.metric_at(&p)?;
            let gq = self.metric_at(&q)?;
            for (a, b) in gp.iter().zip(&gq) {
                d1 = d1.max(((*a - *b) / (lit::<T>(2.0) * h)).abs());
            }
        }
        Ok((linalg::identity_defect(&g0, n), d1))
    }
}

pub fn estimate_limit_metric<T: Real>(atlas: &Atlas<T>, ts: &TrailingSystem<T>, i: usize, tol: T) -> Result<LimitMetric<T>> {
    let tail = ts.tail();
    let mut hist = Vec::with_capacity(tail.len());
    for &k in tail {
        hist.push(atlas.geometry(ts.center(k, i))?.metric.values.clone());
    }
    let residual = oscillation(&hist);
    let m = from_usize::<T>(hist.len());
    let mut avg = vec![T::zero(); hist[0].len()];
    for h in &hist {
        for (a, v) in avg.iter_mut().zip(h) {
            *a += *v;
        }
    }
    avg.iter_mut().for_each(|a| *a /= m);
    let field = MetricField::from_values(atlas.dimension(), avg)?;
    Ok(LimitMetric {
        i,
        field,
        residual,
        converged: residual < tol,
        tail_charts: tail.iter().map(|&k| atlas.chart(ts.center(k, i))).collect(),
    })
}

/// Tail average `η_i` of `χ_{y_{k;i}} ∘ e_{y_{k;i}}`, with an exact sampler.
pub fn estimate_limit_partition<T: Real>(atlas: &Atlas<T>, ts: &TrailingSystem<T>, i: usize) -> Result<ChartFunction<T>> {
    let tail = ts.tail();
    let mut values = vec![T::zero(); atlas.grid.len()];
    for &k in tail {
        let g = atlas.geometry(ts.center(k, i))?;
        for (v, c) in values.iter_mut().zip(&g.chi) {
            *v += *c;
        }
    }
    let m = from_usize::<T>(tail.len());
    values.iter_mut().for_each(|v| *v /= m);
    let charts: Vec<(usize, NormalChart<T>)> = tail.iter().map(|&k| (ts.center(k, i), atlas.chart(ts.center(k, i)))).collect();
    let model = atlas.model.clone();
    let net = atlas.net.clone();
    let pu = atlas.pu;
    let sampler: ValueFn<T> = Arc::new(move |xi: &[T]| {
        let mut s = T::zero();
        for (y, c) in &charts {
            if let Ok(p) = c.forward(xi) {
                s += pu.chi(&model, &net, *y, &p).unwrap_or(T::zero());
            }
        }
        s / from_usize(charts.len())
    });
    Ok(ChartFunction::new(atlas.grid.clone(), values, Vec::new())?.with_sampler(sampler))
}

/// Largest `|g̃^{(i)}_ξ - Dψ_jiᵀ g̃^{(j)}_{ψ_ji(ξ)} Dψ_ji|` over sampled overlap nodes.
pub fn metric_compatibility<T: Real>(
    atlas: &Atlas<T>,
    transitions: &BTreeMap<(usize, usize), TransitionMapEstimate<T>>,
    metrics: &[LimitMetric<T>],
    stride: usize,
) -> Result<T> {
    let n = atlas.dimension();
    let h = lit::<T>(1e-4);
    let mut worst = T::zero();
    for (&(j, i), psi) in transitions {
        if i == j {
            continue;
        }
        for k in (0..atlas.grid.len()).step_by(stride.max(1)) {
            let xi = atlas.grid.node(k);
            let img = psi.eval(xi)?;
            if norm(&img) >= atlas.rho {
                continue;
            }
            let d = psi.jacobian_at(xi, h)?;
            let gj = metrics[j].metric_at(&img)?;
            let gi = &metrics[i].field.at(k);
            let pulled = linalg::matmul(&linalg::matmul(&transpose(&d, n), &gj, n, n, n), &d, n, n, n);
            for (a, b) in gi.iter().zip(&pulled) {
                worst = worst.max((*a - *b).abs());
            }
        }
    }
    Ok(worst)
}

/// `sup |ψ_ij(ψ_ji(ξ)) - ξ|` over sampled nodes of `Ω_ij`.
pub fn inversion_residual<T: Real>(
    atlas: &Atlas<T>,
    transitions: &BTreeMap<(usize, usize), TransitionMapEstimate<T>>,
    stride: usize,
) -> Result<T> {
    let mut worst = T::zero();
    for (&(j, i), psi_ji) in transitions {
        let Some(psi_ij) = transitions.get(&(i, j)) else {
            return Err(Error::Domain(format!("pair ({i}, {j}) missing")));
        };
        for k in (0..atlas.grid.len()).step_by(stride.max(1)) {
            let xi = atlas.grid.node(k);
            let img = psi_ji.eval(xi)?;
            if norm(&img) >= atlas.rho {
                continue;
            }
            let back = psi_ij.eval(&img)?;
            worst = worst.max(back.iter().zip(xi).map(|(a, b)| (*a - *b).abs()).fold(T::zero(), T::max));
        }
    }
    Ok(worst)
}

fn transpose<T: Real>(m: &[T], n: usize) -> Vec<T> {
    let mut t = vec![T::zero(); n * n];
    for r in 0..n {
        for c in 0..n {
            t[c * n + r] = m[r * n + c];
        }
    }
    t
}

pub fn as_f64_pair<T: Real>(v: (T, T)) -> (f64, f64) {
    (to_f64(v.0), to_f64(v.1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covering::{build_net, covering_multiplicity, dense_region_samples, Ball};

    fn lattice() -> (ManifoldModel<f64>, DiscreteNet<f64>) {
        let m = ManifoldModel::euclidean(2).unwrap();
        let mut pts = Vec::new();
        for a in -30..=30 {
            for b in -3..=3 {
                pts.push(vec![a as f64, b as f64]);
            }
        }
        let net = DiscreteNet::from_points(&m, pts, 1.0, 1.5, vec![]).unwrap();
        (m, net)
    }

    #[test]
    fn i_max_zero_keeps_only_cores() {
        let (m, net) = lattice();
        let core: Vec<Vec<f64>> = (0..10).map(|k| vec![k as f64, 0.0]).collect();
        let ts = build_trailing_system(&m, &net, &core, 0).unwrap();
        assert!(ts.orderings.iter().zip(&ts.cores).all(|(o, c)| o == &vec![*c]));
    }

    #[test]
    fn lattice_orderings_use_lexicographic_ties() {
        let (m, net) = lattice();
        let core: Vec<Vec<f64>> = (0..10).map(|k| vec![k as f64, 0.0]).collect();
        let ts = build_trailing_system(&m, &net, &core, 4).unwrap();
        for (k, ord) in ts.orderings.iter().enumerate() {
            let rel: Vec<Vec<f64>> = ord.iter().map(|&i| vec![net.centers[i][0] - k as f64, net.centers[i][1]]).collect();
            assert_eq!(rel, vec![vec![0.0, 0.0], vec![-1.0, 0.0], vec![0.0, -1.0], vec![0.0, 1.0], vec![1.0, 0.0]]);
        }
        for d in &ts.distances {
            assert!(d.windows(2).all(|w| w[0] <= w[1]));
        }
    }

    #[test]
    fn non_net_core_is_rejected() {
        let (m, net) = lattice();
        assert!(matches!(build_trailing_system(&m, &net, &[vec![0.5, 0.0]], 2), Err(Error::Domain(_))));
    }

    #[test]
    fn translation_pattern_is_already_stable() {
        let (m, net) = lattice();
        let core: Vec<Vec<f64>> = (0..12).map(|k| vec![k as f64, 0.0]).collect();
        let ts = build_trailing_system(&m, &net, &core, 8).unwrap();
        let st = stabilize_intersections(&m, &net, &ts, 0.75).unwrap();
        assert_eq!(st.retained.len(), 12);
        let samples = dense_region_samples(&m, &[Ball::new(vec![0.0, 0.0], 2.0)], 0.05);
        let mult = covering_multiplicity(&m, &net, 2.0 * 0.75, &samples);
        assert!(st.j_sets.iter().all(|j| j.len() <= mult));
    }

    #[test]
    fn disjoint_balls_give_singleton_sets() {
        let (m, net) = lattice();
        let core: Vec<Vec<f64>> = (0..12).map(|k| vec![k as f64, 0.0]).collect();
        let ts = build_trailing_system(&m, &net, &core, 4).unwrap();
        let st = stabilize_intersections(&m, &net, &ts, 0.45).unwrap();
        assert!(st.j_sets.iter().enumerate().all(|(i, j)| j == &vec![i]));
    }

    #[test]
    fn lattice_transitions_are_translations() {
        let m = Arc::new(ManifoldModel::euclidean(2).unwrap());
        let net = build_net(&m, &[Ball::new(vec![0.0, 0.0], 8.0)], 0.5, 0.4, 0).unwrap();
        let atlas = Atlas::new(m.clone(), Arc::new(net), 16, 0).unwrap();
        let (y0, _) = atlas.net.nearest(&m, &[-3.0, 0.0]).unwrap();
        let start = atlas.net.centers[y0].clone();
        let core: Vec<Vec<f64>> = (0..12).map(|k| vec![start[0] + 0.4 * k as f64, start[1]]).collect();
        let ts = build_trailing_system(&m, &atlas.net, &core, 6).unwrap();
        let ts = stabilize_intersections(&m, &atlas.net, &ts, 0.5).unwrap();
        let psi = estimate_transition_limits(&atlas, &ts, 1e-10, true).unwrap();
        let frame = &atlas.chart(ts.cores[0]).frame;
        for ((i, j), e) in &psi {
            assert!(e.converged && e.full_residual.unwrap() < 1e-12);
            let hj = &atlas.net.centers[ts.center(0, *j)];
            let hi = &atlas.net.centers[ts.center(0, *i)];
            let shift: Vec<f64> = frame.basis.iter().map(|f| f[0] * (hj[0] - hi[0]) + f[1] * (hj[1] - hi[1])).collect();
            for k in 0..e.grid.len() {
                let x = e.grid.node(k);
                assert!((e.sample(k)[0] - x[0] - shift[0]).abs() < 1e-12);
                assert!((e.sample(k)[1] - x[1] - shift[1]).abs() < 1e-12);
            }
        }
        assert!(psi[&(0, 0)].samples.iter().zip((0..psi[&(0, 0)].grid.len()).flat_map(|k| psi[&(0, 0)].grid.node(k))).all(|(a, b)| *a == b));
        assert!(inversion_residual(&atlas, &psi, 5).unwrap() < 1e-12);
        let metrics: Vec<_> = (0..=6).map(|i| estimate_limit_metric(&atlas, &ts, i, 1e-8).unwrap()).collect();
        assert!(metrics.iter().all(|g| g.field.flatness_defect() < 1e-10));
        assert!(metric_compatibility(&atlas, &psi, &metrics, 9).unwrap() < 1e-8);
    }

    #[test]
    fn hyperbolic_limit_metric_is_normal_at_origin() {
        let m = Arc::new(ManifoldModel::hyperbolic(2).unwrap());
        let region = vec![Ball::new(m.origin(), 2.0)];
        let net = build_net(&m, &region, 0.5, 0.4, 0).unwrap();
        let atlas = Atlas::new(m.clone(), Arc::new(net), 16, 3).unwrap();
        let (c, _) = atlas.net.nearest(&m, &m.origin()).unwrap();
        let ts = build_from_indices(&m, &atlas.net, &vec![c; 8], 4).unwrap();
        let ts = stabilize_intersections(&m, &atlas.net, &ts, 0.5).unwrap();
        let g = estimate_limit_metric(&atlas, &ts, 2, 1e-8).unwrap();
        let (d0, d1) = g.origin_defects(1e-3).unwrap();
        assert!(d0 < 1e-6 && d1 < 1e-3, "{d0} {d1}");
    }
}
