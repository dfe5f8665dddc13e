//! Spotlight scans, greedy profile extraction along trailing systems, elementary
//! concentrations, and the energy identities of the resulting decomposition.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covering::{Ball, BoxGrid};
use crate::error::{Error, Result};
use crate::funcspace::{
    equivalent_norm, h12_and_lp, h12_inner, local_energy, local_mass, pullback, pullback_along, tail_range, tail_weak_limit, Atlas,
    ChartFunction, FunctionSequence, ManifoldFunction, ValueFn,
};
use crate::geometry::ModelKind;
use crate::infinity::{
    assemble_global_profile, assemble_infinity_manifold, infinity_equivalent_norm, infinity_norms, GlobalProfile, GluedManifold, GluingReport,
};
use crate::scalar::{from_usize, lit, norm, to_f64, Real};
use crate::trailing::{
    build_from_indices, estimate_limit_metric, estimate_limit_partition, estimate_transition_limits, stabilize_intersections,
    TrailingSystem,
};

/// Parameters of [`extract_profiles`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractionParams<T> {
    pub p: T,
    pub rho: T,
    pub rho_hat: T,
    /// Local-mass stopping threshold; `None` means `1e-3` times the first member's sup local mass.
    pub eps_stop: Option<T>,
    pub k_max: usize,
    pub i_max: usize,
    pub max_profiles: usize,
    pub weak_tol: T,
    pub transition_tol: T,
    pub metric_tol: T,
    pub gluing_tol: T,
    pub compatibility_tol: T,
    pub grid_res: usize,
    pub seed: u64,
    /// Record the oscillation of transition maps over all retained indices.
    pub full_history: bool,
}

impl<T: Real> Default for ExtractionParams<T> {
    fn default() -> Self {
        ExtractionParams {
            p: lit(4.0),
            rho: lit(0.5),
            rho_hat: lit(0.4),
            eps_stop: None,
            k_max: 48,
            i_max: 12,
            max_profiles: 4,
            weak_tol: lit(1e-3),
            transition_tol: lit(1e-6),
            metric_tol: lit(1e-3),
            gluing_tol: lit(1e-8),
            compatibility_tol: lit(5e-3),
            grid_res: 64,
            seed: 0,
            full_history: false,
        }
    }
}

impl<T: Real> ExtractionParams<T> {
    /// Upper end of the admissible exponent range, `None` when unbounded.
    pub fn critical_exponent(dimension: usize) -> Option<T> {
        (dimension > 2).then(|| lit::<T>(2.0) * from_usize(dimension) / from_usize(dimension - 2))
    }

    pub fn validate(&self, dimension: usize) -> Result<()> {
        let upper = Self::critical_exponent(dimension);
        let in_range = self.p > lit(2.0) && upper.map_or(true, |u| self.p < u);
        if !in_range {
            let interval = match upper {
                Some(u) => format!("(2, {u})"),
                None => "(2, ∞)".into(),
            };
            return Err(Error::Config(format!("p = {} outside the open interval {interval} for N = {dimension}", self.p)));
        }
        if let Some(e) = self.eps_stop {
            if !(e > T::zero()) {
                return Err(Error::Config("eps_stop must be positive".into()));
            }
        }
        if self.max_profiles < 1 {
            return Err(Error::Config("max_profiles must be at least 1".into()));
        }
        if self.k_max < 8 {
            return Err(Error::Config(format!("K_max = {} below the 8 indices a weak limit needs", self.k_max)));
        }
        if self.grid_res < 8 {
            return Err(Error::Config("grid_res must be at least 8".into()));
        }
        if !(self.rho_hat * lit(2.0) > self.rho && self.rho_hat < self.rho) {
            return Err(Error::Config("need rho/2 < rho_hat < rho".into()));
        }
        Ok(())
    }
}

/// One row of a spotlight table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanEntry<T> {
    pub center: usize,
    pub mass: T,
    /// Whether the mass was computed at full resolution.
    pub exact: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpotlightScan<T> {
    pub best: Option<usize>,
    pub best_point: Option<Vec<T>>,
    pub local_mass: T,
    /// Sorted by decreasing mass, ties by index.
    pub table: Vec<ScanEntry<T>>,
}

/// Argmax of `∫_{B(y,ρ)} |f|^p` over net centers.
///
/// Masses are first computed on `coarse`; every center within a factor 2 of the
/// coarse maximum (and at least the top three) is recomputed on `atlas`.
pub fn spotlight_scan<T: Real>(atlas: &Atlas<T>, coarse: &Atlas<T>, f: &ManifoldFunction<T>, p: T) -> Result<SpotlightScan<T>> {
    if f.is_zero() {
        return Ok(SpotlightScan {
            best: None,
            best_point: None,
            local_mass: T::zero(),
            table: Vec::new(),
        });
    }
    let centers = atlas.relevant_centers(f)?;
    let rough: Vec<Result<T>> = centers.par_iter().map(|&c| local_mass(coarse, f, c, p)).collect();
    let mut entries = Vec::with_capacity(centers.len());
    for (&c, m) in centers.iter().zip(rough) {
        entries.push(ScanEntry { center: c, mass: m?, exact: false });
    }
    sort_entries(&mut entries);
    let top = entries.first().map(|e| e.mass).unwrap_or(T::zero());
    let refine: Vec<usize> = entries
        .iter()
        .enumerate()
        .filter(|(i, e)| *i < 3 || top == T::zero() || e.mass * lit(2.0) >= top)
        .map(|(i, _)| i)
        .collect();
    let exact: Vec<Result<T>> = refine.par_iter().map(|&i| local_mass(atlas, f, entries[i].center, p)).collect();
    for (&i, m) in refine.iter().zip(exact) {
        entries[i].mass = m?;
        entries[i].exact = true;
    }
    sort_entries(&mut entries);
    let best = entries.iter().find(|e| e.exact && e.mass > T::zero()).map(|e| e.center);
    Ok(SpotlightScan {
        best,
        best_point: best.map(|b| atlas.net.centers[b].clone()),
        local_mass: best.and_then(|b| entries.iter().find(|e| e.center == b)).map_or(T::zero(), |e| e.mass),
        table: entries,
    })
}

fn sort_entries<T: Real>(entries: &mut [ScanEntry<T>]) {
    entries.sort_by(|a, b| b.mass.partial_cmp(&a.mass).expect("finite mass").then(a.center.cmp(&b.center)));
}

/// Outcome of the vanishing test.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VanishingVerdict<T> {
    pub vanishing: bool,
    pub sup_mass_trace: Vec<T>,
    pub tail_decreasing: bool,
    /// Smallest `C` with `∫|u_k|^p ≤ C ‖u_k‖² (sup local mass)^{1-2/p}` for all `k`.
    pub interpolation_constant: T,
    pub lp_norms: Vec<T>,
}

/// Sup local mass traces and the interpolation constant of a sequence.
pub fn vanishing_test<T: Real>(atlas: &Atlas<T>, coarse: &Atlas<T>, seq: &FunctionSequence<T>, p: T, eps: T) -> Result<VanishingVerdict<T>> {
    let mut sup = Vec::with_capacity(seq.len());
    let mut lp = Vec::with_capacity(seq.len());
    let mut c = T::zero();
    for f in &seq.functions {
        let s = spotlight_scan(atlas, coarse, f, p)?.local_mass;
        let (h12, integral) = h12_and_lp(atlas, f, p)?;
        if integral > T::zero() {
            let denom = h12 * h12 * s.powf(T::one() - lit::<T>(2.0) / p);
            if denom > T::zero() {
                c = c.max(integral / denom);
            }
        }
        sup.push(s);
        lp.push(integral.powf(T::one() / p));
    }
    let tail = &sup[tail_range(sup.len())];
    let tail_decreasing = tail.windows(2).all(|w| w[1] <= w[0]) && tail.last() < tail.first();
    let last = *sup.last().expect("non-empty sequence");
    Ok(VanishingVerdict {
        vanishing: last < eps && tail_decreasing,
        sup_mass_trace: sup,
        tail_decreasing,
        interpolation_constant: c,
        lp_norms: lp,
    })
}

/// Local profile tabulated on a box grid over `Ω_ρ` and evaluated by cubic convolution.
#[derive(Clone, Debug)]
struct LocalProfile<T> {
    grid: BoxGrid<T>,
    samples: Arc<Vec<T>>,
    rho: T,
    /// Chart-coordinate ball containing the nonzero samples.
    support: Option<(Vec<T>, T)>,
}

impl<T: Real> LocalProfile<T> {
    fn new(grid: BoxGrid<T>, samples: Vec<T>, rho: T) -> Self {
        let scale = samples.iter().fold(T::zero(), |m, v| m.max(v.abs()));
        let h = grid.spacing();
        let nonzero: Vec<Vec<T>> = (0..grid.len())
            .filter(|&k| scale > T::zero() && samples[k].abs() > scale * lit(1e-14))
            .map(|k| grid.node(k))
            .collect();
        let support = (!nonzero.is_empty()).then(|| {
            let n = grid.dimension;
            let m = from_usize::<T>(nonzero.len());
            let c: Vec<T> = (0..n).map(|a| nonzero.iter().map(|x| x[a]).sum::<T>() / m).collect();
            let r = nonzero
                .iter()
                .map(|x| x.iter().zip(&c).map(|(a, b)| (*a - *b) * (*a - *b)).sum::<T>().sqrt())
                .fold(T::zero(), T::max)
                + h * lit(2.5);
            (c, r)
        });
        LocalProfile {
            grid,
            samples: Arc::new(samples),
            rho,
            support,
        }
    }

    fn sampler(&self) -> ValueFn<T> {
        let grid = self.grid.clone();
        let samples = self.samples.clone();
        let rho = self.rho;
        Arc::new(move |xi: &[T]| {
            if norm(xi) >= rho {
                return T::zero();
            }
            grid.interpolate_cubic(&samples, xi).unwrap_or(T::zero())
        })
    }
}

/// The patched sum `W_k = Σ_{i ≤ I_max} χ_{y_{k;i}} · (w_i ∘ e_{y_{k;i}}^{-1})`.
#[derive(Clone, Debug)]
pub struct ElementaryConcentration<T: Real> {
    pub profile: Arc<GlobalProfile<T>>,
    pub ts: Arc<TrailingSystem<T>>,
    profiles: Vec<LocalProfile<T>>,
    /// Largest `|w_i|` at nodes where the truncated index set does not cover, relative to `sup |w|`.
    pub truncation_tail: T,
}

/// Builds `W_k` from a global profile along its trailing system.
pub fn synthesize_elementary_concentration<T: Real>(ec: &ElementaryConcentration<T>, atlas: &Atlas<T>, k: usize) -> Result<ManifoldFunction<T>> {
    ec.at(atlas, k)
}

impl<T: Real> ElementaryConcentration<T> {
    pub fn at(&self, atlas: &Atlas<T>, k: usize) -> Result<ManifoldFunction<T>> {
        if !self.ts.retained.contains(&k) {
            return Err(Error::Domain(format!("index {} is not retained by the trailing system", k + 1)));
        }
        if self.profile.is_zero() {
            return Ok(ManifoldFunction::zero());
        }
        let members = self.ts.orderings[k].clone();
        let charts: Vec<_> = members.iter().map(|&c| atlas.chart(c)).collect();
        let factor = match atlas.model.kind {
            ModelKind::Euclidean | ModelKind::GluedReference => T::one(),
            _ => lit(1.25),
        };
        let mut support = Vec::new();
        for (i, prof) in self.profiles.iter().enumerate() {
            if let Some((c, r)) = &prof.support {
                if norm(c) < lit(1e-12) && *r >= atlas.rho {
                    support.push(Ball::new(atlas.net.centers[members[i]].clone(), atlas.rho));
                } else {
                    support.push(Ball::new(charts[i].forward(c)?, *r * factor));
                }
            }
        }
        if support.is_empty() {
            return Ok(ManifoldFunction::zero());
        }
        let samplers: Vec<Option<ValueFn<T>>> = self.profiles.iter().map(|p| p.support.as_ref().map(|_| p.sampler())).collect();
        let model = atlas.model.clone();
        let net = atlas.net.clone();
        let pu = atlas.pu;
        let balls = support.clone();
        Ok(ManifoldFunction::new(format!("W[{}]", k + 1), support, move |x: &[T]| {
            if !balls.iter().any(|b| model.distance_bracket(x, &b.center).0 < b.radius) {
                return T::zero();
            }
            let Ok(weights) = pu.weights(&model, &net, x) else { return T::zero() };
            let mut s = T::zero();
            for (c, chi) in weights {
                let Some(i) = members.iter().position(|m| *m == c) else { continue };
                let Some(w) = &samplers[i] else { continue };
                if let Ok(xi) = charts[i].inverse(x) {
                    s += chi * w(&xi);
                }
            }
            s
        }))
    }
}

/// Serializable record of one extracted bubble.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BubbleSummary<T> {
    pub stage: usize,
    /// Net index of the core `y_k` for every `k`.
    pub cores: Vec<usize>,
    pub core_at_kmax: Vec<T>,
    pub retained: usize,
    pub profile_h12_squared: T,
    pub profile_lp: T,
    pub profile_equivalent_squared: T,
    /// Modulus surrogate: `‖w‖²` on the manifold at infinity.
    pub modulus_estimate: T,
    pub best_candidate_estimate: T,
    pub dominance_holds: bool,
    pub transition_residual: T,
    pub transition_full_residual: Option<T>,
    pub limit_metric_flatness: T,
    pub limit_metric_residual: T,
    pub partition_defect: T,
    pub metric_compatibility: T,
    pub profile_compatibility: T,
    pub truncation_tail: T,
    pub local_weak_residual: T,
    pub gluing: GluingReport,
    /// Distance at `K_max` to the cores of earlier bubbles.
    pub separation_at_kmax: Vec<T>,
    pub folded_corrections: usize,
}

/// An extracted bubble with its geometry and profile.
#[derive(Clone, Debug)]
pub struct Bubble<T: Real> {
    pub ts: Arc<TrailingSystem<T>>,
    pub manifold: Arc<GluedManifold<T>>,
    pub profile: Arc<GlobalProfile<T>>,
    pub concentration: ElementaryConcentration<T>,
    pub summary: BubbleSummary<T>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow<T> {
    pub k: usize,
    pub stage: usize,
    pub lp_residual: T,
    pub h12_residual: T,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeakLimitSummary<T> {
    pub window_centers: usize,
    pub h12: T,
    pub lp: T,
    pub converged: bool,
    pub residual: T,
    /// Sup of the residual's fixed-chart tail averages after subtraction.
    pub leftover: T,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BubbleIdentities<T> {
    pub stage: usize,
    pub profile_h12_squared: T,
    pub pairing: T,
    pub concentration_h12_squared: T,
    /// `|⟨u_K, W_K⟩ - ‖w‖²| / ‖w‖²`.
    pub pairing_discrepancy: T,
    /// `|‖W_K‖² - ‖w‖²| / ‖w‖²`.
    pub concentration_discrepancy: T,
    /// `min_tail |||u_k|||² / |||w|||²`.
    pub equivalent_ratio: T,
    /// `‖W_K‖ / ‖w‖` bound realized at `K_max`.
    pub concentration_constant: T,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyVerdict<T> {
    pub bubbles: Vec<BubbleIdentities<T>>,
    pub limsup_h12_squared: T,
    pub weak_limit_h12_squared: T,
    pub plancherel_slack: T,
    pub plancherel_relative: T,
    pub brezis_lieb_discrepancy: T,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecouplingVerdict<T> {
    /// `⟨W^{(n)}_K, W^{(l)}_K⟩`.
    pub overlap: Vec<Vec<T>>,
    /// Largest off-diagonal entry over the smallest diagonal entry.
    pub off_diagonal_ratio: T,
    /// Per bubble, `‖W_k ∘ e_{y'_k}‖_{H^{1,2}(Ω_ρ)}` over tail `k`, with `y'_k` the net point nearest
    /// to `e_{y_k}(3ρ (k/K)^4 e_1)`.
    pub probe_traces: Vec<Vec<T>>,
    /// Per bubble, the same quantity along its own cores.
    pub own_core_traces: Vec<Vec<T>>,
    pub probes_decay: bool,
}

/// Output of [`extract_profiles`].
#[derive(Clone, Debug, Serialize)]
pub struct DecompositionReport<T: Real> {
    pub descriptor: String,
    pub p: T,
    pub k_max: usize,
    pub i_max: usize,
    pub eps_stop: T,
    pub weak_limit: WeakLimitSummary<T>,
    pub bubbles: Vec<BubbleSummary<T>>,
    pub vanishing: VanishingVerdict<T>,
    /// Residual `L^p` and `H^{1,2}` norms at `K_max` after each stage, at full resolution.
    pub stage_lp_at_kmax: Vec<T>,
    pub stage_h12_at_kmax: Vec<T>,
    pub traces: Vec<TraceRow<T>>,
    pub trace_resolution: usize,
    pub stop_reason: String,
    pub diagnostics: Vec<String>,
    pub energy: Option<EnergyVerdict<T>>,
    pub decoupling: Option<DecouplingVerdict<T>>,
    #[serde(skip)]
    pub runtime: ReportRuntime<T>,
}

/// Live objects behind a report.
#[derive(Clone, Debug)]
pub struct ReportRuntime<T: Real> {
    pub weak_limit: ManifoldFunction<T>,
    pub bubbles: Vec<Bubble<T>>,
    pub residuals: Vec<ManifoldFunction<T>>,
}

impl<T: Real> Default for ReportRuntime<T> {
    fn default() -> Self {
        ReportRuntime {
            weak_limit: ManifoldFunction::zero(),
            bubbles: Vec::new(),
            residuals: Vec::new(),
        }
    }
}

/// Tail average of the sequence on the charts meeting the support of `u_1`.
fn window_weak_limit<T: Real>(
    atlas: &Atlas<T>,
    coarse: &Atlas<T>,
    seq: &FunctionSequence<T>,
    params: &ExtractionParams<T>,
) -> Result<(ManifoldFunction<T>, WeakLimitSummary<T>, Vec<usize>)> {
    let first = &seq.functions[0];
    let mut window: Vec<usize> = Vec::new();
    for b in &first.support {
        window.extend(atlas.net.within(&atlas.model, &b.center, b.radius + atlas.rho).into_iter().map(|(c, _)| c));
    }
    window.sort_unstable();
    window.dedup();
    let tail: Vec<ManifoldFunction<T>> = seq.functions[tail_range(seq.len())].to_vec();
    let mut converged = true;
    let mut residual = T::zero();
    for &c in &window {
        let g = coarse.geometry(c)?;
        let pulls: Vec<ChartFunction<T>> = tail.iter().map(|f| pullback(coarse, f, &g)).collect();
        let wl = tail_weak_limit(&pulls, 4, params.weak_tol)?;
        converged &= wl.converged;
        residual = residual.max(wl.residual);
    }
    let m = from_usize::<T>(tail.len());
    let model = atlas.model.clone();
    let net = atlas.net.clone();
    let pu = atlas.pu;
    let balls: Vec<Ball<T>> = window.iter().map(|&c| Ball::new(atlas.net.centers[c].clone(), atlas.rho)).collect();
    let (members, tail_fns, reject) = (window.clone(), tail.clone(), balls.clone());
    let w0 = ManifoldFunction::new("weak limit", balls, move |x: &[T]| {
        if !reject.iter().any(|b| model.distance_bracket(x, &b.center).0 < b.radius) {
            return T::zero();
        }
        let Ok(weights) = pu.weights(&model, &net, x) else { return T::zero() };
        let s: T = weights.iter().filter(|(c, _)| members.binary_search(c).is_ok()).map(|(_, w)| *w).sum();
        if s == T::zero() {
            return T::zero();
        }
        s * tail_fns.iter().map(|f| f.eval(x)).sum::<T>() / m
    });
    let mut nonzero = false;
    for &c in &window {
        let g = atlas.geometry(c)?;
        if g.points.iter().any(|x| w0.eval(x) != T::zero()) {
            nonzero = true;
            break;
        }
    }
    let w0 = if nonzero { w0 } else { ManifoldFunction::zero() };
    let (h12, integral) = h12_and_lp(atlas, &w0, params.p)?;
    Ok((
        w0,
        WeakLimitSummary {
            window_centers: window.len(),
            h12,
            lp: integral.powf(T::one() / params.p),
            converged,
            residual,
            leftover: T::zero(),
        },
        window,
    ))
}

fn tail_average_sup<T: Real>(coarse: &Atlas<T>, fns: &[ManifoldFunction<T>], window: &[usize]) -> Result<T> {
    let mut worst = T::zero();
    let m = from_usize::<T>(fns.len());
    for &c in window {
        let g = coarse.geometry(c)?;
        for x in &g.points {
            let v = fns.iter().map(|f| f.eval(x)).sum::<T>() / m;
            worst = worst.max(v.abs());
        }
    }
    Ok(worst)
}

struct Stage<T: Real> {
    ts: Arc<TrailingSystem<T>>,
    manifold: Arc<GluedManifold<T>>,
    profile: Arc<GlobalProfile<T>>,
    concentration: ElementaryConcentration<T>,
    local_weak_residual: T,
}

/// Local profiles of `residuals` along a stabilized trailing system.
fn local_profiles<T: Real>(
    atlas: &Atlas<T>,
    ts: &TrailingSystem<T>,
    residuals: &[ManifoldFunction<T>],
    params: &ExtractionParams<T>,
) -> Result<(Vec<ChartFunction<T>>, Vec<LocalProfile<T>>, T)> {
    let tail = ts.tail().to_vec();
    let box_grid = BoxGrid::new(atlas.dimension(), atlas.rho, 2 * params.grid_res + 1);
    let reach = atlas.rho + box_grid.spacing() * lit(2.5);
    let nodes: Vec<usize> = (0..box_grid.len()).collect();
    let mut locals = Vec::with_capacity(ts.charts());
    let mut profiles = Vec::with_capacity(ts.charts());
    let mut weak_residual = T::zero();
    for i in 0..ts.charts() {
        let mut pulls = Vec::with_capacity(tail.len());
        let mut charts = Vec::with_capacity(tail.len());
        for &k in &tail {
            let g = atlas.geometry(ts.center(k, i))?;
            pulls.push(pullback(atlas, &residuals[k], &g));
            charts.push(g.chart.clone());
        }
        let wl = tail_weak_limit(&pulls, 4, params.weak_tol)?;
        weak_residual = weak_residual.max(wl.residual);
        let m = from_usize::<T>(tail.len());
        let samples = nodes
            .par_iter()
            .map(|&n| -> Result<T> {
                let xi = box_grid.node(n);
                if norm(&xi) > reach {
                    return Ok(T::zero());
                }
                let mut s = T::zero();
                for (c, &k) in charts.iter().zip(&tail) {
                    s += residuals[k].eval(&c.forward(&xi)?);
                }
                Ok(s / m)
            })
            .collect::<Result<Vec<T>>>()?;
        let lp = LocalProfile::new(box_grid.clone(), samples, atlas.rho);
        locals.push(wl.limit.with_sampler(lp.sampler()));
        profiles.push(lp);
    }
    Ok((locals, profiles, weak_residual))
}

fn build_stage<T: Real>(
    atlas: &Atlas<T>,
    cores: &[usize],
    residuals: &[ManifoldFunction<T>],
    params: &ExtractionParams<T>,
) -> Result<Stage<T>> {
    let ts = build_from_indices(&atlas.model, &atlas.net, cores, params.i_max)?;
    let ts = stabilize_intersections(&atlas.model, &atlas.net, &ts, atlas.rho)?;
    let transitions = estimate_transition_limits(atlas, &ts, params.transition_tol, params.full_history)?;
    let metrics = (0..ts.charts())
        .map(|i| estimate_limit_metric(atlas, &ts, i, params.metric_tol))
        .collect::<Result<Vec<_>>>()?;
    let eta = (0..ts.charts())
        .map(|i| estimate_limit_partition(atlas, &ts, i))
        .collect::<Result<Vec<_>>>()?;
    let manifold = Arc::new(assemble_infinity_manifold(atlas, &ts, transitions, metrics, eta, params.gluing_tol)?);
    build_profile_on(atlas, Arc::new(ts), manifold, residuals, params)
}

fn build_profile_on<T: Real>(
    atlas: &Atlas<T>,
    ts: Arc<TrailingSystem<T>>,
    manifold: Arc<GluedManifold<T>>,
    residuals: &[ManifoldFunction<T>],
    params: &ExtractionParams<T>,
) -> Result<Stage<T>> {
    let (locals, boxes, local_weak_residual) = local_profiles(atlas, &ts, residuals, params)?;
    let profile = Arc::new(assemble_global_profile(manifold.clone(), locals, params.compatibility_tol)?);
    let concentration = concentration_from(profile.clone(), ts.clone(), boxes);
    Ok(Stage {
        ts,
        manifold,
        profile,
        concentration,
        local_weak_residual,
    })
}

fn concentration_from<T: Real>(profile: Arc<GlobalProfile<T>>, ts: Arc<TrailingSystem<T>>, profiles: Vec<LocalProfile<T>>) -> ElementaryConcentration<T> {
    let gm = &profile.manifold;
    let scale = profile.sup_abs();
    let mut tail = T::zero();
    if scale > T::zero() {
        for (i, w) in profile.locals.iter().enumerate() {
            for (k, v) in w.values.iter().enumerate() {
                if !gm.covered[i][k] {
                    tail = tail.max(v.abs() / scale);
                }
            }
        }
    }
    ElementaryConcentration {
        profile,
        ts,
        profiles,
        truncation_tail: tail,
    }
}

fn divergence<T: Real>(atlas: &Atlas<T>, new: &[usize], old: &[usize], i_max: usize) -> (bool, T) {
    let d: Vec<T> = new
        .iter()
        .zip(old)
        .map(|(a, b)| atlas.model.distance(&atlas.net.centers[*a], &atlas.net.centers[*b]))
        .collect();
    let tail = &d[tail_range(d.len())];
    let last = *d.last().expect("non-empty");
    let increasing = tail.windows(2).all(|w| w[1] > w[0]);
    (last > atlas.rho * lit(4.0) * from_usize(i_max) && increasing, last)
}

fn stage_traces<T: Real>(trace: &Atlas<T>, residuals: &[ManifoldFunction<T>], stage: usize, p: T) -> Result<Vec<TraceRow<T>>> {
    residuals
        .iter()
        .enumerate()
        .map(|(k, r)| {
            let (h12, integral) = h12_and_lp(trace, r, p)?;
            Ok(TraceRow {
                k: k + 1,
                stage,
                lp_residual: integral.powf(T::one() / p),
                h12_residual: h12,
            })
        })
        .collect()
}

/// Greedy extraction of profiles from an `H^{1,2}`-bounded sequence.
pub fn extract_profiles<T: Real>(atlas: &Atlas<T>, seq: &FunctionSequence<T>, params: &ExtractionParams<T>) -> Result<DecompositionReport<T>> {
    params.validate(atlas.dimension())?;
    if seq.len() < 8 {
        return Err(Error::Domain(format!("sequence has {} members, at least 8 needed", seq.len())));
    }
    let p = params.p;
    let coarse = atlas.with_resolution((params.grid_res / 4).max(8))?;
    let trace_res = (params.grid_res / 2).max(8);
    let trace = atlas.with_resolution(trace_res)?;
    let k_last = seq.len() - 1;
    let mut diagnostics = Vec::new();

    let first_scan = spotlight_scan(atlas, &coarse, &seq.functions[0], p)?;
    let eps = params.eps_stop.unwrap_or(first_scan.local_mass * lit(1e-3));
    let vanishing = vanishing_test(atlas, &coarse, seq, p, eps)?;

    let (w0, mut weak_summary, window) = window_weak_limit(atlas, &coarse, seq, params)?;
    let mut residuals: Vec<ManifoldFunction<T>> = seq.functions.iter().map(|u| u.difference(&w0)).collect();
    weak_summary.leftover = tail_average_sup(&coarse, &residuals[tail_range(seq.len())], &window)?;
    if weak_summary.leftover > params.weak_tol * lit(10.0) {
        diagnostics.push(format!(
            "fixed-chart tail averages of the residual reach {} after subtracting the weak limit",
            weak_summary.leftover
        ));
    }

    let mut traces = stage_traces(&trace, &residuals, 0, p)?;
    let (h0, l0) = h12_and_lp(atlas, &residuals[k_last], p)?;
    let mut stage_lp = vec![l0.powf(T::one() / p)];
    let mut stage_h12 = vec![h0];
    let mut bubbles: Vec<Bubble<T>> = Vec::new();
    let mut folds = 0usize;
    let stop_reason;

    loop {
        if bubbles.len() >= params.max_profiles {
            stop_reason = format!("reached max_profiles = {}", params.max_profiles);
            break;
        }
        let tail_ks: Vec<usize> = tail_range(seq.len()).collect();
        let mut scans: Vec<Option<SpotlightScan<T>>> = vec![None; seq.len()];
        let mut tail_mass = T::zero();
        for &k in &tail_ks {
            let s = spotlight_scan(atlas, &coarse, &residuals[k], p)?;
            tail_mass = tail_mass.max(s.local_mass);
            scans[k] = Some(s);
        }
        if tail_mass < eps {
            stop_reason = format!("tail local mass {:e} below eps_stop {:e}", to_f64(tail_mass), to_f64(eps));
            break;
        }
        for k in 0..tail_ks[0] {
            scans[k] = Some(spotlight_scan(atlas, &coarse, &residuals[k], p)?);
        }
        let cores: Option<Vec<usize>> = scans.iter().map(|s| s.as_ref().and_then(|s| s.best)).collect();
        let Some(cores) = cores else {
            stop_reason = "residual vanishes identically at some index; core sequence undefined".into();
            break;
        };

        let mut separations = Vec::new();
        let mut merge_into = None;
        for (l, b) in bubbles.iter().enumerate() {
            let (ok, d) = divergence(atlas, &cores, &b.summary.cores, params.i_max);
            separations.push(d);
            if !ok && merge_into.is_none() {
                merge_into = Some(l);
            }
        }

        if let Some(l) = merge_into {
            folds += 1;
            if folds > 1 {
                return Err(Error::Extraction(format!(
                    "core sequence of stage {} does not diverge from bubble {} (second occurrence)",
                    bubbles.len() + 1,
                    l + 1
                )));
            }
            diagnostics.push(format!("candidate cores stay near bubble {}; folded into its trailing system", l + 1));
            let b = &bubbles[l];
            let corr = build_profile_on(atlas, b.ts.clone(), b.manifold.clone(), &residuals, params)?;
            subtract(atlas, &mut residuals, &corr.concentration)?;
            let merged = merge_profiles(atlas, &bubbles[l], &corr, params)?;
            bubbles[l] = merged;
            traces.extend(stage_traces(&trace, &residuals, bubbles.len(), p)?);
            let (h, l_int) = h12_and_lp(atlas, &residuals[k_last], p)?;
            *stage_lp.last_mut().expect("stage entry") = l_int.powf(T::one() / p);
            *stage_h12.last_mut().expect("stage entry") = h;
            continue;
        }

        let stage = match build_stage(atlas, &cores, &residuals, params) {
            Ok(s) => s,
            Err(e @ (Error::Construction(_) | Error::Extraction(_))) => {
                diagnostics.push(format!("bubble candidate at stage {} skipped: {e}", bubbles.len() + 1));
                stop_reason = "candidate bubble could not be assembled".into();
                break;
            }
            Err(e) => return Err(e),
        };
        let (h12, lp) = infinity_norms(&stage.profile, p);
        let equiv = infinity_equivalent_norm(&stage.profile)?;
        let kmax_scan = scans[k_last].as_ref().expect("scanned");
        let mut best_candidate = T::zero();
        for e in kmax_scan.table.iter().filter(|e| Some(e.center) != kmax_scan.best).take(5) {
            best_candidate = best_candidate.max(local_energy(atlas, &residuals[k_last], e.center)?);
        }
        let modulus = h12 * h12;
        let transitions = &stage.manifold.transitions;
        let summary = BubbleSummary {
            stage: bubbles.len() + 1,
            cores: cores.clone(),
            core_at_kmax: atlas.net.centers[cores[k_last]].clone(),
            retained: stage.ts.retained.len(),
            profile_h12_squared: modulus,
            profile_lp: lp,
            profile_equivalent_squared: equiv * equiv,
            modulus_estimate: modulus,
            best_candidate_estimate: best_candidate,
            dominance_holds: modulus * lit(2.0) >= best_candidate,
            transition_residual: transitions.values().map(|e| e.residual).fold(T::zero(), T::max),
            transition_full_residual: transitions
                .values()
                .map(|e| e.full_residual)
                .try_fold(T::zero(), |m, r| r.map(|r| m.max(r))),
            limit_metric_flatness: stage.manifold.flatness_defect(),
            limit_metric_residual: stage.manifold.metrics.iter().map(|m| m.residual).fold(T::zero(), T::max),
            partition_defect: stage.manifold.partition_defect,
            metric_compatibility: stage.manifold.metric_defect,
            profile_compatibility: stage.profile.compatibility,
            truncation_tail: stage.concentration.truncation_tail,
            local_weak_residual: stage.local_weak_residual,
            gluing: stage.manifold.validation.clone(),
            separation_at_kmax: separations,
            folded_corrections: 0,
        };
        if !summary.dominance_holds {
            diagnostics.push(format!("bubble {} fails the half-modulus dominance check", summary.stage));
        }
        subtract(atlas, &mut residuals, &stage.concentration)?;
        bubbles.push(Bubble {
            ts: stage.ts,
            manifold: stage.manifold,
            profile: stage.profile,
            concentration: stage.concentration,
            summary,
        });
        traces.extend(stage_traces(&trace, &residuals, bubbles.len(), p)?);
        let (h, l_int) = h12_and_lp(atlas, &residuals[k_last], p)?;
        stage_lp.push(l_int.powf(T::one() / p));
        stage_h12.push(h);
        if stage_lp[stage_lp.len() - 1] >= stage_lp[stage_lp.len() - 2] {
            diagnostics.push(format!("residual L^p at K_max did not decrease at stage {}", bubbles.len()));
        }
    }

    Ok(DecompositionReport {
        descriptor: seq.descriptor.clone(),
        p,
        k_max: seq.len(),
        i_max: params.i_max,
        eps_stop: eps,
        weak_limit: weak_summary,
        bubbles: bubbles.iter().map(|b| b.summary.clone()).collect(),
        vanishing,
        stage_lp_at_kmax: stage_lp,
        stage_h12_at_kmax: stage_h12,
        traces,
        trace_resolution: trace_res,
        stop_reason,
        diagnostics,
        energy: None,
        decoupling: None,
        runtime: ReportRuntime {
            weak_limit: w0,
            bubbles,
            residuals,
        },
    })
}

fn subtract<T: Real>(atlas: &Atlas<T>, residuals: &mut [ManifoldFunction<T>], ec: &ElementaryConcentration<T>) -> Result<()> {
    for &k in &ec.ts.retained {
        let w = ec.at(atlas, k)?;
        residuals[k] = residuals[k].difference(&w);
    }
    Ok(())
}

fn merge_profiles<T: Real>(atlas: &Atlas<T>, old: &Bubble<T>, corr: &Stage<T>, params: &ExtractionParams<T>) -> Result<Bubble<T>> {
    let mut locals = Vec::with_capacity(old.profile.locals.len());
    let mut boxes = Vec::with_capacity(locals.capacity());
    for (i, (a, b)) in old.profile.locals.iter().zip(&corr.profile.locals).enumerate() {
        let values = a.values.iter().zip(&b.values).map(|(x, y)| *x + *y).collect();
        let gradients = if a.gradients.is_empty() || b.gradients.is_empty() {
            Vec::new()
        } else {
            a.gradients.iter().zip(&b.gradients).map(|(x, y)| *x + *y).collect()
        };
        let (pa, pb) = (&old.concentration.profiles[i], &corr.concentration.profiles[i]);
        let samples = pa.samples.iter().zip(pb.samples.iter()).map(|(x, y)| *x + *y).collect();
        let lp = LocalProfile::new(pa.grid.clone(), samples, atlas.rho);
        locals.push(ChartFunction::new(a.grid.clone(), values, gradients)?.with_sampler(lp.sampler()));
        boxes.push(lp);
    }
    let profile = Arc::new(assemble_global_profile(old.manifold.clone(), locals, params.compatibility_tol)?);
    let concentration = concentration_from(profile.clone(), old.ts.clone(), boxes);
    let (h12, lp) = infinity_norms(&profile, params.p);
    let equiv = infinity_equivalent_norm(&profile)?;
    let mut summary = old.summary.clone();
    summary.profile_h12_squared = h12 * h12;
    summary.modulus_estimate = h12 * h12;
    summary.profile_lp = lp;
    summary.profile_equivalent_squared = equiv * equiv;
    summary.profile_compatibility = profile.compatibility;
    summary.truncation_tail = concentration.truncation_tail;
    summary.folded_corrections += 1;
    Ok(Bubble {
        ts: old.ts.clone(),
        manifold: old.manifold.clone(),
        profile,
        concentration,
        summary,
    })
}

/// Checks the pairing, concentration-norm, Plancherel and Brezis–Lieb identities.
pub fn verify_energy_identities<T: Real>(atlas: &Atlas<T>, report: &DecompositionReport<T>, seq: &FunctionSequence<T>) -> Result<EnergyVerdict<T>> {
    let p = report.p;
    let k_last = seq.len() - 1;
    let u = &seq.functions[k_last];
    let tail: Vec<usize> = tail_range(seq.len()).collect();
    let mut identities = Vec::new();
    let mut profile_sum = T::zero();
    let mut profile_lp_sum = T::zero();
    for b in &report.runtime.bubbles {
        let w2 = b.summary.profile_h12_squared;
        profile_sum += w2;
        profile_lp_sum += b.summary.profile_lp.powf(p);
        let wk = b.concentration.at(atlas, k_last)?;
        let pairing = h12_inner(atlas, u, &wk)?;
        let wk2 = h12_inner(atlas, &wk, &wk)?;
        let mut equiv_min = T::infinity();
        for &k in &tail {
            let e = equivalent_norm(atlas, &seq.functions[k])?;
            equiv_min = equiv_min.min(e * e);
        }
        let rel = |a: T| if w2 > T::zero() { (a - w2).abs() / w2 } else { a.abs() };
        identities.push(BubbleIdentities {
            stage: b.summary.stage,
            profile_h12_squared: w2,
            pairing,
            concentration_h12_squared: wk2,
            pairing_discrepancy: rel(pairing),
            concentration_discrepancy: rel(wk2),
            equivalent_ratio: if b.summary.profile_equivalent_squared > T::zero() {
                equiv_min / b.summary.profile_equivalent_squared
            } else {
                T::one()
            },
            concentration_constant: if w2 > T::zero() { (wk2 / w2).sqrt() } else { T::zero() },
        });
    }
    let limsup = tail.iter().map(|&k| seq.h12_norms[k] * seq.h12_norms[k]).fold(T::zero(), T::max);
    let (w0_h12, w0_lp) = h12_and_lp(atlas, &report.runtime.weak_limit, p)?;
    let slack = limsup - w0_h12 * w0_h12 - profile_sum;
    let (_, u_lp) = h12_and_lp(atlas, u, p)?;
    let sup_lp = report.vanishing.lp_norms.iter().map(|v| v.powf(p)).fold(T::zero(), T::max);
    let bl = (u_lp - w0_lp - profile_lp_sum).abs() / if sup_lp > T::zero() { sup_lp } else { T::one() };
    Ok(EnergyVerdict {
        bubbles: identities,
        limsup_h12_squared: limsup,
        weak_limit_h12_squared: w0_h12 * w0_h12,
        plancherel_slack: slack,
        plancherel_relative: if limsup > T::zero() { slack / limsup } else { T::zero() },
        brezis_lieb_discrepancy: bl,
    })
}

/// Pairwise overlaps of the concentrations at `K_max` and probe traces along diverging centers.
pub fn verify_decoupling<T: Real>(atlas: &Atlas<T>, report: &DecompositionReport<T>) -> Result<DecouplingVerdict<T>> {
    let bubbles = &report.runtime.bubbles;
    let k_last = report.k_max - 1;
    let ws: Vec<ManifoldFunction<T>> = bubbles.iter().map(|b| b.concentration.at(atlas, k_last)).collect::<Result<_>>()?;
    let n = ws.len();
    let mut overlap = vec![vec![T::zero(); n]; n];
    for a in 0..n {
        for b in a..n {
            let v = h12_inner(atlas, &ws[a], &ws[b])?;
            overlap[a][b] = v;
            overlap[b][a] = v;
        }
    }
    let min_diag = (0..n).map(|a| overlap[a][a]).fold(T::infinity(), T::min);
    let mut off = T::zero();
    for a in 0..n {
        for b in 0..n {
            if a != b {
                off = off.max(overlap[a][b].abs());
            }
        }
    }
    let mut probe_traces = Vec::with_capacity(n);
    let mut own = Vec::with_capacity(n);
    let mut decay = true;
    let k_total = from_usize::<T>(report.k_max);
    for b in bubbles {
        let mut trace = Vec::new();
        let mut own_trace = Vec::new();
        for k in tail_range(report.k_max) {
            if !b.ts.retained.contains(&k) {
                continue;
            }
            let w = b.concentration.at(atlas, k)?;
            let core = atlas.chart(b.summary.cores[k]);
            let mut offset = vec![T::zero(); atlas.dimension()];
            offset[0] = atlas.rho * lit(3.0) * (from_usize::<T>(k + 1) / k_total).powi(4);
            let target = core.forward(&offset)?;
            let (probe, _) = atlas
                .net
                .nearest(&atlas.model, &target)
                .ok_or_else(|| Error::Domain("empty net".into()))?;
            trace.push(pullback_along(atlas, &w, &atlas.chart(probe))?.flat_h12_norm());
            own_trace.push(pullback_along(atlas, &w, &core)?.flat_h12_norm());
        }
        let scale = trace.first().copied().unwrap_or(T::zero());
        let tol = lit::<T>(1e-9) * (T::one() + scale);
        decay &= trace.windows(2).all(|w| w[1] <= w[0] + tol) && trace.last() <= trace.first();
        probe_traces.push(trace);
        own.push(own_trace);
    }
    Ok(DecouplingVerdict {
        overlap,
        off_diagonal_ratio: if n > 1 && min_diag > T::zero() { off / min_diag } else { T::zero() },
        probe_traces,
        own_core_traces: own,
        probes_decay: decay,
    })
}

/// `sup |W_k(x) - W_ref(x - (y_k - y_ref))|` over chart nodes around the cores, for flat models.
pub fn translation_deviation<T: Real>(atlas: &Atlas<T>, bubble: &Bubble<T>, k: usize, k_ref: usize) -> Result<T> {
    if !matches!(atlas.model.kind, ModelKind::Euclidean | ModelKind::GluedReference) {
        return Err(Error::Domain("translation comparison needs a flat model".into()));
    }
    let wk = bubble.concentration.at(atlas, k)?;
    let wr = bubble.concentration.at(atlas, k_ref)?;
    let yk = &atlas.net.centers[bubble.summary.cores[k]];
    let yr = &atlas.net.centers[bubble.summary.cores[k_ref]];
    let mut worst = T::zero();
    for i in 0..bubble.ts.charts() {
        let g = atlas.geometry(bubble.ts.center(k, i))?;
        for x in &g.points {
            let back: Vec<T> = x.iter().zip(yk.iter().zip(yr)).map(|(a, (b, c))| *a - *b + *c).collect();
            worst = worst.max((wk.eval(x) - wr.eval(&back)).abs());
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covering::build_net;
    use crate::geometry::ManifoldModel;
    use std::f64::consts::PI;

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

    fn flat_atlas(region: Vec<Ball<f64>>, res: usize) -> Atlas<f64> {
        let m = Arc::new(ManifoldModel::euclidean(2).unwrap());
        let net = build_net(&m, &region, 0.5, 0.4, 0).unwrap();
        Atlas::new(m, Arc::new(net), res, 0).unwrap()
    }

    #[test]
    fn exponent_range_is_enforced() {
        let mut p = ExtractionParams::<f64>::default();
        p.p = 2.0;
        let e = p.validate(2).unwrap_err().to_string();
        assert!(e.contains("(2, ∞)"), "{e}");
        p.p = 6.0;
        assert!(p.validate(3).is_err());
        p.p = 5.5;
        assert!(p.validate(3).is_ok());
    }

    #[test]
    fn scan_finds_heavier_bump() {
        let atlas = flat_atlas(vec![Ball::new(vec![0.0, 0.0], 4.0)], 32);
        let coarse = atlas.with_resolution(8).unwrap();
        assert_eq!(spotlight_scan(&atlas, &coarse, &ManifoldFunction::zero(), 4.0).unwrap().local_mass, 0.0);
        let (a, _) = atlas.net.nearest(&atlas.model, &[-1.5, 0.3]).unwrap();
        let (b, _) = atlas.net.nearest(&atlas.model, &[1.6, -0.2]).unwrap();
        let f = bump(atlas.net.centers[a].clone(), 0.25, 1.0).combine(1.0, &bump(atlas.net.centers[b].clone(), 0.25, 0.7), 1.0, "two");
        let s = spotlight_scan(&atlas, &coarse, &f, 4.0).unwrap();
        assert_eq!(s.best, Some(a));
        let brute = atlas
            .relevant_centers(&f)
            .unwrap()
            .into_iter()
            .map(|c| (local_mass(&atlas, &f, c, 4.0).unwrap(), c))
            .fold((0.0, 0), |m, v| if v.0 > m.0 { v } else { m });
        assert_eq!(brute.1, a);
        // ∫|b|^p over a ball containing the whole bump: πR²/(3p+1)
        assert!((s.local_mass - PI * 0.0625 / 13.0).abs() < 0.01 * s.local_mass);
    }

    fn runaway_sequence(atlas: &Atlas<f64>, start: [f64; 2], step: f64, k: usize) -> FunctionSequence<f64> {
        let (c0, _) = atlas.net.nearest(&atlas.model, &start).unwrap();
        let y0 = atlas.net.centers[c0].clone();
        let fns = (0..k).map(|j| bump(vec![y0[0] + step * j as f64, y0[1]], 0.25, 1.0)).collect();
        FunctionSequence::measured(atlas, fns, "runaway", 10.0).unwrap()
    }

    #[test]
    fn runaway_bump_gives_one_bubble() {
        let k = 16;
        let region: Vec<Ball<f64>> = (0..k + 4).map(|j| Ball::new(vec![0.4 * j as f64 - 0.8, 0.0], 2.0)).collect();
        let atlas = flat_atlas(region, 32);
        let seq = runaway_sequence(&atlas, [0.0, 0.0], 0.4, k);
        let mut params = ExtractionParams::default();
        params.k_max = k;
        params.grid_res = 32;
        // cubic interpolation error at this grid is about 7e-3
        params.compatibility_tol = 2e-2;
        let mut report = extract_profiles(&atlas, &seq, &params).unwrap();
        assert_eq!(report.bubbles.len(), 1, "{:?} {:?}", report.stop_reason, report.diagnostics);
        assert_eq!(report.weak_limit.h12, 0.0);
        assert!(!report.vanishing.vanishing);
        let b = &report.bubbles[0];
        assert!(b.dominance_holds);
        let exact = PI * 0.0625 / 7.0 + 1.2 * PI;
        assert!((b.profile_h12_squared - exact).abs() < 0.02 * exact, "{}", b.profile_h12_squared);
        assert!(report.stage_lp_at_kmax[1] < 0.05 * report.stage_lp_at_kmax[0]);
        assert_eq!(report.traces.len(), 2 * k);
        report.energy = Some(verify_energy_identities(&atlas, &report, &seq).unwrap());
        let e = report.energy.as_ref().unwrap();
        assert!(e.bubbles[0].pairing_discrepancy < 0.02);
        assert!(e.bubbles[0].concentration_discrepancy < 0.02);
        assert!(e.plancherel_slack > -0.01 * e.limsup_h12_squared);
        assert!(e.brezis_lieb_discrepancy < 0.03);
        let d = verify_decoupling(&atlas, &report).unwrap();
        assert!(d.probes_decay);
        assert!(d.own_core_traces[0].iter().all(|v| *v > 0.5));
        let bub = &report.runtime.bubbles[0];
        assert!(translation_deviation(&atlas, bub, 12, 15).unwrap() < 1e-8);
        assert!(matches!(bub.concentration.at(&atlas, 100), Err(Error::Domain(_))));
    }

    #[test]
    fn fixed_bump_is_its_own_weak_limit() {
        let atlas = flat_atlas(vec![Ball::new(vec![0.0, 0.0], 2.0)], 32);
        let (c, _) = atlas.net.nearest(&atlas.model, &[0.0, 0.0]).unwrap();
        let fns = (0..12).map(|_| bump(atlas.net.centers[c].clone(), 0.25, 1.0)).collect();
        let seq = FunctionSequence::measured(&atlas, fns, "fixed", 10.0).unwrap();
        let mut params = ExtractionParams::default();
        params.k_max = 12;
        params.grid_res = 32;
        let report = extract_profiles(&atlas, &seq, &params).unwrap();
        assert!(report.bubbles.is_empty());
        assert!(report.weak_limit.converged);
        assert!(report.stage_lp_at_kmax[0] < 1e-12);
        assert!(!report.vanishing.vanishing);
    }
}
