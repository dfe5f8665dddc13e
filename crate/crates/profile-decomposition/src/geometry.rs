//! Manifold models, exponential and logarithm maps, normal charts and metric pullbacks.
//!
//! Points are stored in ambient coordinates: `R^N` for the flat and perturbed models,
//! the upper sheet of the hyperboloid in `R^{N+1}` for the hyperbolic model.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::covering::QuadratureGrid;
use crate::error::{Error, Result};
use crate::linalg;
use crate::scalar::{dist, dot, from_usize, lit, norm, sub, to_f64, Real};

/// Finite stand-in for an infinite injectivity radius.
pub const INJECTIVITY_CAP: f64 = 1.0e6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Euclidean,
    Hyperbolic,
    PerturbedEuclidean,
    /// Flat coordinate model used as the reference geometry of glued charts.
    GluedReference,
}

/// Compactly supported metric bump `g = I + a (1 - |x-c|^2/R^2)^4_+ S`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricBump<T> {
    pub center: Vec<T>,
    pub radius: T,
    pub amplitude: T,
    /// Symmetric `N x N` shape tensor, row-major.
    pub tensor: Vec<T>,
}

impl<T: Real> MetricBump<T> {
    pub fn isotropic(center: Vec<T>, radius: T, amplitude: T) -> Self {
        let n = center.len();
        MetricBump {
            center,
            radius,
            amplitude,
            tensor: linalg::identity(n),
        }
    }

    /// Profile `(1-s)^4` and its first two derivatives in `s`.
    fn profile(&self, s: T) -> (T, T, T) {
        if s >= T::one() {
            return (T::zero(), T::zero(), T::zero());
        }
        let u = T::one() - s;
        let u2 = u * u;
        (u2 * u2, -lit::<T>(4.0) * u2 * u, lit::<T>(12.0) * u2)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tolerances<T> {
    pub fd_step: T,
    pub ode_step: T,
    pub newton_tol: T,
    pub newton_max_iter: usize,
}

impl<T: Real> Default for Tolerances<T> {
    fn default() -> Self {
        Tolerances {
            fd_step: T::fd_step(),
            ode_step: lit(0.05),
            newton_tol: (T::epsilon() * lit(1.0e4)).max(lit(1.0e-12)),
            newton_max_iter: 40,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifoldModel<T> {
    pub kind: ModelKind,
    pub dimension: usize,
    pub injectivity_floor: T,
    pub perturbation: Option<MetricBump<T>>,
    pub tolerances: Tolerances<T>,
}

impl<T: Real> ManifoldModel<T> {
    fn check_dimension(n: usize) -> Result<()> {
        if n < 2 {
            return Err(Error::Construction(format!("dimension must be at least 2, got {n}")));
        }
        Ok(())
    }

    pub fn euclidean(n: usize) -> Result<Self> {
        Self::check_dimension(n)?;
        Ok(ManifoldModel {
            kind: ModelKind::Euclidean,
            dimension: n,
            injectivity_floor: lit(INJECTIVITY_CAP),
            perturbation: None,
            tolerances: Tolerances::default(),
        })
    }

    pub fn hyperbolic(n: usize) -> Result<Self> {
        Self::check_dimension(n)?;
        Ok(ManifoldModel {
            kind: ModelKind::Hyperbolic,
            dimension: n,
            injectivity_floor: lit(INJECTIVITY_CAP),
            perturbation: None,
            tolerances: Tolerances::default(),
        })
    }

    pub fn glued_reference(n: usize) -> Result<Self> {
        Self::check_dimension(n)?;
        Ok(ManifoldModel {
            kind: ModelKind::GluedReference,
            dimension: n,
            injectivity_floor: lit(INJECTIVITY_CAP),
            perturbation: None,
            tolerances: Tolerances::default(),
        })
    }

    /// Builds a perturbed Euclidean model and estimates its injectivity floor from
    /// sampled sectional curvatures.
    pub fn perturbed_euclidean(n: usize, bump: MetricBump<T>) -> Result<Self> {
        Self::check_dimension(n)?;
        if bump.center.len() != n || bump.tensor.len() != n * n {
            return Err(Error::Construction("metric bump has wrong dimension".into()));
        }
        if bump.radius <= T::zero() {
            return Err(Error::Construction("metric bump radius must be positive".into()));
        }
        for i in 0..n {
            for j in 0..n {
                if (bump.tensor[i * n + j] - bump.tensor[j * n + i]).abs() > lit(1e-12) {
                    return Err(Error::Construction("metric bump tensor must be symmetric".into()));
                }
            }
        }
        let ev = linalg::sym_eigenvalues(&bump.tensor, n);
        let lo = T::one() + (bump.amplitude * ev[0]).min(bump.amplitude * ev[n - 1]).min(T::zero());
        if lo < lit(0.5) {
            return Err(Error::Construction(format!(
                "metric bump amplitude too large: smallest metric eigenvalue {lo} < 1/2"
            )));
        }
        let mut model = ManifoldModel {
            kind: ModelKind::PerturbedEuclidean,
            dimension: n,
            injectivity_floor: lit(INJECTIVITY_CAP),
            perturbation: Some(bump),
            tolerances: Tolerances::default(),
        };
        let kappa = model.max_sectional_curvature(12) * lit(1.5);
        if kappa > T::zero() {
            model.injectivity_floor = (T::PI() / kappa.sqrt()).min(lit(INJECTIVITY_CAP));
        }
        Ok(model)
    }

    pub fn ambient_dim(&self) -> usize {
        match self.kind {
            ModelKind::Hyperbolic => self.dimension + 1,
            _ => self.dimension,
        }
    }

    pub fn origin(&self) -> Vec<T> {
        let mut o = vec![T::zero(); self.ambient_dim()];
        if self.kind == ModelKind::Hyperbolic {
            o[0] = T::one();
        }
        o
    }

    /// Riemannian inner product of ambient tangent vectors at `x`.
    pub fn inner(&self, x: &[T], u: &[T], v: &[T]) -> T {
        match self.kind {
            ModelKind::Euclidean | ModelKind::GluedReference => dot(u, v),
            ModelKind::Hyperbolic => minkowski(u, v),
            ModelKind::PerturbedEuclidean => {
                let g = self.metric_tensor(x);
                let n = self.dimension;
                let mut s = T::zero();
                for i in 0..n {
                    for j in 0..n {
                        s += u[i] * g[i * n + j] * v[j];
                    }
                }
                s
            }
        }
    }

    /// Coordinate metric tensor (flat and perturbed models only).
    pub fn metric_tensor(&self, x: &[T]) -> Vec<T> {
        let n = self.dimension;
        let mut g = linalg::identity(n);
        if let Some(b) = &self.perturbation {
            let s = sq_dist(x, &b.center) / (b.radius * b.radius);
            let (p, _, _) = b.profile(s);
            if p > T::zero() {
                for k in 0..n * n {
                    g[k] += b.amplitude * p * b.tensor[k];
                }
            }
        }
        g
    }

    /// First coordinate derivatives `dg[k][i*n+j] = d_k g_ij`.
    fn metric_derivative(&self, x: &[T]) -> Vec<Vec<T>> {
        let n = self.dimension;
        let mut dg = vec![vec![T::zero(); n * n]; n];
        if let Some(b) = &self.perturbation {
            let r2 = b.radius * b.radius;
            let s = sq_dist(x, &b.center) / r2;
            let (_, dp, _) = b.profile(s);
            if dp != T::zero() {
                for (k, dgk) in dg.iter_mut().enumerate() {
                    let ds = lit::<T>(2.0) * (x[k] - b.center[k]) / r2;
                    for (e, t) in dgk.iter_mut().zip(&b.tensor) {
                        *e = b.amplitude * dp * ds * *t;
                    }
                }
            }
        }
        dg
    }

    /// Christoffel symbols, `gamma[k*n*n + i*n + j] = Γ^k_ij`.
    pub fn christoffel(&self, x: &[T]) -> Vec<T> {
        let n = self.dimension;
        let mut gamma = vec![T::zero(); n * n * n];
        if self.perturbation.is_none() {
            return gamma;
        }
        let dg = self.metric_derivative(x);
        if dg.iter().all(|d| d.iter().all(|v| *v == T::zero())) {
            return gamma;
        }
        let g = self.metric_tensor(x);
        let ginv = linalg::inverse(&g, n).expect("metric is positive definite");
        let half = lit::<T>(0.5);
        for i in 0..n {
            for j in 0..n {
                // lowered symbol Γ_{l,ij}
                let mut low = vec![T::zero(); n];
                for (l, lv) in low.iter_mut().enumerate() {
                    *lv = half * (dg[i][j * n + l] + dg[j][i * n + l] - dg[l][i * n + j]);
                }
                for k in 0..n {
                    let mut s = T::zero();
                    for l in 0..n {
                        s += ginv[k * n + l] * low[l];
                    }
                    gamma[k * n * n + i * n + j] = s;
                }
            }
        }
        gamma
    }

    fn geodesic_accel(&self, x: &[T], v: &[T]) -> Vec<T> {
        match self.kind {
            ModelKind::Hyperbolic => {
                let s = minkowski(v, v);
                x.iter().map(|xi| *xi * s).collect()
            }
            ModelKind::PerturbedEuclidean => {
                let n = self.dimension;
                let b = self.perturbation.as_ref().expect("perturbed model has a bump");
                let r2 = b.radius * b.radius;
                let s = sq_dist(x, &b.center) / r2;
                let (p, dp, _) = b.profile(s);
                if dp == T::zero() {
                    return vec![T::zero(); n];
                }
                // d_m g = beta_m S, so Γ(v,v)_l = g^{lk} ((beta.v)(Sv)_k - beta_k (v.Sv)/2)
                let two = lit::<T>(2.0);
                let beta: Vec<T> = (0..n).map(|m| b.amplitude * dp * two * (x[m] - b.center[m]) / r2).collect();
                let sv: Vec<T> = (0..n).map(|k| dot(&b.tensor[k * n..(k + 1) * n], v)).collect();
                let bv = dot(&beta, v);
                let vsv = dot(v, &sv);
                let rhs: Vec<T> = (0..n).map(|k| -(bv * sv[k] - beta[k] * vsv / two)).collect();
                let mut g = b.tensor.iter().map(|t| b.amplitude * p * *t).collect::<Vec<T>>();
                for k in 0..n {
                    g[k * n + k] += T::one();
                }
                linalg::solve(&g, n, &rhs).expect("metric is positive definite")
            }
            _ => vec![T::zero(); x.len()],
        }
    }

    /// Whether the straight segment `x -> y` avoids the perturbation support.
    fn segment_is_flat(&self, x: &[T], y: &[T]) -> bool {
        match &self.perturbation {
            None => true,
            Some(b) => segment_ball_distance(x, y, &b.center) >= b.radius,
        }
    }

    /// Whether the coordinate ball `B(x, r)` meets the perturbation support.
    pub fn is_curved_near(&self, x: &[T], r: T) -> bool {
        match &self.perturbation {
            None => false,
            Some(b) => dist(x, &b.center) < b.radius + r * self.coord_factor(),
        }
    }

    /// Bound `|dx|_coord <= factor * |dx|_g`, used to size coordinate queries.
    pub fn coord_factor(&self) -> T {
        match &self.perturbation {
            None => T::one(),
            Some(b) => {
                let n = self.dimension;
                let ev = linalg::sym_eigenvalues(&b.tensor, n);
                let lo = T::one() + (b.amplitude * ev[0]).min(b.amplitude * ev[n - 1]).min(T::zero());
                T::one() / lo.sqrt()
            }
        }
    }

    /// Global bounds `(lo, hi)` on the eigenvalues of the coordinate metric.
    pub fn metric_eigen_bounds(&self) -> (T, T) {
        match &self.perturbation {
            None => (T::one(), T::one()),
            Some(b) => {
                let n = self.dimension;
                let ev = linalg::sym_eigenvalues(&b.tensor, n);
                let a1 = b.amplitude * ev[0];
                let a2 = b.amplitude * ev[n - 1];
                (T::one() + a1.min(a2).min(T::zero()), T::one() + a1.max(a2).max(T::zero()))
            }
        }
    }

    /// Cheap bracket `(lo, hi)` of the geodesic distance; exact where no integration is needed.
    pub fn distance_bracket(&self, x: &[T], q: &[T]) -> (T, T) {
        if self.kind == ModelKind::PerturbedEuclidean && !self.segment_is_flat(x, q) {
            let (lo, hi) = self.metric_eigen_bounds();
            let d = dist(x, q);
            return (d * lo.sqrt(), d * hi.sqrt());
        }
        let d = self.distance(x, q);
        (d, d)
    }

    /// Lower and upper bounds on the volume of a geodesic ball of radius `r`.
    pub fn ball_volume_bounds(&self, r: T) -> (T, T) {
        let n = self.dimension;
        let flat = unit_ball_volume::<T>(n) * r.powi(n as i32);
        match self.kind {
            ModelKind::Hyperbolic => {
                let v = hyperbolic_ball_volume(n, r);
                (v, v)
            }
            ModelKind::PerturbedEuclidean => {
                let b = self.perturbation.as_ref().expect("perturbed model has a bump");
                let ev = linalg::sym_eigenvalues(&b.tensor, n);
                let a1 = b.amplitude * ev[0];
                let a2 = b.amplitude * ev[n - 1];
                let lo = T::one() + a1.min(a2).min(T::zero());
                let hi = T::one() + a1.max(a2).max(T::zero());
                // A geodesic ball of radius r sits between coordinate balls of radius r/sqrt(hi) and r/sqrt(lo).
                let ratio = hi / lo;
                let half = lit::<T>(0.5 * n as f64);
                (flat * ratio.powf(-half), flat * ratio.powf(half))
            }
            _ => (flat, flat),
        }
    }

    /// Projects an ambient vector onto the tangent space at `x`.
    pub fn project_tangent(&self, x: &[T], v: &[T]) -> Vec<T> {
        match self.kind {
            ModelKind::Hyperbolic => {
                let c = minkowski(x, v);
                v.iter().zip(x).map(|(vi, xi)| *vi + c * *xi).collect()
            }
            _ => v.to_vec(),
        }
    }

    /// Exponential map on ambient tangent vectors.
    pub fn exp_ambient(&self, x: &[T], v: &[T]) -> Result<Vec<T>> {
        match self.kind {
            ModelKind::Euclidean | ModelKind::GluedReference => Ok(x.iter().zip(v).map(|(a, b)| *a + *b).collect()),
            ModelKind::Hyperbolic => Ok(hyperboloid_exp(x, v)),
            ModelKind::PerturbedEuclidean => {
                let end: Vec<T> = x.iter().zip(v).map(|(a, b)| *a + *b).collect();
                if self.segment_is_flat(x, &end) {
                    return Ok(end);
                }
                let b = self.perturbation.as_ref().expect("perturbed model has a bump");
                // straight flight up to the first contact with the support
                let rel = sub(x, &b.center);
                let vv = dot(v, v);
                let bq = dot(&rel, v);
                let cq = dot(&rel, &rel) - b.radius * b.radius;
                let t0 = if cq <= T::zero() {
                    T::zero()
                } else {
                    ((-bq - (bq * bq - vv * cq).max(T::zero()).sqrt()) / vv).max(T::zero())
                };
                let mut p: Vec<T> = x.iter().zip(v).map(|(a, c)| *a + t0 * *c).collect();
                let mut w = v.to_vec();
                let span = T::one() - t0;
                let steps = (to_f64(span * norm(v) / self.tolerances.ode_step).ceil() as usize).max(4);
                self.rk4_span(&mut p, &mut w, span, steps, true);
                let out = p;
                if out.iter().any(|c| !c.is_finite()) {
                    return Err(Error::numerical("geodesic integration diverged", f64::INFINITY));
                }
                Ok(out)
            }
        }
    }

    fn rk4_geodesic(&self, x: &[T], v: &[T], steps: usize) -> Vec<T> {
        let mut p = x.to_vec();
        let mut w = v.to_vec();
        self.rk4_span(&mut p, &mut w, T::one(), steps, false);
        p
    }

    /// Advances `(p, w)` by time `span` in `steps` RK4 steps. With `leave_support`, the
    /// flow switches to straight lines once the point exits the perturbation support.
    fn rk4_span(&self, p: &mut [T], w: &mut [T], span: T, steps: usize, leave_support: bool) {
        let h = span / from_usize(steps);
        let half = lit::<T>(0.5) * h;
        let sixth = h / lit(6.0);
        let two = lit::<T>(2.0);
        let m = p.len();
        let mut p2 = vec![T::zero(); m];
        let mut w2 = vec![T::zero(); m];
        let mut p3 = vec![T::zero(); m];
        let mut w3 = vec![T::zero(); m];
        let mut p4 = vec![T::zero(); m];
        let mut w4 = vec![T::zero(); m];
        for step in 0..steps {
            let a1 = self.geodesic_accel(p, w);
            for i in 0..m {
                p2[i] = p[i] + half * w[i];
                w2[i] = w[i] + half * a1[i];
            }
            let a2 = self.geodesic_accel(&p2, &w2);
            for i in 0..m {
                p3[i] = p[i] + half * w2[i];
                w3[i] = w[i] + half * a2[i];
            }
            let a3 = self.geodesic_accel(&p3, &w3);
            for i in 0..m {
                p4[i] = p[i] + h * w3[i];
                w4[i] = w[i] + h * a3[i];
            }
            let a4 = self.geodesic_accel(&p4, &w4);
            for i in 0..m {
                p[i] += sixth * (w[i] + two * w2[i] + two * w3[i] + w4[i]);
                w[i] += sixth * (a1[i] + two * a2[i] + two * a3[i] + a4[i]);
            }
            if leave_support {
                if let Some(b) = &self.perturbation {
                    let rel = sub(p, &b.center);
                    if dot(&rel, &rel) >= b.radius * b.radius && dot(&rel, w) >= T::zero() {
                        let rest = h * from_usize(steps - step - 1);
                        for i in 0..m {
                            p[i] += rest * w[i];
                        }
                        return;
                    }
                }
            }
        }
    }

    /// Logarithm map returning an ambient tangent vector at `x`.
    pub fn log_ambient(&self, x: &[T], q: &[T]) -> Result<Vec<T>> {
        match self.kind {
            ModelKind::Euclidean | ModelKind::GluedReference => Ok(sub(q, x)),
            ModelKind::Hyperbolic => Ok(hyperboloid_log(x, q)),
            ModelKind::PerturbedEuclidean => {
                if self.segment_is_flat(x, q) {
                    return Ok(sub(q, x));
                }
                self.shoot(x, q)
            }
        }
    }

    /// Newton shooting on the geodesic flow.
    fn shoot(&self, x: &[T], q: &[T]) -> Result<Vec<T>> {
        let n = self.dimension;
        let mut v = sub(q, x);
        let scale = T::one() + norm(q);
        let mut residual = T::infinity();
        for _ in 0..self.tolerances.newton_max_iter {
            let end = self.exp_ambient(x, &v)?;
            let r = sub(&end, q);
            residual = norm(&r);
            if residual <= self.tolerances.newton_tol * scale {
                return Ok(v);
            }
            let h = lit::<T>(1e-7) * (T::one() + norm(&v));
            let mut jac = vec![T::zero(); n * n];
            for a in 0..n {
                let mut vp = v.clone();
                vp[a] += h;
                let ep = self.exp_ambient(x, &vp)?;
                for i in 0..n {
                    jac[i * n + a] = (ep[i] - end[i]) / h;
                }
            }
            let step = linalg::solve(&jac, n, &r)
                .ok_or_else(|| Error::numerical("singular geodesic Jacobian during shooting", to_f64(residual)))?;
            for i in 0..n {
                v[i] -= step[i];
            }
        }
        Err(Error::numerical("geodesic shooting did not converge", to_f64(residual)))
    }

    /// Geodesic distance; never fails (falls back to the straight-segment length).
    pub fn distance(&self, x: &[T], q: &[T]) -> T {
        match self.kind {
            ModelKind::Euclidean | ModelKind::GluedReference => dist(x, q),
            ModelKind::Hyperbolic => hyperboloid_distance(x, q),
            ModelKind::PerturbedEuclidean => {
                if self.segment_is_flat(x, q) {
                    return dist(x, q);
                }
                match self.shoot(x, q) {
                    Ok(v) => self.inner(x, &v, &v).max(T::zero()).sqrt(),
                    Err(_) => self.segment_length(x, q),
                }
            }
        }
    }

    fn segment_length(&self, x: &[T], q: &[T]) -> T {
        let d = sub(q, x);
        let m = 64;
        let mut s = T::zero();
        for k in 0..m {
            let t = (from_usize::<T>(k) + lit(0.5)) / from_usize(m);
            let p: Vec<T> = x.iter().zip(&d).map(|(a, b)| *a + t * *b).collect();
            s += self.inner(&p, &d, &d).sqrt();
        }
        s / from_usize(m)
    }

    /// Global coordinates: ambient coordinates for flat models, normal coordinates at the
    /// origin with the canonical frame for the hyperbolic model.
    pub fn global_coords(&self, x: &[T]) -> Vec<T> {
        match self.kind {
            ModelKind::Hyperbolic => {
                let v = hyperboloid_log(&self.origin(), x);
                v[1..].to_vec()
            }
            _ => x.to_vec(),
        }
    }

    pub fn from_global(&self, c: &[T]) -> Vec<T> {
        match self.kind {
            ModelKind::Hyperbolic => {
                let mut v = vec![T::zero()];
                v.extend_from_slice(c);
                hyperboloid_exp(&self.origin(), &v)
            }
            _ => c.to_vec(),
        }
    }

    /// Sectional curvature of the coordinate plane `(a, b)` at `x` (perturbed model).
    pub fn sectional_curvature(&self, x: &[T], a: usize, b: usize) -> T {
        let n = self.dimension;
        let h = lit::<T>(1e-5);
        let gamma = self.christoffel(x);
        let mut dgamma = Vec::with_capacity(n);
        for j in 0..n {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[j] += h;
            xm[j] -= h;
            let gp = self.christoffel(&xp);
            let gm = self.christoffel(&xm);
            dgamma.push(gp.iter().zip(&gm).map(|(p, m)| (*p - *m) / (lit::<T>(2.0) * h)).collect::<Vec<T>>());
        }
        let idx = |l: usize, i: usize, j: usize| l * n * n + i * n + j;
        // R^l_{ijk} = d_j Γ^l_{ki} - d_k Γ^l_{ji} + Γ^m_{ki} Γ^l_{jm} - Γ^m_{ji} Γ^l_{km}
        let riemann = |l: usize, i: usize, j: usize, k: usize| {
            let mut r = dgamma[j][idx(l, k, i)] - dgamma[k][idx(l, j, i)];
            for m in 0..n {
                r += gamma[idx(m, k, i)] * gamma[idx(l, j, m)] - gamma[idx(m, j, i)] * gamma[idx(l, k, m)];
            }
            r
        };
        let g = self.metric_tensor(x);
        let mut num = T::zero();
        for l in 0..n {
            num += riemann(l, b, a, b) * g[l * n + a];
        }
        let den = g[a * n + a] * g[b * n + b] - g[a * n + b] * g[a * n + b];
        num / den
    }

    /// Largest sampled absolute sectional curvature over the perturbation support.
    pub fn max_sectional_curvature(&self, samples_per_axis: usize) -> T {
        let Some(b) = &self.perturbation else {
            return T::zero();
        };
        let n = self.dimension;
        let m = samples_per_axis.max(2);
        let mut worst = T::zero();
        let total = m.pow(n as u32);
        for flat in 0..total {
            let mut rem = flat;
            let mut x = b.center.clone();
            for xi in x.iter_mut() {
                let i = rem % m;
                rem /= m;
                let t = lit::<T>(-1.0) + lit::<T>(2.0) * from_usize::<T>(i) / from_usize(m - 1);
                *xi += t * b.radius;
            }
            if dist(&x, &b.center) > b.radius {
                continue;
            }
            for a in 0..n {
                for c in (a + 1)..n {
                    worst = worst.max(self.sectional_curvature(&x, a, c).abs());
                }
            }
        }
        worst
    }
}

fn sq_dist<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(x, y)| (*x - *y) * (*x - *y)).sum()
}

/// Distance from `c` to the closed segment `[x, y]`.
pub fn segment_ball_distance<T: Real>(x: &[T], y: &[T], c: &[T]) -> T {
    let d = sub(y, x);
    let dd = dot(&d, &d);
    let t = if dd > T::zero() {
        (dot(&sub(c, x), &d) / dd).max(T::zero()).min(T::one())
    } else {
        T::zero()
    };
    let p: Vec<T> = x.iter().zip(&d).map(|(a, b)| *a + t * *b).collect();
    dist(&p, c)
}

pub fn unit_ball_volume<T: Real>(n: usize) -> T {
    match n {
        0 => T::one(),
        1 => lit(2.0),
        _ => unit_ball_volume::<T>(n - 2) * lit::<T>(2.0) * T::PI() / from_usize(n),
    }
}

fn unit_sphere_area<T: Real>(n: usize) -> T {
    // area of S^{n-1}
    unit_ball_volume::<T>(n) * from_usize(n)
}

fn hyperbolic_ball_volume<T: Real>(n: usize, r: T) -> T {
    if n == 2 {
        return lit::<T>(2.0) * T::PI() * (r.cosh() - T::one());
    }
    let m = 400;
    let h = r / from_usize(m);
    let mut s = T::zero();
    for k in 0..m {
        let t = (from_usize::<T>(k) + lit(0.5)) * h;
        s += t.sinh().powi(n as i32 - 1);
    }
    unit_sphere_area::<T>(n) * s * h
}

/// Minkowski pairing `-a_0 b_0 + sum a_i b_i`.
pub fn minkowski<T: Real>(a: &[T], b: &[T]) -> T {
    -a[0] * b[0] + dot(&a[1..], &b[1..])
}

fn hyperboloid_exp<T: Real>(x: &[T], v: &[T]) -> Vec<T> {
    let nv = minkowski(v, v).max(T::zero()).sqrt();
    if nv < lit(1e-300_f64.max(to_f64(T::min_positive_value()))) {
        return x.to_vec();
    }
    let c = nv.cosh();
    let s = if nv < lit(1e-8) { T::one() } else { nv.sinh() / nv };
    let mut out: Vec<T> = x.iter().zip(v).map(|(a, b)| c * *a + s * *b).collect();
    renormalize_hyperboloid(&mut out);
    out
}

fn renormalize_hyperboloid<T: Real>(x: &mut [T]) {
    let spatial: T = x[1..].iter().map(|c| *c * *c).sum();
    x[0] = (T::one() + spatial).sqrt();
}

/// Numerically stable hyperbolic distance `2 asinh(|x-q|_L / 2)`.
fn hyperboloid_distance<T: Real>(x: &[T], q: &[T]) -> T {
    let d = sub(x, q);
    let chord = minkowski(&d, &d).max(T::zero()).sqrt();
    lit::<T>(2.0) * (chord / lit(2.0)).asinh()
}

fn hyperboloid_log<T: Real>(x: &[T], q: &[T]) -> Vec<T> {
    let d = hyperboloid_distance(x, q);
    let pair = minkowski(x, q);
    let u: Vec<T> = q.iter().zip(x).map(|(a, b)| *a + pair * *b).collect();
    let nu = minkowski(&u, &u).max(T::zero()).sqrt();
    if nu <= T::epsilon() {
        return vec![T::zero(); x.len()];
    }
    u.iter().map(|c| *c * d / nu).collect()
}

/// Lorentz boost of rapidity `t` in the `(0, axis)` plane.
pub fn lorentz_boost<T: Real>(x: &[T], axis: usize, t: T) -> Vec<T> {
    let mut out = x.to_vec();
    out[0] = t.cosh() * x[0] + t.sinh() * x[axis];
    out[axis] = t.sinh() * x[0] + t.cosh() * x[axis];
    out
}

/// Fixed-step RK4 integration of the geodesic equation, bypassing closed forms.
pub fn integrate_geodesic<T: Real>(model: &ManifoldModel<T>, x: &[T], v: &[T], steps: usize) -> Vec<T> {
    model.rk4_geodesic(x, v, steps.max(1))
}

/// Orthonormal tangent basis at a point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Frame<T> {
    pub base_point: Vec<T>,
    pub basis: Vec<Vec<T>>,
}

impl<T: Real> Frame<T> {
    /// Applies the frame to a coordinate vector.
    pub fn apply(&self, xi: &[T]) -> Vec<T> {
        let mut v = vec![T::zero(); self.base_point.len()];
        for (c, f) in xi.iter().zip(&self.basis) {
            for (vi, fi) in v.iter_mut().zip(f) {
                *vi += *c * *fi;
            }
        }
        v
    }

    pub fn orthonormality_defect(&self, model: &ManifoldModel<T>) -> T {
        let mut worst = T::zero();
        for (a, fa) in self.basis.iter().enumerate() {
            for (b, fb) in self.basis.iter().enumerate() {
                let target = if a == b { T::one() } else { T::zero() };
                worst = worst.max((model.inner(&self.base_point, fa, fb) - target).abs());
            }
        }
        worst
    }
}

fn gram_schmidt<T: Real>(model: &ManifoldModel<T>, y: &[T], raw: Vec<Vec<T>>) -> Option<Vec<Vec<T>>> {
    let mut basis: Vec<Vec<T>> = Vec::with_capacity(raw.len());
    for v in raw {
        let mut w = model.project_tangent(y, &v);
        // two passes for stability
        for _ in 0..2 {
            for f in &basis {
                let c = model.inner(y, &w, f);
                for (wi, fi) in w.iter_mut().zip(f) {
                    *wi -= c * *fi;
                }
            }
        }
        let n2 = model.inner(y, &w, &w);
        if !(n2 > lit(1e-12)) {
            return None;
        }
        let inv = T::one() / n2.sqrt();
        basis.push(w.into_iter().map(|c| c * inv).collect());
    }
    Some(basis)
}

/// Metric Gram-Schmidt of the coordinate axes at `y`.
pub fn canonical_frame<T: Real>(model: &ManifoldModel<T>, y: &[T]) -> Frame<T> {
    let a = model.ambient_dim();
    let offset = a - model.dimension;
    let raw = (0..model.dimension)
        .map(|i| {
            let mut e = vec![T::zero(); a];
            e[i + offset] = T::one();
            e
        })
        .collect();
    let basis = gram_schmidt(model, y, raw).expect("coordinate axes are independent");
    Frame {
        base_point: y.to_vec(),
        basis,
    }
}

/// Metric Gram-Schmidt of a seeded pseudo-random basis at `y`.
pub fn seeded_frame<T: Real>(model: &ManifoldModel<T>, y: &[T], seed: u64) -> Frame<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = model.ambient_dim();
    loop {
        let raw: Vec<Vec<T>> = (0..model.dimension)
            .map(|_| (0..a).map(|_| lit::<T>(rng.gen_range(-1.0..1.0))).collect())
            .collect();
        if let Some(basis) = gram_schmidt(model, y, raw) {
            return Frame {
                base_point: y.to_vec(),
                basis,
            };
        }
    }
}

fn check_len<T: Real>(model: &ManifoldModel<T>, v: &[T]) -> Result<()> {
    if norm(v) >= model.injectivity_floor {
        return Err(Error::Domain(format!(
            "tangent vector length {} exceeds injectivity floor {}",
            norm(v),
            model.injectivity_floor
        )));
    }
    Ok(())
}

/// `e_x(v) = exp_x(frame * v)`.
pub fn exp_map<T: Real>(model: &ManifoldModel<T>, x: &[T], frame: &Frame<T>, v: &[T]) -> Result<Vec<T>> {
    check_len(model, v)?;
    model.exp_ambient(x, &frame.apply(v))
}

/// Frame coordinates of `exp_x^{-1}(q)`.
pub fn log_map<T: Real>(model: &ManifoldModel<T>, x: &[T], frame: &Frame<T>, q: &[T]) -> Result<Vec<T>> {
    let d = model.distance(x, q);
    if d >= model.injectivity_floor {
        return Err(Error::Domain(format!("distance {d} exceeds injectivity floor")));
    }
    let v = model.log_ambient(x, q)?;
    Ok(frame.basis.iter().map(|f| model.inner(x, &v, f)).collect())
}

pub fn geodesic_distance<T: Real>(model: &ManifoldModel<T>, x: &[T], q: &[T]) -> T {
    model.distance(x, q)
}

/// Geodesic normal coordinates `e_y = exp_y o frame` on `Ω_r`.
#[derive(Clone, Debug)]
pub struct NormalChart<T: Real> {
    pub center: Vec<T>,
    pub radius: T,
    pub frame: Frame<T>,
    pub model: Arc<ManifoldModel<T>>,
}

impl<T: Real> NormalChart<T> {
    pub fn forward(&self, xi: &[T]) -> Result<Vec<T>> {
        self.model.exp_ambient(&self.center, &self.frame.apply(xi))
    }

    pub fn inverse(&self, q: &[T]) -> Result<Vec<T>> {
        let v = self.model.log_ambient(&self.center, q)?;
        Ok(self
            .frame
            .basis
            .iter()
            .map(|f| self.model.inner(&self.center, &v, f))
            .collect())
    }

    /// Image point, the `2N` central-difference stencil images and the ambient Jacobian
    /// (`A x N`, row-major) at `xi`.
    pub fn stencil(&self, xi: &[T], h: T) -> Result<(Vec<T>, Vec<Vec<T>>, Vec<T>)> {
        let n = xi.len();
        let a = self.model.ambient_dim();
        let p = self.forward(xi)?;
        let mut st = Vec::with_capacity(2 * n);
        let mut jac = vec![T::zero(); a * n];
        for c in 0..n {
            let mut xp = xi.to_vec();
            let mut xm = xi.to_vec();
            xp[c] += h;
            xm[c] -= h;
            let pp = self.forward(&xp)?;
            let pm = self.forward(&xm)?;
            for r in 0..a {
                jac[r * n + c] = (pp[r] - pm[r]) / (lit::<T>(2.0) * h);
            }
            st.push(pp);
            st.push(pm);
        }
        Ok((p, st, jac))
    }

    /// Pullback metric `g_ab(xi)` from an ambient Jacobian at the image point.
    pub fn metric_from_jacobian(&self, p: &[T], jac: &[T]) -> Vec<T> {
        let n = self.model.dimension;
        let a = self.model.ambient_dim();
        let cols: Vec<Vec<T>> = (0..n).map(|c| (0..a).map(|r| jac[r * n + c]).collect()).collect();
        let mut g = vec![T::zero(); n * n];
        for i in 0..n {
            for j in i..n {
                let v = self.model.inner(p, &cols[i], &cols[j]);
                g[i * n + j] = v;
                g[j * n + i] = v;
            }
        }
        g
    }

    pub fn metric_at(&self, xi: &[T]) -> Result<Vec<T>> {
        let (p, _, jac) = self.stencil(xi, self.model.tolerances.fd_step)?;
        Ok(self.metric_from_jacobian(&p, &jac))
    }
}

/// Builds the normal chart at `y` with a frame drawn from `seed`.
pub fn make_normal_chart<T: Real>(model: &Arc<ManifoldModel<T>>, y: &[T], r: T, seed: u64) -> Result<NormalChart<T>> {
    if r >= model.injectivity_floor {
        return Err(Error::Domain(format!(
            "chart radius {r} not below injectivity floor {}",
            model.injectivity_floor
        )));
    }
    Ok(NormalChart {
        center: y.to_vec(),
        radius: r,
        frame: seeded_frame(model, y, seed),
        model: model.clone(),
    })
}

/// Normal chart with the canonical frame.
pub fn make_canonical_chart<T: Real>(model: &Arc<ManifoldModel<T>>, y: &[T], r: T) -> Result<NormalChart<T>> {
    if r >= model.injectivity_floor {
        return Err(Error::Domain(format!("chart radius {r} not below injectivity floor")));
    }
    Ok(NormalChart {
        center: y.to_vec(),
        radius: r,
        frame: canonical_frame(model, y),
        model: model.clone(),
    })
}

/// Metric samples on a quadrature grid.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricField<T> {
    pub dimension: usize,
    pub values: Vec<T>,
    pub inverse: Vec<T>,
    pub sqrt_det: Vec<T>,
}

impl<T: Real> MetricField<T> {
    pub fn from_values(dimension: usize, values: Vec<T>) -> Result<Self> {
        let n = dimension;
        let count = values.len() / (n * n);
        let mut inverse = Vec::with_capacity(values.len());
        let mut sqrt_det = Vec::with_capacity(count);
        for k in 0..count {
            let g = &values[k * n * n..(k + 1) * n * n];
            let ev = linalg::sym_eigenvalues(g, n);
            if !(ev[0] >= lit(0.5)) {
                return Err(Error::numerical(
                    format!("metric sample {k} has smallest eigenvalue {} below 1/2", ev[0]),
                    to_f64(ev[0]),
                ));
            }
            let inv = linalg::inverse(g, n).ok_or_else(|| Error::numerical("singular metric sample", 0.0))?;
            let prod = linalg::matmul(g, &inv, n, n, n);
            let defect = linalg::identity_defect(&prod, n);
            if defect > lit(1e-8) {
                return Err(Error::numerical("metric inverse inaccurate", to_f64(defect)));
            }
            inverse.extend_from_slice(&inv);
            sqrt_det.push(linalg::determinant(g, n).sqrt());
        }
        Ok(MetricField {
            dimension,
            values,
            inverse,
            sqrt_det,
        })
    }

    pub fn len(&self) -> usize {
        self.sqrt_det.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sqrt_det.is_empty()
    }

    pub fn at(&self, k: usize) -> &[T] {
        let n2 = self.dimension * self.dimension;
        &self.values[k * n2..(k + 1) * n2]
    }

    pub fn inverse_at(&self, k: usize) -> &[T] {
        let n2 = self.dimension * self.dimension;
        &self.inverse[k * n2..(k + 1) * n2]
    }

    /// Largest entrywise deviation from the identity over all samples.
    pub fn flatness_defect(&self) -> T {
        (0..self.len())
            .map(|k| linalg::identity_defect(self.at(k), self.dimension))
            .fold(T::zero(), T::max)
    }

    pub fn min_eigenvalue(&self) -> T {
        (0..self.len())
            .map(|k| linalg::sym_eigenvalues(self.at(k), self.dimension)[0])
            .fold(T::infinity(), T::min)
    }
}

/// Pulls the model metric back to the grid nodes of `chart`.
pub fn pullback_metric<T: Real>(chart: &NormalChart<T>, grid: &QuadratureGrid<T>) -> Result<MetricField<T>> {
    if grid.radius >= chart.radius + T::epsilon() {
        return Err(Error::Domain("quadrature grid exceeds chart radius".into()));
    }
    let n = chart.model.dimension;
    let h = chart.model.tolerances.fd_step;
    let mut values = Vec::with_capacity(grid.len() * n * n);
    for k in 0..grid.len() {
        let (p, _, jac) = chart.stencil(grid.node(k), h)?;
        values.extend(chart.metric_from_jacobian(&p, &jac));
    }
    MetricField::from_values(n, values)
}

/// Finite-difference first derivatives of the pullback metric at `xi`,
/// `out[c][i*n+j] = d_c g_ij`.
pub fn metric_derivatives_at<T: Real>(chart: &NormalChart<T>, xi: &[T], h: T) -> Result<Vec<Vec<T>>> {
    let n = xi.len();
    let mut out = Vec::with_capacity(n);
    for c in 0..n {
        let mut xp = xi.to_vec();
        let mut xm = xi.to_vec();
        xp[c] += h;
        xm[c] -= h;
        let gp = chart.metric_at(&xp)?;
        let gm = chart.metric_at(&xm)?;
        out.push(gp.iter().zip(&gm).map(|(a, b)| (*a - *b) / (lit::<T>(2.0) * h)).collect());
    }
    Ok(out)
}

/// Sup norms of the first and second derivatives of `e_y^{-1} o e_x` sampled on a ball.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TransitionBounds<T> {
    pub first: T,
    pub second: T,
}

pub fn transition_derivative_bounds<T: Real>(
    from: &NormalChart<T>,
    to: &NormalChart<T>,
    sample_radius: T,
    samples_per_axis: usize,
) -> Result<TransitionBounds<T>> {
    let n = from.model.dimension;
    let h = lit::<T>(1e-3);
    let m = samples_per_axis.max(2);
    let map = |xi: &[T]| -> Result<Vec<T>> { to.inverse(&from.forward(xi)?) };
    let mut first = T::zero();
    let mut second = T::zero();
    for flat in 0..m.pow(n as u32) {
        let mut rem = flat;
        let mut xi = vec![T::zero(); n];
        for c in xi.iter_mut() {
            let i = rem % m;
            rem /= m;
            *c = sample_radius * (lit::<T>(-1.0) + lit::<T>(2.0) * from_usize::<T>(i) / from_usize(m - 1));
        }
        if norm(&xi) > sample_radius {
            continue;
        }
        let f0 = map(&xi)?;
        for a in 0..n {
            let mut xp = xi.clone();
            let mut xm = xi.clone();
            xp[a] += h;
            xm[a] -= h;
            let fp = map(&xp)?;
            let fm = map(&xm)?;
            for r in 0..n {
                first = first.max(((fp[r] - fm[r]) / (lit::<T>(2.0) * h)).abs());
                second = second.max(((fp[r] - lit::<T>(2.0) * f0[r] + fm[r]) / (h * h)).abs());
            }
        }
    }
    Ok(TransitionBounds { first, second })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hyp() -> Arc<ManifoldModel<f64>> {
        Arc::new(ManifoldModel::hyperbolic(2).unwrap())
    }

    fn perturbed() -> Arc<ManifoldModel<f64>> {
        Arc::new(ManifoldModel::perturbed_euclidean(2, MetricBump::isotropic(vec![0.0, 0.0], 1.5, 0.15)).unwrap())
    }

    #[test]
    fn euclidean_exp_is_translation() {
        let m = ManifoldModel::<f64>::euclidean(2).unwrap();
        let f = canonical_frame(&m, &[0.0, 0.0]);
        assert_eq!(exp_map(&m, &[0.0, 0.0], &f, &[1.0, 2.0]).unwrap(), vec![1.0, 2.0]);
        assert_eq!(log_map(&m, &[0.0, 0.0], &f, &[3.0, 4.0]).unwrap(), vec![3.0, 4.0]);
    }

    #[test]
    fn exp_of_zero_is_base_point() {
        for m in [hyp(), perturbed()] {
            let x = m.from_global(&[0.3, -0.2]);
            let f = seeded_frame(&m, &x, 3);
            let y = exp_map(&m, &x, &f, &[0.0, 0.0]).unwrap();
            assert!(dist(&x, &y) < 1e-14);
            let v = log_map(&m, &x, &f, &x).unwrap();
            assert!(norm(&v) < 1e-12);
        }
    }

    #[test]
    fn hyperboloid_ode_matches_closed_form() {
        // closed form along the first axis: (cosh s, sinh s, 0)
        let m = hyp();
        for s in [0.1, 1.0, 2.5] {
            let out = integrate_geodesic(&m, &[1.0, 0.0, 0.0], &[0.0, s, 0.0], 400);
            assert!((out[0] - f64::cosh(s)).abs() < 1e-6);
            assert!((out[1] - f64::sinh(s)).abs() < 1e-6);
            assert!(out[2].abs() < 1e-12);
        }
    }

    #[test]
    fn perturbed_log_away_from_bump_is_difference() {
        let m = perturbed();
        let x = [5.0, 5.0];
        let q = [6.0, 4.5];
        let f = canonical_frame(&m, &x);
        let v = log_map(&m, &x, &f, &q).unwrap();
        assert!((v[0] - 1.0).abs() < 1e-6 && (v[1] + 0.5).abs() < 1e-6);
    }

    #[test]
    fn perturbed_round_trip_through_bump() {
        let m = perturbed();
        let x = [-1.0, 0.2];
        let f = seeded_frame(&m, &x, 11);
        let v = [1.3, -0.4];
        let q = exp_map(&m, &x, &f, &v).unwrap();
        let back = log_map(&m, &x, &f, &q).unwrap();
        assert!(dist(&v, &back) < 1e-8);
    }

    #[test]
    fn radial_isometry_of_normal_coordinates() {
        for m in [hyp(), perturbed()] {
            let y = m.from_global(&[0.4, 0.1]);
            let chart = make_normal_chart(&m, &y, 1.0, 5).unwrap();
            let xi = [0.3 * 0.6, 0.3 * 0.8];
            let q = chart.forward(&xi).unwrap();
            assert!((m.distance(&q, &y) - 0.3).abs() < 1e-6);
        }
    }

    #[test]
    fn seeded_frames_are_deterministic_and_orthonormal() {
        let m = perturbed();
        let a = seeded_frame(&m, &[0.5, 0.5], 9);
        let b = seeded_frame(&m, &[0.5, 0.5], 9);
        assert_eq!(a, b);
        assert!(a.orthonormality_defect(&m) < 1e-10);
    }

    #[test]
    fn conformal_curvature_matches_formula() {
        // For g = λ I with λ = 1 + a ψ, K = -Δ(log λ) / (2 λ).
        let m = perturbed();
        let x = [0.7, 0.3];
        let k = m.sectional_curvature(&x, 0, 1);
        let loglam = |p: &[f64]| m.metric_tensor(p)[0].ln();
        let h = 1e-4;
        let mut lap = 0.0;
        for a in 0..2 {
            let mut xp = x;
            let mut xm = x;
            xp[a] += h;
            xm[a] -= h;
            lap += (loglam(&xp) - 2.0 * loglam(&x) + loglam(&xm)) / (h * h);
        }
        let expected = -lap / (2.0 * m.metric_tensor(&x)[0]);
        assert!((k - expected).abs() < 1e-5, "{k} vs {expected}");
    }

    #[test]
    fn perturbed_floor_is_finite_and_large_enough() {
        let m = perturbed();
        assert!(m.injectivity_floor < INJECTIVITY_CAP);
        assert!(m.injectivity_floor > 4.0);
    }

    #[test]
    fn rejects_too_negative_bump() {
        let b = MetricBump::isotropic(vec![0.0, 0.0], 1.0, -0.7);
        assert!(ManifoldModel::<f64>::perturbed_euclidean(2, b).is_err());
    }

    #[test]
    fn exp_rejects_long_vectors() {
        let m = perturbed();
        let f = canonical_frame(&m, &[0.0, 0.0]);
        let v = [m.injectivity_floor, 0.0];
        assert!(matches!(exp_map(&m, &[0.0, 0.0], &f, &v), Err(Error::Domain(_))));
    }
}
