//! Scenario configs, sequence generators, end-to-end runs and report files.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::covering::{build_net, Ball, DiscreteNet};
use crate::decomposition::{extract_profiles, translation_deviation, verify_decoupling, verify_energy_identities, DecompositionReport, ExtractionParams};
use crate::error::{Error, Result};
use crate::funcspace::{pullback_along, Atlas, FunctionSequence, ManifoldFunction};
use crate::geometry::{minkowski, ManifoldModel, MetricBump, ModelKind};
use crate::infinity::GluedDocument;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ManifoldKind {
    Euclidean,
    Hyperbolic,
    PerturbedEuclidean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationSpec {
    pub center: Vec<f64>,
    pub radius: f64,
    pub amplitude: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifoldSpec {
    pub kind: ManifoldKind,
    #[serde(default = "default_dimension")]
    pub dimension: usize,
    #[serde(default)]
    pub perturbation: Option<PerturbationSpec>,
}

fn default_dimension() -> usize {
    2
}

/// Translation lattice `{Σ n_a b_a}` used as the net in cocompact mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatticeSpec {
    pub basis: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetSpec {
    /// The net region is the union of balls around every generator center, with this
    /// much room beyond each bump's support.
    #[serde(default = "default_padding")]
    pub padding: f64,
    #[serde(default)]
    pub lattice: Option<LatticeSpec>,
}

fn default_padding() -> f64 {
    2.5
}

impl Default for NetSpec {
    fn default() -> Self {
        NetSpec {
            padding: default_padding(),
            lattice: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeneratorKind {
    Fixed,
    RunawayBump,
    MultiBump,
    Spreading,
    Oscillating,
    LatticeCocompact,
}

/// `A (1 - d²/R²)³_+` around `start + k·step` (global coordinates), `k = 0, 1, ...`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BumpSpec {
    pub radius: f64,
    #[serde(default = "one")]
    pub amplitude: f64,
    pub start: Vec<f64>,
    #[serde(default)]
    pub step: Option<Vec<f64>>,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceSpec {
    pub generator: GeneratorKind,
    pub bumps: Vec<BumpSpec>,
    /// Spreading scale `s_k = 2^{rate (k-1)}`.
    #[serde(default = "default_rate")]
    pub spreading_rate: f64,
    /// Oscillation frequency `ω` in `sin(ω k x_1) b(x) / (ω k)`.
    #[serde(default = "one")]
    pub frequency: f64,
    /// Move centers onto the nearest net point.
    #[serde(default = "yes")]
    pub snap_to_net: bool,
    #[serde(default = "default_bound")]
    pub h12_bound: f64,
}

impl Default for OutputSpec {
    fn default() -> Self {
        OutputSpec {
            dir: None,
            glued_documents: true,
        }
    }
}

fn default_rate() -> f64 {
    1.0 / 3.0
}

fn yes() -> bool {
    true
}

fn default_bound() -> f64 {
    100.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    #[serde(default)]
    pub dir: Option<PathBuf>,
    #[serde(default = "yes")]
    pub glued_documents: bool,
}

/// Expected outcomes turned into verdicts.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Expectations {
    #[serde(default)]
    pub bubbles: Option<usize>,
    #[serde(default)]
    pub vanishing: Option<bool>,
    /// Compare recovered profiles with the generator bumps.
    #[serde(default)]
    pub profile_recovery: bool,
    #[serde(default)]
    pub flat_at_infinity: bool,
    #[serde(default)]
    pub cocompact_identity: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub manifold: ManifoldSpec,
    #[serde(default)]
    pub net: NetSpec,
    pub sequence: SequenceSpec,
    #[serde(default)]
    pub params: ExtractionParams<f64>,
    #[serde(default)]
    pub expect: Expectations,
    #[serde(default)]
    pub output: OutputSpec,
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ScenarioConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("line {}, column {}: {e}", e.line(), e.column())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.manifold.dimension;
        self.params.validate(n)?;
        if self.sequence.bumps.is_empty() {
            return Err(Error::Config("sequence needs at least one bump".into()));
        }
        for (i, b) in self.sequence.bumps.iter().enumerate() {
            if b.start.len() != n || b.step.as_ref().is_some_and(|s| s.len() != n) {
                return Err(Error::Config(format!("bump {i} has coordinates of the wrong dimension")));
            }
            if !(b.radius > 0.0 && b.radius < self.params.rho) {
                return Err(Error::Config(format!("bump {i} radius must lie in (0, rho)")));
            }
        }
        let moving = self.sequence.bumps.iter().filter(|b| b.step.is_some()).count();
        match self.sequence.generator {
            GeneratorKind::RunawayBump | GeneratorKind::LatticeCocompact if self.sequence.bumps.len() != 1 || moving != 1 => {
                return Err(Error::Config("runaway generators take exactly one moving bump".into()));
            }
            GeneratorKind::Spreading | GeneratorKind::Oscillating if self.manifold.kind == ManifoldKind::Hyperbolic => {
                return Err(Error::Config("spreading and oscillating generators need a flat model".into()));
            }
            GeneratorKind::LatticeCocompact if self.net.lattice.is_none() => {
                return Err(Error::Config("lattice-cocompact needs net.lattice".into()));
            }
            _ => {}
        }
        match (self.manifold.kind, &self.manifold.perturbation) {
            (ManifoldKind::PerturbedEuclidean, None) => return Err(Error::Config("perturbed-euclidean needs a perturbation".into())),
            (ManifoldKind::PerturbedEuclidean, Some(p)) if p.center.len() != n => {
                return Err(Error::Config("perturbation center has the wrong dimension".into()))
            }
            (ManifoldKind::Euclidean | ManifoldKind::Hyperbolic, Some(_)) => {
                return Err(Error::Config("only perturbed-euclidean takes a perturbation".into()))
            }
            _ => {}
        }
        if let Some(l) = &self.net.lattice {
            if self.manifold.kind == ManifoldKind::Hyperbolic || l.basis.len() != n || l.basis.iter().any(|b| b.len() != n) {
                return Err(Error::Config(format!("lattice needs {n} basis vectors of length {n} in a flat model")));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

pub fn load_scenario(path: &Path) -> Result<ScenarioConfig> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    ScenarioConfig::from_json(&text).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Command-line overrides applied before a run.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub grid_res: Option<usize>,
    pub k_max: Option<usize>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ScenarioConfig) -> Result<()> {
        if let Some(s) = self.seed {
            cfg.params.seed = s;
        }
        if let Some(r) = self.grid_res {
            cfg.params.grid_res = r;
        }
        if let Some(k) = self.k_max {
            cfg.params.k_max = k;
        }
        cfg.validate()
    }
}

pub fn build_model(spec: &ManifoldSpec) -> Result<ManifoldModel<f64>> {
    match spec.kind {
        ManifoldKind::Euclidean => ManifoldModel::euclidean(spec.dimension),
        ManifoldKind::Hyperbolic => ManifoldModel::hyperbolic(spec.dimension),
        ManifoldKind::PerturbedEuclidean => {
            let p = spec.perturbation.as_ref().ok_or_else(|| Error::Config("missing perturbation".into()))?;
            ManifoldModel::perturbed_euclidean(spec.dimension, MetricBump::isotropic(p.center.clone(), p.radius, p.amplitude))
        }
    }
}

fn spread_scale(seq: &SequenceSpec, k: usize) -> f64 {
    match seq.generator {
        GeneratorKind::Spreading => 2f64.powf(seq.spreading_rate * k as f64),
        _ => 1.0,
    }
}

/// Bump centers in global coordinates for `k = 0..K`.
fn raw_centers(b: &BumpSpec, k_max: usize) -> Vec<Vec<f64>> {
    (0..k_max)
        .map(|k| match &b.step {
            Some(s) => b.start.iter().zip(s).map(|(a, d)| a + d * k as f64).collect(),
            None => b.start.clone(),
        })
        .collect()
}

fn region(cfg: &ScenarioConfig, model: &ManifoldModel<f64>) -> Vec<Ball<f64>> {
    let mut balls = Vec::new();
    for b in &cfg.sequence.bumps {
        for (k, c) in raw_centers(b, cfg.params.k_max).into_iter().enumerate() {
            let r = b.radius * spread_scale(&cfg.sequence, k) * model.metric_eigen_bounds().1.sqrt() + cfg.net.padding;
            balls.push(Ball::new(model.from_global(&c), r));
        }
    }
    balls
}

fn lattice_net(model: &ManifoldModel<f64>, lattice: &LatticeSpec, region: Vec<Ball<f64>>) -> Result<DiscreteNet<f64>> {
    let n = model.dimension;
    let basis = &lattice.basis;
    let combo = |coef: &[i64]| -> Vec<f64> { (0..n).map(|a| coef.iter().zip(basis).map(|(c, b)| *c as f64 * b[a]).sum()).collect() };
    // shortest vector and covering radius from small coefficient ranges
    let mut separation = f64::INFINITY;
    for idx in 0..5usize.pow(n as u32) {
        let coef: Vec<i64> = (0..n).map(|a| (idx / 5usize.pow(a as u32) % 5) as i64 - 2).collect();
        if coef.iter().any(|c| *c != 0) {
            separation = separation.min(crate::scalar::norm(&combo(&coef)));
        }
    }
    let samples = 12usize;
    let mut cover = 0f64;
    for idx in 0..samples.pow(n as u32) {
        let t: Vec<f64> = (0..n).map(|a| (idx / samples.pow(a as u32) % samples) as f64 / samples as f64).collect();
        let x: Vec<f64> = (0..n).map(|a| t.iter().zip(basis).map(|(c, b)| c * b[a]).sum()).collect();
        let mut best = f64::INFINITY;
        for corner in 0..2usize.pow(n as u32) {
            let coef: Vec<i64> = (0..n).map(|a| (corner >> a & 1) as i64).collect();
            best = best.min(crate::scalar::dist(&x, &combo(&coef)));
        }
        cover = cover.max(best);
    }
    let mut points = Vec::new();
    let reach: f64 = region.iter().map(|b| crate::scalar::norm(&b.center) + b.radius).fold(0.0, f64::max);
    let range = (reach / separation).ceil() as i64 + 1;
    let width = (2 * range + 1) as usize;
    for idx in 0..width.pow(n as u32) {
        let coef: Vec<i64> = (0..n).map(|a| (idx / width.pow(a as u32) % width) as i64 - range).collect();
        let x = combo(&coef);
        if region.iter().any(|b| crate::scalar::dist(&x, &b.center) < b.radius) {
            points.push(x);
        }
    }
    DiscreteNet::from_points(model, points, separation, cover * 1.0001, region)
}

/// Radial bump in the model's natural distance with an exact ambient gradient.
///
/// Flat and perturbed models use the coordinate distance; the hyperboloid uses
/// `d = acosh(-⟨x, c⟩)`.
pub fn radial_bump(model: &ManifoldModel<f64>, center: Vec<f64>, radius: f64, amplitude: f64, label: &str) -> ManifoldFunction<f64> {
    let support = Ball::new(center.clone(), radius * model.metric_eigen_bounds().1.sqrt() * 1.001);
    let r2 = radius * radius;
    if model.kind == ModelKind::Hyperbolic {
        let (cv, cg) = (center.clone(), center);
        let dist = move |x: &[f64], c: &[f64]| (-minkowski(x, c)).max(1.0).acosh();
        return ManifoldFunction::new(label, vec![support], move |x: &[f64]| {
            let t = dist(x, &cv).powi(2) / r2;
            if t < 1.0 {
                amplitude * (1.0 - t).powi(3)
            } else {
                0.0
            }
        })
        .with_gradient(move |x: &[f64]| {
            let d = dist(x, &cg);
            let t = d * d / r2;
            if t >= 1.0 {
                return vec![0.0; x.len()];
            }
            let ratio = if d < 1e-8 { 1.0 } else { d / d.sinh() };
            let s = -6.0 * amplitude / r2 * (1.0 - t).powi(2) * ratio;
            let mut g: Vec<f64> = cg.iter().map(|c| -s * c).collect();
            g[0] = s * cg[0];
            g
        });
    }
    let (cv, cg) = (center.clone(), center);
    ManifoldFunction::new(label, vec![support], move |x: &[f64]| {
        let t = crate::scalar::dist(x, &cv).powi(2) / r2;
        if t < 1.0 {
            amplitude * (1.0 - t).powi(3)
        } else {
            0.0
        }
    })
    .with_gradient(move |x: &[f64]| {
        let t = crate::scalar::dist(x, &cg).powi(2) / r2;
        if t >= 1.0 {
            return vec![0.0; x.len()];
        }
        let s = -6.0 * amplitude / r2 * (1.0 - t).powi(2);
        x.iter().zip(&cg).map(|(a, b)| s * (a - b)).collect()
    })
}

fn spreading_member(center: Vec<f64>, radius: f64, amplitude: f64, s: f64, label: String) -> ManifoldFunction<f64> {
    let n = center.len() as i32;
    let a = amplitude * s.powf(-(n as f64) / 2.0);
    let r = radius * s;
    let r2 = r * r;
    let (cv, cg) = (center.clone(), center.clone());
    ManifoldFunction::new(label, vec![Ball::new(center, r * 1.001)], move |x: &[f64]| {
        let t = crate::scalar::dist(x, &cv).powi(2) / r2;
        if t < 1.0 {
            a * (1.0 - t).powi(3)
        } else {
            0.0
        }
    })
    .with_gradient(move |x: &[f64]| {
        let t = crate::scalar::dist(x, &cg).powi(2) / r2;
        if t >= 1.0 {
            return vec![0.0; x.len()];
        }
        let s = -6.0 * a / r2 * (1.0 - t).powi(2);
        x.iter().zip(&cg).map(|(p, q)| s * (p - q)).collect()
    })
}

fn oscillating_member(bump: ManifoldFunction<f64>, omega: f64, k: usize, label: String) -> ManifoldFunction<f64> {
    let w = omega * (k + 1) as f64;
    let (bv, bg) = (bump.clone(), bump.clone());
    ManifoldFunction::new(label, bump.support.clone(), move |x: &[f64]| bv.eval(x) * (w * x[0]).sin() / w).with_gradient(move |x: &[f64]| {
        let v = bg.eval(x);
        let g = bg.ambient_gradient(x).unwrap_or_else(|| vec![0.0; x.len()]);
        let (s, c) = (w * x[0]).sin_cos();
        let mut out: Vec<f64> = g.iter().map(|gi| gi * s / w).collect();
        out[0] += v * c;
        out
    })
}

/// Everything a run needs besides the extraction itself.
pub struct Scenario {
    pub atlas: Atlas<f64>,
    pub sequence: FunctionSequence<f64>,
    /// Per bump and `k`, the ambient center actually used.
    pub centers: Vec<Vec<Vec<f64>>>,
    /// Per bump and `k`, the generator component.
    pub components: Vec<Vec<ManifoldFunction<f64>>>,
}

pub fn build_scenario(cfg: &ScenarioConfig) -> Result<Scenario> {
    let model = Arc::new(build_model(&cfg.manifold)?);
    let params = &cfg.params;
    let region = region(cfg, &model);
    let net = match &cfg.net.lattice {
        Some(l) => lattice_net(&model, l, region)?,
        None => build_net(&model, &region, params.rho, params.rho_hat, params.seed)?,
    };
    let net = Arc::new(net);
    let atlas = Atlas::new(model.clone(), net.clone(), params.grid_res, params.seed)?;
    let k_max = params.k_max;
    let seq = &cfg.sequence;
    let mut centers = Vec::new();
    let mut components = Vec::new();
    for (j, b) in cfg.sequence.bumps.iter().enumerate() {
        let mut cs = Vec::with_capacity(k_max);
        let mut fs = Vec::with_capacity(k_max);
        for (k, c) in raw_centers(b, k_max).into_iter().enumerate() {
            let mut c = model.from_global(&c);
            if seq.snap_to_net {
                let (i, _) = net.nearest(&model, &c).ok_or_else(|| Error::Construction("empty net".into()))?;
                c = net.centers[i].clone();
            }
            let label = format!("bump {j} at k = {}", k + 1);
            let f = match seq.generator {
                GeneratorKind::Spreading => spreading_member(c.clone(), b.radius, b.amplitude, spread_scale(seq, k), label),
                GeneratorKind::Oscillating => oscillating_member(radial_bump(&model, c.clone(), b.radius, b.amplitude, &label), seq.frequency, k, label),
                _ => radial_bump(&model, c.clone(), b.radius, b.amplitude, &label),
            };
            cs.push(c);
            fs.push(f);
        }
        centers.push(cs);
        components.push(fs);
    }
    let members: Vec<ManifoldFunction<f64>> = (0..k_max)
        .map(|k| {
            components
                .iter()
                .skip(1)
                .fold(components[0][k].clone(), |acc, f| acc.combine(1.0, &f[k], 1.0, format!("u[{}]", k + 1)))
        })
        .collect();
    let sequence = FunctionSequence::measured(&atlas, members, cfg.name.clone(), seq.h12_bound)?;
    Ok(Scenario {
        atlas,
        sequence,
        centers,
        components,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub name: String,
    pub passed: bool,
    pub value: f64,
    pub threshold: f64,
    pub detail: String,
}

impl Verdict {
    fn at_most(name: &str, value: f64, threshold: f64, detail: impl Into<String>) -> Self {
        Verdict {
            name: name.into(),
            passed: value <= threshold,
            value,
            threshold,
            detail: detail.into(),
        }
    }

    fn at_least(name: &str, value: f64, threshold: f64, detail: impl Into<String>) -> Self {
        Verdict {
            name: name.into(),
            passed: value >= threshold,
            value,
            threshold,
            detail: detail.into(),
        }
    }

    fn flag(name: &str, passed: bool, detail: impl Into<String>) -> Self {
        Verdict {
            name: name.into(),
            passed,
            value: if passed { 1.0 } else { 0.0 },
            threshold: 1.0,
            detail: detail.into(),
        }
    }
}

/// Contents of `report.json`.
#[derive(Clone, Debug, Serialize)]
pub struct ReportFile {
    pub config: ScenarioConfig,
    pub config_hash: String,
    pub seed: u64,
    pub passed: bool,
    pub errors: Vec<String>,
    pub verdicts: Vec<Verdict>,
    pub report: Option<DecompositionReport<f64>>,
}

/// A finished run: the report file plus artifacts kept out of it.
pub struct RunOutput {
    pub file: ReportFile,
    pub glued: Vec<GluedDocument>,
    pub seconds: f64,
}

/// Builds the scenario, extracts profiles and evaluates every applicable verdict.
pub fn run_decomposition(cfg: &ScenarioConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let started = Instant::now();
    let scenario = build_scenario(cfg)?;
    let mut errors = Vec::new();
    let mut verdicts = Vec::new();
    let mut glued = Vec::new();
    let report = match extract_profiles(&scenario.atlas, &scenario.sequence, &cfg.params) {
        Ok(mut report) => {
            let atlas = &scenario.atlas;
            match verify_energy_identities(atlas, &report, &scenario.sequence) {
                Ok(v) => report.energy = Some(v),
                Err(e) => errors.push(format!("energy identities: {e}")),
            }
            if !report.bubbles.is_empty() {
                match verify_decoupling(atlas, &report) {
                    Ok(v) => report.decoupling = Some(v),
                    Err(e) => errors.push(format!("decoupling: {e}")),
                }
            }
            verdicts = evaluate_verdicts(cfg, &scenario, &report, &mut errors);
            if cfg.output.glued_documents {
                glued = report.runtime.bubbles.iter().map(|b| b.manifold.document()).collect();
            }
            Some(report)
        }
        Err(e @ Error::Config(_)) => return Err(e),
        Err(e) => {
            errors.push(format!("extraction: {e}"));
            None
        }
    };
    let passed = errors.is_empty() && verdicts.iter().all(|v| v.passed);
    Ok(RunOutput {
        file: ReportFile {
            config: cfg.clone(),
            config_hash: cfg.hash(),
            seed: cfg.params.seed,
            passed,
            errors,
            verdicts,
            report,
        },
        glued,
        seconds: started.elapsed().as_secs_f64(),
    })
}

fn evaluate_verdicts(cfg: &ScenarioConfig, sc: &Scenario, report: &DecompositionReport<f64>, errors: &mut Vec<String>) -> Vec<Verdict> {
    let atlas = &sc.atlas;
    let mut out = Vec::new();
    let k_last = report.k_max - 1;
    if let Some(e) = &report.energy {
        for b in &e.bubbles {
            out.push(Verdict::at_most("projection-identity", b.pairing_discrepancy, 0.02, format!("bubble {}", b.stage)));
            out.push(Verdict::at_most("length-identity", b.concentration_discrepancy, 0.02, format!("bubble {}", b.stage)));
        }
        out.push(Verdict::at_least("plancherel", e.plancherel_relative, -0.01, "slack relative to limsup of squared norms"));
        out.push(Verdict::at_most("brezis-lieb", e.brezis_lieb_discrepancy, 0.03, "relative to max_k of the L^p mass"));
    }
    let lp = &report.stage_lp_at_kmax;
    let decreasing = lp.windows(2).all(|w| w[1] < w[0]);
    out.push(Verdict::flag("residual-monotone", decreasing, format!("{lp:?}")));
    for b in &report.bubbles {
        out.push(Verdict::flag(
            "greedy-dominance",
            b.dominance_holds,
            format!("bubble {}: modulus {} vs best candidate {}", b.stage, b.modulus_estimate, b.best_candidate_estimate),
        ));
    }
    if let Some(n) = cfg.expect.bubbles {
        out.push(Verdict::flag(
            "bubble-count",
            report.bubbles.len() == n,
            format!("expected {n}, found {} ({})", report.bubbles.len(), report.stop_reason),
        ));
    }
    if let Some(v) = cfg.expect.vanishing {
        let van = &report.vanishing;
        out.push(Verdict::flag("vanishing-class", van.vanishing == v, format!("expected {v}, classified {}", van.vanishing)));
        let lp = &van.lp_norms;
        if v {
            out.push(Verdict::at_most("lp-decay", lp[k_last] / lp[0], 0.1, "L^p norm at K_max over the first member"));
        } else {
            let (lo, hi) = van.sup_mass_trace.iter().fold((f64::INFINITY, 0f64), |(a, b), m| (a.min(*m), b.max(*m)));
            if matches!(cfg.sequence.generator, GeneratorKind::RunawayBump | GeneratorKind::LatticeCocompact) {
                out.push(Verdict::at_most("sup-mass-constant", hi / lo - 1.0, 0.02, "relative spread of the sup local mass"));
            }
        }
    }
    if let Some(d) = &report.decoupling {
        if report.bubbles.len() > 1 {
            out.push(Verdict::at_most("decoupling-overlap", d.off_diagonal_ratio, 0.01, "off-diagonal over min diagonal at K_max"));
        }
        out.push(Verdict::flag("probe-decay", d.probes_decay, format!("{:?}", d.probe_traces)));
    }
    if cfg.expect.profile_recovery {
        match profile_recovery(sc, report) {
            Ok(rel) => {
                for (n, r) in rel.iter().enumerate() {
                    out.push(Verdict::at_most("profile-recovery", *r, 0.02, format!("bubble {}", n + 1)));
                }
            }
            Err(e) => errors.push(format!("profile recovery: {e}")),
        }
        let initial = report.vanishing.lp_norms[k_last];
        let last = *lp.last().expect("stage entry");
        out.push(Verdict::at_most("residual-fraction", last / initial, 0.05, "final residual L^p over initial"));
    }
    if cfg.expect.flat_at_infinity {
        for b in &report.bubbles {
            out.push(Verdict::at_most("flat-at-infinity", b.limit_metric_flatness, 1e-3, format!("bubble {}", b.stage)));
        }
    }
    if cfg.expect.cocompact_identity {
        for (n, b) in report.runtime.bubbles.iter().enumerate() {
            let osc = b.summary.transition_full_residual.unwrap_or(b.summary.transition_residual);
            out.push(Verdict::at_most("transitions-constant", osc, 1e-12, format!("bubble {}", n + 1)));
            let mut worst = 0f64;
            for &k in &b.ts.retained {
                match translation_deviation(atlas, b, k, k_last) {
                    Ok(d) => worst = worst.max(d),
                    Err(e) => errors.push(format!("cocompact identity: {e}")),
                }
            }
            out.push(Verdict::at_most("cocompact-identity", worst, 1e-8, format!("bubble {}", n + 1)));
        }
    }
    out
}

/// Relative `H^{1,2}` distance between each bubble's core-chart profile and the nearest
/// generator bump pulled back to the same chart at `K_max`.
pub fn profile_recovery(sc: &Scenario, report: &DecompositionReport<f64>) -> Result<Vec<f64>> {
    let atlas = &sc.atlas;
    let k_last = report.k_max - 1;
    let mut out = Vec::new();
    for b in &report.runtime.bubbles {
        let core = b.ts.cores[k_last];
        let y = &atlas.net.centers[core];
        let j = (0..sc.centers.len())
            .min_by(|a, c| {
                let da = atlas.model.distance(y, &sc.centers[*a][k_last]);
                let dc = atlas.model.distance(y, &sc.centers[*c][k_last]);
                da.partial_cmp(&dc).expect("finite")
            })
            .ok_or_else(|| Error::Domain("scenario without bumps".into()))?;
        let truth = pullback_along(atlas, &sc.components[j][k_last], &atlas.chart(core))?;
        out.push(b.profile.locals[0].relative_h12_distance(&truth));
    }
    Ok(out)
}

/// Output directory: explicit flag, then `DECOMPOSE_OUT`, then the config, then `out`.
pub fn output_dir(flag: Option<&Path>, cfg: &ScenarioConfig) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    if let Some(p) = std::env::var_os("DECOMPOSE_OUT").filter(|p| !p.is_empty()) {
        return PathBuf::from(p);
    }
    cfg.output.dir.clone().unwrap_or_else(|| PathBuf::from("out"))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Serialized `report.json` payload.
pub fn report_json(file: &ReportFile) -> String {
    serde_json::to_string_pretty(file).expect("report serializes")
}

/// `traces.csv` with columns `k, stage, lp_residual, h12_residual`.
pub fn traces_csv(file: &ReportFile) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if let Some(r) = &file.report {
        for row in &r.traces {
            w.serialize(row).map_err(|e| Error::Config(format!("csv: {e}")))?;
        }
    } else {
        w.write_record(["k", "stage", "lp_residual", "h12_residual"]).map_err(|e| Error::Config(format!("csv: {e}")))?;
    }
    w.into_inner().map_err(|e| Error::Config(format!("csv: {e}")))
}

/// Writes `report.json`, `traces.csv`, `glued_<n>.json` and `timing.json` into `dir`.
pub fn emit_report(run: &RunOutput, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut written = Vec::new();
    let report = dir.join("report.json");
    write(&report, report_json(&run.file).as_bytes())?;
    written.push(report);
    let traces = dir.join("traces.csv");
    write(&traces, &traces_csv(&run.file)?)?;
    written.push(traces);
    for (n, doc) in run.glued.iter().enumerate() {
        let p = dir.join(format!("glued_{}.json", n + 1));
        write(&p, serde_json::to_string(doc).expect("document serializes").as_bytes())?;
        written.push(p);
    }
    let timing = dir.join("timing.json");
    write(&timing, serde_json::json!({ "seconds": run.seconds }).to_string().as_bytes())?;
    written.push(timing);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "name": "minimal",
        "manifold": {"kind": "euclidean"},
        "sequence": {"generator": "fixed", "bumps": [{"radius": 0.25, "start": [0.0, 0.0]}]}
    }"#;

    #[test]
    fn defaults_are_filled() {
        let c = ScenarioConfig::from_json(MINIMAL).unwrap();
        assert_eq!(c.params.i_max, 12);
        assert_eq!(c.params.grid_res, 64);
        assert_eq!(c.params.k_max, 48);
        assert_eq!(c.manifold.dimension, 2);
        let again = ScenarioConfig::from_json(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(c, again);
        assert_eq!(c.hash(), again.hash());
    }

    #[test]
    fn unknown_keys_and_bad_exponent_rejected() {
        let extra = MINIMAL.replacen("\"name\"", "\"colour\": 1, \"name\"", 1);
        let e = ScenarioConfig::from_json(&extra).unwrap_err().to_string();
        assert!(e.contains("colour") && e.contains("line"), "{e}");
        let p2 = MINIMAL.replacen("\"name\"", "\"params\": {\"p\": 2.0}, \"name\"", 1);
        let e = ScenarioConfig::from_json(&p2).unwrap_err().to_string();
        assert!(e.contains("(2, ∞)") && e.contains("N = 2"), "{e}");
    }

    #[test]
    fn hyperbolic_bump_gradient_matches_differences() {
        let m = ManifoldModel::<f64>::hyperbolic(2).unwrap();
        let c = m.from_global(&[0.3, -0.2]);
        let f = radial_bump(&m, c.clone(), 0.4, 1.3, "b");
        let x = m.from_global(&[0.45, -0.1]);
        let g = f.ambient_gradient(&x).unwrap();
        // directional derivative along a tangent vector of the hyperboloid
        let v = m.project_tangent(&x, &[0.1, 0.7, -0.4]);
        let h = 1e-6;
        let xp = m.exp_ambient(&x, &v.iter().map(|a| a * h).collect::<Vec<_>>()).unwrap();
        let xm = m.exp_ambient(&x, &v.iter().map(|a| -a * h).collect::<Vec<_>>()).unwrap();
        let fd = (f.eval(&xp) - f.eval(&xm)) / (2.0 * h);
        let an: f64 = g.iter().zip(&v).map(|(a, b)| a * b).sum();
        assert!((fd - an).abs() < 1e-6 * (1.0 + an.abs()), "{fd} vs {an}");
        assert!((f.eval(&c) - 1.3).abs() < 1e-12);
    }

    #[test]
    fn lattice_net_has_exact_spacing() {
        let m = ManifoldModel::<f64>::euclidean(2).unwrap();
        let l = LatticeSpec {
            basis: vec![vec![0.4, 0.0], vec![0.0, 0.4]],
        };
        let net = lattice_net(&m, &l, vec![Ball::new(vec![0.0, 0.0], 1.0)]).unwrap();
        assert!((net.separation - 0.4).abs() < 1e-12);
        assert!((net.cover_radius - 0.4 / 2f64.sqrt()).abs() < 0.02);
        assert!(net.index_of(&m, &[0.8, -0.4], 1e-9).is_some());
    }

    #[test]
    fn output_dir_priority() {
        let mut c = ScenarioConfig::from_json(MINIMAL).unwrap();
        assert_eq!(output_dir(Some(Path::new("flag")), &c), PathBuf::from("flag"));
        if std::env::var_os("DECOMPOSE_OUT").is_none() {
            assert_eq!(output_dir(None, &c), PathBuf::from("out"));
            c.output.dir = Some("cfg".into());
            assert_eq!(output_dir(None, &c), PathBuf::from("cfg"));
        }
    }
}
