//! AECM fitting of skew-t factor-analyzer mixtures.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::distributions::{gh_sample_with, sdb_sample_with, GhKernel, GhSkewTParams, ScaleMatrix, SdbComponentParams, SdbKernel};
use crate::error::{Error, Result};
use crate::estep::{evaluate_with_engine, gh_posterior, moments_from_evaluation, symmetric_moments, EStepMoments, MomentConfig, OrthantEngine};
use crate::factor::{constrained_update, param_count, CovarianceStructure, FactorCovariance, GroupScatter};
use crate::special::{ln_gamma, solve_nu_detailed, NuSolution, NU_BRACKET};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Sdb,
    Gh,
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::Sdb => "sdb",
            Family::Gh => "gh",
        })
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sdb" => Ok(Family::Sdb),
            "gh" => Ok(Family::Gh),
            other => Err(Error::Invalid(format!("unknown family '{other}' (expected sdb or gh)"))),
        }
    }
}

/// Parameters of one mixture component. For the SDB family `cov` is the conditional
/// covariance of `X` given the latent variables and `skew` is `delta`; for the GH
/// family `cov` is the scale `Sigma` and `skew` is `alpha`.
#[derive(Debug, Clone)]
pub struct Component {
    pub mu: DVector<f64>,
    pub skew: DVector<f64>,
    pub cov: FactorCovariance,
    pub nu: f64,
}

impl Component {
    pub fn sdb(&self) -> Result<SdbComponentParams> {
        SdbComponentParams::new(self.mu.clone(), self.skew.clone(), self.cov.clone(), self.nu)
    }

    pub fn gh(&self) -> Result<GhSkewTParams> {
        GhSkewTParams::new(self.mu.clone(), ScaleMatrix::Factor(self.cov.clone()), self.skew.clone(), self.nu)
    }
}

#[derive(Debug, Clone)]
pub struct MixtureModel {
    pub family: Family,
    pub structure: CovarianceStructure,
    pub pi: Vec<f64>,
    pub components: Vec<Component>,
}

impl MixtureModel {
    pub fn g(&self) -> usize {
        self.components.len()
    }

    pub fn p(&self) -> usize {
        self.components[0].mu.len()
    }

    pub fn q(&self) -> usize {
        self.components[0].cov.q()
    }

    pub fn validate(&self) -> Result<()> {
        if self.components.is_empty() || self.pi.len() != self.components.len() {
            return Err(Error::domain("need one mixing proportion per component"));
        }
        if self.pi.iter().any(|&w| !(w > 0.0)) || (self.pi.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::domain("mixing proportions must be positive and sum to one"));
        }
        let (p, q) = (self.p(), self.q());
        for c in &self.components {
            if c.cov.p() != p || c.cov.q() != q || c.mu.len() != p || c.skew.len() != p {
                return Err(Error::domain("components differ in dimension"));
            }
            match self.family {
                Family::Sdb => c.sdb().map(|_| ())?,
                Family::Gh => c.gh().map(|_| ())?,
            }
        }
        Ok(())
    }

    /// Free parameters: covariance structure, mixing proportions, locations, skewness
    /// and degrees of freedom.
    pub fn n_free_params(&self) -> Result<usize> {
        free_param_count(self.family, self.structure, self.p(), self.q(), self.g())
    }

    /// Log density of each component at one point.
    pub fn component_log_densities(&self, x: &DVector<f64>) -> Result<Vec<f64>> {
        let kernels = Kernels::new(self, &MomentConfig::default())?;
        (0..self.g()).map(|g| kernels.exact(g, x, false).map(|v| v.0)).collect()
    }
}

pub fn free_param_count(family: Family, structure: CovarianceStructure, p: usize, q: usize, g: usize) -> Result<usize> {
    let _ = family;
    Ok(param_count(structure, p, q, g)? + (g - 1) + 2 * g * p + g)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Convergence {
    Aitken,
    Relative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMethod {
    Kmeans,
    RandomSoft,
    Given,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NuUpdate {
    /// Responsibility-weighted mean within each component.
    Weighted,
    /// Plain mean over all observations.
    Pooled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Weighting {
    /// Group sums weighted by responsibilities.
    Responsibility,
    /// Unweighted sums over all observations, normalized by `n`.
    Unweighted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub max_iter: usize,
    pub tol: f64,
    pub convergence: Convergence,
    pub init: InitMethod,
    pub n_starts: usize,
    pub seed: u64,
    pub moments: MomentConfig,
    pub nu_update: NuUpdate,
    pub nu_bracket: (f64, f64),
    pub weighting: Weighting,
    /// Noise variances are kept above this fraction of the median column variance.
    pub psi_floor: f64,
    /// Fresh initializations tried when a component empties.
    pub max_restarts: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            max_iter: 500,
            tol: 1e-5,
            convergence: Convergence::Aitken,
            init: InitMethod::Kmeans,
            n_starts: 1,
            seed: 0,
            moments: MomentConfig::default(),
            nu_update: NuUpdate::Weighted,
            nu_bracket: NU_BRACKET,
            weighting: Weighting::Responsibility,
            psi_floor: 1e-6,
            max_restarts: 3,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iter == 0 || self.n_starts == 0 {
            return Err(Error::Invalid("max_iter and n_starts must be positive".into()));
        }
        if !(self.tol > 0.0) {
            return Err(Error::Invalid(format!("tolerance must be positive, got {}", self.tol)));
        }
        let (lo, hi) = self.nu_bracket;
        if !(lo > 0.0 && hi > lo && hi.is_finite()) {
            return Err(Error::Invalid(format!("invalid degrees-of-freedom bracket ({lo}, {hi})")));
        }
        if !(self.psi_floor > 0.0) {
            return Err(Error::Invalid("psi_floor must be positive".into()));
        }
        Ok(())
    }
}

/// Latent-variable expectations of one observation under one component.
#[derive(Debug, Clone, PartialEq)]
pub enum ComponentMoments {
    Sdb(EStepMoments),
    /// `E[Y]`, `E[1/Y]` and `E[ln Y]` of the GH mixing variable.
    Gh { mean: f64, mean_inv: f64, mean_log: f64 },
}

impl ComponentMoments {
    /// `E[W]` and `E[ln W]` for the precision-type mixing variable.
    fn weight_and_log(&self) -> (f64, f64) {
        match self {
            ComponentMoments::Sdb(m) => (m.e1, m.e4),
            ComponentMoments::Gh { mean_inv, mean_log, .. } => (*mean_inv, -mean_log),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EStep {
    /// `n x G` component log densities.
    pub log_density: DMatrix<f64>,
    /// `n x G` responsibilities.
    pub z: DMatrix<f64>,
    /// `moments[g][i]`.
    pub moments: Vec<Vec<ComponentMoments>>,
    pub loglik: f64,
    /// Observations whose moments fell back to the symmetric forms, or whose
    /// densities all underflowed.
    pub degenerate: Vec<usize>,
}

enum Kernel {
    Sdb(SdbKernel),
    Gh(GhKernel, f64),
}

struct Kernels {
    kernels: Vec<Kernel>,
    cfg: MomentConfig,
}

impl Kernels {
    fn new(model: &MixtureModel, cfg: &MomentConfig) -> Result<Self> {
        let kernels = model
            .components
            .iter()
            .map(|c| match model.family {
                Family::Sdb => Ok(Kernel::Sdb(SdbKernel::new(&c.sdb()?, cfg.nodes())?)),
                Family::Gh => Ok(Kernel::Gh(GhKernel::new(&c.gh()?), c.nu)),
            })
            .collect::<Result<_>>()?;
        Ok(Self { kernels, cfg: *cfg })
    }

    fn exact(&self, g: usize, x: &DVector<f64>, with_moments: bool) -> Result<(f64, Option<ComponentMoments>)> {
        match &self.kernels[g] {
            Kernel::Sdb(k) => {
                if !with_moments {
                    if let OrthantEngine::Quadrature(_) = self.cfg.engine {
                        return Ok((k.evaluate(x, false)?.log_density, None));
                    }
                }
                let eval = evaluate_with_engine(k, x, &self.cfg)?;
                let m = with_moments.then(|| ComponentMoments::Sdb(moments_from_evaluation(&eval, x.len(), self.cfg.degenerate_below)));
                Ok((eval.log_density, m))
            }
            Kernel::Gh(k, nu) => {
                let eval = k.evaluate(x)?;
                let m = if with_moments {
                    let (mean, mean_inv, mean_log) = gh_posterior(&eval, *nu, x.len())?;
                    Some(ComponentMoments::Gh { mean, mean_inv, mean_log })
                } else {
                    None
                };
                Ok((eval.log_density, m))
            }
        }
    }

    /// Log densities (and moments) of every component at `x`. An SDB component whose
    /// density bound puts its weighted term more than `SCREEN_GAP` below the best exact
    /// term is not integrated: its bound stands in for the density and its moments are
    /// the symmetric ones, both multiplied by a responsibility below `e^-SCREEN_GAP`.
    fn row(&self, x: &DVector<f64>, log_pi: &[f64], with_moments: bool) -> Result<Vec<(f64, Option<ComponentMoments>)>> {
        let big_g = self.kernels.len();
        let mut bounds = vec![None; big_g];
        for (g, k) in self.kernels.iter().enumerate() {
            if let Kernel::Sdb(k) = k {
                bounds[g] = Some((k.log_density_bound(x)?, k.params().nu));
            }
        }
        let key = |g: usize| bounds[g].map_or(f64::INFINITY, |((b, _), _)| log_pi[g] + b);
        let mut order: Vec<usize> = (0..big_g).collect();
        order.sort_by(|&a, &b| key(b).total_cmp(&key(a)));
        let mut out = vec![None; big_g];
        let mut best = f64::NEG_INFINITY;
        for g in order {
            let value = match bounds[g] {
                Some(((bound, d), nu)) if log_pi[g] + bound < best - SCREEN_GAP => {
                    let p = x.len() as f64;
                    let m = with_moments.then(|| ComponentMoments::Sdb(symmetric_moments(x.len(), 0.5 * (nu + p), 0.5 * (nu + d))));
                    (bound, m)
                }
                _ => {
                    let v = self.exact(g, x, with_moments)?;
                    best = best.max(log_pi[g] + v.0);
                    v
                }
            };
            out[g] = Some(value);
        }
        Ok(out.into_iter().map(|v| v.expect("every component visited")).collect())
    }
}

/// Log-density gap beyond which a component is screened out of an observation.
const SCREEN_GAP: f64 = 36.0;

fn rows(data: &DMatrix<f64>) -> Vec<DVector<f64>> {
    data.row_iter().map(|r| r.transpose()).collect()
}

fn at_observation(i: usize, e: Error) -> Error {
    match e {
        Error::Domain(m) => Error::Domain(format!("observation {i}: {m}")),
        Error::Numeric(m) => Error::Numeric(format!("observation {i}: {m}")),
        other => other,
    }
}

fn check_data(data: &DMatrix<f64>, model: &MixtureModel) -> Result<()> {
    if data.ncols() != model.p() {
        return Err(Error::domain(format!("data have {} columns but the model has dimension {}", data.ncols(), model.p())));
    }
    Ok(())
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// `sum_i log sum_g pi_g f_g(x_i)` with default moment settings.
pub fn log_likelihood(data: &DMatrix<f64>, model: &MixtureModel) -> Result<f64> {
    log_likelihood_with(data, model, &MomentConfig::default())
}

pub fn log_likelihood_with(data: &DMatrix<f64>, model: &MixtureModel, cfg: &MomentConfig) -> Result<f64> {
    check_data(data, model)?;
    let kernels = Kernels::new(model, cfg)?;
    let log_pi: Vec<f64> = model.pi.iter().map(|w| w.ln()).collect();
    let mut total = 0.0;
    let mut terms = vec![0.0; model.g()];
    for (i, x) in rows(data).iter().enumerate() {
        let row = kernels.row(x, &log_pi, false).map_err(|e| at_observation(i, e))?;
        for (g, (ld, _)) in row.into_iter().enumerate() {
            terms[g] = log_pi[g] + ld;
        }
        total += log_sum_exp(&terms);
    }
    Ok(total)
}

/// Responsibilities and latent moments at the current parameters.
pub fn e_step(data: &DMatrix<f64>, model: &MixtureModel, cfg: &MomentConfig) -> Result<EStep> {
    check_data(data, model)?;
    let n = data.nrows();
    let big_g = model.g();
    let kernels = Kernels::new(model, cfg)?;
    let log_pi: Vec<f64> = model.pi.iter().map(|w| w.ln()).collect();
    let mut log_density = DMatrix::zeros(n, big_g);
    let mut z = DMatrix::zeros(n, big_g);
    let mut moments: Vec<Vec<ComponentMoments>> = (0..big_g).map(|_| Vec::with_capacity(n)).collect();
    let mut degenerate = Vec::new();
    let mut loglik = 0.0;
    let mut terms = vec![0.0; big_g];
    for (i, x) in rows(data).iter().enumerate() {
        let mut flagged = false;
        let mut fell_back = vec![false; big_g];
        let row = kernels.row(x, &log_pi, true).map_err(|e| at_observation(i, e))?;
        for (g, (ld, m)) in row.into_iter().enumerate() {
            let m = m.expect("moments requested");
            if let ComponentMoments::Sdb(ref s) = m {
                fell_back[g] = s.degenerate;
            }
            log_density[(i, g)] = ld;
            terms[g] = log_pi[g] + ld;
            moments[g].push(m);
        }
        let lse = log_sum_exp(&terms);
        if lse.is_finite() {
            for g in 0..big_g {
                z[(i, g)] = (terms[g] - lse).exp();
            }
            let row_sum: f64 = z.row(i).sum();
            for g in 0..big_g {
                z[(i, g)] /= row_sum;
                // a fallback only matters where the component claims the observation
                flagged |= fell_back[g] && z[(i, g)] > DEGENERATE_WEIGHT;
            }
        } else {
            flagged = true;
            for g in 0..big_g {
                z[(i, g)] = 1.0 / big_g as f64;
            }
        }
        if flagged {
            degenerate.push(i);
        }
        loglik += lse;
    }
    for (g, ms) in moments.iter_mut().enumerate() {
        for (i, m) in ms.iter_mut().enumerate() {
            if let ComponentMoments::Sdb(ref mut s) = m {
                s.z_hat = z[(i, g)];
            }
        }
    }
    Ok(EStep {
        log_density,
        z,
        moments,
        loglik,
        degenerate,
    })
}

/// Responsibility above which a moment fallback marks the observation degenerate.
const DEGENERATE_WEIGHT: f64 = 1e-8;

/// Weights of each observation in the group sums of component `g`, and their total.
fn group_weights(estep: &EStep, g: usize, weighting: Weighting) -> (Vec<f64>, f64) {
    let n = estep.z.nrows();
    let w: Vec<f64> = match weighting {
        Weighting::Responsibility => estep.z.column(g).iter().copied().collect(),
        Weighting::Unweighted => vec![1.0; n],
    };
    let total = w.iter().sum();
    (w, total)
}

/// Signals that a component lost (almost) all of its observations.
fn empty_component(g: usize, size: f64) -> Error {
    Error::FitFailed(format!("component {g} emptied (effective size {size:.3})"))
}

/// What the first CM stage changed besides the parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CmNotes {
    /// Components whose skewness system needed a ridge.
    pub ridged: Vec<usize>,
    /// Components whose degrees of freedom hit the bracket.
    pub nu_saturated: Vec<usize>,
}

/// First CM stage: mixing proportions, locations, skewness and degrees of freedom.
pub fn cm_step_1(data: &DMatrix<f64>, estep: &EStep, model: &MixtureModel, cfg: &FitConfig) -> Result<(MixtureModel, CmNotes)> {
    let xs = rows(data);
    let n = xs.len() as f64;
    let p = model.p();
    let q = model.q();
    let mut notes = CmNotes::default();
    let mut next = model.clone();
    for g in 0..model.g() {
        let size: f64 = estep.z.column(g).sum();
        if size < (q + 1) as f64 {
            return Err(empty_component(g, size));
        }
        next.pi[g] = size / n;
        let (w, total) = group_weights(estep, g, cfg.weighting);
        let comp = &model.components[g];
        let ms = &estep.moments[g];
        let (mu, skew) = match model.family {
            Family::Sdb => {
                let delta = &comp.skew;
                // location with the old skewness
                let mut num = DVector::zeros(p);
                let mut den = 0.0;
                for (i, x) in xs.iter().enumerate() {
                    let ComponentMoments::Sdb(m) = &ms[i] else { unreachable!() };
                    num += (x * m.e1 - delta.component_mul(&m.e2)) * w[i];
                    den += w[i] * m.e1;
                }
                let mu = num / den;
                // skewness with the new location
                let omega_inv = comp.cov.inverse_dense();
                let mut e3_sum = DMatrix::zeros(p, p);
                let mut cross = DMatrix::zeros(p, p);
                for (i, x) in xs.iter().enumerate() {
                    let ComponentMoments::Sdb(m) = &ms[i] else { unreachable!() };
                    e3_sum += &m.e3 * w[i];
                    cross += (x - &mu) * m.e2.transpose() * w[i];
                }
                let system = omega_inv.component_mul(&e3_sum);
                let rhs = (&omega_inv * cross).diagonal();
                let delta = match Cholesky::new(system.clone()) {
                    Some(ch) => ch.solve(&rhs),
                    None => {
                        notes.ridged.push(g);
                        let ridge = 1e-8 * system.trace().abs().max(1e-300) / p as f64;
                        let reg = &system + DMatrix::identity(p, p) * ridge;
                        reg.lu().solve(&rhs).ok_or_else(|| Error::numeric("skewness system is singular"))?
                    }
                };
                (mu, delta)
            }
            Family::Gh => {
                let mut a = 0.0;
                let mut b = 0.0;
                let mut xbar = DVector::zeros(p);
                let mut xtilde = DVector::zeros(p);
                for (i, x) in xs.iter().enumerate() {
                    let ComponentMoments::Gh { mean, mean_inv, .. } = ms[i] else { unreachable!() };
                    a += w[i] * mean;
                    b += w[i] * mean_inv;
                    xbar += x * w[i];
                    xtilde += x * (w[i] * mean_inv);
                }
                let (a, b) = (a / total, b / total);
                xbar /= total;
                xtilde /= total;
                let det = a * b - 1.0;
                if det > 1e-12 && a.is_finite() {
                    let mu = (&xtilde * a - &xbar) / det;
                    let alpha = (&xbar * b - &xtilde) / det;
                    (mu, alpha)
                } else {
                    ((&xtilde - &comp.skew) / b, comp.skew.clone())
                }
            }
        };
        let s = match cfg.nu_update {
            NuUpdate::Weighted => {
                ms.iter().zip(&w).map(|(m, wi)| {
                    let (e1, e4) = m.weight_and_log();
                    wi * (e1 - e4)
                }).sum::<f64>()
                    / total
            }
            NuUpdate::Pooled => {
                ms.iter().map(|m| {
                    let (e1, e4) = m.weight_and_log();
                    e1 - e4
                }).sum::<f64>()
                    / n
            }
        };
        let nu = match solve_nu_detailed(s, cfg.nu_bracket.0, cfg.nu_bracket.1)? {
            NuSolution::Root(v) => v,
            sat => {
                notes.nu_saturated.push(g);
                sat.value()
            }
        };
        if mu.iter().chain(skew.iter()).any(|v| !v.is_finite()) {
            return Err(Error::numeric(format!("component {g}: non-finite location or skewness update")));
        }
        next.components[g] = Component {
            mu,
            skew,
            cov: comp.cov.clone(),
            nu,
        };
    }
    Ok((next, notes))
}

/// Expected "sample covariance" of each component given moments at the current parameters.
pub fn scatter_matrices(data: &DMatrix<f64>, estep: &EStep, model: &MixtureModel, cfg: &FitConfig) -> Result<Vec<GroupScatter>> {
    let xs = rows(data);
    let p = model.p();
    let mut out = Vec::with_capacity(model.g());
    for g in 0..model.g() {
        let (w, total) = group_weights(estep, g, cfg.weighting);
        if !(total > 0.0) {
            return Err(empty_component(g, total));
        }
        let comp = &model.components[g];
        let s = &comp.skew;
        let mut scatter = DMatrix::zeros(p, p);
        for (i, x) in xs.iter().enumerate() {
            if w[i] == 0.0 {
                continue;
            }
            let r = x - &comp.mu;
            match &estep.moments[g][i] {
                ComponentMoments::Sdb(m) => {
                    let shift = s.component_mul(&m.e2);
                    let mut term = &r * r.transpose() * m.e1;
                    term -= &r * shift.transpose() + &shift * r.transpose();
                    for a in 0..p {
                        for b in 0..p {
                            term[(a, b)] += s[a] * m.e3[(a, b)] * s[b];
                        }
                    }
                    scatter += term * w[i];
                }
                ComponentMoments::Gh { mean, mean_inv, .. } => {
                    let mut term = &r * r.transpose() * *mean_inv;
                    term -= &r * s.transpose() + s * r.transpose();
                    term += s * s.transpose() * *mean;
                    scatter += term * w[i];
                }
            }
        }
        scatter /= total;
        scatter = (&scatter + scatter.transpose()) * 0.5;
        let weight = match cfg.weighting {
            Weighting::Responsibility => total,
            Weighting::Unweighted => xs.len() as f64,
        };
        out.push(GroupScatter { scatter, weight });
    }
    Ok(out)
}

/// Second CM stage: loadings and noise under the model's covariance structure.
pub fn cm_step_2(groups: &[GroupScatter], model: &MixtureModel, psi_floor: f64) -> Result<MixtureModel> {
    let current: Vec<FactorCovariance> = model.components.iter().map(|c| c.cov.clone()).collect();
    let updated = constrained_update(model.structure, groups, &current, psi_floor)?;
    let mut next = model.clone();
    for (c, cov) in next.components.iter_mut().zip(updated) {
        c.cov = cov;
    }
    Ok(next)
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub model: MixtureModel,
    /// Log-likelihood at the start of every cycle and at the returned parameters.
    pub loglik_trace: Vec<f64>,
    pub z: DMatrix<f64>,
    pub map_labels: Vec<usize>,
    pub iterations: usize,
    pub converged: bool,
    /// Observations flagged degenerate in the final E-step.
    pub degenerate: Vec<usize>,
    /// Cycles whose log-likelihood fell by more than the allowed slack.
    pub monotonicity_violations: Vec<usize>,
    /// Seed of the start that produced this result.
    pub seed: u64,
}

impl FitResult {
    pub fn loglik(&self) -> f64 {
        *self.loglik_trace.last().expect("trace is never empty")
    }
}

pub fn map_labels(z: &DMatrix<f64>) -> Vec<usize> {
    z.row_iter()
        .map(|r| {
            let mut best = 0;
            for g in 1..r.len() {
                if r[g] > r[best] {
                    best = g;
                }
            }
            best
        })
        .collect()
}

/// Allowed decrease of the log-likelihood between cycles.
pub fn monotone_slack(loglik: f64) -> f64 {
    1e-8 * (1.0 + loglik.abs())
}

fn has_converged(trace: &[f64], tol: f64, rule: Convergence) -> bool {
    let k = trace.len();
    match rule {
        Convergence::Relative => k >= 2 && (trace[k - 1] - trace[k - 2]).abs() < tol * trace[k - 1].abs().max(1.0),
        Convergence::Aitken => {
            if k < 3 {
                return false;
            }
            let (l0, l1, l2) = (trace[k - 3], trace[k - 2], trace[k - 1]);
            let step = l1 - l0;
            if step == 0.0 {
                return l2 == l1;
            }
            let accel = (l2 - l1) / step;
            if !(accel < 1.0) || !accel.is_finite() {
                return false;
            }
            let limit = l1 + (l2 - l1) / (1.0 - accel);
            (limit - l1).abs() < tol
        }
    }
}

/// Runs AECM from the given parameters.
pub fn fit_from(data: &DMatrix<f64>, initial: MixtureModel, cfg: &FitConfig) -> Result<FitResult> {
    cfg.validate()?;
    initial.validate()?;
    check_data(data, &initial)?;
    let floor = cfg.psi_floor * median_column_variance(data);
    let mut model = initial;
    let mut trace = Vec::new();
    let mut violations = Vec::new();
    let mut iterations = 0;
    loop {
        let estep = e_step(data, &model, &cfg.moments)?;
        if !estep.loglik.is_finite() {
            return Err(Error::numeric("log-likelihood is not finite"));
        }
        // a fall within the slack means the cycle is below the E-step's accuracy
        let mut stalled = false;
        if let Some(&prev) = trace.last() {
            if estep.loglik < prev - monotone_slack(prev) {
                log::warn!("log-likelihood fell from {prev} to {} at cycle {iterations}", estep.loglik);
                violations.push(iterations);
            } else if estep.loglik < prev {
                log::debug!("log-likelihood stalled at {prev} after {iterations} cycles");
                stalled = true;
            }
        }
        trace.push(estep.loglik);
        let converged = stalled || has_converged(&trace, cfg.tol, cfg.convergence);
        if converged || iterations == cfg.max_iter {
            let labels = map_labels(&estep.z);
            return Ok(FitResult {
                model,
                loglik_trace: trace,
                z: estep.z,
                map_labels: labels,
                iterations,
                converged,
                degenerate: estep.degenerate,
                monotonicity_violations: violations,
                seed: cfg.seed,
            });
        }
        let (half, _) = cm_step_1(data, &estep, &model, cfg)?;
        let second = e_step(data, &half, &cfg.moments)?;
        let groups = scatter_matrices(data, &second, &half, cfg)?;
        model = cm_step_2(&groups, &half, floor)?;
        iterations += 1;
    }
}

fn median_column_variance(data: &DMatrix<f64>) -> f64 {
    let n = data.nrows() as f64;
    let mut vars: Vec<f64> = data
        .column_iter()
        .map(|c| {
            let m = c.mean();
            c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n
        })
        .collect();
    vars.sort_by(f64::total_cmp);
    let k = vars.len();
    let v = if k % 2 == 1 { vars[k / 2] } else { 0.5 * (vars[k / 2 - 1] + vars[k / 2]) };
    if v > 0.0 {
        v
    } else {
        1.0
    }
}

/// Seed of start `k`.
fn start_seed(seed: u64, k: usize) -> u64 {
    seed.wrapping_add((k as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Fits from `cfg.n_starts` initializations and keeps the best final log-likelihood.
pub fn fit(data: &DMatrix<f64>, family: Family, structure: CovarianceStructure, g: usize, q: usize, cfg: &FitConfig) -> Result<FitResult> {
    cfg.validate()?;
    let (n, p) = data.shape();
    if g == 0 || q == 0 || q >= p {
        return Err(Error::domain(format!("need G >= 1 and 0 < q < p, got G={g}, q={q}, p={p}")));
    }
    if n <= g * (q + 1) {
        return Err(Error::domain(format!("need more than G(q+1) = {} observations, got {n}", g * (q + 1))));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("data contain non-finite values"));
    }
    if cfg.init == InitMethod::Given {
        return Err(Error::Invalid("initialization 'given' needs a model; use fit_from".into()));
    }
    let mut best: Option<FitResult> = None;
    let mut failures = Vec::new();
    let mut seen: Vec<(Vec<usize>, usize)> = Vec::new();
    let mut results: Vec<FitResult> = Vec::new();
    for k in 0..cfg.n_starts {
        let seed = start_seed(cfg.seed, k);
        let mut attempt = 0;
        let outcome = loop {
            let attempt_seed = start_seed(seed ^ 0x5EED, attempt);
            let run_seed = if attempt == 0 { seed } else { attempt_seed };
            let init_cfg = FitConfig {
                seed: run_seed,
                init: if attempt == 0 { cfg.init } else { InitMethod::RandomSoft },
                ..cfg.clone()
            };
            let (model, partition) = match initialize_with_partition(data, family, structure, g, q, &init_cfg) {
                Ok(v) => v,
                Err(e) => break Err(e),
            };
            if let Some(partition) = &partition {
                if let Some((_, idx)) = seen.iter().find(|(p, _)| p == partition) {
                    let mut copy = results[*idx].clone();
                    copy.seed = run_seed;
                    break Ok(copy);
                }
            }
            match fit_from(data, model, &init_cfg) {
                Ok(r) => {
                    if let Some(partition) = partition {
                        seen.push((partition, results.len()));
                    }
                    results.push(r.clone());
                    break Ok(r);
                }
                Err(e @ Error::FitFailed(_)) if attempt < cfg.max_restarts => {
                    log::info!("start {k}: {e}; restarting");
                    attempt += 1;
                }
                Err(e) => break Err(e),
            }
        };
        match outcome {
            Ok(r) => {
                if best.as_ref().is_none_or(|b| r.loglik() > b.loglik()) {
                    best = Some(r);
                }
            }
            Err(e) => failures.push(format!("start {k}: {e}")),
        }
    }
    best.ok_or_else(|| Error::FitFailed(format!("every start failed: {}", failures.join("; "))))
}

/// Initial parameters per `cfg.init` (k-means or random soft assignments).
pub fn initialize(data: &DMatrix<f64>, family: Family, structure: CovarianceStructure, g: usize, q: usize, cfg: &FitConfig) -> Result<MixtureModel> {
    initialize_with_partition(data, family, structure, g, q, cfg).map(|(m, _)| m)
}

/// Degrees of freedom of every initial component.
pub const INITIAL_NU: f64 = 50.0;

fn initialize_with_partition(
    data: &DMatrix<f64>,
    family: Family,
    structure: CovarianceStructure,
    g: usize,
    q: usize,
    cfg: &FitConfig,
) -> Result<(MixtureModel, Option<Vec<usize>>)> {
    let (n, p) = data.shape();
    if g == 0 || q == 0 || q >= p || n <= g * (q + 1) {
        return Err(Error::domain(format!("cannot initialize G={g}, q={q} from {n} x {p} data")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let floor = cfg.psi_floor * median_column_variance(data);
    if cfg.init == InitMethod::Kmeans {
        if let Some(labels) = kmeans(data, g, &mut rng, q + 1) {
            let mut z = DMatrix::zeros(n, g);
            for (i, &l) in labels.iter().enumerate() {
                z[(i, l)] = 1.0;
            }
            if let Ok(model) = model_from_weights(data, &z, family, structure, q, floor) {
                return Ok((model, Some(labels)));
            }
        }
        log::info!("k-means initialization failed; using random soft assignments");
    }
    for _ in 0..20 {
        let mut z = DMatrix::from_fn(n, g, |_, _| rng.gen::<f64>() + 0.1);
        for mut row in z.row_iter_mut() {
            let s = row.sum();
            row /= s;
        }
        if let Ok(model) = model_from_weights(data, &z, family, structure, q, floor) {
            return Ok((model, None));
        }
    }
    Err(Error::FitFailed("could not build initial parameters".into()))
}

/// Hard partition by k-means++ seeding and Lloyd iterations; `None` when a cluster
/// ends up with fewer than `min_size` points.
fn kmeans(data: &DMatrix<f64>, g: usize, rng: &mut ChaCha8Rng, min_size: usize) -> Option<Vec<usize>> {
    let xs = rows(data);
    let n = xs.len();
    let mut centers: Vec<DVector<f64>> = vec![xs[rng.gen_range(0..n)].clone()];
    let mut dist: Vec<f64> = xs.iter().map(|x| (x - &centers[0]).norm_squared()).collect();
    while centers.len() < g {
        let total: f64 = dist.iter().sum();
        if !(total > 0.0) {
            return None;
        }
        let mut target = rng.gen::<f64>() * total;
        let mut pick = n - 1;
        for (i, d) in dist.iter().enumerate() {
            if target < *d {
                pick = i;
                break;
            }
            target -= d;
        }
        centers.push(xs[pick].clone());
        for (i, x) in xs.iter().enumerate() {
            dist[i] = dist[i].min((x - &centers[centers.len() - 1]).norm_squared());
        }
    }
    let mut labels = vec![usize::MAX; n];
    for _ in 0..200 {
        let mut changed = false;
        for (i, x) in xs.iter().enumerate() {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (k, c) in centers.iter().enumerate() {
                let d = (x - c).norm_squared();
                if d < best_d {
                    best_d = d;
                    best = k;
                }
            }
            if labels[i] != best {
                labels[i] = best;
                changed = true;
            }
        }
        let mut counts = vec![0usize; g];
        let mut sums = vec![DVector::zeros(data.ncols()); g];
        for (x, &l) in xs.iter().zip(&labels) {
            counts[l] += 1;
            sums[l] += x;
        }
        if counts.contains(&0) {
            return None;
        }
        for k in 0..g {
            centers[k] = &sums[k] / counts[k] as f64;
        }
        if !changed {
            break;
        }
    }
    let mut counts = vec![0usize; g];
    for &l in &labels {
        counts[l] += 1;
    }
    if counts.iter().any(|&c| c < min_size) {
        return None;
    }
    Some(labels)
}

/// Moment-based parameters from soft or hard assignments `z` (`n x G`).
fn model_from_weights(
    data: &DMatrix<f64>,
    z: &DMatrix<f64>,
    family: Family,
    structure: CovarianceStructure,
    q: usize,
    floor: f64,
) -> Result<MixtureModel> {
    let (n, p) = data.shape();
    let g = z.ncols();
    let xs = rows(data);
    let nu = INITIAL_NU;
    // E[W^-1/2] sqrt(2/pi) for the SDB mean shift, E[Y] for GH
    let sdb_shift = (0.5 * nu).sqrt() * (ln_gamma(0.5 * (nu - 1.0)) - ln_gamma(0.5 * nu)).exp() * (2.0 / std::f64::consts::PI).sqrt();
    let gh_shift = nu / (nu - 2.0);
    let mut sizes = Vec::with_capacity(g);
    let mut locations = Vec::with_capacity(g);
    let mut skews = Vec::with_capacity(g);
    let mut scatters = Vec::with_capacity(g);
    for k in 0..g {
        let w = z.column(k);
        let size: f64 = w.sum();
        if size < (q + 1) as f64 {
            return Err(empty_component(k, size));
        }
        let mean = xs.iter().zip(w.iter()).fold(DVector::zeros(p), |acc, (x, wi)| acc + x * *wi) / size;
        let mut cov = DMatrix::zeros(p, p);
        let mut third = DVector::zeros(p);
        for (x, wi) in xs.iter().zip(w.iter()) {
            let r = x - &mean;
            cov += &r * r.transpose() * *wi;
            third += r.map(|v| v * v * v) * *wi;
        }
        cov /= size;
        let skew = DVector::from_fn(p, |j, _| {
            let sd = cov[(j, j)].sqrt();
            if third[j] >= 0.0 {
                0.5 * sd
            } else {
                -0.5 * sd
            }
        });
        let (mu, scatter) = match family {
            Family::Sdb => {
                let mut s = cov.clone();
                for j in 0..p {
                    s[(j, j)] = (s[(j, j)] - skew[j] * skew[j] * (1.0 - 2.0 / std::f64::consts::PI)).max(0.5 * cov[(j, j)]);
                }
                (&mean - &skew * sdb_shift, s)
            }
            Family::Gh => (&mean - &skew * gh_shift, &cov * ((nu - 2.0) / nu)),
        };
        sizes.push(size);
        locations.push(mu);
        skews.push(skew);
        scatters.push(scatter);
    }
    let covs = initial_factors(&scatters, &sizes, structure, q, floor)?;
    let components = (0..g)
        .map(|k| Component {
            mu: locations[k].clone(),
            skew: skews[k].clone(),
            cov: covs[k].clone(),
            nu,
        })
        .collect();
    let model = MixtureModel {
        family,
        structure,
        pi: sizes.iter().map(|s| s / n as f64).collect(),
        components,
    };
    model.validate()?;
    Ok(model)
}

/// Principal-component loadings and residual noise, tied per `structure`.
fn initial_factors(scatters: &[DMatrix<f64>], sizes: &[f64], structure: CovarianceStructure, q: usize, floor: f64) -> Result<Vec<FactorCovariance>> {
    let p = scatters[0].nrows();
    let total: f64 = sizes.iter().sum();
    let loadings_of = |s: &DMatrix<f64>| -> DMatrix<f64> {
        let eig = SymmetricEigen::new(s.clone());
        let mut order: Vec<usize> = (0..p).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let rest = order[q..].iter().map(|&i| eig.eigenvalues[i]).sum::<f64>() / (p - q) as f64;
        let mut lambda = DMatrix::zeros(p, q);
        for (k, &i) in order[..q].iter().enumerate() {
            let scale = (eig.eigenvalues[i] - rest).max(1e-6 * eig.eigenvalues[order[0]].abs()).sqrt();
            let mut col = eig.eigenvectors.column(i).into_owned();
            // deterministic sign: largest-magnitude entry positive
            if col[col.iamax()] < 0.0 {
                col = -col;
            }
            lambda.set_column(k, &(col * scale));
        }
        lambda
    };
    let pooled = scatters.iter().zip(sizes).fold(DMatrix::zeros(p, p), |acc, (s, w)| acc + s * (*w / total));
    let shared = structure.loadings_tied().then(|| loadings_of(&pooled));
    let mut lambdas = Vec::new();
    let mut psis = Vec::new();
    for s in scatters {
        let lambda = shared.clone().unwrap_or_else(|| loadings_of(s));
        let fitted = &lambda * lambda.transpose();
        let psi = DVector::from_fn(p, |j, _| (s[(j, j)] - fitted[(j, j)]).max(0.05 * s[(j, j)]).max(floor));
        lambdas.push(lambda);
        psis.push(psi);
    }
    if structure.errors_tied() {
        let mean = psis.iter().zip(sizes).fold(DVector::zeros(p), |acc, (psi, w)| acc + psi * (*w / total));
        psis.iter_mut().for_each(|psi| *psi = mean.clone());
    }
    if structure.isotropic() {
        for psi in psis.iter_mut() {
            let m = psi.mean();
            psi.fill(m);
        }
    }
    lambdas.into_iter().zip(psis).map(|(l, psi)| FactorCovariance::new(l, psi)).collect()
}

/// Draws `n` observations and their generating component labels.
pub fn sample_mixture(model: &MixtureModel, n: usize, seed: u64) -> Result<(DMatrix<f64>, Vec<usize>)> {
    model.validate()?;
    if n == 0 {
        return Err(Error::domain("sample size must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = model.p();
    let mut x = DMatrix::zeros(n, p);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut g = model.g() - 1;
        for (k, &w) in model.pi.iter().enumerate() {
            acc += w;
            if u < acc {
                g = k;
                break;
            }
        }
        let c = &model.components[g];
        let row = match model.family {
            Family::Sdb => sdb_sample_with(&c.sdb()?, 1, &mut rng)?.x,
            Family::Gh => gh_sample_with(&c.gh()?, 1, &mut rng)?.x,
        };
        x.row_mut(i).copy_from(&row.row(0));
        labels.push(g);
    }
    Ok((x, labels))
}
