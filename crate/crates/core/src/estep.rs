//! Posterior expectations of the latent variables given an observation.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::distributions::{GhEvaluation, GhKernel, GhSkewTParams, SdbComponentParams, SdbEvaluation, SdbKernel};
use crate::error::{Error, Result};
use crate::orthant::{sov_orthant, QmcOptions, QuadratureNodes};
use crate::special::{digamma, gig_moments, ln_gamma, GigParams};

/// `E[W]`, `E[W V]`, `E[W V V']` and `E[ln W]` for one observation and component,
/// together with its responsibility.
#[derive(Debug, Clone, PartialEq)]
pub struct EStepMoments {
    pub z_hat: f64,
    pub e1: f64,
    pub e2: DVector<f64>,
    pub e3: DMatrix<f64>,
    pub e4: f64,
    /// The orthant probability underflowed and the symmetric forms were used.
    pub degenerate: bool,
}

/// How orthant integrals are evaluated during the E-step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OrthantEngine {
    Quadrature(QuadratureNodes),
    /// Randomized lattice; `target_error` bounds the standard error of each probability.
    Lattice { target_error: f64, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MomentConfig {
    pub engine: OrthantEngine,
    /// Orthant probabilities below this switch to the symmetric fallback.
    pub degenerate_below: f64,
}

impl Default for MomentConfig {
    fn default() -> Self {
        Self {
            engine: OrthantEngine::Quadrature(QuadratureNodes::default()),
            degenerate_below: 1e-12,
        }
    }
}

impl MomentConfig {
    pub fn nodes(&self) -> QuadratureNodes {
        match self.engine {
            OrthantEngine::Quadrature(n) => n,
            OrthantEngine::Lattice { .. } => QuadratureNodes::default(),
        }
    }
}

/// Moments when the skewness is ignored: `W | x ~ Gamma(shape, rate)` and, given `w`,
/// `V` has independent half-normal coordinates with scale `1/sqrt(w)`.
pub fn symmetric_moments(p: usize, shape: f64, rate: f64) -> EStepMoments {
    let half_normal = 2.0 / PI;
    let mean_root_w = (ln_gamma(shape + 0.5) - ln_gamma(shape)).exp() / rate.sqrt();
    let mut e3 = DMatrix::from_element(p, p, half_normal);
    for j in 0..p {
        e3[(j, j)] = 1.0;
    }
    EStepMoments {
        z_hat: f64::NAN,
        e1: shape / rate,
        e2: DVector::from_element(p, mean_root_w * half_normal.sqrt()),
        e3,
        e4: crate::special::digamma_unchecked(shape) - rate.ln(),
        degenerate: false,
    }
}

/// Converts an evaluation carrying orthant moments into posterior moments.
pub(crate) fn moments_from_evaluation(eval: &SdbEvaluation, p: usize, degenerate_below: f64) -> EStepMoments {
    let prob = eval.orthant.log_prob.exp();
    let o = &eval.orthant;
    let usable = prob >= degenerate_below
        && o.mean_s.is_finite()
        && o.mean_log_s.is_finite()
        && o.mean_sv.iter().chain(o.mean_svv.iter()).all(|v| v.is_finite());
    if !usable {
        let mut out = symmetric_moments(p, eval.shape, eval.rate);
        out.degenerate = true;
        return out;
    }
    let ratio = eval.shape / eval.rate;
    let mut e3 = o.mean_svv.clone();
    e3 = (&e3 + e3.transpose()) * 0.5;
    let out = EStepMoments {
        z_hat: f64::NAN,
        e1: ratio * o.mean_s,
        e2: o.mean_sv.map(|v| v.max(0.0)) * ratio.sqrt(),
        e3,
        e4: o.mean_log_s + ratio.ln(),
        degenerate: false,
    };
    if cfg!(debug_assertions) {
        check_moments(&out);
    }
    out
}

/// Sign and shape checks every analytic moment set must pass.
fn check_moments(m: &EStepMoments) {
    assert!(m.e1 > 0.0, "posterior mean of W must be positive, got {}", m.e1);
    assert!(m.e2.iter().all(|&v| v >= 0.0), "posterior E[W V] must be non-negative");
    assert!(m.e3 == m.e3.transpose(), "posterior E[W V V'] must be symmetric");
    let smallest = m.e3.clone().symmetric_eigenvalues().min();
    assert!(smallest >= -1e-9 * m.e3.trace().max(1.0), "posterior E[W V V'] must be positive semi-definite, smallest eigenvalue {smallest}");
}

/// Evaluates one component at `x` with the configured engine, density and moments together.
pub(crate) fn evaluate_with_engine(kernel: &SdbKernel, x: &DVector<f64>, cfg: &MomentConfig) -> Result<SdbEvaluation> {
    match cfg.engine {
        OrthantEngine::Quadrature(_) => kernel.evaluate(x, true),
        OrthantEngine::Lattice { target_error, seed } => {
            let quick = kernel.evaluate(x, false)?;
            let params = kernel.params();
            let r = x - &params.mu;
            let sr = kernel.scale().solve_vec(&r);
            let factor = (quick.shape / quick.rate).sqrt();
            let c = DVector::from_fn(params.p(), |j, _| params.delta[j] * sr[j] * factor);
            let opts = QmcOptions {
                target_error,
                ..QmcOptions::default()
            };
            let orthant = sov_orthant(&c, &kernel.truncated_scale(), quick.shape, &opts, seed, true)?;
            let floored = !(orthant.log_prob >= crate::distributions::CDF_FLOOR.ln());
            let log_cdf = if floored { crate::distributions::CDF_FLOOR.ln() } else { orthant.log_prob };
            Ok(SdbEvaluation {
                log_density: quick.log_density - quick.log_cdf + log_cdf,
                log_cdf,
                floored,
                orthant,
                ..quick
            })
        }
    }
}

/// Analytic posterior moments of one SDB component at `x`; `z_hat` is left unset (NaN).
pub fn sdb_moments(x: &DVector<f64>, params: &SdbComponentParams, cfg: &MomentConfig) -> Result<EStepMoments> {
    let kernel = SdbKernel::new(params, cfg.nodes())?;
    let eval = evaluate_with_engine(&kernel, x, cfg)?;
    Ok(moments_from_evaluation(&eval, params.p(), cfg.degenerate_below))
}

/// Monte Carlo estimate with jackknife standard errors.
#[derive(Debug, Clone)]
pub struct OracleMoments {
    pub moments: EStepMoments,
    pub se_e1: f64,
    pub se_e2: DVector<f64>,
    pub se_e3: DMatrix<f64>,
    pub se_e4: f64,
    pub effective_sample_size: f64,
}

const JACKKNIFE_BLOCKS: usize = 50;

/// Self-normalized importance sampling of `(W, V) | x` with the prior hierarchy as
/// proposal and the conditional normal density of `x` as weight.
pub fn mc_oracle_moments(x: &DVector<f64>, params: &SdbComponentParams, n_draws: usize, seed: u64) -> Result<OracleMoments> {
    if n_draws < 1000 {
        return Err(Error::domain(format!("oracle needs at least 1000 draws, got {n_draws}")));
    }
    let p = params.p();
    if x.len() != p || x.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("point must be finite with the model's dimension"));
    }
    let omega = params.cov.dense();
    let chol = Cholesky::new(omega).ok_or_else(|| Error::numeric("conditional covariance is singular"))?;
    let mixing = Gamma::new(0.5 * params.nu, 2.0 / params.nu).map_err(|e| Error::domain(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // features per draw: w, w v, w v v' (upper triangle), ln w
    let tri = p * (p + 1) / 2;
    let dim = 2 + p + tri;
    let mut log_weights = Vec::with_capacity(n_draws);
    let mut features = Vec::with_capacity(n_draws * dim);
    let r0 = x - &params.mu;
    let mut v = DVector::zeros(p);
    for _ in 0..n_draws {
        let w: f64 = mixing.sample(&mut rng);
        let root = w.sqrt();
        for j in 0..p {
            v[j] = rng.sample::<f64, _>(StandardNormal).abs() / root;
        }
        let resid = &r0 - params.delta.component_mul(&v);
        let maha = resid.dot(&chol.solve(&resid));
        log_weights.push(0.5 * p as f64 * w.ln() - 0.5 * w * maha);
        features.push(w);
        features.extend(v.iter().map(|vj| w * vj));
        for a in 0..p {
            for b in a..p {
                features.push(w * v[a] * v[b]);
            }
        }
        features.push(w.ln());
    }
    let max = log_weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = log_weights.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let total_sq: f64 = weights.iter().map(|w| w * w).sum();
    let ess = total * total / total_sq;
    if !(ess >= 50.0) {
        return Err(Error::Unreliable(format!("importance sampling effective sample size {ess:.1} is below 50")));
    }

    // weighted sums per block for the delete-one-block jackknife
    let block_len = n_draws.div_ceil(JACKKNIFE_BLOCKS);
    let mut block_w = vec![0.0; JACKKNIFE_BLOCKS];
    let mut block_f = vec![vec![0.0; dim]; JACKKNIFE_BLOCKS];
    for (i, &wt) in weights.iter().enumerate() {
        let b = i / block_len;
        block_w[b] += wt;
        for (acc, f) in block_f[b].iter_mut().zip(&features[i * dim..(i + 1) * dim]) {
            *acc += wt * f;
        }
    }
    let used = block_w.iter().filter(|&&w| w > 0.0).count().max(2);
    let full_f: Vec<f64> = (0..dim).map(|k| block_f.iter().map(|b| b[k]).sum()).collect();
    let estimate: Vec<f64> = full_f.iter().map(|f| f / total).collect();
    let mut var = vec![0.0; dim];
    let mut leave_out = vec![vec![0.0; dim]; JACKKNIFE_BLOCKS];
    for b in 0..JACKKNIFE_BLOCKS {
        let denom = total - block_w[b];
        for k in 0..dim {
            leave_out[b][k] = (full_f[k] - block_f[b][k]) / denom;
        }
    }
    for k in 0..dim {
        let mean = leave_out.iter().map(|l| l[k]).sum::<f64>() / JACKKNIFE_BLOCKS as f64;
        let ss: f64 = leave_out.iter().map(|l| (l[k] - mean).powi(2)).sum();
        var[k] = ss * (used as f64 - 1.0) / used as f64;
    }
    let se: Vec<f64> = var.iter().map(|v| v.sqrt()).collect();

    let unpack = |vals: &[f64]| {
        let e2 = DVector::from_fn(p, |j, _| vals[1 + j]);
        let mut e3 = DMatrix::zeros(p, p);
        let mut k = 1 + p;
        for a in 0..p {
            for b in a..p {
                e3[(a, b)] = vals[k];
                e3[(b, a)] = vals[k];
                k += 1;
            }
        }
        (vals[0], e2, e3, vals[k])
    };
    let (e1, e2, e3, e4) = unpack(&estimate);
    let (se_e1, se_e2, se_e3, se_e4) = unpack(&se);
    Ok(OracleMoments {
        moments: EStepMoments {
            z_hat: f64::NAN,
            e1,
            e2,
            e3,
            e4,
            degenerate: false,
        },
        se_e1,
        se_e2,
        se_e3,
        se_e4,
        effective_sample_size: ess,
    })
}

/// `(E[Y | x], E[1/Y | x], E[ln Y | x])` for the GH skew-t.
pub fn gh_moments(x: &DVector<f64>, params: &GhSkewTParams) -> Result<(f64, f64, f64)> {
    if params.alpha.iter().all(|&a| a == 0.0) {
        return Err(Error::domain("GH moments need non-zero skewness; the symmetric case is handled separately"));
    }
    let kernel = GhKernel::new(params);
    let eval = kernel.evaluate(x)?;
    gh_posterior(&eval, params.nu, params.p())
}

/// Below this `alpha' Sigma^-1 alpha` the inverse-gamma limit of the GIG posterior is used.
const GH_SYMMETRIC_RHO: f64 = 1e-12;

pub(crate) fn gh_posterior(eval: &GhEvaluation, nu: f64, p: usize) -> Result<(f64, f64, f64)> {
    let order = -0.5 * (nu + p as f64);
    if eval.rho < GH_SYMMETRIC_RHO {
        // Y | x ~ IG((nu+p)/2, chi/2)
        let shape = -order;
        let scale = 0.5 * eval.chi;
        let mean = if shape > 1.0 { scale / (shape - 1.0) } else { f64::INFINITY };
        return Ok((mean, shape / scale, scale.ln() - digamma(shape)?));
    }
    let gig = GigParams::new(eval.rho, eval.chi, order)?;
    let m = gig_moments(&gig)?;
    Ok((m.mean, m.mean_inv, m.mean_log))
}
