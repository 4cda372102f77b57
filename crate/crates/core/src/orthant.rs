//! Orthant integrals behind the skew-t density and its posterior moments.
//!
//! With `S ~ Gamma(shape, rate = shape)` and `Z | S ~ N(0, Gamma)`, both integrators
//! estimate `P = P(Z <= sqrt(S) c)` (the multivariate t CDF with `2 shape` degrees of
//! freedom) together with moments of `S` and of `V = c - Z / sqrt(S)` on that event:
//! `E[S]`, `E[S V]`, `E[S V V']` and `E[ln S]`.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::qmc::ShiftedLattice;
use crate::special::{digamma_unchecked, gamma_quantile, norm_cdf, norm_quantile_fast, upper_truncated_normal, upper_truncated_normal_mass};

#[derive(Debug, Clone)]
pub struct OrthantMoments {
    pub log_prob: f64,
    /// Estimated absolute error of `exp(log_prob)`.
    pub prob_error: f64,
    pub mean_s: f64,
    pub mean_sv: DVector<f64>,
    pub mean_svv: DMatrix<f64>,
    pub mean_log_s: f64,
}

impl OrthantMoments {
    fn empty(p: usize) -> Self {
        Self {
            log_prob: f64::NEG_INFINITY,
            prob_error: 0.0,
            mean_s: f64::NAN,
            mean_sv: DVector::from_element(p, f64::NAN),
            mean_svv: DMatrix::from_element(p, p, f64::NAN),
            mean_log_s: f64::NAN,
        }
    }
}

/// Settings of the randomized lattice integrator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QmcOptions {
    /// Stop once the standard error of the probability falls below this.
    pub target_error: f64,
    pub shifts: usize,
    /// Points per shift in the first pass; doubled until the target is met.
    pub min_points: usize,
    pub max_points: usize,
}

impl Default for QmcOptions {
    fn default() -> Self {
        Self {
            target_error: 1e-4,
            shifts: 8,
            min_points: 128,
            max_points: 1 << 17,
        }
    }
}

#[derive(Default, Clone)]
struct Sums {
    weight: f64,
    s: f64,
    log_s: f64,
    sv: Vec<f64>,
    svv: Vec<f64>,
}

/// Separation-of-variables estimate over randomly shifted lattice points, for a
/// general positive-definite `gamma`. Variables are reordered by increasing
/// conditional probability (at `S = 1`) before the Cholesky factorization.
pub fn sov_orthant(
    c: &DVector<f64>,
    gamma: &DMatrix<f64>,
    shape: f64,
    opts: &QmcOptions,
    seed: u64,
    with_moments: bool,
) -> Result<OrthantMoments> {
    let p = c.len();
    if gamma.nrows() != p || gamma.ncols() != p {
        return Err(Error::domain("orthant limits and scale matrix differ in dimension"));
    }
    if !(shape > 0.0) {
        return Err(Error::domain(format!("mixing shape must be positive, got {shape}")));
    }
    if c.iter().any(|v| v.is_nan()) {
        return Err(Error::domain("orthant limits contain NaN"));
    }
    if with_moments && c.iter().any(|v| v.is_infinite()) {
        return Err(Error::domain("moments need finite orthant limits"));
    }
    if c.iter().any(|&v| v == f64::NEG_INFINITY) {
        let mut out = OrthantMoments::empty(p);
        out.prob_error = 0.0;
        return Ok(out);
    }
    let (perm, chol) = reorder(c.as_slice(), gamma)?;
    let limits: Vec<f64> = perm.iter().map(|&i| c[i]).collect();
    let lattice = ShiftedLattice::new(p + 1, opts.shifts.max(2), seed);
    let n_shifts = lattice.n_shifts();
    let mut sums = vec![
        Sums {
            sv: vec![0.0; p],
            svv: vec![0.0; p * p],
            ..Default::default()
        };
        n_shifts
    ];
    let mut x = vec![0.0; p + 1];
    let mut eps = vec![0.0; p];
    let mut z = vec![0.0; p];
    let mut v = vec![0.0; p];
    let mut done = 0;
    let mut target = opts.min_points.max(8);
    let (prob, se) = loop {
        for (r, acc) in sums.iter_mut().enumerate() {
            for k in done..target {
                lattice.point(r, k + 1, &mut x);
                let s = gamma_quantile(shape, x[0]) / shape;
                let root = s.sqrt();
                let mut w = 1.0;
                for i in 0..p {
                    let partial: f64 = (0..i).map(|j| chol[(i, j)] * eps[j]).sum();
                    let diag = chol[(i, i)];
                    let b = (root * limits[i] - partial) / diag;
                    let e = norm_cdf(b);
                    w *= e;
                    if w == 0.0 {
                        break;
                    }
                    let draw = norm_quantile_fast(x[i + 1] * e);
                    eps[i] = if draw.is_finite() { draw.min(b) } else { b };
                    z[i] = partial + diag * eps[i];
                }
                if w == 0.0 || !w.is_finite() {
                    continue;
                }
                acc.weight += w;
                if with_moments {
                    acc.s += w * s;
                    acc.log_s += w * s.ln();
                    for i in 0..p {
                        v[i] = limits[i] - z[i] / root;
                        acc.sv[i] += w * s * v[i];
                    }
                    for i in 0..p {
                        for j in 0..=i {
                            acc.svv[i * p + j] += w * s * v[i] * v[j];
                        }
                    }
                }
            }
        }
        let n = target as f64;
        let estimates: Vec<f64> = sums.iter().map(|a| a.weight / n).collect();
        let mean = estimates.iter().sum::<f64>() / n_shifts as f64;
        let var = estimates.iter().map(|e| (e - mean).powi(2)).sum::<f64>()
            / ((n_shifts - 1) * n_shifts) as f64;
        let se = var.sqrt();
        if se <= opts.target_error || target >= opts.max_points {
            break (mean, se);
        }
        done = target;
        target = (2 * target).min(opts.max_points);
    };

    let mut out = OrthantMoments::empty(p);
    out.log_prob = prob.ln();
    out.prob_error = se;
    if with_moments {
        let total: f64 = sums.iter().map(|a| a.weight).sum();
        if total > 0.0 {
            out.mean_s = sums.iter().map(|a| a.s).sum::<f64>() / total;
            out.mean_log_s = sums.iter().map(|a| a.log_s).sum::<f64>() / total;
            for i in 0..p {
                out.mean_sv[perm[i]] = sums.iter().map(|a| a.sv[i]).sum::<f64>() / total;
                for j in 0..=i {
                    let val = sums.iter().map(|a| a.svv[i * p + j]).sum::<f64>() / total;
                    out.mean_svv[(perm[i], perm[j])] = val;
                    out.mean_svv[(perm[j], perm[i])] = val;
                }
            }
        }
    }
    Ok(out)
}

/// Variable ordering and Cholesky factor of the permuted scale matrix.
fn reorder(c: &[f64], gamma: &DMatrix<f64>) -> Result<(Vec<usize>, DMatrix<f64>)> {
    let p = c.len();
    let mut g = gamma.clone();
    let mut limits = c.to_vec();
    let mut perm: Vec<usize> = (0..p).collect();
    let mut l = DMatrix::<f64>::zeros(p, p);
    let mut y = vec![0.0; p];
    for i in 0..p {
        let mut best = i;
        let mut best_prob = f64::INFINITY;
        for j in i..p {
            let var = g[(j, j)] - (0..i).map(|k| l[(j, k)].powi(2)).sum::<f64>();
            if !(var > 0.0) {
                continue;
            }
            let num = limits[j] - (0..i).map(|k| l[(j, k)] * y[k]).sum::<f64>();
            let prob = norm_cdf(num / var.sqrt());
            if prob < best_prob {
                best_prob = prob;
                best = j;
            }
        }
        if best != i {
            perm.swap(i, best);
            limits.swap(i, best);
            g.swap_rows(i, best);
            g.swap_columns(i, best);
            l.swap_rows(i, best);
        }
        let var = g[(i, i)] - (0..i).map(|k| l[(i, k)].powi(2)).sum::<f64>();
        if !(var > 1e-14 * g[(i, i)].abs()) {
            return Err(not_positive_definite(gamma));
        }
        let diag = var.sqrt();
        l[(i, i)] = diag;
        for r in i + 1..p {
            let dot: f64 = (0..i).map(|k| l[(r, k)] * l[(i, k)]).sum();
            l[(r, i)] = (g[(r, i)] - dot) / diag;
        }
        let b = (limits[i] - (0..i).map(|k| l[(i, k)] * y[k]).sum::<f64>()) / diag;
        y[i] = if b.is_finite() { upper_truncated_normal(b).mean } else { 0.0 };
    }
    Ok((perm, l))
}

pub(crate) fn not_positive_definite(m: &DMatrix<f64>) -> Error {
    let sym = 0.5 * (m + m.transpose());
    let smallest = SymmetricEigen::new(sym)
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    Error::numeric(format!(
        "scale matrix is not positive definite (smallest eigenvalue {smallest:.3e})"
    ))
}

/// Nodes and weights of the Gauss rule with the given Jacobi matrix, weights
/// normalized to sum to one.
fn golub_welsch(diag: &[f64], off: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let m = diag.len();
    let mut jac = DMatrix::zeros(m, m);
    for i in 0..m {
        jac[(i, i)] = diag[i];
        if i + 1 < m {
            jac[(i, i + 1)] = off[i];
            jac[(i + 1, i)] = off[i];
        }
    }
    let eig = SymmetricEigen::new(jac);
    let mut pairs: Vec<(f64, f64)> = (0..m)
        .map(|k| (eig.eigenvalues[k], eig.eigenvectors[(0, k)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total: f64 = pairs.iter().map(|p| p.1).sum();
    pairs.into_iter().map(|(x, w)| (x, w / total)).unzip()
}

/// Gauss rule for the standard normal weight.
pub fn gauss_hermite(m: usize) -> (Vec<f64>, Vec<f64>) {
    let off: Vec<f64> = (1..m).map(|k| (k as f64).sqrt()).collect();
    golub_welsch(&vec![0.0; m], &off)
}

/// Gauss rule for the weight `t^(shape-1) e^-t` on `(0, inf)`.
pub fn gauss_laguerre(m: usize, shape: f64) -> (Vec<f64>, Vec<f64>) {
    let diag: Vec<f64> = (0..m).map(|k| 2.0 * k as f64 + shape).collect();
    let off: Vec<f64> = (1..m)
        .map(|k| (k as f64 * (k as f64 + shape - 1.0)).sqrt())
        .collect();
    golub_welsch(&diag, &off)
}

/// Deterministic product rule for orthant problems whose scale is diagonal plus low
/// rank, `Gamma = diag(sd^2) + K K'`.
///
/// Conditioning on `eta ~ N(0, I_q)` with `Z = K eta + diag(sd) eps` makes the `p`
/// coordinates independent truncated normals, leaving a `(q+1)`-dimensional smooth
/// integral over `(ln S, eta)`. The rule is recentred at the posterior mode of that
/// integrand: a gamma-shaped Gauss–Laguerre rule in `S` sharing the mixing shape, and
/// Gauss–Hermite nodes for `eta` given `S` from the local Gaussian approximation.
#[derive(Debug, Clone)]
pub struct FactorQuadrature {
    shape: f64,
    q: usize,
    scale_nodes: Vec<f64>,
    scale_log_weights: Vec<f64>,
    factor_nodes: Vec<f64>,
    /// `ln w_l + |z_l|^2 / 2`
    factor_log_weights: Vec<f64>,
    /// Rule minus exact value of `E[ln t]` under the gamma weight; subtracted from
    /// `E[ln S]` because `ln` is poorly captured by polynomial rules near zero.
    log_bias: f64,
}

/// Node counts of [`FactorQuadrature`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct QuadratureNodes {
    pub scale: usize,
    /// Per factor dimension; the tensor grid is capped at `MAX_FACTOR_GRID` points.
    pub factor: usize,
}

impl Default for QuadratureNodes {
    fn default() -> Self {
        Self { scale: 10, factor: 5 }
    }
}

const MAX_FACTOR_GRID: usize = 2401;

impl FactorQuadrature {
    pub fn new(shape: f64, q: usize, nodes: QuadratureNodes) -> Result<Self> {
        if !(shape > 0.0) || !shape.is_finite() {
            return Err(Error::domain(format!("mixing shape must be positive, got {shape}")));
        }
        if nodes.scale == 0 || nodes.factor == 0 {
            return Err(Error::domain("quadrature needs at least one node per dimension"));
        }
        let (t, w) = gauss_laguerre(nodes.scale, shape);
        let mut per_dim = nodes.factor;
        while q > 0 && per_dim > 2 && per_dim.pow(q as u32) > MAX_FACTOR_GRID {
            per_dim -= 1;
        }
        let (z1, w1) = gauss_hermite(per_dim);
        let n_grid = per_dim.pow(q as u32);
        let mut factor_nodes = Vec::with_capacity(n_grid * q);
        let mut factor_log_weights = Vec::with_capacity(n_grid);
        for idx in 0..n_grid {
            let mut rest = idx;
            let mut lw = 0.0;
            for _ in 0..q {
                let k = rest % per_dim;
                rest /= per_dim;
                factor_nodes.push(z1[k]);
                lw += w1[k].ln() + 0.5 * z1[k] * z1[k];
            }
            factor_log_weights.push(lw);
        }
        let log_bias = t.iter().zip(&w).map(|(t, w)| w * t.ln()).sum::<f64>() - digamma_unchecked(shape);
        Ok(Self {
            shape,
            q,
            log_bias,
            scale_nodes: t,
            scale_log_weights: w.iter().map(|v| v.ln()).collect(),
            factor_nodes,
            factor_log_weights,
        })
    }

    pub fn shape(&self) -> f64 {
        self.shape
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn len(&self) -> usize {
        self.scale_nodes.len() * self.factor_log_weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Integrates for limits `c`, conditional standard deviations `sd` and loadings
    /// `k` (`p x q`).
    pub fn integrate(
        &self,
        c: &[f64],
        sd: &[f64],
        k: &DMatrix<f64>,
        with_moments: bool,
    ) -> Result<OrthantMoments> {
        let p = c.len();
        let q = self.q;
        if sd.len() != p || k.nrows() != p || k.ncols() != q {
            return Err(Error::domain("orthant limits, deviations and loadings differ in shape"));
        }
        if c.iter().chain(sd).any(|v| !v.is_finite()) || sd.iter().any(|&v| v <= 0.0) {
            return Err(Error::domain("orthant limits and deviations must be finite, deviations positive"));
        }
        let a = self.shape;
        let (mode_s, mode_eta, hess) = self.mode(c, sd, k)?;

        // eta | s ~ N(mode_eta + slope (s - mode_s), (-H_ee)^-1)
        let (slope, cov_chol, log_det_chol) = if q > 0 {
            let h_ee = -hess.view((1, 1), (q, q)).into_owned();
            let h_es = -hess.view((1, 0), (q, 1)).into_owned();
            let chol = Cholesky::new(h_ee).ok_or_else(|| {
                Error::numeric("factor block of the posterior curvature is not negative definite")
            })?;
            let slope = -chol.solve(&h_es).column(0).into_owned();
            let cov = chol.inverse();
            let cov_chol = Cholesky::new(cov)
                .ok_or_else(|| Error::numeric("posterior factor covariance is singular"))?
                .unpack();
            let ld = cov_chol.diagonal().iter().map(|v| v.ln()).sum::<f64>();
            (slope, cov_chol, ld)
        } else {
            (DVector::zeros(0), DMatrix::zeros(0, 0), 0.0)
        };
        let rate = a * (-mode_s).exp();

        let k_rows: Vec<f64> = (0..p).flat_map(|j| (0..q).map(move |i| (j, i))).map(|ji| k[ji]).collect();
        let chol_rows: Vec<f64> = (0..q).flat_map(|i| (0..q).map(move |j| (i, j))).map(|ij| cov_chol[ij]).collect();
        let inv_sd: Vec<f64> = sd.iter().map(|v| 1.0 / v).collect();
        let mut eta = vec![0.0; q];
        let mut ke = vec![0.0; p];
        let mut mean = vec![0.0; p];
        let mut var = vec![0.0; p];
        let mut amp = vec![0.0; p];
        let mut total = 0.0;
        let mut sum_s = 0.0;
        let mut sum_log_s = 0.0;
        let mut sum_sv = vec![0.0; p];
        let mut sum_svv = vec![0.0; p * p];
        let mut offset = f64::NAN;

        for (&t, &lw_scale) in self.scale_nodes.iter().zip(&self.scale_log_weights) {
            let s_val = t / rate;
            let log_s = s_val.ln();
            let root = s_val.sqrt();
            let ds = log_s - mode_s;
            let base = lw_scale + a * (a / rate).ln() - (a - rate) * s_val + log_det_chol;
            for (l, &lw_factor) in self.factor_log_weights.iter().enumerate() {
                let z = &self.factor_nodes[l * q..(l + 1) * q];
                let mut norm2 = 0.0;
                for i in 0..q {
                    let row = &chol_rows[i * q..=i * q + i];
                    let e = mode_eta[i] + slope[i] * ds + row.iter().zip(z).map(|(l, z)| l * z).sum::<f64>();
                    eta[i] = e;
                    norm2 += e * e;
                }
                let mut lw = base + lw_factor - 0.5 * norm2;
                // masses are multiplied and folded into the log weight before they underflow
                let mut mass = 1.0;
                for j in 0..p {
                    let dot: f64 = k_rows[j * q..(j + 1) * q].iter().zip(&eta).map(|(k, e)| k * e).sum();
                    ke[j] = dot;
                    let h = (root * c[j] - dot) * inv_sd[j];
                    let (m, mu, v) = upper_truncated_normal_mass(h);
                    if m > 0.0 {
                        mass *= m;
                        if mass < 1e-200 {
                            lw += mass.ln();
                            mass = 1.0;
                        }
                    } else {
                        lw += upper_truncated_normal(h).log_mass;
                    }
                    mean[j] = mu;
                    var[j] = v;
                }
                lw += mass.ln();
                if !lw.is_finite() {
                    continue;
                }
                if offset.is_nan() || lw > offset {
                    // keep the largest log weight as reference so nothing overflows
                    let shrink = if offset.is_nan() { 0.0 } else { (offset - lw).exp() };
                    total *= shrink;
                    sum_s *= shrink;
                    sum_log_s *= shrink;
                    sum_sv.iter_mut().chain(sum_svv.iter_mut()).for_each(|v| *v *= shrink);
                    offset = lw;
                }
                let w = (lw - offset).exp();
                if w == 0.0 {
                    continue;
                }
                total += w;
                sum_s += w * s_val;
                sum_log_s += w * log_s;
                if with_moments {
                    for j in 0..p {
                        amp[j] = s_val * c[j] - root * (ke[j] + sd[j] * mean[j]);
                        sum_sv[j] += w * amp[j];
                    }
                    for i in 0..p {
                        let ai = w * amp[i] / s_val;
                        for j in 0..=i {
                            sum_svv[i * p + j] += ai * amp[j];
                        }
                        sum_svv[i * p + i] += w * sd[i] * sd[i] * var[i];
                    }
                }
            }
        }

        let mut out = OrthantMoments::empty(p);
        if !(total > 0.0) {
            return Ok(out);
        }
        out.log_prob = offset + total.ln();
        out.mean_s = sum_s / total;
        out.mean_log_s = sum_log_s / total - self.log_bias;
        if with_moments {
            for i in 0..p {
                out.mean_sv[i] = sum_sv[i] / total;
                for j in 0..=i {
                    let v = sum_svv[i * p + j] / total;
                    out.mean_svv[(i, j)] = v;
                    out.mean_svv[(j, i)] = v;
                }
            }
        }
        Ok(out)
    }

    /// Mode of the log integrand over `(ln S, eta)` and the Hessian there.
    fn mode(&self, c: &[f64], sd: &[f64], k: &DMatrix<f64>) -> Result<(f64, DVector<f64>, DMatrix<f64>)> {
        let dim = self.q + 1;
        let mut y = DVector::zeros(dim);
        let (mut value, mut grad, mut hess) = self.local(&y, c, sd, k);
        for _ in 0..100 {
            let mut neg = -&hess;
            let mut ridge = 0.0;
            let step = loop {
                if let Some(ch) = Cholesky::new(neg.clone()) {
                    break ch.solve(&grad);
                }
                let bump = if ridge == 0.0 { 1e-8 * (1.0 + neg.diagonal().amax()) } else { ridge };
                for i in 0..dim {
                    neg[(i, i)] += bump;
                }
                ridge = 2.0 * bump;
                if ridge > 1e12 {
                    return Err(Error::numeric("could not regularize orthant mode search"));
                }
            };
            let mut scale = 1.0;
            let mut accepted = None;
            while scale > 1e-12 {
                let trial = &y + scale * &step;
                let (v, g, h) = self.local(&trial, c, sd, k);
                if v.is_finite() && v >= value - 1e-14 * value.abs() {
                    accepted = Some((trial, v, g, h));
                    break;
                }
                scale *= 0.5;
            }
            let Some((trial, v, g, h)) = accepted else { break };
            let moved = (scale * &step).amax();
            y = trial;
            value = v;
            grad = g;
            hess = h;
            if moved < 1e-11 * (1.0 + y.amax()) {
                break;
            }
        }
        let eta = y.rows(1, self.q).into_owned();
        Ok((y[0], eta, hess))
    }

    /// Log integrand (up to a constant), gradient and Hessian at `y = (ln S, eta)`.
    fn local(&self, y: &DVector<f64>, c: &[f64], sd: &[f64], k: &DMatrix<f64>) -> (f64, DVector<f64>, DMatrix<f64>) {
        let q = self.q;
        let a = self.shape;
        let s = y[0];
        let root = (0.5 * s).exp();
        let s_val = root * root;
        let eta = y.rows(1, q);
        let mut value = a * s - a * s_val - 0.5 * eta.norm_squared();
        let mut grad = DVector::zeros(q + 1);
        let mut hess = DMatrix::zeros(q + 1, q + 1);
        grad[0] = a - a * s_val;
        hess[(0, 0)] = -a * s_val;
        for i in 0..q {
            grad[i + 1] = -eta[i];
            hess[(i + 1, i + 1)] = -1.0;
        }
        for j in 0..c.len() {
            let dot: f64 = (0..q).map(|i| k[(j, i)] * eta[i]).sum();
            let h = (root * c[j] - dot) / sd[j];
            let t = upper_truncated_normal(h);
            value += t.log_mass;
            let mills = -t.mean;
            let curv = t.variance - 1.0;
            let dh_ds = 0.5 * root * c[j] / sd[j];
            grad[0] += mills * dh_ds;
            hess[(0, 0)] += curv * dh_ds * dh_ds + 0.5 * mills * dh_ds;
            for i in 0..q {
                let dh_de = -k[(j, i)] / sd[j];
                grad[i + 1] += mills * dh_de;
                hess[(0, i + 1)] += curv * dh_ds * dh_de;
                hess[(i + 1, 0)] = hess[(0, i + 1)];
                for m in 0..=i {
                    let dm = -k[(j, m)] / sd[j];
                    hess[(i + 1, m + 1)] += curv * dh_de * dm;
                    hess[(m + 1, i + 1)] = hess[(i + 1, m + 1)];
                }
            }
        }
        (value, grad, hess)
    }
}
