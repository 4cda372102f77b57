//! The low-rank-plus-diagonal covariance `Lambda Lambda' + Psi`: Woodbury solves,
//! determinant-lemma log-determinants, the eight parsimonious tying patterns and
//! their free-parameter counts.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `Lambda Lambda' + Psi` with a cached Cholesky factor of the `q x q` capacitance
/// matrix `I + Lambda' Psi^-1 Lambda`. Immutable; every change builds a new value.
#[derive(Debug, Clone)]
pub struct FactorCovariance {
    lambda: DMatrix<f64>,
    psi: DVector<f64>,
    psi_inv_lambda: DMatrix<f64>,
    capacitance: Option<Cholesky<f64, Dyn>>,
    log_det: f64,
}

impl FactorCovariance {
    pub fn new(lambda: DMatrix<f64>, psi: DVector<f64>) -> Result<Self> {
        let p = psi.len();
        if lambda.nrows() != p {
            return Err(Error::domain(format!(
                "loadings have {} rows but psi has length {p}",
                lambda.nrows()
            )));
        }
        if let Some(bad) = psi.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
            return Err(Error::domain(format!("noise variances must be positive, found {bad}")));
        }
        if lambda.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("loadings must be finite"));
        }
        let q = lambda.ncols();
        let mut psi_inv_lambda = lambda.clone();
        for (j, mut row) in psi_inv_lambda.row_iter_mut().enumerate() {
            row /= psi[j];
        }
        let mut log_det: f64 = psi.iter().map(|v| v.ln()).sum();
        let capacitance = if q > 0 {
            let cap = DMatrix::identity(q, q) + lambda.transpose() * &psi_inv_lambda;
            let chol = Cholesky::new(cap).ok_or_else(|| {
                Error::numeric("capacitance matrix I + L'Psi^-1 L is not positive definite")
            })?;
            log_det += 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
            Some(chol)
        } else {
            None
        };
        Ok(Self {
            lambda,
            psi,
            psi_inv_lambda,
            capacitance,
            log_det,
        })
    }

    /// Diagonal covariance (no factors).
    pub fn diagonal(psi: DVector<f64>) -> Result<Self> {
        let p = psi.len();
        Self::new(DMatrix::zeros(p, 0), psi)
    }

    pub fn p(&self) -> usize {
        self.psi.len()
    }

    pub fn q(&self) -> usize {
        self.lambda.ncols()
    }

    pub fn lambda(&self) -> &DMatrix<f64> {
        &self.lambda
    }

    pub fn psi(&self) -> &DVector<f64> {
        &self.psi
    }

    /// `ln |Lambda Lambda' + Psi|` via the matrix determinant lemma.
    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    /// `(Lambda Lambda' + Psi)^-1 rhs` through the Woodbury identity, without forming
    /// the `p x p` inverse.
    pub fn solve(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = rhs.clone();
        for (j, mut row) in out.row_iter_mut().enumerate() {
            row /= self.psi[j];
        }
        if let Some(chol) = &self.capacitance {
            let inner = chol.solve(&(self.lambda.transpose() * &out));
            out -= &self.psi_inv_lambda * inner;
        }
        out
    }

    pub fn solve_vec(&self, rhs: &DVector<f64>) -> DVector<f64> {
        let mut out = rhs.component_div(&self.psi);
        if let Some(chol) = &self.capacitance {
            let inner = chol.solve(&(self.lambda.transpose() * &out));
            out -= &self.psi_inv_lambda * inner;
        }
        out
    }

    /// Mahalanobis form `r' (Lambda Lambda' + Psi)^-1 r`.
    pub fn quad_form(&self, r: &DVector<f64>) -> f64 {
        r.dot(&self.solve_vec(r))
    }

    pub fn dense(&self) -> DMatrix<f64> {
        let mut s = &self.lambda * self.lambda.transpose();
        for j in 0..self.p() {
            s[(j, j)] += self.psi[j];
        }
        s
    }

    pub fn inverse_dense(&self) -> DMatrix<f64> {
        self.solve(&DMatrix::identity(self.p(), self.p()))
    }

    /// Same loadings with `extra` added to the noise diagonal.
    pub fn with_added_diagonal(&self, extra: &DVector<f64>) -> Result<Self> {
        Self::new(self.lambda.clone(), &self.psi + extra)
    }
}

/// One of the eight parsimonious covariance patterns. The three letters say whether
/// the loadings are tied across groups, whether the noise is tied across groups, and
/// whether the noise is isotropic (`C` = constrained, `U` = unconstrained).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CovarianceStructure {
    CCC,
    CCU,
    CUC,
    CUU,
    UCC,
    UCU,
    UUC,
    UUU,
}

impl CovarianceStructure {
    pub const ALL: [CovarianceStructure; 8] = [
        CovarianceStructure::CCC,
        CovarianceStructure::CCU,
        CovarianceStructure::CUC,
        CovarianceStructure::CUU,
        CovarianceStructure::UCC,
        CovarianceStructure::UCU,
        CovarianceStructure::UUC,
        CovarianceStructure::UUU,
    ];

    pub fn from_flags(loadings_tied: bool, errors_tied: bool, isotropic: bool) -> Self {
        use CovarianceStructure::*;
        match (loadings_tied, errors_tied, isotropic) {
            (true, true, true) => CCC,
            (true, true, false) => CCU,
            (true, false, true) => CUC,
            (true, false, false) => CUU,
            (false, true, true) => UCC,
            (false, true, false) => UCU,
            (false, false, true) => UUC,
            (false, false, false) => UUU,
        }
    }

    fn letters(self) -> [u8; 3] {
        let id = self.id().as_bytes();
        [id[0], id[1], id[2]]
    }

    pub fn id(self) -> &'static str {
        use CovarianceStructure::*;
        match self {
            CCC => "CCC",
            CCU => "CCU",
            CUC => "CUC",
            CUU => "CUU",
            UCC => "UCC",
            UCU => "UCU",
            UUC => "UUC",
            UUU => "UUU",
        }
    }

    /// `Lambda_g = Lambda`
    pub fn loadings_tied(self) -> bool {
        self.letters()[0] == b'C'
    }

    /// `Psi_g = Psi`
    pub fn errors_tied(self) -> bool {
        self.letters()[1] == b'C'
    }

    /// `Psi_g = psi_g I`
    pub fn isotropic(self) -> bool {
        self.letters()[2] == b'C'
    }
}

impl fmt::Display for CovarianceStructure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for CovarianceStructure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CovarianceStructure::ALL
            .into_iter()
            .find(|c| c.id().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Invalid(format!("unknown covariance structure '{s}'")))
    }
}

/// Free covariance parameters of a structure for `G` groups of `p`-variate data with
/// `q` factors.
pub fn param_count(structure: CovarianceStructure, p: usize, q: usize, g: usize) -> Result<usize> {
    if p == 0 || q == 0 || g == 0 || q >= p {
        return Err(Error::domain(format!(
            "parameter count needs 0 < q < p and G >= 1 (p={p}, q={q}, G={g})"
        )));
    }
    let per_loading = p * q - q * (q - 1) / 2;
    let loadings = if structure.loadings_tied() { per_loading } else { g * per_loading };
    let noise = match (structure.errors_tied(), structure.isotropic()) {
        (true, true) => 1,
        (true, false) => p,
        (false, true) => g,
        (false, false) => g * p,
    };
    Ok(loadings + noise)
}

/// Weighted scatter matrix of one group for the loading/noise update.
#[derive(Debug, Clone)]
pub struct GroupScatter {
    pub scatter: DMatrix<f64>,
    /// Effective group size; pooled statistics are weighted by it.
    pub weight: f64,
}

/// One conditional-maximization step for the loadings and noise of every group under
/// the tying pattern of `structure`, starting from `current`.
pub fn constrained_update(
    structure: CovarianceStructure,
    groups: &[GroupScatter],
    current: &[FactorCovariance],
    psi_floor: f64,
) -> Result<Vec<FactorCovariance>> {
    if groups.len() != current.len() || groups.is_empty() {
        return Err(Error::domain("need one scatter matrix per current group"));
    }
    let p = current[0].p();
    let q = current[0].q();
    let total: f64 = groups.iter().map(|g| g.weight).sum();
    if !(total > 0.0) {
        return Err(Error::numeric("group weights sum to zero"));
    }

    // beta_g = Lambda_g' Sigma_g^-1, theta_g = I - beta_g Lambda_g + beta_g S_g beta_g'
    let mut betas = Vec::with_capacity(groups.len());
    let mut thetas = Vec::with_capacity(groups.len());
    let mut sbs = Vec::with_capacity(groups.len());
    for (grp, fc) in groups.iter().zip(current) {
        let beta = fc.solve(fc.lambda()).transpose();
        let sb = &grp.scatter * beta.transpose();
        let theta = DMatrix::identity(q, q) - &beta * fc.lambda() + &beta * &sb;
        betas.push(beta);
        thetas.push(theta);
        sbs.push(sb);
    }

    let invert = |m: &DMatrix<f64>| -> Result<DMatrix<f64>> {
        let sym = 0.5 * (m + m.transpose());
        Cholesky::new(sym)
            .map(|c| c.inverse())
            .ok_or_else(|| Error::numeric("theta matrix is singular; restart from a new seed"))
    };

    let loadings: Vec<DMatrix<f64>> = if !structure.loadings_tied() {
        sbs.iter()
            .zip(&thetas)
            .map(|(sb, th)| Ok(sb * invert(th)?))
            .collect::<Result<_>>()?
    } else if structure.errors_tied() {
        let mut num = DMatrix::zeros(p, q);
        let mut den = DMatrix::zeros(q, q);
        for (i, grp) in groups.iter().enumerate() {
            num += grp.weight * &sbs[i];
            den += grp.weight * &thetas[i];
        }
        let lambda = num * invert(&den)?;
        vec![lambda; groups.len()]
    } else {
        // Row-wise: each row weighs the groups by n_g / psi_gj.
        let mut lambda = DMatrix::zeros(p, q);
        for j in 0..p {
            let mut num = DMatrix::zeros(1, q);
            let mut den = DMatrix::zeros(q, q);
            for (i, grp) in groups.iter().enumerate() {
                let w = grp.weight / current[i].psi()[j];
                num += w * sbs[i].row(j);
                den += w * &thetas[i];
            }
            lambda.set_row(j, &(num * invert(&den)?).row(0));
        }
        vec![lambda; groups.len()]
    };

    // diag(S_g - 2 Lambda_g beta_g S_g + Lambda_g theta_g Lambda_g')
    let residuals: Vec<DVector<f64>> = (0..groups.len())
        .map(|i| {
            let lam = &loadings[i];
            let lt = lam * &thetas[i];
            DVector::from_fn(p, |j, _| {
                let mut v = groups[i].scatter[(j, j)];
                for k in 0..q {
                    v += -2.0 * lam[(j, k)] * sbs[i][(j, k)] + lt[(j, k)] * lam[(j, k)];
                }
                v
            })
        })
        .collect();

    let floor = |v: DVector<f64>| v.map(|x| if x.is_finite() { x.max(psi_floor) } else { psi_floor });
    let noises: Vec<DVector<f64>> = match (structure.errors_tied(), structure.isotropic()) {
        (false, false) => residuals.into_iter().map(floor).collect(),
        (false, true) => residuals
            .into_iter()
            .map(|r| floor(DVector::from_element(p, r.mean())))
            .collect(),
        (true, iso) => {
            let mut pooled = DVector::zeros(p);
            for (grp, r) in groups.iter().zip(&residuals) {
                pooled += (grp.weight / total) * r;
            }
            if iso {
                pooled = DVector::from_element(p, pooled.mean());
            }
            vec![floor(pooled); groups.len()]
        }
    };

    loadings
        .into_iter()
        .zip(noises)
        .map(|(l, n)| FactorCovariance::new(l, n))
        .collect()
}
