//! Information criteria, clustering agreement and grid search.

use std::cmp::Ordering;
use std::collections::HashMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factor::CovarianceStructure;
use crate::fit::{fit, free_param_count, Family, FitConfig, FitResult};

/// `2 loglik - m ln n`; larger is better.
pub fn bic(loglik: f64, n_free_params: usize, n: usize) -> f64 {
    2.0 * loglik - n_free_params as f64 * (n as f64).ln()
}

/// BIC plus twice the entropy term `sum z ln z` of the responsibilities.
pub fn icl(bic: f64, z: &DMatrix<f64>) -> f64 {
    bic + 2.0 * z.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

fn choose2(k: f64) -> f64 {
    0.5 * k * (k - 1.0)
}

/// Adjusted Rand index of two labelings.
pub fn ari(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::domain(format!("labelings differ in length ({} vs {})", a.len(), b.len())));
    }
    let n = a.len();
    if n < 2 {
        return Ok(1.0);
    }
    let mut table: HashMap<(usize, usize), usize> = HashMap::new();
    let mut rows: HashMap<usize, usize> = HashMap::new();
    let mut cols: HashMap<usize, usize> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }
    let index: f64 = table.values().map(|&c| choose2(c as f64)).sum();
    let sum_a: f64 = rows.values().map(|&c| choose2(c as f64)).sum();
    let sum_b: f64 = cols.values().map(|&c| choose2(c as f64)).sum();
    let expected = sum_a * sum_b / choose2(n as f64);
    let max = 0.5 * (sum_a + sum_b);
    if max == expected {
        // both labelings are trivial (all one cluster, or all singletons)
        return Ok(if sum_a == sum_b { 1.0 } else { 0.0 });
    }
    Ok((index - expected) / (max - expected))
}

/// Cells to fit: every combination of family, structure, G and q.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub families: Vec<Family>,
    pub structures: Vec<CovarianceStructure>,
    /// Inclusive range of component counts.
    pub g_range: (usize, usize),
    /// Inclusive range of factor counts.
    pub q_range: (usize, usize),
    #[serde(default)]
    pub config: FitConfig,
}

impl GridSpec {
    pub fn validate(&self, p: usize) -> Result<()> {
        if self.families.is_empty() || self.structures.is_empty() {
            return Err(Error::Invalid("grid needs at least one family and one structure".into()));
        }
        let (g0, g1) = self.g_range;
        let (q0, q1) = self.q_range;
        if g0 == 0 || g1 < g0 || q0 == 0 || q1 < q0 {
            return Err(Error::Invalid(format!("empty or invalid ranges G={g0}..={g1}, q={q0}..={q1}")));
        }
        if q1 >= p {
            return Err(Error::Invalid(format!("largest q ({q1}) must be below the dimension ({p})")));
        }
        self.config.validate()
    }
}

/// One fitted (or failed) grid cell.
#[derive(Debug, Clone)]
pub struct GridEntry {
    pub family: Family,
    pub structure: CovarianceStructure,
    pub g: usize,
    pub q: usize,
    pub n_free_params: usize,
    pub result: std::result::Result<FitResult, String>,
    pub bic: f64,
    pub icl: f64,
}

impl GridEntry {
    pub fn converged(&self) -> bool {
        self.result.as_ref().is_ok_and(|r| r.converged)
    }
}

fn rank(a: &GridEntry, b: &GridEntry) -> Ordering {
    let tier = |e: &GridEntry| match &e.result {
        Ok(r) if r.converged => 0,
        Ok(_) => 1,
        Err(_) => 2,
    };
    tier(a)
        .cmp(&tier(b))
        .then_with(|| b.bic.partial_cmp(&a.bic).unwrap_or(Ordering::Equal))
        .then_with(|| a.n_free_params.cmp(&b.n_free_params))
        .then_with(|| a.structure.id().cmp(b.structure.id()))
}

/// Fits every cell and ranks converged fits first, then by BIC (ties toward fewer
/// parameters, then structure id). Failed cells are kept at the end.
pub fn grid_search(data: &DMatrix<f64>, spec: &GridSpec) -> Result<Vec<GridEntry>> {
    let (n, p) = data.shape();
    spec.validate(p)?;
    let mut entries = Vec::new();
    for &family in &spec.families {
        for &structure in &spec.structures {
            for g in spec.g_range.0..=spec.g_range.1 {
                for q in spec.q_range.0..=spec.q_range.1 {
                    let m = free_param_count(family, structure, p, q, g)?;
                    let outcome = fit(data, family, structure, g, q, &spec.config).map_err(|e| e.to_string());
                    let (b, i) = match &outcome {
                        Ok(r) => {
                            let b = bic(r.loglik(), m, n);
                            (b, icl(b, &r.z))
                        }
                        Err(e) => {
                            log::warn!("{family} {structure} G={g} q={q} failed: {e}");
                            (f64::NEG_INFINITY, f64::NEG_INFINITY)
                        }
                    };
                    entries.push(GridEntry {
                        family,
                        structure,
                        g,
                        q,
                        n_free_params: m,
                        result: outcome,
                        bic: b,
                        icl: i,
                    });
                }
            }
        }
    }
    if entries.iter().all(|e| e.result.is_err()) {
        let reasons: Vec<String> = entries.iter().filter_map(|e| e.result.as_ref().err().cloned()).collect();
        return Err(Error::FitFailed(format!("every grid cell failed: {}", reasons.join("; "))));
    }
    entries.sort_by(rank);
    Ok(entries)
}
