//! Datasets, model archives and configuration files.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factor::{CovarianceStructure, FactorCovariance};
use crate::fit::{Component, Family, FitConfig, FitResult, MixtureModel};
use crate::selection::GridSpec;

/// Numeric data with optional true labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `n x p`, one observation per row.
    pub data: DMatrix<f64>,
    pub columns: Vec<String>,
    /// Labels mapped to `0..k` in order of first appearance.
    pub labels: Option<Vec<usize>>,
    pub label_names: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CsvOptions {
    pub delimiter: u8,
    pub has_header: bool,
    /// Header name of the label column, or its 1-based position without a header.
    pub label_column: Option<String>,
}

impl Default for CsvOptions {
    fn default() -> Self {
        Self {
            delimiter: b',',
            has_header: true,
            label_column: None,
        }
    }
}

fn parse_error(row: usize, column: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        row,
        column,
        message: message.into(),
    }
}

pub fn load_csv(path: impl AsRef<Path>, options: &CsvOptions) -> Result<Dataset> {
    let file = File::open(path.as_ref())?;
    read_csv(file, options)
}

/// Parses CSV text. Row numbers in errors count data rows from 1 (the header is not
/// counted); columns count from 1.
pub fn read_csv<R: Read>(reader: R, options: &CsvOptions) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(options.delimiter)
        .has_headers(options.has_header)
        .flexible(true)
        .from_reader(reader);
    let header: Option<Vec<String>> = if options.has_header {
        Some(rdr.headers()?.iter().map(|h| h.trim().to_string()).collect())
    } else {
        None
    };
    let label_index = match (&options.label_column, &header) {
        (None, _) => None,
        (Some(name), Some(h)) => Some(
            h.iter()
                .position(|c| c == name)
                .ok_or_else(|| Error::Invalid(format!("label column '{name}' not found in header")))?,
        ),
        (Some(pos), None) => {
            let k: usize = pos
                .parse()
                .map_err(|_| Error::Invalid(format!("without a header the label column must be a 1-based position, got '{pos}'")))?;
            if k == 0 {
                return Err(Error::Invalid("label column positions start at 1".into()));
            }
            Some(k - 1)
        }
    };
    let mut width = header.as_ref().map(|h| h.len());
    let mut values = Vec::new();
    let mut raw_labels = Vec::new();
    let mut n = 0;
    for (r, record) in rdr.records().enumerate() {
        let record = record?;
        let row = r + 1;
        let expected = *width.get_or_insert(record.len());
        if record.len() != expected {
            return Err(parse_error(row, record.len().min(expected) + 1, format!("expected {expected} fields, found {}", record.len())));
        }
        for (c, cell) in record.iter().enumerate() {
            if Some(c) == label_index {
                raw_labels.push(cell.trim().to_string());
                continue;
            }
            let cell = cell.trim();
            if cell.is_empty() || cell.eq_ignore_ascii_case("na") || cell.eq_ignore_ascii_case("nan") {
                return Err(parse_error(row, c + 1, "missing value"));
            }
            let v: f64 = cell.parse().map_err(|_| parse_error(row, c + 1, format!("'{cell}' is not a number")))?;
            if !v.is_finite() {
                return Err(parse_error(row, c + 1, format!("'{cell}' is not finite")));
            }
            values.push(v);
        }
        n += 1;
    }
    let total = width.unwrap_or(0);
    if let Some(i) = label_index {
        if i >= total {
            return Err(Error::Invalid(format!("label column {} is beyond the {total} columns", i + 1)));
        }
    }
    let p = total - usize::from(label_index.is_some());
    if n < 2 || p < 1 {
        return Err(Error::Invalid(format!("need at least 2 rows and 1 numeric column, got {n} x {p}")));
    }
    let columns = match header {
        Some(h) => h.into_iter().enumerate().filter(|(i, _)| Some(*i) != label_index).map(|(_, s)| s).collect(),
        None => (1..=p).map(|j| format!("x{j}")).collect(),
    };
    let (labels, label_names) = if label_index.is_some() {
        let mut names: Vec<String> = Vec::new();
        let mut lookup: HashMap<String, usize> = HashMap::new();
        let ids = raw_labels
            .into_iter()
            .map(|l| {
                *lookup.entry(l.clone()).or_insert_with(|| {
                    names.push(l);
                    names.len() - 1
                })
            })
            .collect();
        (Some(ids), names)
    } else {
        (None, Vec::new())
    };
    Ok(Dataset {
        data: DMatrix::from_row_slice(n, p, &values),
        columns,
        labels,
        label_names,
    })
}

/// Writes rows at full precision, with an optional trailing label column.
pub fn write_csv(path: impl AsRef<Path>, data: &DMatrix<f64>, columns: Option<&[String]>, labels: Option<(&str, &[String])>) -> Result<()> {
    let file = File::create(path.as_ref())?;
    write_csv_to(file, data, columns, labels)
}

pub fn write_csv_to<W: Write>(writer: W, data: &DMatrix<f64>, columns: Option<&[String]>, labels: Option<(&str, &[String])>) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    if let Some(cols) = columns {
        let mut head: Vec<String> = cols.to_vec();
        if let Some((name, _)) = labels {
            head.push(name.to_string());
        }
        w.write_record(&head)?;
    }
    for (i, row) in data.row_iter().enumerate() {
        let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        if let Some((_, l)) = labels {
            rec.push(l[i].clone());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Per-column centring and scaling applied before fitting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardization {
    /// Column means and population standard deviations.
    pub fn from_data(data: &DMatrix<f64>) -> Result<Self> {
        let n = data.nrows() as f64;
        let mut mean = Vec::new();
        let mut scale = Vec::new();
        for (j, col) in data.column_iter().enumerate() {
            let m = col.mean();
            let sd = (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
            if !(sd > 0.0) {
                return Err(Error::Invalid(format!("column {} is constant and cannot be standardized", j + 1)));
            }
            mean.push(m);
            scale.push(sd);
        }
        Ok(Self { mean, scale })
    }

    pub fn apply(&self, data: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(data.nrows(), data.ncols(), |i, j| (data[(i, j)] - self.mean[j]) / self.scale[j])
    }

    pub fn invert(&self, data: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(data.nrows(), data.ncols(), |i, j| data[(i, j)] * self.scale[j] + self.mean[j])
    }
}

pub const ARCHIVE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentRecord {
    pub mu: Vec<f64>,
    /// `delta` for SDB, `alpha` for GH.
    pub skew: Vec<f64>,
    /// Loadings, one row per variable.
    pub lambda: Vec<Vec<f64>>,
    pub psi: Vec<f64>,
    pub nu: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitMetadata {
    pub seed: u64,
    pub config: FitConfig,
    pub n_obs: usize,
    pub loglik: f64,
    /// `2 loglik - m ln n`, larger is better.
    pub bic: f64,
    pub icl: f64,
    pub n_free_params: usize,
    pub iterations: usize,
    pub converged: bool,
    pub loglik_trace: Vec<f64>,
    pub degenerate: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelArchive {
    pub format_version: u32,
    pub family: Family,
    pub structure: CovarianceStructure,
    pub g: usize,
    pub p: usize,
    pub q: usize,
    pub pi: Vec<f64>,
    pub components: Vec<ComponentRecord>,
    #[serde(default)]
    pub standardization: Option<Standardization>,
    #[serde(default)]
    pub fit: Option<FitMetadata>,
}

impl ModelArchive {
    pub fn from_model(model: &MixtureModel) -> Self {
        let components = model
            .components
            .iter()
            .map(|c| ComponentRecord {
                mu: c.mu.iter().copied().collect(),
                skew: c.skew.iter().copied().collect(),
                lambda: c.cov.lambda().row_iter().map(|r| r.iter().copied().collect()).collect(),
                psi: c.cov.psi().iter().copied().collect(),
                nu: c.nu,
            })
            .collect();
        Self {
            format_version: ARCHIVE_FORMAT_VERSION,
            family: model.family,
            structure: model.structure,
            g: model.g(),
            p: model.p(),
            q: model.q(),
            pi: model.pi.clone(),
            components,
            standardization: None,
            fit: None,
        }
    }

    pub fn from_fit(result: &FitResult, config: &FitConfig, n_obs: usize) -> Result<Self> {
        let m = result.model.n_free_params()?;
        let bic = crate::selection::bic(result.loglik(), m, n_obs);
        let mut archive = Self::from_model(&result.model);
        archive.fit = Some(FitMetadata {
            seed: result.seed,
            config: config.clone(),
            n_obs,
            loglik: result.loglik(),
            bic,
            icl: crate::selection::icl(bic, &result.z),
            n_free_params: m,
            iterations: result.iterations,
            converged: result.converged,
            loglik_trace: result.loglik_trace.clone(),
            degenerate: result.degenerate.clone(),
        });
        Ok(archive)
    }

    pub fn to_model(&self) -> Result<MixtureModel> {
        if self.format_version != ARCHIVE_FORMAT_VERSION {
            return Err(Error::Invalid(format!("unsupported archive version {}", self.format_version)));
        }
        if self.components.len() != self.g || self.pi.len() != self.g {
            return Err(Error::Invalid("archive component count disagrees with G".into()));
        }
        let components = self
            .components
            .iter()
            .map(|c| {
                if c.mu.len() != self.p || c.skew.len() != self.p || c.psi.len() != self.p || c.lambda.len() != self.p {
                    return Err(Error::Invalid("archive vectors disagree with p".into()));
                }
                if c.lambda.iter().any(|r| r.len() != self.q) {
                    return Err(Error::Invalid("archive loadings disagree with q".into()));
                }
                let flat: Vec<f64> = c.lambda.iter().flatten().copied().collect();
                let cov = FactorCovariance::new(DMatrix::from_row_slice(self.p, self.q, &flat), DVector::from_vec(c.psi.clone()))?;
                Ok(Component {
                    mu: DVector::from_vec(c.mu.clone()),
                    skew: DVector::from_vec(c.skew.clone()),
                    cov,
                    nu: c.nu,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let model = MixtureModel {
            family: self.family,
            structure: self.structure,
            pi: self.pi.clone(),
            components,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = BufWriter::new(File::create(path.as_ref())?);
        out.write_all(self.to_json()?.as_bytes())?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path.as_ref())?)
    }
}

/// Reads a TOML file whose keys mirror [`FitConfig`]; missing keys take defaults.
pub fn load_config(path: impl AsRef<Path>) -> Result<FitConfig> {
    let text = std::fs::read_to_string(path.as_ref())?;
    parse_config(&text)
}

pub fn parse_config(text: &str) -> Result<FitConfig> {
    let cfg: FitConfig = toml::from_str(text).map_err(|e| Error::Invalid(format!("config: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Reads a TOML grid description: `families`, `structures`, `g_range`, `q_range` and an
/// optional `[config]` table.
pub fn parse_grid(text: &str) -> Result<GridSpec> {
    toml::from_str(text).map_err(|e| Error::Invalid(format!("grid: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn read(text: &str, options: &CsvOptions) -> Result<Dataset> {
        read_csv(text.as_bytes(), options)
    }

    #[test]
    fn parses_numeric_file_with_header() {
        let d = read("a,b\n1,2\n3.5,-4\n5e-1,6\n", &CsvOptions::default()).unwrap();
        assert_eq!(d.data.shape(), (3, 2));
        assert_eq!(d.columns, vec!["a", "b"]);
        assert_eq!(d.data[(2, 0)], 0.5);
        assert!(d.labels.is_none());
    }

    #[test]
    fn reports_bad_cells_with_location() {
        let err = read("a,b\n1,2\nx,4\n", &CsvOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Parse { row: 2, column: 1, .. }), "{err}");
        let err = read("a,b\n1,2\n3\n", &CsvOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Parse { row: 2, .. }), "{err}");
        let err = read("a,b\n1,\n3,4\n", &CsvOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Parse { row: 1, column: 2, .. }), "{err}");
    }

    #[test]
    fn splits_labels() {
        let opts = CsvOptions {
            label_column: Some("class".into()),
            ..CsvOptions::default()
        };
        let d = read("x,class,y\n1,b,2\n3,a,4\n5,b,6\n", &opts).unwrap();
        assert_eq!(d.data.shape(), (3, 2));
        assert_eq!(d.labels, Some(vec![0, 1, 0]));
        assert_eq!(d.label_names, vec!["b", "a"]);
        let headless = CsvOptions {
            has_header: false,
            delimiter: b';',
            label_column: Some("1".into()),
        };
        let d = read("k;1.5;2\nm;3;4\n", &headless).unwrap();
        assert_eq!(d.labels, Some(vec![0, 1]));
        assert_eq!(d.columns, vec!["x1", "x2"]);
    }

    #[test]
    fn csv_round_trip_is_byte_identical() {
        let data = DMatrix::from_row_slice(2, 3, &[0.1, 1.0 / 3.0, -2.5e-300, 1e22, std::f64::consts::PI, -0.0]);
        let cols: Vec<String> = vec!["a".into(), "b".into(), "c".into()];
        let mut first = Vec::new();
        write_csv_to(&mut first, &data, Some(&cols), None).unwrap();
        let back = read_csv(first.as_slice(), &CsvOptions::default()).unwrap();
        assert_eq!(back.data, data);
        let mut second = Vec::new();
        write_csv_to(&mut second, &back.data, Some(&back.columns), None).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn standardization_inverts() {
        let data = DMatrix::from_row_slice(3, 2, &[1.0, 10.0, 2.0, 20.0, 4.0, 60.0]);
        let s = Standardization::from_data(&data).unwrap();
        let z = s.apply(&data);
        assert!(z.column(0).mean().abs() < 1e-15);
        assert!((s.invert(&z) - &data).amax() < 1e-12);
        assert!(Standardization::from_data(&DMatrix::from_element(3, 1, 2.0)).is_err());
    }

    #[test]
    fn archive_round_trip_is_exact() {
        let cov = FactorCovariance::new(DMatrix::from_row_slice(3, 1, &[0.1, 1.0 / 3.0, -0.7]), DVector::from_vec(vec![0.3, 0.2, 1e-7])).unwrap();
        let model = MixtureModel {
            family: Family::Sdb,
            structure: CovarianceStructure::UCU,
            pi: vec![0.3, 0.7],
            components: vec![
                Component {
                    mu: DVector::from_vec(vec![0.1, 0.2, 0.3]),
                    skew: DVector::from_vec(vec![1.0 / 7.0, -2.0, 0.0]),
                    cov: cov.clone(),
                    nu: 12.345678901234567,
                },
                Component {
                    mu: DVector::from_vec(vec![-1e-12, 5.0, 6.0]),
                    skew: DVector::from_vec(vec![0.5, 0.25, 0.125]),
                    cov,
                    nu: 3.0,
                },
            ],
        };
        let archive = ModelArchive::from_model(&model);
        let text = archive.to_json().unwrap();
        let back = ModelArchive::from_json(&text).unwrap();
        assert_eq!(back, archive);
        let restored = back.to_model().unwrap();
        for (a, b) in restored.components.iter().zip(&model.components) {
            assert_eq!(a.mu, b.mu);
            assert_eq!(a.skew, b.skew);
            assert_eq!(a.cov.lambda(), b.cov.lambda());
            assert_eq!(a.cov.psi(), b.cov.psi());
            assert_eq!(a.nu.to_bits(), b.nu.to_bits());
        }
        assert_eq!(back.to_json().unwrap(), text);
    }

    #[test]
    fn config_defaults_and_overrides() {
        let cfg = parse_config("max_iter = 50\nseed = 9\nnu_bracket = [2.5, 100.0]\n[moments]\ndegenerate_below = 1e-10\n[moments.engine]\nkind = \"quadrature\"\nscale = 12\nfactor = 7\n").unwrap();
        assert_eq!(cfg.max_iter, 50);
        assert_eq!(cfg.nu_bracket, (2.5, 100.0));
        assert_eq!(cfg.tol, FitConfig::default().tol);
        assert_eq!(cfg.moments.nodes().scale, 12);
        assert!(parse_config("tol = -1.0").is_err());
        assert!(parse_config("max_iters = 5").is_err());
        assert!(parse_config("max_iter = \"many\"").is_err());
    }

    #[test]
    fn grid_file() {
        let grid = parse_grid("families = [\"sdb\", \"gh\"]\nstructures = [\"CCC\", \"UUU\"]\ng_range = [1, 3]\nq_range = [1, 1]\n[config]\nmax_iter = 20\n").unwrap();
        assert_eq!(grid.families, vec![Family::Sdb, Family::Gh]);
        assert_eq!(grid.structures, vec![CovarianceStructure::CCC, CovarianceStructure::UUU]);
        assert_eq!(grid.g_range, (1, 3));
        assert_eq!(grid.config.max_iter, 20);
        assert!(parse_grid("families = [\"skew\"]").is_err());
    }
}
