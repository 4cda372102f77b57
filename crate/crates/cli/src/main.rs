use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nalgebra::{DMatrix, DVector};

use skewfa::distributions::SdbComponentParams;
use skewfa::estep::{mc_oracle_moments, sdb_moments, MomentConfig};
use skewfa::factor::{CovarianceStructure, FactorCovariance};
use skewfa::fit::{e_step, fit, map_labels, sample_mixture, Family, FitConfig};
use skewfa::io::{load_config, load_csv, parse_grid, write_csv, ComponentRecord, CsvOptions, Dataset, ModelArchive, Standardization};
use skewfa::selection::{ari, grid_search, GridSpec};
use skewfa::Error;

#[derive(Parser, Debug)]
#[command(name = "skewfa", version, about = "Mixtures of skew-t factor analyzers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit one model and write its archive.
    Fit(FitArgs),
    /// Draw a labelled sample from an archived model.
    Sample(SampleArgs),
    /// Fit a grid of models and rank them by BIC.
    Select(SelectArgs),
    /// Compare an archived model's clustering with known labels.
    Evaluate(EvaluateArgs),
    /// Compare E-step moments at one point with a Monte Carlo estimate.
    MomentsCheck(MomentsArgs),
}

#[derive(Args, Debug)]
struct CsvArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = ',')]
    delimiter: char,
    /// The file has no header row.
    #[arg(long)]
    no_header: bool,
    /// Name (or 1-based position without a header) of a column holding true labels.
    #[arg(long)]
    label_column: Option<String>,
}

impl CsvArgs {
    fn load(&self) -> Result<Dataset, Failure> {
        if !self.delimiter.is_ascii() {
            return Err(Failure::Usage("the delimiter must be a single ASCII character".into()));
        }
        let options = CsvOptions {
            delimiter: self.delimiter as u8,
            has_header: !self.no_header,
            label_column: self.label_column.clone(),
        };
        load_csv(&self.data, &options).map_err(|e| Failure::from(e).context(&self.data))
    }
}

#[derive(Args, Debug)]
struct TuningArgs {
    #[arg(long)]
    seed: Option<u64>,
    /// TOML file of fit settings; flags given here take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Z-score every column before fitting.
    #[arg(long)]
    standardize: bool,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    starts: Option<usize>,
}

impl TuningArgs {
    fn resolve(&self, base: FitConfig) -> Result<FitConfig, Failure> {
        let mut cfg = match &self.config {
            Some(path) => load_config(path).map_err(|e| Failure::from(e).context(path))?,
            None => base,
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(m) = self.max_iter {
            cfg.max_iter = m;
        }
        if let Some(t) = self.tol {
            cfg.tol = t;
        }
        if let Some(s) = self.starts {
            cfg.n_starts = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct FitArgs {
    #[command(flatten)]
    csv: CsvArgs,
    #[arg(long, default_value = "sdb", value_parser = parse_family)]
    family: Family,
    #[arg(long, default_value = "UUU", value_parser = parse_structure)]
    structure: CovarianceStructure,
    #[arg(long = "G")]
    g: usize,
    #[arg(long)]
    q: usize,
    #[command(flatten)]
    tuning: TuningArgs,
    /// Where to write the model archive.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Where to write MAP cluster labels, one per row.
    #[arg(long)]
    labels_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SampleArgs {
    /// Model archive; a hand-written file needs only the parameter fields.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SelectArgs {
    #[command(flatten)]
    csv: CsvArgs,
    /// TOML grid file with `families`, `structures`, `g_range`, `q_range`.
    #[arg(long)]
    grid: Option<PathBuf>,
    /// Comma-separated families, e.g. `sdb,gh`.
    #[arg(long, value_delimiter = ',', value_parser = parse_family)]
    families: Option<Vec<Family>>,
    /// Comma-separated structure ids, e.g. `CCC,UUU`.
    #[arg(long, value_delimiter = ',', value_parser = parse_structure)]
    structures: Option<Vec<CovarianceStructure>>,
    /// Component counts, `k` or `lo..hi`.
    #[arg(long = "G", value_parser = parse_range)]
    g: Option<(usize, usize)>,
    /// Factor counts, `k` or `lo..hi`.
    #[arg(long, value_parser = parse_range)]
    q: Option<(usize, usize)>,
    #[command(flatten)]
    tuning: TuningArgs,
    /// Ranking table as CSV.
    #[arg(long)]
    table: Option<PathBuf>,
    /// Archive of the top-ranked model.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    csv: CsvArgs,
}

#[derive(Args, Debug)]
struct MomentsArgs {
    /// JSON component: `mu`, `skew`, `lambda` (rows), `psi`, `nu`.
    #[arg(long)]
    params: PathBuf,
    /// Comma-separated coordinates of the point.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    point: Vec<f64>,
    #[arg(long, default_value_t = 1_000_000)]
    draws: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// TOML fit settings; only the `[moments]` table is used.
    #[arg(long)]
    config: Option<PathBuf>,
}

fn parse_family(s: &str) -> Result<Family, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_structure(s: &str) -> Result<CovarianceStructure, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_range(s: &str) -> Result<(usize, usize), String> {
    let bad = || format!("expected `k` or `lo..hi`, got '{s}'");
    match s.split_once("..") {
        Some((a, b)) => {
            let lo = a.trim().parse().map_err(|_| bad())?;
            let hi = b.trim().trim_start_matches('=').parse().map_err(|_| bad())?;
            Ok((lo, hi))
        }
        None => {
            let k = s.trim().parse().map_err(|_| bad())?;
            Ok((k, k))
        }
    }
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Numeric(String),
}

impl Failure {
    fn context(self, path: &Path) -> Self {
        match self {
            Failure::Usage(m) => Failure::Usage(format!("{}: {m}", path.display())),
            Failure::Numeric(m) => Failure::Numeric(format!("{}: {m}", path.display())),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_numeric() {
            Failure::Numeric(e.to_string())
        } else {
            Failure::Usage(e.to_string())
        }
    }
}

fn io_failure(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::Usage(format!("{}: {e}", path.display()))
}

fn prepare(data: &Dataset, standardize: bool) -> Result<(DMatrix<f64>, Option<Standardization>), Failure> {
    if standardize {
        let s = Standardization::from_data(&data.data)?;
        Ok((s.apply(&data.data), Some(s)))
    } else {
        Ok((data.data.clone(), None))
    }
}

fn load_archive(path: &Path) -> Result<ModelArchive, Failure> {
    ModelArchive::load(path).map_err(|e| Failure::from(e).context(path))
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| io_failure(path, e))
}

fn report(archive: &ModelArchive, n: usize) -> String {
    let mut out = String::new();
    let fit = archive.fit.as_ref().expect("fitted archive");
    let _ = writeln!(out, "family: {}", archive.family);
    let _ = writeln!(out, "structure: {}", archive.structure);
    let _ = writeln!(out, "G: {}", archive.g);
    let _ = writeln!(out, "q: {}", archive.q);
    let _ = writeln!(out, "n: {n}");
    let _ = writeln!(out, "p: {}", archive.p);
    let _ = writeln!(out, "free_params: {}", fit.n_free_params);
    let _ = writeln!(out, "loglik: {}", fit.loglik);
    let _ = writeln!(out, "bic: {}", fit.bic);
    let _ = writeln!(out, "icl: {}", fit.icl);
    let _ = writeln!(out, "iterations: {}", fit.iterations);
    let _ = writeln!(out, "converged: {}", fit.converged);
    let _ = writeln!(out, "seed: {}", fit.seed);
    let _ = writeln!(out, "standardized: {}", archive.standardization.is_some());
    let _ = writeln!(out, "degenerate_observations: {}", fit.degenerate.len());
    for (k, (pi, c)) in archive.pi.iter().zip(&archive.components).enumerate() {
        let _ = writeln!(out, "component {}: pi = {pi}, nu = {}", k + 1, c.nu);
    }
    out
}

fn run_fit(args: &FitArgs) -> Result<String, Failure> {
    let dataset = args.csv.load()?;
    let cfg = args.tuning.resolve(FitConfig::default())?;
    let (data, standardization) = prepare(&dataset, args.tuning.standardize)?;
    let result = fit(&data, args.family, args.structure, args.g, args.q, &cfg)?;
    if !result.monotonicity_violations.is_empty() {
        eprintln!("warning: log-likelihood decreased at cycles {:?}", result.monotonicity_violations);
    }
    let mut archive = ModelArchive::from_fit(&result, &cfg, data.nrows())?;
    archive.standardization = standardization;
    let mut text = report(&archive, data.nrows());
    if let Some(labels) = &dataset.labels {
        let _ = writeln!(text, "ari: {}", ari(labels, &result.map_labels)?);
    }
    if let Some(path) = &args.out {
        archive.save(path).map_err(|e| Failure::from(e).context(path))?;
    }
    if let Some(path) = &args.labels_out {
        let body: String = result.map_labels.iter().map(|l| format!("{}\n", l + 1)).collect();
        write_text(path, &format!("cluster\n{body}"))?;
    }
    Ok(text)
}

fn run_sample(args: &SampleArgs) -> Result<String, Failure> {
    let archive = load_archive(&args.model)?;
    let model = archive.to_model()?;
    let (mut x, labels) = sample_mixture(&model, args.n, args.seed)?;
    if let Some(s) = &archive.standardization {
        x = s.invert(&x);
    }
    let columns: Vec<String> = (1..=model.p()).map(|j| format!("x{j}")).collect();
    let names: Vec<String> = labels.iter().map(|l| (l + 1).to_string()).collect();
    match &args.out {
        Some(path) => {
            write_csv(path, &x, Some(&columns), Some(("component", &names))).map_err(|e| Failure::from(e).context(path))?;
            Ok(format!("wrote {} rows to {}\n", args.n, path.display()))
        }
        None => {
            let mut buf = Vec::new();
            skewfa::io::write_csv_to(&mut buf, &x, Some(&columns), Some(("component", &names)))?;
            Ok(String::from_utf8(buf).expect("csv output is utf-8"))
        }
    }
}

fn run_select(args: &SelectArgs) -> Result<String, Failure> {
    let dataset = args.csv.load()?;
    let mut spec = match &args.grid {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| io_failure(path, e))?;
            parse_grid(&text).map_err(|e| Failure::from(e).context(path))?
        }
        None => GridSpec {
            families: vec![Family::Sdb],
            structures: CovarianceStructure::ALL.to_vec(),
            g_range: (1, 2),
            q_range: (1, 1),
            config: FitConfig::default(),
        },
    };
    if let Some(f) = &args.families {
        spec.families = f.clone();
    }
    if let Some(s) = &args.structures {
        spec.structures = s.clone();
    }
    if let Some(g) = args.g {
        spec.g_range = g;
    }
    if let Some(q) = args.q {
        spec.q_range = q;
    }
    spec.config = args.tuning.resolve(spec.config.clone())?;
    let (data, standardization) = prepare(&dataset, args.tuning.standardize)?;
    let entries = grid_search(&data, &spec)?;

    let mut table = String::from("rank,family,structure,G,q,free_params,loglik,bic,icl,iterations,converged,status\n");
    for (k, e) in entries.iter().enumerate() {
        let (loglik, iterations, status) = match &e.result {
            Ok(r) => (r.loglik().to_string(), r.iterations.to_string(), "ok".to_string()),
            Err(msg) => (String::new(), String::new(), format!("\"failed: {}\"", msg.replace('"', "'"))),
        };
        let _ = writeln!(
            table,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            k + 1,
            e.family,
            e.structure,
            e.g,
            e.q,
            e.n_free_params,
            loglik,
            e.bic,
            e.icl,
            iterations,
            e.converged(),
            status
        );
    }
    if let Some(path) = &args.table {
        write_text(path, &table)?;
    }
    let best = &entries[0];
    let result = best.result.as_ref().expect("grid_search ranks a successful cell first");
    let mut archive = ModelArchive::from_fit(result, &spec.config, data.nrows())?;
    archive.standardization = standardization;
    if let Some(path) = &args.out {
        archive.save(path).map_err(|e| Failure::from(e).context(path))?;
    }
    Ok(format!("{table}\nbest model\n{}", report(&archive, data.nrows())))
}

fn run_evaluate(args: &EvaluateArgs) -> Result<String, Failure> {
    if args.csv.label_column.is_none() {
        return Err(Failure::Usage("evaluate needs --label-column".into()));
    }
    let archive = load_archive(&args.model)?;
    let model = archive.to_model()?;
    let dataset = args.csv.load()?;
    let data = match &archive.standardization {
        Some(s) => s.apply(&dataset.data),
        None => dataset.data.clone(),
    };
    if data.ncols() != model.p() {
        return Err(Failure::Usage(format!("data have {} columns but the model expects {}", data.ncols(), model.p())));
    }
    let estep = e_step(&data, &model, &MomentConfig::default())?;
    let fitted = map_labels(&estep.z);
    let truth = dataset.labels.as_ref().expect("labels requested");
    let mut out = String::new();
    let _ = writeln!(out, "n: {}", data.nrows());
    let _ = writeln!(out, "loglik: {}", estep.loglik);
    let _ = writeln!(out, "ari: {}", ari(truth, &fitted)?);
    let mut counts: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for (&t, &f) in truth.iter().zip(&fitted) {
        *counts.entry((t, f)).or_default() += 1;
    }
    let _ = write!(out, "confusion (rows: true label, columns: fitted component)\nlabel");
    for g in 0..model.g() {
        let _ = write!(out, ",{}", g + 1);
    }
    out.push('\n');
    for (t, name) in dataset.label_names.iter().enumerate() {
        let _ = write!(out, "{name}");
        for g in 0..model.g() {
            let _ = write!(out, ",{}", counts.get(&(t, g)).copied().unwrap_or(0));
        }
        out.push('\n');
    }
    Ok(out)
}

fn run_moments(args: &MomentsArgs) -> Result<String, Failure> {
    let text = std::fs::read_to_string(&args.params).map_err(|e| io_failure(&args.params, e))?;
    let record: ComponentRecord = serde_json::from_str(&text).map_err(|e| io_failure(&args.params, e))?;
    let p = record.mu.len();
    let q = record.lambda.first().map_or(0, Vec::len);
    if record.lambda.len() != p || record.lambda.iter().any(|r| r.len() != q) {
        return Err(Failure::Usage("lambda must have one row per coordinate, all of equal length".into()));
    }
    if args.point.len() != p {
        return Err(Failure::Usage(format!("point has {} coordinates, parameters have {p}", args.point.len())));
    }
    let flat: Vec<f64> = record.lambda.iter().flatten().copied().collect();
    let cov = FactorCovariance::new(DMatrix::from_row_slice(p, q, &flat), DVector::from_vec(record.psi.clone()))?;
    let params = SdbComponentParams::new(DVector::from_vec(record.mu.clone()), DVector::from_vec(record.skew.clone()), cov, record.nu)?;
    let moments_cfg = match &args.config {
        Some(path) => load_config(path).map_err(|e| Failure::from(e).context(path))?.moments,
        None => MomentConfig::default(),
    };
    let x = DVector::from_vec(args.point.clone());
    let analytic = sdb_moments(&x, &params, &moments_cfg)?;
    let oracle = mc_oracle_moments(&x, &params, args.draws, args.seed)?;

    let mut rows: Vec<(String, f64, f64, f64)> = vec![("e1".into(), analytic.e1, oracle.moments.e1, oracle.se_e1)];
    for j in 0..p {
        rows.push((format!("e2[{}]", j + 1), analytic.e2[j], oracle.moments.e2[j], oracle.se_e2[j]));
    }
    for j in 0..p {
        for k in j..p {
            rows.push((format!("e3[{},{}]", j + 1, k + 1), analytic.e3[(j, k)], oracle.moments.e3[(j, k)], oracle.se_e3[(j, k)]));
        }
    }
    rows.push(("e4".into(), analytic.e4, oracle.moments.e4, oracle.se_e4));

    let mut out = String::new();
    let _ = writeln!(out, "draws: {}", args.draws);
    let _ = writeln!(out, "seed: {}", args.seed);
    let _ = writeln!(out, "effective_sample_size: {}", oracle.effective_sample_size);
    let _ = writeln!(out, "quantity,analytic,monte_carlo,std_error,z");
    let mut worst: f64 = 0.0;
    for (name, a, m, se) in rows {
        let z = if se > 0.0 { (a - m) / se } else { 0.0 };
        worst = worst.max(z.abs());
        let _ = writeln!(out, "{name},{a},{m},{se},{z}");
    }
    let _ = writeln!(out, "max_abs_z: {worst}");
    Ok(out)
}

fn run(cli: &Cli) -> Result<String, Failure> {
    match &cli.command {
        Command::Fit(a) => run_fit(a),
        Command::Sample(a) => run_sample(a),
        Command::Select(a) => run_select(a),
        Command::Evaluate(a) => run_evaluate(a),
        Command::MomentsCheck(a) => run_moments(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Numeric(m)) => {
            eprintln!("numeric failure: {m}");
            ExitCode::from(2)
        }
    }
}
