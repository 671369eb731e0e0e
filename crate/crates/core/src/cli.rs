//! Batch front end: TOML run configuration, CSV ingestion and emission, and
//! the `simulate`, `fit`, `predict`, `stack`, `metrics` and `diagnose`
//! pipelines.
//!
//! Result files print numbers with 12 significant digits. Dataset files print
//! the shortest representation that parses back to the same `f64`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::bayes_core::{IgPrior, UnivariateLaw};
use crate::data::TrajectoryDataset;
use crate::diagnostics::{
    sigma_concentration_check, variance_decay, variance_term_ea, ConcentrationSetup, VarianceTermInput,
};
use crate::error::{Error, Result};
use crate::metrics::{self, MetricReport};
use crate::simgen::{simulate_continuous, simulate_discrete, simulate_dlm, DlmPanel, SimConfig, SimTruth};
use crate::stacking::{
    run_stacking, CandidateGrid, ContinuousAxes, DiscreteAxes, FittedModel, FoldPlan, ModelSpec, Mixture,
    StackMode, StackOutput,
};

pub const REQUIRED_COLUMNS: [&str; 4] = ["t", "x", "y", "response"];
/// Monte Carlo draws behind DIC and WAIC in fit summaries.
pub const IC_DRAWS: usize = 2000;

#[derive(Debug, Parser)]
#[command(name = "trajstack", version, about = "Conjugate space-time trajectory models with predictive stacking")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset and its truth record.
    Simulate,
    /// Fit one model and summarize its posterior.
    Fit,
    /// Predict the rows without a response under one model.
    Predict,
    /// Stack a grid of candidate models and predict.
    Stack,
    /// Score a predictions file against a truth file.
    Metrics,
    /// Run an asymptotic diagnostic study.
    Diagnose,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Fit => "fit",
            Command::Predict => "predict",
            Command::Stack => "stack",
            Command::Metrics => "metrics",
            Command::Diagnose => "diagnose",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub path: PathBuf,
    /// Covariate columns in model order; every extra column when absent.
    #[serde(default)]
    pub covariates: Option<Vec<String>>,
    /// Truth file for scoring predictions.
    #[serde(default)]
    pub truth: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StackingSection {
    #[serde(default)]
    pub candidates: Vec<ModelSpec>,
    #[serde(default)]
    pub discrete: Option<DiscreteAxes>,
    #[serde(default)]
    pub continuous: Option<ContinuousAxes>,
    #[serde(default)]
    pub prior: IgPrior,
    pub folds: FoldPlan,
    #[serde(default = "default_mode")]
    pub mode: StackMode,
}

fn default_mode() -> StackMode {
    StackMode::Distributions
}

impl StackingSection {
    pub fn grid(&self) -> Result<CandidateGrid> {
        let mut all = self.candidates.clone();
        if let Some(a) = &self.discrete {
            all.extend(CandidateGrid::discrete(a, self.prior)?.candidates);
        }
        if let Some(a) = &self.continuous {
            all.extend(CandidateGrid::continuous(a, self.prior)?.candidates);
        }
        CandidateGrid::new(all)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsSection {
    pub predictions: PathBuf,
    pub truth: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DiagnoseSection {
    VarianceDecay {
        n: Vec<usize>,
        epochs: Vec<usize>,
        phi: f64,
        nu: f64,
        draws: usize,
        #[serde(default)]
        seed: u64,
    },
    Concentration {
        setup: ConcentrationSetup,
        n: Vec<usize>,
        replicates: usize,
        #[serde(default)]
        seed: u64,
    },
    VarianceTerm(VarianceTermInput),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub simulate: Option<SimConfig>,
    #[serde(default)]
    pub data: Option<DataSection>,
    #[serde(default)]
    pub model: Option<ModelSpec>,
    #[serde(default)]
    pub stacking: Option<StackingSection>,
    #[serde(default)]
    pub metrics: Option<MetricsSection>,
    #[serde(default)]
    pub diagnose: Option<DiagnoseSection>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Configuration(e.to_string()))
    }

    /// Reads `path` and resolves relative file paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = RunConfig::from_toml(&fs::read_to_string(path)?)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(d) = &mut cfg.data {
            fix(&mut d.path);
            if let Some(t) = &mut d.truth {
                fix(t);
            }
        }
        if let Some(m) = &mut cfg.metrics {
            fix(&mut m.predictions);
            fix(&mut m.truth);
        }
        Ok(cfg)
    }

    fn apply_seed(&mut self, seed: u64) {
        if let Some(s) = self.simulate.take() {
            self.simulate = Some(s.with_seed(seed));
        }
        if let Some(st) = &mut self.stacking {
            st.folds.seed = seed;
        }
        match &mut self.diagnose {
            Some(DiagnoseSection::VarianceDecay { seed: s, .. }) | Some(DiagnoseSection::Concentration { seed: s, .. }) => {
                *s = seed
            }
            _ => {}
        }
    }
}

/// An error tagged with the module and operation that raised it.
#[derive(Debug)]
pub struct CliError {
    pub module: &'static str,
    pub operation: &'static str,
    pub error: Error,
}

impl CliError {
    pub fn to_json(&self) -> String {
        serde_json::json!({
            "module": self.module,
            "operation": self.operation,
            "message": self.error.to_string(),
            "kind": self.error.kind(),
        })
        .to_string()
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}::{}: {}", self.module, self.operation, self.error)
    }
}

trait Context<T> {
    fn ctx(self, module: &'static str, operation: &'static str) -> std::result::Result<T, CliError>;
}

impl<T> Context<T> for Result<T> {
    fn ctx(self, module: &'static str, operation: &'static str) -> std::result::Result<T, CliError> {
        self.map_err(|error| CliError { module, operation, error })
    }
}

/// Number formatting of result files.
pub fn fmt_num(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.11e}")
    } else {
        format!("{v}")
    }
}

fn round12(v: f64) -> f64 {
    if v.is_finite() {
        fmt_num(v).parse().unwrap_or(v)
    } else {
        v
    }
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x}"))
}

/// Writes `contents` to `path` through a temporary file and a rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(contents)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn csv_bytes(header: &[String], rows: &[Vec<String>]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.into_inner().map_err(|e| Error::Serialization(e.to_string()))
}

fn parse_cell(raw: &str, line: usize, column: &str) -> Result<f64> {
    let v: f64 = raw.trim().parse().map_err(|_| Error::Parse {
        row: line,
        column: column.to_string(),
        message: format!("'{raw}' is not a number"),
    })?;
    if !v.is_finite() {
        return Err(Error::Parse { row: line, column: column.to_string(), message: "value is not finite".into() });
    }
    Ok(v)
}

fn column_index(headers: &csv::StringRecord, name: &str) -> Option<usize> {
    headers.iter().position(|h| h.trim() == name)
}

/// Reads a trajectory CSV with columns `t, x, y, response` and covariates.
/// Rows are sorted by `t`; a blank response marks a prediction target.
/// Parse errors report the 1-based file line.
pub fn ingest_csv(path: &Path, covariates: Option<&[String]>) -> Result<TrajectoryDataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers = rdr.headers()?.clone();
    let mut idx = [0usize; 4];
    for (k, name) in REQUIRED_COLUMNS.iter().enumerate() {
        idx[k] = column_index(&headers, name)
            .ok_or_else(|| Error::Configuration(format!("{} lacks required column '{name}'", path.display())))?;
    }
    let names: Vec<String> = match covariates {
        Some(list) => list.to_vec(),
        None => headers
            .iter()
            .map(|h| h.trim().to_string())
            .filter(|h| !REQUIRED_COLUMNS.contains(&h.as_str()))
            .collect(),
    };
    let cov_idx: Vec<usize> = names
        .iter()
        .map(|n| {
            column_index(&headers, n)
                .ok_or_else(|| Error::Configuration(format!("covariate column '{n}' is not in {}", path.display())))
        })
        .collect::<Result<_>>()?;

    let mut rows: Vec<(usize, f64, [f64; 2], Option<f64>, Vec<f64>)> = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = rec.position().map_or(k + 2, |p| p.line() as usize);
        let get = |i: usize| rec.get(i).unwrap_or("");
        let t = parse_cell(get(idx[0]), line, "t")?;
        let s = [parse_cell(get(idx[1]), line, "x")?, parse_cell(get(idx[2]), line, "y")?];
        let raw = get(idx[3]).trim();
        let response = if raw.is_empty() || raw.eq_ignore_ascii_case("na") {
            None
        } else {
            Some(parse_cell(raw, line, "response")?)
        };
        let x = cov_idx.iter().zip(&names).map(|(&i, n)| parse_cell(get(i), line, n)).collect::<Result<Vec<_>>>()?;
        rows.push((line, t, s, response, x));
    }
    if rows.windows(2).any(|w| w[1].1 < w[0].1) {
        log::warn!("{}: rows are not sorted by t; sorting", path.display());
        rows.sort_by(|a, b| a.1.total_cmp(&b.1));
    }
    if let Some(w) = rows.windows(2).find(|w| w[1].1 == w[0].1) {
        return Err(Error::Data { row: w[1].0, message: format!("duplicate time t = {}", w[1].1) });
    }
    TrajectoryDataset::new(
        rows.iter().map(|r| r.1).collect(),
        rows.iter().map(|r| r.2).collect(),
        rows.iter().map(|r| r.3).collect(),
        names,
        rows.into_iter().map(|r| r.4).collect(),
    )
}

pub fn dataset_csv(data: &TrajectoryDataset) -> Result<Vec<u8>> {
    let mut header: Vec<String> = REQUIRED_COLUMNS.iter().map(|s| s.to_string()).collect();
    header.extend(data.covariate_names().iter().cloned());
    let rows: Vec<Vec<String>> = (0..data.len())
        .map(|i| {
            let s = data.location(i);
            let mut r = vec![format!("{}", data.time(i)), format!("{}", s[0]), format!("{}", s[1]), cell(data.response(i))];
            r.extend(data.x(i).iter().map(|v| format!("{v}")));
            r
        })
        .collect();
    csv_bytes(&header, &rows)
}

pub fn write_dataset_csv(path: &Path, data: &TrajectoryDataset) -> Result<()> {
    write_atomic(path, &dataset_csv(data)?)
}

/// Truth record keyed by time.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthTable {
    pub t: Vec<f64>,
    pub y: Vec<f64>,
    pub signal: Vec<f64>,
    pub z: Vec<f64>,
    pub beta: Vec<Vec<f64>>,
    pub holdout: Vec<bool>,
}

impl TruthTable {
    pub fn from_sim(data: &TrajectoryDataset, truth: &SimTruth) -> Self {
        TruthTable {
            t: data.times().to_vec(),
            y: truth.y.clone(),
            signal: truth.signal.clone(),
            z: truth.z.clone(),
            beta: truth.beta.clone(),
            holdout: (0..data.len()).map(|r| truth.holdout.contains(&r)).collect(),
        }
    }

    pub fn row_at(&self, t: f64) -> Option<usize> {
        self.t.iter().position(|&u| u == t)
    }
}

pub fn write_truth_csv(path: &Path, table: &TruthTable) -> Result<()> {
    let p = table.beta.first().map_or(0, |b| b.len());
    let mut header: Vec<String> = ["t", "y", "signal", "z"].iter().map(|s| s.to_string()).collect();
    header.extend((1..=p).map(|j| format!("beta_{j}")));
    header.push("holdout".into());
    let rows: Vec<Vec<String>> = (0..table.t.len())
        .map(|i| {
            let mut r = vec![
                format!("{}", table.t[i]),
                format!("{}", table.y[i]),
                format!("{}", table.signal[i]),
                format!("{}", table.z[i]),
            ];
            r.extend(table.beta[i].iter().map(|v| format!("{v}")));
            r.push(u8::from(table.holdout[i]).to_string());
            r
        })
        .collect();
    write_atomic(path, &csv_bytes(&header, &rows)?)
}

pub fn read_truth_csv(path: &Path) -> Result<TruthTable> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let need = |n: &str| column_index(&headers, n).ok_or_else(|| Error::Configuration(format!("truth file lacks '{n}'")));
    let (it, iy, is, iz, ih) = (need("t")?, need("y")?, need("signal")?, need("z")?, need("holdout")?);
    let ib: Vec<usize> = (1..).map_while(|j| column_index(&headers, &format!("beta_{j}"))).collect();
    let mut table = TruthTable { t: vec![], y: vec![], signal: vec![], z: vec![], beta: vec![], holdout: vec![] };
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = k + 2;
        let f = |i: usize, name: &str| parse_cell(rec.get(i).unwrap_or(""), line, name);
        table.t.push(f(it, "t")?);
        table.y.push(f(iy, "y")?);
        table.signal.push(f(is, "signal")?);
        table.z.push(f(iz, "z")?);
        table.beta.push(ib.iter().map(|&i| f(i, "beta")).collect::<Result<_>>()?);
        table.holdout.push(f(ih, "holdout")? != 0.0);
    }
    Ok(table)
}

fn panel_csv(panel: &DlmPanel) -> Result<Vec<u8>> {
    let p = panel.beta.first().map_or(0, |b| b.len());
    let mut header: Vec<String> = ["epoch", "site", "x", "y", "train", "response", "z"].iter().map(|s| s.to_string()).collect();
    header.extend((1..=p).map(|j| format!("x{j}")));
    let mut rows = Vec::new();
    for t in 0..panel.epochs() {
        for (i, s) in panel.locations.iter().enumerate() {
            let mut r = vec![
                (t + 1).to_string(),
                i.to_string(),
                format!("{}", s[0]),
                format!("{}", s[1]),
                u8::from(i < panel.n_train).to_string(),
                format!("{}", panel.y[t][i]),
                format!("{}", panel.z[t][i]),
            ];
            r.extend((0..p).map(|j| format!("{}", panel.x[t][(i, j)])));
            rows.push(r);
        }
    }
    csv_bytes(&header, &rows)
}

/// One row of a predictions file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictionRow {
    pub t: f64,
    pub s: [f64; 2],
    pub point: f64,
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
    pub z_point: f64,
    pub z_lower: f64,
    pub z_upper: f64,
}

pub const PREDICTION_COLUMNS: [&str; 10] =
    ["t", "x", "y", "point", "mean", "q025", "q975", "z_point", "z_q025", "z_q975"];

fn prediction_row(t: f64, s: [f64; 2], point: f64, zpoint: f64, y: &Mixture<crate::bayes_core::UnivariateT>, z: &Mixture<crate::bayes_core::UnivariateT>) -> PredictionRow {
    let (lower, upper) = y.interval(0.95);
    let (z_lower, z_upper) = z.interval(0.95);
    PredictionRow { t, s, point, mean: y.mean().unwrap_or(f64::NAN), lower, upper, z_point: zpoint, z_lower, z_upper }
}

pub fn write_predictions_csv(path: &Path, rows: &[PredictionRow]) -> Result<()> {
    let header: Vec<String> = PREDICTION_COLUMNS.iter().map(|s| s.to_string()).collect();
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            [r.t, r.s[0], r.s[1], r.point, r.mean, r.lower, r.upper, r.z_point, r.z_lower, r.z_upper]
                .iter()
                .map(|&v| fmt_num(v))
                .collect()
        })
        .collect();
    write_atomic(path, &csv_bytes(&header, &body)?)
}

pub fn read_predictions_csv(path: &Path) -> Result<Vec<PredictionRow>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let idx: Vec<usize> = PREDICTION_COLUMNS
        .iter()
        .map(|n| column_index(&headers, n).ok_or_else(|| Error::Configuration(format!("predictions file lacks '{n}'"))))
        .collect::<Result<_>>()?;
    let mut out = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let mut v = [0.0; 10];
        for (c, &i) in idx.iter().enumerate() {
            let raw = rec.get(i).unwrap_or("").trim();
            v[c] = if raw.eq_ignore_ascii_case("nan") {
                f64::NAN
            } else {
                raw.parse().map_err(|_| Error::Parse {
                    row: k + 2,
                    column: PREDICTION_COLUMNS[c].to_string(),
                    message: format!("'{raw}' is not a number"),
                })?
            };
        }
        out.push(PredictionRow {
            t: v[0],
            s: [v[1], v[2]],
            point: v[3],
            mean: v[4],
            lower: v[5],
            upper: v[6],
            z_point: v[7],
            z_lower: v[8],
            z_upper: v[9],
        });
    }
    Ok(out)
}

pub fn write_metrics_csv(path: &Path, report: &MetricReport) -> Result<()> {
    let rows: Vec<Vec<String>> = report.values.iter().map(|(k, v)| vec![k.clone(), fmt_num(*v)]).collect();
    write_atomic(path, &csv_bytes(&["metric".into(), "value".into()], &rows)?)
}

pub fn read_metrics_csv(path: &Path) -> Result<BTreeMap<String, f64>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out = BTreeMap::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let name = rec.get(0).unwrap_or("").to_string();
        out.insert(name, parse_cell(rec.get(1).unwrap_or(""), k + 2, "value")?);
    }
    Ok(out)
}

/// Squared-error and coverage metrics of `rows` against `truth`, matched on
/// `t`.
pub fn score_predictions(rows: &[PredictionRow], truth: &TruthTable) -> Result<MetricReport> {
    let mut point = Vec::new();
    let mut y = Vec::new();
    let mut zp = Vec::new();
    let mut z = Vec::new();
    let mut covered = 0usize;
    for r in rows {
        let i = truth
            .row_at(r.t)
            .ok_or_else(|| Error::Data { row: 0, message: format!("no truth at t = {}", r.t) })?;
        point.push(r.point);
        y.push(truth.y[i]);
        zp.push(r.z_point);
        z.push(truth.z[i]);
        covered += usize::from(r.lower <= truth.y[i] && truth.y[i] <= r.upper);
    }
    let mut rep = MetricReport::default();
    rep.insert("mspe", metrics::mspe(&point, &y)?);
    rep.insert("mse_z", metrics::mse_z(&zp, &z)?);
    rep.insert("coverage_95", covered as f64 / rows.len() as f64);
    Ok(rep)
}

#[derive(Debug, Serialize)]
struct Sigma2Summary {
    mean: f64,
    q025: f64,
    q975: f64,
}

fn sigma2_summary<L: UnivariateLaw>(law: &L) -> Sigma2Summary {
    Sigma2Summary {
        mean: round12(law.mean().unwrap_or(f64::NAN)),
        q025: round12(law.quantile(0.025)),
        q975: round12(law.quantile(0.975)),
    }
}

fn json_bytes<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut s = serde_json::to_string_pretty(v).map_err(|e| Error::Serialization(e.to_string()))?;
    s.push('\n');
    Ok(s.into_bytes())
}

fn require<'a, T>(v: &'a Option<T>, section: &str, command: Command) -> std::result::Result<&'a T, CliError> {
    v.as_ref().ok_or_else(|| CliError {
        module: "cli",
        operation: "run",
        error: Error::Configuration(format!("`{}` needs a [{section}] section", command.name())),
    })
}

fn load_data(section: &DataSection) -> std::result::Result<TrajectoryDataset, CliError> {
    ingest_csv(&section.path, section.covariates.as_deref()).ctx("cli", "ingest_csv")
}

fn single_predictions(fit: &FittedModel, data: &TrajectoryDataset) -> Result<(Vec<PredictionRow>, Vec<f64>)> {
    let targets = data.targets();
    let preds = fit.predict_rows(data, &targets)?;
    let mut rows = Vec::with_capacity(targets.len());
    for (k, &r) in targets.iter().enumerate() {
        let y = Mixture::new(vec![1.0], vec![preds[k].y])?;
        let z = Mixture::new(vec![1.0], vec![preds[k].z])?;
        rows.push(prediction_row(data.time(r), data.location(r), preds[k].y.loc, preds[k].z.loc, &y, &z));
    }
    Ok((rows, preds.iter().map(|p| p.y.loc).collect()))
}

fn truth_metrics(
    truth_path: &Path,
    rows: &[PredictionRow],
    log_density: impl Fn(usize, f64) -> f64,
) -> Result<MetricReport> {
    let truth = read_truth_csv(truth_path)?;
    let mut rep = score_predictions(rows, &truth)?;
    let lds: Vec<f64> = rows
        .iter()
        .enumerate()
        .map(|(k, r)| truth.row_at(r.t).map_or(f64::NAN, |i| log_density(k, truth.y[i])))
        .collect();
    let m = metrics::mlpd(&lds)?;
    rep.insert("mlpd", m.value);
    Ok(rep)
}

/// Runs one subcommand and returns the files it wrote.
pub fn run(cli: &Cli) -> std::result::Result<Vec<PathBuf>, CliError> {
    let pool = {
        let mut b = rayon::ThreadPoolBuilder::new();
        if let Some(n) = cli.threads {
            b = b.num_threads(n);
        }
        b.build().map_err(|e| CliError {
            module: "cli",
            operation: "threads",
            error: Error::Configuration(e.to_string()),
        })?
    };
    pool.install(|| run_inner(cli))
}

fn run_inner(cli: &Cli) -> std::result::Result<Vec<PathBuf>, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).ctx("cli", "load_config")?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.apply_seed(seed);
    }
    let out = &cli.out;
    fs::create_dir_all(out).map_err(Error::from).ctx("cli", "create_output_dir")?;
    let mut written = Vec::new();
    let mut emit = |name: &str, bytes: Result<Vec<u8>>, op: &'static str| -> std::result::Result<(), CliError> {
        let path = out.join(name);
        write_atomic(&path, &bytes.ctx("cli", op)?).ctx("cli", op)?;
        written.push(path);
        Ok(())
    };
    let cmd = cli.command;
    match cmd {
        Command::Simulate => {
            let sim = require(&cfg.simulate, "simulate", cmd)?;
            match sim {
                SimConfig::DlmDgp(c) => {
                    let panel = simulate_dlm(c).ctx("simgen", "simulate_dlm")?;
                    emit("panel.csv", panel_csv(&panel), "write_panel")?;
                }
                other => {
                    let res = match other {
                        SimConfig::ContinuousDgp(c) => simulate_continuous(c).ctx("simgen", "simulate_continuous")?,
                        SimConfig::DiscreteDgp(c) => simulate_discrete(c).ctx("simgen", "simulate_discrete")?,
                        SimConfig::DlmDgp(_) => unreachable!(),
                    };
                    emit("data.csv", dataset_csv(&res.data), "write_dataset")?;
                    let table = TruthTable::from_sim(&res.data, &res.truth);
                    let path = out.join("truth.csv");
                    write_truth_csv(&path, &table).ctx("cli", "write_truth")?;
                    written.push(path);
                }
            }
        }
        Command::Fit | Command::Predict => {
            let ds = require(&cfg.data, "data", cmd)?;
            let spec = require(&cfg.model, "model", cmd)?;
            let data = load_data(ds)?;
            let module = match spec {
                ModelSpec::Discrete(_) => "traj_discrete",
                ModelSpec::Continuous(_) => "traj_continuous",
            };
            let fit = spec.fit(&data).ctx(module, "fit")?;
            let (rows, _) = single_predictions(&fit, &data).ctx(module, "predict")?;
            if cmd == Command::Fit {
                let (dic, waic) = fit.information_criteria(&data, IC_DRAWS, 0).ctx("metrics", "information_criteria")?;
                let post = fit.posterior();
                let beta = fit.beta_at_observed();
                let summary = serde_json::json!({
                    "command": "fit",
                    "model": spec.label(),
                    "spec": spec,
                    "n_rows": data.len(),
                    "n_observed": data.observed().len(),
                    "n_targets": data.targets().len(),
                    "a_star": round12(post.a_star()),
                    "b_star": round12(post.b_star()),
                    "sigma2": sigma2_summary(&fit.sigma2_law()),
                    "log_evidence": fit.log_evidence().map(round12),
                    "max_jitter": post.diagnostics().max_jitter,
                    "dic": round12(dic.dic),
                    "p_dic": round12(dic.p_d),
                    "waic": round12(waic.waic),
                    "p_waic": round12(waic.p_w),
                    "fitted_signal": fit.fitted_signal(&data).into_iter().map(round12).collect::<Vec<_>>(),
                    "beta_hat": (0..beta.nrows()).map(|r| beta.row(r).iter().map(|&v| round12(v)).collect::<Vec<_>>()).collect::<Vec<_>>(),
                });
                emit("fit_summary.json", json_bytes(&summary), "write_summary")?;
            }
            let path = out.join("predictions.csv");
            write_predictions_csv(&path, &rows).ctx("cli", "write_predictions")?;
            written.push(path);
            if let Some(tp) = &ds.truth {
                let targets = data.targets();
                let preds = fit.predict_rows(&data, &targets).ctx(module, "predict")?;
                let rep = truth_metrics(tp, &rows, |k, y| preds[k].y.ln_pdf(y)).ctx("metrics", "score")?;
                let path = out.join("metrics.csv");
                write_metrics_csv(&path, &rep).ctx("cli", "write_metrics")?;
                written.push(path);
            }
        }
        Command::Stack => {
            let ds = require(&cfg.data, "data", cmd)?;
            let st = require(&cfg.stacking, "stacking", cmd)?;
            let data = load_data(ds)?;
            let grid = st.grid().ctx("stacking", "grid")?;
            let res = run_stacking(&data, &grid, &st.folds, st.mode).ctx("stacking", "run_stacking")?;
            let rows = stacked_rows(&res, &data);
            emit("fit_summary.json", stack_summary(&res), "write_summary")?;
            emit("weights.csv", weights_csv(&res), "write_weights")?;
            let path = out.join("predictions.csv");
            write_predictions_csv(&path, &rows).ctx("cli", "write_predictions")?;
            written.push(path);
            if let Some(tp) = &ds.truth {
                let rep = truth_metrics(tp, &rows, |k, y| res.stacked_y(k).ln_pdf(y)).ctx("metrics", "score")?;
                let path = out.join("metrics.csv");
                write_metrics_csv(&path, &rep).ctx("cli", "write_metrics")?;
                written.push(path);
            }
        }
        Command::Metrics => {
            let m = require(&cfg.metrics, "metrics", cmd)?;
            let rows = read_predictions_csv(&m.predictions).ctx("cli", "read_predictions")?;
            let truth = read_truth_csv(&m.truth).ctx("cli", "read_truth")?;
            let rep = score_predictions(&rows, &truth).ctx("metrics", "score")?;
            let path = out.join("metrics.csv");
            write_metrics_csv(&path, &rep).ctx("cli", "write_metrics")?;
            written.push(path);
        }
        Command::Diagnose => {
            let d = require(&cfg.diagnose, "diagnose", cmd)?;
            emit("diagnostics.csv", diagnose_csv(d), "diagnose")?;
        }
    }
    Ok(written)
}

fn stacked_rows(res: &StackOutput, data: &TrajectoryDataset) -> Vec<PredictionRow> {
    let w = res.weights();
    let point = res.point_predictions(w);
    let zpoint = res.point_predictions_z(w);
    res.targets
        .iter()
        .enumerate()
        .map(|(k, &r)| prediction_row(data.time(r), data.location(r), point[k], zpoint[k], &res.stacked_y(k), &res.stacked_z(k)))
        .collect()
}

fn stack_summary(res: &StackOutput) -> Result<Vec<u8>> {
    let r = |v: &[f64]| v.iter().map(|&x| round12(x)).collect::<Vec<_>>();
    let jitter = res.fits.iter().map(|f| f.posterior().diagnostics().max_jitter).fold(0.0, f64::max);
    let summary = serde_json::json!({
        "command": "stack",
        "mode": res.mode,
        "candidates": res.labels(),
        "weights": r(res.weights()),
        "weights_means": r(&res.means.weights),
        "weights_distributions": r(&res.distributions.weights),
        "weights_bma": r(&res.bma),
        "kkt_means": round12(res.means.kkt_violation),
        "kkt_distributions": round12(res.distributions.kkt_violation),
        "cv_squared_error": round12(res.means.objective),
        "cv_log_score": round12(res.distributions.objective),
        "log_evidence": res.fits.iter().map(|f| f.log_evidence().map(round12)).collect::<Vec<_>>(),
        "sigma2": sigma2_summary(&res.sigma2()),
        "max_jitter": jitter,
        "dropped": res.dropped.iter().map(|(l, e)| serde_json::json!({"candidate": l, "reason": e})).collect::<Vec<_>>(),
        "n_validation": res.record.rows.len(),
        "n_targets": res.targets.len(),
    });
    json_bytes(&summary)
}

fn weights_csv(res: &StackOutput) -> Result<Vec<u8>> {
    let header: Vec<String> =
        ["candidate", "label", "weight", "means", "distributions", "bma"].iter().map(|s| s.to_string()).collect();
    let rows: Vec<Vec<String>> = (0..res.specs.len())
        .map(|g| {
            vec![
                g.to_string(),
                res.specs[g].label(),
                fmt_num(res.weights()[g]),
                fmt_num(res.means.weights[g]),
                fmt_num(res.distributions.weights[g]),
                fmt_num(res.bma[g]),
            ]
        })
        .collect();
    csv_bytes(&header, &rows)
}

fn diagnose_csv(d: &DiagnoseSection) -> Result<Vec<u8>> {
    match d {
        DiagnoseSection::VarianceDecay { n, epochs, phi, nu, draws, seed } => {
            let rows = variance_decay(n, epochs, *phi, *nu, *draws, *seed)?;
            let header: Vec<String> = ["n", "epoch", "phi", "nu", "median_ea"].iter().map(|s| s.to_string()).collect();
            let body: Vec<Vec<String>> = rows
                .iter()
                .map(|r| vec![r.n.to_string(), r.epoch.to_string(), fmt_num(r.phi), fmt_num(r.nu), fmt_num(r.median)])
                .collect();
            csv_bytes(&header, &body)
        }
        DiagnoseSection::Concentration { setup, n, replicates, seed } => {
            let rep = sigma_concentration_check(setup, n, *replicates, *seed)?;
            let header: Vec<String> =
                ["n", "replicates", "median_mean", "median_width", "shrinking"].iter().map(|s| s.to_string()).collect();
            let verdict = rep.shrinking.map_or(String::new(), |b| b.to_string());
            let body: Vec<Vec<String>> = rep
                .rows
                .iter()
                .map(|r| {
                    vec![
                        r.n.to_string(),
                        r.replicates.to_string(),
                        fmt_num(r.median_mean),
                        fmt_num(r.median_width),
                        verdict.clone(),
                    ]
                })
                .collect();
            csv_bytes(&header, &body)
        }
        DiagnoseSection::VarianceTerm(input) => {
            let v = variance_term_ea(input)?;
            csv_bytes(
                &["n".into(), "epoch".into(), "ea".into()],
                &[vec![input.locations.len().to_string(), input.epoch.to_string(), fmt_num(v)]],
            )
        }
    }
}

/// Entry point of the binary: parses arguments, runs, and reports errors as
/// JSON on stderr. Returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(files) => {
            for f in files {
                println!("{}", f.display());
            }
            0
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simgen::ContinuousDgp;

    fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let src = write(dir.path(), "a.csv", "t,x,y,response,slope\n1,0.1,0.2,3.5,0.01\n2.5,-1e-3,4,,7\n3,1,1,-2.25,0.3333333333333333\n");
        let d = ingest_csv(&src, None).unwrap();
        assert_eq!(d.targets(), vec![1]);
        let out = dir.path().join("b.csv");
        write_dataset_csv(&out, &d).unwrap();
        let back = ingest_csv(&out, None).unwrap();
        assert_eq!(back.times(), d.times());
        assert_eq!(back.locations(), d.locations());
        assert_eq!(back.responses(), d.responses());
        assert_eq!(back.x(2), d.x(2));
    }

    #[test]
    fn ingest_errors() {
        let dir = tempfile::tempdir().unwrap();
        let src = write(dir.path(), "a.csv", "t,x,y,response\n1,0,0,1\n2,0,zz,1\n");
        match ingest_csv(&src, None) {
            Err(Error::Parse { row, column, .. }) => assert_eq!((row, column.as_str()), (3, "y")),
            other => panic!("{other:?}"),
        }
        let src = write(dir.path(), "b.csv", "t,x,y,response\n1,0,0,1\n");
        match ingest_csv(&src, Some(&["ndvi".to_string()])) {
            Err(Error::Configuration(m)) => assert!(m.contains("ndvi")),
            other => panic!("{other:?}"),
        }
        let src = write(dir.path(), "c.csv", "t,x,y,response\n2,0,0,1\n1,1,0,2\n");
        let d = ingest_csv(&src, None).unwrap();
        assert_eq!(d.times(), &[1.0, 2.0]);
        assert_eq!(d.response(0), Some(2.0));
        let src = write(dir.path(), "d.csv", "t,x,y,response\n1,0,0,1\n1,1,0,2\n");
        assert!(matches!(ingest_csv(&src, None), Err(Error::Data { .. })));
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        assert!(RunConfig::from_toml("[data]\npath = \"a.csv\"\nbogus = 1\n").is_err());
        assert!(RunConfig::from_toml("colour = 1\n").is_err());
        let ok = RunConfig::from_toml(
            "[stacking]\nfolds = { scheme = \"expanding_window\", k = 5 }\n[[stacking.candidates]]\nmodel = \"continuous\"\ndelta_beta = 1.0\ndelta_z = 1.0\nphi1 = 0.5\nphi2 = 0.5\nxi = 0.5\n",
        )
        .unwrap();
        assert_eq!(ok.stacking.unwrap().grid().unwrap().len(), 1);
    }

    #[test]
    fn error_json_has_fields() {
        let e = CliError { module: "cli", operation: "run", error: Error::Configuration("x".into()) };
        let v: serde_json::Value = serde_json::from_str(&e.to_json()).unwrap();
        assert_eq!(v["kind"], "configuration");
        assert_eq!(v["module"], "cli");
    }

    #[test]
    fn single_candidate_stack_writes_unit_weight() {
        let dir = tempfile::tempdir().unwrap();
        let sim = simulate_continuous(&ContinuousDgp { path_len: 40, n_train: 20, n_holdout: 5, ..ContinuousDgp::infill(20, 2) }).unwrap();
        write_dataset_csv(&dir.path().join("data.csv"), &sim.data).unwrap();
        let cfg = write(
            dir.path(),
            "run.toml",
            "[data]\npath = \"data.csv\"\n[stacking]\nfolds = { scheme = \"random_k_fold\", k = 4, seed = 1 }\n[[stacking.candidates]]\nmodel = \"continuous\"\ndelta_beta = 1.0\ndelta_z = 1.0\nphi1 = 0.5\nphi2 = 0.5\nxi = 0.5\n",
        );
        let out = dir.path().join("out");
        let cli = Cli { command: Command::Stack, config: Some(cfg), seed: None, out: out.clone(), threads: Some(1) };
        run(&cli).unwrap();
        let text = fs::read_to_string(out.join("weights.csv")).unwrap();
        assert!(text.lines().nth(1).unwrap().contains(",1.00000000000e0,"), "{text}");
        assert_eq!(read_predictions_csv(&out.join("predictions.csv")).unwrap().len(), 5);
    }
    const SIM: &str = "[simulate]\nfamily = \"continuous_dgp\"\npath_len = 300\nn_train = 200\nn_holdout = 100\np = 2\nsigma = 1.0\ndelta_beta = 1.0\ndelta_z = 1.0\nphi1 = 0.5\nphi2 = 0.5\nxi = 0.5\ncovariate_sd = 2.0\nseed = 11\n";
    const MODEL: &str = "[model]\nmodel = \"continuous\"\ndelta_beta = 1.0\ndelta_z = 1.0\nphi1 = 0.5\nphi2 = 0.5\nxi = 0.5\npredictive = \"full\"\n";

    fn invoke(command: Command, cfg: &Path, out: &Path, seed: Option<u64>) -> Vec<PathBuf> {
        let cli = Cli { command, config: Some(cfg.to_path_buf()), seed, out: out.to_path_buf(), threads: None };
        run(&cli).unwrap_or_else(|e| panic!("{}", e.to_json()))
    }

    #[test]
    fn simulate_fit_predict_metrics_pipeline() {
        let dir = tempfile::tempdir().unwrap();
        let sim_dir = dir.path().join("sim");
        let sim_cfg = write(dir.path(), "sim.toml", SIM);
        invoke(Command::Simulate, &sim_cfg, &sim_dir, None);

        let run_cfg = write(
            dir.path(),
            "fit.toml",
            &format!("[data]\npath = \"sim/data.csv\"\ntruth = \"sim/truth.csv\"\n{MODEL}"),
        );
        let fit_dir = dir.path().join("fit");
        invoke(Command::Fit, &run_cfg, &fit_dir, None);
        let summary: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(fit_dir.join("fit_summary.json")).unwrap()).unwrap();
        assert_eq!(summary["n_targets"], 100);

        let pred_dir = dir.path().join("pred");
        invoke(Command::Predict, &run_cfg, &pred_dir, None);
        let reported = read_metrics_csv(&pred_dir.join("metrics.csv")).unwrap();

        let rows = read_predictions_csv(&pred_dir.join("predictions.csv")).unwrap();
        let truth = read_truth_csv(&sim_dir.join("truth.csv")).unwrap();
        let point: Vec<f64> = rows.iter().map(|r| r.point).collect();
        let y: Vec<f64> = rows.iter().map(|r| truth.y[truth.row_at(r.t).unwrap()]).collect();
        let mspe = metrics::mspe(&point, &y).unwrap();
        assert!((reported["mspe"] - mspe).abs() <= 1e-10 * mspe.abs(), "{} vs {mspe}", reported["mspe"]);

        let m_cfg = write(
            dir.path(),
            "metrics.toml",
            "[metrics]\npredictions = \"pred/predictions.csv\"\ntruth = \"sim/truth.csv\"\n",
        );
        let m_dir = dir.path().join("m");
        invoke(Command::Metrics, &m_cfg, &m_dir, None);
        let again = read_metrics_csv(&m_dir.join("metrics.csv")).unwrap();
        assert_eq!(again["mspe"], reported["mspe"]);
        assert_eq!(again["coverage_95"], reported["coverage_95"]);

        let coverage = reported["coverage_95"];
        assert!((0.90..=0.99).contains(&coverage), "coverage {coverage}");
    }

    #[test]
    fn stacked_coverage_on_matched_simulation() {
        let dir = tempfile::tempdir().unwrap();
        let sim_cfg = write(dir.path(), "sim.toml", SIM);
        invoke(Command::Simulate, &sim_cfg, &dir.path().join("sim"), None);
        let cfg = write(
            dir.path(),
            "stack.toml",
            "[data]\npath = \"sim/data.csv\"\ntruth = \"sim/truth.csv\"\n\
             [stacking]\nfolds = { scheme = \"random_k_fold\", k = 5, seed = 3 }\n\
             [stacking.continuous]\nphi1 = [0.5, 2.0]\nphi2 = [0.5]\nxi = [0.5]\ndelta_beta = [1.0, 3.0]\ndelta_z = [1.0]\npredictive = \"full\"\n",
        );
        let out = dir.path().join("stack");
        invoke(Command::Stack, &cfg, &out, None);
        let m = read_metrics_csv(&out.join("metrics.csv")).unwrap();
        assert!((0.90..=0.99).contains(&m["coverage_95"]), "{m:?}");
        assert!(m["mlpd"].is_finite());
    }

    #[test]
    fn seeded_runs_are_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let sim_cfg = write(dir.path(), "sim.toml", SIM);
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        let c = dir.path().join("c");
        invoke(Command::Simulate, &sim_cfg, &a, Some(5));
        invoke(Command::Simulate, &sim_cfg, &b, Some(5));
        invoke(Command::Simulate, &sim_cfg, &c, Some(6));
        let read = |d: &Path| fs::read(d.join("data.csv")).unwrap();
        assert_eq!(read(&a), read(&b));
        assert_ne!(read(&a), read(&c));
        let back = ingest_csv(&a.join("data.csv"), None).unwrap();
        assert_eq!(back.len(), 300);
    }

    #[test]
    fn diagnose_writes_rows() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = write(
            dir.path(),
            "d.toml",
            "[diagnose]\nkind = \"variance_decay\"\nn = [20, 40]\nepochs = [2]\nphi = 0.5\nnu = 1.0\ndraws = 2\n",
        );
        invoke(Command::Diagnose, &cfg, dir.path(), Some(1));
        let text = fs::read_to_string(dir.path().join("diagnostics.csv")).unwrap();
        assert_eq!(text.lines().count(), 3, "{text}");
    }
}

