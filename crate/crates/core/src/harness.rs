//! Experiment driver, SMAPE, and the CSV and config-file formats.
//!
//! One experiment job is a `(function, transfer size, repetition)` triple. It
//! fits a source GP on the base function, builds a random target, and scores
//! three models on a shared test set: the untouched source model
//! (`original`), the source model carried over by the fitted map
//! (`transferred`), and a GP trained on the transfer set alone (`scratch`).

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::benchmarks::{make_target, sample_dataset, sample_instance, BenchFn, BenchId, TargetSource};
use crate::error::{Error, Result};
use crate::optimizer::{CmaConfig, GdSchedule};
use crate::seeded_rng;
use crate::surrogate::{fit_gpr, Dataset, GprConfig, GprModel, Surrogate};
use crate::transfer::{
    apply_transform, fit_transfer_cmaes, fit_transfer_gd, transfer_loss, transferred_predict, TransferParams,
};
use crate::warp::{Bounds, WarpPrior, WarpShape};

/// Symmetric mean absolute percentage error in `[0, 2]`. Pairs with
/// `|p| + |a| = 0` contribute zero.
pub fn smape(pred: &[f64], actual: &[f64]) -> Result<f64> {
    if pred.len() != actual.len() {
        return Err(Error::DimensionMismatch {
            expected: actual.len(),
            got: pred.len(),
        });
    }
    if pred.is_empty() {
        return Err(Error::Empty("smape input"));
    }
    let total: f64 = pred
        .iter()
        .zip(actual)
        .map(|(p, a)| {
            let denom = (p.abs() + a.abs()) / 2.0;
            if denom == 0.0 {
                0.0
            } else {
                (p - a).abs() / denom
            }
        })
        .sum();
    Ok(total / pred.len() as f64)
}

/// Rows of `data` whose image under `params` stays inside `bounds`.
pub fn in_domain_filter(data: &Dataset, params: &TransferParams, bounds: &Bounds) -> Result<Dataset> {
    let mut keep = Vec::new();
    for (i, x) in data.rows().iter().enumerate() {
        if bounds.contains(&apply_transform(params, x)?) {
            keep.push(i);
        }
    }
    Ok(data.subset(&keep))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fitter {
    Gd,
    Cmaes,
}

impl FromStr for Fitter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "gd" => Ok(Fitter::Gd),
            "cmaes" | "cma-es" => Ok(Fitter::Cmaes),
            other => Err(Error::Config(format!("unknown fitter `{other}`"))),
        }
    }
}

impl fmt::Display for Fitter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Fitter::Gd => "gd",
            Fitter::Cmaes => "cmaes",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub functions: Vec<BenchId>,
    pub d: usize,
    pub shape: WarpShape,
    pub sizes: Vec<usize>,
    pub repetitions: usize,
    pub seed: u64,
    pub fitter: Fitter,
    pub in_domain: bool,
    /// Source training rows per dimension.
    pub source_multiplier: usize,
    /// Test rows per dimension.
    pub test_multiplier: usize,
    pub schedule: GdSchedule,
    pub cma_budget: usize,
    pub cma_sigma0: f64,
    /// Record real wall-clock times; otherwise `wall_ms` is 0.
    pub timing: bool,
    pub output: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            functions: vec![BenchId::Sphere],
            d: 2,
            shape: WarpShape::Exponential,
            sizes: vec![20],
            repetitions: 10,
            seed: 0,
            fitter: Fitter::Gd,
            in_domain: false,
            source_multiplier: 400,
            test_multiplier: 250,
            schedule: GdSchedule::default(),
            cma_budget: 6000,
            cma_sigma0: CmaConfig::default().sigma0,
            timing: false,
            output: PathBuf::from("results.csv"),
        }
    }
}

fn parse_list<T: FromStr>(value: &str) -> std::result::Result<Vec<T>, T::Err> {
    value.split(',').map(|s| s.trim().parse()).collect()
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.functions.is_empty() {
            return Err(Error::Config("at least one function is required".into()));
        }
        for f in &self.functions {
            BenchFn::new(*f, self.d)?;
        }
        if self.repetitions == 0 {
            return Err(Error::Config("repetitions must be at least 1".into()));
        }
        if self.sizes.is_empty() || self.sizes.iter().any(|&s| s < 2) {
            return Err(Error::Config("transfer sizes must all be at least 2".into()));
        }
        if self.source_multiplier == 0 || self.test_multiplier == 0 {
            return Err(Error::Config("size multipliers must be at least 1".into()));
        }
        self.schedule.validate()?;
        self.cma().validate(self.d + self.d * (self.d - 1) / 2 + 2 * self.d)
    }

    fn cma(&self) -> CmaConfig {
        CmaConfig {
            sigma0: self.cma_sigma0,
            budget: self.cma_budget,
            ..CmaConfig::default()
        }
    }

    /// Parses a flat `key = value` file; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |column: usize, message: String| Error::Parse {
                line: i + 1,
                column,
                message,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(1, format!("expected key = value, got `{line}`")))?;
            let (key, value) = (key.trim(), value.trim());
            let column = raw.find('=').map_or(1, |p| p + 2);
            let bad = |e: &dyn fmt::Display| err(column, format!("{key}: {e}"));
            match key {
                "functions" => cfg.functions = parse_list(value).map_err(|e| bad(&e))?,
                "d" => cfg.d = value.parse().map_err(|e| bad(&e))?,
                "shape" => cfg.shape = value.parse().map_err(|e| bad(&e))?,
                "sizes" => cfg.sizes = parse_list(value).map_err(|e| bad(&e))?,
                "repetitions" => cfg.repetitions = value.parse().map_err(|e| bad(&e))?,
                "seed" => cfg.seed = value.parse().map_err(|e| bad(&e))?,
                "fitter" => cfg.fitter = value.parse().map_err(|e| bad(&e))?,
                "in_domain" => cfg.in_domain = value.parse().map_err(|e| bad(&e))?,
                "source_multiplier" => cfg.source_multiplier = value.parse().map_err(|e| bad(&e))?,
                "test_multiplier" => cfg.test_multiplier = value.parse().map_err(|e| bad(&e))?,
                "lr0" => cfg.schedule.lr0 = value.parse().map_err(|e| bad(&e))?,
                "decay" => cfg.schedule.decay = value.parse().map_err(|e| bad(&e))?,
                "epochs" => cfg.schedule.epochs = value.parse().map_err(|e| bad(&e))?,
                "batch_fraction" => cfg.schedule.batch_fraction = value.parse().map_err(|e| bad(&e))?,
                "restarts" => cfg.schedule.restarts = value.parse().map_err(|e| bad(&e))?,
                "block_scales" => {
                    let v: Vec<f64> = parse_list(value).map_err(|e| bad(&e))?;
                    cfg.schedule.block_scales = v
                        .try_into()
                        .map_err(|_| err(column, "block_scales needs three values".into()))?;
                }
                "cma_budget" => cfg.cma_budget = value.parse().map_err(|e| bad(&e))?,
                "cma_sigma0" => cfg.cma_sigma0 = value.parse().map_err(|e| bad(&e))?,
                "timing" => cfg.timing = value.parse().map_err(|e| bad(&e))?,
                "output" => cfg.output = PathBuf::from(value),
                other => return Err(err(1, format!("unknown key `{other}`"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let s = &self.schedule;
        format!(
            "functions = {}\nd = {}\nshape = {}\nsizes = {}\nrepetitions = {}\nseed = {}\n\
             fitter = {}\nin_domain = {}\nsource_multiplier = {}\ntest_multiplier = {}\n\
             lr0 = {}\ndecay = {}\nepochs = {}\nbatch_fraction = {}\nrestarts = {}\nblock_scales = {}\n\
             cma_budget = {}\ncma_sigma0 = {}\ntiming = {}\noutput = {}\n",
            join(&self.functions),
            self.d,
            self.shape,
            join(&self.sizes),
            self.repetitions,
            self.seed,
            self.fitter,
            self.in_domain,
            self.source_multiplier,
            self.test_multiplier,
            s.lr0,
            s.decay,
            s.epochs,
            s.batch_fraction,
            s.restarts,
            join(&s.block_scales),
            self.cma_budget,
            self.cma_sigma0,
            self.timing,
            self.output.display(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Original,
    Transferred,
    Scratch,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Original => "original",
            ModelKind::Transferred => "transferred",
            ModelKind::Scratch => "scratch",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub function: BenchId,
    pub d: usize,
    pub shape: WarpShape,
    pub transfer_size: usize,
    pub repetition: usize,
    pub model: ModelKind,
    pub smape: f64,
    pub loss: f64,
    pub wall_ms: u64,
    pub seed: u64,
    pub status: String,
}

impl ResultRow {
    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }

    fn key(&self) -> (BenchId, usize, WarpShape, usize, usize, ModelKind) {
        (
            self.function,
            self.d,
            self.shape,
            self.transfer_size,
            self.repetition,
            self.model,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExperimentResult {
    pub rows: Vec<ResultRow>,
}

impl ExperimentResult {
    pub fn failures(&self) -> usize {
        self.rows.iter().filter(|r| !r.is_ok()).count()
    }

    /// Mean SMAPE of successful rows matching the filter.
    pub fn mean_smape(&self, model: ModelKind, size: usize) -> Option<f64> {
        let v: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.is_ok() && r.model == model && r.transfer_size == size)
            .map(|r| r.smape)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

fn fnv1a64(text: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Seed of one job, derived from the base seed and the job's key.
pub fn job_seed(base: u64, function: BenchId, shape: WarpShape, size: usize, rep: usize) -> u64 {
    base ^ fnv1a64(&format!("{function}|{shape}|{size}|{rep}"))
}

struct Scored {
    smape: f64,
    loss: f64,
    wall_ms: u64,
}

fn elapsed_ms(start: Instant, timing: bool) -> u64 {
    if timing {
        start.elapsed().as_millis() as u64
    } else {
        0
    }
}

fn mse_transformed(model: &dyn Surrogate, data: &Dataset) -> f64 {
    let tf = model.transform();
    data.rows()
        .iter()
        .zip(data.targets())
        .map(|(x, &y)| (model.predict_transformed(x) - tf.forward(y)).powi(2))
        .sum::<f64>()
        / data.len() as f64
}

type JobOutcome = [Result<Scored>; 3];

fn run_job(cfg: &ExperimentConfig, function: BenchId, size: usize, seed: u64) -> JobOutcome {
    let setup = (|| -> Result<_> {
        let mut rng = seeded_rng(seed);
        let d = cfg.d;
        let bounds = Bounds::cube(d, -5.0, 5.0)?;
        let bench = BenchFn::new(function, d)?;
        let start = Instant::now();
        let source_data = sample_dataset(&bench, cfg.source_multiplier * d, &bounds, &mut rng)?;
        let source = fit_gpr(&source_data, &GprConfig::default(), &mut rng)?;
        let source_ms = elapsed_ms(start, cfg.timing);
        let gen = sample_instance(&WarpPrior::preset(cfg.shape), d, &bounds, &mut rng)?;
        let target = make_target(TargetSource::Bench(bench), gen.clone())?;
        let transfer = sample_dataset(&target, size, &bounds, &mut rng)?;
        let test = sample_dataset(&target, cfg.test_multiplier * d, &bounds, &mut rng)?;
        let fit_seed: u64 = rand::Rng::random(&mut rng);
        Ok((source, source_ms, gen, transfer, test, fit_seed, bounds))
    })();
    let (source, source_ms, gen, transfer, test, fit_seed, bounds) = match setup {
        Ok(v) => v,
        Err(e) => {
            let msg = e.to_string();
            return [0, 1, 2].map(|_| Err(Error::Config(msg.clone())));
        }
    };
    let score = |predict: &dyn Fn(&[f64]) -> Result<f64>| -> Result<f64> {
        let pred = test.rows().iter().map(|x| predict(x)).collect::<Result<Vec<_>>>()?;
        smape(&pred, test.targets())
    };

    let original = (|| {
        let loss = transfer_loss(&TransferParams::identity(bounds.clone()), &source, &transfer)?;
        Ok(Scored {
            smape: score(&|x| Ok(source.predict(x)))?,
            loss,
            wall_ms: source_ms,
        })
    })();

    let transferred = (|| {
        let start = Instant::now();
        let data = if cfg.in_domain {
            in_domain_filter(&transfer, &gen, &bounds)?
        } else {
            transfer.clone()
        };
        if data.len() < 2 {
            return Err(Error::Empty("in-domain transfer set"));
        }
        let report = match cfg.fitter {
            Fitter::Gd => fit_transfer_gd(&source, &data, &cfg.schedule, &mut seeded_rng(fit_seed))?,
            Fitter::Cmaes => fit_transfer_cmaes(
                &source,
                &data,
                &CmaConfig {
                    seed: fit_seed,
                    ..cfg.cma()
                },
            )?,
        };
        let wall_ms = elapsed_ms(start, cfg.timing);
        let params = report.best_params;
        Ok(Scored {
            smape: score(&|x| transferred_predict(&source, &params, x))?,
            loss: report.best_loss,
            wall_ms,
        })
    })();

    let scratch = (|| {
        let start = Instant::now();
        let model: GprModel = fit_gpr(&transfer, &GprConfig::default(), &mut seeded_rng(fit_seed ^ 1))?;
        let wall_ms = elapsed_ms(start, cfg.timing);
        Ok(Scored {
            smape: score(&|x| Ok(model.predict(x)))?,
            loss: mse_transformed(&model, &transfer),
            wall_ms,
        })
    })();

    [original, transferred, scratch]
}

/// Runs every `(function, size, repetition)` job. Failures are recorded in
/// the row status; rows come back sorted by their key.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResult> {
    config.validate()?;
    let mut jobs = Vec::new();
    for &f in &config.functions {
        for &size in &config.sizes {
            for rep in 0..config.repetitions {
                jobs.push((f, size, rep));
            }
        }
    }
    let mut rows: Vec<ResultRow> = jobs
        .par_iter()
        .flat_map_iter(|&(function, size, rep)| {
            let seed = job_seed(config.seed, function, config.shape, size, rep);
            let outcome = run_job(config, function, size, seed);
            let kinds = [ModelKind::Original, ModelKind::Transferred, ModelKind::Scratch];
            kinds.into_iter().zip(outcome).map(move |(model, r)| {
                let (smape, loss, wall_ms, status) = match r {
                    Ok(s) => (s.smape, s.loss, s.wall_ms, "ok".to_string()),
                    Err(e) => (f64::NAN, f64::NAN, 0, format!("error: {e}")),
                };
                ResultRow {
                    function,
                    d: config.d,
                    shape: config.shape,
                    transfer_size: size,
                    repetition: rep,
                    model,
                    smape,
                    loss,
                    wall_ms,
                    seed,
                    status,
                }
            })
        })
        .collect();
    rows.sort_by_key(|r| r.key());
    Ok(ExperimentResult { rows })
}

pub const RESULTS_HEADER: [&str; 11] = [
    "function",
    "d",
    "shape",
    "transfer_size",
    "repetition",
    "model",
    "smape",
    "loss",
    "wall_ms",
    "seed",
    "status",
];

pub fn write_results<W: Write>(result: &ExperimentResult, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(RESULTS_HEADER)?;
    for r in &result.rows {
        w.write_record([
            r.function.to_string(),
            r.d.to_string(),
            r.shape.to_string(),
            r.transfer_size.to_string(),
            r.repetition.to_string(),
            r.model.to_string(),
            r.smape.to_string(),
            r.loss.to_string(),
            r.wall_ms.to_string(),
            r.seed.to_string(),
            r.status.clone(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_results_csv(result: &ExperimentResult, path: impl AsRef<Path>) -> Result<()> {
    write_results(result, std::fs::File::create(path)?)
}

/// Writes `x1,…,xd,y` with shortest round-trip float formatting.
pub fn write_dataset_csv(data: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = (1..=data.dim()).map(|j| format!("x{j}")).collect();
    header.push("y".into());
    w.write_record(&header)?;
    for (x, y) in data.rows().iter().zip(data.targets()) {
        let mut rec: Vec<String> = x.iter().map(f64::to_string).collect();
        rec.push(y.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a dataset CSV. Without explicit bounds the box is the per-column
/// min/max.
pub fn read_dataset_csv(path: impl AsRef<Path>, bounds: Option<&Bounds>) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let header = reader.headers()?.clone();
    let d = header.len().saturating_sub(1);
    let expected: Vec<String> = (1..=d).map(|j| format!("x{j}")).chain(["y".to_string()]).collect();
    if d == 0 || header.iter().ne(expected.iter().map(String::as_str)) {
        return Err(Error::Parse {
            line: 1,
            column: 1,
            message: format!("header must be {}", expected.join(",")),
        });
    }
    let mut rows = Vec::new();
    let mut y = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != d + 1 {
            return Err(Error::Parse {
                line,
                column: record.len().min(d + 1) + 1,
                message: format!("expected {} fields, found {}", d + 1, record.len()),
            });
        }
        let mut values = Vec::with_capacity(d + 1);
        for (c, field) in record.iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| Error::Parse {
                line,
                column: c + 1,
                message: format!("`{field}` is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line,
                    column: c + 1,
                    message: "non-finite value".into(),
                });
            }
            values.push(v);
        }
        y.push(values.pop().expect("d + 1 fields"));
        rows.push(values);
    }
    if rows.is_empty() {
        return Err(Error::Empty("dataset file"));
    }
    match bounds {
        Some(b) => Dataset::new(rows, y, b.clone()),
        None => Dataset::with_inferred_bounds(rows, y),
    }
}
