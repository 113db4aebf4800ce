//! Command-line front end for `warpfit`.
//!
//! Exit codes: 0 on success, 1 for configuration or input errors, 2 for
//! failures during computation (partial results are written first).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use warpfit::benchmarks::{make_target, sample_dataset, sample_instance, BenchFn, BenchId, TargetSource};
use warpfit::harness::{
    read_dataset_csv, run_experiment, smape, write_dataset_csv, write_results_csv, ExperimentConfig, Fitter, ModelKind,
};
use warpfit::optimizer::CmaConfig;
use warpfit::surrogate::{fit_forest, fit_gpr, Dataset, ForestConfig, GprConfig, SurrogateModel};
use warpfit::transfer::{fit_transfer_cmaes, fit_transfer_gd, transferred_predict, TransferParams};
use warpfit::warp::{Bounds, WarpPrior, WarpShape};
use warpfit::{seeded_rng, Error};

#[derive(Parser)]
#[command(
    name = "warpfit",
    version,
    about = "Transfer regression surrogates between related tasks"
)]
struct Cli {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a surrogate on a dataset CSV and save it as JSON.
    FitSource(FitSource),
    /// Generate a synthetic source/target task from a benchmark function.
    MakeTarget(MakeTarget),
    /// Learn the input transformation from a transfer dataset.
    Transfer(Transfer),
    /// Score a (transferred) surrogate on a test CSV.
    Eval(Eval),
    /// Run the original/transferred/scratch comparison grid.
    Experiment(Experiment),
    /// Print or write the default experiment config.
    GenConfig(GenConfig),
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelChoice {
    Gpr,
    Forest,
}

#[derive(Args)]
struct FitSource {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "gpr")]
    kind: ModelChoice,
    /// Cube bounds `lo,hi` for every coordinate; default is the data's min/max.
    #[arg(long, value_parser = parse_cube, allow_hyphen_values = true)]
    cube: Option<(f64, f64)>,
}

#[derive(Args)]
struct MakeTarget {
    #[arg(long, default_value = "sphere")]
    function: String,
    #[arg(long, default_value_t = 2)]
    d: usize,
    #[arg(long, default_value = "exponential")]
    shape: String,
    /// Source rows; default 400·d.
    #[arg(long)]
    source_size: Option<usize>,
    #[arg(long, default_value_t = 20)]
    transfer_size: usize,
    /// Test rows; default 250·d.
    #[arg(long)]
    test_size: Option<usize>,
    /// Directory receiving source.csv, transfer.csv, test.csv and generator.json.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct Transfer {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "gd")]
    fitter: String,
    /// Experiment config supplying the descent schedule and CMA-ES budget.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    model: PathBuf,
    /// Fitted transformation; the identity map when omitted.
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long)]
    test: PathBuf,
    /// Transfer set, needed by `--holdout`.
    #[arg(long)]
    transfer: Option<PathBuf>,
    /// Drop test rows that also appear in the transfer set.
    #[arg(long, requires = "transfer")]
    holdout: bool,
}

#[derive(Args)]
struct Experiment {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's output path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenConfig {
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_cube(s: &str) -> Result<(f64, f64), String> {
    let (lo, hi) = s.split_once(',').ok_or("expected lo,hi")?;
    let lo: f64 = lo.trim().parse().map_err(|e| format!("{e}"))?;
    let hi: f64 = hi.trim().parse().map_err(|e| format!("{e}"))?;
    Ok((lo, hi))
}

/// Failure split by exit code.
enum Failure {
    Config(Error),
    Runtime(Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }
}

trait Phase<T> {
    fn setup(self) -> Result<T, Failure>;
    fn runtime(self) -> Result<T, Failure>;
}

impl<T> Phase<T> for warpfit::Result<T> {
    fn setup(self) -> Result<T, Failure> {
        self.map_err(Failure::Config)
    }
    fn runtime(self) -> Result<T, Failure> {
        self.map_err(Failure::Runtime)
    }
}

fn write_text(path: &Path, text: &str) -> warpfit::Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(std::fs::write(path, text)?)
}

fn load_config(path: Option<&Path>) -> warpfit::Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::parse(&std::fs::read_to_string(p)?),
        None => Ok(ExperimentConfig::default()),
    }
}

fn fit_source(args: FitSource, seed: u64) -> Result<(), Failure> {
    let data = read_dataset_csv(&args.data, None).setup()?;
    let data = match args.cube {
        Some((lo, hi)) => data.with_bounds(Bounds::cube(data.dim(), lo, hi).setup()?).setup()?,
        None => data,
    };
    let mut rng = seeded_rng(seed);
    let model = match args.kind {
        ModelChoice::Gpr => SurrogateModel::Gpr(fit_gpr(&data, &GprConfig::default(), &mut rng).runtime()?),
        ModelChoice::Forest => SurrogateModel::Forest(fit_forest(&data, &ForestConfig::default(), &mut rng).runtime()?),
    };
    model.save(&args.out).runtime()?;
    println!(
        "fitted {} rows, d = {}, saved {}",
        data.len(),
        data.dim(),
        args.out.display()
    );
    Ok(())
}

fn make_target_cmd(args: MakeTarget, seed: u64) -> Result<(), Failure> {
    let id: BenchId = args.function.parse().setup()?;
    let shape: WarpShape = args.shape.parse().setup()?;
    let d = args.d;
    let f = BenchFn::new(id, d).setup()?;
    let bounds = Bounds::cube(d, -5.0, 5.0).setup()?;
    let source_size = args.source_size.unwrap_or(400 * d);
    let test_size = args.test_size.unwrap_or(250 * d);
    if args.transfer_size < 2 || source_size == 0 || test_size == 0 {
        return Err(Failure::Config(Error::Config(
            "dataset sizes must be positive (transfer at least 2)".into(),
        )));
    }
    let mut rng = seeded_rng(seed);
    let gen = sample_instance(&WarpPrior::preset(shape), d, &bounds, &mut rng).runtime()?;
    let target = make_target(TargetSource::Bench(f), gen.clone()).runtime()?;
    let source = sample_dataset(&f, source_size, &bounds, &mut rng).runtime()?;
    let transfer = sample_dataset(&target, args.transfer_size, &bounds, &mut rng).runtime()?;
    let test = sample_dataset(&target, test_size, &bounds, &mut rng).runtime()?;
    std::fs::create_dir_all(&args.out_dir).map_err(|e| Failure::Runtime(e.into()))?;
    let dir = &args.out_dir;
    write_dataset_csv(&source, dir.join("source.csv")).runtime()?;
    write_dataset_csv(&transfer, dir.join("transfer.csv")).runtime()?;
    write_dataset_csv(&test, dir.join("test.csv")).runtime()?;
    write_text(&dir.join("generator.json"), &gen.to_json().runtime()?).runtime()?;
    println!("{id} d = {d} shape = {shape}: wrote {}", dir.display());
    Ok(())
}

fn transfer_cmd(args: Transfer, seed: u64) -> Result<(), Failure> {
    let model = SurrogateModel::load(&args.model).setup()?;
    let data = read_dataset_csv(&args.data, Some(model.bounds())).setup()?;
    let fitter: Fitter = args.fitter.parse().setup()?;
    let cfg = load_config(args.config.as_deref()).setup()?;
    let report = match (fitter, &model) {
        (Fitter::Gd, SurrogateModel::Gpr(gp)) => {
            fit_transfer_gd(gp, &data, &cfg.schedule, &mut seeded_rng(seed)).runtime()?
        }
        (Fitter::Gd, SurrogateModel::Forest(_)) => {
            return Err(Failure::Config(Error::Config(
                "gradient descent needs a differentiable surrogate; use --fitter cmaes".into(),
            )))
        }
        (Fitter::Cmaes, m) => {
            let cma = CmaConfig {
                budget: cfg.cma_budget,
                sigma0: cfg.cma_sigma0,
                seed,
                ..CmaConfig::default()
            };
            fit_transfer_cmaes(m.as_surrogate(), &data, &cma).runtime()?
        }
    };
    write_text(&args.out, &report.best_params.to_json().runtime()?).runtime()?;
    println!(
        "best loss {:e} after {} evaluations, saved {}",
        report.best_loss,
        report.evaluations,
        args.out.display()
    );
    Ok(())
}

fn eval_cmd(args: Eval) -> Result<(), Failure> {
    let model = SurrogateModel::load(&args.model).setup()?;
    let params = match &args.params {
        Some(p) => {
            TransferParams::from_json(&std::fs::read_to_string(p).map_err(|e| Failure::Config(e.into()))?).setup()?
        }
        None => TransferParams::identity(model.bounds().clone()),
    };
    let test = read_dataset_csv(&args.test, Some(&params.bounds)).setup()?;
    let test = if args.holdout {
        let path = args.transfer.as_ref().expect("clap enforces --transfer");
        let transfer = read_dataset_csv(path, None).setup()?;
        test.filter(|x, _| !transfer.rows().iter().any(|r| r.as_slice() == x))
    } else {
        test
    };
    if test.is_empty() {
        return Err(Failure::Config(Error::Empty("test set after holdout")));
    }
    let pred = predictions(&model, &params, &test).runtime()?;
    let score = smape(&pred, test.targets()).runtime()?;
    println!("n = {}\nsmape = {score}", test.len());
    Ok(())
}

fn predictions(model: &SurrogateModel, params: &TransferParams, test: &Dataset) -> warpfit::Result<Vec<f64>> {
    test.rows()
        .iter()
        .map(|x| transferred_predict(model.as_surrogate(), params, x))
        .collect()
}

fn experiment_cmd(args: Experiment, seed: Option<u64>) -> Result<(), Failure> {
    let mut cfg = load_config(args.config.as_deref()).setup()?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    if let Some(out) = args.out {
        cfg.output = out;
    }
    let result = run_experiment(&cfg).setup()?;
    if let Some(dir) = cfg.output.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Failure::Runtime(e.into()))?;
    }
    write_results_csv(&result, &cfg.output).runtime()?;
    for &size in &cfg.sizes {
        let mean = |m| {
            result
                .mean_smape(m, size)
                .map_or("n/a".to_string(), |v| format!("{v:.4}"))
        };
        println!(
            "size {size}: original {} transferred {} scratch {}",
            mean(ModelKind::Original),
            mean(ModelKind::Transferred),
            mean(ModelKind::Scratch)
        );
    }
    println!("{} rows written to {}", result.rows.len(), cfg.output.display());
    match result.failures() {
        0 => Ok(()),
        n => Err(Failure::Runtime(Error::Format(format!(
            "{n} rows failed; see the status column"
        )))),
    }
}

fn gen_config(args: GenConfig) -> Result<(), Failure> {
    let text = ExperimentConfig::default().to_text();
    match args.out {
        Some(path) => write_text(&path, &text).runtime()?,
        None => print!("{text}"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let seed = cli.seed.unwrap_or(0);
    let outcome = match cli.command {
        Command::FitSource(a) => fit_source(a, seed),
        Command::MakeTarget(a) => make_target_cmd(a, seed),
        Command::Transfer(a) => transfer_cmd(a, seed),
        Command::Eval(a) => eval_cmd(a),
        Command::Experiment(a) => experiment_cmd(a, cli.seed),
        Command::GenConfig(a) => gen_config(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let code = f.code();
            let (Failure::Config(e) | Failure::Runtime(e)) = f;
            eprintln!("error: {e}");
            ExitCode::from(code)
        }
    }
}
