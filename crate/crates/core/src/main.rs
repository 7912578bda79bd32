use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use nndca::dca::{dca_solve, initial_guess, DcaConfig, DcaStatus};
use nndca::opf::{self, fixtures, GridCase};
use nndca::oracle::{enumerate_solve, DEFAULT_H_CAP};
use nndca::penalty::{certify, CertifyConfig};
use nndca::pipeline::{benchmark, train_surrogate, AllocationSpec, PipelineConfig};
use nndca::trainer::{train, Dataset, TrainConfig};
use nndca::{assemble, CostSpec, Error, InputDomain, ReluNetwork};

const EXIT_HELP: &str = "\
Exit codes:
  0  success
  2  configuration, schema or dimension error
  3  infeasible problem or demand
  4  convergence failure (DCA did not reach a complementary point, penalty fine-tuning failed)
  5  network too large for enumeration
  6  numerical failure in the convex solver";

/// Optimization over trained ReLU networks and data-center demand allocation.
#[derive(Parser, Debug)]
#[command(name = "nndca", version, after_help = EXIT_HELP)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Serialize)]
struct Global {
    /// Seed for every random draw.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// DCA penalty; for `solve`, overrides the certificate.
    #[arg(long, global = true)]
    rho: Option<f64>,
    #[arg(long, global = true)]
    eps_tol: Option<f64>,
    #[arg(long, global = true)]
    max_iters: Option<usize>,
    #[arg(long, global = true)]
    comp_tol: Option<f64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample data-center demands, price them with the OPF and write a dataset.
    Datagen {
        #[command(flatten)]
        grid: GridArg,
        #[arg(short, long)]
        n: usize,
    },
    /// Fit a ReLU surrogate to a dataset.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        /// TOML training configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Hidden widths, e.g. `20,20`.
        #[arg(long, value_delimiter = ',')]
        hidden: Option<Vec<usize>>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
    },
    /// Certify a penalty for a network over a domain.
    Rho {
        #[command(flatten)]
        problem: ProblemArgs,
        /// TOML certification configuration.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run DCA from a random feasible start.
    Solve {
        #[command(flatten)]
        problem: ProblemArgs,
        /// Certificate from `rho`; its `rho_star` is used unless `--rho` is set.
        #[arg(long)]
        certificate: Option<PathBuf>,
    },
    /// Global optimum by enumerating activation patterns.
    Oracle {
        #[command(flatten)]
        problem: ProblemArgs,
        #[arg(long, default_value_t = DEFAULT_H_CAP)]
        cap: usize,
    },
    /// Price an allocation with the OPF.
    Validate {
        #[command(flatten)]
        grid: GridArg,
        /// Data-center demands in `dc_buses` order.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        allocation: Vec<f64>,
    },
    /// Run the allocation benchmark described by a TOML file.
    Benchmark {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Args, Debug, Clone, Serialize)]
struct GridArg {
    /// Grid case document.
    #[arg(long, conflicts_with = "fixture", required_unless_present = "fixture")]
    grid: Option<PathBuf>,
    /// Bundled grid case by name.
    #[arg(long)]
    fixture: Option<String>,
}

#[derive(Args, Debug, Clone, Serialize)]
struct ProblemArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    lower: Vec<f64>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    upper: Vec<f64>,
    /// Fixes the sum of the inputs.
    #[arg(long, allow_hyphen_values = true)]
    total: Option<f64>,
    /// Linear cost on the outputs (default: minimize the single output).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    cost: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BenchmarkConfig {
    /// Grid case document, relative to the config file.
    #[serde(default)]
    grid: Option<PathBuf>,
    #[serde(default)]
    fixture: Option<String>,
    /// Trained surrogate; trained from generated data when absent.
    #[serde(default)]
    weights: Option<PathBuf>,
    #[serde(default = "default_samples")]
    samples: usize,
    #[serde(default)]
    data_seed: u64,
    #[serde(default)]
    train: TrainConfig,
    #[serde(default)]
    delta: Option<f64>,
    #[serde(default)]
    forecast_fraction: Option<f64>,
    cases: usize,
    #[serde(default)]
    pipeline: PipelineConfig,
}

fn default_samples() -> usize {
    5000
}

type CliResult<T> = Result<T, Error>;

fn exit_code(e: &Error) -> u8 {
    match e.root() {
        Error::Infeasible(_) | Error::InfeasibleDomain(_) | Error::DataGeneration { .. } => 3,
        Error::DegenerateNetwork { .. }
        | Error::RelaxationFailed(_)
        | Error::StationarityViolation(_)
        | Error::FineTuneFailed { .. }
        | Error::Subproblem { .. } => 4,
        Error::SizeCap { .. } => 5,
        Error::Numerical(_) => 6,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: &Cli) -> CliResult<u8> {
    let g = &cli.global;
    if let Some(jobs) = g.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build_global()
            .map_err(|e| Error::Schema(format!("thread pool: {e}")))?;
    }
    fs::create_dir_all(&g.out_dir).map_err(|e| Error::io(&g.out_dir, e))?;
    match &cli.command {
        Command::Datagen { grid, n } => cmd_datagen(g, grid, *n),
        Command::Train {
            dataset,
            config,
            hidden,
            epochs,
            learning_rate,
        } => cmd_train(
            g,
            dataset,
            config.as_deref(),
            hidden.clone(),
            *epochs,
            *learning_rate,
        ),
        Command::Rho { problem, config } => cmd_rho(g, problem, config.as_deref()),
        Command::Solve {
            problem,
            certificate,
        } => cmd_solve(g, problem, certificate.as_deref()),
        Command::Oracle { problem, cap } => cmd_oracle(g, problem, *cap),
        Command::Validate { grid, allocation } => cmd_validate(g, grid, allocation),
        Command::Benchmark { config } => cmd_benchmark(g, config),
    }
}

fn read_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).expect("output document serializes");
    write_text(path, &(text + "\n"))
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).map_err(|e| Error::io(path, e))?,
    ))
}

fn toml_value(value: &impl Serialize) -> CliResult<toml::Value> {
    toml::Value::try_from(value).map_err(|e| Error::Schema(format!("resolved config: {e}")))
}

/// Writes the fully resolved parameters of a command next to its outputs.
fn write_resolved(g: &Global, command: &str, sections: &[(&str, toml::Value)]) -> CliResult<()> {
    let mut table = toml::Table::new();
    table.insert("command".into(), command.into());
    table.insert("global".into(), toml_value(g)?);
    for (name, value) in sections {
        table.insert((*name).into(), value.clone());
    }
    write_text(&g.out_dir.join("resolved_config.toml"), &table.to_string())
}

fn load_grid(arg: &GridArg) -> CliResult<GridCase> {
    match (&arg.grid, &arg.fixture) {
        (Some(path), _) => GridCase::load(path),
        (None, Some(name)) => fixtures::by_name(name).ok_or_else(|| {
            Error::Schema(format!(
                "unknown fixture {name:?}; available: {}",
                fixtures::NAMES.join(", ")
            ))
        }),
        (None, None) => Err(Error::Schema("need --grid or --fixture".into())),
    }
}

fn dca_config(g: &Global, base: DcaConfig) -> DcaConfig {
    DcaConfig {
        rho: g.rho.unwrap_or(base.rho),
        eps_tol: g.eps_tol.unwrap_or(base.eps_tol),
        max_iters: g.max_iters.unwrap_or(base.max_iters),
        comp_tol: g.comp_tol.unwrap_or(base.comp_tol),
        ..base
    }
}

struct Problem {
    net: ReluNetwork,
    dom: InputDomain,
    gf: nndca::GeneralForm,
}

fn load_problem(args: &ProblemArgs) -> CliResult<Problem> {
    let net = ReluNetwork::load(&args.weights)?;
    let dom = InputDomain::new(args.lower.clone(), args.upper.clone(), args.total)?;
    let cost = match &args.cost {
        Some(c) => CostSpec::new(c.clone(), 0.0),
        None => CostSpec::minimize_output(),
    };
    let gf = assemble(&net, &dom, &cost)?;
    Ok(Problem { net, dom, gf })
}

fn cmd_datagen(g: &Global, grid_arg: &GridArg, n: usize) -> CliResult<u8> {
    let grid = load_grid(grid_arg)?;
    write_resolved(
        g,
        "datagen",
        &[("grid", toml_value(&grid)?), ("samples", (n as i64).into())],
    )?;
    let data = opf::generate_dataset(&grid, n, g.seed)?;
    data.dataset.save(g.out_dir.join("dataset.csv"))?;
    let mut w = csv::Writer::from_writer(create(&g.out_dir.join("prices.csv"))?);
    let header: Vec<String> = grid.dc_buses.iter().map(|b| format!("pi_{b}")).collect();
    w.write_record(&header)?;
    for row in &data.prices {
        w.write_record(row.iter().map(|p| format!("{p:?}")))?;
    }
    w.flush().map_err(|e| Error::io("prices.csv", e))?;
    eprintln!(
        "{} samples ({} of {} draws discarded as infeasible)",
        data.dataset.len(),
        data.discarded,
        data.attempted
    );
    Ok(0)
}

fn cmd_train(
    g: &Global,
    dataset: &Path,
    config: Option<&Path>,
    hidden: Option<Vec<usize>>,
    epochs: Option<usize>,
    learning_rate: Option<f64>,
) -> CliResult<u8> {
    let mut cfg: TrainConfig = match config {
        Some(p) => read_toml(p)?,
        None => TrainConfig::default(),
    };
    cfg.seed = g.seed;
    if let Some(h) = hidden {
        cfg.hidden = h;
    }
    cfg.epochs = epochs.unwrap_or(cfg.epochs);
    cfg.learning_rate = learning_rate.unwrap_or(cfg.learning_rate);
    cfg.validate()?;
    write_resolved(
        g,
        "train",
        &[
            ("dataset", toml_value(&dataset)?),
            ("train", toml_value(&cfg)?),
        ],
    )?;
    let data = Dataset::load(dataset)?;
    let trained = train(&data, &cfg)?;
    trained.network.save(g.out_dir.join("network.json"))?;
    let path = g.out_dir.join("loss.csv");
    let mut w = create(&path)?;
    trained
        .write_loss_csv(&mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(&path, e))?;
    Ok(0)
}

fn cmd_rho(g: &Global, args: &ProblemArgs, config: Option<&Path>) -> CliResult<u8> {
    let mut cfg: CertifyConfig = match config {
        Some(p) => read_toml(p)?,
        None => CertifyConfig::default(),
    };
    cfg.seed = g.seed;
    let dca = dca_config(g, DcaConfig::default());
    write_resolved(
        g,
        "rho",
        &[
            ("problem", toml_value(args)?),
            ("certify", toml_value(&cfg)?),
            ("dca", toml_value(&dca)?),
        ],
    )?;
    let p = load_problem(args)?;
    let certified = certify(&p.net, &p.gf, &p.dom, &cfg, &dca)?;
    write_json(
        &g.out_dir.join("certificate.json"),
        &certified.certificate(),
    )?;
    println!(
        "rho_bar {:?} rho_star {:?}",
        certified.rho_bar(),
        certified.rho_star()
    );
    Ok(0)
}

#[derive(Serialize)]
struct SolutionDocument {
    d_star: Vec<f64>,
    y: Vec<f64>,
    v: Vec<f64>,
    objective: f64,
    penalty_residual: f64,
    iterations: usize,
    status: DcaStatus,
    rho: f64,
}

fn cmd_solve(g: &Global, args: &ProblemArgs, certificate: Option<&Path>) -> CliResult<u8> {
    let mut base = DcaConfig::default();
    if let Some(path) = certificate {
        #[derive(Deserialize)]
        struct RhoOnly {
            rho_star: f64,
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let c: RhoOnly = serde_json::from_str(&text)
            .map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
        base.rho = c.rho_star;
    } else if g.rho.is_none() {
        return Err(Error::Schema("solve needs --rho or --certificate".into()));
    }
    let cfg = dca_config(g, base);
    cfg.validate()?;
    write_resolved(
        g,
        "solve",
        &[("problem", toml_value(args)?), ("dca", toml_value(&cfg)?)],
    )?;
    let p = load_problem(args)?;
    let init = initial_guess(&p.net, &p.dom, g.seed)?;
    let res = dca_solve(&p.gf, &cfg, &init)?;
    let path = g.out_dir.join("trajectory.csv");
    let mut w = create(&path)?;
    res.write_trajectory(&mut w, p.gf.obj_offset, cfg.log_every)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(&path, e))?;
    write_json(
        &g.out_dir.join("solution.json"),
        &SolutionDocument {
            d_star: res.d_star.as_slice().to_vec(),
            y: res.y.as_slice().to_vec(),
            v: res.v.as_slice().to_vec(),
            objective: res.objective,
            penalty_residual: res.penalty_residual,
            iterations: res.iterations,
            status: res.status,
            rho: res.rho,
        },
    )?;
    println!(
        "{} objective {:?} after {} iterations",
        res.status, res.objective, res.iterations
    );
    Ok(if res.status == DcaStatus::ConvergedComplementary {
        0
    } else {
        4
    })
}

#[derive(Serialize)]
struct OracleDocument {
    best_objective: f64,
    best_d: Vec<f64>,
    best_pattern: String,
    feasible_pattern_count: usize,
    patterns_enumerated: u64,
    lp_solves: usize,
}

fn cmd_oracle(g: &Global, args: &ProblemArgs, cap: usize) -> CliResult<u8> {
    write_resolved(
        g,
        "oracle",
        &[("problem", toml_value(args)?), ("cap", (cap as i64).into())],
    )?;
    let p = load_problem(args)?;
    let res = enumerate_solve(&p.gf, cap)?;
    write_json(
        &g.out_dir.join("oracle.json"),
        &OracleDocument {
            best_objective: res.best_objective,
            best_d: res.best_d.as_slice().to_vec(),
            best_pattern: res.best_pattern.to_string(),
            feasible_pattern_count: res.feasible_pattern_count,
            patterns_enumerated: res.patterns_enumerated,
            lp_solves: res.lp_solves,
        },
    )?;
    println!(
        "objective {:?} pattern {}",
        res.best_objective, res.best_pattern
    );
    Ok(0)
}

#[derive(Serialize)]
struct ValidationDocument {
    allocation: Vec<f64>,
    charge: f64,
    dc_prices: Vec<f64>,
    solution: opf::OpfSolution,
}

fn cmd_validate(g: &Global, grid_arg: &GridArg, allocation: &[f64]) -> CliResult<u8> {
    let grid = load_grid(grid_arg)?;
    write_resolved(
        g,
        "validate",
        &[
            ("grid", toml_value(&grid)?),
            ("allocation", toml_value(&allocation)?),
        ],
    )?;
    let (sol, charge) = opf::evaluate_allocation(&grid, allocation)?;
    let dc_prices = grid.dc_buses.iter().map(|&b| sol.pi[b]).collect();
    write_json(
        &g.out_dir.join("validation.json"),
        &ValidationDocument {
            allocation: allocation.to_vec(),
            charge,
            dc_prices,
            solution: sol,
        },
    )?;
    println!("charge {charge:?}");
    Ok(0)
}

fn cmd_benchmark(g: &Global, config: &Path) -> CliResult<u8> {
    let mut cfg: BenchmarkConfig = read_toml(config)?;
    let base = config.parent().unwrap_or(Path::new("."));
    cfg.grid = cfg.grid.map(|p| base.join(p));
    cfg.weights = cfg.weights.map(|p| base.join(p));
    cfg.pipeline.dca = dca_config(g, cfg.pipeline.dca.clone());
    let grid = load_grid(&GridArg {
        grid: cfg.grid.clone(),
        fixture: cfg.fixture.clone(),
    })?;
    let spec = match (cfg.delta, cfg.forecast_fraction) {
        (Some(delta), None) => AllocationSpec::new(delta, grid.d_min.clone(), grid.d_max.clone())?,
        (None, Some(f)) => AllocationSpec::from_fraction(&grid, f)?,
        _ => {
            return Err(Error::Schema(
                "benchmark config needs exactly one of delta and forecast_fraction".into(),
            ))
        }
    };
    write_resolved(
        g,
        "benchmark",
        &[
            ("benchmark", toml_value(&cfg)?),
            ("allocation", toml_value(&spec)?),
        ],
    )?;
    let net = match &cfg.weights {
        Some(p) => ReluNetwork::load(p)?,
        None => {
            let (net, _) = train_surrogate(&grid, cfg.samples, cfg.data_seed, &cfg.train)?;
            net.save(g.out_dir.join("network.json"))?;
            net
        }
    };
    let traj = g.out_dir.join("trajectories");
    fs::create_dir_all(&traj).map_err(|e| Error::io(&traj, e))?;
    let summary = benchmark(
        &grid,
        &net,
        &spec,
        &cfg.pipeline,
        cfg.cases,
        g.seed,
        Some(&traj),
    );
    let mut w = create(&g.out_dir.join("summary.csv"))?;
    summary.write_csv(&mut w)?;
    w.flush().map_err(|e| Error::io("summary.csv", e))?;
    println!(
        "success rate {:.3} ({} cases)",
        summary.success_rate,
        summary.rows.len()
    );
    Ok(0)
}
