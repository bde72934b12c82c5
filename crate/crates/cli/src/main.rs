mod config;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mmot::barycenter::{barycenter_with_zero_weights, barycentric_grid, bilinear_weights};
use mmot::cost_graph::CostGraph;
use mmot::grid::{DensityField, DEFAULT_FLOOR};
use mmot::io::{load_density, write_density_image, write_raw, write_text};
use mmot::solver::{history_csv, solve_with_observer, MmotProblem, RootMode, SolverConfig};
use mmot::validate::{run_suite, SUITES};

const EXIT_PARSE: u8 = 1;
const EXIT_IO: u8 = 2;
const EXIT_NOT_CONVERGED: u8 = 3;
const EXIT_VALIDATE: u8 = 4;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Parse(String),
    #[error(transparent)]
    Lib(#[from] mmot::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Lib(mmot::Error::Io { .. } | mmot::Error::Format { .. }) => EXIT_IO,
            _ => EXIT_PARSE,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "mmot", version, about = "Multimarginal optimal transport on 2D grids")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    /// Seed for randomized checks.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Solve the problem described by a config file.
    Solve(SolveArgs),
    /// Barycenter of images with the given weights.
    Barycenter(BarycenterArgs),
    /// Grid of barycenters between four corner images.
    Atlas(AtlasArgs),
    /// Run built-in validation suites and print TAP output.
    Validate(ValidateArgs),
}

#[derive(Args, Debug, Default)]
struct SolverFlags {
    /// Keep this node (numbered from 1) as the root throughout.
    #[arg(long, conflicts_with = "cycle")]
    root: Option<usize>,
    /// Cycle the root through all nodes.
    #[arg(long)]
    cycle: bool,
    #[arg(long)]
    max_iters: Option<usize>,
    /// Relative objective gain below which iteration stops.
    #[arg(long)]
    tol: Option<f64>,
}

impl SolverFlags {
    fn apply(&self, mut config: SolverConfig) -> Result<SolverConfig, CliError> {
        if let Some(r) = self.root {
            if r == 0 {
                return Err(CliError::Parse("--root counts nodes from 1".into()));
            }
            config.root_mode = RootMode::Fixed(r - 1);
        }
        if self.cycle {
            config.root_mode = RootMode::Cycle;
        }
        if let Some(n) = self.max_iters {
            config.max_iters = n;
        }
        if let Some(t) = self.tol {
            config.tol_objective = t;
        }
        Ok(config)
    }
}

#[derive(Args, Debug)]
struct SolveArgs {
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    solver: SolverFlags,
    /// Output directory (overrides the config file).
    #[arg(short = 'o')]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BarycenterArgs {
    /// Comma-separated weights summing to 1, one per image.
    #[arg(long, value_delimiter = ',', required = true)]
    weights: Vec<f64>,
    #[arg(required = true, num_args = 2..)]
    images: Vec<PathBuf>,
    /// Output image (.pgm or .png).
    #[arg(short = 'o', required = true)]
    output: PathBuf,
    #[arg(long, default_value_t = DEFAULT_FLOOR)]
    floor: f64,
    #[command(flatten)]
    solver: SolverFlags,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TileFormat {
    Pgm,
    Png,
}

#[derive(Args, Debug)]
struct AtlasArgs {
    #[arg(long, default_value_t = 3)]
    steps: usize,
    /// Corner images for (0,0), (1,0), (0,1), (1,1).
    #[arg(num_args = 4, required = true)]
    corners: Vec<PathBuf>,
    /// Output directory.
    #[arg(short = 'o', required = true)]
    output: PathBuf,
    #[arg(long, value_enum, default_value_t = TileFormat::Pgm)]
    format: TileFormat,
    #[arg(long, default_value_t = DEFAULT_FLOOR)]
    floor: f64,
    #[command(flatten)]
    solver: SolverFlags,
}

#[derive(Args, Debug)]
struct ValidateArgs {
    /// Suite name, or `all`.
    #[arg(default_value = "all")]
    suite: String,
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|source| mmot::Error::Io { path: dir.to_path_buf(), source }.into())
}

fn load_all(paths: &[PathBuf], floor: f64) -> Result<Vec<DensityField>, CliError> {
    paths.iter().map(|p| load_density(p, floor).map_err(CliError::from)).collect()
}

fn cmd_solve(args: &SolveArgs) -> Result<u8, CliError> {
    let text = std::fs::read_to_string(&args.config)
        .map_err(|source| mmot::Error::Io { path: args.config.clone(), source })?;
    let base = args.config.parent().unwrap_or(Path::new("."));
    let cfg = config::parse(&text, base)?;
    let solver = args.solver.apply(cfg.solver.clone())?;
    let marginals = load_all(&cfg.marginals, cfg.floor)?;
    let graph = CostGraph::new(marginals.len(), cfg.edges.iter().copied())?;
    let problem = MmotProblem::new(graph, marginals)?;
    let sol = solve_with_observer(&problem, &solver, |r| {
        eprintln!("iter {:4}  root {}  objective {:.12}  residual {:.3e}", r.iter, r.root + 1, r.objective, r.residual)
    })?;

    let dir = args.output.clone().unwrap_or(cfg.output.dir.clone());
    ensure_dir(&dir)?;
    write_text(dir.join(&cfg.output.history), &history_csv(&sol.history, cfg.output.timing))?;
    if cfg.output.write_potentials {
        for (i, f) in sol.potentials.iter().enumerate() {
            let path = dir.join(format!("{}_{}.f64", cfg.output.potential_prefix, i + 1));
            write_raw(path, f.grid(), f.values())?;
        }
    }
    println!("objective {:.12}", sol.objective);
    println!("iterations {}", sol.iterations());
    println!("stop {:?}", sol.stop_reason);
    Ok(if sol.converged { 0 } else { EXIT_NOT_CONVERGED })
}

fn cmd_barycenter(args: &BarycenterArgs) -> Result<u8, CliError> {
    if args.weights.len() != args.images.len() {
        return Err(CliError::Parse(format!(
            "{} weights for {} images",
            args.weights.len(),
            args.images.len()
        )));
    }
    let total: f64 = args.weights.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(CliError::Parse(format!("weights sum to {total}, expected 1")));
    }
    let solver = args.solver.apply(SolverConfig::default())?;
    let marginals = load_all(&args.images, args.floor)?;
    let bary = barycenter_with_zero_weights(&marginals, &args.weights, &solver)?;
    write_density_image(&args.output, &bary)?;
    Ok(0)
}

fn cmd_atlas(args: &AtlasArgs, jobs: usize) -> Result<u8, CliError> {
    let solver = args.solver.apply(SolverConfig::default())?;
    let corners: [DensityField; 4] = load_all(&args.corners, args.floor)?
        .try_into()
        .map_err(|_| CliError::Parse("atlas needs exactly four corner images".into()))?;
    let atlas = barycentric_grid(&corners, args.steps, &solver, jobs)?;
    ensure_dir(&args.output)?;
    let ext = match args.format {
        TileFormat::Pgm => "pgm",
        TileFormat::Png => "png",
    };
    let mut index = String::from("# row col u v w00 w10 w01 w11 file\n");
    let denom = (args.steps - 1) as f64;
    for (r, row) in atlas.iter().enumerate() {
        for (c, mu) in row.iter().enumerate() {
            let name = format!("tile_{r}_{c}.{ext}");
            write_density_image(args.output.join(&name), mu)?;
            let (u, v) = (c as f64 / denom, r as f64 / denom);
            let w = bilinear_weights(u, v);
            let _ = writeln!(index, "{r} {c} {u} {v} {} {} {} {} {name}", w[0], w[1], w[2], w[3]);
        }
    }
    write_text(args.output.join("index.txt"), &index)?;
    Ok(0)
}

fn cmd_validate(args: &ValidateArgs, seed: u64) -> Result<u8, CliError> {
    let names: Vec<&str> = if args.suite == "all" {
        SUITES.to_vec()
    } else if SUITES.contains(&args.suite.as_str()) {
        vec![args.suite.as_str()]
    } else {
        return Err(CliError::Parse(format!(
            "unknown suite '{}' (expected all or one of {})",
            args.suite,
            SUITES.join(", ")
        )));
    };
    let mut failed = 0;
    for name in names {
        let report = run_suite(name, seed)?;
        print!("{}", report.tap());
        failed += report.failures().count();
    }
    if failed > 0 {
        eprintln!("{failed} check(s) failed");
        return Ok(EXIT_VALIDATE);
    }
    Ok(0)
}

fn run(cli: &Cli) -> Result<u8, CliError> {
    if cli.jobs > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.jobs)
            .build_global()
            .map_err(|e| CliError::Parse(format!("--jobs: {e}")))?;
    }
    let jobs = if cli.jobs > 0 {
        cli.jobs
    } else {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    };
    match &cli.command {
        Command::Solve(a) => cmd_solve(a),
        Command::Barycenter(a) => cmd_barycenter(a),
        Command::Atlas(a) => cmd_atlas(a, jobs),
        Command::Validate(a) => cmd_validate(a, cli.seed),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(EXIT_PARSE),
            };
        }
    };
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
