//! Command-line driver: `validate`, `solve`, `rollout`, `verify` and `report`.
//!
//! Every subcommand that writes files also writes `summary.txt`, which lists
//! the files produced. Outputs depend only on the flags and the game file, so two
//! runs with identical flags are byte-identical.
//!
//! Exit codes: 0 success, 1 spec, flag or I/O error, 2 solver failure,
//! 3 verification FAIL.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use infodesign::model::validate_with;
use infodesign::model::ValidationOptions;
use infodesign::verify::all_pass;
use infodesign::{
    check_cpse, check_pbe, exact_payoff, io, rollout, solve, BeliefGrid, DeviationReport, Error,
    GameSpec, Interpolation, Lookup, Mode, OffSupport, OracleConfig, RolloutConfig, RolloutSummary,
    Solution, SolvedStrategy, SolverConfig,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 1;
pub const EXIT_SOLVER: i32 = 2;
pub const EXIT_VERIFY: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "infodesign",
    version,
    about = "Equilibria of dynamic information design games"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check a game spec and report every violation.
    Validate {
        #[arg(long)]
        spec: PathBuf,
    },
    /// Solve the game backward and write value and policy tables.
    Solve {
        #[command(flatten)]
        run: RunArgs,
        /// Also run the deviation oracle and write verification.csv.
        #[arg(long)]
        verify: bool,
        #[arg(long = "tol-dev", default_value_t = 1e-6)]
        tol_dev: f64,
    },
    /// Solve, then simulate paths of the equilibrium and write them.
    Rollout {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        sim: SimArgs,
    },
    /// Solve, then check the equilibrium against brute-force deviations.
    Verify {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long = "tol-dev", default_value_t = 1e-6)]
        tol_dev: f64,
    },
    /// Everything: tables, paths, verification and payoff-vs-horizon data.
    Report {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        sim: SimArgs,
        #[arg(long = "tol-dev", default_value_t = 1e-6)]
        tol_dev: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Pbe,
    Cpse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InterpArg {
    Linear,
    Nearest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LookupArg {
    Resolve,
    Nearest,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long, value_enum, default_value_t = ModeArg::Pbe)]
    pub mode: ModeArg,
    /// Grid resolution: beliefs are multiples of 1/grid.
    #[arg(long, default_value_t = 50, value_parser = clap::value_parser!(u32).range(1..))]
    pub grid: u32,
    #[arg(long, value_enum, default_value_t = InterpArg::Linear)]
    pub interp: InterpArg,
    /// How prescriptions are chosen at beliefs off the grid.
    #[arg(long, value_enum, default_value_t = LookupArg::Resolve)]
    pub lookup: LookupArg,
    /// Stage fixed-point and Nash tolerance.
    #[arg(long = "tol-fp", default_value_t = 1e-6)]
    pub tol_fp: f64,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct SimArgs {
    #[arg(long, default_value_t = 10_000)]
    pub paths: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidSpec(_)
        | Error::Io(_)
        | Error::Json(_)
        | Error::Csv(_)
        | Error::Unsupported(_) => EXIT_INPUT,
        _ => EXIT_SOLVER,
    }
}

fn execute(cmd: &Command) -> Result<i32, Error> {
    match cmd {
        Command::Validate { spec } => validate_cmd(spec),
        Command::Solve {
            run,
            verify,
            tol_dev,
        } => {
            let mut job = Job::new(run)?;
            job.tables()?;
            if *verify {
                job.verify(*tol_dev)?;
            }
            job.finish()
        }
        Command::Rollout { run, sim } => {
            let mut job = Job::new(run)?;
            job.simulate(sim)?;
            job.finish()
        }
        Command::Verify { run, tol_dev } => {
            let mut job = Job::new(run)?;
            job.verify(*tol_dev)?;
            job.finish()
        }
        Command::Report { run, sim, tol_dev } => {
            let mut job = Job::new(run)?;
            job.tables()?;
            job.simulate(sim)?;
            job.verify(*tol_dev)?;
            job.horizon_curve()?;
            job.finish()
        }
    }
}

fn validate_cmd(path: &Path) -> Result<i32, Error> {
    let spec = GameSpec::from_path(path)?;
    let v = validate_with(&spec, ValidationOptions::default());
    for w in &v.warnings {
        println!("warning: {w}");
    }
    for e in &v.violations {
        println!("error: {e}");
    }
    if v.is_ok() {
        println!("{}: ok", path.display());
        Ok(EXIT_OK)
    } else {
        Ok(EXIT_INPUT)
    }
}

fn fmt_values(v: &[f64]) -> String {
    v.iter()
        .map(|x| format!("{x:.9}"))
        .collect::<Vec<_>>()
        .join(", ")
}

/// One solved game and the outputs produced from it.
struct Job<'a> {
    args: &'a RunArgs,
    spec: GameSpec,
    mode: Mode,
    config: SolverConfig,
    solution: Solution,
    files: Vec<&'static str>,
    summary: String,
    verdict: Option<bool>,
}

impl<'a> Job<'a> {
    fn new(args: &'a RunArgs) -> Result<Self, Error> {
        let spec = GameSpec::from_path(&args.spec)?;
        let mode = match args.mode {
            ModeArg::Pbe => Mode::Pbe,
            ModeArg::Cpse => Mode::Cpse,
        };
        let interp = match args.interp {
            InterpArg::Linear => Interpolation::SimplexLinear,
            InterpArg::Nearest => Interpolation::Nearest,
        };
        if !(args.tol_fp > 0.0) {
            return Err(Error::InvalidSpec(format!(
                "--tol-fp must be positive, got {}",
                args.tol_fp
            )));
        }
        let config = SolverConfig {
            eps_fp: args.tol_fp,
            eps_nash: args.tol_fp,
            ..SolverConfig::default()
        };
        let grid = BeliefGrid::new(spec.n_states, args.grid as usize, interp)?;
        let start = Instant::now();
        let solution = solve(&spec, mode, &grid, &config)?;
        log::info!(
            "solved {} points x {} periods in {:?}",
            grid.len(),
            spec.horizon,
            start.elapsed()
        );
        fs::create_dir_all(&args.out)?;

        let policy = &solution.policy;
        let mut refined = 0;
        let mut non_exhaustive = 0;
        for t in 1..=spec.horizon {
            for p in 0..grid.len() {
                refined += policy.sender(t, p).is_some_and(|e| e.diagnostics.refined) as usize;
                non_exhaustive += policy
                    .receiver(t, p)
                    .is_some_and(|e| !e.diagnostics.exhaustive)
                    as usize;
            }
        }
        let mut summary = String::new();
        writeln!(summary, "spec: {}", args.spec.display()).unwrap();
        writeln!(
            summary,
            "game: {} states, {} signals, {} receivers, actions {:?}, horizon {}, discount {}",
            spec.n_states,
            spec.n_signals,
            spec.n_receivers,
            spec.action_counts,
            spec.horizon,
            spec.discount
        )
        .unwrap();
        writeln!(summary, "mode: {mode}").unwrap();
        writeln!(
            summary,
            "grid: resolution {}, {} points, {:?} interpolation, {:?} lookup",
            args.grid,
            grid.len(),
            interp,
            args.lookup
        )
        .unwrap();
        writeln!(
            summary,
            "stages: {} failed, max sender residual {:.3e}, {} refined commitments, {} non-exhaustive receiver stages",
            policy.failures().len(),
            policy.max_sender_residual(),
            refined,
            non_exhaustive
        )
        .unwrap();
        for f in policy.failures() {
            writeln!(summary, "  failed: {}", f.to_error()).unwrap();
        }
        let mut job = Self {
            args,
            spec,
            mode,
            config,
            solution,
            files: Vec::new(),
            summary,
            verdict: None,
        };
        if job.solution.policy.is_partial() {
            job.finish()?;
            return Err(job.solution.policy.failures()[0].to_error());
        }
        job.payoffs_from_tables();
        Ok(job)
    }

    fn strategy(&self) -> SolvedStrategy<'_> {
        let lookup = match self.args.lookup {
            LookupArg::Resolve => Lookup::Resolve,
            LookupArg::Nearest => Lookup::Nearest,
        };
        SolvedStrategy::new(
            &self.spec,
            &self.solution.policy,
            &self.solution.tables,
            self.config.clone(),
            lookup,
        )
    }

    fn create(&mut self, name: &'static str) -> Result<BufWriter<File>, Error> {
        self.files.push(name);
        Ok(BufWriter::new(File::create(self.args.out.join(name))?))
    }

    fn payoffs_from_tables(&mut self) {
        let prior = self.spec.initial_belief().expect("validated spec");
        let tables = &self.solution.tables;
        let mut v = vec![tables.sender_ex_ante(1, &prior)];
        v.extend((0..self.spec.n_receivers).map(|i| tables.receiver_value(1, i, &prior)));
        let players: Vec<String> = self.spec.players().iter().map(|p| p.to_string()).collect();
        writeln!(
            self.summary,
            "payoffs at the prior ({}):",
            players.join(", ")
        )
        .unwrap();
        writeln!(self.summary, "  tables: {}", fmt_values(&v)).unwrap();
    }

    fn tables(&mut self) -> Result<(), Error> {
        let out = self.create("value_tables.csv")?;
        io::write_value_tables(out, &self.solution.tables, &self.spec)?;
        let out = self.create("policy.csv")?;
        io::write_policy(out, &self.solution.policy, &self.spec)?;
        let out = self.create("value_slice.csv")?;
        io::write_value_slice(out, &self.solution.tables, &self.spec, 100)?;
        Ok(())
    }

    fn simulate(&mut self, sim: &SimArgs) -> Result<(), Error> {
        let cfg = RolloutConfig {
            paths: sim.paths,
            seed: sim.seed,
            off_support: OffSupport::UniformReset,
        };
        let strategy = self.strategy();
        let exact = match exact_payoff(&self.spec, &strategy, infodesign::forward::DEFAULT_NODE_CAP)
        {
            Ok(v) => fmt_values(&v),
            Err(Error::TreeTooLarge { nodes, cap }) => {
                format!("unavailable ({nodes} nodes exceed the cap of {cap})")
            }
            Err(e) => return Err(e),
        };
        let start = Instant::now();
        let (summary, paths): (RolloutSummary, _) = rollout(&self.spec, &strategy, &cfg)?;
        log::info!("simulated {} paths in {:?}", sim.paths, start.elapsed());
        drop(strategy);
        writeln!(self.summary, "  exact: {exact}").unwrap();
        if sim.paths > 0 {
            let se: Vec<String> = summary
                .mean
                .iter()
                .zip(&summary.std_error)
                .map(|(m, s)| format!("{m:.9} ± {s:.3e}"))
                .collect();
            writeln!(
                self.summary,
                "  rollout ({} paths, seed {}): {}",
                summary.paths,
                summary.seed,
                se.join(", ")
            )
            .unwrap();
        }
        let out = self.create("trajectories.csv")?;
        io::write_trajectories(out, &paths, &self.spec)?;
        Ok(())
    }

    fn verify(&mut self, tol_dev: f64) -> Result<(), Error> {
        if !(tol_dev > 0.0) {
            return Err(Error::InvalidSpec(format!(
                "--tol-dev must be positive, got {tol_dev}"
            )));
        }
        let cfg = OracleConfig {
            eps_dev: tol_dev,
            ..OracleConfig::default()
        };
        let strategy = self.strategy();
        let start = Instant::now();
        let reports: Vec<DeviationReport> = match self.mode {
            Mode::Pbe => check_pbe(&self.spec, &strategy, Some(&self.solution.tables), &cfg)?,
            Mode::Cpse => check_cpse(&self.spec, &strategy, Some(&self.solution.tables), &cfg)?,
        };
        log::info!("verified in {:?}", start.elapsed());
        drop(strategy);
        let pass = all_pass(&reports);
        writeln!(
            self.summary,
            "verification: {}",
            if pass { "PASS" } else { "FAIL" }
        )
        .unwrap();
        for r in &reports {
            writeln!(self.summary, "  {r}").unwrap();
            writeln!(
                self.summary,
                "    reachable gain {:.3e} over {} information sets",
                r.reachable_gain, r.info_sets
            )
            .unwrap();
        }
        let out = self.create("verification.csv")?;
        io::write_reports(out, &reports)?;
        self.verdict = Some(pass);
        Ok(())
    }

    /// Period-1 values at the prior for every horizon up to the game's.
    fn horizon_curve(&mut self) -> Result<(), Error> {
        let prior = self.spec.initial_belief()?;
        let grid = self.solution.tables.grid().clone();
        let mut w = csv::Writer::from_writer(self.create("horizon_curve.csv")?);
        let mut header = vec!["horizon".to_string()];
        header.extend(self.spec.players().iter().map(|p| p.to_string()));
        w.write_record(&header)?;
        for h in 1..=self.spec.horizon {
            let spec = GameSpec {
                horizon: h,
                ..self.spec.clone()
            };
            let tables = if h == self.spec.horizon {
                self.solution.tables.clone()
            } else {
                solve(&spec, self.mode, &grid, &self.config)?.tables
            };
            let mut row = vec![h.to_string(), tables.sender_ex_ante(1, &prior).to_string()];
            row.extend(
                (0..spec.n_receivers).map(|i| tables.receiver_value(1, i, &prior).to_string()),
            );
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    fn finish(&mut self) -> Result<i32, Error> {
        self.files.push("summary.txt");
        let mut text = String::from("infodesign summary\n");
        text.push_str(&self.summary);
        text.push_str("files:\n");
        for f in &self.files {
            writeln!(text, "  {f}").unwrap();
        }
        fs::create_dir_all(&self.args.out)?;
        fs::write(self.args.out.join("summary.txt"), text)?;
        Ok(match self.verdict {
            Some(false) => EXIT_VERIFY,
            _ => EXIT_OK,
        })
    }
}
