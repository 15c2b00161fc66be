//! Command-line front end.
//!
//! Exit codes: 0 when every check passes, 1 on input, output or convergence
//! failures, 2 when a verification fails. A failing report is still written.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::Value;
use shadowtree_core::bs::{BsParams, Strategy};
use shadowtree_core::friction::check_admissible;
use shadowtree_core::frictionless::solve_frictionless;
use shadowtree_core::shadow::{corrupt_to_ask, CpsMethod, Tolerances, VerifyOptions};
use shadowtree_core::SolverOptions;

use crate::formats::{self, write_json};
use crate::pipeline::{cps_check_report, run_bs_example, run_pipeline, Problem};
use crate::report;
use crate::runner::Parallel;

#[derive(Debug, Parser)]
#[command(name = "shadowtree", version, about = "Utility maximization under transaction costs and shadow-price verification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve the frictional problem.
    Solve(SolveArgs),
    /// Solve the frictionless problem at given prices.
    SolveFrictionless(SolveFrictionlessArgs),
    /// Construct a consistent price system from the optimum.
    Shadow(ShadowArgs),
    /// Verify a plan against a consistent price system.
    Verify(VerifyArgs),
    /// Run the Black–Scholes example with negative endowment.
    BsExample(BsArgs),
    /// Solve, construct the price system and verify it in one go.
    Pipeline(PipelineArgs),
}

#[derive(Debug, Args)]
pub struct ProblemArgs {
    #[arg(long)]
    pub tree: PathBuf,
    #[arg(long)]
    pub endow: PathBuf,
    /// Inline JSON or a file, e.g. '{"family":"power","gamma":0.5}'.
    #[arg(long, default_value = r#"{"family":"log"}"#)]
    pub utility: String,
}

impl ProblemArgs {
    fn load(&self) -> anyhow::Result<Problem> {
        let tree = formats::load_tree(&self.tree)?;
        let endow = formats::load_endowment(&self.endow, &tree)?;
        let utility = formats::parse_utility(&self.utility)?;
        Ok(Problem { tree, endow, utility })
    }
}

#[derive(Debug, Args)]
pub struct SolverArgs {
    /// Final barrier weight.
    #[arg(long)]
    pub mu_final: Option<f64>,
    /// Largest accepted KKT residual.
    #[arg(long)]
    pub kkt_threshold: Option<f64>,
    #[arg(long)]
    pub max_newton_steps: Option<usize>,
}

impl SolverArgs {
    fn options(&self) -> anyhow::Result<SolverOptions> {
        let mut o = SolverOptions::default();
        if let Some(v) = self.mu_final {
            o.mu_final = positive("mu-final", v)?;
        }
        if let Some(v) = self.kkt_threshold {
            o.kkt_threshold = positive("kkt-threshold", v)?;
        }
        if let Some(v) = self.max_newton_steps {
            o.max_newton_steps = v;
        }
        Ok(o)
    }
}

#[derive(Debug, Args)]
pub struct ToleranceArgs {
    #[arg(long)]
    pub tol_sandwich: Option<f64>,
    #[arg(long)]
    pub tol_supermartingale: Option<f64>,
    /// Relative tolerance of the terminal and complementarity residuals.
    #[arg(long)]
    pub tol_optimality: Option<f64>,
    /// Relative tolerance of the shadow gap.
    #[arg(long)]
    pub tol_gap: Option<f64>,
    /// Absolute slack of the dominance check.
    #[arg(long)]
    pub tol_gap_floor: Option<f64>,
    #[arg(long)]
    pub tol_duality: Option<f64>,
    #[arg(long)]
    pub tol_trade_location: Option<f64>,
    #[arg(long)]
    pub tol_dp_martingale: Option<f64>,
    #[arg(long)]
    pub tol_deflated_wealth: Option<f64>,
    /// Random admissible plans for the deflated-wealth check.
    #[arg(long, default_value_t = 50)]
    pub random_plans: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl ToleranceArgs {
    fn options(&self, solver: SolverOptions) -> anyhow::Result<VerifyOptions> {
        let mut t = Tolerances::default();
        for (name, flag, slot) in [
            ("tol-sandwich", self.tol_sandwich, &mut t.sandwich),
            ("tol-supermartingale", self.tol_supermartingale, &mut t.supermartingale),
            ("tol-optimality", self.tol_optimality, &mut t.optimality),
            ("tol-gap", self.tol_gap, &mut t.gap),
            ("tol-gap-floor", self.tol_gap_floor, &mut t.gap_floor),
            ("tol-duality", self.tol_duality, &mut t.duality),
            ("tol-trade-location", self.tol_trade_location, &mut t.trade_location),
            ("tol-dp-martingale", self.tol_dp_martingale, &mut t.dp_martingale),
            ("tol-deflated-wealth", self.tol_deflated_wealth, &mut t.deflated_wealth),
        ] {
            if let Some(v) = flag {
                *slot = positive(name, v)?;
            }
        }
        Ok(VerifyOptions { tolerances: t, random_plans: self.random_plans, seed: self.seed, solver })
    }
}

fn positive(name: &str, v: f64) -> anyhow::Result<f64> {
    if !(v.is_finite() && v > 0.0) {
        bail!("--{name} must be positive, got {v}");
    }
    Ok(v)
}

#[derive(Debug, Args)]
pub struct OutputArgs {
    /// Write the JSON report here and print a summary; without it the JSON
    /// goes to standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    #[command(flatten)]
    pub problem: ProblemArgs,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct SolveFrictionlessArgs {
    #[command(flatten)]
    pub problem: ProblemArgs,
    /// Price document `{"s_z": {"node": price}}`.
    #[arg(long)]
    pub prices: PathBuf,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    /// Difference quotients of conditional values.
    Fd,
    /// Holding multipliers of the solve.
    Kkt,
}

impl MethodArg {
    fn method(self) -> CpsMethod {
        match self {
            MethodArg::Fd => CpsMethod::FiniteDifference,
            MethodArg::Kkt => CpsMethod::KktMultiplier,
        }
    }
}

#[derive(Debug, Args)]
pub struct ShadowArgs {
    #[command(flatten)]
    pub problem: ProblemArgs,
    /// Relative difference step, within [1e-7, 1e-3].
    #[arg(long, default_value_t = 1e-5)]
    pub eps: f64,
    #[arg(long, value_enum, default_value_t = MethodArg::Fd)]
    pub method: MethodArg,
    #[command(flatten)]
    pub tolerances: ToleranceArgs,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[command(flatten)]
    pub problem: ProblemArgs,
    #[arg(long)]
    pub cps: PathBuf,
    /// Plan document or solve report.
    #[arg(long)]
    pub plan: PathBuf,
    /// Replace the price system by the ask-price control before verifying.
    #[arg(long)]
    pub negative_control: bool,
    #[command(flatten)]
    pub tolerances: ToleranceArgs,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct BsArgs {
    /// Horizon T.
    #[arg(long = "T", default_value_t = 2.0)]
    pub horizon: f64,
    #[arg(long, default_value_t = 0.1)]
    pub lambda: f64,
    /// Grid points on [0, T/2].
    #[arg(long, default_value_t = 64)]
    pub grid: usize,
    #[arg(long, default_value_t = 100_000)]
    pub paths: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Extra strategy to probe, e.g. scaled-buy:0.9; repeatable.
    #[arg(long)]
    pub probe: Vec<String>,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    #[command(flatten)]
    pub problem: ProblemArgs,
    #[arg(long, default_value_t = 1e-5)]
    pub eps: f64,
    #[arg(long, value_enum, default_value_t = MethodArg::Fd)]
    pub method: MethodArg,
    /// Also write the price system as a CPS document.
    #[arg(long)]
    pub cps_out: Option<PathBuf>,
    #[command(flatten)]
    pub tolerances: ToleranceArgs,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[command(flatten)]
    pub output: OutputArgs,
}

/// How a command ended when it did not fail operationally.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Passed,
    VerificationFailed,
    NotConverged,
}

impl Outcome {
    pub fn exit_code(self) -> i32 {
        match self {
            Outcome::Passed => 0,
            Outcome::NotConverged => 1,
            Outcome::VerificationFailed => 2,
        }
    }

    fn from_pass(pass: bool) -> Self {
        if pass {
            Outcome::Passed
        } else {
            Outcome::VerificationFailed
        }
    }
}

fn emit(report: &Value, output: &OutputArgs) -> anyhow::Result<()> {
    match &output.out {
        Some(path) => {
            write_json(path, report)?;
            print!("{}", report::summary(report));
        }
        None => print!("{}", formats::to_json_string(report)),
    }
    Ok(())
}

fn write_to(path: &Path, value: &Value) -> anyhow::Result<()> {
    write_json(path, value).with_context(|| format!("writing {}", path.display()))
}

pub fn run(cli: Cli) -> anyhow::Result<Outcome> {
    match cli.command {
        Command::Solve(a) => {
            let problem = a.problem.load()?;
            let opts = a.solver.options()?;
            let solved = problem.solve(&opts)?;
            emit(&report::solve("solve", &problem.tree, &solved, &opts), &a.output)?;
            Ok(if solved.converged { Outcome::Passed } else { Outcome::NotConverged })
        }
        Command::SolveFrictionless(a) => {
            let problem = a.problem.load()?;
            let prices = formats::read_json::<formats::PricesDoc>(&a.prices)?.into_prices(&problem.tree)?;
            let opts = a.solver.options()?;
            let solved = solve_frictionless(&problem.tree, &prices, &problem.utility, &problem.endow, &opts)?;
            emit(&report::solve("solve-frictionless", &problem.tree, &solved, &opts), &a.output)?;
            Ok(if solved.converged { Outcome::Passed } else { Outcome::NotConverged })
        }
        Command::Shadow(a) => {
            let problem = a.problem.load()?;
            let opts = a.solver.options()?;
            let verify = a.tolerances.options(opts)?;
            let solved = problem.solve(&opts)?;
            if !solved.converged {
                bail!("the frictional solve did not converge (kkt residual {:e})", solved.kkt_residual);
            }
            let runner = Parallel::from_env()?;
            let cps = problem.cps(&solved, a.method.method(), a.eps, &opts, &runner)?;
            let (doc, pass) = cps_check_report(&problem.tree, &cps, &verify.tolerances);
            emit(&doc, &a.output)?;
            Ok(Outcome::from_pass(pass))
        }
        Command::Verify(a) => {
            let problem = a.problem.load()?;
            let opts = a.solver.options()?;
            let verify = a.tolerances.options(opts)?;
            let plan = formats::load_plan(&a.plan, &problem.tree, problem.endow.x)?;
            let broken = check_admissible(&problem.tree, &plan, &problem.endow, verify.solver.feasibility_tolerance);
            if let Some(v) = broken.first() {
                bail!("plan is not admissible at node {} ({:?} by {:e})", v.node, v.kind, v.magnitude);
            }
            let mut cps = formats::load_cps(&a.cps, &problem.tree)?;
            if a.negative_control {
                cps = corrupt_to_ask(&problem.tree, &cps);
            }
            let runner = Parallel::from_env()?;
            let result = shadowtree_core::shadow::verify_shadow(
                &problem.tree,
                &problem.utility,
                &problem.endow,
                &plan,
                &cps,
                &verify,
                &runner,
            )?;
            let mut doc = report::verification(&cps, &result, &verify);
            doc["negative_control"] = Value::Bool(a.negative_control);
            emit(&doc, &a.output)?;
            Ok(Outcome::from_pass(result.passed()))
        }
        Command::BsExample(a) => {
            let params = BsParams::new(a.horizon, a.lambda, a.grid, a.paths, a.seed)?;
            let extra = a.probe.iter().map(|s| s.parse::<Strategy>()).collect::<Result<Vec<_>, _>>()?;
            let runner = Parallel::from_env()?;
            let (doc, pass) = run_bs_example(&params, &extra, &runner)?;
            emit(&doc, &a.output)?;
            Ok(Outcome::from_pass(pass))
        }
        Command::Pipeline(a) => {
            let problem = a.problem.load()?;
            let opts = a.solver.options()?;
            let verify = a.tolerances.options(opts)?;
            let runner = Parallel::from_env()?;
            let (doc, cps, pass) = run_pipeline(&problem, a.method.method(), a.eps, &verify, &runner)?;
            if let Some(path) = &a.cps_out {
                write_to(path, &report::cps(&problem.tree, &cps))?;
            }
            emit(&doc, &a.output)?;
            Ok(Outcome::from_pass(pass))
        }
    }
}

/// Parse the arguments, run, and map the result to an exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli) {
        Ok(outcome) => outcome.exit_code(),
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}
