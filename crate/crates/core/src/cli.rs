//! Command-line front end.
//!
//! Exit codes: 0 success, 1 invalid chain or failed operation, 2 unreadable
//! or malformed input, 3 rank did not converge, 4 fixed opinions do not match
//! the coalition complement.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use nalgebra::DVector;
use serde::Serialize;

use crate::chain::{Chain, Tail, TimeMode};
use crate::coalition::{coalition_from_report, steer, Coalition, SteeringPlan, MAX_CONDITION, PIVOT_TOL};
use crate::decomposition::{sonin_decomposition, JetDecomposition, SoninConfig};
use crate::error::Error;
use crate::geometry::{vertex_count_trace, VertexTrace, DEFAULT_TOL_CLUSTER, DEFAULT_TOL_VERTEX, NESTING_TOL};
use crate::graph::{bounds_report, infinite_flow_graph, unbounded_interactions_graph, BoundsReport};
use crate::json::{to_string_pretty, write_atomic};
use crate::rank::{rank, RankReport, DEFAULT_TOL, EXACT_TOL, STABLE_MARGIN, UNIT_MARGIN};
use crate::transition::{default_schedule, simulate};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_PARSE: i32 = 2;
pub const EXIT_NOT_CONVERGED: i32 = 3;
pub const EXIT_FIXED_MISMATCH: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "egc", version, about = "Rank, steering coalitions and structural bounds of opinion-dynamics chains")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check row sums and signs of every segment.
    Validate { path: PathBuf },
    /// Rank, smallest coalition and bounds, written as one JSON bundle.
    #[command(allow_negative_numbers = true)]
    Analyze {
        path: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        tau: f64,
        /// Singular-value threshold for numerically computed ranks.
        #[arg(long, default_value_t = DEFAULT_TOL)]
        tol: f64,
        /// Last horizon of the polytope trace and of the jet decomposition.
        #[arg(long)]
        horizon: Option<f64>,
        /// Include the vertex-count trace.
        #[arg(long)]
        polytope: bool,
        /// Include the jet decomposition (discrete chains only).
        #[arg(long)]
        jets: bool,
        #[arg(long, default_value_t = DEFAULT_TOL_VERTEX)]
        tol_vertex: f64,
        #[arg(long, default_value_t = DEFAULT_TOL_CLUSTER)]
        tol_cluster: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Opinions for the smallest coalition that force consensus on a target.
    #[command(allow_negative_numbers = true)]
    Steer {
        path: PathBuf,
        #[arg(long)]
        target: f64,
        /// Opinions of the agents outside the coalition, as `i=v,...` (1-based).
        #[arg(long, allow_hyphen_values = true, default_value = "")]
        fixed: String,
        #[arg(long, default_value_t = 0.0)]
        t0: f64,
        #[arg(long)]
        verify_horizon: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Opinion trajectory as CSV.
    #[command(allow_negative_numbers = true)]
    Simulate {
        path: PathBuf,
        /// Initial opinions, comma separated.
        #[arg(long, allow_hyphen_values = true)]
        x0: String,
        #[arg(long, default_value_t = 0.0)]
        t0: f64,
        /// Sample times, comma separated, starting at `t0`.
        #[arg(long, allow_hyphen_values = true)]
        samples: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Interaction graph of the tail in DOT format.
    Graph {
        path: PathBuf,
        #[arg(long, value_enum, default_value_t = GraphArg::H1)]
        kind: GraphArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Vertex counts of the polytope spanned by the rows of the transition matrix.
    #[command(allow_negative_numbers = true)]
    Polytope {
        path: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        tau: f64,
        /// Horizons, comma separated; defaults to the doubling schedule.
        #[arg(long, allow_hyphen_values = true)]
        horizons: Option<String>,
        #[arg(long, default_value_t = DEFAULT_TOL_VERTEX)]
        tol_vertex: f64,
        /// Also write the trace as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Jet decomposition of a discrete chain.
    #[command(allow_negative_numbers = true)]
    Jets {
        path: PathBuf,
        #[arg(long)]
        horizon: Option<usize>,
        #[arg(long, default_value_t = DEFAULT_TOL_CLUSTER)]
        tol_cluster: f64,
        #[arg(long, default_value_t = 1e-6)]
        mass_floor: f64,
        #[arg(long, default_value_t = 10.0)]
        flow_warn: f64,
        /// Probe initial opinions, comma separated; defaults to 1..N.
        #[arg(long, allow_hyphen_values = true)]
        probe: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum GraphArg {
    H1,
    H2,
}

/// Failure carrying its exit code.
struct Failure {
    code: i32,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Parse(_) | Error::Io(_) => EXIT_PARSE,
            Error::NotConverged(_) => EXIT_NOT_CONVERGED,
            Error::FixedOpinionMismatch(_) => EXIT_FIXED_MISMATCH,
            _ => EXIT_INVALID,
        };
        Failure { code, message: e.to_string() }
    }
}

fn fail(code: i32, message: impl Into<String>) -> Failure {
    Failure { code, message: message.into() }
}

type CmdResult = std::result::Result<i32, Failure>;

/// Runs the command line `args` (program name first) and returns the exit
/// code. Reports go to `stdout`, diagnostics to `stderr`.
///
/// `EGC_THREADS` caps the worker threads used inside the library.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_PARSE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() { stderr.write_all(text.as_bytes()) } else { stdout.write_all(text.as_bytes()) };
            return code;
        }
    };
    let threads = std::env::var("EGC_THREADS").ok().and_then(|v| v.parse::<usize>().ok()).filter(|&k| k > 0);
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(k) = threads {
        builder = builder.num_threads(k);
    }
    let (mut out_buf, mut err_buf) = (Vec::new(), Vec::new());
    let result = match builder.build() {
        Ok(pool) => pool.install(|| dispatch(cli.command, &mut out_buf, &mut err_buf)),
        Err(e) => Err(fail(EXIT_INVALID, format!("cannot start worker threads: {}", e))),
    };
    let _ = stdout.write_all(&out_buf);
    let _ = stderr.write_all(&err_buf);
    match result {
        Ok(code) => code,
        Err(f) => {
            let _ = writeln!(stderr, "error: {}", f.message);
            f.code
        }
    }
}

fn dispatch(cmd: Command, stdout: &mut dyn Write, stderr: &mut dyn Write) -> CmdResult {
    match cmd {
        Command::Validate { path } => cmd_validate(&path, stdout),
        Command::Analyze { path, tau, tol, horizon, polytope, jets, tol_vertex, tol_cluster, out } => {
            let opts = AnalyzeOptions { tau, tol, horizon, polytope, jets, tol_vertex, tol_cluster };
            cmd_analyze(&path, &opts, out.as_deref(), stdout, stderr)
        }
        Command::Steer { path, target, fixed, t0, verify_horizon, out } => {
            cmd_steer(&path, target, &fixed, t0, verify_horizon, out.as_deref(), stdout)
        }
        Command::Simulate { path, x0, t0, samples, out } => cmd_simulate(&path, &x0, t0, &samples, out.as_deref(), stdout),
        Command::Graph { path, kind, out } => cmd_graph(&path, kind, out.as_deref(), stdout),
        Command::Polytope { path, tau, horizons, tol_vertex, csv, out } => {
            cmd_polytope(&path, tau, horizons.as_deref(), tol_vertex, csv.as_deref(), out.as_deref(), stdout)
        }
        Command::Jets { path, horizon, tol_cluster, mass_floor, flow_warn, probe, out } => {
            let probe = probe.map(|p| parse_list(&p, "--probe")).transpose()?.map(DVector::from_vec);
            let cfg = SoninConfig { horizon, tol_cluster, mass_floor, flow_warn, probe };
            cmd_jets(&path, &cfg, out.as_deref(), stdout, stderr)
        }
    }
}

fn read_chain(path: &Path) -> std::result::Result<Chain, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| fail(EXIT_PARSE, format!("{}: {}", path.display(), e)))?;
    Chain::from_json_str(&text).map_err(|e| {
        let mut f = Failure::from(e);
        f.message = format!("{}: {}", path.display(), f.message);
        f
    })
}

/// Loads a chain and rejects it unless every segment validates.
fn load_valid(path: &Path) -> std::result::Result<Chain, Failure> {
    let chain = read_chain(path)?;
    let report = chain.validate();
    if !report.is_valid() {
        let lines: Vec<String> = report.violations.iter().map(|v| v.to_string()).collect();
        return Err(fail(EXIT_INVALID, format!("invalid chain:\n  {}", lines.join("\n  "))));
    }
    Ok(chain)
}

fn emit(text: &str, out: Option<&Path>, stdout: &mut dyn Write) -> std::result::Result<(), Failure> {
    match out {
        Some(p) => write_atomic(p, text.as_bytes()).map_err(|e| fail(EXIT_INVALID, format!("{}: {}", p.display(), e))),
        None => stdout.write_all(text.as_bytes()).map_err(|e| fail(EXIT_INVALID, e.to_string())),
    }
}

fn parse_list(text: &str, flag: &str) -> std::result::Result<Vec<f64>, Failure> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().map_err(|_| fail(EXIT_PARSE, format!("{}: cannot parse {:?} as a number", flag, s))))
        .collect()
}

/// `"i=v,..."` with 1-based agents, returned 0-based.
pub fn parse_fixed(text: &str, n: usize) -> Result<BTreeMap<usize, f64>, String> {
    let mut out = BTreeMap::new();
    for item in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (i, v) = item.split_once('=').ok_or_else(|| format!("expected i=v, got {:?}", item))?;
        let i: usize = i.trim().parse().map_err(|_| format!("bad agent index {:?}", i))?;
        let v: f64 = v.trim().parse().map_err(|_| format!("bad opinion {:?}", v))?;
        if i == 0 || i > n {
            return Err(format!("agent {} out of range 1..={}", i, n));
        }
        if out.insert(i - 1, v).is_some() {
            return Err(format!("agent {} given twice", i));
        }
    }
    Ok(out)
}

fn cmd_validate(path: &Path, stdout: &mut dyn Write) -> CmdResult {
    let chain = match read_chain(path) {
        Ok(c) => c,
        Err(f) if f.code == EXIT_PARSE => return Err(f),
        Err(f) => {
            let _ = writeln!(stdout, "invalid: {}", f.message);
            return Ok(EXIT_INVALID);
        }
    };
    let report = chain.validate();
    if report.is_valid() {
        let _ = writeln!(
            stdout,
            "valid: {} chain, N = {}, {} prefix segment(s), {}",
            chain.mode(),
            chain.n(),
            chain.prefix().len(),
            match chain.tail() {
                Tail::Zero => "zero tail".to_string(),
                Tail::Periodic(b) => format!("periodic tail of {} segment(s)", b.len()),
            }
        );
        Ok(EXIT_OK)
    } else {
        let _ = writeln!(stdout, "invalid: {} violation(s)", report.violations.len());
        for v in &report.violations {
            let _ = writeln!(stdout, "  {}", v);
        }
        Ok(EXIT_INVALID)
    }
}

#[derive(Clone, Debug)]
struct AnalyzeOptions {
    tau: f64,
    tol: f64,
    horizon: Option<f64>,
    polytope: bool,
    jets: bool,
    tol_vertex: f64,
    tol_cluster: f64,
}

#[derive(Debug, Serialize)]
pub struct ChainSummary {
    pub mode: TimeMode,
    pub n: usize,
    pub prefix_segments: usize,
    pub prefix_end: f64,
    pub period: Option<f64>,
    pub time_invariant: bool,
}

impl ChainSummary {
    pub fn of(chain: &Chain) -> Self {
        ChainSummary {
            mode: chain.mode(),
            n: chain.n(),
            prefix_segments: chain.prefix().len(),
            prefix_end: chain.prefix_end(),
            period: chain.period(),
            time_invariant: chain.time_invariant().is_some(),
        }
    }
}

#[derive(Debug, Serialize)]
pub struct Tolerances {
    pub rank_tol: f64,
    pub exact_tol: f64,
    pub stable_margin: f64,
    pub unit_margin: f64,
    pub pivot_tol: f64,
    pub max_condition: f64,
    pub tol_vertex: f64,
    pub tol_cluster: f64,
    pub nesting_tol: f64,
}

/// Everything `analyze` computes, with the tolerances it used.
#[derive(Debug, Serialize)]
pub struct AnalysisBundle {
    pub tool: &'static str,
    pub version: &'static str,
    pub chain: ChainSummary,
    pub tau: f64,
    pub tolerances: Tolerances,
    pub rank: RankReport,
    pub coalition: Option<Coalition>,
    pub coalition_error: Option<String>,
    pub bounds: BoundsReport,
    pub polytope: Option<VertexTrace>,
    pub jets: Option<JetDecomposition>,
}

/// Schedule ending at `horizon`: `τ + (horizon − τ)·2^-j`, `j = 7..=0`.
fn schedule_to(chain: &Chain, tau: f64, horizon: Option<f64>) -> std::result::Result<Vec<f64>, Failure> {
    match horizon {
        None => Ok(default_schedule(chain, tau)),
        Some(h) if h > tau => {
            let mut s: Vec<f64> = (0..=7)
                .rev()
                .map(|j| {
                    let t = tau + (h - tau) * 0.5f64.powi(j);
                    if chain.mode() == TimeMode::Discrete {
                        t.ceil()
                    } else {
                        t
                    }
                })
                .collect();
            s.dedup();
            Ok(s)
        }
        Some(h) => Err(fail(EXIT_INVALID, format!("--horizon {} must exceed tau {}", h, tau))),
    }
}

fn cmd_analyze(
    path: &Path,
    o: &AnalyzeOptions,
    out: Option<&Path>,
    stdout: &mut dyn Write,
    stderr: &mut dyn Write,
) -> CmdResult {
    let chain = load_valid(path)?;
    let report = rank(&chain, o.tau, Some(o.tol))?;
    let (coalition, coalition_error) = match coalition_from_report(&report) {
        Ok(c) => (Some(c), None),
        Err(e) => (None, Some(e.to_string())),
    };
    let bounds = bounds_report(&chain, o.tau, Some(o.tol))?;
    let polytope = if o.polytope {
        Some(vertex_count_trace(&chain, o.tau, &schedule_to(&chain, o.tau, o.horizon)?, o.tol_vertex)?)
    } else {
        None
    };
    let jets = if o.jets {
        let cfg = SoninConfig {
            horizon: o.horizon.map(|h| h.ceil() as usize),
            tol_cluster: o.tol_cluster,
            ..SoninConfig::default()
        };
        Some(sonin_decomposition(&chain, &cfg)?)
    } else {
        None
    };
    let bundle = AnalysisBundle {
        tool: "egc",
        version: env!("CARGO_PKG_VERSION"),
        chain: ChainSummary::of(&chain),
        tau: o.tau,
        tolerances: Tolerances {
            rank_tol: o.tol,
            exact_tol: EXACT_TOL,
            stable_margin: STABLE_MARGIN,
            unit_margin: UNIT_MARGIN,
            pivot_tol: PIVOT_TOL,
            max_condition: MAX_CONDITION,
            tol_vertex: o.tol_vertex,
            tol_cluster: o.tol_cluster,
            nesting_tol: NESTING_TOL,
        },
        rank: report,
        coalition,
        coalition_error,
        bounds,
        polytope,
        jets,
    };
    let json = to_string_pretty(&bundle);
    // The summary goes to stdout only when the bundle goes to a file.
    if out.is_some() {
        write_summary(stdout, &bundle);
    } else {
        write_summary(stderr, &bundle);
    }
    emit(&json, out, stdout)?;
    if !bundle.rank.converged {
        return Err(fail(
            EXIT_NOT_CONVERGED,
            format!(
                "rank did not converge: singular values {:?} at horizons {:?}",
                bundle.rank.singular_values, bundle.rank.horizons
            ),
        ));
    }
    Ok(EXIT_OK)
}

fn write_summary(w: &mut dyn Write, b: &AnalysisBundle) {
    let r = &b.rank;
    let _ = writeln!(
        w,
        "rank {} (nullity {}, {}, {})",
        r.rank,
        r.nullity,
        serde_json::to_value(r.method).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default(),
        if r.converged { "converged" } else { "NOT converged" }
    );
    match (&b.coalition, &b.coalition_error) {
        (Some(c), _) => {
            let members: Vec<usize> = c.members.iter().map(|i| i + 1).collect();
            let _ = writeln!(w, "smallest EGC {:?}", members);
        }
        (None, Some(e)) => {
            let _ = writeln!(w, "smallest EGC unavailable: {}", e);
        }
        _ => {}
    }
    let bd = &b.bounds;
    let classes = bd.upper_ergodicity_classes.map_or("unknown".to_string(), |c| c.to_string());
    let _ = writeln!(
        w,
        "bounds: h2 {} <= s-root {} <= rank {} <= min(N - h2' = {}, classes = {}): {}",
        bd.lower_components_h2,
        bd.lower_sroot,
        bd.rank,
        bd.upper_n_minus_h2prime,
        classes,
        if bd.all_consistent { "consistent" } else { "INCONSISTENT" }
    );
}

/// Steering plan plus an independent simulation of the assembled initial
/// vector.
#[derive(Debug, Serialize)]
pub struct SteeringOutput {
    pub plan: SteeringPlan,
    pub simulated_horizon: f64,
    #[serde(serialize_with = "crate::json::ser_vector")]
    pub simulated_state: DVector<f64>,
    pub simulated_max_deviation: f64,
}

fn cmd_steer(
    path: &Path,
    target: f64,
    fixed: &str,
    t0: f64,
    verify_horizon: Option<f64>,
    out: Option<&Path>,
    stdout: &mut dyn Write,
) -> CmdResult {
    let chain = load_valid(path)?;
    let fixed = parse_fixed(fixed, chain.n()).map_err(|m| fail(EXIT_FIXED_MISMATCH, format!("--fixed: {}", m)))?;
    let report = rank(&chain, t0, None)?;
    let coalition = coalition_from_report(&report)?;
    let plan = steer(&chain, &coalition, target, &fixed, verify_horizon)?;
    let horizon = plan.verified_horizon;
    let traj = simulate(&chain, &plan.initial, t0, &[t0, horizon])?;
    let state = traj.states.last().expect("two samples").clone();
    let deviation = state.add_scalar(-target).amax();
    let output = SteeringOutput { plan, simulated_horizon: horizon, simulated_state: state, simulated_max_deviation: deviation };
    emit(&to_string_pretty(&output), out, stdout)?;
    Ok(EXIT_OK)
}

fn cmd_simulate(path: &Path, x0: &str, t0: f64, samples: &str, out: Option<&Path>, stdout: &mut dyn Write) -> CmdResult {
    let chain = load_valid(path)?;
    let x0 = parse_list(x0, "--x0")?;
    if x0.len() != chain.n() {
        return Err(Error::DimensionMismatch { expected: chain.n(), found: x0.len() }.into());
    }
    let samples = parse_list(samples, "--samples")?;
    let traj = simulate(&chain, &DVector::from_vec(x0), t0, &samples)?;
    let mut buf = Vec::new();
    traj.write_csv(&mut buf)?;
    emit(&String::from_utf8(buf).expect("CSV is UTF-8"), out, stdout)?;
    Ok(EXIT_OK)
}

fn cmd_graph(path: &Path, kind: GraphArg, out: Option<&Path>, stdout: &mut dyn Write) -> CmdResult {
    let chain = load_valid(path)?;
    let g = match kind {
        GraphArg::H1 => unbounded_interactions_graph(&chain),
        GraphArg::H2 => infinite_flow_graph(&chain),
    };
    emit(&g.to_dot(), out, stdout)?;
    Ok(EXIT_OK)
}

fn cmd_polytope(
    path: &Path,
    tau: f64,
    horizons: Option<&str>,
    tol_vertex: f64,
    csv: Option<&Path>,
    out: Option<&Path>,
    stdout: &mut dyn Write,
) -> CmdResult {
    let chain = load_valid(path)?;
    let schedule = match horizons {
        Some(h) => parse_list(h, "--horizons")?,
        None => default_schedule(&chain, tau),
    };
    let trace = vertex_count_trace(&chain, tau, &schedule, tol_vertex)?;
    if let Some(p) = csv {
        let mut buf = Vec::new();
        trace.write_csv(&mut buf)?;
        write_atomic(p, &buf).map_err(|e| fail(EXIT_INVALID, format!("{}: {}", p.display(), e)))?;
    }
    emit(&to_string_pretty(&trace), out, stdout)?;
    Ok(EXIT_OK)
}

fn cmd_jets(path: &Path, cfg: &SoninConfig, out: Option<&Path>, stdout: &mut dyn Write, stderr: &mut dyn Write) -> CmdResult {
    let chain = load_valid(path)?;
    let d = sonin_decomposition(&chain, cfg)?;
    for w in &d.warnings {
        let _ = writeln!(stderr, "warning: {}", w);
    }
    emit(&to_string_pretty(&d), out, stdout)?;
    Ok(EXIT_OK)
}
