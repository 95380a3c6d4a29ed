//! The `wml` command line: instance generation, invariant checks, sweeps,
//! fits and reports.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 a checked
//! invariant failed.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiments::{
    self, acceptance_power_config, exponent_fit, fit_points_in, matrix_exponent, records_from_csv, records_to_csv,
    scalar_exponent, theorem_sweep, Family, SweepConfig, ACCEPTANCE_AP_RANGE, ACCEPTANCE_MIN_POINTS,
    ACCEPTANCE_SLOPE,
};
use crate::filtration::{FilteredSpace, LeafFunction, TreeSpec};
use crate::operators::SquareConvention;
use crate::principal::{default_cgamma, k_domination};
use crate::random::{random_function, random_tree, random_weight};
use crate::suite::{check_instance, run_suite, Instance, InstanceOutcome, SuiteConfig, CHECK_NAMES};
use crate::weights::MatrixWeight;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_INVARIANT: i32 = 2;

/// Environment variable consulted for the seed when neither the flag nor the
/// config file sets one.
pub const SEED_ENV: &str = "WML_SEED";

#[derive(Debug, Parser)]
#[command(name = "wml", version, about = "Matrix-weighted martingale square functions on finite filtrations")]
pub struct Cli {
    /// TOML configuration file; flags override its values.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub p: Option<f64>,
    #[arg(long, global = true)]
    pub d: Option<usize>,
    #[arg(long, global = true)]
    pub depth: Option<usize>,
    /// Stopping threshold for principal sets.
    #[arg(long, global = true)]
    pub cgamma: Option<f64>,
    /// Output directory (created if missing).
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true, value_name = "N")]
    pub parallel: Option<usize>,
    /// Also assert the exponent windows of the p = 2 power-family probe.
    #[arg(long, global = true)]
    pub acceptance: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GenKind {
    /// Uniform dyadic tree with a random weight and function.
    Dyadic,
    /// Random refining tree with a random weight and function.
    Random,
    /// Scalar power weight `(x + ε)^α`.
    Power,
    /// Rotating matrix weight.
    Rotating,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a tree, a weight and a function.
    Gen {
        #[arg(long, value_enum)]
        kind: Option<GenKind>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        eps: Option<f64>,
        #[arg(long)]
        max_leaves: Option<usize>,
    },
    /// Run the invariant checks on one instance or on a random suite.
    Check {
        /// Tree JSON; with --weight and --function checks that instance only.
        #[arg(long, value_name = "PATH")]
        space: Option<PathBuf>,
        #[arg(long, value_name = "PATH")]
        weight: Option<PathBuf>,
        #[arg(long, value_name = "PATH")]
        function: Option<PathBuf>,
        #[arg(long)]
        instances: Option<usize>,
        #[arg(long)]
        tol: Option<f64>,
        /// Include the mean in the square function.
        #[arg(long)]
        fold_mean: bool,
    },
    /// Run a parameter sweep and fit the log-log slope.
    Sweep {
        #[arg(long, value_enum)]
        family: Option<FamilyArg>,
        #[arg(long, value_delimiter = ',')]
        alphas: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        eps: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        depths: Option<Vec<usize>>,
        #[arg(long)]
        restarts: Option<usize>,
    },
    /// Fit log(ratio) on log(characteristic) from a CSV.
    Fit { input: PathBuf },
    /// Summarize a sweep CSV as text plus plot-ready CSV.
    Report { input: PathBuf },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FamilyArg {
    Power,
    Rotating,
}

/// Keys of the TOML configuration file.
#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub p: Option<f64>,
    pub d: Option<usize>,
    pub depth: Option<usize>,
    pub cgamma: Option<f64>,
    pub out: Option<PathBuf>,
    pub parallel: Option<usize>,
    pub tol: Option<f64>,
    pub gen: GenSection,
    pub check: CheckSection,
    pub sweep: Option<SweepConfig>,
}

#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenSection {
    pub kind: Option<GenKind>,
    pub alpha: Option<f64>,
    pub eps: Option<f64>,
    pub max_leaves: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CheckSection {
    pub space: Option<PathBuf>,
    pub weight: Option<PathBuf>,
    pub function: Option<PathBuf>,
    pub instances: Option<usize>,
    pub depth_min: Option<usize>,
    pub depth_max: Option<usize>,
    pub dims: Option<Vec<usize>>,
    pub ps: Option<Vec<f64>>,
    pub max_leaves: Option<usize>,
    pub holdout: Option<usize>,
    pub convention: Option<SquareConvention>,
}

impl FileConfig {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

/// Flags merged over the file over the environment over defaults.
struct Resolved {
    seed: u64,
    p: Option<f64>,
    d: Option<usize>,
    depth: Option<usize>,
    cgamma: f64,
    /// Whether `cgamma` came from a flag or the top level of the file.
    cgamma_set: bool,
    out: PathBuf,
    tol: Option<f64>,
    acceptance: bool,
    file: FileConfig,
}

fn resolve(cli: &Cli) -> Result<Resolved> {
    let file = match &cli.config {
        Some(path) => FileConfig::read(path)?,
        None => FileConfig::default(),
    };
    let env_seed = match std::env::var(SEED_ENV) {
        Ok(v) => Some(v.trim().parse::<u64>().map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an integer")))?),
        Err(_) => None,
    };
    let seed = cli.seed.or(file.seed).or(env_seed).unwrap_or(0);
    let p = cli.p.or(file.p);
    if let Some(p) = p {
        if !(p > 1.0 && p.is_finite()) {
            return Err(Error::Config(format!("p = {p} must lie in (1, ∞)")));
        }
    }
    let cgamma = cli.cgamma.or(file.cgamma).unwrap_or_else(default_cgamma);
    if !(cgamma >= 0.0 && cgamma.is_finite()) {
        return Err(Error::Config(format!("C_γ = {cgamma} must be a nonnegative number")));
    }
    Ok(Resolved {
        seed,
        p,
        d: cli.d.or(file.d),
        depth: cli.depth.or(file.depth),
        cgamma,
        cgamma_set: cli.cgamma.or(file.cgamma).is_some(),
        out: cli.out.clone().or_else(|| file.out.clone()).unwrap_or_else(|| PathBuf::from(".")),
        tol: file.tol,
        acceptance: cli.acceptance,
        file,
    })
}

/// Parses `args` (including the program name) and runs the command,
/// writing human output to `stdout`. Returns the exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn std::io::Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let threads = cli.parallel.or_else(|| cli.config.as_ref().and_then(|p| FileConfig::read(p).ok()?.parallel));
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(threads.unwrap_or(0)).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start worker threads: {e}");
            return EXIT_USAGE;
        }
    };
    let mut buf: Vec<u8> = Vec::new();
    let res = pool.install(|| dispatch(&cli, &mut buf));
    let _ = stdout.write_all(&buf);
    match res {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_USAGE
        }
    }
}

fn dispatch(cli: &Cli, out: &mut dyn std::io::Write) -> Result<i32> {
    let cfg = resolve(cli)?;
    match &cli.command {
        Command::Gen { kind, alpha, eps, max_leaves } => cmd_gen(&cfg, *kind, *alpha, *eps, *max_leaves, out),
        Command::Check { space, weight, function, instances, tol, fold_mean } => {
            let args = CheckArgs {
                space: space.clone().or_else(|| cfg.file.check.space.clone()),
                weight: weight.clone().or_else(|| cfg.file.check.weight.clone()),
                function: function.clone().or_else(|| cfg.file.check.function.clone()),
                instances: *instances,
                tol: *tol,
                fold_mean: *fold_mean,
            };
            cmd_check(&cfg, &args, out)
        }
        Command::Sweep { family, alphas, eps, depths, restarts } => {
            let mut sc = sweep_config(&cfg);
            if let Some(f) = family {
                sc.family = match f {
                    FamilyArg::Power => Family::Power,
                    FamilyArg::Rotating => Family::Rotating,
                };
            }
            if let Some(v) = alphas {
                sc.alphas = v.clone();
            }
            if let Some(v) = eps {
                sc.eps = v.clone();
            }
            if let Some(v) = depths {
                sc.depths = v.clone();
            }
            if let Some(r) = restarts {
                sc.restarts = *r;
            }
            cmd_sweep(&cfg, &sc, out)
        }
        Command::Fit { input } => cmd_fit(&cfg, input, out),
        Command::Report { input } => cmd_report(&cfg, input, out),
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Config(format!("cannot create {}: {e}", dir.display())))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn cmd_gen(
    cfg: &Resolved,
    kind: Option<GenKind>,
    alpha: Option<f64>,
    eps: Option<f64>,
    max_leaves: Option<usize>,
    out: &mut dyn std::io::Write,
) -> Result<i32> {
    let g = &cfg.file.gen;
    let kind = kind.or(g.kind).unwrap_or(GenKind::Dyadic);
    let depth = cfg.depth.unwrap_or(4);
    let d = cfg.d.unwrap_or(1);
    let alpha = alpha.or(g.alpha).unwrap_or(1.0);
    let eps = eps.or(g.eps).unwrap_or(0.1);
    let max_leaves = max_leaves.or(g.max_leaves).unwrap_or(64);
    if depth == 0 {
        return Err(Error::Config("depth must be at least 1".into()));
    }
    if d == 0 || d > crate::linalg::MAX_DIM {
        return Err(Error::Config(format!("d = {d} outside 1..={}", crate::linalg::MAX_DIM)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (space, weight) = match kind {
        GenKind::Dyadic => {
            let s = FilteredSpace::dyadic(depth, None)?;
            let w = random_weight(&mut rng, d, s.num_leaves());
            (s, w)
        }
        GenKind::Random => {
            if max_leaves < 2 {
                return Err(Error::Config("max_leaves must be at least 2".into()));
            }
            let s = FilteredSpace::from_tree(&random_tree(&mut rng, depth, max_leaves))?;
            let w = random_weight(&mut rng, d, s.num_leaves());
            (s, w)
        }
        GenKind::Power => experiments::gen_power_weight(depth, alpha, eps)?,
        GenKind::Rotating => experiments::gen_rotating_matrix_weight(depth, d.max(2), alpha, eps)?,
    };
    let function = random_function(&mut rng, &space, weight.dim());
    ensure_dir(&cfg.out)?;
    let tree = serde_json::to_string_pretty(&space.to_tree_spec())? + "\n";
    std::fs::write(cfg.out.join("tree.json"), tree)?;
    weight.write_csv(cfg.out.join("weight.csv"))?;
    function.write_csv(cfg.out.join("function.csv"))?;
    let manifest = serde_json::json!({
        "seed": cfg.seed,
        "kind": kind,
        "depth": depth,
        "d": weight.dim(),
        "leaves": space.num_leaves(),
        "alpha": matches!(kind, GenKind::Power | GenKind::Rotating).then_some(alpha),
        "eps": matches!(kind, GenKind::Power | GenKind::Rotating).then_some(eps),
        "files": ["tree.json", "weight.csv", "function.csv"],
    });
    write_json(&cfg.out.join("gen.json"), &manifest)?;
    writeln!(out, "wrote {} leaves (depth {depth}, d = {}) to {}", space.num_leaves(), weight.dim(), cfg.out.display())?;
    Ok(EXIT_OK)
}

struct CheckArgs {
    space: Option<PathBuf>,
    weight: Option<PathBuf>,
    function: Option<PathBuf>,
    instances: Option<usize>,
    tol: Option<f64>,
    fold_mean: bool,
}

fn suite_config(cfg: &Resolved, args: &CheckArgs) -> SuiteConfig {
    let c = &cfg.file.check;
    let mut s = SuiteConfig { seed: cfg.seed, cgamma: cfg.cgamma, ..SuiteConfig::default() };
    if let Some(v) = args.instances.or(c.instances) {
        s.instances = v;
    }
    if let Some(v) = c.depth_min {
        s.depth_min = v;
    }
    if let Some(v) = c.depth_max {
        s.depth_max = v;
    }
    if let Some(v) = cfg.depth {
        s.depth_min = v;
        s.depth_max = v;
    }
    if let Some(v) = &c.dims {
        s.dims = v.clone();
    }
    if let Some(v) = cfg.d {
        s.dims = vec![v];
    }
    if let Some(v) = &c.ps {
        s.ps = v.clone();
    }
    if let Some(v) = cfg.p {
        s.ps = vec![v];
    }
    if let Some(v) = c.max_leaves {
        s.max_leaves = v;
    }
    if let Some(v) = c.holdout {
        s.holdout = v;
    }
    if let Some(v) = args.tol.or(cfg.tol) {
        s.tol = v;
    }
    s.convention = if args.fold_mean { SquareConvention::FoldMean } else { c.convention.unwrap_or_default() };
    s
}

/// Pass counts and extremes of one named check across instances.
#[derive(Debug, Serialize)]
struct CheckSummary {
    name: &'static str,
    pass: bool,
    failures: usize,
    max_measured: f64,
    bound: f64,
}

#[derive(Debug, Serialize)]
struct CheckReport {
    seed: u64,
    cgamma: f64,
    tol: f64,
    instances: usize,
    pass: bool,
    checks: Vec<CheckSummary>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    failures: Vec<FailureNote>,
    #[serde(skip_serializing_if = "Option::is_none")]
    acceptance: Option<AcceptanceProbe>,
}

#[derive(Debug, Serialize)]
struct FailureNote {
    instance: usize,
    check: &'static str,
    measured: f64,
    bound: f64,
}

#[derive(Debug, Serialize)]
struct AcceptanceProbe {
    slope: Option<f64>,
    window: (f64, f64),
    points: usize,
    min_points: usize,
    pass: bool,
}

fn summarize(outcomes: &[InstanceOutcome]) -> (Vec<CheckSummary>, Vec<FailureNote>) {
    let mut sums: Vec<CheckSummary> = CHECK_NAMES
        .iter()
        .map(|&name| CheckSummary { name, pass: true, failures: 0, max_measured: 0.0, bound: 0.0 })
        .collect();
    let mut notes = Vec::new();
    for o in outcomes {
        for (s, c) in sums.iter_mut().zip(&o.checks) {
            debug_assert_eq!(s.name, c.name);
            s.max_measured = s.max_measured.max(c.measured) + 0.0;
            s.bound = s.bound.max(c.bound);
            if !c.pass {
                s.pass = false;
                s.failures += 1;
                if notes.len() < 50 {
                    notes.push(FailureNote { instance: o.id, check: c.name, measured: c.measured, bound: c.bound });
                }
            }
        }
    }
    (sums, notes)
}

/// Runs the `p = 2` power-family probe and checks its slope window.
pub fn acceptance_probe(seed: u64) -> Result<(Option<f64>, usize, bool)> {
    let sweep = theorem_sweep(&acceptance_power_config(seed))?;
    let pts = fit_points_in(&sweep.records, ACCEPTANCE_AP_RANGE.0, ACCEPTANCE_AP_RANGE.1);
    let slope = exponent_fit(&pts).ok().map(|f| f.slope);
    let pass = pts.len() >= ACCEPTANCE_MIN_POINTS
        && slope.is_some_and(|s| s >= ACCEPTANCE_SLOPE.0 && s <= ACCEPTANCE_SLOPE.1);
    Ok((slope, pts.len(), pass))
}

fn read_instance(cfg: &Resolved, args: &CheckArgs) -> Result<Option<Instance>> {
    let (space, weight, function) = match (&args.space, &args.weight, &args.function) {
        (None, None, None) => return Ok(None),
        (Some(s), Some(w), f) => (s, w, f),
        _ => return Err(Error::Config("a single-instance check needs --space and --weight".into())),
    };
    for path in [Some(space), Some(weight), function.as_ref()].into_iter().flatten() {
        if !path.exists() {
            return Err(Error::Config(format!("{} does not exist", path.display())));
        }
    }
    let space = FilteredSpace::from_tree(&TreeSpec::read_json(space)?)?;
    let weight = MatrixWeight::read_csv(weight)?;
    weight.check_space(&space)?;
    let function = match function {
        Some(f) => LeafFunction::read_csv(f)?,
        None => random_function(&mut ChaCha8Rng::seed_from_u64(cfg.seed), &space, weight.dim()),
    };
    if function.dim() != weight.dim() {
        return Err(Error::Config("function and weight dimensions differ".into()));
    }
    space.check_function(&function)?;
    Ok(Some(Instance { id: 0, p: cfg.p.unwrap_or(2.0), space, weight, function }))
}

fn cmd_check(cfg: &Resolved, args: &CheckArgs, out: &mut dyn std::io::Write) -> Result<i32> {
    let suite = suite_config(cfg, args);
    suite.validate()?;
    let outcomes = match read_instance(cfg, args)? {
        Some(inst) => vec![check_instance(&suite, &inst)?],
        None => run_suite(&suite)?,
    };
    let (checks, failures) = summarize(&outcomes);
    let acceptance = if cfg.acceptance {
        let (slope, points, pass) = acceptance_probe(cfg.seed)?;
        Some(AcceptanceProbe { slope, window: ACCEPTANCE_SLOPE, points, min_points: ACCEPTANCE_MIN_POINTS, pass })
    } else {
        None
    };
    let pass = checks.iter().all(|c| c.pass) && acceptance.as_ref().map_or(true, |a| a.pass);
    let report = CheckReport {
        seed: cfg.seed,
        cgamma: suite.cgamma,
        tol: suite.tol,
        instances: outcomes.len(),
        pass,
        checks,
        failures,
        acceptance,
    };
    for c in &report.checks {
        writeln!(
            out,
            "{:<34} {}  max measured {:.6e}  bound {:.6e}  failures {}",
            c.name,
            if c.pass { "pass" } else { "FAIL" },
            c.max_measured,
            c.bound,
            c.failures
        )?;
    }
    if let Some(a) = &report.acceptance {
        writeln!(
            out,
            "{:<34} {}  slope {}  window [{}, {}]  points {}",
            "acceptance.p2_slope_window",
            if a.pass { "pass" } else { "FAIL" },
            a.slope.map_or("none".into(), |s| format!("{s:.4}")),
            a.window.0,
            a.window.1,
            a.points
        )?;
    }
    ensure_dir(&cfg.out)?;
    write_json(&cfg.out.join("check.json"), &report)?;
    Ok(if pass { EXIT_OK } else { EXIT_INVARIANT })
}

fn sweep_config(cfg: &Resolved) -> SweepConfig {
    let mut s = cfg.file.sweep.clone().unwrap_or_default();
    if cfg.cgamma_set {
        s.cgamma = cfg.cgamma;
    }
    s.seed = cfg.seed;
    if let Some(p) = cfg.p {
        s.p = p;
    }
    if let Some(d) = cfg.d {
        s.d = d;
    }
    if let Some(depth) = cfg.depth {
        s.depths = vec![depth];
    }
    if let Some(t) = cfg.tol {
        s.tol = t;
    }
    s
}

/// Fit summary file contents.
#[derive(Debug, Serialize, Deserialize)]
struct FitFile {
    slope: f64,
    intercept: f64,
    stderr: f64,
    n: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    p: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    target_exponent: Option<f64>,
}

fn cmd_sweep(cfg: &Resolved, sc: &SweepConfig, out: &mut dyn std::io::Write) -> Result<i32> {
    sc.validate()?;
    let res = theorem_sweep(sc)?;
    ensure_dir(&cfg.out)?;
    std::fs::write(cfg.out.join("sweep.csv"), records_to_csv(&res.records))?;
    write_json(&cfg.out.join("fit.json"), &res.summary)?;
    writeln!(
        out,
        "{} points ({} failed), slope {} (target exponent {:.4}), wrote {}",
        res.records.len(),
        res.summary.failures,
        res.summary.slope.map_or("none".into(), |s| format!("{s:.4}")),
        res.summary.target_exponent,
        cfg.out.join("sweep.csv").display()
    )?;
    Ok(EXIT_OK)
}

/// Sweep records, or bare `(ap_char, ratio)` rows with an optional header.
fn read_points(path: &Path) -> Result<(Vec<(f64, f64)>, Option<Vec<experiments::SweepRecord>>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    if text.starts_with("id,family,") {
        let recs = records_from_csv(&text)?;
        return Ok((experiments::fit_points(&recs), Some(recs)));
    }
    let mut pts = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.iter().all(|c| c.is_empty()) {
            continue;
        }
        let parsed: Option<Vec<f64>> = cells.iter().map(|c| c.parse().ok()).collect();
        match parsed {
            Some(v) if v.len() == 2 => pts.push((v[0], v[1])),
            None if i == 0 => continue,
            _ => return Err(Error::Config(format!("{}:{}: expected two numbers", path.display(), i + 1))),
        }
    }
    Ok((pts, None))
}

fn cmd_fit(cfg: &Resolved, input: &Path, out: &mut dyn std::io::Write) -> Result<i32> {
    let (pts, recs) = read_points(input)?;
    let fit = exponent_fit(&pts)?;
    let first = recs.as_ref().and_then(|r| r.first());
    let file = FitFile {
        slope: fit.slope,
        intercept: fit.intercept,
        stderr: fit.stderr,
        n: fit.n,
        seed: first.map(|r| r.seed),
        p: first.map(|r| r.p),
        target_exponent: first.map(|r| target_for(r.family, r.p)),
    };
    writeln!(out, "{}", serde_json::to_string_pretty(&file)?)?;
    if cfg.out != Path::new(".") || cfg.file.out.is_some() {
        ensure_dir(&cfg.out)?;
        write_json(&cfg.out.join("fit.json"), &file)?;
    }
    Ok(EXIT_OK)
}

fn target_for(family: Family, p: f64) -> f64 {
    match family {
        Family::Power => scalar_exponent(p),
        Family::Rotating => matrix_exponent(p),
    }
}

fn cmd_report(cfg: &Resolved, input: &Path, out: &mut dyn std::io::Write) -> Result<i32> {
    let (pts, recs) = read_points(input)?;
    let recs = recs.ok_or_else(|| Error::Config(format!("{} is not a sweep CSV", input.display())))?;
    let first = recs.first().ok_or_else(|| Error::Config("sweep CSV has no rows".into()))?;
    let (p, family, seed) = (first.p, first.family, first.seed);
    let fit = exponent_fit(&pts);
    let kdom = k_domination(cfg.cgamma);
    let max_dom = recs.iter().filter_map(|r| r.witness_domination).fold(0.0, f64::max);
    let max_witness_err = recs
        .iter()
        .filter_map(|r| Some(((r.ratio? - r.witness_ratio?) / r.ratio?).abs()))
        .fold(0.0, f64::max);

    let mut text = String::new();
    let _ = writeln!(text, "sweep report: {} ({} points, seed {seed})", input.display(), recs.len());
    let _ = writeln!(text, "family: {}, p = {p}, d = {}", if family == Family::Power { "power" } else { "rotating" }, first.d);
    let _ = writeln!(text, "scalar target exponent max{{1/2, 1/(p-1)}} = {:.4}", scalar_exponent(p));
    let _ = writeln!(text, "matrix target exponent max{{1/2 + 1/(p(p-1)), 1/(p-1)}} = {:.4}", matrix_exponent(p));
    let target = target_for(family, p);
    match &fit {
        Ok(f) => {
            let _ = writeln!(
                text,
                "fitted slope {:.4} ± {:.4} over {} points; upper consistency slope <= target + 0.1 = {:.4}: {}",
                f.slope,
                f.stderr,
                f.n,
                target + 0.1,
                if f.slope <= target + 0.1 { "pass" } else { "FAIL" }
            );
        }
        Err(e) => {
            let _ = writeln!(text, "no fit: {e}");
        }
    }
    let _ = writeln!(
        text,
        "witness domination: max S_W f / T_W,2 f = {max_dom:.4}, bound K_dom = {kdom:.4}: {}",
        if max_dom <= kdom { "pass" } else { "FAIL" }
    );
    let _ = writeln!(
        text,
        "witness reproduction: max relative error {max_witness_err:.3e}, bound 1e-8: {}",
        if max_witness_err <= 1e-8 { "pass" } else { "FAIL" }
    );
    let ap: Vec<f64> = recs.iter().filter_map(|r| r.ap_char).collect();
    if !ap.is_empty() {
        let lo = ap.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = ap.iter().copied().fold(0.0, f64::max);
        let _ = writeln!(text, "characteristic range [{lo:.4}, {hi:.4}]");
    }
    let failures = recs.iter().filter(|r| !r.ok()).count();
    let _ = writeln!(text, "failed points: {failures}");

    let mut plot = String::from("log_ap_char,log_ratio\n");
    for (a, r) in &pts {
        let _ = writeln!(plot, "{:.12e},{:.12e}", a.ln(), r.ln());
    }
    ensure_dir(&cfg.out)?;
    std::fs::write(cfg.out.join("report.txt"), &text)?;
    std::fs::write(cfg.out.join("plot.csv"), plot)?;
    out.write_all(text.as_bytes())?;
    Ok(EXIT_OK)
}

/// Convenience for callers that only need the exit code.
pub fn run_quiet<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    run(args, &mut std::io::sink())
}
