use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use eafe::exactsolve::AxisBoundary;
use eafe::fluctuation::{BcRule, EnsembleSpec, Geometry};
use eafe::harness::{self, default_experiment, Experiment, ExperimentConfig};
use eafe::{Error, Result};

/// Interface free-energy experiments on finite Edwards-Anderson boxes.
#[derive(Parser, Debug)]
#[command(name = "eafe", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// F for a single realization, by both routes
    Fe(Run<SeededEnsemble, FeArgs>),
    /// log Z_periodic − log Z_antiperiodic on the box
    DomainWall(Run<SeededEnsemble, DomainWallArgs>),
    /// variance of F over the disorder ensemble
    Ensemble(Run<SeededEnsemble, NoArgs>),
    /// block martingale decomposition of Var F
    Martingale(Run<SeededEnsemble, MartingaleArgs>),
    /// edge-by-edge martingale traces with increment bounds
    EdgeMartingale(Run<SeededEnsemble, OuterArgs>),
    /// Lindeberg-type diagnostics across window sizes
    Lindeberg(Run<SeededEnsemble, LindebergArgs>),
    /// boundary bound and ratio bound checks
    Bounds(Run<SeededEnsemble, BoundsArgs>),
    /// moment generating function against its bound
    Mgf(Run<SeededEnsemble, MgfArgs>),
    /// correlation differences between the two states
    Probe(Run<SeededEnsemble, ProbeArgs>),
    /// variance against window size with exponent fits
    Scaling(Run<SeededEnsemble, ScalingArgs>),
    /// variance identities on nested samples
    Identity(Run<SeededEnsemble, IdentityArgs>),
    /// translation and reweighting covariance on a torus
    Covariance(Run<NoEnsemble, CovarianceArgs>),
    /// enumeration against transfer matrix
    OracleVerify(Run<NoEnsemble, OracleArgs>),
    /// rebuild report.json and CSV tables from a run directory
    Report {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
struct Run<E: Args, K: Args> {
    /// TOML experiment config; flags override its fields
    #[arg(long)]
    config: Option<PathBuf>,
    /// output directory (default: runs/<id>)
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    id: Option<String>,
    /// worker threads (overrides EAFE_WORKERS)
    #[arg(long)]
    workers: Option<usize>,
    #[command(flatten)]
    ensemble: E,
    #[command(flatten)]
    kind: K,
}

#[derive(Args, Debug)]
struct SeededEnsemble {
    /// master seed; required, there is no clock seeding
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    beta: Option<f64>,
    /// window extents, e.g. 3x3
    #[arg(long, value_parser = parse_extents)]
    window: Option<Extents>,
    #[arg(long)]
    margin: Option<usize>,
    /// free | periodic | antiperiodic[:axis] | fixed-plus | fixed-minus | axes:free,periodic
    #[arg(long, value_parser = parse_rule)]
    gamma: Option<BcRule>,
    #[arg(long, value_parser = parse_rule)]
    gamma_prime: Option<BcRule>,
    #[arg(long)]
    resamples: Option<usize>,
}

#[derive(Args, Debug)]
struct NoEnsemble {
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct NoArgs {}

#[derive(Args, Debug)]
struct FeArgs {
    #[arg(long)]
    realization: Option<u64>,
}

#[derive(Args, Debug)]
struct DomainWallArgs {
    #[arg(long)]
    seam_axis: Option<usize>,
}

#[derive(Args, Debug)]
struct MartingaleArgs {
    #[arg(long)]
    block_side: Option<usize>,
    #[arg(long)]
    n_outer: Option<usize>,
}

#[derive(Args, Debug)]
struct OuterArgs {
    #[arg(long)]
    n_outer: Option<usize>,
}

#[derive(Args, Debug)]
struct LindebergArgs {
    /// semicolon-separated windows, e.g. 3x3;4x4
    #[arg(long, value_parser = parse_windows)]
    windows: Option<ExtentList>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    n_outer: Option<usize>,
    #[arg(long)]
    n_cond: Option<usize>,
}

#[derive(Args, Debug)]
struct BoundsArgs {
    #[arg(long, value_delimiter = ',')]
    betas: Option<Vec<f64>>,
    /// skip the ratio bound
    #[arg(long)]
    no_lemma: bool,
}

#[derive(Args, Debug)]
struct MgfArgs {
    #[arg(long, value_delimiter = ',')]
    ts: Option<Vec<f64>>,
    #[arg(long)]
    n_outer: Option<usize>,
}

#[derive(Args, Debug)]
struct ProbeArgs {
    #[arg(long, value_delimiter = ',')]
    epsilons: Option<Vec<f64>>,
}

#[derive(Args, Debug)]
struct ScalingArgs {
    #[arg(long, value_delimiter = ',')]
    sizes: Option<Vec<usize>>,
}

#[derive(Args, Debug)]
struct IdentityArgs {
    #[arg(long)]
    n_inner: Option<usize>,
}

#[derive(Args, Debug)]
struct CovarianceArgs {
    #[arg(long, value_parser = parse_extents)]
    torus: Option<Extents>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    samples: Option<usize>,
}

#[derive(Args, Debug)]
struct OracleArgs {
    #[arg(long)]
    instances: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    betas: Option<Vec<f64>>,
    /// semicolon-separated geometries, e.g. 3x3;4x3
    #[arg(long, value_parser = parse_windows)]
    geometries: Option<ExtentList>,
}

#[derive(Clone, Debug)]
struct Extents(Vec<usize>);

#[derive(Clone, Debug)]
struct ExtentList(Vec<Vec<usize>>);

fn extents(s: &str) -> std::result::Result<Vec<usize>, String> {
    s.split('x')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{s:?}: {e}")))
        .collect()
}

fn parse_extents(s: &str) -> std::result::Result<Extents, String> {
    extents(s).map(Extents)
}

fn parse_windows(s: &str) -> std::result::Result<ExtentList, String> {
    s.split(';').map(extents).collect::<std::result::Result<_, _>>().map(ExtentList)
}

fn parse_axis(s: &str) -> std::result::Result<AxisBoundary, String> {
    match s {
        "free" => Ok(AxisBoundary::Free),
        "periodic" => Ok(AxisBoundary::Periodic),
        "antiperiodic" => Ok(AxisBoundary::Antiperiodic { seam: None }),
        _ => Err(format!("unknown axis boundary {s:?}")),
    }
}

fn parse_rule(s: &str) -> std::result::Result<BcRule, String> {
    let (head, tail) = s.split_once(':').map_or((s, None), |(a, b)| (a, Some(b)));
    match (head, tail) {
        ("free", None) => Ok(BcRule::Free),
        ("periodic", None) => Ok(BcRule::Periodic),
        ("fixed-plus", None) => Ok(BcRule::FixedPlus),
        ("fixed-minus", None) => Ok(BcRule::FixedMinus),
        ("antiperiodic", None) => Ok(BcRule::Antiperiodic { axis: 0 }),
        ("antiperiodic", Some(a)) => a
            .parse()
            .map(|axis| BcRule::Antiperiodic { axis })
            .map_err(|e| format!("{s:?}: {e}")),
        ("axes", Some(list)) => list.split(',').map(parse_axis).collect::<std::result::Result<_, _>>().map(BcRule::Axes),
        _ => Err(format!("unknown boundary rule {s:?}")),
    }
}

fn base_config<E: Args, K: Args>(run: &Run<E, K>, kind: &str) -> Result<ExperimentConfig> {
    let mut c = match &run.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig {
            id: kind.to_string(),
            experiment: default_experiment(kind)?,
            ensemble: default_experiment(kind)?
                .needs_ensemble()
                .then(|| EnsembleSpec::free_vs_periodic(&[3, 3], 1.0, 200, 0)),
            ..ExperimentConfig::default()
        },
    };
    if c.experiment.kind() != kind {
        return Err(Error::Config(format!(
            "config describes a {} experiment, not {kind}",
            c.experiment.kind()
        )));
    }
    if let Some(id) = &run.id {
        c.id = id.clone();
    }
    if let Some(o) = &run.out {
        c.output = Some(o.clone());
    }
    Ok(c)
}

fn apply_ensemble(c: &mut ExperimentConfig, a: &SeededEnsemble) {
    let e = c.ensemble.as_mut().expect("ensemble kinds carry an ensemble");
    e.seed = a.seed;
    if let Some(n) = a.n {
        e.n = n;
    }
    if let Some(b) = a.beta {
        e.beta = b;
    }
    if let Some(w) = &a.window {
        let m = a.margin.unwrap_or_else(|| e.geometry.margin.first().copied().unwrap_or(1));
        e.geometry = Geometry::centered(&w.0, m);
    } else if let Some(m) = a.margin {
        e.geometry.margin = vec![m; e.geometry.window.len()];
    }
    if let Some(g) = &a.gamma {
        e.gamma = g.clone();
    }
    if let Some(g) = &a.gamma_prime {
        e.gamma_prime = g.clone();
    }
    if let Some(r) = a.resamples {
        e.bootstrap.resamples = r;
    }
}

fn apply_kind(c: &mut ExperimentConfig, cmd: &Command) {
    macro_rules! set {
        ($field:expr, $value:expr) => {
            if let Some(v) = $value.clone() {
                *$field = v;
            }
        };
    }
    match (&mut c.experiment, cmd) {
        (Experiment::Fe { realization }, Command::Fe(r)) => set!(realization, r.kind.realization),
        (Experiment::DomainWall { seam_axis }, Command::DomainWall(r)) => set!(seam_axis, r.kind.seam_axis),
        (Experiment::Martingale { block_side, n_outer }, Command::Martingale(r)) => {
            set!(block_side, r.kind.block_side);
            set!(n_outer, r.kind.n_outer);
        }
        (Experiment::EdgeMartingale { n_outer }, Command::EdgeMartingale(r)) => set!(n_outer, r.kind.n_outer),
        (
            Experiment::Lindeberg {
                windows,
                delta,
                n_outer,
                n_cond,
            },
            Command::Lindeberg(r),
        ) => {
            set!(windows, r.kind.windows.as_ref().map(|w| w.0.clone()));
            set!(delta, r.kind.delta);
            set!(n_outer, r.kind.n_outer);
            set!(n_cond, r.kind.n_cond);
        }
        (Experiment::Bounds { betas, lemma }, Command::Bounds(r)) => {
            set!(betas, r.kind.betas);
            if r.kind.no_lemma {
                *lemma = false;
            }
        }
        (Experiment::Mgf { ts, n_outer }, Command::Mgf(r)) => {
            set!(ts, r.kind.ts);
            set!(n_outer, r.kind.n_outer);
        }
        (Experiment::Probe { epsilons }, Command::Probe(r)) => set!(epsilons, r.kind.epsilons),
        (Experiment::Scaling { sizes }, Command::Scaling(r)) => set!(sizes, r.kind.sizes),
        (Experiment::Identity { n_inner, .. }, Command::Identity(r)) => set!(n_inner, r.kind.n_inner),
        (Experiment::Covariance(s), Command::Covariance(r)) => {
            set!(&mut s.torus, r.kind.torus.as_ref().map(|t| t.0.clone()));
            set!(&mut s.beta, r.kind.beta);
            set!(&mut s.samples, r.kind.samples);
            set!(&mut s.seed, r.ensemble.seed);
        }
        (Experiment::OracleVerify(o), Command::OracleVerify(r)) => {
            set!(&mut o.instances, r.kind.instances);
            set!(&mut o.betas, r.kind.betas);
            set!(&mut o.geometries, r.kind.geometries.as_ref().map(|g| g.0.clone()));
            set!(&mut o.seed, r.ensemble.seed);
        }
        _ => {}
    }
}

fn execute(c: ExperimentConfig, workers: Option<usize>) -> Result<bool> {
    c.validate()?;
    let out = harness::output_dir(&c);
    let rep = harness::run(&c, &out, workers)?;
    println!("{}", rep.to_json()?.trim_end());
    eprintln!("wrote {}", out.display());
    Ok(passed(&rep.report))
}

/// False when a report carries an explicit failing verdict.
fn passed(report: &eafe::harness::Value) -> bool {
    if report.get("pass").and_then(|v| v.as_bool()) == Some(false) {
        return false;
    }
    if let Some(v) = report.get("violations").and_then(|v| v.as_u64()) {
        return v == 0;
    }
    true
}

fn dispatch(cli: Cli) -> Result<bool> {
    macro_rules! seeded {
        ($r:expr, $kind:expr, $cmd:expr) => {{
            let mut c = base_config($r, $kind)?;
            apply_ensemble(&mut c, &$r.ensemble);
            apply_kind(&mut c, $cmd);
            execute(c, $r.workers)
        }};
    }
    macro_rules! unseeded {
        ($r:expr, $kind:expr, $cmd:expr) => {{
            let mut c = base_config($r, $kind)?;
            apply_kind(&mut c, $cmd);
            execute(c, $r.workers)
        }};
    }
    let cmd = &cli.command;
    match cmd {
        Command::Fe(r) => seeded!(r, "fe", cmd),
        Command::DomainWall(r) => seeded!(r, "domain-wall", cmd),
        Command::Ensemble(r) => seeded!(r, "ensemble", cmd),
        Command::Martingale(r) => seeded!(r, "martingale", cmd),
        Command::EdgeMartingale(r) => seeded!(r, "edge-martingale", cmd),
        Command::Lindeberg(r) => seeded!(r, "lindeberg", cmd),
        Command::Bounds(r) => seeded!(r, "bounds", cmd),
        Command::Mgf(r) => seeded!(r, "mgf", cmd),
        Command::Probe(r) => seeded!(r, "probe", cmd),
        Command::Scaling(r) => seeded!(r, "scaling", cmd),
        Command::Identity(r) => seeded!(r, "identity", cmd),
        Command::Covariance(r) => unseeded!(r, "covariance", cmd),
        Command::OracleVerify(r) => unseeded!(r, "oracle-verify", cmd),
        Command::Report { out } => {
            let rep = harness::report_dir(out)?;
            println!("{}", rep.to_json()?.trim_end());
            Ok(passed(&rep.report))
        }
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("check failed");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
