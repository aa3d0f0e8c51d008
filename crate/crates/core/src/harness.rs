//! Config-driven experiment runs with append-only JSON-lines records,
//! resumable execution and canonical-order reports.
//!
//! An output directory holds `config.json` (the resolved config),
//! `records.jsonl` (one record per unit of work), `report.json` and CSV
//! summaries. Reports are always rebuilt from the parsed records, so a
//! fresh run, a resumed run and a `report` call produce the same bytes.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
pub use serde_json::Value;

use crate::disorder::{sample_couplings, CouplingDistribution, Purpose, SeedSpec};
use crate::error::{Error, Result};
use crate::exactsolve::{GibbsSpec, Solver, SolverCaps};
use crate::fluctuation::*;
use crate::interface::{domain_wall_free_energy, interface_free_energy_direct, FreeEnergyResult};
use crate::lattice::{incident_edges, Region};

pub const SCHEMA_VERSION: u32 = 1;
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
/// Environment variable overriding the worker count.
pub const WORKERS_ENV: &str = "EAFE_WORKERS";

/// Attached to every report built on a state pair.
pub const PROXY_NOTE: &str = "Gamma and Gamma' are finite-volume Gibbs states fixed by boundary conditions on the \
     enclosing box. They stand in for metastate draws; nothing here shows the stand-in is faithful.";

/// Full description of one experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    /// record per-unit wall time (breaks byte-identical records)
    #[serde(default)]
    pub timing: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ensemble: Option<EnsembleSpec>,
    pub experiment: Experiment,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Experiment {
    /// F_Λ for one realization, by both routes.
    Fe {
        #[serde(default)]
        realization: u64,
    },
    /// log Z_periodic − log Z_antiperiodic on the ensemble box.
    DomainWall {
        #[serde(default)]
        seam_axis: usize,
    },
    Ensemble,
    Martingale {
        block_side: usize,
        n_outer: usize,
    },
    EdgeMartingale {
        n_outer: usize,
    },
    Lindeberg {
        windows: Vec<Vec<usize>>,
        delta: f64,
        n_outer: usize,
        n_cond: usize,
    },
    Bounds {
        betas: Vec<f64>,
        #[serde(default = "yes")]
        lemma: bool,
    },
    Mgf {
        ts: Vec<f64>,
        n_outer: usize,
    },
    Probe {
        #[serde(default = "default_eps")]
        epsilons: Vec<f64>,
    },
    Scaling {
        sizes: Vec<usize>,
    },
    /// total-variance and symmetric-variance identities for F_Λ with the
    /// couplings of `block` as the conditioning variable
    Identity {
        block: Region,
        n_inner: usize,
    },
    Covariance(CovarianceSpec),
    OracleVerify(OracleSpec),
}

fn yes() -> bool {
    true
}

fn default_eps() -> Vec<f64> {
    EPSILON_GRID.to_vec()
}

impl Experiment {
    pub fn kind(&self) -> &'static str {
        match self {
            Experiment::Fe { .. } => "fe",
            Experiment::DomainWall { .. } => "domain-wall",
            Experiment::Ensemble => "ensemble",
            Experiment::Martingale { .. } => "martingale",
            Experiment::EdgeMartingale { .. } => "edge-martingale",
            Experiment::Lindeberg { .. } => "lindeberg",
            Experiment::Bounds { .. } => "bounds",
            Experiment::Mgf { .. } => "mgf",
            Experiment::Probe { .. } => "probe",
            Experiment::Scaling { .. } => "scaling",
            Experiment::Identity { .. } => "identity",
            Experiment::Covariance(_) => "covariance",
            Experiment::OracleVerify(_) => "oracle-verify",
        }
    }

    /// Kinds that sample a disorder ensemble.
    pub fn needs_ensemble(&self) -> bool {
        !matches!(self, Experiment::Covariance(_) | Experiment::OracleVerify(_))
    }
}

/// Enumeration against transfer matrix on random instances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleSpec {
    pub geometries: Vec<Vec<usize>>,
    pub betas: Vec<f64>,
    pub bcs: Vec<BcRule>,
    pub instances: usize,
    pub seed: u64,
    #[serde(default)]
    pub distribution: CouplingDistribution,
    #[serde(default)]
    pub caps: SolverCaps,
}

pub const ORACLE_LOGZ_TOL: f64 = 1e-9;
pub const ORACLE_CORR_TOL: f64 = 1e-10;

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Check every parameter against the preconditions of the operation the
    /// experiment calls.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.id.is_empty() {
            return Err(Error::Config("id must not be empty".into()));
        }
        let ens = match (&self.ensemble, self.experiment.needs_ensemble()) {
            (Some(e), true) => Some(Ensemble::new(e.clone())?),
            (None, true) => {
                return Err(Error::Config(format!("{} needs an [ensemble] table", self.experiment.kind())))
            }
            (_, false) => None,
        };
        let n = ens.as_ref().map_or(0, |e| e.spec.n);
        let check = |ok: bool, msg: &str| if ok { Ok(()) } else { Err(Error::Config(msg.into())) };
        match &self.experiment {
            Experiment::Fe { .. } | Experiment::DomainWall { .. } => check(n >= 1, "n must be >= 1"),
            Experiment::Ensemble => check(n >= 1, "n must be >= 1"),
            Experiment::Martingale { block_side, n_outer } => {
                check(*n_outer >= 2, "n_outer must be >= 2")?;
                blocks_for(ens.as_ref().unwrap(), *block_side).map(|_| ())
            }
            Experiment::EdgeMartingale { n_outer } | Experiment::Mgf { n_outer, .. } => {
                check(*n_outer >= 2, "n_outer must be >= 2")
            }
            Experiment::Lindeberg {
                windows,
                delta,
                n_outer,
                n_cond,
            } => {
                check(windows.len() >= 2, "lindeberg needs at least two windows")?;
                check(*delta > 0.0, "delta must be positive")?;
                check(*n_outer >= 2 && *n_cond >= 1, "n_outer must be >= 2 and n_cond >= 1")
            }
            Experiment::Bounds { betas, .. } => check(
                !betas.is_empty() && betas.iter().all(|b| b.is_finite() && *b >= 0.0),
                "betas must be finite and >= 0",
            ),
            Experiment::Probe { epsilons } => check(
                !epsilons.is_empty() && epsilons.iter().all(|e| *e > 0.0),
                "epsilons must be positive",
            ),
            Experiment::Scaling { sizes } => {
                check(sizes.len() >= 3, "scaling needs at least three sizes")?;
                check(!sizes.contains(&0), "sizes must be positive")
            }
            Experiment::Identity { block, n_inner } => {
                check(*n_inner >= 2, "n_inner must be >= 2")?;
                check(
                    ens.as_ref().unwrap().window().unwrapped().contains_region(block),
                    "identity block must lie inside the window",
                )
            }
            Experiment::Covariance(c) => {
                c.distribution.validate()?;
                check(c.samples >= 1, "samples must be >= 1")?;
                check(c.torus.iter().all(|&e| e >= 3 && e >= c.block_side), "torus extents too small")
            }
            Experiment::OracleVerify(o) => {
                o.distribution.validate()?;
                check(o.instances >= 1 && !o.bcs.is_empty() && !o.betas.is_empty(), "empty oracle run")
            }
        }
    }
}

/// One unit of work.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub experiment: String,
    pub kind: String,
    pub index: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<SeedSpec>,
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub elapsed_ms: Option<f64>,
    pub payload: Value,
}

/// A report with the files written next to it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub version: String,
    pub id: String,
    pub kind: String,
    pub units: usize,
    pub config: ExperimentConfig,
    pub report: Value,
    pub note: String,
    #[serde(skip)]
    pub tables: Vec<(String, String)>,
}

impl RunReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn table(&self, name: &str) -> Option<&str> {
        self.tables.iter().find(|(n, _)| n == name).map(|(_, t)| t.as_str())
    }
}

enum Plan {
    Fe(Ensemble, u64),
    DomainWall(Ensemble, usize),
    Ensemble(Ensemble),
    Martingale(Ensemble, Vec<Vec<usize>>, usize),
    EdgeMartingale(Ensemble, usize),
    Lindeberg {
        ens: Vec<Ensemble>,
        windows: Vec<Vec<usize>>,
        delta: f64,
        n_outer: usize,
        n_cond: usize,
    },
    Bounds(Ensemble, Vec<f64>, bool),
    Mgf(Ensemble, Vec<f64>, usize),
    Probe(Ensemble, Vec<f64>),
    Scaling(EnsembleSpec, Vec<(usize, Ensemble)>),
    Identity(Ensemble, Vec<usize>, usize),
    Covariance(CovarianceSpec),
    Oracle(OracleSpec),
}

const HI: u32 = 32;

fn split(idx: u64) -> (usize, u64) {
    ((idx >> HI) as usize, idx & 0xffff_ffff)
}

fn join(hi: usize, lo: u64) -> u64 {
    ((hi as u64) << HI) | lo
}

fn to_value<T: Serialize>(v: &T) -> Result<Value> {
    Ok(serde_json::to_value(v)?)
}

fn from_value<T: DeserializeOwned>(v: &Value) -> Result<T> {
    Ok(serde_json::from_value(v.clone())?)
}

fn payloads<T: DeserializeOwned>(records: &[ResultRecord]) -> Result<Vec<T>> {
    records.iter().map(|r| from_value(&r.payload)).collect()
}

fn csv_table<F>(header: &[&str], rows: usize, mut row: F) -> Result<String>
where
    F: FnMut(usize) -> Vec<String>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e.to_string()));
    w.write_record(header).map_err(io)?;
    for i in 0..rows {
        w.write_record(row(i)).map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

fn g(v: f64) -> String {
    format!("{v:e}")
}

#[derive(Serialize, Deserialize)]
struct FePayload {
    result: FreeEnergyResult,
    direct: f64,
}

#[derive(Serialize, Deserialize)]
struct ValuePayload {
    value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleFragment {
    pub extents: Vec<usize>,
    pub bc: String,
    pub beta: f64,
    pub instance: u64,
    pub log_z_deviation: f64,
    pub correlation_deviation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub instances: usize,
    pub max_log_z_deviation: f64,
    pub max_correlation_deviation: f64,
    pub log_z_tolerance: f64,
    pub correlation_tolerance: f64,
    pub pass: bool,
}

fn oracle_cases(o: &OracleSpec) -> usize {
    o.geometries.len() * o.bcs.len() * o.betas.len()
}

fn oracle_unit(o: &OracleSpec, idx: u64) -> Result<OracleFragment> {
    let (case, i) = split(idx);
    let gi = case / (o.bcs.len() * o.betas.len());
    let bi = (case / o.betas.len()) % o.bcs.len();
    let ki = case % o.betas.len();
    let region = Region::open(&o.geometries[gi])?;
    let bc = o.bcs[bi].resolve(&region)?;
    let edges = Arc::new(incident_edges(&region));
    let j = sample_couplings(&o.distribution, &edges, SeedSpec::new(o.seed, idx, Purpose::Couplings));
    let spec = GibbsSpec::new(&region, j, o.betas[ki], bc.clone())?;
    let a = Solver::new(o.caps, crate::exactsolve::Method::Enumeration).solve(&spec)?;
    let b = Solver::new(o.caps, crate::exactsolve::Method::Transfer).solve(&spec)?;
    let corr = a
        .correlations()
        .iter()
        .zip(b.correlations())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    Ok(OracleFragment {
        extents: o.geometries[gi].clone(),
        bc: bc.label(),
        beta: o.betas[ki],
        instance: i,
        log_z_deviation: (a.log_z - b.log_z).abs(),
        correlation_deviation: corr,
    })
}

/// Reject geometries outside either solver's caps before any work starts.
pub fn oracle_precheck(o: &OracleSpec) -> Result<()> {
    for ext in &o.geometries {
        let sites: usize = ext.iter().product();
        if sites > o.caps.enum_max_spins {
            return Err(Error::Unsupported(format!(
                "{ext:?} has {sites} spins, above the enumeration cap {}",
                o.caps.enum_max_spins
            )));
        }
        let width = match ext.len() {
            1 => 1,
            2 => ext[0].min(ext[1]),
            _ => usize::MAX,
        };
        if width > o.caps.transfer_max_width {
            return Err(Error::Unsupported(format!(
                "{ext:?} exceeds the transfer-matrix width cap {}",
                o.caps.transfer_max_width
            )));
        }
    }
    Ok(())
}

pub fn reduce_oracle(frags: &[OracleFragment]) -> OracleReport {
    let l = frags.iter().map(|f| f.log_z_deviation).fold(0.0, f64::max);
    let c = frags.iter().map(|f| f.correlation_deviation).fold(0.0, f64::max);
    OracleReport {
        instances: frags.len(),
        max_log_z_deviation: l,
        max_correlation_deviation: c,
        log_z_tolerance: ORACLE_LOGZ_TOL,
        correlation_tolerance: ORACLE_CORR_TOL,
        pass: l <= ORACLE_LOGZ_TOL && c <= ORACLE_CORR_TOL,
    }
}

/// Run the enumeration/transfer cross-check in memory.
pub fn oracle_verify(o: &OracleSpec) -> Result<(Vec<OracleFragment>, OracleReport)> {
    oracle_precheck(o)?;
    let units: Vec<u64> = (0..oracle_cases(o))
        .flat_map(|c| (0..o.instances as u64).map(move |i| join(c, i)))
        .collect();
    let frags: Vec<OracleFragment> = units.par_iter().map(|&u| oracle_unit(o, u)).collect::<Result<_>>()?;
    let rep = reduce_oracle(&frags);
    Ok((frags, rep))
}

impl Plan {
    fn new(config: &ExperimentConfig) -> Result<Plan> {
        config.validate()?;
        let ens = || Ensemble::new(config.ensemble.clone().expect("validated"));
        Ok(match &config.experiment {
            Experiment::Fe { realization } => Plan::Fe(ens()?, *realization),
            Experiment::DomainWall { seam_axis } => Plan::DomainWall(ens()?, *seam_axis),
            Experiment::Ensemble => Plan::Ensemble(ens()?),
            Experiment::Martingale { block_side, n_outer } => {
                let e = ens()?;
                let b = blocks_for(&e, *block_side)?;
                Plan::Martingale(e, b, *n_outer)
            }
            Experiment::EdgeMartingale { n_outer } => Plan::EdgeMartingale(ens()?, *n_outer),
            Experiment::Lindeberg {
                windows,
                delta,
                n_outer,
                n_cond,
            } => {
                let base = config.ensemble.clone().expect("validated");
                let ens = windows
                    .iter()
                    .map(|w| {
                        let mut s = base.clone();
                        s.geometry = s.geometry.with_window(w);
                        Ensemble::new(s)
                    })
                    .collect::<Result<_>>()?;
                Plan::Lindeberg {
                    ens,
                    windows: windows.clone(),
                    delta: *delta,
                    n_outer: *n_outer,
                    n_cond: *n_cond,
                }
            }
            Experiment::Bounds { betas, lemma } => Plan::Bounds(ens()?, betas.clone(), *lemma),
            Experiment::Mgf { ts, n_outer } => Plan::Mgf(ens()?, ts.clone(), *n_outer),
            Experiment::Probe { epsilons } => Plan::Probe(ens()?, epsilons.clone()),
            Experiment::Scaling { sizes } => {
                let t = config.ensemble.clone().expect("validated");
                let e = sizes
                    .iter()
                    .map(|&l| Ok((l, scaling_ensemble(&t, l)?)))
                    .collect::<Result<_>>()?;
                Plan::Scaling(t, e)
            }
            Experiment::Identity { block, n_inner } => {
                let e = ens()?;
                let pos = e.positions(&crate::lattice::interior_edges(block))?;
                Plan::Identity(e, pos, *n_inner)
            }
            Experiment::Covariance(c) => Plan::Covariance(c.clone()),
            Experiment::OracleVerify(o) => {
                oracle_precheck(o)?;
                Plan::Oracle(o.clone())
            }
        })
    }

    fn units(&self) -> Vec<u64> {
        let range = |n: usize| (0..n as u64).collect::<Vec<_>>();
        match self {
            Plan::Fe(_, r) => vec![*r],
            Plan::DomainWall(e, _)
            | Plan::Ensemble(e)
            | Plan::Martingale(e, _, _)
            | Plan::EdgeMartingale(e, _)
            | Plan::Mgf(e, _, _)
            | Plan::Probe(e, _) => range(e.spec.n),
            Plan::Lindeberg { ens, .. } => ens
                .iter()
                .enumerate()
                .flat_map(|(i, e)| (0..e.spec.n as u64).map(move |r| join(i, r)))
                .collect(),
            Plan::Bounds(e, betas, _) => (0..betas.len())
                .flat_map(|b| (0..e.spec.n as u64).map(move |r| join(b, r)))
                .collect(),
            Plan::Scaling(_, es) => es
                .iter()
                .flat_map(|(l, e)| (0..e.spec.n as u64).map(move |r| scaling_index(*l, r)))
                .collect(),
            // groups first, then independent samples
            Plan::Identity(e, _, _) => range(2 * e.spec.n),
            Plan::Covariance(c) => range(c.samples),
            Plan::Oracle(o) => (0..oracle_cases(o))
                .flat_map(|c| (0..o.instances as u64).map(move |i| join(c, i)))
                .collect(),
        }
    }

    fn seed(&self, idx: u64) -> Option<SeedSpec> {
        match self {
            Plan::Lindeberg { ens, .. } => {
                let (_, r) = split(idx);
                Some(ens[0].seed_spec(r, Purpose::Couplings))
            }
            Plan::Bounds(e, _, _) => Some(e.seed_spec(split(idx).1, Purpose::Couplings)),
            Plan::Covariance(c) => Some(SeedSpec::new(c.seed, idx, Purpose::Couplings)),
            Plan::Oracle(o) => Some(SeedSpec::new(o.seed, idx, Purpose::Couplings)),
            Plan::Scaling(t, _) => Some(SeedSpec::new(t.seed, idx, Purpose::Couplings)),
            Plan::Fe(e, _)
            | Plan::DomainWall(e, _)
            | Plan::Ensemble(e)
            | Plan::Martingale(e, _, _)
            | Plan::EdgeMartingale(e, _)
            | Plan::Mgf(e, _, _)
            | Plan::Probe(e, _)
            | Plan::Identity(e, _, _) => Some(e.seed_spec(idx, Purpose::Couplings)),
        }
    }

    fn compute(&self, idx: u64) -> Result<Value> {
        match self {
            Plan::Fe(e, _) => {
                let pair = e.pair(e.couplings(idx))?;
                let result = crate::interface::interface_free_energy(&pair, e.solver())?;
                let direct = interface_free_energy_direct(&pair, e.solver())?;
                to_value(&FePayload { result, direct })
            }
            Plan::DomainWall(e, axis) => {
                let value = domain_wall_free_energy(&e.couplings(idx), e.box_region(), e.beta(), *axis, e.solver())?;
                to_value(&ValuePayload { value })
            }
            Plan::Ensemble(e) => to_value(&realization_free_energy(e, idx)?),
            Plan::Martingale(e, b, n_outer) => to_value(&block_fragment(e, b, idx, *n_outer)?),
            Plan::EdgeMartingale(e, n_outer) => to_value(&edge_martingale_trace(e, idx, *n_outer)?),
            Plan::Lindeberg {
                ens,
                delta,
                n_outer,
                n_cond,
                ..
            } => {
                let (i, r) = split(idx);
                to_value(&lindeberg_fragment(&ens[i], r, *delta, *n_outer, *n_cond)?)
            }
            Plan::Bounds(e, betas, lemma) => {
                let (b, r) = split(idx);
                to_value(&bound_fragment(e, betas[b], r, *lemma)?)
            }
            Plan::Mgf(e, _, n_outer) => to_value(&ValuePayload {
                value: window_conditional(e, idx, *n_outer)?,
            }),
            Plan::Probe(e, _) => to_value(&probe_fragment(e, idx)?),
            Plan::Scaling(_, es) => {
                let (l, _) = split(idx);
                let e = &es.iter().find(|(s, _)| *s == l).expect("planned size").1;
                to_value(&ValuePayload {
                    value: realization_free_energy(e, idx)?.value,
                })
            }
            Plan::Identity(e, pos, n_inner) => {
                let n = e.spec.n as u64;
                if idx < n {
                    to_value(&e.conditional_samples(&e.couplings(idx), idx, pos, *n_inner, Purpose::Inner)?)
                } else {
                    to_value(&vec![realization_free_energy(e, idx)?.value])
                }
            }
            Plan::Covariance(c) => to_value(&covariance_fragment(c, idx, &CovarianceOverrides::default())?),
            Plan::Oracle(o) => to_value(&oracle_unit(o, idx)?),
        }
    }

    fn reduce(&self, records: &[ResultRecord]) -> Result<(Value, Vec<(String, String)>)> {
        match self {
            Plan::Fe(..) => {
                let p: FePayload = from_value(&records[0].payload)?;
                let t = csv_table(&["value", "direct", "log_z_gamma", "log_z_gamma_prime"], 1, |_| {
                    vec![g(p.result.value), g(p.direct), g(p.result.log_z_gamma), g(p.result.log_z_gamma_prime)]
                })?;
                Ok((to_value(&p.result)?, vec![("summary.csv".into(), t)]))
            }
            Plan::DomainWall(e, _) => {
                let v: Vec<f64> = payloads::<ValuePayload>(records)?.iter().map(|p| p.value).collect();
                let rep = variance_report(&v, &e.spec.bootstrap, 1);
                let t = csv_table(&["realization", "value"], v.len(), |i| {
                    vec![records[i].index.to_string(), g(v[i])]
                })?;
                Ok((to_value(&rep)?, vec![("summary.csv".into(), t)]))
            }
            Plan::Ensemble(e) => {
                let f: Vec<FreeEnergyResult> = payloads(records)?;
                let v: Vec<f64> = f.iter().map(|x| x.value).collect();
                let rep = variance_report(&v, &e.spec.bootstrap, 1);
                let t = csv_table(
                    &["window", "sites", "n", "mean", "variance", "stderr", "ci_low", "ci_high"],
                    1,
                    |_| {
                        vec![
                            format!("{:?}", e.spec.geometry.window),
                            e.window().site_count().to_string(),
                            rep.n.to_string(),
                            g(rep.mean),
                            g(rep.estimate),
                            g(rep.stderr),
                            g(rep.ci_low),
                            g(rep.ci_high),
                        ]
                    },
                )?;
                let r = csv_table(&["realization", "value"], v.len(), |i| {
                    vec![records[i].index.to_string(), g(v[i])]
                })?;
                Ok((to_value(&rep)?, vec![("summary.csv".into(), t), ("values.csv".into(), r)]))
            }
            Plan::Martingale(e, _, n_outer) => {
                let f: Vec<BlockFragment> = payloads(records)?;
                let rep = reduce_blocks(&f, *n_outer, &e.spec.bootstrap);
                let t = csv_table(
                    &["block", "increment_variance", "increment_stderr", "block_variance", "block_stderr"],
                    rep.blocks,
                    |k| {
                        vec![
                            (k + 1).to_string(),
                            g(rep.increments[k].estimate),
                            g(rep.increments[k].stderr),
                            g(rep.per_block[k].estimate),
                            g(rep.per_block[k].stderr),
                        ]
                    },
                )?;
                Ok((to_value(&rep)?, vec![("summary.csv".into(), t)]))
            }
            Plan::EdgeMartingale(_, n_outer) => {
                let f: Vec<EdgeTrace> = payloads(records)?;
                let rep = reduce_edge_traces(&f, *n_outer);
                let rows: Vec<(u64, usize)> = f
                    .iter()
                    .flat_map(|t| (0..t.edges.len()).map(move |k| (t.realization, k)))
                    .collect();
                let tab = csv_table(&["realization", "k", "edge", "delta", "stderr", "bound"], rows.len(), |i| {
                    let (r, k) = rows[i];
                    let t = &f[records.iter().position(|x| x.index == r).expect("record")];
                    vec![
                        r.to_string(),
                        (k + 1).to_string(),
                        t.edges[k].to_string(),
                        g(t.trace.delta[k]),
                        g(t.trace.delta_stderr[k]),
                        g(t.bound[k]),
                    ]
                })?;
                Ok((to_value(&rep)?, vec![("summary.csv".into(), tab)]))
            }
            Plan::Lindeberg {
                ens,
                windows,
                delta,
                n_outer,
                n_cond,
            } => {
                let mut frags: Vec<Vec<LindebergFragment>> = vec![Vec::new(); ens.len()];
                for r in records {
                    frags[split(r.index).0].push(from_value(&r.payload)?);
                }
                let edges: Vec<usize> = ens.iter().map(|e| e.window_edges().len()).collect();
                let rep = reduce_lindeberg(windows, &frags, &edges, *delta, *n_outer, *n_cond, &ens[0].spec.bootstrap);
                let t = csv_table(
                    &["window", "edges", "tail", "tail_stderr", "tail_normalized", "conditional_mean", "conditional_dispersion"],
                    rep.rows.len(),
                    |i| {
                        let r = &rep.rows[i];
                        vec![
                            format!("{:?}", r.window),
                            r.edges.to_string(),
                            g(r.tail.estimate),
                            g(r.tail.stderr),
                            g(r.tail_normalized),
                            g(r.conditional_mean),
                            g(r.conditional_dispersion),
                        ]
                    },
                )?;
                Ok((to_value(&rep)?, vec![("summary.csv".into(), t)]))
            }
            Plan::Bounds(..) => {
                let f: Vec<BoundFragment> = payloads(records)?;
                let s = reduce_bounds(&f);
                let t = csv_table(&["realization", "beta", "f", "bound", "slack", "lemma_slack"], f.len(), |i| {
                    let x = &f[i];
                    vec![
                        x.realization.to_string(),
                        g(x.beta),
                        g(x.report.f),
                        g(x.report.bound),
                        g(x.report.slack),
                        g(x.report.lemma_slack),
                    ]
                })?;
                let h = slack_histogram(&f)?;
                Ok((to_value(&s)?, vec![("summary.csv".into(), t), ("slack_histogram.csv".into(), h)]))
            }
            Plan::Mgf(e, ts, n_outer) => {
                let v: Vec<f64> = payloads::<ValuePayload>(records)?.iter().map(|p| p.value).collect();
                let rep = reduce_mgf(e, &v, ts, *n_outer);
                let t = csv_table(&["t", "empirical", "stderr", "bound", "pass"], rep.rows.len(), |i| {
                    let r = &rep.rows[i];
                    vec![g(r.t), g(r.empirical.estimate), g(r.empirical.stderr), g(r.bound), r.pass.to_string()]
                })?;
                Ok((to_value(&rep)?, vec![("summary.csv".into(), t)]))
            }
            Plan::Probe(e, eps) => {
                let d: Vec<Vec<f64>> = payloads(records)?;
                let rep = reduce_probe(e, &d, eps);
                let t = csv_table(&["epsilon", "density", "stderr", "ci_low", "ci_high"], rep.rows.len(), |i| {
                    let r = &rep.rows[i];
                    vec![
                        g(r.epsilon),
                        g(r.density.estimate),
                        g(r.density.stderr),
                        g(r.density.ci_low),
                        g(r.density.ci_high),
                    ]
                })?;
                let pe = csv_table(&["edge", "mean", "stderr", "nonzero_fraction"], rep.edges.len(), |i| {
                    vec![
                        rep.edges[i].to_string(),
                        g(rep.edge_mean[i]),
                        g(rep.edge_stderr[i]),
                        g(rep.nonzero_fraction[i]),
                    ]
                })?;
                Ok((to_value(&rep)?, vec![("summary.csv".into(), t), ("edges.csv".into(), pe)]))
            }
            Plan::Scaling(t, es) => {
                let sizes: Vec<usize> = es.iter().map(|(l, _)| *l).collect();
                let mut values: Vec<Vec<f64>> = vec![Vec::new(); sizes.len()];
                for r in records {
                    let i = sizes.iter().position(|&l| l == split(r.index).0).expect("size");
                    values[i].push(from_value::<ValuePayload>(&r.payload)?.value);
                }
                let rep = reduce_scaling(t, &sizes, &values)?;
                Ok((to_value(&rep)?, vec![("summary.csv".into(), scaling_table(&rep)?)]))
            }
            Plan::Identity(e, _, _) => {
                let n = e.spec.n as u64;
                let mut s = NestedSamples::default();
                for r in records {
                    let v: Vec<f64> = from_value(&r.payload)?;
                    if r.index < n {
                        s.groups.push(v);
                    } else {
                        s.independent.push(v[0]);
                    }
                }
                let rep = variance_identity_checks(&s, &e.spec.bootstrap);
                let t = csv_table(&["quantity", "estimate", "stderr"], 4, |i| {
                    let (name, x) = [
                        ("var_x", &rep.var_x),
                        ("mean_conditional_variance", &rep.mean_conditional_variance),
                        ("variance_of_conditional_mean", &rep.variance_of_conditional_mean),
                        ("symmetric_variance", &rep.symmetric_variance),
                    ][i];
                    vec![name.to_string(), g(x.estimate), g(x.stderr)]
                })?;
                Ok((to_value(&rep)?, vec![("summary.csv".into(), t)]))
            }
            Plan::Covariance(_) => {
                let f: Vec<CovarianceFragment> = payloads(records)?;
                let rep = reduce_covariance(&f);
                let t = csv_table(&["sample", "translation_deviation", "reweight_deviation"], f.len(), |i| {
                    vec![f[i].sample.to_string(), g(f[i].translation_deviation), g(f[i].reweight_deviation)]
                })?;
                Ok((to_value(&rep)?, vec![("summary.csv".into(), t)]))
            }
            Plan::Oracle(_) => {
                let f: Vec<OracleFragment> = payloads(records)?;
                let rep = reduce_oracle(&f);
                let mut cases: BTreeMap<(String, String, String), (f64, f64, usize)> = BTreeMap::new();
                for x in &f {
                    let c = cases
                        .entry((format!("{:?}", x.extents), x.bc.clone(), g(x.beta)))
                        .or_insert((0.0, 0.0, 0));
                    c.0 = c.0.max(x.log_z_deviation);
                    c.1 = c.1.max(x.correlation_deviation);
                    c.2 += 1;
                }
                let rows: Vec<_> = cases.into_iter().collect();
                let t = csv_table(
                    &["extents", "bc", "beta", "instances", "max_log_z_deviation", "max_correlation_deviation"],
                    rows.len(),
                    |i| {
                        let ((e, b, beta), (l, c, n)) = &rows[i];
                        vec![e.clone(), b.clone(), beta.clone(), n.to_string(), g(*l), g(*c)]
                    },
                )?;
                Ok((to_value(&rep)?, vec![("summary.csv".into(), t)]))
            }
        }
    }
}

fn slack_histogram(f: &[BoundFragment]) -> Result<String> {
    // slack relative to the bound, in ten bins over [0, 1]
    let mut bins = [0usize; 10];
    let mut zero_bound = 0usize;
    for x in f {
        if x.report.bound > 0.0 {
            let r = (x.report.slack / x.report.bound).clamp(0.0, 1.0);
            bins[((r * 10.0) as usize).min(9)] += 1;
        } else {
            zero_bound += 1;
        }
    }
    let mut out = csv_table(&["relative_slack_low", "relative_slack_high", "count"], 10, |i| {
        vec![g(i as f64 / 10.0), g((i + 1) as f64 / 10.0), bins[i].to_string()]
    })?;
    out.push_str(&format!("# zero-bound instances: {zero_bound}\n"));
    Ok(out)
}

fn scaling_table(rep: &ScalingReport) -> Result<String> {
    let mut out = csv_table(
        &["window", "sites", "boundary", "log_sites", "log_boundary", "variance", "stderr", "log_variance"],
        rep.rows.len(),
        |i| {
            let r = &rep.rows[i];
            vec![
                format!("{:?}", r.window),
                r.sites.to_string(),
                r.boundary.to_string(),
                g((r.sites as f64).ln()),
                g((r.boundary as f64).ln()),
                g(r.variance.estimate),
                g(r.variance.stderr),
                g(r.variance.estimate.ln()),
            ]
        },
    )?;
    for (name, fit) in [("volume", &rep.fit_volume), ("boundary", &rep.fit_boundary)] {
        match fit {
            Some(f) => out.push_str(&format!(
                "# fit {name}: exponent {} CI [{}, {}]\n",
                g(f.exponent),
                g(f.ci_low),
                g(f.ci_high)
            )),
            None => out.push_str(&format!("# fit {name}: degenerate\n")),
        }
    }
    out.push_str(&format!("# {}\n", rep.note));
    Ok(out)
}

/// Worker count from [`WORKERS_ENV`], if set.
pub fn env_workers() -> Result<Option<usize>> {
    match std::env::var(WORKERS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .map(Some)
            .ok_or_else(|| Error::Config(format!("{WORKERS_ENV} must be a positive integer, got {v:?}"))),
        Err(_) => Ok(None),
    }
}

fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match workers {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Config(e.to_string()))?;
            Ok(pool.install(f))
        }
    }
}

fn read_records(path: &Path) -> Result<Vec<ResultRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<ResultRecord>(&line) {
            Ok(r) => out.push(r),
            // a torn final line from an interrupted run
            Err(_) => break,
        }
    }
    Ok(out)
}

/// Output directory of a config.
pub fn output_dir(config: &ExperimentConfig) -> PathBuf {
    config
        .output
        .clone()
        .unwrap_or_else(|| PathBuf::from("runs").join(&config.id))
}

/// Run an experiment in memory and return the report; nothing is written.
pub fn run_in_memory(config: &ExperimentConfig, workers: Option<usize>) -> Result<(Vec<ResultRecord>, RunReport)> {
    let plan = Plan::new(config)?;
    let units = plan.units();
    let records = with_workers(workers, || compute_units(config, &plan, &units))??;
    let records = records
        .iter()
        .map(|r| Ok(serde_json::from_str(&serde_json::to_string(r)?)?))
        .collect::<Result<Vec<ResultRecord>>>()?;
    let report = build_report(config, &plan, &records)?;
    Ok((records, report))
}

fn compute_units(config: &ExperimentConfig, plan: &Plan, units: &[u64]) -> Result<Vec<ResultRecord>> {
    units
        .par_iter()
        .map(|&idx| {
            let t = Instant::now();
            let payload = plan.compute(idx).map_err(|e| Error::Realization {
                master: plan.seed(idx).map_or(0, |s| s.master),
                realization: idx,
                source: Box::new(e),
            })?;
            Ok(ResultRecord {
                experiment: config.id.clone(),
                kind: config.experiment.kind().into(),
                index: idx,
                seed: plan.seed(idx),
                status: "ok".into(),
                elapsed_ms: config.timing.then(|| t.elapsed().as_secs_f64() * 1e3),
                payload,
            })
        })
        .collect()
}

fn build_report(config: &ExperimentConfig, plan: &Plan, records: &[ResultRecord]) -> Result<RunReport> {
    let units = plan.units();
    if records.is_empty() {
        return Err(Error::IncompleteRun("no records".into()));
    }
    let by_index: BTreeMap<u64, &ResultRecord> = records.iter().map(|r| (r.index, r)).collect();
    let missing = units.iter().filter(|u| !by_index.contains_key(u)).count();
    if missing > 0 {
        return Err(Error::IncompleteRun(format!("{missing} of {} units have no record", units.len())));
    }
    // canonical order: the plan's unit order
    let ordered: Vec<ResultRecord> = units.iter().map(|u| by_index[u].clone()).collect();
    let (report, tables) = plan.reduce(&ordered)?;
    let mut cfg = config.clone();
    cfg.output = None;
    Ok(RunReport {
        schema_version: SCHEMA_VERSION,
        version: VERSION.into(),
        id: config.id.clone(),
        kind: config.experiment.kind().into(),
        units: units.len(),
        config: cfg,
        report,
        note: if config.experiment.needs_ensemble() { PROXY_NOTE.into() } else { String::new() },
        tables,
    })
}

/// Units per flush when running to disk.
const CHUNK: usize = 32;

/// Run an experiment into `out`, resuming from any records already there.
/// The worker count comes from `workers`, else [`WORKERS_ENV`], else rayon's
/// default.
pub fn run(config: &ExperimentConfig, out: &Path, workers: Option<usize>) -> Result<RunReport> {
    let plan = Plan::new(config)?;
    let workers = match workers {
        Some(w) => Some(w),
        None => env_workers()?,
    };
    fs::create_dir_all(out)?;
    let mut cfg = config.clone();
    cfg.output = None;
    let cfg_text = serde_json::to_string_pretty(&cfg)? + "\n";
    let cfg_path = out.join("config.json");
    if cfg_path.exists() {
        let old = fs::read_to_string(&cfg_path)?;
        if old != cfg_text {
            return Err(Error::Config(format!(
                "{} holds a run of a different config",
                out.display()
            )));
        }
    } else {
        fs::write(&cfg_path, &cfg_text)?;
    }

    let rec_path = out.join("records.jsonl");
    let existing = read_records(&rec_path)?;
    // rewrite without a torn tail before appending
    {
        let mut f = File::create(&rec_path)?;
        for r in &existing {
            writeln!(f, "{}", serde_json::to_string(r)?)?;
        }
    }
    let done: std::collections::HashSet<u64> = existing.iter().map(|r| r.index).collect();
    let todo: Vec<u64> = plan.units().into_iter().filter(|u| !done.contains(u)).collect();
    let mut file = OpenOptions::new().append(true).open(&rec_path)?;
    for chunk in todo.chunks(CHUNK) {
        let recs = with_workers(workers, || compute_units(config, &plan, chunk))??;
        for r in &recs {
            writeln!(file, "{}", serde_json::to_string(r)?)?;
        }
        file.flush()?;
    }
    drop(file);
    report_dir(out)
}

/// Rebuild the report of a run directory from its records and write
/// `report.json` and the CSV tables.
pub fn report_dir(out: &Path) -> Result<RunReport> {
    let cfg_path = out.join("config.json");
    if !cfg_path.exists() {
        return Err(Error::IncompleteRun(format!("{} has no config.json", out.display())));
    }
    let config: ExperimentConfig = serde_json::from_str(&fs::read_to_string(&cfg_path)?)?;
    let plan = Plan::new(&config)?;
    let records = read_records(&out.join("records.jsonl"))?;
    let rep = build_report(&config, &plan, &records)?;
    fs::write(out.join("report.json"), rep.to_json()?)?;
    for (name, table) in &rep.tables {
        fs::write(out.join(name), table)?;
    }
    Ok(rep)
}

/// Report from records held in memory.
pub fn report(config: &ExperimentConfig, records: &[ResultRecord]) -> Result<RunReport> {
    build_report(config, &Plan::new(config)?, records)
}

/// Default configs per kind, used by the CLI when no file is given.
pub fn default_experiment(kind: &str) -> Result<Experiment> {
    Ok(match kind {
        "fe" => Experiment::Fe { realization: 0 },
        "domain-wall" => Experiment::DomainWall { seam_axis: 0 },
        "ensemble" => Experiment::Ensemble,
        "martingale" => Experiment::Martingale {
            block_side: 2,
            n_outer: 50,
        },
        "edge-martingale" => Experiment::EdgeMartingale { n_outer: 50 },
        "lindeberg" => Experiment::Lindeberg {
            windows: vec![vec![3, 3], vec![4, 4]],
            delta: 1.0,
            n_outer: 20,
            n_cond: 4,
        },
        "bounds" => Experiment::Bounds {
            betas: vec![0.5, 1.0, 2.0],
            lemma: true,
        },
        "mgf" => Experiment::Mgf {
            ts: vec![0.5, 1.0, 2.0],
            n_outer: 50,
        },
        "probe" => Experiment::Probe { epsilons: default_eps() },
        "scaling" => Experiment::Scaling { sizes: vec![2, 3, 4] },
        "identity" => Experiment::Identity {
            block: Region::window(&[1, 1], &[2, 2])?,
            n_inner: 20,
        },
        "covariance" => Experiment::Covariance(CovarianceSpec {
            torus: vec![4, 4],
            beta: 1.0,
            distribution: CouplingDistribution::default(),
            samples: 20,
            seed: 0,
            block_side: 2,
            solver: Solver::default(),
        }),
        "oracle-verify" => Experiment::OracleVerify(OracleSpec {
            geometries: vec![vec![3, 3], vec![4, 3], vec![5, 2]],
            betas: vec![0.5, 1.0, 2.0],
            bcs: vec![
                BcRule::Free,
                BcRule::Periodic,
                BcRule::Antiperiodic { axis: 0 },
                BcRule::FixedPlus,
                BcRule::FixedMinus,
                BcRule::Axes(vec![
                    crate::exactsolve::AxisBoundary::Free,
                    crate::exactsolve::AxisBoundary::Periodic,
                ]),
            ],
            instances: 50,
            seed: 0,
            distribution: CouplingDistribution::default(),
            caps: SolverCaps::default(),
        }),
        other => return Err(Error::Config(format!("unknown experiment kind {other:?}"))),
    })
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            id: "ensemble".into(),
            output: None,
            timing: false,
            ensemble: Some(EnsembleSpec::free_vs_periodic(&[3, 3], 1.0, 200, 0)),
            experiment: Experiment::Ensemble,
        }
    }
}

#[cfg(test)]
mod tests;
