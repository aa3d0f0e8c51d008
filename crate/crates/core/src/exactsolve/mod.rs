//! Exact finite-volume Gibbs machinery.
//!
//! A [`GibbsSpec`] fixes a box, a coupling realization, an inverse temperature
//! and a boundary condition. Its Boltzmann weight is
//! `exp(-β H_total(σ))`, where `H_total` contains every bond inside the box,
//! the wrap bonds of periodic/antiperiodic axes (sign-flipped across the
//! antiperiodic seam) and the bonds to clamped ghost spins of fixed axes.
//!
//! Two independent engines evaluate log-partition functions and edge
//! correlations: exhaustive enumeration (any dimension, up to
//! [`SolverCaps::enum_max_spins`] free spins) and the transfer matrix (d ≤ 2,
//! up to [`SolverCaps::transfer_max_width`]).

mod enumerate;
mod system;
mod transfer;

use std::collections::HashMap;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::disorder::CouplingConfig;
use crate::error::{Error, Result};
use crate::lattice::{interior_edges, Edge, EdgeSet, Region};

pub(crate) use system::SpinSystem;
use system::{compile, face_size, TermKind};

/// Boundary condition along one axis.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum AxisBoundary {
    Free,
    Periodic,
    /// Periodic with the couplings of the edges leaving layer `seam` negated.
    /// `None` puts the seam on the wrap edges (layer `extent - 1`).
    Antiperiodic {
        #[serde(default)]
        seam: Option<usize>,
    },
    /// Ghost spins on both faces, listed in lexicographic face order.
    Fixed { low: Vec<i8>, high: Vec<i8> },
}

impl AxisBoundary {
    pub fn is_wrapped(&self) -> bool {
        matches!(self, AxisBoundary::Periodic | AxisBoundary::Antiperiodic { .. })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundaryCondition {
    pub axes: Vec<AxisBoundary>,
}

impl BoundaryCondition {
    pub fn free(d: usize) -> Self {
        BoundaryCondition {
            axes: vec![AxisBoundary::Free; d],
        }
    }

    pub fn periodic(d: usize) -> Self {
        BoundaryCondition {
            axes: vec![AxisBoundary::Periodic; d],
        }
    }

    /// Antiperiodic along `seam_axis` (seam on the wrap edges), periodic
    /// along the others.
    pub fn antiperiodic(d: usize, seam_axis: usize) -> Self {
        let mut axes = vec![AxisBoundary::Periodic; d];
        axes[seam_axis] = AxisBoundary::Antiperiodic { seam: None };
        BoundaryCondition { axes }
    }

    /// All faces clamped to the same spin.
    pub fn fixed_uniform(region: &Region, spin: i8) -> Self {
        let axes = (0..region.dim())
            .map(|a| {
                let n = face_size(region, a);
                AxisBoundary::Fixed {
                    low: vec![spin; n],
                    high: vec![spin; n],
                }
            })
            .collect();
        BoundaryCondition { axes }
    }

    pub fn mixed(axes: Vec<AxisBoundary>) -> Self {
        BoundaryCondition { axes }
    }

    pub fn validate(&self, region: &Region) -> Result<()> {
        if self.axes.len() != region.dim() {
            return Err(Error::invalid(format!(
                "boundary condition has {} axes, region has {}",
                self.axes.len(),
                region.dim()
            )));
        }
        for (a, ax) in self.axes.iter().enumerate() {
            match ax {
                AxisBoundary::Antiperiodic { seam: Some(p) } if *p >= region.extents()[a] => {
                    return Err(Error::invalid(format!("seam layer {p} outside axis {a}")));
                }
                AxisBoundary::Fixed { low, high } => {
                    let n = face_size(region, a);
                    if low.len() != n || high.len() != n {
                        return Err(Error::invalid(format!(
                            "fixed boundary on axis {a} needs {n} spins per face"
                        )));
                    }
                    if low.iter().chain(high).any(|&s| s != 1 && s != -1) {
                        return Err(Error::invalid("fixed boundary spins must be ±1"));
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn wrap_flags(&self) -> Vec<bool> {
        self.axes.iter().map(AxisBoundary::is_wrapped).collect()
    }

    /// Short label used in records (`free`, `periodic`, `antiperiodic`,
    /// `fixed+`, `fixed-`, `fixed`, or a per-axis list).
    pub fn label(&self) -> String {
        let name = |a: &AxisBoundary| match a {
            AxisBoundary::Free => "free",
            AxisBoundary::Periodic => "periodic",
            AxisBoundary::Antiperiodic { .. } => "antiperiodic",
            AxisBoundary::Fixed { low, high } if low.iter().chain(high).all(|&s| s == 1) => "fixed+",
            AxisBoundary::Fixed { low, high } if low.iter().chain(high).all(|&s| s == -1) => "fixed-",
            AxisBoundary::Fixed { .. } => "fixed",
        };
        let names: Vec<&str> = self.axes.iter().map(name).collect();
        if names.iter().all(|n| *n == names[0]) {
            names[0].to_string()
        } else if names.iter().filter(|n| **n == "antiperiodic").count() == 1
            && names.iter().all(|n| *n == "antiperiodic" || *n == "periodic")
        {
            "antiperiodic".to_string()
        } else {
            names.join("/")
        }
    }
}

/// A finite-volume Gibbs state: box, couplings, β and boundary condition.
#[derive(Clone, Debug)]
pub struct GibbsSpec {
    region: Region,
    couplings: CouplingConfig,
    beta: f64,
    bc: BoundaryCondition,
    system: Arc<SpinSystem>,
}

impl GibbsSpec {
    /// The wrap flags of `region` are replaced by those implied by `bc`.
    pub fn new(region: &Region, couplings: CouplingConfig, beta: f64, bc: BoundaryCondition) -> Result<Self> {
        if !(beta.is_finite() && beta >= 0.0) {
            return Err(Error::invalid(format!("inverse temperature must be finite and >= 0, got {beta}")));
        }
        bc.validate(region)?;
        let region = region.with_wrap(bc.wrap_flags())?;
        let system = Arc::new(compile(&region, &couplings, beta, &bc)?);
        Ok(GibbsSpec {
            region,
            couplings,
            beta,
            bc,
            system,
        })
    }

    pub fn region(&self) -> &Region {
        &self.region
    }

    pub fn couplings(&self) -> &CouplingConfig {
        &self.couplings
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn bc(&self) -> &BoundaryCondition {
        &self.bc
    }

    pub fn with_couplings(&self, couplings: CouplingConfig) -> Result<Self> {
        GibbsSpec::new(&self.region, couplings, self.beta, self.bc.clone())
    }

    pub fn with_beta(&self, beta: f64) -> Result<Self> {
        GibbsSpec::new(&self.region, self.couplings.clone(), beta, self.bc.clone())
    }

    /// Edges whose couplings enter the weight, in canonical order.
    pub fn used_edges(&self) -> EdgeSet {
        EdgeSet::from_edges(self.system.terms.iter().map(|t| t.edge.clone()))
    }

    /// Sign with which the coupling of `edge` enters (−1 across an
    /// antiperiodic seam).
    pub fn edge_sign(&self, edge: &Edge) -> Result<f64> {
        self.system
            .terms
            .iter()
            .find(|t| &t.edge == edge)
            .map(|t| t.sign)
            .ok_or_else(|| Error::Containment(format!("edge {edge} does not enter {}", self.region)))
    }

    pub(crate) fn system(&self) -> &SpinSystem {
        &self.system
    }
}

/// Spins over a region, in lexicographic site order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpinConfig {
    region: Region,
    spins: Vec<i8>,
}

impl SpinConfig {
    pub fn new(region: Region, spins: Vec<i8>) -> Result<Self> {
        if spins.len() != region.site_count() {
            return Err(Error::Coverage(format!(
                "{} spins for {} sites",
                spins.len(),
                region.site_count()
            )));
        }
        if spins.iter().any(|&s| s != 1 && s != -1) {
            return Err(Error::invalid("spins must be ±1"));
        }
        Ok(SpinConfig { region, spins })
    }

    pub fn uniform(region: Region, spin: i8) -> Result<Self> {
        let n = region.site_count();
        SpinConfig::new(region, vec![spin; n])
    }

    pub fn region(&self) -> &Region {
        &self.region
    }

    pub fn spins(&self) -> &[i8] {
        &self.spins
    }

    pub fn get(&self, site: &crate::lattice::Site) -> Result<i8> {
        self.region
            .site_index(site)
            .map(|i| self.spins[i])
            .ok_or_else(|| Error::Coverage(site.to_string()))
    }
}

/// H = −Σ_{(x,y)∈edges} J_xy σ_x σ_y, summed in canonical edge order. Far
/// endpoints are reduced with the spin configuration's wrap flags.
pub fn energy(sigma: &SpinConfig, j: &CouplingConfig, edges: &EdgeSet) -> Result<f64> {
    let mut h = 0.0;
    for e in edges {
        let sx = sigma.get(&e.origin)?;
        let y = sigma
            .region
            .edge_target(e)
            .ok_or_else(|| Error::Coverage(e.target().to_string()))?;
        let sy = sigma.get(&y)?;
        h -= j.get(e)? * f64::from(sx * sy);
    }
    Ok(h)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverCaps {
    pub enum_max_spins: usize,
    pub transfer_max_width: usize,
}

impl Default for SolverCaps {
    fn default() -> Self {
        SolverCaps {
            enum_max_spins: 24,
            transfer_max_width: 12,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    #[default]
    Auto,
    Enumeration,
    Transfer,
}

/// Log-partition function and all coupling correlations of one spec.
#[derive(Clone, Debug)]
pub struct GibbsSolution {
    pub log_z: f64,
    pub beta: f64,
    pub method: Method,
    edges: EdgeSet,
    /// ⟨σ_x σ_y⟩ per used edge (ghost edges: ghost spin × ⟨σ_x⟩)
    corr: Vec<f64>,
    sign: Vec<f64>,
    /// ⟨σ_x⟩ per site
    pub magnetization: Vec<f64>,
}

impl GibbsSolution {
    pub fn edges(&self) -> &EdgeSet {
        &self.edges
    }

    pub fn correlations(&self) -> &[f64] {
        &self.corr
    }

    pub fn correlation(&self, edge: &Edge) -> Result<f64> {
        self.edges
            .position(edge)
            .map(|i| self.corr[i])
            .ok_or_else(|| Error::Containment(format!("edge {edge} is not part of the solved system")))
    }

    /// ∂ log Z / ∂ J_e = β · sign_e · ⟨σ_x σ_y⟩.
    pub fn d_log_z(&self, edge: &Edge) -> Result<f64> {
        let i = self
            .edges
            .position(edge)
            .ok_or_else(|| Error::Containment(format!("edge {edge} is not part of the solved system")))?;
        Ok(self.beta * self.sign[i] * self.corr[i])
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Solver {
    pub caps: SolverCaps,
    pub method: Method,
}

impl Solver {
    pub fn new(caps: SolverCaps, method: Method) -> Self {
        Solver { caps, method }
    }

    pub fn enumeration() -> Self {
        Solver::new(SolverCaps::default(), Method::Enumeration)
    }

    pub fn transfer() -> Self {
        Solver::new(SolverCaps::default(), Method::Transfer)
    }

    fn resolve(&self, sys: &SpinSystem) -> Result<Method> {
        match self.method {
            Method::Auto => {
                let r = &sys.region;
                let transfer_ok = r.dim() == 1
                    || (r.dim() == 2 && r.extents().iter().any(|&e| e <= self.caps.transfer_max_width));
                if transfer_ok {
                    Ok(Method::Transfer)
                } else if sys.free_count() <= self.caps.enum_max_spins {
                    Ok(Method::Enumeration)
                } else {
                    Err(Error::Size(format!(
                        "{r} is beyond both the transfer width cap ({}) and the enumeration cap ({})",
                        self.caps.transfer_max_width, self.caps.enum_max_spins
                    )))
                }
            }
            m => Ok(m),
        }
    }

    fn log_z_system(&self, sys: &SpinSystem) -> Result<f64> {
        let method = self.resolve(sys)?;
        if sys.beta == 0.0 {
            // every admissible configuration has weight one
            if method == Method::Enumeration && sys.free_count() > self.caps.enum_max_spins {
                return Err(Error::Size(format!(
                    "{} free spins exceed the enumeration cap of {}",
                    sys.free_count(),
                    self.caps.enum_max_spins
                )));
            }
            return Ok(sys.free_count() as f64 * std::f64::consts::LN_2);
        }
        match method {
            Method::Transfer => transfer::log_z(sys, self.caps.transfer_max_width),
            _ => Ok(enumerate::enumerate(sys, self.caps.enum_max_spins, 0, |_, _| {})?.log_total()),
        }
    }

    pub fn log_z(&self, spec: &GibbsSpec) -> Result<f64> {
        self.log_z_system(spec.system())
    }

    /// log Z restricted to configurations with the given spins clamped
    /// (site indices in the spec's region order).
    pub fn log_z_clamped(&self, spec: &GibbsSpec, clamp: &[(usize, i8)]) -> Result<f64> {
        self.log_z_system(&spec.system().with_clamp(clamp)?)
    }

    pub fn solve(&self, spec: &GibbsSpec) -> Result<GibbsSolution> {
        let sys = spec.system();
        let method = self.resolve(sys)?;
        let (log_z, bond_corr, magnetization) = match method {
            Method::Transfer => {
                let out = transfer::solve(sys, self.caps.transfer_max_width)?;
                (out.log_z, out.bond_corr, out.magnetization)
            }
            _ => {
                let nb = sys.bonds.len();
                let bonds = &sys.bonds;
                let acc = enumerate::enumerate(sys, self.caps.enum_max_spins, nb + sys.n, |s, v| {
                    for (k, b) in bonds.iter().enumerate() {
                        v[k] = f64::from(s[b.i] * s[b.j]);
                    }
                    for (k, &si) in s.iter().enumerate() {
                        v[nb + k] = f64::from(si);
                    }
                })?;
                let ex = acc.expectations();
                (acc.log_total(), ex[..nb].to_vec(), ex[nb..].to_vec())
            }
        };
        let (log_z, bond_corr, magnetization) = if sys.beta == 0.0 {
            // free spins are independent and unbiased
            let mag: Vec<f64> = sys.clamp.iter().map(|&c| f64::from(c)).collect();
            let corr = sys.bonds.iter().map(|b| mag[b.i] * mag[b.j]).collect();
            (sys.free_count() as f64 * std::f64::consts::LN_2, corr, mag)
        } else {
            (log_z, bond_corr, magnetization)
        };
        let mut corr = Vec::with_capacity(sys.terms.len());
        let mut sign = Vec::with_capacity(sys.terms.len());
        for t in &sys.terms {
            corr.push(match t.kind {
                TermKind::Bond(b) => bond_corr[b],
                TermKind::Ghost { site, spin } => f64::from(spin) * magnetization[site],
            });
            sign.push(t.sign);
        }
        Ok(GibbsSolution {
            log_z,
            beta: sys.beta,
            method,
            edges: EdgeSet::from_edges(sys.terms.iter().map(|t| t.edge.clone())),
            corr,
            sign,
            magnetization,
        })
    }

    /// log-probabilities of every spin configuration of `window`. Entry `c`
    /// belongs to the configuration with window spin `b` equal to −1 exactly
    /// when bit `b` of `c` is set (see [`window_spins`]).
    pub fn window_log_marginal(&self, spec: &GibbsSpec, window: &Region) -> Result<Vec<f64>> {
        if !spec.region().unwrapped().contains_region(&window.unwrapped()) {
            return Err(Error::Containment(format!("{window} is not inside {}", spec.region())));
        }
        let idx: Vec<usize> = window
            .sites()
            .map(|s| spec.region().site_index(&s).expect("window inside region"))
            .collect();
        let nw = idx.len();
        if nw > self.caps.enum_max_spins {
            return Err(Error::Size(format!(
                "window of {nw} sites exceeds the enumeration cap of {}",
                self.caps.enum_max_spins
            )));
        }
        let lz = self.log_z(spec)?;
        (0..1usize << nw)
            .into_par_iter()
            .map(|c| {
                let clamp: Vec<(usize, i8)> = idx.iter().copied().zip(window_spins(c, nw)).collect();
                Ok(self.log_z_clamped(spec, &clamp)? - lz)
            })
            .collect()
    }

    /// log Γ(exp g(σ_W)) for a function of the spins in `window`, summed over
    /// window configurations with clamped partition functions. `log_f`
    /// receives the window spins in the window's site order.
    pub fn window_log_expectation<F>(&self, spec: &GibbsSpec, window: &Region, log_f: F) -> Result<f64>
    where
        F: Fn(&[i8]) -> f64 + Sync,
    {
        let marginal = self.window_log_marginal(spec, window)?;
        let nw = window.site_count();
        let parts: Vec<f64> = marginal
            .iter()
            .enumerate()
            .map(|(c, lp)| lp + log_f(&window_spins(c, nw)))
            .collect();
        Ok(log_sum_exp(&parts))
    }
}

/// Window spins encoded by the bit pattern `c`: bit `b` set means spin `b` is −1.
pub fn window_spins(c: usize, n: usize) -> Vec<i8> {
    (0..n).map(|b| if (c >> b) & 1 == 1 { -1 } else { 1 }).collect()
}

/// Numerically stable log Σ exp.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn log_partition_enum(spec: &GibbsSpec) -> Result<f64> {
    Solver::enumeration().log_z(spec)
}

pub fn log_partition_transfer(spec: &GibbsSpec) -> Result<f64> {
    Solver::transfer().log_z(spec)
}

/// ⟨σ_x σ_y⟩ for a coupling of the spec, using the default solver.
pub fn edge_correlation(spec: &GibbsSpec, edge: &Edge) -> Result<f64> {
    Solver::default().solve(spec)?.correlation(edge)
}

/// Σ_σ f(σ) w(σ) / Z by enumeration. `f` sees spins in region site order.
pub fn gibbs_expectation_enum<F>(spec: &GibbsSpec, f: F) -> Result<f64>
where
    F: Fn(&[i8]) -> f64 + Sync,
{
    gibbs_expectation_enum_with(spec, &SolverCaps::default(), f)
}

pub fn gibbs_expectation_enum_with<F>(spec: &GibbsSpec, caps: &SolverCaps, f: F) -> Result<f64>
where
    F: Fn(&[i8]) -> f64 + Sync,
{
    let acc = enumerate::enumerate(spec.system(), caps.enum_max_spins, 1, |s, v| v[0] = f(s))?;
    Ok(acc.expectations()[0])
}

fn block_bonds(spec: &GibbsSpec, block: &Region) -> Result<Vec<(Edge, usize, usize)>> {
    if !spec.region().unwrapped().contains_region(block) {
        return Err(Error::Containment(format!("block {block} is not inside {}", spec.region())));
    }
    let sys = spec.system();
    let mut out = Vec::new();
    for e in &interior_edges(block) {
        let t = sys
            .terms
            .iter()
            .find(|t| &t.edge == e)
            .ok_or_else(|| Error::Containment(format!("block edge {e} does not enter the spec")))?;
        match t.kind {
            TermKind::Bond(b) if t.sign > 0.0 => out.push((e.clone(), sys.bonds[b].i, sys.bonds[b].j)),
            _ => {
                return Err(Error::Unsupported(format!(
                    "block edge {e} crosses an antiperiodic seam"
                )))
            }
        }
    }
    Ok(out)
}

/// Spec with couplings J + J_B on E(B).
pub fn reweight(spec: &GibbsSpec, block: &Region, jb: &HashMap<Edge, f64>) -> Result<GibbsSpec> {
    let bonds = block_bonds(spec, block)?;
    let mut j = spec.couplings().clone();
    for (e, _, _) in &bonds {
        let add = *jb.get(e).ok_or_else(|| Error::IncompleteAssignment(e.to_string()))?;
        j = j.with_value(e, j.get(e)? + add)?;
    }
    spec.with_couplings(j)
}

/// The reweighting formula evaluated on the original spec:
/// Γ(f e^{−β H_{B,J_B}}) / Γ(e^{−β H_{B,J_B}}), by enumeration.
pub fn reweighted_expectation_enum<F>(
    spec: &GibbsSpec,
    block: &Region,
    jb: &HashMap<Edge, f64>,
    f: F,
) -> Result<f64>
where
    F: Fn(&[i8]) -> f64 + Sync,
{
    let bonds = block_bonds(spec, block)?;
    let terms: Vec<(usize, usize, f64)> = bonds
        .iter()
        .map(|(e, i, j)| {
            jb.get(e)
                .map(|v| (*i, *j, *v))
                .ok_or_else(|| Error::IncompleteAssignment(e.to_string()))
        })
        .collect::<Result<_>>()?;
    let beta = spec.beta();
    let shift: f64 = terms.iter().map(|t| beta * t.2.abs()).sum();
    let acc = enumerate::enumerate(spec.system(), SolverCaps::default().enum_max_spins, 2, |s, v| {
        let mut e = 0.0;
        for &(i, j, k) in &terms {
            e += k * f64::from(s[i] * s[j]);
        }
        let g = (beta * e - shift).exp();
        v[0] = g;
        v[1] = g * f(s);
    })?;
    let ex = acc.expectations();
    Ok(ex[1] / ex[0])
}
