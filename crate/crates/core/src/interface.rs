//! Interface free energy between two Gibbs-state proxies on a common box.
//!
//! For a window Λ inside the box Λ′,
//!
//! ```text
//! F_Λ = log Γ(exp βH_Λ) − log Γ′(exp βH_Λ)
//!     = [log Z_Γ(J∖Λ) − log Z_Γ(J)] − [log Z_Γ′(J∖Λ) − log Z_Γ′(J)]
//! ```
//!
//! where `H_Λ = −Σ_{E(Λ)} J σσ` and `J∖Λ` zeroes the couplings on E(Λ). The
//! weight of each state is `exp(−β H_total)`, so `exp(+β H_Λ)` cancels the
//! window bonds.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::disorder::{zero_edges, CouplingConfig, SeedSpec};
use crate::error::{Error, Result};
use crate::exactsolve::{AxisBoundary, BoundaryCondition, GibbsSpec, Method, Solver};
use crate::lattice::{boundary_edges, interior_edges, Edge, EdgeSet, Region};

/// Two specs on the same box, β and couplings, differing in boundary
/// condition, plus the window Λ.
#[derive(Clone, Debug)]
pub struct StatePair {
    gamma: GibbsSpec,
    gamma_prime: GibbsSpec,
    window: Region,
    margin: Vec<usize>,
    window_edges: EdgeSet,
}

impl StatePair {
    /// Every window axis needs a margin of at least one site on both sides,
    /// except an axis the window spans completely on which both states are
    /// periodic; the window then wraps along it.
    pub fn new(gamma: GibbsSpec, gamma_prime: GibbsSpec, window: &Region) -> Result<Self> {
        let bx = gamma.region();
        if !bx.same_box(gamma_prime.region()) {
            return Err(Error::Pair(format!(
                "states live on different boxes: {bx} vs {}",
                gamma_prime.region()
            )));
        }
        if gamma.beta().to_bits() != gamma_prime.beta().to_bits() {
            return Err(Error::Pair("states have different inverse temperatures".into()));
        }
        if !bx.unwrapped().contains_region(&window.unwrapped()) {
            return Err(Error::Containment(format!("window {window} is not inside {bx}")));
        }
        let mut wrap = vec![false; bx.dim()];
        let mut margin = Vec::with_capacity(bx.dim());
        for a in 0..bx.dim() {
            let lo = (window.offset()[a] - bx.offset()[a]) as usize;
            let hi = bx.extents()[a] - window.extents()[a] - lo;
            let m = lo.min(hi);
            if m == 0 {
                let full = lo == 0 && hi == 0;
                let periodic = matches!(gamma.bc().axes[a], AxisBoundary::Periodic)
                    && matches!(gamma_prime.bc().axes[a], AxisBoundary::Periodic);
                if !(full && periodic && bx.extents()[a] > 2) {
                    return Err(Error::Pair(format!(
                        "window {window} touches the boundary of {bx} along axis {a}"
                    )));
                }
                wrap[a] = true;
            }
            margin.push(m);
        }
        let window = window.with_wrap(wrap)?;
        let window_edges = interior_edges(&window);

        let (ja, jb) = (gamma.couplings(), gamma_prime.couplings());
        for e in &interior_edges(bx) {
            if ja.get(e)?.to_bits() != jb.get(e)?.to_bits() {
                return Err(Error::Pair(format!("couplings differ on edge {e}")));
            }
        }
        for e in &window_edges {
            gamma.edge_sign(e)?;
            gamma_prime.edge_sign(e)?;
        }
        Ok(StatePair {
            gamma,
            gamma_prime,
            window,
            margin,
            window_edges,
        })
    }

    /// Build both specs from one coupling realization.
    pub fn from_rules(
        bx: &Region,
        window: &Region,
        couplings: CouplingConfig,
        beta: f64,
        bc: BoundaryCondition,
        bc_prime: BoundaryCondition,
    ) -> Result<Self> {
        let gamma = GibbsSpec::new(bx, couplings.clone(), beta, bc)?;
        let gamma_prime = GibbsSpec::new(bx, couplings, beta, bc_prime)?;
        StatePair::new(gamma, gamma_prime, window)
    }

    pub fn gamma(&self) -> &GibbsSpec {
        &self.gamma
    }

    pub fn gamma_prime(&self) -> &GibbsSpec {
        &self.gamma_prime
    }

    /// The window, with wrap flags on axes it spans periodically.
    pub fn window(&self) -> &Region {
        &self.window
    }

    pub fn margin(&self) -> &[usize] {
        &self.margin
    }

    /// E(Λ).
    pub fn window_edges(&self) -> &EdgeSet {
        &self.window_edges
    }

    /// ∂Λ inside the box.
    pub fn boundary(&self) -> Result<EdgeSet> {
        boundary_edges(&self.window, self.gamma.region())
    }

    pub fn couplings(&self) -> &CouplingConfig {
        self.gamma.couplings()
    }

    pub fn beta(&self) -> f64 {
        self.gamma.beta()
    }

    /// Same pair with new couplings (applied to both states).
    pub fn with_couplings(&self, j: CouplingConfig) -> Result<Self> {
        Ok(StatePair {
            gamma: self.gamma.with_couplings(j.clone())?,
            gamma_prime: self.gamma_prime.with_couplings(j)?,
            window: self.window.clone(),
            margin: self.margin.clone(),
            window_edges: self.window_edges.clone(),
        })
    }

    pub fn with_beta(&self, beta: f64) -> Result<Self> {
        Ok(StatePair {
            gamma: self.gamma.with_beta(beta)?,
            gamma_prime: self.gamma_prime.with_beta(beta)?,
            window: self.window.clone(),
            margin: self.margin.clone(),
            window_edges: self.window_edges.clone(),
        })
    }

    /// The pair with Γ and Γ′ exchanged.
    pub fn swapped(&self) -> Self {
        StatePair {
            gamma: self.gamma_prime.clone(),
            gamma_prime: self.gamma.clone(),
            window: self.window.clone(),
            margin: self.margin.clone(),
            window_edges: self.window_edges.clone(),
        }
    }

    /// H_Λ(σ_Λ) for window spins in window site order.
    pub fn window_energy(&self, spins: &[i8]) -> Result<f64> {
        let mut h = 0.0;
        for e in &self.window_edges {
            let i = self.window.site_index(&e.origin).expect("window edge origin");
            let t = self.window.edge_target(e).expect("window edge target");
            let j = self.window.site_index(&t).expect("window edge target");
            h -= self.couplings().get(e)? * f64::from(spins[i] * spins[j]);
        }
        Ok(h)
    }
}

/// F_Λ with its four log-partition terms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FreeEnergyResult {
    pub value: f64,
    pub log_z_gamma: f64,
    pub log_z_gamma_cut: f64,
    pub log_z_gamma_prime: f64,
    pub log_z_gamma_prime_cut: f64,
    pub method: Method,
    pub beta: f64,
    pub bc_gamma: String,
    pub bc_gamma_prime: String,
    pub margin: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<SeedSpec>,
}

impl FreeEnergyResult {
    /// The value recomputed from the stored terms.
    pub fn recompute(&self) -> f64 {
        (self.log_z_gamma_cut - self.log_z_gamma) - (self.log_z_gamma_prime_cut - self.log_z_gamma_prime)
    }
}

fn resolved(solver: &Solver, spec: &GibbsSpec) -> Method {
    match solver.method {
        Method::Auto => {
            let r = spec.region();
            if r.dim() == 1 || (r.dim() == 2 && r.extents().iter().any(|&e| e <= solver.caps.transfer_max_width)) {
                Method::Transfer
            } else {
                Method::Enumeration
            }
        }
        m => m,
    }
}

/// F_Λ through the ratio-of-partition-functions identity.
pub fn interface_free_energy(pair: &StatePair, solver: &Solver) -> Result<FreeEnergyResult> {
    let cut = zero_edges(pair.couplings(), pair.window_edges())?;
    let g_cut = pair.gamma.with_couplings(cut.clone())?;
    let gp_cut = pair.gamma_prime.with_couplings(cut)?;
    let log_z_gamma = solver.log_z(&pair.gamma)?;
    let log_z_gamma_cut = solver.log_z(&g_cut)?;
    let log_z_gamma_prime = solver.log_z(&pair.gamma_prime)?;
    let log_z_gamma_prime_cut = solver.log_z(&gp_cut)?;
    let mut out = FreeEnergyResult {
        value: 0.0,
        log_z_gamma,
        log_z_gamma_cut,
        log_z_gamma_prime,
        log_z_gamma_prime_cut,
        method: resolved(solver, &pair.gamma),
        beta: pair.beta(),
        bc_gamma: pair.gamma.bc().label(),
        bc_gamma_prime: pair.gamma_prime.bc().label(),
        margin: pair.margin.clone(),
        seed: pair.couplings().provenance().map(|p| p.seed),
    };
    out.value = out.recompute();
    Ok(out)
}

/// F_Λ as log Γ(exp βH_Λ) − log Γ′(exp βH_Λ), each expectation summed over
/// window configurations.
pub fn interface_free_energy_direct(pair: &StatePair, solver: &Solver) -> Result<f64> {
    let beta = pair.beta();
    let log_f = |s: &[i8]| beta * pair.window_energy(s).expect("window couplings checked at construction");
    let a = solver.window_log_expectation(&pair.gamma, &pair.window, log_f)?;
    let b = solver.window_log_expectation(&pair.gamma_prime, &pair.window, log_f)?;
    Ok(a - b)
}

/// log Z_periodic − log Z_antiperiodic on the region itself, the seam
/// crossing `seam_axis`.
pub fn domain_wall_free_energy(
    j: &CouplingConfig,
    region: &Region,
    beta: f64,
    seam_axis: usize,
    solver: &Solver,
) -> Result<f64> {
    if seam_axis >= region.dim() {
        return Err(Error::invalid(format!("seam axis {seam_axis} out of range")));
    }
    let d = region.dim();
    let per = GibbsSpec::new(region, j.clone(), beta, BoundaryCondition::periodic(d))?;
    let anti = GibbsSpec::new(region, j.clone(), beta, BoundaryCondition::antiperiodic(d, seam_axis))?;
    Ok(solver.log_z(&per)? - solver.log_z(&anti)?)
}

/// ∂F_Λ/∂J_e on E(Λ), with the correlations of both states.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Gradient {
    pub edges: Vec<Edge>,
    pub gradient: Vec<f64>,
    pub corr_gamma: Vec<f64>,
    pub corr_gamma_prime: Vec<f64>,
}

impl Gradient {
    pub fn as_map(&self) -> BTreeMap<Edge, f64> {
        self.edges.iter().cloned().zip(self.gradient.iter().copied()).collect()
    }
}

/// ∂F_Λ/∂J_xy = β (s′⟨σ_xσ_y⟩_Γ′ − s⟨σ_xσ_y⟩_Γ), where s, s′ are the signs
/// with which J_xy enters each state (−1 only across an antiperiodic seam).
pub fn free_energy_gradient(pair: &StatePair, solver: &Solver) -> Result<Gradient> {
    let a = solver.solve(&pair.gamma)?;
    let b = solver.solve(&pair.gamma_prime)?;
    let mut out = Gradient {
        edges: Vec::new(),
        gradient: Vec::new(),
        corr_gamma: Vec::new(),
        corr_gamma_prime: Vec::new(),
    };
    for e in &pair.window_edges {
        out.edges.push(e.clone());
        out.gradient.push(b.d_log_z(e)? - a.d_log_z(e)?);
        out.corr_gamma.push(a.correlation(e)?);
        out.corr_gamma_prime.push(b.correlation(e)?);
    }
    Ok(out)
}

/// δ_xy = ⟨σ_xσ_y⟩_Γ − ⟨σ_xσ_y⟩_Γ′ for an edge whose coupling enters both
/// states.
pub fn correlation_difference(pair: &StatePair, edge: &Edge, solver: &Solver) -> Result<f64> {
    pair.gamma.edge_sign(edge)?;
    pair.gamma_prime.edge_sign(edge)?;
    Ok(solver.solve(&pair.gamma)?.correlation(edge)? - solver.solve(&pair.gamma_prime)?.correlation(edge)?)
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::disorder::{sample_couplings, CouplingDistribution, Purpose};
    use crate::lattice::{incident_edges, Site};

    fn couplings(bx: &Region, seed: u64) -> CouplingConfig {
        sample_couplings(
            &CouplingDistribution::default(),
            &Arc::new(incident_edges(bx)),
            SeedSpec::new(seed, 0, Purpose::Couplings),
        )
    }

    fn pair(n: usize, w: usize, seed: u64, beta: f64) -> StatePair {
        let bx = Region::open(&[n, n]).unwrap();
        let m = ((n - w) / 2) as i64;
        let window = Region::window(&[m, m], &[w, w]).unwrap();
        StatePair::from_rules(
            &bx,
            &window,
            couplings(&bx, seed),
            beta,
            BoundaryCondition::free(2),
            BoundaryCondition::periodic(2),
        )
        .unwrap()
    }

    #[test]
    fn zero_cases_are_exact() {
        let s = Solver::default();
        let p = pair(5, 3, 1, 0.0);
        assert_eq!(interface_free_energy(&p, &s).unwrap().value, 0.0);
        let p = pair(5, 3, 1, 1.0);
        let cut = zero_edges(p.couplings(), p.window_edges()).unwrap();
        assert_eq!(interface_free_energy(&p.with_couplings(cut).unwrap(), &s).unwrap().value, 0.0);
        let same = StatePair::new(p.gamma().clone(), p.gamma().clone(), p.window()).unwrap();
        assert_eq!(interface_free_energy(&same, &s).unwrap().value, 0.0);
    }

    #[test]
    fn antisymmetric_under_swap() {
        let s = Solver::default();
        let p = pair(5, 3, 2, 1.0);
        let a = interface_free_energy(&p, &s).unwrap();
        let b = interface_free_energy(&p.swapped(), &s).unwrap();
        assert_eq!(a.value, -b.value);
        assert_eq!(a.value, a.recompute());
    }

    #[test]
    fn ratio_and_direct_routes_agree() {
        let s = Solver::default();
        for seed in 0..3 {
            let p = pair(5, 3, seed, 1.0);
            let ratio = interface_free_energy(&p, &s).unwrap().value;
            let direct = interface_free_energy_direct(&p, &s).unwrap();
            assert!((ratio - direct).abs() < 1e-9, "{ratio} vs {direct}");
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let s = Solver::default();
        let bx = Region::open(&[5, 5]).unwrap();
        let window = Region::window(&[1, 1], &[3, 3]).unwrap();
        let j = couplings(&bx, 4);
        let p = StatePair::from_rules(
            &bx,
            &window,
            j.clone(),
            1.0,
            BoundaryCondition::free(2),
            BoundaryCondition::fixed_uniform(&bx, 1),
        )
        .unwrap();
        let g = free_energy_gradient(&p, &s).unwrap();
        let h = 1e-4;
        for (e, d) in g.edges.iter().zip(&g.gradient) {
            let v = j.get(e).unwrap();
            let fp = interface_free_energy(&p.with_couplings(j.with_value(e, v + h).unwrap()).unwrap(), &s)
                .unwrap()
                .value;
            let fm = interface_free_energy(&p.with_couplings(j.with_value(e, v - h).unwrap()).unwrap(), &s)
                .unwrap()
                .value;
            assert!(((fp - fm) / (2.0 * h) - d).abs() < 1e-5, "{e}");
        }
    }

    #[test]
    fn bound_holds_on_a_few_instances() {
        let s = Solver::default();
        for seed in 0..5 {
            let p = pair(5, 3, seed, 2.0);
            let f = interface_free_energy(&p, &s).unwrap().value;
            let bound: f64 = p.boundary().unwrap().iter().map(|e| p.couplings().get(e).unwrap().abs()).sum();
            assert!(f.abs() <= 4.0 * 2.0 * bound + 1e-9);
        }
    }

    #[test]
    fn locality_outside_the_box() {
        // couplings outside every state's reach do not matter
        let s = Solver::default();
        let p = pair(5, 3, 7, 1.0);
        let f0 = interface_free_energy(&p, &s).unwrap().value;
        let far = Edge::new(Site::new(vec![-1, 2]), 0);
        let j = p.couplings().with_value(&far, 123.0).unwrap();
        let f1 = interface_free_energy(&p.with_couplings(j).unwrap(), &s).unwrap().value;
        assert_eq!(f0, f1);
    }

    #[test]
    fn clamped_neighbour_toy() {
        // spins a=(0), b=(1) in a 1d box of 2 sites, fixed ghosts at both ends.
        // ⟨σ_aσ_b⟩ differs between ghost configurations (+,+) and (+,−).
        let bx = Region::open(&[2]).unwrap();
        let j = couplings(&bx, 3);
        let plus = BoundaryCondition::mixed(vec![AxisBoundary::Fixed { low: vec![1], high: vec![1] }]);
        let mixed = BoundaryCondition::mixed(vec![AxisBoundary::Fixed { low: vec![1], high: vec![-1] }]);
        let window = Region::window(&[0], &[1]).unwrap();
        let gamma = GibbsSpec::new(&bx, j.clone(), 1.0, plus).unwrap();
        let gamma_prime = GibbsSpec::new(&bx, j.clone(), 1.0, mixed).unwrap();
        // the one-site window touches the box boundary, so build the pair check by hand
        assert!(StatePair::new(gamma.clone(), gamma_prime.clone(), &window).is_err());
        let e = Edge::new(Site::new(vec![0]), 0);
        let s = Solver::enumeration();
        let d = s.solve(&gamma).unwrap().correlation(&e).unwrap() - s.solve(&gamma_prime).unwrap().correlation(&e).unwrap();
        // closed form by summing the four states
        let (jl, jab, jr) = (
            j.get(&Edge::new(Site::new(vec![-1]), 0)).unwrap(),
            j.get(&e).unwrap(),
            j.get(&Edge::new(Site::new(vec![1]), 0)).unwrap(),
        );
        let corr = |hr: f64| {
            let mut z = 0.0;
            let mut c = 0.0;
            for a in [1.0, -1.0] {
                for b in [1.0, -1.0] {
                    let w = (jl * a + jab * a * b + jr * b * hr).exp();
                    z += w;
                    c += w * a * b;
                }
            }
            c / z
        };
        assert!((d - (corr(1.0) - corr(-1.0))).abs() < 1e-12);
    }
}
