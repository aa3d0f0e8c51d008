//! Disorder-ensemble statistics of the interface free energy.
//!
//! Every realization `r` draws its couplings from the stream
//! `(seed, r, Couplings)`. Conditional expectations `M(F | couplings on A)`
//! are estimated by nested Monte Carlo: inner sample `o` of realization `r`
//! draws a fresh configuration from `(seed, r, Inner(o))` and copies the
//! held couplings on `A` from the realization. Reusing the same inner draws
//! for every conditioning level of one realization (common random numbers)
//! keeps the noise of martingale increments small.
//!
//! Per-realization work returns a fragment; reducers combine fragments in
//! realization order, so reports do not depend on scheduling.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::disorder::{
    sample_couplings, set_block, translate_couplings, BlockValues, CouplingConfig, CouplingDistribution, Purpose,
    SeedSpec,
};
use crate::error::{Error, Result};
use crate::exactsolve::{
    log_sum_exp, reweight, reweighted_expectation_enum, window_spins, AxisBoundary, BoundaryCondition,
    GibbsSpec, Solver,
};
use crate::interface::{interface_free_energy, FreeEnergyResult, StatePair};
use crate::lattice::{block_partition, incident_edges, interior_edges, Edge, EdgeSet, Region, Site, Translate};
use crate::stats::{bootstrap, fit_line, mean, pick, variance, BootstrapSpec, Estimate};

/// Boundary-condition rule applied to the box of every realization.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BcRule {
    Free,
    Periodic,
    /// Antiperiodic across the wrap edges of `axis`, periodic elsewhere.
    Antiperiodic {
        axis: usize,
    },
    FixedPlus,
    FixedMinus,
    Axes(Vec<AxisBoundary>),
}

impl BcRule {
    pub fn resolve(&self, bx: &Region) -> Result<BoundaryCondition> {
        let d = bx.dim();
        let bc = match self {
            BcRule::Free => BoundaryCondition::free(d),
            BcRule::Periodic => BoundaryCondition::periodic(d),
            BcRule::Antiperiodic { axis } => {
                if *axis >= d {
                    return Err(Error::invalid(format!("antiperiodic axis {axis} out of range")));
                }
                BoundaryCondition::antiperiodic(d, *axis)
            }
            BcRule::FixedPlus => BoundaryCondition::fixed_uniform(bx, 1),
            BcRule::FixedMinus => BoundaryCondition::fixed_uniform(bx, -1),
            BcRule::Axes(axes) => BoundaryCondition::mixed(axes.clone()),
        };
        bc.validate(bx)?;
        Ok(bc)
    }
}

/// Window extents and the margin between window and box on each axis. The
/// box has extent `window + 2·margin` and the window sits at offset `margin`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Geometry {
    pub window: Vec<usize>,
    pub margin: Vec<usize>,
}

impl Geometry {
    pub fn centered(window: &[usize], margin: usize) -> Self {
        Geometry {
            window: window.to_vec(),
            margin: vec![margin; window.len()],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window.is_empty() || self.window.len() != self.margin.len() {
            return Err(Error::invalid("window and margin need the same positive number of axes"));
        }
        if self.window.contains(&0) {
            return Err(Error::invalid("window extents must be positive"));
        }
        Ok(())
    }

    pub fn box_region(&self) -> Result<Region> {
        let ext: Vec<usize> = self.window.iter().zip(&self.margin).map(|(w, m)| w + 2 * m).collect();
        Region::open(&ext)
    }

    pub fn window_region(&self) -> Result<Region> {
        let off: Vec<i64> = self.margin.iter().map(|&m| m as i64).collect();
        Region::window(&off, &self.window)
    }

    pub fn with_window(&self, window: &[usize]) -> Self {
        Geometry {
            window: window.to_vec(),
            margin: self.margin.clone(),
        }
    }
}

/// Finite-volume proxy for the disorder measure: distribution, state pair
/// rule, geometry, β, realization count and master seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleSpec {
    pub geometry: Geometry,
    #[serde(default)]
    pub distribution: CouplingDistribution,
    pub gamma: BcRule,
    pub gamma_prime: BcRule,
    pub beta: f64,
    pub n: usize,
    pub seed: u64,
    #[serde(default)]
    pub solver: Solver,
    #[serde(default)]
    pub bootstrap: BootstrapSpec,
}

impl EnsembleSpec {
    /// Default pair: free vs periodic, gaussian(0,1), centered window with
    /// margin one.
    pub fn free_vs_periodic(window: &[usize], beta: f64, n: usize, seed: u64) -> Self {
        EnsembleSpec {
            geometry: Geometry::centered(window, 1),
            distribution: CouplingDistribution::default(),
            gamma: BcRule::Free,
            gamma_prime: BcRule::Periodic,
            beta,
            n,
            seed,
            solver: Solver::default(),
            bootstrap: BootstrapSpec::default(),
        }
    }
}

/// An [`EnsembleSpec`] with its geometry resolved.
#[derive(Clone, Debug)]
pub struct Ensemble {
    pub spec: EnsembleSpec,
    bx: Region,
    edges: Arc<EdgeSet>,
    bc: BoundaryCondition,
    bc_prime: BoundaryCondition,
    window: Region,
    window_edges: EdgeSet,
    boundary: EdgeSet,
    nu_abs: f64,
}

impl Ensemble {
    pub fn new(spec: EnsembleSpec) -> Result<Self> {
        spec.geometry.validate()?;
        spec.distribution.validate()?;
        if !(spec.beta.is_finite() && spec.beta >= 0.0) {
            return Err(Error::invalid(format!("inverse temperature must be finite and >= 0, got {}", spec.beta)));
        }
        let bx = spec.geometry.box_region()?;
        let edges = Arc::new(incident_edges(&bx));
        let bc = spec.gamma.resolve(&bx)?;
        let bc_prime = spec.gamma_prime.resolve(&bx)?;
        let probe = StatePair::from_rules(
            &bx,
            &spec.geometry.window_region()?,
            CouplingConfig::constant(edges.clone(), 0.0),
            spec.beta,
            bc.clone(),
            bc_prime.clone(),
        )?;
        let window = probe.window().clone();
        let window_edges = probe.window_edges().clone();
        let boundary = probe.boundary()?;
        let nu_abs = spec.distribution.moments().abs_first;
        Ok(Ensemble {
            spec,
            bx,
            edges,
            bc,
            bc_prime,
            window,
            window_edges,
            boundary,
            nu_abs,
        })
    }

    pub fn box_region(&self) -> &Region {
        &self.bx
    }

    pub fn window(&self) -> &Region {
        &self.window
    }

    pub fn window_edges(&self) -> &EdgeSet {
        &self.window_edges
    }

    pub fn boundary(&self) -> &EdgeSet {
        &self.boundary
    }

    pub fn edges(&self) -> &Arc<EdgeSet> {
        &self.edges
    }

    /// ν(|J|).
    pub fn nu_abs(&self) -> f64 {
        self.nu_abs
    }

    pub fn beta(&self) -> f64 {
        self.spec.beta
    }

    pub fn solver(&self) -> &Solver {
        &self.spec.solver
    }

    pub fn seed_spec(&self, r: u64, purpose: Purpose) -> SeedSpec {
        SeedSpec::new(self.spec.seed, r, purpose)
    }

    pub fn couplings(&self, r: u64) -> CouplingConfig {
        self.draw(self.seed_spec(r, Purpose::Couplings))
    }

    pub fn draw(&self, seed: SeedSpec) -> CouplingConfig {
        sample_couplings(&self.spec.distribution, &self.edges, seed)
    }

    pub fn pair(&self, j: CouplingConfig) -> Result<StatePair> {
        StatePair::from_rules(&self.bx, &self.window, j, self.spec.beta, self.bc.clone(), self.bc_prime.clone())
    }

    pub fn free_energy(&self, j: CouplingConfig) -> Result<FreeEnergyResult> {
        interface_free_energy(&self.pair(j)?, &self.spec.solver)
    }

    /// Positions of `set` in the coupling vector.
    pub fn positions(&self, set: &EdgeSet) -> Result<Vec<usize>> {
        set.iter()
            .map(|e| self.edges.position(e).ok_or_else(|| Error::UndeclaredEdge(e.to_string())))
            .collect()
    }

    /// `fresh` with the values at `held_positions` copied from `held`.
    pub fn mix(&self, held: &CouplingConfig, fresh: &CouplingConfig, held_positions: &[usize]) -> CouplingConfig {
        let mut v = fresh.values().to_vec();
        for &p in held_positions {
            v[p] = held.values()[p];
        }
        CouplingConfig::from_values(self.edges.clone(), v).expect("same edge set")
    }

    /// F values of `n_outer` inner samples with `positions` held from `held`.
    pub fn conditional_samples(
        &self,
        held: &CouplingConfig,
        r: u64,
        positions: &[usize],
        n_outer: usize,
        purpose: fn(u64) -> Purpose,
    ) -> Result<Vec<f64>> {
        (0..n_outer as u64)
            .map(|o| {
                let fresh = self.draw(self.seed_spec(r, purpose(o)));
                Ok(self.free_energy(self.mix(held, &fresh, positions))?.value)
            })
            .collect()
    }
}

fn in_realization<T>(r: u64, master: u64, res: Result<T>) -> Result<T> {
    res.map_err(|e| Error::Realization {
        master,
        realization: r,
        source: Box::new(e),
    })
}

/// Run `f` for every realization in parallel; results come back in index
/// order.
pub fn per_realization<T, F>(ens: &Ensemble, indices: &[u64], f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(u64) -> Result<T> + Sync,
{
    indices
        .par_iter()
        .map(|&r| in_realization(r, ens.spec.seed, f(r)))
        .collect()
}

fn all(n: usize) -> Vec<u64> {
    (0..n as u64).collect()
}

/// Variance with bootstrap error, its inputs and flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport {
    pub estimate: f64,
    pub stderr: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub mean: f64,
    pub n: usize,
    pub bootstrap: BootstrapSpec,
    pub components: Vec<Component>,
    pub flags: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub label: String,
    pub estimate: f64,
    pub stderr: f64,
}

fn clamp_nonneg(e: Estimate, label: &str, flags: &mut Vec<String>) -> Estimate {
    if e.estimate < 0.0 {
        flags.push(format!("{label}: negative bias-corrected estimate {} reported as 0", e.estimate));
        Estimate {
            estimate: 0.0,
            ..e
        }
    } else {
        e
    }
}

pub fn variance_report(values: &[f64], boot: &BootstrapSpec, label: u64) -> VarianceReport {
    let e = bootstrap(values.len(), boot, label, |i| variance(&pick(values, i)));
    let mut flags = Vec::new();
    if values.len() < 2 {
        flags.push("degenerate: fewer than two realizations".into());
    } else if e.estimate == 0.0 {
        flags.push("degenerate: zero variance".into());
    }
    VarianceReport {
        estimate: e.estimate,
        stderr: e.stderr,
        ci_low: e.ci_low,
        ci_high: e.ci_high,
        mean: mean(values),
        n: values.len(),
        bootstrap: *boot,
        components: Vec::new(),
        flags,
    }
}

/// F_Λ of realization `r`.
pub fn realization_free_energy(ens: &Ensemble, r: u64) -> Result<FreeEnergyResult> {
    ens.free_energy(ens.couplings(r))
}

/// Sample variance of F_Λ over the realizations.
pub fn ensemble_variance(ens: &Ensemble) -> Result<(Vec<FreeEnergyResult>, VarianceReport)> {
    if ens.spec.n < 2 {
        return Err(Error::invalid("variance needs at least two realizations"));
    }
    let results = per_realization(ens, &all(ens.spec.n), |r| realization_free_energy(ens, r))?;
    let values: Vec<f64> = results.iter().map(|f| f.value).collect();
    let report = variance_report(&values, &ens.spec.bootstrap, 1);
    Ok((results, report))
}

/// Mean of a sample with its standard error.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanEstimate {
    pub mean: f64,
    pub stderr: f64,
}

impl MeanEstimate {
    fn of(x: &[f64]) -> Self {
        MeanEstimate {
            mean: mean(x),
            stderr: crate::stats::stderr_of_mean(x),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionalMean {
    pub direct: MeanEstimate,
    pub reweighted: MeanEstimate,
    pub n_outer: usize,
    /// |direct − reweighted| ≤ 3 · combined stderr
    pub agree: bool,
}

/// M(F_Λ | J_B) by two routes sharing the inner draws of realization `r`.
///
/// Direct: average F over draws whose block couplings are copied from `held`.
/// Reweighted: the block couplings of each draw are set to zero, the window
/// marginals of both states are computed, and the log-expectations of
/// `exp βH_Λ` under the locally reweighted states are formed from those
/// marginals with the explicit reweighting weights `exp(−β H_B)`.
pub fn conditional_mean_given_block(
    ens: &Ensemble,
    held: &CouplingConfig,
    block: &Region,
    r: u64,
    n_outer: usize,
) -> Result<ConditionalMean> {
    if n_outer < 2 {
        return Err(Error::invalid("n_outer must be at least 2"));
    }
    if !ens.window.unwrapped().contains_region(block) {
        return Err(Error::Containment(format!("block {block} is not inside the window")));
    }
    let block_edges = interior_edges(block);
    let pos = ens.positions(&block_edges)?;
    let direct = ens.conditional_samples(held, r, &pos, n_outer, Purpose::Inner)?;

    let beta = ens.beta();
    let window = ens.window.clone();
    let nw = window.site_count();
    let idx = |s: &Site| window.site_index(s).expect("inside window");
    let terms = |set: &EdgeSet, j: &CouplingConfig| -> Result<Vec<(usize, usize, f64)>> {
        set.iter()
            .map(|e| {
                let t = window.edge_target(e).expect("window edge");
                Ok((idx(&e.origin), idx(&t), j.get(e)?))
            })
            .collect()
    };
    let energy = |t: &[(usize, usize, f64)], s: &[i8]| -> f64 {
        -t.iter().map(|&(a, b, k)| k * f64::from(s[a] * s[b])).sum::<f64>()
    };
    let reweighted = (0..n_outer as u64)
        .map(|o| -> Result<f64> {
            let fresh = ens.draw(ens.seed_spec(r, Purpose::Inner(o)));
            let full = ens.mix(held, &fresh, &pos);
            let zero = set_block(&full, block, &BlockValues::Zero)?;
            let pair = ens.pair(zero)?;
            let h_window = terms(ens.window_edges(), &full)?;
            let h_block = terms(&block_edges, held)?;
            let mut out = 0.0;
            for (spec, sign) in [(pair.gamma(), 1.0), (pair.gamma_prime(), -1.0)] {
                let lp = ens.solver().window_log_marginal(spec, &window)?;
                let mut num = Vec::with_capacity(lp.len());
                let mut den = Vec::with_capacity(lp.len());
                for (c, l) in lp.iter().enumerate() {
                    let s = window_spins(c, nw);
                    let hb = energy(&h_block, &s);
                    num.push(l + beta * energy(&h_window, &s) - beta * hb);
                    den.push(l - beta * hb);
                }
                out += sign * (log_sum_exp(&num) - log_sum_exp(&den));
            }
            Ok(out)
        })
        .collect::<Result<Vec<f64>>>()?;
    let direct = MeanEstimate::of(&direct);
    let reweighted = MeanEstimate::of(&reweighted);
    let sigma = (direct.stderr.powi(2) + reweighted.stderr.powi(2)).sqrt();
    let agree = (direct.mean - reweighted.mean).abs() <= 3.0 * sigma + 1e-12;
    Ok(ConditionalMean {
        direct,
        reweighted,
        n_outer,
        agree,
    })
}

/// Successive conditional expectations Y_0…Y_N with increments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MartingaleTrace {
    pub y: Vec<f64>,
    pub delta: Vec<f64>,
    /// standard error of each increment estimate
    pub delta_stderr: Vec<f64>,
    /// inner-sample noise variance of each increment estimate
    pub noise: Vec<f64>,
}

impl MartingaleTrace {
    /// `levels[k][o]`: F at conditioning level k for inner sample o.
    pub fn from_levels(levels: &[Vec<f64>]) -> Self {
        let y: Vec<f64> = levels.iter().map(|l| mean(l)).collect();
        let mut delta = Vec::new();
        let mut delta_stderr = Vec::new();
        let mut noise = Vec::new();
        for k in 1..levels.len() {
            delta.push(y[k] - y[k - 1]);
            let d: Vec<f64> = levels[k].iter().zip(&levels[k - 1]).map(|(a, b)| a - b).collect();
            let nv = variance(&d) / d.len() as f64;
            noise.push(nv);
            delta_stderr.push(nv.sqrt());
        }
        MartingaleTrace {
            y,
            delta,
            delta_stderr,
            noise,
        }
    }

    /// |Σ Δ_k − (Y_N − Y_0)|; zero up to floating-point rounding.
    pub fn telescoping_error(&self) -> f64 {
        let s: f64 = self.delta.iter().sum();
        match (self.y.first(), self.y.last()) {
            (Some(a), Some(b)) => (s - (b - a)).abs(),
            _ => 0.0,
        }
    }

    /// Rounding allowance for [`Self::telescoping_error`].
    pub fn telescoping_tolerance(&self) -> f64 {
        let scale: f64 = self.y.iter().map(|v| v.abs()).sum::<f64>();
        4.0 * f64::EPSILON * scale * (self.delta.len() as f64 + 1.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockFragment {
    pub realization: u64,
    pub f: f64,
    pub trace: MartingaleTrace,
    /// estimates of M(F | J_{B_k})
    pub block_means: Vec<f64>,
    pub block_noise: Vec<f64>,
}

fn block_positions(ens: &Ensemble, side: usize) -> Result<Vec<Vec<usize>>> {
    let part = block_partition(&ens.window.unwrapped(), side)?;
    part.blocks.iter().map(|b| ens.positions(&interior_edges(b))).collect()
}

pub fn block_fragment(ens: &Ensemble, blocks: &[Vec<usize>], r: u64, n_outer: usize) -> Result<BlockFragment> {
    let j = ens.couplings(r);
    let f = ens.free_energy(j.clone())?.value;
    let fresh: Vec<CouplingConfig> = (0..n_outer as u64)
        .map(|o| ens.draw(ens.seed_spec(r, Purpose::Inner(o))))
        .collect();
    let eval = |pos: &[usize]| -> Result<Vec<f64>> {
        fresh.iter().map(|fr| Ok(ens.free_energy(ens.mix(&j, fr, pos))?.value)).collect()
    };
    let mut levels = Vec::with_capacity(blocks.len() + 1);
    let mut held: Vec<usize> = Vec::new();
    levels.push(eval(&held)?);
    for b in blocks {
        held.extend_from_slice(b);
        levels.push(eval(&held)?);
    }
    let mut block_means = Vec::with_capacity(blocks.len());
    let mut block_noise = Vec::with_capacity(blocks.len());
    for (k, b) in blocks.iter().enumerate() {
        let s = if k == 0 { levels[1].clone() } else { eval(b)? };
        block_means.push(mean(&s));
        block_noise.push(variance(&s) / s.len() as f64);
    }
    Ok(BlockFragment {
        realization: r,
        f,
        trace: MartingaleTrace::from_levels(&levels),
        block_means,
        block_noise,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockMartingaleReport {
    pub blocks: usize,
    pub n: usize,
    pub n_outer: usize,
    pub var_f: VarianceReport,
    /// bias-corrected Var(Δ_k), k = 1…N
    pub increments: Vec<Estimate>,
    pub sum_increments: Estimate,
    /// bias-corrected Var(M(F | J_{B_k}))
    pub per_block: Vec<Estimate>,
    /// combined standard error of the inequality check
    pub sigma: f64,
    /// Σ_k Var(Δ_k) ≤ Var(F) + 3σ
    pub inequality_holds: bool,
    pub max_telescoping_error: f64,
    pub telescoping_exact: bool,
    pub flags: Vec<String>,
}

/// Bias-corrected variance across realizations of an estimate carrying
/// inner-sample noise.
fn corrected_variance(values: &[f64], noise: &[f64], idx: &[usize]) -> f64 {
    variance(&pick(values, idx)) - mean(&pick(noise, idx))
}

pub fn reduce_blocks(fragments: &[BlockFragment], n_outer: usize, boot: &BootstrapSpec) -> BlockMartingaleReport {
    let n = fragments.len();
    let nb = fragments.first().map_or(0, |f| f.block_means.len());
    let f: Vec<f64> = fragments.iter().map(|x| x.f).collect();
    let var_f = variance_report(&f, boot, 10);
    let mut flags = Vec::new();
    let col = |g: &dyn Fn(&BlockFragment) -> f64| -> Vec<f64> { fragments.iter().map(g).collect() };
    let deltas: Vec<Vec<f64>> = (0..nb).map(|k| col(&|x| x.trace.delta[k])).collect();
    let dnoise: Vec<Vec<f64>> = (0..nb).map(|k| col(&|x| x.trace.noise[k])).collect();
    let increments: Vec<Estimate> = (0..nb)
        .map(|k| {
            let e = bootstrap(n, boot, 100 + k as u64, |i| corrected_variance(&deltas[k], &dnoise[k], i));
            clamp_nonneg(e, &format!("increment {}", k + 1), &mut flags)
        })
        .collect();
    let sum_raw = bootstrap(n, boot, 11, |i| {
        (0..nb)
            .map(|k| corrected_variance(&deltas[k], &dnoise[k], i).max(0.0))
            .sum()
    });
    let per_block: Vec<Estimate> = (0..nb)
        .map(|k| {
            let m = col(&|x| x.block_means[k]);
            let z = col(&|x| x.block_noise[k]);
            let e = bootstrap(n, boot, 200 + k as u64, |i| corrected_variance(&m, &z, i));
            clamp_nonneg(e, &format!("block {}", k + 1), &mut flags)
        })
        .collect();
    let sigma = (sum_raw.stderr.powi(2) + var_f.stderr.powi(2)).sqrt();
    let inequality_holds = sum_raw.estimate <= var_f.estimate + 3.0 * sigma;
    let max_telescoping_error = fragments.iter().map(|x| x.trace.telescoping_error()).fold(0.0, f64::max);
    let telescoping_exact = fragments
        .iter()
        .all(|x| x.trace.telescoping_error() <= x.trace.telescoping_tolerance());
    BlockMartingaleReport {
        blocks: nb,
        n,
        n_outer,
        var_f,
        increments,
        sum_increments: sum_raw,
        per_block,
        sigma,
        inequality_holds,
        max_telescoping_error,
        telescoping_exact,
        flags,
    }
}

/// Block martingale decomposition of Var F over a partition of the window
/// into cubes of side `block_side`.
pub fn martingale_block_decomposition(
    ens: &Ensemble,
    block_side: usize,
    n_outer: usize,
) -> Result<(Vec<BlockFragment>, BlockMartingaleReport)> {
    if n_outer < 2 {
        return Err(Error::invalid("n_outer must be at least 2"));
    }
    let blocks = block_positions(ens, block_side)?;
    let frags = per_realization(ens, &all(ens.spec.n), |r| block_fragment(ens, &blocks, r, n_outer))?;
    let report = reduce_blocks(&frags, n_outer, &ens.spec.bootstrap);
    Ok((frags, report))
}

pub fn blocks_for(ens: &Ensemble, block_side: usize) -> Result<Vec<Vec<usize>>> {
    block_positions(ens, block_side)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TelescopeCheck {
    pub sum_delta: f64,
    pub direct_difference: f64,
    pub stderr: f64,
    pub holds: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeTrace {
    pub realization: u64,
    pub edges: Vec<Edge>,
    pub couplings: Vec<f64>,
    pub trace: MartingaleTrace,
    /// 2β(|J_{e_k}| + ν(|J|))
    pub bound: Vec<f64>,
    /// indices k with |ΔY_k| > bound_k + 3 · stderr_k
    pub violations: Vec<usize>,
    pub telescoping: TelescopeCheck,
}

/// Y_{Λ,k} = M(F | couplings of e_1…e_k) along the edge order of E(Λ).
pub fn edge_martingale_trace(ens: &Ensemble, r: u64, n_outer: usize) -> Result<EdgeTrace> {
    if n_outer < 2 {
        return Err(Error::invalid("n_outer must be at least 2"));
    }
    let j = ens.couplings(r);
    let pos = ens.positions(ens.window_edges())?;
    let fresh: Vec<CouplingConfig> = (0..n_outer as u64)
        .map(|o| ens.draw(ens.seed_spec(r, Purpose::Inner(o))))
        .collect();
    let mut levels = Vec::with_capacity(pos.len() + 1);
    for k in 0..=pos.len() {
        levels.push(
            fresh
                .iter()
                .map(|fr| Ok(ens.free_energy(ens.mix(&j, fr, &pos[..k]))?.value))
                .collect::<Result<Vec<f64>>>()?,
        );
    }
    let trace = MartingaleTrace::from_levels(&levels);
    let beta = ens.beta();
    let couplings: Vec<f64> = pos.iter().map(|&p| j.values()[p]).collect();
    let bound: Vec<f64> = couplings.iter().map(|v| 2.0 * beta * (v.abs() + ens.nu_abs())).collect();
    let violations = (0..pos.len())
        .filter(|&k| trace.delta[k].abs() > bound[k] + 3.0 * trace.delta_stderr[k])
        .collect();

    // both ends of the trace re-estimated from independent draws
    let top = ens.conditional_samples(&j, r, &pos, n_outer, Purpose::Independent)?;
    let bottom: Vec<f64> = (0..n_outer as u64)
        .map(|o| Ok(ens.free_energy(ens.draw(ens.seed_spec(r, Purpose::Draw(1 << 40 | o))))?.value))
        .collect::<Result<_>>()?;
    let sum_delta: f64 = trace.delta.iter().sum();
    let direct_difference = mean(&top) - mean(&bottom);
    let se = |x: &[f64]| variance(x) / x.len() as f64;
    let stderr = (se(&levels[0]) + se(&levels[pos.len()]) + se(&top) + se(&bottom)).sqrt();
    let holds = (sum_delta - direct_difference).abs() <= 3.0 * stderr + 1e-12;
    Ok(EdgeTrace {
        realization: r,
        edges: ens.window_edges().iter().cloned().collect(),
        couplings,
        trace,
        bound,
        violations,
        telescoping: TelescopeCheck {
            sum_delta,
            direct_difference,
            stderr,
            holds,
        },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeMartingaleReport {
    pub n: usize,
    pub n_outer: usize,
    pub edges: usize,
    pub violations: usize,
    /// max over k and realizations of |ΔY_k| / bound_k
    pub max_ratio: f64,
    pub telescoping_failures: usize,
    pub max_telescoping_error: f64,
    pub telescoping_exact: bool,
}

pub fn reduce_edge_traces(traces: &[EdgeTrace], n_outer: usize) -> EdgeMartingaleReport {
    let mut max_ratio: f64 = 0.0;
    for t in traces {
        for (d, b) in t.trace.delta.iter().zip(&t.bound) {
            if *b > 0.0 {
                max_ratio = max_ratio.max(d.abs() / b);
            }
        }
    }
    EdgeMartingaleReport {
        n: traces.len(),
        n_outer,
        edges: traces.first().map_or(0, |t| t.edges.len()),
        violations: traces.iter().map(|t| t.violations.len()).sum(),
        max_ratio,
        telescoping_failures: traces.iter().filter(|t| !t.telescoping.holds).count(),
        max_telescoping_error: traces.iter().map(|t| t.trace.telescoping_error()).fold(0.0, f64::max),
        telescoping_exact: traces
            .iter()
            .all(|t| t.trace.telescoping_error() <= t.trace.telescoping_tolerance()),
    }
}

pub fn edge_martingale(ens: &Ensemble, n_outer: usize) -> Result<(Vec<EdgeTrace>, EdgeMartingaleReport)> {
    let traces = per_realization(ens, &all(ens.spec.n), |r| edge_martingale_trace(ens, r, n_outer))?;
    let report = reduce_edge_traces(&traces, n_outer);
    Ok((traces, report))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LindebergFragment {
    pub realization: u64,
    /// Σ_k ΔY_k² 1{|ΔY_k| > δ√|E(Λ)|}
    pub tail: f64,
    /// (1/|E(Λ)|) Σ_k E[ΔY_k² | couplings before e_k]
    pub conditional: f64,
}

pub fn lindeberg_fragment(ens: &Ensemble, r: u64, delta: f64, n_outer: usize, n_cond: usize) -> Result<LindebergFragment> {
    let j = ens.couplings(r);
    let pos = ens.positions(ens.window_edges())?;
    let ne = pos.len();
    let fresh: Vec<CouplingConfig> = (0..n_outer as u64)
        .map(|o| ens.draw(ens.seed_spec(r, Purpose::Inner(o))))
        .collect();
    let level = |cfg: &CouplingConfig, k: usize| -> Result<Vec<f64>> {
        fresh
            .iter()
            .map(|fr| Ok(ens.free_energy(ens.mix(cfg, fr, &pos[..k]))?.value))
            .collect()
    };
    let threshold = delta * (ne as f64).sqrt();
    let mut tail = 0.0;
    let mut conditional = 0.0;
    let mut prev = level(&j, 0)?;
    for k in 1..=ne {
        let cur = level(&j, k)?;
        let d = mean(&cur) - mean(&prev);
        if d.abs() > threshold {
            tail += d * d;
        }
        // E[ΔY_k² | J_{≺e_k}]: redraw J_{e_k} n_cond times
        let mut rng = ens.seed_spec(r, Purpose::Draw(k as u64)).rng();
        let mut acc = 0.0;
        for _ in 0..n_cond {
            let y = ens.spec.distribution.sample(&mut rng);
            let mut v = j.values().to_vec();
            v[pos[k - 1]] = y;
            let jy = CouplingConfig::from_values(ens.edges.clone(), v)?;
            let lk = level(&jy, k)?;
            let diffs: Vec<f64> = lk.iter().zip(&prev).map(|(a, b)| a - b).collect();
            let m = mean(&diffs);
            acc += m * m - variance(&diffs) / diffs.len() as f64;
        }
        conditional += acc / n_cond as f64;
        prev = cur;
    }
    Ok(LindebergFragment {
        realization: r,
        tail,
        conditional: conditional / ne as f64,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LindebergRow {
    pub window: Vec<usize>,
    pub edges: usize,
    pub tail: Estimate,
    /// tail divided by |E(Λ)|
    pub tail_normalized: f64,
    pub conditional_mean: f64,
    /// standard deviation of the per-realization conditional average
    pub conditional_dispersion: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LindebergReport {
    pub delta: f64,
    pub n: usize,
    pub n_outer: usize,
    pub n_cond: usize,
    pub rows: Vec<LindebergRow>,
    /// normalized tail term non-increasing across the listed sizes
    pub tail_decreasing: bool,
}

pub fn reduce_lindeberg(
    windows: &[Vec<usize>],
    frags: &[Vec<LindebergFragment>],
    edges: &[usize],
    delta: f64,
    n_outer: usize,
    n_cond: usize,
    boot: &BootstrapSpec,
) -> LindebergReport {
    let rows: Vec<LindebergRow> = windows
        .iter()
        .zip(frags)
        .zip(edges)
        .enumerate()
        .map(|(i, ((w, fr), &ne))| {
            let tails: Vec<f64> = fr.iter().map(|f| f.tail).collect();
            let conds: Vec<f64> = fr.iter().map(|f| f.conditional).collect();
            let tail = bootstrap(tails.len(), boot, 300 + i as u64, |ix| mean(&pick(&tails, ix)));
            LindebergRow {
                window: w.clone(),
                edges: ne,
                tail_normalized: tail.estimate / ne as f64,
                tail,
                conditional_mean: mean(&conds),
                conditional_dispersion: variance(&conds).sqrt(),
            }
        })
        .collect();
    let tail_decreasing = rows.windows(2).all(|p| p[1].tail_normalized <= p[0].tail_normalized);
    LindebergReport {
        delta,
        n: frags.first().map_or(0, |f| f.len()),
        n_outer,
        n_cond,
        rows,
        tail_decreasing,
    }
}

/// Lindeberg-type diagnostics of the edge martingale for several windows.
pub fn lindeberg_diagnostic(
    template: &EnsembleSpec,
    windows: &[Vec<usize>],
    delta: f64,
    n_outer: usize,
    n_cond: usize,
) -> Result<LindebergReport> {
    if windows.len() < 2 {
        return Err(Error::invalid("at least two window sizes are needed"));
    }
    if n_outer < 2 || n_cond < 1 {
        return Err(Error::invalid("n_outer must be >= 2 and n_cond >= 1"));
    }
    let mut frags = Vec::new();
    let mut edges = Vec::new();
    for w in windows {
        let mut spec = template.clone();
        spec.geometry = spec.geometry.with_window(w);
        let ens = Ensemble::new(spec)?;
        edges.push(ens.window_edges().len());
        frags.push(per_realization(&ens, &all(ens.spec.n), |r| {
            lindeberg_fragment(&ens, r, delta, n_outer, n_cond)
        })?);
    }
    Ok(reduce_lindeberg(windows, &frags, &edges, delta, n_outer, n_cond, &template.bootstrap))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LemmaCheck {
    pub observable: String,
    /// log Γ(f) − log G_Λ(f)
    pub log_ratio_gamma: f64,
    pub log_ratio_gamma_prime: f64,
    /// 2β Σ_{∂Λ} |J|
    pub limit: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub f: f64,
    /// 4β Σ_{∂Λ} |J|
    pub bound: f64,
    pub slack: f64,
    pub lemma: Vec<LemmaCheck>,
    /// min over observables and states of limit − |log ratio|
    pub lemma_slack: f64,
}

pub const BOUND_TOLERANCE: f64 = 1e-9;

fn lemma_observables(pair: &StatePair) -> Result<Vec<(String, Vec<f64>)>> {
    let nw = pair.window().site_count();
    let beta = pair.beta();
    let configs: Vec<Vec<i8>> = (0..1usize << nw).map(|c| window_spins(c, nw)).collect();
    let h: Vec<f64> = configs.iter().map(|s| pair.window_energy(s)).collect::<Result<_>>()?;
    Ok(vec![
        ("exp(beta*H)".into(), h.iter().map(|v| beta * v).collect()),
        ("exp(-beta*H)".into(), h.iter().map(|v| -beta * v).collect()),
        (
            "1+s_first*s_last".into(),
            configs
                .iter()
                .map(|s| (1.0 + f64::from(s[0] * s[nw - 1])).ln())
                .collect(),
        ),
        (
            "exp(sum h_i s_i)".into(),
            configs
                .iter()
                .map(|s| {
                    s.iter()
                        .enumerate()
                        .map(|(i, &v)| if i % 2 == 0 { 0.5 } else { -0.3 } * f64::from(v))
                        .sum()
                })
                .collect(),
        ),
    ])
}

/// |F_Λ| ≤ 4β Σ_{∂Λ}|J| and, when `lemma` is set, the ratio bound between
/// each state and the window's own Gibbs measure on positive observables.
/// A violation beyond [`BOUND_TOLERANCE`] is an error carrying the instance.
pub fn bound_check(pair: &StatePair, result: &FreeEnergyResult, solver: &Solver, lemma: bool) -> Result<BoundReport> {
    let boundary = pair.boundary()?;
    let mut s = 0.0;
    for e in &boundary {
        s += pair.couplings().get(e)?.abs();
    }
    let beta = pair.beta();
    let bound = 4.0 * beta * s;
    let slack = bound - result.value.abs();
    let dump = |what: &str| -> Error {
        let values: Vec<(String, f64)> = pair.couplings().iter().map(|(e, v)| (e.to_string(), v)).collect();
        Error::BoundViolation(format!(
            "{what}; result {}; couplings {}",
            serde_json::to_string(result).unwrap_or_default(),
            serde_json::to_string(&values).unwrap_or_default()
        ))
    };
    if slack < -BOUND_TOLERANCE {
        return Err(dump(&format!("|F| = {} exceeds {bound}", result.value.abs())));
    }
    let mut checks = Vec::new();
    let mut lemma_slack = f64::INFINITY;
    if lemma {
        if pair.margin().contains(&0) {
            return Err(Error::Unsupported("the ratio bound needs a margin on every axis".into()));
        }
        let limit = 2.0 * beta * s;
        // G_Λ: the window alone, no boundary terms
        let nw = pair.window().site_count();
        let log_g: Vec<f64> = (0..1usize << nw)
            .map(|c| pair.window_energy(&window_spins(c, nw)).map(|h| -beta * h))
            .collect::<Result<_>>()?;
        let lz_g = log_sum_exp(&log_g);
        let lp_a = solver.window_log_marginal(pair.gamma(), pair.window())?;
        let lp_b = solver.window_log_marginal(pair.gamma_prime(), pair.window())?;
        for (name, log_f) in lemma_observables(pair)? {
            let ex = |lp: &[f64]| -> f64 {
                let v: Vec<f64> = lp.iter().zip(&log_f).map(|(a, b)| a + b).collect();
                log_sum_exp(&v)
            };
            let g: Vec<f64> = log_g.iter().zip(&log_f).map(|(a, b)| a - lz_g + b).collect();
            let lg = log_sum_exp(&g);
            let ra = ex(&lp_a) - lg;
            let rb = ex(&lp_b) - lg;
            let sl = limit - ra.abs().max(rb.abs());
            if sl < -BOUND_TOLERANCE {
                return Err(dump(&format!("ratio bound violated for {name}: {ra}, {rb} vs {limit}")));
            }
            lemma_slack = lemma_slack.min(sl);
            checks.push(LemmaCheck {
                observable: name,
                log_ratio_gamma: ra,
                log_ratio_gamma_prime: rb,
                limit,
            });
        }
    }
    Ok(BoundReport {
        f: result.value,
        bound,
        slack,
        lemma: checks,
        lemma_slack,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundFragment {
    pub realization: u64,
    pub beta: f64,
    pub report: BoundReport,
}

pub fn bound_fragment(ens: &Ensemble, beta: f64, r: u64, lemma: bool) -> Result<BoundFragment> {
    let pair = ens.pair(ens.couplings(r))?.with_beta(beta)?;
    let res = interface_free_energy(&pair, ens.solver())?;
    Ok(BoundFragment {
        realization: r,
        beta,
        report: bound_check(&pair, &res, ens.solver(), lemma)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundsSummary {
    pub instances: usize,
    pub violations: usize,
    pub min_slack: f64,
    pub min_lemma_slack: f64,
    pub max_ratio: f64,
}

pub fn reduce_bounds(frags: &[BoundFragment]) -> BoundsSummary {
    BoundsSummary {
        instances: frags.len(),
        violations: frags.iter().filter(|f| f.report.slack < -BOUND_TOLERANCE).count(),
        min_slack: frags.iter().map(|f| f.report.slack).fold(f64::INFINITY, f64::min),
        min_lemma_slack: frags.iter().map(|f| f.report.lemma_slack).fold(f64::INFINITY, f64::min),
        max_ratio: frags
            .iter()
            .filter(|f| f.report.bound > 0.0)
            .map(|f| f.report.f.abs() / f.report.bound)
            .fold(0.0, f64::max),
    }
}

/// Bound checks for every realization at each β. Realization indices are
/// shared across β values.
pub fn bounds_run(ens: &Ensemble, betas: &[f64], lemma: bool) -> Result<(Vec<BoundFragment>, BoundsSummary)> {
    let mut frags = Vec::new();
    for &b in betas {
        frags.extend(per_realization(ens, &all(ens.spec.n), |r| bound_fragment(ens, b, r, lemma))?);
    }
    let s = reduce_bounds(&frags);
    Ok((frags, s))
}

/// Estimate of M(F | J_Λ) for realization `r`.
pub fn window_conditional(ens: &Ensemble, r: u64, n_outer: usize) -> Result<f64> {
    let j = ens.couplings(r);
    let pos = ens.positions(ens.window_edges())?;
    Ok(mean(&ens.conditional_samples(&j, r, &pos, n_outer, Purpose::Inner)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MgfRow {
    pub t: f64,
    pub empirical: Estimate,
    /// exp(4βt ν(|J|))
    pub bound: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MgfReport {
    pub n: usize,
    pub n_outer: usize,
    pub nu_abs: f64,
    pub boundary_edges: usize,
    pub rows: Vec<MgfRow>,
    pub note: String,
}

pub const MGF_NOTE: &str = "Bound taken as exp(4 beta t nu(|J|)). The factor nu(|J|) is kept, not normalized to 1; \
     for unit-scale couplings the two forms differ.";

pub fn reduce_mgf(ens: &Ensemble, values: &[f64], ts: &[f64], n_outer: usize) -> MgfReport {
    let nb = ens.boundary().len() as f64;
    let rows = ts
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let x: Vec<f64> = values.iter().map(|m| (t * m / nb).exp()).collect();
            let empirical = bootstrap(x.len(), &ens.spec.bootstrap, 400 + i as u64, |ix| mean(&pick(&x, ix)));
            let bound = (4.0 * ens.beta() * t * ens.nu_abs()).exp();
            let rel = if empirical.estimate > 0.0 {
                empirical.stderr / empirical.estimate
            } else {
                0.0
            };
            MgfRow {
                t,
                pass: empirical.estimate <= bound * (1.0 + 3.0 * rel),
                empirical,
                bound,
            }
        })
        .collect();
    MgfReport {
        n: values.len(),
        n_outer,
        nu_abs: ens.nu_abs(),
        boundary_edges: ens.boundary().len(),
        rows,
        note: MGF_NOTE.to_string(),
    }
}

/// Empirical ν(exp(t M(F|J_Λ)/|∂Λ|)) against exp(4βt ν(|J|)).
pub fn mgf_check(ens: &Ensemble, ts: &[f64], n_outer: usize) -> Result<(Vec<f64>, MgfReport)> {
    let values = per_realization(ens, &all(ens.spec.n), |r| window_conditional(ens, r, n_outer))?;
    let report = reduce_mgf(ens, &values, ts, n_outer);
    Ok((values, report))
}

/// Correlation differences δ_e = Γ(σσ) − Γ′(σσ) over E(Λ′) for one
/// realization.
pub fn probe_fragment(ens: &Ensemble, r: u64) -> Result<Vec<f64>> {
    let pair = ens.pair(ens.couplings(r))?;
    let a = ens.solver().solve(pair.gamma())?;
    let b = ens.solver().solve(pair.gamma_prime())?;
    interior_edges(ens.box_region())
        .iter()
        .map(|e| Ok(a.correlation(e)? - b.correlation(e)?))
        .collect()
}

pub const NOISE_FLOOR: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub epsilon: f64,
    /// fraction of edges with |δ| > ε, averaged over realizations
    pub density: Estimate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub n: usize,
    pub edges: Vec<Edge>,
    pub rows: Vec<ProbeRow>,
    pub edge_mean: Vec<f64>,
    pub edge_stderr: Vec<f64>,
    /// per edge: fraction of realizations with |δ| > noise floor
    pub nonzero_fraction: Vec<f64>,
    pub central_edge: Edge,
    pub central_nonzero_fraction: f64,
    pub noise_floor: f64,
}

pub fn reduce_probe(ens: &Ensemble, deltas: &[Vec<f64>], eps: &[f64]) -> ProbeReport {
    let edges: Vec<Edge> = interior_edges(ens.box_region()).iter().cloned().collect();
    let ne = edges.len();
    let n = deltas.len();
    let rows = eps
        .iter()
        .enumerate()
        .map(|(i, &e)| {
            let dens: Vec<f64> = deltas
                .iter()
                .map(|d| d.iter().filter(|v| v.abs() > e).count() as f64 / ne as f64)
                .collect();
            ProbeRow {
                epsilon: e,
                density: bootstrap(n, &ens.spec.bootstrap, 500 + i as u64, |ix| mean(&pick(&dens, ix))),
            }
        })
        .collect();
    let column = |k: usize| -> Vec<f64> { deltas.iter().map(|d| d[k]).collect() };
    let edge_mean = (0..ne).map(|k| mean(&column(k))).collect();
    let edge_stderr = (0..ne).map(|k| crate::stats::stderr_of_mean(&column(k))).collect();
    let nonzero_fraction: Vec<f64> = (0..ne)
        .map(|k| column(k).iter().filter(|v| v.abs() > NOISE_FLOOR).count() as f64 / n as f64)
        .collect();
    let center = Site::new(ens.box_region().extents().iter().map(|&e| (e / 2) as i64).collect::<Vec<_>>());
    let central_edge = edges
        .iter()
        .find(|e| e.origin == center)
        .cloned()
        .unwrap_or_else(|| edges[0].clone());
    let ci = edges.iter().position(|e| *e == central_edge).unwrap_or(0);
    ProbeReport {
        n,
        central_nonzero_fraction: nonzero_fraction[ci],
        edges,
        rows,
        edge_mean,
        edge_stderr,
        nonzero_fraction,
        central_edge,
        noise_floor: NOISE_FLOOR,
    }
}

/// Default ε grid; 0.01 is the headline value.
pub const EPSILON_GRID: [f64; 5] = [0.001, 0.003, 0.01, 0.03, 0.1];

pub fn incongruence_probe(ens: &Ensemble, eps: &[f64]) -> Result<(Vec<Vec<f64>>, ProbeReport)> {
    if eps.iter().any(|&e| !(e > 0.0)) {
        return Err(Error::invalid("epsilon must be positive"));
    }
    let deltas = per_realization(ens, &all(ens.spec.n), |r| probe_fragment(ens, r))?;
    let report = reduce_probe(ens, &deltas, eps);
    Ok((deltas, report))
}

/// Outer groups of conditioned samples plus independent unconditioned ones.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NestedSamples {
    pub groups: Vec<Vec<f64>>,
    pub independent: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityReport {
    pub var_x: Estimate,
    pub mean_conditional_variance: Estimate,
    pub variance_of_conditional_mean: Estimate,
    /// Var X − E[Var(X|G)] − Var(E[X|G])
    pub residual: f64,
    pub sigma: f64,
    pub total_variance_holds: bool,
    /// ½ E[(X − X′)²] over disjoint pairs of independent samples
    pub symmetric_variance: Estimate,
    pub symmetric_holds: bool,
}

pub fn variance_identity_checks(samples: &NestedSamples, boot: &BootstrapSpec) -> IdentityReport {
    let x = &samples.independent;
    let var_x = bootstrap(x.len(), boot, 600, |i| variance(&pick(x, i)));
    let cv: Vec<f64> = samples.groups.iter().map(|g| variance(g)).collect();
    let cm: Vec<f64> = samples.groups.iter().map(|g| mean(g)).collect();
    let m: Vec<f64> = samples.groups.iter().map(|g| g.len() as f64).collect();
    let ng = samples.groups.len();
    let mean_conditional_variance = bootstrap(ng, boot, 601, |i| mean(&pick(&cv, i)));
    let variance_of_conditional_mean = bootstrap(ng, boot, 602, |i| {
        let noise: Vec<f64> = i.iter().map(|&k| cv[k] / m[k]).collect();
        variance(&pick(&cm, i)) - mean(&noise)
    });
    let residual = var_x.estimate - mean_conditional_variance.estimate - variance_of_conditional_mean.estimate;
    let sigma = (var_x.stderr.powi(2)
        + mean_conditional_variance.stderr.powi(2)
        + variance_of_conditional_mean.stderr.powi(2))
    .sqrt();
    let pairs = x.len() / 2;
    let sq: Vec<f64> = (0..pairs).map(|p| 0.5 * (x[2 * p] - x[2 * p + 1]).powi(2)).collect();
    let symmetric_variance = bootstrap(pairs, boot, 603, |i| mean(&pick(&sq, i)));
    let sym_sigma = (var_x.stderr.powi(2) + symmetric_variance.stderr.powi(2)).sqrt();
    IdentityReport {
        total_variance_holds: residual.abs() <= 3.0 * sigma,
        symmetric_holds: (symmetric_variance.estimate - var_x.estimate).abs() <= 3.0 * sym_sigma,
        var_x,
        mean_conditional_variance,
        variance_of_conditional_mean,
        residual,
        sigma,
        symmetric_variance,
    }
}

/// X = F_Λ, G = couplings of `block`: group r holds the block couplings of
/// realization r and redraws the rest `n_inner` times; the independent
/// samples are F of realizations n, n+1, … (disjoint from the groups).
pub fn block_conditioned_samples(ens: &Ensemble, block: &Region, n_inner: usize) -> Result<NestedSamples> {
    let pos = ens.positions(&interior_edges(block))?;
    let n = ens.spec.n as u64;
    let groups = per_realization(ens, &all(ens.spec.n), |r| {
        ens.conditional_samples(&ens.couplings(r), r, &pos, n_inner, Purpose::Inner)
    })?;
    let ind: Vec<u64> = (n..2 * n).collect();
    let independent = per_realization(ens, &ind, |r| Ok(realization_free_energy(ens, r)?.value))?;
    Ok(NestedSamples { groups, independent })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub window: Vec<usize>,
    pub sites: usize,
    pub boundary: usize,
    pub variance: Estimate,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fit {
    pub exponent: f64,
    pub intercept: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub rows: Vec<ScalingRow>,
    /// log Var against log |Λ|
    pub fit_volume: Option<Fit>,
    /// log Var against log |∂Λ|
    pub fit_boundary: Option<Fit>,
    pub degenerate: bool,
    pub note: String,
}

pub const SCALING_NOTE: &str = "Report only, no pass/fail. Finite boxes with boundary-condition proxies \
cannot certify the incongruence hypothesis behind linear variance growth; exponents describe these \
finite sizes only.";

/// Realization index used for window size `l` in a scaling run.
pub fn scaling_index(l: usize, r: u64) -> u64 {
    ((l as u64) << 32) | r
}

pub fn scaling_ensemble(template: &EnsembleSpec, l: usize) -> Result<Ensemble> {
    let mut spec = template.clone();
    let d = spec.geometry.window.len();
    spec.geometry = spec.geometry.with_window(&vec![l; d]);
    Ensemble::new(spec)
}

pub fn reduce_scaling(template: &EnsembleSpec, sizes: &[usize], values: &[Vec<f64>]) -> Result<ScalingReport> {
    let boot = &template.bootstrap;
    let mut rows = Vec::new();
    for (i, (&l, v)) in sizes.iter().zip(values).enumerate() {
        let ens = scaling_ensemble(template, l)?;
        rows.push(ScalingRow {
            window: ens.spec.geometry.window.clone(),
            sites: ens.window().site_count(),
            boundary: ens.boundary().len(),
            variance: bootstrap(v.len(), boot, 700 + i as u64, |ix| variance(&pick(v, ix))),
            n: v.len(),
        });
    }
    let degenerate = rows.iter().any(|r| !(r.variance.estimate > 0.0));
    let lx: Vec<f64> = rows.iter().map(|r| (r.sites as f64).ln()).collect();
    let lb: Vec<f64> = rows.iter().map(|r| (r.boundary as f64).ln()).collect();
    let (fit_volume, fit_boundary) = if degenerate {
        (None, None)
    } else {
        let ly: Vec<f64> = rows.iter().map(|r| r.variance.estimate.ln()).collect();
        let mut rng = SeedSpec::new(boot.seed, 799, Purpose::Bootstrap).rng();
        let mut sv = Vec::new();
        let mut sb = Vec::new();
        use rand::Rng;
        for _ in 0..boot.resamples {
            let ys: Vec<f64> = values
                .iter()
                .map(|v| {
                    let s: Vec<f64> = (0..v.len()).map(|_| v[rng.random_range(0..v.len())]).collect();
                    variance(&s).ln()
                })
                .collect();
            if ys.iter().all(|y| y.is_finite()) {
                sv.push(fit_line(&lx, &ys).0);
                sb.push(fit_line(&lb, &ys).0);
            }
        }
        let ci = |mut s: Vec<f64>| -> (f64, f64) {
            if s.is_empty() {
                return (f64::NAN, f64::NAN);
            }
            s.sort_by(f64::total_cmp);
            let q = |p: f64| s[((p * (s.len() - 1) as f64).round()) as usize];
            (q(0.025), q(0.975))
        };
        let mk = |x: &[f64], s: Vec<f64>| {
            let (slope, c) = fit_line(x, &ly);
            let (lo, hi) = ci(s);
            Fit {
                exponent: slope,
                intercept: c,
                ci_low: lo,
                ci_high: hi,
            }
        };
        (Some(mk(&lx, sv)), Some(mk(&lb, sb)))
    };
    Ok(ScalingReport {
        rows,
        fit_volume,
        fit_boundary,
        degenerate,
        note: SCALING_NOTE.into(),
    })
}

/// Var F across window sizes `l × … × l` with exponent fits.
pub fn variance_scaling(template: &EnsembleSpec, sizes: &[usize]) -> Result<ScalingReport> {
    if sizes.len() < 3 {
        return Err(Error::invalid("a scaling study needs at least three sizes"));
    }
    let mut values = Vec::new();
    for &l in sizes {
        let ens = scaling_ensemble(template, l)?;
        let idx: Vec<u64> = (0..ens.spec.n as u64).map(|r| scaling_index(l, r)).collect();
        values.push(per_realization(&ens, &idx, |r| Ok(realization_free_energy(&ens, r)?.value))?);
    }
    reduce_scaling(template, sizes, &values)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovarianceFragment {
    pub sample: u64,
    pub shift: Vec<i64>,
    pub edge: Edge,
    pub translation_deviation: f64,
    pub block: Region,
    pub reweight_deviation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovarianceReport {
    pub samples: usize,
    pub translation_max_deviation: f64,
    pub reweight_max_deviation: f64,
    pub tolerance: f64,
    pub pass: bool,
}

pub const COVARIANCE_TOLERANCE: f64 = 1e-10;

/// Settings of the covariance property tests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CovarianceSpec {
    pub torus: Vec<usize>,
    pub beta: f64,
    #[serde(default)]
    pub distribution: CouplingDistribution,
    pub samples: usize,
    pub seed: u64,
    #[serde(default = "default_block")]
    pub block_side: usize,
    #[serde(default)]
    pub solver: Solver,
}

fn default_block() -> usize {
    2
}

/// Optional overrides used by the trivial cases.
#[derive(Clone, Debug, Default)]
pub struct CovarianceOverrides {
    pub shift: Option<Vec<i64>>,
    pub zero_block: bool,
}

pub fn covariance_fragment(spec: &CovarianceSpec, s: u64, over: &CovarianceOverrides) -> Result<CovarianceFragment> {
    use rand::Rng;
    let torus = Region::torus(&spec.torus)?;
    let d = torus.dim();
    if spec.torus.iter().any(|&e| e < spec.block_side || e < 3) {
        return Err(Error::invalid("torus extents must be >= 3 and >= the block side"));
    }
    let edges = Arc::new(interior_edges(&torus));
    let seed = SeedSpec::new(spec.seed, s, Purpose::Couplings);
    let j = sample_couplings(&spec.distribution, &edges, seed);
    let bc = BoundaryCondition::periodic(d);
    let g = GibbsSpec::new(&torus, j.clone(), spec.beta, bc.clone())?;
    let mut rng = SeedSpec::new(spec.seed, s, Purpose::Draw(0)).rng();

    let shift: Vec<i64> = match &over.shift {
        Some(v) => v.clone(),
        None => spec.torus.iter().map(|&e| rng.random_range(0..e as i64)).collect(),
    };
    let e = edges.as_slice()[rng.random_range(0..edges.len())].clone();
    let tj = translate_couplings(&j, &shift, &torus)?;
    let te = e.translated(&shift, &torus)?;
    let a = spec.solver.solve(&g)?.correlation(&e)?;
    let b = spec.solver.solve(&g.with_couplings(tj)?)?.correlation(&te)?;

    let origin: Vec<i64> = spec
        .torus
        .iter()
        .map(|&ext| rng.random_range(0..=(ext - spec.block_side) as i64))
        .collect();
    let block = Region::window(&origin, &vec![spec.block_side; d])?;
    let jb: std::collections::HashMap<Edge, f64> = interior_edges(&block)
        .iter()
        .map(|e| {
            let v = if over.zero_block {
                0.0
            } else {
                spec.distribution.sample(&mut rng)
            };
            (e.clone(), v)
        })
        .collect();
    let moved = reweight(&g, &block, &jb)?;
    let enum_caps = crate::exactsolve::SolverCaps::default();
    let mut dev: f64 = 0.0;
    for edge in g.used_edges().iter() {
        let tgt = torus.edge_target(edge).expect("torus edge");
        let (i, k) = (
            torus.site_index(&edge.origin).expect("site"),
            torus.site_index(&tgt).expect("site"),
        );
        let obs = |s: &[i8]| f64::from(s[i] * s[k]);
        let lhs = crate::exactsolve::gibbs_expectation_enum_with(&moved, &enum_caps, obs)?;
        let rhs = reweighted_expectation_enum(&g, &block, &jb, obs)?;
        dev = dev.max((lhs - rhs).abs());
    }
    Ok(CovarianceFragment {
        sample: s,
        shift,
        edge: e,
        translation_deviation: (a - b).abs(),
        block,
        reweight_deviation: dev,
    })
}

pub fn reduce_covariance(frags: &[CovarianceFragment]) -> CovarianceReport {
    let t = frags.iter().map(|f| f.translation_deviation).fold(0.0, f64::max);
    let r = frags.iter().map(|f| f.reweight_deviation).fold(0.0, f64::max);
    CovarianceReport {
        samples: frags.len(),
        translation_max_deviation: t,
        reweight_max_deviation: r,
        tolerance: COVARIANCE_TOLERANCE,
        pass: t <= COVARIANCE_TOLERANCE && r <= COVARIANCE_TOLERANCE,
    }
}

/// Translation covariance of correlations and the local reweighting
/// identity on a periodic torus.
pub fn covariance_property_tests(spec: &CovarianceSpec) -> Result<(Vec<CovarianceFragment>, CovarianceReport)> {
    let frags: Vec<CovarianceFragment> = (0..spec.samples as u64)
        .into_par_iter()
        .map(|s| covariance_fragment(spec, s, &CovarianceOverrides::default()))
        .collect::<Result<_>>()?;
    let rep = reduce_covariance(&frags);
    Ok((frags, rep))
}

/// Unsupported on open regions: the property tests need a torus.
pub fn require_torus(region: &Region) -> Result<()> {
    if region.is_torus() {
        Ok(())
    } else {
        Err(Error::Unsupported(format!("{region} is not a torus")))
    }
}
