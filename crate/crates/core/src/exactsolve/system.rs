//! Compilation of a Gibbs spec into a flat spin system.
//!
//! The Boltzmann weight of a configuration is
//! `exp(β (Σ_b K_b σ_i σ_j + Σ_i h_i σ_i))`, where `K_b` is the effective
//! coupling of bond `b` (the sign-flipped coupling across an antiperiodic
//! seam) and `h_i` collects interactions with clamped ghost spins outside the
//! box.

use super::{AxisBoundary, BoundaryCondition};
use crate::disorder::CouplingConfig;
use crate::error::{Error, Result};
use crate::lattice::{Edge, Region, Site};

#[derive(Clone, Debug)]
pub(crate) struct Bond {
    /// origin site index
    pub i: usize,
    /// target site index
    pub j: usize,
    pub k: f64,
    pub axis: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) enum TermKind {
    Bond(usize),
    Ghost { site: usize, spin: i8 },
}

/// One coupling of the spec that enters the weight.
#[derive(Clone, Debug)]
pub(crate) struct Term {
    pub edge: Edge,
    pub sign: f64,
    pub kind: TermKind,
}

#[derive(Clone, Debug)]
pub(crate) struct SpinSystem {
    pub region: Region,
    pub n: usize,
    pub beta: f64,
    pub bonds: Vec<Bond>,
    pub field: Vec<f64>,
    pub terms: Vec<Term>,
    /// 0 = free, ±1 = clamped
    pub clamp: Vec<i8>,
}

impl SpinSystem {
    pub fn free_count(&self) -> usize {
        self.clamp.iter().filter(|&&c| c == 0).count()
    }

    pub fn with_clamp(&self, clamp: &[(usize, i8)]) -> Result<SpinSystem> {
        let mut out = self.clone();
        for &(i, s) in clamp {
            if i >= self.n {
                return Err(Error::Coverage(format!("site index {i}")));
            }
            if s != 1 && s != -1 {
                return Err(Error::invalid(format!("clamped spin must be ±1, got {s}")));
            }
            out.clamp[i] = s;
        }
        Ok(out)
    }

    /// Exponent `Σ K σσ + Σ h σ` (the weight is `exp(β · exponent)`).
    pub fn exponent(&self, spins: &[i8]) -> f64 {
        let mut e = 0.0;
        for b in &self.bonds {
            e += b.k * f64::from(spins[b.i] * spins[b.j]);
        }
        for (h, &s) in self.field.iter().zip(spins) {
            e += h * f64::from(s);
        }
        e
    }
}

fn face_index(region: &Region, site: &Site, axis: usize) -> usize {
    let mut idx = 0usize;
    for a in 0..region.dim() {
        if a == axis {
            continue;
        }
        idx = idx * region.extents()[a] + (site.0[a] - region.offset()[a]) as usize;
    }
    idx
}

pub(crate) fn face_size(region: &Region, axis: usize) -> usize {
    region
        .extents()
        .iter()
        .enumerate()
        .filter(|&(a, _)| a != axis)
        .map(|(_, e)| *e)
        .product()
}

pub(crate) fn compile(
    region: &Region,
    couplings: &CouplingConfig,
    beta: f64,
    bc: &BoundaryCondition,
) -> Result<SpinSystem> {
    let open = region.unwrapped();
    let n = region.site_count();
    let bc = &bc.axes;
    let mut bonds = Vec::new();
    let mut terms = Vec::new();
    let mut field = vec![0.0; n];

    let seam_sign = |site: &Site, axis: usize| -> f64 {
        if let AxisBoundary::Antiperiodic { seam } = &bc[axis] {
            let ext = region.extents()[axis];
            let p = seam.unwrap_or(ext - 1);
            if (site.0[axis] - region.offset()[axis]) as usize == p {
                return -1.0;
            }
        }
        1.0
    };

    let mut push_bond = |edge: Edge, i: usize, j: usize, sign: f64| -> Result<()> {
        let jv = couplings.get(&edge)?;
        terms.push(Term {
            edge: edge.clone(),
            sign,
            kind: TermKind::Bond(bonds.len()),
        });
        bonds.push(Bond {
            i,
            j,
            k: sign * jv,
            axis: edge.axis,
        });
        Ok(())
    };

    let mut ghosts: Vec<(Edge, usize, i8)> = Vec::new();

    for (i, s) in region.sites().enumerate() {
        for axis in 0..region.dim() {
            if let AxisBoundary::Fixed { low, .. } = &bc[axis] {
                if s.0[axis] == region.offset()[axis] {
                    let below = Edge::new(s.step(axis, -1), axis);
                    ghosts.push((below, i, low[face_index(region, &s, axis)]));
                }
            }
            let e = Edge::new(s.clone(), axis);
            let t = e.target();
            if open.contains(&t) {
                let j = region.site_index(&t).expect("target inside box");
                let sign = seam_sign(&s, axis);
                push_bond(e, i, j, sign)?;
                continue;
            }
            match &bc[axis] {
                AxisBoundary::Free => {}
                AxisBoundary::Periodic | AxisBoundary::Antiperiodic { .. } => {
                    if region.extents()[axis] > 1 {
                        let tr = region.reduce(&t).expect("wrapped axis");
                        let j = region.site_index(&tr).expect("reduced target inside box");
                        let sign = seam_sign(&s, axis);
                        push_bond(e, i, j, sign)?;
                    }
                }
                AxisBoundary::Fixed { high, .. } => {
                    ghosts.push((e, i, high[face_index(region, &s, axis)]));
                }
            }
        }
    }
    for (edge, i, spin) in ghosts {
        let jv = couplings.get(&edge)?;
        field[i] += jv * f64::from(spin);
        terms.push(Term {
            edge,
            sign: 1.0,
            kind: TermKind::Ghost { site: i, spin },
        });
    }
    terms.sort_by(|a, b| a.edge.cmp(&b.edge));
    Ok(SpinSystem {
        region: region.clone(),
        n,
        beta,
        bonds,
        field,
        terms,
        clamp: vec![0; n],
    })
}
