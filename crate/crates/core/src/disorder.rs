//! Quenched coupling realizations and their reproducible random streams.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{interior_edges, Edge, EdgeSet, Region, Site, Translate};

/// Continuous single-edge coupling law ν with finite fourth moment.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum CouplingDistribution {
    Gaussian { mean: f64, stddev: f64 },
    Uniform { lo: f64, hi: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    /// ν(|J|)
    pub abs_first: f64,
    /// ν(J²)
    pub second: f64,
    /// ν(J⁴)
    pub fourth: f64,
}

impl Default for CouplingDistribution {
    fn default() -> Self {
        CouplingDistribution::Gaussian {
            mean: 0.0,
            stddev: 1.0,
        }
    }
}

impl CouplingDistribution {
    pub fn gaussian(mean: f64, stddev: f64) -> Result<Self> {
        let d = CouplingDistribution::Gaussian { mean, stddev };
        d.validate()?;
        Ok(d)
    }

    pub fn uniform(lo: f64, hi: f64) -> Result<Self> {
        let d = CouplingDistribution::Uniform { lo, hi };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            CouplingDistribution::Gaussian { mean, stddev } => {
                if !(mean.is_finite() && stddev.is_finite() && stddev > 0.0) {
                    return Err(Error::invalid(format!(
                        "gaussian coupling law needs finite mean and stddev > 0 (got {mean}, {stddev})"
                    )));
                }
            }
            CouplingDistribution::Uniform { lo, hi } => {
                if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                    return Err(Error::invalid(format!(
                        "uniform coupling law needs finite lo < hi (got {lo}, {hi})"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn moments(&self) -> Moments {
        match *self {
            CouplingDistribution::Gaussian { mean: m, stddev: s } => {
                let abs_first = s * (2.0 / std::f64::consts::PI).sqrt() * (-m * m / (2.0 * s * s)).exp()
                    + m * statrs::function::erf::erf(m / (s * std::f64::consts::SQRT_2));
                Moments {
                    abs_first,
                    second: m * m + s * s,
                    fourth: m.powi(4) + 6.0 * m * m * s * s + 3.0 * s.powi(4),
                }
            }
            CouplingDistribution::Uniform { lo, hi } => {
                let w = hi - lo;
                let abs_first = if lo >= 0.0 {
                    0.5 * (lo + hi)
                } else if hi <= 0.0 {
                    -0.5 * (lo + hi)
                } else {
                    (lo * lo + hi * hi) / (2.0 * w)
                };
                Moments {
                    abs_first,
                    second: (hi.powi(3) - lo.powi(3)) / (3.0 * w),
                    fourth: (hi.powi(5) - lo.powi(5)) / (5.0 * w),
                }
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            CouplingDistribution::Gaussian { mean, stddev } => {
                let z: f64 = rng.sample(StandardNormal);
                mean + stddev * z
            }
            CouplingDistribution::Uniform { lo, hi } => lo + (hi - lo) * rng.random::<f64>(),
        }
    }
}

/// Role of a random stream within a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "purpose", content = "index", rename_all = "snake_case")]
pub enum Purpose {
    Couplings,
    Inner(u64),
    Draw(u64),
    Independent(u64),
    Bootstrap,
}

impl Purpose {
    fn code(self) -> u64 {
        const MASK: u64 = (1 << 56) - 1;
        match self {
            Purpose::Couplings => 1 << 56,
            Purpose::Inner(i) => (2 << 56) | (i & MASK),
            Purpose::Draw(i) => (3 << 56) | (i & MASK),
            Purpose::Independent(i) => (4 << 56) | (i & MASK),
            Purpose::Bootstrap => 5 << 56,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SeedSpec {
    pub master: u64,
    pub realization: u64,
    pub purpose: Purpose,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl SeedSpec {
    pub fn new(master: u64, realization: u64, purpose: Purpose) -> Self {
        SeedSpec {
            master,
            realization,
            purpose,
        }
    }

    /// Counter-based derivation: the ChaCha key comes from the master seed and
    /// the stream id from (realization, purpose). No state is shared between
    /// streams, so they can be created in any order on any thread.
    pub fn rng(&self) -> ChaCha8Rng {
        let mut key = [0u8; 32];
        let mut z = self.master;
        for chunk in key.chunks_mut(8) {
            z = splitmix64(z);
            chunk.copy_from_slice(&z.to_le_bytes());
        }
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(splitmix64(splitmix64(self.realization) ^ self.purpose.code()));
        rng
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub distribution: CouplingDistribution,
    pub seed: SeedSpec,
}

/// A realization J over a declared edge set. Values are aligned with the
/// edge set's canonical order.
#[derive(Clone, Debug)]
pub struct CouplingConfig {
    edges: Arc<EdgeSet>,
    values: Vec<f64>,
    provenance: Option<Provenance>,
}

impl PartialEq for CouplingConfig {
    fn eq(&self, other: &Self) -> bool {
        *self.edges == *other.edges
            && self.values.len() == other.values.len()
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Replacement values for a block.
#[derive(Clone, Debug)]
pub enum BlockValues {
    Zero,
    Values(HashMap<Edge, f64>),
}

#[derive(Serialize, Deserialize)]
struct CouplingRecord {
    x: Site,
    y: Site,
    orientation: usize,
    value: f64,
}

impl CouplingConfig {
    pub fn from_values(edges: Arc<EdgeSet>, values: Vec<f64>) -> Result<Self> {
        if edges.len() != values.len() {
            return Err(Error::invalid(format!(
                "{} values for {} edges",
                values.len(),
                edges.len()
            )));
        }
        Ok(CouplingConfig {
            edges,
            values,
            provenance: None,
        })
    }

    pub fn constant(edges: Arc<EdgeSet>, value: f64) -> Self {
        let values = vec![value; edges.len()];
        CouplingConfig {
            edges,
            values,
            provenance: None,
        }
    }

    pub fn edges(&self) -> &EdgeSet {
        &self.edges
    }

    pub fn edge_set(&self) -> &Arc<EdgeSet> {
        &self.edges
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn provenance(&self) -> Option<&Provenance> {
        self.provenance.as_ref()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, edge: &Edge) -> Result<f64> {
        self.edges
            .position(edge)
            .map(|i| self.values[i])
            .ok_or_else(|| Error::UndeclaredEdge(edge.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Edge, f64)> {
        self.edges.iter().zip(self.values.iter().copied())
    }

    /// Copy with a single edge overwritten.
    pub fn with_value(&self, edge: &Edge, value: f64) -> Result<Self> {
        let i = self
            .edges
            .position(edge)
            .ok_or_else(|| Error::UndeclaredEdge(edge.to_string()))?;
        let mut out = self.clone();
        out.values[i] = value;
        out.provenance = None;
        Ok(out)
    }

    /// Copy with the listed edges taken from `other` (both must declare them).
    pub fn with_values_from(&self, other: &CouplingConfig, edges: &EdgeSet) -> Result<Self> {
        let mut out = self.clone();
        for e in edges {
            let i = self
                .edges
                .position(e)
                .ok_or_else(|| Error::UndeclaredEdge(e.to_string()))?;
            out.values[i] = other.get(e)?;
        }
        out.provenance = None;
        Ok(out)
    }

    pub fn write_jsonl<W: Write>(&self, region: &Region, mut w: W) -> Result<()> {
        for (e, v) in self.iter() {
            let y = region.edge_target(e).unwrap_or_else(|| e.target());
            let rec = CouplingRecord {
                x: e.origin.clone(),
                y,
                orientation: e.axis,
                value: v,
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut pairs = Vec::new();
        for line in r.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: CouplingRecord = serde_json::from_str(&line)?;
            pairs.push((Edge::new(rec.x, rec.orientation), rec.value));
        }
        let edges = Arc::new(EdgeSet::from_edges(pairs.iter().map(|(e, _)| e.clone())));
        if edges.len() != pairs.len() {
            return Err(Error::invalid("duplicate edge in coupling dump"));
        }
        let mut values = vec![0.0; edges.len()];
        for (e, v) in pairs {
            values[edges.position(&e).expect("edge just inserted")] = v;
        }
        CouplingConfig::from_values(edges, values)
    }
}

/// One i.i.d. draw per edge, in canonical edge order.
pub fn sample_couplings(dist: &CouplingDistribution, edges: &Arc<EdgeSet>, seed: SeedSpec) -> CouplingConfig {
    let mut rng = seed.rng();
    let values = (0..edges.len()).map(|_| dist.sample(&mut rng)).collect();
    CouplingConfig {
        edges: Arc::clone(edges),
        values,
        provenance: Some(Provenance {
            distribution: *dist,
            seed,
        }),
    }
}

/// Copy of `j` with the couplings on E(block) replaced. Edges outside E(block)
/// are untouched.
pub fn set_block(j: &CouplingConfig, block: &Region, values: &BlockValues) -> Result<CouplingConfig> {
    let block_edges = interior_edges(block);
    let mut out = j.clone();
    out.provenance = None;
    for e in &block_edges {
        let i = j
            .edges
            .position(e)
            .ok_or_else(|| Error::UndeclaredEdge(e.to_string()))?;
        out.values[i] = match values {
            BlockValues::Zero => 0.0,
            BlockValues::Values(map) => *map
                .get(e)
                .ok_or_else(|| Error::IncompleteAssignment(e.to_string()))?,
        };
    }
    Ok(out)
}

/// Zero the couplings on an arbitrary edge set.
pub fn zero_edges(j: &CouplingConfig, edges: &EdgeSet) -> Result<CouplingConfig> {
    let mut out = j.clone();
    out.provenance = None;
    for e in edges {
        let i = j
            .edges
            .position(e)
            .ok_or_else(|| Error::UndeclaredEdge(e.to_string()))?;
        out.values[i] = 0.0;
    }
    Ok(out)
}

/// (TJ)_{Te} = J_e on a fully wrapped region.
pub fn translate_couplings(j: &CouplingConfig, shift: &[i64], torus: &Region) -> Result<CouplingConfig> {
    if !torus.is_torus() {
        return Err(Error::Unsupported(
            "coupling translation needs a fully wrapped region".into(),
        ));
    }
    let mut values = vec![f64::NAN; j.len()];
    for (e, v) in j.iter() {
        let te = e.translated(shift, torus)?;
        let i = j
            .edges
            .position(&te)
            .ok_or_else(|| Error::UndeclaredEdge(te.to_string()))?;
        values[i] = v;
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::Unsupported(
            "coupling edge set is not closed under the translation".into(),
        ));
    }
    CouplingConfig::from_values(Arc::clone(&j.edges), values)
}
