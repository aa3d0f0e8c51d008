//! Finite hypercubic lattice geometry.
//!
//! Sites are integer coordinate tuples. A [`Region`] is an axis-aligned box
//! `[offset, offset + extent)` per axis, optionally wrapped (torus) per axis.
//! Edges are identified by their origin site and the axis along which they
//! point: the edge `(origin, axis)` joins `origin` to `origin + e_axis`. On a
//! wrapped axis the far endpoint of an edge leaving the box re-enters on the
//! opposite face. This identification makes the wrap edge of a torus and the
//! corresponding boundary edge of the open box the same physical bond, so a
//! single coupling field serves every boundary condition.
//!
//! Site order is lexicographic with axis 0 most significant. Edge order follows
//! the origin site and, at equal origins, places higher axes first (in two
//! dimensions the vertical edge precedes the horizontal one).

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Site(pub Vec<i64>);

impl Site {
    pub fn new(coords: impl Into<Vec<i64>>) -> Self {
        Site(coords.into())
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn coords(&self) -> &[i64] {
        &self.0
    }

    /// Unit step along `axis` (may leave the region; no wrapping applied).
    pub fn step(&self, axis: usize, delta: i64) -> Site {
        let mut c = self.0.clone();
        c[axis] += delta;
        Site(c)
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, c) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{c}")?;
        }
        write!(f, ")")
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RegionRepr", into = "RegionRepr")]
pub struct Region {
    offset: Vec<i64>,
    extents: Vec<usize>,
    wrap: Vec<bool>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RegionRepr {
    dimension: usize,
    extents: Vec<usize>,
    #[serde(default)]
    wrap: Vec<bool>,
    #[serde(default)]
    offset: Vec<i64>,
}

impl TryFrom<RegionRepr> for Region {
    type Error = Error;

    fn try_from(r: RegionRepr) -> Result<Self> {
        if r.extents.len() != r.dimension {
            return Err(Error::invalid(format!(
                "region dimension {} does not match {} extents",
                r.dimension,
                r.extents.len()
            )));
        }
        let wrap = if r.wrap.is_empty() {
            vec![false; r.dimension]
        } else {
            r.wrap
        };
        let offset = if r.offset.is_empty() {
            vec![0; r.dimension]
        } else {
            r.offset
        };
        Region::new(offset, r.extents, wrap)
    }
}

impl From<Region> for RegionRepr {
    fn from(r: Region) -> Self {
        RegionRepr {
            dimension: r.dim(),
            extents: r.extents,
            wrap: r.wrap,
            offset: r.offset,
        }
    }
}

impl Region {
    pub fn new(offset: Vec<i64>, extents: Vec<usize>, wrap: Vec<bool>) -> Result<Self> {
        let d = extents.len();
        if d == 0 {
            return Err(Error::invalid("region must have dimension >= 1"));
        }
        if offset.len() != d || wrap.len() != d {
            return Err(Error::invalid("offset, extents and wrap must have equal length"));
        }
        if extents.contains(&0) {
            return Err(Error::invalid("every axis extent must be >= 1"));
        }
        extents
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .ok_or_else(|| Error::invalid("site count overflows"))?;
        Ok(Region {
            offset,
            extents,
            wrap,
        })
    }

    /// Open box at the origin.
    pub fn open(extents: &[usize]) -> Result<Self> {
        Region::new(vec![0; extents.len()], extents.to_vec(), vec![false; extents.len()])
    }

    /// Fully wrapped box at the origin.
    pub fn torus(extents: &[usize]) -> Result<Self> {
        Region::new(vec![0; extents.len()], extents.to_vec(), vec![true; extents.len()])
    }

    /// Open sub-box with the given offset.
    pub fn window(offset: &[i64], extents: &[usize]) -> Result<Self> {
        Region::new(offset.to_vec(), extents.to_vec(), vec![false; extents.len()])
    }

    pub fn with_wrap(&self, wrap: Vec<bool>) -> Result<Self> {
        Region::new(self.offset.clone(), self.extents.clone(), wrap)
    }

    pub fn unwrapped(&self) -> Region {
        Region {
            offset: self.offset.clone(),
            extents: self.extents.clone(),
            wrap: vec![false; self.dim()],
        }
    }

    pub fn dim(&self) -> usize {
        self.extents.len()
    }

    pub fn offset(&self) -> &[i64] {
        &self.offset
    }

    pub fn extents(&self) -> &[usize] {
        &self.extents
    }

    pub fn wrap(&self) -> &[bool] {
        &self.wrap
    }

    pub fn is_torus(&self) -> bool {
        self.wrap.iter().all(|&w| w)
    }

    pub fn site_count(&self) -> usize {
        self.extents.iter().product()
    }

    /// Same box (offset and extents), ignoring wrap flags.
    pub fn same_box(&self, other: &Region) -> bool {
        self.offset == other.offset && self.extents == other.extents
    }

    pub fn contains(&self, site: &Site) -> bool {
        site.dim() == self.dim()
            && site
                .0
                .iter()
                .zip(self.offset.iter().zip(&self.extents))
                .all(|(&c, (&o, &e))| c >= o && c < o + e as i64)
    }

    /// Every site of `other` lies in `self`.
    pub fn contains_region(&self, other: &Region) -> bool {
        other.dim() == self.dim()
            && (0..self.dim()).all(|a| {
                other.offset[a] >= self.offset[a]
                    && other.offset[a] + other.extents[a] as i64
                        <= self.offset[a] + self.extents[a] as i64
            })
    }

    /// Map raw coordinates into the box, wrapping on wrapped axes.
    /// `None` if the site lies outside along an open axis.
    pub fn reduce(&self, site: &Site) -> Option<Site> {
        if site.dim() != self.dim() {
            return None;
        }
        let mut out = Vec::with_capacity(self.dim());
        for a in 0..self.dim() {
            let o = self.offset[a];
            let e = self.extents[a] as i64;
            let rel = site.0[a] - o;
            if (0..e).contains(&rel) {
                out.push(site.0[a]);
            } else if self.wrap[a] {
                out.push(o + rel.rem_euclid(e));
            } else {
                return None;
            }
        }
        Some(Site(out))
    }

    /// Lexicographic index of a site inside the box.
    pub fn site_index(&self, site: &Site) -> Option<usize> {
        if !self.contains(site) {
            return None;
        }
        let mut idx = 0usize;
        for a in 0..self.dim() {
            idx = idx * self.extents[a] + (site.0[a] - self.offset[a]) as usize;
        }
        Some(idx)
    }

    pub fn site_at(&self, mut index: usize) -> Site {
        let mut c = vec![0i64; self.dim()];
        for a in (0..self.dim()).rev() {
            c[a] = self.offset[a] + (index % self.extents[a]) as i64;
            index /= self.extents[a];
        }
        Site(c)
    }

    pub fn sites(&self) -> impl Iterator<Item = Site> + '_ {
        (0..self.site_count()).map(move |i| self.site_at(i))
    }

    /// Far endpoint of an edge, reduced into the box. `None` when the edge
    /// leaves the box through an open face.
    pub fn edge_target(&self, edge: &Edge) -> Option<Site> {
        self.reduce(&edge.target())
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ext: Vec<String> = self
            .extents
            .iter()
            .zip(&self.wrap)
            .map(|(e, w)| if *w { format!("{e}p") } else { e.to_string() })
            .collect();
        write!(f, "{}@{}", ext.join("x"), Site(self.offset.clone()))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Edge {
    pub origin: Site,
    pub axis: usize,
}

impl Edge {
    pub fn new(origin: Site, axis: usize) -> Self {
        Edge { origin, axis }
    }

    /// Raw far endpoint `origin + e_axis`, unreduced.
    pub fn target(&self) -> Site {
        self.origin.step(self.axis, 1)
    }
}

impl Ord for Edge {
    fn cmp(&self, other: &Self) -> Ordering {
        self.origin
            .cmp(&other.origin)
            .then_with(|| other.axis.cmp(&self.axis))
    }
}

impl PartialOrd for Edge {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for Edge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}+e{}", self.origin, self.axis)
    }
}

/// Duplicate-free edge list, always kept in lexicographic edge order.
#[derive(Clone, Debug, Default)]
pub struct EdgeSet {
    edges: Vec<Edge>,
    index: HashMap<Edge, usize>,
}

impl PartialEq for EdgeSet {
    fn eq(&self, other: &Self) -> bool {
        self.edges == other.edges
    }
}

impl Serialize for EdgeSet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.edges.serialize(s)
    }
}

impl<'de> Deserialize<'de> for EdgeSet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        Ok(EdgeSet::from_edges(Vec::<Edge>::deserialize(d)?))
    }
}

impl EdgeSet {
    pub fn from_edges(edges: impl IntoIterator<Item = Edge>) -> Self {
        let mut edges: Vec<Edge> = edges.into_iter().collect();
        edges.sort();
        edges.dedup();
        let index = edges
            .iter()
            .enumerate()
            .map(|(i, e)| (e.clone(), i))
            .collect();
        EdgeSet { edges, index }
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Edge> {
        self.edges.iter()
    }

    pub fn as_slice(&self) -> &[Edge] {
        &self.edges
    }

    pub fn get(&self, i: usize) -> Option<&Edge> {
        self.edges.get(i)
    }

    pub fn contains(&self, e: &Edge) -> bool {
        self.index.contains_key(e)
    }

    pub fn position(&self, e: &Edge) -> Option<usize> {
        self.index.get(e).copied()
    }

    pub fn is_subset(&self, other: &EdgeSet) -> bool {
        self.edges.iter().all(|e| other.contains(e))
    }

    pub fn union(&self, other: &EdgeSet) -> EdgeSet {
        EdgeSet::from_edges(self.edges.iter().chain(other.edges.iter()).cloned())
    }

    pub fn difference(&self, other: &EdgeSet) -> EdgeSet {
        EdgeSet::from_edges(self.edges.iter().filter(|e| !other.contains(e)).cloned())
    }
}

impl<'a> IntoIterator for &'a EdgeSet {
    type Item = &'a Edge;
    type IntoIter = std::slice::Iter<'a, Edge>;
    fn into_iter(self) -> Self::IntoIter {
        self.edges.iter()
    }
}

/// E(Λ): nearest-neighbour edges with both endpoints in the region, honoring
/// its wrap flags. A wrapped axis of extent 1 contributes no self-loops.
pub fn interior_edges(region: &Region) -> EdgeSet {
    let mut edges = Vec::new();
    for s in region.sites() {
        for axis in 0..region.dim() {
            let e = Edge::new(s.clone(), axis);
            let t = e.target();
            if region.contains(&t) || (region.wrap()[axis] && region.extents()[axis] > 1) {
                edges.push(e);
            }
        }
    }
    EdgeSet::from_edges(edges)
}

/// ∂Λ: edges of `ambient` with exactly one endpoint in `inner`.
pub fn boundary_edges(inner: &Region, ambient: &Region) -> Result<EdgeSet> {
    if !ambient.contains_region(inner) {
        return Err(Error::Containment(format!("{inner} is not contained in {ambient}")));
    }
    let edges = interior_edges(ambient)
        .iter()
        .filter(|e| {
            let t = ambient
                .edge_target(e)
                .expect("interior edge target lies in ambient");
            inner.contains(&e.origin) != inner.contains(&t)
        })
        .cloned()
        .collect::<Vec<_>>();
    Ok(EdgeSet::from_edges(edges))
}

/// E(B) ∪ ∂B taken in the infinite lattice: every edge with at least one
/// endpoint in the (unwrapped) box. This is the coupling domain needed by
/// every boundary condition on the box.
pub fn incident_edges(region: &Region) -> EdgeSet {
    let mut edges = Vec::new();
    for s in region.sites() {
        for axis in 0..region.dim() {
            edges.push(Edge::new(s.clone(), axis));
            let below = s.step(axis, -1);
            if !region.contains(&below) {
                edges.push(Edge::new(below, axis));
            }
        }
    }
    EdgeSet::from_edges(edges)
}

/// Lattice translations relative to an ambient region.
pub trait Translate: Sized {
    /// Shift by `shift`, reducing modulo the extent on wrapped axes of
    /// `ambient`. Fails when the result leaves `ambient` along an open axis.
    fn translated(&self, shift: &[i64], ambient: &Region) -> Result<Self>;
}

impl Translate for Site {
    fn translated(&self, shift: &[i64], ambient: &Region) -> Result<Self> {
        if shift.len() != self.dim() || self.dim() != ambient.dim() {
            return Err(Error::invalid("translation dimension mismatch"));
        }
        let raw = Site(self.0.iter().zip(shift).map(|(c, v)| c + v).collect());
        ambient
            .reduce(&raw)
            .ok_or_else(|| Error::OutOfBounds(format!("{self} shifted by {shift:?} leaves {ambient}")))
    }
}

impl Translate for Edge {
    fn translated(&self, shift: &[i64], ambient: &Region) -> Result<Self> {
        let origin = self.origin.translated(shift, ambient)?;
        let out = Edge::new(origin, self.axis);
        if ambient.edge_target(&out).is_none() {
            return Err(Error::OutOfBounds(format!(
                "edge {self} shifted by {shift:?} leaves {ambient}"
            )));
        }
        Ok(out)
    }
}

impl Translate for Region {
    fn translated(&self, shift: &[i64], ambient: &Region) -> Result<Self> {
        if shift.len() != self.dim() || self.dim() != ambient.dim() {
            return Err(Error::invalid("translation dimension mismatch"));
        }
        let mut offset = Vec::with_capacity(self.dim());
        for a in 0..self.dim() {
            let lo = ambient.offset()[a];
            let ext = ambient.extents()[a] as i64;
            let mut o = self.offset[a] + shift[a];
            if ambient.wrap()[a] {
                o = lo + (o - lo).rem_euclid(ext);
            }
            if o < lo || o + self.extents[a] as i64 > lo + ext {
                return Err(Error::OutOfBounds(format!(
                    "{self} shifted by {shift:?} is not a box inside {ambient}"
                )));
            }
            offset.push(o);
        }
        Region::new(offset, self.extents.clone(), self.wrap.clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockPartition {
    pub parent: Region,
    pub side: usize,
    pub blocks: Vec<Region>,
}

impl BlockPartition {
    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }
}

/// Tile a region with congruent open cubes of side `side`, ordered by block
/// origin. Remainder strips are rejected.
pub fn block_partition(region: &Region, side: usize) -> Result<BlockPartition> {
    if side == 0 {
        return Err(Error::Partition("block side must be >= 1".into()));
    }
    if let Some(e) = region.extents().iter().find(|&&e| e % side != 0) {
        return Err(Error::Partition(format!("block side {side} does not divide extent {e}")));
    }
    let counts: Vec<usize> = region.extents().iter().map(|e| e / side).collect();
    let grid = Region::open(&counts)?;
    let blocks = grid
        .sites()
        .map(|g| {
            let offset: Vec<i64> = g
                .0
                .iter()
                .zip(region.offset())
                .map(|(k, o)| o + k * side as i64)
                .collect();
            Region::window(&offset, &vec![side; region.dim()])
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BlockPartition {
        parent: region.clone(),
        side,
        blocks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_force_neighbor_pairs(region: &Region) -> usize {
        // count ordered (site, axis) pairs whose +1 neighbour exists in the region
        let mut n = 0;
        for s in region.sites() {
            for a in 0..region.dim() {
                let t = s.step(a, 1);
                if region.contains(&t) {
                    n += 1;
                } else if region.wrap()[a] && region.extents()[a] > 1 {
                    let r = region.reduce(&t).unwrap();
                    assert!(region.contains(&r));
                    n += 1;
                }
            }
        }
        n
    }

    #[test]
    fn interior_edge_counts() {
        assert!(interior_edges(&Region::open(&[1, 1]).unwrap()).is_empty());
        assert_eq!(interior_edges(&Region::open(&[2, 2]).unwrap()).len(), 4);
        let torus = Region::torus(&[2, 2]).unwrap();
        assert_eq!(interior_edges(&torus).len(), 8);
        assert_eq!(brute_force_neighbor_pairs(&torus), 8);
        assert_eq!(interior_edges(&Region::open(&[3, 4]).unwrap()).len(), 2 * 4 + 3 * 3);
        assert_eq!(interior_edges(&Region::torus(&[1, 5]).unwrap()).len(), 5);
    }

    #[test]
    fn boundary_edge_counts() {
        let amb = Region::open(&[3, 3]).unwrap();
        assert!(boundary_edges(&amb, &amb).unwrap().is_empty());
        let center = Region::window(&[1, 1], &[1, 1]).unwrap();
        assert_eq!(boundary_edges(&center, &amb).unwrap().len(), 4);
        let amb4 = Region::open(&[4, 4]).unwrap();
        let inner = Region::window(&[1, 1], &[2, 2]).unwrap();
        let b = boundary_edges(&inner, &amb4).unwrap();
        // brute force: ambient edges with exactly one endpoint inside
        let brute = interior_edges(&amb4)
            .iter()
            .filter(|e| inner.contains(&e.origin) ^ inner.contains(&e.target()))
            .count();
        assert_eq!(b.len(), 8);
        assert_eq!(brute, 8);
        let outside = Region::window(&[3, 3], &[2, 2]).unwrap();
        assert!(matches!(boundary_edges(&outside, &amb4), Err(Error::Containment(_))));
    }

    #[test]
    fn translations() {
        let torus = Region::torus(&[3, 3]).unwrap();
        let s = Site::new(vec![2, 2]);
        assert_eq!(s.translated(&[0, 0], &torus).unwrap(), s);
        assert_eq!(s.translated(&[1, 0], &torus).unwrap(), Site::new(vec![0, 2]));
        let t2 = Region::torus(&[2, 2]).unwrap();
        let e = Edge::new(Site::new(vec![0, 0]), 1);
        let te = e.translated(&[1, 0], &t2).unwrap();
        assert_eq!(te, Edge::new(Site::new(vec![1, 0]), 1));
        assert_eq!(t2.edge_target(&te).unwrap(), Site::new(vec![1, 1]));
        let open = Region::open(&[3, 3]).unwrap();
        assert!(matches!(s.translated(&[1, 0], &open), Err(Error::OutOfBounds(_))));
        let w = Region::window(&[0, 0], &[2, 2]).unwrap();
        assert!(w.translated(&[1, 1], &open).is_ok());
        assert!(matches!(w.translated(&[2, 0], &open), Err(Error::OutOfBounds(_))));
    }

    #[test]
    fn lexicographic_edge_order_puts_vertical_first() {
        let es = interior_edges(&Region::open(&[2, 2]).unwrap());
        let got: Vec<(Vec<i64>, usize)> = es.iter().map(|e| (e.origin.0.clone(), e.axis)).collect();
        assert_eq!(
            got,
            vec![(vec![0, 0], 1), (vec![0, 0], 0), (vec![0, 1], 0), (vec![1, 0], 1)]
        );
    }

    #[test]
    fn partitions() {
        let r4 = Region::open(&[4, 4]).unwrap();
        assert_eq!(block_partition(&r4, 2).unwrap().len(), 4);
        assert_eq!(block_partition(&Region::open(&[6, 6]).unwrap(), 2).unwrap().len(), 9);
        assert!(matches!(block_partition(&r4, 3), Err(Error::Partition(_))));
        let p = block_partition(&Region::window(&[1, 1], &[4, 4]).unwrap(), 2).unwrap();
        assert_eq!(p.blocks[1].offset(), &[1, 3]);
    }

    #[test]
    fn region_serialization_defaults() {
        let r: Region = serde_json::from_str(r#"{"dimension":2,"extents":[3,4],"wrap":[true,false]}"#).unwrap();
        assert_eq!(r.offset(), &[0, 0]);
        assert_eq!(r.wrap(), &[true, false]);
        let back: Region = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
        assert_eq!(back, r);
        assert!(serde_json::from_str::<Region>(r#"{"dimension":3,"extents":[3,4]}"#).is_err());
    }

    #[test]
    fn incident_edges_cover_both_faces() {
        let r = Region::open(&[2, 2]).unwrap();
        // 4 interior + 8 boundary edges leaving a 2x2 box
        assert_eq!(incident_edges(&r).len(), 12);
    }
}
