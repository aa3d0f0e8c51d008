//! Exhaustive enumeration over free spins.
//!
//! Configurations are visited in Gray-code order so each step flips one spin
//! and updates the exponent through that spin's local field. The exponent is
//! recomputed from scratch every [`RESYNC`] steps to bound drift. Weights are
//! accumulated against a running maximum so nothing overflows.
//!
//! The outermost free spins are split into a fixed number of chunks that are
//! evaluated in parallel and merged in chunk order, so results do not depend on
//! the thread count.

use rayon::prelude::*;

use super::system::SpinSystem;
use crate::error::{Error, Result};

const RESYNC: u64 = 4096;
const MAX_CHUNK_BITS: usize = 8;
const MIN_LOW_BITS: usize = 12;

/// Max-shifted accumulator for Σ w and Σ w·o.
#[derive(Clone, Debug)]
pub(crate) struct WeightedSums {
    pub max: f64,
    pub sum: f64,
    pub obs: Vec<f64>,
}

impl WeightedSums {
    pub fn new(k: usize) -> Self {
        WeightedSums {
            max: f64::NEG_INFINITY,
            sum: 0.0,
            obs: vec![0.0; k],
        }
    }

    fn rescale(&mut self, new_max: f64) {
        if self.max == f64::NEG_INFINITY {
            self.max = new_max;
            return;
        }
        let s = (self.max - new_max).exp();
        self.sum *= s;
        for o in &mut self.obs {
            *o *= s;
        }
        self.max = new_max;
    }

    #[inline]
    pub fn add(&mut self, log_w: f64, values: &[f64]) {
        if log_w > self.max {
            self.rescale(log_w);
        }
        let w = (log_w - self.max).exp();
        self.sum += w;
        for (o, v) in self.obs.iter_mut().zip(values) {
            *o += w * v;
        }
    }

    pub fn merge(mut self, mut other: WeightedSums) -> WeightedSums {
        if other.max == f64::NEG_INFINITY {
            return self;
        }
        if self.max == f64::NEG_INFINITY {
            return other;
        }
        if other.max > self.max {
            self.rescale(other.max);
        } else {
            other.rescale(self.max);
        }
        self.sum += other.sum;
        for (a, b) in self.obs.iter_mut().zip(&other.obs) {
            *a += b;
        }
        self
    }

    pub fn log_total(&self) -> f64 {
        self.max + self.sum.ln()
    }

    pub fn expectations(&self) -> Vec<f64> {
        self.obs.iter().map(|o| o / self.sum).collect()
    }
}

/// Visit every configuration of the free spins with its log-weight; `obs`
/// writes `k` observable values for the configuration.
pub(crate) fn enumerate<F>(sys: &SpinSystem, cap: usize, k: usize, obs: F) -> Result<WeightedSums>
where
    F: Fn(&[i8], &mut [f64]) + Sync,
{
    let free: Vec<usize> = (0..sys.n).filter(|&i| sys.clamp[i] == 0).collect();
    let nf = free.len();
    if nf > cap {
        return Err(Error::Size(format!(
            "{nf} free spins exceed the enumeration cap of {cap}"
        )));
    }
    let chunk_bits = nf.saturating_sub(MIN_LOW_BITS).min(MAX_CHUNK_BITS);
    let low_bits = nf - chunk_bits;
    let (low, high) = free.split_at(low_bits);

    let mut adj: Vec<Vec<(usize, f64)>> = vec![Vec::new(); sys.n];
    for b in &sys.bonds {
        adj[b.i].push((b.j, b.k));
        adj[b.j].push((b.i, b.k));
    }
    let base: Vec<i8> = sys.clamp.iter().map(|&c| if c == 0 { 1 } else { c }).collect();
    let beta = sys.beta;

    let run_chunk = |chunk: u64| -> WeightedSums {
        let mut spins = base.clone();
        for (bit, &i) in high.iter().enumerate() {
            if (chunk >> bit) & 1 == 1 {
                spins[i] = -1;
            }
        }
        let mut acc = WeightedSums::new(k);
        let mut values = vec![0.0; k];
        let mut expo = sys.exponent(&spins);
        let total: u64 = 1 << low.len();
        for step in 0..total {
            if step > 0 {
                let p = low[step.trailing_zeros() as usize];
                let mut local = sys.field[p];
                for &(q, kq) in &adj[p] {
                    local += kq * f64::from(spins[q]);
                }
                // bonds at p double-count nothing: a self-loop never occurs
                expo -= 2.0 * f64::from(spins[p]) * local;
                spins[p] = -spins[p];
                if step % RESYNC == 0 {
                    expo = sys.exponent(&spins);
                }
            }
            obs(&spins, &mut values);
            acc.add(beta * expo, &values);
        }
        acc
    };

    let partials: Vec<WeightedSums> = (0..1u64 << chunk_bits)
        .into_par_iter()
        .map(run_chunk)
        .collect();
    Ok(partials
        .into_iter()
        .fold(WeightedSums::new(k), WeightedSums::merge))
}
