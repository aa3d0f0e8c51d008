//! Transfer-matrix evaluation for two-dimensional (and one-dimensional) boxes.
//!
//! The box is cut into slices transverse to a longitudinal axis. A slice of
//! width `W` has `2^W` states; bit `w` set means spin `-1` at width position
//! `w`. Intra-slice bonds, ghost fields and clamps live in diagonal slice
//! weights; bonds between consecutive slices are applied one width position at
//! a time as 2×2 kernels, so one slice-to-slice step costs `W·2^W`.
//!
//! A wrapped longitudinal axis is handled by conditioning on the state of the
//! first slice: each conditioned chain is open, with the wrap bonds acting as
//! fields on the last slice, and the results are combined by log-sum-exp.
//! The chain is rotated so that the slice with the most clamped spins comes
//! first, which prunes the conditioning sum.
//!
//! Every vector is renormalized by its maximum after each step, with the
//! logarithm of the factor carried separately; kernels are divided by
//! `exp(β|K|)` so their entries lie in `(0, 1]`.

use rayon::prelude::*;

use super::log_sum_exp;
use super::system::SpinSystem;
use crate::error::{Error, Result};

pub(crate) struct TransferOutput {
    pub log_z: f64,
    pub bond_corr: Vec<f64>,
    pub magnetization: Vec<f64>,
}

type SliceBond = (usize, f64, usize);

struct Strip {
    slices: usize,
    width: usize,
    /// `site[p][w]`: site index at slice position `p`, width position `w`
    site: Vec<Vec<usize>>,
    /// `(w1, w2, K, bond)`
    intra: Vec<Vec<(usize, usize, f64, usize)>>,
    /// bonds from slice `p` to slice `p + 1`: `(w, K, bond)`
    fwd: Vec<Vec<SliceBond>>,
    /// bonds from the last slice back to the first
    wrap: Vec<SliceBond>,
    beta: f64,
}

#[inline]
fn spin(a: usize, w: usize) -> f64 {
    if (a >> w) & 1 == 1 {
        -1.0
    } else {
        1.0
    }
}

fn plan(sys: &SpinSystem, width_cap: usize) -> Result<Strip> {
    let region = &sys.region;
    let d = region.dim();
    if d > 2 {
        return Err(Error::Unsupported(format!(
            "transfer matrices need d <= 2, got d = {d}"
        )));
    }
    let ext = region.extents();
    let (long, width_axis) = if d == 1 {
        (0usize, None)
    } else {
        let mut best: Option<(f64, usize)> = None;
        for long in 0..2 {
            let w = ext[1 - long];
            if w > width_cap {
                continue;
            }
            let wrapped = region.wrap()[long] && ext[long] > 1;
            let states = (w as f64).exp2();
            let cost = ext[long] as f64 * states * w as f64 * if wrapped { states } else { 1.0 };
            if best.is_none_or(|(c, _)| cost < c) {
                best = Some((cost, long));
            }
        }
        let (_, long) = best.ok_or_else(|| {
            Error::Size(format!(
                "both widths of {region} exceed the transfer cap of {width_cap}"
            ))
        })?;
        (long, Some(1 - long))
    };
    let slices = ext[long];
    let width = width_axis.map_or(1, |a| ext[a]);
    if width > width_cap {
        return Err(Error::Size(format!(
            "width {width} exceeds the transfer cap of {width_cap}"
        )));
    }
    let coords = |i: usize| -> (usize, usize) {
        let s = region.site_at(i);
        let l = (s.0[long] - region.offset()[long]) as usize;
        let w = width_axis.map_or(0, |a| (s.0[a] - region.offset()[a]) as usize);
        (l, w)
    };

    let wrapped_long = region.wrap()[long] && slices > 1;
    // rotate so the most clamped slice is first (only matters when conditioning)
    let mut rot = 0usize;
    if wrapped_long {
        let mut clamped = vec![0usize; slices];
        for i in 0..sys.n {
            if sys.clamp[i] != 0 {
                clamped[coords(i).0] += 1;
            }
        }
        let mut best = 0;
        for (l, &c) in clamped.iter().enumerate() {
            if c > best {
                best = c;
                rot = l;
            }
        }
    }
    let pos = |l: usize| (l + slices - rot) % slices;

    let mut site = vec![vec![usize::MAX; width]; slices];
    for i in 0..sys.n {
        let (l, w) = coords(i);
        site[pos(l)][w] = i;
    }
    let mut intra = vec![Vec::new(); slices];
    let mut fwd = vec![Vec::new(); slices];
    let mut wrap = Vec::new();
    for (b, bond) in sys.bonds.iter().enumerate() {
        let (li, wi) = coords(bond.i);
        let (lj, wj) = coords(bond.j);
        if Some(bond.axis) == width_axis {
            intra[pos(li)].push((wi, wj, bond.k, b));
        } else {
            let (pi, pj) = (pos(li), pos(lj));
            if pj == pi + 1 {
                fwd[pi].push((wi, bond.k, b));
            } else if pi == slices - 1 && pj == 0 {
                wrap.push((wi, bond.k, b));
            } else {
                return Err(Error::Unsupported(format!("bond {b} is not nearest-neighbour in the strip")));
            }
        }
    }
    Ok(Strip {
        slices,
        width,
        site,
        intra,
        fwd,
        wrap,
        beta: sys.beta,
    })
}

/// Normalized diagonal slice weights and the sum of their log scales.
fn slice_weights(sys: &SpinSystem, strip: &Strip) -> (Vec<Vec<f64>>, f64) {
    let states = 1usize << strip.width;
    let mut total = 0.0;
    let mut out = Vec::with_capacity(strip.slices);
    for p in 0..strip.slices {
        let sites = &strip.site[p];
        let mut logw = vec![0.0; states];
        for (a, lw) in logw.iter_mut().enumerate() {
            let mut ok = true;
            let mut e = 0.0;
            for (w, &i) in sites.iter().enumerate() {
                let s = spin(a, w);
                let c = sys.clamp[i];
                if c != 0 && f64::from(c) != s {
                    ok = false;
                    break;
                }
                e += sys.field[i] * s;
            }
            if !ok {
                *lw = f64::NEG_INFINITY;
                continue;
            }
            for &(w1, w2, k, _) in &strip.intra[p] {
                e += k * spin(a, w1) * spin(a, w2);
            }
            *lw = strip.beta * e;
        }
        let m = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        total += m;
        out.push(logw.into_iter().map(|l| (l - m).exp()).collect());
    }
    (out, total)
}

/// In-place product of 2×2 kernels, one per bond. Returns the log factor
/// removed from the kernels.
fn apply_kernels(v: &mut [f64], bonds: &[SliceBond], beta: f64) -> f64 {
    let mut scale = 0.0;
    for &(w, k, _) in bonds {
        let t = (-2.0 * beta * k.abs()).exp();
        let (same, diff) = if k >= 0.0 { (1.0, t) } else { (t, 1.0) };
        scale += beta * k.abs();
        let bit = 1usize << w;
        for a in 0..v.len() {
            if a & bit == 0 {
                let x0 = v[a];
                let x1 = v[a | bit];
                v[a] = same * x0 + diff * x1;
                v[a | bit] = diff * x0 + same * x1;
            }
        }
    }
    scale
}

fn normalize(v: &mut [f64]) -> f64 {
    let m = v.iter().copied().fold(0.0, f64::max);
    if m > 0.0 {
        for x in v.iter_mut() {
            *x /= m;
        }
        m.ln()
    } else {
        f64::NEG_INFINITY
    }
}

struct Chain {
    log_z: f64,
    fwd: Vec<Vec<f64>>,
}

/// Forward sweep of an open chain with slice weights `d`.
fn forward(strip: &Strip, d: &[Vec<f64>], keep: bool) -> Chain {
    let mut log = 0.0;
    let mut f = d[0].clone();
    log += normalize(&mut f);
    let mut kept = Vec::new();
    for p in 0..strip.slices - 1 {
        let mut g = f.clone();
        log += apply_kernels(&mut g, &strip.fwd[p], strip.beta);
        for (x, dd) in g.iter_mut().zip(&d[p + 1]) {
            *x *= dd;
        }
        log += normalize(&mut g);
        if keep {
            kept.push(f);
        }
        f = g;
    }
    let total: f64 = f.iter().sum();
    if keep {
        kept.push(f);
    }
    Chain {
        log_z: log + total.ln(),
        fwd: kept,
    }
}

/// Bond correlations and magnetizations of an open chain.
fn chain_observables(
    strip: &Strip,
    d: &[Vec<f64>],
    chain: &Chain,
    n_bonds: usize,
    n_sites: usize,
) -> (Vec<f64>, Vec<f64>) {
    let states = 1usize << strip.width;
    let s_len = strip.slices;
    let mut back = vec![vec![1.0; states]; s_len];
    for p in (0..s_len - 1).rev() {
        let mut t: Vec<f64> = d[p + 1].iter().zip(&back[p + 1]).map(|(a, b)| a * b).collect();
        apply_kernels(&mut t, &strip.fwd[p], strip.beta);
        normalize(&mut t);
        back[p] = t;
    }
    let mut corr = vec![0.0; n_bonds];
    let mut mag = vec![0.0; n_sites];
    for p in 0..s_len {
        let f = &chain.fwd[p];
        let marg: Vec<f64> = f.iter().zip(&back[p]).map(|(a, b)| a * b).collect();
        let z: f64 = marg.iter().sum();
        for (w, &i) in strip.site[p].iter().enumerate() {
            mag[i] = marg.iter().enumerate().map(|(a, m)| m * spin(a, w)).sum::<f64>() / z;
        }
        for &(w1, w2, _, b) in &strip.intra[p] {
            corr[b] = marg
                .iter()
                .enumerate()
                .map(|(a, m)| m * spin(a, w1) * spin(a, w2))
                .sum::<f64>()
                / z;
        }
        if p + 1 < s_len && !strip.fwd[p].is_empty() {
            let h: Vec<f64> = d[p + 1].iter().zip(&back[p + 1]).map(|(a, b)| a * b).collect();
            let mut kf = f.clone();
            apply_kernels(&mut kf, &strip.fwd[p], strip.beta);
            let den: f64 = kf.iter().zip(&h).map(|(a, b)| a * b).sum();
            for &(w, _, b) in &strip.fwd[p] {
                let mut g: Vec<f64> = f.iter().enumerate().map(|(a, x)| x * spin(a, w)).collect();
                apply_kernels(&mut g, &strip.fwd[p], strip.beta);
                let num: f64 = g
                    .iter()
                    .zip(&h)
                    .enumerate()
                    .map(|(a, (x, y))| x * y * spin(a, w))
                    .sum();
                corr[b] = num / den;
            }
        }
    }
    (corr, mag)
}

/// Slice weights for the chain conditioned on first-slice state `a0`, plus
/// the extra log scale. `None` when `a0` has zero weight.
fn conditioned_weights(strip: &Strip, d: &[Vec<f64>], a0: usize) -> Option<(Vec<Vec<f64>>, f64)> {
    let w0 = d[0][a0];
    if w0 == 0.0 {
        return None;
    }
    let mut dc = d.to_vec();
    let mut first = vec![0.0; d[0].len()];
    first[a0] = w0;
    dc[0] = first;
    let last = strip.slices - 1;
    let mut scale = 0.0;
    for &(w, k, _) in &strip.wrap {
        let s0 = spin(a0, w);
        scale += strip.beta * k.abs();
        for (b, x) in dc[last].iter_mut().enumerate() {
            *x *= (strip.beta * (k * s0 * spin(b, w) - k.abs())).exp();
        }
    }
    scale += normalize(&mut dc[last]);
    Some((dc, scale))
}

pub(crate) fn log_z(sys: &SpinSystem, width_cap: usize) -> Result<f64> {
    let strip = plan(sys, width_cap)?;
    let (d, dscale) = slice_weights(sys, &strip);
    if strip.wrap.is_empty() {
        return Ok(dscale + forward(&strip, &d, false).log_z);
    }
    let states = 1usize << strip.width;
    let parts: Vec<f64> = (0..states)
        .into_par_iter()
        .map(|a0| match conditioned_weights(&strip, &d, a0) {
            Some((dc, s)) => s + forward(&strip, &dc, false).log_z,
            None => f64::NEG_INFINITY,
        })
        .collect();
    Ok(dscale + log_sum_exp(&parts))
}

pub(crate) fn solve(sys: &SpinSystem, width_cap: usize) -> Result<TransferOutput> {
    let strip = plan(sys, width_cap)?;
    let (d, dscale) = slice_weights(sys, &strip);
    let nb = sys.bonds.len();
    if strip.wrap.is_empty() {
        let chain = forward(&strip, &d, true);
        let (bond_corr, magnetization) = chain_observables(&strip, &d, &chain, nb, sys.n);
        return Ok(TransferOutput {
            log_z: dscale + chain.log_z,
            bond_corr,
            magnetization,
        });
    }
    let states = 1usize << strip.width;
    let parts: Vec<Option<(f64, Vec<f64>, Vec<f64>)>> = (0..states)
        .into_par_iter()
        .map(|a0| {
            let (dc, s) = conditioned_weights(&strip, &d, a0)?;
            let chain = forward(&strip, &dc, true);
            let (mut corr, mag) = chain_observables(&strip, &dc, &chain, nb, sys.n);
            let last = strip.slices - 1;
            for &(w, _, b) in &strip.wrap {
                corr[b] = spin(a0, w) * mag[strip.site[last][w]];
            }
            Some((s + chain.log_z, corr, mag))
        })
        .collect();
    let logs: Vec<f64> = parts
        .iter()
        .map(|p| p.as_ref().map_or(f64::NEG_INFINITY, |x| x.0))
        .collect();
    let total = log_sum_exp(&logs);
    let mut bond_corr = vec![0.0; nb];
    let mut magnetization = vec![0.0; sys.n];
    for (lz, corr, mag) in parts.into_iter().flatten() {
        let wgt = (lz - total).exp();
        for (acc, c) in bond_corr.iter_mut().zip(&corr) {
            *acc += wgt * c;
        }
        for (acc, m) in magnetization.iter_mut().zip(&mag) {
            *acc += wgt * m;
        }
    }
    Ok(TransferOutput {
        log_z: dscale + total,
        bond_corr,
        magnetization,
    })
}
