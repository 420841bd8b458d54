use alloc::format;
use alloc::vec::Vec;

use crate::diffcore::{Tape, Tensor, Var};
use crate::{Error, Result};

/// Nodes with `s < pe < e`. When none qualifies, the single node nearest to
/// the span midpoint is used instead and the flag is set.
pub fn align_indices(pe: &[f64], s: f64, e: f64) -> Result<(Vec<usize>, bool)> {
    if !(s < e) {
        return Err(Error::Validation(format!("align span ({s}, {e}) is empty")));
    }
    if pe.is_empty() {
        return Err(Error::Validation("align needs at least one node".into()));
    }
    let inside: Vec<usize> = (0..pe.len()).filter(|&j| s < pe[j] && pe[j] < e).collect();
    if !inside.is_empty() {
        return Ok((inside, false));
    }
    let mid = 0.5 * (s + e);
    let mut best = 0;
    for j in 1..pe.len() {
        if (pe[j] - mid).abs() < (pe[best] - mid).abs() {
            best = j;
        }
    }
    Ok((alloc::vec![best], true))
}

/// Mean of the rows selected by [`align_indices`], plus the fallback flag.
pub fn align(x: &Tensor, pe: &[f64], s: f64, e: f64) -> Result<(Vec<f64>, bool)> {
    if x.rows() != pe.len() {
        return Err(Error::dim("align", x.shape(), &[pe.len()]));
    }
    let (idx, fallback) = align_indices(pe, s, e)?;
    let w = x.row_width();
    let mut out = alloc::vec![0.0; w];
    for &j in &idx {
        for (o, v) in out.iter_mut().zip(x.row(j)) {
            *o += v;
        }
    }
    for o in &mut out {
        *o /= idx.len() as f64;
    }
    Ok((out, fallback))
}

/// One aligned row per group of node indices, recorded on the tape.
pub fn align_many(tape: &mut Tape, x: Var, groups: &[Vec<usize>]) -> Result<Var> {
    let mut idx = Vec::new();
    let mut ids = Vec::new();
    for (g, members) in groups.iter().enumerate() {
        if members.is_empty() {
            return Err(Error::Validation(format!("align group {g} is empty")));
        }
        idx.extend_from_slice(members);
        ids.extend(core::iter::repeat(g).take(members.len()));
    }
    let rows = tape.gather_rows(x, &idx)?;
    Ok(tape.segment_mean(rows, &ids, groups.len())?.0)
}
