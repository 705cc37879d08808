//! Rotary position embedding, applied and removed.
//!
//! Each `d_head`-wide head slice is split into an upper half `x` and a lower
//! half `y`; pair `j` is rotated by `theta = pos * base^(-2j / d_head)`:
//! `x' = x cos - y sin`, `y' = y cos + x sin`. Removal applies the transpose
//! rotation. Stored chunk caches keep keys with the rotation removed so that
//! they can be re-rotated at any new position.

use ndarray::{Array2, ArrayViewMut1, Axis};

use crate::error::{Error, Result};

pub fn apply_rpe(
    vectors: &Array2<f64>,
    positions: &[usize],
    d_head: usize,
    base: f64,
) -> Result<Array2<f64>> {
    let mut out = vectors.clone();
    rotate_rows(&mut out, positions, d_head, base, false)?;
    Ok(out)
}

pub fn remove_rpe(
    vectors: &Array2<f64>,
    positions: &[usize],
    d_head: usize,
    base: f64,
) -> Result<Array2<f64>> {
    let mut out = vectors.clone();
    rotate_rows(&mut out, positions, d_head, base, true)?;
    Ok(out)
}

/// Rotates every row of `m` in place; `inverse` undoes a previous rotation
/// at the same positions.
pub(crate) fn rotate_rows(
    m: &mut Array2<f64>,
    positions: &[usize],
    d_head: usize,
    base: f64,
    inverse: bool,
) -> Result<()> {
    if m.nrows() != positions.len() {
        return Err(Error::Shape(format!(
            "{} rows but {} positions",
            m.nrows(),
            positions.len()
        )));
    }
    if d_head == 0 || d_head % 2 != 0 || m.ncols() % d_head != 0 {
        return Err(Error::Shape(format!(
            "row width {} is not a multiple of even head width {}",
            m.ncols(),
            d_head
        )));
    }
    let freqs = frequencies(d_head, base);
    for (row, &pos) in m.axis_iter_mut(Axis(0)).zip(positions) {
        rotate_row(row, pos, d_head, &freqs, inverse);
    }
    Ok(())
}

pub(crate) fn frequencies(d_head: usize, base: f64) -> Vec<f64> {
    let half = d_head / 2;
    (0..half)
        .map(|j| base.powf(-2.0 * j as f64 / d_head as f64))
        .collect()
}

pub(crate) fn rotate_row(
    mut row: ArrayViewMut1<f64>,
    pos: usize,
    d_head: usize,
    freqs: &[f64],
    inverse: bool,
) {
    if pos == 0 {
        return;
    }
    let half = d_head / 2;
    let sign = if inverse { -1.0 } else { 1.0 };
    for head in 0..row.len() / d_head {
        let off = head * d_head;
        for (j, &f) in freqs.iter().enumerate() {
            let (s, c) = (pos as f64 * f).sin_cos();
            let s = sign * s;
            let x = row[off + j];
            let y = row[off + half + j];
            row[off + j] = x * c - y * s;
            row[off + half + j] = y * c + x * s;
        }
    }
}
