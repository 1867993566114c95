//! Real spherical harmonics up to degree 2.

use crate::autodiff::sigmoid;
use crate::error::{Error, Result};
use crate::geometry::Vec3;

pub const SH_BASIS: usize = 9;
pub const SH_COEFFS: usize = 3 * SH_BASIS;

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
pub const SH_C1: f64 = 0.488_602_511_902_919_9;
pub const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];

/// Basis values in `(l, m)` order `(0,0), (1,-1), (1,0), (1,1), (2,-2) .. (2,2)`.
/// No unit-length check; see [`sh_basis`].
#[inline]
pub fn sh_basis_unchecked(d: &Vec3) -> [f64; SH_BASIS] {
    let (x, y, z) = (d.x, d.y, d.z);
    [
        SH_C0,
        -SH_C1 * y,
        SH_C1 * z,
        -SH_C1 * x,
        SH_C2[0] * x * y,
        SH_C2[1] * y * z,
        SH_C2[2] * (2.0 * z * z - x * x - y * y),
        SH_C2[3] * x * z,
        SH_C2[4] * (x * x - y * y),
    ]
}

pub fn sh_basis(d: &Vec3) -> Result<[f64; SH_BASIS]> {
    let n = d.norm();
    if !((n - 1.0).abs() <= 1e-6) {
        return Err(Error::invalid(format!(
            "direction must be unit length, |d| = {n}"
        )));
    }
    Ok(sh_basis_unchecked(d))
}

/// Per-channel pre-sigmoid values `sum_m k[c * 9 + m] * Y_m`.
#[inline]
pub fn sh_logits(k: &[f64], basis: &[f64; SH_BASIS]) -> [f64; 3] {
    let mut out = [0.0; 3];
    for (c, o) in out.iter_mut().enumerate() {
        *o = k[c * SH_BASIS..(c + 1) * SH_BASIS]
            .iter()
            .zip(basis)
            .map(|(a, b)| a * b)
            .sum();
    }
    out
}

/// View-dependent RGB of 27 coefficients (9 per channel) seen along `d`.
pub fn sh_to_color(k: &[f64], d: &Vec3) -> Result<[f64; 3]> {
    if k.len() != SH_COEFFS {
        return Err(Error::invalid(format!(
            "expected {SH_COEFFS} SH coefficients, got {}",
            k.len()
        )));
    }
    let basis = sh_basis(d)?;
    Ok(sh_logits(k, &basis).map(sigmoid))
}
