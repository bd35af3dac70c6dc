//! Rotation matrices from plane-rotation angles.
//!
//! A d-dimensional rotation is the product of d(d-1)/2 plane rotations, one
//! per coordinate pair (i, j) with i < j. The pair order is lexicographic
//! and the product is applied left to right:
//!   R = G(0,1) * G(0,2) * ... * G(d-2, d-1).
//! Each G is the identity except for the (i, j) plane, where it rotates by
//! its angle. The result is orthogonal with determinant +1, which is what
//! the covariance parametrization Sigma = R S S R^T relies on.

use super::matrix::Matrix;
use crate::{Error, Result};

/// Number of plane-rotation angles for dimension `d`.
pub fn angle_count(d: usize) -> usize {
    d * (d - 1) / 2
}

pub fn rotation_matrix(angles: &[f64], d: usize) -> Result<Matrix> {
    if d < 2 {
        return Err(Error::parameter(format!(
            "rotation_matrix requires d >= 2, got {d}"
        )));
    }
    let expected = angle_count(d);
    if angles.len() != expected {
        return Err(Error::arity("rotation angle count", expected, angles.len()));
    }
    if angles.iter().any(|a| !a.is_finite()) {
        return Err(Error::domain("rotation angles must be finite"));
    }
    let mut r = Matrix::identity(d);
    let mut idx = 0;
    for i in 0..d {
        for j in (i + 1)..d {
            let (s, c) = angles[idx].sin_cos();
            idx += 1;
            let mut g = Matrix::identity(d);
            g.set(i, i, c)?;
            g.set(i, j, -s)?;
            g.set(j, i, s)?;
            g.set(j, j, c)?;
            r = r.matmul(&g)?;
        }
    }
    Ok(r)
}
