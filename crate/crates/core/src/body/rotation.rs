//! Continuous 6D rotation representation.
//!
//! The six numbers are two 3-vectors `a`, `b`; Gram-Schmidt turns them into
//! the first two columns of a rotation and the cross product supplies the
//! third.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

/// 6D encoding of the identity rotation.
pub const IDENTITY_6D: [f64; 6] = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0];

const MIN_NORM: f64 = 1e-9;

/// Decodes a 6D vector into a proper rotation matrix.
pub fn decode(r6: &[f64; 6]) -> Result<Matrix3<f64>> {
    let a = Vector3::new(r6[0], r6[1], r6[2]);
    let b = Vector3::new(r6[3], r6[4], r6[5]);
    if !r6.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidParameter("non-finite 6D rotation".into()));
    }
    let na = a.norm();
    if na < MIN_NORM {
        return Err(Error::InvalidParameter("6D rotation has a vanishing first column".into()));
    }
    let b1 = a / na;
    let u = b - b1 * b1.dot(&b);
    let nu = u.norm();
    if nu < MIN_NORM {
        return Err(Error::InvalidParameter("6D rotation columns are parallel".into()));
    }
    let b2 = u / nu;
    let b3 = b1.cross(&b2);
    Ok(Matrix3::from_columns(&[b1, b2, b3]))
}

/// Encodes a rotation matrix as its first two columns.
pub fn encode(r: &Matrix3<f64>) -> [f64; 6] {
    [r[(0, 0)], r[(1, 0)], r[(2, 0)], r[(0, 1)], r[(1, 1)], r[(2, 1)]]
}

/// Pulls a gradient with respect to the decoded matrix back to the 6 inputs.
pub fn backprop(r6: &[f64; 6], grad_r: &Matrix3<f64>) -> [f64; 6] {
    let a = Vector3::new(r6[0], r6[1], r6[2]);
    let b = Vector3::new(r6[3], r6[4], r6[5]);
    let na = a.norm();
    let b1 = a / na;
    let u = b - b1 * b1.dot(&b);
    let nu = u.norm();
    let b2 = u / nu;

    let g1 = grad_r.column(0).into_owned();
    let g2 = grad_r.column(1).into_owned();
    let g3 = grad_r.column(2).into_owned();

    // b3 = b1 x b2
    let mut gb1 = g1 + b2.cross(&g3);
    let gb2 = g2 + g3.cross(&b1);

    // b2 = u / |u|
    let gu = (gb2 - b2 * b2.dot(&gb2)) / nu;

    // u = b - (b1 . b) b1
    let gb = gu - b1 * b1.dot(&gu);
    gb1 -= b * b1.dot(&gu) + gu * b1.dot(&b);

    // b1 = a / |a|
    let ga = (gb1 - b1 * b1.dot(&gb1)) / na;
    [ga.x, ga.y, ga.z, gb.x, gb.y, gb.z]
}
