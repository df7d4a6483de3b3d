//! Rotary position encoding. Positions enter attention only through the
//! block-diagonal rotation applied to query and key vectors; there is no
//! absolute positional embedding anywhere in the model.

use crate::linalg::Matrix;
use crate::scalar::Real;

use super::ModelError;

/// Precomputed `cos`/`sin` tables for positions `0..t_max`, pairs `0..d_head/2`.
#[derive(Debug, Clone)]
pub struct RopeTable<T> {
    half: usize,
    cos: Vec<T>,
    sin: Vec<T>,
}

impl<T: Real> RopeTable<T> {
    /// Angle for pair `i` at distance `t` is `t * theta^(-2i/d_head)`.
    pub fn new(d_head: usize, theta: f64, t_max: usize) -> Result<Self, ModelError> {
        if d_head % 2 != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "RoPE requires an even head dimension, got {d_head}"
            )));
        }
        let half = d_head / 2;
        let freqs: Vec<f64> =
            (0..half).map(|i| theta.powf(-2.0 * i as f64 / d_head as f64)).collect();
        let mut cos = Vec::with_capacity(t_max * half);
        let mut sin = Vec::with_capacity(t_max * half);
        for t in 0..t_max {
            for &f in &freqs {
                let a = t as f64 * f;
                cos.push(T::from_f64(a.cos()));
                sin.push(T::from_f64(a.sin()));
            }
        }
        Ok(Self { half, cos, sin })
    }

    /// Rotates `v` (length `d_head`) in place by the rotation for position `t`.
    #[inline]
    pub fn rotate(&self, v: &mut [T], t: usize) {
        let base = t * self.half;
        for i in 0..self.half {
            let (c, s) = (self.cos[base + i], self.sin[base + i]);
            let (x, y) = (v[2 * i], v[2 * i + 1]);
            v[2 * i] = c * x - s * y;
            v[2 * i + 1] = s * x + c * y;
        }
    }

    /// Inverse rotation (transpose), used by the backward pass.
    #[inline]
    pub fn rotate_inv(&self, v: &mut [T], t: usize) {
        let base = t * self.half;
        for i in 0..self.half {
            let (c, s) = (self.cos[base + i], self.sin[base + i]);
            let (x, y) = (v[2 * i], v[2 * i + 1]);
            v[2 * i] = c * x + s * y;
            v[2 * i + 1] = c * y - s * x;
        }
    }
}

/// The explicit `d_head x d_head` rotation matrix `R_{delta_t}`:
/// block-diagonal 2x2 rotations with angles `delta_t * theta^(-2i/d_head)`.
/// `delta_t = 0` gives the identity.
pub fn rope_matrix(d_head: usize, theta: f64, delta_t: usize) -> Result<Matrix, ModelError> {
    if d_head % 2 != 0 {
        return Err(ModelError::InvalidConfig(format!(
            "RoPE requires an even head dimension, got {d_head}"
        )));
    }
    let mut m = Matrix::zeros(d_head, d_head);
    for i in 0..d_head / 2 {
        let a = delta_t as f64 * theta.powf(-2.0 * i as f64 / d_head as f64);
        let (c, s) = (a.cos(), a.sin());
        m.set(2 * i, 2 * i, c);
        m.set(2 * i, 2 * i + 1, -s);
        m.set(2 * i + 1, 2 * i, s);
        m.set(2 * i + 1, 2 * i + 1, c);
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_distance_is_identity() {
        let r = rope_matrix(8, 10_000.0, 0).unwrap();
        assert!((r.sub(&Matrix::identity(8))).frobenius_norm() < 1e-15);
    }

    #[test]
    fn rotations_compose_additively() {
        let a = rope_matrix(8, 10_000.0, 5).unwrap();
        let b = rope_matrix(8, 10_000.0, 12).unwrap();
        let ab = rope_matrix(8, 10_000.0, 17).unwrap();
        assert!(a.matmul(&b).sub(&ab).frobenius_norm() < 1e-12);
    }

    #[test]
    fn rotations_are_orthogonal() {
        let r = rope_matrix(16, 10_000.0, 9).unwrap();
        let gram = r.transpose().matmul(&r);
        assert!(gram.sub(&Matrix::identity(16)).frobenius_norm() < 1e-12);
    }

    #[test]
    fn odd_head_dimension_rejected() {
        assert!(rope_matrix(7, 10_000.0, 1).is_err());
        assert!(RopeTable::<f64>::new(5, 10_000.0, 4).is_err());
    }

    #[test]
    fn table_matches_matrix_and_inverts() {
        let table = RopeTable::<f64>::new(8, 10_000.0, 32).unwrap();
        let r = rope_matrix(8, 10_000.0, 11).unwrap();
        let v: Vec<f64> = (0..8).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut rotated = v.clone();
        table.rotate(&mut rotated, 11);
        for i in 0..8 {
            let want: f64 = (0..8).map(|j| r.get(i, j) * v[j]).sum();
            assert!((rotated[i] - want).abs() < 1e-12);
        }
        let mut back = rotated.clone();
        table.rotate_inv(&mut back, 11);
        for (x, y) in back.iter().zip(&v) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
