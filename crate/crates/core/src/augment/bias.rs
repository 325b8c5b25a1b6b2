//! Multiplicative bias field `exp(sum c_ijk u^i v^j w^k)`, with `(u, v, w)`
//! the voxel coordinates mapped to [-1, 1] per axis.

use serde::{Deserialize, Serialize};

use super::{AugmentError, Result};
use crate::volume::Volume;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasFieldParams {
    pub order: u32,
    /// One coefficient per entry of [`monomials`]`(order)`, same order.
    pub coeffs: Vec<f32>,
}

impl BiasFieldParams {
    pub fn zeros(order: u32) -> Self {
        BiasFieldParams {
            order,
            coeffs: vec![0.0; monomials(order).len()],
        }
    }

    fn validate(&self) -> Result<Vec<[u32; 3]>> {
        let terms = monomials(self.order);
        if terms.len() != self.coeffs.len() || self.coeffs.iter().any(|c| !c.is_finite()) {
            return Err(AugmentError::InvalidParams(format!(
                "bias field of order {} needs {} finite coefficients, got {}",
                self.order,
                terms.len(),
                self.coeffs.len()
            )));
        }
        Ok(terms)
    }
}

/// Exponents `(i, j, k)` with `0 < i + j + k <= order`, ordered by `i`, then
/// `j`, then `k`. There are `C(order + 3, 3) - 1` of them.
pub fn monomials(order: u32) -> Vec<[u32; 3]> {
    let mut out = Vec::new();
    for i in 0..=order {
        for j in 0..=order - i {
            for k in 0..=order - i - j {
                if i + j + k > 0 {
                    out.push([i, j, k]);
                }
            }
        }
    }
    out
}

fn unit_coords(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.0];
    }
    (0..n).map(|i| -1.0 + 2.0 * i as f64 / (n - 1) as f64).collect()
}

fn powers(coords: &[f64], order: u32) -> Vec<Vec<f64>> {
    coords
        .iter()
        .map(|&c| (0..=order).map(|e| c.powi(e as i32)).collect())
        .collect()
}

pub fn bias_field(dims: [usize; 3], spacing: [f32; 3], p: &BiasFieldParams) -> Result<Volume> {
    let terms = p.validate()?;
    let pu = powers(&unit_coords(dims[0]), p.order);
    let pv = powers(&unit_coords(dims[1]), p.order);
    let pw = powers(&unit_coords(dims[2]), p.order);
    let coeffs: Vec<f64> = p.coeffs.iter().map(|&c| f64::from(c)).collect();
    Ok(Volume::from_fn(dims, spacing, |x, y, z| {
        let log_field: f64 = terms
            .iter()
            .zip(&coeffs)
            .map(|(&[i, j, k], c)| c * pu[x][i as usize] * pv[y][j as usize] * pw[z][k as usize])
            .sum();
        log_field.exp() as f32
    })?)
}

pub fn apply_bias(v: &Volume, p: &BiasFieldParams) -> Result<Volume> {
    let field = bias_field(v.dims(), v.spacing(), p)?;
    let data = v.data().iter().zip(field.data()).map(|(a, b)| a * b).collect();
    Ok(v.with_data(data)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_three_has_nineteen_terms() {
        assert_eq!(monomials(3).len(), 19);
        assert_eq!(monomials(1), vec![[0, 0, 1], [0, 1, 0], [1, 0, 0]]);
        for order in 0..6u32 {
            let n = (order + 1) * (order + 2) * (order + 3) / 6 - 1;
            assert_eq!(monomials(order).len() as u32, n);
        }
    }

    #[test]
    fn zero_coefficients_give_unit_field() {
        let f = bias_field([5, 4, 3], [1.0; 3], &BiasFieldParams::zeros(3)).unwrap();
        assert!(f.data().iter().all(|&v| v == 1.0));
        let v = Volume::from_fn([5, 4, 3], [1.0; 3], |x, y, z| (x + y + z) as f32).unwrap();
        let out = apply_bias(&v, &BiasFieldParams::zeros(3)).unwrap();
        for (a, b) in out.data().iter().zip(v.data()) {
            assert!((a - b).abs() <= 1e-5);
        }
    }

    #[test]
    fn linear_x_term_closed_form() {
        let mut p = BiasFieldParams::zeros(3);
        let idx = monomials(3).iter().position(|&m| m == [1, 0, 0]).unwrap();
        p.coeffs[idx] = 0.2;
        let f = bias_field([9, 5, 5], [1.0; 3], &p).unwrap();
        assert!((f64::from(f.get(0, 2, 2)) - (-0.2f64).exp()).abs() < 1e-6);
        assert!((f64::from(f.get(8, 2, 2)) - 0.2f64.exp()).abs() < 1e-6);
        assert!((f.get(4, 2, 2) - 1.0).abs() < 1e-7);
        for x in 0..9 {
            let u = -1.0 + 2.0 * x as f64 / 8.0;
            assert!((f64::from(f.get(x, 0, 4)) - (0.2 * u).exp()).abs() < 1e-6);
        }
    }

    #[test]
    fn field_bounded_by_coefficient_mass() {
        let coeffs: Vec<f32> = (0..19).map(|i| if i % 2 == 0 { 0.8 } else { -0.8 }).collect();
        let bound = coeffs.iter().map(|c| f64::from(c.abs())).sum::<f64>();
        let p = BiasFieldParams { order: 3, coeffs };
        let f = bias_field([7, 7, 7], [1.0; 3], &p).unwrap();
        for &v in f.data() {
            let v = f64::from(v);
            assert!(v > 0.0);
            assert!(v >= (-bound).exp() * (1.0 - 1e-6) && v <= bound.exp() * (1.0 + 1e-6));
        }
    }

    #[test]
    fn ratio_equals_field() {
        let p = BiasFieldParams {
            order: 3,
            coeffs: (0..19).map(|i| ((i * 7) % 5) as f32 * 0.1 - 0.2).collect(),
        };
        let v = Volume::from_fn([6, 5, 4], [1.0, 2.0, 1.5], |x, y, z| {
            ((x * 3 + y * 5 + z * 7) % 9) as f32 * 0.25 - 0.5
        })
        .unwrap();
        let out = apply_bias(&v, &p).unwrap();
        let field = bias_field(v.dims(), v.spacing(), &p).unwrap();
        for ((a, b), f) in out.data().iter().zip(v.data()).zip(field.data()) {
            if *b != 0.0 {
                assert!(((a / b) - f).abs() <= 1e-6 * f.max(1.0));
            }
        }
        let ones = Volume::filled([6, 5, 4], [1.0; 3], 1.0).unwrap();
        assert_eq!(apply_bias(&ones, &p).unwrap().data(), field.data());
    }

    #[test]
    fn wrong_coefficient_count_rejected() {
        let p = BiasFieldParams {
            order: 3,
            coeffs: vec![0.0; 18],
        };
        assert!(bias_field([2, 2, 2], [1.0; 3], &p).is_err());
    }
}
