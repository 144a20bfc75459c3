//! Velocity-field abstractions so samplers and distillation targets work
//! with trained networks and closed-form fields alike.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::nn::{Condition, DualTimeVelocityNet, VelocityNet};

/// Instantaneous velocity `v(z, t, c)` evaluated row-wise on a batch.
pub trait VelocityField {
    fn dim(&self) -> usize;

    fn velocity(&self, z: ArrayView2<f64>, t: &[f64], cond: &[Condition]) -> Result<Array2<f64>>;
}

/// Average velocity `u(z, t, r, c)` over `[t, r]`, evaluated row-wise.
pub trait AverageVelocityField {
    fn dim(&self) -> usize;

    fn average_velocity(
        &self,
        z: ArrayView2<f64>,
        t: &[f64],
        r: &[f64],
        cond: &[Condition],
    ) -> Result<Array2<f64>>;
}

impl VelocityField for VelocityNet {
    fn dim(&self) -> usize {
        self.arch().d
    }

    fn velocity(&self, z: ArrayView2<f64>, t: &[f64], cond: &[Condition]) -> Result<Array2<f64>> {
        self.forward(z, t, cond)
    }
}

impl AverageVelocityField for DualTimeVelocityNet {
    fn dim(&self) -> usize {
        self.arch().d
    }

    fn average_velocity(
        &self,
        z: ArrayView2<f64>,
        t: &[f64],
        r: &[f64],
        cond: &[Condition],
    ) -> Result<Array2<f64>> {
        self.forward(z, t, r, cond)
    }
}

fn check_dim(z: &ArrayView2<f64>, d: usize) -> Result<()> {
    if z.ncols() != d {
        return Err(Error::Shape(format!(
            "state has {} columns, expected {d}",
            z.ncols()
        )));
    }
    Ok(())
}

/// The same vector at every state and time. Also usable as an average field.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstantField {
    pub value: Vec<f64>,
}

impl ConstantField {
    pub fn new(value: Vec<f64>) -> Self {
        Self { value }
    }

    fn broadcast(&self, z: &ArrayView2<f64>) -> Result<Array2<f64>> {
        check_dim(z, self.value.len())?;
        let mut out = Array2::zeros(z.raw_dim());
        for mut row in out.outer_iter_mut() {
            row.assign(&ndarray::aview1(&self.value));
        }
        Ok(out)
    }
}

impl VelocityField for ConstantField {
    fn dim(&self) -> usize {
        self.value.len()
    }

    fn velocity(&self, z: ArrayView2<f64>, _t: &[f64], _cond: &[Condition]) -> Result<Array2<f64>> {
        self.broadcast(&z)
    }
}

impl AverageVelocityField for ConstantField {
    fn dim(&self) -> usize {
        self.value.len()
    }

    fn average_velocity(
        &self,
        z: ArrayView2<f64>,
        _t: &[f64],
        _r: &[f64],
        _cond: &[Condition],
    ) -> Result<Array2<f64>> {
        self.broadcast(&z)
    }
}

/// Planar rotation `v(z) = (-z_2, z_1)`; its exact flow is a rotation by `r - t`.
#[derive(Debug, Clone, Copy, Default)]
pub struct RotationField;

impl VelocityField for RotationField {
    fn dim(&self) -> usize {
        2
    }

    fn velocity(&self, z: ArrayView2<f64>, _t: &[f64], _cond: &[Condition]) -> Result<Array2<f64>> {
        check_dim(&z, 2)?;
        let mut out = Array2::zeros(z.raw_dim());
        for (mut o, zi) in out.outer_iter_mut().zip(z.outer_iter()) {
            o[0] = -zi[1];
            o[1] = zi[0];
        }
        Ok(out)
    }
}

/// Field given by a per-point closure `f(z, t, c)`.
pub struct FnField<F> {
    d: usize,
    f: F,
}

impl<F> FnField<F>
where
    F: Fn(&[f64], f64, Condition) -> Vec<f64>,
{
    pub fn new(d: usize, f: F) -> Self {
        Self { d, f }
    }
}

impl<F> VelocityField for FnField<F>
where
    F: Fn(&[f64], f64, Condition) -> Vec<f64>,
{
    fn dim(&self) -> usize {
        self.d
    }

    fn velocity(&self, z: ArrayView2<f64>, t: &[f64], cond: &[Condition]) -> Result<Array2<f64>> {
        check_dim(&z, self.d)?;
        let mut out = Array2::zeros(z.raw_dim());
        for (i, mut o) in out.outer_iter_mut().enumerate() {
            let zi = z.row(i).to_vec();
            let v = (self.f)(&zi, t[i], cond[i]);
            if v.len() != self.d {
                return Err(Error::Shape(format!(
                    "field returned {} components, expected {}",
                    v.len(),
                    self.d
                )));
            }
            o.assign(&ndarray::aview1(&v));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn rotation_is_perpendicular() {
        let z = array![[1.0, 0.0], [0.5, 2.0]];
        let v = RotationField
            .velocity(z.view(), &[0.0, 0.0], &[Condition::Null; 2])
            .unwrap();
        assert_eq!(v, array![[0.0, 1.0], [-2.0, 0.5]]);
    }

    #[test]
    fn constant_field_checks_dimension() {
        let f = ConstantField::new(vec![1.0, 2.0]);
        let z = Array2::zeros((3, 3));
        assert!(f
            .velocity(z.view(), &[0.0; 3], &[Condition::Null; 3])
            .is_err());
    }
}
