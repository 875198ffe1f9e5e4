//! Compressible Neo-Hookean material.
//!
//! Strain energy per unit reference volume, with `C = FᵀF`, `J = det F` and
//! `Ī₁ = J^(-2/3) tr C`:
//!
//! ```text
//! W = μ/2 (Ī₁ - 3) + κ/2 (J - 1)²
//! S = 2 ∂W/∂C = μ J^(-2/3) (I - tr(C)/3 C⁻¹) + κ J (J - 1) C⁻¹
//! ```

use super::FemError;
use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

/// Material constants. Moduli in Pa, density in kg/m³, damping in 1/s.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaterialParams {
    pub young_e: f64,
    pub poisson_nu: f64,
    pub density_rho: f64,
    /// Mass-proportional Rayleigh damping coefficient.
    pub damping_alpha: f64,
}

impl Default for MaterialParams {
    fn default() -> Self {
        Self {
            young_e: 3000.0,
            poisson_nu: 0.49,
            density_rho: 1000.0,
            damping_alpha: 40.0,
        }
    }
}

impl MaterialParams {
    pub fn new(young_e: f64, poisson_nu: f64, density_rho: f64, damping_alpha: f64) -> Result<Self, FemError> {
        let m = Self {
            young_e,
            poisson_nu,
            density_rho,
            damping_alpha,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), FemError> {
        let ok = self.young_e > 0.0
            && self.poisson_nu > 0.0
            && self.poisson_nu < 0.5
            && self.density_rho > 0.0
            && self.damping_alpha >= 0.0
            && [self.young_e, self.poisson_nu, self.density_rho, self.damping_alpha]
                .iter()
                .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(FemError::InvalidMaterial(*self))
        }
    }

    pub fn shear_mu(&self) -> f64 {
        self.young_e / (2.0 * (1.0 + self.poisson_nu))
    }

    pub fn bulk_kappa(&self) -> f64 {
        self.young_e / (3.0 * (1.0 - 2.0 * self.poisson_nu))
    }

    /// Dilatational wave speed in mm/s.
    pub fn wave_speed(&self) -> f64 {
        let modulus = self.bulk_kappa() + 4.0 * self.shear_mu() / 3.0;
        (modulus / self.density_rho).sqrt() * 1e3
    }
}

/// Strain energy density (Pa) as a function of the right Cauchy-Green tensor.
/// Accepts non-symmetric `C` so that finite differences can perturb entries
/// independently.
pub fn strain_energy_from_c(c: &Matrix3<f64>, mat: &MaterialParams) -> Result<f64, FemError> {
    let det_c = c.determinant();
    if !(det_c > 0.0) {
        return Err(FemError::ElementInversion {
            element: None,
            det: det_c.signum() * det_c.abs().sqrt(),
        });
    }
    let j = det_c.sqrt();
    let i1_bar = j.powf(-2.0 / 3.0) * c.trace();
    Ok(0.5 * mat.shear_mu() * (i1_bar - 3.0) + 0.5 * mat.bulk_kappa() * (j - 1.0).powi(2))
}

pub fn strain_energy(f: &Matrix3<f64>, mat: &MaterialParams) -> Result<f64, FemError> {
    let det = f.determinant();
    if !(det > 0.0) {
        return Err(FemError::ElementInversion { element: None, det });
    }
    strain_energy_from_c(&(f.transpose() * f), mat)
}

/// Second Piola-Kirchhoff stress (Pa) for deformation gradient `f`.
pub fn neo_hookean_pk2(f: &Matrix3<f64>, mat: &MaterialParams) -> Result<Matrix3<f64>, FemError> {
    let j = f.determinant();
    if !(j > 0.0) {
        return Err(FemError::ElementInversion { element: None, det: j });
    }
    pk2_unchecked(f, j, mat.shear_mu(), mat.bulk_kappa())
        .ok_or(FemError::ElementInversion { element: None, det: j })
}

#[inline]
pub(crate) fn pk2_unchecked(f: &Matrix3<f64>, j: f64, mu: f64, kappa: f64) -> Option<Matrix3<f64>> {
    let c = f.transpose() * f;
    let c_inv = c.try_inverse()?;
    let j23 = j.powf(-2.0 / 3.0);
    let dev = (Matrix3::identity() - c_inv * (c.trace() / 3.0)) * (mu * j23);
    Some(dev + c_inv * (kappa * j * (j - 1.0)))
}
