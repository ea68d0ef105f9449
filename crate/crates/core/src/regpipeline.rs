//! Two-step reconstructions `R_α = Φ ∘ B_α` and their parameter choice.

use std::sync::Arc;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filters::{check_alpha, FilterSpec};
use crate::linop::DenseOperator;
use crate::network::{power_iteration, NullSpaceNetwork};

/// A classical filter paired with a null-space network on the same operator.
#[derive(Debug, Clone)]
pub struct MRegularizer {
    filter: FilterSpec,
    operator: Arc<DenseOperator>,
    phi: NullSpaceNetwork,
}

impl MRegularizer {
    pub fn new(filter: FilterSpec, operator: Arc<DenseOperator>, phi: NullSpaceNetwork) -> Result<Self> {
        if !Arc::ptr_eq(&operator, phi.operator()) && operator.content_hash() != phi.operator().content_hash() {
            return Err(Error::Integrity(
                "null-space network was built for a different operator".into(),
            ));
        }
        filter.validate_for(operator.lambda_max())?;
        Ok(Self { filter, operator, phi })
    }

    pub fn filter(&self) -> &FilterSpec {
        &self.filter
    }

    pub fn operator(&self) -> &Arc<DenseOperator> {
        &self.operator
    }

    pub fn phi(&self) -> &NullSpaceNetwork {
        &self.phi
    }

    /// `A^M y = Φ(A⁺ y)`.
    pub fn m_generalized_inverse(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        self.phi.apply(&self.operator.pinv_apply(y)?)
    }

    /// `Φ(B_α y^δ)`.
    pub fn reconstruct_two_step(&self, alpha: f64, y_delta: &DVector<f64>) -> Result<DVector<f64>> {
        self.phi.apply(&self.filter.reconstruct(&self.operator, alpha, y_delta)?)
    }

    /// `x₁ + Q N(x₁)` with `x₁ = B_α y^δ` and `Q = Id − B_{φ(α)} A`.
    pub fn reconstruct_two_step_approx(&self, alpha: f64, phi_alpha: f64, y_delta: &DVector<f64>) -> Result<DVector<f64>> {
        let q = ApproxProjector::without_deviation(Arc::clone(&self.operator), self.filter.clone(), phi_alpha)?;
        self.reconstruct_two_step_with(alpha, &q, y_delta)
    }

    /// As [`Self::reconstruct_two_step_approx`] with a prebuilt projector.
    pub fn reconstruct_two_step_with(&self, alpha: f64, q: &ApproxProjector, y_delta: &DVector<f64>) -> Result<DVector<f64>> {
        let x1 = self.filter.reconstruct(&self.operator, alpha, y_delta)?;
        let n = self.phi.base().forward(&x1)?;
        Ok(&x1 + q.apply(&n)?)
    }
}

/// A-priori rule `α*(δ) = d · (δ/ρ)^{2/(2μ+1)}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamChoice {
    pub smoothness_mu: f64,
    pub source_radius_rho: f64,
    pub constant_d: f64,
}

impl ParamChoice {
    pub fn new(smoothness_mu: f64, source_radius_rho: f64, constant_d: f64) -> Result<Self> {
        for (name, v) in [("mu", smoothness_mu), ("rho", source_radius_rho), ("d", constant_d)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Contract(format!("parameter {name} must be positive, got {v}")));
            }
        }
        Ok(Self {
            smoothness_mu,
            source_radius_rho,
            constant_d,
        })
    }

    pub fn alpha_star(&self, delta: f64) -> Result<f64> {
        if !(delta > 0.0) || !delta.is_finite() {
            return Err(Error::Contract(format!("noise level must be positive, got {delta}")));
        }
        let exponent = 2.0 / (2.0 * self.smoothness_mu + 1.0);
        Ok(self.constant_d * (delta / self.source_radius_rho).powf(exponent))
    }

    /// `2μ/(2μ+1)`.
    pub fn expected_rate(&self) -> f64 {
        2.0 * self.smoothness_mu / (2.0 * self.smoothness_mu + 1.0)
    }
}

/// `Φ((A*A)^μ w)`; the caller controls the radius through `‖w‖`.
pub fn source_element(op: &DenseOperator, phi: &NullSpaceNetwork, mu: f64, w: &DVector<f64>) -> Result<DVector<f64>> {
    phi.apply(&op.frac_power_apply(mu, w)?)
}

/// `Q = Id − B_{φ(α)} A`, a kernel-side stand-in for `P_ker(A)`.
#[derive(Debug, Clone)]
pub struct ApproxProjector {
    operator: Arc<DenseOperator>,
    filter: FilterSpec,
    phi_alpha: f64,
    deviation: Option<f64>,
}

impl ApproxProjector {
    fn without_deviation(operator: Arc<DenseOperator>, filter: FilterSpec, phi_alpha: f64) -> Result<Self> {
        check_alpha(phi_alpha)?;
        filter.validate_for(operator.lambda_max())?;
        Ok(Self {
            operator,
            filter,
            phi_alpha,
            deviation: None,
        })
    }

    pub fn apply(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(x - self.filter.reconstruct(&self.operator, self.phi_alpha, &self.operator.apply(x)?)?)
    }

    pub fn phi_alpha(&self) -> f64 {
        self.phi_alpha
    }

    /// `‖Q − P_ker(A)‖`, measured by power iteration when the projector was
    /// built with [`approx_projector`].
    pub fn deviation(&self) -> Option<f64> {
        self.deviation
    }
}

/// Builds `Q = Id − B_{φ(α)} A` and measures `‖Q − P_ker(A)‖`.
pub fn approx_projector(op: Arc<DenseOperator>, filter: FilterSpec, phi_alpha: f64) -> Result<ApproxProjector> {
    let mut q = ApproxProjector::without_deviation(op, filter, phi_alpha)?;
    let diff = |x: &DVector<f64>| -> DVector<f64> {
        let qx = q.apply(x).expect("dimension fixed by power iteration");
        let px = q.operator.proj_ker(x).expect("dimension fixed by power iteration");
        qx - px
    };
    // Q − P_ker is a function of A*A, hence self-adjoint
    let s = power_iteration(q.operator.cols(), diff, diff, None)?;
    q.deviation = Some(s.value);
    Ok(q)
}
