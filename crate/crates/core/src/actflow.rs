//! The activation flow `phi(tau, Z) = (1 - h(tau)) Z + h(tau) a(Z)`.
//!
//! It deforms the identity (`tau = 0`) into the activation (`tau = 1`). For
//! `tau < 1` it is strictly increasing in each coordinate and hence
//! invertible, which gives the transport velocity
//! `v(tau, z) = h'(tau) (a(Z) - Z)` with `Z = phi^-1(tau, z)`.
//!
//! The velocity of saturating activations blows up like `h' / (1 - h)` near
//! `tau = 1`; consumers stop the flow at `1 - eps_act` and account for the
//! remaining `(1 - h(1 - eps_act)) |a(Z) - Z|`.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nettypes::ActivationKind;
use crate::timescale::TimeScale;

pub const DEFAULT_EPS_ACT: f64 = 0.05;

const INVERSE_TOL: f64 = 1e-12;
const INVERSE_MAX_ITER: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActivationFlow {
    activation: ActivationKind,
    timescale: TimeScale,
}

fn check_tau_closed(tau: f64) -> Result<()> {
    if (0.0..=1.0).contains(&tau) {
        Ok(())
    } else {
        Err(Error::TimeOutOfRange { time: tau, start: 0.0, end: 1.0 })
    }
}

fn check_tau_open(tau: f64) -> Result<()> {
    if (0.0..1.0).contains(&tau) {
        Ok(())
    } else {
        Err(Error::TimeOutOfRange { time: tau, start: 0.0, end: 1.0 })
    }
}

impl ActivationFlow {
    pub fn new(activation: ActivationKind, timescale: TimeScale) -> Self {
        Self { activation, timescale }
    }

    pub fn activation(&self) -> ActivationKind {
        self.activation
    }

    pub fn timescale(&self) -> TimeScale {
        self.timescale
    }

    fn phi_scalar(&self, h: f64, one_minus_h: f64, z: f64) -> f64 {
        match self.activation {
            ActivationKind::Identity => z,
            ActivationKind::Relu | ActivationKind::LeakyRelu(_) if z >= 0.0 => z,
            ActivationKind::Relu => one_minus_h * z,
            _ => one_minus_h * z + h * self.activation.apply(z),
        }
    }

    pub fn phi(&self, tau: f64, z: &DVector<f64>) -> Result<DVector<f64>> {
        check_tau_closed(tau)?;
        let h = self.timescale.h(tau);
        let c = self.timescale.one_minus_h(tau);
        Ok(z.map(|v| self.phi_scalar(h, c, v)))
    }

    /// `1 - h(tau)`, the slope of `phi` where `a' = 0`; an error once it underflows to 0.
    fn inverse_floor(&self, tau: f64) -> Result<f64> {
        let c = self.timescale.one_minus_h(tau);
        if c > 0.0 {
            Ok(c)
        } else {
            Err(Error::Singular(format!("activation flow is not invertible at tau = {tau}")))
        }
    }

    /// Closed-form scalar inverse where one exists.
    fn inverse_closed_form(&self, h: f64, c: f64, z: f64) -> Option<f64> {
        match self.activation {
            ActivationKind::Identity => Some(z),
            // min(z, z / (1 - h))
            ActivationKind::Relu => Some(if z >= 0.0 { z } else { z / c }),
            ActivationKind::LeakyRelu(slope) => Some(if z >= 0.0 { z } else { z / (c + h * slope) }),
            ActivationKind::Tanh => None,
        }
    }

    /// Scalar root of the monotone equation `phi(tau, Z) = z`.
    ///
    /// Newton steps, falling back to bisection whenever a step leaves the
    /// current bracket. The initial bracket follows from the slope of `phi`
    /// being at least `1 - h`.
    fn inverse_numeric(&self, h: f64, c: f64, z: f64) -> f64 {
        let g = |x: f64| self.phi_scalar(h, c, x) - z;
        let slope = |x: f64| c + h * self.activation.derivative(x);

        let g0 = g(z);
        if g0 == 0.0 {
            return z;
        }
        let radius = g0.abs() / c;
        let (mut lo, mut hi) = (z - radius, z + radius);
        let mut x = z;
        for _ in 0..INVERSE_MAX_ITER {
            let gx = g(x);
            if gx == 0.0 {
                return x;
            }
            if gx > 0.0 {
                hi = x;
            } else {
                lo = x;
            }
            let newton = x - gx / slope(x);
            let next = if newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
            let step = (next - x).abs();
            x = next;
            if step <= INVERSE_TOL * x.abs().max(1.0) || hi - lo <= INVERSE_TOL * x.abs().max(1.0) {
                break;
            }
        }
        x
    }

    /// `phi^-1(tau, z)` for `tau` in `[0, 1)`, closed form where available.
    pub fn phi_inv(&self, tau: f64, z: &DVector<f64>) -> Result<DVector<f64>> {
        check_tau_open(tau)?;
        let h = self.timescale.h(tau);
        let c = self.inverse_floor(tau)?;
        Ok(z.map(|v| self.inverse_closed_form(h, c, v).unwrap_or_else(|| self.inverse_numeric(h, c, v))))
    }

    /// `phi^-1` through the numeric root finder regardless of the activation.
    pub fn phi_inv_numeric(&self, tau: f64, z: &DVector<f64>) -> Result<DVector<f64>> {
        check_tau_open(tau)?;
        let h = self.timescale.h(tau);
        let c = self.inverse_floor(tau)?;
        Ok(z.map(|v| self.inverse_numeric(h, c, v)))
    }

    /// Transport velocity `h'(tau) (a(Z) - Z)`, `Z = phi^-1(tau, z)`.
    ///
    /// For ReLU this is `relu(h' / (h - 1) z)`.
    pub fn velocity(&self, tau: f64, z: &DVector<f64>) -> Result<DVector<f64>> {
        check_tau_open(tau)?;
        let h_dot = self.timescale.h_dot(tau);
        if h_dot == 0.0 {
            return Ok(DVector::zeros(z.len()));
        }
        if self.activation == ActivationKind::Relu {
            let rate = h_dot / -self.inverse_floor(tau)?;
            return Ok(z.map(|v| (rate * v).max(0.0)));
        }
        self.velocity_from_inverse(h_dot, &self.phi_inv(tau, z)?)
    }

    /// Velocity through the numeric inverse, for cross-checking closed forms.
    pub fn velocity_numeric(&self, tau: f64, z: &DVector<f64>) -> Result<DVector<f64>> {
        check_tau_open(tau)?;
        let h_dot = self.timescale.h_dot(tau);
        self.velocity_from_inverse(h_dot, &self.phi_inv_numeric(tau, z)?)
    }

    fn velocity_from_inverse(&self, h_dot: f64, pre_image: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(pre_image.map(|x| h_dot * (self.activation.apply(x) - x)))
    }

    /// Diagonal of `J(tau, Z) = d phi / dZ = (1 - h) + h a'(Z)`.
    pub fn jacobian(&self, tau: f64, z: &DVector<f64>) -> Result<DVector<f64>> {
        check_tau_closed(tau)?;
        let h = self.timescale.h(tau);
        let c = self.timescale.one_minus_h(tau);
        Ok(z.map(|v| c + h * self.activation.derivative(v)))
    }

    /// Diagonal of `J^-1(tau, Z)`, the entrywise reciprocal of [`Self::jacobian`].
    pub fn jacobian_inv(&self, tau: f64, z: &DVector<f64>) -> Result<DVector<f64>> {
        let j = self.jacobian(tau, z)?;
        if let Some(i) = j.iter().position(|&v| v == 0.0) {
            return Err(Error::Singular(format!(
                "activation-flow jacobian vanishes in coordinate {i} at tau = {tau}"
            )));
        }
        Ok(j.map(|v| 1.0 / v))
    }

    /// Upper bound on `|phi(1, Z) - phi(tau_max, Z)|_inf` from stopping the flow early.
    pub fn truncation_residual(&self, tau_max: f64, z: &DVector<f64>) -> f64 {
        let gap = self.timescale.one_minus_h(tau_max);
        z.iter()
            .map(|&v| (self.activation.apply(v) - v).abs())
            .fold(0.0, f64::max)
            * gap
    }
}
