//! Model constants, reaction kinetics and closed-form reference quantities.
//!
//! The three species are uninfected cells `u1`, infected cells `u2` and free
//! virus `u3`. Infection saturates in the virus density:
//!
//! ```text
//! f1(u1, u3)     = θ − a·u1 − b·u1·u3/(1+u3)
//! f2(u1, u2, u3) = b·u1·u3/(1+u3) − c·u2
//! f3(u2, u3)     = k·u2/(1+u3) − q·u3
//! ```

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn one() -> f64 {
    1.0
}

/// Positive model constants.
///
/// Diffusivities, Stefan coefficients and the initial habitat default to 1 when
/// deserialized, so a config only has to name the six kinetic rates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// Production rate of uninfected cells.
    pub theta: f64,
    /// Death rate of uninfected cells.
    pub a: f64,
    /// Infection rate.
    pub b: f64,
    /// Death rate of infected cells.
    pub c: f64,
    /// Virion production rate.
    pub k: f64,
    /// Virus clearance rate.
    pub q: f64,
    #[serde(default = "one")]
    pub d1: f64,
    #[serde(default = "one")]
    pub d2: f64,
    #[serde(default = "one")]
    pub d3: f64,
    #[serde(default = "one")]
    pub mu1: f64,
    #[serde(default = "one")]
    pub mu2: f64,
    #[serde(default = "one")]
    pub mu3: f64,
    /// Initial habitat length.
    #[serde(default = "one")]
    pub h0: f64,
}

impl ModelParams {
    /// Kinetic constants with unit diffusivities, unit Stefan coefficients and `h0 = 1`.
    pub fn kinetic(theta: f64, a: f64, b: f64, c: f64, k: f64, q: f64) -> Self {
        Self {
            theta,
            a,
            b,
            c,
            k,
            q,
            d1: 1.0,
            d2: 1.0,
            d3: 1.0,
            mu1: 1.0,
            mu2: 1.0,
            mu3: 1.0,
            h0: 1.0,
        }
    }

    pub fn with_diffusivities(mut self, d1: f64, d2: f64, d3: f64) -> Self {
        self.d1 = d1;
        self.d2 = d2;
        self.d3 = d3;
        self
    }

    pub fn with_stefan(mut self, mu1: f64, mu2: f64, mu3: f64) -> Self {
        self.mu1 = mu1;
        self.mu2 = mu2;
        self.mu3 = mu3;
        self
    }

    pub fn with_h0(mut self, h0: f64) -> Self {
        self.h0 = h0;
        self
    }

    pub fn named_fields(&self) -> [(&'static str, f64); 13] {
        [
            ("theta", self.theta),
            ("a", self.a),
            ("b", self.b),
            ("c", self.c),
            ("k", self.k),
            ("q", self.q),
            ("d1", self.d1),
            ("d2", self.d2),
            ("d3", self.d3),
            ("mu1", self.mu1),
            ("mu2", self.mu2),
            ("mu3", self.mu3),
            ("h0", self.h0),
        ]
    }

    /// Checks that every constant is finite and strictly positive.
    pub fn validate(&self) -> Result<()> {
        for (name, value) in self.named_fields() {
            if !value.is_finite() {
                return Err(Error::InvalidParameter {
                    name,
                    value,
                    reason: "must be finite",
                });
            }
            if value <= 0.0 {
                return Err(Error::InvalidParameter {
                    name,
                    value,
                    reason: "must be strictly positive",
                });
            }
        }
        Ok(())
    }

    /// Like [`validate`](Self::validate) but lets the Stefan coefficients be zero,
    /// which freezes the boundary. Used by the simulator only.
    pub fn validate_allow_frozen_boundary(&self) -> Result<()> {
        let mut probe = *self;
        for mu in [&mut probe.mu1, &mut probe.mu2, &mut probe.mu3] {
            if *mu == 0.0 {
                *mu = 1.0;
            }
        }
        probe.validate()
    }

    pub fn diffusivities(&self) -> [f64; 3] {
        [self.d1, self.d2, self.d3]
    }

    pub fn stefan(&self) -> [f64; 3] {
        [self.mu1, self.mu2, self.mu3]
    }

    /// Virus-free level θ/a of the uninfected cells.
    pub fn virus_free_level(&self) -> f64 {
        self.theta / self.a
    }

    // Unchecked kinetics for the solvers. Callers keep densities nonnegative.

    #[inline]
    pub fn f1(&self, u1: f64, u3: f64) -> f64 {
        self.theta - self.a * u1 - self.b * u1 * u3 / (1.0 + u3)
    }

    #[inline]
    pub fn f2(&self, u1: f64, u2: f64, u3: f64) -> f64 {
        self.b * u1 * u3 / (1.0 + u3) - self.c * u2
    }

    #[inline]
    pub fn f3(&self, u2: f64, u3: f64) -> f64 {
        self.k * u2 / (1.0 + u3) - self.q * u3
    }
}

/// Nonnegative densities of the three species at one point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateTriple {
    pub u1: f64,
    pub u2: f64,
    pub u3: f64,
}

impl StateTriple {
    pub fn new(u1: f64, u2: f64, u3: f64) -> Result<Self> {
        let s = Self { u1, u2, u3 };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, v) in [self.u1, self.u2, self.u3].into_iter().enumerate() {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Domain(format!(
                    "density u{} = {v} must be finite and nonnegative",
                    i + 1
                )));
            }
        }
        Ok(())
    }
}

/// Reaction rates at a state. `f1` is `None` when the uninfected density was
/// overridden by a prescribed coefficient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rates {
    pub f1: Option<f64>,
    pub f2: f64,
    pub f3: f64,
}

/// Evaluates the kinetics at `s`. With `rho_override`, the infection term uses
/// the prescribed uninfected density instead of `s.u1` and `f1` is not reported.
pub fn reaction(p: &ModelParams, s: &StateTriple, rho_override: Option<f64>) -> Result<Rates> {
    s.validate()?;
    match rho_override {
        Some(rho) => {
            if !(rho >= 0.0) {
                return Err(Error::Domain(format!("coefficient rho = {rho} must be nonnegative")));
            }
            Ok(Rates {
                f1: None,
                f2: p.f2(rho, s.u2, s.u3),
                f3: p.f3(s.u2, s.u3),
            })
        }
        None => Ok(Rates {
            f1: Some(p.f1(s.u1, s.u3)),
            f2: p.f2(s.u1, s.u2, s.u3),
            f3: p.f3(s.u2, s.u3),
        }),
    }
}

/// R₀ = kbθ/(acq).
pub fn basic_reproduction_number(p: &ModelParams) -> f64 {
    p.k * p.b * p.theta / (p.a * p.c * p.q)
}

/// R₀ + √R₀ > b/a, the extra condition under which the lower half of the
/// equilibrium sandwich is available.
pub fn persistence_condition(p: &ModelParams) -> bool {
    let r0 = basic_reproduction_number(p);
    r0 + r0.sqrt() > p.b / p.a
}

/// Bounded solution of −d·U″ = θ − a·U on the half line with U(0) = 0.
pub fn ubar1_closed_form(p: &ModelParams, d: f64, x: f64) -> f64 {
    p.virus_free_level() * (1.0 - (-x * (p.a / d).sqrt()).exp())
}

/// Limits at infinity of the bounded positive (U₂, U₃) driven by a coefficient
/// that increases to `beta`.
pub fn farfield_limits(p: &ModelParams, beta: f64) -> Result<(f64, f64)> {
    let ratio = p.b * p.k * beta / (p.c * p.q);
    if !(ratio > 1.0) {
        return Err(Error::Threshold(format!(
            "bkβ/(cq) = {ratio} must exceed 1 for a positive far field"
        )));
    }
    let root = ratio.sqrt();
    let u2 = p.b * beta * (1.0 - 1.0 / root) / p.c;
    let u3 = root - 1.0;
    Ok((u2, u3))
}

/// Far-field limit θ√R₀/((a+b)√R₀ − b) of the uninfected cells under the
/// largest virus equilibrium.
pub fn udbar1_farfield(p: &ModelParams) -> Result<f64> {
    let sr = basic_reproduction_number(p).sqrt();
    let denom = (p.a + p.b) * sr - p.b;
    if !(denom > 0.0) {
        return Err(Error::Domain(format!(
            "(a+b)√R₀ − b = {denom} is not positive"
        )));
    }
    Ok(p.theta * sr / denom)
}

/// Positive root (v*, w*) of f2(ρ, v, w) = 0, f3(v, w) = 0, or `None` when
/// bkρ/(cq) ≤ 1 and only the zero state remains.
pub fn homogeneous_fixed_point(p: &ModelParams, rho: f64) -> Option<(f64, f64)> {
    let ratio = p.b * p.k * rho / (p.c * p.q);
    if !(ratio > 1.0) {
        return None;
    }
    let w = ratio.sqrt() - 1.0;
    let v = p.q / p.k * w * (1.0 + w);
    Some((v, w))
}

/// Principal Dirichlet eigenvalue (π/l)² of −ψ″ on an interval of length `l`.
pub fn principal_eigenvalue(l: f64) -> Result<f64> {
    if !(l > 0.0) || !l.is_finite() {
        return Err(Error::Domain(format!("interval length {l} must be positive and finite")));
    }
    Ok((PI / l).powi(2))
}

/// Window condition bk(β−ε) > (c + d₂λ₁(l))(q + d₃λ₁(l)) guaranteeing a positive
/// solution of the truncated pair problem once l is large.
pub fn eigen_condition(p: &ModelParams, l: f64, eps: f64, beta: f64) -> Result<bool> {
    let lambda = principal_eigenvalue(l)?;
    Ok(p.b * p.k * (beta - eps) > (p.c + p.d2 * lambda) * (p.q + p.d3 * lambda))
}
