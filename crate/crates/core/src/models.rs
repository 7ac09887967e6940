//! The thermostated Hamiltonians as evaluatable models.
//!
//! States are ordered coordinates first, then the conjugate momenta:
//!
//! | kind                  | state                  |
//! |-----------------------|------------------------|
//! | `nose_full`           | `(q, s, p, p_s)`       |
//! | `rescaled_F_beta`     | `(w, sigma, W, Sigma)` |
//! | `nose_like`           | `(w, sigma, W, Sigma)` |
//! | `oscillator_G_kappa`  | `(u, v, U, V)`         |
//! | `nose_hoover_reduced` | `(q, rho, xi)`         |
//!
//! `k = 1` and a single degree of freedom throughout.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{Expr, ExprError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("state {state:?} is outside the domain of {kind}: {reason}")]
    OutsideDomain {
        kind: &'static str,
        state: Vec<f64>,
        reason: &'static str,
    },
    #[error("expected a state of length {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("{0} is not Hamiltonian")]
    NotHamiltonian(&'static str),
    #[error("thermostat: {0}")]
    Thermostat(String),
    #[error(transparent)]
    Expr(#[from] ExprError),
}

/// `V(q) = sum c_k cos(k q) + s_k sin(k q)`, `k` from 1.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrigPotential {
    #[serde(default)]
    pub cos: Vec<f64>,
    #[serde(default)]
    pub sin: Vec<f64>,
}

impl TrigPotential {
    pub fn cosine() -> TrigPotential {
        TrigPotential {
            cos: vec![1.0],
            sin: Vec::new(),
        }
    }

    pub fn value(&self, q: f64) -> f64 {
        let mut v = 0.0;
        for (k, c) in self.cos.iter().enumerate() {
            v += c * ((k + 1) as f64 * q).cos();
        }
        for (k, s) in self.sin.iter().enumerate() {
            v += s * ((k + 1) as f64 * q).sin();
        }
        v
    }

    pub fn derivative(&self, q: f64) -> f64 {
        let mut v = 0.0;
        for (k, c) in self.cos.iter().enumerate() {
            let k = (k + 1) as f64;
            v -= c * k * (k * q).sin();
        }
        for (k, s) in self.sin.iter().enumerate() {
            let k = (k + 1) as f64;
            v += s * k * (k * q).cos();
        }
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "nose_full")]
    NoseFull,
    #[serde(rename = "rescaled_F_beta")]
    RescaledFBeta,
    #[serde(rename = "nose_hoover_reduced")]
    NoseHooverReduced,
    #[serde(rename = "nose_like")]
    NoseLike,
    #[serde(rename = "oscillator_G_kappa")]
    OscillatorGKappa,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::NoseFull => "nose_full",
            ModelKind::RescaledFBeta => "rescaled_F_beta",
            ModelKind::NoseHooverReduced => "nose_hoover_reduced",
            ModelKind::NoseLike => "nose_like",
            ModelKind::OscillatorGKappa => "oscillator_G_kappa",
        }
    }

    pub fn dim(self) -> usize {
        match self {
            ModelKind::NoseHooverReduced => 3,
            _ => 4,
        }
    }

    pub fn is_hamiltonian(self) -> bool {
        self != ModelKind::NoseHooverReduced
    }

    pub fn state_names(self) -> [&'static str; 4] {
        match self {
            ModelKind::NoseFull => ["q", "s", "p", "p_s"],
            ModelKind::RescaledFBeta | ModelKind::NoseLike => ["w", "sigma", "W", "Sigma"],
            ModelKind::OscillatorGKappa => ["u", "v", "U", "V"],
            ModelKind::NoseHooverReduced => ["q", "rho", "xi", ""],
        }
    }
}

/// Coefficients of `Omega(sigma) = 1 + a (sigma - 1) + b (sigma - 1)^2 / 2`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OmegaJet {
    #[serde(default)]
    pub a: f64,
    #[serde(default)]
    pub b: f64,
}

impl OmegaJet {
    pub fn value(&self, sigma: f64) -> f64 {
        let d = sigma - 1.0;
        1.0 + self.a * d + 0.5 * self.b * d * d
    }

    pub fn derivative(&self, sigma: f64) -> f64 {
        self.a + self.b * (sigma - 1.0)
    }
}

fn one() -> f64 {
    1.0
}

fn default_kappa() -> f64 {
    0.1
}

/// A model with its parameters. Parameters a kind does not use are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HamiltonianModel {
    pub kind: ModelKind,
    #[serde(default)]
    pub beta: f64,
    #[serde(rename = "M", default = "one")]
    pub mass: f64,
    #[serde(rename = "T", default = "one")]
    pub temperature: f64,
    #[serde(default = "default_kappa")]
    pub kappa: f64,
    #[serde(default = "one")]
    pub omega: f64,
    #[serde(default)]
    pub potential: TrigPotential,
    #[serde(default)]
    pub omega_jet: OmegaJet,
}

impl HamiltonianModel {
    pub fn new(kind: ModelKind) -> HamiltonianModel {
        HamiltonianModel {
            kind,
            beta: 0.0,
            mass: 1.0,
            temperature: 1.0,
            kappa: default_kappa(),
            omega: 1.0,
            potential: TrigPotential::default(),
            omega_jet: OmegaJet::default(),
        }
    }

    /// `F_beta` with `V = cos` and `M = T = 1`.
    pub fn rescaled(beta: f64) -> HamiltonianModel {
        HamiltonianModel {
            beta,
            potential: TrigPotential::cosine(),
            ..HamiltonianModel::new(ModelKind::RescaledFBeta)
        }
    }

    pub fn dim(&self) -> usize {
        self.kind.dim()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = |name: &str, x: f64| {
            if x > 0.0 && x.is_finite() {
                Ok(())
            } else {
                Err(ModelError::InvalidParameter(format!("{name} must be positive, got {x}")))
            }
        };
        positive("M", self.mass)?;
        positive("T", self.temperature)?;
        positive("omega", self.omega)?;
        if !self.beta.is_finite() || self.beta < 0.0 {
            return Err(ModelError::InvalidParameter(format!(
                "beta must be nonnegative, got {}",
                self.beta
            )));
        }
        if self.kind == ModelKind::OscillatorGKappa {
            positive("kappa", self.kappa)?;
        }
        let finite = self.potential.cos.iter().chain(&self.potential.sin).all(|c| c.is_finite())
            && self.omega_jet.a.is_finite()
            && self.omega_jet.b.is_finite();
        if !finite {
            return Err(ModelError::InvalidParameter("non-finite coefficient".into()));
        }
        Ok(())
    }

    /// `epsilon = 1 / sqrt(M)`.
    pub fn epsilon(&self) -> f64 {
        1.0 / self.mass.sqrt()
    }

    fn check(&self, x: &[f64]) -> Result<(), ModelError> {
        if x.len() != self.dim() {
            return Err(ModelError::Dimension {
                expected: self.dim(),
                got: x.len(),
            });
        }
        let bad = |reason| {
            Err(ModelError::OutsideDomain {
                kind: self.kind.name(),
                state: x.to_vec(),
                reason,
            })
        };
        if x.iter().any(|c| !c.is_finite()) {
            return bad("non-finite component");
        }
        match self.kind {
            ModelKind::NoseFull if x[1] <= 0.0 => bad("s must be positive"),
            ModelKind::RescaledFBeta if x[1] <= 0.0 => bad("sigma must be positive"),
            ModelKind::NoseLike if x[1] <= 0.0 => bad("sigma must be positive"),
            ModelKind::NoseLike if self.omega_jet.value(x[1]) <= 0.0 => bad("Omega(sigma) must be positive"),
            ModelKind::OscillatorGKappa if x[0] >= 1.0 => bad("u must be below 1"),
            _ => Ok(()),
        }
    }

    /// The Hamiltonian. For the reduced Nosé-Hoover system this is the energy
    /// `q^2/2 + rho^2/2 + M xi^2/2` whose Gibbs density is stationary.
    pub fn evaluate(&self, x: &[f64]) -> Result<f64, ModelError> {
        self.check(x)?;
        let v = &self.potential;
        Ok(match self.kind {
            ModelKind::NoseFull => {
                let (q, s, p, ps) = (x[0], x[1], x[2], x[3]);
                0.5 * (p / s).powi(2) + v.value(q) + 0.5 * ps * ps / self.mass + self.temperature * s.ln()
            }
            ModelKind::RescaledFBeta | ModelKind::NoseLike => {
                let (w, sigma, cap_w, cap_s) = (x[0], x[1], x[2], x[3]);
                let omega = if self.kind == ModelKind::NoseLike {
                    self.omega_jet.value(sigma)
                } else {
                    1.0
                };
                0.5 * (cap_w / sigma).powi(2)
                    + 0.5 * omega * cap_s * cap_s
                    + self.beta * v.value(w / self.epsilon())
                    + sigma.ln()
            }
            ModelKind::OscillatorGKappa => {
                let (u, vv, cap_u, cap_v) = (x[0], x[1], x[2], x[3]);
                let d = 1.0 - u;
                let p = cap_u - 0.5 * vv * cap_v / d;
                (cap_v * cap_v + vv * vv) / (2.0 * d) + self.kappa * (0.5 * p * p + d.ln())
            }
            ModelKind::NoseHooverReduced => {
                let (q, rho, xi) = (x[0], x[1], x[2]);
                0.5 * (q * q + rho * rho) + 0.5 * self.mass * xi * xi
            }
        })
    }

    /// `(dH/dcoords, dH/dmomenta)` for the Hamiltonian kinds.
    pub fn gradient(&self, x: &[f64]) -> Result<[f64; 4], ModelError> {
        self.check(x)?;
        let v = &self.potential;
        Ok(match self.kind {
            ModelKind::NoseFull => {
                let (q, s, p, ps) = (x[0], x[1], x[2], x[3]);
                [
                    v.derivative(q),
                    -p * p / (s * s * s) + self.temperature / s,
                    p / (s * s),
                    ps / self.mass,
                ]
            }
            ModelKind::RescaledFBeta | ModelKind::NoseLike => {
                let (w, sigma, cap_w, cap_s) = (x[0], x[1], x[2], x[3]);
                let (omega, d_omega) = if self.kind == ModelKind::NoseLike {
                    (self.omega_jet.value(sigma), self.omega_jet.derivative(sigma))
                } else {
                    (1.0, 0.0)
                };
                let root_m = self.mass.sqrt();
                [
                    self.beta * root_m * v.derivative(root_m * w),
                    -cap_w * cap_w / sigma.powi(3) + 0.5 * d_omega * cap_s * cap_s + 1.0 / sigma,
                    cap_w / (sigma * sigma),
                    omega * cap_s,
                ]
            }
            ModelKind::OscillatorGKappa => {
                let (u, vv, cap_u, cap_v) = (x[0], x[1], x[2], x[3]);
                let d = 1.0 - u;
                let p = cap_u - 0.5 * vv * cap_v / d;
                let k = self.kappa;
                [
                    (cap_v * cap_v + vv * vv) / (2.0 * d * d) - k * (p * vv * cap_v / (2.0 * d * d) + 1.0 / d),
                    vv / d - k * p * cap_v / (2.0 * d),
                    k * p,
                    cap_v / d - k * p * vv / (2.0 * d),
                ]
            }
            ModelKind::NoseHooverReduced => return Err(ModelError::NotHamiltonian("nose_hoover_reduced")),
        })
    }

    /// Writes the time derivative of `x` into `out`.
    pub fn vector_field_into(&self, x: &[f64], out: &mut [f64]) -> Result<(), ModelError> {
        if self.kind == ModelKind::NoseHooverReduced {
            self.check(x)?;
            let (q, rho, xi) = (x[0], x[1], x[2]);
            out[0] = rho;
            out[1] = -q - xi * rho;
            out[2] = (rho * rho - self.temperature) / self.mass;
            return Ok(());
        }
        let g = self.gradient(x)?;
        out[0] = g[2];
        out[1] = g[3];
        out[2] = -g[0];
        out[3] = -g[1];
        Ok(())
    }

    pub fn vector_field(&self, x: &[f64]) -> Result<Vec<f64>, ModelError> {
        let mut out = vec![0.0; self.dim()];
        self.vector_field_into(x, &mut out)?;
        Ok(out)
    }

    /// Divergence of the vector field; zero for the Hamiltonian kinds and
    /// `-xi` for the reduced Nosé-Hoover system.
    pub fn divergence(&self, x: &[f64]) -> Result<f64, ModelError> {
        self.check(x)?;
        Ok(match self.kind {
            ModelKind::NoseHooverReduced => -x[2],
            _ => 0.0,
        })
    }

    /// The kinetic temperature `|p / s|^2` in the model's own variables.
    pub fn temperature_observable(&self, x: &[f64]) -> Result<f64, ModelError> {
        self.check(x)?;
        Ok(match self.kind {
            ModelKind::NoseFull => (x[2] / x[1]).powi(2),
            ModelKind::RescaledFBeta | ModelKind::NoseLike => self.temperature * (x[2] / x[1]).powi(2),
            // W / sigma = V / sqrt(1 - u)
            ModelKind::OscillatorGKappa => self.temperature * x[3] * x[3] / (1.0 - x[0]),
            ModelKind::NoseHooverReduced => x[1] * x[1],
        })
    }

    /// Nosé-like equilibrium condition: at `Sigma = 0` the momentum equation
    /// `dSigma/dt = 0` says the fibre derivative `W dF/dW` equals
    /// `sigma dN/dsigma`. Returns that required value, which must not depend
    /// on `sigma`.
    pub fn equilibrium_fibre_derivative(&self, sigma: f64) -> Result<f64, ModelError> {
        match self.kind {
            ModelKind::RescaledFBeta | ModelKind::NoseLike => {
                let x = [0.0, sigma, 0.0, 0.0];
                self.check(&x)?;
                // N = Omega Sigma^2 / 2 + ln sigma, so sigma N_sigma = 1 at Sigma = 0
                let g = self.gradient(&x)?;
                Ok(sigma * g[1])
            }
            _ => Err(ModelError::InvalidParameter(format!(
                "{} has no thermostat equilibrium",
                self.kind.name()
            ))),
        }
    }
}

/// `kappa = epsilon / (omega sqrt(beta))`.
pub fn coupling(mass: f64, omega: f64, beta: f64) -> f64 {
    1.0 / (mass.sqrt() * omega * beta.sqrt())
}

/// A thermostat `N(s, p_s)` with momentum rescaling `u(s)`, given in closed
/// form. `u_inverse` expresses `s` in terms of `u`.
#[derive(Debug, Clone, PartialEq)]
pub struct ThermostatSpec {
    pub n: Expr,
    pub u: Expr,
    pub u_inverse: Expr,
    /// Points of `s` at which the hypotheses are tested.
    pub samples: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedThermostat {
    /// `Omega_T(u) = A_T(s(u)) u'(s(u))^2`.
    pub omega: Expr,
    /// `A(s)`, the coefficient of `p_s^2 / 2`.
    pub a: Expr,
    /// The constant `n k T` forced by the equilibrium condition.
    pub nkt: f64,
}

impl NormalizedThermostat {
    /// `N(u, p_u) = Omega_T p_u^2 / 2 + nkT ln u`.
    pub fn hamiltonian(&self) -> Expr {
        use crate::expr::var;
        let half = crate::expr::q(1, 2);
        half * self.omega.clone() * var("p_u").powi(2) + Expr::Real(self.nkt) * var("u").ln()
    }
}

const THERMOSTAT_TOL: f64 = 1e-9;

/// Checks the Nosé-like hypotheses on `spec` at its sample points and returns
/// the normal form in `(u, p_u)`.
pub fn thermostat_normal_form_check(spec: &ThermostatSpec) -> Result<NormalizedThermostat, ModelError> {
    use crate::expr::num;
    let names = ["s".to_string(), "p_s".to_string()];
    let n_at = |s: f64, p: f64| spec.n.eval_at(&names, &[s, p]);
    let s_names = ["s".to_string()];
    let du = spec.u.derivative("s");
    let dn_ds = spec.n.derivative("s");
    if spec.samples.is_empty() {
        return Err(ModelError::Thermostat("no sample points".into()));
    }
    let mut nkt: Option<f64> = None;
    for &s in &spec.samples {
        let base = n_at(s, 0.0)?;
        let k1 = n_at(s, 1.0)? - base;
        let k2 = n_at(s, 2.0)? - base;
        let km = n_at(s, -1.0)? - base;
        let scale = 1.0 + k1.abs();
        if (k2 - 4.0 * k1).abs() > THERMOSTAT_TOL * scale || (km - k1).abs() > THERMOSTAT_TOL * scale {
            return Err(ModelError::Thermostat(format!("N is not quadratic in p_s at s = {s}")));
        }
        if k1 <= 0.0 {
            return Err(ModelError::Thermostat(format!("N is not increasing in p_s at s = {s}")));
        }
        let slope = du.eval_at(&s_names, &[s])?;
        if slope <= 0.0 {
            return Err(ModelError::Thermostat(format!("u is not increasing at s = {s}")));
        }
        // equilibrium: E(H) = N_s / (ln u)_s at p_s = 0
        let u = spec.u.eval_at(&s_names, &[s])?;
        let required = dn_ds.eval_at(&names, &[s, 0.0])? * u / slope;
        match nkt {
            None => nkt = Some(required),
            Some(c) if (c - required).abs() > THERMOSTAT_TOL * (1.0 + c.abs()) => {
                return Err(ModelError::Thermostat(format!(
                    "equilibrium depends on s: {c} at the first sample, {required} at s = {s}"
                )))
            }
            Some(_) => {}
        }
    }
    // A(s) = N(s, 1) - N(s, 0) doubled, as an expression
    let mut at = BTreeMap::new();
    at.insert("p_s".to_string(), num(1));
    let mut at0 = BTreeMap::new();
    at0.insert("p_s".to_string(), num(0));
    let a = num(2) * (spec.n.substitute(&at) - spec.n.substitute(&at0));
    let mut back = BTreeMap::new();
    back.insert("s".to_string(), spec.u_inverse.clone());
    let omega = (a.clone() * du.powi(2)).substitute(&back);
    Ok(NormalizedThermostat {
        omega,
        a,
        nkt: nkt.expect("samples are nonempty"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip() {
        let text = r#"{"kind":"rescaled_F_beta","beta":0.01,"M":1,"T":100,"potential":{"cos":[1.0],"sin":[]},"omega_jet":{"a":0,"b":0}}"#;
        let m: HamiltonianModel = serde_json::from_str(text).unwrap();
        assert_eq!(m.kind, ModelKind::RescaledFBeta);
        assert_eq!(m.temperature, 100.0);
        let again: HamiltonianModel = serde_json::from_str(&serde_json::to_string(&m).unwrap()).unwrap();
        assert_eq!(m, again);
        assert!(serde_json::from_str::<HamiltonianModel>(r#"{"kind":"rescaled_F_beta","bta":1}"#).is_err());
    }

    #[test]
    fn domain_guards() {
        let m = HamiltonianModel::rescaled(0.0);
        assert!(m.evaluate(&[0.0, 0.0, 1.0, 0.0]).is_err());
        assert!(m.evaluate(&[0.0, 1.0, 1.0]).is_err());
        let g = HamiltonianModel::new(ModelKind::OscillatorGKappa);
        assert!(g.evaluate(&[1.0, 0.0, 0.0, 0.0]).is_err());
    }
}
