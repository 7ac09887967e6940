//! Flows, Poincaré sections and the torus diagnostics built on them.
//!
//! Two integrators: the implicit midpoint rule (symplectic, fixed step) for
//! the non-separable Hamiltonians, and the Dormand-Prince 5(4) pair with a PI
//! step-size controller for the reduced Nosé-Hoover system and for
//! cross-checks.

use std::f64::consts::TAU;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::{HamiltonianModel, ModelError, ModelKind};

const MAX_DIM: usize = 4;
type Buf = [f64; MAX_DIM];

/// Convergence threshold of the implicit stage equation.
pub const STAGE_TOL: f64 = 1e-13;
/// Fixed-point sweeps before switching to Newton.
pub const FIXED_POINT_ITERATIONS: usize = 50;
const NEWTON_ITERATIONS: usize = 20;
/// Time resolution of section refinement.
pub const CROSSING_TIME_TOL: f64 = 1e-12;
/// Fourier order of the curve fitted by [`torus_classify`].
pub const CURVE_ORDER: usize = 8;
pub const CURVE_THRESHOLD: f64 = 1e-3;
pub const SCATTER_THRESHOLD: f64 = 5e-2;
pub const MIN_CLASSIFY_POINTS: usize = 32;
pub const MIN_ROTATION_POINTS: usize = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid integration settings: {0}")]
    InvalidSettings(String),
    #[error("implicit stage did not converge at t = {t} (residual {residual:e})")]
    StageSolve { t: f64, residual: f64 },
    #[error("step size underflow at t = {t}")]
    StepUnderflow { t: f64 },
    #[error("only {found} section crossings, need at least {needed}")]
    InsufficientData { found: usize, needed: usize },
    #[error("not applicable: {0}")]
    NotApplicable(String),
    #[error("empty trajectory")]
    EmptyTrajectory,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum Method {
    ImplicitMidpoint { dt: f64 },
    EmbeddedRk { tol: f64 },
}

impl Method {
    fn validate(&self) -> Result<(), SimError> {
        let (name, x) = match *self {
            Method::ImplicitMidpoint { dt } => ("dt", dt),
            Method::EmbeddedRk { tol } => ("tol", tol),
        };
        if x > 0.0 && x.is_finite() {
            Ok(())
        } else {
            Err(SimError::InvalidSettings(format!("{name} must be positive, got {x}")))
        }
    }
}

fn load(x: &[f64]) -> Buf {
    let mut b = [0.0; MAX_DIM];
    b[..x.len()].copy_from_slice(x);
    b
}

/// An autonomous vector field of dimension at most 4.
pub trait VectorField {
    fn dim(&self) -> usize;
    fn eval(&self, x: &[f64], out: &mut [f64]) -> Result<(), ModelError>;
}

impl VectorField for HamiltonianModel {
    fn dim(&self) -> usize {
        HamiltonianModel::dim(self)
    }

    fn eval(&self, x: &[f64], out: &mut [f64]) -> Result<(), ModelError> {
        self.vector_field_into(x, out)
    }
}

/// `dx/dt = A x`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearField(pub Vec<Vec<f64>>);

impl VectorField for LinearField {
    fn dim(&self) -> usize {
        self.0.len()
    }

    fn eval(&self, x: &[f64], out: &mut [f64]) -> Result<(), ModelError> {
        for (o, row) in out.iter_mut().zip(&self.0) {
            *o = row.iter().zip(x).map(|(a, b)| a * b).sum();
        }
        Ok(())
    }
}

fn field<F: VectorField + ?Sized>(model: &F, x: &Buf, n: usize) -> Result<Buf, ModelError> {
    let mut out = [0.0; MAX_DIM];
    model.eval(&x[..n], &mut out[..n])?;
    Ok(out)
}

fn jacobian<F: VectorField + ?Sized>(model: &F, x: &Buf, n: usize) -> Result<DMatrix<f64>, ModelError> {
    let mut jac = DMatrix::zeros(n, n);
    for j in 0..n {
        let h = 1e-7 * (1.0 + x[j].abs());
        let mut hi = *x;
        let mut lo = *x;
        hi[j] += h;
        lo[j] -= h;
        let (fh, fl) = (field(model, &hi, n)?, field(model, &lo, n)?);
        for i in 0..n {
            jac[(i, j)] = (fh[i] - fl[i]) / (2.0 * h);
        }
    }
    Ok(jac)
}

/// Largest componentwise change relative to `1 + |y_i|`, so an unbounded
/// angle does not loosen the test on the other components.
fn relative_change(delta: &Buf, y: &Buf, n: usize) -> f64 {
    (0..n).fold(0.0, |m, i| m.max(delta[i].abs() / (1.0 + y[i].abs())))
}

/// One implicit midpoint step `y = x + h f((x + y) / 2)`.
fn midpoint_step<F: VectorField + ?Sized>(model: &F, x: &Buf, n: usize, h: f64, t: f64) -> Result<Buf, SimError> {
    let f0 = field(model, x, n)?;
    let mut y = *x;
    for i in 0..n {
        y[i] += h * f0[i];
    }
    let mut residual = f64::INFINITY;
    for _ in 0..FIXED_POINT_ITERATIONS {
        let mut m = [0.0; MAX_DIM];
        for i in 0..n {
            m[i] = 0.5 * (x[i] + y[i]);
        }
        let f = field(model, &m, n)?;
        let mut next = [0.0; MAX_DIM];
        let mut delta = [0.0; MAX_DIM];
        for i in 0..n {
            next[i] = x[i] + h * f[i];
            delta[i] = next[i] - y[i];
        }
        y = next;
        residual = relative_change(&delta, &y, n);
        if residual <= STAGE_TOL {
            return Ok(y);
        }
    }
    // Newton on G(y) = y - x - h f((x + y) / 2)
    for _ in 0..NEWTON_ITERATIONS {
        let mut m = [0.0; MAX_DIM];
        for i in 0..n {
            m[i] = 0.5 * (x[i] + y[i]);
        }
        let f = field(model, &m, n)?;
        let g = DVector::from_iterator(n, (0..n).map(|i| y[i] - x[i] - h * f[i]));
        let jg = DMatrix::identity(n, n) - jacobian(model, &m, n)? * (0.5 * h);
        let delta = jg
            .lu()
            .solve(&g)
            .ok_or(SimError::StageSolve { t, residual })?;
        let step = load(delta.as_slice());
        for i in 0..n {
            y[i] -= step[i];
        }
        residual = relative_change(&step, &y, n);
        if residual <= STAGE_TOL {
            return Ok(y);
        }
    }
    Err(SimError::StageSolve { t, residual })
}

// Dormand-Prince 5(4), nodes 0, 1/5, 3/10, 4/5, 8/9, 1, 1
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

/// One Dormand-Prince step; returns the fifth-order solution and the error
/// estimate.
fn rk_step<F: VectorField + ?Sized>(model: &F, x: &Buf, n: usize, h: f64) -> Result<(Buf, Buf), ModelError> {
    let mut k = [[0.0; MAX_DIM]; 7];
    k[0] = field(model, x, n)?;
    for s in 1..7 {
        let mut y = *x;
        for (j, kj) in k.iter().enumerate().take(s) {
            let a = A[s][j];
            if a != 0.0 {
                for i in 0..n {
                    y[i] += h * a * kj[i];
                }
            }
        }
        if s == 6 {
            // the last row is the solution itself (first same as last)
            k[6] = field(model, &y, n)?;
            let mut err = [0.0; MAX_DIM];
            for i in 0..n {
                err[i] = h * (0..7).map(|j| E[j] * k[j][i]).sum::<f64>();
            }
            return Ok((y, err));
        }
        k[s] = field(model, &y, n)?;
    }
    unreachable!()
}

/// State after a single step of length `tau` from `x`, without error
/// control. Used to locate section crossings inside an accepted step.
fn partial_step<F: VectorField + ?Sized>(model: &F, method: &Method, x: &Buf, n: usize, tau: f64, t: f64) -> Result<Buf, SimError> {
    match method {
        Method::ImplicitMidpoint { .. } => midpoint_step(model, x, n, tau, t),
        Method::EmbeddedRk { .. } => Ok(rk_step(model, x, n, tau)?.0),
    }
}

/// One step of `method` with length `h`; no error control.
pub fn single_step<F: VectorField + ?Sized>(field: &F, method: &Method, x: &[f64], h: f64) -> Result<Vec<f64>, SimError> {
    let n = field.dim();
    if x.len() != n || n > MAX_DIM {
        return Err(SimError::InvalidSettings(format!("state of length {} for a field of dimension {n}", x.len())));
    }
    Ok(partial_step(field, method, &load(x), n, h, 0.0)?[..n].to_vec())
}

/// One accepted step handed to an observer.
pub struct Step<'a> {
    pub t0: f64,
    pub x0: &'a [f64],
    pub t1: f64,
    pub x1: &'a [f64],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DriveEnd {
    pub t: f64,
    pub state: Vec<f64>,
    pub steps: usize,
    /// Set when the orbit left the model's domain.
    pub exit: Option<String>,
}

/// Integrates from `ic` to `t_end`, calling `observe` after every accepted
/// step. Leaving the domain ends the run early with `exit` set.
pub fn drive<F>(
    model: &HamiltonianModel,
    ic: &[f64],
    t_end: f64,
    method: &Method,
    mut observe: F,
) -> Result<DriveEnd, SimError>
where
    F: FnMut(&Step) -> Result<Control, SimError>,
{
    model.validate()?;
    method.validate()?;
    if !(t_end > 0.0 && t_end.is_finite()) {
        return Err(SimError::InvalidSettings(format!("t_end must be positive, got {t_end}")));
    }
    let n = model.dim();
    model.evaluate(ic)?;
    let mut x = load(ic);
    let mut t = 0.0;
    let mut steps = 0usize;
    let domain_exit = |e: &SimError| match e {
        SimError::Model(ModelError::OutsideDomain { reason, .. }) => Some(reason.to_string()),
        _ => None,
    };
    let end = |t, x: &Buf, steps, exit| DriveEnd {
        t,
        state: x[..n].to_vec(),
        steps,
        exit,
    };
    match *method {
        Method::ImplicitMidpoint { dt } => {
            let total = (t_end / dt).round().max(1.0) as usize;
            for k in 0..total {
                let t1 = if k + 1 == total { t_end } else { (k + 1) as f64 * dt };
                let y = match midpoint_step(model, &x, n, t1 - t, t) {
                    Ok(y) => y,
                    Err(e) => match domain_exit(&e) {
                        Some(r) => return Ok(end(t, &x, steps, Some(r))),
                        None => return Err(e),
                    },
                };
                if let Err(e) = model.evaluate(&y[..n]) {
                    return Ok(end(t, &x, steps, Some(e.to_string())));
                }
                steps += 1;
                let flow = observe(&Step {
                    t0: t,
                    x0: &x[..n],
                    t1,
                    x1: &y[..n],
                })?;
                x = y;
                t = t1;
                if flow == Control::Stop {
                    break;
                }
            }
        }
        Method::EmbeddedRk { tol } => {
            let mut h = (0.01 * t_end).min(tol.powf(0.2)).min(0.1);
            let mut err_prev: f64 = 1e-4;
            let mut rejected = false;
            while t < t_end {
                if h < 1e-14 * (1.0 + t.abs()) {
                    return Err(SimError::StepUnderflow { t });
                }
                let h_try = h.min(t_end - t);
                let (y, e) = match rk_step(model, &x, n, h_try) {
                    Ok(r) => r,
                    Err(ModelError::OutsideDomain { .. }) => {
                        // shrink into the domain before giving up
                        h *= 0.25;
                        if h < 1e-10 {
                            return Ok(end(t, &x, steps, Some("orbit left the domain".into())));
                        }
                        continue;
                    }
                    Err(e) => return Err(e.into()),
                };
                let mut acc = 0.0;
                for i in 0..n {
                    let sc = tol + tol * x[i].abs().max(y[i].abs());
                    acc += (e[i] / sc).powi(2);
                }
                let err = (acc / n as f64).sqrt();
                if err <= 1.0 {
                    if let Err(e) = model.evaluate(&y[..n]) {
                        return Ok(end(t, &x, steps, Some(e.to_string())));
                    }
                    let t1 = if t_end - (t + h_try) < 1e-12 * t_end { t_end } else { t + h_try };
                    steps += 1;
                    let flow = observe(&Step {
                        t0: t,
                        x0: &x[..n],
                        t1,
                        x1: &y[..n],
                    })?;
                    x = y;
                    t = t1;
                    let mut fac = 0.9 * err.max(1e-10).powf(-0.17) * err_prev.powf(0.04);
                    fac = fac.clamp(0.2, 10.0);
                    if rejected {
                        fac = fac.min(1.0);
                    }
                    h = h_try * fac;
                    err_prev = err.max(1e-4);
                    rejected = false;
                    if flow == Control::Stop {
                        break;
                    }
                } else {
                    h = h_try * (0.9 * err.powf(-0.2)).max(0.2);
                    rejected = true;
                }
            }
        }
    }
    Ok(end(t, &x, steps, None))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub kind: ModelKind,
    pub method: Method,
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub energies: Vec<f64>,
    /// Largest `|E(t) - E(0)|` over every step, recorded or not.
    pub max_energy_drift: f64,
    pub exit: Option<String>,
}

/// Integrates and records every step.
pub fn integrate(model: &HamiltonianModel, ic: &[f64], t_end: f64, method: Method) -> Result<Trajectory, SimError> {
    integrate_every(model, ic, t_end, method, 1)
}

/// Integrates and records every `every`-th step plus the final state.
pub fn integrate_every(
    model: &HamiltonianModel,
    ic: &[f64],
    t_end: f64,
    method: Method,
    every: usize,
) -> Result<Trajectory, SimError> {
    let every = every.max(1);
    let e0 = model.evaluate(ic)?;
    let mut tr = Trajectory {
        kind: model.kind,
        method,
        times: vec![0.0],
        states: vec![ic.to_vec()],
        energies: vec![e0],
        max_energy_drift: 0.0,
        exit: None,
    };
    let mut last = None;
    let end = drive(model, ic, t_end, &method, |s| {
        let e = model.evaluate(s.x1)?;
        tr.max_energy_drift = tr.max_energy_drift.max((e - e0).abs());
        let k = last.map_or(1, |k: usize| k + 1);
        last = Some(k);
        if k % every == 0 {
            tr.times.push(s.t1);
            tr.states.push(s.x1.to_vec());
            tr.energies.push(e);
        }
        Ok(Control::Continue)
    })?;
    if tr.times.last() != Some(&end.t) {
        tr.times.push(end.t);
        tr.energies.push(model.evaluate(&end.state)?);
        tr.states.push(end.state);
    }
    tr.exit = end.exit;
    Ok(tr)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Increasing,
    Decreasing,
}

/// `x[coordinate] = level` (modulo `period` when set), crossed in
/// `direction`. `plane` names the two state components used for the
/// in-section curve diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SectionSpec {
    pub coordinate: usize,
    pub level: f64,
    pub period: Option<f64>,
    pub direction: Direction,
    pub plane: [usize; 2],
}

impl SectionSpec {
    /// `w mod 2 pi = level` crossed with `w` increasing, viewed in
    /// `(sigma, Sigma)`.
    pub fn angle(level: f64) -> SectionSpec {
        SectionSpec {
            coordinate: 0,
            level,
            period: Some(TAU),
            direction: Direction::Increasing,
            plane: [1, 3],
        }
    }

    /// `Sigma = 0`. `Decreasing` picks the maxima of `sigma`, where
    /// `dSigma/dt < 0`. Viewed in `(w, W)`.
    pub fn momentum_zero(direction: Direction) -> SectionSpec {
        SectionSpec {
            coordinate: 3,
            level: 0.0,
            period: None,
            direction,
            plane: [0, 2],
        }
    }

    /// Signed distance of `x` past the crossing `target`, positive on the
    /// far side.
    fn past(&self, x: &[f64], target: f64) -> f64 {
        let d = x[self.coordinate] - target;
        match self.direction {
            Direction::Increasing => d,
            Direction::Decreasing => -d,
        }
    }

    /// The level crossed between `a` and `b`, if any.
    fn crossed(&self, a: &[f64], b: &[f64]) -> Option<f64> {
        let (xa, xb) = (a[self.coordinate] - self.level, b[self.coordinate] - self.level);
        match self.period {
            Some(p) => {
                let (ka, kb) = ((xa / p).floor(), (xb / p).floor());
                match self.direction {
                    Direction::Increasing if kb > ka => Some(self.level + kb * p),
                    Direction::Decreasing if kb < ka => Some(self.level + ka * p),
                    _ => None,
                }
            }
            None => match self.direction {
                Direction::Increasing if xa < 0.0 && xb >= 0.0 => Some(self.level),
                Direction::Decreasing if xa > 0.0 && xb <= 0.0 => Some(self.level),
                _ => None,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TorusClass {
    Curve,
    Ambiguous,
    Scattered,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TorusEvidence {
    pub class: TorusClass,
    pub residual: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RotationEstimate {
    pub estimate: f64,
    pub uncertainty: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SectionRecord {
    pub spec: SectionSpec,
    /// Full states at the refined crossings, in order.
    pub points: Vec<Vec<f64>>,
    pub times: Vec<f64>,
    pub energy: f64,
    /// Largest `|x[coordinate] - level|` (modulo the period) over the points.
    pub max_section_error: f64,
    pub evidence: Option<TorusEvidence>,
    pub rotation: Option<RotationEstimate>,
    /// Why fewer than the requested points were collected.
    pub termination: Option<String>,
}

impl SectionRecord {
    pub fn plane_points(&self) -> Vec<[f64; 2]> {
        let [a, b] = self.spec.plane;
        self.points.iter().map(|p| [p[a], p[b]]).collect()
    }
}

/// Bisects on the length of a partial step from the start of `s` until the
/// crossing of `target` is bracketed within [`CROSSING_TIME_TOL`]; returns
/// the time and state on the far side.
fn refine_crossing(
    model: &HamiltonianModel,
    method: &Method,
    section: &SectionSpec,
    s: &Step,
    target: f64,
) -> Result<(f64, Vec<f64>), SimError> {
    let n = s.x0.len();
    let x0 = load(s.x0);
    let (mut lo, mut hi) = (0.0, s.t1 - s.t0);
    let mut at_hi = load(s.x1);
    while hi - lo > CROSSING_TIME_TOL {
        let mid = 0.5 * (lo + hi);
        let y = partial_step(model, method, &x0, n, mid, s.t0)?;
        if section.past(&y[..n], target) >= 0.0 {
            hi = mid;
            at_hi = y;
        } else {
            lo = mid;
        }
    }
    Ok((s.t0 + hi, at_hi[..n].to_vec()))
}

/// Collects `n_points` refined crossings of `section`, integrating at most to
/// `t_max`. Crossings are refined by bisection on the length of a partial
/// step from the start of the bracketing step.
pub fn poincare_section(
    model: &HamiltonianModel,
    ic: &[f64],
    section: &SectionSpec,
    n_points: usize,
    method: Method,
    t_max: f64,
) -> Result<SectionRecord, SimError> {
    let n = model.dim();
    if section.coordinate >= n || section.plane.iter().any(|&i| i >= n) {
        return Err(SimError::InvalidSettings("section refers to a missing coordinate".into()));
    }
    let energy = model.evaluate(ic)?;
    let mut points = Vec::new();
    let mut times = Vec::new();
    let mut worst: f64 = 0.0;
    let end = drive(model, ic, t_max, &method, |s| {
        let Some(target) = section.crossed(s.x0, s.x1) else {
            return Ok(Control::Continue);
        };
        let (t, x) = refine_crossing(model, &method, section, s, target)?;
        worst = worst.max((x[section.coordinate] - target).abs());
        points.push(x);
        times.push(t);
        Ok(if points.len() >= n_points {
            Control::Stop
        } else {
            Control::Continue
        })
    })?;
    if points.len() < 3 {
        return Err(SimError::InsufficientData {
            found: points.len(),
            needed: 3,
        });
    }
    let termination = if points.len() >= n_points {
        None
    } else if let Some(exit) = end.exit {
        Some(format!("orbit left the domain at t = {}: {exit}", end.t))
    } else {
        Some(format!("reached t_max = {t_max} after {} crossings", points.len()))
    };
    let mut rec = SectionRecord {
        spec: section.clone(),
        points,
        times,
        energy,
        max_section_error: worst,
        evidence: None,
        rotation: None,
        termination,
    };
    let plane = rec.plane_points();
    if plane.len() >= MIN_CLASSIFY_POINTS {
        rec.evidence = Some(torus_classify(&plane)?);
        if plane.len() >= MIN_ROTATION_POINTS && rec.evidence.map(|e| e.class) != Some(TorusClass::Scattered) {
            rec.rotation = Some(rotation_of_points(&plane)?);
        }
    }
    Ok(rec)
}

fn centroid(points: &[[f64; 2]]) -> [f64; 2] {
    let n = points.len() as f64;
    let (sx, sy) = points.iter().fold((0.0, 0.0), |(a, b), p| (a + p[0], b + p[1]));
    [sx / n, sy / n]
}

/// Centres the points and maps their covariance to the identity, so an
/// ellipse becomes a circle. Nearly collinear clouds are only centred.
fn whiten(points: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let c = centroid(points);
    let n = points.len() as f64;
    let mut cov = nalgebra::Matrix2::<f64>::zeros();
    for p in points {
        let d = nalgebra::Vector2::new(p[0] - c[0], p[1] - c[1]);
        cov += d * d.transpose() / n;
    }
    let eig = cov.symmetric_eigen();
    let (lo, hi) = (eig.eigenvalues.min(), eig.eigenvalues.max());
    let map = if lo > 1e-16 * hi {
        let inv = nalgebra::Matrix2::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.sqrt()));
        eig.eigenvectors * inv * eig.eigenvectors.transpose()
    } else {
        nalgebra::Matrix2::identity()
    };
    points
        .iter()
        .map(|p| {
            let d = map * nalgebra::Vector2::new(p[0] - c[0], p[1] - c[1]);
            [d[0], d[1]]
        })
        .collect()
}

/// Whitens the points (see [`whiten`]) and fits `r(theta)` about the
/// centroid by a Fourier series of order [`CURVE_ORDER`]. The residual is
/// the largest radial misfit over the largest pairwise distance, both in
/// whitened coordinates; radial misfit bounds the perpendicular one.
pub fn torus_classify(points: &[[f64; 2]]) -> Result<TorusEvidence, SimError> {
    if points.len() < MIN_CLASSIFY_POINTS {
        return Err(SimError::InsufficientData {
            found: points.len(),
            needed: MIN_CLASSIFY_POINTS,
        });
    }
    let mut diameter: f64 = 0.0;
    for (i, p) in points.iter().enumerate() {
        for q in &points[i + 1..] {
            diameter = diameter.max((p[0] - q[0]).hypot(p[1] - q[1]));
        }
    }
    if diameter < 1e-10 {
        return Ok(TorusEvidence {
            class: TorusClass::Curve,
            residual: 0.0,
        });
    }
    let white = whiten(points);
    let mut diameter: f64 = 0.0;
    for (i, p) in white.iter().enumerate() {
        for q in &white[i + 1..] {
            diameter = diameter.max((p[0] - q[0]).hypot(p[1] - q[1]));
        }
    }
    let mut polar: Vec<(f64, f64)> = white.iter().map(|p| (p[1].atan2(p[0]), p[0].hypot(p[1]))).collect();
    polar.sort_by(|a, b| a.0.total_cmp(&b.0));
    let cols = 2 * CURVE_ORDER + 1;
    let basis = |theta: f64, j: usize| -> f64 {
        if j == 0 {
            1.0
        } else {
            let k = j.div_ceil(2) as f64;
            if j % 2 == 1 {
                (k * theta).cos()
            } else {
                (k * theta).sin()
            }
        }
    };
    let a = DMatrix::from_fn(polar.len(), cols, |i, j| basis(polar[i].0, j));
    let r = DVector::from_iterator(polar.len(), polar.iter().map(|p| p.1));
    let coef = a
        .clone()
        .svd(true, true)
        .solve(&r, 1e-12)
        .map_err(|e| SimError::NotApplicable(e.to_string()))?;
    let misfit = (&a * coef - r).amax();
    let residual = misfit / diameter;
    let class = if residual < CURVE_THRESHOLD {
        TorusClass::Curve
    } else if residual > SCATTER_THRESHOLD {
        TorusClass::Scattered
    } else {
        TorusClass::Ambiguous
    };
    Ok(TorusEvidence { class, residual })
}

/// Angle of `p` about `c` in turns, measured clockwise in the
/// (coordinate, momentum) plane: the sense in which a harmonic oscillator
/// turns, so a twist map near an elliptic point has positive increments.
fn turns(p: &[f64; 2], c: &[f64; 2]) -> f64 {
    (-(p[1] - c[1])).atan2(p[0] - c[0]) / TAU
}

fn weighted_average(increments: &[f64]) -> f64 {
    let n = increments.len() + 1;
    let (mut num, mut den) = (0.0, 0.0);
    for (k, d) in increments.iter().enumerate() {
        let s = (k + 1) as f64 / n as f64;
        let w = (-1.0 / (s * (1.0 - s))).exp();
        num += w * d;
        den += w;
    }
    num / den
}

/// Rotation number of an ordered sequence of points on an invariant curve,
/// by the weighted Birkhoff average of the angle increments about the
/// centroid. The uncertainty is the change from using only the first half.
pub fn rotation_of_points(points: &[[f64; 2]]) -> Result<RotationEstimate, SimError> {
    if points.len() < 4 {
        return Err(SimError::InsufficientData {
            found: points.len(),
            needed: 4,
        });
    }
    let c = centroid(points);
    let increments: Vec<f64> = points
        .windows(2)
        .map(|w| (turns(&w[1], &c) - turns(&w[0], &c)).rem_euclid(1.0))
        .collect();
    let full = weighted_average(&increments);
    let half = weighted_average(&increments[..increments.len() / 2]);
    Ok(RotationEstimate {
        estimate: full,
        uncertainty: (full - half).abs(),
    })
}

/// Rotation number of a section record. Requires at least
/// [`MIN_ROTATION_POINTS`] points not classified as scattered.
pub fn rotation_number(rec: &SectionRecord) -> Result<RotationEstimate, SimError> {
    let plane = rec.plane_points();
    if plane.len() < MIN_ROTATION_POINTS {
        return Err(SimError::InsufficientData {
            found: plane.len(),
            needed: MIN_ROTATION_POINTS,
        });
    }
    let evidence = match rec.evidence {
        Some(e) => e,
        None => torus_classify(&plane)?,
    };
    if evidence.class == TorusClass::Scattered {
        return Err(SimError::NotApplicable(format!(
            "section points are scattered (residual {:.3e})",
            evidence.residual
        )));
    }
    rotation_of_points(&plane)
}

/// Running time averages of `values` sampled at `times`, trapezoidal in
/// time. The first entry is the first value.
pub fn running_average(times: &[f64], values: &[f64]) -> Result<Vec<f64>, SimError> {
    if times.is_empty() || times.len() != values.len() {
        return Err(SimError::EmptyTrajectory);
    }
    let mut out = Vec::with_capacity(times.len());
    out.push(values[0]);
    let mut integral = 0.0;
    for k in 1..times.len() {
        integral += 0.5 * (values[k] + values[k - 1]) * (times[k] - times[k - 1]);
        let span = times[k] - times[0];
        out.push(if span > 0.0 { integral / span } else { values[k] });
    }
    Ok(out)
}

/// Running Birkhoff averages of the temperature observable along `traj`.
pub fn birkhoff_temperature(traj: &Trajectory, model: &HamiltonianModel) -> Result<Vec<f64>, SimError> {
    if traj.times.is_empty() {
        return Err(SimError::EmptyTrajectory);
    }
    let values = traj
        .states
        .iter()
        .map(|x| model.temperature_observable(x))
        .collect::<Result<Vec<_>, _>>()?;
    running_average(&traj.times, &values)
}

/// `max - min` of a running average over times in the last `fraction` of
/// the run.
pub fn tail_oscillation(times: &[f64], averages: &[f64], fraction: f64) -> f64 {
    let Some(&t_end) = times.last() else {
        return 0.0;
    };
    let start = t_end * (1.0 - fraction);
    let tail = times.iter().zip(averages).filter(|(t, _)| **t >= start).map(|(_, a)| *a);
    let (lo, hi) = tail.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), a| (lo.min(a), hi.max(a)));
    if hi >= lo {
        hi - lo
    } else {
        0.0
    }
}

/// Streaming trapezoidal time average, for runs too long to store.
#[derive(Debug, Clone, Default)]
pub struct TimeAverage {
    t0: Option<f64>,
    last: Option<(f64, f64)>,
    integral: f64,
}

impl TimeAverage {
    pub fn push(&mut self, t: f64, value: f64) -> f64 {
        if let Some((tp, vp)) = self.last {
            self.integral += 0.5 * (value + vp) * (t - tp);
        } else {
            self.t0 = Some(t);
        }
        self.last = Some((t, value));
        self.value()
    }

    pub fn value(&self) -> f64 {
        match (self.t0, self.last) {
            (Some(t0), Some((t, _))) if t > t0 => self.integral / (t - t0),
            (_, Some((_, v))) => v,
            _ => f64::NAN,
        }
    }
}

/// Rotation number of the linearized section map at a periodic orbit of
/// period `period` through `x0`, from the variational equations. Only the
/// `plane` block of the section map is used, so the other directions must
/// be neutral (conserved or cut by the section).
pub fn linearized_rotation_number(
    model: &HamiltonianModel,
    x0: &[f64],
    period: f64,
    section: &SectionSpec,
) -> Result<f64, SimError> {
    let n = model.dim();
    let steps = 20_000usize;
    let h = period / steps as f64;
    // state and fundamental matrix, advanced by classical RK4
    let mut x = load(x0);
    let mut phi = DMatrix::<f64>::identity(n, n);
    let rhs = |x: &Buf, phi: &DMatrix<f64>| -> Result<(Buf, DMatrix<f64>), SimError> {
        Ok((field(model, x, n)?, jacobian(model, x, n)? * phi))
    };
    for _ in 0..steps {
        let (k1, p1) = rhs(&x, &phi)?;
        let shift = |x: &Buf, k: &Buf, s: f64| {
            let mut y = *x;
            for i in 0..n {
                y[i] += s * k[i];
            }
            y
        };
        let (k2, p2) = rhs(&shift(&x, &k1, 0.5 * h), &(&phi + &p1 * (0.5 * h)))?;
        let (k3, p3) = rhs(&shift(&x, &k2, 0.5 * h), &(&phi + &p2 * (0.5 * h)))?;
        let (k4, p4) = rhs(&shift(&x, &k3, h), &(&phi + &p3 * h))?;
        for i in 0..n {
            x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        phi += (p1 + p2 * 2.0 + p3 * 2.0 + p4) * (h / 6.0);
    }
    // project out the change in return time: P = Phi - f (e_c . Phi) / f_c
    let f = field(model, &x, n)?;
    let c = section.coordinate;
    if f[c].abs() < 1e-12 {
        return Err(SimError::NotApplicable("the orbit is tangent to the section".into()));
    }
    let [a, b] = section.plane;
    let p = |i: usize, j: usize| phi[(i, j)] - f[i] * phi[(c, j)] / f[c];
    let trace = p(a, a) + p(b, b);
    let angle = (0.5 * trace).clamp(-1.0, 1.0).acos() / TAU;
    // clockwise turning has the momentum falling as the coordinate grows
    Ok(if p(b, a) <= 0.0 { angle } else { 1.0 - angle })
}

/// A point at distance `radius` from the periodic orbit `sigma = W = 1`,
/// `Sigma = 0`, in direction `angle` of the `(sigma, Sigma)` plane.
pub fn near_xi1(radius: f64, angle: f64) -> Vec<f64> {
    vec![0.0, 1.0 + radius * angle.cos(), 1.0, radius * angle.sin()]
}

/// Cells of the high-temperature experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentGrid {
    pub betas: Vec<f64>,
    pub radii: Vec<f64>,
    pub angles: usize,
    pub n_points: usize,
    pub dt: f64,
    pub t_max: f64,
}

impl Default for ExperimentGrid {
    fn default() -> ExperimentGrid {
        ExperimentGrid {
            betas: vec![0.0, 1e-3, 1e-2, 1e-1],
            radii: vec![0.05, 0.1, 0.2],
            angles: 8,
            n_points: 256,
            dt: 1e-2,
            t_max: 4000.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub beta: f64,
    pub radius: f64,
    pub angle_index: usize,
    pub ic: Vec<f64>,
    pub points: usize,
    pub evidence: Option<TorusEvidence>,
    pub rotation: Option<RotationEstimate>,
    pub temperature_average: f64,
    pub temperature_tail: f64,
    pub energy_drift: f64,
    pub error: Option<String>,
}

/// One cell: a section in `w` plus the Birkhoff temperature average along
/// the same orbit, without storing the trajectory.
pub fn run_cell(model: &HamiltonianModel, ic: &[f64], grid: &ExperimentGrid) -> CellResult {
    let method = Method::ImplicitMidpoint { dt: grid.dt };
    let section = SectionSpec::angle(0.0);
    let e0 = model.evaluate(ic).unwrap_or(f64::NAN);
    let mut avg = TimeAverage::default();
    let mut history: Vec<(f64, f64)> = Vec::new();
    let mut drift: f64 = 0.0;
    let mut plane: Vec<[f64; 2]> = Vec::new();
    let [a, b] = section.plane;
    let outcome = drive(model, ic, grid.t_max, &method, |s| {
        if avg.last.is_none() {
            avg.push(s.t0, model.temperature_observable(s.x0)?);
        }
        history.push((s.t1, avg.push(s.t1, model.temperature_observable(s.x1)?)));
        drift = drift.max((model.evaluate(s.x1)? - e0).abs());
        if let Some(target) = section.crossed(s.x0, s.x1) {
            let (_, x) = refine_crossing(model, &method, &section, s, target)?;
            plane.push([x[a], x[b]]);
        }
        Ok(if plane.len() >= grid.n_points {
            Control::Stop
        } else {
            Control::Continue
        })
    });
    let error = match outcome {
        Err(e) => Some(e.to_string()),
        Ok(end) => end.exit,
    };
    let (times, avgs): (Vec<f64>, Vec<f64>) = history.into_iter().unzip();
    let evidence = if plane.len() >= MIN_CLASSIFY_POINTS {
        torus_classify(&plane).ok()
    } else {
        None
    };
    let rotation = match evidence {
        Some(e) if e.class != TorusClass::Scattered && plane.len() >= MIN_ROTATION_POINTS => {
            rotation_of_points(&plane).ok()
        }
        _ => None,
    };
    CellResult {
        beta: model.beta,
        radius: 0.0,
        angle_index: 0,
        ic: ic.to_vec(),
        points: plane.len(),
        evidence,
        rotation,
        temperature_average: avg.value(),
        temperature_tail: tail_oscillation(&times, &avgs, 0.1),
        energy_drift: drift,
        error,
    }
}

/// Runs every `(beta, radius, angle)` cell in parallel for `base` with
/// `beta` replaced. Results are in grid order and independent of the
/// thread count.
pub fn run_grid(base: &HamiltonianModel, grid: &ExperimentGrid) -> Vec<CellResult> {
    let mut cells = Vec::new();
    for &beta in &grid.betas {
        for &radius in &grid.radii {
            for k in 0..grid.angles {
                cells.push((beta, radius, k));
            }
        }
    }
    cells
        .par_iter()
        .map(|&(beta, radius, k)| {
            let model = HamiltonianModel { beta, ..base.clone() };
            let ic = near_xi1(radius, TAU * k as f64 / grid.angles as f64);
            CellResult {
                radius,
                angle_index: k,
                ..run_cell(&model, &ic, grid)
            }
        })
        .collect()
}
