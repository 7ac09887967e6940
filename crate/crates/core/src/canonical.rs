//! Canonical transformations: closed-form maps, maps induced by mixed-variable
//! generating functions, composition, and a numerical symplecticity check.
//!
//! A map always expresses the *old* canonical variables as functions of the
//! *new* ones. Variables are ordered coordinates first, then momenta, and
//! the momentum at position `n + i` is conjugate to the coordinate at `i`.
//!
//! Generating-function conventions. For a generator `phi(P; q')` of old
//! momenta and new coordinates, `Q = d phi / dP` and `P' = d phi / dq'`; the
//! identity is `phi = q' . P`. For a generator `phi(Q; P')` of old
//! coordinates and new momenta, `P = d phi / dQ` and `Q' = d phi / dP'`.

use std::collections::BTreeMap;
use std::sync::Arc;

use num_traits::{One, Zero};
use rand::Rng;
use thiserror::Error;

use crate::expr::{num, q, var, Expr, ExprError};
use crate::jet::{GradedJet, JetError, JetSpace, Rational};
use crate::linalg;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CanonicalError {
    #[error("point {point:?} is outside the domain of `{map}`: {reason}")]
    OutsideDomain {
        map: String,
        point: Vec<f64>,
        reason: String,
    },
    #[error("generating function is not solvable: {0}")]
    NotSolvable(String),
    #[error("incompatible variable spaces: {0}")]
    Incompatible(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("unknown map `{0}`")]
    UnknownMap(String),
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error(transparent)]
    Jet(#[from] JetError),
}

/// Finite-difference step used by [`symplectic_check`].
pub const FD_STEP: f64 = 1e-6;

/// One old variable as a function of the new ones.
#[derive(Debug, Clone, PartialEq)]
pub enum Component {
    Expr(Expr),
    /// A truncated series; its variables are the new variables by name.
    Jet(GradedJet),
}

impl Component {
    fn eval(&self, names: &[String], x: &[f64]) -> Result<f64, ExprError> {
        match self {
            Component::Expr(e) => e.eval_at(names, x),
            Component::Jet(j) => {
                let pt: Vec<f64> = j
                    .vars()
                    .iter()
                    .map(|v| names.iter().position(|n| n == v).map_or(0.0, |i| x[i]))
                    .collect();
                Ok(j.eval_f64(&pt))
            }
        }
    }

    pub fn to_expr(&self) -> Expr {
        match self {
            Component::Expr(e) => e.clone(),
            Component::Jet(j) => Expr::from_jet(j),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Constraint {
    Less(String, f64),
    Greater(String, f64),
    /// The pair of variables must not both vanish.
    OffOrigin(String, String),
    /// Every new variable must lie within this max-norm radius.
    Ball(f64),
}

impl Constraint {
    fn check(&self, names: &[String], x: &[f64]) -> Result<(), String> {
        let get = |n: &str| names.iter().position(|m| m == n).map(|i| x[i]);
        match self {
            Constraint::Less(v, b) => match get(v) {
                Some(val) if val < *b => Ok(()),
                _ => Err(format!("requires {v} < {b}")),
            },
            Constraint::Greater(v, b) => match get(v) {
                Some(val) if val > *b => Ok(()),
                _ => Err(format!("requires {v} > {b}")),
            },
            Constraint::OffOrigin(a, b) => match (get(a), get(b)) {
                (Some(p), Some(q)) if p != 0.0 || q != 0.0 => Ok(()),
                _ => Err(format!("requires ({a}, {b}) != 0")),
            },
            Constraint::Ball(r) => {
                if x.iter().all(|v| v.abs() <= *r) {
                    Ok(())
                } else {
                    Err(format!("requires all coordinates within {r}"))
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CanonicalMap {
    pub name: String,
    pub old_vars: Vec<String>,
    pub new_vars: Vec<String>,
    pub components: Vec<Component>,
    pub domain: Vec<Constraint>,
    /// Interior box in the new variables used for randomized checks.
    pub sample_box: Vec<(f64, f64)>,
    pub inverse: Option<Box<CanonicalMap>>,
    /// For composites: the factors, innermost first, used for evaluation so
    /// that every intermediate domain is enforced.
    stages: Vec<CanonicalMap>,
    /// Exact evaluation of a map induced by a polynomial generator; the
    /// jet components are then only used for algebra.
    implicit: Option<Arc<ImplicitRelations>>,
}

fn names(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

impl CanonicalMap {
    pub fn new(
        name: &str,
        old_vars: &[&str],
        new_vars: &[&str],
        components: Vec<Expr>,
        domain: Vec<Constraint>,
        sample_box: Vec<(f64, f64)>,
    ) -> CanonicalMap {
        assert_eq!(old_vars.len(), components.len());
        assert_eq!(new_vars.len(), sample_box.len());
        CanonicalMap {
            name: name.to_string(),
            old_vars: names(old_vars),
            new_vars: names(new_vars),
            components: components.into_iter().map(Component::Expr).collect(),
            domain,
            sample_box,
            inverse: None,
            stages: Vec::new(),
            implicit: None,
        }
    }

    fn with_inverse(mut self, inv: CanonicalMap) -> CanonicalMap {
        self.inverse = Some(Box::new(inv));
        self
    }

    pub fn identity(vars: &[&str]) -> CanonicalMap {
        let m = CanonicalMap::new(
            "identity",
            vars,
            vars,
            vars.iter().map(|v| var(v)).collect(),
            vec![],
            vec![(-1.0, 1.0); vars.len()],
        );
        let inv = m.clone();
        m.with_inverse(inv)
    }

    pub fn dof(&self) -> usize {
        self.new_vars.len() / 2
    }

    pub fn check_domain(&self, x: &[f64]) -> Result<(), CanonicalError> {
        for c in &self.domain {
            c.check(&self.new_vars, x).map_err(|reason| CanonicalError::OutsideDomain {
                map: self.name.clone(),
                point: x.to_vec(),
                reason,
            })?;
        }
        Ok(())
    }

    /// Old variables at the given new-variable point.
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>, CanonicalError> {
        if x.len() != self.new_vars.len() {
            return Err(CanonicalError::Incompatible(format!(
                "`{}` expects {} coordinates, got {}",
                self.name,
                self.new_vars.len(),
                x.len()
            )));
        }
        self.check_domain(x)?;
        if !self.stages.is_empty() {
            let mut cur = x.to_vec();
            let mut cur_names = self.new_vars.clone();
            for st in &self.stages {
                let reordered: Vec<f64> = st
                    .new_vars
                    .iter()
                    .map(|n| cur[cur_names.iter().position(|m| m == n).expect("stage names")])
                    .collect();
                cur = st.apply(&reordered)?;
                cur_names = st.old_vars.clone();
            }
            return Ok(cur);
        }
        if let Some(imp) = &self.implicit {
            return imp.solve(x).map_err(|reason| CanonicalError::OutsideDomain {
                map: self.name.clone(),
                point: x.to_vec(),
                reason,
            });
        }
        let mut out = Vec::with_capacity(self.components.len());
        for c in &self.components {
            let v = c.eval(&self.new_vars, x).map_err(|e| match e {
                ExprError::Domain(reason) => CanonicalError::OutsideDomain {
                    map: self.name.clone(),
                    point: x.to_vec(),
                    reason,
                },
                other => CanonicalError::Expr(other),
            })?;
            out.push(v);
        }
        Ok(out)
    }

    /// Expresses `h`, written in the old variables, in the new variables.
    pub fn pullback(&self, h: &Expr) -> Expr {
        let map: BTreeMap<String, Expr> = self
            .old_vars
            .iter()
            .cloned()
            .zip(self.components.iter().map(Component::to_expr))
            .collect();
        h.substitute(&map)
    }

    /// Uniform samples from the interior box that also satisfy the domain.
    pub fn sample_points<R: Rng>(&self, rng: &mut R, n: usize) -> Vec<Vec<f64>> {
        let mut pts = Vec::with_capacity(n);
        while pts.len() < n {
            let p: Vec<f64> = self
                .sample_box
                .iter()
                .map(|&(lo, hi)| rng.gen_range(lo..hi))
                .collect();
            if self.check_domain(&p).is_ok() {
                pts.push(p);
            }
        }
        pts
    }
}

/// `outer ∘ inner`: the old variables of `outer` in terms of the new
/// variables of `inner`. The old variables of `inner` must be the new
/// variables of `outer` (in any order).
pub fn compose(outer: &CanonicalMap, inner: &CanonicalMap) -> Result<CanonicalMap, CanonicalError> {
    let mut a = outer.new_vars.clone();
    let mut b = inner.old_vars.clone();
    a.sort();
    b.sort();
    if a != b {
        return Err(CanonicalError::Incompatible(format!(
            "`{}` produces {:?} but `{}` expects {:?}",
            inner.name, inner.old_vars, outer.name, outer.new_vars
        )));
    }
    let all_jets = outer.components.iter().all(|c| matches!(c, Component::Jet(_)))
        && inner.components.iter().all(|c| matches!(c, Component::Jet(_)));
    let components = if all_jets {
        let target = match &inner.components[0] {
            Component::Jet(j) => j.space().clone(),
            Component::Expr(_) => unreachable!(),
        };
        let bindings: BTreeMap<String, GradedJet> = inner
            .old_vars
            .iter()
            .zip(&inner.components)
            .map(|(n, c)| match c {
                Component::Jet(j) => (n.clone(), j.clone()),
                Component::Expr(_) => unreachable!(),
            })
            .collect();
        outer
            .components
            .iter()
            .map(|c| match c {
                Component::Jet(j) => Ok(Component::Jet(j.substitute(&bindings, &target)?)),
                Component::Expr(_) => unreachable!(),
            })
            .collect::<Result<Vec<_>, JetError>>()?
    } else {
        let sub: BTreeMap<String, Expr> = inner
            .old_vars
            .iter()
            .cloned()
            .zip(inner.components.iter().map(Component::to_expr))
            .collect();
        outer
            .components
            .iter()
            .map(|c| Component::Expr(c.to_expr().substitute(&sub)))
            .collect()
    };
    let mut stages = if inner.stages.is_empty() {
        vec![inner.clone()]
    } else {
        inner.stages.clone()
    };
    if outer.stages.is_empty() {
        stages.push(outer.clone());
    } else {
        stages.extend(outer.stages.iter().cloned());
    }
    let inverse = match (&outer.inverse, &inner.inverse) {
        (Some(oi), Some(ii)) => Some(Box::new(compose(ii, oi)?)),
        _ => None,
    };
    Ok(CanonicalMap {
        name: format!("{}∘{}", outer.name, inner.name),
        old_vars: outer.old_vars.clone(),
        new_vars: inner.new_vars.clone(),
        components,
        domain: inner.domain.clone(),
        sample_box: inner.sample_box.clone(),
        inverse,
        stages,
        implicit: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SymplecticReport {
    pub max_deviation: f64,
    pub tol: f64,
    pub points: usize,
}

impl SymplecticReport {
    pub fn passed(&self) -> bool {
        self.max_deviation < self.tol
    }
}

/// Max over `points` of the entrywise deviation of `Jᵀ Ω J` from `Ω`, with
/// `J` the central-difference Jacobian (step [`FD_STEP`]).
pub fn symplectic_check(
    map: &CanonicalMap,
    points: &[Vec<f64>],
    tol: f64,
) -> Result<SymplecticReport, CanonicalError> {
    let dim = map.new_vars.len();
    let n = dim / 2;
    let omega = |i: usize, j: usize| -> f64 {
        if i < n && j == i + n {
            1.0
        } else if i >= n && j + n == i {
            -1.0
        } else {
            0.0
        }
    };
    let mut worst: f64 = 0.0;
    for p in points {
        map.check_domain(p)?;
        let mut jac = vec![vec![0.0; dim]; dim];
        for j in 0..dim {
            let mut hi = p.clone();
            let mut lo = p.clone();
            hi[j] += FD_STEP;
            lo[j] -= FD_STEP;
            let fh = map.apply(&hi)?;
            let fl = map.apply(&lo)?;
            for i in 0..dim {
                jac[i][j] = (fh[i] - fl[i]) / (2.0 * FD_STEP);
            }
        }
        for a in 0..dim {
            for b in 0..dim {
                let mut s = 0.0;
                for i in 0..dim {
                    for k in 0..dim {
                        let w = omega(i, k);
                        if w != 0.0 {
                            s += jac[i][a] * w * jac[k][b];
                        }
                    }
                }
                worst = worst.max((s - omega(a, b)).abs());
            }
        }
    }
    Ok(SymplecticReport {
        max_deviation: worst,
        tol,
        points: points.len(),
    })
}

/// `q = sqrt(M) w, p = W / sqrt(M), s = sigma / sqrt(M T), p_s = sqrt(M T) Sigma`.
pub fn nose_rescaling(mass: f64, temperature: f64) -> Result<CanonicalMap, CanonicalError> {
    if !(mass > 0.0 && mass.is_finite()) || !(temperature > 0.0 && temperature.is_finite()) {
        return Err(CanonicalError::InvalidParameter(format!(
            "rescaling needs M > 0 and T > 0 (got M={mass}, T={temperature})"
        )));
    }
    let rm = mass.sqrt();
    let rmt = (mass * temperature).sqrt();
    let fwd = CanonicalMap::new(
        "rescale",
        &["q", "s", "p", "p_s"],
        &["w", "sigma", "W", "Sigma"],
        vec![
            Expr::Real(rm) * var("w"),
            var("sigma") * Expr::Real(1.0 / rmt),
            var("W") * Expr::Real(1.0 / rm),
            Expr::Real(rmt) * var("Sigma"),
        ],
        vec![Constraint::Greater("sigma".into(), 0.0)],
        vec![(-3.0, 3.0), (0.3, 3.0), (-2.0, 2.0), (-2.0, 2.0)],
    );
    let inv = CanonicalMap::new(
        "rescale^-1",
        &["w", "sigma", "W", "Sigma"],
        &["q", "s", "p", "p_s"],
        vec![
            var("q") * Expr::Real(1.0 / rm),
            Expr::Real(rmt) * var("s"),
            Expr::Real(rm) * var("p"),
            var("p_s") * Expr::Real(1.0 / rmt),
        ],
        vec![Constraint::Greater("s".into(), 0.0)],
        vec![(-3.0, 3.0), (0.3, 3.0), (-2.0, 2.0), (-2.0, 2.0)],
    );
    Ok(fwd.with_inverse(inv))
}

/// Polar coordinates `(sigma, w)` of the cartesian point `(a, b)` with the
/// cotangent lift of the momenta; `a B - b A = W` is the angular momentum.
pub fn polar_cartesian() -> CanonicalMap {
    let r = || (var("a").powi(2) + var("b").powi(2)).sqrt();
    let fwd = CanonicalMap::new(
        "polar",
        &["sigma", "w", "Sigma", "W"],
        &["a", "b", "A", "B"],
        vec![
            r(),
            Expr::atan2(var("b"), var("a")),
            (var("a") * var("A") + var("b") * var("B")) / r(),
            var("a") * var("B") - var("b") * var("A"),
        ],
        vec![Constraint::OffOrigin("a".into(), "b".into())],
        // stays off the branch cut of the angle
        vec![(0.3, 2.0), (-1.0, 1.0), (-2.0, 2.0), (-2.0, 2.0)],
    );
    let inv = CanonicalMap::new(
        "polar^-1",
        &["a", "b", "A", "B"],
        &["sigma", "w", "Sigma", "W"],
        vec![
            var("sigma") * var("w").cos(),
            var("sigma") * var("w").sin(),
            var("Sigma") * var("w").cos() - var("W") * var("w").sin() / var("sigma"),
            var("Sigma") * var("w").sin() + var("W") * var("w").cos() / var("sigma"),
        ],
        vec![Constraint::Greater("sigma".into(), 0.0)],
        vec![(0.3, 2.0), (-1.5, 1.5), (-2.0, 2.0), (-2.0, 2.0)],
    );
    fwd.with_inverse(inv)
}

/// Map induced by `phi(W, Sigma; u, v) = (1 - u) W Sigma + (1 - W) v`, which
/// sends `{u = 0, U = 0}` onto the periodic variety `sigma = |W|, Sigma = 0`.
pub fn fgen() -> CanonicalMap {
    let one = || num(1);
    let fwd = CanonicalMap::new(
        "fgen",
        &["sigma", "w", "Sigma", "W"],
        &["u", "v", "U", "V"],
        vec![
            (one() - var("u")) * (one() - var("V")),
            -var("v") - var("U") * (one() - var("u")) / (one() - var("V")),
            var("U") / (var("V") - one()),
            one() - var("V"),
        ],
        vec![
            Constraint::Less("V".into(), 1.0),
            Constraint::Less("u".into(), 1.0),
        ],
        vec![(-0.5, 0.5), (-3.0, 3.0), (-1.0, 1.0), (-0.5, 0.5)],
    );
    let inv = CanonicalMap::new(
        "fgen^-1",
        &["u", "v", "U", "V"],
        &["sigma", "w", "Sigma", "W"],
        vec![
            one() - var("sigma") / var("W"),
            -var("w") + var("Sigma") * var("sigma") / var("W"),
            -var("Sigma") * var("W"),
            one() - var("W"),
        ],
        vec![
            Constraint::Greater("W".into(), 0.0),
            Constraint::Greater("sigma".into(), 0.0),
        ],
        vec![(0.5, 1.5), (-3.0, 3.0), (-1.0, 1.0), (0.5, 1.5)],
    );
    fwd.with_inverse(inv)
}

/// Map induced by `phi = w V sqrt(sigma) + sigma U`.
pub fn ho_sqrt() -> CanonicalMap {
    let fwd = CanonicalMap::new(
        "ho-sqrt",
        &["sigma", "w", "Sigma", "W"],
        &["u", "v", "U", "V"],
        vec![
            var("u"),
            var("v") / var("u").sqrt(),
            var("U") + q(1, 2) * var("v") * var("V") / var("u"),
            var("V") * var("u").sqrt(),
        ],
        vec![Constraint::Greater("u".into(), 0.0)],
        vec![(0.5, 1.5), (-1.0, 1.0), (-1.0, 1.0), (-1.0, 1.0)],
    );
    let inv = CanonicalMap::new(
        "ho-sqrt^-1",
        &["u", "v", "U", "V"],
        &["sigma", "w", "Sigma", "W"],
        vec![
            var("sigma"),
            var("w") * var("sigma").sqrt(),
            var("Sigma") - q(1, 2) * var("w") * var("W") / var("sigma"),
            var("W") / var("sigma").sqrt(),
        ],
        vec![Constraint::Greater("sigma".into(), 0.0)],
        vec![(0.5, 1.5), (-1.0, 1.0), (-1.0, 1.0), (-1.0, 1.0)],
    );
    fwd.with_inverse(inv)
}

/// `u -> 1 - u, U -> -U`; an involution.
pub fn flip_u() -> CanonicalMap {
    let m = CanonicalMap::new(
        "flip-u",
        &["u", "v", "U", "V"],
        &["u", "v", "U", "V"],
        vec![num(1) - var("u"), var("v"), -var("U"), var("V")],
        vec![],
        vec![(-0.5, 0.5), (-1.0, 1.0), (-1.0, 1.0), (-1.0, 1.0)],
    );
    let inv = m.clone();
    m.with_inverse(inv)
}

/// Which half of the old and new variables a generating function depends on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GeneratorKind {
    /// `phi(P; q')`
    OldMomentaNewCoords,
    /// `phi(Q; P')`
    OldCoordsNewMomenta,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratingFunction {
    pub kind: GeneratorKind,
    /// Old coordinates then old momenta.
    pub old_vars: Vec<String>,
    /// New coordinates then new momenta.
    pub new_vars: Vec<String>,
    /// Generator in the mixed variables, plus any weight-zero parameters.
    /// The old-variable arguments are displacements from `old_base`.
    pub body: GradedJet,
    pub old_base: BTreeMap<String, Rational>,
    /// Whether `body` is an exact polynomial rather than a truncated series;
    /// a truncated body loses one order to differentiation.
    pub exact_polynomial: bool,
}

impl GeneratingFunction {
    /// The near-identity generator `q' . P + body` in the old-momenta /
    /// new-coordinates form.
    pub fn near_identity(
        old_vars: &[&str],
        new_vars: &[&str],
        body: GradedJet,
    ) -> GeneratingFunction {
        GeneratingFunction {
            kind: GeneratorKind::OldMomentaNewCoords,
            old_vars: names(old_vars),
            new_vars: names(new_vars),
            body,
            old_base: BTreeMap::new(),
            exact_polynomial: true,
        }
    }
}

/// A map produced by [`induce_map`]. Its new variables are displacements
/// from `new_base`, the value the new variables take at the expansion point.
#[derive(Debug, Clone, PartialEq)]
pub struct InducedMap {
    pub map: CanonicalMap,
    pub new_base: Vec<Rational>,
}

impl InducedMap {
    pub fn jet(&self, old_var: &str) -> Option<&GradedJet> {
        let i = self.map.old_vars.iter().position(|v| v == old_var)?;
        match &self.map.components[i] {
            Component::Jet(j) => Some(j),
            Component::Expr(_) => None,
        }
    }
}

/// Derives the canonical map of a generating function and solves the mixed
/// relations for the old variables order by order.
pub fn induce_map(g: &GeneratingFunction) -> Result<InducedMap, CanonicalError> {
    let n = g.old_vars.len() / 2;
    if g.old_vars.len() != 2 * n || g.new_vars.len() != 2 * n || n == 0 {
        return Err(CanonicalError::Incompatible(
            "generating function needs n old and n new canonical pairs".into(),
        ));
    }
    let (old_q, old_p) = g.old_vars.split_at(n);
    let (new_q, new_p) = g.new_vars.split_at(n);
    // unknown: the old half in the body; known: the new half in the body;
    // target: the new half defined by differentiating in the known half.
    let (unknown, known, target, old_unknown_is_coord) = match g.kind {
        GeneratorKind::OldMomentaNewCoords => (old_p, new_q, new_p, false),
        GeneratorKind::OldCoordsNewMomenta => (old_q, new_p, new_q, true),
    };
    let body_space = g.body.space().clone();
    for v in unknown.iter().chain(known) {
        if body_space.index_of(v).is_none() {
            return Err(CanonicalError::Incompatible(format!(
                "generator body has no variable `{v}`"
            )));
        }
    }
    let params: Vec<&String> = body_space
        .vars()
        .iter()
        .filter(|v| !unknown.contains(v) && !known.contains(v))
        .collect();
    for p in &params {
        if body_space.weight_of(p) != Some(0) {
            return Err(CanonicalError::Incompatible(format!(
                "generator variable `{p}` is neither a mixed argument nor a weight-0 parameter"
            )));
        }
    }
    let max_arg_weight = unknown
        .iter()
        .chain(known)
        .filter_map(|v| body_space.weight_of(v))
        .max()
        .unwrap_or(1);
    let out_max = if g.exact_polynomial {
        g.body.max_degree()
    } else {
        g.body
            .max_degree()
            .checked_sub(max_arg_weight)
            .ok_or_else(|| CanonicalError::NotSolvable("generator truncated too low".into()))?
    };
    // Output space: new coordinates, new momenta, parameters.
    let weight_of_new = |k: usize| -> u32 {
        let name = &g.new_vars[k];
        body_space.weight_of(name).unwrap_or_else(|| {
            // paired with the unknown old variable of the same slot
            let slot = k % n;
            body_space.weight_of(&unknown[slot]).unwrap_or(1)
        })
    };
    let mut out_vars: Vec<String> = g.new_vars.clone();
    let mut out_w: Vec<u32> = (0..2 * n).map(weight_of_new).collect();
    for p in &params {
        out_vars.push((*p).clone());
        out_w.push(0);
    }
    let out_space = JetSpace::new(&out_vars, &out_w, out_max)?;

    let deriv = |v: &str| -> Result<GradedJet, JetError> {
        let d = g.body.partial_derivative(v)?;
        Ok(if g.exact_polynomial {
            d.promote(out_max)
        } else {
            d.truncate(out_max)
        })
    };
    let rel: Vec<GradedJet> = known.iter().map(|v| deriv(v)).collect::<Result<_, _>>()?;
    let partner: Vec<GradedJet> = unknown.iter().map(|v| deriv(v)).collect::<Result<_, _>>()?;

    // Linear part of the relations in the unknowns, at the expansion point.
    let mut a = vec![vec![Rational::zero(); n]; n];
    for (i, r) in rel.iter().enumerate() {
        for (j, u) in unknown.iter().enumerate() {
            let idx = body_space.index_of(u).expect("checked");
            let mut e = vec![0; body_space.len()];
            e[idx] = 1;
            a[i][j] = r.coefficient(&e);
        }
    }
    let a_inv = linalg::invert(&a).ok_or_else(|| {
        CanonicalError::NotSolvable(format!(
            "singular linear part {a:?} of d phi/d({})",
            known.join(", ")
        ))
    })?;

    // base of the target variables: degree-0 part of each relation
    let base_jets: Vec<GradedJet> = rel.iter().map(|r| r.homogeneous_part(0)).collect();
    let new_base_targets: Vec<Rational> = base_jets.iter().map(GradedJet::constant_term).collect();
    for b in &base_jets {
        if !b.is_parameter_only() || b.num_terms() > 1 {
            return Err(CanonicalError::NotSolvable(
                "expansion point depends on parameters".into(),
            ));
        }
    }

    let to_out = |j: &GradedJet, bind: &[GradedJet]| -> Result<GradedJet, JetError> {
        let mut b = BTreeMap::new();
        for (u, img) in unknown.iter().zip(bind) {
            b.insert(u.clone(), img.clone());
        }
        j.substitute(&b, &out_space)
    };
    let lin_part = |delta: &[GradedJet]| -> Vec<GradedJet> {
        (0..n)
            .map(|i| {
                let mut s = GradedJet::zero(&out_space);
                for j in 0..n {
                    s = &s + &delta[j].scale(&a[i][j]);
                }
                s
            })
            .collect()
    };
    let target_jets: Vec<GradedJet> = target
        .iter()
        .map(|t| GradedJet::var(&out_space, t))
        .collect::<Result<_, _>>()?;

    let mut delta: Vec<GradedJet> = vec![GradedJet::zero(&out_space); n];
    let mut converged = false;
    for _ in 0..=(out_max + 2) {
        let lin = lin_part(&delta);
        let mut rhs = Vec::with_capacity(n);
        for i in 0..n {
            let full = to_out(&rel[i], &delta)?.promote(out_max);
            let resid = (&full - &lin[i]).add_constant(&-new_base_targets[i].clone());
            rhs.push(&target_jets[i] - &resid);
        }
        let next: Vec<GradedJet> = (0..n)
            .map(|i| {
                let mut s = GradedJet::zero(&out_space);
                for j in 0..n {
                    s = &s + &rhs[j].scale(&a_inv[i][j]);
                }
                s
            })
            .collect();
        if next == delta {
            converged = true;
            break;
        }
        delta = next;
    }
    if !converged {
        return Err(CanonicalError::NotSolvable(
            "order-by-order inversion did not settle".into(),
        ));
    }

    let mut solved: Vec<GradedJet> = Vec::with_capacity(n);
    let mut partners: Vec<GradedJet> = Vec::with_capacity(n);
    for (i, u) in unknown.iter().enumerate() {
        let base = g.old_base.get(u).cloned().unwrap_or_else(Rational::zero);
        solved.push(delta[i].add_constant(&base));
        partners.push(to_out(&partner[i], &delta)?.promote(out_max));
    }
    let (coords, momenta) = if old_unknown_is_coord {
        (solved, partners)
    } else {
        (partners, solved)
    };
    let components: Vec<Component> = coords.into_iter().chain(momenta).map(Component::Jet).collect();

    let mut new_base = vec![Rational::zero(); 2 * n];
    for (i, t) in target.iter().enumerate() {
        let k = g.new_vars.iter().position(|v| v == t).expect("target");
        new_base[k] = new_base_targets[i].clone();
    }
    let map = CanonicalMap {
        name: "induced".into(),
        old_vars: g.old_vars.clone(),
        new_vars: g.new_vars.clone(),
        components,
        domain: vec![Constraint::Ball(0.2)],
        sample_box: vec![(-0.05, 0.05); 2 * n],
        inverse: None,
        stages: Vec::new(),
        implicit: None,
    };
    let mut map = map;
    if g.exact_polynomial && params.is_empty() && g.old_base.is_empty() {
        let unknown_idx: Vec<usize> = unknown
            .iter()
            .map(|v| body_space.index_of(v).expect("checked"))
            .collect();
        let known_slots: Vec<(usize, usize)> = known
            .iter()
            .map(|v| {
                (
                    body_space.index_of(v).expect("checked"),
                    g.new_vars.iter().position(|n| n == v).expect("known is new"),
                )
            })
            .collect();
        let target_slots: Vec<usize> = target
            .iter()
            .map(|v| g.new_vars.iter().position(|n| n == v).expect("target is new"))
            .collect();
        let body_rel: Vec<GradedJet> = known
            .iter()
            .map(|v| g.body.polynomial_derivative(v))
            .collect::<Result<_, _>>()?;
        let body_partner: Vec<GradedJet> = unknown
            .iter()
            .map(|v| g.body.polynomial_derivative(v))
            .collect::<Result<_, _>>()?;
        let rel_jac: Vec<Vec<GradedJet>> = body_rel
            .iter()
            .map(|r| unknown.iter().map(|u| r.polynomial_derivative(u)).collect())
            .collect::<Result<_, _>>()?;
        let guess = map.components.clone();
        map.implicit = Some(Arc::new(ImplicitRelations {
            dim: body_space.len(),
            unknown_idx,
            known_slots,
            target_slots,
            new_base: new_base.iter().map(crate::jet::to_f64).collect(),
            rel: body_rel,
            rel_jac,
            partner: body_partner,
            unknown_is_coord: old_unknown_is_coord,
            new_vars: g.new_vars.clone(),
            guess: if old_unknown_is_coord {
                guess[..n].to_vec()
            } else {
                guess[n..].to_vec()
            },
        }));
    }
    Ok(InducedMap { map, new_base })
}

/// Newton solve of the generating-function relations at a point.
#[derive(Debug, Clone, PartialEq)]
struct ImplicitRelations {
    dim: usize,
    unknown_idx: Vec<usize>,
    /// (index in the body space, index among the new variables)
    known_slots: Vec<(usize, usize)>,
    target_slots: Vec<usize>,
    new_base: Vec<f64>,
    rel: Vec<GradedJet>,
    rel_jac: Vec<Vec<GradedJet>>,
    partner: Vec<GradedJet>,
    unknown_is_coord: bool,
    new_vars: Vec<String>,
    guess: Vec<Component>,
}

impl ImplicitRelations {
    fn solve(&self, x: &[f64]) -> Result<Vec<f64>, String> {
        let n = self.unknown_idx.len();
        let mut pt = vec![0.0; self.dim];
        for &(bi, ni) in &self.known_slots {
            pt[bi] = x[ni];
        }
        let target: Vec<f64> = self
            .target_slots
            .iter()
            .map(|&k| self.new_base[k] + x[k])
            .collect();
        for (k, g) in self.guess.iter().enumerate() {
            pt[self.unknown_idx[k]] = g.eval(&self.new_vars, x).map_err(|e| e.to_string())?;
        }
        let mut converged = false;
        for _ in 0..50 {
            let f: Vec<f64> = (0..n).map(|i| self.rel[i].eval_f64(&pt) - target[i]).collect();
            let jac = nalgebra::DMatrix::from_fn(n, n, |i, j| self.rel_jac[i][j].eval_f64(&pt));
            let step = jac
                .lu()
                .solve(&nalgebra::DVector::from_vec(f))
                .ok_or("singular generating-function relations")?;
            let mut size: f64 = 0.0;
            for k in 0..n {
                pt[self.unknown_idx[k]] -= step[k];
                size = size.max(step[k].abs());
            }
            if size <= 1e-15 * (1.0 + pt.iter().fold(0.0f64, |m, v| m.max(v.abs()))) {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err("generating-function relations did not converge".into());
        }
        let solved: Vec<f64> = self.unknown_idx.iter().map(|&i| pt[i]).collect();
        let partners: Vec<f64> = self.partner.iter().map(|p| p.eval_f64(&pt)).collect();
        Ok(if self.unknown_is_coord {
            solved.into_iter().chain(partners).collect()
        } else {
            partners.into_iter().chain(solved).collect()
        })
    }
}

/// Names accepted by [`builtin_map`].
pub const BUILTIN_MAPS: [&str; 6] = ["rescale", "polar", "fgen", "nu", "ho-sqrt", "flip-u"];

/// Built-in maps by CLI identifier. `rescale` uses `M = T = 1` here; use
/// [`nose_rescaling`] for other values.
pub fn builtin_map(name: &str) -> Result<CanonicalMap, CanonicalError> {
    match name {
        "rescale" => nose_rescaling(1.0, 1.0),
        "polar" => Ok(polar_cartesian()),
        "fgen" => Ok(fgen()),
        "nu" => crate::normal_form::nose_nu_map().map_err(|e| CanonicalError::NotSolvable(e.to_string())),
        "ho-sqrt" => Ok(ho_sqrt()),
        "flip-u" => Ok(flip_u()),
        other => Err(CanonicalError::UnknownMap(other.to_string())),
    }
}

/// Closed-form map of `phi(W, Sigma; u, v)` as a jet generator in the
/// displacement `W - 1`, for use with [`induce_map`].
pub fn fgen_generator(max_degree: u32) -> GeneratingFunction {
    let s = JetSpace::uniform(&["Sigma", "W", "u", "v"], max_degree);
    // (1-u)(1+W)Sigma - W v with W the displacement from 1
    let body = GradedJet::parse(&s, "Sigma + W*Sigma - u*Sigma - u*W*Sigma - W*v").expect("literal");
    let mut old_base = BTreeMap::new();
    old_base.insert("W".to_string(), Rational::one());
    GeneratingFunction {
        kind: GeneratorKind::OldMomentaNewCoords,
        old_vars: names(&["sigma", "w", "Sigma", "W"]),
        new_vars: names(&["u", "v", "U", "V"]),
        body,
        old_base,
        exact_polynomial: true,
    }
}

/// `phi = w V sqrt(sigma) + sigma U` expanded about `sigma = 1`.
pub fn ho_sqrt_generator(max_degree: u32) -> Result<GeneratingFunction, CanonicalError> {
    let s = JetSpace::uniform(&["sigma", "w", "U", "V"], max_degree);
    let mut base = BTreeMap::new();
    base.insert("sigma".to_string(), Rational::one());
    let phi = var("w") * var("V") * var("sigma").sqrt() + var("sigma") * var("U");
    let body = phi.to_jet(&s, &base)?;
    Ok(GeneratingFunction {
        kind: GeneratorKind::OldCoordsNewMomenta,
        old_vars: names(&["sigma", "w", "Sigma", "W"]),
        new_vars: names(&["u", "v", "U", "V"]),
        body,
        old_base: base,
        exact_polynomial: false,
    })
}

pub(crate) fn space_of(map: &InducedMap) -> Arc<JetSpace> {
    match &map.map.components[0] {
        Component::Jet(j) => j.space().clone(),
        Component::Expr(_) => unreachable!("induced maps are jet maps"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::jet::int;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() < tol)
    }

    #[test]
    fn identity_generator_induces_identity() {
        let s = JetSpace::uniform(&["x", "y", "U", "V"], 4);
        let body = GradedJet::parse(&s, "x*U + y*V").unwrap();
        let g = GeneratingFunction::near_identity(&["u", "v", "U", "V"], &["x", "y", "X", "Y"], body);
        let m = induce_map(&g).unwrap();
        let out = space_of(&m);
        for (old, new) in ["u", "v", "U", "V"].iter().zip(["x", "y", "X", "Y"]) {
            assert_eq!(m.jet(old).unwrap(), &GradedJet::var(&out, new).unwrap());
        }
    }

    #[test]
    fn rescaling_examples() {
        let m = nose_rescaling(1.0, 4.0).unwrap();
        let got = m.apply(&[0.0, 1.0, 1.0, 0.0]).unwrap();
        assert!(close(&got, &[0.0, 0.5, 1.0, 0.0], 1e-15));
        let id = nose_rescaling(1.0, 1.0).unwrap();
        let pt = [0.3, 1.2, -0.4, 0.8];
        assert!(close(&id.apply(&pt).unwrap(), &pt, 1e-15));
        assert!(nose_rescaling(0.0, 1.0).is_err());
        assert!(nose_rescaling(1.0, -2.0).is_err());
        assert!(m.apply(&[0.0, -1.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn polar_examples() {
        let m = polar_cartesian();
        let inv = m.inverse.as_ref().unwrap();
        assert!(close(&inv.apply(&[1.0, 0.0, 0.0, 1.0]).unwrap(), &[1.0, 0.0, 0.0, 1.0], 1e-15));
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for p in m.sample_points(&mut rng, 20) {
            let old = m.apply(&p).unwrap();
            let (a, b, aa, bb) = (p[0], p[1], p[2], p[3]);
            assert!((a * bb - b * aa - old[3]).abs() < 1e-12);
            let f_old = 0.5 * (old[3] / old[0]).powi(2) + 0.5 * old[2].powi(2) + old[0].ln();
            let f_new = 0.5 * (aa * aa + bb * bb) + 0.5 * (a * a + b * b).ln();
            assert!((f_old - f_new).abs() < 1e-12);
        }
        assert!(inv.apply(&[0.0, 0.0, 0.0, 1.0]).is_err());
        assert!(m.apply(&[0.0, 0.0, 1.0, 1.0]).is_err());
    }

    #[test]
    fn fgen_maps_the_zero_section_onto_the_periodic_variety() {
        let m = fgen();
        let mut sub = BTreeMap::new();
        sub.insert("u".to_string(), num(0));
        sub.insert("U".to_string(), num(0));
        let s = JetSpace::uniform(&["v", "V"], 6);
        let jets: Vec<GradedJet> = m
            .components
            .iter()
            .map(|c| c.to_expr().substitute(&sub).to_jet(&s, &BTreeMap::new()).unwrap())
            .collect();
        // sigma = W and Sigma = 0 exactly
        assert_eq!(jets[0], jets[3]);
        assert!(jets[2].is_zero());
    }

    #[test]
    fn induced_fgen_matches_closed_form() {
        let g = fgen_generator(5);
        let m = induce_map(&g).unwrap();
        assert!(m.new_base.iter().all(|b| b.is_zero()));
        let out = space_of(&m);
        let closed = fgen();
        for (i, old) in ["sigma", "w", "Sigma", "W"].iter().enumerate() {
            let want = closed.components[i]
                .to_expr()
                .to_jet(&out, &BTreeMap::new())
                .unwrap();
            assert_eq!(m.jet(old).unwrap(), &want, "component {old}");
        }
    }

    #[test]
    fn induced_ho_sqrt_matches_closed_form() {
        let g = ho_sqrt_generator(6).unwrap();
        let m = induce_map(&g).unwrap();
        assert_eq!(m.new_base, vec![int(1), int(0), int(0), int(0)]);
        let out = space_of(&m);
        assert_eq!(out.max_degree(), 5);
        let mut base = BTreeMap::new();
        base.insert("u".to_string(), int(1));
        let closed = ho_sqrt();
        for (i, old) in ["sigma", "w", "Sigma", "W"].iter().enumerate() {
            let want = closed.components[i].to_expr().to_jet(&out, &base).unwrap();
            assert_eq!(m.jet(old).unwrap(), &want, "component {old}");
        }
    }

    #[test]
    fn singular_generator_is_rejected() {
        // phi = (1 - u) W Sigma expanded about W = 0: dphi/du = -W Sigma has no linear part
        let s = JetSpace::uniform(&["Sigma", "W", "u", "v"], 4);
        let body = GradedJet::parse(&s, "W*Sigma - u*W*Sigma").unwrap();
        let g = GeneratingFunction {
            kind: GeneratorKind::OldMomentaNewCoords,
            old_vars: names(&["sigma", "w", "Sigma", "W"]),
            new_vars: names(&["u", "v", "U", "V"]),
            body,
            old_base: BTreeMap::new(),
            exact_polynomial: true,
        };
        assert!(matches!(induce_map(&g), Err(CanonicalError::NotSolvable(_))));
    }

    #[test]
    fn compose_with_identity_and_inverse() {
        let m = fgen();
        let id = CanonicalMap::identity(&["u", "v", "U", "V"]);
        let c = compose(&m, &id).unwrap();
        let p = [0.1, 0.2, -0.3, 0.25];
        assert!(close(&c.apply(&p).unwrap(), &m.apply(&p).unwrap(), 1e-15));
        let back = compose(m.inverse.as_ref().unwrap(), &m).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for p in m.sample_points(&mut rng, 20) {
            assert!(close(&back.apply(&p).unwrap(), &p, 1e-12));
        }
        assert!(compose(&m, &polar_cartesian()).is_err());
    }

    #[test]
    fn composite_enforces_inner_domain() {
        let c = compose(&ho_sqrt(), &flip_u()).unwrap();
        // flip sends u = 1.5 to -0.5, outside ho-sqrt's domain
        assert!(matches!(
            c.apply(&[1.5, 0.0, 0.0, 0.0]),
            Err(CanonicalError::OutsideDomain { .. })
        ));
    }

    #[test]
    fn symplectic_identity_and_errors() {
        let id = CanonicalMap::identity(&["q", "p"]);
        let r = symplectic_check(&id, &[vec![0.3, 0.1], vec![-1.0, 2.0]], 1e-9).unwrap();
        assert!(r.passed(), "{r:?}");
        let bad = CanonicalMap::new(
            "stretch",
            &["q", "p"],
            &["q", "p"],
            vec![num(2) * var("q"), var("p")],
            vec![],
            vec![(-1.0, 1.0); 2],
        );
        let r = symplectic_check(&bad, &[vec![0.0, 0.0]], 1e-7).unwrap();
        assert!((r.max_deviation - 1.0).abs() < 1e-6);
        assert!(symplectic_check(&fgen(), &[vec![0.0, 0.0, 0.0, 2.0]], 1e-7).is_err());
    }
}
