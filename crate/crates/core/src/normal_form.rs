//! Simultaneous solution for a near-identity generating function and the
//! coefficients of a prescribed normal form, degree by degree, in exact
//! rational arithmetic.
//!
//! A generator `nu(P; q') = q' . P + sum nu_m m` (old momenta, new
//! coordinates) is sought together with unknown symbols (`alpha`, `beta`,
//! ...) that enter the target linearly. At degree `d` the transformed
//! Hamiltonian is affine in the degree-`d` generator coefficients, so each
//! degree is an exact linear system.

use std::collections::BTreeMap;
use std::sync::Arc;

use num_traits::{One, Zero};
use thiserror::Error;

use crate::canonical::{self, CanonicalError, CanonicalMap, GeneratingFunction, GeneratorKind};
use crate::expr::{num, var, Expr, ExprError};
use crate::jet::{int, Exponents, GradedJet, JetError, JetSpace, Rational};
use crate::linalg;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NormalFormError {
    #[error("degree {degree}: matching equations are inconsistent; residual on {residuals:?}")]
    Inconsistent { degree: u32, residuals: Vec<String> },
    #[error("degree {degree}: {unknowns:?} are not determined")]
    Underdetermined { degree: u32, unknowns: Vec<String> },
    #[error("quadratic part does not match the ansatz: got {got}, expected {expected}")]
    QuadraticMismatch { got: String, expected: String },
    #[error("homological matrix depends on parameters at degree {0}")]
    ParametricMatrix(u32),
    #[error("target is not linear in the unknown `{0}`")]
    NonlinearUnknown(String),
    #[error("kappa must be nonzero")]
    ZeroKappa,
    #[error("transformed Hamiltonian does not reach normal form: {0}")]
    NotNormal(String),
    #[error(transparent)]
    Canonical(#[from] CanonicalError),
    #[error(transparent)]
    Jet(#[from] JetError),
    #[error(transparent)]
    Expr(#[from] ExprError),
}

/// Target shape and generator shape of a normal-form problem.
#[derive(Debug, Clone)]
pub struct NormalFormAnsatz {
    /// Old coordinates then momenta, as they appear in the Hamiltonian.
    pub old_vars: Vec<String>,
    /// New coordinates then momenta.
    pub new_vars: Vec<String>,
    /// Weight-zero symbols the Hamiltonian may depend on.
    pub params: Vec<String>,
    /// Action variables with their weights and their expressions in the new
    /// variables, e.g. `("I", 2, "x^2 + 1/2*X^2")`.
    pub actions: Vec<(String, u32, String)>,
    /// Unknown symbols of the target.
    pub unknowns: Vec<String>,
    /// Target in the actions, linear in the unknowns.
    pub shape: String,
    /// Terms in the actions added to the result outside the solve (such as
    /// a part of the Hamiltonian that is already in normal form).
    pub extra: Option<String>,
    pub max_degree: u32,
}

/// Which equations of one degree were used and how.
#[derive(Debug, Clone, PartialEq)]
pub struct DegreeReport {
    pub degree: u32,
    pub equations: usize,
    /// Monomials whose equation involved an unknown or had a nonzero
    /// right-hand side.
    pub active: Vec<String>,
    /// Monomials whose equation read `0 = 0`.
    pub vacuous: Vec<String>,
    pub rank: usize,
    /// Generator monomials left free and set to zero.
    pub free: Vec<String>,
    /// `(unknown, monomial)`: each pivot and the equation that pinned it.
    pub pinned: Vec<(String, String)>,
}

#[derive(Debug, Clone)]
pub struct NormalFormResult {
    /// Solved values of the unknowns, as jets in the parameters.
    pub values: Vec<(String, GradedJet)>,
    /// The generator, in new coordinates, old momenta and parameters.
    pub nu: GradedJet,
    /// The solved normal form in the new variables (constant excluded).
    pub normal_form: GradedJet,
    /// The normal form in the action variables, including `extra`.
    pub transformed: GradedJet,
    pub hessian_series: GradedJet,
    pub kam_sufficient: bool,
    /// Constant term of the input Hamiltonian, excluded from matching.
    pub constant: GradedJet,
    pub reports: Vec<DegreeReport>,
}

impl NormalFormResult {
    pub fn value(&self, name: &str) -> Option<&GradedJet> {
        self.values.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn alpha(&self) -> Option<&GradedJet> {
        self.value("alpha")
    }

    pub fn beta(&self) -> Option<&GradedJet> {
        self.value("beta")
    }

    pub fn gamma(&self) -> Option<&GradedJet> {
        self.value("gamma")
    }

    /// Coefficient of a generator monomial, e.g. `[("x", 3), ("U", 1)]`.
    pub fn nu_coefficient(&self, powers: &[(&str, u32)]) -> Result<Rational, JetError> {
        self.nu.coefficient_of(powers)
    }
}

/// Exponent vectors of total degree `d` in `n` variables, in descending
/// lexicographic order (`x^d` first).
pub fn monomials(n: usize, d: u32) -> Vec<Exponents> {
    fn rec(n: usize, d: u32, prefix: &mut Exponents, out: &mut Vec<Exponents>) {
        if prefix.len() + 1 == n {
            prefix.push(d);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for k in (0..=d).rev() {
            prefix.push(k);
            rec(n, d - k, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    if n == 0 {
        if d == 0 {
            out.push(Vec::new());
        }
        return out;
    }
    rec(n, d, &mut Vec::new(), &mut out);
    out
}

pub fn monomial_name(vars: &[String], e: &[u32]) -> String {
    let parts: Vec<String> = vars
        .iter()
        .zip(e)
        .filter(|(_, &k)| k > 0)
        .map(|(v, &k)| if k == 1 { v.clone() } else { format!("{v}^{k}") })
        .collect();
    if parts.is_empty() {
        "1".into()
    } else {
        parts.join("*")
    }
}

struct Prepared {
    new_space: Arc<JetSpace>,
    gen_space: Arc<JetSpace>,
    /// Target with unknowns set to zero, in the new space.
    base: GradedJet,
    templates: Vec<GradedJet>,
    /// Same data over the action space.
    base_actions: GradedJet,
    templates_actions: Vec<GradedJet>,
    action_space: Arc<JetSpace>,
    extra: GradedJet,
}

fn prepare(a: &NormalFormAnsatz) -> Result<Prepared, NormalFormError> {
    let n = a.new_vars.len() / 2;
    let mut new_names: Vec<String> = a.new_vars.clone();
    new_names.extend(a.params.iter().cloned());
    let mut new_w = vec![1; 2 * n];
    new_w.extend(vec![0; a.params.len()]);
    let new_space = JetSpace::new(&new_names, &new_w, a.max_degree)?;

    let mut gen_names: Vec<String> = a.new_vars[..n].to_vec();
    gen_names.extend(a.old_vars[n..].iter().cloned());
    gen_names.extend(a.params.iter().cloned());
    let gen_space = JetSpace::new(&gen_names, &new_w, a.max_degree)?;

    let mut shape_names: Vec<String> = a.actions.iter().map(|(n, _, _)| n.clone()).collect();
    let mut shape_w: Vec<u32> = a.actions.iter().map(|(_, w, _)| *w).collect();
    shape_names.extend(a.unknowns.iter().cloned());
    shape_w.extend(vec![0; a.unknowns.len()]);
    shape_names.extend(a.params.iter().cloned());
    shape_w.extend(vec![0; a.params.len()]);
    let shape_space = JetSpace::new(&shape_names, &shape_w, a.max_degree)?;
    let shape = GradedJet::parse(&shape_space, &a.shape)?;
    let unknown_refs: Vec<&str> = a.unknowns.iter().map(String::as_str).collect();
    let (action_space, parts) = shape.collect_in(&unknown_refs)?;
    let mut base_actions = GradedJet::zero(&action_space);
    let mut templates_actions = vec![GradedJet::zero(&action_space); a.unknowns.len()];
    for (e, j) in parts {
        let total: u32 = e.iter().sum();
        match total {
            0 => base_actions = j,
            1 => {
                let k = e.iter().position(|&x| x == 1).expect("unit exponent");
                templates_actions[k] = j;
            }
            _ => {
                let k = e.iter().position(|&x| x > 0).expect("nonzero exponent");
                return Err(NormalFormError::NonlinearUnknown(a.unknowns[k].clone()));
            }
        }
    }
    let mut bindings = BTreeMap::new();
    for (name, _, expr) in &a.actions {
        bindings.insert(name.clone(), GradedJet::parse(&new_space, expr)?);
    }
    let to_new = |j: &GradedJet| -> Result<GradedJet, JetError> {
        Ok(j.substitute(&bindings, &new_space)?.promote(a.max_degree))
    };
    let base = to_new(&base_actions)?;
    let templates = templates_actions.iter().map(to_new).collect::<Result<Vec<_>, _>>()?;
    let extra = match &a.extra {
        Some(s) => GradedJet::parse(&action_space, s)?,
        None => GradedJet::zero(&action_space),
    };
    Ok(Prepared {
        new_space,
        gen_space,
        base,
        templates,
        base_actions,
        templates_actions,
        action_space,
        extra,
    })
}

fn generator(a: &NormalFormAnsatz, body: &GradedJet) -> GeneratingFunction {
    GeneratingFunction {
        kind: GeneratorKind::OldMomentaNewCoords,
        old_vars: a.old_vars.clone(),
        new_vars: a.new_vars.clone(),
        body: body.clone(),
        old_base: BTreeMap::new(),
        exact_polynomial: true,
    }
}

/// The Hamiltonian `h` (in the old variables) expressed in the new variables
/// through the map induced by the generator `nu`.
pub fn transform(
    h: &GradedJet,
    a: &NormalFormAnsatz,
    nu: &GradedJet,
) -> Result<GradedJet, NormalFormError> {
    let m = canonical::induce_map(&generator(a, nu))?;
    let space = canonical::space_of(&m);
    let mut bindings = BTreeMap::new();
    for old in &a.old_vars {
        let j = m.jet(old).expect("induced maps carry jets").clone();
        bindings.insert(old.clone(), j);
    }
    Ok(h.substitute(&bindings, &space)?)
}

/// `q' . P` over the generator space.
fn identity_generator(a: &NormalFormAnsatz, gen_space: &Arc<JetSpace>) -> Result<GradedJet, JetError> {
    let n = a.new_vars.len() / 2;
    let mut nu = GradedJet::zero(gen_space);
    for i in 0..n {
        let t = &GradedJet::var(gen_space, &a.new_vars[i])? * &GradedJet::var(gen_space, &a.old_vars[n + i])?;
        nu = &nu + &t;
    }
    Ok(nu)
}

/// Splits `j` (over the new space) into rational-or-parametric coefficients
/// of the monomials in the canonical variables.
fn coefficients_by_monomial(
    j: &GradedJet,
    canon: &[String],
) -> Result<BTreeMap<Exponents, GradedJet>, JetError> {
    let refs: Vec<&str> = canon.iter().map(String::as_str).collect();
    Ok(j.collect_in(&refs)?.1)
}

pub fn solve_normal_form(
    g0: &GradedJet,
    ansatz: &NormalFormAnsatz,
) -> Result<NormalFormResult, NormalFormError> {
    let p = prepare(ansatz)?;
    let n = ansatz.new_vars.len() / 2;
    let canon: Vec<String> = ansatz.new_vars.clone();
    let gen_canon: Vec<String> = p.gen_space.vars()[..2 * n].to_vec();

    let mut nu = identity_generator(ansatz, &p.gen_space)?;
    let first = transform(g0, ansatz, &nu)?;
    let got2 = first.homogeneous_part(2);
    let want2 = p.base.homogeneous_part(2);
    if got2.truncate(2) != want2.truncate(2) {
        return Err(NormalFormError::QuadraticMismatch {
            got: got2.to_string(),
            expected: want2.to_string(),
        });
    }
    let param_zero = GradedJet::zero(&param_space(&p.new_space, &canon)?);

    let mut values: Vec<Option<GradedJet>> = vec![None; ansatz.unknowns.len()];
    let mut reports = Vec::new();
    for d in 3..=ansatz.max_degree {
        let gen_monos = monomials(2 * n, d);
        let rows = monomials(2 * n, d);
        let param_cols: Vec<usize> = (0..ansatz.unknowns.len())
            .filter(|&k| !p.templates[k].homogeneous_part(d).is_zero())
            .collect();
        let t0 = transform(g0, ansatz, &nu)?.homogeneous_part(d);
        let t0c = coefficients_by_monomial(&t0, &canon)?;
        let basec = coefficients_by_monomial(&p.base.homogeneous_part(d), &canon)?;
        let tmplc: Vec<BTreeMap<Exponents, GradedJet>> = param_cols
            .iter()
            .map(|&k| coefficients_by_monomial(&p.templates[k].homogeneous_part(d), &canon))
            .collect::<Result<_, _>>()?;

        let ncols = param_cols.len() + gen_monos.len();
        let mut matrix = vec![vec![Rational::zero(); ncols]; rows.len()];
        let row_index: BTreeMap<&Exponents, usize> = rows.iter().enumerate().map(|(i, e)| (e, i)).collect();
        let constant_of = |j: &GradedJet| -> Result<Rational, NormalFormError> {
            if j.terms().any(|(e, _)| e.iter().any(|&k| k > 0)) {
                return Err(NormalFormError::ParametricMatrix(d));
            }
            Ok(j.constant_term())
        };
        for (c, tm) in tmplc.iter().enumerate() {
            for (e, coef) in tm {
                matrix[row_index[e]][c] = -constant_of(coef)?;
            }
        }
        for (k, mono) in gen_monos.iter().enumerate() {
            let mut full = mono.clone();
            full.extend(vec![0; ansatz.params.len()]);
            let probe = &nu + &GradedJet::monomial(&p.gen_space, full, Rational::one());
            let tk = &transform(g0, ansatz, &probe)?.homogeneous_part(d) - &t0;
            for (e, coef) in coefficients_by_monomial(&tk, &canon)? {
                matrix[row_index[&e]][param_cols.len() + k] = constant_of(&coef)?;
            }
        }
        let rhs: Vec<GradedJet> = rows
            .iter()
            .map(|e| {
                let b = basec.get(e).cloned().unwrap_or_else(|| param_zero.clone());
                let t = t0c.get(e).cloned().unwrap_or_else(|| param_zero.clone());
                &b - &t
            })
            .collect();
        let sol = linalg::solve(&matrix, &rhs, &param_zero);
        let row_names: Vec<String> = rows.iter().map(|e| monomial_name(&canon, e)).collect();
        let col_name = |c: usize| -> String {
            if c < param_cols.len() {
                ansatz.unknowns[param_cols[c]].clone()
            } else {
                format!("nu[{}]", monomial_name(&gen_canon, &gen_monos[c - param_cols.len()]))
            }
        };
        if !sol.is_consistent() {
            return Err(NormalFormError::Inconsistent {
                degree: d,
                residuals: sol
                    .inconsistent
                    .iter()
                    .map(|(r, res)| format!("{}: {}", row_names[*r], res))
                    .collect(),
            });
        }
        let undetermined: Vec<String> = sol
            .free_columns
            .iter()
            .filter(|&&c| c < param_cols.len())
            .map(|&c| col_name(c))
            .collect();
        if !undetermined.is_empty() {
            return Err(NormalFormError::Underdetermined {
                degree: d,
                unknowns: undetermined,
            });
        }
        let mut active = Vec::new();
        let mut vacuous = Vec::new();
        for (i, name) in row_names.iter().enumerate() {
            if matrix[i].iter().all(Zero::is_zero) && rhs[i].is_zero() {
                vacuous.push(name.clone());
            } else {
                active.push(name.clone());
            }
        }
        reports.push(DegreeReport {
            degree: d,
            equations: rows.len(),
            active,
            vacuous,
            rank: sol.rank(),
            free: sol
                .free_columns
                .iter()
                .map(|&c| col_name(c))
                .collect(),
            pinned: sol
                .pivots
                .iter()
                .map(|&(r, c)| (col_name(c), row_names[r].clone()))
                .collect(),
        });
        for (c, &k) in param_cols.iter().enumerate() {
            values[k] = Some(sol.values[c].clone());
        }
        for (k, mono) in gen_monos.iter().enumerate() {
            let v = &sol.values[param_cols.len() + k];
            if v.is_zero() {
                continue;
            }
            let term = lift_param_jet(v, &p.gen_space)?;
            let mut full = mono.clone();
            full.extend(vec![0; ansatz.params.len()]);
            nu = &nu + &(&term * &GradedJet::monomial(&p.gen_space, full, Rational::one()));
        }
    }
    let values: Vec<(String, GradedJet)> = ansatz
        .unknowns
        .iter()
        .zip(values)
        .map(|(n, v)| {
            v.map(|v| (n.clone(), v)).ok_or_else(|| NormalFormError::Underdetermined {
                degree: ansatz.max_degree,
                unknowns: vec![n.clone()],
            })
        })
        .collect::<Result<_, _>>()?;

    // Round trip: the induced map must carry g0 exactly onto the target.
    let transformed_new = transform(g0, ansatz, &nu)?;
    let mut normal_form = p.base.clone();
    for (k, (_, v)) in values.iter().enumerate() {
        normal_form = &normal_form + &(&lift_param_jet(v, &p.new_space)? * &p.templates[k]);
    }
    let constant = transformed_new.homogeneous_part(0);
    let check = &(&transformed_new - &constant).promote(ansatz.max_degree) - &normal_form;
    if !check.is_zero() {
        return Err(NormalFormError::NotNormal(check.to_string()));
    }

    let mut transformed = &p.base_actions + &p.extra;
    for (k, (_, v)) in values.iter().enumerate() {
        transformed = &transformed + &(&lift_param_jet(v, &p.action_space)? * &p.templates_actions[k]);
    }
    let hessian_series = hessian_det_series(&transformed, &action_names(ansatz))?;
    let kam_sufficient = !hessian_series.homogeneous_part(0).is_zero();
    let (_, constant_parts) = constant.collect_in(&canon.iter().map(String::as_str).collect::<Vec<_>>())?;
    let constant = constant_parts
        .into_iter()
        .next()
        .map(|(_, j)| j)
        .unwrap_or(param_zero);
    Ok(NormalFormResult {
        values,
        nu,
        normal_form,
        transformed,
        hessian_series,
        kam_sufficient,
        constant,
        reports,
    })
}

fn action_names(a: &NormalFormAnsatz) -> Vec<String> {
    a.actions.iter().map(|(n, _, _)| n.clone()).collect()
}

/// Re-expresses a jet in weight-zero parameters inside `target`.
fn lift_param_jet(v: &GradedJet, target: &Arc<JetSpace>) -> Result<GradedJet, JetError> {
    let mut out = GradedJet::zero(target);
    for (e, c) in v.terms() {
        let mut e2 = vec![0; target.len()];
        for (i, &k) in e.iter().enumerate() {
            if k == 0 {
                continue;
            }
            let name = &v.vars()[i];
            let j = target
                .index_of(name)
                .ok_or_else(|| JetError::UnknownVariable(name.clone()))?;
            e2[j] = k;
        }
        out = &out + &GradedJet::monomial(target, e2, c.clone());
    }
    Ok(out)
}

/// The parameter-only subspace left after removing `canon`.
fn param_space(space: &JetSpace, canon: &[String]) -> Result<Arc<JetSpace>, JetError> {
    let keep: Vec<usize> = (0..space.len())
        .filter(|&i| !canon.contains(&space.vars()[i]))
        .collect();
    let names: Vec<&str> = keep.iter().map(|&i| space.vars()[i].as_str()).collect();
    let w: Vec<u32> = keep.iter().map(|&i| space.weights()[i]).collect();
    JetSpace::new(&names, &w, space.max_degree())
}

/// Determinant of the Hessian in the given action variables of the
/// polynomial `f`, truncated at weighted degree 2. `f` is read as the exact
/// polynomial its terms spell out.
pub fn hessian_det_series(f: &GradedJet, actions: &[String]) -> Result<GradedJet, JetError> {
    let wide = f.promote(f.max_degree() + 8);
    let d = |j: &GradedJet, v: &str| j.polynomial_derivative(v);
    let det = match actions.len() {
        1 => d(&d(&wide, &actions[0])?, &actions[0])?,
        2 => {
            let fa = d(&wide, &actions[0])?;
            let fb = d(&wide, &actions[1])?;
            let faa = d(&fa, &actions[0])?;
            let fab = d(&fa, &actions[1])?;
            let fbb = d(&fb, &actions[1])?;
            &(&faa * &fbb) - &(&fab * &fab)
        }
        k => {
            return Err(JetError::InvalidSpace(format!(
                "Hessian determinant for {k} actions is not supported"
            )))
        }
    };
    Ok(det.truncate(2))
}

/// Whether the action Hessian is nondegenerate at the origin.
pub fn kam_sufficient(r: &NormalFormResult) -> bool {
    r.kam_sufficient
}

/// The Hamiltonians whose degree-4 expansion seeds a normal-form solve.
#[derive(Debug, Clone, PartialEq)]
pub enum G0Model {
    /// Constant thermostat mass, `beta = 0`.
    Nose,
    /// Inverse mass `Omega(sigma) = 1 + a (sigma - 1) + b (sigma - 1)^2 / 2`;
    /// `None` keeps `a` and `b` symbolic.
    NoseLike(Option<(Rational, Rational)>),
    /// The averaged weakly coupled oscillator at its critical fast energy.
    AveragedOscillator,
}

/// Degree-4 expansion of the Hamiltonian about the periodic orbit, in
/// `(u, v, U, V)` (or `(u, U)` for the oscillator). The constant term is kept.
pub fn expand_g0(model: &G0Model) -> Result<GradedJet, NormalFormError> {
    let omega = |sigma: Expr, a: Expr, b: Expr| -> Expr {
        let d = sigma - num(1);
        num(1) + a * d.clone() + b * d.clone() * d * crate::expr::q(1, 2)
    };
    let (params, ab): (Vec<&str>, (Expr, Expr)) = match model {
        G0Model::Nose => (vec![], (num(0), num(0))),
        G0Model::NoseLike(None) => (vec!["a", "b"], (var("a"), var("b"))),
        G0Model::NoseLike(Some((a, b))) => (vec![], (Expr::Num(a.clone()), Expr::Num(b.clone()))),
        G0Model::AveragedOscillator => return Ok(crate::averaging::quartic_at_critical_energy()?),
    };
    let mut names = vec!["u", "v", "U", "V"];
    names.extend(params.iter());
    let mut w = vec![1, 1, 1, 1];
    w.extend(vec![0; params.len()]);
    let space = JetSpace::new(&names, &w, 4)?;
    let f0 = q_half() * (var("W") / var("sigma")).powi(2)
        + q_half() * omega(var("sigma"), ab.0, ab.1) * var("Sigma").powi(2)
        + var("sigma").ln();
    let g0 = canonical::fgen().pullback(&f0) - (num(1) - var("V")).ln();
    Ok(g0.to_jet(&space, &BTreeMap::new())?)
}

fn q_half() -> Expr {
    crate::expr::q(1, 2)
}

/// Two-degree-of-freedom ansatz about the periodic orbit:
/// `G0 = I (alpha I + gamma J^2 + beta J + 1)` with `I = x^2 + X^2/2`,
/// `J = Y`, and `F0 = G0 + ln(1 - J)`.
pub fn nose_ansatz(params: &[&str]) -> NormalFormAnsatz {
    NormalFormAnsatz {
        old_vars: ["u", "v", "U", "V"].map(String::from).to_vec(),
        new_vars: ["x", "y", "X", "Y"].map(String::from).to_vec(),
        params: params.iter().map(|s| s.to_string()).collect(),
        actions: vec![
            ("I".into(), 2, "x^2 + 1/2*X^2".into()),
            ("J".into(), 1, "Y".into()),
        ],
        unknowns: ["alpha", "beta", "gamma"].map(String::from).to_vec(),
        shape: "I + alpha*I^2 + beta*I*J + gamma*I*J^2".into(),
        extra: Some("-J - 1/2*J^2 - 1/3*J^3 - 1/4*J^4".into()),
        max_degree: 4,
    }
}

pub fn nose_normal_form() -> Result<NormalFormResult, NormalFormError> {
    solve_normal_form(&expand_g0(&G0Model::Nose)?, &nose_ansatz(&[]))
}

/// With `None` the inverse-mass jet `(a, b)` stays symbolic and the result
/// is polynomial in `a`, `b`.
pub fn nose_like_normal_form(
    ab: Option<(Rational, Rational)>,
) -> Result<NormalFormResult, NormalFormError> {
    let params: &[&str] = if ab.is_none() { &["a", "b"] } else { &[] };
    solve_normal_form(&expand_g0(&G0Model::NoseLike(ab))?, &nose_ansatz(params))
}

/// Closed form of the inverse-mass relations:
/// `alpha = (6b - 9a^2 + 30a - 44)/96`, `beta = (2 - a)/2`,
/// `gamma = (48 alpha + 3a^2 - 21a + 34)/12`.
pub fn nose_like_coefficients(a: &Rational, b: &Rational) -> (Rational, Rational, Rational) {
    let a2 = a * a;
    let alpha = (int(6) * b - int(9) * &a2 + int(30) * a - int(44)) / int(96);
    let beta = (int(2) - a) / int(2);
    let gamma = (int(48) * &alpha + int(3) * &a2 - int(21) * a + int(34)) / int(12);
    (alpha, beta, gamma)
}

/// Birkhoff coefficient `c` of `H = I + c I^2 + O(5)` for
/// `H = (p^2 + q^2)/2 + a3 q^3 + a4 q^4`, `I = (x^2 + X^2)/2`.
pub fn bnf_oscillator(a3: &Rational, a4: &Rational) -> Result<Rational, NormalFormError> {
    let space = JetSpace::uniform(&["q", "p"], 4);
    let h = GradedJet::parse(&space, "1/2*p^2 + 1/2*q^2")?;
    let q = GradedJet::var(&space, "q")?;
    let h = &(&h + &q.pow(3).scale(a3)) + &q.pow(4).scale(a4);
    let ansatz = NormalFormAnsatz {
        old_vars: vec!["q".into(), "p".into()],
        new_vars: vec!["x".into(), "X".into()],
        params: vec![],
        actions: vec![("I".into(), 2, "1/2*x^2 + 1/2*X^2".into())],
        unknowns: vec!["c".into()],
        shape: "I + c*I^2".into(),
        extra: None,
        max_degree: 4,
    };
    let r = solve_normal_form(&h, &ansatz)?;
    Ok(r.value("c").expect("unknown c").constant_term())
}

/// The generator `nu` that brings the Nose Hamiltonian to normal form, in
/// `(x, y, U, V)`.
pub const NOSE_NU: &str = "x*U + y*V + 55/144*x^3*U - 5/6*x^2*U*V - 5/6*x^2*U + 3/8*x*U*V^2 \
    + 1/2*x*U*V + 233/288*x*U^3 - 5/9*U^3*V - 5/18*U^3";

/// Canonical map induced by [`NOSE_NU`], evaluated exactly by solving the
/// generator relations.
pub fn nose_nu_map() -> Result<CanonicalMap, NormalFormError> {
    let space = JetSpace::uniform(&["x", "y", "U", "V"], 4);
    let body = GradedJet::parse(&space, NOSE_NU)?;
    let a = nose_ansatz(&[]);
    let mut m = canonical::induce_map(&generator(&a, &body))?.map;
    m.name = "nu".into();
    Ok(m)
}

/// Whether the slow momentum keeps its coupling to the fast pair,
/// `(U - vV/(2(1-u)))^2 / 2`, or is reduced to `U^2 / 2`. The dropped part
/// averages to zero over the fast angle at first order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FastCoupling {
    Full,
    Dropped,
}

/// `G_kappa + kappa u / (1 - u)`: the weakly coupled oscillator with its
/// linear term in `u` removed, expanded to degree 4 about the origin.
///
/// The opposite sign doubles the linear term instead of cancelling it, and
/// then no polynomial normal form without linear terms exists.
pub fn hat_g(kappa: &Rational, coupling: FastCoupling) -> Result<GradedJet, NormalFormError> {
    if kappa.is_zero() {
        return Err(NormalFormError::ZeroKappa);
    }
    let space = JetSpace::uniform(&["u", "v", "U", "V"], 4);
    let k = || Expr::Num(kappa.clone());
    let d = || num(1) - var("u");
    let fast = (var("V").powi(2) + var("v").powi(2)) / (num(2) * d());
    let coupled = match coupling {
        FastCoupling::Full => var("U") - q_half() * var("v") * var("V") / d(),
        FastCoupling::Dropped => var("U"),
    };
    let g = fast + k() * (q_half() * coupled.powi(2) + d().ln());
    let hat = g + k() * var("u") / d();
    Ok(hat.to_jet(&space, &BTreeMap::new())?)
}

fn hat_g_ansatz(kappa: &Rational) -> NormalFormAnsatz {
    NormalFormAnsatz {
        old_vars: ["u", "v", "U", "V"].map(String::from).to_vec(),
        new_vars: ["x", "y", "X", "Y"].map(String::from).to_vec(),
        params: vec![],
        actions: vec![
            ("I".into(), 2, "1/2*x^2 + 1/2*X^2".into()),
            ("J".into(), 2, "1/2*y^2 + 1/2*Y^2".into()),
        ],
        unknowns: ["alpha", "beta", "gamma"].map(String::from).to_vec(),
        shape: format!("{kappa}*I + J + alpha*I^2 + beta*I*J + gamma*J^2"),
        extra: None,
        max_degree: 4,
    }
}

/// Solves for the normal form of the full [`hat_g`] from scratch. Fails at
/// the resonances `kappa = 1` and `kappa = 2`, where the matching equations
/// are inconsistent.
pub fn hat_g_solved(kappa: &Rational) -> Result<NormalFormResult, NormalFormError> {
    solve_normal_form(&hat_g(kappa, FastCoupling::Full)?, &hat_g_ansatz(kappa))
}

/// Generator that brings [`hat_g`] to normal form, in `(x, y, U, V)`.
pub fn hat_g_nu(kappa: &Rational) -> Result<GradedJet, NormalFormError> {
    if kappa.is_zero() {
        return Err(NormalFormError::ZeroKappa);
    }
    let space = JetSpace::uniform(&["x", "y", "U", "V"], 4);
    let first = GradedJet::parse(
        &space,
        "x*U - 2/3*x^2*U + 65/288*x^3*U + 295/288*x*U^3 - 4/9*U^3 + y*V",
    )?;
    let pair = GradedJet::parse(&space, "x*U*y^2 + x*U*V^2 - 2*U*y^2 - 2*U*V^2")?;
    let cross = GradedJet::parse(&space, "U^2*V*y")?;
    let inv = Rational::one() / kappa;
    Ok(&(&first + &pair.scale(&(&inv / int(4)))) + &cross.scale(&(&inv * &inv / int(2))))
}

#[derive(Debug, Clone)]
pub struct HatGResult {
    pub result: NormalFormResult,
    /// `J` on the energy level `hat G = kappa h`, in `(h, I)` with both of
    /// weight 2.
    pub reduced_j: GradedJet,
    /// What [`hat_g_nu`] leaves of the full [`hat_g`] beyond its quadratic
    /// part: it is not a normal form there.
    pub full_coupling_image: GradedJet,
}

/// Verifies that [`hat_g_nu`] brings [`hat_g`] with the fast coupling
/// dropped to `kappa I + J + alpha I^2 + beta I J + gamma J^2` and reads off
/// the coefficients; also solves the energy relation for `J`.
pub fn hat_g_normal_form(kappa: &Rational) -> Result<HatGResult, NormalFormError> {
    let nu = hat_g_nu(kappa)?;
    let ansatz = hat_g_ansatz(kappa);
    let p = prepare(&ansatz)?;
    let fit = |h: &GradedJet| -> Result<(Vec<Rational>, GradedJet, Rational), NormalFormError> {
        let t = transform(h, &ansatz, &nu)?;
        let constant = t.constant_term();
        let t = &t.add_constant(&-constant.clone()).promote(4) - &p.base;
        let canon = ansatz.new_vars.clone();
        let tc = coefficients_by_monomial(&t, &canon)?;
        let rows: Vec<Exponents> = (1..=4).flat_map(|d| monomials(4, d)).collect();
        let matrix: Vec<Vec<Rational>> = rows
            .iter()
            .map(|e| p.templates.iter().map(|tm| tm.coefficient(e)).collect())
            .collect();
        let zero = GradedJet::zero(&JetSpace::uniform::<&str>(&[], 0));
        let rhs: Vec<GradedJet> = rows
            .iter()
            .map(|e| {
                GradedJet::constant(
                    zero.space(),
                    tc.get(e).map(|j| j.constant_term()).unwrap_or_else(Rational::zero),
                )
            })
            .collect();
        let sol = linalg::solve(&matrix, &rhs, &zero);
        if !sol.is_consistent() {
            return Err(NormalFormError::NotNormal(t.to_string()));
        }
        Ok((sol.values.iter().map(GradedJet::constant_term).collect(), t, constant))
    };
    let (coefs, _, constant) = fit(&hat_g(kappa, FastCoupling::Dropped)?)?;
    let full_coupling_image = {
        let t = transform(&hat_g(kappa, FastCoupling::Full)?, &ansatz, &nu)?;
        &t.add_constant(&-t.constant_term()).promote(4) - &p.base
    };
    let scalar = JetSpace::uniform::<&str>(&[], 0);
    let values: Vec<(String, GradedJet)> = ansatz
        .unknowns
        .iter()
        .zip(&coefs)
        .map(|(n, v)| (n.clone(), GradedJet::constant(&scalar, v.clone())))
        .collect();
    let mut normal_form = p.base.clone();
    let mut transformed = p.base_actions.clone();
    for (k, c) in coefs.iter().enumerate() {
        normal_form = &normal_form + &p.templates[k].scale(c);
        transformed = &transformed + &p.templates_actions[k].scale(c);
    }
    let hessian_series = hessian_det_series(&transformed, &action_names(&ansatz))?;
    let kam_sufficient = !hessian_series.homogeneous_part(0).is_zero();
    let reduced_j = reduced_energy_relation(kappa, &coefs[0], &coefs[1], &coefs[2])?;
    Ok(HatGResult {
        result: NormalFormResult {
            values,
            nu,
            normal_form,
            transformed,
            hessian_series,
            kam_sufficient,
            constant: GradedJet::constant(&scalar, constant),
            reports: vec![],
        },
        reduced_j,
        full_coupling_image,
    })
}

/// Solves `kappa h = kappa I + J + alpha I^2 + beta I J + gamma J^2` for `J`
/// as a series in `(h, I)`, both of weight 2, to degree 4.
pub fn reduced_energy_relation(
    kappa: &Rational,
    alpha: &Rational,
    beta: &Rational,
    gamma: &Rational,
) -> Result<GradedJet, JetError> {
    let s = JetSpace::new(&["h", "I"], &[2, 2], 4)?;
    let h = GradedJet::var(&s, "h")?;
    let i = GradedJet::var(&s, "I")?;
    let lead = &h.scale(kappa) - &i.scale(kappa);
    let i2 = i.pow(2).scale(alpha);
    let mut j = GradedJet::zero(&s);
    for _ in 0..4 {
        let next = &(&(&lead - &i2) - &(&i * &j).scale(beta)) - &j.pow(2).scale(gamma);
        if next == j {
            break;
        }
        j = next;
    }
    Ok(j)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::jet::rat;

    #[test]
    fn nose_solve() {
        let r = nose_normal_form().unwrap();
        assert_eq!(r.alpha().unwrap().constant_term(), rat(-11, 24));
    }

    #[test]
    fn monomial_enumeration() {
        let m = monomials(2, 2);
        assert_eq!(m, vec![vec![2, 0], vec![1, 1], vec![0, 2]]);
        assert_eq!(monomials(4, 3).len(), 20);
        assert_eq!(monomials(4, 4).len(), 35);
        let v: Vec<String> = ["x", "U"].map(String::from).to_vec();
        assert_eq!(monomial_name(&v, &[2, 1]), "x^2*U");
    }

    #[test]
    fn closed_form_coefficients() {
        assert_eq!(
            nose_like_coefficients(&int(0), &int(0)),
            (rat(-11, 24), int(1), int(1))
        );
    }

    #[test]
    fn hessian_of_zero_coefficients_is_zero_beyond_constant() {
        let s = JetSpace::new(&["I", "J"], &[2, 1], 4).unwrap();
        let f = GradedJet::parse(&s, "I - J - 1/2*J^2 - 1/3*J^3 - 1/4*J^4").unwrap();
        let h = hessian_det_series(&f, &["I".into(), "J".into()]).unwrap();
        assert!(h.is_zero());
    }

    #[test]
    fn reduced_energy() {
        let k = rat(1, 3);
        let j = reduced_energy_relation(&k, &(rat(-13, 24) * &k), &int(-1), &(-int(1) / (int(2) * &k))).unwrap();
        let s = j.space().clone();
        let want = GradedJet::parse(&s, "h + 1/2*h^2 - I + 1/24*I^2").unwrap().scale(&k);
        assert_eq!(j, want);
    }
}
