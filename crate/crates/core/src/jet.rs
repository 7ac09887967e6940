//! Truncated multivariate power series with exact rational coefficients.
//!
//! A [`GradedJet`] lives in a [`JetSpace`]: an ordered list of variables,
//! each carrying a non-negative integer weight, and a truncation bound on
//! the weighted total degree. Terms of weighted degree above the bound are
//! dropped eagerly, so every stored term is meaningful. Variables of weight
//! zero never contribute to the degree; they are used for symbolic
//! parameters (thermostat coefficients, fast energies, coupling constants)
//! and are carried exactly.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Rational = BigRational;

/// Exponent vector, one entry per variable of the owning space.
pub type Exponents = Vec<u32>;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum JetError {
    #[error("incompatible jets: {0}")]
    Incompatible(String),
    #[error("unknown variable `{0}`")]
    UnknownVariable(String),
    #[error("composition outside the formal domain: {0}")]
    Domain(String),
    #[error("invalid jet space: {0}")]
    InvalidSpace(String),
    #[error("malformed jet: {0}")]
    Malformed(String),
}

pub fn rat(n: i64, d: i64) -> Rational {
    BigRational::new(BigInt::from(n), BigInt::from(d))
}

pub fn int(n: i64) -> Rational {
    BigRational::from_integer(BigInt::from(n))
}

/// Parses `"p/q"` or `"p"` into an exact rational.
pub fn parse_rational(s: &str) -> Result<Rational, JetError> {
    let s = s.trim();
    let bad = || JetError::Malformed(format!("not a rational literal: `{s}`"));
    match s.split_once('/') {
        Some((n, d)) => {
            let n: BigInt = n.trim().parse().map_err(|_| bad())?;
            let d: BigInt = d.trim().parse().map_err(|_| bad())?;
            if d.is_zero() {
                return Err(bad());
            }
            Ok(BigRational::new(n, d))
        }
        None => Ok(BigRational::from_integer(s.parse().map_err(|_| bad())?)),
    }
}

pub fn to_f64(r: &Rational) -> f64 {
    r.to_f64().unwrap_or(f64::NAN)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct JetSpace {
    vars: Vec<String>,
    weights: Vec<u32>,
    max_degree: u32,
}

impl JetSpace {
    pub fn new<S: AsRef<str>>(
        vars: &[S],
        weights: &[u32],
        max_degree: u32,
    ) -> Result<Arc<JetSpace>, JetError> {
        if vars.len() != weights.len() {
            return Err(JetError::InvalidSpace(format!(
                "{} variables but {} weights",
                vars.len(),
                weights.len()
            )));
        }
        let vars: Vec<String> = vars.iter().map(|v| v.as_ref().to_string()).collect();
        for (i, v) in vars.iter().enumerate() {
            if v.is_empty() {
                return Err(JetError::InvalidSpace("empty variable name".into()));
            }
            if vars[..i].contains(v) {
                return Err(JetError::InvalidSpace(format!("duplicate variable `{v}`")));
            }
        }
        Ok(Arc::new(JetSpace {
            vars,
            weights: weights.to_vec(),
            max_degree,
        }))
    }

    /// All variables of weight one.
    pub fn uniform<S: AsRef<str>>(vars: &[S], max_degree: u32) -> Arc<JetSpace> {
        let weights = vec![1; vars.len()];
        JetSpace::new(vars, &weights, max_degree).expect("uniform space")
    }

    pub fn vars(&self) -> &[String] {
        &self.vars
    }

    pub fn weights(&self) -> &[u32] {
        &self.weights
    }

    pub fn max_degree(&self) -> u32 {
        self.max_degree
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.vars.iter().position(|v| v == name)
    }

    pub fn weight_of(&self, name: &str) -> Option<u32> {
        self.index_of(name).map(|i| self.weights[i])
    }

    pub fn weighted_degree(&self, exp: &[u32]) -> u32 {
        exp.iter().zip(&self.weights).map(|(e, w)| e * w).sum()
    }

    pub fn with_max_degree(&self, max_degree: u32) -> Arc<JetSpace> {
        Arc::new(JetSpace {
            max_degree,
            ..self.clone()
        })
    }

    /// Appends variables (e.g. symbolic parameters) to a copy of this space.
    pub fn extended<S: AsRef<str>>(
        &self,
        extra: &[S],
        weights: &[u32],
    ) -> Result<Arc<JetSpace>, JetError> {
        let mut vars = self.vars.clone();
        vars.extend(extra.iter().map(|s| s.as_ref().to_string()));
        let mut w = self.weights.clone();
        w.extend_from_slice(weights);
        JetSpace::new(&vars, &w, self.max_degree)
    }
}

/// Analytic functions that can be composed with a jet of zero constant term:
/// `ln` and powers act as `f(1 + j)`, the others as `f(j)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AnalyticFn {
    /// `ln(1 + j)`
    Ln1p,
    /// `exp(j)`
    Exp,
    /// `(1 + j)^r` for rational `r`
    Power(Rational),
    /// `cos(j)`
    Cos,
    /// `sin(j)`
    Sin,
}

impl AnalyticFn {
    /// `(1 + j)^(-a)`
    pub fn reciprocal_power(a: Rational) -> AnalyticFn {
        AnalyticFn::Power(-a)
    }

    /// `(1 + j)^(1/2)`
    pub fn sqrt1p() -> AnalyticFn {
        AnalyticFn::Power(rat(1, 2))
    }

    fn coefficients(&self, n: usize) -> Vec<Rational> {
        let mut c = Vec::with_capacity(n + 1);
        match self {
            AnalyticFn::Ln1p => {
                c.push(Rational::zero());
                for k in 1..=n as i64 {
                    let sign = if k % 2 == 1 { 1 } else { -1 };
                    c.push(rat(sign, k));
                }
            }
            AnalyticFn::Exp => {
                let mut term = Rational::one();
                c.push(term.clone());
                for k in 1..=n as i64 {
                    term /= int(k);
                    c.push(term.clone());
                }
            }
            AnalyticFn::Power(r) => {
                let mut term = Rational::one();
                c.push(term.clone());
                for k in 1..=n as i64 {
                    term = term * (r - int(k - 1)) / int(k);
                    c.push(term.clone());
                }
            }
            AnalyticFn::Cos | AnalyticFn::Sin => {
                let odd = matches!(self, AnalyticFn::Sin);
                let mut fact = Rational::one();
                for k in 0..=n as i64 {
                    if k > 0 {
                        fact *= int(k);
                    }
                    let c_k = if (k % 2 == 1) == odd {
                        let sign = if (k / 2) % 2 == 0 { 1 } else { -1 };
                        int(sign) / &fact
                    } else {
                        Rational::zero()
                    };
                    c.push(c_k);
                }
            }
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GradedJet {
    space: Arc<JetSpace>,
    terms: BTreeMap<Exponents, Rational>,
}

impl GradedJet {
    pub fn zero(space: &Arc<JetSpace>) -> GradedJet {
        GradedJet {
            space: space.clone(),
            terms: BTreeMap::new(),
        }
    }

    pub fn constant(space: &Arc<JetSpace>, c: Rational) -> GradedJet {
        let mut j = GradedJet::zero(space);
        j.add_term(vec![0; space.len()], c);
        j
    }

    pub fn one(space: &Arc<JetSpace>) -> GradedJet {
        GradedJet::constant(space, Rational::one())
    }

    pub fn var(space: &Arc<JetSpace>, name: &str) -> Result<GradedJet, JetError> {
        let i = space
            .index_of(name)
            .ok_or_else(|| JetError::UnknownVariable(name.to_string()))?;
        let mut e = vec![0; space.len()];
        e[i] = 1;
        Ok(GradedJet::monomial(space, e, Rational::one()))
    }

    pub fn monomial(space: &Arc<JetSpace>, exp: Exponents, coef: Rational) -> GradedJet {
        assert_eq!(exp.len(), space.len(), "exponent length");
        let mut j = GradedJet::zero(space);
        j.add_term(exp, coef);
        j
    }

    /// Builds a jet from raw terms, dropping zeros and over-degree terms.
    pub fn from_terms<I>(space: &Arc<JetSpace>, terms: I) -> Result<GradedJet, JetError>
    where
        I: IntoIterator<Item = (Exponents, Rational)>,
    {
        let mut j = GradedJet::zero(space);
        for (e, c) in terms {
            if e.len() != space.len() {
                return Err(JetError::Malformed(format!(
                    "exponent vector of length {} in a space of {} variables",
                    e.len(),
                    space.len()
                )));
            }
            j.add_term(e, c);
        }
        Ok(j)
    }

    /// Parses a polynomial literal such as `"1/2*U^2 - 5/6*x^2*(U + 1)"`.
    /// Supports `+ - * ^`, parentheses, and division by nonzero constants.
    pub fn parse(space: &Arc<JetSpace>, src: &str) -> Result<GradedJet, JetError> {
        let chars: Vec<char> = src.chars().filter(|c| !c.is_whitespace()).collect();
        if chars.is_empty() {
            return Ok(GradedJet::zero(space));
        }
        let mut p = Parser { s: &chars, i: 0, space, src };
        let j = p.sum()?;
        if p.i != chars.len() {
            return Err(p.err("trailing input"));
        }
        Ok(j)
    }

    fn add_term(&mut self, exp: Exponents, coef: Rational) {
        if coef.is_zero() || self.space.weighted_degree(&exp) > self.space.max_degree {
            return;
        }
        match self.terms.entry(exp) {
            std::collections::btree_map::Entry::Occupied(mut o) => {
                *o.get_mut() += coef;
                if o.get().is_zero() {
                    o.remove();
                }
            }
            std::collections::btree_map::Entry::Vacant(v) => {
                v.insert(coef);
            }
        }
    }

    pub fn space(&self) -> &Arc<JetSpace> {
        &self.space
    }

    pub fn vars(&self) -> &[String] {
        self.space.vars()
    }

    pub fn weights(&self) -> &[u32] {
        self.space.weights()
    }

    pub fn max_degree(&self) -> u32 {
        self.space.max_degree
    }

    pub fn terms(&self) -> impl Iterator<Item = (&Exponents, &Rational)> {
        self.terms.iter()
    }

    pub fn num_terms(&self) -> usize {
        self.terms.len()
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn coefficient(&self, exp: &[u32]) -> Rational {
        self.terms.get(exp).cloned().unwrap_or_else(Rational::zero)
    }

    /// Coefficient of the monomial described by `(name, power)` pairs.
    pub fn coefficient_of(&self, powers: &[(&str, u32)]) -> Result<Rational, JetError> {
        let mut e = vec![0; self.space.len()];
        for (name, p) in powers {
            let i = self
                .space
                .index_of(name)
                .ok_or_else(|| JetError::UnknownVariable(name.to_string()))?;
            e[i] = *p;
        }
        Ok(self.coefficient(&e))
    }

    pub fn constant_term(&self) -> Rational {
        self.coefficient(&vec![0; self.space.len()])
    }

    /// Lowest weighted degree among the stored terms.
    pub fn order(&self) -> Option<u32> {
        self.terms.keys().map(|e| self.space.weighted_degree(e)).min()
    }

    pub fn homogeneous_part(&self, degree: u32) -> GradedJet {
        GradedJet {
            space: self.space.clone(),
            terms: self
                .terms
                .iter()
                .filter(|(e, _)| self.space.weighted_degree(e) == degree)
                .map(|(e, c)| (e.clone(), c.clone()))
                .collect(),
        }
    }

    /// Drops every term above `max_degree` and lowers the bound accordingly.
    pub fn truncate(&self, max_degree: u32) -> GradedJet {
        let space = self.space.with_max_degree(max_degree.min(self.max_degree()));
        let terms = self
            .terms
            .iter()
            .filter(|(e, _)| space.weighted_degree(e) <= space.max_degree)
            .map(|(e, c)| (e.clone(), c.clone()))
            .collect();
        GradedJet { space, terms }
    }

    /// Reinterprets the stored terms as an exact polynomial known up to
    /// `max_degree`. Only sound when the jet really is a polynomial.
    pub fn promote(&self, max_degree: u32) -> GradedJet {
        let space = self.space.with_max_degree(max_degree);
        let mut j = GradedJet::zero(&space);
        for (e, c) in &self.terms {
            j.add_term(e.clone(), c.clone());
        }
        j
    }

    fn check_same(&self, other: &GradedJet) -> Result<(), JetError> {
        if self.space == other.space {
            Ok(())
        } else {
            Err(JetError::Incompatible(format!(
                "{:?}/{:?}/{} vs {:?}/{:?}/{}",
                self.space.vars,
                self.space.weights,
                self.space.max_degree,
                other.space.vars,
                other.space.weights,
                other.space.max_degree
            )))
        }
    }

    pub fn checked_add(&self, other: &GradedJet) -> Result<GradedJet, JetError> {
        self.check_same(other)?;
        let mut out = self.clone();
        for (e, c) in &other.terms {
            out.add_term(e.clone(), c.clone());
        }
        Ok(out)
    }

    pub fn checked_sub(&self, other: &GradedJet) -> Result<GradedJet, JetError> {
        self.check_same(other)?;
        let mut out = self.clone();
        for (e, c) in &other.terms {
            out.add_term(e.clone(), -c.clone());
        }
        Ok(out)
    }

    pub fn checked_mul(&self, other: &GradedJet) -> Result<GradedJet, JetError> {
        self.check_same(other)?;
        let space = &self.space;
        let mut out = GradedJet::zero(space);
        // Pre-compute degrees to prune pairs that would be truncated anyway.
        let rhs: Vec<(&Exponents, &Rational, u32)> = other
            .terms
            .iter()
            .map(|(e, c)| (e, c, space.weighted_degree(e)))
            .collect();
        for (ea, ca) in &self.terms {
            let da = space.weighted_degree(ea);
            for (eb, cb, db) in &rhs {
                if da + db > space.max_degree {
                    continue;
                }
                let e: Exponents = ea.iter().zip(eb.iter()).map(|(a, b)| a + b).collect();
                out.add_term(e, ca * *cb);
            }
        }
        Ok(out)
    }

    pub fn scale(&self, c: &Rational) -> GradedJet {
        if c.is_zero() {
            return GradedJet::zero(&self.space);
        }
        GradedJet {
            space: self.space.clone(),
            terms: self.terms.iter().map(|(e, v)| (e.clone(), v * c)).collect(),
        }
    }

    pub fn add_constant(&self, c: &Rational) -> GradedJet {
        let mut out = self.clone();
        out.add_term(vec![0; self.space.len()], c.clone());
        out
    }

    pub fn pow(&self, n: u32) -> GradedJet {
        let mut result = GradedJet::one(&self.space);
        let mut base = self.clone();
        let mut n = n;
        while n > 0 {
            if n & 1 == 1 {
                result = &result * &base;
            }
            n >>= 1;
            if n > 0 {
                base = &base * &base;
            }
        }
        result
    }

    /// Formal partial derivative. The truncation bound drops by the weight of
    /// the variable, since the derivative of the unknown remainder starts there.
    pub fn partial_derivative(&self, var: &str) -> Result<GradedJet, JetError> {
        let i = self
            .space
            .index_of(var)
            .ok_or_else(|| JetError::UnknownVariable(var.to_string()))?;
        let w = self.space.weights[i];
        let new_max = self.space.max_degree.checked_sub(w).ok_or_else(|| {
            JetError::Domain(format!(
                "derivative in `{var}` (weight {w}) exhausts the truncation bound {}",
                self.space.max_degree
            ))
        })?;
        let space = self.space.with_max_degree(new_max);
        let mut out = GradedJet::zero(&space);
        for (e, c) in &self.terms {
            if e[i] == 0 {
                continue;
            }
            let mut e2 = e.clone();
            e2[i] -= 1;
            out.add_term(e2, c * int(e[i] as i64));
        }
        Ok(out)
    }

    /// Derivative of the stored polynomial, keeping the truncation bound.
    pub(crate) fn polynomial_derivative(&self, var: &str) -> Result<GradedJet, JetError> {
        let d = self.partial_derivative(var)?;
        Ok(d.promote(self.max_degree()))
    }

    /// `f` composed with this jet. Requires a zero constant term and no terms
    /// of weighted degree zero, so that the composed series terminates.
    pub fn analytic_apply(&self, f: &AnalyticFn) -> Result<GradedJet, JetError> {
        let c0 = self.constant_term();
        if !c0.is_zero() {
            return Err(JetError::Domain(format!(
                "analytic function applied to a jet with constant term {c0}"
            )));
        }
        let order = match self.order() {
            None => {
                let c = f.coefficients(0);
                return Ok(GradedJet::constant(&self.space, c[0].clone()));
            }
            Some(o) => o,
        };
        if order == 0 {
            return Err(JetError::Domain(
                "argument has non-constant terms of weighted degree zero; the series does not terminate"
                    .into(),
            ));
        }
        let n = (self.space.max_degree / order) as usize;
        let coefs = f.coefficients(n);
        // Horner evaluation of sum c_k j^k.
        let mut acc = GradedJet::constant(&self.space, coefs[n].clone());
        for k in (0..n).rev() {
            acc = (&acc * self).add_constant(&coefs[k]);
        }
        Ok(acc)
    }

    /// Simultaneous substitution of variables by jets living in `target`.
    ///
    /// Variables without a binding are mapped to the variable of the same
    /// name in `target`. The result is truncated at the degree up to which it
    /// is determined by the known terms of `self`.
    pub fn substitute(
        &self,
        bindings: &BTreeMap<String, GradedJet>,
        target: &Arc<JetSpace>,
    ) -> Result<GradedJet, JetError> {
        let n = self.space.len();
        let mut images: Vec<GradedJet> = Vec::with_capacity(n);
        for name in &self.space.vars {
            let img = match bindings.get(name) {
                Some(j) => {
                    if j.space.vars != target.vars || j.space.weights != target.weights {
                        return Err(JetError::Incompatible(format!(
                            "binding for `{name}` is not in the target space"
                        )));
                    }
                    j.clone()
                }
                None => GradedJet::var(target, name)?,
            };
            images.push(img);
        }
        // How far the result is determined: a truncated remainder of degree
        // > D in the source maps to degree > r*D in the target.
        let mut ratio: Option<Rational> = None;
        for (i, img) in images.iter().enumerate() {
            let w = self.space.weights[i];
            if w == 0 {
                continue;
            }
            let Some(o) = img.order() else { continue };
            if o == 0 {
                return Err(JetError::Domain(format!(
                    "binding for `{}` has terms of degree zero but the series in it is truncated",
                    self.space.vars[i]
                )));
            }
            let r = rat(o as i64, w as i64);
            ratio = Some(match ratio {
                Some(x) if x < r => x,
                _ => r,
            });
        }
        let max = match ratio {
            None => target.max_degree,
            Some(r) => {
                let bound = r * int(self.space.max_degree as i64 + 1);
                let determined = bound.ceil().to_integer() - BigInt::one();
                let determined = determined.to_u32().unwrap_or(u32::MAX);
                determined.min(target.max_degree)
            }
        };
        let space = target.with_max_degree(max);
        let images: Vec<GradedJet> = images
            .into_iter()
            .map(|j| GradedJet {
                space: space.clone(),
                terms: j.terms,
            })
            .map(|j| j.truncate(max))
            .collect();
        let mut max_exp = vec![0u32; n];
        for e in self.terms.keys() {
            for (m, x) in max_exp.iter_mut().zip(e) {
                *m = (*m).max(*x);
            }
        }
        let powers: Vec<Vec<GradedJet>> = images
            .iter()
            .zip(&max_exp)
            .map(|(img, &m)| {
                let mut p = vec![GradedJet::one(&space)];
                for k in 1..=m as usize {
                    let next = &p[k - 1] * img;
                    p.push(next);
                }
                p
            })
            .collect();
        let mut out = GradedJet::zero(&space);
        for (e, c) in &self.terms {
            let mut term = GradedJet::constant(&space, c.clone());
            for (i, &k) in e.iter().enumerate() {
                if k > 0 {
                    term = &term * &powers[i][k as usize];
                    if term.is_zero() {
                        break;
                    }
                }
            }
            for (e2, c2) in term.terms {
                out.add_term(e2, c2);
            }
        }
        Ok(out)
    }

    /// Re-expresses the jet in a space that contains all of its variables
    /// (by name), e.g. after adding parameter variables.
    pub fn embed(&self, target: &Arc<JetSpace>) -> Result<GradedJet, JetError> {
        let map: Vec<Option<usize>> = self.space.vars.iter().map(|v| target.index_of(v)).collect();
        for (i, m) in map.iter().enumerate() {
            match m {
                Some(j) if target.weights[*j] != self.space.weights[i] => {
                    return Err(JetError::Incompatible(format!(
                        "variable `{}` changes weight",
                        self.space.vars[i]
                    )))
                }
                _ => {}
            }
        }
        let mut out = GradedJet::zero(&target.with_max_degree(target.max_degree.min(self.max_degree())));
        for (e, c) in &self.terms {
            let mut e2 = vec![0; target.len()];
            for (i, &k) in e.iter().enumerate() {
                if k == 0 {
                    continue;
                }
                let j = map[i].ok_or_else(|| JetError::UnknownVariable(self.space.vars[i].clone()))?;
                e2[j] = k;
            }
            out.add_term(e2, c.clone());
        }
        Ok(out)
    }

    /// Splits off the variables in `outer`: returns a map from exponent
    /// vectors over `outer` to coefficient jets over the remaining variables.
    pub fn collect_in(
        &self,
        outer: &[&str],
    ) -> Result<(Arc<JetSpace>, BTreeMap<Exponents, GradedJet>), JetError> {
        let idx: Vec<usize> = outer
            .iter()
            .map(|v| {
                self.space
                    .index_of(v)
                    .ok_or_else(|| JetError::UnknownVariable(v.to_string()))
            })
            .collect::<Result<_, _>>()?;
        let rest: Vec<usize> = (0..self.space.len()).filter(|i| !idx.contains(i)).collect();
        let rest_names: Vec<&str> = rest.iter().map(|&i| self.space.vars[i].as_str()).collect();
        let rest_weights: Vec<u32> = rest.iter().map(|&i| self.space.weights[i]).collect();
        let inner = JetSpace::new(&rest_names, &rest_weights, self.space.max_degree)?;
        let mut out: BTreeMap<Exponents, GradedJet> = BTreeMap::new();
        for (e, c) in &self.terms {
            let key: Exponents = idx.iter().map(|&i| e[i]).collect();
            let inner_e: Exponents = rest.iter().map(|&i| e[i]).collect();
            let entry = out.entry(key).or_insert_with(|| GradedJet::zero(&inner));
            entry.add_term(inner_e, c.clone());
        }
        Ok((inner, out))
    }

    /// Numerical value at a point given in the order of the space variables.
    pub fn eval_f64(&self, point: &[f64]) -> f64 {
        self.terms
            .iter()
            .map(|(e, c)| {
                e.iter()
                    .zip(point)
                    .fold(to_f64(c), |acc, (&k, &x)| acc * x.powi(k as i32))
            })
            .sum()
    }

    /// Exact value at a rational point.
    pub fn eval_exact(&self, point: &[Rational]) -> Rational {
        let mut acc = Rational::zero();
        for (e, c) in &self.terms {
            let mut t = c.clone();
            for (&k, x) in e.iter().zip(point) {
                for _ in 0..k {
                    t *= x;
                }
            }
            acc += t;
        }
        acc
    }

    /// True when no variable of positive weight occurs.
    pub fn is_parameter_only(&self) -> bool {
        self.terms.keys().all(|e| self.space.weighted_degree(e) == 0)
    }

    pub fn to_json(&self) -> JetJson {
        JetJson {
            vars: self.space.vars.clone(),
            weights: self.space.weights.clone(),
            max_degree: self.space.max_degree,
            terms: self
                .terms
                .iter()
                .map(|(e, c)| TermJson {
                    exp: e.clone(),
                    num: c.numer().to_string(),
                    den: c.denom().to_string(),
                })
                .collect(),
        }
    }

    pub fn from_json(j: &JetJson) -> Result<GradedJet, JetError> {
        let space = JetSpace::new(&j.vars, &j.weights, j.max_degree)?;
        let mut terms = Vec::with_capacity(j.terms.len());
        for t in &j.terms {
            let num: BigInt = t
                .num
                .parse()
                .map_err(|_| JetError::Malformed(format!("numerator `{}`", t.num)))?;
            let den: BigInt = t
                .den
                .parse()
                .map_err(|_| JetError::Malformed(format!("denominator `{}`", t.den)))?;
            if den.is_zero() {
                return Err(JetError::Malformed("zero denominator".into()));
            }
            terms.push((t.exp.clone(), BigRational::new(num, den)));
        }
        GradedJet::from_terms(&space, terms)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TermJson {
    pub exp: Vec<u32>,
    pub num: String,
    pub den: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JetJson {
    pub vars: Vec<String>,
    pub weights: Vec<u32>,
    pub max_degree: u32,
    pub terms: Vec<TermJson>,
}

impl Serialize for GradedJet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_json().serialize(s)
    }
}

impl<'de> Deserialize<'de> for GradedJet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let j = JetJson::deserialize(d)?;
        GradedJet::from_json(&j).map_err(serde::de::Error::custom)
    }
}

macro_rules! jet_binop {
    ($tr:ident, $m:ident, $checked:ident) => {
        impl std::ops::$tr<&GradedJet> for &GradedJet {
            type Output = GradedJet;
            /// Panics on incompatible spaces; use the `checked_*` form to recover.
            fn $m(self, rhs: &GradedJet) -> GradedJet {
                self.$checked(rhs).unwrap_or_else(|e| panic!("{e}"))
            }
        }
        impl std::ops::$tr<GradedJet> for GradedJet {
            type Output = GradedJet;
            fn $m(self, rhs: GradedJet) -> GradedJet {
                (&self).$m(&rhs)
            }
        }
    };
}

jet_binop!(Add, add, checked_add);
jet_binop!(Sub, sub, checked_sub);
jet_binop!(Mul, mul, checked_mul);

struct Parser<'a> {
    s: &'a [char],
    i: usize,
    space: &'a Arc<JetSpace>,
    src: &'a str,
}

impl Parser<'_> {
    fn err(&self, what: &str) -> JetError {
        JetError::Malformed(format!("{what} at position {} in `{}`", self.i, self.src))
    }

    fn peek(&self) -> Option<char> {
        self.s.get(self.i).copied()
    }

    fn sum(&mut self) -> Result<GradedJet, JetError> {
        let mut acc = self.product()?;
        while let Some(c) = self.peek() {
            if c != '+' && c != '-' {
                break;
            }
            self.i += 1;
            let rhs = self.product()?;
            acc = if c == '+' { acc.checked_add(&rhs)? } else { acc.checked_sub(&rhs)? };
        }
        Ok(acc)
    }

    fn product(&mut self) -> Result<GradedJet, JetError> {
        let mut acc = self.unary()?;
        while let Some(c) = self.peek() {
            if c != '*' && c != '/' {
                break;
            }
            self.i += 1;
            let rhs = self.unary()?;
            if c == '*' {
                acc = acc.checked_mul(&rhs)?;
            } else {
                let d = rhs.constant_term();
                if rhs.terms.len() > 1 || d.is_zero() || !rhs.terms.contains_key(&vec![0; self.space.len()]) {
                    return Err(self.err("division by a non-constant or zero"));
                }
                acc = acc.scale(&(Rational::one() / d));
            }
        }
        Ok(acc)
    }

    fn unary(&mut self) -> Result<GradedJet, JetError> {
        match self.peek() {
            Some('-') => {
                self.i += 1;
                Ok(-self.unary()?)
            }
            Some('+') => {
                self.i += 1;
                self.unary()
            }
            _ => self.power(),
        }
    }

    fn power(&mut self) -> Result<GradedJet, JetError> {
        let base = self.atom()?;
        if self.peek() == Some('^') {
            self.i += 1;
            let start = self.i;
            while self.peek().is_some_and(|c| c.is_ascii_digit()) {
                self.i += 1;
            }
            let n: u32 = self.s[start..self.i]
                .iter()
                .collect::<String>()
                .parse()
                .map_err(|_| self.err("bad exponent"))?;
            return Ok(base.pow(n));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<GradedJet, JetError> {
        match self.peek() {
            Some('(') => {
                self.i += 1;
                let j = self.sum()?;
                if self.peek() != Some(')') {
                    return Err(self.err("expected `)`"));
                }
                self.i += 1;
                Ok(j)
            }
            Some(c) if c.is_ascii_digit() => {
                let start = self.i;
                while self.peek().is_some_and(|c| c.is_ascii_digit()) {
                    self.i += 1;
                }
                let n: String = self.s[start..self.i].iter().collect();
                Ok(GradedJet::constant(self.space, parse_rational(&n)?))
            }
            Some(c) if c.is_alphabetic() || c == '_' => {
                let start = self.i;
                while self.peek().is_some_and(|c| c.is_alphanumeric() || c == '_') {
                    self.i += 1;
                }
                let name: String = self.s[start..self.i].iter().collect();
                GradedJet::var(self.space, &name)
            }
            _ => Err(self.err("expected a number, variable or `(`")),
        }
    }
}

impl std::ops::Neg for &GradedJet {
    type Output = GradedJet;
    fn neg(self) -> GradedJet {
        self.scale(&-Rational::one())
    }
}

impl std::ops::Neg for GradedJet {
    type Output = GradedJet;
    fn neg(self) -> GradedJet {
        -&self
    }
}

fn fmt_monomial(space: &JetSpace, e: &[u32]) -> String {
    let mut parts = Vec::new();
    for (name, &k) in space.vars.iter().zip(e) {
        match k {
            0 => {}
            1 => parts.push(name.clone()),
            _ => parts.push(format!("{name}^{k}")),
        }
    }
    parts.join("*")
}

impl fmt::Display for GradedJet {
    /// Monomials sorted by weighted degree, then by descending exponents.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.terms.is_empty() {
            return write!(f, "0");
        }
        let mut sorted: Vec<(&Exponents, &Rational)> = self.terms.iter().collect();
        sorted.sort_by(|(a, _), (b, _)| {
            self.space
                .weighted_degree(a)
                .cmp(&self.space.weighted_degree(b))
                .then_with(|| b.cmp(a))
        });
        for (k, (e, c)) in sorted.into_iter().enumerate() {
            let mono = fmt_monomial(&self.space, e);
            let neg = c.is_negative();
            let abs = c.abs();
            if k == 0 {
                if neg {
                    write!(f, "-")?;
                }
            } else {
                write!(f, " {} ", if neg { "-" } else { "+" })?;
            }
            if mono.is_empty() {
                write!(f, "{abs}")?;
            } else if abs.is_one() {
                write!(f, "{mono}")?;
            } else {
                write!(f, "{abs}*{mono}")?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uv() -> Arc<JetSpace> {
        JetSpace::uniform(&["u", "v", "U", "V"], 4)
    }

    fn p(space: &Arc<JetSpace>, s: &str) -> GradedJet {
        GradedJet::parse(space, s).unwrap()
    }

    #[test]
    fn add_cancels_to_one() {
        let s = uv();
        let one_plus_u = p(&s, "1 + u");
        let minus_u = p(&s, "-u");
        assert_eq!(&one_plus_u + &minus_u, GradedJet::one(&s));
    }

    #[test]
    fn ln_plus_u() {
        let s = uv();
        let ln = p(&s, "-u").analytic_apply(&AnalyticFn::Ln1p).unwrap();
        let got = &ln + &p(&s, "u");
        assert_eq!(got, p(&s, "-1/2*u^2 - 1/3*u^3 - 1/4*u^4"));
    }

    #[test]
    fn kinetic_plus_log_matches_hand_expansion() {
        let s = uv();
        let minus_u = p(&s, "-u");
        let inv_sq = minus_u
            .analytic_apply(&AnalyticFn::reciprocal_power(int(2)))
            .unwrap()
            .scale(&rat(1, 2));
        let ln = minus_u.analytic_apply(&AnalyticFn::Ln1p).unwrap();
        assert_eq!(&inv_sq + &ln, p(&s, "1/2 + u^2 + 5/3*u^3 + 9/4*u^4"));
    }

    #[test]
    fn products() {
        let s = uv();
        assert_eq!(p(&s, "1+u") * p(&s, "1-u"), p(&s, "1 - u^2"));
        assert_eq!(
            p(&s, "U^2") * p(&s, "1 + 2*V + 3*V^2"),
            p(&s, "U^2 + 2*U^2*V + 3*U^2*V^2")
        );
        let ij = JetSpace::new(&["I", "J"], &[2, 1], 4).unwrap();
        let i = GradedJet::var(&ij, "I").unwrap();
        let j = GradedJet::var(&ij, "J").unwrap();
        assert!((i * j.pow(3)).is_zero());
    }

    #[test]
    fn analytic_functions() {
        let s = uv();
        let r = p(&s, "-u")
            .analytic_apply(&AnalyticFn::reciprocal_power(int(2)))
            .unwrap();
        assert_eq!(r, p(&s, "1 + 2*u + 3*u^2 + 4*u^3 + 5*u^4"));
        let l = p(&s, "-V").analytic_apply(&AnalyticFn::Ln1p).unwrap();
        assert_eq!(l, p(&s, "-V - 1/2*V^2 - 1/3*V^3 - 1/4*V^4"));
        let z = GradedJet::zero(&s).analytic_apply(&AnalyticFn::sqrt1p()).unwrap();
        assert_eq!(z, GradedJet::one(&s));
        let err = p(&s, "1 + u").analytic_apply(&AnalyticFn::Ln1p);
        assert!(matches!(err, Err(JetError::Domain(_))));
    }

    #[test]
    fn sqrt_squares_back() {
        let s = uv();
        let j = p(&s, "u - 2*V + u*U");
        let r = j.analytic_apply(&AnalyticFn::sqrt1p()).unwrap();
        assert_eq!(&r * &r, j.add_constant(&int(1)));
    }

    #[test]
    fn substitution_examples() {
        let s = uv();
        // ln(1 - V) with V -> J
        let ij = JetSpace::new(&["I", "J"], &[2, 1], 4).unwrap();
        let lnv = p(&s, "-V").analytic_apply(&AnalyticFn::Ln1p).unwrap();
        let mut b = BTreeMap::new();
        for v in ["u", "v", "U"] {
            b.insert(v.to_string(), GradedJet::zero(&JetSpace::uniform(&["J"], 4)));
        }
        b.insert("V".into(), GradedJet::var(&JetSpace::uniform(&["J"], 4), "J").unwrap());
        let got = lnv.substitute(&b, &JetSpace::uniform(&["J"], 4)).unwrap();
        let want = GradedJet::parse(&JetSpace::uniform(&["J"], 4), "-J - 1/2*J^2 - 1/3*J^3 - 1/4*J^4")
            .unwrap();
        assert_eq!(got, want);

        // alpha*I^2 with I = x^2 + X^2/2
        let ia = JetSpace::new(&["I", "alpha"], &[2, 0], 4).unwrap();
        let xa = JetSpace::new(&["x", "X", "alpha"], &[1, 1, 0], 4).unwrap();
        let src = GradedJet::parse(&ia, "alpha*I^2").unwrap();
        let mut b = BTreeMap::new();
        b.insert("I".to_string(), GradedJet::parse(&xa, "x^2 + 1/2*X^2").unwrap());
        let got = src.substitute(&b, &xa).unwrap();
        let want = GradedJet::parse(&xa, "alpha*x^4 + alpha*x^2*X^2 + 1/4*alpha*X^4").unwrap();
        assert_eq!(got, want);
        let _ = ij;
    }

    #[test]
    fn constant_binding_in_truncated_variable_is_rejected() {
        let s = uv();
        let j = p(&s, "u^2");
        let mut b = BTreeMap::new();
        b.insert("u".to_string(), p(&s, "1 - u"));
        assert!(matches!(j.substitute(&b, &s), Err(JetError::Domain(_))));
    }

    #[test]
    fn derivatives() {
        let s = JetSpace::uniform(&["x", "y", "U", "V"], 4);
        assert_eq!(
            p(&s, "x*U").partial_derivative("U").unwrap(),
            GradedJet::parse(&s.with_max_degree(3), "x").unwrap()
        );
        assert_eq!(
            p(&s, "y*V").partial_derivative("y").unwrap(),
            GradedJet::parse(&s.with_max_degree(3), "V").unwrap()
        );
        assert_eq!(
            p(&s, "55/144*U*x^3").partial_derivative("x").unwrap(),
            GradedJet::parse(&s.with_max_degree(3), "55/48*U*x^2").unwrap()
        );
        assert!(matches!(
            p(&s, "x").partial_derivative("z"),
            Err(JetError::UnknownVariable(_))
        ));
    }

    #[test]
    fn incompatible_add_is_an_error() {
        let a = GradedJet::one(&JetSpace::uniform(&["u"], 4));
        let b = GradedJet::one(&JetSpace::uniform(&["v"], 4));
        assert!(matches!(a.checked_add(&b), Err(JetError::Incompatible(_))));
        let c = GradedJet::one(&JetSpace::uniform(&["u"], 3));
        assert!(a.checked_mul(&c).is_err());
    }

    #[test]
    fn json_round_trip_and_display() {
        let s = uv();
        let j = p(&s, "1/2 + u^2 - 5/3*u^3 + 3/2*U^2*V^2");
        let txt = serde_json::to_string(&j).unwrap();
        let back: GradedJet = serde_json::from_str(&txt).unwrap();
        assert_eq!(back, j);
        assert_eq!(j.to_string(), "1/2 + u^2 - 5/3*u^3 + 3/2*U^2*V^2");
    }

    #[test]
    fn collect_in_splits_parameters() {
        let s = JetSpace::new(&["u", "a"], &[1, 0], 4).unwrap();
        let j = GradedJet::parse(&s, "u + a*u + 3*a^2*u^2").unwrap();
        let (inner, parts) = j.collect_in(&["u"]).unwrap();
        assert_eq!(parts[&vec![1]], GradedJet::parse(&inner, "1 + a").unwrap());
        assert_eq!(parts[&vec![2]], GradedJet::parse(&inner, "3*a^2").unwrap());
    }
}
