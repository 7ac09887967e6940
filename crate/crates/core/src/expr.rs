//! Closed-form expression trees.
//!
//! Canonical maps and Hamiltonians are written as small expression trees so
//! that the same object can be evaluated in floating point, composed
//! symbolically, and expanded exactly into a [`GradedJet`] about a base
//! point.

use std::collections::BTreeMap;
use std::sync::Arc;

use num_bigint::BigInt;
use num_traits::{One, Signed, ToPrimitive, Zero};
use thiserror::Error;

use crate::jet::{int, to_f64, AnalyticFn, GradedJet, JetError, JetSpace, Rational};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExprError {
    #[error("unbound variable `{0}`")]
    Unbound(String),
    #[error("outside the domain: {0}")]
    Domain(String),
    #[error("no exact expansion: {0}")]
    Inexact(String),
    #[error(transparent)]
    Jet(#[from] JetError),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(Rational),
    /// A floating-point constant; evaluable but not exactly expandable.
    Real(f64),
    Var(String),
    Add(Vec<Expr>),
    Mul(Vec<Expr>),
    Pow(Box<Expr>, Rational),
    Ln(Box<Expr>),
    Cos(Box<Expr>),
    Sin(Box<Expr>),
    Atan2(Box<Expr>, Box<Expr>),
}

pub fn var(name: &str) -> Expr {
    Expr::Var(name.to_string())
}

pub fn num(n: i64) -> Expr {
    Expr::Num(int(n))
}

pub fn q(n: i64, d: i64) -> Expr {
    Expr::Num(crate::jet::rat(n, d))
}

impl Expr {
    pub fn pow(self, r: Rational) -> Expr {
        Expr::Pow(Box::new(self), r)
    }

    pub fn powi(self, n: i64) -> Expr {
        self.pow(int(n))
    }

    pub fn sqrt(self) -> Expr {
        self.pow(crate::jet::rat(1, 2))
    }

    pub fn ln(self) -> Expr {
        Expr::Ln(Box::new(self))
    }

    pub fn cos(self) -> Expr {
        Expr::Cos(Box::new(self))
    }

    pub fn sin(self) -> Expr {
        Expr::Sin(Box::new(self))
    }

    pub fn atan2(y: Expr, x: Expr) -> Expr {
        Expr::Atan2(Box::new(y), Box::new(x))
    }

    /// Polynomial expression with the same terms as `j` (variables by name).
    pub fn from_jet(j: &GradedJet) -> Expr {
        let mut sum = Vec::new();
        for (e, c) in j.terms() {
            let mut f = vec![Expr::Num(c.clone())];
            for (name, &k) in j.vars().iter().zip(e) {
                if k > 0 {
                    f.push(var(name).powi(k as i64));
                }
            }
            sum.push(Expr::Mul(f));
        }
        Expr::Add(sum)
    }

    pub fn eval(&self, env: &dyn Fn(&str) -> Option<f64>) -> Result<f64, ExprError> {
        Ok(match self {
            Expr::Num(r) => to_f64(r),
            Expr::Real(x) => *x,
            Expr::Var(n) => env(n).ok_or_else(|| ExprError::Unbound(n.clone()))?,
            Expr::Add(v) => {
                let mut s = 0.0;
                for e in v {
                    s += e.eval(env)?;
                }
                s
            }
            Expr::Mul(v) => {
                let mut s = 1.0;
                for e in v {
                    s *= e.eval(env)?;
                }
                s
            }
            Expr::Pow(b, r) => {
                let x = b.eval(env)?;
                if r.is_integer() {
                    let n = r.to_integer().to_i32().unwrap_or(i32::MAX);
                    if x == 0.0 && n < 0 {
                        return Err(ExprError::Domain("negative power of zero".into()));
                    }
                    x.powi(n)
                } else {
                    if x < 0.0 || (x == 0.0 && r.is_negative()) {
                        return Err(ExprError::Domain(format!("fractional power of {x}")));
                    }
                    x.powf(to_f64(r))
                }
            }
            Expr::Ln(b) => {
                let x = b.eval(env)?;
                if x <= 0.0 {
                    return Err(ExprError::Domain(format!("ln of {x}")));
                }
                x.ln()
            }
            Expr::Cos(b) => b.eval(env)?.cos(),
            Expr::Sin(b) => b.eval(env)?.sin(),
            Expr::Atan2(y, x) => {
                let (y, x) = (y.eval(env)?, x.eval(env)?);
                if x == 0.0 && y == 0.0 {
                    return Err(ExprError::Domain("angle of the origin".into()));
                }
                y.atan2(x)
            }
        })
    }

    /// Evaluates with variables bound by name from parallel slices.
    pub fn eval_at(&self, names: &[String], values: &[f64]) -> Result<f64, ExprError> {
        self.eval(&|n: &str| names.iter().position(|m| m == n).map(|i| values[i]))
    }

    /// Simultaneous substitution of variables by expressions.
    pub fn substitute(&self, map: &BTreeMap<String, Expr>) -> Expr {
        match self {
            Expr::Var(n) => map.get(n).cloned().unwrap_or_else(|| self.clone()),
            Expr::Num(_) | Expr::Real(_) => self.clone(),
            Expr::Add(v) => Expr::Add(v.iter().map(|e| e.substitute(map)).collect()),
            Expr::Mul(v) => Expr::Mul(v.iter().map(|e| e.substitute(map)).collect()),
            Expr::Pow(b, r) => Expr::Pow(Box::new(b.substitute(map)), r.clone()),
            Expr::Ln(b) => Expr::Ln(Box::new(b.substitute(map))),
            Expr::Cos(b) => Expr::Cos(Box::new(b.substitute(map))),
            Expr::Sin(b) => Expr::Sin(Box::new(b.substitute(map))),
            Expr::Atan2(y, x) => Expr::Atan2(Box::new(y.substitute(map)), Box::new(x.substitute(map))),
        }
    }

    /// Formal partial derivative. No simplification is attempted.
    pub fn derivative(&self, name: &str) -> Expr {
        match self {
            Expr::Num(_) | Expr::Real(_) => num(0),
            Expr::Var(n) => num(if n == name { 1 } else { 0 }),
            Expr::Add(v) => Expr::Add(v.iter().map(|e| e.derivative(name)).collect()),
            Expr::Mul(v) => {
                let mut sum = Vec::with_capacity(v.len());
                for i in 0..v.len() {
                    let mut f: Vec<Expr> = v.clone();
                    f[i] = v[i].derivative(name);
                    sum.push(Expr::Mul(f));
                }
                Expr::Add(sum)
            }
            Expr::Pow(b, r) => Expr::Mul(vec![
                Expr::Num(r.clone()),
                Expr::Pow(b.clone(), r - Rational::one()),
                b.derivative(name),
            ]),
            Expr::Ln(b) => b.derivative(name) / (**b).clone(),
            Expr::Cos(b) => -(Expr::Sin(b.clone()) * b.derivative(name)),
            Expr::Sin(b) => Expr::Cos(b.clone()) * b.derivative(name),
            Expr::Atan2(y, x) => {
                let (y, x) = ((**y).clone(), (**x).clone());
                (x.clone() * y.derivative(name) - y.clone() * x.derivative(name))
                    / (x.powi(2) + y.powi(2))
            }
        }
    }

    /// Exact Maclaurin expansion about `base` (variables absent from `base`
    /// are expanded about zero). Every variable must belong to `space`.
    pub fn to_jet(
        &self,
        space: &Arc<JetSpace>,
        base: &BTreeMap<String, Rational>,
    ) -> Result<GradedJet, ExprError> {
        Ok(match self {
            Expr::Num(r) => GradedJet::constant(space, r.clone()),
            Expr::Real(x) => return Err(ExprError::Inexact(format!("floating constant {x}"))),
            Expr::Var(n) => {
                let j = GradedJet::var(space, n)?;
                match base.get(n) {
                    Some(c) => j.add_constant(c),
                    None => j,
                }
            }
            Expr::Add(v) => {
                let mut acc = GradedJet::zero(space);
                for e in v {
                    acc = acc.checked_add(&e.to_jet(space, base)?)?;
                }
                acc
            }
            Expr::Mul(v) => {
                let mut acc = GradedJet::one(space);
                for e in v {
                    acc = acc.checked_mul(&e.to_jet(space, base)?)?;
                }
                acc
            }
            Expr::Pow(b, r) => {
                let j = b.to_jet(space, base)?;
                if r.is_integer() && !r.is_negative() {
                    return Ok(j.pow(r.to_integer().to_u32().unwrap_or(u32::MAX)));
                }
                let c = j.constant_term();
                if c.is_zero() {
                    return Err(ExprError::Domain(format!(
                        "power {r} of a series vanishing at the base point"
                    )));
                }
                let scale = exact_power(&c, r).ok_or_else(|| {
                    ExprError::Inexact(format!("({c})^({r}) is not rational"))
                })?;
                let rel = j.scale(&(Rational::one() / &c)).add_constant(&-Rational::one());
                rel.analytic_apply(&AnalyticFn::Power(r.clone()))?.scale(&scale)
            }
            Expr::Ln(b) => {
                let j = b.to_jet(space, base)?;
                let c = j.constant_term();
                if c.is_zero() {
                    return Err(ExprError::Domain("ln of a series vanishing at the base point".into()));
                }
                if !c.is_one() {
                    return Err(ExprError::Inexact(format!("ln({c}) is not rational")));
                }
                j.add_constant(&-Rational::one()).analytic_apply(&AnalyticFn::Ln1p)?
            }
            Expr::Cos(b) | Expr::Sin(b) => {
                let j = b.to_jet(space, base)?;
                if !j.constant_term().is_zero() {
                    return Err(ExprError::Inexact("trig function off the origin".into()));
                }
                let f = if matches!(self, Expr::Cos(_)) {
                    AnalyticFn::Cos
                } else {
                    AnalyticFn::Sin
                };
                j.analytic_apply(&f)?
            }
            Expr::Atan2(..) => return Err(ExprError::Inexact("atan2 has no jet expansion".into())),
        })
    }
}

/// `c^r` when it is rational.
fn exact_power(c: &Rational, r: &Rational) -> Option<Rational> {
    let n = r.numer().to_i64()?;
    let d = r.denom().to_u32()?;
    let root = |x: &BigInt| -> Option<BigInt> {
        if x.is_negative() {
            if d % 2 == 0 {
                return None;
            }
            let y = (-x).nth_root(d);
            return (num_traits::pow(y.clone(), d as usize) == -x).then(|| -y);
        }
        let y = x.nth_root(d);
        (num_traits::pow(y.clone(), d as usize) == *x).then_some(y)
    };
    let base = Rational::new(root(c.numer())?, root(c.denom())?);
    if n >= 0 {
        Some(num_traits::pow(base, n as usize))
    } else {
        Some(num_traits::pow(Rational::one() / base, (-n) as usize))
    }
}

impl std::ops::Add for Expr {
    type Output = Expr;
    fn add(self, rhs: Expr) -> Expr {
        Expr::Add(vec![self, rhs])
    }
}

impl std::ops::Sub for Expr {
    type Output = Expr;
    fn sub(self, rhs: Expr) -> Expr {
        Expr::Add(vec![self, Expr::Mul(vec![num(-1), rhs])])
    }
}

impl std::ops::Mul for Expr {
    type Output = Expr;
    fn mul(self, rhs: Expr) -> Expr {
        Expr::Mul(vec![self, rhs])
    }
}

impl std::ops::Div for Expr {
    type Output = Expr;
    fn div(self, rhs: Expr) -> Expr {
        Expr::Mul(vec![self, rhs.powi(-1)])
    }
}

impl std::ops::Neg for Expr {
    type Output = Expr;
    fn neg(self) -> Expr {
        Expr::Mul(vec![num(-1), self])
    }
}
