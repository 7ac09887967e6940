//! The exact-arithmetic golden checks behind `nosetori verify`.
//!
//! Expected values live in a JSON map from check id to a literal (a
//! rational, a polynomial, or `true`/`false`), so a corrupted fixture shows
//! up as a failing check rather than a silently changed constant.

use std::collections::BTreeMap;
use std::sync::Arc;

use nosetori::averaging::{
    averaged_closed_form, averaged_oscillator, averaging_discrepancies, critical_fast_energy, discrepancy_markdown,
    maclaurin_expand, quartic_at_critical_energy, scaled_average,
};
use nosetori::canonical::{builtin_map, symplectic_check, BUILTIN_MAPS};
use nosetori::jet::{int, parse_rational, rat, GradedJet, JetSpace, Rational};
use nosetori::normal_form::{
    bnf_oscillator, expand_g0, hat_g_normal_form, hat_g_solved, hessian_det_series, nose_like_normal_form,
    nose_normal_form, G0Model, NormalFormResult,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const GROUPS: [&str; 5] = ["nose", "nose-like", "hessian", "oscillator", "symplectic"];

/// The built-in fixture.
pub const GOLDEN: &str = include_str!("../fixtures/golden.json");

/// Generator monomials of the Nose normal form.
const NU_MONOMIALS: [&str; 10] = [
    "x*U", "y*V", "x^3*U", "x^2*U*V", "x^2*U", "x*U*V^2", "x*U*V", "x*U^3", "U^3*V", "U^3",
];

const HAT_G_KAPPAS: [(i64, i64); 2] = [(1, 10), (3, 7)];

const KAM_SAMPLES: usize = 20;

const SYMPLECTIC_POINTS: usize = 50;
const SYMPLECTIC_TOL: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub id: String,
    pub expected: String,
    pub computed: String,
    pub passed: bool,
    pub detail: Option<String>,
}

#[derive(Debug, Clone, Default)]
pub struct Report {
    pub checks: Vec<Check>,
    /// Markdown for DISCREPANCIES.md, when the oscillator checks ran.
    pub discrepancies: Option<String>,
}

impl Report {
    pub fn failures(&self) -> usize {
        self.checks.iter().filter(|c| !c.passed).count()
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for c in &self.checks {
            let status = if c.passed { "PASS" } else { "FAIL" };
            s.push_str(&format!("{status} {}", c.id));
            if !c.passed {
                s.push_str(&format!(": expected {}, computed {}", c.expected, c.computed));
            }
            if let Some(d) = &c.detail {
                s.push_str(&format!(" ({d})"));
            }
            s.push('\n');
        }
        s.push_str(&format!(
            "{} checks, {} passed, {} failed\n",
            self.checks.len(),
            self.checks.len() - self.failures(),
            self.failures()
        ));
        s
    }
}

pub type Golden = BTreeMap<String, String>;

pub fn parse_golden(text: &str) -> Result<Golden, String> {
    serde_json::from_str(text).map_err(|e| format!("golden fixture: {e}"))
}

struct Suite<'a> {
    golden: &'a Golden,
    checks: Vec<Check>,
}

impl Suite<'_> {
    fn expected(&self, key: &str) -> Result<&str, String> {
        self.golden
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| format!("no golden value for `{key}`"))
    }

    fn push(&mut self, id: String, expected: String, computed: String, passed: bool, detail: Option<String>) {
        self.checks.push(Check {
            id,
            expected,
            computed,
            passed,
            detail,
        });
    }

    fn failed(&mut self, id: &str, why: String) {
        self.push(id.to_string(), why, "error".into(), false, None);
    }

    fn rational(&mut self, id: &str, key: &str, computed: &Rational) {
        let exp = match self.expected(key).and_then(|e| parse_rational(e).map_err(|x| x.to_string())) {
            Ok(e) => e,
            Err(why) => return self.failed(id, why),
        };
        self.push(id.into(), exp.to_string(), computed.to_string(), &exp == computed, None);
    }

    fn jet(&mut self, id: &str, key: &str, computed: &GradedJet) {
        let exp = match self
            .expected(key)
            .and_then(|e| GradedJet::parse(computed.space(), e).map_err(|x| x.to_string()))
        {
            Ok(e) => e,
            Err(why) => return self.failed(id, why),
        };
        self.push(id.into(), exp.to_string(), computed.to_string(), &exp == computed, None);
    }

    fn flag(&mut self, id: &str, key: &str, computed: bool, detail: Option<String>) {
        let exp = match self.expected(key) {
            Ok("true") => true,
            Ok("false") => false,
            Ok(other) => return self.failed(id, format!("`{other}` is not a boolean")),
            Err(why) => return self.failed(id, why),
        };
        self.push(id.into(), exp.to_string(), computed.to_string(), exp == computed, detail);
    }
}

fn coefficient_by_name(j: &GradedJet, monomial: &str) -> Result<Rational, String> {
    let m = GradedJet::parse(j.space(), monomial).map_err(|e| e.to_string())?;
    let (e, _) = m.terms().next().ok_or_else(|| format!("`{monomial}` is not a monomial"))?;
    Ok(j.coefficient(e))
}

fn scalar(r: &NormalFormResult, name: &str) -> Rational {
    r.value(name).map(GradedJet::constant_term).unwrap_or_default()
}

/// Runs the checks of the selected group (all groups when `filter` is
/// `None`). `seed` drives the random samples.
pub fn run(golden: &Golden, filter: Option<&str>, seed: u64) -> Result<Report, String> {
    if let Some(f) = filter {
        if !GROUPS.contains(&f) {
            return Err(format!("unknown check group `{f}`; expected one of {}", GROUPS.join(", ")));
        }
    }
    let wanted = |g: &str| filter.is_none_or(|f| f == g);
    let mut suite = Suite {
        golden,
        checks: Vec::new(),
    };
    let mut report = Report::default();
    if wanted("nose") {
        nose_checks(&mut suite, &nose_normal_form().map_err(|e| e.to_string())?)?;
    }
    if wanted("nose-like") {
        nose_like_checks(&mut suite, seed)?;
    }
    if wanted("hessian") {
        hessian_checks(&mut suite)?;
    }
    if wanted("oscillator") {
        report.discrepancies = Some(oscillator_checks(&mut suite)?);
    }
    if wanted("symplectic") {
        symplectic_checks(&mut suite, seed)?;
    }
    report.checks = suite.checks;
    Ok(report)
}

fn nose_checks(s: &mut Suite, r: &NormalFormResult) -> Result<(), String> {
    for name in ["alpha", "beta", "gamma"] {
        let key = format!("nose.{name}");
        s.rational(&key, &key, &scalar(r, name));
    }
    for m in NU_MONOMIALS {
        let key = format!("nose.nu.{m}");
        let c = coefficient_by_name(&r.nu, m)?;
        s.rational(&key, &key, &c);
    }
    let extra = r.nu.num_terms() as i64 - NU_MONOMIALS.len() as i64;
    s.rational("nose.nu.other_terms", "nose.nu.other_terms", &int(extra));
    s.jet("nose.g0", "nose.g0", &expand_g0(&G0Model::Nose).map_err(|e| e.to_string())?);
    s.jet("nose.transformed", "nose.transformed", &r.transformed);
    s.jet("nose.hessian", "nose.hessian", &r.hessian_series);
    s.flag("nose.kam_sufficient", "nose.kam_sufficient", r.kam_sufficient, None);
    Ok(())
}

fn ab_space() -> Arc<JetSpace> {
    JetSpace::new(&["a", "b"], &[0, 0], 0).expect("valid space")
}

fn nose_like_checks(s: &mut Suite, seed: u64) -> Result<(), String> {
    let r = nose_like_normal_form(None).map_err(|e| e.to_string())?;
    let ab = ab_space();
    let home = |name: &str| -> Result<GradedJet, String> {
        r.value(name)
            .ok_or_else(|| format!("solver returned no {name}"))?
            .embed(&ab)
            .map_err(|e| e.to_string())
    };
    let alpha = home("alpha")?;
    let mut bindings = BTreeMap::new();
    bindings.insert("alpha".to_string(), alpha.clone());
    let rel_space = JetSpace::new(&["a", "b", "alpha"], &[0, 0, 0], 0).expect("valid space");
    let b = GradedJet::var(&ab, "b").map_err(|e| e.to_string())?;
    for (name, solved) in [("b", b), ("beta", home("beta")?), ("gamma", home("gamma")?)] {
        // the printed relation, with the solved alpha substituted
        let key = format!("nose-like.{name}");
        let id = format!("nose-like.relation.{name}");
        let rhs = s
            .expected(&key)
            .and_then(|e| GradedJet::parse(&rel_space, e).map_err(|x| x.to_string()))
            .and_then(|j| j.substitute(&bindings, &ab).map_err(|x| x.to_string()));
        match rhs {
            Ok(rhs) => {
                let detail = Some(format!("{name} = {}", s.expected(&key).unwrap_or_default()));
                s.push(id, rhs.to_string(), solved.to_string(), rhs == solved, detail);
            }
            Err(why) => s.failed(&id, why),
        }
    }
    let zero = [int(0), int(0)];
    for name in ["alpha", "beta", "gamma"] {
        let v = home(name)?.eval_exact(&zero);
        s.rational(&format!("nose-like.at_zero.{name}"), &format!("nose.{name}"), &v);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..KAM_SAMPLES {
        let a = rat(rng.gen_range(-20..=20), rng.gen_range(1..=6));
        let b = rat(rng.gen_range(-20..=20), rng.gen_range(1..=6));
        let r = nose_like_normal_form(Some((a.clone(), b.clone()))).map_err(|e| e.to_string())?;
        let detail = format!("2 alpha + beta^2 = {}", -r.hessian_series.constant_term());
        s.flag(
            &format!("nose-like.kam_sufficient[a={a},b={b}]"),
            "nose-like.kam_sufficient",
            r.kam_sufficient,
            Some(detail),
        );
    }
    Ok(())
}

fn hessian_checks(s: &mut Suite) -> Result<(), String> {
    let space = JetSpace::new(&["I", "J", "alpha", "beta", "gamma"], &[2, 1, 0, 0, 0], 4).expect("valid space");
    let f = GradedJet::parse(
        &space,
        "I*(alpha*I + 1 + beta*J + gamma*J^2) - J - 1/2*J^2 - 1/3*J^3 - 1/4*J^4",
    )
    .map_err(|e| e.to_string())?;
    let h = hessian_det_series(&f, &["I".into(), "J".into()]).map_err(|e| e.to_string())?;
    s.jet("hessian.series", "hessian.series", &h);
    // alpha = gamma = 0 and beta = 0 would need a = 2; there gamma, with b
    // chosen so that alpha = 0, is the value below, not zero.
    let r = nose_like_normal_form(None).map_err(|e| e.to_string())?;
    let ab = ab_space();
    let get = |n: &str| r.value(n).expect("solved").embed(&ab).map_err(|e| e.to_string());
    let (alpha, gamma) = (get("alpha")?, get("gamma")?);
    let a2 = int(2);
    let alpha0 = alpha.eval_exact(&[a2.clone(), int(0)]);
    let slope = alpha.eval_exact(&[a2.clone(), int(1)]) - &alpha0;
    let b_star = -alpha0 / slope;
    let g = gamma.eval_exact(&[a2, b_star]);
    s.rational("hessian.edge.gamma_at_a2", "hessian.edge.gamma_at_a2", &g);
    Ok(())
}

/// `hat G` coefficients from the printed generator and from the full solve.
struct Correction {
    kappa: Rational,
    printed: [Rational; 3],
    full: [Rational; 3],
    /// Coefficient of `y X Y` the printed generator leaves on the full `hat G`.
    leftover: Rational,
}

fn oscillator_checks(s: &mut Suite) -> Result<String, String> {
    let err = |e: &dyn std::fmt::Display| e.to_string();
    let avg = averaged_oscillator().map_err(|e| err(&e))?;
    let c = |p: &[(&str, u32)]| avg.coefficient_of(p).map_err(|e| err(&e));
    s.rational("oscillator.average.E", "oscillator.average.E", &c(&[("E", 1)])?);
    s.rational("oscillator.average.kappa*E^2", "oscillator.average.kappa*E^2", &c(&[("kappa", 1), ("E", 2)])?);
    let closed = averaged_closed_form(int(1), rat(1, 16)).map_err(|e| err(&e))?;
    s.flag("oscillator.average.closed_form", "oscillator.average.closed_form", avg == closed, None);

    let t2 = maclaurin_expand(&scaled_average().map_err(|e| err(&e))?, 2, None).map_err(|e| err(&e))?;
    let (inner, parts) = t2.collect_in(&["u", "U"]).map_err(|e| err(&e))?;
    for (name, e) in [("u^2", [2, 0]), ("u", [1, 0]), ("1", [0, 0]), ("U^2", [0, 2])] {
        let part = parts.get(e.as_slice()).cloned().unwrap_or_else(|| GradedJet::zero(&inner));
        let key = format!("oscillator.t2.{name}");
        s.jet(&key, &key, &part);
    }
    let t4 = quartic_at_critical_energy().map_err(|e| err(&e))?;
    s.jet("oscillator.t4", "oscillator.t4", &t4);
    s.jet(
        "oscillator.critical_energy",
        "oscillator.critical_energy",
        &critical_fast_energy(3).map_err(|e| err(&e))?,
    );
    let a3 = t4.coefficient_of(&[("u", 3)]).map_err(|e| err(&e))?;
    let a4 = t4.coefficient_of(&[("u", 4)]).map_err(|e| err(&e))?;
    s.rational("oscillator.bnf", "oscillator.bnf", &bnf_oscillator(&a3, &a4).map_err(|e| err(&e))?);

    let mut corrections = Vec::new();
    for (p, q) in HAT_G_KAPPAS {
        let kappa = rat(p, q);
        let r = hat_g_normal_form(&kappa).map_err(|e| err(&e))?;
        let v = |n: &str| scalar(&r.result, n);
        s.rational(
            &format!("oscillator.hat_g.alpha/kappa@{kappa}"),
            "oscillator.hat_g.alpha/kappa",
            &(v("alpha") / &kappa),
        );
        s.rational(&format!("oscillator.hat_g.beta@{kappa}"), "oscillator.hat_g.beta", &v("beta"));
        s.rational(
            &format!("oscillator.hat_g.kappa*gamma@{kappa}"),
            "oscillator.hat_g.kappa*gamma",
            &(v("gamma") * &kappa),
        );
        let j = r.reduced_j.scale(&(Rational::from_integer(1.into()) / &kappa));
        s.jet(&format!("oscillator.eq_j/kappa@{kappa}"), "oscillator.eq_j/kappa", &j);
        let full = hat_g_solved(&kappa).map_err(|e| err(&e))?;
        let leftover = r
            .full_coupling_image
            .coefficient_of(&[("y", 1), ("X", 1), ("Y", 1)])
            .map_err(|e| err(&e))?;
        corrections.push(Correction {
            printed: [v("alpha"), v("beta"), v("gamma")],
            full: [scalar(&full, "alpha"), scalar(&full, "beta"), scalar(&full, "gamma")],
            leftover,
            kappa,
        });
    }
    // the full coupling, solved from scratch, at the first kappa
    let c0 = &corrections[0];
    let k = &c0.kappa;
    s.rational(&format!("oscillator.hat_g_full.alpha/kappa@{k}"), "oscillator.hat_g.alpha/kappa", &(&c0.full[0] / k));
    for (i, name) in [(1, "beta"), (2, "gamma")] {
        let key = format!("oscillator.hat_g_full.{name}@{k}");
        s.rational(&key, &key, &c0.full[i]);
    }
    s.rational(
        &format!("oscillator.hat_g_full.leftover_yXY/kappa@{k}"),
        "oscillator.hat_g_full.leftover_yXY/kappa",
        &(&c0.leftover / k),
    );

    let items = averaging_discrepancies().map_err(|e| err(&e))?;
    let logged = ["E/(1-u)", "kappa E^2/(1-u)^2"].iter().all(|t| items.iter().any(|d| d.term == *t));
    s.flag(
        "oscillator.discrepancies_logged",
        "oscillator.discrepancies_logged",
        logged,
        Some(format!("{} entries", items.len())),
    );

    let mut md = discrepancy_markdown(&items);
    md.push_str(
        "\n# Weakly coupled oscillator: normal form with the fast coupling kept\n\n\
         The printed generator brings `hat G` to `kappa I + J + alpha I^2 + beta I J + gamma J^2` only \
         when the slow momentum term `(U - vV/(2(1-u)))^2/2` is replaced by `U^2/2`. Applied to the full \
         Hamiltonian it leaves a cubic term `c y X Y`. Solving the full Hamiltonian from scratch keeps \
         `alpha` and shifts `beta` and `gamma` by `-kappa^2/(2(4-kappa^2))` and `kappa/(4(4-kappa^2))`.\n\n\
         | kappa | alpha (printed generator) | beta | gamma | alpha (full) | beta (full) | gamma (full) | c |\n\
         |---|---|---|---|---|---|---|---|\n",
    );
    for c in &corrections {
        let [a, b, g] = &c.printed;
        let [fa, fb, fg] = &c.full;
        md.push_str(&format!("| {} | {a} | {b} | {g} | {fa} | {fb} | {fg} | {} |\n", c.kappa, c.leftover));
    }
    Ok(md)
}

fn symplectic_checks(s: &mut Suite, seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for name in BUILTIN_MAPS {
        let id = format!("symplectic.{name}");
        let map = builtin_map(name).map_err(|e| e.to_string())?;
        let pts = map.sample_points(&mut rng, SYMPLECTIC_POINTS);
        match symplectic_check(&map, &pts, SYMPLECTIC_TOL) {
            Ok(r) => {
                let detail = format!("max deviation {:.1e} on {} points", r.max_deviation, r.points);
                s.flag(&id, "symplectic.passes", r.passed(), Some(detail));
            }
            Err(e) => s.failed(&id, e.to_string()),
        }
    }
    Ok(())
}
