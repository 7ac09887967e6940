//! Acceptance criteria, one PASS/FAIL line each, printed even when test
//! output is captured.

use std::collections::BTreeMap;
use std::io::Write;
use std::f64::consts::TAU;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::Command;
use std::time::{Duration, Instant};

use nosetori::averaging::{
    averaging_discrepancies, critical_fast_energy, maclaurin_expand, quartic_at_critical_energy, scaled_average,
};
use nosetori::canonical::{builtin_map, symplectic_check, BUILTIN_MAPS};
use nosetori::jet::{int, rat, GradedJet, JetSpace, Rational};
use nosetori::models::HamiltonianModel;
use nosetori::normal_form::{
    bnf_oscillator, expand_g0, hat_g_normal_form, hessian_det_series, nose_like_normal_form, nose_normal_form,
    G0Model,
};
use nosetori::simulate::{
    integrate_every, linearized_rotation_number, near_xi1, poincare_section, rotation_number, run_grid,
    ExperimentGrid, Method, SectionSpec, TorusClass,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Criterion = (&'static str, &'static str, fn() -> Outcome);

struct Outcome {
    passed: bool,
    detail: String,
}

fn check(ok: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed: ok,
        detail: detail.into(),
    }
}

fn jet(space: &std::sync::Arc<JetSpace>, s: &str) -> GradedJet {
    GradedJet::parse(space, s).unwrap()
}

fn c1_nose_normal_form() -> Outcome {
    let r = nose_normal_form().unwrap();
    let v = |n: &str| r.value(n).unwrap().constant_term();
    let want_nu = [
        (vec![("x", 3), ("U", 1)], rat(55, 144)),
        (vec![("x", 2), ("U", 1), ("V", 1)], rat(-5, 6)),
        (vec![("x", 2), ("U", 1)], rat(-5, 6)),
        (vec![("x", 1), ("U", 1), ("V", 2)], rat(3, 8)),
        (vec![("x", 1), ("U", 1), ("V", 1)], rat(1, 2)),
        (vec![("x", 1), ("U", 3)], rat(233, 288)),
        (vec![("U", 3), ("V", 1)], rat(-5, 9)),
        (vec![("U", 3)], rat(-5, 18)),
    ];
    let nu_ok = want_nu.iter().all(|(m, c)| &r.nu_coefficient(m).unwrap() == c);
    let ok = v("alpha") == rat(-11, 24) && v("beta") == int(1) && v("gamma") == int(1) && nu_ok;
    check(
        ok,
        format!("alpha={} beta={} gamma={}, nu coefficients match: {nu_ok}", v("alpha"), v("beta"), v("gamma")),
    )
}

fn c2_expansion() -> Outcome {
    let g0 = expand_g0(&G0Model::Nose).unwrap();
    let want = jet(g0.space(), "(3/2*V^2 + V + 1/2)*U^2 + (9/4*u^2 + 5/3*u + 1)*u^2 + 1/2");
    check(g0 == want, format!("G0 = {g0}"))
}

fn c3_nose_like() -> Outcome {
    let r = nose_like_normal_form(None).unwrap();
    let ab = JetSpace::new(&["a", "b"], &[0, 0], 0).unwrap();
    let get = |n: &str| r.value(n).unwrap().embed(&ab).unwrap();
    let (alpha, beta, gamma) = (get("alpha"), get("beta"), get("gamma"));
    let abx = JetSpace::new(&["a", "b", "alpha"], &[0, 0, 0], 0).unwrap();
    let bindings = BTreeMap::from([("alpha".to_string(), alpha.clone())]);
    let sub = |s: &str| jet(&abx, s).substitute(&bindings, &ab).unwrap();
    let b = GradedJet::var(&ab, "b").unwrap();
    let ok_b = b == sub("(96*alpha + 9*a^2 - 30*a + 44)/6");
    let ok_beta = beta == sub("(2 - a)/2");
    let ok_gamma = gamma == sub("(48*alpha + 3*a^2 - 21*a + 34)/12");
    let z = [int(0), int(0)];
    let at_zero = (alpha.eval_exact(&z), beta.eval_exact(&z), gamma.eval_exact(&z));
    let ok_zero = at_zero == (rat(-11, 24), int(1), int(1));
    check(
        ok_b && ok_beta && ok_gamma && ok_zero,
        format!(
            "b: {ok_b}, beta: {ok_beta}, gamma: {ok_gamma}, a=b=0 gives ({}, {}, {})",
            at_zero.0, at_zero.1, at_zero.2
        ),
    )
}

fn c4_hessian() -> Outcome {
    let s = JetSpace::new(&["I", "J", "alpha", "beta", "gamma"], &[2, 1, 0, 0, 0], 4).unwrap();
    let f = jet(&s, "I*(alpha*I + 1 + beta*J + gamma*J^2) - J - 1/2*J^2 - 1/3*J^3 - 1/4*J^4");
    let h = hessian_det_series(&f, &["I".into(), "J".into()]).unwrap();
    let want = jet(
        h.space(),
        "-(2*alpha + beta^2) + 4*alpha*gamma*I - 4*(beta*gamma + alpha)*J - (4*gamma^2 + 6*alpha)*J^2",
    );
    let series_ok = h == want;
    let nose = nose_normal_form().unwrap();
    let nose_ok = nose.hessian_series.constant_term() == rat(-1, 12) && nose.kam_sufficient;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut sampled = 0;
    let mut kam = 0;
    for _ in 0..20 {
        let a = rat(rng.gen_range(-20..=20), rng.gen_range(1..=6));
        let b = rat(rng.gen_range(-20..=20), rng.gen_range(1..=6));
        sampled += 1;
        if nose_like_normal_form(Some((a, b))).unwrap().kam_sufficient {
            kam += 1;
        }
    }
    // alpha = gamma = 0: with alpha = 0 eliminated, gamma = (3a^2 - 21a + 34)/12
    // has irrational roots, where beta = (2 - a)/2 and the constant term
    // -(2 alpha + beta^2) = -beta^2.
    let disc: f64 = 21.0 * 21.0 - 4.0 * 3.0 * 34.0;
    let edge_const = [(21.0 + disc.sqrt()) / 6.0, (21.0 - disc.sqrt()) / 6.0]
        .map(|a: f64| -((2.0 - a) / 2.0).powi(2));
    let edge_ok = edge_const.iter().all(|c| c.abs() > 1e-3);
    check(
        series_ok && nose_ok && kam == sampled && edge_ok,
        format!(
            "series: {series_ok}, Nose constant -1/12: {nose_ok}, kam {kam}/{sampled}, edge constants {:.4}, {:.4}",
            edge_const[0], edge_const[1]
        ),
    )
}

fn c5_oscillator() -> Outcome {
    let t2 = maclaurin_expand(&scaled_average().unwrap(), 2, None).unwrap();
    let (inner, parts) = t2.collect_in(&["u", "U"]).unwrap();
    let part = |e: [u32; 2]| parts.get(e.as_slice()).cloned().unwrap_or_else(|| GradedJet::zero(&inner));
    let t2_ok = part([2, 0]) == jet(&inner, "3/16*E^2 + R - 1/2")
        && part([1, 0]) == jet(&inner, "1/8*E^2 + R - 1")
        && part([0, 0]) == jet(&inner, "1/16*E^2 + R");
    let t4 = quartic_at_critical_energy().unwrap();
    let t4_ok = t4 == jet(t4.space(), "1/2*U^2 + 1/2*u^2 + 2/3*u^3 + 3/4*u^4 + 1");
    let a3 = t4.coefficient_of(&[("u", 3)]).unwrap();
    let a4 = t4.coefficient_of(&[("u", 4)]).unwrap();
    let bnf = bnf_oscillator(&a3, &a4).unwrap();
    let ec = critical_fast_energy(3).unwrap();
    let ec_ok = ec == jet(ec.space(), "kappa - 1/8*kappa^3");
    let kappa = rat(1, 10);
    let hg = hat_g_normal_form(&kappa).unwrap();
    let v = |n: &str| hg.result.value(n).unwrap().constant_term();
    let hat_ok = v("alpha") == rat(-13, 24) * &kappa
        && v("beta") == int(-1)
        && v("gamma") == -(Rational::from_integer(1.into()) / (int(2) * &kappa));
    let j = hg.reduced_j.scale(&(Rational::from_integer(1.into()) / &kappa));
    let j_ok = j == jet(j.space(), "h + 1/2*h^2 - I + 1/24*I^2");
    let disc = averaging_discrepancies().unwrap();
    let disc_ok = disc
        .iter()
        .any(|d| d.printed == rat(1, 64) && d.computed == rat(1, 16));
    check(
        t2_ok && t4_ok && bnf == rat(-13, 24) && ec_ok && hat_ok && j_ok && disc_ok,
        format!(
            "t2: {t2_ok}, t4: {t4_ok}, bnf {bnf}, E_c: {ec_ok}, hat G at kappa=1/10 (coupling dropped): {hat_ok}, \
             J: {j_ok}, 2^6 vs 2^4 logged: {disc_ok}"
        ),
    )
}

fn c6_symplectic() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut worst: f64 = 0.0;
    let mut ok = true;
    for name in BUILTIN_MAPS {
        let map = builtin_map(name).unwrap();
        let pts = map.sample_points(&mut rng, 50);
        let r = symplectic_check(&map, &pts, 1e-7).unwrap();
        ok &= r.passed() && r.points == 50;
        worst = worst.max(r.max_deviation);
    }
    check(ok, format!("{} maps, worst deviation {worst:.1e}", BUILTIN_MAPS.len()))
}

fn c7_integrable() -> Outcome {
    let m = HamiltonianModel::rescaled(0.0);
    let ic = near_xi1(0.05, 0.3);
    let tr = integrate_every(&m, &ic, 1e3, Method::ImplicitMidpoint { dt: 1e-2 }, 1).unwrap();
    let w_drift = tr.states.iter().map(|x| (x[2] - ic[2]).abs()).fold(0.0, f64::max);
    let section = SectionSpec::angle(0.0);
    let rec = poincare_section(&m, &near_xi1(0.01, 0.0), &section, 256, Method::ImplicitMidpoint { dt: 1e-3 }, 1e5)
        .unwrap();
    let ev = rec.evidence.unwrap();
    let rho = rotation_number(&rec).unwrap().estimate;
    let oracle = linearized_rotation_number(&m, &near_xi1(0.0, 0.0), TAU, &section).unwrap();
    let ok = w_drift < 1e-10
        && ev.class == TorusClass::Curve
        && ev.residual < 1e-6
        && (rho - 0.41421).abs() < 1e-3
        && (oracle - 0.41421).abs() < 1e-3;
    check(
        ok,
        format!(
            "max |W - W0| {w_drift:.1e}, {:?} residual {:.1e}, rotation {rho:.7} (r = 0.01), variational oracle {oracle:.10}",
            ev.class, ev.residual
        ),
    )
}

fn c8_tori() -> Outcome {
    let grid = ExperimentGrid {
        betas: vec![1e-3, 1e-2],
        ..ExperimentGrid::default()
    };
    let cells = run_grid(&HamiltonianModel::rescaled(0.0), &grid);
    let mut ok = true;
    let mut parts = Vec::new();
    for &beta in &grid.betas {
        let mine: Vec<_> = cells.iter().filter(|c| c.beta == beta).collect();
        let curves: Vec<_> = mine
            .iter()
            .filter(|c| c.evidence.is_some_and(|e| e.class == TorusClass::Curve))
            .collect();
        let frac = curves.len() as f64 / mine.len() as f64;
        let tail = curves.iter().map(|c| c.temperature_tail).fold(0.0, f64::max);
        let (lo, hi) = curves
            .iter()
            .map(|c| c.temperature_average)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), x| (l.min(x), h.max(x)));
        // orbit dependence: averages differ by more than their own tails
        let spread = hi - lo;
        ok &= frac >= 0.8 && tail < 1e-3 && spread > 10.0 * tail;
        parts.push(format!(
            "beta={beta:e}: {}/{} curves, max tail {tail:.1e}, averages in [{lo:.5}, {hi:.5}]",
            curves.len(),
            mine.len()
        ));
    }
    check(ok, parts.join("; "))
}

fn c9_drift() -> Outcome {
    let m = HamiltonianModel::rescaled(1e-2);
    let ic = near_xi1(0.05, 0.0);
    let drift = |dt: f64| {
        integrate_every(&m, &ic, 1e3, Method::ImplicitMidpoint { dt }, 10_000)
            .unwrap()
            .max_energy_drift
    };
    let (d1, d2) = (drift(1e-3), drift(5e-4));
    let ratio = d1 / d2;
    check(
        d1 < 1e-6 && (3.5..=4.5).contains(&ratio),
        format!("drift {d1:.2e} at dt=1e-3, {d2:.2e} at dt=5e-4, ratio {ratio:.2}"),
    )
}

fn run_bin(args: &[&str], dir: &std::path::Path) -> (i32, Vec<u8>) {
    let out = Command::new(env!("CARGO_BIN_EXE_nosetori"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap();
    (out.status.code().unwrap_or(-1), out.stdout)
}

fn c10_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (c1, v1) = run_bin(&["verify", "--no-timestamp", "--discrepancies", "d1.md"], d);
    let (c2, v2) = run_bin(&["verify", "--no-timestamp", "--discrepancies", "d2.md"], d);
    let read = |n: &str| std::fs::read(d.join(n)).unwrap();
    let verify_same = c1 == 0 && c2 == 0 && v1 == v2 && read("d1.md") == read("d2.md");
    let poincare = |out: &str| {
        run_bin(
            &[
                "poincare", "--no-timestamp", "--n-points", "64", "--out", out, "--summary", &format!("{out}.json"),
            ],
            d,
        )
    };
    let (p1, _) = poincare("p1.csv");
    let (p2, _) = poincare("p2.csv");
    let poincare_same =
        p1 == 0 && p2 == 0 && read("p1.csv") == read("p2.csv") && read("p1.csv.json") == read("p2.csv.json");
    check(
        verify_same && poincare_same,
        format!("verify identical: {verify_same}, poincare identical: {poincare_same}"),
    )
}

#[test]
fn acceptance() {
    let criteria: [Criterion; 10] = [
        ("1", "exact Nose normal form", c1_nose_normal_form),
        ("2", "exact G0 expansion", c2_expansion),
        ("3", "Nose-like relations", c3_nose_like),
        ("4", "Hessian series and KAM predicate", c4_hessian),
        ("5", "oscillator chain", c5_oscillator),
        ("6", "symplecticity of built-in maps", c6_symplectic),
        ("7", "integrable baseline at beta=0", c7_integrable),
        ("8", "high-temperature tori", c8_tori),
        ("9", "energy drift and order", c9_drift),
        ("10", "determinism", c10_determinism),
    ];
    let mut failed = Vec::new();
    writeln!(std::io::stdout()).unwrap();
    for (id, name, f) in criteria {
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            check(false, format!("panicked: {msg}"))
        });
        let status = if outcome.passed { "PASS" } else { "FAIL" };
        // through the handle, not println!, so the table survives output capture
        let mut out = std::io::stdout().lock();
        writeln!(out, "{status} {id} {name} [{}] {}", secs(t.elapsed()), outcome.detail).unwrap();
        if !outcome.passed {
            failed.push(id);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}

fn secs(d: Duration) -> String {
    format!("{:.2}s", d.as_secs_f64())
}
