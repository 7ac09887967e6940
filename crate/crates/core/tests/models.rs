use nosetori::averaging::g_kappa_expr;
use nosetori::canonical::nose_rescaling;
use nosetori::expr::{num, var, Expr};
use nosetori::models::*;
use nosetori::simulate::{integrate, Method};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_state(kind: ModelKind, rng: &mut ChaCha8Rng) -> Vec<f64> {
    match kind {
        ModelKind::NoseFull | ModelKind::RescaledFBeta | ModelKind::NoseLike => vec![
            rng.gen_range(-3.0..3.0),
            rng.gen_range(0.5..2.0),
            rng.gen_range(-2.0..2.0),
            rng.gen_range(-1.0..1.0),
        ],
        ModelKind::OscillatorGKappa => vec![
            rng.gen_range(-0.5..0.5),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ],
        ModelKind::NoseHooverReduced => vec![
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ],
    }
}

fn hamiltonian_models() -> Vec<HamiltonianModel> {
    let mut full = HamiltonianModel::new(ModelKind::NoseFull);
    full.mass = 2.0;
    full.temperature = 3.0;
    full.potential = TrigPotential {
        cos: vec![1.0, 0.3],
        sin: vec![0.0, -0.2],
    };
    let mut like = HamiltonianModel::rescaled(0.05);
    like.kind = ModelKind::NoseLike;
    like.omega_jet = OmegaJet { a: 0.4, b: -0.3 };
    let mut osc = HamiltonianModel::new(ModelKind::OscillatorGKappa);
    osc.kappa = 0.3;
    let mut heavy = HamiltonianModel::rescaled(0.2);
    heavy.mass = 3.0;
    vec![full, HamiltonianModel::rescaled(0.01), heavy, like, osc]
}

/// Five-point central difference of `f` at `s = 0`.
fn slope(f: impl Fn(f64) -> f64, h: f64) -> f64 {
    (-f(2.0 * h) + 8.0 * f(h) - 8.0 * f(-h) + f(-2.0 * h)) / (12.0 * h)
}

#[test]
fn rescaled_value_on_the_unit_orbit() {
    let m = HamiltonianModel::new(ModelKind::RescaledFBeta);
    assert_eq!(m.evaluate(&[0.0, 1.0, 1.0, 0.0]).unwrap(), 0.5);
    let osc = HamiltonianModel::new(ModelKind::OscillatorGKappa);
    assert_eq!(osc.evaluate(&[0.0; 4]).unwrap(), 0.0);
}

#[test]
fn full_thermostat_is_the_rescaled_one_times_t() {
    let (mass, temp) = (2.0, 3.0);
    let mut full = HamiltonianModel::new(ModelKind::NoseFull);
    full.mass = mass;
    full.temperature = temp;
    full.potential = TrigPotential::cosine();
    // the potential enters F_beta as beta V with beta = 1/T
    let mut scaled = HamiltonianModel::rescaled(1.0 / temp);
    scaled.mass = mass;
    let map = nose_rescaling(mass, temp).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..20 {
        let x = random_state(ModelKind::RescaledFBeta, &mut rng);
        let old = map.apply(&x).unwrap();
        let lhs = full.evaluate(&old).unwrap();
        let rhs = temp * scaled.evaluate(&x).unwrap() - 0.5 * temp * (mass * temp).ln();
        assert!((lhs - rhs).abs() < 1e-12 * (1.0 + lhs.abs()), "{lhs} vs {rhs}");
    }
}

#[test]
fn oscillator_matches_the_pulled_back_hamiltonian() {
    let kappa = 0.3;
    let mut m = HamiltonianModel::new(ModelKind::OscillatorGKappa);
    m.kappa = kappa;
    let g = g_kappa_expr();
    let names: Vec<String> = ["u", "v", "U", "V", "kappa"].iter().map(|s| s.to_string()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let mut x = random_state(ModelKind::OscillatorGKappa, &mut rng);
        let direct = m.evaluate(&x).unwrap();
        x.push(kappa);
        let pulled = g.eval_at(&names, &x).unwrap();
        assert!((direct - pulled).abs() < 1e-12, "{direct} vs {pulled}");
    }
}

#[test]
fn vector_fields_are_symplectic_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for m in hamiltonian_models() {
        for _ in 0..100 {
            let x = random_state(m.kind, &mut rng);
            let f = m.vector_field(&x).unwrap();
            let norm = f.iter().map(|c| c * c).sum::<f64>().sqrt();
            let along = |s: f64| {
                let y: Vec<f64> = x.iter().zip(&f).map(|(a, b)| a + s * b / norm).collect();
                m.evaluate(&y).unwrap()
            };
            let d = slope(along, 1e-3);
            assert!(d.abs() < 1e-10, "{:?}: dH along X = {d}", m.kind);
            // and the field is J grad H, component by component
            let g = m.gradient(&x).unwrap();
            for (i, gi) in g.iter().enumerate() {
                let partial = slope(
                    |s| {
                        let mut y = x.clone();
                        y[i] += s;
                        m.evaluate(&y).unwrap()
                    },
                    1e-3,
                );
                assert!((partial - gi).abs() < 1e-9 * (1.0 + gi.abs()), "{:?} d/dx{i}", m.kind);
            }
        }
    }
}

#[test]
fn nose_hoover_right_hand_side() {
    let mut m = HamiltonianModel::new(ModelKind::NoseHooverReduced);
    m.temperature = 4.0;
    m.mass = 2.0;
    assert_eq!(m.vector_field(&[0.0, 2.0, 0.0]).unwrap(), vec![2.0, 0.0, 0.0]);
    assert!(m.gradient(&[0.0, 2.0, 0.0]).is_err());
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let x = random_state(ModelKind::NoseHooverReduced, &mut rng);
        // divergence by differences
        let mut div = 0.0;
        for i in 0..3 {
            div += slope(
                |s| {
                    let mut y = x.clone();
                    y[i] += s;
                    m.vector_field(&y).unwrap()[i]
                },
                1e-3,
            );
        }
        assert!((div - m.divergence(&x).unwrap()).abs() < 1e-10);
        assert!((div + x[2]).abs() < 1e-10);
        // the Gibbs density exp(-E/T) is stationary: div(rho f) = 0
        let flux = |y: &[f64], i: usize| -> f64 {
            let rho = (-m.evaluate(y).unwrap() / m.temperature).exp();
            rho * m.vector_field(y).unwrap()[i]
        };
        let mut total = 0.0;
        for i in 0..3 {
            total += slope(
                |s| {
                    let mut y = x.clone();
                    y[i] += s;
                    flux(&y, i)
                },
                1e-3,
            );
        }
        assert!(total.abs() < 1e-10, "div(rho f) = {total}");
    }
}

#[test]
fn angular_momentum_is_cyclic_without_potential() {
    let m = HamiltonianModel::rescaled(0.0);
    let f = m.vector_field(&[0.3, 1.2, 0.8, -0.1]).unwrap();
    assert_eq!(f[2], 0.0);
    for method in [Method::ImplicitMidpoint { dt: 1e-2 }, Method::EmbeddedRk { tol: 1e-10 }] {
        let tr = integrate(&m, &[0.0, 1.1, 0.9, 0.05], 1000.0, method).unwrap();
        let drift = tr.states.iter().map(|x| (x[2] - 0.9).abs()).fold(0.0, f64::max);
        assert!(drift < 1e-10, "{method:?}: {drift}");
    }
}

#[test]
fn nose_like_equilibrium_is_independent_of_sigma() {
    let mut m = HamiltonianModel::rescaled(0.0);
    m.kind = ModelKind::NoseLike;
    for (a, b) in [(0.0, 0.0), (0.5, -0.2), (2.0, 1.0)] {
        m.omega_jet = OmegaJet { a, b };
        for sigma in [0.7, 1.0, 1.3] {
            assert!((m.equilibrium_fibre_derivative(sigma).unwrap() - 1.0).abs() < 1e-14);
            // (W / sigma)^2 = 1 with Sigma = 0 is an equilibrium of (sigma, Sigma)
            let f = m.vector_field(&[0.2, sigma, sigma, 0.0]).unwrap();
            assert!(f[1].abs() < 1e-14 && f[3].abs() < 1e-14);
        }
    }
    assert!(HamiltonianModel::new(ModelKind::OscillatorGKappa).equilibrium_fibre_derivative(1.0).is_err());
}

fn samples() -> Vec<f64> {
    vec![0.3, 0.7, 1.0, 1.6, 2.5]
}

#[test]
fn classical_nose_thermostat_normal_form() {
    let mass = 2.0;
    let spec = ThermostatSpec {
        n: Expr::Real(0.5 / mass) * var("p_s").powi(2) + Expr::Real(1.5) * var("s").ln(),
        u: var("s"),
        u_inverse: var("u"),
        samples: samples(),
    };
    let nf = thermostat_normal_form_check(&spec).unwrap();
    assert!((nf.nkt - 1.5).abs() < 1e-12);
    for u in samples() {
        let omega = nf.omega.eval_at(&["u".to_string()], &[u]).unwrap();
        assert!((omega - 1.0 / mass).abs() < 1e-12);
    }
    let h = nf.hamiltonian();
    let v = h.eval_at(&["u".to_string(), "p_u".to_string()], &[2.0, 3.0]).unwrap();
    assert!((v - (0.5 * 0.5 * 9.0 + 1.5 * 2f64.ln())).abs() < 1e-12);
}

#[test]
fn squared_rescaling_gives_omega_4u() {
    // u = s^2, A = 1: N = p_s^2 / 2 + T ln(s^2)
    let spec = ThermostatSpec {
        n: num(1) / num(2) * var("p_s").powi(2) + var("s").powi(2).ln(),
        u: var("s").powi(2),
        u_inverse: var("u").sqrt(),
        samples: samples(),
    };
    let nf = thermostat_normal_form_check(&spec).unwrap();
    assert!((nf.nkt - 1.0).abs() < 1e-12);
    for u in [0.2, 1.0, 3.0] {
        let omega = nf.omega.eval_at(&["u".to_string()], &[u]).unwrap();
        assert!((omega - 4.0 * u).abs() < 1e-12, "{omega}");
    }
}

#[test]
fn thermostat_hypotheses_are_enforced() {
    let base = |n: Expr, u: Expr| ThermostatSpec {
        n,
        u,
        u_inverse: var("u"),
        samples: samples(),
    };
    // not increasing in p_s
    assert!(thermostat_normal_form_check(&base(var("s").ln(), var("s"))).is_err());
    // quartic in p_s
    assert!(thermostat_normal_form_check(&base(var("p_s").powi(4) + var("s").ln(), var("s"))).is_err());
    // u decreasing
    assert!(thermostat_normal_form_check(&base(var("p_s").powi(2) - var("s").ln(), num(0) - var("s"))).is_err());
    // the equilibrium would depend on s
    assert!(thermostat_normal_form_check(&base(var("p_s").powi(2) + var("s").ln() + var("s"), var("s"))).is_err());
}

#[test]
fn temperature_observable_values() {
    let full = HamiltonianModel::new(ModelKind::NoseFull);
    assert_eq!(full.temperature_observable(&[0.0, 1.0, 2.0, 0.0]).unwrap(), 4.0);
    let mut m = HamiltonianModel::rescaled(0.0);
    m.temperature = 5.0;
    assert_eq!(m.temperature_observable(&[0.0, 1.0, 1.0, 0.0]).unwrap(), 5.0);
    for sigma in [0.5, 1.0, 2.0] {
        let t = m.temperature_observable(&[0.3, sigma, -sigma, 0.0]).unwrap();
        assert!((t - 5.0).abs() < 1e-12);
    }
}

#[test]
fn invalid_parameters_are_rejected() {
    let mut m = HamiltonianModel::rescaled(0.0);
    m.mass = 0.0;
    assert!(m.validate().is_err());
    let mut m = HamiltonianModel::rescaled(0.0);
    m.beta = -1.0;
    assert!(m.validate().is_err());
    assert!((coupling(4.0, 1.0, 1.0) - 0.5).abs() < 1e-15);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn omega_jet_matches_its_definition(a in -3.0f64..3.0, b in -3.0f64..3.0, sigma in 0.1f64..3.0) {
        let j = OmegaJet { a, b };
        let d = sigma - 1.0;
        prop_assert!((j.value(sigma) - (1.0 + a * d + b * d * d / 2.0)).abs() < 1e-12);
        prop_assert!((j.derivative(sigma) - slope(|s| j.value(sigma + s), 1e-3)).abs() < 1e-9);
    }

    #[test]
    fn potential_derivative(c1 in -2.0f64..2.0, c2 in -2.0f64..2.0, s1 in -2.0f64..2.0, q in -7.0f64..7.0) {
        let v = TrigPotential { cos: vec![c1, c2], sin: vec![s1] };
        prop_assert!((v.derivative(q) - slope(|s| v.value(q + s), 1e-3)).abs() < 1e-9);
        prop_assert!((v.value(q) - v.value(q + std::f64::consts::TAU)).abs() < 1e-12);
    }
}
