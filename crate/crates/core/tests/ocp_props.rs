use geocon::fields::{pushforward_along_flow, TangentVector};
use geocon::ocp::{
    build_control_affine, extend_system, hamilton_rhs, hamiltonian, integrate_biextremal, parse_cost,
    search_normal_lift, ControlAffineSystem, ControlBox, ControlSchedule, Dynamics, MomentumGrid, SystemSpec,
    Trajectory,
};
use geocon::{Expr, VectorField};
use proptest::prelude::*;

fn chart() -> Vec<String> {
    vec!["x".into(), "y".into()]
}

fn quadratic(c: f64) -> impl Strategy<Value = VectorField> {
    prop::collection::vec(-c..c, 12).prop_map(|k| {
        let (x, y) = (Expr::var("x"), Expr::var("y"));
        let basis = [
            Expr::one(),
            x.clone(),
            y.clone(),
            Expr::pow(x.clone(), 2),
            Expr::mul(x, y.clone()),
            Expr::pow(y, 2),
        ];
        let comps = k
            .chunks(6)
            .map(|row| Expr::sum(row.iter().zip(&basis).map(|(&a, m)| Expr::scaled(a, m.clone()))))
            .collect();
        VectorField::new(&chart(), comps).unwrap()
    })
}

fn system() -> impl Strategy<Value = ControlAffineSystem> {
    (quadratic(0.5), quadratic(0.5), quadratic(0.5))
        .prop_map(|(d, a, b)| ControlAffineSystem::new(d, vec![a, b], ControlBox::unbounded(2)).unwrap())
}

fn vec2(r: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-r..r, 2)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| p * q).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn hamiltonian_is_conserved(sys in system(), x0 in vec2(0.5), p0 in vec2(1.0), u in vec2(1.0)) {
        prop_assume!(p0.iter().any(|p| p.abs() > 1e-3));
        let dynamics = Dynamics::Reduced(sys);
        let schedule = ControlSchedule::constant(u.clone());
        let bx = integrate_biextremal(&x0, &p0, &schedule, &dynamics, (0.0, 0.5), 1e-3).unwrap();
        let h0 = hamiltonian(&p0, &x0, &u, &dynamics).unwrap();
        for s in &bx.samples {
            let h = hamiltonian(&s.lambda, &s.x, &s.control, &dynamics).unwrap();
            prop_assert!((h - h0).abs() <= 1e-8 * (1.0 + h0.abs()), "{h} vs {h0}");
        }
    }

    #[test]
    fn cost_multiplier_is_constant(sys in system(), x0 in vec2(0.5), p in vec2(1.0), p0 in -1.0..0.0f64, u in vec2(1.0)) {
        let cost = parse_cost(&sys, "(u1^2 + u2^2) / 2 + x^2").unwrap();
        let ext = extend_system(&sys, &cost).unwrap();
        let dynamics = Dynamics::Extended(ext);
        let xhat = vec![0.0, x0[0], x0[1]];
        let lambda = vec![p0, p[0], p[1]];
        let (_, ldot) = hamilton_rhs(&xhat, &lambda, &u, &dynamics).unwrap();
        prop_assert_eq!(ldot[0], 0.0);
        let bx = integrate_biextremal(&xhat, &lambda, &ControlSchedule::constant(u), &dynamics, (0.0, 0.5), 1e-3).unwrap();
        for s in &bx.samples {
            prop_assert_eq!(s.lambda[0], p0);
        }
    }

    #[test]
    fn adjoint_pairs_constantly_with_linearization(sys in system(), x0 in vec2(0.5), p0 in vec2(1.0), w0 in vec2(1.0), u in vec2(1.0)) {
        prop_assume!(p0.iter().any(|p| p.abs() > 1e-3));
        let dynamics = Dynamics::Reduced(sys.clone());
        let bx = integrate_biextremal(&x0, &p0, &ControlSchedule::constant(u.clone()), &dynamics, (0.0, 0.5), 1e-3).unwrap();
        let slice = sys.slice(&u).unwrap();
        let start = dot(&p0, &w0);
        for t in [0.1, 0.25, 0.5] {
            let (_, lambda) = bx.state_at(t, &dynamics).unwrap();
            let w = pushforward_along_flow(&slice, t, &TangentVector::new(x0.clone(), w0.clone()), 1e-3).unwrap();
            let now = dot(&lambda, &w.components);
            prop_assert!((now - start).abs() <= 1e-7 * (1.0 + start.abs()), "t = {t}: {now} vs {start}");
        }
    }

    #[test]
    fn driftless_annihilating_covector_has_zero_hamiltonian(a in quadratic(0.5), x0 in vec2(0.5), u1 in -1.0..1.0f64) {
        // a single input on the plane: λ ⟂ X₁(x₀) annihilates the only input
        let sys = ControlAffineSystem::new(VectorField::zero(&chart()), vec![a.clone()], ControlBox::unbounded(1)).unwrap();
        let v = a.eval(&x0).unwrap();
        prop_assume!(v.iter().any(|c| c.abs() > 1e-3));
        let p0 = vec![-v[1], v[0]];
        let dynamics = Dynamics::Reduced(sys);
        let bx = integrate_biextremal(&x0, &p0, &ControlSchedule::constant(vec![u1]), &dynamics, (0.0, 0.5), 1e-3).unwrap();
        for s in &bx.samples {
            prop_assert!(hamiltonian(&s.lambda, &s.x, &s.control, &dynamics).unwrap().abs() <= 1e-9);
        }
    }
}

fn martinet() -> ControlAffineSystem {
    let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
    build_control_affine(&SystemSpec {
        coordinates: s(&["x", "y", "z"]),
        inputs: vec![s(&["1", "0", "0"]), s(&["0", "1", "x^2"])],
        ..Default::default()
    })
    .unwrap()
}

#[test]
fn martinet_straight_line_has_a_normal_lift_off_the_default_grid() {
    let sys = martinet();
    let ext = extend_system(&sys, &parse_cost(&sys, "(u1^2 + u2^2) / 2").unwrap()).unwrap();
    let reference = Trajectory::integrate(
        &sys,
        &[0.0; 3],
        &ControlSchedule::constant(vec![0.0, 1.0]),
        (0.0, 1.0),
        1e-3,
    )
    .unwrap();

    // p = (0, 1, pz) satisfies the normal constraint for every pz
    let fine = MomentumGrid {
        per_axis: 3,
        radius: 1.5,
        tolerance: 1e-6,
    };
    let hit = search_normal_lift(&ext, &reference, &fine).unwrap();
    assert_eq!(
        hit.found,
        vec![vec![0.0, 1.0, -1.0], vec![0.0, 1.0, 0.0], vec![0.0, 1.0, 1.0]]
    );

    // cell centres of the default grid never have p_x = 0 exactly
    let coarse = search_normal_lift(&ext, &reference, &MomentumGrid::with_budget(3, 1000)).unwrap();
    assert_eq!(coarse.tried, 1000);
    assert!(coarse.found.is_empty());
}
