use geocon::ocp::{
    build_control_affine, integrate_biextremal, ControlAffineSystem, ControlBox, ControlSchedule, Dynamics, SystemSpec,
    Trajectory,
};
use geocon::pca::{annihilator_at, run_algorithm, BracketWith, Origin, PcaOptions};
use geocon::variations::{bracket_variation, JetOptions};
use geocon::{lie_bracket, Expr, VectorField};
use proptest::prelude::*;

fn chart() -> Vec<String> {
    vec!["x".into(), "y".into(), "z".into()]
}

/// Fields on R³ with affine-plus-one-quadratic components.
fn field() -> impl Strategy<Value = VectorField> {
    prop::collection::vec(-1.0..1.0f64, 15).prop_map(|k| {
        let (x, y, z) = (Expr::var("x"), Expr::var("y"), Expr::var("z"));
        let basis = [Expr::one(), x.clone(), y, z, Expr::pow(x, 2)];
        let comps = k
            .chunks(5)
            .map(|row| Expr::sum(row.iter().zip(&basis).map(|(&a, m)| Expr::scaled(a, m.clone()))))
            .collect();
        VectorField::new(&chart(), comps).unwrap()
    })
}

fn point() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-0.5..0.5f64, 3)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| p * q).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn driftless(a: VectorField, b: VectorField) -> ControlAffineSystem {
    ControlAffineSystem::new(VectorField::zero(&chart()), vec![a, b], ControlBox::unbounded(2)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn pairing_derivative_is_bracket_pairing(
        a in field(), b in field(), z in field(), x0 in point(), p0 in point(), u in prop::collection::vec(-1.0..1.0f64, 2),
    ) {
        prop_assume!(norm(&p0) > 1e-2);
        let sys = driftless(a, b);
        let slice = sys.slice(&u).unwrap();
        let bracket = lie_bracket(&slice, &z).unwrap();
        let dynamics = Dynamics::Reduced(sys);
        let bx = integrate_biextremal(&x0, &p0, &ControlSchedule::constant(u), &dynamics, (0.0, 0.5), 1e-3).unwrap();
        let pairing = |t: f64| {
            let (x, l) = bx.state_at(t, &dynamics).unwrap();
            dot(&l, &z.eval(&x).unwrap())
        };
        let (t, h) = (0.25, 0.01);
        let stencil = (pairing(t - 2.0 * h) - 8.0 * pairing(t - h) + 8.0 * pairing(t + h) - pairing(t + 2.0 * h)) / (12.0 * h);
        let (x, l) = bx.state_at(t, &dynamics).unwrap();
        let exact = dot(&l, &bracket.eval(&x).unwrap());
        let scale = norm(&l) * norm(&bracket.eval(&x).unwrap());
        prop_assert!((stencil - exact).abs() <= 1e-6 * (1.0 + scale), "{stencil} vs {exact}");
    }

    #[test]
    fn ladder_spans_are_nested(a in field(), b in field(), x0 in point(), u in prop::collection::vec(-1.0..1.0f64, 2)) {
        let sys = driftless(a, b);
        let reference = Trajectory::integrate(&sys, &x0, &ControlSchedule::constant(u), (0.0, 0.5), 1e-3).unwrap();
        let opts = PcaOptions { max_levels: 3, ..Default::default() };
        let ladder = run_algorithm(&sys, &reference, &opts).unwrap();
        for w in ladder.levels.windows(2) {
            for (lo, hi) in w[0].span_dims.iter().zip(&w[1].span_dims) {
                prop_assert!(lo <= hi);
                prop_assert!(*hi <= 3);
            }
        }
    }

    #[test]
    fn level_one_generators_are_commutator_variations(a in field(), b in field(), x0 in point(), u in prop::collection::vec(-1.0..1.0f64, 2)) {
        let sys = driftless(a, b);
        let reference = Trajectory::integrate(&sys, &x0, &ControlSchedule::constant(u), (0.0, 0.5), 1e-3).unwrap();
        let opts = PcaOptions { max_levels: 1, ..Default::default() };
        let ladder = run_algorithm(&sys, &reference, &opts).unwrap();
        prop_assume!(ladder.levels.len() > 1);
        let parents = &ladder.levels[0].generators;
        for g in &ladder.levels[1].generators {
            let Origin::Bracket { with: BracketWith::Input(d), parent } = g.origin else {
                panic!("driftless ladders bracket with inputs only: {}", g.origin);
            };
            let field = g.field.eval(&x0).unwrap();
            prop_assume!(norm(&field) > 1e-2);
            let pv = bracket_variation(&sys.inputs()[d], &parents[parent].field, &x0, 0.0, &JetOptions::default()).unwrap();
            let jet = &pv.vector.components;
            prop_assert!(dot(jet, &field) / (norm(jet) * norm(&field)) >= 1.0 - 1e-6);
        }
    }
}

fn sys(inputs: &[&[&str]]) -> ControlAffineSystem {
    let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
    build_control_affine(&SystemSpec {
        coordinates: s(&["x", "y", "z"]),
        inputs: inputs.iter().map(|f| s(f)).collect(),
        ..Default::default()
    })
    .unwrap()
}

#[test]
fn annihilator_lift_keeps_every_constraint() {
    let martinet = sys(&[&["1", "0", "0"], &["0", "1", "x^2"]]);
    let schedule = ControlSchedule::constant(vec![0.0, 1.0]);
    let reference = Trajectory::integrate(&martinet, &[0.0; 3], &schedule, (0.0, 1.0), 1e-3).unwrap();
    let ladder = run_algorithm(&martinet, &reference, &PcaOptions::default()).unwrap();
    let ann = annihilator_at(&[0.0; 3], &ladder).unwrap();
    assert_eq!(ann.len(), 1);

    let dynamics = Dynamics::Reduced(martinet.clone());
    let bx = integrate_biextremal(&[0.0; 3], &ann[0].components, &schedule, &dynamics, (0.0, 1.0), 1e-3).unwrap();
    for s in bx.samples.iter().step_by(50) {
        for g in ladder.constraint_fields() {
            let pairing = dot(&s.lambda, &g.field.eval(&s.x).unwrap());
            assert!(pairing.abs() <= 1e-7, "t = {}: {} pairs to {pairing}", s.t, g.origin);
        }
    }
}

#[test]
fn bracket_generating_system_has_trivial_annihilator() {
    let heisenberg = sys(&[&["1", "0", "-y/2"], &["0", "1", "x/2"]]);
    let schedule = ControlSchedule::constant(vec![1.0, 0.0]);
    let reference = Trajectory::integrate(&heisenberg, &[0.0; 3], &schedule, (0.0, 1.0), 1e-3).unwrap();
    let ladder = run_algorithm(&heisenberg, &reference, &PcaOptions::default()).unwrap();
    for t in [0.2, 0.6, 1.0] {
        let x = reference.state_at(&heisenberg, t).unwrap();
        assert!(annihilator_at(&x, &ladder).unwrap().is_empty());
    }
}
