use geocon::expr::parse_unchecked;
use geocon::scalar::{Dual1, Dual2};
use geocon::{EvalEnv, Expr};
use proptest::prelude::*;

fn polynomial() -> impl Strategy<Value = Expr> {
    let leaf = prop_oneof![
        Just(Expr::var("x")),
        Just(Expr::var("y")),
        (-2.0..2.0f64).prop_map(Expr::constant),
    ];
    leaf.prop_recursive(6, 48, 2, |inner| {
        prop_oneof![
            (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::add(a, b)),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::sub(a, b)),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::mul(a, b)),
            inner.clone().prop_map(Expr::neg),
            (inner, 0..3i32).prop_map(|(a, n)| Expr::pow(a, n)),
        ]
    })
}

fn smooth() -> impl Strategy<Value = Expr> {
    polynomial().prop_recursive(2, 64, 2, |inner| {
        prop_oneof![
            inner.clone().prop_map(|a| Expr::unary(geocon::expr::UnaryOp::Sin, a)),
            inner.clone().prop_map(|a| Expr::unary(geocon::expr::UnaryOp::Cos, a)),
            (inner.clone(), inner).prop_map(|(a, b)| Expr::mul(a, b)),
        ]
    })
}

fn at(e: &Expr, x: f64, y: f64) -> f64 {
    e.evaluate(&EvalEnv::new().bind("x", x).bind("y", y)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn symbolic_derivative_matches_dual(e in polynomial(), x in -1.5..1.5f64, y in -1.5..1.5f64) {
        let symbolic = at(&e.differentiate("x"), x, y);
        let env = EvalEnv::new().bind("x", Dual1::new(x, 1.0)).bind("y", Dual1::constant(y));
        let dual = e.evaluate(&env).unwrap().du;
        prop_assert!((symbolic - dual).abs() <= 1e-10 * (1.0 + dual.abs()), "{e}: {symbolic} vs {dual}");
    }

    #[test]
    fn render_parse_round_trip(e in smooth(), x in -1.5..1.5f64, y in -1.5..1.5f64) {
        let text = e.to_string();
        let back = parse_unchecked(&text).unwrap();
        prop_assert_eq!(back.to_string(), text.clone());
        let (a, b) = (at(&e, x, y), at(&back, x, y));
        prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()), "{text}: {a} vs {b}");
    }

    #[test]
    fn nested_duals_give_second_derivative(x in -3.0..3.0f64) {
        let cube = Expr::pow(Expr::var("x"), 3);
        let seed = Dual2::new(Dual1::new(x, 1.0), Dual1::new(1.0, 0.0));
        let v = cube.evaluate(&EvalEnv::new().bind("x", seed)).unwrap();
        prop_assert!((v.du.du - 6.0 * x).abs() <= 1e-12 * (1.0 + x.abs()));
        prop_assert!((v.re.du - 3.0 * x * x).abs() <= 1e-12 * (1.0 + x * x));
    }
}
