//! Affine-connection control systems on `TQ`: the geodesic spray, vertical
//! lifts of input fields, and the first two generator families of the
//! bracket ladder together with their jet identities.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::expr::{parse_expression, EvalEnv, Expr, ParseError};
use crate::fields::{dot, lie_bracket, norm, FieldError, Point, VectorField};
use crate::linalg::{null_space, RANK_TOL};
use crate::ocp::{ControlAffineSystem, ControlBox, OcpError, Trajectory};
use crate::variations::{
    checked_jets, needle_recipe, EndTimeVariation, JetOptions, Recipe, RecipeKind, VariationError, BRACKET_JET_FACTOR,
};

/// Seed of the random symmetry probe.
pub const SYMMETRY_SEED: u64 = 0x6765_6f63;
/// Tolerance of the numerical symmetry probe.
pub const SYMMETRY_TOL: f64 = 1e-10;
/// Tolerance on the jet identities.
pub const JET_IDENTITY_TOL: f64 = 1e-4;
/// Tolerance on the pairing reduction.
pub const REDUCTION_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MechError {
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Ocp(#[from] OcpError),
    #[error(transparent)]
    Variation(#[from] VariationError),
    #[error("christoffel symbols must be {n}x{n}x{n}")]
    Shape { n: usize },
    #[error("christoffel symbol not symmetric in lower indices: G^{i}_{j}{k} != G^{i}_{k}{j}")]
    Asymmetric { i: usize, j: usize, k: usize },
    #[error("field lives on {found:?}, expected configuration chart {expected:?}")]
    Chart { expected: Vec<String>, found: Vec<String> },
    #[error("generator templates need a piecewise-constant reference control")]
    Schedule,
}

/// Symmetric affine connection given by its Christoffel symbols
/// `christoffel[i][j][k] = Γⁱ_{jk}(x)`.
#[derive(Clone, Debug)]
pub struct ConnectionSpec {
    coordinates: Vec<String>,
    velocities: Vec<String>,
    christoffel: Vec<Vec<Vec<Expr>>>,
}

impl ConnectionSpec {
    pub fn new(
        coordinates: Vec<String>,
        velocities: Option<Vec<String>>,
        christoffel: Vec<Vec<Vec<Expr>>>,
    ) -> Result<Self, MechError> {
        let n = coordinates.len();
        let velocities = velocities.unwrap_or_else(|| (1..=n).map(|i| format!("v{i}")).collect());
        if velocities.len() != n
            || christoffel.len() != n
            || christoffel
                .iter()
                .any(|row| row.len() != n || row.iter().any(|c| c.len() != n))
        {
            return Err(MechError::Shape { n });
        }
        for e in christoffel.iter().flatten().flatten() {
            if let Some(v) = e.free_vars().into_iter().find(|v| !coordinates.contains(v)) {
                return Err(FieldError::UnknownVariable(v).into());
            }
        }
        let spec = ConnectionSpec {
            coordinates,
            velocities,
            christoffel,
        };
        spec.check_symmetry()?;
        Ok(spec)
    }

    /// Parse `christoffel[i][j][k]` over the configuration coordinates.
    pub fn parse(
        coordinates: Vec<String>,
        velocities: Option<Vec<String>>,
        christoffel: &[Vec<Vec<String>>],
    ) -> Result<Self, MechError> {
        let names: Vec<&str> = coordinates.iter().map(String::as_str).collect();
        let exprs = christoffel
            .iter()
            .map(|a| {
                a.iter()
                    .map(|b| b.iter().map(|src| parse_expression(src, &names)).collect())
                    .collect()
            })
            .collect::<Result<Vec<Vec<Vec<Expr>>>, ParseError>>()?;
        Self::new(coordinates, velocities, exprs)
    }

    /// Flat connection in `n` dimensions on `x1…xn`.
    pub fn flat(n: usize) -> Self {
        ConnectionSpec {
            coordinates: (1..=n).map(|i| format!("x{i}")).collect(),
            velocities: (1..=n).map(|i| format!("v{i}")).collect(),
            christoffel: vec![vec![vec![Expr::zero(); n]; n]; n],
        }
    }

    pub fn n(&self) -> usize {
        self.coordinates.len()
    }

    pub fn coordinates(&self) -> &[String] {
        &self.coordinates
    }

    /// `(x1…xn, v1…vn)`.
    pub fn tq_chart(&self) -> Vec<String> {
        self.coordinates.iter().chain(&self.velocities).cloned().collect()
    }

    pub fn christoffel(&self, i: usize, j: usize, k: usize) -> &Expr {
        &self.christoffel[i][j][k]
    }

    /// Symbolic equality after folding, else agreement at ten seeded random
    /// points of `[0.5, 1.5]ⁿ`.
    fn check_symmetry(&self) -> Result<(), MechError> {
        let n = self.n();
        let mut rng = ChaCha8Rng::seed_from_u64(SYMMETRY_SEED);
        for i in 0..n {
            for j in 0..n {
                for k in j + 1..n {
                    let (a, b) = (&self.christoffel[i][j][k], &self.christoffel[i][k][j]);
                    if a == b {
                        continue;
                    }
                    let mut checked = 0;
                    let mut attempts = 0;
                    while checked < 10 {
                        attempts += 1;
                        if attempts > 1000 {
                            return Err(MechError::Asymmetric { i, j, k });
                        }
                        let env: EvalEnv<f64> = self
                            .coordinates
                            .iter()
                            .map(|c| (c.as_str(), rng.gen_range(0.5..1.5)))
                            .collect();
                        let (Ok(x), Ok(y)) = (a.evaluate(&env), b.evaluate(&env)) else {
                            continue;
                        };
                        if (x - y).abs() > SYMMETRY_TOL * (1.0 + x.abs()) {
                            return Err(MechError::Asymmetric { i, j, k });
                        }
                        checked += 1;
                    }
                }
            }
        }
        Ok(())
    }
}

/// `Z = Σ vⁱ ∂/∂xⁱ − Σ Γⁱ_{jk} vʲ vᵏ ∂/∂vⁱ`.
pub fn spray_from_christoffel(conn: &ConnectionSpec) -> VectorField {
    let n = conn.n();
    let v = |i: usize| Expr::var(&conn.velocities[i]);
    let mut comps: Vec<Expr> = (0..n).map(v).collect();
    for i in 0..n {
        let terms = (0..n).flat_map(|j| (0..n).map(move |k| (j, k)));
        let sum = Expr::sum(terms.map(|(j, k)| Expr::mul(conn.christoffel[i][j][k].clone(), Expr::mul(v(j), v(k)))));
        comps.push(Expr::neg(sum));
    }
    VectorField::new(&conn.tq_chart(), comps).expect("spray stays on the TQ chart")
}

/// `Yⱽ = (0, y(x))` on the `(x, v)` chart.
pub fn vertical_lift(conn: &ConnectionSpec, y: &VectorField) -> Result<VectorField, MechError> {
    if y.vars() != conn.coordinates() {
        return Err(MechError::Chart {
            expected: conn.coordinates.clone(),
            found: y.vars().to_vec(),
        });
    }
    let mut comps = vec![Expr::zero(); conn.n()];
    comps.extend(y.components().iter().cloned());
    Ok(VectorField::new(&conn.tq_chart(), comps)?)
}

/// `γ̇ = Z + Σ uᶜ Y_cⱽ` on `TQ`.
pub fn build_acc_system(
    conn: &ConnectionSpec,
    inputs: &[VectorField],
    control_box: Option<ControlBox>,
) -> Result<ControlAffineSystem, MechError> {
    let lifts = inputs
        .iter()
        .map(|y| vertical_lift(conn, y))
        .collect::<Result<Vec<_>, _>>()?;
    let bx = control_box.unwrap_or_else(|| ControlBox::unbounded(lifts.len()));
    Ok(ControlAffineSystem::new(spray_from_christoffel(conn), lifts, bx)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct IdentityCheck {
    pub name: String,
    pub lhs: Vec<f64>,
    pub rhs: Vec<f64>,
    pub tolerance: f64,
    pub passed: bool,
}

impl IdentityCheck {
    fn new(name: String, lhs: Vec<f64>, rhs: Vec<f64>, tol: f64) -> Self {
        let gap = norm(&lhs.iter().zip(&rhs).map(|(a, b)| a - b).collect::<Vec<_>>());
        let tolerance = tol * norm(&rhs).max(1.0);
        IdentityCheck {
            passed: lhs.len() == rhs.len() && gap <= tolerance,
            name,
            lhs,
            rhs,
            tolerance,
        }
    }
}

/// The families `𝒵₀ = {Y_cⱽ}` and `𝒵₁ = {[ξ₀, Y_cⱽ]}` with their checks.
#[derive(Clone, Debug)]
pub struct GeneratorReport {
    pub time: f64,
    pub point: Point,
    pub z0: Vec<VectorField>,
    pub z1: Vec<VectorField>,
    pub checks: Vec<IdentityCheck>,
}

impl GeneratorReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

fn commutator_recipe(xi0: &VectorField, first: VectorField, second: VectorField) -> Result<Recipe, VariationError> {
    let s = Expr::var("s");
    let back = Expr::neg(s.clone());
    let tau2 = EndTimeVariation::new(back.clone(), back, vec![s.clone(), s])?;
    Recipe::new(RecipeKind::Custom, xi0.clone(), vec![first, second], tau2)
}

/// Build `𝒵₀`, `𝒵₁` at `γ(t0)` and verify, for each input `i`:
/// the needle jets `j¹ = ±Y_iⱽ` of `ξ_{±i} = ξ₀ ± Y_iⱽ`; the commutator
/// jets `j² = ±κ[ξ₀, Y_iⱽ]` of `Φ^{ξ₀}_{−s} Φ^{ξ_{±i}}_s Φ^{ξ_{∓i}}_s Φ^{ξ₀}_{−s}`;
/// and `⟨λ, [ξ₀, Y_iⱽ]⟩ = ⟨λ, [Z, Y_iⱽ]⟩` for `λ` annihilating `𝒵₀`.
pub fn acc_generators(
    sys: &ControlAffineSystem,
    reference: &Trajectory,
    t0: f64,
    opts: &JetOptions,
) -> Result<GeneratorReport, MechError> {
    if !reference.schedule.is_piecewise_constant() {
        return Err(MechError::Schedule);
    }
    let x = reference.state_at(sys, t0)?;
    let u0 = reference.schedule.control_at(t0)?;
    let xi0 = sys.slice(&u0)?;
    let spray = sys.drift();
    let z0: Vec<VectorField> = sys.inputs().to_vec();
    let z1 = z0.iter().map(|y| lie_bracket(&xi0, y)).collect::<Result<Vec<_>, _>>()?;

    let z0_rows = z0.iter().map(|y| y.eval(&x)).collect::<Result<Vec<_>, _>>()?;
    let annihilator = null_space(&z0_rows, sys.m(), RANK_TOL);

    let mut checks = Vec::new();
    for (i, y) in z0.iter().enumerate() {
        let yx = y.eval(&x)?;
        let mut plus = u0.clone();
        plus[i] += 1.0;
        let mut minus = u0.clone();
        minus[i] -= 1.0;
        let xi_plus = sys.slice(&plus)?;
        let xi_minus = sys.slice(&minus)?;

        let j1 = checked_jets(&needle_recipe(sys, &u0, &plus, 1.0)?, &x, 1, opts)?.swap_remove(0);
        checks.push(IdentityCheck::new(
            format!("needle +{}: j1 = +Y{}^V", i + 1, i + 1),
            j1,
            yx.clone(),
            JET_IDENTITY_TOL,
        ));
        let j1 = checked_jets(&needle_recipe(sys, &u0, &minus, 1.0)?, &x, 1, opts)?.swap_remove(0);
        let neg: Vec<f64> = yx.iter().map(|v| -v).collect();
        checks.push(IdentityCheck::new(
            format!("needle -{}: j1 = -Y{}^V", i + 1, i + 1),
            j1,
            neg,
            JET_IDENTITY_TOL,
        ));

        let bracket = z1[i].eval(&x)?;
        let kb: Vec<f64> = bracket.iter().map(|v| BRACKET_JET_FACTOR * v).collect();
        let r = commutator_recipe(&xi0, xi_minus.clone(), xi_plus.clone())?;
        let j2 = checked_jets(&r, &x, 2, opts)?.swap_remove(1);
        checks.push(IdentityCheck::new(
            format!("commutator (-{i1}, +{i1}): j2 = +k[xi0, Y{i1}^V]", i1 = i + 1),
            j2,
            kb.clone(),
            JET_IDENTITY_TOL,
        ));
        let r = commutator_recipe(&xi0, xi_plus, xi_minus)?;
        let j2 = checked_jets(&r, &x, 2, opts)?.swap_remove(1);
        checks.push(IdentityCheck::new(
            format!("commutator (+{i1}, -{i1}): j2 = -k[xi0, Y{i1}^V]", i1 = i + 1),
            j2,
            kb.iter().map(|v| -v).collect(),
            JET_IDENTITY_TOL,
        ));

        let spray_bracket = lie_bracket(spray, y)?.eval(&x)?;
        let lhs: Vec<f64> = annihilator.iter().map(|l| dot(l, &bracket)).collect();
        let rhs: Vec<f64> = annihilator.iter().map(|l| dot(l, &spray_bracket)).collect();
        checks.push(IdentityCheck::new(
            format!("reduction {}: <l,[xi0,Y^V]> = <l,[Z,Y^V]>", i + 1),
            lhs,
            rhs,
            REDUCTION_TOL,
        ));
    }
    Ok(GeneratorReport {
        time: t0,
        point: x,
        z0,
        z1,
        checks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ocp::ControlSchedule;

    fn polar() -> ConnectionSpec {
        let s = |v: &str| v.to_string();
        let c = vec![
            vec![vec![s("0"), s("0")], vec![s("0"), s("-x1")]],
            vec![vec![s("0"), s("1/x1")], vec![s("1/x1"), s("0")]],
        ];
        ConnectionSpec::parse(vec![s("x1"), s("x2")], None, &c).unwrap()
    }

    fn config_field(conn: &ConnectionSpec, comps: &[&str]) -> VectorField {
        VectorField::parse(conn.coordinates(), comps).unwrap()
    }

    #[test]
    fn sprays() {
        let flat = spray_from_christoffel(&ConnectionSpec::flat(2));
        assert_eq!(flat.render(), vec!["v1", "v2", "0", "0"]);
        let one = spray_from_christoffel(&ConnectionSpec::flat(1));
        assert_eq!(one.render(), vec!["v1", "0"]);
        let z = spray_from_christoffel(&polar());
        let val = z.eval(&[2.0, 0.3, 0.5, 0.7]).unwrap();
        let expect = [0.5, 0.7, 2.0 * 0.49, -2.0 * 0.5 * 0.7 / 2.0];
        for (a, b) in val.iter().zip(expect) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn rejects_asymmetric_and_misshapen_symbols() {
        let s = |v: &str| v.to_string();
        let bad = vec![
            vec![vec![s("0"), s("x1")], vec![s("0"), s("0")]],
            vec![vec![s("0"), s("0")], vec![s("0"), s("0")]],
        ];
        assert!(matches!(
            ConnectionSpec::parse(vec![s("x1"), s("x2")], None, &bad),
            Err(MechError::Asymmetric { .. })
        ));
        // equal but written differently
        let ok = vec![
            vec![vec![s("0"), s("x1*x2")], vec![s("x2*x1"), s("0")]],
            vec![vec![s("0"), s("0")], vec![s("0"), s("0")]],
        ];
        assert!(ConnectionSpec::parse(vec![s("x1"), s("x2")], None, &ok).is_ok());
        assert!(matches!(
            ConnectionSpec::parse(vec![s("x1")], None, &[]),
            Err(MechError::Shape { .. })
        ));
    }

    #[test]
    fn lifts_and_brackets() {
        let conn = ConnectionSpec::flat(2);
        let y = vertical_lift(&conn, &config_field(&conn, &["1", "0"])).unwrap();
        assert_eq!(y.render(), vec!["0", "0", "1", "0"]);
        let y2 = vertical_lift(&conn, &config_field(&conn, &["x2", "0"])).unwrap();
        assert_eq!(y2.render(), vec!["0", "0", "x2", "0"]);
        let b = lie_bracket(&spray_from_christoffel(&conn), &y).unwrap();
        assert_eq!(b.render(), vec!["-1", "0", "0", "0"]);
        assert!(lie_bracket(&y, &y2).unwrap().is_zero());
    }

    #[test]
    fn acc_system_flows() {
        let conn = ConnectionSpec::flat(2);
        let sys = build_acc_system(&conn, &[config_field(&conn, &["1", "0"])], None).unwrap();
        assert_eq!((sys.m(), sys.k()), (4, 1));
        let free = Trajectory::integrate(
            &sys,
            &[0.0, 0.0, 1.0, 0.0],
            &ControlSchedule::constant(vec![0.0]),
            (0.0, 1.0),
            1e-3,
        )
        .unwrap();
        assert!((free.samples.last().unwrap().1[0] - 1.0).abs() < 1e-12);
        let pushed =
            Trajectory::integrate(&sys, &[0.0; 4], &ControlSchedule::constant(vec![1.0]), (0.0, 1.0), 1e-3).unwrap();
        for (t, x) in &pushed.samples {
            assert!((x[0] - t * t / 2.0).abs() < 1e-8);
        }
    }

    #[test]
    fn flat_generator_families() {
        let conn = ConnectionSpec::flat(2);
        let sys = build_acc_system(&conn, &[config_field(&conn, &["1", "0"])], None).unwrap();
        let tr = Trajectory::integrate(
            &sys,
            &[0.0, 0.0, 1.0, 0.0],
            &ControlSchedule::constant(vec![0.0]),
            (0.0, 1.0),
            1e-3,
        )
        .unwrap();
        let rep = acc_generators(&sys, &tr, 0.5, &JetOptions::default()).unwrap();
        assert_eq!(rep.z0[0].render(), vec!["0", "0", "1", "0"]);
        assert_eq!(rep.z1[0].render(), vec!["-1", "0", "0", "0"]);
        assert!(rep.passed(), "{:#?}", rep.checks);
    }

    #[test]
    fn polar_generator_families() {
        let conn = polar();
        let sys = build_acc_system(&conn, &[config_field(&conn, &["1", "0"])], None).unwrap();
        let tr = Trajectory::integrate(
            &sys,
            &[1.0, 0.0, 0.0, 1.0],
            &ControlSchedule::constant(vec![0.2]),
            (0.0, 1.0),
            1e-3,
        )
        .unwrap();
        let rep = acc_generators(&sys, &tr, 0.5, &JetOptions::default()).unwrap();
        let x = &rep.point;
        let z1 = rep.z1[0].eval(x).unwrap();
        let expect = [-1.0, 0.0, 0.0, 2.0 * x[3] / x[0]];
        for (a, b) in z1.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(rep.passed(), "{:#?}", rep.checks);
    }
}
