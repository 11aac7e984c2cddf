//! Variation curves `ν(s) = Φ^{ξ₀}_{q₂(s)} ∘ Φ^{ξ}_{τ(s)} ∘ Φ^{ξ₀}_{q₁(s)}(x)`,
//! their jets at `s = 0`, order detection, and the needle and commutator
//! templates.
//!
//! Jets are computed twice: by Richardson-extrapolated forward differences
//! on the numerical curve, and by pushing fourth-order nested dual numbers
//! through the integrator. At `s = 0` every flow time vanishes, so each
//! flow collapses to a single RK4 step whose size carries the Taylor
//! coefficients of `τ(s)`; RK4 agrees with the exact flow through fourth
//! order, which makes these jets exact up to `l = 4`.

use std::fmt;

use thiserror::Error;

use crate::expr::{parse_expression, EvalEnv, Expr, ParseError};
use crate::fields::{
    composite_flow_generic, dot, flow_generic, lie_bracket, norm, FieldError, Point, TangentVector, VectorField,
    DEFAULT_STEP,
};
use crate::ocp::{ControlAffineSystem, OcpError, Trajectory};
use crate::scalar::{Dual4, Scalar, Taylor};

/// Highest jet order examined.
pub const L_MAX: usize = 4;
/// Default base spacing of the finite-difference grid `s0·2^{-j}`.
pub const DEFAULT_S0: f64 = 0.05;
/// Relative disagreement between the two jet estimators that is tolerated.
pub const FRAGILITY_TOL: f64 = 1e-3;
/// `j²` of the commutator recipe equals this multiple of the Lie bracket.
pub const BRACKET_JET_FACTOR: f64 = 2.0;
/// Largest `s` at which `τ ≥ 0` is checked.
pub const S_MAX: f64 = 0.4;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum VariationError {
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Ocp(#[from] OcpError),
    #[error("invalid end-time variation: {0}")]
    InvalidVariation(String),
    #[error("jet estimators disagree at order {order}: finite differences {fd:?}, dual numbers {ad:?}")]
    Fragility { order: usize, fd: Vec<f64>, ad: Vec<f64> },
    #[error("estimated jet {numeric:?} does not match closed form {closed_form:?}")]
    Consistency { numeric: Vec<f64>, closed_form: Vec<f64> },
    #[error("degenerate variation: {0}")]
    Degenerate(String),
    #[error("commutator jet {numeric:?} is not {factor} x bracket {symbolic:?}")]
    Convention {
        numeric: Vec<f64>,
        symbolic: Vec<f64>,
        factor: f64,
    },
}

/// `τ₂(s) = (q₁(s), q₂(s), τ(s))` with every component vanishing at `s = 0`.
#[derive(Clone, Debug)]
pub struct EndTimeVariation {
    q1: Expr,
    q2: Expr,
    tau: Vec<Expr>,
}

impl EndTimeVariation {
    pub fn new(q1: Expr, q2: Expr, tau: Vec<Expr>) -> Result<Self, VariationError> {
        if tau.is_empty() {
            return Err(VariationError::InvalidVariation("r must be positive".into()));
        }
        for e in [&q1, &q2].into_iter().chain(&tau) {
            if let Some(v) = e.free_vars().into_iter().find(|v| v != "s") {
                return Err(VariationError::InvalidVariation(format!(
                    "component depends on '{v}', only 's' is allowed"
                )));
            }
        }
        let tv = EndTimeVariation { q1, q2, tau };
        let (q1, q2, tau) = tv.eval(&0.0)?;
        if q1.abs() > 1e-12 || q2.abs() > 1e-12 || tau.iter().any(|t| t.abs() > 1e-12) {
            return Err(VariationError::InvalidVariation(
                "all components must vanish at s = 0".into(),
            ));
        }
        for i in 0..=40 {
            let s = S_MAX * i as f64 / 40.0;
            let (_, _, tau) = tv.eval(&s)?;
            if let Some(t) = tau.iter().find(|t| **t < -1e-12) {
                return Err(VariationError::InvalidVariation(format!(
                    "tau must be nonnegative, found {t} at s = {s}"
                )));
            }
        }
        Ok(tv)
    }

    pub fn parse(q1: &str, q2: &str, tau: &[&str]) -> Result<Self, VariationError> {
        let p = |src: &str| parse_expression(src, &["s"]);
        Self::new(p(q1)?, p(q2)?, tau.iter().map(|t| p(t)).collect::<Result<_, _>>()?)
    }

    pub fn r(&self) -> usize {
        self.tau.len()
    }

    pub fn q1(&self) -> &Expr {
        &self.q1
    }

    pub fn q2(&self) -> &Expr {
        &self.q2
    }

    pub fn tau(&self) -> &[Expr] {
        &self.tau
    }

    /// `(q₁(s), q₂(s), τ(s))`.
    pub fn eval<S: Scalar>(&self, s: &S) -> Result<(S, S, Vec<S>), VariationError> {
        let env = EvalEnv::new().bind("s", s.clone());
        let ev = |e: &Expr| e.evaluate(&env).map_err(|e| VariationError::Field(e.into()));
        Ok((
            ev(&self.q1)?,
            ev(&self.q2)?,
            self.tau.iter().map(ev).collect::<Result<_, _>>()?,
        ))
    }
}

/// Which template produced a recipe.
#[derive(Clone, Debug, PartialEq)]
pub enum RecipeKind {
    Needle { u1: Vec<f64>, l1: f64 },
    Bracket { input: Option<usize> },
    Custom,
}

impl fmt::Display for RecipeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RecipeKind::Needle { u1, l1 } => write!(f, "needle u1={u1:?} l1={l1}"),
            RecipeKind::Bracket { input: Some(c) } => write!(f, "bracket [xi0, X{}]", c + 1),
            RecipeKind::Bracket { input: None } => write!(f, "bracket [xi0, Z]"),
            RecipeKind::Custom => write!(f, "custom"),
        }
    }
}

/// A `(ξ, τ₂)` recipe together with the reference field `ξ₀`.
#[derive(Clone, Debug)]
pub struct Recipe {
    pub kind: RecipeKind,
    pub xi0: VectorField,
    pub seq: Vec<VectorField>,
    pub tau2: EndTimeVariation,
}

impl Recipe {
    pub fn new(
        kind: RecipeKind,
        xi0: VectorField,
        seq: Vec<VectorField>,
        tau2: EndTimeVariation,
    ) -> Result<Self, VariationError> {
        if seq.len() != tau2.r() {
            return Err(VariationError::InvalidVariation(format!(
                "{} fields for {} end-time components",
                seq.len(),
                tau2.r()
            )));
        }
        Ok(Recipe { kind, xi0, seq, tau2 })
    }

    pub fn curve_generic<S: Scalar>(&self, x: &[f64], s: &S, step: f64) -> Result<Vec<S>, VariationError> {
        variation_curve_generic(&self.xi0, &self.seq, &self.tau2, x, s, step)
    }

    pub fn curve(&self, x: &[f64], s: f64, step: f64) -> Result<Point, VariationError> {
        variation_curve(&self.xi0, &self.seq, &self.tau2, x, s, step)
    }
}

pub fn variation_curve_generic<S: Scalar>(
    xi0: &VectorField,
    seq: &[VectorField],
    tau2: &EndTimeVariation,
    x: &[f64],
    s: &S,
    step: f64,
) -> Result<Vec<S>, VariationError> {
    if seq.len() != tau2.r() {
        return Err(VariationError::InvalidVariation("|seq| must equal r".into()));
    }
    let (q1, q2, tau) = tau2.eval(s)?;
    let x0: Vec<S> = x.iter().map(|&v| S::from_f64(v)).collect();
    let y = flow_generic(xi0, &q1, step, &x0)?;
    let y = composite_flow_generic(seq, &tau, &y, step)?;
    Ok(flow_generic(xi0, &q2, step, &y)?)
}

/// `ν(s)`: the `q₁` back-flow first, then the sequence, then the `q₂` flow.
pub fn variation_curve(
    xi0: &VectorField,
    seq: &[VectorField],
    tau2: &EndTimeVariation,
    x: &[f64],
    s: f64,
    step: f64,
) -> Result<Point, VariationError> {
    if s < 0.0 {
        return Err(VariationError::InvalidVariation(format!(
            "s must be nonnegative, got {s}"
        )));
    }
    variation_curve_generic(xi0, seq, tau2, x, &s, step)
}

/// Forward-difference estimates of `d^lν/ds^l(0)` for `l = 1..=l_max`,
/// Richardson-extrapolated over the grid `h = s0·2^{-j}`. Orders 1 and 2 use
/// `j = 0..=5`; higher orders stop at `j = 3`, where `1/h^l` starts to
/// amplify integration noise.
pub fn estimate_jets<F>(mut curve: F, l_max: usize, s0: f64) -> Result<Vec<Vec<f64>>, VariationError>
where
    F: FnMut(f64) -> Result<Point, VariationError>,
{
    if l_max == 0 || l_max > L_MAX {
        return Err(VariationError::InvalidVariation(format!(
            "l_max must be in 1..={L_MAX}"
        )));
    }
    const LEVELS: usize = 6;
    const HIGH_ORDER_LEVELS: usize = 4;
    // ν(k·h_j) for k = 0..=l_max; h_j = s0 / 2^j
    let origin = curve(0.0)?;
    let dim = origin.len();
    let mut values: Vec<Vec<Point>> = Vec::with_capacity(LEVELS);
    for j in 0..LEVELS {
        let h = s0 / f64::powi(2.0, j as i32);
        let mut row = vec![origin.clone()];
        for k in 1..=l_max {
            row.push(curve(k as f64 * h)?);
        }
        values.push(row);
    }
    let mut jets = Vec::with_capacity(l_max);
    for l in 1..=l_max {
        let levels = if l <= 2 { LEVELS } else { HIGH_ORDER_LEVELS };
        let mut jet = vec![0.0; dim];
        for (i, slot) in jet.iter_mut().enumerate() {
            let mut table: Vec<f64> = (0..levels)
                .map(|j| {
                    let h = s0 / f64::powi(2.0, j as i32);
                    let diff: f64 = (0..=l)
                        .map(|k| {
                            let sign = if (l - k) % 2 == 0 { 1.0 } else { -1.0 };
                            sign * binomial(l, k) * values[j][k][i]
                        })
                        .sum();
                    diff / h.powi(l as i32)
                })
                .collect();
            for level in 1..levels {
                let f = f64::powi(2.0, level as i32);
                table = table.windows(2).map(|w| (f * w[1] - w[0]) / (f - 1.0)).collect();
            }
            *slot = table[0];
        }
        jets.push(jet);
    }
    Ok(jets)
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Exact jets `d^lν/ds^l(0)`, `l = 1..=4`, by nested dual numbers.
pub fn jets_by_duals(recipe: &Recipe, x: &[f64], step: f64) -> Result<Vec<Vec<f64>>, VariationError> {
    let s = Dual4::variable(0.0);
    let out = recipe.curve_generic(x, &s, step)?;
    let derivs: Vec<Vec<f64>> = out.iter().map(|c| c.derivatives()).collect();
    Ok((1..=L_MAX).map(|l| derivs.iter().map(|d| d[l]).collect()).collect())
}

/// Jets `1..=up_to` by dual numbers, cross-checked against finite differences.
pub fn checked_jets(
    recipe: &Recipe,
    x: &[f64],
    up_to: usize,
    opts: &JetOptions,
) -> Result<Vec<Vec<f64>>, VariationError> {
    let ad = jets_by_duals(recipe, x, opts.step)?;
    let fd = estimate_jets(|s| recipe.curve(x, s, opts.step), up_to, opts.s0)?;
    for (l, (a, f)) in ad.iter().zip(&fd).enumerate() {
        let gap = norm(&a.iter().zip(f).map(|(p, q)| p - q).collect::<Vec<_>>());
        if gap > FRAGILITY_TOL * norm(a).max(1.0) {
            return Err(VariationError::Fragility {
                order: l + 1,
                fd: f.clone(),
                ad: a.clone(),
            });
        }
    }
    Ok(ad.into_iter().take(up_to).collect())
}

/// Settings shared by jet estimation and order detection.
#[derive(Clone, Debug, PartialEq)]
pub struct JetOptions {
    pub step: f64,
    pub s0: f64,
    pub l_max: usize,
    /// `ε_order = eps_scale · (1 + ‖x‖)`.
    pub eps_scale: f64,
}

impl Default for JetOptions {
    fn default() -> Self {
        JetOptions {
            step: DEFAULT_STEP,
            s0: DEFAULT_S0,
            l_max: L_MAX,
            eps_scale: 1e-6,
        }
    }
}

/// An infinitesimal variation `V = j^l ν(0)` at `γ(t₀)`.
#[derive(Clone, Debug)]
pub struct PerturbationVector {
    pub base: Point,
    pub time: f64,
    pub order: usize,
    pub vector: TangentVector,
    pub recipe: Recipe,
}

#[derive(Clone, Debug)]
pub enum VariationOrder {
    Finite(PerturbationVector),
    /// No nonzero jet up to `l_max`.
    Infinite,
}

impl VariationOrder {
    pub fn vector(self) -> Option<PerturbationVector> {
        match self {
            VariationOrder::Finite(v) => Some(v),
            VariationOrder::Infinite => None,
        }
    }
}

/// Smallest `l ≤ l_max` whose jet exceeds `ε_order` under both estimators.
/// The estimators are compared at every order up to the detected one.
pub fn order_and_vector(
    recipe: &Recipe,
    x: &[f64],
    t0: f64,
    opts: &JetOptions,
) -> Result<VariationOrder, VariationError> {
    let ad = jets_by_duals(recipe, x, opts.step)?;
    let fd = estimate_jets(|s| recipe.curve(x, s, opts.step), opts.l_max, opts.s0)?;
    let eps = opts.eps_scale * (1.0 + norm(x));
    for l in 1..=opts.l_max.min(L_MAX) {
        let (a, f) = (&ad[l - 1], &fd[l - 1]);
        let gap = norm(&a.iter().zip(f).map(|(p, q)| p - q).collect::<Vec<_>>());
        if gap > FRAGILITY_TOL * norm(a).max(1.0) {
            return Err(VariationError::Fragility {
                order: l,
                fd: f.clone(),
                ad: a.clone(),
            });
        }
        if norm(a) > eps && norm(f) > eps {
            return Ok(VariationOrder::Finite(PerturbationVector {
                base: x.to_vec(),
                time: t0,
                order: l,
                vector: TangentVector::new(x.to_vec(), a.clone()),
                recipe: recipe.clone(),
            }));
        }
    }
    Ok(VariationOrder::Infinite)
}

fn linear(k: f64) -> Expr {
    Expr::scaled(k, Expr::var("s"))
}

/// The needle recipe `ξ = (ξ_{u₁})`, `τ = l₁s`, `q₁ = −l₁s`, `q₂ = 0`, whose
/// first jet is `Σ_c l₁(u₁ᶜ − u_refᶜ) X_c(x)`.
pub fn needle_recipe(
    system: &ControlAffineSystem,
    u_ref: &[f64],
    u1: &[f64],
    l1: f64,
) -> Result<Recipe, VariationError> {
    if !(l1 > 0.0) || !l1.is_finite() {
        return Err(VariationError::InvalidVariation(format!(
            "l1 must be positive, got {l1}"
        )));
    }
    let tau2 = EndTimeVariation::new(linear(-l1), Expr::zero(), vec![linear(l1)])?;
    Recipe::new(
        RecipeKind::Needle { u1: u1.to_vec(), l1 },
        system.slice(u_ref)?,
        vec![system.slice(u1)?],
        tau2,
    )
}

pub fn needle_variation(
    system: &ControlAffineSystem,
    u_ref: &[f64],
    u1: &[f64],
    l1: f64,
    x: &[f64],
    t0: f64,
    opts: &JetOptions,
) -> Result<PerturbationVector, VariationError> {
    for (name, u) in [("u_ref", u_ref), ("u1", u1)] {
        if !system.control_box().contains(u) {
            return Err(VariationError::InvalidVariation(format!(
                "{name} = {u:?} is not an admissible control"
            )));
        }
    }
    let recipe = needle_recipe(system, u_ref, u1, l1)?;
    let mut closed = vec![0.0; system.m()];
    for (c, f) in system.inputs().iter().enumerate() {
        let k = l1 * (u1[c] - u_ref[c]);
        if k != 0.0 {
            for (o, v) in closed.iter_mut().zip(f.eval(x)?) {
                *o += k * v;
            }
        }
    }
    let eps = opts.eps_scale * (1.0 + norm(x));
    if norm(&closed) <= eps {
        return Err(VariationError::Degenerate(
            "needle vector vanishes; no order-1 variation".into(),
        ));
    }
    let jet = jets_by_duals(&recipe, x, opts.step)?.swap_remove(0);
    // difference on the needle duration l₁s rather than on s
    let fd = estimate_jets(|s| recipe.curve(x, s / l1, opts.step), 1, opts.s0)?
        .swap_remove(0)
        .into_iter()
        .map(|v| v * l1)
        .collect::<Vec<f64>>();
    let scale = norm(&closed).max(1.0);
    for numeric in [&jet, &fd] {
        let gap = norm(&numeric.iter().zip(&closed).map(|(a, b)| a - b).collect::<Vec<_>>());
        if gap > 1e-6 * scale {
            return Err(VariationError::Consistency {
                numeric: numeric.clone(),
                closed_form: closed,
            });
        }
    }
    Ok(PerturbationVector {
        base: x.to_vec(),
        time: t0,
        order: 1,
        vector: TangentVector::new(x.to_vec(), jet),
        recipe,
    })
}

/// The commutator recipe `(ξ₀, Z, −ξ₀, −Z)` with unit-speed times: the first
/// field acts first, and `j² = 2·[ξ₀, Z]`.
pub fn bracket_recipe(xi0: &VectorField, zj: &VectorField, input: Option<usize>) -> Result<Recipe, VariationError> {
    let s = Expr::var("s");
    let tau2 = EndTimeVariation::new(Expr::zero(), Expr::zero(), vec![s.clone(), s.clone(), s.clone(), s])?;
    Recipe::new(
        RecipeKind::Bracket { input },
        xi0.clone(),
        vec![xi0.clone(), zj.clone(), xi0.neg(), zj.neg()],
        tau2,
    )
}

pub fn bracket_variation(
    xi0: &VectorField,
    zj: &VectorField,
    x: &[f64],
    t0: f64,
    opts: &JetOptions,
) -> Result<PerturbationVector, VariationError> {
    bracket_variation_tagged(xi0, zj, None, x, t0, opts)
}

fn bracket_variation_tagged(
    xi0: &VectorField,
    zj: &VectorField,
    input: Option<usize>,
    x: &[f64],
    t0: f64,
    opts: &JetOptions,
) -> Result<PerturbationVector, VariationError> {
    let recipe = bracket_recipe(xi0, zj, input)?;
    let symbolic = lie_bracket(xi0, zj)?.eval(x)?;
    let pv = match order_and_vector(&recipe, x, t0, opts)? {
        VariationOrder::Finite(pv) if pv.order == 2 => pv,
        VariationOrder::Finite(pv) => {
            return Err(VariationError::Degenerate(format!(
                "commutator variation has order {}, not 2",
                pv.order
            )))
        }
        VariationOrder::Infinite => {
            return Err(VariationError::Degenerate(
                "commutator variation has no nonzero jet up to order 4".into(),
            ))
        }
    };
    let expected: Vec<f64> = symbolic.iter().map(|v| BRACKET_JET_FACTOR * v).collect();
    let numeric = &pv.vector.components;
    let gap = norm(&numeric.iter().zip(&expected).map(|(a, b)| a - b).collect::<Vec<_>>());
    if gap > 1e-4 * norm(&expected) || norm(&expected) == 0.0 {
        return Err(VariationError::Convention {
            numeric: numeric.clone(),
            symbolic,
            factor: BRACKET_JET_FACTOR,
        });
    }
    Ok(pv)
}

fn grid_values(lo: f64, hi: f64) -> Vec<f64> {
    match (lo.is_finite(), hi.is_finite()) {
        (false, false) => vec![-1.0, 0.0, 1.0],
        (true, true) => {
            let d = 1e-6 * (hi - lo);
            vec![lo + d, 0.5 * (lo + hi), hi - d]
        }
        (true, false) => {
            let d = 1e-6 * lo.abs().max(1.0);
            vec![lo + d, lo + 1.0, lo + 2.0]
        }
        (false, true) => {
            let d = 1e-6 * hi.abs().max(1.0);
            vec![hi - 2.0, hi - 1.0, hi - d]
        }
    }
}

fn parallel(a: &[f64], b: &[f64]) -> bool {
    let (na, nb) = (norm(a), norm(b));
    na > 0.0 && nb > 0.0 && dot(a, b) / (na * nb) >= 1.0 - 1e-12
}

/// A finite sample of infinitesimal variations at `γ(t₀)`: order-1 needles
/// over a control grid and small interior probes `u_ref ± δe_c` (the
/// control set is open), then order-2 commutators `[ξ₀, X_c]`. Degenerate
/// candidates are skipped; parallel duplicates are dropped.
pub fn sample_perturbation_set(
    system: &ControlAffineSystem,
    reference: &Trajectory,
    t0: f64,
    max_order: usize,
    budget: usize,
    opts: &JetOptions,
) -> Result<Vec<PerturbationVector>, VariationError> {
    if !reference.contains_time(t0) {
        return Err(VariationError::InvalidVariation(format!(
            "t0 = {t0} outside the reference interval"
        )));
    }
    let x = reference.state_at(system, t0)?;
    let u_ref = reference.schedule.control_at(t0)?;
    let xi0 = system.slice(&u_ref)?;
    let k = system.k();
    let bx = system.control_box();

    let mut controls: Vec<Vec<f64>> = Vec::new();
    let axes: Vec<Vec<f64>> = (0..k).map(|c| grid_values(bx.lower[c], bx.upper[c])).collect();
    let total: usize = axes.iter().map(Vec::len).product();
    for mut idx in 0..total {
        let mut u = vec![0.0; k];
        for c in (0..k).rev() {
            u[c] = axes[c][idx % axes[c].len()];
            idx /= axes[c].len();
        }
        controls.push(u);
    }
    for c in 0..k {
        let room = (u_ref[c] - bx.lower[c]).min(bx.upper[c] - u_ref[c]);
        let delta = (0.5 * room).min(0.5);
        if delta > 0.0 {
            for sign in [1.0, -1.0] {
                let mut u = u_ref.clone();
                u[c] += sign * delta;
                controls.push(u);
            }
        }
    }

    let mut out: Vec<PerturbationVector> = Vec::new();
    let push = |pv: PerturbationVector, out: &mut Vec<PerturbationVector>| {
        if !out
            .iter()
            .any(|q| parallel(&q.vector.components, &pv.vector.components))
        {
            out.push(pv);
        }
    };
    if max_order >= 1 && bx.contains(&u_ref) {
        for u in controls.iter().filter(|u| bx.contains(u)) {
            if out.len() >= budget {
                break;
            }
            match needle_variation(system, &u_ref, u, 1.0, &x, t0, opts) {
                Ok(pv) => push(pv, &mut out),
                Err(VariationError::Degenerate(_)) => {}
                Err(e) => return Err(e),
            }
        }
    }
    if max_order >= 2 {
        for (c, xc) in system.inputs().iter().enumerate() {
            if out.len() >= budget {
                break;
            }
            match bracket_variation_tagged(&xi0, xc, Some(c), &x, t0, opts) {
                Ok(pv) => push(pv, &mut out),
                Err(VariationError::Degenerate(_)) => {}
                Err(e) => return Err(e),
            }
        }
    }
    out.truncate(budget);
    Ok(out)
}

/// Residuals `‖ν(s) − x − V s^l/l!‖` on `s ∈ {0.1, 0.05, 0.025}` and their
/// least-squares log-log slope.
#[derive(Clone, Debug, PartialEq)]
pub struct AsymptoticCheck {
    pub samples: [f64; 3],
    pub residuals: [f64; 3],
    pub slope: f64,
    /// Residuals at rounding level: the expansion is exact to working precision.
    pub exact: bool,
    pub passed: bool,
}

pub fn asymptotic_check(pv: &PerturbationVector, step: f64) -> Result<AsymptoticCheck, VariationError> {
    let samples = [0.1, 0.05, 0.025];
    let l = pv.order as i32;
    let fact: f64 = (1..=pv.order).map(|i| i as f64).product();
    let mut residuals = [0.0; 3];
    for (r, &s) in residuals.iter_mut().zip(&samples) {
        let y = pv.recipe.curve(&pv.base, s, step)?;
        let res: Vec<f64> = y
            .iter()
            .zip(&pv.base)
            .zip(&pv.vector.components)
            .map(|((yi, xi), vi)| yi - xi - vi * s.powi(l) / fact)
            .collect();
        *r = norm(&res);
    }
    let floor = 1e-13 * (1.0 + norm(&pv.base));
    let exact = residuals.iter().all(|r| *r <= floor);
    let xs: Vec<f64> = samples.iter().map(|s| s.ln()).collect();
    let ys: Vec<f64> = residuals.iter().map(|r| r.max(f64::MIN_POSITIVE).ln()).collect();
    let mx = xs.iter().sum::<f64>() / 3.0;
    let my = ys.iter().sum::<f64>() / 3.0;
    let slope = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
        / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
    Ok(AsymptoticCheck {
        samples,
        residuals,
        slope,
        exact,
        passed: exact || slope >= pv.order as f64 + 0.5,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ocp::{build_control_affine, ControlSchedule, SystemSpec};

    fn chart(names: &[&str]) -> Vec<String> {
        names.iter().map(|s| s.to_string()).collect()
    }

    fn heisenberg() -> (VectorField, VectorField) {
        let v = chart(&["x", "y", "z"]);
        (
            VectorField::parse(&v, &["1", "0", "-y/2"]).unwrap(),
            VectorField::parse(&v, &["0", "1", "x/2"]).unwrap(),
        )
    }

    fn integrator() -> ControlAffineSystem {
        build_control_affine(&SystemSpec {
            coordinates: chart(&["x"]),
            inputs: vec![vec!["1".into()]],
            ..Default::default()
        })
        .unwrap()
    }

    fn martinet() -> ControlAffineSystem {
        build_control_affine(&SystemSpec {
            coordinates: chart(&["x", "y", "z"]),
            inputs: vec![
                vec!["1".into(), "0".into(), "0".into()],
                vec!["0".into(), "1".into(), "x^2".into()],
            ],
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn end_time_variation_validation() {
        assert!(EndTimeVariation::parse("s + 1", "0", &["s"]).is_err());
        assert!(EndTimeVariation::parse("0", "cos(s)", &["s"]).is_err());
        assert!(EndTimeVariation::parse("0", "0", &["-s"]).is_err());
        assert!(EndTimeVariation::parse("0", "0", &[]).is_err());
        assert!(EndTimeVariation::parse("-s", "0", &["s^2"]).is_ok());
        assert!(EndTimeVariation::parse("0", "0", &["s + x"]).is_err());
    }

    #[test]
    fn curve_at_zero_is_identity() {
        let (a, b) = heisenberg();
        let r = bracket_recipe(&a, &b, None).unwrap();
        assert_eq!(r.curve(&[0.3, -0.2, 0.1], 0.0, 1e-3).unwrap(), vec![0.3, -0.2, 0.1]);
    }

    #[test]
    fn integrator_needle_curve() {
        // ẋ = u, u_ref = 0, u1 = 1: back-flow of the zero field, then x + l1·s
        let sys = integrator();
        let r = needle_recipe(&sys, &[0.0], &[1.0], 1.0).unwrap();
        let y = r.curve(&[0.0], 0.1, 1e-3).unwrap();
        assert!((y[0] - 0.1).abs() < 1e-14);
    }

    #[test]
    fn heisenberg_commutator_curve_and_jets() {
        let (a, b) = heisenberg();
        let r = bracket_recipe(&a, &b, None).unwrap();
        let y = r.curve(&[0.0; 3], 0.1, 1e-3).unwrap();
        assert!((y[2] - 0.01).abs() < 1e-6 && y[0].abs() < 1e-6 && y[1].abs() < 1e-6);
        let jets = estimate_jets(|s| r.curve(&[0.0; 3], s, 1e-3), 2, DEFAULT_S0).unwrap();
        assert!(norm(&jets[0]) < 1e-6);
        assert!((jets[1][2] - 2.0).abs() < 1e-4 && jets[1][0].abs() < 1e-4);
        let ad = jets_by_duals(&r, &[0.0; 3], 1e-3).unwrap();
        assert!((ad[1][2] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn polynomial_curve_jets() {
        let jets = estimate_jets(|s| Ok(vec![s * s / 2.0, 0.0]), 2, DEFAULT_S0).unwrap();
        assert!(norm(&jets[0]) < 1e-9);
        assert!((jets[1][0] - 1.0).abs() < 1e-9);
        let jets = estimate_jets(|s| Ok(vec![s, s.powi(3)]), 4, DEFAULT_S0).unwrap();
        assert!((jets[0][0] - 1.0).abs() < 1e-9 && jets[0][1].abs() < 1e-9);
        assert!((jets[2][1] - 6.0).abs() < 1e-6);
        assert!(estimate_jets(|s| Ok(vec![s]), 5, DEFAULT_S0).is_err());
    }

    #[test]
    fn order_detection() {
        let sys = integrator();
        let r = needle_recipe(&sys, &[0.0], &[1.0], 2.0).unwrap();
        let pv = order_and_vector(&r, &[0.0], 0.0, &JetOptions::default())
            .unwrap()
            .vector()
            .unwrap();
        assert_eq!(pv.order, 1);
        assert!((pv.vector.components[0] - 2.0).abs() < 1e-12);

        let tau2 = EndTimeVariation::parse("0", "0", &["s^5"]).unwrap();
        let r = Recipe::new(
            RecipeKind::Custom,
            sys.slice(&[0.0]).unwrap(),
            vec![sys.slice(&[1.0]).unwrap()],
            tau2,
        )
        .unwrap();
        assert!(matches!(
            order_and_vector(&r, &[0.0], 0.0, &JetOptions::default()).unwrap(),
            VariationOrder::Infinite
        ));

        let (a, b) = heisenberg();
        let r = bracket_recipe(&a, &b, None).unwrap();
        let pv = order_and_vector(&r, &[0.0; 3], 0.0, &JetOptions::default())
            .unwrap()
            .vector()
            .unwrap();
        assert_eq!(pv.order, 2);
        assert!(pv.vector.components[2] > 0.0);
    }

    #[test]
    fn needle_examples() {
        let sys = martinet();
        let opts = JetOptions::default();
        let pv = needle_variation(&sys, &[0.0, 1.0], &[1.0, 1.0], 1.0, &[0.0; 3], 0.0, &opts).unwrap();
        assert_eq!(pv.order, 1);
        assert!(
            norm(&[
                pv.vector.components[0] - 1.0,
                pv.vector.components[1],
                pv.vector.components[2]
            ]) < 1e-9
        );
        assert!(matches!(
            needle_variation(&sys, &[0.0, 1.0], &[0.0, 1.0], 1.0, &[0.0; 3], 0.0, &opts),
            Err(VariationError::Degenerate(_))
        ));
        let x = [0.4, -0.2, 0.3];
        let pv = needle_variation(&sys, &[0.0, 0.0], &[1.0, 0.0], 3.0, &x, 0.0, &opts).unwrap();
        assert!((pv.vector.components[0] - 3.0).abs() < 1e-9);
        assert!(needle_variation(&sys, &[0.0, 0.0], &[1.0, 0.0], 0.0, &x, 0.0, &opts).is_err());
    }

    #[test]
    fn bracket_examples() {
        let opts = JetOptions::default();
        let v = chart(&["x", "y"]);
        let dx = VectorField::parse(&v, &["1", "0"]).unwrap();
        let dy = VectorField::parse(&v, &["0", "1"]).unwrap();
        assert!(matches!(
            bracket_variation(&dx, &dy, &[0.0, 0.0], 0.0, &opts),
            Err(VariationError::Degenerate(_))
        ));
        let (a, b) = heisenberg();
        let pv = bracket_variation(&a, &b, &[0.0; 3], 0.0, &opts).unwrap();
        assert!((pv.vector.components[2] - 2.0).abs() < 1e-9);

        let xv = chart(&["x", "v"]);
        let z = VectorField::parse(&xv, &["v", "0"]).unwrap();
        let y = VectorField::parse(&xv, &["0", "1"]).unwrap();
        let pv = bracket_variation(&z, &y, &[0.2, 0.7], 0.0, &opts).unwrap();
        assert!((pv.vector.components[0] + 2.0).abs() < 1e-9 && pv.vector.components[1].abs() < 1e-9);
    }

    #[test]
    fn martinet_sample_set() {
        let sys = martinet();
        let sched = ControlSchedule::constant(vec![0.0, 1.0]);
        let tr = Trajectory::integrate(&sys, &[0.0; 3], &sched, (0.0, 1.0), 1e-3).unwrap();
        let opts = JetOptions::default();
        let set = sample_perturbation_set(&sys, &tr, 0.0, 2, 64, &opts).unwrap();
        assert!(set.iter().all(|p| p.order == 1));
        let has = |d: [f64; 3]| set.iter().any(|p| parallel(&p.vector.components, &d));
        assert!(has([1.0, 0.0, 0.0]) && has([-1.0, 0.0, 0.0]));
        assert!(has([0.0, 1.0, 0.0]) && has([0.0, -1.0, 0.0]));
        assert!(set.iter().all(|p| p.vector.components[2].abs() < 1e-9));
        let one = sample_perturbation_set(&sys, &tr, 0.0, 2, 1, &opts).unwrap();
        assert_eq!(one.len(), 1);
    }

    #[test]
    fn driftless_single_input_has_no_brackets() {
        let sys = integrator();
        let sched = ControlSchedule::constant(vec![1.0]);
        let tr = Trajectory::integrate(&sys, &[0.0], &sched, (0.0, 1.0), 1e-3).unwrap();
        let set = sample_perturbation_set(&sys, &tr, 0.5, 2, 64, &JetOptions::default()).unwrap();
        assert!(set.iter().all(|p| p.order == 1));
    }

    #[test]
    fn asymptotics_of_templates() {
        let (a, b) = heisenberg();
        let pv = bracket_variation(&a, &b, &[0.1, 0.2, 0.0], 0.0, &JetOptions::default()).unwrap();
        let chk = asymptotic_check(&pv, 1e-3).unwrap();
        assert!(chk.passed, "{chk:?}");

        let sys = integrator();
        let pv = needle_variation(&sys, &[0.0], &[1.0], 1.0, &[0.0], 0.0, &JetOptions::default()).unwrap();
        let chk = asymptotic_check(&pv, 1e-3).unwrap();
        assert!(chk.exact && chk.passed);
    }
}
