//! Vector fields on a single global chart, Lie brackets, RK4 flows and
//! pushforwards along flows.

use std::fmt;
use std::sync::{Arc, OnceLock};

use thiserror::Error;

use crate::expr::{parse_expression, CompiledExpr, EvalError, Expr, ParseError};
use crate::scalar::{Dual1, Scalar};

/// Default integrator step.
pub const DEFAULT_STEP: f64 = 1e-3;
/// Upper bound on `|duration| / step` for a single flow.
pub const MAX_STEPS: f64 = 1e7;

/// Chart coordinates of a point.
pub type Point = Vec<f64>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FieldError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("flow diverged at t = {time}")]
    Divergence { time: f64 },
    #[error("invalid flow: {0}")]
    InvalidFlow(String),
    #[error("variable '{0}' is not a chart coordinate")]
    UnknownVariable(String),
}

/// A vector `components` in the tangent space at `base`.
#[derive(Clone, Debug, PartialEq)]
pub struct TangentVector {
    pub base: Point,
    pub components: Vec<f64>,
}

impl TangentVector {
    pub fn new(base: Point, components: Vec<f64>) -> Self {
        debug_assert_eq!(base.len(), components.len());
        TangentVector { base, components }
    }

    pub fn dim(&self) -> usize {
        self.components.len()
    }

    pub fn norm(&self) -> f64 {
        norm(&self.components)
    }
}

/// A covector at `base`; pairing with tangent vectors is the coordinate dot product.
#[derive(Clone, Debug, PartialEq)]
pub struct Covector {
    pub base: Point,
    pub components: Vec<f64>,
}

impl Covector {
    pub fn new(base: Point, components: Vec<f64>) -> Self {
        Covector { base, components }
    }

    pub fn pair(&self, v: &[f64]) -> f64 {
        dot(&self.components, v)
    }

    pub fn norm(&self) -> f64 {
        norm(&self.components)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

struct FieldInner {
    vars: Vec<String>,
    components: Vec<Expr>,
    compiled: Vec<CompiledExpr>,
    jacobian: OnceLock<Jacobian>,
}

struct Jacobian {
    exprs: Vec<Vec<Expr>>,
    compiled: Vec<Vec<CompiledExpr>>,
}

/// Smooth vector field given by one expression per chart coordinate.
#[derive(Clone)]
pub struct VectorField {
    inner: Arc<FieldInner>,
}

impl fmt::Debug for VectorField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("VectorField")
            .field("vars", &self.inner.vars)
            .field("components", &self.render())
            .finish()
    }
}

impl VectorField {
    pub fn new(vars: &[String], components: Vec<Expr>) -> Result<Self, FieldError> {
        if vars.len() != components.len() {
            return Err(FieldError::DimensionMismatch {
                expected: vars.len(),
                found: components.len(),
            });
        }
        for c in &components {
            if let Some(v) = c.free_vars().into_iter().find(|v| !vars.contains(v)) {
                return Err(FieldError::UnknownVariable(v));
            }
        }
        let compiled = components
            .iter()
            .map(|c| c.compile(vars))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(VectorField {
            inner: Arc::new(FieldInner {
                vars: vars.to_vec(),
                components,
                compiled,
                jacobian: OnceLock::new(),
            }),
        })
    }

    /// Parse one component string per chart coordinate.
    pub fn parse<S: AsRef<str>>(vars: &[String], components: &[S]) -> Result<Self, FieldError> {
        let names: Vec<&str> = vars.iter().map(String::as_str).collect();
        let exprs = components
            .iter()
            .map(|c| parse_expression(c.as_ref(), &names))
            .collect::<Result<Vec<_>, _>>()?;
        VectorField::new(vars, exprs)
    }

    /// Constant field with the given components.
    pub fn constant(vars: &[String], components: &[f64]) -> Result<Self, FieldError> {
        VectorField::new(vars, components.iter().map(|&c| Expr::Const(c)).collect())
    }

    pub fn zero(vars: &[String]) -> Self {
        VectorField::new(vars, vec![Expr::zero(); vars.len()]).expect("zero field is valid")
    }

    pub fn dim(&self) -> usize {
        self.inner.components.len()
    }

    pub fn vars(&self) -> &[String] {
        &self.inner.vars
    }

    pub fn components(&self) -> &[Expr] {
        &self.inner.components
    }

    /// All components fold to the zero constant.
    pub fn is_zero(&self) -> bool {
        self.inner.components.iter().all(Expr::is_zero)
    }

    pub fn render(&self) -> Vec<String> {
        self.inner.components.iter().map(|c| c.to_string()).collect()
    }

    fn check_dim(&self, n: usize) -> Result<(), FieldError> {
        if n != self.dim() {
            return Err(FieldError::DimensionMismatch {
                expected: self.dim(),
                found: n,
            });
        }
        Ok(())
    }

    fn same_chart(&self, other: &VectorField) -> Result<(), FieldError> {
        other.check_dim(self.dim())?;
        if self.vars() != other.vars() {
            return Err(FieldError::InvalidFlow("fields live on different charts".into()));
        }
        Ok(())
    }

    /// Componentwise evaluation over any scalar type.
    pub fn eval<S: Scalar>(&self, x: &[S]) -> Result<Vec<S>, FieldError> {
        self.check_dim(x.len())?;
        self.inner
            .compiled
            .iter()
            .map(|c| c.eval(x).map_err(FieldError::from))
            .collect()
    }

    /// Value of the field at `x` as a tangent vector.
    pub fn eval_at(&self, x: &[f64]) -> Result<TangentVector, FieldError> {
        Ok(TangentVector::new(x.to_vec(), self.eval(x)?))
    }

    fn jacobian(&self) -> &Jacobian {
        self.inner.jacobian.get_or_init(|| {
            let exprs: Vec<Vec<Expr>> = self
                .inner
                .components
                .iter()
                .map(|c| self.inner.vars.iter().map(|v| c.differentiate(v)).collect())
                .collect();
            let compiled = exprs
                .iter()
                .map(|row| {
                    row.iter()
                        .map(|e| e.compile(&self.inner.vars).expect("derivative stays on chart"))
                        .collect()
                })
                .collect();
            Jacobian { exprs, compiled }
        })
    }

    /// Symbolic Jacobian, `[i][j] = ∂fⁱ/∂xʲ`.
    pub fn jacobian_exprs(&self) -> &[Vec<Expr>] {
        &self.jacobian().exprs
    }

    /// Numeric Jacobian at `x`, row-major `[i][j] = ∂fⁱ/∂xʲ`.
    pub fn jacobian_at<S: Scalar>(&self, x: &[S]) -> Result<Vec<Vec<S>>, FieldError> {
        self.check_dim(x.len())?;
        self.jacobian()
            .compiled
            .iter()
            .map(|row| row.iter().map(|c| c.eval(x).map_err(FieldError::from)).collect())
            .collect()
    }

    pub fn add(&self, other: &VectorField) -> Result<VectorField, FieldError> {
        self.same_chart(other)?;
        let comps = self
            .components()
            .iter()
            .zip(other.components())
            .map(|(a, b)| Expr::add(a.clone(), b.clone()))
            .collect();
        VectorField::new(self.vars(), comps)
    }

    pub fn scale(&self, k: f64) -> VectorField {
        let comps = self.components().iter().map(|a| Expr::scaled(k, a.clone())).collect();
        VectorField::new(self.vars(), comps).expect("scaling preserves the chart")
    }

    pub fn neg(&self) -> VectorField {
        let comps = self.components().iter().map(|a| Expr::neg(a.clone())).collect();
        VectorField::new(self.vars(), comps).expect("negation preserves the chart")
    }

    /// `base + Σ coeffs[c]·fields[c]`.
    pub fn affine_combination(
        base: &VectorField,
        coeffs: &[f64],
        fields: &[VectorField],
    ) -> Result<VectorField, FieldError> {
        if coeffs.len() != fields.len() {
            return Err(FieldError::DimensionMismatch {
                expected: fields.len(),
                found: coeffs.len(),
            });
        }
        let mut acc = base.clone();
        for (k, f) in coeffs.iter().zip(fields) {
            if *k != 0.0 {
                acc = acc.add(&f.scale(*k))?;
            }
        }
        Ok(acc)
    }
}

/// `[a,b]ⁱ = Σⱼ aʲ ∂bⁱ/∂xʲ − bʲ ∂aⁱ/∂xʲ`, computed symbolically.
///
/// The pair is put in a canonical order first, so `[b,a]` is the literal
/// negation of `[a,b]` and the two evaluate to exact negatives.
pub fn lie_bracket(a: &VectorField, b: &VectorField) -> Result<VectorField, FieldError> {
    a.same_chart(b)?;
    match a.render().cmp(&b.render()) {
        std::cmp::Ordering::Equal => return Ok(VectorField::zero(a.vars())),
        std::cmp::Ordering::Greater => return Ok(ordered_bracket(b, a)?.neg()),
        std::cmp::Ordering::Less => {}
    }
    ordered_bracket(a, b)
}

fn ordered_bracket(a: &VectorField, b: &VectorField) -> Result<VectorField, FieldError> {
    let vars = a.vars();
    let comps = (0..a.dim())
        .map(|i| {
            Expr::sum(vars.iter().enumerate().flat_map(|(j, v)| {
                let first = Expr::mul(a.components()[j].clone(), b.components()[i].differentiate(v));
                let second = Expr::mul(b.components()[j].clone(), a.components()[i].differentiate(v));
                [first, Expr::neg(second)]
            }))
        })
        .collect();
    VectorField::new(vars, comps)
}

// ---------------------------------------------------------------------------
// Integration
// ---------------------------------------------------------------------------

/// A single-field flow request.
#[derive(Clone, Debug)]
pub struct FlowSpec {
    pub field: VectorField,
    pub duration: f64,
    pub step: f64,
}

impl FlowSpec {
    pub fn new(field: VectorField, duration: f64, step: f64) -> Result<Self, FieldError> {
        validate_step(duration, step)?;
        Ok(FlowSpec { field, duration, step })
    }
}

fn validate_step(duration: f64, step: f64) -> Result<(), FieldError> {
    if !(step > 0.0) || !step.is_finite() {
        return Err(FieldError::InvalidFlow(format!("step must be positive, got {step}")));
    }
    if !duration.is_finite() || duration.abs() / step > MAX_STEPS {
        return Err(FieldError::InvalidFlow(format!(
            "duration {duration} with step {step} exceeds the step budget"
        )));
    }
    Ok(())
}

fn axpy<S: Scalar>(x: &[S], h: &S, k: &[S]) -> Vec<S> {
    x.iter()
        .zip(k)
        .map(|(xi, ki)| xi.clone() + h.clone() * ki.clone())
        .collect()
}

/// One classical RK4 step of size `h` for a possibly time-dependent right-hand side.
pub fn rk4_step<S, F>(rhs: &mut F, t: f64, x: &[S], h: &S) -> Result<Vec<S>, FieldError>
where
    S: Scalar,
    F: FnMut(f64, &[S]) -> Result<Vec<S>, FieldError>,
{
    let half = h.scale(0.5);
    let hv = h.value();
    let k1 = rhs(t, x)?;
    let k2 = rhs(t + 0.5 * hv, &axpy(x, &half, &k1))?;
    let k3 = rhs(t + 0.5 * hv, &axpy(x, &half, &k2))?;
    let k4 = rhs(t + hv, &axpy(x, h, &k3))?;
    let sixth = h.scale(1.0 / 6.0);
    Ok(x.iter()
        .enumerate()
        .map(|(i, xi)| {
            let incr = k1[i].clone() + k2[i].scale(2.0) + k3[i].scale(2.0) + k4[i].clone();
            xi.clone() + sixth.clone() * incr
        })
        .collect())
}

/// Fixed-step RK4 over `duration` starting at time `t0`: full steps of size
/// `step`, then one partial step landing exactly on the end time. The
/// duration may carry derivative information; step counts follow its real part.
pub fn integrate_rhs<S, F>(mut rhs: F, t0: f64, duration: &S, step: f64, x0: &[S]) -> Result<Vec<S>, FieldError>
where
    S: Scalar,
    F: FnMut(f64, &[S]) -> Result<Vec<S>, FieldError>,
{
    let t = duration.value();
    validate_step(t, step)?;
    let sign = if t < 0.0 { -1.0 } else { 1.0 };
    let full = (t.abs() / step).floor() as usize;
    let h = S::from_f64(sign * step);
    let mut x = x0.to_vec();
    let mut now = t0;
    for _ in 0..full {
        x = rk4_step(&mut rhs, now, &x, &h)?;
        now += sign * step;
        if !x.iter().all(Scalar::all_finite) {
            return Err(FieldError::Divergence { time: now });
        }
    }
    let rest = duration.clone() - S::from_f64(sign * step * full as f64);
    if !rest.is_exact_zero() {
        x = rk4_step(&mut rhs, now, &x, &rest)?;
        if !x.iter().all(Scalar::all_finite) {
            return Err(FieldError::Divergence { time: t0 + t });
        }
    }
    Ok(x)
}

/// Flow of a single field for a (possibly derivative-carrying) duration.
pub fn flow_generic<S: Scalar>(field: &VectorField, duration: &S, step: f64, x0: &[S]) -> Result<Vec<S>, FieldError> {
    field.check_dim(x0.len())?;
    integrate_rhs(|_, x: &[S]| field.eval(x), 0.0, duration, step, x0)
}

/// `Φ^ξ_t(x0)`.
pub fn integrate_flow(spec: &FlowSpec, x0: &[f64]) -> Result<Point, FieldError> {
    flow_generic(&spec.field, &spec.duration, spec.step, x0)
}

/// `Φ^{ξ_r}_{t_r} ∘ … ∘ Φ^{ξ_1}_{t_1}(x0)`: the first field of `seq` acts first.
pub fn composite_flow(seq: &[VectorField], times: &[f64], x0: &[f64], step: f64) -> Result<Point, FieldError> {
    composite_flow_generic(seq, times, x0, step)
}

pub fn composite_flow_generic<S: Scalar>(
    seq: &[VectorField],
    times: &[S],
    x0: &[S],
    step: f64,
) -> Result<Vec<S>, FieldError> {
    if seq.len() != times.len() {
        return Err(FieldError::DimensionMismatch {
            expected: seq.len(),
            found: times.len(),
        });
    }
    let mut x = x0.to_vec();
    for (f, t) in seq.iter().zip(times) {
        x = flow_generic(f, t, step, &x)?;
    }
    Ok(x)
}

/// Transport `v` along the flow of `xi0` for time `dt` by solving the
/// variational equation `δ' = Dξ₀(x(t))·δ` alongside the base flow.
pub fn pushforward_along_flow(
    xi0: &VectorField,
    dt: f64,
    v: &TangentVector,
    step: f64,
) -> Result<TangentVector, FieldError> {
    xi0.check_dim(v.dim())?;
    // a first-order dual state (x, δ) integrates exactly the linearized system
    let state: Vec<Dual1> = v
        .base
        .iter()
        .zip(&v.components)
        .map(|(&x, &d)| Dual1::new(x, d))
        .collect();
    let out = flow_generic(xi0, &Dual1::from_f64(dt), step, &state)?;
    Ok(TangentVector::new(
        out.iter().map(|s| s.re).collect(),
        out.iter().map(|s| s.du).collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chart(names: &[&str]) -> Vec<String> {
        names.iter().map(|s| s.to_string()).collect()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn evaluates_fields() {
        let xy = chart(&["x", "y"]);
        let c = VectorField::parse(&xy, &["1", "0"]).unwrap();
        assert_eq!(c.eval_at(&[5.0, 5.0]).unwrap().components, vec![1.0, 0.0]);

        let m = chart(&["x1", "x2", "x3"]);
        let x2 = VectorField::parse(&m, &["0", "1", "x1^2"]).unwrap();
        assert_eq!(x2.eval_at(&[2.0, 0.0, 0.0]).unwrap().components, vec![0.0, 1.0, 4.0]);

        let xv = chart(&["x", "v"]);
        let z = VectorField::parse(&xv, &["v", "0"]).unwrap();
        assert_eq!(z.eval_at(&[0.0, 3.0]).unwrap().components, vec![3.0, 0.0]);
    }

    #[test]
    fn rejects_foreign_variables_and_bad_dims() {
        let xy = chart(&["x", "y"]);
        assert!(VectorField::parse(&xy, &["z", "0"]).is_err());
        assert!(VectorField::parse(&xy, &["1"]).is_err());
        let f = VectorField::parse(&xy, &["1", "0"]).unwrap();
        assert!(f.eval(&[1.0]).is_err());
    }

    #[test]
    fn brackets_of_classic_frames() {
        let xy = chart(&["x", "y"]);
        let dx = VectorField::parse(&xy, &["1", "0"]).unwrap();
        let dy = VectorField::parse(&xy, &["0", "1"]).unwrap();
        assert!(lie_bracket(&dx, &dy).unwrap().is_zero());

        let m = chart(&["x1", "x2", "x3"]);
        let x1 = VectorField::parse(&m, &["1", "0", "0"]).unwrap();
        let x2 = VectorField::parse(&m, &["0", "1", "x1^2"]).unwrap();
        let b = lie_bracket(&x1, &x2).unwrap();
        assert_eq!(b.render(), vec!["0", "0", "2 * x1"]);

        let h1 = VectorField::parse(&m, &["1", "0", "-x2/2"]).unwrap();
        let h2 = VectorField::parse(&m, &["0", "1", "x1/2"]).unwrap();
        let hb = lie_bracket(&h1, &h2).unwrap();
        assert_eq!(hb.eval(&[0.3, -0.2, 4.0]).unwrap(), vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn constant_and_backward_flows() {
        let xy = chart(&["x", "y"]);
        let dx = VectorField::parse(&xy, &["1", "0"]).unwrap();
        let fwd = integrate_flow(&FlowSpec::new(dx.clone(), 1.0, 1e-3).unwrap(), &[0.0, 0.0]).unwrap();
        assert!(close(&fwd, &[1.0, 0.0], 1e-12));
        let back = integrate_flow(&FlowSpec::new(dx, -1.0, 1e-3).unwrap(), &[0.0, 0.0]).unwrap();
        assert!(close(&back, &[-1.0, 0.0], 1e-12));
    }

    #[test]
    fn linear_flow_is_exponential() {
        let x = chart(&["x"]);
        let f = VectorField::parse(&x, &["x"]).unwrap();
        let out = integrate_flow(&FlowSpec::new(f, 1.0, 1e-3).unwrap(), &[1.0]).unwrap();
        assert!((out[0] - std::f64::consts::E).abs() <= 1e-9);
    }

    #[test]
    fn flow_spec_guards() {
        let x = chart(&["x"]);
        let f = VectorField::parse(&x, &["x"]).unwrap();
        assert!(FlowSpec::new(f.clone(), 1.0, 0.0).is_err());
        assert!(FlowSpec::new(f.clone(), 1.0, -1e-3).is_err());
        assert!(FlowSpec::new(f, 1e5, 1e-3).is_err());
    }

    #[test]
    fn divergence_is_reported_with_time() {
        let x = chart(&["x"]);
        let f = VectorField::parse(&x, &["x^2"]).unwrap();
        let err = integrate_flow(&FlowSpec::new(f, 2.0, 1e-3).unwrap(), &[1.0]).unwrap_err();
        match err {
            FieldError::Divergence { time } => assert!(time > 0.9 && time <= 2.0, "{time}"),
            FieldError::Eval(_) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn composite_flows() {
        let xy = chart(&["x", "y"]);
        let dx = VectorField::parse(&xy, &["1", "0"]).unwrap();
        let dy = VectorField::parse(&xy, &["0", "1"]).unwrap();
        let p = composite_flow(&[dx.clone(), dy], &[1.0, 2.0], &[0.0, 0.0], 1e-3).unwrap();
        assert!(close(&p, &[1.0, 2.0], 1e-12));
        let q = composite_flow(&[dx], &[0.0], &[5.0, 5.0], 1e-3).unwrap();
        assert_eq!(q, vec![5.0, 5.0]);
    }

    #[test]
    fn heisenberg_commutator_displacement() {
        let m = chart(&["x", "y", "z"]);
        let h1 = VectorField::parse(&m, &["1", "0", "-y/2"]).unwrap();
        let h2 = VectorField::parse(&m, &["0", "1", "x/2"]).unwrap();
        let s = 0.1;
        let seq = [h1.clone(), h2.clone(), h1.neg(), h2.neg()];
        let p = composite_flow(&seq, &[s; 4], &[0.0; 3], 1e-3).unwrap();
        // brute-force reference with a much finer step
        let r = composite_flow(&seq, &[s; 4], &[0.0; 3], 1e-5).unwrap();
        assert!((p[2] - 0.01).abs() <= 2e-4);
        assert!(close(&p, &r, 1e-10));
    }

    #[test]
    fn pushforward_examples() {
        let xy = chart(&["x", "y"]);
        let dx = VectorField::parse(&xy, &["1", "0"]).unwrap();
        let v = TangentVector::new(vec![0.5, 0.5], vec![0.3, -2.0]);
        let w = pushforward_along_flow(&dx, 0.7, &v, 1e-3).unwrap();
        assert!(close(&w.components, &v.components, 1e-14));
        assert!(close(&w.base, &[1.2, 0.5], 1e-12));

        let x = chart(&["x"]);
        let lin = VectorField::parse(&x, &["x"]).unwrap();
        let v = TangentVector::new(vec![1.0], vec![1.0]);
        let w = pushforward_along_flow(&lin, 1.0, &v, 1e-3).unwrap();
        assert!((w.components[0] - std::f64::consts::E).abs() <= 1e-9);

        let same = pushforward_along_flow(&lin, 0.0, &v, 1e-3).unwrap();
        assert_eq!(same, v);
    }

    #[test]
    fn jacobian_matches_hand_derivatives() {
        let m = chart(&["x1", "x2", "x3"]);
        let x2 = VectorField::parse(&m, &["0", "1", "x1^2"]).unwrap();
        let j = x2.jacobian_at(&[3.0, 0.0, 0.0]).unwrap();
        assert_eq!(j[2], vec![6.0, 0.0, 0.0]);
        assert_eq!(j[0], vec![0.0, 0.0, 0.0]);
    }
}
