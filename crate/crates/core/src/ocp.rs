//! Control-affine systems, their cost extension, Hamiltonians, biextremal
//! integration, extremal classification and the necessary-condition audit.
//!
//! Symplectic convention: with `Ω = dx⁰∧dp₀ + dxⁱ∧dpᵢ` and `i_X Ω = dH`,
//! Hamilton's equations read `ẋ = ∂H/∂p`, `ṗ = −∂H/∂x`.

use std::fmt;

use thiserror::Error;

use crate::cone::{is_supporting, Cone, ConeError};
use crate::expr::{parse_expression, EvalEnv, Expr, ParseError};
use crate::fields::{norm, rk4_step, FieldError, Point, VectorField};

/// Momenta below this norm violate nontriviality.
pub const MIN_MOMENTUM_NORM: f64 = 1e-12;
/// `|λ₀|` at or below this counts as abnormal.
pub const ABNORMAL_TOL: f64 = 1e-12;
/// Relative tolerance on Hamiltonian constancy.
pub const HAMILTONIAN_TOL: f64 = 1e-8;
/// Absolute tolerance on `∂H/∂u`.
pub const STATIONARITY_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OcpError {
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    Dimension {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("invalid control box: {0}")]
    ControlBox(String),
    #[error("invalid control schedule: {0}")]
    Schedule(String),
    #[error("momentum vanished at t = {time} (nontriviality violated)")]
    DegenerateMomentum { time: f64 },
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error(transparent)]
    Cone(#[from] ConeError),
}

fn check_len(what: &'static str, expected: usize, found: usize) -> Result<(), OcpError> {
    if expected != found {
        return Err(OcpError::Dimension { what, expected, found });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Systems
// ---------------------------------------------------------------------------

/// Componentwise bounds on the controls; the admissible set is the open box.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl ControlBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self, OcpError> {
        check_len("control bounds", lower.len(), upper.len())?;
        for (c, (lo, hi)) in lower.iter().zip(&upper).enumerate() {
            if lo.is_nan() || hi.is_nan() || !(lo < hi) {
                return Err(OcpError::ControlBox(format!(
                    "input {}: lower {lo} must be below upper {hi}",
                    c + 1
                )));
            }
        }
        Ok(ControlBox { lower, upper })
    }

    pub fn unbounded(k: usize) -> Self {
        ControlBox {
            lower: vec![f64::NEG_INFINITY; k],
            upper: vec![f64::INFINITY; k],
        }
    }

    pub fn len(&self) -> usize {
        self.lower.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lower.is_empty()
    }

    /// Membership in the open box.
    pub fn contains(&self, u: &[f64]) -> bool {
        u.len() == self.len()
            && u.iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(x, (lo, hi))| lo < x && x < hi)
    }

    pub fn contains_zero(&self) -> bool {
        self.contains(&vec![0.0; self.len()])
    }
}

/// Input description for [`build_control_affine`].
#[derive(Clone, Debug, Default)]
pub struct SystemSpec {
    pub coordinates: Vec<String>,
    /// Control names; defaults to `u1…uk`.
    pub controls: Option<Vec<String>>,
    /// Drift components; absent means driftless.
    pub drift: Option<Vec<String>>,
    pub inputs: Vec<Vec<String>>,
    /// Per-input `(lower, upper)`; absent means unbounded.
    pub bounds: Option<Vec<(f64, f64)>>,
}

/// `ẋ = X₀(x) + Σ uᶜ X_c(x)` with `u` in an open box.
#[derive(Clone, Debug)]
pub struct ControlAffineSystem {
    coordinates: Vec<String>,
    controls: Vec<String>,
    drift: VectorField,
    inputs: Vec<VectorField>,
    control_box: ControlBox,
}

pub fn build_control_affine(spec: &SystemSpec) -> Result<ControlAffineSystem, OcpError> {
    let m = spec.coordinates.len();
    let drift = match &spec.drift {
        Some(d) => {
            check_len("drift", m, d.len())?;
            VectorField::parse(&spec.coordinates, d)?
        }
        None => VectorField::zero(&spec.coordinates),
    };
    let inputs = spec
        .inputs
        .iter()
        .map(|comps| {
            check_len("input field", m, comps.len())?;
            Ok(VectorField::parse(&spec.coordinates, comps)?)
        })
        .collect::<Result<Vec<_>, OcpError>>()?;
    let k = inputs.len();
    let controls = match &spec.controls {
        Some(c) => {
            check_len("control names", k, c.len())?;
            c.clone()
        }
        None => (1..=k).map(|c| format!("u{c}")).collect(),
    };
    let control_box = match &spec.bounds {
        Some(b) => {
            check_len("control bounds", k, b.len())?;
            ControlBox::new(b.iter().map(|p| p.0).collect(), b.iter().map(|p| p.1).collect())?
        }
        None => ControlBox::unbounded(k),
    };
    ControlAffineSystem::new(drift, inputs, control_box).map(|mut s| {
        s.controls = controls;
        s
    })
}

impl ControlAffineSystem {
    pub fn new(drift: VectorField, inputs: Vec<VectorField>, control_box: ControlBox) -> Result<Self, OcpError> {
        let m = drift.dim();
        for f in &inputs {
            check_len("input field", m, f.dim())?;
            if f.vars() != drift.vars() {
                return Err(OcpError::Field(FieldError::InvalidFlow(
                    "input fields must share the drift's chart".into(),
                )));
            }
        }
        check_len("control bounds", inputs.len(), control_box.len())?;
        let controls = (1..=inputs.len()).map(|c| format!("u{c}")).collect();
        Ok(ControlAffineSystem {
            coordinates: drift.vars().to_vec(),
            controls,
            drift,
            inputs,
            control_box,
        })
    }

    /// Rename the controls (used in cost expressions).
    pub fn with_controls(mut self, names: Vec<String>) -> Result<Self, OcpError> {
        check_len("control names", self.inputs.len(), names.len())?;
        self.controls = names;
        Ok(self)
    }

    /// State dimension `m`.
    pub fn m(&self) -> usize {
        self.drift.dim()
    }

    /// Number of inputs `k`.
    pub fn k(&self) -> usize {
        self.inputs.len()
    }

    pub fn coordinates(&self) -> &[String] {
        &self.coordinates
    }

    pub fn control_names(&self) -> &[String] {
        &self.controls
    }

    pub fn drift(&self) -> &VectorField {
        &self.drift
    }

    pub fn inputs(&self) -> &[VectorField] {
        &self.inputs
    }

    pub fn control_box(&self) -> &ControlBox {
        &self.control_box
    }

    pub fn contains_zero(&self) -> bool {
        self.control_box.contains_zero()
    }

    /// Fixed-control slice `ξ_u = X₀ + Σ uᶜ X_c`.
    pub fn slice(&self, u: &[f64]) -> Result<VectorField, OcpError> {
        check_len("control", self.k(), u.len())?;
        Ok(VectorField::affine_combination(&self.drift, u, &self.inputs)?)
    }

    /// `X₀(x) + Σ uᶜ X_c(x)`.
    pub fn dynamics(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>, OcpError> {
        check_len("control", self.k(), u.len())?;
        let mut out = self.drift.eval(x)?;
        for (uc, f) in u.iter().zip(&self.inputs) {
            if *uc != 0.0 {
                for (o, v) in out.iter_mut().zip(f.eval(x)?) {
                    *o += uc * v;
                }
            }
        }
        Ok(out)
    }

    /// `∂f/∂x` of the closed-loop field at `(x, u)`.
    pub fn state_jacobian(&self, x: &[f64], u: &[f64]) -> Result<Vec<Vec<f64>>, OcpError> {
        let mut j = self.drift.jacobian_at(x)?;
        for (uc, f) in u.iter().zip(&self.inputs) {
            if *uc != 0.0 {
                for (row, frow) in j.iter_mut().zip(f.jacobian_at(x)?) {
                    for (a, b) in row.iter_mut().zip(frow) {
                        *a += uc * b;
                    }
                }
            }
        }
        Ok(j)
    }

    fn env(&self, x: &[f64], u: &[f64]) -> EvalEnv<f64> {
        self.coordinates
            .iter()
            .map(String::as_str)
            .zip(x.iter().copied())
            .chain(self.controls.iter().map(String::as_str).zip(u.iter().copied()))
            .collect()
    }
}

/// The system augmented by the running-cost coordinate `x⁰` (placed first).
#[derive(Clone, Debug)]
pub struct ExtendedSystem {
    base: ControlAffineSystem,
    cost: Expr,
    cost_dx: Vec<Expr>,
    cost_du: Vec<Expr>,
    cost_coordinate: String,
}

/// Attach a running cost `𝓕(x, u)` (Mayer form).
pub fn extend_system(sys: &ControlAffineSystem, cost: &Expr) -> Result<ExtendedSystem, OcpError> {
    let known: Vec<&String> = sys.coordinates.iter().chain(&sys.controls).collect();
    if let Some(v) = cost.free_vars().into_iter().find(|v| !known.contains(&v)) {
        return Err(OcpError::Field(FieldError::UnknownVariable(v)));
    }
    let mut cost_coordinate = "x0".to_string();
    while known.iter().any(|k| **k == cost_coordinate) {
        cost_coordinate.push('_');
    }
    Ok(ExtendedSystem {
        cost_dx: sys.coordinates.iter().map(|v| cost.differentiate(v)).collect(),
        cost_du: sys.controls.iter().map(|v| cost.differentiate(v)).collect(),
        base: sys.clone(),
        cost: cost.clone(),
        cost_coordinate,
    })
}

/// Parse a cost over the system's coordinates and controls.
pub fn parse_cost(sys: &ControlAffineSystem, src: &str) -> Result<Expr, OcpError> {
    let names: Vec<&str> = sys
        .coordinates
        .iter()
        .chain(&sys.controls)
        .map(String::as_str)
        .collect();
    Ok(parse_expression(src, &names)?)
}

impl ExtendedSystem {
    pub fn base(&self) -> &ControlAffineSystem {
        &self.base
    }

    pub fn cost(&self) -> &Expr {
        &self.cost
    }

    /// Extended dimension `m + 1`.
    pub fn dim(&self) -> usize {
        self.base.m() + 1
    }

    pub fn cost_coordinate(&self) -> &str {
        &self.cost_coordinate
    }

    /// `𝓕(x, u)`.
    pub fn running_cost(&self, x: &[f64], u: &[f64]) -> Result<f64, OcpError> {
        Ok(self.cost.evaluate(&self.base.env(x, u)).map_err(FieldError::from)?)
    }

    pub fn cost_gradient_x(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>, OcpError> {
        let env = self.base.env(x, u);
        self.cost_dx
            .iter()
            .map(|e| e.evaluate(&env).map_err(|e| OcpError::Field(e.into())))
            .collect()
    }

    pub fn cost_gradient_u(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>, OcpError> {
        let env = self.base.env(x, u);
        self.cost_du
            .iter()
            .map(|e| e.evaluate(&env).map_err(|e| OcpError::Field(e.into())))
            .collect()
    }

    /// `X̂(x̂, u) = 𝓕 ∂/∂x⁰ + X`; independent of `x⁰`.
    pub fn extended_dynamics(&self, xhat: &[f64], u: &[f64]) -> Result<Vec<f64>, OcpError> {
        check_len("extended state", self.dim(), xhat.len())?;
        let x = &xhat[1..];
        let mut out = vec![self.running_cost(x, u)?];
        out.extend(self.base.dynamics(x, u)?);
        Ok(out)
    }

    /// Fixed-control slice as a vector field on the extended chart.
    pub fn slice(&self, u: &[f64]) -> Result<VectorField, OcpError> {
        let mut cost = self.cost.clone();
        for (name, val) in self.base.controls.iter().zip(u) {
            cost = cost.substitute(name, &Expr::Const(*val));
        }
        let base = self.base.slice(u)?;
        let mut vars = vec![self.cost_coordinate.clone()];
        vars.extend(self.base.coordinates.iter().cloned());
        let mut comps = vec![cost];
        comps.extend(base.components().iter().cloned());
        Ok(VectorField::new(&vars, comps)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Abnormal working mode on `T*M`, no cost term.
    Reduced,
    /// Extended manifold with `x⁰` and `p₀` first.
    Extended,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Reduced => "reduced",
            Mode::Extended => "extended",
        })
    }
}

/// The dynamics a Hamiltonian is built on.
#[derive(Clone, Debug)]
pub enum Dynamics {
    Reduced(ControlAffineSystem),
    Extended(ExtendedSystem),
}

impl Dynamics {
    pub fn mode(&self) -> Mode {
        match self {
            Dynamics::Reduced(_) => Mode::Reduced,
            Dynamics::Extended(_) => Mode::Extended,
        }
    }

    pub fn base(&self) -> &ControlAffineSystem {
        match self {
            Dynamics::Reduced(s) => s,
            Dynamics::Extended(e) => e.base(),
        }
    }

    /// Dimension of the state (and of the covector).
    pub fn dim(&self) -> usize {
        match self {
            Dynamics::Reduced(s) => s.m(),
            Dynamics::Extended(e) => e.dim(),
        }
    }

    /// Strip `x⁰` in extended mode.
    pub fn spatial<'a>(&self, state: &'a [f64]) -> &'a [f64] {
        match self {
            Dynamics::Reduced(_) => state,
            Dynamics::Extended(_) => &state[1..],
        }
    }

    pub fn velocity(&self, state: &[f64], u: &[f64]) -> Result<Vec<f64>, OcpError> {
        match self {
            Dynamics::Reduced(s) => s.dynamics(state, u),
            Dynamics::Extended(e) => e.extended_dynamics(state, u),
        }
    }
}

/// `H(λ, x, u) = ⟨λ, X̂(x, u)⟩`; in reduced mode the `p₀𝓕` term is absent.
pub fn hamiltonian(lambda: &[f64], x: &[f64], u: &[f64], dynamics: &Dynamics) -> Result<f64, OcpError> {
    let n = dynamics.dim();
    check_len("covector", n, lambda.len())?;
    check_len("state", n, x.len())?;
    if lambda.iter().all(|&l| l == 0.0) {
        return Ok(0.0);
    }
    let v = dynamics.velocity(x, u)?;
    Ok(lambda.iter().zip(&v).map(|(a, b)| a * b).sum())
}

/// `∂H/∂uᶜ = p₀ ∂𝓕/∂uᶜ + ⟨p, X_c⟩`.
pub fn hamiltonian_control_gradient(
    lambda: &[f64],
    x: &[f64],
    u: &[f64],
    dynamics: &Dynamics,
) -> Result<Vec<f64>, OcpError> {
    let sys = dynamics.base();
    let xs = dynamics.spatial(x);
    let p = dynamics.spatial(lambda);
    let mut grad = sys
        .inputs()
        .iter()
        .map(|f| Ok(crate::fields::dot(p, &f.eval(xs)?)))
        .collect::<Result<Vec<f64>, OcpError>>()?;
    if let Dynamics::Extended(e) = dynamics {
        let p0 = lambda[0];
        for (g, d) in grad.iter_mut().zip(e.cost_gradient_u(xs, u)?) {
            *g += p0 * d;
        }
    }
    Ok(grad)
}

/// Derivative of the coupled state `(x, λ)`: `ẋ = X̂(x,u)`, `λ̇ = −(∂X̂/∂x)ᵀλ`.
/// Returns `(ẋ, λ̇)`; in extended mode `ṗ₀ = 0` exactly.
pub fn hamilton_rhs(
    x: &[f64],
    lambda: &[f64],
    u: &[f64],
    dynamics: &Dynamics,
) -> Result<(Vec<f64>, Vec<f64>), OcpError> {
    let n = dynamics.dim();
    check_len("state", n, x.len())?;
    check_len("covector", n, lambda.len())?;
    let sys = dynamics.base();
    let xs = dynamics.spatial(x);
    let p = dynamics.spatial(lambda);
    let jac = sys.state_jacobian(xs, u)?;
    let m = sys.m();
    let mut pdot: Vec<f64> = (0..m).map(|j| -(0..m).map(|i| p[i] * jac[i][j]).sum::<f64>()).collect();
    let xdot = dynamics.velocity(x, u)?;
    let lambda_dot = match dynamics {
        Dynamics::Reduced(_) => pdot,
        Dynamics::Extended(e) => {
            let p0 = lambda[0];
            if p0 != 0.0 {
                for (pd, g) in pdot.iter_mut().zip(e.cost_gradient_x(xs, u)?) {
                    *pd -= p0 * g;
                }
            }
            let mut out = Vec::with_capacity(n);
            out.push(0.0);
            out.extend(pdot);
            out
        }
    };
    Ok((xdot, lambda_dot))
}

// ---------------------------------------------------------------------------
// Controls and trajectories
// ---------------------------------------------------------------------------

/// Reference control as a function of time.
#[derive(Clone, Debug)]
pub enum ControlSchedule {
    /// Segment `i` holds `values[i]` on `[starts[i], starts[i+1])`.
    Piecewise { starts: Vec<f64>, values: Vec<Vec<f64>> },
    /// One expression in `t` per input.
    Expression(Vec<Expr>),
}

/// Control held on one integration segment.
#[derive(Clone, Debug)]
pub enum SegmentControl {
    Constant(Vec<f64>),
    Expression(Vec<Expr>),
}

#[derive(Clone, Debug)]
pub struct Segment {
    pub start: f64,
    pub end: f64,
    pub control: SegmentControl,
}

impl SegmentControl {
    pub fn at(&self, t: f64) -> Result<Vec<f64>, OcpError> {
        match self {
            SegmentControl::Constant(u) => Ok(u.clone()),
            SegmentControl::Expression(es) => {
                let env = EvalEnv::new().bind("t", t);
                es.iter()
                    .map(|e| e.evaluate(&env).map_err(|e| OcpError::Field(e.into())))
                    .collect()
            }
        }
    }
}

impl ControlSchedule {
    pub fn constant(u: Vec<f64>) -> Self {
        ControlSchedule::Piecewise {
            starts: vec![f64::NEG_INFINITY],
            values: vec![u],
        }
    }

    pub fn piecewise(starts: Vec<f64>, values: Vec<Vec<f64>>) -> Result<Self, OcpError> {
        check_len("schedule values", starts.len(), values.len())?;
        if starts.is_empty() {
            return Err(OcpError::Schedule("empty schedule".into()));
        }
        if starts.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(OcpError::Schedule("segment starts must increase strictly".into()));
        }
        Ok(ControlSchedule::Piecewise { starts, values })
    }

    pub fn expression(srcs: &[String]) -> Result<Self, OcpError> {
        let exprs = srcs
            .iter()
            .map(|s| parse_expression(s, &["t"]))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(ControlSchedule::Expression(exprs))
    }

    pub fn inputs(&self) -> usize {
        match self {
            ControlSchedule::Piecewise { values, .. } => values[0].len(),
            ControlSchedule::Expression(es) => es.len(),
        }
    }

    pub fn is_piecewise_constant(&self) -> bool {
        matches!(self, ControlSchedule::Piecewise { .. })
    }

    /// Right-continuous value at `t`.
    pub fn control_at(&self, t: f64) -> Result<Vec<f64>, OcpError> {
        match self {
            ControlSchedule::Piecewise { starts, values } => {
                let idx = starts.iter().rposition(|&s| s <= t).unwrap_or(0);
                Ok(values[idx].clone())
            }
            ControlSchedule::Expression(es) => SegmentControl::Expression(es.clone()).at(t),
        }
    }

    /// Interior switching times inside `(a, b)`.
    pub fn breakpoints(&self, a: f64, b: f64) -> Vec<f64> {
        match self {
            ControlSchedule::Piecewise { starts, .. } => starts.iter().copied().filter(|&s| s > a && s < b).collect(),
            ControlSchedule::Expression(_) => Vec::new(),
        }
    }

    /// Split `[a, b]` (or `[b, a]` backwards) at breakpoints.
    pub fn segments(&self, a: f64, b: f64) -> Vec<Segment> {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let mut cuts = vec![lo];
        cuts.extend(self.breakpoints(lo, hi));
        cuts.push(hi);
        let mut segs: Vec<Segment> = cuts
            .windows(2)
            .map(|w| {
                let control = match self {
                    ControlSchedule::Piecewise { .. } => {
                        SegmentControl::Constant(self.control_at(w[0]).expect("piecewise lookup is total"))
                    }
                    ControlSchedule::Expression(es) => SegmentControl::Expression(es.clone()),
                };
                Segment {
                    start: w[0],
                    end: w[1],
                    control,
                }
            })
            .collect();
        if a > b {
            segs.reverse();
            for s in &mut segs {
                std::mem::swap(&mut s.start, &mut s.end);
            }
        }
        segs
    }
}

/// Integrate `ż = F(t, z)` over one segment, recording every step.
fn integrate_recording<F>(mut rhs: F, t0: f64, t1: f64, step: f64, z0: &[f64]) -> Result<Vec<(f64, Vec<f64>)>, OcpError>
where
    F: FnMut(f64, &[f64]) -> Result<Vec<f64>, FieldError>,
{
    let dur = t1 - t0;
    let sign = if dur < 0.0 { -1.0 } else { 1.0 };
    let full = (dur.abs() / step).floor() as usize;
    let mut out = Vec::with_capacity(full + 2);
    let mut z = z0.to_vec();
    let mut t = t0;
    for i in 0..full {
        z = rk4_step(&mut rhs, t, &z, &(sign * step))?;
        t = t0 + sign * step * (i + 1) as f64;
        if !z.iter().all(|v| v.is_finite()) {
            return Err(FieldError::Divergence { time: t }.into());
        }
        out.push((t, z.clone()));
    }
    let rest = t1 - t;
    if rest != 0.0 {
        z = rk4_step(&mut rhs, t, &z, &rest)?;
        if !z.iter().all(|v| v.is_finite()) {
            return Err(FieldError::Divergence { time: t1 }.into());
        }
        match out.last_mut() {
            // a sliver step: merge into the final sample
            Some(last) if rest.abs() < 1e-9 * step => *last = (t1, z),
            _ => out.push((t1, z)),
        }
    } else if let Some(last) = out.last_mut() {
        last.0 = t1;
    }
    Ok(out)
}

fn validate_interval(a: f64, b: f64, step: f64) -> Result<(), OcpError> {
    if !(a.is_finite() && b.is_finite() && a <= b) {
        return Err(OcpError::Schedule(format!("invalid interval [{a}, {b}]")));
    }
    if !(step > 0.0) || (b - a) / step > crate::fields::MAX_STEPS {
        return Err(FieldError::InvalidFlow(format!("invalid step {step}")).into());
    }
    Ok(())
}

/// A reference trajectory `(γ, u)` sampled at every integrator step.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub interval: (f64, f64),
    pub samples: Vec<(f64, Point)>,
    pub schedule: ControlSchedule,
    pub step: f64,
}

impl Trajectory {
    /// Integrate the system from `x0` under `schedule` on `[a, b]`.
    pub fn integrate(
        sys: &ControlAffineSystem,
        x0: &[f64],
        schedule: &ControlSchedule,
        interval: (f64, f64),
        step: f64,
    ) -> Result<Trajectory, OcpError> {
        let (a, b) = interval;
        validate_interval(a, b, step)?;
        check_len("initial point", sys.m(), x0.len())?;
        check_len("schedule inputs", sys.k(), schedule.inputs())?;
        let mut samples = vec![(a, x0.to_vec())];
        for seg in schedule.segments(a, b) {
            let x = samples.last().expect("nonempty").1.clone();
            let recorded = integrate_recording(
                |t, x: &[f64]| {
                    let u = seg.control.at(t).map_err(|e| FieldError::InvalidFlow(e.to_string()))?;
                    sys.dynamics(x, &u).map_err(|e| FieldError::InvalidFlow(e.to_string()))
                },
                seg.start,
                seg.end,
                step,
                &x,
            )?;
            samples.extend(recorded);
        }
        Ok(Trajectory {
            interval,
            samples,
            schedule: schedule.clone(),
            step,
        })
    }

    pub fn contains_time(&self, t: f64) -> bool {
        t >= self.interval.0 && t <= self.interval.1
    }

    /// `γ(t)`, integrating from the closest preceding sample.
    pub fn state_at(&self, sys: &ControlAffineSystem, t: f64) -> Result<Point, OcpError> {
        if !self.contains_time(t) {
            return Err(OcpError::Schedule(format!(
                "time {t} outside [{}, {}]",
                self.interval.0, self.interval.1
            )));
        }
        let idx = self.samples.partition_point(|(s, _)| *s <= t).saturating_sub(1);
        let (t0, x0) = &self.samples[idx];
        if *t0 == t {
            return Ok(x0.clone());
        }
        let seg = &self.schedule.segments(*t0, t)[0];
        let out = integrate_recording(
            |s, x: &[f64]| {
                let u = seg.control.at(s).map_err(|e| FieldError::InvalidFlow(e.to_string()))?;
                sys.dynamics(x, &u).map_err(|e| FieldError::InvalidFlow(e.to_string()))
            },
            *t0,
            t,
            self.step,
            x0,
        )?;
        Ok(out.last().map(|s| s.1.clone()).unwrap_or_else(|| x0.clone()))
    }

    /// Reference slice `ξ₀` in force at time `t` (control frozen at `u(t)`).
    pub fn reference_field(&self, sys: &ControlAffineSystem, t: f64) -> Result<VectorField, OcpError> {
        sys.slice(&self.schedule.control_at(t)?)
    }

    /// Times strictly inside the interval that avoid control switches,
    /// chosen among `candidates`.
    pub fn admissible_times(&self, candidates: &[f64]) -> Vec<f64> {
        let breaks = self.schedule.breakpoints(self.interval.0, self.interval.1);
        candidates
            .iter()
            .copied()
            .filter(|t| self.contains_time(*t) && !breaks.iter().any(|b| (b - t).abs() < 1e-12))
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Biextremals
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct BiextremalSample {
    pub t: f64,
    pub x: Point,
    pub lambda: Vec<f64>,
    pub control: Vec<f64>,
}

/// A solution of Hamilton's equations lifted over a trajectory.
#[derive(Clone, Debug)]
pub struct Biextremal {
    pub mode: Mode,
    pub samples: Vec<BiextremalSample>,
    /// `p₀` in extended mode.
    pub lambda0: Option<f64>,
    pub schedule: ControlSchedule,
    pub step: f64,
}

/// RK4 on the coupled state-momentum system, restarting at every switch of
/// a piecewise-constant schedule.
pub fn integrate_biextremal(
    x0: &[f64],
    lambda0: &[f64],
    schedule: &ControlSchedule,
    dynamics: &Dynamics,
    interval: (f64, f64),
    step: f64,
) -> Result<Biextremal, OcpError> {
    let (a, b) = interval;
    validate_interval(a, b, step)?;
    let n = dynamics.dim();
    check_len("state", n, x0.len())?;
    check_len("covector", n, lambda0.len())?;
    check_len("schedule inputs", dynamics.base().k(), schedule.inputs())?;
    if norm(lambda0) < MIN_MOMENTUM_NORM {
        return Err(OcpError::DegenerateMomentum { time: a });
    }
    let mut samples = vec![BiextremalSample {
        t: a,
        x: x0.to_vec(),
        lambda: lambda0.to_vec(),
        control: schedule.control_at(a)?,
    }];
    for seg in schedule.segments(a, b) {
        let last = samples.last().expect("nonempty");
        let mut z = last.x.clone();
        z.extend(&last.lambda);
        let recorded = integrate_recording(
            |t, z: &[f64]| {
                let u = seg.control.at(t).map_err(|e| FieldError::InvalidFlow(e.to_string()))?;
                let (xd, ld) =
                    hamilton_rhs(&z[..n], &z[n..], &u, dynamics).map_err(|e| FieldError::InvalidFlow(e.to_string()))?;
                Ok(xd.into_iter().chain(ld).collect())
            },
            seg.start,
            seg.end,
            step,
            &z,
        )?;
        for (t, z) in recorded {
            let lambda = z[n..].to_vec();
            if norm(&lambda) < MIN_MOMENTUM_NORM {
                return Err(OcpError::DegenerateMomentum { time: t });
            }
            samples.push(BiextremalSample {
                t,
                x: z[..n].to_vec(),
                lambda,
                control: seg.control.at(t)?,
            });
        }
    }
    Ok(Biextremal {
        mode: dynamics.mode(),
        lambda0: match dynamics.mode() {
            Mode::Extended => Some(lambda0[0]),
            Mode::Reduced => None,
        },
        samples,
        schedule: schedule.clone(),
        step,
    })
}

impl Biextremal {
    pub fn interval(&self) -> (f64, f64) {
        (self.samples[0].t, self.samples.last().expect("nonempty").t)
    }

    /// `(x(t), λ(t))`, integrating from the closest preceding sample.
    pub fn state_at(&self, t: f64, dynamics: &Dynamics) -> Result<(Point, Vec<f64>), OcpError> {
        let (a, b) = self.interval();
        if t < a || t > b {
            return Err(OcpError::Schedule(format!("time {t} outside [{a}, {b}]")));
        }
        let idx = self.samples.partition_point(|s| s.t <= t).saturating_sub(1);
        let s = &self.samples[idx];
        if s.t == t {
            return Ok((s.x.clone(), s.lambda.clone()));
        }
        let out = integrate_biextremal(&s.x, &s.lambda, &self.schedule, dynamics, (s.t, t), self.step)?;
        let last = out.samples.last().expect("nonempty");
        Ok((last.x.clone(), last.lambda.clone()))
    }
}

// ---------------------------------------------------------------------------
// Classification
// ---------------------------------------------------------------------------

/// Grid of initial momenta for the normal-lift search: `per_axis` cell
/// centres per coordinate of `[-radius, radius]`, with `p₀ = −1`.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentumGrid {
    pub per_axis: usize,
    pub radius: f64,
    /// Tolerance on `|∂H/∂u|` along the reference.
    pub tolerance: f64,
}

impl MomentumGrid {
    /// About `budget` points in dimension `m`.
    pub fn with_budget(m: usize, budget: usize) -> Self {
        let per_axis = ((budget as f64).powf(1.0 / m.max(1) as f64).round() as usize).max(2);
        MomentumGrid {
            per_axis,
            radius: 1.0,
            tolerance: 1e-6,
        }
    }

    pub fn points(&self, m: usize) -> Vec<Vec<f64>> {
        let n = self.per_axis;
        let axis: Vec<f64> = (0..n)
            .map(|i| -self.radius + self.radius * (2 * i + 1) as f64 / n as f64)
            .collect();
        let total = n.pow(m as u32);
        (0..total)
            .map(|mut idx| {
                let mut p = vec![0.0; m];
                for slot in p.iter_mut().rev() {
                    *slot = axis[idx % n];
                    idx /= n;
                }
                p
            })
            .collect()
    }
}

/// Outcome of searching for a normal lift of a reference trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalLiftSearch {
    pub grid: MomentumGrid,
    pub tried: usize,
    /// Initial momenta whose normal biextremal kept `∂H/∂u = 0` along the reference.
    pub found: Vec<Vec<f64>>,
}

/// Test each grid momentum `p(a)` (with `p₀ = −1`): transport it by the
/// adjoint equation along the reference and check the normal primary
/// constraint `−∂𝓕/∂uᶜ + ⟨p, X_c⟩ = 0` at every reference sample.
pub fn search_normal_lift(
    ext: &ExtendedSystem,
    reference: &Trajectory,
    grid: &MomentumGrid,
) -> Result<NormalLiftSearch, OcpError> {
    let dynamics = Dynamics::Extended(ext.clone());
    let m = ext.base().m();
    let x0 = &reference.samples[0].1;
    let mut xhat0 = vec![0.0];
    xhat0.extend(x0);
    let mut found = Vec::new();
    let points = grid.points(m);
    for p in &points {
        let mut lambda = vec![-1.0];
        lambda.extend(p);
        let bx = match integrate_biextremal(
            &xhat0,
            &lambda,
            &reference.schedule,
            &dynamics,
            reference.interval,
            reference.step,
        ) {
            Ok(bx) => bx,
            Err(OcpError::DegenerateMomentum { .. }) => continue,
            Err(e) => return Err(e),
        };
        let mut ok = true;
        for s in &bx.samples {
            let g = hamiltonian_control_gradient(&s.lambda, &s.x, &s.control, &dynamics)?;
            if g.iter().any(|v| v.abs() > grid.tolerance) {
                ok = false;
                break;
            }
        }
        if ok {
            found.push(p.clone());
        }
    }
    Ok(NormalLiftSearch {
        grid: grid.clone(),
        tried: points.len(),
        found,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub enum ExtremalClass {
    /// `λ₀ < 0`.
    Normal,
    /// `λ₀ = 0`; `normal_lift` summarises the search when one was run.
    Abnormal { normal_lift: Option<NormalLiftVerdict> },
}

#[derive(Clone, Debug, PartialEq)]
pub enum NormalLiftVerdict {
    /// Some grid momentum produced a normal lift.
    Found { count: usize },
    /// None found on the grid; strict abnormality is not asserted.
    NotFoundInconclusive { tried: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Classification {
    pub class: ExtremalClass,
    pub lambda0: f64,
}

impl fmt::Display for Classification {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.class {
            ExtremalClass::Normal => write!(f, "normal"),
            ExtremalClass::Abnormal { normal_lift: None } => write!(f, "abnormal"),
            ExtremalClass::Abnormal {
                normal_lift: Some(NormalLiftVerdict::Found { count }),
            } => write!(f, "abnormal; normal lift found ({count} grid momenta)"),
            ExtremalClass::Abnormal {
                normal_lift: Some(NormalLiftVerdict::NotFoundInconclusive { tried }),
            } => write!(
                f,
                "abnormal; normal lift not found over {tried} grid momenta (inconclusive)"
            ),
        }
    }
}

pub fn classify_extremal(bx: &Biextremal, lift: Option<&NormalLiftSearch>) -> Result<Classification, OcpError> {
    let lambda0 = bx
        .lambda0
        .ok_or_else(|| OcpError::Invariant("classification needs an extended-mode biextremal".into()))?;
    if lambda0 > ABNORMAL_TOL {
        return Err(OcpError::Invariant(format!("lambda0 = {lambda0} > 0")));
    }
    let class = if lambda0.abs() <= ABNORMAL_TOL {
        ExtremalClass::Abnormal {
            normal_lift: lift.map(|s| {
                if s.found.is_empty() {
                    NormalLiftVerdict::NotFoundInconclusive { tried: s.tried }
                } else {
                    NormalLiftVerdict::Found { count: s.found.len() }
                }
            }),
        }
    } else {
        ExtremalClass::Normal
    };
    Ok(Classification { class, lambda0 })
}

// ---------------------------------------------------------------------------
// Audit
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct ConditionResult {
    pub name: &'static str,
    pub passed: bool,
    /// The measured quantity (drift, gradient, pairing, norm, …).
    pub value: f64,
    pub tolerance: f64,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AuditReport {
    pub conditions: Vec<ConditionResult>,
}

impl AuditReport {
    pub fn all_passed(&self) -> bool {
        self.conditions.iter().all(|c| c.passed)
    }

    pub fn get(&self, name: &str) -> Option<&ConditionResult> {
        self.conditions.iter().find(|c| c.name == name)
    }
}

/// Check the necessary conditions along a biextremal: constant Hamiltonian,
/// stationarity in `u`, support of the cone, nontrivial momentum and the
/// sign/constancy of `λ₀`.
pub fn audit_necessary_conditions(bx: &Biextremal, cone: &Cone, dynamics: &Dynamics) -> Result<AuditReport, OcpError> {
    let mut conditions = Vec::new();

    let hs = bx
        .samples
        .iter()
        .map(|s| hamiltonian(&s.lambda, &s.x, &s.control, dynamics))
        .collect::<Result<Vec<f64>, _>>()?;
    let h0 = hs[0];
    let drift = hs.iter().map(|h| (h - h0).abs()).fold(0.0, f64::max);
    let tol_h = HAMILTONIAN_TOL * (1.0 + h0.abs());
    conditions.push(ConditionResult {
        name: "hamiltonian_constant",
        passed: drift <= tol_h,
        value: drift,
        tolerance: tol_h,
        detail: format!("H(a) = {h0:e}, max |H(t) - H(a)| = {drift:e}"),
    });

    let mut worst = 0.0f64;
    let mut worst_t = bx.samples[0].t;
    for s in &bx.samples {
        let g = hamiltonian_control_gradient(&s.lambda, &s.x, &s.control, dynamics)?;
        let gmax = g.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if gmax > worst {
            worst = gmax;
            worst_t = s.t;
        }
    }
    conditions.push(ConditionResult {
        name: "hamiltonian_stationary",
        passed: worst <= STATIONARITY_TOL,
        value: worst,
        tolerance: STATIONARITY_TOL,
        detail: format!("max_c |dH/du^c| = {worst:e} at t = {worst_t}"),
    });

    let (_, lambda_t) = bx.state_at(cone.time, dynamics)?;
    let covector = if cone.dim() == lambda_t.len() {
        lambda_t
    } else {
        dynamics.spatial(&lambda_t).to_vec()
    };
    let (passed, value, tolerance, detail) = match is_supporting(&covector, cone) {
        Ok(check) => (
            check.supporting,
            check.max_pairing,
            check.tolerance,
            format!(
                "max pairing over {} generators at t = {}",
                cone.generators.len(),
                cone.time
            ),
        ),
        Err(e) => (false, f64::NAN, 0.0, e.to_string()),
    };
    conditions.push(ConditionResult {
        name: "supporting_hyperplane",
        passed,
        value,
        tolerance,
        detail,
    });

    let min_norm = bx.samples.iter().map(|s| norm(&s.lambda)).fold(f64::INFINITY, f64::min);
    conditions.push(ConditionResult {
        name: "momentum_nontrivial",
        passed: min_norm >= MIN_MOMENTUM_NORM,
        value: min_norm,
        tolerance: MIN_MOMENTUM_NORM,
        detail: format!("min |lambda(t)| = {min_norm:e}"),
    });

    let lambda0_result = match bx.mode {
        Mode::Extended => {
            let first = bx.samples[0].lambda[0];
            let spread = bx
                .samples
                .iter()
                .map(|s| (s.lambda[0] - first).abs())
                .fold(0.0, f64::max);
            ConditionResult {
                name: "lambda0_constant_nonpositive",
                passed: spread == 0.0 && first <= ABNORMAL_TOL,
                value: first,
                tolerance: ABNORMAL_TOL,
                detail: format!("lambda0 = {first}, variation {spread:e}"),
            }
        }
        Mode::Reduced => ConditionResult {
            name: "lambda0_constant_nonpositive",
            passed: true,
            value: 0.0,
            tolerance: ABNORMAL_TOL,
            detail: "reduced mode: lambda0 = 0 by construction".into(),
        },
    };
    conditions.push(lambda0_result);

    Ok(AuditReport { conditions })
}
