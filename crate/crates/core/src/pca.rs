//! The bracket constraint ladder for abnormal extremals of control-affine
//! systems.
//!
//! Level 0 holds the input fields `X_c` (the primary constraints
//! `⟨λ, X_c⟩ = 0`). Along a biextremal `d/dt⟨λ, Z⟩ = ⟨λ, [ξ_u, Z]⟩`, and
//! `[ξ_u, Z] = [X₀, Z] + Σ uᵈ [X_d, Z]` is a polynomial of degree one in the
//! controls, so each level-`i` generator contributes its coefficient fields
//! as level-`i+1` candidates. Candidates are tested pointwise at sample
//! points along the reference trajectory.

use std::fmt;

use thiserror::Error;

use crate::expr::Expr;
use crate::fields::{lie_bracket, Covector, FieldError, Point, VectorField};
use crate::linalg::{null_space, rank, RANK_TOL};
use crate::ocp::{ControlAffineSystem, OcpError, Trajectory};

pub const DEFAULT_MAX_LEVELS: usize = 6;
/// Number of default sample points along the reference.
pub const DEFAULT_SAMPLES: usize = 5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PcaError {
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Ocp(#[from] OcpError),
    #[error("ladder did not stabilize within {0} levels")]
    NotStabilized(usize),
    #[error("need at least one sample point away from control switches")]
    NoSamples,
    #[error("point has dimension {found}, system has {expected}")]
    Dimension { expected: usize, found: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PcaMode {
    /// `⟨λ, X_c⟩ = 0` on `T*M`.
    AbnormalReduced,
    /// Extended manifold; the `p₀ ∂𝓕/∂uᶜ` terms are recorded for the normal branch.
    Extended,
}

/// `⟨λ, W₀(x)⟩ + Σ uᵈ ⟨λ, W_d(x)⟩`.
#[derive(Clone, Debug)]
pub struct ControlPolynomialConstraint {
    pub constant_part: VectorField,
    pub linear_parts: Vec<VectorField>,
}

impl ControlPolynomialConstraint {
    pub fn is_u_free(&self) -> bool {
        self.linear_parts.iter().all(VectorField::is_zero)
    }

    pub fn degree(&self) -> usize {
        usize::from(!self.is_u_free())
    }
}

/// Which field a generator was bracketed with.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BracketWith {
    Drift,
    Input(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Origin {
    /// Input field `X_{c+1}`.
    Input(usize),
    /// `[with, parent]` where `parent` indexes the previous level's generators.
    Bracket { with: BracketWith, parent: usize },
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Origin::Input(c) => write!(f, "X{}", c + 1),
            Origin::Bracket {
                with: BracketWith::Drift,
                parent,
            } => write!(f, "[X0, Z{}]", parent + 1),
            Origin::Bracket {
                with: BracketWith::Input(d),
                parent,
            } => write!(f, "[X{}, Z{}]", d + 1, parent + 1),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Generator {
    pub field: VectorField,
    pub origin: Origin,
}

#[derive(Clone, Debug)]
pub struct Level {
    pub index: usize,
    /// Generators that enlarged the span at some sample point.
    pub generators: Vec<Generator>,
    /// Nonzero candidates already in the span at every sample point. They
    /// remain constraints but are not bracketed further.
    pub dependent: Vec<Generator>,
    /// One control polynomial per parent generator (empty at level 0).
    pub constraints: Vec<ControlPolynomialConstraint>,
    /// Cumulative span dimension at each sample point after this level.
    pub span_dims: Vec<usize>,
    /// Some `u`-coefficient field `[X_d, Z]` was nonzero: the branch where
    /// controls could be solved for exists (reported, not pursued).
    pub control_branch: bool,
}

#[derive(Clone, Debug)]
pub struct ConstraintLadder {
    pub mode: PcaMode,
    pub m: usize,
    pub sample_points: Vec<(f64, Point)>,
    pub levels: Vec<Level>,
    pub stabilized_at: Option<usize>,
    /// `∂𝓕/∂uᶜ` in extended mode (coefficient of `p₀` in `∂H/∂uᶜ`).
    pub cost_terms: Vec<Expr>,
}

impl ConstraintLadder {
    /// All generators adopted so far, level by level.
    pub fn adopted(&self) -> impl Iterator<Item = &Generator> {
        self.levels.iter().flat_map(|l| l.generators.iter())
    }

    /// Adopted and dependent generators: every constraint field.
    pub fn constraint_fields(&self) -> impl Iterator<Item = &Generator> {
        self.levels
            .iter()
            .flat_map(|l| l.generators.iter().chain(l.dependent.iter()))
    }

    pub fn final_span_dims(&self) -> Vec<usize> {
        self.levels
            .last()
            .map(|l| l.span_dims.clone())
            .unwrap_or_else(|| vec![0; self.sample_points.len()])
    }
}

fn evaluate_rows<'a, I>(fields: I, x: &[f64]) -> Result<Vec<Vec<f64>>, PcaError>
where
    I: Iterator<Item = &'a VectorField>,
{
    fields.map(|f| Ok(f.eval(x)?)).collect()
}

/// Times `a + (b−a)(i + ½)/n`, nudged off control switches.
pub fn default_sample_times(reference: &Trajectory, n: usize) -> Vec<f64> {
    let (a, b) = reference.interval;
    if b == a {
        return vec![a];
    }
    let breaks = reference.schedule.breakpoints(a, b);
    (0..n)
        .map(|i| {
            let t = a + (b - a) * (i as f64 + 0.5) / n as f64;
            if breaks.iter().any(|s| (s - t).abs() < 1e-12) {
                t + 1e-6 * (b - a)
            } else {
                t
            }
        })
        .collect()
}

/// Level 0: the nonzero input fields.
pub fn primary_constraints(
    sys: &ControlAffineSystem,
    mode: PcaMode,
    cost: Option<&Expr>,
    sample_points: Vec<(f64, Point)>,
) -> Result<ConstraintLadder, PcaError> {
    let m = sys.m();
    for (_, p) in &sample_points {
        if p.len() != m {
            return Err(PcaError::Dimension {
                expected: m,
                found: p.len(),
            });
        }
    }
    let generators: Vec<Generator> = sys
        .inputs()
        .iter()
        .enumerate()
        .filter(|(_, f)| !f.is_zero())
        .map(|(c, f)| Generator {
            field: f.clone(),
            origin: Origin::Input(c),
        })
        .collect();
    let span_dims = sample_points
        .iter()
        .map(|(_, p)| {
            Ok(rank(
                &evaluate_rows(generators.iter().map(|g| &g.field), p)?,
                m,
                RANK_TOL,
            ))
        })
        .collect::<Result<Vec<_>, PcaError>>()?;
    let cost_terms = match (mode, cost) {
        (PcaMode::Extended, Some(c)) => sys.control_names().iter().map(|u| c.differentiate(u)).collect(),
        _ => Vec::new(),
    };
    let empty = generators.is_empty();
    Ok(ConstraintLadder {
        mode,
        m,
        sample_points,
        levels: vec![Level {
            index: 0,
            generators,
            dependent: Vec::new(),
            constraints: Vec::new(),
            span_dims,
            control_branch: false,
        }],
        stabilized_at: empty.then_some(0),
        cost_terms,
    })
}

/// Bracket the newest generators with `X₀` and every `X_d`; adopt candidates
/// that are symbolically nonzero and enlarge the span at some sample point.
/// Sets `stabilized_at` when the new level adds nothing, or when the span
/// was already full at every sample point.
pub fn ladder_step(mut ladder: ConstraintLadder, sys: &ControlAffineSystem) -> Result<ConstraintLadder, PcaError> {
    if ladder.stabilized_at.is_some() {
        return Ok(ladder);
    }
    let m = ladder.m;
    let last = ladder.levels.last().expect("level 0 exists");
    let current = last.index;
    if last.span_dims.iter().all(|&d| d == m) {
        ladder.stabilized_at = Some(current);
        return Ok(ladder);
    }
    let parents: Vec<VectorField> = last.generators.iter().map(|g| g.field.clone()).collect();
    let mut rows_at: Vec<Vec<Vec<f64>>> = ladder
        .sample_points
        .iter()
        .map(|(_, p)| evaluate_rows(ladder.adopted().map(|g| &g.field), p))
        .collect::<Result<_, _>>()?;
    let mut ranks: Vec<usize> = rows_at.iter().map(|r| rank(r, m, RANK_TOL)).collect();

    let mut generators = Vec::new();
    let mut dependent = Vec::new();
    let mut constraints = Vec::new();
    let mut control_branch = false;
    for (j, z) in parents.iter().enumerate() {
        let constant_part = lie_bracket(sys.drift(), z)?;
        let linear_parts = sys
            .inputs()
            .iter()
            .map(|xd| lie_bracket(xd, z))
            .collect::<Result<Vec<_>, _>>()?;
        let constraint = ControlPolynomialConstraint {
            constant_part,
            linear_parts,
        };
        control_branch |= !constraint.is_u_free();
        let candidates = std::iter::once((BracketWith::Drift, &constraint.constant_part)).chain(
            constraint
                .linear_parts
                .iter()
                .enumerate()
                .map(|(d, f)| (BracketWith::Input(d), f)),
        );
        for (with, field) in candidates {
            if field.is_zero() {
                continue;
            }
            let gen = Generator {
                field: field.clone(),
                origin: Origin::Bracket { with, parent: j },
            };
            let mut grows = false;
            let mut new_rows = Vec::with_capacity(rows_at.len());
            for (rows, (_, p)) in rows_at.iter().zip(&ladder.sample_points) {
                let mut r = rows.clone();
                r.push(field.eval(p)?);
                new_rows.push(r);
            }
            let new_ranks: Vec<usize> = new_rows.iter().map(|r| rank(r, m, RANK_TOL)).collect();
            if new_ranks.iter().zip(&ranks).any(|(a, b)| a > b) {
                grows = true;
            }
            if grows {
                rows_at = new_rows;
                ranks = new_ranks;
                generators.push(gen);
            } else {
                dependent.push(gen);
            }
        }
        constraints.push(constraint);
    }
    let added = !generators.is_empty();
    ladder.levels.push(Level {
        index: current + 1,
        generators,
        dependent,
        constraints,
        span_dims: ranks,
        control_branch,
    });
    if !added {
        ladder.stabilized_at = Some(current + 1);
    }
    Ok(ladder)
}

/// Options for [`run_algorithm`].
#[derive(Clone, Debug)]
pub struct PcaOptions {
    pub mode: PcaMode,
    pub max_levels: usize,
    /// Sample times; defaults to [`default_sample_times`].
    pub sample_times: Option<Vec<f64>>,
    pub cost: Option<Expr>,
}

impl Default for PcaOptions {
    fn default() -> Self {
        PcaOptions {
            mode: PcaMode::AbnormalReduced,
            max_levels: DEFAULT_MAX_LEVELS,
            sample_times: None,
            cost: None,
        }
    }
}

/// Iterate [`ladder_step`] until stabilization or `max_levels` brackets deep.
pub fn run_algorithm(
    sys: &ControlAffineSystem,
    reference: &Trajectory,
    opts: &PcaOptions,
) -> Result<ConstraintLadder, PcaError> {
    let times = match &opts.sample_times {
        Some(t) => reference.admissible_times(t),
        None => default_sample_times(reference, DEFAULT_SAMPLES),
    };
    if times.is_empty() {
        return Err(PcaError::NoSamples);
    }
    let points = times
        .iter()
        .map(|&t| Ok((t, reference.state_at(sys, t)?)))
        .collect::<Result<Vec<_>, PcaError>>()?;
    let mut ladder = primary_constraints(sys, opts.mode, opts.cost.as_ref(), points)?;
    while ladder.stabilized_at.is_none() && ladder.levels.len() <= opts.max_levels {
        ladder = ladder_step(ladder, sys)?;
    }
    Ok(ladder)
}

/// Orthonormal basis of the covectors annihilating every constraint field
/// of a stabilized ladder at `x`.
pub fn annihilator_at(x: &[f64], ladder: &ConstraintLadder) -> Result<Vec<Covector>, PcaError> {
    if ladder.stabilized_at.is_none() {
        return Err(PcaError::NotStabilized(ladder.levels.len().saturating_sub(1)));
    }
    if x.len() != ladder.m {
        return Err(PcaError::Dimension {
            expected: ladder.m,
            found: x.len(),
        });
    }
    let rows = evaluate_rows(ladder.constraint_fields().map(|g| &g.field), x)?;
    Ok(null_space(&rows, ladder.m, RANK_TOL)
        .into_iter()
        .map(|c| Covector::new(x.to_vec(), c))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ocp::{build_control_affine, ControlSchedule, SystemSpec};

    fn sys(coords: &[&str], drift: Option<&[&str]>, inputs: &[&[&str]]) -> ControlAffineSystem {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        build_control_affine(&SystemSpec {
            coordinates: s(coords),
            drift: drift.map(s),
            inputs: inputs.iter().map(|f| s(f)).collect(),
            ..Default::default()
        })
        .unwrap()
    }

    fn run(sys: &ControlAffineSystem, x0: &[f64], u: Vec<f64>) -> ConstraintLadder {
        let tr = Trajectory::integrate(sys, x0, &ControlSchedule::constant(u), (0.0, 1.0), 1e-3).unwrap();
        run_algorithm(sys, &tr, &PcaOptions::default()).unwrap()
    }

    #[test]
    fn martinet_ladder() {
        let s = sys(&["x", "y", "z"], None, &[&["1", "0", "0"], &["0", "1", "x^2"]]);
        let ladder = run(&s, &[0.0; 3], vec![0.0, 1.0]);
        assert_eq!(ladder.levels[0].generators.len(), 2);
        assert_eq!(ladder.stabilized_at, Some(1));
        assert!(ladder.levels[1].generators.is_empty());
        assert_eq!(ladder.levels[1].dependent[0].field.render(), vec!["0", "0", "-2 * x"]);
        assert!(ladder.levels[1].control_branch);
        assert!(ladder.final_span_dims().iter().all(|&d| d == 2));
        let ann = annihilator_at(&[0.0, 0.5, 0.0], &ladder).unwrap();
        assert_eq!(ann.len(), 1);
        assert_eq!(ann[0].components, vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn heisenberg_ladder_is_full() {
        let s = sys(&["x", "y", "z"], None, &[&["1", "0", "-y/2"], &["0", "1", "x/2"]]);
        let ladder = run(&s, &[0.0; 3], vec![1.0, 0.5]);
        assert_eq!(ladder.stabilized_at, Some(1));
        assert_eq!(ladder.levels[1].generators[0].field.render(), vec!["0", "0", "-1"]);
        assert!(ladder.final_span_dims().iter().all(|&d| d == 3));
        assert!(annihilator_at(&[0.3, 0.1, 0.0], &ladder).unwrap().is_empty());
    }

    #[test]
    fn flat_connection_ladder() {
        let s = sys(
            &["x1", "x2", "v1", "v2"],
            Some(&["v1", "v2", "0", "0"]),
            &[&["0", "0", "1", "0"]],
        );
        let ladder = run(&s, &[0.0, 0.0, 1.0, 0.0], vec![0.0]);
        assert_eq!(ladder.stabilized_at, Some(2));
        assert_eq!(ladder.levels[1].generators[0].field.render(), vec!["-1", "0", "0", "0"]);
        let ann = annihilator_at(&[0.5, 0.0, 1.0, 0.0], &ladder).unwrap();
        let comps: Vec<_> = ann.iter().map(|c| c.components.clone()).collect();
        assert_eq!(comps, vec![vec![0.0, 1.0, 0.0, 0.0], vec![0.0, 0.0, 0.0, 1.0]]);
    }

    #[test]
    fn no_inputs_means_empty_ladder() {
        let s = sys(&["x", "y"], Some(&["1", "0"]), &[]);
        let ladder = run(&s, &[0.0, 0.0], vec![]);
        assert_eq!(ladder.stabilized_at, Some(0));
        let ann = annihilator_at(&[0.0, 0.0], &ladder).unwrap();
        assert_eq!(ann.len(), 2);
    }

    #[test]
    fn unstabilized_ladder_refuses_annihilator() {
        let s = sys(&["x", "y", "z"], None, &[&["1", "0", "-y/2"], &["0", "1", "x/2"]]);
        let tr = Trajectory::integrate(
            &s,
            &[0.0; 3],
            &ControlSchedule::constant(vec![1.0, 0.0]),
            (0.0, 1.0),
            1e-3,
        )
        .unwrap();
        let pts = vec![(0.5, tr.state_at(&s, 0.5).unwrap())];
        let ladder = primary_constraints(&s, PcaMode::AbnormalReduced, None, pts).unwrap();
        assert!(matches!(
            annihilator_at(&[0.0; 3], &ladder),
            Err(PcaError::NotStabilized(_))
        ));
    }

    #[test]
    fn extended_mode_records_cost_terms() {
        let s = sys(&["x", "y", "z"], None, &[&["1", "0", "0"], &["0", "1", "x^2"]]);
        let cost = crate::ocp::parse_cost(&s, "(u1^2 + u2^2)/2").unwrap();
        let tr = Trajectory::integrate(
            &s,
            &[0.0; 3],
            &ControlSchedule::constant(vec![0.0, 1.0]),
            (0.0, 1.0),
            1e-3,
        )
        .unwrap();
        let opts = PcaOptions {
            mode: PcaMode::Extended,
            cost: Some(cost),
            ..Default::default()
        };
        let ladder = run_algorithm(&s, &tr, &opts).unwrap();
        let rendered: Vec<String> = ladder.cost_terms.iter().map(|e| e.to_string()).collect();
        assert_eq!(rendered, vec!["u1", "u2"]);
    }
}
