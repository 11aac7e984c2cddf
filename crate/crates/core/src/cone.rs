//! Finite-generator approximations of the high-order perturbation cone at
//! `γ(t)` and supporting-hyperplane queries against them.
//!
//! A support query over finitely many generators is the same as a query
//! over their closed convex conic hull, so the cone is kept as a
//! deduplicated generator list.

use thiserror::Error;

use crate::fields::{dot, integrate_rhs, norm, Covector, FieldError, Point, TangentVector};
use crate::ocp::{ControlAffineSystem, OcpError, Trajectory};
use crate::scalar::Dual1;
use crate::simplex::{maximize, LpOutcome};
use crate::variations::{sample_perturbation_set, JetOptions, VariationError};

/// Relative support tolerance: `⟨λ, v⟩ ≤ SUPPORT_TOL · maxᵢ‖vᵢ‖`.
pub const SUPPORT_TOL: f64 = 1e-9;
/// Cosine above which two generators count as the same ray.
pub const DEDUP_COSINE: f64 = 1.0 - 1e-12;

const FIX_SLACK: f64 = 1e-11;
const NONZERO_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConeError {
    #[error("dimension mismatch: cone has dimension {expected}, got {found}")]
    Dimension { expected: usize, found: usize },
    #[error("zero covector rejected (nontriviality)")]
    ZeroCovector,
    #[error("generator based at {found:?}, cone base is {expected:?}")]
    Base { expected: Point, found: Point },
    #[error("invalid sample time {0}: must lie in (a, t] away from control switches")]
    SampleTime(f64),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error("{0}")]
    Variation(Box<VariationError>),
    #[error("{0}")]
    Ocp(Box<OcpError>),
    #[error("linear program failed: {0}")]
    Lp(String),
}

impl From<VariationError> for ConeError {
    fn from(e: VariationError) -> Self {
        ConeError::Variation(Box::new(e))
    }
}

impl From<OcpError> for ConeError {
    fn from(e: OcpError) -> Self {
        ConeError::Ocp(Box::new(e))
    }
}

/// Where a generator came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Provenance {
    pub time: f64,
    pub order: usize,
    pub recipe: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cone {
    pub base: Point,
    pub time: f64,
    pub generators: Vec<TangentVector>,
    pub provenance: Vec<Provenance>,
}

impl Cone {
    pub fn new(base: Point, time: f64) -> Self {
        Cone {
            base,
            time,
            generators: Vec::new(),
            provenance: Vec::new(),
        }
    }

    /// Cone at `base` spanned by plain component vectors.
    pub fn from_vectors(base: Point, vectors: &[Vec<f64>]) -> Result<Self, ConeError> {
        let mut cone = Cone::new(base.clone(), 0.0);
        for v in vectors {
            cone.add_generator(
                TangentVector::new(base.clone(), v.clone()),
                Provenance {
                    time: 0.0,
                    order: 0,
                    recipe: "given".into(),
                },
            )?;
        }
        Ok(cone)
    }

    pub fn dim(&self) -> usize {
        self.base.len()
    }

    pub fn is_empty(&self) -> bool {
        self.generators.is_empty()
    }

    /// Add `v` unless it is zero or a positive multiple of an existing generator.
    /// Returns whether it was added.
    pub fn add_generator(&mut self, v: TangentVector, prov: Provenance) -> Result<bool, ConeError> {
        if v.dim() != self.dim() {
            return Err(ConeError::Dimension {
                expected: self.dim(),
                found: v.dim(),
            });
        }
        let scale = norm(&self.base).max(1.0);
        if v.base.iter().zip(&self.base).any(|(a, b)| (a - b).abs() > 1e-9 * scale) {
            return Err(ConeError::Base {
                expected: self.base.clone(),
                found: v.base.clone(),
            });
        }
        let n = norm(&v.components);
        if n == 0.0 || !n.is_finite() {
            return Ok(false);
        }
        let dup = self.generators.iter().any(|g| {
            let ng = norm(&g.components);
            dot(&g.components, &v.components) / (ng * n) >= DEDUP_COSINE
        });
        if dup {
            return Ok(false);
        }
        self.generators
            .push(TangentVector::new(self.base.clone(), v.components));
        self.provenance.push(prov);
        Ok(true)
    }

    pub fn max_generator_norm(&self) -> f64 {
        self.generators.iter().map(|g| norm(&g.components)).fold(0.0, f64::max)
    }
}

/// Push `v ∈ T_{γ(t0)}M` forward along the reference to `γ(t1)`, segment by
/// segment, by integrating the variational equation with first-order duals.
pub fn transport_along(
    system: &ControlAffineSystem,
    reference: &Trajectory,
    v: &TangentVector,
    t0: f64,
    t1: f64,
) -> Result<TangentVector, ConeError> {
    let mut state: Vec<Dual1> = v
        .base
        .iter()
        .zip(&v.components)
        .map(|(&x, &d)| Dual1::new(x, d))
        .collect();
    for seg in reference.schedule.segments(t0, t1) {
        let control = &seg.control;
        state = integrate_rhs(
            |t, x: &[Dual1]| {
                let u = control.at(t).map_err(|e| FieldError::InvalidFlow(e.to_string()))?;
                let mut out = system.drift().eval(x)?;
                for (uc, f) in u.iter().zip(system.inputs()) {
                    if *uc != 0.0 {
                        for (o, fv) in out.iter_mut().zip(f.eval(x)?) {
                            *o = o.clone() + fv * Dual1::new(*uc, 0.0);
                        }
                    }
                }
                Ok(out)
            },
            seg.start,
            &Dual1::new(seg.end - seg.start, 0.0),
            reference.step,
            &state,
        )?;
    }
    Ok(TangentVector::new(
        state.iter().map(|s| s.re).collect(),
        state.iter().map(|s| s.du).collect(),
    ))
}

/// Union over sample times `t₀` of the sampled variations at `γ(t₀)`,
/// transported to `γ(t)`.
pub fn assemble_cone(
    system: &ControlAffineSystem,
    reference: &Trajectory,
    t: f64,
    sample_times: &[f64],
    per_time_budget: usize,
    opts: &JetOptions,
) -> Result<Cone, ConeError> {
    if !reference.contains_time(t) {
        return Err(ConeError::SampleTime(t));
    }
    let (a, _) = reference.interval;
    let breaks = reference.schedule.breakpoints(a, reference.interval.1);
    let base = reference.state_at(system, t)?;
    let mut cone = Cone::new(base.clone(), t);
    for &t0 in sample_times {
        let at_break = breaks.iter().any(|b| (b - t0).abs() < 1e-12);
        if !(t0 > a && t0 <= t) || at_break {
            return Err(ConeError::SampleTime(t0));
        }
        let set = sample_perturbation_set(system, reference, t0, 2, per_time_budget, opts)?;
        for pv in set {
            let moved = if t0 == t {
                pv.vector.clone()
            } else {
                transport_along(system, reference, &pv.vector, t0, t)?
            };
            // re-anchor exactly at the cone base; transport lands within integration error
            let moved = TangentVector::new(base.clone(), moved.components);
            cone.add_generator(
                moved,
                Provenance {
                    time: t0,
                    order: pv.order,
                    recipe: pv.recipe.kind.to_string(),
                },
            )?;
        }
    }
    Ok(cone)
}

/// Outcome of a support check.
#[derive(Clone, Debug, PartialEq)]
pub struct SupportCheck {
    pub supporting: bool,
    pub max_pairing: f64,
    pub tolerance: f64,
}

/// `max_i ⟨λ, v_i⟩ ≤ SUPPORT_TOL · max_i ‖v_i‖`; zero covectors are rejected.
pub fn is_supporting(lambda: &[f64], cone: &Cone) -> Result<SupportCheck, ConeError> {
    if lambda.len() != cone.dim() {
        return Err(ConeError::Dimension {
            expected: cone.dim(),
            found: lambda.len(),
        });
    }
    if lambda.iter().all(|&l| l == 0.0) {
        return Err(ConeError::ZeroCovector);
    }
    let tolerance = SUPPORT_TOL * cone.max_generator_norm();
    let max_pairing = cone
        .generators
        .iter()
        .map(|g| dot(lambda, &g.components))
        .fold(f64::NEG_INFINITY, f64::max);
    let max_pairing = if cone.is_empty() { 0.0 } else { max_pairing };
    Ok(SupportCheck {
        supporting: max_pairing <= tolerance,
        max_pairing,
        tolerance,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SupportReport {
    /// Normalised to `‖λ‖∞ = 1`.
    pub covector: Option<Covector>,
    pub max_pairing: f64,
    /// `⟨λ, d⟩` for the decrease direction `d`, when one was given.
    pub separating_margin: Option<f64>,
    pub feasible: bool,
}

/// LP over `w = λ + 1 ∈ [0, 2]^m` (and `ν = μ + 1 ∈ [0, 2]` with a direction).
struct SupportLp {
    m: usize,
    with_mu: bool,
    rows: Vec<Vec<f64>>,
    rhs: Vec<f64>,
}

impl SupportLp {
    fn new(m: usize, gens: &[Vec<f64>], dir: Option<&[f64]>) -> Self {
        let with_mu = dir.is_some();
        let n = m + usize::from(with_mu);
        let mut lp = SupportLp {
            m,
            with_mu,
            rows: Vec::new(),
            rhs: Vec::new(),
        };
        for g in gens {
            let mut row = g.clone();
            row.resize(n, 0.0);
            lp.rhs.push(g.iter().sum());
            lp.rows.push(row);
        }
        for j in 0..n {
            let mut row = vec![0.0; n];
            row[j] = 1.0;
            lp.rows.push(row);
            lp.rhs.push(2.0);
        }
        if let Some(d) = dir {
            // μ ≤ ⟨λ, d⟩  ⇔  ν − Σ d_j w_j ≤ 1 − Σ d_j
            let mut row: Vec<f64> = d.iter().map(|v| -v).collect();
            row.push(1.0);
            lp.rows.push(row);
            lp.rhs.push(1.0 - d.iter().sum::<f64>());
        }
        lp
    }

    fn width(&self) -> usize {
        self.m + usize::from(self.with_mu)
    }

    /// Constrain variable `j` (in `λ`/`μ` units) to `[lo, hi]`.
    fn bound(&mut self, j: usize, lo: f64, hi: f64) {
        let n = self.width();
        let mut up = vec![0.0; n];
        up[j] = 1.0;
        self.rows.push(up);
        self.rhs.push(hi + 1.0);
        let mut down = vec![0.0; n];
        down[j] = -1.0;
        self.rows.push(down);
        self.rhs.push(-(lo + 1.0));
    }

    /// Optimum of `sign · var_j` in `λ`/`μ` units.
    fn optimize(&self, j: usize, sign: f64) -> Result<f64, ConeError> {
        let mut c = vec![0.0; self.width()];
        c[j] = sign;
        match maximize(&c, &self.rows, &self.rhs) {
            LpOutcome::Optimal { x, .. } => Ok(x[j] - 1.0),
            LpOutcome::Infeasible => Err(ConeError::Lp("infeasible support program".into())),
            LpOutcome::Unbounded => Err(ConeError::Lp("unbounded support program".into())),
        }
    }
}

/// Find `λ ∈ [−1, 1]^m` with `⟨λ, v_i⟩ ≤ 0` for every generator.
///
/// With a decrease direction `d`, `μ = ⟨λ, d⟩` is maximised first. Ties are
/// broken by the reverse-lexicographically maximal vertex: the last
/// coordinate is maximised first, and until a nonzero coordinate has been
/// fixed a coordinate that can only be negative is pushed to its minimum.
pub fn find_supporting_covector(cone: &Cone, decrease_direction: Option<&[f64]>) -> Result<SupportReport, ConeError> {
    let m = cone.dim();
    if let Some(d) = decrease_direction {
        if d.len() != m {
            return Err(ConeError::Dimension {
                expected: m,
                found: d.len(),
            });
        }
    }
    let gens: Vec<Vec<f64>> = cone
        .generators
        .iter()
        .map(|g| {
            let n = norm(&g.components);
            g.components.iter().map(|v| v / n).collect()
        })
        .collect();
    let dir: Option<Vec<f64>> = decrease_direction.and_then(|d| {
        let n = norm(d);
        (n > 0.0).then(|| d.iter().map(|v| v / n).collect())
    });
    let mut lp = SupportLp::new(m, &gens, dir.as_deref());
    let mut mu = None;
    if dir.is_some() {
        let best = lp.optimize(m, 1.0)?;
        lp.bound(m, best - FIX_SLACK, 1.0);
        mu = Some(best);
    }
    let mut lambda = vec![0.0; m];
    let mut found = false;
    for j in (0..m).rev() {
        let hi = lp.optimize(j, 1.0)?;
        let value = if found || hi > NONZERO_TOL {
            hi
        } else {
            let lo = lp.optimize(j, -1.0)?;
            if lo < -NONZERO_TOL {
                lo
            } else {
                0.0
            }
        };
        if value.abs() > NONZERO_TOL {
            found = true;
        } else if !found {
            lambda[j] = 0.0;
            // λ = 0 is always feasible, so zero is pinned exactly: any slack
            // here is amplified by ill-conditioned generators downstream
            lp.bound(j, 0.0, 0.0);
            continue;
        }
        lambda[j] = value;
        lp.bound(j, value - FIX_SLACK, value + FIX_SLACK);
    }
    let top = lambda.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if !found || top <= NONZERO_TOL {
        return Ok(SupportReport {
            covector: None,
            max_pairing: 0.0,
            separating_margin: None,
            feasible: false,
        });
    }
    for l in lambda.iter_mut() {
        *l /= top;
        if l.abs() < 1e-12 {
            *l = 0.0;
        }
    }
    let check = is_supporting(&lambda, cone)?;
    let margin = decrease_direction.map(|d| dot(&lambda, d));
    let feasible = check.supporting && mu.is_none_or(|m| m >= -NONZERO_TOL);
    Ok(SupportReport {
        covector: Some(Covector::new(cone.base.clone(), lambda)),
        max_pairing: check.max_pairing,
        separating_margin: margin,
        feasible,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ocp::{build_control_affine, ControlSchedule, SystemSpec};

    fn e(m: usize, i: usize, s: f64) -> Vec<f64> {
        let mut v = vec![0.0; m];
        v[i] = s;
        v
    }

    #[test]
    fn dedup_and_zero_exclusion() {
        let cone = Cone::from_vectors(
            vec![0.0; 2],
            &[vec![1.0, 0.0], vec![2.0, 0.0], vec![0.0, 0.0], vec![-1.0, 0.0]],
        )
        .unwrap();
        assert_eq!(cone.generators.len(), 2);
    }

    #[test]
    fn plane_cone_gets_positive_last_coordinate() {
        let cone = Cone::from_vectors(vec![0.0; 3], &[e(3, 0, 1.0), e(3, 0, -1.0), e(3, 1, 1.0)]).unwrap();
        let rep = find_supporting_covector(&cone, None).unwrap();
        assert!(rep.feasible);
        assert_eq!(rep.covector.unwrap().components, vec![0.0, 0.0, 1.0]);
        assert!(rep.max_pairing.abs() <= 1e-12);
    }

    #[test]
    fn full_cone_has_no_support() {
        let gens: Vec<Vec<f64>> = (0..3).flat_map(|i| [e(3, i, 1.0), e(3, i, -1.0)]).collect();
        let cone = Cone::from_vectors(vec![0.0; 3], &gens).unwrap();
        let rep = find_supporting_covector(&cone, None).unwrap();
        assert!(!rep.feasible);
        assert!(rep.covector.is_none());
    }

    #[test]
    fn half_space_cone_is_supported_by_negative_normal() {
        let cone = Cone::from_vectors(vec![0.0; 2], &[e(2, 0, 1.0), e(2, 0, -1.0), e(2, 1, 1.0)]).unwrap();
        let rep = find_supporting_covector(&cone, None).unwrap();
        assert_eq!(rep.covector.unwrap().components, vec![0.0, -1.0]);
    }

    #[test]
    fn empty_cone_is_supported() {
        let cone = Cone::new(vec![0.0; 2], 0.0);
        let rep = find_supporting_covector(&cone, None).unwrap();
        assert!(rep.feasible);
        assert_eq!(rep.covector.unwrap().components, vec![1.0, 1.0]);
    }

    #[test]
    fn decrease_direction_margin() {
        let cone = Cone::from_vectors(vec![0.0; 2], &[e(2, 0, 1.0)]).unwrap();
        let rep = find_supporting_covector(&cone, Some(&[-1.0, 0.0])).unwrap();
        assert!(rep.feasible);
        assert!((rep.separating_margin.unwrap() - 1.0).abs() < 1e-9);
        let rep = find_supporting_covector(&cone, Some(&[1.0, 0.0])).unwrap();
        assert!(!rep.feasible || rep.separating_margin.unwrap() <= 1e-9);
    }

    #[test]
    fn support_checks() {
        let cone = Cone::from_vectors(vec![0.0; 2], &[e(2, 0, 1.0)]).unwrap();
        let c = is_supporting(&[-1.0, 0.0], &cone).unwrap();
        assert!(c.supporting && c.max_pairing == -1.0);
        let c = is_supporting(&[1.0, 0.0], &cone).unwrap();
        assert!(!c.supporting && c.max_pairing == 1.0);
        assert_eq!(is_supporting(&[0.0, 0.0], &cone), Err(ConeError::ZeroCovector));
        assert!(is_supporting(&[1.0], &cone).is_err());
    }

    #[test]
    fn martinet_cone_is_supported_by_dz() {
        let sys = build_control_affine(&SystemSpec {
            coordinates: vec!["x".into(), "y".into(), "z".into()],
            inputs: vec![
                vec!["1".into(), "0".into(), "0".into()],
                vec!["0".into(), "1".into(), "x^2".into()],
            ],
            ..Default::default()
        })
        .unwrap();
        let sched = ControlSchedule::constant(vec![0.0, 1.0]);
        let tr = Trajectory::integrate(&sys, &[0.0; 3], &sched, (0.0, 1.0), 1e-3).unwrap();
        let cone = assemble_cone(&sys, &tr, 1.0, &[0.25, 0.5, 0.75, 1.0], 64, &JetOptions::default()).unwrap();
        assert!(cone.provenance.iter().all(|p| p.order == 1));
        let rep = find_supporting_covector(&cone, None).unwrap();
        assert!(rep.feasible);
        let lam = rep.covector.unwrap().components;
        assert!(lam[0].abs() < 1e-9 && lam[1].abs() < 1e-9 && (lam[2] - 1.0).abs() < 1e-9);
        assert!(rep.max_pairing <= 1e-9);
        assert!(assemble_cone(&sys, &tr, 1.0, &[0.0], 8, &JetOptions::default()).is_err());
    }

    #[test]
    fn constant_drift_transport_is_identity() {
        let sys = build_control_affine(&SystemSpec {
            coordinates: vec!["x".into(), "y".into()],
            drift: Some(vec!["1".into(), "0".into()]),
            inputs: vec![vec!["0".into(), "1".into()]],
            ..Default::default()
        })
        .unwrap();
        let sched = ControlSchedule::constant(vec![0.0]);
        let tr = Trajectory::integrate(&sys, &[0.0, 0.0], &sched, (0.0, 1.0), 1e-3).unwrap();
        let v = TangentVector::new(vec![0.25, 0.0], vec![0.3, -0.7]);
        let w = transport_along(&sys, &tr, &v, 0.25, 1.0).unwrap();
        assert!((w.components[0] - 0.3).abs() < 1e-14 && (w.components[1] + 0.7).abs() < 1e-14);
        assert!((w.base[0] - 1.0).abs() < 1e-12);
    }
}
