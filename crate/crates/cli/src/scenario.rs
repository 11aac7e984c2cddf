//! Scenario files: JSON on disk, validated into ready-to-run systems.

use std::path::Path;

use serde::Deserialize;
use sha2::{Digest, Sha256};

use geocon::expr::parse_expression;
use geocon::fields::{VectorField, DEFAULT_STEP};
use geocon::mech::{build_acc_system, ConnectionSpec};
use geocon::ocp::{build_control_affine, parse_cost, ControlAffineSystem, ControlBox, ControlSchedule, SystemSpec};
use geocon::pca::DEFAULT_MAX_LEVELS;
use geocon::variations::JetOptions;
use geocon::Expr;

use crate::CliError;

pub const DEFAULT_PER_TIME_BUDGET: usize = 16;
pub const DEFAULT_NORMAL_LIFT_BUDGET: usize = 1000;
pub const DEFAULT_CURVE_SAMPLES: usize = 100;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    name: String,
    chart: Vec<String>,
    #[serde(default)]
    controls: Option<Vec<String>>,
    #[serde(default)]
    system: Option<RawSystem>,
    #[serde(default)]
    mechanics: Option<RawMechanics>,
    #[serde(default)]
    cost: Option<String>,
    #[serde(default)]
    reference: Option<RawReference>,
    #[serde(default)]
    analysis: RawAnalysis,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSystem {
    #[serde(default)]
    drift: Option<Vec<String>>,
    inputs: Vec<Vec<String>>,
    #[serde(default)]
    bounds: Option<Vec<[f64; 2]>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMechanics {
    #[serde(default)]
    velocities: Option<Vec<String>>,
    #[serde(default)]
    christoffel: Option<Vec<Vec<Vec<String>>>>,
    inputs: Vec<Vec<String>>,
    #[serde(default)]
    bounds: Option<Vec<[f64; 2]>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawReference {
    initial_point: Vec<f64>,
    control: RawControl,
    interval: [f64; 2],
    #[serde(default)]
    step: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
enum RawControl {
    Constant(Vec<f64>),
    Piecewise { starts: Vec<f64>, values: Vec<Vec<f64>> },
    Expression(Vec<String>),
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAnalysis {
    #[serde(default)]
    time: Option<f64>,
    #[serde(default)]
    sample_times: Option<Vec<f64>>,
    #[serde(default)]
    per_time_budget: Option<usize>,
    #[serde(default)]
    max_levels: Option<usize>,
    #[serde(default)]
    pca_mode: Option<PcaModeName>,
    #[serde(default)]
    brackets: Option<Vec<BracketTerm>>,
    #[serde(default)]
    covector: Option<Vec<f64>>,
    #[serde(default)]
    decrease_direction: Option<Vec<f64>>,
    #[serde(default)]
    flow: Option<FlowRequest>,
    #[serde(default)]
    variation: Option<VariationRequest>,
    #[serde(default)]
    normal_lift_budget: Option<usize>,
    #[serde(default)]
    curve_samples: Option<usize>,
    #[serde(default)]
    jets: Option<RawJets>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawJets {
    #[serde(default)]
    s0: Option<f64>,
    #[serde(default)]
    eps_scale: Option<f64>,
    #[serde(default)]
    step: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PcaModeName {
    Abnormal,
    Extended,
}

/// A bracket expression over the named fields `X0…Xk`: a name or a pair.
#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum BracketTerm {
    Field(String),
    Pair(Vec<BracketTerm>),
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowRequest {
    pub field: String,
    pub duration: f64,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum VariationRequest {
    Needle {
        u1: Vec<f64>,
        #[serde(default = "unit")]
        l1: f64,
    },
    Bracket {
        /// 1-based input index.
        input: usize,
    },
}

fn unit() -> f64 {
    1.0
}

#[derive(Clone, Debug)]
pub struct Reference {
    pub initial_point: Vec<f64>,
    pub schedule: ControlSchedule,
    pub interval: (f64, f64),
    pub step: f64,
}

/// Analysis options with module defaults filled in.
#[derive(Clone, Debug)]
pub struct Analysis {
    pub time: Option<f64>,
    pub sample_times: Option<Vec<f64>>,
    pub per_time_budget: usize,
    pub max_levels: usize,
    pub pca_mode: PcaModeName,
    pub brackets: Option<Vec<BracketTerm>>,
    pub covector: Option<Vec<f64>>,
    pub decrease_direction: Option<Vec<f64>>,
    pub flow: Option<FlowRequest>,
    pub variation: Option<VariationRequest>,
    pub normal_lift_budget: usize,
    pub curve_samples: usize,
    pub jets: JetOptions,
}

#[derive(Clone, Debug)]
pub struct Scenario {
    pub name: String,
    /// Hex SHA-256 of the file bytes.
    pub digest: String,
    pub chart: Vec<String>,
    pub system: ControlAffineSystem,
    /// Present for mechanics scenarios; the system then lives on `TQ`.
    pub connection: Option<ConnectionSpec>,
    pub cost: Option<Expr>,
    pub reference: Option<Reference>,
    pub analysis: Analysis,
}

impl Scenario {
    pub fn require_reference(&self) -> Result<&Reference, CliError> {
        self.reference.as_ref().ok_or(CliError::MissingBlock("reference"))
    }

    /// `X0` is the drift, `X1…Xk` the inputs.
    pub fn named_field(&self, name: &str) -> Option<&VectorField> {
        let idx: usize = name.strip_prefix('X')?.parse().ok()?;
        match idx {
            0 => Some(self.system.drift()),
            i => self.system.inputs().get(i - 1),
        }
    }
}

fn schema(pointer: impl Into<String>, message: impl Into<String>) -> CliError {
    CliError::Schema {
        pointer: pointer.into(),
        message: message.into(),
    }
}

fn pointer_of(path: &serde_path_to_error::Path) -> String {
    use serde_path_to_error::Segment;
    let mut out = String::new();
    for seg in path.iter() {
        out.push('/');
        match seg {
            Segment::Seq { index } => out.push_str(&index.to_string()),
            Segment::Map { key } => out.push_str(&key.replace('~', "~0").replace('/', "~1")),
            Segment::Enum { variant } => out.push_str(variant),
            Segment::Unknown => out.push('?'),
        }
    }
    out
}

/// Parse every component against `vars`, reporting the pointer and column
/// of the first failure.
fn check_exprs(pointer: &str, srcs: &[String], vars: &[String]) -> Result<(), CliError> {
    let names: Vec<&str> = vars.iter().map(String::as_str).collect();
    for (i, src) in srcs.iter().enumerate() {
        if let Err(e) = parse_expression(src, &names) {
            return Err(CliError::Expression {
                pointer: format!("{pointer}/{i}"),
                column: e.column(),
                message: e.to_string(),
            });
        }
    }
    Ok(())
}

fn control_box(pointer: &str, bounds: &Option<Vec<[f64; 2]>>, k: usize) -> Result<Option<ControlBox>, CliError> {
    let Some(b) = bounds else {
        return Ok(None);
    };
    if b.len() != k {
        return Err(schema(pointer, format!("expected {k} bounds, found {}", b.len())));
    }
    ControlBox::new(b.iter().map(|p| p[0]).collect(), b.iter().map(|p| p[1]).collect())
        .map(Some)
        .map_err(|e| schema(pointer, e.to_string()))
}

pub fn load_scenario(path: &Path) -> Result<Scenario, CliError> {
    let bytes = std::fs::read(path).map_err(|source| CliError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_scenario(&bytes)
}

pub fn parse_scenario(bytes: &[u8]) -> Result<Scenario, CliError> {
    let digest: String = Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect();
    let de = &mut serde_json::Deserializer::from_slice(bytes);
    let raw: RawScenario = serde_path_to_error::deserialize(de).map_err(|e| {
        let pointer = pointer_of(e.path());
        schema(
            if pointer.is_empty() { "/".into() } else { pointer },
            e.into_inner().to_string(),
        )
    })?;
    build(raw, digest)
}

fn build(raw: RawScenario, digest: String) -> Result<Scenario, CliError> {
    let chart = raw.chart;
    if chart.is_empty() {
        return Err(schema("/chart", "chart must name at least one coordinate"));
    }
    let (system, connection) = match (raw.system, raw.mechanics) {
        (Some(_), Some(_)) => {
            return Err(schema(
                "/",
                "exactly one of \"system\" and \"mechanics\" must be present, found both",
            ))
        }
        (None, None) => {
            return Err(schema(
                "/",
                "exactly one of \"system\" and \"mechanics\" must be present, found neither",
            ))
        }
        (Some(s), None) => {
            if let Some(d) = &s.drift {
                check_exprs("/system/drift", d, &chart)?;
            }
            for (c, f) in s.inputs.iter().enumerate() {
                check_exprs(&format!("/system/inputs/{c}"), f, &chart)?;
            }
            let bounds = control_box("/system/bounds", &s.bounds, s.inputs.len())?;
            let spec = SystemSpec {
                coordinates: chart.clone(),
                controls: raw.controls.clone(),
                drift: s.drift,
                inputs: s.inputs,
                bounds: bounds.map(|b| b.lower.iter().copied().zip(b.upper.iter().copied()).collect()),
            };
            let sys = build_control_affine(&spec).map_err(|e| schema("/system", e.to_string()))?;
            (sys, None)
        }
        (None, Some(m)) => {
            let n = chart.len();
            let christoffel = match m.christoffel {
                Some(c) => {
                    for (i, a) in c.iter().enumerate() {
                        for (j, b) in a.iter().enumerate() {
                            check_exprs(&format!("/mechanics/christoffel/{i}/{j}"), b, &chart)?;
                        }
                    }
                    c
                }
                None => vec![vec![vec!["0".to_string(); n]; n]; n],
            };
            let conn = ConnectionSpec::parse(chart.clone(), m.velocities, &christoffel)
                .map_err(|e| schema("/mechanics", e.to_string()))?;
            let mut inputs = Vec::new();
            for (c, f) in m.inputs.iter().enumerate() {
                let pointer = format!("/mechanics/inputs/{c}");
                check_exprs(&pointer, f, &chart)?;
                inputs.push(VectorField::parse(&chart, f).map_err(|e| schema(pointer, e.to_string()))?);
            }
            let bounds = control_box("/mechanics/bounds", &m.bounds, inputs.len())?;
            let mut sys = build_acc_system(&conn, &inputs, bounds).map_err(|e| schema("/mechanics", e.to_string()))?;
            if let Some(names) = &raw.controls {
                sys = sys
                    .with_controls(names.clone())
                    .map_err(|e| schema("/controls", e.to_string()))?;
            }
            (sys, Some(conn))
        }
    };

    let cost = match &raw.cost {
        Some(src) => {
            let mut vars = system.coordinates().to_vec();
            vars.extend(system.control_names().iter().cloned());
            check_exprs("/cost", std::slice::from_ref(src), &vars).map_err(|e| match e {
                CliError::Expression { column, message, .. } => CliError::Expression {
                    pointer: "/cost".into(),
                    column,
                    message,
                },
                other => other,
            })?;
            Some(parse_cost(&system, src).map_err(|e| schema("/cost", e.to_string()))?)
        }
        None => None,
    };

    let reference = raw.reference.map(|r| build_reference(r, &system)).transpose()?;
    let analysis = build_analysis(raw.analysis, reference.as_ref())?;
    if analysis.pca_mode == PcaModeName::Extended && cost.is_none() {
        return Err(schema(
            "/analysis/pca_mode",
            "extended mode needs a \"cost\" expression",
        ));
    }

    Ok(Scenario {
        name: raw.name,
        digest,
        chart,
        system,
        connection,
        cost,
        reference,
        analysis,
    })
}

fn build_reference(r: RawReference, sys: &ControlAffineSystem) -> Result<Reference, CliError> {
    if r.initial_point.len() != sys.m() {
        return Err(schema(
            "/reference/initial_point",
            format!("expected {} coordinates, found {}", sys.m(), r.initial_point.len()),
        ));
    }
    let (a, b) = (r.interval[0], r.interval[1]);
    if !(a < b) {
        return Err(schema("/reference/interval", format!("need a < b, got [{a}, {b}]")));
    }
    let step = r.step.unwrap_or(DEFAULT_STEP);
    if !(step > 0.0) {
        return Err(schema("/reference/step", format!("step must be positive, got {step}")));
    }
    let k = sys.k();
    let schedule = match r.control {
        RawControl::Constant(u) => {
            if u.len() != k {
                return Err(schema(
                    "/reference/control/constant",
                    format!("expected {k} values, found {}", u.len()),
                ));
            }
            ControlSchedule::constant(u)
        }
        RawControl::Piecewise { starts, values } => {
            if let Some(i) = values.iter().position(|v| v.len() != k) {
                return Err(schema(
                    format!("/reference/control/piecewise/values/{i}"),
                    format!("expected {k} values, found {}", values[i].len()),
                ));
            }
            ControlSchedule::piecewise(starts, values)
                .map_err(|e| schema("/reference/control/piecewise", e.to_string()))?
        }
        RawControl::Expression(srcs) => {
            if srcs.len() != k {
                return Err(schema(
                    "/reference/control/expression",
                    format!("expected {k} expressions, found {}", srcs.len()),
                ));
            }
            check_exprs("/reference/control/expression", &srcs, &["t".to_string()])?;
            ControlSchedule::expression(&srcs).map_err(|e| schema("/reference/control/expression", e.to_string()))?
        }
    };
    Ok(Reference {
        initial_point: r.initial_point,
        schedule,
        interval: (a, b),
        step,
    })
}

fn build_analysis(raw: RawAnalysis, reference: Option<&Reference>) -> Result<Analysis, CliError> {
    let mut jets = JetOptions::default();
    if let Some(h) = reference.map(|r| r.step) {
        jets.step = h;
    }
    if let Some(j) = raw.jets {
        if let Some(v) = j.s0 {
            jets.s0 = v;
        }
        if let Some(v) = j.eps_scale {
            jets.eps_scale = v;
        }
        if let Some(v) = j.step {
            jets.step = v;
        }
    }
    if let Some(terms) = &raw.brackets {
        for (i, t) in terms.iter().enumerate() {
            check_bracket(t, &format!("/analysis/brackets/{i}"))?;
        }
    }
    Ok(Analysis {
        time: raw.time,
        sample_times: raw.sample_times,
        per_time_budget: raw.per_time_budget.unwrap_or(DEFAULT_PER_TIME_BUDGET),
        max_levels: raw.max_levels.unwrap_or(DEFAULT_MAX_LEVELS),
        pca_mode: raw.pca_mode.unwrap_or(PcaModeName::Abnormal),
        brackets: raw.brackets,
        covector: raw.covector,
        decrease_direction: raw.decrease_direction,
        flow: raw.flow,
        variation: raw.variation,
        normal_lift_budget: raw.normal_lift_budget.unwrap_or(DEFAULT_NORMAL_LIFT_BUDGET),
        curve_samples: raw.curve_samples.unwrap_or(DEFAULT_CURVE_SAMPLES).max(1),
        jets,
    })
}

fn check_bracket(t: &BracketTerm, pointer: &str) -> Result<(), CliError> {
    match t {
        BracketTerm::Field(_) => Ok(()),
        BracketTerm::Pair(v) if v.len() == 2 => {
            check_bracket(&v[0], &format!("{pointer}/0"))?;
            check_bracket(&v[1], &format!("{pointer}/1"))
        }
        BracketTerm::Pair(v) => Err(schema(
            pointer,
            format!("a bracket takes two arguments, found {}", v.len()),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "name": "integrator",
        "chart": ["x"],
        "system": {"inputs": [["1"]]}
    }"#;

    #[test]
    fn minimal_scenario_fills_defaults() {
        let s = parse_scenario(MINIMAL.as_bytes()).unwrap();
        assert_eq!((s.system.m(), s.system.k()), (1, 1));
        assert!(s.reference.is_none());
        assert_eq!(s.analysis.per_time_budget, DEFAULT_PER_TIME_BUDGET);
        assert_eq!(s.digest.len(), 64);
        assert!(matches!(
            s.require_reference(),
            Err(CliError::MissingBlock("reference"))
        ));
    }

    #[test]
    fn schema_errors_carry_pointers() {
        let bad = r#"{"name": "x", "chart": ["x"], "system": {"inputs": [[1]]}}"#;
        match parse_scenario(bad.as_bytes()) {
            Err(CliError::Schema { pointer, .. }) => assert_eq!(pointer, "/system/inputs/0/0"),
            other => panic!("{other:?}"),
        }
        let unknown = r#"{"name": "x", "chart": ["x"], "system": {"inputs": [["1"]]}, "extra": 1}"#;
        assert!(matches!(
            parse_scenario(unknown.as_bytes()),
            Err(CliError::Schema { .. })
        ));
    }

    #[test]
    fn expression_errors_carry_location() {
        let bad = r#"{"name": "x", "chart": ["x"], "system": {"inputs": [["1 + q"]]}}"#;
        match parse_scenario(bad.as_bytes()) {
            Err(CliError::Expression { pointer, column, .. }) => {
                assert_eq!(pointer, "/system/inputs/0/0");
                assert_eq!(column, 5);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn both_or_neither_block_rejected() {
        let both = r#"{"name": "x", "chart": ["x"], "system": {"inputs": [["1"]]}, "mechanics": {"inputs": [["1"]]}}"#;
        let neither = r#"{"name": "x", "chart": ["x"]}"#;
        for src in [both, neither] {
            match parse_scenario(src.as_bytes()) {
                Err(CliError::Schema { pointer, message }) => {
                    assert_eq!(pointer, "/");
                    assert!(message.contains("exactly one"));
                }
                other => panic!("{other:?}"),
            }
        }
    }

    #[test]
    fn mechanics_block_builds_on_tq() {
        let src = r#"{"name": "flat", "chart": ["x1", "x2"], "mechanics": {"inputs": [["1", "0"]]},
            "reference": {"initial_point": [0, 0, 1, 0], "control": {"constant": [0]}, "interval": [0, 1]}}"#;
        let s = parse_scenario(src.as_bytes()).unwrap();
        assert_eq!(s.system.m(), 4);
        assert!(s.connection.is_some());
        assert_eq!(s.require_reference().unwrap().step, DEFAULT_STEP);
    }

    #[test]
    fn bracket_terms_and_names() {
        let src = r#"{"name": "h", "chart": ["x", "y", "z"],
            "system": {"inputs": [["1", "0", "-y/2"], ["0", "1", "x/2"]]},
            "analysis": {"brackets": [["X1", "X2"], ["X1", ["X1", "X2"]]]}}"#;
        let s = parse_scenario(src.as_bytes()).unwrap();
        assert_eq!(s.analysis.brackets.as_ref().unwrap().len(), 2);
        assert!(s.named_field("X0").unwrap().is_zero());
        assert!(s.named_field("X3").is_none());
        let bad = src.replace(r#"["X1", "X2"], ["X1""#, r#"["X1"], ["X1""#);
        assert!(matches!(parse_scenario(bad.as_bytes()), Err(CliError::Schema { .. })));
    }
}
