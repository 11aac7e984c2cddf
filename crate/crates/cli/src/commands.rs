//! One function per subcommand; each delegates to a library operation and
//! shapes the result into a report.

use std::fmt;
use std::str::FromStr;

use log::{debug, info};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use geocon::cone::{assemble_cone, find_supporting_covector, is_supporting, Cone};
use geocon::fields::{dot, integrate_flow, lie_bracket, norm, FlowSpec, VectorField};
use geocon::mech::acc_generators;
use geocon::ocp::{
    audit_necessary_conditions, classify_extremal, extend_system, hamiltonian, integrate_biextremal,
    search_normal_lift, Biextremal, Dynamics, MomentumGrid, Trajectory,
};
use geocon::pca::{
    annihilator_at, default_sample_times, run_algorithm, ConstraintLadder, Generator, PcaMode, PcaOptions,
    DEFAULT_SAMPLES,
};
use geocon::variations::{asymptotic_check, bracket_variation, needle_variation, S_MAX};

use crate::report::{csv, matrix, num, nums, render, strings, Obj, SCHEMA_VERSION};
use crate::scenario::{BracketTerm, PcaModeName, Scenario, VariationRequest};
use crate::CliError;

/// Bound on `|⟨λ(t), Z(γ(t))⟩|` over ladder fields along an abnormal biextremal.
pub const LADDER_PAIRING_TOL: f64 = 1e-7;
/// Random unit covectors in the cone's direction-sampling diagnostic.
pub const SAMPLED_DIRECTIONS: usize = 4000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Bracket,
    Flow,
    Variation,
    Cone,
    Pca,
    Extremal,
    Audit,
    MechCheck,
}

impl Command {
    pub const ALL: [Command; 8] = [
        Command::Bracket,
        Command::Flow,
        Command::Variation,
        Command::Cone,
        Command::Pca,
        Command::Extremal,
        Command::Audit,
        Command::MechCheck,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::Bracket => "bracket",
            Command::Flow => "flow",
            Command::Variation => "variation",
            Command::Cone => "cone",
            Command::Pca => "pca",
            Command::Extremal => "extremal",
            Command::Audit => "audit",
            Command::MechCheck => "mech-check",
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Command {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Command::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| format!("unknown command '{s}'"))
    }
}

/// Command-line overrides.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Options {
    pub covector: Option<Vec<f64>>,
    pub time: Option<f64>,
    pub step: Option<f64>,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct Outcome {
    pub report: Value,
    /// CSV curve for `flow` and `variation`.
    pub csv: Option<String>,
    pub passed: bool,
}

impl Outcome {
    pub fn exit_code(&self) -> i32 {
        if self.passed {
            0
        } else {
            crate::EXIT_VERDICT
        }
    }

    /// What goes to stdout: the curve if there is one, else the report.
    pub fn stdout(&self) -> String {
        self.csv.clone().unwrap_or_else(|| render(&self.report))
    }
}

struct Partial {
    result: Value,
    csv: Option<String>,
    passed: bool,
}

pub fn run_command(
    cmd: Command,
    scenario: &Scenario,
    scenario_path: &str,
    opts: &Options,
) -> Result<Outcome, CliError> {
    let mut sc = scenario.clone();
    if let Some(h) = opts.step {
        if !(h > 0.0) {
            return Err(CliError::MissingInput(format!("--step must be positive, got {h}")));
        }
        if let Some(r) = sc.reference.as_mut() {
            r.step = h;
        }
        sc.analysis.jets.step = h;
    }
    info!("running {cmd} on scenario '{}'", sc.name);
    let part = match cmd {
        Command::Bracket => bracket(&sc)?,
        Command::Flow => flow(&sc)?,
        Command::Variation => variation(&sc, opts)?,
        Command::Cone => cone(&sc, opts)?,
        Command::Pca => pca(&sc)?,
        Command::Extremal => extremal(&sc, opts)?,
        Command::Audit => audit(&sc, opts)?,
        Command::MechCheck => mech_check(&sc, opts)?,
    };
    let mut echo = Obj::new().with("name", cmd.name()).with("scenario", scenario_path);
    if let Some(c) = &opts.covector {
        echo.set("covector", nums(c));
    }
    if let Some(t) = opts.time {
        echo.set("time", num(t));
    }
    if let Some(h) = opts.step {
        echo.set("step", num(h));
    }
    echo.set("seed", opts.seed);
    let report: Value = Obj::new()
        .with("schema_version", SCHEMA_VERSION)
        .with("command", echo)
        .with(
            "scenario",
            Obj::new()
                .with("name", sc.name.as_str())
                .with("sha256", sc.digest.as_str()),
        )
        .with("verdict", if part.passed { "pass" } else { "fail" })
        .with("result", part.result)
        .into();
    Ok(Outcome {
        report,
        csv: part.csv,
        passed: part.passed,
    })
}

fn reference_trajectory(sc: &Scenario) -> Result<Trajectory, CliError> {
    let r = sc.require_reference()?;
    debug!(
        "integrating reference on [{}, {}] with h = {}",
        r.interval.0, r.interval.1, r.step
    );
    Trajectory::integrate(&sc.system, &r.initial_point, &r.schedule, r.interval, r.step)
        .map_err(|e| CliError::analysis("reference trajectory", e))
}

fn pick_time(sc: &Scenario, opts: &Options, default: f64) -> f64 {
    opts.time.or(sc.analysis.time).unwrap_or(default)
}

fn sample_times(sc: &Scenario, tr: &Trajectory) -> Vec<f64> {
    match &sc.analysis.sample_times {
        Some(t) => tr.admissible_times(t),
        None => default_sample_times(tr, DEFAULT_SAMPLES),
    }
}

// ---------------------------------------------------------------------------
// bracket
// ---------------------------------------------------------------------------

fn default_brackets(sc: &Scenario) -> Vec<BracketTerm> {
    let first = if sc.system.drift().is_zero() { 1 } else { 0 };
    let k = sc.system.k();
    let mut out = Vec::new();
    for i in first..=k {
        for j in i + 1..=k {
            out.push(BracketTerm::Pair(vec![
                BracketTerm::Field(format!("X{i}")),
                BracketTerm::Field(format!("X{j}")),
            ]));
        }
    }
    out
}

fn eval_bracket(sc: &Scenario, t: &BracketTerm, pointer: &str) -> Result<(String, VectorField), CliError> {
    match t {
        BracketTerm::Field(name) => {
            sc.named_field(name)
                .map(|f| (name.clone(), f.clone()))
                .ok_or_else(|| CliError::Schema {
                    pointer: pointer.to_string(),
                    message: format!("unknown field '{name}' (expected X0..X{})", sc.system.k()),
                })
        }
        BracketTerm::Pair(v) => {
            let (la, a) = eval_bracket(sc, &v[0], &format!("{pointer}/0"))?;
            let (lb, b) = eval_bracket(sc, &v[1], &format!("{pointer}/1"))?;
            let f = lie_bracket(&a, &b).map_err(|e| CliError::analysis("bracket", e))?;
            Ok((format!("[{la}, {lb}]"), f))
        }
    }
}

fn bracket(sc: &Scenario) -> Result<Partial, CliError> {
    let terms = sc.analysis.brackets.clone().unwrap_or_else(|| default_brackets(sc));
    let x0 = sc.reference.as_ref().map(|r| r.initial_point.clone());
    let mut rows = Vec::new();
    for (i, t) in terms.iter().enumerate() {
        let (label, f) = eval_bracket(sc, t, &format!("/analysis/brackets/{i}"))?;
        let mut row = Obj::new()
            .with("bracket", label)
            .with("components", strings(&f.render()));
        if let Some(x) = &x0 {
            let v = f.eval(x).map_err(|e| CliError::analysis("bracket evaluation", e))?;
            row.set("at_initial_point", nums(&v));
        }
        rows.push(Value::from(row));
    }
    Ok(Partial {
        result: Obj::new()
            .with("chart", strings(sc.system.coordinates()))
            .with("brackets", rows)
            .into(),
        csv: None,
        passed: true,
    })
}

// ---------------------------------------------------------------------------
// flow
// ---------------------------------------------------------------------------

fn flow(sc: &Scenario) -> Result<Partial, CliError> {
    let r = sc.require_reference()?;
    let mut header = vec!["t".to_string()];
    header.extend(sc.system.coordinates().iter().cloned());
    let (label, rows) = match &sc.analysis.flow {
        Some(req) => {
            let field = sc.named_field(&req.field).ok_or_else(|| CliError::Schema {
                pointer: "/analysis/flow/field".into(),
                message: format!("unknown field '{}'", req.field),
            })?;
            let n = sc.analysis.curve_samples;
            let dt = req.duration / n as f64;
            let mut x = r.initial_point.clone();
            let mut rows = vec![row_of(0.0, &x)];
            for i in 1..=n {
                if dt != 0.0 {
                    let spec = FlowSpec::new(field.clone(), dt, r.step).map_err(|e| CliError::analysis("flow", e))?;
                    x = integrate_flow(&spec, &x).map_err(|e| CliError::analysis("flow", e))?;
                }
                rows.push(row_of(i as f64 * dt, &x));
            }
            (req.field.clone(), rows)
        }
        None => {
            let tr = reference_trajectory(sc)?;
            let rows = tr.samples.iter().map(|(t, x)| row_of(*t, x)).collect();
            ("reference".to_string(), rows)
        }
    };
    let last = rows.last().expect("at least the initial row");
    let result = Obj::new()
        .with("field", label)
        .with("rows", rows.len())
        .with("final_time", num(last[0]))
        .with("final_point", nums(&last[1..]))
        .into();
    Ok(Partial {
        result,
        csv: Some(csv(&header, &rows)),
        passed: true,
    })
}

fn row_of(t: f64, x: &[f64]) -> Vec<f64> {
    let mut row = vec![t];
    row.extend_from_slice(x);
    row
}

// ---------------------------------------------------------------------------
// variation
// ---------------------------------------------------------------------------

fn variation(sc: &Scenario, opts: &Options) -> Result<Partial, CliError> {
    let tr = reference_trajectory(sc)?;
    let (a, b) = tr.interval;
    let t0 = pick_time(sc, opts, 0.5 * (a + b));
    let x = tr
        .state_at(&sc.system, t0)
        .map_err(|e| CliError::analysis("variation", e))?;
    let u_ref = tr
        .schedule
        .control_at(t0)
        .map_err(|e| CliError::analysis("variation", e))?;
    let jets = &sc.analysis.jets;
    let request = match &sc.analysis.variation {
        Some(v) => v.clone(),
        None => {
            if sc.system.k() == 0 {
                return Err(CliError::MissingInput("a variation needs at least one input".into()));
            }
            let mut u1 = u_ref.clone();
            u1[0] += 1.0;
            VariationRequest::Needle { u1, l1: 1.0 }
        }
    };
    let pv = match &request {
        VariationRequest::Needle { u1, l1 } => needle_variation(&sc.system, &u_ref, u1, *l1, &x, t0, jets),
        VariationRequest::Bracket { input } => {
            let xc = sc
                .system
                .inputs()
                .get(input.wrapping_sub(1))
                .ok_or_else(|| CliError::Schema {
                    pointer: "/analysis/variation/input".into(),
                    message: format!("input {input} out of range 1..={}", sc.system.k()),
                })?;
            let xi0 = sc
                .system
                .slice(&u_ref)
                .map_err(|e| CliError::analysis("variation", e))?;
            bracket_variation(&xi0, xc, &x, t0, jets)
        }
    }
    .map_err(|e| CliError::analysis("variation", e))?;
    let check = asymptotic_check(&pv, jets.step).map_err(|e| CliError::analysis("asymptotic check", e))?;

    let n = sc.analysis.curve_samples;
    let mut rows = Vec::with_capacity(n + 1);
    for i in 0..=n {
        let s = S_MAX * i as f64 / n as f64;
        let y = pv
            .recipe
            .curve(&x, s, jets.step)
            .map_err(|e| CliError::analysis("variation curve", e))?;
        rows.push(row_of(s, &y));
    }
    let mut header = vec!["s".to_string()];
    header.extend(sc.system.coordinates().iter().cloned());

    let result = Obj::new()
        .with("time", num(t0))
        .with("point", nums(&x))
        .with("recipe", pv.recipe.kind.to_string())
        .with("order", pv.order)
        .with("vector", nums(&pv.vector.components))
        .with(
            "asymptotics",
            Obj::new()
                .with("s", nums(&check.samples))
                .with("residuals", nums(&check.residuals))
                .with("slope", num(check.slope))
                .with("required_slope", num(pv.order as f64 + 0.5))
                .with("exact", check.exact)
                .with("passed", check.passed),
        )
        .into();
    Ok(Partial {
        result,
        csv: Some(csv(&header, &rows)),
        passed: check.passed,
    })
}

// ---------------------------------------------------------------------------
// cone
// ---------------------------------------------------------------------------

fn build_cone(sc: &Scenario, tr: &Trajectory, t: f64) -> Result<Cone, CliError> {
    let (a, _) = tr.interval;
    let times: Vec<f64> = sample_times(sc, tr).into_iter().filter(|&s| s > a && s <= t).collect();
    if times.is_empty() {
        return Err(CliError::MissingInput(format!(
            "no admissible sample times in ({a}, {t}]"
        )));
    }
    debug!("assembling cone at t = {t} from {} sample times", times.len());
    assemble_cone(
        &sc.system,
        tr,
        t,
        &times,
        sc.analysis.per_time_budget,
        &sc.analysis.jets,
    )
    .map_err(|e| CliError::analysis("cone assembly", e))
}

fn cone_json(cone: &Cone) -> Value {
    let gens: Vec<Value> = cone
        .generators
        .iter()
        .zip(&cone.provenance)
        .map(|(g, p)| {
            Obj::new()
                .with("components", nums(&g.components))
                .with("time", num(p.time))
                .with("order", p.order)
                .with("recipe", p.recipe.as_str())
                .into()
        })
        .collect();
    Obj::new()
        .with("time", num(cone.time))
        .with("base", nums(&cone.base))
        .with("generators", gens)
        .into()
}

/// Count random unit covectors (seeded) that support the cone.
fn sample_directions(cone: &Cone, seed: u64) -> usize {
    let m = cone.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 0;
    let mut drawn = 0;
    while drawn < SAMPLED_DIRECTIONS {
        let v: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n = norm(&v);
        if !(n > 1e-3 && n <= 1.0) {
            continue;
        }
        drawn += 1;
        let lambda: Vec<f64> = v.iter().map(|x| x / n).collect();
        if is_supporting(&lambda, cone).map(|c| c.supporting).unwrap_or(false) {
            hits += 1;
        }
    }
    hits
}

fn cone(sc: &Scenario, opts: &Options) -> Result<Partial, CliError> {
    let tr = reference_trajectory(sc)?;
    let t = pick_time(sc, opts, tr.interval.1);
    let cone = build_cone(sc, &tr, t)?;
    let dir = sc.analysis.decrease_direction.as_deref();
    let lp = find_supporting_covector(&cone, dir).map_err(|e| CliError::analysis("support program", e))?;
    let mut result = Obj::new().with("cone", cone_json(&cone)).with(
        "support",
        Obj::new()
            .with("feasible", lp.feasible)
            .with(
                "covector",
                lp.covector.as_ref().map_or(Value::Null, |c| nums(&c.components)),
            )
            .with("max_pairing", num(lp.max_pairing))
            .with("separating_margin", lp.separating_margin.map_or(Value::Null, num)),
    );
    let mut passed = true;
    if let Some(c) = &opts.covector {
        let check = is_supporting(c, &cone).map_err(|e| CliError::analysis("covector check", e))?;
        passed = check.supporting;
        result.set(
            "covector_check",
            Obj::new()
                .with("covector", nums(c))
                .with("supporting", check.supporting)
                .with("max_pairing", num(check.max_pairing))
                .with("tolerance", num(check.tolerance)),
        );
    }
    result.set(
        "direction_sampling",
        Obj::new()
            .with("seed", opts.seed)
            .with("directions", SAMPLED_DIRECTIONS)
            .with("supporting", sample_directions(&cone, opts.seed)),
    );
    Ok(Partial {
        result: result.into(),
        csv: None,
        passed,
    })
}

// ---------------------------------------------------------------------------
// pca
// ---------------------------------------------------------------------------

fn run_ladder(sc: &Scenario, tr: &Trajectory, mode: PcaModeName) -> Result<ConstraintLadder, CliError> {
    let opts = PcaOptions {
        mode: match mode {
            PcaModeName::Abnormal => PcaMode::AbnormalReduced,
            PcaModeName::Extended => PcaMode::Extended,
        },
        max_levels: sc.analysis.max_levels,
        sample_times: sc.analysis.sample_times.clone(),
        cost: sc.cost.clone(),
    };
    run_algorithm(&sc.system, tr, &opts).map_err(|e| CliError::analysis("constraint ladder", e))
}

fn generators_json(gs: &[Generator]) -> Value {
    gs.iter()
        .map(|g| {
            Obj::new()
                .with("origin", g.origin.to_string())
                .with("components", strings(&g.field.render()))
                .into()
        })
        .collect::<Vec<Value>>()
        .into()
}

fn pca(sc: &Scenario) -> Result<Partial, CliError> {
    let tr = reference_trajectory(sc)?;
    let ladder = run_ladder(sc, &tr, sc.analysis.pca_mode)?;
    let levels: Vec<Value> = ladder
        .levels
        .iter()
        .map(|l| {
            let constraints: Vec<Value> = l
                .constraints
                .iter()
                .map(|c| {
                    Obj::new()
                        .with("constant_part", strings(&c.constant_part.render()))
                        .with(
                            "linear_parts",
                            c.linear_parts.iter().map(|f| strings(&f.render())).collect::<Vec<_>>(),
                        )
                        .with("degree", c.degree())
                        .into()
                })
                .collect();
            Obj::new()
                .with("index", l.index)
                .with("generators", generators_json(&l.generators))
                .with("dependent", generators_json(&l.dependent))
                .with("constraints", constraints)
                .with("span_dims", l.span_dims.clone())
                .with("control_branch", l.control_branch)
                .into()
        })
        .collect();

    let mut result = Obj::new()
        .with(
            "mode",
            match sc.analysis.pca_mode {
                PcaModeName::Abnormal => "abnormal",
                PcaModeName::Extended => "extended",
            },
        )
        .with("levels", levels)
        .with("stabilized_at", ladder.stabilized_at.map_or(Value::Null, Value::from));
    if !ladder.cost_terms.is_empty() {
        let terms: Vec<String> = ladder.cost_terms.iter().map(|e| e.to_string()).collect();
        result.set("cost_terms", strings(&terms));
    }
    let summary = match ladder.stabilized_at {
        None => format!("ladder did not stabilize within {} levels", sc.analysis.max_levels),
        Some(_) => {
            let mut entries = Vec::new();
            let mut dims = Vec::new();
            for (t, x) in &ladder.sample_points {
                let basis = annihilator_at(x, &ladder).map_err(|e| CliError::analysis("annihilator", e))?;
                dims.push(basis.len());
                let rows: Vec<Vec<f64>> = basis.into_iter().map(|c| c.components).collect();
                entries.push(Value::from(
                    Obj::new()
                        .with("t", num(*t))
                        .with("point", nums(x))
                        .with("basis", matrix(&rows)),
                ));
            }
            result.set("annihilator", entries);
            if dims.iter().all(|&d| d == 0) {
                "annihilator trivial: no abnormal biextremal along reference".to_string()
            } else {
                format!("annihilator dimensions along reference: {dims:?}")
            }
        }
    };
    result.set("summary", summary);
    Ok(Partial {
        result: result.into(),
        csv: None,
        passed: ladder.stabilized_at.is_some(),
    })
}

// ---------------------------------------------------------------------------
// extremal and audit
// ---------------------------------------------------------------------------

struct Lifted {
    dynamics: Dynamics,
    bx: Biextremal,
    trajectory: Trajectory,
}

/// Integrate the biextremal from the chosen covector. With a cost the
/// extended system is used and a covector on `M` gets `λ₀ = 0` prepended.
fn lift(sc: &Scenario, opts: &Options) -> Result<Lifted, CliError> {
    let r = sc.require_reference()?;
    let trajectory = reference_trajectory(sc)?;
    let lambda = opts
        .covector
        .clone()
        .or_else(|| sc.analysis.covector.clone())
        .ok_or_else(|| CliError::MissingInput("initial covector (pass --covector or set analysis.covector)".into()))?;
    let m = sc.system.m();
    let (dynamics, x0, lambda) = match &sc.cost {
        Some(cost) => {
            let ext = extend_system(&sc.system, cost).map_err(|e| CliError::analysis("extended system", e))?;
            let lambda = match lambda.len() {
                n if n == m => std::iter::once(0.0).chain(lambda).collect(),
                n if n == m + 1 => lambda,
                n => {
                    return Err(CliError::MissingInput(format!(
                        "covector has {n} entries, expected {m} or {}",
                        m + 1
                    )))
                }
            };
            let x0: Vec<f64> = std::iter::once(0.0).chain(r.initial_point.iter().copied()).collect();
            (Dynamics::Extended(ext), x0, lambda)
        }
        None => {
            if lambda.len() != m {
                return Err(CliError::MissingInput(format!(
                    "covector has {} entries, expected {m}",
                    lambda.len()
                )));
            }
            (Dynamics::Reduced(sc.system.clone()), r.initial_point.clone(), lambda)
        }
    };
    let bx = integrate_biextremal(&x0, &lambda, &r.schedule, &dynamics, r.interval, r.step)
        .map_err(|e| CliError::analysis("biextremal", e))?;
    Ok(Lifted {
        dynamics,
        bx,
        trajectory,
    })
}

fn hamiltonian_range(l: &Lifted) -> Result<(f64, f64), CliError> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for s in &l.bx.samples {
        let h =
            hamiltonian(&s.lambda, &s.x, &s.control, &l.dynamics).map_err(|e| CliError::analysis("hamiltonian", e))?;
        lo = lo.min(h);
        hi = hi.max(h);
    }
    Ok((lo, hi))
}

fn thinned_samples(l: &Lifted, n: usize) -> Value {
    let total = l.bx.samples.len();
    let stride = total.div_ceil(n).max(1);
    l.bx.samples
        .iter()
        .enumerate()
        .filter(|(i, _)| i % stride == 0 || *i + 1 == total)
        .map(|(_, s)| {
            Obj::new()
                .with("t", num(s.t))
                .with("x", nums(&s.x))
                .with("lambda", nums(&s.lambda))
                .with("control", nums(&s.control))
                .into()
        })
        .collect::<Vec<Value>>()
        .into()
}

fn extremal(sc: &Scenario, opts: &Options) -> Result<Partial, CliError> {
    let lifted = lift(sc, opts)?;
    let (h_lo, h_hi) = hamiltonian_range(&lifted)?;
    let abnormal = lifted.bx.lambda0.is_none_or(|p0| p0 == 0.0);
    let mut result = Obj::new()
        .with("mode", lifted.bx.mode.to_string())
        .with("lambda0", lifted.bx.lambda0.map_or(Value::Null, num))
        .with("hamiltonian", Obj::new().with("min", num(h_lo)).with("max", num(h_hi)));

    let mut passed = true;
    if abnormal {
        let ladder = run_ladder(sc, &lifted.trajectory, PcaModeName::Abnormal)?;
        if ladder.stabilized_at.is_some() {
            let mut worst = 0.0f64;
            let mut worst_t = lifted.bx.samples[0].t;
            for s in &lifted.bx.samples {
                let x = lifted.dynamics.spatial(&s.x);
                let lam = lifted.dynamics.spatial(&s.lambda);
                for g in ladder.constraint_fields() {
                    let v = g.field.eval(x).map_err(|e| CliError::analysis("ladder pairing", e))?;
                    let p = dot(lam, &v).abs();
                    if p > worst {
                        worst = p;
                        worst_t = s.t;
                    }
                }
            }
            passed = worst <= LADDER_PAIRING_TOL;
            result.set(
                "ladder_pairings",
                Obj::new()
                    .with("fields", ladder.constraint_fields().count())
                    .with("max_abs", num(worst))
                    .with("at_time", num(worst_t))
                    .with("tolerance", num(LADDER_PAIRING_TOL))
                    .with("passed", passed),
            );
        } else {
            result.set("ladder_pairings", Value::Null);
        }
    }

    if let Dynamics::Extended(ext) = &lifted.dynamics {
        let search = if abnormal {
            let grid = MomentumGrid::with_budget(sc.system.m(), sc.analysis.normal_lift_budget);
            info!(
                "normal-lift search over {} momenta",
                grid.per_axis.pow(sc.system.m() as u32)
            );
            Some(
                search_normal_lift(ext, &lifted.trajectory, &grid)
                    .map_err(|e| CliError::analysis("normal-lift search", e))?,
            )
        } else {
            None
        };
        let class =
            classify_extremal(&lifted.bx, search.as_ref()).map_err(|e| CliError::analysis("classification", e))?;
        let mut c = Obj::new().with("summary", class.to_string());
        if let Some(s) = &search {
            c.set(
                "normal_lift_search",
                Obj::new()
                    .with("per_axis", s.grid.per_axis)
                    .with("radius", num(s.grid.radius))
                    .with("tolerance", num(s.grid.tolerance))
                    .with("tried", s.tried)
                    .with("found", matrix(&s.found)),
            );
        }
        result.set("classification", c);
    }
    result.set("samples", thinned_samples(&lifted, sc.analysis.curve_samples));
    Ok(Partial {
        result: result.into(),
        csv: None,
        passed,
    })
}

fn audit(sc: &Scenario, opts: &Options) -> Result<Partial, CliError> {
    let lifted = lift(sc, opts)?;
    let t = pick_time(sc, opts, lifted.trajectory.interval.1);
    let cone = build_cone(sc, &lifted.trajectory, t)?;
    let report =
        audit_necessary_conditions(&lifted.bx, &cone, &lifted.dynamics).map_err(|e| CliError::analysis("audit", e))?;
    let (h_lo, h_hi) = hamiltonian_range(&lifted)?;
    let rows: Vec<Value> = report
        .conditions
        .iter()
        .map(|c| {
            Obj::new()
                .with("name", c.name)
                .with("passed", c.passed)
                .with("value", num(c.value))
                .with("tolerance", num(c.tolerance))
                .with("detail", c.detail.as_str())
                .into()
        })
        .collect();
    let result = Obj::new()
        .with("mode", lifted.bx.mode.to_string())
        .with("cone_time", num(t))
        .with("cone_generators", cone.generators.len())
        .with("hamiltonian", Obj::new().with("min", num(h_lo)).with("max", num(h_hi)))
        .with("conditions", rows)
        .into();
    Ok(Partial {
        result,
        csv: None,
        passed: report.all_passed(),
    })
}

// ---------------------------------------------------------------------------
// mech-check
// ---------------------------------------------------------------------------

fn mech_check(sc: &Scenario, opts: &Options) -> Result<Partial, CliError> {
    if sc.connection.is_none() {
        return Err(CliError::MissingBlock("mechanics"));
    }
    let tr = reference_trajectory(sc)?;
    let (a, b) = tr.interval;
    let t0 = pick_time(sc, opts, 0.5 * (a + b));
    let rep =
        acc_generators(&sc.system, &tr, t0, &sc.analysis.jets).map_err(|e| CliError::analysis("mech-check", e))?;
    let render_all = |fs: &[VectorField]| fs.iter().map(|f| strings(&f.render())).collect::<Vec<_>>();
    let checks: Vec<Value> = rep
        .checks
        .iter()
        .map(|c| {
            Obj::new()
                .with("name", c.name.as_str())
                .with("lhs", nums(&c.lhs))
                .with("rhs", nums(&c.rhs))
                .with("tolerance", num(c.tolerance))
                .with("passed", c.passed)
                .into()
        })
        .collect();
    let result = Obj::new()
        .with("time", num(rep.time))
        .with("point", nums(&rep.point))
        .with("chart", strings(sc.system.coordinates()))
        .with("z0", render_all(&rep.z0))
        .with("z1", render_all(&rep.z1))
        .with("checks", checks)
        .into();
    Ok(Partial {
        result,
        csv: None,
        passed: rep.passed(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parse_scenario;

    const HEIS: &str = r#"{"name": "heisenberg", "chart": ["x", "y", "z"],
        "system": {"inputs": [["1", "0", "-y/2"], ["0", "1", "x/2"]]},
        "reference": {"initial_point": [0, 0, 0], "control": {"constant": [1, 0]}, "interval": [0, 1]}}"#;

    #[test]
    fn command_names_round_trip() {
        for c in Command::ALL {
            assert_eq!(c.name().parse::<Command>().unwrap(), c);
        }
        assert!("nope".parse::<Command>().is_err());
    }

    #[test]
    fn default_brackets_skip_zero_drift() {
        let sc = parse_scenario(HEIS.as_bytes()).unwrap();
        let out = run_command(Command::Bracket, &sc, "h.json", &Options::default()).unwrap();
        let rows = out.report["result"]["brackets"].as_array().unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0]["bracket"], "[X1, X2]");
        assert_eq!(rows[0]["components"], serde_json::json!(["0", "0", "1"]));
    }

    #[test]
    fn flow_csv_has_header_and_rows() {
        let sc = parse_scenario(HEIS.as_bytes()).unwrap();
        let out = run_command(
            Command::Flow,
            &sc,
            "h.json",
            &Options {
                step: Some(0.01),
                ..Default::default()
            },
        )
        .unwrap();
        let text = out.csv.unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "t,x,y,z");
        assert_eq!(lines.count(), 101);
    }

    #[test]
    fn missing_covector_is_an_error() {
        let sc = parse_scenario(HEIS.as_bytes()).unwrap();
        assert!(matches!(
            run_command(Command::Extremal, &sc, "h.json", &Options::default()),
            Err(CliError::MissingInput(_))
        ));
        assert!(matches!(
            run_command(Command::MechCheck, &sc, "h.json", &Options::default()),
            Err(CliError::MissingBlock("mechanics"))
        ));
    }
}
