//! Instance files, check orchestration and reports.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::akcoglu::{
    build_coupling, expectation_eqn, make_integral_preserving, random_contraction,
    random_grid_function, verify_eqe, verify_main_result, verify_tau_transport, Coupling,
};
use crate::interval_space::{PcFunction, CONSTRUCTION_TOL};
use crate::markov_ops::{apply_operator, classify, L1Operator};
use crate::montecarlo::{compare_mc_exact, max_z, SampleConfig, Z_THRESHOLD};
use crate::rota::{check_hypotheses, power_limit, random_reversible, rota_check_default};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

pub const COUPLING_TOL: f64 = 1e-12;
pub const EXTENSION_TOL: f64 = 1e-12;
pub const MAIN_RESULT_TOL: f64 = 1e-10;
pub const TAU_TOL: f64 = 1e-10;
pub const EQE_TOL: f64 = 1e-10;
pub const DILATION_TOL: f64 = 1e-9;
pub const ROTA_TOL: f64 = 1e-10;
pub const POWER_LIMIT_TOL: f64 = 1e-8;

/// Radius of the window used for the τ-transport check.
pub const TAU_RADIUS: usize = 2;

/// Refuse path-sum oracles with more paths than this.
pub const MAX_ORACLE_PATHS: f64 = 1e8;

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Parse {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("malformed instance: {0}")]
    Malformed(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, RunnerError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Akcoglu,
    Rota,
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Kind::Akcoglu => "akcoglu",
            Kind::Rota => "rota",
        })
    }
}

/// `T[i][j]` is the weight of input cell `j` in output cell `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<Kind>,
    pub mu: Vec<f64>,
    #[serde(rename = "T")]
    pub t: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f: Option<Vec<f64>>,
}

impl InstanceFile {
    pub fn kind(&self) -> Kind {
        self.kind.unwrap_or(Kind::Akcoglu)
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.mu.len();
        let bad = |msg: String| Err(RunnerError::Malformed(msg));
        if m == 0 {
            return bad("mu is empty".into());
        }
        if self.t.len() != m {
            return bad(format!("T has {} rows, mu has {m} cells", self.t.len()));
        }
        if let Some((i, row)) = self.t.iter().enumerate().find(|(_, r)| r.len() != m) {
            return bad(format!(
                "row {i} of T has {} entries, expected {m}",
                row.len()
            ));
        }
        if let Some(f) = &self.f {
            if f.len() != m {
                return bad(format!("f has {} entries, expected {m}", f.len()));
            }
        }
        let all = self
            .mu
            .iter()
            .chain(self.t.iter().flatten())
            .chain(self.f.iter().flatten());
        if all.clone().any(|v| !v.is_finite()) {
            return bad("non-finite number".into());
        }
        if let Some(w) = self.mu.iter().find(|&&w| w <= 0.0) {
            return bad(format!("cell weight {w} is not positive"));
        }
        Ok(())
    }

    pub fn operator(&self) -> Result<L1Operator> {
        self.validate()?;
        L1Operator::from_rows(&self.mu, &self.t).map_err(|e| RunnerError::Malformed(e.to_string()))
    }

    /// The instance's `f`, or a seeded one with values in `[-1, 1)`.
    pub fn function(&self, t: &L1Operator, seed: u64) -> PcFunction {
        let values = match &self.f {
            Some(f) => f.clone(),
            None => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..t.dim()).map(|_| rng.random_range(-1.0..1.0)).collect()
            }
        };
        PcFunction::new(t.base().clone(), values).expect("validated length")
    }

    /// SHA-256 of the compact JSON encoding.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("plain data");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| RunnerError::Io {
            path: path.to_owned(),
            source,
        })?;
        let inst: Self = serde_json::from_str(&text).map_err(|source| RunnerError::Parse {
            path: path.to_owned(),
            source,
        })?;
        inst.validate()?;
        Ok(inst)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        write_file(path, &text)
    }
}

fn from_operator(kind: Kind, t: &L1Operator, f: Vec<f64>) -> InstanceFile {
    InstanceFile {
        kind: Some(kind),
        mu: t.weights().to_vec(),
        t: t.rows(),
        f: Some(f),
    }
}

/// Seeded random instance. `integral_preserving` is ignored for `Rota`,
/// whose chains always preserve `μ`.
pub fn gen_instance(kind: Kind, m: usize, seed: u64, integral_preserving: bool) -> InstanceFile {
    assert!(m >= 1, "need at least one cell");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = match kind {
        Kind::Akcoglu => random_contraction(&mut rng, m, integral_preserving, 0.0),
        Kind::Rota => random_reversible(&mut rng, m),
    };
    let f = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
    from_operator(kind, &t, f)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckRecord {
    pub name: String,
    pub parameters: BTreeMap<String, String>,
    /// `f64::MAX` when the check could not be evaluated.
    pub residual: f64,
    pub tolerance: f64,
    pub pass: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
    pub wall_time_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub tool_version: String,
    pub input_digest: String,
    pub verdict: bool,
    pub checks: Vec<CheckRecord>,
}

impl Report {
    pub fn new(input_digest: String, checks: Vec<CheckRecord>) -> Self {
        Self {
            tool_version: TOOL_VERSION.into(),
            input_digest,
            verdict: checks.iter().all(|c| c.pass),
            checks,
        }
    }

    /// Copy with every timing field zeroed, for comparing runs.
    pub fn without_timing(&self) -> Self {
        let mut r = self.clone();
        r.checks.iter_mut().for_each(|c| c.wall_time_ms = 0.0);
        r
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunConfig {
    pub horizon: usize,
    /// 0 skips the Monte Carlo check.
    pub samples: usize,
    pub seed: u64,
}

type Outcome = std::result::Result<(f64, Option<String>), String>;

#[derive(Default)]
struct Checks(Vec<CheckRecord>);

impl Checks {
    fn run(
        &mut self,
        name: &str,
        parameters: &[(&str, String)],
        tolerance: f64,
        check: impl FnOnce() -> Outcome,
    ) -> bool {
        let start = Instant::now();
        let outcome = check();
        let wall_time_ms = start.elapsed().as_secs_f64() * 1e3;
        let (residual, pass, message) = match outcome {
            Ok((r, msg)) if r.is_finite() => (r, r <= tolerance && msg.is_none(), msg),
            Ok((_, msg)) => (f64::MAX, false, msg.or(Some("non-finite residual".into()))),
            Err(msg) => (f64::MAX, false, Some(msg)),
        };
        self.0.push(CheckRecord {
            name: name.into(),
            parameters: parameters
                .iter()
                .map(|(k, v)| (k.to_string(), v.clone()))
                .collect(),
            residual,
            tolerance,
            pass,
            message,
            wall_time_ms,
        });
        pass
    }
}

fn ok(r: f64) -> Outcome {
    Ok((r, None))
}

fn max_diff(a: &PcFunction, b: &PcFunction, cells: usize) -> f64 {
    (0..cells)
        .map(|j| (a.value(j) - b.value(j)).abs())
        .fold(0.0, f64::max)
}

/// Gate, reduction and coupling; `None` once a gate fails.
fn prepare(
    checks: &mut Checks,
    t: &L1Operator,
    f: &PcFunction,
    horizon: usize,
) -> Option<(Coupling, PcFunction)> {
    let cls = classify(t);
    let gate = checks.run("classify", &[], CONSTRUCTION_TOL, || {
        let r = (-cls.min_entry).max(cls.norm - 1.0).max(0.0);
        let msg = (!cls.is_positive_contraction()).then(|| {
            format!(
                "not a positive contraction (min entry {}, norm {})",
                cls.min_entry, cls.norm
            )
        });
        Ok((r, msg))
    });
    if !gate {
        return None;
    }
    let (work_t, work_f) = if cls.integral_preserving {
        (t.clone(), f.clone())
    } else {
        let ext = match make_integral_preserving(t) {
            Ok(ext) => ext,
            Err(e) => {
                checks.run("extension", &[], EXTENSION_TOL, || Err(e.to_string()));
                return None;
            }
        };
        let params = [("horizon", horizon.to_string())];
        let gate = checks.run("extension", &params, EXTENSION_TOL, || {
            ext.power_residuals(t, horizon)
                .map(|r| (r.into_iter().fold(0.0, f64::max), None))
                .map_err(|e| e.to_string())
        });
        if !gate {
            return None;
        }
        let lifted = ext.embed_function(f);
        (ext.operator, lifted)
    };
    let mut coupling = None;
    let gate = checks.run("coupling", &[], COUPLING_TOL, || {
        let c = build_coupling(&work_t).map_err(|e| e.to_string())?;
        let r = c.mass_identity_residual();
        coupling = Some(c);
        ok(r)
    });
    if !gate {
        return None;
    }
    coupling.map(|c| (c, work_f))
}

fn mc_check(checks: &mut Checks, c: &Coupling, f: &PcFunction, cfg: RunConfig) {
    if cfg.samples == 0 {
        return;
    }
    let params = [
        ("horizon", cfg.horizon.to_string()),
        ("samples", cfg.samples.to_string()),
        ("seed", cfg.seed.to_string()),
    ];
    checks.run("mc_z", &params, Z_THRESHOLD, || {
        let sc = SampleConfig::new(cfg.seed, cfg.samples, cfg.horizon);
        let cells = compare_mc_exact(c, f, sc).map_err(|e| e.to_string())?;
        ok(max_z(&cells))
    });
}

fn akcoglu_checks(checks: &mut Checks, t: &L1Operator, f: &PcFunction, cfg: RunConfig) {
    let Some((c, lifted)) = prepare(checks, t, f, cfg.horizon) else {
        return;
    };
    checks.run("main_result", &[], MAIN_RESULT_TOL, || {
        verify_main_result(&c, &lifted)
            .map(|r| (r, None))
            .map_err(|e| e.to_string())
    });
    let radius = [("radius", TAU_RADIUS.to_string())];
    checks.run("tau_transport", &radius, TAU_TOL, || {
        verify_tau_transport(&c, TAU_RADIUS)
            .map(|r| (r.max(), None))
            .map_err(|e| e.to_string())
    });
    checks.run("eqe", &[("seed", cfg.seed.to_string())], EQE_TOL, || {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let g = random_grid_function(&mut rng, c.base().total(), 4);
        verify_eqe(&c, &g)
            .map(|r| (r, None))
            .map_err(|e| e.to_string())
    });
    for n in 0..=cfg.horizon {
        checks.run("dilation", &[("n", n.to_string())], DILATION_TOL, || {
            let paths = (c.dim() as f64).powi(n as i32 + 1);
            if paths > MAX_ORACLE_PATHS {
                return Err(format!("path-sum oracle would visit {paths:e} paths"));
            }
            let lhs = expectation_eqn(&c, &lifted, n).map_err(|e| e.to_string())?;
            let rhs = apply_operator(t, f, n).map_err(|e| e.to_string())?;
            ok(max_diff(&lhs, &rhs, t.dim()))
        });
    }
    mc_check(checks, &c, &lifted, cfg);
}

fn rota_checks(checks: &mut Checks, p: &L1Operator, f: &PcFunction, cfg: RunConfig) {
    let h = check_hypotheses(p);
    let gate = checks.run("hypotheses", &[], CONSTRUCTION_TOL, || {
        let r = (-h.min_entry)
            .max(h.row_sum_residual)
            .max(h.balance_residual)
            .max(0.0);
        let msg = (!h.all()).then(|| format!("{h:?}"));
        Ok((r, msg))
    });
    if !gate {
        return;
    }
    for n in 0..=cfg.horizon {
        let params = [("n", n.to_string()), ("length", (2 * n + 1).to_string())];
        checks.run("rota", &params, ROTA_TOL, || {
            rota_check_default(p, f, n)
                .map(|r| (r, None))
                .map_err(|e| e.to_string())
        });
    }
    checks.run("power_limit", &[], POWER_LIMIT_TOL, || {
        let lim = power_limit(p, f).map_err(|e| e.to_string())?;
        let msg = (!lim.converged)
            .then(|| format!("iteration did not settle in {} steps", lim.iterations));
        Ok((lim.agreement(), msg))
    });
}

/// Every check for the instance's kind.
pub fn run_verify(instance: &InstanceFile, cfg: RunConfig) -> Result<Report> {
    let t = instance.operator()?;
    let f = instance.function(&t, cfg.seed);
    let mut checks = Checks::default();
    match instance.kind() {
        Kind::Akcoglu => akcoglu_checks(&mut checks, &t, &f, cfg),
        Kind::Rota => rota_checks(&mut checks, &t, &f, cfg),
    }
    Ok(Report::new(instance.digest(), checks.0))
}

/// Gate, coupling and the Monte Carlo comparison only.
pub fn run_mc(instance: &InstanceFile, cfg: RunConfig) -> Result<Report> {
    let t = instance.operator()?;
    let f = instance.function(&t, cfg.seed);
    let mut checks = Checks::default();
    if let Some((c, lifted)) = prepare(&mut checks, &t, &f, cfg.horizon) {
        mc_check(&mut checks, &c, &lifted, cfg);
    }
    Ok(Report::new(instance.digest(), checks.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Json,
    Csv,
}

pub const CSV_HEADER: [&str; 7] = [
    "name",
    "parameters",
    "residual",
    "tolerance",
    "pass",
    "message",
    "wall_time_ms",
];

pub fn render_report(report: &Report, format: Format) -> Result<String> {
    match format {
        Format::Json => {
            let mut s = serde_json::to_string_pretty(report)?;
            s.push('\n');
            Ok(s)
        }
        Format::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(CSV_HEADER)?;
            for c in &report.checks {
                let params = c
                    .parameters
                    .iter()
                    .map(|(k, v)| format!("{k}={v}"))
                    .collect::<Vec<_>>()
                    .join(";");
                w.write_record([
                    c.name.clone(),
                    params,
                    format!("{:?}", c.residual),
                    format!("{:?}", c.tolerance),
                    c.pass.to_string(),
                    c.message.clone().unwrap_or_default(),
                    format!("{:?}", c.wall_time_ms),
                ])?;
            }
            let bytes = w
                .into_inner()
                .map_err(|e| csv::Error::from(e.into_error()))?;
            Ok(String::from_utf8(bytes).expect("utf-8 fields"))
        }
    }
}

pub fn emit_report(report: &Report, format: Format, path: &Path) -> Result<()> {
    write_file(path, &render_report(report, format)?)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|source| RunnerError::Io {
        path: path.to_owned(),
        source,
    })
}

/// Cell weights and `f` for ad hoc instances, e.g. in tests.
pub fn instance(kind: Kind, mu: &[f64], t: &[Vec<f64>], f: Option<&[f64]>) -> InstanceFile {
    InstanceFile {
        kind: Some(kind),
        mu: mu.to_vec(),
        t: t.to_vec(),
        f: f.map(<[f64]>::to_vec),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn instance_a() -> InstanceFile {
        instance(
            Kind::Akcoglu,
            &[0.5, 0.5],
            &[vec![0.5, 0.5], vec![0.5, 0.5]],
            Some(&[1.0, 0.0]),
        )
    }

    fn cfg(horizon: usize, samples: usize) -> RunConfig {
        RunConfig {
            horizon,
            samples,
            seed: 7,
        }
    }

    #[test]
    fn gen_single_cell() {
        let inst = gen_instance(Kind::Akcoglu, 1, 3, true);
        assert_eq!(inst.mu, vec![1.0]);
        assert_eq!(inst.t, vec![vec![1.0]]);
    }

    #[test]
    fn gen_is_deterministic_and_classified() {
        let a = gen_instance(Kind::Akcoglu, 4, 12, true);
        assert_eq!(a, gen_instance(Kind::Akcoglu, 4, 12, true));
        let c = classify(&a.operator().unwrap());
        assert!(c.positive && c.contraction && c.integral_preserving);

        let b = gen_instance(Kind::Akcoglu, 4, 12, false);
        let c = classify(&b.operator().unwrap());
        assert!(c.is_positive_contraction());

        let r = gen_instance(Kind::Rota, 3, 5, true);
        assert!(check_hypotheses(&r.operator().unwrap()).all());
    }

    #[test]
    fn json_round_trip_is_exact() {
        let inst = gen_instance(Kind::Akcoglu, 5, 99, false);
        let text = serde_json::to_string(&inst).unwrap();
        let back: InstanceFile = serde_json::from_str(&text).unwrap();
        assert_eq!(back, inst);
        assert_eq!(serde_json::to_string(&back).unwrap(), text);
    }

    #[test]
    fn validation_rejects_bad_shapes() {
        let mut inst = instance_a();
        inst.t[1].pop();
        assert!(matches!(inst.validate(), Err(RunnerError::Malformed(_))));
        let mut inst = instance_a();
        inst.mu[0] = 0.0;
        assert!(inst.validate().is_err());
        let mut inst = instance_a();
        inst.f = Some(vec![1.0]);
        assert!(inst.validate().is_err());
        let parsed: std::result::Result<InstanceFile, _> =
            serde_json::from_str(r#"{"mu": [1.0], "T": [[1.0]], "kind": "other"}"#);
        assert!(parsed.is_err());
    }

    #[test]
    fn instance_a_passes_everything() {
        let r = run_verify(&instance_a(), cfg(4, 20_000)).unwrap();
        assert!(r.verdict, "{r:#?}");
        let names: Vec<_> = r.checks.iter().map(|c| c.name.as_str()).collect();
        assert_eq!(
            names,
            [
                "classify",
                "coupling",
                "main_result",
                "tau_transport",
                "eqe",
                "dilation",
                "dilation",
                "dilation",
                "dilation",
                "dilation",
                "mc_z"
            ]
        );
    }

    #[test]
    fn contraction_goes_through_extension() {
        let inst = gen_instance(Kind::Akcoglu, 3, 4, false);
        let r = run_verify(&inst, cfg(3, 0)).unwrap();
        assert!(r.verdict, "{r:#?}");
        assert!(r.checks.iter().any(|c| c.name == "extension"));
    }

    #[test]
    fn negative_entry_stops_at_gate() {
        let inst = instance(
            Kind::Akcoglu,
            &[0.5, 0.5],
            &[vec![1.5, 0.5], vec![-0.5, 0.5]],
            None,
        );
        let r = run_verify(&inst, cfg(3, 100)).unwrap();
        assert!(!r.verdict);
        assert_eq!(r.checks.len(), 1);
        assert_eq!(r.checks[0].name, "classify");
        assert!(r.checks[0].message.is_some());
    }

    #[test]
    fn degenerate_row_is_a_failed_check() {
        let inst = instance(
            Kind::Akcoglu,
            &[0.5, 0.5],
            &[vec![1.0, 1.0], vec![0.0, 0.0]],
            None,
        );
        let r = run_verify(&inst, cfg(2, 0)).unwrap();
        assert!(!r.verdict);
        let last = r.checks.last().unwrap();
        assert_eq!(last.name, "coupling");
        assert_eq!(last.residual, f64::MAX);
    }

    #[test]
    fn swap_chain_passes() {
        let inst = instance(
            Kind::Rota,
            &[0.5, 0.5],
            &[vec![0.0, 1.0], vec![1.0, 0.0]],
            Some(&[0.25, -2.0]),
        );
        let r = run_verify(&inst, cfg(3, 0)).unwrap();
        assert!(r.verdict, "{r:#?}");
        assert_eq!(r.checks.len(), 1 + 4 + 1);
        let lim = power_limit(
            &inst.operator().unwrap(),
            &inst.function(&inst.operator().unwrap(), 0),
        )
        .unwrap();
        assert_eq!(lim.limit.values(), &[0.25, -2.0]);
    }

    #[test]
    fn reports_are_reproducible() {
        let inst = gen_instance(Kind::Akcoglu, 3, 21, true);
        let a = run_verify(&inst, cfg(2, 2_000)).unwrap().without_timing();
        let b = run_verify(&inst, cfg(2, 2_000)).unwrap().without_timing();
        assert_eq!(
            render_report(&a, Format::Json).unwrap(),
            render_report(&b, Format::Json).unwrap()
        );
    }

    #[test]
    fn empty_report() {
        let r = Report::new("00".into(), vec![]);
        assert!(r.verdict);
        let json = render_report(&r, Format::Json).unwrap();
        assert_eq!(serde_json::from_str::<Report>(&json).unwrap(), r);
        let csv = render_report(&r, Format::Csv).unwrap();
        assert_eq!(csv.lines().count(), 1);
    }

    #[test]
    fn csv_has_one_row_per_check() {
        let r = run_verify(&instance_a(), cfg(2, 0)).unwrap();
        let csv = render_report(&r, Format::Csv).unwrap();
        let mut rd = csv::Reader::from_reader(csv.as_bytes());
        assert_eq!(rd.headers().unwrap(), CSV_HEADER.as_slice());
        assert_eq!(rd.records().count(), r.checks.len());
        assert_eq!(csv.lines().count(), r.checks.len() + 1);
    }

    #[test]
    fn json_report_round_trip() {
        let r = run_verify(&instance_a(), cfg(1, 500)).unwrap();
        let json = render_report(&r, Format::Json).unwrap();
        assert_eq!(serde_json::from_str::<Report>(&json).unwrap(), r);
    }
}
