//! Command dispatch and artifact writing.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use super::config::{Command, ConfigError, ExperimentConfig};
use super::selftest::run_selftest;
use crate::convex::{default_net_size, direction_net};
use crate::domination::{dominate_cz, dominate_shift, verify_domination, DominationResult, SparseFamily};
use crate::dyadic::GridFunction;
use crate::estimates::{counterexample_search, power_weight_probe};
use crate::operators::{GridOperator, Operator};
use crate::weights::{a2_matrix, a2_scalar, a2_two_weight, a_infty_scalar, a_infty_scalar_matrix, CharacteristicReport, MatrixWeight, WeightSpec};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{operation} failed: {message}")]
    Numerical { operation: &'static str, message: String },
    #[error("cannot write {path}: {source}")]
    Write { path: PathBuf, source: std::io::Error },
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => EXIT_CONFIG,
            RunError::Numerical { .. } | RunError::Write { .. } => EXIT_NUMERICAL,
        }
    }
}

fn numerical<E: std::fmt::Display>(operation: &'static str) -> impl FnOnce(E) -> RunError {
    move |e| RunError::Numerical {
        operation,
        message: e.to_string(),
    }
}

fn spec_error<E: std::fmt::Display>(name: &'static str) -> impl FnOnce(E) -> RunError {
    move |e| {
        RunError::Config(ConfigError::Field {
            field: name.into(),
            message: e.to_string(),
        })
    }
}

/// What a finished run produced; `passed == false` maps to exit code 3.
#[derive(Clone, Debug, PartialEq)]
pub struct Outcome {
    pub passed: bool,
    pub files: Vec<PathBuf>,
    pub summary: String,
}

impl Outcome {
    pub fn exit_code(&self) -> i32 {
        if self.passed {
            EXIT_OK
        } else {
            EXIT_NUMERICAL
        }
    }
}

/// Fixed-width scientific notation with 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else {
        x.to_string()
    }
}

struct Writer<'a> {
    dir: &'a Path,
    files: Vec<PathBuf>,
}

impl Writer<'_> {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), RunError> {
        let path = self.path(name);
        let mut text = serde_json::to_string_pretty(value).expect("report types serialize");
        text.push('\n');
        fs::write(&path, text).map_err(|source| RunError::Write { path: path.clone(), source })?;
        self.files.push(path);
        Ok(())
    }

    fn csv(&mut self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<(), RunError> {
        let path = self.path(name);
        let io = |source: std::io::Error| RunError::Write { path: path.clone(), source };
        let mut w = csv::Writer::from_path(&path).map_err(|e| io(e.into()))?;
        w.write_record(header).map_err(|e| io(e.into()))?;
        for r in rows {
            w.write_record(r).map_err(|e| io(e.into()))?;
        }
        w.flush().map_err(io)?;
        self.files.push(path);
        Ok(())
    }
}

pub fn run(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Outcome, RunError> {
    fs::create_dir_all(out_dir).map_err(|source| RunError::Write {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let mut w = Writer { dir: out_dir, files: Vec::new() };
    let (passed, summary) = match cfg.command {
        Command::Characteristics => characteristics(cfg, &mut w)?,
        Command::Dominate => dominate(cfg, &mut w)?,
        Command::Verify => verify(cfg, &mut w)?,
        Command::Sweep => sweep(cfg, &mut w)?,
        Command::Search => search(cfg, &mut w)?,
        Command::Selftest => {
            let rep = run_selftest(cfg.seed);
            w.json("selftest.json", &rep)?;
            let failed: Vec<&str> = rep.checks.iter().filter(|c| !c.passed).map(|c| c.name).collect();
            let summary = if failed.is_empty() {
                format!("all {} checks passed", rep.checks.len())
            } else {
                format!("failed checks: {}", failed.join(", "))
            };
            (rep.passed, summary)
        }
    };
    Ok(Outcome {
        passed,
        files: w.files,
        summary,
    })
}

fn weights(cfg: &ExperimentConfig) -> Result<(MatrixWeight, MatrixWeight), RunError> {
    let lat = cfg.lattice();
    let wspec = cfg.weight.clone().unwrap_or(WeightSpec::Identity {});
    let w = wspec.build(lat, cfg.vector_dim, cfg.eigen_floor).map_err(spec_error("weight"))?;
    let v = match &cfg.dual_weight {
        Some(spec) => spec.build(lat, cfg.vector_dim, cfg.eigen_floor).map_err(spec_error("dualWeight"))?,
        None => w.inverse().map_err(spec_error("weight"))?,
    };
    Ok((w, v))
}

fn operator(cfg: &ExperimentConfig) -> Result<Operator, RunError> {
    cfg.operator
        .as_ref()
        .expect("validated")
        .build(cfg.lattice())
        .map_err(spec_error("operator"))
}

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct CharacteristicsOut {
    a2_matrix_w: CharacteristicReport,
    a2_matrix_v: CharacteristicReport,
    a2_two_weight: CharacteristicReport,
    a_infty_w: CharacteristicReport,
    a_infty_v: CharacteristicReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    a2_scalar_w: Option<CharacteristicReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    a_infty_scalar_w: Option<CharacteristicReport>,
    direction_net: usize,
}

fn characteristics(cfg: &ExperimentConfig, out: &mut Writer) -> Result<(bool, String), RunError> {
    let (w, v) = weights(cfg)?;
    let d = cfg.vector_dim;
    let net_size = cfg.direction_net.unwrap_or_else(|| default_net_size(d));
    let net = direction_net(d, net_size);
    let scalar_w = (d == 1).then(|| GridFunction::from_cells(cfg.lattice(), 1, |c, x| x[0] = w.cell(c).get(0, 0)));
    let rep = CharacteristicsOut {
        a2_matrix_w: a2_matrix(&w).map_err(numerical("a2Matrix"))?,
        a2_matrix_v: a2_matrix(&v).map_err(numerical("a2Matrix"))?,
        a2_two_weight: a2_two_weight(&w, &v).map_err(numerical("a2TwoWeight"))?,
        a_infty_w: a_infty_scalar_matrix(&w, &net).map_err(numerical("aInftyScalar"))?,
        a_infty_v: a_infty_scalar_matrix(&v, &net).map_err(numerical("aInftyScalar"))?,
        a2_scalar_w: scalar_w.as_ref().map(a2_scalar).transpose().map_err(numerical("a2Scalar"))?,
        a_infty_scalar_w: scalar_w.as_ref().map(a_infty_scalar).transpose().map_err(numerical("aInftyScalar"))?,
        direction_net: net.len(),
    };
    out.json("characteristics.json", &rep)?;
    Ok((
        true,
        format!("[W]A2 = {}, [W,V]A2 = {}", fmt_f64(rep.a2_matrix_w.value), fmt_f64(rep.a2_two_weight.value)),
    ))
}

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct DominationOut {
    passed: bool,
    pieces: Vec<DominationResult>,
}

/// Decade bins of the per-cell residuals; exact zeros get their own row.
fn residual_histogram(residuals: &[f64]) -> Vec<Vec<String>> {
    let zeros = residuals.iter().filter(|r| **r == 0.0).count();
    let mut rows = vec![vec![fmt_f64(0.0), fmt_f64(0.0), zeros.to_string()]];
    let mut lower = 0.0;
    for k in -16..=2 {
        let upper = 10f64.powi(k);
        let count = residuals.iter().filter(|r| **r > lower && **r <= upper).count();
        rows.push(vec![fmt_f64(lower), fmt_f64(upper), count.to_string()]);
        lower = upper;
    }
    let count = residuals.iter().filter(|r| **r > lower).count();
    rows.push(vec![fmt_f64(lower), "inf".into(), count.to_string()]);
    rows
}

fn dominate(cfg: &ExperimentConfig, out: &mut Writer) -> Result<(bool, String), RunError> {
    let op = operator(cfg)?;
    let f = cfg.input_function()?;
    let pieces = match &op {
        Operator::Shift(t) => t
            .separate()
            .iter()
            .filter(|p| !p.is_zero())
            .map(|p| dominate_shift(p, &f, cfg.epsilon))
            .collect::<Result<Vec<_>, _>>()
            .map_err(numerical("dominateShift"))?,
        Operator::Cz(k) => vec![dominate_cz(k, &f, cfg.epsilon).map_err(numerical("dominateCz"))?],
    };
    let passed = pieces.iter().all(|p| p.passed());
    let residuals: Vec<f64> = pieces.iter().flat_map(|p| p.residual.iter().copied()).collect();
    let constants: Vec<String> = pieces.iter().map(|p| fmt_f64(p.constant)).collect();
    let worst = pieces.iter().map(|p| p.max_residual).fold(0.0, f64::max);
    out.json("domination.json", &DominationOut { passed, pieces })?;
    out.csv("residuals.csv", &["lower", "upper", "count"], &residual_histogram(&residuals))?;
    Ok((passed, format!("constants [{}], max residual {}", constants.join(", "), fmt_f64(worst))))
}

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct VerifyOut {
    passed: bool,
    constant: f64,
    tolerance: f64,
    tf_sup: f64,
    family: SparseFamily,
    #[serde(flatten)]
    report: crate::domination::VerifyReport,
}

fn verify(cfg: &ExperimentConfig, out: &mut Writer) -> Result<(bool, String), RunError> {
    let op = operator(cfg)?;
    let f = cfg.input_function()?;
    let tf = op.apply(&f).map_err(numerical("apply"))?;
    let lat = cfg.lattice();
    let cubes = cfg.family_cubes()?;
    let mut family = if cfg.enlarged {
        SparseFamily::tripled(lat, &cubes)
    } else {
        SparseFamily::dyadic(lat, &cubes)
    };
    family.certify().map_err(numerical("checkFamily"))?;
    let c = cfg.constant.expect("validated");
    let report = verify_domination(&f, &tf, &family, c).map_err(numerical("verifyDomination"))?;
    let tf_sup = tf.sup_norm();
    let tolerance = cfg.tolerance.unwrap_or(1e-8) * (1.0 + tf_sup);
    let passed = report.max_residual <= tolerance;
    let summary = format!("max residual {} at cell {}", fmt_f64(report.max_residual), report.worst_cell);
    out.json(
        "verify.json",
        &VerifyOut {
            passed,
            constant: c,
            tolerance,
            tf_sup,
            family,
            report,
        },
    )?;
    Ok((passed, summary))
}

fn sweep(cfg: &ExperimentConfig, out: &mut Writer) -> Result<(bool, String), RunError> {
    let probe = power_weight_probe(cfg.lattice(), &cfg.p_grid, cfg.seed).map_err(numerical("powerWeightProbe"))?;
    let slope = probe.slope.map(fmt_f64).unwrap_or_default();
    let rows: Vec<Vec<String>> = probe
        .rows
        .iter()
        .map(|r| vec![fmt_f64(r.p), fmt_f64(r.a2), fmt_f64(r.norm), fmt_f64(r.ratio), slope.clone()])
        .collect();
    out.csv("sweep.csv", &["p", "a2", "norm", "ratio", "slope"], &rows)?;
    Ok((true, format!("slope {}", if slope.is_empty() { "undefined" } else { &slope })))
}

fn search(cfg: &ExperimentConfig, out: &mut Writer) -> Result<(bool, String), RunError> {
    let op = operator(cfg)?;
    let res = counterexample_search(&op, cfg.alpha, cfg.budget, cfg.seed).map_err(numerical("counterexampleSearch"))?;
    out.json("search.json", &res)?;
    Ok((true, format!("best ratio {} after {} evaluations", fmt_f64(res.best_ratio), res.evaluations)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(s: &str) -> ExperimentConfig {
        ExperimentConfig::from_json(s, "test").unwrap()
    }

    #[test]
    fn seventeen_digits_round_trip() {
        for x in [0.1, 1.0 / 3.0, std::f64::consts::PI * 1e-300, 6.02214076e23, -2.5e-7] {
            let s = fmt_f64(x);
            assert_eq!(s.parse::<f64>().unwrap(), x);
            let mantissa = s.split('e').next().unwrap().trim_start_matches('-').replace('.', "");
            assert_eq!(mantissa.len(), 17);
        }
    }

    #[test]
    fn histogram_counts_everything() {
        let r = [0.0, 0.0, 1e-20, 5e-9, 3.0, 1e5];
        let rows = residual_histogram(&r);
        let total: usize = rows.iter().map(|row| row[2].parse::<usize>().unwrap()).sum();
        assert_eq!(total, r.len());
        assert_eq!(rows[0][2], "2");
    }

    #[test]
    fn identity_characteristics_are_one() {
        let dir = tempfile::tempdir().unwrap();
        let c = cfg(r#"{"command": "characteristics", "vectorDim": 2, "level": 4}"#);
        let o = run(&c, dir.path()).unwrap();
        assert!(o.passed);
        let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&o.files[0]).unwrap()).unwrap();
        assert_eq!(v["a2MatrixW"]["value"], 1.0);
        assert_eq!(v["a2TwoWeight"]["value"], 1.0);
    }

    #[test]
    fn scalar_characteristics_match_direct_computation() {
        let dir = tempfile::tempdir().unwrap();
        let c = cfg(r#"{"command": "characteristics", "level": 6, "weight": {"kind": "scalarPower", "p": 0.5}}"#);
        let o = run(&c, dir.path()).unwrap();
        let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&o.files[0]).unwrap()).unwrap();
        let w = crate::weights::scalar_power_weight(c.lattice(), 0.5, &[]);
        assert_eq!(v["a2ScalarW"]["value"].as_f64().unwrap(), a2_scalar(&w).unwrap().value);
        assert_eq!(v["a2MatrixW"]["value"], v["a2ScalarW"]["value"]);
    }

    #[test]
    fn verify_detects_a_too_small_constant() {
        let dir = tempfile::tempdir().unwrap();
        let base = r#""command": "verify", "level": 5, "vectorDim": 2, "seed": 3,
            "operator": {"kind": "bigHaarShift", "complexity": 0, "seed": 2}, "family": [{"level": 0, "index": [0]}]"#;
        let small = cfg(&format!("{{{base}, \"constant\": 1e-6}}"));
        assert!(!run(&small, dir.path()).unwrap().passed);
    }

    #[test]
    fn dominate_then_verify_agree() {
        let dir = tempfile::tempdir().unwrap();
        let op = r#""operator": {"kind": "bigHaarShift", "complexity": 0, "seed": 2}"#;
        let d = cfg(&format!(r#"{{"command": "dominate", "level": 6, "vectorDim": 2, "seed": 3, {op}}}"#));
        let o = run(&d, dir.path()).unwrap();
        assert!(o.passed, "{}", o.summary);
        let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("domination.json")).unwrap()).unwrap();
        let piece = &v["pieces"][0];
        let cubes: Vec<String> = piece["family"]["members"]
            .as_array()
            .unwrap()
            .iter()
            .map(|m| {
                let c = &m["cube"];
                format!(r#"{{"level": {}, "index": [{}]}}"#, c["level"], c["index"][0])
            })
            .collect();
        let vcfg = cfg(&format!(
            r#"{{"command": "verify", "level": 6, "vectorDim": 2, "seed": 3, {op}, "constant": {}, "family": [{}]}}"#,
            piece["constant"],
            cubes.join(",")
        ));
        let o = run(&vcfg, dir.path()).unwrap();
        assert!(o.passed, "{}", o.summary);
    }

    #[test]
    fn sweep_writes_one_row_per_exponent() {
        let dir = tempfile::tempdir().unwrap();
        let c = cfg(r#"{"command": "sweep", "level": 6, "pGrid": [0.0, 0.5]}"#);
        run(&c, dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "p,a2,norm,ratio,slope");
        assert_eq!(lines.len(), 3);
        let a2: f64 = lines[1].split(',').nth(1).unwrap().parse().unwrap();
        assert_eq!(a2, 1.0);
    }
}
