//! Experiment configuration: one JSON document per run.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dyadic::{DyadicCube, DyadicLattice, GridFunction, MAX_LEVEL_1D, MAX_LEVEL_2D};
use crate::operators::OperatorSpec;
use crate::weights::WeightSpec;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("{path}: line {line}, column {column}: {message}")]
    Syntax { path: String, line: usize, column: usize, message: String },
    #[error("field `{field}`: {message}")]
    Field { field: String, message: String },
}

fn field(name: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Field {
        field: name.into(),
        message: message.into(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Command {
    Characteristics,
    Dominate,
    Verify,
    Sweep,
    Search,
    Selftest,
}

/// The function `f` fed to the domination commands.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "camelCase", deny_unknown_fields)]
pub enum InputSpec {
    /// Uniform values in `[-1, 1]` per component; a few cells get amplitude
    /// `spike` with probability `spikeRate`.
    #[serde(rename_all = "camelCase")]
    Random {
        seed: u64,
        #[serde(default)]
        middle_half: bool,
        #[serde(default)]
        spike_rate: f64,
        #[serde(default = "one")]
        spike: f64,
    },
    /// Cell-major values, `vectorDim` per finest cell.
    #[serde(rename_all = "camelCase")]
    Explicit { values: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct CubeSpec {
    pub level: u8,
    pub index: Vec<u32>,
}

fn one() -> f64 {
    1.0
}
fn one_u8() -> u8 {
    1
}
fn one_usize() -> usize {
    1
}
fn default_level() -> u8 {
    8
}
fn half() -> f64 {
    0.5
}
fn default_p_grid() -> Vec<f64> {
    vec![0.5, 0.7, 0.8, 0.9, 0.95]
}
fn default_budget() -> usize {
    20
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct ExperimentConfig {
    pub command: Command,
    /// Grid dimension `N`.
    #[serde(default = "one_u8")]
    pub dimension: u8,
    /// Finest level `J`.
    #[serde(default = "default_level")]
    pub level: u8,
    #[serde(default = "one_usize")]
    pub vector_dim: usize,
    /// `W`; identity when absent.
    #[serde(default)]
    pub weight: Option<WeightSpec>,
    /// `V`; the pointwise inverse of `W` when absent.
    #[serde(default)]
    pub dual_weight: Option<WeightSpec>,
    #[serde(default)]
    pub eigen_floor: f64,
    #[serde(default)]
    pub operator: Option<OperatorSpec>,
    #[serde(default)]
    pub input: Option<InputSpec>,
    /// Sparseness parameter of the stopping construction.
    #[serde(default = "half")]
    pub epsilon: f64,
    /// Residual tolerance for `verify`; scaled by `1 + ‖Tf‖∞`.
    #[serde(default)]
    pub tolerance: Option<f64>,
    /// Directions in the net used for scalar A∞ characteristics.
    #[serde(default)]
    pub direction_net: Option<usize>,
    /// Domination constant checked by `verify`.
    #[serde(default)]
    pub constant: Option<f64>,
    /// Family checked by `verify`.
    #[serde(default)]
    pub family: Option<Vec<CubeSpec>>,
    /// Use clipped triples of the family cubes in `verify`.
    #[serde(default)]
    pub enlarged: bool,
    #[serde(default = "default_p_grid")]
    pub p_grid: Vec<f64>,
    #[serde(default = "one")]
    pub alpha: f64,
    #[serde(default = "default_budget")]
    pub budget: usize,
    #[serde(default)]
    pub seed: u64,
    /// Output directory when `--out` is not given.
    #[serde(default)]
    pub output: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            ConfigError::Syntax {
                path: if path == "." { origin.to_string() } else { format!("{origin} at `{path}`") },
                line: inner.line(),
                column: inner.column(),
                message: inner.to_string(),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text, &path.display().to_string())
    }

    pub fn max_level(&self) -> u8 {
        if self.dimension == 1 {
            MAX_LEVEL_1D
        } else {
            MAX_LEVEL_2D
        }
    }

    /// Range checks and per-command requirements.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(1..=2).contains(&self.dimension) {
            return Err(field("dimension", format!("{} not in {{1, 2}}", self.dimension)));
        }
        if self.level == 0 || self.level > self.max_level() {
            return Err(field(
                "level",
                format!("{} not in [1, {}] for dimension {}", self.level, self.max_level(), self.dimension),
            ));
        }
        if !(1..=4).contains(&self.vector_dim) {
            return Err(field("vectorDim", format!("{} not in [1, 4]", self.vector_dim)));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(field("epsilon", format!("{} not in (0, 1)", self.epsilon)));
        }
        if !(self.eigen_floor >= 0.0 && self.eigen_floor.is_finite()) {
            return Err(field("eigenFloor", "must be finite and nonnegative"));
        }
        if let Some(t) = self.tolerance {
            if !(t > 0.0 && t.is_finite()) {
                return Err(field("tolerance", "must be positive"));
            }
        }
        if self.direction_net == Some(0) {
            return Err(field("directionNet", "must be positive"));
        }
        let cz = matches!(self.operator, Some(OperatorSpec::CzHilbert {}));
        if cz && self.dimension != 1 {
            return Err(field("operator", "czHilbert needs dimension 1"));
        }
        match self.command {
            Command::Characteristics | Command::Selftest => {}
            Command::Dominate | Command::Verify => {
                if self.operator.is_none() {
                    return Err(field("operator", "required by this command"));
                }
                if cz {
                    if let Some(InputSpec::Random { middle_half: false, .. }) = &self.input {
                        return Err(field("input.middleHalf", "czHilbert needs input supported in the middle half"));
                    }
                }
                if let Some(InputSpec::Random { spike_rate, spike, .. }) = &self.input {
                    if !(0.0..=1.0).contains(spike_rate) || !spike.is_finite() {
                        return Err(field("input.spikeRate", "rate must lie in [0, 1] with a finite spike"));
                    }
                }
                if self.command == Command::Verify {
                    match self.constant {
                        Some(c) if c > 0.0 && c.is_finite() => {}
                        _ => return Err(field("constant", "verify needs a positive domination constant")),
                    }
                    if self.family.as_ref().is_none_or(|f| f.is_empty()) {
                        return Err(field("family", "verify needs a nonempty cube list"));
                    }
                }
            }
            Command::Sweep => {
                if self.dimension != 1 {
                    return Err(field("dimension", "sweep runs on the line"));
                }
                if self.p_grid.is_empty() || self.p_grid.iter().any(|p| !(0.0..1.0).contains(p)) {
                    return Err(field("pGrid", "needs at least one exponent in [0, 1)"));
                }
            }
            Command::Search => {
                if self.operator.is_none() {
                    return Err(field("operator", "required by this command"));
                }
                if !(1.0..=1.5).contains(&self.alpha) {
                    return Err(field("alpha", format!("{} not in [1, 1.5]", self.alpha)));
                }
                if self.budget == 0 {
                    return Err(field("budget", "must be positive"));
                }
            }
        }
        Ok(())
    }

    pub fn lattice(&self) -> DyadicLattice {
        DyadicLattice::new(self.dimension, self.level).expect("validated")
    }

    pub fn family_cubes(&self) -> Result<Vec<DyadicCube>, ConfigError> {
        let lat = self.lattice();
        self.family
            .iter()
            .flatten()
            .enumerate()
            .map(|(i, c)| {
                let idx = [c.index.first().copied().unwrap_or(0), c.index.get(1).copied().unwrap_or(0)];
                let cube = DyadicCube::new(self.dimension, c.level, idx)
                    .and_then(|q| lat.check_cube(&q).map(|_| q))
                    .map_err(|e| field(&format!("family[{i}]"), e.to_string()))?;
                Ok(cube)
            })
            .collect()
    }

    /// The input function; seeded from `seed` when no input is given.
    pub fn input_function(&self) -> Result<GridFunction, ConfigError> {
        let lat = self.lattice();
        let d = self.vector_dim;
        let n = lat.n_cells();
        let middle = |c: usize| {
            let x = lat.cell_center(c)[0];
            (0.25..0.75).contains(&x)
        };
        let random = |seed: u64, middle_half: bool, rate: f64, spike: f64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            GridFunction::from_cells(lat, d, |c, v| {
                let amp = if rate > 0.0 && rng.gen_bool(rate) { spike } else { 1.0 };
                for x in v.iter_mut() {
                    *x = amp * rng.gen_range(-1.0..1.0);
                }
                if middle_half && !middle(c) {
                    v.iter_mut().for_each(|x| *x = 0.0);
                }
            })
        };
        let cz = matches!(self.operator, Some(OperatorSpec::CzHilbert {}));
        match &self.input {
            None => Ok(random(self.seed, cz, 0.0, 1.0)),
            Some(InputSpec::Random {
                seed,
                middle_half,
                spike_rate,
                spike,
            }) => Ok(random(*seed, *middle_half, *spike_rate, *spike)),
            Some(InputSpec::Explicit { values }) => {
                if values.len() != n * d {
                    return Err(field("input.values", format!("{} values, expected {}", values.len(), n * d)));
                }
                GridFunction::new(lat, d, values.clone()).map_err(|e| field("input.values", e.to_string()))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Result<ExperimentConfig, ConfigError> {
        ExperimentConfig::from_json(s, "test.json")
    }

    #[test]
    fn defaults_fill_in() {
        let c = parse(r#"{"command": "characteristics"}"#).unwrap();
        assert_eq!((c.dimension, c.level, c.vector_dim), (1, 8, 1));
        assert_eq!(c.epsilon, 0.5);
        assert_eq!(c.p_grid.len(), 5);
    }

    #[test]
    fn unknown_field_reports_position() {
        let e = parse("{\n  \"command\": \"sweep\",\n  \"levle\": 3\n}").unwrap_err();
        match e {
            ConfigError::Syntax { line, message, .. } => {
                assert_eq!(line, 3);
                assert!(message.contains("levle"), "{message}");
            }
            other => panic!("{other}"),
        }
    }

    #[test]
    fn nested_path_is_named() {
        let e = parse(r#"{"command": "characteristics", "weight": {"kind": "scalarPower", "q": 1}}"#).unwrap_err();
        assert!(e.to_string().contains("weight"), "{e}");
    }

    #[test]
    fn ranges_are_checked() {
        for (s, name) in [
            (r#"{"command": "characteristics", "dimension": 3}"#, "dimension"),
            (r#"{"command": "characteristics", "dimension": 2, "level": 8}"#, "level"),
            (r#"{"command": "characteristics", "vectorDim": 5}"#, "vectorDim"),
            (r#"{"command": "dominate"}"#, "operator"),
            (r#"{"command": "verify", "operator": {"kind": "czHilbert"}, "constant": 1}"#, "family"),
            (r#"{"command": "sweep", "pGrid": [1.0]}"#, "pGrid"),
            (r#"{"command": "search", "operator": {"kind": "czHilbert"}, "alpha": 2}"#, "alpha"),
            (
                r#"{"command": "dominate", "operator": {"kind": "czHilbert"}, "input": {"kind": "random", "seed": 1}}"#,
                "input.middleHalf",
            ),
        ] {
            match parse(s).unwrap_err() {
                ConfigError::Field { field, .. } => assert_eq!(field, name, "{s}"),
                other => panic!("{s}: {other}"),
            }
        }
    }

    #[test]
    fn input_function_is_seeded() {
        let c = parse(r#"{"command": "dominate", "operator": {"kind": "czHilbert"}, "vectorDim": 2, "seed": 4}"#).unwrap();
        let f = c.input_function().unwrap();
        assert_eq!(f, c.input_function().unwrap());
        let n = f.n_cells();
        assert!((0..n / 4).all(|i| f.cell(i).iter().all(|v| *v == 0.0)));
        assert!(f.cell(n / 2).iter().any(|v| *v != 0.0));
    }

    #[test]
    fn family_cubes_are_checked() {
        let c = parse(
            r#"{"command": "verify", "operator": {"kind": "haarShift", "complexity": 0, "seed": 1}, "constant": 1,
                "family": [{"level": 0, "index": [0]}, {"level": 9, "index": [0]}]}"#,
        )
        .unwrap();
        assert!(matches!(c.family_cubes(), Err(ConfigError::Field { .. })));
    }
}
