//! Pipeline configuration file (TOML).
//!
//! ```toml
//! seed = 42
//! module_name = "brain_tumors"
//!
//! [input]                     # omit for self-test mode
//! registry_table = "registry.csv"   # or: obds = "reports.xml"
//!
//! [output]
//! dir = "out"
//!
//! [policy]
//! k = 10
//! quasi_identifiers = ["gender", "icd10_localization", "deceased_flag"]
//! excluded_localizations = ["C71.5", "C71.6", "C71.7", "C72.0"]
//!
//! [simulation]
//! population_size = 100000
//! gender_split = 0.5
//! birth_date_window = [1930-01-01, 1960-12-31]
//! workers = 0                 # 0: one per core
//! fhir = false
//!
//! [evaluation]
//! bin_width_years = 5.0
//! by_gender = false
//!
//! [ground_truth]              # self-test cohort, see GroundTruthSpec
//! ```
//!
//! Relative paths resolve against the directory holding the config file.

use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cohort::{AgeParams, AgeShape, GroundTruthSpec, MenuStep, MenuTransition, PerGender, SurgeryOption, TherapyMenu, TherapyType};
use crate::privacy::PrivacyPolicy;
use crate::simulate::SimulationConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageName {
    Map,
    Audit,
    Timelines,
    Extract,
    Emit,
    Simulate,
    Evaluate,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputSection {
    pub registry_table: Option<PathBuf>,
    pub obds: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection { dir: "out".into() }
    }
}

fn default_population() -> u64 {
    100_000
}

fn default_split() -> f64 {
    0.5
}

fn default_window() -> [NaiveDate; 2] {
    SimulationConfig::new(1, 0).birth_date_window
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSection {
    #[serde(default = "default_population")]
    pub population_size: u64,
    #[serde(default = "default_split")]
    pub gender_split: f64,
    #[serde(default = "default_window")]
    pub birth_date_window: [NaiveDate; 2],
    /// Worker threads; 0 uses one per core. Never affects output.
    #[serde(default)]
    pub workers: usize,
    #[serde(default)]
    pub fhir: bool,
}

impl Default for SimulationSection {
    fn default() -> Self {
        SimulationSection {
            population_size: default_population(),
            gender_split: default_split(),
            birth_date_window: default_window(),
            workers: 0,
            fhir: false,
        }
    }
}

fn default_bin_width() -> f64 {
    5.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationSection {
    #[serde(default = "default_bin_width")]
    pub bin_width_years: f64,
    #[serde(default)]
    pub by_gender: bool,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        EvaluationSection {
            bin_width_years: default_bin_width(),
            by_gender: false,
        }
    }
}

fn default_module_name() -> String {
    "oncosynth".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    #[serde(default = "default_module_name")]
    pub module_name: String,
    /// Last stage to run; all stages by default.
    #[serde(default)]
    pub stop_after: Option<StageName>,
    #[serde(default)]
    pub input: InputSection,
    #[serde(default)]
    pub output: OutputSection,
    #[serde(default)]
    pub policy: PrivacyPolicy,
    #[serde(default)]
    pub simulation: SimulationSection,
    #[serde(default)]
    pub evaluation: EvaluationSection,
    #[serde(default)]
    pub ground_truth: Option<GroundTruthSpec>,
}

impl PipelineConfig {
    pub fn self_test(seed: u64, ground_truth: GroundTruthSpec) -> Self {
        PipelineConfig {
            seed,
            module_name: default_module_name(),
            stop_after: None,
            input: InputSection::default(),
            output: OutputSection::default(),
            policy: PrivacyPolicy::default(),
            simulation: SimulationSection::default(),
            evaluation: EvaluationSection::default(),
            ground_truth: Some(ground_truth),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let c: PipelineConfig = toml::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    /// Loads a config file and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let mut c = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        c.resolve_paths(base);
        Ok(c)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = &mut self.input.registry_table {
            fix(p);
        }
        if let Some(p) = &mut self.input.obds {
            fix(p);
        }
        fix(&mut self.output.dir);
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.input.registry_table.is_some() && self.input.obds.is_some() {
            return bad("set only one of input.registry_table and input.obds".into());
        }
        if self.input.registry_table.is_none() && self.input.obds.is_none() && self.ground_truth.is_none() {
            return bad("no input: set input.registry_table, input.obds, or a [ground_truth] section".into());
        }
        self.policy.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.simulation_config().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if !(self.evaluation.bin_width_years > 0.0) {
            return bad("evaluation.bin_width_years must be positive".into());
        }
        if let Some(gt) = &self.ground_truth {
            gt.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        if self.module_name.is_empty() {
            return bad("module_name must not be empty".into());
        }
        Ok(())
    }

    pub fn self_test_mode(&self) -> bool {
        self.input.registry_table.is_none() && self.input.obds.is_none()
    }

    pub fn simulation_config(&self) -> SimulationConfig {
        SimulationConfig {
            population_size: self.simulation.population_size,
            seed: self.seed,
            gender_split: self.simulation.gender_split,
            birth_date_window: self.simulation.birth_date_window,
        }
    }

    pub fn runs(&self, stage: StageName) -> bool {
        self.stop_after.is_none_or(|last| stage <= last)
    }

    /// SHA-256 over the canonical JSON form of the parsed config. Worker
    /// count and output location are excluded: neither changes any artifact.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.simulation.workers = 0;
        c.output.dir = PathBuf::new();
        sha256_hex(serde_json::to_string(&c).expect("config serialize").as_bytes())
    }
}

/// Built-in self-test cohort: two localizations (0.7 / 0.3), Gaussian ages
/// (male 62 ± 8, female 65 ± 9 years), exponential survival with mean 400
/// days, and one surgery taken by 60 % of cases 7 to 30 days after diagnosis.
pub fn self_test_spec(seed: u64) -> GroundTruthSpec {
    let locs: std::collections::BTreeMap<String, f64> = [("C71.2".to_string(), 0.7), ("C71.9".to_string(), 0.3)].into();
    GroundTruthSpec {
        cohort_size: 5_000,
        seed,
        male_fraction: 0.5,
        diagnosis_years: [2010, 2019],
        age_shape: AgeShape::Gaussian,
        localizations: PerGender {
            male: locs.clone(),
            female: locs,
        },
        age: PerGender {
            male: AgeParams { mean: 62.0, std: 8.0 },
            female: AgeParams { mean: 65.0, std: 9.0 },
        },
        survival_mean_days: [("C71.2".to_string(), 400.0), ("C71.9".to_string(), 400.0)].into(),
        death_probability: 0.9,
        therapy: TherapyMenu {
            transitions: vec![MenuTransition {
                from: MenuStep::Diagnosis,
                to: TherapyType::Surgery,
                probability: 0.6,
                delay_days: [7, 30],
            }],
            surgeries: vec![SurgeryOption {
                ops: "5-015.0".into(),
                weight: 1.0,
            }],
            systemic: vec![],
            radio_duration_days: None,
        },
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_file_uses_defaults() {
        let c = PipelineConfig::from_toml("seed = 7\n[input]\nobds = \"a.xml\"\n").unwrap();
        assert_eq!(c.policy, PrivacyPolicy::default());
        assert_eq!(c.simulation.population_size, 100_000);
        assert_eq!(c.evaluation.bin_width_years, 5.0);
        assert!(c.runs(StageName::Evaluate));
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(PipelineConfig::from_toml("seed = 7\n").is_err());
        assert!(PipelineConfig::from_toml("seed = 7\n[input]\nobds = \"a\"\nregistry_table = \"b\"\n").is_err());
        assert!(PipelineConfig::from_toml("seed = 7\n[input]\nobds = \"a\"\n[policy]\nk = 1\n").is_err());
        assert!(PipelineConfig::from_toml("seed = 7\nbogus = 1\n[input]\nobds = \"a\"\n").is_err());
    }

    #[test]
    fn digest_ignores_workers_only() {
        let a = PipelineConfig::from_toml("seed = 7\n[input]\nobds = \"a.xml\"\n").unwrap();
        let mut b = a.clone();
        b.simulation.workers = 8;
        assert_eq!(a.digest(), b.digest());
        b.seed = 8;
        assert_ne!(a.digest(), b.digest());
    }

    #[test]
    fn self_test_spec_is_valid() {
        self_test_spec(1).validate().unwrap();
        let c = PipelineConfig::self_test(1, self_test_spec(1));
        c.validate().unwrap();
        assert!(c.self_test_mode());
    }

    #[test]
    fn stop_after() {
        let c = PipelineConfig::from_toml("seed = 1\nstop_after = \"extract\"\n[input]\nobds = \"a\"\n").unwrap();
        assert!(c.runs(StageName::Extract));
        assert!(!c.runs(StageName::Emit));
    }
}
