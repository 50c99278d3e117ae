//! Interpreter for emitted modules: simulates synthetic patients and writes
//! their event logs.
//!
//! Each patient draws from its own random stream addressed by
//! `(seed, patient_index)`, so output does not depend on worker count.

use std::io::{self, Read, Write};

use chrono::{Days, NaiveDate};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gmf::{DelaySpec, GmfModule, StateKind, Transition, ICD10_SYSTEM, OPS_SYSTEM, RADIOTHERAPY_CODE, SNOMED_SYSTEM, SUBSTANCE_SYSTEM};
use crate::obds::Gender;
use crate::rng::{self, Domain};

/// Guards against cycles in modules that skipped validation.
pub const MAX_STEPS: usize = 10_000;
const CHUNK: usize = 4096;

fn default_gender_split() -> f64 {
    0.5
}

fn default_window() -> [NaiveDate; 2] {
    [
        NaiveDate::from_ymd_opt(1930, 1, 1).unwrap(),
        NaiveDate::from_ymd_opt(1960, 12, 31).unwrap(),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub population_size: u64,
    pub seed: u64,
    /// Probability that a patient is male.
    #[serde(default = "default_gender_split")]
    pub gender_split: f64,
    /// Inclusive birth date interval.
    #[serde(default = "default_window")]
    pub birth_date_window: [NaiveDate; 2],
}

impl SimulationConfig {
    pub fn new(population_size: u64, seed: u64) -> Self {
        SimulationConfig {
            population_size,
            seed,
            gender_split: default_gender_split(),
            birth_date_window: default_window(),
        }
    }

    pub fn validate(&self) -> Result<(), SimulationError> {
        if self.population_size == 0 {
            return Err(SimulationError::InvalidConfig("population_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.gender_split) {
            return Err(SimulationError::InvalidConfig(format!("gender_split {} outside [0, 1]", self.gender_split)));
        }
        if self.birth_date_window[0] > self.birth_date_window[1] {
            return Err(SimulationError::InvalidConfig("birth_date_window is empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticEvent {
    pub state: String,
    /// State type name, e.g. `Procedure`.
    pub kind: String,
    pub code: String,
    pub date: NaiveDate,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticPatient {
    pub patient_index: u64,
    pub gender: Gender,
    pub date_of_birth: NaiveDate,
    /// Every visited state in order. Delay states carry the date they end.
    pub events: Vec<SyntheticEvent>,
}

impl SyntheticPatient {
    pub fn diagnosis(&self) -> Option<&SyntheticEvent> {
        self.events.iter().find(|e| e.kind == "ConditionOnset")
    }

    pub fn death(&self) -> Option<&SyntheticEvent> {
        self.events.iter().find(|e| e.kind == "Death")
    }

    /// First surgery (OPS procedure, not radiotherapy).
    pub fn first_surgery(&self) -> Option<&SyntheticEvent> {
        self.events.iter().find(|e| e.kind == "Procedure" && e.code != RADIOTHERAPY_CODE)
    }
}

#[derive(Debug, Error)]
pub enum SimulationError {
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error("module has no Initial state")]
    NoInitial,
    #[error("state '{0}' not found")]
    StateNotFound(String),
    #[error("state '{0}' has no transition")]
    NoTransition(String),
    #[error("patient {0} exceeded {MAX_STEPS} steps")]
    StepLimit(u64),
    #[error("invalid delay in state '{0}'")]
    InvalidDelay(String),
    #[error("worker pool: {0}")]
    Pool(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("event log line {line}: {message}")]
    Log { line: u64, message: String },
}

fn round_half_up(x: f64) -> i64 {
    (x + 0.5).floor() as i64
}

/// Delay length in whole days.
pub fn sample_delay_days(spec: &DelaySpec, rng: &mut ChaCha8Rng) -> Option<i64> {
    Some(match *spec {
        DelaySpec::Exact { quantity, unit } => round_half_up(quantity * unit.days()),
        DelaySpec::Uniform { low, high } => rng.random_range(low..=high),
        DelaySpec::Gaussian { mean, std, unit } => {
            let x: f64 = Normal::new(mean, std).ok()?.sample(rng);
            round_half_up(x.max(0.0) * unit.days())
        }
        DelaySpec::Exponential { mean } => round_half_up(Exp::new(1.0 / mean).ok()?.sample(rng)),
    })
}

pub fn simulate_patient(module: &GmfModule, config: &SimulationConfig, index: u64) -> Result<SyntheticPatient, SimulationError> {
    let mut rng = rng::stream(config.seed, Domain::Simulation, index);
    let gender = if rng.random::<f64>() < config.gender_split {
        Gender::Male
    } else {
        Gender::Female
    };
    let [lo, hi] = config.birth_date_window;
    let offset = rng.random_range(0..=(hi - lo).num_days()) as u64;
    let date_of_birth = lo + Days::new(offset);

    let mut current = module.initial_state().ok_or(SimulationError::NoInitial)?.to_string();
    let mut clock = date_of_birth;
    let mut events = Vec::new();
    for _ in 0..MAX_STEPS {
        let state = module
            .states
            .get(&current)
            .ok_or_else(|| SimulationError::StateNotFound(current.clone()))?;
        if let StateKind::Delay(spec) = &state.kind {
            let days = sample_delay_days(spec, &mut rng).ok_or_else(|| SimulationError::InvalidDelay(current.clone()))?;
            clock = clock + Days::new(days.max(0) as u64);
        }
        events.push(SyntheticEvent {
            state: current.clone(),
            kind: state.kind.type_name().to_string(),
            code: state.kind.code(),
            date: clock,
        });
        if state.kind.is_terminal_kind() {
            return Ok(SyntheticPatient {
                patient_index: index,
                gender,
                date_of_birth,
                events,
            });
        }
        let next = match &state.transition {
            None => return Err(SimulationError::NoTransition(current)),
            Some(Transition::Direct(t)) => t,
            Some(Transition::Distributed(branches)) => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut pick = &branches.last().ok_or_else(|| SimulationError::NoTransition(current.clone()))?.1;
                for (p, t) in branches {
                    acc += p;
                    if u < acc {
                        pick = t;
                        break;
                    }
                }
                pick
            }
            Some(Transition::Conditional(branches)) => {
                &branches
                    .iter()
                    .find(|(g, _)| g.is_none() || *g == Some(gender))
                    .ok_or_else(|| SimulationError::NoTransition(current.clone()))?
                    .1
            }
        };
        current = next.clone();
    }
    Err(SimulationError::StepLimit(index))
}

/// Simulates the population in fixed-size chunks on `workers` threads and
/// hands patients to `sink` in index order. Memory is bounded by one chunk.
pub fn simulate_each<F>(module: &GmfModule, config: &SimulationConfig, workers: usize, mut sink: F) -> Result<(), SimulationError>
where
    F: FnMut(SyntheticPatient) -> Result<(), SimulationError>,
{
    config.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| SimulationError::Pool(e.to_string()))?;
    let n = config.population_size;
    let mut start = 0u64;
    while start < n {
        let end = (start + CHUNK as u64).min(n);
        let chunk: Vec<Result<SyntheticPatient, SimulationError>> =
            pool.install(|| (start..end).into_par_iter().map(|i| simulate_patient(module, config, i)).collect());
        for p in chunk {
            sink(p?)?;
        }
        start = end;
    }
    Ok(())
}

pub fn simulate(module: &GmfModule, config: &SimulationConfig, workers: usize) -> Result<Vec<SyntheticPatient>, SimulationError> {
    let mut out = Vec::with_capacity(config.population_size as usize);
    simulate_each(module, config, workers, |p| {
        out.push(p);
        Ok(())
    })?;
    Ok(out)
}

// ---------------------------------------------------------------------------
// Event log

pub const EVENT_LOG_COLUMNS: [&str; 8] = [
    "patient_index",
    "gender",
    "birth_date",
    "state",
    "kind",
    "code",
    "date",
    "days_since_diagnosis",
];

pub struct EventLogWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> EventLogWriter<W> {
    /// Writes a `#` provenance line followed by the header.
    pub fn new(mut writer: W, provenance: &str) -> Result<Self, SimulationError> {
        writeln!(writer, "# {provenance}")?;
        let mut inner = csv::Writer::from_writer(writer);
        inner.write_record(EVENT_LOG_COLUMNS)?;
        Ok(EventLogWriter { inner })
    }

    pub fn write_patient(&mut self, p: &SyntheticPatient) -> Result<(), SimulationError> {
        let diagnosis = p.events.iter().position(|e| e.kind == "ConditionOnset");
        let index = p.patient_index.to_string();
        let birth = p.date_of_birth.to_string();
        for (i, e) in p.events.iter().enumerate() {
            // blank before the diagnosis
            let since = match diagnosis {
                Some(d) if i >= d => (e.date - p.events[d].date).num_days().to_string(),
                _ => String::new(),
            };
            self.inner.write_record([
                index.as_str(),
                p.gender.as_str(),
                birth.as_str(),
                e.state.as_str(),
                e.kind.as_str(),
                e.code.as_str(),
                &e.date.to_string(),
                &since,
            ])?;
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<W, SimulationError> {
        self.inner.flush()?;
        self.inner.into_inner().map_err(|e| SimulationError::Io(e.into_error()))
    }
}

/// Streams patients back out of an event log, in file order.
pub fn read_event_log<R: Read, F>(reader: R, mut sink: F) -> Result<(), SimulationError>
where
    F: FnMut(SyntheticPatient) -> Result<(), SimulationError>,
{
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.iter().ne(EVENT_LOG_COLUMNS) {
        return Err(SimulationError::Log {
            line: 1,
            message: format!("unexpected header {:?}", headers.iter().collect::<Vec<_>>()),
        });
    }
    let mut current: Option<SyntheticPatient> = None;
    for row in rdr.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        let bad = |message: String| SimulationError::Log { line, message };
        let index: u64 = row[0].parse().map_err(|_| bad(format!("bad patient_index '{}'", &row[0])))?;
        let gender: Gender = row[1].parse().map_err(|_| bad(format!("bad gender '{}'", &row[1])))?;
        let birth = NaiveDate::parse_from_str(&row[2], "%Y-%m-%d").map_err(|_| bad(format!("bad birth_date '{}'", &row[2])))?;
        let date = NaiveDate::parse_from_str(&row[6], "%Y-%m-%d").map_err(|_| bad(format!("bad date '{}'", &row[6])))?;
        let event = SyntheticEvent {
            state: row[3].to_string(),
            kind: row[4].to_string(),
            code: row[5].to_string(),
            date,
        };
        match &mut current {
            Some(p) if p.patient_index == index => p.events.push(event),
            _ => {
                if let Some(done) = current.take() {
                    sink(done)?;
                }
                current = Some(SyntheticPatient {
                    patient_index: index,
                    gender,
                    date_of_birth: birth,
                    events: vec![event],
                });
            }
        }
    }
    if let Some(done) = current {
        sink(done)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// FHIR-lite bundles

fn coding(system: &str, code: &str) -> serde_json::Value {
    serde_json::json!({ "coding": [{ "system": system, "code": code }] })
}

/// One collection bundle per patient with Patient, Condition, Procedure and
/// MedicationStatement-shaped resources. Only fields this pipeline knows are set.
pub fn fhir_bundle(p: &SyntheticPatient) -> serde_json::Value {
    let pid = format!("synthetic-{}", p.patient_index);
    let subject = serde_json::json!({ "reference": format!("Patient/{pid}") });
    let mut patient = serde_json::json!({
        "resourceType": "Patient",
        "id": pid,
        "gender": p.gender.as_str(),
        "birthDate": p.date_of_birth.to_string(),
    });
    if let Some(d) = p.death() {
        patient["deceasedDateTime"] = d.date.to_string().into();
    }
    let mut entries = vec![serde_json::json!({ "resource": patient })];
    let mut medications: Vec<serde_json::Value> = Vec::new();
    for (i, e) in p.events.iter().enumerate() {
        let id = format!("{pid}-{i}");
        let resource = match e.kind.as_str() {
            "ConditionOnset" => serde_json::json!({
                "resourceType": "Condition",
                "id": id,
                "subject": subject,
                "code": coding(ICD10_SYSTEM, &e.code),
                "onsetDateTime": e.date.to_string(),
            }),
            "Procedure" => {
                let system = if e.code == RADIOTHERAPY_CODE { SNOMED_SYSTEM } else { OPS_SYSTEM };
                serde_json::json!({
                    "resourceType": "Procedure",
                    "id": id,
                    "status": "completed",
                    "subject": subject,
                    "code": coding(system, &e.code),
                    "performedDateTime": e.date.to_string(),
                })
            }
            "MedicationOrder" => {
                medications.push(serde_json::json!({
                    "resourceType": "MedicationStatement",
                    "id": id,
                    "status": "active",
                    "subject": subject,
                    "medicationCodeableConcept": coding(SUBSTANCE_SYSTEM, &e.code),
                    "effectivePeriod": { "start": e.date.to_string() },
                }));
                continue;
            }
            "MedicationEnd" => {
                if let Some(m) = medications.iter_mut().rev().find(|m| m["medicationCodeableConcept"]["coding"][0]["code"] == e.code.as_str()) {
                    m["status"] = "completed".into();
                    m["effectivePeriod"]["end"] = e.date.to_string().into();
                }
                continue;
            }
            _ => continue,
        };
        entries.push(serde_json::json!({ "resource": resource }));
    }
    entries.extend(medications.into_iter().map(|m| serde_json::json!({ "resource": m })));
    serde_json::json!({ "resourceType": "Bundle", "type": "collection", "entry": entries })
}

pub fn write_fhir_line<W: Write>(writer: &mut W, p: &SyntheticPatient) -> io::Result<()> {
    serde_json::to_writer(&mut *writer, &fhir_bundle(p))?;
    writer.write_all(b"\n")
}
