//! Generic Module Framework state machines: emission from extracted rules,
//! structural validation, and the JSON module format.
//!
//! Emitted module layout:
//!
//! ```text
//! Initial --gender--> Localization_<Gender> --distributed--> AgeDelay (Gaussian, years)
//!   --> Diagnosis (ConditionOnset) --distributed--> Delay (uniform) --> therapy state ...
//!   ... --> SurvivalDelay (exponential) --> Death --> Terminal
//!   ... --> Terminal                                   (loss to follow-up)
//! ```

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::TherapyType;
use crate::extract::{ChainState, DelayModel, ExtractionResult, GaussianFit, TimeUnit};
use crate::obds::{substances_label, Gender, Substances};
use crate::timeline::EventKind;

pub const GENERATOR: &str = "oncosynth";
pub const OPS_SYSTEM: &str = "OPS";
pub const ICD10_SYSTEM: &str = "ICD-10";
pub const SUBSTANCE_SYSTEM: &str = "oBDS-Substanz";
pub const SNOMED_SYSTEM: &str = "SNOMED-CT";
pub const RADIOTHERAPY_CODE: &str = "108290001";
const RADIOTHERAPY_DISPLAY: &str = "Radiation oncology AND/OR radiotherapy (procedure)";
pub const INITIAL: &str = "Initial";
pub const TERMINAL: &str = "Terminal";
pub const DEATH: &str = "Death";

const PROBABILITY_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Coding {
    pub system: String,
    pub code: String,
    pub display: String,
}

impl Coding {
    pub fn radiotherapy() -> Coding {
        Coding {
            system: SNOMED_SYSTEM.into(),
            code: RADIOTHERAPY_CODE.into(),
            display: RADIOTHERAPY_DISPLAY.into(),
        }
    }

    pub fn ops(code: &str) -> Coding {
        Coding {
            system: OPS_SYSTEM.into(),
            code: code.into(),
            display: format!("OPS {code}"),
        }
    }

    pub fn icd10(code: &str) -> Coding {
        Coding {
            system: ICD10_SYSTEM.into(),
            code: code.into(),
            display: icd10_display(code).to_string(),
        }
    }

    pub fn substances(s: &Substances) -> Coding {
        let label = substances_label(s);
        Coding {
            system: SUBSTANCE_SYSTEM.into(),
            code: label.clone(),
            display: label,
        }
    }
}

pub fn icd10_display(code: &str) -> &'static str {
    match code {
        "C71.0" => "Malignant neoplasm: Cerebrum, except lobes and ventricles",
        "C71.1" => "Malignant neoplasm: Frontal lobe",
        "C71.2" => "Malignant neoplasm: Temporal lobe",
        "C71.3" => "Malignant neoplasm: Parietal lobe",
        "C71.4" => "Malignant neoplasm: Occipital lobe",
        "C71.5" => "Malignant neoplasm: Cerebral ventricle",
        "C71.6" => "Malignant neoplasm: Cerebellum",
        "C71.7" => "Malignant neoplasm: Brain stem",
        "C71.8" => "Malignant neoplasm: Overlapping lesion of brain",
        "C71.9" => "Malignant neoplasm: Brain, unspecified",
        "C72.0" => "Malignant neoplasm: Spinal cord",
        _ => "Malignant neoplasm",
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DelaySpec {
    Exact { quantity: f64, unit: TimeUnit },
    /// Inclusive day range.
    Uniform { low: i64, high: i64 },
    Gaussian { mean: f64, std: f64, unit: TimeUnit },
    /// Mean in days.
    Exponential { mean: f64 },
}

impl DelaySpec {
    pub fn from_model(model: &DelayModel) -> DelaySpec {
        match model {
            DelayModel::Gaussian(g) => DelaySpec::from_gaussian(g),
            DelayModel::Exponential(e) => DelaySpec::Exponential { mean: e.mean },
            DelayModel::Uniform(u) if u.min == u.max => DelaySpec::Exact {
                quantity: u.min as f64,
                unit: TimeUnit::Days,
            },
            DelayModel::Uniform(u) => DelaySpec::Uniform { low: u.min, high: u.max },
        }
    }

    pub fn from_gaussian(g: &GaussianFit) -> DelaySpec {
        if g.std == 0.0 {
            DelaySpec::Exact {
                quantity: g.mean,
                unit: g.unit,
            }
        } else {
            DelaySpec::Gaussian {
                mean: g.mean,
                std: g.std,
                unit: g.unit,
            }
        }
    }

    pub fn is_valid(&self) -> bool {
        match *self {
            DelaySpec::Exact { quantity, .. } => quantity.is_finite() && quantity >= 0.0,
            DelaySpec::Uniform { low, high } => low >= 0 && low <= high,
            DelaySpec::Gaussian { mean, std, .. } => mean.is_finite() && std.is_finite() && std > 0.0,
            DelaySpec::Exponential { mean } => mean.is_finite() && mean > 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum StateKind {
    Initial,
    Simple,
    ConditionOnset(Coding),
    /// Surgery (OPS coding) or radiotherapy start (SNOMED coding).
    Procedure(Coding),
    MedicationOrder(Substances),
    MedicationEnd(Substances),
    Delay(DelaySpec),
    Death,
    Terminal,
}

impl StateKind {
    pub fn type_name(&self) -> &'static str {
        match self {
            StateKind::Initial => "Initial",
            StateKind::Simple => "Simple",
            StateKind::ConditionOnset(_) => "ConditionOnset",
            StateKind::Procedure(_) => "Procedure",
            StateKind::MedicationOrder(_) => "MedicationOrder",
            StateKind::MedicationEnd(_) => "MedicationEnd",
            StateKind::Delay(_) => "Delay",
            StateKind::Death => "Death",
            StateKind::Terminal => "Terminal",
        }
    }

    pub fn code(&self) -> String {
        match self {
            StateKind::ConditionOnset(c) | StateKind::Procedure(c) => c.code.clone(),
            StateKind::MedicationOrder(s) | StateKind::MedicationEnd(s) => substances_label(s),
            _ => String::new(),
        }
    }

    /// Therapy type started by this state, if any.
    pub fn therapy_start(&self) -> Option<TherapyType> {
        match self {
            StateKind::Procedure(c) if c.system == SNOMED_SYSTEM && c.code == RADIOTHERAPY_CODE => Some(TherapyType::Radio),
            StateKind::Procedure(_) => Some(TherapyType::Surgery),
            StateKind::MedicationOrder(_) => Some(TherapyType::Systemic),
            _ => None,
        }
    }

    /// States that stop a simulated patient.
    pub fn is_terminal_kind(&self) -> bool {
        matches!(self, StateKind::Terminal | StateKind::Death)
    }

    pub fn is_clinical(&self) -> bool {
        matches!(
            self,
            StateKind::ConditionOnset(_)
                | StateKind::Procedure(_)
                | StateKind::MedicationOrder(_)
                | StateKind::MedicationEnd(_)
                | StateKind::Death
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Transition {
    Direct(String),
    Distributed(Vec<(f64, String)>),
    /// First matching guard wins; `None` is an unconditional fallback.
    Conditional(Vec<(Option<Gender>, String)>),
}

impl Transition {
    pub fn targets(&self) -> Vec<&str> {
        match self {
            Transition::Direct(t) => vec![t.as_str()],
            Transition::Distributed(v) => v.iter().map(|(_, t)| t.as_str()).collect(),
            Transition::Conditional(v) => v.iter().map(|(_, t)| t.as_str()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmfState {
    pub kind: StateKind,
    pub transition: Option<Transition>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModuleMetadata {
    pub generator: String,
    pub generator_version: String,
    /// SHA-256 of the source report dataset, when known.
    pub source_digest: Option<String>,
    /// The module depends only on the source data, never on a random seed.
    pub seed_independent: bool,
    pub source_timelines: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_digest: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmfModule {
    pub name: String,
    pub states: BTreeMap<String, GmfState>,
    pub metadata: ModuleMetadata,
}

#[derive(Debug, Error, PartialEq)]
pub enum EmitError {
    #[error("extraction has no diagnosis probabilities")]
    NoDiagnoses,
    #[error("{gender} transitions out of {state} sum to {sum}, not 1")]
    NotNormalized { gender: Gender, state: String, sum: f64 },
    #[error("{gender} transition {from} -> {to} has no delay model")]
    MissingDelay { gender: Gender, from: String, to: String },
    #[error("{gender} state {state} is reachable but has no outgoing transitions")]
    DeadEnd { gender: Gender, state: String },
    #[error("{gender} localization {icd10} has no age model")]
    MissingAgeModel { gender: Gender, icd10: String },
}

fn sanitize(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() { c } else { '_' }).collect()
}

#[derive(Default)]
struct Namer {
    used: BTreeMap<String, usize>,
}

impl Namer {
    /// `<Kind>_<Code>_<ordinal>`, or `<Kind>_<ordinal>` without a code.
    fn name(&mut self, kind: &str, code: &str) -> String {
        let prefix = if code.is_empty() {
            kind.to_string()
        } else {
            format!("{}_{}", kind, sanitize(code))
        };
        let n = self.used.entry(prefix.clone()).or_default();
        *n += 1;
        format!("{prefix}_{n}")
    }
}

fn state_kind_for(kind: &EventKind) -> Option<StateKind> {
    Some(match kind {
        EventKind::Diagnosis(c) => StateKind::ConditionOnset(Coding::icd10(c)),
        EventKind::Surgery(c) => StateKind::Procedure(Coding::ops(c)),
        EventKind::SystemicStart(s) => StateKind::MedicationOrder(s.clone()),
        EventKind::SystemicEnd(s) => StateKind::MedicationEnd(s.clone()),
        EventKind::RadioStart => StateKind::Procedure(Coding::radiotherapy()),
        EventKind::RadioEnd => StateKind::Simple,
        EventKind::Start | EventKind::Death | EventKind::End => return None,
    })
}

fn state_label(kind: &EventKind) -> &'static str {
    match kind {
        EventKind::Diagnosis(_) => "Diagnosis",
        EventKind::Surgery(_) => "Surgery",
        EventKind::SystemicStart(_) => "Systemic",
        EventKind::SystemicEnd(_) => "SystemicEnd",
        EventKind::RadioStart => "Radiotherapy",
        EventKind::RadioEnd => "RadiotherapyEnd",
        EventKind::Start => "Start",
        EventKind::Death => "Death",
        EventKind::End => "End",
    }
}

fn transition_from(branches: Vec<(f64, String)>) -> Transition {
    if branches.len() == 1 && branches[0].0 == 1.0 {
        Transition::Direct(branches.into_iter().next().unwrap().1)
    } else {
        Transition::Distributed(branches)
    }
}

/// Assembles extracted rules into a state machine.
pub fn emit(extraction: &ExtractionResult, module_name: &str) -> Result<GmfModule, EmitError> {
    if extraction.diagnosis_probabilities.values().all(|m| m.is_empty()) {
        return Err(EmitError::NoDiagnoses);
    }
    for (g, rows) in &extraction.transitions.by_gender {
        for (from, row) in rows {
            let sum: f64 = row.values().map(|s| s.probability).sum();
            if (sum - 1.0).abs() > PROBABILITY_TOLERANCE || row.values().any(|s| !(0.0..=1.0).contains(&s.probability)) {
                return Err(EmitError::NotNormalized {
                    gender: *g,
                    state: from.to_string(),
                    sum,
                });
            }
        }
    }

    let mut states: BTreeMap<String, GmfState> = BTreeMap::new();
    let mut namer = Namer::default();
    let mut initial_branches = Vec::new();

    for gender in Gender::ALL {
        let Some(rows) = extraction.transitions.by_gender.get(&gender) else {
            initial_branches.push((Some(gender), TERMINAL.to_string()));
            continue;
        };
        let Some(start_row) = rows.get(&ChainState::start()) else {
            initial_branches.push((Some(gender), TERMINAL.to_string()));
            continue;
        };

        // names for every clinical chain state of this gender
        let mut names: BTreeMap<&ChainState, String> = BTreeMap::new();
        for (from, row) in rows {
            for s in std::iter::once(from).chain(row.keys()) {
                if state_kind_for(&s.kind).is_some() && !names.contains_key(s) {
                    names.insert(s, namer.name(state_label(&s.kind), &s.kind.code()));
                }
            }
        }

        let split = namer.name("Localization", gender.label());
        let mut branches = Vec::new();
        for (to, stat) in start_row {
            let target = match &to.kind {
                EventKind::Diagnosis(icd10) => {
                    let fit = extraction
                        .age_models
                        .get(&gender)
                        .map(|m| *m.for_localization(icd10))
                        .ok_or_else(|| EmitError::MissingAgeModel {
                            gender,
                            icd10: icd10.clone(),
                        })?;
                    let delay = namer.name("AgeDelay", icd10);
                    states.insert(
                        delay.clone(),
                        GmfState {
                            kind: StateKind::Delay(DelaySpec::from_gaussian(&fit)),
                            transition: Some(Transition::Direct(names[to].clone())),
                        },
                    );
                    delay
                }
                EventKind::End => TERMINAL.to_string(),
                _ => names
                    .get(to)
                    .cloned()
                    .ok_or_else(|| EmitError::DeadEnd {
                        gender,
                        state: to.to_string(),
                    })?,
            };
            branches.push((stat.probability, target));
        }
        states.insert(
            split.clone(),
            GmfState {
                kind: StateKind::Simple,
                transition: Some(transition_from(branches)),
            },
        );
        initial_branches.push((Some(gender), split));

        for (state, name) in &names {
            let row = rows.get(*state).ok_or_else(|| EmitError::DeadEnd {
                gender,
                state: state.to_string(),
            })?;
            let mut branches = Vec::new();
            for (to, stat) in row {
                let target = match &to.kind {
                    EventKind::End => TERMINAL.to_string(),
                    _ => {
                        let model = extraction.delay(gender, state, to).ok_or_else(|| EmitError::MissingDelay {
                            gender,
                            from: state.to_string(),
                            to: to.to_string(),
                        })?;
                        let (delay_name, next) = if to.kind == EventKind::Death {
                            (namer.name("SurvivalDelay", ""), DEATH.to_string())
                        } else {
                            let next = names.get(to).cloned().ok_or_else(|| EmitError::DeadEnd {
                                gender,
                                state: to.to_string(),
                            })?;
                            (namer.name("Delay", &format!("{}_{}", state_label(&to.kind), to.kind.code())), next)
                        };
                        states.insert(
                            delay_name.clone(),
                            GmfState {
                                kind: StateKind::Delay(DelaySpec::from_model(model)),
                                transition: Some(Transition::Direct(next)),
                            },
                        );
                        delay_name
                    }
                };
                branches.push((stat.probability, target));
            }
            states.insert(
                name.clone(),
                GmfState {
                    kind: state_kind_for(&state.kind).unwrap(),
                    transition: Some(transition_from(branches)),
                },
            );
        }
    }

    states.insert(
        INITIAL.to_string(),
        GmfState {
            kind: StateKind::Initial,
            transition: Some(Transition::Conditional(initial_branches)),
        },
    );
    states.insert(
        DEATH.to_string(),
        GmfState {
            kind: StateKind::Death,
            transition: Some(Transition::Direct(TERMINAL.to_string())),
        },
    );
    states.insert(
        TERMINAL.to_string(),
        GmfState {
            kind: StateKind::Terminal,
            transition: None,
        },
    );
    // drop the shared Death state when no path uses it
    if !states.values().any(|s| s.transition.as_ref().is_some_and(|t| t.targets().contains(&DEATH))) {
        states.remove(DEATH);
    }

    Ok(GmfModule {
        name: module_name.to_string(),
        states,
        metadata: ModuleMetadata {
            generator: GENERATOR.to_string(),
            generator_version: env!("CARGO_PKG_VERSION").to_string(),
            source_digest: None,
            seed_independent: true,
            source_timelines: extraction.source_timelines,
            config_digest: None,
            seed: None,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub state: String,
    pub rule: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.state, self.rule)
    }
}

impl GmfModule {
    /// Number of states per state type.
    pub fn census(&self) -> BTreeMap<&'static str, usize> {
        let mut c = BTreeMap::new();
        for s in self.states.values() {
            *c.entry(s.kind.type_name()).or_default() += 1;
        }
        c
    }

    pub fn initial_state(&self) -> Option<&str> {
        self.states.iter().find(|(_, s)| s.kind == StateKind::Initial).map(|(n, _)| n.as_str())
    }

    /// Lists every violated structural invariant; empty when the module is valid.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let mut v = |state: &str, rule: String| {
            out.push(Violation {
                state: state.to_string(),
                rule,
            })
        };
        let initials: Vec<&String> =
            self.states.iter().filter(|(_, s)| s.kind == StateKind::Initial).map(|(n, _)| n).collect();
        if initials.len() != 1 {
            v("<module>", format!("expected exactly one Initial state, found {}", initials.len()));
        }
        if !self.states.values().any(|s| s.kind == StateKind::Terminal) {
            v("<module>", "no Terminal state".into());
        }
        for (name, state) in &self.states {
            match (&state.kind, &state.transition) {
                (StateKind::Terminal, Some(_)) => v(name, "Terminal state must not transition".into()),
                (StateKind::Terminal, None) => {}
                (_, None) => v(name, "missing transition".into()),
                (_, Some(t)) => {
                    for target in t.targets() {
                        if !self.states.contains_key(target) {
                            v(name, format!("transition target '{target}' does not exist"));
                        }
                    }
                    match t {
                        Transition::Distributed(branches) => {
                            let sum: f64 = branches.iter().map(|(p, _)| p).sum();
                            if branches.iter().any(|(p, _)| !(0.0..=1.0).contains(p)) {
                                v(name, "distributed probability outside [0, 1]".into());
                            }
                            if (sum - 1.0).abs() > PROBABILITY_TOLERANCE {
                                v(name, format!("distributed probabilities sum to {sum}, not 1"));
                            }
                        }
                        Transition::Conditional(branches) => {
                            let covered = |g| branches.iter().any(|(c, _)| c.is_none() || *c == Some(g));
                            if !Gender::ALL.into_iter().all(covered) {
                                v(name, "conditional transition does not cover every gender".into());
                            }
                        }
                        Transition::Direct(_) => {}
                    }
                }
            }
            if let StateKind::Delay(d) = &state.kind {
                if !d.is_valid() {
                    v(name, format!("invalid delay parameters {d:?}"));
                }
            }
        }

        // forward reachability from Initial
        if let Some(init) = initials.first() {
            let reached = self.reachable_from(init);
            for name in self.states.keys() {
                if !reached.contains(name.as_str()) {
                    v(name, "not reachable from Initial".into());
                }
            }
        }
        // backward reachability from terminal-kind states
        let mut reverse: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        for (name, s) in &self.states {
            if let Some(t) = &s.transition {
                for target in t.targets() {
                    reverse.entry(target).or_default().push(name);
                }
            }
        }
        let mut can_finish: BTreeSet<&str> = BTreeSet::new();
        let mut queue: VecDeque<&str> = self
            .states
            .iter()
            .filter(|(_, s)| s.kind == StateKind::Terminal)
            .map(|(n, _)| n.as_str())
            .collect();
        while let Some(n) = queue.pop_front() {
            if can_finish.insert(n) {
                for p in reverse.get(n).into_iter().flatten() {
                    queue.push_back(p);
                }
            }
        }
        for name in self.states.keys() {
            if !can_finish.contains(name.as_str()) {
                v(name, "cannot reach a Terminal state".into());
            }
        }
        out
    }

    fn reachable_from<'a>(&'a self, start: &'a str) -> BTreeSet<&'a str> {
        let mut seen = BTreeSet::new();
        let mut queue = VecDeque::from([start]);
        while let Some(n) = queue.pop_front() {
            if !seen.insert(n) {
                continue;
            }
            if let Some(t) = self.states.get(n).and_then(|s| s.transition.as_ref()) {
                queue.extend(t.targets());
            }
        }
        seen
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&ModuleJson::from(self)).expect("module serialize");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<GmfModule, ModuleFormatError> {
        let doc: ModuleJson = serde_json::from_str(text).map_err(|e| ModuleFormatError(e.to_string()))?;
        GmfModule::try_from(doc)
    }
}

pub fn validate(module: &GmfModule) -> Vec<Violation> {
    module.validate()
}

// ---------------------------------------------------------------------------
// JSON module format

#[derive(Debug, Error)]
#[error("invalid module file: {0}")]
pub struct ModuleFormatError(pub String);

#[derive(Debug, Serialize, Deserialize)]
struct ModuleJson {
    name: String,
    #[serde(default)]
    remarks: Vec<String>,
    gmf_version: u32,
    metadata: ModuleMetadata,
    states: BTreeMap<String, StateJson>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct StateJson {
    #[serde(rename = "type")]
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    codes: Option<Vec<Coding>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    exact: Option<ExactJson>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    range: Option<RangeJson>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    distribution: Option<DistributionJson>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    unit: Option<TimeUnit>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    direct_transition: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    distributed_transition: Option<Vec<DistributedJson>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    conditional_transition: Option<Vec<ConditionalJson>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ExactJson {
    quantity: f64,
    unit: TimeUnit,
}

#[derive(Debug, Serialize, Deserialize)]
struct RangeJson {
    low: i64,
    high: i64,
    unit: TimeUnit,
}

#[derive(Debug, Serialize, Deserialize)]
struct DistributionJson {
    kind: String,
    parameters: BTreeMap<String, f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct DistributedJson {
    distribution: f64,
    transition: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct GenderCondition {
    condition_type: String,
    gender: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct ConditionalJson {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    condition: Option<GenderCondition>,
    transition: String,
}

fn gender_code(g: Gender) -> &'static str {
    match g {
        Gender::Male => "M",
        Gender::Female => "F",
    }
}

impl From<&GmfModule> for ModuleJson {
    fn from(m: &GmfModule) -> Self {
        let states = m
            .states
            .iter()
            .map(|(name, s)| {
                let mut j = StateJson {
                    kind: s.kind.type_name().to_string(),
                    ..Default::default()
                };
                match &s.kind {
                    StateKind::ConditionOnset(c) | StateKind::Procedure(c) => j.codes = Some(vec![c.clone()]),
                    StateKind::MedicationOrder(subs) | StateKind::MedicationEnd(subs) => {
                        j.codes = Some(vec![Coding::substances(subs)])
                    }
                    StateKind::Delay(d) => match *d {
                        DelaySpec::Exact { quantity, unit } => j.exact = Some(ExactJson { quantity, unit }),
                        DelaySpec::Uniform { low, high } => {
                            j.range = Some(RangeJson {
                                low,
                                high,
                                unit: TimeUnit::Days,
                            })
                        }
                        DelaySpec::Gaussian { mean, std, unit } => {
                            j.distribution = Some(DistributionJson {
                                kind: "GAUSSIAN".into(),
                                parameters: [("mean".to_string(), mean), ("standardDeviation".to_string(), std)].into(),
                            });
                            j.unit = Some(unit);
                        }
                        DelaySpec::Exponential { mean } => {
                            j.distribution = Some(DistributionJson {
                                kind: "EXPONENTIAL".into(),
                                parameters: [("mean".to_string(), mean)].into(),
                            });
                            j.unit = Some(TimeUnit::Days);
                        }
                    },
                    _ => {}
                }
                match &s.transition {
                    Some(Transition::Direct(t)) => j.direct_transition = Some(t.clone()),
                    Some(Transition::Distributed(b)) => {
                        j.distributed_transition = Some(
                            b.iter()
                                .map(|(p, t)| DistributedJson {
                                    distribution: *p,
                                    transition: t.clone(),
                                })
                                .collect(),
                        )
                    }
                    Some(Transition::Conditional(b)) => {
                        j.conditional_transition = Some(
                            b.iter()
                                .map(|(g, t)| ConditionalJson {
                                    condition: g.map(|g| GenderCondition {
                                        condition_type: "Gender".into(),
                                        gender: gender_code(g).into(),
                                    }),
                                    transition: t.clone(),
                                })
                                .collect(),
                        )
                    }
                    None => {}
                }
                (name.clone(), j)
            })
            .collect();
        ModuleJson {
            name: m.name.clone(),
            remarks: vec![
                "Generated from aggregated registry statistics.".into(),
                "Delay encodings: exact/range (days) and GAUSSIAN/EXPONENTIAL distributions; see docs/module-format.md."
                    .into(),
            ],
            gmf_version: 2,
            metadata: m.metadata.clone(),
            states,
        }
    }
}

impl TryFrom<ModuleJson> for GmfModule {
    type Error = ModuleFormatError;

    fn try_from(doc: ModuleJson) -> Result<Self, Self::Error> {
        let mut states = BTreeMap::new();
        for (name, j) in doc.states {
            let err = |m: &str| ModuleFormatError(format!("state '{name}': {m}"));
            let coding = || -> Result<Coding, ModuleFormatError> {
                j.codes
                    .as_ref()
                    .and_then(|c| c.first())
                    .cloned()
                    .ok_or_else(|| err("missing codes"))
            };
            let subs = || -> Result<Substances, ModuleFormatError> {
                Ok(coding()?.code.split('+').map(str::to_string).collect())
            };
            let kind = match j.kind.as_str() {
                "Initial" => StateKind::Initial,
                "Simple" => StateKind::Simple,
                "ConditionOnset" => StateKind::ConditionOnset(coding()?),
                "Procedure" => StateKind::Procedure(coding()?),
                "MedicationOrder" => StateKind::MedicationOrder(subs()?),
                "MedicationEnd" => StateKind::MedicationEnd(subs()?),
                "Death" => StateKind::Death,
                "Terminal" => StateKind::Terminal,
                "Delay" => {
                    let spec = if let Some(e) = &j.exact {
                        DelaySpec::Exact {
                            quantity: e.quantity,
                            unit: e.unit,
                        }
                    } else if let Some(r) = &j.range {
                        if r.unit != TimeUnit::Days {
                            return Err(err("range delays must be in days"));
                        }
                        DelaySpec::Uniform { low: r.low, high: r.high }
                    } else if let Some(d) = &j.distribution {
                        let p = |k: &str| d.parameters.get(k).copied().ok_or_else(|| err(&format!("missing parameter {k}")));
                        match d.kind.as_str() {
                            "GAUSSIAN" => DelaySpec::Gaussian {
                                mean: p("mean")?,
                                std: p("standardDeviation")?,
                                unit: j.unit.ok_or_else(|| err("missing unit"))?,
                            },
                            "EXPONENTIAL" => {
                                if j.unit != Some(TimeUnit::Days) {
                                    return Err(err("exponential delays must be in days"));
                                }
                                DelaySpec::Exponential { mean: p("mean")? }
                            }
                            other => return Err(err(&format!("unsupported distribution {other}"))),
                        }
                    } else {
                        return Err(err("delay without exact, range or distribution"));
                    };
                    StateKind::Delay(spec)
                }
                other => return Err(err(&format!("unsupported state type {other}"))),
            };
            let transition = if let Some(t) = j.direct_transition {
                Some(Transition::Direct(t))
            } else if let Some(b) = j.distributed_transition {
                Some(Transition::Distributed(b.into_iter().map(|d| (d.distribution, d.transition)).collect()))
            } else if let Some(b) = j.conditional_transition {
                let mut branches = Vec::new();
                for c in b {
                    let guard = match c.condition {
                        None => None,
                        Some(g) if g.condition_type == "Gender" => Some(match g.gender.as_str() {
                            "M" => Gender::Male,
                            "F" => Gender::Female,
                            other => return Err(err(&format!("unknown gender '{other}'"))),
                        }),
                        Some(g) => return Err(err(&format!("unsupported condition {}", g.condition_type))),
                    };
                    branches.push((guard, c.transition));
                }
                Some(Transition::Conditional(branches))
            } else {
                None
            };
            states.insert(name, GmfState { kind, transition });
        }
        Ok(GmfModule {
            name: doc.name,
            states,
            metadata: doc.metadata,
        })
    }
}
