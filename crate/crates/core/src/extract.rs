//! Extraction of gender-specific transition probabilities and delay
//! distributions from case timelines.
//!
//! A chain state is an event kind together with the therapy progress reached
//! so far (which therapy types have started or ended). Conditioning on the
//! progress keeps every extracted transition consistent with the
//! first-therapy-per-type simplification: a therapy type that already occurred
//! can never be re-entered, so the emitted state machine is acyclic and no
//! probabilities need renormalising.
//!
//! Delay models per transition:
//! * `Start -> Diagnosis`: Gaussian age at diagnosis in years;
//! * `* -> Death`: exponential with the sample mean of the observed gaps;
//! * everything else: uniform between the minimum and maximum observed gap.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::TherapyType;
use crate::obds::Gender;
use crate::timeline::{CaseTimeline, EventKind};

pub const DAYS_PER_YEAR: f64 = 365.25;

/// Per-localization age models need at least this many cases.
pub const MIN_LOCALIZATION_AGE_SAMPLES: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    #[default]
    Pending,
    Started,
    Done,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
pub struct TherapyProgress {
    pub surgery: Stage,
    pub systemic: Stage,
    pub radio: Stage,
}

impl TherapyProgress {
    /// Progress after observing `kind`.
    pub fn after(self, kind: &EventKind) -> TherapyProgress {
        let mut p = self;
        match kind {
            EventKind::Surgery(_) => p.surgery = Stage::Done,
            EventKind::SystemicStart(_) => p.systemic = Stage::Started,
            EventKind::SystemicEnd(_) => p.systemic = Stage::Done,
            EventKind::RadioStart => p.radio = Stage::Started,
            EventKind::RadioEnd => p.radio = Stage::Done,
            _ => {}
        }
        p
    }

    pub fn stage(&self, t: TherapyType) -> Stage {
        match t {
            TherapyType::Surgery => self.surgery,
            TherapyType::Systemic => self.systemic,
            TherapyType::Radio => self.radio,
        }
    }

    pub fn therapies_started(&self) -> usize {
        [self.surgery, self.systemic, self.radio].iter().filter(|s| **s != Stage::Pending).count()
    }
}

impl fmt::Display for TherapyProgress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = |s: Stage| match s {
            Stage::Pending => '-',
            Stage::Started => '>',
            Stage::Done => '+',
        };
        write!(f, "S{}Y{}R{}", c(self.surgery), c(self.systemic), c(self.radio))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ChainState {
    #[serde(flatten)]
    pub kind: EventKind,
    pub progress: TherapyProgress,
}

impl ChainState {
    pub fn start() -> ChainState {
        ChainState {
            kind: EventKind::Start,
            progress: TherapyProgress::default(),
        }
    }
}

impl fmt::Display for ChainState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} [{}]", self.kind, self.progress)
    }
}

/// Walks a timeline and yields its chain states.
pub fn chain_states(timeline: &CaseTimeline) -> Vec<ChainState> {
    let mut progress = TherapyProgress::default();
    timeline
        .events
        .iter()
        .map(|e| {
            progress = progress.after(&e.kind);
            ChainState {
                kind: e.kind.clone(),
                progress,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransitionStat {
    pub count: u64,
    pub probability: f64,
}

pub type Outgoing = BTreeMap<ChainState, TransitionStat>;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TransitionTable {
    pub by_gender: BTreeMap<Gender, BTreeMap<ChainState, Outgoing>>,
}

impl TransitionTable {
    /// Builds the table from raw counts; probabilities are count / row total.
    pub fn from_counts(counts: BTreeMap<Gender, BTreeMap<ChainState, BTreeMap<ChainState, u64>>>) -> Self {
        let by_gender = counts
            .into_iter()
            .map(|(g, rows)| {
                let rows = rows
                    .into_iter()
                    .map(|(from, row)| {
                        let total: u64 = row.values().sum();
                        let row = row
                            .into_iter()
                            .map(|(to, count)| {
                                let probability = count as f64 / total as f64;
                                (to, TransitionStat { count, probability })
                            })
                            .collect();
                        (from, row)
                    })
                    .collect();
                (g, rows)
            })
            .collect();
        TransitionTable { by_gender }
    }

    pub fn outgoing(&self, gender: Gender, from: &ChainState) -> Option<&Outgoing> {
        self.by_gender.get(&gender)?.get(from)
    }

    pub fn get(&self, gender: Gender, from: &ChainState, to: &ChainState) -> Option<TransitionStat> {
        self.outgoing(gender, from)?.get(to).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Gender, &ChainState, &ChainState, TransitionStat)> {
        self.by_gender.iter().flat_map(|(g, rows)| {
            rows.iter().flat_map(move |(from, row)| row.iter().map(move |(to, s)| (*g, from, to, *s)))
        })
    }

    /// Looks a transition up by event kinds alone; `None` when absent or ambiguous.
    pub fn by_kinds(&self, gender: Gender, from: &EventKind, to: &EventKind) -> Option<TransitionStat> {
        let mut hits = self.iter().filter(|(g, f, t, _)| *g == gender && &f.kind == from && &t.kind == to);
        let first = hits.next()?.3;
        hits.next().is_none().then_some(first)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimeUnit {
    Days,
    Years,
}

impl TimeUnit {
    pub fn days(self) -> f64 {
        match self {
            TimeUnit::Days => 1.0,
            TimeUnit::Years => DAYS_PER_YEAR,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianFit {
    pub mean: f64,
    pub std: f64,
    pub unit: TimeUnit,
    pub sample_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExponentialFit {
    /// Mean in days; the rate is `1 / mean`.
    pub mean: f64,
    pub sample_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UniformFit {
    pub min: i64,
    pub max: i64,
    pub sample_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum DelayModel {
    Gaussian(GaussianFit),
    Exponential(ExponentialFit),
    Uniform(UniformFit),
}

impl DelayModel {
    pub fn sample_count(&self) -> usize {
        match self {
            DelayModel::Gaussian(g) => g.sample_count,
            DelayModel::Exponential(e) => e.sample_count,
            DelayModel::Uniform(u) => u.sample_count,
        }
    }

    pub fn is_valid(&self) -> bool {
        match self {
            DelayModel::Gaussian(g) => g.mean.is_finite() && g.std.is_finite() && g.std >= 0.0,
            DelayModel::Exponential(e) => e.mean.is_finite() && e.mean > 0.0,
            DelayModel::Uniform(u) => u.min >= 0 && u.min <= u.max,
        }
    }
}

impl fmt::Display for DelayModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DelayModel::Gaussian(g) => write!(f, "gaussian(mean {:.3}, std {:.3} {:?})", g.mean, g.std, g.unit),
            DelayModel::Exponential(e) => write!(f, "exponential(mean {:.3} days)", e.mean),
            DelayModel::Uniform(u) => write!(f, "uniform[{}, {}] days", u.min, u.max),
        }
    }
}

/// Sample mean and sample standard deviation (n - 1); std is 0 for a single sample.
pub fn gaussian_fit(samples: &[f64], unit: TimeUnit) -> GaussianFit {
    let n = samples.len();
    let mean = samples.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    GaussianFit {
        mean,
        std,
        unit,
        sample_count: n,
    }
}

/// Exponential fit by sample mean; an all-zero sample degenerates to an exact zero delay.
pub fn exponential_fit(gaps: &[i64]) -> DelayModel {
    let n = gaps.len();
    let mean = gaps.iter().sum::<i64>() as f64 / n as f64;
    if mean > 0.0 {
        DelayModel::Exponential(ExponentialFit { mean, sample_count: n })
    } else {
        DelayModel::Uniform(UniformFit {
            min: 0,
            max: 0,
            sample_count: n,
        })
    }
}

pub fn uniform_fit(gaps: &[i64]) -> UniformFit {
    UniformFit {
        min: *gaps.iter().min().unwrap(),
        max: *gaps.iter().max().unwrap(),
        sample_count: gaps.len(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgeModels {
    pub overall: GaussianFit,
    pub by_localization: BTreeMap<String, GaussianFit>,
}

impl AgeModels {
    pub fn for_localization(&self, icd10: &str) -> &GaussianFit {
        self.by_localization.get(icd10).unwrap_or(&self.overall)
    }
}

pub type EdgeKey = (ChainState, ChainState);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "RulesDocument", try_from = "RulesDocument")]
pub struct ExtractionResult {
    pub diagnosis_probabilities: BTreeMap<Gender, BTreeMap<String, f64>>,
    pub age_models: BTreeMap<Gender, AgeModels>,
    pub transitions: TransitionTable,
    pub delays: BTreeMap<Gender, BTreeMap<EdgeKey, DelayModel>>,
    pub survival_models: BTreeMap<Gender, BTreeMap<ChainState, DelayModel>>,
    pub source_timelines: usize,
}

#[derive(Debug, Error, PartialEq)]
pub enum ExtractError {
    #[error("no timelines to extract rules from")]
    NoTimelines,
    #[error("timeline of patient '{0}' does not start with Start and end with End")]
    MalformedTimeline(String),
    #[error("invalid rules document: {0}")]
    Document(String),
}

/// Derives transition counts, probabilities and delay fits from timelines.
pub fn extract(timelines: &[CaseTimeline]) -> Result<ExtractionResult, ExtractError> {
    if timelines.is_empty() {
        return Err(ExtractError::NoTimelines);
    }
    let mut counts: BTreeMap<Gender, BTreeMap<ChainState, BTreeMap<ChainState, u64>>> = BTreeMap::new();
    let mut gaps: BTreeMap<Gender, BTreeMap<EdgeKey, Vec<i64>>> = BTreeMap::new();
    let mut ages: BTreeMap<Gender, BTreeMap<String, Vec<f64>>> = BTreeMap::new();

    for t in timelines {
        let ok = t.events.first().is_some_and(|e| e.kind == EventKind::Start)
            && t.events.last().is_some_and(|e| e.kind == EventKind::End);
        if !ok {
            return Err(ExtractError::MalformedTimeline(t.patient_id.clone()));
        }
        let states = chain_states(t);
        for (i, pair) in states.windows(2).enumerate() {
            let (from, to) = (&pair[0], &pair[1]);
            *counts
                .entry(t.gender)
                .or_default()
                .entry(from.clone())
                .or_default()
                .entry(to.clone())
                .or_default() += 1;
            let gap = (t.events[i + 1].date - t.events[i].date).num_days();
            gaps.entry(t.gender).or_default().entry((from.clone(), to.clone())).or_default().push(gap);
        }
        if let Some((icd10, _)) = t.diagnosis() {
            ages.entry(t.gender).or_default().entry(icd10.to_string()).or_default().push(t.age_at_diagnosis_years());
        }
    }

    let diagnosis_probabilities = ages
        .iter()
        .map(|(g, by_loc)| {
            let total: usize = by_loc.values().map(Vec::len).sum();
            let probs = by_loc.iter().map(|(loc, v)| (loc.clone(), v.len() as f64 / total as f64)).collect();
            (*g, probs)
        })
        .collect();

    let age_models = ages
        .iter()
        .map(|(g, by_loc)| {
            let all: Vec<f64> = by_loc.values().flatten().copied().collect();
            let by_localization = by_loc
                .iter()
                .filter(|(_, v)| v.len() >= MIN_LOCALIZATION_AGE_SAMPLES)
                .map(|(loc, v)| (loc.clone(), gaussian_fit(v, TimeUnit::Years)))
                .collect();
            (
                *g,
                AgeModels {
                    overall: gaussian_fit(&all, TimeUnit::Years),
                    by_localization,
                },
            )
        })
        .collect();

    let mut delays: BTreeMap<Gender, BTreeMap<EdgeKey, DelayModel>> = BTreeMap::new();
    let mut survival_models: BTreeMap<Gender, BTreeMap<ChainState, DelayModel>> = BTreeMap::new();
    for (g, edges) in &gaps {
        for ((from, to), v) in edges {
            let model = match (&from.kind, &to.kind) {
                (EventKind::Start, EventKind::Diagnosis(_)) => {
                    let years: Vec<f64> = v.iter().map(|d| *d as f64 / DAYS_PER_YEAR).collect();
                    DelayModel::Gaussian(gaussian_fit(&years, TimeUnit::Years))
                }
                (_, EventKind::Death) => {
                    let m = exponential_fit(v);
                    survival_models.entry(*g).or_default().insert(from.clone(), m);
                    m
                }
                _ => DelayModel::Uniform(uniform_fit(v)),
            };
            delays.entry(*g).or_default().insert((from.clone(), to.clone()), model);
        }
    }

    Ok(ExtractionResult {
        diagnosis_probabilities,
        age_models,
        transitions: TransitionTable::from_counts(counts),
        delays,
        survival_models,
        source_timelines: timelines.len(),
    })
}

impl ExtractionResult {
    pub fn delay(&self, gender: Gender, from: &ChainState, to: &ChainState) -> Option<&DelayModel> {
        self.delays.get(&gender)?.get(&(from.clone(), to.clone()))
    }

    /// Human-auditable tables of localizations, age fits, transitions and delays.
    pub fn render_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "Rules extracted from {} case timelines", self.source_timelines);
        for (g, probs) in &self.diagnosis_probabilities {
            let _ = writeln!(s, "\n== {} ==\n\nLocalization probabilities", g.label());
            for (loc, p) in probs {
                let _ = writeln!(s, "  {loc:<8} {p:.4}");
            }
            if let Some(age) = self.age_models.get(g) {
                let _ = writeln!(
                    s,
                    "Age at diagnosis: mean {:.2} y, std {:.2} y (n = {})",
                    age.overall.mean, age.overall.std, age.overall.sample_count
                );
                for (loc, fit) in &age.by_localization {
                    let _ = writeln!(s, "  {loc:<8} mean {:.2} y, std {:.2} y (n = {})", fit.mean, fit.std, fit.sample_count);
                }
            }
            let _ = writeln!(s, "Transitions");
            if let Some(rows) = self.transitions.by_gender.get(g) {
                for (from, row) in rows {
                    let _ = writeln!(s, "  {from}");
                    for (to, stat) in row {
                        let delay = self.delay(*g, from, to).map(|d| d.to_string()).unwrap_or_default();
                        let _ = writeln!(
                            s,
                            "    -> {:<48} n = {:>5}  p = {:.4}  delay {}",
                            to.to_string(),
                            stat.count,
                            stat.probability,
                            delay
                        );
                    }
                }
            }
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("rules serialize")
    }

    pub fn from_json(text: &str) -> Result<ExtractionResult, ExtractError> {
        serde_json::from_str(text).map_err(|e| ExtractError::Document(e.to_string()))
    }
}

// ---------------------------------------------------------------------------
// Serialized form: flat row lists, since map keys are structured.

#[derive(Debug, Serialize, Deserialize)]
struct ProbabilityRow {
    gender: Gender,
    icd10: String,
    probability: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct AgeRow {
    gender: Gender,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    icd10: Option<String>,
    #[serde(flatten)]
    fit: GaussianFit,
}

#[derive(Debug, Serialize, Deserialize)]
struct TransitionRow {
    gender: Gender,
    from: ChainState,
    to: ChainState,
    count: u64,
    probability: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct DelayRow {
    gender: Gender,
    from: ChainState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    to: Option<ChainState>,
    model: DelayModel,
}

#[derive(Debug, Serialize, Deserialize)]
struct RulesDocument {
    format: String,
    version: u32,
    source_timelines: usize,
    diagnosis_probabilities: Vec<ProbabilityRow>,
    age_models: Vec<AgeRow>,
    transitions: Vec<TransitionRow>,
    delays: Vec<DelayRow>,
    survival_models: Vec<DelayRow>,
}

const RULES_FORMAT: &str = "oncosynth-rules";

impl From<ExtractionResult> for RulesDocument {
    fn from(r: ExtractionResult) -> Self {
        let mut age_models = Vec::new();
        for (g, m) in &r.age_models {
            age_models.push(AgeRow {
                gender: *g,
                icd10: None,
                fit: m.overall,
            });
            for (loc, fit) in &m.by_localization {
                age_models.push(AgeRow {
                    gender: *g,
                    icd10: Some(loc.clone()),
                    fit: *fit,
                });
            }
        }
        RulesDocument {
            format: RULES_FORMAT.into(),
            version: 1,
            source_timelines: r.source_timelines,
            diagnosis_probabilities: r
                .diagnosis_probabilities
                .iter()
                .flat_map(|(g, m)| {
                    m.iter().map(move |(icd10, p)| ProbabilityRow {
                        gender: *g,
                        icd10: icd10.clone(),
                        probability: *p,
                    })
                })
                .collect(),
            age_models,
            transitions: r
                .transitions
                .iter()
                .map(|(gender, from, to, s)| TransitionRow {
                    gender,
                    from: from.clone(),
                    to: to.clone(),
                    count: s.count,
                    probability: s.probability,
                })
                .collect(),
            delays: r
                .delays
                .iter()
                .flat_map(|(g, m)| {
                    m.iter().map(move |((from, to), model)| DelayRow {
                        gender: *g,
                        from: from.clone(),
                        to: Some(to.clone()),
                        model: *model,
                    })
                })
                .collect(),
            survival_models: r
                .survival_models
                .iter()
                .flat_map(|(g, m)| {
                    m.iter().map(move |(from, model)| DelayRow {
                        gender: *g,
                        from: from.clone(),
                        to: None,
                        model: *model,
                    })
                })
                .collect(),
        }
    }
}

impl TryFrom<RulesDocument> for ExtractionResult {
    type Error = String;

    fn try_from(doc: RulesDocument) -> Result<Self, Self::Error> {
        if doc.format != RULES_FORMAT {
            return Err(format!("unexpected format '{}'", doc.format));
        }
        let mut diagnosis_probabilities: BTreeMap<Gender, BTreeMap<String, f64>> = BTreeMap::new();
        for row in doc.diagnosis_probabilities {
            diagnosis_probabilities.entry(row.gender).or_default().insert(row.icd10, row.probability);
        }
        let mut overall = BTreeMap::new();
        let mut by_loc: BTreeMap<Gender, BTreeMap<String, GaussianFit>> = BTreeMap::new();
        for row in doc.age_models {
            match row.icd10 {
                None => {
                    overall.insert(row.gender, row.fit);
                }
                Some(loc) => {
                    by_loc.entry(row.gender).or_default().insert(loc, row.fit);
                }
            }
        }
        let mut age_models = BTreeMap::new();
        for (g, fit) in overall {
            age_models.insert(
                g,
                AgeModels {
                    overall: fit,
                    by_localization: by_loc.remove(&g).unwrap_or_default(),
                },
            );
        }
        if let Some(g) = by_loc.keys().next() {
            return Err(format!("per-localization age models for {g} without an overall model"));
        }
        let mut transitions = TransitionTable::default();
        for row in doc.transitions {
            transitions.by_gender.entry(row.gender).or_default().entry(row.from).or_default().insert(
                row.to,
                TransitionStat {
                    count: row.count,
                    probability: row.probability,
                },
            );
        }
        let mut delays: BTreeMap<Gender, BTreeMap<EdgeKey, DelayModel>> = BTreeMap::new();
        for row in doc.delays {
            let to = row.to.ok_or("delay row without target state")?;
            delays.entry(row.gender).or_default().insert((row.from, to), row.model);
        }
        let mut survival_models: BTreeMap<Gender, BTreeMap<ChainState, DelayModel>> = BTreeMap::new();
        for row in doc.survival_models {
            survival_models.entry(row.gender).or_default().insert(row.from, row.model);
        }
        Ok(ExtractionResult {
            diagnosis_probabilities,
            age_models,
            transitions,
            delays,
            survival_models,
            source_timelines: doc.source_timelines,
        })
    }
}
