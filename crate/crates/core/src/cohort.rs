//! Conversion of tabular registry records into report datasets, plus a
//! parametric ground-truth cohort generator used for round-trip testing.
//!
//! Registry records only carry a 5-year age group and a diagnosis year. The
//! mapper draws a fictitious exact diagnosis date within the year and a
//! fictitious birth date that puts the age at diagnosis inside the age group;
//! every other event is dated by its day offset from the diagnosis.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use chrono::{Datelike, Days, Months, NaiveDate};
use rand::Rng;
use rand_distr::{Distribution, Exp, LogNormal, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::obds::{self, Dataset, Gender, ObdsReport, PatientMaster, ReportPayload, Substances};
use crate::rng::{self, Domain};

#[derive(Debug, Error)]
pub enum CohortError {
    #[error("record '{record_id}': {reason}")]
    InvalidRecord { record_id: String, reason: String },
    #[error("invalid ground-truth specification: {0}")]
    InvalidSpec(String),
    #[error("registry table line {line}: {message}")]
    Table { line: u64, message: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Half-open age interval `[lo, hi)` in completed years.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgeGroup {
    pub lo: u32,
    pub hi: u32,
}

impl AgeGroup {
    pub fn containing(age_years: f64, width: u32) -> AgeGroup {
        let lo = (age_years.max(0.0) / width as f64).floor() as u32 * width;
        AgeGroup { lo, hi: lo + width }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SurgeryEntry {
    pub ops: String,
    pub offset: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SystemicEntry {
    pub substances: Substances,
    pub start: u32,
    pub end: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RadioEntry {
    pub start: u32,
    pub end: u32,
}

/// One case of the relational registry export. Offsets are days since diagnosis.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegistryRecord {
    pub record_id: String,
    pub gender: Gender,
    pub age_group: AgeGroup,
    pub diagnosis_year: i32,
    pub icd10: String,
    pub surgeries: Vec<SurgeryEntry>,
    pub systemic_therapies: Vec<SystemicEntry>,
    pub radiotherapies: Vec<RadioEntry>,
    pub death_offset: Option<u32>,
}

impl RegistryRecord {
    pub fn validate(&self) -> Result<(), CohortError> {
        let bad = |reason: String| CohortError::InvalidRecord {
            record_id: self.record_id.clone(),
            reason,
        };
        if self.record_id.is_empty() {
            return Err(bad("empty record id".into()));
        }
        if self.age_group.lo >= self.age_group.hi {
            return Err(bad(format!("empty age group [{}, {})", self.age_group.lo, self.age_group.hi)));
        }
        if !obds::is_valid_icd10(&self.icd10) {
            return Err(bad(format!("invalid localization '{}'", self.icd10)));
        }
        if NaiveDate::from_ymd_opt(self.diagnosis_year, 1, 1).is_none() {
            return Err(bad(format!("invalid diagnosis year {}", self.diagnosis_year)));
        }
        if self.surgeries.iter().any(|s| s.ops.trim().is_empty()) {
            return Err(bad("surgery without OPS code".into()));
        }
        if self.systemic_therapies.iter().any(|s| s.substances.is_empty()) {
            return Err(bad("systemic therapy without substances".into()));
        }
        for (start, end) in self
            .systemic_therapies
            .iter()
            .map(|s| (s.start, s.end))
            .chain(self.radiotherapies.iter().map(|r| (r.start, r.end)))
        {
            if end < start {
                return Err(bad(format!("therapy ends (day {end}) before it starts (day {start})")));
            }
        }
        if let Some(death) = self.death_offset {
            if let Some(latest) = self.max_event_offset() {
                if latest > death {
                    return Err(bad(format!("event at day {latest} after death at day {death}")));
                }
            }
        }
        Ok(())
    }

    fn max_event_offset(&self) -> Option<u32> {
        self.surgeries
            .iter()
            .map(|s| s.offset)
            .chain(self.systemic_therapies.iter().map(|s| s.end))
            .chain(self.radiotherapies.iter().map(|r| r.end))
            .max()
    }

    pub fn expected_report_count(&self) -> usize {
        1 + self.surgeries.len()
            + 2 * self.systemic_therapies.len()
            + 2 * self.radiotherapies.len()
            + usize::from(self.death_offset.is_some())
    }
}

/// Age in completed years on `on` for someone born on `birth`.
pub fn age_in_years(birth: NaiveDate, on: NaiveDate) -> i32 {
    let mut age = on.year() - birth.year();
    if (on.month(), on.day()) < (birth.month(), birth.day()) {
        age -= 1;
    }
    age
}

fn years_before(date: NaiveDate, years: u32) -> NaiveDate {
    date.checked_sub_months(Months::new(years * 12)).unwrap_or(NaiveDate::MIN)
}

/// Inclusive range of birth dates whose age on `diagnosis` lies in `group`.
pub fn birth_date_range(diagnosis: NaiveDate, group: AgeGroup) -> (NaiveDate, NaiveDate) {
    let within = |b: NaiveDate| {
        let a = age_in_years(b, diagnosis);
        a >= group.lo as i32 && a < group.hi as i32
    };
    let mut latest = years_before(diagnosis, group.lo);
    while !within(latest) {
        latest = latest.pred_opt().unwrap();
    }
    while let Some(next) = latest.succ_opt().filter(|n| within(*n)) {
        latest = next;
    }
    let mut earliest = years_before(diagnosis, group.hi).succ_opt().unwrap();
    while !within(earliest) {
        earliest = earliest.succ_opt().unwrap();
    }
    while let Some(prev) = earliest.pred_opt().filter(|p| within(*p)) {
        earliest = prev;
    }
    (earliest, latest)
}

fn uniform_date<R: Rng>(rng: &mut R, first: NaiveDate, last: NaiveDate) -> NaiveDate {
    let span = (last - first).num_days();
    first + Days::new(rng.random_range(0..=span) as u64)
}

/// Deterministic report order for one patient: date, then payload kind, then code.
pub fn sort_reports(reports: &mut [ObdsReport]) {
    reports.sort_by(|a, b| {
        (a.report_date, a.payload.same_day_rank(), a.payload.code()).cmp(&(
            b.report_date,
            b.payload.same_day_rank(),
            b.payload.code(),
        ))
    });
}

fn map_record(record: &RegistryRecord, seed: u64, index: u64) -> (PatientMaster, Vec<ObdsReport>) {
    let mut rng = rng::stream(seed, Domain::Mapping, index);
    let year_start = NaiveDate::from_ymd_opt(record.diagnosis_year, 1, 1).unwrap();
    let year_end = NaiveDate::from_ymd_opt(record.diagnosis_year, 12, 31).unwrap();
    let diagnosis = uniform_date(&mut rng, year_start, year_end);
    let (earliest, latest) = birth_date_range(diagnosis, record.age_group);
    let birth = uniform_date(&mut rng, earliest, latest);

    let at = |offset: u32| diagnosis + Days::new(offset as u64);
    let id = &record.record_id;
    let report = |date: NaiveDate, payload: ReportPayload| ObdsReport {
        patient_id: id.clone(),
        report_date: date,
        payload,
    };
    let mut reports = vec![report(diagnosis, ReportPayload::Diagnosis { icd10: record.icd10.clone() })];
    for s in &record.surgeries {
        reports.push(report(at(s.offset), ReportPayload::Surgery { ops: s.ops.clone() }));
    }
    for s in &record.systemic_therapies {
        reports.push(report(
            at(s.start),
            ReportPayload::SystemicTherapyStart {
                substances: s.substances.clone(),
            },
        ));
        reports.push(report(at(s.end), ReportPayload::SystemicTherapyEnd));
    }
    for r in &record.radiotherapies {
        reports.push(report(at(r.start), ReportPayload::RadiotherapyStart));
        reports.push(report(at(r.end), ReportPayload::RadiotherapyEnd));
    }
    if let Some(death) = record.death_offset {
        reports.push(report(at(death), ReportPayload::Death));
    }
    sort_reports(&mut reports);
    let patient = PatientMaster {
        patient_id: id.clone(),
        gender: record.gender,
        date_of_birth: birth,
    };
    (patient, reports)
}

/// Maps registry records to a report dataset with fictitious exact dates.
///
/// Record `i` draws from its own random stream, so the output for a record
/// depends only on `(record, seed, i)`.
pub fn map_to_obds(records: &[RegistryRecord], seed: u64) -> Result<Dataset, CohortError> {
    let mut seen = std::collections::HashSet::new();
    for r in records {
        r.validate()?;
        if !seen.insert(r.record_id.as_str()) {
            return Err(CohortError::InvalidRecord {
                record_id: r.record_id.clone(),
                reason: "duplicate record id".into(),
            });
        }
    }
    let mut dataset = Dataset::default();
    for (i, record) in records.iter().enumerate() {
        let (patient, reports) = map_record(record, seed, i as u64);
        dataset.patients.push(patient);
        dataset.reports.extend(reports);
    }
    Ok(dataset)
}

// ---------------------------------------------------------------------------
// Registry table (delimiter-separated)

pub const TABLE_COLUMNS: [&str; 10] = [
    "record_id",
    "gender",
    "age_lo",
    "age_hi",
    "diagnosis_year",
    "icd10",
    "surgeries",
    "systemic_therapies",
    "radiotherapies",
    "death_offset",
];

#[derive(Debug, Serialize, Deserialize)]
struct TableRow {
    record_id: String,
    gender: String,
    age_lo: u32,
    age_hi: u32,
    diagnosis_year: i32,
    icd10: String,
    surgeries: String,
    systemic_therapies: String,
    radiotherapies: String,
    death_offset: String,
}

fn parse_span(s: &str) -> Option<(u32, u32)> {
    let (a, b) = s.split_once('-')?;
    Some((a.trim().parse().ok()?, b.trim().parse().ok()?))
}

fn items(s: &str) -> impl Iterator<Item = &str> {
    s.split('|').map(str::trim).filter(|i| !i.is_empty())
}

impl TableRow {
    fn into_record(self, line: u64) -> Result<RegistryRecord, CohortError> {
        let err = |message: String| CohortError::Table { line, message };
        let gender = self.gender.parse::<Gender>().map_err(err)?;
        let mut surgeries = Vec::new();
        for item in items(&self.surgeries) {
            let (ops, offset) = item
                .rsplit_once('@')
                .ok_or_else(|| err(format!("surgery '{item}' is not CODE@DAY")))?;
            let offset = offset.trim().parse().map_err(|_| err(format!("bad surgery offset in '{item}'")))?;
            surgeries.push(SurgeryEntry {
                ops: ops.trim().to_string(),
                offset,
            });
        }
        let mut systemic_therapies = Vec::new();
        for item in items(&self.systemic_therapies) {
            let (subs, span) = item
                .rsplit_once('@')
                .ok_or_else(|| err(format!("systemic therapy '{item}' is not SUBST+SUBST@START-END")))?;
            let (start, end) = parse_span(span).ok_or_else(|| err(format!("bad day span in '{item}'")))?;
            let substances = subs.split('+').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
            systemic_therapies.push(SystemicEntry { substances, start, end });
        }
        let mut radiotherapies = Vec::new();
        for item in items(&self.radiotherapies) {
            let (start, end) = parse_span(item).ok_or_else(|| err(format!("radiotherapy '{item}' is not START-END")))?;
            radiotherapies.push(RadioEntry { start, end });
        }
        let death_offset = match self.death_offset.trim() {
            "" => None,
            d => Some(d.parse().map_err(|_| err(format!("bad death offset '{d}'")))?),
        };
        Ok(RegistryRecord {
            record_id: self.record_id,
            gender,
            age_group: AgeGroup {
                lo: self.age_lo,
                hi: self.age_hi,
            },
            diagnosis_year: self.diagnosis_year,
            icd10: self.icd10,
            surgeries,
            systemic_therapies,
            radiotherapies,
            death_offset,
        })
    }

    fn from_record(r: &RegistryRecord) -> TableRow {
        let join = |v: Vec<String>| v.join("|");
        TableRow {
            record_id: r.record_id.clone(),
            gender: r.gender.to_string(),
            age_lo: r.age_group.lo,
            age_hi: r.age_group.hi,
            diagnosis_year: r.diagnosis_year,
            icd10: r.icd10.clone(),
            surgeries: join(r.surgeries.iter().map(|s| format!("{}@{}", s.ops, s.offset)).collect()),
            systemic_therapies: join(
                r.systemic_therapies
                    .iter()
                    .map(|s| format!("{}@{}-{}", obds::substances_label(&s.substances), s.start, s.end))
                    .collect(),
            ),
            radiotherapies: join(r.radiotherapies.iter().map(|t| format!("{}-{}", t.start, t.end)).collect()),
            death_offset: r.death_offset.map(|d| d.to_string()).unwrap_or_default(),
        }
    }
}

/// Reads a comma-separated registry table with the columns in [`TABLE_COLUMNS`].
pub fn read_registry_table<R: Read>(reader: R) -> Result<Vec<RegistryRecord>, CohortError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut out = Vec::new();
    for row in rdr.deserialize::<TableRow>() {
        let row = row?;
        let line = out.len() as u64 + 2;
        out.push(row.into_record(line)?);
    }
    Ok(out)
}

pub fn write_registry_table<W: Write>(writer: W, records: &[RegistryRecord]) -> Result<(), CohortError> {
    let mut wtr = csv::Writer::from_writer(writer);
    for r in records {
        wtr.serialize(TableRow::from_record(r))?;
    }
    if records.is_empty() {
        wtr.write_record(TABLE_COLUMNS)?;
    }
    wtr.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Ground-truth cohorts

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgeShape {
    #[default]
    Gaussian,
    /// Right-skewed log-normal with the given mean and standard deviation.
    Lognormal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgeParams {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerGender<T> {
    pub male: T,
    pub female: T,
}

impl<T> PerGender<T> {
    pub fn get(&self, g: Gender) -> &T {
        match g {
            Gender::Male => &self.male,
            Gender::Female => &self.female,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TherapyType {
    Surgery,
    Systemic,
    Radio,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MenuStep {
    Diagnosis,
    Surgery,
    Systemic,
    Radio,
}

impl From<TherapyType> for MenuStep {
    fn from(t: TherapyType) -> Self {
        match t {
            TherapyType::Surgery => MenuStep::Surgery,
            TherapyType::Systemic => MenuStep::Systemic,
            TherapyType::Radio => MenuStep::Radio,
        }
    }
}

/// Probability of moving from one step to a therapy type, with the uniform
/// delay (days after the start of the `from` step) before that therapy starts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MenuTransition {
    pub from: MenuStep,
    pub to: TherapyType,
    pub probability: f64,
    pub delay_days: [u32; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurgeryOption {
    pub ops: String,
    #[serde(default = "unit_weight")]
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemicOption {
    pub substances: Vec<String>,
    #[serde(default = "unit_weight")]
    pub weight: f64,
    pub duration_days: [u32; 2],
}

fn unit_weight() -> f64 {
    1.0
}

/// Therapy sequencing for ground-truth cases. Probability mass not assigned
/// to a transition out of a step ends the therapy chain; a therapy type is
/// never repeated within one case.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TherapyMenu {
    #[serde(default)]
    pub transitions: Vec<MenuTransition>,
    #[serde(default)]
    pub surgeries: Vec<SurgeryOption>,
    #[serde(default)]
    pub systemic: Vec<SystemicOption>,
    #[serde(default)]
    pub radio_duration_days: Option<[u32; 2]>,
}

fn default_male_fraction() -> f64 {
    0.5
}

fn default_death_probability() -> f64 {
    1.0
}

fn default_years() -> [i32; 2] {
    [2010, 2019]
}

/// Parameters of a synthetic registry cohort with known statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthSpec {
    pub cohort_size: usize,
    pub seed: u64,
    #[serde(default = "default_male_fraction")]
    pub male_fraction: f64,
    #[serde(default = "default_years")]
    pub diagnosis_years: [i32; 2],
    #[serde(default)]
    pub age_shape: AgeShape,
    pub localizations: PerGender<BTreeMap<String, f64>>,
    pub age: PerGender<AgeParams>,
    pub survival_mean_days: BTreeMap<String, f64>,
    #[serde(default = "default_death_probability")]
    pub death_probability: f64,
    #[serde(default)]
    pub therapy: TherapyMenu,
}

const MAX_THERAPIES: usize = 3;

impl GroundTruthSpec {
    pub fn validate(&self) -> Result<(), CohortError> {
        let bad = |m: String| Err(CohortError::InvalidSpec(m));
        if self.cohort_size == 0 {
            return bad("cohort_size must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.male_fraction) {
            return bad(format!("male_fraction {} outside [0, 1]", self.male_fraction));
        }
        if !(0.0..=1.0).contains(&self.death_probability) {
            return bad(format!("death_probability {} outside [0, 1]", self.death_probability));
        }
        if self.diagnosis_years[0] > self.diagnosis_years[1] {
            return bad("diagnosis_years must be [first, last]".into());
        }
        for g in Gender::ALL {
            let probs = self.localizations.get(g);
            let sum: f64 = probs.values().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return bad(format!("{g} localization probabilities sum to {sum}"));
            }
            for (code, p) in probs {
                if !obds::is_valid_icd10(code) {
                    return bad(format!("invalid localization '{code}'"));
                }
                if !(*p >= 0.0) {
                    return bad(format!("negative probability for {code}"));
                }
                if *p > 0.0 && !self.survival_mean_days.get(code).is_some_and(|m| *m > 0.0) {
                    return bad(format!("missing positive survival_mean_days for {code}"));
                }
            }
            let age = self.age.get(g);
            if !(age.mean > 0.0 && age.std > 0.0) {
                return bad(format!("{g} age mean and std must be positive"));
            }
        }
        let menu = &self.therapy;
        for step in [MenuStep::Diagnosis, MenuStep::Surgery, MenuStep::Systemic, MenuStep::Radio] {
            let sum: f64 = menu.transitions.iter().filter(|t| t.from == step).map(|t| t.probability).sum();
            if sum > 1.0 + 1e-9 {
                return bad(format!("transitions out of {step:?} sum to {sum} > 1"));
            }
        }
        for t in &menu.transitions {
            if !(t.probability >= 0.0) || t.delay_days[0] > t.delay_days[1] {
                return bad(format!("invalid transition {:?} -> {:?}", t.from, t.to));
            }
            let available = match t.to {
                TherapyType::Surgery => !menu.surgeries.is_empty(),
                TherapyType::Systemic => !menu.systemic.is_empty(),
                TherapyType::Radio => menu.radio_duration_days.is_some(),
            };
            if !available && t.probability > 0.0 {
                return bad(format!("no {:?} options configured", t.to));
            }
        }
        if menu.surgeries.iter().any(|s| s.ops.trim().is_empty() || !(s.weight > 0.0)) {
            return bad("surgery options need an OPS code and a positive weight".into());
        }
        if menu
            .systemic
            .iter()
            .any(|s| s.substances.is_empty() || !(s.weight > 0.0) || s.duration_days[0] > s.duration_days[1])
        {
            return bad("systemic options need substances, a positive weight and a valid duration".into());
        }
        if menu.radio_duration_days.is_some_and(|d| d[0] > d[1]) {
            return bad("radio_duration_days must be [min, max]".into());
        }
        Ok(())
    }
}

fn pick_weighted<'a, T, R: Rng>(rng: &mut R, items: &'a [T], weight: impl Fn(&T) -> f64) -> &'a T {
    let total: f64 = items.iter().map(&weight).sum();
    let mut u = rng.random::<f64>() * total;
    for item in items {
        u -= weight(item);
        if u < 0.0 {
            return item;
        }
    }
    items.last().unwrap()
}

fn sample_record(spec: &GroundTruthSpec, index: u64) -> RegistryRecord {
    let mut rng = rng::stream(spec.seed, Domain::GroundTruth, index);
    let gender = if rng.random::<f64>() < spec.male_fraction {
        Gender::Male
    } else {
        Gender::Female
    };
    let locs: Vec<(&String, &f64)> = spec.localizations.get(gender).iter().collect();
    let icd10 = pick_weighted(&mut rng, &locs, |(_, p)| **p).0.clone();

    let params = spec.age.get(gender);
    let age = match spec.age_shape {
        AgeShape::Gaussian => Normal::new(params.mean, params.std).unwrap().sample(&mut rng),
        AgeShape::Lognormal => {
            let sigma2 = (1.0 + (params.std / params.mean).powi(2)).ln();
            let mu = params.mean.ln() - sigma2 / 2.0;
            LogNormal::new(mu, sigma2.sqrt()).unwrap().sample(&mut rng)
        }
    };
    let age_group = AgeGroup::containing(age.clamp(0.0, 119.0), 5);
    let diagnosis_year = rng.random_range(spec.diagnosis_years[0]..=spec.diagnosis_years[1]);

    let menu = &spec.therapy;
    let mut record = RegistryRecord {
        record_id: format!("GT{:06}", index + 1),
        gender,
        age_group,
        diagnosis_year,
        icd10,
        surgeries: vec![],
        systemic_therapies: vec![],
        radiotherapies: vec![],
        death_offset: None,
    };
    let mut step = MenuStep::Diagnosis;
    let mut step_start = 0u32;
    let mut last = 0u32;
    let mut done: Vec<TherapyType> = Vec::new();
    while done.len() < MAX_THERAPIES {
        let mut u = rng.random::<f64>();
        let chosen = menu.transitions.iter().filter(|t| t.from == step).find(|t| {
            u -= t.probability;
            u < 0.0
        });
        let Some(t) = chosen else { break };
        if done.contains(&t.to) {
            break;
        }
        let start = step_start + rng.random_range(t.delay_days[0]..=t.delay_days[1]);
        match t.to {
            TherapyType::Surgery => {
                let opt = pick_weighted(&mut rng, &menu.surgeries, |o| o.weight);
                record.surgeries.push(SurgeryEntry {
                    ops: opt.ops.clone(),
                    offset: start,
                });
                last = last.max(start);
            }
            TherapyType::Systemic => {
                let opt = pick_weighted(&mut rng, &menu.systemic, |o| o.weight);
                let end = start + rng.random_range(opt.duration_days[0]..=opt.duration_days[1]);
                record.systemic_therapies.push(SystemicEntry {
                    substances: opt.substances.iter().cloned().collect(),
                    start,
                    end,
                });
                last = last.max(end);
            }
            TherapyType::Radio => {
                let d = menu.radio_duration_days.unwrap();
                let end = start + rng.random_range(d[0]..=d[1]);
                record.radiotherapies.push(RadioEntry { start, end });
                last = last.max(end);
            }
        }
        done.push(t.to);
        step = t.to.into();
        step_start = start;
    }
    if rng.random::<f64>() < spec.death_probability {
        let mean = spec.survival_mean_days[&record.icd10];
        let survival = Exp::new(1.0 / mean).unwrap().sample(&mut rng).round();
        record.death_offset = Some(last + survival as u32);
    }
    record
}

/// Samples a ground-truth cohort and maps it to a report dataset.
pub fn generate_ground_truth(spec: &GroundTruthSpec) -> Result<(Vec<RegistryRecord>, Dataset), CohortError> {
    spec.validate()?;
    let records: Vec<RegistryRecord> = (0..spec.cohort_size as u64).map(|i| sample_record(spec, i)).collect();
    let dataset = map_to_obds(&records, spec.seed)?;
    Ok((records, dataset))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn date(y: i32, m: u32, d: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(y, m, d).unwrap()
    }

    fn record(id: &str) -> RegistryRecord {
        RegistryRecord {
            record_id: id.into(),
            gender: Gender::Male,
            age_group: AgeGroup { lo: 60, hi: 65 },
            diagnosis_year: 2015,
            icd10: "C71.2".into(),
            surgeries: vec![],
            systemic_therapies: vec![],
            radiotherapies: vec![],
            death_offset: None,
        }
    }

    #[test]
    fn birth_range_edges() {
        let diag = date(2016, 2, 29);
        let (lo, hi) = birth_date_range(diag, AgeGroup { lo: 61, hi: 62 });
        assert_eq!(hi, date(1955, 2, 28));
        assert_eq!(lo, date(1954, 3, 1));
        assert_eq!(age_in_years(lo, diag), 61);
        assert_eq!(age_in_years(lo.pred_opt().unwrap(), diag), 62);
        assert_eq!(age_in_years(hi.succ_opt().unwrap(), diag), 60);
    }

    #[test]
    fn death_dated_from_diagnosis() {
        let mut r = record("R1");
        r.death_offset = Some(300);
        let ds = map_to_obds(&[r], 11).unwrap();
        let diag = ds.reports[0].report_date;
        assert_eq!(diag.year(), 2015);
        let age = age_in_years(ds.patients[0].date_of_birth, diag);
        assert!((60..65).contains(&age), "age {age}");
        assert_eq!(ds.reports[1].payload, ReportPayload::Death);
        assert_eq!((ds.reports[1].report_date - diag).num_days(), 300);
    }

    #[test]
    fn bare_record_yields_single_report() {
        let ds = map_to_obds(&[record("R1")], 1).unwrap();
        assert_eq!(ds.reports.len(), 1);
    }

    #[test]
    fn same_day_therapies_get_separate_reports() {
        let mut r = record("R1");
        r.surgeries.push(SurgeryEntry {
            ops: "5-015.0".into(),
            offset: 14,
        });
        r.systemic_therapies.push(SystemicEntry {
            substances: ["Temozolomid".to_string()].into_iter().collect(),
            start: 14,
            end: 14,
        });
        let ds = map_to_obds(&[r], 3).unwrap();
        let xml = String::from_utf8(obds::write_obds(&ds).unwrap()).unwrap();
        // diagnosis + surgery + systemic start + systemic end
        assert_eq!(xml.matches("<Report ").count(), 4);
        let ranks: Vec<u8> = ds.reports.iter().map(|r| r.payload.same_day_rank()).collect();
        assert_eq!(ranks, vec![0, 1, 2, 4]);
    }

    #[test]
    fn invalid_records_named() {
        let mut r = record("BAD");
        r.age_group = AgeGroup { lo: 65, hi: 60 };
        match map_to_obds(&[r], 0) {
            Err(CohortError::InvalidRecord { record_id, .. }) => assert_eq!(record_id, "BAD"),
            other => panic!("{other:?}"),
        }
        let mut r = record("LATE");
        r.death_offset = Some(10);
        r.surgeries.push(SurgeryEntry {
            ops: "5-010".into(),
            offset: 20,
        });
        assert!(map_to_obds(&[r], 0).is_err());
    }

    #[test]
    fn table_round_trip() {
        let mut r = record("T1");
        r.surgeries.push(SurgeryEntry {
            ops: "5-015.0".into(),
            offset: 12,
        });
        r.systemic_therapies.push(SystemicEntry {
            substances: ["Lomustin".to_string(), "Temozolomid".to_string()].into_iter().collect(),
            start: 30,
            end: 90,
        });
        r.radiotherapies.push(RadioEntry { start: 31, end: 72 });
        r.death_offset = Some(400);
        let records = vec![r, record("T2")];
        let mut buf = Vec::new();
        write_registry_table(&mut buf, &records).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.contains("Lomustin+Temozolomid@30-90"));
        assert_eq!(read_registry_table(&buf[..]).unwrap(), records);
    }

    #[test]
    fn table_errors_carry_line() {
        let text = "record_id,gender,age_lo,age_hi,diagnosis_year,icd10,surgeries,systemic_therapies,radiotherapies,death_offset\n\
                    A,male,60,65,2015,C71.2,,,,\n\
                    B,male,60,65,2015,C71.2,5-015,,,\n";
        match read_registry_table(text.as_bytes()) {
            Err(CohortError::Table { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }
}
