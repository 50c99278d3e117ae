//! Per-case chronological event timelines.
//!
//! Each timeline starts with a `Start` event at the date of birth and ends
//! with an `End` event at the date of death or of the last report. Only the
//! first therapy of each type (surgery, systemic, radiotherapy) is kept.

use std::fmt;
use std::io::Write;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::TherapyType;
use crate::obds::{substances_label, Dataset, Gender, ObdsReport, ReportPayload, Substances};

/// Declaration order is the same-day tie-break order.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "code")]
pub enum EventKind {
    Start,
    Diagnosis(String),
    Surgery(String),
    SystemicStart(Substances),
    RadioStart,
    SystemicEnd(Substances),
    RadioEnd,
    Death,
    End,
}

impl EventKind {
    pub fn name(&self) -> &'static str {
        match self {
            EventKind::Start => "Start",
            EventKind::Diagnosis(_) => "Diagnosis",
            EventKind::Surgery(_) => "Surgery",
            EventKind::SystemicStart(_) => "SystemicStart",
            EventKind::RadioStart => "RadioStart",
            EventKind::SystemicEnd(_) => "SystemicEnd",
            EventKind::RadioEnd => "RadioEnd",
            EventKind::Death => "Death",
            EventKind::End => "End",
        }
    }

    pub fn code(&self) -> String {
        match self {
            EventKind::Diagnosis(c) | EventKind::Surgery(c) => c.clone(),
            EventKind::SystemicStart(s) | EventKind::SystemicEnd(s) => substances_label(s),
            _ => String::new(),
        }
    }

    pub fn therapy_type(&self) -> Option<TherapyType> {
        match self {
            EventKind::Surgery(_) => Some(TherapyType::Surgery),
            EventKind::SystemicStart(_) | EventKind::SystemicEnd(_) => Some(TherapyType::Systemic),
            EventKind::RadioStart | EventKind::RadioEnd => Some(TherapyType::Radio),
            _ => None,
        }
    }

    pub fn is_therapy_start(&self) -> bool {
        matches!(self, EventKind::Surgery(_) | EventKind::SystemicStart(_) | EventKind::RadioStart)
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let code = self.code();
        if code.is_empty() {
            f.write_str(self.name())
        } else {
            write!(f, "{}({})", self.name(), code)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimelineEvent {
    pub kind: EventKind,
    pub date: NaiveDate,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseTimeline {
    pub patient_id: String,
    pub gender: Gender,
    pub events: Vec<TimelineEvent>,
    pub age_at_diagnosis_days: i64,
}

impl CaseTimeline {
    pub fn diagnosis(&self) -> Option<(&str, NaiveDate)> {
        self.events.iter().find_map(|e| match &e.kind {
            EventKind::Diagnosis(c) => Some((c.as_str(), e.date)),
            _ => None,
        })
    }

    pub fn age_at_diagnosis_years(&self) -> f64 {
        self.age_at_diagnosis_days as f64 / 365.25
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum TimelineError {
    #[error("patient '{patient_id}': report dated {date} precedes birth on {birth}")]
    BeforeBirth {
        patient_id: String,
        date: NaiveDate,
        birth: NaiveDate,
    },
    #[error("patient '{patient_id}': {kind} on {date} precedes the diagnosis on {diagnosis}")]
    BeforeDiagnosis {
        patient_id: String,
        kind: String,
        date: NaiveDate,
        diagnosis: NaiveDate,
    },
    #[error("patient '{patient_id}': report dated {date} follows death on {death}")]
    AfterDeath {
        patient_id: String,
        date: NaiveDate,
        death: NaiveDate,
    },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TimelineSet {
    pub timelines: Vec<CaseTimeline>,
    /// Patients without a diagnosis report; no timeline is built for them.
    pub skipped: Vec<String>,
}

fn first_by<'a>(
    reports: &[&'a ObdsReport],
    pred: impl Fn(&ReportPayload) -> bool,
) -> Option<&'a ObdsReport> {
    // stable: earliest date, then same-day rank and code, then file order
    reports
        .iter()
        .filter(|r| pred(&r.payload))
        .min_by(|a, b| {
            (a.report_date, a.payload.code()).cmp(&(b.report_date, b.payload.code()))
        })
        .copied()
}

fn first_end_after<'a>(
    reports: &[&'a ObdsReport],
    start: NaiveDate,
    pred: impl Fn(&ReportPayload) -> bool,
) -> Option<&'a ObdsReport> {
    reports
        .iter()
        .filter(|r| pred(&r.payload) && r.report_date >= start)
        .min_by_key(|r| r.report_date)
        .copied()
}

/// Builds one timeline per diagnosed patient, in patient order.
pub fn build_timelines(dataset: &Dataset) -> Result<TimelineSet, TimelineError> {
    let by_patient = dataset.reports_by_patient();
    let mut out = TimelineSet::default();
    for patient in &dataset.patients {
        let id = patient.patient_id.as_str();
        let reports: &[&ObdsReport] = by_patient.get(id).map(Vec::as_slice).unwrap_or(&[]);
        let birth = patient.date_of_birth;
        if let Some(r) = reports.iter().find(|r| r.report_date < birth) {
            return Err(TimelineError::BeforeBirth {
                patient_id: id.to_string(),
                date: r.report_date,
                birth,
            });
        }
        let Some(diag) = first_by(reports, |p| matches!(p, ReportPayload::Diagnosis { .. })) else {
            out.skipped.push(id.to_string());
            continue;
        };
        let death = first_by(reports, |p| matches!(p, ReportPayload::Death)).map(|r| r.report_date);
        if let Some(death) = death {
            if let Some(r) = reports.iter().find(|r| r.report_date > death) {
                return Err(TimelineError::AfterDeath {
                    patient_id: id.to_string(),
                    date: r.report_date,
                    death,
                });
            }
        }

        let mut events = vec![TimelineEvent {
            kind: EventKind::Start,
            date: birth,
        }];
        let icd10 = match &diag.payload {
            ReportPayload::Diagnosis { icd10 } => icd10.clone(),
            _ => unreachable!(),
        };
        events.push(TimelineEvent {
            kind: EventKind::Diagnosis(icd10),
            date: diag.report_date,
        });
        if let Some(r) = first_by(reports, |p| matches!(p, ReportPayload::Surgery { .. })) {
            if let ReportPayload::Surgery { ops } = &r.payload {
                events.push(TimelineEvent {
                    kind: EventKind::Surgery(ops.clone()),
                    date: r.report_date,
                });
            }
        }
        if let Some(r) = first_by(reports, |p| matches!(p, ReportPayload::SystemicTherapyStart { .. })) {
            if let ReportPayload::SystemicTherapyStart { substances } = &r.payload {
                events.push(TimelineEvent {
                    kind: EventKind::SystemicStart(substances.clone()),
                    date: r.report_date,
                });
                if let Some(end) =
                    first_end_after(reports, r.report_date, |p| matches!(p, ReportPayload::SystemicTherapyEnd))
                {
                    events.push(TimelineEvent {
                        kind: EventKind::SystemicEnd(substances.clone()),
                        date: end.report_date,
                    });
                }
            }
        }
        if let Some(r) = first_by(reports, |p| matches!(p, ReportPayload::RadiotherapyStart)) {
            events.push(TimelineEvent {
                kind: EventKind::RadioStart,
                date: r.report_date,
            });
            if let Some(end) = first_end_after(reports, r.report_date, |p| matches!(p, ReportPayload::RadiotherapyEnd)) {
                events.push(TimelineEvent {
                    kind: EventKind::RadioEnd,
                    date: end.report_date,
                });
            }
        }
        if let Some(death) = death {
            events.push(TimelineEvent {
                kind: EventKind::Death,
                date: death,
            });
        }
        if let Some(e) = events[2..].iter().find(|e| e.date < diag.report_date) {
            return Err(TimelineError::BeforeDiagnosis {
                patient_id: id.to_string(),
                kind: e.kind.to_string(),
                date: e.date,
                diagnosis: diag.report_date,
            });
        }
        events[1..].sort_by(|a, b| (a.date, &a.kind).cmp(&(b.date, &b.kind)));
        let end_date = death.unwrap_or_else(|| reports.iter().map(|r| r.report_date).max().unwrap());
        events.push(TimelineEvent {
            kind: EventKind::End,
            date: end_date,
        });
        out.timelines.push(CaseTimeline {
            patient_id: id.to_string(),
            gender: patient.gender,
            age_at_diagnosis_days: (diag.report_date - birth).num_days(),
            events,
        });
    }
    Ok(out)
}

/// Writes the event table: patient_id, event_kind, code, date, days_since_diagnosis.
pub fn write_event_table<W: Write>(writer: W, timelines: &[CaseTimeline]) -> Result<(), csv::Error> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["patient_id", "event_kind", "code", "date", "days_since_diagnosis"])?;
    for t in timelines {
        let diag = t.diagnosis().map(|(_, d)| d);
        for e in &t.events {
            let since = diag.map(|d| (e.date - d).num_days().to_string()).unwrap_or_default();
            wtr.write_record([
                t.patient_id.as_str(),
                e.kind.name(),
                &e.kind.code(),
                &e.date.format("%Y-%m-%d").to_string(),
                &since,
            ])?;
        }
    }
    wtr.flush()?;
    Ok(())
}
