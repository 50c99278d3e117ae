//! k-anonymity audit over quasi-identifier groups and rare-localization filtering.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::obds::{Dataset, ReportPayload};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuasiIdentifier {
    Gender,
    Icd10Localization,
    DeceasedFlag,
}

impl QuasiIdentifier {
    pub fn name(self) -> &'static str {
        match self {
            QuasiIdentifier::Gender => "gender",
            QuasiIdentifier::Icd10Localization => "icd10_localization",
            QuasiIdentifier::DeceasedFlag => "deceased_flag",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PrivacyPolicy {
    pub k: usize,
    pub quasi_identifiers: Vec<QuasiIdentifier>,
    pub excluded_localizations: BTreeSet<String>,
}

impl Default for PrivacyPolicy {
    /// k = 10 over gender x localization x deceased, with the rare
    /// localizations C71.5, C71.6, C71.7 and C72.0 removed.
    fn default() -> Self {
        PrivacyPolicy {
            k: 10,
            quasi_identifiers: vec![
                QuasiIdentifier::Gender,
                QuasiIdentifier::Icd10Localization,
                QuasiIdentifier::DeceasedFlag,
            ],
            excluded_localizations: ["C71.5", "C71.6", "C71.7", "C72.0"].iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum AuditError {
    #[error("invalid privacy policy: {0}")]
    InvalidPolicy(String),
    #[error("no diagnosed, non-excluded patients to audit")]
    NoGroups,
}

impl PrivacyPolicy {
    pub fn validate(&self) -> Result<(), AuditError> {
        if self.k < 2 {
            return Err(AuditError::InvalidPolicy(format!("k must be at least 2, got {}", self.k)));
        }
        if self.quasi_identifiers.is_empty() {
            return Err(AuditError::InvalidPolicy("no quasi-identifiers selected".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupCount {
    pub key: Vec<String>,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditResult {
    pub k: usize,
    pub quasi_identifiers: Vec<QuasiIdentifier>,
    pub group_sizes: BTreeMap<Vec<String>, usize>,
    pub min_group_size: usize,
    pub passes: bool,
    pub offending_groups: Vec<Vec<String>>,
    /// Patients without a diagnosis report; they have no localization and are not grouped.
    pub undiagnosed_patients: Vec<String>,
    pub excluded_patients: usize,
}

impl AuditResult {
    /// Machine-readable form with groups as a list, since JSON object keys must be strings.
    pub fn to_json(&self) -> serde_json::Value {
        let groups: Vec<GroupCount> = self
            .group_sizes
            .iter()
            .map(|(key, count)| GroupCount {
                key: key.clone(),
                count: *count,
            })
            .collect();
        serde_json::json!({
            "k": self.k,
            "quasi_identifiers": self.quasi_identifiers.iter().map(|q| q.name()).collect::<Vec<_>>(),
            "passes": self.passes,
            "min_group_size": self.min_group_size,
            "groups": groups,
            "offending_groups": self.offending_groups,
            "undiagnosed_patients": self.undiagnosed_patients,
            "excluded_patients": self.excluded_patients,
        })
    }

    pub fn render_table(&self) -> String {
        let mut s = String::new();
        let header: Vec<&str> = self.quasi_identifiers.iter().map(|q| q.name()).collect();
        let _ = writeln!(s, "{:<40} {:>8}  status", header.join(" x "), "count");
        for (key, count) in &self.group_sizes {
            let flag = if *count < self.k { "BELOW k" } else { "ok" };
            let _ = writeln!(s, "{:<40} {:>8}  {}", key.join(" / "), count, flag);
        }
        let _ = writeln!(
            s,
            "k = {}, smallest group = {}, {}",
            self.k,
            self.min_group_size,
            if self.passes { "PASS" } else { "FAIL" }
        );
        if !self.undiagnosed_patients.is_empty() {
            let _ = writeln!(s, "{} patient(s) without diagnosis not grouped", self.undiagnosed_patients.len());
        }
        s
    }
}

/// Counts cases per quasi-identifier tuple and checks the smallest group against k.
pub fn audit(dataset: &Dataset, policy: &PrivacyPolicy) -> Result<AuditResult, AuditError> {
    policy.validate()?;
    let mut localization: BTreeMap<&str, &str> = BTreeMap::new();
    let mut deceased: HashSet<&str> = HashSet::new();
    for r in &dataset.reports {
        match &r.payload {
            ReportPayload::Diagnosis { icd10 } => {
                localization.insert(&r.patient_id, icd10);
            }
            ReportPayload::Death => {
                deceased.insert(&r.patient_id);
            }
            _ => {}
        }
    }
    let mut group_sizes: BTreeMap<Vec<String>, usize> = BTreeMap::new();
    let mut undiagnosed = Vec::new();
    let mut excluded = 0;
    for p in &dataset.patients {
        let Some(loc) = localization.get(p.patient_id.as_str()) else {
            undiagnosed.push(p.patient_id.clone());
            continue;
        };
        if policy.excluded_localizations.contains(*loc) {
            excluded += 1;
            continue;
        }
        let key = policy
            .quasi_identifiers
            .iter()
            .map(|q| match q {
                QuasiIdentifier::Gender => p.gender.to_string(),
                QuasiIdentifier::Icd10Localization => loc.to_string(),
                QuasiIdentifier::DeceasedFlag => deceased.contains(p.patient_id.as_str()).to_string(),
            })
            .collect();
        *group_sizes.entry(key).or_default() += 1;
    }
    let min_group_size = *group_sizes.values().min().ok_or(AuditError::NoGroups)?;
    let offending_groups: Vec<Vec<String>> =
        group_sizes.iter().filter(|(_, n)| **n < policy.k).map(|(k, _)| k.clone()).collect();
    Ok(AuditResult {
        k: policy.k,
        quasi_identifiers: policy.quasi_identifiers.clone(),
        passes: offending_groups.is_empty(),
        min_group_size,
        group_sizes,
        offending_groups,
        undiagnosed_patients: undiagnosed,
        excluded_patients: excluded,
    })
}

/// Removes every patient (and their reports) diagnosed with an excluded localization.
pub fn filter_rare(dataset: &Dataset, policy: &PrivacyPolicy) -> Dataset {
    if policy.excluded_localizations.is_empty() {
        return dataset.clone();
    }
    let drop: HashSet<&str> = dataset
        .reports
        .iter()
        .filter_map(|r| match &r.payload {
            ReportPayload::Diagnosis { icd10 } if policy.excluded_localizations.contains(icd10) => {
                Some(r.patient_id.as_str())
            }
            _ => None,
        })
        .collect();
    Dataset {
        patients: dataset.patients.iter().filter(|p| !drop.contains(p.patient_id.as_str())).cloned().collect(),
        reports: dataset.reports.iter().filter(|r| !drop.contains(r.patient_id.as_str())).cloned().collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::obds::{Gender, ObdsReport, PatientMaster};
    use chrono::NaiveDate;

    fn dataset(groups: &[(Gender, &str, bool, usize)]) -> Dataset {
        let mut ds = Dataset::default();
        let day = NaiveDate::from_ymd_opt(2015, 1, 1).unwrap();
        for (g, loc, dead, n) in groups {
            for _ in 0..*n {
                let id = format!("P{}", ds.patients.len());
                ds.patients.push(PatientMaster {
                    patient_id: id.clone(),
                    gender: *g,
                    date_of_birth: NaiveDate::from_ymd_opt(1950, 1, 1).unwrap(),
                });
                ds.reports.push(ObdsReport {
                    patient_id: id.clone(),
                    report_date: day,
                    payload: ReportPayload::Diagnosis { icd10: loc.to_string() },
                });
                if *dead {
                    ds.reports.push(ObdsReport {
                        patient_id: id,
                        report_date: day,
                        payload: ReportPayload::Death,
                    });
                }
            }
        }
        ds
    }

    #[test]
    fn smallest_group_fourteen_passes_k10() {
        let ds = dataset(&[
            (Gender::Male, "C71.2", true, 30),
            (Gender::Female, "C71.2", true, 14),
            (Gender::Male, "C71.2", false, 20),
        ]);
        let r = audit(&ds, &PrivacyPolicy::default()).unwrap();
        assert!(r.passes);
        assert_eq!(r.min_group_size, 14);
        assert_eq!(r.group_sizes.values().sum::<usize>(), 64);
    }

    #[test]
    fn group_of_three_fails() {
        let ds = dataset(&[(Gender::Male, "C71.2", true, 30), (Gender::Female, "C71.9", false, 3)]);
        let r = audit(&ds, &PrivacyPolicy::default()).unwrap();
        assert!(!r.passes);
        assert_eq!(r.min_group_size, 3);
        assert_eq!(r.offending_groups, vec![vec!["female".to_string(), "C71.9".into(), "false".into()]]);
    }

    #[test]
    fn excluded_localizations_not_grouped() {
        let ds = dataset(&[(Gender::Male, "C71.2", true, 12), (Gender::Male, "C72.0", true, 1)]);
        let r = audit(&ds, &PrivacyPolicy::default()).unwrap();
        assert!(r.passes);
        assert_eq!(r.excluded_patients, 1);
    }

    #[test]
    fn policy_validation() {
        let p = PrivacyPolicy {
            k: 1,
            ..Default::default()
        };
        assert!(matches!(p.validate(), Err(AuditError::InvalidPolicy(_))));
        let p = PrivacyPolicy {
            quasi_identifiers: vec![],
            ..Default::default()
        };
        assert!(p.validate().is_err());
        assert_eq!(audit(&Dataset::default(), &PrivacyPolicy::default()), Err(AuditError::NoGroups));
    }

    #[test]
    fn filter_drops_patients_and_reports() {
        let ds = dataset(&[(Gender::Male, "C71.2", true, 8), (Gender::Female, "C72.0", true, 2)]);
        let out = filter_rare(&ds, &PrivacyPolicy::default());
        assert_eq!(out.patients.len(), 8);
        assert_eq!(out.reports.len(), ds.reports.len() - 4);
        assert!(out.reports.iter().all(|r| r.payload != ReportPayload::Diagnosis { icd10: "C72.0".into() }));
        assert_eq!(filter_rare(&out, &PrivacyPolicy::default()), out);
        let keep_all = PrivacyPolicy {
            excluded_localizations: BTreeSet::new(),
            ..Default::default()
        };
        assert_eq!(filter_rare(&ds, &keep_all), ds);
    }
}
