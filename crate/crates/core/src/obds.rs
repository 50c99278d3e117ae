//! A documented subset of the oBDS cancer-registry report format.
//!
//! Only the elements consumed by rule extraction are supported: patient master
//! data, diagnoses, surgeries, systemic therapy start/end, radiotherapy
//! start/end, and death. The profile is described in `docs/obds-subset.md`.
//!
//! ```xml
//! <?xml version="1.0" encoding="UTF-8"?>
//! <ObdsSubset version="1">
//!   <Patients>
//!     <Patient id="P1">
//!       <Gender>male</Gender>
//!       <BirthDate>1953-04-11</BirthDate>
//!     </Patient>
//!   </Patients>
//!   <Reports>
//!     <Report patient="P1" date="2015-06-02">
//!       <Diagnosis icd10="C71.2"/>
//!     </Report>
//!   </Reports>
//! </ObdsSubset>
//! ```

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const PROFILE_VERSION: &str = "1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gender {
    Male,
    Female,
}

impl Gender {
    pub const ALL: [Gender; 2] = [Gender::Male, Gender::Female];

    pub fn as_str(self) -> &'static str {
        match self {
            Gender::Male => "male",
            Gender::Female => "female",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Gender::Male => "Male",
            Gender::Female => "Female",
        }
    }
}

impl fmt::Display for Gender {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Gender {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "male" | "m" => Ok(Gender::Male),
            "female" | "f" | "w" => Ok(Gender::Female),
            other => Err(format!("unknown gender '{other}'")),
        }
    }
}

/// Set of systemic-therapy substances. Two therapies are the same iff their sets are equal.
pub type Substances = BTreeSet<String>;

pub fn substances_label(substances: &Substances) -> String {
    substances.iter().map(String::as_str).collect::<Vec<_>>().join("+")
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatientMaster {
    pub patient_id: String,
    pub gender: Gender,
    pub date_of_birth: NaiveDate,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ReportPayload {
    Diagnosis { icd10: String },
    Surgery { ops: String },
    SystemicTherapyStart { substances: Substances },
    SystemicTherapyEnd,
    RadiotherapyStart,
    RadiotherapyEnd,
    Death,
}

impl ReportPayload {
    /// Rank used to order reports that share a date.
    pub fn same_day_rank(&self) -> u8 {
        match self {
            ReportPayload::Diagnosis { .. } => 0,
            ReportPayload::Surgery { .. } => 1,
            ReportPayload::SystemicTherapyStart { .. } => 2,
            ReportPayload::RadiotherapyStart => 3,
            ReportPayload::SystemicTherapyEnd => 4,
            ReportPayload::RadiotherapyEnd => 5,
            ReportPayload::Death => 6,
        }
    }

    pub fn code(&self) -> String {
        match self {
            ReportPayload::Diagnosis { icd10 } => icd10.clone(),
            ReportPayload::Surgery { ops } => ops.clone(),
            ReportPayload::SystemicTherapyStart { substances } => substances_label(substances),
            _ => String::new(),
        }
    }

    pub fn element_name(&self) -> &'static str {
        match self {
            ReportPayload::Diagnosis { .. } => "Diagnosis",
            ReportPayload::Surgery { .. } => "Surgery",
            ReportPayload::SystemicTherapyStart { .. } => "SystemicTherapyStart",
            ReportPayload::SystemicTherapyEnd => "SystemicTherapyEnd",
            ReportPayload::RadiotherapyStart => "RadiotherapyStart",
            ReportPayload::RadiotherapyEnd => "RadiotherapyEnd",
            ReportPayload::Death => "Death",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ObdsReport {
    pub patient_id: String,
    pub report_date: NaiveDate,
    pub payload: ReportPayload,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub patients: Vec<PatientMaster>,
    pub reports: Vec<ObdsReport>,
}

#[derive(Debug, Error)]
pub enum ObdsError {
    #[error("malformed XML at line {line}, column {column}: {message}")]
    Xml {
        line: u32,
        column: u32,
        message: String,
    },
    #[error("schema error at line {line}: element <{element}>: {message}")]
    Schema {
        element: String,
        line: u32,
        message: String,
    },
    #[error("report at line {line} references unknown patient '{patient_id}'")]
    Referential { patient_id: String, line: u32 },
    #[error("dataset validation failed: {}", .0.join("; "))]
    Validation(Vec<String>),
}

/// ICD-10 localization codes handled by this profile: `C7x.y`.
pub fn is_valid_icd10(code: &str) -> bool {
    let b = code.as_bytes();
    b.len() == 5 && b[0] == b'C' && b[1] == b'7' && b[2].is_ascii_digit() && b[3] == b'.' && b[4].is_ascii_digit()
}

impl Dataset {
    pub fn new(patients: Vec<PatientMaster>, reports: Vec<ObdsReport>) -> Self {
        Dataset { patients, reports }
    }

    /// Returns every invariant violation; empty when the dataset is valid.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut seen = HashSet::new();
        for p in &self.patients {
            if p.patient_id.is_empty() {
                out.push("patient with empty id".to_string());
            } else if !seen.insert(p.patient_id.as_str()) {
                out.push(format!("duplicate patient id '{}'", p.patient_id));
            }
        }
        let mut diagnoses: HashMap<&str, usize> = HashMap::new();
        let mut deaths: HashMap<&str, usize> = HashMap::new();
        for (i, r) in self.reports.iter().enumerate() {
            if !seen.contains(r.patient_id.as_str()) {
                out.push(format!("report {i} references unknown patient '{}'", r.patient_id));
            }
            match &r.payload {
                ReportPayload::Diagnosis { icd10 } => {
                    if !is_valid_icd10(icd10) {
                        out.push(format!("report {i}: invalid ICD-10 localization '{icd10}'"));
                    }
                    *diagnoses.entry(&r.patient_id).or_default() += 1;
                }
                ReportPayload::Surgery { ops } if ops.trim().is_empty() => {
                    out.push(format!("report {i}: empty OPS code"));
                }
                ReportPayload::SystemicTherapyStart { substances } if substances.is_empty() => {
                    out.push(format!("report {i}: systemic therapy without substances"));
                }
                ReportPayload::Death => *deaths.entry(&r.patient_id).or_default() += 1,
                _ => {}
            }
        }
        let mut multi: Vec<_> = diagnoses.into_iter().filter(|(_, n)| *n > 1).collect();
        multi.sort();
        for (id, n) in multi {
            out.push(format!("patient '{id}' has {n} diagnosis reports"));
        }
        let mut multi: Vec<_> = deaths.into_iter().filter(|(_, n)| *n > 1).collect();
        multi.sort();
        for (id, n) in multi {
            out.push(format!("patient '{id}' has {n} death reports"));
        }
        out
    }

    pub fn validate(&self) -> Result<(), ObdsError> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(ObdsError::Validation(v))
        }
    }

    /// Reports grouped per patient id, each list in file order.
    pub fn reports_by_patient(&self) -> HashMap<&str, Vec<&ObdsReport>> {
        let mut map: HashMap<&str, Vec<&ObdsReport>> = HashMap::new();
        for r in &self.reports {
            map.entry(r.patient_id.as_str()).or_default().push(r);
        }
        map
    }

    pub fn diagnosis_of(&self, patient_id: &str) -> Option<&str> {
        self.reports.iter().find_map(|r| match &r.payload {
            ReportPayload::Diagnosis { icd10 } if r.patient_id == patient_id => Some(icd10.as_str()),
            _ => None,
        })
    }
}

fn pos_of(doc: &roxmltree::Document, node: roxmltree::Node) -> u32 {
    doc.text_pos_at(node.range().start).row
}

fn schema(doc: &roxmltree::Document, node: roxmltree::Node, message: impl Into<String>) -> ObdsError {
    ObdsError::Schema {
        element: node.tag_name().name().to_string(),
        line: pos_of(doc, node),
        message: message.into(),
    }
}

fn child<'a, 'input>(
    doc: &roxmltree::Document,
    node: roxmltree::Node<'a, 'input>,
    name: &str,
) -> Result<roxmltree::Node<'a, 'input>, ObdsError> {
    node.children()
        .find(|c| c.is_element() && c.has_tag_name(name))
        .ok_or_else(|| ObdsError::Schema {
            element: name.to_string(),
            line: pos_of(doc, node),
            message: format!("missing mandatory element inside <{}>", node.tag_name().name()),
        })
}

fn attr<'a>(doc: &roxmltree::Document, node: roxmltree::Node<'a, '_>, name: &str) -> Result<&'a str, ObdsError> {
    node.attribute(name)
        .ok_or_else(|| schema(doc, node, format!("missing mandatory attribute '{name}'")))
}

fn parse_date(doc: &roxmltree::Document, node: roxmltree::Node, text: &str) -> Result<NaiveDate, ObdsError> {
    NaiveDate::parse_from_str(text.trim(), "%Y-%m-%d")
        .map_err(|e| schema(doc, node, format!("invalid ISO-8601 date '{text}': {e}")))
}

fn element_text<'a>(node: roxmltree::Node<'a, '_>) -> &'a str {
    node.text().unwrap_or("").trim()
}

/// Parses a document in the subset profile.
pub fn parse_obds(xml: &[u8]) -> Result<Dataset, ObdsError> {
    let text = std::str::from_utf8(xml).map_err(|e| ObdsError::Xml {
        line: 1,
        column: 1,
        message: format!("input is not UTF-8: {e}"),
    })?;
    let doc = roxmltree::Document::parse(text).map_err(|e| {
        let pos = e.pos();
        ObdsError::Xml {
            line: pos.row,
            column: pos.col,
            message: e.to_string(),
        }
    })?;
    let root = doc.root_element();
    if !root.has_tag_name("ObdsSubset") {
        return Err(schema(&doc, root, "expected root element <ObdsSubset>"));
    }

    let mut patients = Vec::new();
    let mut ids = HashSet::new();
    for p in child(&doc, root, "Patients")?.children().filter(|n| n.is_element()) {
        if !p.has_tag_name("Patient") {
            return Err(schema(&doc, p, "unexpected element inside <Patients>"));
        }
        let patient_id = attr(&doc, p, "id")?.to_string();
        if patient_id.is_empty() {
            return Err(schema(&doc, p, "empty patient id"));
        }
        let gender_node = child(&doc, p, "Gender")?;
        let gender = element_text(gender_node)
            .parse::<Gender>()
            .map_err(|e| schema(&doc, gender_node, e))?;
        let birth_node = child(&doc, p, "BirthDate")?;
        let date_of_birth = parse_date(&doc, birth_node, element_text(birth_node))?;
        ids.insert(patient_id.clone());
        patients.push(PatientMaster {
            patient_id,
            gender,
            date_of_birth,
        });
    }

    let mut reports = Vec::new();
    for r in child(&doc, root, "Reports")?.children().filter(|n| n.is_element()) {
        if !r.has_tag_name("Report") {
            return Err(schema(&doc, r, "unexpected element inside <Reports>"));
        }
        let patient_id = attr(&doc, r, "patient")?.to_string();
        if !ids.contains(&patient_id) {
            return Err(ObdsError::Referential {
                patient_id,
                line: pos_of(&doc, r),
            });
        }
        let report_date = parse_date(&doc, r, attr(&doc, r, "date")?)?;
        let mut payloads = r.children().filter(|n| n.is_element());
        let body = payloads
            .next()
            .ok_or_else(|| schema(&doc, r, "report without payload element"))?;
        if let Some(extra) = payloads.next() {
            return Err(schema(&doc, extra, "a report carries exactly one payload element"));
        }
        let payload = match body.tag_name().name() {
            "Diagnosis" => {
                let icd10 = attr(&doc, body, "icd10")?;
                if !is_valid_icd10(icd10) {
                    return Err(schema(&doc, body, format!("'{icd10}' is not a C7x.y localization code")));
                }
                ReportPayload::Diagnosis { icd10: icd10.to_string() }
            }
            "Surgery" => {
                let ops = attr(&doc, body, "ops")?.trim();
                if ops.is_empty() {
                    return Err(schema(&doc, body, "empty OPS code"));
                }
                ReportPayload::Surgery { ops: ops.to_string() }
            }
            "SystemicTherapyStart" => {
                let substances: Substances = body
                    .children()
                    .filter(|n| n.is_element() && n.has_tag_name("Substance"))
                    .map(|n| element_text(n).to_string())
                    .filter(|s| !s.is_empty())
                    .collect();
                if substances.is_empty() {
                    return Err(ObdsError::Schema {
                        element: "Substance".into(),
                        line: pos_of(&doc, body),
                        message: "systemic therapy requires at least one <Substance>".into(),
                    });
                }
                ReportPayload::SystemicTherapyStart { substances }
            }
            "SystemicTherapyEnd" => ReportPayload::SystemicTherapyEnd,
            "RadiotherapyStart" => ReportPayload::RadiotherapyStart,
            "RadiotherapyEnd" => ReportPayload::RadiotherapyEnd,
            "Death" => ReportPayload::Death,
            other => return Err(schema(&doc, body, format!("unknown report payload <{other}>"))),
        };
        reports.push(ObdsReport {
            patient_id,
            report_date,
            payload,
        });
    }

    let dataset = Dataset { patients, reports };
    dataset.validate()?;
    Ok(dataset)
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c => out.push(c),
        }
    }
    out
}

/// Serializes a dataset; the output is byte-stable for equal datasets.
pub fn write_obds(dataset: &Dataset) -> Result<Vec<u8>, ObdsError> {
    dataset.validate()?;
    let mut s = String::new();
    s.push_str("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    s.push_str(&format!("<ObdsSubset version=\"{PROFILE_VERSION}\">\n"));
    s.push_str("  <Patients>\n");
    for p in &dataset.patients {
        s.push_str(&format!("    <Patient id=\"{}\">\n", escape(&p.patient_id)));
        s.push_str(&format!("      <Gender>{}</Gender>\n", p.gender));
        s.push_str(&format!("      <BirthDate>{}</BirthDate>\n", p.date_of_birth.format("%Y-%m-%d")));
        s.push_str("    </Patient>\n");
    }
    s.push_str("  </Patients>\n");
    s.push_str("  <Reports>\n");
    for r in &dataset.reports {
        s.push_str(&format!(
            "    <Report patient=\"{}\" date=\"{}\">\n",
            escape(&r.patient_id),
            r.report_date.format("%Y-%m-%d")
        ));
        match &r.payload {
            ReportPayload::Diagnosis { icd10 } => {
                s.push_str(&format!("      <Diagnosis icd10=\"{}\"/>\n", escape(icd10)))
            }
            ReportPayload::Surgery { ops } => s.push_str(&format!("      <Surgery ops=\"{}\"/>\n", escape(ops))),
            ReportPayload::SystemicTherapyStart { substances } => {
                s.push_str("      <SystemicTherapyStart>\n");
                for sub in substances {
                    s.push_str(&format!("        <Substance>{}</Substance>\n", escape(sub)));
                }
                s.push_str("      </SystemicTherapyStart>\n");
            }
            other => s.push_str(&format!("      <{}/>\n", other.element_name())),
        }
        s.push_str("    </Report>\n");
    }
    s.push_str("  </Reports>\n");
    s.push_str("</ObdsSubset>\n");
    Ok(s.into_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(s: &str) -> NaiveDate {
        NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap()
    }

    const MINIMAL: &str = r#"<?xml version="1.0" encoding="UTF-8"?>
<ObdsSubset version="1">
  <Patients>
    <Patient id="P1"><Gender>female</Gender><BirthDate>1950-01-31</BirthDate></Patient>
  </Patients>
  <Reports>
    <Report patient="P1" date="2015-03-01"><Diagnosis icd10="C71.2"/></Report>
  </Reports>
</ObdsSubset>"#;

    #[test]
    fn minimal_file() {
        let ds = parse_obds(MINIMAL.as_bytes()).unwrap();
        assert_eq!(ds.patients.len(), 1);
        assert_eq!(ds.reports.len(), 1);
        assert_eq!(ds.reports[0].payload, ReportPayload::Diagnosis { icd10: "C71.2".into() });
        assert_eq!(ds.patients[0].date_of_birth, d("1950-01-31"));
    }

    #[test]
    fn diagnosis_surgery_death_fixture() {
        let xml = r#"<ObdsSubset version="1">
  <Patients>
    <Patient id="A7"><Gender>male</Gender><BirthDate>1949-12-02</BirthDate></Patient>
  </Patients>
  <Reports>
    <Report patient="A7" date="2012-05-10"><Diagnosis icd10="C71.1"/></Report>
    <Report patient="A7" date="2012-05-24"><Surgery ops="5-015.0"/></Report>
    <Report patient="A7" date="2013-01-03"><Death/></Report>
  </Reports>
</ObdsSubset>"#;
        let ds = parse_obds(xml.as_bytes()).unwrap();
        let expected = vec![
            ObdsReport {
                patient_id: "A7".into(),
                report_date: d("2012-05-10"),
                payload: ReportPayload::Diagnosis { icd10: "C71.1".into() },
            },
            ObdsReport {
                patient_id: "A7".into(),
                report_date: d("2012-05-24"),
                payload: ReportPayload::Surgery { ops: "5-015.0".into() },
            },
            ObdsReport {
                patient_id: "A7".into(),
                report_date: d("2013-01-03"),
                payload: ReportPayload::Death,
            },
        ];
        assert_eq!(ds.reports, expected);
        assert_eq!(ds.patients[0].gender, Gender::Male);
        assert!(ds.reports.windows(2).all(|w| w[0].report_date <= w[1].report_date));
    }

    #[test]
    fn missing_patient_is_referential_error() {
        let xml = MINIMAL.replace("patient=\"P1\"", "patient=\"P99\"");
        match parse_obds(xml.as_bytes()) {
            Err(ObdsError::Referential { patient_id, .. }) => assert_eq!(patient_id, "P99"),
            other => panic!("expected referential error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_xml_reports_position() {
        let xml = "<ObdsSubset>\n  <Patients>\n</ObdsSubset>";
        match parse_obds(xml.as_bytes()) {
            Err(ObdsError::Xml { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected xml error, got {other:?}"),
        }
    }

    #[test]
    fn missing_birth_date_names_element() {
        let xml = MINIMAL.replace("<BirthDate>1950-01-31</BirthDate>", "");
        match parse_obds(xml.as_bytes()) {
            Err(ObdsError::Schema { element, .. }) => assert_eq!(element, "BirthDate"),
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn bad_icd10_rejected() {
        let xml = MINIMAL.replace("C71.2", "C50.1");
        assert!(matches!(parse_obds(xml.as_bytes()), Err(ObdsError::Schema { .. })));
    }

    #[test]
    fn second_diagnosis_rejected() {
        let xml = MINIMAL.replace(
            "</Reports>",
            "<Report patient=\"P1\" date=\"2016-01-01\"><Diagnosis icd10=\"C71.3\"/></Report></Reports>",
        );
        assert!(matches!(parse_obds(xml.as_bytes()), Err(ObdsError::Validation(_))));
    }

    #[test]
    fn empty_dataset_writes_valid_document() {
        let bytes = write_obds(&Dataset::default()).unwrap();
        let text = String::from_utf8(bytes.clone()).unwrap();
        assert!(!text.contains("<Patient "));
        assert_eq!(parse_obds(&bytes).unwrap(), Dataset::default());
    }

    #[test]
    fn duplicate_patient_rejected_on_write() {
        let p = PatientMaster {
            patient_id: "X".into(),
            gender: Gender::Male,
            date_of_birth: d("1960-01-01"),
        };
        let ds = Dataset::new(vec![p.clone(), p], vec![]);
        match write_obds(&ds) {
            Err(ObdsError::Validation(v)) => assert!(v[0].contains("duplicate patient id 'X'")),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn special_characters_are_escaped() {
        let ds = Dataset::new(
            vec![PatientMaster {
                patient_id: "a<&>\"'".into(),
                gender: Gender::Female,
                date_of_birth: d("1960-01-01"),
            }],
            vec![ObdsReport {
                patient_id: "a<&>\"'".into(),
                report_date: d("2010-02-02"),
                payload: ReportPayload::SystemicTherapyStart {
                    substances: ["Temozolomid & Co".to_string()].into_iter().collect(),
                },
            }],
        );
        let bytes = write_obds(&ds).unwrap();
        assert_eq!(parse_obds(&bytes).unwrap(), ds);
    }
}
