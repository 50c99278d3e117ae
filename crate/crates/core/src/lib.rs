//! Rule extraction from oncology registry reports into synthetic-patient
//! state-machine modules.
//!
//! The crate is organised as a pipeline:
//!
//! * [`obds`] reads and writes a documented subset of the oBDS XML report format.
//! * [`cohort`] turns tabular registry records into report datasets with fictitious
//!   exact dates, and samples parametric ground-truth cohorts.
//! * [`privacy`] audits k-anonymity over quasi-identifier groups and filters rare
//!   localizations.
//! * [`timeline`] builds per-case chronological event sequences.
//! * [`extract`] derives transition probabilities and delay distributions.
//! * [`gmf`] assembles and validates a Generic Module Framework state machine.
//! * [`simulate`] executes a module to produce synthetic patients.
//! * [`evaluate`] compares source and synthetic cohorts.
//! * [`pipeline`] wires the stages together behind a single configuration.

pub mod cohort;
pub mod config;
pub mod evaluate;
pub mod extract;
pub mod gmf;
pub mod obds;
pub mod pipeline;
pub mod privacy;
pub mod rng;
pub mod simulate;
pub mod timeline;

pub use obds::{Dataset, Gender, ObdsReport, PatientMaster, ReportPayload};
