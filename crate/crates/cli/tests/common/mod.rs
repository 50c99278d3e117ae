#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use oncosynth::cohort::{write_registry_table, AgeGroup, RegistryRecord, SurgeryEntry};
use oncosynth::obds::Gender;

pub fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_oncosynth"));
    c.env("RUST_LOG", "warn");
    c
}

pub fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn oncosynth")
}

pub fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

pub fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn record(i: usize, gender: Gender, icd10: &str, deceased: bool) -> RegistryRecord {
    RegistryRecord {
        record_id: format!("R{i:03}"),
        gender,
        age_group: AgeGroup::containing(55.0 + (i % 20) as f64, 5),
        diagnosis_year: 2012 + (i % 6) as i32,
        icd10: icd10.into(),
        surgeries: if i.is_multiple_of(2) {
            vec![SurgeryEntry { ops: "5-015.0".into(), offset: 7 + (i % 10) as u32 }]
        } else {
            vec![]
        },
        systemic_therapies: vec![],
        radiotherapies: vec![],
        death_offset: deceased.then_some(200 + 13 * i as u32),
    }
}

/// Registry export whose smallest (gender, localization, deceased) group has
/// `smallest` members; every other group has 12.
pub fn gate_records(smallest: usize) -> Vec<RegistryRecord> {
    let groups = [
        (Gender::Male, "C71.2", true, 12),
        (Gender::Male, "C71.2", false, 12),
        (Gender::Female, "C71.2", true, 12),
        (Gender::Female, "C71.9", true, smallest),
    ];
    let mut out = Vec::new();
    for (g, icd, dead, n) in groups {
        for _ in 0..n {
            out.push(record(out.len(), g, icd, dead));
        }
    }
    out
}

/// Writes the registry table and a pipeline config next to it; returns the config path.
pub fn gate_fixture(dir: &Path, smallest: usize) -> PathBuf {
    let table = dir.join("registry.csv");
    write_registry_table(std::fs::File::create(&table).unwrap(), &gate_records(smallest)).unwrap();
    let config = dir.join("pipeline.toml");
    std::fs::write(
        &config,
        "seed = 42\n\n[input]\nregistry_table = \"registry.csv\"\n\n[output]\ndir = \"out\"\n\n[simulation]\npopulation_size = 2000\n",
    )
    .unwrap();
    config
}
