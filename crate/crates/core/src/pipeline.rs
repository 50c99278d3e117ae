//! Stage wiring: map, audit, timelines, extract, emit, simulate, evaluate.
//!
//! Every stage writes its artifact into the output directory. A failed
//! privacy audit stops the run before extraction, so no rules or module are
//! written. `manifest.json` lists every artifact with its SHA-256, the config
//! digest and the seed.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use serde::Serialize;

use crate::cohort::{generate_ground_truth, map_to_obds, read_registry_table, write_registry_table};
use crate::config::{sha256_hex, PipelineConfig, StageName};
use crate::evaluate::{compare, evaluate_cohort, write_age_histograms, CohortCase, EvalOptions, FidelityReport};
use crate::extract::extract;
use crate::gmf::{emit, GmfModule};
use crate::obds::{parse_obds, write_obds, Dataset, Gender};
use crate::privacy::{audit, filter_rare};
use crate::simulate::{simulate_each, write_fhir_line, EventLogWriter};
use crate::timeline::{build_timelines, write_event_table};

/// Process exit status of a pipeline run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitStatus {
    Success = 0,
    Usage = 2,
    PrivacyGate = 3,
    DataValidation = 4,
    Internal = 5,
}

impl ExitStatus {
    pub fn code(self) -> i32 {
        self as i32
    }
}

#[derive(Debug)]
pub struct StageError {
    pub stage: &'static str,
    pub status: ExitStatus,
    pub message: String,
}

impl std::fmt::Display for StageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "stage {} failed: {}", self.stage, self.message)
    }
}

impl std::error::Error for StageError {}

fn fail(stage: &'static str, status: ExitStatus) -> impl Fn(&dyn std::fmt::Display) -> StageError {
    move |e| StageError {
        stage,
        status,
        message: e.to_string(),
    }
}

fn io(stage: &'static str) -> impl Fn(std::io::Error) -> StageError {
    move |e| fail(stage, ExitStatus::Internal)(&e)
}

pub const SOURCE_FILE: &str = "source.xml";
pub const REGISTRY_FILE: &str = "registry.csv";
pub const AUDIT_FILE: &str = "audit.json";
pub const TIMELINES_FILE: &str = "timelines.csv";
pub const RULES_FILE: &str = "rules.json";
pub const RULES_TEXT_FILE: &str = "rules.txt";
pub const MODULE_FILE: &str = "module.json";
pub const EVENTS_FILE: &str = "events.csv";
pub const FHIR_FILE: &str = "fhir.ndjson";
pub const REPORT_FILE: &str = "report.json";
pub const REPORT_TEXT_FILE: &str = "report.txt";
pub const PLOTS_DIR: &str = "plots";
pub const MANIFEST_FILE: &str = "manifest.json";

/// A JSON artifact wrapped with its provenance.
#[derive(Serialize)]
pub struct Stamped<'a, T: Serialize> {
    pub config_digest: &'a str,
    pub seed: u64,
    #[serde(flatten)]
    pub body: &'a T,
}

#[derive(Debug, Default)]
pub struct RunSummary {
    pub patients_read: usize,
    pub excluded_patients: usize,
    pub timelines: usize,
    pub module_states: BTreeMap<&'static str, usize>,
    pub simulated: u64,
    pub artifacts: Vec<PathBuf>,
    pub report: Option<FidelityReport>,
}

struct Run<'a> {
    config: &'a PipelineConfig,
    out: PathBuf,
    digest: String,
    summary: RunSummary,
}

impl Run<'_> {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write(&mut self, stage: &'static str, name: &str, bytes: &[u8]) -> Result<(), StageError> {
        let p = self.path(name);
        fs::write(&p, bytes).map_err(io(stage))?;
        self.summary.artifacts.push(p);
        Ok(())
    }

    fn stamped_json<T: Serialize>(&self, body: &T) -> String {
        let stamped = Stamped {
            config_digest: &self.digest,
            seed: self.config.seed,
            body,
        };
        let mut s = serde_json::to_string_pretty(&stamped).expect("serialize");
        s.push('\n');
        s
    }
}

/// Runs the configured stages; returns what was produced or the failing stage.
pub fn run(config: &PipelineConfig) -> Result<RunSummary, StageError> {
    config.validate().map_err(|e| fail("config", ExitStatus::Usage)(&e))?;
    for p in [&config.input.registry_table, &config.input.obds].into_iter().flatten() {
        if !p.is_file() {
            return Err(StageError {
                stage: "config",
                status: ExitStatus::Usage,
                message: format!("input file {} not found", p.display()),
            });
        }
    }
    fs::create_dir_all(&config.output.dir).map_err(io("config"))?;
    let mut run = Run {
        config,
        out: config.output.dir.clone(),
        digest: config.digest(),
        summary: RunSummary::default(),
    };
    info!("config digest {}, seed {}", run.digest, config.seed);

    // map
    let dataset = load_source(&mut run)?;
    run.summary.patients_read = dataset.patients.len();
    let source_xml = write_obds(&dataset).map_err(|e| fail("map", ExitStatus::DataValidation)(&e))?;
    let source_digest = sha256_hex(&source_xml);
    run.write("map", SOURCE_FILE, &source_xml)?;
    info!("map: {} patients, {} reports", dataset.patients.len(), dataset.reports.len());
    if !config.runs(StageName::Audit) {
        return finish(run);
    }

    // audit (hard gate)
    let result = audit(&dataset, &config.policy).map_err(|e| fail("audit", ExitStatus::DataValidation)(&e))?;
    let audit_json = run.stamped_json(&result.to_json());
    run.write("audit", AUDIT_FILE, audit_json.as_bytes())?;
    run.summary.excluded_patients = result.excluded_patients;
    info!(
        "audit: {} groups, smallest {}, {} excluded, {} undiagnosed",
        result.group_sizes.len(),
        result.min_group_size,
        result.excluded_patients,
        result.undiagnosed_patients.len()
    );
    if !result.passes {
        // a module from an earlier run must not survive next to a failed audit
        for stale in [RULES_FILE, RULES_TEXT_FILE, MODULE_FILE] {
            let _ = fs::remove_file(run.path(stale));
        }
        return Err(StageError {
            stage: "audit",
            status: ExitStatus::PrivacyGate,
            message: format!(
                "k-anonymity violated: smallest group {} < k = {} ({} offending group(s))",
                result.min_group_size,
                result.k,
                result.offending_groups.len()
            ),
        });
    }
    if !config.runs(StageName::Timelines) {
        return finish(run);
    }

    // timelines
    let filtered = filter_rare(&dataset, &config.policy);
    let set = build_timelines(&filtered).map_err(|e| fail("timelines", ExitStatus::DataValidation)(&e))?;
    let mut buf = Vec::new();
    write_event_table(&mut buf, &set.timelines).map_err(|e| fail("timelines", ExitStatus::Internal)(&e))?;
    run.write("timelines", TIMELINES_FILE, &buf)?;
    run.summary.timelines = set.timelines.len();
    info!("timelines: {} built, {} patients without diagnosis", set.timelines.len(), set.skipped.len());
    if !config.runs(StageName::Extract) {
        return finish(run);
    }

    // extract
    let rules = extract(&set.timelines).map_err(|e| fail("extract", ExitStatus::DataValidation)(&e))?;
    run.write("extract", RULES_FILE, rules.to_json().as_bytes())?;
    run.write("extract", RULES_TEXT_FILE, rules.render_text().as_bytes())?;
    info!("extract: {} transitions", rules.transitions.iter().count());
    if !config.runs(StageName::Emit) {
        return finish(run);
    }

    // emit
    let mut module = emit(&rules, &config.module_name).map_err(|e| fail("emit", ExitStatus::DataValidation)(&e))?;
    module.metadata.source_digest = Some(source_digest);
    module.metadata.config_digest = Some(run.digest.clone());
    module.metadata.seed = Some(config.seed);
    let violations = module.validate();
    if !violations.is_empty() {
        let list: Vec<String> = violations.iter().map(ToString::to_string).collect();
        return Err(StageError {
            stage: "emit",
            status: ExitStatus::Internal,
            message: format!("emitted module is invalid: {}", list.join("; ")),
        });
    }
    let module_json = module.to_json();
    run.write("emit", MODULE_FILE, module_json.as_bytes())?;
    run.summary.module_states = module.census();
    info!("emit: {} states {:?}", module.states.len(), run.summary.module_states);
    if !config.runs(StageName::Simulate) {
        return finish(run);
    }

    // simulate (+ collect evaluation cases on the fly)
    let synthetic = simulate_stage(&mut run, &module, &sha256_hex(module_json.as_bytes()))?;
    if !config.runs(StageName::Evaluate) {
        return finish(run);
    }

    // evaluate
    let source: Vec<CohortCase> = set.timelines.iter().filter_map(CohortCase::from_timeline).collect();
    evaluate_stage(&mut run, &source, &synthetic)?;
    finish(run)
}

fn load_source(run: &mut Run) -> Result<Dataset, StageError> {
    let config = run.config;
    let bad = fail("map", ExitStatus::DataValidation);
    if let Some(path) = &config.input.obds {
        let bytes = fs::read(path).map_err(io("map"))?;
        let ds = parse_obds(&bytes).map_err(|e| bad(&e))?;
        ds.validate().map_err(|e| bad(&e))?;
        return Ok(ds);
    }
    if let Some(path) = &config.input.registry_table {
        let records = read_registry_table(File::open(path).map_err(io("map"))?).map_err(|e| bad(&e))?;
        return map_to_obds(&records, config.seed).map_err(|e| bad(&e));
    }
    let spec = config.ground_truth.as_ref().expect("validated config has an input");
    let (records, ds) = generate_ground_truth(spec).map_err(|e| bad(&e))?;
    let mut buf = Vec::new();
    write_registry_table(&mut buf, &records).map_err(|e| bad(&e))?;
    run.write("map", REGISTRY_FILE, &buf)?;
    info!("map: self-test cohort of {} records", records.len());
    Ok(ds)
}

fn simulate_stage(run: &mut Run, module: &GmfModule, module_digest: &str) -> Result<Vec<CohortCase>, StageError> {
    let config = run.config;
    let sim = config.simulation_config();
    let events_path = run.path(EVENTS_FILE);
    let provenance = format!(
        "oncosynth event log; config_digest={} seed={} module_digest={}",
        run.digest, config.seed, module_digest
    );
    let file = BufWriter::new(File::create(&events_path).map_err(io("simulate"))?);
    let mut log = EventLogWriter::new(file, &provenance).map_err(|e| fail("simulate", ExitStatus::Internal)(&e))?;
    let fhir_path = run.path(FHIR_FILE);
    let mut fhir = if config.simulation.fhir {
        Some(BufWriter::new(File::create(&fhir_path).map_err(io("simulate"))?))
    } else {
        None
    };
    let workers = if config.simulation.workers == 0 {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    } else {
        config.simulation.workers
    };
    let mut cases = Vec::new();
    let mut with_diagnosis = 0u64;
    simulate_each(module, &sim, workers, |p| {
        log.write_patient(&p)?;
        if let Some(f) = fhir.as_mut() {
            write_fhir_line(f, &p)?;
        }
        if let Some(c) = CohortCase::from_synthetic(&p) {
            with_diagnosis += 1;
            cases.push(c);
        }
        Ok(())
    })
    .map_err(|e| fail("simulate", ExitStatus::Internal)(&e))?;
    let mut file = log.finish().map_err(|e| fail("simulate", ExitStatus::Internal)(&e))?;
    file.flush().map_err(io("simulate"))?;
    run.summary.artifacts.push(events_path);
    if let Some(mut f) = fhir {
        f.flush().map_err(io("simulate"))?;
        run.summary.artifacts.push(fhir_path);
    }
    run.summary.simulated = sim.population_size;
    info!(
        "simulate: {} patients ({} diagnosed) on {} worker(s)",
        sim.population_size, with_diagnosis, workers
    );
    Ok(cases)
}

fn evaluate_stage(run: &mut Run, source: &[CohortCase], synthetic: &[CohortCase]) -> Result<(), StageError> {
    let config = run.config;
    let bad = fail("evaluate", ExitStatus::DataValidation);
    let opts = EvalOptions {
        bin_width_years: config.evaluation.bin_width_years,
        gender: None,
    };
    let src = evaluate_cohort(source, &opts).map_err(|e| bad(&e))?;
    let syn = evaluate_cohort(synthetic, &opts).map_err(|e| bad(&e))?;
    let report = compare(&src, &syn, None);
    let mut text = report.render_text();
    let mut reports = BTreeMap::new();
    reports.insert("all".to_string(), report.clone());
    if config.evaluation.by_gender {
        for g in Gender::ALL {
            let opts = EvalOptions { gender: Some(g), ..opts };
            // a gender may be absent from either cohort
            if let (Ok(a), Ok(b)) = (evaluate_cohort(source, &opts), evaluate_cohort(synthetic, &opts)) {
                let r = compare(&a, &b, Some(g));
                text.push('\n');
                text.push_str(&r.render_text());
                reports.insert(g.as_str().to_string(), r);
            }
        }
    }
    let json = run.stamped_json(&reports);
    run.write("evaluate", REPORT_FILE, json.as_bytes())?;
    run.write("evaluate", REPORT_TEXT_FILE, text.as_bytes())?;
    let plots = run.path(PLOTS_DIR);
    report.write_plot_tables(&plots).map_err(|e| fail("evaluate", ExitStatus::Internal)(&e))?;
    let hist = File::create(plots.join("age_hist.csv")).map_err(io("evaluate"))?;
    write_age_histograms(hist, &src, &syn).map_err(|e| fail("evaluate", ExitStatus::Internal)(&e))?;
    for name in ["frequencies.csv", "age_box.csv", "age_hist.csv", "survival_box.csv", "km.csv", "pathways.csv"] {
        run.summary.artifacts.push(plots.join(name));
    }
    info!(
        "evaluate: {} localizations compared, max frequency deviation {:.2} pp",
        report.localizations.len(),
        report.max_frequency_deviation_pp
    );
    run.summary.report = Some(report);
    Ok(())
}

fn finish(mut run: Run) -> Result<RunSummary, StageError> {
    #[derive(Serialize)]
    struct Manifest {
        generator: String,
        artifacts: BTreeMap<String, String>,
    }
    let mut artifacts = BTreeMap::new();
    for p in &run.summary.artifacts {
        let bytes = fs::read(p).map_err(io("manifest"))?;
        let rel = p.strip_prefix(&run.out).unwrap_or(p).to_string_lossy().replace('\\', "/");
        artifacts.insert(rel, sha256_hex(&bytes));
    }
    let manifest = Manifest {
        generator: format!("oncosynth {}", env!("CARGO_PKG_VERSION")),
        artifacts,
    };
    let json = run.stamped_json(&manifest);
    run.write("manifest", MANIFEST_FILE, json.as_bytes())?;
    Ok(run.summary)
}

/// Convenience for callers holding a path to the output directory.
pub fn artifact(config: &PipelineConfig, name: &str) -> PathBuf {
    Path::new(&config.output.dir).join(name)
}
