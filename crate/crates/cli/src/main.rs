//! `oncosynth` command-line interface: one subcommand per pipeline stage plus
//! `run` for the whole chain. Exit codes: 0 success, 2 usage, 3 privacy
//! gate, 4 data validation, 5 internal error.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::{error, info};

use oncosynth::cohort::{generate_ground_truth, map_to_obds, read_registry_table, write_registry_table, GroundTruthSpec};
use oncosynth::config::{self_test_spec, sha256_hex, PipelineConfig};
use oncosynth::evaluate::{compare, evaluate_cohort, write_age_histograms, CohortCase, EvalOptions};
use oncosynth::extract::{extract, ExtractionResult};
use oncosynth::gmf::{emit, GmfModule};
use oncosynth::obds::{parse_obds, write_obds, Dataset, Gender};
use oncosynth::pipeline::{self, ExitStatus};
use oncosynth::privacy::{audit, filter_rare, PrivacyPolicy};
use oncosynth::simulate::{read_event_log, simulate_each, write_fhir_line, EventLogWriter, SimulationConfig};
use oncosynth::timeline::{build_timelines, write_event_table, CaseTimeline};

#[derive(Parser)]
#[command(name = "oncosynth", version, about = "Registry reports to synthetic-patient modules")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct PolicyArgs {
    /// Pipeline config whose [policy] section applies.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the k-anonymity threshold.
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Map a registry table to an oBDS report file.
    Map {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Sample a ground-truth cohort (registry table and report file).
    GroundTruth {
        /// TOML ground-truth spec; the built-in self-test cohort when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        table: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Check k-anonymity of a report file.
    Audit {
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        policy: PolicyArgs,
        /// Write the machine-readable result here.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Build per-case timelines (rare localizations removed).
    Timelines {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[command(flatten)]
        policy: PolicyArgs,
    },
    /// Audit, then extract rules from a report file.
    Extract {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Also write a human-readable rule summary.
        #[arg(long)]
        text: Option<PathBuf>,
        #[command(flatten)]
        policy: PolicyArgs,
    },
    /// Assemble extracted rules into a module file.
    Emit {
        #[arg(long)]
        rules: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value = "oncosynth")]
        name: String,
    },
    /// Check a module file's structural invariants.
    Validate {
        #[arg(long)]
        module: PathBuf,
    },
    /// Simulate synthetic patients from a module.
    Simulate {
        #[arg(long)]
        module: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 100_000)]
        population: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.5)]
        gender_split: f64,
        /// Worker threads (0: one per core); never changes the output.
        #[arg(long, default_value_t = 0)]
        workers: usize,
        /// Also write FHIR-lite bundles, one JSON document per line.
        #[arg(long)]
        fhir: Option<PathBuf>,
    },
    /// Compare a source report file with a simulated event log.
    Evaluate {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        events: PathBuf,
        #[arg(long)]
        output_dir: PathBuf,
        #[arg(long, default_value_t = 5.0)]
        bin_width: f64,
        /// Add male and female reports.
        #[arg(long)]
        by_gender: bool,
        #[command(flatten)]
        policy: PolicyArgs,
    },
    /// Run all stages from a config file, or the built-in self-test.
    Run {
        #[arg(long, required_unless_present = "self_test")]
        config: Option<PathBuf>,
        /// Round trip on the built-in ground-truth cohort.
        #[arg(long, conflicts_with = "config")]
        self_test: bool,
        /// Output directory (overrides the config).
        #[arg(long)]
        output_dir: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        population: Option<u64>,
        #[arg(long)]
        workers: Option<usize>,
    },
}

struct Failure {
    status: ExitStatus,
    message: String,
}

type Result<T> = std::result::Result<T, Failure>;

fn usage(e: impl std::fmt::Display) -> Failure {
    Failure {
        status: ExitStatus::Usage,
        message: e.to_string(),
    }
}

fn data(e: impl std::fmt::Display) -> Failure {
    Failure {
        status: ExitStatus::DataValidation,
        message: e.to_string(),
    }
}

fn internal(e: impl std::fmt::Display) -> Failure {
    Failure {
        status: ExitStatus::Internal,
        message: e.to_string(),
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| internal(format!("cannot write {}: {e}", path.display())))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| internal(format!("cannot create {}: {e}", path.display())))
}

fn load_reports(path: &Path) -> Result<Dataset> {
    let ds = parse_obds(&read(path)?).map_err(data)?;
    ds.validate().map_err(data)?;
    Ok(ds)
}

fn policy(args: &PolicyArgs) -> Result<PrivacyPolicy> {
    let mut p = match &args.config {
        Some(path) => PipelineConfig::load(path).map_err(usage)?.policy,
        None => PrivacyPolicy::default(),
    };
    if let Some(k) = args.k {
        p.k = k;
    }
    p.validate().map_err(usage)?;
    Ok(p)
}

fn gated_timelines(ds: &Dataset, policy: &PrivacyPolicy) -> Result<Vec<CaseTimeline>> {
    let result = audit(ds, policy).map_err(data)?;
    if !result.passes {
        eprint!("{}", result.render_table());
        return Err(Failure {
            status: ExitStatus::PrivacyGate,
            message: format!("k-anonymity violated: smallest group {} < k = {}", result.min_group_size, result.k),
        });
    }
    let set = build_timelines(&filter_rare(ds, policy)).map_err(data)?;
    info!("{} timelines, {} patients without diagnosis", set.timelines.len(), set.skipped.len());
    Ok(set.timelines)
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Map { input, output, seed } => {
            let file = File::open(&input).map_err(|e| usage(format!("cannot read {}: {e}", input.display())))?;
            let records = read_registry_table(file).map_err(data)?;
            let ds = map_to_obds(&records, seed).map_err(data)?;
            write(&output, &write_obds(&ds).map_err(data)?)?;
            info!("mapped {} records to {} reports", records.len(), ds.reports.len());
        }
        Command::GroundTruth { spec, seed, table, output } => {
            let spec: GroundTruthSpec = match spec {
                Some(p) => {
                    let text = String::from_utf8(read(&p)?).map_err(usage)?;
                    toml::from_str(&text).map_err(usage)?
                }
                None => self_test_spec(seed),
            };
            let (records, ds) = generate_ground_truth(&spec).map_err(usage)?;
            let mut buf = Vec::new();
            write_registry_table(&mut buf, &records).map_err(internal)?;
            write(&table, &buf)?;
            write(&output, &write_obds(&ds).map_err(internal)?)?;
            info!("sampled {} records", records.len());
        }
        Command::Audit { input, policy: p, json } => {
            let ds = load_reports(&input)?;
            let result = audit(&ds, &policy(&p)?).map_err(data)?;
            print!("{}", result.render_table());
            if let Some(path) = json {
                let mut s = serde_json::to_string_pretty(&result.to_json()).map_err(internal)?;
                s.push('\n');
                write(&path, s.as_bytes())?;
            }
            if !result.passes {
                return Err(Failure {
                    status: ExitStatus::PrivacyGate,
                    message: "k-anonymity requirement not met".into(),
                });
            }
        }
        Command::Timelines { input, output, policy: p } => {
            let ds = load_reports(&input)?;
            let set = build_timelines(&filter_rare(&ds, &policy(&p)?)).map_err(data)?;
            let mut buf = Vec::new();
            write_event_table(&mut buf, &set.timelines).map_err(internal)?;
            write(&output, &buf)?;
            info!("{} timelines, {} patients without diagnosis", set.timelines.len(), set.skipped.len());
        }
        Command::Extract { input, output, text, policy: p } => {
            let ds = load_reports(&input)?;
            let timelines = gated_timelines(&ds, &policy(&p)?)?;
            let rules = extract(&timelines).map_err(data)?;
            write(&output, rules.to_json().as_bytes())?;
            if let Some(t) = text {
                write(&t, rules.render_text().as_bytes())?;
            }
        }
        Command::Emit { rules, output, name } => {
            let text = String::from_utf8(read(&rules)?).map_err(data)?;
            let rules = ExtractionResult::from_json(&text).map_err(data)?;
            let mut module = emit(&rules, &name).map_err(data)?;
            module.metadata.source_digest = Some(sha256_hex(text.as_bytes()));
            let violations = module.validate();
            if !violations.is_empty() {
                for v in &violations {
                    error!("{v}");
                }
                return Err(internal("emitted module failed validation"));
            }
            write(&output, module.to_json().as_bytes())?;
            info!("{} states {:?}", module.states.len(), module.census());
        }
        Command::Validate { module } => {
            let text = String::from_utf8(read(&module)?).map_err(data)?;
            let m = GmfModule::from_json(&text).map_err(data)?;
            let violations = m.validate();
            for v in &violations {
                println!("{v}");
            }
            if !violations.is_empty() {
                return Err(data(format!("{} violation(s)", violations.len())));
            }
            println!("valid: {} states {:?}", m.states.len(), m.census());
        }
        Command::Simulate {
            module,
            output,
            population,
            seed,
            gender_split,
            workers,
            fhir,
        } => {
            let bytes = read(&module)?;
            let m = GmfModule::from_json(std::str::from_utf8(&bytes).map_err(data)?).map_err(data)?;
            let violations = m.validate();
            if !violations.is_empty() {
                return Err(data(format!("module is invalid: {}", violations[0])));
            }
            let mut config = SimulationConfig::new(population, seed);
            config.gender_split = gender_split;
            config.validate().map_err(usage)?;
            let workers = if workers == 0 {
                std::thread::available_parallelism().map_or(1, |n| n.get())
            } else {
                workers
            };
            let provenance = format!("oncosynth event log; seed={seed} module_digest={}", sha256_hex(&bytes));
            let mut log = EventLogWriter::new(create(&output)?, &provenance).map_err(internal)?;
            let mut fhir_out = fhir.as_deref().map(create).transpose()?;
            simulate_each(&m, &config, workers, |p| {
                log.write_patient(&p)?;
                if let Some(f) = fhir_out.as_mut() {
                    write_fhir_line(f, &p)?;
                }
                Ok(())
            })
            .map_err(internal)?;
            log.finish().map_err(internal)?.flush().map_err(internal)?;
            if let Some(mut f) = fhir_out {
                f.flush().map_err(internal)?;
            }
            info!("simulated {population} patients on {workers} worker(s)");
        }
        Command::Evaluate {
            source,
            events,
            output_dir,
            bin_width,
            by_gender,
            policy: p,
        } => {
            let ds = load_reports(&source)?;
            let timelines = build_timelines(&filter_rare(&ds, &policy(&p)?)).map_err(data)?.timelines;
            let src: Vec<CohortCase> = timelines.iter().filter_map(CohortCase::from_timeline).collect();
            let mut syn = Vec::new();
            let file = File::open(&events).map_err(|e| usage(format!("cannot read {}: {e}", events.display())))?;
            read_event_log(std::io::BufReader::new(file), |p| {
                syn.extend(CohortCase::from_synthetic(&p));
                Ok(())
            })
            .map_err(data)?;
            fs::create_dir_all(&output_dir).map_err(internal)?;
            let mut text = String::new();
            let mut reports = std::collections::BTreeMap::new();
            let mut scopes = vec![None];
            if by_gender {
                scopes.extend(Gender::ALL.map(Some));
            }
            for gender in scopes {
                let opts = EvalOptions {
                    bin_width_years: bin_width,
                    gender,
                };
                let a = evaluate_cohort(&src, &opts).map_err(data)?;
                let b = evaluate_cohort(&syn, &opts).map_err(data)?;
                let r = compare(&a, &b, gender);
                text.push_str(&r.render_text());
                if gender.is_none() {
                    let plots = output_dir.join(pipeline::PLOTS_DIR);
                    r.write_plot_tables(&plots).map_err(internal)?;
                    write_age_histograms(create(&plots.join("age_hist.csv"))?, &a, &b).map_err(internal)?;
                }
                reports.insert(gender.map_or("all", |g| g.as_str()).to_string(), r);
            }
            let mut json = serde_json::to_string_pretty(&reports).map_err(internal)?;
            json.push('\n');
            write(&output_dir.join(pipeline::REPORT_FILE), json.as_bytes())?;
            write(&output_dir.join(pipeline::REPORT_TEXT_FILE), text.as_bytes())?;
            print!("{text}");
        }
        Command::Run {
            config,
            self_test,
            output_dir,
            seed,
            population,
            workers,
        } => {
            let mut c = match config {
                Some(path) => PipelineConfig::load(&path).map_err(usage)?,
                None => {
                    debug_assert!(self_test);
                    let seed = seed.unwrap_or(42);
                    let mut c = PipelineConfig::self_test(seed, self_test_spec(seed));
                    c.simulation.population_size = 50_000;
                    c
                }
            };
            if let Some(s) = seed {
                c.seed = s;
            }
            if let Some(d) = output_dir {
                c.output.dir = d;
            }
            if let Some(n) = population {
                c.simulation.population_size = n;
            }
            if let Some(w) = workers {
                c.simulation.workers = w;
            }
            let summary = pipeline::run(&c).map_err(|e| Failure {
                status: e.status,
                message: e.to_string(),
            })?;
            if let Some(r) = &summary.report {
                print!("{}", r.render_text());
            }
            println!("artifacts in {}", c.output.dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            error!("{}", f.message);
            ExitCode::from(f.status.code() as u8)
        }
    }
}
