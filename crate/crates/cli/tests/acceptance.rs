//! Acceptance criteria, one pass/fail line each. Run with
//! `cargo test -p oncosynth-cli --test acceptance`.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use oncosynth::cohort::{generate_ground_truth, AgeParams, AgeShape, GroundTruthSpec};
use oncosynth::config::{self_test_spec, PipelineConfig};
use oncosynth::evaluate::{box_stats, evaluate_cohort, kaplan_meier, CohortCase, EvalOptions};
use oncosynth::extract::extract;
use oncosynth::gmf::{emit, GmfModule};
use oncosynth::obds::Gender;
use oncosynth::pipeline::{self, EVENTS_FILE, MODULE_FILE, REPORT_FILE};
use oncosynth::privacy::{audit, PrivacyPolicy};
use oncosynth::simulate::{read_event_log, simulate_each, EventLogWriter, SimulationConfig, SyntheticPatient};
use oncosynth::timeline::build_timelines;
use oncosynth_oracles::{brute_groups, brute_transitions, distributed_branches, enumerate_paths, fixtures, order_stats, product_limit, therapy_counts};

type Criterion = (&'static str, fn() -> Outcome);

const SEED: u64 = 42;
const FIXTURES: u64 = 24;

struct Outcome {
    checks: Vec<(bool, String)>,
}

impl Outcome {
    fn new() -> Self {
        Outcome { checks: Vec::new() }
    }

    fn check(&mut self, ok: bool, what: impl Into<String>) {
        self.checks.push((ok, what.into()));
    }

    fn passed(&self) -> bool {
        self.checks.iter().all(|(ok, _)| *ok)
    }
}

fn source_cases(spec: &GroundTruthSpec) -> Vec<CohortCase> {
    let (_, ds) = generate_ground_truth(spec).unwrap();
    build_timelines(&ds).unwrap().timelines.iter().filter_map(CohortCase::from_timeline).collect()
}

fn read_patients(path: &Path) -> Vec<SyntheticPatient> {
    let mut out = Vec::new();
    read_event_log(fs::File::open(path).unwrap(), |p| {
        out.push(p);
        Ok(())
    })
    .unwrap();
    out
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

fn self_test_config(spec: GroundTruthSpec, population: u64, dir: &Path) -> PipelineConfig {
    let mut c = PipelineConfig::self_test(SEED, spec);
    c.simulation.population_size = population;
    c.output.dir = dir.to_path_buf();
    c
}

fn round_trip() -> Outcome {
    let mut o = Outcome::new();
    let dir = tempfile::tempdir().unwrap();
    let spec = self_test_spec(SEED);
    let started = Instant::now();
    let summary = pipeline::run(&self_test_config(spec.clone(), 50_000, dir.path())).unwrap();
    let elapsed = started.elapsed();
    o.check(elapsed < Duration::from_secs(60), format!("runtime {:.1} s < 60 s", elapsed.as_secs_f64()));
    o.check(summary.simulated == 50_000, format!("{} patients simulated", summary.simulated));

    let patients = read_patients(&dir.path().join(EVENTS_FILE));
    let synthetic: Vec<CohortCase> = patients.iter().filter_map(CohortCase::from_synthetic).collect();
    let source = source_cases(&spec);
    let all = EvalOptions::default();
    let syn = evaluate_cohort(&synthetic, &all).unwrap();
    let src = evaluate_cohort(&source, &all).unwrap();

    for (code, p) in &spec.localizations.male {
        let f = syn.tumor_frequencies.get(code).copied().unwrap_or(0.0);
        let d = 100.0 * (f - p);
        o.check(d.abs() <= 1.5, format!("{code} frequency {:.2}% vs {:.0}% ({d:+.2} pp, limit 1.5)", 100.0 * f, 100.0 * p));
    }
    for g in Gender::ALL {
        let AgeParams { mean: m, std: s } = spec.age.get(g).clone();
        let b = evaluate_cohort(&synthetic, &EvalOptions { gender: Some(g), ..all }).unwrap().age_overall;
        o.check((b.mean - m).abs() <= 0.5, format!("{} age mean {:.2} vs {m} (limit 0.5 y)", g.as_str(), b.mean));
        let rel = (b.std - s) / s;
        o.check(rel.abs() <= 0.10, format!("{} age std {:.2} vs {s} ({:+.1}%, limit 10%)", g.as_str(), b.std, 100.0 * rel));
    }
    // survival is measured from diagnosis on both sides; the ground-truth
    // exponential runs from the last therapy, so the source sample is the reference
    for (code, s) in &src.survival {
        let a = s.box_stats.as_ref().unwrap().mean;
        let b = syn.survival[code].box_stats.as_ref().unwrap().mean;
        let rel = (b - a) / a;
        o.check(
            rel.abs() <= 0.05,
            format!("{code} survival mean {b:.1} d vs source {a:.1} d ({:+.1}%, limit 5%; generator mean {})", 100.0 * rel, spec.survival_mean_days[code]),
        );
    }
    let operated = patients.iter().filter(|p| p.first_surgery().is_some()).count();
    let f = operated as f64 / patients.len() as f64;
    o.check((f - 0.6).abs() <= 0.02, format!("surgery frequency {:.2}% vs 60% (limit 2 pp)", 100.0 * f));
    let delays: Vec<i64> = patients
        .iter()
        .filter_map(|p| Some((p.first_surgery()?.date - p.diagnosis()?.date).num_days()))
        .collect();
    let (lo, hi) = (delays.iter().min().copied().unwrap_or(0), delays.iter().max().copied().unwrap_or(0));
    o.check(lo >= 7 && hi <= 30, format!("diagnosis to surgery delays in [{lo}, {hi}] within [7, 30]"));
    o
}

fn oracle_equivalence() -> Outcome {
    let mut o = Outcome::new();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let (mut ext_ok, mut audit_ok, mut box_ok) = (true, true, true);
    for i in 0..FIXTURES {
        let spec = fixtures::random_spec(i, rng.random_range(1..=50));
        let (_, ds) = generate_ground_truth(&spec).unwrap();
        let ts = build_timelines(&ds).unwrap().timelines;
        let r = extract(&ts).unwrap();
        let oracle = brute_transitions(&ts);
        let mut n = 0;
        for (g, from, to, s) in oracle.iter() {
            n += 1;
            match r.transitions.get(g, from, to) {
                Some(x) if x.count == s.count && (x.probability - s.probability).abs() <= 1e-12 => {}
                _ => ext_ok = false,
            }
        }
        ext_ok &= n == r.transitions.iter().count();

        let policy = PrivacyPolicy { k: rng.random_range(2..=10), ..Default::default() };
        let got = audit(&ds, &policy).map(|a| a.group_sizes.into_iter().collect::<Vec<_>>()).unwrap_or_default();
        audit_ok &= got == brute_groups(&ds, &policy);

        let values: Vec<f64> = (0..rng.random_range(1..200)).map(|_| rng.random_range(-500.0..500.0)).collect();
        let b = box_stats(&values).unwrap();
        let s = order_stats(&values);
        box_ok &= (b.q1, b.median, b.q3, b.lower_fence, b.upper_fence, b.outlier_fraction)
            == (s.q1, s.median, s.q3, s.lower_fence, s.upper_fence, s.outlier_fraction);
    }
    o.check(ext_ok, format!("extract == brute_transitions on {FIXTURES} fixtures (counts exact, p within 1e-12)"));
    o.check(audit_ok, format!("audit == nested-loop grouping on {FIXTURES} fixtures"));
    o.check(box_ok, format!("BoxStats == sort-based order statistics on {FIXTURES} samples"));

    let obs = [(50, true), (60, false), (120, true), (130, false), (200, false)];
    let km = kaplan_meier(&obs);
    let hand = [(50, 4.0 / 5.0), (120, 4.0 / 5.0 * (1.0 - 1.0 / 3.0))];
    let pl = product_limit(&obs);
    let ok = hand.iter().all(|(t, s)| (km.at(*t) - s).abs() <= 1e-12) && pl.iter().all(|(t, s)| (km.at(*t) - s).abs() <= 1e-12);
    o.check(ok, format!("KM on the 5-case fixture: S(50)={:.12}, S(120)={:.12} (4/5, 8/15)", km.at(50), km.at(120)));
    o
}

fn module_properties() -> Outcome {
    let mut o = Outcome::new();
    let mut modules: Vec<GmfModule> = (0..FIXTURES)
        .map(|i| emit(&extract(&fixtures::timelines(&fixtures::random_spec(i, 50))).unwrap(), "fixture").unwrap())
        .collect();
    modules.push(emit(&extract(&fixtures::timelines(&fixtures::registry_scale_spec(SEED))).unwrap(), "scale").unwrap());
    let (mut violations, mut paths, mut repeated, mut too_many, mut bad_sums) = (0, 0, 0, 0, 0);
    for m in &modules {
        violations += m.validate().len();
        for path in enumerate_paths(m, 64).unwrap() {
            paths += 1;
            let (s, y, x) = therapy_counts(m, &path);
            repeated += usize::from(s > 1 || y > 1 || x > 1);
            too_many += usize::from(s + y + x > 3);
        }
        bad_sums += distributed_branches(m).values().filter(|v| (v.iter().sum::<f64>() - 1.0).abs() > 1e-9).count();
    }
    o.check(violations == 0, format!("{violations} validation violations over {} modules", modules.len()));
    o.check(repeated == 0, format!("{repeated} of {paths} paths repeat a therapy type"));
    o.check(too_many == 0, format!("{too_many} of {paths} paths exceed 3 therapy states"));
    o.check(bad_sums == 0, format!("{bad_sums} distributed transitions off 1 by more than 1e-9"));
    o
}

fn privacy_gate() -> Outcome {
    let mut o = Outcome::new();
    let dir = tempfile::tempdir().unwrap();
    let config = common::gate_fixture(dir.path(), 3);
    let out = common::run(&["run", "--config", common::p(&config)]);
    let code = common::code(&out);
    o.check(code == 3, format!("pipeline exit code {code} (privacy gate is 3) with smallest group 3, k=10"));
    let module = dir.path().join("out").join(MODULE_FILE);
    o.check(!module.exists(), "no module file written");
    let d = PrivacyPolicy::default();
    let excluded: Vec<&str> = d.excluded_localizations.iter().map(String::as_str).collect();
    o.check(
        d.k == 10 && excluded == ["C71.5", "C71.6", "C71.7", "C72.0"],
        format!("default policy k={} excluding {excluded:?}", d.k),
    );
    o
}

fn determinism() -> Outcome {
    let mut o = Outcome::new();
    let dirs: Vec<_> = (0..3).map(|_| tempfile::tempdir().unwrap()).collect();
    for (dir, workers) in dirs.iter().zip(["2", "2", "1"]) {
        let out = common::run(&["run", "--self-test", "--population", "20000", "--workers", workers, "--output-dir", common::p(dir.path())]);
        assert_eq!(common::code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    }
    let same = |a: usize, b: usize, name: &str| fs::read(dirs[a].path().join(name)).unwrap() == fs::read(dirs[b].path().join(name)).unwrap();
    for name in [MODULE_FILE, EVENTS_FILE, REPORT_FILE] {
        o.check(same(0, 1, name), format!("{name} byte-identical across reruns"));
    }
    o.check(same(0, 2, EVENTS_FILE), "event log identical with 1 and 2 workers");

    let m = emit(&extract(&fixtures::timelines(&fixtures::registry_scale_spec(SEED))).unwrap(), "scale").unwrap();
    let cfg = SimulationConfig::new(10_000, SEED);
    let logs: Vec<Vec<u8>> = [1, 4]
        .iter()
        .map(|w| {
            let mut log = EventLogWriter::new(Vec::new(), "").unwrap();
            simulate_each(&m, &cfg, *w, |p| log.write_patient(&p)).unwrap();
            log.finish().unwrap()
        })
        .collect();
    o.check(logs[0] == logs[1], "large-module event log identical with 1 and 4 workers");
    o
}

fn peak_rss_kib() -> Option<u64> {
    let status = fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    line.split_whitespace().nth(1)?.parse().ok()
}

fn scale() -> Outcome {
    let mut o = Outcome::new();
    let spec = fixtures::registry_scale_spec(SEED);
    let ts = fixtures::timelines(&spec);
    let loc: std::collections::BTreeSet<_> = spec.localizations.male.keys().chain(spec.localizations.female.keys()).collect();
    o.check(
        ts.len() == 1441 && loc.len() >= 8 && spec.therapy.surgeries.len() >= 10 && spec.therapy.systemic.len() >= 15,
        format!("fixture: {} cases, {} localizations, {} OPS codes, {} substance sets", ts.len(), loc.len(), spec.therapy.surgeries.len(), spec.therapy.systemic.len()),
    );
    let m = emit(&extract(&ts).unwrap(), "scale").unwrap();
    let census: BTreeMap<&str, usize> = m.census();
    o.check(m.states.len() >= 200, format!("{} module states (need >= 200): {census:?}", m.states.len()));

    let dir = tempfile::tempdir().unwrap();
    let before = peak_rss_kib();
    let started = Instant::now();
    let file = BufWriter::new(fs::File::create(dir.path().join(EVENTS_FILE)).unwrap());
    let mut log = EventLogWriter::new(file, "scale").unwrap();
    simulate_each(&m, &SimulationConfig::new(100_000, SEED), 0, |p| log.write_patient(&p)).unwrap();
    log.finish().unwrap().flush().unwrap();
    let elapsed = started.elapsed();
    let size = fs::metadata(dir.path().join(EVENTS_FILE)).unwrap().len();
    o.check(elapsed < Duration::from_secs(300), format!("100000 patients simulated in {:.1} s (limit 300 s)", elapsed.as_secs_f64()));
    if let (Some(a), Some(b)) = (before, peak_rss_kib()) {
        let grown = b.saturating_sub(a);
        o.check(
            grown * 1024 < size,
            format!("streaming: peak memory grew {} KiB while writing a {} KiB event log", grown, size / 1024),
        );
    }
    o
}

fn skewness() -> Outcome {
    let mut o = Outcome::new();
    let mut spec = self_test_spec(SEED);
    spec.age_shape = AgeShape::Lognormal;
    spec.age.male = AgeParams { mean: 60.0, std: 12.0 };
    spec.age.female = AgeParams { mean: 63.0, std: 12.0 };
    let dir = tempfile::tempdir().unwrap();
    pipeline::run(&self_test_config(spec.clone(), 50_000, dir.path())).unwrap();
    let synthetic: Vec<f64> = read_patients(&dir.path().join(EVENTS_FILE))
        .iter()
        .filter_map(CohortCase::from_synthetic)
        .map(|c| c.age_at_diagnosis_years)
        .collect();
    let source: Vec<f64> = source_cases(&spec).iter().map(|c| c.age_at_diagnosis_years).collect();
    let (a, b) = (mean(source.iter().copied()), mean(synthetic.iter().copied()));
    let se = (box_stats(&source).unwrap().std.powi(2) / source.len() as f64).sqrt();
    o.check(
        b < a,
        format!("synthetic age mean {b:.3} < source mean {a:.3} (difference {:+.3} y, source standard error {se:.3} y)", b - a),
    );
    o
}

fn main() {
    let criteria: [Criterion; 7] = [
        ("round-trip fidelity", round_trip),
        ("oracle equivalence", oracle_equivalence),
        ("module validity and path properties", module_properties),
        ("privacy gate", privacy_gate),
        ("determinism", determinism),
        ("scale", scale),
        ("skewness limitation", skewness),
    ];
    let mut stdout = std::io::stdout();
    let mut failed = Vec::new();
    for (i, (name, f)) in criteria.iter().enumerate() {
        let outcome = f();
        let verdict = if outcome.passed() { "PASS" } else { "FAIL" };
        writeln!(stdout, "criterion {} [{verdict}] {name}", i + 1).unwrap();
        for (ok, what) in &outcome.checks {
            writeln!(stdout, "    {} {what}", if *ok { "ok  " } else { "FAIL" }).unwrap();
        }
        if !outcome.passed() {
            failed.push(i + 1);
        }
    }
    writeln!(stdout, "{} of {} criteria passed", criteria.len() - failed.len(), criteria.len()).unwrap();
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
