//! Fidelity analysis: tumor frequencies, age at diagnosis, survival and
//! first-surgery pathways, compared between a source and a synthetic cohort.
//!
//! Quartiles use linear interpolation between closest ranks
//! (`h = (n - 1) p`). Outliers lie strictly outside the Tukey fences
//! `Q1 - 1.5 IQR` and `Q3 + 1.5 IQR`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::extract::DAYS_PER_YEAR;
use crate::obds::Gender;
use crate::simulate::SyntheticPatient;
use crate::timeline::{CaseTimeline, EventKind};

/// Localization frequency deviations above this many percentage points are flagged.
pub const FLAG_THRESHOLD_PP: f64 = 2.0;
pub const NO_SURGERY: &str = "none";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("cohort has no diagnosed cases")]
    NoDiagnoses,
    #[error("localization {0} has neither deceased nor censored cases")]
    NoSurvivalData(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// The per-case facts the analysis needs.
#[derive(Debug, Clone, PartialEq)]
pub struct CohortCase {
    pub gender: Gender,
    pub icd10: String,
    pub age_at_diagnosis_years: f64,
    /// Days from diagnosis to death.
    pub death_days: Option<i64>,
    /// Days from diagnosis to the last known event; the censoring time when alive.
    pub last_event_days: i64,
    pub first_surgery: Option<String>,
}

impl CohortCase {
    pub fn from_timeline(t: &CaseTimeline) -> Option<CohortCase> {
        let (icd10, diagnosis) = t.diagnosis()?;
        let days = |d: chrono::NaiveDate| (d - diagnosis).num_days();
        Some(CohortCase {
            gender: t.gender,
            icd10: icd10.to_string(),
            age_at_diagnosis_years: t.age_at_diagnosis_years(),
            death_days: t.events.iter().find(|e| e.kind == EventKind::Death).map(|e| days(e.date)),
            last_event_days: t.events.last().map_or(0, |e| days(e.date)),
            first_surgery: t.events.iter().find_map(|e| match &e.kind {
                EventKind::Surgery(ops) => Some(ops.clone()),
                _ => None,
            }),
        })
    }

    pub fn from_synthetic(p: &SyntheticPatient) -> Option<CohortCase> {
        let dx = p.diagnosis()?;
        let days = |d: chrono::NaiveDate| (d - dx.date).num_days();
        Some(CohortCase {
            gender: p.gender,
            icd10: dx.code.clone(),
            age_at_diagnosis_years: (dx.date - p.date_of_birth).num_days() as f64 / DAYS_PER_YEAR,
            death_days: p.death().map(|e| days(e.date)),
            last_event_days: p.events.last().map_or(0, |e| days(e.date)),
            first_surgery: p.first_surgery().map(|e| e.code.clone()),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation (n - 1); 0 for a single value.
    pub std: f64,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub lower_fence: f64,
    pub upper_fence: f64,
    pub outlier_fraction: f64,
}

fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// `None` for an empty sample.
pub fn box_stats(values: &[f64]) -> Option<BoxStats> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let mean = v.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    let (q1, median, q3) = (quantile(&v, 0.25), quantile(&v, 0.5), quantile(&v, 0.75));
    let iqr = q3 - q1;
    let (lower_fence, upper_fence) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
    let outliers = v.iter().filter(|x| **x < lower_fence || **x > upper_fence).count();
    Some(BoxStats {
        n,
        mean,
        std,
        min: v[0],
        q1,
        median,
        q3,
        max: v[n - 1],
        lower_fence,
        upper_fence,
        outlier_fraction: outliers as f64 / n as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
}

/// Bins `[k w, (k + 1) w)`; empty bins between occupied ones are kept.
pub fn histogram(values: &[f64], bin_width: f64) -> Vec<HistogramBin> {
    let mut counts: BTreeMap<i64, usize> = BTreeMap::new();
    for v in values {
        *counts.entry((v / bin_width).floor() as i64).or_default() += 1;
    }
    let (Some(&first), Some(&last)) = (counts.keys().next(), counts.keys().next_back()) else {
        return Vec::new();
    };
    (first..=last)
        .map(|k| HistogramBin {
            lower: k as f64 * bin_width,
            upper: (k + 1) as f64 * bin_width,
            count: counts.get(&k).copied().unwrap_or(0),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KmPoint {
    pub time: i64,
    pub survival: f64,
    pub at_risk: usize,
    pub events: usize,
    pub censored: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SurvivalCurve {
    /// One point per distinct observation time, ascending.
    pub points: Vec<KmPoint>,
}

impl SurvivalCurve {
    /// Survival probability just after `t`.
    pub fn at(&self, t: i64) -> f64 {
        self.points.iter().take_while(|p| p.time <= t).last().map_or(1.0, |p| p.survival)
    }
}

/// Product-limit estimate over `(time, died)` observations. Censored cases
/// at time t are still at risk at t.
pub fn kaplan_meier(observations: &[(i64, bool)]) -> SurvivalCurve {
    let mut by_time: BTreeMap<i64, (usize, usize)> = BTreeMap::new();
    for &(t, died) in observations {
        let e = by_time.entry(t).or_default();
        if died {
            e.0 += 1;
        } else {
            e.1 += 1;
        }
    }
    let mut at_risk = observations.len();
    let mut s = 1.0;
    let mut points = Vec::with_capacity(by_time.len());
    for (time, (events, censored)) in by_time {
        if events > 0 {
            s *= 1.0 - events as f64 / at_risk as f64;
        }
        points.push(KmPoint {
            time,
            survival: s,
            at_risk,
            events,
            censored,
        });
        at_risk -= events + censored;
    }
    SurvivalCurve { points }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgeStats {
    pub box_stats: BoxStats,
    pub histogram: Vec<HistogramBin>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalStats {
    /// Over deceased cases only; absent when nobody died.
    pub box_stats: Option<BoxStats>,
    pub curve: SurvivalCurve,
    pub deceased: usize,
    pub censored: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub bin_width_years: f64,
    pub gender: Option<Gender>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            bin_width_years: 5.0,
            gender: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortStats {
    pub cases: usize,
    pub tumor_frequencies: BTreeMap<String, f64>,
    pub age: BTreeMap<String, AgeStats>,
    /// All localizations pooled.
    pub age_overall: BoxStats,
    pub survival: BTreeMap<String, SurvivalStats>,
    /// Per localization: first-surgery OPS code (or `none`) to relative frequency.
    pub pathways: BTreeMap<String, BTreeMap<String, f64>>,
}

fn selected<'a>(cases: &'a [CohortCase], opts: &EvalOptions) -> Vec<&'a CohortCase> {
    cases.iter().filter(|c| opts.gender.is_none_or(|g| c.gender == g)).collect()
}

fn by_localization<'a>(cases: &[&'a CohortCase]) -> BTreeMap<&'a str, Vec<&'a CohortCase>> {
    let mut m: BTreeMap<&str, Vec<&CohortCase>> = BTreeMap::new();
    for c in cases {
        m.entry(c.icd10.as_str()).or_default().push(c);
    }
    m
}

pub fn tumor_frequencies(cases: &[CohortCase], opts: &EvalOptions) -> Result<BTreeMap<String, f64>, EvalError> {
    let sel = selected(cases, opts);
    if sel.is_empty() {
        return Err(EvalError::NoDiagnoses);
    }
    let n = sel.len() as f64;
    Ok(by_localization(&sel).into_iter().map(|(k, v)| (k.to_string(), v.len() as f64 / n)).collect())
}

pub fn age_stats(cases: &[CohortCase], opts: &EvalOptions) -> BTreeMap<String, AgeStats> {
    by_localization(&selected(cases, opts))
        .into_iter()
        .map(|(k, v)| {
            let ages: Vec<f64> = v.iter().map(|c| c.age_at_diagnosis_years).collect();
            let stats = AgeStats {
                box_stats: box_stats(&ages).expect("non-empty group"),
                histogram: histogram(&ages, opts.bin_width_years),
            };
            (k.to_string(), stats)
        })
        .collect()
}

pub fn survival_stats(cases: &[CohortCase], opts: &EvalOptions) -> Result<BTreeMap<String, SurvivalStats>, EvalError> {
    let mut out = BTreeMap::new();
    for (k, v) in by_localization(&selected(cases, opts)) {
        if v.is_empty() {
            return Err(EvalError::NoSurvivalData(k.to_string()));
        }
        let deaths: Vec<f64> = v.iter().filter_map(|c| c.death_days).map(|d| d as f64).collect();
        let obs: Vec<(i64, bool)> = v
            .iter()
            .map(|c| match c.death_days {
                Some(d) => (d, true),
                None => (c.last_event_days, false),
            })
            .collect();
        out.insert(
            k.to_string(),
            SurvivalStats {
                box_stats: box_stats(&deaths),
                curve: kaplan_meier(&obs),
                deceased: deaths.len(),
                censored: v.len() - deaths.len(),
            },
        );
    }
    Ok(out)
}

pub fn pathway_frequencies(cases: &[CohortCase], opts: &EvalOptions) -> BTreeMap<String, BTreeMap<String, f64>> {
    by_localization(&selected(cases, opts))
        .into_iter()
        .map(|(k, v)| {
            let mut counts: BTreeMap<String, usize> = BTreeMap::new();
            for c in &v {
                *counts.entry(c.first_surgery.clone().unwrap_or_else(|| NO_SURGERY.into())).or_default() += 1;
            }
            let n = v.len() as f64;
            (k.to_string(), counts.into_iter().map(|(ops, c)| (ops, c as f64 / n)).collect())
        })
        .collect()
}

pub fn evaluate_cohort(cases: &[CohortCase], opts: &EvalOptions) -> Result<CohortStats, EvalError> {
    let tumor_frequencies = tumor_frequencies(cases, opts)?;
    let ages: Vec<f64> = selected(cases, opts).iter().map(|c| c.age_at_diagnosis_years).collect();
    Ok(CohortStats {
        cases: ages.len(),
        tumor_frequencies,
        age: age_stats(cases, opts),
        age_overall: box_stats(&ages).ok_or(EvalError::NoDiagnoses)?,
        survival: survival_stats(cases, opts)?,
        pathways: pathway_frequencies(cases, opts),
    })
}

// ---------------------------------------------------------------------------
// Comparison

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pair<T> {
    pub source: T,
    pub synthetic: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizationComparison {
    pub icd10: String,
    pub frequency: Pair<f64>,
    /// synthetic - source, in percentage points.
    pub frequency_diff_pp: f64,
    pub age: Pair<BoxStats>,
    /// (synthetic - source) / source mean age.
    pub age_mean_rel_diff: f64,
    pub survival: Pair<Option<BoxStats>>,
    pub survival_mean_rel_diff: Option<f64>,
    pub km: Pair<SurvivalCurve>,
    pub pathways: BTreeMap<String, Pair<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Discrepancy {
    pub icd10: String,
    pub present_in: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub cases: Pair<usize>,
    pub gender: Option<Gender>,
    pub localizations: Vec<LocalizationComparison>,
    pub max_frequency_deviation_pp: f64,
    /// Localizations whose frequency differs by more than the flag threshold.
    pub flagged: Vec<String>,
    pub discrepancies: Vec<Discrepancy>,
}

fn rel(source: f64, synthetic: f64) -> f64 {
    if source == 0.0 {
        if synthetic == 0.0 { 0.0 } else { f64::INFINITY }
    } else {
        (synthetic - source) / source
    }
}

pub fn compare(source: &CohortStats, synthetic: &CohortStats, gender: Option<Gender>) -> FidelityReport {
    let src: BTreeSet<&String> = source.tumor_frequencies.keys().collect();
    let syn: BTreeSet<&String> = synthetic.tumor_frequencies.keys().collect();
    let mut discrepancies = Vec::new();
    for k in src.symmetric_difference(&syn) {
        discrepancies.push(Discrepancy {
            icd10: k.to_string(),
            present_in: if src.contains(k) { "source" } else { "synthetic" }.into(),
        });
    }
    let mut localizations = Vec::new();
    for k in src.intersection(&syn) {
        let k = k.as_str();
        let (fs, fy) = (source.tumor_frequencies[k], synthetic.tumor_frequencies[k]);
        let (as_, ay) = (source.age[k].box_stats.clone(), synthetic.age[k].box_stats.clone());
        let (ss, sy) = (&source.survival[k], &synthetic.survival[k]);
        let survival_mean_rel_diff = match (&ss.box_stats, &sy.box_stats) {
            (Some(a), Some(b)) => Some(rel(a.mean, b.mean)),
            _ => None,
        };
        let (ps, py) = (&source.pathways[k], &synthetic.pathways[k]);
        let ops: BTreeSet<&String> = ps.keys().chain(py.keys()).collect();
        let pathways = ops
            .into_iter()
            .map(|o| {
                (
                    o.clone(),
                    Pair {
                        source: ps.get(o).copied().unwrap_or(0.0),
                        synthetic: py.get(o).copied().unwrap_or(0.0),
                    },
                )
            })
            .collect();
        localizations.push(LocalizationComparison {
            icd10: k.to_string(),
            frequency: Pair {
                source: fs,
                synthetic: fy,
            },
            frequency_diff_pp: (fy - fs) * 100.0,
            age_mean_rel_diff: rel(as_.mean, ay.mean),
            age: Pair {
                source: as_,
                synthetic: ay,
            },
            survival: Pair {
                source: ss.box_stats.clone(),
                synthetic: sy.box_stats.clone(),
            },
            survival_mean_rel_diff,
            km: Pair {
                source: ss.curve.clone(),
                synthetic: sy.curve.clone(),
            },
            pathways,
        });
    }
    let max_frequency_deviation_pp = localizations.iter().map(|l| l.frequency_diff_pp.abs()).fold(0.0, f64::max);
    let flagged = localizations
        .iter()
        .filter(|l| l.frequency_diff_pp.abs() > FLAG_THRESHOLD_PP)
        .map(|l| l.icd10.clone())
        .collect();
    FidelityReport {
        cases: Pair {
            source: source.cases,
            synthetic: synthetic.cases,
        },
        gender,
        localizations,
        max_frequency_deviation_pp,
        flagged,
        discrepancies,
    }
}

impl FidelityReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serialize");
        s.push('\n');
        s
    }

    pub fn render_text(&self) -> String {
        let mut s = String::new();
        let scope = self.gender.map_or("all genders".to_string(), |g| g.label().to_string());
        let _ = writeln!(
            s,
            "Fidelity report ({scope}): {} source cases, {} synthetic cases",
            self.cases.source, self.cases.synthetic
        );
        let _ = writeln!(
            s,
            "{:<7} {:>8} {:>8} {:>7} | {:>6} {:>6} {:>7} | {:>7} {:>7} {:>7} | {:>6} {:>6}",
            "icd10", "freq src", "freq syn", "diff pp", "age src", "age syn", "rel", "surv src", "surv syn", "rel", "out src", "out syn"
        );
        for l in &self.localizations {
            let surv = |b: &Option<BoxStats>| b.as_ref().map_or("-".to_string(), |b| format!("{:.0}", b.mean));
            let out = |b: &Option<BoxStats>| b.as_ref().map_or("-".to_string(), |b| format!("{:.1}%", 100.0 * b.outlier_fraction));
            let _ = writeln!(
                s,
                "{:<7} {:>7.2}% {:>7.2}% {:>+7.2} | {:>6.1} {:>6.1} {:>+6.1}% | {:>7} {:>7} {:>7} | {:>6} {:>6}",
                l.icd10,
                100.0 * l.frequency.source,
                100.0 * l.frequency.synthetic,
                l.frequency_diff_pp,
                l.age.source.mean,
                l.age.synthetic.mean,
                100.0 * l.age_mean_rel_diff,
                surv(&l.survival.source),
                surv(&l.survival.synthetic),
                l.survival_mean_rel_diff.map_or("-".to_string(), |r| format!("{:+.1}%", 100.0 * r)),
                out(&l.survival.source),
                out(&l.survival.synthetic),
            );
        }
        let _ = writeln!(s, "largest frequency deviation: {:.2} pp", self.max_frequency_deviation_pp);
        if !self.flagged.is_empty() {
            let _ = writeln!(s, "deviation above {FLAG_THRESHOLD_PP} pp: {}", self.flagged.join(", "));
        }
        for d in &self.discrepancies {
            let _ = writeln!(s, "{} present in {} cohort only", d.icd10, d.present_in);
        }
        s
    }

    /// One delimiter-separated table per figure type.
    pub fn write_plot_tables(&self, dir: &Path) -> Result<(), EvalError> {
        std::fs::create_dir_all(dir)?;
        let table = |name: &str| -> Result<csv::Writer<std::fs::File>, EvalError> {
            Ok(csv::Writer::from_path(dir.join(name))?)
        };

        let mut w = table("frequencies.csv")?;
        w.write_record(["icd10", "source", "synthetic", "diff_pp"])?;
        for l in &self.localizations {
            w.write_record([&l.icd10, &l.frequency.source.to_string(), &l.frequency.synthetic.to_string(), &l.frequency_diff_pp.to_string()])?;
        }
        w.flush()?;

        let box_header = ["icd10", "cohort", "n", "mean", "std", "min", "q1", "median", "q3", "max", "lower_fence", "upper_fence", "outlier_fraction"];
        let box_row = |icd10: &str, cohort: &str, b: &BoxStats| {
            vec![
                icd10.to_string(),
                cohort.to_string(),
                b.n.to_string(),
                b.mean.to_string(),
                b.std.to_string(),
                b.min.to_string(),
                b.q1.to_string(),
                b.median.to_string(),
                b.q3.to_string(),
                b.max.to_string(),
                b.lower_fence.to_string(),
                b.upper_fence.to_string(),
                b.outlier_fraction.to_string(),
            ]
        };
        let mut w = table("age_box.csv")?;
        w.write_record(box_header)?;
        for l in &self.localizations {
            w.write_record(box_row(&l.icd10, "source", &l.age.source))?;
            w.write_record(box_row(&l.icd10, "synthetic", &l.age.synthetic))?;
        }
        w.flush()?;

        let mut w = table("survival_box.csv")?;
        w.write_record(box_header)?;
        for l in &self.localizations {
            for (cohort, b) in [("source", &l.survival.source), ("synthetic", &l.survival.synthetic)] {
                if let Some(b) = b {
                    w.write_record(box_row(&l.icd10, cohort, b))?;
                }
            }
        }
        w.flush()?;

        let mut w = table("km.csv")?;
        w.write_record(["icd10", "cohort", "time_days", "survival", "at_risk", "events", "censored"])?;
        for l in &self.localizations {
            for (cohort, c) in [("source", &l.km.source), ("synthetic", &l.km.synthetic)] {
                for p in &c.points {
                    w.write_record([
                        l.icd10.as_str(),
                        cohort,
                        &p.time.to_string(),
                        &p.survival.to_string(),
                        &p.at_risk.to_string(),
                        &p.events.to_string(),
                        &p.censored.to_string(),
                    ])?;
                }
            }
        }
        w.flush()?;

        let mut w = table("pathways.csv")?;
        w.write_record(["icd10", "ops", "source", "synthetic"])?;
        for l in &self.localizations {
            for (ops, p) in &l.pathways {
                w.write_record([&l.icd10, ops, &p.source.to_string(), &p.synthetic.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Age histograms need the raw stats; written separately from the report.
pub fn write_age_histograms<W: Write>(writer: W, source: &CohortStats, synthetic: &CohortStats) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["icd10", "cohort", "bin_lower", "bin_upper", "count"])?;
    for (cohort, stats) in [("source", source), ("synthetic", synthetic)] {
        for (icd10, a) in &stats.age {
            for b in &a.histogram {
                w.write_record([icd10.as_str(), cohort, &b.lower.to_string(), &b.upper.to_string(), &b.count.to_string()])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}
