//! Slow, obviously-correct reference implementations for the test suites.
//!
//! Nothing here calls into the functions it checks; only data types are
//! shared. Keep inputs small.

use std::collections::BTreeMap;

pub mod fixtures;

use oncosynth::extract::{ChainState, Stage, TherapyProgress, TransitionStat, TransitionTable};
use oncosynth::gmf::{GmfModule, StateKind, Transition};
use oncosynth::obds::{Dataset, Gender, ReportPayload};
use oncosynth::privacy::{PrivacyPolicy, QuasiIdentifier};
use oncosynth::timeline::{CaseTimeline, EventKind};

/// Therapy progress after events `0..=upto`, recomputed from scratch.
fn progress_at(events: &[EventKind], upto: usize) -> TherapyProgress {
    let mut surgery = Stage::Pending;
    let mut systemic = Stage::Pending;
    let mut radio = Stage::Pending;
    for k in &events[..=upto] {
        if let EventKind::Surgery(_) = k {
            surgery = Stage::Done;
        }
        if let EventKind::SystemicStart(_) = k {
            systemic = Stage::Started;
        }
        if let EventKind::SystemicEnd(_) = k {
            systemic = Stage::Done;
        }
        if *k == EventKind::RadioStart {
            radio = Stage::Started;
        }
        if *k == EventKind::RadioEnd {
            radio = Stage::Done;
        }
    }
    TherapyProgress { surgery, systemic, radio }
}

/// Pairwise scan over every event pair of every timeline, counting the
/// pairs whose second index directly follows the first.
pub fn brute_transitions(timelines: &[CaseTimeline]) -> TransitionTable {
    let mut counts: Vec<(Gender, ChainState, ChainState, u64)> = Vec::new();
    for t in timelines {
        let kinds: Vec<EventKind> = t.events.iter().map(|e| e.kind.clone()).collect();
        for i in 0..kinds.len() {
            for j in 0..kinds.len() {
                if j != i + 1 {
                    continue;
                }
                let from = ChainState {
                    kind: kinds[i].clone(),
                    progress: progress_at(&kinds, i),
                };
                let to = ChainState {
                    kind: kinds[j].clone(),
                    progress: progress_at(&kinds, j),
                };
                match counts.iter_mut().find(|c| c.0 == t.gender && c.1 == from && c.2 == to) {
                    Some(c) => c.3 += 1,
                    None => counts.push((t.gender, from, to, 1)),
                }
            }
        }
    }
    let mut table = TransitionTable::default();
    for (g, from, to, n) in &counts {
        let mut total = 0u64;
        for (g2, f2, _, m) in &counts {
            if g2 == g && f2 == from {
                total += m;
            }
        }
        table
            .by_gender
            .entry(*g)
            .or_default()
            .entry(from.clone())
            .or_default()
            .insert(
                to.clone(),
                TransitionStat {
                    count: *n,
                    probability: *n as f64 / total as f64,
                },
            );
    }
    table
}

/// Nested-loop quasi-identifier grouping over diagnosed, non-excluded patients.
pub fn brute_groups(dataset: &Dataset, policy: &PrivacyPolicy) -> Vec<(Vec<String>, usize)> {
    let mut groups: Vec<(Vec<String>, usize)> = Vec::new();
    for p in &dataset.patients {
        let mut icd10 = None;
        let mut dead = false;
        for r in &dataset.reports {
            if r.patient_id != p.patient_id {
                continue;
            }
            match &r.payload {
                ReportPayload::Diagnosis { icd10: c } => icd10 = Some(c.clone()),
                ReportPayload::Death => dead = true,
                _ => {}
            }
        }
        let Some(icd10) = icd10 else { continue };
        if policy.excluded_localizations.iter().any(|e| *e == icd10) {
            continue;
        }
        let mut key = Vec::new();
        for q in &policy.quasi_identifiers {
            key.push(match q {
                QuasiIdentifier::Gender => match p.gender {
                    Gender::Male => "male".to_string(),
                    Gender::Female => "female".to_string(),
                },
                QuasiIdentifier::Icd10Localization => icd10.clone(),
                QuasiIdentifier::DeceasedFlag => if dead { "true" } else { "false" }.to_string(),
            });
        }
        let mut found = false;
        for g in groups.iter_mut() {
            if g.0 == key {
                g.1 += 1;
                found = true;
            }
        }
        if !found {
            groups.push((key, 1));
        }
    }
    groups.sort();
    groups
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrderStats {
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub lower_fence: f64,
    pub upper_fence: f64,
    pub outlier_fraction: f64,
}

fn insertion_sort(v: &mut [f64]) {
    for i in 1..v.len() {
        let mut j = i;
        while j > 0 && v[j - 1] > v[j] {
            v.swap(j - 1, j);
            j -= 1;
        }
    }
}

/// Quartiles by linear interpolation between the closest ranks, Tukey fences.
pub fn order_stats(values: &[f64]) -> OrderStats {
    let mut v = values.to_vec();
    insertion_sort(&mut v);
    let n = v.len();
    let at = |p: f64| {
        let h = (n - 1) as f64 * p;
        let k = h.floor() as usize;
        if k + 1 >= n {
            return v[n - 1];
        }
        v[k] + (h - k as f64) * (v[k + 1] - v[k])
    };
    let (q1, median, q3) = (at(0.25), at(0.5), at(0.75));
    let lower_fence = q1 - 1.5 * (q3 - q1);
    let upper_fence = q3 + 1.5 * (q3 - q1);
    let mut out = 0;
    for x in &v {
        if *x < lower_fence || *x > upper_fence {
            out += 1;
        }
    }
    OrderStats {
        q1,
        median,
        q3,
        lower_fence,
        upper_fence,
        outlier_fraction: out as f64 / n as f64,
    }
}

/// Product-limit survival value after each distinct death time.
pub fn product_limit(observations: &[(i64, bool)]) -> Vec<(i64, f64)> {
    let mut death_times: Vec<i64> = Vec::new();
    for (t, died) in observations {
        if *died && !death_times.contains(t) {
            death_times.push(*t);
        }
    }
    death_times.sort();
    let mut s = 1.0;
    let mut out = Vec::new();
    for t in death_times {
        let at_risk = observations.iter().filter(|(u, _)| *u >= t).count();
        let deaths = observations.iter().filter(|(u, d)| *u == t && *d).count();
        s *= 1.0 - deaths as f64 / at_risk as f64;
        out.push((t, s));
    }
    out
}

#[derive(Debug, PartialEq)]
pub enum PathError {
    NoInitial,
    DepthExceeded(usize),
    MissingState(String),
}

/// Every Initial-to-Terminal state sequence, exploring all branches.
pub fn enumerate_paths(module: &GmfModule, max_depth: usize) -> Result<Vec<Vec<String>>, PathError> {
    let initial = module
        .states
        .iter()
        .find(|(_, s)| matches!(s.kind, StateKind::Initial))
        .map(|(n, _)| n.clone())
        .ok_or(PathError::NoInitial)?;
    let mut paths = Vec::new();
    let mut stack = vec![vec![initial]];
    while let Some(path) = stack.pop() {
        if path.len() > max_depth {
            return Err(PathError::DepthExceeded(max_depth));
        }
        let name = path.last().unwrap();
        let state = module.states.get(name).ok_or_else(|| PathError::MissingState(name.clone()))?;
        let next: Vec<String> = match &state.transition {
            None => {
                paths.push(path);
                continue;
            }
            Some(Transition::Direct(t)) => vec![t.clone()],
            Some(Transition::Distributed(b)) => b.iter().map(|(_, t)| t.clone()).collect(),
            Some(Transition::Conditional(b)) => b.iter().map(|(_, t)| t.clone()).collect(),
        };
        for t in next {
            let mut p = path.clone();
            p.push(t);
            stack.push(p);
        }
    }
    paths.sort();
    Ok(paths)
}

/// (surgeries, systemic starts, radiotherapy starts) along a path.
pub fn therapy_counts(module: &GmfModule, path: &[String]) -> (usize, usize, usize) {
    let (mut s, mut y, mut r) = (0, 0, 0);
    for name in path {
        match &module.states[name].kind {
            StateKind::Procedure(c) if c.system == "OPS" => s += 1,
            StateKind::Procedure(_) => r += 1,
            StateKind::MedicationOrder(_) => y += 1,
            _ => {}
        }
    }
    (s, y, r)
}

/// Distributed-transition probabilities of every state, by state name.
pub fn distributed_branches(module: &GmfModule) -> BTreeMap<String, Vec<f64>> {
    let mut out = BTreeMap::new();
    for (name, s) in &module.states {
        if let Some(Transition::Distributed(b)) = &s.transition {
            out.insert(name.clone(), b.iter().map(|(p, _)| *p).collect());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::{Days, NaiveDate};
    use oncosynth::gmf::{GmfState, ModuleMetadata};
    use oncosynth::timeline::TimelineEvent;

    fn timeline(kinds: &[EventKind]) -> CaseTimeline {
        let d = NaiveDate::from_ymd_opt(2000, 1, 1).unwrap();
        CaseTimeline {
            patient_id: "P".into(),
            gender: Gender::Female,
            age_at_diagnosis_days: 0,
            events: kinds
                .iter()
                .enumerate()
                .map(|(i, k)| TimelineEvent {
                    kind: k.clone(),
                    date: d + Days::new(i as u64),
                })
                .collect(),
        }
    }

    #[test]
    fn start_end_only() {
        let t = brute_transitions(&[timeline(&[EventKind::Start, EventKind::End])]);
        let rows = &t.by_gender[&Gender::Female];
        assert_eq!(rows.len(), 1);
        let (to, stat) = rows.values().next().unwrap().iter().next().unwrap();
        assert_eq!(to.kind, EventKind::End);
        assert_eq!(stat.count, 1);
    }

    #[test]
    fn duplicates_double_counts() {
        let a = timeline(&[EventKind::Start, EventKind::Diagnosis("C71.2".into()), EventKind::End]);
        let one = brute_transitions(std::slice::from_ref(&a));
        let two = brute_transitions(&[a.clone(), a]);
        for (g, rows) in &two.by_gender {
            for (from, row) in rows {
                for (to, s) in row {
                    let o = one.by_gender[g][from][to];
                    assert_eq!(s.count, 2 * o.count);
                    assert_eq!(s.probability, o.probability);
                }
            }
        }
    }

    #[test]
    fn product_limit_by_hand() {
        let s = product_limit(&[(50, true), (60, false), (120, true), (130, false), (200, false)]);
        assert_eq!(s.len(), 2);
        assert!((s[0].1 - 0.8).abs() < 1e-15);
        assert!((s[1].1 - 8.0 / 15.0).abs() < 1e-15);
    }

    #[test]
    fn order_stats_small() {
        let o = order_stats(&[66.0, 60.0, 68.0, 62.0, 64.0]);
        assert_eq!((o.q1, o.median, o.q3), (62.0, 64.0, 66.0));
    }

    fn module(states: Vec<(&str, StateKind, Option<Transition>)>) -> GmfModule {
        GmfModule {
            name: "t".into(),
            states: states.into_iter().map(|(n, kind, transition)| (n.to_string(), GmfState { kind, transition })).collect(),
            metadata: ModuleMetadata {
                generator: "t".into(),
                generator_version: "0".into(),
                source_digest: None,
                seed_independent: true,
                source_timelines: 0,
                config_digest: None,
                seed: None,
            },
        }
    }

    #[test]
    fn three_way_split_has_three_paths() {
        let m = module(vec![
            (
                "Initial",
                StateKind::Initial,
                Some(Transition::Distributed(vec![(0.5, "A".into()), (0.4, "B".into()), (0.1, "Terminal".into())])),
            ),
            ("A", StateKind::Simple, Some(Transition::Direct("Terminal".into()))),
            ("B", StateKind::Simple, Some(Transition::Direct("Terminal".into()))),
            ("Terminal", StateKind::Terminal, None),
        ]);
        assert_eq!(enumerate_paths(&m, 10).unwrap().len(), 3);
    }

    #[test]
    fn cycle_exceeds_depth() {
        let m = module(vec![
            ("Initial", StateKind::Initial, Some(Transition::Direct("A".into()))),
            ("A", StateKind::Simple, Some(Transition::Distributed(vec![(0.5, "A".into()), (0.5, "Terminal".into())]))),
            ("Terminal", StateKind::Terminal, None),
        ]);
        assert_eq!(enumerate_paths(&m, 20), Err(PathError::DepthExceeded(20)));
    }
}
