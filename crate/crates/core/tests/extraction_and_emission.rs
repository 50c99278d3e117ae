use chrono::{Days, NaiveDate};
use proptest::prelude::*;

use oncosynth::extract::{extract, gaussian_fit, ExtractionResult, TimeUnit};
use oncosynth::gmf::{emit, GmfModule, Transition};
use oncosynth::obds::Gender;
use oncosynth::timeline::{CaseTimeline, EventKind, TimelineEvent};
use oncosynth_oracles::{brute_transitions, distributed_branches, enumerate_paths, fixtures, therapy_counts};

fn timeline(id: usize, steps: &[(EventKind, u64)]) -> CaseTimeline {
    let dx = NaiveDate::from_ymd_opt(2016, 3, 1).unwrap();
    let mut events = vec![TimelineEvent { kind: EventKind::Start, date: dx - Days::new(23_000) }];
    let mut last = dx;
    for (k, off) in steps {
        last = dx + Days::new(*off);
        events.push(TimelineEvent { kind: k.clone(), date: last });
    }
    events.push(TimelineEvent { kind: EventKind::End, date: last });
    CaseTimeline { patient_id: format!("P{id}"), gender: Gender::Male, events, age_at_diagnosis_days: 23_000 }
}

fn dx() -> EventKind {
    EventKind::Diagnosis("C71.2".into())
}

fn surgery() -> EventKind {
    EventKind::Surgery("5-015.0".into())
}

fn systemic() -> (EventKind, EventKind) {
    let s: std::collections::BTreeSet<String> = ["Temozolomid".to_string()].into();
    (EventKind::SystemicStart(s.clone()), EventKind::SystemicEnd(s))
}

/// 10 cases after diagnosis: 5 surgery, 4 systemic, 1 lost to follow-up.
fn ten_cases() -> Vec<CaseTimeline> {
    let (ys, ye) = systemic();
    (0..10)
        .map(|i| match i {
            0..=4 => timeline(i, &[(dx(), 0), (surgery(), 10 + i as u64)]),
            5..=8 => timeline(i, &[(dx(), 0), (ys.clone(), 20), (ye.clone(), 80)]),
            _ => timeline(i, &[(dx(), 0)]),
        })
        .collect()
}

fn assert_matches_oracle(timelines: &[CaseTimeline], r: &ExtractionResult) {
    let oracle = brute_transitions(timelines);
    assert_eq!(r.transitions.by_gender.len(), oracle.by_gender.len());
    for (g, rows) in &oracle.by_gender {
        let got = &r.transitions.by_gender[g];
        assert_eq!(got.len(), rows.len());
        for (from, row) in rows {
            let got_row = &got[from];
            assert_eq!(got_row.len(), row.len(), "{from}");
            for (to, s) in row {
                let x = got_row[to];
                assert_eq!(x.count, s.count, "{from} -> {to}");
                assert!((x.probability - s.probability).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn ten_case_branch_probabilities() {
    let ts = ten_cases();
    let r = extract(&ts).unwrap();
    assert_matches_oracle(&ts, &r);
    let (ys, _) = systemic();
    let t = &r.transitions;
    assert_eq!(t.by_kinds(Gender::Male, &dx(), &surgery()).unwrap().probability, 0.5);
    assert_eq!(t.by_kinds(Gender::Male, &dx(), &ys).unwrap().probability, 0.4);
    assert_eq!(t.by_kinds(Gender::Male, &dx(), &EventKind::End).unwrap().probability, 0.1);

    // read the emitted module back and find the 0.5 / 0.4 / 0.1 node
    let m = GmfModule::from_json(&emit(&r, "ten").unwrap().to_json()).unwrap();
    let mut branches: Vec<f64> = match &m.states["Diagnosis_C71_2_1"].transition {
        Some(Transition::Distributed(b)) => b.iter().map(|(p, _)| *p).collect(),
        other => panic!("{other:?}"),
    };
    branches.sort_by(f64::total_cmp);
    assert_eq!(branches, vec![0.1, 0.4, 0.5]);
}

#[test]
fn three_point_gaussian() {
    let f = gaussian_fit(&[60.0, 65.0, 70.0], TimeUnit::Years);
    assert_eq!((f.mean, f.std), (65.0, 5.0));
}

#[test]
fn two_therapy_paths_by_hand() {
    let (ys, ye) = systemic();
    let ts = vec![
        timeline(0, &[(dx(), 0), (surgery(), 10), (EventKind::Death, 300)]),
        timeline(1, &[(dx(), 0), (surgery(), 12), (ys.clone(), 40), (ye.clone(), 100)]),
        timeline(2, &[(dx(), 0)]),
    ];
    let m = emit(&extract(&ts).unwrap(), "two").unwrap();
    assert!(m.validate().is_empty());
    let paths = enumerate_paths(&m, 64).unwrap();
    let p = |names: &[&str]| names.iter().map(|s| s.to_string()).collect::<Vec<String>>();
    let head = ["Initial", "Localization_Male_1", "AgeDelay_C71_2_1", "Diagnosis_C71_2_1"];
    let with = |tail: &[&str]| p(&[&head[..], tail].concat());
    let mut expected = vec![
        p(&["Initial", "Terminal"]),
        with(&["Terminal"]),
        with(&["Delay_Surgery_5_015_0_1", "Surgery_5_015_0_1", "SurvivalDelay_1", "Death", "Terminal"]),
        with(&[
            "Delay_Surgery_5_015_0_1",
            "Surgery_5_015_0_1",
            "Delay_Systemic_Temozolomid_1",
            "Systemic_Temozolomid_1",
            "Delay_SystemicEnd_Temozolomid_1",
            "SystemicEnd_Temozolomid_1",
            "Terminal",
        ]),
    ];
    expected.sort();
    assert_eq!(paths, expected);
}

#[test]
fn duplicated_timelines_scale_counts() {
    let ts = fixtures::timelines(&fixtures::random_spec(3, 40));
    let doubled: Vec<_> = ts.iter().chain(ts.iter()).cloned().collect();
    let a = extract(&ts).unwrap();
    let b = extract(&doubled).unwrap();
    for (g, from, to, s) in a.transitions.iter() {
        let d = b.transitions.get(g, from, to).unwrap();
        assert_eq!(d.count, 2 * s.count);
        assert_eq!(d.probability, s.probability);
    }
    assert_eq!(a.diagnosis_probabilities, b.diagnosis_probabilities);
    for (g, edges) in &a.delays {
        for (edge, model) in edges {
            assert_eq!(b.delays[g][edge].sample_count(), 2 * model.sample_count());
        }
    }
}

fn check_module(r: &ExtractionResult) {
    let m = emit(r, "fixture").unwrap();
    let violations = m.validate();
    assert!(violations.is_empty(), "{violations:?}");
    assert_eq!(GmfModule::from_json(&m.to_json()).unwrap(), m);

    for path in enumerate_paths(&m, 64).unwrap() {
        let (s, y, x) = therapy_counts(&m, &path);
        assert!(s <= 1 && y <= 1 && x <= 1, "repeated therapy type on {path:?}");
        assert!(s + y + x <= 3);
    }

    // every distributed probability is an extraction value, bit for bit
    let mut emitted: Vec<u64> = distributed_branches(&m)
        .values()
        .flat_map(|v| {
            let sum: f64 = v.iter().sum();
            assert!((sum - 1.0).abs() <= 1e-9);
            v.iter().map(|p| p.to_bits()).collect::<Vec<_>>()
        })
        .collect();
    let mut extracted: Vec<u64> = r
        .transitions
        .by_gender
        .values()
        .flat_map(|rows| rows.values())
        .filter(|row| !(row.len() == 1 && row.values().next().unwrap().probability == 1.0))
        .flat_map(|row| row.values().map(|s| s.probability.to_bits()))
        .collect();
    emitted.sort();
    extracted.sort();
    assert_eq!(emitted, extracted);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn extract_equals_brute_force(index in 0u64..10_000, size in 1usize..=50) {
        let ts = fixtures::timelines(&fixtures::random_spec(index, size));
        let r = extract(&ts).unwrap();
        assert_matches_oracle(&ts, &r);
        prop_assert_eq!(ExtractionResult::from_json(&r.to_json()).unwrap(), r.clone());
        check_module(&r);
    }
}

#[test]
fn registry_scale_module_is_valid() {
    let r = extract(&fixtures::timelines(&fixtures::registry_scale_spec(11))).unwrap();
    check_module(&r);
}
