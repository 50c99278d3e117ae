//! Seeded ground-truth cohorts for property and acceptance tests.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use oncosynth::cohort::{
    generate_ground_truth, AgeParams, AgeShape, GroundTruthSpec, MenuStep, MenuTransition, PerGender, SurgeryOption,
    SystemicOption, TherapyMenu, TherapyType,
};
use oncosynth::timeline::{build_timelines, CaseTimeline};

pub const LOCALIZATIONS: [&str; 10] = [
    "C71.0", "C71.1", "C71.2", "C71.3", "C71.4", "C71.5", "C71.6", "C71.7", "C71.8", "C71.9",
];

const OPS: [&str; 12] = [
    "5-010.0", "5-010.2", "5-013.1", "5-015.0", "5-015.1", "5-015.3", "5-015.4", "5-016.0", "5-021.0", "5-022.0",
    "5-023.0", "5-024.0",
];

const SUBSTANCES: [&str; 8] = [
    "Temozolomid", "Lomustin", "Procarbazin", "Vincristin", "Bevacizumab", "Carboplatin", "Etoposid", "Irinotecan",
];

const STEPS: [MenuStep; 4] = [MenuStep::Diagnosis, MenuStep::Surgery, MenuStep::Systemic, MenuStep::Radio];
const THERAPIES: [TherapyType; 3] = [TherapyType::Surgery, TherapyType::Systemic, TherapyType::Radio];

fn weights(rng: &mut ChaCha8Rng, keys: &[&str]) -> BTreeMap<String, f64> {
    let w: Vec<f64> = keys.iter().map(|_| rng.random_range(0.05..1.0)).collect();
    let total: f64 = w.iter().sum();
    keys.iter().zip(w).map(|(k, w)| (k.to_string(), w / total)).collect()
}

fn menu(rng: &mut ChaCha8Rng, n_ops: usize, n_systemic: usize) -> TherapyMenu {
    let mut transitions = Vec::new();
    for from in STEPS {
        let mut left = 0.95;
        for to in THERAPIES {
            if MenuStep::from(to) == from || !rng.random_bool(0.7) {
                continue;
            }
            let p = rng.random_range(0.0..left);
            left -= p;
            let lo = rng.random_range(0..40);
            transitions.push(MenuTransition {
                from,
                to,
                probability: p,
                delay_days: [lo, lo + rng.random_range(0..60)],
            });
        }
    }
    let surgeries = OPS[..n_ops]
        .iter()
        .map(|o| SurgeryOption {
            ops: o.to_string(),
            weight: rng.random_range(0.1..1.0),
        })
        .collect();
    let mut systemic = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    while systemic.len() < n_systemic {
        let k = 1 + rng.random_range(0..3usize);
        let mut set: Vec<String> = (0..k).map(|_| SUBSTANCES[rng.random_range(0..SUBSTANCES.len())].to_string()).collect();
        set.sort();
        set.dedup();
        if seen.insert(set.clone()) {
            let lo = rng.random_range(20..120);
            systemic.push(SystemicOption {
                substances: set,
                weight: rng.random_range(0.1..1.0),
                duration_days: [lo, lo + rng.random_range(0..100)],
            });
        }
    }
    TherapyMenu {
        transitions,
        surgeries,
        systemic,
        radio_duration_days: Some([30, 45]),
    }
}

/// A small random cohort spec; `index` selects it.
pub fn random_spec(index: u64, cohort_size: usize) -> GroundTruthSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(0xf1c5 ^ index);
    let n_loc = rng.random_range(1..=4);
    let locs: Vec<&str> = LOCALIZATIONS[..n_loc].to_vec();
    let survival = locs.iter().map(|l| (l.to_string(), rng.random_range(50.0..800.0))).collect();
    let n_ops = rng.random_range(1..=3);
    let n_sys = rng.random_range(1..=3);
    GroundTruthSpec {
        cohort_size,
        seed: index,
        male_fraction: rng.random_range(0.2..0.8),
        diagnosis_years: [2012, 2018],
        age_shape: AgeShape::Gaussian,
        localizations: PerGender {
            male: weights(&mut rng, &locs),
            female: weights(&mut rng, &locs),
        },
        age: PerGender {
            male: AgeParams { mean: 60.0, std: 10.0 },
            female: AgeParams { mean: 64.0, std: 11.0 },
        },
        survival_mean_days: survival,
        death_probability: rng.random_range(0.5..1.0),
        therapy: menu(&mut rng, n_ops, n_sys),
    }
}

/// Roughly the size and therapy variety of a state-wide brain tumour cohort:
/// 1,441 cases, 10 localizations, 12 OPS codes, 18 substance combinations.
pub fn registry_scale_spec(seed: u64) -> GroundTruthSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let survival = LOCALIZATIONS.iter().map(|l| (l.to_string(), rng.random_range(200.0..900.0))).collect();
    let mut therapy = menu(&mut rng, OPS.len(), 18);
    // every therapy type reachable from every step
    therapy.transitions.clear();
    for from in STEPS {
        for to in THERAPIES {
            if MenuStep::from(to) != from {
                therapy.transitions.push(MenuTransition {
                    from,
                    to,
                    probability: if from == MenuStep::Diagnosis { 0.3 } else { 0.25 },
                    delay_days: [7, 60],
                });
            }
        }
    }
    GroundTruthSpec {
        cohort_size: 1_441,
        seed,
        male_fraction: 0.55,
        diagnosis_years: [2010, 2019],
        age_shape: AgeShape::Gaussian,
        localizations: PerGender {
            male: weights(&mut rng, &LOCALIZATIONS),
            female: weights(&mut rng, &LOCALIZATIONS),
        },
        age: PerGender {
            male: AgeParams { mean: 60.0, std: 14.0 },
            female: AgeParams { mean: 62.0, std: 15.0 },
        },
        survival_mean_days: survival,
        death_probability: 0.8,
        therapy,
    }
}

pub fn timelines(spec: &GroundTruthSpec) -> Vec<CaseTimeline> {
    let (_, ds) = generate_ground_truth(spec).expect("valid fixture spec");
    build_timelines(&ds).expect("consistent fixture").timelines
}
