mod common;

use common::{fuzz, smoothing};
use proptest::prelude::*;
use rand::Rng;
use softood::data::{
    load_dataset, write_dataset, Dataset, DatasetManifest, Example, IntentSpace, Label, Provenance, SplitCounts,
    FORMAT_VERSION,
};
use softood::eval::{confusion, metrics, ConfusionMatrix};
use softood::rng::seeded;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn every_label_and_prediction_is_a_distribution(seed in any::<u64>()) {
        let violations = fuzz::distribution_case(seed);
        prop_assert!(violations.is_empty(), "{:?}", violations);
    }

    #[test]
    fn smoothed_label_minimizes_the_quadratic_objective(seed in any::<u64>()) {
        let inst = smoothing::instance(seed);
        prop_assert!(inst.gap <= 1e-6, "gap {} (k={}, nodes={}, τ={}, α={})", inst.gap, inst.k, inst.nodes, inst.tau, inst.alpha);
    }
}

fn random_matrix(rng: &mut rand_chacha::ChaCha8Rng) -> ConfusionMatrix {
    let c = rng.random_range(2..8);
    let counts = (0..c)
        .map(|_| (0..c).map(|_| if rng.random_bool(0.2) { 0 } else { rng.random_range(0..50) }).collect())
        .collect();
    ConfusionMatrix::from_counts(counts).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn macro_f1_decomposes(seed in any::<u64>()) {
        let m = random_matrix(&mut seeded(seed, 1));
        let r = metrics(&m);
        let k = m.num_classes() - 1;
        let composed = (k as f64 * r.f1_ind + r.f1_ood) / (k + 1) as f64;
        prop_assert!((r.f1_all - composed).abs() <= 1e-12);
    }

    #[test]
    fn micro_f1_is_accuracy(seed in any::<u64>()) {
        let m = random_matrix(&mut seeded(seed, 2));
        let r = metrics(&m);
        prop_assert!((r.micro_f1_all - r.acc_all).abs() <= 1e-12);
    }

    #[test]
    fn confusion_counts_every_pair(golds in prop::collection::vec(0usize..4, 1..60), shift in 0usize..4) {
        let preds: Vec<usize> = golds.iter().map(|g| (g + shift) % 4).collect();
        let m = confusion(&golds, &preds, 3).unwrap();
        prop_assert_eq!(m.total(), golds.len() as u64);
        let expected_trace = if shift == 0 { golds.len() as u64 } else { 0 };
        prop_assert_eq!(m.trace(), expected_trace);
    }
}

fn feature_value() -> impl Strategy<Value = f64> {
    prop_oneof![
        -1e3..1e3f64,
        prop::num::f64::NORMAL,
        prop::num::f64::SUBNORMAL,
        Just(0.0),
        Just(-0.0),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dataset_round_trips_bit_exactly(
        rows in prop::collection::vec((prop::collection::vec(feature_value(), 3), 0usize..5, any::<bool>()), 1..30),
    ) {
        let k = 3;
        let space = IntentSpace::new((0..k).map(|i| format!("c{i}")).collect()).unwrap();
        let examples: Vec<Example> = rows
            .iter()
            .enumerate()
            .map(|(i, (features, kind, text))| {
                let (label, provenance) = match kind {
                    0..=2 => (Label::Ind(*kind), Provenance::Ind),
                    3 => (Label::Ood, Provenance::Test),
                    _ => (Label::Pseudo, Provenance::PseudoOs),
                };
                Example {
                    id: format!("ex-{i}"),
                    features: features.clone(),
                    label,
                    provenance,
                    text: text.then(|| format!("utterance \"{i}\" ✓")),
                }
            })
            .collect();
        let ds = Dataset { space: space.clone(), feature_dim: 3, examples };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("split.jsonl");
        write_dataset(&path, &ds).unwrap();
        let manifest = DatasetManifest {
            name: "roundtrip".into(),
            feature_dim: 3,
            classes: space.ind_names().to_vec(),
            counts: SplitCounts { train: ds.len(), valid: 0, test: 0 },
            seed: None,
            format_version: FORMAT_VERSION,
        };
        let back = load_dataset(&path, &manifest, Some(ds.len())).unwrap();
        prop_assert_eq!(back.examples.len(), ds.examples.len());
        for (a, b) in back.examples.iter().zip(&ds.examples) {
            prop_assert_eq!(&a.id, &b.id);
            prop_assert_eq!(a.label, b.label);
            prop_assert_eq!(a.provenance, b.provenance);
            prop_assert_eq!(&a.text, &b.text);
            let abits: Vec<u64> = a.features.iter().map(|v| v.to_bits()).collect();
            let bbits: Vec<u64> = b.features.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(abits, bbits);
        }
        let again = dir.path().join("again.jsonl");
        write_dataset(&again, &ds).unwrap();
        prop_assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
    }
}
