//! Retrieval metrics against a brute-force oracle, file-format round trips
//! and synthetic data sanity.

mod common;

use std::path::Path;

use common::{brute_metrics, random_checkpoint, random_dataset, random_metric_instance};
use proptest::prelude::*;
use ugfuse::dataio::{codec, generate, SyntheticSpec};
use ugfuse::evalkit::{evaluate, evaluate_distances, LabeledFeatures, Metric};
use ugfuse::numerics::seeded_rng;
use ugfuse::objective::Checkpoint;
use ugfuse::{Error, Exec, Modality};

#[test]
fn metrics_match_brute_force_on_500_instances() {
    let mut rng = seeded_rng(2024, 0);
    let mut checked = 0;
    for _ in 0..500 {
        let x = random_metric_instance(&mut rng);
        let got = evaluate_distances(
            &x.dist,
            &x.query_labels,
            &x.query_ids,
            &x.gallery_labels,
            &x.gallery_ids,
        );
        let Some(want) = brute_metrics(&x) else {
            assert!(got.is_err());
            continue;
        };
        let got = got.unwrap();
        assert_eq!(got.invalid_queries, want.invalid);
        assert_eq!(got.ap.len(), want.ap.len());
        for (a, b) in got.ap.iter().zip(&want.ap) {
            assert!((a - b).abs() <= 1e-12);
        }
        for (a, b) in got.cmc.iter().zip(&want.cmc) {
            assert!((a - b).abs() <= 1e-12);
        }
        let map = want.ap.iter().sum::<f64>() / want.ap.len() as f64;
        assert!((got.map - map).abs() <= 1e-12);
        checked += 1;
    }
    assert!(checked > 400);
}

fn features(
    rng: &mut ugfuse::numerics::RngStream,
    count: usize,
    d: usize,
    ids: usize,
) -> LabeledFeatures {
    LabeledFeatures {
        features: (0..count)
            .map(|_| (0..d).map(|_| rng.normal()).collect())
            .collect(),
        labels: (0..count).map(|i| i % ids).collect(),
        ids: (0..count as u64).map(|i| i + 10_000 * d as u64).collect(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gallery_permutation_and_translation_leave_metrics_unchanged(
        seed in any::<u64>(),
        shift in prop::collection::vec(-5.0f64..5.0, 4),
    ) {
        let mut rng = seeded_rng(seed, 0);
        let q = features(&mut rng, 6, 4, 3);
        let mut g = features(&mut rng, 15, 4, 3);
        g.ids.iter_mut().for_each(|i| *i += 1);
        let base = evaluate(&q, &g, Metric::Euclidean, Exec::Sequential).unwrap();

        // Continuous draws make ties a null event, so any order is allowed.
        let mut order: Vec<usize> = (0..g.len()).collect();
        rng.shuffle(&mut order);
        let permuted = LabeledFeatures {
            features: order.iter().map(|&i| g.features[i].clone()).collect(),
            labels: order.iter().map(|&i| g.labels[i]).collect(),
            ids: order.iter().map(|&i| g.ids[i]).collect(),
        };
        let p = evaluate(&q, &permuted, Metric::Euclidean, Exec::Sequential).unwrap();
        prop_assert!((p.map - base.map).abs() < 1e-12);
        prop_assert_eq!(&p.cmc, &base.cmc);

        let move_all = |f: &LabeledFeatures| LabeledFeatures {
            features: f
                .features
                .iter()
                .map(|v| v.iter().zip(&shift).map(|(a, b)| a + b).collect())
                .collect(),
            ..f.clone()
        };
        let t = evaluate(&move_all(&q), &move_all(&g), Metric::Euclidean, Exec::Sequential).unwrap();
        prop_assert!((t.map - base.map).abs() < 1e-9);
        prop_assert_eq!(&t.cmc, &base.cmc);
    }

    #[test]
    fn feature_file_round_trips(seed in any::<u64>()) {
        let ds = random_dataset(&mut seeded_rng(seed, 1));
        let bytes = codec::encode(&ds).unwrap();
        prop_assert_eq!(codec::decode(&bytes, Path::new("mem")).unwrap(), ds);
    }

    #[test]
    fn checkpoint_file_round_trips(seed in any::<u64>()) {
        let ck = random_checkpoint(&mut seeded_rng(seed, 2));
        let bytes = ck.encode();
        let back = Checkpoint::decode(&bytes, Path::new("mem")).unwrap();
        prop_assert_eq!(back.encode(), bytes);
        prop_assert_eq!(back, ck);
    }
}

#[test]
fn every_strict_prefix_is_rejected() {
    let mut rng = seeded_rng(5, 3);
    let ds = random_dataset(&mut rng);
    let ck = random_checkpoint(&mut rng);
    let uggf = codec::encode(&ds).unwrap();
    let uggc = ck.encode();
    for len in 0..uggf.len() {
        let err = codec::decode(&uggf[..len], Path::new("f.uggf")).unwrap_err();
        assert!(matches!(err, Error::Truncated { .. }), "{len}: {err}");
    }
    for len in 0..uggc.len() {
        let err = Checkpoint::decode(&uggc[..len], Path::new("c.uggc")).unwrap_err();
        assert!(
            matches!(err, Error::Truncated { .. } | Error::Malformed { .. }),
            "{len}: {err}"
        );
    }
    let mut bad = uggf.clone();
    bad[0] = b'X';
    assert!(matches!(
        codec::decode(&bad, Path::new("f.uggf")),
        Err(Error::BadMagic { .. })
    ));
    let mut bad = uggc.clone();
    bad[3] = b'F';
    assert!(matches!(
        Checkpoint::decode(&bad, Path::new("c.uggc")),
        Err(Error::BadMagic { .. })
    ));
}

#[test]
fn clean_class_tokens_are_separable() {
    let ds = generate(&SyntheticSpec {
        patch_noise: 0.0,
        n: 16,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let class_token = |s: &ugfuse::dataio::Sample| -> Vec<f64> {
        Modality::ALL
            .iter()
            .flat_map(|m| s.tokens[m.index()].row(0).to_vec())
            .collect()
    };
    let ids = ds.samples.iter().map(|s| s.label).max().unwrap() + 1;
    let width = 3 * ds.d;
    let mut proto = vec![vec![0.0; width]; ids];
    let mut count = vec![0.0; ids];
    for s in &ds.samples {
        for (p, v) in proto[s.label].iter_mut().zip(class_token(s)) {
            *p += v;
        }
        count[s.label] += 1.0;
    }
    for (p, c) in proto.iter_mut().zip(&count) {
        p.iter_mut().for_each(|v| *v /= c);
    }
    for s in &ds.samples {
        let x = class_token(s);
        let nearest = (0..ids)
            .min_by(|&a, &b| {
                let da: f64 = x.iter().zip(&proto[a]).map(|(u, v)| (u - v).powi(2)).sum();
                let db: f64 = x.iter().zip(&proto[b]).map(|(u, v)| (u - v).powi(2)).sum();
                da.total_cmp(&db)
            })
            .unwrap();
        assert_eq!(nearest, s.label, "sample {}", s.id);
    }
}
