mod support;

use maskrank::eval::{
    average_precision, evaluate_multi_query, evaluate_single_query, FeatureSet, Pooling,
};
use maskrank::sampler::seeded_rng;
use maskrank::verify::random_unit;
use rand::Rng;
use support::brute_force_eval;

fn random_set(
    rng: &mut maskrank::sampler::SeededRng,
    n: usize,
    palette: &[Vec<f64>],
    ids: usize,
) -> FeatureSet {
    let rows = (0..n)
        .map(|_| palette[rng.random_range(0..palette.len())].clone())
        .collect();
    let id = (0..n)
        .map(|_| rng.random_range(0..ids).to_string())
        .collect();
    let cam = (0..n).map(|_| rng.random_range(0..2).to_string()).collect();
    FeatureSet::from_rows(rows, id, cam).unwrap()
}

#[test]
fn single_query_equals_brute_force() {
    let mut rng = seeded_rng(201);
    let mut compared = 0;
    for _ in 0..1000 {
        let palette: Vec<Vec<f64>> = (0..rng.random_range(2..=6))
            .map(|_| random_unit(&mut rng, 4))
            .collect();
        let g = rng.random_range(1..=10);
        let q = rng.random_range(1..=6);
        let ids = rng.random_range(1..=4);
        let gallery = random_set(&mut rng, g, &palette, ids);
        let queries = random_set(&mut rng, q, &palette, ids);
        let (cmc, map, skipped) = brute_force_eval(&queries, &gallery);
        match evaluate_single_query(&queries, &gallery) {
            Ok(r) => {
                assert_eq!(r.cmc.len(), g);
                assert_eq!(r.skipped, skipped);
                assert!((r.map - map).abs() < 1e-12, "{} vs {map}", r.map);
                for (a, b) in r.cmc.iter().zip(&cmc) {
                    assert!((a - b).abs() < 1e-12);
                }
                compared += 1;
            }
            Err(_) => assert_eq!(skipped, q),
        }
    }
    assert!(compared > 500);
}

#[test]
fn ap_of_hits_at_one_and_three() {
    assert!((average_precision(&[1, 3]) - 0.8333333333333334).abs() < 1e-10);
    assert!((average_precision(&[1, 3]) - 5.0 / 6.0).abs() < 1e-10);
}

#[test]
fn self_retrieval_across_cameras_is_perfect() {
    let mut rng = seeded_rng(202);
    let rows: Vec<Vec<f64>> = (0..12).map(|_| random_unit(&mut rng, 16)).collect();
    let ids: Vec<String> = (0..12).map(|i| format!("p{i}")).collect();
    let queries = FeatureSet::from_rows(rows.clone(), ids.clone(), vec!["a".into(); 12]).unwrap();
    let gallery = FeatureSet::from_rows(rows, ids, vec!["b".into(); 12]).unwrap();
    let r = evaluate_single_query(&queries, &gallery).unwrap();
    assert_eq!((r.rank(1), r.map), (1.0, 1.0));
}

#[test]
fn multi_query_of_singletons_equals_single() {
    let mut rng = seeded_rng(203);
    let rows: Vec<Vec<f64>> = (0..20).map(|_| random_unit(&mut rng, 8)).collect();
    let ids: Vec<String> = (0..20).map(|i| (i % 5).to_string()).collect();
    let cams: Vec<String> = (0..20).map(|i| (i / 5).to_string()).collect();
    let gallery = FeatureSet::from_rows(
        rows[..12].to_vec(),
        ids[..12].to_vec(),
        vec!["g".into(); 12],
    )
    .unwrap();
    let queries = FeatureSet::from_rows(
        rows[12..17].to_vec(),
        ids[12..17].to_vec(),
        cams[12..17].to_vec(),
    )
    .unwrap();
    let single = evaluate_single_query(&queries, &gallery).unwrap();
    for pooling in [Pooling::Mean, Pooling::Max] {
        assert_eq!(
            evaluate_multi_query(&queries, &gallery, pooling).unwrap(),
            single
        );
    }
}

#[test]
fn gallery_order_does_not_change_scores() {
    let mut rng = seeded_rng(204);
    for _ in 0..200 {
        let rows: Vec<Vec<f64>> = (0..9).map(|_| random_unit(&mut rng, 5)).collect();
        let ids: Vec<String> = (0..9).map(|_| rng.random_range(0..3).to_string()).collect();
        let cams: Vec<String> = (0..9).map(|_| rng.random_range(0..2).to_string()).collect();
        let queries =
            FeatureSet::from_rows(rows[..3].to_vec(), ids[..3].to_vec(), cams[..3].to_vec())
                .unwrap();
        let mut perm: Vec<usize> = (3..9).collect();
        let base = FeatureSet::from_rows(
            perm.iter().map(|&i| rows[i].clone()).collect(),
            perm.iter().map(|&i| ids[i].clone()).collect(),
            perm.iter().map(|&i| cams[i].clone()).collect(),
        )
        .unwrap();
        perm.reverse();
        let reversed = FeatureSet::from_rows(
            perm.iter().map(|&i| rows[i].clone()).collect(),
            perm.iter().map(|&i| ids[i].clone()).collect(),
            perm.iter().map(|&i| cams[i].clone()).collect(),
        )
        .unwrap();
        match (
            evaluate_single_query(&queries, &base),
            evaluate_single_query(&queries, &reversed),
        ) {
            (Ok(a), Ok(b)) => {
                assert!((a.map - b.map).abs() < 1e-12);
                assert_eq!(a.cmc, b.cmc);
            }
            (Err(_), Err(_)) => {}
            other => panic!("inconsistent outcome {other:?}"),
        }
    }
}
