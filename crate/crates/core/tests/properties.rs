mod support;

use maskrank::data::Raster;
use maskrank::encoder::{encode, EncoderConfig, EncoderParams, ImagePair};
use maskrank::losses::{
    ranking_loss, ranking_loss_full, similarity, EmbeddingBatch, LossParams, RankingBatch,
};
use maskrank::tensor::{l2_normalize, Tensor};
use proptest::prelude::*;

fn unit_rows(raw: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
    raw.iter().map(|r| l2_normalize(r).ok()).collect()
}

fn batch(rows: &[Vec<f64>], p: usize) -> (EmbeddingBatch, RankingBatch) {
    let mut ids = vec![0; 1 + p];
    ids.extend(1..rows.len() - p);
    let b = EmbeddingBatch::new(
        Tensor::matrix(rows.len(), rows[0].len(), rows.concat()).unwrap(),
        ids.clone(),
    )
    .unwrap();
    (b, RankingBatch::from_labels(&ids, 0))
}

/// Householder reflection through the unit normal `u`.
fn reflect(v: &[f64], u: &[f64]) -> Vec<f64> {
    let d = support::sim(v, u);
    v.iter().zip(u).map(|(x, n)| x - 2.0 * d * n).collect()
}

fn rows_strategy() -> impl Strategy<Value = (Vec<Vec<f64>>, usize)> {
    (2usize..12, 1usize..6).prop_flat_map(|(n, p)| {
        let p = p.min(n - 1);
        (
            prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 6), n + 1),
            Just(p),
        )
    })
}

proptest! {
    #[test]
    fn similarity_is_symmetric_and_bounded(a in prop::collection::vec(-5.0f64..5.0, 8), b in prop::collection::vec(-5.0f64..5.0, 8)) {
        if let (Ok(x), Ok(y)) = (l2_normalize(&a), l2_normalize(&b)) {
            let s = similarity(&x, &y).unwrap();
            prop_assert_eq!(s, similarity(&y, &x).unwrap());
            prop_assert!((-1.0..=1.0).contains(&s));
        }
    }

    #[test]
    fn losses_are_finite_and_non_negative((raw, p) in rows_strategy(), alpha in 0.0f64..2.0, lambda in 0.0f64..10.0) {
        let Some(rows) = unit_rows(&raw) else { return Ok(()) };
        let (b, rb) = batch(&rows, p);
        let params = LossParams::new(alpha, lambda).unwrap();
        for v in [ranking_loss(&b, &rb, &params).unwrap(), ranking_loss_full(&b, &rb).unwrap()] {
            prop_assert!(v.value.is_finite() && v.value >= 0.0);
            prop_assert!(v.gradient.is_finite());
        }
    }

    #[test]
    fn losses_are_invariant_to_rotation((raw, p) in rows_strategy(), normal in prop::collection::vec(-1.0f64..1.0, 6)) {
        let (Some(rows), Ok(u)) = (unit_rows(&raw), l2_normalize(&normal)) else { return Ok(()) };
        let turned: Vec<Vec<f64>> = rows.iter().map(|r| reflect(r, &u)).collect();
        let (b1, rb) = batch(&rows, p);
        let (b2, _) = batch(&turned, p);
        let params = LossParams::default();
        let (x, y) = (ranking_loss(&b1, &rb, &params).unwrap().value, ranking_loss(&b2, &rb, &params).unwrap().value);
        let near_gate = {
            let sps = support::sims_of(&rows, 0, rb.positives());
            let sns = support::sims_of(&rows, 0, rb.negatives());
            let m = sps.iter().copied().fold(f64::INFINITY, f64::min);
            sns.iter().any(|s| ((s - m + params.alpha).exp() - 1.0).abs() < 1e-9)
        };
        if !near_gate {
            prop_assert!((x - y).abs() < 1e-12, "{} vs {}", x, y);
        }
        let (x, y) = (ranking_loss_full(&b1, &rb).unwrap().value, ranking_loss_full(&b2, &rb).unwrap().value);
        prop_assert!((x - y).abs() < 1e-12);
    }

    #[test]
    fn negative_storage_order_does_not_matter((raw, p) in rows_strategy()) {
        let Some(rows) = unit_rows(&raw) else { return Ok(()) };
        let mut reordered = rows.clone();
        reordered[p + 1..].reverse();
        let (b1, rb) = batch(&rows, p);
        let (b2, _) = batch(&reordered, p);
        let params = LossParams::default();
        let x = ranking_loss(&b1, &rb, &params).unwrap().value;
        let y = ranking_loss(&b2, &rb, &params).unwrap().value;
        prop_assert!((x - y).abs() < 1e-12);
    }

    #[test]
    fn encoder_output_is_unit_norm(pixels in prop::collection::vec(0.0f64..1.0, 4 * 2 * 3), mask in prop::collection::vec(0.0f64..1.0, 8), seed in 0u64..1000) {
        let config = EncoderConfig { height: 4, width: 2, stream_width: 4, level_widths: [5, 4, 3], output_dim: 8, seed, ..EncoderConfig::default() };
        let params = EncoderParams::init(&config).unwrap();
        let image = Raster::new(4, 2, 3, pixels).unwrap();
        let mask = Raster::new(4, 2, 1, mask).unwrap();
        match encode(&params, &ImagePair::with_mask(image, &mask).unwrap()) {
            Ok(v) => {
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                prop_assert!((n - 1.0).abs() < 1e-8);
            }
            Err(e) => {
                let degenerate = matches!(e, maskrank::Error::DegenerateVector { .. });
                prop_assert!(degenerate, "unexpected error {}", e);
            }
        }
    }
}
