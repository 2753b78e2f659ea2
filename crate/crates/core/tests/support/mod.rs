//! Independent scalar oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use maskrank::eval::FeatureSet;
use maskrank::losses::{EmbeddingBatch, RankingBatch};
use maskrank::sampler::SeededRng;
use maskrank::tensor::Tensor;
use maskrank::verify::random_unit;
use rand::Rng;

pub fn sim(x: &[f64], y: &[f64]) -> f64 {
    let mut s = 0.0;
    for k in 0..x.len() {
        s += x[k] * y[k];
    }
    s
}

pub fn npair_from_sims(sp: f64, sns: &[f64]) -> f64 {
    let mut acc = 0.0;
    for &sn in sns {
        acc += (sn - sp).exp();
    }
    (1.0 + acc).ln()
}

pub fn full_from_sims(sps: &[f64], sns: &[f64]) -> f64 {
    let mut acc = 0.0;
    for &sp in sps {
        for &sn in sns {
            acc += (sn - sp).exp();
        }
    }
    (1.0 + acc).ln()
}

pub fn ranking_from_sims(sps: &[f64], sns: &[f64], alpha: f64, lambda: f64) -> f64 {
    let mut min_p = f64::INFINITY;
    for &sp in sps {
        if sp < min_p {
            min_p = sp;
        }
    }
    let mut acc = 0.0;
    for &sn in sns {
        let t = (sn - min_p + alpha).exp();
        if t > 1.0 {
            acc += t;
        }
    }
    let mut reg = 0.0;
    for &sp in sps {
        reg += (sp - 1.0) * (sp - 1.0);
    }
    (1.0 + acc).ln() + lambda / (2.0 * sps.len() as f64) * reg
}

pub fn sims_of(rows: &[Vec<f64>], anchor: usize, others: &[usize]) -> Vec<f64> {
    let mut out = Vec::new();
    for &o in others {
        out.push(sim(&rows[anchor], &rows[o]));
    }
    out
}

/// Rows whose similarities to row 0 are exactly `pos` then `neg`.
pub fn rows_with_sims(pos: &[f64], neg: &[f64]) -> Vec<Vec<f64>> {
    let n = 1 + pos.len() + neg.len();
    let mut rows = Vec::with_capacity(n);
    let mut e0 = vec![0.0; n];
    e0[0] = 1.0;
    rows.push(e0);
    for (r, &s) in pos.iter().chain(neg).enumerate() {
        let mut v = vec![0.0; n];
        v[0] = s;
        v[r + 1] = (1.0 - s * s).sqrt();
        rows.push(v);
    }
    rows
}

pub fn batch_with_sims(pos: &[f64], neg: &[f64]) -> (EmbeddingBatch, RankingBatch) {
    let rows = rows_with_sims(pos, neg);
    let mut ids = vec![0; 1 + pos.len()];
    ids.extend(1..=neg.len());
    let n = rows.len();
    let batch =
        EmbeddingBatch::new(Tensor::matrix(n, n, rows.concat()).unwrap(), ids.clone()).unwrap();
    (batch, RankingBatch::from_labels(&ids, 0))
}

/// Anchor row 0, `p` positives, `n` negatives of distinct identities.
pub fn random_ranking_batch(
    rng: &mut SeededRng,
    p: usize,
    n: usize,
    dim: usize,
) -> (Vec<Vec<f64>>, EmbeddingBatch, RankingBatch) {
    let rows: Vec<Vec<f64>> = (0..1 + p + n).map(|_| random_unit(rng, dim)).collect();
    let mut ids = vec![0; 1 + p];
    ids.extend(1..=n);
    let batch = EmbeddingBatch::new(
        Tensor::matrix(rows.len(), dim, rows.concat()).unwrap(),
        ids.clone(),
    )
    .unwrap();
    (rows, batch, RankingBatch::from_labels(&ids, 0))
}

pub fn random_sizes(rng: &mut SeededRng, max_p: usize, max_n: usize) -> (usize, usize) {
    (rng.random_range(1..=max_p), rng.random_range(1..=max_n))
}

/// Brute-force retrieval scores: `(cmc, map, skipped)`. A gallery item's
/// rank counts the valid items that beat it on similarity, or tie with it
/// at a lower index.
pub fn brute_force_eval(queries: &FeatureSet, gallery: &FeatureSet) -> (Vec<f64>, f64, usize) {
    let g = gallery.len();
    let mut hits_at = vec![0usize; g];
    let mut ap_sum = 0.0;
    let mut scored = 0;
    let mut skipped = 0;
    for q in 0..queries.len() {
        let valid: Vec<usize> = (0..g)
            .filter(|&i| {
                !(gallery.identity(i) == queries.identity(q)
                    && gallery.camera(i) == queries.camera(q))
            })
            .collect();
        let s: Vec<f64> = (0..g)
            .map(|i| sim(queries.row(q), gallery.row(i)))
            .collect();
        let mut match_ranks = Vec::new();
        for &i in &valid {
            if gallery.identity(i) != queries.identity(q) {
                continue;
            }
            let mut rank = 1;
            for &j in &valid {
                if s[j] > s[i] || (s[j] == s[i] && j < i) {
                    rank += 1;
                }
            }
            match_ranks.push(rank);
        }
        if match_ranks.is_empty() {
            skipped += 1;
            continue;
        }
        match_ranks.sort();
        scored += 1;
        let mut ap = 0.0;
        for (k, &r) in match_ranks.iter().enumerate() {
            ap += (k + 1) as f64 / r as f64;
        }
        ap_sum += ap / match_ranks.len() as f64;
        hits_at[match_ranks[0] - 1] += 1;
    }
    let mut cmc = Vec::with_capacity(g);
    let mut acc = 0;
    for h in hits_at {
        acc += h;
        cmc.push(if scored == 0 {
            0.0
        } else {
            acc as f64 / scored as f64
        });
    }
    let map = if scored == 0 {
        0.0
    } else {
        ap_sum / scored as f64
    };
    (cmc, map, skipped)
}
