//! CMC and mAP for query/gallery retrieval.
//!
//! Gallery entries sharing both identity and camera with a query are removed
//! from that query's ranking before scoring. Similarity ties are broken by
//! ascending gallery index.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{dot, l2_normalize};

pub const FEATURE_NORM_TOL: f64 = 1e-6;

/// Unit-norm feature rows with identity and camera labels.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    dim: usize,
    data: Vec<f64>,
    identities: Vec<String>,
    cameras: Vec<String>,
}

impl FeatureSet {
    pub fn new(
        dim: usize,
        data: Vec<f64>,
        identities: Vec<String>,
        cameras: Vec<String>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Shape("feature dimension must be positive".into()));
        }
        let n = identities.len();
        if cameras.len() != n || data.len() != n * dim {
            return Err(Error::Shape(format!(
                "{n} identities, {} cameras and {} values for dimension {dim}",
                cameras.len(),
                data.len()
            )));
        }
        for (r, row) in data.chunks(dim).enumerate() {
            let norm = dot(row, row).sqrt();
            if (norm - 1.0).abs() > FEATURE_NORM_TOL {
                return Err(Error::Contract(format!("feature row {r} has norm {norm}")));
            }
        }
        Ok(FeatureSet {
            dim,
            data,
            identities,
            cameras,
        })
    }

    pub fn from_rows(
        rows: Vec<Vec<f64>>,
        identities: Vec<String>,
        cameras: Vec<String>,
    ) -> Result<Self> {
        let dim = rows.first().map(Vec::len).unwrap_or(1);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Shape("ragged feature rows".into()));
        }
        FeatureSet::new(dim, rows.concat(), identities, cameras)
    }

    pub fn len(&self) -> usize {
        self.identities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.identities.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn identity(&self, i: usize) -> &str {
        &self.identities[i]
    }

    pub fn camera(&self, i: usize) -> &str {
        &self.cameras[i]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// CMC curve, mAP and per-query average precision.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// `cmc[r]` is the fraction of scored queries whose first correct match
    /// is at rank `r + 1` or better.
    pub cmc: Vec<f64>,
    pub map: f64,
    /// Average precision of each scored query, in query order.
    pub per_query: Vec<f64>,
    /// Queries with no valid gallery match.
    pub skipped: usize,
}

impl EvalReport {
    /// CMC at 1-based rank `k`, saturating at the curve's end.
    pub fn rank(&self, k: usize) -> f64 {
        assert!(k >= 1, "ranks are 1-based");
        match self.cmc.len() {
            0 => 0.0,
            n => self.cmc[k.min(n) - 1],
        }
    }

    pub fn summary(&self) -> EvalSummary {
        EvalSummary {
            rank1: self.rank(1),
            rank5: self.rank(5),
            rank10: self.rank(10),
            map: self.map,
            cmc: self.cmc.clone(),
            skipped: self.skipped,
        }
    }
}

/// JSON form of an [`EvalReport`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub map: f64,
    pub cmc: Vec<f64>,
    pub skipped: usize,
}

/// Gallery indices by descending similarity to `query`.
pub fn rank_gallery(query: &[f64], gallery: &FeatureSet) -> Result<Vec<usize>> {
    if gallery.is_empty() {
        return Err(Error::Precondition("empty gallery".into()));
    }
    if query.len() != gallery.dim() {
        return Err(Error::Shape(format!(
            "query dimension {} vs gallery dimension {}",
            query.len(),
            gallery.dim()
        )));
    }
    let sims: Vec<f64> = (0..gallery.len())
        .map(|g| dot(query, gallery.row(g)))
        .collect();
    let mut order: Vec<usize> = (0..gallery.len()).collect();
    order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
    Ok(order)
}

/// 1-based ranks of the correct matches among valid gallery entries, or
/// `None` when the query has no valid match.
fn match_ranks(
    order: &[usize],
    gallery: &FeatureSet,
    identity: &str,
    camera: &str,
) -> Option<Vec<usize>> {
    let mut rank = 0;
    let mut hits = Vec::new();
    for &g in order {
        let same_id = gallery.identity(g) == identity;
        if same_id && gallery.camera(g) == camera {
            continue;
        }
        rank += 1;
        if same_id {
            hits.push(rank);
        }
    }
    (!hits.is_empty()).then_some(hits)
}

/// Mean over the correct matches of (hits so far) / (rank).
pub fn average_precision(hit_ranks: &[usize]) -> f64 {
    let mut acc = 0.0;
    for (i, &r) in hit_ranks.iter().enumerate() {
        acc += (i + 1) as f64 / r as f64;
    }
    acc / hit_ranks.len() as f64
}

pub fn evaluate_single_query(queries: &FeatureSet, gallery: &FeatureSet) -> Result<EvalReport> {
    if queries.dim() != gallery.dim() {
        return Err(Error::Shape(format!(
            "query dimension {} vs gallery dimension {}",
            queries.dim(),
            gallery.dim()
        )));
    }
    let mut first_hit = vec![0usize; gallery.len()];
    let mut per_query = Vec::with_capacity(queries.len());
    let mut skipped = 0;
    for q in 0..queries.len() {
        let order = rank_gallery(queries.row(q), gallery)?;
        match match_ranks(&order, gallery, queries.identity(q), queries.camera(q)) {
            Some(hits) => {
                first_hit[hits[0] - 1] += 1;
                per_query.push(average_precision(&hits));
            }
            None => skipped += 1,
        }
    }
    if per_query.is_empty() {
        return Err(Error::Precondition(
            "no query has a valid gallery match".into(),
        ));
    }
    let scored = per_query.len() as f64;
    let mut cmc = Vec::with_capacity(gallery.len());
    let mut cum = 0;
    for h in first_hit {
        cum += h;
        cmc.push(cum as f64 / scored);
    }
    let map = per_query.iter().sum::<f64>() / scored;
    Ok(EvalReport {
        cmc,
        map,
        per_query,
        skipped,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    Mean,
    Max,
}

/// Pools several features of one identity-camera group into one unit vector.
pub fn multi_query_pool(features: &[&[f64]], pooling: Pooling) -> Result<Vec<f64>> {
    let Some(first) = features.first() else {
        return Err(Error::Precondition("nothing to pool".into()));
    };
    let d = first.len();
    if features.iter().any(|f| f.len() != d) {
        return Err(Error::Shape("pooled features differ in length".into()));
    }
    let pooled: Vec<f64> = match pooling {
        Pooling::Mean => {
            let mut acc = vec![0.0; d];
            for f in features {
                for (a, v) in acc.iter_mut().zip(*f) {
                    *a += v;
                }
            }
            let inv = 1.0 / features.len() as f64;
            acc.into_iter().map(|a| a * inv).collect()
        }
        Pooling::Max => (0..d)
            .map(|c| {
                features
                    .iter()
                    .map(|f| f[c])
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect(),
    };
    l2_normalize(&pooled)
}

/// Pools queries per identity-camera group (groups ordered by first
/// appearance), then scores the pooled queries as single queries.
pub fn evaluate_multi_query(
    queries: &FeatureSet,
    gallery: &FeatureSet,
    pooling: Pooling,
) -> Result<EvalReport> {
    let mut groups: BTreeMap<(&str, &str), usize> = BTreeMap::new();
    let mut members: Vec<Vec<usize>> = Vec::new();
    for q in 0..queries.len() {
        let key = (queries.identity(q), queries.camera(q));
        let slot = *groups.entry(key).or_insert_with(|| {
            members.push(Vec::new());
            members.len() - 1
        });
        members[slot].push(q);
    }
    let mut rows = Vec::with_capacity(members.len());
    let mut ids = Vec::with_capacity(members.len());
    let mut cams = Vec::with_capacity(members.len());
    for group in &members {
        let feats: Vec<&[f64]> = group.iter().map(|&q| queries.row(q)).collect();
        rows.push(multi_query_pool(&feats, pooling)?);
        ids.push(queries.identity(group[0]).to_string());
        cams.push(queries.camera(group[0]).to_string());
    }
    let pooled = FeatureSet::from_rows(rows, ids, cams)?;
    evaluate_single_query(&pooled, gallery)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(rows: &[&[f64]], ids: &[&str], cams: &[&str]) -> FeatureSet {
        FeatureSet::from_rows(
            rows.iter().map(|r| l2_normalize(r).unwrap()).collect(),
            ids.iter().map(|s| s.to_string()).collect(),
            cams.iter().map(|s| s.to_string()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn self_ranks_first() {
        let g = set(&[&[1.0, 0.0], &[-1.0, 0.0]], &["a", "b"], &["0", "0"]);
        assert_eq!(rank_gallery(&[1.0, 0.0], &g).unwrap(), vec![0, 1]);
    }

    #[test]
    fn identical_gallery_keeps_index_order() {
        let g = set(&[&[0.0, 1.0][..]; 4], &["a", "b", "c", "d"], &["0"; 4]);
        assert_eq!(rank_gallery(&[1.0, 0.0], &g).unwrap(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn empty_gallery_is_an_error() {
        let g = FeatureSet::new(2, vec![], vec![], vec![]).unwrap();
        assert!(rank_gallery(&[1.0, 0.0], &g).is_err());
    }

    #[test]
    fn ap_for_hits_at_one_and_three() {
        assert!((average_precision(&[1, 3]) - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn first_hit_at_rank_three_is_a_step() {
        // query along e0; gallery sims 0.9, 0.8, 0.7 with the match last
        let q = set(&[&[1.0, 0.0]], &["x"], &["0"]);
        let g = set(
            &[&[0.9, 0.436], &[0.8, 0.6], &[0.7, 0.714]],
            &["a", "b", "x"],
            &["1", "1", "1"],
        );
        let r = evaluate_single_query(&q, &g).unwrap();
        assert_eq!(r.cmc, vec![0.0, 0.0, 1.0]);
        assert!((r.map - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn same_camera_matches_are_filtered_and_lonely_queries_skipped() {
        let q = set(&[&[1.0, 0.0], &[0.0, 1.0]], &["x", "y"], &["0", "0"]);
        let g = set(
            &[&[1.0, 0.1], &[0.9, 0.3], &[0.0, 1.0]],
            &["x", "x", "z"],
            &["0", "1", "0"],
        );
        let r = evaluate_single_query(&q, &g).unwrap();
        assert_eq!(r.skipped, 1);
        assert_eq!(r.per_query, vec![1.0]);
        assert_eq!(r.rank(1), 1.0);
    }

    #[test]
    fn pooling_examples() {
        let v = l2_normalize(&[0.3, 0.4, 0.5]).unwrap();
        let once = multi_query_pool(&[&v], Pooling::Mean).unwrap();
        for (a, b) in once.iter().zip(&v) {
            assert!((a - b).abs() < 1e-15);
        }
        let twice = multi_query_pool(&[&v, &v], Pooling::Mean).unwrap();
        for (a, b) in twice.iter().zip(&v) {
            assert!((a - b).abs() < 1e-15);
        }
        let m = multi_query_pool(&[&[1.0, 0.0], &[0.0, 1.0]], Pooling::Mean).unwrap();
        assert!((m[0] - 0.5f64.sqrt()).abs() < 1e-15 && (m[1] - 0.5f64.sqrt()).abs() < 1e-15);
        assert!(multi_query_pool(&[&[1.0, 0.0], &[-1.0, 0.0]], Pooling::Mean).is_err());
        let mx = multi_query_pool(&[&[1.0, 0.0], &[0.0, 1.0]], Pooling::Max).unwrap();
        assert_eq!(mx, m);
    }

    #[test]
    fn multi_query_of_singletons_equals_single() {
        let q = set(&[&[1.0, 0.2], &[0.1, 1.0]], &["x", "y"], &["0", "0"]);
        let g = set(
            &[&[1.0, 0.0], &[0.3, 1.0], &[0.5, 0.5]],
            &["x", "y", "z"],
            &["1", "1", "1"],
        );
        let single = evaluate_single_query(&q, &g).unwrap();
        let multi = evaluate_multi_query(&q, &g, Pooling::Mean).unwrap();
        assert_eq!(single, multi);
    }

    #[test]
    fn summary_saturates_short_curves() {
        let r = EvalReport {
            cmc: vec![0.5, 1.0],
            map: 0.75,
            per_query: vec![1.0, 0.5],
            skipped: 0,
        };
        let s = r.summary();
        assert_eq!((s.rank1, s.rank5, s.rank10), (0.5, 1.0, 1.0));
    }
}
