//! Ranking-loss family over unit-norm embeddings with dot-product similarity.
//!
//! Each loss has a graph form (`*_graph`) that records onto a caller-owned
//! [`Tape`], so the same code path serves both standalone evaluation and
//! end-to-end training through the encoder, and a convenience form that
//! returns the value together with gradients over the batch rows.
//!
//! Sums over positives and negatives run in ascending row-index order with
//! plain sequential accumulation.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Row norms of an [`EmbeddingBatch`] must be within this of 1.
pub const BATCH_NORM_TOL: f64 = 1e-8;
/// Tolerance used by [`similarity`] when checking its inputs.
pub const SIMILARITY_NORM_TOL: f64 = 1e-6;

/// Unit-norm feature rows with identity labels (and optional camera labels).
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBatch {
    features: Tensor,
    identities: Vec<usize>,
    cameras: Option<Vec<usize>>,
}

impl EmbeddingBatch {
    pub fn new(features: Tensor, identities: Vec<usize>) -> Result<Self> {
        if features.rank() != 2 {
            return Err(Error::Shape(format!(
                "embedding batch must be a matrix, got {:?}",
                features.shape()
            )));
        }
        let n = features.rows();
        if n < 2 {
            return Err(Error::Precondition(format!(
                "batch needs at least 2 rows, got {n}"
            )));
        }
        if identities.len() != n {
            return Err(Error::Shape(format!(
                "{} identity labels for {n} rows",
                identities.len()
            )));
        }
        for r in 0..n {
            let norm = features.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > BATCH_NORM_TOL {
                return Err(Error::Contract(format!("row {r} has norm {norm}")));
            }
        }
        Ok(EmbeddingBatch {
            features,
            identities,
            cameras: None,
        })
    }

    /// Normalizes each row before building the batch.
    pub fn from_raw_rows(rows: &[Vec<f64>], identities: Vec<usize>) -> Result<Self> {
        let d = rows.first().map(Vec::len).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * d);
        for r in rows {
            if r.len() != d {
                return Err(Error::Shape("ragged embedding rows".into()));
            }
            data.extend(tensor::l2_normalize(r)?);
        }
        EmbeddingBatch::new(Tensor::matrix(rows.len(), d.max(1), data)?, identities)
    }

    pub fn with_cameras(mut self, cameras: Vec<usize>) -> Result<Self> {
        if cameras.len() != self.len() {
            return Err(Error::Shape(format!(
                "{} camera labels for {} rows",
                cameras.len(),
                self.len()
            )));
        }
        self.cameras = Some(cameras);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }

    pub fn identities(&self) -> &[usize] {
        &self.identities
    }

    pub fn cameras(&self) -> Option<&[usize]> {
        self.cameras.as_deref()
    }

    /// Records every row as a separate constant leaf on `tape`.
    pub fn record(&self, tape: &mut Tape) -> Vec<Var> {
        (0..self.len())
            .map(|r| tape.constant(Tensor::vector(self.row(r).to_vec())))
            .collect()
    }
}

/// Anchor row with its positive set B⁺ and negative set B⁻.
///
/// Index sets are kept sorted ascending, so the order in which they were
/// supplied never affects a loss value.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RankingBatch {
    anchor: usize,
    positives: Vec<usize>,
    negatives: Vec<usize>,
}

impl RankingBatch {
    /// Validates the index sets against the labels of `batch`. Empty sets are
    /// allowed here; each loss states its own minimum.
    pub fn new(
        batch: &EmbeddingBatch,
        anchor: usize,
        mut positives: Vec<usize>,
        mut negatives: Vec<usize>,
    ) -> Result<Self> {
        let ids = batch.identities();
        let n = ids.len();
        if anchor >= n {
            return Err(Error::Contract(format!("anchor {anchor} out of range")));
        }
        positives.sort_unstable();
        negatives.sort_unstable();
        for w in positives.windows(2).chain(negatives.windows(2)) {
            if w[0] == w[1] {
                return Err(Error::Contract(format!("row {} listed twice", w[0])));
            }
        }
        for &p in &positives {
            if p >= n || p == anchor || ids[p] != ids[anchor] {
                return Err(Error::Contract(format!(
                    "row {p} is not a positive of {anchor}"
                )));
            }
        }
        for &q in &negatives {
            if q >= n || ids[q] == ids[anchor] {
                return Err(Error::Contract(format!(
                    "row {q} is not a negative of {anchor}"
                )));
            }
        }
        Ok(RankingBatch {
            anchor,
            positives,
            negatives,
        })
    }

    /// Every other same-identity row as B⁺, every different-identity row as B⁻.
    pub fn from_labels(identities: &[usize], anchor: usize) -> Self {
        let a = identities[anchor];
        let positives = (0..identities.len())
            .filter(|&i| i != anchor && identities[i] == a)
            .collect();
        let negatives = (0..identities.len())
            .filter(|&i| identities[i] != a)
            .collect();
        RankingBatch {
            anchor,
            positives,
            negatives,
        }
    }

    pub fn anchor(&self) -> usize {
        self.anchor
    }

    pub fn positives(&self) -> &[usize] {
        &self.positives
    }

    pub fn negatives(&self) -> &[usize] {
        &self.negatives
    }

    fn require_nonempty(&self) -> Result<()> {
        if self.positives.is_empty() {
            return Err(Error::Precondition("empty positive set".into()));
        }
        if self.negatives.is_empty() {
            return Err(Error::Precondition("empty negative set".into()));
        }
        Ok(())
    }
}

/// Margin `alpha` and balance weight `lambda` of the practical ranking loss.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossParams {
    pub alpha: f64,
    pub lambda: f64,
}

impl LossParams {
    pub fn new(alpha: f64, lambda: f64) -> Result<Self> {
        let p = LossParams { alpha, lambda };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=2.0).contains(&self.alpha) {
            return Err(Error::Config(format!(
                "alpha {} outside [0, 2]",
                self.alpha
            )));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!(
                "lambda {} must be >= 0",
                self.lambda
            )));
        }
        Ok(())
    }
}

impl Default for LossParams {
    fn default() -> Self {
        LossParams {
            alpha: 0.2,
            lambda: 1.0,
        }
    }
}

/// Loss value and its gradient with respect to each batch row (zero for
/// rows that do not participate).
#[derive(Clone, Debug, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub gradient: Tensor,
}

/// `S(x, y) = xᵀy` for unit vectors.
pub fn similarity(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!("lengths {} and {}", x.len(), y.len())));
    }
    for v in [x, y] {
        let norm = tensor::dot(v, v).sqrt();
        if (norm - 1.0).abs() > SIMILARITY_NORM_TOL {
            return Err(Error::Contract(format!("similarity input has norm {norm}")));
        }
    }
    Ok(tensor::dot(x, y))
}

fn row_index(rows: &[Var], i: usize) -> Result<Var> {
    rows.get(i)
        .copied()
        .ok_or_else(|| Error::Contract(format!("row {i} out of range")))
}

/// `log(1 + s)` for a scalar node `s ≥ 0`.
fn log1p_node(tape: &mut Tape, s: Var) -> Result<Var> {
    let one_plus = tape.offset(s, 1.0);
    tape.log(one_plus)
}

/// N-pair loss for one anchor with exactly one positive:
/// `log(1 + Σⱼ exp(S(a, nⱼ) − S(a, p)))`.
pub fn npair_graph(
    tape: &mut Tape,
    rows: &[Var],
    anchor: usize,
    positive: usize,
    negatives: &[usize],
) -> Result<Var> {
    if negatives.is_empty() {
        return Err(Error::Precondition(
            "N-pair loss needs at least one negative".into(),
        ));
    }
    let a = row_index(rows, anchor)?;
    let p = row_index(rows, positive)?;
    let sp = tape.dot(a, p);
    let mut terms = Vec::with_capacity(negatives.len());
    for &j in negatives {
        let n = row_index(rows, j)?;
        let sn = tape.dot(a, n);
        let diff = tape.sub(sn, sp);
        terms.push(tape.exp(diff)?);
    }
    let s = tape.sum(&terms);
    log1p_node(tape, s)
}

/// Full ranking loss over every (positive, negative) pair:
/// `log(1 + Σᵢ Σⱼ exp(S(a, nⱼ) − S(a, pᵢ)))`.
pub fn ranking_full_graph(tape: &mut Tape, rows: &[Var], rb: &RankingBatch) -> Result<Var> {
    rb.require_nonempty()?;
    let a = row_index(rows, rb.anchor)?;
    let mut neg_sims = Vec::with_capacity(rb.negatives.len());
    for &j in &rb.negatives {
        let n = row_index(rows, j)?;
        neg_sims.push(tape.dot(a, n));
    }
    let mut terms = Vec::with_capacity(rb.positives.len() * rb.negatives.len());
    for &i in &rb.positives {
        let p = row_index(rows, i)?;
        let sp = tape.dot(a, p);
        for &sn in &neg_sims {
            let diff = tape.sub(sn, sp);
            terms.push(tape.exp(diff)?);
        }
    }
    let s = tape.sum(&terms);
    log1p_node(tape, s)
}

/// Practical ranking loss for one anchor:
///
/// `log(1 + Σⱼ [exp(S(a, nⱼ) − minᵢ S(a, pᵢ) + α)]₁₊) + λ/(2|B⁺|) Σᵢ (S(a, pᵢ) − 1)²`
///
/// where `[t]₁₊` is `t` for `t > 1` and 0 otherwise. The minimum positive is
/// the lowest-index positive among ties and receives the whole gradient of
/// the first term.
pub fn ranking_graph(
    tape: &mut Tape,
    rows: &[Var],
    rb: &RankingBatch,
    params: &LossParams,
) -> Result<Var> {
    rb.require_nonempty()?;
    params.validate()?;
    let a = row_index(rows, rb.anchor)?;

    let mut pos_sims = Vec::with_capacity(rb.positives.len());
    for &i in &rb.positives {
        let p = row_index(rows, i)?;
        pos_sims.push(tape.dot(a, p));
    }
    let mut hardest = pos_sims[0];
    for &s in &pos_sims[1..] {
        if tape.scalar(s) < tape.scalar(hardest) {
            hardest = s;
        }
    }

    let mut gated = Vec::with_capacity(rb.negatives.len());
    for &j in &rb.negatives {
        let n = row_index(rows, j)?;
        let sn = tape.dot(a, n);
        let diff = tape.sub(sn, hardest);
        let shifted = tape.offset(diff, params.alpha);
        let e = tape.exp(shifted)?;
        debug_assert!(
            tape.scalar(e) <= (2.0 + params.alpha).exp() * (1.0 + 1e-9),
            "gate argument exceeds the unit-vector bound"
        );
        gated.push(tape.clip_gate(e));
    }
    let s = tape.sum(&gated);
    let rank_term = log1p_node(tape, s)?;

    let mut squares = Vec::with_capacity(pos_sims.len());
    for &sp in &pos_sims {
        let dev = tape.offset(sp, -1.0);
        squares.push(tape.mul(dev, dev));
    }
    let sq_sum = tape.sum(&squares);
    let reg = tape.scale(sq_sum, params.lambda / (2.0 * rb.positives.len() as f64));
    Ok(tape.add(rank_term, reg))
}

/// Rows that can serve as anchors: at least one other row shares their
/// identity and at least one row does not.
pub fn anchor_rows(identities: &[usize]) -> Vec<usize> {
    (0..identities.len())
        .filter(|&k| {
            let a = identities[k];
            let has_pos = identities
                .iter()
                .enumerate()
                .any(|(i, &id)| i != k && id == a);
            let has_neg = identities.iter().any(|&id| id != a);
            has_pos && has_neg
        })
        .collect()
}

/// Batch-hard triplet loss in similarity form, averaged over valid anchors:
/// `mean_a max(0, margin + maxₙ S(a, n) − minₚ S(a, p))`.
pub fn triplet_hard_graph(
    tape: &mut Tape,
    rows: &[Var],
    identities: &[usize],
    margin: f64,
) -> Result<Var> {
    if rows.len() != identities.len() {
        return Err(Error::Shape("row and label counts differ".into()));
    }
    let anchors = anchor_rows(identities);
    if anchors.is_empty() {
        return Err(Error::Precondition(
            "no anchor has both a positive and a negative".into(),
        ));
    }
    let mut hinges = Vec::with_capacity(anchors.len());
    for &k in &anchors {
        let rb = RankingBatch::from_labels(identities, k);
        let a = rows[k];
        let mut hard_pos: Option<Var> = None;
        for &i in &rb.positives {
            let s = tape.dot(a, rows[i]);
            if hard_pos.is_none_or(|h| tape.scalar(s) < tape.scalar(h)) {
                hard_pos = Some(s);
            }
        }
        let mut hard_neg: Option<Var> = None;
        for &j in &rb.negatives {
            let s = tape.dot(a, rows[j]);
            if hard_neg.is_none_or(|h| tape.scalar(s) > tape.scalar(h)) {
                hard_neg = Some(s);
            }
        }
        let (hp, hn) = (hard_pos.expect("positive"), hard_neg.expect("negative"));
        let diff = tape.sub(hn, hp);
        let shifted = tape.offset(diff, margin);
        hinges.push(tape.relu(shifted));
    }
    let total = tape.sum(&hinges);
    Ok(tape.scale(total, 1.0 / anchors.len() as f64))
}

/// `−log softmax(logits)[label]` with the maximum logit subtracted first.
/// The shift is treated as a constant, which leaves the gradient unchanged.
pub fn softmax_ce_graph(tape: &mut Tape, logits: Var, label: usize) -> Result<Var> {
    let z = tape.value(logits);
    if z.rank() != 1 {
        return Err(Error::Shape(format!(
            "logits must be a vector, got {:?}",
            z.shape()
        )));
    }
    if label >= z.len() {
        return Err(Error::Precondition(format!(
            "label {label} out of range for {} classes",
            z.len()
        )));
    }
    let m = z.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shifted = tape.offset(logits, -m);
    let e = tape.exp(shifted)?;
    let s = tape.sum_all(e);
    let lse = tape.log(s)?;
    let picked = tape.index(shifted, label);
    Ok(tape.sub(lse, picked))
}

/// Mean of the practical ranking loss over [`anchor_rows`], each anchor
/// taking its remaining same-identity rows as B⁺ and all other rows as B⁻.
pub fn batch_ranking_graph(
    tape: &mut Tape,
    rows: &[Var],
    identities: &[usize],
    params: &LossParams,
) -> Result<Var> {
    let anchors = anchor_rows(identities);
    if anchors.is_empty() {
        return Err(Error::Precondition("no valid anchor in batch".into()));
    }
    let mut per_anchor = Vec::with_capacity(anchors.len());
    for &k in &anchors {
        let rb = RankingBatch::from_labels(identities, k);
        per_anchor.push(ranking_graph(tape, rows, &rb, params)?);
    }
    let total = tape.sum(&per_anchor);
    Ok(tape.scale(total, 1.0 / anchors.len() as f64))
}

/// The same-identity row paired with `anchor` in the batched N-pair loss:
/// the next such row after `anchor`, wrapping around.
pub fn npair_partner(identities: &[usize], anchor: usize) -> Option<usize> {
    let n = identities.len();
    (1..n)
        .map(|step| (anchor + step) % n)
        .find(|&i| identities[i] == identities[anchor])
}

/// Mean N-pair loss over [`anchor_rows`], each anchor paired with its
/// [`npair_partner`] and contrasted against all other-identity rows.
pub fn batch_npair_graph(tape: &mut Tape, rows: &[Var], identities: &[usize]) -> Result<Var> {
    let anchors = anchor_rows(identities);
    if anchors.is_empty() {
        return Err(Error::Precondition("no valid anchor in batch".into()));
    }
    let mut per_anchor = Vec::with_capacity(anchors.len());
    for &k in &anchors {
        let p = npair_partner(identities, k).expect("anchor has a positive");
        let negatives: Vec<usize> = (0..identities.len())
            .filter(|&i| identities[i] != identities[k])
            .collect();
        per_anchor.push(npair_graph(tape, rows, k, p, &negatives)?);
    }
    let total = tape.sum(&per_anchor);
    Ok(tape.scale(total, 1.0 / anchors.len() as f64))
}

fn evaluate_on_batch<F>(batch: &EmbeddingBatch, build: F) -> Result<LossValue>
where
    F: FnOnce(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let rows = batch.record(&mut tape);
    let out = build(&mut tape, &rows)?;
    let value = tape.scalar(out);
    let adj = tape.backward(out)?;
    let mut data = Vec::with_capacity(batch.len() * batch.dim());
    for &r in &rows {
        data.extend_from_slice(adj.wrt(r).data());
    }
    Ok(LossValue {
        value,
        gradient: Tensor::matrix(batch.len(), batch.dim(), data)?,
    })
}

/// N-pair loss; `rb` must hold exactly one positive.
pub fn npair_loss(batch: &EmbeddingBatch, rb: &RankingBatch) -> Result<LossValue> {
    if rb.positives.len() != 1 {
        return Err(Error::Precondition(format!(
            "N-pair loss needs exactly one positive, got {}",
            rb.positives.len()
        )));
    }
    evaluate_on_batch(batch, |t, rows| {
        npair_graph(t, rows, rb.anchor, rb.positives[0], &rb.negatives)
    })
}

pub fn ranking_loss_full(batch: &EmbeddingBatch, rb: &RankingBatch) -> Result<LossValue> {
    evaluate_on_batch(batch, |t, rows| ranking_full_graph(t, rows, rb))
}

pub fn ranking_loss(
    batch: &EmbeddingBatch,
    rb: &RankingBatch,
    params: &LossParams,
) -> Result<LossValue> {
    evaluate_on_batch(batch, |t, rows| ranking_graph(t, rows, rb, params))
}

pub fn triplet_loss_hard(batch: &EmbeddingBatch, margin: f64) -> Result<LossValue> {
    evaluate_on_batch(batch, |t, rows| {
        triplet_hard_graph(t, rows, batch.identities(), margin)
    })
}

pub fn batch_ranking_loss(batch: &EmbeddingBatch, params: &LossParams) -> Result<LossValue> {
    evaluate_on_batch(batch, |t, rows| {
        batch_ranking_graph(t, rows, batch.identities(), params)
    })
}

pub fn batch_npair_loss(batch: &EmbeddingBatch) -> Result<LossValue> {
    evaluate_on_batch(batch, |t, rows| {
        batch_npair_graph(t, rows, batch.identities())
    })
}

/// Cross-entropy of `logits` against `label`; the gradient is with respect
/// to the logits.
pub fn softmax_ce(logits: &[f64], label: usize) -> Result<LossValue> {
    if logits.is_empty() {
        return Err(Error::Precondition("empty logits".into()));
    }
    let mut tape = Tape::new();
    let z = tape.constant(Tensor::vector(logits.to_vec()));
    let out = softmax_ce_graph(&mut tape, z, label)?;
    let value = tape.scalar(out);
    let gradient = tape.backward(out)?.wrt(z);
    Ok(LossValue { value, gradient })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Builds a batch whose anchor (row 0) has the requested similarities to
    /// the following rows. Rows live in `1 + rows` dimensions: the anchor is
    /// e₀ and row r is `s·e₀ + sqrt(1 − s²)·e_r`.
    fn batch_with_sims(pos: &[f64], neg: &[f64]) -> (EmbeddingBatch, RankingBatch) {
        let n = 1 + pos.len() + neg.len();
        let d = n;
        let mut data = vec![0.0; n * d];
        data[0] = 1.0;
        for (r, &s) in pos.iter().chain(neg).enumerate() {
            let row = r + 1;
            data[row * d] = s;
            data[row * d + row] = (1.0 - s * s).sqrt();
        }
        let mut ids = vec![0; 1 + pos.len()];
        ids.extend((0..neg.len()).map(|j| j + 1));
        let batch = EmbeddingBatch::new(Tensor::matrix(n, d, data).unwrap(), ids).unwrap();
        let rb = RankingBatch::from_labels(batch.identities(), 0);
        (batch, rb)
    }

    #[test]
    fn similarity_basics() {
        assert_eq!(similarity(&[0.6, 0.8], &[0.6, 0.8]).unwrap(), 1.0);
        assert_eq!(similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(similarity(&[1.0, 0.0], &[-1.0, 0.0]).unwrap(), -1.0);
        assert!(matches!(
            similarity(&[1.0, 0.1], &[1.0, 0.0]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn npair_equal_similarity_is_log_two() {
        let (b, rb) = batch_with_sims(&[0.4], &[0.4]);
        let v = npair_loss(&b, &rb).unwrap().value;
        assert!((v - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn npair_rejects_missing_negatives() {
        let (b, _) = batch_with_sims(&[0.4], &[0.1]);
        let rb = RankingBatch::new(&b, 0, vec![1], vec![]).unwrap();
        assert!(matches!(npair_loss(&b, &rb), Err(Error::Precondition(_))));
    }

    #[test]
    fn npair_two_negatives() {
        let (b, rb) = batch_with_sims(&[0.9], &[0.5, 0.7]);
        let v = npair_loss(&b, &rb).unwrap().value;
        let expected = (1.0 + (-0.4f64).exp() + (-0.2f64).exp()).ln();
        assert!((v - expected).abs() < 1e-12);
        assert!((v - 0.9119).abs() < 5e-4);
    }

    #[test]
    fn full_ranking_examples() {
        let (b, rb) = batch_with_sims(&[1.0], &[-1.0]);
        let v = ranking_loss_full(&b, &rb).unwrap().value;
        assert!((v - (1.0 + (-2f64).exp()).ln()).abs() < 1e-12);
        assert!((v - 0.12693).abs() < 1e-5);

        let (b, rb) = batch_with_sims(&[0.3], &[0.3]);
        assert!((ranking_loss_full(&b, &rb).unwrap().value - 2f64.ln()).abs() < 1e-12);

        let (b, rb) = batch_with_sims(&[0.9, 0.8], &[0.85, 0.3]);
        let v = ranking_loss_full(&b, &rb).unwrap().value;
        assert!((v - 1.4251).abs() < 5e-4, "{v}");
    }

    #[test]
    fn ranking_vanishes_when_gates_clip_and_positives_match() {
        let (b, rb) = batch_with_sims(&[1.0, 1.0], &[0.5, 0.5, 0.5]);
        let lv = ranking_loss(&b, &rb, &LossParams::new(0.2, 1.0).unwrap()).unwrap();
        assert_eq!(lv.value, 0.0);
    }

    #[test]
    fn ranking_gate_is_strict_at_threshold() {
        // S(a, n) − min S(a, p) + α = 0.2 − 0.5 + 0.3 = 0 in exact arithmetic;
        // the dyadic values below make it exactly 0 in floating point too.
        let (b, rb) = batch_with_sims(&[0.5], &[0.25]);
        let params = LossParams::new(0.25, 0.0).unwrap();
        let lv = ranking_loss(&b, &rb, &params).unwrap();
        assert_eq!(lv.value, 0.0);
        assert!(lv.gradient.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn ranking_worked_example() {
        let (b, rb) = batch_with_sims(&[0.9, 0.8], &[0.85, 0.3]);
        let v = ranking_loss(&b, &rb, &LossParams::new(0.2, 1.0).unwrap())
            .unwrap()
            .value;
        // second negative: exp(0.3 − 0.8 + 0.2) < 1, clipped
        let expected = (1.0 + 0.25f64.exp()).ln() + 0.25 * (0.01 + 0.04);
        assert!((v - expected).abs() < 1e-12);
        assert!((v - 0.8384).abs() < 5e-4);
    }

    #[test]
    fn ranking_requires_both_sets() {
        let (b, _) = batch_with_sims(&[0.5], &[0.1]);
        let p = LossParams::default();
        let no_neg = RankingBatch::new(&b, 0, vec![1], vec![]).unwrap();
        let no_pos = RankingBatch::new(&b, 0, vec![], vec![2]).unwrap();
        assert!(matches!(
            ranking_loss(&b, &no_neg, &p),
            Err(Error::Precondition(_))
        ));
        assert!(matches!(
            ranking_loss(&b, &no_pos, &p),
            Err(Error::Precondition(_))
        ));
        assert!(matches!(
            ranking_loss_full(&b, &no_pos),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn loss_params_validation() {
        assert!(LossParams::new(2.5, 1.0).is_err());
        assert!(LossParams::new(-0.1, 1.0).is_err());
        assert!(LossParams::new(0.2, -1.0).is_err());
        assert!(LossParams::new(2.0, 0.0).is_ok());
    }

    #[test]
    fn ranking_batch_rejects_mislabelled_rows() {
        let (b, _) = batch_with_sims(&[0.5], &[0.1, 0.2]);
        assert!(RankingBatch::new(&b, 0, vec![2], vec![3]).is_err());
        assert!(RankingBatch::new(&b, 0, vec![1], vec![1]).is_err());
        assert!(RankingBatch::new(&b, 0, vec![0], vec![2]).is_err());
        assert!(RankingBatch::new(&b, 0, vec![1], vec![3, 2]).is_ok());
    }

    /// Anchor and positive placed symmetrically so that both see the same
    /// positive similarity `sp` and negative similarity `sn`.
    fn symmetric_triplet(sp: f64, sn: f64) -> EmbeddingBatch {
        let x = ((1.0 + sp) / 2.0).sqrt();
        let y = ((1.0 - sp) / 2.0).sqrt();
        let z = sn / x;
        let w = (1.0 - z * z).sqrt();
        let rows = vec![vec![x, y, 0.0], vec![x, -y, 0.0], vec![z, 0.0, w]];
        EmbeddingBatch::from_raw_rows(&rows, vec![0, 0, 1]).unwrap()
    }

    #[test]
    fn triplet_satisfied_margin_is_zero() {
        let b = symmetric_triplet(0.9, 0.2);
        assert_eq!(triplet_loss_hard(&b, 0.2).unwrap().value, 0.0);
    }

    #[test]
    fn triplet_tie_costs_the_margin() {
        let b = symmetric_triplet(0.5, 0.5);
        let v = triplet_loss_hard(&b, 0.2).unwrap().value;
        assert!((v - 0.2).abs() < 1e-12, "{v}");
    }

    #[test]
    fn triplet_errors_without_anchor() {
        let b =
            EmbeddingBatch::from_raw_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]], vec![0, 1]).unwrap();
        assert!(matches!(
            triplet_loss_hard(&b, 0.2),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn softmax_examples() {
        assert!((softmax_ce(&[0.0, 0.0], 0).unwrap().value - 2f64.ln()).abs() < 1e-12);
        let big = softmax_ce(&[1000.0, 0.0], 0).unwrap();
        assert!(big.value.is_finite() && big.value.abs() < 1e-12);
        let v = softmax_ce(&[1.0, 2.0, 3.0], 2).unwrap().value;
        let expected = (1f64.exp() + 2f64.exp() + 3f64.exp()).ln() - 3.0;
        assert!((v - expected).abs() < 1e-12);
        assert!((v - 0.40761).abs() < 1e-5);
        assert!(matches!(
            softmax_ce(&[1.0, 2.0], 2),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn softmax_gradient_is_probabilities_minus_onehot() {
        let lv = softmax_ce(&[1.0, 2.0, 3.0], 2).unwrap();
        let z: f64 = [1f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        let expected = [1f64.exp() / z, 2f64.exp() / z, 3f64.exp() / z - 1.0];
        for (g, e) in lv.gradient.data().iter().zip(expected) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_ranking_single_anchor_equals_ranking_loss() {
        // identities [0, 0, 1, 2]: anchors are rows 0 and 1; make a batch
        // with one repeated identity of size 2 and compare against the mean.
        let (b, rb) = batch_with_sims(&[0.6], &[0.1, 0.3]);
        let p = LossParams::default();
        let batch = batch_ranking_loss(&b, &p).unwrap().value;
        let a0 = ranking_loss(&b, &rb, &p).unwrap().value;
        let rb1 = RankingBatch::from_labels(b.identities(), 1);
        let a1 = ranking_loss(&b, &rb1, &p).unwrap().value;
        assert_eq!(batch, (a0 + a1) * 0.5);
    }

    #[test]
    fn npair_partner_wraps() {
        let ids = [3, 0, 3, 1, 3];
        assert_eq!(npair_partner(&ids, 0), Some(2));
        assert_eq!(npair_partner(&ids, 4), Some(0));
        assert_eq!(npair_partner(&ids, 1), None);
    }
}
