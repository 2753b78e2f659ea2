//! Finite-difference verification of loss and encoder gradients on random
//! batches that stay clear of non-differentiable points.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::autodiff::{finite_diff_grad, max_relative_error, Tape, Var};
use crate::data::Raster;
use crate::encoder::{encode, init_params, EncoderConfig, EncoderParams, ImagePair};
use crate::error::{Error, Result};
use crate::experiment::{batch_gradients, LossKind};
use crate::losses::{
    anchor_rows, batch_ranking_graph, npair_graph, npair_loss, ranking_full_graph, ranking_graph,
    ranking_loss, ranking_loss_full, softmax_ce, triplet_hard_graph, triplet_loss_hard,
    EmbeddingBatch, LossParams, RankingBatch,
};
use crate::sampler::{seeded_rng, SeededRng};
use crate::tensor::{l2_normalize, Tensor};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Minimum distance from any kink or selection tie for a sample to count.
pub const BOUNDARY_MARGIN: f64 = 2e-4;
pub const LOSS_TOLERANCE: f64 = 1e-5;
pub const ENCODER_TOLERANCE: f64 = 1e-4;

const EMBED_DIM: usize = 16;
const MAX_RESAMPLES_PER_TRIAL: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradCase {
    Npair,
    RankingFull,
    Ranking,
    Triplet,
    Softmax,
    /// Batched ranking loss composed with the encoder, differentiated with
    /// respect to every encoder parameter.
    EncoderRanking,
}

impl GradCase {
    pub const ALL: [GradCase; 6] = [
        GradCase::Npair,
        GradCase::RankingFull,
        GradCase::Ranking,
        GradCase::Triplet,
        GradCase::Softmax,
        GradCase::EncoderRanking,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GradCase::Npair => "npair",
            GradCase::RankingFull => "ranking-full",
            GradCase::Ranking => "ranking",
            GradCase::Triplet => "triplet",
            GradCase::Softmax => "softmax",
            GradCase::EncoderRanking => "encoder-ranking",
        }
    }

    pub fn default_tolerance(self) -> f64 {
        match self {
            GradCase::EncoderRanking => ENCODER_TOLERANCE,
            _ => LOSS_TOLERANCE,
        }
    }
}

impl fmt::Display for GradCase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GradCase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GradCase::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown gradient check {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub case: GradCase,
    pub trials: usize,
    /// Samples discarded for lying too close to a kink or tie.
    pub resampled: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}: trials={} resampled={} max_rel_error={:.3e} tolerance={:.1e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.case,
            self.trials,
            self.resampled,
            self.max_rel_error,
            self.tolerance
        )
    }
}

/// Runs `trials` accepted samples of `case`, returning the worst relative
/// error between analytic and central-difference gradients.
pub fn run_grad_check(
    case: GradCase,
    trials: usize,
    tolerance: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    if trials == 0 {
        return Err(Error::Config("trials must be >= 1".into()));
    }
    if !(tolerance >= 0.0) {
        return Err(Error::Config(format!(
            "tolerance must be >= 0, got {tolerance}"
        )));
    }
    let mut rng = seeded_rng(seed);
    let mut worst: f64 = 0.0;
    let mut resampled = 0;
    for _ in 0..trials {
        let mut attempts = 0;
        let err = loop {
            if let Some(e) = trial(case, &mut rng)? {
                break e;
            }
            resampled += 1;
            attempts += 1;
            if attempts >= MAX_RESAMPLES_PER_TRIAL {
                return Err(Error::Precondition(format!(
                    "{case}: no sample clear of kinks after {attempts} draws"
                )));
            }
        };
        worst = worst.max(err);
    }
    Ok(GradCheckReport {
        case,
        trials,
        resampled,
        max_rel_error: worst,
        tolerance,
        passed: worst <= tolerance,
    })
}

fn trial(case: GradCase, rng: &mut SeededRng) -> Result<Option<f64>> {
    match case {
        GradCase::Softmax => softmax_trial(rng).map(Some),
        GradCase::EncoderRanking => encoder_trial(rng),
        _ => embedding_trial(case, rng),
    }
}

/// Unit vector with a standard normal direction.
pub fn random_unit<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        if let Ok(u) = l2_normalize(&v) {
            return u;
        }
    }
}

/// Smallest gap between the two smallest values, infinite for fewer than
/// two values.
fn min_gap(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    values
        .windows(2)
        .map(|w| w[1] - w[0])
        .next()
        .unwrap_or(f64::INFINITY)
}

fn sims(batch: &EmbeddingBatch, anchor: usize, rows: &[usize]) -> Vec<f64> {
    rows.iter()
        .map(|&r| crate::tensor::dot(batch.row(anchor), batch.row(r)))
        .collect()
}

fn build_on_rows(
    case: GradCase,
    tape: &mut Tape,
    rows: &[Var],
    rb: &RankingBatch,
    identities: &[usize],
    params: &LossParams,
) -> Result<Var> {
    match case {
        GradCase::Npair => npair_graph(tape, rows, rb.anchor(), rb.positives()[0], rb.negatives()),
        GradCase::RankingFull => ranking_full_graph(tape, rows, rb),
        GradCase::Ranking => ranking_graph(tape, rows, rb, params),
        GradCase::Triplet => triplet_hard_graph(tape, rows, identities, params.alpha),
        _ => unreachable!("not an embedding case"),
    }
}

fn embedding_trial(case: GradCase, rng: &mut SeededRng) -> Result<Option<f64>> {
    let p = if case == GradCase::Npair {
        1
    } else {
        rng.random_range(1..=10)
    };
    let n = rng.random_range(1..=54);
    let rows: Vec<Vec<f64>> = (0..1 + p + n)
        .map(|_| random_unit(rng, EMBED_DIM))
        .collect();
    let mut identities = vec![0; 1 + p];
    if case == GradCase::Triplet {
        let groups = rng.random_range(1..=n);
        identities.extend((0..n).map(|_| rng.random_range(1..=groups)));
    } else {
        identities.extend(1..=n);
    }
    let batch = EmbeddingBatch::from_raw_rows(&rows, identities.clone())?;
    let rb = RankingBatch::from_labels(&identities, 0);
    let params = LossParams::new(rng.random_range(0.0..=1.0), rng.random_range(0.0..=5.0))?;

    let mut margin = {
        let mut tape = Tape::new();
        let vars = batch.record(&mut tape);
        build_on_rows(case, &mut tape, &vars, &rb, &identities, &params)?;
        tape.kink_margin()
    };
    match case {
        GradCase::Ranking => margin = margin.min(min_gap(&mut sims(&batch, 0, rb.positives()))),
        GradCase::Triplet => {
            for k in anchor_rows(&identities) {
                let rbk = RankingBatch::from_labels(&identities, k);
                margin = margin.min(min_gap(&mut sims(&batch, k, rbk.positives())));
                let mut neg: Vec<f64> = sims(&batch, k, rbk.negatives())
                    .iter()
                    .map(|s| -s)
                    .collect();
                margin = margin.min(min_gap(&mut neg));
            }
        }
        _ => {}
    }
    if margin < BOUNDARY_MARGIN {
        return Ok(None);
    }

    let analytic = match case {
        GradCase::Npair => npair_loss(&batch, &rb)?,
        GradCase::RankingFull => ranking_loss_full(&batch, &rb)?,
        GradCase::Ranking => ranking_loss(&batch, &rb, &params)?,
        GradCase::Triplet => triplet_loss_hard(&batch, params.alpha)?,
        _ => unreachable!(),
    }
    .gradient;
    let f = |x: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = (0..x.rows())
            .map(|r| tape.constant(Tensor::vector(x.row(r).to_vec())))
            .collect();
        let out = build_on_rows(case, &mut tape, &vars, &rb, &identities, &params)?;
        Ok(tape.scalar(out))
    };
    let numeric = finite_diff_grad(f, batch.features(), FD_STEP)?;
    Ok(Some(max_relative_error(&analytic, &numeric)))
}

fn softmax_trial(rng: &mut SeededRng) -> Result<f64> {
    let classes = rng.random_range(2..=20);
    let logits: Vec<f64> = (0..classes)
        .map(|_| 3.0 * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let label = rng.random_range(0..classes);
    let analytic = softmax_ce(&logits, label)?.gradient;
    let numeric = finite_diff_grad(
        |x| Ok(softmax_ce(x.data(), label)?.value),
        &Tensor::vector(logits),
        FD_STEP,
    )?;
    Ok(max_relative_error(&analytic, &numeric))
}

/// Encoder size used by the encoder gradient check.
pub fn micro_encoder_config() -> EncoderConfig {
    EncoderConfig {
        height: 4,
        width: 2,
        channels: 3,
        stream_width: 3,
        level_widths: [4, 3, 5],
        output_dim: 8,
        seed: 0,
    }
}

fn random_pair(config: &EncoderConfig, rng: &mut SeededRng) -> Result<ImagePair> {
    let (h, w, c) = (config.height, config.width, config.channels);
    let image = Raster::new(
        h,
        w,
        c,
        (0..h * w * c).map(|_| rng.random::<f64>()).collect(),
    )?;
    let mask = Raster::new(
        h,
        w,
        1,
        (0..h * w)
            .map(|_| f64::from(rng.random_bool(0.5)))
            .collect(),
    )?;
    ImagePair::with_mask(image, &mask)
}

fn flatten(params: &EncoderParams) -> Tensor {
    Tensor::vector(
        params
            .tensors()
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect(),
    )
}

fn unflatten(config: &EncoderConfig, flat: &[f64]) -> Result<EncoderParams> {
    let mut tensors = Vec::new();
    let mut pos = 0;
    for shape in config.param_shapes() {
        let n: usize = shape.iter().product();
        tensors.push(Tensor::new(shape, flat[pos..pos + n].to_vec())?);
        pos += n;
    }
    EncoderParams::from_tensors(config.clone(), tensors)
}

/// Two identities, three images of the first and two of the second; every
/// parameter, biases included, drawn at random.
fn encoder_trial(rng: &mut SeededRng) -> Result<Option<f64>> {
    let config = micro_encoder_config();
    let init = init_params(&config, rng)?;
    let mut tensors = init.tensors().to_vec();
    for t in tensors.iter_mut().filter(|t| t.rank() == 1) {
        for v in t.data_mut() {
            *v = rng.random_range(-0.2..0.2);
        }
    }
    let params = EncoderParams::from_tensors(config.clone(), tensors)?;
    let identities = [0, 0, 0, 1, 1];
    let pairs: Vec<ImagePair> = identities
        .iter()
        .map(|_| random_pair(&config, rng))
        .collect::<Result<_>>()?;
    let loss_params = LossParams::new(rng.random_range(0.0..=1.0), rng.random_range(0.0..=5.0))?;

    let refs: Vec<&ImagePair> = pairs.iter().collect();
    let step = batch_gradients(
        &params,
        None,
        &refs,
        &identities,
        LossKind::Ranking,
        &loss_params,
    )?;
    let feats: Vec<Vec<f64>> = pairs
        .iter()
        .map(|p| encode(&params, p))
        .collect::<Result<_>>()?;
    let batch = EmbeddingBatch::from_raw_rows(&feats, identities.to_vec())?;
    let mut margin = step.kink_margin;
    for k in anchor_rows(&identities) {
        let rb = RankingBatch::from_labels(&identities, k);
        margin = margin.min(min_gap(&mut sims(&batch, k, rb.positives())));
    }
    if margin < BOUNDARY_MARGIN {
        return Ok(None);
    }

    let mut analytic = Vec::with_capacity(params.param_count());
    for (i, t) in params.tensors().iter().enumerate() {
        match step.encoder.get(crate::autodiff::ParamId(i)) {
            Some(g) => analytic.extend_from_slice(g.data()),
            None => analytic.extend(std::iter::repeat_n(0.0, t.len())),
        }
    }
    let f = |x: &Tensor| -> Result<f64> {
        let p = unflatten(&config, x.data())?;
        let mut tape = Tape::new();
        let mut rows = Vec::with_capacity(pairs.len());
        for pair in &pairs {
            rows.push(tape.constant(Tensor::vector(encode(&p, pair)?)));
        }
        let out = batch_ranking_graph(&mut tape, &rows, &identities, &loss_params)?;
        Ok(tape.scalar(out))
    };
    let numeric = finite_diff_grad(f, &flatten(&params), FD_STEP)?;
    Ok(Some(max_relative_error(
        &Tensor::vector(analytic),
        &numeric,
    )))
}
