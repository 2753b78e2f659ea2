//! Training, evaluation and sweeps over a loaded corpus.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{GradientSet, ParamId, Tape, Var};
use crate::data::{
    read_manifest, read_raster, ManifestRecord, Raster, Split, SyntheticCorpus, SyntheticSpec,
};
use crate::encoder::{encode, encode_with, sgd_step, EncoderConfig, EncoderParams, ImagePair};
use crate::error::{Error, Result};
use crate::eval::{evaluate_multi_query, evaluate_single_query, EvalReport, FeatureSet, Pooling};
use crate::losses::{
    batch_npair_graph, batch_ranking_graph, softmax_ce_graph, triplet_hard_graph, LossParams,
};
use crate::sampler::{seeded_rng, BatchSpec, DatasetIndex, Sampler};
use crate::tensor::Tensor;

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "MASKRANK_THREADS";

const SAMPLER_STREAM: u64 = 0x5341_4d50;
const HEAD_STREAM: u64 = 0x4845_4144;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Softmax,
    Triplet,
    Npair,
    Ranking,
}

impl LossKind {
    pub const ALL: [LossKind; 4] = [
        LossKind::Softmax,
        LossKind::Triplet,
        LossKind::Npair,
        LossKind::Ranking,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Softmax => "softmax",
            LossKind::Triplet => "triplet",
            LossKind::Npair => "npair",
            LossKind::Ranking => "ranking",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown loss {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    #[default]
    Single,
    Multi,
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(Protocol::Single),
            "multi" => Ok(Protocol::Multi),
            _ => Err(Error::Config(format!("unknown protocol {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub loss: LossKind,
    pub loss_params: LossParams,
    pub batch: BatchSpec,
    pub encoder: EncoderConfig,
    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub manifest: PathBuf,
    pub out_dir: PathBuf,
    /// Feed masked images to the second stream; when false it sees zeros.
    pub use_masks: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            loss: LossKind::Ranking,
            loss_params: LossParams::default(),
            batch: BatchSpec::default(),
            encoder: EncoderConfig::default(),
            steps: 500,
            learning_rate: 0.05,
            seed: 0,
            manifest: PathBuf::from("manifest.jsonl"),
            out_dir: PathBuf::from("out"),
            use_masks: true,
        }
    }
}

impl ExperimentConfig {
    /// Checks values that do not depend on the filesystem.
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        self.loss_params
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        self.batch
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        self.encoder.validate()
    }

    /// [`validate`](Self::validate) plus existence of the manifest.
    pub fn validate_paths(&self) -> Result<()> {
        self.validate()?;
        if !self.manifest.is_file() {
            return Err(Error::Config(format!(
                "manifest {} does not exist",
                self.manifest.display()
            )));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// One loaded record.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub record: ManifestRecord,
    pub image: Raster,
    pub mask: Option<Raster>,
}

impl Sample {
    /// Encoder input. Without a mask, or with `use_masks` off, the masked
    /// stream is all zeros.
    pub fn pair(&self, use_masks: bool) -> Result<ImagePair> {
        match (&self.mask, use_masks) {
            (Some(m), true) => ImagePair::with_mask(self.image.clone(), m),
            _ => Ok(ImagePair::without_mask(self.image.clone())),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    pub samples: Vec<Sample>,
}

impl Corpus {
    pub fn from_manifest(path: &Path) -> Result<Self> {
        let records = read_manifest(path)?;
        let mut samples = Vec::with_capacity(records.len());
        for record in records {
            let image = read_raster(&record.image)?;
            let mask = record.mask.as_deref().map(read_raster).transpose()?;
            if let (Some(m), Some(path)) = (&mask, &record.mask) {
                if (m.height(), m.width()) != (image.height(), image.width()) {
                    return Err(Error::data(
                        path,
                        format!(
                            "mask is {}x{} but image is {}x{}",
                            m.height(),
                            m.width(),
                            image.height(),
                            image.width()
                        ),
                    ));
                }
            }
            samples.push(Sample {
                record,
                image,
                mask,
            });
        }
        Ok(Corpus { samples })
    }

    pub fn from_synthetic(corpus: &SyntheticCorpus) -> Self {
        let samples = corpus
            .records
            .iter()
            .zip(&corpus.images)
            .zip(&corpus.masks)
            .map(|((record, image), mask)| Sample {
                record: record.clone(),
                image: image.clone(),
                mask: record.mask.as_ref().map(|_| mask.clone()),
            })
            .collect();
        Corpus { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Positions of the samples in `split`, in corpus order.
    pub fn split(&self, split: Split) -> Vec<usize> {
        (0..self.samples.len())
            .filter(|&i| self.samples[i].record.split == split)
            .collect()
    }
}

/// Worker count from [`THREADS_ENV`], defaulting to 1.
pub fn thread_count() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::Config(format!(
                "{THREADS_ENV} must be a positive integer, got {v:?}"
            ))),
        },
    }
}

fn thread_pool() -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(thread_count()?)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// Linear classifier used only by the softmax loss.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftmaxHead {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl SoftmaxHead {
    pub fn init<R: Rng + ?Sized>(dim: usize, classes: usize, rng: &mut R) -> Self {
        let s = (6.0 / (dim + classes) as f64).sqrt();
        let data = (0..dim * classes)
            .map(|_| rng.random_range(-s..s))
            .collect();
        SoftmaxHead {
            weight: Tensor::matrix(dim, classes, data).expect("head shape"),
            bias: Tensor::zeros(&[classes]),
        }
    }
}

/// Loss value and gradients of one training batch.
#[derive(Clone, Debug)]
pub struct StepGradients {
    pub loss: f64,
    pub encoder: GradientSet,
    /// Weight and bias gradients of the softmax head, when one is used.
    pub head: Option<(Tensor, Tensor)>,
    /// Smallest distance of any relu or gate input to its kink.
    pub kink_margin: f64,
}

fn loss_graph(
    tape: &mut Tape,
    rows: &[Var],
    identities: &[usize],
    loss: LossKind,
    params: &LossParams,
    head: Option<(Var, Var)>,
) -> Result<Var> {
    match loss {
        LossKind::Ranking => batch_ranking_graph(tape, rows, identities, params),
        LossKind::Npair => batch_npair_graph(tape, rows, identities),
        LossKind::Triplet => triplet_hard_graph(tape, rows, identities, params.alpha),
        LossKind::Softmax => {
            let (w, b) =
                head.ok_or_else(|| Error::Precondition("softmax loss needs a head".into()))?;
            let mut terms = Vec::with_capacity(rows.len());
            for (&r, &label) in rows.iter().zip(identities) {
                let logits = tape.affine(r, w, b);
                terms.push(softmax_ce_graph(tape, logits, label)?);
            }
            let total = tape.sum(&terms);
            Ok(tape.scale(total, 1.0 / rows.len() as f64))
        }
    }
}

/// Loss and gradients of one batch. Every image is encoded on its own tape;
/// the loss is built on a separate tape over the embeddings and its
/// embedding gradients are pushed back through each image tape. Per-image
/// gradients are summed in batch order.
pub fn batch_gradients(
    params: &EncoderParams,
    head: Option<&SoftmaxHead>,
    pairs: &[&ImagePair],
    identities: &[usize],
    loss: LossKind,
    loss_params: &LossParams,
) -> Result<StepGradients> {
    if pairs.len() != identities.len() {
        return Err(Error::Shape("pair and label counts differ".into()));
    }
    let config = params.config();
    let forward: Vec<(Tape, Var)> = pairs
        .par_iter()
        .map(|pair| {
            let mut tape = Tape::new();
            let vars = params.record(&mut tape);
            let out = encode_with(&mut tape, config, &vars, pair)?;
            Ok((tape, out))
        })
        .collect::<Result<_>>()?;

    let mut lt = Tape::new();
    let rows: Vec<Var> = forward
        .iter()
        .map(|(t, out)| lt.constant(t.value(*out).clone()))
        .collect();
    let head_vars = head.map(|h| {
        (
            lt.param(ParamId(0), h.weight.clone()),
            lt.param(ParamId(1), h.bias.clone()),
        )
    });
    let out = loss_graph(&mut lt, &rows, identities, loss, loss_params, head_vars)?;
    let value = lt.scalar(out);
    if !value.is_finite() {
        return Err(Error::NonFinite("training loss"));
    }
    let adj = lt.backward(out)?;
    let seeds: Vec<Tensor> = rows.iter().map(|&r| adj.wrt(r)).collect();
    let head_grads = head_vars.map(|(w, b)| (adj.wrt(w), adj.wrt(b)));

    let per_image: Vec<GradientSet> = forward
        .par_iter()
        .zip(seeds.into_par_iter())
        .map(|((tape, out), seed)| Ok(tape.backward_with(*out, seed)?.params()))
        .collect::<Result<_>>()?;
    let mut encoder = GradientSet::new();
    for g in &per_image {
        encoder.accumulate(g);
    }
    let kink_margin = forward
        .iter()
        .map(|(t, _)| t.kink_margin())
        .fold(lt.kink_margin(), f64::min);
    Ok(StepGradients {
        loss: value,
        encoder,
        head: head_grads,
        kink_margin,
    })
}

/// Trained encoder plus the per-step loss log.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: EncoderParams,
    pub losses: Vec<f64>,
}

impl TrainOutcome {
    /// `step,loss` CSV with one row per step.
    pub fn log_csv(&self) -> String {
        let mut s = String::from("step,loss\n");
        for (i, l) in self.losses.iter().enumerate() {
            s.push_str(&format!("{},{}\n", i + 1, l));
        }
        s
    }
}

/// Runs the sampler, encoder, loss and SGD loop for `config.steps` steps on
/// the train split. Encoder initialization uses `config.seed`; the sampler
/// and softmax head use fixed streams derived from it.
pub fn train(config: &ExperimentConfig, corpus: &Corpus) -> Result<TrainOutcome> {
    config.validate()?;
    let train_rows = corpus.split(Split::Train);
    let ids: Vec<&str> = train_rows
        .iter()
        .map(|&i| corpus.samples[i].record.id.as_str())
        .collect();
    let cams: Vec<&str> = train_rows
        .iter()
        .map(|&i| corpus.samples[i].record.cam.as_str())
        .collect();
    let index = DatasetIndex::new(&ids, &cams)?;
    config.batch.check_feasible(&index)?;
    let pairs: Vec<ImagePair> = train_rows
        .iter()
        .map(|&i| corpus.samples[i].pair(config.use_masks))
        .collect::<Result<_>>()?;

    let mut encoder_config = config.encoder.clone();
    encoder_config.seed = config.seed;
    let mut params = EncoderParams::init(&encoder_config)?;
    let mut head = (config.loss == LossKind::Softmax).then(|| {
        SoftmaxHead::init(
            encoder_config.output_dim,
            index.identity_count(),
            &mut seeded_rng(config.seed ^ HEAD_STREAM),
        )
    });
    let mut sampler = Sampler::new(config.batch, config.seed ^ SAMPLER_STREAM);
    let pool = thread_pool()?;
    let lr = config.learning_rate;

    let mut losses = Vec::with_capacity(config.steps);
    for _ in 0..config.steps {
        let batch = sampler.next_batch(&index)?;
        let batch_pairs: Vec<&ImagePair> = batch.records.iter().map(|&r| &pairs[r]).collect();
        let step = pool.install(|| {
            batch_gradients(
                &params,
                head.as_ref(),
                &batch_pairs,
                &batch.identities,
                config.loss,
                &config.loss_params,
            )
        })?;
        sgd_step(&mut params, &step.encoder, lr)?;
        if let (Some(h), Some((gw, gb))) = (head.as_mut(), step.head.as_ref()) {
            for (w, g) in h.weight.data_mut().iter_mut().zip(gw.data()) {
                *w -= lr * g;
            }
            for (b, g) in h.bias.data_mut().iter_mut().zip(gb.data()) {
                *b -= lr * g;
            }
        }
        losses.push(step.loss);
    }
    Ok(TrainOutcome { params, losses })
}

/// Encodes the samples at `rows`, in order.
pub fn encode_rows(
    params: &EncoderParams,
    corpus: &Corpus,
    rows: &[usize],
    use_masks: bool,
) -> Result<FeatureSet> {
    let pool = thread_pool()?;
    let feats: Vec<Vec<f64>> = pool.install(|| {
        rows.par_iter()
            .map(|&i| encode(params, &corpus.samples[i].pair(use_masks)?))
            .collect::<Result<_>>()
    })?;
    let ids = rows
        .iter()
        .map(|&i| corpus.samples[i].record.id.clone())
        .collect();
    let cams = rows
        .iter()
        .map(|&i| corpus.samples[i].record.cam.clone())
        .collect();
    FeatureSet::from_rows(feats, ids, cams)
}

/// Encodes the query and gallery splits and scores them.
pub fn evaluate(
    params: &EncoderParams,
    corpus: &Corpus,
    protocol: Protocol,
    pooling: Pooling,
    use_masks: bool,
) -> Result<EvalReport> {
    let q = corpus.split(Split::Query);
    let g = corpus.split(Split::Gallery);
    for (rows, name) in [(&q, "query"), (&g, "gallery")] {
        if rows.is_empty() {
            return Err(Error::InsufficientData {
                what: if name == "query" {
                    "query records"
                } else {
                    "gallery records"
                },
                needed: 1,
                available: 0,
            });
        }
    }
    let queries = encode_rows(params, corpus, &q, use_masks)?;
    let gallery = encode_rows(params, corpus, &g, use_masks)?;
    match protocol {
        Protocol::Single => evaluate_single_query(&queries, &gallery),
        Protocol::Multi => evaluate_multi_query(&queries, &gallery, pooling),
    }
}

/// `train` followed by single-query `evaluate`.
pub fn train_and_evaluate(
    config: &ExperimentConfig,
    corpus: &Corpus,
) -> Result<(TrainOutcome, EvalReport)> {
    let outcome = train(config, corpus)?;
    let report = evaluate(
        &outcome.params,
        corpus,
        Protocol::Single,
        Pooling::Mean,
        config.use_masks,
    )?;
    Ok((outcome, report))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub alphas: Vec<f64>,
    pub lambdas: Vec<f64>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        SweepGrid {
            alphas: vec![0.1, 0.15, 0.2, 0.5, 1.0],
            lambdas: vec![0.0, 1.0, 2.0, 5.0, 10.0],
        }
    }
}

impl SweepGrid {
    pub fn validate(&self) -> Result<()> {
        if self.alphas.is_empty() || self.lambdas.is_empty() {
            return Err(Error::Config("sweep grid axes must be non-empty".into()));
        }
        for &a in &self.alphas {
            for &l in &self.lambdas {
                LossParams::new(a, l).map_err(|e| Error::Config(e.to_string()))?;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub alpha: f64,
    pub lambda: f64,
    pub rank1: f64,
    pub map: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossRow {
    pub loss: LossKind,
    pub rank1: f64,
    pub map: f64,
}

fn cell_error(cell: String, e: Error) -> Error {
    Error::Cell {
        cell,
        inner: Box::new(e),
    }
}

/// Trains and evaluates every `(alpha, lambda)` cell, alpha-major.
pub fn sweep(
    config: &ExperimentConfig,
    corpus: &Corpus,
    grid: &SweepGrid,
) -> Result<Vec<SweepRow>> {
    grid.validate()?;
    let mut rows = Vec::with_capacity(grid.alphas.len() * grid.lambdas.len());
    for &alpha in &grid.alphas {
        for &lambda in &grid.lambdas {
            let cell = ExperimentConfig {
                loss_params: LossParams { alpha, lambda },
                ..config.clone()
            };
            let (_, report) = train_and_evaluate(&cell, corpus)
                .map_err(|e| cell_error(format!("cell alpha={alpha} lambda={lambda}"), e))?;
            rows.push(SweepRow {
                alpha,
                lambda,
                rank1: report.rank(1),
                map: report.map,
            });
        }
    }
    Ok(rows)
}

/// Trains and evaluates each loss in `losses` with otherwise identical
/// settings.
pub fn compare_losses(
    config: &ExperimentConfig,
    corpus: &Corpus,
    losses: &[LossKind],
) -> Result<Vec<LossRow>> {
    let mut rows = Vec::with_capacity(losses.len());
    for &loss in losses {
        let cell = ExperimentConfig {
            loss,
            ..config.clone()
        };
        let (_, report) =
            train_and_evaluate(&cell, corpus).map_err(|e| cell_error(format!("loss {loss}"), e))?;
        rows.push(LossRow {
            loss,
            rank1: report.rank(1),
            map: report.map,
        });
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("alpha,lambda,rank1,map\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.alpha, r.lambda, r.rank1, r.map));
    }
    s
}

pub fn loss_csv(rows: &[LossRow]) -> String {
    let mut s = String::from("loss,rank1,map\n");
    for r in rows {
        s.push_str(&format!("{},{},{}\n", r.loss, r.rank1, r.map));
    }
    s
}

/// Synthetic corpus used for the loss, margin and mask comparisons.
pub fn standard_benchmark_spec() -> SyntheticSpec {
    SyntheticSpec {
        identities: 60,
        images_per_identity: 8,
        test_identities: 30,
        seed: 2024,
        ..SyntheticSpec::default()
    }
}

/// Training settings paired with [`standard_benchmark_spec`].
pub fn standard_benchmark_config() -> ExperimentConfig {
    ExperimentConfig {
        steps: 1000,
        seed: 7,
        ..ExperimentConfig::default()
    }
}
