//! Open-set detection, corruption robustness and linear-probe evaluation.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::Adam;
use crate::autodiff::{Graph, ParamStore};
use crate::data::{corrupt, CorruptionKind, CorruptionSpec, CorruptionTable, ImageDataset};
use crate::encoder::{Encoder, Inference};
use crate::error::{Error, Result};
use crate::losses::cross_entropy;
use crate::metrics::{
    accuracy, corruption_aggregates, detection_metrics, in_out, CorruptionAggregates, CorruptionGrid, DetectionMetrics,
    SEVERITIES,
};
use crate::scoring::{build_bank, knn_osr_scores, msp_and_entropy_scores, Mahalanobis, MAHALANOBIS_RIDGE};
use crate::tensor::Tensor;

/// Images per eval-mode forward.
pub const EVAL_CHUNK: usize = 128;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scorer {
    #[default]
    Knn,
    Msp,
    Entropy,
    Mahalanobis,
}

impl std::str::FromStr for Scorer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "knn" => Scorer::Knn,
            "msp" => Scorer::Msp,
            "entropy" => Scorer::Entropy,
            "mahalanobis" => Scorer::Mahalanobis,
            other => return Err(Error::Config(format!("unknown scorer {other:?}"))),
        })
    }
}

/// Detection metrics of one trial.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct DetectionEval {
    pub scorer: Scorer,
    /// Neighbours per class; present for the kNN scorer.
    pub k: Option<usize>,
    pub metrics: DetectionMetrics,
    pub n_in: usize,
    pub n_out: usize,
    /// kNN samples whose similarity sum was not positive; see [`knn_rank_score`].
    pub degenerate: usize,
}

fn embed(encoder: &Encoder<f32>, ds: &ImageDataset) -> Result<Inference> {
    encoder.infer(&ds.images, EVAL_CHUNK)
}

fn f64_row(t: &Tensor, i: usize) -> Vec<f64> {
    t.row(i).iter().map(|&v| f64::from(v)).collect()
}

/// Ranking value of a kNN result. Where `Σ_c d^c ≤ 0` the ratio is
/// undefined; its limit as the sum falls to zero with a positive maximum is
/// `+∞`, so such samples rank first, and samples with no positive class sum
/// rank last.
pub fn knn_rank_score(r: &crate::scoring::DetectionResult) -> f64 {
    match r.score {
        Some(s) => s,
        None if r.sums[r.label] > 0.0 => f64::MAX,
        None => f64::MIN,
    }
}

/// Higher-is-in-set scores for each of `sets`, plus the degenerate count.
pub fn score_sets(
    encoder: &Encoder<f32>,
    train: &ImageDataset,
    sets: &[&ImageDataset],
    scorer: Scorer,
    k: usize,
) -> Result<(Vec<Vec<f64>>, usize)> {
    let infer: Vec<Inference> = sets.iter().map(|s| embed(encoder, s)).collect::<Result<_>>()?;
    let mut degenerate = 0;
    let scores = match scorer {
        Scorer::Knn => {
            let bank = build_bank(&embed(encoder, train)?.embeddings, &train.labels, k)?;
            infer
                .iter()
                .map(|inf| {
                    Ok(knn_osr_scores(&bank, &inf.embeddings)?
                        .into_iter()
                        .map(|r| {
                            degenerate += usize::from(r.is_degenerate());
                            knn_rank_score(&r)
                        })
                        .collect())
                })
                .collect::<Result<Vec<Vec<f64>>>>()?
        }
        Scorer::Msp | Scorer::Entropy => infer
            .iter()
            .map(|inf| {
                let logits = inf.logits.as_ref().ok_or_else(|| {
                    Error::Config(format!("scorer {scorer:?} needs a checkpoint with a classifier head"))
                })?;
                Ok((0..logits.shape()[0])
                    .map(|i| {
                        let (msp, neg_entropy) = msp_and_entropy_scores(&f64_row(logits, i));
                        if scorer == Scorer::Msp {
                            msp
                        } else {
                            neg_entropy
                        }
                    })
                    .collect())
            })
            .collect::<Result<Vec<Vec<f64>>>>()?,
        Scorer::Mahalanobis => {
            let model = Mahalanobis::fit(&embed(encoder, train)?.embeddings, &train.labels, MAHALANOBIS_RIDGE)?;
            infer
                .iter()
                .map(|inf| (0..inf.embeddings.shape()[0]).map(|i| model.score(&f64_row(&inf.embeddings, i))).collect())
                .collect::<Result<Vec<Vec<f64>>>>()?
        }
    };
    Ok((scores, degenerate))
}

/// Score `test_in` (positive) against `test_out` with a bank or class model
/// fitted on `train`.
pub fn eval_detection(
    encoder: &Encoder<f32>,
    train: &ImageDataset,
    test_in: &ImageDataset,
    test_out: &ImageDataset,
    scorer: Scorer,
    k: usize,
) -> Result<DetectionEval> {
    let (scores, degenerate) = score_sets(encoder, train, &[test_in, test_out], scorer, k)?;
    let metrics = detection_metrics(&in_out(&scores[0], &scores[1]))?;
    Ok(DetectionEval {
        scorer,
        k: (scorer == Scorer::Knn).then_some(k),
        metrics,
        n_in: scores[0].len(),
        n_out: scores[1].len(),
        degenerate,
    })
}

/// Which classifier produced the corruption-evaluation predictions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Classifier {
    /// Class with the largest top-k similarity sum.
    KnnLabel,
    Head,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct CorruptionEval {
    pub classifier: Classifier,
    pub grid: CorruptionGrid,
    pub aggregates: CorruptionAggregates,
}

fn predict(encoder: &Encoder<f32>, bank: Option<&crate::scoring::FeatureBank>, images: &Tensor) -> Result<Vec<usize>> {
    let inf = encoder.infer(images, EVAL_CHUNK)?;
    match (bank, &inf.logits) {
        (Some(bank), _) => Ok(knn_osr_scores(bank, &inf.embeddings)?.into_iter().map(|r| r.label).collect()),
        (None, Some(logits)) => Ok((0..logits.shape()[0])
            .map(|i| {
                let row = logits.row(i);
                (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b })
            })
            .collect()),
        (None, None) => Err(Error::Config("no classifier available".into())),
    }
}

/// Accuracy per corruption type and severity. Uses the classifier head when
/// the encoder has one, the kNN label rule otherwise.
pub fn eval_corruption(
    encoder: &Encoder<f32>,
    train: &ImageDataset,
    test: &ImageDataset,
    kinds: &[CorruptionKind],
    table: &CorruptionTable,
    k: usize,
    seed: u64,
) -> Result<CorruptionEval> {
    let bank = match encoder.config().has_classifier() {
        true => None,
        false => Some(build_bank(&embed(encoder, train)?.embeddings, &train.labels, k)?),
    };
    let classifier = if bank.is_some() { Classifier::KnnLabel } else { Classifier::Head };
    let clean = accuracy(&predict(encoder, bank.as_ref(), &test.images)?, &test.labels);
    let mut grid = CorruptionGrid::new(clean);
    for (t, &kind) in kinds.iter().enumerate() {
        for severity in 1..=SEVERITIES {
            let cell_seed = seed.wrapping_add((t as u64) << 8 | u64::from(severity));
            let images = corrupt(&test.images, CorruptionSpec { kind, severity }, table, cell_seed)?;
            let acc = accuracy(&predict(encoder, bank.as_ref(), &images)?, &test.labels);
            grid.set(kind.name(), severity, acc);
        }
    }
    let aggregates = corruption_aggregates(&grid)?;
    Ok(CorruptionEval { classifier, grid, aggregates })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct ProbeEval {
    pub classes: usize,
    pub train_samples: usize,
    pub test_samples: usize,
    pub epochs: usize,
    pub lr: f64,
    pub top1: f64,
    /// Omitted with fewer than five classes.
    pub top5: Option<f64>,
    pub note: Option<String>,
}

fn standardize(train: &Tensor, others: &[&Tensor]) -> Result<(Tensor, Vec<Tensor>)> {
    let (n, d) = (train.shape()[0], train.shape()[1]);
    let mut mean = vec![0.0f64; d];
    let mut sq = vec![0.0f64; d];
    for i in 0..n {
        for (j, &v) in train.row(i).iter().enumerate() {
            mean[j] += f64::from(v);
            sq[j] += f64::from(v) * f64::from(v);
        }
    }
    let stats: Vec<(f32, f32)> = mean
        .iter()
        .zip(&sq)
        .map(|(&s, &q)| {
            let m = s / n as f64;
            let sd = (q / n as f64 - m * m).max(0.0).sqrt();
            (m as f32, if sd > 1e-8 { (1.0 / sd) as f32 } else { 1.0 })
        })
        .collect();
    let apply = |t: &Tensor| -> Result<Tensor> {
        if t.shape().len() != 2 || t.shape()[1] != d {
            return Err(Error::shape("probe", format!("features {:?} vs width {d}", t.shape())));
        }
        let data = t.data().iter().enumerate().map(|(i, &v)| (v - stats[i % d].0) * stats[i % d].1).collect();
        Tensor::new(t.shape().to_vec(), data)
    };
    Ok((apply(train)?, others.iter().map(|t| apply(t)).collect::<Result<_>>()?))
}

/// Train a softmax-regression layer on fixed features with full-batch Adam
/// and report held-out top-1 and top-5 accuracy.
pub fn fit_linear_probe(
    train_x: &Tensor,
    train_y: &[usize],
    test_x: &Tensor,
    test_y: &[usize],
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<ProbeEval> {
    if train_x.shape().len() != 2 || train_x.shape()[0] != train_y.len() || test_x.shape()[0] != test_y.len() {
        return Err(Error::shape("probe", "features and labels disagree"));
    }
    let d = train_x.shape()[1];
    let classes = train_y.iter().chain(test_y).max().map_or(0, |m| m + 1);
    if classes < 2 {
        return Err(Error::invalid("probe needs at least 2 classes"));
    }
    let (x, rest) = standardize(train_x, &[test_x])?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bound = (1.0 / d as f64).sqrt();
    let w = (0..d * classes).map(|_| rng.random_range(-bound..bound) as f32).collect();
    let mut params = ParamStore::new();
    params.push("probe.weight", Tensor::new(vec![d, classes], w)?);
    params.push("probe.bias", Tensor::zeros(vec![classes]));
    let adam = Adam::default();
    for t in 1..=epochs as u64 {
        let mut g = Graph::new();
        let xn = g.constant(x.clone());
        let wn = g.param(0, params.get(0).value.clone());
        let bn = g.param(1, params.get(1).value.clone());
        let logits = g.dense(xn, wn, Some(bn))?;
        let loss = cross_entropy(&mut g, logits, train_y)?;
        g.backward(loss)?;
        params.zero_grads();
        params.accumulate(&g)?;
        adam.step(&mut params, lr, t)?;
    }
    let mut g = Graph::new();
    let xn = g.constant(rest[0].clone());
    let wn = g.constant(params.get(0).value.clone());
    let bn = g.constant(params.get(1).value.clone());
    let logits = g.dense(xn, wn, Some(bn))?;
    let logits = g.value(logits);
    let (mut top1, mut top5) = (0usize, 0usize);
    for (i, &y) in test_y.iter().enumerate() {
        let row = logits.row(i);
        let better = row.iter().enumerate().filter(|&(j, &v)| v > row[y] || (v == row[y] && j < y)).count();
        top1 += usize::from(better == 0);
        top5 += usize::from(better < 5);
    }
    let n = test_y.len().max(1) as f64;
    let enough = classes >= 5;
    Ok(ProbeEval {
        classes,
        train_samples: train_y.len(),
        test_samples: test_y.len(),
        epochs,
        lr,
        top1: top1 as f64 / n,
        top5: enough.then(|| top5 as f64 / n),
        note: (!enough).then(|| format!("top-5 omitted: only {classes} classes")),
    })
}

/// Linear probe on the frozen encoder's pooled features.
pub fn linear_probe(
    encoder: &Encoder<f32>,
    train: &ImageDataset,
    test: &ImageDataset,
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<ProbeEval> {
    let tr = embed(encoder, train)?.pooled;
    let te = embed(encoder, test)?.pooled;
    fit_linear_probe(&tr, &train.labels, &te, &test.labels, epochs, lr, seed)
}

/// Shuffle labels in place with a seeded permutation (null-control helper).
pub fn shuffled_labels(labels: &[usize], seed: u64) -> Vec<usize> {
    let mut out = labels.to_vec();
    out.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    out
}
