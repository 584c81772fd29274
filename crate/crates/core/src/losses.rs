//! Contrastive and cross-entropy objectives, built as graph nodes.
//!
//! All contrastive losses take a `2N×D` embedding node whose row `i` and row
//! `i + N` are the two views of sample `i`. Exponentials are taken after
//! subtracting a per-row constant (the largest logit in the anchor's
//! denominator set); the shift cancels analytically and keeps every kept
//! `exp` term at most one.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const DEFAULT_TEMPERATURE: f64 = 0.1;
pub const GAMMA_MIN: f64 = 0.1;
pub const GAMMA_MAX: f64 = 0.5;

/// Which samples enter the SupCon denominator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Denominator {
    /// Only samples whose label differs from the anchor's.
    #[default]
    AsPrinted,
    /// Every sample except the anchor itself.
    Standard,
}

/// Embeddings of a contrastive minibatch.
#[derive(Clone, Debug)]
pub struct ContrastiveBatch<'a> {
    pub embeddings: NodeId,
    pub labels: Option<&'a [usize]>,
    pub temperature: f64,
}

impl<'a> ContrastiveBatch<'a> {
    pub fn new(embeddings: NodeId, labels: Option<&'a [usize]>, temperature: f64) -> Self {
        ContrastiveBatch { embeddings, labels, temperature }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct LossWeights {
    /// Weight of the supervised contrastive term.
    pub theta: f64,
    /// Weight of the self-supervised term.
    pub lambda: f64,
    /// Mask side ratio; its square weights the mixing term.
    pub gamma: f64,
    /// Weight of cross-entropy in the CE+SSL objective.
    #[serde(default = "one")]
    pub ce_weight: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { theta: 1.0, lambda: 1.0, gamma: 0.3, ce_weight: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta >= 0.0 && self.lambda >= 0.0 && self.ce_weight >= 0.0) {
            return Err(Error::invalid("loss weights must be nonnegative"));
        }
        Ok(())
    }
}

pub fn check_gamma(gamma: f64) -> Result<()> {
    if (GAMMA_MIN..=GAMMA_MAX).contains(&gamma) {
        Ok(())
    } else {
        Err(Error::invalid(format!("gamma {gamma} outside [{GAMMA_MIN}, {GAMMA_MAX}]")))
    }
}

/// Individual terms of an objective, for logging.
#[derive(Clone, Debug, Default)]
pub struct LossTerms {
    pub total: Option<NodeId>,
    pub supcon: Option<NodeId>,
    pub simclr: Option<NodeId>,
    pub mix: Option<NodeId>,
    pub ce: Option<NodeId>,
}

fn check_batch<F: Real>(g: &Graph<F>, batch: &ContrastiveBatch) -> Result<usize> {
    if !(batch.temperature > 0.0) {
        return Err(Error::invalid(format!("temperature must be > 0, got {}", batch.temperature)));
    }
    let shape = g.value(batch.embeddings).shape();
    if shape.len() != 2 {
        return Err(Error::shape("contrastive", format!("embeddings must be 2-d, got {shape:?}")));
    }
    let rows = shape[0];
    if rows < 2 || !rows.is_multiple_of(2) {
        return Err(Error::invalid(format!("contrastive batch needs 2N ≥ 2 rows, got {rows}")));
    }
    if let Some(l) = batch.labels {
        if l.len() != rows {
            return Err(Error::shape("contrastive", format!("{} labels for {rows} rows", l.len())));
        }
    }
    Ok(rows)
}

/// Shared tail of the InfoNCE-style losses.
///
/// `denom[i][k]` selects the denominator set of anchor `i`; `pos_weight[i][k]`
/// weights the positive logits (rows sum to one for active anchors);
/// `active[i]` marks anchors that count towards the mean.
fn info_nce<F: Real>(
    g: &mut Graph<F>,
    embeddings: NodeId,
    temperature: f64,
    denom: &[Vec<bool>],
    pos_weight: &[Vec<f64>],
    active: &[bool],
) -> Result<NodeId> {
    let n = denom.len();
    let count = active.iter().filter(|&&a| a).count();
    if count == 0 {
        // Nothing to average, e.g. a single-class batch under the as-printed
        // denominator. The term contributes zero.
        let z = g.constant(Tensor::scalar(F::zero()));
        return g.scale(z, F::one());
    }
    let sim = g.pairwise_cosine(embeddings)?;
    let logits = g.scale(sim, F::of(1.0 / temperature))?;
    let lv = g.value(logits).clone();
    // Anchors with an empty denominator are inactive; give them the full row
    // so their (discarded) terms stay finite.
    let open: Vec<bool> = denom.iter().map(|r| r.iter().any(|&b| b)).collect();
    let mut shift = Vec::with_capacity(n * n);
    let mut mask = Vec::with_capacity(n * n);
    let exclude = 2.0 / temperature + 200.0;
    for i in 0..n {
        let row = lv.row(i);
        let keep = |k: usize| if open[i] { denom[i][k] } else { k != i || n == 1 };
        let m = (0..n).filter(|&k| keep(k)).map(|k| row[k].to_f64_lossy()).fold(f64::NEG_INFINITY, f64::max);
        let m = if m.is_finite() { m } else { 0.0 };
        shift.extend(std::iter::repeat_n(F::of(m), n));
        mask.extend((0..n).map(|k| F::of(if keep(k) { 0.0 } else { -exclude })));
    }
    let shift = g.constant(Tensor::new(vec![n, n], shift)?);
    let mask = g.constant(Tensor::new(vec![n, n], mask)?);
    let centered = g.sub(logits, shift)?;
    let masked = g.add(centered, mask)?;
    let e = g.exp(masked)?;
    let den = g.sum_last_axis(e)?;
    let log_den = g.log(den)?;
    let w: Vec<F> = pos_weight.iter().flatten().map(|&v| F::of(v)).collect();
    let w = g.constant(Tensor::new(vec![n, n], w)?);
    let picked = g.mul(centered, w)?;
    let pos = g.sum_last_axis(picked)?;
    let per_anchor = g.sub(log_den, pos)?;
    let act: Vec<F> = active.iter().map(|&a| F::of(if a { 1.0 } else { 0.0 })).collect();
    let act = g.constant(Tensor::new(vec![n], act)?);
    let kept = g.mul(per_anchor, act)?;
    let total = g.sum(kept)?;
    g.scale(total, F::of(1.0 / count as f64))
}

/// Mean over the `2N` anchors of
/// `-log( exp(sim(z_i, z_j)/τ) / Σ_{k≠i} exp(sim(z_i, z_k)/τ) )`,
/// where `j` is the other view of `i`.
pub fn simclr_loss<F: Real>(g: &mut Graph<F>, batch: &ContrastiveBatch) -> Result<NodeId> {
    let rows = check_batch(g, batch)?;
    let half = rows / 2;
    let denom: Vec<Vec<bool>> = (0..rows).map(|i| (0..rows).map(|k| k != i).collect()).collect();
    let pos: Vec<Vec<f64>> = (0..rows)
        .map(|i| {
            let j = (i + half) % rows;
            (0..rows).map(|k| if k == j { 1.0 } else { 0.0 }).collect()
        })
        .collect();
    info_nce(g, batch.embeddings, batch.temperature, &denom, &pos, &vec![true; rows])
}

/// Supervised contrastive loss. Positives of anchor `i` are all other rows
/// with the same label; anchors without positives are left out of the mean.
pub fn supcon_loss<F: Real>(g: &mut Graph<F>, batch: &ContrastiveBatch, mode: Denominator) -> Result<NodeId> {
    let rows = check_batch(g, batch)?;
    let labels = batch.labels.ok_or_else(|| Error::invalid("supcon_loss requires labels"))?;
    let denom: Vec<Vec<bool>> = (0..rows)
        .map(|i| {
            (0..rows)
                .map(|k| match mode {
                    Denominator::AsPrinted => labels[k] != labels[i],
                    Denominator::Standard => k != i,
                })
                .collect()
        })
        .collect();
    let mut active = vec![false; rows];
    let pos: Vec<Vec<f64>> = (0..rows)
        .map(|i| {
            let p: Vec<usize> = (0..rows).filter(|&k| k != i && labels[k] == labels[i]).collect();
            active[i] = !p.is_empty() && denom[i].iter().any(|&b| b);
            let w = if p.is_empty() { 0.0 } else { 1.0 / p.len() as f64 };
            (0..rows).map(|k| if p.contains(&k) { w } else { 0.0 }).collect()
        })
        .collect();
    info_nce(g, batch.embeddings, batch.temperature, &denom, &pos, &active)
}

/// `θ·supcon + λ·simclr`. Terms with zero weight are not built.
pub fn contra_loss<F: Real>(
    g: &mut Graph<F>,
    batch: &ContrastiveBatch,
    weights: &LossWeights,
    mode: Denominator,
) -> Result<LossTerms> {
    weights.validate()?;
    let mut terms = LossTerms::default();
    let mut parts = Vec::new();
    if weights.theta > 0.0 {
        let s = supcon_loss(g, batch, mode)?;
        terms.supcon = Some(s);
        parts.push((F::of(weights.theta), s));
    }
    if weights.lambda > 0.0 {
        let s = simclr_loss(g, batch)?;
        terms.simclr = Some(s);
        parts.push((F::of(weights.lambda), s));
    }
    terms.total = Some(if parts.is_empty() {
        let z = g.constant(Tensor::scalar(F::zero()));
        g.scale(z, F::one())?
    } else {
        g.weighted_sum(&parts)?
    });
    Ok(terms)
}

/// `θ·supcon(clean) + λ·(simclr(clean) + γ²·simclr(mixed))`.
pub fn full_objective<F: Real>(
    g: &mut Graph<F>,
    clean: &ContrastiveBatch,
    mixed: &ContrastiveBatch,
    weights: &LossWeights,
    mode: Denominator,
) -> Result<LossTerms> {
    check_gamma(weights.gamma)?;
    mixing_objective(g, clean, mixed, weights.gamma * weights.gamma, weights, mode)
}

/// The full objective with an explicit weight on the mixed-batch term. Used
/// by the ablation baselines, whose mixed fraction is not a squared ratio.
pub fn mixing_objective<F: Real>(
    g: &mut Graph<F>,
    clean: &ContrastiveBatch,
    mixed: &ContrastiveBatch,
    mix_weight: f64,
    weights: &LossWeights,
    mode: Denominator,
) -> Result<LossTerms> {
    weights.validate()?;
    let mut terms = LossTerms::default();
    let mut parts = Vec::new();
    if weights.theta > 0.0 {
        let s = supcon_loss(g, clean, mode)?;
        terms.supcon = Some(s);
        parts.push((F::of(weights.theta), s));
    }
    let simclr = simclr_loss(g, clean)?;
    let mix = simclr_loss(g, mixed)?;
    terms.simclr = Some(simclr);
    terms.mix = Some(mix);
    let inner = g.weighted_sum(&[(F::one(), simclr), (F::of(mix_weight), mix)])?;
    parts.push((F::of(weights.lambda), inner));
    terms.total = Some(g.weighted_sum(&parts)?);
    Ok(terms)
}

/// Mean softmax cross-entropy of `B×C` logits.
pub fn cross_entropy<F: Real>(g: &mut Graph<F>, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
    let shape = g.value(logits).shape().to_vec();
    let [b, c] = shape[..] else {
        return Err(Error::shape("cross-entropy", format!("logits must be 2-d, got {shape:?}")));
    };
    if labels.len() != b {
        return Err(Error::shape("cross-entropy", format!("{} labels for {b} rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::LabelOutOfRange { label: bad, classes: c });
    }
    let lv = g.value(logits).clone();
    let mut shift = Vec::with_capacity(b * c);
    let mut onehot = vec![F::zero(); b * c];
    for (i, &y) in labels.iter().enumerate() {
        let m = lv.row(i).iter().copied().fold(F::neg_infinity(), F::max);
        shift.extend(std::iter::repeat_n(m, c));
        onehot[i * c + y] = F::one();
    }
    let shift = g.constant(Tensor::new(vec![b, c], shift)?);
    let onehot = g.constant(Tensor::new(vec![b, c], onehot)?);
    let centered = g.sub(logits, shift)?;
    let e = g.exp(centered)?;
    let s = g.sum_last_axis(e)?;
    let lse = g.log(s)?;
    let picked = g.mul(centered, onehot)?;
    let target = g.sum_last_axis(picked)?;
    let per = g.sub(lse, target)?;
    g.mean(per)
}

/// `ce_weight·CE + λ·simclr(ssl)`, or plain CE without an SSL batch.
pub fn ce_and_ce_ssl_loss<F: Real>(
    g: &mut Graph<F>,
    logits: NodeId,
    labels: &[usize],
    ssl: Option<&ContrastiveBatch>,
    weights: &LossWeights,
) -> Result<LossTerms> {
    weights.validate()?;
    let ce = cross_entropy(g, logits, labels)?;
    let mut terms = LossTerms { ce: Some(ce), ..LossTerms::default() };
    let total = match ssl {
        Some(batch) => {
            let s = simclr_loss(g, batch)?;
            terms.simclr = Some(s);
            g.weighted_sum(&[(F::of(weights.ce_weight), ce), (F::of(weights.lambda), s)])?
        }
        None => g.scale(ce, F::of(weights.ce_weight))?,
    };
    terms.total = Some(total);
    Ok(terms)
}

#[cfg(test)]
pub(crate) mod oracle {
    //! Plain-loop evaluations written directly from the loss definitions.

    pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    pub fn simclr(z: &[Vec<f64>], tau: f64) -> f64 {
        let n2 = z.len();
        let mut total = 0.0;
        for i in 0..n2 {
            let j = (i + n2 / 2) % n2;
            let num = (cosine(&z[i], &z[j]) / tau).exp();
            let den: f64 = (0..n2).filter(|&k| k != i).map(|k| (cosine(&z[i], &z[k]) / tau).exp()).sum();
            total += -(num / den).ln();
        }
        total / n2 as f64
    }

    pub fn supcon(z: &[Vec<f64>], labels: &[usize], tau: f64, as_printed: bool) -> f64 {
        let n2 = z.len();
        let (mut total, mut count) = (0.0, 0usize);
        for i in 0..n2 {
            let pos: Vec<usize> = (0..n2).filter(|&p| p != i && labels[p] == labels[i]).collect();
            if pos.is_empty() {
                continue;
            }
            let den: f64 = (0..n2)
                .filter(|&k| if as_printed { labels[k] != labels[i] } else { k != i })
                .map(|k| (cosine(&z[i], &z[k]) / tau).exp())
                .sum();
            let mut s = 0.0;
            for &p in &pos {
                s += -((cosine(&z[i], &z[p]) / tau).exp() / den).ln();
            }
            total += s / pos.len() as f64;
            count += 1;
        }
        total / count as f64
    }

    pub fn cross_entropy(logits: &[Vec<f64>], labels: &[usize]) -> f64 {
        let mut total = 0.0;
        for (row, &y) in logits.iter().zip(labels) {
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            total += -(row[y].exp() / z).ln();
        }
        total / logits.len() as f64
    }
}
