//! Threshold-free detection metrics, openness and corruption aggregates.
//!
//! A sample is accepted as positive when its score is at least the threshold.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub score: f64,
    pub positive: bool,
}

impl ScoredSample {
    pub fn new(score: f64, positive: bool) -> Self {
        ScoredSample { score, positive }
    }
}

/// Label in-set scores positive and out-of-set scores negative.
pub fn in_out(in_scores: &[f64], out_scores: &[f64]) -> Vec<ScoredSample> {
    in_scores
        .iter()
        .map(|&s| ScoredSample::new(s, true))
        .chain(out_scores.iter().map(|&s| ScoredSample::new(s, false)))
        .collect()
}

fn counts(samples: &[ScoredSample]) -> Result<(usize, usize)> {
    if let Some(s) = samples.iter().find(|s| !s.score.is_finite()) {
        return Err(Error::invalid(format!("non-finite score {}", s.score)));
    }
    let pos = samples.iter().filter(|s| s.positive).count();
    let neg = samples.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::invalid(format!("need both classes, got {pos} positive and {neg} negative")));
    }
    Ok((pos, neg))
}

/// Groups of tied scores in descending order, as `(positives, negatives)`.
fn descending_groups(samples: &[ScoredSample]) -> Vec<(usize, usize)> {
    let mut sorted: Vec<&ScoredSample> = samples.iter().collect();
    sorted.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut groups: Vec<(usize, usize)> = Vec::new();
    let mut last = f64::NAN;
    for s in sorted {
        if s.score != last {
            groups.push((0, 0));
            last = s.score;
        }
        let g = groups.last_mut().expect("pushed");
        if s.positive {
            g.0 += 1;
        } else {
            g.1 += 1;
        }
    }
    groups
}

/// Mann–Whitney AUROC from average ranks; ties count one half.
pub fn auroc(samples: &[ScoredSample]) -> Result<f64> {
    let (pos, neg) = counts(samples)?;
    let mut sorted: Vec<&ScoredSample> = samples.iter().collect();
    sorted.sort_by(|a, b| a.score.total_cmp(&b.score));
    // Twice the rank sum keeps average ranks integral.
    let mut rank2_sum: u128 = 0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1].score == sorted[i].score {
            j += 1;
        }
        let avg2 = (i + 1 + j + 1) as u128;
        rank2_sum += avg2 * sorted[i..=j].iter().filter(|s| s.positive).count() as u128;
        i = j + 1;
    }
    let u2 = rank2_sum - (pos as u128) * (pos as u128 + 1);
    Ok(u2 as f64 / (2.0 * pos as f64 * neg as f64))
}

/// Area under the empirical ROC curve by the trapezoid rule.
pub fn auroc_trapezoid(samples: &[ScoredSample]) -> Result<f64> {
    let (pos, neg) = counts(samples)?;
    let (mut tp, mut fp, mut area) = (0usize, 0usize, 0.0);
    for (p, n) in descending_groups(samples) {
        let (tp2, fp2) = (tp + p, fp + n);
        area += (fp2 - fp) as f64 * (tp + tp2) as f64 / 2.0;
        tp = tp2;
        fp = fp2;
    }
    Ok(area / (pos as f64 * neg as f64))
}

/// True-negative rate at the largest threshold whose TPR reaches `level`.
pub fn tnr_at_tpr(samples: &[ScoredSample], level: f64) -> Result<f64> {
    let (pos, neg) = counts(samples)?;
    let (mut tp, mut fp) = (0, 0);
    for (p, n) in descending_groups(samples) {
        tp += p;
        fp += n;
        if tp as f64 / pos as f64 >= level {
            return Ok((neg - fp) as f64 / neg as f64);
        }
    }
    Ok(0.0)
}

/// Best accuracy over all thresholds, including accept-all and reject-all.
pub fn dtacc(samples: &[ScoredSample]) -> Result<f64> {
    let (pos, neg) = counts(samples)?;
    let total = (pos + neg) as f64;
    let (mut tp, mut fp) = (0, 0);
    let mut best = neg as f64 / total;
    for (p, n) in descending_groups(samples) {
        tp += p;
        fp += n;
        best = best.max((tp + neg - fp) as f64 / total);
    }
    Ok(best)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PositiveSide {
    In,
    Out,
}

/// Average precision: `Σ (R_k − R_{k−1})·P_k` over descending thresholds.
pub fn aupr(samples: &[ScoredSample], side: PositiveSide) -> Result<f64> {
    let flipped: Vec<ScoredSample>;
    let samples = match side {
        PositiveSide::In => samples,
        PositiveSide::Out => {
            flipped = samples.iter().map(|s| ScoredSample::new(-s.score, !s.positive)).collect();
            &flipped
        }
    };
    let (pos, _) = counts(samples)?;
    let (mut tp, mut fp, mut ap) = (0usize, 0usize, 0.0);
    for (p, n) in descending_groups(samples) {
        let prev = tp;
        tp += p;
        fp += n;
        ap += ((tp - prev) as f64 / pos as f64) * (tp as f64 / (tp + fp) as f64);
    }
    Ok(ap)
}

/// The detection metric suite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub auroc: f64,
    pub tnr_at_tpr95: f64,
    pub dtacc: f64,
    pub auin: f64,
    pub auout: f64,
}

pub fn detection_metrics(samples: &[ScoredSample]) -> Result<DetectionMetrics> {
    Ok(DetectionMetrics {
        auroc: auroc(samples)?,
        tnr_at_tpr95: tnr_at_tpr(samples, 0.95)?,
        dtacc: dtacc(samples)?,
        auin: aupr(samples, PositiveSide::In)?,
        auout: aupr(samples, PositiveSide::Out)?,
    })
}

/// Openness in percent: `100·(1 − √(k/(k+u)))`.
pub fn openness(known: usize, unknown: usize) -> f64 {
    assert!(known >= 1, "openness needs at least one known class");
    100.0 * (1.0 - (known as f64 / (known + unknown) as f64).sqrt())
}

pub fn accuracy(predicted: &[usize], truth: &[usize]) -> f64 {
    let hit = predicted.iter().zip(truth).filter(|(a, b)| a == b).count();
    hit as f64 / truth.len().max(1) as f64
}

pub const SEVERITIES: u8 = 5;

/// Clean accuracy plus accuracy per corruption type and severity 1..=5.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CorruptionGrid {
    pub clean: f64,
    /// Type name → severity → accuracy.
    pub cells: BTreeMap<String, BTreeMap<u8, f64>>,
}

impl CorruptionGrid {
    pub fn new(clean: f64) -> Self {
        CorruptionGrid { clean, cells: BTreeMap::new() }
    }

    pub fn set(&mut self, kind: &str, severity: u8, accuracy: f64) {
        self.cells.entry(kind.to_string()).or_default().insert(severity, accuracy);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionAggregates {
    /// `D[c][s] = A_clean − A[c][s]`, severities in order.
    pub drops: BTreeMap<String, Vec<f64>>,
    /// Mean drop over severities per type.
    pub per_type: BTreeMap<String, f64>,
    /// Mean drop over the `T` types per severity.
    pub per_severity: Vec<f64>,
    pub overall: f64,
}

pub fn corruption_aggregates(grid: &CorruptionGrid) -> Result<CorruptionAggregates> {
    if grid.cells.is_empty() {
        return Err(Error::invalid("corruption grid has no types"));
    }
    let missing: Vec<(String, u8)> = grid
        .cells
        .iter()
        .flat_map(|(k, row)| (1..=SEVERITIES).filter(|s| !row.contains_key(s)).map(move |s| (k.clone(), s)))
        .collect();
    if !missing.is_empty() {
        return Err(Error::IncompleteGrid(missing));
    }
    let t = grid.cells.len() as f64;
    let mut drops = BTreeMap::new();
    let mut per_type = BTreeMap::new();
    let mut per_severity = vec![0.0; SEVERITIES as usize];
    for (kind, row) in &grid.cells {
        let d: Vec<f64> = (1..=SEVERITIES).map(|s| grid.clean - row[&s]).collect();
        per_type.insert(kind.clone(), d.iter().sum::<f64>() / f64::from(SEVERITIES));
        for (acc, v) in per_severity.iter_mut().zip(&d) {
            *acc += v;
        }
        drops.insert(kind.clone(), d);
    }
    per_severity.iter_mut().for_each(|v| *v /= t);
    let overall = per_type.values().sum::<f64>() / t;
    Ok(CorruptionAggregates { drops, per_type, per_severity, overall })
}


#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&in_out(&[0.9, 0.8], &[0.3, 0.4])).unwrap(), 1.0);
        assert_eq!(auroc(&in_out(&[0.5; 3], &[0.5; 4])).unwrap(), 0.5);
        assert_eq!(auroc(&in_out(&[0.9, 0.4], &[0.5, 0.1])).unwrap(), 0.75);
        assert!(auroc(&in_out(&[0.9], &[])).is_err());
    }

    #[test]
    fn tnr_dtacc_aupr_examples() {
        let sep = in_out(&[0.9, 0.8], &[0.3, 0.4]);
        assert_eq!(tnr_at_tpr(&sep, 0.95).unwrap(), 1.0);
        assert_eq!(dtacc(&sep).unwrap(), 1.0);
        assert_eq!(aupr(&sep, PositiveSide::In).unwrap(), 1.0);
        assert_eq!(aupr(&sep, PositiveSide::Out).unwrap(), 1.0);
        let tied = in_out(&[0.2; 4], &[0.2; 4]);
        assert_eq!(tnr_at_tpr(&tied, 0.95).unwrap(), 0.0);
        assert_eq!(dtacc(&tied).unwrap(), 0.5);
        let tied = in_out(&[0.2; 3], &[0.2; 7]);
        assert!((aupr(&tied, PositiveSide::In).unwrap() - 0.3).abs() < 1e-15);
    }

    #[test]
    fn aupr_hand_case() {
        // Descending: +0.9, −0.8, +0.7, +0.6, −0.5, −0.4.
        // Recall steps at ranks 1, 3, 4 with precisions 1, 2/3, 3/4.
        let s = in_out(&[0.9, 0.7, 0.6], &[0.8, 0.5, 0.4]);
        let want = (1.0 + 2.0 / 3.0 + 3.0 / 4.0) / 3.0;
        assert!((aupr(&s, PositiveSide::In).unwrap() - want).abs() < 1e-15);
        // Out side, ascending: −0.4, −0.5, +0.6, +0.7, −0.8, +0.9 → precisions 1, 1, 3/5.
        let want = (1.0 + 1.0 + 3.0 / 5.0) / 3.0;
        assert!((aupr(&s, PositiveSide::Out).unwrap() - want).abs() < 1e-15);
    }

    fn random_set(rng: &mut ChaCha8Rng) -> Vec<ScoredSample> {
        let n = rng.random_range(2..=200);
        let levels = rng.random_range(2..=50);
        let mut s: Vec<ScoredSample> = (0..n)
            .map(|_| {
                let pos = rng.random_bool(0.5);
                let base = rng.random_range(0..levels) as f64;
                ScoredSample::new(base + if pos { 10.0 } else { 0.0 }, pos)
            })
            .collect();
        s[0].positive = true;
        s[1].positive = false;
        s
    }

    #[test]
    fn metrics_equal_oracles_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let s = random_set(&mut rng);
            assert_eq!(auroc(&s).unwrap(), oracle::auroc(&s));
            assert!((auroc_trapezoid(&s).unwrap() - auroc(&s).unwrap()).abs() < 1e-12);
            assert_eq!(tnr_at_tpr(&s, 0.95).unwrap(), oracle::tnr_at_tpr(&s, 0.95));
            assert_eq!(dtacc(&s).unwrap(), oracle::dtacc(&s));
            assert_eq!(aupr(&s, PositiveSide::In).unwrap(), oracle::aupr_in(&s));
            let cubed: Vec<ScoredSample> =
                s.iter().map(|x| ScoredSample::new(x.score.powi(3) + 7.0, x.positive)).collect();
            assert_eq!(auroc(&cubed).unwrap(), auroc(&s).unwrap());
            let flipped: Vec<ScoredSample> = s.iter().map(|x| ScoredSample::new(-x.score, !x.positive)).collect();
            assert_eq!(auroc(&flipped).unwrap(), auroc(&s).unwrap());
        }
    }

    #[test]
    fn openness_table() {
        let cases = [((6, 4), 22.54), ((4, 10), 46.55), ((4, 50), 72.78), ((20, 180), 68.37)];
        for ((k, u), want) in cases {
            assert!((openness(k, u) - want).abs() <= 0.01, "{k},{u}: {}", openness(k, u));
        }
    }

    #[test]
    fn corruption_examples() {
        let mut g = CorruptionGrid::new(0.9);
        for s in 1..=5 {
            g.set("gaussian-noise", s, 0.7);
        }
        let a = corruption_aggregates(&g).unwrap();
        assert!((a.drops["gaussian-noise"][0] - 0.2).abs() < 1e-15);

        let mut g = CorruptionGrid::new(0.8);
        for s in 1..=5 {
            g.set("a", s, 0.8);
            g.set("b", s, 0.8);
        }
        let a = corruption_aggregates(&g).unwrap();
        assert!(a.per_severity.iter().chain(a.per_type.values()).all(|&v| v == 0.0) && a.overall == 0.0);

        let mut g = CorruptionGrid::new(1.0);
        for s in 1..=5u8 {
            g.set("a", s, 1.0 - 0.125 * f64::from(s));
            g.set("b", s, 1.0 - 0.0625 * f64::from(s));
        }
        let a = corruption_aggregates(&g).unwrap();
        assert_eq!(a.per_type["a"], 0.375);
        assert_eq!(a.per_type["b"], 0.1875);
        assert_eq!(a.per_severity, vec![0.09375, 0.1875, 0.28125, 0.375, 0.46875]);
        assert_eq!(a.overall, 0.28125);

        let mut g = CorruptionGrid::new(1.0);
        g.set("a", 1, 0.5);
        match corruption_aggregates(&g) {
            Err(Error::IncompleteGrid(m)) => assert_eq!(m.len(), 4),
            other => panic!("{other:?}"),
        }
    }
}
