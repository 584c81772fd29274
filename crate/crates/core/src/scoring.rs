//! Open-set scorers and the TwoNN intrinsic-dimension diagnostic.
//!
//! Every score follows the convention "higher means more in-set".

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn unit(v: &[f32]) -> Vec<f32> {
    let n = v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
    if n == 0.0 {
        v.to_vec()
    } else {
        v.iter().map(|&x| (f64::from(x) / n) as f32).collect()
    }
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum()
}

fn rows(t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [n, d] => Ok((n, d)),
        ref s => Err(Error::shape("scoring", format!("embeddings must be [N,D], got {s:?}"))),
    }
}

/// Per-class stores of unit-norm training embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBank {
    classes: Vec<Vec<Vec<f32>>>,
    k: usize,
    dim: usize,
}

/// Build a bank from `[N, D]` embeddings. Labels must be dense in `[0, C)`.
pub fn build_bank(embeddings: &Tensor, labels: &[usize], k: usize) -> Result<FeatureBank> {
    let (n, dim) = rows(embeddings)?;
    if labels.len() != n {
        return Err(Error::shape("build_bank", format!("{} labels for {n} embeddings", labels.len())));
    }
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    let c = labels.iter().max().map_or(0, |m| m + 1);
    if c < 2 {
        return Err(Error::invalid(format!("feature bank needs at least 2 classes, got {c}")));
    }
    let mut classes = vec![Vec::new(); c];
    for (i, &l) in labels.iter().enumerate() {
        classes[l].push(unit(embeddings.row(i)));
    }
    for (class, v) in classes.iter().enumerate() {
        if v.len() < k {
            return Err(Error::ClassTooSmall { class, have: v.len(), k });
        }
    }
    Ok(FeatureBank { classes, k, dim })
}

impl FeatureBank {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn class_count(&self) -> usize {
        self.classes.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn class(&self, c: usize) -> &[Vec<f32>] {
        &self.classes[c]
    }

    /// Flattened `[N, D]` embeddings and labels, class by class.
    pub fn to_parts(&self) -> (Tensor, Vec<usize>) {
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for (c, vs) in self.classes.iter().enumerate() {
            for v in vs {
                data.extend_from_slice(v);
                labels.push(c);
            }
        }
        let n = labels.len();
        (Tensor::new(vec![n, self.dim], data).expect("consistent bank"), labels)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectionResult {
    /// `max_c d^c / Σ_c d^c`; `None` when the sum is not positive.
    pub score: Option<f64>,
    pub label: usize,
    /// Sum of the top-k cosine similarities per class.
    pub sums: Vec<f64>,
}

impl DetectionResult {
    pub fn is_degenerate(&self) -> bool {
        self.score.is_none()
    }
}

/// Sum of the `k` largest values, added in descending order.
fn top_k_sum(values: impl Iterator<Item = f64>, k: usize) -> f64 {
    let mut best: Vec<f64> = Vec::with_capacity(k + 1);
    for v in values {
        if best.len() < k || v > best[k - 1] {
            let at = best.partition_point(|&b| b >= v);
            best.insert(at, v);
            best.truncate(k);
        }
    }
    best.iter().sum()
}

fn argmax_first(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// kNN open-set score of one (re-normalized) test embedding.
pub fn knn_osr_score(bank: &FeatureBank, test: &[f32]) -> Result<DetectionResult> {
    if test.len() != bank.dim {
        return Err(Error::shape("knn_osr_score", format!("dim {} vs bank {}", test.len(), bank.dim)));
    }
    let z = unit(test);
    let sums: Vec<f64> = bank.classes.iter().map(|vs| top_k_sum(vs.iter().map(|v| dot(&z, v)), bank.k)).collect();
    let label = argmax_first(&sums);
    let total: f64 = sums.iter().sum();
    let score = (total > 0.0).then(|| sums[label] / total);
    Ok(DetectionResult { score, label, sums })
}

pub fn knn_osr_scores(bank: &FeatureBank, tests: &Tensor) -> Result<Vec<DetectionResult>> {
    let (n, _) = rows(tests)?;
    (0..n).map(|i| knn_osr_score(bank, tests.row(i))).collect()
}

/// Softmax probabilities, computed after subtracting the max logit.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// `(max softmax probability, −entropy)`.
pub fn msp_and_entropy_scores(logits: &[f64]) -> (f64, f64) {
    let p = softmax(logits);
    let msp = p.iter().copied().fold(0.0, f64::max);
    let entropy: f64 = p.iter().filter(|&&q| q > 0.0).map(|&q| -q * q.ln()).sum();
    (msp, -entropy)
}

pub const MAHALANOBIS_RIDGE: f64 = 1e-3;

/// Class means plus the inverse of a shared covariance.
#[derive(Clone, Debug)]
pub struct Mahalanobis {
    means: Vec<DVector<f64>>,
    precision: DMatrix<f64>,
}

impl Mahalanobis {
    /// Uses `covariance` as given; fails unless it is positive definite.
    pub fn new(means: Vec<Vec<f64>>, covariance: Vec<Vec<f64>>) -> Result<Self> {
        let d = covariance.len();
        if means.is_empty() || means.iter().any(|m| m.len() != d) || covariance.iter().any(|r| r.len() != d) {
            return Err(Error::shape("mahalanobis", "means and covariance dimensions disagree"));
        }
        let cov = DMatrix::from_fn(d, d, |i, j| covariance[i][j]);
        Self::from_matrix(means.into_iter().map(DVector::from_vec).collect(), cov)
    }

    fn from_matrix(means: Vec<DVector<f64>>, cov: DMatrix<f64>) -> Result<Self> {
        let chol = cov.cholesky().ok_or_else(|| Error::invalid("covariance is not positive definite"))?;
        Ok(Mahalanobis { means, precision: chol.inverse() })
    }

    /// Per-class means and the pooled within-class covariance plus a ridge.
    pub fn fit(embeddings: &Tensor, labels: &[usize], ridge: f64) -> Result<Self> {
        let (n, d) = rows(embeddings)?;
        if labels.len() != n {
            return Err(Error::shape("mahalanobis", format!("{} labels for {n} embeddings", labels.len())));
        }
        let c = labels.iter().max().map_or(0, |m| m + 1);
        let mut sums = vec![DVector::zeros(d); c];
        let mut counts = vec![0usize; c];
        for (i, &l) in labels.iter().enumerate() {
            sums[l] += DVector::from_iterator(d, embeddings.row(i).iter().map(|&x| f64::from(x)));
            counts[l] += 1;
        }
        if let Some(class) = counts.iter().position(|&k| k == 0) {
            return Err(Error::ClassTooSmall { class, have: 0, k: 1 });
        }
        let means: Vec<DVector<f64>> = sums.into_iter().zip(&counts).map(|(s, &k)| s / k as f64).collect();
        let mut cov = DMatrix::zeros(d, d);
        for (i, &l) in labels.iter().enumerate() {
            let r = DVector::from_iterator(d, embeddings.row(i).iter().map(|&x| f64::from(x))) - &means[l];
            cov += &r * r.transpose();
        }
        cov /= n as f64;
        for i in 0..d {
            cov[(i, i)] += ridge;
        }
        Self::from_matrix(means, cov)
    }

    pub fn distance(&self, z: &[f64]) -> Result<f64> {
        let d = self.precision.nrows();
        if z.len() != d {
            return Err(Error::shape("mahalanobis", format!("dim {} vs {d}", z.len())));
        }
        let z = DVector::from_column_slice(z);
        Ok(self
            .means
            .iter()
            .map(|m| {
                let r = &z - m;
                (r.transpose() * &self.precision * &r)[(0, 0)].max(0.0).sqrt()
            })
            .fold(f64::INFINITY, f64::min))
    }

    /// Negated distance to the closest class mean.
    pub fn score(&self, z: &[f64]) -> Result<f64> {
        Ok(-self.distance(z)?)
    }
}

pub fn mahalanobis_score(model: &Mahalanobis, z: &[f64]) -> Result<f64> {
    model.score(z)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TwoNnEstimate {
    pub dimension: f64,
    /// Ratios used in the fit.
    pub used: usize,
    /// Points skipped because their nearest neighbor is at distance zero.
    pub skipped: usize,
}

/// TwoNN intrinsic dimension: with `μ = r₂/r₁` sorted ascending and the
/// largest `discard` fraction dropped, the slope of `−ln(1 − F(μ))` against
/// `ln μ` through the origin.
pub fn twonn_id(points: &[Vec<f64>], discard: f64) -> Result<TwoNnEstimate> {
    let n = points.len();
    if n < 50 {
        return Err(Error::invalid(format!("TwoNN needs at least 50 points, got {n}")));
    }
    if !(0.0..1.0).contains(&discard) {
        return Err(Error::invalid(format!("discard fraction {discard} outside [0, 1)")));
    }
    let mut mu = Vec::with_capacity(n);
    let mut skipped = 0;
    for (i, p) in points.iter().enumerate() {
        let (mut r1, mut r2) = (f64::INFINITY, f64::INFINITY);
        for (j, q) in points.iter().enumerate() {
            if i == j {
                continue;
            }
            let d = p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            if d < r1 {
                r2 = r1;
                r1 = d;
            } else if d < r2 {
                r2 = d;
            }
        }
        if r1 == 0.0 {
            skipped += 1;
        } else {
            mu.push((r2 / r1).sqrt());
        }
    }
    mu.sort_by(f64::total_cmp);
    let total = mu.len();
    let kept = ((total as f64) * (1.0 - discard)).floor() as usize;
    if kept < 2 {
        return Err(Error::invalid("too few distinct points for TwoNN"));
    }
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, &m) in mu.iter().take(kept).enumerate() {
        let x = m.ln();
        let y = -(1.0 - i as f64 / total as f64).ln();
        sxy += x * y;
        sxx += x * x;
    }
    Ok(TwoNnEstimate { dimension: sxy / sxx, used: kept, skipped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(n: usize, d: usize, v: &[f32]) -> Tensor {
        Tensor::new(vec![n, d], v.to_vec()).unwrap()
    }

    #[test]
    fn bank_preconditions() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v: Vec<f32> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
        let labels = [0, 0, 0, 0, 0, 1, 1, 1, 1, 1];
        assert!(build_bank(&t(10, 2, &v), &labels, 3).is_ok());
        assert!(matches!(build_bank(&t(10, 2, &v), &labels, 6), Err(Error::ClassTooSmall { class: 0, have: 5, k: 6 })));
    }

    #[test]
    fn knn_hand_examples() {
        let bank = build_bank(&t(2, 2, &[1.0, 0.0, 0.0, 1.0]), &[0, 1], 1).unwrap();
        let r = knn_osr_score(&bank, &[1.0, 0.0]).unwrap();
        assert_eq!((r.sums.clone(), r.score, r.label), (vec![1.0, 0.0], Some(1.0), 0));
        let h = std::f32::consts::FRAC_1_SQRT_2;
        let r = knn_osr_score(&bank, &[h, h]).unwrap();
        assert_eq!(r.score, Some(0.5));
        assert_eq!(r.label, 0);
        assert!((r.sums[0] - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-6);
        let r = knn_osr_score(&bank, &[-1.0, -1.0]).unwrap();
        assert!(r.is_degenerate());
    }

    /// Sort every similarity of a class, take the first k.
    pub(crate) fn brute_knn(
        train: &[Vec<f32>],
        labels: &[usize],
        c: usize,
        k: usize,
        z: &[f32],
    ) -> (Option<f64>, usize) {
        let z = unit(z);
        let mut sums = vec![0.0; c];
        for (class, s) in sums.iter_mut().enumerate() {
            let mut sims: Vec<f64> =
                train.iter().zip(labels).filter(|(_, &l)| l == class).map(|(v, _)| dot(&z, &unit(v))).collect();
            sims.sort_by(|a, b| b.total_cmp(a));
            *s = sims[..k].iter().sum();
        }
        let mut label = 0;
        for i in 0..c {
            if sums[i] > sums[label] {
                label = i;
            }
        }
        let total: f64 = sums.iter().sum();
        ((total > 0.0).then(|| sums[label] / total), label)
    }

    #[test]
    fn knn_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let c = rng.random_range(2..=5);
            let k = rng.random_range(1..=5);
            let d = rng.random_range(2..=8);
            let mut labels: Vec<usize> = (0..c).flat_map(|l| std::iter::repeat_n(l, k)).collect();
            while labels.len() < 50.min(labels.len() + rng.random_range(0..20)) {
                labels.push(rng.random_range(0..c));
            }
            let train: Vec<Vec<f32>> =
                labels.iter().map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let flat: Vec<f32> = train.iter().flatten().copied().collect();
            let bank = build_bank(&t(labels.len(), d, &flat), &labels, k).unwrap();
            for _ in 0..20 {
                let z: Vec<f32> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
                let r = knn_osr_score(&bank, &z).unwrap();
                assert_eq!((r.score, r.label), brute_knn(&train, &labels, c, k, &z));
                if let Some(s) = r.score {
                    if r.sums.iter().all(|&x| x >= 0.0) {
                        assert!(s >= 1.0 / c as f64 - 1e-12 && s <= 1.0);
                    }
                }
            }
        }
    }

    #[test]
    fn msp_entropy_cases() {
        let (msp, ne) = msp_and_entropy_scores(&[0.0; 10]);
        assert!((msp - 0.1).abs() < 1e-15);
        assert!((-ne - 10f64.ln()).abs() < 1e-12);
        let mut prev = (0.0, f64::NEG_INFINITY);
        for margin in [0.0, 1.0, 5.0, 20.0, 50.0] {
            let (msp, ne) = msp_and_entropy_scores(&[margin, 0.0, 0.0]);
            assert!(msp > prev.0 && ne > prev.1);
            prev = (msp, ne);
        }
        assert!(prev.0 > 1.0 - 1e-12 && prev.1 > -1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let l: Vec<f64> = (0..6).map(|_| rng.random_range(-4.0..4.0)).collect();
            let z: f64 = l.iter().map(|v| v.exp()).sum();
            let p: Vec<f64> = l.iter().map(|v| v.exp() / z).collect();
            let (msp, ne) = msp_and_entropy_scores(&l);
            assert!((msp - p.iter().cloned().fold(0.0, f64::max)).abs() < 1e-6);
            assert!((ne + p.iter().map(|q| -q * q.ln()).sum::<f64>()).abs() < 1e-6);
        }
    }

    #[test]
    fn mahalanobis_cases() {
        let id = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let m = Mahalanobis::new(vec![vec![0.0, 0.0], vec![3.0, 4.0]], id).unwrap();
        assert_eq!(m.score(&[3.0, 4.0]).unwrap(), 0.0);
        assert!((m.score(&[0.0, 2.0]).unwrap() + 2.0).abs() < 1e-12);
        let m = Mahalanobis::new(vec![vec![0.0, 0.0]], vec![vec![4.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert!((m.distance(&[2.0, 1.0]).unwrap() - 2f64.sqrt()).abs() < 1e-12);
        assert!(Mahalanobis::new(vec![vec![0.0, 0.0]], vec![vec![1.0, 1.0], vec![1.0, 1.0]]).is_err());
    }

    #[test]
    fn mahalanobis_affine_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = 3;
        let emb: Vec<f32> = (0..60 * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let labels: Vec<usize> = (0..60).map(|i| i % 3).collect();
        let fit = Mahalanobis::fit(&t(60, d, &emb), &labels, 1e-3).unwrap();
        let a = DMatrix::from_row_slice(3, 3, &[2.0, 0.5, 0.0, 0.1, 1.5, -0.3, 0.0, 0.2, 0.8]);
        let b = DVector::from_vec(vec![0.3, -1.0, 2.0]);
        let means: Vec<Vec<f64>> = fit.means.iter().map(|m| (&a * m + &b).as_slice().to_vec()).collect();
        let cov = fit.precision.clone().try_inverse().unwrap();
        let cov2 = &a * cov * a.transpose();
        let cov2: Vec<Vec<f64>> = (0..3).map(|i| (0..3).map(|j| cov2[(i, j)]).collect()).collect();
        let moved = Mahalanobis::new(means, cov2).unwrap();
        for _ in 0..20 {
            let z: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let z2 = &a * DVector::from_vec(z.clone()) + &b;
            assert!((fit.score(&z).unwrap() - moved.score(z2.as_slice()).unwrap()).abs() < 1e-5);
        }
    }

    fn uniform(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..d).map(|_| rng.random_range(0.0..1.0)).collect()).collect()
    }

    #[test]
    fn twonn_statistical_oracles() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let seg: Vec<Vec<f64>> = (0..2000)
            .map(|_| {
                let s: f64 = rng.random_range(0.0..1.0);
                (0..10).map(|j| s * (j as f64 + 1.0) / 10.0).collect()
            })
            .collect();
        let d1 = twonn_id(&seg, 0.1).unwrap().dimension;
        assert!((0.8..=1.2).contains(&d1), "{d1}");
        let sq = uniform(&mut rng, 2000, 2);
        let d2 = twonn_id(&sq, 0.1).unwrap().dimension;
        assert!((1.7..=2.3).contains(&d2), "{d2}");
        let scaled: Vec<Vec<f64>> = seg.iter().map(|p| p.iter().map(|v| v * 100.0).collect()).collect();
        let d1s = twonn_id(&scaled, 0.1).unwrap().dimension;
        assert!((d1 - d1s).abs() < 1e-9);
    }

    #[test]
    fn twonn_skips_duplicates() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut pts = uniform(&mut rng, 100, 2);
        pts.push(pts[0].clone());
        let r = twonn_id(&pts, 0.1).unwrap();
        assert_eq!(r.skipped, 2);
        assert!(twonn_id(&pts[..10], 0.1).is_err());
    }
}
