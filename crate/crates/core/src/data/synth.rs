//! Synthetic colored-blob images.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ImageDataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Distribution of one class's blob. Positions and radius are fractions of
/// the image side.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub color: [f32; 3],
    pub center: (f32, f32),
    pub radius: f32,
    /// Standard deviation of the center position.
    pub jitter: f32,
}

/// `classes` specs with hues and positions spread around a circle.
pub fn default_blob_specs(classes: usize) -> Vec<BlobSpec> {
    (0..classes)
        .map(|c| {
            let t = c as f32 / classes as f32;
            let angle = std::f32::consts::TAU * t;
            let hue = |shift: f32| 0.5 + 0.5 * (std::f32::consts::TAU * (t + shift)).cos();
            BlobSpec {
                color: [hue(0.0), hue(1.0 / 3.0), hue(2.0 / 3.0)],
                center: (0.5 + 0.25 * angle.sin(), 0.5 + 0.25 * angle.cos()),
                radius: 0.12 + 0.04 * (c % 3) as f32,
                jitter: 0.05,
            }
        })
        .collect()
}

/// Spec at `t` in `[0, 1]` on a line running from a red blob in the upper
/// half to a green blob in the lower half. Interior points interpolate both
/// color and position.
pub fn line_blob_spec(t: f32) -> BlobSpec {
    let t = t.clamp(0.0, 1.0);
    BlobSpec {
        color: [1.0 - 0.75 * t, 0.25 + 0.75 * t, 0.25],
        center: (0.3 + 0.4 * t, 0.5),
        radius: 0.14,
        jitter: 0.05,
    }
}

/// Specs for an open-set layout on the line of [`line_blob_spec`]. Known
/// classes sit at evenly spaced stations that include both ends; unknown
/// classes fill the gaps between neighbouring known classes, round-robin.
/// Classes in neither list come last. Indexed by class id.
pub fn open_set_blob_specs(classes: usize, known: &[usize], unknown: &[usize]) -> Vec<BlobSpec> {
    let gaps = known.len().saturating_sub(1).max(1);
    let mut slots: Vec<Vec<usize>> = vec![Vec::new(); gaps];
    for (i, &u) in unknown.iter().enumerate() {
        slots[i % gaps].push(u);
    }
    let mut sequence = Vec::with_capacity(classes);
    for (i, &k) in known.iter().enumerate() {
        sequence.push(k);
        if i + 1 < known.len() || known.len() == 1 {
            sequence.extend(slots.get(i).into_iter().flatten());
        }
    }
    let rest: Vec<usize> = (0..classes).filter(|c| !sequence.contains(c)).collect();
    sequence.extend(rest);
    let span = sequence.len().saturating_sub(1).max(1) as f32;
    let mut specs = vec![line_blob_spec(0.0); classes];
    for (pos, &c) in sequence.iter().enumerate() {
        if c < classes {
            specs[c] = line_blob_spec(pos as f32 / span);
        }
    }
    specs
}

const BACKGROUND: f32 = 0.15;

/// `n_per_class` three-channel images per spec; labels run class by class.
pub fn synth_blobs(specs: &[BlobSpec], side: usize, n_per_class: usize, seed: u64) -> Result<ImageDataset> {
    if specs.is_empty() || side == 0 || n_per_class == 0 {
        return Err(Error::invalid("synth_blobs needs classes, a positive side and samples per class"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hw = side * side;
    let mut data = Vec::with_capacity(specs.len() * n_per_class * 3 * hw);
    let mut labels = Vec::with_capacity(specs.len() * n_per_class);
    for (label, spec) in specs.iter().enumerate() {
        let jitter = Normal::new(0.0f32, spec.jitter.max(0.0)).map_err(|e| Error::invalid(e.to_string()))?;
        for _ in 0..n_per_class {
            let cy = (spec.center.0 + jitter.sample(&mut rng)) * side as f32;
            let cx = (spec.center.1 + jitter.sample(&mut rng)) * side as f32;
            let r = spec.radius * side as f32 * rng.random_range(0.8..1.2f32);
            let bg: Vec<f32> = (0..3 * hw).map(|_| rng.random_range(0.0..BACKGROUND)).collect();
            for (ch, &color) in spec.color.iter().enumerate() {
                for p in 0..hw {
                    let (y, x) = ((p / side) as f32 + 0.5, (p % side) as f32 + 0.5);
                    let d2 = (y - cy).powi(2) + (x - cx).powi(2);
                    let a = (-d2 / (2.0 * r * r)).exp();
                    data.push((bg[ch * hw + p] * (1.0 - a) + color * a).clamp(0.0, 1.0));
                }
            }
            labels.push(label);
        }
    }
    let n = labels.len();
    ImageDataset::new(Tensor::new(vec![n, 3, side, side], data)?, labels, None)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Nearest class mean in pixel space, fit on `train`, scored on `test`.
    fn nearest_mean_accuracy(train: &ImageDataset, test: &ImageDataset) -> f64 {
        let c = train.class_count();
        let d = train.images.len() / train.len();
        let mut means = vec![vec![0.0f64; d]; c];
        let mut counts = vec![0usize; c];
        for (i, &l) in train.labels.iter().enumerate() {
            for (m, &v) in means[l].iter_mut().zip(train.images.row(i)) {
                *m += f64::from(v);
            }
            counts[l] += 1;
        }
        for (m, &k) in means.iter_mut().zip(&counts) {
            m.iter_mut().for_each(|v| *v /= k as f64);
        }
        let hits = test
            .labels
            .iter()
            .enumerate()
            .filter(|&(i, &l)| {
                let x = test.images.row(i);
                let dist = |m: &Vec<f64>| m.iter().zip(x).map(|(a, &b)| (a - f64::from(b)).powi(2)).sum::<f64>();
                let best = (0..c).min_by(|&a, &b| dist(&means[a]).total_cmp(&dist(&means[b]))).unwrap();
                best == l
            })
            .count();
        hits as f64 / test.len() as f64
    }

    #[test]
    fn counts_determinism_and_separability() {
        let specs = default_blob_specs(3);
        let a = synth_blobs(&specs, 32, 100, 7).unwrap();
        assert_eq!(a.len(), 300);
        assert_eq!(a.images.shape(), &[300, 3, 32, 32]);
        assert_eq!(a, synth_blobs(&specs, 32, 100, 7).unwrap());
        let held_out = synth_blobs(&specs, 32, 100, 8).unwrap();
        assert!(nearest_mean_accuracy(&a, &held_out) >= 0.95);
    }

    #[test]
    fn open_set_layout_puts_unknowns_between_knowns() {
        let specs = open_set_blob_specs(4, &[2, 0, 3], &[1]);
        assert_eq!(specs[2], line_blob_spec(0.0));
        assert_eq!(specs[1], line_blob_spec(1.0 / 3.0));
        assert_eq!(specs[0], line_blob_spec(2.0 / 3.0));
        assert_eq!(specs[3], line_blob_spec(1.0));
        let specs = open_set_blob_specs(3, &[1, 2], &[0]);
        assert_eq!(specs[0], line_blob_spec(0.5));
    }
}
