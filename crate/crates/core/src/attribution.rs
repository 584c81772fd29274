//! GradCAM and LayerCAM maps from tapped activations, multi-layer
//! aggregation and peak localization.

use crate::autodiff::kernels::resize_plane;
use crate::autodiff::FeatureTaps;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Nonnegative saliency maps, one `H×W` plane per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributionMap<F: Real = f32> {
    /// Shape `[B, H, W]`.
    pub values: Tensor<F>,
    pub source_layers: Vec<String>,
}

impl<F: Real> AttributionMap<F> {
    pub fn new(values: Tensor<F>, source_layers: Vec<String>) -> Result<Self> {
        if values.shape().len() != 3 {
            return Err(Error::shape("attribution-map", format!("expected [B,H,W], got {:?}", values.shape())));
        }
        Ok(AttributionMap { values, source_layers })
    }

    pub fn batch(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn plane(&self, sample: usize) -> &[F] {
        self.values.row(sample)
    }

    /// Peak of one sample's plane.
    pub fn peak(&self, sample: usize) -> (usize, usize) {
        peak_location(self.plane(sample), self.width())
    }
}

fn layer<'a, F: Real>(taps: &'a FeatureTaps<F>, name: &str) -> Result<(&'a Tensor<F>, &'a Tensor<F>, [usize; 4])> {
    let (a, g) = taps.get(name)?;
    match *a.shape() {
        [b, c, h, w] => Ok((a, g, [b, c, h, w])),
        ref s => Err(Error::shape("attribution", format!("tap {name} must be [B,C,H,W], got {s:?}"))),
    }
}

/// `ReLU(Σ_k α_k A^k)` with `α_k` the spatial mean of the channel's gradient.
pub fn gradcam<F: Real>(taps: &FeatureTaps<F>, name: &str) -> Result<AttributionMap<F>> {
    let (a, g, [b, c, h, w]) = layer(taps, name)?;
    let hw = h * w;
    let inv = F::of(1.0 / hw as f64);
    let mut out = vec![F::zero(); b * hw];
    for s in 0..b {
        let plane = &mut out[s * hw..(s + 1) * hw];
        for k in 0..c {
            let base = (s * c + k) * hw;
            let alpha = g.data()[base..base + hw].iter().copied().sum::<F>() * inv;
            for (o, &v) in plane.iter_mut().zip(&a.data()[base..base + hw]) {
                *o = *o + alpha * v;
            }
        }
        plane.iter_mut().for_each(|v| *v = v.max(F::zero()));
    }
    AttributionMap::new(Tensor::new(vec![b, h, w], out)?, vec![name.to_string()])
}

/// `ReLU(Σ_k ReLU(∂L/∂A^k) ⊙ A^k)`.
pub fn layercam<F: Real>(taps: &FeatureTaps<F>, name: &str) -> Result<AttributionMap<F>> {
    let (a, g, [b, c, h, w]) = layer(taps, name)?;
    let hw = h * w;
    let mut out = vec![F::zero(); b * hw];
    for s in 0..b {
        let plane = &mut out[s * hw..(s + 1) * hw];
        for k in 0..c {
            let base = (s * c + k) * hw;
            let (ak, gk) = (&a.data()[base..base + hw], &g.data()[base..base + hw]);
            for ((o, &av), &gv) in plane.iter_mut().zip(ak).zip(gk) {
                *o = *o + gv.max(F::zero()) * av;
            }
        }
        plane.iter_mut().for_each(|v| *v = v.max(F::zero()));
    }
    AttributionMap::new(Tensor::new(vec![b, h, w], out)?, vec![name.to_string()])
}

/// Min-max normalize in place; constant planes become zeros.
pub fn normalize_plane<F: Real>(plane: &mut [F]) {
    let lo = plane.iter().copied().fold(F::infinity(), F::min);
    let hi = plane.iter().copied().fold(F::neg_infinity(), F::max);
    let range = hi - lo;
    if range > F::zero() && range.is_finite() {
        plane.iter_mut().for_each(|v| *v = (*v - lo) / range);
    } else {
        plane.fill(F::zero());
    }
}

/// Upsample each map to `resolution`, normalize per sample, then sum.
pub fn aggregate<F: Real>(maps: &[AttributionMap<F>], resolution: usize) -> Result<AttributionMap<F>> {
    let first = maps.first().ok_or_else(|| Error::invalid("aggregate needs at least one map"))?;
    let b = first.batch();
    if resolution == 0 {
        return Err(Error::invalid("aggregate resolution must be positive"));
    }
    let hw = resolution * resolution;
    let mut out = vec![F::zero(); b * hw];
    let mut layers = Vec::new();
    for m in maps {
        if m.batch() != b {
            return Err(Error::shape("aggregate", format!("batch {} vs {b}", m.batch())));
        }
        for s in 0..b {
            let mut up = resize_plane(m.plane(s), m.height(), m.width(), resolution, resolution);
            normalize_plane(&mut up);
            for (o, v) in out[s * hw..(s + 1) * hw].iter_mut().zip(up) {
                *o = *o + v;
            }
        }
        layers.extend(m.source_layers.iter().cloned());
    }
    AttributionMap::new(Tensor::new(vec![b, resolution, resolution], out)?, layers)
}

/// Attribution method used by GradMix.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CamMethod {
    GradCam,
    #[default]
    LayerCam,
}

/// Per-layer maps for `layers`, aggregated at `resolution`.
pub fn attribution_maps<F: Real>(
    taps: &FeatureTaps<F>,
    layers: &[String],
    method: CamMethod,
    resolution: usize,
) -> Result<AttributionMap<F>> {
    let maps = layers
        .iter()
        .map(|l| match method {
            CamMethod::GradCam => gradcam(taps, l),
            CamMethod::LayerCam => layercam(taps, l),
        })
        .collect::<Result<Vec<_>>>()?;
    aggregate(&maps, resolution)
}

/// Row-major argmax of a `width`-wide plane; the first maximum wins.
pub fn peak_location<F: Real>(plane: &[F], width: usize) -> (usize, usize) {
    let mut best = 0;
    for (i, &v) in plane.iter().enumerate() {
        if v > plane[best] {
            best = i;
        }
    }
    (best / width, best % width)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn taps(a: &[f64], g: &[f64], shape: [usize; 4]) -> FeatureTaps<f64> {
        let mut t = FeatureTaps::new();
        t.insert("l", Tensor::from_f64(shape, a).unwrap(), Tensor::from_f64(shape, g).unwrap()).unwrap();
        t
    }

    #[test]
    fn gradcam_hand_example() {
        let t = taps(&[1., 2., 3., 4.], &[0.5; 4], [1, 1, 2, 2]);
        assert_eq!(gradcam(&t, "l").unwrap().values.data(), &[0.5, 1.0, 1.5, 2.0]);
    }

    #[test]
    fn gradcam_negative_and_cancelling() {
        let t = taps(&[1., 2., 3., 4.], &[-0.5; 4], [1, 1, 2, 2]);
        assert!(gradcam(&t, "l").unwrap().values.data().iter().all(|&v| v == 0.0));
        let a = [1., 2., 3., 4., 1., 2., 3., 4.];
        let g = [0.3, 0.3, 0.3, 0.3, -0.3, -0.3, -0.3, -0.3];
        let t = taps(&a, &g, [1, 2, 2, 2]);
        assert!(gradcam(&t, "l").unwrap().values.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layercam_hand_example() {
        let t = taps(&[1., -2., 3., 4.], &[1., -1., 2., 0.], [1, 1, 2, 2]);
        assert_eq!(layercam(&t, "l").unwrap().values.data(), &[1.0, 0.0, 6.0, 0.0]);
        let t = taps(&[0.; 4], &[1., -1., 2., 0.], [1, 1, 2, 2]);
        assert!(layercam(&t, "l").unwrap().values.data().iter().all(|&v| v == 0.0));
        let a = [1., -5., 3., 4., 2., 1., -4., 0.];
        let t = taps(&a, &[1.; 8], [1, 2, 2, 2]);
        assert_eq!(layercam(&t, "l").unwrap().values.data(), &[3.0, 0.0, 0.0, 4.0]);
    }

    #[test]
    fn missing_tap_is_error() {
        let t = taps(&[1.; 4], &[1.; 4], [1, 1, 2, 2]);
        assert!(matches!(gradcam(&t, "x"), Err(Error::UnknownTap(_))));
        assert!(layercam(&t, "x").is_err());
    }

    fn map(data: &[f64], h: usize, w: usize) -> AttributionMap<f64> {
        AttributionMap::new(Tensor::from_f64([1, h, w], data).unwrap(), vec!["m".into()]).unwrap()
    }

    #[test]
    fn aggregate_examples() {
        let m = map(&[1., 3., 2., 5.], 2, 2);
        let one = aggregate(std::slice::from_ref(&m), 2).unwrap();
        assert_eq!(one.values.data(), &[0.0, 0.5, 0.25, 1.0]);
        let two = aggregate(&[m.clone(), m.clone()], 2).unwrap();
        assert_eq!(two.values.data(), &[0.0, 1.0, 0.5, 2.0]);
        let three = aggregate(&[m.clone(), m.clone(), m.clone()], 2).unwrap();
        let want: Vec<f64> = one.values.data().iter().map(|v| 3.0 * v).collect();
        assert_eq!(three.values.data(), &want[..]);

        let a = map(&[0.5; 64], 8, 8);
        let b = map(&(0..16).map(f64::from).collect::<Vec<_>>(), 4, 4);
        let agg = aggregate(&[a, b], 32).unwrap();
        assert_eq!(agg.values.shape(), &[1, 32, 32]);
        assert!(aggregate::<f64>(&[], 8).is_err());
    }

    #[test]
    fn peak_examples() {
        assert_eq!(peak_location(&[0., 1., 1., 0.], 2), (0, 1));
        let mut m = vec![0.0; 100];
        m[5 * 10 + 7] = 3.0;
        assert_eq!(peak_location(&m, 10), (5, 7));
        assert_eq!(peak_location(&[0.0; 9], 3), (0, 0));
    }

    #[test]
    fn scale_covariance_nonnegativity_and_peak_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let a: Vec<f64> = (0..2 * 3 * 4 * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let g: Vec<f64> = (0..2 * 3 * 4 * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let g2: Vec<f64> = g.iter().map(|v| 4.0 * v).collect();
            let (t, t2) = (taps(&a, &g, [2, 3, 4, 4]), taps(&a, &g2, [2, 3, 4, 4]));
            for f in [gradcam::<f64>, layercam::<f64>] {
                let (m, m2) = (f(&t, "l").unwrap(), f(&t2, "l").unwrap());
                assert!(m.values.data().iter().all(|&v| v >= 0.0));
                let scaled: Vec<f64> = m.values.data().iter().map(|v| 4.0 * v).collect();
                assert_eq!(m2.values.data(), &scaled[..]);
                let exp = m.values.map(|v| v.exp());
                assert_eq!(peak_location(m.plane(1), 4), peak_location(exp.row(1), 4));
            }
        }
    }
}
