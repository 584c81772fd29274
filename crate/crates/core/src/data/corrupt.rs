//! Image corruptions at five severities.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::autodiff::kernels::resize_plane;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorruptionKind {
    GaussianNoise,
    ShotNoise,
    ImpulseNoise,
    DefocusBlur,
    Brightness,
    Contrast,
    Pixelate,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 7] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::ShotNoise,
        CorruptionKind::ImpulseNoise,
        CorruptionKind::DefocusBlur,
        CorruptionKind::Brightness,
        CorruptionKind::Contrast,
        CorruptionKind::Pixelate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian-noise",
            CorruptionKind::ShotNoise => "shot-noise",
            CorruptionKind::ImpulseNoise => "impulse-noise",
            CorruptionKind::DefocusBlur => "defocus-blur",
            CorruptionKind::Brightness => "brightness",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::Pixelate => "pixelate",
        }
    }

    /// Parameters for severities 1..=5.
    ///
    /// Noise std, photon count, impulse rate, disk radius (px), additive
    /// brightness, contrast factor and pixelation factor respectively.
    pub fn default_params(self) -> [f64; 5] {
        match self {
            CorruptionKind::GaussianNoise => [0.04, 0.06, 0.08, 0.09, 0.10],
            CorruptionKind::ShotNoise => [500.0, 250.0, 100.0, 75.0, 50.0],
            CorruptionKind::ImpulseNoise => [0.01, 0.02, 0.03, 0.05, 0.07],
            CorruptionKind::DefocusBlur => [1.0, 1.5, 2.0, 2.5, 3.0],
            CorruptionKind::Brightness => [0.1, 0.2, 0.3, 0.4, 0.5],
            CorruptionKind::Contrast => [0.4, 0.3, 0.2, 0.1, 0.05],
            CorruptionKind::Pixelate => [1.5, 2.0, 2.5, 3.0, 4.0],
        }
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CorruptionKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown corruption type {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    /// 1..=5.
    pub severity: u8,
}

/// Parameter per type and severity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CorruptionTable(pub BTreeMap<CorruptionKind, [f64; 5]>);

impl Default for CorruptionTable {
    fn default() -> Self {
        CorruptionTable(CorruptionKind::ALL.into_iter().map(|k| (k, k.default_params())).collect())
    }
}

impl CorruptionTable {
    pub fn param(&self, spec: CorruptionSpec) -> Result<f64> {
        if !(1..=5).contains(&spec.severity) {
            return Err(Error::Config(format!("severity {} outside 1..=5", spec.severity)));
        }
        let row = self.0.get(&spec.kind).copied().unwrap_or_else(|| spec.kind.default_params());
        Ok(row[usize::from(spec.severity - 1)])
    }
}

/// Apply `spec` with the table's parameter, drawing noise from `seed`.
pub fn corrupt(images: &Tensor, spec: CorruptionSpec, table: &CorruptionTable, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    corrupt_with(images, spec.kind, table.param(spec)?, &mut rng)
}

/// Apply one corruption with an explicit parameter.
pub fn corrupt_with<R: Rng + ?Sized>(images: &Tensor, kind: CorruptionKind, param: f64, rng: &mut R) -> Result<Tensor> {
    let [n, c, h, w] = <[usize; 4]>::try_from(images.shape())
        .map_err(|_| Error::shape("corrupt", format!("expected [N,C,H,W], got {:?}", images.shape())))?;
    let mut out = images.clone();
    let hw = h * w;
    let bad = |what: &str| Error::Config(format!("{kind}: invalid {what} {param}"));
    match kind {
        CorruptionKind::GaussianNoise => {
            if param < 0.0 {
                return Err(bad("std"));
            }
            if param > 0.0 {
                let d = Normal::new(0.0, param).map_err(|_| bad("std"))?;
                out.data_mut().iter_mut().for_each(|v| *v += d.sample(rng) as f32);
            }
        }
        CorruptionKind::ShotNoise => {
            if !(param > 0.0) {
                return Err(bad("photon count"));
            }
            for v in out.data_mut() {
                let rate = f64::from(*v) * param;
                *v = if rate > 0.0 {
                    let p = Poisson::new(rate).map_err(|_| bad("photon count"))?;
                    (p.sample(rng) / param) as f32
                } else {
                    0.0
                };
            }
        }
        CorruptionKind::ImpulseNoise => {
            if !(0.0..=1.0).contains(&param) {
                return Err(bad("rate"));
            }
            for v in out.data_mut() {
                if rng.random_bool(param) {
                    *v = if rng.random_bool(0.5) { 1.0 } else { 0.0 };
                }
            }
        }
        CorruptionKind::DefocusBlur => {
            if param < 0.0 {
                return Err(bad("radius"));
            }
            let r = param.floor() as isize;
            let taps: Vec<(isize, isize)> = (-r..=r)
                .flat_map(|dy| (-r..=r).map(move |dx| (dy, dx)))
                .filter(|&(dy, dx)| ((dy * dy + dx * dx) as f64) <= param * param)
                .collect();
            let norm = 1.0 / taps.len() as f32;
            let data = images.data();
            for p in 0..n * c {
                let src = &data[p * hw..(p + 1) * hw];
                let dst = &mut out.data_mut()[p * hw..(p + 1) * hw];
                for y in 0..h as isize {
                    for x in 0..w as isize {
                        let s: f32 = taps
                            .iter()
                            .map(|&(dy, dx)| {
                                let yy = (y + dy).clamp(0, h as isize - 1) as usize;
                                let xx = (x + dx).clamp(0, w as isize - 1) as usize;
                                src[yy * w + xx]
                            })
                            .sum();
                        dst[y as usize * w + x as usize] = s * norm;
                    }
                }
            }
        }
        CorruptionKind::Brightness => {
            let b = param as f32;
            out.data_mut().iter_mut().for_each(|v| *v += b);
        }
        CorruptionKind::Contrast => {
            if param < 0.0 {
                return Err(bad("factor"));
            }
            let k = param as f32;
            for plane in out.data_mut().chunks_mut(hw) {
                let mean = plane.iter().sum::<f32>() / hw as f32;
                plane.iter_mut().for_each(|v| *v = (*v - mean) * k + mean);
            }
        }
        CorruptionKind::Pixelate => {
            if param < 1.0 {
                return Err(bad("factor"));
            }
            let sh = ((h as f64 / param).round() as usize).max(1);
            let sw = ((w as f64 / param).round() as usize).max(1);
            for plane in out.data_mut().chunks_mut(hw) {
                let small = resize_plane(plane, h, w, sh, sw);
                for y in 0..h {
                    for x in 0..w {
                        plane[y * w + x] = small[(y * sh / h) * sw + x * sw / w];
                    }
                }
            }
        }
    }
    out.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn images(n: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![n, 3, 8, 8], (0..n * 192).map(|_| rng.random_range(0.0..=1.0)).collect()).unwrap()
    }

    #[test]
    fn identity_parameters() {
        let x = images(4, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert_eq!(corrupt_with(&x, CorruptionKind::GaussianNoise, 0.0, &mut rng).unwrap(), x);
        assert_eq!(corrupt_with(&x, CorruptionKind::Pixelate, 1.0, &mut rng).unwrap(), x);
        assert_eq!(corrupt_with(&x, CorruptionKind::Brightness, 0.0, &mut rng).unwrap(), x);
        assert_eq!(corrupt_with(&x, CorruptionKind::DefocusBlur, 0.0, &mut rng).unwrap(), x);
    }

    #[test]
    fn deterministic_bounded_and_monotone_tables() {
        let x = images(4, 3);
        let table = CorruptionTable::default();
        for kind in CorruptionKind::ALL {
            let p = kind.default_params();
            assert!(p.windows(2).all(|w| w[0] < w[1]) || p.windows(2).all(|w| w[0] > w[1]), "{kind}");
            for severity in 1..=5 {
                let spec = CorruptionSpec { kind, severity };
                let a = corrupt(&x, spec, &table, 9).unwrap();
                assert_eq!(a, corrupt(&x, spec, &table, 9).unwrap());
                assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
        assert!("fog".parse::<CorruptionKind>().is_err());
        assert!(table.param(CorruptionSpec { kind: CorruptionKind::Contrast, severity: 6 }).is_err());
    }

    #[test]
    fn noise_deviation_increases_with_severity() {
        let x = images(1000, 4);
        let table = CorruptionTable::default();
        for kind in [CorruptionKind::GaussianNoise, CorruptionKind::ShotNoise, CorruptionKind::ImpulseNoise] {
            let dev: Vec<f64> = (1..=5)
                .map(|severity| {
                    let y = corrupt(&x, CorruptionSpec { kind, severity }, &table, 5).unwrap();
                    x.data().iter().zip(y.data()).map(|(a, b)| f64::from(a - b).powi(2)).sum::<f64>() / x.len() as f64
                })
                .collect();
            assert!(dev.windows(2).all(|w| w[0] < w[1]), "{kind}: {dev:?}");
        }
    }
}
