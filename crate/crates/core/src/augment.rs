//! Contrastive view generation and the mixing augmentations.
//!
//! Images are `[N, C, S, S]` tensors with values in `[0, 1]`.

use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::attribution::AttributionMap;
use crate::autodiff::kernels::resize_plane;
use crate::error::{Error, Result};
use crate::losses::{GAMMA_MAX, GAMMA_MIN};
use crate::tensor::Tensor;

fn dims(images: &Tensor) -> Result<[usize; 4]> {
    match *images.shape() {
        [n, c, h, w] if h == w => Ok([n, c, h, w]),
        ref s => Err(Error::shape("augment", format!("expected [N,C,S,S], got {s:?}"))),
    }
}

/// Settings for the stochastic view pipeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default)]
pub struct ViewConfig {
    pub crop_scale: (f64, f64),
    pub flip_p: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub jitter_p: f64,
    pub grayscale_p: f64,
}

impl Default for ViewConfig {
    fn default() -> Self {
        ViewConfig {
            crop_scale: (0.2, 1.0),
            flip_p: 0.5,
            brightness: 0.4,
            contrast: 0.4,
            jitter_p: 0.8,
            grayscale_p: 0.2,
        }
    }
}

impl ViewConfig {
    /// Leaves images untouched.
    pub fn identity() -> Self {
        ViewConfig {
            crop_scale: (1.0, 1.0),
            flip_p: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            jitter_p: 0.0,
            grayscale_p: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewBatch {
    pub originals: Tensor,
    pub view_a: Tensor,
    pub view_b: Tensor,
}

impl ViewBatch {
    /// `[view_a; view_b]`, the row layout the contrastive losses expect.
    pub fn stacked(&self) -> Tensor {
        Tensor::concat_rows(&[&self.view_a, &self.view_b]).expect("views share shape")
    }
}

/// Crop window `(top, left, height, width)` for a random resized crop.
fn crop_window<R: Rng + ?Sized>(rng: &mut R, s: usize, scale: (f64, f64)) -> (usize, usize, usize, usize) {
    let area = (s * s) as f64;
    let (lo, hi) = (scale.0.min(scale.1), scale.0.max(scale.1));
    let log_ratio = ((3.0f64 / 4.0).ln(), (4.0f64 / 3.0).ln());
    for _ in 0..10 {
        let target = area * if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let ratio = rng.random_range(log_ratio.0..=log_ratio.1).exp();
        let w = (target * ratio).sqrt().round() as usize;
        let h = (target / ratio).sqrt().round() as usize;
        if (1..=s).contains(&w) && (1..=s).contains(&h) {
            let top = rng.random_range(0..=s - h);
            let left = rng.random_range(0..=s - w);
            return (top, left, h, w);
        }
    }
    (0, 0, s, s)
}

fn one_view<R: Rng + ?Sized>(rng: &mut R, img: &[f32], c: usize, s: usize, cfg: &ViewConfig) -> Vec<f32> {
    let hw = s * s;
    let (top, left, h, w) = crop_window(rng, s, cfg.crop_scale);
    let flip = rng.random_bool(cfg.flip_p.clamp(0.0, 1.0));
    let jitter = rng.random_bool(cfg.jitter_p.clamp(0.0, 1.0));
    let bright = if cfg.brightness > 0.0 { rng.random_range(1.0 - cfg.brightness..=1.0 + cfg.brightness) } else { 1.0 };
    let contrast = if cfg.contrast > 0.0 { rng.random_range(1.0 - cfg.contrast..=1.0 + cfg.contrast) } else { 1.0 };
    let gray = rng.random_bool(cfg.grayscale_p.clamp(0.0, 1.0));

    let mut out = Vec::with_capacity(c * hw);
    for ch in 0..c {
        let plane = &img[ch * hw..(ch + 1) * hw];
        let resized = if (top, left, h, w) == (0, 0, s, s) {
            plane.to_vec()
        } else {
            let crop: Vec<f32> =
                (top..top + h).flat_map(|r| plane[r * s + left..r * s + left + w].iter().copied()).collect();
            resize_plane(&crop, h, w, s, s)
        };
        out.extend(resized);
    }
    if flip {
        for row in out.chunks_mut(s) {
            row.reverse();
        }
    }
    if jitter {
        let b = bright as f32;
        out.iter_mut().for_each(|v| *v = (*v * b).clamp(0.0, 1.0));
        let mean = out.iter().sum::<f32>() / out.len() as f32;
        let k = contrast as f32;
        out.iter_mut().for_each(|v| *v = ((*v - mean) * k + mean).clamp(0.0, 1.0));
    }
    if gray && c > 1 {
        for i in 0..hw {
            let m = (0..c).map(|ch| out[ch * hw + i]).sum::<f32>() / c as f32;
            (0..c).for_each(|ch| out[ch * hw + i] = m);
        }
    }
    out.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    out
}

/// Two independent stochastic views of every image.
pub fn standard_views<R: Rng + ?Sized>(images: &Tensor, rng: &mut R, cfg: &ViewConfig) -> Result<ViewBatch> {
    let [n, c, s, _] = dims(images)?;
    let mut a = Vec::with_capacity(images.len());
    let mut b = Vec::with_capacity(images.len());
    for i in 0..n {
        a.extend(one_view(rng, images.row(i), c, s, cfg));
        b.extend(one_view(rng, images.row(i), c, s, cfg));
    }
    Ok(ViewBatch {
        originals: images.clone(),
        view_a: Tensor::new(images.shape().to_vec(), a)?,
        view_b: Tensor::new(images.shape().to_vec(), b)?,
    })
}

/// `γ ~ U(0.1, 0.5)`.
pub fn sample_gamma<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.random_range(GAMMA_MIN..=GAMMA_MAX)
}

/// Square mask placed on an image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub gamma: f64,
    pub center: (usize, usize),
    pub side: usize,
    /// Top-left corner; the rect covers `[top, top+side) × [left, left+side)`.
    pub top: usize,
    pub left: usize,
}

impl MaskSpec {
    /// Side `round(γ·S)` centered on `center`, shifted (never shrunk) to fit.
    pub fn place(gamma: f64, center: (usize, usize), image_side: usize) -> Self {
        let side = ((gamma * image_side as f64).round() as usize).clamp(1, image_side);
        Self::square(gamma, center, side, image_side)
    }

    fn square(gamma: f64, center: (usize, usize), side: usize, s: usize) -> Self {
        let fit = |c: usize| c.saturating_sub(side / 2).min(s - side);
        MaskSpec { gamma, center, side, top: fit(center.0), left: fit(center.1) }
    }

    pub fn bottom(&self) -> usize {
        self.top + self.side
    }

    pub fn right(&self) -> usize {
        self.left + self.side
    }

    pub fn area_fraction(&self, image_side: usize) -> f64 {
        (self.side * self.side) as f64 / (image_side * image_side) as f64
    }

    pub fn contains(&self, r: usize, c: usize) -> bool {
        (self.top..self.bottom()).contains(&r) && (self.left..self.right()).contains(&c)
    }
}

/// Paste the whole donor, resized to the mask, over the target's rect.
fn paste(dst: &mut [f32], donor: &[f32], c: usize, s: usize, m: &MaskSpec) {
    let hw = s * s;
    for ch in 0..c {
        let patch = resize_plane(&donor[ch * hw..(ch + 1) * hw], s, s, m.side, m.side);
        for r in 0..m.side {
            let at = ch * hw + (m.top + r) * s + m.left;
            dst[at..at + m.side].copy_from_slice(&patch[r * m.side..(r + 1) * m.side]);
        }
    }
}

fn donor<R: Rng + ?Sized>(rng: &mut R, n: usize, i: usize) -> usize {
    let j = rng.random_range(0..n - 1);
    if j >= i {
        j + 1
    } else {
        j
    }
}

/// Output of a mixing augmentation.
#[derive(Clone, Debug)]
pub struct Mixed {
    pub images: Tensor,
    /// Donor (partner) index of each image.
    pub partners: Vec<usize>,
    pub masks: Vec<MaskSpec>,
    /// Mixing coefficient: the kept fraction for mixup, `1 −` pasted area otherwise.
    pub lambda: f64,
    /// Weight of the mixed-batch loss term.
    pub loss_weight: f64,
}

/// Paste a resized batch-mate over the most attributed square of each image.
pub fn gradmix<R: Rng + ?Sized>(images: &Tensor, maps: &AttributionMap, gamma: f64, rng: &mut R) -> Result<Mixed> {
    let [n, c, s, _] = dims(images)?;
    crate::losses::check_gamma(gamma)?;
    if n < 2 {
        return Err(Error::invalid("gradmix needs a batch of at least 2 (no donor)"));
    }
    if maps.batch() != n || maps.height() != s || maps.width() != s {
        return Err(Error::shape(
            "gradmix",
            format!("maps {:?} do not match images {:?}", maps.values.shape(), images.shape()),
        ));
    }
    let mut out = images.clone();
    let mut partners = Vec::with_capacity(n);
    let mut masks = Vec::with_capacity(n);
    for i in 0..n {
        let m = MaskSpec::place(gamma, maps.peak(i), s);
        let j = donor(rng, n, i);
        paste(out.row_mut(i), images.row(j), c, s, &m);
        partners.push(j);
        masks.push(m);
    }
    let area = masks[0].area_fraction(s);
    Ok(Mixed { images: out, partners, masks, lambda: 1.0 - area, loss_weight: gamma * gamma })
}

fn permutation<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

fn beta<R: Rng + ?Sized>(rng: &mut R, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0) {
        return Err(Error::invalid(format!("alpha must be > 0, got {alpha}")));
    }
    let d = Beta::new(alpha, alpha).map_err(|e| Error::invalid(e.to_string()))?;
    Ok(d.sample(rng))
}

/// `λ·x_i + (1−λ)·x_{π(i)}` with `λ ~ Beta(α, α)`.
pub fn mixup<R: Rng + ?Sized>(images: &Tensor, alpha: f64, rng: &mut R) -> Result<Mixed> {
    let lambda = beta(rng, alpha)?;
    let perm = permutation(rng, dims(images)?[0]);
    mixup_with(images, &perm, lambda)
}

/// Mixup with a fixed partner map and coefficient.
pub fn mixup_with(images: &Tensor, partners: &[usize], lambda: f64) -> Result<Mixed> {
    let n = dims(images)?[0];
    if partners.len() != n || partners.iter().any(|&p| p >= n) {
        return Err(Error::invalid("mixup partner map does not match the batch"));
    }
    let (l, k) = (lambda as f32, (1.0 - lambda) as f32);
    let mut out = images.clone();
    for (i, &j) in partners.iter().enumerate() {
        let src = images.row(j);
        for (o, &d) in out.row_mut(i).iter_mut().zip(src) {
            *o = if lambda == 1.0 { *o } else { (l * *o + k * d).clamp(0.0, 1.0) };
        }
    }
    Ok(Mixed { images: out, partners: partners.to_vec(), masks: Vec::new(), lambda, loss_weight: 1.0 - lambda })
}

/// Paste a resized partner into a random square covering `1 − λ` of the image.
pub fn cutmix<R: Rng + ?Sized>(images: &Tensor, alpha: f64, rng: &mut R) -> Result<Mixed> {
    let [n, _, s, _] = dims(images)?;
    let lambda = beta(rng, alpha)?;
    let perm = permutation(rng, n);
    let side = (s as f64 * (1.0 - lambda).sqrt()).round() as usize;
    let center = (rng.random_range(0..s), rng.random_range(0..s));
    cutmix_with(images, &perm, side, center)
}

/// CutMix with a fixed partner map, side and center. Side 0 pastes nothing.
pub fn cutmix_with(images: &Tensor, partners: &[usize], side: usize, center: (usize, usize)) -> Result<Mixed> {
    let [n, c, s, _] = dims(images)?;
    if partners.len() != n || partners.iter().any(|&p| p >= n) {
        return Err(Error::invalid("cutmix partner map does not match the batch"));
    }
    let side = side.min(s);
    let mut out = images.clone();
    let mut masks = Vec::new();
    if side > 0 {
        let gamma = side as f64 / s as f64;
        let m = MaskSpec::square(gamma, center, side, s);
        for (i, &j) in partners.iter().enumerate() {
            paste(out.row_mut(i), images.row(j), c, s, &m);
            masks.push(m);
        }
    }
    let ratio = (side * side) as f64 / (s * s) as f64;
    Ok(Mixed { images: out, partners: partners.to_vec(), masks, lambda: 1.0 - ratio, loss_weight: ratio })
}

/// Zero one `size×size` square per image at a uniform center.
pub fn cutout<R: Rng + ?Sized>(images: &Tensor, size: usize, rng: &mut R) -> Result<Mixed> {
    let [n, c, s, _] = dims(images)?;
    if size > s || size == 0 {
        return Err(Error::invalid(format!("cutout size {size} must be in 1..={s}")));
    }
    let hw = s * s;
    let mut out = images.clone();
    let mut masks = Vec::with_capacity(n);
    let gamma = size as f64 / s as f64;
    for i in 0..n {
        let m = MaskSpec::square(gamma, (rng.random_range(0..s), rng.random_range(0..s)), size, s);
        let img = out.row_mut(i);
        for ch in 0..c {
            for r in m.top..m.bottom() {
                let at = ch * hw + r * s;
                img[at + m.left..at + m.right()].fill(0.0);
            }
        }
        masks.push(m);
    }
    let ratio = gamma * gamma;
    Ok(Mixed { images: out, partners: (0..n).collect(), masks, lambda: 1.0 - ratio, loss_weight: ratio })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_images(rng: &mut ChaCha8Rng, n: usize, c: usize, s: usize) -> Tensor {
        let d = (0..n * c * s * s).map(|_| rng.random_range(0.0..=1.0)).collect();
        Tensor::new(vec![n, c, s, s], d).unwrap()
    }

    #[test]
    fn views_are_deterministic_bounded_and_identity_when_disabled() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let imgs = random_images(&mut rng, 4, 3, 16);
        let a = standard_views(&imgs, &mut ChaCha8Rng::seed_from_u64(5), &ViewConfig::default()).unwrap();
        let b = standard_views(&imgs, &mut ChaCha8Rng::seed_from_u64(5), &ViewConfig::default()).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.view_a, imgs);
        assert!(a.view_a.data().iter().chain(a.view_b.data()).all(|v| (0.0..=1.0).contains(v)));
        let id = standard_views(&imgs, &mut rng, &ViewConfig::identity()).unwrap();
        assert_eq!(id.view_a, imgs);
        assert_eq!(id.view_b, imgs);
    }

    #[test]
    fn gamma_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g: Vec<f64> = (0..10_000).map(|_| sample_gamma(&mut rng)).collect();
        assert!(g.iter().all(|v| (0.1..=0.5).contains(v)));
        let mean = g.iter().sum::<f64>() / g.len() as f64;
        assert!((mean - 0.3).abs() < 0.01);
        let again: Vec<f64> = {
            let mut r = ChaCha8Rng::seed_from_u64(2);
            (0..10).map(|_| sample_gamma(&mut r)).collect()
        };
        assert_eq!(&g[..10], &again[..]);
    }

    #[test]
    fn mask_geometry() {
        let m = MaskSpec::place(0.5, (16, 16), 32);
        assert_eq!((m.top, m.bottom(), m.left, m.right()), (8, 24, 8, 24));
        assert_eq!(m.area_fraction(32), 0.25);
        let m = MaskSpec::place(0.5, (0, 0), 32);
        assert_eq!((m.top, m.left, m.side), (0, 0, 16));
        let m = MaskSpec::place(0.5, (31, 31), 32);
        assert_eq!((m.bottom(), m.right(), m.side), (32, 32, 16));
    }

    fn peaked_maps(peaks: &[(usize, usize)], s: usize) -> AttributionMap {
        let mut d = vec![0.0f32; peaks.len() * s * s];
        for (i, &(r, c)) in peaks.iter().enumerate() {
            d[i * s * s + r * s + c] = 1.0;
        }
        AttributionMap::new(Tensor::new(vec![peaks.len(), s, s], d).unwrap(), vec![]).unwrap()
    }

    #[test]
    fn gradmix_masks_the_peak_and_keeps_the_rest() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let imgs = random_images(&mut rng, 3, 3, 32);
        let maps = peaked_maps(&[(16, 16), (0, 0), (30, 5)], 32);
        let out = gradmix(&imgs, &maps, 0.5, &mut rng).unwrap();
        assert_eq!(out.loss_weight, 0.25);
        for i in 0..3 {
            let m = out.masks[i];
            assert_ne!(out.partners[i], i);
            assert_eq!(m.side, 16);
            for ch in 0..3 {
                for r in 0..32 {
                    for c in 0..32 {
                        let at = ch * 1024 + r * 32 + c;
                        if !m.contains(r, c) {
                            assert_eq!(out.images.row(i)[at], imgs.row(i)[at]);
                        }
                    }
                }
            }
        }
        assert_eq!((out.masks[0].top, out.masks[0].left), (8, 8));
        assert_eq!((out.masks[1].top, out.masks[1].left), (0, 0));
        let one = Tensor::zeros(vec![1, 3, 32, 32]);
        assert!(gradmix(&one, &peaked_maps(&[(0, 0)], 32), 0.3, &mut rng).is_err());
    }

    #[test]
    fn gradmix_area_fraction_within_rounding_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = 32;
        for _ in 0..10_000 {
            let g = sample_gamma(&mut rng);
            let m = MaskSpec::place(g, (rng.random_range(0..s), rng.random_range(0..s)), s);
            assert!((m.area_fraction(s) - g * g).abs() <= 2.0 / s as f64);
            assert!(m.bottom() <= s && m.right() <= s);
        }
    }

    #[test]
    fn mixup_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let imgs = random_images(&mut rng, 4, 1, 4);
        assert_eq!(mixup_with(&imgs, &[1, 2, 3, 0], 1.0).unwrap().images, imgs);
        let mut d = vec![0.2f32; 16];
        d.extend(vec![0.6f32; 16]);
        let ab = Tensor::new(vec![2, 1, 4, 4], d).unwrap();
        let mid = mixup_with(&ab, &[1, 0], 0.5).unwrap();
        assert!(mid.images.data().iter().all(|&v| (v - 0.4).abs() < 1e-7));
        let out = mixup(&imgs, 0.4, &mut rng).unwrap();
        for (i, &j) in out.partners.iter().enumerate() {
            for ((&o, &a), &b) in out.images.row(i).iter().zip(imgs.row(i)).zip(imgs.row(j)) {
                assert!(o >= a.min(b) - 1e-6 && o <= a.max(b) + 1e-6);
            }
        }
    }

    #[test]
    fn cutmix_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let imgs = random_images(&mut rng, 4, 2, 16);
        let none = cutmix_with(&imgs, &[1, 2, 3, 0], 0, (3, 3)).unwrap();
        assert_eq!(none.images, imgs);
        assert_eq!(none.loss_weight, 0.0);
        for _ in 0..10_000 {
            let s = 16;
            let side = rng.random_range(0..=s);
            let m = MaskSpec::square(0.0, (rng.random_range(0..s), rng.random_range(0..s)), side.max(1), s);
            assert!(m.bottom() <= s && m.right() <= s);
        }
        // Realized area audit with a distinct marker image.
        let mut d = vec![0.0f32; 2 * 16 * 16];
        d[256..].fill(1.0);
        let marked = Tensor::new(vec![2, 1, 16, 16], d).unwrap();
        for _ in 0..50 {
            let out = cutmix(&marked, 1.0, &mut rng).unwrap();
            if out.partners[0] == 1 {
                let changed = out.images.row(0).iter().filter(|&&v| v == 1.0).count();
                assert_eq!(changed as f64 / 256.0, out.loss_weight);
            }
        }
    }

    #[test]
    fn cutout_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let ones = Tensor::ones(vec![3, 2, 8, 8]);
        let full = cutout(&ones, 8, &mut rng).unwrap();
        assert!(full.images.data().iter().all(|&v| v == 0.0));
        let part = cutout(&ones, 3, &mut rng).unwrap();
        for i in 0..3 {
            assert_eq!(part.images.row(i).iter().filter(|&&v| v == 0.0).count(), 2 * 9);
        }
        assert!(cutout(&ones, 9, &mut rng).is_err());
    }
}
