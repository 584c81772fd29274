//! Attribution-map export and the activated-area statistic.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attribution::{aggregate, gradcam, layercam, AttributionMap, CamMethod};
use crate::autodiff::kernels::resize_plane;
use crate::autodiff::Graph;
use crate::encoder::{Encoder, Mode};
use crate::error::{Error, Result};
use crate::losses::{contra_loss, ContrastiveBatch, Denominator, LossWeights};
use crate::tensor::Tensor;

/// Thresholds for the activated-area fraction, log-spaced over `[1e-5, 1e-3]`.
pub const DEFAULT_THRESHOLDS: [f64; 5] = [1e-5, 3.1622776601683795e-5, 1e-4, 3.1622776601683795e-4, 1e-3];

/// Fraction of entries strictly above `tau`.
pub fn activated_fraction(plane: &[f32], tau: f64) -> f64 {
    if plane.is_empty() {
        return 0.0;
    }
    plane.iter().filter(|&&v| f64::from(v) > tau).count() as f64 / plane.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct MapExport {
    pub image: usize,
    /// Tapped unit name, or `aggregate`.
    pub layer: String,
    pub grid_file: PathBuf,
    pub image_file: PathBuf,
    /// Activated-area fraction per threshold, in threshold order.
    pub activated: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct ExportEval {
    pub method: CamMethod,
    pub layers: Vec<String>,
    pub thresholds: Vec<f64>,
    pub maps: Vec<MapExport>,
}

/// Options of an export run.
#[derive(Clone, Debug)]
pub struct ExportOptions {
    pub layers: Vec<String>,
    pub method: CamMethod,
    pub weights: LossWeights,
    pub temperature: f64,
    pub denominator: Denominator,
    pub thresholds: Vec<f64>,
}

fn write_grid(path: &Path, plane: &[f32], side: usize) -> Result<()> {
    let mut s = String::new();
    for row in plane.chunks(side) {
        let line: Vec<String> = row.iter().map(|v| format!("{v:.6e}")).collect();
        writeln!(s, "{}", line.join(" ")).expect("string write");
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Binary PGM scaled so the plane maximum maps to 255.
fn write_pgm(path: &Path, plane: &[f32], side: usize) -> Result<()> {
    let max = plane.iter().copied().fold(0.0f32, f32::max);
    let mut bytes = format!("P5\n{side} {side}\n255\n").into_bytes();
    bytes.extend(plane.iter().map(|&v| if max > 0.0 { (v.max(0.0) / max * 255.0).round() as u8 } else { 0 }));
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Per-layer maps (upsampled, unnormalized) and the aggregated map for each
/// image, written to `dir` as text grids and PGM images.
pub fn export_maps(
    encoder: &Encoder<f32>,
    images: &Tensor,
    labels: Option<&[usize]>,
    opts: &ExportOptions,
    dir: &Path,
) -> Result<ExportEval> {
    if opts.layers.is_empty() {
        return Err(Error::Config("export needs at least one layer".into()));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let enc = encoder.with_taps(&opts.layers)?;
    let side = enc.config().input_resolution;
    let n = images.shape().first().copied().unwrap_or(0);
    let stacked = Tensor::concat_rows(&[images, images])?;
    let labels2: Option<Vec<usize>> = labels.map(|l| l.iter().chain(l).copied().collect());
    let mut weights = opts.weights;
    if labels2.is_none() || n < 2 {
        weights.theta = 0.0;
    }
    if weights.lambda == 0.0 && weights.theta == 0.0 {
        weights.lambda = 1.0;
    }
    let mut g = Graph::new();
    let out = enc.forward_frozen(&mut g, &stacked, Mode::TrainFrozenStats)?;
    let batch = ContrastiveBatch::new(out.embeddings, labels2.as_deref(), opts.temperature);
    let terms = contra_loss(&mut g, &batch, &weights, opts.denominator)?;
    g.backward(terms.total.expect("total"))?;
    let taps = g.tap_gradients(&opts.layers)?;

    let mut per_layer = Vec::new();
    for layer in &opts.layers {
        let m = match opts.method {
            CamMethod::GradCam => gradcam(&taps, layer)?,
            CamMethod::LayerCam => layercam(&taps, layer)?,
        };
        let first = AttributionMap::new(m.values.select_rows(&(0..n).collect::<Vec<_>>()), m.source_layers)?;
        per_layer.push(first);
    }
    let agg = aggregate(&per_layer, side)?;

    let mut maps = Vec::new();
    let mut emit = |i: usize, layer: &str, plane: &[f32]| -> Result<()> {
        let stem = format!("img{i:04}-{layer}");
        let grid_file = dir.join(format!("{stem}.txt"));
        let image_file = dir.join(format!("{stem}.pgm"));
        write_grid(&grid_file, plane, side)?;
        write_pgm(&image_file, plane, side)?;
        let activated = opts.thresholds.iter().map(|&t| activated_fraction(plane, t)).collect();
        maps.push(MapExport { image: i, layer: layer.to_string(), grid_file, image_file, activated });
        Ok(())
    };
    for i in 0..n {
        for (layer, m) in opts.layers.iter().zip(&per_layer) {
            let up = resize_plane(m.plane(i), m.height(), m.width(), side, side);
            emit(i, layer, &up)?;
        }
        emit(i, "aggregate", agg.plane(i))?;
    }
    Ok(ExportEval { method: opts.method, layers: opts.layers.clone(), thresholds: opts.thresholds.clone(), maps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn activated_fraction_examples() {
        assert!(DEFAULT_THRESHOLDS.iter().all(|&t| activated_fraction(&[0.0; 16], t) == 0.0));
        assert!(DEFAULT_THRESHOLDS.iter().all(|&t| activated_fraction(&[0.01; 16], t) == 1.0));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let plane: Vec<f32> = (0..64).map(|_| rng.random_range(0.0..2e-3)).collect();
            let f: Vec<f64> = DEFAULT_THRESHOLDS.iter().map(|&t| activated_fraction(&plane, t)).collect();
            assert!(f.windows(2).all(|w| w[1] <= w[0]));
        }
    }

    #[test]
    fn export_writes_maps() {
        let mut cfg = EncoderConfig::tiny();
        cfg.input_resolution = 16;
        cfg.stage_widths = vec![8, 16];
        cfg.embedding_dim = 8;
        cfg.tap_names = vec![];
        let enc = Encoder::<f32>::new(cfg, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let images = Tensor::new(vec![3, 3, 16, 16], (0..3 * 3 * 256).map(|_| rng.random()).collect()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let opts = ExportOptions {
            layers: vec!["conv4_2".into(), "conv5_2".into()],
            method: CamMethod::LayerCam,
            weights: LossWeights::default(),
            temperature: 0.1,
            denominator: Denominator::AsPrinted,
            thresholds: DEFAULT_THRESHOLDS.to_vec(),
        };
        let out = export_maps(&enc, &images, Some(&[0, 1, 0]), &opts, dir.path()).unwrap();
        assert_eq!(out.maps.len(), 3 * 3);
        for m in &out.maps {
            assert!(m.activated.windows(2).all(|w| w[1] <= w[0]));
            let pgm = std::fs::read(&m.image_file).unwrap();
            assert!(pgm.starts_with(b"P5\n16 16\n255\n") && pgm.len() == 13 + 256);
            let grid = std::fs::read_to_string(&m.grid_file).unwrap();
            assert_eq!(grid.lines().count(), 16);
        }
    }
}
