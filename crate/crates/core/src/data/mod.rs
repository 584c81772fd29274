//! Datasets: binary formats, synthetic blobs, open-set split protocols and
//! image corruptions.

mod corrupt;
mod formats;
mod split;
mod synth;

pub use corrupt::{corrupt, corrupt_with, CorruptionKind, CorruptionSpec, CorruptionTable};
pub use formats::{
    load_cifar, load_dataset, load_idx, write_cifar, write_idx, DatasetFormat, CIFAR_SIDE, IDX_IMAGE_MAGIC,
    IDX_LABEL_MAGIC,
};
pub use split::{class_order, make_split, Protocol, SourceData, Split, SplitManifest, SplitProtocol, TRIALS};
pub use synth::{default_blob_specs, line_blob_spec, open_set_blob_specs, synth_blobs, BlobSpec};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Images in `[0, 1]` with dense labels.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageDataset {
    /// `[N, C, H, W]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub class_names: Option<Vec<String>>,
}

impl ImageDataset {
    pub fn new(images: Tensor, labels: Vec<usize>, class_names: Option<Vec<String>>) -> Result<Self> {
        let ds = ImageDataset { images, labels, class_names };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let shape = self.images.shape();
        if shape.len() != 4 {
            return Err(Error::shape("dataset", format!("images must be [N,C,H,W], got {shape:?}")));
        }
        if shape[0] != self.labels.len() {
            return Err(Error::shape("dataset", format!("{} images, {} labels", shape[0], self.labels.len())));
        }
        if let Some(v) = self.images.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Format(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    pub fn channels(&self) -> usize {
        self.images.shape()[1]
    }

    pub fn side(&self) -> usize {
        self.images.shape()[2]
    }

    /// Rows at `idx`, labels unchanged.
    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        if idx.is_empty() {
            return Err(Error::invalid("selection is empty"));
        }
        Ok(ImageDataset {
            images: self.images.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            class_names: self.class_names.clone(),
        })
    }

    /// Samples whose label is in `classes`, relabeled to their position there.
    pub fn restrict(&self, classes: &[usize]) -> Result<Self> {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| classes.contains(&self.labels[i])).collect();
        let mut out = self.select(&idx)?;
        out.labels = out.labels.iter().map(|l| classes.iter().position(|c| c == l).expect("filtered")).collect();
        out.class_names = self
            .class_names
            .as_ref()
            .map(|names| classes.iter().map(|&c| names.get(c).cloned().unwrap_or_else(|| c.to_string())).collect());
        Ok(out)
    }

    /// Resize every image to `side × side` (bilinear) and map the channel
    /// count to `channels` by replication or channel averaging.
    pub fn conform(&self, channels: usize, side: usize) -> Result<Self> {
        let [n, c, h, w] = <[usize; 4]>::try_from(self.images.shape()).expect("validated");
        if c == channels && h == side && w == side {
            return Ok(self.clone());
        }
        let mut out = Vec::with_capacity(n * channels * side * side);
        for i in 0..n {
            let img = self.images.row(i);
            let planes: Vec<Vec<f32>> = (0..c)
                .map(|k| crate::autodiff::kernels::resize_plane(&img[k * h * w..(k + 1) * h * w], h, w, side, side))
                .collect();
            for k in 0..channels {
                if c == channels {
                    out.extend_from_slice(&planes[k]);
                } else if c == 1 {
                    out.extend_from_slice(&planes[0]);
                } else {
                    let mean = (0..side * side).map(|p| planes.iter().map(|pl| pl[p]).sum::<f32>() / c as f32);
                    out.extend(mean);
                }
            }
        }
        let images = Tensor::new(vec![n, channels, side, side], out)?.map(|v| v.clamp(0.0, 1.0));
        ImageDataset::new(images, self.labels.clone(), self.class_names.clone())
    }
}
