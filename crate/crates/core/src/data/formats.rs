//! IDX and CIFAR binary formats.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ImageDataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABEL_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_SIDE: usize = 32;
const CIFAR_PIXELS: usize = 3 * CIFAR_SIDE * CIFAR_SIDE;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetFormat {
    Idx,
    /// One label byte per record, ten classes.
    CifarBinary,
    /// Coarse and fine label bytes per record; the fine label is used.
    Cifar100Binary,
}

impl std::str::FromStr for DatasetFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "idx" => Ok(DatasetFormat::Idx),
            "cifar-binary" | "cifar10-binary" => Ok(DatasetFormat::CifarBinary),
            "cifar100-binary" => Ok(DatasetFormat::Cifar100Binary),
            other => Err(Error::Config(format!("unknown dataset format {other:?}"))),
        }
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format(format!("{what}: truncated header")))
}

fn pixel(b: u8) -> f32 {
    f32::from(b) / 255.0
}

fn byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Parse an IDX image file and its label file.
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<ImageDataset> {
    let magic = be_u32(images, 0, "idx images")?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(Error::Format(format!("idx images: bad magic {magic:#010x}, expected {IDX_IMAGE_MAGIC:#010x}")));
    }
    let n = be_u32(images, 4, "idx images")? as usize;
    let h = be_u32(images, 8, "idx images")? as usize;
    let w = be_u32(images, 12, "idx images")? as usize;
    let body = &images[16..];
    if body.len() != n * h * w {
        return Err(Error::Format(format!(
            "idx images: truncated, expected {} pixel bytes, found {}",
            n * h * w,
            body.len()
        )));
    }
    let magic = be_u32(labels, 0, "idx labels")?;
    if magic != IDX_LABEL_MAGIC {
        return Err(Error::Format(format!("idx labels: bad magic {magic:#010x}, expected {IDX_LABEL_MAGIC:#010x}")));
    }
    let m = be_u32(labels, 4, "idx labels")? as usize;
    if m != n || labels.len() != 8 + n {
        return Err(Error::Format(format!(
            "idx labels: expected {n} labels, header says {m}, found {}",
            labels.len().saturating_sub(8)
        )));
    }
    let lab: Vec<usize> = labels[8..].iter().map(|&b| usize::from(b)).collect();
    let images = Tensor::new(vec![n, 1, h, w], body.iter().map(|&b| pixel(b)).collect())?;
    ImageDataset::new(images, lab, None)
}

pub fn load_idx(images: &Path, labels: &Path) -> Result<ImageDataset> {
    parse_idx(&read(images)?, &read(labels)?)
}

/// Serialize a single-channel dataset as IDX image and label bytes.
pub fn encode_idx(ds: &ImageDataset) -> Result<(Vec<u8>, Vec<u8>)> {
    let [n, c, h, w] = <[usize; 4]>::try_from(ds.images.shape()).expect("validated");
    if c != 1 {
        return Err(Error::Format(format!("idx holds single-channel images, got {c} channels")));
    }
    if let Some(&l) = ds.labels.iter().find(|&&l| l > 255) {
        return Err(Error::LabelOutOfRange { label: l, classes: 256 });
    }
    let mut img = Vec::with_capacity(16 + n * h * w);
    for v in [IDX_IMAGE_MAGIC, n as u32, h as u32, w as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend(ds.images.data().iter().map(|&v| byte(v)));
    let mut lab = Vec::with_capacity(8 + n);
    lab.extend_from_slice(&IDX_LABEL_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(n as u32).to_be_bytes());
    lab.extend(ds.labels.iter().map(|&l| l as u8));
    Ok((img, lab))
}

pub fn write_idx(ds: &ImageDataset, images: &Path, labels: &Path) -> Result<()> {
    let (img, lab) = encode_idx(ds)?;
    fs::write(images, img).map_err(|e| Error::io(images, e))?;
    fs::write(labels, lab).map_err(|e| Error::io(labels, e))
}

fn cifar_layout(format: DatasetFormat) -> (usize, usize) {
    match format {
        DatasetFormat::Cifar100Binary => (2, 100),
        _ => (1, 10),
    }
}

/// Parse CIFAR binary records: label byte(s) then R, G and B planes.
pub fn parse_cifar(bytes: &[u8], format: DatasetFormat) -> Result<ImageDataset> {
    let (label_bytes, classes) = cifar_layout(format);
    let record = label_bytes + CIFAR_PIXELS;
    if bytes.is_empty() || !bytes.len().is_multiple_of(record) {
        return Err(Error::Format(format!(
            "cifar: {} bytes is not a whole number of {record}-byte records (truncated file?)",
            bytes.len()
        )));
    }
    let n = bytes.len() / record;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * CIFAR_PIXELS);
    for r in bytes.chunks_exact(record) {
        let label = usize::from(r[label_bytes - 1]);
        if label >= classes {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        labels.push(label);
        data.extend(r[label_bytes..].iter().map(|&b| pixel(b)));
    }
    ImageDataset::new(Tensor::new(vec![n, 3, CIFAR_SIDE, CIFAR_SIDE], data)?, labels, None)
}

/// Load and concatenate one or more CIFAR batch files.
pub fn load_cifar(paths: &[&Path], format: DatasetFormat) -> Result<ImageDataset> {
    let mut bytes = Vec::new();
    for p in paths {
        bytes.extend(read(p)?);
    }
    parse_cifar(&bytes, format)
}

pub fn encode_cifar(ds: &ImageDataset, format: DatasetFormat) -> Result<Vec<u8>> {
    let (label_bytes, classes) = cifar_layout(format);
    if ds.images.shape()[1..] != [3, CIFAR_SIDE, CIFAR_SIDE] {
        return Err(Error::Format(format!("cifar records are 3×32×32, got {:?}", &ds.images.shape()[1..])));
    }
    let mut out = Vec::with_capacity(ds.len() * (label_bytes + CIFAR_PIXELS));
    for (i, &l) in ds.labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::LabelOutOfRange { label: l, classes });
        }
        if label_bytes == 2 {
            out.push(0);
        }
        out.push(l as u8);
        out.extend(ds.images.row(i).iter().map(|&v| byte(v)));
    }
    Ok(out)
}

pub fn write_cifar(ds: &ImageDataset, path: &Path, format: DatasetFormat) -> Result<()> {
    let bytes = encode_cifar(ds, format)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Load a dataset. IDX needs the label file as `labels`; CIFAR ignores it.
pub fn load_dataset(path: &Path, labels: Option<&Path>, format: DatasetFormat) -> Result<ImageDataset> {
    match format {
        DatasetFormat::Idx => {
            let labels = labels.ok_or_else(|| Error::Config("idx format needs a label file".into()))?;
            load_idx(path, labels)
        }
        _ => load_cifar(&[path], format),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_bytes_ds(rng: &mut ChaCha8Rng, n: usize, c: usize, s: usize, classes: usize) -> ImageDataset {
        let px = (0..n * c * s * s).map(|_| pixel(rng.random())).collect();
        let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
        ImageDataset::new(Tensor::new(vec![n, c, s, s], px).unwrap(), labels, None).unwrap()
    }

    #[test]
    fn idx_magic_and_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ds = random_bytes_ds(&mut rng, 7, 1, 28, 10);
        let (img, lab) = encode_idx(&ds).unwrap();
        assert_eq!(&img[..4], &[0, 0, 8, 3]);
        let back = parse_idx(&img, &lab).unwrap();
        assert_eq!(back.images.data(), ds.images.data());
        assert_eq!(back.labels, ds.labels);

        let mut bad = img.clone();
        bad[3] = 4;
        assert!(matches!(parse_idx(&bad, &lab), Err(Error::Format(m)) if m.contains("magic")));
        assert!(matches!(parse_idx(&img[..img.len() - 1], &lab), Err(Error::Format(m)) if m.contains("truncated")));
    }

    #[test]
    fn cifar_records_and_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ds = random_bytes_ds(&mut rng, 10, 3, 32, 10);
        let bytes = encode_cifar(&ds, DatasetFormat::CifarBinary).unwrap();
        assert_eq!(bytes.len(), 10 * 3073);
        let back = parse_cifar(&bytes, DatasetFormat::CifarBinary).unwrap();
        assert_eq!(back.images.shape(), &[10, 3, 32, 32]);
        assert_eq!(back.images.data(), ds.images.data());
        assert_eq!(back.labels, ds.labels);

        let ds100 = random_bytes_ds(&mut rng, 4, 3, 32, 100);
        let b100 = encode_cifar(&ds100, DatasetFormat::Cifar100Binary).unwrap();
        assert_eq!(parse_cifar(&b100, DatasetFormat::Cifar100Binary).unwrap().labels, ds100.labels);

        assert!(parse_cifar(&bytes[..3000], DatasetFormat::CifarBinary).is_err());
        let mut bad = bytes.clone();
        bad[0] = 10;
        assert!(matches!(parse_cifar(&bad, DatasetFormat::CifarBinary), Err(Error::LabelOutOfRange { .. })));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ds = random_bytes_ds(&mut rng, 5, 1, 8, 3);
        let (i, l) = (dir.path().join("img"), dir.path().join("lab"));
        write_idx(&ds, &i, &l).unwrap();
        assert_eq!(load_dataset(&i, Some(&l), DatasetFormat::Idx).unwrap(), ds);
        let c = random_bytes_ds(&mut rng, 3, 3, 32, 10);
        let p = dir.path().join("c.bin");
        write_cifar(&c, &p, DatasetFormat::CifarBinary).unwrap();
        assert_eq!(load_dataset(&p, None, DatasetFormat::CifarBinary).unwrap(), c);
        assert!(matches!(
            load_dataset(&dir.path().join("nope"), None, DatasetFormat::CifarBinary),
            Err(Error::Io { .. })
        ));
    }
}
