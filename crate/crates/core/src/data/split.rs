//! Open-set split protocols.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ImageDataset;
use crate::error::{Error, Result};
use crate::metrics::openness;

/// Number of fixed class draws per protocol.
pub const TRIALS: usize = 5;

/// Known/unknown class counts of a split protocol.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Protocol {
    Mnist,
    Svhn,
    Cifar10,
    /// 4 known classes, 10 unknown classes drawn from a second dataset.
    CifarPlus10,
    CifarPlus50,
    TinyImageNet,
    /// `known` and `unknown` classes from one source, written `K+U`.
    Custom {
        known: usize,
        unknown: usize,
    },
}

impl Protocol {
    pub const TABLE: [Protocol; 6] = [
        Protocol::Mnist,
        Protocol::Svhn,
        Protocol::Cifar10,
        Protocol::CifarPlus10,
        Protocol::CifarPlus50,
        Protocol::TinyImageNet,
    ];

    pub fn known(self) -> usize {
        match self {
            Protocol::Mnist | Protocol::Svhn | Protocol::Cifar10 => 6,
            Protocol::CifarPlus10 | Protocol::CifarPlus50 => 4,
            Protocol::TinyImageNet => 20,
            Protocol::Custom { known, .. } => known,
        }
    }

    pub fn unknown(self) -> usize {
        match self {
            Protocol::Mnist | Protocol::Svhn | Protocol::Cifar10 => 4,
            Protocol::CifarPlus10 => 10,
            Protocol::CifarPlus50 => 50,
            Protocol::TinyImageNet => 180,
            Protocol::Custom { unknown, .. } => unknown,
        }
    }

    /// Whether unknown classes come from a second dataset.
    pub fn cross_source(self) -> bool {
        matches!(self, Protocol::CifarPlus10 | Protocol::CifarPlus50)
    }

    pub fn openness(self) -> f64 {
        openness(self.known(), self.unknown())
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Protocol::Mnist => f.write_str("mnist"),
            Protocol::Svhn => f.write_str("svhn"),
            Protocol::Cifar10 => f.write_str("cifar10"),
            Protocol::CifarPlus10 => f.write_str("cifar+10"),
            Protocol::CifarPlus50 => f.write_str("cifar+50"),
            Protocol::TinyImageNet => f.write_str("tiny-imagenet"),
            Protocol::Custom { known, unknown } => write!(f, "{known}+{unknown}"),
        }
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "mnist" => Protocol::Mnist,
            "svhn" => Protocol::Svhn,
            "cifar10" => Protocol::Cifar10,
            "cifar+10" => Protocol::CifarPlus10,
            "cifar+50" => Protocol::CifarPlus50,
            "tiny-imagenet" | "tinyimagenet" => Protocol::TinyImageNet,
            other => {
                let parsed =
                    other.split_once('+').and_then(|(k, u)| Some((k.trim().parse().ok()?, u.trim().parse().ok()?)));
                match parsed {
                    Some((known, unknown)) if known >= 1 => Protocol::Custom { known, unknown },
                    _ => return Err(Error::Config(format!("unknown protocol {other:?}"))),
                }
            }
        })
    }
}

impl TryFrom<String> for Protocol {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Protocol> for String {
    fn from(p: Protocol) -> String {
        p.to_string()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitProtocol {
    pub protocol: Protocol,
    pub trial: usize,
}

/// A dataset's native train/test partition.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceData {
    pub train: ImageDataset,
    pub test: ImageDataset,
}

/// Class lists of one generated split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub protocol: Protocol,
    pub trial: usize,
    pub seed: u64,
    pub known_classes: Vec<usize>,
    pub unknown_classes: Vec<usize>,
    /// Openness in percent.
    pub openness: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    /// Known classes relabeled to `0..k`.
    pub train_known: ImageDataset,
    pub test_known: ImageDataset,
    /// Unknown classes relabeled to `0..u`.
    pub test_unknown: ImageDataset,
    pub manifest: SplitManifest,
}

fn draw(classes: usize, seed: u64, trial: usize, stream: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream * TRIALS as u64 + trial as u64);
    let mut ids: Vec<usize> = (0..classes).collect();
    ids.shuffle(&mut rng);
    ids
}

/// Class ids in draw order: the first `known()` are known, the next
/// `unknown()` are unknown. Matches the draw of [`make_split`].
pub fn class_order(classes: usize, split: SplitProtocol, seed: u64) -> Vec<usize> {
    draw(classes, seed, split.trial, 0)
}

/// Draw known and unknown classes for `split.trial` and partition the data.
/// Cross-source protocols take unknown classes from `unknown_source`.
pub fn make_split(
    source: &SourceData,
    unknown_source: Option<&SourceData>,
    split: SplitProtocol,
    seed: u64,
) -> Result<Split> {
    let p = split.protocol;
    if split.trial >= TRIALS {
        return Err(Error::Config(format!("trial {} outside 0..{TRIALS}", split.trial)));
    }
    let classes = source.train.class_count().max(source.test.class_count());
    let order = class_order(classes, split, seed);
    let (known, unknown, unknown_test) = if p.cross_source() {
        let other = unknown_source
            .ok_or_else(|| Error::Config(format!("protocol {p} needs a second dataset for unknown classes")))?;
        let oc = other.test.class_count();
        if p.known() > classes || p.unknown() > oc {
            return Err(Error::Config(format!(
                "protocol {p} needs {} + {} classes, sources have {classes} and {oc}",
                p.known(),
                p.unknown()
            )));
        }
        let other_order = draw(oc, seed, split.trial, 1);
        (order[..p.known()].to_vec(), other_order[..p.unknown()].to_vec(), &other.test)
    } else {
        if p.known() + p.unknown() > classes {
            return Err(Error::Config(format!(
                "protocol {p} needs {} classes, source has {classes}",
                p.known() + p.unknown()
            )));
        }
        (order[..p.known()].to_vec(), order[p.known()..p.known() + p.unknown()].to_vec(), &source.test)
    };
    let mut known_sorted = known.clone();
    known_sorted.sort_unstable();
    let mut unknown_sorted = unknown.clone();
    unknown_sorted.sort_unstable();
    Ok(Split {
        train_known: source.train.restrict(&known_sorted)?,
        test_known: source.test.restrict(&known_sorted)?,
        test_unknown: unknown_test.restrict(&unknown_sorted)?,
        manifest: SplitManifest {
            protocol: p,
            trial: split.trial,
            seed,
            known_classes: known_sorted,
            unknown_classes: unknown_sorted,
            openness: p.openness(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    /// One 2×2 image per (class, copy); pixel value encodes the class.
    fn toy(classes: usize, per: usize, offset: f32) -> ImageDataset {
        let n = classes * per;
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for c in 0..classes {
            for k in 0..per {
                data.extend([c as f32 / 255.0, offset, k as f32 / 255.0, 0.0]);
                labels.push(c);
            }
        }
        ImageDataset::new(Tensor::new(vec![n, 1, 2, 2], data).unwrap(), labels, None).unwrap()
    }

    fn source(classes: usize) -> SourceData {
        SourceData { train: toy(classes, 3, 0.0), test: toy(classes, 2, 1.0) }
    }

    #[test]
    fn table_openness() {
        let want = [22.54, 22.54, 22.54, 46.55, 72.78, 68.37];
        for (p, w) in Protocol::TABLE.iter().zip(want) {
            assert!((p.openness() - w).abs() <= 0.01, "{p}");
        }
    }

    #[test]
    fn cifar10_shape_and_disjointness() {
        let src = source(10);
        let s = make_split(&src, None, SplitProtocol { protocol: Protocol::Cifar10, trial: 2 }, 9).unwrap();
        assert_eq!((s.manifest.known_classes.len(), s.manifest.unknown_classes.len()), (6, 4));
        assert!(s.manifest.known_classes.iter().all(|c| !s.manifest.unknown_classes.contains(c)));
        assert_eq!(s.train_known.class_count(), 6);
        assert_eq!(s.train_known.len(), 18);
        assert_eq!(s.test_known.len(), 12);
        assert_eq!(s.test_unknown.len(), 8);
        // Train pixels carry offset 0, test pixels offset 1: no overlap.
        assert!(s.train_known.images.data().chunks(4).all(|c| c[1] == 0.0));
        assert!(s.test_known.images.data().chunks(4).all(|c| c[1] == 1.0));
        let again = make_split(&src, None, SplitProtocol { protocol: Protocol::Cifar10, trial: 2 }, 9).unwrap();
        assert_eq!(s, again);
        let other = make_split(&src, None, SplitProtocol { protocol: Protocol::Cifar10, trial: 3 }, 9).unwrap();
        assert_ne!(s.manifest.known_classes, other.manifest.known_classes);
    }

    #[test]
    fn cross_source_protocol() {
        let (a, b) = (source(10), source(100));
        let s = make_split(&a, Some(&b), SplitProtocol { protocol: Protocol::CifarPlus50, trial: 0 }, 1).unwrap();
        assert_eq!(s.manifest.known_classes.len(), 4);
        assert_eq!(s.manifest.unknown_classes.len(), 50);
        assert_eq!(s.test_unknown.len(), 100);
        assert!((s.manifest.openness - 72.78).abs() < 0.01);
        assert!(make_split(&a, None, SplitProtocol { protocol: Protocol::CifarPlus10, trial: 0 }, 1).is_err());
    }

    #[test]
    fn infeasible_and_parsing() {
        let src = source(5);
        assert!(make_split(&src, None, SplitProtocol { protocol: Protocol::Cifar10, trial: 0 }, 1).is_err());
        assert!(make_split(
            &src,
            None,
            SplitProtocol { protocol: Protocol::Custom { known: 2, unknown: 1 }, trial: 5 },
            1
        )
        .is_err());
        assert_eq!("2+1".parse::<Protocol>().unwrap(), Protocol::Custom { known: 2, unknown: 1 });
        assert_eq!("cifar+50".parse::<Protocol>().unwrap(), Protocol::CifarPlus50);
        assert!("bogus".parse::<Protocol>().is_err());
    }
}
