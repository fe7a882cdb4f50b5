//! Multi-modal identity datasets: synthesis, noise injection and the
//! on-disk feature format.

pub mod codec;
pub mod noise;
pub mod synth;

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::gpgr::PatchFeatureSet;
use crate::modality::{Modality, NUM_MODALITIES};
use crate::numerics::Matrix;

pub use codec::{read_features, write_features, write_manifest};
pub use noise::{feature_std, inject_noise, NoiseKind, NoiseSpec, NoiseTarget};
pub use synth::{generate, SplitMode, SyntheticSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl Split {
    pub fn code(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Query => 1,
            Split::Gallery => 2,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Split::Train),
            1 => Some(Split::Query),
            2 => Some(Split::Gallery),
            _ => None,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Gallery => "gallery",
        })
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "query" => Ok(Split::Query),
            "gallery" => Ok(Split::Gallery),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub label: usize,
    pub split: Split,
    /// Token matrices in R, N, T order, each `(n + 1) x D`.
    pub tokens: [Matrix; NUM_MODALITIES],
}

impl Sample {
    pub fn features(&self, m: Modality) -> PatchFeatureSet {
        PatchFeatureSet {
            modality: m,
            tokens: self.tokens[m.index()].clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub n: usize,
    pub d: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(n: usize, d: usize, samples: Vec<Sample>) -> Result<Self> {
        let ds = Self { n, d, samples };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        for s in &self.samples {
            for (m, t) in Modality::ALL.iter().zip(&s.tokens) {
                if t.shape() != (self.n + 1, self.d) {
                    return Err(Error::Shape(format!(
                        "sample {} modality {m}: tokens {:?}, expected {:?}",
                        s.id,
                        t.shape(),
                        (self.n + 1, self.d)
                    )));
                }
            }
        }
        let labels: std::collections::BTreeSet<usize> =
            self.samples.iter().map(|s| s.label).collect();
        if let Some(&max) = labels.iter().next_back() {
            if labels.len() != max + 1 {
                return Err(Error::Shape(
                    "identity labels are not contiguous from 0".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    /// Train identities remapped to `0..count` in order of first appearance.
    pub fn train_label_map(&self) -> std::collections::BTreeMap<usize, usize> {
        let mut map = std::collections::BTreeMap::new();
        for s in self.split(Split::Train) {
            let next = map.len();
            map.entry(s.label).or_insert(next);
        }
        map
    }
}
