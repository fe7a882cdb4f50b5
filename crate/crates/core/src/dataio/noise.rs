//! Test-time corruption of token features.
//!
//! Gaussian noise at intensity `eps` adds `(eps / 255) * s_d * z` where `s_d`
//! is the per-dimension standard deviation of the clean train split and `z`
//! is standard normal. `z` depends only on the seed and sample, so sweeping
//! `eps` rescales one fixed draw.
//!
//! "Arbitrary" noise is a stand-in mixture: each sample picks uniformly one
//! of Gaussian noise, zeroing 5% of its local patches, or flipping the sign
//! of 1% of its entries.

use std::fmt;
use std::str::FromStr;

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::modality::{Modality, NUM_MODALITIES};
use crate::numerics::{seeded_rng, stream_id, StreamKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseKind {
    Gaussian,
    Arbitrary,
}

impl fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NoiseKind::Gaussian => "gaussian",
            NoiseKind::Arbitrary => "arbitrary",
        })
    }
}

impl FromStr for NoiseKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(NoiseKind::Gaussian),
            "arbitrary" => Ok(NoiseKind::Arbitrary),
            other => Err(Error::Config(format!("unknown noise kind `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseTarget {
    TrainAndTest,
    TestOnly,
}

impl fmt::Display for NoiseTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NoiseTarget::TrainAndTest => "train-and-test",
            NoiseTarget::TestOnly => "test-only",
        })
    }
}

impl FromStr for NoiseTarget {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train-and-test" => Ok(NoiseTarget::TrainAndTest),
            "test-only" => Ok(NoiseTarget::TestOnly),
            other => Err(Error::Config(format!("unknown noise target `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub intensity: f64,
    pub target: NoiseTarget,
    pub seed: u64,
    /// Which modalities (R, N, T) are corrupted.
    pub modalities: [bool; NUM_MODALITIES],
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            kind: NoiseKind::Gaussian,
            intensity: 0.0,
            target: NoiseTarget::TestOnly,
            seed: 0,
            modalities: [true; NUM_MODALITIES],
        }
    }
}

pub const PATCH_ZERO_FRACTION: f64 = 0.05;
pub const SIGN_FLIP_FRACTION: f64 = 0.01;

/// Per-modality, per-dimension standard deviation of all tokens in the
/// train split (all samples if the dataset has no train split).
pub fn feature_std(ds: &Dataset) -> [Vec<f64>; NUM_MODALITIES] {
    let has_train = ds.split(Split::Train).next().is_some();
    let pick = |s: &&super::Sample| !has_train || s.split == Split::Train;
    Modality::ALL.map(|m| {
        let mi = m.index();
        let mut count = 0usize;
        let mut mean = vec![0.0; ds.d];
        let mut m2 = vec![0.0; ds.d];
        for s in ds.samples.iter().filter(pick) {
            for r in 0..s.tokens[mi].rows() {
                count += 1;
                for (j, &x) in s.tokens[mi].row(r).iter().enumerate() {
                    let delta = x - mean[j];
                    mean[j] += delta / count as f64;
                    m2[j] += delta * (x - mean[j]);
                }
            }
        }
        if count < 2 {
            return vec![1.0; ds.d];
        }
        m2.iter().map(|v| (v / (count - 1) as f64).sqrt()).collect()
    })
}

/// Returns a corrupted copy of `ds`, scaling Gaussian noise by the clean
/// train-split feature spread of `ds` itself.
pub fn inject_noise(ds: &Dataset, noise: &NoiseSpec) -> Result<Dataset> {
    let scale = feature_std(ds);
    inject_noise_scaled(ds, noise, &scale)
}

/// As [`inject_noise`] with an explicit per-dimension scale.
pub fn inject_noise_scaled(
    ds: &Dataset,
    noise: &NoiseSpec,
    scale: &[Vec<f64>; NUM_MODALITIES],
) -> Result<Dataset> {
    if !(noise.intensity >= 0.0) || !noise.intensity.is_finite() {
        return Err(Error::Config(format!(
            "noise intensity must be finite and >= 0, got {}",
            noise.intensity
        )));
    }
    if scale.iter().any(|s| s.len() != ds.d) {
        return Err(Error::Shape("noise scale length differs from D".into()));
    }
    let mut out = ds.clone();
    if noise.intensity == 0.0 {
        return Ok(out);
    }
    let amp = noise.intensity / 255.0;
    for s in &mut out.samples {
        if noise.target == NoiseTarget::TestOnly && s.split == Split::Train {
            continue;
        }
        let mode = match noise.kind {
            NoiseKind::Gaussian => 0,
            NoiseKind::Arbitrary => {
                seeded_rng(noise.seed, stream_id(StreamKind::Noise, &[1, s.id])).below(3)
            }
        };
        for m in Modality::ALL {
            if !noise.modalities[m.index()] {
                continue;
            }
            let tokens = &mut s.tokens[m.index()];
            let mut rng = seeded_rng(
                noise.seed,
                stream_id(StreamKind::Noise, &[0, s.id, m as u64]),
            );
            match mode {
                0 => {
                    let sd = &scale[m.index()];
                    for r in 0..tokens.rows() {
                        for (v, &sj) in tokens.row_mut(r).iter_mut().zip(sd) {
                            *v += amp * sj * rng.normal();
                        }
                    }
                }
                1 => {
                    let n = tokens.rows() - 1;
                    let count =
                        ((PATCH_ZERO_FRACTION * n as f64).round() as usize).clamp(1, n.max(1));
                    let mut idx: Vec<usize> = (0..n).collect();
                    rng.shuffle(&mut idx);
                    for &p in idx.iter().take(count.min(n)) {
                        tokens.row_mut(p + 1).iter_mut().for_each(|v| *v = 0.0);
                    }
                }
                _ => {
                    for v in tokens.data_mut() {
                        if rng.uniform() < SIGN_FLIP_FRACTION {
                            *v = -*v;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}
