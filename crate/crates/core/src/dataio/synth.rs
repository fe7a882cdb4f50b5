//! Synthetic multi-modal identity data.
//!
//! For identity `i` and modality `m` a prototype vector and a per-patch
//! signature are drawn once. A clean local token at patch `p` is
//! `background[m][p] + scale * (proto[i][m] + signature[i][m][p]) / sqrt(2)`;
//! the class token is the mean of the clean local tokens. Each instance then
//! adds Gaussian noise (five times larger on heteroscedastic patches), may
//! have a block of local tokens zeroed, and may carry another identity's
//! signal in one modality.

use std::fmt;
use std::str::FromStr;

use super::{Dataset, Sample, Split};
use crate::error::{Error, Result};
use crate::modality::{Modality, NUM_MODALITIES};
use crate::numerics::{orthogonal, seeded_rng, standard_normal, stream_id, Matrix, StreamKind};

/// How held-out samples are chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitMode {
    /// Every identity contributes train, query and gallery instances.
    Instance,
    /// Train and test identities are disjoint.
    Identity,
}

impl fmt::Display for SplitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitMode::Instance => "instance",
            SplitMode::Identity => "identity",
        })
    }
}

impl FromStr for SplitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "instance" => Ok(SplitMode::Instance),
            "identity" => Ok(SplitMode::Identity),
            _ => Err(Error::Config(format!(
                "unknown split mode {s:?} (expected instance or identity)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub num_identities: usize,
    pub instances_per_identity: usize,
    pub d: usize,
    pub n: usize,
    pub signal_scale: f64,
    pub background_scale: f64,
    pub patch_noise: f64,
    /// Probability that a local patch gets five times the noise.
    pub hetero_fraction: f64,
    pub occlusion_prob: f64,
    /// Local patch range `[start, end)` zeroed by an occlusion, clipped to `n`.
    pub occlusion_block: (usize, usize),
    pub conflict_prob: f64,
    /// Rank of the per-modality nuisance subspace.
    pub nuisance_rank: usize,
    /// Std of the per-instance nuisance offset added to every token.
    pub nuisance_scale: f64,
    pub split_mode: SplitMode,
    /// Fraction of identities (identity mode) or of each identity's
    /// instances (instance mode) held out for query/gallery.
    pub test_fraction: f64,
    /// Query instances per held-out identity; the rest form the gallery.
    pub query_per_identity: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_identities: 20,
            instances_per_identity: 10,
            d: 64,
            n: 128,
            signal_scale: 1.0,
            background_scale: 1.0,
            patch_noise: 1.25,
            hetero_fraction: 0.1,
            occlusion_prob: 0.1,
            occlusion_block: (0, 4),
            conflict_prob: 0.05,
            nuisance_rank: 0,
            nuisance_scale: 0.0,
            split_mode: SplitMode::Instance,
            test_fraction: 0.5,
            query_per_identity: 2,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("data.hetero_fraction", self.hetero_fraction),
            ("data.occlusion_prob", self.occlusion_prob),
            ("data.conflict_prob", self.conflict_prob),
            ("data.test_fraction", self.test_fraction),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must be in [0, 1], got {p}")));
            }
        }
        if self.num_identities == 0
            || self.instances_per_identity == 0
            || self.d == 0
            || self.n == 0
        {
            return Err(Error::Config("dataset counts must be >= 1".into()));
        }
        if self.occlusion_block.0 > self.occlusion_block.1 {
            return Err(Error::Config(format!(
                "occlusion block {:?} is reversed",
                self.occlusion_block
            )));
        }
        if self.nuisance_rank > self.d {
            return Err(Error::Config(format!(
                "data.nuisance_rank {} exceeds D = {}",
                self.nuisance_rank, self.d
            )));
        }
        if self.patch_noise < 0.0
            || self.signal_scale < 0.0
            || self.background_scale < 0.0
            || self.nuisance_scale < 0.0
        {
            return Err(Error::Config("scales must be >= 0".into()));
        }
        Ok(())
    }

    pub fn num_train_identities(&self) -> usize {
        match self.split_mode {
            SplitMode::Instance => self.num_identities,
            SplitMode::Identity => {
                let test = (self.num_identities as f64 * self.test_fraction).round() as usize;
                self.num_identities - test.min(self.num_identities)
            }
        }
    }

    fn split_of(&self, id: usize, inst: usize) -> Split {
        let (held_out, first_test) = match self.split_mode {
            SplitMode::Identity => (id >= self.num_train_identities(), 0),
            SplitMode::Instance => {
                let per = self.instances_per_identity;
                let test = ((per as f64 * self.test_fraction).round() as usize).min(per);
                (inst >= per - test, per - test)
            }
        };
        if !held_out {
            Split::Train
        } else if inst - first_test < self.query_per_identity {
            Split::Query
        } else {
            Split::Gallery
        }
    }
}

struct IdentityBank {
    background: [Matrix; NUM_MODALITIES],
    /// `rank x D` orthonormal nuisance directions per modality.
    nuisance: [Matrix; NUM_MODALITIES],
    /// `signal[id][m]`: `n x D` identity part of the clean local tokens.
    signal: Vec<[Matrix; NUM_MODALITIES]>,
}

fn identity_bank(spec: &SyntheticSpec) -> IdentityBank {
    let (n, d) = (spec.n, spec.d);
    let background = Modality::ALL.map(|m| {
        let mut rng = seeded_rng(spec.seed, stream_id(StreamKind::Data, &[0, m as u64]));
        standard_normal(n, d, &mut rng).scale(spec.background_scale)
    });
    let nuisance = Modality::ALL.map(|m| {
        let mut rng = seeded_rng(spec.seed, stream_id(StreamKind::Data, &[3, m as u64]));
        orthogonal(spec.nuisance_rank, d, 1.0, &mut rng)
    });
    let k = spec.signal_scale / 2f64.sqrt();
    let signal = (0..spec.num_identities)
        .map(|id| {
            Modality::ALL.map(|m| {
                let mut rng = seeded_rng(
                    spec.seed,
                    stream_id(StreamKind::Data, &[1, id as u64, m as u64]),
                );
                let proto = standard_normal(1, d, &mut rng);
                let mut sig = standard_normal(n, d, &mut rng);
                for p in 0..n {
                    for (v, pv) in sig.row_mut(p).iter_mut().zip(proto.data()) {
                        *v = k * (*v + pv);
                    }
                }
                sig
            })
        })
        .collect();
    IdentityBank {
        background,
        nuisance,
        signal,
    }
}

pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let bank = identity_bank(spec);
    let (n, d) = (spec.n, spec.d);
    let mut samples = Vec::with_capacity(spec.num_identities * spec.instances_per_identity);
    for id in 0..spec.num_identities {
        for inst in 0..spec.instances_per_identity {
            let sample_id = (id * spec.instances_per_identity + inst) as u64;
            let split = spec.split_of(id, inst);
            let tokens = Modality::ALL.map(|m| {
                let mut rng = seeded_rng(
                    spec.seed,
                    stream_id(StreamKind::Data, &[2, sample_id, m as u64]),
                );
                let mut source = id;
                if spec.conflict_prob > 0.0
                    && spec.num_identities > 1
                    && rng.uniform() < spec.conflict_prob
                {
                    let other = rng.below(spec.num_identities - 1);
                    source = if other >= id { other + 1 } else { other };
                }
                let mut clean = bank.background[m.index()].clone();
                clean.add_assign(&bank.signal[source][m.index()]);
                let mut tokens = Matrix::zeros(n + 1, d);
                let mut class = vec![0.0; d];
                for p in 0..n {
                    for (c, v) in class.iter_mut().zip(clean.row(p)) {
                        *c += v / n as f64;
                    }
                }
                for (c, t) in class.iter().zip(tokens.row_mut(0)) {
                    *t = c + spec.patch_noise * rng.normal();
                }
                for p in 0..n {
                    let hetero = spec.hetero_fraction > 0.0 && rng.uniform() < spec.hetero_fraction;
                    let std = spec.patch_noise * if hetero { 5.0 } else { 1.0 };
                    let row = tokens.row_mut(p + 1);
                    for (t, c) in row.iter_mut().zip(clean.row(p)) {
                        *t = c + std * rng.normal();
                    }
                }
                if spec.nuisance_scale > 0.0 && spec.nuisance_rank > 0 {
                    let basis = &bank.nuisance[m.index()];
                    let mut offset = vec![0.0; d];
                    for r in 0..spec.nuisance_rank {
                        let a = spec.nuisance_scale * rng.normal();
                        for (o, b) in offset.iter_mut().zip(basis.row(r)) {
                            *o += a * b;
                        }
                    }
                    for p in 0..=n {
                        for (t, o) in tokens.row_mut(p).iter_mut().zip(&offset) {
                            *t += o;
                        }
                    }
                }
                if spec.occlusion_prob > 0.0 && rng.uniform() < spec.occlusion_prob {
                    let (a, b) = spec.occlusion_block;
                    for p in a.min(n)..b.min(n) {
                        tokens.row_mut(p + 1).iter_mut().for_each(|v| *v = 0.0);
                    }
                }
                tokens
            });
            samples.push(Sample {
                id: sample_id,
                label: id,
                split,
                tokens,
            });
        }
    }
    Dataset::new(n, d, samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet() -> SyntheticSpec {
        SyntheticSpec {
            num_identities: 4,
            instances_per_identity: 3,
            d: 6,
            n: 5,
            patch_noise: 0.0,
            hetero_fraction: 0.0,
            occlusion_prob: 0.0,
            conflict_prob: 0.0,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn noiseless_instances_match() {
        let ds = generate(&quiet()).unwrap();
        let a = &ds.samples[0];
        let b = &ds.samples[1];
        assert_eq!(a.label, b.label);
        for m in 0..3 {
            assert_eq!(a.tokens[m], b.tokens[m]);
        }
        assert_ne!(ds.samples[0].tokens[0], ds.samples[3].tokens[0]);
    }

    #[test]
    fn full_occlusion_zeroes_locals_only() {
        let spec = SyntheticSpec {
            occlusion_prob: 1.0,
            occlusion_block: (0, 5),
            ..quiet()
        };
        let ds = generate(&spec).unwrap();
        let clean = generate(&quiet()).unwrap();
        for (s, c) in ds.samples.iter().zip(&clean.samples) {
            for m in 0..3 {
                assert!(s.tokens[m]
                    .slice_rows(1, 6)
                    .data()
                    .iter()
                    .all(|&v| v == 0.0));
                assert_eq!(s.tokens[m].row(0), c.tokens[m].row(0));
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SyntheticSpec {
            n: 16,
            ..SyntheticSpec::default()
        };
        assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
        let other = SyntheticSpec { seed: 1, ..spec };
        assert_ne!(generate(&spec).unwrap(), generate(&other).unwrap());
    }

    #[test]
    fn splits_are_identity_disjoint() {
        let ds = generate(&SyntheticSpec {
            n: 4,
            split_mode: SplitMode::Identity,
            query_per_identity: 3,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let train: std::collections::BTreeSet<_> =
            ds.split(Split::Train).map(|s| s.label).collect();
        let query: std::collections::BTreeSet<_> =
            ds.split(Split::Query).map(|s| s.label).collect();
        assert_eq!(train.len(), 10);
        assert_eq!(query.len(), 10);
        assert!(train.is_disjoint(&query));
        assert_eq!(ds.split(Split::Query).count(), 30);
        assert_eq!(ds.split(Split::Gallery).count(), 70);
    }

    #[test]
    fn instance_split_shares_identities() {
        let ds = generate(&SyntheticSpec {
            n: 4,
            ..SyntheticSpec::default()
        })
        .unwrap();
        assert_eq!(ds.split(Split::Train).count(), 100);
        assert_eq!(ds.split(Split::Query).count(), 40);
        assert_eq!(ds.split(Split::Gallery).count(), 60);
        for id in 0..20 {
            let splits: Vec<_> = ds
                .samples
                .iter()
                .filter(|s| s.label == id)
                .map(|s| s.split)
                .collect();
            assert_eq!(&splits[..5], &[Split::Train; 5]);
            assert_eq!(&splits[5..7], &[Split::Query; 2]);
            assert_eq!(&splits[7..], &[Split::Gallery; 3]);
        }
        assert_eq!(
            "identity".parse::<SplitMode>().unwrap(),
            SplitMode::Identity
        );
        assert!("open".parse::<SplitMode>().is_err());
    }

    #[test]
    fn rejects_bad_probability() {
        let spec = SyntheticSpec {
            conflict_prob: 1.5,
            ..SyntheticSpec::default()
        };
        assert!(matches!(generate(&spec), Err(Error::Config(_))));
    }
}
