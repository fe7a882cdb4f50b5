//! Flat `key = value` run configuration.
//!
//! Every tunable scalar has one dotted key. [`KEYS`] is the registry: it
//! fixes the rendering order (and therefore the hash) and carries a short
//! help line and a provenance tag for each key.

use std::fmt::Write as _;

use crate::dataio::{NoiseSpec, SyntheticSpec};
use crate::error::{Error, Result};
use crate::evalkit::Metric;
use crate::gpgr::Pooling;
use crate::modality::Modality;
use crate::objective::{Decay, TrainConfig, Variant};
use crate::ugmoe::ExpertInput;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    /// Value taken from the published method description.
    Published,
    /// Choice made for this implementation.
    Artifact,
}

impl Provenance {
    pub fn label(self) -> &'static str {
        match self {
            Provenance::Published => "published default",
            Provenance::Artifact => "artifact decision",
        }
    }
}

pub struct KeySpec {
    pub key: &'static str,
    pub provenance: Provenance,
    pub help: &'static str,
}

const fn key(key: &'static str, provenance: Provenance, help: &'static str) -> KeySpec {
    KeySpec {
        key,
        provenance,
        help,
    }
}

use Provenance::{Artifact, Published};

pub const KEYS: &[KeySpec] = &[
    key("model.D", Artifact, "token width D (data and model)"),
    key(
        "model.n",
        Published,
        "local tokens per modality n (data and model)",
    ),
    key(
        "data.identities",
        Artifact,
        "number of synthetic identities",
    ),
    key("data.instances", Artifact, "instances per identity"),
    key("data.signal_scale", Artifact, "identity signal scale"),
    key(
        "data.background_scale",
        Artifact,
        "shared per-patch background scale",
    ),
    key("data.patch_noise", Artifact, "baseline per-patch noise std"),
    key(
        "data.hetero_fraction",
        Artifact,
        "probability a patch gets 5x noise",
    ),
    key(
        "data.occlusion_prob",
        Artifact,
        "probability a modality is occluded",
    ),
    key(
        "data.occlusion_start",
        Artifact,
        "first occluded local patch",
    ),
    key(
        "data.occlusion_end",
        Artifact,
        "one past the last occluded local patch",
    ),
    key(
        "data.conflict_prob",
        Artifact,
        "probability a modality carries another identity",
    ),
    key(
        "data.nuisance_rank",
        Artifact,
        "rank of the per-instance nuisance subspace",
    ),
    key(
        "data.nuisance_scale",
        Artifact,
        "std of the per-instance nuisance offset",
    ),
    key(
        "data.split",
        Artifact,
        "held-out split: instance or identity",
    ),
    key(
        "data.test_fraction",
        Artifact,
        "fraction held out for query/gallery",
    ),
    key(
        "data.query_per_identity",
        Artifact,
        "query instances per held-out identity",
    ),
    key("data.seed", Artifact, "data stream seed"),
    key("train.variant", Artifact, "ablation variant a..e"),
    key("train.lr", Published, "Adam learning rate"),
    key("train.epochs", Published, "training epochs"),
    key("train.P", Artifact, "identities per batch"),
    key("train.K", Artifact, "instances per identity per batch"),
    key(
        "train.seed",
        Artifact,
        "init/sampler/reparameterization seed",
    ),
    key(
        "train.warmup_epochs",
        Artifact,
        "linear warmup epochs (0 = off)",
    ),
    key(
        "train.decay",
        Artifact,
        "learning-rate decay: constant|cosine",
    ),
    key("loss.lambda1", Published, "weight of the KL terms"),
    key("loss.lambda2", Published, "weight of the routing loss"),
    key("loss.lambda3", Published, "weight of the load-balance loss"),
    key("loss.margin", Artifact, "triplet margin"),
    key("gpgr.L", Published, "graph convolution layers"),
    key(
        "gpgr.tau",
        Artifact,
        "heat-kernel temperature or auto (median)",
    ),
    key("gpgr.knn", Artifact, "neighbours kept per node or none"),
    key("gpgr.pooling", Artifact, "local-token pooling: mean|max"),
    key(
        "gpgr.shared_fc",
        Artifact,
        "share node projections across modalities",
    ),
    key("ugmoe.C", Published, "experts per modality"),
    key(
        "ugmoe.k",
        Published,
        "experts donated to each other modality",
    ),
    key(
        "ugmoe.hidden",
        Artifact,
        "expert hidden width or auto (= D)",
    ),
    key(
        "ugmoe.expert_input",
        Artifact,
        "expert input: x-tilde|mu-tilde",
    ),
    key(
        "ugmoe.routing_sigma_scale",
        Artifact,
        "R,N,T multipliers on sigma in the routing loss",
    ),
    key("noise.kind", Artifact, "gaussian|arbitrary"),
    key("noise.intensity", Published, "noise intensity epsilon"),
    key("noise.target", Artifact, "test-only|train-and-test"),
    key("noise.seed", Artifact, "noise stream seed"),
    key(
        "noise.modalities",
        Artifact,
        "corrupted modalities, e.g. R,N,T",
    ),
    key(
        "sweep.eps",
        Published,
        "intensities for the robustness sweep",
    ),
    key("sweep.variants", Artifact, "variants for sweep/ablate"),
    key("sweep.seeds", Artifact, "training seeds for sweep/ablate"),
    key(
        "eval.metric",
        Artifact,
        "retrieval distance: euclidean|cosine",
    ),
];

/// Groups stored in a checkpoint's config snapshot.
pub const MODEL_GROUPS: &[&str] = &["model.", "train.", "loss.", "gpgr.", "ugmoe."];

#[derive(Clone, Debug, PartialEq)]
pub struct SweepConfig {
    pub eps: Vec<f64>,
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            eps: vec![0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0],
            variants: Variant::ALL.to_vec(),
            seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data: SyntheticSpec,
    pub train: TrainConfig,
    pub noise: NoiseSpec,
    pub sweep: SweepConfig,
    pub metric: Metric,
}

impl Default for RunConfig {
    fn default() -> Self {
        let data = SyntheticSpec::default();
        let train = TrainConfig {
            d: data.d,
            n: data.n,
            ..TrainConfig::default()
        };
        Self {
            data,
            train,
            noise: NoiseSpec::default(),
            sweep: SweepConfig::default(),
            metric: Metric::Euclidean,
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse `{v}`")))
}

fn list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| num(key, s))
        .collect()
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!(
            "{key}: expected true|false, got `{v}`"
        ))),
    }
}

impl RunConfig {
    pub fn is_known(key: &str) -> bool {
        KEYS.iter().any(|k| k.key == key)
    }

    pub fn get(&self, key: &str) -> Result<String> {
        let (d, t, nz, sw) = (&self.data, &self.train, &self.noise, &self.sweep);
        Ok(match key {
            "model.D" => d.d.to_string(),
            "model.n" => d.n.to_string(),
            "data.identities" => d.num_identities.to_string(),
            "data.instances" => d.instances_per_identity.to_string(),
            "data.signal_scale" => d.signal_scale.to_string(),
            "data.background_scale" => d.background_scale.to_string(),
            "data.patch_noise" => d.patch_noise.to_string(),
            "data.hetero_fraction" => d.hetero_fraction.to_string(),
            "data.occlusion_prob" => d.occlusion_prob.to_string(),
            "data.occlusion_start" => d.occlusion_block.0.to_string(),
            "data.occlusion_end" => d.occlusion_block.1.to_string(),
            "data.conflict_prob" => d.conflict_prob.to_string(),
            "data.nuisance_rank" => d.nuisance_rank.to_string(),
            "data.nuisance_scale" => d.nuisance_scale.to_string(),
            "data.split" => d.split_mode.to_string(),
            "data.test_fraction" => d.test_fraction.to_string(),
            "data.query_per_identity" => d.query_per_identity.to_string(),
            "data.seed" => d.seed.to_string(),
            "train.variant" => t.variant.to_string(),
            "train.lr" => t.lr.to_string(),
            "train.epochs" => t.epochs.to_string(),
            "train.P" => t.p.to_string(),
            "train.K" => t.k.to_string(),
            "train.seed" => t.seed.to_string(),
            "train.warmup_epochs" => t.warmup_epochs.to_string(),
            "train.decay" => match t.decay {
                Decay::Constant => "constant".into(),
                Decay::Cosine => "cosine".into(),
            },
            "loss.lambda1" => t.lambda1.to_string(),
            "loss.lambda2" => t.lambda2.to_string(),
            "loss.lambda3" => t.lambda3.to_string(),
            "loss.margin" => t.margin.to_string(),
            "gpgr.L" => t.layers.to_string(),
            "gpgr.tau" => t.tau.map_or("auto".into(), |v| v.to_string()),
            "gpgr.knn" => t.knn.map_or("none".into(), |v| v.to_string()),
            "gpgr.pooling" => match t.pooling {
                Pooling::Mean => "mean".into(),
                Pooling::Max => "max".into(),
            },
            "gpgr.shared_fc" => t.shared_fc.to_string(),
            "ugmoe.C" => t.experts.to_string(),
            "ugmoe.k" => t.top_k.to_string(),
            "ugmoe.hidden" => t.expert_hidden.map_or("auto".into(), |v| v.to_string()),
            "ugmoe.expert_input" => match t.expert_input {
                ExpertInput::XTilde => "x-tilde".into(),
                ExpertInput::MuTilde => "mu-tilde".into(),
            },
            "ugmoe.routing_sigma_scale" => join(&t.routing_sigma_scale),
            "noise.kind" => nz.kind.to_string(),
            "noise.intensity" => nz.intensity.to_string(),
            "noise.target" => nz.target.to_string(),
            "noise.seed" => nz.seed.to_string(),
            "noise.modalities" => Modality::ALL
                .iter()
                .filter(|m| nz.modalities[m.index()])
                .map(|m| m.tag())
                .collect::<Vec<_>>()
                .join(","),
            "sweep.eps" => join(&sw.eps),
            "sweep.variants" => join(&sw.variants),
            "sweep.seeds" => join(&sw.seeds),
            "eval.metric" => self.metric.to_string(),
            other => return Err(Error::UnknownKey(other.into())),
        })
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let (d, t, nz, sw) = (
            &mut self.data,
            &mut self.train,
            &mut self.noise,
            &mut self.sweep,
        );
        match key {
            "model.D" => {
                d.d = num(key, v)?;
                t.d = d.d;
            }
            "model.n" => {
                d.n = num(key, v)?;
                t.n = d.n;
            }
            "data.identities" => d.num_identities = num(key, v)?,
            "data.instances" => d.instances_per_identity = num(key, v)?,
            "data.signal_scale" => d.signal_scale = num(key, v)?,
            "data.background_scale" => d.background_scale = num(key, v)?,
            "data.patch_noise" => d.patch_noise = num(key, v)?,
            "data.hetero_fraction" => d.hetero_fraction = num(key, v)?,
            "data.occlusion_prob" => d.occlusion_prob = num(key, v)?,
            "data.occlusion_start" => d.occlusion_block.0 = num(key, v)?,
            "data.occlusion_end" => d.occlusion_block.1 = num(key, v)?,
            "data.conflict_prob" => d.conflict_prob = num(key, v)?,
            "data.nuisance_rank" => d.nuisance_rank = num(key, v)?,
            "data.nuisance_scale" => d.nuisance_scale = num(key, v)?,
            "data.split" => d.split_mode = v.parse()?,
            "data.test_fraction" => d.test_fraction = num(key, v)?,
            "data.query_per_identity" => d.query_per_identity = num(key, v)?,
            "data.seed" => d.seed = num(key, v)?,
            "train.variant" => t.variant = v.parse()?,
            "train.lr" => t.lr = num(key, v)?,
            "train.epochs" => t.epochs = num(key, v)?,
            "train.P" => t.p = num(key, v)?,
            "train.K" => t.k = num(key, v)?,
            "train.seed" => t.seed = num(key, v)?,
            "train.warmup_epochs" => t.warmup_epochs = num(key, v)?,
            "train.decay" => {
                t.decay = match v {
                    "constant" => Decay::Constant,
                    "cosine" => Decay::Cosine,
                    _ => return Err(Error::Config(format!("{key}: expected constant|cosine"))),
                }
            }
            "loss.lambda1" => t.lambda1 = num(key, v)?,
            "loss.lambda2" => t.lambda2 = num(key, v)?,
            "loss.lambda3" => t.lambda3 = num(key, v)?,
            "loss.margin" => t.margin = num(key, v)?,
            "gpgr.L" => t.layers = num(key, v)?,
            "gpgr.tau" => {
                t.tau = if v == "auto" {
                    None
                } else {
                    Some(num(key, v)?)
                }
            }
            "gpgr.knn" => {
                t.knn = if v == "none" {
                    None
                } else {
                    Some(num(key, v)?)
                }
            }
            "gpgr.pooling" => {
                t.pooling = match v {
                    "mean" => Pooling::Mean,
                    "max" => Pooling::Max,
                    _ => return Err(Error::Config(format!("{key}: expected mean|max"))),
                }
            }
            "gpgr.shared_fc" => t.shared_fc = boolean(key, v)?,
            "ugmoe.C" => t.experts = num(key, v)?,
            "ugmoe.k" => t.top_k = num(key, v)?,
            "ugmoe.hidden" => {
                t.expert_hidden = if v == "auto" {
                    None
                } else {
                    Some(num(key, v)?)
                }
            }
            "ugmoe.expert_input" => {
                t.expert_input = match v {
                    "x-tilde" => ExpertInput::XTilde,
                    "mu-tilde" => ExpertInput::MuTilde,
                    _ => return Err(Error::Config(format!("{key}: expected x-tilde|mu-tilde"))),
                }
            }
            "ugmoe.routing_sigma_scale" => {
                let xs: Vec<f64> = list(key, v)?;
                t.routing_sigma_scale = xs
                    .try_into()
                    .map_err(|_| Error::Config(format!("{key}: expected three values")))?;
            }
            "noise.kind" => nz.kind = v.parse()?,
            "noise.intensity" => nz.intensity = num(key, v)?,
            "noise.target" => nz.target = v.parse()?,
            "noise.seed" => nz.seed = num(key, v)?,
            "noise.modalities" => {
                let mut mask = [false; 3];
                for tag in v.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                    let m = Modality::ALL
                        .into_iter()
                        .find(|m| m.tag().eq_ignore_ascii_case(tag))
                        .ok_or_else(|| Error::Config(format!("{key}: unknown modality `{tag}`")))?;
                    mask[m.index()] = true;
                }
                nz.modalities = mask;
            }
            "sweep.eps" => sw.eps = list(key, v)?,
            "sweep.variants" => {
                sw.variants = v
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(str::parse)
                    .collect::<Result<_>>()?
            }
            "sweep.seeds" => sw.seeds = list(key, v)?,
            "eval.metric" => self.metric = v.parse()?,
            other => return Err(Error::UnknownKey(other.into())),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.train.validate()?;
        if self.noise.intensity < 0.0 {
            return Err(Error::Config("noise.intensity must be >= 0".into()));
        }
        if self.sweep.eps.iter().any(|e| !(*e >= 0.0)) {
            return Err(Error::Config("sweep.eps values must be >= 0".into()));
        }
        Ok(())
    }

    fn render_filtered(&self, keep: impl Fn(&str) -> bool) -> String {
        let mut out = String::new();
        for k in KEYS.iter().filter(|k| keep(k.key)) {
            let _ = writeln!(
                out,
                "{} = {}",
                k.key,
                self.get(k.key).expect("registered key")
            );
        }
        out
    }

    /// Canonical rendering of every key, in registry order.
    pub fn render(&self) -> String {
        self.render_filtered(|_| true)
    }

    /// Keys needed to rebuild the model and its training run.
    pub fn render_model(&self) -> String {
        self.render_filtered(|k| MODEL_GROUPS.iter().any(|g| k.starts_with(g)))
    }

    pub fn hash(&self) -> u64 {
        fnv1a64(self.render().as_bytes())
    }

    /// Help text listing every key with its default and provenance.
    pub fn help_table() -> String {
        let defaults = Self::default();
        let mut out =
            String::from("configuration keys (set in --config FILE or as --key value):\n");
        for k in KEYS {
            let _ = writeln!(
                out,
                "  {:<28} default {:<22} [{}] {}",
                k.key,
                defaults.get(k.key).expect("registered key"),
                k.provenance.label(),
                k.help
            );
        }
        out
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_key_round_trips() {
        let cfg = RunConfig::default();
        for k in KEYS {
            let v = cfg.get(k.key).unwrap();
            let mut other = RunConfig::default();
            other.set(k.key, &v).unwrap();
            assert_eq!(other, cfg, "{}", k.key);
        }
        assert_eq!(RunConfig::from_text(&cfg.render()).unwrap(), cfg);
    }

    #[test]
    fn unknown_key_named() {
        let err = RunConfig::from_text("gpgr.L = 2\nbogus.key = 1\n").unwrap_err();
        assert!(matches!(err, Error::UnknownKey(ref k) if k == "bogus.key"));
    }

    #[test]
    fn shared_dims_and_lists() {
        let cfg = RunConfig::from_text(
            "model.D = 8 # width\nsweep.variants = a,e\nnoise.modalities = R\nugmoe.routing_sigma_scale = 1,100,1",
        )
        .unwrap();
        assert_eq!((cfg.data.d, cfg.train.d), (8, 8));
        assert_eq!(cfg.sweep.variants, vec![Variant::A, Variant::E]);
        assert_eq!(cfg.noise.modalities, [true, false, false]);
        assert_eq!(cfg.train.routing_sigma_scale, [1.0, 100.0, 1.0]);
    }

    #[test]
    fn published_defaults() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.train.lambda1, 0.1);
        assert_eq!(cfg.train.lambda2, 1e-4);
        assert_eq!(cfg.train.lambda3, 1e-4);
        assert_eq!(cfg.train.lr, 0.00035);
        assert_eq!(cfg.train.epochs, 40);
        assert_eq!(cfg.train.layers, 2);
        assert_eq!((cfg.train.experts, cfg.train.top_k), (4, 1));
        assert_eq!(cfg.data.n, 128);
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.set("train.seed", "7").unwrap();
        assert_ne!(a.hash(), b.hash());
        assert_eq!(fnv1a64(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a64(b"a"), 0xaf63_dc4c_8601_ec8c);
    }
}
