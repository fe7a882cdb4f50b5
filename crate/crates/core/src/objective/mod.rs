//! Training objective, model variants, optimizer loop and checkpoints.

pub mod certify;
pub mod checkpoint;
pub mod losses;
pub mod model;
pub mod train;

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::gpgr::{GpgrConfig, Pooling};
use crate::modality::NUM_MODALITIES;
use crate::ugmoe::{ExpertInput, UgmoeConfig};

pub use checkpoint::Checkpoint;
pub use losses::{batch_hard_triplet, cross_entropy_id, total_loss, LossBreakdown, LossWeights};
pub use model::Model;
pub use train::{fit, resume, Adam};

/// Ablation rows, from the plain backbone head (`A`) to the full model (`E`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    /// Class-token linear head, no experts, no patch graph.
    A,
    /// Adds the softmax top-k mixture of experts and its balance loss.
    B,
    /// Adds the sample Gaussian, its KL and the routing loss.
    C,
    /// Adds the patch graph with point (non-Gaussian) nodes.
    D,
    /// Full model.
    E,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::A, Variant::B, Variant::C, Variant::D, Variant::E];

    pub fn has_moe(self) -> bool {
        self >= Variant::B
    }
    pub fn has_moe_uncertainty(self) -> bool {
        self >= Variant::C
    }
    pub fn has_graph(self) -> bool {
        self >= Variant::D
    }
    pub fn has_graph_uncertainty(self) -> bool {
        self == Variant::E
    }
    pub fn tag(self) -> &'static str {
        match self {
            Variant::A => "a",
            Variant::B => "b",
            Variant::C => "c",
            Variant::D => "d",
            Variant::E => "e",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.tag().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}` (expected a..e)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decay {
    Constant,
    Cosine,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub variant: Variant,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lr: f64,
    pub epochs: usize,
    /// Identities per batch.
    pub p: usize,
    /// Instances per identity in a batch.
    pub k: usize,
    pub margin: f64,
    pub seed: u64,
    pub warmup_epochs: usize,
    pub decay: Decay,
    pub d: usize,
    pub n: usize,
    pub layers: usize,
    pub tau: Option<f64>,
    pub knn: Option<usize>,
    pub pooling: Pooling,
    pub shared_fc: bool,
    /// Experts per modality.
    pub experts: usize,
    /// Experts donated to each other modality.
    pub top_k: usize,
    /// Expert hidden width; `None` means `d`.
    pub expert_hidden: Option<usize>,
    pub expert_input: ExpertInput,
    pub routing_sigma_scale: [f64; NUM_MODALITIES],
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::E,
            lambda1: 0.1,
            lambda2: 1e-4,
            lambda3: 1e-4,
            lr: 3.5e-4,
            epochs: 40,
            p: 4,
            k: 4,
            margin: 0.3,
            seed: 0,
            warmup_epochs: 0,
            decay: Decay::Constant,
            d: 64,
            n: 128,
            layers: 2,
            tau: None,
            knn: None,
            pooling: Pooling::Mean,
            shared_fc: true,
            experts: 4,
            top_k: 1,
            expert_hidden: None,
            expert_input: ExpertInput::XTilde,
            routing_sigma_scale: [1.0; NUM_MODALITIES],
        }
    }
}

impl TrainConfig {
    pub fn batch_size(&self) -> usize {
        self.p * self.k
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            lambda3: self.lambda3,
        }
    }

    pub fn gpgr(&self) -> GpgrConfig {
        GpgrConfig {
            d: self.d,
            layers: self.layers,
            tau: self.tau,
            knn: self.knn,
            pooling: self.pooling,
            shared_fc: self.shared_fc,
            uncertainty: self.variant.has_graph_uncertainty(),
        }
    }

    pub fn ugmoe(&self) -> UgmoeConfig {
        UgmoeConfig {
            d: self.d,
            c: self.experts,
            k: self.top_k,
            expert_hidden: self.expert_hidden.unwrap_or(self.d),
            expert_input: self.expert_input,
            uncertainty: self.variant.has_moe_uncertainty(),
            routing_sigma_scale: self.routing_sigma_scale,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("loss.lambda1", self.lambda1),
            ("loss.lambda2", self.lambda2),
            ("loss.lambda3", self.lambda3),
            ("loss.margin", self.margin),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!(
                "train.lr must be > 0, got {}",
                self.lr
            )));
        }
        if self.p < 2 || self.k < 2 {
            return Err(Error::Config(format!(
                "train.P and train.K must be >= 2 for triplet mining, got {} and {}",
                self.p, self.k
            )));
        }
        if self.d == 0 || self.n == 0 {
            return Err(Error::Config("model.D and model.n must be >= 1".into()));
        }
        if self.routing_sigma_scale.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::Config(
                "ugmoe.routing_sigma_scale must be >= 0".into(),
            ));
        }
        self.gpgr().validate()?;
        self.ugmoe().validate()
    }
}
