//! Uncertainty-guided multi-modal fusion for object re-identification.
//!
//! Per-modality token sets are turned into Gaussian patch graphs
//! ([`gpgr`]), fused by an uncertainty-routed mixture of experts
//! ([`ugmoe`]), trained with identity and metric losses ([`objective`]),
//! and evaluated with retrieval metrics ([`evalkit`]). Synthetic data and
//! the binary feature format live in [`dataio`].

pub mod config;
pub mod dataio;
pub mod error;
pub mod evalkit;
pub mod exec;
pub mod gpgr;
pub mod lock;
pub mod modality;
pub mod numerics;
pub mod objective;
pub mod ugmoe;

pub use error::{Error, Result};
pub use exec::Exec;
pub use modality::Modality;
