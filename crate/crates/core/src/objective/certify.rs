//! Finite-difference certification of the full training loss on a
//! 4-identity micro-batch.

use super::train::{batch_gradients, batch_loss, epoch_batches, TrainSet};
use super::{Checkpoint, TrainConfig, Variant};
use crate::dataio::{generate, Dataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::numerics::{grad_check, seeded_rng, stream_id, GradCheckConfig, GradReport, StreamKind};

/// Std of the jitter added to every initialized parameter, so that zero-init
/// gates do not sit on top-k ties while probing.
pub const JITTER: f64 = 0.05;

/// Micro dimensions: 4 identities x 2 instances, `D = 8`, `n = 6`.
/// Heteroscedastic and occluded patches are off: they put nodes so far
/// apart that heat-kernel weights, and the gradients through them, fall
/// below what a central difference on an O(1) loss can resolve.
pub fn micro_dataset(seed: u64) -> Result<Dataset> {
    generate(&SyntheticSpec {
        num_identities: 4,
        instances_per_identity: 2,
        d: 8,
        n: 6,
        hetero_fraction: 0.0,
        occlusion_prob: 0.0,
        test_fraction: 0.0,
        seed,
        ..SyntheticSpec::default()
    })
}

pub fn micro_config(base: &TrainConfig, variant: Variant) -> TrainConfig {
    TrainConfig {
        variant,
        d: 8,
        n: 6,
        p: 4,
        k: 2,
        ..base.clone()
    }
}

/// Checks every parameter group of `variant` on the first batch, with the
/// reparameterization draw pinned to step 0.
pub fn gradcheck_variant(
    base: &TrainConfig,
    variant: Variant,
    gc: GradCheckConfig,
) -> Result<Vec<GradReport>> {
    let cfg = micro_config(base, variant);
    let ds = micro_dataset(cfg.seed)?;
    let mut ck = Checkpoint::initial(&cfg, &ds)?;
    for i in 0..ck.params.len() {
        let mut rng = seeded_rng(cfg.seed, stream_id(StreamKind::Probe, &[1, i as u64]));
        for v in ck.params.value_mut(i).data_mut() {
            *v += JITTER * rng.normal();
        }
    }
    let model = ck.model()?;
    let ts = TrainSet::new(&ds);
    let batch = epoch_batches(&cfg, &ts, 0)?
        .into_iter()
        .next()
        .ok_or_else(|| Error::Config("micro dataset yields no batch".into()))?;
    let exec = Exec::Sequential;
    let (_, grads) = batch_gradients(&model, &cfg, &ck.params, &batch, 0, exec)?;
    let loss = |p: &_| {
        batch_loss(&model, &cfg, p, &batch, 0, exec)
            .map(|l| l.total)
            .unwrap_or(f64::NAN)
    };
    Ok(grad_check(loss, &ck.params, &grads, gc))
}
