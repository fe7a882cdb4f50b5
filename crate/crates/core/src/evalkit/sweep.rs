//! Test-time noise sweep over trained checkpoints.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use super::report::mean_std;
use super::{evaluate_model, Metric};
use crate::dataio::noise::inject_noise_scaled;
use crate::dataio::{feature_std, Dataset, NoiseSpec};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::objective::{Checkpoint, Variant};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub eps: f64,
    pub variant: String,
    pub seed: u64,
    #[serde(rename = "mAP")]
    pub map: f64,
    pub rank1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepSummary {
    pub eps: f64,
    pub variant: String,
    pub map_mean: f64,
    pub map_std: f64,
    pub rank1_mean: f64,
    pub rank1_std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepReport {
    pub noise_kind: String,
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn cell(&self, eps: f64, v: Variant) -> Vec<&SweepRow> {
        self.rows
            .iter()
            .filter(|r| r.eps == eps && r.variant == v.tag())
            .collect()
    }

    pub fn mean_map(&self, eps: f64, v: Variant) -> f64 {
        mean_std(&self.cell(eps, v).iter().map(|r| r.map).collect::<Vec<_>>()).0
    }

    /// `(eps, variant)` means and stds over seeds, in first-seen order.
    pub fn summary(&self) -> Vec<SweepSummary> {
        let mut keys: Vec<(f64, String)> = Vec::new();
        for r in &self.rows {
            if !keys.iter().any(|(e, v)| *e == r.eps && *v == r.variant) {
                keys.push((r.eps, r.variant.clone()));
            }
        }
        keys.into_iter()
            .map(|(eps, variant)| {
                let cell: Vec<_> = self
                    .rows
                    .iter()
                    .filter(|r| r.eps == eps && r.variant == variant)
                    .collect();
                let (map_mean, map_std) = mean_std(&cell.iter().map(|r| r.map).collect::<Vec<_>>());
                let (rank1_mean, rank1_std) =
                    mean_std(&cell.iter().map(|r| r.rank1).collect::<Vec<_>>());
                SweepSummary {
                    eps,
                    variant,
                    map_mean,
                    map_std,
                    rank1_mean,
                    rank1_std,
                }
            })
            .collect()
    }

    pub fn rows_csv(&self) -> String {
        let mut out = format!(
            "# noise kind: {}\neps,variant,seed,mAP,R-1\n",
            self.noise_kind
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{:.6},{:.6}",
                r.eps, r.variant, r.seed, r.map, r.rank1
            );
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from("eps,variant,mAP_mean,mAP_std,R-1_mean,R-1_std\n");
        for s in self.summary() {
            let _ = writeln!(
                out,
                "{},{},{:.6},{:.6},{:.6},{:.6}",
                s.eps, s.variant, s.map_mean, s.map_std, s.rank1_mean, s.rank1_std
            );
        }
        out
    }
}

/// Evaluates every `(eps, variant, seed)` cell. `noise` supplies the kind,
/// target, seed and modality mask; its intensity is replaced by each `eps`.
/// Rows are ordered eps-major, then variant, then seed.
pub fn noise_sweep(
    checkpoints: &BTreeMap<(Variant, u64), Checkpoint>,
    ds: &Dataset,
    eps_list: &[f64],
    variants: &[Variant],
    seeds: &[u64],
    noise: &NoiseSpec,
    metric: Metric,
    exec: Exec,
) -> Result<SweepReport> {
    for &v in variants {
        for &s in seeds {
            if !checkpoints.contains_key(&(v, s)) {
                return Err(Error::MissingCheckpoint(format!("{v} (seed {s})")));
            }
        }
    }
    let scale = feature_std(ds);
    let corrupted: Vec<Dataset> = eps_list
        .iter()
        .map(|&eps| {
            let spec = NoiseSpec {
                intensity: eps,
                ..noise.clone()
            };
            inject_noise_scaled(ds, &spec, &scale)
        })
        .collect::<Result<_>>()?;
    let mut cells = Vec::new();
    for (ei, &eps) in eps_list.iter().enumerate() {
        for &v in variants {
            for &s in seeds {
                cells.push((ei, eps, v, s));
            }
        }
    }
    let rows = exec
        .map(&cells, |&(ei, eps, v, s)| -> Result<SweepRow> {
            let ck = &checkpoints[&(v, s)];
            let report = evaluate_model(&ck.model()?, &ck.params, &corrupted[ei], metric, exec)?;
            Ok(SweepRow {
                eps,
                variant: v.tag().to_string(),
                seed: s,
                map: report.map,
                rank1: report.rank1,
            })
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepReport {
        noise_kind: noise.kind.to_string(),
        rows,
    })
}
