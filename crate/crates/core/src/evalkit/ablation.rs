//! Trains and evaluates every requested variant under shared seeds.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use super::report::mean_std;
use super::{evaluate_model, Metric, MetricReport};
use crate::dataio::Dataset;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::objective::{fit, Checkpoint, TrainConfig, Variant};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    #[serde(rename = "mAP")]
    pub map: f64,
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
}

#[derive(Clone, Debug)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    /// Trained models keyed by (variant, seed), reusable by the noise sweep.
    pub checkpoints: BTreeMap<(Variant, u64), Checkpoint>,
}

impl AblationReport {
    pub fn rows_for(&self, v: Variant) -> impl Iterator<Item = &AblationRow> {
        let tag = v.tag();
        self.rows.iter().filter(move |r| r.variant == tag)
    }

    /// Seed-averaged `(mean, std)` of mAP for a variant.
    pub fn map_stats(&self, v: Variant) -> (f64, f64) {
        mean_std(&self.rows_for(v).map(|r| r.map).collect::<Vec<_>>())
    }

    pub fn rank1_stats(&self, v: Variant) -> (f64, f64) {
        mean_std(&self.rows_for(v).map(|r| r.rank1).collect::<Vec<_>>())
    }

    /// One row per (variant, seed).
    pub fn rows_csv(&self) -> String {
        let mut out = String::from("variant,seed,mAP,R-1,R-5,R-10\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{:.6},{:.6},{:.6},{:.6}",
                r.variant, r.seed, r.map, r.rank1, r.rank5, r.rank10
            );
        }
        out
    }

    /// Per-variant mean and std over seeds.
    pub fn table_csv(&self) -> String {
        let mut out = String::from(
            "variant,seeds,mAP_mean,mAP_std,R-1_mean,R-1_std,R-5_mean,R-5_std,R-10_mean,R-10_std\n",
        );
        let mut seen = Vec::new();
        for r in &self.rows {
            if !seen.contains(&r.variant) {
                seen.push(r.variant.clone());
            }
        }
        for v in seen {
            let rows: Vec<_> = self.rows.iter().filter(|r| r.variant == v).collect();
            let stat = |f: fn(&AblationRow) -> f64| {
                mean_std(&rows.iter().map(|r| f(r)).collect::<Vec<_>>())
            };
            let cols = [
                stat(|r| r.map),
                stat(|r| r.rank1),
                stat(|r| r.rank5),
                stat(|r| r.rank10),
            ];
            let _ = write!(out, "{v},{}", rows.len());
            for (m, s) in cols {
                let _ = write!(out, ",{m:.6},{s:.6}");
            }
            out.push('\n');
        }
        out
    }
}

fn row(variant: Variant, seed: u64, r: &MetricReport) -> AblationRow {
    AblationRow {
        variant: variant.tag().to_string(),
        seed,
        map: r.map,
        rank1: r.rank1,
        rank5: r.rank5,
        rank10: r.rank10,
    }
}

/// Trains each `(variant, seed)` cell from `base` and evaluates it on the
/// query/gallery split. Cells run concurrently under `exec`; rows come back
/// in variant-major, seed-minor order.
pub fn ablation_run(
    base: &TrainConfig,
    ds: &Dataset,
    variants: &[Variant],
    seeds: &[u64],
    metric: Metric,
    exec: Exec,
) -> Result<AblationReport> {
    let cells: Vec<(Variant, u64)> = variants
        .iter()
        .flat_map(|&v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    let results = exec.map(&cells, |&(variant, seed)| {
        let cfg = TrainConfig {
            variant,
            seed,
            ..base.clone()
        };
        let run = || -> Result<(Checkpoint, MetricReport)> {
            let ck = fit(&cfg, ds, exec)?;
            let report = evaluate_model(&ck.model()?, &ck.params, ds, metric, exec)?;
            Ok((ck, report))
        };
        run().map_err(|e| Error::Variant {
            variant: variant.tag().to_string(),
            source: Box::new(e),
        })
    });
    let mut rows = Vec::with_capacity(cells.len());
    let mut checkpoints = BTreeMap::new();
    for (&(v, s), res) in cells.iter().zip(results) {
        let (ck, report) = res?;
        rows.push(row(v, s, &report));
        checkpoints.insert((v, s), ck);
    }
    Ok(AblationReport { rows, checkpoints })
}
