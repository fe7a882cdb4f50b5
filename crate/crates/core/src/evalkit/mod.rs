//! Retrieval metrics, the test-time noise sweep and the ablation runner.

pub mod ablation;
pub mod report;
pub mod sweep;

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::dataio::{Dataset, Split};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::numerics::{Matrix, ParamStore};
use crate::objective::Model;

pub use ablation::{ablation_run, AblationReport, AblationRow};
pub use report::{json_report, mean_std};
pub use sweep::{noise_sweep, SweepReport, SweepRow};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Euclidean,
    Cosine,
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Euclidean => "euclidean",
            Metric::Cosine => "cosine",
        })
    }
}

impl FromStr for Metric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(Metric::Euclidean),
            "cosine" => Ok(Metric::Cosine),
            other => Err(Error::Config(format!("unknown metric `{other}`"))),
        }
    }
}

/// Features with identity labels and sample ids.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LabeledFeatures {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub ids: Vec<u64>,
}

impl LabeledFeatures {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    fn check(&self, what: &str) -> Result<()> {
        if self.labels.len() != self.len() || self.ids.len() != self.len() {
            return Err(Error::Shape(format!(
                "{what}: features, labels and ids differ in length"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    #[serde(rename = "mAP")]
    pub map: f64,
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    /// `cmc[r]` is the fraction of valid queries matched within the top `r + 1`.
    pub cmc: Vec<f64>,
    /// Average precision of each valid query, in query order.
    pub ap: Vec<f64>,
    pub valid_queries: usize,
    /// Queries whose identity has no gallery match; excluded from the means.
    pub invalid_queries: usize,
}

fn distance(a: &[f64], b: &[f64], metric: Metric) -> f64 {
    match metric {
        Metric::Euclidean => a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt(),
        Metric::Cosine => {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            if na == 0.0 || nb == 0.0 {
                1.0
            } else {
                (1.0 - dot / (na * nb)).max(0.0)
            }
        }
    }
}

/// `Q x G` distance matrix; rows are computed concurrently.
pub fn distance_matrix(
    query: &[Vec<f64>],
    gallery: &[Vec<f64>],
    metric: Metric,
    exec: Exec,
) -> Result<Matrix> {
    let width = query.first().or(gallery.first()).map_or(0, Vec::len);
    if query.iter().chain(gallery).any(|f| f.len() != width) {
        return Err(Error::Shape("features differ in length".into()));
    }
    let rows = exec.map(query, |q| {
        gallery
            .iter()
            .map(|g| distance(q, g, metric))
            .collect::<Vec<_>>()
    });
    Matrix::from_vec(query.len(), gallery.len(), rows.concat())
}

/// Metrics from a precomputed distance matrix.
///
/// Per query, the gallery is sorted by ascending distance with ties broken
/// by gallery index, entries with the query's own sample id are dropped,
/// and AP is the mean over relevant positions `i` of (relevant in top `i`) / `i`.
pub fn evaluate_distances(
    dist: &Matrix,
    query_labels: &[usize],
    query_ids: &[u64],
    gallery_labels: &[usize],
    gallery_ids: &[u64],
) -> Result<MetricReport> {
    let (q, g) = dist.shape();
    if q == 0 {
        return Err(Error::Shape("evaluation needs at least one query".into()));
    }
    if query_labels.len() != q
        || query_ids.len() != q
        || gallery_labels.len() != g
        || gallery_ids.len() != g
    {
        return Err(Error::Shape(
            "distance matrix and label lists disagree".into(),
        ));
    }
    let mut cmc_hits = vec![0usize; g.max(1)];
    let mut ap = Vec::with_capacity(q);
    let mut invalid = 0;
    for i in 0..q {
        let row = dist.row(i);
        let mut order: Vec<usize> = (0..g).filter(|&j| gallery_ids[j] != query_ids[i]).collect();
        order.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
        let mut hits = 0usize;
        let mut precision_sum = 0.0;
        let mut first_hit = None;
        for (pos, &j) in order.iter().enumerate() {
            if gallery_labels[j] == query_labels[i] {
                hits += 1;
                precision_sum += hits as f64 / (pos + 1) as f64;
                first_hit.get_or_insert(pos);
            }
        }
        let Some(first) = first_hit else {
            invalid += 1;
            continue;
        };
        ap.push(precision_sum / hits as f64);
        cmc_hits[first] += 1;
    }
    let valid = ap.len();
    if valid == 0 {
        return Err(Error::Domain(format!(
            "none of the {q} queries has a matching identity in the gallery"
        )));
    }
    let mut cmc = Vec::with_capacity(cmc_hits.len());
    let mut acc = 0usize;
    for h in cmc_hits {
        acc += h;
        cmc.push(acc as f64 / valid as f64);
    }
    let at = |r: usize| cmc[(r - 1).min(cmc.len() - 1)];
    Ok(MetricReport {
        map: ap.iter().sum::<f64>() / valid as f64,
        rank1: at(1),
        rank5: at(5),
        rank10: at(10),
        cmc,
        ap,
        valid_queries: valid,
        invalid_queries: invalid,
    })
}

pub fn evaluate(
    query: &LabeledFeatures,
    gallery: &LabeledFeatures,
    metric: Metric,
    exec: Exec,
) -> Result<MetricReport> {
    query.check("query")?;
    gallery.check("gallery")?;
    let dist = distance_matrix(&query.features, &gallery.features, metric, exec)?;
    evaluate_distances(
        &dist,
        &query.labels,
        &query.ids,
        &gallery.labels,
        &gallery.ids,
    )
}

/// Eval-mode features of one split.
pub fn embed_split(
    model: &Model,
    params: &ParamStore,
    ds: &Dataset,
    split: Split,
    exec: Exec,
) -> Result<LabeledFeatures> {
    let samples: Vec<_> = ds.split(split).collect();
    Ok(LabeledFeatures {
        features: model.embed_all(params, &samples, exec)?,
        labels: samples.iter().map(|s| s.label).collect(),
        ids: samples.iter().map(|s| s.id).collect(),
    })
}

/// Query-versus-gallery evaluation of a trained model.
pub fn evaluate_model(
    model: &Model,
    params: &ParamStore,
    ds: &Dataset,
    metric: Metric,
    exec: Exec,
) -> Result<MetricReport> {
    let q = embed_split(model, params, ds, Split::Query, exec)?;
    let g = embed_split(model, params, ds, Split::Gallery, exec)?;
    evaluate(&q, &g, metric, exec)
}
