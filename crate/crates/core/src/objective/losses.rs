//! Identity cross-entropy, batch-hard triplet and the weighted total.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::modality::{Modality, NUM_MODALITIES};
use crate::numerics::{Matrix, Tape, Var};

/// Floor under squared distances before the square root.
pub const DIST_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub tri: f64,
    /// Class-token KL plus sample KL, per modality.
    pub kl_cs: [f64; NUM_MODALITIES],
    pub routing: [f64; NUM_MODALITIES],
    pub balance: [f64; NUM_MODALITIES],
    pub total: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl LossBreakdown {
    pub fn kl_cs_sum(&self) -> f64 {
        self.kl_cs.iter().sum()
    }
    pub fn routing_sum(&self) -> f64 {
        self.routing.iter().sum()
    }
    pub fn balance_sum(&self) -> f64 {
        self.balance.iter().sum()
    }

    /// `[ce, tri, kl_cs, lr_loss, le_loss, total]` as logged per step.
    pub fn row(&self) -> [f64; 6] {
        [
            self.ce,
            self.tri,
            self.kl_cs_sum(),
            self.routing_sum(),
            self.balance_sum(),
            self.total,
        ]
    }

    /// Name of the first non-finite term, if any.
    pub fn first_non_finite(&self) -> Option<String> {
        if !self.ce.is_finite() {
            return Some("ce".into());
        }
        if !self.tri.is_finite() {
            return Some("tri".into());
        }
        for (name, vals) in [
            ("kl_cs", &self.kl_cs),
            ("routing", &self.routing),
            ("balance", &self.balance),
        ] {
            for m in Modality::ALL {
                if !vals[m.index()].is_finite() {
                    return Some(format!("{name}.{m}"));
                }
            }
        }
        (!self.total.is_finite()).then(|| "total".into())
    }
}

/// Fills in `total` from the parts.
pub fn total_loss(parts: &LossBreakdown, w: LossWeights) -> LossBreakdown {
    let mut out = *parts;
    let mut total = parts.ce + parts.tri;
    for m in 0..NUM_MODALITIES {
        total += w.lambda1 * parts.kl_cs[m]
            + w.lambda2 * parts.routing[m]
            + w.lambda3 * parts.balance[m];
    }
    out.total = total;
    out
}

fn check_labels(labels: &[usize], rows: usize, classes: Option<usize>) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::Shape(format!(
            "{} labels for {} rows",
            labels.len(),
            rows
        )));
    }
    if let Some(c) = classes {
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Shape(format!(
                "label {bad} out of range for {c} classes"
            )));
        }
    }
    Ok(())
}

/// Mean softmax cross-entropy of integer labels.
pub fn cross_entropy_id(logits: &Matrix, labels: &[usize]) -> Result<f64> {
    check_labels(labels, logits.rows(), Some(logits.cols()))?;
    if !logits.is_finite() {
        return Err(Error::Domain("non-finite logits".into()));
    }
    let mut t = Tape::detached();
    let x = t.constant(logits.clone());
    let l = t.cross_entropy(x, labels);
    Ok(t.value(l).item())
}

/// Requires at least two identities and at least two instances of each.
pub fn check_triplet_batch(labels: &[usize]) -> Result<()> {
    let mut counts = std::collections::BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_insert(0usize) += 1;
    }
    if counts.len() < 2 {
        return Err(Error::Shape(
            "triplet batch needs at least two identities".into(),
        ));
    }
    if let Some((l, _)) = counts.iter().find(|(_, &c)| c < 2) {
        return Err(Error::Shape(format!(
            "identity {l} has a single instance in the batch"
        )));
    }
    Ok(())
}

/// Hardest positive and negative column for each anchor row of a distance
/// matrix. Ties go to the lowest index.
pub fn hardest_pairs(dist: &Matrix, labels: &[usize]) -> Vec<(usize, usize)> {
    let b = labels.len();
    (0..b)
        .map(|i| {
            let mut pos: Option<usize> = None;
            let mut neg: Option<usize> = None;
            for j in 0..b {
                let d = dist.get(i, j);
                if j != i && labels[j] == labels[i] {
                    if pos.is_none_or(|p| d > dist.get(i, p)) {
                        pos = Some(j);
                    }
                } else if labels[j] != labels[i] && neg.is_none_or(|q| d < dist.get(i, q)) {
                    neg = Some(j);
                }
            }
            (pos.expect("checked batch"), neg.expect("checked batch"))
        })
        .collect()
}

/// Batch-hard triplet loss on the tape, mean over anchors.
pub fn batch_hard_triplet_t(t: &mut Tape<'_>, features: Var, labels: &[usize], margin: f64) -> Var {
    let d2 = t.pairwise_sq_dist(features);
    let d2 = t.clamp_min(d2, DIST_EPS);
    let dist = t.powf(d2, 0.5);
    let pairs = hardest_pairs(t.value(dist), labels);
    let pos = t.gather(
        dist,
        pairs
            .iter()
            .enumerate()
            .map(|(i, &(p, _))| (i, p))
            .collect(),
    );
    let neg = t.gather(
        dist,
        pairs
            .iter()
            .enumerate()
            .map(|(i, &(_, q))| (i, q))
            .collect(),
    );
    let gap = t.sub(pos, neg);
    let gap = t.add_scalar(gap, margin);
    let hinge = t.relu(gap);
    t.mean(hinge)
}

pub fn batch_hard_triplet(features: &Matrix, labels: &[usize], margin: f64) -> Result<f64> {
    check_labels(labels, features.rows(), None)?;
    check_triplet_batch(labels)?;
    let mut t = Tape::detached();
    let x = t.constant(features.clone());
    let l = batch_hard_triplet_t(&mut t, x, labels, margin);
    Ok(t.value(l).item())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_classes() {
        let l = cross_entropy_id(&Matrix::zeros(3, 4), &[0, 1, 3]).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn saturated_logits() {
        let logits = Matrix::from_rows(&[vec![10.0, 0.0, 0.0], vec![0.0, 0.0, 10.0]]);
        assert!(cross_entropy_id(&logits, &[0, 2]).unwrap() < 1e-3);
    }

    #[test]
    fn out_of_range_label() {
        assert!(matches!(
            cross_entropy_id(&Matrix::zeros(1, 2), &[2]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn separated_and_degenerate_triplets() {
        let f = Matrix::from_rows(&[vec![0.0], vec![0.0], vec![10.0], vec![10.0]]);
        assert_eq!(batch_hard_triplet(&f, &[0, 0, 1, 1], 0.3).unwrap(), 0.0);
        let same = Matrix::filled(4, 3, 1.5);
        let l = batch_hard_triplet(&same, &[0, 0, 1, 1], 0.3).unwrap();
        assert!((l - 0.3).abs() < 1e-12);
    }

    #[test]
    fn singleton_identity_rejected() {
        let f = Matrix::zeros(3, 2);
        assert!(matches!(
            batch_hard_triplet(&f, &[0, 0, 1], 0.3),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn total_arithmetic() {
        let w = LossWeights {
            lambda1: 0.1,
            lambda2: 0.0,
            lambda3: 0.0,
        };
        let parts = LossBreakdown {
            kl_cs: [1.0, 0.5, 0.5],
            ..LossBreakdown::default()
        };
        assert!((total_loss(&parts, w).total - 0.2).abs() < 1e-15);
        let zero = LossWeights {
            lambda1: 0.0,
            lambda2: 0.0,
            lambda3: 0.0,
        };
        let parts = LossBreakdown {
            ce: 1.25,
            tri: 0.5,
            kl_cs: [3.0; 3],
            routing: [2.0; 3],
            balance: [1.0; 3],
            total: 0.0,
        };
        assert_eq!(total_loss(&parts, zero).total, 1.75);
    }

    #[test]
    fn first_bad_term_named() {
        let mut b = LossBreakdown::default();
        assert_eq!(b.first_non_finite(), None);
        b.routing[1] = f64::NAN;
        b.balance[0] = f64::INFINITY;
        assert_eq!(b.first_non_finite().as_deref(), Some("routing.N"));
    }
}
