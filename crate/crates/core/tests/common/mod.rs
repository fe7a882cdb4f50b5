//! Oracles and random instance generators shared by integration targets.
#![allow(dead_code)]

use ugfuse::dataio::{Dataset, Sample, Split};
use ugfuse::numerics::{Matrix, RngStream};
use ugfuse::objective::{Checkpoint, LossBreakdown, TrainConfig, Variant};
use ugfuse::ugmoe::{BankEntry, ExpertBank, ExpertRef};
use ugfuse::Modality;

pub struct MetricInstance {
    pub dist: Matrix,
    pub query_labels: Vec<usize>,
    pub query_ids: Vec<u64>,
    pub gallery_labels: Vec<usize>,
    pub gallery_ids: Vec<u64>,
}

/// Q <= 10, G <= 50. Distances are sometimes quantized to force ties, and
/// some queries share a sample id with a gallery entry.
pub fn random_metric_instance(rng: &mut RngStream) -> MetricInstance {
    let q = 1 + rng.below(10);
    let g = 1 + rng.below(50);
    let ids = 2 + rng.below(6);
    let quantize = rng.uniform() < 0.3;
    let data = (0..q * g)
        .map(|_| {
            let v = rng.uniform() * 4.0;
            if quantize {
                v.floor()
            } else {
                v
            }
        })
        .collect();
    let gallery_ids: Vec<u64> = (0..g as u64).collect();
    let query_ids = (0..q)
        .map(|i| {
            if rng.uniform() < 0.2 {
                rng.below(g) as u64
            } else {
                1000 + i as u64
            }
        })
        .collect();
    MetricInstance {
        dist: Matrix::from_vec(q, g, data).unwrap(),
        query_labels: (0..q).map(|_| rng.below(ids)).collect(),
        query_ids,
        gallery_labels: (0..g).map(|_| rng.below(ids)).collect(),
        gallery_ids,
    }
}

pub struct BruteMetrics {
    pub ap: Vec<f64>,
    /// `cmc[r]` is the fraction of valid queries with a hit within rank `r + 1`.
    pub cmc: Vec<f64>,
    pub invalid: usize,
}

/// O(Q·G²): every gallery entry's rank is found by counting the entries
/// that beat it (smaller distance, or equal distance and lower index).
pub fn brute_metrics(x: &MetricInstance) -> Option<BruteMetrics> {
    let (q, g) = x.dist.shape();
    let mut ap = Vec::new();
    let mut first_hits = Vec::new();
    let mut invalid = 0;
    for i in 0..q {
        let kept: Vec<usize> = (0..g)
            .filter(|&j| x.gallery_ids[j] != x.query_ids[i])
            .collect();
        let rank = |j: usize| -> usize {
            1 + kept
                .iter()
                .filter(|&&k| {
                    let (dk, dj) = (x.dist.get(i, k), x.dist.get(i, j));
                    dk < dj || (dk == dj && k < j)
                })
                .count()
        };
        let relevant: Vec<usize> = kept
            .iter()
            .copied()
            .filter(|&j| x.gallery_labels[j] == x.query_labels[i])
            .collect();
        if relevant.is_empty() {
            invalid += 1;
            continue;
        }
        let ranks: Vec<usize> = relevant.iter().map(|&j| rank(j)).collect();
        let precision: f64 = ranks
            .iter()
            .map(|&r| ranks.iter().filter(|&&s| s <= r).count() as f64 / r as f64)
            .sum();
        ap.push(precision / ranks.len() as f64);
        first_hits.push(*ranks.iter().min().unwrap());
    }
    if ap.is_empty() {
        return None;
    }
    let cmc = (1..=g.max(1))
        .map(|r| first_hits.iter().filter(|&&h| h <= r).count() as f64 / first_hits.len() as f64)
        .collect();
    Some(BruteMetrics { ap, cmc, invalid })
}

/// Small dataset with f32-representable tokens, random ids and splits.
pub fn random_dataset(rng: &mut RngStream) -> Dataset {
    let n = rng.below(5);
    let d = 1 + rng.below(6);
    let count = rng.below(8);
    let classes = 1 + rng.below(4);
    let samples = (0..count)
        .map(|i| Sample {
            id: rng.next_u64(),
            // The first `classes` samples pin every label, keeping them contiguous.
            label: if i < classes { i } else { rng.below(classes) },
            split: Split::from_code(rng.below(3) as u8).unwrap(),
            tokens: std::array::from_fn(|_| {
                let data = (0..(n + 1) * d)
                    .map(|_| (rng.normal() * 3.0) as f32 as f64)
                    .collect();
                Matrix::from_vec(n + 1, d, data).unwrap()
            }),
        })
        .collect();
    Dataset::new(n, d, samples).unwrap()
}

/// Checkpoint for a random small configuration with every parameter,
/// moment and history entry overwritten by random values.
pub fn random_checkpoint(rng: &mut RngStream) -> Checkpoint {
    let variant = Variant::ALL[rng.below(5)];
    let d = 2 + rng.below(4);
    let n = 1 + rng.below(4);
    let experts = 1 + rng.below(3);
    let cfg = TrainConfig {
        variant,
        d,
        n,
        p: 2,
        k: 2,
        experts,
        top_k: rng.below(experts + 1),
        lr: rng.uniform() * 1e-2 + 1e-6,
        lambda1: rng.uniform(),
        seed: rng.next_u64() >> 1,
        epochs: 1 + rng.below(50),
        ..TrainConfig::default()
    };
    let ds = Dataset::new(
        n,
        d,
        (0..4)
            .map(|i| Sample {
                id: i as u64,
                label: i % 2,
                split: Split::Train,
                tokens: std::array::from_fn(|_| Matrix::zeros(n + 1, d)),
            })
            .collect(),
    )
    .unwrap();
    let mut ck = Checkpoint::initial(&cfg, &ds).unwrap();
    let mut fill = |m: &mut Matrix| {
        for v in m.data_mut() {
            *v = rng.normal();
        }
    };
    for i in 0..ck.params.len() {
        fill(ck.params.value_mut(i));
    }
    ck.adam.m.iter_mut().for_each(&mut fill);
    ck.adam.v.iter_mut().for_each(&mut fill);
    ck.adam.t = rng.below(1000) as u64;
    ck.epoch = rng.below(100);
    ck.step = rng.below(10_000) as u64;
    ck.history = (0..rng.below(6))
        .map(|_| LossBreakdown {
            ce: rng.normal(),
            tri: rng.normal(),
            kl_cs: [rng.normal(), rng.normal(), rng.normal()],
            routing: [rng.normal(), rng.normal(), rng.normal()],
            balance: [rng.normal(), rng.normal(), rng.normal()],
            total: rng.normal(),
        })
        .collect();
    ck.set_meta("config_hash", format!("{:016x}", rng.next_u64()));
    ck.set_meta("run_id", format!("r{}", rng.below(100)));
    ck
}

/// Bank over `R` whose entries cycle through the three source modalities.
pub fn bank_from_weights(weights: Vec<f64>) -> ExpertBank {
    let entries = (0..weights.len())
        .map(|i| BankEntry {
            expert: ExpertRef {
                owner: Modality::R,
                index: i,
            },
            raw_score: weights[i],
            source: Modality::ALL[i % 3],
        })
        .collect();
    ExpertBank {
        target: Modality::R,
        entries,
        weights,
    }
}

/// Load balance by explicit enumeration: for every expert, the fraction of
/// samples whose first maximal weight is that expert, times its mean weight.
pub fn brute_balance(batch: &[Vec<f64>]) -> f64 {
    let e = batch[0].len();
    let b = batch.len() as f64;
    let mut total = 0.0;
    for c in 0..e {
        let mut count = 0.0;
        let mut mass = 0.0;
        for w in batch {
            let mut best = 0;
            for (i, v) in w.iter().enumerate() {
                if *v > w[best] {
                    best = i;
                }
            }
            if best == c {
                count += 1.0;
            }
            mass += w[c];
        }
        total += (count / b) * (mass / b);
    }
    total / e as f64
}
