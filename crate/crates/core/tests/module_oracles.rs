//! Scratch re-implementations of the patch-graph and expert computations,
//! checked against the library on random inputs.

mod common;

use common::{bank_from_weights, brute_balance};
use proptest::prelude::*;
use ugfuse::gpgr::{
    self, aggregate_global, build_patch_graph, gpgcn_forward, modal_feature,
    project_gaussian_nodes, GpgrConfig, PatchFeatureSet,
};
use ugfuse::numerics::{seeded_rng, standard_normal, Matrix, ParamStore, RngStream};
use ugfuse::ugmoe::{
    self, assemble_bank, bank_size, decision_from_scores, load_balance_loss, mixture_forward,
    routing_uncertainty_loss, ExpertRef, SampleGaussian, UgmoeConfig,
};
use ugfuse::Modality;

type Rows = Vec<Vec<f64>>;

fn rows(m: &Matrix) -> Rows {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

fn mm(a: &Rows, b: &Rows) -> Rows {
    let inner = b.len();
    a.iter()
        .map(|ar| {
            (0..b[0].len())
                .map(|j| (0..inner).map(|k| ar[k] * b[k][j]).sum())
                .collect()
        })
        .collect()
}

fn add_bias(a: &Rows, b: &[f64]) -> Rows {
    a.iter()
        .map(|r| r.iter().zip(b).map(|(x, y)| x + y).collect())
        .collect()
}

fn relu(a: &Rows) -> Rows {
    a.iter()
        .map(|r| r.iter().map(|v| v.max(0.0)).collect())
        .collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn close(a: &Rows, b: &Matrix, tol: f64) {
    assert_eq!((a.len(), a[0].len()), b.shape());
    for (r, row) in a.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            let w = b.get(r, c);
            assert!(
                (v - w).abs() <= tol * (1.0 + v.abs()),
                "({r},{c}): {v} vs {w}"
            );
        }
    }
}

/// Overwrites every parameter with a fresh draw so zero-initialized biases
/// and gates are exercised too.
fn randomize(ps: &mut ParamStore, rng: &mut RngStream, scale: f64) {
    for i in 0..ps.len() {
        for v in ps.value_mut(i).data_mut() {
            *v = scale * rng.normal();
        }
    }
}

fn gpgr_store(cfg: &GpgrConfig, seed: u64) -> ParamStore {
    let mut ps = ParamStore::new();
    let mut rng = seeded_rng(seed, 1);
    gpgr::init_params(&mut ps, cfg, &mut rng);
    randomize(&mut ps, &mut rng, 0.4);
    ps
}

fn p(ps: &ParamStore, name: &str) -> Rows {
    rows(ps.get(name).unwrap())
}

fn scratch_projection(x: &Rows, ps: &ParamStore) -> (Rows, Rows) {
    let mu = add_bias(&mm(x, &p(ps, "gpgr.fc_mu.w")), &p(ps, "gpgr.fc_mu.b")[0]);
    let raw = add_bias(
        &mm(x, &p(ps, "gpgr.fc_sigma.w")),
        &p(ps, "gpgr.fc_sigma.b")[0],
    );
    let phi = softplus(ps.get("gpgr.phi").unwrap().item());
    let sigma = raw
        .iter()
        .map(|r| r.iter().map(|v| (phi * sigmoid(*v)).max(1e-6)).collect())
        .collect();
    (mu, sigma)
}

fn scratch_adjacency(mu: &Rows) -> Rows {
    let n = mu.len();
    let d2 = |i: usize, j: usize| -> f64 {
        mu[i].iter().zip(&mu[j]).map(|(a, b)| (a - b).powi(2)).sum()
    };
    let mut upper: Vec<f64> = (0..n)
        .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
        .map(|(i, j)| d2(i, j))
        .collect();
    upper.sort_by(f64::total_cmp);
    let tau = upper[(upper.len() - 1) / 2];
    (0..n)
        .map(|i| (0..n).map(|j| (-d2(i, j) / tau).exp()).collect())
        .collect()
}

fn scratch_normalize(a: &Rows) -> Rows {
    let deg: Vec<f64> = a.iter().map(|r| r.iter().sum()).collect();
    a.iter()
        .enumerate()
        .map(|(i, r)| {
            r.iter()
                .enumerate()
                .map(|(j, v)| v / (deg[i] * deg[j]).sqrt())
                .collect()
        })
        .collect()
}

fn scratch_gcn(
    norm: &Rows,
    mu: &Rows,
    sigma: &Rows,
    ps: &ParamStore,
    m: Modality,
    layers: usize,
) -> (Rows, Rows) {
    let phi = softplus(ps.get("gpgr.phi").unwrap().item());
    let (mut mu, mut sigma) = (mu.clone(), sigma.clone());
    for l in 0..layers {
        mu = relu(&mm(&mm(norm, &mu), &p(ps, &format!("gpgr.{m}.w_mu.{l}"))));
        let pre = mm(&mm(norm, &sigma), &p(ps, &format!("gpgr.{m}.w_sigma.{l}")));
        sigma = if l + 1 == layers {
            pre.iter()
                .map(|r| r.iter().map(|v| (phi * sigmoid(*v)).max(1e-6)).collect())
                .collect()
        } else {
            relu(&pre)
        };
    }
    (mu, sigma)
}

fn scratch_aggregate(x: &Rows, ps: &ParamStore, m: Modality) -> Vec<f64> {
    let d = x[0].len();
    let n = x.len() - 1;
    let mut cat = x[0].clone();
    cat.extend((0..d).map(|c| x[1..].iter().map(|r| r[c]).sum::<f64>() / n as f64));
    mm(&vec![cat], &p(ps, &format!("gpgr.{m}.fuse.w"))).remove(0)
}

#[test]
fn projection_matches_scratch() {
    let cfg = GpgrConfig {
        d: 4,
        ..GpgrConfig::default()
    };
    let ps = gpgr_store(&cfg, 3);
    let tokens = standard_normal(6, 4, &mut seeded_rng(3, 2));
    let nodes = project_gaussian_nodes(
        &PatchFeatureSet::new(Modality::N, tokens.clone()).unwrap(),
        &ps,
        &cfg,
    )
    .unwrap();
    let (mu, sigma) = scratch_projection(&rows(&tokens), &ps);
    close(&mu, &nodes.mu, 1e-12);
    close(&sigma, &nodes.sigma, 1e-12);
}

#[test]
fn five_node_convolution_matches_scratch() {
    let cfg = GpgrConfig {
        d: 3,
        ..GpgrConfig::default()
    };
    let ps = gpgr_store(&cfg, 5);
    let tokens = standard_normal(5, 3, &mut seeded_rng(5, 2));
    let m = Modality::T;
    let nodes =
        project_gaussian_nodes(&PatchFeatureSet::new(m, tokens.clone()).unwrap(), &ps, &cfg)
            .unwrap();
    let graph = build_patch_graph(&nodes, &cfg).unwrap();
    let (mu, sigma) = scratch_projection(&rows(&tokens), &ps);
    let adj = scratch_adjacency(&mu);
    close(&adj, &graph.adjacency, 1e-12);
    let out = gpgcn_forward(&nodes, &graph, &ps, &cfg, m).unwrap();
    let (mu2, sigma2) = scratch_gcn(&scratch_normalize(&adj), &mu, &sigma, &ps, m, cfg.layers);
    close(&mu2, &out.mu, 1e-12);
    close(&sigma2, &out.sigma, 1e-12);
}

#[test]
fn aggregate_and_branch_match_scratch() {
    let cfg = GpgrConfig {
        d: 4,
        ..GpgrConfig::default()
    };
    let ps = gpgr_store(&cfg, 7);
    let tokens = standard_normal(7, 4, &mut seeded_rng(7, 2));
    let m = Modality::R;
    let agg = aggregate_global(&tokens, &ps, &cfg, m).unwrap();
    let want = scratch_aggregate(&rows(&tokens), &ps, m);
    close(&vec![want], &Matrix::row_vector(&agg.x_tilde), 1e-12);

    let (mu, sigma) = scratch_projection(&rows(&tokens), &ps);
    let norm = scratch_normalize(&scratch_adjacency(&mu));
    let (mu_hat, _) = scratch_gcn(&norm, &mu, &sigma, &ps, m, cfg.layers);
    let want = scratch_aggregate(&mu_hat, &ps, m);
    let got = modal_feature(&PatchFeatureSet::new(m, tokens).unwrap(), &ps, &cfg).unwrap();
    close(&vec![want], &Matrix::row_vector(&got.x_tilde), 1e-12);
}

fn moe_store(cfg: &UgmoeConfig, seed: u64) -> ParamStore {
    let mut ps = ParamStore::new();
    let mut rng = seeded_rng(seed, 1);
    ugmoe::init_params(&mut ps, cfg, &mut rng);
    randomize(&mut ps, &mut rng, 0.5);
    ps
}

fn scratch_expert(ps: &ParamStore, e: ExpertRef, x: &[f64]) -> Vec<f64> {
    let name = |part: &str| format!("ugmoe.{}.expert.{}.{part}", e.owner, e.index);
    let h = relu(&add_bias(
        &mm(&vec![x.to_vec()], &p(ps, &name("w1"))),
        &p(ps, &name("b1"))[0],
    ));
    add_bias(&mm(&h, &p(ps, &name("w2"))), &p(ps, &name("b2"))[0]).remove(0)
}

fn feature(m: Modality, x: Vec<f64>) -> gpgr::ModalFeature {
    gpgr::ModalFeature {
        modality: m,
        x_tilde: x,
    }
}

#[test]
fn gaussian_gate_and_mixture_match_scratch() {
    let cfg = UgmoeConfig {
        d: 5,
        expert_hidden: 3,
        ..UgmoeConfig::default()
    };
    let ps = moe_store(&cfg, 11);
    let mut rng = seeded_rng(11, 2);
    let xs: Vec<Vec<f64>> = (0..3)
        .map(|_| (0..5).map(|_| rng.normal()).collect())
        .collect();

    let decisions: Vec<_> = Modality::ALL
        .iter()
        .map(|&m| ugmoe::gate(&feature(m, xs[m.index()].clone()), &ps, &cfg).unwrap())
        .collect();
    for m in Modality::ALL {
        let x = vec![xs[m.index()].clone()];
        let logits = add_bias(
            &mm(&x, &p(&ps, &format!("ugmoe.{m}.gate.w"))),
            &p(&ps, &format!("ugmoe.{m}.gate.b"))[0],
        );
        let z: f64 = logits[0].iter().map(|v| v.exp()).sum();
        let want: Vec<f64> = logits[0].iter().map(|v| v.exp() / z).collect();
        close(
            &vec![want],
            &Matrix::row_vector(&decisions[m.index()].own_scores),
            1e-12,
        );

        let sg = ugmoe::sample_gaussian(&feature(m, xs[m.index()].clone()), &ps, &cfg).unwrap();
        let mu = add_bias(
            &mm(&x, &p(&ps, &format!("ugmoe.{m}.mu.w"))),
            &p(&ps, &format!("ugmoe.{m}.mu.b"))[0],
        );
        let raw = add_bias(
            &mm(&x, &p(&ps, &format!("ugmoe.{m}.sigma.w"))),
            &p(&ps, &format!("ugmoe.{m}.sigma.b"))[0],
        );
        let sigma = vec![raw[0].iter().map(|v| softplus(*v).max(1e-6)).collect()];
        close(&mu, &Matrix::row_vector(&sg.mu_tilde), 1e-12);
        close(&sigma, &Matrix::row_vector(&sg.sigma_tilde), 1e-12);
    }

    for target in Modality::ALL {
        let bank = assemble_bank(&decisions, target).unwrap();
        let x = &xs[target.index()];
        let mut want = vec![0.0; 5];
        for (e, w) in bank.entries.iter().zip(&bank.weights) {
            for (o, v) in want.iter_mut().zip(scratch_expert(&ps, e.expert, x)) {
                *o += w * v;
            }
        }
        let got = mixture_forward(&bank, &feature(target, x.clone()), &ps, &cfg).unwrap();
        close(&vec![want], &Matrix::row_vector(&got), 1e-12);
    }
}

#[test]
fn bank_size_grid() {
    let mut rng = seeded_rng(21, 0);
    for c in 1..=6 {
        for k in 0..=c {
            let decisions: Vec<_> = Modality::ALL
                .iter()
                .map(|&m| {
                    let raw: Vec<f64> = (0..c).map(|_| rng.uniform() + 0.01).collect();
                    let s: f64 = raw.iter().sum();
                    decision_from_scores(m, raw.iter().map(|v| v / s).collect(), k)
                })
                .collect();
            for m in Modality::ALL {
                let bank = assemble_bank(&decisions, m).unwrap();
                assert_eq!(bank.len(), c + k * 2, "C={c} k={k}");
                assert_eq!(bank.len(), bank_size(c, k, 3));
                let total: f64 = bank.weights.iter().sum();
                assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn load_balance_closed_forms() {
    for e in [2usize, 4, 6, 8] {
        let uniform: Vec<_> = (0..5)
            .map(|_| bank_from_weights(vec![1.0 / e as f64; e]))
            .collect();
        let got = load_balance_loss(&uniform).unwrap();
        assert_eq!(
            got,
            brute_balance(
                &uniform
                    .iter()
                    .map(|b| b.weights.clone())
                    .collect::<Vec<_>>()
            )
        );
        assert!((got - 1.0 / (e * e) as f64).abs() < 1e-15);

        let mut one_hot = vec![0.0; e];
        one_hot[e - 1] = 1.0;
        let hot: Vec<_> = (0..7).map(|_| bank_from_weights(one_hot.clone())).collect();
        let hot_loss = load_balance_loss(&hot).unwrap();
        assert_eq!(
            hot_loss,
            brute_balance(&hot.iter().map(|b| b.weights.clone()).collect::<Vec<_>>())
        );
        assert_eq!(hot_loss, 1.0 / e as f64);

        let balanced: Vec<_> = (0..2 * e)
            .map(|i| {
                let mut w = vec![0.0; e];
                w[i % e] = 1.0;
                bank_from_weights(w)
            })
            .collect();
        let got = load_balance_loss(&balanced).unwrap();
        assert!((got - 1.0 / (e * e) as f64).abs() < 1e-15);
    }
}

fn sg(m: Modality, sigma: Vec<f64>) -> SampleGaussian {
    SampleGaussian {
        modality: m,
        mu_tilde: vec![0.0; sigma.len()],
        sigma_tilde: sigma,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn load_balance_matches_enumeration(
        batch in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 6), 1..12),
    ) {
        let banks: Vec<_> = batch
            .iter()
            .map(|w| {
                let s: f64 = w.iter().sum::<f64>() + 1e-9;
                bank_from_weights(w.iter().map(|v| v / s).collect())
            })
            .collect();
        let weights: Vec<_> = banks.iter().map(|b| b.weights.clone()).collect();
        let got = load_balance_loss(&banks).unwrap();
        prop_assert!((got - brute_balance(&weights)).abs() < 1e-15);
    }

    #[test]
    fn constant_variance_routing_is_v_over_e(
        raw in prop::collection::vec(0.01f64..1.0, 6),
        v in 0.001f64..10.0,
    ) {
        let s: f64 = raw.iter().sum();
        let bank = bank_from_weights(raw.iter().map(|r| r / s).collect());
        let sgs: Vec<_> = Modality::ALL.iter().map(|&m| sg(m, vec![v.sqrt(); 4])).collect();
        let got = routing_uncertainty_loss(&bank, &sgs).unwrap();
        prop_assert!((got - v / 6.0).abs() <= 1e-10);
    }

    #[test]
    fn top_k_invariant_to_softmax_shift(
        logits in prop::collection::vec(-4.0f64..4.0, 4),
        shift in -50.0f64..50.0,
        k in 0usize..=4,
    ) {
        let soft = |l: &[f64]| {
            let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = l.iter().map(|v| (v - m).exp()).sum();
            l.iter().map(|v| (v - m).exp() / z).collect::<Vec<_>>()
        };
        let shifted: Vec<f64> = logits.iter().map(|v| v + shift).collect();
        let a = decision_from_scores(Modality::N, soft(&logits), k);
        let b = decision_from_scores(Modality::N, soft(&shifted), k);
        prop_assert_eq!(a.selected, b.selected);
    }
}
