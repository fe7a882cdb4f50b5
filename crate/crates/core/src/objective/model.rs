//! Per-variant forward pass: tokens to the fused `3D` feature.

use super::{TrainConfig, Variant};
use crate::dataio::Sample;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::gpgr::{self, GpgrConfig};
use crate::modality::{Modality, NUM_MODALITIES};
use crate::numerics::{
    gaussian_kl_var, orthogonal, seeded_rng, standard_normal, stream_id, Matrix, ParamStore,
    StreamKind, Tape, Var,
};
use crate::ugmoe::{self, BankEntry, ExpertBank, ExpertInput, UgmoeConfig};

pub mod names {
    use crate::modality::Modality;

    pub fn base_w(m: Modality) -> String {
        format!("base.{m}.w")
    }
    pub fn base_b(m: Modality) -> String {
        format!("base.{m}.b")
    }
    pub const HEAD_W: &str = "head.w";
    pub const HEAD_B: &str = "head.b";
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub variant: Variant,
    pub gpgr: GpgrConfig,
    pub ugmoe: UgmoeConfig,
    pub d: usize,
    pub n: usize,
    pub num_classes: usize,
}

/// Tape handles of one sample's forward pass.
pub struct SampleVars {
    /// Fused feature, `1 x 3D`.
    pub z: Var,
    /// Bank weights per target modality, `1 x E`.
    pub weights: [Option<Var>; NUM_MODALITIES],
    /// Bank layout per target modality; empty without a mixture.
    pub entries: [Vec<BankEntry>; NUM_MODALITIES],
    pub kl_cs: [Option<Var>; NUM_MODALITIES],
    pub routing: [Option<Var>; NUM_MODALITIES],
}

impl Model {
    pub fn new(cfg: &TrainConfig, num_classes: usize) -> Result<Self> {
        cfg.validate()?;
        if num_classes == 0 {
            return Err(Error::Config("no training identities".into()));
        }
        Ok(Self {
            variant: cfg.variant,
            gpgr: cfg.gpgr(),
            ugmoe: cfg.ugmoe(),
            d: cfg.d,
            n: cfg.n,
            num_classes,
        })
    }

    pub fn feature_dim(&self) -> usize {
        NUM_MODALITIES * self.d
    }

    /// Parameters used by this variant only, drawn from the init stream.
    pub fn init_params(&self, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        let d = self.d;
        if self.variant.has_graph() {
            let mut rng = seeded_rng(seed, stream_id(StreamKind::Init, &[1]));
            gpgr::init_params(&mut store, &self.gpgr, &mut rng);
        } else {
            let mut rng = seeded_rng(seed, stream_id(StreamKind::Init, &[0]));
            for m in Modality::ALL {
                store.insert(names::base_w(m), orthogonal(d, d, 1.0, &mut rng));
                store.insert(names::base_b(m), Matrix::zeros(1, d));
            }
        }
        if self.variant.has_moe() {
            let mut rng = seeded_rng(seed, stream_id(StreamKind::Init, &[2]));
            ugmoe::init_params(&mut store, &self.ugmoe, &mut rng);
        }
        let mut rng = seeded_rng(seed, stream_id(StreamKind::Init, &[3]));
        let f = self.feature_dim();
        store.insert(
            names::HEAD_W,
            standard_normal(f, self.num_classes, &mut rng).scale((1.0 / f as f64).sqrt()),
        );
        store.insert(names::HEAD_B, Matrix::zeros(1, self.num_classes));
        store
    }

    pub fn check_sample(&self, s: &Sample) -> Result<()> {
        for t in &s.tokens {
            if t.shape() != (self.n + 1, self.d) {
                return Err(Error::Shape(format!(
                    "sample {}: tokens {:?}, model expects {:?}",
                    s.id,
                    t.shape(),
                    (self.n + 1, self.d)
                )));
            }
        }
        Ok(())
    }

    /// Pinned reparameterization draws for the patch-graph nodes, or `None`
    /// when this variant has no Gaussian nodes.
    pub fn reparam_noise(
        &self,
        seed: u64,
        step: u64,
        slot: u64,
    ) -> Option<[Matrix; NUM_MODALITIES]> {
        if !self.variant.has_graph_uncertainty() {
            return None;
        }
        Some(Modality::ALL.map(|m| {
            let mut rng = seeded_rng(
                seed,
                stream_id(StreamKind::Reparam, &[step, slot, m as u64]),
            );
            standard_normal(self.n + 1, self.d, &mut rng)
        }))
    }

    /// Records one sample's forward pass. `noise = None` is eval mode.
    pub fn forward_t(
        &self,
        t: &mut Tape<'_>,
        sample: &Sample,
        noise: Option<[Matrix; NUM_MODALITIES]>,
    ) -> SampleVars {
        let mut noise = noise.map(|n| n.map(Some));
        let mut kl_cs: [Option<Var>; NUM_MODALITIES] = [None; NUM_MODALITIES];
        let x_tilde: [Var; NUM_MODALITIES] = Modality::ALL.map(|m| {
            let tokens = t.constant(sample.tokens[m.index()].clone());
            if self.variant.has_graph() {
                let eps = noise.as_mut().and_then(|n| n[m.index()].take());
                let out = gpgr::forward_t(t, tokens, m, &self.gpgr, eps);
                kl_cs[m.index()] = out.class_kl;
                out.x_tilde
            } else {
                let class = t.slice_rows(tokens, 0, 1);
                let w = t.param(&names::base_w(m));
                let b = t.param(&names::base_b(m));
                t.affine(class, w, b)
            }
        });
        let mut weights = [None; NUM_MODALITIES];
        let mut routing = [None; NUM_MODALITIES];
        if !self.variant.has_moe() {
            let z = t.concat_cols(&x_tilde);
            return SampleVars {
                z,
                weights,
                entries: Default::default(),
                kl_cs,
                routing,
            };
        }

        let cfg = &self.ugmoe;
        let mut expert_in = x_tilde;
        let mut sigmas = None;
        if cfg.uncertainty {
            let mut s = x_tilde;
            for m in Modality::ALL {
                let (mu, sigma) = ugmoe::sample_gaussian_t(t, x_tilde[m.index()], m);
                let ls = gaussian_kl_var(t, mu, sigma);
                kl_cs[m.index()] = Some(match kl_cs[m.index()] {
                    Some(lc) => t.add(lc, ls),
                    None => ls,
                });
                if cfg.expert_input == ExpertInput::MuTilde {
                    expert_in[m.index()] = mu;
                }
                s[m.index()] = sigma;
            }
            sigmas = Some(s);
        }
        let scores = Modality::ALL.map(|m| ugmoe::gate_t(t, x_tilde[m.index()], m));
        let decisions: Vec<_> = Modality::ALL
            .iter()
            .map(|&m| {
                ugmoe::decision_from_scores(m, t.value(scores[m.index()]).data().to_vec(), cfg.k)
            })
            .collect();
        let mut bank_entries: [Vec<BankEntry>; NUM_MODALITIES] = Default::default();
        let fused = Modality::ALL.map(|m| {
            let entries = ugmoe::bank_entries(m, &decisions[m.index()].own_scores, &decisions);
            let w = ugmoe::bank_weights_t(t, &scores, &decisions, m);
            weights[m.index()] = Some(w);
            if let Some(s) = &sigmas {
                routing[m.index()] = Some(ugmoe::routing_loss_t(
                    t,
                    w,
                    &entries,
                    s,
                    &cfg.routing_sigma_scale,
                ));
            }
            let out = ugmoe::mixture_t(t, w, &entries, expert_in[m.index()]);
            bank_entries[m.index()] = entries;
            out
        });
        let z = t.concat_cols(&fused);
        SampleVars {
            z,
            weights,
            entries: bank_entries,
            kl_cs,
            routing,
        }
    }

    /// Eval-mode fused feature of one sample.
    pub fn embed(&self, params: &ParamStore, sample: &Sample) -> Result<Vec<f64>> {
        self.check_sample(sample)?;
        let mut t = Tape::new(params);
        let v = self.forward_t(&mut t, sample, None);
        Ok(t.value(v.z).data().to_vec())
    }

    /// Eval-mode expert banks of one sample in R, N, T order; empty for
    /// variants without a mixture.
    pub fn banks(&self, params: &ParamStore, sample: &Sample) -> Result<Vec<ExpertBank>> {
        self.check_sample(sample)?;
        let mut t = Tape::new(params);
        let v = self.forward_t(&mut t, sample, None);
        Ok(Modality::ALL
            .iter()
            .zip(v.entries)
            .filter_map(|(&m, entries)| {
                let w = v.weights[m.index()]?;
                Some(ExpertBank {
                    target: m,
                    entries,
                    weights: t.value(w).data().to_vec(),
                })
            })
            .collect())
    }

    pub fn embed_all<'a>(
        &self,
        params: &ParamStore,
        samples: &[&'a Sample],
        exec: Exec,
    ) -> Result<Vec<Vec<f64>>> {
        exec.map(samples, |s| self.embed(params, s))
            .into_iter()
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{generate, SyntheticSpec};

    fn tiny_cfg(variant: Variant) -> TrainConfig {
        TrainConfig {
            variant,
            d: 4,
            n: 3,
            experts: 3,
            ..TrainConfig::default()
        }
    }

    fn tiny_data() -> crate::dataio::Dataset {
        generate(&SyntheticSpec {
            num_identities: 2,
            instances_per_identity: 2,
            d: 4,
            n: 3,
            ..SyntheticSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn parameter_sets_follow_variant() {
        let has = |v: Variant, name: &str| {
            Model::new(&tiny_cfg(v), 5)
                .unwrap()
                .init_params(0)
                .contains(name)
        };
        assert!(has(Variant::A, "base.R.w"));
        assert!(!has(Variant::A, "ugmoe.R.gate.w"));
        assert!(has(Variant::B, "ugmoe.R.gate.w"));
        assert!(!has(Variant::B, "ugmoe.R.sigma.w"));
        assert!(has(Variant::C, "ugmoe.R.sigma.w"));
        assert!(!has(Variant::C, "gpgr.fc_mu.w"));
        assert!(has(Variant::D, "gpgr.fc_mu.w"));
        assert!(!has(Variant::D, "gpgr.phi"));
        assert!(!has(Variant::D, "base.R.w"));
        assert!(has(Variant::E, "gpgr.phi"));
        assert!(has(Variant::E, "head.w"));
    }

    #[test]
    fn embedding_shape_and_determinism() {
        let ds = tiny_data();
        for v in Variant::ALL {
            let model = Model::new(&tiny_cfg(v), 2).unwrap();
            let p = model.init_params(1);
            let a = model.embed(&p, &ds.samples[0]).unwrap();
            assert_eq!(a.len(), 12);
            assert_eq!(a, model.embed(&p, &ds.samples[0]).unwrap());
            assert!(a.iter().all(|x| x.is_finite()));
        }
    }

    #[test]
    fn wrong_token_shape_rejected() {
        let model = Model::new(&tiny_cfg(Variant::E), 2).unwrap();
        let mut s = tiny_data().samples[0].clone();
        s.tokens[1] = Matrix::zeros(2, 4);
        assert!(matches!(
            model.embed(&model.init_params(0), &s),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn terms_present_per_variant() {
        let ds = tiny_data();
        for v in Variant::ALL {
            let model = Model::new(&tiny_cfg(v), 2).unwrap();
            let p = model.init_params(0);
            let mut t = Tape::new(&p);
            let noise = model.reparam_noise(0, 0, 0);
            let sv = model.forward_t(&mut t, &ds.samples[0], noise);
            assert_eq!(sv.weights[0].is_some(), v.has_moe());
            assert_eq!(sv.routing[2].is_some(), v.has_moe_uncertainty());
            assert_eq!(sv.kl_cs[1].is_some(), v.has_moe_uncertainty());
            if let Some(w) = sv.weights[0] {
                assert_eq!(t.value(w).cols(), 5);
                assert!((t.value(w).sum() - 1.0).abs() < 1e-12);
            }
        }
    }
}
