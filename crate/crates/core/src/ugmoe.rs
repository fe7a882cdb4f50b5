//! Uncertainty-guided mixture of experts.
//!
//! Every modality owns `C` experts and a softmax gate over them. Each gate
//! donates its top-`k` experts to the other modalities, so a modality's
//! bank holds `C + k(M-1)` experts whose scores are renormalized into
//! mixture weights. A per-modality sample Gaussian `(mu~, sigma~)` supplies
//! the variance that the routing loss charges against the weight of every
//! bank entry, attributed to the entry's source modality.

use crate::error::{Error, Result};
use crate::modality::{Modality, NUM_MODALITIES};
use crate::numerics::{
    gaussian_kl, orthogonal, standard_normal, Matrix, ParamStore, RngStream, Tape, Var,
};

pub const SIGMA_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExpertInput {
    XTilde,
    MuTilde,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UgmoeConfig {
    pub d: usize,
    /// Experts per modality.
    pub c: usize,
    /// Experts each modality donates to every other modality.
    pub k: usize,
    pub expert_hidden: usize,
    pub expert_input: ExpertInput,
    /// Sample Gaussian, its KL and the routing loss; off gives a plain
    /// softmax top-k mixture.
    pub uncertainty: bool,
    /// Diagnostic multiplier on each modality's sigma~ as seen by the routing loss.
    pub routing_sigma_scale: [f64; NUM_MODALITIES],
}

impl Default for UgmoeConfig {
    fn default() -> Self {
        Self {
            d: 64,
            c: 4,
            k: 1,
            expert_hidden: 64,
            expert_input: ExpertInput::XTilde,
            uncertainty: true,
            routing_sigma_scale: [1.0; NUM_MODALITIES],
        }
    }
}

impl UgmoeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.c == 0 {
            return Err(Error::Config("ugmoe.C must be >= 1".into()));
        }
        if self.k > self.c {
            return Err(Error::Config(format!(
                "ugmoe.k ({}) cannot exceed ugmoe.C ({})",
                self.k, self.c
            )));
        }
        if self.expert_hidden == 0 {
            return Err(Error::Config("ugmoe.expert_hidden must be >= 1".into()));
        }
        Ok(())
    }

    pub fn bank_size(&self) -> usize {
        bank_size(self.c, self.k, NUM_MODALITIES)
    }
}

pub fn bank_size(c: usize, k: usize, m: usize) -> usize {
    c + k * (m - 1)
}

pub mod names {
    use super::Modality;

    pub fn mu_w(m: Modality) -> String {
        format!("ugmoe.{m}.mu.w")
    }
    pub fn mu_b(m: Modality) -> String {
        format!("ugmoe.{m}.mu.b")
    }
    pub fn sigma_w(m: Modality) -> String {
        format!("ugmoe.{m}.sigma.w")
    }
    pub fn sigma_b(m: Modality) -> String {
        format!("ugmoe.{m}.sigma.b")
    }
    pub fn gate_w(m: Modality) -> String {
        format!("ugmoe.{m}.gate.w")
    }
    pub fn gate_b(m: Modality) -> String {
        format!("ugmoe.{m}.gate.b")
    }
    pub fn expert(m: Modality, c: usize, part: &str) -> String {
        format!("ugmoe.{m}.expert.{c}.{part}")
    }
}

pub fn init_params(store: &mut ParamStore, cfg: &UgmoeConfig, rng: &mut RngStream) {
    let d = cfg.d;
    let h = cfg.expert_hidden;
    let lecun = (1.0 / d as f64).sqrt();
    for m in Modality::ALL {
        if cfg.uncertainty {
            store.insert(names::mu_w(m), orthogonal(d, d, 1.0, rng));
            store.insert(names::mu_b(m), Matrix::zeros(1, d));
            store.insert(names::sigma_w(m), standard_normal(d, d, rng).scale(lecun));
            store.insert(names::sigma_b(m), Matrix::zeros(1, d));
        }
        store.insert(names::gate_w(m), Matrix::zeros(d, cfg.c));
        store.insert(names::gate_b(m), Matrix::zeros(1, cfg.c));
        for c in 0..cfg.c {
            let w1 = orthogonal(d, h, 2f64.sqrt(), rng);
            // Tied second layer: E[w2 relu(w1 x)] is proportional to x at init.
            let w2 = w1.transpose().scale(2f64.sqrt());
            store.insert(names::expert(m, c, "w1"), w1);
            store.insert(names::expert(m, c, "b1"), Matrix::zeros(1, h));
            store.insert(names::expert(m, c, "w2"), w2);
            store.insert(names::expert(m, c, "b2"), Matrix::zeros(1, d));
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleGaussian {
    pub modality: Modality,
    pub mu_tilde: Vec<f64>,
    pub sigma_tilde: Vec<f64>,
}

impl SampleGaussian {
    pub fn mean_sq_sigma(&self) -> f64 {
        self.sigma_tilde.iter().map(|s| s * s).sum::<f64>() / self.sigma_tilde.len() as f64
    }

    /// One reparameterized draw `z = mu~ + eps * sigma~`; diagnostic only.
    pub fn draw(&self, rng: &mut RngStream) -> Result<Vec<f64>> {
        let mu = Matrix::row_vector(&self.mu_tilde);
        let sigma = Matrix::row_vector(&self.sigma_tilde);
        Ok(crate::numerics::reparameterize(&mu, &sigma, rng)?.into_vec())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GateDecision {
    pub modality: Modality,
    pub own_scores: Vec<f64>,
    pub selected: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ExpertRef {
    pub owner: Modality,
    pub index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BankEntry {
    pub expert: ExpertRef,
    pub raw_score: f64,
    pub source: Modality,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExpertBank {
    pub target: Modality,
    pub entries: Vec<BankEntry>,
    pub weights: Vec<f64>,
}

impl ExpertBank {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Index of the largest weight, lowest index on ties.
    pub fn argmax(&self) -> usize {
        argmax(&self.weights)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusedFeature {
    pub per_modality: [Vec<f64>; NUM_MODALITIES],
    pub concat: Vec<f64>,
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Indices of the `k` largest values, ties to the lowest index.
pub fn top_k(xs: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[b].total_cmp(&xs[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

// ---- tape builders -------------------------------------------------------

pub fn sample_gaussian_t(t: &mut Tape<'_>, x: Var, m: Modality) -> (Var, Var) {
    let w = t.param(&names::mu_w(m));
    let b = t.param(&names::mu_b(m));
    let mu = t.affine(x, w, b);
    let w = t.param(&names::sigma_w(m));
    let b = t.param(&names::sigma_b(m));
    let raw = t.affine(x, w, b);
    let sp = t.softplus(raw);
    (mu, t.clamp_min(sp, SIGMA_FLOOR))
}

/// Softmax gate scores, 1xC.
pub fn gate_t(t: &mut Tape<'_>, x: Var, m: Modality) -> Var {
    let w = t.param(&names::gate_w(m));
    let b = t.param(&names::gate_b(m));
    let logits = t.affine(x, w, b);
    t.softmax_rows(logits)
}

/// Bank layout for `target`: own experts first, then each other modality's
/// donated experts in canonical order.
pub fn bank_entries(
    target: Modality,
    own_scores: &[f64],
    decisions: &[GateDecision],
) -> Vec<BankEntry> {
    let mut entries: Vec<BankEntry> = own_scores
        .iter()
        .enumerate()
        .map(|(c, &s)| BankEntry {
            expert: ExpertRef {
                owner: target,
                index: c,
            },
            raw_score: s,
            source: target,
        })
        .collect();
    for donor in target.others() {
        let dec = &decisions[donor.index()];
        for &c in &dec.selected {
            entries.push(BankEntry {
                expert: ExpertRef {
                    owner: donor,
                    index: c,
                },
                raw_score: dec.own_scores[c],
                source: donor,
            });
        }
    }
    entries
}

/// Renormalized bank weights on the tape, 1xE.
pub fn bank_weights_t(
    t: &mut Tape<'_>,
    scores: &[Var; NUM_MODALITIES],
    decisions: &[GateDecision],
    target: Modality,
) -> Var {
    let mut parts = vec![scores[target.index()]];
    for donor in target.others() {
        let sel = &decisions[donor.index()].selected;
        if !sel.is_empty() {
            let at = sel.iter().map(|&c| (0, c)).collect();
            parts.push(t.gather(scores[donor.index()], at));
        }
    }
    let raw = t.concat_cols(&parts);
    let total = t.sum(raw);
    t.div_by(raw, total)
}

pub fn expert_t(t: &mut Tape<'_>, x: Var, e: ExpertRef) -> Var {
    let w1 = t.param(&names::expert(e.owner, e.index, "w1"));
    let b1 = t.param(&names::expert(e.owner, e.index, "b1"));
    let w2 = t.param(&names::expert(e.owner, e.index, "w2"));
    let b2 = t.param(&names::expert(e.owner, e.index, "b2"));
    let h = t.affine(x, w1, b1);
    let h = t.relu(h);
    t.affine(h, w2, b2)
}

/// `sum_c w_c E_c(x)`, 1xD.
pub fn mixture_t(t: &mut Tape<'_>, weights: Var, entries: &[BankEntry], x: Var) -> Var {
    let outs: Vec<Var> = entries.iter().map(|e| expert_t(t, x, e.expert)).collect();
    let stacked = t.concat_rows(&outs);
    t.matmul(weights, stacked)
}

/// `(1/E) sum_c mean(sigma~_src(c)^2) w_c`.
pub fn routing_loss_t(
    t: &mut Tape<'_>,
    weights: Var,
    entries: &[BankEntry],
    sigmas: &[Var; NUM_MODALITIES],
    scale: &[f64; NUM_MODALITIES],
) -> Var {
    let mut per_modality = Vec::with_capacity(NUM_MODALITIES);
    for m in Modality::ALL {
        let s = t.scale(sigmas[m.index()], scale[m.index()]);
        let sq = t.square(s);
        per_modality.push(t.mean(sq));
    }
    let v: Vec<Var> = entries
        .iter()
        .map(|e| per_modality[e.source.index()])
        .collect();
    let v = t.concat_cols(&v);
    let wv = t.mul(weights, v);
    let s = t.sum(wv);
    t.scale(s, 1.0 / entries.len() as f64)
}

/// Batch load-balance loss from a BxE stack of bank weights. The
/// assignment fractions are constants.
pub fn load_balance_t(t: &mut Tape<'_>, weights: Var) -> Var {
    let w = t.value(weights);
    let (b, e) = w.shape();
    let mut frac = Matrix::zeros(1, e);
    for r in 0..b {
        let c = argmax(w.row(r));
        frac.data_mut()[c] += 1.0 / b as f64;
    }
    let p = t.mean_rows(weights);
    let f = t.constant(frac);
    let fp = t.mul(f, p);
    let s = t.sum(fp);
    t.scale(s, 1.0 / e as f64)
}

// ---- value-level operations ----------------------------------------------

fn check_feature(x: &[f64], cfg: &UgmoeConfig) -> Result<()> {
    if x.len() != cfg.d {
        return Err(Error::Shape(format!(
            "feature length {} does not match D = {}",
            x.len(),
            cfg.d
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("non-finite feature".into()));
    }
    Ok(())
}

pub fn sample_gaussian(
    x_tilde: &crate::gpgr::ModalFeature,
    params: &ParamStore,
    cfg: &UgmoeConfig,
) -> Result<SampleGaussian> {
    check_feature(&x_tilde.x_tilde, cfg)?;
    let mut t = Tape::new(params);
    let x = t.constant(Matrix::row_vector(&x_tilde.x_tilde));
    let (mu, sigma) = sample_gaussian_t(&mut t, x, x_tilde.modality);
    Ok(SampleGaussian {
        modality: x_tilde.modality,
        mu_tilde: t.value(mu).data().to_vec(),
        sigma_tilde: t.value(sigma).data().to_vec(),
    })
}

pub fn sample_kl(sg: &SampleGaussian) -> Result<f64> {
    gaussian_kl(
        &Matrix::row_vector(&sg.mu_tilde),
        &Matrix::row_vector(&sg.sigma_tilde),
    )
}

pub fn gate(
    x_tilde: &crate::gpgr::ModalFeature,
    params: &ParamStore,
    cfg: &UgmoeConfig,
) -> Result<GateDecision> {
    check_feature(&x_tilde.x_tilde, cfg)?;
    let mut t = Tape::new(params);
    let x = t.constant(Matrix::row_vector(&x_tilde.x_tilde));
    let s = gate_t(&mut t, x, x_tilde.modality);
    let own_scores = t.value(s).data().to_vec();
    Ok(decision_from_scores(x_tilde.modality, own_scores, cfg.k))
}

pub fn decision_from_scores(modality: Modality, own_scores: Vec<f64>, k: usize) -> GateDecision {
    let selected = top_k(&own_scores, k);
    GateDecision {
        modality,
        own_scores,
        selected,
    }
}

pub fn assemble_bank(decisions: &[GateDecision], target: Modality) -> Result<ExpertBank> {
    if decisions.len() != NUM_MODALITIES
        || decisions
            .iter()
            .zip(Modality::ALL)
            .any(|(d, m)| d.modality != m)
    {
        return Err(Error::Shape(
            "need one gate decision per modality in R, N, T order".into(),
        ));
    }
    let entries = bank_entries(target, &decisions[target.index()].own_scores, decisions);
    let total: f64 = entries.iter().map(|e| e.raw_score).sum();
    let weights = entries.iter().map(|e| e.raw_score / total).collect();
    Ok(ExpertBank {
        target,
        entries,
        weights,
    })
}

pub fn mixture_forward(
    bank: &ExpertBank,
    x_tilde: &crate::gpgr::ModalFeature,
    params: &ParamStore,
    cfg: &UgmoeConfig,
) -> Result<Vec<f64>> {
    check_feature(&x_tilde.x_tilde, cfg)?;
    let mut t = Tape::new(params);
    let x = t.constant(Matrix::row_vector(&x_tilde.x_tilde));
    let w = t.constant(Matrix::row_vector(&bank.weights));
    let out = mixture_t(&mut t, w, &bank.entries, x);
    Ok(t.value(out).data().to_vec())
}

pub fn routing_uncertainty_loss(bank: &ExpertBank, sgs: &[SampleGaussian]) -> Result<f64> {
    if sgs.len() != NUM_MODALITIES {
        return Err(Error::Shape("need one sample Gaussian per modality".into()));
    }
    let e = bank.len() as f64;
    Ok(bank
        .entries
        .iter()
        .zip(&bank.weights)
        .map(|(entry, w)| sgs[entry.source.index()].mean_sq_sigma() * w)
        .sum::<f64>()
        / e)
}

pub fn load_balance_loss(banks: &[ExpertBank]) -> Result<f64> {
    let Some(first) = banks.first() else {
        return Err(Error::Shape("load balance needs a non-empty batch".into()));
    };
    let e = first.len();
    if banks.iter().any(|b| b.len() != e) {
        return Err(Error::Shape("banks in a batch must have equal size".into()));
    }
    let b = banks.len() as f64;
    let mut count = vec![0.0; e];
    let mut mass = vec![0.0; e];
    for bank in banks {
        count[bank.argmax()] += 1.0;
        for (m, w) in mass.iter_mut().zip(&bank.weights) {
            *m += w;
        }
    }
    Ok(count
        .iter()
        .zip(&mass)
        .map(|(c, p)| (c / b) * (p / b))
        .sum::<f64>()
        / e as f64)
}

/// Concatenates per-modality outputs in R, N, T order.
pub fn fuse(per_modality: &[(Modality, Vec<f64>)]) -> Result<FusedFeature> {
    let mut slots: [Option<Vec<f64>>; NUM_MODALITIES] = Default::default();
    for (m, v) in per_modality {
        slots[m.index()] = Some(v.clone());
    }
    let mut out: [Vec<f64>; NUM_MODALITIES] = Default::default();
    for m in Modality::ALL {
        out[m.index()] = slots[m.index()]
            .take()
            .ok_or_else(|| Error::Shape(format!("missing modality {m}")))?;
    }
    let concat = out.iter().flatten().copied().collect();
    Ok(FusedFeature {
        per_modality: out,
        concat,
    })
}
