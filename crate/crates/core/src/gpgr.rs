//! Gaussian patch-graph representation.
//!
//! Each modality's tokens (one class token followed by `n` local tokens)
//! are projected to Gaussian nodes `(mu, sigma)`. A patch graph is built
//! from the node means, a dual-channel graph convolution propagates means
//! and standard deviations over it, node features are sampled with the
//! reparameterization trick, and the class row plus pooled local rows are
//! mapped to a single per-modality embedding.

use crate::error::{Error, Result};
use crate::modality::Modality;
use crate::numerics::{
    gaussian_kl_var, reparameterize_var, standard_normal, Matrix, ParamStore, RngStream, Tape, Var,
};

/// Lower bound applied to every standard deviation.
pub const SIGMA_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct PatchFeatureSet {
    pub modality: Modality,
    /// Row 0 is the class token, rows `1..=n` the local tokens.
    pub tokens: Matrix,
}

impl PatchFeatureSet {
    pub fn new(modality: Modality, tokens: Matrix) -> Result<Self> {
        if tokens.rows() < 1 {
            return Err(Error::Shape("patch feature set needs a class token".into()));
        }
        if !tokens.is_finite() {
            return Err(Error::Domain("non-finite token".into()));
        }
        Ok(Self { modality, tokens })
    }

    /// Number of local tokens.
    pub fn n(&self) -> usize {
        self.tokens.rows() - 1
    }

    pub fn d(&self) -> usize {
        self.tokens.cols()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianNodeSet {
    pub mu: Matrix,
    pub sigma: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchGraph {
    pub adjacency: Matrix,
    pub degree: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pooling {
    Mean,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleMode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModalFeature {
    pub modality: Modality,
    pub x_tilde: Vec<f64>,
}

/// Structural hyperparameters of the patch-graph branch.
#[derive(Clone, Debug, PartialEq)]
pub struct GpgrConfig {
    pub d: usize,
    pub layers: usize,
    /// Heat-kernel temperature; `None` uses the lower median of the
    /// pairwise squared distances of each graph.
    pub tau: Option<f64>,
    /// Keep only each row's `knn` strongest neighbours.
    pub knn: Option<usize>,
    pub pooling: Pooling,
    /// Share the mean/std projections across modalities.
    pub shared_fc: bool,
    /// Gaussian nodes; when false the std channel, sampling and the
    /// class-token KL are dropped.
    pub uncertainty: bool,
}

impl Default for GpgrConfig {
    fn default() -> Self {
        Self {
            d: 64,
            layers: 2,
            tau: None,
            knn: None,
            pooling: Pooling::Mean,
            shared_fc: true,
            uncertainty: true,
        }
    }
}

impl GpgrConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("gpgr.L must be >= 1".into()));
        }
        if self.d == 0 {
            return Err(Error::Config("model.D must be >= 1".into()));
        }
        if let Some(t) = self.tau {
            if !(t > 0.0) {
                return Err(Error::Config(format!("gpgr.tau must be > 0, got {t}")));
            }
        }
        if self.knn == Some(0) {
            return Err(Error::Config("gpgr.knn must be >= 1".into()));
        }
        Ok(())
    }

    fn fc_prefix(&self, m: Modality) -> String {
        if self.shared_fc {
            "gpgr".to_string()
        } else {
            format!("gpgr.{m}")
        }
    }
}

pub mod names {
    use super::*;

    pub fn fc_mu_w(cfg: &GpgrConfig, m: Modality) -> String {
        format!("{}.fc_mu.w", cfg.fc_prefix(m))
    }
    pub fn fc_mu_b(cfg: &GpgrConfig, m: Modality) -> String {
        format!("{}.fc_mu.b", cfg.fc_prefix(m))
    }
    pub fn fc_sigma_w(cfg: &GpgrConfig, m: Modality) -> String {
        format!("{}.fc_sigma.w", cfg.fc_prefix(m))
    }
    pub fn fc_sigma_b(cfg: &GpgrConfig, m: Modality) -> String {
        format!("{}.fc_sigma.b", cfg.fc_prefix(m))
    }
    pub fn w_mu(m: Modality, l: usize) -> String {
        format!("gpgr.{m}.w_mu.{l}")
    }
    pub fn w_sigma(m: Modality, l: usize) -> String {
        format!("gpgr.{m}.w_sigma.{l}")
    }
    pub fn fuse(m: Modality) -> String {
        format!("gpgr.{m}.fuse.w")
    }
    pub const PHI: &str = "gpgr.phi";
}

/// Unconstrained value whose softplus is 1.
pub const PHI_RAW_ONE: f64 = 0.541_324_854_612_918_1;

/// Adds every patch-graph parameter to `store`.
pub fn init_params(store: &mut ParamStore, cfg: &GpgrConfig, rng: &mut RngStream) {
    let d = cfg.d;
    let lecun = (1.0 / d as f64).sqrt();
    let he = (2.0 / d as f64).sqrt();
    for m in Modality::ALL {
        if !store.contains(&names::fc_mu_w(cfg, m)) {
            store.insert(
                names::fc_mu_w(cfg, m),
                standard_normal(d, d, rng).scale(lecun),
            );
            store.insert(names::fc_mu_b(cfg, m), Matrix::zeros(1, d));
            if cfg.uncertainty {
                store.insert(
                    names::fc_sigma_w(cfg, m),
                    standard_normal(d, d, rng).scale(lecun),
                );
                store.insert(names::fc_sigma_b(cfg, m), Matrix::zeros(1, d));
            }
        }
    }
    if cfg.uncertainty {
        store.insert(names::PHI, Matrix::scalar(PHI_RAW_ONE));
    }
    for m in Modality::ALL {
        for l in 0..cfg.layers {
            store.insert(names::w_mu(m, l), standard_normal(d, d, rng).scale(he));
            if cfg.uncertainty {
                store.insert(names::w_sigma(m, l), standard_normal(d, d, rng).scale(he));
            }
        }
        store.insert(
            names::fuse(m),
            standard_normal(2 * d, d, rng).scale((1.0 / (2 * d) as f64).sqrt()),
        );
    }
}

/// Graph-side handles produced by [`build_graph_t`].
pub struct GraphVars {
    pub adjacency: Var,
    pub normalized: Var,
}

/// Per-modality tape outputs of the patch-graph branch.
pub struct GpgrOutput {
    pub x_tilde: Var,
    /// Class-token KL; `None` without Gaussian nodes.
    pub class_kl: Option<Var>,
}

pub fn phi_t(t: &mut Tape<'_>) -> Var {
    let raw = t.param(names::PHI);
    t.softplus(raw)
}

/// Squashes a std-channel pre-activation into `(0, phi]`.
fn squash_t(t: &mut Tape<'_>, pre: Var, phi: Var) -> Var {
    let s = t.sigmoid(pre);
    let s = t.scale_by(s, phi);
    t.clamp_min(s, SIGMA_FLOOR)
}

/// Mean and (optionally) std projections of the tokens.
pub fn project_t(
    t: &mut Tape<'_>,
    tokens: Var,
    m: Modality,
    cfg: &GpgrConfig,
) -> (Var, Option<Var>) {
    let w = t.param(&names::fc_mu_w(cfg, m));
    let b = t.param(&names::fc_mu_b(cfg, m));
    let mu = t.affine(tokens, w, b);
    if !cfg.uncertainty {
        return (mu, None);
    }
    let w = t.param(&names::fc_sigma_w(cfg, m));
    let b = t.param(&names::fc_sigma_b(cfg, m));
    let raw = t.affine(tokens, w, b);
    let phi = phi_t(t);
    (mu, Some(squash_t(t, raw, phi)))
}

/// Lower median of the strict upper triangle; `None` for a single node.
fn median_pair(d2: &Matrix) -> Option<(usize, usize)> {
    let n = d2.rows();
    let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            pairs.push((d2.get(i, j), i, j));
        }
    }
    if pairs.is_empty() {
        return None;
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let (_, i, j) = pairs[(pairs.len() - 1) / 2];
    Some((i, j))
}

/// Mask keeping each row's `k` strongest off-diagonal entries, symmetrized
/// by union, with the diagonal always kept.
fn knn_mask(adj: &Matrix, k: usize) -> Matrix {
    let n = adj.rows();
    let mut mask = Matrix::identity(n);
    for i in 0..n {
        let mut order: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        order.sort_by(|&a, &b| adj.get(i, b).total_cmp(&adj.get(i, a)).then(a.cmp(&b)));
        for &j in order.iter().take(k) {
            mask.set(i, j, 1.0);
            mask.set(j, i, 1.0);
        }
    }
    mask
}

/// Heat-kernel patch graph over node means and its symmetric normalization.
pub fn build_graph_t(t: &mut Tape<'_>, mu: Var, cfg: &GpgrConfig) -> GraphVars {
    let d2 = t.pairwise_sq_dist(mu);
    let scaled = match cfg.tau {
        Some(tau) => t.scale(d2, -1.0 / tau),
        None => {
            let pair = median_pair(t.value(d2));
            match pair {
                Some((i, j)) if t.value(d2).get(i, j) > 0.0 => {
                    let tau = t.gather(d2, vec![(i, j)]);
                    let q = t.div_by(d2, tau);
                    t.scale(q, -1.0)
                }
                _ => t.scale(d2, -1.0),
            }
        }
    };
    let mut adjacency = t.exp(scaled);
    if let Some(k) = cfg.knn {
        let mask = knn_mask(t.value(adjacency), k);
        let mask = t.constant(mask);
        adjacency = t.mul(adjacency, mask);
    }
    let normalized = normalize_t(t, adjacency);
    GraphVars {
        adjacency,
        normalized,
    }
}

/// `D^{-1/2} A D^{-1/2}`.
pub fn normalize_t(t: &mut Tape<'_>, adjacency: Var) -> Var {
    let deg = t.row_sum(adjacency);
    let s = t.powf(deg, -0.5);
    let st = t.transpose(s);
    let outer = t.matmul(s, st);
    t.mul(adjacency, outer)
}

/// Dual-channel graph convolution. Hidden layers use ReLU on both channels;
/// the last std layer is squashed into `(0, phi]`.
pub fn gpgcn_t(
    t: &mut Tape<'_>,
    normalized: Var,
    mu: Var,
    sigma: Option<Var>,
    m: Modality,
    cfg: &GpgrConfig,
) -> (Var, Option<Var>) {
    let mut mu = mu;
    let mut sigma = sigma;
    let phi = sigma.map(|_| phi_t(t));
    for l in 0..cfg.layers {
        let w = t.param(&names::w_mu(m, l));
        let prop = t.matmul(normalized, mu);
        let pre = t.matmul(prop, w);
        mu = t.relu(pre);
        if let Some(s) = sigma {
            let w = t.param(&names::w_sigma(m, l));
            let prop = t.matmul(normalized, s);
            let pre = t.matmul(prop, w);
            sigma = Some(if l + 1 == cfg.layers {
                squash_t(t, pre, phi.expect("phi"))
            } else {
                t.relu(pre)
            });
        }
    }
    (mu, sigma)
}

/// Class row concatenated with pooled local rows, times the fusion matrix.
pub fn aggregate_t(t: &mut Tape<'_>, x: Var, m: Modality, cfg: &GpgrConfig) -> Var {
    let n = t.value(x).rows();
    let class = t.slice_rows(x, 0, 1);
    let locals = t.slice_rows(x, 1, n);
    let pooled = match cfg.pooling {
        Pooling::Mean => t.mean_rows(locals),
        Pooling::Max => t.max_rows(locals),
    };
    let cat = t.concat_cols(&[class, pooled]);
    let w = t.param(&names::fuse(m));
    t.matmul(cat, w)
}

pub fn class_kl_t(t: &mut Tape<'_>, mu: Var, sigma: Var) -> Var {
    let mc = t.slice_rows(mu, 0, 1);
    let sc = t.slice_rows(sigma, 0, 1);
    gaussian_kl_var(t, mc, sc)
}

/// Full branch for one modality. `noise` pins the reparameterization draw
/// (shape `N x D`); `None` means eval mode.
pub fn forward_t(
    t: &mut Tape<'_>,
    tokens: Var,
    m: Modality,
    cfg: &GpgrConfig,
    noise: Option<Matrix>,
) -> GpgrOutput {
    let (mu, sigma) = project_t(t, tokens, m, cfg);
    let class_kl = sigma.map(|s| class_kl_t(t, mu, s));
    let graph = build_graph_t(t, mu, cfg);
    let (mu_hat, sigma_hat) = gpgcn_t(t, graph.normalized, mu, sigma, m, cfg);
    let x = match (sigma_hat, noise) {
        (Some(s), Some(eps)) => reparameterize_var(t, mu_hat, s, eps),
        _ => mu_hat,
    };
    let x_tilde = aggregate_t(t, x, m, cfg);
    GpgrOutput { x_tilde, class_kl }
}

fn check_dims(tokens: &Matrix, cfg: &GpgrConfig) -> Result<()> {
    if tokens.cols() != cfg.d {
        return Err(Error::Shape(format!(
            "token width {} does not match D = {}",
            tokens.cols(),
            cfg.d
        )));
    }
    Ok(())
}

pub fn project_gaussian_nodes(
    feats: &PatchFeatureSet,
    params: &ParamStore,
    cfg: &GpgrConfig,
) -> Result<GaussianNodeSet> {
    check_dims(&feats.tokens, cfg)?;
    let mut t = Tape::new(params);
    let x = t.constant(feats.tokens.clone());
    let (mu, sigma) = project_t(&mut t, x, feats.modality, cfg);
    let mu_v = t.value(mu).clone();
    let sigma_v = match sigma {
        Some(s) => t.value(s).clone(),
        None => Matrix::zeros(mu_v.rows(), mu_v.cols()),
    };
    Ok(GaussianNodeSet {
        mu: mu_v,
        sigma: sigma_v,
    })
}

pub fn build_patch_graph(nodes: &GaussianNodeSet, cfg: &GpgrConfig) -> Result<PatchGraph> {
    if let Some(tau) = cfg.tau {
        if !(tau > 0.0) {
            return Err(Error::Config(format!("tau must be > 0, got {tau}")));
        }
    }
    let mut t = Tape::detached();
    let mu = t.constant(nodes.mu.clone());
    let g = build_graph_t(&mut t, mu, cfg);
    let adjacency = t.value(g.adjacency).clone();
    let degree = (0..adjacency.rows())
        .map(|r| adjacency.row(r).iter().sum())
        .collect();
    Ok(PatchGraph { adjacency, degree })
}

pub fn gpgcn_forward(
    nodes: &GaussianNodeSet,
    graph: &PatchGraph,
    params: &ParamStore,
    cfg: &GpgrConfig,
    m: Modality,
) -> Result<GaussianNodeSet> {
    nodes.mu.check_same_shape(&nodes.sigma, "gaussian nodes")?;
    if graph.adjacency.rows() != nodes.mu.rows() {
        return Err(Error::Shape("graph size does not match node count".into()));
    }
    if graph.degree.iter().any(|&d| !(d > 0.0)) {
        return Err(Error::Domain("zero-degree node in patch graph".into()));
    }
    let mut t = Tape::new(params);
    let a = t.constant(graph.adjacency.clone());
    let norm = normalize_t(&mut t, a);
    let mu = t.constant(nodes.mu.clone());
    let sigma = cfg.uncertainty.then(|| t.constant(nodes.sigma.clone()));
    let (mu, sigma) = gpgcn_t(&mut t, norm, mu, sigma, m, cfg);
    let mu_v = t.value(mu).clone();
    let sigma_v = match sigma {
        Some(s) => t.value(s).clone(),
        None => Matrix::zeros(mu_v.rows(), mu_v.cols()),
    };
    Ok(GaussianNodeSet {
        mu: mu_v,
        sigma: sigma_v,
    })
}

pub fn sample_nodes(
    nodes: &GaussianNodeSet,
    mode: SampleMode,
    rng: &mut RngStream,
) -> Result<Matrix> {
    match mode {
        SampleMode::Eval => Ok(nodes.mu.clone()),
        SampleMode::Train => crate::numerics::reparameterize(&nodes.mu, &nodes.sigma, rng),
    }
}

pub fn aggregate_global(
    sampled: &Matrix,
    params: &ParamStore,
    cfg: &GpgrConfig,
    m: Modality,
) -> Result<ModalFeature> {
    if sampled.rows() < 2 {
        return Err(Error::Shape(format!(
            "aggregation needs at least one local row, got N = {}",
            sampled.rows()
        )));
    }
    check_dims(sampled, cfg)?;
    let mut t = Tape::new(params);
    let x = t.constant(sampled.clone());
    let out = aggregate_t(&mut t, x, m, cfg);
    Ok(ModalFeature {
        modality: m,
        x_tilde: t.value(out).data().to_vec(),
    })
}

pub fn class_token_kl(nodes: &GaussianNodeSet) -> Result<f64> {
    crate::numerics::gaussian_kl(&nodes.mu.slice_rows(0, 1), &nodes.sigma.slice_rows(0, 1))
}

/// Eval-mode branch end to end.
pub fn modal_feature(
    feats: &PatchFeatureSet,
    params: &ParamStore,
    cfg: &GpgrConfig,
) -> Result<ModalFeature> {
    check_dims(&feats.tokens, cfg)?;
    if feats.tokens.rows() < 2 {
        return Err(Error::Shape(
            "aggregation needs at least one local row".into(),
        ));
    }
    let mut t = Tape::new(params);
    let x = t.constant(feats.tokens.clone());
    let out = forward_t(&mut t, x, feats.modality, cfg, None);
    Ok(ModalFeature {
        modality: feats.modality,
        x_tilde: t.value(out.x_tilde).data().to_vec(),
    })
}
