//! Central-difference certification of analytic gradients.

use super::matrix::Matrix;
use super::params::{Grads, ParamStore};
use super::rng::{seeded_rng, stream_id, StreamKind};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Matrices above this many entries are probed on a seeded subsample.
pub const FULL_PROBE_LIMIT: usize = 10_000;
pub const SUBSAMPLE: usize = 200;

#[derive(Clone, Debug)]
pub struct GradReport {
    pub parameter: String,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub max_relative_error: f64,
    /// Probes found within `h` of a kink and re-certified at `h / 10`.
    pub kinks: usize,
    pub pass: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: DEFAULT_STEP,
            tolerance: DEFAULT_TOLERANCE,
            seed: 0,
        }
    }
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

/// Entry indices probed for one matrix.
pub fn probe_indices(len: usize, seed: u64, param_index: usize) -> Vec<usize> {
    if len <= FULL_PROBE_LIMIT {
        return (0..len).collect();
    }
    let mut rng = seeded_rng(seed, stream_id(StreamKind::Probe, &[param_index as u64]));
    let mut idx: Vec<usize> = (0..len).collect();
    rng.shuffle(&mut idx);
    idx.truncate(SUBSAMPLE);
    idx.sort_unstable();
    idx
}

/// A probe that fails at `h` is attributed to a kink inside `[-h, h]` only
/// when the one-sided slopes at `h` disagree with each other, while at
/// `h / 10` they agree and the central difference matches `analytic`.
/// Roundoff-limited probes and wrong gradients fail both ways.
fn kink_within_step(
    f0: f64,
    (fp, fm): (f64, f64),
    (sp, sm): (f64, f64),
    analytic: f64,
    cfg: &GradCheckConfig,
) -> bool {
    let h = cfg.step;
    if relative_error((fp - f0) / h, (f0 - fm) / h) <= cfg.tolerance {
        return false;
    }
    let hs = h / 10.0;
    let (fwd, bwd) = ((sp - f0) / hs, (f0 - sm) / hs);
    [sp, sm].iter().all(|v| v.is_finite())
        && relative_error(fwd, bwd) <= cfg.tolerance
        && relative_error(analytic, (sp - sm) / (2.0 * hs)) <= cfg.tolerance
}

/// Compares `analytic` against central differences of `loss` for every
/// parameter in `params`. Any non-finite probe marks that parameter failed.
pub fn grad_check<F>(
    loss: F,
    params: &ParamStore,
    analytic: &Grads,
    cfg: GradCheckConfig,
) -> Vec<GradReport>
where
    F: Fn(&ParamStore) -> f64,
{
    let mut work = params.clone();
    let mut reports = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let len = params.value(p).len();
        let idx = probe_indices(len, cfg.seed, p);
        let mut a_vec = Vec::with_capacity(idx.len());
        let mut n_vec = Vec::with_capacity(idx.len());
        let mut worst: f64 = 0.0;
        let mut finite = true;
        let mut kinks = 0;
        let mut f0 = None;
        for &k in &idx {
            let orig = params.value(p).data()[k];
            work.value_mut(p).data_mut()[k] = orig + cfg.step;
            let fp = loss(&work);
            work.value_mut(p).data_mut()[k] = orig - cfg.step;
            let fm = loss(&work);
            work.value_mut(p).data_mut()[k] = orig;
            let num = (fp - fm) / (2.0 * cfg.step);
            let ana = analytic.get(p).data()[k];
            if !num.is_finite() || !ana.is_finite() {
                finite = false;
                worst = f64::INFINITY;
            } else {
                let mut err = relative_error(ana, num);
                if err > cfg.tolerance {
                    let base = *f0.get_or_insert_with(|| loss(params));
                    let hs = cfg.step / 10.0;
                    work.value_mut(p).data_mut()[k] = orig + hs;
                    let sp = loss(&work);
                    work.value_mut(p).data_mut()[k] = orig - hs;
                    let sm = loss(&work);
                    work.value_mut(p).data_mut()[k] = orig;
                    if kink_within_step(base, (fp, fm), (sp, sm), ana, &cfg) {
                        kinks += 1;
                        err = relative_error(ana, (sp - sm) / (2.0 * hs));
                    }
                }
                worst = worst.max(err);
            }
            a_vec.push(ana);
            n_vec.push(num);
        }
        reports.push(GradReport {
            parameter: params.name(p).to_string(),
            analytic: a_vec,
            numeric: n_vec,
            max_relative_error: worst,
            kinks,
            pass: finite && worst <= cfg.tolerance,
        });
    }
    reports
}

/// Convenience for a single free matrix: wraps it in a store named `theta`.
pub fn grad_check_matrix<F, G>(f: F, grad: G, theta: &Matrix, cfg: GradCheckConfig) -> GradReport
where
    F: Fn(&Matrix) -> f64,
    G: Fn(&Matrix) -> Matrix,
{
    let mut store = ParamStore::new();
    store.insert("theta", theta.clone());
    let mut g = store.zeros_like();
    *g.get_mut(0) = grad(theta);
    let mut r = grad_check(|ps| f(ps.value(0)), &store, &g, cfg);
    r.remove(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let theta = Matrix::scalar(3.0);
        let r = grad_check_matrix(
            |t| t.item() * t.item(),
            |t| Matrix::scalar(2.0 * t.item()),
            &theta,
            GradCheckConfig::default(),
        );
        assert!(r.pass);
        assert!((r.numeric[0] - 6.0).abs() < 1e-6);
        assert_eq!(r.analytic[0], 6.0);
    }

    #[test]
    fn relu_linear_region() {
        let theta = Matrix::row_vector(&[0.5, 1.0, 2.0, 0.01]);
        let r = grad_check_matrix(
            |t| t.data().iter().map(|v| v.max(0.0)).sum(),
            |t| t.map(|v| if v > 0.0 { 1.0 } else { 0.0 }),
            &theta,
            GradCheckConfig::default(),
        );
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn kink_inside_step_is_reprobed() {
        // |t - 3e-6| has its kink within h = 1e-5 of t = 0.
        let theta = Matrix::scalar(0.0);
        let r = grad_check_matrix(
            |t| (t.item() - 3e-6).abs(),
            |_| Matrix::scalar(-1.0),
            &theta,
            GradCheckConfig::default(),
        );
        assert!(r.pass, "{r:?}");
        assert_eq!(r.kinks, 1);
    }

    #[test]
    fn kink_does_not_excuse_wrong_gradient() {
        let theta = Matrix::scalar(0.0);
        let r = grad_check_matrix(
            |t| (t.item() - 3e-6).abs(),
            |_| Matrix::scalar(1.0),
            &theta,
            GradCheckConfig::default(),
        );
        assert!(!r.pass);
    }

    #[test]
    fn wrong_gradient_fails() {
        let theta = Matrix::scalar(3.0);
        let r = grad_check_matrix(
            |t| t.item() * t.item(),
            |t| Matrix::scalar(t.item()),
            &theta,
            GradCheckConfig::default(),
        );
        assert!(!r.pass);
    }

    #[test]
    fn non_finite_is_a_failure() {
        let theta = Matrix::scalar(0.0);
        let r = grad_check_matrix(
            |t| (t.item()).ln(),
            |_| Matrix::scalar(1.0),
            &theta,
            GradCheckConfig::default(),
        );
        assert!(!r.pass);
        assert!(r.max_relative_error.is_infinite());
    }

    #[test]
    fn large_matrices_are_subsampled() {
        let idx = probe_indices(20_000, 1, 0);
        assert_eq!(idx.len(), SUBSAMPLE);
        assert_eq!(idx, probe_indices(20_000, 1, 0));
        assert_eq!(probe_indices(50, 1, 0).len(), 50);
    }
}
