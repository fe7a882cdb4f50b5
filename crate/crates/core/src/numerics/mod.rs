//! Numeric substrate: matrices, seeded streams, the reverse-mode tape,
//! the reparameterization and Gaussian-KL kernels, and gradient checking.

pub mod gradcheck;
pub mod matrix;
pub mod params;
pub mod rng;
pub mod tape;

pub use gradcheck::{grad_check, GradCheckConfig, GradReport};
pub use matrix::Matrix;
pub use params::{Grads, ParamStore};
pub use rng::{seeded_rng, stream_id, RngStream, StreamKind};
pub use tape::{Tape, Var};

use crate::error::{Error, Result};

/// Draws a standard-normal matrix of the given shape.
pub fn standard_normal(rows: usize, cols: usize, rng: &mut RngStream) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.normal()).collect();
    Matrix::from_vec(rows, cols, data).expect("shape")
}

/// A `rows x cols` matrix with orthonormal rows or columns (whichever is
/// fewer), scaled by `gain`. Gram-Schmidt on a standard-normal draw.
pub fn orthogonal(rows: usize, cols: usize, gain: f64, rng: &mut RngStream) -> Matrix {
    let (long, short) = (rows.max(cols), rows.min(cols));
    let mut q = standard_normal(short, long, rng);
    for i in 0..short {
        for j in 0..i {
            let dot: f64 = q.row(i).iter().zip(q.row(j)).map(|(a, b)| a * b).sum();
            let prev = q.row(j).to_vec();
            for (a, b) in q.row_mut(i).iter_mut().zip(&prev) {
                *a -= dot * b;
            }
        }
        let norm = q.row(i).iter().map(|a| a * a).sum::<f64>().sqrt();
        q.row_mut(i).iter_mut().for_each(|a| *a /= norm);
    }
    let q = q.scale(gain);
    if rows >= cols {
        q.transpose()
    } else {
        q
    }
}

/// `mu + eps * sigma` with `eps` drawn entrywise from `rng`.
pub fn reparameterize(mu: &Matrix, sigma: &Matrix, rng: &mut RngStream) -> Result<Matrix> {
    mu.check_same_shape(sigma, "reparameterize")?;
    let eps = standard_normal(mu.rows(), mu.cols(), rng);
    reparameterize_with(mu, sigma, &eps)
}

/// Reparameterization with an explicit noise draw.
pub fn reparameterize_with(mu: &Matrix, sigma: &Matrix, eps: &Matrix) -> Result<Matrix> {
    mu.check_same_shape(sigma, "reparameterize")?;
    mu.check_same_shape(eps, "reparameterize noise")?;
    if let Some(s) = sigma.data().iter().find(|&&s| s < 0.0 || s.is_nan()) {
        return Err(Error::Domain(format!("negative standard deviation {s}")));
    }
    let mut out = mu.clone();
    for ((o, &s), &e) in out.data_mut().iter_mut().zip(sigma.data()).zip(eps.data()) {
        *o += e * s;
    }
    Ok(out)
}

/// Mean over entries of `KL(N(mu, sigma^2) || N(0, 1))`.
pub fn gaussian_kl(mu: &Matrix, sigma: &Matrix) -> Result<f64> {
    mu.check_same_shape(sigma, "gaussian_kl")?;
    if let Some(s) = sigma.data().iter().find(|&&s| s <= 0.0 || s.is_nan()) {
        return Err(Error::Domain(format!("nonpositive standard deviation {s}")));
    }
    let total: f64 = mu
        .data()
        .iter()
        .zip(sigma.data())
        .map(|(&m, &s)| -0.5 * (1.0 + (s * s).ln() - m * m - s * s))
        .sum();
    Ok(total / mu.len() as f64)
}

/// Tape form of [`gaussian_kl`].
pub fn gaussian_kl_var(t: &mut Tape<'_>, mu: Var, sigma: Var) -> Var {
    let s2 = t.square(sigma);
    let log_s2 = t.ln(s2);
    let m2 = t.square(mu);
    // 0.5 * (mu^2 + sigma^2 - log sigma^2 - 1)
    let a = t.add(m2, s2);
    let b = t.sub(a, log_s2);
    let c = t.add_scalar(b, -1.0);
    let m = t.mean(c);
    t.scale(m, 0.5)
}

/// Tape form of the reparameterization with a pinned noise matrix.
pub fn reparameterize_var(t: &mut Tape<'_>, mu: Var, sigma: Var, eps: Matrix) -> Var {
    let e = t.constant(eps);
    let es = t.mul(e, sigma);
    t.add(mu, es)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn orthogonal_is_orthonormal() {
        let mut rng = seeded_rng(3, 0);
        for (r, c) in [(5, 5), (7, 3), (3, 7)] {
            let q = orthogonal(r, c, 2.0, &mut rng);
            assert_eq!(q.shape(), (r, c));
            let g = if r >= c {
                q.transpose().matmul(&q)
            } else {
                q.matmul(&q.transpose())
            }
            .unwrap();
            let eye = Matrix::identity(r.min(c)).scale(4.0);
            assert!(g.zip_map(&eye, |a, b| a - b).max_abs() < 1e-12);
        }
    }
    use proptest::prelude::*;

    /// Monte-Carlo estimate of KL(N(m, s^2) || N(0,1)) = E_q[log q - log p].
    fn mc_kl(m: f64, s: f64, n: usize, seed: u64) -> f64 {
        let mut rng = seeded_rng(seed, 99);
        let mut acc = 0.0;
        for _ in 0..n {
            let x = m + s * rng.normal();
            let log_q = -0.5 * ((x - m) / s).powi(2) - s.ln();
            let log_p = -0.5 * x * x;
            acc += log_q - log_p;
        }
        acc / n as f64
    }

    #[test]
    fn zero_variance_collapses() {
        let mu = Matrix::row_vector(&[2.0, 3.0]);
        let sigma = Matrix::zeros(1, 2);
        let out = reparameterize(&mu, &sigma, &mut seeded_rng(1, 1)).unwrap();
        assert_eq!(out, mu);
    }

    #[test]
    fn forced_zero_noise_is_identity() {
        let out = reparameterize_with(
            &Matrix::scalar(0.0),
            &Matrix::scalar(1.0),
            &Matrix::scalar(0.0),
        )
        .unwrap();
        assert_eq!(out.item(), 0.0);
    }

    #[test]
    fn reparameterized_mean() {
        let mu = Matrix::scalar(1.0);
        let sigma = Matrix::scalar(2.0);
        let mut rng = seeded_rng(3, 0);
        let n = 100_000;
        let mean = (0..n)
            .map(|_| reparameterize(&mu, &sigma, &mut rng).unwrap().item())
            .sum::<f64>()
            / n as f64;
        assert!((mean - 1.0).abs() <= 0.02, "mean {mean}");
    }

    #[test]
    fn reparameterize_errors() {
        let mu = Matrix::zeros(1, 2);
        assert!(matches!(
            reparameterize(&mu, &Matrix::zeros(2, 1), &mut seeded_rng(0, 0)),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            reparameterize(
                &mu,
                &Matrix::row_vector(&[1.0, -0.1]),
                &mut seeded_rng(0, 0)
            ),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn kl_standard_normal_is_zero() {
        let kl = gaussian_kl(&Matrix::zeros(3, 5), &Matrix::filled(3, 5, 1.0)).unwrap();
        assert!(kl.abs() <= 1e-12);
    }

    #[test]
    fn kl_matches_monte_carlo() {
        let mc1 = mc_kl(1.0, 1.0, 1_000_000, 5);
        let mc2 = mc_kl(0.0, 2.0, 1_000_000, 6);
        let k1 = gaussian_kl(&Matrix::scalar(1.0), &Matrix::scalar(1.0)).unwrap();
        let k2 = gaussian_kl(&Matrix::scalar(0.0), &Matrix::scalar(2.0)).unwrap();
        assert!((k1 - mc1).abs() < 0.01, "{k1} vs {mc1}");
        assert!((k2 - mc2).abs() < 0.01, "{k2} vs {mc2}");
        assert!((k1 - 0.5).abs() < 1e-15);
        assert!((k2 - 0.5 * (4.0 - 1.0 - 4f64.ln())).abs() < 1e-15);
        assert!((k2 - 0.8069).abs() < 1e-4);
    }

    #[test]
    fn kl_rejects_nonpositive_sigma() {
        assert!(matches!(
            gaussian_kl(&Matrix::scalar(0.0), &Matrix::scalar(0.0)),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn tape_kl_agrees_and_differentiates() {
        let mut ps = ParamStore::new();
        ps.insert("mu", Matrix::row_vector(&[0.3, -1.2, 0.8]));
        ps.insert("sigma", Matrix::row_vector(&[0.5, 1.3, 2.0]));
        let eval = |ps: &ParamStore| {
            let mut t = Tape::new(ps);
            let m = t.param("mu");
            let s = t.param("sigma");
            let k = gaussian_kl_var(&mut t, m, s);
            let v = t.value(k).item();
            (v, t.backward(&[(k, Matrix::scalar(1.0))]).params.unwrap())
        };
        let (v, g) = eval(&ps);
        let direct = gaussian_kl(ps.value(0), ps.value(1)).unwrap();
        assert!((v - direct).abs() < 1e-14);
        let reports = grad_check(|p| eval(p).0, &ps, &g, GradCheckConfig::default());
        assert!(reports.iter().all(|r| r.pass), "{reports:?}");
    }

    proptest! {
        #[test]
        fn kl_nonnegative(mu in prop::collection::vec(-5.0f64..5.0, 1..8),
                          log_s in prop::collection::vec(-3.0f64..3.0, 8)) {
            let n = mu.len();
            let sigma: Vec<f64> = log_s[..n].iter().map(|v| v.exp()).collect();
            let kl = gaussian_kl(&Matrix::row_vector(&mu), &Matrix::row_vector(&sigma)).unwrap();
            prop_assert!(kl >= -1e-15);
        }

        #[test]
        fn reparameterize_linear_in_mu(mu in prop::collection::vec(-5.0f64..5.0, 4),
                                       a in -3.0f64..3.0, seed in 0u64..1000) {
            let mu = Matrix::row_vector(&mu);
            let sigma = Matrix::filled(1, 4, 0.7);
            let scaled = mu.scale(a);
            let x = reparameterize(&scaled, &sigma, &mut seeded_rng(seed, 0)).unwrap();
            let z = reparameterize(&Matrix::zeros(1, 4), &sigma, &mut seeded_rng(seed, 0)).unwrap();
            for i in 0..4 {
                // mu + e*s - e*s recovers mu up to one rounding of the sum.
                prop_assert!((x.data()[i] - z.data()[i] - scaled.data()[i]).abs()
                    <= 4.0 * f64::EPSILON * (x.data()[i].abs() + z.data()[i].abs()));
            }
        }
    }
}
