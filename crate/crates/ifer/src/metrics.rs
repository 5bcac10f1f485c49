//! Reconstruction and distribution metrics: MSE, PSNR, SSIM and a Fréchet
//! distance over frozen-trunk embeddings. The perceptual/Fréchet numbers are
//! proxies computed against the in-repo trunk, never against external
//! pretrained networks, and reports flag them as such.

use ndarray::{Array1, Array2};

use crate::error::{IferError, Result};
use crate::tape::Arr;

pub const PSNR_CAP_DB: f64 = 100.0;

pub fn mse(x: &Arr, y: &Arr) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(IferError::Shape(format!(
            "mse: shapes {:?} vs {:?}",
            x.shape(),
            y.shape()
        )));
    }
    Ok((x - y).mapv(|v| v * v).mean().unwrap_or(0.0))
}

/// `10 log10(1/mse)` for [0,1] images, capped at 100 dB near-exactness.
pub fn psnr(x: &Arr, y: &Arr) -> Result<f64> {
    let m = mse(x, y)?;
    if m < 1e-10 {
        return Ok(PSNR_CAP_DB);
    }
    Ok(10.0 * (1.0 / m).log10())
}

/// SSIM with a uniform 8x8 sliding window, C1=(0.01)^2, C2=(0.03)^2, averaged
/// over windows and channels.
pub fn ssim(x: &Arr, y: &Arr) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(IferError::Shape(format!(
            "ssim: shapes {:?} vs {:?}",
            x.shape(),
            y.shape()
        )));
    }
    if x.ndim() != 3 {
        return Err(IferError::Shape(format!(
            "ssim expects [C,H,W], got {:?}",
            x.shape()
        )));
    }
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let win = 8usize.min(h).min(w);
    let c1 = 0.01f64.powi(2);
    let c2 = 0.03f64.powi(2);
    let n = (win * win) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        for r0 in 0..=(h - win) {
            for c0 in 0..=(w - win) {
                let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for r in r0..r0 + win {
                    for cc in c0..c0 + win {
                        let a = x[[ch, r, cc]];
                        let b = y[[ch, r, cc]];
                        sx += a;
                        sy += b;
                        sxx += a * a;
                        syy += b * b;
                        sxy += a * b;
                    }
                }
                let mx = sx / n;
                let my = sy / n;
                let vx = (sxx / n - mx * mx).max(0.0);
                let vy = (syy / n - my * my).max(0.0);
                let cov = sxy / n - mx * my;
                let s = ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
                total += s;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Jacobi eigendecomposition of a symmetric matrix: (eigenvalues, columns are
/// eigenvectors).
pub fn symmetric_eig(m: &Array2<f64>) -> (Array1<f64>, Array2<f64>) {
    let n = m.nrows();
    let mut a = m.clone();
    let mut v = Array2::<f64>::eye(n);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += a[[i, j]] * a[[i, j]];
            }
        }
        if off < 1e-24 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[[p, q]];
                if apq.abs() < 1e-18 {
                    continue;
                }
                let theta = (a[[q, q]] - a[[p, p]]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let cos = 1.0 / (t * t + 1.0).sqrt();
                let sin = t * cos;
                for k in 0..n {
                    let akp = a[[k, p]];
                    let akq = a[[k, q]];
                    a[[k, p]] = cos * akp - sin * akq;
                    a[[k, q]] = sin * akp + cos * akq;
                }
                for k in 0..n {
                    let apk = a[[p, k]];
                    let aqk = a[[q, k]];
                    a[[p, k]] = cos * apk - sin * aqk;
                    a[[q, k]] = sin * apk + cos * aqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = cos * vkp - sin * vkq;
                    v[[k, q]] = sin * vkp + cos * vkq;
                }
            }
        }
    }
    let evals = Array1::from_iter((0..n).map(|i| a[[i, i]]));
    (evals, v)
}

/// Symmetric PSD square root with eigenvalue clamping at 0.
pub fn psd_sqrt(m: &Array2<f64>) -> Array2<f64> {
    let sym = (m + &m.t()) * 0.5;
    let (evals, vecs) = symmetric_eig(&sym);
    let n = m.nrows();
    let mut d = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        d[[i, i]] = evals[i].max(0.0).sqrt();
    }
    vecs.dot(&d).dot(&vecs.t())
}

/// Closed-form Fréchet distance between Gaussians.
pub fn frechet_distance(
    mu_a: &Array1<f64>,
    cov_a: &Array2<f64>,
    mu_b: &Array1<f64>,
    cov_b: &Array2<f64>,
) -> f64 {
    let dm = mu_a - mu_b;
    let mean_term: f64 = dm.iter().map(|v| v * v).sum();
    let sa = psd_sqrt(cov_a);
    let inner = sa.dot(cov_b).dot(&sa);
    let sqrt_inner = psd_sqrt(&inner);
    let tr_a: f64 = (0..cov_a.nrows()).map(|i| cov_a[[i, i]]).sum();
    let tr_b: f64 = (0..cov_b.nrows()).map(|i| cov_b[[i, i]]).sum();
    let tr_s: f64 = (0..sqrt_inner.nrows()).map(|i| sqrt_inner[[i, i]]).sum();
    mean_term + tr_a + tr_b - 2.0 * tr_s
}

pub fn embedding_stats(e: &Array2<f64>) -> (Array1<f64>, Array2<f64>) {
    let n = e.nrows();
    let d = e.ncols();
    let mu = e.sum_axis(ndarray::Axis(0)) / n as f64;
    let mut cov = Array2::<f64>::zeros((d, d));
    for r in 0..n {
        let diff = &e.row(r) - &mu;
        for i in 0..d {
            for j in 0..d {
                cov[[i, j]] += diff[i] * diff[j];
            }
        }
    }
    cov /= (n - 1).max(1) as f64;
    (mu, cov)
}

pub const FID_MIN_SET: usize = 32;

/// Fréchet distance between two sets of trunk embeddings (rows are samples).
pub fn fid_from_embeddings(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    if a.nrows() < FID_MIN_SET || b.nrows() < FID_MIN_SET {
        return Err(IferError::Validation(format!(
            "fid proxy needs at least {FID_MIN_SET} images per set, got {} and {}",
            a.nrows(),
            b.nrows()
        )));
    }
    let (mu_a, cov_a) = embedding_stats(a);
    let (mu_b, cov_b) = embedding_stats(b);
    Ok(frechet_distance(&mu_a, &cov_a, &mu_b, &cov_b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::randn;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn identity_metrics() {
        let mut r = rng(0);
        let x = randn(&mut r, &[3, 16, 16], 0.2).mapv(|v| (v + 0.5).clamp(0.0, 1.0));
        assert_eq!(mse(&x, &x).unwrap(), 0.0);
        assert_eq!(psnr(&x, &x).unwrap(), 100.0);
        assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zeros_vs_ones() {
        let x = Arr::zeros(ndarray::IxDyn(&[3, 16, 16]));
        let y = Arr::ones(ndarray::IxDyn(&[3, 16, 16]));
        assert_eq!(mse(&x, &y).unwrap(), 1.0);
        assert_eq!(psnr(&x, &y).unwrap(), 0.0);
    }

    #[test]
    fn psnr_mse_consistency() {
        let mut r = rng(1);
        for _ in 0..50 {
            let x = randn(&mut r, &[3, 8, 8], 0.2).mapv(|v| (v + 0.5).clamp(0.0, 1.0));
            let y = randn(&mut r, &[3, 8, 8], 0.2).mapv(|v| (v + 0.5).clamp(0.0, 1.0));
            let m = mse(&x, &y).unwrap();
            if m >= 1e-10 {
                assert_eq!(psnr(&x, &y).unwrap(), 10.0 * (1.0 / m).log10());
            }
        }
    }

    #[test]
    fn ssim_is_symmetric() {
        let mut r = rng(2);
        for _ in 0..100 {
            let x = randn(&mut r, &[1, 10, 10], 0.2).mapv(|v| (v + 0.5).clamp(0.0, 1.0));
            let y = randn(&mut r, &[1, 10, 10], 0.2).mapv(|v| (v + 0.5).clamp(0.0, 1.0));
            let a = ssim(&x, &y).unwrap();
            let b = ssim(&y, &x).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let x = Arr::zeros(ndarray::IxDyn(&[3, 8, 8]));
        let y = Arr::zeros(ndarray::IxDyn(&[3, 9, 9]));
        assert!(mse(&x, &y).is_err());
        assert!(ssim(&x, &y).is_err());
    }

    #[test]
    fn jacobi_reconstructs_matrix() {
        let mut r = rng(3);
        let a = randn(&mut r, &[6, 6], 1.0);
        let a2: Array2<f64> = a.into_dimensionality().unwrap();
        let sym = (&a2 + &a2.t()) * 0.5;
        let (evals, vecs) = symmetric_eig(&sym);
        let mut d = Array2::<f64>::zeros((6, 6));
        for i in 0..6 {
            d[[i, i]] = evals[i];
        }
        let rec = vecs.dot(&d).dot(&vecs.t());
        let err = (&rec - &sym).mapv(f64::abs).iter().cloned().fold(0.0, f64::max);
        assert!(err < 1e-9, "reconstruction error {err}");
    }

    #[test]
    fn frechet_closed_form_unit_gaussians() {
        let d = 5;
        let mu_a = Array1::zeros(d);
        let mut mu_b = Array1::zeros(d);
        mu_b[0] = 1.0;
        let eye = Array2::eye(d);
        let fd = frechet_distance(&mu_a, &eye, &mu_b, &eye);
        assert!((fd - 1.0).abs() < 1e-9, "{fd}");
    }

    #[test]
    fn fid_properties() {
        let mut r = rng(4);
        let a2: Array2<f64> = randn(&mut r, &[40, 6], 1.0).into_dimensionality().unwrap();
        let b2: Array2<f64> = randn(&mut r, &[40, 6], 1.0)
            .mapv(|v| v + 0.5)
            .into_dimensionality()
            .unwrap();
        assert!(fid_from_embeddings(&a2, &a2).unwrap().abs() < 1e-6);
        let ab = fid_from_embeddings(&a2, &b2).unwrap();
        let ba = fid_from_embeddings(&b2, &a2).unwrap();
        assert!((ab - ba).abs() < 1e-6);
        assert!(ab > 0.0);
        let small: Array2<f64> = randn(&mut r, &[8, 6], 1.0).into_dimensionality().unwrap();
        assert!(matches!(
            fid_from_embeddings(&small, &b2),
            Err(IferError::Validation(_))
        ));
    }
}
