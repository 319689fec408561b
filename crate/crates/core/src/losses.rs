//! The composite training objective: feature-reconstruction MSE, a
//! `1 - SSIM` image term, and a domain-adaptation penalty that pulls
//! every domain's latent mean and softmaxed covariance toward the
//! anchor domain (id 0). All terms come with analytic gradients.

use crate::error::{Error, Result};
use crate::Real;

/// SSIM stabilizer constants for a dynamic range of 1.0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimConfig {
    pub c1: f64,
    pub c2: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self {
            c1: (0.01f64).powi(2),
            c2: (0.03f64).powi(2),
        }
    }
}

/// Objective weighting; the anchor domain is always id 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub beta: f64,
    pub ssim: SsimConfig,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            beta: 5.0,
            ssim: SsimConfig::default(),
        }
    }
}

/// Per-domain latent statistics: mean vector, unbiased covariance, and
/// the row-wise softmax of the covariance (each row a distribution).
#[derive(Debug, Clone)]
pub struct DomainStats<T> {
    pub domain: u32,
    pub n: usize,
    pub mean: Vec<T>,
    /// Z x Z row-major.
    pub cov: Vec<T>,
    /// Row-stochastic softmax of `cov`, same layout.
    pub soft_cov: Vec<T>,
}

/// Batch loss decomposition; `total = feat_mse + image_ssim_term +
/// beta * da_term` by construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport<T> {
    pub feat_mse: T,
    pub image_ssim_term: T,
    pub da_term: T,
    pub total: T,
}

/// Gradients of the batch loss with respect to the three model heads.
#[derive(Debug, Clone)]
pub struct LossGrads<T> {
    pub d_z: Vec<Vec<T>>,
    pub d_hhat: Vec<Vec<T>>,
    pub d_rhat: Vec<Vec<T>>,
}

fn expect_same_shape<T>(a: &[Vec<T>], b: &[Vec<T>], what: &str) -> Result<()> {
    if a.len() != b.len() || a.iter().zip(b.iter()).any(|(x, y)| x.len() != y.len()) {
        return Err(Error::ShapeMismatch(format!("{what} batches differ in shape")));
    }
    Ok(())
}

/// Mean over all samples and components of the squared difference.
pub fn feature_mse<T: Real>(hhat: &[Vec<T>], h: &[Vec<T>]) -> Result<T> {
    expect_same_shape(hhat, h, "feature")?;
    if hhat.is_empty() {
        return Err(Error::ShapeMismatch("empty feature batch".into()));
    }
    let mut acc = T::zero();
    let mut count = 0usize;
    for (a, b) in hhat.iter().zip(h.iter()) {
        for (&x, &y) in a.iter().zip(b.iter()) {
            let d = x - y;
            acc = acc + d * d;
        }
        count += a.len();
    }
    Ok(acc / T::from_f64_lossy(count as f64))
}

/// Structural similarity from global per-image statistics (all pixels
/// and channels pooled, population variance). Symmetric, 1 at `x == y`,
/// always in `[-1, 1]`.
pub fn ssim<T: Real>(x: &[T], y: &[T], cfg: &SsimConfig) -> Result<T> {
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::ShapeMismatch("ssim inputs differ in shape".into()));
    }
    let n = T::from_f64_lossy(x.len() as f64);
    let mut mx = T::zero();
    let mut my = T::zero();
    for (&a, &b) in x.iter().zip(y.iter()) {
        mx = mx + a;
        my = my + b;
    }
    mx = mx / n;
    my = my / n;
    let mut vx = T::zero();
    let mut vy = T::zero();
    let mut cxy = T::zero();
    for (&a, &b) in x.iter().zip(y.iter()) {
        let dx = a - mx;
        let dy = b - my;
        vx = vx + dx * dx;
        vy = vy + dy * dy;
        cxy = cxy + dx * dy;
    }
    vx = vx / n;
    vy = vy / n;
    cxy = cxy / n;
    let c1 = T::from_f64_lossy(cfg.c1);
    let c2 = T::from_f64_lossy(cfg.c2);
    let two = T::from_f64_lossy(2.0);
    let num = (two * mx * my + c1) * (two * cxy + c2);
    let den = (mx * mx + my * my + c1) * (vx + vy + c2);
    Ok(num / den)
}

/// Gradient of `ssim(x, y)` with respect to `x`.
pub fn ssim_grad_x<T: Real>(x: &[T], y: &[T], cfg: &SsimConfig) -> Result<Vec<T>> {
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::ShapeMismatch("ssim inputs differ in shape".into()));
    }
    let nf = x.len() as f64;
    let n = T::from_f64_lossy(nf);
    let mut mx = T::zero();
    let mut my = T::zero();
    for (&a, &b) in x.iter().zip(y.iter()) {
        mx = mx + a;
        my = my + b;
    }
    mx = mx / n;
    my = my / n;
    let mut vx = T::zero();
    let mut vy = T::zero();
    let mut cxy = T::zero();
    for (&a, &b) in x.iter().zip(y.iter()) {
        let dx = a - mx;
        let dy = b - my;
        vx = vx + dx * dx;
        vy = vy + dy * dy;
        cxy = cxy + dx * dy;
    }
    vx = vx / n;
    vy = vy / n;
    cxy = cxy / n;
    let c1 = T::from_f64_lossy(cfg.c1);
    let c2 = T::from_f64_lossy(cfg.c2);
    let two = T::from_f64_lossy(2.0);
    let a1 = two * mx * my + c1;
    let a2 = two * cxy + c2;
    let b1 = mx * mx + my * my + c1;
    let b2 = vx + vy + c2;
    let s = (a1 * a2) / (b1 * b2);
    // dS/dx_p = [dA1 * A2 + A1 * dA2] / (B1 B2) - S * [dB1 / B1 + dB2 / B2]
    // with dA1 = 2 my / n, dA2 = 2 (y_p - my) / n,
    //      dB1 = 2 mx / n, dB2 = 2 (x_p - mx) / n.
    let inv_n = T::one() / n;
    let mut grad = vec![T::zero(); x.len()];
    for (i, g) in grad.iter_mut().enumerate() {
        let da1 = two * my * inv_n;
        let da2 = two * (y[i] - my) * inv_n;
        let db1 = two * mx * inv_n;
        let db2 = two * (x[i] - mx) * inv_n;
        *g = (da1 * a2 + a1 * da2) / (b1 * b2) - s * (db1 / b1 + db2 / b2);
    }
    Ok(grad)
}

/// Mean over the batch of `1 - ssim(rhat_i, r_i)`; lies in `[0, 2]`.
pub fn image_loss<T: Real>(rhat: &[Vec<T>], r: &[Vec<T>], cfg: &SsimConfig) -> Result<T> {
    expect_same_shape(rhat, r, "image")?;
    if rhat.is_empty() {
        return Err(Error::ShapeMismatch("empty image batch".into()));
    }
    let mut acc = T::zero();
    for (a, b) in rhat.iter().zip(r.iter()) {
        acc = acc + (T::one() - ssim(a, b, cfg)?);
    }
    Ok(acc / T::from_f64_lossy(rhat.len() as f64))
}

/// Row-wise softmax with max subtraction.
fn softmax_rows<T: Real>(m: &[T], dim: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m.len()];
    for r in 0..dim {
        let row = &m[r * dim..(r + 1) * dim];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for (o, &v) in out[r * dim..(r + 1) * dim].iter_mut().zip(row.iter()) {
            let e = (v - max).exp();
            *o = e;
            sum = sum + e;
        }
        for o in out[r * dim..(r + 1) * dim].iter_mut() {
            *o = *o / sum;
        }
    }
    out
}

/// Per-domain mean, unbiased covariance, and row-softmaxed covariance
/// for every domain id in `[0, num_domains)`. Every domain must be
/// present with at least two samples.
pub fn domain_stats<T: Real>(
    z: &[Vec<T>],
    domains: &[u32],
    num_domains: u32,
) -> Result<Vec<DomainStats<T>>> {
    if z.len() != domains.len() {
        return Err(Error::ShapeMismatch(
            "latent batch and domain list differ in length".into(),
        ));
    }
    let dim = z.first().map(|v| v.len()).unwrap_or(0);
    let mut stats = Vec::with_capacity(num_domains as usize);
    for k in 0..num_domains {
        let members: Vec<&Vec<T>> = z
            .iter()
            .zip(domains.iter())
            .filter(|(_, &d)| d == k)
            .map(|(v, _)| v)
            .collect();
        let n = members.len();
        if n < 2 {
            return Err(Error::InsufficientDomainSamples(k));
        }
        let nf = T::from_f64_lossy(n as f64);
        let mut mean = vec![T::zero(); dim];
        for v in &members {
            for (m, &x) in mean.iter_mut().zip(v.iter()) {
                *m = *m + x;
            }
        }
        for m in mean.iter_mut() {
            *m = *m / nf;
        }
        let denom = T::from_f64_lossy((n - 1) as f64);
        let mut cov = vec![T::zero(); dim * dim];
        for v in &members {
            for a in 0..dim {
                let da = v[a] - mean[a];
                let row = &mut cov[a * dim..(a + 1) * dim];
                for (b, slot) in row.iter_mut().enumerate() {
                    *slot = *slot + da * (v[b] - mean[b]);
                }
            }
        }
        for c in cov.iter_mut() {
            *c = *c / denom;
        }
        let soft_cov = softmax_rows(&cov, dim);
        stats.push(DomainStats {
            domain: k,
            n,
            mean,
            cov,
            soft_cov,
        });
    }
    Ok(stats)
}

/// Mean over rows of the row-wise KL divergence between two
/// row-stochastic matrices.
fn kl_rows<T: Real>(a: &[T], b: &[T], dim: usize) -> T {
    let mut acc = T::zero();
    for (&p, &q) in a.iter().zip(b.iter()) {
        acc = acc + p * (p.ln() - q.ln());
    }
    acc / T::from_f64_lossy(dim as f64)
}

/// Domain-adaptation penalty: for every non-anchor domain, the MSE
/// between its latent mean and the anchor's plus the symmetrized KL
/// between the softmaxed covariances. Zero iff all domains match the
/// anchor's statistics.
pub fn da_loss<T: Real>(stats: &[DomainStats<T>]) -> Result<T> {
    let anchor = stats
        .iter()
        .find(|s| s.domain == 0)
        .ok_or_else(|| Error::Config("missing anchor domain 0 in statistics".into()))?;
    let dim = anchor.mean.len();
    let half = T::from_f64_lossy(0.5);
    let mut total = T::zero();
    for s in stats.iter().filter(|s| s.domain != 0) {
        let mut mse = T::zero();
        for (&a, &b) in s.mean.iter().zip(anchor.mean.iter()) {
            let d = a - b;
            mse = mse + d * d;
        }
        mse = mse / T::from_f64_lossy(dim as f64);
        let kl = half
            * (kl_rows(&anchor.soft_cov, &s.soft_cov, dim)
                + kl_rows(&s.soft_cov, &anchor.soft_cov, dim));
        total = total + mse + kl;
    }
    Ok(total)
}

/// Gradient of [`da_loss`] with respect to every latent vector in the
/// batch (including anchor-domain samples, whose statistics appear in
/// every term).
pub fn da_loss_grad<T: Real>(
    stats: &[DomainStats<T>],
    z: &[Vec<T>],
    domains: &[u32],
) -> Result<Vec<Vec<T>>> {
    let anchor = stats
        .iter()
        .find(|s| s.domain == 0)
        .ok_or_else(|| Error::Config("missing anchor domain 0 in statistics".into()))?;
    let dim = anchor.mean.len();
    let dimf = T::from_f64_lossy(dim as f64);
    let two = T::from_f64_lossy(2.0);
    let half = T::from_f64_lossy(0.5);

    // Accumulate dL/d(mean_k) and dL/d(soft_cov_k) per domain.
    let mut d_mean: Vec<Vec<T>> = stats.iter().map(|s| vec![T::zero(); s.mean.len()]).collect();
    let mut d_soft: Vec<Vec<T>> = stats
        .iter()
        .map(|s| vec![T::zero(); s.soft_cov.len()])
        .collect();
    let anchor_idx = stats.iter().position(|s| s.domain == 0).unwrap();
    for (idx, s) in stats.iter().enumerate() {
        if s.domain == 0 {
            continue;
        }
        // MSE(mean_k, mean_0): d/dmean_k = 2 (mean_k - mean_0) / Z.
        for c in 0..dim {
            let g = two * (s.mean[c] - anchor.mean[c]) / dimf;
            d_mean[idx][c] = d_mean[idx][c] + g;
            d_mean[anchor_idx][c] = d_mean[anchor_idx][c] - g;
        }
        // Symmetrized KL on row-stochastic matrices, averaged over rows:
        //   d/ds_k  = 0.5/Z * (ln s_k - ln s_0 + 1 - s_0 / s_k)
        //   d/ds_0  = 0.5/Z * (ln s_0 - ln s_k + 1 - s_k / s_0)
        let scale = half / dimf;
        for i in 0..dim * dim {
            let sk = s.soft_cov[i];
            let s0 = anchor.soft_cov[i];
            d_soft[idx][i] = d_soft[idx][i] + scale * (sk.ln() - s0.ln() + T::one() - s0 / sk);
            d_soft[anchor_idx][i] =
                d_soft[anchor_idx][i] + scale * (s0.ln() - sk.ln() + T::one() - sk / s0);
        }
    }

    // Push soft-cov gradients through the row softmax to dL/d(cov).
    let mut d_cov: Vec<Vec<T>> = stats.iter().map(|s| vec![T::zero(); s.cov.len()]).collect();
    for (idx, s) in stats.iter().enumerate() {
        for r in 0..dim {
            let p = &s.soft_cov[r * dim..(r + 1) * dim];
            let g = &d_soft[idx][r * dim..(r + 1) * dim];
            let mut dot = T::zero();
            for (pj, gj) in p.iter().zip(g.iter()) {
                dot = dot + *pj * *gj;
            }
            for j in 0..dim {
                d_cov[idx][r * dim + j] = p[j] * (g[j] - dot);
            }
        }
    }

    // Chain to each latent sample:
    //   dL/dz_i = d_mean_k / n_k + 2/(n_k - 1) * sym(d_cov_k) (z_i - mean_k)
    let mut out: Vec<Vec<T>> = z.iter().map(|v| vec![T::zero(); v.len()]).collect();
    for (i, (zi, &d)) in z.iter().zip(domains.iter()).enumerate() {
        let idx = stats
            .iter()
            .position(|s| s.domain == d)
            .ok_or_else(|| Error::Config(format!("sample domain {d} missing from statistics")))?;
        let s = &stats[idx];
        let nf = T::from_f64_lossy(s.n as f64);
        let cov_scale = two / T::from_f64_lossy((s.n - 1) as f64);
        let centered: Vec<T> = zi.iter().zip(s.mean.iter()).map(|(&a, &b)| a - b).collect();
        for c in 0..dim {
            let mut acc = d_mean[idx][c] / nf;
            let mut sym_dot = T::zero();
            for b in 0..dim {
                let sym = half * (d_cov[idx][c * dim + b] + d_cov[idx][b * dim + c]);
                sym_dot = sym_dot + sym * centered[b];
            }
            acc = acc + cov_scale * sym_dot;
            out[i][c] = acc;
        }
    }
    Ok(out)
}

/// Full objective for one batch: the report plus gradients with
/// respect to the latent codes, reconstructed features, and
/// reconstructed images. With `beta == 0` the domain branch is skipped
/// entirely and reports exactly zero.
#[allow(clippy::too_many_arguments)]
pub fn total_loss<T: Real>(
    h: &[Vec<T>],
    hhat: &[Vec<T>],
    r: &[Vec<T>],
    rhat: &[Vec<T>],
    z: &[Vec<T>],
    domains: &[u32],
    num_domains: u32,
    cfg: &LossConfig,
) -> Result<(LossReport<T>, LossGrads<T>)> {
    let n = h.len();
    if hhat.len() != n || r.len() != n || rhat.len() != n || z.len() != n || domains.len() != n {
        return Err(Error::ShapeMismatch("batch lengths differ".into()));
    }
    let feat = feature_mse(hhat, h)?;
    let img = image_loss(rhat, r, &cfg.ssim)?;
    let beta = T::from_f64_lossy(cfg.beta);

    let nf = T::from_f64_lossy(n as f64);
    let comp = T::from_f64_lossy((n * h[0].len()) as f64);
    let two = T::from_f64_lossy(2.0);

    // d(feat_mse)/d(hhat) = 2 (hhat - h) / (N * D).
    let d_hhat: Vec<Vec<T>> = hhat
        .iter()
        .zip(h.iter())
        .map(|(a, b)| {
            a.iter()
                .zip(b.iter())
                .map(|(&x, &y)| two * (x - y) / comp)
                .collect()
        })
        .collect();

    // d(image_loss)/d(rhat) = -d ssim / d rhat / N.
    let mut d_rhat = Vec::with_capacity(n);
    for (a, b) in rhat.iter().zip(r.iter()) {
        let g = ssim_grad_x(a, b, &cfg.ssim)?;
        d_rhat.push(g.into_iter().map(|v| -v / nf).collect());
    }

    let (da, d_z) = if cfg.beta == 0.0 {
        (T::zero(), z.iter().map(|v| vec![T::zero(); v.len()]).collect())
    } else {
        let stats = domain_stats(z, domains, num_domains)?;
        let da = da_loss(&stats)?;
        let mut d_z = da_loss_grad(&stats, z, domains)?;
        for row in d_z.iter_mut() {
            for g in row.iter_mut() {
                *g = *g * beta;
            }
        }
        (da, d_z)
    };

    let total = feat + img + beta * da;
    if !total.is_finite() {
        return Err(Error::Divergence("non-finite batch loss".into()));
    }
    Ok((
        LossReport {
            feat_mse: feat,
            image_ssim_term: img,
            da_term: da,
            total,
        },
        LossGrads {
            d_z,
            d_hhat,
            d_rhat,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rng(seed: u64) -> rand_chacha::ChaCha8Rng {
        crate::seeds::rng(seed, &[])
    }

    fn random_image(n: usize, r: &mut rand_chacha::ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| r.random_range(0.0..1.0)).collect()
    }

    #[test]
    fn feature_mse_basics() {
        let h = vec![vec![0.1f64, -0.2, 0.3], vec![0.0, 0.5, -0.5]];
        assert_eq!(feature_mse(&h, &h).unwrap(), 0.0);
        let shifted: Vec<Vec<f64>> = h
            .iter()
            .map(|v| v.iter().map(|x| x + 1.0).collect())
            .collect();
        assert!((feature_mse(&shifted, &h).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn feature_mse_matches_naive_sum() {
        let mut r = rng(1);
        let h: Vec<Vec<f64>> = (0..4).map(|_| random_image(7, &mut r)).collect();
        let g: Vec<Vec<f64>> = (0..4).map(|_| random_image(7, &mut r)).collect();
        let mut acc = 0.0;
        for (a, b) in h.iter().zip(g.iter()) {
            for (x, y) in a.iter().zip(b.iter()) {
                acc += (x - y) * (x - y);
            }
        }
        let naive = acc / 28.0;
        assert!((feature_mse(&h, &g).unwrap() - naive).abs() < 1e-6);
    }

    #[test]
    fn ssim_identity_and_symmetry() {
        let cfg = SsimConfig::default();
        let mut r = rng(2);
        for _ in 0..100 {
            let x = random_image(48, &mut r);
            let y = random_image(48, &mut r);
            let s1: f64 = ssim(&x, &y, &cfg).unwrap();
            let s2: f64 = ssim(&y, &x, &cfg).unwrap();
            assert!((s1 - s2).abs() < 1e-7);
            assert!((-1.0..=1.0).contains(&s1));
            assert!((ssim(&x, &x, &cfg).unwrap() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn ssim_constant_images_closed_form() {
        let cfg = SsimConfig::default();
        let x = vec![0.0f64; 64];
        let y = vec![1.0f64; 64];
        let expected = cfg.c1 / (1.0 + cfg.c1);
        assert!((ssim(&x, &y, &cfg).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn ssim_gradient_matches_finite_differences() {
        let cfg = SsimConfig::default();
        let mut r = rng(3);
        let x = random_image(27, &mut r);
        let y = random_image(27, &mut r);
        let grad = ssim_grad_x(&x, &y, &cfg).unwrap();
        const STEP: f64 = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp[i] += STEP;
            let fp: f64 = ssim(&xp, &y, &cfg).unwrap();
            xp[i] = x[i] - STEP;
            let fm: f64 = ssim(&xp, &y, &cfg).unwrap();
            let num = (fp - fm) / (2.0 * STEP);
            let denom = grad[i].abs().max(num.abs()).max(1e-6);
            assert!(
                ((grad[i] - num) / denom).abs() < 1e-3,
                "component {i}: analytic {} numeric {num}",
                grad[i]
            );
        }
    }

    #[test]
    fn image_loss_perfect_reconstruction_is_zero() {
        let cfg = SsimConfig::default();
        let mut r = rng(4);
        let batch: Vec<Vec<f64>> = (0..3).map(|_| random_image(48, &mut r)).collect();
        assert!(image_loss(&batch, &batch, &cfg).unwrap().abs() < 1e-12);
    }

    #[test]
    fn image_loss_is_mean_of_pairs() {
        let cfg = SsimConfig::default();
        let mut r = rng(5);
        let a: Vec<Vec<f64>> = (0..4).map(|_| random_image(48, &mut r)).collect();
        let b: Vec<Vec<f64>> = (0..4).map(|_| random_image(48, &mut r)).collect();
        let batch = image_loss(&a, &b, &cfg).unwrap();
        let mut acc = 0.0;
        for (x, y) in a.iter().zip(b.iter()) {
            acc += 1.0 - ssim(x, y, &cfg).unwrap();
        }
        assert!((batch - acc / 4.0).abs() < 1e-12);
    }

    fn random_latents(
        n_per_domain: usize,
        num_domains: u32,
        dim: usize,
        seed: u64,
    ) -> (Vec<Vec<f64>>, Vec<u32>) {
        let mut r = rng(seed);
        let mut z = Vec::new();
        let mut domains = Vec::new();
        for d in 0..num_domains {
            for _ in 0..n_per_domain {
                z.push(
                    (0..dim)
                        .map(|_| r.random_range(-0.9..0.9) + 0.1 * d as f64)
                        .collect(),
                );
                domains.push(d);
            }
        }
        (z, domains)
    }

    #[test]
    fn domain_stats_identical_samples_give_uniform_softmax() {
        let z = vec![vec![0.3f64, -0.2, 0.5]; 4];
        let domains = vec![0, 0, 1, 1];
        let stats = domain_stats(&z, &domains, 2).unwrap();
        for s in &stats {
            assert!(s.cov.iter().all(|v| v.abs() < 1e-12));
            assert!(s.soft_cov.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-12));
        }
        // Two domains with identical samples agree in (mean, softmax).
        assert_eq!(stats[0].mean, stats[1].mean);
        assert_eq!(stats[0].soft_cov, stats[1].soft_cov);
    }

    #[test]
    fn domain_stats_matches_two_pass_oracle() {
        let (z, domains) = random_latents(6, 2, 4, 8);
        let stats = domain_stats(&z, &domains, 2).unwrap();
        for s in &stats {
            let members: Vec<&Vec<f64>> = z
                .iter()
                .zip(domains.iter())
                .filter(|(_, &d)| d == s.domain)
                .map(|(v, _)| v)
                .collect();
            let n = members.len() as f64;
            for a in 0..4 {
                let ma: f64 = members.iter().map(|v| v[a]).sum::<f64>() / n;
                assert!((ma - s.mean[a]).abs() < 1e-9);
                for b in 0..4 {
                    let mb: f64 = members.iter().map(|v| v[b]).sum::<f64>() / n;
                    let cov: f64 = members
                        .iter()
                        .map(|v| (v[a] - ma) * (v[b] - mb))
                        .sum::<f64>()
                        / (n - 1.0);
                    assert!((cov - s.cov[a * 4 + b]).abs() < 1e-6);
                }
            }
            for r_i in 0..4 {
                let sum: f64 = s.soft_cov[r_i * 4..(r_i + 1) * 4].iter().sum();
                assert!((sum - 1.0).abs() < 1e-6);
                assert!(s.soft_cov[r_i * 4..(r_i + 1) * 4].iter().all(|&v| v > 0.0));
            }
        }
    }

    #[test]
    fn domain_stats_rejects_single_sample_domain() {
        let z = vec![vec![0.0f64; 3]; 3];
        let domains = vec![0, 0, 1];
        let err = domain_stats(&z, &domains, 2).unwrap_err();
        assert!(err
            .to_string()
            .contains("insufficient domain samples for covariance"));
    }

    #[test]
    fn da_loss_zero_for_matching_domains() {
        let z = vec![
            vec![0.1f64, 0.4],
            vec![-0.3, 0.2],
            vec![0.1, 0.4],
            vec![-0.3, 0.2],
        ];
        let domains = vec![0, 0, 1, 1];
        let stats = domain_stats(&z, &domains, 2).unwrap();
        assert!(da_loss(&stats).unwrap().abs() < 1e-12);
    }

    #[test]
    fn da_loss_single_domain_is_zero() {
        let (z, domains) = random_latents(4, 1, 3, 10);
        let stats = domain_stats(&z, &domains, 1).unwrap();
        assert_eq!(da_loss(&stats).unwrap(), 0.0);
    }

    #[test]
    fn da_loss_kl_term_is_symmetric_under_swap() {
        let (z, domains) = random_latents(5, 2, 3, 11);
        let stats = domain_stats(&z, &domains, 2).unwrap();
        let mut swapped = stats.clone();
        // Swap the soft covariances between anchor and the other domain
        // while keeping means equal; the KL term must not change.
        let mean = stats[0].mean.clone();
        swapped[0].soft_cov = stats[1].soft_cov.clone();
        swapped[1].soft_cov = stats[0].soft_cov.clone();
        swapped[0].mean = mean.clone();
        swapped[1].mean = mean.clone();
        let mut equal_means = stats.clone();
        equal_means[1].mean = equal_means[0].mean.clone();
        let a = da_loss(&equal_means).unwrap();
        let b = da_loss(&swapped).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn da_gradient_matches_finite_differences() {
        let (z, domains) = random_latents(4, 3, 3, 12);
        let stats = domain_stats(&z, &domains, 3).unwrap();
        let grad = da_loss_grad(&stats, &z, &domains).unwrap();
        const STEP: f64 = 1e-6;
        let eval = |zv: &Vec<Vec<f64>>| -> f64 {
            da_loss(&domain_stats(zv, &domains, 3).unwrap()).unwrap()
        };
        for i in 0..z.len() {
            for c in 0..3 {
                let mut zp = z.clone();
                zp[i][c] += STEP;
                let fp = eval(&zp);
                zp[i][c] = z[i][c] - STEP;
                let fm = eval(&zp);
                let num = (fp - fm) / (2.0 * STEP);
                let denom = grad[i][c].abs().max(num.abs()).max(1e-7);
                assert!(
                    ((grad[i][c] - num) / denom).abs() < 1e-3,
                    "z[{i}][{c}]: analytic {} numeric {num}",
                    grad[i][c]
                );
            }
        }
    }

    #[test]
    fn total_loss_additivity_and_beta_weighting() {
        let mut r = rng(13);
        let n = 6;
        let h: Vec<Vec<f64>> = (0..n).map(|_| random_image(5, &mut r)).collect();
        let hhat: Vec<Vec<f64>> = (0..n).map(|_| random_image(5, &mut r)).collect();
        let img: Vec<Vec<f64>> = (0..n).map(|_| random_image(12, &mut r)).collect();
        let imghat: Vec<Vec<f64>> = (0..n).map(|_| random_image(12, &mut r)).collect();
        let (z, domains) = random_latents(2, 3, 4, 14);
        let cfg = LossConfig {
            beta: 5.0,
            ..LossConfig::default()
        };
        let (report, _) = total_loss(&h, &hhat, &img, &imghat, &z, &domains, 3, &cfg).unwrap();
        let lhs = report.total - (report.feat_mse + report.image_ssim_term);
        assert!((lhs - 5.0 * report.da_term).abs() < 1e-9);

        let cfg0 = LossConfig {
            beta: 0.0,
            ..LossConfig::default()
        };
        let (report0, grads0) =
            total_loss(&h, &hhat, &img, &imghat, &z, &domains, 3, &cfg0).unwrap();
        assert_eq!(report0.da_term, 0.0);
        assert!(grads0.d_z.iter().flatten().all(|&g| g == 0.0));
    }

    #[test]
    fn total_loss_perfect_everything_is_zero() {
        let h = vec![vec![0.2f64, -0.4], vec![0.6, 0.1], vec![-0.2, 0.3], vec![0.5, -0.5]];
        let img = vec![
            vec![0.1f64, 0.9, 0.4, 0.2],
            vec![0.8, 0.2, 0.7, 0.3],
            vec![0.1, 0.9, 0.4, 0.2],
            vec![0.8, 0.2, 0.7, 0.3],
        ];
        // Identical latent sets per domain align the statistics exactly.
        let z = vec![vec![0.3f64, 0.1], vec![-0.2, 0.4], vec![0.3, 0.1], vec![-0.2, 0.4]];
        let domains = vec![0, 0, 1, 1];
        let cfg = LossConfig::default();
        let (report, _) = total_loss(&h, &h, &img, &img, &z, &domains, 2, &cfg).unwrap();
        assert!(report.total.abs() < 1e-12);
    }
}
