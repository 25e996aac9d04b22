//! Training loss: single-timestep noise reconstruction plus λ-weighted
//! categorical and Gaussian prior matching in closed form.
//!
//! Reduction: squared error is summed over pixels within a sample; every
//! term is then averaged over the batch.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Tensor, Var};
use crate::diffusion::forward_sample_batch;
use crate::error::{Error, Result};
use crate::gmm::{log_sum_exp, GmmParams, Responsibilities};
use crate::networks::{reparameterize_var, EncoderOutput, Networks};
use crate::rng::normal_vec;
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon: f64,
    pub kl_cat: f64,
    pub kl_gauss: f64,
    pub lambda: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.recon, self.kl_cat, self.kl_gauss, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Mean over the batch (leading axis) of the per-sample sum of squared
/// errors. A rank-1 tensor counts as a single sample.
pub fn noise_recon_loss(eps: &Tensor, eps_hat: &Tensor) -> Result<f64> {
    if eps.shape() != eps_hat.shape() {
        return Err(Error::shape(eps.shape(), eps_hat.shape()));
    }
    let n = match eps.shape() {
        [] | [_] => 1,
        [n, ..] => *n,
    };
    if n == 0 {
        return Ok(0.0);
    }
    let sse: f64 = eps.data().iter().zip(eps_hat.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sse / n as f64)
}

/// `KL(w ‖ π) = Σ_c w_c log(w_c / π_c)` with `0·log 0 = 0`.
pub fn categorical_kl(w: &Responsibilities, pi: &[f64]) -> Result<f64> {
    let w = w.as_slice();
    if w.len() != pi.len() {
        return Err(Error::shape(&[w.len()], &[pi.len()]));
    }
    let mut kl = 0.0;
    for (c, (&wc, &pc)) in w.iter().zip(pi).enumerate() {
        if wc == 0.0 {
            continue;
        }
        if pc <= 0.0 {
            return Err(Error::InfiniteKl { component: c });
        }
        kl += wc * (wc / pc).ln();
    }
    Ok(kl)
}

/// `Σ_c w_c KL(N(μ_φ, σ²_φ) ‖ N(μ_c, σ²_c))` for diagonal Gaussians.
pub fn gaussian_prior_kl(enc: &EncoderOutput, params: &GmmParams, w: &Responsibilities) -> Result<f64> {
    let j = params.dim();
    if enc.mu_phi.len() != j || enc.log_sigma2_phi.len() != j {
        return Err(Error::shape(&[j], &[enc.mu_phi.len()]));
    }
    if w.as_slice().len() != params.k() {
        return Err(Error::shape(&[params.k()], &[w.as_slice().len()]));
    }
    if params.sigma2.iter().flatten().any(|&s| !(s > 0.0)) {
        return Err(Error::InvalidArgument("mixture variances must be positive".into()));
    }
    let mut kl = 0.0;
    for (c, &wc) in w.as_slice().iter().enumerate() {
        if wc == 0.0 {
            continue;
        }
        kl += 0.5 * wc * mismatch(&enc.mu_phi, &enc.log_sigma2_phi, &params.mu[c], &params.sigma2[c]);
    }
    let entropy: f64 = enc.log_sigma2_phi.iter().map(|lv| 1.0 + lv).sum();
    Ok(kl - 0.5 * entropy)
}

/// `Σ_j log σ²_c + σ²_φ/σ²_c + (μ_φ − μ_c)²/σ²_c`.
fn mismatch(mu: &[f64], logvar: &[f64], mu_c: &[f64], s2_c: &[f64]) -> f64 {
    (0..mu.len())
        .map(|j| {
            let d = mu[j] - mu_c[j];
            s2_c[j].ln() + (logvar[j].exp() + d * d) / s2_c[j]
        })
        .sum()
}

/// Per-sample `[kl_cat, kl_gauss]` as an `[N, 2]` node.
///
/// Responsibilities are computed from the sampled `z`. With `detach_w` they
/// are treated as constants; otherwise gradients flow through them into `z`.
pub fn prior_matching_var<'g>(
    z: Var<'g>,
    mu: Var<'g>,
    logvar: Var<'g>,
    params: &GmmParams,
    detach_w: bool,
) -> Var<'g> {
    let (zv, mv, lvv) = (z.value(), mu.value(), logvar.value());
    let (n, j) = (zv.shape()[0], zv.shape()[1]);
    let k = params.k();
    assert_eq!(params.dim(), j);
    assert_eq!(mv.shape(), [n, j]);
    assert_eq!(lvv.shape(), [n, j]);

    let mut out = Vec::with_capacity(2 * n);
    // Per sample: w, log w and the mismatch sums A_c.
    let mut cache = Vec::with_capacity(n);
    for i in 0..n {
        let zi = &zv.data()[i * j..(i + 1) * j];
        let mi = &mv.data()[i * j..(i + 1) * j];
        let li = &lvv.data()[i * j..(i + 1) * j];
        let logits = params.log_joint(zi);
        let lse = log_sum_exp(&logits);
        let log_w: Vec<f64> = logits.iter().map(|l| l - lse).collect();
        let w: Vec<f64> = log_w.iter().map(|l| l.exp()).collect();
        let a: Vec<f64> = (0..k).map(|c| mismatch(mi, li, &params.mu[c], &params.sigma2[c])).collect();
        let mut kl_cat = 0.0;
        let mut kl_gauss = -0.5 * li.iter().map(|lv| 1.0 + lv).sum::<f64>();
        for c in 0..k {
            if w[c] > 0.0 {
                kl_cat += w[c] * (log_w[c] - params.pi[c].ln());
                kl_gauss += 0.5 * w[c] * a[c];
            }
        }
        out.extend([kl_cat, kl_gauss]);
        cache.push((w, log_w, a));
    }
    let value = Tensor::new(vec![n, 2], out).expect("length matches shape");
    let params = params.clone();
    z.graph().op(value, &[z, mu, logvar], move |g, mask| {
        let mut dz = Tensor::zeros(&[n, j]);
        let mut dmu = Tensor::zeros(&[n, j]);
        let mut dlv = Tensor::zeros(&[n, j]);
        for (i, (w, log_w, a)) in cache.iter().enumerate() {
            let (g1, g2) = (g.data()[2 * i], g.data()[2 * i + 1]);
            let row = i * j..(i + 1) * j;
            let zi = &zv.data()[row.clone()];
            let mi = &mv.data()[row.clone()];
            let li = &lvv.data()[row.clone()];
            for c in 0..k {
                if w[c] == 0.0 {
                    continue;
                }
                for jj in 0..j {
                    let s2 = params.sigma2[c][jj];
                    dmu.data_mut()[i * j + jj] += g2 * w[c] * (mi[jj] - params.mu[c][jj]) / s2;
                    dlv.data_mut()[i * j + jj] += g2 * 0.5 * w[c] * li[jj].exp() / s2;
                }
            }
            for jj in 0..j {
                dlv.data_mut()[i * j + jj] -= 0.5 * g2;
            }
            if detach_w || !mask[0] {
                continue;
            }
            // dL/dw_c, then back through the softmax over log-joint logits.
            let h: Vec<f64> = (0..k)
                .map(|c| {
                    if w[c] == 0.0 {
                        0.0
                    } else {
                        g1 * (log_w[c] + 1.0 - params.pi[c].ln()) + g2 * 0.5 * a[c]
                    }
                })
                .collect();
            let mean_h: f64 = w.iter().zip(&h).map(|(wc, hc)| wc * hc).sum();
            for c in 0..k {
                let ds = w[c] * (h[c] - mean_h);
                if ds == 0.0 {
                    continue;
                }
                for jj in 0..j {
                    dz.data_mut()[i * j + jj] -= ds * (zi[jj] - params.mu[c][jj]) / params.sigma2[c][jj];
                }
            }
        }
        vec![
            (mask[0] && !detach_w).then_some(dz),
            mask[1].then_some(dmu),
            mask[2].then_some(dlv),
        ]
    })
}

/// The random draws behind one loss evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct LossDraws {
    /// One timestep per sample, in `1..=T`.
    pub t: Vec<usize>,
    /// Forward-process noise, shaped like the image batch.
    pub eps: Tensor,
    /// Reparameterization noise, `[N, J]`.
    pub eps_z: Tensor,
}

impl LossDraws {
    pub fn sample<R: Rng + ?Sized>(x0_shape: &[usize], latent_dim: usize, timesteps: usize, rng: &mut R) -> Self {
        let t = (0..x0_shape[0]).map(|_| rng.random_range(1..=timesteps)).collect();
        Self::with_timesteps(x0_shape, latent_dim, t, rng)
    }

    /// Draws only the Gaussian noise, using the given timesteps.
    pub fn with_timesteps<R: Rng + ?Sized>(x0_shape: &[usize], latent_dim: usize, t: Vec<usize>, rng: &mut R) -> Self {
        let n = x0_shape[0];
        assert_eq!(t.len(), n, "one timestep per sample");
        let len = x0_shape.iter().product();
        let eps = Tensor::new(x0_shape.to_vec(), normal_vec(rng, len)).expect("length matches shape");
        let eps_z = Tensor::new(vec![n, latent_dim], normal_vec(rng, n * latent_dim)).expect("length matches shape");
        Self { t, eps, eps_z }
    }
}

/// Builds the batch loss into `g`, returning the scalar total node.
///
/// Without mixture parameters the prior-matching terms are skipped and
/// reported as zero; this is the warm-up objective.
#[allow(clippy::too_many_arguments)]
pub fn loss_var<'g>(
    g: &'g Graph,
    networks: &Networks,
    x0: &Tensor,
    params: Option<&GmmParams>,
    schedule: &NoiseSchedule,
    lambda: f64,
    draws: &LossDraws,
    detach_w: bool,
) -> Result<(Var<'g>, LossBreakdown)> {
    let n = networks.check_images(x0)?;
    if n == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidArgument(format!("lambda must be finite and non-negative, got {lambda}")));
    }
    if let Some(p) = params {
        p.validate()?;
        if p.dim() != networks.latent_dim() {
            return Err(Error::shape(&[networks.latent_dim()], &[p.dim()]));
        }
    }
    let x_t = forward_sample_batch(x0, &draws.t, &draws.eps, schedule)?;
    if draws.eps_z.shape() != [n, networks.latent_dim()] {
        return Err(Error::shape(&[n, networks.latent_dim()], draws.eps_z.shape()));
    }
    let (mu, logvar) = networks.encode_var(g, g.constant(x0.clone()));
    let z = reparameterize_var(mu, logvar, draws.eps_z.clone());
    let eps_hat = networks.predict_var(g, g.constant(x_t), &draws.t, z);
    let inv_n = 1.0 / n as f64;
    let recon = eps_hat.sub(g.constant(draws.eps.clone())).square().sum().scale(inv_n);
    let (total, kl_cat, kl_gauss) = match params {
        Some(p) => {
            let pm = prior_matching_var(z, mu, logvar, p, detach_w);
            let kl_cat = pm.narrow_cols(0, 1).sum().scale(inv_n);
            let kl_gauss = pm.narrow_cols(1, 1).sum().scale(inv_n);
            let total = recon.add(kl_cat.add(kl_gauss).scale(lambda));
            (total, kl_cat.value().item(), kl_gauss.value().item())
        }
        None => (recon, 0.0, 0.0),
    };
    let breakdown = LossBreakdown {
        recon: recon.value().item(),
        kl_cat,
        kl_gauss,
        lambda,
        total: total.value().item(),
    };
    Ok((total, breakdown))
}

/// Loss for a batch with explicit draws.
pub fn total_loss_with_draws(
    x0: &Tensor,
    networks: &Networks,
    params: &GmmParams,
    schedule: &NoiseSchedule,
    lambda: f64,
    draws: &LossDraws,
) -> Result<LossBreakdown> {
    let g = Graph::inference();
    Ok(loss_var(&g, networks, x0, Some(params), schedule, lambda, draws, false)?.1)
}

/// Loss for a batch, drawing `t`, `ε` and the reparameterization noise from `rng`.
pub fn total_loss<R: Rng + ?Sized>(
    x0: &Tensor,
    networks: &Networks,
    params: &GmmParams,
    schedule: &NoiseSchedule,
    lambda: f64,
    rng: &mut R,
) -> Result<LossBreakdown> {
    let draws = LossDraws::sample(x0.shape(), networks.latent_dim(), schedule.timesteps(), rng);
    total_loss_with_draws(x0, networks, params, schedule, lambda, &draws)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::NetworkConfig;
    use crate::rng::stream;
    use crate::schedule::make_linear_schedule;
    use proptest::prelude::*;
    use rand::Rng;

    fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor {
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    fn resp(w: &[f64]) -> Responsibilities {
        Responsibilities::new(w.to_vec()).unwrap()
    }

    #[test]
    fn recon_examples() {
        let e = tensor(&[1, 5], vec![1.0; 5]);
        assert_eq!(noise_recon_loss(&e, &e).unwrap(), 0.0);
        assert_eq!(noise_recon_loss(&e, &tensor(&[1, 5], vec![0.0; 5])).unwrap(), 5.0);
        assert_eq!(noise_recon_loss(&tensor(&[5], vec![1.0; 5]), &tensor(&[5], vec![0.0; 5])).unwrap(), 5.0);
        assert!(noise_recon_loss(&e, &tensor(&[5, 1], vec![0.0; 5])).is_err());
    }

    #[test]
    fn recon_matches_summation_oracle() {
        let mut r = stream(1, "recon", 0);
        let a = tensor(&[3, 2, 4], normal_vec(&mut r, 24));
        let b = tensor(&[3, 2, 4], normal_vec(&mut r, 24));
        let mut oracle = 0.0;
        for s in 0..3 {
            let mut per = 0.0;
            for i in 0..8 {
                let d = a.data()[s * 8 + i] - b.data()[s * 8 + i];
                per += d * d;
            }
            oracle += per;
        }
        oracle /= 3.0;
        approx::assert_relative_eq!(noise_recon_loss(&a, &b).unwrap(), oracle, max_relative = 1e-12);
    }

    #[test]
    fn categorical_examples() {
        assert_eq!(categorical_kl(&resp(&[0.3, 0.7]), &[0.3, 0.7]).unwrap(), 0.0);
        approx::assert_relative_eq!(
            categorical_kl(&resp(&[1.0, 0.0]), &[0.5, 0.5]).unwrap(),
            std::f64::consts::LN_2,
            max_relative = 1e-15
        );
        let oracle = 0.2 * (0.2f64 / 0.6).ln() + 0.8 * (0.8f64 / 0.4).ln();
        approx::assert_relative_eq!(
            categorical_kl(&resp(&[0.2, 0.8]), &[0.6, 0.4]).unwrap(),
            oracle,
            max_relative = 1e-12
        );
        assert!(matches!(
            categorical_kl(&resp(&[0.5, 0.5]), &[1.0, 0.0]),
            Err(Error::InfiniteKl { component: 1 })
        ));
        assert_eq!(categorical_kl(&resp(&[1.0, 0.0]), &[1.0, 0.0]).unwrap(), 0.0);
    }

    fn params(pi: Vec<f64>, mu: Vec<Vec<f64>>, sigma2: Vec<Vec<f64>>) -> GmmParams {
        GmmParams { pi, mu, sigma2 }
    }

    #[test]
    fn gaussian_examples() {
        let p = params(vec![0.4, 0.6], vec![vec![1.0, -1.0], vec![0.0, 2.0]], vec![vec![0.5, 2.0], vec![1.0, 1.0]]);
        let enc = EncoderOutput {
            mu_phi: vec![1.0, -1.0],
            log_sigma2_phi: vec![0.5f64.ln(), 2.0f64.ln()],
        };
        assert!(gaussian_prior_kl(&enc, &p, &resp(&[1.0, 0.0])).unwrap().abs() < 1e-15);

        let unit = params(vec![1.0], vec![vec![0.0]], vec![vec![1.0]]);
        let shifted = EncoderOutput {
            mu_phi: vec![1.0],
            log_sigma2_phi: vec![0.0],
        };
        approx::assert_relative_eq!(
            gaussian_prior_kl(&shifted, &unit, &resp(&[1.0])).unwrap(),
            0.5,
            max_relative = 1e-15
        );
        let mut bad = unit.clone();
        bad.sigma2[0][0] = 0.0;
        assert!(gaussian_prior_kl(&shifted, &bad, &resp(&[1.0])).is_err());
        assert!(gaussian_prior_kl(&shifted, &p, &resp(&[1.0, 0.0])).is_err());
    }

    /// Independent diagonal Gaussian log-density.
    fn log_gauss(z: &[f64], mu: &[f64], var: &[f64]) -> f64 {
        z.iter()
            .zip(mu)
            .zip(var)
            .map(|((x, m), v)| -0.5 * ((2.0 * std::f64::consts::PI * v).ln() + (x - m).powi(2) / v))
            .sum()
    }

    #[test]
    fn gaussian_kl_matches_monte_carlo() {
        let mut r = stream(2, "kl-mc", 0);
        let (k, j) = (3, 4);
        let p = params(
            vec![0.2, 0.5, 0.3],
            (0..k).map(|_| normal_vec(&mut r, j)).collect(),
            (0..k).map(|_| (0..j).map(|_| r.random_range(0.3..2.0)).collect()).collect(),
        );
        let enc = EncoderOutput {
            mu_phi: normal_vec(&mut r, j),
            log_sigma2_phi: (0..j).map(|_| r.random_range(-1.0..1.0)).collect(),
        };
        let w = resp(&[0.1, 0.6, 0.3]);
        let var: Vec<f64> = enc.log_sigma2_phi.iter().map(|l| l.exp()).collect();
        let draws = 1_000_000;
        let (mut sum, mut sum2) = (0.0, 0.0);
        for _ in 0..draws {
            let z: Vec<f64> = (0..j).map(|i| enc.mu_phi[i] + var[i].sqrt() * r.sample::<f64, _>(rand_distr::StandardNormal)).collect();
            let lq = log_gauss(&z, &enc.mu_phi, &var);
            let v: f64 = (0..k).map(|c| w.as_slice()[c] * (lq - log_gauss(&z, &p.mu[c], &p.sigma2[c]))).sum();
            sum += v;
            sum2 += v * v;
        }
        let mean = sum / draws as f64;
        let se = ((sum2 / draws as f64 - mean * mean) / draws as f64).sqrt();
        let exact = gaussian_prior_kl(&enc, &p, &w).unwrap();
        assert!((exact - mean).abs() < 3.0 * se, "exact {exact}, mc {mean} ± {se}");
    }

    fn random_instance(seed: u64, n: usize, k: usize, j: usize) -> (GmmParams, Tensor, Tensor, Tensor) {
        let mut r = stream(seed, "pm-instance", 0);
        let mut pi: Vec<f64> = (0..k).map(|_| r.random_range(0.1..1.0)).collect();
        let total: f64 = pi.iter().sum();
        pi.iter_mut().for_each(|p| *p /= total);
        let p = params(
            pi,
            (0..k).map(|_| normal_vec(&mut r, j)).collect(),
            (0..k).map(|_| (0..j).map(|_| r.random_range(0.5..2.0)).collect()).collect(),
        );
        let z = tensor(&[n, j], normal_vec(&mut r, n * j));
        let mu = tensor(&[n, j], normal_vec(&mut r, n * j));
        let lv = tensor(&[n, j], (0..n * j).map(|_| r.random_range(-1.0..1.0)).collect());
        (p, z, mu, lv)
    }

    #[test]
    fn fused_prior_matching_matches_plain_functions() {
        let (p, z, mu, lv) = random_instance(3, 4, 3, 5);
        let g = Graph::inference();
        let out = prior_matching_var(g.constant(z.clone()), g.constant(mu.clone()), g.constant(lv.clone()), &p, false);
        let out = out.value();
        for i in 0..4 {
            let row = i * 5..(i + 1) * 5;
            let w = p.responsibilities(&z.data()[row.clone()]).unwrap();
            let enc = EncoderOutput {
                mu_phi: mu.data()[row.clone()].to_vec(),
                log_sigma2_phi: lv.data()[row].to_vec(),
            };
            approx::assert_relative_eq!(out.data()[2 * i], categorical_kl(&w, &p.pi).unwrap(), max_relative = 1e-12);
            approx::assert_relative_eq!(
                out.data()[2 * i + 1],
                gaussian_prior_kl(&enc, &p, &w).unwrap(),
                max_relative = 1e-12
            );
        }
    }

    fn fused_gradient_check(detach_w: bool) {
        let (p, z, mu, lv) = random_instance(4, 3, 3, 4);
        let weights = [0.7, -1.3, 0.4, 2.0, -0.5, 1.1];
        // Weighted sum of the plain closed forms, with w computed from `z_w`.
        let f = |z_w: &Tensor, mu: &Tensor, lv: &Tensor| -> f64 {
            (0..3)
                .map(|i| {
                    let row = i * 4..(i + 1) * 4;
                    let w = p.responsibilities(&z_w.data()[row.clone()]).unwrap();
                    let enc = EncoderOutput {
                        mu_phi: mu.data()[row.clone()].to_vec(),
                        log_sigma2_phi: lv.data()[row].to_vec(),
                    };
                    weights[2 * i] * categorical_kl(&w, &p.pi).unwrap()
                        + weights[2 * i + 1] * gaussian_prior_kl(&enc, &p, &w).unwrap()
                })
                .sum()
        };
        let g = Graph::new();
        let (zv, mv, lvv) = (g.leaf(z.clone()), g.leaf(mu.clone()), g.leaf(lv.clone()));
        let loss = prior_matching_var(zv, mv, lvv, &p, detach_w)
            .mul(g.constant(tensor(&[3, 2], weights.to_vec())))
            .sum();
        let grads = g.backward(loss);
        let h = 1e-6;
        for (which, var) in [zv, mv, lvv].into_iter().enumerate() {
            let analytic = grads.get(var).cloned().unwrap_or_else(|| Tensor::zeros(&[3, 4]));
            for i in 0..12 {
                let eval = |delta: f64| {
                    let mut inputs = [z.clone(), mu.clone(), lv.clone()];
                    inputs[which].data_mut()[i] += delta;
                    let z_w = if detach_w { &z } else { &inputs[0] };
                    f(z_w, &inputs[1], &inputs[2])
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let a = analytic.data()[i];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
                assert!(rel < 1e-6, "input {which}[{i}]: analytic {a}, numeric {numeric}");
            }
        }
    }

    #[test]
    fn fused_prior_matching_gradients() {
        fused_gradient_check(false);
    }

    #[test]
    fn fused_prior_matching_gradients_with_detached_responsibilities() {
        fused_gradient_check(true);
    }

    fn tiny_setup() -> (Networks, GmmParams, NoiseSchedule, Tensor) {
        let net = Networks::new(NetworkConfig {
            image_shape: [1, 4, 4],
            latent_dim: 2,
            base_channels: 4,
            channel_mults: vec![1, 2],
            groups: 2,
            time_embed_dim: 8,
            param_seed: 1,
        })
        .unwrap();
        let p = params(vec![0.3, 0.7], vec![vec![0.5, -0.5], vec![-0.2, 0.1]], vec![vec![0.2, 0.3], vec![0.4, 0.1]]);
        let sched = make_linear_schedule(10, 1e-3, 0.2).unwrap();
        let x0 = tensor(&[3, 1, 4, 4], normal_vec(&mut stream(9, "x0", 0), 48));
        (net, p, sched, x0)
    }

    #[test]
    fn lambda_zero_gives_recon_and_draws_reproduce() {
        let (net, p, sched, x0) = tiny_setup();
        let a = total_loss(&x0, &net, &p, &sched, 0.0, &mut stream(5, "loss", 0)).unwrap();
        assert_eq!(a.total, a.recon);
        let b = total_loss(&x0, &net, &p, &sched, 0.1, &mut stream(5, "loss", 0)).unwrap();
        let c = total_loss(&x0, &net, &p, &sched, 0.1, &mut stream(5, "loss", 0)).unwrap();
        assert_eq!(b, c);
        assert_eq!(b.recon.to_bits(), a.recon.to_bits());
        assert!((b.total - (b.recon + 0.1 * (b.kl_cat + b.kl_gauss))).abs() < 1e-9);
        assert!(b.kl_cat >= -1e-9);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn standard_normal_prior_reduces_to_vae_kl(
            mu in prop::collection::vec(-3.0f64..3.0, 1..8),
            seed in 0u64..1000,
        ) {
            let mut r = stream(seed, "vae", 0);
            let lv: Vec<f64> = mu.iter().map(|_| r.random_range(-3.0..3.0)).collect();
            let j = mu.len();
            let p = params(vec![1.0], vec![vec![0.0; j]], vec![vec![1.0; j]]);
            let enc = EncoderOutput { mu_phi: mu.clone(), log_sigma2_phi: lv.clone() };
            let vae: f64 = 0.5 * mu.iter().zip(&lv).map(|(m, l)| l.exp() + m * m - 1.0 - l).sum::<f64>();
            let got = gaussian_prior_kl(&enc, &p, &resp(&[1.0])).unwrap();
            prop_assert!((got - vae).abs() <= 1e-12 * vae.abs().max(1.0));
        }

        #[test]
        fn total_loss_increases_with_lambda(l1 in 0.0f64..1.0, dl in 1e-3f64..1.0, seed in 0u64..50) {
            let (net, p, sched, x0) = tiny_setup();
            let draws = LossDraws::sample(x0.shape(), 2, 10, &mut stream(seed, "draws", 0));
            let a = total_loss_with_draws(&x0, &net, &p, &sched, l1, &draws).unwrap();
            let b = total_loss_with_draws(&x0, &net, &p, &sched, l1 + dl, &draws).unwrap();
            prop_assert!(a.kl_cat + a.kl_gauss > 0.0);
            prop_assert!(b.total > a.total);
            prop_assert!(a.is_finite() && b.is_finite());
        }

        #[test]
        fn clamped_extremes_stay_finite(sign in prop::bool::ANY, shift in -50.0f64..50.0) {
            let lvv = if sign { 20.0 } else { -20.0 };
            let p = params(vec![0.5, 0.5], vec![vec![0.0], vec![1.0]], vec![vec![crate::gmm::VARIANCE_FLOOR], vec![1.0]]);
            let g = Graph::inference();
            let out = prior_matching_var(
                g.constant(tensor(&[1, 1], vec![shift])),
                g.constant(tensor(&[1, 1], vec![shift])),
                g.constant(tensor(&[1, 1], vec![lvv])),
                &p,
                false,
            );
            prop_assert!(out.value().data().iter().all(|v| v.is_finite()));
        }
    }
}
