//! Diagonal-covariance Gaussian mixture over latent codes.
//!
//! Fitting uses classic EM from k-means++ seeds (or a warm start). All
//! densities are evaluated in log space and normalized with log-sum-exp, since
//! direct densities underflow for latent widths in the hundreds.

use std::fmt::Write as _;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower bound applied to every component variance after each update.
pub const VARIANCE_FLOOR: f64 = 1e-6;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Mixture prior `p(c) = Cat(π)`, `p(z | c) = N(μ_c, diag σ²_c)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmParams {
    pub pi: Vec<f64>,
    pub mu: Vec<Vec<f64>>,
    pub sigma2: Vec<Vec<f64>>,
}

/// Posterior cluster probabilities `w_c = p(c | z)` for one latent code.
#[derive(Debug, Clone, PartialEq)]
pub struct Responsibilities(Vec<f64>);

impl Responsibilities {
    /// Wraps a probability vector, checking it sums to one.
    pub fn new(w: Vec<f64>) -> Result<Self> {
        let sum: f64 = w.iter().sum();
        if w.is_empty() || w.iter().any(|&v| !(0.0..=1.0).contains(&v)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("not a probability vector: {w:?}")));
        }
        Ok(Self(w))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

pub(crate) fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Index of the largest value; ties go to the lowest index.
pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

impl GmmParams {
    pub fn k(&self) -> usize {
        self.pi.len()
    }

    pub fn dim(&self) -> usize {
        self.mu.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.k();
        if k == 0 || self.mu.len() != k || self.sigma2.len() != k {
            return Err(Error::InvalidArgument("mixture needs K ≥ 1 consistent components".into()));
        }
        let dim = self.dim();
        if dim == 0 || self.mu.iter().chain(&self.sigma2).any(|row| row.len() != dim) {
            return Err(Error::InvalidArgument("mixture component dimensions disagree".into()));
        }
        let sum: f64 = self.pi.iter().sum();
        if self.pi.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("mixing weights do not form a distribution: {:?}", self.pi)));
        }
        if self.sigma2.iter().flatten().any(|&s| !(s >= VARIANCE_FLOOR) || !s.is_finite()) {
            return Err(Error::InvalidArgument("component variance below the floor".into()));
        }
        if self.mu.iter().flatten().any(|m| !m.is_finite()) {
            return Err(Error::NonFinite("component mean".into()));
        }
        Ok(())
    }

    /// `log π_c + log N(z | μ_c, diag σ²_c)` for every component.
    pub fn log_joint(&self, z: &[f64]) -> Vec<f64> {
        (0..self.k())
            .map(|c| self.pi[c].ln() + log_normal_diag(z, &self.mu[c], &self.sigma2[c]))
            .collect()
    }

    /// `log p(z) = log Σ_c π_c N(z | μ_c, σ²_c)`.
    pub fn log_density(&self, z: &[f64]) -> f64 {
        log_sum_exp(&self.log_joint(z))
    }

    fn check_latent(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.dim() {
            return Err(Error::shape(&[self.dim()], &[z.len()]));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("latent code".into()));
        }
        Ok(())
    }

    pub fn responsibilities(&self, z: &[f64]) -> Result<Responsibilities> {
        self.check_latent(z)?;
        Ok(Responsibilities(softmax(&self.log_joint(z))))
    }

    /// Most probable component; exact ties resolve to the lowest index.
    pub fn assign(&self, z: &[f64]) -> Result<usize> {
        self.check_latent(z)?;
        Ok(argmax(&self.log_joint(z)))
    }

    pub fn sample_component<R: Rng + ?Sized>(&self, c: usize, rng: &mut R) -> Vec<f64> {
        self.mu[c]
            .iter()
            .zip(&self.sigma2[c])
            .map(|(m, s2)| m + s2.sqrt() * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    /// Draws `c ~ Cat(π)` then `z ~ N(μ_c, diag σ²_c)`.
    pub fn sample_prior<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, Vec<f64>) {
        let cat = WeightedIndex::new(&self.pi).expect("validated mixing weights");
        let c = cat.sample(rng);
        (c, self.sample_component(c, rng))
    }

    /// Plain-text export, one line per component: `c pi | mu.. | sigma2..`.
    pub fn to_text(&self) -> String {
        let mut out = format!("# K={} J={}\n", self.k(), self.dim());
        let join = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ");
        for c in 0..self.k() {
            let _ = writeln!(out, "{c} {} | {} | {}", self.pi[c], join(&self.mu[c]), join(&self.sigma2[c]));
        }
        out
    }
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|l| (l - lse).exp()).collect()
}

pub(crate) fn log_normal_diag(z: &[f64], mu: &[f64], sigma2: &[f64]) -> f64 {
    z.iter()
        .zip(mu)
        .zip(sigma2)
        .map(|((x, m), s2)| -0.5 * (LN_2PI + s2.ln() + (x - m) * (x - m) / s2))
        .sum()
}

/// Result of [`fit_gmm`].
#[derive(Debug, Clone)]
pub struct GmmFit {
    pub params: GmmParams,
    /// Total log-likelihood of the data under `params`.
    pub log_likelihood: f64,
    /// Log-likelihood of the initialization followed by one entry per EM iteration.
    pub history: Vec<f64>,
    pub iterations: usize,
}

fn check_data(z: &[Vec<f64>], k: usize) -> Result<usize> {
    if k == 0 {
        return Err(Error::InvalidArgument("need at least one component".into()));
    }
    if z.len() < k {
        return Err(Error::InvalidArgument(format!("{} points cannot support {k} components", z.len())));
    }
    let dim = z[0].len();
    if dim == 0 {
        return Err(Error::InvalidArgument("latent dimension must be positive".into()));
    }
    for (i, row) in z.iter().enumerate() {
        if row.len() != dim {
            return Err(Error::shape(&[dim], &[row.len()]));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("latent row {i}")));
        }
    }
    Ok(dim)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means++ seeding followed by one hard-assignment pass.
pub fn kmeans_pp_init<R: Rng + ?Sized>(z: &[Vec<f64>], k: usize, rng: &mut R) -> Result<GmmParams> {
    let dim = check_data(z, k)?;
    let n = z.len();
    let mut centers: Vec<Vec<f64>> = vec![z[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = z.iter().map(|x| sq_dist(x, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if acc > target && d > 0.0 {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        let center = z[next].clone();
        for (d, x) in d2.iter_mut().zip(z) {
            *d = d.min(sq_dist(x, &center));
        }
        centers.push(center);
    }

    let mut counts = vec![0usize; k];
    let mut sums = vec![vec![0.0; dim]; k];
    let labels: Vec<usize> = z
        .iter()
        .map(|x| {
            let dists: Vec<f64> = centers.iter().map(|c| -sq_dist(x, c)).collect();
            argmax(&dists)
        })
        .collect();
    for (x, &c) in z.iter().zip(&labels) {
        counts[c] += 1;
        for (s, v) in sums[c].iter_mut().zip(x) {
            *s += v;
        }
    }
    let mu: Vec<Vec<f64>> = (0..k)
        .map(|c| {
            if counts[c] == 0 {
                centers[c].clone()
            } else {
                sums[c].iter().map(|s| s / counts[c] as f64).collect()
            }
        })
        .collect();
    let mut sq = vec![vec![0.0; dim]; k];
    for (x, &c) in z.iter().zip(&labels) {
        for ((s, v), m) in sq[c].iter_mut().zip(x).zip(&mu[c]) {
            *s += (v - m) * (v - m);
        }
    }
    let sigma2 = (0..k)
        .map(|c| {
            sq[c]
                .iter()
                .map(|s| if counts[c] == 0 { VARIANCE_FLOOR } else { (s / counts[c] as f64).max(VARIANCE_FLOOR) })
                .collect()
        })
        .collect();
    let pi = counts.iter().map(|&c| c as f64 / n as f64).collect();
    Ok(GmmParams { pi, mu, sigma2 })
}

/// Fits a `k`-component mixture to the rows of `z` with EM from k-means++ seeds.
///
/// Stops once an iteration improves the total log-likelihood by less than
/// `tol`, or after `max_iters` iterations.
pub fn fit_gmm<R: Rng + ?Sized>(
    z: &[Vec<f64>],
    k: usize,
    max_iters: usize,
    tol: f64,
    rng: &mut R,
) -> Result<GmmFit> {
    let init = kmeans_pp_init(z, k, rng)?;
    fit_gmm_from(z, init, max_iters, tol)
}

/// EM from explicit starting parameters (warm start).
pub fn fit_gmm_from(z: &[Vec<f64>], init: GmmParams, max_iters: usize, tol: f64) -> Result<GmmFit> {
    let dim = check_data(z, init.k())?;
    if init.dim() != dim {
        return Err(Error::shape(&[init.dim()], &[dim]));
    }
    init.validate()?;
    let n = z.len();
    let k = init.k();

    let e_step = |params: &GmmParams| -> (f64, Vec<Vec<f64>>) {
        let mut ll = 0.0;
        let resp = z
            .iter()
            .map(|x| {
                let logits = params.log_joint(x);
                let lse = log_sum_exp(&logits);
                ll += lse;
                logits.iter().map(|l| (l - lse).exp()).collect()
            })
            .collect();
        (ll, resp)
    };

    let m_step = |prev: &GmmParams, resp: &[Vec<f64>]| -> GmmParams {
        let mut next = prev.clone();
        for c in 0..k {
            let nc: f64 = resp.iter().map(|r| r[c]).sum();
            if nc <= f64::MIN_POSITIVE {
                next.pi[c] = 0.0;
                continue;
            }
            next.pi[c] = nc / n as f64;
            let mut mean = vec![0.0; dim];
            for (x, r) in z.iter().zip(resp) {
                for (m, v) in mean.iter_mut().zip(x) {
                    *m += r[c] * v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= nc);
            let mut var = vec![0.0; dim];
            for (x, r) in z.iter().zip(resp) {
                for ((s, v), m) in var.iter_mut().zip(x).zip(&mean) {
                    *s += r[c] * (v - m) * (v - m);
                }
            }
            next.sigma2[c] = var.iter().map(|s| (s / nc).max(VARIANCE_FLOOR)).collect();
            next.mu[c] = mean;
        }
        next
    };

    let mut params = init;
    let (mut ll, mut resp) = e_step(&params);
    let mut history = vec![ll];
    let mut iterations = 0;
    while iterations < max_iters {
        params = m_step(&params, &resp);
        let (new_ll, new_resp) = e_step(&params);
        iterations += 1;
        history.push(new_ll);
        debug_assert!(
            new_ll >= ll - 1e-9 * ll.abs().max(1.0),
            "EM log-likelihood decreased: {ll} -> {new_ll}"
        );
        let improvement = new_ll - ll;
        ll = new_ll;
        resp = new_resp;
        if improvement < tol {
            break;
        }
    }
    if !ll.is_finite() {
        return Err(Error::NonFinite("mixture log-likelihood".into()));
    }
    Ok(GmmFit {
        params,
        log_likelihood: ll,
        history,
        iterations,
    })
}
