//! Forward noising, the true posterior, conditional reverse steps and
//! ancestral sampling.

use rand::Rng;

use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::gmm::GmmParams;
use crate::rng::normal_vec;
use crate::schedule::NoiseSchedule;

/// Anything that predicts the noise in `x_t` given timestep and latent code.
///
/// `x_t` is an `[N, C, H, W]` batch and `z` is `[N, J]`; all samples share `t`.
pub trait NoisePredictor {
    fn latent_dim(&self) -> usize;

    fn predict_noise(&self, x_t: &Tensor, t: usize, z: &Tensor) -> Result<Tensor>;
}

/// Adapts a closure into a [`NoisePredictor`].
pub struct FnPredictor<F> {
    latent_dim: usize,
    f: F,
}

impl<F> FnPredictor<F>
where
    F: Fn(&Tensor, usize, &Tensor) -> Tensor,
{
    pub fn new(latent_dim: usize, f: F) -> Self {
        Self { latent_dim, f }
    }
}

impl<F> NoisePredictor for FnPredictor<F>
where
    F: Fn(&Tensor, usize, &Tensor) -> Tensor,
{
    fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    fn predict_noise(&self, x_t: &Tensor, t: usize, z: &Tensor) -> Result<Tensor> {
        Ok((self.f)(x_t, t, z))
    }
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(a.shape(), b.shape()));
    }
    Ok(())
}

fn combine(a: &Tensor, ca: f64, b: &Tensor, cb: f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| ca * x + cb * y).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

/// `x_t = √ᾱ_t·x0 + √(1 − ᾱ_t)·ε`.
pub fn forward_sample(x0: &Tensor, t: usize, eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    schedule.validate_timestep(t)?;
    same_shape(x0, eps)?;
    let ab = schedule.alpha_bar(t);
    Ok(combine(x0, ab.sqrt(), eps, (1.0 - ab).sqrt()))
}

/// [`forward_sample`] with a separate timestep per sample along the first axis.
pub fn forward_sample_batch(
    x0: &Tensor,
    timesteps: &[usize],
    eps: &Tensor,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    same_shape(x0, eps)?;
    let n = x0.shape().first().copied().unwrap_or(0);
    if timesteps.len() != n {
        return Err(Error::shape(&[n], &[timesteps.len()]));
    }
    let per = x0.len() / n.max(1);
    let mut out = x0.clone();
    for (i, &t) in timesteps.iter().enumerate() {
        schedule.validate_timestep(t)?;
        let (a, b) = (schedule.alpha_bar(t).sqrt(), (1.0 - schedule.alpha_bar(t)).sqrt());
        let range = i * per..(i + 1) * per;
        for (o, e) in out.data_mut()[range.clone()].iter_mut().zip(&eps.data()[range]) {
            *o = a * *o + b * e;
        }
    }
    Ok(out)
}

/// Mean and variance of `q(x_{t−1} | x_t, x0)`, where `eps` produced `x_t` from `x0`.
pub fn true_posterior_params(
    x_t: &Tensor,
    eps: &Tensor,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<(Tensor, f64)> {
    schedule.validate_timestep(t)?;
    same_shape(x_t, eps)?;
    let mean = posterior_mean(x_t, eps, t, schedule);
    let var = (1.0 - schedule.alpha_bar(t - 1)) / (1.0 - schedule.alpha_bar(t)) * schedule.beta(t);
    Ok((mean, var))
}

/// `(1/√α_t)·(x_t − β_t/√(1 − ᾱ_t)·ε)`, shared by the true posterior and the model.
fn posterior_mean(x_t: &Tensor, eps: &Tensor, t: usize, schedule: &NoiseSchedule) -> Tensor {
    let inv_sqrt_alpha = 1.0 / schedule.alpha(t).sqrt();
    let coef = schedule.beta(t) / (1.0 - schedule.alpha_bar(t)).sqrt();
    combine(x_t, inv_sqrt_alpha, eps, -coef * inv_sqrt_alpha)
}

fn check_latents(predictor: &dyn NoisePredictor, x_t: &Tensor, z: &Tensor) -> Result<()> {
    let n = x_t.shape().first().copied().unwrap_or(0);
    let expected = [n, predictor.latent_dim()];
    if z.shape() != expected {
        return Err(Error::shape(&expected, z.shape()));
    }
    Ok(())
}

/// Mean of `p_θ(x_{t−1} | x_t, z)`.
pub fn reverse_mean(
    x_t: &Tensor,
    t: usize,
    z: &Tensor,
    predictor: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    schedule.validate_timestep(t)?;
    check_latents(predictor, x_t, z)?;
    let eps_hat = predictor.predict_noise(x_t, t, z)?;
    same_shape(x_t, &eps_hat)?;
    Ok(posterior_mean(x_t, &eps_hat, t, schedule))
}

/// One draw from `N(μ_θ(x_t, t, z), β_t·I)`; at `t = 1` the mean itself.
pub fn reverse_step<R: Rng + ?Sized>(
    x_t: &Tensor,
    t: usize,
    z: &Tensor,
    predictor: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Tensor> {
    let noise = if t > 1 {
        Some(Tensor::new(x_t.shape().to_vec(), normal_vec(rng, x_t.len()))?)
    } else {
        None
    };
    reverse_step_with_noise(x_t, t, z, predictor, schedule, noise.as_ref())
}

/// [`reverse_step`] with the injected standard-normal noise supplied by the caller.
/// `None` injects nothing.
pub fn reverse_step_with_noise(
    x_t: &Tensor,
    t: usize,
    z: &Tensor,
    predictor: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    noise: Option<&Tensor>,
) -> Result<Tensor> {
    let mean = reverse_mean(x_t, t, z, predictor, schedule)?;
    match noise {
        Some(noise) if t > 1 => {
            same_shape(&mean, noise)?;
            Ok(combine(&mean, 1.0, noise, schedule.beta(t).sqrt()))
        }
        _ => Ok(mean),
    }
}

/// What the generated samples are conditioned on.
pub enum Condition<'a> {
    /// One latent row per sample, `[n, J]`.
    Latents(Tensor),
    /// Latents drawn from the given mixture components (0-based indices).
    Clusters { params: &'a GmmParams, indices: Vec<usize> },
}

/// Output of [`generate`].
#[derive(Debug, Clone)]
pub struct Generated {
    /// `[n, C, H, W]`, unclipped.
    pub images: Tensor,
    /// The latent code each image was denoised with.
    pub latents: Tensor,
    /// Conditioning component per image, when generated from clusters.
    pub clusters: Option<Vec<usize>>,
}

/// Ancestral sampling: `x_T ~ N(0, I)` followed by `T` reverse steps.
pub fn generate<R: Rng + ?Sized>(
    image_shape: [usize; 3],
    condition: Condition<'_>,
    predictor: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Generated> {
    let j = predictor.latent_dim();
    let (latents, clusters) = match condition {
        Condition::Latents(z) => {
            if z.shape().len() != 2 || z.shape()[1] != j {
                return Err(Error::shape(&[z.shape().first().copied().unwrap_or(0), j], z.shape()));
            }
            (z, None)
        }
        Condition::Clusters { params, indices } => {
            params.validate()?;
            if params.dim() != j {
                return Err(Error::shape(&[j], &[params.dim()]));
            }
            if let Some(&bad) = indices.iter().find(|&&c| c >= params.k()) {
                return Err(Error::InvalidArgument(format!(
                    "cluster index {bad} outside 0..{}",
                    params.k()
                )));
            }
            let data = indices.iter().flat_map(|&c| params.sample_component(c, rng)).collect();
            (Tensor::new(vec![indices.len(), j], data)?, Some(indices))
        }
    };
    let n = latents.shape()[0];
    let mut shape = vec![n];
    shape.extend_from_slice(&image_shape);
    let len: usize = shape.iter().product();
    let mut x = Tensor::new(shape, normal_vec(rng, len))?;
    for t in (1..=schedule.timesteps()).rev() {
        x = reverse_step(&x, t, &latents, predictor, schedule, rng)?;
    }
    if x.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("generated image".into()));
    }
    Ok(Generated {
        images: x,
        latents,
        clusters,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::make_linear_schedule;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor {
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    fn zero_predictor(j: usize) -> FnPredictor<impl Fn(&Tensor, usize, &Tensor) -> Tensor> {
        FnPredictor::new(j, |x: &Tensor, _, _: &Tensor| Tensor::zeros(x.shape()))
    }

    #[test]
    fn forward_sample_degenerate_inputs() {
        let s = make_linear_schedule(10, 0.01, 0.2).unwrap();
        let x0 = t(&[1, 1, 1, 3], vec![0.5, -1.0, 0.25]);
        let zero = Tensor::zeros(&[1, 1, 1, 3]);
        let out = forward_sample(&x0, 4, &zero, &s).unwrap();
        for (o, x) in out.data().iter().zip(x0.data()) {
            assert_eq!(*o, s.alpha_bar(4).sqrt() * x);
        }
        let out = forward_sample(&zero, 4, &x0, &s).unwrap();
        for (o, e) in out.data().iter().zip(x0.data()) {
            assert_eq!(*o, (1.0 - s.alpha_bar(4)).sqrt() * e);
        }
        assert!(forward_sample(&x0, 4, &Tensor::zeros(&[1, 1, 1, 2]), &s).is_err());
        assert!(forward_sample(&x0, 0, &zero, &s).is_err());
        assert!(forward_sample(&x0, 11, &zero, &s).is_err());
    }

    #[test]
    fn forward_sample_is_linear() {
        let s = make_linear_schedule(50, 1e-3, 0.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut r = || t(&[2, 1, 2, 2], normal_vec(&mut rng, 8));
        let (a, b, e1, e2) = (r(), r(), r(), r());
        let (p, q) = (0.3, -1.7);
        let lhs = forward_sample(&combine(&a, p, &b, q), 17, &combine(&e1, p, &e2, q), &s).unwrap();
        let fa = forward_sample(&a, 17, &e1, &s).unwrap();
        let fb = forward_sample(&b, 17, &e2, &s).unwrap();
        let rhs = combine(&fa, p, &fb, q);
        for (l, r) in lhs.data().iter().zip(rhs.data()) {
            assert!((l - r).abs() <= 1e-12);
        }
    }

    #[test]
    fn batch_forward_matches_per_sample() {
        let s = make_linear_schedule(20, 1e-3, 0.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x0 = t(&[2, 1, 1, 2], normal_vec(&mut rng, 4));
        let eps = t(&[2, 1, 1, 2], normal_vec(&mut rng, 4));
        let out = forward_sample_batch(&x0, &[3, 19], &eps, &s).unwrap();
        for (i, &step) in [3usize, 19].iter().enumerate() {
            let xi = t(&[1, 1, 1, 2], x0.data()[2 * i..2 * i + 2].to_vec());
            let ei = t(&[1, 1, 1, 2], eps.data()[2 * i..2 * i + 2].to_vec());
            let single = forward_sample(&xi, step, &ei, &s).unwrap();
            assert_eq!(single.data(), &out.data()[2 * i..2 * i + 2]);
        }
    }

    #[test]
    fn posterior_special_cases() {
        let s = make_linear_schedule(10, 0.01, 0.2).unwrap();
        let x_t = t(&[1, 1, 1, 2], vec![0.3, -0.6]);
        let (mean, _) = true_posterior_params(&x_t, &Tensor::zeros(&[1, 1, 1, 2]), 5, &s).unwrap();
        for (m, x) in mean.data().iter().zip(x_t.data()) {
            assert!((m - x / s.alpha(5).sqrt()).abs() < 1e-15);
        }
        let (_, var) = true_posterior_params(&x_t, &x_t, 1, &s).unwrap();
        assert_eq!(var, 0.0);
    }

    #[test]
    fn posterior_matches_monte_carlo_conditioning() {
        // One pixel: simulate (x_{t-1}, x_t) given x0 and keep draws whose x_t
        // falls in a narrow window around a target value.
        let s = make_linear_schedule(20, 1e-3, 0.1).unwrap();
        let (step, x0) = (8usize, 0.6);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let (ab_prev, beta) = (s.alpha_bar(step - 1), s.beta(step));
        let target = ab_prev.sqrt() * x0 * (1.0 - beta).sqrt() + 0.1;
        let half_width = 0.004;
        let mut kept = Vec::new();
        for _ in 0..2_000_000 {
            let e1: f64 = rng.sample(StandardNormal);
            let e2: f64 = rng.sample(StandardNormal);
            let prev = ab_prev.sqrt() * x0 + (1.0 - ab_prev).sqrt() * e1;
            let cur = (1.0 - beta).sqrt() * prev + beta.sqrt() * e2;
            if (cur - target).abs() < half_width {
                kept.push(prev);
            }
        }
        let n = kept.len() as f64;
        assert!(n > 5000.0, "too few conditioned draws: {n}");
        let mean = kept.iter().sum::<f64>() / n;
        let var = kept.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);

        let ab = s.alpha_bar(step);
        let eps = (target - ab.sqrt() * x0) / (1.0 - ab).sqrt();
        let (mu_q, var_q) =
            true_posterior_params(&t(&[1, 1, 1, 1], vec![target]), &t(&[1, 1, 1, 1], vec![eps]), step, &s).unwrap();
        let mean_se = (var_q / n).sqrt();
        let var_se = var_q * (2.0 / (n - 1.0)).sqrt();
        assert!((mean - mu_q.data()[0]).abs() < 3.0 * mean_se, "mean {mean} vs {}", mu_q.data()[0]);
        assert!((var - var_q).abs() < 3.0 * var_se, "var {var} vs {var_q}");
    }

    #[test]
    fn final_step_is_deterministic() {
        let s = make_linear_schedule(10, 0.01, 0.2).unwrap();
        let p = zero_predictor(2);
        let x = t(&[1, 1, 1, 2], vec![0.1, 0.2]);
        let z = Tensor::zeros(&[1, 2]);
        let a = reverse_step(&x, 1, &z, &p, &s, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = reverse_step(&x, 1, &z, &p, &s, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_predictor_mean_scales_input() {
        let s = make_linear_schedule(10, 0.01, 0.2).unwrap();
        let x = t(&[1, 1, 1, 2], vec![0.1, -0.4]);
        let mean = reverse_mean(&x, 6, &Tensor::zeros(&[1, 3]), &zero_predictor(3), &s).unwrap();
        for (m, v) in mean.data().iter().zip(x.data()) {
            assert_eq!(*m, v / s.alpha(6).sqrt());
        }
    }

    #[test]
    fn predictor_shape_is_checked() {
        let s = make_linear_schedule(10, 0.01, 0.2).unwrap();
        let bad = FnPredictor::new(1, |_: &Tensor, _, _: &Tensor| Tensor::zeros(&[1, 1, 1, 5]));
        let x = Tensor::zeros(&[1, 1, 1, 2]);
        assert!(reverse_mean(&x, 3, &Tensor::zeros(&[1, 1]), &bad, &s).is_err());
        assert!(reverse_mean(&x, 3, &Tensor::zeros(&[1, 2]), &zero_predictor(1), &s).is_err());
    }

    #[test]
    fn oracle_predictor_reproduces_posterior_mean() {
        let s = make_linear_schedule(100, 1e-3, 0.2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for step in [2usize, 10, 55, 100] {
            let x0 = t(&[2, 1, 2, 2], normal_vec(&mut rng, 8));
            let eps = t(&[2, 1, 2, 2], normal_vec(&mut rng, 8));
            let x_t = forward_sample(&x0, step, &eps, &s).unwrap();
            let known = eps.clone();
            let oracle = FnPredictor::new(1, move |_: &Tensor, _, _: &Tensor| known.clone());
            let model = reverse_mean(&x_t, step, &Tensor::zeros(&[2, 1]), &oracle, &s).unwrap();
            let (truth, _) = true_posterior_params(&x_t, &eps, step, &s).unwrap();
            for (m, q) in model.data().iter().zip(truth.data()) {
                assert!((m - q).abs() <= 1e-6 * q.abs().max(1e-12));
            }
        }
    }

    #[test]
    fn noiseless_oracle_chain_recovers_x0() {
        let s = make_linear_schedule(100, 1e-3, 0.2).unwrap();
        let x0 = 0.37;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let eps_t: f64 = rng.sample(StandardNormal);
        let mut x = t(&[1, 1, 1, 1], vec![s.alpha_bar(100).sqrt() * x0 + (1.0 - s.alpha_bar(100)).sqrt() * eps_t]);
        let sched = s.clone();
        let oracle = FnPredictor::new(1, move |xt: &Tensor, step, _: &Tensor| {
            let ab = sched.alpha_bar(step);
            t(&[1, 1, 1, 1], vec![(xt.data()[0] - ab.sqrt() * x0) / (1.0 - ab).sqrt()])
        });
        for step in (1..=100).rev() {
            x = reverse_step_with_noise(&x, step, &Tensor::zeros(&[1, 1]), &oracle, &s, None).unwrap();
        }
        assert!((x.data()[0] - x0).abs() <= 1e-4 * x0.abs());
    }

    #[test]
    fn generation_bookkeeping_and_determinism() {
        let s = make_linear_schedule(5, 0.01, 0.2).unwrap();
        let p = FnPredictor::new(2, |x: &Tensor, _, _: &Tensor| combine(x, 0.1, x, 0.0));
        let params = GmmParams {
            pi: vec![0.5, 0.5],
            mu: vec![vec![0.0, 0.0], vec![3.0, 3.0]],
            sigma2: vec![vec![1.0, 1.0], vec![1.0, 1.0]],
        };
        let run = |seed| {
            let cond = Condition::Clusters { params: &params, indices: vec![0, 0, 1, 1] };
            generate([1, 2, 2], cond, &p, &s, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
        };
        let (a, b) = (run(4), run(4));
        assert_eq!(a.images, b.images);
        assert_eq!(a.images.shape(), &[4, 1, 2, 2]);
        assert_eq!(a.clusters.as_deref(), Some(&[0, 0, 1, 1][..]));
        assert!(a.images.data().iter().all(|v| v.is_finite()));

        let bad = Condition::Clusters { params: &params, indices: vec![2] };
        assert!(generate([1, 2, 2], bad, &p, &s, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }
}
