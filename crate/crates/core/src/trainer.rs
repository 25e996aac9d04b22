//! Alternating EM training: mixture fitting on encoder latents (E-step) and
//! gradient updates of both networks with the mixture frozen (M-step).

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Tensor};
use crate::data::ImageSet;
use crate::error::{Error, Result};
use crate::gmm::{fit_gmm, fit_gmm_from, GmmFit, GmmParams};
use crate::networks::{reparameterize, NetworkConfig, Networks};
use crate::nn::Adam;
use crate::objective::{loss_var, LossBreakdown, LossDraws};
use crate::rng;
use crate::schedule::{NoiseSchedule, ScheduleSpec};

/// Which latent summary the E-step fits the mixture to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LatentSource {
    /// Posterior means `μ_φ`.
    #[default]
    Mean,
    /// One reparameterized draw per image.
    Sample,
}

/// How M-step epochs draw diffusion timesteps. Both give every sample a
/// uniform `t`; stratified draws cover `1..=T` evenly across each epoch,
/// which removes most of the epoch-to-epoch noise in the loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TimestepSampling {
    #[default]
    Independent,
    Stratified,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Number of mixture components.
    pub k: usize,
    pub lambda: f64,
    /// Adam step size for the E/M rounds.
    pub learning_rate: f64,
    /// Adam step size during warm-up; `None` uses `learning_rate`.
    pub warmup_learning_rate: Option<f64>,
    pub batch_size: usize,
    pub mstep_epochs: usize,
    pub em_rounds: usize,
    pub warmup_epochs: usize,
    pub gmm_max_iters: usize,
    pub gmm_tol: f64,
    pub seed: u64,
    pub estep_latents: LatentSource,
    /// Start each E-step after the first from the previous mixture.
    pub warm_start: bool,
    /// Treat responsibilities as constants in the loss gradient.
    pub detach_w: bool,
    pub timestep_sampling: TimestepSampling,
    /// Write a checkpoint every this many rounds; 0 disables.
    pub checkpoint_every: usize,
    pub schedule: ScheduleSpec,
    pub network: NetworkConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            k: 10,
            lambda: 0.01,
            learning_rate: 1e-4,
            warmup_learning_rate: None,
            batch_size: 64,
            mstep_epochs: 5,
            em_rounds: 10,
            warmup_epochs: 5,
            gmm_max_iters: 200,
            gmm_tol: 1e-6,
            seed: 0,
            estep_latents: LatentSource::Mean,
            warm_start: true,
            detach_w: false,
            timestep_sampling: TimestepSampling::Independent,
            checkpoint_every: 1,
            schedule: ScheduleSpec::default(),
            network: NetworkConfig::default(),
        }
    }
}

impl TrainConfig {
    /// The desk-scale configuration: 16×16 single-channel images, three
    /// clusters, J = 8, T = 100.
    pub fn desk() -> Self {
        Self {
            k: 3,
            lambda: 0.01,
            learning_rate: 3e-4,
            warmup_learning_rate: Some(2e-3),
            batch_size: 8,
            mstep_epochs: 6,
            em_rounds: 8,
            warmup_epochs: 5,
            estep_latents: LatentSource::Sample,
            timestep_sampling: TimestepSampling::Stratified,
            schedule: ScheduleSpec {
                timesteps: 100,
                beta_start: 1e-3,
                beta_end: 0.2,
            },
            network: NetworkConfig::default(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.into()));
        if self.k == 0 || self.batch_size == 0 || self.gmm_max_iters == 0 {
            return bad("k, batch_size and gmm_max_iters must be at least 1");
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return bad("lambda must be finite and non-negative");
        }
        if self.em_rounds > 0 && self.lambda == 0.0 {
            return bad("lambda must be positive when EM rounds run");
        }
        let rate_ok = |r: f64| r.is_finite() && r >= 0.0;
        if !rate_ok(self.learning_rate) || !self.warmup_learning_rate.is_none_or(rate_ok) {
            return bad("learning rates must be finite and non-negative");
        }
        if !(self.gmm_tol.is_finite() && self.gmm_tol >= 0.0) {
            return bad("gmm_tol must be finite and non-negative");
        }
        self.network.validate()?;
        self.schedule.build().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }
}

/// One optimization step, as written to the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    /// 0 during warm-up.
    pub em_round: usize,
    pub step: u64,
    pub recon: f64,
    pub kl_cat: f64,
    pub kl_gauss: f64,
    pub total: f64,
}

/// Mean total loss over one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub em_round: usize,
    pub epoch: usize,
    pub mean_total: f64,
}

/// Everything needed to continue a run.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub networks: Networks,
    pub optimizer: Adam,
    pub gmm: Option<GmmParams>,
    /// Completed EM rounds; 0 once warm-up is done.
    pub round: usize,
    pub epochs: Vec<EpochSummary>,
}

impl TrainState {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        let networks = Networks::new(config.network.clone())?;
        let optimizer = Adam::new(networks.params(), config.learning_rate);
        Ok(Self {
            networks,
            optimizer,
            gmm: None,
            round: 0,
            epochs: Vec::new(),
        })
    }
}

/// Receives log records and checkpoint opportunities during training.
pub trait TrainSink {
    fn record(&mut self, _record: &LogRecord) -> Result<()> {
        Ok(())
    }

    fn checkpoint(&mut self, _state: &TrainState, _config: &TrainConfig) -> Result<()> {
        Ok(())
    }
}

/// Discards everything.
pub struct NullSink;

impl TrainSink for NullSink {}

/// Collects records in memory.
#[derive(Default)]
pub struct MemorySink {
    pub records: Vec<LogRecord>,
}

impl TrainSink for MemorySink {
    fn record(&mut self, record: &LogRecord) -> Result<()> {
        self.records.push(*record);
        Ok(())
    }
}

/// Latents the E-step fits to, one row per image.
pub fn extract_latents(images: &ImageSet, networks: &Networks, source: LatentSource, seed: u64, round: usize) -> Result<Vec<Vec<f64>>> {
    let enc = networks.encode(&images.to_tensor())?;
    match source {
        LatentSource::Mean => Ok(enc.into_iter().map(|e| e.mu_phi).collect()),
        LatentSource::Sample => {
            let mut r = rng::stream(seed, "estep-sample", round as u64);
            enc.iter()
                .map(|e| reparameterize(e, &rng::normal_vec(&mut r, e.mu_phi.len())))
                .collect()
        }
    }
}

/// Fits the mixture to the current latents. `previous` warm-starts the fit.
pub fn e_step(
    images: &ImageSet,
    networks: &Networks,
    config: &TrainConfig,
    previous: Option<&GmmParams>,
    round: usize,
) -> Result<GmmFit> {
    if images.len() < config.k {
        return Err(Error::InvalidArgument(format!(
            "dataset has {} images, fewer than k = {}",
            images.len(),
            config.k
        )));
    }
    let z = extract_latents(images, networks, config.estep_latents, config.seed, round)?;
    match previous {
        Some(p) if config.warm_start => fit_gmm_from(&z, p.clone(), config.gmm_max_iters, config.gmm_tol),
        _ => {
            let mut r = rng::stream(config.seed, "estep-init", round as u64);
            fit_gmm(&z, config.k, config.gmm_max_iters, config.gmm_tol, &mut r)
        }
    }
}

/// Runs `epochs` passes of mini-batch Adam on the loss with `params` frozen.
/// Without `params` the prior-matching terms are off (warm-up).
#[allow(clippy::too_many_arguments)]
pub fn m_step(
    images: &ImageSet,
    params: Option<&GmmParams>,
    state: &mut TrainState,
    schedule: &NoiseSchedule,
    config: &TrainConfig,
    round: usize,
    epochs: usize,
    sink: &mut dyn TrainSink,
) -> Result<Vec<LogRecord>> {
    let lambda = if params.is_some() { config.lambda } else { 0.0 };
    let n = images.len();
    if n == 0 {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    let j = state.networks.latent_dim();
    let mut records = Vec::new();
    for epoch in 0..epochs {
        let mut r = rng::stream(config.seed, "mstep", (round as u64) << 32 | epoch as u64);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut r);
        let strata = match config.timestep_sampling {
            TimestepSampling::Independent => None,
            TimestepSampling::Stratified => Some(stratified_timesteps(n, schedule.timesteps(), &mut r)),
        };
        let mut sum = 0.0;
        let mut batches = 0usize;
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let x0 = images.batch(batch);
            let draws = match &strata {
                None => LossDraws::sample(x0.shape(), j, schedule.timesteps(), &mut r),
                Some(t) => {
                    let start = b * config.batch_size;
                    LossDraws::with_timesteps(x0.shape(), j, t[start..start + batch.len()].to_vec(), &mut r)
                }
            };
            let g = Graph::new();
            let (total, loss) = loss_var(&g, &state.networks, &x0, params, schedule, lambda, &draws, config.detach_w)?;
            let record = log_record(round, state.optimizer.steps() + 1, &loss);
            if !loss.is_finite() {
                log::error!("non-finite loss: {}", serde_json::to_string(&record).unwrap_or_default());
                sink.record(&record)?;
                return Err(Error::NonFinite(format!(
                    "loss at round {round}, step {}: {}",
                    record.step,
                    serde_json::to_string(&record).unwrap_or_default()
                )));
            }
            let grads = g.backward(total).param_grads(state.networks.params().len());
            if grads.iter().flatten().any(|t: &Tensor| t.data().iter().any(|v| !v.is_finite())) {
                return Err(Error::NonFinite(format!("gradient at round {round}, step {}", record.step)));
            }
            state.optimizer.update(state.networks.params_mut(), &grads);
            sink.record(&record)?;
            records.push(record);
            sum += loss.total;
            batches += 1;
        }
        let summary = EpochSummary {
            em_round: round,
            epoch,
            mean_total: sum / batches as f64,
        };
        log::info!("round {round} epoch {epoch}: mean loss {:.4}", summary.mean_total);
        state.epochs.push(summary);
    }
    Ok(records)
}

fn log_record(round: usize, step: u64, loss: &LossBreakdown) -> LogRecord {
    LogRecord {
        em_round: round,
        step,
        recon: loss.recon,
        kl_cat: loss.kl_cat,
        kl_gauss: loss.kl_gauss,
        total: loss.total,
    }
}

/// Result of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    /// Mixture fitted on the final latents.
    pub final_gmm: GmmParams,
    pub latents: Vec<Vec<f64>>,
    /// 0-based cluster per image.
    pub assignments: Vec<usize>,
}

/// Warm-up followed by `em_rounds` E/M rounds and a final clustering.
pub fn train(images: &ImageSet, config: &TrainConfig, sink: &mut dyn TrainSink) -> Result<TrainOutcome> {
    config.validate()?;
    let state = TrainState::new(config)?;
    let schedule = config.schedule.build()?;
    let mut state = state;
    state.optimizer.learning_rate = config.warmup_learning_rate.unwrap_or(config.learning_rate);
    m_step(images, None, &mut state, &schedule, config, 0, config.warmup_epochs, sink)?;
    if config.checkpoint_every > 0 {
        sink.checkpoint(&state, config)?;
    }
    resume(images, config, state, sink)
}

/// Continues from a state whose first `state.round` rounds are complete.
pub fn resume(images: &ImageSet, config: &TrainConfig, mut state: TrainState, sink: &mut dyn TrainSink) -> Result<TrainOutcome> {
    config.validate()?;
    if images.shape() != config.network.image_shape {
        return Err(Error::shape(&config.network.image_shape, &images.shape()));
    }
    let schedule = config.schedule.build()?;
    state.optimizer.learning_rate = config.learning_rate;
    for round in state.round + 1..=config.em_rounds {
        let fit = e_step(images, &state.networks, config, state.gmm.as_ref(), round)?;
        log::info!("round {round}: E-step log-likelihood {:.4} after {} iterations", fit.log_likelihood, fit.iterations);
        state.gmm = Some(fit.params);
        let params = state.gmm.clone();
        m_step(images, params.as_ref(), &mut state, &schedule, config, round, config.mstep_epochs, sink)?;
        state.round = round;
        if config.checkpoint_every > 0 && (round % config.checkpoint_every == 0 || round == config.em_rounds) {
            sink.checkpoint(&state, config)?;
        }
    }
    let fit = e_step(images, &state.networks, config, state.gmm.as_ref(), config.em_rounds + 1)?;
    let latents = extract_latents(images, &state.networks, LatentSource::Mean, config.seed, 0)?;
    let assignments = latents.iter().map(|z| fit.params.assign(z)).collect::<Result<Vec<_>>>()?;
    Ok(TrainOutcome {
        state,
        final_gmm: fit.params,
        latents,
        assignments,
    })
}

/// `n` timesteps in `1..=T`, one per evenly spaced stratum of `[0, 1)` under
/// a shared random offset, in random order. Each entry is marginally uniform.
pub fn stratified_timesteps<R: rand::Rng + ?Sized>(n: usize, timesteps: usize, rng: &mut R) -> Vec<usize> {
    let offset: f64 = rng.random();
    let mut t: Vec<usize> = (0..n)
        .map(|i| 1 + (((i as f64 + offset) / n as f64) * timesteps as f64).floor().min(timesteps as f64 - 1.0) as usize)
        .collect();
    t.shuffle(rng);
    t
}

/// Pairs of consecutive epochs within an M-step whose mean loss did not rise,
/// as `(non_increasing, transitions)`.
pub fn epoch_monotonicity(epochs: &[EpochSummary]) -> (usize, usize) {
    let pairs = epochs.windows(2).filter(|w| w[0].em_round == w[1].em_round && w[0].em_round > 0);
    pairs.fold((0, 0), |(ok, all), w| (ok + usize::from(w[1].mean_total <= w[0].mean_total), all + 1))
}
