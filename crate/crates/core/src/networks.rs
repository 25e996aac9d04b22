//! Encoder and conditional noise predictor.
//!
//! Both networks are built from the same residual block: group
//! normalization, then a per-channel scale and shift computed from an
//! embedding of `(t, z)`. The noise predictor is a two-path U-Net; the
//! encoder reuses its downsampling half (without conditioning), flattens
//! the final feature map and maps it to `[μ; log σ²]` with a linear head.
//! Flattening rather than pooling keeps where things are in the image,
//! which convolutions alone are blind to.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Tensor, Var};
use crate::diffusion::NoisePredictor;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, GroupNorm, Linear, ParamStore};
use crate::rng;

/// Bound applied to the encoder log-variance.
pub const LOGVAR_CLAMP: f64 = 20.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    /// `[C, H, W]`.
    pub image_shape: [usize; 3],
    pub latent_dim: usize,
    pub base_channels: usize,
    /// Channel multiplier per resolution level.
    pub channel_mults: Vec<usize>,
    pub groups: usize,
    pub time_embed_dim: usize,
    pub param_seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            image_shape: [1, 16, 16],
            latent_dim: 8,
            base_channels: 16,
            channel_mults: vec![1, 2],
            groups: 4,
            time_embed_dim: 64,
            param_seed: 0,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let [c, h, w] = self.image_shape;
        if c == 0 || h == 0 || w == 0 {
            return bad(format!("image shape {:?} has a zero dimension", self.image_shape));
        }
        if self.latent_dim == 0 {
            return bad("latent_dim must be at least 1".into());
        }
        if self.base_channels == 0 || self.channel_mults.is_empty() || self.channel_mults.contains(&0) {
            return bad("channel widths must be positive".into());
        }
        if self.groups == 0 || self.base_channels % self.groups != 0 || self.widths().iter().any(|ch| ch % self.groups != 0) {
            return bad(format!(
                "every channel width must be divisible by groups = {}",
                self.groups
            ));
        }
        if self.time_embed_dim < 2 || self.time_embed_dim % 2 != 0 {
            return bad("time_embed_dim must be even and at least 2".into());
        }
        let factor = 1 << (self.channel_mults.len() - 1);
        if h % factor != 0 || w % factor != 0 {
            return bad(format!(
                "image height and width must be divisible by {factor} for {} levels",
                self.channel_mults.len()
            ));
        }
        Ok(())
    }

    fn widths(&self) -> Vec<usize> {
        self.channel_mults.iter().map(|m| m * self.base_channels).collect()
    }
}

/// Variational posterior parameters for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderOutput {
    pub mu_phi: Vec<f64>,
    pub log_sigma2_phi: Vec<f64>,
}

/// `z = μ + exp(½ log σ²) ∘ ε`.
pub fn reparameterize(enc: &EncoderOutput, eps: &[f64]) -> Result<Vec<f64>> {
    let j = enc.mu_phi.len();
    if eps.len() != j || enc.log_sigma2_phi.len() != j {
        return Err(Error::shape(&[j], &[eps.len()]));
    }
    Ok(enc
        .mu_phi
        .iter()
        .zip(&enc.log_sigma2_phi)
        .zip(eps)
        .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
        .collect())
}

/// Differentiable counterpart of [`reparameterize`] for `[N, J]` batches.
pub fn reparameterize_var<'g>(mu: Var<'g>, logvar: Var<'g>, eps: Tensor) -> Var<'g> {
    let eps = mu.graph().constant(eps);
    mu.add(logvar.scale(0.5).exp().mul(eps))
}

/// Sinusoidal features of per-sample timesteps, `[N, dim]`.
pub fn timestep_embedding(ts: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        let t = t as f64;
        let freqs = (0..half).map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp());
        data.extend(freqs.clone().map(|f| (t * f).sin()));
        data.extend(freqs.map(|f| (t * f).cos()));
    }
    Tensor::new(vec![ts.len(), dim], data).expect("length matches shape")
}

#[derive(Debug, Clone)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    norm2: GroupNorm,
    film: Option<Linear>,
    conv2: Conv2d,
    skip: Option<Conv2d>,
    out_channels: usize,
}

impl ResBlock {
    #[allow(clippy::too_many_arguments)]
    fn new<R: rand::Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        groups: usize,
        embed_dim: Option<usize>,
        rng: &mut R,
    ) -> Self {
        Self {
            norm1: GroupNorm::new(store, &format!("{name}.norm1"), cin, groups),
            conv1: Conv2d::new(store, &format!("{name}.conv1"), cin, cout, 3, rng),
            norm2: GroupNorm::new(store, &format!("{name}.norm2"), cout, groups),
            film: embed_dim.map(|e| Linear::new(store, &format!("{name}.film"), e, 2 * cout, rng)),
            conv2: Conv2d::new(store, &format!("{name}.conv2"), cout, cout, 3, rng),
            skip: (cin != cout).then(|| Conv2d::new(store, &format!("{name}.skip"), cin, cout, 1, rng)),
            out_channels: cout,
        }
    }

    fn forward<'g>(&self, g: &'g Graph, s: &ParamStore, x: Var<'g>, emb: Option<Var<'g>>) -> Var<'g> {
        let h = self.conv1.forward(g, s, self.norm1.forward(g, s, x).silu());
        let mut h = self.norm2.forward(g, s, h);
        if let (Some(film), Some(emb)) = (&self.film, emb) {
            let p = film.forward(g, s, emb);
            let c = self.out_channels;
            h = h.film(p.narrow_cols(0, c), p.narrow_cols(c, c));
        }
        let h = self.conv2.forward(g, s, h.silu());
        let skip = match &self.skip {
            Some(conv) => conv.forward(g, s, x),
            None => x,
        };
        h.add(skip)
    }
}

#[derive(Debug, Clone)]
struct Encoder {
    conv_in: Conv2d,
    down: Vec<ResBlock>,
    norm_out: GroupNorm,
    head: Linear,
}

#[derive(Debug, Clone)]
struct UNet {
    time1: Linear,
    time2: Linear,
    z_proj: Linear,
    conv_in: Conv2d,
    down: Vec<ResBlock>,
    mid: ResBlock,
    up: Vec<ResBlock>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

/// Encoder `f_φ` and noise predictor `ε_θ` sharing one parameter store.
#[derive(Debug, Clone)]
pub struct Networks {
    config: NetworkConfig,
    store: ParamStore,
    encoder: Encoder,
    unet: UNet,
}

impl Networks {
    pub fn new(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(config.param_seed, "network-init", 0);
        let rng = &mut rng;
        let mut store = ParamStore::new();
        let s = &mut store;
        let [c, _, _] = config.image_shape;
        let widths = config.widths();
        let (base, groups, e) = (config.base_channels, config.groups, config.time_embed_dim);

        let mut down = Vec::new();
        let mut cin = base;
        for (level, &w) in widths.iter().enumerate() {
            down.push(ResBlock::new(s, &format!("encoder.down{level}"), cin, w, groups, None, rng));
            cin = w;
        }
        let last = *widths.last().expect("validated non-empty");
        let [_, h, w] = config.image_shape;
        let scale = 1 << (widths.len() - 1);
        let features = last * (h / scale) * (w / scale);
        let encoder = Encoder {
            conv_in: Conv2d::new(s, "encoder.conv_in", c, base, 3, rng),
            down,
            norm_out: GroupNorm::new(s, "encoder.norm_out", last, groups),
            head: Linear::new(s, "encoder.head", features, 2 * config.latent_dim, rng),
        };

        let time1 = Linear::new(s, "unet.time1", e, e, rng);
        let time2 = Linear::new(s, "unet.time2", e, e, rng);
        let z_proj = Linear::new(s, "unet.z_proj", config.latent_dim, e, rng);
        let conv_in = Conv2d::new(s, "unet.conv_in", c, base, 3, rng);
        let mut down = Vec::new();
        let mut cin = base;
        for (level, &w) in widths.iter().enumerate() {
            down.push(ResBlock::new(s, &format!("unet.down{level}"), cin, w, groups, Some(e), rng));
            cin = w;
        }
        let mid = ResBlock::new(s, "unet.mid", last, last, groups, Some(e), rng);
        let mut up = Vec::new();
        let mut cin = last;
        for (level, &w) in widths.iter().enumerate().rev() {
            let cout = if level == 0 { base } else { widths[level - 1] };
            up.push(ResBlock::new(s, &format!("unet.up{level}"), cin + w, cout, groups, Some(e), rng));
            cin = cout;
        }
        let unet = UNet {
            time1,
            time2,
            z_proj,
            conv_in,
            down,
            mid,
            up,
            norm_out: GroupNorm::new(s, "unet.norm_out", base, groups),
            conv_out: Conv2d::new(s, "unet.conv_out", base, c, 3, rng),
        };
        Ok(Self {
            config,
            store,
            encoder,
            unet,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    /// Checks an `[N, C, H, W]` batch against the configured image shape.
    pub fn check_images(&self, x: &Tensor) -> Result<usize> {
        let s = x.shape();
        if s.len() != 4 || s[1..] != self.config.image_shape {
            let mut expected = vec![s.first().copied().unwrap_or(0)];
            expected.extend_from_slice(&self.config.image_shape);
            return Err(Error::shape(&expected, s));
        }
        Ok(s[0])
    }

    /// `(μ_φ, log σ²_φ)` as `[N, J]` nodes of `g`.
    pub fn encode_var<'g>(&self, g: &'g Graph, x0: Var<'g>) -> (Var<'g>, Var<'g>) {
        let (s, enc) = (&self.store, &self.encoder);
        let mut h = enc.conv_in.forward(g, s, x0);
        for (level, block) in enc.down.iter().enumerate() {
            if level > 0 {
                h = h.avg_pool2();
            }
            h = block.forward(g, s, h, None);
        }
        let flat = enc.norm_out.forward(g, s, h).silu().flatten();
        let out = enc.head.forward(g, s, flat);
        let j = self.config.latent_dim;
        let logvar = out.narrow_cols(j, j).clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP);
        (out.narrow_cols(0, j), logvar)
    }

    /// Predicted noise for `x_t` with per-sample timesteps `ts`.
    pub fn predict_var<'g>(&self, g: &'g Graph, x_t: Var<'g>, ts: &[usize], z: Var<'g>) -> Var<'g> {
        let (s, net) = (&self.store, &self.unet);
        let temb = g.constant(timestep_embedding(ts, self.config.time_embed_dim));
        let temb = net.time2.forward(g, s, net.time1.forward(g, s, temb).silu());
        let emb = temb.add(net.z_proj.forward(g, s, z)).silu();

        let mut h = net.conv_in.forward(g, s, x_t);
        let mut skips = Vec::with_capacity(net.down.len());
        for (level, block) in net.down.iter().enumerate() {
            if level > 0 {
                h = h.avg_pool2();
            }
            h = block.forward(g, s, h, Some(emb));
            skips.push(h);
        }
        h = net.mid.forward(g, s, h, Some(emb));
        for block in &net.up {
            let skip = skips.pop().expect("one skip per level");
            if h.shape()[2] != skip.shape()[2] {
                h = h.upsample2();
            }
            h = block.forward(g, s, h.concat_channels(skip), Some(emb));
        }
        net.conv_out.forward(g, s, net.norm_out.forward(g, s, h).silu())
    }

    /// Encodes a batch; row `i` of the output belongs to image `i`.
    pub fn encode(&self, x0: &Tensor) -> Result<Vec<EncoderOutput>> {
        let n = self.check_images(x0)?;
        let per_image: usize = self.config.image_shape.iter().product();
        let j = self.config.latent_dim;
        let mut out = Vec::with_capacity(n);
        const CHUNK: usize = 128;
        for start in (0..n).step_by(CHUNK) {
            let m = CHUNK.min(n - start);
            let mut shape = vec![m];
            shape.extend_from_slice(&self.config.image_shape);
            let data = x0.data()[start * per_image..(start + m) * per_image].to_vec();
            let g = Graph::inference();
            let (mu, lv) = self.encode_var(&g, g.constant(Tensor::new(shape, data)?));
            let (mu, lv) = (mu.value(), lv.value());
            for i in 0..m {
                out.push(EncoderOutput {
                    mu_phi: mu.data()[i * j..(i + 1) * j].to_vec(),
                    log_sigma2_phi: lv.data()[i * j..(i + 1) * j].to_vec(),
                });
            }
        }
        if out.iter().any(|e| e.mu_phi.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite("encoder mean".into()));
        }
        Ok(out)
    }

    /// Posterior means only, one row per image.
    pub fn latent_means(&self, x0: &Tensor) -> Result<Vec<Vec<f64>>> {
        Ok(self.encode(x0)?.into_iter().map(|e| e.mu_phi).collect())
    }
}

impl NoisePredictor for Networks {
    fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    fn predict_noise(&self, x_t: &Tensor, t: usize, z: &Tensor) -> Result<Tensor> {
        let n = self.check_images(x_t)?;
        if z.shape() != [n, self.config.latent_dim] {
            return Err(Error::shape(&[n, self.config.latent_dim], z.shape()));
        }
        if t == 0 {
            return Err(Error::InvalidArgument("timesteps start at 1".into()));
        }
        let g = Graph::inference();
        let out = self.predict_var(&g, g.constant(x_t.clone()), &vec![t; n], g.constant(z.clone()));
        Ok(out.value().as_ref().clone())
    }
}
