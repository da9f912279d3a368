//! Toy latent-diffusion core.
//!
//! Contains the noise schedule and forward process, the base denoiser (a
//! small UNet with cross-attention to a context sequence), the masked
//! denoising loss, the identity loss and their weighted sum, classifier-free
//! guidance dropout and the deterministic DDIM-style samplers used both for
//! the few-step identity branch and for guided inference.

use ndarray::{Axis, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attribute_mixer::{check_same_layout, FaceIDEmbedding};
use crate::autograd::{Graph, Tensor, Var};
use crate::encoders::FaceMask;
use crate::error::{Error, Result};
use crate::nn::{self, AttnWeights, Bound, Init, ParamStore, Scope};

pub(crate) const UNET: &str = "unet";

/// Linear beta schedule over `timesteps` steps with cumulative products.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Betas linearly spaced over `[1e-4, 0.02]` rescaled by `1000 / timesteps`.
    pub fn linear(timesteps: usize) -> Result<Self> {
        if timesteps < 2 {
            return Err(Error::range("timesteps", format!("{timesteps} < 2")));
        }
        let scale = 1000.0 / timesteps as f64;
        let (b0, b1) = (1e-4 * scale, 0.02 * scale);
        let betas: Vec<f64> = (0..timesteps).map(|i| b0 + (b1 - b0) * i as f64 / (timesteps - 1) as f64).collect();
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::range("betas", "every beta must lie in (0, 1)"));
        }
        let mut acc = 1.0;
        let alpha_bar = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(Self { betas, alpha_bar })
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.len() {
            return Err(Error::range("timestep", format!("{t} not in [0, {})", self.len())));
        }
        Ok(())
    }

    /// Evenly spaced descending timesteps for a `steps`-step sampler, starting at `T-1`.
    pub fn sampling_timesteps(&self, steps: usize) -> Result<Vec<usize>> {
        if steps < 1 || steps > self.len() {
            return Err(Error::range("sampling steps", format!("{steps} not in [1, {}]", self.len())));
        }
        let t = self.len();
        Ok((0..steps).map(|i| t - 1 - i * t / steps).collect())
    }
}

/// `sqrt(ab[t]) z0 + sqrt(1 - ab[t]) eps` for a single timestep.
pub fn add_noise(z0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_t(t)?;
    if z0.shape() != eps.shape() {
        return Err(Error::shape("add_noise eps", z0.shape(), eps.shape()));
    }
    let ab = sched.alpha_bar[t];
    Ok(z0 * ab.sqrt() + eps * (1.0 - ab).sqrt())
}

fn per_item(values: impl Iterator<Item = f64>, n: usize) -> Tensor {
    crate::autograd::tensor(&[n, 1, 1, 1], values.collect())
}

/// Forward process with one timestep per batch item.
pub fn add_noise_var<'g>(z0: Var<'g>, ts: &[usize], eps: Var<'g>, sched: &NoiseSchedule) -> Result<Var<'g>> {
    for &t in ts {
        sched.check_t(t)?;
    }
    if ts.len() != z0.dim(0) {
        return Err(Error::shape("add_noise timesteps", z0.dim(0), ts.len()));
    }
    let g = z0.graph();
    let n = ts.len();
    let a = g.constant(per_item(ts.iter().map(|&t| sched.alpha_bar[t].sqrt()), n));
    let b = g.constant(per_item(ts.iter().map(|&t| (1.0 - sched.alpha_bar[t]).sqrt()), n));
    Ok(z0 * a + eps * b)
}

/// Denominator of the masked denoising loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskNorm {
    /// Mean over every latent element; masked-out elements count as zero.
    #[default]
    AllElements,
    /// Sum divided by the mask mass broadcast over channels.
    MaskArea,
}

fn check_loss_shapes(eps: &[usize], pred: &[usize], mask: &[usize]) -> Result<()> {
    if eps != pred {
        return Err(Error::shape("eps_pred", eps, pred));
    }
    let ok = eps.len() == 4 && mask.len() == 4 && mask[0] == eps[0] && mask[1] == 1 && mask[2..] == eps[2..];
    if !ok {
        return Err(Error::shape("face mask", [eps[0], 1, eps[2], eps[3]], mask));
    }
    Ok(())
}

pub fn masked_diffusion_loss_var<'g>(
    eps: Var<'g>,
    eps_pred: Var<'g>,
    mask: Var<'g>,
    norm: MaskNorm,
) -> Result<Var<'g>> {
    check_loss_shapes(&eps.shape(), &eps_pred.shape(), &mask.shape())?;
    let diff = (eps * mask - eps_pred * mask).square();
    Ok(match norm {
        MaskNorm::AllElements => diff.mean(),
        MaskNorm::MaskArea => {
            let channels = eps.dim(1) as f64;
            let area = mask.value().sum() * channels;
            if area == 0.0 {
                diff.sum()
            } else {
                diff.sum().scale(1.0 / area)
            }
        }
    })
}

/// `mean((eps * M - eps_pred * M)^2)` under the chosen normalization.
pub fn masked_diffusion_loss(eps: &Tensor, eps_pred: &Tensor, mask: &FaceMask, norm: MaskNorm) -> Result<f64> {
    let g = Graph::new();
    let l = masked_diffusion_loss_var(
        g.constant(eps.clone()),
        g.constant(eps_pred.clone()),
        g.constant(mask.tensor().clone()),
        norm,
    )?;
    Ok(l.item())
}

/// `1 - cos(reference, generated)`.
pub fn id_loss(reference: &FaceIDEmbedding, generated: &FaceIDEmbedding) -> Result<f64> {
    Ok(1.0 - crate::encoders::cosine(reference.as_slice(), generated.as_slice(), "id_loss")?)
}

/// Batch mean of `1 - cos` between rows of `[N, D]` embeddings.
pub fn id_loss_var<'g>(reference: Var<'g>, generated: Var<'g>) -> Var<'g> {
    let dot = (reference * generated).sum_axis(1, false);
    let nr = reference.square().sum_axis(1, false).sqrt();
    let ng = generated.square().sum_axis(1, false).sqrt();
    (dot / (nr * ng)).scale(-1.0).add_scalar(1.0).mean()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub l_diff: f64,
    pub l_id: f64,
    pub l_total: f64,
    pub lambda_id: f64,
}

/// `l_diff + lambda_id * l_id`.
pub fn total_loss(l_diff: f64, l_id: f64, lambda_id: f64) -> Result<LossBreakdown> {
    if lambda_id.is_nan() || lambda_id < 0.0 {
        return Err(Error::range("lambda_id", format!("{lambda_id} < 0")));
    }
    Ok(LossBreakdown { l_diff, l_id, l_total: l_diff + lambda_id * l_id, lambda_id })
}

/// Replace each batch item's context by `null_ctx` with probability `p`.
/// Returns the new `[N, T, d]` context and the per-item replacement flags.
pub fn cfg_dropout<R: Rng>(text_ctx: &Tensor, null_ctx: &Tensor, p: f64, rng: &mut R) -> Result<(Tensor, Vec<bool>)> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::range("cfg dropout probability", p.to_string()));
    }
    if text_ctx.ndim() != 3 || text_ctx.shape()[1..] != *null_ctx.shape() {
        return Err(Error::shape("null context", &text_ctx.shape()[1..], null_ctx.shape()));
    }
    let flags = draw_dropout(text_ctx.shape()[0], p, rng);
    let mut out = text_ctx.clone();
    for (i, &drop) in flags.iter().enumerate() {
        if drop {
            out.index_axis_mut(Axis(0), i).assign(null_ctx);
        }
    }
    Ok((out, flags))
}

pub(crate) fn draw_dropout<R: Rng>(n: usize, p: f64, rng: &mut R) -> Vec<bool> {
    (0..n).map(|_| rng.random::<f64>() < p).collect()
}

/// Per-item choice between the text context and the null embedding.
pub fn select_context<'g>(text_ctx: Var<'g>, null_ctx: Var<'g>, drop: &[bool]) -> Var<'g> {
    if !drop.iter().any(|&d| d) {
        return text_ctx;
    }
    let g = text_ctx.graph();
    let null = null_ctx.reshape(&[1, null_ctx.dim(0), null_ctx.dim(1)]);
    let parts: Vec<Var<'g>> =
        drop.iter().enumerate().map(|(i, &d)| if d { null } else { text_ctx.narrow(0, i, 1) }).collect();
    g.concat(&parts, 0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub channels: Vec<usize>,
    pub latent_size: usize,
    pub ctx_dim: usize,
    pub ctx_tokens: usize,
    pub time_freq_dim: usize,
    pub temb_dim: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            in_channels: 4,
            channels: vec![16, 32, 32],
            latent_size: 16,
            ctx_dim: 64,
            ctx_tokens: 4,
            time_freq_dim: 32,
            temb_dim: 64,
        }
    }
}

impl UNetConfig {
    pub fn levels(&self) -> usize {
        self.channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.levels();
        if r == 0 || self.channels.contains(&0) || self.in_channels == 0 {
            return Err(Error::Config("unet channels must be positive and non-empty".into()));
        }
        if !self.latent_size.is_multiple_of(1 << (r - 1)) {
            return Err(Error::Config(format!("latent size {} not divisible by 2^{}", self.latent_size, r - 1)));
        }
        if !self.time_freq_dim.is_multiple_of(2) {
            return Err(Error::Config("time_freq_dim must be even".into()));
        }
        Ok(())
    }

    /// Shapes `[C, H, W]` of the injection points: one per level plus the bottleneck.
    pub fn feature_shapes(&self) -> Vec<[usize; 3]> {
        let mut out: Vec<[usize; 3]> =
            self.channels.iter().enumerate().map(|(k, &c)| [c, self.latent_size >> k, self.latent_size >> k]).collect();
        out.push(*out.last().expect("at least one level"));
        out
    }
}

/// Frozen base denoiser weights, named under `unet.`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserWeights {
    config: UNetConfig,
    params: ParamStore,
}

fn init_resblock(init: &mut Init<'_>, name: &str, c_in: usize, c_out: usize, temb: usize) {
    let mut s = init.pp(name);
    s.conv("conv1", c_in, c_out, 3);
    s.linear("temb", temb, c_out, true);
    s.conv("conv2", c_out, c_out, 3);
    if c_in != c_out {
        s.conv("skip", c_in, c_out, 1);
    }
}

fn init_attn_block(init: &mut Init<'_>, name: &str, c: usize, ctx_dim: usize) {
    let mut s = init.pp(name);
    s.layer_norm("norm", c);
    nn::init_attention(&mut s, "attn", c, ctx_dim, c);
}

/// Parameters of the encoder half (time MLP, input conv, down levels and
/// bottleneck) written under `prefix`.
pub(crate) fn init_encoder(init: &mut Init<'_>, cfg: &UNetConfig) {
    init.linear("time.fc1", cfg.time_freq_dim, cfg.temb_dim, true);
    init.linear("time.fc2", cfg.temb_dim, cfg.temb_dim, true);
    let ch = &cfg.channels;
    init.conv("conv_in", cfg.in_channels, ch[0], 3);
    for k in 0..cfg.levels() {
        let c_in = if k == 0 { ch[0] } else { ch[k - 1] };
        let mut lvl = init.pp(format!("enc.{k}"));
        init_resblock(&mut lvl, "res", c_in, ch[k], cfg.temb_dim);
        if k > 0 {
            init_attn_block(&mut lvl, "attn", ch[k], cfg.ctx_dim);
        }
        if k + 1 < cfg.levels() {
            lvl.conv("down", ch[k], ch[k], 3);
        }
    }
    let c = *ch.last().expect("levels");
    let mut mid = init.pp("mid");
    init_resblock(&mut mid, "res", c, c, cfg.temb_dim);
    init_attn_block(&mut mid, "attn", c, cfg.ctx_dim);
}

impl DenoiserWeights {
    pub fn init(config: UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        {
            let mut init = Init::new(&mut params, &mut rng, UNET);
            init_encoder(&mut init, &config);
            let ch = &config.channels;
            for k in (0..config.levels()).rev() {
                let mut lvl = init.pp(format!("dec.{k}"));
                init_resblock(&mut lvl, "res", 2 * ch[k], ch[k], config.temb_dim);
                if k > 0 {
                    init_attn_block(&mut lvl, "attn", ch[k], config.ctx_dim);
                    lvl.conv("up", ch[k], ch[k - 1], 3);
                }
            }
            init.conv("out", ch[0], config.in_channels, 3);
            init.normal("null_ctx", &[config.ctx_tokens, config.ctx_dim], 0.02);
        }
        Ok(Self { config, params })
    }

    pub fn from_params(config: UNetConfig, params: ParamStore) -> Result<Self> {
        let reference = Self::init(config.clone(), 0)?;
        check_same_layout("denoiser", &reference.params, &params)?;
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn null_ctx(&self) -> &Tensor {
        self.params.get("unet.null_ctx").expect("null context parameter")
    }

    pub fn bind<'g>(&self, g: &'g Graph, trainable: bool) -> Bound<'g> {
        self.params.bind(g, trainable)
    }
}

pub(crate) fn time_embed<'g>(s: &Scope<'_, 'g>, cfg: &UNetConfig, ts: &[f64]) -> Var<'g> {
    let g = s.var("time.fc1.weight").graph();
    let freq = g.constant(nn::timestep_embedding(ts, cfg.time_freq_dim));
    let h = nn::linear(&s.pp("time.fc1"), freq).silu();
    nn::linear(&s.pp("time.fc2"), h)
}

fn resblock<'g>(s: &Scope<'_, 'g>, x: Var<'g>, temb: Var<'g>) -> Var<'g> {
    let h = nn::conv(&s.pp("conv1"), x.silu(), 1);
    let c = h.dim(1);
    let t = nn::linear(&s.pp("temb"), temb.silu()).reshape(&[temb.dim(0), c, 1, 1]);
    let h = nn::conv(&s.pp("conv2"), (h + t).silu(), 1);
    let skip = match s.try_var("skip.weight") {
        Some(_) => nn::conv(&s.pp("skip"), x, 1),
        None => x,
    };
    skip + h
}

fn attn_block<'g>(s: &Scope<'_, 'g>, x: Var<'g>, ctx: Var<'g>) -> Var<'g> {
    let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let tokens = x.reshape(&[n, c, h * w]).permute(&[0, 2, 1]);
    let normed = nn::layer_norm(&s.pp("norm"), tokens);
    let a = nn::attention(&AttnWeights::from_scope(&s.pp("attn")), normed, ctx, 1);
    (tokens + a).permute(&[0, 2, 1]).reshape(&[n, c, h, w])
}

/// Encoder features: one per level (pre-downsampling) and the bottleneck.
pub(crate) fn encoder_forward<'g>(
    s: &Scope<'_, 'g>,
    cfg: &UNetConfig,
    x: Var<'g>,
    temb: Var<'g>,
    ctx: Var<'g>,
) -> Vec<Var<'g>> {
    let mut h = nn::conv(&s.pp("conv_in"), x, 1);
    let mut feats = Vec::with_capacity(cfg.levels() + 1);
    for k in 0..cfg.levels() {
        let lvl = s.pp(format!("enc.{k}"));
        h = resblock(&lvl.pp("res"), h, temb);
        if k > 0 {
            h = attn_block(&lvl.pp("attn"), h, ctx);
        }
        feats.push(h);
        if k + 1 < cfg.levels() {
            h = nn::conv(&lvl.pp("down"), h, 2);
        }
    }
    let mid = s.pp("mid");
    h = resblock(&mid.pp("res"), h, temb);
    h = attn_block(&mid.pp("attn"), h, ctx);
    feats.push(h);
    feats
}

fn check_latent(cfg: &UNetConfig, z: &[usize]) -> Result<()> {
    let expected = [cfg.in_channels, cfg.latent_size, cfg.latent_size];
    if z.len() != 4 || z[1..] != expected {
        return Err(Error::shape("latent", format!("[N, {expected:?}]"), z));
    }
    Ok(())
}

fn check_ctx(cfg: &UNetConfig, n: usize, ctx: &[usize]) -> Result<()> {
    if ctx.len() != 3 || ctx[0] != n || ctx[2] != cfg.ctx_dim {
        return Err(Error::shape("context", format!("[{n}, T, {}]", cfg.ctx_dim), ctx));
    }
    Ok(())
}

/// Base UNet forward on graph variables. `residuals`, when present, are
/// added to the skip features and the bottleneck.
pub fn denoise_var<'g>(
    b: &Bound<'g>,
    cfg: &UNetConfig,
    z_t: Var<'g>,
    ts: &[f64],
    ctx: Var<'g>,
    residuals: Option<&[Var<'g>]>,
) -> Result<Var<'g>> {
    check_latent(cfg, &z_t.shape())?;
    check_ctx(cfg, z_t.dim(0), &ctx.shape())?;
    if ts.len() != z_t.dim(0) {
        return Err(Error::shape("timesteps", z_t.dim(0), ts.len()));
    }
    let shapes = cfg.feature_shapes();
    if let Some(res) = residuals {
        if res.len() != shapes.len() {
            return Err(Error::shape("residual count", shapes.len(), res.len()));
        }
        for (r, s) in res.iter().zip(&shapes) {
            let rs = r.shape();
            if rs.len() != 4 || rs[0] != z_t.dim(0) || rs[1..] != s[..] {
                return Err(Error::shape("residual", s, rs));
            }
        }
    }
    let s = b.scope(UNET);
    let temb = time_embed(&s, cfg, ts);
    let mut feats = encoder_forward(&s, cfg, z_t, temb, ctx);
    if let Some(res) = residuals {
        for (f, r) in feats.iter_mut().zip(res) {
            *f = *f + *r;
        }
    }
    let r = cfg.levels();
    let mut h = feats[r];
    for k in (0..r).rev() {
        let lvl = s.pp(format!("dec.{k}"));
        h = resblock(&lvl.pp("res"), z_t.graph().concat(&[h, feats[k]], 1), temb);
        if k > 0 {
            h = attn_block(&lvl.pp("attn"), h, ctx);
            h = nn::conv(&lvl.pp("up"), h.upsample2x(), 1);
        }
    }
    Ok(nn::conv(&s.pp("out"), h.silu(), 1))
}

/// Additive control features, one tensor per injection point.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualSet {
    pub residuals: Vec<Tensor>,
}

impl ResidualSet {
    pub fn zeros(cfg: &UNetConfig, n: usize) -> Self {
        let residuals = cfg.feature_shapes().iter().map(|s| Tensor::zeros(IxDyn(&[n, s[0], s[1], s[2]]))).collect();
        Self { residuals }
    }

    pub fn len(&self) -> usize {
        self.residuals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.residuals.is_empty()
    }

    pub fn max_abs(&self) -> f64 {
        self.residuals.iter().flat_map(|r| r.iter()).fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

pub fn denoise(
    w: &DenoiserWeights,
    z_t: &Tensor,
    ts: &[f64],
    ctx: &Tensor,
    residuals: Option<&ResidualSet>,
) -> Result<Tensor> {
    let g = Graph::new();
    let b = w.bind(&g, false);
    let res: Option<Vec<Var<'_>>> = residuals.map(|r| r.residuals.iter().map(|t| g.constant(t.clone())).collect());
    let out = denoise_var(&b, &w.config, g.constant(z_t.clone()), ts, g.constant(ctx.clone()), res.as_deref())?;
    Ok((*out.value()).clone())
}

/// A noise predictor over latents: `eps(z_t, t, ctx)` for a fixed conditioning.
pub trait EpsPredictor<'g> {
    fn eps(&self, z_t: Var<'g>, t: usize, ctx: Var<'g>) -> Result<Var<'g>>;
}

/// Predicted clean latent at timestep `t`.
fn predict_x0<'g>(z_t: Var<'g>, eps: Var<'g>, ab: f64) -> Var<'g> {
    (z_t - eps.scale((1.0 - ab).sqrt())).scale(1.0 / ab.sqrt())
}

fn ddim_loop<'g, F>(x_t: Var<'g>, steps: usize, sched: &NoiseSchedule, mut eps_at: F) -> Result<Var<'g>>
where
    F: FnMut(Var<'g>, usize) -> Result<Var<'g>>,
{
    let ts = sched.sampling_timesteps(steps)?;
    let mut x = x_t;
    for (i, &t) in ts.iter().enumerate() {
        let eps = eps_at(x, t)?;
        let x0 = predict_x0(x, eps, sched.alpha_bar[t]);
        match ts.get(i + 1) {
            Some(&tn) => {
                let abn = sched.alpha_bar[tn];
                x = x0.scale(abn.sqrt()) + eps.scale((1.0 - abn).sqrt());
            }
            None => x = x0,
        }
    }
    Ok(x)
}

/// Few-step deterministic generation from pure noise. The whole trajectory
/// stays on the graph so losses on the result backpropagate through every step.
pub fn lightning_generate_var<'g, M: EpsPredictor<'g>>(
    model: &M,
    ctx: Var<'g>,
    x_t: Var<'g>,
    steps: usize,
    sched: &NoiseSchedule,
) -> Result<Var<'g>> {
    if steps < 1 {
        return Err(Error::range("lightning steps", "steps must be >= 1"));
    }
    ddim_loop(x_t, steps, sched, |x, t| model.eps(x, t, ctx))
}

/// `eps_uncond + g * (eps_cond - eps_uncond)`.
pub fn guide<'g>(eps_cond: Var<'g>, eps_uncond: Var<'g>, scale: f64) -> Var<'g> {
    eps_uncond + (eps_cond - eps_uncond).scale(scale)
}

/// Classifier-free guided DDIM sampling. `null_ctx` is the unconditional context.
/// A scale of exactly 1 or 0 skips the unused branch.
pub fn guided_sample_var<'g, M: EpsPredictor<'g>>(
    model: &M,
    ctx: Var<'g>,
    null_ctx: Var<'g>,
    x_t: Var<'g>,
    steps: usize,
    guidance_scale: f64,
    sched: &NoiseSchedule,
) -> Result<Var<'g>> {
    if guidance_scale.is_nan() || guidance_scale < 0.0 {
        return Err(Error::range("guidance scale", format!("{guidance_scale} < 0")));
    }
    ddim_loop(x_t, steps, sched, |x, t| {
        if guidance_scale == 1.0 {
            return model.eps(x, t, ctx);
        }
        if guidance_scale == 0.0 {
            return model.eps(x, t, null_ctx);
        }
        let c = model.eps(x, t, ctx)?;
        let u = model.eps(x, t, null_ctx)?;
        Ok(guide(c, u, guidance_scale))
    })
}

/// Standard normal tensor from a seeded stream.
pub fn gaussian<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor {
    use rand_distr::{Distribution, StandardNormal};
    let n: usize = shape.iter().product();
    crate::autograd::tensor(shape, (0..n).map(|_| StandardNormal.sample(rng)).collect())
}
