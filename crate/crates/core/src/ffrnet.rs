//! Trainable encoder copy that turns a landmark control image and the fused
//! identity tokens into additive residuals for the frozen base denoiser.
//!
//! The copy's cross-attention only ever sees `f_mix`; there is no text input.
//! Residuals leave through 1×1 connectors that start at exactly zero, so a
//! fresh network leaves the base output untouched.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attribute_mixer::{check_same_layout, FusedFeatures};
use crate::autograd::{Graph, Tensor, Var};
use crate::diffusion::{self, DenoiserWeights, ResidualSet, UNetConfig, UNET};
use crate::error::{Error, Result};
use crate::landmark3d::ControlImage;
use crate::nn::{self, Bound, Init, ParamStore, Scope};

pub(crate) const FFRNET: &str = "ffrnet";
const HINT_CHANNELS: [usize; 2] = [8, 16];

#[derive(Debug, Clone, PartialEq)]
pub struct FFRNetWeights {
    unet: UNetConfig,
    control_size: usize,
    params: ParamStore,
}

/// Base parameter names that belong to the encoder half.
fn is_encoder_param(name: &str) -> bool {
    ["time.", "conv_in.", "enc.", "mid."]
        .iter()
        .any(|p| name.strip_prefix("unet.").is_some_and(|rest| rest.starts_with(p)))
}

fn hint_strides(unet: &UNetConfig, control_size: usize) -> Result<usize> {
    let ratio = control_size / unet.latent_size;
    if !control_size.is_multiple_of(unet.latent_size) || !ratio.is_power_of_two() {
        return Err(Error::shape(
            "control size",
            format!("latent size {} times a power of two", unet.latent_size),
            control_size,
        ));
    }
    Ok(ratio.trailing_zeros() as usize)
}

impl FFRNetWeights {
    /// Value-copy the base encoder, add a fresh hint head and zero connectors.
    /// `control_size` must be the latent size times a power of two.
    pub fn init_from_base(base: &DenoiserWeights, control_size: usize, seed: u64) -> Result<Self> {
        let unet = base.config().clone();
        let strides = hint_strides(&unet, control_size)?;
        let mut params = ParamStore::new();
        for (name, t) in base.params().iter().filter(|(n, _)| is_encoder_param(n)) {
            let rest = &name[UNET.len() + 1..];
            params.insert(format!("{FFRNET}.enc.{rest}"), t.clone());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init::new(&mut params, &mut rng, FFRNET);
        let mut c_in = 3;
        for i in 0..strides {
            let c = HINT_CHANNELS[i.min(HINT_CHANNELS.len() - 1)];
            init.conv(&format!("hint.{i}"), c_in, c, 3);
            c_in = c;
        }
        init.conv(&format!("hint.{strides}"), c_in, unet.in_channels, 3);
        for (k, s) in unet.feature_shapes().iter().enumerate() {
            init.conv_zero(&format!("zero.{k}"), s[0], s[0], 1);
        }
        Ok(Self { unet, control_size, params })
    }

    /// Rebuild from stored parameters, checking names and shapes.
    pub fn from_params(unet: UNetConfig, control_size: usize, params: ParamStore) -> Result<Self> {
        let base = DenoiserWeights::init(unet, 0)?;
        let reference = Self::init_from_base(&base, control_size, 0)?;
        check_same_layout("ffrnet", &reference.params, &params)?;
        Ok(Self { unet: reference.unet, control_size, params })
    }

    pub fn unet_config(&self) -> &UNetConfig {
        &self.unet
    }

    pub fn control_size(&self) -> usize {
        self.control_size
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_connectors(&self) -> usize {
        self.unet.levels() + 1
    }

    /// Largest absolute value over all connector weights and biases.
    pub fn connector_max_abs(&self) -> f64 {
        self.params
            .iter()
            .filter(|(n, _)| n.starts_with("ffrnet.zero."))
            .flat_map(|(_, t)| t.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn bind<'g>(&self, g: &'g Graph, trainable: bool) -> Bound<'g> {
        self.params.bind(g, trainable)
    }
}

fn hint_head<'g>(s: &Scope<'_, 'g>, control: Var<'g>, strides: usize) -> Var<'g> {
    let mut h = control;
    for i in 0..strides {
        h = nn::conv(&s.pp(format!("hint.{i}")), h, 2).silu();
    }
    nn::conv(&s.pp(format!("hint.{strides}")), h, 1)
}

/// Residuals on graph variables. `control` is `[N, 3, S, S]` with `S` the
/// configured control size; `f_mix` is `[N, 16, d]`.
pub fn ffrnet_forward_var<'g>(
    b: &Bound<'g>,
    w: &FFRNetWeights,
    control: Var<'g>,
    z_t: Var<'g>,
    ts: &[f64],
    f_mix: Var<'g>,
) -> Result<Vec<Var<'g>>> {
    let cfg = &w.unet;
    let n = z_t.dim(0);
    let cs = w.control_size;
    if control.shape() != [n, 3, cs, cs] {
        return Err(Error::shape("control image", [n, 3, cs, cs], control.shape()));
    }
    let zs = z_t.shape();
    if zs[1..] != [cfg.in_channels, cfg.latent_size, cfg.latent_size] {
        return Err(Error::shape("latent", [n, cfg.in_channels, cfg.latent_size, cfg.latent_size], zs));
    }
    let fs = f_mix.shape();
    if fs.len() != 3 || fs[0] != n || fs[2] != cfg.ctx_dim {
        return Err(Error::shape("f_mix", format!("[{n}, T, {}]", cfg.ctx_dim), fs));
    }
    if ts.len() != n {
        return Err(Error::shape("timesteps", n, ts.len()));
    }
    let s = b.scope(FFRNET);
    let enc = s.pp("enc");
    let hint = hint_head(&s, control, hint_strides(cfg, cs)?);
    let temb = diffusion::time_embed(&enc, cfg, ts);
    let feats = diffusion::encoder_forward(&enc, cfg, z_t + hint, temb, f_mix);
    Ok(feats.into_iter().enumerate().map(|(k, f)| nn::conv(&s.pp(format!("zero.{k}")), f, 1)).collect())
}

/// Stack single control images into `[N, 3, H, W]`.
pub fn stack_controls(controls: &[ControlImage]) -> Result<Tensor> {
    let views: Vec<Tensor> = controls.iter().map(|c| c.to_chw()).collect();
    let first = views.first().ok_or(Error::Degenerate("empty control batch"))?;
    let shape = first.shape().to_vec();
    let mut data = Vec::with_capacity(views.len() * first.len());
    for v in &views {
        if v.shape() != shape.as_slice() {
            return Err(Error::shape("control image", &shape, v.shape()));
        }
        data.extend(v.iter().copied());
    }
    let mut full = vec![views.len()];
    full.extend(shape);
    Ok(crate::autograd::tensor(&full, data))
}

pub fn ffrnet_forward(
    w: &FFRNetWeights,
    controls: &[ControlImage],
    z_t: &Tensor,
    ts: &[f64],
    f_mix: &FusedFeatures,
) -> Result<ResidualSet> {
    let g = Graph::new();
    let b = w.bind(&g, false);
    let control = g.constant(stack_controls(controls)?);
    let res = ffrnet_forward_var(&b, w, control, g.constant(z_t.clone()), ts, g.constant(f_mix.tokens().clone()))?;
    Ok(ResidualSet { residuals: res.iter().map(|r| (*r.value()).clone()).collect() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{denoise, gaussian};
    use ndarray::Array3;

    fn setup() -> (DenoiserWeights, FFRNetWeights) {
        let base = DenoiserWeights::init(UNetConfig::default(), 11).unwrap();
        let ffr = FFRNetWeights::init_from_base(&base, 64, 12).unwrap();
        (base, ffr)
    }

    fn random_control(rng: &mut ChaCha8Rng) -> ControlImage {
        let t = gaussian(&[64, 64, 3], rng);
        let px = Array3::from_shape_vec((64, 64, 3), t.iter().map(|v| v.abs().min(1.0)).collect()).unwrap();
        ControlImage::from_pixels(px)
    }

    #[test]
    fn copy_and_zero_init() {
        let (base, ffr) = setup();
        assert_eq!(ffr.connector_max_abs(), 0.0);
        let mut copied = 0;
        for (name, t) in base.params().iter().filter(|(n, _)| is_encoder_param(n)) {
            let mirror = ffr.params().get(&name.replacen("unet.", "ffrnet.enc.", 1)).unwrap();
            assert_eq!(mirror, t, "{name}");
            copied += 1;
        }
        assert!(copied > 10);
        assert!(!ffr.params().names().any(|n| n.contains("dec.") || n.contains("null_ctx")));
        assert_eq!(ffr.num_connectors(), 4);
        assert!(FFRNetWeights::init_from_base(&base, 48, 0).is_err());
    }

    #[test]
    fn fresh_residuals_are_zero_and_shaped() {
        let (base, ffr) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = gaussian(&[2, 4, 16, 16], &mut rng);
        let f_mix = FusedFeatures::new(gaussian(&[2, 16, 64], &mut rng)).unwrap();
        let controls = [random_control(&mut rng), random_control(&mut rng)];
        let res = ffrnet_forward(&ffr, &controls, &z, &[3.0, 70.0], &f_mix).unwrap();
        assert_eq!(res.len(), 4);
        assert_eq!(res.max_abs(), 0.0);
        for (r, s) in res.residuals.iter().zip(base.config().feature_shapes()) {
            assert_eq!(r.shape(), &[2, s[0], s[1], s[2]]);
        }
        let ctx = gaussian(&[2, 4, 64], &mut rng);
        let a = denoise(&base, &z, &[3.0, 70.0], &ctx, None).unwrap();
        let b = denoise(&base, &z, &[3.0, 70.0], &ctx, Some(&res)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn control_shape_mismatch() {
        let (_, ffr) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = gaussian(&[1, 4, 16, 16], &mut rng);
        let f_mix = FusedFeatures::new(gaussian(&[1, 16, 64], &mut rng)).unwrap();
        let small = ControlImage::black(32, 32);
        let err = ffrnet_forward(&ffr, &[small], &z, &[1.0], &f_mix).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn sensitivity_after_one_step() {
        let (_, mut ffr) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let z = gaussian(&[1, 4, 16, 16], &mut rng);
        let control = random_control(&mut rng);
        let f_a = FusedFeatures::new(gaussian(&[1, 16, 64], &mut rng)).unwrap();
        let f_b = FusedFeatures::new(gaussian(&[1, 16, 64], &mut rng)).unwrap();

        let g = Graph::new();
        let b = ffr.bind(&g, true);
        let ctrl = g.constant(stack_controls(std::slice::from_ref(&control)).unwrap());
        let res = ffrnet_forward_var(&b, &ffr, ctrl, g.constant(z.clone()), &[40.0], g.constant(f_a.tokens().clone()))
            .unwrap();
        let loss = res.iter().map(|r| r.square().sum()).fold(g.scalar(0.0), |a, x| a + x)
            + res.iter().map(|r| r.sum()).fold(g.scalar(0.0), |a, x| a + x);
        let grads = g.backward(loss);
        let updates: Vec<(String, Tensor)> =
            b.iter().filter(|(n, _)| n.contains(".zero.")).map(|(n, v)| (n.clone(), grads.get_or_zeros(*v))).collect();
        for (n, gr) in updates {
            *ffr.params_mut().get_mut(&n).unwrap() -= &(gr * 1e-2);
        }
        assert!(ffr.connector_max_abs() > 0.0);

        let ra = ffrnet_forward(&ffr, std::slice::from_ref(&control), &z, &[40.0], &f_a).unwrap();
        let rb = ffrnet_forward(&ffr, std::slice::from_ref(&control), &z, &[40.0], &f_b).unwrap();
        let delta = ra
            .residuals
            .iter()
            .zip(&rb.residuals)
            .flat_map(|(x, y)| x.iter().zip(y.iter()).map(|(p, q)| (p - q).abs()))
            .fold(0.0f64, f64::max);
        assert!(delta > 0.0);
    }
}
