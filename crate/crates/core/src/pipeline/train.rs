//! Training: per-step random draws, the loss graph and the trainer loop.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{Checkpoint, RngState};
use super::config::TrainConfig;
use super::data::{batch_indices, Sample};
use super::model::{Batch, Conditioned, FaceSnap, Prepared};
use super::optim::{AdamW, AdamWConfig};
use crate::attribute_mixer::mix_forward_var;
use crate::autograd::{Graph, Tensor, Var};
use crate::diffusion::{
    add_noise_var, draw_dropout, gaussian, id_loss_var, lightning_generate_var, masked_diffusion_loss_var,
    select_context, total_loss, LossBreakdown,
};
use crate::encoders::BBox;
use crate::error::{Error, Result};
use crate::nn::Bound;

/// Random quantities consumed by one step, drawn up front so that a step is
/// a pure function of (weights, batch, draws).
#[derive(Debug, Clone, PartialEq)]
pub struct StepDraws {
    pub ts: Vec<usize>,
    pub eps: Tensor,
    pub drop: Vec<bool>,
    pub x_t: Tensor,
}

impl StepDraws {
    pub fn sample<R: Rng>(cfg: &TrainConfig, n: usize, rng: &mut R) -> Self {
        let m = &cfg.model;
        let shape = [n, m.latent_channels, m.latent_size, m.latent_size];
        let ts = (0..n).map(|_| rng.random_range(0..cfg.train.timesteps)).collect();
        let eps = gaussian(&shape, rng);
        let drop = draw_dropout(n, cfg.train.cfg_dropout_p, rng);
        let x_t = gaussian(&shape, rng);
        Self { ts, eps, drop, x_t }
    }
}

/// Model parameters placed on a graph.
pub struct BoundModel<'g> {
    pub base: Bound<'g>,
    pub mixer: Bound<'g>,
    pub ffr: Option<Bound<'g>>,
}

impl<'g> BoundModel<'g> {
    /// Base frozen; mixer and FFRNet trainable.
    pub fn new(model: &FaceSnap, g: &'g Graph) -> Self {
        Self {
            base: model.base.bind(g, false),
            mixer: model.mixer.bind(g, true),
            ffr: model.ffr.as_ref().map(|f| f.bind(g, true)),
        }
    }

    pub fn trainable(&self) -> impl Iterator<Item = (&String, &Var<'g>)> {
        self.mixer.iter().chain(self.ffr.iter().flat_map(|b| b.iter()))
    }
}

pub struct LossVars<'g> {
    pub l_diff: Var<'g>,
    pub l_id: Option<Var<'g>>,
    pub l_total: Var<'g>,
}

/// Masked denoising loss, the few-step identity loss (when `with_id`) and
/// their weighted sum.
pub fn loss_graph<'g>(
    model: &FaceSnap,
    bound: &BoundModel<'g>,
    batch: &Batch,
    draws: &StepDraws,
    with_id: bool,
) -> Result<LossVars<'g>> {
    let cfg = &model.cfg;
    let g = bound.base.iter().next().expect("base parameters").1.graph();
    let c = |t: &Tensor| g.constant(t.clone());

    let f_mix = mix_forward_var(&bound.mixer, model.mixer.config(), c(&batch.f_id), c(&batch.f_clip))?;
    let cond = Conditioned { model, base: &bound.base, ffr: bound.ffr.as_ref(), control: c(&batch.control), f_mix };

    let text = c(&batch.ctx);
    let ctx = select_context(text, bound.base.var("unet.null_ctx"), &draws.drop);
    let eps = c(&draws.eps);
    let z_t = add_noise_var(c(&batch.z0), &draws.ts, eps, &model.sched)?;
    let ts: Vec<f64> = draws.ts.iter().map(|&t| t as f64).collect();
    let eps_pred = cond.eps_at(z_t, &ts, ctx)?;
    let l_diff = masked_diffusion_loss_var(eps, eps_pred, c(&batch.mask), cfg.train.mask_norm)?;

    if !with_id {
        return Ok(LossVars { l_diff, l_id: None, l_total: l_diff });
    }
    let z0_hat = lightning_generate_var(&cond, text, c(&draws.x_t), cfg.train.lightning_steps, &model.sched)?;
    let gen = model.face_enc.embed_image_var(z0_hat, BBox::FULL);
    let l_id = id_loss_var(c(&batch.id_ref), gen);
    let l_total = l_diff + l_id.scale(cfg.train.lambda_id);
    Ok(LossVars { l_diff, l_id: Some(l_id), l_total })
}

pub struct Trainer {
    model: FaceSnap,
    opt: AdamW,
    rng: ChaCha8Rng,
    step: u64,
    data: Vec<Prepared>,
}

pub(crate) fn adamw_config(cfg: &TrainConfig) -> AdamWConfig {
    let t = &cfg.train;
    AdamWConfig { lr: t.lr, beta1: t.beta1, beta2: t.beta2, eps: t.adam_eps, weight_decay: t.weight_decay }
}

fn prepare_all(model: &FaceSnap, samples: &[Sample]) -> Result<Vec<Prepared>> {
    if samples.is_empty() {
        return Err(Error::Usage("training needs at least one sample".into()));
    }
    samples.iter().map(|s| model.prepare(s)).collect()
}

impl Trainer {
    pub fn new(cfg: TrainConfig, samples: &[Sample]) -> Result<Self> {
        let model = FaceSnap::new(cfg)?;
        Self::with_model(model, samples)
    }

    /// Start training from an existing model (fresh optimizer state).
    pub fn with_model(model: FaceSnap, samples: &[Sample]) -> Result<Self> {
        let data = prepare_all(&model, samples)?;
        let opt = AdamW::new(adamw_config(&model.cfg));
        let rng = ChaCha8Rng::seed_from_u64(model.cfg.train.seed.wrapping_add(7));
        Ok(Self { model, opt, rng, step: 0, data })
    }

    /// Continue exactly where a checkpoint left off.
    pub fn from_checkpoint(ckpt: Checkpoint, samples: &[Sample]) -> Result<Self> {
        let (model, opt, rng, step) = ckpt.into_parts()?;
        let data = prepare_all(&model, samples)?;
        Ok(Self { model, opt, rng: rng.restore(), step, data })
    }

    pub fn model(&self) -> &FaceSnap {
        &self.model
    }

    pub fn into_model(self) -> FaceSnap {
        self.model
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn optimizer(&self) -> &AdamW {
        &self.opt
    }

    pub fn next_batch(&self) -> Batch {
        let t = &self.model.cfg.train;
        let idx = batch_indices(self.data.len(), t.batch_size, t.seed, self.step);
        Batch::from_items(&idx.iter().map(|&i| &self.data[i]).collect::<Vec<_>>())
    }

    /// One optimizer update of the mixer and FFRNet. Non-finite losses abort
    /// before any weight changes.
    pub fn step(&mut self) -> Result<LossBreakdown> {
        let batch = self.next_batch();
        let draws = StepDraws::sample(&self.model.cfg, batch.len(), &mut self.rng);
        let with_id = self.step.is_multiple_of(self.model.cfg.train.id_loss_every_n);
        let g = Graph::new();
        let bound = BoundModel::new(&self.model, &g);
        let losses = loss_graph(&self.model, &bound, &batch, &draws, with_id)?;

        let l_diff = losses.l_diff.item();
        let l_id = losses.l_id.map_or(0.0, |v| v.item());
        for (term, value) in [("l_diff", l_diff), ("l_id", l_id)] {
            if !value.is_finite() {
                return Err(Error::NonFinite { term, step: self.step, value });
            }
        }
        let report = total_loss(l_diff, l_id, self.model.cfg.train.lambda_id)?;
        if !report.l_total.is_finite() {
            return Err(Error::NonFinite { term: "l_total", step: self.step, value: report.l_total });
        }

        let grads = g.backward(losses.l_total);
        let grads: BTreeMap<String, Tensor> =
            bound.trainable().map(|(name, v)| (name.clone(), grads.get_or_zeros(*v))).collect();
        drop(bound);
        let m = &mut self.model;
        let mut stores = vec![m.mixer.params_mut()];
        if let Some(f) = m.ffr.as_mut() {
            stores.push(f.params_mut());
        }
        self.opt.step(&mut stores, &grads)?;
        self.step += 1;
        Ok(report)
    }

    /// Masked diffusion loss over the whole dataset under fixed draws seeded
    /// by `seed`. Reads the weights only.
    pub fn probe_l_diff(&self, seed: u64) -> Result<f64> {
        let batch = Batch::from_items(&self.data.iter().collect::<Vec<_>>());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draws = StepDraws::sample(&self.model.cfg, batch.len(), &mut rng);
        draws.drop.fill(false);
        let g = Graph::new();
        let bound = BoundModel::new(&self.model, &g);
        Ok(loss_graph(&self.model, &bound, &batch, &draws, false)?.l_diff.item())
    }

    pub fn train(&mut self, steps: u64) -> Result<Vec<LossBreakdown>> {
        (0..steps).map(|_| self.step()).collect()
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::capture(&self.model, &self.opt, RngState::capture(&self.rng), self.step)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::data::synthetic_dataset;

    fn small_cfg() -> TrainConfig {
        let mut c = TrainConfig::default();
        c.train.batch_size = 2;
        c.train.lr = 1e-3;
        c
    }

    #[test]
    fn step_keeps_base_frozen_and_moves_trainables() {
        let cfg = small_cfg();
        let data = synthetic_dataset(&cfg, 4, 0).unwrap();
        let mut tr = Trainer::new(cfg, &data).unwrap();
        let base_before = tr.model().base.params().clone();
        let train_before = tr.model().trainable_params();
        let r = tr.step().unwrap();
        assert!(r.l_diff.is_finite() && r.l_id >= 0.0 && r.l_id <= 2.0);
        assert_eq!(r.l_total, r.l_diff + 0.5 * r.l_id);
        assert_eq!(tr.model().base.params(), &base_before);
        assert_ne!(tr.model().trainable_params(), train_before);
        assert!(tr.model().ffr.as_ref().unwrap().connector_max_abs() > 0.0);
    }

    #[test]
    fn lambda_zero_reports_l_diff() {
        let mut cfg = small_cfg();
        cfg.train.lambda_id = 0.0;
        let data = synthetic_dataset(&cfg, 2, 0).unwrap();
        let mut tr = Trainer::new(cfg, &data).unwrap();
        let r = tr.step().unwrap();
        assert_eq!(r.l_total, r.l_diff);
    }

    #[test]
    fn non_finite_loss_names_term() {
        let cfg = small_cfg();
        let data = synthetic_dataset(&cfg, 2, 0).unwrap();
        let mut tr = Trainer::new(cfg, &data).unwrap();
        tr.data[0].z0[[0, 0, 0]] = f64::NAN;
        tr.data[1].z0[[0, 0, 0]] = f64::NAN;
        let before = tr.model().trainable_params();
        match tr.step() {
            Err(Error::NonFinite { term, step: 0, .. }) => assert_eq!(term, "l_diff"),
            other => panic!("expected non-finite error, got {other:?}"),
        }
        assert_eq!(tr.model().trainable_params(), before);
    }

    #[test]
    fn empty_dataset_rejected() {
        assert!(matches!(Trainer::new(small_cfg(), &[]), Err(Error::Usage(_))));
    }
}
