//! Facial attribute mixer.
//!
//! Face-ID and CLIP-style features are projected to a shared width `d`, fused
//! by one cross-attention in which the 20 identity tokens query the
//! concatenation of identity and detail tokens, and then distilled into 16
//! tokens by a transformer decoder driven by learnable queries.
//!
//! No positional encodings are used anywhere, so the decoder output is
//! invariant to permutations of its key/value tokens.

use ndarray::{Axis, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{self, AttnWeights, Bound, Init, ParamStore, Scope};

pub const ID_TOKENS: usize = 20;
pub const CLIP_TOKENS: usize = 257;
pub const QUERY_TOKENS: usize = 16;

const PREFIX: &str = "mixer";

/// Unit-norm identity vector produced by a face recognition encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceIDEmbedding {
    vec: Vec<f64>,
}

impl FaceIDEmbedding {
    /// Wrap a vector as-is. Entries must be finite.
    pub fn new(vec: Vec<f64>) -> Result<Self> {
        if vec.iter().any(|v| !v.is_finite()) {
            return Err(Error::range("face id embedding", "non-finite entry"));
        }
        Ok(Self { vec })
    }

    /// L2-normalize `vec`.
    pub fn normalized(vec: Vec<f64>) -> Result<Self> {
        let n = vec.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n == 0.0 {
            return Err(Error::Degenerate("face id embedding"));
        }
        Self::new(vec.into_iter().map(|v| v / n).collect())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.vec
    }

    pub fn dim(&self) -> usize {
        self.vec.len()
    }

    pub fn norm(&self) -> f64 {
        self.vec.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Stack into a `[N, D]` batch tensor.
    pub fn stack(items: &[FaceIDEmbedding]) -> Result<Tensor> {
        let d = items.first().map_or(0, |e| e.dim());
        if let Some(bad) = items.iter().find(|e| e.dim() != d) {
            return Err(Error::shape("face id batch", d, bad.dim()));
        }
        let data = items.iter().flat_map(|e| e.vec.iter().copied()).collect();
        Ok(crate::autograd::tensor(&[items.len(), d], data))
    }
}

/// `[257, D_clip]` detail tokens from an image encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipFeatureGrid {
    tokens: Tensor,
}

impl ClipFeatureGrid {
    pub fn new(tokens: Tensor) -> Result<Self> {
        if tokens.ndim() != 2 || tokens.shape()[0] != CLIP_TOKENS {
            return Err(Error::shape("clip feature grid", [CLIP_TOKENS, 0], tokens.shape()));
        }
        if tokens.iter().any(|v| !v.is_finite()) {
            return Err(Error::range("clip feature grid", "non-finite entry"));
        }
        Ok(Self { tokens })
    }

    pub fn tokens(&self) -> &Tensor {
        &self.tokens
    }

    pub fn width(&self) -> usize {
        self.tokens.shape()[1]
    }

    pub fn stack(items: &[ClipFeatureGrid]) -> Result<Tensor> {
        let views: Vec<_> = items.iter().map(|c| c.tokens.view().insert_axis(Axis(0))).collect();
        ndarray::concatenate(Axis(0), &views)
            .map_err(|e| Error::shape("clip feature batch", "equal widths", e.to_string()))
    }
}

/// `[N, T, d]` token batch.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    tokens: Tensor,
}

/// The 16-token fused conditioning sequence.
pub type FusedFeatures = TokenSequence;

impl TokenSequence {
    pub fn new(tokens: Tensor) -> Result<Self> {
        if tokens.ndim() != 3 {
            return Err(Error::shape("token sequence", "[N, T, d]", tokens.shape()));
        }
        Ok(Self { tokens })
    }

    pub fn tokens(&self) -> &Tensor {
        &self.tokens
    }

    pub fn into_tensor(self) -> Tensor {
        self.tokens
    }

    pub fn shape(&self) -> [usize; 3] {
        let s = self.tokens.shape();
        [s[0], s[1], s[2]]
    }
}

/// Which conditioning features feed the denoiser adapter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureMode {
    /// Identity embedding only, token projection to 16 tokens.
    Id,
    /// Detail tokens only, token projection to 16 tokens.
    Clip,
    /// Both, concatenated and token-projected with no attention.
    Concat,
    /// Cross-attention fuse followed by the learnable-query decoder.
    #[default]
    Mixer,
}

impl FeatureMode {
    pub const ALL: [FeatureMode; 4] = [FeatureMode::Id, FeatureMode::Clip, FeatureMode::Concat, FeatureMode::Mixer];

    pub fn as_str(self) -> &'static str {
        match self {
            FeatureMode::Id => "id",
            FeatureMode::Clip => "clip",
            FeatureMode::Concat => "concat",
            FeatureMode::Mixer => "mixer",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixerConfig {
    pub d_id: usize,
    pub d_clip: usize,
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub feature_mode: FeatureMode,
}

impl Default for MixerConfig {
    fn default() -> Self {
        Self { d_id: 512, d_clip: 64, d: 64, layers: 2, heads: 1, ff_mult: 4, feature_mode: FeatureMode::Mixer }
    }
}

impl MixerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d_id == 0 || self.d_clip == 0 || self.ff_mult == 0 {
            return Err(Error::Config("mixer widths must be positive".into()));
        }
        if self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("heads {} must divide d {}", self.heads, self.d)));
        }
        Ok(())
    }

    fn token_proj_inputs(&self) -> Option<usize> {
        match self.feature_mode {
            FeatureMode::Id => Some(ID_TOKENS),
            FeatureMode::Clip => Some(CLIP_TOKENS),
            FeatureMode::Concat => Some(ID_TOKENS + CLIP_TOKENS),
            FeatureMode::Mixer => None,
        }
    }
}

/// Trainable mixer parameters, all named under `mixer.`.
#[derive(Debug, Clone, PartialEq)]
pub struct MixerWeights {
    config: MixerConfig,
    params: ParamStore,
}

impl MixerWeights {
    pub fn init(config: MixerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let d = config.d;
        let mut init = Init::new(&mut params, &mut rng, PREFIX);
        init.linear("proj_id", config.d_id, ID_TOKENS * d, true);
        init.linear("proj_clip", config.d_clip, d, true);
        match config.token_proj_inputs() {
            None => {
                nn::init_attention(&mut init, "fuse", d, d, d);
                for l in 0..config.layers {
                    let mut layer = init.pp(format!("decoder.{l}"));
                    nn::init_attention(&mut layer, "self_attn", d, d, d);
                    nn::init_attention(&mut layer, "cross_attn", d, d, d);
                    layer.linear("ff.fc1", d, d * config.ff_mult, true);
                    layer.linear("ff.fc2", d * config.ff_mult, d, true);
                    for n in ["norm1", "norm2", "norm3"] {
                        layer.layer_norm(n, d);
                    }
                }
                init.normal("queries", &[QUERY_TOKENS, d], 0.02);
            }
            Some(t_in) => init.linear("token_proj", t_in, QUERY_TOKENS, true),
        }
        Ok(Self { config, params })
    }

    /// Rebuild from stored parameters, checking every expected tensor shape.
    pub fn from_params(config: MixerConfig, params: ParamStore) -> Result<Self> {
        let reference = Self::init(config, 0)?;
        check_same_layout("mixer", &reference.params, &params)?;
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &MixerConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn bind<'g>(&self, g: &'g Graph, trainable: bool) -> Bound<'g> {
        self.params.bind(g, trainable)
    }
}

pub(crate) fn check_same_layout(what: &str, expected: &ParamStore, actual: &ParamStore) -> Result<()> {
    for (name, t) in expected.iter() {
        match actual.get(name) {
            Some(a) if a.shape() == t.shape() => {}
            Some(a) => return Err(Error::shape(format!("{what} parameter {name}"), t.shape(), a.shape())),
            None => return Err(Error::shape(format!("{what} parameters"), name, "missing")),
        }
    }
    if let Some(extra) = actual.names().find(|n| !expected.contains(n)) {
        return Err(Error::shape(format!("{what} parameters"), "no extra tensors", extra));
    }
    Ok(())
}

fn check_width(what: &str, v: Var<'_>, axis: usize, expected: usize) -> Result<()> {
    let shape = v.shape();
    if shape.len() <= axis || shape[axis] != expected {
        return Err(Error::shape(what, format!("dim {axis} == {expected}"), shape));
    }
    Ok(())
}

/// `f_id [N, D_id] -> [N, 20, d]`.
pub fn project_id_var<'g>(s: &Scope<'_, 'g>, cfg: &MixerConfig, f_id: Var<'g>) -> Result<Var<'g>> {
    if f_id.ndim() != 2 {
        return Err(Error::shape("project_id input", "[N, D_id]", f_id.shape()));
    }
    check_width("project_id input", f_id, 1, cfg.d_id)?;
    let n = f_id.dim(0);
    Ok(nn::linear(&s.pp("proj_id"), f_id).reshape(&[n, ID_TOKENS, cfg.d]))
}

/// `f_clip [N, 257, D_clip] -> [N, 257, d]`, applied per token.
pub fn project_clip_var<'g>(s: &Scope<'_, 'g>, cfg: &MixerConfig, f_clip: Var<'g>) -> Result<Var<'g>> {
    if f_clip.ndim() != 3 {
        return Err(Error::shape("project_clip input", "[N, 257, D_clip]", f_clip.shape()));
    }
    check_width("project_clip token count", f_clip, 1, CLIP_TOKENS)?;
    check_width("project_clip input", f_clip, 2, cfg.d_clip)?;
    Ok(nn::linear(&s.pp("proj_clip"), f_clip))
}

/// Identity tokens query the concatenation of identity and detail tokens.
pub fn cross_attention_fuse_var<'g>(
    s: &Scope<'_, 'g>,
    cfg: &MixerConfig,
    id_tokens: Var<'g>,
    clip_tokens: Var<'g>,
) -> Result<Var<'g>> {
    check_width("fuse query width", id_tokens, 2, cfg.d)?;
    check_width("fuse clip width", clip_tokens, 2, cfg.d)?;
    check_width("fuse batch", clip_tokens, 0, id_tokens.dim(0))?;
    let kv = id_tokens.graph().concat(&[id_tokens, clip_tokens], 1);
    let w = AttnWeights::from_scope(&s.pp("fuse"));
    Ok(nn::attention(&w, id_tokens, kv, cfg.heads))
}

/// Learnable-query transformer decoder (post-norm) over `f_pre`.
pub fn decode_fuse_var<'g>(s: &Scope<'_, 'g>, cfg: &MixerConfig, f_pre: Var<'g>) -> Result<Var<'g>> {
    if f_pre.ndim() != 3 {
        return Err(Error::shape("decode_fuse input", "[N, T, d]", f_pre.shape()));
    }
    check_width("decode_fuse input", f_pre, 2, cfg.d)?;
    let g = f_pre.graph();
    let n = f_pre.dim(0);
    let queries = s.var("queries");
    let tq = queries.dim(0);
    let mut x = g.constant(Tensor::zeros(IxDyn(&[n, tq, cfg.d]))) + queries;
    for l in 0..cfg.layers {
        let ls = s.pp(format!("decoder.{l}"));
        let sa = AttnWeights::from_scope(&ls.pp("self_attn"));
        x = nn::layer_norm(&ls.pp("norm1"), x + nn::attention(&sa, x, x, cfg.heads));
        let ca = AttnWeights::from_scope(&ls.pp("cross_attn"));
        x = nn::layer_norm(&ls.pp("norm2"), x + nn::attention(&ca, x, f_pre, cfg.heads));
        let ff = nn::linear(&ls.pp("ff.fc2"), nn::linear(&ls.pp("ff.fc1"), x).gelu());
        x = nn::layer_norm(&ls.pp("norm3"), x + ff);
    }
    Ok(x)
}

fn token_project<'g>(s: &Scope<'_, 'g>, tokens: Var<'g>) -> Var<'g> {
    let t = tokens.permute(&[0, 2, 1]);
    nn::linear(&s.pp("token_proj"), t).permute(&[0, 2, 1])
}

/// Full mixer forward on graph variables: `[N, D_id]`, `[N, 257, D_clip]` -> `[N, 16, d]`.
pub fn mix_forward_var<'g>(b: &Bound<'g>, cfg: &MixerConfig, f_id: Var<'g>, f_clip: Var<'g>) -> Result<Var<'g>> {
    let s = b.scope(PREFIX);
    let id_t = project_id_var(&s, cfg, f_id)?;
    let clip_t = project_clip_var(&s, cfg, f_clip)?;
    if id_t.dim(0) != clip_t.dim(0) {
        return Err(Error::shape("mixer batch", id_t.dim(0), clip_t.dim(0)));
    }
    let out = match cfg.feature_mode {
        FeatureMode::Mixer => {
            let f_pre = cross_attention_fuse_var(&s, cfg, id_t, clip_t)?;
            decode_fuse_var(&s, cfg, f_pre)?
        }
        FeatureMode::Id => token_project(&s, id_t),
        FeatureMode::Clip => token_project(&s, clip_t),
        FeatureMode::Concat => token_project(&s, f_id.graph().concat(&[id_t, clip_t], 1)),
    };
    Ok(out)
}

/// Project a batch of identity embeddings `[N, D_id]` to 20 tokens each.
pub fn project_id(f_id: &Tensor, w: &MixerWeights) -> Result<TokenSequence> {
    let g = Graph::new();
    let b = w.bind(&g, false);
    let out = project_id_var(&b.scope(PREFIX), &w.config, g.constant(f_id.clone()))?;
    TokenSequence::new((*out.value()).clone())
}

/// Project a batch of detail grids `[N, 257, D_clip]` to width `d`.
pub fn project_clip(f_clip: &Tensor, w: &MixerWeights) -> Result<TokenSequence> {
    let g = Graph::new();
    let b = w.bind(&g, false);
    let out = project_clip_var(&b.scope(PREFIX), &w.config, g.constant(f_clip.clone()))?;
    TokenSequence::new((*out.value()).clone())
}

pub fn cross_attention_fuse(
    id_tokens: &TokenSequence,
    clip_tokens: &TokenSequence,
    w: &MixerWeights,
) -> Result<TokenSequence> {
    let g = Graph::new();
    let b = w.bind(&g, false);
    let out = cross_attention_fuse_var(
        &b.scope(PREFIX),
        &w.config,
        g.constant(id_tokens.tokens.clone()),
        g.constant(clip_tokens.tokens.clone()),
    )?;
    TokenSequence::new((*out.value()).clone())
}

/// Attention probabilities of the fuse step, `[N*heads, 20, 277]`.
pub fn fuse_attention_probs(
    id_tokens: &TokenSequence,
    clip_tokens: &TokenSequence,
    w: &MixerWeights,
) -> Result<Tensor> {
    let g = Graph::new();
    let b = w.bind(&g, false);
    let q = g.constant(id_tokens.tokens.clone());
    let kv = g.concat(&[q, g.constant(clip_tokens.tokens.clone())], 1);
    let aw = AttnWeights::from_scope(&b.scope(PREFIX).pp("fuse"));
    Ok((*nn::attention_probs(&aw, q, kv, w.config.heads).value()).clone())
}

pub fn decode_fuse(f_pre: &TokenSequence, w: &MixerWeights) -> Result<FusedFeatures> {
    let g = Graph::new();
    let b = w.bind(&g, false);
    let out = decode_fuse_var(&b.scope(PREFIX), &w.config, g.constant(f_pre.tokens.clone()))?;
    TokenSequence::new((*out.value()).clone())
}

pub fn mix_forward(f_id: &Tensor, f_clip: &Tensor, w: &MixerWeights) -> Result<FusedFeatures> {
    let g = Graph::new();
    let b = w.bind(&g, false);
    let out = mix_forward_var(&b, &w.config, g.constant(f_id.clone()), g.constant(f_clip.clone()))?;
    TokenSequence::new((*out.value()).clone())
}
