//! Stand-in encoders: face cropping with a soft facial mask, a seeded linear
//! face-identity encoder and a seeded patch encoder producing 257 tokens.
//!
//! Both encoders are differentiable graph functions so the identity loss can
//! backpropagate through the face encoder into the generator.

use std::rc::Rc;

use ndarray::IxDyn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attribute_mixer::{ClipFeatureGrid, FaceIDEmbedding, CLIP_TOKENS};
use crate::autograd::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Side length of the canonical crop both encoders consume.
pub const CANONICAL_CROP: usize = 32;
/// Patch grid side of the detail encoder.
pub const PATCH_GRID: usize = 16;

/// Normalized `(x0, y0, x1, y1)` box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BBox {
    pub const DEFAULT: BBox = BBox { x0: 0.25, y0: 0.2, x1: 0.75, y1: 0.85 };
    pub const FULL: BBox = BBox { x0: 0.0, y0: 0.0, x1: 1.0, y1: 1.0 };

    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }

    /// Clamp to the unit square, rejecting empty boxes.
    pub fn validated(self) -> Result<Self> {
        if self.as_array().iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidBBox(self.as_array()));
        }
        let b = BBox {
            x0: self.x0.clamp(0.0, 1.0),
            y0: self.y0.clamp(0.0, 1.0),
            x1: self.x1.clamp(0.0, 1.0),
            y1: self.y1.clamp(0.0, 1.0),
        };
        if b.x1 <= b.x0 || b.y1 <= b.y0 {
            return Err(Error::InvalidBBox(self.as_array()));
        }
        Ok(b)
    }
}

/// Facial-region weights `[N, 1, H_l, W_l]` in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceMask {
    mask: Tensor,
}

impl FaceMask {
    pub fn new(mask: Tensor) -> Result<Self> {
        if mask.ndim() != 4 || mask.shape()[1] != 1 {
            return Err(Error::shape("face mask", "[N, 1, H, W]", mask.shape()));
        }
        Ok(Self { mask: mask.mapv(|v| v.clamp(0.0, 1.0)) })
    }

    pub fn ones(n: usize, h: usize, w: usize) -> Self {
        Self { mask: Tensor::ones(IxDyn(&[n, 1, h, w])) }
    }

    pub fn tensor(&self) -> &Tensor {
        &self.mask
    }

    /// Exact area coverage of `bbox` per cell of an `h x w` grid.
    pub fn from_bbox(bbox: BBox, h: usize, w: usize) -> Self {
        let overlap = |a0: f64, a1: f64, i: usize, n: usize| {
            let c0 = i as f64 / n as f64;
            let c1 = (i + 1) as f64 / n as f64;
            ((a1.min(c1) - a0.max(c0)).max(0.0)) * n as f64
        };
        let mut m = Tensor::zeros(IxDyn(&[1, 1, h, w]));
        for y in 0..h {
            let fy = overlap(bbox.y0, bbox.y1, y, h);
            for x in 0..w {
                m[[0, 0, y, x]] = (fy * overlap(bbox.x0, bbox.x1, x, w)).clamp(0.0, 1.0);
            }
        }
        Self { mask: m }
    }

    pub fn stack(masks: &[FaceMask]) -> Result<FaceMask> {
        let views: Vec<_> = masks.iter().map(|m| m.mask.view()).collect();
        let t = ndarray::concatenate(ndarray::Axis(0), &views)
            .map_err(|e| Error::shape("mask batch", "equal spatial sizes", e.to_string()))?;
        FaceMask::new(t)
    }
}

/// Face region resampled to the canonical size, plus its mask at latent resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceCrop {
    pub pixels: Tensor,
    pub bbox: BBox,
    pub mask: FaceMask,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderKind {
    StubId,
    StubClip,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub kind: EncoderKind,
    pub seed: u64,
    pub out_dim: usize,
}

/// `[out, size]` bilinear sampling matrix over the normalized span `[a0, a1]`.
fn resample_matrix(a0: f64, a1: f64, size: usize, out: usize) -> Tensor {
    let mut m = Tensor::zeros(IxDyn(&[out, size]));
    for j in 0..out {
        let s = (a0 + (j as f64 + 0.5) / out as f64 * (a1 - a0)) * size as f64 - 0.5;
        let s = s.clamp(0.0, (size - 1) as f64);
        let i0 = s.floor() as usize;
        let f = s - i0 as f64;
        let i1 = (i0 + 1).min(size - 1);
        m[[j, i0]] += 1.0 - f;
        m[[j, i1]] += f;
    }
    m
}

/// Differentiable crop-and-resize of `[N, C, H, W]` to `[N, C, out, out]`.
pub fn crop_resample_var<'g>(image: Var<'g>, bbox: BBox, out: usize) -> Var<'g> {
    let g = image.graph();
    let (n, c, h, w) = (image.dim(0), image.dim(1), image.dim(2), image.dim(3));
    let rx = resample_matrix(bbox.x0, bbox.x1, w, out);
    let ry = resample_matrix(bbox.y0, bbox.y1, h, out);
    let rx_t = g.constant(crate::autograd::permute(&rx, &[1, 0]));
    let ry_t = g.constant(crate::autograd::permute(&ry, &[1, 0]));
    let cols = image.matmul(rx_t); // [N, C, H, out]
    let rows = cols.permute(&[0, 1, 3, 2]).matmul(ry_t); // [N, C, out(x), out(y)]
    rows.permute(&[0, 1, 3, 2]).reshape(&[n, c, out, out])
}

/// Crop `image` (`[C, H, W]`) to `bbox` (default centered box) and derive the
/// facial mask on a `latent_h x latent_w` grid.
pub fn detect_and_crop(image: &Tensor, bbox: Option<BBox>, latent_h: usize, latent_w: usize) -> Result<FaceCrop> {
    if image.ndim() != 3 {
        return Err(Error::shape("image", "[C, H, W]", image.shape()));
    }
    if image.iter().any(|v| !v.is_finite()) {
        return Err(Error::range("image", "non-finite pixel"));
    }
    let bbox = bbox.unwrap_or(BBox::DEFAULT).validated()?;
    let g = Graph::new();
    let x = g.constant(image.clone().insert_axis(ndarray::Axis(0)));
    let pixels = crop_resample_var(x, bbox, CANONICAL_CROP).value();
    let pixels = pixels.index_axis(ndarray::Axis(0), 0).to_owned();
    Ok(FaceCrop { pixels, bbox, mask: FaceMask::from_bbox(bbox, latent_h, latent_w) })
}

fn seeded_normal(seed: u64, shape: &[usize], scale: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * scale
        })
        .collect();
    crate::autograd::tensor(shape, data)
}

/// Seeded random linear identity encoder followed by L2 normalization.
#[derive(Debug, Clone)]
pub struct FaceEncoder {
    spec: EncoderSpec,
    channels: usize,
    weight: Rc<Tensor>,
}

impl FaceEncoder {
    pub fn new(spec: EncoderSpec, channels: usize) -> Result<Self> {
        if spec.kind != EncoderKind::StubId {
            return Err(Error::Config(format!("face encoder needs kind stub-id, got {:?}", spec.kind)));
        }
        let d_in = channels * CANONICAL_CROP * CANONICAL_CROP;
        let weight = seeded_normal(spec.seed, &[d_in, spec.out_dim], 1.0 / (d_in as f64).sqrt());
        Ok(Self { spec, channels, weight: Rc::new(weight) })
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    /// `[N, C, 32, 32]` canonical crops to `[N, D]` unit vectors.
    pub fn embed_var<'g>(&self, crops: Var<'g>) -> Var<'g> {
        let g = crops.graph();
        let n = crops.dim(0);
        let flat = crops.reshape(&[n, self.channels * CANONICAL_CROP * CANONICAL_CROP]);
        let y = flat.matmul(g.constant_rc(Rc::clone(&self.weight)));
        let norm = y.square().sum_axis(1, true).sqrt();
        y / norm
    }

    /// Embed a full image or latent `[N, C, H, W]` through the given box.
    pub fn embed_image_var<'g>(&self, image: Var<'g>, bbox: BBox) -> Var<'g> {
        self.embed_var(crop_resample_var(image, bbox, CANONICAL_CROP))
    }

    pub fn embed(&self, crop: &FaceCrop) -> Result<FaceIDEmbedding> {
        if crop.pixels.shape() != [self.channels, CANONICAL_CROP, CANONICAL_CROP] {
            return Err(Error::shape(
                "face crop",
                [self.channels, CANONICAL_CROP, CANONICAL_CROP],
                crop.pixels.shape(),
            ));
        }
        let g = Graph::new();
        let x = g.constant(crop.pixels.clone().insert_axis(ndarray::Axis(0)));
        let raw = self.embed_var(x).value();
        let v: Vec<f64> = raw.iter().copied().collect();
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Degenerate("face_embed"));
        }
        FaceIDEmbedding::new(v)
    }
}

/// Seeded per-patch linear encoder with a prepended mean-pooled global token.
#[derive(Debug, Clone)]
pub struct ClipEncoder {
    spec: EncoderSpec,
    channels: usize,
    weight: Rc<Tensor>,
    bias: Rc<Tensor>,
}

impl ClipEncoder {
    pub fn new(spec: EncoderSpec, channels: usize) -> Result<Self> {
        if spec.kind != EncoderKind::StubClip {
            return Err(Error::Config(format!("clip encoder needs kind stub-clip, got {:?}", spec.kind)));
        }
        let patch = CANONICAL_CROP / PATCH_GRID;
        let d_in = channels * patch * patch;
        let weight = seeded_normal(spec.seed, &[d_in, spec.out_dim], 1.0 / (d_in as f64).sqrt());
        let bias = Tensor::zeros(IxDyn(&[spec.out_dim]));
        Ok(Self { spec, channels, weight: Rc::new(weight), bias: Rc::new(bias) })
    }

    pub fn with_bias(mut self, bias: Tensor) -> Self {
        self.bias = Rc::new(bias);
        self
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    /// `[N, C, 32, 32]` to `[N, 257, D]`.
    pub fn grid_var<'g>(&self, crops: Var<'g>) -> Var<'g> {
        let g = crops.graph();
        let n = crops.dim(0);
        let c = self.channels;
        let p = CANONICAL_CROP / PATCH_GRID;
        let patches = crops.reshape(&[n, c, PATCH_GRID, p, PATCH_GRID, p]).permute(&[0, 2, 4, 1, 3, 5]).reshape(&[
            n,
            PATCH_GRID * PATCH_GRID,
            c * p * p,
        ]);
        let tokens = patches.matmul(g.constant_rc(Rc::clone(&self.weight))) + g.constant_rc(Rc::clone(&self.bias));
        let global = tokens.sum_axis(1, true).scale(1.0 / (PATCH_GRID * PATCH_GRID) as f64);
        g.concat(&[global, tokens], 1)
    }

    pub fn grid(&self, crop: &FaceCrop) -> Result<ClipFeatureGrid> {
        if crop.pixels.shape() != [self.channels, CANONICAL_CROP, CANONICAL_CROP] {
            return Err(Error::shape(
                "clip crop",
                [self.channels, CANONICAL_CROP, CANONICAL_CROP],
                crop.pixels.shape(),
            ));
        }
        let g = Graph::new();
        let x = g.constant(crop.pixels.clone().insert_axis(ndarray::Axis(0)));
        let out = self.grid_var(x).value();
        debug_assert_eq!(out.shape()[1], CLIP_TOKENS);
        ClipFeatureGrid::new(out.index_axis(ndarray::Axis(0), 0).to_owned())
    }
}

pub fn face_embed(crop: &FaceCrop, spec: &EncoderSpec) -> Result<FaceIDEmbedding> {
    FaceEncoder::new(*spec, crop.pixels.shape()[0])?.embed(crop)
}

pub fn clip_grid(crop: &FaceCrop, spec: &EncoderSpec) -> Result<ClipFeatureGrid> {
    ClipEncoder::new(*spec, crop.pixels.shape()[0])?.grid(crop)
}

/// Cosine similarity between identity embeddings.
pub fn face_sim(a: &FaceIDEmbedding, b: &FaceIDEmbedding) -> Result<f64> {
    cosine(a.as_slice(), b.as_slice(), "face_sim")
}

pub(crate) fn cosine(a: &[f64], b: &[f64], what: &'static str) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(what, a.len(), b.len()));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate(what));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Cosine similarity of the token-mean of two detail grids.
pub fn clip_face_sim(a: &ClipFeatureGrid, b: &ClipFeatureGrid) -> Result<f64> {
    let ma = a.tokens().mean_axis(ndarray::Axis(0)).expect("257 tokens");
    let mb = b.tokens().mean_axis(ndarray::Axis(0)).expect("257 tokens");
    cosine(ma.as_slice().expect("contiguous"), mb.as_slice().expect("contiguous"), "clip_face_sim")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn id_spec() -> EncoderSpec {
        EncoderSpec { kind: EncoderKind::StubId, seed: 11, out_dim: 512 }
    }

    fn clip_spec() -> EncoderSpec {
        EncoderSpec { kind: EncoderKind::StubClip, seed: 12, out_dim: 64 }
    }

    fn rand_image(seed: u64, c: usize, h: usize, w: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        crate::autograd::tensor(&[c, h, w], (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn full_box_mask_is_all_ones() {
        let crop = detect_and_crop(&rand_image(0, 4, 16, 16), Some(BBox::FULL), 16, 16).unwrap();
        assert!(crop.mask.tensor().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn degenerate_box_rejected() {
        let err = detect_and_crop(&rand_image(0, 4, 16, 16), Some(BBox::new(0.5, 0.2, 0.5, 0.8)), 16, 16);
        assert!(matches!(err, Err(Error::InvalidBBox(_))));
    }

    #[test]
    fn default_box_mask_footprint_matches_pixel_average() {
        // Oracle: rasterize the box on the 64x64 image by pixel centers, then
        // average 4x4 blocks down to 16x16.
        let crop = detect_and_crop(&rand_image(1, 3, 64, 64), None, 16, 16).unwrap();
        let b = BBox::DEFAULT;
        for cy in 0..16 {
            for cx in 0..16 {
                let mut acc = 0.0;
                for py in 0..4 {
                    for px in 0..4 {
                        let x = (cx * 4 + px) as f64 + 0.5;
                        let y = (cy * 4 + py) as f64 + 0.5;
                        let inside = x / 64.0 >= b.x0 && x / 64.0 <= b.x1 && y / 64.0 >= b.y0 && y / 64.0 <= b.y1;
                        acc += f64::from(u8::from(inside));
                    }
                }
                let oracle = acc / 16.0;
                let m = crop.mask.tensor()[[0, 0, cy, cx]];
                assert!((m - oracle).abs() <= 0.25, "cell ({cy},{cx}): {m} vs {oracle}");
                assert_eq!(m > 0.0, oracle > 0.0, "support differs at ({cy},{cx})");
            }
        }
    }

    #[test]
    fn crop_is_deterministic() {
        let img = rand_image(2, 4, 16, 16);
        assert_eq!(detect_and_crop(&img, None, 16, 16).unwrap(), detect_and_crop(&img, None, 16, 16).unwrap());
    }

    #[test]
    fn face_embed_unit_norm_deterministic_and_sensitive() {
        let img = rand_image(3, 4, 16, 16);
        let crop = detect_and_crop(&img, Some(BBox::FULL), 16, 16).unwrap();
        let a = face_embed(&crop, &id_spec()).unwrap();
        assert!((a.norm() - 1.0).abs() < 1e-6);
        assert_eq!(a, face_embed(&crop, &id_spec()).unwrap());

        let mut crop2 = crop.clone();
        crop2.pixels[[0, 5, 5]] += 0.5;
        let b = face_embed(&crop2, &id_spec()).unwrap();
        assert!(face_sim(&a, &b).unwrap() < 1.0);
    }

    #[test]
    fn clip_grid_token_count_and_linearity() {
        let crop = detect_and_crop(&rand_image(4, 4, 16, 16), None, 16, 16).unwrap();
        let grid = clip_grid(&crop, &clip_spec()).unwrap();
        assert_eq!(grid.tokens().shape(), &[257, 64]);

        let zero = FaceCrop { pixels: Tensor::zeros(IxDyn(&[4, 32, 32])), ..crop };
        assert!(clip_grid(&zero, &clip_spec()).unwrap().tokens().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn clip_grid_patch_permutation_locality() {
        let crop = detect_and_crop(&rand_image(5, 4, 16, 16), Some(BBox::FULL), 16, 16).unwrap();
        let base = clip_grid(&crop, &clip_spec()).unwrap();
        // swap patch (row 2, col 3) with patch (row 9, col 14); each patch is 2x2 pixels
        let mut swapped = crop.clone();
        let (a, b) = ((2usize, 3usize), (9usize, 14usize));
        for c in 0..4 {
            for dy in 0..2 {
                for dx in 0..2 {
                    let pa = [c, a.0 * 2 + dy, a.1 * 2 + dx];
                    let pb = [c, b.0 * 2 + dy, b.1 * 2 + dx];
                    let t = swapped.pixels[pa];
                    swapped.pixels[pa] = swapped.pixels[pb];
                    swapped.pixels[pb] = t;
                }
            }
        }
        let perm = clip_grid(&swapped, &clip_spec()).unwrap();
        let ta = 1 + a.0 * 16 + a.1;
        let tb = 1 + b.0 * 16 + b.1;
        for tok in 0..257 {
            let src = if tok == ta {
                tb
            } else if tok == tb {
                ta
            } else {
                tok
            };
            for j in 0..64 {
                let d = perm.tokens()[[tok, j]] - base.tokens()[[src, j]];
                assert!(d.abs() < 1e-12, "token {tok}");
            }
        }
    }

    #[test]
    fn face_sim_properties() {
        let a = FaceIDEmbedding::normalized(vec![1.0, 2.0, 3.0]).unwrap();
        let neg = FaceIDEmbedding::new(a.as_slice().iter().map(|v| -v).collect()).unwrap();
        let b = FaceIDEmbedding::normalized(vec![0.5, -1.0, 2.0]).unwrap();
        assert!((face_sim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!((face_sim(&a, &neg).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(face_sim(&a, &b).unwrap(), face_sim(&b, &a).unwrap());
        let z = FaceIDEmbedding::new(vec![0.0; 3]).unwrap();
        assert!(matches!(face_sim(&a, &z), Err(Error::Degenerate(_))));
    }

    #[test]
    fn wrong_kind_rejected() {
        assert!(FaceEncoder::new(clip_spec(), 4).is_err());
        assert!(ClipEncoder::new(id_spec(), 4).is_err());
    }
}
