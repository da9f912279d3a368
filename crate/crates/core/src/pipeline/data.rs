//! Training samples: the synthetic generator, caption embedding and the
//! on-disk manifest format.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::TrainConfig;
use super::io::{quantize_f32, read_latent, write_latent};
use crate::autograd::Tensor;
use crate::encoders::BBox;
use crate::error::{Error, Result};
use crate::landmark3d::{extract_landmarks, FaceParams, LandmarkGroup, LandmarkSet72, MorphableBasis, Pose};

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `[C, H, W]` clean image latent.
    pub latent: Tensor,
    pub caption: String,
    /// `[T, d]` caption context.
    pub ctx: Tensor,
    pub bbox: BBox,
    pub source: FaceParams,
    pub drive: Option<FaceParams>,
}

/// Seeded hash-to-vector caption embedding, `[tokens, d]` standard normal.
pub fn caption_context(caption: &str, tokens: usize, d: usize) -> Tensor {
    let digest = Sha256::digest(caption.as_bytes());
    let seed = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    crate::diffusion::gaussian(&[tokens, d], &mut rng)
}

/// Build the face basis used everywhere for a config.
pub fn face_basis(cfg: &TrainConfig) -> MorphableBasis {
    MorphableBasis::toy(cfg.model.k_shape, cfg.model.k_expr, cfg.model.base_seed.wrapping_add(6))
}

/// Random face parameters within the configured augmentation ranges.
pub fn random_face_params<R: Rng>(cfg: &TrainConfig, rng: &mut R) -> FaceParams {
    let d = &cfg.data;
    let mut sym = |m: f64| (rng.random::<f64>() * 2.0 - 1.0) * m;
    let pose = Pose {
        yaw: sym(d.max_yaw),
        pitch: sym(d.max_pitch),
        roll: sym(d.max_roll),
        tx: sym(d.max_shift),
        ty: sym(d.max_shift),
        scale: 0.0,
    };
    let scale = d.scale_range[0] + rng.random::<f64>() * (d.scale_range[1] - d.scale_range[0]);
    let shape = (0..cfg.model.k_shape).map(|_| StandardNormal.sample(rng)).collect();
    let expression = (0..cfg.model.k_expr)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            0.5 * z
        })
        .collect();
    FaceParams { shape, pose: Pose { scale, ..pose }, expression }
}

/// Landmark extent padded by `pad` and clamped to the frame.
pub fn landmark_bbox(lm: &LandmarkSet72, pad: f64) -> Result<BBox> {
    let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    for p in lm.points() {
        x0 = x0.min(p[0]);
        y0 = y0.min(p[1]);
        x1 = x1.max(p[0]);
        y1 = y1.max(p[1]);
    }
    BBox::new(x0 - pad, y0 - pad, x1 + pad, y1 + pad).validated()
}

/// Fixed spatial frequencies for the identity texture channel.
fn texture_bank(k: usize) -> Vec<[f64; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x7e57_u64);
    (0..k)
        .map(|_| [1.0 + 3.0 * rng.random::<f64>(), 1.0 + 3.0 * rng.random::<f64>(), 2.0 * PI * rng.random::<f64>()])
        .collect()
}

/// Procedural face latent: one channel of landmark blobs per feature group
/// (outline, eyes, nose and mouth) plus a shape-dependent texture inside the box.
pub fn render_latent(lm: &LandmarkSet72, shape: &[f64], bbox: BBox, c: usize, size: usize) -> Tensor {
    let mut t = Tensor::zeros(ndarray::IxDyn(&[c, size, size]));
    let sigma = 1.0 / size as f64;
    let channel_of = |i: usize| match LandmarkGroup::of(i) {
        LandmarkGroup::Contour | LandmarkGroup::Brows => 0,
        LandmarkGroup::Eyes => 1,
        LandmarkGroup::Nose | LandmarkGroup::Mouth => 2,
    };
    let bank = texture_bank(shape.len());
    let mask = crate::encoders::FaceMask::from_bbox(bbox, size, size);
    for y in 0..size {
        for x in 0..size {
            let (u, v) = ((x as f64 + 0.5) / size as f64, (y as f64 + 0.5) / size as f64);
            let mut blob = [0.0f64; 3];
            for (i, p) in lm.points().iter().enumerate() {
                let d2 = (p[0] - u).powi(2) + (p[1] - v).powi(2);
                blob[channel_of(i)] += (-d2 / (2.0 * sigma * sigma)).exp();
            }
            for (ch, b) in blob.iter().enumerate().take(c.min(3)) {
                t[[ch, y, x]] = 2.0 * b.min(1.0) - 1.0;
            }
            if c > 3 {
                let s: f64 =
                    shape.iter().zip(&bank).map(|(a, f)| a * (2.0 * PI * (f[0] * u + f[1] * v) + f[2]).sin()).sum();
                let m = mask.tensor()[[0, 0, y, x]];
                for ch in 3..c {
                    t[[ch, y, x]] = m * s.tanh() - (1.0 - m);
                }
            }
        }
    }
    t
}

/// `n` synthetic samples derived from random face parameters.
pub fn synthetic_dataset(cfg: &TrainConfig, n: usize, seed: u64) -> Result<Vec<Sample>> {
    let basis = face_basis(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = &cfg.model;
    (0..n)
        .map(|i| {
            let source = random_face_params(cfg, &mut rng);
            let lm = extract_landmarks(&source, &basis)?;
            let bbox = landmark_bbox(&lm, 0.08)?;
            let latent = quantize_f32(&render_latent(&lm, &source.shape, bbox, m.latent_channels, m.latent_size));
            let caption = format!("a portrait photo of person {i:04}");
            let ctx = caption_context(&caption, m.ctx_tokens, m.d);
            Ok(Sample { id: format!("{i:04}"), latent, caption, ctx, bbox, source, drive: None })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestItem {
    id: String,
    latent: String,
    params: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    drive_params: Option<String>,
    caption: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bbox: Option<[f64; 4]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    #[serde(default)]
    item: Vec<ManifestItem>,
}

/// Write samples as `.lat` latents, `.params.toml` files and a manifest.
pub fn write_dataset(root: &Path, samples: &[Sample]) -> Result<()> {
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut item = Vec::with_capacity(samples.len());
    for s in samples {
        let latent = format!("{}.lat", s.id);
        let params = format!("{}.params.toml", s.id);
        write_latent(&root.join(&latent), &s.latent.clone().insert_axis(ndarray::Axis(0)))?;
        s.source.save(&root.join(&params))?;
        let drive_params = match &s.drive {
            Some(d) => {
                let name = format!("{}.drive.toml", s.id);
                d.save(&root.join(&name))?;
                Some(name)
            }
            None => None,
        };
        item.push(ManifestItem {
            id: s.id.clone(),
            latent,
            params,
            drive_params,
            caption: s.caption.clone(),
            bbox: Some(s.bbox.as_array()),
        });
    }
    let text = toml::to_string(&Manifest { format_version: MANIFEST_VERSION, item })?;
    let path = root.join(MANIFEST_FILE);
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Read every manifest item in file order. Any missing or malformed item
/// fails the whole load with an error naming it.
pub fn load_dataset(root: &Path, cfg: &TrainConfig) -> Result<Vec<Sample>> {
    let path = root.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = toml::from_str(&text)?;
    if manifest.format_version != MANIFEST_VERSION {
        return Err(Error::Version { found: manifest.format_version, expected: MANIFEST_VERSION });
    }
    let m = &cfg.model;
    manifest
        .item
        .into_iter()
        .map(|it| {
            let fail = |reason: String| Error::Ingest { item: it.id.clone(), reason };
            let latent = read_latent(&root.join(&it.latent)).map_err(|e| fail(e.to_string()))?;
            let want = [1, m.latent_channels, m.latent_size, m.latent_size];
            if latent.shape() != want {
                return Err(fail(format!("latent shape {:?}, expected {want:?}", latent.shape())));
            }
            let load_params = |name: &str| -> Result<FaceParams> {
                let p = FaceParams::load(&root.join(name)).map_err(|e| fail(e.to_string()))?;
                if p.shape.len() != m.k_shape || p.expression.len() != m.k_expr {
                    return Err(fail(format!(
                        "{name}: expected {} shape and {} expression coefficients",
                        m.k_shape, m.k_expr
                    )));
                }
                Ok(p)
            };
            let source = load_params(&it.params)?;
            let drive = it.drive_params.as_deref().map(load_params).transpose()?;
            let bbox = it.bbox.map_or(BBox::DEFAULT, |b| BBox::new(b[0], b[1], b[2], b[3]));
            let bbox = bbox.validated().map_err(|e| fail(e.to_string()))?;
            let ctx = caption_context(&it.caption, m.ctx_tokens, m.d);
            Ok(Sample {
                latent: latent.index_axis(ndarray::Axis(0), 0).to_owned(),
                id: it.id,
                caption: it.caption,
                ctx,
                bbox,
                source,
                drive,
            })
        })
        .collect()
}

/// Samples from `cfg.data.root`, or the synthetic set when it is empty.
pub fn dataset_for(cfg: &TrainConfig) -> Result<Vec<Sample>> {
    if cfg.data.root.is_empty() {
        synthetic_dataset(cfg, cfg.data.synthetic_size, cfg.data.synthetic_seed)
    } else {
        load_dataset(Path::new(&cfg.data.root), cfg)
    }
}

/// Permutation of `0..len` for one epoch; a pure function of `(seed, epoch)`.
pub fn epoch_order(len: usize, seed: u64, epoch: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(&mut rng);
    idx
}

/// Dataset indices for training step `step`, walking consecutive epochs.
pub fn batch_indices(len: usize, batch: usize, seed: u64, step: u64) -> Vec<usize> {
    if len == 0 {
        return Vec::new();
    }
    let start = step * batch as u64;
    let mut cached: Option<(u64, Vec<usize>)> = None;
    (0..batch as u64)
        .map(|j| {
            let pos = start + j;
            let epoch = pos / len as u64;
            if cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
                cached = Some((epoch, epoch_order(len, seed, epoch)));
            }
            cached.as_ref().expect("filled").1[(pos % len as u64) as usize]
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_shapes_and_determinism() {
        let cfg = TrainConfig::default();
        let a = synthetic_dataset(&cfg, 8, 3).unwrap();
        let b = synthetic_dataset(&cfg, 8, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 8);
        for s in &a {
            assert_eq!(s.latent.shape(), &[4, 16, 16]);
            assert_eq!(s.ctx.shape(), &[4, 64]);
            assert!(s.latent.iter().all(|v| v.is_finite() && v.abs() <= 1.0));
        }
        assert_ne!(a[0].latent, a[1].latent);
    }

    #[test]
    fn manifest_round_trip_and_errors() {
        let cfg = TrainConfig::default();
        let dir = tempfile::tempdir().unwrap();
        let samples = synthetic_dataset(&cfg, 3, 1).unwrap();
        write_dataset(dir.path(), &samples).unwrap();
        assert_eq!(load_dataset(dir.path(), &cfg).unwrap(), samples);

        std::fs::remove_file(dir.path().join("0001.lat")).unwrap();
        match load_dataset(dir.path(), &cfg) {
            Err(Error::Ingest { item, .. }) => assert_eq!(item, "0001"),
            other => panic!("expected ingest error, got {other:?}"),
        }

        let empty = tempfile::tempdir().unwrap();
        write_dataset(empty.path(), &[]).unwrap();
        assert!(load_dataset(empty.path(), &cfg).unwrap().is_empty());
    }

    #[test]
    fn batches_are_stateless_permutations() {
        let a = batch_indices(8, 8, 5, 3);
        assert_eq!(a, batch_indices(8, 8, 5, 3));
        let mut sorted = a.clone();
        sorted.sort();
        assert_eq!(sorted, (0..8).collect::<Vec<_>>());
        let first: Vec<usize> = (0..4).flat_map(|s| batch_indices(8, 2, 5, s)).collect();
        assert_eq!(first, epoch_order(8, 5, 0));
    }
}
