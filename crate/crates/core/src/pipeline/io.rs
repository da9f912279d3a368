//! Raw latent files and the PNG adapter between RGB images and latents.

use std::path::Path;

use image::{imageops::FilterType, RgbImage};

use crate::autograd::Tensor;
use crate::error::{Error, Result};

/// `"FSLT"` read as a little-endian u32.
pub const LATENT_MAGIC: u32 = u32::from_le_bytes(*b"FSLT");
pub const LATENT_VERSION: u32 = 1;
const DTYPE_F32: u32 = 1;
const HEADER_WORDS: usize = 8;

/// Encode `[N, C, H, W]` as an 8-word header followed by little-endian f32 data.
pub fn encode_latent(t: &Tensor) -> Result<Vec<u8>> {
    if t.ndim() != 4 {
        return Err(Error::shape("latent", "[N, C, H, W]", t.shape()));
    }
    let s = t.shape();
    let mut out = Vec::with_capacity(HEADER_WORDS * 4 + t.len() * 4);
    let dims = s.iter().map(|&d| u32::try_from(d).map_err(|_| Error::range("latent dim", d.to_string())));
    let dims: Vec<u32> = dims.collect::<Result<_>>()?;
    for w in [LATENT_MAGIC, LATENT_VERSION, dims[0], dims[1], dims[2], dims[3], DTYPE_F32, 0] {
        out.extend_from_slice(&w.to_le_bytes());
    }
    for &v in t.iter() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_latent(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < HEADER_WORDS * 4 {
        return Err(Error::CorruptLatent(format!("{} bytes is shorter than the header", bytes.len())));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().expect("4 bytes"));
    if word(0) != LATENT_MAGIC {
        return Err(Error::CorruptLatent("bad magic".into()));
    }
    if word(1) != LATENT_VERSION {
        return Err(Error::Version { found: word(1), expected: LATENT_VERSION });
    }
    if word(6) != DTYPE_F32 {
        return Err(Error::CorruptLatent(format!("unsupported dtype code {}", word(6))));
    }
    let shape: Vec<usize> = (2..6).map(|i| word(i) as usize).collect();
    let n: usize = shape.iter().product();
    let body = &bytes[HEADER_WORDS * 4..];
    if body.len() != n * 4 {
        return Err(Error::CorruptLatent(format!("expected {} data bytes, found {}", n * 4, body.len())));
    }
    let data = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect();
    Ok(crate::autograd::tensor(&shape, data))
}

pub fn write_latent(path: &Path, t: &Tensor) -> Result<()> {
    std::fs::write(path, encode_latent(t)?).map_err(|e| Error::io(path, e))
}

pub fn read_latent(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_latent(&bytes)
}

/// Round every value through f32, matching what a latent file stores.
pub fn quantize_f32(t: &Tensor) -> Tensor {
    t.mapv(|v| v as f32 as f64)
}

/// Area-resize an RGB image to `size x size` and map (r, g, b, luma) to `[-1, 1]`.
pub fn image_to_latent(img: &RgbImage, size: usize) -> Tensor {
    let small = image::imageops::resize(img, size as u32, size as u32, FilterType::Triangle);
    let mut t = Tensor::zeros(ndarray::IxDyn(&[4, size, size]));
    for (x, y, p) in small.enumerate_pixels() {
        let [r, g, b] = p.0.map(|v| v as f64 / 255.0);
        let luma = 0.299 * r + 0.587 * g + 0.114 * b;
        for (c, v) in [r, g, b, luma].into_iter().enumerate() {
            t[[c, y as usize, x as usize]] = 2.0 * v - 1.0;
        }
    }
    t
}

/// Map the first three latent channels from `[-1, 1]` to RGB, upscaled by `scale`.
pub fn latent_to_image(t: &Tensor, scale: u32) -> Result<RgbImage> {
    if t.ndim() != 3 || t.shape()[0] < 3 {
        return Err(Error::shape("latent image", "[C >= 3, H, W]", t.shape()));
    }
    let (h, w) = (t.shape()[1] as u32, t.shape()[2] as u32);
    let to_u8 = |v: f64| (((v + 1.0) / 2.0).clamp(0.0, 1.0) * 255.0).round() as u8;
    let img = RgbImage::from_fn(w, h, |x, y| {
        let (y, x) = (y as usize, x as usize);
        image::Rgb([to_u8(t[[0, y, x]]), to_u8(t[[1, y, x]]), to_u8(t[[2, y, x]])])
    });
    Ok(image::imageops::resize(&img, w * scale, h * scale, FilterType::Nearest))
}

/// Load a reference as a `[C, H, W]` latent: `.lat` files directly (first
/// item), anything else through the PNG adapter.
pub fn load_reference(path: &Path, size: usize) -> Result<Tensor> {
    if path.extension().is_some_and(|e| e == "lat") {
        let t = read_latent(path)?;
        return Ok(t.index_axis(ndarray::Axis(0), 0).to_owned());
    }
    let img = image::open(path)?.to_rgb8();
    Ok(image_to_latent(&img, size))
}
