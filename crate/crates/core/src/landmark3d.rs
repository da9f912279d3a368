//! Landmark predictor: 3DMM parameter mixing, mesh synthesis, weak-perspective
//! projection to 72 landmarks and control-image rasterization.
//!
//! Camera convention: canonical `x` points right and `y` points up. The
//! viewport maps `[-1, 1]^2` to normalized image coordinates with
//! `u = (x + 1) / 2` and `v = (1 - y) / 2`, so `v` grows downward. Depth is
//! discarded.
//!
//! Rotation is `R = Rz(roll) * Ry(yaw) * Rx(pitch)`.

use std::f64::consts::PI;
use std::path::Path;

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::error::{Error, Result};

pub const NUM_LANDMARKS: usize = 72;
pub const GRID_ROWS: usize = 26;
pub const GRID_COLS: usize = 18;
pub const NUM_VERTICES: usize = GRID_ROWS * GRID_COLS;
pub const FACE_PARAMS_VERSION: u32 = 1;

/// Landmark vertex indices into the `26 x 18` face grid, grouped as
/// contour (17), brows (10), eyes (16), nose (9), mouth (20).
pub const LANDMARK_INDICES: [usize; NUM_LANDMARKS] = [
    217, 271, 307, 344, 381, 400, 420, 439, 440, 442, 425, 409, 392, 357, 322, 286, 250, //
    129, 112, 113, 114, 133, 136, 119, 120, 121, 140, //
    187, 169, 149, 166, 183, 202, 203, 205, 194, 175, 156, 172, 190, 208, 210, 211, //
    188, 224, 242, 278, 294, 295, 296, 298, 299, //
    372, 336, 316, 314, 313, 329, 365, 383, 421, 422, 424, 408, 371, 352, 350, 349, 366, 385, 386, 388,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LandmarkGroup {
    Contour,
    Brows,
    Eyes,
    Nose,
    Mouth,
}

impl LandmarkGroup {
    pub fn of(index: usize) -> LandmarkGroup {
        match index {
            0..=16 => LandmarkGroup::Contour,
            17..=26 => LandmarkGroup::Brows,
            27..=42 => LandmarkGroup::Eyes,
            43..=51 => LandmarkGroup::Nose,
            _ => LandmarkGroup::Mouth,
        }
    }

    pub fn color(self) -> [f64; 3] {
        match self {
            LandmarkGroup::Contour => [1.0, 1.0, 1.0],
            LandmarkGroup::Brows => [1.0, 0.5, 0.0],
            LandmarkGroup::Eyes => [0.0, 1.0, 0.0],
            LandmarkGroup::Nose => [0.0, 0.5, 1.0],
            LandmarkGroup::Mouth => [1.0, 0.0, 0.5],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Pose {
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
    pub tx: f64,
    pub ty: f64,
    pub scale: f64,
}

impl Default for Pose {
    fn default() -> Self {
        Self { yaw: 0.0, pitch: 0.0, roll: 0.0, tx: 0.0, ty: 0.0, scale: 1.0 }
    }
}

impl Pose {
    pub fn rotation(&self) -> [[f64; 3]; 3] {
        rotation_matrix(self.yaw, self.pitch, self.roll)
    }
}

/// `Rz(roll) * Ry(yaw) * Rx(pitch)`.
pub fn rotation_matrix(yaw: f64, pitch: f64, roll: f64) -> [[f64; 3]; 3] {
    let (sy, cy) = yaw.sin_cos();
    let (sp, cp) = pitch.sin_cos();
    let (sr, cr) = roll.sin_cos();
    let rz = [[cr, -sr, 0.0], [sr, cr, 0.0], [0.0, 0.0, 1.0]];
    let ry = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
    let rx = [[1.0, 0.0, 0.0], [0.0, cp, -sp], [0.0, sp, cp]];
    mat3_mul(&mat3_mul(&rz, &ry), &rx)
}

fn mat3_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

/// Shape, pose and expression coefficients of one face.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceParams {
    pub shape: Vec<f64>,
    pub pose: Pose,
    pub expression: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FaceParamsDoc {
    format_version: u32,
    shape: Vec<f64>,
    pose: Pose,
    expression: Vec<f64>,
}

impl FaceParams {
    pub fn neutral(k_shape: usize, k_expr: usize) -> Self {
        Self { shape: vec![0.0; k_shape], pose: Pose::default(), expression: vec![0.0; k_expr] }
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.pose;
        let all = self.shape.iter().chain(&self.expression).chain([&p.tx, &p.ty, &p.scale]);
        if all.into_iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParams("non-finite value".into()));
        }
        if p.scale <= 0.0 {
            return Err(Error::InvalidParams(format!("scale must be > 0, got {}", p.scale)));
        }
        for (name, a) in [("yaw", p.yaw), ("pitch", p.pitch), ("roll", p.roll)] {
            if !(-PI..=PI).contains(&a) {
                return Err(Error::InvalidParams(format!("{name} {a} outside [-pi, pi]")));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        let doc = FaceParamsDoc {
            format_version: FACE_PARAMS_VERSION,
            shape: self.shape.clone(),
            pose: self.pose,
            expression: self.expression.clone(),
        };
        Ok(toml::to_string(&doc)?)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let doc: FaceParamsDoc = toml::from_str(text)?;
        if doc.format_version != FACE_PARAMS_VERSION {
            return Err(Error::Version { found: doc.format_version, expected: FACE_PARAMS_VERSION });
        }
        let p = FaceParams { shape: doc.shape, pose: doc.pose, expression: doc.expression };
        p.validate()?;
        Ok(p)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }
}

/// Linear face model: mean mesh plus shape and expression bases.
#[derive(Debug, Clone, PartialEq)]
pub struct MorphableBasis {
    pub mean_mesh: Array2<f64>,
    pub shape_basis: Array2<f64>,
    pub expr_basis: Array2<f64>,
    pub landmark_indices: Vec<usize>,
}

impl MorphableBasis {
    /// Ellipsoid-grid mean face with seeded random bases whose columns have
    /// max-abs entry 0.05.
    pub fn toy(k_shape: usize, k_expr: usize, seed: u64) -> Self {
        let mut mean = Array2::<f64>::zeros((NUM_VERTICES, 3));
        for r in 0..GRID_ROWS {
            for c in 0..GRID_COLS {
                let x = 2.0 * c as f64 / (GRID_COLS - 1) as f64 - 1.0;
                let y = 1.0 - 2.0 * r as f64 / (GRID_ROWS - 1) as f64;
                let v = r * GRID_COLS + c;
                mean[[v, 0]] = 0.6 * x;
                mean[[v, 1]] = 0.8 * y;
                mean[[v, 2]] = 0.5 * (1.0 - x * x - y * y).max(0.0).sqrt();
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut basis = |k: usize| {
            let mut b = Array2::<f64>::zeros((NUM_VERTICES * 3, k));
            for mut col in b.columns_mut() {
                col.mapv_inplace(|_| StandardNormal.sample(&mut rng));
                let m = col.fold(0.0f64, |a, &v| a.max(v.abs()));
                col.mapv_inplace(|v| 0.05 * v / m);
            }
            b
        };
        let shape_basis = basis(k_shape);
        let expr_basis = basis(k_expr);
        Self { mean_mesh: mean, shape_basis, expr_basis, landmark_indices: LANDMARK_INDICES.to_vec() }
    }

    pub fn num_vertices(&self) -> usize {
        self.mean_mesh.nrows()
    }

    pub fn k_shape(&self) -> usize {
        self.shape_basis.ncols()
    }

    pub fn k_expr(&self) -> usize {
        self.expr_basis.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.num_vertices();
        if self.mean_mesh.ncols() != 3 {
            return Err(Error::shape("mean mesh", [v, 3], self.mean_mesh.shape()));
        }
        if self.shape_basis.nrows() != 3 * v || self.expr_basis.nrows() != 3 * v {
            return Err(Error::shape("basis rows", 3 * v, (self.shape_basis.nrows(), self.expr_basis.nrows())));
        }
        if self.landmark_indices.len() != NUM_LANDMARKS {
            return Err(Error::shape("landmark indices", NUM_LANDMARKS, self.landmark_indices.len()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for &i in &self.landmark_indices {
            if i >= v || !seen.insert(i) {
                return Err(Error::range("landmark index", format!("{i} invalid or repeated")));
            }
        }
        Ok(())
    }
}

/// 72 points in normalized image coordinates plus in-frame flags.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkSet72 {
    points: Vec<[f64; 2]>,
    visible: Vec<bool>,
}

impl LandmarkSet72 {
    pub fn new(points: Vec<[f64; 2]>, visible: Vec<bool>) -> Result<Self> {
        if points.len() != NUM_LANDMARKS || visible.len() != NUM_LANDMARKS {
            return Err(Error::shape("landmark set", NUM_LANDMARKS, (points.len(), visible.len())));
        }
        Ok(Self { points, visible })
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    pub fn visible(&self) -> &[bool] {
        &self.visible
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> [f64; 2] {
        let n = self.points.len() as f64;
        let (sx, sy) = self.points.iter().fold((0.0, 0.0), |(a, b), p| (a + p[0], b + p[1]));
        [sx / n, sy / n]
    }

    /// Largest pairwise distance.
    pub fn spread(&self) -> f64 {
        let mut m = 0.0f64;
        for (i, a) in self.points.iter().enumerate() {
            for b in &self.points[i + 1..] {
                m = m.max(((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt());
            }
        }
        m
    }

    /// One `x y visible` row per landmark.
    pub fn to_text(&self) -> String {
        self.points
            .iter()
            .zip(&self.visible)
            .map(|(p, v)| format!("{:.9} {:.9} {}\n", p[0], p[1], u8::from(*v)))
            .collect()
    }
}

/// `[H, W, 3]` control image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlImage {
    pixels: Array3<f64>,
}

impl ControlImage {
    pub fn black(h: usize, w: usize) -> Self {
        Self { pixels: Array3::zeros((h, w, 3)) }
    }

    pub fn from_pixels(pixels: Array3<f64>) -> Self {
        Self { pixels: pixels.mapv(|v| v.clamp(0.0, 1.0)) }
    }

    pub fn pixels(&self) -> &Array3<f64> {
        &self.pixels
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }

    /// Channel-first `[3, H, W]` copy.
    pub fn to_chw(&self) -> Tensor {
        self.pixels.view().permuted_axes([2, 0, 1]).as_standard_layout().into_owned().into_dyn()
    }

    pub fn to_rgb_image(&self) -> image::RgbImage {
        let (h, w, _) = self.pixels.dim();
        image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let px = |c| (self.pixels[[y as usize, x as usize, c]] * 255.0).round() as u8;
            image::Rgb([px(0), px(1), px(2)])
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb_image().save(path)?;
        Ok(())
    }
}

/// Shape from `source`, pose and expression from `drive`.
pub fn mix_params(source: &FaceParams, drive: &FaceParams) -> FaceParams {
    FaceParams { shape: source.shape.clone(), pose: drive.pose, expression: drive.expression.clone() }
}

/// Posed mesh `[V, 3]`.
pub fn synthesize_mesh(p: &FaceParams, basis: &MorphableBasis) -> Result<Array2<f64>> {
    p.validate()?;
    if p.shape.len() != basis.k_shape() {
        return Err(Error::shape("shape coefficients", basis.k_shape(), p.shape.len()));
    }
    if p.expression.len() != basis.k_expr() {
        return Err(Error::shape("expression coefficients", basis.k_expr(), p.expression.len()));
    }
    let alpha = ndarray::Array1::from(p.shape.clone());
    let beta = ndarray::Array1::from(p.expression.clone());
    let offsets = basis.shape_basis.dot(&alpha) + basis.expr_basis.dot(&beta);
    let v = basis.num_vertices();
    let offsets = offsets.into_shape_with_order((v, 3)).expect("3 coordinates per vertex");
    let verts0 = &basis.mean_mesh + &offsets;
    let r = p.pose.rotation();
    let s = p.pose.scale;
    let mut mesh = Array2::<f64>::zeros((v, 3));
    for (i, row) in verts0.rows().into_iter().enumerate() {
        for a in 0..3 {
            mesh[[i, a]] = s * (r[a][0] * row[0] + r[a][1] * row[1] + r[a][2] * row[2]);
        }
        mesh[[i, 0]] += p.pose.tx;
        mesh[[i, 1]] += p.pose.ty;
    }
    Ok(mesh)
}

/// Map a canonical `(x, y)` to normalized image coordinates.
pub fn viewport(x: f64, y: f64) -> [f64; 2] {
    [(x + 1.0) * 0.5, (1.0 - y) * 0.5]
}

pub fn project_landmarks(mesh: &Array2<f64>, basis: &MorphableBasis) -> Result<LandmarkSet72> {
    if mesh.ncols() != 3 || mesh.nrows() != basis.num_vertices() {
        return Err(Error::shape("mesh", [basis.num_vertices(), 3], mesh.shape()));
    }
    let mut points = Vec::with_capacity(NUM_LANDMARKS);
    let mut visible = Vec::with_capacity(NUM_LANDMARKS);
    for &i in &basis.landmark_indices {
        let p = viewport(mesh[[i, 0]], mesh[[i, 1]]);
        visible.push((0.0..=1.0).contains(&p[0]) && (0.0..=1.0).contains(&p[1]));
        points.push(p);
    }
    LandmarkSet72::new(points, visible)
}

/// Draw every visible landmark as a filled disc of radius `max(1, H/64)`.
pub fn rasterize_control(lm: &LandmarkSet72, h: usize, w: usize) -> Result<ControlImage> {
    if h < 8 || w < 8 {
        return Err(Error::range("control image size", format!("{h}x{w} below 8x8")));
    }
    let radius = (h as f64 / 64.0).max(1.0);
    let mut px = Array3::<f64>::zeros((h, w, 3));
    for (i, (p, &vis)) in lm.points.iter().zip(&lm.visible).enumerate() {
        if !vis {
            continue;
        }
        let color = LandmarkGroup::of(i).color();
        let (cx, cy) = (p[0] * w as f64, p[1] * h as f64);
        let y0 = (cy - radius - 1.0).floor().max(0.0) as usize;
        let y1 = ((cy + radius + 1.0).ceil() as usize).min(h);
        let x0 = (cx - radius - 1.0).floor().max(0.0) as usize;
        let x1 = ((cx + radius + 1.0).ceil() as usize).min(w);
        for y in y0..y1 {
            for x in x0..x1 {
                let dx = x as f64 + 0.5 - cx;
                let dy = y as f64 + 0.5 - cy;
                if dx * dx + dy * dy <= radius * radius {
                    for (c, &v) in color.iter().enumerate() {
                        px[[y, x, c]] = v;
                    }
                }
            }
        }
    }
    Ok(ControlImage::from_pixels(px))
}

/// Landmarks of a face as given, without mixing.
pub fn extract_landmarks(p: &FaceParams, basis: &MorphableBasis) -> Result<LandmarkSet72> {
    project_landmarks(&synthesize_mesh(p, basis)?, basis)
}

/// Source identity under the drive pose and expression.
pub fn predict_landmarks(
    source: &FaceParams,
    drive: &FaceParams,
    basis: &MorphableBasis,
    h: usize,
    w: usize,
) -> Result<(LandmarkSet72, ControlImage)> {
    let mixed = mix_params(source, drive);
    let mesh = synthesize_mesh(&mixed, basis)?;
    let lm = project_landmarks(&mesh, basis)?;
    let img = rasterize_control(&lm, h, w)?;
    Ok((lm, img))
}
