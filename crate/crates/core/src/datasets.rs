//! Multi-view datasets: the on-disk format, a loader, and a synthetic
//! nested-shell scene with an exact reference renderer.
//!
//! Directory layout:
//!
//! ```text
//! cameras.json
//! images/view{id:04}/frame{j:04}.png     (j = 1..=frame_count)
//! scene.json                              (synthetic scenes only)
//! ```
//!
//! Camera extrinsics follow the pinhole convention `x_cam = R·x_world + t`
//! with `rotation` stored row-major.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::appearance::{Appearance, AppearanceError, FrameSelector, TextureQuery};
use crate::autodiff::Matrix;
use crate::geometry::{orthonormality_error, Aabb, Camera, GeometryError, Intrinsics, Mat3, Ray, UvMapper, Vec3};
use crate::imaging::{Image, ImageError};
use crate::manifold::SphereField;
use crate::volren::{composite, CompositeSample};

pub const FORMAT: &str = "facefolds-multiview";
pub const FORMAT_VERSION: u32 = 1;
/// Rotations further than this from orthonormal are rejected on load.
pub const ROTATION_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: String,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("camera {id}: {source}")]
    Camera { id: usize, source: GeometryError },
    #[error("malformed dataset: {0}")]
    Format(String),
    #[error("image {path} is {got:?}, expected {want:?}")]
    Resolution {
        path: String,
        got: (u32, u32),
        want: (u32, u32),
    },
    #[error("invalid generator settings: {0}")]
    Config(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraRecord {
    pub id: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    /// World-to-camera rotation, row-major.
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
}

impl CameraRecord {
    pub fn from_camera(id: usize, cam: &Camera) -> Self {
        let k = cam.intrinsics();
        let r = cam.rotation().transpose();
        let t = -(r * cam.center());
        let mut rotation = [0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                rotation[i * 3 + j] = r[(i, j)];
            }
        }
        Self {
            id,
            fx: k.fx,
            fy: k.fy,
            cx: k.cx,
            cy: k.cy,
            width: k.width,
            height: k.height,
            rotation,
            translation: [t.x, t.y, t.z],
        }
    }

    /// Validates and converts; rotations within [`ROTATION_TOL`] of
    /// orthonormal are re-orthonormalized.
    pub fn to_camera(&self) -> Result<Camera, DatasetError> {
        let wrap = |source| DatasetError::Camera {
            id: self.id,
            source,
        };
        let r = Mat3::from_row_slice(&self.rotation);
        let dev = orthonormality_error(&r);
        if !(dev <= ROTATION_TOL) {
            return Err(wrap(GeometryError::NotOrthonormal(dev)));
        }
        let r = if dev > 0.0 {
            let svd = r.svd(true, true);
            svd.u.unwrap() * svd.v_t.unwrap()
        } else {
            r
        };
        let t = Vec3::from(self.translation);
        let center = -(r.transpose() * t);
        let k = Intrinsics {
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            width: self.width,
            height: self.height,
        };
        Camera::new(k, r.transpose(), center).map_err(wrap)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraFile {
    pub format: String,
    pub version: u32,
    pub frame_count: usize,
    pub width: u32,
    pub height: u32,
    pub image_pattern: String,
    #[serde(default)]
    pub holdout: Vec<usize>,
    #[serde(default)]
    pub background: Option<[f64; 3]>,
    pub cameras: Vec<CameraRecord>,
}

pub const IMAGE_PATTERN: &str = "images/view{view:04}/frame{frame:04}.png";

pub fn image_path(root: &Path, view: usize, frame: usize) -> PathBuf {
    root.join(format!("images/view{view:04}/frame{frame:04}.png"))
}

/// A loaded dataset; every image is held in memory as RGB in [0, 1].
#[derive(Clone, Debug)]
pub struct MultiViewDataset {
    pub cameras: Vec<Camera>,
    pub ids: Vec<usize>,
    pub frames: usize,
    /// Held-out camera ids.
    pub holdout: Vec<usize>,
    pub background: Option<[f64; 3]>,
    images: Vec<Image>,
}

impl MultiViewDataset {
    pub fn from_parts(
        cameras: Vec<Camera>,
        ids: Vec<usize>,
        frames: usize,
        holdout: Vec<usize>,
        background: Option<[f64; 3]>,
        images: Vec<Image>,
    ) -> Result<Self, DatasetError> {
        if cameras.len() != ids.len() || images.len() != cameras.len() * frames || frames == 0 {
            return Err(DatasetError::Format("image count does not match views × frames".into()));
        }
        Ok(Self {
            cameras,
            ids,
            frames,
            holdout,
            background,
            images,
        })
    }

    pub fn views(&self) -> usize {
        self.cameras.len()
    }

    /// Image of camera position `view` (not id) at 1-based `frame`.
    pub fn image(&self, view: usize, frame: usize) -> &Image {
        &self.images[view * self.frames + frame - 1]
    }

    pub fn is_holdout(&self, view: usize) -> bool {
        self.holdout.contains(&self.ids[view])
    }

    pub fn training_views(&self) -> Vec<usize> {
        (0..self.views()).filter(|&v| !self.is_holdout(v)).collect()
    }

    pub fn holdout_views(&self) -> Vec<usize> {
        (0..self.views()).filter(|&v| self.is_holdout(v)).collect()
    }

    pub fn resolution(&self) -> (u32, u32) {
        let k = self.cameras[0].intrinsics();
        (k.width, k.height)
    }
}

/// Loads a dataset directory, optionally box-downsampling every image by
/// `downsample` (intrinsics are rescaled to match).
pub fn load_dataset(dir: &Path, downsample: u32) -> Result<MultiViewDataset, DatasetError> {
    let path = dir.join("cameras.json");
    let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
    let file: CameraFile = serde_json::from_str(&text).map_err(|source| DatasetError::Json {
        path: path.display().to_string(),
        source,
    })?;
    if file.format != FORMAT || file.version != FORMAT_VERSION {
        return Err(DatasetError::Format(format!(
            "unsupported format {} v{}",
            file.format, file.version
        )));
    }
    if file.image_pattern != IMAGE_PATTERN {
        return Err(DatasetError::Format(format!(
            "unsupported image pattern {}",
            file.image_pattern
        )));
    }
    if file.cameras.is_empty() || file.frame_count == 0 {
        return Err(DatasetError::Format("no cameras or frames".into()));
    }
    let factor = downsample.max(1);
    let mut cameras = Vec::new();
    let mut ids = Vec::new();
    let mut images = Vec::new();
    for rec in &file.cameras {
        if ids.contains(&rec.id) {
            return Err(DatasetError::Format(format!("duplicate camera id {}", rec.id)));
        }
        if (rec.width, rec.height) != (file.width, file.height) {
            return Err(DatasetError::Format(format!(
                "camera {} has resolution {}x{}, dataset is {}x{}",
                rec.id, rec.width, rec.height, file.width, file.height
            )));
        }
        let cam = rec.to_camera()?;
        for frame in 1..=file.frame_count {
            let p = image_path(dir, rec.id, frame);
            if !p.exists() {
                return Err(DatasetError::Format(format!("missing image {}", p.display())));
            }
            let img = Image::load_png(&p, 3)?;
            if (img.width, img.height) != (file.width, file.height) {
                return Err(DatasetError::Resolution {
                    path: p.display().to_string(),
                    got: (img.width, img.height),
                    want: (file.width, file.height),
                });
            }
            images.push(img.downsample(factor));
        }
        cameras.push(cam.with_intrinsics(cam.intrinsics().downsampled(factor)));
        ids.push(rec.id);
    }
    if let Some(bad) = file.holdout.iter().find(|h| !ids.contains(h)) {
        return Err(DatasetError::Format(format!("holdout id {bad} is not a camera")));
    }
    MultiViewDataset::from_parts(cameras, ids, file.frame_count, file.holdout, file.background, images)
}

/// Smooth procedural colour over the chart:
/// `base + amp·sin(π(fu·u + fv·v) + phase + shift·(j − 1))` per channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Pattern {
    pub base: [f64; 3],
    pub amp: [f64; 3],
    pub freq_u: f64,
    pub freq_v: f64,
    pub phase: [f64; 3],
    pub frame_shift: f64,
}

impl Pattern {
    pub fn color(&self, u: f64, v: f64, frame: usize) -> [f64; 3] {
        let arg = PI * (self.freq_u * u + self.freq_v * v) + self.frame_shift * (frame as f64 - 1.0);
        std::array::from_fn(|c| (self.base[c] + self.amp[c] * (arg + self.phase[c]).sin()).clamp(0.0, 1.0))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Shell {
    pub radius: f64,
    pub alpha: f64,
    pub pattern: Pattern,
}

/// Smoothstep falloff of alpha from `inner` to `outer` in both |u| and |v|.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Window {
    pub inner: f64,
    pub outer: f64,
}

impl Window {
    fn falloff(&self, x: f64) -> f64 {
        let a = x.abs();
        if a <= self.inner {
            1.0
        } else if a >= self.outer {
            0.0
        } else {
            let s = (self.outer - a) / (self.outer - self.inner);
            s * s * (3.0 - 2.0 * s)
        }
    }

    pub fn weight(&self, u: f64, v: f64) -> f64 {
        self.falloff(u) * self.falloff(v)
    }
}

/// Nested translucent spherical caps about a common centre, which is also
/// the UV chart centre, so every shell coincides with one chart level set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticScene {
    pub center: [f64; 3],
    /// Outermost first.
    pub shells: Vec<Shell>,
    pub window: Window,
    pub background: [f64; 3],
    pub frames: usize,
    pub bounds: Aabb,
}

impl SyntheticScene {
    /// Two shells: a half-transparent outer cap over an opaque inner one.
    pub fn nested_spheres(frames: usize) -> Self {
        Self {
            center: [-0.25, 0.0, 0.0],
            shells: vec![
                Shell {
                    radius: 0.30,
                    alpha: 0.5,
                    pattern: Pattern {
                        base: [0.7, 0.5, 0.3],
                        amp: [0.2, 0.2, 0.15],
                        freq_u: 1.0,
                        freq_v: 0.7,
                        phase: [0.0, 1.3, 2.6],
                        frame_shift: 0.6,
                    },
                },
                Shell {
                    radius: 0.22,
                    alpha: 1.0,
                    pattern: Pattern {
                        base: [0.3, 0.55, 0.7],
                        amp: [0.2, 0.25, 0.2],
                        freq_u: 0.6,
                        freq_v: 1.2,
                        phase: [0.4, 2.0, 3.5],
                        frame_shift: -0.45,
                    },
                },
            ],
            window: Window {
                inner: 0.4,
                outer: 0.55,
            },
            background: [0.1, 0.1, 0.1],
            frames,
            bounds: Aabb::new([-0.3, -0.4, -0.4], [0.3, 0.4, 0.4]),
        }
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let bad = |m: &str| Err(DatasetError::Config(m.to_string()));
        if self.shells.is_empty() {
            return bad("scene has no shells");
        }
        if self.shells.windows(2).any(|w| !(w[0].radius > w[1].radius)) {
            return bad("shell radii must strictly decrease from the outermost");
        }
        if self.shells.iter().any(|s| !(0.0..=1.0).contains(&s.alpha) || !(s.radius > 0.0)) {
            return bad("shell alpha must lie in [0, 1] and radii must be positive");
        }
        if self.frames == 0 {
            return bad("scene needs at least one frame");
        }
        Ok(())
    }

    pub fn mapper(&self) -> UvMapper {
        UvMapper::new(Vec3::from(self.center))
    }

    /// The exact level-set field whose levels are the shell radii.
    pub fn field(&self) -> SphereField {
        SphereField {
            center: Vec3::from(self.center),
        }
    }

    /// Shell radii, ascending (the natural s-values).
    pub fn s_values(&self) -> Vec<f64> {
        let mut s: Vec<f64> = self.shells.iter().map(|s| s.radius).collect();
        s.reverse();
        s
    }

    fn shade(&self, shell: &Shell, uv: [f64; 2], frame: usize) -> ([f64; 3], f64) {
        let alpha = shell.alpha * self.window.weight(uv[0], uv[1]);
        (shell.pattern.color(uv[0], uv[1], frame), alpha)
    }

    /// Exact colour along `ray` at 1-based `frame`.
    pub fn trace(&self, ray: &Ray, frame: usize) -> [f64; 3] {
        let c = Vec3::from(self.center);
        let mapper = self.mapper();
        let oc = ray.origin - c;
        let mut samples = Vec::new();
        for shell in &self.shells {
            let b = ray.direction.dot(&oc);
            let disc = b * b - (oc.norm_squared() - shell.radius * shell.radius);
            if disc < 0.0 {
                continue;
            }
            let root = disc.sqrt();
            for t in [-b - root, -b + root] {
                if t < ray.t_near || t > ray.t_far {
                    continue;
                }
                let Ok(uv) = mapper.project(&ray.at(t)) else {
                    continue;
                };
                let (color, alpha) = self.shade(shell, uv, frame);
                if alpha > 0.0 {
                    samples.push(CompositeSample { color, alpha, t });
                }
            }
        }
        samples.sort_by(|a, b| a.t.total_cmp(&b.t));
        composite(&samples, self.background).expect("sorted").0
    }
}

impl Appearance for SyntheticScene {
    /// Shades samples on the shell whose radius equals the sample's
    /// s-value; any other level is transparent. Views are ignored.
    fn rgba(&self, q: &TextureQuery) -> Result<Matrix, AppearanceError> {
        let FrameSelector::Frame(frame) = *q.frame else {
            return Err(AppearanceError::Unsupported(
                "analytic scenes have no latent codes",
            ));
        };
        if frame == 0 || frame > self.frames {
            return Err(AppearanceError::FrameOutOfRange {
                frame,
                frames: self.frames,
            });
        }
        let mut out = Matrix::zeros((q.uv.nrows(), 4));
        for r in 0..q.uv.nrows() {
            let s = q.s_values[r];
            if let Some(shell) = self.shells.iter().find(|sh| (sh.radius - s).abs() < 1e-9) {
                let (c, a) = self.shade(shell, [q.uv[[r, 0]], q.uv[[r, 1]]], frame);
                out[[r, 0]] = c[0];
                out[[r, 1]] = c[1];
                out[[r, 2]] = c[2];
                out[[r, 3]] = a;
            }
        }
        Ok(out)
    }
}

/// Renders the scene exactly: one ray per pixel centre.
pub fn oracle_render(scene: &SyntheticScene, cam: &Camera, frame: usize) -> Image {
    let (w, h) = (cam.width(), cam.height());
    let rows: Vec<Vec<f64>> = (0..h)
        .into_par_iter()
        .map(|y| {
            (0..w)
                .flat_map(|x| scene.trace(&cam.pixel_ray(x, y), frame))
                .collect()
        })
        .collect();
    Image {
        width: w,
        height: h,
        channels: 3,
        data: rows.concat(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub views: usize,
    pub width: u32,
    pub height: u32,
    pub frames: usize,
    pub seed: u64,
    /// Focal length as a multiple of the image width.
    pub focal_factor: f64,
    pub distance: f64,
    pub max_azimuth_deg: f64,
    pub max_elevation_deg: f64,
    pub holdout: Vec<usize>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            views: 8,
            width: 64,
            height: 64,
            frames: 4,
            seed: 0,
            focal_factor: 1.375,
            distance: 1.0,
            max_azimuth_deg: 25.0,
            max_elevation_deg: 15.0,
            holdout: vec![1, 6],
        }
    }
}

/// Frontal camera rig: two rows of azimuths spread over
/// `±max_azimuth`, at alternating elevations, with small seeded jitter,
/// all looking at a point just in front of the scene centre.
pub fn frontal_rig(cfg: &SynthConfig, target: Vec3) -> Result<Vec<Camera>, DatasetError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let per_row = cfg.views.div_ceil(2).max(2);
    let k = Intrinsics::centered(cfg.focal_factor * cfg.width as f64, cfg.width, cfg.height);
    (0..cfg.views)
        .map(|i| {
            let row = i / per_row;
            let col = i % per_row;
            let az = -cfg.max_azimuth_deg
                + 2.0 * cfg.max_azimuth_deg * col as f64 / (per_row - 1) as f64
                + rng.random_range(-2.0..2.0);
            let el = if row == 0 { -0.6 } else { 0.6 } * cfg.max_elevation_deg
                + rng.random_range(-2.0..2.0);
            let (az, el) = (
                az.clamp(-cfg.max_azimuth_deg, cfg.max_azimuth_deg).to_radians(),
                el.clamp(-cfg.max_elevation_deg, cfg.max_elevation_deg).to_radians(),
            );
            let eye = target + cfg.distance * Vec3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin());
            Camera::look_at(k, eye, target, Vec3::new(0.0, 0.0, 1.0))
                .map_err(|source| DatasetError::Camera { id: i, source })
        })
        .collect()
}

/// Writes a synthetic dataset (cameras, images, scene description) to `dir`.
pub fn generate_synthetic(
    dir: &Path,
    scene: &SyntheticScene,
    cfg: &SynthConfig,
) -> Result<Vec<Camera>, DatasetError> {
    scene.validate()?;
    if cfg.views < 4 {
        return Err(DatasetError::Config("need at least 4 views".into()));
    }
    if cfg.frames != scene.frames {
        return Err(DatasetError::Config("frame count differs from the scene".into()));
    }
    if cfg.width == 0 || cfg.height == 0 {
        return Err(DatasetError::Config("image size must be non-zero".into()));
    }
    if let Some(bad) = cfg.holdout.iter().find(|&&h| h >= cfg.views) {
        return Err(DatasetError::Config(format!("holdout view {bad} out of range")));
    }
    let target = Vec3::from(scene.center) + Vec3::new(0.15, 0.0, 0.0);
    let cameras = frontal_rig(cfg, target)?;
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    for (v, cam) in cameras.iter().enumerate() {
        let vd = dir.join(format!("images/view{v:04}"));
        std::fs::create_dir_all(&vd).map_err(io_err(&vd))?;
        for frame in 1..=cfg.frames {
            oracle_render(scene, cam, frame).save_png(&image_path(dir, v, frame))?;
        }
    }
    let file = CameraFile {
        format: FORMAT.into(),
        version: FORMAT_VERSION,
        frame_count: cfg.frames,
        width: cfg.width,
        height: cfg.height,
        image_pattern: IMAGE_PATTERN.into(),
        holdout: cfg.holdout.clone(),
        background: Some(scene.background),
        cameras: cameras
            .iter()
            .enumerate()
            .map(|(i, c)| CameraRecord::from_camera(i, c))
            .collect(),
    };
    write_json(&dir.join("cameras.json"), &file)?;
    write_json(&dir.join("scene.json"), scene)?;
    Ok(cameras)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), DatasetError> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    std::fs::write(path, text + "\n").map_err(io_err(path))
}

pub fn load_scene(dir: &Path) -> Result<SyntheticScene, DatasetError> {
    let path = dir.join("scene.json");
    let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
    let scene: SyntheticScene = serde_json::from_str(&text).map_err(|source| DatasetError::Json {
        path: path.display().to_string(),
        source,
    })?;
    scene.validate()?;
    Ok(scene)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn axis_camera(size: u32) -> Camera {
        Camera::look_at(
            Intrinsics::centered(1.375 * size as f64, size, size),
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(-0.25, 0.0, 0.0),
            Vec3::new(0.0, 0.0, 1.0),
        )
        .unwrap()
    }

    #[test]
    fn opaque_sphere_centre_pixel() {
        let mut scene = SyntheticScene::nested_spheres(2);
        scene.shells.remove(0);
        let cam = axis_camera(33);
        let img = oracle_render(&scene, &cam, 2);
        let want = scene.shells[0].pattern.color(0.0, 0.0, 2);
        let got = img.pixel(16, 16);
        for c in 0..3 {
            assert!((got[c] - want[c]).abs() < 1e-12);
        }
        // corners miss every shell
        assert_eq!(img.pixel(0, 0), &scene.background);
    }

    #[test]
    fn two_shell_closed_form() {
        let scene = SyntheticScene::nested_spheres(1);
        let cam = axis_camera(33);
        let img = oracle_render(&scene, &cam, 1);
        let outer = scene.shells[0].pattern.color(0.0, 0.0, 1);
        let inner = scene.shells[1].pattern.color(0.0, 0.0, 1);
        let got = img.pixel(16, 16);
        for c in 0..3 {
            assert!((got[c] - (0.5 * outer[c] + 0.5 * inner[c])).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_scenes_rejected() {
        let mut s = SyntheticScene::nested_spheres(1);
        s.shells.reverse();
        assert!(s.validate().is_err());
        let mut s = SyntheticScene::nested_spheres(1);
        s.shells[0].alpha = 1.5;
        assert!(s.validate().is_err());
    }

    #[test]
    fn camera_record_round_trip() {
        let cfg = SynthConfig::default();
        for cam in frontal_rig(&cfg, Vec3::new(-0.1, 0.0, 0.0)).unwrap() {
            let back = CameraRecord::from_camera(0, &cam).to_camera().unwrap();
            assert!((back.rotation() - cam.rotation()).norm() < 1e-12);
            assert!((back.center() - cam.center()).norm() < 1e-12);
            assert_eq!(back.intrinsics(), cam.intrinsics());
        }
    }

    #[test]
    fn rotation_tolerance() {
        let cam = axis_camera(8);
        let mut rec = CameraRecord::from_camera(3, &cam);
        rec.rotation[1] += 1e-8;
        let fixed = rec.to_camera().unwrap();
        assert!(orthonormality_error(fixed.rotation()) < 1e-12);
        rec.rotation[1] += 1e-4;
        assert!(matches!(rec.to_camera(), Err(DatasetError::Camera { id: 3, .. })));
    }
}
