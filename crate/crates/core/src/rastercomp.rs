//! Software reference renderer for baked assets: per-layer rasterization,
//! then per-pixel depth sort and over-compositing.

use rayon::prelude::*;
use thiserror::Error;

use crate::datasets::MultiViewDataset;
use crate::exporter::{sample_tile, LayeredMeshAsset};
use crate::geometry::{Camera, Vec3};
use crate::imaging::Image;
use crate::metrics::{psnr, ssim, ImageScore, MetricError, QualityReport};
use crate::volren::{composite, CompositeSample};

/// Rows rendered per parallel task.
const BAND: u32 = 16;
/// Triangles with a vertex closer than this to the camera plane are skipped.
const NEAR: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("frame {frame} out of range 1..={frames}")]
    FrameOutOfRange { frame: usize, frames: usize },
    #[error("layer mask has {got} entries, asset has {want} layers")]
    Mask { got: usize, want: usize },
    #[error(transparent)]
    Metric(#[from] MetricError),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RasterOptions {
    /// Drop triangles whose outward side faces away from the camera.
    pub cull_backfaces: bool,
    /// Per-layer visibility; `None` shows every layer.
    pub visible: Option<Vec<bool>>,
}

struct ScreenTri {
    layer: usize,
    // Pixel coordinates, camera depth and UV per vertex.
    p: [[f64; 2]; 3],
    z: [f64; 3],
    uv: [[f64; 2]; 3],
    area: f64,
    y_min: f64,
    y_max: f64,
}

fn setup(asset: &LayeredMeshAsset, cam: &Camera, opts: &RasterOptions) -> Vec<ScreenTri> {
    let k = cam.intrinsics();
    let eye = cam.center();
    let mut tris = Vec::new();
    for (layer, mesh) in asset.meshes.iter().enumerate() {
        if let Some(mask) = &opts.visible {
            if !mask[layer] {
                continue;
            }
        }
        let world: Vec<Vec3> = mesh
            .positions
            .iter()
            .map(|p| Vec3::new(p[0] as f64, p[1] as f64, p[2] as f64))
            .collect();
        let local: Vec<Vec3> = world.iter().map(|p| cam.world_to_camera(p)).collect();
        for t in mesh.indices.chunks_exact(3) {
            let idx = [t[0] as usize, t[1] as usize, t[2] as usize];
            let c = idx.map(|i| local[i]);
            if c.iter().any(|v| v.z <= NEAR) {
                continue;
            }
            if opts.cull_backfaces {
                let w = idx.map(|i| world[i]);
                let n = (w[1] - w[0]).cross(&(w[2] - w[0]));
                if n.dot(&(eye - w[0])) < 0.0 {
                    continue;
                }
            }
            let p = c.map(|v| [k.fx * v.x / v.z + k.cx, k.fy * v.y / v.z + k.cy]);
            let area = edge(&p[0], &p[1], &p[2]);
            if area == 0.0 {
                continue;
            }
            let uv = idx.map(|i| [mesh.uvs[i][0] as f64, mesh.uvs[i][1] as f64]);
            tris.push(ScreenTri {
                layer,
                y_min: p.iter().map(|q| q[1]).fold(f64::INFINITY, f64::min),
                y_max: p.iter().map(|q| q[1]).fold(f64::NEG_INFINITY, f64::max),
                p,
                z: c.map(|v| v.z),
                uv,
                area,
            });
        }
    }
    tris
}

fn edge(a: &[f64; 2], b: &[f64; 2], p: &[f64; 2]) -> f64 {
    (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
}

/// Renders frame `frame` (1-based) as unpremultiplied RGBA: colours are
/// composited front to back over black, then divided by the accumulated
/// alpha. `Image::over` with a background recovers the composited colour.
/// Pixels no layer covers are transparent black.
pub fn rasterize_layers(
    asset: &LayeredMeshAsset,
    cam: &Camera,
    frame: usize,
    opts: &RasterOptions,
) -> Result<Image, RasterError> {
    let frames = asset.atlases.len();
    if frame == 0 || frame > frames {
        return Err(RasterError::FrameOutOfRange { frame, frames });
    }
    let n = asset.meshes.len();
    if let Some(mask) = &opts.visible {
        if mask.len() != n {
            return Err(RasterError::Mask { got: mask.len(), want: n });
        }
    }
    let atlas = &asset.atlases[frame - 1];
    let layout = asset.layout();
    let tris = setup(asset, cam, opts);
    let (w, h) = (cam.width(), cam.height());
    let bands: Vec<Vec<f64>> = (0..h.div_ceil(BAND))
        .into_par_iter()
        .map(|b| {
            let (y0, y1) = (b * BAND, ((b + 1) * BAND).min(h));
            let rows = (y1 - y0) as usize;
            let len = rows * w as usize * n;
            // Nearest hit per (pixel, layer): depth and UV.
            let mut depth = vec![f64::INFINITY; len];
            let mut uvs = vec![[0.0; 2]; len];
            for t in &tris {
                if t.y_max < y0 as f64 || t.y_min > y1 as f64 {
                    continue;
                }
                let x_min = t.p.iter().map(|q| q[0]).fold(f64::INFINITY, f64::min);
                let x_max = t.p.iter().map(|q| q[0]).fold(f64::NEG_INFINITY, f64::max);
                let px0 = (x_min - 0.5).ceil().max(0.0) as u32;
                let px1 = ((x_max - 0.5).floor()).min(w as f64 - 1.0);
                let py0 = ((t.y_min - 0.5).ceil().max(y0 as f64)) as u32;
                let py1 = ((t.y_max - 0.5).floor()).min(y1 as f64 - 1.0);
                if px1 < 0.0 || py1 < 0.0 {
                    continue;
                }
                for py in py0..=py1 as u32 {
                    for px in px0..=px1 as u32 {
                        let q = [px as f64 + 0.5, py as f64 + 0.5];
                        let l = [
                            edge(&t.p[1], &t.p[2], &q) / t.area,
                            edge(&t.p[2], &t.p[0], &q) / t.area,
                            edge(&t.p[0], &t.p[1], &q) / t.area,
                        ];
                        // Inclusive edges: shared edges are hit twice and the
                        // depth test keeps one, so no cracks appear.
                        if l.iter().any(|&v| v < 0.0) {
                            continue;
                        }
                        let inv: f64 = (0..3).map(|i| l[i] / t.z[i]).sum();
                        let z = 1.0 / inv;
                        let slot = (((py - y0) * w + px) as usize) * n + t.layer;
                        if z < depth[slot] {
                            depth[slot] = z;
                            let mut uv = [0.0; 2];
                            for i in 0..3 {
                                let wgt = l[i] / t.z[i] / inv;
                                uv[0] += wgt * t.uv[i][0];
                                uv[1] += wgt * t.uv[i][1];
                            }
                            uvs[slot] = uv;
                        }
                    }
                }
            }
            let mut out = vec![0.0; rows * w as usize * 4];
            let mut frags = Vec::with_capacity(n);
            for pix in 0..rows * w as usize {
                frags.clear();
                for layer in 0..n {
                    let slot = pix * n + layer;
                    if depth[slot].is_finite() {
                        frags.push((depth[slot], layer, uvs[slot]));
                    }
                }
                if frags.is_empty() {
                    continue;
                }
                frags.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                let samples: Vec<CompositeSample> = frags
                    .iter()
                    .map(|&(z, layer, uv)| {
                        let rgba = sample_tile(atlas, layout, layer, uv);
                        CompositeSample {
                            color: [rgba[0], rgba[1], rgba[2]],
                            alpha: rgba[3],
                            t: z,
                        }
                    })
                    .collect();
                let (c, a) = composite(&samples, [0.0; 3]).expect("fragments are sorted");
                if a > 0.0 {
                    let px = &mut out[pix * 4..pix * 4 + 4];
                    for k in 0..3 {
                        px[k] = (c[k] / a).clamp(0.0, 1.0);
                    }
                    px[3] = a;
                }
            }
            out
        })
        .collect();
    Ok(Image {
        width: w,
        height: h,
        channels: 4,
        data: bands.into_iter().flatten().collect(),
    })
}

/// Scores composited asset renders against the dataset images.
pub fn evaluate_asset(
    asset: &LayeredMeshAsset,
    data: &MultiViewDataset,
    views: &[usize],
    background: [f64; 3],
    opts: &RasterOptions,
) -> Result<QualityReport, RasterError> {
    let mut rows = Vec::new();
    for &v in views {
        for frame in 1..=data.frames.min(asset.atlases.len()) {
            let img = rasterize_layers(asset, &data.cameras[v], frame, opts)?.over(background);
            let gt = data.image(v, frame);
            rows.push(ImageScore {
                view: data.ids[v],
                frame,
                psnr: psnr(&img, gt)?,
                ssim: ssim(&img, gt)?,
            });
        }
    }
    Ok(QualityReport::from_rows(rows))
}
