//! Quality/size trade-off sweeps over mesh resolution, texture resolution
//! and layer count of an exported asset.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::appearance::{Appearance, FrameSelector};
use crate::exporter::{
    assemble, bake_geometry, bake_textures, build_meshes, ExportConfig, ExportError, LayeredMeshAsset,
};
use crate::geometry::{Aabb, Camera};
use crate::imaging::{Image, ImageError};
use crate::manifold::ScalarField;
use crate::metrics::{psnr, ssim, ImageScore, MetricError, QualityReport};
use crate::rastercomp::{rasterize_layers, RasterError, RasterOptions};
use crate::volren::Layers;

#[derive(Debug, Error)]
pub enum SweepError {
    #[error(transparent)]
    Export(#[from] ExportError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("invalid sweep: {0}")]
    Config(String),
}

/// A reference image for one camera and 1-based frame.
#[derive(Clone, Debug)]
pub struct Reference {
    pub view: usize,
    pub camera: Camera,
    pub frame: usize,
    pub image: Image,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    /// The swept value: R_m, R_t or the number of layers.
    pub setting: usize,
    pub psnr: f64,
    pub psnr_std: f64,
    pub ssim: f64,
    pub triangles: usize,
    pub mesh_bytes: usize,
    pub texture_bytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub kind: String,
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{:>10}  {:>8}  {:>7}  {:>6}  {:>10}  {:>12}  {:>12}\n",
            self.kind, "PSNR", "±", "SSIM", "triangles", "mesh bytes", "tex bytes"
        );
        for r in &self.rows {
            s += &format!(
                "{:>10}  {:8.3}  {:7.3}  {:6.4}  {:>10}  {:>12}  {:>12}\n",
                r.setting, r.psnr, r.psnr_std, r.ssim, r.triangles, r.mesh_bytes, r.texture_bytes
            );
        }
        s
    }

    /// PSNR differences between consecutive rows (positive = drop).
    pub fn drops(&self) -> Vec<f64> {
        self.rows.windows(2).map(|w| w[0].psnr - w[1].psnr).collect()
    }
}

/// Scores an asset against references, composited over `background`.
pub fn score_asset(
    asset: &LayeredMeshAsset,
    references: &[Reference],
    background: [f64; 3],
    opts: &RasterOptions,
) -> Result<QualityReport, SweepError> {
    let mut rows = Vec::with_capacity(references.len());
    for r in references {
        let img = rasterize_layers(asset, &r.camera, r.frame, opts)?.over(background);
        rows.push(ImageScore {
            view: r.view,
            frame: r.frame,
            psnr: psnr(&img, &r.image)?,
            ssim: ssim(&img, &r.image)?,
        });
    }
    Ok(QualityReport::from_rows(rows))
}

fn row(asset: &LayeredMeshAsset, setting: usize, q: &QualityReport) -> Result<SweepRow, SweepError> {
    let texture_bytes = asset
        .atlases
        .iter()
        .map(|a| a.png_bytes().map(|b| b.len()))
        .sum::<Result<usize, _>>()?;
    Ok(SweepRow {
        setting,
        psnr: q.psnr_mean,
        psnr_std: q.psnr_std,
        ssim: q.ssim_mean,
        triangles: asset.triangle_count(),
        mesh_bytes: asset.meshes.iter().map(|m| m.to_bytes().len()).sum(),
        texture_bytes,
    })
}

/// Everything a sweep needs to re-export and score.
pub struct SweepInput<'a, F: ScalarField, A: Appearance> {
    pub layers: Layers<'a, F>,
    pub appearance: &'a A,
    pub frames: usize,
    pub bounds: Option<Aabb>,
    pub export: ExportConfig,
    pub references: &'a [Reference],
    pub background: [f64; 3],
}

impl<F: ScalarField + Sync, A: Appearance> SweepInput<'_, F, A> {
    fn atlases(&self, resolution: usize) -> Result<Vec<Image>, SweepError> {
        let frames: Vec<FrameSelector> = (1..=self.frames).map(FrameSelector::Frame).collect();
        Ok(bake_textures(self.appearance, self.layers.s_values, resolution, &frames)?)
    }

    /// One bake at `max(R, max R_m)`, then one decimation per mesh
    /// resolution; textures stay at the configured R_t.
    pub fn mesh_resolutions(&self, resolutions: &[usize]) -> Result<SweepReport, SweepError> {
        if resolutions.iter().any(|&r| r < 2) {
            return Err(SweepError::Config("mesh resolutions must be at least 2".into()));
        }
        let bake = resolutions.iter().copied().max().unwrap_or(2).max(self.export.bake_resolution);
        let grids = bake_geometry(&self.layers, bake, self.export.samples, self.export.chart_limit, self.bounds)?;
        let atlases = self.atlases(self.export.texture_resolution)?;
        let mut rows = Vec::new();
        for &rm in resolutions {
            let cfg = ExportConfig {
                bake_resolution: bake,
                mesh_resolution: rm,
                ..self.export.clone()
            };
            let meshes = build_meshes(&grids, self.layers.mapper.center(), cfg.triangle_budget())?;
            let asset = assemble(&meshes, atlases.clone(), self.layers.mapper, self.layers.s_values, &cfg);
            let q = score_asset(&asset, self.references, self.background, &RasterOptions::default())?;
            rows.push(row(&asset, rm, &q)?);
        }
        Ok(SweepReport {
            kind: "mesh_res".into(),
            rows,
        })
    }

    /// Textures baked once at the largest resolution, then bilinearly
    /// resampled to each smaller one; meshes are undecimated.
    pub fn texture_resolutions(&self, resolutions: &[usize]) -> Result<SweepReport, SweepError> {
        if resolutions.iter().any(|&r| r < 16) {
            return Err(SweepError::Config("texture resolutions must be at least 16".into()));
        }
        let top = resolutions.iter().copied().max().unwrap_or(16);
        let cfg = ExportConfig {
            mesh_resolution: self.export.bake_resolution,
            texture_resolution: top,
            ..self.export.clone()
        };
        let grids = bake_geometry(&self.layers, cfg.bake_resolution, cfg.samples, cfg.chart_limit, self.bounds)?;
        let meshes = build_meshes(&grids, self.layers.mapper.center(), cfg.triangle_budget())?;
        let full = assemble(&meshes, self.atlases(top)?, self.layers.mapper, self.layers.s_values, &cfg);
        let mut rows = Vec::new();
        for &rt in resolutions {
            let asset = if rt == top { full.clone() } else { full.with_texture_resolution(rt) };
            let q = score_asset(&asset, self.references, self.background, &RasterOptions::default())?;
            rows.push(row(&asset, rt, &q)?);
        }
        Ok(SweepReport {
            kind: "tex_res".into(),
            rows,
        })
    }

    /// Renders with evenly spaced subsets of the layers visible.
    pub fn layer_counts(&self, counts: &[usize]) -> Result<SweepReport, SweepError> {
        let n = self.layers.s_values.len();
        if counts.iter().any(|&c| c == 0 || c > n) {
            return Err(SweepError::Config(format!("layer counts must lie in 1..={n}")));
        }
        let cfg = ExportConfig {
            mesh_resolution: self.export.bake_resolution,
            ..self.export.clone()
        };
        let grids = bake_geometry(&self.layers, cfg.bake_resolution, cfg.samples, cfg.chart_limit, self.bounds)?;
        let meshes = build_meshes(&grids, self.layers.mapper.center(), cfg.triangle_budget())?;
        let full = assemble(
            &meshes,
            self.atlases(cfg.texture_resolution)?,
            self.layers.mapper,
            self.layers.s_values,
            &cfg,
        );
        let mut rows = Vec::new();
        for &c in counts {
            let mask = layer_subset(n, c);
            let opts = RasterOptions {
                visible: Some(mask.clone()),
                ..RasterOptions::default()
            };
            let q = score_asset(&full, self.references, self.background, &opts)?;
            let mut r = row(&full, c, &q)?;
            let kept = |i: usize| mask[i];
            r.triangles = (0..n).filter(|&i| kept(i)).map(|i| full.meshes[i].triangle_count()).sum();
            r.mesh_bytes = (0..n).filter(|&i| kept(i)).map(|i| full.meshes[i].to_bytes().len()).sum();
            rows.push(r);
        }
        Ok(SweepReport {
            kind: "layers".into(),
            rows,
        })
    }
}

/// `count` of `n` layers, evenly spaced and always including both ends.
pub fn layer_subset(n: usize, count: usize) -> Vec<bool> {
    let mut mask = vec![false; n];
    if count == 1 {
        mask[n / 2] = true;
        return mask;
    }
    for k in 0..count {
        let i = (k as f64 * (n - 1) as f64 / (count - 1) as f64).round() as usize;
        mask[i] = true;
    }
    mask
}
