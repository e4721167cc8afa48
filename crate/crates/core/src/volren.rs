//! Training-time rendering: intersect, shade, composite front to back, and
//! the reconstruction/residual/regularization loss.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::appearance::{Appearance, AppearanceError, FrameSelector, TextureField, TextureQuery};
use crate::autodiff::{AutodiffError, Gradients, Matrix, Precision, Tape, Var};
use crate::geometry::{Ray, UvMapper};
use crate::manifold::{
    crossing_points_tape, intersect_many, segments_from_counts, uv_tape, IntersectionSample,
    ManifoldError, ManifoldField, ScalarField, TraceConfig,
};

#[derive(Debug, Error)]
pub enum VolrenError {
    #[error(transparent)]
    Manifold(#[from] ManifoldError),
    #[error(transparent)]
    Appearance(#[from] AppearanceError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("samples are not sorted by t (index {0})")]
    Unsorted(usize),
    #[error("batch has {rays} rays but {pixels} target pixels")]
    BatchMismatch { rays: usize, pixels: usize },
    #[error("empty ray batch")]
    EmptyBatch,
    #[error("non-finite {0} term")]
    NonFinite(&'static str),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CompositeSample {
    pub color: [f64; 3],
    pub alpha: f64,
    pub t: f64,
}

/// Front-to-back over-compositing. Returns the colour and accumulated alpha.
pub fn composite(
    samples: &[CompositeSample],
    background: [f64; 3],
) -> Result<([f64; 3], f64), VolrenError> {
    if let Some(k) = samples.windows(2).position(|w| w[1].t < w[0].t) {
        return Err(VolrenError::Unsorted(k + 1));
    }
    let mut trans = 1.0;
    let mut acc = [0.0; 3];
    for s in samples {
        for c in 0..3 {
            acc[c] += trans * s.alpha * s.color[c];
        }
        trans *= 1.0 - s.alpha;
    }
    for c in 0..3 {
        acc[c] += trans * background[c];
    }
    Ok((acc, 1.0 - trans))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewMode {
    #[default]
    WithView,
    Bypass,
}

/// Geometry handed to the renderer: any scalar field with its levels and chart.
pub struct Layers<'a, F: ScalarField> {
    pub field: &'a F,
    pub s_values: &'a [f64],
    pub mapper: &'a UvMapper,
}

impl<'a> Layers<'a, ManifoldField> {
    pub fn of(field: &'a ManifoldField) -> Self {
        Self {
            field,
            s_values: field.s_values(),
            mapper: field.mapper(),
        }
    }
}

fn in_chart(hits: Vec<IntersectionSample>) -> Vec<IntersectionSample> {
    hits.into_iter().filter(|h| h.uv.is_some()).collect()
}

fn shade_and_composite<F: ScalarField + Sync>(
    layers: &Layers<F>,
    app: &impl Appearance,
    rays: &[Ray],
    frame: &FrameSelector,
    mode: ViewMode,
    cfg: &TraceConfig,
    background: [f64; 3],
) -> Result<Vec<[f64; 3]>, VolrenError> {
    let hits: Vec<Vec<IntersectionSample>> =
        intersect_many(layers.field, layers.s_values, layers.mapper, rays, cfg)?
            .into_iter()
            .map(in_chart)
            .collect();
    let total: usize = hits.iter().map(Vec::len).sum();
    let mut uv = Matrix::zeros((total, 2));
    let mut view = Matrix::zeros((total, 3));
    let mut layer_ids = Vec::with_capacity(total);
    let mut s_values = Vec::with_capacity(total);
    let mut row = 0;
    for (ray, list) in rays.iter().zip(&hits) {
        for h in list {
            let [u, v] = h.uv.unwrap();
            uv[[row, 0]] = u;
            uv[[row, 1]] = v;
            for c in 0..3 {
                view[[row, c]] = ray.direction[c];
            }
            layer_ids.push(h.layer);
            s_values.push(h.s_value);
            row += 1;
        }
    }
    let rgba = if total == 0 {
        Matrix::zeros((0, 4))
    } else {
        app.rgba(&TextureQuery {
            uv: &uv,
            layers: &layer_ids,
            s_values: &s_values,
            frame,
            view: (mode == ViewMode::WithView).then_some(&view),
        })?
    };
    let mut out = Vec::with_capacity(rays.len());
    let mut row = 0;
    for list in &hits {
        let samples: Vec<CompositeSample> = list
            .iter()
            .map(|h| {
                let r = rgba.row(row);
                row += 1;
                CompositeSample {
                    color: [r[0], r[1], r[2]],
                    alpha: r[3],
                    t: h.t,
                }
            })
            .collect();
        out.push(composite(&samples, background)?.0);
    }
    Ok(out)
}

/// Renders one ray. Out-of-chart crossings are dropped silently.
pub fn render_ray<F: ScalarField + Sync>(
    layers: &Layers<F>,
    app: &impl Appearance,
    ray: &Ray,
    frame: &FrameSelector,
    mode: ViewMode,
    cfg: &TraceConfig,
    background: [f64; 3],
) -> Result<[f64; 3], VolrenError> {
    Ok(shade_and_composite(layers, app, std::slice::from_ref(ray), frame, mode, cfg, background)?[0])
}

/// Renders many rays, in parallel chunks; the result is independent of the
/// thread count.
pub fn render_rays<F: ScalarField + Sync>(
    layers: &Layers<F>,
    app: &impl Appearance,
    rays: &[Ray],
    frame: &FrameSelector,
    mode: ViewMode,
    cfg: &TraceConfig,
    background: [f64; 3],
) -> Result<Vec<[f64; 3]>, VolrenError> {
    let chunks: Vec<Vec<[f64; 3]>> = rays
        .par_chunks(256)
        .map(|chunk| shade_and_composite(layers, app, chunk, frame, mode, cfg, background))
        .collect::<Result<_, _>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub rec: f64,
    pub vd: f64,
    pub reg: f64,
    pub lambda_vd: f64,
    pub lambda_reg: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda_vd: f64,
    pub lambda_reg: f64,
    pub background: [f64; 3],
    pub precision: Precision,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_vd: 1.0,
            lambda_reg: 1e-4,
            background: [0.0; 3],
            precision: Precision::Double,
        }
    }
}

/// Rays with target colours and 1-based frame indices.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RayBatch {
    pub rays: Vec<Ray>,
    pub targets: Vec<[f64; 3]>,
    pub frames: Vec<usize>,
}

/// Loss value plus gradients for both parameter stores.
#[derive(Clone, Debug)]
pub struct LossOutput {
    pub breakdown: LossBreakdown,
    pub gradients: Gradients,
    /// Predicted colour per ray.
    pub predictions: Vec<[f64; 3]>,
    pub samples: usize,
}

/// Forward pass of the full pipeline on `batch` and reverse sweep.
pub fn loss_batch(
    geo: &ManifoldField,
    app: &TextureField,
    batch: &RayBatch,
    trace: &TraceConfig,
    cfg: &LossConfig,
) -> Result<LossOutput, VolrenError> {
    let n = batch.rays.len();
    if n == 0 {
        return Err(VolrenError::EmptyBatch);
    }
    if batch.targets.len() != n || batch.frames.len() != n {
        return Err(VolrenError::BatchMismatch {
            rays: n,
            pixels: batch.targets.len().min(batch.frames.len()),
        });
    }
    let hits = intersect_many(geo, geo.s_values(), geo.mapper(), &batch.rays, trace)?;
    let mut pairs = Vec::new();
    let mut counts = Vec::with_capacity(n);
    let mut frames = Vec::new();
    for ((ray, list), &frame) in batch.rays.iter().zip(hits).zip(&batch.frames) {
        let list = in_chart(list);
        counts.push(list.len());
        for h in list {
            pairs.push((*ray, h));
            frames.push(frame);
        }
    }
    let s = pairs.len();

    let mut tape = Tape::with_precision(cfg.precision);
    let (pred, vd) = if s == 0 {
        let bg = Matrix::from_shape_fn((n, 3), |(_, c)| cfg.background[c]);
        (tape.constant(bg), tape.constant(Matrix::zeros((1, 1))))
    } else {
        let points = crossing_points_tape(&mut tape, geo, &pairs)?;
        let uv = uv_tape(&mut tape, geo.mapper(), points)?;
        let codes = app.frame_codes_tape(&mut tape, &frames)?;
        let s_values: Vec<f64> = pairs.iter().map(|(_, h)| h.s_value).collect();
        let view = Matrix::from_shape_fn((s, 3), |(r, c)| pairs[r].0.direction[c]);
        let tex = app.forward_tape(&mut tape, uv, &s_values, codes, Some(&view))?;
        let pred = tape.composite(
            tex.rgb,
            tex.alpha,
            segments_from_counts(&counts),
            cfg.background,
        )?;
        let residual = tex.residual.expect("view supplied");
        let sq = tape.square(residual);
        (pred, tape.mean(sq))
    };
    let target = Matrix::from_shape_fn((n, 3), |(r, c)| batch.targets[r][c]);
    let target = tape.constant(target);
    let diff = tape.sub(pred, target)?;
    let abs = tape.abs(diff);
    let rec = tape.mean(abs);
    let reg = regularizer(&mut tape, geo)?;
    let wvd = tape.scale(vd, cfg.lambda_vd);
    let wreg = tape.scale(reg, cfg.lambda_reg);
    let total = tape.add(rec, wvd)?;
    let total = tape.add(total, wreg)?;

    let breakdown = LossBreakdown {
        total: tape.scalar(total),
        rec: tape.scalar(rec),
        vd: tape.scalar(vd),
        reg: tape.scalar(reg),
        lambda_vd: cfg.lambda_vd,
        lambda_reg: cfg.lambda_reg,
    };
    for (name, v) in [
        ("reconstruction", breakdown.rec),
        ("view-dependent", breakdown.vd),
        ("regularization", breakdown.reg),
        ("total", breakdown.total),
    ] {
        if !v.is_finite() {
            return Err(VolrenError::NonFinite(name));
        }
    }
    let gradients = tape.backward(total)?;
    let pv = tape.value(pred);
    let predictions = (0..n).map(|r| [pv[[r, 0]], pv[[r, 1]], pv[[r, 2]]]).collect();
    Ok(LossOutput {
        breakdown,
        gradients,
        predictions,
        samples: s,
    })
}

/// Sum of squared manifold weights, final layer excluded.
fn regularizer(tape: &mut Tape, geo: &ManifoldField) -> Result<Var, VolrenError> {
    let mut acc: Option<Var> = None;
    for idx in geo.regularized_weights() {
        let w = tape.param(&geo.store, idx);
        let sq = tape.square(w);
        let s = tape.sum(sq);
        acc = Some(match acc {
            Some(a) => tape.add(a, s)?,
            None => s,
        });
    }
    Ok(acc.unwrap_or_else(|| tape.constant(Matrix::zeros((1, 1)))))
}
