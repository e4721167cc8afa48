//! The manifold predictor: a scalar field whose level sets at fixed
//! s-values are the layers, plus ray–manifold intersection.

use std::ops::Range;

use ndarray::Axis;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{
    Activation, AdamConfig, AdamState, AutodiffError, Matrix, Mlp, MlpSpec, ParamStore, StoreId,
    Tape, Var,
};
use crate::geometry::{Aabb, Ray, UvMapper, Vec3};

pub const GEOMETRY_STORE: StoreId = StoreId(0);
const PREFIX: &str = "manifold";

#[derive(Debug, Error)]
pub enum ManifoldError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("s-values must be non-empty and strictly increasing")]
    BadSValues,
    #[error("invalid radius band ({0}, {1})")]
    BadBand(f64, f64),
    #[error("invalid trace configuration: {0}")]
    BadTrace(&'static str),
    #[error("sphere initialization reached mean error {mean_error:.4} (limit {limit}); loss trace {trace:?}")]
    InitFailed {
        mean_error: f64,
        limit: f64,
        trace: Vec<f64>,
    },
}

/// Anything that can be evaluated as `G : R³ → R`.
pub trait ScalarField {
    /// Evaluates every row (x, y, z) of `points`.
    fn eval_points(&self, points: &Matrix) -> Vec<f64>;

    fn eval(&self, p: &Vec3) -> f64 {
        let m = Matrix::from_shape_vec((1, 3), vec![p.x, p.y, p.z]).unwrap();
        self.eval_points(&m)[0]
    }
}

/// `G(x) = ‖x − c‖`; its level sets are spheres about `c`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SphereField {
    pub center: Vec3,
}

impl ScalarField for SphereField {
    fn eval_points(&self, points: &Matrix) -> Vec<f64> {
        points
            .rows()
            .into_iter()
            .map(|r| (Vec3::new(r[0], r[1], r[2]) - self.center).norm())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifoldArch {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// Scale on the first layer's initial weights.
    #[serde(default = "default_input_gain")]
    pub input_gain: f64,
}

fn default_input_gain() -> f64 {
    32.0
}

impl Default for ManifoldArch {
    fn default() -> Self {
        Self {
            hidden: vec![128, 128, 128],
            activation: Activation::Squareplus,
            input_gain: default_input_gain(),
        }
    }
}

impl ManifoldArch {
    pub fn spec(&self) -> MlpSpec {
        let mut widths = self.hidden.clone();
        widths.push(1);
        MlpSpec {
            input: 3,
            widths,
            activation: self.activation,
            activate_last: false,
        }
    }
}

/// The learned field `G` with its fixed s-values and chart centre.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifoldField {
    pub store: ParamStore,
    mlp: Mlp,
    arch: ManifoldArch,
    s_values: Vec<f64>,
    mapper: UvMapper,
}

/// Uniformly spaced s-values over `[lo, hi]` (the midpoint when `n == 1`).
pub fn band_s_values(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.5 * (lo + hi)],
        _ => (0..n)
            .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
            .collect(),
    }
}

fn check_s_values(s: &[f64]) -> Result<(), ManifoldError> {
    if s.is_empty() || s.windows(2).any(|w| !(w[0] < w[1])) || s.iter().any(|v| !v.is_finite()) {
        return Err(ManifoldError::BadSValues);
    }
    Ok(())
}

impl ManifoldField {
    /// Randomly initialized field (no sphere fit).
    pub fn random(
        arch: ManifoldArch,
        s_values: Vec<f64>,
        mapper: UvMapper,
        seed: u64,
    ) -> Result<Self, ManifoldError> {
        check_s_values(&s_values)?;
        let mut store = ParamStore::new(GEOMETRY_STORE);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mlp = Mlp::register(&mut store, PREFIX, arch.spec(), &mut rng)?;
        // The scene box is small next to the activation's curvature scale, so
        // the first layer is widened and its kinks spread over the box.
        let (w0, b0) = mlp.layers()[0];
        let gain = arch.input_gain;
        store.value_mut(w0).mapv_inplace(|w| w * gain);
        let spread = 0.5 * gain;
        store
            .value_mut(b0)
            .mapv_inplace(|_| rng.random_range(-spread..spread));
        Ok(Self {
            store,
            mlp,
            arch,
            s_values,
            mapper,
        })
    }

    /// Rebuilds a field around an existing parameter store (checkpoint load).
    pub fn from_store(
        arch: ManifoldArch,
        store: ParamStore,
        s_values: Vec<f64>,
        mapper: UvMapper,
    ) -> Result<Self, ManifoldError> {
        check_s_values(&s_values)?;
        let mlp = Mlp::attach(&store, PREFIX, arch.spec())?;
        Ok(Self {
            store,
            mlp,
            arch,
            s_values,
            mapper,
        })
    }

    pub fn arch(&self) -> &ManifoldArch {
        &self.arch
    }

    pub fn s_values(&self) -> &[f64] {
        &self.s_values
    }

    pub fn mapper(&self) -> &UvMapper {
        &self.mapper
    }

    pub fn num_layers(&self) -> usize {
        self.s_values.len()
    }

    /// Weight matrices of every layer except the last (the regularized set).
    pub fn regularized_weights(&self) -> Vec<usize> {
        let layers = self.mlp.layers();
        layers[..layers.len() - 1].iter().map(|&(w, _)| w).collect()
    }

    /// `G` evaluated on the tape for each row of `points`.
    pub fn eval_tape(&self, tape: &mut Tape, points: Var) -> Result<Var, ManifoldError> {
        Ok(self.mlp.apply_tape(tape, &self.store, points)?)
    }
}

impl ScalarField for ManifoldField {
    fn eval_points(&self, points: &Matrix) -> Vec<f64> {
        self.mlp
            .apply(&self.store, points)
            .expect("points have three columns")
            .into_raw_vec_and_offset()
            .0
    }
}

/// Settings for fitting the initial field to the distance from the centre.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SphereInitConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub tolerance: f64,
    pub validation_points: usize,
}

impl Default for SphereInitConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 1024,
            lr: 1e-2,
            tolerance: 0.01,
            validation_points: 10_000,
        }
    }
}

fn random_points(rng: &mut ChaCha8Rng, bounds: &Aabb, n: usize) -> Matrix {
    Matrix::from_shape_fn((n, 3), |(_, c)| rng.random_range(bounds.min[c]..bounds.max[c]))
}

/// Sphere-like initialization: regress `G(x) ≈ ‖x − c‖` over the scene box
/// so that every level set starts as a sphere about `c`, with `n` s-values
/// uniformly spaced over `band`.
pub fn init_sphere_field(
    mapper: UvMapper,
    band: (f64, f64),
    n: usize,
    arch: ManifoldArch,
    bounds: &Aabb,
    fit: &SphereInitConfig,
    seed: u64,
) -> Result<ManifoldField, ManifoldError> {
    let (lo, hi) = band;
    if !(0.0 < lo && lo < hi) {
        return Err(ManifoldError::BadBand(lo, hi));
    }
    let mut field = ManifoldField::random(arch, band_s_values(lo, hi, n), mapper, seed)?;
    let center = SphereField {
        center: mapper.center(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f1e1d);
    let mut adam = AdamState::new(&field.store, AdamConfig::default());
    let mut trace = Vec::new();
    for step in 0..fit.steps {
        let mut pts = random_points(&mut rng, bounds, fit.batch);
        // a quarter of each batch lands near the apex of the distance cone, which
        // a smooth network otherwise rounds off
        for (i, mut row) in pts.rows_mut().into_iter().take(fit.batch / 4).enumerate() {
            let r = if i % 2 == 0 { 0.01 } else { 0.1 };
            for (k, v) in row.iter_mut().enumerate() {
                *v = center.center[k] + rng.random_range(-r..r);
            }
        }
        let target = Matrix::from_shape_vec((fit.batch, 1), center.eval_points(&pts)).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(pts);
        let g = field.eval_tape(&mut tape, x)?;
        let t = tape.constant(target);
        let diff = tape.sub(g, t)?;
        let err = tape.abs(diff);
        let loss = tape.mean(err);
        if step % 200 == 0 {
            trace.push(tape.scalar(loss));
        }
        let grads = tape.backward(loss)?;
        field.store.set_grads(&grads);
        // cosine decay to a tenth of the initial rate
        let progress = step as f64 / fit.steps.max(1) as f64;
        let lr = fit.lr * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()));
        adam.step(&mut field.store, lr)?;
    }
    let pts = random_points(&mut rng, bounds, fit.validation_points);
    let want = center.eval_points(&pts);
    let got = field.eval_points(&pts);
    let mean_error =
        want.iter().zip(&got).map(|(a, b)| (a - b).abs()).sum::<f64>() / want.len().max(1) as f64;
    log::debug!("sphere init mean |G - d| = {mean_error:.5}");
    if !(mean_error < fit.tolerance) {
        return Err(ManifoldError::InitFailed {
            mean_error,
            limit: fit.tolerance,
            trace,
        });
    }
    Ok(field)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceConfig {
    /// Samples per ray (M).
    pub samples: usize,
    pub t_near: f64,
    pub t_far: f64,
    pub max_crossings_per_manifold: usize,
    /// Scene volume; the sampled range is clipped to it when present.
    pub bounds: Option<Aabb>,
}

impl Default for TraceConfig {
    fn default() -> Self {
        Self {
            samples: 256,
            t_near: 0.0,
            t_far: 10.0,
            max_crossings_per_manifold: 4,
            bounds: None,
        }
    }
}

impl TraceConfig {
    pub fn validate(&self) -> Result<(), ManifoldError> {
        if self.samples < 2 {
            return Err(ManifoldError::BadTrace("need at least 2 samples per ray"));
        }
        if !(self.t_near < self.t_far) {
            return Err(ManifoldError::BadTrace("t_near must be below t_far"));
        }
        Ok(())
    }

    /// Sampled parameter range for `ray`, or `None` when it misses.
    pub fn range(&self, ray: &Ray) -> Option<(f64, f64)> {
        let lo = self.t_near.max(ray.t_near);
        let hi = self.t_far.min(ray.t_far);
        if !(lo < hi) {
            return None;
        }
        let clipped = Ray { t_near: lo, t_far: hi, ..*ray };
        match &self.bounds {
            Some(b) => b.clip(&clipped),
            None => Some((lo, hi)),
        }
    }
}

/// The consecutive samples that bracket a crossing.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bracket {
    pub t_a: f64,
    pub t_b: f64,
    pub g_a: f64,
    pub g_b: f64,
}

/// One ray/manifold crossing.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IntersectionSample {
    pub t: f64,
    pub point: Vec3,
    pub layer: usize,
    pub s_value: f64,
    /// `None` when the point falls outside the UV chart.
    pub uv: Option<[f64; 2]>,
    pub bracket: Bracket,
}

/// Crossings of `ray` with every level set, sorted by `t`.
pub fn intersect(
    field: &impl ScalarField,
    s_values: &[f64],
    mapper: &UvMapper,
    ray: &Ray,
    cfg: &TraceConfig,
) -> Result<Vec<IntersectionSample>, ManifoldError> {
    Ok(intersect_many(field, s_values, mapper, std::slice::from_ref(ray), cfg)?
        .pop()
        .unwrap_or_default())
}

/// Batched [`intersect`]: one field evaluation over every ray's samples.
pub fn intersect_many(
    field: &impl ScalarField,
    s_values: &[f64],
    mapper: &UvMapper,
    rays: &[Ray],
    cfg: &TraceConfig,
) -> Result<Vec<Vec<IntersectionSample>>, ManifoldError> {
    cfg.validate()?;
    check_s_values(s_values)?;
    let m = cfg.samples;
    let ranges: Vec<Option<(f64, f64)>> = rays.iter().map(|r| cfg.range(r)).collect();
    let live: Vec<usize> = (0..rays.len()).filter(|&i| ranges[i].is_some()).collect();

    let mut pts = Matrix::zeros((live.len() * m, 3));
    for (slot, &ri) in live.iter().enumerate() {
        let (lo, hi) = ranges[ri].unwrap();
        for k in 0..m {
            let t = sample_t(lo, hi, k, m);
            let p = rays[ri].at(t);
            let row = slot * m + k;
            pts[[row, 0]] = p.x;
            pts[[row, 1]] = p.y;
            pts[[row, 2]] = p.z;
        }
    }
    let values = if live.is_empty() {
        Vec::new()
    } else {
        field.eval_points(&pts)
    };

    let mut out = vec![Vec::new(); rays.len()];
    for (slot, &ri) in live.iter().enumerate() {
        let (lo, hi) = ranges[ri].unwrap();
        let g = &values[slot * m..(slot + 1) * m];
        out[ri] = crossings_from_samples(&rays[ri], lo, hi, g, s_values, mapper, cfg);
    }
    Ok(out)
}

fn sample_t(lo: f64, hi: f64, k: usize, m: usize) -> f64 {
    lo + (hi - lo) * k as f64 / (m - 1) as f64
}

fn crossings_from_samples(
    ray: &Ray,
    lo: f64,
    hi: f64,
    g: &[f64],
    s_values: &[f64],
    mapper: &UvMapper,
    cfg: &TraceConfig,
) -> Vec<IntersectionSample> {
    let m = g.len();
    let mut hits = Vec::new();
    for (layer, &s) in s_values.iter().enumerate() {
        let mut found = 0;
        for k in 0..m - 1 {
            if found >= cfg.max_crossings_per_manifold {
                break;
            }
            let (ga, gb) = (g[k], g[k + 1]);
            let (a, b) = (ga - s, gb - s);
            let crosses = (a < 0.0 && b >= 0.0) || (a >= 0.0 && b < 0.0);
            if !crosses || gb == ga {
                continue;
            }
            let (ta, tb) = (sample_t(lo, hi, k, m), sample_t(lo, hi, k + 1, m));
            let t = ta + (s - ga) / (gb - ga) * (tb - ta);
            let point = ray.at(t);
            hits.push(IntersectionSample {
                t,
                point,
                layer,
                s_value: s,
                uv: mapper.project(&point).ok(),
                bracket: Bracket {
                    t_a: ta,
                    t_b: tb,
                    g_a: ga,
                    g_b: gb,
                },
            });
            found += 1;
        }
    }
    hits.sort_by(|a, b| a.t.total_cmp(&b.t).then(a.layer.cmp(&b.layer)));
    hits
}

/// Differentiable re-evaluation of crossing points.
///
/// For every `(ray, sample)` pair, `G` is recomputed on the tape at both
/// bracket ends and the crossing is re-derived by linear interpolation, so
/// gradients reach the field parameters through `G_a` and `G_b`. Returns an
/// S×3 variable of points.
pub fn crossing_points_tape(
    tape: &mut Tape,
    field: &ManifoldField,
    hits: &[(Ray, IntersectionSample)],
) -> Result<Var, ManifoldError> {
    let s = hits.len();
    let mut ends = Matrix::zeros((2 * s, 3));
    for (i, (ray, hit)) in hits.iter().enumerate() {
        let a = ray.at(hit.bracket.t_a);
        let b = ray.at(hit.bracket.t_b);
        for c in 0..3 {
            ends[[i, c]] = a[c];
            ends[[s + i, c]] = b[c];
        }
    }
    let ends = tape.constant(ends);
    let g = field.eval_tape(tape, ends)?;
    let ga = tape.slice_rows(g, 0..s)?;
    let gb = tape.slice_rows(g, s..2 * s)?;
    let gab = tape.concat_cols(&[ga, gb])?;
    let gv = tape.value(gab).clone();
    let mut value = Matrix::zeros((s, 3));
    let mut jac = vec![0.0; s * 3 * 2];
    for (i, (ray, hit)) in hits.iter().enumerate() {
        let (ga, gb) = (gv[[i, 0]], gv[[i, 1]]);
        let sv = hit.s_value;
        let dt = hit.bracket.t_b - hit.bracket.t_a;
        let den = gb - ga;
        let t = hit.bracket.t_a + (sv - ga) / den * dt;
        let dt_dga = dt * (sv - gb) / (den * den);
        let dt_dgb = -dt * (sv - ga) / (den * den);
        let p = ray.at(t);
        for c in 0..3 {
            value[[i, c]] = p[c];
            jac[i * 6 + c * 2] = ray.direction[c] * dt_dga;
            jac[i * 6 + c * 2 + 1] = ray.direction[c] * dt_dgb;
        }
    }
    Ok(tape.rowwise(gab, value, jac)?)
}

/// Chart coordinates of every row of `points` on the tape. Rows must lie in
/// the chart (callers drop out-of-chart hits first).
pub fn uv_tape(tape: &mut Tape, mapper: &UvMapper, points: Var) -> Result<Var, ManifoldError> {
    let pv = tape.value(points).clone();
    let s = pv.nrows();
    let mut value = Matrix::zeros((s, 2));
    let mut jac = vec![0.0; s * 6];
    for i in 0..s {
        let p = Vec3::new(pv[[i, 0]], pv[[i, 1]], pv[[i, 2]]);
        // a point nudged out of the chart by re-interpolation keeps a zero Jacobian
        if let Ok((uv, j)) = mapper.project_with_jacobian(&p) {
            value[[i, 0]] = uv[0];
            value[[i, 1]] = uv[1];
            jac[i * 6..i * 6 + 6].copy_from_slice(&j);
        }
    }
    Ok(tape.rowwise(points, value, jac)?)
}

/// Row ranges of consecutive runs, used to turn per-ray sample lists into
/// compositing segments.
pub fn segments_from_counts(counts: &[usize]) -> Vec<Range<usize>> {
    let mut start = 0;
    counts
        .iter()
        .map(|&n| {
            let r = start..start + n;
            start += n;
            r
        })
        .collect()
}

/// Mean absolute deviation of the field from `‖x − c‖` over `pts`.
pub fn distance_fit_error(field: &impl ScalarField, center: Vec3, pts: &Matrix) -> f64 {
    let want = SphereField { center }.eval_points(pts);
    let got = field.eval_points(pts);
    want.iter().zip(&got).map(|(a, b)| (a - b).abs()).sum::<f64>() / pts.len_of(Axis(0)).max(1) as f64
}
