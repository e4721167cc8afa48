//! Joint optimization of the manifold and texture predictors.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::appearance::{AppearanceError, FrameSelector, TextureArch, TextureField, APPEARANCE_STORE};
use crate::autodiff::{AdamConfig, AdamState, AutodiffError, Checkpoint, ParamStore, Precision};
use crate::datasets::MultiViewDataset;
use crate::geometry::{Aabb, Camera, Ray, UvMapper, Vec3};
use crate::imaging::Image;
use crate::manifold::{
    init_sphere_field, ManifoldArch, ManifoldError, ManifoldField, SphereInitConfig, TraceConfig,
    GEOMETRY_STORE,
};
use crate::metrics::{psnr, ssim, ImageScore, MetricError, QualityReport};
use crate::volren::{loss_batch, render_rays, Layers, LossBreakdown, LossConfig, RayBatch, ViewMode, VolrenError};

pub const MODEL_KIND: &str = "facefolds-model";
/// Iterations over which the learning-rate decay rates apply.
pub const DECAY_STEPS: f64 = 200_000.0;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Manifold(#[from] ManifoldError),
    #[error(transparent)]
    Appearance(#[from] AppearanceError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("step {step}: {source}")]
    Numerical { step: usize, source: VolrenError },
    #[error("step {step}: non-finite update ({source}); last good state saved to {saved:?}")]
    NonFinite {
        step: usize,
        source: AutodiffError,
        saved: Option<PathBuf>,
    },
    #[error("loss diverged: above 10x the initial {initial:.4e} for {steps} consecutive steps (now {current:.4e} at step {step})")]
    Diverged {
        step: usize,
        steps: usize,
        initial: f64,
        current: f64,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl TrainError {
    /// Whether the failure is numerical (NaN, divergence, fit failure).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            TrainError::Numerical { .. }
                | TrainError::NonFinite { .. }
                | TrainError::Diverged { .. }
                | TrainError::Manifold(ManifoldError::InitFailed { .. })
        )
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub layers: usize,
    pub s_band: [f64; 2],
    pub scene_center: [f64; 3],
    /// The chart centre sits this far behind the scene centre along −x.
    pub center_offset: f64,
    pub bounds: Aabb,
    pub samples: usize,
    pub max_crossings_per_manifold: usize,
    pub batch_rays: usize,
    pub iterations: usize,
    pub lr_geometry: f64,
    pub lr_texture: f64,
    pub decay_geometry: f64,
    pub decay_texture: f64,
    pub lambda_vd: f64,
    pub lambda_reg: f64,
    pub seed: u64,
    pub precision: Precision,
    pub manifold: ManifoldArch,
    pub texture: TextureArch,
    pub sphere_init: SphereInitConfig,
    /// Background used when the dataset does not declare one.
    pub background: [f64; 3],
    pub checkpoint_every: usize,
    pub log_every: usize,
    pub probe_every: usize,
    pub probe_rays: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Single-core scale: small networks, 64 samples per ray, 20k steps.
    pub fn desk() -> Self {
        Self {
            layers: 4,
            s_band: [0.22, 0.34],
            scene_center: [0.0; 3],
            center_offset: 0.25,
            bounds: Aabb::new([-0.3, -0.4, -0.4], [0.3, 0.4, 0.4]),
            samples: 64,
            max_crossings_per_manifold: 2,
            batch_rays: 1024,
            iterations: 20_000,
            lr_geometry: 0.0007,
            lr_texture: 0.0010,
            decay_geometry: 0.05,
            decay_texture: 0.20,
            lambda_vd: 1.0,
            lambda_reg: 1e-4,
            seed: 0,
            precision: Precision::Double,
            manifold: ManifoldArch {
                hidden: vec![32, 32, 32],
                ..ManifoldArch::default()
            },
            texture: TextureArch {
                trunk_width: 64,
                trunk_depth: 4,
                ..TextureArch::default()
            },
            sphere_init: SphereInitConfig::default(),
            background: [0.0; 3],
            checkpoint_every: 5_000,
            log_every: 100,
            probe_every: 500,
            probe_rays: 2048,
        }
    }

    /// Network sizes, sampling and schedule at the published scale.
    pub fn paper() -> Self {
        Self {
            layers: 12,
            s_band: [0.27, 0.33],
            samples: 256,
            max_crossings_per_manifold: 4,
            batch_rays: 32_768,
            iterations: 500_000,
            manifold: ManifoldArch::default(),
            texture: TextureArch::default(),
            checkpoint_every: 10_000,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.layers == 0 {
            return bad("layers must be at least 1");
        }
        if !(0.0 < self.s_band[0] && self.s_band[0] < self.s_band[1]) {
            return bad("s_band must satisfy 0 < lo < hi");
        }
        if self.samples < 2 {
            return bad("samples must be at least 2");
        }
        if self.batch_rays == 0 || self.probe_rays == 0 {
            return bad("batch_rays and probe_rays must be positive");
        }
        for (name, v) in [
            ("lr_geometry", self.lr_geometry),
            ("lr_texture", self.lr_texture),
            ("decay_geometry", self.decay_geometry),
            ("decay_texture", self.decay_texture),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(TrainError::Config(format!("{name} must be positive")));
            }
        }
        if self.lambda_vd < 0.0 || self.lambda_reg < 0.0 {
            return bad("loss weights must be non-negative");
        }
        if self.manifold.hidden.is_empty() || self.manifold.hidden.contains(&0) {
            return bad("manifold needs non-empty hidden layers");
        }
        if self.texture.trunk_depth == 0 || self.texture.trunk_width == 0 {
            return bad("texture trunk needs at least one hidden layer");
        }
        if (0..3).any(|i| !(self.bounds.min[i] < self.bounds.max[i])) {
            return bad("bounds must have positive extent");
        }
        Ok(())
    }

    pub fn chart_center(&self) -> Vec3 {
        Vec3::from(self.scene_center) - Vec3::new(self.center_offset, 0.0, 0.0)
    }

    pub fn trace(&self) -> TraceConfig {
        TraceConfig {
            samples: self.samples,
            t_near: 0.0,
            t_far: f64::INFINITY,
            max_crossings_per_manifold: self.max_crossings_per_manifold,
            bounds: Some(self.bounds),
        }
    }
}

/// `lr₀ · rate^(step / 200000)` for both parameter groups.
pub fn lr_schedule(cfg: &TrainConfig, step: usize) -> (f64, f64) {
    let x = step as f64 / DECAY_STEPS;
    (
        cfg.lr_geometry * cfg.decay_geometry.powf(x),
        cfg.lr_texture * cfg.decay_texture.powf(x),
    )
}

/// A trained (or initialized) model.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: TrainConfig,
    pub geo: ManifoldField,
    pub app: TextureField,
}

impl Model {
    pub fn init(cfg: &TrainConfig, frames: usize) -> Result<Self, TrainError> {
        cfg.validate()?;
        let geo = init_sphere_field(
            UvMapper::new(cfg.chart_center()),
            (cfg.s_band[0], cfg.s_band[1]),
            cfg.layers,
            cfg.manifold.clone(),
            &cfg.bounds,
            &cfg.sphere_init,
            cfg.seed,
        )?;
        let app = TextureField::new(cfg.texture.clone(), frames, cfg.seed.wrapping_add(1))?;
        Ok(Self {
            config: cfg.clone(),
            geo,
            app,
        })
    }

    pub fn frames(&self) -> usize {
        self.app.frames()
    }

    /// Renders a full image through the neural pipeline.
    pub fn render(
        &self,
        cam: &Camera,
        frame: &FrameSelector,
        mode: ViewMode,
        background: [f64; 3],
    ) -> Result<Image, TrainError> {
        let rays = camera_rays(cam);
        let colors = render_rays(
            &Layers::of(&self.geo),
            &self.app,
            &rays,
            frame,
            mode,
            &self.config.trace(),
            background,
        )
        .map_err(|source| TrainError::Numerical { step: 0, source })?;
        Ok(Image {
            width: cam.width(),
            height: cam.height(),
            channels: 3,
            data: colors.into_iter().flatten().collect(),
        })
    }
}

/// One ray per pixel centre, row-major.
pub fn camera_rays(cam: &Camera) -> Vec<Ray> {
    let mut rays = Vec::with_capacity((cam.width() * cam.height()) as usize);
    for y in 0..cam.height() {
        for x in 0..cam.width() {
            rays.push(cam.pixel_ray(x, y));
        }
    }
    rays
}

/// Everything needed to continue training bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub adam_geo: AdamState,
    pub adam_tex: AdamState,
    pub step: usize,
    /// Total loss of the first step, for divergence detection.
    pub initial_loss: Option<f64>,
    pub diverging_for: usize,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    kind: String,
    config: TrainConfig,
    s_values: Vec<f64>,
    center: [f64; 3],
    frames: usize,
    step: usize,
    adam_geo_step: u64,
    adam_tex_step: u64,
    adam: AdamConfig,
    initial_loss: Option<f64>,
    diverging_for: usize,
}

fn push_moments(ckpt: &mut Checkpoint, prefix: &str, names: &ParamStore, adam: &AdamState) {
    for (i, p) in names.iter().enumerate() {
        ckpt.push(format!("{prefix}.m/{}", p.name), adam.m[i].clone());
        ckpt.push(format!("{prefix}.v/{}", p.name), adam.v[i].clone());
    }
}

fn load_moments(
    ckpt: &Checkpoint,
    prefix: &str,
    names: &ParamStore,
    adam: &mut AdamState,
) -> Result<(), TrainError> {
    for (i, p) in names.iter().enumerate() {
        for (kind, dst) in [("m", &mut adam.m[i]), ("v", &mut adam.v[i])] {
            let src = ckpt.require(&format!("{prefix}.{kind}/{}", p.name))?;
            if src.dim() != dst.dim() {
                return Err(TrainError::Checkpoint(format!("moment shape mismatch for {}", p.name)));
            }
            dst.assign(src);
        }
    }
    Ok(())
}

impl TrainState {
    pub fn new(model: Model) -> Self {
        let adam_geo = AdamState::new(&model.geo.store, AdamConfig::default());
        let adam_tex = AdamState::new(&model.app.store, AdamConfig::default());
        Self {
            model,
            adam_geo,
            adam_tex,
            step: 0,
            initial_loss: None,
            diverging_for: 0,
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let m = &self.model;
        let meta = Meta {
            kind: MODEL_KIND.into(),
            config: m.config.clone(),
            s_values: m.geo.s_values().to_vec(),
            center: m.geo.mapper().center,
            frames: m.frames(),
            step: self.step,
            adam_geo_step: self.adam_geo.step,
            adam_tex_step: self.adam_tex.step,
            adam: self.adam_geo.config,
            initial_loss: self.initial_loss,
            diverging_for: self.diverging_for,
        };
        let mut ckpt = Checkpoint::new(serde_json::to_value(meta).expect("serializable"));
        ckpt.push_store("geo/", &m.geo.store);
        ckpt.push_store("tex/", &m.app.store);
        push_moments(&mut ckpt, "adam_geo", &m.geo.store, &self.adam_geo);
        push_moments(&mut ckpt, "adam_tex", &m.app.store, &self.adam_tex);
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, TrainError> {
        let meta: Meta = serde_json::from_value(ckpt.meta.clone())
            .map_err(|e| TrainError::Checkpoint(format!("bad metadata: {e}")))?;
        if meta.kind != MODEL_KIND {
            return Err(TrainError::Checkpoint(format!("not a model checkpoint ({})", meta.kind)));
        }
        let cfg = meta.config;
        let geo_store = store_from(ckpt, "geo/", GEOMETRY_STORE);
        let tex_store = store_from(ckpt, "tex/", APPEARANCE_STORE);
        let geo = ManifoldField::from_store(
            cfg.manifold.clone(),
            geo_store,
            meta.s_values,
            UvMapper { center: meta.center },
        )?;
        let app = TextureField::from_store(cfg.texture.clone(), tex_store)?;
        if app.frames() != meta.frames {
            return Err(TrainError::Checkpoint("frame count mismatch".into()));
        }
        let model = Model { config: cfg, geo, app };
        let mut state = TrainState::new(model);
        state.adam_geo.config = meta.adam;
        state.adam_tex.config = meta.adam;
        state.adam_geo.step = meta.adam_geo_step;
        state.adam_tex.step = meta.adam_tex_step;
        load_moments(ckpt, "adam_geo", &state.model.geo.store, &mut state.adam_geo)?;
        load_moments(ckpt, "adam_tex", &state.model.app.store, &mut state.adam_tex)?;
        state.step = meta.step;
        state.initial_loss = meta.initial_loss;
        state.diverging_for = meta.diverging_for;
        Ok(state)
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        self.to_checkpoint().save(path).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

fn store_from(ckpt: &Checkpoint, prefix: &str, id: crate::autodiff::StoreId) -> ParamStore {
    let mut store = ParamStore::new(id);
    for (name, value) in &ckpt.tensors {
        if let Some(rest) = name.strip_prefix(prefix) {
            store.add(rest, value.clone()).expect("names are unique in a checkpoint");
        }
    }
    store
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub lr_geometry: f64,
    pub lr_texture: f64,
    pub loss: LossBreakdown,
    pub samples: usize,
    pub wall_seconds: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub probe: Option<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Directory for checkpoints and the metrics log.
    pub out_dir: Option<PathBuf>,
    /// Stop after this many total steps (defaults to the configured count).
    pub stop_at: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub state: TrainState,
    pub log: Vec<MetricRecord>,
}

struct Sampler<'a> {
    data: &'a MultiViewDataset,
    views: Vec<usize>,
    rays: Vec<Vec<Ray>>,
    pixels: usize,
    width: usize,
    seed: u64,
    cached_epoch: Option<(usize, Vec<u32>)>,
}

impl<'a> Sampler<'a> {
    fn new(data: &'a MultiViewDataset, seed: u64) -> Self {
        let views = data.training_views();
        let rays = views.iter().map(|&v| camera_rays(&data.cameras[v])).collect();
        let (w, h) = data.resolution();
        Self {
            data,
            views,
            rays,
            pixels: (w * h) as usize,
            width: w as usize,
            seed,
            cached_epoch: None,
        }
    }

    fn total(&self) -> usize {
        self.views.len() * self.data.frames * self.pixels
    }

    fn permutation(&mut self, epoch: usize) -> &[u32] {
        if self.cached_epoch.as_ref().map(|c| c.0) != Some(epoch) {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
            let mut perm: Vec<u32> = (0..self.total() as u32).collect();
            perm.shuffle(&mut rng);
            self.cached_epoch = Some((epoch, perm));
        }
        &self.cached_epoch.as_ref().unwrap().1
    }

    fn item(&self, index: usize, batch: &mut RayBatch) {
        let per_view = self.data.frames * self.pixels;
        let vi = index / per_view;
        let rest = index % per_view;
        let frame = rest / self.pixels + 1;
        let pixel = rest % self.pixels;
        let img = self.data.image(self.views[vi], frame);
        let px = img.pixel((pixel % self.width) as u32, (pixel / self.width) as u32);
        batch.rays.push(self.rays[vi][pixel]);
        batch.targets.push([px[0], px[1], px[2]]);
        batch.frames.push(frame);
    }

    /// Batch for `step`: consecutive slices of per-epoch permutations, so
    /// the stream depends only on (seed, step).
    fn batch(&mut self, step: usize, size: usize) -> RayBatch {
        let total = self.total();
        let mut out = RayBatch::default();
        let mut pos = step * size;
        while out.rays.len() < size {
            let (epoch, offset) = (pos / total, pos % total);
            let take = (size - out.rays.len()).min(total - offset);
            let idx: Vec<u32> = self.permutation(epoch)[offset..offset + take].to_vec();
            for i in idx {
                self.item(i as usize, &mut out);
            }
            pos += take;
        }
        out
    }

    fn probe(&mut self, size: usize) -> RayBatch {
        let total = self.total();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x0bad_5eed);
        let mut idx: Vec<usize> = (0..total).collect();
        idx.shuffle(&mut rng);
        let mut out = RayBatch::default();
        for &i in idx.iter().take(size.min(total)) {
            self.item(i, &mut out);
        }
        out
    }
}

fn loss_config(cfg: &TrainConfig, data: &MultiViewDataset) -> LossConfig {
    LossConfig {
        lambda_vd: cfg.lambda_vd,
        lambda_reg: cfg.lambda_reg,
        background: data.background.unwrap_or(cfg.background),
        precision: cfg.precision,
    }
}

/// Fresh model for `data` followed by training.
pub fn train(cfg: &TrainConfig, data: &MultiViewDataset, opts: &TrainOptions) -> Result<TrainReport, TrainError> {
    let state = TrainState::new(Model::init(cfg, data.frames)?);
    resume(state, data, opts)
}

/// Continues training from `state` up to the configured iteration count.
pub fn resume(
    mut state: TrainState,
    data: &MultiViewDataset,
    opts: &TrainOptions,
) -> Result<TrainReport, TrainError> {
    let cfg = state.model.config.clone();
    cfg.validate()?;
    if state.model.frames() != data.frames {
        return Err(TrainError::Config(format!(
            "model has {} frames, dataset has {}",
            state.model.frames(),
            data.frames
        )));
    }
    if data.training_views().is_empty() {
        return Err(TrainError::Config("dataset has no training views".into()));
    }
    let trace = cfg.trace();
    let lcfg = loss_config(&cfg, data);
    let mut sampler = Sampler::new(data, cfg.seed);
    let probe = sampler.probe(cfg.probe_rays);
    let stop = opts.stop_at.unwrap_or(cfg.iterations).min(cfg.iterations);
    let mut log_file = match &opts.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(io_err(dir))?;
            let p = dir.join("metrics.jsonl");
            Some(
                std::fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&p)
                    .map_err(io_err(&p))?,
            )
        }
        None => None,
    };
    let started = Instant::now();
    let mut log = Vec::new();

    while state.step < stop {
        let step = state.step;
        let batch = sampler.batch(step, cfg.batch_rays);
        let out = loss_batch(&state.model.geo, &state.model.app, &batch, &trace, &lcfg)
            .map_err(|source| TrainError::Numerical { step, source });
        let out = match out {
            Ok(o) => o,
            Err(e) => {
                save_last_good(&state, opts)?;
                return Err(e);
            }
        };
        let total = out.breakdown.total;
        let initial = *state.initial_loss.get_or_insert(total);
        if total > 10.0 * initial {
            state.diverging_for += 1;
            if state.diverging_for >= 1000 {
                return Err(TrainError::Diverged {
                    step,
                    steps: state.diverging_for,
                    initial,
                    current: total,
                });
            }
        } else {
            state.diverging_for = 0;
        }
        let (lr_g, lr_t) = lr_schedule(&cfg, step);
        let before = (state.model.geo.store.clone(), state.model.app.store.clone());
        state.model.geo.store.set_grads(&out.gradients);
        state.model.app.store.set_grads(&out.gradients);
        let updated = state
            .adam_geo
            .step(&mut state.model.geo.store, lr_g)
            .and_then(|_| state.adam_tex.step(&mut state.model.app.store, lr_t));
        if let Err(source) = updated {
            state.model.geo.store = before.0;
            state.model.app.store = before.1;
            let saved = save_last_good(&state, opts)?;
            return Err(TrainError::NonFinite { step, source, saved });
        }
        // Gradients are not part of the saved state.
        state.model.geo.store.zero_grads();
        state.model.app.store.zero_grads();
        state.step += 1;

        let probe_due = cfg.probe_every > 0 && state.step % cfg.probe_every == 0;
        let log_due = cfg.log_every > 0 && state.step % cfg.log_every == 0;
        if probe_due || log_due || state.step == stop {
            let probe_loss = if probe_due {
                Some(
                    loss_batch(&state.model.geo, &state.model.app, &probe, &trace, &lcfg)
                        .map_err(|source| TrainError::Numerical { step, source })?
                        .breakdown
                        .total,
                )
            } else {
                None
            };
            let rec = MetricRecord {
                step: state.step,
                lr_geometry: lr_g,
                lr_texture: lr_t,
                loss: out.breakdown,
                samples: out.samples,
                wall_seconds: started.elapsed().as_secs_f64(),
                probe: probe_loss,
            };
            log::info!(
                "step {} loss {:.5} (rec {:.5} vd {:.2e} reg {:.2e}){}",
                rec.step,
                rec.loss.total,
                rec.loss.rec,
                rec.loss.vd,
                rec.loss.reg,
                probe_loss.map(|p| format!(" probe {p:.5}")).unwrap_or_default()
            );
            if let Some(f) = log_file.as_mut() {
                writeln!(f, "{}", serde_json::to_string(&rec).expect("serializable"))
                    .map_err(|e| TrainError::Io {
                        path: "metrics.jsonl".into(),
                        source: e,
                    })?;
            }
            log.push(rec);
        }
        if let Some(dir) = &opts.out_dir {
            if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0 {
                state.save(&dir.join(format!("step{:07}.ckpt", state.step)))?;
            }
        }
    }
    if let Some(dir) = &opts.out_dir {
        state.save(&dir.join("final.ckpt"))?;
    }
    Ok(TrainReport { state, log })
}

fn save_last_good(state: &TrainState, opts: &TrainOptions) -> Result<Option<PathBuf>, TrainError> {
    match &opts.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(io_err(dir))?;
            let p = dir.join("last_good.ckpt");
            state.save(&p)?;
            Ok(Some(p))
        }
        None => Ok(None),
    }
}

/// Renders every (view, frame) pair of `views` with the view branch active
/// and scores it against the dataset images.
pub fn evaluate(model: &Model, data: &MultiViewDataset, views: &[usize]) -> Result<QualityReport, TrainError> {
    let bg = data.background.unwrap_or(model.config.background);
    let mut rows = Vec::new();
    for &v in views {
        for frame in 1..=data.frames {
            let img = model.render(&data.cameras[v], &FrameSelector::Frame(frame), ViewMode::WithView, bg)?;
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

/// Fraction of probe windows of `window` steps over which the probe loss did
/// not increase.
pub fn probe_window_fraction(log: &[MetricRecord], window: usize) -> Option<f64> {
    let probes: Vec<(usize, f64)> = log.iter().filter_map(|r| r.probe.map(|p| (r.step, p))).collect();
    let mut total = 0;
    let mut ok = 0;
    for &(s0, l0) in &probes {
        if let Some(&(_, l1)) = probes.iter().find(|&&(s1, _)| s1 == s0 + window) {
            total += 1;
            if l1 <= l0 {
                ok += 1;
            }
        }
    }
    (total > 0).then(|| ok as f64 / total as f64)
}
