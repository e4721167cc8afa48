//! Acceptance suite. Runs every criterion in turn and prints one
//! `PASS`/`FAIL` line per criterion; exits non-zero if any fails.
//!
//! Desk training dominates the runtime (about 20 minutes on one core). Set
//! `FACEFOLDS_DESK_CHECKPOINT` to a `final.ckpt` written by a 20 000-step
//! desk run on the default nested-spheres data to skip it; the checkpoint is
//! checked against the desk configuration before use.

use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use facefolds::appearance::{interpolate_codes, FrameSelector, TextureArch, TextureField};
use facefolds::autodiff::{Activation, Encoding, Matrix};
use facefolds::datasets::{generate_synthetic, load_dataset, oracle_render, MultiViewDataset, SynthConfig, SyntheticScene};
use facefolds::exporter::{export_asset, read_asset, write_asset, ExportConfig, ExportError};
use facefolds::geometry::{Aabb, Camera, Intrinsics, UvMapper, Vec3};
use facefolds::imaging::Image;
use facefolds::manifold::{
    band_s_values, init_sphere_field, intersect, ManifoldArch, ManifoldField, ScalarField, SphereInitConfig, TraceConfig,
};
use facefolds::metrics::psnr;
use facefolds::rastercomp::{rasterize_layers, RasterOptions};
use facefolds::sweep::{Reference, SweepInput, SweepReport};
use facefolds::trainer::{evaluate, train, Model, TrainConfig, TrainOptions, TrainState};
use facefolds::volren::{composite, loss_batch, CompositeSample, Layers, LossConfig, RayBatch, ViewMode};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

// ---------------------------------------------------------------- gradients

fn gradient_integrity() -> Outcome {
    let arch = ManifoldArch {
        hidden: vec![8, 8],
        activation: Activation::Squareplus,
        input_gain: 32.0,
    };
    let fit = SphereInitConfig {
        steps: 300,
        batch: 256,
        tolerance: 1.0,
        ..Default::default()
    };
    let bounds = Aabb::new([-0.3, -0.4, -0.4], [0.3, 0.4, 0.4]);
    let mapper = UvMapper::new(Vec3::new(-0.25, 0.0, 0.0));
    let geo = init_sphere_field(mapper, (0.22, 0.34), 3, arch, &bounds, &fit, 11).unwrap();
    let tarch = TextureArch {
        trunk_width: 8,
        trunk_depth: 2,
        uv_encoding: Encoding::new(2, true),
        s_encoding: Encoding::new(1, true),
        dir_encoding: Encoding::new(1, true),
        code_dim: 4,
    };
    let app = TextureField::new(tarch, 2, 5).unwrap();
    let trace = TraceConfig {
        samples: 64,
        t_near: 0.0,
        t_far: 3.0,
        max_crossings_per_manifold: 4,
        bounds: Some(bounds),
    };
    let cam = Camera::look_at(
        Intrinsics::centered(40.0, 16, 16),
        Vec3::new(0.9, -0.15, 0.1),
        Vec3::new(-0.1, 0.0, 0.0),
        Vec3::new(0.0, 0.0, 1.0),
    )
    .unwrap();
    let batch = RayBatch {
        rays: [(8.0, 8.0), (6.5, 9.5), (9.5, 6.0), (7.0, 11.5)]
            .iter()
            .map(|&(x, y)| cam.ray_through(x, y))
            .collect(),
        targets: vec![[0.8, 0.3, 0.1], [0.2, 0.9, 0.4], [0.5, 0.5, 0.5], [0.1, 0.1, 0.7]],
        frames: vec![1, 2, 2, 1],
    };
    let cfg = LossConfig {
        background: [0.1, 0.1, 0.1],
        ..Default::default()
    };
    let out = loss_batch(&geo, &app, &batch, &trace, &cfg).unwrap();
    let mut g = geo.clone();
    g.store.set_grads(&out.gradients);
    let mut a = app.clone();
    a.store.set_grads(&out.gradients);

    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut check = |num: f64, ana: f64| {
        worst = worst.max((num - ana).abs() / num.abs().max(ana.abs()).max(1e-6));
        checked += 1;
    };
    for pi in 0..geo.store.len() {
        for k in 0..geo.store.value(pi).len() {
            let f = |d: f64| {
                let mut p = geo.clone();
                p.store.value_mut(pi).as_slice_mut().unwrap()[k] += d;
                loss_batch(&p, &app, &batch, &trace, &cfg).unwrap().breakdown.total
            };
            check((f(h) - f(-h)) / (2.0 * h), g.store.grad(pi).as_slice().unwrap()[k]);
        }
    }
    for pi in 0..app.store.len() {
        for k in 0..app.store.value(pi).len() {
            let f = |d: f64| {
                let mut p = app.clone();
                p.store.value_mut(pi).as_slice_mut().unwrap()[k] += d;
                loss_batch(&geo, &p, &batch, &trace, &cfg).unwrap().breakdown.total
            };
            check((f(h) - f(-h)) / (2.0 * h), a.store.grad(pi).as_slice().unwrap()[k]);
        }
    }
    outcome(
        worst < 1e-4 && out.samples >= 4,
        format!("{checked} parameters, {} crossings, worst relative error {worst:.2e} (< 1e-4)", out.samples),
    )
}

// ------------------------------------------------------------- intersection

/// `‖D(x − c)‖ + a·sin(k·x)`: a smooth, non-spherical level-set family.
struct Wobbly {
    center: Vec3,
    scale: Vec3,
    amp: f64,
    wave: Vec3,
}

impl ScalarField for Wobbly {
    fn eval_points(&self, points: &Matrix) -> Vec<f64> {
        points
            .rows()
            .into_iter()
            .map(|r| self.eval(&Vec3::new(r[0], r[1], r[2])))
            .collect()
    }

    fn eval(&self, p: &Vec3) -> f64 {
        (p - self.center).component_mul(&self.scale).norm() + self.amp * self.wave.dot(p).sin()
    }
}

fn bisect(f: &impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
    let mut fa = f(a);
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        let fm = f(m);
        if fm == 0.0 {
            return m;
        }
        if (fm < 0.0) == (fa < 0.0) {
            a = m;
            fa = fm;
        } else {
            b = m;
        }
    }
    0.5 * (a + b)
}

/// Fields near the desk scene, traced along rays of the frontal camera rig:
/// the population the trainer intersects.
fn intersection_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let bounds = Aabb::new([-0.3, -0.4, -0.4], [0.3, 0.4, 0.4]);
    let cfg = TraceConfig {
        samples: 256,
        t_near: 0.0,
        t_far: f64::INFINITY,
        max_crossings_per_manifold: 4,
        bounds: Some(bounds),
    };
    let s_values = band_s_values(0.22, 0.34, 4);
    let (mut worst, mut crossings, mut missing) = (0.0f64, 0usize, 0usize);
    for _ in 0..100 {
        let center = Vec3::new(
            -0.25 + rng.random_range(-0.03..0.03),
            rng.random_range(-0.03..0.03),
            rng.random_range(-0.03..0.03),
        );
        let field = Wobbly {
            center,
            scale: Vec3::new(rng.random_range(0.8..1.25), rng.random_range(0.8..1.25), rng.random_range(0.8..1.25)),
            amp: rng.random_range(0.0..0.01),
            wave: Vec3::new(rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0)),
        };
        let mapper = UvMapper::new(center);
        for _ in 0..20 {
            let (az, el) = (rng.random_range(-25f64..25.0).to_radians(), rng.random_range(-15f64..15.0).to_radians());
            let target = Vec3::new(-0.1, 0.0, 0.0);
            let eye = target + Vec3::new(az.cos() * el.cos(), az.sin() * el.cos(), el.sin());
            let cam = Camera::look_at(Intrinsics::centered(88.0, 64, 64), eye, target, Vec3::new(0.0, 0.0, 1.0)).unwrap();
            let ray = cam.ray_through(rng.random_range(0.0..64.0), rng.random_range(0.0..64.0));
            let hits = intersect(&field, &s_values, &mapper, &ray, &cfg).unwrap();
            for h in &hits {
                let s = s_values[h.layer];
                let g = |t: f64| field.eval(&ray.at(t)) - s;
                let root = bisect(&g, h.bracket.t_a, h.bracket.t_b);
                worst = worst.max((h.t - root).abs());
                crossings += 1;
            }
            // Dense scan: every sign change the sampler could see must be found.
            let (lo, hi) = cfg.range(&ray).unwrap_or((0.0, 0.0));
            for (layer, &s) in s_values.iter().enumerate() {
                let g: Vec<f64> = (0..256)
                    .map(|k| field.eval(&ray.at(lo + (hi - lo) * k as f64 / 255.0)) - s)
                    .collect();
                let changes = g.windows(2).filter(|w| (w[0] < 0.0) != (w[1] < 0.0)).count().min(4);
                let found = hits.iter().filter(|h| h.layer == layer).count();
                missing += changes.abs_diff(found);
            }
        }
    }
    outcome(
        worst < 1e-4 && missing == 0 && crossings > 1000,
        format!("100 fields x 20 rig rays, {crossings} crossings, max |Δt| {worst:.2e} (< 1e-4), {missing} missed"),
    )
}

// --------------------------------------------------------------- compositing

fn compositing_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut alpha_ok, mut worst_insert, mut closed_exact) = (true, 0.0f64, true);
    let rgb = |rng: &mut ChaCha8Rng| [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
    for _ in 0..10_000 {
        let n = rng.random_range(0..8);
        let samples: Vec<CompositeSample> = (0..n)
            .map(|i| CompositeSample {
                color: rgb(&mut rng),
                alpha: rng.random(),
                t: i as f64,
            })
            .collect();
        let bg = rgb(&mut rng);
        let (c, acc) = composite(&samples, bg).unwrap();
        alpha_ok &= (0.0..=1.0).contains(&acc) && c.iter().all(|v| (0.0..=1.0 + 1e-12).contains(v));

        let at = rng.random_range(0..=n);
        let mut more = samples.clone();
        let t = if at == 0 { -1.0 } else { samples[at - 1].t };
        more.insert(
            at,
            CompositeSample {
                color: rgb(&mut rng),
                alpha: 0.0,
                t,
            },
        );
        let (c2, acc2) = composite(&more, bg).unwrap();
        for k in 0..3 {
            worst_insert = worst_insert.max((c2[k] - c[k]).abs());
        }
        worst_insert = worst_insert.max((acc2 - acc).abs());

        // Two layers in closed form.
        let (c1, a1, cc2, a2) = (rgb(&mut rng), rng.random::<f64>(), rgb(&mut rng), rng.random::<f64>());
        let two = [
            CompositeSample { color: c1, alpha: a1, t: 0.0 },
            CompositeSample { color: cc2, alpha: a2, t: 1.0 },
        ];
        let (got, got_a) = composite(&two, bg).unwrap();
        for k in 0..3 {
            let want = a1 * c1[k] + (1.0 - a1) * a2 * cc2[k] + (1.0 - a1) * (1.0 - a2) * bg[k];
            closed_exact &= got[k] == want;
        }
        closed_exact &= got_a == 1.0 - (1.0 - a1) * (1.0 - a2);
    }
    outcome(
        alpha_ok && worst_insert <= 1e-12 && closed_exact,
        format!(
            "10^4 cases: alpha in [0,1] {alpha_ok}, zero-alpha insertion {worst_insert:.1e} (<= 1e-12), two-layer closed form exact {closed_exact}"
        ),
    )
}

// ------------------------------------------------------------------ UV chart

fn uv_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mapper = UvMapper::new(Vec3::new(-0.25, 0.1, -0.05));
    let (mut uv_err, mut dir_err) = (0.0f64, 0.0f64);
    for _ in 0..100_000 {
        let (u, v) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let p = mapper.center() + mapper.unproject(u, v) * rng.random_range(0.05..2.0);
        let back = mapper.project(&p).unwrap();
        uv_err = uv_err.max((back[0] - u).abs()).max((back[1] - v).abs());

        let d = loop {
            let d = Vec3::new(rng.random_range(0.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            if d.x > 1e-3 && d.norm() > 1e-3 {
                break d;
            }
        };
        let p = mapper.center() + d * rng.random_range(0.05..2.0);
        let uv = mapper.project(&p).unwrap();
        dir_err = dir_err.max((mapper.unproject(uv[0], uv[1]) - d.normalize()).norm());
    }
    outcome(
        uv_err < 1e-9 && dir_err < 1e-9,
        format!("10^5 points: uv→point→uv {uv_err:.1e}, point→uv→point {dir_err:.1e} (< 1e-9)"),
    )
}

// ------------------------------------------------------------ desk training

struct Desk {
    model: Model,
    data: MultiViewDataset,
    scene: SyntheticScene,
    _dir: tempfile::TempDir,
}

fn desk_setup() -> (Desk, Outcome) {
    let dir = tempfile::tempdir().unwrap();
    let scene = SyntheticScene::nested_spheres(4);
    let synth = SynthConfig::default();
    generate_synthetic(dir.path(), &scene, &synth).unwrap();
    let data = load_dataset(dir.path(), 1).unwrap();
    let cfg = TrainConfig::desk();

    let (model, how) = match std::env::var("FACEFOLDS_DESK_CHECKPOINT") {
        Ok(path) => {
            let state = TrainState::load(Path::new(&path)).unwrap();
            // Logging cadence does not change the trained weights.
            let mut got = state.model.config.clone();
            (got.log_every, got.probe_every, got.checkpoint_every) = (cfg.log_every, cfg.probe_every, cfg.checkpoint_every);
            assert_eq!(got, cfg, "checkpoint is not a desk run");
            assert_eq!(state.step, cfg.iterations, "checkpoint is not a finished desk run");
            (state.model, format!("checkpoint {path}"))
        }
        Err(_) => {
            let t = Instant::now();
            let report = train(&cfg, &data, &TrainOptions::default()).unwrap();
            (report.state.model, format!("trained in {:.0} s", t.elapsed().as_secs_f64()))
        }
    };
    let held = evaluate(&model, &data, &data.holdout_views()).unwrap();
    let o = outcome(
        held.psnr_mean >= 30.0,
        format!(
            "N=4, 8 views 64x64, K=4, {} iterations ({how}): held-out PSNR {:.2} dB (>= 30), SSIM {:.4}",
            cfg.iterations, held.psnr_mean, held.ssim_mean
        ),
    );
    (
        Desk {
            model,
            data,
            scene,
            _dir: dir,
        },
        o,
    )
}

fn over(img: Image, bg: [f64; 3]) -> Image {
    img.over(bg)
}

fn export_consistency(d: &Desk) -> Outcome {
    let cfg = ExportConfig::default();
    let m = &d.model;
    let asset = export_asset(&Layers::of(&m.geo), &m.app, m.frames(), &cfg, Some(m.config.bounds)).unwrap();
    let bg = m.config.background;
    let mut scores = Vec::new();
    for v in d.data.training_views() {
        for f in 1..=d.data.frames {
            let cam = &d.data.cameras[v];
            let neural = m.render(cam, &FrameSelector::Frame(f), ViewMode::Bypass, bg).unwrap();
            let raster = over(rasterize_layers(&asset, cam, f, &RasterOptions::default()).unwrap(), bg);
            scores.push(psnr(&raster, &neural).unwrap());
        }
    }
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
    outcome(
        mean >= 35.0,
        format!(
            "R=R_m={}, R_t={}, {} triangles, {} renders: mean PSNR {mean:.2} dB (>= 35), min {min:.2}",
            cfg.bake_resolution,
            cfg.texture_resolution,
            asset.triangle_count(),
            scores.len()
        ),
    )
}

/// The camera with `factor` times the pixels over the same field of view.
fn upscaled(cam: &Camera, factor: u32) -> Camera {
    let k = cam.intrinsics();
    let f = factor as f64;
    cam.with_intrinsics(Intrinsics {
        fx: k.fx * f,
        fy: k.fy * f,
        cx: k.cx * f,
        cy: k.cy * f,
        width: k.width * factor,
        height: k.height * factor,
    })
}

/// Ground-truth renders of the held-out views, every frame.
fn references(d: &Desk, factor: u32) -> Vec<Reference> {
    let mut out = Vec::new();
    for v in d.data.holdout_views() {
        let camera = upscaled(&d.data.cameras[v], factor);
        for frame in 1..=d.data.frames {
            out.push(Reference {
                view: d.data.ids[v],
                image: oracle_render(&d.scene, &camera, frame),
                camera: camera.clone(),
                frame,
            });
        }
    }
    out
}

fn sweep_input<'a>(d: &'a Desk, refs: &'a [Reference]) -> SweepInput<'a, ManifoldField, TextureField> {
    SweepInput {
        layers: Layers::of(&d.model.geo),
        appearance: &d.model.app,
        frames: d.model.frames(),
        bounds: Some(d.model.config.bounds),
        export: ExportConfig::default(),
        references: refs,
        background: d.scene.background,
    }
}

fn table(report: &SweepReport) -> String {
    report
        .rows
        .iter()
        .map(|r| format!("{}:{:.2}", r.setting, r.psnr))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Mesh budgets 512…8 map to R_m 128…2 at desk scale.
fn mesh_resolution_trend(d: &Desk) -> Outcome {
    let refs = references(d, 2);
    let report = match sweep_input(d, &refs).mesh_resolutions(&[128, 64, 32, 16, 8, 4, 2]) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("sweep failed: {e}")),
    };
    let p: Vec<f64> = report.rows.iter().map(|r| r.psnr).collect();
    let non_increasing = p.windows(2).all(|w| w[1] <= w[0]);
    let to_32 = p[0] - p[4];
    let last_two = p[4] - p[6];
    outcome(
        non_increasing && to_32 < 1.5 && last_two > to_32,
        format!(
            "PSNR by R_m [{}]; non-increasing {non_increasing}; top→32-equivalent drop {to_32:.2} dB (< 1.5); drop over the two smallest {last_two:.2} dB (> {to_32:.2})",
            table(&report)
        ),
    )
}

/// Texture sizes 1024…128 map to R_t 128…16 at desk scale.
fn texture_resolution_trend(d: &Desk) -> Outcome {
    let refs = references(d, 4);
    let report = match sweep_input(d, &refs).texture_resolutions(&[128, 64, 32, 16]) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("sweep failed: {e}")),
    };
    let drops = report.drops();
    let monotone = drops.iter().all(|&x| x > 0.0);
    let last = *drops.last().unwrap();
    let largest_last = drops[..drops.len() - 1].iter().all(|&x| last > x);
    outcome(
        monotone && largest_last,
        format!(
            "PSNR by R_t [{}]; strictly decreasing {monotone}; largest step at the smallest two {largest_last}",
            table(&report)
        ),
    )
}

// ----------------------------------------------------------- asset container

fn asset_container(d: &Desk) -> Outcome {
    let cfg = ExportConfig {
        bake_resolution: 32,
        mesh_resolution: 16,
        texture_resolution: 32,
        ..ExportConfig::default()
    };
    let m = &d.model;
    let asset = export_asset(&Layers::of(&m.geo), &m.app, m.frames(), &cfg, Some(m.config.bounds)).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    write_asset(&asset, &a).unwrap();
    let back = read_asset(&a).unwrap();
    write_asset(&back, &b).unwrap();
    let files = ["manifest.json", "meshes/layer00.bin", "meshes/layer03.bin", "frames/frame0001.png", "frames/frame0004.png"];
    let bytes_equal = files
        .iter()
        .all(|f| std::fs::read(a.join(f)).unwrap() == std::fs::read(b.join(f)).unwrap());
    let round_trip = back == asset && bytes_equal;

    let mut rejected = 0;
    let mut cases = 0;
    let mut corrupt = |name: &str, edit: &dyn Fn(&Path), want: &dyn Fn(&ExportError) -> bool| {
        let dir = tmp.path().join(name);
        write_asset(&asset, &dir).unwrap();
        edit(&dir);
        cases += 1;
        let first = read_asset(&dir).err().map(|e| e.to_string());
        let second = read_asset(&dir).err();
        if let (Some(f), Some(s)) = (first, second) {
            if want(&s) && f == s.to_string() {
                rejected += 1;
            }
        }
    };
    let flip = |p: &Path, at: usize| {
        let mut bytes = std::fs::read(p).unwrap();
        let i = at.min(bytes.len() - 1);
        bytes[i] ^= 0x10;
        std::fs::write(p, bytes).unwrap();
    };
    corrupt(
        "flip_header",
        &|d| flip(&d.join("meshes/layer01.bin"), 3),
        &|e| matches!(e, ExportError::Checksum { .. }),
    );
    corrupt(
        "flip_body",
        &|d| flip(&d.join("meshes/layer02.bin"), 200),
        &|e| matches!(e, ExportError::Checksum { .. }),
    );
    corrupt(
        "truncate",
        &|d| {
            let p = d.join("meshes/layer00.bin");
            let bytes = std::fs::read(&p).unwrap();
            std::fs::write(&p, &bytes[..bytes.len() - 5]).unwrap();
        },
        &|e| matches!(e, ExportError::Checksum { .. }),
    );
    corrupt(
        "missing_mesh",
        &|d| std::fs::remove_file(d.join("meshes/layer03.bin")).unwrap(),
        &|e| matches!(e, ExportError::Inconsistent(_)),
    );
    corrupt(
        "missing_frame",
        &|d| std::fs::remove_file(d.join("frames/frame0002.png")).unwrap(),
        &|e| matches!(e, ExportError::Inconsistent(_)),
    );
    corrupt(
        "png_garbage",
        &|d| std::fs::write(d.join("frames/frame0003.png"), b"not a png").unwrap(),
        &|e| matches!(e, ExportError::Image(_)),
    );
    corrupt(
        "version",
        &|d| {
            let p = d.join("manifest.json");
            let text = std::fs::read_to_string(&p).unwrap().replace("\"version\": 1", "\"version\": 9");
            std::fs::write(&p, text).unwrap();
        },
        &|e| matches!(e, ExportError::Format(_)),
    );
    outcome(
        round_trip && rejected == cases,
        format!("round trip exact {round_trip}; {rejected}/{cases} corruptions rejected with a stable error"),
    )
}

// ------------------------------------------------------ frame interpolation

fn l1(a: &Image, b: &Image) -> f64 {
    a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.data.len() as f64
}

fn frame_interpolation(d: &Desk) -> Outcome {
    let m = &d.model;
    let cam = &d.data.cameras[d.data.holdout_views()[0]];
    let bg = m.config.background;
    let render = |sel: FrameSelector| m.render(cam, &sel, ViewMode::WithView, bg).unwrap();
    let (mut exact, mut between, mut pairs) = (true, true, Vec::new());
    for k in 1..m.frames() {
        let (ca, cb) = (m.app.embed_frame(k).unwrap(), m.app.embed_frame(k + 1).unwrap());
        let (ia, ib) = (render(FrameSelector::Frame(k)), render(FrameSelector::Frame(k + 1)));
        let code = |w: f64| FrameSelector::Code(interpolate_codes(&ca, &cb, w).unwrap());
        exact &= render(code(0.0)) == ia && render(code(1.0)) == ib;
        let ends = l1(&ia, &ib);
        let mut worst: f64 = 0.0;
        for w in [0.25, 0.5, 0.75] {
            let iw = render(code(w));
            let r = l1(&iw, &ia).max(l1(&iw, &ib)) / ends;
            worst = worst.max(r);
            between &= r < 1.0;
        }
        pairs.push(format!("{k}→{}: {worst:.2}", k + 1));
    }
    outcome(
        exact && between,
        format!(
            "endpoints bit-identical {exact}; max ℓ1 to an endpoint / endpoint distance [{}] (< 1)",
            pairs.join(", ")
        ),
    )
}

fn main() {
    let mut results: Vec<(&str, Outcome, f64)> = Vec::new();
    let mut run = |name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let o = f();
        let secs = t.elapsed().as_secs_f64();
        println!("{}  {name}: {} [{secs:.1} s]", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((name, o, secs));
    };
    run("gradient integrity", &mut gradient_integrity);
    run("intersection oracle", &mut intersection_oracle);
    run("compositing conservation", &mut compositing_suite);
    run("uv chart round trip", &mut uv_round_trip);
    let mut desk = None;
    run("desk training", &mut || {
        let (d, o) = desk_setup();
        desk = Some(d);
        o
    });
    let d = desk.expect("desk model");
    run("export consistency", &mut || export_consistency(&d));
    run("mesh resolution trend", &mut || mesh_resolution_trend(&d));
    run("texture resolution trend", &mut || texture_resolution_trend(&d));
    run("asset container", &mut || asset_container(&d));
    run("frame interpolation", &mut || frame_interpolation(&d));

    let failed: Vec<&str> = results.iter().filter(|r| !r.1.pass).map(|r| r.0).collect();
    println!("{}/{} criteria pass", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        println!("failing: {}", failed.join(", "));
        std::process::exit(1);
    }
}
