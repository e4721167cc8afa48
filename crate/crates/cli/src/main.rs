//! `facefolds`: synthesize data, train, export, render, evaluate and sweep.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use facefolds::datasets::{generate_synthetic, load_dataset, DatasetError, MultiViewDataset, SynthConfig, SyntheticScene};
use facefolds::exporter::{export_asset, read_asset, write_asset, ExportConfig, ExportError};
use facefolds::rastercomp::{evaluate_asset, rasterize_layers, RasterError, RasterOptions};
use facefolds::sweep::{Reference, SweepError, SweepInput, SweepReport};
use facefolds::trainer::{evaluate, resume, train, Model, TrainConfig, TrainError, TrainOptions, TrainState};
use facefolds::volren::Layers;

const THREADS_ENV: &str = "FACEFOLDS_THREADS";

#[derive(Parser, Debug)]
#[command(name = "facefolds", version, about = "Layered radiance manifolds: train, bake, render")]
struct Cli {
    /// TOML configuration file, or a run_record.json to replay; flags and
    /// --set override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. --set train.iterations=500.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Training preset the config file and overrides apply on top of.
    #[arg(long, value_enum, default_value_t = Preset::Desk, global = true)]
    preset: Preset,
    /// Seed for data synthesis and training.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the resolved configuration as TOML.
    Config,
    /// Generate the nested-spheres multi-view dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the manifold and texture fields on a dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint instead of initializing.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Bake a trained model into a layered mesh asset.
    Export {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        res: ResFlags,
    },
    /// Render an asset from a dataset camera.
    Render {
        #[arg(long)]
        asset: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Camera id in the dataset.
        #[arg(long)]
        view: usize,
        /// 1-based frame.
        #[arg(long, default_value_t = 1)]
        frame: usize,
        /// Output PNG (RGBA).
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a model or an asset against the dataset images.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        source: Source,
        #[arg(long, value_enum, default_value_t = Split::Heldout)]
        split: Split,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-export and score across mesh resolutions, texture resolutions and
    /// layer counts.
    Sweep {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',')]
        mesh_res: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        tex_res: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        layers: Option<Vec<usize>>,
        #[arg(long, value_enum, default_value_t = Split::Heldout)]
        split: Split,
    },
}

#[derive(Args, Debug)]
struct ResFlags {
    /// Bake resolution R.
    #[arg(long)]
    bake_res: Option<usize>,
    /// Target mesh resolution R_m.
    #[arg(long)]
    mesh_res: Option<usize>,
    /// Texture resolution R_t.
    #[arg(long)]
    tex_res: Option<usize>,
}

#[derive(Args, Debug)]
#[group(required = true, multiple = false)]
struct Source {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    asset: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Preset {
    Desk,
    Paper,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Split {
    Heldout,
    Train,
    All,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct DataConfig {
    /// Integer image downsampling applied when loading.
    downsample: u32,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { downsample: 1 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct SweepConfig {
    mesh_res: Vec<usize>,
    tex_res: Vec<usize>,
    layers: Vec<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            mesh_res: vec![512, 256, 128, 64, 32, 16, 8],
            tex_res: vec![128, 64, 32, 16],
            layers: vec![],
        }
    }
}

/// Everything a run reads from the config file.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct ProjectConfig {
    synth: SynthConfig,
    data: DataConfig,
    train: TrainConfig,
    export: ExportConfig,
    sweep: SweepConfig,
}

/// A failure with its exit code and the stage it happened in.
struct Failure {
    code: u8,
    stage: &'static str,
    message: String,
}

impl Failure {
    fn config(stage: &'static str, m: impl ToString) -> Self {
        Self { code: 2, stage, message: m.to_string() }
    }
    fn data(stage: &'static str, m: impl ToString) -> Self {
        Self { code: 3, stage, message: m.to_string() }
    }
    fn numerical(stage: &'static str, m: impl ToString) -> Self {
        Self { code: 4, stage, message: m.to_string() }
    }
}

fn from_dataset(stage: &'static str, e: DatasetError) -> Failure {
    match e {
        DatasetError::Config(_) => Failure::config(stage, e),
        _ => Failure::data(stage, e),
    }
}

fn from_train(stage: &'static str, e: TrainError) -> Failure {
    if e.is_numerical() {
        Failure::numerical(stage, e)
    } else if matches!(e, TrainError::Config(_) | TrainError::Manifold(_)) {
        Failure::config(stage, e)
    } else {
        Failure::data(stage, e)
    }
}

fn from_export(stage: &'static str, e: ExportError) -> Failure {
    match e {
        ExportError::Config(_) => Failure::config(stage, e),
        ExportError::SparseLayer { .. } | ExportError::NoQuads { .. } | ExportError::Decimation { .. } => {
            Failure::numerical(stage, e)
        }
        _ => Failure::data(stage, e),
    }
}

fn from_raster(stage: &'static str, e: RasterError) -> Failure {
    match e {
        RasterError::Metric(_) => Failure::data(stage, e),
        _ => Failure::config(stage, e),
    }
}

fn from_sweep(e: SweepError) -> Failure {
    match e {
        SweepError::Export(e) => from_export("sweep", e),
        SweepError::Raster(e) => from_raster("sweep", e),
        SweepError::Config(_) => Failure::config("sweep", e),
        _ => Failure::data("sweep", e),
    }
}

/// Parses a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn apply_override(root: &mut toml::Table, spec: &str) -> Result<(), String> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| format!("override {spec:?} is not KEY=VALUE"))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(format!("bad override key {key:?}"));
    }
    let mut table = root;
    for p in &parts[..parts.len() - 1] {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| format!("override {key:?}: {p:?} is not a table"))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

/// TOML has no null; absent optional values are simply left out.
fn strip_nulls(v: serde_json::Value) -> serde_json::Value {
    match v {
        serde_json::Value::Object(m) => serde_json::Value::Object(
            m.into_iter().filter(|(_, v)| !v.is_null()).map(|(k, v)| (k, strip_nulls(v))).collect(),
        ),
        serde_json::Value::Array(a) => serde_json::Value::Array(a.into_iter().map(strip_nulls).collect()),
        other => other,
    }
}

/// Deep merge: tables merge key by key, anything else replaces.
fn merge(into: &mut toml::Table, from: toml::Table) {
    for (k, v) in from {
        match (into.get_mut(&k), v) {
            (Some(toml::Value::Table(a)), toml::Value::Table(b)) => merge(a, b),
            (_, v) => {
                into.insert(k, v);
            }
        }
    }
}

fn resolve_config(cli: &Cli) -> Result<ProjectConfig, Failure> {
    let base = ProjectConfig {
        train: match cli.preset {
            Preset::Desk => TrainConfig::desk(),
            Preset::Paper => TrainConfig::paper(),
        },
        ..ProjectConfig::default()
    };
    let mut table = toml::Table::try_from(&base).expect("config serializes");
    if let Some(path) = &cli.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::config("config", format!("{}: {e}", path.display())))?;
        let bad = |e: String| Failure::config("config", format!("{}: {e}", path.display()));
        let file = if path.extension().is_some_and(|e| e == "json") {
            // A run record: replay its resolved configuration.
            let record: serde_json::Value = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
            let config = strip_nulls(record.get("config").cloned().ok_or_else(|| bad("no `config` entry".into()))?);
            toml::Table::try_from(config).map_err(|e| bad(e.to_string()))?
        } else {
            toml::from_str::<toml::Table>(&text).map_err(|e| bad(e.to_string()))?
        };
        merge(&mut table, file);
    }
    for o in &cli.overrides {
        apply_override(&mut table, o).map_err(|e| Failure::config("config", e))?;
    }
    let mut cfg: ProjectConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Failure::config("config", e.message().to_string()))?;
    if let Some(seed) = cli.seed {
        cfg.synth.seed = seed;
        cfg.train.seed = seed;
    }
    if cfg.data.downsample == 0 {
        return Err(Failure::config("config", "data.downsample must be at least 1"));
    }
    cfg.train.validate().map_err(|e| Failure::config("config", e))?;
    cfg.export.validate().map_err(|e| Failure::config("config", e))?;
    Ok(cfg)
}

#[derive(Serialize)]
struct RunRecord<'a> {
    command: &'a str,
    argv: Vec<String>,
    version: &'a str,
    preset: Preset,
    seed: u64,
    config: &'a ProjectConfig,
}

fn write_record(dir: &Path, cli: &Cli, command: &str, cfg: &ProjectConfig, stage: &'static str) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(|e| Failure::data(stage, format!("{}: {e}", dir.display())))?;
    let record = RunRecord {
        command,
        argv: std::env::args().collect(),
        version: env!("CARGO_PKG_VERSION"),
        preset: cli.preset,
        seed: cfg.train.seed,
        config: cfg,
    };
    let p = dir.join("run_record.json");
    std::fs::write(&p, serde_json::to_string_pretty(&record).expect("serializable"))
        .map_err(|e| Failure::data(stage, format!("{}: {e}", p.display())))
}

fn write_text(path: &Path, text: &str, stage: &'static str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| Failure::data(stage, format!("{}: {e}", path.display())))
}

fn load_data(dir: &Path, cfg: &ProjectConfig, stage: &'static str) -> Result<MultiViewDataset, Failure> {
    load_dataset(dir, cfg.data.downsample).map_err(|e| from_dataset(stage, e))
}

fn load_model(path: &Path, stage: &'static str) -> Result<Model, Failure> {
    TrainState::load(path)
        .map(|s| s.model)
        .map_err(|e| Failure::data(stage, e))
}

fn split_views(data: &MultiViewDataset, split: Split) -> Vec<usize> {
    match split {
        Split::Heldout => data.holdout_views(),
        Split::Train => data.training_views(),
        Split::All => (0..data.views()).collect(),
    }
}

fn background(data: &MultiViewDataset, model: Option<&Model>) -> [f64; 3] {
    data.background
        .or(model.map(|m| m.config.background))
        .unwrap_or([0.0; 3])
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let mut cfg = resolve_config(cli)?;
    match &cli.command {
        Command::Config => {
            print!("{}", toml::to_string(&cfg).map_err(|e| Failure::config("config", e))?);
        }
        Command::Synth { out } => {
            let scene = SyntheticScene::nested_spheres(cfg.synth.frames);
            generate_synthetic(out, &scene, &cfg.synth).map_err(|e| from_dataset("synth", e))?;
            write_record(out, cli, "synth", &cfg, "synth")?;
            println!("wrote {} views x {} frames to {}", cfg.synth.views, cfg.synth.frames, out.display());
        }
        Command::Train { data, out, resume: from } => {
            let ds = load_data(data, &cfg, "train")?;
            let opts = TrainOptions {
                out_dir: Some(out.clone()),
                stop_at: None,
            };
            write_record(out, cli, "train", &cfg, "train")?;
            let report = match from {
                Some(ckpt) => {
                    let state = TrainState::load(ckpt).map_err(|e| Failure::data("train", e))?;
                    resume(state, &ds, &opts)
                }
                None => train(&cfg.train, &ds, &opts),
            }
            .map_err(|e| from_train("train", e))?;
            let held = evaluate(&report.state.model, &ds, &ds.holdout_views()).map_err(|e| from_train("train", e))?;
            write_text(&out.join("heldout.txt"), &held.to_text(), "train")?;
            println!(
                "trained {} steps; held-out PSNR {:.3} dB, SSIM {:.4}",
                report.state.step, held.psnr_mean, held.ssim_mean
            );
        }
        Command::Export { model, out, res } => {
            if let Some(r) = res.bake_res {
                cfg.export.bake_resolution = r;
            }
            if let Some(r) = res.mesh_res {
                cfg.export.mesh_resolution = r;
            }
            if let Some(r) = res.tex_res {
                cfg.export.texture_resolution = r;
            }
            cfg.export.validate().map_err(|e| from_export("export", e))?;
            let m = load_model(model, "export")?;
            let asset = export_asset(
                &Layers::of(&m.geo),
                &m.app,
                m.frames(),
                &cfg.export,
                Some(m.config.bounds),
            )
            .map_err(|e| from_export("export", e))?;
            write_asset(&asset, out).map_err(|e| from_export("export", e))?;
            write_record(out, cli, "export", &cfg, "export")?;
            println!(
                "exported {} layers, {} triangles, {} frames to {}",
                asset.manifest.layers,
                asset.triangle_count(),
                asset.manifest.frames,
                out.display()
            );
        }
        Command::Render { asset, data, view, frame, out } => {
            let a = read_asset(asset).map_err(|e| from_export("render", e))?;
            let ds = load_data(data, &cfg, "render")?;
            let pos = ds
                .ids
                .iter()
                .position(|id| id == view)
                .ok_or_else(|| Failure::config("render", format!("no camera with id {view}")))?;
            let img = rasterize_layers(&a, &ds.cameras[pos], *frame, &RasterOptions::default())
                .map_err(|e| from_raster("render", e))?;
            let dir = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
            write_record(dir, cli, "render", &cfg, "render")?;
            img.save_png(out).map_err(|e| Failure::data("render", e))?;
            println!("wrote {}", out.display());
        }
        Command::Eval { data, source, split, out } => {
            let ds = load_data(data, &cfg, "eval")?;
            let views = split_views(&ds, *split);
            let report = if let Some(model) = &source.model {
                let m = load_model(model, "eval")?;
                evaluate(&m, &ds, &views).map_err(|e| from_train("eval", e))?
            } else {
                let a = read_asset(source.asset.as_ref().expect("clap group")).map_err(|e| from_export("eval", e))?;
                evaluate_asset(&a, &ds, &views, background(&ds, None), &RasterOptions::default())
                    .map_err(|e| from_raster("eval", e))?
            };
            write_record(out, cli, "eval", &cfg, "eval")?;
            write_text(&out.join("report.txt"), &report.to_text(), "eval")?;
            write_text(
                &out.join("report.json"),
                &serde_json::to_string_pretty(&report).expect("serializable"),
                "eval",
            )?;
            print!("{}", report.to_text());
        }
        Command::Sweep {
            model,
            data,
            out,
            mesh_res,
            tex_res,
            layers,
            split,
        } => {
            let m = load_model(model, "sweep")?;
            let ds = load_data(data, &cfg, "sweep")?;
            let references: Vec<Reference> = split_views(&ds, *split)
                .into_iter()
                .flat_map(|v| {
                    let ds = &ds;
                    (1..=ds.frames).map(move |f| Reference {
                        view: ds.ids[v],
                        camera: ds.cameras[v].clone(),
                        frame: f,
                        image: ds.image(v, f).clone(),
                    })
                })
                .collect();
            let input = SweepInput {
                layers: Layers::of(&m.geo),
                appearance: &m.app,
                frames: m.frames(),
                bounds: Some(m.config.bounds),
                export: cfg.export.clone(),
                references: &references,
                background: background(&ds, Some(&m)),
            };
            let explicit = mesh_res.is_some() || tex_res.is_some() || layers.is_some();
            let pick = |flag: &Option<Vec<usize>>, fallback: &Vec<usize>| match flag {
                Some(v) => v.clone(),
                None if explicit => vec![],
                None => fallback.clone(),
            };
            let mut reports: Vec<SweepReport> = Vec::new();
            let mesh = pick(mesh_res, &cfg.sweep.mesh_res);
            if !mesh.is_empty() {
                reports.push(input.mesh_resolutions(&mesh).map_err(from_sweep)?);
            }
            let tex = pick(tex_res, &cfg.sweep.tex_res);
            if !tex.is_empty() {
                reports.push(input.texture_resolutions(&tex).map_err(from_sweep)?);
            }
            let lay = pick(layers, &cfg.sweep.layers);
            if !lay.is_empty() {
                reports.push(input.layer_counts(&lay).map_err(from_sweep)?);
            }
            write_record(out, cli, "sweep", &cfg, "sweep")?;
            for r in &reports {
                write_text(&out.join(format!("sweep_{}.txt", r.kind)), &r.to_text(), "sweep")?;
                write_text(
                    &out.join(format!("sweep_{}.json", r.kind)),
                    &serde_json::to_string_pretty(r).expect("serializable"),
                    "sweep",
                )?;
                print!("{}", r.to_text());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Ok(n) = std::env::var(THREADS_ENV) {
        match n.parse::<usize>() {
            Ok(n) => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            Err(_) => {
                eprintln!("error [config]: {THREADS_ENV}={n:?} is not a thread count");
                return ExitCode::from(2);
            }
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error [{}]: {}", f.stage, f.message);
            ExitCode::from(f.code)
        }
    }
}
