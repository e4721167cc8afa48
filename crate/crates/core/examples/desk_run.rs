//! Trains the desk configuration on a fresh nested-spheres dataset and
//! prints held-out scores. Usage: `desk_run [iterations] [out_dir]`.

use facefolds::datasets::{generate_synthetic, load_dataset, SynthConfig, SyntheticScene};
use facefolds::trainer::{evaluate, train, TrainConfig, TrainOptions};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let iterations = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(20_000);
    let out = args.get(2).map(std::path::PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("desk_run"));
    let data_dir = out.join("data");
    generate_synthetic(&data_dir, &SyntheticScene::nested_spheres(4), &SynthConfig::default()).unwrap();
    let data = load_dataset(&data_dir, 1).unwrap();
    let cfg = TrainConfig {
        iterations,
        log_every: 500,
        probe_every: 500,
        ..TrainConfig::desk()
    };
    let t = std::time::Instant::now();
    let rep = train(&cfg, &data, &TrainOptions { out_dir: Some(out.join("run")), stop_at: None }).unwrap();
    for r in &rep.log {
        println!("{:6} {:8.1}s loss {:.5} rec {:.5} vd {:.2e} probe {:?}", r.step, r.wall_seconds, r.loss.total, r.loss.rec, r.loss.vd, r.probe);
    }
    println!("trained in {:.1}s", t.elapsed().as_secs_f64());
    let held = evaluate(&rep.state.model, &data, &data.holdout_views()).unwrap();
    let train_scores = evaluate(&rep.state.model, &data, &data.training_views()).unwrap();
    print!("{}", held.to_text());
    println!("train mean psnr {:.3}", train_scores.psnr_mean);
}
