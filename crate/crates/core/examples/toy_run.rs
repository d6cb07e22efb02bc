//! Trains the desk-scale model on the default synthetic faces and reports
//! the controller residual, pose-sweep disentanglement and rank-1 accuracy.
//!
//! cargo run --release --example toy_run -- [batch] [steps] [variant] [out_dir]

use std::path::PathBuf;
use std::time::Instant;

use posegan::data::{generate_synthetic, Crop, SyntheticFaceConfig, GALLERY};
use posegan::evaluation::{
    code_grid, evaluate_rank1, pose_sweep, state_bins, AblationVariant, OracleConfig, PoseOracle,
};
use posegan::networks::ArchConfig;
use posegan::training::{init_state, save_checkpoint, train_from, TrainConfig, TrainOutputs};

fn main() -> posegan::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let batch: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(16);
    let steps: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let variant = AblationVariant::parse(args.get(3).map_or("full", |s| s.as_str()))?;
    let out = PathBuf::from(args.get(4).map_or("/tmp/toy_run", |s| s.as_str()));
    std::fs::create_dir_all(&out)?;

    let ds = generate_synthetic(&SyntheticFaceConfig::default(), 1)?;
    let cfg = variant.apply(&TrainConfig { batch_size: batch, steps, ..Default::default() });
    let mut state = init_state(&ArchConfig::desk(), &cfg, &ds)?;
    let t = Instant::now();
    let outputs = TrainOutputs { log: Some(out.join("log.jsonl")), checkpoint_dir: None };
    let reports = train_from(&mut state, &ds, &outputs)?;
    println!("train: {:.1} s", t.elapsed().as_secs_f64());
    save_checkpoint(&state, &out.join("final.ckpt"))?;

    for chunk in reports.chunks(200) {
        let m = |f: fn(&posegan::losses::LossReport) -> f64| chunk.iter().map(f).sum::<f64>() / chunk.len() as f64;
        println!(
            "step {:>5}  d_adv {:.3} d_id {:.3} d_pose {:.3} g_adv {:.3} g_id {:.3} g_pose {:.3} l_real {:.4} l_fake {:.4} k {:.4}",
            chunk[0].step,
            m(|r| r.d_adv),
            m(|r| r.d_id),
            m(|r| r.d_pose),
            m(|r| r.g_adv),
            m(|r| r.g_id),
            m(|r| r.g_pose),
            m(|r| r.l_real),
            m(|r| r.l_fake),
            m(|r| r.k)
        );
    }
    let beta = cfg.equilibrium.beta;
    let resid = |rs: &[posegan::losses::LossReport]| {
        rs.iter().map(|r| (beta * r.l_real - r.l_fake).abs()).sum::<f64>() / rs.len() as f64
    };
    if reports.len() >= 200 {
        let first = resid(&reports[..100]);
        let last = resid(&reports[reports.len() - 100..]);
        println!("residual first {first:.5} last {last:.5} ratio {:.3}", last / first);
    }

    let t = Instant::now();
    let oracle_path = out.join("oracle.ckpt");
    let oracle = match PoseOracle::load(&oracle_path) {
        Ok(o) => o,
        Err(_) => {
            let o = PoseOracle::train(&ds, &OracleConfig::default())?;
            o.save(&oracle_path)?;
            o
        }
    };
    println!("oracle mae train {:.2} held-out {:.2} ({:.1} s)", oracle.train_mae, oracle.held_out_mae, t.elapsed().as_secs_f64());
    let (lo, hi) = state.pose_range;
    let grid = code_grid(lo, hi, 9)?;
    let z = vec![0.0f32; state.generator.arch.noise_dim];
    let mut rhos = Vec::new();
    for &i in ds.split(GALLERY)? {
        let x = ds.batch(&[i], Crop::Centre)?.images;
        let s = pose_sweep(&state.generator, &x, &grid, &z, Some(&oracle))?;
        if rhos.is_empty() {
            let yaws: Vec<String> = s.oracle_yaw.as_ref().unwrap().iter().map(|y| format!("{y:.0}")).collect();
            println!("first sweep yaws {}", yaws.join(" "));
            posegan::evaluation::image_grid(&s.images, 9)?.write(&out.join("sweep.png"))?;
        }
        rhos.push(s.spearman.unwrap());
    }
    println!("spearman first {:.3} mean {:.3} min {:.3}", rhos[0], rhos.iter().sum::<f64>() / rhos.len() as f64, rhos.iter().cloned().fold(1.0, f64::min));
    let r = evaluate_rank1(&state.generator, &ds, state_bins(&state)?)?;
    println!("rank1 average {:.3}", r.average);
    for b in &r.bins {
        println!("  bin {} |c| {:.1}-{:.1}: {:?} ({} probes)", b.column, b.code_min, b.code_max, b.accuracy, b.total);
    }
    println!("total: {:.1} s", t.elapsed().as_secs_f64());
    Ok(())
}
