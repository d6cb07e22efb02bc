use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use posegan::data::{
    augment_crop, generate_synthetic, load_split_directory, preprocess, read_manifest, Crop, Dataset, RgbImage,
    EVAL,
};
use posegan::evaluation::{
    self, code_grid, evaluate_rank1, extract_features, fid, image_grid, pose_sweep, run_ablation, state_bins,
    synthesize, verification_accuracy, write_ablation_csv, write_json, write_rank1_csv, write_verification_csv,
    AblationTable, PoseOracle, VerificationProtocol,
};
use posegan::numerics::{RngStream, Tensor};
use posegan::shapemodel::{LandmarkShape, ShapeModel};
use posegan::training::{checkpoint_path, init_state, load_checkpoint, save_checkpoint, train_from, TrainOutputs};

use crate::config::{DataSource, Profile, RunConfig};
use crate::{Cli, Command, FidAgainst, Failure, Protocol, OUT_ENV};

/// Exclusive claim on a run directory, released on drop.
struct RunLock {
    path: PathBuf,
}

impl RunLock {
    fn acquire(dir: &Path) -> Result<Self, Failure> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(".posegan.lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(RunLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Failure::runtime(format!(
                "run directory {} is in use (remove {} if no other run is active)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

fn out_dir(out: Option<PathBuf>, command: &str) -> PathBuf {
    out.unwrap_or_else(|| {
        let root = std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
        root.join(command)
    })
}

fn write_resolved(dir: &Path, cfg: &RunConfig) -> Result<(), Failure> {
    std::fs::write(dir.join("resolved.toml"), cfg.to_toml())?;
    Ok(())
}

fn load_dataset(cfg: &RunConfig) -> Result<Dataset, Failure> {
    Ok(match cfg.data.source {
        DataSource::Synthetic => generate_synthetic(&cfg.data.synthetic, cfg.data.seed)?,
        DataSource::Directory => {
            let dir = cfg.data.dir.as_ref().expect("validated");
            load_split_directory(dir, cfg.model.image_size, cfg.data.synthetic.code_extent)?
        }
    })
}

pub fn run(cli: Cli) -> Result<(), Failure> {
    let profile = cli.profile;
    match cli.command {
        Command::GenData { config, seed, out, with_oracle } => gen_data(profile, config, seed, out, with_oracle),
        Command::FitShapemodel { manifest, out, code_extent } => fit_shapemodel(&manifest, &out, code_extent),
        Command::Train { config, seed, steps, checkpoint, out } => train(profile, config, seed, steps, checkpoint, out),
        Command::Synth { checkpoint, config, image, index, codes, grid_steps, oracle, seed, out } => {
            let input = match (image, index) {
                (Some(p), _) => Input::Image(p),
                (None, Some(i)) => Input::Index(i),
                (None, None) => return Err(Failure::usage("synth needs --image or --index")),
            };
            synth(profile, &checkpoint, config, input, codes, grid_steps, oracle, seed, out)
        }
        Command::Eval { protocol, checkpoint, config, seed, steps, out, against, embeddings } => {
            let cfg = RunConfig::load(config.as_deref(), profile)?;
            eval(cfg, protocol, checkpoint, seed, steps, out, against, embeddings)
        }
    }
}

fn gen_data(
    profile: Option<Profile>,
    config: Option<PathBuf>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    with_oracle: bool,
) -> Result<(), Failure> {
    let mut cfg = RunConfig::load(config.as_deref(), profile)?;
    if let Some(s) = seed {
        cfg.data.seed = s;
    }
    let dir = out_dir(out, "data");
    let _lock = RunLock::acquire(&dir)?;
    let ds = generate_synthetic(&cfg.data.synthetic, cfg.data.seed)?;
    ds.write_directory(&dir)?;
    write_resolved(&dir, &cfg)?;
    println!("wrote {} samples of {} identities to {}", ds.len(), ds.num_identities(), dir.display());
    if with_oracle {
        let oracle = PoseOracle::train(&ds, &cfg.eval.oracle)?;
        oracle.save(&dir.join("oracle.ckpt"))?;
        println!("pose oracle held-out MAE {:.2} degrees", oracle.held_out_mae);
    }
    Ok(())
}

fn fit_shapemodel(manifest: &Path, out: &Path, code_extent: f64) -> Result<(), Failure> {
    let entries = read_manifest(manifest)?;
    let shapes: Vec<LandmarkShape> = entries.iter().map(|(_, e)| e.landmarks).collect();
    let mut model = ShapeModel::fit(&shapes)?;
    model.calibrate_extent(&shapes, code_extent)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    model.to_archive().save(out)?;
    println!(
        "fitted {} components on {} shapes; code scale {:.4}; wrote {}",
        model.num_components(),
        shapes.len(),
        model.code_scale,
        out.display()
    );
    Ok(())
}

fn train(
    profile: Option<Profile>,
    config: Option<PathBuf>,
    seed: Option<u64>,
    steps: Option<u64>,
    resume: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<(), Failure> {
    let mut cfg = RunConfig::load(config.as_deref(), profile)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    if let Some(s) = steps {
        cfg.train.steps = s;
    }
    let dir = out_dir(out, "train");
    let _lock = RunLock::acquire(&dir)?;
    let ds = load_dataset(&cfg)?;
    let ckpt_dir = dir.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir)?;
    let log = dir.join("log.jsonl");
    let mut state = match &resume {
        Some(p) => {
            let mut s = load_checkpoint(p)?;
            if s.generator.arch != cfg.model {
                return Err(Failure::usage("checkpoint architecture differs from the configured model"));
            }
            cfg.train.seed = s.config.seed;
            s.config = cfg.train.clone();
            s
        }
        None => {
            if log.exists() {
                std::fs::remove_file(&log)?;
            }
            let s = init_state(&cfg.model, &cfg.train, &ds)?;
            save_checkpoint(&s, &checkpoint_path(&ckpt_dir, s.step))?;
            s
        }
    };
    write_resolved(&dir, &cfg)?;
    let outputs = TrainOutputs { log: Some(log), checkpoint_dir: Some(ckpt_dir.clone()) };
    let reports = train_from(&mut state, &ds, &outputs)?;
    let last = checkpoint_path(&ckpt_dir, state.step);
    if !last.exists() {
        save_checkpoint(&state, &last)?;
    }
    match reports.last() {
        Some(r) => println!(
            "trained to step {}: d_total {:.4} g_total {:.4} k {:.4}; checkpoint {}",
            state.step,
            r.d_total,
            r.g_total,
            r.k,
            last.display()
        ),
        None => println!("no steps run; checkpoint {}", last.display()),
    }
    Ok(())
}

enum Input {
    Image(PathBuf),
    Index(usize),
}

fn parse_range(s: &str) -> Result<(f64, f64), Failure> {
    let bad = || Failure::usage(format!("--codes expects lo:hi, got '{s}'"));
    let (a, b) = s.split_once(':').ok_or_else(bad)?;
    Ok((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?))
}

#[allow(clippy::too_many_arguments)]
fn synth(
    profile: Option<Profile>,
    checkpoint: &Path,
    config: Option<PathBuf>,
    input: Input,
    codes: Option<String>,
    grid_steps: usize,
    oracle: Option<PathBuf>,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> Result<(), Failure> {
    let state = load_checkpoint(checkpoint)?;
    let gen = &state.generator;
    let size = gen.arch.image_size;
    let x: Tensor<f32> = match input {
        Input::Image(p) => {
            let img = RgbImage::read(&p)?;
            if img.width() != img.height() || img.width() < size {
                return Err(Failure::usage(format!("input image must be square and at least {size} pixels")));
            }
            augment_crop(&preprocess(&img), size, None)?.0
        }
        Input::Index(i) => {
            let cfg = RunConfig::load(config.as_deref(), profile)?;
            let ds = load_dataset(&cfg)?;
            if i >= ds.len() {
                return Err(Failure::usage(format!("sample index {i} outside the {} samples", ds.len())));
            }
            ds.batch(&[i], Crop::Centre)?.images
        }
    };
    let (lo, hi) = match codes {
        Some(s) => parse_range(&s)?,
        None => state.pose_range,
    };
    let grid = code_grid(lo, hi, grid_steps)?;
    let mut rng = RngStream::new(seed.unwrap_or(0));
    let z: Vec<f32> = (0..gen.arch.noise_dim).map(|_| rng.normal() as f32).collect();
    let oracle = oracle.map(|p| PoseOracle::load(&p)).transpose()?;
    let sweep = pose_sweep(gen, &x, &grid, &z, oracle.as_ref())?;
    let path = out.unwrap_or_else(|| out_dir(None, "synth").join("sweep.png"));
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    image_grid(&sweep.images, grid.len())?.write(&path)?;
    println!("wrote {} images to {}", grid.len(), path.display());
    if let Some(y) = &sweep.oracle_yaw {
        let est: Vec<String> = y.iter().map(|v| format!("{v:.1}")).collect();
        println!("oracle yaw: {}", est.join(" "));
    }
    if let Some(r) = sweep.spearman {
        println!("spearman(code, oracle yaw) = {r:.4}");
    }
    Ok(())
}

#[derive(Serialize)]
struct Summary<'a, T: Serialize> {
    protocol: &'a str,
    checkpoint: Option<String>,
    result: T,
}

fn read_embeddings(path: &Path) -> Result<(Vec<usize>, Vec<Vec<f64>>), Failure> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .flexible(true)
        .from_path(path)
        .map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
    let (mut ids, mut vecs) = (Vec::new(), Vec::new());
    for (n, rec) in reader.records().enumerate() {
        let bad = |m: String| Failure::usage(format!("{} row {}: {m}", path.display(), n + 1));
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let mut fields = rec.iter();
        let id = fields.next().unwrap_or("").trim().parse::<usize>().map_err(|e| bad(e.to_string()))?;
        let v = fields.map(|f| f.trim().parse::<f64>()).collect::<Result<Vec<_>, _>>().map_err(|e| bad(e.to_string()))?;
        if v.is_empty() || vecs.first().is_some_and(|f: &Vec<f64>| f.len() != v.len()) {
            return Err(bad("embedding rows must share a nonzero length".into()));
        }
        ids.push(id);
        vecs.push(v);
    }
    if ids.is_empty() {
        return Err(Failure::usage(format!("{} holds no embeddings", path.display())));
    }
    Ok((ids, vecs))
}

#[allow(clippy::too_many_arguments)]
fn eval(
    mut cfg: RunConfig,
    protocol: Protocol,
    checkpoint: Option<PathBuf>,
    seed: Option<u64>,
    steps: Option<u64>,
    out: Option<PathBuf>,
    against: FidAgainst,
    embeddings: Option<PathBuf>,
) -> Result<(), Failure> {
    if let Some(s) = seed {
        cfg.eval.seed = s;
    }
    if let Some(s) = steps {
        cfg.train.steps = s;
    }
    let dir = out_dir(out, "eval");
    let _lock = RunLock::acquire(&dir)?;
    write_resolved(&dir, &cfg)?;
    let ckpt_name = checkpoint.as_ref().map(|p| p.display().to_string());
    let need_state = || -> Result<_, Failure> {
        let p = checkpoint.as_ref().ok_or_else(|| Failure::usage("this protocol needs --checkpoint"))?;
        Ok(load_checkpoint(p)?)
    };
    match protocol {
        Protocol::Rank1 => {
            let state = need_state()?;
            let ds = load_dataset(&cfg)?;
            let report = evaluate_rank1(&state.generator, &ds, state_bins(&state)?)?;
            write_rank1_csv(&dir.join("rank1.csv"), &report)?;
            write_json(&dir.join("summary.json"), &Summary { protocol: "rank1", checkpoint: ckpt_name, result: &report })?;
            println!("rank-1 average {:.2}% over {} probes", 100.0 * report.average, report.probes);
        }
        Protocol::Verify => {
            let (ids, vecs) = match &embeddings {
                Some(p) => read_embeddings(p)?,
                None => {
                    let state = need_state()?;
                    let ds = load_dataset(&cfg)?;
                    let idx = ds.split(EVAL)?.to_vec();
                    let ids = idx.iter().map(|&i| ds.samples[i].identity).collect();
                    (ids, extract_features(&state.generator, &ds, &idx)?)
                }
            };
            let mut rng = RngStream::new(cfg.eval.seed);
            let proto = VerificationProtocol::sample(&ids, cfg.eval.verification_folds, cfg.eval.verification_pairs, &mut rng)?;
            let report = verification_accuracy(&proto, &vecs)?;
            write_verification_csv(&dir.join("verification.csv"), &report)?;
            write_json(&dir.join("summary.json"), &Summary { protocol: "verify", checkpoint: ckpt_name, result: &report })?;
            println!("verification {:.2}% +- {:.2}", 100.0 * report.mean, 100.0 * report.std);
        }
        Protocol::Fid => {
            let ds = load_dataset(&cfg)?;
            let idx = ds.split(EVAL)?.to_vec();
            let real = ds.batch(&idx, Crop::Centre)?.images;
            let flat = |t: &Tensor<f32>| -> Vec<Vec<f64>> {
                let per = t.len() / t.shape()[0];
                t.data().chunks(per).map(|c| c.iter().map(|&v| v as f64).collect()).collect()
            };
            let generated = match against {
                FidAgainst::Real => real.clone(),
                FidAgainst::Generated => {
                    let state = need_state()?;
                    let n = idx.len();
                    let mut rng = RngStream::new(cfg.eval.seed);
                    let (lo, hi) = state.pose_range;
                    let codes: Vec<f64> = (0..n).map(|_| rng.uniform(lo, hi)).collect();
                    let z = Tensor::randn(&[n, state.generator.arch.noise_dim], 1.0, &mut rng);
                    let mut parts = Vec::new();
                    for start in (0..n).step_by(64) {
                        let end = (start + 64).min(n);
                        let xs: Vec<Tensor<f32>> = (start..end).map(|i| real.batch_item(i)).collect::<posegan::Result<_>>()?;
                        let zs: Vec<Tensor<f32>> = (start..end).map(|i| z.batch_item(i)).collect::<posegan::Result<_>>()?;
                        let out = synthesize(&state.generator, &Tensor::stack(&xs)?, &codes[start..end], &Tensor::stack(&zs)?)?;
                        parts.push(out);
                    }
                    let items: Vec<Tensor<f32>> = parts
                        .iter()
                        .flat_map(|p| (0..p.shape()[0]).map(move |i| p.batch_item(i)))
                        .collect::<posegan::Result<_>>()?;
                    Tensor::stack(&items)?
                }
            };
            let report = fid(&flat(&real), &flat(&generated), cfg.eval.fid_feature_dim)?;
            write_json(&dir.join("summary.json"), &Summary { protocol: "fid", checkpoint: ckpt_name, result: &report })?;
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            println!("fid {:.6} ({})", report.fid, report.feature_function);
        }
        Protocol::Ablate => {
            let ds = load_dataset(&cfg)?;
            let runs = run_ablation(&cfg.model, &cfg.train, &ds, &cfg.eval.variants)?;
            let table = AblationTable::from_runs(&runs);
            write_ablation_csv(&dir.join("ablation.csv"), &table)?;
            std::fs::write(dir.join("ablation.txt"), table.render())?;
            write_json(&dir.join("summary.json"), &Summary { protocol: "ablate", checkpoint: None, result: &table })?;
            print!("{}", table.render());
            if let Some(full) = table.average(evaluation::AblationVariant::Full) {
                for r in table.rows.iter().filter(|r| r.variant != evaluation::AblationVariant::Full) {
                    let rel = if full >= r.rank1.average { ">=" } else { "<" };
                    println!("full {rel} {} on average rank-1", r.variant.name());
                }
            }
        }
    }
    Ok(())
}
