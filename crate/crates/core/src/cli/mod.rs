//! The `sardiff` command line: gen-data, train, eval, sample, gradcheck and
//! bench. Exit codes: 0 success, 1 validation or usage error, 2 runtime
//! failure.

pub mod bench;
pub mod config;
pub mod overlay;

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::detect_head::{train, Detector};
use crate::diffusion::BoxSet;
use crate::error::{Error, Result};
use crate::evalkit::{evaluate, write_metrics_csv, ImageEval};
use crate::numerics::io::{load_checkpoint, save_checkpoint};
use crate::synthdata::{self, SceneSample, CLASS_NAMES, DEFAULT_SIDE};

pub use config::RunConfig;

pub const MODEL_CONFIG: &str = "model.cfg";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const METRICS: &str = "metrics.csv";
pub const DETECTIONS: &str = "detections.csv";
pub const OVERLAYS: &str = "overlays";

#[derive(Parser, Debug)]
#[command(name = "sardiff", version, about = "Diffusion box detector on synthetic radar-like scenes")]
struct Cli {
    /// Log more (repeat for debug output).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
#[group(required = true, multiple = false)]
pub struct ModelSource {
    /// Trained checkpoint directory.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Config file for a freshly initialised model.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write synthetic scenes (grid + box files) to a directory.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// Scene ids, `a..b` or `1,2,5`; offset by --seed.
        #[arg(long, conflicts_with = "count", required_unless_present = "count")]
        seeds: Option<String>,
        /// Generate scenes seed..seed+count.
        #[arg(long)]
        count: Option<u64>,
        #[arg(long, default_value_t = DEFAULT_SIDE)]
        side: usize,
        #[arg(long, default_value_t = CLASS_NAMES.len())]
        classes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train from a config; writes a checkpoint and the loss log.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Detect on a dataset; writes metrics, detections and overlays.
    Eval {
        #[command(flatten)]
        model: ModelSource,
        /// Dataset directory; defaults to the config's test_data.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Detect on one scene; writes detections as CSV.
    Sample {
        #[command(flatten)]
        model: ModelSource,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        id: u64,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Finite-difference check of every layer and the toy pipeline.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Time sequential vs parallel scans and agent vs softmax attention.
    Bench {
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        runs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

fn flush(mut w: impl Write, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

fn load_config(path: &Path) -> Result<RunConfig> {
    if !path.is_file() {
        return Err(Error::config(format!("config file {} does not exist", path.display())));
    }
    RunConfig::load(path)
}

/// Loads a trained model, or builds a fresh one from a config and `seed`.
pub fn load_model(src: &ModelSource, seed: Option<u64>) -> Result<(RunConfig, Detector)> {
    let (cfg, dir) = match (&src.checkpoint, &src.config) {
        (Some(dir), _) => (load_config(&dir.join(MODEL_CONFIG))?, Some(dir)),
        (None, Some(path)) => (load_config(path)?, None),
        (None, None) => return Err(Error::config("need --checkpoint or --config")),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed.unwrap_or(cfg.train.seed));
    let mut det = Detector::new(cfg.model.clone(), &mut rng)?;
    if let Some(dir) = dir {
        load_checkpoint(&mut det, dir)?;
    }
    Ok((cfg, det))
}

/// Scene ids for gen-data: `list` (or `0..count`) shifted by `seed`.
pub fn scene_ids(list: Option<&str>, count: Option<u64>, seed: u64) -> Result<Vec<u64>> {
    let base = match (list, count) {
        (Some(s), _) => synthdata::parse_seeds(s)?,
        (None, Some(n)) => (0..n).collect(),
        (None, None) => return Err(Error::config("need --seeds or --count")),
    };
    base.into_iter()
        .map(|id| id.checked_add(seed).ok_or_else(|| Error::config("scene id overflows u64")))
        .collect()
}

pub fn gen_data(out: &Path, ids: &[u64], side: usize, classes: usize) -> Result<Vec<SceneSample>> {
    if side == 0 || side % 32 != 0 {
        return Err(Error::config(format!("--side {side} must be a positive multiple of 32")));
    }
    synthdata::write_dataset(out, ids, side, side, classes)
}

/// Trains per `cfg` and writes the checkpoint, `model.cfg` and the log to `out`.
pub fn train_to(cfg: &RunConfig, out: &Path) -> Result<Detector> {
    let data_dir = cfg.require_train_data()?;
    let scenes = synthdata::read_dataset(data_dir)?;
    if scenes.is_empty() {
        return Err(Error::config(format!("train_data {} holds no scenes", data_dir.display())));
    }
    let data: Vec<_> = scenes.into_iter().map(|s| (s.image, s.gt)).collect();
    let mut det = Detector::new(cfg.model.clone(), &mut ChaCha8Rng::seed_from_u64(cfg.train.seed))?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let log_path = out.join(TRAIN_LOG);
    let mut log = create(&log_path)?;
    let rows = train(&mut det, &data, &cfg.train, Some(&mut log))?;
    flush(log, &log_path)?;
    save_checkpoint(&det, out)?;
    let cfg_path = out.join(MODEL_CONFIG);
    std::fs::write(&cfg_path, cfg.to_text()).map_err(|e| Error::io(&cfg_path, e))?;
    if let Some(last) = rows.last() {
        log::info!("trained {} steps, final loss {:.4}", rows.len(), last.loss.total);
    }
    Ok(det)
}

/// Runs the sampler on every scene. Each scene draws from its own stream of
/// `seed`, so results do not depend on `workers` or scene order.
pub fn detect_all(det: &Detector, cfg: &RunConfig, scenes: &[SceneSample], seed: u64, workers: usize) -> Result<Vec<BoxSet>> {
    let opts = cfg.sample_options(&det.sched)?;
    let run = |s: &SceneSample| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(s.seed);
        det.detect(&s.image, &opts, &mut rng)
    };
    if workers <= 1 {
        return scenes.iter().map(run).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::config(format!("worker pool: {e}")))?;
    pool.install(|| scenes.par_iter().map(run).collect())
}

pub fn write_detections<W: Write>(rows: &[(u64, &BoxSet)], mut out: W) -> Result<()> {
    let io = |e| Error::io("detections", e);
    writeln!(out, "image_id,class,score,cx,cy,w,h").map_err(io)?;
    for (id, set) in rows {
        for i in 0..set.len() {
            let [cx, cy, w, h] = set.boxes[i];
            let class = CLASS_NAMES.get(set.labels[i]).copied().unwrap_or("unknown");
            writeln!(out, "{id},{class},{:.6},{cx:.6},{cy:.6},{w:.6},{h:.6}", set.scores[i]).map_err(io)?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct EvalSummary {
    pub images: usize,
    pub ap50: f64,
    pub ap75: f64,
}

/// Evaluates on `data`, writing `metrics.csv`, `detections.csv` and one
/// overlay per scene (detections at or above `conf`) into `out`.
pub fn eval_to(det: &Detector, cfg: &RunConfig, data: &Path, out: &Path, seed: u64, workers: usize) -> Result<EvalSummary> {
    if !data.is_dir() {
        return Err(Error::config(format!("data directory {} does not exist", data.display())));
    }
    let scenes = synthdata::read_dataset(data)?;
    let dets = detect_all(det, cfg, &scenes, seed, workers)?;
    let overlay_dir = out.join(OVERLAYS);
    std::fs::create_dir_all(&overlay_dir).map_err(|e| Error::io(&overlay_dir, e))?;
    for (s, d) in scenes.iter().zip(&dets) {
        let shown: Vec<_> = (0..d.len()).filter(|&i| d.scores[i] >= cfg.conf).map(|i| d.boxes[i]).collect();
        overlay::write(&overlay_dir.join(format!("{:06}.pgm", s.seed)), &s.image, &shown)?;
    }
    let det_path = out.join(DETECTIONS);
    let mut w = create(&det_path)?;
    let rows: Vec<_> = scenes.iter().zip(&dets).map(|(s, d)| (s.seed, d)).collect();
    write_detections(&rows, &mut w)?;
    flush(w, &det_path)?;

    let images: Vec<ImageEval> =
        scenes.iter().zip(dets).map(|(s, d)| ImageEval { dets: d, gts: s.gt.clone() }).collect();
    let names = &CLASS_NAMES[..cfg.model.classes];
    let metrics = evaluate(&images, names, cfg.conf);
    let metrics_path = out.join(METRICS);
    let mut w = create(&metrics_path)?;
    write_metrics_csv(&metrics, &mut w)?;
    flush(w, &metrics_path)?;
    let all = metrics.last().expect("evaluate always adds the overall row");
    Ok(EvalSummary { images: images.len(), ap50: all.ap50, ap75: all.ap75 })
}

pub fn run_bench<W: Write>(runs: usize, seed: u64, out: W) -> Result<Vec<bench::BenchRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    for &l in &bench::SCAN_L {
        for &c in &bench::SCAN_C {
            for &s in &bench::SCAN_S {
                let b = bench::bench_scan(l, c, s, runs, &mut rng)?;
                rows.extend([b.seq, b.parallel]);
            }
        }
    }
    for &n in &bench::ATTN_TOKENS {
        rows.extend(bench::bench_attention(n, bench::ATTN_AGENTS, bench::ATTN_WIDTH, runs, &mut rng)?);
    }
    bench::write_csv(&rows, out)?;
    Ok(rows)
}

fn open_out(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(create(p)?),
        None => Box::new(std::io::stdout().lock()),
    })
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { out, seeds, count, side, classes, seed } => {
            let ids = scene_ids(seeds.as_deref(), count, seed)?;
            let scenes = gen_data(&out, &ids, side, classes)?;
            let targets: usize = scenes.iter().map(|s| s.gt.len()).sum();
            println!("wrote {} scenes ({targets} targets) to {}", scenes.len(), out.display());
        }
        Command::Train { config, out, seed } => {
            let mut cfg = load_config(&config)?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            train_to(&cfg, &out)?;
            println!("checkpoint written to {}", out.display());
        }
        Command::Eval { model, data, out, workers, seed } => {
            let (cfg, det) = load_model(&model, seed)?;
            let data = match data {
                Some(d) => d,
                None => cfg.require_test_data()?.to_path_buf(),
            };
            let s = eval_to(&det, &cfg, &data, &out, seed.unwrap_or(cfg.train.seed), workers)?;
            println!("{} images: AP50 {:.4}, AP75 {:.4}", s.images, s.ap50, s.ap75);
        }
        Command::Sample { model, data, id, out, seed } => {
            let (cfg, det) = load_model(&model, seed)?;
            let scene = synthdata::read_scene(&data, id)?;
            let dets = detect_all(&det, &cfg, std::slice::from_ref(&scene), seed.unwrap_or(cfg.train.seed), 1)?;
            let mut w = open_out(out.as_deref())?;
            write_detections(&[(id, &dets[0])], &mut w)?;
            w.flush().map_err(|e| Error::io("sample output", e))?;
        }
        Command::Gradcheck { seed } => {
            let entries = crate::gradsuite::run(seed);
            for e in &entries {
                match &e.outcome {
                    Ok(r) => println!(
                        "ok   {:<18} {:>6} elements  max err {:.2e}  {:>7.2}s",
                        e.name,
                        r.checked,
                        r.max_error(),
                        e.elapsed.as_secs_f64()
                    ),
                    Err(err) => println!("FAIL {:<18} {err}", e.name),
                }
            }
            if let Some(err) = entries.into_iter().find_map(|e| e.outcome.err()) {
                return Err(err);
            }
        }
        Command::Bench { out, runs, seed } => {
            let mut w = open_out(out.as_deref())?;
            let rows = run_bench(runs, seed, &mut w)?;
            w.flush().map_err(|e| Error::io("bench output", e))?;
            if let Some((agent, soft)) = bench::attention_scaling(&rows) {
                eprintln!("attention 4096/1024 wall-time ratio: agent {agent:.2}x, softmax {soft:.2}x");
            }
        }
    }
    Ok(())
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).parse_default_env().try_init();
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}
