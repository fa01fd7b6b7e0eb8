//! `lidf`: generate synthetic data, train, run inference, evaluate and
//! ablate the depth-completion pipeline.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data or file
//! format error, 3 non-finite loss or prediction.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use lidf::baseline::nearest_valid_fill;
use lidf::camera::{backproject, CameraIntrinsics};
use lidf::config::Config;
use lidf::image::DepthImage;
use lidf::io::{read_meta, read_pfm, read_ppm, write_pfm, write_xyz, Dataset};
use lidf::synth::{derive_seed, generate_sample, Sample};
use lidf::train::{
    evaluate_depths, predict, run_ablation, train_refine, train_stage1, AblationAxis, Bundle, MaskMode,
};

#[derive(Parser)]
#[command(name = "lidf", version, about = "Depth completion with local implicit depth functions")]
struct Cli {
    /// Single-threaded execution.
    #[arg(long, global = true)]
    deterministic: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset.
    GenData {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the stage-1 model.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the refinement model on top of a frozen stage-1 checkpoint.
    TrainRefine {
        /// Training settings; the model section must match the checkpoint.
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        stage1: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Complete one frame, or every sample of a dataset.
    Infer(InferArgs),
    /// Score predictions against a dataset.
    Eval(EvalArgs),
    /// Retrain and evaluate along one ablation axis.
    Ablate {
        #[arg(long)]
        axis: AblationAxis,
        #[command(flatten)]
        config: ConfigArg,
        /// Training samples.
        #[arg(long)]
        data: PathBuf,
        /// Held-out samples.
        #[arg(long)]
        test: PathBuf,
    },
    /// Run the geometry, gradient and metric oracle suites.
    Selftest,
    /// Print the reference configuration with every default.
    Config {
        #[command(flatten)]
        config: ConfigArg,
    },
}

#[derive(Args)]
struct ConfigArg {
    /// `key = value` configuration file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> Result<Config> {
        let cfg = match &self.config {
            Some(p) => Config::load(p)?,
            None => Config::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, requires_all = ["depth", "out"], conflicts_with_all = ["data", "out_dir"])]
    rgb: Option<PathBuf>,
    #[arg(long)]
    depth: Option<PathBuf>,
    /// Intrinsics of the frame (`meta.txt` format); a centered camera is
    /// assumed otherwise.
    #[arg(long)]
    meta: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// ASCII `x y z r g b` export of the completed frame.
    #[arg(long)]
    pointcloud: Option<PathBuf>,
    /// Dataset to complete; writes `NNNNN_pred.pfm` files into `--out-dir`.
    #[arg(long, requires = "out_dir")]
    data: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Refinement iterations; defaults to the checkpoint's `refine.iters`.
    #[arg(long)]
    iters: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    /// Directory of `NNNNN_pred.pfm` predictions.
    #[arg(long, conflicts_with_all = ["baseline", "ckpt"])]
    pred_dir: Option<PathBuf>,
    /// Score nearest-valid-neighbor inpainting of the input depth.
    #[arg(long, conflicts_with = "ckpt")]
    baseline: bool,
    /// Predict with a checkpoint instead of reading predictions.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long, default_value = "transparent")]
    mask: MaskMode,
    /// Evaluation resolution `WxH`.
    #[arg(long, default_value = "256x144", value_parser = parse_size)]
    size: (usize, usize),
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (w, h) = s.split_once('x').ok_or_else(|| format!("expected WxH, got {s:?}"))?;
    let w = w.parse().map_err(|e| format!("width: {e}"))?;
    let h = h.parse().map_err(|e| format!("height: {e}"))?;
    Ok((w, h))
}

/// Marks errors caused by how the tool was invoked.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<Usage>().is_some() {
        return 1;
    }
    match e.downcast_ref::<lidf::Error>() {
        Some(lidf::Error::NonFinite(_)) => 3,
        Some(lidf::Error::Config(_)) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    if let Err(e) = configure_threads(cli.deterministic) {
        eprintln!("error: {e:#}");
        return ExitCode::from(1);
    }
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// `LIDF_THREADS` sets the worker count; `--deterministic` forces one.
fn configure_threads(deterministic: bool) -> Result<()> {
    let threads = if deterministic {
        Some(1)
    } else {
        match std::env::var("LIDF_THREADS") {
            Ok(v) => Some(v.trim().parse::<usize>().map_err(|_| anyhow!(Usage(format!("LIDF_THREADS={v:?} is not a count"))))?),
            Err(_) => None,
        }
    };
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cmd: Command) -> Result<u8> {
    match cmd {
        Command::GenData { config, out, count, seed } => gen_data(&config.load()?, &out, count, seed),
        Command::Train { config, data, out } => {
            let cfg = config.load()?;
            let samples = load_dataset(&data)?;
            let start = Instant::now();
            let (bundle, _) = train_stage1(&cfg, &samples, &mut |s| info!("{s}"))?;
            bundle.save(&out)?;
            info!("stage 1 trained in {:.1}s, saved to {}", start.elapsed().as_secs_f64(), out.display());
            Ok(0)
        }
        Command::TrainRefine { config, data, stage1, out } => {
            let mut base = Bundle::load(&stage1)?;
            if config.config.is_some() {
                let cfg = config.load()?;
                if cfg.model != base.config.model {
                    bail!(Usage(format!("model settings of the configuration differ from {}", stage1.display())));
                }
                base.config = cfg;
            }
            let samples = load_dataset(&data)?;
            let start = Instant::now();
            let (bundle, _) = train_refine(&base, &samples, &mut |s| info!("{s}"))?;
            bundle.save(&out)?;
            info!("refinement trained in {:.1}s, saved to {}", start.elapsed().as_secs_f64(), out.display());
            Ok(0)
        }
        Command::Infer(args) => infer(args),
        Command::Eval(args) => eval(args),
        Command::Ablate { axis, config, data, test } => {
            let cfg = config.load()?;
            let train = load_dataset(&data)?;
            let test = load_dataset(&test)?;
            let rows = run_ablation(axis, &cfg, &train, &test, &mut |label, s| info!("[{label}] {s}"))?;
            println!("ablation {axis}: {} train / {} test samples", train.len(), test.len());
            for r in rows {
                println!("{r}");
            }
            Ok(0)
        }
        Command::Selftest => {
            let mut failed = 0;
            for o in lidf::checks::selftest() {
                println!("{o}");
                failed += (!o.passed) as usize;
            }
            if failed > 0 {
                eprintln!("{failed} check(s) failed");
                return Ok(3);
            }
            Ok(0)
        }
        Command::Config { config } => {
            print!("{}", config.load()?.reference());
            Ok(0)
        }
    }
}

fn gen_data(cfg: &Config, out: &Path, count: usize, seed: u64) -> Result<u8> {
    fs::create_dir_all(out).map_err(|e| lidf::Error::io(out, e))?;
    use rayon::prelude::*;
    (0..count).into_par_iter().try_for_each(|i| -> lidf::Result<()> {
        let sample = generate_sample(&cfg.data, derive_seed(seed, i as u64));
        Dataset::write(out, i, &sample)
    })?;
    info!("wrote {count} samples to {}", out.display());
    Ok(0)
}

fn load_dataset(dir: &Path) -> Result<Vec<Sample>> {
    let ds = Dataset::open(dir)?;
    use rayon::prelude::*;
    let samples = (0..ds.len).into_par_iter().map(|i| ds.read(i)).collect::<lidf::Result<Vec<_>>>()?;
    if samples.is_empty() {
        return Err(lidf::Error::Contract(format!("{} holds no samples", dir.display())).into());
    }
    Ok(samples)
}

fn pred_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("{index:05}_pred.pfm"))
}

fn infer(a: InferArgs) -> Result<u8> {
    let bundle = Bundle::load(&a.ckpt)?;
    let iters = a.iters.unwrap_or(bundle.config.refine_iters);
    if let Some(data) = &a.data {
        let out_dir = a.out_dir.as_ref().unwrap();
        fs::create_dir_all(out_dir).map_err(|e| lidf::Error::io(out_dir, e))?;
        let samples = load_dataset(data)?;
        use rayon::prelude::*;
        samples.par_iter().enumerate().try_for_each(|(i, s)| -> lidf::Result<()> {
            let p = predict(&bundle, &s.rgb, &s.input_depth, &s.intrinsics, iters)?;
            write_pfm(&pred_path(out_dir, i), &p.depth)
        })?;
        info!("wrote {} predictions to {}", samples.len(), out_dir.display());
        return Ok(0);
    }
    let (Some(rgb_path), Some(depth_path), Some(out)) = (&a.rgb, &a.depth, &a.out) else {
        bail!(Usage("infer needs either --rgb/--depth/--out or --data/--out-dir".into()));
    };
    let rgb = read_ppm(rgb_path)?;
    let depth = read_pfm(depth_path)?;
    let k = match &a.meta {
        Some(m) => read_meta(m)?.intrinsics,
        None => CameraIntrinsics::centered(depth.width, depth.height),
    };
    if (k.width, k.height) != (depth.width, depth.height) || (rgb.width, rgb.height) != (depth.width, depth.height) {
        return Err(lidf::Error::Contract(format!(
            "rgb {}x{}, depth {}x{} and intrinsics {}x{} disagree",
            rgb.width, rgb.height, depth.width, depth.height, k.width, k.height
        ))
        .into());
    }
    let start = Instant::now();
    let p = predict(&bundle, &rgb, &depth, &k, iters)?;
    info!(
        "completed {} pixels in {:.1} ms ({} rays without voxels)",
        p.stage1.queried.iter().filter(|&&q| q).count(),
        start.elapsed().as_secs_f64() * 1e3,
        p.stage1.missed
    );
    write_pfm(out, &p.depth)?;
    if let Some(xyz) = &a.pointcloud {
        let cloud = backproject(&p.depth, &k)?;
        let points: Vec<_> = cloud.valid_points().map(|(i, pt)| (pt, rgb.pixel(i))).collect();
        write_xyz(xyz, &points)?;
    }
    Ok(0)
}

fn eval(a: EvalArgs) -> Result<u8> {
    let samples = load_dataset(&a.data)?;
    let preds: Vec<DepthImage> = if let Some(dir) = &a.pred_dir {
        (0..samples.len()).map(|i| read_pfm(&pred_path(dir, i))).collect::<lidf::Result<_>>()?
    } else if a.baseline {
        samples.iter().map(|s| nearest_valid_fill(&s.input_depth)).collect()
    } else if let Some(ckpt) = &a.ckpt {
        let bundle = Bundle::load(ckpt)?;
        let iters = a.iters.unwrap_or(bundle.config.refine_iters);
        use rayon::prelude::*;
        samples
            .par_iter()
            .map(|s| Ok(predict(&bundle, &s.rgb, &s.input_depth, &s.intrinsics, iters)?.depth))
            .collect::<lidf::Result<_>>()?
    } else {
        bail!(Usage("eval needs one of --pred-dir, --baseline or --ckpt".into()));
    };
    let report = evaluate_depths(&preds, &samples, a.mask, a.size)?;
    print_report(&report);
    Ok(0)
}

fn print_report(r: &lidf::metrics::MetricReport) {
    println!("{r}");
    println!("{}", r.record());
}
