//! Command-line entry point: data generation, training, evaluation,
//! inference, and the ablation runner.
//!
//! Exit codes: 0 success, 1 usage error, 2 configuration validation error,
//! 3 runtime failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mfm::aggregation::Variant;
use mfm::data;
use mfm::domain::{Config, Error, Result};
use mfm::eval;
use mfm::network::Network;
use mfm::train::{train_loop, Checkpoint};

#[derive(Parser)]
#[command(name = "mfm", version, about = "Multistage full-matching stereo disparity pipeline")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate seeded random-dot stereogram samples with exact ground truth.
    GenData {
        /// Dataset distribution spec (key=value file).
        #[arg(long)]
        spec: PathBuf,
        /// Output directory for the sample files.
        #[arg(long)]
        out: PathBuf,
        /// Number of samples.
        #[arg(long)]
        count: usize,
        /// Master seed; sample i derives its own stream from (seed, i).
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Train the full model per a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Resume from a checkpoint produced by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint (or stored predictions) against a dataset.
    Eval {
        /// Needed only to override dataset divisibility when no checkpoint
        /// is given.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Dump each normalized cost volume; with no value, writes to
        /// `<data>/volumes`.
        #[arg(long, value_name = "DIR", num_args = 0..=1)]
        dump_volumes: Option<Option<PathBuf>>,
        /// Evaluate stored 16-bit PNG predictions instead of a model.
        #[arg(long)]
        pred: Option<PathBuf>,
    },
    /// Run one stereo pair through a trained model.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        left: PathBuf,
        #[arg(long)]
        right: PathBuf,
        /// Output disparity path; .pfm writes PFM, anything else 16-bit PNG.
        #[arg(long)]
        out: PathBuf,
        /// Ground-truth 16-bit PNG; prints metrics and renders an error map.
        #[arg(long)]
        error_map: Option<PathBuf>,
        /// Error-map output path (default: <out>_err.png).
        #[arg(long)]
        error_out: Option<PathBuf>,
    },
    /// Train and evaluate the four ablation variants under one budget.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Report file (aligned table plus key=value blocks).
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // clap's own exit codes differ; pin usage errors to 1
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    init_threads();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// MFM_THREADS caps worker parallelism (the threaded matrix kernels).
fn init_threads() {
    if let Ok(v) = std::env::var("MFM_THREADS") {
        if std::env::var_os("MATMUL_NUM_THREADS").is_none() {
            std::env::set_var("MATMUL_NUM_THREADS", v);
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Divisibility(_) | Error::Range(_) => 2,
        _ => 3,
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenData { spec, out, count, seed } => gen_data(&spec, &out, count, seed),
        Cmd::Train { config, resume } => train(&config, resume.as_deref()),
        Cmd::Eval { config, ckpt, data, dump_volumes, pred } => {
            let dump = dump_volumes.map(|d| d.unwrap_or_else(|| data.join("volumes")));
            eval_cmd(config.as_deref(), ckpt.as_deref(), &data, dump.as_deref(), pred.as_deref())
        }
        Cmd::Infer { ckpt, left, right, out, error_map, error_out } => {
            infer(&ckpt, &left, &right, &out, error_map.as_deref(), error_out)
        }
        Cmd::Ablate { config, data, out } => ablate(&config, &data, &out),
    }
}

fn gen_data(spec: &std::path::Path, out: &std::path::Path, count: usize, seed: u64) -> Result<()> {
    let dist = data::RdsDatasetSpec::from_file(spec)?;
    for i in 0..count {
        let geom = dist.instance(seed, i as u64)?;
        let sample = data::gen_rds(&geom, dist.d_max)?;
        data::write_sample(out, i, &sample)?;
    }
    println!("wrote {count} samples to {}", out.display());
    Ok(())
}

fn train(config: &std::path::Path, resume: Option<&std::path::Path>) -> Result<()> {
    let cfg = Config::from_file(config)?;
    let dataset = data::load_dataset(&cfg.train.data_dir, cfg.n)?;
    println!(
        "training on {} samples (d_max={}, n={}, {} epochs, batch {})",
        dataset.len(),
        cfg.d_max,
        cfg.n,
        cfg.train.epochs,
        cfg.train.batch_size
    );
    let mut net = Network::<f32>::new(&cfg, Variant::Full)?;
    println!("parameters: {}", net.store.num_scalars());
    let resume_ck = match resume {
        Some(p) => Some(Checkpoint::load(p)?),
        None => None,
    };
    let outcome = train_loop(&mut net, &dataset, resume_ck.as_ref())?;
    println!(
        "done: {} iterations, final loss {:.4}, checkpoint {}",
        outcome.iterations,
        outcome.final_loss,
        outcome.checkpoint_path.display()
    );
    Ok(())
}

fn eval_cmd(
    config: Option<&std::path::Path>,
    ckpt: Option<&std::path::Path>,
    data_dir: &std::path::Path,
    dump: Option<&std::path::Path>,
    pred: Option<&std::path::Path>,
) -> Result<()> {
    if let Some(pred_dir) = pred {
        let n = match config {
            Some(p) => Config::from_file(p)?.n,
            None => 1,
        };
        let dataset = data::load_dataset(data_dir, n)?;
        let report = eval::evaluate_predictions(pred_dir, &dataset)?;
        println!("samples {}", report.samples);
        println!("EPE {:.3}", report.epe);
        println!(">1px {:.2}%", report.gt1 * 100.0);
        println!(">3px {:.2}%", report.gt3 * 100.0);
        println!("D1 {:.2}%", report.d1 * 100.0);
        return Ok(());
    }
    let ckpt = ckpt.ok_or_else(|| Error::Config("eval needs --ckpt or --pred".into()))?;
    let ck = Checkpoint::load(ckpt)?;
    if let Some(cfg_path) = config {
        let cfg = Config::from_file(cfg_path)?;
        if cfg.arch_hash() != ck.arch_hash {
            return Err(Error::Config(
                "--config does not match the checkpoint architecture".into(),
            ));
        }
    }
    let net = ck.build_network()?;
    let dataset = data::load_dataset(data_dir, net.cfg.n)?;
    let report = eval::evaluate_model(&net, &dataset, dump)?;
    println!("samples {}", report.samples);
    report.print();
    Ok(())
}

fn infer(
    ckpt: &std::path::Path,
    left: &std::path::Path,
    right: &std::path::Path,
    out: &std::path::Path,
    gt: Option<&std::path::Path>,
    error_out: Option<PathBuf>,
) -> Result<()> {
    let ck = Checkpoint::load(ckpt)?;
    let net = ck.build_network()?;
    let l = data::read_image_rgb(left)?;
    let r = data::read_image_rgb(right)?;
    let pair = mfm::domain::ImagePair::new(l, r, net.cfg.n)?;
    let inf = net.infer(&pair)?;
    if out.extension().and_then(|e| e.to_str()) == Some("pfm") {
        data::write_pfm(out, &inf.subpixel.values)?;
    } else {
        data::write_disparity_png16(out, &inf.subpixel, None)?;
    }
    println!("wrote {}", out.display());
    if let Some(gt_path) = gt {
        let (gt_map, gt_mask) = data::read_disparity_png16(gt_path)?;
        let e = eval::epe(&inf.subpixel, &gt_map, &gt_mask)?;
        let b1 = eval::pct_error(&inf.subpixel, &gt_map, &gt_mask, 1.0)?;
        let b3 = eval::pct_error(&inf.subpixel, &gt_map, &gt_mask, 3.0)?;
        println!("EPE {e:.3}");
        println!(">1px {:.2}%", b1 * 100.0);
        println!(">3px {:.2}%", b3 * 100.0);
        let err_path = error_out.unwrap_or_else(|| {
            let mut p = out.to_path_buf();
            p.set_extension("");
            PathBuf::from(format!("{}_err.png", p.display()))
        });
        eval::error_map(&inf.subpixel, &gt_map, &gt_mask, &err_path)?;
        println!("wrote {}", err_path.display());
    }
    Ok(())
}

fn ablate(config: &std::path::Path, data_dir: &std::path::Path, out: &std::path::Path) -> Result<()> {
    let cfg = Config::from_file(config)?;
    let dataset = data::load_dataset(data_dir, cfg.n)?;
    let rows = eval::ablation_run(&cfg, &dataset)?;
    let report = eval::format_ablation_report(&rows);
    std::fs::write(out, &report)?;
    print!("{report}");
    println!("wrote {}", out.display());
    Ok(())
}
