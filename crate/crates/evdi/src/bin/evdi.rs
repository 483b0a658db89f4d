//! Command-line front end. Every subcommand is a thin wrapper over library
//! calls; see the crate examples for the same flows driven from Rust.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use evdi::core::ExposureWindow;
use evdi::crf::luma;
use evdi::edi::{edi_deblur, edi_deblur_color, edi_weights};
use evdi::eventsim::{simulate_events, FrameSequence};
use evdi::io::{
    load_events_bin, load_events_csv, load_pfm, load_png, save_events_bin, save_events_csv,
    save_pfm, save_png,
};
use evdi::optimize::{export_crf_csv, train_stage1, train_stage2, DiffusionSetup, TrainState};
use evdi::pipeline::{
    build_codec, build_denoiser, build_schedule, eval_dirs, load_dataset, load_frames_sorted,
    make_blur_set, make_dataset, run_pipeline,
};
use evdi::{EvdiError, Result, RunConfig};

#[derive(Parser)]
#[command(
    name = "evdi",
    version,
    about = "Event-assisted motion deblurring on a differentiable 2D scene"
)]
struct Cli {
    /// Worker threads for parallel stages (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate an event stream from a directory of frames (sorted by name,
    /// evenly spaced over the exposure window).
    Simulate {
        /// Directory of PNG/PFM frames.
        #[arg(long)]
        frames: PathBuf,
        #[arg(long, default_value_t = 0.2)]
        theta: f64,
        #[arg(long, default_value_t = 1e-3)]
        eps_floor: f64,
        #[arg(long, default_value_t = 0.5)]
        t_mid: f64,
        #[arg(long, default_value_t = 0.4)]
        tau: f64,
        /// Output file; `.bin` selects the binary format, anything else CSV.
        #[arg(long)]
        out: PathBuf,
    },
    /// Synthesize blurry captures with sharp ground truth (no events).
    SynthBlur {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Deblur a blurry capture with its event stream.
    Deblur {
        #[arg(long)]
        blurry: PathBuf,
        /// Event file (`.bin` or CSV).
        #[arg(long)]
        events: PathBuf,
        #[arg(long, default_value_t = 0.2)]
        theta: f64,
        /// Latent timestamp: `mid` or an absolute time in seconds.
        #[arg(long, default_value = "mid")]
        t: String,
        #[arg(long, default_value_t = 0.5)]
        t_mid: f64,
        #[arg(long, default_value_t = 0.4)]
        tau: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a full synthetic dataset (blur, events, trajectories, ground
    /// truth) from the config's scene and trajectories.
    MakeDataset {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage-1 training: fit the scene canvas and response curve.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint directory (state.bin, canvas.pfm, crf.csv, loss CSV).
        #[arg(long)]
        out: PathBuf,
        /// Continue from `out/state.bin` instead of starting fresh.
        #[arg(long)]
        resume: bool,
    },
    /// Stage-2 refinement: fit the residual features on top of a stage-1
    /// checkpoint; canvas and response curve stay frozen.
    Refine {
        #[arg(long)]
        config: PathBuf,
        /// Stage-1 checkpoint directory to start from.
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Metric table (PSNR/SSIM) over same-named images in two directories.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
    },
    /// Dataset synthesis, both training stages and evaluation in one run.
    Pipeline {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dump a checkpoint's response curve as CSV.
    ExportCrf {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn dataset_for(cfg: &RunConfig, out: &std::path::Path) -> Result<evdi::optimize::Dataset> {
    match &cfg.dataset_dir {
        Some(dir) => load_dataset(dir, cfg),
        None => {
            let dir = out.join("dataset");
            make_dataset(cfg, &dir)?;
            load_dataset(&dir, cfg)
        }
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Simulate {
            frames,
            theta,
            eps_floor,
            t_mid,
            tau,
            out,
        } => {
            let window = ExposureWindow::new(t_mid, tau)?;
            let imgs = load_frames_sorted(&frames)?;
            let n = imgs.len();
            let lumas = imgs
                .iter()
                .map(|img| if img.channels == 1 { Ok(img.clone()) } else { luma(img) })
                .collect::<Result<Vec<_>>>()?;
            let times: Vec<f64> = (0..n)
                .map(|i| window.start() + window.tau * i as f64 / (n - 1) as f64)
                .collect();
            let seq = FrameSequence::new(lumas, times)?;
            let stream = simulate_events(&seq, theta, eps_floor)?;
            if out.extension().and_then(|e| e.to_str()) == Some("bin") {
                save_events_bin(&out, &stream)?;
            } else {
                save_events_csv(&out, &stream)?;
            }
            println!("{} events -> {}", stream.len(), out.display());
            Ok(())
        }
        Cmd::SynthBlur { config, out } => {
            let cfg = RunConfig::from_file(&config)?;
            make_blur_set(&cfg, &out)
        }
        Cmd::Deblur {
            blurry,
            events,
            theta,
            t,
            t_mid,
            tau,
            out,
        } => {
            let window = ExposureWindow::new(t_mid, tau)?;
            let img = match blurry.extension().and_then(|e| e.to_str()) {
                Some("pfm") => load_pfm(&blurry)?,
                _ => load_png(&blurry)?,
            };
            let stream = if events.extension().and_then(|e| e.to_str()) == Some("bin") {
                load_events_bin(&events, img.width, img.height, window)?
            } else {
                load_events_csv(&events, img.width, img.height, window)?
            };
            let t_ref = if t == "mid" {
                window.mid
            } else {
                t.parse::<f64>().map_err(|_| {
                    EvdiError::config(format!("--t must be 'mid' or a time in seconds, got '{t}'"))
                })?
            };
            let weights = edi_weights(&stream, window, theta, t_ref)?;
            let sharp = if img.channels == 1 {
                edi_deblur(&img, &weights)?
            } else {
                edi_deblur_color(&img, &weights)?
            };
            if out.extension().and_then(|e| e.to_str()) == Some("pfm") {
                save_pfm(&out, &sharp)?;
            } else {
                save_png(&out, &sharp)?;
            }
            Ok(())
        }
        Cmd::MakeDataset { config, out } => {
            let cfg = RunConfig::from_file(&config)?;
            make_dataset(&cfg, &out)
        }
        Cmd::Train { config, out, resume } => {
            let cfg = RunConfig::from_file(&config)?;
            let dataset = dataset_for(&cfg, &out)?;
            let schedule = build_schedule(&cfg)?;
            let denoiser = build_denoiser(&cfg);
            let codec = build_codec(&cfg);
            let setup = DiffusionSetup {
                schedule: &schedule,
                denoiser: denoiser.as_ref(),
                codec: codec.as_ref(),
            };
            let setup = if cfg.lambda_rsd > 0.0 { Some(&setup) } else { None };
            let state = train_stage1(&dataset, &cfg, &out, resume, setup)?;
            println!(
                "stage 1 done at iteration {}; checkpoint in {}",
                state.iteration,
                out.display()
            );
            Ok(())
        }
        Cmd::Refine { config, ckpt, out } => {
            let cfg = RunConfig::from_file(&config)?;
            let dataset = dataset_for(&cfg, &out)?;
            let state = TrainState::load(&ckpt.join("state.bin"), &cfg)?;
            let schedule = build_schedule(&cfg)?;
            let denoiser = build_denoiser(&cfg);
            let codec = build_codec(&cfg);
            let setup = DiffusionSetup {
                schedule: &schedule,
                denoiser: denoiser.as_ref(),
                codec: codec.as_ref(),
            };
            let state = train_stage2(&dataset, &cfg, &out, state, &setup)?;
            println!(
                "stage 2 done at iteration {}; checkpoint in {}",
                state.iteration,
                out.display()
            );
            Ok(())
        }
        Cmd::Eval { pred, gt } => {
            print!("{}", eval_dirs(&pred, &gt)?);
            Ok(())
        }
        Cmd::Pipeline { config, out } => {
            let cfg = RunConfig::from_file(&config)?;
            let report = run_pipeline(&cfg, &out)?;
            print!("{}", report.metrics_csv);
            Ok(())
        }
        Cmd::ExportCrf { ckpt, out } => {
            let state = TrainState::load(&ckpt.join("state.bin"), &RunConfig::default())?;
            export_crf_csv(&out, &state.crf)?;
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if cli.jobs > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.jobs)
            .build_global()
        {
            eprintln!("error: could not configure {} worker threads: {e}", cli.jobs);
            return ExitCode::from(2);
        }
    }
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
