use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use clap::{Parser, Subcommand, ValueEnum};
use coswin::autograd::Fault;
use coswin::dataio::image_io::{encode_gray_png, load_image, load_mask, save_mask_png, write_bytes};
use coswin::dataio::manifest::{manifest_hash, write_synth_dataset};
use coswin::dataio::{Dataset, Sample, SynthConfig};
use coswin::dataio::Split;
use coswin::gradcheck::{self, LayerCheck};
use coswin::infer::predict_image;
use coswin::metrics::{confusion, csv_report, macro_average, scores, table_report, ConfusionCounts};
use coswin::roadnet::predict_mask;
use coswin::train::{ablate, ablation_means, ablation_report, evaluate, load_model, train_any, RunConfig};
use coswin::{Ablation, DType, Error, Result, Scalar};

/// Gradcheck suites slower than this print a warning.
const GRADCHECK_BUDGET: Duration = Duration::from_secs(60);

#[derive(Parser)]
#[command(name = "coswin", version, about = "Road segmentation with a dual-branch CNN/Swin encoder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset (PNG pairs plus manifest).
    Synth {
        #[arg(long, default_value_t = 250)]
        count: u64,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train one model from a TOML run config.
    Train {
        config: PathBuf,
        #[arg(long)]
        ablation: Option<Ablation>,
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides `out_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a checkpoint, or a directory of predicted masks, on a dataset.
    Eval {
        #[arg(long, required_unless_present = "pred_dir")]
        checkpoint: Option<PathBuf>,
        /// Dataset directory with a manifest.
        #[arg(long)]
        data: PathBuf,
        /// Run config; defaults to config.toml next to the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory of `<id>.png` masks to score instead of a checkpoint.
        #[arg(long, conflicts_with = "checkpoint")]
        pred_dir: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        /// Also write the CSV report here.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Predict one image of any size, tiling with averaged overlaps.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Output directory for `<stem>_prob.png` and `<stem>_mask.png`.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Tile stride; defaults to half the tile size.
        #[arg(long)]
        stride: Option<usize>,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
    /// Finite-difference gradient check of every layer kind in f64.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true, value_enum)]
        inject_fault: Option<FaultArg>,
    },
    /// Train all four encoder/skip variants over several seeds.
    Ablate {
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum FaultArg {
    Tanh,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Some(n) = std::env::var("COSWIN_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            log::warn!("COSWIN_THREADS ignored: {e}");
        }
    }
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error kind={} message={msg:?}", e.kind());
            ExitCode::FAILURE
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth {
            count,
            size,
            seed,
            out,
            force,
        } => {
            let cfg = SynthConfig {
                tile_size: size,
                seed,
                ..SynthConfig::default()
            };
            let entries = write_synth_dataset(&out, &cfg, count, force)?;
            println!("wrote {} samples to {}", entries.len(), out.display());
            println!("manifest sha256 {}", manifest_hash(&entries));
            Ok(())
        }
        Command::Train {
            config,
            ablation,
            seed,
            out,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(a) = ablation {
                cfg.network = cfg.network.clone().with_ablation(a);
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(o) = out {
                cfg.out_dir = o;
            }
            cfg.validate()?;
            let data = cfg.dataset()?;
            let dir = cfg.out_dir.clone();
            let summary = train_any(&cfg, &data, Some(&dir))?;
            println!(
                "best epoch {} val iou {:.4} f1 {:.4}",
                summary.best_epoch, summary.best_val.iou, summary.best_val.f1
            );
            if let Some(t) = &summary.test {
                let rows = [("test".to_string(), t.micro)];
                write_bytes(&dir.join("test.csv"), csv_report(&rows).as_bytes())?;
                print!("{}", table_report(&rows));
            }
            println!("run directory {}", dir.display());
            Ok(())
        }
        Command::Eval {
            checkpoint,
            data,
            config,
            pred_dir,
            split,
            threshold,
            csv,
        } => {
            let dataset = Dataset::load(&data)?;
            let samples = select(&dataset, split);
            if samples.is_empty() {
                return Err(Error::Config("selected split is empty".into()));
            }
            let tiles = match (pred_dir, checkpoint) {
                (Some(dir), _) => score_pred_dir(&dir, &samples)?,
                (None, Some(ck)) => {
                    let cfg = run_config(config.as_deref(), &ck)?;
                    // Tile full images to the network size.
                    let t = cfg.network.tile_size;
                    let mut tiled = Vec::new();
                    for s in samples {
                        if s.height() == t && s.width() == t {
                            tiled.push(s);
                        } else {
                            tiled.extend(coswin::dataio::tile(&s, t, t)?);
                        }
                    }
                    match cfg.network.dtype {
                        DType::F32 => eval_checkpoint::<f32>(&cfg, &ck, &tiled, threshold)?,
                        DType::F64 => eval_checkpoint::<f64>(&cfg, &ck, &tiled, threshold)?,
                    }
                }
                (None, None) => unreachable!("clap requires one of --checkpoint, --pred-dir"),
            };
            let total: ConfusionCounts = tiles.iter().copied().sum();
            let rows = vec![
                ("micro".to_string(), scores(&total)?),
                ("macro".to_string(), macro_average(&tiles)?),
            ];
            print!("{}", table_report(&rows));
            if rows[0].1.degenerate {
                log::warn!("degenerate scores: no predicted or no true road pixels");
            }
            if let Some(path) = csv {
                write_bytes(&path, csv_report(&rows).as_bytes())?;
            }
            Ok(())
        }
        Command::Infer {
            checkpoint,
            image,
            out,
            config,
            stride,
            threshold,
        } => {
            let cfg = run_config(config.as_deref(), &checkpoint)?;
            let img = load_image(&image)?;
            let stride = stride.unwrap_or(cfg.network.tile_size / 2).max(1);
            let prob = match cfg.network.dtype {
                DType::F32 => {
                    let (net, mut store) = load_model::<f32>(&cfg.network, &checkpoint)?;
                    predict_image(&net, &mut store, &img, stride, cfg.optim.batch_size)?
                }
                DType::F64 => {
                    let (net, mut store) = load_model::<f64>(&cfg.network, &checkpoint)?;
                    predict_image(&net, &mut store, &img, stride, cfg.optim.batch_size)?
                }
            };
            let mask = predict_mask(&prob, threshold)?;
            let stem = image.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
            let (h, w) = (prob.shape()[0], prob.shape()[1]);
            let gray: Vec<u8> = prob.data().iter().map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
            let prob_path = out.join(format!("{stem}_prob.png"));
            let mask_path = out.join(format!("{stem}_mask.png"));
            write_bytes(&prob_path, &encode_gray_png(&gray, h, w)?)?;
            save_mask_png(&mask_path, &mask)?;
            println!("{}", prob_path.display());
            println!("{}", mask_path.display());
            Ok(())
        }
        Command::Gradcheck { seed, inject_fault } => {
            let fault = inject_fault.map(|FaultArg::Tanh| Fault::TanhBackward);
            let start = Instant::now();
            let checks = gradcheck::run_suite(seed, fault)?;
            let elapsed = start.elapsed();
            print!("{}", gradcheck_table(&checks));
            println!("total {:.2}s", elapsed.as_secs_f64());
            if elapsed > GRADCHECK_BUDGET {
                log::warn!("gradcheck took {:.1}s, over the {}s budget", elapsed.as_secs_f64(), GRADCHECK_BUDGET.as_secs());
            }
            let failed: Vec<&str> = checks.iter().filter(|c| !c.passed()).map(|c| c.name.as_str()).collect();
            if failed.is_empty() {
                Ok(())
            } else {
                Err(Error::Contract(format!("gradcheck failed: {}", failed.join(","))))
            }
        }
        Command::Ablate { config, seeds, out } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(o) = out {
                cfg.out_dir = o;
            }
            let data = cfg.dataset()?;
            let runs = ablate(&cfg, &data, &seeds, true)?;
            let report = ablation_report(&runs);
            write_bytes(&cfg.out_dir.join("ablation.csv"), report.as_bytes())?;
            let means: Vec<(String, coswin::Scores)> = ablation_means(&runs)
                .into_iter()
                .map(|(a, s)| (a.name().to_string(), s))
                .collect();
            write_bytes(&cfg.out_dir.join("ablation_mean.csv"), csv_report(&means).as_bytes())?;
            print!("{}", table_report(&means));
            Ok(())
        }
    }
}

fn select(d: &Dataset, split: SplitArg) -> Vec<Sample> {
    match split {
        SplitArg::Train => d.split(Split::Train).to_vec(),
        SplitArg::Val => d.split(Split::Val).to_vec(),
        SplitArg::Test => d.split(Split::Test).to_vec(),
        SplitArg::All => [&d.train, &d.val, &d.test].into_iter().flatten().cloned().collect(),
    }
}

fn run_config(explicit: Option<&Path>, checkpoint: &Path) -> Result<RunConfig> {
    let path = match explicit {
        Some(p) => p.to_path_buf(),
        None => checkpoint.parent().unwrap_or(Path::new(".")).join("config.toml"),
    };
    RunConfig::load(&path)
}

fn eval_checkpoint<T: Scalar>(cfg: &RunConfig, ck: &Path, samples: &[Sample], threshold: f64) -> Result<Vec<ConfusionCounts>> {
    let (net, mut store) = load_model::<T>(&cfg.network, ck)?;
    Ok(evaluate(&net, &mut store, samples, threshold, cfg.optim.batch_size)?.tiles)
}

fn score_pred_dir(dir: &Path, samples: &[Sample]) -> Result<Vec<ConfusionCounts>> {
    samples
        .iter()
        .map(|s| confusion(&load_mask(&dir.join(format!("{}.png", s.id)))?, &s.mask))
        .collect()
}

fn gradcheck_table(checks: &[LayerCheck]) -> String {
    let mut out = format!(
        "{:<20} {:>12} {:>9} {:>7} {:>9} {:>8}  {}\n",
        "layer", "max_rel_err", "tol", "coords", "nonsmooth", "seconds", "status"
    );
    for c in checks {
        let status = match (&c.starved, c.passed()) {
            (Some(t), _) => format!("FAIL (no smooth coordinate in {t})"),
            (None, true) => "ok".to_string(),
            (None, false) => format!("FAIL (worst {})", c.worst),
        };
        out.push_str(&format!(
            "{:<20} {:>12.3e} {:>9.0e} {:>7} {:>9} {:>8.3}  {}\n",
            c.name,
            c.max_rel_err,
            c.tolerance,
            c.coords,
            c.nonsmooth,
            c.elapsed.as_secs_f64(),
            status
        ));
    }
    out
}
