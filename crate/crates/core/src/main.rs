use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use semline::geometry::{pairwise_miou, ImageSize};
use semline::harness::io::{
    load_annotations, load_detections, load_pairwise, load_scenes, save_detections, save_pairwise, save_scenes,
    ANNOTATIONS_FILE,
};
use semline::harness::pipeline::{detect_scenes, evaluate, reselect, trace_text};
use semline::harness::synth::sample_line;
use semline::harness::{gen_synthetic, gradcheck, train_toy, Checkpoint, SelectionMode, TrainConfig};
use semline::model::SiameseHeadParams;
use semline::select::pairwise_scores;
use semline::{Error, Result};

/// Semantic line detection on synthetic scenes.
#[derive(Parser)]
#[command(name = "semline", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// `key = value` settings file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/ and test/ scene directories.
    GenData,
    /// Train D-Net, R-Net and M-Net on a scene directory.
    Train {
        #[arg(long)]
        data: PathBuf,
    },
    /// Detect lines in every image of a scene directory.
    Detect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Overrides the configured selection mode (rm, nms, none).
        #[arg(long)]
        selection: Option<SelectionMode>,
    },
    /// Re-run selection on saved raw detections.
    Select {
        #[arg(long)]
        raw: PathBuf,
        /// Needed for rank-and-match selection.
        #[arg(long)]
        pairwise: Option<PathBuf>,
        #[arg(long)]
        selection: Option<SelectionMode>,
    },
    /// Accuracy, precision and recall curves with their AUC.
    Eval {
        #[arg(long)]
        detections: PathBuf,
        /// Annotation file, or a scene directory holding one.
        #[arg(long)]
        annotations: PathBuf,
    },
    /// Finite-difference check of every backward pass.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
    /// Time the pairwise mIoU matrix and pairwise head scoring.
    Bench {
        #[arg(long, default_value_t = 1000)]
        lines: usize,
        #[arg(long, default_value_t = 64)]
        detections: usize,
    },
}

fn config(common: &Common) -> Result<TrainConfig> {
    let mut cfg = match &common.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn run(cli: Cli) -> Result<()> {
    let cfg = config(&cli.common)?;
    let out = &cli.common.out;
    create_dir(out)?;
    match cli.command {
        Command::GenData => {
            let size = cfg.image_size();
            // test scenes use the next seed so the two sets never coincide
            let train = gen_synthetic(cfg.train_scenes, size, cfg.scene_mode, cfg.contrast, cfg.noise, cfg.seed)?;
            let test = gen_synthetic(
                cfg.test_scenes,
                size,
                cfg.scene_mode,
                cfg.contrast,
                cfg.noise,
                cfg.seed.wrapping_add(1),
            )?;
            save_scenes(&out.join("train"), &train)?;
            save_scenes(&out.join("test"), &test)?;
            println!("wrote {} train and {} test scenes to {}", train.len(), test.len(), out.display());
        }
        Command::Train { data } => {
            let scenes = load_scenes(&data)?;
            let start = Instant::now();
            let trained = train_toy(&scenes, &cfg)?;
            trained.checkpoint.save(&out.join("checkpoint.txt"))?;
            write(&out.join("train_log.csv"), &trained.log.to_csv())?;
            write(&out.join("config.txt"), &cfg.to_text())?;
            for e in &trained.log.entries {
                println!("{} epoch {:>3} loss {:.6}", e.stage.as_str(), e.epoch, e.loss);
            }
            println!("trained on {} scenes in {:.1}s", scenes.len(), start.elapsed().as_secs_f64());
        }
        Command::Detect {
            checkpoint,
            data,
            selection,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let scenes = load_scenes(&data)?;
            let cfg = TrainConfig {
                selection: selection.unwrap_or(cfg.selection),
                ..cfg
            };
            let set = detect_scenes(&scenes, &ckpt, &cfg)?;
            save_detections(&out.join("raw_detections.txt"), &set.raw)?;
            if cfg.selection == SelectionMode::RankMatch {
                save_pairwise(&out.join("pairwise.txt"), &set.pairwise)?;
            }
            save_detections(&out.join("detections.txt"), &set.selected)?;
            write(&out.join("selection_trace.txt"), &set.trace_text())?;
            let n: usize = set.selected.iter().map(|r| r.detections.len()).sum();
            println!("{} lines selected in {} images ({})", n, scenes.len(), cfg.selection.as_str());
        }
        Command::Select {
            raw,
            pairwise,
            selection,
        } => {
            let mode = selection.unwrap_or(cfg.selection);
            let raw = load_detections(&raw)?;
            let pw = match pairwise {
                Some(p) => load_pairwise(&p)?,
                None => Vec::new(),
            };
            let (selected, traces) = reselect(&raw, &pw, mode, cfg.nms_threshold)?;
            save_detections(&out.join("detections.txt"), &selected)?;
            write(&out.join("selection_trace.txt"), &trace_text(&traces))?;
            let n: usize = selected.iter().map(|r| r.detections.len()).sum();
            println!("{} lines selected in {} images ({})", n, selected.len(), mode.as_str());
        }
        Command::Eval {
            detections,
            annotations,
        } => {
            let ann_path = if annotations.is_dir() {
                annotations.join(ANNOTATIONS_FILE)
            } else {
                annotations
            };
            let report = evaluate(&load_detections(&detections)?, &load_annotations(&ann_path)?, &cfg)?;
            let summary = report.summary(cfg.eval_tau);
            write(&out.join("accuracy.csv"), &report.accuracy_csv())?;
            write(&out.join("precision_recall.csv"), &report.precision_recall_csv())?;
            write(&out.join("summary.txt"), &summary)?;
            print!("{summary}");
        }
        Command::Gradcheck { seeds } => {
            let start = Instant::now();
            let rows = gradcheck::run_all(0..seeds)?;
            let worst = rows.iter().map(|(_, r)| r.max_rel_error).fold(0.0, f64::max);
            for (name, r) in &rows {
                println!("{name:<24} max_rel_error {:.3e} over {} coordinates", r.max_rel_error, r.checked);
            }
            println!("seeds {seeds} worst {worst:.3e} in {:.1}s", start.elapsed().as_secs_f64());
            if !(worst < 1e-4) {
                return Err(Error::Numeric(format!("gradient check error {worst:.3e} exceeds 1e-4")));
            }
        }
        Command::Bench { lines, detections } => {
            let size = ImageSize::new(100, 100)?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let ls: Vec<_> = (0..lines).map(|_| sample_line(&mut rng, size, 0.01)).collect();
            let start = Instant::now();
            let m = pairwise_miou(&ls, size)?;
            let t_miou = start.elapsed().as_secs_f64();
            let dim = cfg.fc1_width;
            let r = SiameseHeadParams::random(&mut rng, dim, cfg.siamese_hidden);
            let mh = SiameseHeadParams::random(&mut rng, dim, cfg.siamese_hidden);
            let feats: Vec<Vec<f64>> = (0..detections)
                .map(|_| (0..dim).map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0)).collect())
                .collect();
            let start = Instant::now();
            pairwise_scores(&feats, &r, &mh)?;
            let t_scores = start.elapsed().as_secs_f64();
            println!("pairwise_miou lines={lines} entries={} seconds={t_miou:.4}", m.len());
            println!("pairwise_scores detections={detections} seconds={t_scores:.4}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
