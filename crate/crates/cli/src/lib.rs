//! `ifgkit`: generate templates and scenes, train, infer, evaluate and run
//! the module ablation from the command line.

pub mod report;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use ifg_core::check;
use ifg_core::eval::{evaluate_frames, parse_labels, results_csv, serialize_labels, ApRow, EvalConfig, Frame};
use ifg_core::pipeline::detector::Detector;
use ifg_core::pipeline::experiment::{ablation_csv, generate_scenes, run_ablation, ABLATION_HEADER};
use ifg_core::pipeline::scene::cloud_from_bin;
use ifg_core::pipeline::train::{loss_log_csv, train};
use ifg_core::pipeline::{read_scene, write_scene, Config, SceneSample};
use ifg_core::templates::{generate_template, write_template};
use ifg_core::ObjectClass;

use report::format_table;

const PRECEDENCE: &str = "Settings are resolved as: command-line flags, then the --config file, then built-in defaults.";

#[derive(Debug, Parser)]
#[command(name = "ifgkit", version, about = "Template-guided 3D detection on synthetic LiDAR scenes", after_help = PRECEDENCE)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// JSON config with sections scene, rpn, refine, train, infer, ablation.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Directory that receives every output artifact.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    pub out: PathBuf,

    /// Run seed. Overrides the config's training seed.
    #[arg(long, global = true, value_name = "N", default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write one PLY template per class.
    GenTemplates {
        /// Points per template (default: refine.template_points).
        #[arg(long)]
        k: Option<usize>,
    },
    /// Write scene dumps (.bin points + .txt labels); scene i uses seed + i.
    GenScenes {
        /// Number of scenes (default: train.num_scenes).
        #[arg(long)]
        scenes: Option<usize>,
    },
    /// Train a detector; writes checkpoint.ifgk, loss.csv and config.json.
    Train(TrainArgs),
    /// Run a checkpoint over scene dumps; writes one label file per scene.
    Infer {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Directory of .bin point files.
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
    },
    /// Score detection label files against ground-truth label files; writes ap.csv.
    Eval {
        #[arg(long, value_name = "DIR")]
        detections: PathBuf,
        #[arg(long, value_name = "DIR")]
        labels: PathBuf,
    },
    /// Train the four TAFE x PSCL variants and compare them; writes ablation.csv.
    Ablate {
        /// Held-out evaluation scenes (default: ablation.eval_scenes).
        #[arg(long)]
        scenes: Option<usize>,
        /// Training scenes (default: train.num_scenes).
        #[arg(long)]
        train_scenes: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Run the geometry, gradient, loss and metric oracle suites.
    Check,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Train on scene dumps in this directory instead of generated scenes.
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
    /// Number of generated training scenes (default: train.num_scenes).
    #[arg(long)]
    scenes: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Template-assisted feature enhancement (default: ablation.use_tafe).
    #[arg(long, value_name = "BOOL")]
    tafe: Option<bool>,
    /// Proposal-level contrastive learning (default: ablation.use_pscl).
    #[arg(long, value_name = "BOOL")]
    pscl: Option<bool>,
}

/// Parses `argv` and runs the command. Returns the process exit code:
/// 0 on success, 2 on a usage error, 1 on a runtime failure.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn load_config(cli: &Cli) -> anyhow::Result<Config> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    cfg.train.seed = cli.seed;
    Ok(cfg)
}

fn create_out(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write(path: &Path, text: &str) -> anyhow::Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn dispatch(cli: &Cli) -> anyhow::Result<()> {
    let mut cfg = load_config(cli)?;
    let out = &cli.out;
    match &cli.command {
        Command::GenTemplates { k } => {
            let k = k.unwrap_or(cfg.refine.template_points);
            create_out(out)?;
            for class in ObjectClass::ALL {
                let t = generate_template(class, k, cli.seed)?;
                let path = out.join(format!("{}.ply", class.kitti_name().to_lowercase()));
                write_template(&t, &path)?;
                println!("{}", path.display());
            }
        }
        Command::GenScenes { scenes } => {
            let n = scenes.unwrap_or(cfg.train.num_scenes);
            for (i, s) in generate_scenes(&cfg, n, cli.seed)?.iter().enumerate() {
                write_scene(s, out, &format!("{i:06}"))?;
                for d in &s.diagnostics {
                    eprintln!("scene {i:06}: {d}");
                }
            }
            println!("wrote {n} scenes to {}", out.display());
        }
        Command::Train(args) => {
            if let Some(e) = args.epochs {
                cfg.train.epochs = e;
            }
            if let Some(n) = args.scenes {
                cfg.train.num_scenes = n;
            }
            if let Some(b) = args.tafe {
                cfg.ablation.use_tafe = b;
            }
            if let Some(b) = args.pscl {
                cfg.ablation.use_pscl = b;
            }
            cfg.validate()?;
            let scenes = match &args.data {
                Some(dir) => read_scene_dir(dir)?,
                None => generate_scenes(&cfg, cfg.train.num_scenes, cfg.train.scene_seed)?,
            };
            if scenes.is_empty() {
                bail!("no training scenes");
            }
            let outcome = train(&cfg, &scenes, cfg.ablation.flags())?;
            create_out(out)?;
            write(&out.join("config.json"), &cfg.to_json())?;
            write(&out.join("loss.csv"), &loss_log_csv(&outcome.log))?;
            outcome.detector.save(&out.join("checkpoint.ifgk"))?;
            if let Some(epoch) = outcome.diverged {
                bail!("training diverged at epoch {epoch}; wrote the last good checkpoint");
            }
            if let Some(last) = outcome.log.last() {
                println!("epoch {} total loss {:.6}", last.epoch, last.total);
            }
        }
        Command::Infer { checkpoint, data } => {
            let det = Detector::load(&cfg, checkpoint)?;
            create_out(out)?;
            let bins = list_files(data, "bin")?;
            for bin in &bins {
                let bytes = std::fs::read(bin).with_context(|| format!("reading {}", bin.display()))?;
                let dets = det.infer(&cloud_from_bin(&bytes)?)?;
                let stem = bin.file_stem().expect("listed files have stems");
                write(&out.join(stem).with_extension("txt"), &serialize_labels(&dets))?;
            }
            println!("wrote detections for {} scenes to {}", bins.len(), out.display());
        }
        Command::Eval { detections, labels } => {
            let rows = eval_dirs(detections, labels, &cfg.infer.eval)?;
            create_out(out)?;
            write(&out.join("ap.csv"), &results_csv(&rows, &cfg.infer.eval))?;
            print!("{}", ap_table(&rows, &cfg.infer.eval));
        }
        Command::Ablate {
            scenes,
            train_scenes,
            epochs,
        } => {
            if let Some(n) = train_scenes {
                cfg.train.num_scenes = *n;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = *e;
            }
            let n_eval = scenes.unwrap_or(cfg.ablation.eval_scenes);
            cfg.ablation.eval_scenes = n_eval;
            cfg.validate()?;
            let (rows, _) = run_ablation(&cfg, n_eval)?;
            create_out(out)?;
            write(&out.join("config.json"), &cfg.to_json())?;
            write(&out.join("ablation.csv"), &ablation_csv(&rows))?;
            for r in &rows {
                write(&out.join(format!("loss_{}.csv", r.method)), &loss_log_csv(&r.log))?;
            }
            let cells: Vec<Vec<String>> = rows.iter().map(|r| r.cells()).collect();
            print!("{}", format_table(&ABLATION_HEADER, &cells));
            for r in &rows {
                if let Some(epoch) = r.diverged {
                    eprintln!("method {} diverged at epoch {epoch}", r.method);
                }
            }
        }
        Command::Check => {
            let results = check::run_all(cli.seed);
            let mut failed = 0;
            for r in &results {
                println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
                failed += usize::from(!r.passed);
            }
            if failed > 0 {
                bail!("{failed} of {} checks failed", results.len());
            }
        }
    }
    Ok(())
}

fn list_files(dir: &Path, ext: &str) -> anyhow::Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e == ext))
        .collect();
    files.sort();
    Ok(files)
}

/// Every `<stem>.bin` in `dir` with its `<stem>.txt` label sidecar.
fn read_scene_dir(dir: &Path) -> anyhow::Result<Vec<SceneSample>> {
    list_files(dir, "bin")?
        .iter()
        .map(|bin| {
            let labels = bin.with_extension("txt");
            read_scene(bin, &labels).with_context(|| format!("loading scene {}", bin.display()))
        })
        .collect()
}

fn read_labels(path: &Path) -> anyhow::Result<Vec<ifg_core::eval::Detection>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let parsed = parse_labels(&text).with_context(|| format!("parsing {}", path.display()))?;
    for s in &parsed.skipped {
        eprintln!("{}: {s}", path.display());
    }
    Ok(parsed.detections)
}

/// Pairs each ground-truth file with the detection file of the same name;
/// a missing detection file counts as no detections.
fn eval_dirs(detections: &Path, labels: &Path, cfg: &EvalConfig) -> anyhow::Result<Vec<ApRow>> {
    let mut frames = Vec::new();
    for gt_path in list_files(labels, "txt")? {
        let det_path = detections.join(gt_path.file_name().expect("listed files have names"));
        let dets = if det_path.exists() { read_labels(&det_path)? } else { Vec::new() };
        frames.push(Frame {
            detections: dets,
            gts: read_labels(&gt_path)?,
        });
    }
    Ok(evaluate_frames(&frames, cfg))
}

pub fn ap_table(rows: &[ApRow], cfg: &EvalConfig) -> String {
    let cells: Vec<Vec<String>> = results_csv(rows, cfg)
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect();
    format_table(&["class", "bucket", "mode", "ap"], &cells)
}
