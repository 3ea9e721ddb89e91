mod figures;

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use aled::checkpoint::{load_checkpoint, load_model, save_checkpoint};
use aled::dataset::{list_sequences, read_sequence, Sequence};
use aled::evaluation::{evaluate_sequence, format_report, oracle_predictions, MetricReport, DEFAULT_CUTOFFS, DEFAULT_TAU};
use aled::inference::infer_sequence;
use aled::representations::project_lidar;
use aled::synthetic::{write_dataset, SceneSpec};
use aled::trainer::{TrainConfig, Trainer};
use aled::types::DenseDepthGT;
use clap::{Args, Parser, Subcommand};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use figures::Range;

#[derive(Parser)]
#[command(name = "aled", version, about = "Event + LiDAR dense depth: data, training, evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the built-in desk scene as JSON.
    Scene {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Render a synthetic sequence from a scene file.
    Gen {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed stored in the scene file.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model; writes config.txt, train.log and one checkpoint per epoch.
    Train(TrainArgs),
    /// Metric tables for a checkpoint and the nearest-neighbour baseline.
    Eval {
        #[arg(long, required_unless_present_any = ["nn_only", "oracle"])]
        checkpoint: Option<PathBuf>,
        #[arg(long, env = "ALED_DATA_ROOT")]
        data: PathBuf,
        /// Only evaluate the nearest-neighbour baseline.
        #[arg(long, conflicts_with = "oracle")]
        nn_only: bool,
        /// Use the ground truth as predictions.
        #[arg(long)]
        oracle: bool,
        /// Comma-separated depth cutoffs in meters.
        #[arg(long, value_delimiter = ',')]
        cutoffs: Option<Vec<f64>>,
        /// Depth-change class threshold in meters.
        #[arg(long, default_value_t = DEFAULT_TAU)]
        tau: f64,
    },
    /// Predict one sequence; writes float32 maps and figures.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        sequence: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Colour-scale endpoints in meters, `lo:hi` (defaults to 0:max_range).
        #[arg(long)]
        range: Option<Range>,
        #[arg(long, default_value_t = DEFAULT_TAU)]
        tau: f64,
    },
    /// Redraw the figures of an inference directory.
    Plot {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        range: Option<Range>,
        /// Sequence directory, if it moved since inference.
        #[arg(long)]
        sequence: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_TAU)]
        tau: f64,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, env = "ALED_DATA_ROOT")]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// `key = value` file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Continue from a checkpoint; its configuration is the base.
    #[arg(long, conflicts_with = "config")]
    resume: Option<PathBuf>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Square crop side, or `none` for full frames.
    #[arg(long)]
    crop: Option<String>,
    #[arg(long)]
    hflip: Option<f64>,
    #[arg(long)]
    tbptt: Option<usize>,
    #[arg(long)]
    base_channels: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

enum Failure {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Numeric(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Numeric(m) => m,
        }
    }
}

impl From<aled::Error> for Failure {
    fn from(e: aled::Error) -> Self {
        match e {
            aled::Error::NonFiniteLoss { .. } | aled::Error::Tensor(_) => Failure::Numeric(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

type CliResult<T> = Result<T, Failure>;

fn io_failure(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::Data(format!("{}: {e}", path.display()))
}

fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| io_failure(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    fs::write(path, bytes).map_err(|e| io_failure(path, e))
}

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| io_failure(path, e))
}

/// SHA-256 over every file below `dir`: relative path, then contents, in path order.
fn tree_checksum(dir: &Path) -> CliResult<String> {
    fn collect(dir: &Path, out: &mut Vec<PathBuf>) -> CliResult<()> {
        for entry in fs::read_dir(dir).map_err(|e| io_failure(dir, e))? {
            let path = entry.map_err(|e| io_failure(dir, e))?.path();
            if path.is_dir() {
                collect(&path, out)?;
            } else {
                out.push(path);
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    collect(dir, &mut files)?;
    files.sort();
    let mut hasher = Sha256::new();
    for f in files {
        let rel = f.strip_prefix(dir).expect("below root");
        hasher.update(rel.to_string_lossy().as_bytes());
        hasher.update([0]);
        hasher.update(fs::read(&f).map_err(|e| io_failure(&f, e))?);
    }
    Ok(hasher.finalize().iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    }))
}

fn cmd_scene(seed: u64) -> CliResult<()> {
    let json = serde_json::to_string_pretty(&SceneSpec::desk(seed)).expect("scene serializes");
    println!("{json}");
    Ok(())
}

fn cmd_gen(spec: &Path, out: &Path, seed: Option<u64>) -> CliResult<()> {
    let text = read_text(spec)?;
    let mut scene: SceneSpec =
        serde_json::from_str(&text).map_err(|e| Failure::Data(format!("{}: {e}", spec.display())))?;
    if let Some(s) = seed {
        scene.seed = s;
    }
    scene.validate()?;
    let records = write_dataset(&scene, out)?;
    let events: usize = records.iter().map(|r| r.window.len()).sum();
    let scans = records.iter().filter(|r| r.lidar.is_some()).count();
    println!("records\t{}", records.len());
    println!("events\t{events}");
    println!("lidar_scans\t{scans}");
    println!("sha256\t{}", tree_checksum(out)?);
    Ok(())
}

fn load_sequences(root: &Path) -> CliResult<Vec<(String, Sequence)>> {
    let dirs = list_sequences(root)?;
    if dirs.is_empty() {
        return Err(Failure::Data(format!("{}: no sequence directories", root.display())));
    }
    dirs.iter()
        .map(|d| {
            let name = d.file_name().map_or_else(|| d.display().to_string(), |n| n.to_string_lossy().into_owned());
            Ok((name, read_sequence(d)?))
        })
        .collect()
}

fn apply_overrides(cfg: &mut TrainConfig, args: &TrainArgs) -> CliResult<()> {
    let overrides = [
        ("learning_rate", args.lr.map(|v| v.to_string())),
        ("epochs", args.epochs.map(|v| v.to_string())),
        ("batch_size", args.batch_size.map(|v| v.to_string())),
        ("crop", args.crop.clone()),
        ("hflip_prob", args.hflip.map(|v| v.to_string())),
        ("tbptt_len", args.tbptt.map(|v| v.to_string())),
        ("base_channels", args.base_channels.map(|v| v.to_string())),
        ("seed", args.seed.map(|v| v.to_string())),
    ];
    for (key, value) in overrides {
        if let Some(v) = value {
            cfg.set(key, &v).map_err(|e| Failure::Usage(e.to_string()))?;
        }
    }
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))
}

fn cmd_train(args: &TrainArgs) -> CliResult<()> {
    let mut trainer = match &args.resume {
        Some(path) => {
            let mut t = load_checkpoint(path)?;
            let fixed = (t.config.base_channels, t.config.bins);
            apply_overrides(&mut t.config, args)?;
            if (t.config.base_channels, t.config.bins) != fixed {
                return Err(Failure::Usage("cannot change the architecture of a resumed model".into()));
            }
            t.optimizer.learning_rate = t.config.learning_rate;
            t
        }
        None => {
            let mut cfg = match &args.config {
                Some(path) => TrainConfig::parse(&read_text(path)?)
                    .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?,
                None => TrainConfig::default(),
            };
            apply_overrides(&mut cfg, args)?;
            Trainer::new(cfg)?
        }
    };
    let data: Vec<Sequence> = load_sequences(&args.data)?.into_iter().map(|(_, s)| s).collect();
    create_dir(&args.out)?;
    write_file(&args.out.join("config.txt"), trainer.config.to_string().as_bytes())?;
    let log_path = args.out.join("train.log");
    let fresh = !log_path.exists();
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| io_failure(&log_path, e))?;
    if fresh {
        writeln!(log, "epoch\tstep\tl1\tgradient\ttotal").map_err(|e| io_failure(&log_path, e))?;
    }
    while trainer.epoch < trainer.config.epochs {
        let report = trainer.train_epoch(&data, |line, _| {
            writeln!(log, "{line}").map_err(|e| aled::Error::InvalidArgument(format!("{}: {e}", log_path.display())))?;
            Ok(true)
        })?;
        let ckpt = args.out.join(format!("epoch_{:04}.ckpt", trainer.epoch));
        save_checkpoint(&trainer, &ckpt)?;
        log::info!(
            "epoch {} done: {} batches, mean loss {:.6}, {:.1}s, saved {}",
            report.epoch,
            report.batches,
            report.mean_loss.total,
            report.seconds,
            ckpt.display()
        );
    }
    Ok(())
}

fn cmd_eval(
    checkpoint: Option<&Path>,
    data: &Path,
    nn_only: bool,
    oracle: bool,
    cutoffs: Option<Vec<f64>>,
    tau: f64,
) -> CliResult<()> {
    let cutoffs = cutoffs.unwrap_or_else(|| DEFAULT_CUTOFFS.to_vec());
    if cutoffs.is_empty() || cutoffs.iter().any(|c| !(*c > 0.0)) {
        return Err(Failure::Usage("cutoffs must be positive".into()));
    }
    if !(tau >= 0.0) {
        return Err(Failure::Usage("tau must be non-negative".into()));
    }
    let model = match (nn_only || oracle, checkpoint) {
        (false, Some(path)) => Some(load_model(path)?.0),
        _ => None,
    };
    let mut reports = Vec::new();
    let mut total = MetricReport::new(&cutoffs);
    for (name, seq) in load_sequences(data)? {
        let preds = if oracle {
            Some(oracle_predictions(&seq))
        } else if let Some(m) = &model {
            Some(infer_sequence(&m.network, &seq)?)
        } else {
            None
        };
        let report = evaluate_sequence(&seq, preds.as_deref(), &cutoffs, tau)?;
        total.merge(&report)?;
        reports.push((name, report));
    }
    reports.push(("all".to_string(), total));
    print!("{}", format_report(&reports, !nn_only));
    Ok(())
}

/// Contents of `infer.json`.
#[derive(Debug, Serialize, Deserialize)]
struct InferIndex {
    sequence: PathBuf,
    checkpoint: PathBuf,
    width: usize,
    height: usize,
    max_range: f64,
    steps: usize,
}

fn map_path(dir: &Path, step: usize, which: &str) -> PathBuf {
    dir.join(format!("step_{step:04}_{which}.f32"))
}

fn write_map(path: &Path, map: &Array2<f32>) -> CliResult<()> {
    let bytes: Vec<u8> = map.iter().flat_map(|v| v.to_le_bytes()).collect();
    write_file(path, &bytes)
}

fn read_map(path: &Path, height: usize, width: usize) -> CliResult<Array2<f32>> {
    let bytes = fs::read(path).map_err(|e| io_failure(path, e))?;
    if bytes.len() != 4 * height * width {
        return Err(io_failure(path, format!("expected {} bytes, found {}", 4 * height * width, bytes.len())));
    }
    let v = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok(Array2::from_shape_vec((height, width), v).expect("length checked"))
}

fn cmd_infer(checkpoint: &Path, sequence: &Path, out: &Path, range: Option<Range>, tau: f64) -> CliResult<()> {
    let (model, _) = load_model(checkpoint)?;
    let seq = read_sequence(sequence)?;
    let preds = infer_sequence(&model.network, &seq)?;
    create_dir(out)?;
    for (i, p) in preds.iter().enumerate() {
        write_map(&map_path(out, i, "bf"), &p.d_bf)?;
        write_map(&map_path(out, i, "af"), &p.d_af)?;
    }
    let index = InferIndex {
        sequence: fs::canonicalize(sequence).map_err(|e| io_failure(sequence, e))?,
        checkpoint: checkpoint.to_path_buf(),
        width: seq.camera.width,
        height: seq.camera.height,
        max_range: seq.camera.max_range,
        steps: preds.len(),
    };
    let json = serde_json::to_vec_pretty(&index).expect("index serializes");
    write_file(&out.join("infer.json"), &json)?;
    draw(out, &index, &seq, range, tau)?;
    println!("steps\t{}", preds.len());
    Ok(())
}

fn invalid_as_nan(gt: &DenseDepthGT) -> Array2<f32> {
    let mut d = gt.data.clone();
    for ((r, c), v) in d.indexed_iter_mut() {
        if !gt.is_valid(r, c) {
            *v = f32::NAN;
        }
    }
    d
}

fn draw(dir: &Path, index: &InferIndex, seq: &Sequence, range: Option<Range>, tau: f64) -> CliResult<()> {
    if seq.len() != index.steps || seq.camera.shape() != (index.height, index.width) {
        return Err(Failure::Data(format!(
            "{}: sequence does not match the inference outputs",
            index.sequence.display()
        )));
    }
    let range = range.unwrap_or(Range {
        lo: 0.0,
        hi: index.max_range,
    });
    let (h, w) = (index.height, index.width);
    let save = |img: &image::RgbImage, step: usize, what: &str| {
        figures::save(img, &dir.join(format!("step_{step:04}_{what}.png"))).map_err(Failure::Data)
    };
    let mut scan = None;
    for (i, rec) in seq.records.iter().enumerate() {
        let bf = read_map(&map_path(dir, i, "bf"), h, w)?;
        let af = read_map(&map_path(dir, i, "af"), h, w)?;
        if let Some(cloud) = &rec.lidar {
            scan = Some(project_lidar(cloud, &seq.camera));
        }
        save(&figures::event_image(&rec.window, h, w), i, "events")?;
        if let Some(s) = &scan {
            save(&figures::lidar_image(s, range), i, "lidar")?;
        }
        save(&figures::depth_image(&bf, range), i, "pred_bf")?;
        save(&figures::depth_image(&af, range), i, "pred_af")?;
        save(&figures::gt_image(&rec.gt_begin, range), i, "gt_bf")?;
        save(&figures::gt_image(&rec.gt_end, range), i, "gt_af")?;
        save(&figures::change_image(&bf, &af, &rec.window, tau), i, "change_pred")?;
        let (gb, ge) = (invalid_as_nan(&rec.gt_begin), invalid_as_nan(&rec.gt_end));
        save(&figures::change_image(&gb, &ge, &rec.window, tau), i, "change_gt")?;
    }
    Ok(())
}

fn cmd_plot(dir: &Path, range: Option<Range>, sequence: Option<&Path>, tau: f64) -> CliResult<()> {
    let path = dir.join("infer.json");
    let index: InferIndex =
        serde_json::from_str(&read_text(&path)?).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
    let seq = read_sequence(sequence.unwrap_or(&index.sequence))?;
    draw(dir, &index, &seq, range, tau)
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Scene { seed } => cmd_scene(seed),
        Command::Gen { spec, out, seed } => cmd_gen(&spec, &out, seed),
        Command::Train(args) => cmd_train(&args),
        Command::Eval {
            checkpoint,
            data,
            nn_only,
            oracle,
            cutoffs,
            tau,
        } => cmd_eval(checkpoint.as_deref(), &data, nn_only, oracle, cutoffs, tau),
        Command::Infer {
            checkpoint,
            sequence,
            out,
            range,
            tau,
        } => cmd_infer(&checkpoint, &sequence, &out, range, tau),
        Command::Plot {
            dir,
            range,
            sequence,
            tau,
        } => cmd_plot(&dir, range, sequence.as_deref(), tau),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
