use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use mitunet_core::dataprep::io::{load_dataset, load_mask, load_rgb, save_mask, save_rgb};
use mitunet_core::dataprep::{
    normalize_with, refine_annotation, resize_to_training, BinaryMask, RgbImage, Sample, REFINE_CLOSE_KERNEL,
    REFINE_DILATE_PX,
};
use mitunet_core::losses::LossSpec;
use mitunet_core::model::{model_grad_check, Checkpoint, MitUNet};
use mitunet_core::synthgen::{make_dataset, write_dataset};
use mitunet_core::tensor::gradcheck::{sweep, GradCheckReport};
use mitunet_core::tensor::{Precision, Tensor};
use mitunet_core::train::{
    ablate_tversky, evaluate, finetune, history_jsonl, plot_tradeoff, predict_masks, report_table, split_dataset,
    train, EpochRecord, MetricReport, ReportRow, RunConfig, TrainOutcome, REFERENCE_POINTS,
};
use mitunet_core::Error;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(Error),
    /// The command ran but its verdict is negative (e.g. a failed gradient check).
    Failed(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Failed(m) => f.write_str(m),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

type Res<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "mitunet", version, about = "Wall segmentation for raster floor plans")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Settings shared by every command that trains or evaluates.
#[derive(Args, Debug, Clone, Default)]
struct Overrides {
    /// TOML run configuration; unset keys keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Tversky false-positive weight (beta defaults to 1 - alpha).
    #[arg(long)]
    alpha: Option<f64>,
    /// Tversky false-negative weight (alpha defaults to 1 - beta).
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long, value_parser = ["nano", "b0", "b1", "b2", "b3", "b4"])]
    preset: Option<String>,
    /// Single-threaded execution.
    #[arg(long)]
    deterministic: bool,
}

/// Where samples come from: a directory, or else the synthetic pool.
#[derive(Args, Debug, Clone, Default)]
struct DataArgs {
    /// Directory with images/ and masks/ (defaults to the synthetic pool).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Letterbox and resize loaded samples to this side.
    #[arg(long)]
    side: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset.
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Refine wall annotations: carve dilated openings, then close.
    Prep {
        /// Directory with walls/ and optional doors/ and windows/.
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = REFINE_DILATE_PX)]
        dilate: usize,
        #[arg(long, default_value_t = REFINE_CLOSE_KERNEL)]
        close: usize,
    },
    /// Train from scratch.
    Train {
        #[command(flatten)]
        o: Overrides,
        #[command(flatten)]
        d: DataArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Continue training a checkpoint at the fine-tuning learning rate.
    Finetune {
        #[command(flatten)]
        o: Overrides,
        #[command(flatten)]
        d: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep the Tversky weights and report the precision/recall trend.
    Ablate {
        #[command(flatten)]
        o: Overrides,
        #[command(flatten)]
        d: DataArgs,
        /// Comma-separated false-positive weights.
        #[arg(long, value_delimiter = ',')]
        alphas: Option<Vec<f64>>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Metrics of a checkpoint on a dataset.
    Eval {
        #[command(flatten)]
        o: Overrides,
        #[command(flatten)]
        d: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = Subset::Val)]
        subset: Subset,
        /// Print the report as JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Predict the wall mask of one image.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the input with walls tinted red.
        #[arg(long)]
        overlay: Option<PathBuf>,
    },
    /// Finite-difference check of every registered operator and of the model.
    Gradcheck {
        /// Tolerance for both precisions (default 1e-3 for 32-bit, 1e-5 for 64-bit).
        #[arg(long)]
        tol: Option<f64>,
        #[arg(long, value_enum, default_value_t = PrecisionArg::Both)]
        precision: PrecisionArg,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        /// Parameter entries checked end to end on the model (0 skips it).
        #[arg(long, default_value_t = 200)]
        model_coords: usize,
        #[arg(long, default_value = "nano")]
        preset: String,
    },
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum Subset {
    Val,
    All,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum PrecisionArg {
    F32,
    F64,
    Both,
}

pub fn run(cli: Cli) -> Res<()> {
    match cli.command {
        Command::Synth { n, seed, out, config } => synth(n, seed, &out, config.as_deref()),
        Command::Prep { dir, out, dilate, close } => prep(&dir, &out, dilate, close),
        Command::Train { o, d, out } => run_train(&o, &d, &out, None),
        Command::Finetune { o, d, checkpoint, out } => run_train(&o, &d, &out, Some(&checkpoint)),
        Command::Ablate { o, d, alphas, out } => ablate(&o, &d, alphas, &out),
        Command::Eval { o, d, checkpoint, subset, json } => eval(&o, &d, &checkpoint, subset, json),
        Command::Infer { checkpoint, image, out, overlay } => infer(&checkpoint, &image, &out, overlay.as_deref()),
        Command::Gradcheck { tol, precision, seeds, model_coords, preset } => {
            gradcheck(tol, precision, seeds, model_coords, &preset)
        }
    }
}

fn load_config(path: Option<&Path>) -> Res<RunConfig> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    })
}

fn configure(o: &Overrides) -> Res<RunConfig> {
    let mut cfg = load_config(o.config.as_deref())?;
    if let Some(s) = o.seed {
        cfg.train.seed = s;
    }
    if let Some(e) = o.epochs {
        cfg.train.epochs = e;
    }
    match (o.alpha, o.beta) {
        (None, None) => {}
        (a, b) => {
            let (a, b) = (a.unwrap_or_else(|| 1.0 - b.unwrap()), b.unwrap_or_else(|| 1.0 - a.unwrap()));
            cfg.loss = LossSpec::tversky(a, b);
        }
    }
    if let Some(p) = &o.preset {
        cfg.model.preset = p.clone();
    }
    cfg.train.deterministic |= o.deterministic;
    cfg.validate()?;
    init_threads(cfg.train.deterministic)?;
    Ok(cfg)
}

/// `MITUNET_THREADS` caps the worker pool; deterministic runs use one.
fn init_threads(deterministic: bool) -> Res<()> {
    let n = if deterministic {
        Some(1)
    } else {
        match std::env::var("MITUNET_THREADS") {
            Ok(v) => Some(
                v.parse::<usize>()
                    .ok()
                    .filter(|&n| n > 0)
                    .ok_or_else(|| CliError::Usage(format!("MITUNET_THREADS must be a positive integer, got {v:?}")))?,
            ),
            Err(_) => None,
        }
    };
    if let Some(n) = n {
        // a second initialisation in the same process is harmless
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

fn samples(cfg: &RunConfig, d: &DataArgs) -> Res<Vec<Sample>> {
    let loaded = match &d.data {
        Some(dir) => load_dataset(dir)?,
        None => make_dataset(&cfg.plan, cfg.data.samples, cfg.data.seed)?.0.into_iter().map(|p| p.sample).collect(),
    };
    Ok(match d.side {
        Some(side) => loaded.iter().map(|s| resize_to_training(s, side)).collect::<Result<_, _>>()?,
        None => loaded,
    })
}

fn create_dir(dir: &Path) -> Res<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::Core(Error::Io { path: dir.to_path_buf(), source: e }))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Res<()> {
    fs::write(path, contents).map_err(|e| CliError::Core(Error::Io { path: path.to_path_buf(), source: e }))
}

fn progress(tag: &str) -> impl FnMut(&EpochRecord) + '_ {
    move |r: &EpochRecord| {
        eprintln!(
            "{tag}run {} epoch {:>3}  loss {}  lr {:.2e}  mIoU {:.2}  wall IoU {:.2}",
            r.run,
            r.epoch,
            r.train_loss.map_or("   -  ".into(), |l| format!("{l:.4}")),
            r.lr,
            r.val.miou,
            r.val.wall_iou()
        )
    }
}

fn encoder_name(preset: &str) -> String {
    format!("MiT-{preset}")
}

fn synth(n: usize, seed: u64, out: &Path, config: Option<&Path>) -> Res<()> {
    let cfg = load_config(config)?;
    let (plans, manifest) = make_dataset(&cfg.plan, n, seed)?;
    write_dataset(out, &plans, &manifest)?;
    println!("wrote {n} samples to {}", out.display());
    Ok(())
}

fn prep(dir: &Path, out: &Path, dilate: usize, close: usize) -> Res<()> {
    let walls_dir = dir.join("walls");
    let mut names: Vec<_> = fs::read_dir(&walls_dir)
        .map_err(|e| CliError::Core(Error::Io { path: walls_dir.clone(), source: e }))?
        .filter_map(|e| e.ok().map(|e| e.file_name()))
        .collect();
    names.sort();
    let masks = out.join("masks");
    create_dir(&masks)?;
    for name in &names {
        let wall = load_mask(walls_dir.join(name))?;
        let optional = |sub: &str| -> Res<BinaryMask> {
            let p = dir.join(sub).join(name);
            Ok(if p.exists() { load_mask(p)? } else { BinaryMask::empty(wall.height(), wall.width()) })
        };
        let refined = refine_annotation(&wall, &optional("doors")?, &optional("windows")?, dilate, close)?;
        save_mask(masks.join(name), &refined)?;
    }
    println!("refined {} masks into {}", names.len(), masks.display());
    Ok(())
}

fn write_outcome(out: &Path, cfg: &RunConfig, outcome: &TrainOutcome) -> Res<String> {
    create_dir(out)?;
    write_file(&out.join("history.jsonl"), history_jsonl(&outcome.history()))?;
    outcome.best_run().checkpoint.save(out.join("best.mitu"))?;
    write_file(&out.join("config.toml"), cfg.to_toml())?;
    let row = ReportRow::new("MitUNet", &encoder_name(&cfg.model.preset), &cfg.loss.to_string(), &outcome.mean);
    let table = report_table(&[row]);
    write_file(&out.join("report.txt"), &table)?;
    Ok(table)
}

fn run_train(o: &Overrides, d: &DataArgs, out: &Path, base: Option<&Path>) -> Res<()> {
    let cfg = configure(o)?;
    let data = samples(&cfg, d)?;
    let outcome = match base {
        None => train(&cfg.train_config(), &data, &mut progress(""))?,
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            finetune(&ck, &cfg.finetune_config(), &data, &mut progress("finetune "))?
        }
    };
    let table = write_outcome(out, &cfg, &outcome)?;
    print!("{table}");
    println!("mean best-epoch metrics over {} run(s); checkpoint {}", outcome.mean.runs, out.join("best.mitu").display());
    Ok(())
}

fn ablate(o: &Overrides, d: &DataArgs, alphas: Option<Vec<f64>>, out: &Path) -> Res<()> {
    let mut cfg = configure(o)?;
    if let Some(a) = alphas {
        cfg.ablation.alphas = a;
        cfg.validate()?;
    }
    let data = samples(&cfg, d)?;
    let mut history = Vec::new();
    let mut log = progress("");
    let result = ablate_tversky(&cfg.ablation.alphas, &cfg.train_config(), &data, &mut |alpha, r| {
        eprint!("alpha {alpha:.2} ");
        log(r);
        history.push((alpha, r.clone()));
    })?;
    create_dir(out)?;
    let rows: Vec<ReportRow> = result
        .rows
        .iter()
        .map(|r| {
            let loss = LossSpec::tversky(r.alpha, r.beta).to_string();
            ReportRow::new("MitUNet", &encoder_name(&cfg.model.preset), &loss, &r.metrics)
        })
        .collect();
    let mut text = report_table(&rows);
    text.push_str("\nfull-scale reference (orientation only):\n");
    for (a, p, r) in REFERENCE_POINTS {
        text.push_str(&format!("  alpha {a:.1}: precision {p:.2}, recall {r:.2}\n"));
    }
    let t = result.trend;
    text.push_str(&format!(
        "\ntrend: precision rho {:+.3} ({} inversions), recall rho {:+.3} ({} inversions) -> {}\n",
        t.precision_rho,
        t.precision_inversions,
        t.recall_rho,
        t.recall_inversions,
        if t.holds() { "holds" } else { "does not hold" }
    ));
    write_file(&out.join("ablation.txt"), &text)?;
    write_file(&out.join("ablation.json"), serde_json::to_string_pretty(&result).expect("serialisable"))?;
    let lines: String = history
        .iter()
        .map(|(a, r)| {
            let mut v = serde_json::to_value(r).expect("serialisable");
            v["alpha"] = (*a).into();
            v.to_string() + "\n"
        })
        .collect();
    write_file(&out.join("history.jsonl"), lines)?;
    save_rgb(out.join("tradeoff.png"), &plot_tradeoff(&result.rows))?;
    print!("{text}");
    Ok(())
}

fn eval(o: &Overrides, d: &DataArgs, checkpoint: &Path, subset: Subset, json: bool) -> Res<()> {
    let cfg = configure(o)?;
    let ck = Checkpoint::load(checkpoint)?;
    let model: MitUNet<f32> = ck.to_model()?;
    let data = samples(&cfg, d)?;
    let picked: Vec<&Sample> = match subset {
        Subset::All => data.iter().collect(),
        Subset::Val => split_dataset(data.len(), cfg.train.split, cfg.train.seed)?.1.iter().map(|&i| &data[i]).collect(),
    };
    let report = evaluate(&model, &picked, &cfg.augment, cfg.train.deterministic)?;
    if json {
        println!("{}", serde_json::to_string(&report).expect("serialisable"));
    } else {
        print!("{}", report_table(&[report_row(&ck, &report)]));
    }
    Ok(())
}

fn report_row(ck: &Checkpoint, r: &MetricReport) -> ReportRow {
    let loss = ck.meta.get("loss").and_then(|v| v.as_str()).unwrap_or("-").to_string();
    ReportRow {
        model: "MitUNet".into(),
        encoder: encoder_name(&ck.config.preset),
        loss,
        recall: r.recall,
        precision: r.precision,
        accuracy: r.accuracy,
        miou: r.miou,
    }
}

/// Pads with white on the bottom/right to a multiple of `stride`, predicts,
/// and crops back, so any input size works.
fn predict_image(model: &MitUNet<f32>, img: &RgbImage, cfg: &RunConfig) -> Res<BinaryMask> {
    let stride = model.config().encoder.total_stride();
    let (h, w) = img.dims();
    let (ph, pw) = (h.div_ceil(stride) * stride, w.div_ceil(stride) * stride);
    let mut padded = RgbImage::filled(ph, pw, [255; 3]);
    for y in 0..h {
        for x in 0..w {
            padded.put(y, x, img.pixel(y, x));
        }
    }
    let x = normalize_with(&padded, &cfg.augment.mean, &cfg.augment.std);
    let x = Tensor::new(&[1, 3, ph, pw], x.into_data())?;
    let full = predict_masks(&model.predict(&x)?)?.remove(0);
    Ok(BinaryMask::from_fn(h, w, |y, x| full.get(y, x)))
}

fn infer(checkpoint: &Path, image: &Path, out: &Path, overlay: Option<&Path>) -> Res<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let model: MitUNet<f32> = ck.to_model()?;
    let img = load_rgb(image)?;
    let mask = predict_image(&model, &img, &RunConfig::default())?;
    save_mask(out, &mask)?;
    if let Some(path) = overlay {
        let mut tinted = img.clone();
        for y in 0..img.height() {
            for x in 0..img.width() {
                if mask.get(y, x) {
                    let p = img.pixel(y, x);
                    tinted.put(y, x, [((p[0] as u16 + 255) / 2) as u8, p[1] / 2, p[2] / 2]);
                }
            }
        }
        save_rgb(path, &tinted)?;
    }
    println!("{} wall pixels of {} ({:.2}%)", mask.count(), mask.bits().len(), 100.0 * mask.fraction());
    Ok(())
}

fn gradcheck(tol: Option<f64>, precision: PrecisionArg, seeds: u64, model_coords: usize, preset: &str) -> Res<()> {
    let seeds: Vec<u64> = (0..seeds).collect();
    let mut reports: Vec<GradCheckReport> = Vec::new();
    let runs: &[(Precision, f64)] = match precision {
        PrecisionArg::F32 => &[(Precision::F32, 1e-3)],
        PrecisionArg::F64 => &[(Precision::F64, 1e-5)],
        PrecisionArg::Both => &[(Precision::F32, 1e-3), (Precision::F64, 1e-5)],
    };
    for &(p, default_tol) in runs {
        reports.extend(sweep(p, tol.unwrap_or(default_tol), &seeds)?);
    }
    if model_coords > 0 {
        reports.push(model_grad_check(preset, 64, model_coords, tol.unwrap_or(1e-3), 0)?);
    }
    // one row per operator and precision, worst seed shown
    let mut rows: Vec<(String, Precision, usize, f64, f64, bool)> = Vec::new();
    for r in &reports {
        match rows.iter_mut().find(|row| row.0 == r.op && row.1 == r.precision) {
            Some(row) => {
                row.2 += 1;
                row.3 = row.3.max(r.max_rel_err);
                row.5 &= r.pass;
            }
            None => rows.push((r.op.clone(), r.precision, 1, r.max_rel_err, r.tolerance, r.pass)),
        }
    }
    let width = rows.iter().map(|r| r.0.len()).max().unwrap_or(2).max(2);
    println!("{:<width$} | precision | seeds | max rel err | tolerance | result", "op");
    for (op, p, n, err, tol, pass) in &rows {
        let p = if *p == Precision::F32 { "f32" } else { "f64" };
        let verdict = if *pass { "pass" } else { "FAIL" };
        println!("{op:<width$} | {p:<9} | {n:>5} | {err:>11.3e} | {tol:>9.0e} | {verdict}");
    }
    let failed = rows.iter().filter(|r| !r.5).count();
    if failed > 0 {
        return Err(CliError::Failed(format!("{failed} of {} gradient checks failed", rows.len())));
    }
    println!("all {} checks passed", rows.len());
    Ok(())
}
