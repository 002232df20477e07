//! `regformer`: synthetic data, training, classification, detection,
//! evaluation and benchmarking from the command line.

mod config;

use std::collections::BTreeSet;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{info, LevelFilter};
use serde::Serialize;

use regformer_core::bench::{results_csv, run_benchmark, write_results, Strategy};
use regformer_core::detection::{
    detect_parallel, filter_proposals, read_predictions, write_prediction_lines, DetectionFile, DetectorConfig,
    PredictionRecord,
};
use regformer_core::evaluation::{evaluate, EvalOptions, GroundTruth};
use regformer_core::io::RawTensor;
use regformer_core::params::{init_params, load_checkpoint, save_checkpoint, Dims, ModelConfig};
use regformer_core::synthetic::{generate_synthetic, read_dataset, write_dataset, LoadedDataset, GT_FILE};
use regformer_core::training::{classification_forward, train};
use regformer_core::{Error, FeatureMap, RegFormerParams, Result, TextEmbeddingBank};

use config::{resolve_path, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "regformer", version, about = "Weakly supervised HOI reasoning with relational grounding")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Seed for every random stream (overrides the config's `seed`).
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Worker threads for parallel sections.
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    /// Log more (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a planted-signal synthetic dataset directory.
    GenData(GenDataArgs),
    /// Train on a dataset directory and write a checkpoint.
    Train(TrainArgs),
    /// Image-level HOI scores for one feature map, as JSON.
    Classify(ClassifyArgs),
    /// Scored HOI triplets for proposals, as JSON lines.
    Detect(DetectArgs),
    /// mAP of predictions against ground truth.
    Eval(EvalArgs),
    /// Time detection strategies against the number of pairs.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
struct GenDataArgs {
    /// Output directory.
    out_dir: PathBuf,
    #[arg(long)]
    n_images: Option<usize>,
    #[arg(long)]
    grid_h: Option<usize>,
    #[arg(long)]
    grid_w: Option<usize>,
    #[arg(long)]
    noise_std: Option<f64>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Dataset directory with a manifest.
    data_dir: Option<PathBuf>,
    /// Output checkpoint.
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Debug, Args)]
struct ClassifyArgs {
    checkpoint: Option<PathBuf>,
    /// Feature tensor of one image.
    features: Option<PathBuf>,
    /// Text embedding bank tensor.
    bank: Option<PathBuf>,
    /// Write the JSON here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct DetectArgs {
    checkpoint: Option<PathBuf>,
    /// Feature tensor of one image.
    features: Option<PathBuf>,
    /// Text embedding bank tensor.
    bank: Option<PathBuf>,
    /// Detections JSON of the same image.
    detections: Option<PathBuf>,
    /// Run on every image of a dataset directory instead (uses its bank,
    /// features and detections/ files).
    #[arg(long, conflicts_with_all = ["features", "bank", "detections"])]
    dataset: Option<PathBuf>,
    /// Detector-score exponent; overrides the config.
    #[arg(long)]
    lambda: Option<f64>,
    /// Write JSON lines here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Predictions in JSON-lines form.
    predictions: Option<PathBuf>,
    /// Ground-truth JSON (a dataset directory's gt.json also works).
    gt: Option<PathBuf>,
    #[arg(long)]
    rare_threshold: Option<usize>,
    /// Restrict to these classes, as `action:object` pairs separated by commas.
    #[arg(long, value_delimiter = ',')]
    classes: Vec<String>,
    /// Write the JSON report here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BenchArgs {
    /// Pair counts, comma separated.
    #[arg(long, value_delimiter = ',')]
    pairs: Vec<usize>,
    /// Strategies, comma separated (regformer, regformer_naive, mldecoder_crop).
    #[arg(long, value_delimiter = ',')]
    strategies: Vec<Strategy>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long, default_value = "bench.json")]
    out_json: PathBuf,
    #[arg(long, default_value = "bench.csv")]
    out_csv: PathBuf,
}

fn stdout_error(source: io::Error) -> Error {
    Error::Io {
        path: PathBuf::from("<stdout>"),
        source,
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn to_json<S: Serialize>(value: &S) -> Result<String> {
    serde_json::to_string_pretty(value).map_err(|e| Error::Argument(format!("cannot serialize output: {e}")))
}

/// Prints to standard output or writes to `out`.
fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => write_file(path, text),
        None => {
            let mut stdout = io::stdout().lock();
            stdout.write_all(text.as_bytes()).map_err(stdout_error)?;
            stdout.flush().map_err(stdout_error)
        }
    }
}

struct Context {
    cfg: RunConfig,
    seed: u64,
}

impl Context {
    fn load_model(&self, path: &Path) -> Result<RegFormerParams> {
        let mut params: RegFormerParams = load_checkpoint(path)?;
        if let Some(t) = self.cfg.model.tau_p {
            params.tau_p = t;
        }
        if let Some(g) = self.cfg.model.gamma {
            params.gamma = g;
        }
        Ok(params)
    }
}

fn load_features(path: &Path) -> Result<FeatureMap> {
    FeatureMap::from_raw(&RawTensor::read(path)?)
}

fn check_dims(params: &RegFormerParams, fm: &FeatureMap, bank: &TextEmbeddingBank) -> Result<()> {
    let dims = params.dims();
    if dims.d_v != fm.dim() || dims.d_t != bank.dim() {
        return Err(Error::Shape(format!(
            "checkpoint expects d_v = {}, d_t = {} but features have {} and the bank {}",
            dims.d_v,
            dims.d_t,
            fm.dim(),
            bank.dim()
        )));
    }
    Ok(())
}

fn cmd_gen_data(ctx: &Context, args: GenDataArgs) -> Result<()> {
    let mut spec = ctx.cfg.data.to_spec(ctx.seed);
    spec.n_images = args.n_images.unwrap_or(spec.n_images);
    spec.grid_h = args.grid_h.unwrap_or(spec.grid_h);
    spec.grid_w = args.grid_w.unwrap_or(spec.grid_w);
    spec.noise_std = args.noise_std.unwrap_or(spec.noise_std);
    let dataset = generate_synthetic(&spec)?;
    write_dataset(&dataset, &args.out_dir)?;
    info!("wrote {} images to {}", dataset.images.len(), args.out_dir.display());
    Ok(())
}

fn cmd_train(ctx: &Context, args: TrainArgs) -> Result<()> {
    let paths = &ctx.cfg.paths;
    let data_dir = resolve_path(args.data_dir, &paths.data_dir, "data_dir")?;
    let checkpoint = resolve_path(args.checkpoint, &paths.checkpoint, "checkpoint")?;
    let mut train_cfg = ctx.cfg.train.to_config(ctx.seed);
    train_cfg.epochs = args.epochs.unwrap_or(train_cfg.epochs);
    train_cfg.lr = args.lr.unwrap_or(train_cfg.lr);
    train_cfg.batch_size = args.batch_size.unwrap_or(train_cfg.batch_size);
    train_cfg.validate()?;

    let LoadedDataset { bank, samples, .. } = read_dataset(&data_dir)?;
    let first = samples
        .first()
        .ok_or_else(|| Error::Argument(format!("{}: dataset has no images", data_dir.display())))?;
    let d_v = first.fm.dim();
    let dims = Dims {
        d_v,
        d_t: bank.dim(),
        d_s: ctx.cfg.model.d_s.unwrap_or(bank.dim()),
        d: d_v,
    };
    let model = ModelConfig {
        tau_p: ctx.cfg.model.tau_p_or_default(),
        gamma: ctx.cfg.model.gamma_or_default(),
    };
    let init = init_params(dims, ctx.seed, model)?;
    let report = train(&samples, &bank, init, &train_cfg)?;
    save_checkpoint(&report.params, &checkpoint)?;

    let mut csv = String::from("epoch,loss\n");
    csv.push_str(&format!("0,{}\n", report.initial_loss));
    for (e, loss) in report.epoch_losses.iter().enumerate() {
        csv.push_str(&format!("{},{loss}\n", e + 1));
    }
    emit(None, &csv)?;
    info!(
        "{} steps, loss {:.6} -> {:.6}; checkpoint {}",
        report.steps,
        report.initial_loss,
        report.final_loss,
        checkpoint.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct ClassifyReport {
    objects: Vec<String>,
    actions: Vec<String>,
    /// `scores[k][a]`: gated HOI score of action `a` with object class `k`.
    scores: Vec<Vec<f64>>,
    action_scores: Vec<Vec<f64>>,
    r_h: f64,
    r_o: Vec<f64>,
    r_ho: Vec<f64>,
}

fn cmd_classify(ctx: &Context, args: ClassifyArgs) -> Result<()> {
    let paths = &ctx.cfg.paths;
    let params = ctx.load_model(&resolve_path(args.checkpoint, &paths.checkpoint, "checkpoint")?)?;
    let fm = load_features(&resolve_path(args.features, &paths.features, "features")?)?;
    let bank = TextEmbeddingBank::load(&resolve_path(args.bank, &paths.bank, "bank")?)?;
    check_dims(&params, &fm, &bank)?;
    let out = classification_forward(&fm, &bank, &params)?;
    let rows = |t: &regformer_core::Tensor| t.iter_rows().map(|r| r.to_vec()).collect();
    let report = ClassifyReport {
        objects: bank.object_names.clone(),
        actions: bank.action_names.clone(),
        scores: rows(&out.scores),
        action_scores: rows(&out.action_scores),
        r_h: out.interactiveness.r_h,
        r_o: out.interactiveness.r_o,
        r_ho: out.interactiveness.r_ho,
    };
    emit(args.out.as_deref(), &(to_json(&report)? + "\n"))
}

fn detect_image(
    fm: &FeatureMap,
    bank: &TextEmbeddingBank,
    params: &RegFormerParams,
    file: &DetectionFile,
    cfg: &DetectorConfig,
) -> Result<Vec<PredictionRecord>> {
    check_dims(params, fm, bank)?;
    let proposals = filter_proposals(&file.detections, cfg);
    let out = detect_parallel(fm, bank, params, &proposals.humans, &proposals.objects, cfg)?;
    Ok(out
        .predictions
        .iter()
        .map(|p| PredictionRecord::from_prediction(&file.image_id, p))
        .collect())
}

fn cmd_detect(ctx: &Context, args: DetectArgs) -> Result<()> {
    let paths = &ctx.cfg.paths;
    let params = ctx.load_model(&resolve_path(args.checkpoint, &paths.checkpoint, "checkpoint")?)?;
    let mut cfg = ctx.cfg.detector;
    cfg.lambda = args.lambda.unwrap_or(cfg.lambda);
    cfg.validate()?;

    let records = match args.dataset {
        Some(dir) => {
            let data = read_dataset(&dir)?;
            let mut all = Vec::new();
            for sample in &data.samples {
                let file = DetectionFile::load(&LoadedDataset::detections_path(&dir, &sample.image_id))?;
                all.extend(detect_image(&sample.fm, &data.bank, &params, &file, &cfg)?);
            }
            all
        }
        None => {
            let fm = load_features(&resolve_path(args.features, &paths.features, "features")?)?;
            let bank = TextEmbeddingBank::load(&resolve_path(args.bank, &paths.bank, "bank")?)?;
            let file = DetectionFile::load(&resolve_path(args.detections, &paths.detections, "detections")?)?;
            detect_image(&fm, &bank, &params, &file, &cfg)?
        }
    };
    info!("{} predictions", records.len());
    match args.out {
        Some(path) => {
            let f = fs::File::create(&path).map_err(|source| Error::Io { path: path.clone(), source })?;
            let mut w = BufWriter::new(f);
            write_prediction_lines(&mut w, &records)
                .and_then(|_| w.flush())
                .map_err(|source| Error::Io { path, source })
        }
        None => {
            let mut w = BufWriter::new(io::stdout().lock());
            write_prediction_lines(&mut w, &records)
                .and_then(|_| w.flush())
                .map_err(stdout_error)
        }
    }
}

fn parse_classes(items: &[String]) -> Result<Option<BTreeSet<(usize, usize)>>> {
    if items.is_empty() {
        return Ok(None);
    }
    items
        .iter()
        .map(|s| {
            let bad = || Error::Argument(format!("class '{s}' is not of the form action:object"));
            let (a, k) = s.trim().split_once(':').ok_or_else(bad)?;
            Ok((a.parse().map_err(|_| bad())?, k.parse().map_err(|_| bad())?))
        })
        .collect::<Result<BTreeSet<_>>>()
        .map(Some)
}

fn cmd_eval(ctx: &Context, args: EvalArgs) -> Result<()> {
    let paths = &ctx.cfg.paths;
    let predictions = resolve_path(args.predictions, &paths.predictions, "predictions")?;
    let mut gt_path = resolve_path(args.gt, &paths.gt, "gt")?;
    if gt_path.is_dir() {
        gt_path = gt_path.join(GT_FILE);
    }
    let opts = EvalOptions {
        rare_threshold: args.rare_threshold.unwrap_or(ctx.cfg.eval.rare_threshold),
        classes: parse_classes(&args.classes)?,
    };
    let preds = read_predictions(&predictions)?;
    let gt = GroundTruth::load(&gt_path)?;
    let report = evaluate(&preds, &gt, &opts)?;
    emit(args.out.as_deref(), &(to_json(&report)? + "\n"))?;
    eprint!("{}", report.table());
    Ok(())
}

fn cmd_bench(ctx: &Context, args: BenchArgs) -> Result<()> {
    let mut cfg = ctx.cfg.bench.to_config(ctx.seed);
    if !args.pairs.is_empty() {
        cfg.pair_counts = args.pairs;
    }
    if !args.strategies.is_empty() {
        cfg.strategies = args.strategies;
    }
    cfg.iterations = args.iterations.unwrap_or(cfg.iterations);
    cfg.warmup = args.warmup.unwrap_or(cfg.warmup);
    let results = run_benchmark(&cfg)?;
    write_results(&results, &args.out_json, &args.out_csv)?;
    emit(None, &results_csv(&results))
}

fn run(cli: Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Argument("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("cannot start thread pool: {e}")))?;
    }
    let seed = cli.seed.or(cfg.seed).unwrap_or(0);
    let ctx = Context { cfg, seed };
    match cli.command {
        Command::GenData(a) => cmd_gen_data(&ctx, a),
        Command::Train(a) => cmd_train(&ctx, a),
        Command::Classify(a) => cmd_classify(&ctx, a),
        Command::Detect(a) => cmd_detect(&ctx, a),
        Command::Eval(a) => cmd_eval(&ctx, a),
        Command::Bench(a) => cmd_bench(&ctx, a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.kind().to_string();
            let detail = e.to_string();
            let first = detail.lines().next().unwrap_or(&msg).trim_start_matches("error: ");
            eprintln!("ERROR:argument: {first}");
            return ExitCode::from(2);
        }
    };
    let level = match cli.verbose {
        0 => LevelFilter::Warn,
        1 => LevelFilter::Info,
        _ => LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).format_target(false).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ERROR:{}: {e}", e.category());
            ExitCode::FAILURE
        }
    }
}
