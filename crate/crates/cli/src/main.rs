use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use noiret::config::TrainConfig;
use noiret::corruption::make_pair;
use noiret::gstmap::write_gst_map;
use noiret::losses::{LossConfig, LossKind};
use noiret::model::Model;
use noiret::numerics::{Image, RngStream};
use noiret::retrieval::{corrupt_query, per_query_jsonl, report_csv, ModelDescriptors, Protocol};
use noiret::synthset::{generate_dataset, Manifest};
use noiret::{gradcheck, trainer, Error};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

#[derive(Parser)]
#[command(name = "noiret", version, about = "Noise-robust retrieval laboratory on synthetic landmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic retrieval dataset and its manifest.
    GenData(GenDataArgs),
    /// Corrupt one image, or every query image of a dataset.
    Corrupt(CorruptArgs),
    /// Train a model on a generated dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint with the Easy/Medium/Hard protocols.
    Eval(EvalArgs),
    /// Run every finite-difference gradient check.
    Gradcheck(GradcheckArgs),
    /// Export the gradient scaling term over an (angle, quality) grid.
    GstMap(GstMapArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Number of landmark classes (default: config value, else 32)
    #[arg(long)]
    classes: Option<usize>,
    /// Images per class: one query plus database views (default: config value, else 10)
    #[arg(long)]
    per_class: Option<usize>,
    /// Dataset seed (default: config value, else 0)
    #[arg(long)]
    seed: Option<u64>,
    /// JSON config file supplying defaults for the flags above
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CorruptArgs {
    /// Single PPM image to corrupt (exclusive with --data)
    #[arg(long, conflicts_with = "data", required_unless_present = "data")]
    input: Option<PathBuf>,
    /// Dataset directory; every query image is corrupted
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output PPM file (with --input) or directory (with --data)
    #[arg(long)]
    out: PathBuf,
    /// Corruption seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Flags mirroring the config file keys; each overrides the file value.
#[derive(Args, Default)]
struct ConfigFlags {
    /// JSON config file; flags override its values
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training seed
    #[arg(long)]
    seed: Option<u64>,
    /// Expected class count of the dataset
    #[arg(long)]
    classes: Option<usize>,
    /// Images per class (dataset shape, recorded only)
    #[arg(long)]
    per_class: Option<usize>,
    /// Pairs per batch
    #[arg(long)]
    batch: Option<usize>,
    /// Number of epochs
    #[arg(long)]
    epochs: Option<usize>,
    /// Initial learning rate
    #[arg(long)]
    lr0: Option<f64>,
    /// SGD momentum
    #[arg(long)]
    momentum: Option<f64>,
    /// Weight decay factor
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Logit scale s
    #[arg(long)]
    s: Option<f64>,
    /// Angular margin m
    #[arg(long)]
    m: Option<f64>,
    /// Quality concentration h
    #[arg(long)]
    h: Option<f64>,
    /// InfoNCE temperature
    #[arg(long)]
    tau: Option<f64>,
    /// Weight of the local-feature InfoNCE term
    #[arg(long)]
    alpha: Option<f64>,
    /// Weight of the compensated-feature InfoNCE term
    #[arg(long)]
    beta: Option<f64>,
    /// Embedding dimension
    #[arg(long)]
    d: Option<usize>,
    /// Comma-separated inference scales
    #[arg(long, value_delimiter = ',')]
    scales: Option<Vec<f64>>,
    /// Enable the quality compensation block (true/false)
    #[arg(long)]
    qcb_enabled: Option<bool>,
    /// Margin head: noiretrieval, adaface or normsoftmax
    #[arg(long)]
    loss: Option<String>,
}

impl ConfigFlags {
    fn resolve(&self) -> noiret::Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(path) => TrainConfig::load(path)?,
            None => TrainConfig::default(),
        };
        macro_rules! set {
            ($($field:ident),*) => {$(
                if let Some(v) = &self.$field {
                    cfg.$field = v.clone();
                }
            )*};
        }
        set!(
            seed, classes, per_class, batch, epochs, lr0, momentum, weight_decay, s, m, h, tau, alpha, beta, d, scales,
            qcb_enabled
        );
        if let Some(loss) = &self.loss {
            cfg.loss = loss.parse::<LossKind>()?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory produced by gen-data
    #[arg(long)]
    data: PathBuf,
    /// Output directory for model.ckpt, metrics.csv and config.json
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    flags: ConfigFlags,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint file written by train
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset directory produced by gen-data
    #[arg(long)]
    data: PathBuf,
    /// easy, medium, hard or all
    #[arg(long, default_value = "medium")]
    protocol: String,
    /// Corrupt the queries (database stays clean)
    #[arg(long)]
    noisy: bool,
    /// Query corruption seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for eval.csv and eval_ap.jsonl (report also goes to stdout)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Seed for the random test problems
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct GstMapArgs {
    /// Grid points along θ
    #[arg(long, default_value_t = 64)]
    theta_steps: usize,
    /// Grid points along the quality descriptor
    #[arg(long, default_value_t = 21)]
    desc_steps: usize,
    /// Logit scale s
    #[arg(long, default_value_t = LossConfig::default().s)]
    s: f64,
    /// Angular margin m
    #[arg(long, default_value_t = LossConfig::default().m)]
    m: f64,
    /// Output CSV path
    #[arg(long)]
    out: PathBuf,
}

enum Failure {
    Lib(Error),
    Numeric(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

type CmdResult = Result<(), Failure>;

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> noiret::Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn create_dir(path: &Path) -> noiret::Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn gen_data(args: &GenDataArgs) -> CmdResult {
    let base = match &args.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    let classes = args.classes.unwrap_or(base.classes);
    let per_class = args.per_class.unwrap_or(base.per_class);
    let seed = args.seed.unwrap_or(base.seed);
    let manifest = generate_dataset(classes, per_class, seed, &args.out)?;
    println!("wrote {} images to {}", manifest.entries.len(), args.out.display());
    Ok(())
}

fn corrupt(args: &CorruptArgs) -> CmdResult {
    if let Some(input) = &args.input {
        let image = Image::read_ppm(input)?;
        let (_, noisy, specs) = make_pair(&image, &mut RngStream::derive(args.seed, "corrupt"))?;
        noisy.write_ppm(&args.out)?;
        println!("{}", serde_json::to_string(&specs).map_err(Error::from)?);
        return Ok(());
    }
    let data = args.data.as_ref().expect("clap enforces --input or --data");
    let manifest = Manifest::load(data)?;
    create_dir(&args.out)?;
    let mut log = String::new();
    for q in manifest.queries() {
        let (noisy, specs) = corrupt_query(&manifest.load_image(q)?, q.id, args.seed)?;
        noisy.write_ppm(&args.out.join(&q.file))?;
        let line = serde_json::json!({ "id": q.id, "file": q.file, "specs": specs });
        log.push_str(&line.to_string());
        log.push('\n');
    }
    write_file(&args.out.join("specs.jsonl"), log)?;
    println!("corrupted {} queries into {}", manifest.queries().count(), args.out.display());
    Ok(())
}

fn train(args: &TrainArgs) -> CmdResult {
    let cfg = args.flags.resolve()?;
    let manifest = Manifest::load(&args.data)?;
    let run = trainer::train(&cfg, &manifest)?;
    run.write(&args.out)?;
    write_file(
        &args.out.join("config.json"),
        serde_json::to_string_pretty(&cfg).map_err(Error::from)?,
    )?;
    if let Some(last) = run.metrics.last() {
        println!(
            "trained {} epochs: total {:.4}, checkpoint {}",
            last.epoch,
            last.total,
            args.out.join(trainer::CHECKPOINT_FILE).display()
        );
    }
    Ok(())
}

fn eval(args: &EvalArgs) -> CmdResult {
    let protocols: Vec<Protocol> = if args.protocol == "all" {
        Protocol::ALL.to_vec()
    } else {
        vec![args.protocol.parse()?]
    };
    let model = Model::load(&args.ckpt)?;
    let manifest = Manifest::load(&args.data)?;
    let descriptors = ModelDescriptors::extract(&model, &manifest, args.noisy.then_some(args.seed))?;
    let runs = protocols
        .into_iter()
        .map(|p| descriptors.evaluate(&manifest, p, args.noisy))
        .collect::<noiret::Result<Vec<_>>>()?;
    let csv = report_csv(&runs);
    print!("{csv}");
    if let Some(out) = &args.out {
        create_dir(out)?;
        write_file(&out.join("eval.csv"), &csv)?;
        write_file(&out.join("eval_ap.jsonl"), per_query_jsonl(&runs)?)?;
    }
    Ok(())
}

fn run_gradcheck(args: &GradcheckArgs) -> CmdResult {
    let report = gradcheck::run(args.seed)?;
    print!("{}", report.to_text());
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Numeric("gradient check failed".into()))
    }
}

fn gst_map(args: &GstMapArgs) -> CmdResult {
    let cfg = LossConfig {
        s: args.s,
        m: args.m,
        ..LossConfig::default()
    };
    let cells = write_gst_map(&cfg, args.theta_steps, args.desc_steps, &args.out)?;
    println!("wrote {} cells to {}", cells.len(), args.out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Corrupt(a) => corrupt(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => run_gradcheck(a),
        Command::GstMap(a) => gst_map(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Numeric(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_NUMERIC)
        }
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            let code = match e {
                Error::NonFinite(_) => EXIT_NUMERIC,
                _ => EXIT_DATA,
            };
            ExitCode::from(code)
        }
    }
}
