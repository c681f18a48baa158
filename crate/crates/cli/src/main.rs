use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dwc::config::{load_checkpoint, RunConfig, CONFIG_FILE, KEYS};
use dwc::data::{AttributeSchema, Dataset, DatasetParams};
use dwc::eval::{export_attention, Evaluator};
use dwc::gradcheck::{self, DEFAULT_TOLERANCE};
use dwc::trainer::{train, CHECKPOINT_FILE, METRICS_FILE};
use dwc::Error;

const REPORT_FILE: &str = "report.json";
const CURVE_FILE: &str = "recall_curve.csv";
const ATTENTION_FILE: &str = "attention.csv";

/// Mixed-modal image retrieval with a dynamic weighted combiner.
#[derive(Parser, Debug)]
#[command(name = "dwc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic catalog and triplet splits.
    GenData(GenData),
    /// Train a model; writes config echo, metrics and checkpoint to the run directory.
    Train(Train),
    /// Rank the catalog for every validation query of a dataset.
    Eval(Eval),
    /// Run the finite-difference gradient suite.
    Gradcheck(Gradcheck),
    /// Print every configuration key with its default and meaning.
    Config,
}

#[derive(Args, Debug)]
struct GenData {
    /// Attribute schema, `default` or `name=v1,v2;name2=...`.
    #[arg(long, default_value = "default")]
    schema: String,
    /// Number of triplets.
    #[arg(long, default_value_t = 4096)]
    n: usize,
    /// Share of text-dominant (multi-attribute) triplets.
    #[arg(long, default_value_t = 0.5)]
    text_dominant_frac: f64,
    /// Probability of corrupting one value word per text.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    /// Standard deviation of render noise.
    #[arg(long, default_value_t = dwc::data::render::DEFAULT_PIXEL_SIGMA)]
    pixel_sigma: f64,
    /// Share of triplets held out for validation.
    #[arg(long, default_value_t = 0.25)]
    val_fraction: f64,
    /// Append `and get <target values>` to text-dominant texts.
    #[arg(long)]
    get_clause: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct Train {
    /// `key = value` run configuration; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory; overrides the config's `data` key.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Run directory; overrides the config's `out` key.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct Eval {
    /// Run directory or `model.manifest` path.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory; defaults to the one recorded in the run's config.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Report directory.
    #[arg(long)]
    out: PathBuf,
    /// Configuration that shapes the model instead of the run's own config.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct Gradcheck {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Exit codes: 1 for I/O and internal contract failures, 3 for numeric
/// failure, 2 for any other invalid input.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NonFinite { .. } => 3,
        Error::Io { .. } | Error::Contract(_) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Gradcheck(a) => return gradcheck_cmd(a),
        Command::Config => {
            print!("{}", default_config());
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn default_config() -> String {
    let defaults = RunConfig::default().to_kv();
    let mut out = String::new();
    for (key, help) in KEYS {
        out.push_str(&format!(
            "# {help}\n{key} = {}\n",
            defaults.get(key).unwrap_or_default()
        ));
    }
    out
}

fn gen_data(a: GenData) -> dwc::Result<()> {
    let params = DatasetParams {
        schema: AttributeSchema::parse(&a.schema)?,
        n: a.n,
        text_dominant_fraction: a.text_dominant_frac,
        val_fraction: a.val_fraction,
        label_noise: a.noise,
        pixel_sigma: a.pixel_sigma,
        get_clause: a.get_clause,
        seed: a.seed,
    };
    let ds = Dataset::generate(params)?;
    ds.write(&a.out)?;
    println!(
        "wrote {}: {} items, {} train / {} val triplets",
        a.out.display(),
        ds.catalog.len(),
        ds.train.len(),
        ds.val.len()
    );
    Ok(())
}

/// Loads `path` when given, otherwise generates from the config's dataset keys.
fn dataset_for(config: &RunConfig, path: Option<&Path>) -> dwc::Result<Dataset> {
    match path {
        Some(p) => Dataset::load(p),
        None => Dataset::generate(config.dataset.clone()),
    }
}

fn train_cmd(a: Train) -> dwc::Result<()> {
    let mut config = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if a.data.is_some() {
        config.data = a.data;
    }
    if a.out.is_some() {
        config.out = a.out;
    }
    let out = config
        .out
        .clone()
        .ok_or_else(|| Error::Config("no run directory: pass --out or set `out`".into()))?;
    let dataset = dataset_for(&config, config.data.as_deref())?;
    config.dataset = dataset.params.clone();
    fs::create_dir_all(&out).map_err(dwc::error::io_err(&out))?;
    let echo = out.join(CONFIG_FILE);
    fs::write(&echo, config.render()).map_err(dwc::error::io_err(&echo))?;
    let result = train(&config.train, &dataset, Some(&out))?;
    if let Some(last) = result.metrics.iter().rev().find(|m| m.stream == "trainable") {
        println!(
            "epoch {} trainable l_mmc {:.5} l_distill {:.5} l_total {:.5}",
            last.epoch, last.l_mmc, last.l_distill, last.l_total
        );
    }
    println!(
        "wrote {} ({}, {}, {})",
        out.display(),
        CONFIG_FILE,
        METRICS_FILE,
        CHECKPOINT_FILE
    );
    Ok(())
}

fn eval_cmd(a: Eval) -> dwc::Result<()> {
    let shape = a.config.as_deref().map(RunConfig::load).transpose()?;
    let (config, model) = load_checkpoint(&a.checkpoint, shape.as_ref())?;
    let data = a.data.as_deref().or(config.data.as_deref());
    let dataset = dataset_for(&config, data)?;
    if dataset.schema() != &config.dataset.schema {
        return Err(Error::Config("dataset schema differs from the checkpoint's".into()));
    }
    let ev = Evaluator::new(&model, &dataset)?;
    let (report, outputs) = ev.evaluate(&dataset.val, config.integration)?;
    fs::create_dir_all(&a.out).map_err(dwc::error::io_err(&a.out))?;
    let write = |name: &str, body: String| {
        let path = a.out.join(name);
        fs::write(&path, body).map_err(dwc::error::io_err(&path))
    };
    write(REPORT_FILE, report.to_json())?;
    write(CURVE_FILE, report.curve_csv())?;
    export_attention(&outputs, &a.out.join(ATTENTION_FILE))?;
    println!(
        "R@1 {:.2} R@10 {:.2} R@50 {:.2} over {} queries, gallery {}",
        report.r_at_1, report.r_at_10, report.r_at_50, report.num_queries, report.gallery_size
    );
    if let (Some(i), Some(t)) = (report.alpha.image_dominant, report.alpha.text_dominant) {
        println!("mean alpha: image-dominant {i:.4}, text-dominant {t:.4}");
    }
    println!(
        "wrote {} ({REPORT_FILE}, {CURVE_FILE}, {ATTENTION_FILE})",
        a.out.display()
    );
    Ok(())
}

fn gradcheck_cmd(a: Gradcheck) -> ExitCode {
    let cases = match gradcheck::suite(a.seed) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(exit_code(&e));
        }
    };
    let mut ok = true;
    for c in &cases {
        let pass = c.report.passes(DEFAULT_TOLERANCE) && c.report.checked > 0;
        ok &= pass;
        println!(
            "{:<24} {:>5} entries  max rel {:.2e}  {}",
            c.name,
            c.report.checked,
            c.report.max_rel_error,
            if pass { "ok" } else { "FAIL" }
        );
    }
    if ok {
        println!("all {} cases below {DEFAULT_TOLERANCE:e}", cases.len());
        ExitCode::SUCCESS
    } else {
        println!("gradient check failed");
        ExitCode::from(3)
    }
}
