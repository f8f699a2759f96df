//! Command-line front end: synthetic data generation, training,
//! evaluation, and attention-weight inspection.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use hipama::checkpoint::load_model;
use hipama::data::{generate_synthetic, load_dataset, write_dataset, UtteranceSample};
use hipama::error::{Error, Result};
use hipama::inspect::attention_tables;
use hipama::metrics::evaluate;
use hipama::model::ModelConfig;
use hipama::train::{train_multi, RunConfig};

#[derive(Parser)]
#[command(name = "hipama", version, about = "Multi-aspect, multi-granularity pronunciation assessment")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset file.
    GenSynthetic {
        /// Number of utterances.
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Gaussian noise scale added to the GOP encoding.
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        /// Output dataset path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model per seed; writes checkpoints, logs, and reports.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset and write a metric report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Report output path (defaults to stdout only).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Emit mean multi-aspect attention-weight tables for a checkpoint.
    InspectAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Table output path (defaults to stdout only).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// Training dataset path.
    #[arg(long)]
    train: PathBuf,
    /// Held-out dataset for validation and reporting.
    #[arg(long)]
    test: Option<PathBuf>,
    /// JSON run configuration; flags override file values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Train a single seed.
    #[arg(long, conflicts_with = "seeds")]
    seed: Option<u64>,
    /// Comma-separated seed list.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Disable the hierarchical wiring (all levels read the phoneme encoder).
    #[arg(long)]
    no_hierarchy: bool,
    /// Disable multi-aspect attention.
    #[arg(long)]
    no_multi_aspect: bool,
    #[arg(long)]
    max_len: Option<usize>,
    /// Output directory for checkpoints, logs, and reports.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenSynthetic { n, seed, noise, out } => cmd_gen_synthetic(n, seed, noise, &out),
        Command::Train(args) => cmd_train(args),
        Command::Eval { checkpoint, data, out } => cmd_eval(&checkpoint, &data, out.as_deref()),
        Command::InspectAttention { checkpoint, data, out } => {
            cmd_inspect_attention(&checkpoint, &data, out.as_deref())
        }
    }
}

fn cmd_gen_synthetic(n: usize, seed: u64, noise: f64, out: &Path) -> Result<()> {
    if n == 0 {
        return Err(Error::Config("--n must be at least 1".into()));
    }
    if noise < 0.0 {
        return Err(Error::Config("--noise must be non-negative".into()));
    }
    let (samples, info) = generate_synthetic(n, seed, noise);
    write_dataset(&samples, out)?;
    println!("wrote {} utterances to {} ({info})", samples.len(), out.display());
    Ok(())
}

fn resolve_run_config(args: &TrainArgs) -> Result<RunConfig> {
    let mut run = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            serde_json::from_str::<RunConfig>(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        run.seeds = vec![seed];
    }
    if let Some(seeds) = &args.seeds {
        run.seeds = seeds.clone();
    }
    if let Some(epochs) = args.epochs {
        run.epochs = epochs;
    }
    if let Some(lr) = args.lr {
        run.learning_rate = lr;
    }
    if let Some(bs) = args.batch_size {
        run.batch_size = bs;
    }
    if let Some(ml) = args.max_len {
        run.model.max_len = ml;
    }
    if args.no_hierarchy {
        run.model.hierarchical = false;
    }
    if args.no_multi_aspect {
        run.model.multi_aspect_attention = false;
    }
    run.train_path = Some(args.train.clone());
    run.test_path = args.test.clone();
    run.out_dir = Some(args.out.clone());
    run.validate()?;
    Ok(run)
}

/// Writes to stdout and the run log file at once.
struct Tee<'a> {
    file: &'a mut dyn Write,
}

impl Write for Tee<'_> {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        std::io::stdout().write_all(buf)?;
        self.file.write_all(buf)?;
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        std::io::stdout().flush()?;
        self.file.flush()
    }
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let run = resolve_run_config(&args)?;
    let train = load_dataset(&args.train, run.model.n_phones)?;
    let test: Option<Vec<UtteranceSample>> = match &args.test {
        Some(p) => Some(load_dataset(p, run.model.n_phones)?),
        None => None,
    };
    std::fs::create_dir_all(&args.out)?;
    let mut log_file = std::io::BufWriter::new(std::fs::File::create(args.out.join("run.log"))?);
    let mut log = Tee { file: &mut log_file };
    writeln!(
        log,
        "run config: {}",
        serde_json::to_string(&run).expect("run config serializes")
    )?;
    let (outcomes, summary) = train_multi(&run, &train, test.as_deref(), &mut log)?;
    for (seed, outcome) in &outcomes {
        std::fs::write(args.out.join(format!("seed{seed}-final.ckpt")), &outcome.final_checkpoint)?;
        std::fs::write(args.out.join(format!("seed{seed}-best.ckpt")), &outcome.best_checkpoint)?;
    }
    if let Some(summary) = &summary {
        for (seed, report) in &summary.per_seed {
            std::fs::write(
                args.out.join(format!("seed{seed}-report.txt")),
                report_text(&run.model, &report.to_text()),
            )?;
        }
        std::fs::write(args.out.join("summary.txt"), summary.to_text())?;
    }
    log.flush()?;
    Ok(())
}

fn report_text(config: &ModelConfig, body: &str) -> String {
    format!(
        "# config: {}\n{}",
        serde_json::to_string(config).expect("config serializes"),
        body
    )
}

fn cmd_eval(checkpoint: &Path, data: &Path, out: Option<&Path>) -> Result<()> {
    let model = load_model(checkpoint)?;
    let samples = load_dataset(data, model.config.n_phones).map_err(|e| match e {
        Error::DataFormat { path, line, msg } => Error::Mismatch(format!(
            "dataset does not fit the checkpoint (n_phones={}): {path}:{line}: {msg}",
            model.config.n_phones
        )),
        other => other,
    })?;
    let report = evaluate(&model, &samples, 25)?;
    let text = report_text(&model.config, &report.to_text());
    if let Some(path) = out {
        std::fs::write(path, &text)?;
    }
    print!("{text}");
    Ok(())
}

fn cmd_inspect_attention(checkpoint: &Path, data: &Path, out: Option<&Path>) -> Result<()> {
    let model = load_model(checkpoint)?;
    let samples = load_dataset(data, model.config.n_phones)?;
    let tables = attention_tables(&model, &samples, 25)?;
    let text = tables.to_tsv();
    if let Some(path) = out {
        std::fs::write(path, &text)?;
    }
    print!("{text}");
    Ok(())
}
