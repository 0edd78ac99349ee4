use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use spseg::config::{KeyValues, PipelineConfig};
use spseg::evaluation::DiceReport;
use spseg::pipeline::{EvalSummary, Run};
use spseg::Error;

const CONFIG_ENV: &str = "SPSEG_CONFIG";

#[derive(Parser, Debug)]
#[command(name = "spseg", version, about = "Coarse-to-fine superpixel organ segmentation")]
struct Cli {
    /// Config file of key=value lines (default: $SPSEG_CONFIG).
    #[arg(long, global = true, env = CONFIG_ENV)]
    config: Option<PathBuf>,

    /// Override a config key, e.g. --set slic.region_size=12 (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Built-in defaults that the config file and overrides apply on top of.
    #[arg(long, global = true, value_enum, default_value_t = Preset::Desk)]
    preset: Preset,

    /// Run directory holding every stage's artifacts.
    #[arg(long, global = true, default_value = "run")]
    dir: PathBuf,

    /// Worker threads (default: all cores, or 1 with --deterministic).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Single-threaded, bit-reproducible execution.
    #[arg(long, global = true)]
    deterministic: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    /// Compact 32×32 network and short schedule, sized for a CPU.
    Desk,
    /// 64×64 network, eight deformations, 100 epochs.
    Full,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic phantom volumes and masks.
    Phantom {
        /// Number of cases (overrides phantom.count).
        #[arg(long)]
        count: Option<usize>,
    },
    /// SLIC superpixels for every slice of every case.
    Superpixels,
    /// Train the two-level random-forest cascade.
    RfTrain,
    /// Apply the cascade: response maps and retained superpixels.
    RfApply,
    /// Build the augmented patch datasets.
    Augment,
    /// Train the ConvNet.
    Train,
    /// Probability maps, smoothed maps and final masks for test cases.
    Infer,
    /// Dice reports per stage plus threshold sweeps.
    Eval,
    /// Threshold sweeps only.
    Sweep,
    /// Every stage in order.
    Run,
    /// Print the effective configuration.
    Config,
}

fn build_config(cli: &Cli) -> anyhow::Result<KeyValues> {
    let base = match cli.preset {
        Preset::Desk => PipelineConfig::desk_scale(),
        Preset::Full => PipelineConfig::default(),
    };
    let mut kv = base.to_kv();
    if let Some(path) = &cli.config {
        let file = KeyValues::load(path)?;
        for key in file.keys() {
            kv.set(key, file.get(key).expect("key listed"));
        }
    }
    for o in &cli.overrides {
        let Some((k, v)) = o.split_once('=') else {
            bail!(Error::Config(format!("override `{o}` is not KEY=VALUE")));
        };
        kv.set(k.trim(), v.trim());
    }
    if let Command::Phantom { count: Some(n) } = cli.command {
        kv.set("phantom.count", n);
    }
    Ok(kv)
}

fn print_reports(reports: &[DiceReport]) {
    for r in reports {
        println!(
            "{:<18} mean {:.4}  std {:.4}  min {:.4}  max {:.4}",
            r.label(),
            r.mean,
            r.std,
            r.min,
            r.max
        );
    }
}

fn print_operating_points(s: &EvalSummary) {
    for (variant, t, d, _) in &s.operating_points {
        println!("{variant:<18} best threshold {t:.2}  mean dice {d:.4}");
    }
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let threads = match (cli.threads, cli.deterministic) {
        (Some(n), _) => Some(n),
        (None, true) => Some(1),
        (None, false) => None,
    };
    if let Some(n) = threads {
        if n == 0 {
            bail!(Error::InvalidArgument("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let kv = build_config(cli)?;
    let run = Run::new(&cli.dir, kv)?;
    match &cli.command {
        Command::Phantom { .. } => {
            run.phantom()?;
            println!("wrote {} cases to {}", run.config().phantom_count, run.dir().display());
        }
        Command::Superpixels => run.superpixels()?,
        Command::RfTrain => {
            let r = run.rf_train()?;
            for (level, f) in [(1, &r.level1), (2, &r.level2)] {
                let oob = f.oob_error.map_or("n/a".to_string(), |e| format!("{e:.4}"));
                println!("level {level}: {} samples, out-of-bag error {oob}", f.samples);
            }
        }
        Command::RfApply => run.rf_apply()?,
        Command::Augment => {
            let (train, validation) = run.augment()?;
            println!("training patches: {}", train.len());
            if let Some(v) = validation {
                println!("validation patches: {}", v.len());
            }
        }
        Command::Train => {
            let trace = run.train()?;
            if let Some(last) = trace.last() {
                println!(
                    "epoch {} loss {:.5} train accuracy {:.4}",
                    last.epoch, last.loss, last.train_accuracy
                );
            }
        }
        Command::Infer => run.infer()?,
        Command::Eval => {
            let s = run.eval()?;
            print_reports(&s.reports);
            print_operating_points(&s);
        }
        Command::Sweep => {
            let curves = run.sweep()?;
            for c in &curves {
                let (t, d) = c.argmax();
                println!("{:<18} best threshold {t:.2}  mean dice {d:.4}", c.variant);
            }
        }
        Command::Run => {
            let s = run.run_all()?;
            print_reports(&s.reports);
            print_operating_points(&s);
        }
        Command::Config => print!("{}", run.config().to_kv().render()),
    }
    Ok(())
}

/// 1 for usage and configuration mistakes, 2 for bad or missing data.
fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::InvalidArgument(_)) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
