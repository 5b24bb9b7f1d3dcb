use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pkcam_core::backbone::{build_backbone, AttentionConfig, BackboneSpec, Integration};
use pkcam_core::complexity::{count_flops, Convention};
use pkcam_core::harness::config::{AttentionChoice, Depth};
use pkcam_core::harness::{
    ablate, ablation_csv, evaluate, gradcheck, load_dataset, load_path, train, AblationMatrix,
    Bundle, Checkpoint, RunConfig, SyntheticSpec,
};
use pkcam_core::pkcam::{Fusion, Interaction, Paths, PkcamConfig};
use pkcam_core::Error;

#[derive(Parser)]
#[command(
    name = "pkcam",
    version,
    about = "Channel attention training, evaluation and cost reports"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "run")]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a raw bundle, an image directory or
    /// `synthetic:CLASSES,PER_CLASS,H,W,SEED`.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: String,
    },
    /// Per-layer parameter and FLOP report.
    Cost {
        #[arg(long, default_value = "18")]
        depth: String,
        #[arg(long, default_value = "none")]
        attention: String,
        #[arg(long, default_value = "all")]
        policy: Integration,
        #[arg(long, default_value = "mac1")]
        convention: Convention,
        /// N,C,H,W; defaults to 1,3,224,224 (ResNets) or 1,3,16,16 (tiny).
        #[arg(long)]
        input_shape: Option<String>,
        #[arg(long, default_value_t = 1000)]
        classes: usize,
        /// Tiny stage widths.
        #[arg(long, default_value = "8,16")]
        widths: String,
        /// Tiny blocks per stage.
        #[arg(long, default_value = "1,1")]
        blocks: String,
        #[arg(long = "R", default_value_t = 1)]
        coverage: usize,
        #[arg(long, default_value = "conv1d")]
        interaction: Interaction,
        #[arg(long, default_value = "conv1d")]
        fusion: Fusion,
        #[arg(long, default_value = "both")]
        paths: Paths,
    },
    /// Finite-difference check of every parameter gradient.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run an interaction × fusion and path ablation matrix.
    Ablate {
        #[arg(long)]
        matrix: PathBuf,
        /// Also write the CSV here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Usage(_) => 2,
        Error::Format { .. } | Error::Io(_) | Error::Data(_) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn list(s: &str) -> Result<Vec<usize>, Error> {
    s.split(',')
        .map(|v| {
            v.trim().parse().map_err(|_| {
                Error::Usage(format!(
                    "expected a comma-separated list of integers, got '{s}'"
                ))
            })
        })
        .collect()
}

fn dataset(spec: &str) -> Result<Bundle, Error> {
    match spec.strip_prefix("synthetic:") {
        Some(rest) => {
            let v = list(rest)?;
            let &[classes, per_class, height, width, seed] = v.as_slice() else {
                return Err(Error::Usage(
                    "synthetic data needs CLASSES,PER_CLASS,H,W,SEED".into(),
                ));
            };
            Bundle::synthetic(&SyntheticSpec {
                classes,
                per_class,
                height,
                width,
                seed: seed as u64,
            })
        }
        None => load_path(Path::new(spec)),
    }
}

fn run(command: Command) -> Result<u8, Error> {
    match command {
        Command::Train { config, seed, out } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            let data = load_dataset(&cfg)?;
            log::info!("dataset {} images, digest {}", data.len(), data.digest());
            let outcome = train(&cfg, &data, Some(&out))?;
            let last = outcome.last();
            println!("{}", pkcam_core::harness::train::METRICS_HEADER);
            println!("{}", last.csv_line());
            println!("wrote {}", out.display());
            Ok(0)
        }
        Command::Eval { ckpt, data } => {
            let checkpoint = Checkpoint::load(&ckpt)?;
            let data = dataset(&data)?;
            let record = evaluate(&checkpoint, &data)?;
            println!("{}", pkcam_core::harness::train::METRICS_HEADER);
            println!("{}", record.csv_line());
            Ok(0)
        }
        Command::Cost {
            depth,
            attention,
            policy,
            convention,
            input_shape,
            classes,
            widths,
            blocks,
            coverage,
            interaction,
            fusion,
            paths,
        } => {
            let depth: Depth = depth.parse()?;
            let spec = match depth {
                Depth::Tiny => BackboneSpec::tiny(&list(&blocks)?, &list(&widths)?, classes)?,
                Depth::ResNet(d) => BackboneSpec::resnet(d, classes)?,
            };
            let attention = match attention.parse::<AttentionChoice>()? {
                AttentionChoice::None => AttentionConfig::None,
                AttentionChoice::Local(k) => AttentionConfig::Local(k),
                AttentionChoice::Pkcam => AttentionConfig::Pkcam(PkcamConfig {
                    coverage,
                    interaction,
                    fusion,
                    paths,
                    ..PkcamConfig::default()
                }),
            };
            let shape = match input_shape {
                Some(s) => {
                    let v = list(&s)?;
                    let &[n, c, h, w] = v.as_slice() else {
                        return Err(Error::Usage(format!(
                            "--input-shape needs N,C,H,W, got '{s}'"
                        )));
                    };
                    [n, c, h, w]
                }
                None if depth == Depth::Tiny => [1, 3, 16, 16],
                None => [1, 3, 224, 224],
            };
            let graph = build_backbone(spec, attention, policy)?;
            let report = count_flops(&graph, shape, convention)?;
            print!("{}", report.to_csv());
            let totals = serde_json::json!({
                "params": report.total_params(),
                "attention_params": report.attention_params(),
                "flops": report.total_flops(),
                "convention": convention.to_string(),
                "input_shape": shape,
            });
            println!("{totals}");
            Ok(0)
        }
        Command::Gradcheck { config } => {
            let cfg = RunConfig::load(&config)?;
            let report = gradcheck(&cfg)?;
            print!("{}", report.to_text());
            Ok(if report.passed() { 0 } else { 1 })
        }
        Command::Ablate { matrix, out } => {
            let text = std::fs::read_to_string(&matrix)?;
            let m = AblationMatrix::parse(&text)?;
            let csv = ablation_csv(&ablate(&m)?);
            if let Some(path) = out {
                std::fs::write(path, &csv)?;
            }
            print!("{csv}");
            Ok(0)
        }
    }
}
