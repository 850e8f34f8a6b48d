use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rewire_tal::harness::{profile_memory, rows_to_csv, run_training, TrainConfig};
use rewire_tal::rewiring::{check_params, rewire};
use rewire_tal::tal::{load_detections, mean_average_precision, read_annotations, write_dataset, BenchmarkConfig, Protocol};
use rewire_tal::{DType, Error, ExecMode, NetworkSpec, ParameterStore};

/// Reversible rewiring and temporal action localization toolkit.
#[derive(Parser)]
#[command(name = "rewire-tal", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert every residual stage of a spec to reversible wiring.
    Rewire {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Check that this checkpoint loads into the rewired spec unchanged.
        #[arg(long)]
        check_params: Option<PathBuf>,
    },
    /// Train from a JSON config.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Score detections against a ground-truth split directory.
    Eval {
        #[arg(long)]
        preds: PathBuf,
        #[arg(long)]
        gts: PathBuf,
        #[arg(long, value_parser = parse_protocol)]
        protocol: Protocol,
    },
    /// Predicted and measured peak activation memory over a depth sweep, as CSV.
    Profile {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [2usize, 4, 8, 16])]
        depths: Vec<usize>,
        #[arg(long, value_delimiter = ',', value_parser = parse_mode, default_values = ["cache_all", "reversible"])]
        modes: Vec<ExecMode>,
        /// Sequence length; defaults to the spec's input length.
        #[arg(long = "t")]
        t: Option<usize>,
        #[arg(long, default_value_t = 1)]
        batch: usize,
        #[arg(long, value_parser = parse_dtype, default_value = "f32")]
        dtype: DType,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate the synthetic train/val benchmark.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_protocol(s: &str) -> Result<Protocol, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_mode(s: &str) -> Result<ExecMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_dtype(s: &str) -> Result<DType, String> {
    match s {
        "f32" => Ok(DType::F32),
        "f64" => Ok(DType::F64),
        other => Err(format!("unknown dtype {other:?} (f32|f64)")),
    }
}

fn run(cmd: Command) -> rewire_tal::Result<()> {
    match cmd {
        Command::Rewire { input, out, check_params: ckpt } => {
            let spec = NetworkSpec::load(&input)?;
            let rewired = rewire(&spec)?;
            if let Some(path) = ckpt {
                let params = ParameterStore::<f64>::load(&path)?;
                let problems = check_params(&rewired, &params);
                if !problems.is_empty() {
                    return Err(Error::Remap(problems.join(", ")));
                }
            }
            std::fs::write(&out, rewired.to_json())?;
            let m = rewired.meta();
            println!("rewired {} stages, {} blocks -> {}", rewired.stages.len(), m.total_blocks, out.display());
        }
        Command::Train { config } => {
            let cfg = TrainConfig::load(&config)?;
            let summary = run_training(&cfg)?;
            println!("{}", serde_json::to_string(&summary)?);
        }
        Command::Eval { preds, gts, protocol } => {
            let p = load_detections(&preds)?;
            let g = read_annotations(&gts)?;
            let r = mean_average_precision(&p, &g, &protocol.thresholds())?;
            print!("{}", r.to_json()?);
        }
        Command::Profile { spec, depths, modes, t, batch, dtype, out } => {
            let s = NetworkSpec::load(&spec)?;
            let t = t.unwrap_or(s.input_shape.first().copied().unwrap_or(0));
            let rows = profile_memory(&s, &depths, &modes, t, batch, dtype)?;
            let csv = rows_to_csv(&rows);
            match out {
                Some(path) => std::fs::write(path, csv)?,
                None => print!("{csv}"),
            }
        }
        Command::GenData { config, out } => {
            let cfg = BenchmarkConfig::load(&config)?;
            let data = cfg.generate()?;
            write_dataset(&out, &data)?;
            println!("wrote {} train and {} val videos to {}", data.train.len(), data.val.len(), out.display());
        }
    }
    Ok(())
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let text = e.render().to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            eprintln!("error: usage: {}", one_line(first.trim_start_matches("error: ")));
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let message = one_line(&e.to_string());
            let message = message.split_once(": ").map_or(message.as_str(), |(_, rest)| rest);
            match e {
                // unreadable inputs count as usage errors
                Error::Load(_) | Error::Io(_) => {
                    eprintln!("error: usage: {message}");
                    ExitCode::from(2)
                }
                other => {
                    eprintln!("error: {}: {message}", other.kind());
                    ExitCode::from(1)
                }
            }
        }
    }
}
