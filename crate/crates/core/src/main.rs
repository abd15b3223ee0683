use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use s2mlp::analysis;
use s2mlp::configfile;
use s2mlp::gradsuite;
use s2mlp::model::{self, Mode};
use s2mlp::training::{self, ToySpec, TrainConfig};
use s2mlp::{load_weights, save_weights, ModelConfig, Preset, Tensor};

#[derive(Parser)]
#[command(name = "s2mlp", version, about = "Spatial-shift MLP backbone tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportFormat {
    Table,
    Tsv,
}

#[derive(clap::Args)]
struct ModelArgs {
    /// Named architecture: Small/7, Medium/7, Small/14 or Tiny.
    #[arg(long, value_parser = parse_preset, conflicts_with = "config")]
    preset: Option<Preset>,
    /// Model configuration file (`key = value` lines with `[stage]` sections).
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ModelArgs {
    fn resolve(&self) -> s2mlp::Result<(ModelConfig, usize)> {
        match (&self.preset, &self.config) {
            (_, Some(path)) => Ok((configfile::load_config(path)?, 224)),
            (Some(p), None) => Ok((p.config(), p.default_input())),
            (None, None) => Ok((Preset::Tiny.config(), Preset::Tiny.default_input())),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Print parameter and FLOP counts.
    Describe {
        #[command(flatten)]
        model: ModelArgs,
        /// Input resolution as HxW.
        #[arg(long, value_parser = parse_size)]
        input: Option<(usize, usize)>,
        #[arg(long, value_enum, default_value = "table")]
        format: ReportFormat,
    },
    /// Run inference and print one line of logits per image.
    Forward {
        #[command(flatten)]
        model: ModelArgs,
        /// Weight archive; freshly initialized from --seed when absent.
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Raw planar image file.
        #[arg(long, conflicts_with = "random")]
        input: Option<PathBuf>,
        /// Use a random normal image.
        #[arg(long)]
        random: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compare tape gradients against central differences.
    Gradcheck {
        #[arg(long, value_parser = parse_preset, default_value = "Tiny")]
        preset: Preset,
        #[arg(long, default_value_t = gradsuite::DEFAULT_TOLERANCE)]
        tol: f64,
        #[arg(long, default_value_t = gradsuite::DEFAULT_STEP)]
        step: f64,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
    },
    /// Train on the synthetic quadrant dataset and save the weights.
    TrainToy {
        #[arg(long, value_parser = parse_preset, default_value = "Tiny")]
        preset: Preset,
        #[arg(long, default_value_t = 2000)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write freshly initialized weights.
    Init {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_preset(s: &str) -> Result<Preset, String> {
    s.parse::<Preset>().map_err(|e| e.to_string())
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let dim = |v: &str| v.trim().parse::<usize>().map_err(|_| format!("bad size {s:?}"));
    Ok((dim(h)?, dim(w)?))
}

fn run(cli: Cli) -> s2mlp::Result<ExitCode> {
    match cli.command {
        Command::Describe { model, input, format } => {
            let (cfg, side) = model.resolve()?;
            let report = analysis::count_flops(&cfg, input.unwrap_or((side, side)))?;
            match format {
                ReportFormat::Table => print!("{}", report.to_table()),
                ReportFormat::Tsv => print!("{}", report.to_tsv()),
            }
        }
        Command::Forward {
            model: m,
            weights,
            input,
            random,
            seed,
        } => {
            let (cfg, side) = m.resolve()?;
            let weights = match weights {
                Some(path) => load_weights(path)?,
                None => model::init_weights(&cfg, seed)?,
            };
            model::check_weights(&weights, &cfg)?;
            let image = match input {
                Some(path) if !random => configfile::read_raw_image(path)?,
                _ => {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    Tensor::from_fn([1, side, side, cfg.in_channels], |_| {
                        StandardNormal.sample(&mut rng)
                    })?
                }
            };
            let logits = model::model_forward(&image, &weights, &cfg, &mut Mode::Eval)?;
            for row in logits.data().chunks(cfg.num_classes) {
                let line: Vec<String> = row.iter().map(|v| format!("{v:.6e}")).collect();
                println!("{}", line.join("\t"));
            }
        }
        Command::Gradcheck {
            preset,
            tol,
            step,
            seeds,
        } => {
            let outcomes = gradsuite::run_gradient_suite(&preset.config(), &seeds, tol, step)?;
            let mut failed = 0;
            for o in &outcomes {
                let verdict = if o.passed { "ok" } else { "FAIL" };
                println!("{verdict}\t{}\tseed={}\t{:.3e}", o.name, o.seed, o.max_rel_error);
                failed += usize::from(!o.passed);
            }
            println!("{} checks, {failed} failed (tol {tol:e})", outcomes.len());
            if failed > 0 {
                return Ok(ExitCode::from(1));
            }
        }
        Command::TrainToy {
            preset,
            steps,
            seed,
            out,
        } => {
            let cfg = preset.config();
            let side = preset.default_input();
            let data = training::make_toy_dataset(&ToySpec {
                side,
                channels: cfg.in_channels,
                seed,
                ..ToySpec::default()
            })?;
            let hyper = TrainConfig {
                steps,
                seed,
                ..TrainConfig::default()
            };
            let outcome = training::train_loop(&cfg, &data, &hyper)?;
            print!("{}", training::format_history(&outcome.history));
            let acc = training::accuracy(&outcome.weights, &cfg, &data)?;
            eprintln!("train accuracy {:.2}%", acc * 100.0);
            save_weights(&outcome.weights, &out)?;
        }
        Command::Init { model: m, seed, out } => {
            let (cfg, _) = m.resolve()?;
            save_weights(&model::init_weights(&cfg, seed)?, &out)?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
