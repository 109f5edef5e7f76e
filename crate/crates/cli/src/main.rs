use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use concepthash::dataset::Dataset;
use concepthash::model::ConceptHash;
use concepthash::synth::Split;
use concepthash_cli::commands;
use concepthash_cli::config::{resolve, Overrides, RunConfig};
use concepthash_cli::{CliError, Result};

#[derive(Parser)]
#[command(
    name = "concepthash",
    version,
    about = "Concept-token image hashing: train, encode, evaluate, inspect"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// JSON run configuration; the desk-scale preset when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Config override `dotted.key=value`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Disable the quantization loss.
    #[arg(long, global = true)]
    no_quan: bool,
    /// Disable the concept spatial diversity loss.
    #[arg(long, global = true)]
    no_csd: bool,
    /// Disable the concept discrimination loss.
    #[arg(long, global = true)]
    no_cd: bool,
    /// language | random_orthogonal | learnable
    #[arg(long, global = true)]
    center_mode: Option<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Args)]
struct DataArgs {
    /// Dataset directory (manifest.json + images/).
    #[arg(long, conflicts_with = "split")]
    data: Option<PathBuf>,
    /// Use the configured training or query split instead.
    #[arg(long, value_enum)]
    split: Option<SplitArg>,
}

#[derive(Subcommand)]
enum Command {
    /// Train with the configured schedule; writes checkpoint and metrics.jsonl.
    Train,
    /// Hash a dataset into a packed code database.
    Encode {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
        /// Expected code length; must match the checkpoint.
        #[arg(long)]
        bits: Option<usize>,
    },
    /// mAP@R of query codes against a database; prints the JSON report.
    Eval {
        #[arg(long)]
        query: PathBuf,
        #[arg(long)]
        database: PathBuf,
        /// Also report mAP over family labels.
        #[arg(long)]
        family: bool,
        /// Ranking depth; the whole database when omitted.
        #[arg(long = "R", value_name = "R")]
        r: Option<usize>,
        /// With --data, adds attention correlation and localization error.
        #[arg(long, requires = "data")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-image concept heatmap PNGs plus the attention correlation CSV.
    Attn {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export class centers, their signs, and pairwise statistics.
    Centers {
        /// Trained model; otherwise the centers of a fresh model from the config.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the synthetic glyph dataset as a dataset directory.
    Synth {
        #[arg(long, value_enum, default_value = "train")]
        split: SplitArg,
        #[arg(long)]
        out: PathBuf,
    },
}

impl Global {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            sets: self.sets.clone(),
            no_quan: self.no_quan,
            no_csd: self.no_csd,
            no_cd: self.no_cd,
            center_mode: self.center_mode.clone(),
        }
    }

    /// The config with overrides applied but not validated, for commands
    /// that only read data settings from it.
    fn loose_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::desk(),
        };
        self.overrides().apply(&mut cfg)?;
        Ok(cfg)
    }

    fn checkpoint(&self, flag: &Option<PathBuf>) -> Result<PathBuf> {
        match flag {
            Some(p) => Ok(p.clone()),
            None => Ok(self.loose_config()?.paths.checkpoint),
        }
    }

    fn dataset(&self, args: &DataArgs) -> Result<Dataset> {
        if let Some(dir) = &args.data {
            return Ok(Dataset::load_dir(dir)?);
        }
        let split = match args.split.unwrap_or(SplitArg::Test) {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        };
        commands::load_split(&self.loose_config()?, split)
    }
}

fn write_json(value: &impl serde::Serialize, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Internal(e.to_string()))?;
    match out {
        Some(p) => fs::write(p, text + "\n")?,
        None => println!("{text}"),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    match &cli.command {
        Command::Train => {
            let cfg = resolve(g.config.as_deref(), &g.overrides())?;
            let outcome = commands::train_run(&cfg, |m, _| {
                eprintln!(
                    "epoch {:>3}  lr {:.6}  loss {:.4}  [{}]",
                    m.epoch, m.lr, m.loss.total, m.composition
                );
                Ok(())
            })?;
            eprintln!(
                "checkpoint {} sha256 {}",
                outcome.checkpoint.display(),
                commands::file_digest(&outcome.checkpoint)?
            );
        }
        Command::Encode {
            checkpoint,
            data,
            out,
            bits,
        } => {
            let db = commands::cmd_encode(&g.checkpoint(checkpoint)?, &g.dataset(data)?, *bits, out)?;
            eprintln!("{} codes of {} bits -> {}", db.len(), db.bits, out.display());
        }
        Command::Eval {
            query,
            database,
            family,
            r,
            checkpoint,
            data,
            out,
        } => {
            let data = data.as_deref().map(Dataset::load_dir).transpose()?;
            let attention = match (checkpoint, &data) {
                (Some(c), Some(d)) => Some((c.as_path(), d)),
                _ => None,
            };
            let report = commands::cmd_eval(query, database, *family, *r, attention)?;
            write_json(&report, out.as_deref())?;
        }
        Command::Attn {
            checkpoint,
            data,
            limit,
            out,
        } => {
            let summary = commands::cmd_attn(&g.checkpoint(checkpoint)?, &g.dataset(data)?, *limit, out)?;
            eprintln!(
                "{} heatmaps for {} images -> {}",
                summary.heatmaps,
                summary.images,
                out.display()
            );
        }
        Command::Centers { checkpoint, out } => {
            let model = match checkpoint {
                Some(p) => ConceptHash::load(p)?,
                None => commands::build_model(&resolve(g.config.as_deref(), &g.overrides())?)?,
            };
            let stats = commands::cmd_centers(&model, out)?;
            eprintln!(
                "{} centers, mean off-diagonal cosine {:.4}, min Hamming {}",
                stats.num_classes, stats.mean_offdiag_cosine, stats.min_offdiag_hamming
            );
        }
        Command::Synth { split, out } => {
            let cfg = g.loose_config()?;
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Test => Split::Test,
            };
            let data = cfg.synthetic.generate(cfg.seed, split)?;
            data.save_dir(out)?;
            eprintln!("{} images -> {}", data.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match std::panic::catch_unwind(|| run(cli)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
        Err(_) => ExitCode::from(4),
    }
}
