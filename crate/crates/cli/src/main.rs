//! `raidx`: generate data, build the retrieval index, train, evaluate,
//! run inference and ablations. Exit status 0 on success, 2 on a
//! configuration error, 3 on a data error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use raidx_core::harness::{
    cmd_ablate, cmd_build_index, cmd_eval, cmd_gen_data, cmd_infer, cmd_train, Arm, HarnessError, ImageSource,
    OutDir, RunConfig,
};

#[derive(Parser)]
#[command(name = "raidx", version, about = "Retrieval-augmented GRPO deepfake detector at toy scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// Key-value config file; unspecified keys keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory holding every artifact of the run.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Overrides the prompt arm: no-rag, static or full-rag.
    #[arg(long, global = true)]
    arm: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset under OUT/dataset.
    GenData,
    /// Embed the training images and write OUT/index.rdxi.
    BuildIndex,
    /// Train with GRPO; writes OUT/ckpt/final.rdxc and OUT/runlog.jsonl.
    Train,
    /// Evaluate the trained checkpoint; writes OUT/report.json.
    Eval,
    /// Judge one image with the trained checkpoint.
    Infer {
        /// 8-bit binary PGM or raw little-endian f32 grid.
        #[arg(long, conflicts_with = "item", required_unless_present = "item")]
        image: Option<PathBuf>,
        /// Index into the stored test split instead of an image file.
        #[arg(long)]
        item: Option<usize>,
        /// Write a jet saliency overlay (PPM) here.
        #[arg(long)]
        saliency: Option<PathBuf>,
    },
    /// Train and evaluate all arms with and without GRPO.
    Ablate,
}

fn load_config(common: &Common) -> Result<RunConfig, HarnessError> {
    let mut config = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
            RunConfig::parse(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(arm) = &common.arm {
        config.arm = arm.parse::<Arm>()?;
    }
    config.validate()?;
    Ok(config)
}

fn json<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serializable")
}

fn run(cli: Cli) -> Result<String, HarnessError> {
    let config = load_config(&cli.common)?;
    let out = OutDir::new(&cli.common.out_dir);
    Ok(match cli.command {
        Command::GenData => format!("dataset {}\n", cmd_gen_data(&config, &out)?),
        Command::BuildIndex => {
            let index = cmd_build_index(&config, &out)?;
            format!("index {} vectors of dim {}\n", index.len(), index.dim())
        }
        Command::Train => json(&cmd_train(&config, &out)?) + "\n",
        Command::Eval => json(&cmd_eval(&config, &out)?) + "\n",
        Command::Infer { image, item, saliency } => {
            let source = match (image, item) {
                (Some(p), _) => ImageSource::File(p),
                (None, Some(i)) => ImageSource::TestItem(i),
                (None, None) => return Err(HarnessError::Config("infer needs --image or --item".into())),
            };
            cmd_infer(&config, &out, &source, saliency.as_deref())?.render()
        }
        Command::Ablate => cmd_ablate(&config, &out)?.to_markdown(),
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("raidx: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
