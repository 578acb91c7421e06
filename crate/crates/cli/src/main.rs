use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod corpus_dir;
mod streams;

#[derive(Parser, Debug)]
#[command(name = "ssl-hybrid", version, about = "Hybrid ASR with self-supervised speech features on a synthetic corpus")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalArgs {
    /// Experiment config (JSON). Defaults apply to missing keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed; overrides the config and every stage seed derived from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for utterance-level parallelism.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum System {
    Fbk,
    #[value(name = "fbk+bn")]
    FbkBn,
    #[value(name = "fbk+bn+artic")]
    FbkBnArtic,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic corpus: manifest, lexicon, vocabulary, audio.
    GenCorpus {
        #[arg(long)]
        out: PathBuf,
    },
    /// Self-supervised pretraining on the training audio.
    Pretrain {
        #[arg(long)]
        corpus: PathBuf,
        /// Output parameter file.
        #[arg(long)]
        out: PathBuf,
    },
    /// CTC fine-tuning with the bottleneck adapter.
    Finetune {
        #[arg(long)]
        corpus: PathBuf,
        /// Pretrained parameters.
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write FBK, bottleneck and SSL posterior streams for every utterance.
    ExtractBn {
        #[arg(long)]
        corpus: PathBuf,
        /// Fine-tuned parameters.
        #[arg(long)]
        params: PathBuf,
        /// Directory receiving fbk/, bn/ and w2v/.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train acoustic-to-articulatory inversion on bottleneck features and
    /// write predicted trajectories to <feats>/artic/.
    Invert {
        #[arg(long)]
        corpus: PathBuf,
        /// Directory written by extract-bn.
        #[arg(long)]
        feats: PathBuf,
        /// Directory receiving the model.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a frame-level acoustic model.
    TrainAm {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        feats: PathBuf,
        #[arg(long, value_enum, default_value = "fbk")]
        system: System,
        /// Directory receiving the model.
        #[arg(long)]
        out: PathBuf,
        /// Also write test-set posteriors to <out>/post/.
        #[arg(long)]
        emit: bool,
    },
    /// Decode one posterior stream per utterance; JSON lines.
    Decode {
        /// Posterior file or directory.
        #[arg(long)]
        streams: PathBuf,
        #[arg(long)]
        lexicon: PathBuf,
        /// Token vocabulary; defaults to vocab.json beside the lexicon.
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// JSON-lines output; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Frame-level interpolation of several systems, then decoding.
    JointDecode {
        /// Comma-separated posterior files or directories, one per system.
        #[arg(long, value_delimiter = ',', required = true)]
        streams: Vec<PathBuf>,
        /// Ratio such as 3:2, one weight per stream.
        #[arg(long)]
        weights: Option<String>,
        #[arg(long)]
        lexicon: PathBuf,
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// N-best depth for --lists.
        #[arg(long)]
        nbest: Option<usize>,
        /// Also write the first-pass N-best lists as JSON lines.
        #[arg(long)]
        lists: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rescore first-pass N-best lists with SSL CTC scores.
    Rescore {
        /// N-best lists from joint-decode.
        #[arg(long)]
        lists: PathBuf,
        /// SSL posterior file or directory.
        #[arg(long)]
        ssl: PathBuf,
        /// Weight on the SSL cost.
        #[arg(long, requires = "beta", conflicts_with = "weights")]
        alpha: Option<f64>,
        /// Weight on the first-pass cost.
        #[arg(long, requires = "alpha", conflicts_with = "weights")]
        beta: Option<f64>,
        /// Ratio alpha:beta such as 2:9.
        #[arg(long)]
        weights: Option<String>,
        /// Also write the rescored lists.
        #[arg(long)]
        rescored: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// WER per subset, condition and cell.
    Score {
        /// Hypotheses as JSON lines.
        #[arg(long)]
        hyps: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// JSON report; a table goes to stdout either way.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    // clap exits with 2 on usage errors.
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match commands::run(&cli.global, cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
