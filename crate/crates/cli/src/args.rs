//! Command-line surface.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "mdq", version, about = "Two-description learned image codec")]
pub struct Cli {
    /// `key = value` training/network configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every randomized step; overrides the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model on a directory of images and write a checkpoint.
    Train(TrainArgs),
    /// Compress an image into an MDQ1 container with two descriptions.
    Encode(EncodeArgs),
    /// Reconstruct an image from whichever descriptions are present.
    Decode(DecodeArgs),
    /// Per-image rate and quality for every decoder, as CSV.
    Eval(EvalArgs),
    /// Transmit a corpus over a channel losing each description with probability p.
    Simulate(SimulateArgs),
    /// Describe a checkpoint or an MDQ1 container.
    Info(InfoArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Checkpoint written at the end.
    #[arg(long)]
    pub output: PathBuf,
    /// Continue from this checkpoint, including optimizer state.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<u64>,
    /// Extra `key=value` overrides applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Per-step loss terms as CSV.
    #[arg(long)]
    pub log_csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EncodeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Drop {
    A,
    B,
}

#[derive(Args, Debug)]
pub struct DecodeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Discard one description before decoding.
    #[arg(long, value_enum)]
    pub drop: Option<Drop>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long = "loss-prob")]
    pub loss_prob: f64,
    #[arg(long, default_value_t = 1000)]
    pub trials: usize,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct InfoArgs {
    #[arg(long)]
    pub input: PathBuf,
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn drop_flag_parses() {
        let c = Cli::parse_from([
            "mdq", "--seed", "4", "decode", "--model", "m", "--input", "i", "--output", "o", "--drop", "a",
        ]);
        assert_eq!(c.seed, Some(4));
        match c.command {
            Command::Decode(d) => assert_eq!(d.drop, Some(Drop::A)),
            other => panic!("{other:?}"),
        }
    }
}
