//! `lift`: corpus → build → encode → train → eval → interp → report.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use lift_core::corpus::DatasetId;
use lift_core::evalharness::{ContextMode, DecodeMode};

#[derive(Parser, Debug)]
#[command(
    name = "lift",
    version,
    about = "Longitudinal instruction fine-tuning pipeline"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Raw corpus utilities.
    #[command(subcommand)]
    Corpus(CorpusCommand),
    /// Split corpora, fit the tokenizer and render the three stage shards.
    Build(BuildArgs),
    /// Encode stage shards into token ids, masks and label stamps.
    Encode(RunArgs),
    /// Run the three-stage curriculum.
    Train(TrainArgs),
    /// Evaluate a checkpoint (or the base model) with k-shot prompts.
    Eval(EvalArgs),
    /// Linear probes on region representations.
    Probe(InterpArgs),
    /// Attention routing of the prediction position.
    Attn(InterpArgs),
    /// History activation patching.
    Patch(PatchArgs),
    /// Collect eval and interp outputs into table and figure CSVs.
    Report(RunArgs),
}

#[derive(Subcommand, Debug)]
enum CorpusCommand {
    /// Standardize a raw JSONL file into timelines plus statistics.
    Build {
        #[arg(long)]
        dataset: DatasetId,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write schema-compatible synthetic raw records, one JSONL per dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// `desk` (small) or `paper` (published timeline counts).
        #[arg(long, default_value = "desk", value_parser = ["desk", "paper"])]
        shape: String,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Limit to one dataset.
        #[arg(long)]
        dataset: Option<DatasetId>,
    },
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long)]
    run: PathBuf,
}

#[derive(Args, Debug)]
struct BuildArgs {
    /// Directory of raw `<dataset>.jsonl` files.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    run: PathBuf,
    /// TOML config; `LIFT_<KEY>` environment variables override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    run: PathBuf,
    /// Resume at this stage from the previous stage's best checkpoint.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=3))]
    from_stage: u8,
}

#[derive(Args, Debug)]
struct ModelArgs {
    /// Run directory; inferred from `--ckpt` when omitted.
    #[arg(long)]
    run: Option<PathBuf>,
    /// Checkpoint directory; defaults to the best stage-3 checkpoint.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Evaluate the frozen base model (no adapters, no conditioning).
    #[arg(long, conflicts_with = "ckpt")]
    base: bool,
    #[arg(long)]
    dataset: DatasetId,
    #[arg(long)]
    max_examples: Option<usize>,
    /// Demo and sampling seed; defaults to the run seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value = "0,1,3", value_delimiter = ',')]
    shots: Vec<usize>,
    #[arg(long, default_value = "rank")]
    mode: DecodeMode,
    /// CMV demo selection.
    #[arg(long)]
    context: Option<ContextMode>,
    /// Average F1 over every declared label instead of gold ∪ predicted.
    #[arg(long)]
    full_label_set: bool,
    #[arg(long, default_value_t = 8)]
    max_new_tokens: usize,
}

#[derive(Args, Debug)]
struct InterpArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// `a..b` (exclusive) or a comma list; defaults to every layer.
    #[arg(long, value_parser = parse_layers)]
    layers: Option<::std::vec::Vec<usize>>,
    #[arg(long, default_value_t = 0)]
    shots: usize,
    #[arg(long, default_value_t = 5)]
    folds: usize,
}

#[derive(Args, Debug)]
struct PatchArgs {
    #[command(flatten)]
    interp: InterpArgs,
    #[arg(long, default_value_t = 150)]
    n: usize,
}

fn parse_layers(s: &str) -> Result<Vec<usize>, String> {
    if let Some((a, b)) = s.split_once("..") {
        let a: usize = a.parse().map_err(|_| format!("bad layer range {s}"))?;
        let b: usize = b.parse().map_err(|_| format!("bad layer range {s}"))?;
        if a >= b {
            return Err(format!("empty layer range {s}"));
        }
        return Ok((a..b).collect());
    }
    s.split(',')
        .map(|x| x.trim().parse().map_err(|_| format!("bad layer {x}")))
        .collect()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_target(false)
        .init();
    let result = match cli.command {
        Command::Corpus(CorpusCommand::Build {
            dataset,
            input,
            out,
        }) => commands::corpus_build(dataset, &input, &out),
        Command::Corpus(CorpusCommand::Synth {
            out,
            shape,
            seed,
            dataset,
        }) => commands::corpus_synth(&out, &shape, seed, dataset),
        Command::Build(a) => commands::build(&a.corpus, &a.run, a.config.as_deref(), a.seed),
        Command::Encode(a) => commands::encode(&a.run),
        Command::Train(a) => commands::train(&a.run, a.from_stage),
        Command::Eval(a) => commands::eval(&a),
        Command::Probe(a) => commands::probe(&a),
        Command::Attn(a) => commands::attn(&a),
        Command::Patch(a) => commands::patch(&a),
        Command::Report(a) => commands::report(&a.run),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let chain: Vec<String> = e.chain().map(|c| c.to_string()).collect();
            eprintln!(
                "{}",
                serde_json::json!({ "error": chain[0], "causes": &chain[1..] })
            );
            ExitCode::from(1)
        }
    }
}
