use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use cochstream_cli::commands::{eval, invert, lm, synth, tokenize, wavcoch};
use cochstream_cli::{init_threads, Report};

#[derive(Debug, Parser)]
#[command(name = "cochstream", version, about = "Cochlear tokenization, language modelling and evaluation")]
struct Cli {
    /// Also write the JSON report to this file.
    #[arg(long, global = true)]
    report: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Tokenize a WAV file or a directory of WAVs into `.ctok` streams.
    Tokenize(tokenize::TokenizeArgs),
    /// Compute a cochleagram (`.cgrm` + `.pgm`).
    Cochleagram(tokenize::CochleagramArgs),
    /// Train a WavCoch tokenizer.
    TrainWavcoch(wavcoch::TrainWavCochArgs),
    /// Train an AuriStream language model on `.ctok` streams.
    LmTrain(lm::LmTrainArgs),
    /// Continue a token prompt with an AuriStream model.
    Generate(lm::GenerateArgs),
    /// Invert a cochleagram to a waveform by gradient descent.
    Invert(invert::InvertArgs),
    /// Linear phoneme/word probe over AuriStream embeddings.
    Probe(eval::ProbeArgs),
    /// Spoken word-similarity correlation.
    Ssimi(eval::SsimiArgs),
    /// Token/phoneme purity of a WavCoch tokenizer.
    Purity(wavcoch::PurityArgs),
    /// Bit-width ablation of the WavCoch codebook.
    AblateVocab(wavcoch::AblateVocabArgs),
    /// Prompted rollouts rendered as cochleagram figures and audio.
    RolloutFigure(invert::RolloutArgs),
    /// Write the synthetic labelled corpus.
    SynthCorpus(synth::SynthCorpusArgs),
}

fn dispatch(command: Command) -> Result<Report> {
    match command {
        Command::Tokenize(a) => tokenize::execute(a),
        Command::Cochleagram(a) => tokenize::execute_cochleagram(a),
        Command::TrainWavcoch(a) => wavcoch::execute_train(a),
        Command::LmTrain(a) => lm::execute_train(a),
        Command::Generate(a) => lm::execute_generate(a),
        Command::Invert(a) => invert::execute_invert(a),
        Command::Probe(a) => eval::execute_probe(a),
        Command::Ssimi(a) => eval::execute_ssimi(a),
        Command::Purity(a) => wavcoch::execute_purity(a),
        Command::AblateVocab(a) => wavcoch::execute_ablate(a),
        Command::RolloutFigure(a) => invert::execute_rollout(a),
        Command::SynthCorpus(a) => synth::execute(a),
    }
}

fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    let report = dispatch(cli.command)?;
    if let Some(path) = &cli.report {
        report.write(path)?;
    }
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let chain: Vec<String> = e.chain().map(|c| c.to_string()).collect();
            let err = serde_json::json!({ "error": e.to_string(), "causes": &chain[1..] });
            eprintln!("{}", serde_json::to_string_pretty(&err).unwrap_or_else(|_| format!("{e:#}")));
            ExitCode::FAILURE
        }
    }
}
