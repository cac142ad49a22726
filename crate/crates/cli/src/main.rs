use anyhow::Result;
use clap::{Parser, Subcommand};
use std::path::PathBuf;
use vqtts_cli::Ctx;
use vqtts_core::config::PipelineConfig;

#[derive(Parser)]
#[command(name = "vqtts", about = "Two-stage text-to-speech pipeline over quantized waveform tokens")]
struct Cli {
    /// Pipeline configuration (TOML).
    #[arg(long, global = true, default_value = "config.toml")]
    config: PathBuf,
    /// Override the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Artifact directory shared by all stages.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic corpus (texts and waveforms).
    GenCorpus,
    /// Train the waveform quantizer.
    TrainVqvae {
        /// Downsampling factor preset (128 or 256).
        #[arg(long)]
        dsf: Option<usize>,
    },
    /// Map every corpus waveform to quantizer token ids.
    Tokenize,
    /// Learn subword merge rules over the training tokens.
    LearnSubwords {
        #[arg(long)]
        vocab_size: Option<usize>,
    },
    /// Train the text-to-unit translation model.
    TrainNmt,
    /// Train the unit language model used for shallow fusion.
    TrainLm,
    /// Decode text to subword unit ids (eval split unless --text is given).
    Translate {
        #[arg(long)]
        text: Option<String>,
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long)]
        lm_weight: Option<f64>,
    },
    /// Full text-to-waveform synthesis.
    Synth {
        #[arg(long)]
        text: String,
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long)]
        lm_weight: Option<f64>,
        /// Output WAV path (default: <out>/synth/<text>.wav).
        #[arg(long)]
        wav: Option<PathBuf>,
    },
    /// Token error rate on the eval split over a beam size / LM weight sweep.
    EvalTer,
}

fn run(cli: Cli) -> Result<()> {
    let cfg = PipelineConfig::load(&cli.config)?;
    let ctx = Ctx::new(cfg, cli.out, cli.seed);
    match cli.cmd {
        Cmd::GenCorpus => vqtts_cli::gen_corpus_cmd(&ctx),
        Cmd::TrainVqvae { dsf } => vqtts_cli::train_vqvae_cmd(&ctx, dsf),
        Cmd::Tokenize => vqtts_cli::tokenize_cmd(&ctx),
        Cmd::LearnSubwords { vocab_size } => vqtts_cli::learn_subwords_cmd(&ctx, vocab_size),
        Cmd::TrainNmt => vqtts_cli::train_nmt_cmd(&ctx),
        Cmd::TrainLm => vqtts_cli::train_lm_cmd(&ctx),
        Cmd::Translate { text, beam, lm_weight } => {
            vqtts_cli::translate_cmd(&ctx, text, beam, lm_weight)
        }
        Cmd::Synth { text, beam, lm_weight, wav } => {
            vqtts_cli::synth_cmd(&ctx, &text, beam, lm_weight, wav).map(|_| ())
        }
        Cmd::EvalTer => vqtts_cli::eval_ter_cmd(&ctx).map(|_| ()),
    }
}

fn main() {
    if let Err(err) = run(Cli::parse()) {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}
