//! Pipeline orchestration: each subcommand reads its declared inputs from
//! the output directory, runs one stage, and writes its artifacts back.
//! Every stage is deterministic given the config, seed and inputs.

use anyhow::{bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use vqtts_core::checkpoint;
use vqtts_core::config::PipelineConfig;
use vqtts_core::corpus::{gen_corpus as make_corpus, SyntheticCorpusSpec};
use vqtts_core::decode::{beam_search, token_error_rate, DecodeConfig, NmtScorer};
use vqtts_core::lm::{LmTrainer, LstmLm};
use vqtts_core::nmt::{NmtModel, NmtTrainer};
use vqtts_core::subword::{learn_subwords, read_id_corpus, write_id_corpus, SubwordModel};
use vqtts_core::vqvae::{crop_batch, VqVae, VqVaeTrainer};
use vqtts_core::wav::{read_wav, write_wav};
use vqtts_core::Error;

pub const SPLITS: [&str; 3] = ["train", "val", "eval"];

/// Everything a stage needs: the parsed config, the artifact directory and
/// the effective seed (config seed unless overridden on the command line).
pub struct Ctx {
    pub cfg: PipelineConfig,
    pub out: PathBuf,
    pub seed: u64,
}

impl Ctx {
    pub fn new(cfg: PipelineConfig, out: PathBuf, seed: Option<u64>) -> Self {
        let seed = seed.unwrap_or(cfg.seed);
        Ctx { cfg, out, seed }
    }

    fn texts_path(&self, split: &str) -> PathBuf {
        self.out.join("corpus").join(format!("{split}.txt"))
    }

    fn wav_path(&self, split: &str, idx: usize) -> PathBuf {
        self.out.join("corpus/wav").join(format!("{split}_{idx:03}.wav"))
    }

    fn tokens_path(&self, split: &str) -> PathBuf {
        self.out.join("tokens").join(format!("{split}.txt"))
    }

    fn vqvae_ckpt(&self) -> PathBuf {
        self.out.join("vqvae.ckpt")
    }

    fn subword_path(&self) -> PathBuf {
        self.out.join("subword.model")
    }

    fn nmt_ckpt(&self) -> PathBuf {
        self.out.join("nmt.ckpt")
    }

    fn lm_ckpt(&self) -> PathBuf {
        self.out.join("lm.ckpt")
    }

    fn log_path(&self, stage: &str) -> PathBuf {
        self.out.join("logs").join(format!("{stage}.log"))
    }
}

fn require(path: &Path, stage: &str) -> Result<()> {
    if !path.exists() {
        return Err(Error::MissingStage {
            path: path.display().to_string(),
            stage: stage.to_string(),
        }
        .into());
    }
    Ok(())
}

fn write_log(path: &Path, lines: &str) -> Result<()> {
    std::fs::create_dir_all(path.parent().unwrap())?;
    std::fs::write(path, lines)?;
    Ok(())
}

fn read_texts(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?;
    Ok(text.lines().map(|l| l.to_string()).collect())
}

fn read_split_waveforms(ctx: &Ctx, split: &str) -> Result<Vec<Vec<f64>>> {
    let texts = read_texts(&ctx.texts_path(split))?;
    let mut out = Vec::with_capacity(texts.len());
    for i in 0..texts.len() {
        let (samples, _) = read_wav(&ctx.wav_path(split, i))?;
        out.push(samples);
    }
    Ok(out)
}

/// Source symbol ids for NMT: characters over the corpus alphabet plus a
/// trailing EOS (id = alphabet size).
fn text_to_source(spec: &SyntheticCorpusSpec, text: &str) -> Result<Vec<usize>> {
    let mut ids = spec.text_to_symbols(text)?;
    ids.push(spec.alphabet_size);
    Ok(ids)
}

pub fn gen_corpus_cmd(ctx: &Ctx) -> Result<()> {
    let corpus = make_corpus(&ctx.cfg.corpus, ctx.seed)?;
    std::fs::create_dir_all(ctx.out.join("corpus/wav"))?;
    for (split, utts) in SPLITS.iter().zip([&corpus.train, &corpus.val, &corpus.eval]) {
        let texts: Vec<&str> = utts.iter().map(|u| u.text.as_str()).collect();
        std::fs::write(ctx.texts_path(split), texts.join("\n") + "\n")?;
        for (i, utt) in utts.iter().enumerate() {
            write_wav(&ctx.wav_path(split, i), &utt.waveform, ctx.cfg.corpus.sample_rate)?;
        }
    }
    println!(
        "wrote corpus: {} train / {} val / {} eval utterances",
        corpus.train.len(),
        corpus.val.len(),
        corpus.eval.len()
    );
    Ok(())
}

/// Downsampling-factor presets selectable with --dsf.
fn dsf_scales(dsf: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    match dsf {
        128 => Ok((vec![4, 4, 4, 2], vec![8, 4, 2, 2])),
        256 => Ok((vec![4, 4, 4, 4], vec![8, 8, 2, 2])),
        other => bail!("unsupported --dsf {other}: presets are 128 and 256"),
    }
}

pub fn train_vqvae_cmd(ctx: &Ctx, dsf: Option<usize>) -> Result<()> {
    require(&ctx.texts_path("train"), "gen-corpus")?;
    let mut cfg = ctx.cfg.vqvae.clone();
    if let Some(dsf) = dsf {
        let (down, up) = dsf_scales(dsf)?;
        if cfg.model.downsampling_scales.len() != down.len() {
            bail!(
                "--dsf {dsf} preset has {} stages but the config declares {} channel stages",
                down.len(),
                cfg.model.encoder_channels.len()
            );
        }
        cfg.model.downsampling_scales = down;
        cfg.model.upsampling_scales = up;
        cfg.model.validate()?;
    }
    let waveforms = read_split_waveforms(ctx, "train")?;
    let model = VqVae::new(cfg.model.clone(), ctx.seed)?;
    let mut trainer = VqVaeTrainer::new(model, cfg.weights, cfg.stft.clone());
    trainer.g_opt = vqtts_core::optim::RAdam::new(cfg.g_lr);
    trainer.d_opt = vqtts_core::optim::RAdam::new(cfg.d_lr);
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed ^ 0x51);
    let mut log = String::new();
    for step in 1..=cfg.train_steps {
        let batch = crop_batch(&waveforms, cfg.model.batch_length, &mut rng);
        let report = trainer.train_step(&batch)?;
        if step % 10 == 0 || step == 1 || step == cfg.train_steps {
            let line = format!(
                "step={} l_rec={:.6} l_cb={:.6} l_cm={:.6} l_adv={:.6} l_g={:.6} l_d={:.6}",
                report.step,
                report.l_rec,
                report.l_cb,
                report.l_cm,
                report.l_adv,
                report.l_g,
                report.l_d
            );
            println!("{line}");
            let _ = writeln!(log, "{line}");
        }
    }
    checkpoint::save_vqvae(&ctx.vqvae_ckpt(), &trainer)?;
    write_log(&ctx.log_path("vqvae"), &log)?;
    println!("saved {}", ctx.vqvae_ckpt().display());
    Ok(())
}

pub fn tokenize_cmd(ctx: &Ctx) -> Result<()> {
    require(&ctx.vqvae_ckpt(), "train-vqvae")?;
    require(&ctx.texts_path("train"), "gen-corpus")?;
    let model = checkpoint::load_vqvae(&ctx.vqvae_ckpt())?.model;
    std::fs::create_dir_all(ctx.out.join("tokens"))?;
    for split in SPLITS {
        let waveforms = read_split_waveforms(ctx, split)?;
        let seqs = model.tokenize_corpus(&waveforms)?;
        let ids: Vec<Vec<usize>> = seqs.into_iter().map(|s| s.ids).collect();
        write_id_corpus(&ctx.tokens_path(split), &ids)?;
        println!("tokenized {split}: {} utterances", ids.len());
    }
    Ok(())
}

pub fn learn_subwords_cmd(ctx: &Ctx, vocab_size: Option<usize>) -> Result<()> {
    require(&ctx.tokens_path("train"), "tokenize")?;
    let corpus = read_id_corpus(&ctx.tokens_path("train"))?;
    let vocab_size = vocab_size.unwrap_or(ctx.cfg.subword.vocab_size);
    let model = learn_subwords(&corpus, ctx.cfg.subword.base_alphabet, vocab_size)?;
    model.save(&ctx.subword_path())?;
    println!(
        "learned {} merges ({} units over base {})",
        model.merges().len(),
        model.vocab_len(),
        model.base_alphabet()
    );
    Ok(())
}

fn load_parallel_pairs(
    ctx: &Ctx,
    split: &str,
    subword: &SubwordModel,
) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    let texts = read_texts(&ctx.texts_path(split))?;
    let tokens = read_id_corpus(&ctx.tokens_path(split))?;
    if texts.len() != tokens.len() {
        bail!(
            "{split}: {} texts but {} token sequences; regenerate with `tokenize`",
            texts.len(),
            tokens.len()
        );
    }
    texts
        .iter()
        .zip(&tokens)
        .map(|(text, toks)| {
            let src = text_to_source(&ctx.cfg.corpus, text)?;
            let tgt = subword.encode(toks)?;
            Ok((src, tgt))
        })
        .collect()
}

pub fn train_nmt_cmd(ctx: &Ctx) -> Result<()> {
    require(&ctx.subword_path(), "learn-subwords")?;
    require(&ctx.tokens_path("train"), "tokenize")?;
    let subword = SubwordModel::load(&ctx.subword_path())?;
    let src_vocab = ctx.cfg.corpus.alphabet_size + 1; // letters + EOS
    let nmt_cfg = ctx.cfg.nmt.to_config(src_vocab, subword.num_ids());
    let train_pairs = load_parallel_pairs(ctx, "train", &subword)?;
    let val_pairs = load_parallel_pairs(ctx, "val", &subword)?;
    let mut trainer = NmtTrainer::new(NmtModel::new(nmt_cfg, ctx.seed)?);
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed ^ 0x52);
    let mut log = String::new();
    for epoch in 1..=ctx.cfg.nmt.epochs {
        let m = trainer.train_epoch(&train_pairs, &mut rng)?;
        if epoch % 10 == 0 || epoch == 1 || epoch == ctx.cfg.nmt.epochs {
            let val = trainer.eval_loss(&val_pairs)?;
            let line = format!(
                "epoch={epoch} loss={:.6} acc={:.4} val_loss={val:.6} lr={:.6e}",
                m.mean_loss, m.token_accuracy, m.last_lr
            );
            println!("{line}");
            let _ = writeln!(log, "{line}");
        }
    }
    checkpoint::save_nmt(&ctx.nmt_ckpt(), &trainer)?;
    write_log(&ctx.log_path("nmt"), &log)?;
    println!("saved {}", ctx.nmt_ckpt().display());
    Ok(())
}

pub fn train_lm_cmd(ctx: &Ctx) -> Result<()> {
    require(&ctx.subword_path(), "learn-subwords")?;
    require(&ctx.tokens_path("train"), "tokenize")?;
    let subword = SubwordModel::load(&ctx.subword_path())?;
    let tokens = read_id_corpus(&ctx.tokens_path("train"))?;
    let corpus: Vec<Vec<usize>> =
        tokens.iter().map(|t| subword.encode(t)).collect::<vqtts_core::Result<_>>()?;
    let lm_cfg = ctx.cfg.lm.to_config(subword.num_ids());
    let mut trainer = LmTrainer::new(LstmLm::new(lm_cfg, ctx.seed)?);
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed ^ 0x53);
    let mut log = String::new();
    for epoch in 1..=ctx.cfg.lm.epochs {
        let loss = trainer.train_epoch(&corpus, &mut rng)?;
        let ppl = trainer.model.perplexity(&corpus)?;
        if epoch % 5 == 0 || epoch == 1 || epoch == ctx.cfg.lm.epochs {
            let line = format!("epoch={epoch} loss={loss:.6} train_ppl={ppl:.3}");
            println!("{line}");
            let _ = writeln!(log, "{line}");
        }
    }
    checkpoint::save_lm(&ctx.lm_ckpt(), &trainer)?;
    write_log(&ctx.log_path("lm"), &log)?;
    println!("saved {}", ctx.lm_ckpt().display());
    Ok(())
}

/// Load the trained models needed for decoding. The subword model and NMT
/// checkpoint must agree on the target vocabulary.
fn load_decode_models(ctx: &Ctx, need_lm: bool) -> Result<(NmtModel, SubwordModel, Option<LstmLm>)> {
    require(&ctx.nmt_ckpt(), "train-nmt")?;
    require(&ctx.subword_path(), "learn-subwords")?;
    let subword = SubwordModel::load(&ctx.subword_path())?;
    let nmt = checkpoint::load_nmt(&ctx.nmt_ckpt())?.model;
    if nmt.cfg.tgt_vocab != subword.num_ids() {
        bail!(
            "nmt.tgt_vocab = {} but subword model provides {} ids; retrain after learn-subwords",
            nmt.cfg.tgt_vocab,
            subword.num_ids()
        );
    }
    let lm = if need_lm {
        require(&ctx.lm_ckpt(), "train-lm")?;
        let lm = checkpoint::load_lm(&ctx.lm_ckpt())?.model;
        if lm.cfg.vocab != subword.num_ids() {
            bail!(
                "lm.vocab = {} but subword model provides {} ids; retrain after learn-subwords",
                lm.cfg.vocab,
                subword.num_ids()
            );
        }
        Some(lm)
    } else {
        None
    };
    Ok((nmt, subword, lm))
}

fn decode_cfg(ctx: &Ctx, beam: Option<usize>, lm_weight: Option<f64>) -> DecodeConfig {
    DecodeConfig::new(
        beam.unwrap_or(ctx.cfg.decode.beam_size),
        lm_weight.unwrap_or(ctx.cfg.decode.lm_weight),
        ctx.cfg.decode.max_length,
    )
}

/// Translate text(s) to subword unit ids; without --text, decodes the whole
/// eval split. Prints one line per utterance: `text<TAB>unit ids`.
pub fn translate_cmd(
    ctx: &Ctx,
    text: Option<String>,
    beam: Option<usize>,
    lm_weight: Option<f64>,
) -> Result<()> {
    let cfg = decode_cfg(ctx, beam, lm_weight);
    let (nmt, _subword, lm) = load_decode_models(ctx, cfg.lm_weight > 0.0)?;
    let texts = match text {
        Some(t) => vec![t],
        None => read_texts(&ctx.texts_path("eval"))?,
    };
    for t in texts {
        let src = text_to_source(&ctx.cfg.corpus, &t)?;
        let mut scorer = NmtScorer::new(&nmt, &src)?;
        let out = beam_search(&mut scorer, lm.as_ref(), &cfg)?;
        let ids: Vec<String> = out.tokens.iter().map(|i| i.to_string()).collect();
        println!("{t}\t{}", ids.join(" "));
    }
    Ok(())
}

pub fn synth_cmd(
    ctx: &Ctx,
    text: &str,
    beam: Option<usize>,
    lm_weight: Option<f64>,
    wav_out: Option<PathBuf>,
) -> Result<PathBuf> {
    let cfg = decode_cfg(ctx, beam, lm_weight);
    let (nmt, subword, lm) = load_decode_models(ctx, cfg.lm_weight > 0.0)?;
    require(&ctx.vqvae_ckpt(), "train-vqvae")?;
    let vqvae = checkpoint::load_vqvae(&ctx.vqvae_ckpt())?.model;
    let src = text_to_source(&ctx.cfg.corpus, text)?;
    let samples =
        vqtts_core::decode::synthesize(&nmt, &subword, &vqvae, lm.as_ref(), &src, &cfg)?;
    let path = wav_out.unwrap_or_else(|| ctx.out.join("synth").join(format!("{text}.wav")));
    std::fs::create_dir_all(path.parent().unwrap())?;
    write_wav(&path, &samples, ctx.cfg.corpus.sample_rate)?;
    println!("synthesized {} samples -> {}", samples.len(), path.display());
    Ok(path)
}

pub const TER_BEAMS: [usize; 4] = [1, 3, 5, 10];
pub const TER_LM_WEIGHTS: [f64; 4] = [0.0, 0.1, 0.2, 0.3];

fn strip_eos(seq: &[usize], eos: usize) -> &[usize] {
    match seq.split_last() {
        Some((&last, rest)) if last == eos => rest,
        _ => seq,
    }
}

/// Mean TER over the eval split for every beam size x LM weight in the
/// sweep; prints the table and returns the rows for programmatic checks.
pub fn eval_ter_cmd(ctx: &Ctx) -> Result<Vec<(usize, f64, f64)>> {
    let (nmt, subword, lm) = load_decode_models(ctx, true)?;
    require(&ctx.tokens_path("eval"), "tokenize")?;
    let texts = read_texts(&ctx.texts_path("eval"))?;
    let tokens = read_id_corpus(&ctx.tokens_path("eval"))?;
    let eos = subword.eos_id();
    let refs: Vec<Vec<usize>> = tokens
        .iter()
        .map(|t| subword.encode(t))
        .collect::<vqtts_core::Result<_>>()?;

    let mut rows = Vec::new();
    let mut header = String::from("beam ");
    for w in TER_LM_WEIGHTS {
        let _ = write!(header, " lm={w:<6}");
    }
    println!("{header}");
    for beam in TER_BEAMS {
        let mut line = format!("{beam:<5}");
        for w in TER_LM_WEIGHTS {
            let cfg = DecodeConfig::new(beam, w, ctx.cfg.decode.max_length);
            let mut total = 0.0;
            for (text, reference) in texts.iter().zip(&refs) {
                let src = text_to_source(&ctx.cfg.corpus, text)?;
                let mut scorer = NmtScorer::new(&nmt, &src)?;
                let out = beam_search(&mut scorer, lm.as_ref(), &cfg)?;
                total += token_error_rate(
                    strip_eos(&out.tokens, eos),
                    strip_eos(reference, eos),
                )?;
            }
            let ter = total / texts.len() as f64;
            let _ = write!(line, " {ter:<8.2}");
            rows.push((beam, w, ter));
        }
        println!("{line}");
    }
    write_log(&ctx.log_path("eval-ter"), &{
        let mut s = String::new();
        for (b, w, t) in &rows {
            let _ = writeln!(s, "beam={b} lm_weight={w} ter={t:.4}");
        }
        s
    })?;
    Ok(rows)
}
