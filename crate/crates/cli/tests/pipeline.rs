use std::path::Path;
use vqtts_cli::{
    eval_ter_cmd, gen_corpus_cmd, learn_subwords_cmd, tokenize_cmd, train_lm_cmd, train_nmt_cmd,
    train_vqvae_cmd, Ctx,
};
use vqtts_core::config::{PipelineConfig, SubwordSection};
use vqtts_core::corpus::SyntheticCorpusSpec;
use vqtts_core::subword::SubwordModel;
use vqtts_core::vqvae::VqVaeConfig;

/// Smallest configuration that exercises every stage; training schedules are
/// a handful of steps, so the models are untrained but all artifacts exist.
fn tiny_config() -> PipelineConfig {
    let bin_hz = 16000.0 / 1024.0;
    let mut cfg = PipelineConfig::default();
    cfg.seed = 7;
    cfg.corpus = SyntheticCorpusSpec {
        alphabet_size: 3,
        segment_length: 512,
        frequencies: (1..=3).map(|k| (k * 8) as f64 * bin_hz).collect(),
        fade: 32,
        min_symbols: 2,
        max_symbols: 3,
        train_size: 4,
        val_size: 2,
        eval_size: 2,
        ..SyntheticCorpusSpec::default()
    };
    cfg.vqvae.train_steps = 3;
    cfg.vqvae.model = VqVaeConfig {
        num_centroids: 8,
        codebook_dim: 4,
        encoder_channels: vec![4, 4, 4, 8],
        decoder_channels: vec![4, 4, 4, 4],
        num_discriminators: 1,
        disc_channels: vec![4],
        batch_length: 1024,
        ..VqVaeConfig::default()
    };
    cfg.subword = SubwordSection { base_alphabet: 8, vocab_size: 12 };
    cfg.nmt.epochs = 2;
    cfg.nmt.encoder_blocks = 1;
    cfg.nmt.decoder_blocks = 1;
    cfg.nmt.attn_dim = 16;
    cfg.nmt.ff_units = 32;
    cfg.nmt.heads = 2;
    cfg.lm.epochs = 2;
    cfg.lm.hidden_units = 16;
    cfg.lm.embed_dim = 8;
    cfg.decode.beam_size = 2;
    cfg.decode.max_length = 16;
    cfg.validate().unwrap();
    cfg
}

fn ctx_in(dir: &Path) -> Ctx {
    Ctx::new(tiny_config(), dir.to_path_buf(), None)
}

#[test]
fn stages_require_their_upstream_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let ctx = ctx_in(dir.path());

    let err = train_vqvae_cmd(&ctx, None).unwrap_err().to_string();
    assert!(err.contains("gen-corpus"), "unexpected error: {err}");

    let err = tokenize_cmd(&ctx).unwrap_err().to_string();
    assert!(err.contains("train-vqvae"), "unexpected error: {err}");

    let err = learn_subwords_cmd(&ctx, None).unwrap_err().to_string();
    assert!(err.contains("tokenize"), "unexpected error: {err}");

    let err = train_nmt_cmd(&ctx).unwrap_err().to_string();
    assert!(err.contains("learn-subwords"), "unexpected error: {err}");
}

#[test]
fn gen_corpus_writes_all_splits_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let ctx = ctx_in(dir.path());
    gen_corpus_cmd(&ctx).unwrap();

    for split in vqtts_cli::SPLITS {
        let texts = std::fs::read_to_string(dir.path().join(format!("corpus/{split}.txt"))).unwrap();
        let n = texts.lines().count();
        assert!(n > 0);
        for i in 0..n {
            assert!(dir.path().join(format!("corpus/wav/{split}_{i:03}.wav")).exists());
        }
    }

    let first = std::fs::read(dir.path().join("corpus/wav/train_000.wav")).unwrap();
    gen_corpus_cmd(&ctx).unwrap();
    let second = std::fs::read(dir.path().join("corpus/wav/train_000.wav")).unwrap();
    assert_eq!(first, second);
}

#[test]
fn full_stage_chain_produces_consistent_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let ctx = ctx_in(dir.path());

    gen_corpus_cmd(&ctx).unwrap();
    train_vqvae_cmd(&ctx, None).unwrap();
    assert!(dir.path().join("vqvae.ckpt").exists());
    assert!(dir.path().join("logs/vqvae.log").exists());

    tokenize_cmd(&ctx).unwrap();
    let train_tokens =
        std::fs::read_to_string(dir.path().join("tokens/train.txt")).unwrap();
    assert_eq!(train_tokens.lines().count(), 4);
    for id in train_tokens.split_whitespace() {
        assert!(id.parse::<usize>().unwrap() < 8);
    }

    learn_subwords_cmd(&ctx, None).unwrap();
    let sw = SubwordModel::load(&dir.path().join("subword.model")).unwrap();
    assert_eq!(sw.base_alphabet(), 8);
    assert!(sw.vocab_len() <= 12);

    train_nmt_cmd(&ctx).unwrap();
    train_lm_cmd(&ctx).unwrap();
    assert!(dir.path().join("nmt.ckpt").exists());
    assert!(dir.path().join("lm.ckpt").exists());

    let rows = eval_ter_cmd(&ctx).unwrap();
    assert_eq!(rows.len(), vqtts_cli::TER_BEAMS.len() * vqtts_cli::TER_LM_WEIGHTS.len());
    for (_, _, ter) in &rows {
        assert!(ter.is_finite() && *ter >= 0.0);
    }
}

#[test]
fn committed_configs_parse_and_match_presets() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../..");
    let desk = PipelineConfig::load(&root.join("configs/desk-demo.toml")).unwrap();
    assert_eq!(desk, PipelineConfig::desk_demo());
    let reference = PipelineConfig::load(&root.join("configs/reference.toml")).unwrap();
    assert_eq!(reference, PipelineConfig::reference());
}

#[test]
fn dsf_override_rejects_unknown_presets() {
    let dir = tempfile::tempdir().unwrap();
    let ctx = ctx_in(dir.path());
    gen_corpus_cmd(&ctx).unwrap();
    let err = train_vqvae_cmd(&ctx, Some(64)).unwrap_err().to_string();
    assert!(err.contains("64"), "unexpected error: {err}");
}
