//! Binary model checkpoints.
//!
//! Layout: magic, version, kind tag, a JSON metadata blob (config, step
//! counts, optimizer state) and a flat parameter table of f64 values in
//! little-endian order, so save/load round-trips are bitwise exact.

use crate::error::{Error, Result};
use crate::lm::{LmConfig, LmTrainer, LstmLm};
use crate::nmt::{NmtConfig, NmtModel, NmtTrainer};
use crate::optim::{Adam, RAdam};
use crate::signal::MultiResConfig;
use crate::tensor::{ParamId, ParamStore};
use crate::vqvae::{LossWeights, VqVae, VqVaeConfig, VqVaeTrainer};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use std::io::{Cursor, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"VQTC";
const VERSION: u32 = 1;

pub struct Checkpoint {
    pub kind: String,
    pub meta_json: String,
    pub params: Vec<(String, Vec<usize>, Vec<f64>)>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.write_all(MAGIC)?;
        buf.write_u32::<LittleEndian>(VERSION)?;
        write_str(&mut buf, &self.kind)?;
        write_str(&mut buf, &self.meta_json)?;
        buf.write_u64::<LittleEndian>(self.params.len() as u64)?;
        for (name, shape, data) in &self.params {
            write_str(&mut buf, name)?;
            buf.write_u32::<LittleEndian>(shape.len() as u32)?;
            for &d in shape {
                buf.write_u64::<LittleEndian>(d as u64)?;
            }
            buf.write_u64::<LittleEndian>(data.len() as u64)?;
            for &v in data {
                buf.write_f64::<LittleEndian>(v)?;
            }
        }
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::Checkpoint(format!("{} not found", path.display()))
            } else {
                Error::Io(e)
            }
        })?;
        let mut rd = Cursor::new(bytes);
        let mut magic = [0u8; 4];
        rd.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint(format!("{}: bad magic", path.display())));
        }
        let version = rd.read_u32::<LittleEndian>()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let kind = read_str(&mut rd)?;
        let meta_json = read_str(&mut rd)?;
        let n = rd.read_u64::<LittleEndian>()? as usize;
        let mut params = Vec::with_capacity(n);
        for _ in 0..n {
            let name = read_str(&mut rd)?;
            let rank = rd.read_u32::<LittleEndian>()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(rd.read_u64::<LittleEndian>()? as usize);
            }
            let len = rd.read_u64::<LittleEndian>()? as usize;
            if len != shape.iter().product::<usize>() {
                return Err(Error::Checkpoint(format!("parameter {name}: shape/length mismatch")));
            }
            let mut data = Vec::with_capacity(len);
            for _ in 0..len {
                data.push(rd.read_f64::<LittleEndian>()?);
            }
            params.push((name, shape, data));
        }
        Ok(Checkpoint { kind, meta_json, params })
    }

    pub fn load_expect(path: &Path, kind: &str) -> Result<Self> {
        let ck = Self::load(path)?;
        if ck.kind != kind {
            return Err(Error::KindMismatch { expected: kind.into(), found: ck.kind });
        }
        Ok(ck)
    }
}

fn write_str(buf: &mut Vec<u8>, s: &str) -> Result<()> {
    buf.write_u64::<LittleEndian>(s.len() as u64)?;
    buf.write_all(s.as_bytes())?;
    Ok(())
}

fn read_str(rd: &mut Cursor<Vec<u8>>) -> Result<String> {
    let len = rd.read_u64::<LittleEndian>()? as usize;
    let mut bytes = vec![0u8; len];
    rd.read_exact(&mut bytes)?;
    String::from_utf8(bytes).map_err(|_| Error::Checkpoint("non-UTF-8 string".into()))
}

/// Snapshot a parameter store, prefixing names to keep multiple stores apart
/// inside one checkpoint.
fn capture(store: &ParamStore, prefix: &str) -> Vec<(String, Vec<usize>, Vec<f64>)> {
    store
        .iter()
        .map(|(_, name, t)| (format!("{prefix}{name}"), t.shape.clone(), t.data.clone()))
        .collect()
}

/// Write captured values back into a freshly constructed store; names and
/// shapes must line up exactly.
fn restore(
    store: &mut ParamStore,
    params: &[(String, Vec<usize>, Vec<f64>)],
    prefix: &str,
) -> Result<()> {
    let mut by_name: std::collections::BTreeMap<&str, (&[usize], &[f64])> = params
        .iter()
        .filter_map(|(n, s, d)| {
            n.strip_prefix(prefix).map(|n| (n, (s.as_slice(), d.as_slice())))
        })
        .collect();
    for i in 0..store.len() {
        let id = ParamId(i);
        let name = store.name(id).to_string();
        let Some((shape, data)) = by_name.remove(name.as_str()) else {
            return Err(Error::Checkpoint(format!("missing parameter {prefix}{name}")));
        };
        let t = store.get_mut(id);
        if t.shape != shape {
            return Err(Error::Checkpoint(format!(
                "parameter {prefix}{name}: shape {:?} vs checkpoint {:?}",
                t.shape, shape
            )));
        }
        t.data.copy_from_slice(data);
    }
    if let Some(extra) = by_name.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected parameter {prefix}{extra}")));
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct VqVaeMeta {
    cfg: VqVaeConfig,
    weights: LossWeights,
    stft: MultiResConfig,
    steps_trained: usize,
    g_opt: RAdam,
    d_opt: RAdam,
    #[serde(default)]
    unused_steps: Vec<usize>,
}

pub fn save_vqvae(path: &Path, trainer: &VqVaeTrainer) -> Result<()> {
    let meta = VqVaeMeta {
        cfg: trainer.model.cfg.clone(),
        weights: trainer.weights.clone(),
        stft: trainer.stft_cfg.clone(),
        steps_trained: trainer.model.steps_trained,
        g_opt: trainer.g_opt.clone(),
        d_opt: trainer.d_opt.clone(),
        unused_steps: trainer.unused_steps.clone(),
    };
    let mut params = capture(&trainer.model.gen_store, "gen.");
    params.extend(capture(&trainer.model.disc_store, "disc."));
    Checkpoint {
        kind: "vqvae".into(),
        meta_json: serde_json::to_string(&meta).map_err(|e| Error::Checkpoint(e.to_string()))?,
        params,
    }
    .save(path)
}

pub fn load_vqvae(path: &Path) -> Result<VqVaeTrainer> {
    let ck = Checkpoint::load_expect(path, "vqvae")?;
    let meta: VqVaeMeta =
        serde_json::from_str(&ck.meta_json).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut model = VqVae::new(meta.cfg, 0)?;
    restore(&mut model.gen_store, &ck.params, "gen.")?;
    restore(&mut model.disc_store, &ck.params, "disc.")?;
    model.steps_trained = meta.steps_trained;
    let mut trainer = VqVaeTrainer::new(model, meta.weights, meta.stft);
    trainer.g_opt = meta.g_opt;
    trainer.d_opt = meta.d_opt;
    if !meta.unused_steps.is_empty() {
        trainer.unused_steps = meta.unused_steps;
    }
    Ok(trainer)
}

#[derive(Serialize, Deserialize)]
struct NmtMeta {
    cfg: NmtConfig,
    step: usize,
    opt: Adam,
}

pub fn save_nmt(path: &Path, trainer: &NmtTrainer) -> Result<()> {
    let meta =
        NmtMeta { cfg: trainer.model.cfg.clone(), step: trainer.step, opt: trainer.opt.clone() };
    Checkpoint {
        kind: "nmt".into(),
        meta_json: serde_json::to_string(&meta).map_err(|e| Error::Checkpoint(e.to_string()))?,
        params: capture(&trainer.model.store, ""),
    }
    .save(path)
}

pub fn load_nmt(path: &Path) -> Result<NmtTrainer> {
    let ck = Checkpoint::load_expect(path, "nmt")?;
    let meta: NmtMeta =
        serde_json::from_str(&ck.meta_json).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut model = NmtModel::new(meta.cfg, 0)?;
    restore(&mut model.store, &ck.params, "")?;
    let mut trainer = NmtTrainer::new(model);
    trainer.step = meta.step;
    trainer.opt = meta.opt;
    Ok(trainer)
}

#[derive(Serialize, Deserialize)]
struct LmMeta {
    cfg: LmConfig,
    step: usize,
    opt: Adam,
}

pub fn save_lm(path: &Path, trainer: &LmTrainer) -> Result<()> {
    let meta =
        LmMeta { cfg: trainer.model.cfg.clone(), step: trainer.step, opt: trainer.opt.clone() };
    Checkpoint {
        kind: "lm".into(),
        meta_json: serde_json::to_string(&meta).map_err(|e| Error::Checkpoint(e.to_string()))?,
        params: capture(&trainer.model.store, ""),
    }
    .save(path)
}

pub fn load_lm(path: &Path) -> Result<LmTrainer> {
    let ck = Checkpoint::load_expect(path, "lm")?;
    let meta: LmMeta =
        serde_json::from_str(&ck.meta_json).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut model = LstmLm::new(meta.cfg, 0)?;
    restore(&mut model.store, &ck.params, "")?;
    let mut trainer = LmTrainer::new(model);
    trainer.step = meta.step;
    trainer.opt = meta.opt;
    Ok(trainer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::StftConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn tiny_vqvae_trainer(seed: u64) -> VqVaeTrainer {
        let model = VqVae::new(
            VqVaeConfig {
                num_centroids: 8,
                codebook_dim: 4,
                downsampling_scales: vec![4, 4],
                upsampling_scales: vec![4, 4],
                encoder_channels: vec![4, 8],
                decoder_channels: vec![8, 4],
                num_discriminators: 1,
                disc_channels: vec![4],
                batch_length: 256,
            },
            seed,
        )
        .unwrap();
        VqVaeTrainer::new(
            model,
            LossWeights::default(),
            MultiResConfig { resolutions: vec![StftConfig::new(64, 16, 64)] },
        )
    }

    #[test]
    fn vqvae_round_trip_reproduces_outputs_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vqvae.ckpt");
        let mut trainer = tiny_vqvae_trainer(3);
        let x: Vec<f64> = (0..256).map(|t| 0.4 * (2.0 * PI * t as f64 / 16.0).sin()).collect();
        trainer.train_step(&x).unwrap();
        save_vqvae(&path, &trainer).unwrap();
        let restored = load_vqvae(&path).unwrap();
        assert_eq!(restored.model.steps_trained, 1);
        assert_eq!(
            trainer.model.reconstruct(&x).unwrap(),
            restored.model.reconstruct(&x).unwrap()
        );
        // Optimizer state survives: the next step matches bitwise too.
        let mut a = trainer;
        let mut b = restored;
        a.train_step(&x).unwrap();
        b.train_step(&x).unwrap();
        assert_eq!(a.model.reconstruct(&x).unwrap(), b.model.reconstruct(&x).unwrap());
    }

    #[test]
    fn nmt_round_trip_reproduces_logits_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nmt.ckpt");
        let cfg = NmtConfig {
            encoder_blocks: 1,
            decoder_blocks: 1,
            ff_units: 16,
            attn_dim: 8,
            heads: 2,
            ..NmtConfig::desk(5, 9)
        };
        let mut trainer = NmtTrainer::new(NmtModel::new(cfg, 4).unwrap());
        let pairs = vec![(vec![0usize, 1, 2], vec![1usize, 2, 8])];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        trainer.train_epoch(&pairs, &mut rng).unwrap();
        save_nmt(&path, &trainer).unwrap();
        let restored = load_nmt(&path).unwrap();
        let probe = |t: &NmtTrainer| {
            let mut tape = crate::tape::Tape::new();
            let logits = t
                .model
                .forward_teacher_forced(&mut tape, &[0, 1, 2], &[1, 2, 8], &mut None)
                .unwrap();
            tape.value(logits).to_vec()
        };
        assert_eq!(probe(&trainer), probe(&restored));
        assert_eq!(restored.step, trainer.step);
    }

    #[test]
    fn lm_round_trip_reproduces_scores_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lm.ckpt");
        let cfg = LmConfig { hidden_units: 8, embed_dim: 4, ..LmConfig::desk(7) };
        let mut trainer = LmTrainer::new(LstmLm::new(cfg, 5).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        trainer.train_epoch(&[vec![1, 2, 3, 6]], &mut rng).unwrap();
        save_lm(&path, &trainer).unwrap();
        let restored = load_lm(&path).unwrap();
        assert_eq!(
            trainer.model.logprob_after(&[1, 2]),
            restored.model.logprob_after(&[1, 2])
        );
    }

    #[test]
    fn kind_mismatch_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vqvae.ckpt");
        save_vqvae(&path, &tiny_vqvae_trainer(1)).unwrap();
        assert!(matches!(load_nmt(&path), Err(Error::KindMismatch { .. })));
    }

    #[test]
    fn corrupt_and_missing_files_are_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(Checkpoint::load(&dir.path().join("absent.ckpt")).is_err());
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"JUNKJUNKJUNK").unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }

    #[test]
    fn saving_is_bitwise_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
        let trainer = tiny_vqvae_trainer(9);
        save_vqvae(&p1, &trainer).unwrap();
        save_vqvae(&p2, &trainer).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }
}
