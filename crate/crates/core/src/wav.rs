//! Minimal single-channel 16-bit PCM WAV reader/writer.

use crate::error::{Error, Result};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use std::io::{Cursor, Write};
use std::path::Path;

/// Write float samples in [-1, 1] as mono 16-bit PCM. Out-of-range values
/// clamp rather than wrap.
pub fn write_wav(path: &Path, samples: &[f64], sample_rate: u32) -> Result<()> {
    let data_len = (samples.len() * 2) as u32;
    let mut buf = Vec::with_capacity(44 + samples.len() * 2);
    buf.write_all(b"RIFF")?;
    buf.write_u32::<LittleEndian>(36 + data_len)?;
    buf.write_all(b"WAVE")?;
    buf.write_all(b"fmt ")?;
    buf.write_u32::<LittleEndian>(16)?; // PCM fmt chunk size
    buf.write_u16::<LittleEndian>(1)?; // PCM
    buf.write_u16::<LittleEndian>(1)?; // mono
    buf.write_u32::<LittleEndian>(sample_rate)?;
    buf.write_u32::<LittleEndian>(sample_rate * 2)?; // byte rate
    buf.write_u16::<LittleEndian>(2)?; // block align
    buf.write_u16::<LittleEndian>(16)?; // bits per sample
    buf.write_all(b"data")?;
    buf.write_u32::<LittleEndian>(data_len)?;
    for &s in samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        buf.write_i16::<LittleEndian>(v)?;
    }
    std::fs::write(path, buf)?;
    Ok(())
}

/// Read a mono 16-bit PCM WAV written by [`write_wav`] (or equivalent).
pub fn read_wav(path: &Path) -> Result<(Vec<f64>, u32)> {
    let bytes = std::fs::read(path)?;
    let bad = |msg: &str| Error::Config {
        field: path.display().to_string(),
        message: msg.to_string(),
    };
    if bytes.len() < 44 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(bad("not a RIFF/WAVE file"));
    }
    let mut rd = Cursor::new(&bytes[12..]);
    let mut sample_rate = 0u32;
    loop {
        let mut tag = [0u8; 4];
        if std::io::Read::read_exact(&mut rd, &mut tag).is_err() {
            return Err(bad("no data chunk"));
        }
        let size = rd.read_u32::<LittleEndian>()? as usize;
        match &tag {
            b"fmt " => {
                let fmt = rd.read_u16::<LittleEndian>()?;
                let channels = rd.read_u16::<LittleEndian>()?;
                sample_rate = rd.read_u32::<LittleEndian>()?;
                let _byte_rate = rd.read_u32::<LittleEndian>()?;
                let _align = rd.read_u16::<LittleEndian>()?;
                let bits = rd.read_u16::<LittleEndian>()?;
                if fmt != 1 || channels != 1 || bits != 16 {
                    return Err(bad("expected mono 16-bit PCM"));
                }
                rd.set_position(rd.position() + (size as u64).saturating_sub(16));
            }
            b"data" => {
                let n = size / 2;
                let mut samples = Vec::with_capacity(n);
                for _ in 0..n {
                    samples.push(rd.read_i16::<LittleEndian>()? as f64 / 32767.0);
                }
                return Ok((samples, sample_rate));
            }
            _ => rd.set_position(rd.position() + size as u64),
        }
    }
}
