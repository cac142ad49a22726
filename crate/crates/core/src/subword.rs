//! Byte-pair subword units over discrete symbol sequences.
//!
//! Long runs of repeated quantizer symbols compress into merged units, which
//! shortens the sequences the translation model has to produce. Learning is
//! plain greedy BPE: repeatedly merge the most frequent adjacent pair, ties
//! broken by the lexicographically smallest (left, right) ids, so training is
//! deterministic. Pairs are never counted across utterance boundaries.

use crate::error::{Error, Result};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubwordModel {
    base_alphabet: usize,
    /// (left, right, new) in learned order; `new` ids start at `base_alphabet`.
    merges: Vec<(usize, usize, usize)>,
    /// Expansion of every unit into base symbols; ids below `base_alphabet`
    /// are singletons.
    vocab: Vec<Vec<usize>>,
}

impl SubwordModel {
    pub fn base_alphabet(&self) -> usize {
        self.base_alphabet
    }

    pub fn merges(&self) -> &[(usize, usize, usize)] {
        &self.merges
    }

    /// Learned units, excluding sentinels.
    pub fn vocab_len(&self) -> usize {
        self.vocab.len()
    }

    /// Total id range seen by sequence models: learned units plus sentinels.
    pub fn num_ids(&self) -> usize {
        self.vocab.len() + 3
    }

    pub fn pad_id(&self) -> usize {
        self.vocab.len()
    }

    pub fn bos_id(&self) -> usize {
        self.vocab.len() + 1
    }

    pub fn eos_id(&self) -> usize {
        self.vocab.len() + 2
    }

    pub fn expansion(&self, unit: usize) -> Result<&[usize]> {
        self.vocab.get(unit).map(|v| v.as_slice()).ok_or(Error::InvalidUnitId {
            id: unit,
            vocab: self.vocab.len(),
        })
    }

    /// Segment a base-symbol sequence into unit ids and append EOS.
    pub fn encode(&self, symbols: &[usize]) -> Result<Vec<usize>> {
        if let Some(&bad) = symbols.iter().find(|&&s| s >= self.base_alphabet) {
            return Err(Error::OutOfAlphabet { symbol: bad, alphabet: self.base_alphabet });
        }
        let mut units = symbols.to_vec();
        for &(left, right, new_id) in &self.merges {
            apply_merge(&mut units, left, right, new_id);
        }
        units.push(self.eos_id());
        Ok(units)
    }

    /// Expand unit ids back to base symbols. Sentinels are skipped, so
    /// decoding a model-produced sequence (BOS ... EOS) yields the clean
    /// symbol sequence.
    pub fn decode(&self, units: &[usize]) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        for &u in units {
            if u < self.vocab.len() {
                out.extend_from_slice(&self.vocab[u]);
            } else if u < self.num_ids() {
                // PAD / BOS / EOS
            } else {
                return Err(Error::InvalidUnitId { id: u, vocab: self.vocab.len() });
            }
        }
        Ok(out)
    }

    /// Plain-text serialization: first line is the base alphabet size, then
    /// one merge rule per line as "left right new".
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{}", self.base_alphabet);
        for &(l, r, n) in &self.merges {
            let _ = writeln!(s, "{l} {r} {n}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let base: usize = lines
            .next()
            .ok_or_else(|| bad_model("empty model file"))?
            .trim()
            .parse()
            .map_err(|_| bad_model("first line must be the base alphabet size"))?;
        let mut model = SubwordModel {
            base_alphabet: base,
            merges: Vec::new(),
            vocab: (0..base).map(|s| vec![s]).collect(),
        };
        for line in lines {
            let fields: Vec<usize> = line
                .split_whitespace()
                .map(|f| f.parse().map_err(|_| bad_model("non-numeric merge field")))
                .collect::<Result<_>>()?;
            let [left, right, new_id] = fields[..] else {
                return Err(bad_model("merge rules need exactly three fields"));
            };
            if left >= model.vocab.len() || right >= model.vocab.len() {
                return Err(bad_model("merge rule references an unknown unit"));
            }
            if new_id != model.vocab.len() {
                return Err(bad_model("merge rule ids must be consecutive"));
            }
            let mut expansion = model.vocab[left].clone();
            expansion.extend_from_slice(&model.vocab[right]);
            model.vocab.push(expansion);
            model.merges.push((left, right, new_id));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

fn bad_model(msg: &str) -> Error {
    Error::Config { field: "subword model".into(), message: msg.into() }
}

/// Replace every non-overlapping left-to-right occurrence of (left, right).
fn apply_merge(units: &mut Vec<usize>, left: usize, right: usize, new_id: usize) {
    let mut out = Vec::with_capacity(units.len());
    let mut i = 0;
    while i < units.len() {
        if i + 1 < units.len() && units[i] == left && units[i + 1] == right {
            out.push(new_id);
            i += 2;
        } else {
            out.push(units[i]);
            i += 1;
        }
    }
    *units = out;
}

/// Greedy pair merging until `vocab_size` units exist or no adjacent pair
/// occurs at least twice.
pub fn learn_subwords(
    corpus: &[Vec<usize>],
    base_alphabet: usize,
    vocab_size: usize,
) -> Result<SubwordModel> {
    if vocab_size < base_alphabet {
        return Err(Error::VocabTooSmall { requested: vocab_size, base: base_alphabet });
    }
    for seq in corpus {
        if let Some(&bad) = seq.iter().find(|&&s| s >= base_alphabet) {
            return Err(Error::OutOfAlphabet { symbol: bad, alphabet: base_alphabet });
        }
    }
    let mut model = SubwordModel {
        base_alphabet,
        merges: Vec::new(),
        vocab: (0..base_alphabet).map(|s| vec![s]).collect(),
    };
    let mut seqs: Vec<Vec<usize>> = corpus.to_vec();
    while model.vocab.len() < vocab_size {
        let mut counts: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        for seq in &seqs {
            for w in seq.windows(2) {
                *counts.entry((w[0], w[1])).or_insert(0) += 1;
            }
        }
        // Highest count wins; ties go to the lexicographically smallest pair.
        let best = counts.iter().max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)));
        let Some((&pair, &count)) = best else { break };
        if count < 2 {
            break;
        }
        let new_id = model.vocab.len();
        let mut expansion = model.vocab[pair.0].clone();
        expansion.extend_from_slice(&model.vocab[pair.1]);
        model.vocab.push(expansion);
        model.merges.push((pair.0, pair.1, new_id));
        for seq in &mut seqs {
            apply_merge(seq, pair.0, pair.1, new_id);
        }
    }
    Ok(model)
}

/// One utterance per line, space-separated decimal ids.
pub fn write_id_corpus(path: &Path, corpus: &[Vec<usize>]) -> Result<()> {
    let mut s = String::new();
    for seq in corpus {
        let line: Vec<String> = seq.iter().map(|id| id.to_string()).collect();
        let _ = writeln!(s, "{}", line.join(" "));
    }
    std::fs::write(path, s)?;
    Ok(())
}

pub fn read_id_corpus(path: &Path) -> Result<Vec<Vec<usize>>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let seq: Vec<usize> = line
            .split_whitespace()
            .map(|f| {
                f.parse().map_err(|_| Error::Config {
                    field: path.display().to_string(),
                    message: format!("non-numeric id {f:?}"),
                })
            })
            .collect::<Result<_>>()?;
        out.push(seq);
    }
    Ok(out)
}
