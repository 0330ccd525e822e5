//! Byte-level corpora and batching.

use crate::error::{Error, Result};
use crate::rng::seeded;
use rand::Rng;
use std::path::Path;

/// 256 byte values followed by the special tokens.
pub const BYTE_VOCAB: usize = 259;
pub const BOS: usize = 256;
pub const EOS: usize = 257;
pub const PAD: usize = 258;

/// A byte stream split into training and validation parts.
#[derive(Clone, Debug)]
pub struct Corpus {
    bytes: Vec<u8>,
    split: usize,
}

/// Back-to-back input sequences and their next-token targets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub seq_len: usize,
}

impl Corpus {
    /// The last `val_fraction` of the stream becomes the validation split.
    pub fn from_bytes(bytes: Vec<u8>, val_fraction: f64) -> Result<Self> {
        if bytes.is_empty() {
            return Err(Error::invalid("corpus is empty"));
        }
        if !(0.0..1.0).contains(&val_fraction) {
            return Err(Error::invalid("val_fraction must lie in [0, 1)"));
        }
        let split = bytes.len() - (bytes.len() as f64 * val_fraction).floor() as usize;
        Ok(Corpus { bytes, split })
    }

    pub fn from_file(path: &Path, val_fraction: f64) -> Result<Self> {
        Self::from_bytes(std::fs::read(path)?, val_fraction)
    }

    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    pub fn train_bytes(&self) -> &[u8] {
        &self.bytes[..self.split]
    }

    pub fn val_bytes(&self) -> &[u8] {
        &self.bytes[self.split..]
    }

    /// Up to `len` validation tokens, falling back to the training split
    /// when there is no validation data.
    pub fn sample_tokens(&self, len: usize) -> Vec<usize> {
        let src = if self.val_bytes().is_empty() {
            self.train_bytes()
        } else {
            self.val_bytes()
        };
        src.iter().take(len).map(|&b| b as usize).collect()
    }

    /// `count` evenly spaced windows of `seq_len` tokens from the
    /// validation split (the training split when validation is too short).
    pub fn analysis_windows(&self, count: usize, seq_len: usize) -> Result<Vec<Vec<usize>>> {
        if count == 0 || seq_len == 0 {
            return Err(Error::invalid("need at least one window of positive length"));
        }
        let src = if self.val_bytes().len() >= seq_len {
            self.val_bytes()
        } else {
            self.train_bytes()
        };
        if src.len() < seq_len {
            return Err(Error::invalid(format!("corpus has {} bytes, window needs {seq_len}", src.len())));
        }
        let span = src.len() - seq_len;
        Ok((0..count)
            .map(|i| {
                let start = if count == 1 { 0 } else { span * i / (count - 1) };
                src[start..start + seq_len].iter().map(|&b| b as usize).collect()
            })
            .collect())
    }

    /// Random windows from the training split.
    pub fn sample_batch(&self, rng: &mut impl Rng, batch_size: usize, seq_len: usize) -> Result<Batch> {
        let train = self.train_bytes();
        if train.len() < seq_len + 1 {
            return Err(Error::invalid(format!(
                "training split has {} bytes, need at least {}",
                train.len(),
                seq_len + 1
            )));
        }
        let mut inputs = Vec::with_capacity(batch_size * seq_len);
        let mut targets = Vec::with_capacity(batch_size * seq_len);
        for _ in 0..batch_size {
            let start = rng.random_range(0..=train.len() - seq_len - 1);
            let window = &train[start..start + seq_len + 1];
            inputs.extend(window[..seq_len].iter().map(|&b| b as usize));
            targets.extend(window[1..].iter().map(|&b| b as usize));
        }
        Ok(Batch {
            inputs,
            targets,
            seq_len,
        })
    }
}

/// Deterministic English-like text: pseudo-words drawn from a Zipf-weighted
/// lexicon with a sparse successor table, grouped into sentences.
pub fn synthetic_text(len: usize, seed: u64) -> Vec<u8> {
    const ONSETS: [&str; 16] = ["b", "c", "d", "f", "g", "h", "l", "m", "n", "p", "r", "s", "t", "v", "w", "th"];
    const NUCLEI: [&str; 6] = ["a", "e", "i", "o", "u", "ea"];
    const CODAS: [&str; 8] = ["", "", "n", "r", "s", "t", "ng", "ll"];
    const WORDS: usize = 400;
    const SUCCESSORS: usize = 6;
    let mut rng = seeded(seed);
    let lexicon: Vec<String> = (0..WORDS)
        .map(|_| {
            let syllables = 1 + rng.random_range(0..3);
            (0..syllables)
                .map(|_| {
                    format!(
                        "{}{}{}",
                        ONSETS[rng.random_range(0..ONSETS.len())],
                        NUCLEI[rng.random_range(0..NUCLEI.len())],
                        CODAS[rng.random_range(0..CODAS.len())]
                    )
                })
                .collect()
        })
        .collect();
    let zipf: Vec<f64> = (1..=WORDS).map(|r| 1.0 / r as f64).collect();
    let total: f64 = zipf.iter().sum();
    let draw_word = |rng: &mut crate::rng::SeededRng| {
        let mut u = rng.random::<f64>() * total;
        for (i, w) in zipf.iter().enumerate() {
            if u < *w {
                return i;
            }
            u -= w;
        }
        WORDS - 1
    };
    let successors: Vec<Vec<usize>> = (0..WORDS)
        .map(|_| (0..SUCCESSORS).map(|_| draw_word(&mut rng)).collect())
        .collect();
    let mut out = Vec::with_capacity(len + 64);
    let mut word = draw_word(&mut rng);
    let mut sentence_pos = 0usize;
    while out.len() < len {
        let w = lexicon[word].as_bytes();
        if sentence_pos == 0 {
            out.push(w[0].to_ascii_uppercase());
            out.extend_from_slice(&w[1..]);
        } else {
            out.extend_from_slice(w);
        }
        sentence_pos += 1;
        if sentence_pos >= 4 && rng.random::<f64>() < 0.18 {
            out.extend_from_slice(if rng.random::<f64>() < 0.8 { b". " } else { b"?\n" });
            sentence_pos = 0;
            word = draw_word(&mut rng);
        } else {
            out.push(if rng.random::<f64>() < 0.06 { b',' } else { b' ' });
            if out.last() == Some(&b',') {
                out.push(b' ');
            }
            word = if rng.random::<f64>() < 0.75 {
                successors[word][rng.random_range(0..SUCCESSORS)]
            } else {
                draw_word(&mut rng)
            };
        }
    }
    out.truncate(len);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_text_is_deterministic_ascii() {
        let a = synthetic_text(10_000, 5);
        assert_eq!(a.len(), 10_000);
        assert_eq!(a, synthetic_text(10_000, 5));
        assert_ne!(a, synthetic_text(10_000, 6));
        assert!(a.iter().all(|b| b.is_ascii()));
    }

    #[test]
    fn batches_are_shifted_windows() {
        let corpus = Corpus::from_bytes((0..=255u8).cycle().take(5000).collect(), 0.1).unwrap();
        assert_eq!(corpus.train_bytes().len(), 4500);
        let b = corpus.sample_batch(&mut seeded(1), 3, 16).unwrap();
        assert_eq!(b.inputs.len(), 48);
        for (x, y) in b.inputs.iter().zip(&b.targets) {
            assert_eq!((x + 1) % 256, *y);
        }
        assert_eq!(b, corpus.sample_batch(&mut seeded(1), 3, 16).unwrap());
    }

    #[test]
    fn short_or_empty_corpora_are_rejected() {
        assert!(Corpus::from_bytes(Vec::new(), 0.0).is_err());
        let c = Corpus::from_bytes(vec![1, 2, 3], 0.0).unwrap();
        assert!(c.sample_batch(&mut seeded(0), 1, 8).is_err());
    }
}
