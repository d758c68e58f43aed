//! Token corpora, batching, and a synthetic byte-level language.

use std::fs;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::tokenize;
use crate::{Error, Result};

/// One token stream made of concatenated `[BOS, .., EOS]` documents.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Corpus {
    tokens: Vec<u32>,
}

impl Corpus {
    pub fn from_tokens(tokens: Vec<u32>) -> Self {
        Self { tokens }
    }

    /// Documents are separated by blank lines.
    pub fn from_text(text: &[u8]) -> Self {
        let text = String::from_utf8_lossy(text);
        let tokens = text
            .split("\n\n")
            .map(str::trim)
            .filter(|d| !d.is_empty())
            .flat_map(|d| tokenize(d.as_bytes()))
            .collect();
        Self { tokens }
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Splits off the last `fraction` of the stream.
    pub fn split(&self, fraction: f64) -> (Corpus, Corpus) {
        let cut = ((1.0 - fraction.clamp(0.0, 1.0)) * self.tokens.len() as f64) as usize;
        (
            Corpus::from_tokens(self.tokens[..cut].to_vec()),
            Corpus::from_tokens(self.tokens[cut..].to_vec()),
        )
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len == 0 || self.tokens.len() < len {
            return Err(Error::InvalidConfig(format!(
                "corpus of {} tokens cannot supply windows of {len}",
                self.tokens.len()
            )));
        }
        Ok(())
    }

    /// `batch` windows of `len` tokens at uniformly random offsets.
    pub fn sample(&self, rng: &mut impl Rng, batch: usize, len: usize) -> Result<Vec<Vec<u32>>> {
        self.check_len(len)?;
        let last = self.tokens.len() - len;
        Ok((0..batch)
            .map(|_| {
                let s = rng.random_range(0..=last);
                self.tokens[s..s + len].to_vec()
            })
            .collect())
    }

    /// Up to `count` batches of non-overlapping windows taken from the start.
    pub fn fixed_batches(&self, count: usize, batch: usize, len: usize) -> Result<Vec<Vec<Vec<u32>>>> {
        self.check_len(len)?;
        let windows: Vec<Vec<u32>> = self.tokens.chunks_exact(len).map(<[u32]>::to_vec).collect();
        let batches: Vec<_> = windows.chunks_exact(batch.max(1)).take(count).map(<[Vec<u32>]>::to_vec).collect();
        if batches.is_empty() {
            return Err(Error::InvalidConfig(format!(
                "corpus of {} tokens has no full batch of {batch}×{len}",
                self.tokens.len()
            )));
        }
        Ok(batches)
    }

    /// Raw little-endian `u32` ids.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.tokens.iter().flat_map(|t| t.to_le_bytes()).collect();
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() % 4 != 0 {
            return Err(Error::BadConfig(format!(
                "{}: corpus length {} is not a multiple of 4",
                path.display(),
                bytes.len()
            )));
        }
        let tokens = bytes
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok(Self { tokens })
    }
}

const WORDS: [&str; 24] = [
    "the", "a", "cat", "dog", "sat", "ran", "on", "under", "mat", "log", "red", "big", "small", "fox", "saw", "and",
    "then", "near", "old", "tree", "bird", "sang", "hid", "fast",
];

/// Documents of the form `name: w w w name w w name ...` where words follow a
/// fixed random successor table and a random per-document name recurs.
///
/// Predicting the next word needs local context; completing the name needs
/// look-back to its earlier occurrences.
pub fn synthetic_text(seed: u64, n_docs: usize) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let table: Vec<[usize; 3]> = (0..WORDS.len())
        .map(|_| std::array::from_fn(|_| rng.random_range(0..WORDS.len())))
        .collect();
    let mut out = Vec::new();
    for doc in 0..n_docs {
        if doc > 0 {
            out.extend_from_slice(b"\n\n");
        }
        let name: Vec<u8> = (0..rng.random_range(3..6)).map(|_| rng.random_range(b'A'..=b'Z')).collect();
        out.extend_from_slice(&name);
        out.push(b':');
        let mut w = rng.random_range(0..WORDS.len());
        for _ in 0..rng.random_range(6..12) {
            for _ in 0..rng.random_range(1..4) {
                out.push(b' ');
                out.extend_from_slice(WORDS[w].as_bytes());
                w = *table[w].choose(&mut rng).expect("non-empty");
            }
            out.push(b' ');
            out.extend_from_slice(&name);
        }
        out.push(b'.');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BOS, EOS};

    #[test]
    fn text_documents_are_wrapped() {
        let c = Corpus::from_text(b"AB\n\nC\n\n\n");
        assert_eq!(c.tokens(), &[BOS, 65, 66, EOS, BOS, 67, EOS]);
    }

    #[test]
    fn corpus_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        let c = Corpus::from_tokens(vec![0, 1, 257, u32::MAX]);
        c.save(&path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap().len(), 16);
        assert_eq!(Corpus::load(&path).unwrap(), c);
        std::fs::write(&path, [1u8, 2, 3]).unwrap();
        assert!(Corpus::load(&path).is_err());
    }

    #[test]
    fn synthetic_text_is_deterministic() {
        assert_eq!(synthetic_text(4, 10), synthetic_text(4, 10));
        assert_ne!(synthetic_text(4, 10), synthetic_text(5, 10));
    }

    #[test]
    fn windows_have_requested_shape() {
        let c = Corpus::from_text(&synthetic_text(1, 20));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = c.sample(&mut rng, 3, 17).unwrap();
        assert_eq!(b.len(), 3);
        assert!(b.iter().all(|w| w.len() == 17));
        let f = c.fixed_batches(2, 2, 9).unwrap();
        assert_eq!(f.len(), 2);
        assert_eq!(f[0][1], c.tokens()[9..18].to_vec());
        assert!(c.sample(&mut rng, 1, c.len() + 1).is_err());
    }
}
