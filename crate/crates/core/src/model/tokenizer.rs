//! Byte-level tokenizer: ids 0–255 are bytes, plus BOS and EOS.

use super::config::{BOS, EOS};
use crate::{Error, Result};

/// `[BOS, bytes.., EOS]`
pub fn tokenize(text: &[u8]) -> Vec<u32> {
    let mut ids = Vec::with_capacity(text.len() + 2);
    ids.push(BOS);
    ids.extend(text.iter().map(|&b| b as u32));
    ids.push(EOS);
    ids
}

/// Drops specials and returns the bytes; ids at or above `vocab_size` are errors.
pub fn detokenize(ids: &[u32], vocab_size: usize) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(ids.len());
    for &id in ids {
        if id as usize >= vocab_size {
            return Err(Error::UnknownId {
                id,
                vocab: vocab_size,
            });
        }
        if id < 256 {
            out.push(id as u8);
        }
    }
    Ok(out)
}
