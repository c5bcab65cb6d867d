//! Byte-level tokenizer: ids 0–255 are raw bytes, 256 marks the start of a
//! document.

use crate::error::{Error, Result};

pub const BOS: usize = 256;
pub const VOCAB_SIZE: usize = 257;

/// `BOS` followed by one id per byte.
pub fn tokenize(bytes: &[u8]) -> Result<Vec<usize>> {
    if bytes.is_empty() {
        return Err(Error::Ingestion("empty corpus".into()));
    }
    let mut ids = Vec::with_capacity(bytes.len() + 1);
    ids.push(BOS);
    ids.extend(bytes.iter().map(|&b| b as usize));
    Ok(ids)
}

/// Inverse of [`tokenize`]; document markers are dropped.
pub fn detokenize(ids: &[usize]) -> Result<Vec<u8>> {
    ids.iter()
        .filter(|&&t| t != BOS)
        .map(|&t| {
            u8::try_from(t).map_err(|_| Error::Label {
                label: t,
                classes: VOCAB_SIZE,
            })
        })
        .collect()
}

/// Lossy text rendering of generated ids.
pub fn render(ids: &[usize]) -> String {
    let bytes: Vec<u8> = ids.iter().filter(|&&t| t < 256).map(|&t| t as u8).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}
