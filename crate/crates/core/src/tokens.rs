//! Token input: whitespace-separated ids, or raw bytes as a 256-symbol
//! vocabulary.

use std::path::Path;

use crate::error::{Error, Result};

pub const BYTE_VOCAB: usize = 256;

pub fn encode_bytes(text: &str) -> Vec<u32> {
    text.bytes().map(u32::from).collect()
}

/// Inverse of [`encode_bytes`]; invalid UTF-8 is replaced.
pub fn decode_bytes(tokens: &[u32]) -> Result<String> {
    let bytes = tokens
        .iter()
        .map(|&t| u8::try_from(t).map_err(|_| Error::Config(format!("token {t} is not a byte"))))
        .collect::<Result<Vec<u8>>>()?;
    Ok(String::from_utf8_lossy(&bytes).into_owned())
}

pub fn parse_ids(text: &str) -> Result<Vec<u32>> {
    text.split_whitespace()
        .map(|w| w.parse::<u32>().map_err(|_| Error::Config(format!("{w:?} is not a token id"))))
        .collect()
}

pub fn format_ids(tokens: &[u32]) -> String {
    tokens.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ")
}

pub fn read_ids(path: impl AsRef<Path>) -> Result<Vec<u32>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_ids(&text)
}

pub fn check_vocab(tokens: &[u32], vocab: usize) -> Result<()> {
    match tokens.iter().find(|&&t| t as usize >= vocab) {
        Some(t) => Err(Error::Config(format!("token {t} outside vocabulary of {vocab}"))),
        None => Ok(()),
    }
}
