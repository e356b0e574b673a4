//! Byte-level vocabulary: ids 0..=255 are raw bytes, followed by two
//! special tokens.

pub const BOS: u32 = 256;
pub const EOS: u32 = 257;
pub const BYTE_VOCAB_SIZE: usize = 258;

pub fn encode(text: &str) -> Vec<u32> {
    text.bytes().map(u32::from).collect()
}

/// Bytes back to text, dropping special tokens and replacing invalid UTF-8.
pub fn decode(tokens: &[u32]) -> String {
    let bytes: Vec<u8> = tokens.iter().filter_map(|&t| u8::try_from(t).ok()).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}
