//! CryptoNote block-wise base58: every 8 input bytes become exactly 11
//! characters, and a short final block uses the size table below.

use thiserror::Error;

pub const ALPHABET: &[u8; 58] = b"123456789ABCDEFGHJKLMNPQRSTUVWXYZabcdefghijkmnopqrstuvwxyz";
const BLOCK: usize = 8;
const ENCODED_BLOCK: usize = 11;
/// Encoded length for a block of `i` bytes.
const ENCODED_SIZES: [usize; 9] = [0, 2, 3, 5, 6, 7, 9, 10, 11];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum Base58Error {
    #[error("invalid base58 character {0:?} at {1}")]
    InvalidCharacter(char, usize),
    #[error("invalid final block length {0}")]
    InvalidBlockLength(usize),
    #[error("block {0} overflows its byte size")]
    Overflow(usize),
}

fn digit(c: u8) -> Option<u64> {
    ALPHABET.iter().position(|&a| a == c).map(|p| p as u64)
}

pub fn is_base58_char(c: char) -> bool {
    c.is_ascii() && ALPHABET.contains(&(c as u8))
}

pub fn decode(text: &str) -> Result<Vec<u8>, Base58Error> {
    if let Some((pos, c)) = text.char_indices().find(|&(_, c)| !is_base58_char(c)) {
        return Err(Base58Error::InvalidCharacter(c, pos));
    }
    let bytes = text.as_bytes();
    let mut out = Vec::with_capacity(bytes.len() / ENCODED_BLOCK * BLOCK + BLOCK);
    for (index, chunk) in bytes.chunks(ENCODED_BLOCK).enumerate() {
        let size = ENCODED_SIZES
            .iter()
            .position(|&n| n == chunk.len())
            .ok_or(Base58Error::InvalidBlockLength(chunk.len()))?;
        let mut value: u128 = 0;
        for &c in chunk {
            value = value * 58 + u128::from(digit(c).expect("checked above"));
        }
        if value >> (size * 8) != 0 {
            return Err(Base58Error::Overflow(index));
        }
        out.extend_from_slice(&(value as u64).to_be_bytes()[BLOCK - size..]);
    }
    Ok(out)
}

pub fn encode(data: &[u8]) -> String {
    let mut out = String::with_capacity(data.len() / BLOCK * ENCODED_BLOCK + ENCODED_BLOCK);
    for chunk in data.chunks(BLOCK) {
        let mut value = chunk.iter().fold(0u64, |acc, &b| (acc << 8) | u64::from(b));
        let width = ENCODED_SIZES[chunk.len()];
        let mut block = [b'1'; ENCODED_BLOCK];
        for slot in block[..width].iter_mut().rev() {
            *slot = ALPHABET[(value % 58) as usize];
            value /= 58;
        }
        out.extend(block[..width].iter().map(|&b| b as char));
    }
    out
}
