//! WebAssembly binary parsing down to code-section function bodies, and the
//! order-independent code-base digest used as a miner fingerprint.

use sha1::{Digest as _, Sha1};
use sha2::Sha256;
use thiserror::Error;

use crate::telemetry::{Digest32, WasmArtifact};

pub const WASM_MAGIC: [u8; 4] = [0x00, 0x61, 0x73, 0x6D];
pub const WASM_VERSION: u32 = 1;

const SECTION_CUSTOM: u8 = 0;
const SECTION_CODE: u8 = 10;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WasmError {
    #[error("LEB128 sequence at offset {0} is unterminated")]
    Unterminated(usize),
    #[error("LEB128 value at offset {0} overflows 64 bits")]
    Overflow(usize),
    #[error("bad magic {0:02x?}")]
    BadMagic(Vec<u8>),
    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated input at offset {offset}: need {needed} more bytes")]
    Truncated { offset: usize, needed: usize },
    #[error("malformed size at offset {offset}: {reason}")]
    MalformedSize { offset: usize, reason: &'static str },
    #[error("no function bodies to hash")]
    Empty,
}

/// Decodes one LEB128 integer from the front of `bytes`.
///
/// Returns the value and the number of bytes consumed. Signed values are
/// sign-extended from the last byte's bit 6.
pub fn decode_leb128(bytes: &[u8], signed: bool) -> Result<(i128, usize), WasmError> {
    let mut result: u64 = 0;
    let mut shift = 0u32;
    for (i, &byte) in bytes.iter().enumerate() {
        if i >= 10 {
            return Err(WasmError::Overflow(0));
        }
        let low = u64::from(byte & 0x7f);
        if shift == 63 {
            // tenth byte: only one payload bit is left
            let allowed = if signed { matches!(low, 0 | 0x7f) } else { low <= 1 };
            if !allowed {
                return Err(WasmError::Overflow(0));
            }
        }
        result |= low << shift;
        shift += 7;
        if byte & 0x80 == 0 {
            let consumed = i + 1;
            if signed {
                let value = if shift < 64 && byte & 0x40 != 0 {
                    (result | (!0u64 << shift)) as i64
                } else {
                    result as i64
                };
                return Ok((i128::from(value), consumed));
            }
            return Ok((i128::from(result), consumed));
        }
    }
    Err(WasmError::Unterminated(0))
}

fn offset_err(err: WasmError, offset: usize) -> WasmError {
    match err {
        WasmError::Unterminated(_) => WasmError::Unterminated(offset),
        WasmError::Overflow(_) => WasmError::Overflow(offset),
        other => other,
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], WasmError> {
        if n > self.remaining() {
            return Err(WasmError::Truncated {
                offset: self.pos,
                needed: n - self.remaining(),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, WasmError> {
        Ok(self.take(1)?[0])
    }

    fn u32_leb(&mut self) -> Result<u32, WasmError> {
        let start = self.pos;
        let (value, used) =
            decode_leb128(&self.bytes[self.pos..], false).map_err(|e| match e {
                WasmError::Unterminated(_) => WasmError::Truncated { offset: start, needed: 1 },
                other => offset_err(other, start),
            })?;
        if used > 5 {
            return Err(WasmError::MalformedSize {
                offset: start,
                reason: "u32 encoded in more than 5 bytes",
            });
        }
        self.pos += used;
        u32::try_from(value).map_err(|_| WasmError::MalformedSize {
            offset: start,
            reason: "value exceeds u32",
        })
    }

    fn size(&mut self) -> Result<usize, WasmError> {
        let at = self.pos;
        let n = self.u32_leb()? as usize;
        if n > self.remaining() {
            return Err(WasmError::Truncated {
                offset: at,
                needed: n - self.remaining(),
            });
        }
        Ok(n)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WasmModuleParsed {
    pub version: u32,
    /// Code-section entries verbatim (locals vector + expression), without the size prefix.
    pub function_bodies: Vec<Vec<u8>>,
    pub custom_sections_skipped: usize,
}

/// Walks the section list and extracts every code-section function body.
pub fn parse_module(bytes: &[u8]) -> Result<WasmModuleParsed, WasmError> {
    let mut r = Reader::new(bytes);
    let magic = r.take(4).map_err(|_| WasmError::BadMagic(bytes.to_vec()))?;
    if magic != WASM_MAGIC {
        return Err(WasmError::BadMagic(magic.to_vec()));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    if version != WASM_VERSION {
        return Err(WasmError::UnsupportedVersion(version));
    }

    let mut parsed = WasmModuleParsed {
        version,
        function_bodies: Vec::new(),
        custom_sections_skipped: 0,
    };
    while r.remaining() > 0 {
        let id = r.u8()?;
        let size = r.size()?;
        let payload = r.take(size)?;
        match id {
            SECTION_CODE => parse_code_section(payload, r.pos - size, &mut parsed.function_bodies)?,
            SECTION_CUSTOM => parsed.custom_sections_skipped += 1,
            _ => {}
        }
    }
    Ok(parsed)
}

fn parse_code_section(payload: &[u8], base: usize, out: &mut Vec<Vec<u8>>) -> Result<(), WasmError> {
    let mut r = Reader::new(payload);
    let count = r.u32_leb().map_err(|e| rebase(e, base))?;
    for _ in 0..count {
        let size = r.size().map_err(|e| rebase(e, base))?;
        let body = r.take(size).map_err(|e| rebase(e, base))?;
        out.push(body.to_vec());
    }
    if r.remaining() != 0 {
        return Err(WasmError::MalformedSize {
            offset: base + r.pos,
            reason: "code section has trailing bytes",
        });
    }
    Ok(())
}

fn rebase(err: WasmError, base: usize) -> WasmError {
    match err {
        WasmError::Truncated { offset, needed } => WasmError::Truncated { offset: offset + base, needed },
        WasmError::MalformedSize { offset, reason } => WasmError::MalformedSize { offset: offset + base, reason },
        WasmError::Overflow(o) => WasmError::Overflow(o + base),
        WasmError::Unterminated(o) => WasmError::Unterminated(o + base),
        other => other,
    }
}

/// What gets concatenated before the final SHA-256.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum HashMode {
    /// Raw function bodies.
    #[default]
    Bodies,
    /// The 20-byte SHA-1 digests of the bodies.
    Sha1Digests,
}

pub fn sha1_hex(body: &[u8]) -> String {
    hex::encode(Sha1::digest(body))
}

/// Order-independent digest over all function bodies of a visit.
///
/// Bodies are ordered by the ascending hex SHA-1 of each body, concatenated,
/// and the concatenation is hashed with SHA-256. Duplicates are kept.
pub fn codebase_hash(artifacts: &[WasmArtifact]) -> Result<Digest32, WasmError> {
    codebase_hash_with(artifacts, HashMode::Bodies)
}

pub fn codebase_hash_with(artifacts: &[WasmArtifact], mode: HashMode) -> Result<Digest32, WasmError> {
    let mut keyed: Vec<(String, &[u8])> = artifacts
        .iter()
        .flat_map(|a| a.function_bodies.iter())
        .map(|b| (sha1_hex(b), b.as_slice()))
        .collect();
    if keyed.is_empty() {
        return Err(WasmError::Empty);
    }
    keyed.sort();
    let mut hasher = Sha256::new();
    for (sha1, body) in &keyed {
        match mode {
            HashMode::Bodies => hasher.update(body),
            HashMode::Sha1Digests => hasher.update(hex::decode(sha1).expect("own hex")),
        }
    }
    Ok(Digest32(hasher.finalize().into()))
}

/// Helpers for assembling small modules, used by fixtures and the testbed.
pub mod build {
    /// Unsigned LEB128 encoding.
    pub fn uleb(mut value: u64) -> Vec<u8> {
        let mut out = Vec::new();
        loop {
            let byte = (value & 0x7f) as u8;
            value >>= 7;
            if value == 0 {
                out.push(byte);
                return out;
            }
            out.push(byte | 0x80);
        }
    }

    fn section(id: u8, payload: &[u8]) -> Vec<u8> {
        let mut out = vec![id];
        out.extend(uleb(payload.len() as u64));
        out.extend_from_slice(payload);
        out
    }

    /// A module with one `() -> ()` type, one function per body, a custom
    /// name section, and the given bodies in its code section.
    pub fn module(bodies: &[Vec<u8>]) -> Vec<u8> {
        let mut out = super::WASM_MAGIC.to_vec();
        out.extend(super::WASM_VERSION.to_le_bytes());
        out.extend(section(1, &[0x01, 0x60, 0x00, 0x00]));
        let mut funcs = uleb(bodies.len() as u64);
        funcs.extend(std::iter::repeat_n(0u8, bodies.len()));
        out.extend(section(3, &funcs));
        let mut code = uleb(bodies.len() as u64);
        for body in bodies {
            code.extend(uleb(body.len() as u64));
            code.extend_from_slice(body);
        }
        out.extend(section(10, &code));
        out.extend(section(0, b"\x04name"));
        out
    }
}
