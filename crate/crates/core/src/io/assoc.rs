//! Association matrix dump: `"SPAS" | u32 N | u32 M | N*M f32`, little-endian.

use super::FormatError;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SPAS";

pub fn encode(assoc: &Tensor) -> Result<Vec<u8>, FormatError> {
    let [n, m] = *assoc.shape() else {
        return Err(FormatError::malformed("association", format!("expected [N, M], got {:?}", assoc.shape())));
    };
    let dim = |v: usize| u32::try_from(v).map_err(|_| FormatError::malformed("association", "dimension exceeds u32"));
    let mut out = Vec::with_capacity(12 + 4 * n * m);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&dim(n)?.to_le_bytes());
    out.extend_from_slice(&dim(m)?.to_le_bytes());
    for &v in assoc.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Tensor, FormatError> {
    let kind = "association";
    let header = bytes.get(..12).ok_or(FormatError::Truncated { kind })?;
    if &header[..4] != MAGIC {
        return Err(FormatError::malformed(kind, "bad magic"));
    }
    let word = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().expect("4 bytes")) as usize;
    let (n, m) = (word(4), word(8));
    let len = n
        .checked_mul(m)
        .and_then(|v| v.checked_mul(4))
        .ok_or_else(|| FormatError::malformed(kind, "dimensions overflow"))?;
    let body = bytes.get(12..12 + len).ok_or(FormatError::Truncated { kind })?;
    if bytes.len() != 12 + len {
        return Err(FormatError::malformed(kind, "trailing bytes"));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
        .collect();
    Tensor::new(&[n, m], data).map_err(|e| FormatError::malformed(kind, e.to_string()))
}
