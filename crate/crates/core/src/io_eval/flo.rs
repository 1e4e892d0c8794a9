use std::path::Path;

use crate::error::{Error, Result};
use crate::scene_model::{FlowField, Grid};

pub const FLO_MAGIC: f32 = 202021.25;
const HEADER_BYTES: usize = 12;

/// Middlebury `.flo`: magic, width, height, then interleaved `(u, v)` as
/// little-endian `f32`. Values are narrowed to `f32`.
pub fn encode_flo(flow: &FlowField) -> Vec<u8> {
    let (w, h) = flow.dims();
    let mut out = Vec::with_capacity(HEADER_BYTES + 8 * w * h);
    out.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    out.extend_from_slice(&(w as i32).to_le_bytes());
    out.extend_from_slice(&(h as i32).to_le_bytes());
    for f in flow.data() {
        out.extend_from_slice(&(f[0] as f32).to_le_bytes());
        out.extend_from_slice(&(f[1] as f32).to_le_bytes());
    }
    out
}

pub fn decode_flo(bytes: &[u8]) -> Result<FlowField> {
    if bytes.len() < HEADER_BYTES {
        return Err(Error::Format(format!("flo file of {} bytes has no header", bytes.len())));
    }
    let word = |i: usize| -> [u8; 4] { bytes[4 * i..4 * i + 4].try_into().expect("4 bytes") };
    let magic = f32::from_le_bytes(word(0));
    if magic != FLO_MAGIC {
        return Err(Error::Format(format!("bad flo magic {magic}")));
    }
    let w = i32::from_le_bytes(word(1));
    let h = i32::from_le_bytes(word(2));
    if w <= 0 || h <= 0 {
        return Err(Error::Format(format!("bad flo size {w}x{h}")));
    }
    let (w, h) = (w as usize, h as usize);
    let expected = w
        .checked_mul(h)
        .and_then(|n| n.checked_mul(8))
        .and_then(|n| n.checked_add(HEADER_BYTES))
        .ok_or_else(|| Error::Format(format!("flo size {w}x{h} overflows")))?;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "flo file has {} bytes, expected {expected} for {w}x{h}",
            bytes.len()
        )));
    }
    let data = (0..w * h)
        .map(|i| {
            let u = f32::from_le_bytes(word(3 + 2 * i));
            let v = f32::from_le_bytes(word(4 + 2 * i));
            [u as f64, v as f64]
        })
        .collect();
    Ok(Grid::from_vec(w, h, data))
}

pub fn write_flo(path: impl AsRef<Path>, flow: &FlowField) -> Result<()> {
    std::fs::write(path, encode_flo(flow))?;
    Ok(())
}

pub fn read_flo(path: impl AsRef<Path>) -> Result<FlowField> {
    decode_flo(&std::fs::read(path)?)
}
