//! Middlebury `.flo`: `"PIEH"`, i32 width, i32 height, then interleaved
//! little-endian f32 `(u, v)` pairs in row-major order.

use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};

use crate::error::{Error, Result};
use crate::flow_field::FlowField;
use crate::real::Real;

const MAGIC: &[u8; 4] = b"PIEH";

pub fn decode_flo<T: Real>(bytes: &[u8], file: &Path) -> Result<FlowField<T>> {
    let err = |offset, reason: &str| Error::parse(file, offset, reason);
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(err(0, "bad magic, expected PIEH"));
    }
    if bytes.len() < 12 {
        return Err(err(bytes.len(), "truncated header"));
    }
    let w = LittleEndian::read_i32(&bytes[4..8]);
    let h = LittleEndian::read_i32(&bytes[8..12]);
    if w < 0 || h < 0 {
        return Err(err(4, "negative dimension"));
    }
    let (w, h) = (w as usize, h as usize);
    if w == 0 || h == 0 {
        return Err(Error::EmptyFlow);
    }
    let n = w * h;
    if bytes.len() - 12 < n * 8 {
        return Err(err(bytes.len(), "truncated payload"));
    }
    let mut raw = vec![0f32; 2 * n];
    LittleEndian::read_f32_into(&bytes[12..12 + 8 * n], &mut raw);
    let (mut u, mut v) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for (i, pair) in raw.chunks_exact(2).enumerate() {
        if !(pair[0].is_finite() && pair[1].is_finite()) {
            return Err(err(12 + 8 * i, "non-finite flow value"));
        }
        u.push(T::lit(pair[0] as f64));
        v.push(T::lit(pair[1] as f64));
    }
    Ok(FlowField::from_parts(w, h, u, v))
}

pub fn encode_flo<T: Real>(flow: &FlowField<T>) -> Result<Vec<u8>> {
    if flow.is_empty() {
        return Err(Error::EmptyFlow);
    }
    let mut out = Vec::with_capacity(12 + 8 * flow.len());
    out.extend_from_slice(MAGIC);
    let mut buf = [0u8; 4];
    for d in [flow.width(), flow.height()] {
        LittleEndian::write_i32(&mut buf, d as i32);
        out.extend_from_slice(&buf);
    }
    for (u, v) in flow.u.iter().zip(&flow.v) {
        for x in [u, v] {
            LittleEndian::write_f32(&mut buf, x.to_f32().unwrap_or(f32::NAN));
            out.extend_from_slice(&buf);
        }
    }
    Ok(out)
}

pub fn read_flo<T: Real>(path: &Path) -> Result<FlowField<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_flo(&bytes, path)
}

pub fn write_flo<T: Real>(path: &Path, flow: &FlowField<T>) -> Result<()> {
    std::fs::write(path, encode_flo(flow)?).map_err(|e| Error::io(path, e))
}
