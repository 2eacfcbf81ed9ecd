//! Grayscale PFM (`Pf`). Scanlines are stored bottom to top; a negative
//! scale marks little-endian data. The writer always emits little-endian.

use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian};

use super::ppm::header_token;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::real::Real;

pub fn decode_pfm<T: Real>(bytes: &[u8], file: &Path) -> Result<Image<T>> {
    let err = |offset, reason: &str| Error::parse(file, offset, reason);
    if bytes.len() < 2 || &bytes[..2] != b"Pf" {
        let reason = if bytes.starts_with(b"PF") {
            "color PFM (PF) found, expected grayscale Pf"
        } else {
            "bad magic, expected Pf"
        };
        return Err(err(0, reason));
    }
    let mut pos = 2;
    let mut dims = [0usize; 2];
    for (i, name) in ["width", "height"].iter().enumerate() {
        let (tok, next) =
            header_token(bytes, pos).ok_or_else(|| err(pos, &format!("missing {name}")))?;
        dims[i] = tok
            .parse()
            .map_err(|_| err(pos, &format!("invalid {name} `{tok}`")))?;
        pos = next;
    }
    let (tok, next) = header_token(bytes, pos).ok_or_else(|| err(pos, "missing scale"))?;
    let scale: f32 = tok
        .parse()
        .map_err(|_| err(pos, &format!("invalid scale `{tok}`")))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(err(pos, "scale must be finite and non-zero"));
    }
    pos = next;
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(err(pos, "missing whitespace after header"));
    }
    pos += 1;
    let [width, height] = dims;
    if width == 0 || height == 0 {
        return Err(err(pos, "zero image dimension"));
    }
    let n = width * height;
    if bytes.len() - pos < n * 4 {
        return Err(err(bytes.len(), "truncated pixel data"));
    }
    let mut raw = vec![0f32; n];
    let payload = &bytes[pos..pos + n * 4];
    if scale < 0.0 {
        LittleEndian::read_f32_into(payload, &mut raw);
    } else {
        BigEndian::read_f32_into(payload, &mut raw);
    }
    let mut data = vec![T::zero(); n];
    for (row, chunk) in raw.chunks_exact(width).enumerate() {
        let y = height - 1 - row;
        for (x, &v) in chunk.iter().enumerate() {
            data[y * width + x] = T::lit(v as f64);
        }
    }
    Ok(Image::from_vec(width, height, 1, data))
}

pub fn encode_pfm<T: Real>(img: &Image<T>) -> Result<Vec<u8>> {
    if img.channels() != 1 {
        return Err(Error::Contract(format!(
            "grayscale PFM needs 1 channel, image has {}",
            img.channels()
        )));
    }
    let (w, h) = img.dims();
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    let mut buf = [0u8; 4];
    for y in (0..h).rev() {
        for x in 0..w {
            LittleEndian::write_f32(&mut buf, img.get(x, y, 0).to_f32().unwrap_or(f32::NAN));
            out.extend_from_slice(&buf);
        }
    }
    Ok(out)
}

pub fn read_pfm<T: Real>(path: &Path) -> Result<Image<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pfm(&bytes, path)
}

pub fn write_pfm<T: Real>(path: &Path, img: &Image<T>) -> Result<()> {
    std::fs::write(path, encode_pfm(img)?).map_err(|e| Error::io(path, e))
}
