//! Binary PPM (P6, maxval 255).

use std::path::Path;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::real::Real;

/// Reads a header token, skipping whitespace and `#` comments.
/// Returns the token and the offset just past it.
pub(crate) fn header_token(bytes: &[u8], mut pos: usize) -> Option<(&str, usize)> {
    loop {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        break;
    }
    let start = pos;
    while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
        pos += 1;
    }
    if start == pos {
        return None;
    }
    std::str::from_utf8(&bytes[start..pos]).ok().map(|s| (s, pos))
}

pub fn decode_ppm<T: Real>(bytes: &[u8], file: &Path) -> Result<Image<T>> {
    let err = |offset, reason: &str| Error::parse(file, offset, reason);
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        let reason = if bytes.starts_with(b"P3") {
            "ASCII PPM (P3) is not supported; expected P6"
        } else {
            "bad magic, expected P6"
        };
        return Err(err(0, reason));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (i, name) in ["width", "height", "maxval"].iter().enumerate() {
        let (tok, next) =
            header_token(bytes, pos).ok_or_else(|| err(pos, &format!("missing {name}")))?;
        fields[i] = tok
            .parse()
            .map_err(|_| err(pos, &format!("invalid {name} `{tok}`")))?;
        pos = next;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(err(pos, "maxval must be 255"));
    }
    if width == 0 || height == 0 {
        return Err(err(pos, "zero image dimension"));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(err(pos, "missing whitespace after header"));
    }
    pos += 1;
    let n = width * height * 3;
    if bytes.len() - pos < n {
        return Err(err(bytes.len(), "truncated pixel data"));
    }
    let scale = T::lit(255.0);
    let data = bytes[pos..pos + n]
        .iter()
        .map(|&b| T::from_u8(b).unwrap() / scale)
        .collect();
    Ok(Image::from_vec(width, height, 3, data))
}

/// Quantizes `[0,1]` values to bytes (`round(v·255)`, clamped).
pub fn encode_ppm<T: Real>(img: &Image<T>) -> Result<Vec<u8>> {
    if img.channels() != 3 {
        return Err(Error::Contract(format!(
            "PPM needs 3 channels, image has {}",
            img.channels()
        )));
    }
    let mut out = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    let scale = T::lit(255.0);
    out.extend(img.data().iter().map(|&v| {
        let q = (v * scale).round().max(T::zero()).min(scale);
        q.to_u8().unwrap_or(0)
    }));
    Ok(out)
}

pub fn read_ppm<T: Real>(path: &Path) -> Result<Image<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes, path)
}

pub fn write_ppm<T: Real>(path: &Path, img: &Image<T>) -> Result<()> {
    std::fs::write(path, encode_ppm(img)?).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decodes_with_comment() {
        let mut bytes = b"P6\n# made by hand\n1 1\n255\n".to_vec();
        bytes.extend([255, 0, 51]);
        let img: Image<f64> = decode_ppm(&bytes, Path::new("x.ppm")).unwrap();
        assert_eq!(img.data(), &[1.0, 0.0, 0.2]);
    }

    #[test]
    fn rejects_ascii_variant() {
        let e = decode_ppm::<f64>(b"P3\n1 1\n255\n0 0 0\n", Path::new("a.ppm")).unwrap_err();
        assert!(e.to_string().contains("P3"), "{e}");
    }

    #[test]
    fn rejects_truncated_payload() {
        let e = decode_ppm::<f64>(b"P6\n2 2\n255\n\x00\x00", Path::new("t.ppm")).unwrap_err();
        match e {
            Error::Parse { offset, reason, .. } => {
                assert_eq!(offset, 13);
                assert!(reason.contains("truncated"));
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn encode_decode_bytes_identical() {
        let mut bytes = b"P6\n3 1\n255\n".to_vec();
        bytes.extend([0u8, 1, 2, 127, 128, 129, 253, 254, 255]);
        let img: Image<f64> = decode_ppm(&bytes, Path::new("r.ppm")).unwrap();
        assert_eq!(encode_ppm(&img).unwrap(), bytes);
    }
}
