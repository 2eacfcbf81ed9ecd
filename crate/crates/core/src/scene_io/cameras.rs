//! `cameras.txt`: line 1 holds the 9 entries of K, lines 2 and 3 the 16
//! entries of pose1 and pose2, all row-major and whitespace separated.

use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, RigidTransform};
use crate::real::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct Cameras<T> {
    pub intrinsics: Intrinsics<T>,
    pub pose1: RigidTransform<T>,
    pub pose2: RigidTransform<T>,
}

fn parse_row<T: Real, const N: usize>(
    line: Option<(usize, &str)>,
    file: &Path,
    offset: usize,
    what: &str,
) -> Result<[T; N]> {
    let (_, line) = line.ok_or_else(|| Error::parse(file, offset, format!("missing {what} line")))?;
    let vals: Vec<T> = line
        .split_whitespace()
        .map(|t| t.parse::<T>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::parse(file, offset, format!("non-numeric entry in {what}")))?;
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(Error::parse(file, offset, format!("non-finite entry in {what}")));
    }
    vals.try_into().map_err(|v: Vec<T>| {
        Error::parse(file, offset, format!("{what} needs {N} values, found {}", v.len()))
    })
}

pub fn decode_cameras<T: Real>(text: &str, file: &Path) -> Result<Cameras<T>> {
    let mut offsets = Vec::new();
    let mut acc = 0;
    let mut lines = Vec::new();
    for l in text.split_inclusive('\n') {
        if !l.trim().is_empty() {
            offsets.push(acc);
            lines.push(l.trim());
        }
        acc += l.len();
    }
    let mut it = lines.iter().copied().enumerate();
    let off = |i: usize| offsets.get(i).copied().unwrap_or(text.len());
    let k: [T; 9] = parse_row(it.next(), file, off(0), "intrinsics")?;
    let p1: [T; 16] = parse_row(it.next(), file, off(1), "pose1")?;
    let p2: [T; 16] = parse_row(it.next(), file, off(2), "pose2")?;
    let intrinsics = Intrinsics::from_row_major(&k).ok_or_else(|| {
        Error::parse(file, off(0), "intrinsics must have zero skew and positive focal lengths")
    })?;
    Ok(Cameras {
        intrinsics,
        pose1: RigidTransform::from_row_major(&p1),
        pose2: RigidTransform::from_row_major(&p2),
    })
}

pub fn encode_cameras<T: Real>(cams: &Cameras<T>) -> String {
    let join = |v: &[T]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ");
    format!(
        "{}\n{}\n{}\n",
        join(&cams.intrinsics.to_row_major()),
        join(&cams.pose1.to_row_major()),
        join(&cams.pose2.to_row_major())
    )
}

pub fn read_cameras<T: Real>(path: &Path) -> Result<Cameras<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    decode_cameras(&text, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Mat3, Vec3};

    #[test]
    fn text_round_trip_is_exact() {
        let cams = Cameras {
            intrinsics: Intrinsics::new(101.3f64, 99.1, 63.5, 47.5),
            pose1: RigidTransform::identity(),
            pose2: RigidTransform {
                rotation: Mat3::rotation_z(0.1),
                translation: Vec3::new(-0.1, 1.0 / 3.0, 0.0),
            },
        };
        let txt = encode_cameras(&cams);
        assert_eq!(decode_cameras::<f64>(&txt, Path::new("c.txt")).unwrap(), cams);
    }

    #[test]
    fn short_pose_line_reports_offset() {
        let txt = "1 0 0 0 1 0 0 0 1\n1 0 0 0 0 1 0 0 0 0 1 0 0 0 0 1\n1 0 0\n";
        match decode_cameras::<f64>(txt, Path::new("c.txt")).unwrap_err() {
            Error::Parse { offset, reason, .. } => {
                assert_eq!(offset, 50);
                assert!(reason.contains("pose2"));
            }
            e => panic!("{e}"),
        }
    }
}
