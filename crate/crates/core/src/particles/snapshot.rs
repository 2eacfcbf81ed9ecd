//! Versioned binary particle-set snapshot.
//!
//! Layout (little-endian): `"DPPS"`, `u32` version, `u64` seed, `u64` parent
//! count, `u8` expanded flag, `u32` length + UTF-8 weather config in
//! `key = value` form, `u64` billboard count followed by `u32 w, u32 h,
//! f64[w·h]` each, then `u64` particle count and per particle: position,
//! motion, offset1, offset2 (3×f64 each), colour (3×f64), transparency,
//! template angle, `u64` parent, blur fraction, blur weight, depth1, depth2
//! (f64 each) and two `u64` billboard indices.

use std::collections::HashMap;
use std::io::{Cursor, Read};
use std::path::Path;
use std::sync::Arc;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{Particle, ParticleSet, WeatherConfig};
use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::real::Real;
use crate::template::Template;

const MAGIC: &[u8; 4] = b"DPPS";
const VERSION: u32 = 1;

pub fn encode_snapshot<T: Real>(ps: &ParticleSet<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let w = &mut out;
    w.write_u32::<LittleEndian>(VERSION).unwrap();
    w.write_u64::<LittleEndian>(ps.seed).unwrap();
    w.write_u64::<LittleEndian>(ps.parent_count as u64).unwrap();
    w.write_u8(ps.expanded as u8).unwrap();
    let cfg = ps.config.to_kv();
    w.write_u32::<LittleEndian>(cfg.len() as u32).unwrap();
    w.extend_from_slice(cfg.as_bytes());

    let mut index: HashMap<*const Template<T>, u64> = HashMap::new();
    let mut table: Vec<&Arc<Template<T>>> = Vec::new();
    for p in &ps.particles {
        for b in &p.billboards {
            index.entry(Arc::as_ptr(b)).or_insert_with(|| {
                table.push(b);
                table.len() as u64 - 1
            });
        }
    }
    let f = |w: &mut Vec<u8>, v: T| w.write_f64::<LittleEndian>(v.to_f64_lossy()).unwrap();
    w.write_u64::<LittleEndian>(table.len() as u64).unwrap();
    for b in &table {
        w.write_u32::<LittleEndian>(b.width() as u32).unwrap();
        w.write_u32::<LittleEndian>(b.height() as u32).unwrap();
        for &v in b.data() {
            f(w, v);
        }
    }
    w.write_u64::<LittleEndian>(ps.particles.len() as u64).unwrap();
    for p in &ps.particles {
        for v in [p.position, p.motion, p.offset1, p.offset2] {
            for c in v.0 {
                f(w, c);
            }
        }
        for c in p.color {
            f(w, c);
        }
        f(w, p.transparency);
        f(w, p.template_angle);
        w.write_u64::<LittleEndian>(p.parent as u64).unwrap();
        for v in [p.blur_fraction, p.blur_weight, p.depth1, p.depth2] {
            f(w, v);
        }
        for b in &p.billboards {
            w.write_u64::<LittleEndian>(index[&Arc::as_ptr(b)]).unwrap();
        }
    }
    out
}

pub fn decode_snapshot<T: Real>(bytes: &[u8], file: &Path) -> Result<ParticleSet<T>> {
    let mut r = Cursor::new(bytes);
    let fail = |r: &Cursor<&[u8]>, m: &str| Error::parse(file, r.position() as usize, m);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| fail(&r, "truncated header"))?;
    if &magic != MAGIC {
        return Err(Error::parse(file, 0, "bad magic, expected DPPS"));
    }
    macro_rules! rd {
        ($e:expr) => {
            $e.map_err(|_| fail(&r, "truncated snapshot"))?
        };
    }
    let version = rd!(r.read_u32::<LittleEndian>());
    if version != VERSION {
        return Err(fail(&r, &format!("unsupported snapshot version {version}")));
    }
    let seed = rd!(r.read_u64::<LittleEndian>());
    let parent_count = rd!(r.read_u64::<LittleEndian>()) as usize;
    let expanded = rd!(r.read_u8()) != 0;
    let cfg_len = rd!(r.read_u32::<LittleEndian>()) as usize;
    let mut cfg_bytes = vec![0u8; cfg_len];
    rd!(r.read_exact(&mut cfg_bytes));
    let cfg_text = String::from_utf8(cfg_bytes).map_err(|_| fail(&r, "config is not UTF-8"))?;
    let config = WeatherConfig::from_kv(&cfg_text, WeatherConfig::snow())?;

    let n_bb = rd!(r.read_u64::<LittleEndian>()) as usize;
    let mut table = Vec::with_capacity(n_bb.min(1 << 20));
    for _ in 0..n_bb {
        let bw = rd!(r.read_u32::<LittleEndian>()) as usize;
        let bh = rd!(r.read_u32::<LittleEndian>()) as usize;
        if bw.is_multiple_of(2) || bh.is_multiple_of(2) {
            return Err(fail(&r, "billboard sides must be odd"));
        }
        let mut data = Vec::with_capacity(bw * bh);
        for _ in 0..bw * bh {
            data.push(T::lit(rd!(r.read_f64::<LittleEndian>())));
        }
        table.push(Arc::new(Template::from_vec(bw, bh, data)));
    }
    let n = rd!(r.read_u64::<LittleEndian>()) as usize;
    let mut particles = Vec::with_capacity(n.min(1 << 24));
    for _ in 0..n {
        let mut vals = [0f64; 12 + 3 + 2];
        for v in vals.iter_mut() {
            *v = rd!(r.read_f64::<LittleEndian>());
        }
        let parent = rd!(r.read_u64::<LittleEndian>()) as usize;
        let mut tail = [0f64; 4];
        for v in tail.iter_mut() {
            *v = rd!(r.read_f64::<LittleEndian>());
        }
        let mut bbs = Vec::with_capacity(2);
        for _ in 0..2 {
            let i = rd!(r.read_u64::<LittleEndian>()) as usize;
            bbs.push(table.get(i).cloned().ok_or_else(|| fail(&r, "billboard index out of range"))?);
        }
        let v3 = |o: usize| Vec3::new(T::lit(vals[o]), T::lit(vals[o + 1]), T::lit(vals[o + 2]));
        particles.push(Particle {
            position: v3(0),
            motion: v3(3),
            offset1: v3(6),
            offset2: v3(9),
            color: [vals[12], vals[13], vals[14]].map(T::lit),
            transparency: T::lit(vals[15]),
            template_angle: T::lit(vals[16]),
            billboards: [bbs[0].clone(), bbs[1].clone()],
            parent,
            blur_fraction: T::lit(tail[0]),
            blur_weight: T::lit(tail[1]),
            depth1: T::lit(tail[2]),
            depth2: T::lit(tail[3]),
        });
    }
    if (r.position() as usize) != bytes.len() {
        return Err(fail(&r, "trailing bytes after snapshot"));
    }
    Ok(ParticleSet {
        particles,
        config,
        seed,
        parent_count,
        expanded,
    })
}

pub fn write_snapshot<T: Real>(path: &Path, ps: &ParticleSet<T>) -> Result<()> {
    std::fs::write(path, encode_snapshot(ps)).map_err(|e| Error::io(path, e))
}

pub fn read_snapshot<T: Real>(path: &Path) -> Result<ParticleSet<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_snapshot(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::particles::{expand_motion_blur, sample_particles};
    use crate::scene_io::{synth_scene, SynthSpec};

    #[test]
    fn snapshot_round_trip_preserves_every_field() {
        let (scene, _) = synth_scene(&SynthSpec::new(40, 24, Vec3::new(0.1, 0.0, 0.0), vec![3.0, 8.0])).unwrap();
        let cfg = WeatherConfig { count: 7, base_size: 9.0, reference_width: 0, ..WeatherConfig::rain() };
        let mut ps = sample_particles(&scene, &cfg, 9).unwrap();
        ps.particles[2].offset1 = Vec3::new(0.01, -0.02, 0.003);
        let ps = expand_motion_blur(&ps, &scene.relative_pose());
        let bytes = encode_snapshot(&ps);
        let back: ParticleSet<f64> = decode_snapshot(&bytes, Path::new("s.bin")).unwrap();
        assert_eq!(back, ps);
        // replicas share billboards, so the table holds one pair per parent
        let stored = u64::from_le_bytes(bytes[29 + ps.config.to_kv().len()..][..8].try_into().unwrap());
        assert!(stored <= 14);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(decode_snapshot::<f64>(b"NOPE", Path::new("x")).is_err());
        let ps = ParticleSet::<f64>::empty(WeatherConfig::snow());
        let bytes = encode_snapshot(&ps);
        assert!(decode_snapshot::<f64>(&bytes[..bytes.len() - 1], Path::new("x")).is_err());
        assert_eq!(decode_snapshot::<f64>(&bytes, Path::new("x")).unwrap(), ps);
    }
}
