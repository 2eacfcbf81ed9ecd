//! Scene bundles and file formats: PPM frames, PFM depth, `cameras.txt`,
//! Middlebury `.flo`, plus a synthetic multi-plane scene generator.

mod cameras;
mod flo;
mod pfm;
mod ppm;
mod synth;

use std::path::Path;

pub use cameras::{decode_cameras, encode_cameras, read_cameras, Cameras};
pub use flo::{decode_flo, encode_flo, read_flo, write_flo};
pub use pfm::{decode_pfm, encode_pfm, read_pfm, write_pfm};
pub use ppm::{decode_ppm, encode_ppm, read_ppm, write_ppm};
pub use synth::{synth_scene, SynthSpec};

pub use crate::flow_field::FlowField;
use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, RigidTransform};
use crate::image::Image;
use crate::real::Real;

/// Two RGB frames with per-frame depth, world→camera poses and intrinsics.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneBundle<T> {
    pub frame1: Image<T>,
    pub frame2: Image<T>,
    pub depth1: Image<T>,
    pub depth2: Image<T>,
    pub pose1: RigidTransform<T>,
    pub pose2: RigidTransform<T>,
    pub intrinsics: Intrinsics<T>,
}

impl<T: Real> SceneBundle<T> {
    pub fn width(&self) -> usize {
        self.frame1.width()
    }

    pub fn height(&self) -> usize {
        self.frame1.height()
    }

    pub fn frame(&self, t: usize) -> &Image<T> {
        if t == 0 {
            &self.frame1
        } else {
            &self.frame2
        }
    }

    pub fn depth(&self, t: usize) -> &Image<T> {
        if t == 0 {
            &self.depth1
        } else {
            &self.depth2
        }
    }

    /// `T_rel = T2 · T1⁻¹`, mapping camera-1 coordinates to camera-2.
    pub fn relative_pose(&self) -> RigidTransform<T> {
        self.pose2.compose(&self.pose1.inverse())
    }

    pub fn validate(&self) -> Result<()> {
        let dims = self.frame1.dims();
        for (name, img, ch) in [
            ("frame1", &self.frame1, 3),
            ("frame2", &self.frame2, 3),
            ("depth1", &self.depth1, 1),
            ("depth2", &self.depth2, 1),
        ] {
            if img.channels() != ch {
                return Err(Error::InvalidScene(format!(
                    "{name} has {} channels, expected {ch}",
                    img.channels()
                )));
            }
            if img.dims() != dims {
                return Err(Error::InvalidScene(format!(
                    "{name} is {}x{}, frame1 is {}x{}",
                    img.width(),
                    img.height(),
                    dims.0,
                    dims.1
                )));
            }
        }
        if dims.0 == 0 || dims.1 == 0 {
            return Err(Error::InvalidScene("empty frames".into()));
        }
        for d in [&self.depth1, &self.depth2] {
            if d.data().iter().any(|v| !(v.is_finite() && *v > T::zero())) {
                return Err(Error::InvalidScene("depth must be positive and finite".into()));
            }
        }
        let tol = T::lit(1e-9).max(T::epsilon() * T::lit(64.0));
        for (name, p) in [("pose1", &self.pose1), ("pose2", &self.pose2)] {
            if !p.is_proper_rigid(tol) {
                return Err(Error::InvalidScene(format!("{name} is not a rigid transform")));
            }
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> SceneBundle<U> {
        let pose = |p: &RigidTransform<T>| RigidTransform::from_row_major(&p.to_row_major().map(|x| U::lit(x.to_f64_lossy())));
        let k = self.intrinsics.to_row_major().map(|x| U::lit(x.to_f64_lossy()));
        SceneBundle {
            frame1: self.frame1.cast(),
            frame2: self.frame2.cast(),
            depth1: self.depth1.cast(),
            depth2: self.depth2.cast(),
            pose1: pose(&self.pose1),
            pose2: pose(&self.pose2),
            intrinsics: Intrinsics::from_row_major(&k).expect("valid intrinsics"),
        }
    }
}

pub fn load_scene<T: Real>(dir: &Path) -> Result<SceneBundle<T>> {
    let frame1 = read_ppm(&dir.join("frame1.ppm"))?;
    let frame2 = read_ppm(&dir.join("frame2.ppm"))?;
    let depth1 = read_depth(&dir.join("depth1.pfm"))?;
    let depth2 = read_depth(&dir.join("depth2.pfm"))?;
    let cams = read_cameras(&dir.join("cameras.txt"))?;
    let scene = SceneBundle {
        frame1,
        frame2,
        depth1,
        depth2,
        pose1: cams.pose1,
        pose2: cams.pose2,
        intrinsics: cams.intrinsics,
    };
    scene.validate()?;
    Ok(scene)
}

fn read_depth<T: Real>(path: &Path) -> Result<Image<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let img: Image<T> = decode_pfm(&bytes, path)?;
    // offset of the first offending sample inside the payload
    let header = bytes.len() - 4 * img.data().len();
    let (w, h) = img.dims();
    for y in (0..h).rev() {
        for x in 0..w {
            let v = img.get(x, y, 0);
            if !(v.is_finite() && v > T::zero()) {
                let stored_row = h - 1 - y;
                let offset = header + 4 * (stored_row * w + x);
                return Err(Error::parse(path, offset, "depth must be positive"));
            }
        }
    }
    Ok(img)
}

/// Writes the five scene files into `dir`, creating it if needed.
pub fn save_scene<T: Real>(dir: &Path, scene: &SceneBundle<T>) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_ppm(&dir.join("frame1.ppm"), &scene.frame1)?;
    write_ppm(&dir.join("frame2.ppm"), &scene.frame2)?;
    write_pfm(&dir.join("depth1.pfm"), &scene.depth1)?;
    write_pfm(&dir.join("depth2.pfm"), &scene.depth2)?;
    let cams = Cameras {
        intrinsics: scene.intrinsics,
        pose1: scene.pose1,
        pose2: scene.pose2,
    };
    let path = dir.join("cameras.txt");
    std::fs::write(&path, encode_cameras(&cams)).map_err(|e| Error::io(&path, e))
}
