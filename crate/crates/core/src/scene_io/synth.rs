//! Procedural scenes of textured fronto-parallel planes seen by a translating
//! camera. Both frames are ray cast against the same world texture, so frame 2
//! is an exact reprojection of frame 1 and the true flow is known in closed form.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{FlowField, SceneBundle};
use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, RigidTransform, Vec3};
use crate::image::Image;
use crate::real::Real;

#[derive(Debug, Clone)]
pub struct SynthSpec<T> {
    pub width: usize,
    pub height: usize,
    pub texture_seed: u64,
    /// Camera-2 centre expressed in camera-1 coordinates.
    pub camera_translation: Vec3<T>,
    pub plane_depths: Vec<T>,
    /// Focal length in pixels; defaults to `0.75 · width`.
    pub focal: Option<T>,
}

impl<T: Real> SynthSpec<T> {
    pub fn new(width: usize, height: usize, camera_translation: Vec3<T>, plane_depths: Vec<T>) -> Self {
        Self {
            width,
            height,
            texture_seed: 0,
            camera_translation,
            plane_depths,
            focal: None,
        }
    }

    /// The 96×128 two-plane scene used by the acceptance suite and CLI.
    pub fn desk_default() -> Self {
        Self {
            width: 128,
            height: 96,
            texture_seed: 7,
            camera_translation: Vec3::new(T::lit(0.5), T::lit(0.15), T::zero()),
            plane_depths: vec![T::lit(8.0), T::lit(1000.0)],
            focal: None,
        }
    }
}

struct Wave {
    kx: f64,
    ky: f64,
    phase: f64,
    gain: [f64; 3],
}

struct Plane<T> {
    depth: T,
    /// Extent in camera-1 coordinates; `None` for the unbounded background.
    rect: Option<[T; 4]>,
    waves: Vec<Wave>,
    base: [f64; 3],
}

impl<T: Real> Plane<T> {
    fn contains(&self, p: &Vec3<T>) -> bool {
        match self.rect {
            None => true,
            Some([x0, x1, y0, y1]) => p.x() >= x0 && p.x() <= x1 && p.y() >= y0 && p.y() <= y1,
        }
    }

    /// Colour at world point `p` lying on the plane. Texture coordinates are
    /// measured in frame-1 pixels at the plane's depth.
    fn shade(&self, p: &Vec3<T>, focal: T) -> [T; 3] {
        let s = (p.x() / self.depth * focal).to_f64_lossy();
        let t = (p.y() / self.depth * focal).to_f64_lossy();
        let mut rgb = self.base;
        for w in &self.waves {
            let a = (w.kx * s + w.ky * t + w.phase).sin();
            for (c, g) in rgb.iter_mut().zip(w.gain) {
                *c += g * a;
            }
        }
        rgb.map(|c| T::lit(c.clamp(0.0, 1.0)))
    }
}

fn make_plane<T: Real>(rng: &mut ChaCha8Rng, depth: T, rect: Option<[T; 4]>) -> Plane<T> {
    let waves = (0..6)
        .map(|_| {
            let wavelength: f64 = rng.gen_range(6.0..18.0);
            let dir: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let k = std::f64::consts::TAU / wavelength;
            let amp: f64 = rng.gen_range(0.04..0.08);
            let gain = [0, 1, 2].map(|_| amp * rng.gen_range(0.6..1.0));
            Wave {
                kx: k * dir.cos(),
                ky: k * dir.sin(),
                phase: rng.gen_range(0.0..std::f64::consts::TAU),
                gain,
            }
        })
        .collect();
    let base = [0, 1, 2].map(|_| rng.gen_range(0.35..0.55));
    Plane {
        depth,
        rect,
        waves,
        base,
    }
}

/// Returns the scene and the true frame-1 → frame-2 flow.
pub fn synth_scene<T: Real>(spec: &SynthSpec<T>) -> Result<(SceneBundle<T>, FlowField<T>)> {
    let (w, h) = (spec.width, spec.height);
    if w < 16 || h < 16 {
        return Err(Error::Config(format!("synthetic scene must be at least 16x16, got {w}x{h}")));
    }
    if spec.plane_depths.is_empty() || spec.plane_depths.iter().any(|d| !(d.is_finite() && *d > T::zero())) {
        return Err(Error::Config("plane depths must be positive".into()));
    }
    let c = spec.camera_translation;
    if !c.is_finite() {
        return Err(Error::Config("camera translation must be finite".into()));
    }
    let focal = spec.focal.unwrap_or(T::lit(0.75) * T::from_usize_lossy(w));
    let half = T::half();
    let k = Intrinsics::new(
        focal,
        focal,
        (T::from_usize_lossy(w) - T::one()) * half,
        (T::from_usize_lossy(h) - T::one()) * half,
    );

    let mut depths = spec.plane_depths.clone();
    depths.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let n_front = depths.len() - 1;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.texture_seed);
    let mut planes = Vec::with_capacity(depths.len());
    for (i, &z) in depths.iter().enumerate() {
        let rect = if i == 0 {
            None
        } else {
            // nested centred rectangles, nearer planes smaller
            let frac = T::lit(0.25 * (1.0 - 0.5 * (i - 1) as f64 / n_front.max(1) as f64));
            let (wf, hf) = (T::from_usize_lossy(w), T::from_usize_lossy(h));
            let (x0, x1) = (wf * (half - frac), wf * (half + frac));
            let (y0, y1) = (hf * (half - frac), hf * (half + frac));
            let a = k.unproject(x0, y0, z);
            let b = k.unproject(x1, y1, z);
            Some([a.x(), b.x(), a.y(), b.y()])
        };
        planes.push(make_plane(&mut rng, z, rect));
    }
    // nearest first for ray casting
    planes.reverse();

    let centres = [Vec3::zero(), c];
    let mut frames = Vec::with_capacity(2);
    let mut depth_maps = Vec::with_capacity(2);
    for centre in centres {
        let mut img = Image::zeros(w, h, 3);
        let mut dm = Image::zeros(w, h, 1);
        for y in 0..h {
            for x in 0..w {
                let dir = k.unproject(T::from_usize_lossy(x), T::from_usize_lossy(y), T::one());
                let hit = planes.iter().find_map(|pl| {
                    let lambda = pl.depth - centre.z();
                    if lambda <= T::zero() {
                        return None;
                    }
                    let p = centre + dir.scale(lambda);
                    pl.contains(&p).then_some((pl, p, lambda))
                });
                let (pl, p, lambda) = hit.ok_or_else(|| {
                    Error::Config("camera translation places the background plane behind camera 2".into())
                })?;
                let rgb = pl.shade(&p, focal);
                for (ch, v) in rgb.into_iter().enumerate() {
                    img.set(x, y, ch, v);
                }
                dm.set(x, y, 0, lambda);
            }
        }
        frames.push(img);
        depth_maps.push(dm);
    }

    let pose2 = RigidTransform::from_translation(-c);
    let flow = FlowField::from_fn(w, h, |x, y| {
        let (xf, yf) = (T::from_usize_lossy(x), T::from_usize_lossy(y));
        let p = k.unproject(xf, yf, depth_maps[0].get(x, y, 0));
        let [u2, v2] = k.project(&(p - c));
        (u2 - xf, v2 - yf)
    });
    let depth2 = depth_maps.pop().unwrap();
    let depth1 = depth_maps.pop().unwrap();
    let frame2 = frames.pop().unwrap();
    let frame1 = frames.pop().unwrap();
    let scene = SceneBundle {
        frame1,
        frame2,
        depth1,
        depth2,
        pose1: RigidTransform::identity(),
        pose2,
        intrinsics: k,
    };
    scene.validate()?;
    Ok((scene, flow))
}
