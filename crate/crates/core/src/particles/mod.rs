//! Weather particle sets: sampling in the visible frusta, colour and
//! transparency initialisation, and motion-blur replication.
//!
//! Random stream (ChaCha8, seeded with the set seed), per sampling attempt:
//! frame coin, pixel x, pixel y, depth, motion angle, motion magnitude, and
//! an overlap coin only when the point lies in both frusta. After an accept:
//! template seed (`u64`), then hue, lightness and saturation jitter.

mod color;
mod config;
mod snapshot;

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub use color::{hls_to_rgb, jitter_hls, rgb_to_hls};
pub use config::{
    parse_kv, preset, presets, BlendMode, TransparencyLaw, WeatherConfig, PRESET_NAMES,
    REFERENCE_WIDTH,
};
pub(crate) use config::num as parse_num;
pub use snapshot::{decode_snapshot, encode_snapshot, read_snapshot, write_snapshot};

use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, Mat3, RigidTransform, Vec3};
use crate::real::Real;
use crate::scene_io::SceneBundle;
use crate::template::{billboard_for_depth, template_at_angle, Template};

/// Nearest admissible sampling depth, metres.
pub const MIN_SAMPLE_DEPTH: f64 = 1.0;
/// Camera-frame depth below which a particle is invisible in that frame.
pub const MIN_VISIBLE_Z: f64 = 1e-6;
pub const SAMPLING_BUDGET: usize = 1_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct Particle<T> {
    /// Initial position in camera-1 coordinates.
    pub position: Vec3<T>,
    pub motion: Vec3<T>,
    pub offset1: Vec3<T>,
    pub offset2: Vec3<T>,
    pub color: [T; 3],
    pub transparency: T,
    pub template_angle: T,
    /// Billboard per frame, fixed at initialisation.
    pub billboards: [Arc<Template<T>>; 2],
    /// Index of the parent particle owning the optimised offsets.
    pub parent: usize,
    /// Shift along `m + δ_p2` as a fraction of it (blur replicas only).
    pub blur_fraction: T,
    /// Transparency share of this replica (`1/K`).
    pub blur_weight: T,
    pub depth1: T,
    pub depth2: T,
}

impl<T: Real> Particle<T> {
    /// Camera-1 and camera-2 coordinates of the (offset) particle.
    pub fn camera_points(&self, rel: &RigidTransform<T>) -> (Vec3<T>, Vec3<T>) {
        let moved = self.motion + self.offset2;
        let q1 = self.position + self.offset1 + moved.scale(self.blur_fraction);
        let q2 = rel.apply(&q1) + moved;
        (q1, q2)
    }

    /// Recomputes `depth1`, `depth2` from the current offsets.
    pub fn refresh_depths(&mut self, rel: &RigidTransform<T>) {
        let (q1, q2) = self.camera_points(rel);
        self.depth1 = q1.z();
        self.depth2 = q2.z();
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParticleSet<T> {
    pub particles: Vec<Particle<T>>,
    pub config: WeatherConfig,
    pub seed: u64,
    /// Number of parent particles (pre-expansion count).
    pub parent_count: usize,
    pub expanded: bool,
}

impl<T: Real> ParticleSet<T> {
    pub fn empty(config: WeatherConfig) -> Self {
        Self {
            particles: Vec::new(),
            config,
            seed: 0,
            parent_count: 0,
            expanded: false,
        }
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn refresh_depths(&mut self, rel: &RigidTransform<T>) {
        for p in &mut self.particles {
            p.refresh_depths(rel);
        }
    }

    /// Sum of all transparencies.
    pub fn total_transparency(&self) -> T {
        self.particles.iter().map(|p| p.transparency).sum()
    }
}

/// Inside the image frustum: positive depth and a projection within the
/// pixel area `[-0.5, W-0.5) × [-0.5, H-0.5)`.
pub fn in_frustum<T: Real>(q: &Vec3<T>, k: &Intrinsics<T>, width: usize, height: usize) -> bool {
    if !(q.z() > T::lit(MIN_VISIBLE_Z)) {
        return false;
    }
    let [u, v] = k.project(q);
    let h = T::half();
    u >= -h && u < T::from_usize_lossy(width) - h && v >= -h && v < T::from_usize_lossy(height) - h
}

/// The acceptance predicate: both depths positive, and visible in frame 1 or
/// (after motion) in frame 2.
pub fn satisfies_frustum_predicate<T: Real>(p: &Particle<T>, scene: &SceneBundle<T>) -> bool {
    let (q1, q2) = p.camera_points(&scene.relative_pose());
    let eps = T::lit(MIN_VISIBLE_Z);
    let (w, h) = (scene.width(), scene.height());
    q1.z() > eps
        && q2.z() > eps
        && (in_frustum(&q1, &scene.intrinsics, w, h) || in_frustum(&q2, &scene.intrinsics, w, h))
}

pub fn depth_law(cfg: &WeatherConfig, depth: f64) -> f64 {
    match cfg.transparency_law {
        TransparencyLaw::Constant => cfg.transparency_base,
        TransparencyLaw::DepthDecay => cfg.transparency_base * (cfg.depth_decay / depth).min(1.0),
    }
}

/// Template side at reference depth once resolution scaling is applied.
pub fn effective_base_size(cfg: &WeatherConfig, image_width: usize) -> f64 {
    if cfg.reference_width == 0 {
        cfg.base_size
    } else {
        (cfg.base_size * image_width as f64 / cfg.reference_width as f64).max(3.0)
    }
}

fn motion_vector(cfg: &WeatherConfig, angle_u: f64, mag_u: f64) -> Vec3<f64> {
    let angle = angle_u * cfg.motion_angle_jitter.to_radians();
    let base = Vec3::new(0.0, cfg.motion_y, 0.0);
    Mat3::rotation_z(angle)
        .mul_vec(&base)
        .scale(1.0 + mag_u * cfg.motion_magnitude_jitter)
}

struct Draft {
    position: Vec3<f64>,
    motion: Vec3<f64>,
    angle: f64,
    color: [f64; 3],
    transparency: f64,
    d1: f64,
    d2: f64,
}

pub fn sample_particles<T: Real>(
    scene: &SceneBundle<T>,
    cfg: &WeatherConfig,
    seed: u64,
) -> Result<ParticleSet<T>> {
    cfg.validate()?;
    scene.validate()?;
    let (w, h) = (scene.width(), scene.height());
    let rel = scene.relative_pose().cast::<f64>();
    let rel_inv = rel.inverse();
    let k = {
        let i = &scene.intrinsics;
        Intrinsics::new(i.fx.to_f64_lossy(), i.fy.to_f64_lossy(), i.cx.to_f64_lossy(), i.cy.to_f64_lossy())
    };
    let max_depth = scene
        .depth1
        .data()
        .iter()
        .chain(scene.depth2.data())
        .fold(0.0f64, |m, d| m.max(d.to_f64_lossy()));
    if max_depth <= MIN_SAMPLE_DEPTH {
        return Err(Error::InvalidScene(format!(
            "scene depth never exceeds the minimum sampling depth {MIN_SAMPLE_DEPTH} m"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut drafts = Vec::with_capacity(cfg.count);
    let mut attempts = 0usize;
    while drafts.len() < cfg.count {
        if attempts >= SAMPLING_BUDGET {
            return Err(Error::SamplingFailed { attempts });
        }
        attempts += 1;
        let from_second: bool = rng.gen();
        let px: f64 = rng.gen_range(-0.5..w as f64 - 0.5);
        let py: f64 = rng.gen_range(-0.5..h as f64 - 0.5);
        let z: f64 = rng.gen_range(MIN_SAMPLE_DEPTH..max_depth);
        let angle_u: f64 = rng.gen_range(-1.0..=1.0);
        let mag_u: f64 = rng.gen_range(-1.0..=1.0);
        let motion = motion_vector(cfg, angle_u, mag_u);
        let q = k.unproject(px, py, z);
        let (q1, q2) = if from_second {
            (rel_inv.apply(&(q - motion)), q)
        } else {
            (q, rel.apply(&q) + motion)
        };
        if !(q1.z() > MIN_VISIBLE_Z && q2.z() > MIN_VISIBLE_Z) {
            continue;
        }
        let other = if from_second { &q1 } else { &q2 };
        if in_frustum(other, &k, w, h) {
            // halve the density on the overlap so the union is covered evenly
            let keep: bool = rng.gen();
            if !keep {
                continue;
            }
        }
        let template_seed: u64 = rng.gen();
        let angle = ChaCha8Rng::seed_from_u64(template_seed).gen_range(0.0..std::f64::consts::TAU);
        let jit = |rng: &mut ChaCha8Rng, amp: f64| {
            let u: f64 = rng.gen_range(-1.0..=1.0);
            u * amp
        };
        let [jh, jl, js] = cfg.color_jitter;
        let (dh, dl, ds) = (jit(&mut rng, jh), jit(&mut rng, jl), jit(&mut rng, js));
        let color = jitter_hls(cfg.base_color, dh, dl, ds);
        drafts.push(Draft {
            position: q1,
            motion,
            angle,
            color,
            transparency: depth_law(cfg, q1.z()),
            d1: q1.z(),
            d2: q2.z(),
        });
    }

    let base = effective_base_size(cfg, w);
    let shape_side = crate::template::round_to_odd(cfg.base_size).max(3);
    let particles = drafts
        .into_par_iter()
        .enumerate()
        .map(|(j, d)| {
            let shape = template_at_angle::<T>(cfg.template_kind, shape_side, T::lit(d.angle));
            let bb = |depth: f64| {
                Arc::new(billboard_for_depth(&shape, T::lit(base), T::lit(depth), T::lit(cfg.depth_decay)))
            };
            Particle {
                position: d.position.cast(),
                motion: d.motion.cast(),
                offset1: Vec3::zero(),
                offset2: Vec3::zero(),
                color: d.color.map(T::lit),
                transparency: T::lit(d.transparency),
                template_angle: T::lit(d.angle),
                billboards: [bb(d.d1), bb(d.d2)],
                parent: j,
                blur_fraction: T::zero(),
                blur_weight: T::one(),
                depth1: T::lit(d.d1),
                depth2: T::lit(d.d2),
            }
        })
        .collect();
    Ok(ParticleSet {
        particles,
        config: cfg.clone(),
        seed,
        parent_count: cfg.count,
        expanded: false,
    })
}

/// Replaces each particle by `K` replicas spread along `L·(m + δ_p2)` with
/// transparency `θ/K`. Replicas keep their parent's offsets, colour and
/// billboards. Identity when blur is disabled or the set is already expanded.
pub fn expand_motion_blur<T: Real>(ps: &ParticleSet<T>, rel: &RigidTransform<T>) -> ParticleSet<T> {
    if !ps.config.blur_enabled || ps.expanded {
        return ps.clone();
    }
    let k = ps.config.blur_particles.max(1);
    let weight = T::one() / T::from_usize_lossy(k);
    let length = T::lit(ps.config.blur_length);
    let mut particles = Vec::with_capacity(ps.len() * k);
    for p in &ps.particles {
        for i in 0..k {
            let frac = if k == 1 {
                T::zero()
            } else {
                T::from_usize_lossy(i) / T::from_usize_lossy(k - 1) * length
            };
            let mut r = p.clone();
            r.blur_fraction = frac;
            r.blur_weight = p.blur_weight * weight;
            r.transparency = p.transparency * weight;
            r.refresh_depths(rel);
            particles.push(r);
        }
    }
    ParticleSet {
        particles,
        config: ps.config.clone(),
        seed: ps.seed,
        parent_count: ps.parent_count,
        expanded: true,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene_io::{synth_scene, SynthSpec};

    fn scene() -> SceneBundle<f64> {
        let spec = SynthSpec::new(48, 32, Vec3::new(0.2, 0.0, 0.0), vec![4.0, 10.0]);
        synth_scene(&spec).unwrap().0
    }

    fn small(cfg: WeatherConfig) -> WeatherConfig {
        WeatherConfig { count: 40, base_size: 9.0, reference_width: 0, ..cfg }
    }

    #[test]
    fn sampled_count_and_predicate() {
        let s = scene();
        let ps = sample_particles(&s, &small(WeatherConfig::snow()), 0).unwrap();
        assert_eq!(ps.len(), 40);
        assert!(ps.particles.iter().all(|p| satisfies_frustum_predicate(p, &s)));
        assert!(ps.particles.iter().all(|p| p.offset1 == Vec3::zero() && p.offset2 == Vec3::zero()));
    }

    #[test]
    fn zero_jitter_gives_exact_vertical_motion() {
        let ps = sample_particles(&scene(), &small(WeatherConfig::snow()), 3).unwrap();
        for p in &ps.particles {
            assert_eq!(p.motion, Vec3::new(0.0, 0.2, 0.0));
            assert_eq!(p.color, [1.0, 1.0, 1.0]);
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let s = scene();
        let cfg = small(WeatherConfig::sparks());
        let a = sample_particles(&s, &cfg, 5).unwrap();
        let b = sample_particles(&s, &cfg, 5).unwrap();
        assert_eq!(a, b);
        let c = sample_particles(&s, &cfg, 6).unwrap();
        assert_ne!(a.particles[0].position, c.particles[0].position);
    }

    #[test]
    fn transparency_follows_depth_law() {
        let ps = sample_particles(&scene(), &small(WeatherConfig::snow()), 1).unwrap();
        for p in &ps.particles {
            let expect = 0.75 * (9.0 / p.depth1).min(1.0);
            assert!((p.transparency - expect).abs() < 1e-12);
        }
        let fog = sample_particles(&scene(), &small(WeatherConfig::fog()), 1).unwrap();
        assert!(fog.particles.iter().all(|p| p.transparency == 0.3));
    }

    #[test]
    fn jittered_colours_stay_in_gamut() {
        let ps = sample_particles(&scene(), &small(WeatherConfig::sparks()), 2).unwrap();
        assert!(ps.particles.iter().all(|p| p.color.iter().all(|c| (0.0..=1.0).contains(c))));
        assert!(ps.particles.iter().any(|p| p.color != ps.particles[0].color));
    }

    #[test]
    fn blur_expansion_replicates_and_conserves_transparency() {
        let s = scene();
        let cfg = WeatherConfig { blur_particles: 20, ..small(WeatherConfig::rain()) };
        let ps = sample_particles(&s, &cfg, 0).unwrap();
        let ex = expand_motion_blur(&ps, &s.relative_pose());
        assert_eq!(ex.len(), 40 * 20);
        assert_eq!(ex.parent_count, 40);
        let before = ps.total_transparency();
        let after = ex.total_transparency();
        assert!((before - after).abs() < 1e-12 * before);
        for (i, r) in ex.particles.iter().enumerate() {
            let parent = &ps.particles[i / 20];
            assert_eq!(r.parent, i / 20);
            assert!((r.transparency - parent.transparency / 20.0).abs() < 1e-15);
        }
        // last replica sits at L·m from the first
        let (a, b) = (&ex.particles[0], &ex.particles[19]);
        let d = (b.camera_points(&s.relative_pose()).0 - a.camera_points(&s.relative_pose()).0).norm();
        assert!((d - 0.15 * a.motion.norm()).abs() < 1e-12);
        // second expansion is a no-op
        assert_eq!(expand_motion_blur(&ex, &s.relative_pose()), ex);
    }

    #[test]
    fn expansion_is_identity_without_blur() {
        let s = scene();
        let ps = sample_particles(&s, &small(WeatherConfig::snow()), 0).unwrap();
        assert_eq!(expand_motion_blur(&ps, &s.relative_pose()), ps);
    }
}
