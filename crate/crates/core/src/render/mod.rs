//! Differentiable particle rendering into both frames.
//!
//! Per frame, each particle's billboard is placed at its projected centre,
//! multiplied texel-wise by the soft occlusion map `V = 1/(1 + e^{β(d−D)})`
//! and splatted bilinearly. Two commutative per-pixel sums are formed,
//! `Σθ·A` and `Σγ_c·θ·A`, from which additive or Meshkin blending is applied.
//! The image is clamped to `[0, 1]` once, after all particles.

mod backward;

use std::sync::Arc;

use rayon::prelude::*;

pub use backward::{backward, ParticleGrad};

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::image::Image;
use crate::particles::{BlendMode, Particle, ParticleSet, MIN_VISIBLE_Z};
use crate::real::{CompensatedSum, Real};
use crate::scene_io::SceneBundle;
use crate::template::Template;

pub const BETA_RENDER: f64 = 250.0;
pub const BETA_DIFFERENTIATE: f64 = 30.0;

/// Particles rendered per parallel batch before sequential accumulation.
const BATCH: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RenderMode {
    Render,
    Differentiate,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderParams {
    pub beta: f64,
    pub blend: BlendMode,
}

impl RenderParams {
    pub fn new(mode: RenderMode, blend: BlendMode) -> Self {
        let beta = match mode {
            RenderMode::Render => BETA_RENDER,
            RenderMode::Differentiate => BETA_DIFFERENTIATE,
        };
        Self { beta, blend }
    }

    pub fn render(blend: BlendMode) -> Self {
        Self::new(RenderMode::Render, blend)
    }

    pub fn differentiate(blend: BlendMode) -> Self {
        Self::new(RenderMode::Differentiate, blend)
    }
}

/// Image-space placement of one particle in both frames.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection<T> {
    pub centers: [[T; 2]; 2],
    pub depths: [T; 2],
    pub visible: [bool; 2],
    pub points: [Vec3<T>; 2],
}

pub fn project_particle<T: Real>(p: &Particle<T>, scene: &SceneBundle<T>) -> Projection<T> {
    let (q1, q2) = p.camera_points(&scene.relative_pose());
    project_points(q1, q2, scene)
}

fn project_points<T: Real>(q1: Vec3<T>, q2: Vec3<T>, scene: &SceneBundle<T>) -> Projection<T> {
    let eps = T::lit(MIN_VISIBLE_Z);
    let k = &scene.intrinsics;
    let proj = |q: &Vec3<T>| {
        if q.z() > eps {
            (k.project(q), true)
        } else {
            ([T::nan(), T::nan()], false)
        }
    };
    let (c1, v1) = proj(&q1);
    let (c2, v2) = proj(&q2);
    Projection {
        centers: [c1, c2],
        depths: [q1.z(), q2.z()],
        visible: [v1, v2],
        points: [q1, q2],
    }
}

/// Soft occlusion `1/(1 + e^{β(d−D)})`, evaluated without overflow.
#[inline]
pub fn visibility<T: Real>(d: T, scene_depth: T, beta: T) -> T {
    let x = beta * (d - scene_depth);
    if x > T::zero() {
        let e = (-x).exp();
        e / (T::one() + e)
    } else {
        T::one() / (T::one() + x.exp())
    }
}

pub fn visibility_map<T: Real>(d: T, depth_crop: &[T], beta: T) -> Vec<T> {
    depth_crop.iter().map(|&dd| visibility(d, dd, beta)).collect()
}

/// Window of image pixels touched by a placed billboard.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Footprint<T> {
    /// `floor(centre)`.
    pub bx: isize,
    pub by: isize,
    /// Fractional part of the centre; shared by every texel.
    pub fx: T,
    pub fy: T,
    pub ax: isize,
    pub ay: isize,
    /// Texel ranges whose bilinear support meets the image.
    pub tx: (usize, usize),
    pub ty: (usize, usize),
}

impl<T: Real> Footprint<T> {
    pub fn new(center: [T; 2], tpl: &Template<T>, width: usize, height: usize) -> Option<Self> {
        let reach = |c: T, n: usize, side: usize| {
            let m = T::from_usize_lossy(side + 2);
            c.is_finite() && c > -m && c < T::from_usize_lossy(n) + m
        };
        if !(reach(center[0], width, tpl.width()) && reach(center[1], height, tpl.height())) {
            return None;
        }
        let (fx0, fy0) = (center[0].floor(), center[1].floor());
        let bx = fx0.to_isize()?;
        let by = fy0.to_isize()?;
        let (ax, ay) = tpl.anchor();
        let (ax, ay) = (ax as isize, ay as isize);
        // pixel x0 = bx + tx − ax must satisfy −1 ≤ x0 ≤ W − 1
        let range = |b: isize, a: isize, n: usize, len: usize| {
            let lo = (a - 1 - b).max(0);
            let hi = (n as isize - 1 + a - b).min(len as isize - 1);
            (lo <= hi).then(|| (lo as usize, hi as usize + 1))
        };
        let tx = range(bx, ax, width, tpl.width())?;
        let ty = range(by, ay, height, tpl.height())?;
        Some(Self {
            bx,
            by,
            fx: center[0] - fx0,
            fy: center[1] - fy0,
            ax,
            ay,
            tx,
            ty,
        })
    }

    /// Image position of texel `(tx, ty)`.
    #[inline]
    pub fn texel_position(&self, tx: usize, ty: usize) -> (T, T) {
        let ox = T::from_isize(self.bx + tx as isize - self.ax).unwrap() + self.fx;
        let oy = T::from_isize(self.by + ty as isize - self.ay).unwrap() + self.fy;
        (ox, oy)
    }

    #[inline]
    pub fn corner(&self, tx: usize, ty: usize) -> (isize, isize) {
        (self.bx + tx as isize - self.ax, self.by + ty as isize - self.ay)
    }

    /// Bilinear weights for corners `(0,0), (1,0), (0,1), (1,1)`.
    #[inline]
    pub fn weights(&self) -> [T; 4] {
        let one = T::one();
        [
            (one - self.fx) * (one - self.fy),
            self.fx * (one - self.fy),
            (one - self.fx) * self.fy,
            self.fx * self.fy,
        ]
    }
}

pub(crate) const CORNERS: [(isize, isize); 4] = [(0, 0), (1, 0), (0, 1), (1, 1)];

/// Dense patch of the splatted, visibility-weighted billboard `A`.
#[derive(Debug, Clone)]
pub struct Tile<T> {
    pub x0: usize,
    pub y0: usize,
    pub width: usize,
    pub height: usize,
    pub data: Vec<T>,
}

impl<T: Real> Tile<T> {
    pub fn get(&self, x: usize, y: usize) -> T {
        self.data[(y - self.y0) * self.width + (x - self.x0)]
    }
}

/// Splats `weight(tx, ty, px, py) · bilinear` for each texel into a tile.
/// Contributions landing outside the image are dropped.
pub(crate) fn splat_tile<T: Real>(
    fp: &Footprint<T>,
    width: usize,
    height: usize,
    mut texel_value: impl FnMut(usize, usize, T, T) -> T,
) -> Tile<T> {
    let x0 = (fp.bx + fp.tx.0 as isize - fp.ax).max(0) as usize;
    let y0 = (fp.by + fp.ty.0 as isize - fp.ay).max(0) as usize;
    let x1 = ((fp.bx + fp.tx.1 as isize - fp.ax) as usize).min(width - 1);
    let y1 = ((fp.by + fp.ty.1 as isize - fp.ay) as usize).min(height - 1);
    let (tw, th) = (x1 + 1 - x0, y1 + 1 - y0);
    let mut data = vec![T::zero(); tw * th];
    let w = fp.weights();
    for ty in fp.ty.0..fp.ty.1 {
        for tx in fp.tx.0..fp.tx.1 {
            let (px, py) = fp.texel_position(tx, ty);
            let a = texel_value(tx, ty, px, py);
            if a == T::zero() {
                continue;
            }
            let (cx, cy) = fp.corner(tx, ty);
            for (k, (dx, dy)) in CORNERS.iter().enumerate() {
                let (x, y) = (cx + dx, cy + dy);
                if x < 0 || y < 0 || x as usize >= width || y as usize >= height {
                    continue;
                }
                let i = (y as usize - y0) * tw + (x as usize - x0);
                data[i] += a * w[k];
            }
        }
    }
    Tile {
        x0,
        y0,
        width: tw,
        height: th,
        data,
    }
}

/// Adds `template ⊙ weight_map` at subpixel `center` into a one-channel
/// accumulator with bilinear weights. `weight_map` shares the template's shape.
pub fn splat<T: Real>(acc: &mut Image<T>, template: &Template<T>, center: [T; 2], weight_map: Option<&[T]>) {
    assert_eq!(acc.channels(), 1, "accumulator must be single channel");
    let (w, h) = acc.dims();
    let Some(fp) = Footprint::new(center, template, w, h) else { return };
    let tw = template.width();
    let tile = splat_tile(&fp, w, h, |tx, ty, _, _| {
        let v = weight_map.map_or(T::one(), |m| m[ty * tw + tx]);
        template.get(tx, ty) * v
    });
    for y in 0..tile.height {
        for x in 0..tile.width {
            let (gx, gy) = (tile.x0 + x, tile.y0 + y);
            let cur = acc.get(gx, gy, 0);
            acc.set(gx, gy, 0, cur + tile.data[y * tile.width + x]);
        }
    }
}

/// Splatted occlusion-weighted billboard of particle `p` in frame `t`.
pub(crate) fn particle_tile<T: Real>(
    p: &Particle<T>,
    proj: &Projection<T>,
    t: usize,
    depth: &Image<T>,
    beta: T,
) -> Option<Tile<T>> {
    if !proj.visible[t] {
        return None;
    }
    let tpl = &p.billboards[t];
    let fp = Footprint::new(proj.centers[t], tpl, depth.width(), depth.height())?;
    let d = proj.depths[t];
    Some(splat_tile(&fp, depth.width(), depth.height(), |tx, ty, px, py| {
        let b = tpl.get(tx, ty);
        if b == T::zero() {
            return T::zero();
        }
        b * visibility(d, depth.sample_bilinear(px, py, 0), beta)
    }))
}

/// Everything the adjoint pass needs; immutable once built.
#[derive(Debug, Clone)]
pub struct RenderTape<T> {
    pub(crate) scene: Arc<SceneBundle<T>>,
    pub(crate) particles: Arc<ParticleSet<T>>,
    pub(crate) projections: Vec<Projection<T>>,
    pub(crate) params: RenderParams,
    /// Blended images before clamping.
    pub(crate) unclamped: [Image<T>; 2],
}

impl<T: Real> RenderTape<T> {
    pub fn params(&self) -> RenderParams {
        self.params
    }
    pub fn projections(&self) -> &[Projection<T>] {
        &self.projections
    }
    pub fn unclamped(&self, t: usize) -> &Image<T> {
        &self.unclamped[t]
    }
    pub fn parent_count(&self) -> usize {
        self.particles.parent_count
    }
}

#[derive(Debug, Clone)]
pub struct RenderOutput<T> {
    pub aug1: Image<T>,
    pub aug2: Image<T>,
    pub tape: RenderTape<T>,
}

struct Accumulators<T> {
    alpha: Vec<CompensatedSum<T>>,
    color: Vec<CompensatedSum<T>>,
}

pub fn render<T: Real>(scene: &SceneBundle<T>, ps: &ParticleSet<T>, params: RenderParams) -> Result<RenderOutput<T>> {
    render_shared(Arc::new(scene.clone()), Arc::new(ps.clone()), params)
}

pub fn render_shared<T: Real>(
    scene: Arc<SceneBundle<T>>,
    ps: Arc<ParticleSet<T>>,
    params: RenderParams,
) -> Result<RenderOutput<T>> {
    if !(params.beta > 0.0) {
        return Err(Error::Contract("occlusion sharpness β must be positive".into()));
    }
    if ps.config.blur_enabled && !ps.expanded && ps.config.blur_particles > 1 {
        return Err(Error::Contract("motion blur is configured but the particle set is not expanded".into()));
    }
    let beta = T::lit(params.beta);
    let (w, h) = (scene.width(), scene.height());
    let projections: Vec<Projection<T>> = ps
        .particles
        .par_iter()
        .map(|p| project_particle(p, &scene))
        .collect();

    let mut unclamped = Vec::with_capacity(2);
    for t in 0..2 {
        let mut acc = Accumulators {
            alpha: vec![CompensatedSum::new(); w * h],
            color: vec![CompensatedSum::new(); w * h * 3],
        };
        let depth = scene.depth(t);
        for (chunk_idx, chunk) in ps.particles.chunks(BATCH).enumerate() {
            let base = chunk_idx * BATCH;
            let tiles: Vec<Option<Tile<T>>> = chunk
                .par_iter()
                .enumerate()
                .map(|(i, p)| particle_tile(p, &projections[base + i], t, depth, beta))
                .collect();
            for (p, tile) in chunk.iter().zip(tiles) {
                let Some(tile) = tile else { continue };
                for y in 0..tile.height {
                    for x in 0..tile.width {
                        let a = tile.data[y * tile.width + x];
                        if a == T::zero() {
                            continue;
                        }
                        let ta = p.transparency * a;
                        let pix = (tile.y0 + y) * w + tile.x0 + x;
                        acc.alpha[pix].add(ta);
                        for c in 0..3 {
                            acc.color[pix * 3 + c].add(p.color[c] * ta);
                        }
                    }
                }
            }
        }
        let frame = scene.frame(t);
        let mut out = Image::zeros(w, h, 3);
        let data = out.data_mut();
        for pix in 0..w * h {
            let sa = acc.alpha[pix].value();
            for c in 0..3 {
                let i = pix * 3 + c;
                let base = frame.data()[i];
                let sc = acc.color[i].value();
                data[i] = match params.blend {
                    BlendMode::Additive => base + sc,
                    BlendMode::Meshkin => base * (T::one() - sa) + sc,
                };
            }
        }
        unclamped.push(out);
    }
    let clamp = |img: &Image<T>| {
        let mut c = img.clone();
        for v in c.data_mut() {
            *v = v.max(T::zero()).min(T::one());
        }
        c
    };
    let aug1 = clamp(&unclamped[0]);
    let aug2 = clamp(&unclamped[1]);
    let u2 = unclamped.pop().unwrap();
    let u1 = unclamped.pop().unwrap();
    Ok(RenderOutput {
        aug1,
        aug2,
        tape: RenderTape {
            scene,
            particles: ps,
            projections,
            params,
            unclamped: [u1, u2],
        },
    })
}

/// Per-particle CSV: id, both image centres, both depths, mean visibility.
pub fn debug_dump<T: Real>(scene: &SceneBundle<T>, ps: &ParticleSet<T>, params: RenderParams) -> String {
    let beta = T::lit(params.beta);
    let mut s = String::from("id,u1,v1,u2,v2,d1,d2,mean_v1,mean_v2\n");
    for (i, p) in ps.particles.iter().enumerate() {
        let proj = project_particle(p, scene);
        let mut means = [T::nan(); 2];
        for (t, m) in means.iter_mut().enumerate() {
            if !proj.visible[t] {
                continue;
            }
            let tpl = &p.billboards[t];
            let Some(fp) = Footprint::new(proj.centers[t], tpl, scene.width(), scene.height()) else { continue };
            let mut acc = CompensatedSum::new();
            let mut n = 0usize;
            for ty in fp.ty.0..fp.ty.1 {
                for tx in fp.tx.0..fp.tx.1 {
                    let (px, py) = fp.texel_position(tx, ty);
                    acc.add(visibility(proj.depths[t], scene.depth(t).sample_bilinear(px, py, 0), beta));
                    n += 1;
                }
            }
            *m = acc.value() / T::from_usize_lossy(n.max(1));
        }
        s.push_str(&format!(
            "{i},{},{},{},{},{},{},{},{}\n",
            proj.centers[0][0], proj.centers[0][1], proj.centers[1][0], proj.centers[1][1],
            proj.depths[0], proj.depths[1], means[0], means[1]
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Intrinsics, RigidTransform};

    #[test]
    fn visibility_spot_values() {
        assert_eq!(visibility(2.0f64, 2.0, 250.0), 0.5);
        let v = visibility(2.1f64, 2.0, 250.0);
        let expect = 1.0 / (1.0 + 25.0f64.exp());
        assert!((v - expect).abs() < 1e-20);
        assert!(v <= 1e-10);
        let v = visibility(1.9f64, 2.0, 30.0);
        assert!((v - 0.952_574_126_822_433_4).abs() < 1e-12);
        // saturation instead of overflow
        assert_eq!(visibility(1e6f64, 0.0, 250.0), 0.0);
        assert_eq!(visibility(-1e6f64, 0.0, 250.0), 1.0);
        assert_eq!(visibility_map(1.0f64, &[1.0, 1.0], 30.0), vec![0.5, 0.5]);
    }

    fn flat_scene(w: usize, h: usize, f: f64) -> SceneBundle<f64> {
        SceneBundle {
            frame1: Image::zeros(w, h, 3),
            frame2: Image::zeros(w, h, 3),
            depth1: Image::filled(w, h, 1, 5.0),
            depth2: Image::filled(w, h, 1, 5.0),
            pose1: RigidTransform::identity(),
            pose2: RigidTransform::identity(),
            intrinsics: Intrinsics::new(f, f, (w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0),
        }
    }

    fn particle(pos: Vec3<f64>, tpl: Template<f64>) -> Particle<f64> {
        let tpl = Arc::new(tpl);
        Particle {
            position: pos,
            motion: Vec3::zero(),
            offset1: Vec3::zero(),
            offset2: Vec3::zero(),
            color: [1.0; 3],
            transparency: 1.0,
            template_angle: 0.0,
            billboards: [tpl.clone(), tpl],
            parent: 0,
            blur_fraction: 0.0,
            blur_weight: 1.0,
            depth1: pos.z(),
            depth2: pos.z(),
        }
    }

    #[test]
    fn optical_axis_projects_to_principal_point() {
        let s = flat_scene(9, 7, 50.0);
        let p = particle(Vec3::new(0.0, 0.0, 3.0), Template::impulse(3));
        let pr = project_particle(&p, &s);
        assert_eq!(pr.centers[0], [4.0, 3.0]);
        assert_eq!(pr.depths, [3.0, 3.0]);
    }

    #[test]
    fn offset_after_motion_shifts_second_centre() {
        let s = flat_scene(9, 7, 50.0);
        let mut p = particle(Vec3::new(0.0, 0.0, 2.0), Template::impulse(3));
        p.offset2 = Vec3::new(0.0, 0.04, 0.0);
        let pr = project_particle(&p, &s);
        assert_eq!(pr.centers[0], [4.0, 3.0]);
        assert!((pr.centers[1][1] - (3.0 + 50.0 * 0.04 / 2.0)).abs() < 1e-12);
    }

    #[test]
    fn behind_camera_is_invisible() {
        let s = flat_scene(9, 7, 50.0);
        let mut p = particle(Vec3::new(0.0, 0.0, 1.0), Template::impulse(3));
        p.offset2 = Vec3::new(0.0, 0.0, -2.0);
        let pr = project_particle(&p, &s);
        assert_eq!(pr.visible, [true, false]);
    }

    #[test]
    fn splat_integer_and_half_pixel() {
        let tpl = Template::impulse(1);
        let mut acc = Image::<f64>::zeros(4, 3, 1);
        splat(&mut acc, &tpl, [1.0, 1.0], None);
        assert_eq!(acc.get(1, 1, 0), 1.0);
        assert_eq!(acc.data().iter().sum::<f64>(), 1.0);
        let mut acc = Image::<f64>::zeros(4, 3, 1);
        splat(&mut acc, &tpl, [1.5, 1.0], None);
        assert_eq!(acc.get(1, 1, 0), 0.5);
        assert_eq!(acc.get(2, 1, 0), 0.5);
    }

    #[test]
    fn splat_conserves_mass_inside_and_clips_outside() {
        let tpl = crate::template::make_template::<f64>(crate::template::TemplateKind::Flake, 7, 2);
        let mut acc = Image::<f64>::zeros(20, 20, 1);
        splat(&mut acc, &tpl, [9.3, 10.7], None);
        let total: f64 = acc.data().iter().sum();
        assert!((total - tpl.mass()).abs() < 1e-9);
        let mut acc = Image::<f64>::zeros(20, 20, 1);
        splat(&mut acc, &tpl, [-0.2, 10.0], None);
        let clipped: f64 = acc.data().iter().sum();
        assert!(clipped < tpl.mass() && clipped > 0.0);
        let mut acc = Image::<f64>::zeros(20, 20, 1);
        splat(&mut acc, &tpl, [-30.0, 10.0], None);
        assert!(acc.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn meshkin_full_coverage_takes_particle_colour() {
        let mut s = flat_scene(5, 5, 10.0);
        s.frame1 = Image::filled(5, 5, 3, 0.3);
        s.frame2 = s.frame1.clone();
        let mut p = particle(Vec3::new(0.0, 0.0, 1.0), Template::impulse(1));
        p.color = [0.2, 0.6, 0.9];
        let ps = ParticleSet {
            particles: vec![p],
            config: crate::particles::WeatherConfig::grey(),
            seed: 0,
            parent_count: 1,
            expanded: false,
        };
        let out = render(&s, &ps, RenderParams::render(BlendMode::Meshkin)).unwrap();
        for c in 0..3 {
            assert!((out.aug1.get(2, 2, c) - [0.2, 0.6, 0.9][c]).abs() < 1e-15);
        }
        assert_eq!(out.aug1.get(0, 0, 0), 0.3);
    }

    #[test]
    fn empty_set_leaves_frames_untouched() {
        let mut s = flat_scene(6, 4, 10.0);
        s.frame1 = Image::from_fn(6, 4, 3, |x, y, c| (x + y + c) as f64 / 20.0);
        let ps = ParticleSet::empty(crate::particles::WeatherConfig::snow());
        for blend in [BlendMode::Additive, BlendMode::Meshkin] {
            let out = render(&s, &ps, RenderParams::render(blend)).unwrap();
            assert_eq!(out.aug1, s.frame1);
            assert_eq!(out.aug2, s.frame2);
        }
    }

    #[test]
    fn unexpanded_blur_set_is_rejected() {
        let s = flat_scene(6, 4, 10.0);
        let ps = ParticleSet::<f64>::empty(crate::particles::WeatherConfig::rain());
        assert!(render(&s, &ps, RenderParams::render(BlendMode::Additive)).is_err());
    }
}
