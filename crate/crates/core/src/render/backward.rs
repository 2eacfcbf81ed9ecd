//! Reverse-mode adjoint of [`render`](super::render).

use rayon::prelude::*;

use super::{visibility, Footprint, Projection, RenderTape, CORNERS};
use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::image::Image;
use crate::particles::{BlendMode, Particle};
use crate::real::Real;
use crate::scene_io::SceneBundle;

/// Gradient with respect to one parent particle's optimisable parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParticleGrad<T> {
    pub offset1: Vec3<T>,
    pub offset2: Vec3<T>,
    pub color: [T; 3],
    pub transparency: T,
}

impl<T: Real> Default for ParticleGrad<T> {
    fn default() -> Self {
        Self {
            offset1: Vec3::zero(),
            offset2: Vec3::zero(),
            color: [T::zero(); 3],
            transparency: T::zero(),
        }
    }
}

impl<T: Real> ParticleGrad<T> {
    pub fn is_finite(&self) -> bool {
        self.offset1.is_finite()
            && self.offset2.is_finite()
            && self.color.iter().all(|c| c.is_finite())
            && self.transparency.is_finite()
    }

    fn accumulate(&mut self, o: &Self) {
        self.offset1 += o.offset1;
        self.offset2 += o.offset2;
        for c in 0..3 {
            self.color[c] += o.color[c];
        }
        self.transparency += o.transparency;
    }
}

/// Upstream gradients mapped through the clamp and the blend.
struct PixelAdjoint<T> {
    /// `∂L/∂Σθ·A`, one channel.
    alpha: Vec<T>,
    /// `∂L/∂Σγ_cθ·A`, three channels.
    color: Vec<T>,
}

fn pixel_adjoint<T: Real>(unclamped: &Image<T>, frame: &Image<T>, g: &Image<T>, blend: BlendMode) -> PixelAdjoint<T> {
    let n = unclamped.width() * unclamped.height();
    let mut alpha = vec![T::zero(); n];
    let mut color = vec![T::zero(); n * 3];
    for pix in 0..n {
        for c in 0..3 {
            let i = pix * 3 + c;
            let v = unclamped.data()[i];
            let gc = if v >= T::zero() && v <= T::one() { g.data()[i] } else { T::zero() };
            color[i] = gc;
            if blend == BlendMode::Meshkin {
                alpha[pix] -= gc * frame.data()[i];
            }
        }
    }
    PixelAdjoint { alpha, color }
}

/// Gradient of one (possibly replica) particle in one frame, expressed on
/// its image centre `(u, v)`, its depth `d`, colour and transparency.
#[derive(Default, Clone, Copy)]
struct FrameGrad<T> {
    center: [T; 2],
    depth: T,
    color: [T; 3],
    transparency: T,
}

fn frame_grad<T: Real>(
    p: &Particle<T>,
    proj: &Projection<T>,
    t: usize,
    depth: &Image<T>,
    adj: &PixelAdjoint<T>,
    beta: T,
) -> Option<FrameGrad<T>> {
    if !proj.visible[t] {
        return None;
    }
    let (w, h) = depth.dims();
    let tpl = &p.billboards[t];
    let fp = Footprint::new(proj.centers[t], tpl, w, h)?;
    let d = proj.depths[t];
    let one = T::one();
    let wts = fp.weights();
    // ∂w/∂fx and ∂w/∂fy for the corners (0,0), (1,0), (0,1), (1,1)
    let dwx = [-(one - fp.fy), one - fp.fy, -fp.fy, fp.fy];
    let dwy = [-(one - fp.fx), -fp.fx, one - fp.fx, fp.fx];
    let theta = p.transparency;
    let gamma = p.color;
    let mut out = FrameGrad::<T>::default();
    for ty in fp.ty.0..fp.ty.1 {
        for tx in fp.tx.0..fp.tx.1 {
            let b = tpl.get(tx, ty);
            if b == T::zero() {
                continue;
            }
            let (cx, cy) = fp.corner(tx, ty);
            // s = Σ_k w_k·H(corner_k), and its fx/fy derivatives
            let mut s = T::zero();
            let mut sx = T::zero();
            let mut sy = T::zero();
            let mut sc = [T::zero(); 3];
            for (k, (dx, dy)) in CORNERS.iter().enumerate() {
                let (x, y) = (cx + dx, cy + dy);
                if x < 0 || y < 0 || x as usize >= w || y as usize >= h {
                    continue;
                }
                let pix = y as usize * w + x as usize;
                let mut hval = adj.alpha[pix];
                for c in 0..3 {
                    let gc = adj.color[pix * 3 + c];
                    hval += gamma[c] * gc;
                    sc[c] += wts[k] * gc;
                }
                s += wts[k] * hval;
                sx += dwx[k] * hval;
                sy += dwy[k] * hval;
            }
            let (px, py) = fp.texel_position(tx, ty);
            let (dval, ddx, ddy) = depth.sample_bilinear_grad(px, py, 0);
            let v = visibility(d, dval, beta);
            let a = b * v;
            out.transparency += a * s;
            for c in 0..3 {
                out.color[c] += theta * a * sc[c];
            }
            // ∂a/∂D = b·β·V(1−V) = −∂a/∂d
            let ga = theta * s;
            let sv = ga * b * beta * v * (one - v);
            out.depth -= sv;
            out.center[0] += theta * a * sx + sv * ddx;
            out.center[1] += theta * a * sy + sv * ddy;
        }
    }
    Some(out)
}

/// Gradient of `⟨G1, Φ1⟩ + ⟨G2, Φ2⟩` with respect to each parent particle,
/// where `Φt` are the clamped augmented frames recorded on `tape`.
pub fn backward<T: Real>(tape: &RenderTape<T>, g1: &Image<T>, g2: &Image<T>) -> Result<Vec<ParticleGrad<T>>> {
    let scene: &SceneBundle<T> = &tape.scene;
    for g in [g1, g2] {
        if g.dims() != scene.frame1.dims() || g.channels() != 3 {
            return Err(Error::Contract("upstream gradient must match the frame shape".into()));
        }
    }
    let beta = T::lit(tape.params.beta);
    let adj = [
        pixel_adjoint(&tape.unclamped[0], &scene.frame1, g1, tape.params.blend),
        pixel_adjoint(&tape.unclamped[1], &scene.frame2, g2, tape.params.blend),
    ];
    let rel = scene.relative_pose();
    let rt = rel.rotation.transpose();
    let k = scene.intrinsics;
    let particles = &tape.particles.particles;

    let per_particle: Vec<ParticleGrad<T>> = particles
        .par_iter()
        .zip(tape.projections.par_iter())
        .map(|(p, proj)| {
            let mut gq = [Vec3::zero(); 2];
            let mut g = ParticleGrad::default();
            for t in 0..2 {
                let Some(fg) = frame_grad(p, proj, t, scene.depth(t), &adj[t], beta) else { continue };
                let q = proj.points[t];
                let z = q.z();
                let (gu, gv) = (fg.center[0], fg.center[1]);
                gq[t] = Vec3::new(
                    gu * k.fx / z,
                    gv * k.fy / z,
                    -(gu * k.fx * q.x() + gv * k.fy * q.y()) / (z * z) + fg.depth,
                );
                for c in 0..3 {
                    g.color[c] += fg.color[c];
                }
                g.transparency += fg.transparency * p.blur_weight;
            }
            let g1_total = gq[0] + rt.mul_vec(&gq[1]);
            g.offset1 = g1_total;
            g.offset2 = g1_total.scale(p.blur_fraction) + gq[1];
            g
        })
        .collect();

    let mut out = vec![ParticleGrad::default(); tape.particles.parent_count];
    for (p, g) in particles.iter().zip(&per_particle) {
        let slot = out
            .get_mut(p.parent)
            .ok_or_else(|| Error::Contract(format!("parent index {} out of range", p.parent)))?;
        slot.accumulate(g);
    }
    Ok(out)
}
