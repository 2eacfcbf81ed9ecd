//! Brute-force references for tests: a per-pixel renderer that shares no code
//! with [`crate::render`], central finite differences and reprojection flow.
//!
//! Only data types are borrowed from the rest of the crate.

use crate::error::{Error, Result};
use crate::flow_field::FlowField;
use crate::image::Image;
use crate::particles::{BlendMode, ParticleSet};
use crate::scene_io::SceneBundle;

pub const MAX_ORACLE_SIDE: usize = 64;
pub const MAX_ORACLE_PARTICLES: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleTolerance {
    pub fd_step_position: f64,
    pub fd_step_eta: f64,
    pub rel_tol: f64,
    pub abs_floor: f64,
}

impl Default for OracleTolerance {
    fn default() -> Self {
        Self {
            fd_step_position: 1e-4,
            fd_step_eta: 1e-3,
            rel_tol: 1e-3,
            abs_floor: 1e-8,
        }
    }
}

impl OracleTolerance {
    /// `|a − b| / max(|a|, |b|, abs_floor)`.
    pub fn relative_error(&self, a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(self.abs_floor)
    }

    pub fn agrees(&self, a: f64, b: f64) -> bool {
        self.relative_error(a, b) <= self.rel_tol
    }
}

/// Clamped bilinear lookup, written out longhand.
fn lookup(img: &Image<f64>, x: f64, y: f64) -> f64 {
    let (w, h) = img.dims();
    let xc = x.max(0.0).min((w - 1) as f64);
    let yc = y.max(0.0).min((h - 1) as f64);
    let mut acc = 0.0;
    for yy in 0..h {
        let wy = 1.0 - (yc - yy as f64).abs();
        if wy <= 0.0 {
            continue;
        }
        for xx in 0..w {
            let wx = 1.0 - (xc - xx as f64).abs();
            if wx > 0.0 {
                acc += wx * wy * img.get(xx, yy, 0);
            }
        }
    }
    acc
}

fn sigmoid_visibility(d: f64, depth: f64, beta: f64) -> f64 {
    let z = beta * (d - depth);
    if z > 700.0 {
        0.0
    } else {
        1.0 / (1.0 + z.exp())
    }
}

struct Placed {
    u: f64,
    v: f64,
    depth: f64,
}

/// Camera-t projection of a particle, from the raw fields.
fn place(scene: &SceneBundle<f64>, ps: &ParticleSet<f64>, j: usize, t: usize) -> Option<Placed> {
    let p = &ps.particles[j];
    let m: Vec<f64> = (0..3).map(|i| p.motion.0[i] + p.offset2.0[i]).collect();
    let q1: Vec<f64> = (0..3)
        .map(|i| p.position.0[i] + p.offset1.0[i] + p.blur_fraction * m[i])
        .collect();
    // T_rel = T2 · T1⁻¹ with rigid 4×4 matrices
    let a = scene.pose1.to_row_major();
    let b = scene.pose2.to_row_major();
    let mut inv1 = [0.0; 16];
    for r in 0..3 {
        for c in 0..3 {
            inv1[r * 4 + c] = a[c * 4 + r];
        }
        inv1[r * 4 + 3] = -(0..3).map(|c| a[c * 4 + r] * a[c * 4 + 3]).sum::<f64>();
    }
    inv1[15] = 1.0;
    let mut rel = [0.0; 16];
    for r in 0..4 {
        for c in 0..4 {
            rel[r * 4 + c] = (0..4).map(|k| b[r * 4 + k] * inv1[k * 4 + c]).sum();
        }
    }
    let q: Vec<f64> = if t == 0 {
        q1
    } else {
        (0..3)
            .map(|r| (0..3).map(|c| rel[r * 4 + c] * q1[c]).sum::<f64>() + rel[r * 4 + 3] + m[r])
            .collect()
    };
    if q[2] <= 1e-6 {
        return None;
    }
    let k = scene.intrinsics.to_row_major();
    Some(Placed {
        u: (k[0] * q[0] + k[1] * q[1] + k[2] * q[2]) / q[2],
        v: (k[3] * q[0] + k[4] * q[1] + k[5] * q[2]) / q[2],
        depth: q[2],
    })
}

/// Evaluates the blending formulas pixel by pixel with explicit loops over
/// particles and template texels; each texel contributes through the tent
/// kernel `max(0, 1−|Δx|)·max(0, 1−|Δy|)`.
pub fn naive_render(
    scene: &SceneBundle<f64>,
    ps: &ParticleSet<f64>,
    beta: f64,
    blend: BlendMode,
) -> Result<(Image<f64>, Image<f64>)> {
    let (w, h) = (scene.width(), scene.height());
    if w > MAX_ORACLE_SIDE || h > MAX_ORACLE_SIDE || ps.len() > MAX_ORACLE_PARTICLES {
        return Err(Error::Contract(format!(
            "oracle limited to {MAX_ORACLE_SIDE}×{MAX_ORACLE_SIDE} and {MAX_ORACLE_PARTICLES} particles"
        )));
    }
    let mut out = Vec::new();
    for t in 0..2 {
        let frame = if t == 0 { &scene.frame1 } else { &scene.frame2 };
        let depth = if t == 0 { &scene.depth1 } else { &scene.depth2 };
        let placed: Vec<Option<Placed>> = (0..ps.len()).map(|j| place(scene, ps, j, t)).collect();
        let mut img = frame.clone();
        for y in 0..h {
            for x in 0..w {
                let mut sum_a = 0.0;
                let mut sum_c = [0.0; 3];
                for (j, pl) in placed.iter().enumerate() {
                    let Some(pl) = pl else { continue };
                    let p = &ps.particles[j];
                    let tpl = &p.billboards[t];
                    let (tw, th) = (tpl.width(), tpl.height());
                    let mut a = 0.0;
                    for ty in 0..th {
                        for tx in 0..tw {
                            let px = pl.u + tx as f64 - (tw / 2) as f64;
                            let py = pl.v + ty as f64 - (th / 2) as f64;
                            let kx = 1.0 - (px - x as f64).abs();
                            let ky = 1.0 - (py - y as f64).abs();
                            if kx <= 0.0 || ky <= 0.0 {
                                continue;
                            }
                            let vis = sigmoid_visibility(pl.depth, lookup(depth, px, py), beta);
                            a += tpl.data()[ty * tw + tx] * vis * kx * ky;
                        }
                    }
                    sum_a += p.transparency * a;
                    for c in 0..3 {
                        sum_c[c] += p.color[c] * p.transparency * a;
                    }
                }
                for c in 0..3 {
                    let base = frame.get(x, y, c);
                    let v = match blend {
                        BlendMode::Additive => base + sum_c[c],
                        BlendMode::Meshkin => base * (1.0 - sum_a) + sum_c[c],
                    };
                    img.set(x, y, c, v.clamp(0.0, 1.0));
                }
            }
        }
        out.push(img);
    }
    let b = out.pop().unwrap();
    let a = out.pop().unwrap();
    Ok((a, b))
}

/// Central differences `(f(x + h·e_i) − f(x − h·e_i)) / 2h` per coordinate.
pub fn fd_gradient(mut f: impl FnMut(&[f64]) -> f64, params: &[f64], step: f64) -> Vec<f64> {
    let mut x = params.to_vec();
    (0..x.len())
        .map(|i| {
            let x0 = x[i];
            x[i] = x0 + step;
            let fp = f(&x);
            x[i] = x0 - step;
            let fm = f(&x);
            x[i] = x0;
            (fp - fm) / (2.0 * step)
        })
        .collect()
}

/// Central difference of `f` along a single direction.
pub fn fd_directional(mut f: impl FnMut(f64) -> f64, step: f64) -> f64 {
    (f(step) - f(-step)) / (2.0 * step)
}

/// Flow obtained by lifting every frame-1 pixel with its depth and
/// reprojecting it into camera 2.
pub fn reprojection_flow(scene: &SceneBundle<f64>) -> FlowField<f64> {
    let k = scene.intrinsics;
    let rel = scene.relative_pose();
    FlowField::from_fn(scene.width(), scene.height(), |x, y| {
        let z = scene.depth1.get(x, y, 0);
        let p = [(x as f64 - k.cx) / k.fx * z, (y as f64 - k.cy) / k.fy * z, z];
        let r = &rel.rotation.0;
        let q: Vec<f64> = (0..3)
            .map(|i| r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2] + rel.translation.0[i])
            .collect();
        (k.fx * q[0] / q[2] + k.cx - x as f64, k.fy * q[1] / q[2] + k.cy - y as f64)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fd_is_exact_on_quadratics() {
        let f = |x: &[f64]| 3.0 * x[0] * x[0] - 2.0 * x[0] * x[1] + 0.5 * x[1] * x[1];
        let g = fd_gradient(f, &[0.7, -1.3], 1e-3);
        assert!((g[0] - (6.0 * 0.7 + 2.0 * 1.3)).abs() < 1e-10);
        assert!((g[1] - (-2.0 * 0.7 - 1.3)).abs() < 1e-10);
    }

    #[test]
    fn fd_on_linear_ignores_step() {
        let f = |x: &[f64]| 4.0 * x[0] - x[1];
        for h in [1e-1, 1e-3, 1.0] {
            let g = fd_gradient(f, &[2.0, 5.0], h);
            assert!((g[0] - 4.0).abs() < 1e-12 && (g[1] + 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn tolerance_uses_floor() {
        let t = OracleTolerance::default();
        assert!(t.agrees(1.0, 1.0005));
        assert!(!t.agrees(1.0, 1.01));
        assert!(t.agrees(0.0, 1e-12));
    }
}
