//! Coarse-to-fine Horn–Schunck flow with an exact reverse-mode adjoint.
//!
//! Per level the second image is warped once by the upsampled coarse flow
//! `u0`, the brightness constancy constraint is linearised around it and a
//! fixed number of Jacobi sweeps is applied to the total flow. Every iterate
//! is kept on the tape so the backward pass replays the sweeps in reverse.

use std::path::Path;

use crate::error::{Error, Result};
use crate::flow_field::FlowField;
use crate::image::{clamp_axis, Image};
use crate::real::Real;
use crate::scene_io::read_flo;

pub const GRAY_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];
/// Smallest side allowed at the coarsest pyramid level.
pub const MIN_LEVEL_SIDE: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowEstimatorConfig {
    pub smoothness: f64,
    pub pyramid_levels: usize,
    pub iterations_per_level: usize,
    pub downscale_factor: f64,
}

impl Default for FlowEstimatorConfig {
    fn default() -> Self {
        Self {
            smoothness: 0.1,
            pyramid_levels: 3,
            iterations_per_level: 100,
            downscale_factor: 0.5,
        }
    }
}

impl FlowEstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.smoothness > 0.0 && self.smoothness.is_finite()) {
            return Err(Error::Config("smoothness must be positive".into()));
        }
        if self.pyramid_levels == 0 {
            return Err(Error::Config("need at least one pyramid level".into()));
        }
        if self.downscale_factor != 0.5 {
            return Err(Error::Config("only a downscale factor of 0.5 is supported".into()));
        }
        Ok(())
    }

    /// Levels actually used for a `width × height` input, keeping the coarsest
    /// level at least 8×8 (a single level is always allowed).
    pub fn effective_levels(&self, width: usize, height: usize) -> usize {
        let (mut w, mut h) = (width, height);
        let mut n = 1;
        while n < self.pyramid_levels {
            let (nw, nh) = (w.div_ceil(2), h.div_ceil(2));
            if nw < MIN_LEVEL_SIDE || nh < MIN_LEVEL_SIDE {
                break;
            }
            (w, h) = (nw, nh);
            n += 1;
        }
        n
    }
}

/// Single-channel raster used internally.
#[derive(Debug, Clone, PartialEq)]
struct Plane<T> {
    w: usize,
    h: usize,
    d: Vec<T>,
}

impl<T: Real> Plane<T> {
    fn zeros(w: usize, h: usize) -> Self {
        Self { w, h, d: vec![T::zero(); w * h] }
    }

    #[inline]
    fn at(&self, x: usize, y: usize) -> T {
        self.d[y * self.w + x]
    }

    /// Bracketing indices and weights of a clamped bilinear lookup, plus the
    /// derivative in x and y.
    #[inline]
    fn stencil(&self, x: T, y: T) -> ([usize; 4], [T; 4], T, T) {
        let (x0, x1, fx, xin) = clamp_axis(x, self.w);
        let (y0, y1, fy, yin) = clamp_axis(y, self.h);
        let one = T::one();
        let idx = [y0 * self.w + x0, y0 * self.w + x1, y1 * self.w + x0, y1 * self.w + x1];
        let wts = [(one - fx) * (one - fy), fx * (one - fy), (one - fx) * fy, fx * fy];
        let v = idx.map(|i| self.d[i]);
        let gx = if xin { (v[1] - v[0]) * (one - fy) + (v[3] - v[2]) * fy } else { T::zero() };
        let gy = if yin { (v[2] - v[0]) * (one - fx) + (v[3] - v[1]) * fx } else { T::zero() };
        (idx, wts, gx, gy)
    }
}

fn gray<T: Real>(img: &Image<T>) -> Plane<T> {
    let w = GRAY_WEIGHTS.map(T::lit);
    let d = img
        .data()
        .chunks_exact(3)
        .map(|p| w[0] * p[0] + w[1] * p[1] + w[2] * p[2])
        .collect();
    Plane { w: img.width(), h: img.height(), d }
}

fn downsample<T: Real>(p: &Plane<T>) -> Plane<T> {
    let (w, h) = (p.w.div_ceil(2), p.h.div_ceil(2));
    let q = T::lit(0.25);
    let mut out = Plane::zeros(w, h);
    for y in 0..h {
        let (ya, yb) = (2 * y, (2 * y + 1).min(p.h - 1));
        for x in 0..w {
            let (xa, xb) = (2 * x, (2 * x + 1).min(p.w - 1));
            out.d[y * w + x] = q * (p.at(xa, ya) + p.at(xb, ya) + p.at(xa, yb) + p.at(xb, yb));
        }
    }
    out
}

fn downsample_adjoint<T: Real>(g: &Plane<T>, fine: &mut Plane<T>) {
    let q = T::lit(0.25);
    for y in 0..g.h {
        let (ya, yb) = (2 * y, (2 * y + 1).min(fine.h - 1));
        for x in 0..g.w {
            let (xa, xb) = (2 * x, (2 * x + 1).min(fine.w - 1));
            let v = q * g.at(x, y);
            for (xx, yy) in [(xa, ya), (xb, ya), (xa, yb), (xb, yb)] {
                fine.d[yy * fine.w + xx] += v;
            }
        }
    }
}

#[inline]
fn coarse_coord<T: Real>(i: usize) -> T {
    (T::from_usize_lossy(i) + T::half()) * T::half() - T::half()
}

/// Bilinear ×2 upsampling of a flow component with values doubled.
fn upsample<T: Real>(c: &Plane<T>, w: usize, h: usize) -> Plane<T> {
    let mut out = Plane::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            let (idx, wts, _, _) = c.stencil(coarse_coord(x), coarse_coord(y));
            let mut s = T::zero();
            for k in 0..4 {
                s += wts[k] * c.d[idx[k]];
            }
            out.d[y * w + x] = T::two() * s;
        }
    }
    out
}

fn upsample_adjoint<T: Real>(g: &Plane<T>, coarse: &mut Plane<T>) {
    for y in 0..g.h {
        for x in 0..g.w {
            let (idx, wts, _, _) = coarse.stencil(coarse_coord(x), coarse_coord(y));
            let v = T::two() * g.at(x, y);
            for k in 0..4 {
                coarse.d[idx[k]] += wts[k] * v;
            }
        }
    }
}

#[inline]
fn neighbours(x: usize, y: usize, w: usize, h: usize) -> [usize; 4] {
    [
        y * w + x.saturating_sub(1),
        y * w + (x + 1).min(w - 1),
        y.saturating_sub(1) * w + x,
        (y + 1).min(h - 1) * w + x,
    ]
}

#[inline]
fn neighbour_mean<T: Real>(d: &[T], nb: &[usize; 4]) -> T {
    (d[nb[0]] + d[nb[1]] + d[nb[2]] + d[nb[3]]) * T::lit(0.25)
}

/// Central differences with replicate padding.
fn gradients<T: Real>(p: &Plane<T>) -> (Plane<T>, Plane<T>) {
    let mut gx = Plane::zeros(p.w, p.h);
    let mut gy = Plane::zeros(p.w, p.h);
    for y in 0..p.h {
        for x in 0..p.w {
            let nb = neighbours(x, y, p.w, p.h);
            gx.d[y * p.w + x] = (p.d[nb[1]] - p.d[nb[0]]) * T::half();
            gy.d[y * p.w + x] = (p.d[nb[3]] - p.d[nb[2]]) * T::half();
        }
    }
    (gx, gy)
}

fn gradients_adjoint<T: Real>(gx: &Plane<T>, gy: &Plane<T>, out: &mut Plane<T>) {
    let (w, h) = (out.w, out.h);
    for y in 0..h {
        for x in 0..w {
            let nb = neighbours(x, y, w, h);
            let i = y * w + x;
            let (a, b) = (gx.d[i] * T::half(), gy.d[i] * T::half());
            out.d[nb[1]] += a;
            out.d[nb[0]] -= a;
            out.d[nb[3]] += b;
            out.d[nb[2]] -= b;
        }
    }
}

#[derive(Debug, Clone)]
struct LevelTape<T> {
    i1: Plane<T>,
    i2: Plane<T>,
    u0: Plane<T>,
    v0: Plane<T>,
    ix: Plane<T>,
    iy: Plane<T>,
    it: Plane<T>,
    /// Iterates `0..=N`; index 0 equals `u0`.
    us: Vec<Vec<T>>,
    vs: Vec<Vec<T>>,
}

/// Recorded forward pass of [`estimate_flow_taped`].
#[derive(Debug, Clone)]
pub struct FlowTape<T> {
    cfg: FlowEstimatorConfig,
    width: usize,
    height: usize,
    /// Finest level first.
    levels: Vec<LevelTape<T>>,
}

impl<T: Real> FlowTape<T> {
    pub fn config(&self) -> &FlowEstimatorConfig {
        &self.cfg
    }
    pub fn levels(&self) -> usize {
        self.levels.len()
    }
}

#[derive(Debug, Clone)]
pub struct FlowOutput<T> {
    pub flow: FlowField<T>,
    pub tape: FlowTape<T>,
}

fn check_pair<T: Real>(i1: &Image<T>, i2: &Image<T>) -> Result<()> {
    if i1.dims() != i2.dims() || i1.channels() != 3 || i2.channels() != 3 {
        return Err(Error::Contract(format!(
            "flow inputs must be two RGB images of equal size, got {:?}×{} and {:?}×{}",
            i1.dims(),
            i1.channels(),
            i2.dims(),
            i2.channels()
        )));
    }
    if i1.width() == 0 || i1.height() == 0 {
        return Err(Error::Contract("flow inputs are empty".into()));
    }
    Ok(())
}

pub fn estimate_flow<T: Real>(i1: &Image<T>, i2: &Image<T>, cfg: &FlowEstimatorConfig) -> Result<FlowField<T>> {
    estimate_flow_taped(i1, i2, cfg).map(|o| o.flow)
}

pub fn estimate_flow_taped<T: Real>(i1: &Image<T>, i2: &Image<T>, cfg: &FlowEstimatorConfig) -> Result<FlowOutput<T>> {
    cfg.validate()?;
    check_pair(i1, i2)?;
    let n_levels = cfg.effective_levels(i1.width(), i1.height());
    let mut p1 = vec![gray(i1)];
    let mut p2 = vec![gray(i2)];
    for l in 1..n_levels {
        p1.push(downsample(&p1[l - 1]));
        p2.push(downsample(&p2[l - 1]));
    }
    let lam2 = T::lit(cfg.smoothness * cfg.smoothness);
    let mut tapes: Vec<LevelTape<T>> = Vec::with_capacity(n_levels);
    let mut prev: Option<(Plane<T>, Plane<T>)> = None;
    for l in (0..n_levels).rev() {
        let (a, b) = (&p1[l], &p2[l]);
        let (w, h) = (a.w, a.h);
        let (u0, v0) = match prev.take() {
            Some((cu, cv)) => (upsample(&cu, w, h), upsample(&cv, w, h)),
            None => (Plane::zeros(w, h), Plane::zeros(w, h)),
        };
        let mut warped = Plane::zeros(w, h);
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let (idx, wts, _, _) =
                    b.stencil(T::from_usize_lossy(x) + u0.d[i], T::from_usize_lossy(y) + v0.d[i]);
                warped.d[i] = (0..4).map(|k| wts[k] * b.d[idx[k]]).sum();
            }
        }
        let (ax, ay) = gradients(a);
        let (wx, wy) = gradients(&warped);
        let mut ix = Plane::zeros(w, h);
        let mut iy = Plane::zeros(w, h);
        let mut it = Plane::zeros(w, h);
        for i in 0..w * h {
            ix.d[i] = (ax.d[i] + wx.d[i]) * T::half();
            iy.d[i] = (ay.d[i] + wy.d[i]) * T::half();
            it.d[i] = warped.d[i] - a.d[i];
        }
        let mut us = vec![u0.d.clone()];
        let mut vs = vec![v0.d.clone()];
        for _ in 0..cfg.iterations_per_level {
            let (u, v) = (us.last().unwrap(), vs.last().unwrap());
            let mut un = vec![T::zero(); w * h];
            let mut vn = vec![T::zero(); w * h];
            for y in 0..h {
                for x in 0..w {
                    let i = y * w + x;
                    let nb = neighbours(x, y, w, h);
                    let ub = neighbour_mean(u, &nb);
                    let vb = neighbour_mean(v, &nb);
                    let r = ix.d[i] * (ub - u0.d[i]) + iy.d[i] * (vb - v0.d[i]) + it.d[i];
                    let k = r / (lam2 + ix.d[i] * ix.d[i] + iy.d[i] * iy.d[i]);
                    un[i] = ub - ix.d[i] * k;
                    vn[i] = vb - iy.d[i] * k;
                }
            }
            us.push(un);
            vs.push(vn);
        }
        prev = Some((
            Plane { w, h, d: us.last().unwrap().clone() },
            Plane { w, h, d: vs.last().unwrap().clone() },
        ));
        tapes.push(LevelTape {
            i1: a.clone(),
            i2: b.clone(),
            u0,
            v0,
            ix,
            iy,
            it,
            us,
            vs,
        });
    }
    tapes.reverse();
    let (fu, fv) = prev.unwrap();
    Ok(FlowOutput {
        flow: FlowField::from_parts(fu.w, fu.h, fu.d, fv.d),
        tape: FlowTape {
            cfg: *cfg,
            width: i1.width(),
            height: i1.height(),
            levels: tapes,
        },
    })
}

/// Gradients of `⟨grad_flow, flow⟩` with respect to both RGB inputs.
pub fn flow_backward<T: Real>(tape: &FlowTape<T>, grad_flow: &FlowField<T>) -> Result<(Image<T>, Image<T>)> {
    if grad_flow.dims() != (tape.width, tape.height) {
        return Err(Error::Contract("flow gradient does not match the recorded flow".into()));
    }
    let lam2 = T::lit(tape.cfg.smoothness * tape.cfg.smoothness);
    let n_levels = tape.levels.len();
    let mut g1: Vec<Plane<T>> = tape.levels.iter().map(|l| Plane::zeros(l.i1.w, l.i1.h)).collect();
    let mut g2 = g1.clone();
    let mut gu = Plane { w: tape.width, h: tape.height, d: grad_flow.u.clone() };
    let mut gv = Plane { w: tape.width, h: tape.height, d: grad_flow.v.clone() };
    for l in 0..n_levels {
        let lt = &tape.levels[l];
        let (w, h) = (lt.i1.w, lt.i1.h);
        let n = w * h;
        let mut gix = Plane::<T>::zeros(w, h);
        let mut giy = Plane::<T>::zeros(w, h);
        let mut git = Plane::zeros(w, h);
        let mut gu0 = Plane::zeros(w, h);
        let mut gv0 = Plane::zeros(w, h);
        let mut cu = std::mem::take(&mut gu.d);
        let mut cv = std::mem::take(&mut gv.d);
        for step in (0..lt.us.len() - 1).rev() {
            let (u, v) = (&lt.us[step], &lt.vs[step]);
            let mut pu = vec![T::zero(); n];
            let mut pv = vec![T::zero(); n];
            for y in 0..h {
                for x in 0..w {
                    let i = y * w + x;
                    let nb = neighbours(x, y, w, h);
                    let (ix, iy) = (lt.ix.d[i], lt.iy.d[i]);
                    let a = neighbour_mean(u, &nb) - lt.u0.d[i];
                    let b = neighbour_mean(v, &nb) - lt.v0.d[i];
                    let den = lam2 + ix * ix + iy * iy;
                    let r = ix * a + iy * b + lt.it.d[i];
                    let k = r / den;
                    let (gun, gvn) = (cu[i], cv[i]);
                    let gk = -(ix * gun + iy * gvn);
                    let gr = gk / den;
                    let gden = -gk * k / den;
                    gix.d[i] += -k * gun + T::two() * ix * gden + a * gr;
                    giy.d[i] += -k * gvn + T::two() * iy * gden + b * gr;
                    git.d[i] += gr;
                    gu0.d[i] -= ix * gr;
                    gv0.d[i] -= iy * gr;
                    let gub = (gun + ix * gr) * T::lit(0.25);
                    let gvb = (gvn + iy * gr) * T::lit(0.25);
                    for j in nb {
                        pu[j] += gub;
                        pv[j] += gvb;
                    }
                }
            }
            cu = pu;
            cv = pv;
        }
        for i in 0..n {
            gu0.d[i] += cu[i];
            gv0.d[i] += cv[i];
        }
        // Ix = (∂x I1 + ∂x I2w)/2, Iy likewise, It = I2w − I1
        let half_x = Plane { w, h, d: gix.d.iter().map(|g| *g * T::half()).collect() };
        let half_y = Plane { w, h, d: giy.d.iter().map(|g| *g * T::half()).collect() };
        gradients_adjoint(&half_x, &half_y, &mut g1[l]);
        let mut gw = Plane { w, h, d: git.d.clone() };
        gradients_adjoint(&half_x, &half_y, &mut gw);
        for i in 0..n {
            g1[l].d[i] -= git.d[i];
        }
        // warp by u0
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let (idx, wts, dx, dy) =
                    lt.i2.stencil(T::from_usize_lossy(x) + lt.u0.d[i], T::from_usize_lossy(y) + lt.v0.d[i]);
                for k in 0..4 {
                    g2[l].d[idx[k]] += wts[k] * gw.d[i];
                }
                gu0.d[i] += dx * gw.d[i];
                gv0.d[i] += dy * gw.d[i];
            }
        }
        if l + 1 < n_levels {
            let c = &tape.levels[l + 1];
            let mut cgu = Plane::zeros(c.i1.w, c.i1.h);
            let mut cgv = Plane::zeros(c.i1.w, c.i1.h);
            upsample_adjoint(&gu0, &mut cgu);
            upsample_adjoint(&gv0, &mut cgv);
            gu = cgu;
            gv = cgv;
        }
    }
    for l in (1..n_levels).rev() {
        let (fine, coarse) = g1.split_at_mut(l);
        downsample_adjoint(&coarse[0], &mut fine[l - 1]);
        let (fine, coarse) = g2.split_at_mut(l);
        downsample_adjoint(&coarse[0], &mut fine[l - 1]);
    }
    let wts = GRAY_WEIGHTS.map(T::lit);
    let to_rgb = |p: &Plane<T>| Image::from_fn(p.w, p.h, 3, |x, y, c| p.at(x, y) * wts[c]);
    Ok((to_rgb(&g1[0]), to_rgb(&g2[0])))
}

/// Loads `benign.flo` and `attacked.flo` from `dir`.
pub fn external_flow_source<T: Real>(dir: &Path) -> Result<(FlowField<T>, FlowField<T>)> {
    let f = read_flo(&dir.join("benign.flo"))?;
    let g = read_flo(&dir.join("attacked.flo"))?;
    if f.dims() != g.dims() {
        return Err(Error::Contract(format!(
            "benign flow is {:?} but attacked flow is {:?}",
            f.dims(),
            g.dims()
        )));
    }
    Ok((f, g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec3;
    use crate::oracles::{fd_gradient, OracleTolerance};
    use crate::scene_io::{synth_scene, SynthSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn texture(w: usize, h: usize, phase: f64) -> Image<f64> {
        Image::from_fn(w, h, 3, |x, y, c| {
            let (x, y) = (x as f64 + phase, y as f64);
            0.5 + 0.2 * (x * 0.7 + 0.3 * c as f64).sin() * (y * 0.45).cos() + 0.1 * (0.31 * x + 0.9 * y).sin()
        })
    }

    fn mean(v: &[f64]) -> f64 {
        v.iter().sum::<f64>() / v.len() as f64
    }

    #[test]
    fn identical_frames_give_zero_flow() {
        let i = texture(32, 24, 0.0);
        let f = estimate_flow(&i, &i, &FlowEstimatorConfig::default()).unwrap();
        assert!(f.u.iter().chain(&f.v).all(|v| *v == 0.0));
        let c = Image::filled(16, 16, 3, 0.4);
        let d = Image::filled(16, 16, 3, 0.9);
        let f = estimate_flow(&c, &d, &FlowEstimatorConfig::default()).unwrap();
        assert!(f.u.iter().chain(&f.v).all(|v| *v == 0.0));
    }

    #[test]
    fn size_mismatch_is_contract_error() {
        let a = texture(16, 16, 0.0);
        let b = texture(17, 16, 0.0);
        assert!(matches!(
            estimate_flow(&a, &b, &FlowEstimatorConfig::default()),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn recovers_two_pixel_translation() {
        let (w, h, z) = (128usize, 96usize, 10.0);
        let f = 0.75 * w as f64;
        let mut spec = SynthSpec::new(w, h, Vec3::new(-2.0 * z / f, 0.0, 0.0), vec![z]);
        spec.texture_seed = 3;
        let (scene, gt) = synth_scene(&spec).unwrap();
        assert!((mean(&gt.u) - 2.0).abs() < 1e-9);
        let flow = estimate_flow(&scene.frame1, &scene.frame2, &FlowEstimatorConfig::default()).unwrap();
        let (mu, mv) = (mean(&flow.u), mean(&flow.v));
        assert!((mu - 2.0).abs() < 0.5 && mv.abs() < 0.5, "mean flow ({mu}, {mv})");
    }

    #[test]
    fn equivariant_under_periodic_shift() {
        let cfg = FlowEstimatorConfig::default();
        let a = estimate_flow(&texture(64, 48, 0.0), &texture(64, 48, -1.3), &cfg).unwrap();
        let shift = 2.0 * std::f64::consts::PI / 0.7 * 3.0;
        let b = estimate_flow(&texture(64, 48, shift), &texture(64, 48, shift - 1.3), &cfg).unwrap();
        assert!((mean(&a.u) - mean(&b.u)).abs() < 0.1);
        assert!((mean(&a.v) - mean(&b.v)).abs() < 0.1);
    }

    #[test]
    fn levels_respect_minimum_side() {
        let cfg = FlowEstimatorConfig { pyramid_levels: 6, ..Default::default() };
        assert_eq!(cfg.effective_levels(128, 96), 4);
        assert_eq!(cfg.effective_levels(10, 10), 1);
        assert_eq!(FlowEstimatorConfig::default().effective_levels(48, 32), 3);
    }

    fn pair(w: usize, h: usize, seed: u64) -> (Image<f64>, Image<f64>) {
        let a = texture(w, h, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = texture(w, h, -0.8);
        for v in b.data_mut() {
            *v += rng.gen_range(-0.02..0.02);
        }
        (a, b)
    }

    fn check_fd(levels: usize, iters: usize) {
        let (w, h) = if levels < 3 { (32, 24) } else { (48, 32) };
        let cfg = FlowEstimatorConfig { pyramid_levels: levels, iterations_per_level: iters, ..Default::default() };
        assert_eq!(cfg.effective_levels(w, h), levels);
        let (i1, i2) = pair(w, h, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let gu: Vec<f64> = (0..w * h).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let gv: Vec<f64> = (0..w * h).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let g = FlowField::from_parts(w, h, gu.clone(), gv.clone());
        let out = estimate_flow_taped(&i1, &i2, &cfg).unwrap();
        let (b1, b2) = flow_backward(&out.tape, &g).unwrap();
        let tol = OracleTolerance::default();
        let objective = |a: &Image<f64>, b: &Image<f64>| {
            let f = estimate_flow(a, b, &cfg).unwrap();
            (0..w * h).map(|i| gu[i] * f.u[i] + gv[i] * f.v[i]).sum::<f64>()
        };
        for k in 0..10 {
            let idx = rng.gen_range(0..w * h * 3);
            let which = k % 2;
            let base = if which == 0 { i1.data()[idx] } else { i2.data()[idx] };
            let fd = fd_gradient(
                |p| {
                    let (mut a, mut b) = (i1.clone(), i2.clone());
                    if which == 0 { a.data_mut()[idx] = p[0] } else { b.data_mut()[idx] = p[0] }
                    objective(&a, &b)
                },
                &[base],
                1e-4,
            )[0];
            let an = if which == 0 { b1.data()[idx] } else { b2.data()[idx] };
            let err = tol.relative_error(an, fd);
            assert!(err <= tol.rel_tol, "levels {levels}: pixel {idx} of I{} analytic {an} fd {fd} err {err}", which + 1);
        }
    }

    #[test]
    fn adjoint_matches_finite_differences() {
        for levels in 1..=3 {
            check_fd(levels, 20);
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let (i1, i2) = pair(16, 16, 1);
        let out = estimate_flow_taped(&i1, &i2, &FlowEstimatorConfig::default()).unwrap();
        let (a, b) = flow_backward(&out.tape, &FlowField::zeros(16, 16)).unwrap();
        assert!(a.data().iter().chain(b.data()).all(|v| *v == 0.0));
    }

    #[test]
    fn descent_on_second_frame_reduces_flow_magnitude() {
        let cfg = FlowEstimatorConfig { pyramid_levels: 2, iterations_per_level: 30, ..Default::default() };
        let (i1, mut i2) = pair(32, 24, 2);
        let aee0 = |f: &FlowField<f64>| {
            (0..f.len()).map(|i| (f.u[i] * f.u[i] + f.v[i] * f.v[i] + 1e-12).sqrt()).sum::<f64>() / f.len() as f64
        };
        let mut last = f64::INFINITY;
        for _ in 0..10 {
            let out = estimate_flow_taped(&i1, &i2, &cfg).unwrap();
            let f = &out.flow;
            let loss = aee0(f);
            assert!(loss < last, "loss {loss} did not decrease from {last}");
            last = loss;
            let n = f.len() as f64;
            let g = FlowField::from_fn(f.width(), f.height(), |x, y| {
                let (u, v) = f.get(x, y);
                let m = (u * u + v * v + 1e-12).sqrt() * n;
                (u / m, v / m)
            });
            let (_, g2) = flow_backward(&out.tape, &g).unwrap();
            for (p, d) in i2.data_mut().iter_mut().zip(g2.data()) {
                *p -= 0.5 * d;
            }
        }
    }

    #[test]
    fn external_source_checks_sizes() {
        let dir = tempfile::tempdir().unwrap();
        let f = FlowField::<f64>::zeros(4, 3);
        crate::scene_io::write_flo(&dir.path().join("benign.flo"), &f).unwrap();
        assert!(external_flow_source::<f64>(dir.path()).is_err());
        crate::scene_io::write_flo(&dir.path().join("attacked.flo"), &FlowField::<f64>::uniform(4, 3, 3.0, 4.0)).unwrap();
        let (a, b) = external_flow_source::<f64>(dir.path()).unwrap();
        assert_eq!(crate::metrics::aee(&a, &b).unwrap(), 5.0);
        crate::scene_io::write_flo(&dir.path().join("attacked.flo"), &FlowField::<f64>::zeros(5, 3)).unwrap();
        assert!(external_flow_source::<f64>(dir.path()).is_err());
    }
}
