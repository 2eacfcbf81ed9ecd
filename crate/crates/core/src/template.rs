//! Grayscale particle billboards: procedural shapes, rotation, inverse-depth
//! scaling and disk point-spread blur.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::real::Real;

/// Largest out-of-focus radius, in pixels.
pub const MAX_DEFOCUS_RADIUS: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemplateKind {
    Flake,
    Dust,
}

impl std::str::FromStr for TemplateKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "flake" | "particles" => Ok(Self::Flake),
            "dust" => Ok(Self::Dust),
            _ => Err(format!("unknown template kind `{s}` (expected flake or dust)")),
        }
    }
}

impl std::fmt::Display for TemplateKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Flake => "flake",
            Self::Dust => "dust",
        })
    }
}

/// Transparency mask with odd side lengths; the anchor is the centre texel.
#[derive(Debug, Clone, PartialEq)]
pub struct Template<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

impl<T: Real> Template<T> {
    /// Panics on even sides or a mis-sized buffer.
    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Self {
        assert!(width % 2 == 1 && height % 2 == 1, "template sides must be odd");
        assert_eq!(data.len(), width * height);
        Self { width, height, data }
    }

    pub fn impulse(side: usize) -> Self {
        let mut t = Self::from_vec(side, side, vec![T::zero(); side * side]);
        let a = side / 2;
        t.data[a * side + a] = T::one();
        t
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// `((w−1)/2, (h−1)/2)`.
    pub fn anchor(&self) -> (usize, usize) {
        (self.width / 2, self.height / 2)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> T {
        self.data[y * self.width + x]
    }

    pub fn mass(&self) -> T {
        self.data.iter().copied().sum()
    }

    /// Zero outside the grid.
    fn sample(&self, x: T, y: T) -> T {
        let (fx, fy) = (x.floor(), y.floor());
        let (tx, ty) = (x - fx, y - fy);
        let (ix, iy) = (fx.to_isize().unwrap_or(-2), fy.to_isize().unwrap_or(-2));
        let at = |i: isize, j: isize| {
            if i < 0 || j < 0 || i >= self.width as isize || j >= self.height as isize {
                T::zero()
            } else {
                self.get(i as usize, j as usize)
            }
        };
        let one = T::one();
        (at(ix, iy) * (one - tx) + at(ix + 1, iy) * tx) * (one - ty)
            + (at(ix, iy + 1) * (one - tx) + at(ix + 1, iy + 1) * tx) * ty
    }

    pub fn scale_values(&self, s: T) -> Self {
        Self::from_vec(self.width, self.height, self.data.iter().map(|v| *v * s).collect())
    }

    pub fn cast<U: Real>(&self) -> Template<U> {
        Template::from_vec(
            self.width,
            self.height,
            self.data.iter().map(|v| U::lit(v.to_f64_lossy())).collect(),
        )
    }
}

/// Nearest odd integer (ties resolve downward), never below 1.
pub fn round_to_odd<T: Real>(x: T) -> usize {
    let k = ((x - T::one()) * T::half() - T::half()).ceil().max(T::zero());
    2 * k.to_usize().unwrap_or(0) + 1
}

/// Arm reach of a flake as a fraction of the billboard half-side.
const FLAKE_EXTENT: f64 = 0.35;

fn taper<T: Real>(x: T) -> T {
    let start = T::lit(0.75);
    if x <= start {
        T::one()
    } else if x >= T::one() {
        T::zero()
    } else {
        let s = (x - start) / (T::one() - start);
        T::half() * (T::one() + (T::PI() * s).cos())
    }
}

/// Procedural template at an explicit rotation angle.
pub fn template_at_angle<T: Real>(kind: TemplateKind, side: usize, angle: T) -> Template<T> {
    let side = round_to_odd(T::from_usize_lossy(side.max(3)));
    let a = side / 2;
    let radius = T::from_usize_lossy(a);
    let mut data = Vec::with_capacity(side * side);
    for y in 0..side {
        for x in 0..side {
            let dx = T::from_usize_lossy(x) - T::from_usize_lossy(a);
            let dy = T::from_usize_lossy(y) - T::from_usize_lossy(a);
            let r = (dx * dx + dy * dy).sqrt() / radius;
            let v = match kind {
                TemplateKind::Dust => (-T::lit(3.0) * r * r).exp(),
                TemplateKind::Flake => {
                    let phi = dy.atan2(dx) - angle;
                    let c = (T::lit(3.0) * phi).cos();
                    let c2 = c * c;
                    let reach = T::lit(FLAKE_EXTENT) * (T::lit(0.45) + T::lit(0.55) * c2 * c2);
                    let q = r / reach;
                    (-T::lit(2.5) * q * q).exp()
                }
            };
            data.push(v * taper(r));
        }
    }
    Template::from_vec(side, side, data)
}

/// Random rotation in `[0, 2π)` drawn from `seed`.
pub fn make_template<T: Real>(kind: TemplateKind, base_size: usize, seed: u64) -> Template<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    template_at_angle(kind, base_size, T::lit(angle))
}

/// Rotates about the anchor by bilinear resampling (counter-clockwise in
/// image coordinates).
pub fn rotate<T: Real>(t: &Template<T>, angle: T) -> Template<T> {
    let (ax, ay) = t.anchor();
    let (s, c) = angle.sin_cos();
    let mut data = Vec::with_capacity(t.width * t.height);
    for y in 0..t.height {
        for x in 0..t.width {
            let dx = T::from_usize_lossy(x) - T::from_usize_lossy(ax);
            let dy = T::from_usize_lossy(y) - T::from_usize_lossy(ay);
            let sx = c * dx + s * dy + T::from_usize_lossy(ax);
            let sy = -s * dx + c * dy + T::from_usize_lossy(ay);
            data.push(t.sample(sx, sy));
        }
    }
    Template::from_vec(t.width, t.height, data)
}

/// Side length after inverse-depth scaling.
pub fn scaled_side<T: Real>(base_size: T, depth: T, depth_decay: T) -> usize {
    round_to_odd(base_size * depth_decay / depth).max(3)
}

/// Resamples `t` bilinearly to side `max(3, odd(base_size·decay/depth))`.
pub fn scale_by_depth<T: Real>(t: &Template<T>, base_size: T, depth: T, depth_decay: T) -> Template<T> {
    let side = scaled_side(base_size, depth, depth_decay);
    resample(t, side)
}

pub fn resample<T: Real>(t: &Template<T>, side: usize) -> Template<T> {
    if side == t.width && side == t.height {
        return t.clone();
    }
    let c_out = T::from_usize_lossy(side / 2);
    let (ax, ay) = t.anchor();
    let sx = T::from_usize_lossy(t.width - 1) / T::from_usize_lossy(side - 1);
    let sy = T::from_usize_lossy(t.height - 1) / T::from_usize_lossy(side - 1);
    let mut data = Vec::with_capacity(side * side);
    for y in 0..side {
        for x in 0..side {
            let px = (T::from_usize_lossy(x) - c_out) * sx + T::from_usize_lossy(ax);
            let py = (T::from_usize_lossy(y) - c_out) * sy + T::from_usize_lossy(ay);
            data.push(t.sample(px, py).min(T::one()).max(T::zero()));
        }
    }
    Template::from_vec(side, side, data)
}

/// Defocus radius `clamp(decay / depth, 0, MAX_DEFOCUS_RADIUS)`.
pub fn defocus_radius<T: Real>(depth: T, depth_decay: T) -> T {
    (depth_decay / depth).max(T::zero()).min(T::lit(MAX_DEFOCUS_RADIUS))
}

/// Offsets `(dx, dy)` with `dx² + dy² ≤ r²`, as per-row half widths.
fn disk_rows<T: Real>(radius: T) -> Vec<usize> {
    let reach = radius.floor().to_usize().unwrap_or(0);
    let r2 = radius * radius;
    (0..=2 * reach)
        .map(|i| {
            let dy = T::from_usize_lossy(i) - T::from_usize_lossy(reach);
            let w2 = r2 - dy * dy;
            let mut w = w2.max(T::zero()).sqrt().floor().to_usize().unwrap_or(0);
            // guard against sqrt rounding just below an exact integer
            while T::from_usize_lossy(w + 1).powi(2) <= w2 {
                w += 1;
            }
            w
        })
        .collect()
}

/// Convolution with a unit-sum discrete disk; the output grows by
/// `floor(radius)` on each side so no mass is lost.
pub fn defocus_blur<T: Real>(t: &Template<T>, radius: T) -> Template<T> {
    assert!(radius >= T::zero(), "blur radius must be non-negative");
    let rows = disk_rows(radius);
    let pad = rows.len() / 2;
    if pad == 0 {
        return t.clone();
    }
    let count: usize = rows.iter().map(|w| 2 * w + 1).sum();
    let norm = T::one() / T::from_usize_lossy(count);
    let (w_in, h_in) = (t.width, t.height);
    let (w_out, h_out) = (w_in + 2 * pad, h_in + 2 * pad);
    // prefix[r][i] = sum of input row r over columns < i
    let prefix: Vec<Vec<T>> = (0..h_in)
        .map(|r| {
            let mut p = Vec::with_capacity(w_in + 1);
            let mut acc = T::zero();
            p.push(acc);
            for x in 0..w_in {
                acc += t.get(x, r);
                p.push(acc);
            }
            p
        })
        .collect();
    let mut data = vec![T::zero(); w_out * h_out];
    for y in 0..h_out {
        for (i, &half) in rows.iter().enumerate() {
            // input row feeding output row y through disk row offset dy = i − pad
            let Some(src) = (y + i).checked_sub(2 * pad) else { continue };
            if src >= h_in {
                continue;
            }
            let p = &prefix[src];
            for x in 0..w_out {
                // input columns x − pad − half ..= x − pad + half
                let lo = (x + pad).saturating_sub(2 * pad + half).min(w_in);
                let hi = (x + half + 1).saturating_sub(pad).min(w_in);
                if hi > lo {
                    data[y * w_out + x] += p[hi] - p[lo];
                }
            }
        }
    }
    for v in &mut data {
        *v = (*v * norm).min(T::one());
    }
    Template::from_vec(w_out, h_out, data)
}

/// Full billboard pipeline for one frame: scale by inverse depth, then blur.
pub fn billboard_for_depth<T: Real>(shape: &Template<T>, base_size: T, depth: T, depth_decay: T) -> Template<T> {
    let scaled = scale_by_depth(shape, base_size, depth, depth_decay);
    defocus_blur(&scaled, defocus_radius(depth, depth_decay))
}
