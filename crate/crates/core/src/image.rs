//! Dense row-major raster with interleaved channels.

use crate::real::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct Image<T> {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<T>,
}

impl<T: Real> Image<T> {
    pub fn filled(width: usize, height: usize, channels: usize, value: T) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, T::zero())
    }

    /// Panics if `data.len() != width * height * channels`.
    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), width * height * channels, "image buffer size");
        Self {
            width,
            height,
            channels,
            data,
        }
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Self {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        Self::from_vec(width, height, channels, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }
    pub fn data(&self) -> &[T] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }
    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> T {
        self.data[self.index(x, y, c)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: T) {
        let i = self.index(x, y, c);
        self.data[i] = v;
    }

    /// Bilinear sample of channel `c` with coordinates clamped to the raster.
    pub fn sample_bilinear(&self, x: T, y: T, c: usize) -> T {
        self.sample_bilinear_grad(x, y, c).0
    }

    /// Bilinear sample plus its partial derivatives in x and y.
    ///
    /// Clamped coordinates have zero derivative along the clamped axis.
    pub fn sample_bilinear_grad(&self, x: T, y: T, c: usize) -> (T, T, T) {
        let (x0, x1, fx, dx_ok) = clamp_axis(x, self.width);
        let (y0, y1, fy, dy_ok) = clamp_axis(y, self.height);
        let v00 = self.get(x0, y0, c);
        let v10 = self.get(x1, y0, c);
        let v01 = self.get(x0, y1, c);
        let v11 = self.get(x1, y1, c);
        let one = T::one();
        let top = v00 * (one - fx) + v10 * fx;
        let bot = v01 * (one - fx) + v11 * fx;
        let val = top * (one - fy) + bot * fy;
        let gx = if dx_ok {
            (v10 - v00) * (one - fy) + (v11 - v01) * fy
        } else {
            T::zero()
        };
        let gy = if dy_ok { bot - top } else { T::zero() };
        (val, gx, gy)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Image<U> {
        Image {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self.data.iter().map(|v| U::lit(v.to_f64_lossy())).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert_eq!(self.data.len(), other.data.len());
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (a, b)| m.max((*a - *b).abs()))
    }
}

/// Returns the two bracketing indices, interpolation fraction, and whether
/// the coordinate was strictly interior (non-clamped).
#[inline]
pub(crate) fn clamp_axis<T: Real>(x: T, n: usize) -> (usize, usize, T, bool) {
    let max = T::from_usize_lossy(n - 1);
    if n == 1 {
        return (0, 0, T::zero(), false);
    }
    if x <= T::zero() {
        return (0, 1, T::zero(), false);
    }
    if x >= max {
        return (n - 2, n - 1, T::one(), false);
    }
    let f = x.floor();
    let i = f.to_usize().unwrap_or(0).min(n - 2);
    (i, i + 1, x - T::from_usize_lossy(i), true)
}
