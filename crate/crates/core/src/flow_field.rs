use crate::real::Real;

/// Dense per-pixel displacement field, in pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField<T> {
    width: usize,
    height: usize,
    pub u: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Real> FlowField<T> {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self::uniform(width, height, T::zero(), T::zero())
    }

    pub fn uniform(width: usize, height: usize, u: T, v: T) -> Self {
        Self {
            width,
            height,
            u: vec![u; width * height],
            v: vec![v; width * height],
        }
    }

    /// Panics if the buffers do not hold `width * height` entries each.
    pub fn from_parts(width: usize, height: usize, u: Vec<T>, v: Vec<T>) -> Self {
        assert_eq!(u.len(), width * height, "u buffer size");
        assert_eq!(v.len(), width * height, "v buffer size");
        Self { width, height, u, v }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> (T, T)) -> Self {
        let mut u = Vec::with_capacity(width * height);
        let mut v = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                let (a, b) = f(x, y);
                u.push(a);
                v.push(b);
            }
        }
        Self { width, height, u, v }
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }
    pub fn len(&self) -> usize {
        self.u.len()
    }
    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    pub fn get(&self, x: usize, y: usize) -> (T, T) {
        let i = y * self.width + x;
        (self.u[i], self.v[i])
    }

    pub fn is_finite(&self) -> bool {
        self.u.iter().chain(&self.v).all(|x| x.is_finite())
    }

    pub fn cast<U: Real>(&self) -> FlowField<U> {
        let conv = |s: &[T]| s.iter().map(|x| U::lit(x.to_f64_lossy())).collect();
        FlowField {
            width: self.width,
            height: self.height,
            u: conv(&self.u),
            v: conv(&self.v),
        }
    }
}
