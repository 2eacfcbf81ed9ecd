//! Endpoint-error measures and the Middlebury colour-wheel visualisation.

use crate::error::{Error, Result};
use crate::flow_field::FlowField;
use crate::image::Image;
use crate::real::{CompensatedSum, Real};

fn check<T: Real>(f: &FlowField<T>, g: &FlowField<T>) -> Result<()> {
    if f.dims() != g.dims() {
        return Err(Error::Contract(format!("flow sizes differ: {:?} vs {:?}", f.dims(), g.dims())));
    }
    if f.is_empty() {
        return Err(Error::EmptyFlow);
    }
    Ok(())
}

/// Per-pixel `‖f − g‖₂` as a one-channel image.
pub fn epe_map<T: Real>(f: &FlowField<T>, g: &FlowField<T>) -> Result<Image<T>> {
    check(f, g)?;
    let data = (0..f.len())
        .map(|i| (f.u[i] - g.u[i]).hypot(f.v[i] - g.v[i]))
        .collect();
    Ok(Image::from_vec(f.width(), f.height(), 1, data))
}

/// Average endpoint error.
pub fn aee<T: Real>(f: &FlowField<T>, g: &FlowField<T>) -> Result<T> {
    let map = epe_map(f, g)?;
    let mut s = CompensatedSum::new();
    for v in map.data() {
        s.add(*v);
    }
    Ok(s.value() / T::from_usize_lossy(f.len()))
}

#[derive(Debug, Clone)]
pub struct MetricReport<T> {
    /// `AEE(f̌, f^T)`.
    pub aee: T,
    /// `‖f − f̌‖` per pixel.
    pub epe_map: Image<T>,
    /// `AEE(f, f̌)`.
    pub robustness_aee: T,
}

pub fn metric_report<T: Real>(benign: &FlowField<T>, attacked: &FlowField<T>, target: &FlowField<T>) -> Result<MetricReport<T>> {
    Ok(MetricReport {
        aee: aee(attacked, target)?,
        epe_map: epe_map(benign, attacked)?,
        robustness_aee: aee(benign, attacked)?,
    })
}

/// Middlebury wheel: red-yellow, yellow-green, green-cyan, cyan-blue,
/// blue-magenta, magenta-red segment lengths.
const SEGMENTS: [usize; 6] = [15, 6, 4, 11, 13, 6];

fn color_wheel() -> Vec<[f64; 3]> {
    let mut wheel = Vec::with_capacity(55);
    let ramps: [([f64; 3], [f64; 3]); 6] = [
        ([255.0, 0.0, 0.0], [0.0, 255.0, 0.0]),
        ([255.0, 255.0, 0.0], [-255.0, 0.0, 0.0]),
        ([0.0, 255.0, 0.0], [0.0, 0.0, 255.0]),
        ([0.0, 255.0, 255.0], [0.0, -255.0, 0.0]),
        ([0.0, 0.0, 255.0], [255.0, 0.0, 0.0]),
        ([255.0, 0.0, 255.0], [0.0, 0.0, -255.0]),
    ];
    for (n, (start, delta)) in SEGMENTS.iter().zip(ramps) {
        for i in 0..*n {
            let t = (255.0 * i as f64 / *n as f64).floor() / 255.0;
            wheel.push([0, 1, 2].map(|c| (start[c] + delta[c] * t) / 255.0));
        }
    }
    wheel
}

/// Largest flow magnitude, used to normalise [`flow_to_color`].
pub fn max_magnitude<T: Real>(f: &FlowField<T>) -> f64 {
    (0..f.len())
        .map(|i| f.u[i].to_f64_lossy().hypot(f.v[i].to_f64_lossy()))
        .fold(0.0, f64::max)
}

/// Encodes direction as hue and magnitude (relative to the image maximum)
/// as saturation. Zero flow maps to white.
pub fn flow_to_color<T: Real>(f: &FlowField<T>) -> Image<f64> {
    let max = max_magnitude(f);
    let wheel = color_wheel();
    let n = wheel.len();
    let mut img = Image::filled(f.width(), f.height(), 3, 1.0);
    if max == 0.0 || !max.is_finite() {
        return img;
    }
    for y in 0..f.height() {
        for x in 0..f.width() {
            let (u, v) = f.get(x, y);
            let (u, v) = (u.to_f64_lossy() / max, v.to_f64_lossy() / max);
            let rad = u.hypot(v);
            let a = (-v).atan2(-u) / std::f64::consts::PI;
            let fk = (a + 1.0) / 2.0 * (n - 1) as f64;
            let k0 = (fk.floor() as usize).min(n - 1);
            let k1 = (k0 + 1) % n;
            let t = fk - k0 as f64;
            for c in 0..3 {
                let col = (1.0 - t) * wheel[k0][c] + t * wheel[k1][c];
                let col = if rad <= 1.0 { 1.0 - rad * (1.0 - col) } else { col * 0.75 };
                img.set(x, y, c, col);
            }
        }
    }
    img
}
