//! RGB ↔ HLS conversion (hue in `[0, 1)`), matching the usual `colorsys`
//! definitions.

pub fn rgb_to_hls(rgb: [f64; 3]) -> [f64; 3] {
    let [r, g, b] = rgb;
    let maxc = r.max(g).max(b);
    let minc = r.min(g).min(b);
    let l = (minc + maxc) / 2.0;
    if maxc == minc {
        return [0.0, l, 0.0];
    }
    let delta = maxc - minc;
    let s = if l <= 0.5 {
        delta / (maxc + minc)
    } else {
        delta / (2.0 - maxc - minc)
    };
    let rc = (maxc - r) / delta;
    let gc = (maxc - g) / delta;
    let bc = (maxc - b) / delta;
    let h = if r == maxc {
        bc - gc
    } else if g == maxc {
        2.0 + rc - bc
    } else {
        4.0 + gc - rc
    };
    [(h / 6.0).rem_euclid(1.0), l, s]
}

pub fn hls_to_rgb(hls: [f64; 3]) -> [f64; 3] {
    let [h, l, s] = hls;
    if s == 0.0 {
        return [l, l, l];
    }
    let m2 = if l <= 0.5 { l * (1.0 + s) } else { l + s - l * s };
    let m1 = 2.0 * l - m2;
    [
        hue_channel(m1, m2, h + 1.0 / 3.0),
        hue_channel(m1, m2, h),
        hue_channel(m1, m2, h - 1.0 / 3.0),
    ]
}

fn hue_channel(m1: f64, m2: f64, h: f64) -> f64 {
    let h = h.rem_euclid(1.0);
    if h < 1.0 / 6.0 {
        m1 + (m2 - m1) * h * 6.0
    } else if h < 0.5 {
        m2
    } else if h < 2.0 / 3.0 {
        m1 + (m2 - m1) * (2.0 / 3.0 - h) * 6.0
    } else {
        m1
    }
}

/// Shifts hue by `dh_deg` degrees and lightness/saturation additively, then
/// clamps back into the RGB cube.
pub fn jitter_hls(rgb: [f64; 3], dh_deg: f64, dl: f64, ds: f64) -> [f64; 3] {
    if dh_deg == 0.0 && dl == 0.0 && ds == 0.0 {
        return rgb;
    }
    let [h, l, s] = rgb_to_hls(rgb);
    let h = (h + dh_deg / 360.0).rem_euclid(1.0);
    let l = (l + dl).clamp(0.0, 1.0);
    let s = (s + ds).clamp(0.0, 1.0);
    hls_to_rgb([h, l, s]).map(|c| c.clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn known_conversions() {
        assert_eq!(rgb_to_hls([1.0, 0.0, 0.0]), [0.0, 0.5, 1.0]);
        let [h, l, s] = rgb_to_hls([0.0, 0.0, 1.0]);
        assert!((h - 2.0 / 3.0).abs() < 1e-12 && l == 0.5 && s == 1.0);
        assert_eq!(hls_to_rgb([0.0, 1.0, 0.0]), [1.0, 1.0, 1.0]);
    }

    #[test]
    fn full_turn_of_hue_is_identity() {
        let c = [191.0 / 255.0, 79.0 / 255.0, 64.0 / 255.0];
        let j = jitter_hls(c, 360.0, 0.0, 0.0);
        for i in 0..3 {
            assert!((c[i] - j[i]).abs() < 1e-9);
        }
    }

    proptest! {
        #[test]
        fn round_trip_in_gamut(r in 0.0f64..=1.0, g in 0.0f64..=1.0, b in 0.0f64..=1.0) {
            let back = hls_to_rgb(rgb_to_hls([r, g, b]));
            for (x, y) in [r, g, b].iter().zip(back) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }
}
