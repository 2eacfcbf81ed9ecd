use std::collections::BTreeMap;
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::template::TemplateKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlendMode {
    Additive,
    Meshkin,
}

impl std::str::FromStr for BlendMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "additive" => Ok(Self::Additive),
            "meshkin" | "alpha" => Ok(Self::Meshkin),
            _ => Err(format!("unknown blend mode `{s}` (expected additive or meshkin)")),
        }
    }
}

impl std::fmt::Display for BlendMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Additive => "additive",
            Self::Meshkin => "meshkin",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransparencyLaw {
    /// `θ_base · min(1, depth_decay / d₁)`
    DepthDecay,
    /// `θ_base` regardless of depth.
    Constant,
}

impl std::str::FromStr for TransparencyLaw {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "depth" | "depth_decay" => Ok(Self::DepthDecay),
            "constant" => Ok(Self::Constant),
            _ => Err(format!("unknown transparency law `{s}` (expected depth or constant)")),
        }
    }
}

impl std::fmt::Display for TransparencyLaw {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::DepthDecay => "depth",
            Self::Constant => "constant",
        })
    }
}

/// One weather effect: particle budget, appearance, motion and blur.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeatherConfig {
    pub count: usize,
    /// Template side in pixels at `depth == depth_decay`.
    pub base_size: f64,
    pub depth_decay: f64,
    pub template_kind: TemplateKind,
    pub base_color: [f64; 3],
    /// `(δH degrees, δL, δS)`.
    pub color_jitter: [f64; 3],
    pub blend_mode: BlendMode,
    pub transparency_base: f64,
    pub transparency_law: TransparencyLaw,
    /// Vertical motion per frame in metres; positive is downward in the image.
    pub motion_y: f64,
    pub motion_angle_jitter: f64,
    pub motion_magnitude_jitter: f64,
    pub blur_enabled: bool,
    pub blur_length: f64,
    pub blur_particles: usize,
    /// Template sizes are in pixels of an image this wide; `0` disables
    /// resolution scaling.
    pub reference_width: usize,
}

/// Width of the frames the preset sizes were tuned for.
pub const REFERENCE_WIDTH: usize = 1024;

fn rgb8(r: u8, g: u8, b: u8) -> [f64; 3] {
    [r as f64 / 255.0, g as f64 / 255.0, b as f64 / 255.0]
}

impl WeatherConfig {
    pub fn snow() -> Self {
        Self {
            count: 3000,
            base_size: 71.0,
            depth_decay: 9.0,
            template_kind: TemplateKind::Flake,
            base_color: rgb8(255, 255, 255),
            color_jitter: [0.0; 3],
            blend_mode: BlendMode::Additive,
            transparency_base: 0.75,
            transparency_law: TransparencyLaw::DepthDecay,
            motion_y: 0.2,
            motion_angle_jitter: 0.0,
            motion_magnitude_jitter: 0.0,
            blur_enabled: false,
            blur_length: 0.0,
            blur_particles: 1,
            reference_width: REFERENCE_WIDTH,
        }
    }

    pub fn rain() -> Self {
        Self {
            base_size: 51.0,
            motion_angle_jitter: 4.0,
            motion_magnitude_jitter: 0.1,
            blur_enabled: true,
            blur_length: 0.15,
            blur_particles: 20,
            ..Self::snow()
        }
    }

    pub fn sparks() -> Self {
        Self {
            base_size: 41.0,
            base_color: rgb8(191, 79, 64),
            color_jitter: [15.0, 0.1, 0.1],
            transparency_base: 1.5,
            motion_y: -0.05,
            motion_angle_jitter: 60.0,
            motion_magnitude_jitter: 0.2,
            blur_enabled: true,
            blur_length: 0.3,
            blur_particles: 10,
            ..Self::snow()
        }
    }

    pub fn fog() -> Self {
        Self {
            count: 60,
            base_size: 451.0,
            depth_decay: 0.8,
            template_kind: TemplateKind::Dust,
            blend_mode: BlendMode::Meshkin,
            transparency_base: 0.3,
            transparency_law: TransparencyLaw::Constant,
            motion_y: 0.0,
            ..Self::snow()
        }
    }

    pub fn grey() -> Self {
        Self {
            base_color: rgb8(127, 127, 127),
            blend_mode: BlendMode::Meshkin,
            ..Self::snow()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.count < 1 {
            return fail("count must be at least 1");
        }
        if !(self.base_size >= 3.0) {
            return fail("base_size must be at least 3");
        }
        if !(self.depth_decay > 0.0) {
            return fail("depth_decay must be positive");
        }
        if self.base_color.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return fail("base_color components must lie in [0, 1]");
        }
        if self.color_jitter.iter().any(|j| !(*j >= 0.0)) {
            return fail("color_jitter values must be non-negative");
        }
        if !(self.transparency_base >= 0.0) {
            return fail("transparency_base must be non-negative");
        }
        if !(self.motion_angle_jitter >= 0.0 && self.motion_magnitude_jitter >= 0.0) {
            return fail("motion jitter values must be non-negative");
        }
        if !self.motion_y.is_finite() || !(self.blur_length >= 0.0) {
            return fail("motion_y and blur_length must be finite, blur_length non-negative");
        }
        if self.blur_enabled && self.blur_particles < 1 {
            return fail("blur_particles must be at least 1 when blur is enabled");
        }
        Ok(())
    }

    /// Blur replicas per parent (1 without blur).
    pub fn replicas(&self) -> usize {
        if self.blur_enabled {
            self.blur_particles
        } else {
            1
        }
    }

    /// Plain-text `key = value` form, one field per line.
    pub fn to_kv(&self) -> String {
        let c = |v: [f64; 3]| format!("{},{},{}", v[0], v[1], v[2]);
        let mut s = String::new();
        let _ = writeln!(s, "count = {}", self.count);
        let _ = writeln!(s, "base_size = {}", self.base_size);
        let _ = writeln!(s, "depth_decay = {}", self.depth_decay);
        let _ = writeln!(s, "template_kind = {}", self.template_kind);
        let _ = writeln!(s, "base_color = {}", c(self.base_color));
        let _ = writeln!(s, "color_jitter = {}", c(self.color_jitter));
        let _ = writeln!(s, "blend_mode = {}", self.blend_mode);
        let _ = writeln!(s, "transparency_base = {}", self.transparency_base);
        let _ = writeln!(s, "transparency_law = {}", self.transparency_law);
        let _ = writeln!(s, "motion_y = {}", self.motion_y);
        let _ = writeln!(s, "motion_angle_jitter = {}", self.motion_angle_jitter);
        let _ = writeln!(s, "motion_magnitude_jitter = {}", self.motion_magnitude_jitter);
        let _ = writeln!(s, "blur_enabled = {}", self.blur_enabled);
        let _ = writeln!(s, "blur_length = {}", self.blur_length);
        let _ = writeln!(s, "blur_particles = {}", self.blur_particles);
        let _ = writeln!(s, "reference_width = {}", self.reference_width);
        s
    }

    /// Parses `key = value` lines on top of `base`. Unknown keys are errors.
    pub fn from_kv(text: &str, base: WeatherConfig) -> Result<Self> {
        let mut cfg = base;
        for (key, value) in parse_kv(text)? {
            let bad = |e: String| Error::Config(format!("{key}: {e}"));
            match key.as_str() {
                "preset" => {}
                "count" => cfg.count = num(&value).map_err(bad)?,
                "base_size" => cfg.base_size = num(&value).map_err(bad)?,
                "depth_decay" => cfg.depth_decay = num(&value).map_err(bad)?,
                "template_kind" => cfg.template_kind = value.parse().map_err(bad)?,
                "base_color" => cfg.base_color = triple(&value).map_err(bad)?,
                "color_jitter" => cfg.color_jitter = triple(&value).map_err(bad)?,
                "blend_mode" => cfg.blend_mode = value.parse().map_err(bad)?,
                "transparency_base" => cfg.transparency_base = num(&value).map_err(bad)?,
                "transparency_law" => cfg.transparency_law = value.parse().map_err(bad)?,
                "motion_y" => cfg.motion_y = num(&value).map_err(bad)?,
                "motion_angle_jitter" => cfg.motion_angle_jitter = num(&value).map_err(bad)?,
                "motion_magnitude_jitter" => cfg.motion_magnitude_jitter = num(&value).map_err(bad)?,
                "blur_enabled" => cfg.blur_enabled = num(&value).map_err(bad)?,
                "blur_length" => cfg.blur_length = num(&value).map_err(bad)?,
                "blur_particles" => cfg.blur_particles = num(&value).map_err(bad)?,
                "reference_width" => cfg.reference_width = num(&value).map_err(bad)?,
                _ => {
                    return Err(Error::Config(format!("unknown weather key `{key}`")));
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Splits `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

pub(crate) fn num<N: std::str::FromStr>(s: &str) -> std::result::Result<N, String> {
    s.parse().map_err(|_| format!("cannot parse `{s}`"))
}

fn triple(s: &str) -> std::result::Result<[f64; 3], String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|t| num(t.trim()))
        .collect::<std::result::Result<_, _>>()?;
    v.try_into().map_err(|_| format!("expected three comma separated values, got `{s}`"))
}

pub const PRESET_NAMES: [&str; 5] = ["snow", "rain", "sparks", "fog", "grey"];

pub fn presets() -> BTreeMap<&'static str, WeatherConfig> {
    PRESET_NAMES.iter().map(|&n| (n, preset(n).unwrap())).collect()
}

pub fn preset(name: &str) -> Result<WeatherConfig> {
    Ok(match name {
        "snow" => WeatherConfig::snow(),
        "rain" => WeatherConfig::rain(),
        "sparks" => WeatherConfig::sparks(),
        "fog" => WeatherConfig::fog(),
        "grey" => WeatherConfig::grey(),
        _ => {
            return Err(Error::UnknownPreset {
                name: name.to_string(),
                valid: PRESET_NAMES.iter().map(|s| s.to_string()).collect(),
            })
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid_and_round_trip_through_text() {
        for (name, cfg) in presets() {
            cfg.validate().unwrap();
            let back = WeatherConfig::from_kv(&cfg.to_kv(), WeatherConfig::snow()).unwrap();
            assert_eq!(back, cfg, "{name}");
        }
    }

    #[test]
    fn unknown_preset_lists_valid_names() {
        let e = preset("snwo").unwrap_err().to_string();
        for n in PRESET_NAMES {
            assert!(e.contains(n), "{e}");
        }
    }

    #[test]
    fn overrides_and_rejects_unknown_keys() {
        let cfg = WeatherConfig::from_kv("count = 12 # few\nblend_mode=meshkin\n", WeatherConfig::snow()).unwrap();
        assert_eq!(cfg.count, 12);
        assert_eq!(cfg.blend_mode, BlendMode::Meshkin);
        assert!(WeatherConfig::from_kv("colour = 1", WeatherConfig::snow()).is_err());
        assert!(WeatherConfig::from_kv("count = 0", WeatherConfig::snow()).is_err());
    }
}
