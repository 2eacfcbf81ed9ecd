//! Adversarial optimisation of particle offsets, colours and transparencies.
//!
//! Colour and transparency are optimised in an unbounded `η` domain through
//! `ξ = (tanh η + 1)/2`. Transparency is mapped onto `(0, θ_max)` with
//! `θ_max = 2·θ_base` per particle, so the initial `η_θ` is zero.

mod loss;
mod run;

use std::fmt;
use std::str::FromStr;

pub use loss::{loss, loss_and_grad, penalty, LossTerms, AEE_SMOOTHING};
pub use run::{
    run_attack, run_attack_from, AttackContext, AttackReport, Evaluation, ReportSummary, StepRecord, Timings, REPORT_VERSION,
};

use crate::error::{Error, Result};
use crate::flow_field::FlowField;
use crate::geometry::Vec3;
use crate::particles::ParticleSet;
use crate::real::Real;
use crate::render::ParticleGrad;
use crate::victim::FlowEstimatorConfig;

pub const DECODE_EPS: f64 = 1e-6;
pub const THETA_MAX_FACTOR: f64 = 2.0;

/// `atanh(2ξ − 1)` with `ξ` clamped into `[ε, 1 − ε]`.
pub fn encode<T: Real>(xi: T) -> T {
    let eps = T::lit(DECODE_EPS);
    let xi = xi.max(eps).min(T::one() - eps);
    (T::two() * xi - T::one()).atanh()
}

/// `(tanh η + 1)/2`, clamped into `[ε, 1 − ε]`.
pub fn decode<T: Real>(eta: T) -> T {
    decode_with_grad(eta).0
}

/// Value and derivative of [`decode`]; the derivative is zero where the
/// clamp is active.
pub fn decode_with_grad<T: Real>(eta: T) -> (T, T) {
    let eps = T::lit(DECODE_EPS);
    let t = eta.tanh();
    let raw = (t + T::one()) * T::half();
    if raw < eps {
        (eps, T::zero())
    } else if raw > T::one() - eps {
        (T::one() - eps, T::zero())
    } else {
        (raw, (T::one() - t * t) * T::half())
    }
}

/// Which parameter blocks the optimiser may change.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VariableMask {
    pub offset1: bool,
    pub offset2: bool,
    pub color: bool,
    pub transparency: bool,
}

impl VariableMask {
    pub const ALL: Self = Self {
        offset1: true,
        offset2: true,
        color: true,
        transparency: true,
    };

    /// All blocks, except that fog keeps its motion offset frozen.
    pub fn for_preset(name: &str) -> Self {
        if name == "fog" {
            Self { offset2: false, ..Self::ALL }
        } else {
            Self::ALL
        }
    }

    pub fn is_empty(&self) -> bool {
        !(self.offset1 || self.offset2 || self.color || self.transparency)
    }
}

impl Default for VariableMask {
    fn default() -> Self {
        Self::ALL
    }
}

/// Comma separated subset of `p1, p2, col, transp`.
impl FromStr for VariableMask {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let mut m = Self {
            offset1: false,
            offset2: false,
            color: false,
            transparency: false,
        };
        for tok in s.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            match tok {
                "p1" => m.offset1 = true,
                "p2" => m.offset2 = true,
                "col" => m.color = true,
                "transp" => m.transparency = true,
                other => {
                    return Err(Error::Config(format!(
                        "unknown variable `{other}` (expected p1, p2, col, transp)"
                    )))
                }
            }
        }
        if m.is_empty() {
            return Err(Error::Config("variable mask is empty".into()));
        }
        Ok(m)
    }
}

impl fmt::Display for VariableMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names = [
            (self.offset1, "p1"),
            (self.offset2, "p2"),
            (self.color, "col"),
            (self.transparency, "transp"),
        ];
        let on: Vec<&str> = names.iter().filter(|(b, _)| *b).map(|(_, n)| *n).collect();
        f.write_str(&on.join(","))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub alpha1: f64,
    pub alpha2: f64,
    /// `None` is the zero-flow target.
    pub target: Option<FlowField<f64>>,
    pub mask: VariableMask,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub flow: FlowEstimatorConfig,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            steps: 750,
            alpha1: 1000.0,
            alpha2: 1000.0,
            target: None,
            mask: VariableMask::ALL,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            flow: FlowEstimatorConfig::default(),
        }
    }
}

impl AttackConfig {
    /// A zero step count is accepted and measures the random initialisation.
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.mask.is_empty() {
            return Err(Error::Config("variable mask is empty".into()));
        }
        if !(self.alpha1 >= 0.0 && self.alpha2 >= 0.0) {
            return Err(Error::Config("penalty weights must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::Config("invalid Adam hyper-parameters".into()));
        }
        self.flow.validate()
    }

    pub fn to_kv(&self) -> String {
        format!(
            "learning_rate={}\nsteps={}\nalpha1={}\nalpha2={}\nvars={}\nadam_beta1={}\nadam_beta2={}\nadam_eps={}\nsmoothness={}\npyramid_levels={}\niterations_per_level={}\n",
            self.learning_rate,
            self.steps,
            self.alpha1,
            self.alpha2,
            self.mask,
            self.adam_beta1,
            self.adam_beta2,
            self.adam_eps,
            self.flow.smoothness,
            self.flow.pyramid_levels,
            self.flow.iterations_per_level
        )
    }

    /// Applies `key=value` lines on top of `base`.
    pub fn from_kv(text: &str, base: AttackConfig) -> Result<Self> {
        let mut c = base;
        for (k, v) in crate::particles::parse_kv(text)? {
            let bad = |e: String| Error::Config(format!("{k}: {e}"));
            match k.as_str() {
                "learning_rate" => c.learning_rate = crate::particles::parse_num(&v).map_err(bad)?,
                "steps" => c.steps = crate::particles::parse_num(&v).map_err(bad)?,
                "alpha1" => c.alpha1 = crate::particles::parse_num(&v).map_err(bad)?,
                "alpha2" => c.alpha2 = crate::particles::parse_num(&v).map_err(bad)?,
                "vars" => c.mask = v.parse()?,
                "adam_beta1" => c.adam_beta1 = crate::particles::parse_num(&v).map_err(bad)?,
                "adam_beta2" => c.adam_beta2 = crate::particles::parse_num(&v).map_err(bad)?,
                "adam_eps" => c.adam_eps = crate::particles::parse_num(&v).map_err(bad)?,
                "smoothness" => c.flow.smoothness = crate::particles::parse_num(&v).map_err(bad)?,
                "pyramid_levels" => c.flow.pyramid_levels = crate::particles::parse_num(&v).map_err(bad)?,
                "iterations_per_level" => {
                    c.flow.iterations_per_level = crate::particles::parse_num(&v).map_err(bad)?
                }
                _ => return Err(Error::Config(format!("unknown attack key `{k}`"))),
            }
        }
        c.validate()?;
        Ok(c)
    }
}

/// Gradient blocks, shaped like the parameters of [`AttackState`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrad<T> {
    pub offset1: Vec<Vec3<T>>,
    pub offset2: Vec<Vec3<T>>,
    pub eta_color: Vec<[T; 3]>,
    pub eta_transparency: Vec<T>,
}

impl<T: Real> ParamGrad<T> {
    pub fn zeros(n: usize) -> Self {
        Self {
            offset1: vec![Vec3::zero(); n],
            offset2: vec![Vec3::zero(); n],
            eta_color: vec![[T::zero(); 3]; n],
            eta_transparency: vec![T::zero(); n],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.offset1.iter().chain(&self.offset2).all(Vec3::is_finite)
            && self.eta_color.iter().flatten().all(|v| v.is_finite())
            && self.eta_transparency.iter().all(|v| v.is_finite())
    }

    fn flat(&self) -> Vec<T> {
        let mut v = Vec::with_capacity(self.offset1.len() * 10);
        v.extend(self.offset1.iter().flat_map(|p| p.0));
        v.extend(self.offset2.iter().flat_map(|p| p.0));
        v.extend(self.eta_color.iter().flatten().copied());
        v.extend(self.eta_transparency.iter().copied());
        v
    }
}

/// Optimisation variables for every parent particle plus Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackState<T> {
    /// Parent particles at initialisation; positions and motions stay fixed.
    pub base: ParticleSet<T>,
    pub offset1: Vec<Vec3<T>>,
    pub offset2: Vec<Vec3<T>>,
    pub eta_color: Vec<[T; 3]>,
    pub eta_transparency: Vec<T>,
    pub theta_max: Vec<T>,
    pub m: ParamGrad<T>,
    pub v: ParamGrad<T>,
    pub step: usize,
    pub warnings: Vec<String>,
}

impl<T: Real> AttackState<T> {
    /// Starts from an unexpanded particle set.
    pub fn new(base: ParticleSet<T>) -> Result<Self> {
        if base.expanded {
            return Err(Error::Contract("attack state needs the unexpanded particle set".into()));
        }
        let n = base.len();
        let factor = T::lit(THETA_MAX_FACTOR);
        Ok(Self {
            offset1: base.particles.iter().map(|p| p.offset1).collect(),
            offset2: base.particles.iter().map(|p| p.offset2).collect(),
            eta_color: base.particles.iter().map(|p| p.color.map(encode)).collect(),
            theta_max: base.particles.iter().map(|p| p.transparency * factor).collect(),
            eta_transparency: vec![encode(T::one() / factor); n],
            m: ParamGrad::zeros(n),
            v: ParamGrad::zeros(n),
            step: 0,
            warnings: Vec::new(),
            base,
        })
    }

    pub fn len(&self) -> usize {
        self.offset1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offset1.is_empty()
    }

    /// Decoded parent particles with refreshed depths (not blur-expanded).
    pub fn particles(&self, rel: &crate::geometry::RigidTransform<T>) -> ParticleSet<T> {
        let mut ps = self.base.clone();
        for (j, p) in ps.particles.iter_mut().enumerate() {
            p.offset1 = self.offset1[j];
            p.offset2 = self.offset2[j];
            p.color = self.eta_color[j].map(decode);
            p.transparency = self.theta_max[j] * decode(self.eta_transparency[j]);
            p.refresh_depths(rel);
        }
        ps
    }

    /// Maps renderer gradients on `(γ, θ)` into `η` space.
    pub fn chain_to_eta(&self, g: &[ParticleGrad<T>]) -> ParamGrad<T> {
        let mut out = ParamGrad::zeros(self.len());
        for (j, gj) in g.iter().enumerate() {
            out.offset1[j] = gj.offset1;
            out.offset2[j] = gj.offset2;
            for c in 0..3 {
                out.eta_color[j][c] = gj.color[c] * decode_with_grad(self.eta_color[j][c]).1;
            }
            out.eta_transparency[j] =
                gj.transparency * self.theta_max[j] * decode_with_grad(self.eta_transparency[j]).1;
        }
        out
    }

    /// Bias-corrected Adam update of every unmasked block. A non-finite
    /// gradient skips the update but still advances the step counter.
    pub fn adam_step(&mut self, g: &ParamGrad<T>, cfg: &AttackConfig) {
        self.step += 1;
        if !g.is_finite() {
            self.warnings.push(format!("step {}: non-finite gradient, update skipped", self.step));
            return;
        }
        let (b1, b2) = (T::lit(cfg.adam_beta1), T::lit(cfg.adam_beta2));
        let lr = T::lit(cfg.learning_rate);
        let eps = T::lit(cfg.adam_eps);
        let t = self.step as i32;
        let c1 = T::one() - b1.powi(t);
        let c2 = T::one() - b2.powi(t);
        let one = T::one();
        let upd = |p: &mut T, m: &mut T, v: &mut T, g: T| {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let mh = *m / c1;
            let vh = *v / c2;
            *p -= lr * mh / (vh.sqrt() + eps);
        };
        let mask = cfg.mask;
        for j in 0..self.len() {
            for c in 0..3 {
                if mask.offset1 {
                    upd(&mut self.offset1[j].0[c], &mut self.m.offset1[j].0[c], &mut self.v.offset1[j].0[c], g.offset1[j].0[c]);
                }
                if mask.offset2 {
                    upd(&mut self.offset2[j].0[c], &mut self.m.offset2[j].0[c], &mut self.v.offset2[j].0[c], g.offset2[j].0[c]);
                }
                if mask.color {
                    upd(&mut self.eta_color[j][c], &mut self.m.eta_color[j][c], &mut self.v.eta_color[j][c], g.eta_color[j][c]);
                }
            }
            if mask.transparency {
                upd(
                    &mut self.eta_transparency[j],
                    &mut self.m.eta_transparency[j],
                    &mut self.v.eta_transparency[j],
                    g.eta_transparency[j],
                );
            }
        }
    }

    /// Flattened parameter vector in block order `δ1, δ2, η_γ, η_θ`.
    pub fn flat_params(&self) -> Vec<T> {
        ParamGrad {
            offset1: self.offset1.clone(),
            offset2: self.offset2.clone(),
            eta_color: self.eta_color.clone(),
            eta_transparency: self.eta_transparency.clone(),
        }
        .flat()
    }

    /// Inverse of [`Self::flat_params`].
    pub fn set_flat_params(&mut self, x: &[T]) {
        let n = self.len();
        assert_eq!(x.len(), n * 10, "flat parameter length");
        for j in 0..n {
            for c in 0..3 {
                self.offset1[j].0[c] = x[j * 3 + c];
                self.offset2[j].0[c] = x[3 * n + j * 3 + c];
                self.eta_color[j][c] = x[6 * n + j * 3 + c];
            }
            self.eta_transparency[j] = x[9 * n + j];
        }
    }
}

impl<T: Real> ParamGrad<T> {
    pub fn flat_values(&self) -> Vec<T> {
        self.flat()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_spot_values() {
        assert_eq!(encode(0.5f64), 0.0);
        assert!((encode(0.75f64) - 0.5f64.atanh()).abs() < 1e-15);
        assert!((encode(0.75f64) - 0.549_306_144_334_054_8).abs() < 1e-12);
        assert_eq!(decode(f64::INFINITY), 1.0 - DECODE_EPS);
        assert_eq!(decode(f64::NEG_INFINITY), DECODE_EPS);
        assert_eq!(decode(0.0f64), 0.5);
    }

    #[test]
    fn decode_derivative_matches_fd() {
        for eta in [-2.0f64, -0.3, 0.0, 0.8, 3.0] {
            let h = 1e-6;
            let fd = (decode(eta + h) - decode(eta - h)) / (2.0 * h);
            assert!((decode_with_grad(eta).1 - fd).abs() < 1e-8);
        }
    }

    #[test]
    fn mask_parsing() {
        let m: VariableMask = "p1, col".parse().unwrap();
        assert!(m.offset1 && m.color && !m.offset2 && !m.transparency);
        assert_eq!(m.to_string(), "p1,col");
        assert!("p3".parse::<VariableMask>().is_err());
        assert!("".parse::<VariableMask>().is_err());
        assert!(!VariableMask::for_preset("fog").offset2);
        assert_eq!(VariableMask::for_preset("snow"), VariableMask::ALL);
    }

    #[test]
    fn attack_config_kv_round_trip() {
        let c = AttackConfig {
            learning_rate: 0.003,
            mask: "p1,transp".parse().unwrap(),
            ..AttackConfig::default()
        };
        let back = AttackConfig::from_kv(&c.to_kv(), AttackConfig::default()).unwrap();
        assert_eq!(back, c);
        assert!(AttackConfig::from_kv("bogus=1", AttackConfig::default()).is_err());
    }

    fn toy_state(n: usize) -> AttackState<f64> {
        let mut ps = ParticleSet::<f64>::empty(crate::particles::WeatherConfig::snow());
        let tpl = std::sync::Arc::new(crate::template::Template::impulse(3));
        for j in 0..n {
            ps.particles.push(crate::particles::Particle {
                position: Vec3::new(0.1 * j as f64, 0.0, 3.0),
                motion: Vec3::new(0.0, 0.2, 0.0),
                offset1: Vec3::zero(),
                offset2: Vec3::zero(),
                color: [0.3, 0.5, 0.7],
                transparency: 0.6,
                template_angle: 0.0,
                billboards: [tpl.clone(), tpl.clone()],
                parent: j,
                blur_fraction: 0.0,
                blur_weight: 1.0,
                depth1: 3.0,
                depth2: 3.0,
            });
        }
        ps.parent_count = n;
        AttackState::new(ps).unwrap()
    }

    #[test]
    fn state_decodes_to_initial_particles() {
        let s = toy_state(3);
        let ps = s.particles(&crate::geometry::RigidTransform::identity());
        for p in &ps.particles {
            assert!((p.transparency - 0.6).abs() < 1e-12);
            assert!((p.color[2] - 0.7).abs() < 1e-9);
        }
        let mut t = s.clone();
        t.set_flat_params(&s.flat_params());
        assert_eq!(t, s);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = toy_state(2);
        let before = s.flat_params();
        s.adam_step(&ParamGrad::zeros(2), &AttackConfig::default());
        assert_eq!(s.flat_params(), before);
        s.m.offset1[0].0[0] = 0.5;
        s.v.offset1[0].0[0] = 0.25;
        s.adam_step(&ParamGrad::zeros(2), &AttackConfig::default());
        assert!((s.m.offset1[0].0[0] - 0.45).abs() < 1e-15);
        assert!((s.v.offset1[0].0[0] - 0.25 * 0.999).abs() < 1e-15);
    }

    #[test]
    fn constant_gradient_moves_by_learning_rate() {
        let mut s = toy_state(1);
        let cfg = AttackConfig { learning_rate: 1e-3, ..Default::default() };
        let mut g = ParamGrad::zeros(1);
        g.offset1[0] = Vec3::new(2.5, -0.1, 7.0);
        for _ in 0..200 {
            let before = s.offset1[0];
            s.adam_step(&g, &cfg);
            let d = s.offset1[0] - before;
            for c in 0..3 {
                assert!((d.0[c].abs() - 1e-3).abs() < 1e-6, "step {}", s.step);
            }
        }
    }

    #[test]
    fn masked_blocks_and_nonfinite_gradients() {
        let mut s = toy_state(2);
        let cfg = AttackConfig { learning_rate: 0.1, mask: "p1,col,transp".parse().unwrap(), ..Default::default() };
        let mut g = ParamGrad::zeros(2);
        g.offset1[1] = Vec3::new(1.0, 1.0, 1.0);
        g.offset2[1] = Vec3::new(1.0, 1.0, 1.0);
        for _ in 0..5 {
            s.adam_step(&g, &cfg);
        }
        assert!(s.offset2.iter().all(|d| *d == Vec3::zero()));
        assert!(s.offset1[1].x() < 0.0);
        let before = s.flat_params();
        g.eta_transparency[0] = f64::NAN;
        s.adam_step(&g, &cfg);
        assert_eq!(s.step, 6);
        assert_eq!(s.flat_params(), before);
        assert_eq!(s.warnings.len(), 1);
    }
}
