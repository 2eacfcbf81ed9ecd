//! Finite-difference verification of the renderer adjoint, the flow adjoint
//! and the end-to-end attack gradient on a small synthetic scene.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attack::{AttackConfig, AttackContext, AttackState};
use crate::error::{Error, Result};
use crate::flow_field::FlowField;
use crate::geometry::Vec3;
use crate::image::Image;
use crate::oracles::{fd_gradient, OracleTolerance};
use crate::particles::{expand_motion_blur, sample_particles, BlendMode, ParticleSet, WeatherConfig};
use crate::render::{backward, render_shared, RenderParams};
use crate::scene_io::{synth_scene, SceneBundle, SynthSpec};
use crate::victim::{estimate_flow, estimate_flow_taped, flow_backward, FlowEstimatorConfig};

pub const MAX_GRADCHECK_SIDE: usize = 128;
pub const BLOCKS: [&str; 4] = ["offset1", "offset2", "eta_color", "eta_transparency"];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckSpec {
    pub width: usize,
    pub height: usize,
    pub particles: usize,
    pub seed: u64,
    pub pyramid_levels: usize,
    pub iterations_per_level: usize,
}

impl Default for GradcheckSpec {
    fn default() -> Self {
        Self {
            width: 48,
            height: 32,
            particles: 20,
            seed: 0,
            pyramid_levels: 2,
            iterations_per_level: 20,
        }
    }
}

impl GradcheckSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width > MAX_GRADCHECK_SIDE || self.height > MAX_GRADCHECK_SIDE {
            return Err(Error::Config(format!(
                "gradcheck is limited to {MAX_GRADCHECK_SIDE}×{MAX_GRADCHECK_SIDE} pixels"
            )));
        }
        if self.width < 16 || self.height < 16 || self.particles == 0 {
            return Err(Error::Config("gradcheck needs at least 16×16 pixels and one particle".into()));
        }
        Ok(())
    }

    pub fn flow_config(&self) -> FlowEstimatorConfig {
        FlowEstimatorConfig {
            pyramid_levels: self.pyramid_levels,
            iterations_per_level: self.iterations_per_level,
            ..Default::default()
        }
    }

    /// Particles with mid-range colours so the `η` derivatives are not
    /// flattened by the decode clamp, and unscaled templates.
    pub fn weather(&self, blend: BlendMode) -> WeatherConfig {
        WeatherConfig {
            count: self.particles,
            base_size: 9.0,
            depth_decay: 3.0,
            base_color: [0.8, 0.6, 0.45],
            color_jitter: [20.0, 0.1, 0.1],
            blend_mode: blend,
            transparency_base: 0.5,
            reference_width: 0,
            ..WeatherConfig::snow()
        }
    }

    pub fn scene(&self) -> Result<SceneBundle<f64>> {
        let mut s = SynthSpec::new(self.width, self.height, Vec3::new(0.15, 0.05, 0.0), vec![4.0, 9.0]);
        s.texture_seed = self.seed.wrapping_add(11);
        Ok(synth_scene(&s)?.0)
    }

    pub fn particles(&self, scene: &SceneBundle<f64>, blend: BlendMode) -> Result<ParticleSet<f64>> {
        sample_particles(scene, &self.weather(blend), self.seed)
    }
}

/// Outcome of one finite-difference suite.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub checked: usize,
    pub max_relative_error: f64,
    /// Worst coordinate as `(label, analytic, numeric)`.
    pub worst: Option<(String, f64, f64)>,
    pub tolerance: f64,
}

impl CheckResult {
    fn new(name: &str, tol: f64) -> Self {
        Self {
            name: name.to_string(),
            checked: 0,
            max_relative_error: 0.0,
            worst: None,
            tolerance: tol,
        }
    }

    fn push(&mut self, label: String, analytic: f64, numeric: f64, tol: &OracleTolerance) {
        let e = tol.relative_error(analytic, numeric);
        self.checked += 1;
        if e >= self.max_relative_error || self.worst.is_none() {
            self.max_relative_error = e;
            self.worst = Some((label, analytic, numeric));
        }
    }

    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_relative_error <= self.tolerance
    }
}

fn random_image(w: usize, h: usize, rng: &mut ChaCha8Rng) -> Image<f64> {
    Image::from_fn(w, h, 3, |_, _, _| rng.gen_range(-1.0..1.0))
}

/// Renderer adjoint against central differences of `⟨G, render⟩` for every
/// coordinate of every parent, with `δ` in metres and colour/transparency
/// in `η` space.
pub fn check_renderer(spec: &GradcheckSpec, blend: BlendMode, tol: &OracleTolerance) -> Result<CheckResult> {
    spec.validate()?;
    let scene = Arc::new(spec.scene()?);
    let ps = spec.particles(&scene, blend)?;
    let rel = scene.relative_pose();
    let state = AttackState::new(ps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed);
    let g1 = random_image(spec.width, spec.height, &mut rng);
    let g2 = random_image(spec.width, spec.height, &mut rng);
    let params = RenderParams::differentiate(blend);
    let render_state = |s: &AttackState<f64>| -> Result<(Image<f64>, Image<f64>, crate::render::RenderTape<f64>)> {
        let ps = expand_motion_blur(&s.particles(&rel), &rel);
        let out = render_shared(scene.clone(), Arc::new(ps), params)?;
        Ok((out.aug1, out.aug2, out.tape))
    };
    let (_, _, tape) = render_state(&state)?;
    let analytic = state.chain_to_eta(&backward(&tape, &g1, &g2)?).flat_values();
    let x0 = state.flat_params();
    let n = state.len();
    let mut res = CheckResult::new(&format!("renderer ({blend})"), tol.rel_tol);
    for (i, an) in analytic.iter().enumerate() {
        let block = (i / (3 * n)).min(3);
        let h = if block < 2 { tol.fd_step_position } else { tol.fd_step_eta };
        let eval = |sign: f64| -> Result<(Image<f64>, Image<f64>)> {
            let mut s = state.clone();
            let mut x = x0.clone();
            x[i] += sign * h;
            s.set_flat_params(&x);
            let (a, b, _) = render_state(&s)?;
            Ok((a, b))
        };
        let (p1, p2) = eval(1.0)?;
        let (m1, m2) = eval(-1.0)?;
        let mut num = 0.0;
        for (g, (p, m)) in [(&g1, (&p1, &m1)), (&g2, (&p2, &m2))] {
            for k in 0..g.data().len() {
                let d = p.data()[k] - m.data()[k];
                if d != 0.0 {
                    num += g.data()[k] * d;
                }
            }
        }
        let num = num / (2.0 * h);
        res.push(format!("{}[{}]", BLOCKS[block], i), *an, num, tol);
    }
    Ok(res)
}

/// Flow adjoint against central differences of `⟨G, flow⟩` at random pixels
/// of both frames.
pub fn check_victim(spec: &GradcheckSpec, pixels: usize, tol: &OracleTolerance) -> Result<CheckResult> {
    spec.validate()?;
    let scene = spec.scene()?;
    let cfg = spec.flow_config();
    let (i1, i2) = (&scene.frame1, &scene.frame2);
    let (w, h) = (spec.width, spec.height);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0xf10);
    let g = FlowField::from_fn(w, h, |_, _| (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
    let out = estimate_flow_taped(i1, i2, &cfg)?;
    let (b1, b2) = flow_backward(&out.tape, &g)?;
    let objective = |a: &Image<f64>, b: &Image<f64>| -> f64 {
        let f = estimate_flow(a, b, &cfg).expect("validated inputs");
        (0..f.len()).map(|k| g.u[k] * f.u[k] + g.v[k] * f.v[k]).sum()
    };
    let mut res = CheckResult::new("victim flow", tol.rel_tol);
    for k in 0..pixels {
        let idx = rng.gen_range(0..w * h * 3);
        let second = k % 2 == 1;
        let base = if second { i2.data()[idx] } else { i1.data()[idx] };
        let num = fd_gradient(
            |p| {
                let (mut a, mut b) = (i1.clone(), i2.clone());
                if second {
                    b.data_mut()[idx] = p[0];
                } else {
                    a.data_mut()[idx] = p[0];
                }
                objective(&a, &b)
            },
            &[base],
            tol.fd_step_position,
        )[0];
        let an = if second { b2.data()[idx] } else { b1.data()[idx] };
        res.push(format!("I{}[{}]", 1 + second as usize, idx), an, num, tol);
    }
    Ok(res)
}

/// Full attack-loss gradient against central differences on the
/// `per_block` coordinates with the largest analytic magnitude in each block.
pub fn check_end_to_end(spec: &GradcheckSpec, per_block: usize, tol: &OracleTolerance) -> Result<CheckResult> {
    spec.validate()?;
    let scene = spec.scene()?;
    let ps = spec.particles(&scene, BlendMode::Additive)?;
    let acfg = AttackConfig {
        flow: spec.flow_config(),
        ..Default::default()
    };
    let ctx = AttackContext::new(&scene, &acfg)?;
    let state = AttackState::new(ps)?;
    let ev = ctx.evaluate(&state, true)?;
    let analytic = ev.grad.expect("gradient requested").flat_values();
    let n = state.len();
    let x0 = state.flat_params();
    let mut res = CheckResult::new("end-to-end attack loss", tol.rel_tol);
    let ranges = [(0, 3 * n), (3 * n, 6 * n), (6 * n, 9 * n), (9 * n, 10 * n)];
    for (b, (lo, hi)) in ranges.iter().enumerate() {
        let mut idx: Vec<usize> = (*lo..*hi).collect();
        idx.sort_by(|a, c| analytic[*c].abs().total_cmp(&analytic[*a].abs()));
        let h = if b < 2 { tol.fd_step_position } else { tol.fd_step_eta };
        for &i in idx.iter().take(per_block) {
            let num = fd_gradient(
                |p| {
                    let mut s = state.clone();
                    let mut x = x0.clone();
                    x[i] = p[0];
                    s.set_flat_params(&x);
                    ctx.evaluate(&s, false).map(|e| e.terms.total).unwrap_or(f64::NAN)
                },
                &[x0[i]],
                h,
            )[0];
            res.push(format!("{}[{}]", BLOCKS[b], i), analytic[i], num, tol);
        }
    }
    Ok(res)
}

/// All suites with the default tolerances.
pub fn run_all(spec: &GradcheckSpec) -> Result<Vec<CheckResult>> {
    let tol = OracleTolerance::default();
    Ok(vec![
        check_renderer(spec, BlendMode::Additive, &tol)?,
        check_renderer(spec, BlendMode::Meshkin, &tol)?,
        check_victim(spec, 10, &tol)?,
        check_end_to_end(spec, 5, &tol)?,
    ])
}
