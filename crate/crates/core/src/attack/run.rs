//! The optimisation loop and its report.

use std::sync::Arc;
use std::time::Instant;

use serde::Serialize;

use super::{loss_and_grad, AttackConfig, AttackState, LossTerms, ParamGrad};
use crate::error::{Error, Result};
use crate::flow_field::FlowField;
use crate::image::Image;
use crate::metrics::aee;
use crate::particles::{expand_motion_blur, sample_particles, ParticleSet, WeatherConfig, MIN_VISIBLE_Z};
use crate::real::Real;
use crate::render::{backward, render_shared, RenderParams};
use crate::scene_io::SceneBundle;
use crate::victim::{estimate_flow, estimate_flow_taped, flow_backward};

pub const REPORT_VERSION: u32 = 1;

/// Objective value, robustness and (optionally) gradient at one state.
#[derive(Debug, Clone)]
pub struct Evaluation<T> {
    pub terms: LossTerms<T>,
    pub aee_robustness: T,
    pub grad: Option<ParamGrad<T>>,
}

/// Everything fixed for the duration of an attack.
pub struct AttackContext<T> {
    pub scene: Arc<SceneBundle<T>>,
    pub benign: FlowField<T>,
    pub target: FlowField<T>,
    pub config: AttackConfig,
}

impl<T: Real> AttackContext<T> {
    pub fn new(scene: &SceneBundle<T>, config: &AttackConfig) -> Result<Self> {
        config.validate()?;
        scene.validate()?;
        let (w, h) = (scene.width(), scene.height());
        let target = match &config.target {
            None => FlowField::zeros(w, h),
            Some(t) if t.dims() == (w, h) => t.cast(),
            Some(t) => {
                return Err(Error::Config(format!("target flow is {:?}, scene is {:?}", t.dims(), (w, h))))
            }
        };
        let benign = estimate_flow(&scene.frame1, &scene.frame2, &config.flow)?;
        Ok(Self {
            scene: Arc::new(scene.clone()),
            benign,
            target,
            config: config.clone(),
        })
    }

    fn blend_params(&self, ps: &ParticleSet<T>, beta_render: bool) -> RenderParams {
        if beta_render {
            RenderParams::render(ps.config.blend_mode)
        } else {
            RenderParams::differentiate(ps.config.blend_mode)
        }
    }

    /// Renders the state (expanded if blur is configured).
    pub fn render_state(&self, state: &AttackState<T>, beta_render: bool) -> Result<(Image<T>, Image<T>)> {
        let rel = self.scene.relative_pose();
        let parents = state.particles(&rel);
        let ps = expand_motion_blur(&parents, &rel);
        let params = self.blend_params(&ps, beta_render);
        let out = render_shared(self.scene.clone(), Arc::new(ps), params)?;
        Ok((out.aug1, out.aug2))
    }

    /// Runs decode, blur expansion, rendering at the differentiation
    /// sharpness, flow estimation and the loss; with `with_grad` also the
    /// full reverse chain into parameter space.
    pub fn evaluate(&self, state: &AttackState<T>, with_grad: bool) -> Result<Evaluation<T>> {
        let rel = self.scene.relative_pose();
        let parents = state.particles(&rel);
        let ps = expand_motion_blur(&parents, &rel);
        let params = self.blend_params(&ps, false);
        let out = render_shared(self.scene.clone(), Arc::new(ps), params)?;
        let flow = estimate_flow_taped(&out.aug1, &out.aug2, &self.config.flow)?;
        let cfg = &self.config;
        let (terms, gflow, gp1, gp2) = loss_and_grad(&flow.flow, &self.target, &parents, &rel, cfg.alpha1, cfg.alpha2)?;
        let aee_robustness = aee(&self.benign, &flow.flow)?;
        let grad = if with_grad {
            let (gi1, gi2) = flow_backward(&flow.tape, &gflow)?;
            let gr = backward(&out.tape, &gi1, &gi2)?;
            let mut g = state.chain_to_eta(&gr);
            for j in 0..g.offset1.len() {
                g.offset1[j] += gp1[j];
                g.offset2[j] += gp2[j];
            }
            Some(g)
        } else {
            None
        };
        Ok(Evaluation {
            terms,
            aee_robustness,
            grad,
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub aee_target: f64,
    pub aee_robustness: f64,
    pub penalty: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Timings {
    pub total_seconds: f64,
    pub mean_step_seconds: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReportSummary {
    pub version: u32,
    pub seed: u64,
    pub weather_config: String,
    pub attack_config: String,
    pub parent_particles: usize,
    pub rendered_particles: usize,
    pub steps: usize,
    pub initial: StepRecord,
    #[serde(rename = "final")]
    pub final_: StepRecord,
    pub best: StepRecord,
    /// Robustness of the initial, final and best states re-rendered at the
    /// sharp output occlusion.
    pub initial_aee_robustness_render: f64,
    pub final_aee_robustness_render: f64,
    pub best_aee_robustness_render: f64,
    pub trace: Vec<StepRecord>,
    pub warnings: Vec<String>,
    pub timings: Timings,
}

impl ReportSummary {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }
}

#[derive(Debug, Clone)]
pub struct AttackReport<T> {
    pub summary: ReportSummary,
    pub initial_state: AttackState<T>,
    pub final_state: AttackState<T>,
    pub best_state: AttackState<T>,
    pub benign_flow: FlowField<T>,
    /// Sharp renders of the best and final states and the victim's output.
    pub best_images: [Image<T>; 2],
    pub best_flow: FlowField<T>,
    pub final_images: [Image<T>; 2],
    pub final_flow: FlowField<T>,
}

fn record<T: Real>(step: usize, e: &Evaluation<T>) -> StepRecord {
    StepRecord {
        step,
        loss: e.terms.total.to_f64_lossy(),
        aee_target: e.terms.aee.to_f64_lossy(),
        aee_robustness: e.aee_robustness.to_f64_lossy(),
        penalty: e.terms.penalty.to_f64_lossy(),
    }
}

/// Samples particles from `cfg` with `seed`, then optimises them.
pub fn run_attack<T: Real>(
    scene: &SceneBundle<T>,
    cfg: &WeatherConfig,
    acfg: &AttackConfig,
    seed: u64,
) -> Result<AttackReport<T>> {
    let ps = sample_particles(scene, cfg, seed)?;
    run_attack_from(scene, ps, acfg)
}

/// Optimises an already sampled, unexpanded particle set.
pub fn run_attack_from<T: Real>(scene: &SceneBundle<T>, ps: ParticleSet<T>, acfg: &AttackConfig) -> Result<AttackReport<T>> {
    let t0 = Instant::now();
    let ctx = AttackContext::new(scene, acfg)?;
    let rel = ctx.scene.relative_pose();
    let seed = ps.seed;
    let weather = ps.config.to_kv();
    let mut state = AttackState::new(ps)?;
    let initial_state = state.clone();
    let rendered = expand_motion_blur(&state.particles(&rel), &rel).len();
    let mut trace = Vec::with_capacity(acfg.steps + 1);
    let mut best: Option<(StepRecord, AttackState<T>)> = None;
    for k in 0..=acfg.steps {
        let e = ctx.evaluate(&state, k < acfg.steps)?;
        let rec = record(k, &e);
        if best.as_ref().is_none_or(|(b, _)| rec.aee_robustness > b.aee_robustness) {
            best = Some((rec.clone(), state.clone()));
        }
        trace.push(rec);
        if let Some(g) = e.grad {
            let before = state.flat_params();
            state.adam_step(&g, acfg);
            let moved = state.particles(&rel);
            let eps = T::lit(MIN_VISIBLE_Z);
            if moved.particles.iter().any(|p| !(p.depth1 > eps && p.depth2 > eps)) {
                state.set_flat_params(&before);
                state.warnings.push(format!("step {}: update would move a particle behind a camera, reverted", state.step));
            }
        }
    }
    let (best_rec, best_state) = best.expect("at least one evaluation");
    let sharp = |s: &AttackState<T>| -> Result<([Image<T>; 2], FlowField<T>, f64)> {
        let (a, b) = ctx.render_state(s, true)?;
        let f = estimate_flow(&a, &b, &acfg.flow)?;
        let r = aee(&ctx.benign, &f)?.to_f64_lossy();
        Ok(([a, b], f, r))
    };
    let (_, _, initial_render) = sharp(&initial_state)?;
    let (best_images, best_flow, best_render) = sharp(&best_state)?;
    let (final_images, final_flow, final_render) = sharp(&state)?;
    let total = t0.elapsed().as_secs_f64();
    let summary = ReportSummary {
        version: REPORT_VERSION,
        seed,
        weather_config: weather,
        attack_config: acfg.to_kv(),
        parent_particles: state.len(),
        rendered_particles: rendered,
        steps: acfg.steps,
        initial: trace[0].clone(),
        final_: trace.last().unwrap().clone(),
        best: best_rec,
        initial_aee_robustness_render: initial_render,
        final_aee_robustness_render: final_render,
        best_aee_robustness_render: best_render,
        trace,
        warnings: state.warnings.clone(),
        timings: Timings {
            total_seconds: total,
            mean_step_seconds: total / (acfg.steps + 1) as f64,
        },
    };
    Ok(AttackReport {
        summary,
        initial_state,
        final_state: state,
        best_state,
        benign_flow: ctx.benign,
        best_images,
        best_flow,
        final_images,
        final_flow,
    })
}
