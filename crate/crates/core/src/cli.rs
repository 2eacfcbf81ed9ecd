//! Command-line front end.
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on usage errors.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::attack::{run_attack, AttackConfig, VariableMask};
use crate::error::Error;
use crate::flow_field::FlowField;
use crate::gradcheck::{run_all, GradcheckSpec};
use crate::metrics::{aee, flow_to_color, max_magnitude};
use crate::particles::{expand_motion_blur, preset, sample_particles, write_snapshot, WeatherConfig, PRESET_NAMES};
use crate::render::{render, RenderParams};
use crate::scene_io::{load_scene, read_flo, save_scene, synth_scene, write_flo, write_ppm, SynthSpec};
use crate::victim::{estimate_flow, FlowEstimatorConfig};
use crate::{Flow, Scene};

pub const THREADS_ENV: &str = "DOWNPOUR_THREADS";

#[derive(Debug, Parser)]
#[command(name = "downpour", version, about = "Adversarial weather particles against optical flow")]
pub struct Cli {
    /// Print a preset as key=value lines and exit.
    #[arg(long, value_name = "NAME")]
    pub dump_preset: Option<String>,

    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a procedural two-frame scene bundle plus its true flow.
    Synth(SynthArgs),
    /// Render random weather into a scene and measure the flow change.
    Augment(AugmentArgs),
    /// Optimise weather particles against the built-in flow estimator.
    Attack(AttackArgs),
    /// Run the finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
    /// Print AEE between two externally produced flow files.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 128)]
    pub width: usize,
    #[arg(long, default_value_t = 96)]
    pub height: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Camera-2 centre in camera-1 coordinates, `x,y,z` metres.
    #[arg(long, value_parser = parse_vec3)]
    pub translation: Option<[f64; 3]>,
    /// Comma separated plane depths in metres.
    #[arg(long, value_delimiter = ',')]
    pub depths: Option<Vec<f64>>,
}

#[derive(Debug, Args, Clone)]
pub struct WeatherArgs {
    #[arg(long, conflicts_with = "config")]
    pub preset: Option<String>,
    /// key=value weather configuration, applied over the snow preset unless
    /// the file names a `preset`.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AugmentArgs {
    pub scene: PathBuf,
    #[command(flatten)]
    pub weather: WeatherArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AttackArgs {
    pub scene: PathBuf,
    #[command(flatten)]
    pub weather: WeatherArgs,
    /// Optimised blocks: subset of p1,p2,col,transp. Defaults per preset.
    #[arg(long)]
    pub vars: Option<String>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Sets both penalty weights.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// `zero` or a path to a .flo target.
    #[arg(long, default_value = "zero")]
    pub target: String,
    /// key=value attack configuration applied before the flags above.
    #[arg(long)]
    pub attack_config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value = "48x32", value_parser = parse_size)]
    pub size: (usize, usize),
    #[arg(long, default_value_t = 20)]
    pub particles: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, required_unless_present = "dir")]
    pub benign: Option<PathBuf>,
    #[arg(long, required_unless_present = "dir")]
    pub attacked: Option<PathBuf>,
    /// Directory holding benign.flo and attacked.flo.
    #[arg(long, conflicts_with_all = ["benign", "attacked"])]
    pub dir: Option<PathBuf>,
}

fn parse_vec3(s: &str) -> Result<[f64; 3], String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|e| format!("{t}: {e}")))
        .collect::<Result<_, _>>()?;
    v.try_into().map_err(|_| "expected three comma separated numbers".to_string())
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or("expected WxH")?;
    let p = |t: &str| t.trim().parse::<usize>().map_err(|e| format!("{t}: {e}"));
    Ok((p(w)?, p(h)?))
}

/// Failure classes mapped onto exit codes.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime(e) => write!(f, "error: {e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::UnknownPreset { .. } | Error::Config(_) => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Echoed into every output directory as `manifest.json`.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub arguments: Vec<String>,
    pub scene: Option<String>,
    pub weather: Option<String>,
    pub seed: Option<u64>,
    pub output: String,
    pub threads: usize,
    pub seconds: f64,
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::Runtime(Error::io(path, e)))
}

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| CliError::Runtime(Error::io(path, e)))
}

fn resolve_weather(w: &WeatherArgs) -> CliResult<(String, WeatherConfig)> {
    match (&w.preset, &w.config) {
        (Some(name), None) => Ok((name.clone(), preset(name)?)),
        (None, Some(path)) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::Runtime(Error::io(path, e)))?;
            let kv = crate::particles::parse_kv(&text)?;
            let base = match kv.get("preset") {
                Some(name) => preset(name)?,
                None => WeatherConfig::snow(),
            };
            let label = kv.get("preset").cloned().unwrap_or_else(|| path.display().to_string());
            Ok((label, WeatherConfig::from_kv(&text, base)?))
        }
        (None, None) => Err(CliError::Usage(format!(
            "one of --preset or --config is required (presets: {})",
            PRESET_NAMES.join(", ")
        ))),
        (Some(_), Some(_)) => Err(CliError::Usage("--preset and --config are exclusive".into())),
    }
}

fn flow_outputs(dir: &Path, name: &str, flow: &Flow) -> CliResult<()> {
    write_flo(&dir.join(format!("{name}.flo")), flow)?;
    write_ppm(&dir.join(format!("{name}.ppm")), &flow_to_color(flow))?;
    Ok(())
}

fn cmd_synth(a: &SynthArgs) -> CliResult<serde_json::Value> {
    let mut spec = SynthSpec::<f64>::desk_default();
    spec.width = a.width;
    spec.height = a.height;
    if let Some(s) = a.seed {
        spec.texture_seed = s;
    }
    if let Some(t) = a.translation {
        spec.camera_translation = crate::geometry::Vec3(t);
    }
    if let Some(d) = &a.depths {
        spec.plane_depths = d.clone();
    }
    let (scene, gt) = synth_scene(&spec)?;
    create_dir(&a.out)?;
    save_scene(&a.out, &scene)?;
    write_flo(&a.out.join("flow_gt.flo"), &gt)?;
    Ok(serde_json::json!({ "width": a.width, "height": a.height }))
}

#[derive(Serialize)]
struct AugmentMetrics {
    preset: String,
    seed: u64,
    particles: usize,
    rendered_particles: usize,
    blend_mode: String,
    aee_robustness: f64,
    flow_color_normalization: &'static str,
    benign_max_magnitude: f64,
    attacked_max_magnitude: f64,
}

fn cmd_augment(a: &AugmentArgs) -> CliResult<serde_json::Value> {
    let (label, cfg) = resolve_weather(&a.weather)?;
    let scene: Scene = load_scene(&a.scene)?;
    let ps = sample_particles(&scene, &cfg, a.seed)?;
    let rel = scene.relative_pose();
    let expanded = expand_motion_blur(&ps, &rel);
    let out = render(&scene, &expanded, RenderParams::render(cfg.blend_mode))?;
    let flow_cfg = FlowEstimatorConfig::default();
    let benign = estimate_flow(&scene.frame1, &scene.frame2, &flow_cfg)?;
    let attacked = estimate_flow(&out.aug1, &out.aug2, &flow_cfg)?;
    let r = aee(&benign, &attacked)?;
    create_dir(&a.out)?;
    write_ppm(&a.out.join("aug1.ppm"), &out.aug1)?;
    write_ppm(&a.out.join("aug2.ppm"), &out.aug2)?;
    flow_outputs(&a.out, "flow_benign", &benign)?;
    flow_outputs(&a.out, "flow_attacked", &attacked)?;
    write_snapshot(&a.out.join("particles.dpps"), &ps)?;
    let metrics = AugmentMetrics {
        preset: label,
        seed: a.seed,
        particles: ps.len(),
        rendered_particles: expanded.len(),
        blend_mode: cfg.blend_mode.to_string(),
        aee_robustness: r,
        flow_color_normalization: "per-image maximum magnitude",
        benign_max_magnitude: max_magnitude(&benign),
        attacked_max_magnitude: max_magnitude(&attacked),
    };
    write_text(&a.out.join("metrics.json"), &serde_json::to_string_pretty(&metrics).unwrap())?;
    println!("AEE(f, f_attacked) = {r}");
    Ok(serde_json::to_value(&metrics).unwrap())
}

fn cmd_attack(a: &AttackArgs) -> CliResult<serde_json::Value> {
    let (label, cfg) = resolve_weather(&a.weather)?;
    let scene: Scene = load_scene(&a.scene)?;
    let mut acfg = AttackConfig {
        mask: VariableMask::for_preset(&label),
        ..Default::default()
    };
    if let Some(path) = &a.attack_config {
        let text = fs::read_to_string(path).map_err(|e| CliError::Runtime(Error::io(path, e)))?;
        acfg = AttackConfig::from_kv(&text, acfg)?;
    }
    if let Some(v) = &a.vars {
        acfg.mask = v.parse()?;
    }
    if let Some(s) = a.steps {
        acfg.steps = s;
    }
    if let Some(lr) = a.lr {
        acfg.learning_rate = lr;
    }
    if let Some(al) = a.alpha {
        acfg.alpha1 = al;
        acfg.alpha2 = al;
    }
    if a.target != "zero" {
        let t: FlowField<f64> = read_flo(Path::new(&a.target))?;
        acfg.target = Some(t);
    }
    acfg.validate()?;
    let report = run_attack(&scene, &cfg, &acfg, a.seed)?;
    create_dir(&a.out)?;
    write_text(&a.out.join("report.json"), &report.summary.to_json())?;
    write_ppm(&a.out.join("best1.ppm"), &report.best_images[0])?;
    write_ppm(&a.out.join("best2.ppm"), &report.best_images[1])?;
    write_ppm(&a.out.join("final1.ppm"), &report.final_images[0])?;
    write_ppm(&a.out.join("final2.ppm"), &report.final_images[1])?;
    flow_outputs(&a.out, "flow_benign", &report.benign_flow)?;
    flow_outputs(&a.out, "flow_best", &report.best_flow)?;
    flow_outputs(&a.out, "flow_final", &report.final_flow)?;
    let rel = scene.relative_pose();
    write_snapshot(&a.out.join("particles_best.dpps"), &report.best_state.particles(&rel))?;
    let s = &report.summary;
    println!(
        "initial AEE(f, f_attacked) = {:.6}  best = {:.6} (step {})  final = {:.6}",
        s.initial.aee_robustness, s.best.aee_robustness, s.best.step, s.final_.aee_robustness
    );
    println!("loss {:.6} -> {:.6}", s.initial.loss, s.final_.loss);
    for w in &s.warnings {
        eprintln!("warning: {w}");
    }
    Ok(serde_json::json!({ "preset": label, "steps": acfg.steps, "learning_rate": acfg.learning_rate }))
}

fn cmd_gradcheck(a: &GradcheckArgs) -> CliResult<bool> {
    let spec = GradcheckSpec {
        width: a.size.0,
        height: a.size.1,
        particles: a.particles,
        seed: a.seed,
        ..Default::default()
    };
    spec.validate()?;
    let results = run_all(&spec)?;
    let mut ok = true;
    for r in &results {
        let verdict = if r.passed() { "PASS" } else { "FAIL" };
        ok &= r.passed();
        println!(
            "{verdict} {:<28} coords {:>4}  max rel. error {:.3e} (tol {:.0e})",
            r.name, r.checked, r.max_relative_error, r.tolerance
        );
    }
    Ok(ok)
}

fn cmd_eval(a: &EvalArgs) -> CliResult<()> {
    let (f, g): (Flow, Flow) = match &a.dir {
        Some(d) => crate::victim::external_flow_source(d)?,
        None => (
            read_flo(a.benign.as_ref().unwrap())?,
            read_flo(a.attacked.as_ref().unwrap())?,
        ),
    };
    if f.dims() != g.dims() {
        return Err(CliError::Runtime(Error::Contract(format!(
            "flow sizes differ: {:?} vs {:?}",
            f.dims(),
            g.dims()
        ))));
    }
    println!("{}", aee(&f, &g)?);
    Ok(())
}

fn configure_threads() -> CliResult<usize> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => {
            let n: usize = v
                .trim()
                .parse()
                .ok()
                .filter(|n| *n > 0)
                .ok_or_else(|| CliError::Usage(format!("{THREADS_ENV} must be a positive integer, got `{v}`")))?;
            // a pool may already exist when called repeatedly in-process
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            Ok(n)
        }
        Err(_) => Ok(rayon::current_num_threads()),
    }
}

fn write_manifest(out: &Path, m: &RunManifest) -> CliResult<()> {
    write_text(&out.join("manifest.json"), &serde_json::to_string_pretty(m).unwrap())
}

/// Parses `args` and runs the selected command; returns the exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(&cli, &args) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: &Cli, args: &[OsString]) -> CliResult<i32> {
    if let Some(name) = &cli.dump_preset {
        let cfg = preset(name)?;
        let mut out = std::io::stdout();
        let _ = write!(out, "preset={name}\n{}", cfg.to_kv());
        return Ok(0);
    }
    let Some(cmd) = &cli.command else {
        return Err(CliError::Usage("no command given; see --help".into()));
    };
    let threads = configure_threads()?;
    let t0 = Instant::now();
    let arguments: Vec<String> = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let manifest = |command: &str, scene: Option<&Path>, weather: Option<String>, seed: Option<u64>, out: &Path| RunManifest {
        command: command.to_string(),
        arguments: arguments.clone(),
        scene: scene.map(|p| p.display().to_string()),
        weather,
        seed,
        output: out.display().to_string(),
        threads,
        seconds: t0.elapsed().as_secs_f64(),
    };
    let weather_label = |w: &WeatherArgs| {
        w.preset
            .clone()
            .or_else(|| w.config.as_ref().map(|p| p.display().to_string()))
    };
    match cmd {
        Command::Synth(a) => {
            cmd_synth(a)?;
            write_manifest(&a.out, &manifest("synth", None, None, a.seed, &a.out))?;
            Ok(0)
        }
        Command::Augment(a) => {
            cmd_augment(a)?;
            let m = manifest("augment", Some(&a.scene), weather_label(&a.weather), Some(a.seed), &a.out);
            write_manifest(&a.out, &m)?;
            Ok(0)
        }
        Command::Attack(a) => {
            cmd_attack(a)?;
            let m = manifest("attack", Some(&a.scene), weather_label(&a.weather), Some(a.seed), &a.out);
            write_manifest(&a.out, &m)?;
            Ok(0)
        }
        Command::Gradcheck(a) => Ok(if cmd_gradcheck(a)? { 0 } else { 1 }),
        Command::Eval(a) => {
            cmd_eval(a)?;
            Ok(0)
        }
    }
}
