//! `veye` command-line harness.
//!
//! Exit codes: 0 success, 2 usage error (bad arguments, config or paths),
//! 3 gradient-check failure, 4 external-service failure (chat endpoint
//! unreachable, bad responses, or view selection exhausted its retries).
//! Anything else unexpected exits with 1.

mod config;
mod plot;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use log::{info, warn};

use config::RunConfig;
use veye_core::c2f::{C2fError, RefinePolicy};
use veye_core::codec::ActionCodec;
use veye_core::dataset::{read_dataset, DatasetWriter};
use veye_core::eval::{evaluate_with, EvalSettings, FixedView, RequeryingView, ViewSource};
use veye_core::geometry::{CameraModel, CameraRig};
use veye_core::policy::gradcheck::{gradcheck, suite_configs};
use veye_core::policy::train::{load_checkpoint, save_checkpoint, train, write_metrics_csv, TrainConfig};
use veye_core::policy::Params;
use veye_core::render::{render, VirtualCameraSpec};
use veye_core::samples::{build_samples, coarse_set, fine_set, observation_cloud, SampleSettings};
use veye_core::seed::derive_seed;
use veye_core::viewpoint::client::client_for_endpoint;
use veye_core::viewpoint::{select_view, ViewSettings, ViewpointError};
use veye_core::world::{default_keyframes, make_demo, workspace_bounds, Demonstration, Task};

#[derive(Parser)]
#[command(name = "veye", version, about = "Virtual-view keyframe manipulation pipeline")]
struct Cli {
    /// Flat key = value config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Config override, `key=value`; may be repeated.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate scripted demonstrations and write a dataset file.
    MakeDataset {
        #[arg(long)]
        task: String,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Query the chat endpoint for a viewpoint on one demo's first observation.
    SelectView {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 0)]
        demo: usize,
        /// Rig JSON for the environment image; defaults to the dataset's cameras.
        #[arg(long)]
        rig: Option<PathBuf>,
        /// Instruction text; defaults to the demo's instruction.
        #[arg(long)]
        task: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        transcript: PathBuf,
    },
    /// Render the virtual view of every keyframe observation.
    Render {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train the coarse and fine networks.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate trained checkpoints and write a JSON report.
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        checkpoints: PathBuf,
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// JSON-lines file receiving one inference trace per keyframe.
        #[arg(long)]
        traces: Option<PathBuf>,
        /// Re-select the view every K keyframes of each demo (0 disables).
        #[arg(long)]
        requery_every_k_keyframes: Option<usize>,
    },
    /// Finite-difference gradient check on the three small configurations.
    Gradcheck {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Plot a metrics CSV (loss curves) or an eval report (error histogram).
    Plot {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Check(String),
    External(String),
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Check(m) | Failure::External(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for Failure {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Failure::Usage(msg.into()).into()
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Failure>() {
        Some(Failure::Usage(_)) => 2,
        Some(Failure::Check(_)) => 3,
        Some(Failure::External(_)) => 4,
        None => 1,
    }
}

fn from_view_error(e: ViewpointError) -> anyhow::Error {
    match e {
        ViewpointError::Usage(m) => usage(m),
        e @ (ViewpointError::Client { .. } | ViewpointError::SelectionFailed { .. } | ViewpointError::Parse { .. }) => {
            Failure::External(e.to_string()).into()
        }
        e => anyhow::Error::new(e),
    }
}

fn from_c2f_error(e: C2fError) -> anyhow::Error {
    match e {
        C2fError::View(v) => from_view_error(v),
        e => anyhow::Error::new(e),
    }
}

fn require_file(path: &Path, what: &str) -> anyhow::Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(format!("{what} {} does not exist or is not a file", path.display())))
    }
}

fn load_demos(path: &Path) -> anyhow::Result<Vec<Demonstration>> {
    require_file(path, "dataset")?;
    let demos = read_dataset(path).map_err(|e| usage(format!("dataset {}: {e}", path.display())))?;
    if demos.is_empty() {
        return Err(usage(format!("dataset {} holds no demonstrations", path.display())));
    }
    Ok(demos)
}

fn view_settings(cfg: &RunConfig) -> ViewSettings {
    let b = workspace_bounds();
    ViewSettings {
        distance: cfg.view_distance_factor * b.diagonal(),
        half_extent: cfg.view_half_extent,
        resolution: cfg.view_resolution,
        max_retries: cfg.llm_max_retries,
        look_at: b.center().into(),
    }
}

/// The spec from `path` if given, otherwise the configured `view.elev` and
/// `view.azim`.
fn load_spec(path: Option<&Path>, cfg: &RunConfig) -> anyhow::Result<VirtualCameraSpec> {
    match path {
        Some(p) => {
            require_file(p, "spec")?;
            let spec: VirtualCameraSpec = serde_json::from_str(&fs::read_to_string(p)?).map_err(|e| usage(format!("spec {}: {e}", p.display())))?;
            spec.validate().map_err(|e| usage(format!("spec {}: {e}", p.display())))?;
            Ok(spec)
        }
        None => view_settings(cfg).spec(cfg.view_elev, cfg.view_azim).map_err(|e| usage(e.to_string())),
    }
}

fn codec_for(spec: &VirtualCameraSpec, cfg: &RunConfig) -> anyhow::Result<ActionCodec> {
    ActionCodec::new(cfg.codec_sigma_px, workspace_bounds().diagonal(), spec.half_extent).map_err(|e| usage(e.to_string()))
}

fn make_dir(path: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(path).map_err(|e| usage(format!("cannot create {}: {e}", path.display())))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> anyhow::Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn rig_from_frames(demo: &Demonstration) -> CameraRig {
    CameraRig {
        cameras: demo.trajectory.steps[0]
            .frames
            .iter()
            .map(|f| CameraModel { name: f.name.clone(), intrinsics: f.intrinsics, extrinsics: f.extrinsics })
            .collect(),
        workspace_bounds: workspace_bounds(),
    }
}

fn cmd_make_dataset(cfg: &RunConfig, task: &str, n: usize, out: &Path) -> anyhow::Result<()> {
    let task: Task = task.parse().map_err(|e| usage(format!("{e}")))?;
    if n == 0 {
        return Err(usage("--n must be positive"));
    }
    let mut writer = DatasetWriter::create(out, n as u32).map_err(|e| usage(format!("{}: {e}", out.display())))?;
    let mut histogram: BTreeMap<usize, usize> = BTreeMap::new();
    let (mut made, mut attempt) = (0usize, 0u64);
    while made < n {
        if attempt > 10 * n as u64 + 100 {
            anyhow::bail!("could not generate {n} valid {task} demos");
        }
        let seed = derive_seed(cfg.seed, &format!("dataset/{task}/{attempt}"));
        attempt += 1;
        let demo = match make_demo(task, seed) {
            Ok(d) => d,
            Err(e) => {
                warn!("seed {seed}: {e}");
                continue;
            }
        };
        *histogram.entry(default_keyframes(&demo).len()).or_default() += 1;
        writer.append(&demo)?;
        made += 1;
    }
    writer.finish()?;
    println!("wrote {n} {task} demos to {}", out.display());
    println!("keypoints  demos");
    for (k, count) in histogram {
        println!("{k:>9}  {count:>5} {}", "#".repeat(count.min(60)));
    }
    Ok(())
}

fn cmd_select_view(
    cfg: &RunConfig,
    dataset: &Path,
    demo: usize,
    rig: Option<&Path>,
    task: Option<&str>,
    out: &Path,
    transcript_path: &Path,
) -> anyhow::Result<()> {
    if cfg.llm_endpoint.is_empty() {
        return Err(usage("llm.endpoint is not set (use a URL or mock:<responses.json>)"));
    }
    let demos = load_demos(dataset)?;
    let d = demos.get(demo).ok_or_else(|| usage(format!("demo {demo} out of range (dataset has {})", demos.len())))?;
    let rig = match rig {
        Some(p) => {
            require_file(p, "rig")?;
            CameraRig::load(p).map_err(|e| usage(format!("rig {}: {e}", p.display())))?
        }
        None => rig_from_frames(d),
    };
    let task = task.unwrap_or(&d.trajectory.instruction);
    let mut client = client_for_endpoint(&cfg.llm_endpoint, &cfg.llm_model, &cfg.llm_api_key_env).map_err(|e| Failure::External(e.to_string()))?;
    let result = select_view(client.as_mut(), task, &rig, &d.trajectory.steps[0].frames, &view_settings(cfg));
    let transcript = match &result {
        Ok((_, t)) => Some(t.clone()),
        Err(ViewpointError::SelectionFailed { transcript }) | Err(ViewpointError::Client { transcript, .. }) => Some((**transcript).clone()),
        Err(_) => None,
    };
    if let Some(t) = &transcript {
        write_json(transcript_path, t)?;
    }
    let (spec, t) = result.map_err(from_view_error)?;
    write_json(out, &spec)?;
    println!("selected elev {} azim {} after {} attempt(s); spec written to {}", spec.elev, spec.azim, t.attempts.len(), out.display());
    Ok(())
}

fn cmd_render(cfg: &RunConfig, dataset: &Path, spec: Option<&Path>, out_dir: &Path) -> anyhow::Result<()> {
    let demos = load_demos(dataset)?;
    let spec = load_spec(spec, cfg)?;
    make_dir(out_dir)?;
    let mut n = 0;
    for (d, demo) in demos.iter().enumerate() {
        for (obs, _) in demo.keyframe_pairs(cfg.keypoint_vel_eps, cfg.keypoint_min_gap) {
            let img = render(&observation_cloud(demo, obs), &spec);
            img.save(out_dir, &format!("demo{d:03}_step{obs:03}"))?;
            n += 1;
        }
    }
    println!("rendered {n} views to {}", out_dir.display());
    Ok(())
}

fn sample_settings(cfg: &RunConfig) -> SampleSettings {
    SampleSettings { vel_eps: cfg.keypoint_vel_eps, min_gap: cfg.keypoint_min_gap, zoom_factor: cfg.c2f_zoom_factor, with_fine: cfg.train_fine }
}

fn train_one(name: &str, set: &[veye_core::policy::train::TrainSample], cfg: &RunConfig, seed_label: &str, out: &Path) -> anyhow::Result<Params> {
    let params = Params::init(&cfg.model, derive_seed(cfg.seed, seed_label)).map_err(|e| usage(e.to_string()))?;
    let tc = TrainConfig { seed: derive_seed(cfg.seed, &format!("{seed_label}/batches")), ..cfg.train };
    let every = (tc.steps / 20).max(1);
    let (params, log) = train(set, params, tc, |m, _| {
        if m.step % every == 0 {
            info!("{name} step {} loss {:.4}", m.step, m.loss.total());
        }
        true
    })?;
    write_metrics_csv(&out.join(format!("metrics_{name}.csv")), &log)?;
    save_checkpoint(&params, &out.join(format!("{name}.bin")))?;
    if let Some(last) = log.last() {
        println!("{name}: {} samples, {} steps, final loss {:.4}", set.len(), log.len(), last.loss.total());
    }
    Ok(params)
}

fn cmd_train(cfg: &RunConfig, dataset: &Path, spec: Option<&Path>, out: &Path) -> anyhow::Result<()> {
    let demos = load_demos(dataset)?;
    let spec = load_spec(spec, cfg)?;
    if spec.resolution as usize != cfg.model.image_size {
        return Err(usage(format!("view resolution {} does not match the model input size {}", spec.resolution, cfg.model.image_size)));
    }
    let codec = codec_for(&spec, cfg)?;
    make_dir(out)?;
    let samples = build_samples(&demos, &spec, &codec, &cfg.model, &sample_settings(cfg))?;
    if samples.is_empty() {
        return Err(usage("no keyframe of the dataset is visible in the view"));
    }
    let positives = samples.iter().filter(|s| s.refine).count();
    println!("{} keyframe samples, {positives} labelled for refinement", samples.len());
    train_one("coarse", &coarse_set(&samples), cfg, "train/coarse", out)?;
    if cfg.train_fine {
        train_one("fine", &fine_set(&samples), cfg, "train/fine", out)?;
    }
    write_json(&out.join("spec.json"), &spec)?;
    fs::write(out.join("config.txt"), cfg.to_text())?;
    Ok(())
}

fn load_params(path: &Path) -> anyhow::Result<Params> {
    require_file(path, "checkpoint")?;
    load_checkpoint(path).map_err(|e| usage(e.to_string()))
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    cfg: &RunConfig,
    dataset: &Path,
    checkpoints: &Path,
    spec: Option<&Path>,
    out: &Path,
    traces: Option<&Path>,
    requery: Option<usize>,
) -> anyhow::Result<()> {
    let demos = load_demos(dataset)?;
    let spec = match spec {
        Some(p) => load_spec(Some(p), cfg)?,
        None if checkpoints.join("spec.json").is_file() => load_spec(Some(&checkpoints.join("spec.json")), cfg)?,
        None => load_spec(None, cfg)?,
    };
    let coarse = load_params(&checkpoints.join("coarse.bin"))?;
    let fine_path = checkpoints.join("fine.bin");
    let mut settings = EvalSettings {
        vel_eps: cfg.keypoint_vel_eps,
        min_gap: cfg.keypoint_min_gap,
        zoom_factor: cfg.c2f_zoom_factor,
        refine_policy: cfg.c2f_refine_policy,
    };
    let fine = if fine_path.is_file() {
        load_params(&fine_path)?
    } else {
        warn!("no fine checkpoint in {}; evaluating the coarse stage only", checkpoints.display());
        settings.refine_policy = RefinePolicy::ForceOff;
        coarse.clone()
    };
    let codec = codec_for(&spec, cfg)?;
    let k = requery.unwrap_or(cfg.llm_requery_every_k_keyframes);
    let mut client;
    let mut fixed = FixedView(spec);
    let mut requerying;
    let views: &mut dyn ViewSource = if k > 0 {
        if cfg.llm_endpoint.is_empty() {
            return Err(usage("re-querying needs llm.endpoint"));
        }
        client = client_for_endpoint(&cfg.llm_endpoint, &cfg.llm_model, &cfg.llm_api_key_env).map_err(|e| Failure::External(e.to_string()))?;
        let vs = ViewSettings { resolution: spec.resolution, half_extent: spec.half_extent, ..view_settings(cfg) };
        requerying = RequeryingView::new(client.as_mut(), vs, k);
        &mut requerying
    } else {
        &mut fixed
    };
    let report = evaluate_with(&coarse, &fine, &demos, views, &spec, &codec, &settings).map_err(from_c2f_error)?;
    write_json(out, &report)?;
    if let Some(path) = traces {
        let mut f = std::io::BufWriter::new(fs::File::create(path).with_context(|| format!("creating {}", path.display()))?);
        for r in &report.per_keyframe {
            writeln!(f, "{}", serde_json::to_string(&r.trace)?)?;
        }
        f.flush()?;
    }
    println!(
        "{} keyframes: position error mean {:.4} m (bound {:.4} m), keyframe success {:.2}, task success {}/{}, refined {}",
        report.keyframes,
        report.position_error_m.mean,
        report.quantization_bound_m,
        report.keyframe_success,
        report.task_success.successes,
        report.task_success.episodes,
        report.refine.fired
    );
    Ok(())
}

fn cmd_gradcheck(cfg: &RunConfig, out: Option<&Path>) -> anyhow::Result<()> {
    let mut reports = Vec::new();
    for (i, mc) in suite_configs().iter().enumerate() {
        let r =
            gradcheck(mc, derive_seed(cfg.seed, &format!("gradcheck/{i}")), cfg.gradcheck_per_tensor, cfg.gradcheck_step, cfg.gradcheck_tolerance)?;
        println!(
            "config {i} (embed {}, heads {}, hidden {}): max relative error {:.3e} over {} tensors: {}",
            mc.embed_dim,
            mc.heads,
            mc.hidden_dim,
            r.max_rel_error,
            r.tensors.len(),
            if r.passed { "pass" } else { "FAIL" }
        );
        reports.push(r);
    }
    if let Some(p) = out {
        write_json(p, &reports)?;
    }
    if reports.iter().all(|r| r.passed) {
        Ok(())
    } else {
        Err(Failure::Check(format!("gradient check exceeded tolerance {:e}", cfg.gradcheck_tolerance)).into())
    }
}

fn cmd_plot(input: &Path, out: &Path) -> anyhow::Result<()> {
    require_file(input, "input")?;
    let text = fs::read_to_string(input)?;
    let png = match input.extension().and_then(|e| e.to_str()) {
        Some("csv") => plot::loss_curves(&text).map_err(usage)?,
        Some("json") => plot::error_histogram(&text).map_err(usage)?,
        _ => return Err(usage("plot input must be a metrics .csv or an eval report .json")),
    };
    fs::write(out, png).with_context(|| format!("writing {}", out.display()))?;
    println!("wrote {}", out.display());
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.set).map_err(|e| usage(e.to_string()))?;
    match &cli.command {
        Command::MakeDataset { task, n, out } => cmd_make_dataset(&cfg, task, *n, out),
        Command::SelectView { dataset, demo, rig, task, out, transcript } => {
            cmd_select_view(&cfg, dataset, *demo, rig.as_deref(), task.as_deref(), out, transcript)
        }
        Command::Render { dataset, spec, out_dir } => cmd_render(&cfg, dataset, spec.as_deref(), out_dir),
        Command::Train { dataset, spec, out } => cmd_train(&cfg, dataset, spec.as_deref(), out),
        Command::Eval { dataset, checkpoints, spec, out, traces, requery_every_k_keyframes } => {
            cmd_eval(&cfg, dataset, checkpoints, spec.as_deref(), out, traces.as_deref(), *requery_every_k_keyframes)
        }
        Command::Gradcheck { out } => cmd_gradcheck(&cfg, out.as_deref()),
        Command::Plot { input, out } => cmd_plot(input, out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
