//! `posematch`: synthetic scenes, single-pair runs, benchmark sweeps and
//! weight files. Exit codes: 0 success, 1 usage or input error, 2 the run
//! completed without a result (no pose).

mod keypoints;

use std::fs;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use posematch_core::attention::{random_weights, KeypointSet, Model};
use posematch_core::driver::{run_pair, IterationTrace, PipelineConfig, PoolingMode};
use posematch_core::epipolar::{pose_error_parts, CameraIntrinsics, ImagePoint, ScoredMatch};
use posematch_core::numerics::{load_weights, save_weights, ArchMeta, DenseMatrix, WeightStore};
use posematch_core::synthbench::{
    assemble_report, evaluate_scene, generate_scene, map_scenes, match_metrics, scene_seed, standard_configs, BenchConfig,
    EvalReport, SceneKeypoint, SceneOutcome, SceneParams, SyntheticScene, Tier,
};

#[derive(Parser, Debug)]
#[command(name = "posematch", version, about = "Iterative matching and relative pose with adaptive keypoint pooling")]
struct Cli {
    /// Base seed for generation and RANSAC.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Pipeline config (JSON); flags take precedence over it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for `eval`.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Output file (`match`) or directory (`synth`, `eval`).
    #[arg(long, short, global = true)]
    output: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic scenes and a manifest.
    Synth(SynthArgs),
    /// Run the pipeline on one pair and print its trace.
    Match(MatchArgs),
    /// Benchmark configs over a directory of scenes.
    Eval(EvalArgs),
    /// Inspect or create weight files.
    #[command(subcommand)]
    Weights(WeightsCommand),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value = "medium")]
    tier: Tier,
    #[arg(long, default_value_t = 10)]
    count: usize,
    #[arg(long)]
    keypoints: Option<usize>,
    /// Repeated-texture distractors per scene.
    #[arg(long, default_value_t = 0)]
    twins: usize,
    /// Omit intrinsics from the generated keypoint sets.
    #[arg(long)]
    uncalibrated: bool,
    /// Also write each image's keypoints as `csv` or `impk` files.
    #[arg(long, value_parser = ["csv", "impk"])]
    export: Option<String>,
}

#[derive(Args, Debug, Clone)]
struct PipelineFlags {
    #[arg(long)]
    pooling: Option<PoolingMode>,
    #[arg(long)]
    t_max: Option<usize>,
    #[arg(long)]
    theta_m: Option<f64>,
    /// Disable the convergence stop.
    #[arg(long)]
    no_stop: bool,
    /// Disable pose-guided rescue.
    #[arg(long)]
    no_rescue: bool,
    /// Trained (or init-random) weights; untrained mode without.
    #[arg(long)]
    weights: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct MatchArgs {
    /// Scene file from `synth` (carries ground truth).
    #[arg(long, conflicts_with_all = ["x", "y"])]
    scene: Option<PathBuf>,
    /// Keypoints of the first image (CSV or IMPK).
    #[arg(long, requires = "y")]
    x: Option<PathBuf>,
    #[arg(long, requires = "x")]
    y: Option<PathBuf>,
    /// Image size `WxH` for keypoint files.
    #[arg(long, default_value = "640x480")]
    image_size: String,
    /// `fx,fy,cx,cy` of the first image.
    #[arg(long)]
    intrinsics_x: Option<String>,
    #[arg(long)]
    intrinsics_y: Option<String>,
    /// Zero the per-iteration timings (byte-stable output).
    #[arg(long)]
    no_timing: bool,
    #[command(flatten)]
    pipeline: PipelineFlags,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Directory written by `synth`.
    dataset: PathBuf,
    /// Comma-separated subset of imp, eimp, r50, imp-nostop, eimp-nostop, r50-nostop.
    #[arg(long, default_value = "imp,eimp,r50,imp-nostop")]
    configs: String,
    /// Reuse per-scene results cached by an earlier run.
    #[arg(long)]
    resume: bool,
    #[command(flatten)]
    pipeline: PipelineFlags,
}

#[derive(Subcommand, Debug)]
enum WeightsCommand {
    /// Print tensor names, shapes and checksums.
    Inspect { path: PathBuf },
    /// Write a seeded, architecture-complete, untrained weight file.
    InitRandom {
        path: PathBuf,
        #[arg(long, default_value_t = 32)]
        dim: usize,
        #[arg(long, default_value_t = 4)]
        heads: usize,
        #[arg(long, default_value_t = 9)]
        blocks: usize,
        #[arg(long, default_value_t = -6.0, allow_hyphen_values = true)]
        alpha: f64,
    },
}

enum Outcome {
    Success,
    NoResult,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(Outcome::Success) => ExitCode::SUCCESS,
        Ok(Outcome::NoResult) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<Outcome> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(&cli, a),
        Command::Match(a) => cmd_match(&cli, a),
        Command::Eval(a) => cmd_eval(&cli, a),
        Command::Weights(w) => cmd_weights(&cli, w),
    }
}

/// Defaults, then the config file, then flags.
fn pipeline_config(cli: &Cli, flags: &PipelineFlags) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?
        }
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(p) = flags.pooling {
        cfg.pooling = p;
    }
    if let Some(t) = flags.t_max {
        cfg.t_max = t;
    }
    if let Some(t) = flags.theta_m {
        cfg.theta_m = t;
    }
    if flags.no_stop {
        cfg.early_stop = false;
    }
    if flags.no_rescue {
        cfg.rescue = false;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_model(flags: &PipelineFlags) -> Result<Option<Model>> {
    let Some(path) = &flags.weights else { return Ok(None) };
    let store = load_weights(path).with_context(|| format!("loading weights {}", path.display()))?;
    Ok(Model::from_store(&store)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    file: String,
    seed: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    tier: Tier,
    count: usize,
    seed: u64,
    params: SceneParams,
    scenes: Vec<ManifestEntry>,
}

fn cmd_synth(cli: &Cli, a: &SynthArgs) -> Result<Outcome> {
    let dir = cli.output.clone().unwrap_or_else(|| PathBuf::from("scenes"));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let seed = cli.seed.unwrap_or(0);
    let mut params = a.tier.params();
    if let Some(n) = a.keypoints {
        params.n_keypoints = n;
    }
    params.twins = a.twins;
    params.calibrated = !a.uncalibrated;
    let mut entries = Vec::with_capacity(a.count);
    for i in 0..a.count {
        let s = scene_seed(seed, a.tier, i);
        let scene = generate_scene(&params, s)?;
        let file = format!("scene-{}-{i:04}.json", a.tier);
        write_json(&dir.join(&file), &scene)?;
        if let Some(fmt) = &a.export {
            for (tag, kps) in [("x", &scene.keypoints_x), ("y", &scene.keypoints_y)] {
                let raw = raw_keypoints(kps)?;
                let bytes = if fmt == "csv" { keypoints::write_csv(&raw)? } else { keypoints::write_impk(&raw) };
                let path = dir.join(format!("keypoints-{}-{i:04}-{tag}.{fmt}", a.tier));
                fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
            }
        }
        entries.push(ManifestEntry { file, seed: s });
    }
    let manifest = Manifest { tier: a.tier, count: a.count, seed, params, scenes: entries };
    write_json(&dir.join(format!("manifest-{}.json", a.tier)), &manifest)?;
    println!("wrote {} scene(s) to {}", a.count, dir.display());
    Ok(Outcome::Success)
}

fn raw_keypoints(kps: &[SceneKeypoint]) -> Result<keypoints::RawKeypoints> {
    let rows: Vec<&[f64]> = kps.iter().map(|k| k.descriptor.as_slice()).collect();
    Ok(keypoints::RawKeypoints {
        coords: kps.iter().map(|k| ImagePoint::new(k.u, k.v)).collect(),
        confidences: kps.iter().map(|k| k.c).collect(),
        descriptors: DenseMatrix::from_rows(&rows)?,
    })
}

fn parse_intrinsics(s: &str) -> Result<CameraIntrinsics> {
    let v: Vec<f64> = s.split(',').map(|t| t.trim().parse::<f64>()).collect::<Result<_, _>>().context("intrinsics must be fx,fy,cx,cy")?;
    match v[..] {
        [fx, fy, cx, cy] => CameraIntrinsics::new(fx, fy, cx, cy).ok_or_else(|| anyhow!("focal lengths must be positive")),
        _ => bail!("intrinsics must be fx,fy,cx,cy"),
    }
}

fn parse_size(s: &str) -> Result<(f64, f64)> {
    let (w, h) = s.split_once('x').ok_or_else(|| anyhow!("image size must be WxH"))?;
    Ok((w.parse().context("image width")?, h.parse().context("image height")?))
}

#[derive(Serialize)]
struct GtReport {
    rot_err: Option<f64>,
    trans_err: Option<f64>,
    precision: f64,
    matching_score: f64,
    correct: usize,
}

#[derive(Serialize)]
struct MatchOutput<'a> {
    #[serde(flatten)]
    trace: IterationTrace,
    matches: &'a [ScoredMatch],
    #[serde(skip_serializing_if = "Option::is_none")]
    gt: Option<GtReport>,
    config: PipelineConfig,
}

fn cmd_match(cli: &Cli, a: &MatchArgs) -> Result<Outcome> {
    let cfg = pipeline_config(cli, &a.pipeline)?;
    let model = load_model(&a.pipeline)?;
    let (x, y, scene) = match (&a.scene, &a.x, &a.y) {
        (Some(p), _, _) => {
            let scene: SyntheticScene = read_json(p)?;
            let (x, y) = scene.keypoint_sets()?;
            (x, y, Some(scene))
        }
        (None, Some(px), Some(py)) => {
            let size = parse_size(&a.image_size)?;
            let load = |p: &Path, k: &Option<String>| -> Result<KeypointSet> {
                let raw = keypoints::read_keypoints(p)?;
                let k = k.as_deref().map(parse_intrinsics).transpose()?;
                Ok(KeypointSet::new(raw.coords, raw.confidences, raw.descriptors, k, size)?)
            };
            (load(px, &a.intrinsics_x)?, load(py, &a.intrinsics_y)?, None)
        }
        _ => bail!("give either --scene or both --x and --y"),
    };
    let result = run_pair(&x, &y, model.as_ref(), &cfg)?;
    let gt = scene.as_ref().map(|s| {
        let pairs: Vec<(usize, usize)> = result.matches.iter().map(|m| (m.i, m.j)).collect();
        let mm = match_metrics(&pairs, &s.gt_pairs, x.len(), y.len());
        let errs = result.relative_pose.as_ref().map(|p| pose_error_parts(p, &s.pose));
        GtReport {
            rot_err: errs.map(|e| e.0),
            trans_err: errs.map(|e| e.1),
            precision: mm.precision,
            matching_score: mm.matching_score,
            correct: mm.correct,
        }
    });
    let trace = if a.no_timing { result.trace.clone().without_timing() } else { result.trace.clone() };
    let out = MatchOutput { trace, matches: &result.matches, gt, config: cfg };
    let mut text = serde_json::to_string_pretty(&out)?;
    text.push('\n');
    match &cli.output {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => emit(&text)?,
    }
    Ok(if result.pose.is_some() { Outcome::Success } else { Outcome::NoResult })
}

fn named_configs(names: &str, base: &PipelineConfig) -> Result<Vec<BenchConfig>> {
    let mut all = standard_configs(base);
    all.push(BenchConfig::new("eimp-nostop", PipelineConfig { pooling: PoolingMode::Adaptive, early_stop: false, ..*base }));
    all.push(BenchConfig::new("r50-nostop", PipelineConfig { pooling: PoolingMode::R50, early_stop: false, ..*base }));
    names
        .split(',')
        .map(str::trim)
        .filter(|n| !n.is_empty())
        .map(|n| all.iter().find(|c| c.name == n).cloned().ok_or_else(|| anyhow!("unknown config `{n}`")))
        .collect()
}

fn scene_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading dataset {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("scene-") && n.ends_with(".json")))
        .collect();
    files.sort();
    Ok(files)
}

/// Cache entries are keyed by scene content and the full config list.
fn cache_key(scene_text: &str, configs: &[BenchConfig], weights: Option<&Path>) -> Result<String> {
    let mut h = Sha256::new();
    h.update(scene_text.as_bytes());
    h.update(serde_json::to_vec(configs)?);
    if let Some(w) = weights {
        h.update(fs::read(w)?);
    }
    Ok(hex(&h.finalize()))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn cmd_eval(cli: &Cli, a: &EvalArgs) -> Result<Outcome> {
    let base = pipeline_config(cli, &a.pipeline)?;
    let configs = named_configs(&a.configs, &base)?;
    if configs.is_empty() {
        bail!("no configs selected");
    }
    let model = load_model(&a.pipeline)?;
    let out_dir = cli.output.clone().unwrap_or_else(|| PathBuf::from("eval-out"));
    let cache_dir = out_dir.join("cache");
    fs::create_dir_all(&cache_dir).with_context(|| format!("creating {}", cache_dir.display()))?;

    let files = scene_files(&a.dataset)?;
    let mut texts = Vec::with_capacity(files.len());
    let mut scenes = Vec::with_capacity(files.len());
    for f in &files {
        let text = fs::read_to_string(f).with_context(|| format!("reading {}", f.display()))?;
        scenes.push(serde_json::from_str::<SyntheticScene>(&text).with_context(|| format!("parsing {}", f.display()))?);
        texts.push(text);
    }
    let keys: Vec<String> = texts.iter().map(|t| cache_key(t, &configs, a.pipeline.weights.as_deref())).collect::<Result<_>>()?;
    let outcomes: Vec<Result<SceneOutcome>> = map_scenes(&scenes, cli.jobs.max(1), |scene| {
        let idx = scenes.iter().position(|s| std::ptr::eq(s, scene)).expect("own slice");
        let path = cache_dir.join(format!("{}.json", keys[idx]));
        if a.resume {
            if let Ok(cached) = read_json::<SceneOutcome>(&path) {
                return Ok(cached);
            }
        }
        let outcome = evaluate_scene(scene, &configs, model.as_ref());
        write_json(&path, &outcome)?;
        Ok(outcome)
    });
    let outcomes: Vec<SceneOutcome> = outcomes.into_iter().collect::<Result<_>>()?;
    let report = assemble_report(&outcomes, &configs);
    write_json(&out_dir.join("report.json"), &report)?;
    write_csv(&out_dir.join("report.csv"), &report)?;
    print_summary(&report)?;
    let failed = report.pairs.iter().filter(|p| p.error.is_some()).count();
    if failed > 0 {
        eprintln!("warning: {failed} pair run(s) failed; see the `error` column");
    }
    Ok(Outcome::Success)
}

fn write_csv(path: &Path, report: &EvalReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    for p in &report.pairs {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

fn print_summary(report: &EvalReport) -> Result<()> {
    let mut out = format!(
        "{:<12} {:<7} {:>5} {:>7} {:>7} {:>7} {:>7} {:>7} {:>6}",
        "config", "tier", "pairs", "AUC@5", "AUC@10", "AUC@20", "M.S.", "Prec.", "iters"
    );
    out.push('\n');
    for s in &report.summaries {
        writeln!(
            out,
            "{:<12} {:<7} {:>5} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>6.2}",
            s.config, s.tier, s.pairs, s.auc5, s.auc10, s.auc20, s.mean_matching_score, s.mean_precision, s.mean_iters
        )?;
    }
    emit(&out)
}

/// Writes to stdout; a closed pipe (`| head`) is not an error.
fn emit(text: &str) -> Result<()> {
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

fn cmd_weights(cli: &Cli, w: &WeightsCommand) -> Result<Outcome> {
    match w {
        WeightsCommand::Inspect { path } => {
            let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
            let store = WeightStore::from_bytes(&bytes).with_context(|| format!("{}: bad weight file", path.display()))?;
            let meta = store.validate().with_context(|| format!("{}: bad weight file", path.display()))?;
            let mut out = format!("file sha256 {}\n", hex(&Sha256::digest(&bytes)));
            match meta {
                Some(m) => writeln!(out, "architecture d={} h={} T={}{}", m.d, m.h, m.t, if store.is_trained() { "" } else { " (random init, not trained)" }),
                None => writeln!(out, "architecture none (untrained: raw descriptors)"),
            }?;
            for (name, t) in store.iter() {
                let data: Vec<u8> = t.data.iter().flat_map(|v| v.to_le_bytes()).collect();
                writeln!(out, "{name:<32} {:<14} {}", format!("{:?}", t.dims), hex(&Sha256::digest(&data)))?;
            }
            emit(&out)?;
            Ok(Outcome::Success)
        }
        WeightsCommand::InitRandom { path, dim, heads, blocks, alpha } => {
            let meta = ArchMeta { d: *dim, h: *heads, t: *blocks };
            if meta.d == 0 || meta.h == 0 || meta.t == 0 || !meta.d.is_multiple_of(meta.h) {
                bail!("dim must be a positive multiple of heads, and blocks positive");
            }
            let store = random_weights(meta, *alpha, cli.seed.unwrap_or(0));
            save_weights(&store, path).with_context(|| format!("writing {}", path.display()))?;
            println!("wrote {} tensors to {}", store.len(), path.display());
            Ok(Outcome::Success)
        }
    }
}
