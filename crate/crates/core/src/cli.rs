//! The `mfreloc` command line.
//!
//! Exit codes: 0 on success, 1 on usage or validation failures, 2 on I/O
//! errors. `RELOC_SEED`, when set, overrides `--seed`.

use std::collections::HashMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::attention::mask::MaskStrategy;
use crate::error::{Error, Result};
use crate::metrics::{Aggregator, MetricsReport};
use crate::pipeline::{
    assemble, build_samples, median_pose_errors, recover_absolute, retrieve_topk, train_toy, Model, ModelConfig,
    Placement, SequenceInput, TokenMode, TrainConfig,
};
use crate::pose::{rotation_angle_between, Pose};
use crate::sim::bench::{bench_attention, write_bench_csv, BenchConfig};
use crate::sim::checkpoint::{load_checkpoint, save_checkpoint};
use crate::sim::manifest::{write_frames, write_scene, Manifest, Role, MANIFEST_FILE};
use crate::sim::scene::{generate_scene, FrameId, Scene, SceneSpec};

pub const SEED_ENV: &str = "RELOC_SEED";
pub const ORACLE_TOLERANCE: f64 = 1e-9;

const SCENE_SPEC_FILE: &str = "scene_spec.json";
const TOY_CONFIG_FILE: &str = "config.json";
const CHECKPOINT_FILE: &str = "checkpoint.bin";

#[derive(Debug, Parser)]
#[command(name = "mfreloc", version, about = "Multi-frame relocalization toolkit")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
struct GlobalArgs {
    /// JSON configuration for the subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// global | causal | sparse | dilated
    #[arg(long, global = true)]
    mask: Option<MaskStrategy>,
    /// anchor | last
    #[arg(long, global = true)]
    placement: Option<Placement>,
    /// Number of retrieved database frames.
    #[arg(long, global = true)]
    k: Option<usize>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a scene: pose files, manifest and scene spec.
    Simulate,
    /// Two-stage training on synthetic scenes; writes checkpoint, config and loss curve.
    TrainToy,
    /// Relocalize every query of a scene with a trained model.
    Relocalize {
        /// Directory written by train-toy.
        #[arg(long)]
        model: PathBuf,
        /// Directory written by simulate.
        #[arg(long)]
        scene: PathBuf,
    },
    /// Run the pipeline with ground-truth relative poses and check exactness.
    OracleCheck,
    /// Time masked attention per frame count and strategy (CSV).
    BenchAttn {
        /// Comma-separated frame counts.
        #[arg(long, value_delimiter = ',')]
        n_frames: Option<Vec<usize>>,
        #[arg(long)]
        repeats: Option<usize>,
        #[arg(long)]
        tokens_per_frame: Option<usize>,
        #[arg(long)]
        d_model: Option<usize>,
    },
    /// Score predicted poses against ground truth.
    Eval {
        /// Prediction manifest.
        #[arg(long)]
        pred: PathBuf,
        /// Ground-truth manifest.
        #[arg(long)]
        gt: PathBuf,
    },
}

/// Parses `args` (without the program name), runs the subcommand and
/// returns the process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let argv = std::iter::once("mfreloc".to_string()).chain(args.into_iter().map(Into::into));
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io(_) => 2,
        _ => 1,
    }
}

fn execute(cli: Cli) -> Result<()> {
    let mut global = cli.global;
    if let Ok(value) = std::env::var(SEED_ENV) {
        let seed = value
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{SEED_ENV}='{value}' is not an unsigned integer")))?;
        global.seed = Some(seed);
    }
    match cli.command {
        Command::Simulate => simulate(&global),
        Command::TrainToy => train(&global),
        Command::Relocalize { model, scene } => relocalize(&global, &model, &scene),
        Command::OracleCheck => oracle_check(&global),
        Command::BenchAttn {
            n_frames,
            repeats,
            tokens_per_frame,
            d_model,
        } => bench(&global, n_frames, repeats, tokens_per_frame, d_model),
        Command::Eval { pred, gt } => eval(&global, &pred, &gt),
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn config_or_default<T: DeserializeOwned + Default>(global: &GlobalArgs) -> Result<T> {
    global.config.as_deref().map_or_else(|| Ok(T::default()), read_json)
}

/// Writes to `--out` when given, standard output otherwise.
fn emit(global: &GlobalArgs, text: &str) -> Result<()> {
    match &global.out {
        Some(path) => fs::write(path, text)?,
        None => io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn say(line: &str) -> Result<()> {
    writeln!(io::stdout(), "{line}")?;
    Ok(())
}

fn out_dir(global: &GlobalArgs, default: &str) -> PathBuf {
    global.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn scene_spec(global: &GlobalArgs) -> Result<SceneSpec> {
    let mut spec: SceneSpec = config_or_default(global)?;
    if let Some(seed) = global.seed {
        spec.seed = seed;
    }
    spec.validate()?;
    Ok(spec)
}

fn simulate(global: &GlobalArgs) -> Result<()> {
    let spec = scene_spec(global)?;
    let scene = generate_scene(&spec)?;
    let dir = out_dir(global, "scene");
    fs::create_dir_all(&dir)?;
    let manifest = write_scene(&scene, &dir)?;
    write_json(&spec, &dir.join(SCENE_SPEC_FILE))?;
    say(&manifest.display().to_string())?;
    Ok(())
}

/// Configuration of `train-toy`; every field has a default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyConfig {
    pub n_scenes: usize,
    /// Template for every scene; scene `i` uses seed `seed + i`.
    pub scene: SceneSpec,
    /// Queries per scene excluded from training.
    pub held_out: usize,
    pub k: usize,
    pub placement: Placement,
    pub token_mode: TokenMode,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seed: u64,
    /// Flat shorthand keys; when present they override the nested fields.
    #[serde(flatten)]
    pub shorthand: Shorthand,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Shorthand {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d_model: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layers: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub heads: Option<usize>,
    /// Checked against `1 + registers + grid²`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tokens_per_frame: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mask_strategy: Option<MaskStrategy>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dilation: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    /// Both stages.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    /// Stage-2 epochs.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
}

impl Default for ToyConfig {
    fn default() -> Self {
        let mut train = TrainConfig::default();
        train.stage1.epochs = 1;
        train.stage2.epochs = 10;
        train.stage1.lr = 3e-2;
        train.stage2.lr = 3e-2;
        Self {
            n_scenes: 20,
            scene: SceneSpec {
                n_queries: 10,
                ..SceneSpec::default()
            },
            held_out: 2,
            k: 5,
            placement: Placement::QueryLast,
            token_mode: TokenMode::Inject,
            model: ModelConfig::default(),
            train,
            seed: 0,
            shorthand: Shorthand::default(),
        }
    }
}

impl ToyConfig {
    /// Folds the shorthand keys into the nested configuration.
    pub fn resolve(mut self) -> Result<Self> {
        let s = std::mem::take(&mut self.shorthand);
        let m = &mut self.model;
        m.d_model = s.d_model.unwrap_or(m.d_model);
        m.layers = s.layers.unwrap_or(m.layers);
        m.heads = s.heads.unwrap_or(m.heads);
        m.mask_strategy = s.mask_strategy.unwrap_or(m.mask_strategy);
        m.dilation = s.dilation.unwrap_or(m.dilation);
        if let Some(t) = s.tokens_per_frame {
            if t != m.tokens_per_frame() {
                return Err(Error::Config(format!(
                    "tokens_per_frame {t} does not match 1 + registers + grid^2 = {}",
                    m.tokens_per_frame()
                )));
            }
        }
        self.train.beta = s.beta.unwrap_or(self.train.beta);
        if let Some(lr) = s.lr {
            self.train.stage1.lr = lr;
            self.train.stage2.lr = lr;
        }
        self.train.stage2.epochs = s.epochs.unwrap_or(self.train.stage2.epochs);
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_scenes == 0 || self.k == 0 {
            return Err(Error::Config("n_scenes and k must be positive".into()));
        }
        if self.held_out >= self.scene.n_queries {
            return Err(Error::Config(format!(
                "held_out {} leaves no training queries out of {}",
                self.held_out, self.scene.n_queries
            )));
        }
        self.scene.validate()?;
        self.model.validate()?;
        self.train.validate()
    }

    pub fn scenes(&self) -> Result<Vec<Scene>> {
        (0..self.n_scenes as u64)
            .map(|i| {
                generate_scene(&SceneSpec {
                    seed: self.seed.wrapping_add(i),
                    ..self.scene.clone()
                })
            })
            .collect()
    }

    /// Training and held-out scenes (the same scenes, split by query).
    pub fn split(&self) -> Result<(Vec<Scene>, Vec<Scene>)> {
        let scenes = self.scenes()?;
        let keep = self.scene.n_queries - self.held_out;
        let train = scenes
            .iter()
            .map(|s| Scene {
                queries: s.queries[..keep].to_vec(),
                ..s.clone()
            })
            .collect();
        let held = scenes
            .into_iter()
            .map(|s| Scene {
                queries: s.queries[keep..].to_vec(),
                ..s
            })
            .collect();
        Ok((train, held))
    }
}

#[derive(Debug, Serialize)]
struct TrainSummary {
    initial_loss: f64,
    final_loss: f64,
    held_out_untrained: (f64, f64),
    held_out_trained: (f64, f64),
}

fn train(global: &GlobalArgs) -> Result<()> {
    let mut config = config_or_default::<ToyConfig>(global)?.resolve()?;
    if let Some(seed) = global.seed {
        config.seed = seed;
        config.train.seed = seed;
    }
    if let Some(mask) = global.mask {
        config.model.mask_strategy = mask;
    }
    if let Some(p) = global.placement {
        config.placement = p;
    }
    if let Some(k) = global.k {
        config.k = k;
    }
    config.validate()?;
    let (train_scenes, held_scenes) = config.split()?;
    let build = |scenes: &[Scene]| build_samples(scenes, &config.model, config.k, config.placement, config.token_mode);
    let train_samples = build(&train_scenes)?;
    let held_samples = build(&held_scenes)?;

    let mut model = Model::new(config.model.clone(), config.seed)?;
    let untrained = if held_samples.is_empty() {
        (f64::NAN, f64::NAN)
    } else {
        median_pose_errors(&model, &held_samples)?
    };
    let report = train_toy(&mut model, &train_samples, &config.train)?;
    let trained = if held_samples.is_empty() {
        (f64::NAN, f64::NAN)
    } else {
        median_pose_errors(&model, &held_samples)?
    };

    let dir = out_dir(global, "model");
    fs::create_dir_all(&dir)?;
    save_checkpoint(&model.store, &dir.join(CHECKPOINT_FILE))?;
    write_json(&config, &dir.join(TOY_CONFIG_FILE))?;
    let mut csv = csv::Writer::from_path(dir.join("loss.csv")).map_err(csv_error)?;
    for row in &report.curve {
        csv.serialize(row).map_err(csv_error)?;
    }
    csv.flush()?;
    let summary = TrainSummary {
        initial_loss: report.initial_loss,
        final_loss: report.final_loss,
        held_out_untrained: untrained,
        held_out_trained: trained,
    };
    write_json(&summary, &dir.join("report.json"))?;
    say(&serde_json::to_string_pretty(&summary)?)?;
    Ok(())
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Config(format!("csv: {other:?}")),
    }
}

/// A scene directory written by `simulate`: landmarks come from the stored
/// spec, camera poses from the manifest's pose files.
fn load_scene_dir(dir: &Path) -> Result<(Manifest, Scene)> {
    let manifest = Manifest::read(&dir.join(MANIFEST_FILE))?;
    let spec: SceneSpec = read_json(&dir.join(SCENE_SPEC_FILE))?;
    let landmarks = generate_scene(&spec)?.landmarks;
    let (db, queries) = manifest.load_frames(dir)?;
    Ok((manifest, Scene { landmarks, db, queries }))
}

fn relocalize(global: &GlobalArgs, model_dir: &Path, scene_dir: &Path) -> Result<()> {
    let config = read_json::<ToyConfig>(&model_dir.join(TOY_CONFIG_FILE))?.resolve()?;
    let mut model = Model::new(config.model.clone(), config.seed)?;
    load_checkpoint(&mut model.store, &model_dir.join(CHECKPOINT_FILE))?;
    let k = global.k.unwrap_or(config.k);
    let placement = global.placement.unwrap_or(config.placement);

    let (manifest, scene) = load_scene_dir(scene_dir)?;
    if scene.queries.is_empty() {
        return Err(Error::Empty("query frames"));
    }
    let mut estimates = Vec::with_capacity(scene.queries.len());
    for q in &scene.queries {
        let ids = retrieve_topk(&q.pose, &scene.db, k)?;
        let seq = assemble(q.fov, &ids, &scene.db, placement, config.token_mode)?;
        let input = SequenceInput::synthesize(seq, &scene, &q.pose, &model.config);
        let pred = model.predict(&input)?;
        estimates.push((Role::Query, q.id, recover_absolute(&pred, &input.seq)?));
    }

    let dir = out_dir(global, "relocalized");
    let pred_manifest = write_frames(&dir, manifest.fov, manifest.scene_scale, &estimates)?;
    pred_manifest.write(&dir.join(MANIFEST_FILE))?;
    let pred: Vec<Pose> = estimates.iter().map(|e| e.2).collect();
    let gt: Vec<Pose> = scene.queries.iter().map(|q| q.pose).collect();
    let name = scene_dir.display().to_string();
    let report = MetricsReport::evaluate(&name, &pred, &gt, Aggregator::default())?;
    write_json(&report, &dir.join("metrics.json"))?;
    say(&serde_json::to_string_pretty(&report)?)?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct OracleSummary {
    seed: u64,
    k: usize,
    placement: Placement,
    n_queries: usize,
    max_rot_err_rad: f64,
    max_trans_err_m: f64,
}

fn oracle_check(global: &GlobalArgs) -> Result<()> {
    let spec = scene_spec(global)?;
    let k = global.k.unwrap_or(5);
    let placement = global.placement.unwrap_or_default();
    let scene = generate_scene(&spec)?;
    let mut summary = OracleSummary {
        seed: spec.seed,
        k,
        placement,
        n_queries: scene.queries.len(),
        max_rot_err_rad: 0.0,
        max_trans_err_m: 0.0,
    };
    for q in &scene.queries {
        let ids = retrieve_topk(&q.pose, &scene.db, k)?;
        let seq = assemble(q.fov, &ids, &scene.db, placement, TokenMode::Inject)?;
        let got = recover_absolute(&seq.oracle_predictions(&q.pose), &seq)?;
        summary.max_rot_err_rad = summary
            .max_rot_err_rad
            .max(rotation_angle_between(&got.rotation, &q.pose.rotation));
        summary.max_trans_err_m = summary.max_trans_err_m.max((got.translation - q.pose.translation).norm());
    }
    emit(global, &(serde_json::to_string_pretty(&summary)? + "\n"))?;
    if summary.max_rot_err_rad <= ORACLE_TOLERANCE && summary.max_trans_err_m <= ORACLE_TOLERANCE {
        Ok(())
    } else {
        Err(Error::Precondition(format!(
            "oracle errors exceed {ORACLE_TOLERANCE:e}: rotation {:e} rad, translation {:e} m",
            summary.max_rot_err_rad, summary.max_trans_err_m
        )))
    }
}

fn bench(
    global: &GlobalArgs,
    n_frames: Option<Vec<usize>>,
    repeats: Option<usize>,
    tokens_per_frame: Option<usize>,
    d_model: Option<usize>,
) -> Result<()> {
    let mut config = BenchConfig::default();
    if let Some(n) = n_frames {
        config.n_frames = n;
    }
    if let Some(mask) = global.mask {
        config.strategies = vec![mask];
    }
    if let Some(r) = repeats {
        config.repeats = r;
    }
    if let Some(t) = tokens_per_frame {
        config.tokens_per_frame = t;
    }
    if let Some(d) = d_model {
        config.d_model = d;
    }
    if let Some(seed) = global.seed {
        config.seed = seed;
    }
    let rows = bench_attention(&config)?;
    let mut buf = Vec::new();
    write_bench_csv(&rows, &mut buf)?;
    emit(global, &String::from_utf8_lossy(&buf))
}

fn eval(global: &GlobalArgs, pred_path: &Path, gt_path: &Path) -> Result<()> {
    let base = |p: &Path| p.parent().map(Path::to_path_buf).unwrap_or_default();
    let pred = Manifest::read(pred_path)?.load_poses(&base(pred_path))?;
    let gt: HashMap<FrameId, Pose> = Manifest::read(gt_path)?
        .load_poses(&base(gt_path))?
        .into_iter()
        .map(|(f, p)| (f.id, p))
        .collect();
    let mut pred_poses = Vec::with_capacity(pred.len());
    let mut gt_poses = Vec::with_capacity(pred.len());
    for (f, p) in &pred {
        let truth = gt
            .get(&f.id)
            .ok_or_else(|| Error::Precondition(format!("frame {} has no ground truth", f.id)))?;
        pred_poses.push(*p);
        gt_poses.push(*truth);
    }
    let report = MetricsReport::evaluate(&pred_path.display().to_string(), &pred_poses, &gt_poses, Aggregator::default())?;
    emit(global, &(serde_json::to_string_pretty(&report)? + "\n"))
}
