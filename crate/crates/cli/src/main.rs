use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use chg_core::eval::{evaluate_split, evaluate_with, scene_predictions, EvalOptions, EvalReport};
use chg_core::graph::{forward, init_params, HomogeneousMode, ModelConfig, NodeState, PairEdge};
use chg_core::io::{
    format_train_config, loss_csv, parse_synth_spec, parse_train_config, read_json, read_known_object, read_scenes,
    write_json, Checkpoint, GroundTruthFile, PredictionFile, SceneFile,
};
use chg_core::math::{GradCheckOptions, Tape};
use chg_core::spatial::SpatialConfig;
use chg_core::synth::{generate_synthetic_scenes, random_scene};
use chg_core::train::{gradient_check, train_with, LabeledScene, TrainConfig};

/// Contextual heterogeneous graph network for human-object interaction
/// detection.
#[derive(Parser)]
#[command(name = "chg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoints and a loss history.
    Train(TrainArgs),
    /// Score every subject-object pair and class of some scenes.
    Predict(PredictArgs),
    /// Role mAP of predictions against ground truth.
    Eval(EvalArgs),
    /// Compare analytic and numeric gradients on a random scene.
    Gradcheck(GradcheckArgs),
    /// Write planted-rule synthetic scenes and their ground truth.
    Synth(SynthArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// `key = value` config file; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Scene file or directory of scene files.
    #[arg(long, conflicts_with = "synth", required_unless_present_any = ["synth", "print_config"])]
    data: Option<PathBuf>,
    /// Train on generated scenes, e.g. `n=200,sigma=0.1`.
    #[arg(long)]
    synth: Option<String>,
    /// Output directory for checkpoints and `loss.csv`.
    #[arg(long, default_value = "run")]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Also save `epoch-<k>.chk` every this many epochs.
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long)]
    no_intra: bool,
    #[arg(long)]
    no_inter: bool,
    #[arg(long)]
    no_intra_attention: bool,
    #[arg(long)]
    no_w: bool,
    #[arg(long, value_name = "intra|inter")]
    homogeneous: Option<HomogeneousMode>,
    /// Print the effective config and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Scene file or directory of scene files.
    #[arg(long)]
    scenes: PathBuf,
    #[arg(long, default_value = "predictions.json")]
    out: PathBuf,
    /// Drop predictions scoring below this.
    #[arg(long, default_value_t = 0.0)]
    score_floor: f64,
    /// Write node states and pair outputs of every scene to this JSON file.
    #[arg(long)]
    dump: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long)]
    ground_truth: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    iou: f64,
    /// Add reports for complex and simple (one subject, one object) images.
    #[arg(long)]
    split_complexity: bool,
    /// Per-class candidate images: a `{class: [image ids]}` map or a
    /// ground-truth file carrying `known_object`.
    #[arg(long)]
    known_object: Option<PathBuf>,
    /// Also write the report as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    #[arg(long, default_value_t = 4)]
    d: usize,
    #[arg(long, default_value_t = 2)]
    n: usize,
    #[arg(long, default_value_t = 2)]
    m: usize,
    #[arg(long, default_value_t = 3)]
    a: usize,
    #[arg(long, default_value_t = 5)]
    f: usize,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
}

#[derive(Args)]
struct SynthArgs {
    /// Generator settings, e.g. `n=200,sigma=0.1`.
    #[arg(long, default_value = "")]
    spec: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory receiving `scenes.json` and `ground_truth.json`.
    #[arg(long)]
    out: PathBuf,
}

/// Canvas of generated scenes.
const SYNTH_CANVAS: (f64, f64) = (800.0, 600.0);

fn load_training_data(args: &TrainArgs, cfg: &mut TrainConfig) -> Result<Vec<LabeledScene>> {
    if let Some(text) = &args.synth {
        let (count, spec) = parse_synth_spec(text)?;
        cfg.model.f = spec.f;
        cfg.model.a = spec.a;
        return Ok(generate_synthetic_scenes(count, cfg.seed, &spec)?);
    }
    let path = args.data.as_ref().expect("clap requires --data or --synth");
    let files = read_scenes(path)?;
    if let Some(first) = files.iter().find_map(|s| s.instances.first()) {
        cfg.model.f = first.features.len();
    }
    files
        .iter()
        .map(|s| s.to_labeled(cfg.model.a).with_context(|| format!("scene {}", s.image_id)))
        .collect()
}

fn run_train(args: TrainArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            parse_train_config(&text, TrainConfig::default()).with_context(|| path.display().to_string())?
        }
        None => TrainConfig::default(),
    };
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let flags = &mut cfg.model.flags;
    flags.use_intra &= !args.no_intra;
    flags.use_inter &= !args.no_inter;
    flags.use_intra_attention &= !args.no_intra_attention;
    flags.use_interactiveness_weight &= !args.no_w;
    if let Some(mode) = args.homogeneous {
        flags.homogeneous = mode;
    }
    if args.print_config {
        cfg.validate()?;
        print!("{}", format_train_config(&cfg));
        return Ok(());
    }
    let dataset = load_training_data(&args, &mut cfg)?;
    cfg.validate()?;
    log::info!("training on {} scenes", dataset.len());
    println!("variant = {}", cfg.model.flags.variant());
    print!("{}", format_train_config(&cfg));

    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let every = args.checkpoint_every.filter(|&k| k > 0);
    let out = args.out.clone();
    let snapshot = cfg.clone();
    let outcome = train_with(&dataset, &cfg, |stats, params, rng_word_pos| {
        let done = stats.epoch + 1;
        if every.is_some_and(|k| done % k == 0) {
            let ck = Checkpoint { config: snapshot.clone(), epoch: done, rng_word_pos, params: params.clone() };
            ck.save(&out.join(format!("epoch-{done}.chk")))?;
        }
        Ok(())
    })?;
    let csv = args.out.join("loss.csv");
    fs::write(&csv, loss_csv(&outcome.history)).with_context(|| format!("writing {}", csv.display()))?;
    let ck = Checkpoint { config: cfg, epoch: outcome.history.len(), rng_word_pos: outcome.rng_word_pos, params: outcome.params };
    let model = args.out.join("model.chk");
    ck.save(&model)?;
    if let Some(last) = outcome.history.last() {
        println!("final loss {:.6}", last.loss);
    }
    println!("wrote {}", model.display());
    Ok(())
}

#[derive(Serialize)]
struct SceneDump {
    image_id: String,
    nodes: Vec<NodeState>,
    pairs: Vec<PairEdge>,
}

fn run_predict(args: PredictArgs) -> Result<()> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let model: &ModelConfig = &ck.config.model;
    let files = read_scenes(&args.scenes)?;
    log::info!("checkpoint variant {} at epoch {}", ck.variant(), ck.epoch);
    let mut predictions = Vec::new();
    let mut dumps = Vec::new();
    for file in &files {
        let scene = file.input()?;
        let mut tape = Tape::new();
        let out = forward(&mut tape, &ck.params, model, &scene).with_context(|| format!("scene {}", file.image_id))?;
        let y = tape.value(out.y);
        predictions.extend(
            scene_predictions(&file.image_id, &scene, y)?.into_iter().filter(|p| p.score >= args.score_floor),
        );
        if args.dump.is_some() {
            dumps.push(SceneDump {
                image_id: file.image_id.clone(),
                nodes: out.node_states(&tape, &scene),
                pairs: out.pair_edges(&tape),
            });
        }
    }
    println!("{} predictions from {} scenes", predictions.len(), files.len());
    write_json(&args.out, &PredictionFile { predictions })?;
    if let Some(path) = &args.dump {
        write_json(path, &dumps)?;
    }
    Ok(())
}

fn run_eval(args: EvalArgs) -> Result<()> {
    let preds: PredictionFile = read_json(&args.predictions)?;
    let gt: GroundTruthFile = read_json(&args.ground_truth)?;
    let known_object = args.known_object.as_deref().map(read_known_object).transpose()?;
    let mode = if known_object.is_some() { "known-object" } else { "default" };
    let opts = EvalOptions { iou_thresh: args.iou, known_object };
    let report: EvalReport = if args.split_complexity {
        if gt.images.is_empty() {
            bail!("--split-complexity needs the `images` list in {}", args.ground_truth.display());
        }
        evaluate_split(&preds.predictions, &gt.ground_truth, &opts, &gt.simple_images())?
    } else {
        evaluate_with(&preds.predictions, &gt.ground_truth, &opts)?
    };
    println!("iou threshold {}  mode {mode}", args.iou);
    print!("{report}");
    if let Some(path) = &args.json {
        write_json(path, &report)?;
    }
    Ok(())
}

fn run_gradcheck(args: GradcheckArgs) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let cfg = ModelConfig {
        d: args.d,
        f: args.f,
        a: args.a,
        spatial: SpatialConfig { channels: [2, 3, 3] },
        ..ModelConfig::default()
    };
    cfg.validate()?;
    let scene = random_scene(&mut rng, args.n, args.m, args.f, args.a, 200.0);
    let mut params = init_params(&cfg, &mut rng)?;
    let opts = GradCheckOptions { eps: args.eps, ..GradCheckOptions::default() };
    let report = gradient_check(&mut params, &cfg, &scene, TrainConfig::default().lambda, &opts)?;
    println!("max relative error {:e} over {} coordinates", report.max_rel_error, report.checked);
    if !report.skipped.is_empty() {
        println!("{} coordinates skipped at non-differentiable points", report.skipped.len());
    }
    if report.passes(args.tol) {
        return Ok(());
    }
    for w in &report.worst {
        eprintln!("  {}[{}]: analytic {:e} numeric {:e} rel {:e}", w.param, w.index, w.analytic, w.numeric, w.rel_error);
    }
    if !report.non_finite.is_empty() {
        eprintln!("  {} coordinates produced non-finite losses", report.non_finite.len());
    }
    bail!("gradient check failed: max relative error {:e} >= {:e}", report.max_rel_error, args.tol)
}

fn run_synth(args: SynthArgs) -> Result<()> {
    let (count, spec) = parse_synth_spec(&args.spec)?;
    let scenes = generate_synthetic_scenes(count, args.seed, &spec)?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let files: Vec<SceneFile> =
        scenes.iter().map(|s| SceneFile::from_labeled(s, SYNTH_CANVAS.0, SYNTH_CANVAS.1)).collect();
    write_json(&args.out.join("scenes.json"), &files)?;
    write_json(&args.out.join("ground_truth.json"), &GroundTruthFile::from_scenes(&scenes))?;
    println!("wrote {count} scenes to {}", args.out.display());
    Ok(())
}

fn init_logging() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CHG_LOG", "warn")).init();
}

fn main() -> ExitCode {
    init_logging();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => run_train(a),
        Command::Predict(a) => run_predict(a),
        Command::Eval(a) => run_eval(a),
        Command::Gradcheck(a) => run_gradcheck(a),
        Command::Synth(a) => run_synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
