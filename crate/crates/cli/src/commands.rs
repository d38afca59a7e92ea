//! Subcommand implementations. Every run writes the fully resolved
//! configuration into `run.json` in its output directory, so any output can
//! be replayed from its own record. Data goes to files; progress and errors
//! go to stderr.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use skytrack_core::checkpoint::{load_checkpoint, save_checkpoint};
use skytrack_core::eval::{
    self, soc_svg, write_case_csv, write_soc_csv, EvalCase, ZfaOutcome, DEFAULT_MATCH_RADIUS_PX,
};
use skytrack_core::image::BinaryMask;
use skytrack_core::pgm;
use skytrack_core::scenegen::{
    frame_mask_name, generate_encounter, read_sequence, write_sequence, CameraModel,
};
use skytrack_core::segnet::{build_network, Network, NetworkConfig};
use skytrack_core::tracker;
use skytrack_core::trainer::{self, TrainConfig};

use crate::presets::{case_seed, generate_trainset, preset_cases, Preset};

fn write_run_json(dir: &Path, record: &impl Serialize) -> Result<()> {
    let bytes = serde_json::to_vec_pretty(record)?;
    pgm::atomic_write(&dir.join("run.json"), &bytes)?;
    Ok(())
}

fn read_config_file<T: for<'de> Deserialize<'de> + Default>(path: &Option<PathBuf>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let bytes = fs::read(p).with_context(|| format!("reading config {}", p.display()))?;
            serde_json::from_slice(&bytes).with_context(|| format!("parsing config {}", p.display()))
        }
    }
}

// ---------------------------------------------------------------------------
// gen
// ---------------------------------------------------------------------------

#[derive(Args, Debug)]
pub struct GenArgs {
    /// Which suite to generate.
    #[arg(long, value_enum)]
    pub preset: Preset,
    /// Output directory (one subdirectory per case, or a dataset for trainset).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Frames per sequence (presets only).
    #[arg(long)]
    pub frames: Option<usize>,
    /// Sample count (trainset only).
    #[arg(long)]
    pub count: Option<usize>,
    /// Largest apparent target size in the trainset, px.
    #[arg(long)]
    pub max_target_px: Option<f64>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub focal: Option<f64>,
    #[arg(long)]
    pub frame_rate: Option<f64>,
    /// JSON file with the same keys as the flags; flags win.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct GenFileConfig {
    seed: Option<u64>,
    frames: Option<usize>,
    count: Option<usize>,
    max_target_px: Option<f64>,
    width: Option<usize>,
    height: Option<usize>,
    focal: Option<f64>,
    frame_rate: Option<f64>,
}

#[derive(Serialize)]
struct GenRun {
    command: &'static str,
    preset: Preset,
    seed: u64,
    camera: CameraModel,
    frames: Option<usize>,
    count: Option<usize>,
    max_target_px: Option<f64>,
    cases: Vec<String>,
}

pub fn run_gen(args: &GenArgs) -> Result<()> {
    let file: GenFileConfig = read_config_file(&args.config)?;
    let seed = args.seed.or(file.seed).unwrap_or(0);
    let mut camera = CameraModel::desk();
    if let Some(w) = args.width.or(file.width) {
        camera.width = w;
    }
    if let Some(h) = args.height.or(file.height) {
        camera.height = h;
    }
    if let Some(f) = args.focal.or(file.focal) {
        camera.focal_px = f;
    }
    if let Some(r) = args.frame_rate.or(file.frame_rate) {
        camera.frame_rate_hz = r;
    }
    fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;

    if args.preset == Preset::Trainset {
        let count = args.count.or(file.count).unwrap_or(200);
        let max_px = args.max_target_px.or(file.max_target_px).unwrap_or(18.0);
        let entries = generate_trainset(&camera, count, max_px, seed);
        trainer::save_dataset(&args.out, &entries)?;
        write_run_json(
            &args.out,
            &GenRun {
                command: "gen",
                preset: args.preset,
                seed,
                camera,
                frames: None,
                count: Some(count),
                max_target_px: Some(max_px),
                cases: vec![],
            },
        )?;
        eprintln!("wrote {count} training samples to {}", args.out.display());
        return Ok(());
    }

    let frames = args.frames.or(file.frames);
    let cases = preset_cases(args.preset, seed, frames, &camera);
    let mut ids = Vec::with_capacity(cases.len());
    for (i, (id, spec)) in cases.iter().enumerate() {
        let seq = generate_encounter(spec, &camera, case_seed(seed, i))?;
        write_sequence(&seq, &args.out.join(id))?;
        eprintln!("generated {id}: {} frames", seq.frames.len());
        ids.push(id.clone());
    }
    write_run_json(
        &args.out,
        &GenRun {
            command: "gen",
            preset: args.preset,
            seed,
            camera,
            frames,
            count: None,
            max_target_px: None,
            cases: ids,
        },
    )?;
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset directory (manifest.json plus PGM pairs).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub l2: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub crop_size: Option<usize>,
    #[arg(long)]
    pub translate: Option<usize>,
    #[arg(long)]
    pub flip_prob: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Convolution filters per layer.
    #[arg(long)]
    pub filters: Option<usize>,
    #[arg(long)]
    pub encoder_layers: Option<usize>,
    /// Segmentation threshold stored in the checkpoint.
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainFileConfig {
    epochs: Option<usize>,
    lr: Option<f64>,
    momentum: Option<f64>,
    l2: Option<f64>,
    batch_size: Option<usize>,
    crop_size: Option<usize>,
    translate: Option<usize>,
    flip_prob: Option<f64>,
    seed: Option<u64>,
    filters: Option<usize>,
    encoder_layers: Option<usize>,
    threshold: Option<f64>,
}

#[derive(Serialize)]
struct TrainRun {
    command: &'static str,
    data: PathBuf,
    network: NetworkConfig,
    train: TrainConfig,
    samples: usize,
    final_loss: f64,
}

pub fn run_train(args: &TrainArgs) -> Result<()> {
    let file: TrainFileConfig = read_config_file(&args.config)?;
    let defaults = TrainConfig::default();
    let train_cfg = TrainConfig {
        learn_rate: args.lr.or(file.lr).unwrap_or(defaults.learn_rate),
        momentum: args.momentum.or(file.momentum).unwrap_or(defaults.momentum),
        l2: args.l2.or(file.l2).unwrap_or(defaults.l2),
        max_epochs: args.epochs.or(file.epochs).unwrap_or(defaults.max_epochs),
        batch_size: args
            .batch_size
            .or(file.batch_size)
            .unwrap_or(defaults.batch_size),
        crop_size: args
            .crop_size
            .or(file.crop_size)
            .unwrap_or(defaults.crop_size),
        translate_px: args
            .translate
            .or(file.translate)
            .unwrap_or(defaults.translate_px),
        flip_prob: args
            .flip_prob
            .or(file.flip_prob)
            .unwrap_or(defaults.flip_prob),
        seed: args.seed.or(file.seed).unwrap_or(defaults.seed),
    };
    let net_defaults = NetworkConfig::default();
    let net_cfg = NetworkConfig {
        filters_per_layer: args
            .filters
            .or(file.filters)
            .unwrap_or(net_defaults.filters_per_layer),
        encoder_layers: args
            .encoder_layers
            .or(file.encoder_layers)
            .unwrap_or(net_defaults.encoder_layers),
        threshold: args
            .threshold
            .or(file.threshold)
            .unwrap_or(net_defaults.threshold),
        ..net_defaults
    };

    let samples = trainer::load_dataset(&args.data)
        .with_context(|| format!("loading dataset {}", args.data.display()))?;
    fs::create_dir_all(&args.out)?;

    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    let mut net: Network<f32> = build_network(&net_cfg, &mut rng)?;
    eprintln!(
        "training on {} samples: {} epochs, crop {}, {} filters",
        samples.len(),
        train_cfg.max_epochs,
        train_cfg.crop_size,
        net_cfg.filters_per_layer
    );
    let history = trainer::train(&mut net, &samples, &train_cfg)?;
    let final_loss = *history.last().expect("at least one epoch");

    save_checkpoint(&net, &args.out.join("checkpoint.bin"))?;
    trainer::write_loss_csv(&args.out.join("loss.csv"), &history)?;
    write_run_json(
        &args.out,
        &TrainRun {
            command: "train",
            data: args.data.clone(),
            network: net_cfg,
            train: train_cfg,
            samples: samples.len(),
            final_loss,
        },
    )?;
    println!("final loss {final_loss}");
    Ok(())
}

// ---------------------------------------------------------------------------
// infer
// ---------------------------------------------------------------------------

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Sequence directory with frame_NNNNN.pgm files.
    #[arg(long)]
    pub seq: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the checkpoint's segmentation threshold.
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Serialize)]
struct InferRun {
    command: &'static str,
    checkpoint: PathBuf,
    seq: PathBuf,
    threshold: f64,
    frames: usize,
}

fn list_frame_stems(dir: &Path) -> Result<Vec<String>> {
    let mut stems: Vec<String> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().to_string_lossy().into_owned();
            if name.ends_with(".pgm") && !name.ends_with(".mask.pgm") {
                Some(name.trim_end_matches(".pgm").to_string())
            } else {
                None
            }
        })
        .collect();
    stems.sort();
    if stems.is_empty() {
        bail!("no frame PGMs found in {}", dir.display());
    }
    Ok(stems)
}

pub fn run_infer(args: &InferArgs) -> Result<()> {
    let mut net = load_checkpoint(&args.checkpoint)?;
    if let Some(t) = args.threshold {
        if !(t > 0.0 && t < 1.0) {
            bail!("--threshold must lie strictly inside (0, 1), got {t}");
        }
        let mut cfg = net.config().clone();
        cfg.threshold = t;
        net = Network::from_parts(cfg, net.encoders().to_vec(), net.decoders().to_vec())?;
    }
    let threshold = net.config().threshold;
    let stems = list_frame_stems(&args.seq)?;
    fs::create_dir_all(&args.out)?;
    for stem in &stems {
        let image = pgm::read_gray(&args.seq.join(format!("{stem}.pgm")))?;
        let mask = net
            .segment(&image)
            .with_context(|| format!("segmenting {stem}"))?;
        pgm::write_mask(&args.out.join(format!("{stem}.mask.pgm")), &mask)?;
    }
    write_run_json(
        &args.out,
        &InferRun {
            command: "infer",
            checkpoint: args.checkpoint.clone(),
            seq: args.seq.clone(),
            threshold,
            frames: stems.len(),
        },
    )?;
    eprintln!("wrote {} masks to {}", stems.len(), args.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Suite directory: one sequence subdirectory (with truth.json) per case.
    #[arg(long)]
    pub suite: PathBuf,
    /// Mask directory with one subdirectory per case (as written by infer).
    #[arg(long)]
    pub masks: Option<PathBuf>,
    /// Segment frames in memory with this checkpoint instead of --masks.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Single window length to report.
    #[arg(long)]
    pub w: Option<usize>,
    /// Window sweep `a:b` producing soc.csv.
    #[arg(long)]
    pub w_range: Option<String>,
    /// Search the smallest zero-false-alarm window.
    #[arg(long)]
    pub zfa: bool,
    /// Upper bound for --zfa.
    #[arg(long, default_value_t = 40)]
    pub w_max: usize,
    /// Overrides the frame rate recorded in the truth manifests.
    #[arg(long)]
    pub frame_rate: Option<f64>,
    /// Chebyshev radius (px) for matching events to true targets.
    #[arg(long, default_value_t = DEFAULT_MATCH_RADIUS_PX)]
    pub match_radius: f64,
    /// Also write soc.svg (with --w-range).
    #[arg(long)]
    pub svg: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Serialize)]
struct EvalRun {
    command: &'static str,
    suite: PathBuf,
    masks: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    mode: String,
    frame_rate_hz: f64,
    match_radius_px: f64,
    cases: Vec<String>,
    outcome: serde_json::Value,
}

fn load_suite(
    suite: &Path,
    masks_dir: &Option<PathBuf>,
    checkpoint: &Option<PathBuf>,
) -> Result<(Vec<EvalCase>, f64)> {
    let mut case_dirs: Vec<PathBuf> = fs::read_dir(suite)
        .with_context(|| format!("reading suite {}", suite.display()))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir() && p.join(skytrack_core::scenegen::TRUTH_FILE).exists())
        .collect();
    case_dirs.sort();
    if case_dirs.is_empty() {
        bail!(
            "no case directories with truth.json under {}",
            suite.display()
        );
    }
    let net = match checkpoint {
        Some(p) => Some(load_checkpoint(p)?),
        None => None,
    };
    let mut cases = Vec::with_capacity(case_dirs.len());
    let mut frame_rate = None;
    for dir in &case_dirs {
        let id = dir
            .file_name()
            .expect("case dir has a name")
            .to_string_lossy()
            .into_owned();
        let seq = read_sequence(dir)?;
        frame_rate.get_or_insert(seq.camera.frame_rate_hz);
        let masks: Vec<BinaryMask> = if let Some(net) = &net {
            let mut masks = Vec::with_capacity(seq.frames.len());
            for frame in &seq.frames {
                masks.push(net.segment(&frame.image)?);
            }
            eprintln!("segmented {id}: {} frames", masks.len());
            masks
        } else if let Some(mdir) = masks_dir {
            (0..seq.frames.len())
                .map(|f| pgm::read_mask(&mdir.join(&id).join(frame_mask_name(f))))
                .collect::<Result<_, _>>()?
        } else {
            bail!("eval needs either --masks or --checkpoint");
        };
        cases.push(EvalCase {
            id,
            masks,
            truth: seq.frames.iter().map(|f| f.truth.clone()).collect(),
        });
    }
    Ok((cases, frame_rate.expect("at least one case")))
}

fn parse_w_range(text: &str) -> Result<Vec<usize>> {
    let parts: Vec<&str> = text.split(':').collect();
    if parts.len() != 2 {
        bail!("--w-range expects a:b, got {text}");
    }
    let a: usize = parts[0].parse().context("parsing range start")?;
    let b: usize = parts[1].parse().context("parsing range end")?;
    if a == 0 || b < a {
        bail!("--w-range needs 1 <= a <= b, got {text}");
    }
    Ok((a..=b).collect())
}

fn write_event_logs(cases: &[EvalCase], w: usize, out: &Path) -> Result<()> {
    for case in cases {
        let events = tracker::run_sequence(&case.masks, w)?;
        tracker::write_event_log(&events, &out.join(format!("events_{}.csv", case.id)))?;
    }
    Ok(())
}

pub fn run_eval(args: &EvalArgs) -> Result<()> {
    let modes = [args.w.is_some(), args.w_range.is_some(), args.zfa];
    if modes.iter().filter(|&&m| m).count() != 1 {
        bail!("choose exactly one of --w, --w-range, --zfa");
    }
    let (cases, truth_rate) = load_suite(&args.suite, &args.masks, &args.checkpoint)?;
    let frame_rate = args.frame_rate.unwrap_or(truth_rate);
    fs::create_dir_all(&args.out)?;
    let ids: Vec<String> = cases.iter().map(|c| c.id.clone()).collect();

    let (mode, outcome) = if let Some(w) = args.w {
        let report = eval::evaluate(&cases, w, frame_rate, args.match_radius)?;
        write_case_csv(&args.out.join("report.csv"), &report)?;
        write_event_logs(&cases, w, &args.out)?;
        println!(
            "W={w}: detected {}/{} cases, {} FA/hour",
            report.cases.iter().filter(|c| c.detected).count(),
            report.cases.len(),
            report.false_alarms_per_hour
        );
        (
            "single".to_string(),
            serde_json::json!({ "w": w, "fa_per_hour": report.false_alarms_per_hour }),
        )
    } else if let Some(range) = &args.w_range {
        let ws = parse_w_range(range)?;
        let points = eval::soc_curve(&cases, &ws, frame_rate, args.match_radius)?;
        write_soc_csv(&args.out.join("soc.csv"), &points)?;
        if args.svg {
            pgm::atomic_write(&args.out.join("soc.svg"), soc_svg(&points).as_bytes())?;
        }
        println!("soc.csv: {} window lengths", points.len());
        (
            "soc".to_string(),
            serde_json::json!({ "w_min": ws.first(), "w_max": ws.last() }),
        )
    } else {
        match eval::zfa_search(&cases, args.w_max, frame_rate, args.match_radius)? {
            ZfaOutcome::Found { w_star, report } => {
                write_case_csv(&args.out.join("zfa.csv"), &report)?;
                write_event_logs(&cases, w_star, &args.out)?;
                println!(
                    "ZFA window W*={w_star}: mean range {:?} m, SEOM {:?} m, {}/{} detected",
                    report.mean_detection_range_m,
                    report.seom_m,
                    report.cases.iter().filter(|c| c.detected).count(),
                    report.cases.len()
                );
                (
                    "zfa".to_string(),
                    serde_json::json!({
                        "w_star": w_star,
                        "mean_range_m": report.mean_detection_range_m,
                        "seom_m": report.seom_m,
                    }),
                )
            }
            ZfaOutcome::NotFound {
                w_max,
                min_false_alarms,
            } => {
                println!(
                    "no zero-false-alarm window within 1..={w_max} (best: {min_false_alarms} false alarms)"
                );
                (
                    "zfa".to_string(),
                    serde_json::json!({ "w_star": null, "w_max": w_max, "min_false_alarms": min_false_alarms }),
                )
            }
        }
    };

    write_run_json(
        &args.out,
        &EvalRun {
            command: "eval",
            suite: args.suite.clone(),
            masks: args.masks.clone(),
            checkpoint: args.checkpoint.clone(),
            mode,
            frame_rate_hz: frame_rate,
            match_radius_px: args.match_radius,
            cases: ids,
            outcome,
        },
    )?;
    Ok(())
}
