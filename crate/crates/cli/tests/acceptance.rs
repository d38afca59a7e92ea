//! Acceptance suite. One test per criterion; each prints a PASS line with
//! its measured numbers. The end-to-end criteria share one trained pipeline
//! built lazily into a process-scoped temp directory at full desk scale
//! (128x128 frames, focal 2000 px, 15 Hz, ~300-frame sequences, ~200
//! training crops).
//!
//! Run with: cargo test -p skytrack-cli --test acceptance -- --nocapture

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use skytrack_core::eval::{self, EvalCase, ZfaOutcome};
use skytrack_core::image::BinaryMask;
use skytrack_core::scenegen::{read_sequence, render_aircraft, render_background, CameraModel};
use skytrack_core::segnet::{build_network, image_to_input, Network, NetworkConfig};
use skytrack_core::tensor::{
    batchnorm_forward, conv2d_forward, maxpool2x2, maxunpool2x2, relu, softmax_pixelwise,
    weighted_cross_entropy, BatchNormState, Tensor,
};
use skytrack_core::tracker::{extract_candidates, gate_match, run_sequence};
use skytrack_core::trainer::{self, gradient_check, LabeledSample, TrainConfig};

/// Epochs for the end-to-end training run; tuned so criterion 6 stays well
/// inside its 30-minute budget on one CPU core.
const TRAIN_EPOCHS: usize = 30;
const TRAIN_SAMPLES: usize = 200;
const PIPELINE_SEED: u64 = 1;

// ---------------------------------------------------------------------------
// Criterion 1: kernel oracles
// ---------------------------------------------------------------------------

/// Independent direct-summation convolution (duplicated here on purpose; it
/// must not share code with the implementation it checks).
fn oracle_conv(
    input: &Tensor<f32>,
    weights: &Tensor<f32>,
    bias: &[f32],
) -> Tensor<f32> {
    let s = input.shape();
    let (n, cin, h, w) = (s[0], s[1], s[2], s[3]);
    let cout = weights.shape()[0];
    let mut out = Tensor::zeros(&[n, cout, h, w]);
    for b in 0..n {
        for co in 0..cout {
            for y in 0..h as i64 {
                for x in 0..w as i64 {
                    let mut acc = bias[co];
                    for ci in 0..cin {
                        for ky in 0..3i64 {
                            for kx in 0..3i64 {
                                let (iy, ix) = (y + ky - 1, x + kx - 1);
                                if iy < 0 || ix < 0 || iy >= h as i64 || ix >= w as i64 {
                                    continue;
                                }
                                acc += input.data()
                                    [((b * cin + ci) * h + iy as usize) * w + ix as usize]
                                    * weights.data()
                                        [((co * cin + ci) * 3 + ky as usize) * 3 + kx as usize];
                            }
                        }
                    }
                    out.data_mut()[((b * cout + co) * h + y as usize) * w + x as usize] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn acceptance_1_kernel_oracles() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(10);

    // conv vs direct summation
    for _ in 0..5 {
        let input = Tensor::from_vec(
            &[2, 3, 6, 5],
            (0..2 * 3 * 30).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
        )
        .unwrap();
        let weights = Tensor::from_vec(
            &[4, 3, 3, 3],
            (0..4 * 3 * 9).map(|_| rng.gen_range(-0.5f32..0.5)).collect(),
        )
        .unwrap();
        let bias: Vec<f32> = (0..4).map(|_| rng.gen_range(-0.2..0.2)).collect();
        let fast = conv2d_forward(&input, &weights, &bias).unwrap();
        let slow = oracle_conv(&input, &weights, &bias);
        let worst = fast
            .data()
            .iter()
            .zip(slow.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(worst <= 1e-5, "conv deviates from oracle by {worst}");
    }

    // batch norm vs independently recomputed statistics
    let input = Tensor::from_vec(
        &[3, 2, 4, 4],
        (0..3 * 2 * 16).map(|_| rng.gen_range(-2.0f32..2.0)).collect(),
    )
    .unwrap();
    let mut state = BatchNormState::identity(2);
    let (out, _) = batchnorm_forward(&input, &mut state, true).unwrap();
    for ch in 0..2 {
        let vals: Vec<f64> = (0..3)
            .flat_map(|b| (0..16).map(move |i| (b, i)))
            .map(|(b, i)| out.data()[(b * 2 + ch) * 16 + i] as f64)
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 1e-5, "bn mean {mean}");
        assert!((var - 1.0).abs() < 1e-3, "bn var {var}");
    }

    // relu
    let x = Tensor::from_vec(&[1, 1, 1, 4], vec![-3.0f32, -0.0, 0.5, 9.0]).unwrap();
    assert_eq!(relu(&x).data(), &[0.0, 0.0, 0.5, 9.0]);

    // pool/unpool placement is exact
    let x = Tensor::from_vec(
        &[1, 1, 4, 4],
        (0..16).map(|i| ((i * 7) % 13) as f32).collect(),
    )
    .unwrap();
    let (pooled, idx) = maxpool2x2(&x).unwrap();
    let up = maxunpool2x2(&pooled, &idx, 4, 4).unwrap();
    for (plane_pos, &index) in idx.indices().iter().enumerate() {
        assert_eq!(up.data()[index], pooled.data()[plane_pos]);
    }
    let nonzero = up.data().iter().filter(|&&v| v != 0.0).count();
    assert!(nonzero <= 4);
    let (repooled, _) = maxpool2x2(&up).unwrap();
    assert_eq!(repooled, pooled, "pool/unpool/pool must be identity");

    // softmax normalization and loss vs hand formula
    let logits = Tensor::from_vec(
        &[1, 2, 2, 2],
        (0..8).map(|_| rng.gen_range(-3.0f32..3.0)).collect(),
    )
    .unwrap();
    let probs = softmax_pixelwise(&logits).unwrap();
    for i in 0..4 {
        let s = probs.data()[i] + probs.data()[4 + i];
        assert!((s - 1.0).abs() < 1e-6);
    }
    let labels = [0u8, 1, 1, 0];
    let weights = [0.6f32, 7.0];
    let (loss, _) = weighted_cross_entropy(&probs, &labels, weights).unwrap();
    let mut expect = 0.0f64;
    for i in 0..4 {
        let p = probs.data()[if labels[i] == 0 { i } else { 4 + i }] as f64;
        expect -= weights[labels[i] as usize] as f64 * p.ln() / 4.0;
    }
    assert!((loss as f64 - expect).abs() < 1e-6);

    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 60);
    println!(
        "ACCEPTANCE 1 kernel-oracles: PASS ({} ms)",
        elapsed.as_millis()
    );
}

// ---------------------------------------------------------------------------
// Criterion 2: whole-network gradient integrity
// ---------------------------------------------------------------------------

fn grad_check_sample() -> LabeledSample {
    let mut image = skytrack_core::image::GrayImage::new(8, 8);
    let mut mask = BinaryMask::new(8, 8);
    for r in 0..8 {
        for c in 0..8 {
            image.set(r, c, ((r * 31 + c * 17) % 200) as u8 + 20);
        }
    }
    for r in 3..5 {
        for c in 3..6 {
            image.set(r, c, 15);
            mask.set(r, c, 1);
        }
    }
    LabeledSample {
        image,
        mask,
        source: None,
    }
}

#[test]
fn acceptance_2_gradient_integrity() {
    let start = Instant::now();
    let cfg = NetworkConfig::default();
    let net: Network<f32> = build_network(&cfg, &mut ChaCha8Rng::seed_from_u64(21)).unwrap();
    let sample = grad_check_sample();

    // 64-bit check mode: central differences through the identical generic
    // kernels, >= 20 sampled parameters per layer
    let net64 = net.cast::<f64>();
    let err64 = gradient_check(&net64, &sample, 20, 1e-4).unwrap();
    assert!(err64 < 1e-3, "64-bit max relative error {err64}");

    // the production 32-bit backward must agree with the verified 64-bit one
    // on every healthy gradient (finite differences themselves are not
    // resolvable at f32 on this kink-dense architecture)
    let labels = sample.mask.data().to_vec();
    let run32 = {
        let mut n = net.clone();
        n.set_training(true);
        let probs = n.forward(&image_to_input::<f32>(&sample.image)).unwrap();
        let (_, g) = weighted_cross_entropy(&probs, &labels, [1.0f32, 3.0]).unwrap();
        n.backward(&g).unwrap()
    };
    let run64 = {
        let mut n = net64.clone();
        n.set_training(true);
        let probs = n.forward(&image_to_input::<f64>(&sample.image)).unwrap();
        let (_, g) = weighted_cross_entropy(&probs, &labels, [1.0f64, 3.0]).unwrap();
        n.backward(&g).unwrap()
    };
    let mut err32 = 0.0f64;
    let mut checked = 0usize;
    for (a, b) in run32.param_slices().iter().zip(run64.param_slices().iter()) {
        for (x, y) in a.iter().zip(b.iter()) {
            let (x, y) = (*x as f64, *y);
            let denom = x.abs().max(y.abs());
            if denom > 1e-4 {
                err32 = err32.max((x - y).abs() / denom);
                checked += 1;
            }
        }
    }
    assert!(checked > 120, "too few healthy gradients to compare");
    assert!(err32 < 1e-2, "32-bit backward deviates from 64-bit by {err32}");

    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 120);
    println!(
        "ACCEPTANCE 2 gradient-integrity: PASS (64-bit FD {err64:.2e}, \
         f32-vs-f64 analytic {err32:.2e} over {checked} gradients, {} s)",
        elapsed.as_secs()
    );
}

// ---------------------------------------------------------------------------
// Criterion 3: learning sanity (single-sample overfit)
// ---------------------------------------------------------------------------

#[test]
fn acceptance_3_learning_sanity() {
    let start = Instant::now();
    let camera = CameraModel {
        width: 64,
        height: 64,
        ..CameraModel::desk()
    };
    let mut image = render_background(&camera, 33);
    let mut mask = BinaryMask::new(64, 64);
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    render_aircraft(&mut image, &mut mask, (36.0, 30.0), 8.0, &mut rng);
    let sample = LabeledSample {
        image,
        mask,
        source: None,
    };

    let cfg = NetworkConfig::default();
    let mut net: Network<f32> = build_network(&cfg, &mut ChaCha8Rng::seed_from_u64(35)).unwrap();
    // exactly the prescribed optimizer settings; 500 single-sample steps
    let train_cfg = TrainConfig {
        learn_rate: 0.001,
        momentum: 0.9,
        l2: 0.0005,
        max_epochs: 500,
        batch_size: 1,
        crop_size: 64,
        translate_px: 0,
        flip_prob: 0.0,
        seed: 36,
    };
    let history = trainer::train(&mut net, &[sample.clone()], &train_cfg).unwrap();
    let final_loss = *history.last().unwrap();
    assert!(
        final_loss < 0.01,
        "overfit loss {final_loss} after 500 steps"
    );

    let predicted = net.segment(&sample.image).unwrap();
    let mut inter = 0usize;
    let mut union = 0usize;
    for (a, b) in predicted.data().iter().zip(sample.mask.data()) {
        if *a == 1 && *b == 1 {
            inter += 1;
        }
        if *a == 1 || *b == 1 {
            union += 1;
        }
    }
    let iou = inter as f64 / union.max(1) as f64;
    assert!(iou > 0.9, "aircraft IoU {iou}");

    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 600);
    println!(
        "ACCEPTANCE 3 learning-sanity: PASS (loss {final_loss:.4}, IoU {iou:.3}, {} s)",
        elapsed.as_secs()
    );
}

// ---------------------------------------------------------------------------
// Criterion 4: tracker equals the chain-enumeration oracle
// ---------------------------------------------------------------------------

fn lane_masks(rng: &mut ChaCha8Rng, frames: usize) -> Vec<BinaryMask> {
    let lanes = rng.gen_range(1..=4);
    let bases: Vec<(f64, f64)> = (0..lanes)
        .map(|i| {
            (
                20.0 + 56.0 * (i / 2) as f64 + rng.gen_range(-3.0..3.0),
                20.0 + 56.0 * (i % 2) as f64 + rng.gen_range(-3.0..3.0),
            )
        })
        .collect();
    let mut offsets = vec![(0.0f64, 0.0f64); lanes];
    (0..frames)
        .map(|_| {
            let mut m = BinaryMask::new(96, 96);
            for (lane, base) in bases.iter().enumerate() {
                let (mut or, mut oc) = offsets[lane];
                or = (or + rng.gen_range(-2.0..=2.0f64)).clamp(-9.0, 9.0);
                oc = (oc + rng.gen_range(-2.0..=2.0f64)).clamp(-9.0, 9.0);
                offsets[lane] = (or, oc);
                if rng.gen::<f64>() < 0.72 {
                    m.set((base.0 + or).round() as usize, (base.1 + oc).round() as usize, 1);
                }
            }
            m
        })
        .collect()
}

/// Brute-force oracle: every maximal chain of gate-linked candidates of
/// length >= W declares at its W-th element.
fn oracle_events(masks: &[BinaryMask], w: usize) -> Vec<(usize, (f64, f64))> {
    let frames: Vec<Vec<skytrack_core::tracker::Candidate>> = masks
        .iter()
        .enumerate()
        .map(|(f, m)| extract_candidates(m, f, 1))
        .collect();
    let mut events = Vec::new();
    for f in 0..frames.len() {
        for cand in &frames[f] {
            let has_pred = f > 0
                && frames[f - 1]
                    .iter()
                    .any(|p| gate_match(p.centroid, cand.centroid));
            if has_pred {
                continue;
            }
            let mut chain = vec![cand];
            let mut cur = cand.centroid;
            let mut frame = f;
            loop {
                frame += 1;
                if frame >= frames.len() {
                    break;
                }
                let next: Vec<_> = frames[frame]
                    .iter()
                    .filter(|n| gate_match(cur, n.centroid))
                    .collect();
                if next.len() != 1 {
                    break;
                }
                cur = next[0].centroid;
                chain.push(next[0]);
            }
            if chain.len() >= w {
                events.push((chain[w - 1].frame_index, chain[w - 1].centroid));
            }
        }
    }
    events.sort_by(|a, b| a.partial_cmp(b).unwrap());
    events
}

#[test]
fn acceptance_4_tracker_equivalence() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    for round in 0..100 {
        let frames = rng.gen_range(5..=50);
        let masks = lane_masks(&mut rng, frames);
        let w = rng.gen_range(1..=8);
        let mut got: Vec<(usize, (f64, f64))> = run_sequence(&masks, w)
            .unwrap()
            .into_iter()
            .map(|e| (e.frame_index, e.centroid))
            .collect();
        got.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let expect = oracle_events(&masks, w);
        assert_eq!(got, expect, "round {round} W={w}");
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 60);
    println!(
        "ACCEPTANCE 4 tracker-equivalence: PASS (100 sequences, {} ms)",
        elapsed.as_millis()
    );
}

// ---------------------------------------------------------------------------
// Criterion 5: persistence law and intermittency statistics
// ---------------------------------------------------------------------------

#[test]
fn acceptance_5_persistence_law() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(55);

    // FA count and declared-track set monotone non-increasing in W. Lane 0
    // is the "real" target in the truth; every other declaration is a false
    // alarm.
    for _ in 0..25 {
        let frames = rng.gen_range(20..=50);
        let masks = lane_masks(&mut rng, frames);
        let truth: Vec<skytrack_core::scenegen::FrameTruth> = masks
            .iter()
            .enumerate()
            .map(|(f, m)| {
                // lane 0 lives near the 20,20 corner; use the nearest
                // candidate as the true target when present
                let cands = extract_candidates(m, f, 1);
                let targets = cands
                    .iter()
                    .filter(|c| c.centroid.0 < 48.0 && c.centroid.1 < 48.0)
                    .map(|c| skytrack_core::scenegen::TargetTruth {
                        cx: c.centroid.1,
                        cy: c.centroid.0,
                        range_m: 1000.0,
                        visible: true,
                    })
                    .collect();
                skytrack_core::scenegen::FrameTruth {
                    frame: f,
                    targets,
                    vehicles: vec![],
                }
            })
            .collect();
        let mut prev_fa = usize::MAX;
        let mut prev_ids: Option<Vec<u64>> = None;
        for w in 1..=8 {
            let events = run_sequence(&masks, w).unwrap();
            let (_, fa) = eval::classify_events(&events, &truth, 5.0).unwrap();
            assert!(fa.len() <= prev_fa, "FA count rose at W={w}");
            prev_fa = fa.len();
            let ids: Vec<u64> = events.iter().map(|e| e.track_id).collect();
            if let Some(prev) = &prev_ids {
                for id in &ids {
                    assert!(prev.contains(id), "track {id} declared only at larger W");
                }
            }
            prev_ids = Some(ids);
        }
    }

    // intermittency: declaration probability over a W-frame window is p^W
    let (p, w, trials) = (0.7f64, 5usize, 10_000usize);
    let mut declared = 0usize;
    for _ in 0..trials {
        let masks: Vec<BinaryMask> = (0..w)
            .map(|_| {
                let mut m = BinaryMask::new(16, 16);
                if rng.gen::<f64>() < p {
                    m.set(8, 8, 1);
                }
                m
            })
            .collect();
        if !run_sequence(&masks, w).unwrap().is_empty() {
            declared += 1;
        }
    }
    let expect = p.powi(w as i32);
    let rate = declared as f64 / trials as f64;
    let se = (expect * (1.0 - expect) / trials as f64).sqrt();
    assert!(
        (rate - expect).abs() < 3.0 * se,
        "rate {rate} vs p^W {expect} (3se {:.4})",
        3.0 * se
    );

    let elapsed = start.elapsed();
    println!(
        "ACCEPTANCE 5 persistence-law: PASS (p^W {expect:.4} vs {rate:.4}, {} ms)",
        elapsed.as_millis()
    );
}

// ---------------------------------------------------------------------------
// Criterion 6: end-to-end synthetic reproduction (shared pipeline)
// ---------------------------------------------------------------------------

struct Pipeline {
    suites: BTreeMap<&'static str, PathBuf>,
    masks: BTreeMap<&'static str, PathBuf>,
}

static PIPELINE: OnceLock<Pipeline> = OnceLock::new();

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_skytrack"))
}

fn run(args: &[&str]) {
    let out = bin().args(args).output().expect("binary runs");
    assert!(
        out.status.success(),
        "command {:?} failed:\n{}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
}

fn pipeline() -> &'static Pipeline {
    PIPELINE.get_or_init(|| {
        let root = std::env::temp_dir().join(format!("skytrack-acceptance-{}", std::process::id()));
        std::fs::create_dir_all(&root).unwrap();
        let t0 = Instant::now();

        let data = root.join("data");
        run(&[
            "gen",
            "--preset",
            "trainset",
            "--out",
            data.to_str().unwrap(),
            "--seed",
            &PIPELINE_SEED.to_string(),
            "--count",
            &TRAIN_SAMPLES.to_string(),
        ]);
        let mut suites = BTreeMap::new();
        for preset in ["headon", "stationary", "vehicles", "multi"] {
            let dir = root.join(preset);
            run(&[
                "gen",
                "--preset",
                preset,
                "--out",
                dir.to_str().unwrap(),
                "--seed",
                &PIPELINE_SEED.to_string(),
            ]);
            suites.insert(
                match preset {
                    "headon" => "headon",
                    "stationary" => "stationary",
                    "vehicles" => "vehicles",
                    _ => "multi",
                },
                dir,
            );
        }
        eprintln!("[pipeline] generated suites in {:.1} s", t0.elapsed().as_secs_f64());

        let train_dir = root.join("train");
        let t1 = Instant::now();
        run(&[
            "train",
            "--data",
            data.to_str().unwrap(),
            "--out",
            train_dir.to_str().unwrap(),
            "--epochs",
            &TRAIN_EPOCHS.to_string(),
            "--seed",
            &PIPELINE_SEED.to_string(),
        ]);
        eprintln!("[pipeline] trained in {:.1} s", t1.elapsed().as_secs_f64());

        let ckpt = train_dir.join("checkpoint.bin");
        let mut masks = BTreeMap::new();
        let t2 = Instant::now();
        for (preset, suite) in &suites {
            let mask_root = root.join("masks").join(preset);
            let mut case_dirs: Vec<PathBuf> = std::fs::read_dir(suite)
                .unwrap()
                .filter_map(|e| e.ok())
                .map(|e| e.path())
                .filter(|p| p.is_dir())
                .collect();
            case_dirs.sort();
            for case in &case_dirs {
                let id = case.file_name().unwrap().to_string_lossy().into_owned();
                run(&[
                    "infer",
                    "--checkpoint",
                    ckpt.to_str().unwrap(),
                    "--seq",
                    case.to_str().unwrap(),
                    "--out",
                    mask_root.join(&id).to_str().unwrap(),
                ]);
            }
            masks.insert(*preset, mask_root);
        }
        eprintln!("[pipeline] inferred all suites in {:.1} s", t2.elapsed().as_secs_f64());
        eprintln!("[pipeline] total setup {:.1} s", t0.elapsed().as_secs_f64());
        Pipeline { suites, masks }
    })
}

/// Loads cases (masks from the infer output) for a preset suite.
fn load_cases(p: &Pipeline, preset: &str) -> Vec<EvalCase> {
    let suite = &p.suites[preset];
    let mask_root = &p.masks[preset];
    let mut case_dirs: Vec<PathBuf> = std::fs::read_dir(suite)
        .unwrap()
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    case_dirs.sort();
    case_dirs
        .iter()
        .map(|dir| {
            let id = dir.file_name().unwrap().to_string_lossy().into_owned();
            let seq = read_sequence(dir).unwrap();
            let masks: Vec<BinaryMask> = (0..seq.frames.len())
                .map(|f| {
                    skytrack_core::pgm::read_mask(
                        &mask_root
                            .join(&id)
                            .join(skytrack_core::scenegen::frame_mask_name(f)),
                    )
                    .unwrap()
                })
                .collect();
            EvalCase {
                id,
                masks,
                truth: seq.frames.iter().map(|f| f.truth.clone()).collect(),
            }
        })
        .collect()
}

#[test]
fn acceptance_6a_headon_zfa() {
    let cases = load_cases(pipeline(), "headon");
    match eval::zfa_search(&cases, 40, 15.0, 5.0).unwrap() {
        ZfaOutcome::Found { w_star, report } => {
            let detected = report.cases.iter().filter(|c| c.detected).count();
            assert!(
                detected >= 9,
                "only {detected}/10 head-on cases detected at W*={w_star}"
            );
            let mean = report.mean_detection_range_m.unwrap();
            let seom = report.seom_m.unwrap();
            println!(
                "ACCEPTANCE 6a headon: PASS (W*={w_star}, {detected}/10 detected, \
                 mean detection range {mean:.0} m, SEOM {seom:.0} m, synthetic scale)"
            );
        }
        ZfaOutcome::NotFound { min_false_alarms, .. } => {
            panic!("no ZFA window <= 40 (best {min_false_alarms} false alarms)")
        }
    }
}

#[test]
fn acceptance_6b_stationary_detected() {
    let cases = load_cases(pipeline(), "stationary");
    match eval::zfa_search(&cases, 40, 15.0, 5.0).unwrap() {
        ZfaOutcome::Found { w_star, report } => {
            for c in &report.cases {
                assert!(c.detected, "stationary case {} undetected", c.case_id);
            }
            println!(
                "ACCEPTANCE 6b stationary: PASS (W*={w_star}, 2/2 zero-relative-motion \
                 targets detected, ranges {:?})",
                report
                    .cases
                    .iter()
                    .map(|c| c.detection_range_m.unwrap().round())
                    .collect::<Vec<_>>()
            );
        }
        ZfaOutcome::NotFound { min_false_alarms, .. } => {
            panic!("no ZFA window <= 40 (best {min_false_alarms} false alarms)")
        }
    }
}

#[test]
fn acceptance_6c_vehicles_rejected() {
    let cases = load_cases(pipeline(), "vehicles");
    match eval::zfa_search(&cases, 40, 15.0, 5.0).unwrap() {
        ZfaOutcome::Found { w_star, report } => {
            // zero false alarms at W* means zero vehicle-caused events, since
            // vehicles can never validate an event
            for c in &report.cases {
                assert_eq!(c.false_alarm_count, 0);
                assert!(c.detected, "vehicle case {} lost its aircraft", c.case_id);
            }
            println!(
                "ACCEPTANCE 6c vehicles: PASS (W*={w_star}, 4/4 aircraft detected, \
                 0 vehicle-caused events)"
            );
        }
        ZfaOutcome::NotFound { min_false_alarms, .. } => {
            panic!("vehicles preset never reached ZFA (best {min_false_alarms} false alarms)")
        }
    }
}

#[test]
fn acceptance_6d_multi_aircraft_negative_result() {
    let p = pipeline();
    let cases = load_cases(p, "multi");
    let (w_star, _report) = match eval::zfa_search(&cases, 60, 15.0, 5.0).unwrap() {
        ZfaOutcome::Found { w_star, report } => (w_star, report),
        ZfaOutcome::NotFound { min_false_alarms, .. } => {
            panic!("multi preset never reached ZFA (best {min_false_alarms} false alarms)")
        }
    };
    assert!(w_star > 5, "W*={w_star} too small to exercise intermittency");

    // split valid events by which target they match
    let case = &cases[0];
    let events = run_sequence(&case.masks, w_star).unwrap();
    let (valid, _) = eval::classify_events(&events, &case.truth, 5.0).unwrap();
    let mut hit_persistent = false;
    let mut hit_intermittent = false;
    for e in &valid {
        let frame = &case.truth[e.frame_index];
        for (ti, t) in frame.targets.iter().enumerate() {
            let d = (t.cy - e.centroid.0).abs().max((t.cx - e.centroid.1).abs());
            if t.visible && d <= 5.0 {
                if ti == 0 {
                    hit_persistent = true;
                } else {
                    hit_intermittent = true;
                }
            }
        }
    }
    assert!(hit_persistent, "persistent target undetected at W*={w_star}");
    assert!(
        !hit_intermittent,
        "intermittent target (p=0.7) should not survive W*={w_star} successive frames"
    );
    println!(
        "ACCEPTANCE 6d multi-aircraft: PASS (W*={w_star} > 5, persistent detected, \
         intermittent p=0.7 target not detected)"
    );
}

#[test]
fn acceptance_6e_soc_curve_shape() {
    let cases = load_cases(pipeline(), "headon");
    let ws: Vec<usize> = (1..=40).collect();
    let points = eval::soc_curve(&cases, &ws, 15.0, 5.0).unwrap();
    assert_eq!(points.len(), 40);
    assert!(
        points[0].false_alarms_per_hour > 0.0,
        "expected false alarms at W=1"
    );
    let w_zero = points
        .iter()
        .find(|p| p.false_alarms_per_hour == 0.0)
        .map(|p| p.w);
    assert!(w_zero.is_some(), "no W <= 40 reaches zero FA/hour");
    for pair in points.windows(2) {
        assert!(
            pair[1].false_alarms_per_hour <= pair[0].false_alarms_per_hour,
            "FA/hour rose between W={} and W={}",
            pair[0].w,
            pair[1].w
        );
        assert_eq!(pair[1].n_detected, 10, "a case dropped out at W={}", pair[1].w);
        let (a, b) = (
            pair[0].mean_detection_range_m.unwrap(),
            pair[1].mean_detection_range_m.unwrap(),
        );
        assert!(
            b <= a + 1e-9,
            "mean range rose from {a} to {b} between W={} and W={}",
            pair[0].w,
            pair[1].w
        );
    }
    println!(
        "ACCEPTANCE 6e soc-shape: PASS (FA/hour {:.0} at W=1, zero at W={}, range {:.0} -> {:.0} m)",
        points[0].false_alarms_per_hour,
        w_zero.unwrap(),
        points[0].mean_detection_range_m.unwrap(),
        points[39].mean_detection_range_m.unwrap()
    );
}

// ---------------------------------------------------------------------------
// Criterion 7: whole-pipeline determinism
// ---------------------------------------------------------------------------

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut map = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap().filter_map(|e| e.ok()) {
            let p = entry.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                map.insert(
                    p.strip_prefix(dir).unwrap().to_path_buf(),
                    std::fs::read(&p).unwrap(),
                );
            }
        }
    }
    map
}

#[test]
fn acceptance_7_pipeline_determinism() {
    let start = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let run_once = |tag: &str| -> PathBuf {
        let root = tmp.path().join(tag);
        let data = root.join("data");
        let suite = root.join("suite");
        let train = root.join("train");
        let masks = root.join("masks");
        let evald = root.join("eval");
        run(&[
            "gen", "--preset", "trainset", "--out", data.to_str().unwrap(),
            "--seed", "3", "--count", "6", "--width", "64", "--height", "64",
            "--max-target-px", "10",
        ]);
        run(&[
            "gen", "--preset", "stationary", "--out", suite.to_str().unwrap(),
            "--seed", "3", "--frames", "12", "--width", "64", "--height", "64",
        ]);
        run(&[
            "train", "--data", data.to_str().unwrap(), "--out", train.to_str().unwrap(),
            "--epochs", "2", "--filters", "8", "--crop-size", "32", "--translate", "5",
            "--seed", "3",
        ]);
        for case in ["S1", "S2"] {
            run(&[
                "infer", "--checkpoint", train.join("checkpoint.bin").to_str().unwrap(),
                "--seq", suite.join(case).to_str().unwrap(),
                "--out", masks.join(case).to_str().unwrap(),
            ]);
        }
        run(&[
            "eval", "--suite", suite.to_str().unwrap(), "--masks", masks.to_str().unwrap(),
            "--w-range", "1:6", "--out", evald.to_str().unwrap(),
        ]);
        root
    };
    let a = run_once("a");
    let b = run_once("b");
    let snap_a = snapshot(&a);
    let snap_b = snapshot(&b);
    assert_eq!(snap_a.len(), snap_b.len());
    for (path, bytes) in &snap_a {
        assert_eq!(
            Some(bytes),
            snap_b.get(path),
            "{} differs between runs",
            path.display()
        );
    }
    println!(
        "ACCEPTANCE 7 determinism: PASS ({} files byte-identical, {} s)",
        snap_a.len(),
        start.elapsed().as_secs()
    );
}

// ---------------------------------------------------------------------------
// Criterion 8: round trips and corruption diagnostics
// ---------------------------------------------------------------------------

#[test]
fn acceptance_8_round_trips_and_corruption() {
    let tmp = tempfile::tempdir().unwrap();

    // PGM round trip
    let mut rng = ChaCha8Rng::seed_from_u64(88);
    let img = skytrack_core::image::GrayImage::from_raw(
        31,
        17,
        (0..31 * 17).map(|_| rng.gen()).collect(),
    )
    .unwrap();
    let p = tmp.path().join("img.pgm");
    skytrack_core::pgm::write_gray(&p, &img).unwrap();
    assert_eq!(skytrack_core::pgm::read_gray(&p).unwrap(), img);

    // sequence round trip (images, masks, JSON truth)
    let spec = skytrack_core::scenegen::EncounterSpec {
        kind: skytrack_core::scenegen::EncounterKind::HeadOn,
        n_frames: 5,
        targets: vec![skytrack_core::scenegen::TargetSpec {
            wingspan_m: 9.97,
            initial_range_m: 3000.0,
            closure_rate_mps: 60.0,
            drift_px_per_frame: (0.01, 0.05),
            visibility_prob: 1.0,
        }],
        vehicles: vec![],
        distractors: vec![],
        clutter_seed: 88,
    };
    let seq =
        skytrack_core::scenegen::generate_encounter(&spec, &CameraModel::desk(), 88).unwrap();
    let seq_dir = tmp.path().join("seq");
    skytrack_core::scenegen::write_sequence(&seq, &seq_dir).unwrap();
    assert_eq!(skytrack_core::scenegen::read_sequence(&seq_dir).unwrap(), seq);

    // checkpoint round trip is bit-exact
    let cfg = NetworkConfig {
        filters_per_layer: 6,
        ..NetworkConfig::default()
    };
    let net: Network<f32> = build_network(&cfg, &mut rng).unwrap();
    let ckpt = tmp.path().join("net.bin");
    skytrack_core::checkpoint::save_checkpoint(&net, &ckpt).unwrap();
    let loaded = skytrack_core::checkpoint::load_checkpoint(&ckpt).unwrap();
    for (a, b) in net
        .encoders()
        .iter()
        .chain(net.decoders())
        .zip(loaded.encoders().iter().chain(loaded.decoders()))
    {
        assert!(a
            .weights
            .data()
            .iter()
            .zip(b.weights.data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    // dataset round trip
    let entries = vec![(
        skytrack_core::trainer::ManifestEntry {
            stem: "s0".into(),
            split: "train".into(),
            meta: serde_json::json!({"range_m": 1234.5}),
        },
        LabeledSample {
            image: seq.frames[0].image.clone(),
            mask: seq.frames[0].mask.clone(),
            source: Some("s0".into()),
        },
    )];
    let data_dir = tmp.path().join("data");
    skytrack_core::trainer::save_dataset(&data_dir, &entries).unwrap();
    let loaded = skytrack_core::trainer::load_dataset(&data_dir).unwrap();
    assert_eq!(loaded[0].image, entries[0].1.image);
    assert_eq!(loaded[0].mask, entries[0].1.mask);

    // corruption yields diagnostics, never panics
    let frame0 = seq_dir.join("frame_00000.pgm");
    let bytes = std::fs::read(&frame0).unwrap();
    std::fs::write(&frame0, &bytes[..40]).unwrap();
    let err = skytrack_core::scenegen::read_sequence(&seq_dir).unwrap_err();
    assert!(err.to_string().contains("byte"), "{err}");

    let truth = seq_dir.join("truth.json");
    std::fs::write(&truth, b"{ not json").unwrap();
    assert!(skytrack_core::scenegen::read_sequence(&seq_dir).is_err());

    let ck = std::fs::read(&ckpt).unwrap();
    std::fs::write(&ckpt, &ck[..ck.len() / 3]).unwrap();
    let err = skytrack_core::checkpoint::load_checkpoint(&ckpt).unwrap_err();
    assert!(err.to_string().contains("byte"), "{err}");

    let manifest = data_dir.join("manifest.json");
    std::fs::write(&manifest, b"[1, 2").unwrap();
    assert!(skytrack_core::trainer::load_dataset(&data_dir).is_err());

    println!("ACCEPTANCE 8 round-trips: PASS");
}
