//! Named encounter suites and the synthetic training set.
//!
//! The evaluation presets mirror the structure of the reference flight
//! campaign: ten head-on cases (T01-T10), two stationary tail-chase cases
//! (S1-S2), four ground-vehicle cases (G1-G4) and one multi-aircraft case
//! (M1). Head-on and multi-aircraft scenes carry intermittent aircraft-shaped
//! distractors so the false-alarm path downstream has something real to
//! reject; vehicle scenes rely on the segmenter alone to reject the cars.

use clap::ValueEnum;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use skytrack_core::image::BinaryMask;
use skytrack_core::scenegen::{
    horizon_row, render_aircraft, render_background, render_vehicle, CameraModel, DistractorSpec,
    EncounterKind, EncounterSpec, TargetSpec, VehicleSpec, DEFAULT_WINGSPAN_M,
};
use skytrack_core::trainer::{LabeledSample, ManifestEntry};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// 10 approaching targets with clutter distractors (T01-T10).
    Headon,
    /// 2 zero-image-motion targets (S1-S2).
    Stationary,
    /// 4 aircraft-plus-road-vehicle scenes (G1-G4).
    Vehicles,
    /// 1 scene with a persistent and an intermittent aircraft (M1).
    Multi,
    /// Labelled single-frame training crops.
    Trainset,
}

fn mix(seed: u64, salt: u64) -> u64 {
    let mut x = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    x ^= x >> 30;
    x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Named encounter specs for an evaluation preset. `frames` overrides the
/// default sequence length. The generation seed for a case should be
/// [`case_seed`] of its index.
pub fn preset_cases(
    preset: Preset,
    seed: u64,
    frames: Option<usize>,
    camera: &CameraModel,
) -> Vec<(String, EncounterSpec)> {
    let road_base = (camera.height as f64 * 0.80) as usize;
    match preset {
        Preset::Headon => (0..10)
            .map(|i| {
                let fi = i as f64;
                let spec = EncounterSpec {
                    kind: EncounterKind::HeadOn,
                    n_frames: frames.unwrap_or(300),
                    targets: vec![TargetSpec {
                        wingspan_m: DEFAULT_WINGSPAN_M,
                        initial_range_m: 5200.0 + 300.0 * fi,
                        closure_rate_mps: 110.0 + 8.0 * fi,
                        drift_px_per_frame: (0.02 + 0.004 * fi, 0.08 + 0.01 * fi),
                        visibility_prob: 1.0,
                    }],
                    vehicles: vec![],
                    distractors: vec![
                        DistractorSpec {
                            size_px: 4.5,
                            visibility_prob: 0.55,
                        },
                        DistractorSpec {
                            size_px: 5.5,
                            visibility_prob: 0.5,
                        },
                    ],
                    clutter_seed: mix(seed, 100 + i as u64),
                };
                (format!("T{:02}", i + 1), spec)
            })
            .collect(),
        Preset::Stationary => (0..2)
            .map(|i| {
                let spec = EncounterSpec {
                    kind: EncounterKind::StationaryTailChase,
                    n_frames: frames.unwrap_or(240),
                    targets: vec![TargetSpec {
                        wingspan_m: DEFAULT_WINGSPAN_M,
                        initial_range_m: 4200.0 + 600.0 * i as f64,
                        closure_rate_mps: 90.0 + 10.0 * i as f64,
                        drift_px_per_frame: (0.0, 0.0),
                        visibility_prob: 1.0,
                    }],
                    vehicles: vec![],
                    distractors: vec![],
                    clutter_seed: mix(seed, 200 + i as u64),
                };
                (format!("S{}", i + 1), spec)
            })
            .collect(),
        Preset::Vehicles => (0..4)
            .map(|i| {
                let fi = i as f64;
                let n_vehicles = 2 + i % 2;
                let vehicles = (0..n_vehicles)
                    .map(|v| VehicleSpec {
                        size_px: 6.0 + 1.5 * v as f64 + 0.5 * fi,
                        velocity_px_per_frame: (0.7 + 0.3 * v as f64) * if v % 2 == 0 { 1.0 } else { -1.0 },
                        road_row: (road_base + 4 * v).min(camera.height - 2),
                    })
                    .collect();
                let spec = EncounterSpec {
                    kind: EncounterKind::GroundVehicle,
                    n_frames: frames.unwrap_or(300),
                    targets: vec![TargetSpec {
                        wingspan_m: DEFAULT_WINGSPAN_M,
                        initial_range_m: 5000.0 + 250.0 * fi,
                        closure_rate_mps: 100.0 + 10.0 * fi,
                        drift_px_per_frame: (0.015 + 0.003 * fi, 0.06 + 0.012 * fi),
                        visibility_prob: 1.0,
                    }],
                    vehicles,
                    distractors: vec![],
                    clutter_seed: mix(seed, 300 + i as u64),
                };
                (format!("G{}", i + 1), spec)
            })
            .collect(),
        Preset::Multi => {
            let spec = EncounterSpec {
                kind: EncounterKind::MultiAircraft,
                n_frames: frames.unwrap_or(330),
                targets: vec![
                    TargetSpec {
                        wingspan_m: DEFAULT_WINGSPAN_M,
                        initial_range_m: 5200.0,
                        closure_rate_mps: 105.0,
                        drift_px_per_frame: (0.03, 0.09),
                        visibility_prob: 1.0,
                    },
                    TargetSpec {
                        wingspan_m: DEFAULT_WINGSPAN_M,
                        initial_range_m: 3600.0,
                        closure_rate_mps: 25.0,
                        drift_px_per_frame: (0.0, 0.05),
                        visibility_prob: 0.7,
                    },
                ],
                vehicles: vec![],
                distractors: vec![
                    DistractorSpec {
                        size_px: 4.5,
                        visibility_prob: 0.72,
                    },
                    DistractorSpec {
                        size_px: 5.0,
                        visibility_prob: 0.68,
                    },
                ],
                clutter_seed: mix(seed, 400),
            };
            vec![("M1".to_string(), spec)]
        }
        Preset::Trainset => Vec::new(),
    }
}

/// Deterministic per-case generation seed.
pub fn case_seed(seed: u64, case_index: usize) -> u64 {
    mix(seed, 0xCA5E + case_index as u64)
}

/// Synthetic labelled training frames: one aircraft per frame at a random
/// apparent size, varied clutter, and road vehicles in half the frames so
/// the segmenter learns to reject them.
pub fn generate_trainset(
    camera: &CameraModel,
    count: usize,
    max_target_px: f64,
    seed: u64,
) -> Vec<(ManifestEntry, LabeledSample)> {
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 0x51AB + i as u64));
        let mut image = render_background(camera, mix(seed, 0xBA5E + i as u64));
        let mut mask = BinaryMask::new(camera.width, camera.height);
        let horizon = horizon_row(camera) as f64;
        let h = camera.height as f64;
        let w = camera.width as f64;

        if rng.gen::<f64>() < 0.5 {
            for v in 0..rng.gen_range(1..=2) {
                let row = rng.gen_range(h * 0.6..h - 4.0);
                let col = rng.gen_range(4.0..w - 4.0);
                render_vehicle(&mut image, (row, col), rng.gen_range(5.0..10.0));
                let _ = v;
            }
        }

        let size = rng.gen_range(1.5..max_target_px);
        let margin = max_target_px.ceil() + 2.0;
        let row = rng.gen_range(horizon + 6.0..h - margin);
        let col = rng.gen_range(margin..w - margin);
        let range_m = camera.focal_px * DEFAULT_WINGSPAN_M / size;
        render_aircraft(&mut image, &mut mask, (row, col), size, &mut rng);

        let stem = format!("sample_{i:04}");
        out.push((
            ManifestEntry {
                stem: stem.clone(),
                split: "train".into(),
                meta: serde_json::json!({
                    "range_m": range_m,
                    "apparent_px": size,
                    "cy": row,
                    "cx": col,
                }),
            },
            LabeledSample {
                image,
                mask,
                source: Some(stem),
            },
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_case_counts_follow_the_campaign_structure() {
        let cam = CameraModel::desk();
        assert_eq!(preset_cases(Preset::Headon, 0, None, &cam).len(), 10);
        assert_eq!(preset_cases(Preset::Stationary, 0, None, &cam).len(), 2);
        assert_eq!(preset_cases(Preset::Vehicles, 0, None, &cam).len(), 4);
        assert_eq!(preset_cases(Preset::Multi, 0, None, &cam).len(), 1);
    }

    #[test]
    fn headon_cases_have_distinct_ids_and_seeds() {
        let cases = preset_cases(Preset::Headon, 7, None, &CameraModel::desk());
        assert_eq!(cases[0].0, "T01");
        assert_eq!(cases[9].0, "T10");
        let mut seeds: Vec<u64> = cases.iter().map(|(_, s)| s.clutter_seed).collect();
        seeds.dedup();
        assert_eq!(seeds.len(), 10);
    }

    #[test]
    fn stationary_cases_have_zero_drift() {
        for (_, spec) in preset_cases(Preset::Stationary, 3, None, &CameraModel::desk()) {
            for t in &spec.targets {
                assert_eq!(t.drift_px_per_frame, (0.0, 0.0));
            }
        }
    }

    #[test]
    fn trainset_is_deterministic_and_labelled() {
        let cam = CameraModel::desk();
        let a = generate_trainset(&cam, 5, 12.0, 3);
        let b = generate_trainset(&cam, 5, 12.0, 3);
        assert_eq!(a.len(), 5);
        for ((ea, sa), (eb, sb)) in a.iter().zip(&b) {
            assert_eq!(ea, eb);
            assert_eq!(sa, sb);
            assert!(sa.mask.count_ones() >= 1, "every sample needs aircraft pixels");
        }
    }
}
