//! Synthetic below-horizon encounters with exact per-frame ground truth.
//!
//! Scenes are a pinhole-camera view of a cluttered ground plane under a
//! lighter sky band. Aircraft render as dark winged silhouettes whose size
//! follows the pinhole model from their true range; ground vehicles render as
//! bright rectangles that never touch the aircraft mask; optional distractors
//! are aircraft-shaped clutter flashes that appear only intermittently and
//! are deliberately absent from both mask and target truth — they exercise
//! the false-alarm path downstream.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{BinaryMask, GrayImage};
use crate::pgm::{self, PgmError};

#[derive(Debug, Error)]
pub enum SceneGenError {
    #[error("invalid encounter spec: {0}")]
    BadSpec(String),
    #[error("apparent size undefined for range {range} m (must be > 0)")]
    RangeDomain { range: f64 },
    #[error(transparent)]
    Pgm(#[from] PgmError),
    #[error("{path}: {source}")]
    Json {
        path: std::path::PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{dir}: truth lists {expected} frames but {actual} frame images are present")]
    FrameCount {
        dir: std::path::PathBuf,
        expected: usize,
        actual: usize,
    },
}

/// Pinhole camera. Desk default is 128x128 at focal 2000 px and 15 Hz, which
/// keeps whole-pipeline runs in minutes while preserving the small-target
/// regime (a 10 m wingspan spans 2-20 px over ranges 1-10 km).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub width: usize,
    pub height: usize,
    pub focal_px: f64,
    pub frame_rate_hz: f64,
}

impl CameraModel {
    pub fn desk() -> Self {
        Self {
            width: 128,
            height: 128,
            focal_px: 2000.0,
            frame_rate_hz: 15.0,
        }
    }

    /// Full-scale sensor geometry: 1280x960 at 15 Hz.
    pub fn full_scale() -> Self {
        Self {
            width: 1280,
            height: 960,
            focal_px: 2000.0,
            frame_rate_hz: 15.0,
        }
    }

    fn validate(&self) -> Result<(), SceneGenError> {
        if self.width == 0 || self.height == 0 {
            return Err(SceneGenError::BadSpec("camera dims must be positive".into()));
        }
        if !(self.focal_px > 0.0) || !(self.frame_rate_hz > 0.0) {
            return Err(SceneGenError::BadSpec(
                "camera focal length and frame rate must be positive".into(),
            ));
        }
        Ok(())
    }
}

impl Default for CameraModel {
    fn default() -> Self {
        Self::desk()
    }
}

/// Default target wingspan in metres (a small single-engine tourer).
pub const DEFAULT_WINGSPAN_M: f64 = 9.97;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncounterKind {
    /// Approaching target with modest image-plane drift.
    HeadOn,
    /// Zero image-plane motion; range closes over the sequence (the
    /// tail-chase geometry already played back in reverse).
    StationaryTailChase,
    /// Ground vehicles on a road row, with or without aircraft.
    GroundVehicle,
    /// Several simultaneous targets, typically one of them intermittent.
    MultiAircraft,
}

/// One true aircraft in an encounter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetSpec {
    #[serde(default = "default_wingspan")]
    pub wingspan_m: f64,
    pub initial_range_m: f64,
    /// Metres of range lost per second; positive means approaching.
    pub closure_rate_mps: f64,
    /// Image-plane drift (rows, cols) in px per frame.
    #[serde(default)]
    pub drift_px_per_frame: (f64, f64),
    /// Probability the target is visible in any given frame (1.0 = always).
    #[serde(default = "default_visibility")]
    pub visibility_prob: f64,
}

fn default_wingspan() -> f64 {
    DEFAULT_WINGSPAN_M
}

fn default_visibility() -> f64 {
    1.0
}

/// A bright rectangular road vehicle; never enters the aircraft mask.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VehicleSpec {
    pub size_px: f64,
    pub velocity_px_per_frame: f64,
    pub road_row: usize,
}

/// Aircraft-shaped clutter that flashes in and out; rendered into the image
/// only, never the mask or target truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistractorSpec {
    pub size_px: f64,
    pub visibility_prob: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncounterSpec {
    pub kind: EncounterKind,
    pub n_frames: usize,
    pub targets: Vec<TargetSpec>,
    #[serde(default)]
    pub vehicles: Vec<VehicleSpec>,
    #[serde(default)]
    pub distractors: Vec<DistractorSpec>,
    pub clutter_seed: u64,
}

/// Per-frame ground truth for one target. cx is the column, cy the row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetTruth {
    pub cx: f64,
    pub cy: f64,
    pub range_m: f64,
    pub visible: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VehicleTruth {
    pub cx: f64,
    pub cy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameTruth {
    pub frame: usize,
    pub targets: Vec<TargetTruth>,
    pub vehicles: Vec<VehicleTruth>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneFrame {
    pub image: GrayImage,
    pub mask: BinaryMask,
    pub truth: FrameTruth,
}

/// A generated encounter: frames, masks and truth, plus the camera and spec
/// that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSequence {
    pub camera: CameraModel,
    pub spec: EncounterSpec,
    pub frames: Vec<SceneFrame>,
}

/// Pinhole projection: apparent wingspan in pixels at the given range.
pub fn apparent_size(range_m: f64, wingspan_m: f64, focal_px: f64) -> Result<f64, SceneGenError> {
    if !(range_m > 0.0) {
        return Err(SceneGenError::RangeDomain { range: range_m });
    }
    Ok(focal_px * wingspan_m / range_m)
}

// ---------------------------------------------------------------------------
// Background
// ---------------------------------------------------------------------------

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn lattice(seed: u64, octave: u64, gx: i64, gy: i64) -> f64 {
    let h = splitmix64(splitmix64(splitmix64(seed ^ octave) ^ gx as u64) ^ gy as u64);
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

fn value_noise(seed: u64, octave: u64, x: f64, y: f64, cell: f64) -> f64 {
    let gx = (x / cell).floor();
    let gy = (y / cell).floor();
    let fx = smoothstep(x / cell - gx);
    let fy = smoothstep(y / cell - gy);
    let (gx, gy) = (gx as i64, gy as i64);
    let v00 = lattice(seed, octave, gx, gy);
    let v10 = lattice(seed, octave, gx + 1, gy);
    let v01 = lattice(seed, octave, gx, gy + 1);
    let v11 = lattice(seed, octave, gx + 1, gy + 1);
    let top = v00 + (v10 - v00) * fx;
    let bottom = v01 + (v11 - v01) * fx;
    top + (bottom - top) * fy
}

/// Row of the horizon line: everything above is sky.
pub fn horizon_row(camera: &CameraModel) -> usize {
    camera.height / 4
}

/// Deterministic clutter terrain below a lighter sky band. Ground is
/// multi-octave value noise spanning roughly gray levels 60-185; sky fades
/// from 215 toward 185 at the horizon.
pub fn render_background(camera: &CameraModel, seed: u64) -> GrayImage {
    let (w, h) = (camera.width, camera.height);
    let horizon = horizon_row(camera);
    let mut img = GrayImage::new(w, h);
    let octaves: [(f64, f64); 4] = [(32.0, 1.0), (16.0, 0.55), (8.0, 0.3), (4.0, 0.15)];
    let amp_sum: f64 = octaves.iter().map(|(_, a)| a).sum();
    for y in 0..h {
        for x in 0..w {
            let v = if y < horizon {
                let fade = y as f64 / horizon.max(1) as f64;
                let n = lattice(seed, 99, x as i64, y as i64) * 8.0 - 4.0;
                215.0 - 30.0 * fade + n
            } else {
                let mut acc = 0.0;
                for (i, (cell, amp)) in octaves.iter().enumerate() {
                    acc += amp * value_noise(seed, i as u64, x as f64, y as f64, *cell);
                }
                60.0 + 125.0 * (acc / amp_sum)
            };
            img.set(y, x, v.round().clamp(0.0, 255.0) as u8);
        }
    }
    img
}

// ---------------------------------------------------------------------------
// Stamps
// ---------------------------------------------------------------------------

/// Integer extents of the winged silhouette for a given apparent size. All
/// components grow monotonically with size, so the stamped pixel count does
/// too.
fn silhouette_extents(size_px: f64) -> (usize, usize, usize, usize) {
    let span = (size_px.round() as usize).max(1);
    let wing_thick = ((size_px / 5.0).round() as usize).max(1);
    let fus_len = ((size_px * 0.6).round() as usize).max(1);
    let fus_thick = ((size_px / 6.0).round() as usize).max(1);
    (span, wing_thick, fus_len, fus_thick)
}

fn stamp_silhouette<R: Rng>(
    image: &mut GrayImage,
    mut mask: Option<&mut BinaryMask>,
    centroid: (f64, f64),
    size_px: f64,
    rng: &mut R,
) -> bool {
    let (h, w) = (image.height(), image.width());
    let rc = centroid.0.round() as i64;
    let cc = centroid.1.round() as i64;
    if rc < 0 || cc < 0 || rc >= h as i64 || cc >= w as i64 {
        return false;
    }
    let (span, wing_thick, fus_len, fus_thick) = silhouette_extents(size_px);
    let covers = |dr: i64, dc: i64| -> bool {
        let in_bar = |extent: usize, d: i64| {
            let lo = -(((extent - 1) / 2) as i64);
            let hi = (extent - 1) as i64 + lo;
            d >= lo && d <= hi
        };
        (in_bar(wing_thick, dr) && in_bar(span, dc)) || (in_bar(fus_len, dr) && in_bar(fus_thick, dc))
    };
    let reach = span.max(fus_len) as i64;
    for dr in -reach..=reach {
        for dc in -reach..=reach {
            if !covers(dr, dc) {
                continue;
            }
            let (r, c) = (rc + dr, cc + dc);
            if r < 0 || c < 0 || r >= h as i64 || c >= w as i64 {
                continue;
            }
            let shade = 22 + rng.gen_range(0..18u8);
            image.set(r as usize, c as usize, shade);
            if let Some(m) = mask.as_deref_mut() {
                m.set(r as usize, c as usize, 1);
            }
        }
    }
    true
}

/// Stamps a dark winged silhouette scaled to `apparent_size_px` at the
/// centroid (row, col) and marks exactly the stamped pixels in the mask.
/// Sub-pixel sizes still darken one pixel. Returns false (and renders
/// nothing) when the centroid lies outside the image.
pub fn render_aircraft<R: Rng>(
    image: &mut GrayImage,
    mask: &mut BinaryMask,
    centroid: (f64, f64),
    apparent_size_px: f64,
    rng: &mut R,
) -> bool {
    stamp_silhouette(image, Some(mask), centroid, apparent_size_px, rng)
}

/// Stamps a bright rectangular vehicle at centroid (row, col). The aircraft
/// mask is never touched. Returns false if the centroid is off-image.
pub fn render_vehicle(image: &mut GrayImage, centroid: (f64, f64), size_px: f64) -> bool {
    let (h, w) = (image.height(), image.width());
    let rc = centroid.0.round() as i64;
    let cc = centroid.1.round() as i64;
    if rc < 0 || cc < 0 || rc >= h as i64 || cc >= w as i64 {
        return false;
    }
    let bw = (size_px.round() as i64).max(2);
    let bh = ((size_px / 2.0).round() as i64).max(1);
    for dr in -(bh - 1) / 2..=bh / 2 {
        for dc in -(bw - 1) / 2..=bw / 2 {
            let (r, c) = (rc + dr, cc + dc);
            if r < 0 || c < 0 || r >= h as i64 || c >= w as i64 {
                continue;
            }
            image.set(r as usize, c as usize, 228);
        }
    }
    true
}

// ---------------------------------------------------------------------------
// Encounter generation
// ---------------------------------------------------------------------------

fn validate_spec(spec: &EncounterSpec, camera: &CameraModel) -> Result<(), SceneGenError> {
    camera.validate()?;
    if spec.n_frames == 0 {
        return Err(SceneGenError::BadSpec("n_frames must be >= 1".into()));
    }
    let duration = (spec.n_frames - 1) as f64 / camera.frame_rate_hz;
    for (i, t) in spec.targets.iter().enumerate() {
        if !(t.initial_range_m > 0.0) {
            return Err(SceneGenError::BadSpec(format!(
                "target {i}: initial range must be > 0, got {}",
                t.initial_range_m
            )));
        }
        let final_range = t.initial_range_m - t.closure_rate_mps * duration;
        if !(final_range > 0.0) {
            return Err(SceneGenError::BadSpec(format!(
                "target {i}: range reaches {final_range} m before the sequence ends"
            )));
        }
        if !(0.0..=1.0).contains(&t.visibility_prob) {
            return Err(SceneGenError::BadSpec(format!(
                "target {i}: visibility_prob must lie in [0, 1]"
            )));
        }
        match spec.kind {
            EncounterKind::HeadOn => {
                if !(t.closure_rate_mps > 0.0) {
                    return Err(SceneGenError::BadSpec(format!(
                        "head-on target {i} must have positive closure, got {}",
                        t.closure_rate_mps
                    )));
                }
            }
            EncounterKind::StationaryTailChase => {
                if t.drift_px_per_frame != (0.0, 0.0) {
                    return Err(SceneGenError::BadSpec(format!(
                        "stationary target {i} must have zero drift, got {:?}",
                        t.drift_px_per_frame
                    )));
                }
            }
            _ => {}
        }
    }
    for (i, v) in spec.vehicles.iter().enumerate() {
        if v.road_row >= camera.height {
            return Err(SceneGenError::BadSpec(format!(
                "vehicle {i}: road row {} outside {} rows",
                v.road_row, camera.height
            )));
        }
    }
    for (i, d) in spec.distractors.iter().enumerate() {
        if !(0.0..=1.0).contains(&d.visibility_prob) {
            return Err(SceneGenError::BadSpec(format!(
                "distractor {i}: visibility_prob must lie in [0, 1]"
            )));
        }
    }
    Ok(())
}

/// Renders a full encounter: the clutter background is fixed per sequence
/// (keyed by `clutter_seed`), targets advance by closure and drift, vehicles
/// run along their road row, distractors flash per their visibility. All
/// stochastic choices derive from `seed`.
pub fn generate_encounter(
    spec: &EncounterSpec,
    camera: &CameraModel,
    seed: u64,
) -> Result<LabeledSequence, SceneGenError> {
    validate_spec(spec, camera)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (camera.width as f64, camera.height as f64);
    let horizon = horizon_row(camera) as f64;

    // start positions in the below-horizon band, columns spread so multiple
    // targets stay separated
    let k = spec.targets.len();
    let starts: Vec<(f64, f64)> = (0..k)
        .map(|i| {
            let row = rng.gen_range(horizon + 8.0..h * 0.72);
            let col = w * (i + 1) as f64 / (k + 1) as f64 + rng.gen_range(-w / 16.0..w / 16.0);
            (row, col)
        })
        .collect();

    let vehicle_starts: Vec<f64> = spec
        .vehicles
        .iter()
        .map(|_| rng.gen_range(0.0..w))
        .collect();

    // distractors avoid every target's path by a wide margin
    let min_sep = 24.0;
    let n_frames = spec.n_frames as f64;
    let mut distractor_pos: Vec<(f64, f64)> = Vec::with_capacity(spec.distractors.len());
    for _ in &spec.distractors {
        let mut placed = (horizon + 10.0, w * 0.5);
        for _attempt in 0..200 {
            let cand = (
                rng.gen_range(horizon + 6.0..h - 6.0),
                rng.gen_range(6.0..w - 6.0),
            );
            let clear = spec.targets.iter().zip(&starts).all(|(t, s)| {
                (0..spec.n_frames.min(512)).step_by(1).all(|f| {
                    let fy = s.0 + t.drift_px_per_frame.0 * f as f64;
                    let fx = s.1 + t.drift_px_per_frame.1 * f as f64;
                    (fy - cand.0).abs().max((fx - cand.1).abs()) > min_sep
                })
            }) && distractor_pos
                .iter()
                .all(|p| (p.0 - cand.0).abs().max((p.1 - cand.1).abs()) > min_sep);
            if clear {
                placed = cand;
                break;
            }
        }
        distractor_pos.push(placed);
    }
    let _ = n_frames;

    let background = render_background(camera, spec.clutter_seed);
    let mut frames = Vec::with_capacity(spec.n_frames);
    for f in 0..spec.n_frames {
        let mut image = background.clone();
        let mut mask = BinaryMask::new(camera.width, camera.height);

        let vehicles: Vec<VehicleTruth> = spec
            .vehicles
            .iter()
            .zip(&vehicle_starts)
            .map(|(v, &start)| {
                let cx = start + v.velocity_px_per_frame * f as f64;
                let cy = v.road_row as f64;
                render_vehicle(&mut image, (cy, cx), v.size_px);
                VehicleTruth { cx, cy }
            })
            .collect();

        for (d, &(dy, dx)) in spec.distractors.iter().zip(&distractor_pos) {
            let flash = rng.gen::<f64>() < d.visibility_prob;
            if flash {
                stamp_silhouette(&mut image, None, (dy, dx), d.size_px, &mut rng);
            }
        }

        let mut targets = Vec::with_capacity(k);
        for (t, &(sy, sx)) in spec.targets.iter().zip(&starts) {
            let range_m = t.initial_range_m - t.closure_rate_mps * f as f64 / camera.frame_rate_hz;
            let cy = sy + t.drift_px_per_frame.0 * f as f64;
            let cx = sx + t.drift_px_per_frame.1 * f as f64;
            let size = apparent_size(range_m, t.wingspan_m, camera.focal_px)?;
            let wants_visible = t.visibility_prob >= 1.0 || rng.gen::<f64>() < t.visibility_prob;
            let rendered = if wants_visible {
                render_aircraft(&mut image, &mut mask, (cy, cx), size, &mut rng)
            } else {
                false
            };
            targets.push(TargetTruth {
                cx,
                cy,
                range_m,
                visible: rendered,
            });
        }

        frames.push(SceneFrame {
            image,
            mask,
            truth: FrameTruth {
                frame: f,
                targets,
                vehicles,
            },
        });
    }
    Ok(LabeledSequence {
        camera: camera.clone(),
        spec: spec.clone(),
        frames,
    })
}

// ---------------------------------------------------------------------------
// Sequence directory I/O
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct TruthFile {
    camera: CameraModel,
    spec: EncounterSpec,
    frames: Vec<FrameTruth>,
}

pub const TRUTH_FILE: &str = "truth.json";

pub fn frame_image_name(frame: usize) -> String {
    format!("frame_{frame:05}.pgm")
}

pub fn frame_mask_name(frame: usize) -> String {
    format!("frame_{frame:05}.mask.pgm")
}

/// Writes frames as PGM pairs plus `truth.json`.
pub fn write_sequence(seq: &LabeledSequence, dir: &Path) -> Result<(), SceneGenError> {
    std::fs::create_dir_all(dir).map_err(|source| SceneGenError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    for (i, frame) in seq.frames.iter().enumerate() {
        pgm::write_gray(&dir.join(frame_image_name(i)), &frame.image)?;
        pgm::write_mask(&dir.join(frame_mask_name(i)), &frame.mask)?;
    }
    let truth = TruthFile {
        camera: seq.camera.clone(),
        spec: seq.spec.clone(),
        frames: seq.frames.iter().map(|f| f.truth.clone()).collect(),
    };
    let path = dir.join(TRUTH_FILE);
    let bytes = serde_json::to_vec_pretty(&truth).map_err(|source| SceneGenError::Json {
        path: path.clone(),
        source,
    })?;
    pgm::atomic_write(&path, &bytes)?;
    Ok(())
}

/// Reads a sequence directory back; exact inverse of [`write_sequence`].
pub fn read_sequence(dir: &Path) -> Result<LabeledSequence, SceneGenError> {
    let path = dir.join(TRUTH_FILE);
    let bytes = std::fs::read(&path).map_err(|source| SceneGenError::Io {
        path: path.clone(),
        source,
    })?;
    let truth: TruthFile =
        serde_json::from_slice(&bytes).map_err(|source| SceneGenError::Json { path, source })?;
    let n_images = std::fs::read_dir(dir)
        .map_err(|source| SceneGenError::Io {
            path: dir.to_path_buf(),
            source,
        })?
        .filter_map(|e| e.ok())
        .filter(|e| {
            let name = e.file_name();
            let name = name.to_string_lossy();
            name.starts_with("frame_") && name.ends_with(".pgm") && !name.ends_with(".mask.pgm")
        })
        .count();
    if n_images != truth.frames.len() {
        return Err(SceneGenError::FrameCount {
            dir: dir.to_path_buf(),
            expected: truth.frames.len(),
            actual: n_images,
        });
    }
    let mut frames = Vec::with_capacity(truth.frames.len());
    for (i, ft) in truth.frames.into_iter().enumerate() {
        let image = pgm::read_gray(&dir.join(frame_image_name(i)))?;
        let mask = pgm::read_mask(&dir.join(frame_mask_name(i)))?;
        frames.push(SceneFrame {
            image,
            mask,
            truth: ft,
        });
    }
    Ok(LabeledSequence {
        camera: truth.camera,
        spec: truth.spec,
        frames,
    })
}
