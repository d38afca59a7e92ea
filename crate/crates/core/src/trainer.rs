//! Training: labelled samples, aircraft-centred random cropping, flip and
//! translation augmentation, frequency-balanced class weights and the SGD
//! loop. Also dataset directory I/O (PGM pairs plus a JSON manifest) and a
//! finite-difference gradient checker.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{BinaryMask, GrayImage};
use crate::pgm::{self, PgmError};
use crate::segnet::{images_to_batch, Network, SegnetError};
use crate::tensor::{sgd_momentum_step, weighted_cross_entropy, Scalar, SgdState, TensorError};

#[derive(Debug, Error)]
pub enum TrainerError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Segnet(#[from] SegnetError),
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
    #[error("invalid training config: {0}")]
    BadConfig(String),
    #[error("dataset has no {class} pixels; class weights are undefined")]
    DegenerateDataset { class: &'static str },
    #[error("aircraft bounding box {bh}x{bw} exceeds crop size {crop}")]
    OversizeTarget { bh: usize, bw: usize, crop: usize },
    #[error("sample has no aircraft pixels to crop around")]
    EmptyTarget,
    #[error("crop size {crop} exceeds image {h}x{w}")]
    CropExceedsImage { crop: usize, h: usize, w: usize },
    #[error("training diverged: non-finite loss {loss} at epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize, loss: f64 },
    #[error("gradient check input {h}x{w} exceeds the 16x16 tractability bound")]
    CheckInputTooLarge { h: usize, w: usize },
}

/// One grayscale frame with its aircraft mask.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub image: GrayImage,
    pub mask: BinaryMask,
    /// Originating stem or frame id, if any.
    pub source: Option<String>,
}

/// Optimizer and augmentation settings. Defaults are desk scale: crop 64
/// keeps a full run in minutes. `paper_scale()` switches to 200x200 crops.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learn_rate: f64,
    pub momentum: f64,
    pub l2: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub crop_size: usize,
    pub translate_px: usize,
    pub flip_prob: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learn_rate: 0.001,
            momentum: 0.9,
            l2: 0.0005,
            max_epochs: 200,
            batch_size: 8,
            crop_size: 64,
            translate_px: 10,
            flip_prob: 0.5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn paper_scale() -> Self {
        Self {
            crop_size: 200,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainerError> {
        if self.learn_rate < 0.0 || !self.learn_rate.is_finite() {
            return Err(TrainerError::BadConfig(format!(
                "learn_rate must be finite and >= 0, got {}",
                self.learn_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(TrainerError::BadConfig(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.l2 < 0.0 {
            return Err(TrainerError::BadConfig(format!("l2 must be >= 0, got {}", self.l2)));
        }
        if self.max_epochs == 0 {
            return Err(TrainerError::BadConfig("max_epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainerError::BadConfig("batch_size must be >= 1".into()));
        }
        if self.crop_size == 0 || self.crop_size % 8 != 0 {
            return Err(TrainerError::BadConfig(format!(
                "crop_size must be a positive multiple of 8, got {}",
                self.crop_size
            )));
        }
        if self.translate_px >= self.crop_size / 2 {
            return Err(TrainerError::BadConfig(format!(
                "translate_px {} must be < crop_size/2 = {}",
                self.translate_px,
                self.crop_size / 2
            )));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(TrainerError::BadConfig(format!(
                "flip_prob must lie in [0, 1], got {}",
                self.flip_prob
            )));
        }
        Ok(())
    }
}

/// Frequency-balancing class weights over every mask pixel in the dataset:
/// `w_c = P_total / (2 * P_c)`, so each class contributes half the loss mass.
/// Returns (w_background, w_aircraft).
pub fn compute_class_weights(samples: &[LabeledSample]) -> Result<(f64, f64), TrainerError> {
    let mut aircraft = 0usize;
    let mut total = 0usize;
    for s in samples {
        aircraft += s.mask.count_ones();
        total += s.mask.data().len();
    }
    let background = total - aircraft;
    if aircraft == 0 {
        return Err(TrainerError::DegenerateDataset { class: "aircraft" });
    }
    if background == 0 {
        return Err(TrainerError::DegenerateDataset { class: "background" });
    }
    let t = total as f64;
    Ok((t / (2.0 * background as f64), t / (2.0 * aircraft as f64)))
}

fn sub_grid<F: Fn(usize, usize) -> u8>(size: usize, get: F) -> Vec<u8> {
    let mut out = Vec::with_capacity(size * size);
    for r in 0..size {
        for c in 0..size {
            out.push(get(r, c));
        }
    }
    out
}

/// Cuts a crop_size x crop_size window chosen uniformly among all window
/// positions that fully contain the aircraft bounding box, so the target
/// lands at varying offsets inside the crop.
pub fn crop_around_aircraft<R: Rng>(
    sample: &LabeledSample,
    crop_size: usize,
    rng: &mut R,
) -> Result<LabeledSample, TrainerError> {
    let (h, w) = (sample.image.height(), sample.image.width());
    if crop_size > h || crop_size > w {
        return Err(TrainerError::CropExceedsImage { crop: crop_size, h, w });
    }
    let (r0, c0, r1, c1) = sample.mask.bounding_box().ok_or(TrainerError::EmptyTarget)?;
    let (bh, bw) = (r1 - r0 + 1, c1 - c0 + 1);
    if bh > crop_size || bw > crop_size {
        return Err(TrainerError::OversizeTarget { bh, bw, crop: crop_size });
    }
    let top_min = (r1 + 1).saturating_sub(crop_size);
    let top_max = r0.min(h - crop_size);
    let left_min = (c1 + 1).saturating_sub(crop_size);
    let left_max = c0.min(w - crop_size);
    let top = rng.gen_range(top_min..=top_max);
    let left = rng.gen_range(left_min..=left_max);
    let image = GrayImage::from_raw(
        crop_size,
        crop_size,
        sub_grid(crop_size, |r, c| sample.image.get(top + r, left + c)),
    )
    .expect("crop dims");
    let mask = BinaryMask::from_raw(
        crop_size,
        crop_size,
        sub_grid(crop_size, |r, c| sample.mask.get(top + r, left + c)),
    )
    .expect("crop dims");
    Ok(LabeledSample {
        image,
        mask,
        source: sample.source.clone(),
    })
}

/// The geometric transform an augmentation applied: horizontal flip first,
/// then translation by (dx columns, dy rows) with zero fill.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Augmentation {
    pub flipped: bool,
    pub dx: i64,
    pub dy: i64,
}

/// Applies a recorded transform to image and mask identically.
pub fn apply_augmentation(sample: &LabeledSample, aug: &Augmentation) -> LabeledSample {
    let (h, w) = (sample.image.height(), sample.image.width());
    let src_col = |c: usize| -> usize {
        if aug.flipped {
            w - 1 - c
        } else {
            c
        }
    };
    let fetch = |grid: &dyn Fn(usize, usize) -> u8, r: usize, c: usize| -> u8 {
        let sr = r as i64 - aug.dy;
        let sc = c as i64 - aug.dx;
        if sr < 0 || sc < 0 || sr >= h as i64 || sc >= w as i64 {
            0
        } else {
            grid(sr as usize, src_col(sc as usize))
        }
    };
    let img_get = |r: usize, c: usize| sample.image.get(r, c);
    let mask_get = |r: usize, c: usize| sample.mask.get(r, c);
    let mut image_data = Vec::with_capacity(w * h);
    let mut mask_data = Vec::with_capacity(w * h);
    for r in 0..h {
        for c in 0..w {
            image_data.push(fetch(&img_get, r, c));
            mask_data.push(fetch(&mask_get, r, c));
        }
    }
    LabeledSample {
        image: GrayImage::from_raw(w, h, image_data).expect("dims"),
        mask: BinaryMask::from_raw(w, h, mask_data).expect("dims"),
        source: sample.source.clone(),
    }
}

/// Draws a random horizontal flip and an integer translation in
/// [-translate_px, +translate_px] per axis, applies them to image and mask
/// identically, and returns the transformed sample with the drawn transform.
pub fn augment<R: Rng>(
    sample: &LabeledSample,
    config: &TrainConfig,
    rng: &mut R,
) -> (LabeledSample, Augmentation) {
    let flipped = rng.gen::<f64>() < config.flip_prob;
    let t = config.translate_px as i64;
    let dx = rng.gen_range(-t..=t);
    let dy = rng.gen_range(-t..=t);
    let aug = Augmentation { flipped, dx, dy };
    (apply_augmentation(sample, &aug), aug)
}

/// Applies one optimizer step to every network parameter. Conv weights see
/// the configured L2; biases, gamma and beta are exempt.
pub fn apply_sgd<T: Scalar>(
    net: &mut Network<T>,
    grads: &crate::segnet::NetworkGrads<T>,
    state: &mut SgdState<T>,
) -> Result<(), TrainerError> {
    let params = net.params_mut();
    let gslices = grads.param_slices();
    assert_eq!(params.len(), gslices.len(), "grads must align with params");
    assert_eq!(params.len(), state.velocities.len(), "optimizer state misaligned");
    for ((param, decay), (g, v)) in params
        .into_iter()
        .zip(gslices.into_iter().zip(state.velocities.iter_mut()))
    {
        let l2 = if decay { state.l2 } else { T::zero() };
        sgd_momentum_step(param, g, v, state.learn_rate, state.momentum, l2)?;
    }
    Ok(())
}

/// Runs `max_epochs` of shuffled mini-batch SGD. Every sample is re-cropped
/// around its aircraft and re-augmented each epoch; shuffling, cropping and
/// augmentation all draw from one stream seeded by `config.seed`, so runs
/// with equal seeds are bit-identical. Returns the per-epoch mean loss.
pub fn train(
    net: &mut Network<f32>,
    samples: &[LabeledSample],
    config: &TrainConfig,
) -> Result<Vec<f64>, TrainerError> {
    config.validate()?;
    if samples.is_empty() {
        return Err(TrainerError::BadConfig("dataset is empty".into()));
    }
    let (wb, wa) = compute_class_weights(samples)?;
    let class_weights = [wb as f32, wa as f32];
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    // learn_rate 0 freezes the optimizer entirely
    let mut sgd = if config.learn_rate > 0.0 {
        Some(SgdState::new(
            &net.param_lens(),
            config.learn_rate as f32,
            config.momentum as f32,
            config.l2 as f32,
        )?)
    } else {
        None
    };
    net.set_training(true);
    let mut history = Vec::with_capacity(config.max_epochs);
    for epoch in 0..config.max_epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        let mut n_sum = 0usize;
        for (batch_index, chunk) in order.chunks(config.batch_size).enumerate() {
            let mut images = Vec::with_capacity(chunk.len());
            let mut labels = Vec::with_capacity(chunk.len() * config.crop_size * config.crop_size);
            for &i in chunk {
                let cropped = crop_around_aircraft(&samples[i], config.crop_size, &mut rng)?;
                let (augmented, _) = augment(&cropped, config, &mut rng);
                labels.extend_from_slice(augmented.mask.data());
                images.push(augmented.image);
            }
            let refs: Vec<&GrayImage> = images.iter().collect();
            let input = images_to_batch::<f32>(&refs)?;
            let probs = net.forward(&input)?;
            let (loss, grad_logits) = weighted_cross_entropy(&probs, &labels, class_weights)?;
            let loss = loss as f64;
            if !loss.is_finite() {
                net.set_training(false);
                return Err(TrainerError::Divergence {
                    epoch: epoch + 1,
                    batch: batch_index + 1,
                    loss,
                });
            }
            if let Some(sgd) = sgd.as_mut() {
                let grads = net.backward(&grad_logits)?;
                apply_sgd(net, &grads, sgd)?;
            }
            loss_sum += loss * chunk.len() as f64;
            n_sum += chunk.len();
        }
        history.push(loss_sum / n_sum as f64);
    }
    net.set_training(false);
    Ok(history)
}

/// Compares analytic whole-network gradients against central finite
/// differences on parameters sampled from every block, and returns the worst
/// relative error. The loss is the class-weighted cross-entropy on the given
/// sample. Deterministic: the parameter sample is internally seeded.
pub fn gradient_check<T: Scalar>(
    net: &Network<T>,
    sample: &LabeledSample,
    n_params_per_layer: usize,
    eps: f64,
) -> Result<f64, TrainerError> {
    let (h, w) = (sample.image.height(), sample.image.width());
    if h > 16 || w > 16 {
        return Err(TrainerError::CheckInputTooLarge { h, w });
    }
    let input = crate::segnet::image_to_input::<T>(&sample.image);
    let labels = sample.mask.data().to_vec();
    let class_weights = [crate::tensor::scalar::<T>(1.0), crate::tensor::scalar::<T>(3.0)];

    let loss_of = |net: &Network<T>| -> Result<f64, TrainerError> {
        let mut n = net.clone();
        n.set_training(true);
        let probs = n.forward(&input)?;
        let (loss, _) = weighted_cross_entropy(&probs, &labels, class_weights)?;
        Ok(loss.to_f64().unwrap())
    };

    // analytic gradients
    let mut work = net.clone();
    work.set_training(true);
    let probs = work.forward(&input)?;
    let (_, grad_logits) = weighted_cross_entropy(&probs, &labels, class_weights)?;
    let grads = work.backward(&grad_logits)?;
    let grad_slices = grads.param_slices();

    // sample indices: per block a couple from each small buffer, the rest
    // from the conv weights
    let lens = net.param_lens();
    let mut picks: Vec<(usize, usize)> = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_c0de);
    for block in 0..lens.len() / 4 {
        let weight_slot = block * 4;
        let small = 2usize;
        let mut from_weights = n_params_per_layer;
        for slot in 1..4 {
            let len = lens[weight_slot + slot];
            let take = small.min(len);
            from_weights = from_weights.saturating_sub(take);
            for _ in 0..take {
                picks.push((weight_slot + slot, rng.gen_range(0..len)));
            }
        }
        let wlen = lens[weight_slot];
        for _ in 0..from_weights.max(1) {
            picks.push((weight_slot, rng.gen_range(0..wlen)));
        }
    }

    // gradients beneath sqrt(machine epsilon) cannot be resolved by central
    // differences at matching precision, so they don't enter the error
    let floor = T::epsilon().to_f64().unwrap().sqrt();
    let mut worst = 0.0f64;
    for (slot, index) in picks {
        let analytic = grad_slices[slot][index].to_f64().unwrap();
        let nudge = |delta: f64| -> Result<f64, TrainerError> {
            let mut n = net.clone();
            {
                let mut params = n.params_mut();
                let v = &mut params[slot].0[index];
                *v = *v + crate::tensor::scalar::<T>(delta);
            }
            loss_of(&n)
        };
        let numeric = (nudge(eps)? - nudge(-eps)?) / (2.0 * eps);
        let denom = analytic.abs().max(numeric.abs());
        if denom >= floor {
            worst = worst.max((analytic - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

// ---------------------------------------------------------------------------
// Dataset directory I/O
// ---------------------------------------------------------------------------

/// Manifest entry: a sample stem (files `<stem>.pgm` and `<stem>.mask.pgm`),
/// its split tag, and free-form per-frame metadata.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    pub stem: String,
    #[serde(default = "default_split")]
    pub split: String,
    #[serde(default)]
    pub meta: serde_json::Value,
}

fn default_split() -> String {
    "train".to_string()
}

#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct DatasetManifest {
    pub samples: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest, TrainerError> {
    let path = dir.join(MANIFEST_FILE);
    let bytes = std::fs::read(&path).map_err(|source| TrainerError::Io {
        path: path.clone(),
        source,
    })?;
    serde_json::from_slice(&bytes).map_err(|source| TrainerError::Json { path, source })
}

pub fn write_manifest(dir: &Path, manifest: &DatasetManifest) -> Result<(), TrainerError> {
    let path = dir.join(MANIFEST_FILE);
    let bytes = serde_json::to_vec_pretty(manifest).map_err(|source| TrainerError::Json {
        path: path.clone(),
        source,
    })?;
    pgm::atomic_write(&path, &bytes)?;
    Ok(())
}

/// Loads every sample listed in the directory's manifest.
pub fn load_dataset(dir: &Path) -> Result<Vec<LabeledSample>, TrainerError> {
    let manifest = read_manifest(dir)?;
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for entry in &manifest.samples {
        let image = pgm::read_gray(&dir.join(format!("{}.pgm", entry.stem)))?;
        let mask = pgm::read_mask(&dir.join(format!("{}.mask.pgm", entry.stem)))?;
        samples.push(LabeledSample {
            image,
            mask,
            source: Some(entry.stem.clone()),
        });
    }
    Ok(samples)
}

/// Writes samples and the matching manifest into `dir`.
pub fn save_dataset(
    dir: &Path,
    entries: &[(ManifestEntry, LabeledSample)],
) -> Result<(), TrainerError> {
    std::fs::create_dir_all(dir).map_err(|source| TrainerError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    for (entry, sample) in entries {
        pgm::write_gray(&dir.join(format!("{}.pgm", entry.stem)), &sample.image)?;
        pgm::write_mask(&dir.join(format!("{}.mask.pgm", entry.stem)), &sample.mask)?;
    }
    write_manifest(
        dir,
        &DatasetManifest {
            samples: entries.iter().map(|(e, _)| e.clone()).collect(),
        },
    )
}

/// Loss history as `epoch,loss` CSV, epochs 1-based.
pub fn write_loss_csv(path: &Path, history: &[f64]) -> Result<(), TrainerError> {
    let mut out = String::from("epoch,loss\n");
    for (i, loss) in history.iter().enumerate() {
        out.push_str(&format!("{},{}\n", i + 1, loss));
    }
    pgm::atomic_write(path, out.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segnet::{build_network, NetworkConfig};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Square sample with a rectangular aircraft blob.
    fn blob_sample(size: usize, r0: usize, c0: usize, bh: usize, bw: usize) -> LabeledSample {
        let mut image = GrayImage::new(size, size);
        let mut mask = BinaryMask::new(size, size);
        for r in 0..size {
            for c in 0..size {
                image.set(r, c, ((r * 7 + c * 13) % 200) as u8 + 30);
            }
        }
        for r in r0..r0 + bh {
            for c in c0..c0 + bw {
                image.set(r, c, 10);
                mask.set(r, c, 1);
            }
        }
        LabeledSample {
            image,
            mask,
            source: None,
        }
    }

    fn small_net(filters: usize, seed: u64) -> Network<f32> {
        let cfg = NetworkConfig {
            filters_per_layer: filters,
            ..NetworkConfig::default()
        };
        build_network(&cfg, &mut rng(seed)).unwrap()
    }

    fn tiny_train_config() -> TrainConfig {
        TrainConfig {
            crop_size: 16,
            translate_px: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn class_weights_balance_point() {
        let mut mask = BinaryMask::new(4, 4);
        for r in 0..4 {
            for c in 0..2 {
                mask.set(r, c, 1);
            }
        }
        let s = LabeledSample {
            image: GrayImage::new(4, 4),
            mask,
            source: None,
        };
        let (wb, wa) = compute_class_weights(&[s]).unwrap();
        assert_eq!((wb, wa), (1.0, 1.0));
    }

    #[test]
    fn class_weights_formula() {
        // 100x100 = 10000 pixels, 100 aircraft
        let s = blob_sample(100, 10, 10, 10, 10);
        let (wb, wa) = compute_class_weights(&[s]).unwrap();
        assert!((wb - 10000.0 / 19800.0).abs() < 1e-12);
        assert!((wa - 50.0).abs() < 1e-12);
    }

    #[test]
    fn class_weights_identity_holds() {
        let mut r = rng(2);
        for _ in 0..10 {
            let mut samples = Vec::new();
            for _ in 0..3 {
                let size = 16;
                let bh = r.gen_range(1..6);
                let bw = r.gen_range(1..6);
                let r0 = r.gen_range(0..size - bh);
                let c0 = r.gen_range(0..size - bw);
                samples.push(blob_sample(size, r0, c0, bh, bw));
            }
            let (wb, wa) = compute_class_weights(&samples).unwrap();
            let pa: usize = samples.iter().map(|s| s.mask.count_ones()).sum();
            let pt: usize = samples.iter().map(|s| s.mask.data().len()).sum();
            let pb = pt - pa;
            let recon = wb * pb as f64 + wa * pa as f64;
            assert!((recon - pt as f64).abs() / (pt as f64) < 1e-6);
        }
    }

    #[test]
    fn class_weights_degenerate_dataset() {
        let s = LabeledSample {
            image: GrayImage::new(4, 4),
            mask: BinaryMask::new(4, 4),
            source: None,
        };
        assert!(matches!(
            compute_class_weights(&[s]),
            Err(TrainerError::DegenerateDataset { class: "aircraft" })
        ));
    }

    #[test]
    fn crop_forced_placement_is_deterministic() {
        // bbox exactly crop-sized: a unique valid window
        let s = blob_sample(10, 2, 3, 4, 4);
        let a = crop_around_aircraft(&s, 4, &mut rng(1)).unwrap();
        let b = crop_around_aircraft(&s, 4, &mut rng(999)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.mask.count_ones(), 16);
        assert_eq!(a.image.get(0, 0), 10);
    }

    #[test]
    fn crop_covers_multiple_offsets() {
        let s = blob_sample(128, 64, 64, 1, 1);
        let mut seen = std::collections::HashSet::new();
        let mut r = rng(3);
        for _ in 0..200 {
            let crop = crop_around_aircraft(&s, 64, &mut r).unwrap();
            let (r0, c0, _, _) = crop.mask.bounding_box().unwrap();
            seen.insert((r0, c0));
        }
        assert!(seen.len() > 10, "only {} distinct aircraft offsets", seen.len());
    }

    #[test]
    fn crop_preserves_aircraft_pixel_sum() {
        let s = blob_sample(64, 20, 30, 3, 5);
        let mut r = rng(5);
        for _ in 0..50 {
            let crop = crop_around_aircraft(&s, 32, &mut r).unwrap();
            assert_eq!(crop.mask.count_ones(), s.mask.count_ones());
        }
    }

    #[test]
    fn crop_errors() {
        let s = blob_sample(32, 4, 4, 20, 20);
        assert!(matches!(
            crop_around_aircraft(&s, 16, &mut rng(0)),
            Err(TrainerError::OversizeTarget { .. })
        ));
        let empty = LabeledSample {
            image: GrayImage::new(32, 32),
            mask: BinaryMask::new(32, 32),
            source: None,
        };
        assert!(matches!(
            crop_around_aircraft(&empty, 16, &mut rng(0)),
            Err(TrainerError::EmptyTarget)
        ));
        let s = blob_sample(8, 2, 2, 2, 2);
        assert!(matches!(
            crop_around_aircraft(&s, 16, &mut rng(0)),
            Err(TrainerError::CropExceedsImage { .. })
        ));
    }

    #[test]
    fn augment_identity_transform() {
        let s = blob_sample(16, 4, 5, 3, 3);
        let out = apply_augmentation(
            &s,
            &Augmentation {
                flipped: false,
                dx: 0,
                dy: 0,
            },
        );
        assert_eq!(out, s);
    }

    #[test]
    fn augment_double_flip_is_identity() {
        let s = blob_sample(16, 4, 5, 3, 3);
        let flip = Augmentation {
            flipped: true,
            dx: 0,
            dy: 0,
        };
        let twice = apply_augmentation(&apply_augmentation(&s, &flip), &flip);
        assert_eq!(twice, s);
    }

    #[test]
    fn augment_translation_moves_centroid_exactly() {
        let s = blob_sample(32, 12, 14, 3, 3);
        let (r_before, c_before) = s.mask.centroid().unwrap();
        let out = apply_augmentation(
            &s,
            &Augmentation {
                flipped: false,
                dx: 3,
                dy: -2,
            },
        );
        let (r_after, c_after) = out.mask.centroid().unwrap();
        assert_eq!(out.mask.count_ones(), s.mask.count_ones(), "no pixels lost");
        assert!((c_after - c_before - 3.0).abs() < 1e-12);
        assert!((r_after - r_before + 2.0).abs() < 1e-12);
    }

    #[test]
    fn augment_applies_same_transform_to_image_and_mask() {
        let s = blob_sample(16, 4, 5, 3, 4);
        let cfg = tiny_train_config();
        let mut r = rng(11);
        for _ in 0..20 {
            let (augmented, rec) = augment(&s, &cfg, &mut r);
            let replay = apply_augmentation(&s, &rec);
            assert_eq!(augmented.mask, replay.mask);
            assert_eq!(augmented.image, replay.image);
        }
    }

    #[test]
    fn train_with_zero_learn_rate_freezes_parameters() {
        let mut net = small_net(4, 7);
        let reference = small_net(4, 7);
        let samples = vec![blob_sample(16, 5, 5, 3, 3)];
        let cfg = TrainConfig {
            learn_rate: 0.0,
            max_epochs: 1,
            ..tiny_train_config()
        };
        let history = train(&mut net, &samples, &cfg).unwrap();
        assert_eq!(history.len(), 1);
        for (a, b) in net.encoders().iter().zip(reference.encoders()) {
            assert_eq!(a.weights, b.weights);
            assert_eq!(a.bias, b.bias);
            assert_eq!(a.bn.gamma, b.bn.gamma);
        }
    }

    #[test]
    fn train_is_bit_deterministic_per_seed() {
        let samples: Vec<LabeledSample> = (0..6)
            .map(|i| blob_sample(16, 3 + i % 5, 4 + i % 4, 2, 3))
            .collect();
        let cfg = TrainConfig {
            max_epochs: 3,
            batch_size: 4,
            seed: 42,
            ..tiny_train_config()
        };
        let mut net1 = small_net(4, 9);
        let h1 = train(&mut net1, &samples, &cfg).unwrap();
        let mut net2 = small_net(4, 9);
        let h2 = train(&mut net2, &samples, &cfg).unwrap();
        assert_eq!(h1.len(), 3);
        for (a, b) in h1.iter().zip(&h2) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn train_reports_divergence() {
        let mut net = small_net(4, 13);
        let samples = vec![blob_sample(16, 5, 5, 3, 3)];
        let cfg = TrainConfig {
            learn_rate: 1e38,
            max_epochs: 50,
            ..tiny_train_config()
        };
        match train(&mut net, &samples, &cfg) {
            Err(TrainerError::Divergence { epoch, batch, .. }) => {
                assert!(epoch >= 1 && batch >= 1);
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn twenty_epochs_reduce_loss_on_small_synthetic_set() {
        let mut r = rng(17);
        let samples: Vec<LabeledSample> = (0..50)
            .map(|_| {
                let bh = r.gen_range(2..4);
                let bw = r.gen_range(2..5);
                let r0 = r.gen_range(0..16 - bh);
                let c0 = r.gen_range(0..16 - bw);
                blob_sample(16, r0, c0, bh, bw)
            })
            .collect();
        let mut net = small_net(8, 19);
        let cfg = TrainConfig {
            max_epochs: 20,
            seed: 5,
            ..tiny_train_config()
        };
        let history = train(&mut net, &samples, &cfg).unwrap();
        assert!(
            history[19] < history[0],
            "no learning: first {} last {}",
            history[0],
            history[19]
        );
    }

    #[test]
    fn gradient_check_fresh_network_f64() {
        let net = small_net(4, 23).cast::<f64>();
        let sample = blob_sample(8, 2, 2, 2, 3);
        let err = gradient_check(&net, &sample, 8, 1e-4).unwrap();
        assert!(err < 1e-3, "max relative error {err}");
    }

    #[test]
    fn gradient_check_large_eps_inflates_error() {
        let net = small_net(4, 29).cast::<f64>();
        let sample = blob_sample(8, 3, 3, 2, 2);
        let fine = gradient_check(&net, &sample, 6, 1e-4).unwrap();
        let coarse = gradient_check(&net, &sample, 6, 0.1).unwrap();
        assert!(fine < coarse, "eps=1e-4 err {fine} vs eps=0.1 err {coarse}");
    }

    #[test]
    fn gradient_check_rejects_large_inputs() {
        let net = small_net(4, 31).cast::<f64>();
        let sample = blob_sample(24, 4, 4, 3, 3);
        assert!(matches!(
            gradient_check(&net, &sample, 4, 1e-4),
            Err(TrainerError::CheckInputTooLarge { .. })
        ));
    }

    #[test]
    fn dead_signal_head_gradients_are_zero() {
        let mut net = small_net(4, 37);
        // zero the head conv and feed a zero image: the head sees a zero
        // input field, so its multiplicative parameters get no gradient
        {
            let mut params = net.params_mut();
            let head_weights_slot = params.len() - 4;
            for v in params[head_weights_slot].0.iter_mut() {
                *v = 0.0;
            }
        }
        let sample = LabeledSample {
            image: GrayImage::new(8, 8),
            mask: {
                let mut m = BinaryMask::new(8, 8);
                m.set(4, 4, 1);
                m
            },
            source: None,
        };
        net.set_training(true);
        let input = crate::segnet::image_to_input::<f32>(&sample.image);
        let probs = net.forward(&input).unwrap();
        let (_, grad_logits) =
            weighted_cross_entropy(&probs, sample.mask.data(), [1.0f32, 3.0]).unwrap();
        let grads = net.backward(&grad_logits).unwrap();
        let head = grads.blocks.last().unwrap();
        let wmax = head
            .weights
            .data()
            .iter()
            .fold(0.0f32, |m, v| m.max(v.abs()));
        let gmax = head.gamma.iter().fold(0.0f32, |m, v| m.max(v.abs()));
        assert!(wmax < 1e-6, "head weight grads {wmax}");
        assert!(gmax < 1e-6, "head gamma grads {gmax}");
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let entries: Vec<(ManifestEntry, LabeledSample)> = (0..3)
            .map(|i| {
                (
                    ManifestEntry {
                        stem: format!("sample_{i:03}"),
                        split: "train".into(),
                        meta: serde_json::json!({ "range_m": 1000.0 + i as f64 }),
                    },
                    blob_sample(16, 2 + i, 3, 2, 2),
                )
            })
            .collect();
        save_dataset(dir.path(), &entries).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.len(), 3);
        for ((_, original), loaded) in entries.iter().zip(&loaded) {
            assert_eq!(loaded.image, original.image);
            assert_eq!(loaded.mask, original.mask);
        }
        let manifest = read_manifest(dir.path()).unwrap();
        assert_eq!(manifest.samples[0].stem, "sample_000");
    }

    #[test]
    fn loss_csv_has_one_row_per_epoch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("loss.csv");
        write_loss_csv(&path, &[0.5, 0.25, 0.125]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0], "epoch,loss");
        assert!(lines[1].starts_with("1,"));
        assert!(lines[3].starts_with("3,"));
    }
}
