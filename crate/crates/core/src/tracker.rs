//! Temporal persistence filtering. Per-frame binary masks become candidates
//! (8-connected components with mean centroids); candidates associate to
//! tracks greedily by centroid distance inside a 10x10 gate; a track that
//! survives W successive frames declares a detection, once. A single missed
//! frame kills a track — no coasting — which is what lets a larger W squeeze
//! out transient clutter.

use std::path::Path;

use thiserror::Error;

use crate::image::BinaryMask;
use crate::pgm::atomic_write;

#[derive(Debug, Error)]
pub enum TrackerError {
    #[error("frame indices must increase strictly: got {got} after {last}")]
    NonIncreasingFrame { last: usize, got: usize },
    #[error("window length W must be >= 1")]
    ZeroWindow,
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Half-width of the association gate: a 10x10 pixel box centred on the
/// track's last centroid, inclusive (Chebyshev distance <= 5).
pub const GATE_HALF_WIDTH: f64 = 5.0;

/// Components smaller than this many pixels are ignored.
pub const DEFAULT_MIN_PIXELS: usize = 1;

/// A connected component of aircraft pixels in one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    /// (row, col), arithmetic mean of member pixels.
    pub centroid: (f64, f64),
    pub pixel_count: usize,
    pub frame_index: usize,
}

/// A tentative target being confirmed.
#[derive(Clone, Debug)]
pub struct Track {
    pub id: u64,
    pub last_centroid: (f64, f64),
    /// Number of successive frames the track has been seen, equals the
    /// history length.
    pub consecutive_count: usize,
    pub history: Vec<(f64, f64)>,
    pub declared: bool,
    /// Frame the track was spawned in; with the first centroid this
    /// identifies the underlying chain independently of W.
    pub spawn_frame: usize,
}

/// Emitted exactly once per track, when its persistence first reaches W.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionEvent {
    pub track_id: u64,
    pub frame_index: usize,
    pub centroid: (f64, f64),
}

#[derive(Clone, Debug, Default)]
pub struct TrackerState {
    tracks: Vec<Track>,
    next_id: u64,
    last_frame: Option<usize>,
}

impl TrackerState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn tracks(&self) -> &[Track] {
        &self.tracks
    }
}

/// 8-connected components of the mask, in centroid (row, col) order.
pub fn extract_candidates(
    mask: &BinaryMask,
    frame_index: usize,
    min_pixels: usize,
) -> Vec<Candidate> {
    let (w, h) = (mask.width(), mask.height());
    let mut visited = vec![false; w * h];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..w * h {
        if visited[start] || mask.data()[start] == 0 {
            continue;
        }
        visited[start] = true;
        stack.push(start);
        let mut count = 0usize;
        let (mut sum_r, mut sum_c) = (0.0f64, 0.0f64);
        while let Some(i) = stack.pop() {
            let (r, c) = (i / w, i % w);
            count += 1;
            sum_r += r as f64;
            sum_c += c as f64;
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    if dr == 0 && dc == 0 {
                        continue;
                    }
                    let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                    if nr < 0 || nc < 0 || nr >= h as i64 || nc >= w as i64 {
                        continue;
                    }
                    let ni = nr as usize * w + nc as usize;
                    if !visited[ni] && mask.data()[ni] == 1 {
                        visited[ni] = true;
                        stack.push(ni);
                    }
                }
            }
        }
        if count >= min_pixels.max(1) {
            out.push(Candidate {
                centroid: (sum_r / count as f64, sum_c / count as f64),
                pixel_count: count,
                frame_index,
            });
        }
    }
    out.sort_by(|a, b| {
        a.centroid
            .partial_cmp(&b.centroid)
            .expect("centroids are finite")
    });
    out
}

/// True iff the candidate lies inside the 10x10 gate centred on the track:
/// |dRow| <= 5 and |dCol| <= 5, boundary inclusive.
pub fn gate_match(track_centroid: (f64, f64), candidate_centroid: (f64, f64)) -> bool {
    (track_centroid.0 - candidate_centroid.0).abs() <= GATE_HALF_WIDTH
        && (track_centroid.1 - candidate_centroid.1).abs() <= GATE_HALF_WIDTH
}

fn dist2(a: (f64, f64), b: (f64, f64)) -> f64 {
    let dr = a.0 - b.0;
    let dc = a.1 - b.1;
    dr * dr + dc * dc
}

/// Advances the tracker by one frame.
///
/// Greedy association: candidate-track pairs inside the gate are taken in
/// order of Euclidean distance (ties to the lower track id, then candidate
/// order), one candidate per track. Matched tracks extend; unmatched tracks
/// die; unmatched candidates spawn fresh tracks. Any track whose count
/// reaches W emits one DetectionEvent and keeps updating silently.
pub fn step(
    state: &mut TrackerState,
    candidates: &[Candidate],
    frame_index: usize,
    w: usize,
) -> Result<Vec<DetectionEvent>, TrackerError> {
    if w == 0 {
        return Err(TrackerError::ZeroWindow);
    }
    if let Some(last) = state.last_frame {
        if frame_index <= last {
            return Err(TrackerError::NonIncreasingFrame {
                last,
                got: frame_index,
            });
        }
    }
    state.last_frame = Some(frame_index);
    debug_assert!(candidates.iter().all(|c| c.frame_index == frame_index));

    // all in-gate pairs, ranked
    let mut pairs: Vec<(f64, u64, usize, usize)> = Vec::new();
    for (ti, track) in state.tracks.iter().enumerate() {
        for (ci, cand) in candidates.iter().enumerate() {
            if gate_match(track.last_centroid, cand.centroid) {
                pairs.push((dist2(track.last_centroid, cand.centroid), track.id, ci, ti));
            }
        }
    }
    pairs.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .expect("distances are finite")
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });

    let mut track_matched = vec![false; state.tracks.len()];
    let mut cand_used = vec![false; candidates.len()];
    let mut assignments: Vec<(usize, usize)> = Vec::new();
    for (_, _, ci, ti) in pairs {
        if track_matched[ti] || cand_used[ci] {
            continue;
        }
        track_matched[ti] = true;
        cand_used[ci] = true;
        assignments.push((ti, ci));
    }

    // matched tracks extend; the rest die
    let mut survivors: Vec<Track> = Vec::with_capacity(assignments.len() + candidates.len());
    let mut old_tracks = std::mem::take(&mut state.tracks);
    assignments.sort_by_key(|&(ti, _)| ti);
    for (ti, ci) in assignments {
        let mut track = std::mem::replace(
            &mut old_tracks[ti],
            Track {
                id: u64::MAX,
                last_centroid: (0.0, 0.0),
                consecutive_count: 0,
                history: Vec::new(),
                declared: false,
                spawn_frame: 0,
            },
        );
        track.last_centroid = candidates[ci].centroid;
        track.consecutive_count += 1;
        track.history.push(candidates[ci].centroid);
        survivors.push(track);
    }
    for (ci, cand) in candidates.iter().enumerate() {
        if cand_used[ci] {
            continue;
        }
        survivors.push(Track {
            id: state.next_id,
            last_centroid: cand.centroid,
            consecutive_count: 1,
            history: vec![cand.centroid],
            declared: false,
            spawn_frame: frame_index,
        });
        state.next_id += 1;
    }
    survivors.sort_by_key(|t| t.id);
    state.tracks = survivors;

    let mut events = Vec::new();
    for track in state.tracks.iter_mut() {
        if !track.declared && track.consecutive_count >= w {
            track.declared = true;
            events.push(DetectionEvent {
                track_id: track.id,
                frame_index,
                centroid: track.last_centroid,
            });
        }
    }
    Ok(events)
}

/// Runs the whole mask sequence through the tracker from an empty state;
/// frame indices are the positions in the slice.
pub fn run_sequence(masks: &[BinaryMask], w: usize) -> Result<Vec<DetectionEvent>, TrackerError> {
    let candidates: Vec<Vec<Candidate>> = masks
        .iter()
        .enumerate()
        .map(|(f, m)| extract_candidates(m, f, DEFAULT_MIN_PIXELS))
        .collect();
    run_candidates(&candidates, w)
}

/// Like [`run_sequence`] but over pre-extracted candidates, so sweeping W
/// does not redo component labelling.
pub fn run_candidates(
    candidates_per_frame: &[Vec<Candidate>],
    w: usize,
) -> Result<Vec<DetectionEvent>, TrackerError> {
    let mut state = TrackerState::new();
    let mut events = Vec::new();
    for (f, cands) in candidates_per_frame.iter().enumerate() {
        events.extend(step(&mut state, cands, f, w)?);
    }
    Ok(events)
}

/// Event log as `frame,track_id,centroid_row,centroid_col` CSV.
pub fn write_event_log(events: &[DetectionEvent], path: &Path) -> Result<(), TrackerError> {
    let mut out = String::from("frame,track_id,centroid_row,centroid_col\n");
    for e in events {
        out.push_str(&format!(
            "{},{},{},{}\n",
            e.frame_index, e.track_id, e.centroid.0, e.centroid.1
        ));
    }
    atomic_write(path, out.as_bytes()).map_err(|e| match e {
        crate::pgm::PgmError::Io { path, source } => TrackerError::Io { path, source },
        crate::pgm::PgmError::Parse { path, .. } => TrackerError::Io {
            path,
            source: std::io::Error::other("unexpected parse error on write"),
        },
    })
}
