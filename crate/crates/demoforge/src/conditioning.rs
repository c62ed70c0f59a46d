//! Conditioning bundles for the video generator.
//!
//! A bundle packages everything the generator is conditioned on for one
//! generation window: the rendered robot-motion frames for that window,
//! overlap frames carried from the previous clip, a per-instruction
//! language vector, and a fixed-size encoding of the whole trajectory with
//! a binary indicator marking which resampled waypoints fall inside the
//! window. The trajectory encoding always summarizes the full
//! demonstration; only the indicator changes from window to window, which
//! is what lets the generator keep long-horizon context while producing
//! one window at a time.
//!
//! Windows tile the frame range with a fixed overlap: window k starts at
//! `k * (length - overlap)` and the last one is truncated at the total
//! frame count. Every frame is generated exactly once outside overlaps.

use std::io::{Read, Write};

use rand::Rng;
use thiserror::Error;

use crate::render::{Frame, FrameSequence};
use crate::rng::{stream, tag};
use crate::trajectory::Trajectory;

/// Features per resampled waypoint: end-effector xyz, gripper, normalized
/// time.
pub const WAYPOINT_FEATURES: usize = 5;

/// Default resampled waypoint count for the trajectory encoding.
pub const DEFAULT_TRAJ_SAMPLES: usize = 64;

/// Default language embedding width.
pub const DEFAULT_LANG_DIM: usize = 32;

/// Fixed-size summary of a whole trajectory plus the per-waypoint window
/// indicator.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalTrajectoryEncoding {
    /// Row-major N x WAYPOINT_FEATURES matrix.
    pub waypoint_features: Vec<[f64; WAYPOINT_FEATURES]>,
    /// One 0/1 flag per row; the 1-entries form one contiguous run.
    pub indicator: Vec<u8>,
}

impl GlobalTrajectoryEncoding {
    /// The ablation stand-in: all features and flags zero, same shape.
    pub fn zeros(n: usize) -> Self {
        GlobalTrajectoryEncoding {
            waypoint_features: vec![[0.0; WAYPOINT_FEATURES]; n],
            indicator: vec![0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.waypoint_features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.waypoint_features.is_empty()
    }

    pub fn validate(&self) -> Result<(), ConditionError> {
        if self.indicator.len() != self.waypoint_features.len() {
            return Err(ConditionError::Encoding(format!(
                "indicator length {} != feature rows {}",
                self.indicator.len(),
                self.waypoint_features.len()
            )));
        }
        if self
            .waypoint_features
            .iter()
            .flatten()
            .any(|v| !v.is_finite())
        {
            return Err(ConditionError::Encoding("non-finite feature".into()));
        }
        if self.indicator.iter().any(|&b| b > 1) {
            return Err(ConditionError::Encoding("indicator entry not 0/1".into()));
        }
        // Ones must be one contiguous run: no 1 after a 1->0 transition.
        let mut seen_one = false;
        let mut run_over = false;
        for &b in &self.indicator {
            match (b, seen_one, run_over) {
                (1, _, true) => {
                    return Err(ConditionError::Encoding(
                        "indicator ones are not contiguous".into(),
                    ))
                }
                (1, _, false) => seen_one = true,
                (0, true, _) => run_over = true,
                _ => {}
            }
        }
        Ok(())
    }
}

/// Per-instruction conditioning vector.
#[derive(Debug, Clone, PartialEq)]
pub struct LanguageEmbedding {
    pub instruction_id: u32,
    pub vector: Vec<f64>,
}

/// Lookup table mapping instruction ids to embedding vectors. Rows start
/// from a seeded draw and are trained along with the generator, so two
/// tables built from the same seed are identical.
#[derive(Debug, Clone, PartialEq)]
pub struct LanguageTable {
    pub dim: usize,
    pub rows: Vec<Vec<f64>>,
}

impl LanguageTable {
    /// Fresh table for `vocab` instructions, rows drawn uniformly from
    /// [-0.1, 0.1] on a dedicated stream of `seed`.
    pub fn seeded(vocab: usize, dim: usize, seed: u64) -> Self {
        let mut rng = stream(seed, &[tag::LANGUAGE]);
        let rows = (0..vocab)
            .map(|_| (0..dim).map(|_| rng.gen_range(-0.1..=0.1)).collect())
            .collect();
        LanguageTable { dim, rows }
    }

    pub fn vocab(&self) -> usize {
        self.rows.len()
    }

    pub fn embed(&self, instruction_id: u32) -> Result<LanguageEmbedding, ConditionError> {
        let row = self
            .rows
            .get(instruction_id as usize)
            .ok_or(ConditionError::UnknownInstruction {
                instruction_id,
                vocab: self.rows.len(),
            })?;
        Ok(LanguageEmbedding { instruction_id, vector: row.clone() })
    }
}

/// One generation window over the frame range.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowDescriptor {
    pub start_frame: usize,
    pub length: usize,
    /// Frames at the start of this window that repeat the tail of the
    /// previous clip; 0 for the first window.
    pub overlap: usize,
}

impl WindowDescriptor {
    pub fn end_frame(&self) -> usize {
        self.start_frame + self.length
    }

    pub fn validate(&self, total_frames: usize) -> Result<(), ConditionError> {
        if self.length == 0
            || self.overlap >= self.length
            || self.end_frame() > total_frames
            || self.start_frame >= total_frames
        {
            return Err(ConditionError::WindowOutOfRange {
                start: self.start_frame,
                length: self.length,
                total: total_frames,
            });
        }
        Ok(())
    }
}

/// Tile `total_frames` with windows of nominal `length` overlapping by
/// `overlap`; the last window is truncated at the end of the range. The
/// truncated length always exceeds `overlap`, so every descriptor is
/// valid.
pub fn plan_windows(
    total_frames: usize,
    length: usize,
    overlap: usize,
) -> Result<Vec<WindowDescriptor>, ConditionError> {
    if length == 0 || overlap >= length || total_frames == 0 {
        return Err(ConditionError::WindowOutOfRange { start: 0, length, total: total_frames });
    }
    let stride = length - overlap;
    let mut windows = Vec::new();
    let mut start = 0;
    loop {
        let len = length.min(total_frames - start);
        windows.push(WindowDescriptor {
            start_frame: start,
            length: len,
            overlap: if start == 0 { 0 } else { overlap },
        });
        if start + len >= total_frames {
            break;
        }
        start += stride;
    }
    Ok(windows)
}

/// Everything one generation step is conditioned on.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningBundle {
    /// Rendered robot-only frames for exactly this window.
    pub motion_frames: FrameSequence,
    /// Tail of the previously generated clip; empty for the first window.
    pub context_frames: FrameSequence,
    pub language: LanguageEmbedding,
    pub global_traj: GlobalTrajectoryEncoding,
    pub window: WindowDescriptor,
}

#[derive(Debug, Error)]
pub enum ConditionError {
    #[error("need at least 2 samples, got {n}")]
    TooFewSamples { n: usize },
    #[error("trajectory has {len} waypoints, need at least 2")]
    TrajectoryTooShort { len: usize },
    #[error("waypoint {index} has no cached end-effector pose")]
    MissingEePose { index: usize },
    #[error("window start {start} length {length} outside {total} frames")]
    WindowOutOfRange { start: usize, length: usize, total: usize },
    #[error("window at frame {start} needs a previous clip for context")]
    MissingContext { start: usize },
    #[error("previous clip has {have} frames, need at least {need}")]
    ShortContext { have: usize, need: usize },
    #[error("rendered sequence has {have} frames, window needs {need}")]
    ShortRender { have: usize, need: usize },
    #[error("instruction {instruction_id} outside vocabulary of {vocab}")]
    UnknownInstruction { instruction_id: u32, vocab: usize },
    #[error("bad encoding: {0}")]
    Encoding(String),
    #[error("bundle file: {0}")]
    BundleFormat(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Resample a trajectory to `n` rows of per-waypoint features at uniform
/// times across its span. Features between waypoints are linear
/// interpolations of the cached end-effector position and gripper; sample
/// times within 1e-9 of a waypoint copy it exactly.
pub fn resample_trajectory(
    traj: &Trajectory,
    n: usize,
) -> Result<Vec<[f64; WAYPOINT_FEATURES]>, ConditionError> {
    if n < 2 {
        return Err(ConditionError::TooFewSamples { n });
    }
    let wps = &traj.waypoints;
    if wps.len() < 2 {
        return Err(ConditionError::TrajectoryTooShort { len: wps.len() });
    }
    if let Some(i) = wps.iter().position(|w| !w.ee_cached) {
        return Err(ConditionError::MissingEePose { index: i });
    }

    let (t0, t1) = (wps[0].t, wps[wps.len() - 1].t);
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let u = i as f64 / (n - 1) as f64;
        let t = t0 + u * (t1 - t0);
        let hi = wps.partition_point(|w| w.t < t).min(wps.len() - 1);
        let lo = hi.saturating_sub(1);
        let (a, b) = (&wps[lo], &wps[hi]);
        let (p, g) = if (a.t - t).abs() < 1e-9 {
            (a.ee_pose.translation, a.state.gripper)
        } else if (b.t - t).abs() < 1e-9 || hi == lo {
            (b.ee_pose.translation, b.state.gripper)
        } else {
            let s = ((t - a.t) / (b.t - a.t)).clamp(0.0, 1.0);
            (
                a.ee_pose.translation + (b.ee_pose.translation - a.ee_pose.translation) * s,
                a.state.gripper + s * (b.state.gripper - a.state.gripper),
            )
        };
        rows.push([p.x, p.y, p.z, g, u]);
    }
    Ok(rows)
}

/// Indicator over `n` resampled waypoints: entry i is 1 iff the waypoint's
/// frame-time `i * (total_frames - 1) / (n - 1)` lies in
/// `[start, start + length)`.
pub fn build_window_indicator(
    n: usize,
    window: &WindowDescriptor,
    total_frames: usize,
) -> Result<Vec<u8>, ConditionError> {
    if n < 2 {
        return Err(ConditionError::TooFewSamples { n });
    }
    window.validate(total_frames)?;
    let scale = (total_frames - 1) as f64 / (n - 1) as f64;
    Ok((0..n)
        .map(|i| {
            let f = i as f64 * scale;
            u8::from(window.start_frame as f64 <= f && f < window.end_frame() as f64)
        })
        .collect())
}

/// Knobs for [`assemble_condition`].
#[derive(Debug, Clone, Copy)]
pub struct AssembleOptions {
    /// Rows in the trajectory encoding.
    pub traj_samples: usize,
    /// Replace the trajectory encoding with zeros of the same shape,
    /// leaving everything else untouched.
    pub ablate_global_traj: bool,
}

impl Default for AssembleOptions {
    fn default() -> Self {
        AssembleOptions { traj_samples: DEFAULT_TRAJ_SAMPLES, ablate_global_traj: false }
    }
}

/// Build the bundle for one window. `rendered` must span the whole
/// trajectory at the generation frame rate; `prev_clip` supplies overlap
/// context for every window after the first. The trajectory encoding is
/// always computed from the full trajectory; the window only moves the
/// indicator.
pub fn assemble_condition(
    rendered: &FrameSequence,
    traj: &Trajectory,
    language: LanguageEmbedding,
    window: &WindowDescriptor,
    prev_clip: Option<&FrameSequence>,
    opts: &AssembleOptions,
) -> Result<ConditioningBundle, ConditionError> {
    let total = rendered.len();
    window.validate(total)?;
    if window.end_frame() > rendered.len() {
        return Err(ConditionError::ShortRender {
            have: rendered.len(),
            need: window.end_frame(),
        });
    }

    let context_frames = if window.start_frame == 0 {
        FrameSequence { frames: Vec::new(), fps: rendered.fps }
    } else {
        let prev = prev_clip.ok_or(ConditionError::MissingContext {
            start: window.start_frame,
        })?;
        if prev.len() < window.overlap {
            return Err(ConditionError::ShortContext {
                have: prev.len(),
                need: window.overlap,
            });
        }
        FrameSequence {
            frames: prev.frames[prev.len() - window.overlap..].to_vec(),
            fps: prev.fps,
        }
    };

    let global_traj = if opts.ablate_global_traj {
        GlobalTrajectoryEncoding::zeros(opts.traj_samples)
    } else {
        let waypoint_features = resample_trajectory(traj, opts.traj_samples)?;
        let indicator = build_window_indicator(opts.traj_samples, window, total)?;
        let enc = GlobalTrajectoryEncoding { waypoint_features, indicator };
        enc.validate()?;
        enc
    };

    Ok(ConditioningBundle {
        motion_frames: FrameSequence {
            frames: rendered.frames[window.start_frame..window.end_frame()].to_vec(),
            fps: rendered.fps,
        },
        context_frames,
        language,
        global_traj,
        window: *window,
    })
}

const BUNDLE_MAGIC: &[u8; 4] = b"CBND";
const BUNDLE_VERSION: u32 = 1;

/// Serialize a bundle: magic `CBND`, u32 version, then little-endian
/// fields in declaration order (language id + vector, encoding rows +
/// indicator, window, motion frames, context frames). Frame blocks are
/// u32 count/width/height, f64 fps, then f32 RGB data per frame.
pub fn write_bundle(out: &mut dyn Write, bundle: &ConditioningBundle) -> Result<(), ConditionError> {
    out.write_all(BUNDLE_MAGIC)?;
    out.write_all(&BUNDLE_VERSION.to_le_bytes())?;

    out.write_all(&bundle.language.instruction_id.to_le_bytes())?;
    out.write_all(&(bundle.language.vector.len() as u32).to_le_bytes())?;
    for v in &bundle.language.vector {
        out.write_all(&v.to_le_bytes())?;
    }

    let enc = &bundle.global_traj;
    out.write_all(&(enc.len() as u32).to_le_bytes())?;
    for row in &enc.waypoint_features {
        for v in row {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.write_all(&enc.indicator)?;

    for v in [bundle.window.start_frame, bundle.window.length, bundle.window.overlap] {
        out.write_all(&(v as u32).to_le_bytes())?;
    }

    write_frames(out, &bundle.motion_frames)?;
    write_frames(out, &bundle.context_frames)?;
    Ok(())
}

fn write_frames(out: &mut dyn Write, seq: &FrameSequence) -> Result<(), ConditionError> {
    let (w, h) = seq.frames.first().map(|f| (f.width, f.height)).unwrap_or((0, 0));
    for v in [seq.frames.len() as u32, w as u32, h as u32] {
        out.write_all(&v.to_le_bytes())?;
    }
    out.write_all(&seq.fps.to_le_bytes())?;
    for frame in &seq.frames {
        for v in &frame.data {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Deserialize a bundle written by [`write_bundle`].
pub fn read_bundle(input: &mut dyn Read) -> Result<ConditioningBundle, ConditionError> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != BUNDLE_MAGIC {
        return Err(ConditionError::BundleFormat("bad magic".into()));
    }
    let version = read_u32(input)?;
    if version != BUNDLE_VERSION {
        return Err(ConditionError::BundleFormat(format!("unknown version {version}")));
    }

    let instruction_id = read_u32(input)?;
    let lang_dim = read_u32(input)? as usize;
    let vector = (0..lang_dim).map(|_| read_f64(input)).collect::<Result<_, _>>()?;

    let n = read_u32(input)? as usize;
    let mut waypoint_features = Vec::with_capacity(n);
    for _ in 0..n {
        let mut row = [0.0; WAYPOINT_FEATURES];
        for v in &mut row {
            *v = read_f64(input)?;
        }
        waypoint_features.push(row);
    }
    let mut indicator = vec![0u8; n];
    input.read_exact(&mut indicator)?;

    let start_frame = read_u32(input)? as usize;
    let length = read_u32(input)? as usize;
    let overlap = read_u32(input)? as usize;

    let motion_frames = read_frames(input)?;
    let context_frames = read_frames(input)?;

    Ok(ConditioningBundle {
        motion_frames,
        context_frames,
        language: LanguageEmbedding { instruction_id, vector },
        global_traj: GlobalTrajectoryEncoding { waypoint_features, indicator },
        window: WindowDescriptor { start_frame, length, overlap },
    })
}

fn read_frames(input: &mut dyn Read) -> Result<FrameSequence, ConditionError> {
    let count = read_u32(input)? as usize;
    let width = read_u32(input)? as usize;
    let height = read_u32(input)? as usize;
    let fps = read_f64(input)?;
    let mut frames = Vec::with_capacity(count);
    let mut buf = vec![0u8; width * height * 12];
    for _ in 0..count {
        input.read_exact(&mut buf)?;
        let data = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        frames.push(Frame { width, height, data, depth: None });
    }
    Ok(FrameSequence { frames, fps })
}

fn read_u32(input: &mut dyn Read) -> Result<u32, ConditionError> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64(input: &mut dyn Read) -> Result<f64, ConditionError> {
    let mut b = [0u8; 8];
    input.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}
