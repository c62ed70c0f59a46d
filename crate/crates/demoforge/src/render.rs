//! Robot-only motion videos from trajectories.
//!
//! Frames show nothing but the arm: flat per-link colors on a uniform
//! mid-gray background, produced by a deterministic z-buffer rasterizer.
//! The gripper command modulates the end-effector link's brightness so the
//! signal carries gripper state as well as geometry. A slow per-pixel
//! ray-casting renderer doubles as a reference implementation.
//!
//! Image conventions: pinhole camera, +z forward, +x right, +y down; `u`
//! grows rightward, `v` downward; pixels are sampled at their centers.
//!
//! Storage: either a directory of `frame_%06d.png` files next to a
//! `manifest.json` (fps, dimensions, view layout), or a single raw file,
//! magic `FR32`, little-endian u32 width/height/count, then row-major RGB
//! headerless float32, for fast exact round trips.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{Pose, Triangle};
use crate::kinematics::{fk_unchecked, JointState, RobotModel};
use crate::trajectory::{Trajectory, TrajectoryError};

/// Pinhole camera: intrinsics in pixels plus a world-to-camera transform.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub extrinsics: Pose,
}

impl CameraModel {
    pub fn validate(&self) -> Result<(), RenderError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(RenderError::Camera(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if !(0.0 <= self.cx && self.cx < self.width as f64)
            || !(0.0 <= self.cy && self.cy < self.height as f64)
        {
            return Err(RenderError::Camera(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(RenderError::Camera("image dimensions must be non-zero".into()));
        }
        Ok(())
    }
}

/// How a camera is mounted.
#[derive(Debug, Clone)]
pub enum CameraRig {
    /// Extrinsics are fixed in the world frame.
    Fixed(CameraModel),
    /// Rigidly attached to the end-effector: the embedded extrinsics are
    /// the camera-from-end-effector offset, so the world-to-camera
    /// transform at a waypoint is `offset ∘ ee_pose⁻¹`.
    WristMounted(CameraModel),
}

impl CameraRig {
    pub fn camera(&self) -> &CameraModel {
        match self {
            CameraRig::Fixed(c) | CameraRig::WristMounted(c) => c,
        }
    }

    /// World-to-camera transform given the current end-effector pose.
    pub fn extrinsics_at(&self, ee_pose: &Pose) -> Pose {
        match self {
            CameraRig::Fixed(c) => c.extrinsics,
            CameraRig::WristMounted(c) => c.extrinsics.compose(&ee_pose.inverse()),
        }
    }
}

impl From<CameraModel> for CameraRig {
    fn from(c: CameraModel) -> Self {
        CameraRig::Fixed(c)
    }
}

/// RGB image with values in [0, 1], row-major, plus an optional depth plane
/// in meters.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
    pub depth: Option<Vec<f32>>,
}

impl Frame {
    pub fn filled(width: usize, height: usize, color: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&color);
        }
        Frame { width, height, data, depth: None }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn put_pixel(&mut self, x: usize, y: usize, color: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&color);
    }
}

/// An ordered run of equally sized frames.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    pub frames: Vec<Frame>,
    pub fps: f64,
}

impl FrameSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("degenerate camera: {0}")]
    Camera(String),
    #[error("sequence mismatch: {0}")]
    SequenceMismatch(String),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Manifest(#[from] serde_json::Error),
    #[error("raw frame file: {0}")]
    RawFormat(String),
}

/// Uniform background fill; mid-gray keeps the arm distinguishable from
/// both dark and bright scene content.
pub const BACKGROUND: [f32; 3] = [0.5, 0.5, 0.5];

/// Depth of the near clipping plane, meters.
pub const NEAR_PLANE: f64 = 1e-3;

const LINK_PALETTE: [[f32; 3]; 8] = [
    [0.26, 0.32, 0.60],
    [0.33, 0.45, 0.78],
    [0.45, 0.36, 0.72],
    [0.55, 0.50, 0.85],
    [0.30, 0.55, 0.75],
    [0.40, 0.30, 0.55],
    [0.50, 0.60, 0.88],
    [0.36, 0.42, 0.66],
];

/// Flat color of a robot link.
pub fn link_color(link_index: usize) -> [f32; 3] {
    LINK_PALETTE[link_index % LINK_PALETTE.len()]
}

/// End-effector link color: the palette color scaled by gripper opening,
/// so closed (0) renders darker and open (1) renders at full brightness.
pub fn ee_link_color(link_index: usize, gripper: f64) -> [f32; 3] {
    let base = link_color(link_index);
    let scale = (0.55 + 0.45 * gripper.clamp(0.0, 1.0)) as f32;
    [base[0] * scale, base[1] * scale, base[2] * scale]
}

/// Project a world point through the camera. Returns `(u, v, depth)` in
/// pixels and meters, or `None` when the point is on or behind the camera
/// plane.
pub fn project_point(cam: &CameraModel, p: &nalgebra::Vector3<f64>) -> Option<(f64, f64, f64)> {
    let q = cam.extrinsics.transform_point(p);
    if q.z <= 0.0 {
        return None;
    }
    let u = cam.fx * q.x / q.z + cam.cx;
    let v = cam.fy * q.y / q.z + cam.cy;
    Some((u, v, q.z))
}

/// Rendering knobs; `fps` drives the time resampling of the trajectory.
#[derive(Debug, Clone, Copy)]
pub struct RenderOptions {
    pub fps: f64,
    pub background: [f32; 3],
    pub with_depth: bool,
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions { fps: 10.0, background: BACKGROUND, with_depth: false }
    }
}

/// Resample a trajectory to a fixed frame rate: states sampled at
/// `t0 + k/fps` with linear interpolation in joint space (gripper
/// included). Sample times that land on a waypoint copy it exactly.
pub fn resample_states(traj: &Trajectory, fps: f64) -> Vec<JointState> {
    let t0 = traj.waypoints.first().map_or(0.0, |w| w.t);
    let t1 = traj.waypoints.last().map_or(0.0, |w| w.t);
    let count = (((t1 - t0) * fps) + 1e-9).floor() as usize + 1;

    (0..count)
        .map(|k| {
            let t = t0 + k as f64 / fps;
            sample_state(traj, t)
        })
        .collect()
}

fn sample_state(traj: &Trajectory, t: f64) -> JointState {
    let wps = &traj.waypoints;
    let hi = wps.partition_point(|w| w.t < t).min(wps.len() - 1);
    let lo = hi.saturating_sub(1);
    let (a, b) = (&wps[lo], &wps[hi]);
    if (a.t - t).abs() < 1e-9 {
        return a.state.clone();
    }
    if (b.t - t).abs() < 1e-9 || hi == lo {
        return b.state.clone();
    }
    let u = ((t - a.t) / (b.t - a.t)).clamp(0.0, 1.0);
    let positions = a
        .state
        .positions
        .iter()
        .zip(&b.state.positions)
        .map(|(x, y)| x + u * (y - x))
        .collect();
    JointState::new(positions, a.state.gripper + u * (b.state.gripper - a.state.gripper))
}

/// Render the arm alone, one frame per resampled state. Frames are
/// independent and rendered in parallel; output is bit-identical for any
/// worker count because each frame is a pure function of its state.
pub fn render_robot_only(
    model: &RobotModel,
    traj: &Trajectory,
    rig: &CameraRig,
    opts: &RenderOptions,
) -> Result<FrameSequence, RenderError> {
    rig.camera().validate()?;
    traj.validate(model)?;
    let states = resample_states(traj, opts.fps);
    let frames: Vec<Frame> = states
        .par_iter()
        .map(|state| render_state(model, state, rig, opts))
        .collect();
    Ok(FrameSequence { frames, fps: opts.fps })
}

/// Render a single joint state through a rig.
pub fn render_state(
    model: &RobotModel,
    state: &JointState,
    rig: &CameraRig,
    opts: &RenderOptions,
) -> Frame {
    let poses = fk_unchecked(model, state);
    let ee = model.end_effector_index();
    let cam_pose = rig.extrinsics_at(poses.pose(ee));
    let cam = CameraModel { extrinsics: cam_pose, ..rig.camera().clone() };

    let mut tris: Vec<(Triangle, [f32; 3])> = Vec::new();
    for (li, link) in model.links().iter().enumerate() {
        let color =
            if li == ee { ee_link_color(li, state.gripper) } else { link_color(li) };
        let pose = poses.pose(li);
        for tri in &link.mesh {
            tris.push(([
                pose.transform_point(&tri[0]),
                pose.transform_point(&tri[1]),
                pose.transform_point(&tri[2]),
            ], color));
        }
    }
    rasterize(&tris, &cam, opts.background, opts.with_depth)
}

/// Z-buffer rasterizer over world triangles. Triangles are clipped against
/// the near plane, projected, and filled with pixel-center sampling;
/// depth is interpolated perspective-correctly (linear in 1/z). Ties keep
/// the earlier triangle, so draw order fixes every pixel deterministically.
pub fn rasterize(
    tris: &[(Triangle, [f32; 3])],
    cam: &CameraModel,
    background: [f32; 3],
    with_depth: bool,
) -> Frame {
    let (w, h) = (cam.width, cam.height);
    let mut frame = Frame::filled(w, h, background);
    let mut zbuf = vec![f64::INFINITY; w * h];

    for (tri, color) in tris {
        let cam_space = [
            cam.extrinsics.transform_point(&tri[0]),
            cam.extrinsics.transform_point(&tri[1]),
            cam.extrinsics.transform_point(&tri[2]),
        ];
        for clipped in clip_near(&cam_space) {
            raster_one(&clipped, *color, cam, &mut frame, &mut zbuf);
        }
    }
    if with_depth {
        frame.depth = Some(zbuf.iter().map(|&z| z as f32).collect());
    }
    frame
}

/// Clip a camera-space triangle against `z = NEAR_PLANE`
/// (Sutherland-Hodgman), returning 0..2 triangles.
fn clip_near(tri: &[nalgebra::Vector3<f64>; 3]) -> Vec<[nalgebra::Vector3<f64>; 3]> {
    let mut poly: Vec<nalgebra::Vector3<f64>> = Vec::with_capacity(4);
    for i in 0..3 {
        let a = tri[i];
        let b = tri[(i + 1) % 3];
        let (ina, inb) = (a.z >= NEAR_PLANE, b.z >= NEAR_PLANE);
        if ina {
            poly.push(a);
        }
        if ina != inb {
            let t = (NEAR_PLANE - a.z) / (b.z - a.z);
            poly.push(a + (b - a) * t);
        }
    }
    match poly.len() {
        0..=2 => Vec::new(),
        n => (1..n - 1).map(|i| [poly[0], poly[i], poly[i + 1]]).collect(),
    }
}

fn raster_one(
    tri: &[nalgebra::Vector3<f64>; 3],
    color: [f32; 3],
    cam: &CameraModel,
    frame: &mut Frame,
    zbuf: &mut [f64],
) {
    // Projected vertices; z > 0 is guaranteed after near clipping.
    let pts: Vec<(f64, f64, f64)> = tri
        .iter()
        .map(|q| (cam.fx * q.x / q.z + cam.cx, cam.fy * q.y / q.z + cam.cy, q.z))
        .collect();

    let area = edge(&pts[0], &pts[1], pts[2].0, pts[2].1);
    if area == 0.0 {
        return;
    }
    let flip = if area < 0.0 { -1.0 } else { 1.0 };
    let area = area * flip;

    let min_x = pts.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let max_x = pts.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let min_y = pts.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let max_y = pts.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    // Clamp in f64 before casting: a fully off-screen box must reject, not
    // saturate into the viewport.
    let x0f = (min_x - 1.0).floor().max(0.0);
    let x1f = (max_x + 1.0).ceil().min(cam.width as f64 - 1.0);
    let y0f = (min_y - 1.0).floor().max(0.0);
    let y1f = (max_y + 1.0).ceil().min(cam.height as f64 - 1.0);
    if x1f < x0f || y1f < y0f {
        return;
    }
    let (x0, x1, y0, y1) = (x0f as usize, x1f as usize, y0f as usize, y1f as usize);

    for y in y0..=y1 {
        for x in x0..=x1 {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let w0 = flip * edge(&pts[1], &pts[2], px, py);
            let w1 = flip * edge(&pts[2], &pts[0], px, py);
            let w2 = flip * edge(&pts[0], &pts[1], px, py);
            if w0 < 0.0 || w1 < 0.0 || w2 < 0.0 {
                continue;
            }
            let inv_z =
                (w0 / pts[0].2 + w1 / pts[1].2 + w2 / pts[2].2) / area;
            let z = 1.0 / inv_z;
            let idx = y * cam.width + x;
            if z < zbuf[idx] {
                zbuf[idx] = z;
                frame.put_pixel(x, y, color);
            }
        }
    }
}

fn edge(a: &(f64, f64, f64), b: &(f64, f64, f64), px: f64, py: f64) -> f64 {
    (px - a.0) * (b.1 - a.1) - (py - a.1) * (b.0 - a.0)
}

/// Reference renderer: casts a ray through every pixel center and keeps the
/// nearest Möller-Trumbore intersection. Slow but independent of the
/// rasterization path.
pub fn rasterize_oracle(
    model: &RobotModel,
    state: &JointState,
    rig: &CameraRig,
    background: [f32; 3],
) -> Frame {
    let poses = fk_unchecked(model, state);
    let ee = model.end_effector_index();
    let cam_pose = rig.extrinsics_at(poses.pose(ee));
    let cam = rig.camera();

    let mut tris: Vec<([nalgebra::Vector3<f64>; 3], [f32; 3])> = Vec::new();
    for (li, link) in model.links().iter().enumerate() {
        let color =
            if li == ee { ee_link_color(li, state.gripper) } else { link_color(li) };
        let pose = poses.pose(li);
        for tri in &link.mesh {
            tris.push(([
                cam_pose.transform_point(&pose.transform_point(&tri[0])),
                cam_pose.transform_point(&pose.transform_point(&tri[1])),
                cam_pose.transform_point(&pose.transform_point(&tri[2])),
            ], color));
        }
    }

    let mut frame = Frame::filled(cam.width, cam.height, background);
    for y in 0..cam.height {
        for x in 0..cam.width {
            let dir = nalgebra::Vector3::new(
                (x as f64 + 0.5 - cam.cx) / cam.fx,
                (y as f64 + 0.5 - cam.cy) / cam.fy,
                1.0,
            );
            let mut best = f64::INFINITY;
            let mut hit_color = background;
            for (tri, color) in &tris {
                if let Some(t) = moller_trumbore(&dir, tri) {
                    if t > NEAR_PLANE && t < best {
                        best = t;
                        hit_color = *color;
                    }
                }
            }
            frame.put_pixel(x, y, hit_color);
        }
    }
    frame
}

/// Ray-triangle intersection for a ray from the origin along `dir`
/// (unnormalized, dir.z = 1 so the parameter equals camera depth).
fn moller_trumbore(dir: &nalgebra::Vector3<f64>, tri: &[nalgebra::Vector3<f64>; 3]) -> Option<f64> {
    const EPS: f64 = 1e-12;
    let e1 = tri[1] - tri[0];
    let e2 = tri[2] - tri[0];
    let p = dir.cross(&e2);
    let det = e1.dot(&p);
    if det.abs() < EPS {
        return None;
    }
    let inv = 1.0 / det;
    let s = -tri[0];
    let u = s.dot(&p) * inv;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let q = s.cross(&e1);
    let v = dir.dot(&q) * inv;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    let t = e2.dot(&q) * inv;
    (t > 0.0).then_some(t)
}

/// Horizontally concatenate synchronized views, left to right in input
/// order.
pub fn concat_views(seqs: &[FrameSequence]) -> Result<FrameSequence, RenderError> {
    let first = seqs
        .first()
        .ok_or_else(|| RenderError::SequenceMismatch("no sequences given".into()))?;
    let len = first.len();
    let height = first.frames.first().map_or(0, |f| f.height);
    for (i, s) in seqs.iter().enumerate() {
        if s.len() != len {
            return Err(RenderError::SequenceMismatch(format!(
                "sequence {i} has {} frames, expected {len}",
                s.len()
            )));
        }
        if s.frames.iter().any(|f| f.height != height) {
            return Err(RenderError::SequenceMismatch(format!(
                "sequence {i} frame height differs from {height}"
            )));
        }
        if (s.fps - first.fps).abs() > 1e-9 {
            return Err(RenderError::SequenceMismatch(format!(
                "sequence {i} fps {} differs from {}",
                s.fps, first.fps
            )));
        }
    }

    let total_width: usize = seqs.iter().map(|s| s.frames[0].width).sum();
    let mut frames = Vec::with_capacity(len);
    for k in 0..len {
        let mut frame = Frame::filled(total_width, height, [0.0; 3]);
        let mut x_off = 0;
        for s in seqs {
            let src = &s.frames[k];
            for y in 0..height {
                for x in 0..src.width {
                    frame.put_pixel(x_off + x, y, src.pixel(x, y));
                }
            }
            x_off += src.width;
        }
        frames.push(frame);
    }
    Ok(FrameSequence { frames, fps: first.fps })
}

/// Sidecar describing a stored frame sequence.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FramesManifest {
    pub fps: f64,
    pub width: usize,
    pub height: usize,
    pub count: usize,
    /// Horizontal layout: view names and widths, left to right.
    pub views: Vec<ViewSpan>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ViewSpan {
    pub name: String,
    pub width: usize,
}

/// Write a sequence as `frame_%06d.png` files plus `manifest.json`.
/// Values are quantized to 8 bits.
pub fn write_frames_png(
    dir: &Path,
    seq: &FrameSequence,
    views: &[ViewSpan],
) -> Result<(), RenderError> {
    fs::create_dir_all(dir)?;
    let (width, height) = seq
        .frames
        .first()
        .map(|f| (f.width, f.height))
        .unwrap_or((0, 0));
    for (k, frame) in seq.frames.iter().enumerate() {
        let mut img = image::RgbImage::new(frame.width as u32, frame.height as u32);
        for y in 0..frame.height {
            for x in 0..frame.width {
                let p = frame.pixel(x, y);
                img.put_pixel(
                    x as u32,
                    y as u32,
                    image::Rgb([quant(p[0]), quant(p[1]), quant(p[2])]),
                );
            }
        }
        img.save(dir.join(format!("frame_{k:06}.png")))?;
    }
    let manifest = FramesManifest {
        fps: seq.fps,
        width,
        height,
        count: seq.frames.len(),
        views: views.to_vec(),
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

fn quant(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Read a PNG frame directory written by [`write_frames_png`].
pub fn read_frames_png(dir: &Path) -> Result<(FrameSequence, FramesManifest), RenderError> {
    let manifest: FramesManifest =
        serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    let mut frames = Vec::with_capacity(manifest.count);
    for k in 0..manifest.count {
        let img = image::open(dir.join(format!("frame_{k:06}.png")))?.to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut frame = Frame::filled(w, h, [0.0; 3]);
        for y in 0..h {
            for x in 0..w {
                let p = img.get_pixel(x as u32, y as u32);
                frame.put_pixel(x, y, [
                    p[0] as f32 / 255.0,
                    p[1] as f32 / 255.0,
                    p[2] as f32 / 255.0,
                ]);
            }
        }
        frames.push(frame);
    }
    Ok((FrameSequence { frames, fps: manifest.fps }, manifest))
}

const RAW_MAGIC: &[u8; 4] = b"FR32";

/// Write a sequence in the exact raw float32 format.
pub fn write_frames_raw(path: &Path, seq: &FrameSequence) -> Result<(), RenderError> {
    let (width, height) = seq
        .frames
        .first()
        .map(|f| (f.width, f.height))
        .unwrap_or((0, 0));
    let mut out = fs::File::create(path)?;
    out.write_all(RAW_MAGIC)?;
    for dim in [width as u32, height as u32, seq.frames.len() as u32] {
        out.write_all(&dim.to_le_bytes())?;
    }
    out.write_all(&(seq.fps as f32).to_le_bytes())?;
    let mut buf = Vec::with_capacity(width * height * 12);
    for frame in &seq.frames {
        buf.clear();
        for v in &frame.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    Ok(())
}

/// Read the raw float32 format back, bit-exact.
pub fn read_frames_raw(path: &Path) -> Result<FrameSequence, RenderError> {
    let mut file = fs::File::open(path)?;
    let mut head = [0u8; 20];
    file.read_exact(&mut head)
        .map_err(|_| RenderError::RawFormat("truncated header".into()))?;
    if &head[0..4] != RAW_MAGIC {
        return Err(RenderError::RawFormat("bad magic".into()));
    }
    let width = u32::from_le_bytes(head[4..8].try_into().unwrap()) as usize;
    let height = u32::from_le_bytes(head[8..12].try_into().unwrap()) as usize;
    let count = u32::from_le_bytes(head[12..16].try_into().unwrap()) as usize;
    let fps = f32::from_le_bytes(head[16..20].try_into().unwrap()) as f64;

    let mut frames = Vec::with_capacity(count);
    let mut buf = vec![0u8; width * height * 12];
    for k in 0..count {
        file.read_exact(&mut buf)
            .map_err(|_| RenderError::RawFormat(format!("truncated frame {k}")))?;
        let data: Vec<f32> = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        frames.push(Frame { width, height, data, depth: None });
    }
    Ok(FrameSequence { frames, fps })
}
