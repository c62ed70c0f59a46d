//! Tabletop pick-and-place world for end-to-end evaluation.
//!
//! A planar three-link arm sweeps a table sector seen by a fixed overhead
//! camera. Scenes hold colored blocks and a goal disc; a scripted expert
//! plans polar-interpolated reach/carry/hold trajectories with closed-form
//! inverse kinematics, so feasibility never depends on iterative solvers.
//! Renders composite the robot raster over flat scene decals, keeping the
//! robot layer bit-identical to the robot-only render.
//!
//! The module also provides the measurement side of the loop: color-keyed
//! object detection with pixel back-projection onto the table plane, a
//! small convolutional visuomotor policy trained by behavior cloning, and
//! batch policy evaluation with per-episode procedural scenes.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffusion::{
    self, Adam, DiffusionError, ParamStore, Span, Tensor, TrainConfig, FRAME_CHANNELS,
};
use crate::geom::{smoothstep, Pose};
use crate::kinematics::{forward_kinematics, urdf, JointState, KinematicsError, RobotModel};
use crate::render::{
    render_robot_only, render_state, CameraModel, CameraRig, Frame, FrameSequence, RenderError,
    RenderOptions, BACKGROUND,
};
use crate::rng::{stream, tag};
use crate::trajectory::{
    recompute_actions, validate_feasibility, ActionEncoding, KeyLabel, KeyState, Trajectory,
    Waypoint,
};

/// Errors from scene generation, planning, and policy evaluation.
#[derive(Debug, Error)]
pub enum ToyWorldError {
    #[error("scene rejected: {0}")]
    Scene(String),
    #[error("target ({}, {}) outside the planner's reachable sector", .0.x, .0.y)]
    Unreachable(Vector2<f64>),
    #[error("planned trajectory failed feasibility audit: {0}")]
    Infeasible(String),
    #[error("camera must be a fixed rig for table back-projection")]
    MovingCamera,
    #[error("ray through pixel ({0}, {1}) never meets the table plane")]
    RayMiss(usize, usize),
    #[error("policy config invalid: {0}")]
    Config(String),
    #[error("dataset mismatch: {0}")]
    Dataset(String),
    #[error("arm description: {0}")]
    Urdf(#[from] urdf::UrdfError),
    #[error("kinematics: {0}")]
    Kinematics(#[from] KinematicsError),
    #[error("render: {0}")]
    Render(#[from] RenderError),
    #[error("learning core: {0}")]
    Diffusion(#[from] DiffusionError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("scene file corrupt: {0}")]
    Parse(String),
}

// ---------------------------------------------------------------------------
// Arm definition and closed-form planning.
// ---------------------------------------------------------------------------

/// Planar three-revolute arm used by every toy-world component.
pub const TOY_ARM_URDF: &str = include_str!("../../../assets/toy_arm.urdf");

/// Link lengths of the toy arm, base to tool, in meters.
pub const LINK_LENGTHS: [f64; 3] = [0.35, 0.28, 0.17];

/// Joint-space speed bound the scripted expert must respect (rad/s).
pub const EXPERT_V_MAX: f64 = 1.5;

/// Inner radius of the planner's reachable sector (m).
pub const R_MIN: f64 = 0.30;
/// Outer radius of the reachable sector (m).
pub const R_MAX: f64 = 0.70;
/// Half-angle of the reachable sector around the +x axis (rad).
pub const PHI_MAX: f64 = 0.55;

/// Frames per second shared by the expert, renders, and the policy loop.
pub const TOY_FPS: f64 = 10.0;

/// Parse the bundled arm description.
pub fn toy_arm_model() -> Result<RobotModel, ToyWorldError> {
    Ok(urdf::parse_robot_model(TOY_ARM_URDF)?)
}

/// Joint configuration whose end effector rests at the home position.
pub fn home_state(model: &RobotModel) -> Result<JointState, ToyWorldError> {
    plan_state(model, Vector2::new(0.44, 0.0), 1.0)
}

/// Closed-form planar inverse kinematics for the toy arm.
///
/// The wrist segment stays radial: the tool heading equals the bearing of
/// `target`, which keeps the third joint continuous along polar paths and
/// pins the elbow to its upper branch.
pub fn plan_state(
    model: &RobotModel,
    target: Vector2<f64>,
    gripper: f64,
) -> Result<JointState, ToyWorldError> {
    let [l1, l2, l3] = LINK_LENGTHS;
    let r = target.norm();
    let phi = target.y.atan2(target.x);
    if !(R_MIN - 1e-9..=R_MAX + 1e-9).contains(&r) || phi.abs() > PHI_MAX + 1e-9 {
        return Err(ToyWorldError::Unreachable(target));
    }
    // Wrist point collinear with the target, one tool length short.
    let d = r - l3;
    let cos_t2 = (d * d - l1 * l1 - l2 * l2) / (2.0 * l1 * l2);
    if !(-1.0..=1.0).contains(&cos_t2) {
        return Err(ToyWorldError::Unreachable(target));
    }
    let t2 = cos_t2.acos();
    let beta = (l2 * t2.sin()).atan2(l1 + l2 * t2.cos());
    let t1 = phi - beta;
    // Tool heading phi = t1 + t2 + t3.
    let t3 = beta - t2;
    let state = JointState::new(vec![t1, t2, t3], gripper);
    debug_assert!({
        let poses = forward_kinematics(model, &state).expect("planned state within limits");
        let p = poses.pose(model.end_effector_index()).translation;
        (Vector2::new(p.x, p.y) - target).norm() < 1e-9
    });
    Ok(state)
}

/// Interpolate between two table points along polar coordinates.
///
/// Radius and bearing are blended separately so paths never cut inside the
/// inner radius the way straight chords through the base would.
fn polar_lerp(a: Vector2<f64>, b: Vector2<f64>, u: f64) -> Vector2<f64> {
    let (ra, pa) = (a.norm(), a.y.atan2(a.x));
    let (rb, pb) = (b.norm(), b.y.atan2(b.x));
    let r = ra + (rb - ra) * u;
    let p = pa + (pb - pa) * u;
    Vector2::new(r * p.cos(), r * p.sin())
}

// ---------------------------------------------------------------------------
// Scenes.
// ---------------------------------------------------------------------------

/// Table footprint objects must respect.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TableBounds {
    pub min: Vector2<f64>,
    pub max: Vector2<f64>,
}

/// Default table bounds: everything the overhead camera can see.
pub const TABLE: TableBounds = TableBounds {
    min: Vector2::new(0.05, -0.40),
    max: Vector2::new(0.80, 0.40),
};

/// Flat decal shape drawn on the table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObjShape {
    Square,
    Disc,
}

/// One manipulable (or distractor) object on the table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneObject {
    pub shape: ObjShape,
    /// Center position on the table plane (m).
    pub position: Vector2<f64>,
    /// Edge length (square) or diameter (disc), in meters.
    pub size: f64,
    /// Index into [`OBJECT_PALETTE`].
    pub color_id: usize,
}

impl SceneObject {
    /// Radius of the smallest disc containing the decal.
    fn circumradius(&self) -> f64 {
        match self.shape {
            ObjShape::Square => self.size * std::f64::consts::SQRT_2 / 2.0,
            ObjShape::Disc => self.size / 2.0,
        }
    }
}

/// Distinct, saturated object colors; procedural scenes assign them by
/// object index, so detection never has to disambiguate identical hues.
pub const OBJECT_PALETTE: [[f32; 3]; 5] = [
    [0.85, 0.08, 0.05],
    [0.95, 0.55, 0.05],
    [0.92, 0.88, 0.10],
    [0.05, 0.65, 0.08],
    [0.55, 0.27, 0.07],
];

/// Goal marker color, darker than the table and every palette entry.
pub const GOAL_COLOR: [f32; 3] = [0.22, 0.22, 0.22];

/// Componentwise tolerance for color-keyed detection.
pub const COLOR_TOL: f32 = 0.15;

/// Edge length of procedurally placed objects (m).
pub const DEFAULT_OBJECT_SIZE: f64 = 0.06;

/// Radius of the goal disc and of the success region (m).
pub const DEFAULT_GOAL_RADIUS: f64 = 0.05;

/// Full description of one episode's table contents.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub objects: Vec<SceneObject>,
    pub goal: Vector2<f64>,
    pub bounds: TableBounds,
    /// Seed the scene was generated from (0 for hand-built scenes).
    pub seed: u64,
}

/// Task parameters shared by the expert, the renderer, and evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyTask {
    /// Instruction identity carried into conditioning and policies.
    pub instruction_id: u32,
    /// Index into [`SceneSpec::objects`] of the object to move.
    pub target_object: usize,
    /// Success radius around the goal (m).
    pub goal_radius: f64,
}

impl Default for ToyTask {
    fn default() -> Self {
        ToyTask {
            instruction_id: 0,
            target_object: 0,
            goal_radius: DEFAULT_GOAL_RADIUS,
        }
    }
}

impl SceneSpec {
    /// Check bounds and pairwise clearance; errors name the offender.
    pub fn validate(&self) -> Result<(), ToyWorldError> {
        for (i, obj) in self.objects.iter().enumerate() {
            if obj.color_id >= OBJECT_PALETTE.len() {
                return Err(ToyWorldError::Scene(format!(
                    "object {i} color_id {} out of palette",
                    obj.color_id
                )));
            }
            if obj.size <= 0.0 {
                return Err(ToyWorldError::Scene(format!("object {i} size not positive")));
            }
            let half = obj.circumradius();
            let p = obj.position;
            if p.x - half < self.bounds.min.x
                || p.y - half < self.bounds.min.y
                || p.x + half > self.bounds.max.x
                || p.y + half > self.bounds.max.y
            {
                return Err(ToyWorldError::Scene(format!(
                    "object {i} leaves the table at ({:.3}, {:.3})",
                    p.x, p.y
                )));
            }
            for (j, other) in self.objects.iter().enumerate().skip(i + 1) {
                let gap = (p - other.position).norm() - half - other.circumradius();
                if gap < 0.01 {
                    return Err(ToyWorldError::Scene(format!(
                        "objects {i} and {j} closer than clearance"
                    )));
                }
            }
        }
        let g = self.goal;
        if g.x < self.bounds.min.x
            || g.y < self.bounds.min.y
            || g.x > self.bounds.max.x
            || g.y > self.bounds.max.y
        {
            return Err(ToyWorldError::Scene("goal off the table".into()));
        }
        Ok(())
    }
}

/// Sample a point uniformly by area inside the reachable sector.
fn sample_sector<R: Rng>(rng: &mut R) -> Vector2<f64> {
    let u: f64 = rng.gen();
    let r = (R_MIN * R_MIN + u * (R_MAX * R_MAX - R_MIN * R_MIN)).sqrt();
    let phi = rng.gen_range(-PHI_MAX..PHI_MAX);
    Vector2::new(r * phi.cos(), r * phi.sin())
}

fn in_bounds(p: Vector2<f64>, half: f64, b: &TableBounds) -> bool {
    p.x - half >= b.min.x && p.y - half >= b.min.y && p.x + half <= b.max.x && p.y + half <= b.max.y
}

/// Procedurally place a goal, a target object, and distractors.
///
/// Placement is rejection sampling inside the reachable sector: the goal
/// lands first, the target keeps at least 0.15 m from it so every episode
/// needs an actual carry, and distractors avoid the goal marker so success
/// checks stay unambiguous. Deterministic in `seed`.
pub fn generate_scene(
    task: &ToyTask,
    n_objects: usize,
    seed: u64,
) -> Result<SceneSpec, ToyWorldError> {
    if n_objects == 0 && task.target_object > 0 {
        return Err(ToyWorldError::Scene("target index beyond object count".into()));
    }
    if n_objects > OBJECT_PALETTE.len() {
        return Err(ToyWorldError::Scene(format!(
            "{n_objects} objects cannot get distinct colors"
        )));
    }
    let mut rng = stream(seed, &[tag::SCENE]);
    let half = DEFAULT_OBJECT_SIZE * std::f64::consts::SQRT_2 / 2.0;
    const TRIES: usize = 200;

    let mut goal = Vector2::zeros();
    let mut ok = false;
    for _ in 0..TRIES {
        goal = sample_sector(&mut rng);
        if in_bounds(goal, task.goal_radius, &TABLE) {
            ok = true;
            break;
        }
    }
    if !ok {
        return Err(ToyWorldError::Scene("no goal placement found".into()));
    }

    let mut objects: Vec<SceneObject> = Vec::with_capacity(n_objects);
    for i in 0..n_objects {
        let is_target = i == task.target_object;
        let mut placed = false;
        for _ in 0..TRIES {
            let p = sample_sector(&mut rng);
            if !in_bounds(p, half, &TABLE) {
                continue;
            }
            let d_goal = (p - goal).norm();
            if is_target && d_goal < 0.15 {
                continue;
            }
            // Distractors stay off the goal marker so the carried object
            // alone can sit there at episode end.
            if !is_target && d_goal < task.goal_radius + half + 0.02 {
                continue;
            }
            if objects
                .iter()
                .any(|o| (p - o.position).norm() - half - o.circumradius() < 0.01)
            {
                continue;
            }
            objects.push(SceneObject {
                shape: if is_target || rng.gen_bool(0.5) {
                    ObjShape::Square
                } else {
                    ObjShape::Disc
                },
                position: p,
                size: DEFAULT_OBJECT_SIZE,
                color_id: i,
            });
            placed = true;
            break;
        }
        if !placed {
            return Err(ToyWorldError::Scene(format!("no placement for object {i}")));
        }
    }

    let scene = SceneSpec { objects, goal, bounds: TABLE, seed };
    scene.validate()?;
    Ok(scene)
}

// ---------------------------------------------------------------------------
// Scene file format.
// ---------------------------------------------------------------------------

/// Serialize a scene to the line-oriented `toyscene v1` text form.
pub fn write_scene(scene: &SceneSpec, path: &Path) -> Result<(), ToyWorldError> {
    let mut out = String::new();
    writeln!(out, "toyscene v1 {}", scene.seed).unwrap();
    writeln!(
        out,
        "bounds {} {} {} {}",
        scene.bounds.min.x, scene.bounds.min.y, scene.bounds.max.x, scene.bounds.max.y
    )
    .unwrap();
    writeln!(out, "goal {} {}", scene.goal.x, scene.goal.y).unwrap();
    for o in &scene.objects {
        let shape = match o.shape {
            ObjShape::Square => "square",
            ObjShape::Disc => "disc",
        };
        writeln!(
            out,
            "object {shape} {} {} {} {}",
            o.position.x, o.position.y, o.size, o.color_id
        )
        .unwrap();
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Parse the `toyscene v1` text form back into a validated scene.
pub fn read_scene(path: &Path) -> Result<SceneSpec, ToyWorldError> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let head = lines.next().ok_or_else(|| ToyWorldError::Parse("empty file".into()))?;
    let mut hp = head.split_whitespace();
    if hp.next() != Some("toyscene") || hp.next() != Some("v1") {
        return Err(ToyWorldError::Parse("bad header".into()));
    }
    let seed: u64 = hp
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| ToyWorldError::Parse("bad seed".into()))?;

    fn floats(
        rest: &mut std::str::SplitWhitespace<'_>,
        n: usize,
        what: &str,
    ) -> Result<Vec<f64>, ToyWorldError> {
        let vals: Vec<f64> = rest.map_while(|t| t.parse().ok()).collect();
        if vals.len() != n {
            return Err(ToyWorldError::Parse(format!("{what}: expected {n} numbers")));
        }
        Ok(vals)
    }

    let mut bounds = None;
    let mut goal = None;
    let mut objects = Vec::new();
    for line in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("bounds") => {
                let v = floats(&mut parts, 4, "bounds")?;
                bounds = Some(TableBounds {
                    min: Vector2::new(v[0], v[1]),
                    max: Vector2::new(v[2], v[3]),
                });
            }
            Some("goal") => {
                let v = floats(&mut parts, 2, "goal")?;
                goal = Some(Vector2::new(v[0], v[1]));
            }
            Some("object") => {
                let shape = match parts.next() {
                    Some("square") => ObjShape::Square,
                    Some("disc") => ObjShape::Disc,
                    other => return Err(ToyWorldError::Parse(format!("bad shape {other:?}"))),
                };
                let v = floats(&mut parts, 4, "object")?;
                if v[3].fract() != 0.0 || v[3] < 0.0 {
                    return Err(ToyWorldError::Parse("color_id not an index".into()));
                }
                objects.push(SceneObject {
                    shape,
                    position: Vector2::new(v[0], v[1]),
                    size: v[2],
                    color_id: v[3] as usize,
                });
            }
            other => return Err(ToyWorldError::Parse(format!("unknown record {other:?}"))),
        }
    }
    let scene = SceneSpec {
        objects,
        goal: goal.ok_or_else(|| ToyWorldError::Parse("missing goal".into()))?,
        bounds: bounds.ok_or_else(|| ToyWorldError::Parse("missing bounds".into()))?,
        seed,
    };
    scene.validate()?;
    Ok(scene)
}

// ---------------------------------------------------------------------------
// Scripted expert.
// ---------------------------------------------------------------------------

/// Number of waypoints in every expert trajectory.
pub const EXPERT_LEN: usize = 80;
/// Waypoint index where the gripper closes on the target.
pub const GRASP_IDX: usize = 22;
/// Waypoint index where the gripper releases at the goal.
pub const RELEASE_IDX: usize = 58;

/// Expert demonstration plus its annotated key states.
#[derive(Debug, Clone)]
pub struct ExpertDemo {
    pub trajectory: Trajectory,
    pub keys: Vec<KeyState>,
}

/// Script a reach-carry-hold demonstration for `scene`'s target object.
///
/// Three phases on a fixed 80-step, 10 Hz grid: home to object (closing at
/// the grasp index), object to goal (opening at the release index), then a
/// hold at the goal. Ease-in/ease-out polar paths keep joint speeds inside
/// the feasibility bound; the result is audited before being returned.
pub fn scripted_expert(
    model: &RobotModel,
    scene: &SceneSpec,
    task: &ToyTask,
) -> Result<ExpertDemo, ToyWorldError> {
    let object = scene
        .objects
        .get(task.target_object)
        .ok_or_else(|| ToyWorldError::Scene("target index beyond object count".into()))?
        .position;
    let goal = scene.goal;
    let home = Vector2::new(0.44, 0.0);

    let mut waypoints = Vec::with_capacity(EXPERT_LEN);
    for i in 0..EXPERT_LEN {
        let (p, g) = if i < GRASP_IDX {
            let u = i as f64 / GRASP_IDX as f64;
            (polar_lerp(home, object, smoothstep(u)), 1.0)
        } else if i < RELEASE_IDX {
            let u = (i - GRASP_IDX) as f64 / (RELEASE_IDX - GRASP_IDX) as f64;
            (polar_lerp(object, goal, smoothstep(u)), 0.0)
        } else {
            (goal, 1.0)
        };
        let state = plan_state(model, p, g)?;
        // Divide rather than multiply by the step so waypoint times land
        // bit-exactly on the renderer's resampling grid.
        waypoints.push(Waypoint::new(i as f64 / TOY_FPS, state, Vec::new()));
    }

    let mut trajectory = Trajectory {
        waypoints,
        action_encoding: ActionEncoding::JointTarget,
        instruction_id: task.instruction_id,
    };
    recompute_actions(&mut trajectory);
    crate::trajectory::ensure_ee_cache(&mut trajectory, model);

    let keys = vec![
        KeyState {
            index: GRASP_IDX,
            label: KeyLabel::Grasp,
            anchor: trajectory.waypoints[GRASP_IDX].ee_pose,
        },
        KeyState {
            index: RELEASE_IDX,
            label: KeyLabel::Release,
            anchor: trajectory.waypoints[RELEASE_IDX].ee_pose,
        },
    ];

    let report = validate_feasibility(&trajectory, model, EXPERT_V_MAX);
    if !report.is_feasible() {
        return Err(ToyWorldError::Infeasible(format!("{report:?}")));
    }
    Ok(ExpertDemo { trajectory, keys })
}

// ---------------------------------------------------------------------------
// Object replay and composite rendering.
// ---------------------------------------------------------------------------

/// Grasp/release timing extracted from key states, in seconds.
#[derive(Debug, Clone, Copy)]
pub struct CarrySchedule {
    pub t_grasp: f64,
    pub t_release: f64,
}

impl CarrySchedule {
    /// Read the first grasp/release pair off a key list.
    pub fn from_keys(traj: &Trajectory, keys: &[KeyState]) -> Result<Self, ToyWorldError> {
        let t_of = |label: KeyLabel| {
            keys.iter()
                .find(|k| k.label == label)
                .and_then(|k| traj.waypoints.get(k.index))
                .map(|w| w.t)
        };
        match (t_of(KeyLabel::Grasp), t_of(KeyLabel::Release)) {
            (Some(g), Some(r)) if g < r => Ok(CarrySchedule { t_grasp: g, t_release: r }),
            _ => Err(ToyWorldError::Scene("keys missing ordered grasp/release pair".into())),
        }
    }
}

/// Target-object position per rendered frame under rigid carry replay.
///
/// The object rests at `start` before the grasp time, rides the end
/// effector's table-plane projection while `t_grasp <= t <= t_release`
/// (release included: the object inherits the pose it is let go at), and
/// stays put afterwards. Frame times follow the renderer's resampling
/// grid, so decals and robot pixels stay aligned.
pub fn object_positions(
    model: &RobotModel,
    traj: &Trajectory,
    schedule: CarrySchedule,
    start: Vector2<f64>,
    fps: f64,
) -> Result<Vec<Vector2<f64>>, ToyWorldError> {
    let states = crate::render::resample_states(traj, fps);
    let t0 = traj.waypoints.first().map(|w| w.t).unwrap_or(0.0);
    let ee_index = model.end_effector_index();
    let mut out = Vec::with_capacity(states.len());
    let mut pos = start;
    for (i, state) in states.iter().enumerate() {
        let t = t0 + i as f64 / fps;
        if t >= schedule.t_grasp - 1e-9 && t <= schedule.t_release + 1e-9 {
            let poses = forward_kinematics(model, state)?;
            let p = poses.pose(ee_index).translation;
            pos = Vector2::new(p.x, p.y);
        }
        out.push(pos);
    }
    Ok(out)
}

/// Overhead pinhole camera covering the full sector at `res` pixels square.
pub fn overhead_camera(res: usize) -> CameraRig {
    let f = 1.35 * res as f64;
    // Look straight down from 1 m above the sector's centroid (0.43, 0):
    // world +x maps to image right, world +y to image up.
    let flip = Matrix3::new(
        1.0, 0.0, 0.0, //
        0.0, -1.0, 0.0, //
        0.0, 0.0, -1.0,
    );
    let world_to_cam = Pose::new(flip, Vector3::zeros())
        .compose(&Pose::from_translation(Vector3::new(-0.43, 0.0, -1.0)));
    CameraRig::Fixed(CameraModel {
        fx: f,
        fy: f,
        cx: res as f64 / 2.0,
        cy: res as f64 / 2.0,
        width: res,
        height: res,
        extrinsics: world_to_cam,
    })
}

/// Table-plane point seen by each pixel of a fixed camera.
///
/// Computed once per camera: evaluation back-projects every frame through
/// the same grid, so the per-pixel rays are hoisted out of the loop.
pub struct TableGrid {
    pub width: usize,
    pub height: usize,
    /// Row-major plane hits; `None` where the ray escapes the table plane.
    pub points: Vec<Option<Vector2<f64>>>,
}

/// Back-project one pixel center onto the z = 0 table plane.
pub fn back_project(
    cam: &CameraModel,
    px: usize,
    py: usize,
) -> Result<Vector2<f64>, ToyWorldError> {
    let inv = cam.extrinsics.inverse();
    let origin = inv.translation;
    let dir = inv.rotation
        * Vector3::new(
            (px as f64 + 0.5 - cam.cx) / cam.fx,
            (py as f64 + 0.5 - cam.cy) / cam.fy,
            1.0,
        );
    if dir.z.abs() < 1e-12 {
        return Err(ToyWorldError::RayMiss(px, py));
    }
    let s = -origin.z / dir.z;
    if s <= 0.0 {
        return Err(ToyWorldError::RayMiss(px, py));
    }
    let p = origin + s * dir;
    Ok(Vector2::new(p.x, p.y))
}

/// Precompute the pixel-to-table map for a fixed rig.
pub fn table_points(rig: &CameraRig) -> Result<TableGrid, ToyWorldError> {
    let cam = match rig {
        CameraRig::Fixed(cam) => cam,
        _ => return Err(ToyWorldError::MovingCamera),
    };
    let mut points = Vec::with_capacity(cam.width * cam.height);
    for py in 0..cam.height {
        for px in 0..cam.width {
            points.push(back_project(cam, px, py).ok());
        }
    }
    Ok(TableGrid { width: cam.width, height: cam.height, points })
}

fn close_color(a: [f32; 3], b: [f32; 3], tol: f32) -> bool {
    (a[0] - b[0]).abs() <= tol && (a[1] - b[1]).abs() <= tol && (a[2] - b[2]).abs() <= tol
}

/// Composite scene decals under an already-rendered robot frame.
///
/// Robot pixels (anything differing from the flat background fill) win;
/// where the table shows through, the goal disc is drawn first and objects
/// over it in index order, with the target taken from `target_pos` rather
/// than its scene rest position. The goal marker radius is the fixed
/// [`DEFAULT_GOAL_RADIUS`]; task success radii vary independently.
pub fn compose_full_frame(
    robot: &Frame,
    grid: &TableGrid,
    scene: &SceneSpec,
    target_object: usize,
    target_pos: Vector2<f64>,
) -> Frame {
    let mut frame = robot.clone();
    for py in 0..grid.height {
        for px in 0..grid.width {
            if frame.pixel(px, py) != BACKGROUND {
                continue;
            }
            let Some(p) = grid.points[py * grid.width + px] else {
                continue;
            };
            let mut color = None;
            if (p - scene.goal).norm() <= DEFAULT_GOAL_RADIUS {
                color = Some(GOAL_COLOR);
            }
            for (i, obj) in scene.objects.iter().enumerate() {
                let center = if i == target_object { target_pos } else { obj.position };
                let hit = match obj.shape {
                    ObjShape::Square => {
                        (p.x - center.x).abs() <= obj.size / 2.0
                            && (p.y - center.y).abs() <= obj.size / 2.0
                    }
                    ObjShape::Disc => (p - center).norm() <= obj.size / 2.0,
                };
                if hit {
                    color = Some(OBJECT_PALETTE[obj.color_id]);
                }
            }
            if let Some(c) = color {
                frame.put_pixel(px, py, c);
            }
        }
    }
    frame
}

/// Render a demonstration with scene decals composited under the robot.
///
/// The robot layer is exactly [`render_robot_only`]'s output; only pixels
/// left at the background color receive decals, so robot-layer parity with
/// robot-only renders is structural rather than approximate.
pub fn render_full_scene(
    model: &RobotModel,
    demo: &ExpertDemo,
    scene: &SceneSpec,
    task: &ToyTask,
    rig: &CameraRig,
    opts: &RenderOptions,
) -> Result<FrameSequence, ToyWorldError> {
    let robot = render_robot_only(model, &demo.trajectory, rig, opts)?;
    let schedule = CarrySchedule::from_keys(&demo.trajectory, &demo.keys)?;
    let start = scene
        .objects
        .get(task.target_object)
        .ok_or_else(|| ToyWorldError::Scene("target index beyond object count".into()))?
        .position;
    let track = object_positions(model, &demo.trajectory, schedule, start, opts.fps)?;
    if track.len() != robot.frames.len() {
        return Err(ToyWorldError::Scene("object track and frame count diverge".into()));
    }
    let grid = table_points(rig)?;
    let frames: Vec<Frame> = robot
        .frames
        .par_iter()
        .zip(track.par_iter())
        .map(|(f, pos)| compose_full_frame(f, &grid, scene, task.target_object, *pos))
        .collect();
    Ok(FrameSequence { frames, fps: robot.fps })
}

// ---------------------------------------------------------------------------
// Consistency measurement.
// ---------------------------------------------------------------------------

/// Outcome of locating the target object in generated pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ConsistencyMeasure {
    /// Median detected position was this far (m) from the grasp anchor.
    Detected(f64),
    /// Too few target-colored pixels in the early frames to localize.
    Undetected,
}

/// Distance charged when detection fails: half the table diagonal.
pub fn undetected_penalty(bounds: &TableBounds) -> f64 {
    (bounds.max - bounds.min).norm() / 2.0
}

/// Measure whether generated pixels keep the target where physics put it.
///
/// Early frames (the first half of the pre-grasp prefix) are scanned for
/// pixels within [`COLOR_TOL`] of the target's palette color; each frame
/// with at least two hits contributes its mean back-projected position,
/// and the componentwise median over frames is compared to the grasp
/// anchor's table position.
pub fn measure_consistency(
    generated: &FrameSequence,
    traj: &Trajectory,
    keys: &[KeyState],
    task: &ToyTask,
    scene: &SceneSpec,
    rig: &CameraRig,
) -> Result<ConsistencyMeasure, ToyWorldError> {
    let grasp = keys
        .iter()
        .find(|k| k.label == KeyLabel::Grasp)
        .ok_or_else(|| ToyWorldError::Scene("keys missing grasp".into()))?;
    let anchor = Vector2::new(grasp.anchor.translation.x, grasp.anchor.translation.y);
    let color = OBJECT_PALETTE[scene
        .objects
        .get(task.target_object)
        .ok_or_else(|| ToyWorldError::Scene("target index beyond object count".into()))?
        .color_id];

    // Map the grasp waypoint onto the rendered frame grid.
    let t0 = traj.waypoints.first().map(|w| w.t).unwrap_or(0.0);
    let t_grasp = traj
        .waypoints
        .get(grasp.index)
        .map(|w| w.t)
        .ok_or_else(|| ToyWorldError::Scene("grasp index beyond trajectory".into()))?;
    let grasp_frame = ((t_grasp - t0) * generated.fps).round() as usize;
    let early = (grasp_frame / 2).max(1).min(generated.frames.len());

    let grid = table_points(rig)?;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for frame in &generated.frames[..early] {
        let mut sum = Vector2::zeros();
        let mut count = 0usize;
        for py in 0..grid.height {
            for px in 0..grid.width {
                if close_color(frame.pixel(px, py), color, COLOR_TOL) {
                    if let Some(p) = grid.points[py * grid.width + px] {
                        sum += p;
                        count += 1;
                    }
                }
            }
        }
        if count >= 2 {
            xs.push(sum.x / count as f64);
            ys.push(sum.y / count as f64);
        }
    }
    if xs.is_empty() {
        return Ok(ConsistencyMeasure::Undetected);
    }
    let median = |v: &mut Vec<f64>| {
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = v.len();
        if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        }
    };
    let m = Vector2::new(median(&mut xs), median(&mut ys));
    Ok(ConsistencyMeasure::Detected((m - anchor).norm()))
}

// ---------------------------------------------------------------------------
// Behavior-cloned policy.
// ---------------------------------------------------------------------------

/// Hyperparameters of the visuomotor policy network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub height: usize,
    pub width: usize,
    pub c1: usize,
    pub c2: usize,
    pub hidden: usize,
    pub dof: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig { height: 24, width: 24, c1: 8, c2: 16, hidden: 64, dof: 3 }
    }
}

impl PolicyConfig {
    fn validate(&self) -> Result<(), ToyWorldError> {
        if self.height == 0 || self.width == 0 || self.height % 4 != 0 || self.width % 4 != 0 {
            return Err(ToyWorldError::Config(
                "frame sides must be positive multiples of 4".into(),
            ));
        }
        if self.c1 == 0 || self.c2 == 0 || self.hidden == 0 || self.dof == 0 {
            return Err(ToyWorldError::Config("zero-width layer".into()));
        }
        Ok(())
    }

    /// Flattened feature length entering the first dense layer: pooled
    /// conv features plus the gripper scalar.
    fn flat_len(&self) -> usize {
        self.c2 * (self.height / 4) * (self.width / 4) + 1
    }
}

/// Caps policy size well under anything that could hide a lookup table.
pub const POLICY_PARAM_CAP: usize = 1_000_000;

/// Intermediate activations retained for the backward pass.
pub struct PolicyCache {
    input: Tensor,
    a1_pre: Tensor,
    a1: Tensor,
    p1: Tensor,
    a2_pre: Tensor,
    a2: Tensor,
    flat: Vec<f64>,
    h_pre: Vec<f64>,
    h: Vec<f64>,
}

/// Two-conv, two-dense network mapping a frame and gripper state to the
/// next joint target and gripper command.
pub struct PolicyNet {
    cfg: PolicyConfig,
    conv1_w: Span,
    conv1_b: Span,
    conv2_w: Span,
    conv2_b: Span,
    fc1_w: Span,
    fc1_b: Span,
    fc2_w: Span,
    fc2_b: Span,
    layout: Vec<(String, Span)>,
}

impl PolicyNet {
    pub fn new(cfg: PolicyConfig) -> Result<Self, ToyWorldError> {
        cfg.validate()?;
        let mut b = diffusion::SpanBuilder::default();
        let conv1_w = b.register("conv1_w", cfg.c1 * FRAME_CHANNELS * 9);
        let conv1_b = b.register("conv1_b", cfg.c1);
        let conv2_w = b.register("conv2_w", cfg.c2 * cfg.c1 * 9);
        let conv2_b = b.register("conv2_b", cfg.c2);
        let flat = cfg.flat_len();
        let fc1_w = b.register("fc1_w", cfg.hidden * flat);
        let fc1_b = b.register("fc1_b", cfg.hidden);
        let out = cfg.dof + 1;
        let fc2_w = b.register("fc2_w", out * cfg.hidden);
        let fc2_b = b.register("fc2_b", out);
        if b.next > POLICY_PARAM_CAP {
            return Err(ToyWorldError::Config(format!(
                "{} parameters exceed the {POLICY_PARAM_CAP} cap",
                b.next
            )));
        }
        Ok(PolicyNet {
            cfg,
            conv1_w,
            conv1_b,
            conv2_w,
            conv2_b,
            fc1_w,
            fc1_b,
            fc2_w,
            fc2_b,
            layout: b.layout,
        })
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.cfg
    }

    pub fn param_count(&self) -> usize {
        self.layout.iter().map(|(_, s)| s.len).sum()
    }

    /// Uniform fan-in initialization, zero biases, seeded stream.
    pub fn init_params(&self, seed: u64) -> ParamStore {
        let mut p = ParamStore::from_layout(vec![0.0; self.param_count()], self.layout.clone());
        let mut rng = stream(seed, &[tag::POLICY_INIT]);
        let mut fill = |span: Span, fan_in: usize, p: &mut ParamStore| {
            let bound = (6.0 / fan_in as f64).sqrt();
            for v in p.slice_mut(span) {
                *v = rng.gen_range(-bound..bound);
            }
        };
        fill(self.conv1_w, FRAME_CHANNELS * 9, &mut p);
        fill(self.conv2_w, self.cfg.c1 * 9, &mut p);
        fill(self.fc1_w, self.cfg.flat_len(), &mut p);
        fill(self.fc2_w, self.cfg.hidden, &mut p);
        p
    }

    /// Predict `[joint targets.., gripper]` from a frame and gripper state.
    pub fn forward(
        &self,
        p: &ParamStore,
        frame: &Tensor,
        gripper: f64,
    ) -> Result<(Vec<f64>, PolicyCache), ToyWorldError> {
        let cfg = &self.cfg;
        if frame.c != FRAME_CHANNELS || frame.h != cfg.height || frame.w != cfg.width {
            return Err(ToyWorldError::Dataset(format!(
                "frame shape {}x{}x{} does not match policy {}x{}x{}",
                frame.c, frame.h, frame.w, FRAME_CHANNELS, cfg.height, cfg.width
            )));
        }
        let a1_pre = diffusion::conv3x3(frame, p.slice(self.conv1_w), p.slice(self.conv1_b), cfg.c1);
        let a1 = diffusion::silu(&a1_pre);
        let p1 = diffusion::avg_pool2(&a1);
        let a2_pre = diffusion::conv3x3(&p1, p.slice(self.conv2_w), p.slice(self.conv2_b), cfg.c2);
        let a2 = diffusion::silu(&a2_pre);
        let p2 = diffusion::avg_pool2(&a2);
        let mut flat = p2.data.clone();
        flat.push(gripper);
        let h_pre = diffusion::linear(p.slice(self.fc1_w), p.slice(self.fc1_b), &flat, cfg.hidden);
        let h = diffusion::silu_vec(&h_pre);
        let out = diffusion::linear(p.slice(self.fc2_w), p.slice(self.fc2_b), &h, cfg.dof + 1);
        Ok((out, PolicyCache { input: frame.clone(), a1_pre, a1, p1, a2_pre, a2, flat, h_pre, h }))
    }

    /// Accumulate parameter gradients for an output-side gradient.
    fn backward(&self, p: &ParamStore, cache: &PolicyCache, g_out: &[f64], grads: &mut [f64]) {
        macro_rules! gslices {
            ($w:expr, $b:expr) => {{
                let (wo, wl, bo, bl) = ($w.offset, $w.len, $b.offset, $b.len);
                debug_assert!(wo + wl <= bo);
                let (head, tail) = grads.split_at_mut(bo);
                (&mut head[wo..wo + wl], &mut tail[..bl])
            }};
        }
        let g_h;
        {
            let (gw, gb) = gslices!(self.fc2_w, self.fc2_b);
            g_h = diffusion::linear_backward(p.slice(self.fc2_w), &cache.h, g_out, gw, gb);
        }
        let g_h_pre = diffusion::silu_vec_backward(&cache.h_pre, &g_h);
        let g_flat;
        {
            let (gw, gb) = gslices!(self.fc1_w, self.fc1_b);
            g_flat = diffusion::linear_backward(p.slice(self.fc1_w), &cache.flat, &g_h_pre, gw, gb);
        }
        // The gripper scalar rides the tail of the flattened vector; its
        // gradient is input-side and dropped with the rest of the input.
        let mut g_p2 = Tensor::zeros(self.cfg.c2, self.cfg.height / 4, self.cfg.width / 4);
        g_p2.data.copy_from_slice(&g_flat[..g_flat.len() - 1]);
        let g_a2 = diffusion::avg_pool2_backward(&g_p2, cache.a2.h, cache.a2.w);
        let g_a2_pre = diffusion::silu_backward(&cache.a2_pre, &g_a2);
        let g_p1;
        {
            let (gw, gb) = gslices!(self.conv2_w, self.conv2_b);
            g_p1 = diffusion::conv3x3_backward(
                &cache.p1,
                p.slice(self.conv2_w),
                self.cfg.c2,
                &g_a2_pre,
                gw,
                gb,
            );
        }
        let g_a1 = diffusion::avg_pool2_backward(&g_p1, cache.a1.h, cache.a1.w);
        let g_a1_pre = diffusion::silu_backward(&cache.a1_pre, &g_a1);
        {
            let (gw, gb) = gslices!(self.conv1_w, self.conv1_b);
            let _ = diffusion::conv3x3_backward(
                &cache.input,
                p.slice(self.conv1_w),
                self.cfg.c1,
                &g_a1_pre,
                gw,
                gb,
            );
        }
    }
}

/// One behavior-cloning example: frame in, expert action out.
#[derive(Debug, Clone)]
pub struct PolicyExample {
    pub frame: Tensor,
    pub gripper: f64,
    /// Regression target `[joint targets.., gripper command]`.
    pub action: Vec<f64>,
}

/// Pair frames with the expert actions recorded at the same indices.
///
/// Frame `i` is the observation before executing waypoint `i`'s action,
/// so counts must match exactly; silent truncation would misalign pairs.
pub fn policy_dataset(
    pairs: &[(FrameSequence, Trajectory)],
) -> Result<Vec<PolicyExample>, ToyWorldError> {
    let mut out = Vec::new();
    for (idx, (frames, traj)) in pairs.iter().enumerate() {
        if traj.action_encoding != ActionEncoding::JointTarget {
            return Err(ToyWorldError::Dataset(format!(
                "pair {idx}: action encoding is {}, policies clone joint targets",
                traj.action_encoding
            )));
        }
        if frames.frames.len() != traj.waypoints.len() {
            return Err(ToyWorldError::Dataset(format!(
                "pair {idx}: {} frames vs {} waypoints",
                frames.frames.len(),
                traj.waypoints.len()
            )));
        }
        for (frame, wp) in frames.frames.iter().zip(&traj.waypoints) {
            out.push(PolicyExample {
                frame: Tensor::from_frames(std::slice::from_ref(frame))?,
                gripper: wp.state.gripper,
                action: wp.action.clone(),
            });
        }
    }
    if out.is_empty() {
        return Err(ToyWorldError::Dataset("no examples".into()));
    }
    Ok(out)
}

/// Trained policy: network shape plus parameters and the loss history.
pub struct PolicyModel {
    pub net: PolicyNet,
    pub params: ParamStore,
    pub loss_curve: Vec<f64>,
}

/// Behavior-clone a policy with mini-batch Adam on mean squared error.
///
/// Mirrors the generator's training loop: batches are drawn by a seeded
/// per-epoch shuffle, per-example gradients are computed in parallel but
/// summed in dataset order, and non-finite losses abort with the epoch
/// and batch recorded.
pub fn train_policy(
    net: &PolicyNet,
    examples: &[PolicyExample],
    tc: &TrainConfig,
) -> Result<PolicyModel, ToyWorldError> {
    if examples.is_empty() {
        return Err(ToyWorldError::Dataset("no examples".into()));
    }
    let dof = net.cfg.dof;
    for (i, ex) in examples.iter().enumerate() {
        if ex.action.len() != dof + 1 {
            return Err(ToyWorldError::Dataset(format!(
                "example {i}: action length {} != dof + 1",
                ex.action.len()
            )));
        }
    }
    let mut params = net.init_params(tc.seed);
    let mut adam = Adam::new(tc.lr, params.data.len());
    let mut loss_curve = Vec::with_capacity(tc.epochs);
    let n = examples.len();
    for epoch in 0..tc.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = stream(tc.seed, &[tag::POLICY_EPOCH, epoch as u64]);
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0;
        for (batch_no, batch) in order.chunks(tc.batch_size.max(1)).enumerate() {
            let results: Vec<(f64, Vec<f64>)> = batch
                .par_iter()
                .map(|&idx| {
                    let ex = &examples[idx];
                    let (out, cache) = net.forward(&params, &ex.frame, ex.gripper)?;
                    let mut g_out = vec![0.0; out.len()];
                    let mut loss = 0.0;
                    for k in 0..out.len() {
                        let d = out[k] - ex.action[k];
                        loss += d * d;
                        g_out[k] = 2.0 * d / out.len() as f64;
                    }
                    loss /= out.len() as f64;
                    let mut g = vec![0.0; params.data.len()];
                    net.backward(&params, &cache, &g_out, &mut g);
                    Ok((loss, g))
                })
                .collect::<Result<_, ToyWorldError>>()?;
            let scale = 1.0 / batch.len() as f64;
            let mut grads = vec![0.0; params.data.len()];
            let mut batch_loss = 0.0;
            for (loss, g) in &results {
                batch_loss += loss * scale;
                for (acc, v) in grads.iter_mut().zip(g) {
                    *acc += v * scale;
                }
            }
            if !batch_loss.is_finite() {
                return Err(ToyWorldError::Diffusion(DiffusionError::Divergence {
                    epoch,
                    batch: batch_no,
                    loss: batch_loss,
                }));
            }
            adam.step(&mut params.data, &grads);
            epoch_loss += batch_loss * batch.len() as f64 / n as f64;
        }
        loss_curve.push(epoch_loss);
    }
    Ok(PolicyModel { net: PolicyNet::new(net.cfg)?, params, loss_curve })
}

// ---------------------------------------------------------------------------
// Closed-loop rollout and evaluation.
// ---------------------------------------------------------------------------

/// Largest joint move the rollout integrator applies per step (rad).
pub const MAX_JOINT_STEP: f64 = 0.25;
/// Gripper threshold below which the hand counts as closed.
pub const GRIP_CLOSE: f64 = 0.2;
/// End-effector capture radius for attaching the object (m).
pub const ATTACH_RADIUS: f64 = 0.045;
/// Rollout horizon in control steps.
pub const ROLLOUT_HORIZON: usize = 80;

/// Outcome of one closed-loop policy episode.
#[derive(Debug, Clone)]
pub struct RolloutOutcome {
    pub success: bool,
    /// Final distance between the target object and the goal (m).
    pub final_distance: f64,
    /// Target object position after the last step.
    pub object: Vector2<f64>,
    /// Executed joint states, one per control step.
    pub states: Vec<JointState>,
}

/// Run the policy closed loop in the simulated scene.
///
/// Each step renders the composite observation, queries the policy for a
/// joint target, and integrates toward it under a per-joint step cap with
/// limits clamped. The object attaches when the closed gripper is within
/// the capture radius and detaches when it opens; success requires the
/// object resting inside the goal radius, released, at the horizon.
pub fn rollout_policy(
    model: &RobotModel,
    policy: &PolicyModel,
    scene: &SceneSpec,
    task: &ToyTask,
    rig: &CameraRig,
) -> Result<RolloutOutcome, ToyWorldError> {
    if policy.net.cfg.dof != model.dof() {
        return Err(ToyWorldError::Config(format!(
            "policy drives {} joints, arm has {}",
            policy.net.cfg.dof,
            model.dof()
        )));
    }
    let grid = table_points(rig)?;
    let opts = RenderOptions { fps: TOY_FPS, ..RenderOptions::default() };
    let ee_index = model.end_effector_index();
    let mut object = scene
        .objects
        .get(task.target_object)
        .ok_or_else(|| ToyWorldError::Scene("target index beyond object count".into()))?
        .position;
    let mut state = home_state(model)?;
    let mut attached = false;
    let mut states = Vec::with_capacity(ROLLOUT_HORIZON);
    for _ in 0..ROLLOUT_HORIZON {
        let robot = render_state(model, &state, rig, &opts);
        let obs = compose_full_frame(&robot, &grid, scene, task.target_object, object);
        let tensor = Tensor::from_frames(std::slice::from_ref(&obs))?;
        let (out, _) = policy.net.forward(&policy.params, &tensor, state.gripper)?;
        let (targets, grip) = out.split_at(policy.net.cfg.dof);

        let mut cand = state.clone();
        for (pos, &target) in cand.positions.iter_mut().zip(targets) {
            *pos += (target - *pos).clamp(-MAX_JOINT_STEP, MAX_JOINT_STEP);
        }
        cand.gripper = grip[0];
        let next = model.clamp_state(&cand);

        let poses = forward_kinematics(model, &next)?;
        let t = poses.pose(ee_index).translation;
        let ee = Vector2::new(t.x, t.y);
        if attached {
            if next.gripper > GRIP_CLOSE {
                attached = false;
            } else {
                object = ee;
            }
        } else if next.gripper <= GRIP_CLOSE && (ee - object).norm() <= ATTACH_RADIUS {
            attached = true;
            object = ee;
        }
        states.push(next.clone());
        state = next;
    }
    let final_distance = (object - scene.goal).norm();
    Ok(RolloutOutcome {
        success: !attached && final_distance <= task.goal_radius,
        final_distance,
        object,
        states,
    })
}

/// Aggregate result of a batch policy evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub episodes: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub mean_final_distance: f64,
}

/// Evaluate a policy on `episodes` procedurally generated scenes.
///
/// Episode `i` draws its scene from an independent stream of `seed`, so
/// reports are reproducible and episodes are order-independent; rollouts
/// run in parallel and are reduced in episode order.
pub fn evaluate_policy(
    model: &RobotModel,
    policy: &PolicyModel,
    task: &ToyTask,
    n_objects: usize,
    episodes: usize,
    seed: u64,
) -> Result<EvalReport, ToyWorldError> {
    if episodes == 0 {
        return Err(ToyWorldError::Config("zero episodes".into()));
    }
    if policy.net.cfg.height != policy.net.cfg.width {
        return Err(ToyWorldError::Config("evaluation camera needs square frames".into()));
    }
    let rig = overhead_camera(policy.net.cfg.height);
    let outcomes: Vec<RolloutOutcome> = (0..episodes)
        .into_par_iter()
        .map(|ep| {
            let scene_seed = stream(seed, &[tag::EVAL, ep as u64]).gen::<u64>();
            let scene = generate_scene(task, n_objects, scene_seed)?;
            rollout_policy(model, policy, &scene, task, &rig)
        })
        .collect::<Result<_, ToyWorldError>>()?;
    let successes = outcomes.iter().filter(|o| o.success).count();
    let mean_final_distance =
        outcomes.iter().map(|o| o.final_distance).sum::<f64>() / episodes as f64;
    Ok(EvalReport {
        episodes,
        successes,
        success_rate: successes as f64 / episodes as f64,
        mean_final_distance,
    })
}
