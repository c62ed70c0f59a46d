//! Demonstration trajectories and heuristic expansion.
//!
//! A demonstration is a timed sequence of joint states with per-step
//! actions. Expansion grows one demonstration into many: key states are
//! perturbed inside a bounded box, the object-centric stretch of motion
//! around each key is rigidly retargeted onto the perturbed anchor, and the
//! transit motion in between is offset-blended so the result stays smooth
//! and kinematically feasible.
//!
//! Text formats (space-separated fields, floats printed with the shortest
//! round-trip representation):
//!
//! - Trajectory file: header `traj v1 <action_encoding> <joints> <instruction_id>`,
//!   then one waypoint per line: `t p0 .. p{J-1} gripper a0 .. a{A-1}`.
//!   The action arity A is J+1 for `joint_target` (next waypoint's positions
//!   plus gripper) and 7 for `ee_delta` (translation delta, rotation log,
//!   gripper delta).
//! - Key sidecar: one key per line: `index label tx ty tz qw qx qy qz`.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geom::{log_rotation, smoothstep, Pose};
use crate::kinematics::{
    fk_unchecked, inverse_kinematics, IkOptions, JointState, KinematicsError, RobotModel,
};

/// How the per-waypoint action vector is to be interpreted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionEncoding {
    /// Next waypoint's joint positions followed by its gripper command.
    JointTarget,
    /// End-effector translation delta, rotation log, and gripper delta.
    EeDelta,
}

impl ActionEncoding {
    /// Action vector arity for a robot with `dof` actuated joints.
    pub fn action_len(&self, dof: usize) -> usize {
        match self {
            ActionEncoding::JointTarget => dof + 1,
            ActionEncoding::EeDelta => 7,
        }
    }
}

impl fmt::Display for ActionEncoding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ActionEncoding::JointTarget => "joint_target",
            ActionEncoding::EeDelta => "ee_delta",
        })
    }
}

impl FromStr for ActionEncoding {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "joint_target" => Ok(ActionEncoding::JointTarget),
            "ee_delta" => Ok(ActionEncoding::EeDelta),
            other => Err(format!("unknown action encoding `{other}`")),
        }
    }
}

/// One timed sample of the demonstration.
#[derive(Debug, Clone, PartialEq)]
pub struct Waypoint {
    pub t: f64,
    pub state: JointState,
    pub action: Vec<f64>,
    /// End-effector pose in the base frame; meaningful only when
    /// `ee_cached` is set, and then it must match forward kinematics of
    /// `state` within `EE_CACHE_TOL`.
    pub ee_pose: Pose,
    pub ee_cached: bool,
}

/// Largest tolerated gap between a cached end-effector pose and the pose
/// recomputed from the waypoint's state.
pub const EE_CACHE_TOL: f64 = 1e-6;

impl Waypoint {
    pub fn new(t: f64, state: JointState, action: Vec<f64>) -> Self {
        Waypoint { t, state, action, ee_pose: Pose::identity(), ee_cached: false }
    }
}

/// An ordered demonstration bound to one task instruction.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub waypoints: Vec<Waypoint>,
    pub action_encoding: ActionEncoding,
    pub instruction_id: u32,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.waypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.waypoints.is_empty()
    }

    /// Structural checks: length, strictly increasing timestamps, state
    /// validity against `model`, and action arity.
    pub fn validate(&self, model: &RobotModel) -> Result<(), TrajectoryError> {
        if self.waypoints.len() < 2 {
            return Err(TrajectoryError::TooShort { len: self.waypoints.len() });
        }
        let arity = self.action_encoding.action_len(model.dof());
        for (i, wp) in self.waypoints.iter().enumerate() {
            if i > 0 && wp.t <= self.waypoints[i - 1].t {
                return Err(TrajectoryError::TimeOrder { index: i });
            }
            wp.state
                .validate(model)
                .map_err(|source| TrajectoryError::State { index: i, source })?;
            if wp.action.len() != arity {
                return Err(TrajectoryError::ActionLength {
                    index: i,
                    expected: arity,
                    got: wp.action.len(),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum TrajectoryError {
    #[error("trajectory needs at least 2 waypoints, got {len}")]
    TooShort { len: usize },
    #[error("timestamps must increase strictly (waypoint {index})")]
    TimeOrder { index: usize },
    #[error("invalid state at waypoint {index}: {source}")]
    State {
        index: usize,
        #[source]
        source: KinematicsError,
    },
    #[error("waypoint {index} action has {got} entries, expected {expected}")]
    ActionLength { index: usize, expected: usize, got: usize },
}

/// Semantic label of a key state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeyLabel {
    Approach,
    Contact,
    Grasp,
    Release,
    Custom,
}

impl fmt::Display for KeyLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KeyLabel::Approach => "approach",
            KeyLabel::Contact => "contact",
            KeyLabel::Grasp => "grasp",
            KeyLabel::Release => "release",
            KeyLabel::Custom => "custom",
        })
    }
}

impl FromStr for KeyLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "approach" => Ok(KeyLabel::Approach),
            "contact" => Ok(KeyLabel::Contact),
            "grasp" => Ok(KeyLabel::Grasp),
            "release" => Ok(KeyLabel::Release),
            "custom" => Ok(KeyLabel::Custom),
            other => Err(format!("unknown key label `{other}`")),
        }
    }
}

/// A manually grounded moment of object interaction. The anchor pose
/// defines the object-centric frame the surrounding motion is expressed in.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyState {
    pub index: usize,
    pub label: KeyLabel,
    pub anchor: Pose,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegmentKind {
    ObjectCentric,
    Transit,
}

/// Half-open waypoint index interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
    pub kind: SegmentKind,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }

    pub fn contains(&self, index: usize) -> bool {
        self.start <= index && index < self.end
    }
}

/// Bounds for key-state perturbation draws.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbationSpec {
    pub horizontal_bound: f64,
    pub vertical_bound: f64,
    pub yaw_bound: f64,
    pub rng_seed: u64,
}

impl Default for PerturbationSpec {
    fn default() -> Self {
        PerturbationSpec {
            horizontal_bound: 0.10,
            vertical_bound: 0.0,
            yaw_bound: 0.0,
            rng_seed: 0,
        }
    }
}

impl PerturbationSpec {
    pub fn validate(&self) -> Result<(), SpecError> {
        for (name, value) in [
            ("horizontal_bound", self.horizontal_bound),
            ("vertical_bound", self.vertical_bound),
            ("yaw_bound", self.yaw_bound),
        ] {
            if !(value >= 0.0 && value.is_finite()) {
                return Err(SpecError::InvalidBound { name, value });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum SpecError {
    #[error("{name} must be a finite non-negative number, got {value}")]
    InvalidBound { name: &'static str, value: f64 },
}

#[derive(Debug, Error)]
pub enum KeyError {
    #[error("key index {index} outside trajectory of {len} waypoints")]
    OutOfRange { index: usize, len: usize },
    #[error("key indices must increase strictly (position {position})")]
    NotIncreasing { position: usize },
}

/// Knobs for trajectory expansion.
#[derive(Debug, Clone, Copy)]
pub struct ExpansionOptions {
    /// Object-centric half window: the segment spans from `window` waypoints
    /// before a key to `window` after, clipped at trajectory ends.
    pub window: usize,
    /// Redraw budget for infeasible perturbations before giving up.
    pub max_resamples: usize,
    /// Per-joint velocity bound on the stitched output, rad/s or m/s.
    pub v_max: f64,
}

impl Default for ExpansionOptions {
    fn default() -> Self {
        ExpansionOptions { window: 10, max_resamples: 20, v_max: 1.5 }
    }
}

/// Split a trajectory into alternating transit and object-centric segments.
///
/// Each key claims the half-open window `[key - window, key + window)`
/// clipped to the trajectory; overlapping windows of neighbouring keys are
/// split at the midpoint between the two key indices. No keys means the
/// whole trajectory is a single transit segment (a no-op expansion).
pub fn segment_trajectory(
    traj: &Trajectory,
    keys: &[KeyState],
    window: usize,
) -> Result<Vec<Segment>, KeyError> {
    let n = traj.len();
    validate_keys(keys, n)?;
    if keys.is_empty() {
        return Ok(vec![Segment { start: 0, end: n, kind: SegmentKind::Transit }]);
    }

    let mut spans: Vec<(usize, usize)> = keys
        .iter()
        .map(|k| {
            let start = k.index.saturating_sub(window);
            let end = (k.index + window).max(k.index + 1).min(n);
            (start, end)
        })
        .collect();
    for i in 1..spans.len() {
        if spans[i].0 < spans[i - 1].1 {
            // Windows collide: hand each waypoint to the nearer key.
            let mid = (keys[i - 1].index + keys[i].index + 1) / 2;
            spans[i - 1].1 = mid;
            spans[i].0 = mid;
        }
    }

    let mut segments = Vec::new();
    let mut cursor = 0;
    for &(start, end) in &spans {
        if cursor < start {
            segments.push(Segment { start: cursor, end: start, kind: SegmentKind::Transit });
        }
        segments.push(Segment { start, end, kind: SegmentKind::ObjectCentric });
        cursor = end;
    }
    if cursor < n {
        segments.push(Segment { start: cursor, end: n, kind: SegmentKind::Transit });
    }
    debug_assert!(segments.windows(2).all(|s| s[0].end == s[1].start));
    debug_assert_eq!(segments.last().map(|s| s.end), Some(n));
    Ok(segments)
}

fn validate_keys(keys: &[KeyState], len: usize) -> Result<(), KeyError> {
    for (position, k) in keys.iter().enumerate() {
        if k.index >= len {
            return Err(KeyError::OutOfRange { index: k.index, len });
        }
        if position > 0 && k.index <= keys[position - 1].index {
            return Err(KeyError::NotIncreasing { position });
        }
    }
    Ok(())
}

/// Draw a perturbed copy of each key: the anchor is translated by
/// `(δx, δy, δz)` and rotated about world z by `δψ`, every component
/// uniform within its bound. Labels and indices are untouched. Draw order
/// is fixed (x, y, z, yaw per key) so output is a pure function of the
/// stream state.
pub fn perturb_key_states(
    keys: &[KeyState],
    spec: &PerturbationSpec,
    rng: &mut ChaCha8Rng,
) -> Vec<KeyState> {
    debug_assert!(spec.validate().is_ok());
    keys.iter()
        .map(|k| {
            let dx = rng.gen_range(-1.0..=1.0) * spec.horizontal_bound;
            let dy = rng.gen_range(-1.0..=1.0) * spec.horizontal_bound;
            let dz = rng.gen_range(-1.0..=1.0) * spec.vertical_bound;
            let dyaw = rng.gen_range(-1.0..=1.0) * spec.yaw_bound;
            let spun = Pose::rotation_z(dyaw).compose(&Pose::new(
                k.anchor.rotation,
                Vector3::zeros(),
            ));
            KeyState {
                index: k.index,
                label: k.label,
                anchor: Pose::new(
                    spun.rotation,
                    k.anchor.translation + Vector3::new(dx, dy, dz),
                ),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Error)]
pub enum RetargetError {
    #[error("retargeting applies to object-centric segments only")]
    NotObjectCentric,
    #[error("inverse kinematics failed at waypoint {index}")]
    Ik { index: usize },
}

/// Rigidly carry an object-centric segment from `old_anchor` to
/// `new_anchor`: every end-effector pose is premultiplied by
/// `new ∘ old⁻¹` and joint states are re-solved. Each waypoint is seeded
/// from its own original state first (which keeps an identity transform
/// exact) and falls back to the previously retargeted waypoint.
pub fn retarget_segment(
    traj: &Trajectory,
    seg: &Segment,
    old_anchor: &Pose,
    new_anchor: &Pose,
    model: &RobotModel,
) -> Result<Vec<Waypoint>, RetargetError> {
    if seg.kind != SegmentKind::ObjectCentric {
        return Err(RetargetError::NotObjectCentric);
    }
    let delta = new_anchor.compose(&old_anchor.inverse());
    let opts = IkOptions::default();
    let mut out: Vec<Waypoint> = Vec::with_capacity(seg.len());

    for i in seg.start..seg.end {
        let wp = &traj.waypoints[i];
        let base = if wp.ee_cached { wp.ee_pose } else { ee_pose_of(model, &wp.state) };
        let target = delta.compose(&base);

        let mut solved = inverse_kinematics(model, &target, &wp.state, &opts)
            .map_err(|_| RetargetError::Ik { index: i })?;
        if !solved.converged {
            if let Some(prev) = out.last() {
                solved = inverse_kinematics(model, &target, &prev.state, &opts)
                    .map_err(|_| RetargetError::Ik { index: i })?;
            }
        }
        if !solved.converged {
            return Err(RetargetError::Ik { index: i });
        }
        let mut state = solved.state;
        state.gripper = wp.state.gripper;
        let ee = ee_pose_of(model, &state);
        out.push(Waypoint { t: wp.t, state, action: wp.action.clone(), ee_pose: ee, ee_cached: true });
    }
    Ok(out)
}

/// Input to [`stitch_segments`], in trajectory order.
#[derive(Debug, Clone)]
pub enum StitchPiece {
    /// A retargeted object-centric fragment paired with the original
    /// waypoints it replaces (the originals define the seam offsets).
    Fragment { original: Vec<Waypoint>, retargeted: Vec<Waypoint> },
    /// A transit stretch kept from the original trajectory.
    Transit { original: Vec<Waypoint> },
}

#[derive(Debug, Clone, Error)]
pub enum StitchError {
    #[error("stitched trajectory would have {len} waypoints")]
    TooShort { len: usize },
    #[error("joint `{joint}` moves at {rate:.3}/s over step {step}, bound {bound}")]
    Velocity { step: usize, joint: String, rate: f64, bound: f64 },
}

/// Reassemble a full trajectory from retargeted fragments and original
/// transit stretches. Transit joint positions are shifted by a smoothstep
/// blend of the seam offsets (retargeted minus original boundary state), so
/// zero offsets reproduce the original transit exactly. All actions are
/// recomputed and the result must respect the velocity bound.
pub fn stitch_segments(
    pieces: &[StitchPiece],
    encoding: ActionEncoding,
    instruction_id: u32,
    model: &RobotModel,
    v_max: f64,
) -> Result<Trajectory, StitchError> {
    let dof = model.dof();
    let zero = vec![0.0; dof];

    let offset_after = |piece: &StitchPiece| -> Vec<f64> {
        match piece {
            StitchPiece::Fragment { original, retargeted } => {
                match (original.last(), retargeted.last()) {
                    (Some(o), Some(r)) => sub(&r.state.positions, &o.state.positions),
                    _ => zero.clone(),
                }
            }
            StitchPiece::Transit { .. } => zero.clone(),
        }
    };
    let offset_before = |piece: &StitchPiece| -> Vec<f64> {
        match piece {
            StitchPiece::Fragment { original, retargeted } => {
                match (original.first(), retargeted.first()) {
                    (Some(o), Some(r)) => sub(&r.state.positions, &o.state.positions),
                    _ => zero.clone(),
                }
            }
            StitchPiece::Transit { .. } => zero.clone(),
        }
    };

    let mut waypoints: Vec<Waypoint> = Vec::new();
    for (p, piece) in pieces.iter().enumerate() {
        match piece {
            StitchPiece::Fragment { retargeted, .. } => {
                waypoints.extend(retargeted.iter().cloned());
            }
            StitchPiece::Transit { original } => {
                let d_start = if p > 0 { offset_after(&pieces[p - 1]) } else { zero.clone() };
                let d_end =
                    if p + 1 < pieces.len() { offset_before(&pieces[p + 1]) } else { zero.clone() };
                let len = original.len();
                for (j, wp) in original.iter().enumerate() {
                    let u = (j + 1) as f64 / (len + 1) as f64;
                    let s = smoothstep(u);
                    let positions: Vec<f64> = wp
                        .state
                        .positions
                        .iter()
                        .enumerate()
                        .map(|(q, &v)| v + (1.0 - s) * d_start[q] + s * d_end[q])
                        .collect();
                    let state = model
                        .clamp_state(&JointState::new(positions, wp.state.gripper));
                    let ee = ee_pose_of(model, &state);
                    waypoints.push(Waypoint {
                        t: wp.t,
                        state,
                        action: wp.action.clone(),
                        ee_pose: ee,
                        ee_cached: true,
                    });
                }
            }
        }
    }

    if waypoints.len() < 2 {
        return Err(StitchError::TooShort { len: waypoints.len() });
    }

    // Continuity gate: every consecutive pair must respect the bound.
    for step in 0..waypoints.len() - 1 {
        let a = &waypoints[step];
        let b = &waypoints[step + 1];
        let dt = b.t - a.t;
        for (q, joint) in model.actuated_joints().enumerate() {
            let rate = if dt > 0.0 {
                (b.state.positions[q] - a.state.positions[q]).abs() / dt
            } else {
                f64::INFINITY
            };
            if rate > v_max {
                return Err(StitchError::Velocity {
                    step,
                    joint: joint.name.clone(),
                    rate,
                    bound: v_max,
                });
            }
        }
    }

    let mut traj = Trajectory { waypoints, action_encoding: encoding, instruction_id };
    recompute_actions(&mut traj);
    Ok(traj)
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// Rewrite every action from the waypoint sequence itself: `joint_target`
/// actions become the next waypoint's positions plus gripper (the last
/// waypoint holds its own), `ee_delta` actions become the pose difference
/// to the next waypoint (zero at the end). `ee_delta` requires valid
/// end-effector caches.
pub fn recompute_actions(traj: &mut Trajectory) {
    let n = traj.waypoints.len();
    for i in 0..n {
        let (cur, next) = if i + 1 < n {
            let (a, b) = traj.waypoints.split_at(i + 1);
            (&a[i], &b[0])
        } else {
            (&traj.waypoints[i], &traj.waypoints[i])
        };
        let action = match traj.action_encoding {
            ActionEncoding::JointTarget => {
                let mut a = next.state.positions.clone();
                a.push(next.state.gripper);
                a
            }
            ActionEncoding::EeDelta => {
                debug_assert!(cur.ee_cached && next.ee_cached);
                let dt = next.ee_pose.translation - cur.ee_pose.translation;
                let drot =
                    log_rotation(&(next.ee_pose.rotation * cur.ee_pose.rotation.transpose()));
                vec![
                    dt.x,
                    dt.y,
                    dt.z,
                    drot.x,
                    drot.y,
                    drot.z,
                    next.state.gripper - cur.state.gripper,
                ]
            }
        };
        traj.waypoints[i].action = action;
    }
}

/// Refresh every waypoint's end-effector cache from forward kinematics.
pub fn ensure_ee_cache(traj: &mut Trajectory, model: &RobotModel) {
    for wp in &mut traj.waypoints {
        wp.ee_pose = ee_pose_of(model, &wp.state);
        wp.ee_cached = true;
    }
}

fn ee_pose_of(model: &RobotModel, state: &JointState) -> Pose {
    *fk_unchecked(model, state).pose(model.end_effector_index())
}

/// Why one expansion attempt was thrown away.
#[derive(Debug, Clone)]
pub enum AttemptFailure {
    Retarget { segment: usize, error: RetargetError },
    Stitch(StitchError),
    Audit,
}

impl fmt::Display for AttemptFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttemptFailure::Retarget { segment, error } => {
                write!(f, "segment {segment}: {error}")
            }
            AttemptFailure::Stitch(e) => write!(f, "{e}"),
            AttemptFailure::Audit => f.write_str("feasibility audit rejected the candidate"),
        }
    }
}

#[derive(Debug, Error)]
pub enum ExpandError {
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
    #[error(transparent)]
    Keys(#[from] KeyError),
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error("gave up after {attempts} attempts, last failure: {last}")]
    Exhausted { attempts: usize, last: AttemptFailure },
}

/// A successful expansion: the new trajectory, the perturbed keys that
/// produced it (the object must be placed at these anchors), and how many
/// draws it took.
#[derive(Debug, Clone)]
pub struct Expansion {
    pub trajectory: Trajectory,
    pub keys: Vec<KeyState>,
    pub attempts: usize,
}

/// Expand one demonstration: segment, perturb the keys, retarget each
/// object-centric segment, stitch, and audit feasibility. Infeasible draws
/// are resampled up to `opts.max_resamples` times, then the expansion fails
/// loudly (silent clamping would bias the draw distribution). The output is
/// a pure function of `(traj, keys, spec, opts)`; randomness comes only
/// from `spec.rng_seed`.
pub fn expand_trajectory(
    traj: &Trajectory,
    keys: &[KeyState],
    spec: &PerturbationSpec,
    model: &RobotModel,
    opts: &ExpansionOptions,
) -> Result<Expansion, ExpandError> {
    spec.validate()?;
    traj.validate(model)?;
    let segments = segment_trajectory(traj, keys, opts.window)?;
    if keys.is_empty() {
        return Ok(Expansion { trajectory: traj.clone(), keys: Vec::new(), attempts: 0 });
    }

    let mut source = traj.clone();
    ensure_ee_cache(&mut source, model);

    let mut rng = crate::rng::stream(spec.rng_seed, &[crate::rng::tag::EXPANSION]);
    let mut last = AttemptFailure::Audit;

    for attempt in 1..=opts.max_resamples {
        let perturbed = perturb_key_states(keys, spec, &mut rng);
        match try_expansion(&source, keys, &perturbed, &segments, model, opts) {
            Ok(trajectory) => {
                return Ok(Expansion { trajectory, keys: perturbed, attempts: attempt })
            }
            Err(failure) => last = failure,
        }
    }
    Err(ExpandError::Exhausted { attempts: opts.max_resamples, last })
}

fn try_expansion(
    source: &Trajectory,
    keys: &[KeyState],
    perturbed: &[KeyState],
    segments: &[Segment],
    model: &RobotModel,
    opts: &ExpansionOptions,
) -> Result<Trajectory, AttemptFailure> {
    let mut pieces = Vec::with_capacity(segments.len());
    let mut key_cursor = 0usize;
    for (si, seg) in segments.iter().enumerate() {
        let original: Vec<Waypoint> = source.waypoints[seg.start..seg.end].to_vec();
        match seg.kind {
            SegmentKind::Transit => pieces.push(StitchPiece::Transit { original }),
            SegmentKind::ObjectCentric => {
                let old = &keys[key_cursor].anchor;
                let new = &perturbed[key_cursor].anchor;
                key_cursor += 1;
                let retargeted = retarget_segment(source, seg, old, new, model)
                    .map_err(|error| AttemptFailure::Retarget { segment: si, error })?;
                pieces.push(StitchPiece::Fragment { original, retargeted });
            }
        }
    }
    debug_assert_eq!(key_cursor, keys.len());

    let stitched = stitch_segments(
        &pieces,
        source.action_encoding,
        source.instruction_id,
        model,
        opts.v_max,
    )
    .map_err(AttemptFailure::Stitch)?;

    let report = validate_feasibility(&stitched, model, opts.v_max);
    if !report.is_feasible() {
        return Err(AttemptFailure::Audit);
    }
    Ok(stitched)
}

/// One joint-limit breach.
#[derive(Debug, Clone, PartialEq)]
pub struct LimitViolation {
    pub waypoint: usize,
    pub joint: String,
    pub value: f64,
    pub lower: f64,
    pub upper: f64,
}

/// One step whose per-joint rate exceeds the bound.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityViolation {
    pub step: usize,
    pub joint: String,
    pub rate: f64,
    pub bound: f64,
}

/// Feasibility audit result; an empty report means the trajectory is
/// executable as recorded.
#[derive(Debug, Clone, Default)]
pub struct FeasibilityReport {
    pub limit_violations: Vec<LimitViolation>,
    pub velocity_violations: Vec<VelocityViolation>,
    /// Waypoints whose position vector has the wrong arity for the model.
    pub arity_errors: Vec<usize>,
    /// Worst translation gap between cached end-effector poses and forward
    /// kinematics, over waypoints with a cache.
    pub max_ee_discrepancy: f64,
}

impl FeasibilityReport {
    pub fn is_feasible(&self) -> bool {
        self.limit_violations.is_empty()
            && self.velocity_violations.is_empty()
            && self.arity_errors.is_empty()
            && self.max_ee_discrepancy <= EE_CACHE_TOL
    }
}

/// Audit limits, step rates, and end-effector cache consistency. Violations
/// are collected, never errored, so planted defects show up by name.
pub fn validate_feasibility(
    traj: &Trajectory,
    model: &RobotModel,
    v_max: f64,
) -> FeasibilityReport {
    let mut report = FeasibilityReport::default();
    let dof = model.dof();

    for (i, wp) in traj.waypoints.iter().enumerate() {
        if wp.state.positions.len() != dof {
            report.arity_errors.push(i);
            continue;
        }
        for (q, joint) in model.actuated_joints().enumerate() {
            let (lower, upper) = joint.limits.expect("actuated joint has limits");
            let value = wp.state.positions[q];
            if value < lower || value > upper {
                report.limit_violations.push(LimitViolation {
                    waypoint: i,
                    joint: joint.name.clone(),
                    value,
                    lower,
                    upper,
                });
            }
        }
        if wp.state.gripper < 0.0 || wp.state.gripper > 1.0 {
            report.limit_violations.push(LimitViolation {
                waypoint: i,
                joint: "gripper".to_owned(),
                value: wp.state.gripper,
                lower: 0.0,
                upper: 1.0,
            });
        }
        if wp.ee_cached {
            let actual = ee_pose_of(model, &wp.state);
            let gap = (actual.translation - wp.ee_pose.translation).norm();
            report.max_ee_discrepancy = report.max_ee_discrepancy.max(gap);
        }
    }

    for step in 0..traj.waypoints.len().saturating_sub(1) {
        let a = &traj.waypoints[step];
        let b = &traj.waypoints[step + 1];
        if a.state.positions.len() != dof || b.state.positions.len() != dof {
            continue;
        }
        let dt = b.t - a.t;
        for (q, joint) in model.actuated_joints().enumerate() {
            let rate = if dt > 0.0 {
                (b.state.positions[q] - a.state.positions[q]).abs() / dt
            } else {
                f64::INFINITY
            };
            if rate > v_max {
                report.velocity_violations.push(VelocityViolation {
                    step,
                    joint: joint.name.clone(),
                    rate,
                    bound: v_max,
                });
            }
        }
    }
    report
}

#[derive(Debug, Error)]
pub enum TrajFormatError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

fn parse_err<T>(line: usize, message: impl Into<String>) -> Result<T, TrajFormatError> {
    Err(TrajFormatError::Parse { line, message: message.into() })
}

fn parse_f64(line: usize, field: &str) -> Result<f64, TrajFormatError> {
    field
        .parse::<f64>()
        .map_err(|_| TrajFormatError::Parse { line, message: format!("bad number `{field}`") })
}

/// Serialize a trajectory to the line-oriented text format.
pub fn write_trajectory(traj: &Trajectory) -> String {
    let dof = traj.waypoints.first().map_or(0, |w| w.state.positions.len());
    let mut out = format!(
        "traj v1 {} {} {}\n",
        traj.action_encoding, dof, traj.instruction_id
    );
    for wp in &traj.waypoints {
        let mut fields: Vec<String> = Vec::with_capacity(2 + dof + wp.action.len());
        fields.push(wp.t.to_string());
        fields.extend(wp.state.positions.iter().map(f64::to_string));
        fields.push(wp.state.gripper.to_string());
        fields.extend(wp.action.iter().map(f64::to_string));
        out.push_str(&fields.join(" "));
        out.push('\n');
    }
    out
}

/// Parse the line-oriented trajectory format. End-effector caches are not
/// stored in the file; rebuild them with [`ensure_ee_cache`] after binding
/// to a model.
pub fn read_trajectory(text: &str) -> Result<Trajectory, TrajFormatError> {
    let mut lines = text.lines().enumerate();
    let (_, header) = match lines.next() {
        Some(h) => h,
        None => return parse_err(1, "empty trajectory file"),
    };
    let head: Vec<&str> = header.split_whitespace().collect();
    if head.len() != 5 || head[0] != "traj" || head[1] != "v1" {
        return parse_err(1, "expected header `traj v1 <encoding> <joints> <instruction_id>`");
    }
    let encoding = ActionEncoding::from_str(head[2])
        .map_err(|m| TrajFormatError::Parse { line: 1, message: m })?;
    let dof: usize = match head[3].parse() {
        Ok(d) => d,
        Err(_) => return parse_err(1, format!("bad joint count `{}`", head[3])),
    };
    let instruction_id: u32 = match head[4].parse() {
        Ok(v) => v,
        Err(_) => return parse_err(1, format!("bad instruction id `{}`", head[4])),
    };
    let arity = encoding.action_len(dof);
    let expected = 1 + dof + 1 + arity;

    let mut waypoints = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != expected {
            return parse_err(
                lineno,
                format!("expected {expected} fields, got {}", fields.len()),
            );
        }
        let t = parse_f64(lineno, fields[0])?;
        let mut positions = Vec::with_capacity(dof);
        for f in &fields[1..1 + dof] {
            positions.push(parse_f64(lineno, f)?);
        }
        let gripper = parse_f64(lineno, fields[1 + dof])?;
        let mut action = Vec::with_capacity(arity);
        for f in &fields[2 + dof..] {
            action.push(parse_f64(lineno, f)?);
        }
        waypoints.push(Waypoint::new(t, JointState::new(positions, gripper), action));
    }
    if waypoints.len() < 2 {
        return parse_err(1, format!("trajectory has {} waypoints, need 2", waypoints.len()));
    }
    Ok(Trajectory { waypoints, action_encoding: encoding, instruction_id })
}

/// Serialize key states to the sidecar format.
pub fn write_key_states(keys: &[KeyState]) -> String {
    let mut out = String::new();
    for k in keys {
        let q = k.anchor.to_quaternion();
        let c = q.as_ref().coords;
        let t = k.anchor.translation;
        out.push_str(&format!(
            "{} {} {} {} {} {} {} {} {}\n",
            k.index, k.label, t.x, t.y, t.z, c[3], c[0], c[1], c[2]
        ));
    }
    out
}

/// Parse the key sidecar format.
pub fn read_key_states(text: &str) -> Result<Vec<KeyState>, TrajFormatError> {
    let mut keys = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 9 {
            return parse_err(lineno, format!("expected 9 fields, got {}", fields.len()));
        }
        let index: usize = match fields[0].parse() {
            Ok(v) => v,
            Err(_) => return parse_err(lineno, format!("bad index `{}`", fields[0])),
        };
        let label = KeyLabel::from_str(fields[1])
            .map_err(|m| TrajFormatError::Parse { line: lineno, message: m })?;
        let mut nums = [0.0f64; 7];
        for (slot, f) in nums.iter_mut().zip(&fields[2..]) {
            *slot = parse_f64(lineno, f)?;
        }
        let quat = UnitQuaternion::from_quaternion(Quaternion::new(
            nums[3], nums[4], nums[5], nums[6],
        ));
        let anchor = Pose::from_quaternion_translation(
            quat,
            Vector3::new(nums[0], nums[1], nums[2]),
        );
        keys.push(KeyState { index, label, anchor });
    }
    Ok(keys)
}
