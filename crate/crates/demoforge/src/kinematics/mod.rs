//! Robot model, forward kinematics, and damped-least-squares inverse
//! kinematics.
//!
//! Models are kinematic trees parsed from a URDF subset (see [`urdf`]). Link
//! geometry is triangle soup: boxes are expanded to 12 triangles at parse
//! time so the renderer never special-cases shapes. The gripper is not a
//! joint; it is a scalar channel carried by [`JointState`] and consumed by
//! the renderer as an end-effector tint.

pub mod obj;
pub mod urdf;

use nalgebra::{DMatrix, DVector, Vector3};
use thiserror::Error;

use crate::geom::{rotation_about_axis, Pose, Triangle};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JointKind {
    Revolute,
    Prismatic,
    Fixed,
}

impl JointKind {
    pub fn label(&self) -> &'static str {
        match self {
            JointKind::Revolute => "revolute",
            JointKind::Prismatic => "prismatic",
            JointKind::Fixed => "fixed",
        }
    }
}

/// One joint of the tree. `origin` is the fixed transform from the parent
/// link frame to the joint frame; the child link frame coincides with the
/// joint frame after joint motion.
#[derive(Debug, Clone, PartialEq)]
pub struct JointSpec {
    pub name: String,
    pub kind: JointKind,
    pub parent: String,
    pub child: String,
    pub origin_xyz: [f64; 3],
    pub origin_rpy: [f64; 3],
    /// Unit axis in the joint frame. `None` for fixed joints.
    pub axis: Option<Vector3<f64>>,
    /// Position limits `(lower, upper)`. `None` for fixed joints.
    pub limits: Option<(f64, f64)>,
}

impl JointSpec {
    pub fn origin(&self) -> Pose {
        Pose::from_xyz_rpy(self.origin_xyz, self.origin_rpy)
    }

    fn motion(&self, q: f64) -> Pose {
        match self.kind {
            JointKind::Revolute => {
                let axis = self.axis.expect("revolute joint has an axis");
                Pose::new(rotation_about_axis(&axis, q), Vector3::zeros())
            }
            JointKind::Prismatic => {
                let axis = self.axis.expect("prismatic joint has an axis");
                Pose::from_translation(axis * q)
            }
            JointKind::Fixed => Pose::identity(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Link {
    pub name: String,
    /// Triangle soup in the link frame; empty for bare frames.
    pub mesh: Vec<Triangle>,
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("model has no links")]
    Empty,
    #[error("duplicate link name `{0}`")]
    DuplicateLink(String),
    #[error("duplicate joint name `{0}`")]
    DuplicateJoint(String),
    #[error("joint `{joint}` references unknown parent link `{link}`")]
    UnknownParent { joint: String, link: String },
    #[error("joint `{joint}` references unknown child link `{link}`")]
    UnknownChild { joint: String, link: String },
    #[error("link `{link}` is the child of more than one joint")]
    MultipleParents { link: String },
    #[error("no base link: every link is some joint's child")]
    NoBase,
    #[error("multiple base links: `{0}` and `{1}` have no parent joint")]
    MultipleBases(String, String),
    #[error("cycle detected: joint `{joint}` closes a loop that the base never reaches")]
    Cycle { joint: String },
    #[error("joint `{joint}` axis ({x} {y} {z}) is not unit length (norm {norm})")]
    NonUnitAxis { joint: String, x: f64, y: f64, z: f64, norm: f64 },
    #[error("{kind} joint `{joint}` is missing an axis")]
    MissingAxis { joint: String, kind: &'static str },
    #[error("{kind} joint `{joint}` is missing limits")]
    MissingLimits { joint: String, kind: &'static str },
    #[error("fixed joint `{joint}` must not declare an axis")]
    FixedWithAxis { joint: String },
    #[error("fixed joint `{joint}` must not declare limits")]
    FixedWithLimits { joint: String },
    #[error("joint `{joint}` limits are inverted: lower {lower} > upper {upper}")]
    InvertedLimits { joint: String, lower: f64, upper: f64 },
}

/// Fully validated kinematic tree.
#[derive(Debug, Clone, PartialEq)]
pub struct RobotModel {
    pub name: String,
    links: Vec<Link>,
    joints: Vec<JointSpec>,
    base: usize,
    /// Per link, the joint whose child it is.
    parent_joint: Vec<Option<usize>>,
    /// Joint indices ordered parents-before-children.
    topo_order: Vec<usize>,
    /// Non-fixed joint indices in declaration order.
    actuated: Vec<usize>,
    end_effector: usize,
}

/// Unit axes may drift by at most this much.
pub const AXIS_UNIT_TOL: f64 = 1e-9;

impl RobotModel {
    pub fn new(name: String, links: Vec<Link>, joints: Vec<JointSpec>) -> Result<Self, ModelError> {
        if links.is_empty() {
            return Err(ModelError::Empty);
        }
        let mut index = std::collections::BTreeMap::new();
        for (i, l) in links.iter().enumerate() {
            if index.insert(l.name.clone(), i).is_some() {
                return Err(ModelError::DuplicateLink(l.name.clone()));
            }
        }
        let mut joint_names = std::collections::BTreeSet::new();
        for j in &joints {
            if !joint_names.insert(j.name.clone()) {
                return Err(ModelError::DuplicateJoint(j.name.clone()));
            }
        }

        let mut parent_joint: Vec<Option<usize>> = vec![None; links.len()];
        for (ji, j) in joints.iter().enumerate() {
            if !index.contains_key(&j.parent) {
                return Err(ModelError::UnknownParent { joint: j.name.clone(), link: j.parent.clone() });
            }
            let child = *index
                .get(&j.child)
                .ok_or_else(|| ModelError::UnknownChild { joint: j.name.clone(), link: j.child.clone() })?;
            if parent_joint[child].is_some() {
                return Err(ModelError::MultipleParents { link: j.child.clone() });
            }
            parent_joint[child] = Some(ji);

            match j.kind {
                JointKind::Fixed => {
                    if j.axis.is_some() {
                        return Err(ModelError::FixedWithAxis { joint: j.name.clone() });
                    }
                    if j.limits.is_some() {
                        return Err(ModelError::FixedWithLimits { joint: j.name.clone() });
                    }
                }
                kind => {
                    let axis = j.axis.ok_or(ModelError::MissingAxis { joint: j.name.clone(), kind: kind.label() })?;
                    let norm = axis.norm();
                    if (norm - 1.0).abs() > AXIS_UNIT_TOL {
                        return Err(ModelError::NonUnitAxis {
                            joint: j.name.clone(),
                            x: axis.x,
                            y: axis.y,
                            z: axis.z,
                            norm,
                        });
                    }
                    let (lo, hi) =
                        j.limits.ok_or(ModelError::MissingLimits { joint: j.name.clone(), kind: kind.label() })?;
                    if lo > hi {
                        return Err(ModelError::InvertedLimits { joint: j.name.clone(), lower: lo, upper: hi });
                    }
                }
            }
        }

        let mut base = None;
        for (li, pj) in parent_joint.iter().enumerate() {
            if pj.is_none() {
                match base {
                    None => base = Some(li),
                    Some(b) => {
                        return Err(ModelError::MultipleBases(links[b].name.clone(), links[li].name.clone()))
                    }
                }
            }
        }
        let base = base.ok_or(ModelError::NoBase)?;

        // Walk from the base; a joint whose parent is never reached closes a cycle.
        let mut children: Vec<Vec<usize>> = vec![Vec::new(); links.len()];
        for (ji, j) in joints.iter().enumerate() {
            children[index[&j.parent]].push(ji);
        }
        let mut topo_order = Vec::with_capacity(joints.len());
        let mut reached = vec![false; links.len()];
        reached[base] = true;
        let mut stack = vec![base];
        while let Some(li) = stack.pop() {
            for &ji in &children[li] {
                let child = index[&joints[ji].child];
                topo_order.push(ji);
                reached[child] = true;
                stack.push(child);
            }
        }
        if topo_order.len() != joints.len() {
            let missing = joints
                .iter()
                .enumerate()
                .find(|(ji, _)| !topo_order.contains(ji))
                .map(|(_, j)| j.name.clone())
                .unwrap_or_default();
            return Err(ModelError::Cycle { joint: missing });
        }

        let actuated: Vec<usize> =
            joints.iter().enumerate().filter(|(_, j)| j.kind != JointKind::Fixed).map(|(i, _)| i).collect();

        // End effector: deepest leaf, ties broken by declaration order.
        let mut depth = vec![0usize; links.len()];
        for &ji in &topo_order {
            let j = &joints[ji];
            depth[index[&j.child]] = depth[index[&j.parent]] + 1;
        }
        let is_leaf: Vec<bool> = (0..links.len()).map(|li| children[li].is_empty()).collect();
        let mut end_effector = base;
        let mut best_depth = 0usize;
        for li in 0..links.len() {
            if is_leaf[li] && depth[li] > best_depth {
                best_depth = depth[li];
                end_effector = li;
            }
        }
        if is_leaf[base] && links.len() == 1 {
            end_effector = base;
        }

        Ok(Self { name, links, joints, base, parent_joint, topo_order, actuated, end_effector })
    }

    pub fn links(&self) -> &[Link] {
        &self.links
    }

    pub fn joints(&self) -> &[JointSpec] {
        &self.joints
    }

    pub fn base_link(&self) -> &str {
        &self.links[self.base].name
    }

    pub fn link_index(&self, name: &str) -> Option<usize> {
        self.links.iter().position(|l| l.name == name)
    }

    /// Non-fixed joints in declaration order; defines the layout of
    /// [`JointState::positions`].
    pub fn actuated_joints(&self) -> impl Iterator<Item = &JointSpec> {
        self.actuated.iter().map(|&i| &self.joints[i])
    }

    pub fn dof(&self) -> usize {
        self.actuated.len()
    }

    /// Deepest leaf link; the frame IK targets by default.
    pub fn end_effector(&self) -> &str {
        &self.links[self.end_effector].name
    }

    pub fn end_effector_index(&self) -> usize {
        self.end_effector
    }

    /// Clamp every position into its joint's limit interval.
    pub fn clamp_state(&self, state: &JointState) -> JointState {
        let positions = self
            .actuated
            .iter()
            .zip(&state.positions)
            .map(|(&ji, &q)| {
                let (lo, hi) = self.joints[ji].limits.expect("actuated joint has limits");
                q.clamp(lo, hi)
            })
            .collect();
        JointState { positions, gripper: state.gripper.clamp(0.0, 1.0) }
    }

    fn position_index(&self, joint_index: usize) -> Option<usize> {
        self.actuated.iter().position(|&j| j == joint_index)
    }
}

/// Positions of the non-fixed joints plus the gripper channel
/// (0 = closed, 1 = open).
#[derive(Debug, Clone, PartialEq)]
pub struct JointState {
    pub positions: Vec<f64>,
    pub gripper: f64,
}

impl JointState {
    pub fn new(positions: Vec<f64>, gripper: f64) -> Self {
        Self { positions, gripper }
    }

    pub fn validate(&self, model: &RobotModel) -> Result<(), KinematicsError> {
        if self.positions.len() != model.dof() {
            return Err(KinematicsError::StateLength { expected: model.dof(), got: self.positions.len() });
        }
        for (j, &q) in model.actuated_joints().zip(&self.positions) {
            let (lo, hi) = j.limits.expect("actuated joint has limits");
            if q < lo || q > hi {
                return Err(KinematicsError::LimitViolation { joint: j.name.clone(), value: q, lower: lo, upper: hi });
            }
        }
        if !(0.0..=1.0).contains(&self.gripper) {
            return Err(KinematicsError::GripperRange { value: self.gripper });
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum KinematicsError {
    #[error("state has {got} positions, model has {expected} non-fixed joints")]
    StateLength { expected: usize, got: usize },
    #[error("joint `{joint}` position {value} outside limits [{lower}, {upper}]")]
    LimitViolation { joint: String, value: f64, lower: f64, upper: f64 },
    #[error("gripper value {value} outside [0, 1]")]
    GripperRange { value: f64 },
    #[error("unknown link `{0}`")]
    UnknownLink(String),
}

/// World pose of every link, aligned with `model.links()` order.
#[derive(Debug, Clone)]
pub struct LinkPoses {
    poses: Vec<Pose>,
}

impl LinkPoses {
    pub fn pose(&self, link_index: usize) -> &Pose {
        &self.poses[link_index]
    }

    pub fn get<'a>(&'a self, model: &RobotModel, name: &str) -> Option<&'a Pose> {
        model.link_index(name).map(|i| &self.poses[i])
    }

    pub fn iter<'a>(&'a self, model: &'a RobotModel) -> impl Iterator<Item = (&'a str, &'a Pose)> {
        model.links.iter().zip(&self.poses).map(|(l, p)| (l.name.as_str(), p))
    }
}

/// World pose of every link for a validated state.
pub fn forward_kinematics(model: &RobotModel, state: &JointState) -> Result<LinkPoses, KinematicsError> {
    state.validate(model)?;
    Ok(fk_unchecked(model, state))
}

pub(crate) fn fk_unchecked(model: &RobotModel, state: &JointState) -> LinkPoses {
    let mut poses = vec![Pose::identity(); model.links.len()];
    for &ji in &model.topo_order {
        let j = &model.joints[ji];
        let parent = model.link_index(&j.parent).expect("validated at construction");
        let child = model.link_index(&j.child).expect("validated at construction");
        let q = model.position_index(ji).map(|pi| state.positions[pi]).unwrap_or(0.0);
        poses[child] = poses[parent].compose(&j.origin()).compose(&j.motion(q));
    }
    LinkPoses { poses }
}

#[derive(Debug, Clone)]
pub struct IkOptions {
    pub pos_tol: f64,
    pub rot_tol: f64,
    pub max_iters: usize,
    pub damping: f64,
    /// Link whose pose is driven to the target; end effector when `None`.
    pub target_link: Option<String>,
}

impl Default for IkOptions {
    fn default() -> Self {
        Self { pos_tol: 1e-4, rot_tol: 1e-3, max_iters: 200, damping: 1e-2, target_link: None }
    }
}

/// Solver outcome. `converged` is the caller's to act on; a non-converged
/// result carries the best state and residuals seen.
#[derive(Debug, Clone)]
pub struct IkResult {
    pub state: JointState,
    pub iterations: usize,
    pub pos_residual: f64,
    pub rot_residual: f64,
    pub converged: bool,
}

/// Damped least squares with per-iteration joint-limit projection. The
/// residual is checked before each update, so a seed that already satisfies
/// the target returns unchanged after zero iterations.
/// Coprime radices for the per-joint restart sweep.
const HALTON_BASES: [u32; 8] = [2, 3, 5, 7, 11, 13, 17, 19];

/// k-th element of the base-`b` Halton sequence, in (0, 1).
fn halton(b: u32, mut k: u32) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    while k > 0 {
        f /= f64::from(b);
        r += f * f64::from(k % b);
        k /= b;
    }
    r
}

pub fn inverse_kinematics(
    model: &RobotModel,
    target: &Pose,
    seed: &JointState,
    opts: &IkOptions,
) -> Result<IkResult, KinematicsError> {
    if seed.positions.len() != model.dof() {
        return Err(KinematicsError::StateLength { expected: model.dof(), got: seed.positions.len() });
    }
    let target_index = match &opts.target_link {
        Some(name) => model.link_index(name).ok_or_else(|| KinematicsError::UnknownLink(name.clone()))?,
        None => model.end_effector_index(),
    };

    let mut state = model.clamp_state(seed);
    let mut best_state = state.clone();
    let mut best_score = f64::INFINITY;
    let mut best_pos = f64::INFINITY;
    let mut best_rot = f64::INFINITY;
    // Progress of the current descent; a stalled descent sits in a local
    // minimum (wrong elbow branch) and gets restarted.
    let mut descent_best = f64::INFINITY;
    let mut stall = 0usize;
    let mut restarts = 0u32;

    for iter in 0..=opts.max_iters {
        let poses = fk_unchecked(model, &state);
        let current = poses.pose(target_index);
        let e_pos = target.translation - current.translation;
        let e_rot = target.rotation_error(current);
        let pos_n = e_pos.norm();
        let rot_n = e_rot.norm();

        let score = (pos_n / opts.pos_tol).max(rot_n / opts.rot_tol);
        if score < best_score {
            best_score = score;
            best_state = state.clone();
            best_pos = pos_n;
            best_rot = rot_n;
        }
        // Progress must be relative: a wrong-branch descent creeps toward its
        // local minimum by ever smaller amounts, which an absolute threshold
        // would keep counting as improvement.
        if score < descent_best * (1.0 - 5e-3) {
            descent_best = score;
            stall = 0;
        } else {
            stall += 1;
        }

        if pos_n <= opts.pos_tol && rot_n <= opts.rot_tol {
            return Ok(IkResult {
                state,
                iterations: iter,
                pos_residual: pos_n,
                rot_residual: rot_n,
                converged: true,
            });
        }
        if iter == opts.max_iters {
            break;
        }

        if stall > 4 {
            // Restart from a low-discrepancy sweep of the joint box: spreads
            // candidate basins better than independent draws and keeps the
            // solver free of hidden randomness.
            restarts += 1;
            for (pi, &ji) in model.actuated.iter().enumerate() {
                let (lo, hi) = model.joints[ji].limits.expect("actuated joint has limits");
                state.positions[pi] = lo + halton(HALTON_BASES[pi % HALTON_BASES.len()], restarts) * (hi - lo);
            }
            descent_best = f64::INFINITY;
            stall = 0;
            continue;
        }

        let jac = jacobian(model, &state, target_index);
        let mut e = DVector::zeros(6);
        e[0] = e_pos.x;
        e[1] = e_pos.y;
        e[2] = e_pos.z;
        e[3] = e_rot.x;
        e[4] = e_rot.y;
        e[5] = e_rot.z;

        let jjt = &jac * jac.transpose() + DMatrix::identity(6, 6) * (opts.damping * opts.damping);
        let y = jjt.lu().solve(&e).expect("damped normal matrix is positive definite");
        let mut dq = jac.transpose() * y;

        let max_step = dq.amax();
        if max_step > 1.0 {
            dq *= 1.0 / max_step;
        }

        for (pi, &ji) in model.actuated.iter().enumerate() {
            let (lo, hi) = model.joints[ji].limits.expect("actuated joint has limits");
            state.positions[pi] = (state.positions[pi] + dq[pi]).clamp(lo, hi);
            debug_assert!(state.positions[pi] >= lo && state.positions[pi] <= hi);
        }
    }

    Ok(IkResult {
        state: best_state,
        iterations: opts.max_iters,
        pos_residual: best_pos,
        rot_residual: best_rot,
        converged: false,
    })
}

/// Geometric Jacobian of `target_index`'s frame, columns in
/// `actuated_joints` order. Joints off the base-to-target chain get zero
/// columns.
fn jacobian(model: &RobotModel, state: &JointState, target_index: usize) -> DMatrix<f64> {
    let poses = fk_unchecked(model, state);
    let p_target = poses.pose(target_index).translation;

    // Collect the joint chain from target back to base.
    let mut on_chain = vec![false; model.joints.len()];
    let mut li = target_index;
    while let Some(ji) = model.parent_joint[li] {
        on_chain[ji] = true;
        li = model.link_index(&model.joints[ji].parent).expect("validated");
    }

    let mut jac = DMatrix::zeros(6, model.dof());
    for (pi, &ji) in model.actuated.iter().enumerate() {
        if !on_chain[ji] {
            continue;
        }
        let j = &model.joints[ji];
        let parent = model.link_index(&j.parent).expect("validated");
        let frame = poses.pose(parent).compose(&j.origin());
        let axis_w = frame.rotation * j.axis.expect("actuated joint has an axis");
        match j.kind {
            JointKind::Revolute => {
                let lever = p_target - frame.translation;
                let v = axis_w.cross(&lever);
                jac[(0, pi)] = v.x;
                jac[(1, pi)] = v.y;
                jac[(2, pi)] = v.z;
                jac[(3, pi)] = axis_w.x;
                jac[(4, pi)] = axis_w.y;
                jac[(5, pi)] = axis_w.z;
            }
            JointKind::Prismatic => {
                jac[(0, pi)] = axis_w.x;
                jac[(1, pi)] = axis_w.y;
                jac[(2, pi)] = axis_w.z;
            }
            JointKind::Fixed => unreachable!("actuated joints are never fixed"),
        }
    }
    jac
}
