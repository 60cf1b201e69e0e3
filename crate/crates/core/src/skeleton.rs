//! Skeletons, motions, rotation math and forward kinematics.
//!
//! Coordinates are Y-up and right-handed. Scalars are `f64` throughout.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Norm below which a 6D rotation cannot be orthonormalized.
pub const DEGENERATE_EPS: f64 = 1e-8;
/// Orthonormality tolerance accepted by [`matrix_to_rotation6d`].
pub const ROTATION_TOL: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointSpec {
    pub name: String,
    pub parent: Option<usize>,
    pub offset: Vector3<f64>,
}

impl JointSpec {
    pub fn new(name: impl Into<String>, parent: Option<usize>, offset: [f64; 3]) -> Self {
        Self { name: name.into(), parent, offset: Vector3::from(offset) }
    }
}

/// A joint hierarchy stored in topological order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Skeleton {
    name: String,
    joints: Vec<JointSpec>,
    root_index: usize,
}

impl Skeleton {
    pub fn new(name: impl Into<String>, joints: Vec<JointSpec>) -> Result<Self> {
        if joints.is_empty() {
            return Err(Error::InvalidSkeleton("no joints".into()));
        }
        let mut root = None;
        let mut names = std::collections::HashSet::new();
        for (i, j) in joints.iter().enumerate() {
            match j.parent {
                None if root.is_some() => {
                    return Err(Error::InvalidSkeleton(format!("second root `{}`", j.name)));
                }
                None => root = Some(i),
                Some(p) if p >= i => {
                    return Err(Error::InvalidSkeleton(format!(
                        "joint `{}` (index {i}) has parent {p}; parents must precede children",
                        j.name
                    )));
                }
                Some(_) => {}
            }
            if !names.insert(j.name.as_str()) {
                return Err(Error::InvalidSkeleton(format!("duplicate joint name `{}`", j.name)));
            }
            if j.parent.is_some() && !j.offset.iter().all(|v| v.is_finite()) {
                return Err(Error::InvalidSkeleton(format!("non-finite offset on `{}`", j.name)));
            }
        }
        // Topological parents plus a single root imply a connected tree rooted at index 0.
        let root_index = root.ok_or_else(|| Error::InvalidSkeleton("no root joint".into()))?;
        Ok(Self { name: name.into(), joints, root_index })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn set_name(&mut self, name: impl Into<String>) {
        self.name = name.into();
    }

    pub fn joints(&self) -> &[JointSpec] {
        &self.joints
    }

    pub fn joint(&self, i: usize) -> &JointSpec {
        &self.joints[i]
    }

    pub fn len(&self) -> usize {
        self.joints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.joints.is_empty()
    }

    pub fn root_index(&self) -> usize {
        self.root_index
    }

    pub fn parent(&self, i: usize) -> Option<usize> {
        self.joints[i].parent
    }

    pub fn parents(&self) -> Vec<Option<usize>> {
        self.joints.iter().map(|j| j.parent).collect()
    }

    pub fn offsets(&self) -> Vec<[f64; 3]> {
        self.joints.iter().map(|j| [j.offset.x, j.offset.y, j.offset.z]).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.joints.iter().position(|j| j.name == name)
    }

    pub fn children(&self, i: usize) -> Vec<usize> {
        (i + 1..self.len()).filter(|&c| self.joints[c].parent == Some(i)).collect()
    }

    pub fn depth(&self, i: usize) -> usize {
        let mut d = 0;
        let mut cur = self.joints[i].parent;
        while let Some(p) = cur {
            d += 1;
            cur = self.joints[p].parent;
        }
        d
    }

    /// True if `ancestor` lies on the path from the root to `joint` (inclusive).
    pub fn is_ancestor(&self, ancestor: usize, joint: usize) -> bool {
        let mut cur = Some(joint);
        while let Some(c) = cur {
            if c == ancestor {
                return true;
            }
            cur = self.joints[c].parent;
        }
        false
    }

    /// Same hierarchy with every offset multiplied by `s`.
    pub fn scaled(&self, s: f64) -> Self {
        let mut out = self.clone();
        for j in &mut out.joints {
            j.offset *= s;
        }
        out
    }

    /// Structural fingerprint: joint names and parents, ignoring offsets.
    pub fn topology(&self) -> Vec<(String, Option<usize>)> {
        self.joints.iter().map(|j| (j.name.clone(), j.parent)).collect()
    }
}

/// First two columns of a rotation matrix, not necessarily orthonormal.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rotation6D {
    pub a: Vector3<f64>,
    pub b: Vector3<f64>,
}

impl Rotation6D {
    pub const IDENTITY: Self = Self { a: Vector3::new(1.0, 0.0, 0.0), b: Vector3::new(0.0, 1.0, 0.0) };

    pub fn new(a: [f64; 3], b: [f64; 3]) -> Self {
        Self { a: Vector3::from(a), b: Vector3::from(b) }
    }

    pub fn from_array(v: [f64; 6]) -> Self {
        Self::new([v[0], v[1], v[2]], [v[3], v[4], v[5]])
    }

    pub fn to_array(&self) -> [f64; 6] {
        [self.a.x, self.a.y, self.a.z, self.b.x, self.b.y, self.b.z]
    }

    pub fn to_matrix(&self) -> Result<Matrix3<f64>> {
        rotation6d_to_matrix(self)
    }

    pub fn is_finite(&self) -> bool {
        self.a.iter().chain(self.b.iter()).all(|v| v.is_finite())
    }
}

impl Default for Rotation6D {
    fn default() -> Self {
        Self::IDENTITY
    }
}

/// Gram-Schmidt orthonormalization of the two stored columns.
pub fn rotation6d_to_matrix(r: &Rotation6D) -> Result<Matrix3<f64>> {
    if !r.is_finite() {
        return Err(Error::DegenerateRotation("non-finite components".into()));
    }
    let na = r.a.norm();
    if na < DEGENERATE_EPS {
        return Err(Error::DegenerateRotation(format!("|a| = {na:.3e}")));
    }
    let c1 = r.a / na;
    let u = r.b - c1 * r.b.dot(&c1);
    let nu = u.norm();
    if nu < DEGENERATE_EPS {
        return Err(Error::DegenerateRotation(format!("b is colinear with a (residual {nu:.3e})")));
    }
    let c2 = u / nu;
    let c3 = c1.cross(&c2);
    Ok(Matrix3::from_columns(&[c1, c2, c3]))
}

/// Maximum elementwise deviation of `m` from being a proper rotation.
pub fn rotation_deviation(m: &Matrix3<f64>) -> f64 {
    let ortho = (m.transpose() * m - Matrix3::identity()).abs().max();
    ortho.max((m.determinant() - 1.0).abs())
}

pub fn matrix_to_rotation6d(m: &Matrix3<f64>) -> Result<Rotation6D> {
    let deviation = rotation_deviation(m);
    if !(deviation <= ROTATION_TOL) {
        return Err(Error::NotARotation { deviation });
    }
    Ok(Rotation6D { a: m.column(0).into_owned(), b: m.column(1).into_owned() })
}

/// Rotation about a coordinate axis (0 = x, 1 = y, 2 = z) by `angle` radians.
pub fn axis_rotation(axis: usize, angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    match axis {
        0 => Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c),
        1 => Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c),
        2 => Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0),
        _ => panic!("axis index {axis} out of range"),
    }
}

/// Root trajectory plus per-joint local rotations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Motion {
    root_positions: Vec<Vector3<f64>>,
    rotations: Vec<Vec<Rotation6D>>,
    fps: f64,
}

impl Motion {
    pub fn new(root_positions: Vec<Vector3<f64>>, rotations: Vec<Vec<Rotation6D>>, fps: f64) -> Result<Self> {
        if root_positions.len() != rotations.len() {
            return Err(Error::InvalidMotion(format!("{} root positions but {} rotation frames", root_positions.len(), rotations.len())));
        }
        if !(fps.is_finite() && fps > 0.0) {
            return Err(Error::InvalidMotion(format!("fps must be positive, got {fps}")));
        }
        if let Some(first) = rotations.first() {
            let n = first.len();
            if let Some(t) = rotations.iter().position(|f| f.len() != n) {
                return Err(Error::InvalidMotion(format!("frame {t} has {} joints, frame 0 has {n}", rotations[t].len())));
            }
        }
        let finite =
            root_positions.iter().all(|p| p.iter().all(|v| v.is_finite())) && rotations.iter().flatten().all(Rotation6D::is_finite);
        if !finite {
            return Err(Error::InvalidMotion("non-finite values".into()));
        }
        Ok(Self { root_positions, rotations, fps })
    }

    /// `frames` copies of the rest pose with the root at `root`.
    pub fn rest(joints: usize, frames: usize, root: [f64; 3], fps: f64) -> Result<Self> {
        Self::new(vec![Vector3::from(root); frames], vec![vec![Rotation6D::IDENTITY; joints]; frames], fps)
    }

    pub fn frame_count(&self) -> usize {
        self.root_positions.len()
    }

    /// Joint count, or 0 for an empty motion.
    pub fn joint_count(&self) -> usize {
        self.rotations.first().map_or(0, Vec::len)
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn root_positions(&self) -> &[Vector3<f64>] {
        &self.root_positions
    }

    pub fn rotations(&self) -> &[Vec<Rotation6D>] {
        &self.rotations
    }

    pub fn rotation(&self, frame: usize, joint: usize) -> &Rotation6D {
        &self.rotations[frame][joint]
    }

    pub fn into_parts(self) -> (Vec<Vector3<f64>>, Vec<Vec<Rotation6D>>, f64) {
        (self.root_positions, self.rotations, self.fps)
    }

    /// Frames `start..start + len`.
    pub fn slice(&self, start: usize, len: usize) -> Self {
        Self {
            root_positions: self.root_positions[start..start + len].to_vec(),
            rotations: self.rotations[start..start + len].to_vec(),
            fps: self.fps,
        }
    }

    /// Concatenate motions with matching joint count and fps.
    pub fn concat(parts: &[Motion]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::InvalidMotion("nothing to concatenate".into()))?;
        let mut root = Vec::new();
        let mut rot = Vec::new();
        for p in parts {
            if p.fps != first.fps || (p.frame_count() > 0 && p.joint_count() != first.joint_count()) {
                return Err(Error::InvalidMotion("concatenated motions disagree on fps or joints".into()));
            }
            root.extend_from_slice(&p.root_positions);
            rot.extend_from_slice(&p.rotations);
        }
        Self::new(root, rot, first.fps)
    }

    pub(crate) fn check_skeleton(&self, skeleton: &Skeleton) -> Result<()> {
        if self.frame_count() > 0 && self.joint_count() != skeleton.len() {
            return Err(Error::JointCountMismatch { expected: skeleton.len(), found: self.joint_count() });
        }
        Ok(())
    }
}

/// Global joint positions, indexed `[frame][joint]`.
pub type Positions = Vec<Vec<Vector3<f64>>>;

pub fn forward_kinematics(skeleton: &Skeleton, motion: &Motion) -> Result<Positions> {
    motion.check_skeleton(skeleton)?;
    let n = skeleton.len();
    let mut out = Vec::with_capacity(motion.frame_count());
    let mut global = vec![Matrix3::identity(); n];
    for t in 0..motion.frame_count() {
        let mut pos = vec![Vector3::zeros(); n];
        for (j, spec) in skeleton.joints().iter().enumerate() {
            let local = rotation6d_to_matrix(&motion.rotations[t][j])?;
            match spec.parent {
                None => {
                    global[j] = local;
                    pos[j] = motion.root_positions[t];
                }
                Some(p) => {
                    pos[j] = pos[p] + global[p] * spec.offset;
                    global[j] = global[p] * local;
                }
            }
        }
        out.push(pos);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TPose {
    pub global_positions: Vec<Vector3<f64>>,
    pub root_height: f64,
    pub character_height: f64,
}

impl TPose {
    /// Positions relative to the root joint.
    pub fn root_relative(&self, root_index: usize) -> Vec<Vector3<f64>> {
        let r = self.global_positions[root_index];
        self.global_positions.iter().map(|p| p - r).collect()
    }
}

/// Rest pose grounded so that the lowest joint sits at y = 0.
pub fn compute_tpose(skeleton: &Skeleton) -> TPose {
    let mut pos = vec![Vector3::<f64>::zeros(); skeleton.len()];
    for (j, spec) in skeleton.joints().iter().enumerate() {
        if let Some(p) = spec.parent {
            pos[j] = pos[p] + spec.offset;
        }
    }
    let min_y = pos.iter().map(|p| p.y).fold(f64::INFINITY, f64::min);
    let max_y = pos.iter().map(|p| p.y).fold(f64::NEG_INFINITY, f64::max);
    for p in &mut pos {
        p.y -= min_y;
    }
    TPose { root_height: pos[skeleton.root_index()].y, character_height: max_y - min_y, global_positions: pos }
}

/// Backward difference of the root trajectory in units per second; frame 0 is zero.
pub fn root_velocity(motion: &Motion) -> Vec<Vector3<f64>> {
    let p = motion.root_positions();
    (0..p.len()).map(|t| if t == 0 { Vector3::zeros() } else { (p[t] - p[t - 1]) * motion.fps() }).collect()
}

pub fn height_normalized_mse(pred: &[Vec<Vector3<f64>>], gt: &[Vec<Vector3<f64>>], character_height: f64) -> Result<f64> {
    if !(character_height > 0.0) {
        return Err(Error::ZeroHeight(character_height));
    }
    if pred.len() != gt.len() || pred.iter().zip(gt).any(|(a, b)| a.len() != b.len()) {
        return Err(Error::ShapeMismatch(format!(
            "prediction has {} frames x {} joints, ground truth {} x {}",
            pred.len(),
            pred.first().map_or(0, Vec::len),
            gt.len(),
            gt.first().map_or(0, Vec::len)
        )));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (a, b) in pred.iter().flatten().zip(gt.iter().flatten()) {
        sum += ((a - b) / character_height).norm_squared();
        count += 3;
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    fn chain() -> Skeleton {
        Skeleton::new(
            "chain",
            vec![
                JointSpec::new("root", None, [0.0, 0.0, 0.0]),
                JointSpec::new("a", Some(0), [0.0, 1.0, 0.0]),
                JointSpec::new("b", Some(1), [0.0, 1.0, 0.0]),
            ],
        )
        .unwrap()
    }

    #[test]
    fn rejects_bad_hierarchies() {
        let two_roots = vec![JointSpec::new("a", None, [0.0; 3]), JointSpec::new("b", None, [0.0; 3])];
        assert!(Skeleton::new("x", two_roots).is_err());
        let forward = vec![JointSpec::new("a", Some(1), [0.0; 3]), JointSpec::new("b", None, [0.0; 3])];
        assert!(Skeleton::new("x", forward).is_err());
        let dup = vec![JointSpec::new("a", None, [0.0; 3]), JointSpec::new("a", Some(0), [0.0; 3])];
        assert!(Skeleton::new("x", dup).is_err());
    }

    #[test]
    fn six_d_examples() {
        let id = rotation6d_to_matrix(&Rotation6D::new([1.0, 0.0, 0.0], [0.0, 1.0, 0.0])).unwrap();
        assert_relative_eq!(id, Matrix3::identity(), epsilon = 1e-15);
        let scaled = rotation6d_to_matrix(&Rotation6D::new([2.0, 0.0, 0.0], [0.0, 3.0, 0.0])).unwrap();
        assert_relative_eq!(scaled, Matrix3::identity(), epsilon = 1e-15);
        let rz = rotation6d_to_matrix(&Rotation6D::new([0.0, 1.0, 0.0], [-1.0, 0.0, 0.0])).unwrap();
        assert_relative_eq!(rz, axis_rotation(2, PI / 2.0), epsilon = 1e-15);
    }

    #[test]
    fn degenerate_six_d_is_an_error() {
        assert!(matches!(rotation6d_to_matrix(&Rotation6D::new([0.0; 3], [0.0, 1.0, 0.0])), Err(Error::DegenerateRotation(_))));
        assert!(matches!(rotation6d_to_matrix(&Rotation6D::new([1.0, 0.0, 0.0], [2.0, 0.0, 0.0])), Err(Error::DegenerateRotation(_))));
    }

    #[test]
    fn matrix_to_six_d_examples() {
        assert_eq!(matrix_to_rotation6d(&Matrix3::identity()).unwrap(), Rotation6D::IDENTITY);
        let r = matrix_to_rotation6d(&axis_rotation(1, PI)).unwrap();
        assert_relative_eq!(r.a, Vector3::new(-1.0, 0.0, 0.0), epsilon = 1e-12);
        assert_relative_eq!(r.b, Vector3::new(0.0, 1.0, 0.0), epsilon = 1e-12);
        assert!(matches!(matrix_to_rotation6d(&(Matrix3::identity() * 2.0)), Err(Error::NotARotation { .. })));
        let reflection = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        assert!(matrix_to_rotation6d(&reflection).is_err());
    }

    #[test]
    fn fk_rotated_child() {
        let sk = Skeleton::new("two", vec![JointSpec::new("r", None, [0.0; 3]), JointSpec::new("c", Some(0), [0.0, 1.0, 0.0])]).unwrap();
        let rot = matrix_to_rotation6d(&axis_rotation(2, PI / 2.0)).unwrap();
        let m = Motion::new(vec![Vector3::new(1.0, 2.0, 3.0)], vec![vec![rot, Rotation6D::IDENTITY]], 30.0).unwrap();
        let p = forward_kinematics(&sk, &m).unwrap();
        assert_relative_eq!(p[0][1], Vector3::new(0.0, 2.0, 3.0), epsilon = 1e-12);
    }

    #[test]
    fn fk_rest_pose_matches_tpose() {
        let sk = chain();
        let tp = compute_tpose(&sk);
        let m = Motion::rest(3, 2, [0.0, tp.root_height, 0.0], 30.0).unwrap();
        let p = forward_kinematics(&sk, &m).unwrap();
        for frame in &p {
            for (a, b) in frame.iter().zip(&tp.global_positions) {
                assert_relative_eq!(a, b, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn fk_rejects_wrong_joint_count() {
        let m = Motion::rest(2, 1, [0.0; 3], 30.0).unwrap();
        assert!(matches!(forward_kinematics(&chain(), &m), Err(Error::JointCountMismatch { .. })));
    }

    #[test]
    fn tpose_examples() {
        let tp = compute_tpose(&chain());
        assert_eq!(tp.root_height, 0.0);
        assert_eq!(tp.character_height, 2.0);
        assert_eq!(compute_tpose(&chain().scaled(2.5)).character_height, 5.0);

        let legs = Skeleton::new(
            "legs",
            vec![
                JointSpec::new("hips", None, [0.0; 3]),
                JointSpec::new("up", Some(0), [0.1, -0.45, 0.0]),
                JointSpec::new("low", Some(1), [0.0, -0.4, 0.0]),
                JointSpec::new("foot", Some(2), [0.0, -0.1, 0.05]),
                JointSpec::new("spine", Some(0), [0.0, 0.3, 0.0]),
            ],
        )
        .unwrap();
        let tp = compute_tpose(&legs);
        assert_relative_eq!(tp.root_height, 0.45 + 0.4 + 0.1, epsilon = 1e-12);
        assert_relative_eq!(tp.global_positions[0], Vector3::new(0.0, tp.root_height, 0.0));
    }

    #[test]
    fn velocity_examples() {
        let still = Motion::rest(1, 4, [1.0, 2.0, 3.0], 30.0).unwrap();
        assert!(root_velocity(&still).iter().all(|v| v.norm() == 0.0));

        let root = (0..5).map(|t| Vector3::new(0.1 * t as f64, 0.0, 0.0)).collect();
        let m = Motion::new(root, vec![vec![Rotation6D::IDENTITY]; 5], 30.0).unwrap();
        let v = root_velocity(&m);
        assert_eq!(v[0], Vector3::zeros());
        for vt in &v[1..] {
            assert_relative_eq!(*vt, Vector3::new(3.0, 0.0, 0.0), epsilon = 1e-9);
        }
    }

    #[test]
    fn velocity_tracks_analytic_derivative() {
        let fps = 120.0;
        let w = 2.0;
        let root = (0..240).map(|t| Vector3::new((w * t as f64 / fps).sin(), 0.0, 0.0)).collect();
        let m = Motion::new(root, vec![vec![Rotation6D::IDENTITY]; 240], fps).unwrap();
        for (t, v) in root_velocity(&m).iter().enumerate().skip(1) {
            let analytic = w * (w * t as f64 / fps).cos();
            // Backward difference error is bounded by w^2 / (2 fps).
            assert!((v.x - analytic).abs() <= w * w / fps, "frame {t}");
        }
    }

    #[test]
    fn metric_examples() {
        let gt = vec![vec![Vector3::new(1.0, 2.0, 3.0); 4]; 3];
        assert_eq!(height_normalized_mse(&gt, &gt, 1.7).unwrap(), 0.0);
        let shifted: Positions = gt.iter().map(|f| f.iter().map(|p| p.add_scalar(0.2)).collect()).collect();
        let m1 = height_normalized_mse(&shifted, &gt, 2.0).unwrap();
        assert_relative_eq!(m1, 0.01, epsilon = 1e-12);
        let m2 = height_normalized_mse(&shifted, &gt, 4.0).unwrap();
        assert_relative_eq!(m2, m1 / 4.0, epsilon = 1e-15);
        assert!(matches!(height_normalized_mse(&gt, &gt, 0.0), Err(Error::ZeroHeight(_))));
    }
}
