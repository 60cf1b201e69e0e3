use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::skeleton::{matrix_to_rotation6d, rotation6d_to_matrix, JointSpec, Motion, Rotation6D, Skeleton};

pub const DEFAULT_ELIMINATE: [&str; 6] = ["finger", "thumb", "index", "middle", "ring", "pinky"];
pub const DEFAULT_SPLIT_RATIO: f64 = 0.5;

/// Name-based joint selection.
///
/// A joint is dropped, with its subtree, when its lowercased name contains an
/// `eliminate` entry, or when `keep` is set and the name contains none of its entries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointFilter {
    pub eliminate: Vec<String>,
    #[serde(default)]
    pub keep: Option<Vec<String>>,
}

impl Default for JointFilter {
    fn default() -> Self {
        Self { eliminate: DEFAULT_ELIMINATE.iter().map(|s| s.to_string()).collect(), keep: None }
    }
}

impl JointFilter {
    fn drops(&self, name: &str) -> bool {
        let lower = name.to_lowercase();
        let eliminated = self.eliminate.iter().any(|id| lower.contains(&id.to_lowercase()));
        let unselected = self.keep.as_ref().is_some_and(|keep| !keep.iter().any(|k| lower.contains(&k.to_lowercase())));
        eliminated || unselected
    }
}

pub fn eliminate_joints_by_identifier(skeleton: &Skeleton, motion: &Motion, identifiers: &[impl AsRef<str>]) -> Result<(Skeleton, Motion)> {
    let filter = JointFilter { eliminate: identifiers.iter().map(|s| s.as_ref().to_string()).collect(), keep: None };
    eliminate_joints(skeleton, motion, &filter)
}

pub fn eliminate_joints(skeleton: &Skeleton, motion: &Motion, filter: &JointFilter) -> Result<(Skeleton, Motion)> {
    motion.check_skeleton(skeleton)?;
    let root = skeleton.root_index();
    if filter.drops(&skeleton.joint(root).name) {
        return Err(Error::RootEliminated(skeleton.joint(root).name.clone()));
    }
    let mut keep = vec![true; skeleton.len()];
    for j in 0..skeleton.len() {
        keep[j] = match skeleton.parent(j) {
            None => true,
            Some(p) => keep[p] && !filter.drops(&skeleton.joint(j).name),
        };
    }
    retain(skeleton, motion, &keep)
}

/// Keep the flagged joints, which must be closed under taking parents.
fn retain(skeleton: &Skeleton, motion: &Motion, keep: &[bool]) -> Result<(Skeleton, Motion)> {
    let mut remap = vec![None; skeleton.len()];
    let mut joints = Vec::new();
    for (j, spec) in skeleton.joints().iter().enumerate() {
        if keep[j] {
            remap[j] = Some(joints.len());
            joints.push(JointSpec {
                name: spec.name.clone(),
                parent: spec.parent.map(|p| remap[p].expect("parent retained before child")),
                offset: spec.offset,
            });
        }
    }
    let rotations = motion.rotations().iter().map(|f| f.iter().zip(keep).filter(|(_, k)| **k).map(|(r, _)| *r).collect()).collect();
    let sk = Skeleton::new(skeleton.name(), joints)?;
    let m = Motion::new(motion.root_positions().to_vec(), rotations, motion.fps())?;
    Ok((sk, m))
}

fn unique_name(skeleton: &Skeleton, base: &str) -> String {
    let base = format!("{base}_split");
    if skeleton.index_of(&base).is_none() {
        return base;
    }
    (2..).map(|k| format!("{base}{k}")).find(|n| skeleton.index_of(n).is_none()).expect("unbounded")
}

/// Insert an identity-rotation joint part way along the bone ending at `joint`.
///
/// The new joint takes index `joint`; the original moves to `joint + 1`.
pub fn split_joint(skeleton: &Skeleton, motion: &Motion, joint: usize, ratio: f64) -> Result<(Skeleton, Motion)> {
    motion.check_skeleton(skeleton)?;
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidRatio(ratio));
    }
    if joint >= skeleton.len() {
        return Err(Error::InvalidSkeleton(format!("joint index {joint} out of range")));
    }
    let parent = skeleton.parent(joint).ok_or_else(|| Error::InvalidSkeleton("the root joint cannot be split".into()))?;
    let shift = |i: usize| if i >= joint { i + 1 } else { i };
    let mut joints = Vec::with_capacity(skeleton.len() + 1);
    for (i, spec) in skeleton.joints().iter().enumerate() {
        if i == joint {
            joints.push(JointSpec { name: unique_name(skeleton, &spec.name), parent: Some(parent), offset: spec.offset * ratio });
            joints.push(JointSpec { name: spec.name.clone(), parent: Some(joint), offset: spec.offset * (1.0 - ratio) });
        } else {
            joints.push(JointSpec { name: spec.name.clone(), parent: spec.parent.map(shift), offset: spec.offset });
        }
    }
    let rotations = motion
        .rotations()
        .iter()
        .map(|f| {
            let mut f = f.clone();
            f.insert(joint, Rotation6D::IDENTITY);
            f
        })
        .collect();
    let sk = Skeleton::new(skeleton.name(), joints)?;
    let m = Motion::new(motion.root_positions().to_vec(), rotations, motion.fps())?;
    Ok((sk, m))
}

/// Collapse a parent-to-child chain into its last joint.
pub fn merge_joint_chain(skeleton: &Skeleton, motion: &Motion, chain: &[usize]) -> Result<(Skeleton, Motion)> {
    motion.check_skeleton(skeleton)?;
    let (&first, &last) = match (chain.first(), chain.last()) {
        (Some(f), Some(l)) => (f, l),
        _ => return Err(Error::NotAChain("empty chain".into())),
    };
    if chain.iter().any(|&j| j >= skeleton.len()) {
        return Err(Error::NotAChain("joint index out of range".into()));
    }
    if skeleton.parent(first).is_none() {
        return Err(Error::NotAChain("the chain may not start at the root".into()));
    }
    for w in chain.windows(2) {
        if skeleton.parent(w[1]) != Some(w[0]) {
            return Err(Error::NotAChain(format!("`{}` is not the parent of `{}`", skeleton.joint(w[0]).name, skeleton.joint(w[1]).name)));
        }
        if skeleton.children(w[0]).len() != 1 {
            return Err(Error::NotAChain(format!("`{}` has side branches", skeleton.joint(w[0]).name)));
        }
    }

    let offset: Vector3<f64> = chain.iter().map(|&j| skeleton.joint(j).offset).sum();
    let mut keep = vec![true; skeleton.len()];
    for &j in &chain[..chain.len() - 1] {
        keep[j] = false;
    }
    let parent = skeleton.parent(first);
    let mut relinked: Vec<JointSpec> = skeleton.joints().to_vec();
    relinked[last].parent = parent;
    relinked[last].offset = offset;
    // The merged joint sits at `last`, past the removed joints, so topological order holds.
    let mut merged_rot = Vec::with_capacity(motion.frame_count());
    for frame in motion.rotations() {
        let mut m = nalgebra::Matrix3::identity();
        for &j in chain {
            m *= rotation6d_to_matrix(&frame[j])?;
        }
        merged_rot.push(matrix_to_rotation6d(&m)?);
    }
    let rotations = motion
        .rotations()
        .iter()
        .zip(&merged_rot)
        .map(|(f, r)| {
            let mut f = f.clone();
            f[last] = *r;
            f
        })
        .collect();
    let relinked_sk = Skeleton::new(skeleton.name(), relinked)?;
    let relinked_motion = Motion::new(motion.root_positions().to_vec(), rotations, motion.fps())?;
    retain(&relinked_sk, &relinked_motion, &keep)
}

/// Overlapping fixed-length windows, each with the root's frame-0 x and z moved to the origin.
pub fn window_motion(motion: &Motion, length: usize, stride: usize) -> Vec<Motion> {
    let (length, stride) = (length.max(1), stride.max(1));
    let mut out = Vec::new();
    let mut start = 0;
    while start + length <= motion.frame_count() {
        let w = motion.slice(start, length);
        let origin = w.root_positions()[0];
        let shift = Vector3::new(origin.x, 0.0, origin.z);
        let root = w.root_positions().iter().map(|p| p - shift).collect();
        let (_, rot, fps) = w.into_parts();
        out.push(Motion::new(root, rot, fps).expect("window of a valid motion"));
        start += stride;
    }
    out
}
