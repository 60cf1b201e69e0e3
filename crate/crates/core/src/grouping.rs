//! Six-part body partition with shared joints and padded slot tables.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::names::{self, Side};
use crate::skeleton::Skeleton;
use retarget_nn::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Part {
    Torso,
    LeftLeg,
    RightLeg,
    LeftArm,
    RightArm,
    Head,
}

impl Part {
    /// Canonical order, which is also the decode precedence for shared joints.
    pub const ALL: [Part; 6] = [Part::Torso, Part::LeftLeg, Part::RightLeg, Part::LeftArm, Part::RightArm, Part::Head];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Part::Torso => "torso",
            Part::LeftLeg => "left_leg",
            Part::RightLeg => "right_leg",
            Part::LeftArm => "left_arm",
            Part::RightArm => "right_arm",
            Part::Head => "head",
        }
    }

    fn leg(side: Side) -> Self {
        match side {
            Side::Left => Part::LeftLeg,
            Side::Right => Part::RightLeg,
        }
    }

    fn arm(side: Side) -> Self {
        match side {
            Side::Left => Part::LeftArm,
            Side::Right => Part::RightArm,
        }
    }

    fn is_leg(self) -> bool {
        matches!(self, Part::LeftLeg | Part::RightLeg)
    }

    fn is_arm(self) -> bool {
        matches!(self, Part::LeftArm | Part::RightArm)
    }
}

/// Lowercase substrings that assign a joint to a part.
///
/// Limb keywords need a side (from "left"/"right" words or l/r abbreviations);
/// a limb match without a side inherits the parent's limb.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KeywordTable {
    pub torso: Vec<String>,
    pub leg: Vec<String>,
    pub arm: Vec<String>,
    pub head: Vec<String>,
    /// Classify the root as torso even when it matches no torso keyword.
    pub root_fallback: bool,
}

fn strings(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

impl Default for KeywordTable {
    fn default() -> Self {
        Self {
            torso: strings(&["hip", "pelvis", "spine", "chest", "torso", "root"]),
            leg: strings(&["leg", "thigh", "knee", "shin", "calf", "foot", "ankle", "toe"]),
            arm: strings(&["shoulder", "clavicle", "arm", "elbow", "forearm", "hand", "wrist", "armour", "pauldron"]),
            head: strings(&["neck", "head", "hair", "face", "jaw", "eye"]),
            root_fallback: true,
        }
    }
}

impl KeywordTable {
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    fn matches(list: &[String], lower: &str) -> bool {
        list.iter().any(|k| lower.contains(k.as_str()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartGrouping {
    groups: [Vec<usize>; 6],
    shared: Vec<(usize, [Part; 2])>,
    owner: Vec<Part>,
}

pub fn classify_joints(skeleton: &Skeleton, table: &KeywordTable) -> Result<PartGrouping> {
    let mut owner: Vec<Part> = Vec::with_capacity(skeleton.len());
    for (j, spec) in skeleton.joints().iter().enumerate() {
        let base = spec.name.rsplit(':').next().unwrap_or(&spec.name);
        let lower = base.to_lowercase();
        let part = match spec.parent {
            None => {
                if KeywordTable::matches(&table.torso, &lower) || table.root_fallback {
                    Part::Torso
                } else {
                    return Err(Error::UnclassifiableRoot(spec.name.clone()));
                }
            }
            Some(p) => {
                let parent = owner[p];
                let side = names::side(base);
                let limb = if KeywordTable::matches(&table.leg, &lower) {
                    side.map(Part::leg).or(parent.is_leg().then_some(parent))
                } else if KeywordTable::matches(&table.arm, &lower) {
                    side.map(Part::arm).or(parent.is_arm().then_some(parent))
                } else {
                    None
                };
                limb.unwrap_or(if KeywordTable::matches(&table.head, &lower) {
                    Part::Head
                } else if KeywordTable::matches(&table.torso, &lower) {
                    Part::Torso
                } else {
                    parent
                })
            }
        };
        debug_assert_eq!(owner.len(), j);
        owner.push(part);
    }

    let mut groups: [Vec<usize>; 6] = Default::default();
    for (j, p) in owner.iter().enumerate() {
        groups[p.index()].push(j);
    }
    let mut grouping = PartGrouping { groups, shared: Vec::new(), owner };

    let mut shares = Vec::new();
    for leg in [Part::LeftLeg, Part::RightLeg] {
        if let Some(hip) = grouping.torso_attachment(skeleton, leg) {
            shares.push((hip, leg));
        }
    }
    let upper = uppermost_spine(skeleton, &grouping);
    for part in [Part::LeftArm, Part::RightArm, Part::Head] {
        if !grouping.groups[part.index()].is_empty() {
            shares.push((upper, part));
        }
    }
    for (joint, part) in shares {
        let g = &mut grouping.groups[part.index()];
        g.push(joint);
        g.sort_unstable();
        g.dedup();
        grouping.shared.push((joint, [Part::Torso, part]));
    }
    Ok(grouping)
}

impl PartGrouping {
    /// Nearest torso ancestor of the top joints of `part`, deepest first; root if none.
    fn torso_attachment(&self, skeleton: &Skeleton, part: Part) -> Option<usize> {
        let tops: Vec<usize> =
            self.groups[part.index()].iter().copied().filter(|&j| skeleton.parent(j).is_some_and(|p| self.owner[p] != part)).collect();
        let attach = |mut j: usize| -> usize {
            while let Some(p) = skeleton.parent(j) {
                if self.owner[p] == Part::Torso {
                    return p;
                }
                j = p;
            }
            skeleton.root_index()
        };
        tops.into_iter()
            .map(attach)
            .max_by(|&a, &b| skeleton.depth(a).cmp(&skeleton.depth(b)).then_with(|| skeleton.joint(b).name.cmp(&skeleton.joint(a).name)))
    }

    pub fn group(&self, part: Part) -> &[usize] {
        &self.groups[part.index()]
    }

    pub fn groups(&self) -> &[Vec<usize>; 6] {
        &self.groups
    }

    /// Shared joints with the pair of parts they belong to.
    pub fn shared(&self) -> &[(usize, [Part; 2])] {
        &self.shared
    }

    /// The part a joint was classified into before sharing.
    pub fn owner(&self, joint: usize) -> Part {
        self.owner[joint]
    }

    pub fn joint_count(&self) -> usize {
        self.owner.len()
    }

    /// The same classification with shared joints removed from all but their owner.
    pub fn disjoint(&self) -> Self {
        let mut groups: [Vec<usize>; 6] = Default::default();
        for (j, p) in self.owner.iter().enumerate() {
            groups[p.index()].push(j);
        }
        Self { groups, shared: Vec::new(), owner: self.owner.clone() }
    }

    pub fn sizes(&self) -> [usize; 6] {
        std::array::from_fn(|i| self.groups[i].len())
    }

    /// Joint index for each padded slot of `part`; `None` marks padding.
    pub fn slots(&self, part: Part, padded: usize) -> Vec<Option<usize>> {
        let g = &self.groups[part.index()];
        assert!(padded >= g.len(), "padded size {padded} below group size {}", g.len());
        (0..padded).map(|k| g.get(k).copied()).collect()
    }

    pub fn mask(&self, part: Part, padded: usize) -> Vec<bool> {
        (0..padded).map(|k| k < self.groups[part.index()].len()).collect()
    }

    /// Group and slot each joint is decoded from: torso, then legs, then arms, then head.
    pub fn decode_sources(&self) -> Vec<(Part, usize)> {
        (0..self.joint_count())
            .map(|j| {
                Part::ALL
                    .iter()
                    .find_map(|&p| self.groups[p.index()].iter().position(|&x| x == j).map(|k| (p, k)))
                    .expect("every joint belongs to a group")
            })
            .collect()
    }
}

/// Per-group padded sizes for a batch: the largest group over its skeletons.
pub fn padded_sizes<'a>(groupings: impl IntoIterator<Item = &'a PartGrouping>) -> [usize; 6] {
    let mut out = [0; 6];
    for g in groupings {
        for (o, s) in out.iter_mut().zip(g.sizes()) {
            *o = (*o).max(s);
        }
    }
    out
}

/// The torso joint through which the head (or, failing that, the arms) attaches.
pub fn uppermost_spine(skeleton: &Skeleton, grouping: &PartGrouping) -> usize {
    for parts in [&[Part::Head][..], &[Part::LeftArm, Part::RightArm]] {
        let found = parts
            .iter()
            .filter_map(|&p| grouping.torso_attachment(skeleton, p))
            .filter(|&j| grouping.owner(j) == Part::Torso)
            .max_by_key(|&j| skeleton.depth(j));
        if let Some(j) = found {
            return j;
        }
    }
    grouping
        .group(Part::Torso)
        .iter()
        .copied()
        .filter(|&j| grouping.owner(j) == Part::Torso)
        .max_by_key(|&j| (skeleton.depth(j), j))
        .unwrap_or(skeleton.root_index())
}

/// Split `[T, B, N, d]` features into six `[T, B, padded_i, d]` tensors with zero padding.
pub fn gather_padded<F: Scalar>(features: &Tensor<F>, grouping: &PartGrouping, padded: [usize; 6]) -> Result<Vec<(Tensor<F>, Vec<bool>)>> {
    let &[t, b, n, d] = features.shape() else {
        return Err(Error::ShapeMismatch(format!("expected [T, B, N, d] features, got {:?}", features.shape())));
    };
    if n != grouping.joint_count() {
        return Err(Error::JointCountMismatch { expected: grouping.joint_count(), found: n });
    }
    let src = features.data();
    Part::ALL
        .iter()
        .map(|&part| {
            let p = padded[part.index()];
            if p < grouping.group(part).len() {
                return Err(Error::ShapeMismatch(format!("padded size {p} below size of {}", part.name())));
            }
            let slots = grouping.slots(part, p);
            let mut out = vec![F::zero(); t * b * p * d];
            for tb in 0..t * b {
                for (k, s) in slots.iter().enumerate() {
                    if let Some(j) = s {
                        let from = (tb * n + j) * d;
                        let to = (tb * p + k) * d;
                        out[to..to + d].copy_from_slice(&src[from..from + d]);
                    }
                }
            }
            Ok((Tensor::new(&[t, b, p, d], out)?, grouping.mask(part, p)))
        })
        .collect()
}

/// Inverse of [`gather_padded`]; shared joints take the torso copy.
pub fn scatter_unpad<F: Scalar>(groups: &[Tensor<F>], grouping: &PartGrouping, n: usize) -> Result<Tensor<F>> {
    if groups.len() != 6 || n != grouping.joint_count() {
        return Err(Error::ShapeMismatch(format!("{} group tensors for {n} joints", groups.len())));
    }
    let &[t, b, _, d] = groups[0].shape() else {
        return Err(Error::ShapeMismatch(format!("expected [T, B, P, d] groups, got {:?}", groups[0].shape())));
    };
    let mut out = vec![F::zero(); t * b * n * d];
    for (j, (part, k)) in grouping.decode_sources().into_iter().enumerate() {
        let g = &groups[part.index()];
        let p = g.shape()[2];
        if g.shape() != [t, b, p, d] || k >= p {
            return Err(Error::ShapeMismatch(format!("group {} has shape {:?}", part.name(), g.shape())));
        }
        for tb in 0..t * b {
            let from = (tb * p + k) * d;
            let to = (tb * n + j) * d;
            out[to..to + d].copy_from_slice(&g.data()[from..from + d]);
        }
    }
    Ok(Tensor::new(&[t, b, n, d], out)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skeleton::JointSpec;

    pub(crate) fn mixamo() -> Skeleton {
        let spec: &[(&str, Option<&str>)] = &[
            ("Hips", None),
            ("Spine", Some("Hips")),
            ("Spine1", Some("Spine")),
            ("Spine2", Some("Spine1")),
            ("Neck", Some("Spine2")),
            ("Head", Some("Neck")),
            ("HeadTop_End", Some("Head")),
            ("LeftShoulder", Some("Spine2")),
            ("LeftArm", Some("LeftShoulder")),
            ("LeftForeArm", Some("LeftArm")),
            ("LeftHand", Some("LeftForeArm")),
            ("RightShoulder", Some("Spine2")),
            ("RightArm", Some("RightShoulder")),
            ("RightForeArm", Some("RightArm")),
            ("RightHand", Some("RightForeArm")),
            ("LeftUpLeg", Some("Hips")),
            ("LeftLeg", Some("LeftUpLeg")),
            ("LeftFoot", Some("LeftLeg")),
            ("LeftToeBase", Some("LeftFoot")),
            ("RightUpLeg", Some("Hips")),
            ("RightLeg", Some("RightUpLeg")),
            ("RightFoot", Some("RightLeg")),
        ];
        let mut joints: Vec<JointSpec> = Vec::new();
        for (name, parent) in spec {
            let p = parent.map(|p| joints.iter().position(|j| j.name == p).unwrap());
            joints.push(JointSpec::new(*name, p, [0.0, 0.1, 0.0]));
        }
        Skeleton::new("mixamo", joints).unwrap()
    }

    fn names(sk: &Skeleton, g: &[usize]) -> Vec<String> {
        g.iter().map(|&j| sk.joint(j).name.clone()).collect()
    }

    #[test]
    fn mixamo_hand_labels() {
        let sk = mixamo();
        let g = classify_joints(&sk, &KeywordTable::default()).unwrap();
        assert_eq!(names(&sk, g.group(Part::Torso)), ["Hips", "Spine", "Spine1", "Spine2"]);
        assert_eq!(names(&sk, g.group(Part::Head)), ["Spine2", "Neck", "Head", "HeadTop_End"]);
        assert_eq!(names(&sk, g.group(Part::LeftArm)), ["Spine2", "LeftShoulder", "LeftArm", "LeftForeArm", "LeftHand"]);
        assert_eq!(names(&sk, g.group(Part::RightArm)), ["Spine2", "RightShoulder", "RightArm", "RightForeArm", "RightHand"]);
        assert_eq!(names(&sk, g.group(Part::LeftLeg)), ["Hips", "LeftUpLeg", "LeftLeg", "LeftFoot", "LeftToeBase"]);
        assert_eq!(names(&sk, g.group(Part::RightLeg)), ["Hips", "RightUpLeg", "RightLeg", "RightFoot"]);
        assert_eq!(sk.joint(uppermost_spine(&sk, &g)).name, "Spine2");
        assert_eq!(g.shared().len(), 5);

        let d = g.disjoint();
        let total: usize = d.sizes().iter().sum();
        assert_eq!(total, sk.len());
    }

    #[test]
    fn armour_and_head_tops() {
        let mut joints = mixamo().joints().to_vec();
        let rs = joints.iter().position(|j| j.name == "RightShoulder").unwrap();
        let head = joints.iter().position(|j| j.name == "Head").unwrap();
        joints.push(JointSpec::new("RightArmour1", Some(rs), [0.1, 0.0, 0.0]));
        joints.push(JointSpec::new("HeadTop_End1", Some(head), [0.0, 0.1, 0.0]));
        joints.push(JointSpec::new("Armour", Some(rs), [0.1, 0.0, 0.0]));
        let sk = Skeleton::new("warrok", joints).unwrap();
        let g = classify_joints(&sk, &KeywordTable::default()).unwrap();
        assert_eq!(g.owner(sk.index_of("RightArmour1").unwrap()), Part::RightArm);
        assert_eq!(g.owner(sk.index_of("Armour").unwrap()), Part::RightArm);
        assert_eq!(g.owner(sk.index_of("HeadTop_End1").unwrap()), Part::Head);
    }

    #[test]
    fn root_rules() {
        let sk =
            Skeleton::new("odd", vec![JointSpec::new("Base", None, [0.0; 3]), JointSpec::new("Thing", Some(0), [0.0, 1.0, 0.0])]).unwrap();
        let g = classify_joints(&sk, &KeywordTable::default()).unwrap();
        assert_eq!(g.group(Part::Torso), [0, 1]);
        assert_eq!(uppermost_spine(&sk, &g), 1);
        let strict = KeywordTable { root_fallback: false, ..Default::default() };
        assert!(matches!(classify_joints(&sk, &strict), Err(Error::UnclassifiableRoot(_))));
    }

    #[test]
    fn gather_pads_and_scatter_inverts() {
        let sk = mixamo();
        let g = classify_joints(&sk, &KeywordTable::default()).unwrap();
        let n = sk.len();
        let feats = Tensor::<f64>::new(&[2, 1, n, 2], (0..4 * n).map(|v| v as f64 + 1.0).collect()).unwrap();
        let mut padded = g.sizes();
        padded[Part::Head.index()] += 2;
        let parts = gather_padded(&feats, &g, padded).unwrap();
        let (head, mask) = &parts[Part::Head.index()];
        assert_eq!(mask, &[true, true, true, true, false, false]);
        assert!(head.data()[8..12].iter().all(|v| *v == 0.0));
        let hips = &feats.data()[0..2];
        for part in [Part::Torso, Part::LeftLeg, Part::RightLeg] {
            assert_eq!(&parts[part.index()].0.data()[0..2], hips);
        }
        let tensors: Vec<_> = parts.into_iter().map(|(t, _)| t).collect();
        assert_eq!(scatter_unpad(&tensors, &g, n).unwrap(), feats);
        let zeros: Vec<Tensor<f64>> = tensors.iter().map(|t| Tensor::zeros(t.shape())).collect();
        assert!(scatter_unpad(&zeros, &g, n).unwrap().data().iter().all(|v| *v == 0.0));
    }
}
