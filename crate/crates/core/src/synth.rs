//! Procedural humanoids, motions, paired split-joint variants and evaluation splits.

use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::{Matrix3, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bvh::{merge_joint_chain, split_joint, END_SUFFIX};
use crate::error::{Error, Result};
use crate::names::normalized_words;
use crate::skeleton::{axis_rotation, forward_kinematics, matrix_to_rotation6d, JointSpec, Motion, Skeleton};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NamingStyle {
    /// `LeftForeArm`
    Camel,
    /// `left_fore_arm`
    Snake,
    /// `L_ForeArm`
    Short,
}

impl NamingStyle {
    pub const ALL: [NamingStyle; 3] = [NamingStyle::Camel, NamingStyle::Snake, NamingStyle::Short];

    /// Name of a joint given its side (if any) and capitalized words.
    fn name(self, side: Option<char>, words: &[&str], index: Option<usize>) -> String {
        let side_word = side.map(|s| if s == 'L' { "Left" } else { "Right" });
        let mut out = match self {
            NamingStyle::Camel => side_word.into_iter().chain(words.iter().copied()).collect::<String>(),
            NamingStyle::Snake => side_word.into_iter().chain(words.iter().copied()).map(str::to_lowercase).collect::<Vec<_>>().join("_"),
            NamingStyle::Short => match side {
                Some(s) => format!("{s}_{}", words.concat()),
                None => words.concat(),
            },
        };
        if let Some(i) = index.filter(|&i| i > 0) {
            if self == NamingStyle::Snake {
                out.push('_');
            }
            out.push_str(&i.to_string());
        }
        out
    }
}

/// Body-part role of a generated joint, recovered from its name.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Hips,
    Spine,
    Neck,
    Head,
    Shoulder,
    UpperArm,
    ForeArm,
    Hand,
    UpLeg,
    Leg,
    Foot,
}

impl Role {
    /// Role and side (+1 left, -1 right, 0 centre) of a joint name; end sites and inserted joints have none.
    pub fn of(name: &str) -> Option<(Role, f64)> {
        let w = normalized_words(name);
        let has = |s: &str| w.iter().any(|x| x == s);
        if has("end") || has("split") {
            return None;
        }
        let side = if has("left") {
            1.0
        } else if has("right") {
            -1.0
        } else {
            0.0
        };
        let role = if has("up") && has("leg") {
            Role::UpLeg
        } else if has("leg") {
            Role::Leg
        } else if has("foot") {
            Role::Foot
        } else if has("shoulder") {
            Role::Shoulder
        } else if has("fore") && has("arm") {
            Role::ForeArm
        } else if has("arm") {
            Role::UpperArm
        } else if has("hand") {
            Role::Hand
        } else if has("spine") {
            Role::Spine
        } else if has("neck") {
            Role::Neck
        } else if has("head") {
            Role::Head
        } else if has("hips") || has("hip") {
            Role::Hips
        } else {
            return None;
        };
        Some((role, side))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HumanoidParams {
    /// Character height range in scene units.
    pub height: [f64; 2],
    /// Relative per-bone length jitter.
    pub jitter: f64,
    /// Inclusive range of spine joint counts.
    pub spine: [usize; 2],
}

impl Default for HumanoidParams {
    fn default() -> Self {
        Self { height: [1.5, 1.9], jitter: 0.08, spine: [2, 4] }
    }
}

/// A humanoid of `22 + spine` joints: hips, spine chain, neck, head and end site,
/// shoulder-arm-forearm-hand-end arms and upleg-leg-foot-end legs.
pub fn generate_humanoid(params: &HumanoidParams, style: NamingStyle, seed: u64) -> Result<Skeleton> {
    let [lo, hi] = params.height;
    if !(lo > 0.0 && hi >= lo) || !(0.0..0.5).contains(&params.jitter) {
        return Err(Error::InvalidConfig(format!("invalid humanoid ranges {params:?}")));
    }
    let [s_lo, s_hi] = params.spine;
    if s_lo == 0 || s_hi < s_lo {
        return Err(Error::InvalidConfig(format!("invalid spine range {:?}", params.spine)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = rng.gen_range(lo..=hi);
    let spine_count = rng.gen_range(s_lo..=s_hi);
    let mut len = |f: f64| f * h * (1.0 + rng.gen_range(-params.jitter..=params.jitter));

    let (upleg, leg, ankle, toe) = (len(0.245), len(0.245), len(0.04), len(0.1));
    let hip_w = len(0.09);
    let spine_total = len(0.25);
    let (neck, head, head_top) = (len(0.05), len(0.07), len(0.1));
    let (shoulder, arm, forearm, hand, finger) = (len(0.05), len(0.1), len(0.17), len(0.15), len(0.08));

    let mut joints: Vec<JointSpec> = Vec::new();
    let mut push = |name: String, parent: Option<usize>, off: [f64; 3]| -> usize {
        joints.push(JointSpec::new(name, parent, off));
        joints.len() - 1
    };
    let name = |side: Option<char>, words: &[&str], i: Option<usize>| style.name(side, words, i);

    let hips = push(name(None, &["Hips"], None), None, [0.0, upleg + leg + ankle, 0.0]);
    for (side, sx) in [('L', 1.0), ('R', -1.0)] {
        let a = push(name(Some(side), &["Up", "Leg"], None), Some(hips), [sx * hip_w, 0.0, 0.0]);
        let b = push(name(Some(side), &["Leg"], None), Some(a), [0.0, -upleg, 0.0]);
        let c = push(name(Some(side), &["Foot"], None), Some(b), [0.0, -leg, 0.0]);
        push(format!("{}{END_SUFFIX}", name(Some(side), &["Foot"], None)), Some(c), [0.0, -ankle, toe]);
    }
    let mut top = hips;
    for i in 0..spine_count {
        top = push(name(None, &["Spine"], Some(i)), Some(top), [0.0, spine_total / spine_count as f64, 0.0]);
    }
    let n = push(name(None, &["Neck"], None), Some(top), [0.0, neck, 0.0]);
    let hd = push(name(None, &["Head"], None), Some(n), [0.0, head, 0.0]);
    push(format!("{}{END_SUFFIX}", name(None, &["Head"], None)), Some(hd), [0.0, head_top, 0.0]);
    for (side, sx) in [('L', 1.0), ('R', -1.0)] {
        let a = push(name(Some(side), &["Shoulder"], None), Some(top), [sx * shoulder, 0.0, 0.0]);
        let b = push(name(Some(side), &["Arm"], None), Some(a), [sx * arm, 0.0, 0.0]);
        let c = push(name(Some(side), &["Fore", "Arm"], None), Some(b), [sx * forearm, 0.0, 0.0]);
        let d = push(name(Some(side), &["Hand"], None), Some(c), [sx * hand, 0.0, 0.0]);
        push(format!("{}{END_SUFFIX}", name(Some(side), &["Hand"], None)), Some(d), [sx * finger, 0.0, 0.0]);
    }
    let style_tag = match style {
        NamingStyle::Camel => "camel",
        NamingStyle::Snake => "snake",
        NamingStyle::Short => "short",
    };
    Skeleton::new(format!("humanoid_{style_tag}_{seed}"), joints)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionKind {
    Walk,
    Wave,
    Squat,
    Composite,
}

impl MotionKind {
    pub const ALL: [MotionKind; 4] = [MotionKind::Walk, MotionKind::Wave, MotionKind::Squat, MotionKind::Composite];

    pub fn name(self) -> &'static str {
        match self {
            MotionKind::Walk => "walk",
            MotionKind::Wave => "wave",
            MotionKind::Squat => "squat",
            MotionKind::Composite => "composite",
        }
    }
}

/// Per-clip parameters drawn from a seed; shared by every character that performs the clip.
#[derive(Clone, Copy, Debug)]
struct ClipParams {
    freq: f64,
    phase: f64,
    stride: f64,
    knee: f64,
    swing: f64,
    wave: f64,
    depth: f64,
    sway: f64,
    speed: f64,
    heading: f64,
}

impl ClipParams {
    fn draw(seed: u64) -> Self {
        let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x6d6f_7469_6f6e);
        Self {
            freq: r.gen_range(0.7..1.3),
            phase: r.gen_range(0.0..2.0 * PI),
            stride: r.gen_range(0.3..0.6),
            knee: r.gen_range(0.4..0.9),
            swing: r.gen_range(0.2..0.5),
            wave: r.gen_range(0.4..0.8),
            depth: r.gen_range(0.5..1.0),
            sway: r.gen_range(0.03..0.12),
            speed: r.gen_range(0.6..1.0),
            heading: r.gen_range(-0.3..0.3),
        }
    }
}

#[derive(Default)]
struct Pose {
    // (x, y, z) Euler angles per role-side, composed as Z * X * Y.
    angles: std::collections::HashMap<(Role, i8), [f64; 3]>,
}

impl Pose {
    fn set(&mut self, role: Role, side: f64, a: [f64; 3]) {
        let e = self.angles.entry((role, side as i8)).or_insert([0.0; 3]);
        for k in 0..3 {
            e[k] += a[k];
        }
    }

    fn matrix(&self, role: Role, side: f64, share: f64) -> Matrix3<f64> {
        let a = self.angles.get(&(role, side as i8)).copied().unwrap_or([0.0; 3]);
        axis_rotation(2, a[2] * share) * axis_rotation(0, a[0] * share) * axis_rotation(1, a[1] * share)
    }
}

fn lower_body_walk(p: &mut Pose, c: &ClipParams, ph: f64) {
    for s in [1.0, -1.0] {
        let phi = ph + if s > 0.0 { 0.0 } else { PI };
        p.set(Role::UpLeg, s, [c.stride * phi.sin(), 0.0, 0.0]);
        p.set(Role::Leg, s, [c.knee * 0.5 * (1.0 - (phi + FRAC_PI_2).cos()), 0.0, 0.0]);
        p.set(Role::Foot, s, [-0.2 * phi.sin(), 0.0, 0.0]);
    }
}

fn arms_down(p: &mut Pose) {
    for s in [1.0, -1.0] {
        p.set(Role::UpperArm, s, [0.0, 0.0, -s * 1.25]);
    }
}

fn frame_pose(kind: MotionKind, c: &ClipParams, time: f64) -> (Pose, Vector3<f64>, f64) {
    let ph = 2.0 * PI * c.freq * time + c.phase;
    let mut p = Pose::default();
    // Root offset in units of root height and a yaw angle.
    let mut root = Vector3::zeros();
    let mut yaw = c.heading;
    match kind {
        MotionKind::Walk => {
            lower_body_walk(&mut p, c, ph);
            arms_down(&mut p);
            for s in [1.0, -1.0] {
                p.set(Role::UpperArm, s, [-s.signum() * c.swing * ph.sin() * s, 0.0, 0.0]);
                p.set(Role::ForeArm, s, [0.0, s * 0.3, 0.0]);
            }
            p.set(Role::Spine, 0.0, [0.05, 0.15 * ph.sin(), 0.0]);
            root.x = c.speed * time;
            root.y = 0.02 * (2.0 * ph).sin();
            yaw += FRAC_PI_2;
        }
        MotionKind::Wave => {
            arms_down(&mut p);
            p.set(Role::UpperArm, -1.0, [0.0, 0.0, -1.25 + 2.2]);
            p.set(Role::ForeArm, -1.0, [0.0, c.wave * ph.sin() - 0.8, 0.0]);
            p.set(Role::Hand, -1.0, [0.0, 0.0, 0.3 * (2.0 * ph).sin()]);
            p.set(Role::Spine, 0.0, [0.0, 0.0, c.sway * ph.sin()]);
            p.set(Role::Head, 0.0, [0.0, 0.2 * (0.5 * ph).sin(), 0.0]);
            root.x = c.sway * ph.sin();
        }
        MotionKind::Squat => {
            let d = c.depth * 0.5 * (1.0 - ph.cos());
            for s in [1.0, -1.0] {
                p.set(Role::UpLeg, s, [-d, 0.0, 0.0]);
                p.set(Role::Leg, s, [2.0 * d, 0.0, 0.0]);
                p.set(Role::Foot, s, [-d, 0.0, 0.0]);
                p.set(Role::UpperArm, s, [-1.2 * d, 0.0, -s * 1.25 * (1.0 - d / c.depth.max(1e-9))]);
            }
            p.set(Role::Spine, 0.0, [0.4 * d, 0.0, 0.0]);
            root.y = -0.35 * d;
            root.z = -0.1 * d;
        }
        MotionKind::Composite => {
            lower_body_walk(&mut p, c, ph);
            arms_down(&mut p);
            p.set(Role::UpperArm, 1.0, [0.0, 0.0, 2.2]);
            p.set(Role::ForeArm, 1.0, [0.0, -(c.wave * (1.3 * ph).sin()) + 0.8, 0.0]);
            p.set(Role::Spine, 0.0, [0.1, 0.2 * (0.5 * ph).sin(), 0.0]);
            p.set(Role::Neck, 0.0, [0.0, -0.2 * (0.5 * ph).sin(), 0.0]);
            root.x = 0.6 * c.speed * time;
            root.y = 0.02 * (2.0 * ph).sin();
            yaw += FRAC_PI_2 + 0.25 * (0.3 * ph).sin();
        }
    }
    (p, root, yaw)
}

/// Smooth phase-driven motion for a generated humanoid.
///
/// Joints are driven by role, recovered from their names; the root trajectory is
/// scaled by the hip height so that characters share it up to proportion.
pub fn generate_motion(skeleton: &Skeleton, kind: MotionKind, frames: usize, fps: f64, seed: u64) -> Result<Motion> {
    if frames < 2 {
        return Err(Error::InvalidMotion(format!("at least two frames are required, got {frames}")));
    }
    if !(fps > 0.0) {
        return Err(Error::InvalidMotion(format!("fps must be positive, got {fps}")));
    }
    let clip = ClipParams::draw(seed);
    let roles: Vec<Option<(Role, f64)>> = skeleton.joints().iter().map(|j| Role::of(&j.name)).collect();
    let spine_count = roles.iter().filter(|r| matches!(r, Some((Role::Spine, _)))).count().max(1) as f64;
    let root_height = crate::skeleton::compute_tpose(skeleton).root_height;
    let base = skeleton.joint(skeleton.root_index()).offset;
    let mut root = Vec::with_capacity(frames);
    let mut rotations = Vec::with_capacity(frames);
    for t in 0..frames {
        let time = t as f64 / fps;
        let (pose, offset, yaw) = frame_pose(kind, &clip, time);
        let mut frame = Vec::with_capacity(skeleton.len());
        for (j, role) in roles.iter().enumerate() {
            let m = if j == skeleton.root_index() {
                axis_rotation(1, yaw) * pose.matrix(Role::Hips, 0.0, 1.0)
            } else {
                match role {
                    Some((Role::Spine, _)) => pose.matrix(Role::Spine, 0.0, 1.0 / spine_count),
                    Some((r, s)) => pose.matrix(*r, *s, 1.0),
                    None => Matrix3::identity(),
                }
            };
            frame.push(matrix_to_rotation6d(&m)?);
        }
        rotations.push(frame);
        let heading = axis_rotation(1, clip.heading) * Vector3::new(offset.x, 0.0, offset.z);
        root.push(Vector3::new(base.x, base.y.max(root_height), base.z) + Vector3::new(heading.x, offset.y, heading.z) * root_height);
    }
    Motion::new(root, rotations, fps)
}

/// How a variant skeleton is derived from its base.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum VariantTransform {
    /// Split the named joints, each at `ratio` along its incoming bone.
    Split { joints: Vec<String>, ratio: f64 },
    /// Merge each listed chain of joint names into its last joint.
    Merge { chains: Vec<Vec<String>> },
}

fn joint_index(sk: &Skeleton, name: &str) -> Result<usize> {
    sk.index_of(name).ok_or_else(|| Error::InvalidSkeleton(format!("no joint named {name:?} in {}", sk.name())))
}

/// Apply a transform to a skeleton and motion, giving the variant and its exact ground truth.
///
/// Split variants reproduce every original joint's FK exactly; merge variants only
/// keep the end of each chain.
pub fn paired_variant(skeleton: &Skeleton, motion: &Motion, transform: &VariantTransform) -> Result<(Skeleton, Motion)> {
    let (mut sk, mut m) = (skeleton.clone(), motion.clone());
    match transform {
        VariantTransform::Split { joints, ratio } => {
            for name in joints {
                let j = joint_index(&sk, name)?;
                (sk, m) = split_joint(&sk, &m, j, *ratio)?;
            }
        }
        VariantTransform::Merge { chains } => {
            for chain in chains {
                let idx = chain.iter().map(|n| joint_index(&sk, n)).collect::<Result<Vec<_>>>()?;
                (sk, m) = merge_joint_chain(&sk, &m, &idx)?;
            }
        }
    }
    sk.set_name(format!("{}_variant", skeleton.name()));
    Ok((sk, m))
}

/// Joint names of the given roles, both sides.
pub fn joints_with_roles(skeleton: &Skeleton, roles: &[Role]) -> Vec<String> {
    skeleton.joints().iter().filter(|j| Role::of(&j.name).is_some_and(|(r, _)| roles.contains(&r))).map(|j| j.name.clone()).collect()
}

/// Largest FK deviation over the joints the variant shares (by name) with the base.
pub fn shared_joint_fk_error(base: &Skeleton, base_motion: &Motion, variant: &Skeleton, variant_motion: &Motion) -> Result<f64> {
    let a = forward_kinematics(base, base_motion)?;
    let b = forward_kinematics(variant, variant_motion)?;
    let mut worst: f64 = 0.0;
    for (j, spec) in base.joints().iter().enumerate() {
        if let Some(k) = variant.index_of(&spec.name) {
            for (fa, fb) in a.iter().zip(&b) {
                worst = worst.max((fa[j] - fb[k]).abs().max());
            }
        }
    }
    Ok(worst)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SplitTag {
    #[serde(rename = "sc+sm")]
    ScSm,
    #[serde(rename = "sc+um")]
    ScUm,
    #[serde(rename = "uc+sm")]
    UcSm,
    #[serde(rename = "uc+um")]
    UcUm,
}

impl SplitTag {
    pub const ALL: [SplitTag; 4] = [SplitTag::ScSm, SplitTag::ScUm, SplitTag::UcSm, SplitTag::UcUm];

    pub fn name(self) -> &'static str {
        match self {
            SplitTag::ScSm => "sc+sm",
            SplitTag::ScUm => "sc+um",
            SplitTag::UcSm => "uc+sm",
            SplitTag::UcUm => "uc+um",
        }
    }

    pub fn parts(self) -> (bool, bool) {
        match self {
            SplitTag::ScSm => (true, true),
            SplitTag::ScUm => (true, false),
            SplitTag::UcSm => (false, true),
            SplitTag::UcUm => (false, false),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSplit {
    pub tag: SplitTag,
    pub characters: Vec<usize>,
    pub motions: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub train_characters: Vec<usize>,
    pub train_motions: Vec<usize>,
    pub splits: Vec<EvalSplit>,
}

/// Partition characters and motions into seen and unseen sets.
///
/// At least one of each is held out, and at least one of each is kept for training.
pub fn make_splits(characters: usize, motions: usize, holdout: [f64; 2], seed: u64) -> Result<SplitPlan> {
    if characters < 2 || motions < 2 {
        return Err(Error::InsufficientData(format!("need at least two characters and two motions, got {characters} and {motions}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pick = |n: usize, frac: f64| -> (Vec<usize>, Vec<usize>) {
        let held = ((n as f64 * frac).round() as usize).clamp(1, n - 1);
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        let mut unseen = idx.split_off(n - held);
        idx.sort_unstable();
        unseen.sort_unstable();
        (idx, unseen)
    };
    let (sc, uc) = pick(characters, holdout[0]);
    let (sm, um) = pick(motions, holdout[1]);
    let splits = SplitTag::ALL
        .iter()
        .map(|&tag| {
            let (seen_c, seen_m) = tag.parts();
            EvalSplit {
                tag,
                characters: if seen_c { sc.clone() } else { uc.clone() },
                motions: if seen_m { sm.clone() } else { um.clone() },
            }
        })
        .collect();
    Ok(SplitPlan { train_characters: sc, train_motions: sm, splits })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grouping::{classify_joints, KeywordTable};
    use crate::skeleton::compute_tpose;

    #[test]
    fn humanoid_sizes_and_names() {
        for (i, style) in NamingStyle::ALL.into_iter().enumerate() {
            let sk = generate_humanoid(&HumanoidParams::default(), style, i as u64).unwrap();
            assert!((24..=26).contains(&sk.len()), "{}", sk.len());
            let h = compute_tpose(&sk).character_height;
            assert!((1.5 * 0.85..=1.9 * 1.15).contains(&h), "{h}");
            assert!(Role::of(&sk.joint(0).name) == Some((Role::Hips, 0.0)));
        }
        let camel = generate_humanoid(&HumanoidParams::default(), NamingStyle::Camel, 3).unwrap();
        let snake = generate_humanoid(&HumanoidParams::default(), NamingStyle::Snake, 3).unwrap();
        let short = generate_humanoid(&HumanoidParams::default(), NamingStyle::Short, 3).unwrap();
        assert!(camel.index_of("LeftForeArm").is_some());
        assert!(snake.index_of("left_fore_arm").is_some());
        assert!(short.index_of("L_ForeArm").is_some());
        assert!(camel.index_of("LeftFoot_End").is_some());
        assert_eq!(camel.offsets(), snake.offsets());
    }

    #[test]
    fn every_joint_is_grouped() {
        for seed in 0..12 {
            let style = NamingStyle::ALL[seed as usize % 3];
            let sk = generate_humanoid(&HumanoidParams::default(), style, seed).unwrap();
            let g = classify_joints(&sk, &KeywordTable::default()).unwrap();
            let mut seen = vec![false; sk.len()];
            for group in g.groups() {
                assert!(!group.is_empty());
                for &j in group {
                    seen[j] = true;
                }
            }
            assert!(seen.iter().all(|&s| s), "{:?}", sk.topology());
        }
    }

    #[test]
    fn walk_advances_and_seeds_differ() {
        let sk = generate_humanoid(&HumanoidParams::default(), NamingStyle::Camel, 1).unwrap();
        let m = generate_motion(&sk, MotionKind::Walk, 60, 30.0, 4).unwrap();
        // The walk runs along a fixed heading; its projection increases.
        let heading = m.root_positions()[59] - m.root_positions()[0];
        for w in m.root_positions().windows(2) {
            assert!((w[1] - w[0]).dot(&heading) > 0.0);
        }
        let other = generate_motion(&sk, MotionKind::Walk, 60, 30.0, 5).unwrap();
        assert_ne!(m, other);
        assert_eq!(m, generate_motion(&sk, MotionKind::Walk, 60, 30.0, 4).unwrap());
    }

    #[test]
    fn split_variant_is_exact() {
        let sk = generate_humanoid(&HumanoidParams::default(), NamingStyle::Short, 2).unwrap();
        let m = generate_motion(&sk, MotionKind::Composite, 20, 30.0, 1).unwrap();
        let joints = joints_with_roles(&sk, &[Role::ForeArm, Role::Leg]);
        assert_eq!(joints.len(), 4);
        let (v, vm) = paired_variant(&sk, &m, &VariantTransform::Split { joints, ratio: 0.4 }).unwrap();
        assert_eq!(v.len(), sk.len() + 4);
        assert!(shared_joint_fk_error(&sk, &m, &v, &vm).unwrap() < 1e-9);
    }

    #[test]
    fn splits_cover_both_axes() {
        let plan = make_splits(6, 8, [0.34, 0.25], 9).unwrap();
        assert_eq!(plan.splits.len(), 4);
        let uc = &plan.splits[3].characters;
        assert!(uc.iter().all(|c| !plan.train_characters.contains(c)));
        assert!(plan.splits[3].motions.iter().all(|m| !plan.train_motions.contains(m)));
        assert_eq!(plan, make_splits(6, 8, [0.34, 0.25], 9).unwrap());
        assert!(make_splits(1, 8, [0.5, 0.5], 0).is_err());
    }
}
