//! BVH reading and writing, plus the topology transforms used for dataset preparation.

mod transform;

use std::fmt::{self, Write as _};
use std::str::FromStr;

use nalgebra::Matrix3;
#[cfg(test)]
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::skeleton::{axis_rotation, matrix_to_rotation6d, rotation6d_to_matrix, JointSpec, Motion, Skeleton};

pub use transform::{
    eliminate_joints, eliminate_joints_by_identifier, merge_joint_chain, split_joint, window_motion, JointFilter, DEFAULT_ELIMINATE,
    DEFAULT_SPLIT_RATIO,
};

/// Suffix given to leaf joints created from `End Site` blocks.
pub const END_SUFFIX: &str = "_End";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }

    fn letter(self) -> char {
        ['X', 'Y', 'Z'][self.index()]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Channel {
    Position(Axis),
    Rotation(Axis),
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Channel::Position(a) => write!(f, "{}position", a.letter()),
            Channel::Rotation(a) => write!(f, "{}rotation", a.letter()),
        }
    }
}

impl FromStr for Channel {
    type Err = ();

    fn from_str(s: &str) -> std::result::Result<Self, ()> {
        let lower = s.to_ascii_lowercase();
        let axis = match lower.as_bytes().first() {
            Some(b'x') => Axis::X,
            Some(b'y') => Axis::Y,
            Some(b'z') => Axis::Z,
            _ => return Err(()),
        };
        match &lower[1..] {
            "position" => Ok(Channel::Position(axis)),
            "rotation" => Ok(Channel::Rotation(axis)),
            _ => Err(()),
        }
    }
}

/// Rotation channel axes in file order; the matrix is their left-to-right product.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EulerOrder(pub Vec<Axis>);

impl EulerOrder {
    pub fn zxy() -> Self {
        Self(vec![Axis::Z, Axis::X, Axis::Y])
    }

    fn of(channels: &[Channel]) -> Self {
        Self(
            channels
                .iter()
                .filter_map(|c| match c {
                    Channel::Rotation(a) => Some(*a),
                    Channel::Position(_) => None,
                })
                .collect(),
        )
    }

    /// Compose a rotation from angles in degrees, one per axis.
    pub fn compose(&self, degrees: &[f64]) -> Matrix3<f64> {
        self.0.iter().zip(degrees).fold(Matrix3::identity(), |m, (a, d)| m * axis_rotation(a.index(), d.to_radians()))
    }

    /// Angles in degrees reproducing `m` for a full three-axis order.
    ///
    /// Orders with fewer or repeated axes cannot represent every rotation; the
    /// missing axes are solved for and dropped.
    pub fn decompose(&self, m: &Matrix3<f64>) -> Vec<f64> {
        let axes: Vec<usize> = self.0.iter().map(|a| a.index()).collect();
        let mut full: Vec<usize> = Vec::with_capacity(3);
        for &a in &axes {
            if !full.contains(&a) {
                full.push(a);
            }
        }
        if full.len() < axes.len() {
            log::warn!("euler order {self} repeats an axis; writing an approximate decomposition");
        }
        for a in 0..3 {
            if !full.contains(&a) {
                full.push(a);
            }
        }
        let angles = tait_bryan(m, [full[0], full[1], full[2]]);
        axes.iter()
            .map(|a| {
                let k = full.iter().position(|f| f == a).expect("axis present");
                angles[k].to_degrees()
            })
            .collect()
    }
}

impl fmt::Display for EulerOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.iter().try_for_each(|a| f.write_char(a.letter()))
    }
}

/// Angles (radians) with `m = R_i(a) R_j(b) R_k(c)` for distinct axes `i, j, k`.
fn tait_bryan(m: &Matrix3<f64>, [i, j, k]: [usize; 3]) -> [f64; 3] {
    let sign = if (j + 3 - i) % 3 == 1 { 1.0 } else { -1.0 };
    let sb = (sign * m[(i, k)]).clamp(-1.0, 1.0);
    let b = sb.asin();
    if b.cos() > 1e-9 {
        let a = (-sign * m[(j, k)]).atan2(m[(k, k)]);
        let c = (-sign * m[(i, j)]).atan2(m[(i, i)]);
        [a, b, c]
    } else {
        // Gimbal lock: only a +/- c is determined, so put it all in a.
        let a = (sign * m[(k, j)]).atan2(m[(j, j)]);
        [a, b, 0.0]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BvhDocument {
    pub skeleton: Skeleton,
    pub motion: Motion,
    pub channel_layout: Vec<Vec<Channel>>,
    pub euler_order: Vec<EulerOrder>,
}

impl BvhDocument {
    /// Wrap a skeleton and motion with the conventional channel layout:
    /// root XYZ position then ZXY rotation, other joints ZXY, end sites none.
    pub fn from_motion(skeleton: Skeleton, motion: Motion) -> Result<Self> {
        motion.check_skeleton(&skeleton)?;
        let rot = [Channel::Rotation(Axis::Z), Channel::Rotation(Axis::X), Channel::Rotation(Axis::Y)];
        let channel_layout: Vec<Vec<Channel>> = (0..skeleton.len())
            .map(|j| {
                if j == skeleton.root_index() {
                    let mut c = vec![Channel::Position(Axis::X), Channel::Position(Axis::Y), Channel::Position(Axis::Z)];
                    c.extend(rot);
                    c
                } else if is_end_site(&skeleton, j) {
                    Vec::new()
                } else {
                    rot.to_vec()
                }
            })
            .collect();
        let euler_order = channel_layout.iter().map(|c| EulerOrder::of(c)).collect();
        Ok(Self { skeleton, motion, channel_layout, euler_order })
    }

    pub fn channel_count(&self) -> usize {
        self.channel_layout.iter().map(Vec::len).sum()
    }

    /// One-line-per-fact description used by the `parse` command.
    pub fn summary(&self) -> String {
        let sk = &self.skeleton;
        let mut s = String::new();
        let _ = writeln!(s, "joints: {}", sk.len());
        let _ = writeln!(s, "frames: {}", self.motion.frame_count());
        let _ = writeln!(s, "fps: {:.3}", self.motion.fps());
        let _ = writeln!(s, "channels: {}", self.channel_count());
        let tp = crate::skeleton::compute_tpose(sk);
        let _ = writeln!(s, "root height: {:.4}", tp.root_height);
        let _ = writeln!(s, "character height: {:.4}", tp.character_height);
        s
    }
}

/// A joint written as an `End Site` block: a channel-less leaf named after its parent.
pub fn is_end_site(skeleton: &Skeleton, j: usize) -> bool {
    match skeleton.parent(j) {
        Some(p) => skeleton.children(j).is_empty() && skeleton.joint(j).name == format!("{}{END_SUFFIX}", skeleton.joint(p).name),
        None => false,
    }
}

struct Tokens<'a> {
    toks: Vec<(usize, &'a str)>,
    pos: usize,
    last_line: usize,
}

impl<'a> Tokens<'a> {
    fn new(text: &'a str) -> Self {
        let toks: Vec<(usize, &str)> = text.lines().enumerate().flat_map(|(i, l)| l.split_whitespace().map(move |t| (i + 1, t))).collect();
        let last_line = text.lines().count().max(1);
        Self { toks, pos: 0, last_line }
    }

    fn line(&self) -> usize {
        self.toks.get(self.pos).map_or(self.last_line, |t| t.0)
    }

    fn err(&self, message: impl Into<String>) -> Error {
        Error::Syntax { line: self.line(), message: message.into() }
    }

    fn peek(&self) -> Option<&'a str> {
        self.toks.get(self.pos).map(|t| t.1)
    }

    fn next(&mut self, what: &str) -> Result<&'a str> {
        let t = self.peek().ok_or_else(|| self.err(format!("unexpected end of file, expected {what}")))?;
        self.pos += 1;
        Ok(t)
    }

    fn expect(&mut self, word: &str) -> Result<()> {
        let line = self.line();
        let t = self.next(&format!("`{word}`"))?;
        if t.eq_ignore_ascii_case(word) {
            Ok(())
        } else {
            Err(Error::Syntax { line, message: format!("expected `{word}`, found `{t}`") })
        }
    }

    fn number<T: FromStr>(&mut self, what: &str) -> Result<T> {
        let line = self.line();
        let t = self.next(what)?;
        t.parse().map_err(|_| Error::Syntax { line, message: format!("expected {what}, found `{t}`") })
    }

    /// Remaining tokens on the current line, joined by single spaces.
    fn rest_of_line(&mut self, what: &str) -> Result<String> {
        let line = self.line();
        let mut parts = vec![self.next(what)?];
        while let Some(&(l, t)) = self.toks.get(self.pos) {
            if l != line || t == "{" {
                break;
            }
            parts.push(t);
            self.pos += 1;
        }
        Ok(parts.join(" "))
    }
}

struct Builder {
    joints: Vec<JointSpec>,
    channels: Vec<Vec<Channel>>,
}

impl Builder {
    fn unique(&self, name: String) -> String {
        if !self.joints.iter().any(|j| j.name == name) {
            return name;
        }
        (2..).map(|k| format!("{name}{k}")).find(|n| !self.joints.iter().any(|j| &j.name == n)).expect("unbounded")
    }

    fn offset(toks: &mut Tokens) -> Result<[f64; 3]> {
        toks.expect("OFFSET")?;
        let mut o = [0.0f64; 3];
        for v in &mut o {
            *v = toks.number("offset component")?;
        }
        if o.iter().any(|v| !v.is_finite()) {
            return Err(toks.err("non-finite offset"));
        }
        Ok(o)
    }

    fn joint(&mut self, toks: &mut Tokens, name: String, parent: Option<usize>) -> Result<()> {
        toks.expect("{")?;
        let offset = Self::offset(toks)?;
        let idx = self.joints.len();
        let name = self.unique(name);
        self.joints.push(JointSpec::new(name, parent, offset));
        let mut channels = Vec::new();
        if toks.peek().is_some_and(|t| t.eq_ignore_ascii_case("CHANNELS")) {
            toks.next("CHANNELS")?;
            let n: usize = toks.number("channel count")?;
            for _ in 0..n {
                let line = toks.line();
                let t = toks.next("channel name")?;
                let c = t.parse().map_err(|_| Error::UnsupportedChannel { line, name: t.to_string() })?;
                channels.push(c);
            }
        }
        self.channels.push(channels);
        loop {
            let line = toks.line();
            let t = toks.next("`JOINT`, `End Site` or `}`")?;
            match t {
                "}" => return Ok(()),
                t if t.eq_ignore_ascii_case("JOINT") => {
                    let child = toks.rest_of_line("joint name")?;
                    self.joint(toks, child, Some(idx))?;
                }
                t if t.eq_ignore_ascii_case("End") => {
                    toks.expect("Site")?;
                    toks.expect("{")?;
                    let offset = Self::offset(toks)?;
                    toks.expect("}")?;
                    let name = self.unique(format!("{}{END_SUFFIX}", self.joints[idx].name));
                    self.joints.push(JointSpec::new(name, Some(idx), offset));
                    self.channels.push(Vec::new());
                }
                other => return Err(Error::Syntax { line, message: format!("unexpected `{other}` inside joint block") }),
            }
        }
    }
}

pub fn parse_bvh(text: &str) -> Result<BvhDocument> {
    let mut toks = Tokens::new(text);
    toks.expect("HIERARCHY")?;
    toks.expect("ROOT")?;
    let root = toks.rest_of_line("root name")?;
    let mut b = Builder { joints: Vec::new(), channels: Vec::new() };
    b.joint(&mut toks, root, None)?;

    toks.expect("MOTION")?;
    toks.expect("Frames:")?;
    let frames: usize = toks.number("frame count")?;
    toks.expect("Frame")?;
    toks.expect("Time:")?;
    let line = toks.line();
    let dt: f64 = toks.number("frame time")?;
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::Syntax { line, message: format!("frame time must be positive, got {dt}") });
    }
    let per_frame: usize = b.channels.iter().map(Vec::len).sum();
    let expected = frames * per_frame;
    let mut values = Vec::with_capacity(expected);
    while toks.peek().is_some() {
        values.push(toks.number::<f64>("motion value")?);
    }
    if values.len() != expected {
        return Err(Error::FrameCountMismatch { expected, found: values.len() });
    }

    for (j, ch) in b.channels.iter().enumerate() {
        if b.joints[j].parent.is_some() && ch.iter().any(|c| matches!(c, Channel::Position(_))) {
            log::warn!("ignoring position channels on non-root joint `{}`", b.joints[j].name);
        }
    }
    let skeleton = Skeleton::new("", b.joints)?;
    let euler_order: Vec<EulerOrder> = b.channels.iter().map(|c| EulerOrder::of(c)).collect();
    let root_offset = skeleton.joint(skeleton.root_index()).offset;

    let mut root_positions = Vec::with_capacity(frames);
    let mut rotations = Vec::with_capacity(frames);
    let mut cursor = values.iter().copied();
    for _ in 0..frames {
        let mut root = root_offset;
        let mut frame = Vec::with_capacity(skeleton.len());
        for (j, ch) in b.channels.iter().enumerate() {
            let mut degrees = Vec::with_capacity(3);
            for c in ch {
                let v = cursor.next().expect("length checked");
                match c {
                    Channel::Position(a) if j == skeleton.root_index() => root[a.index()] = v,
                    Channel::Position(_) => {}
                    Channel::Rotation(_) => degrees.push(v),
                }
            }
            frame.push(matrix_to_rotation6d(&euler_order[j].compose(&degrees))?);
        }
        root_positions.push(root);
        rotations.push(frame);
    }
    let motion = Motion::new(root_positions, rotations, 1.0 / dt)?;
    Ok(BvhDocument { skeleton, motion, channel_layout: b.channels, euler_order })
}

pub fn parse_bvh_bytes(bytes: &[u8]) -> Result<BvhDocument> {
    let text = std::str::from_utf8(bytes).map_err(|e| Error::Syntax {
        line: bytes[..e.valid_up_to()].iter().filter(|&&c| c == b'\n').count() + 1,
        message: "invalid UTF-8".into(),
    })?;
    parse_bvh(text)
}

pub fn read_bvh(path: impl AsRef<std::path::Path>) -> Result<BvhDocument> {
    let path = path.as_ref();
    let mut doc = parse_bvh_bytes(&std::fs::read(path)?)?;
    if let Some(stem) = path.file_stem() {
        doc.skeleton.set_name(stem.to_string_lossy());
    }
    Ok(doc)
}

fn fmt_num(v: f64) -> String {
    let s = format!("{v:.6}");
    // Avoid "-0.000000" so identical poses serialize identically.
    if s.trim_start_matches('-').bytes().all(|c| c == b'0' || c == b'.') {
        s.trim_start_matches('-').to_string()
    } else {
        s
    }
}

pub fn write_bvh(doc: &BvhDocument) -> String {
    let sk = &doc.skeleton;
    let mut out = String::from("HIERARCHY\n");
    fn emit(doc: &BvhDocument, j: usize, depth: usize, out: &mut String) {
        let sk = &doc.skeleton;
        let pad = "  ".repeat(depth);
        let o = sk.joint(j).offset;
        let offset = format!("OFFSET {} {} {}", fmt_num(o.x), fmt_num(o.y), fmt_num(o.z));
        if is_end_site(sk, j) && doc.channel_layout[j].is_empty() {
            let _ = write!(out, "{pad}End Site\n{pad}{{\n{pad}  {offset}\n{pad}}}\n");
            return;
        }
        let kw = if sk.parent(j).is_none() { "ROOT" } else { "JOINT" };
        let _ = write!(out, "{pad}{kw} {}\n{pad}{{\n{pad}  {offset}\n", sk.joint(j).name);
        let ch = &doc.channel_layout[j];
        let names: Vec<String> = ch.iter().map(Channel::to_string).collect();
        let _ = writeln!(out, "{pad}  CHANNELS {}{}{}", ch.len(), if ch.is_empty() { "" } else { " " }, names.join(" "));
        for c in sk.children(j) {
            emit(doc, c, depth + 1, out);
        }
        let _ = writeln!(out, "{pad}}}");
    }
    emit(doc, sk.root_index(), 0, &mut out);

    let m = &doc.motion;
    let _ = writeln!(out, "MOTION\nFrames: {}\nFrame Time: {}", m.frame_count(), fmt_frame_time(1.0 / m.fps()));
    let order = depth_first(sk);
    for t in 0..m.frame_count() {
        let mut row = Vec::with_capacity(doc.channel_count());
        for &j in &order {
            let ch = &doc.channel_layout[j];
            if ch.is_empty() {
                continue;
            }
            let matrix = rotation6d_to_matrix(m.rotation(t, j)).unwrap_or_else(|_| Matrix3::identity());
            let mut angles = doc.euler_order[j].decompose(&matrix).into_iter();
            for c in ch {
                let v = match c {
                    Channel::Position(a) if j == sk.root_index() => m.root_positions()[t][a.index()],
                    Channel::Position(a) => sk.joint(j).offset[a.index()],
                    Channel::Rotation(_) => angles.next().expect("one angle per rotation channel"),
                };
                row.push(fmt_num(v));
            }
        }
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

fn fmt_frame_time(dt: f64) -> String {
    // More digits than the channel values: fps must survive the round trip.
    format!("{dt:.10}")
}

/// Joint indices in the order the writer emits them (root first, children by index).
pub fn depth_first(sk: &Skeleton) -> Vec<usize> {
    let mut order = Vec::with_capacity(sk.len());
    let mut stack = vec![sk.root_index()];
    while let Some(j) = stack.pop() {
        order.push(j);
        stack.extend(sk.children(j).into_iter().rev());
    }
    order
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    pub(crate) const MINIMAL: &str = "HIERARCHY
ROOT Hips
{
  OFFSET 0 0 0
  CHANNELS 6 Xposition Yposition Zposition Zrotation Xrotation Yrotation
  JOINT Spine
  {
    OFFSET 0 1 0
    CHANNELS 3 Zrotation Xrotation Yrotation
    End Site
    {
      OFFSET 0 1 0
    }
  }
}
MOTION
Frames: 1
Frame Time: 0.0333333
0 1 0 0 0 0 0 0 0
";

    #[test]
    fn minimal_file() {
        let doc = parse_bvh(MINIMAL).unwrap();
        assert_eq!(doc.skeleton.len(), 3);
        assert_eq!(doc.skeleton.joint(2).name, "Spine_End");
        assert_eq!(doc.motion.frame_count(), 1);
        for r in &doc.motion.rotations()[0] {
            assert_relative_eq!(r.to_matrix().unwrap(), Matrix3::identity(), epsilon = 1e-12);
        }
        assert_relative_eq!(doc.motion.root_positions()[0], Vector3::new(0.0, 1.0, 0.0));
        assert_relative_eq!(doc.motion.fps(), 30.0, epsilon = 1e-3);
    }

    #[test]
    fn crlf_is_accepted() {
        let doc = parse_bvh(&MINIMAL.replace('\n', "\r\n")).unwrap();
        assert_eq!(doc.skeleton.len(), 3);
    }

    #[test]
    fn zxy_euler_matches_hand_composition() {
        let text = MINIMAL.replace("0 1 0 0 0 0 0 0 0", "0 1 0 0 30 0 0 0 0");
        let doc = parse_bvh(&text).unwrap();
        let expected = axis_rotation(2, 0.0) * axis_rotation(0, 30f64.to_radians()) * axis_rotation(1, 0.0);
        assert_relative_eq!(doc.motion.rotation(0, 0).to_matrix().unwrap(), expected, epsilon = 1e-12);
    }

    #[test]
    fn errors_carry_context() {
        let bad = MINIMAL.replace("OFFSET 0 1 0\n    CHANNELS", "OFFSET 0 x 0\n    CHANNELS");
        assert!(matches!(parse_bvh(&bad), Err(Error::Syntax { line: 8, .. })));
        let unknown = MINIMAL.replace("CHANNELS 3 Zrotation", "CHANNELS 3 Wrotation");
        assert!(matches!(parse_bvh(&unknown), Err(Error::UnsupportedChannel { line: 9, .. })));
        let short = MINIMAL.replace("0 1 0 0 0 0 0 0 0", "0 1 0 0 0 0 0 0");
        assert!(matches!(parse_bvh(&short), Err(Error::FrameCountMismatch { expected: 9, found: 8 })));
        assert!(matches!(parse_bvh("HIERARCHY\nROOT a\n{"), Err(Error::Syntax { .. })));
    }

    #[test]
    fn non_root_position_channels_are_ignored() {
        let text = MINIMAL
            .replace("CHANNELS 3 Zrotation Xrotation Yrotation", "CHANNELS 6 Xposition Yposition Zposition Zrotation Xrotation Yrotation")
            .replace("0 1 0 0 0 0 0 0 0", "0 1 0 0 0 0 5 5 5 0 0 0");
        let doc = parse_bvh(&text).unwrap();
        assert_eq!(doc.skeleton.joint(1).offset, Vector3::new(0.0, 1.0, 0.0));
    }

    #[test]
    fn writer_formats() {
        let mut doc = parse_bvh(MINIMAL).unwrap();
        let text = write_bvh(&doc);
        assert!(text.contains("Frame Time: 0.03333"));
        assert!(text.lines().last().unwrap().ends_with("0.000000 0.000000 0.000000"));
        assert!(text.contains("\n  JOINT Spine\n  {\n    OFFSET 0.000000 1.000000 0.000000\n"));
        assert!(!text.contains('\r'));

        doc.motion = Motion::new(vec![], vec![], 30.0).unwrap();
        let empty = write_bvh(&doc);
        assert!(empty.contains("Frames: 0"));
        assert_eq!(parse_bvh(&empty).unwrap().motion.frame_count(), 0);
    }

    #[test]
    fn euler_decomposition_round_trips_every_order() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        for p in perms {
            let order = EulerOrder(p.iter().map(|&i| [Axis::X, Axis::Y, Axis::Z][i]).collect());
            for trial in 0..200 {
                let mut deg: Vec<f64> = (0..3).map(|_| rng.gen_range(-180.0..180.0)).collect();
                if trial < 4 {
                    deg[1] = if trial % 2 == 0 { 90.0 } else { -90.0 };
                }
                let m = order.compose(&deg);
                let back = order.compose(&order.decompose(&m));
                assert_relative_eq!(back, m, epsilon = 1e-9);
            }
        }
    }
}
