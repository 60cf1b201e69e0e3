//! Synthetic datasets on disk: generation, manifest and loading.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bvh::{read_bvh, write_bvh, BvhDocument};
use crate::error::{Error, Result};
use crate::skeleton::{Motion, Skeleton};
use crate::synth::{
    generate_humanoid, generate_motion, joints_with_roles, make_splits, paired_variant, HumanoidParams, MotionKind, NamingStyle, Role,
    SplitTag, VariantTransform,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VariantConfig {
    /// Joint roles split on both sides.
    pub split_roles: Vec<Role>,
    pub ratio: f64,
}

impl Default for VariantConfig {
    fn default() -> Self {
        Self { split_roles: vec![Role::ForeArm, Role::Leg], ratio: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub characters: usize,
    /// Fraction of characters held out as unseen.
    pub holdout_characters: f64,
    pub kinds: Vec<MotionKind>,
    /// Clips generated per motion kind, each with its own parameters.
    pub clips_per_kind: usize,
    /// Fraction of clips held out as unseen.
    pub holdout_motions: f64,
    pub frames: usize,
    pub fps: f64,
    pub humanoid: HumanoidParams,
    /// Naming styles, assigned to characters in turn.
    pub styles: Vec<NamingStyle>,
    /// Split-joint variant built for every character; none when absent.
    pub variant: Option<VariantConfig>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            characters: 6,
            holdout_characters: 0.34,
            kinds: MotionKind::ALL.to_vec(),
            clips_per_kind: 2,
            holdout_motions: 0.25,
            frames: 128,
            fps: 30.0,
            humanoid: HumanoidParams::default(),
            styles: NamingStyle::ALL.to_vec(),
            variant: Some(VariantConfig::default()),
        }
    }
}

impl SynthConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CharacterRecord {
    pub name: String,
    /// Rest-pose BVH, relative to the dataset root.
    pub skeleton: String,
    pub style: NamingStyle,
    pub joints: usize,
    pub seen: bool,
    /// Base character and transform for derived skeletons.
    pub variant_of: Option<String>,
    pub transform: Option<VariantTransform>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionRecord {
    pub id: String,
    pub kind: MotionKind,
    pub seed: u64,
    pub seen: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipRecord {
    pub path: String,
    pub character: String,
    pub motion: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Structure {
    /// Target from the same humanoid family as the source.
    Intra,
    /// Target is a split or merged variant.
    Cross,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalCase {
    /// Source clip path.
    pub source: String,
    pub target: String,
    /// Clip of the same motion on the target, used as ground truth.
    pub ground_truth: String,
    pub structure: Structure,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRecord {
    pub tag: SplitTag,
    pub characters: Vec<String>,
    pub motions: Vec<String>,
    pub cases: Vec<EvalCase>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub config: SynthConfig,
    pub characters: Vec<CharacterRecord>,
    pub motions: Vec<MotionRecord>,
    pub clips: Vec<ClipRecord>,
    /// Clip paths used for training: seen characters (and their variants) on seen motions.
    pub train: Vec<String>,
    pub splits: Vec<SplitRecord>,
}

impl Manifest {
    pub const FORMAT: &'static str = "retarget-synth/1";
}

/// A dataset held in memory, keyed by the manifest's names and paths.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: Manifest,
    pub skeletons: BTreeMap<String, Skeleton>,
    pub clips: BTreeMap<String, Motion>,
}

fn clip_path(character: &str, motion: &str) -> String {
    format!("clips/{character}__{motion}.bvh")
}

/// Generate characters, variants, clips and the four evaluation splits.
pub fn synthesize(config: &SynthConfig) -> Result<Dataset> {
    if config.styles.is_empty() || config.kinds.is_empty() || config.clips_per_kind == 0 {
        return Err(Error::InvalidConfig("styles, kinds and clips_per_kind must be non-empty".into()));
    }
    let n_motions = config.kinds.len() * config.clips_per_kind;
    let plan = make_splits(config.characters, n_motions, [config.holdout_characters, config.holdout_motions], config.seed)?;

    let mut motions = Vec::new();
    for (k, kind) in config.kinds.iter().enumerate() {
        for v in 0..config.clips_per_kind {
            let i = motions.len();
            motions.push(MotionRecord {
                id: format!("{}_{v}", kind.name()),
                kind: *kind,
                seed: config.seed.wrapping_mul(1_000_003).wrapping_add((k * 101 + v) as u64),
                seen: plan.train_motions.contains(&i),
            });
        }
    }

    let mut characters = Vec::new();
    let mut skeletons = BTreeMap::new();
    let mut clips = BTreeMap::new();
    let mut clip_records = Vec::new();
    let mut base_names = Vec::new();
    let mut variant_names: BTreeMap<String, String> = BTreeMap::new();
    for c in 0..config.characters {
        let style = config.styles[c % config.styles.len()];
        let mut sk = generate_humanoid(&config.humanoid, style, config.seed.wrapping_mul(7919).wrapping_add(c as u64))?;
        let name = format!("char{c:02}");
        sk.set_name(&name);
        let seen = plan.train_characters.contains(&c);
        let transform =
            config.variant.as_ref().map(|v| VariantTransform::Split { joints: joints_with_roles(&sk, &v.split_roles), ratio: v.ratio });
        let mut rest_variant = None;
        for m in &motions {
            let motion = generate_motion(&sk, m.kind, config.frames, config.fps, m.seed)?;
            if let Some(t) = &transform {
                let (vs, vm) = paired_variant(&sk, &motion, t)?;
                let vname = format!("{name}_split");
                clip_records.push(ClipRecord { path: clip_path(&vname, &m.id), character: vname.clone(), motion: m.id.clone() });
                clips.insert(clip_path(&vname, &m.id), vm);
                rest_variant = Some(vs);
            }
            clip_records.push(ClipRecord { path: clip_path(&name, &m.id), character: name.clone(), motion: m.id.clone() });
            clips.insert(clip_path(&name, &m.id), motion);
        }
        characters.push(CharacterRecord {
            name: name.clone(),
            skeleton: format!("characters/{name}.bvh"),
            style,
            joints: sk.len(),
            seen,
            variant_of: None,
            transform: None,
        });
        if let (Some(mut vs), Some(t)) = (rest_variant, transform) {
            let vname = format!("{name}_split");
            vs.set_name(&vname);
            characters.push(CharacterRecord {
                name: vname.clone(),
                skeleton: format!("characters/{vname}.bvh"),
                style,
                joints: vs.len(),
                seen,
                variant_of: Some(name.clone()),
                transform: Some(t),
            });
            variant_names.insert(name.clone(), vname.clone());
            skeletons.insert(vname, vs);
        }
        skeletons.insert(name.clone(), sk);
        base_names.push(name);
    }

    let is_seen_char = |n: &str| characters.iter().any(|c| c.name == n && c.seen);
    let train = clip_records
        .iter()
        .filter(|r| is_seen_char(&r.character) && motions.iter().any(|m| m.id == r.motion && m.seen))
        .map(|r| r.path.clone())
        .collect();

    let mut splits = Vec::new();
    for split in &plan.splits {
        let chars: Vec<&String> = split.characters.iter().map(|&c| &base_names[c]).collect();
        let mut cases = Vec::new();
        for src in &chars {
            for &mi in &split.motions {
                let mid = &motions[mi].id;
                let mut targets: Vec<&String> = chars.iter().copied().filter(|t| t != src).collect();
                targets.extend(chars.iter().filter_map(|c| variant_names.get(*c)));
                for tgt in targets {
                    cases.push(EvalCase {
                        source: clip_path(src, mid),
                        target: tgt.clone(),
                        ground_truth: clip_path(tgt, mid),
                        structure: if variant_names.values().any(|v| v == tgt) { Structure::Cross } else { Structure::Intra },
                    });
                }
            }
        }
        splits.push(SplitRecord {
            tag: split.tag,
            characters: chars.into_iter().cloned().collect(),
            motions: split.motions.iter().map(|&m| motions[m].id.clone()).collect(),
            cases,
        });
    }

    let manifest =
        Manifest { format: Manifest::FORMAT.into(), config: config.clone(), characters, motions, clips: clip_records, train, splits };
    Ok(Dataset { manifest, skeletons, clips })
}

impl Dataset {
    /// Write BVH files and `manifest.json` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("characters"))?;
        fs::create_dir_all(dir.join("clips"))?;
        for c in &self.manifest.characters {
            let sk = &self.skeletons[&c.name];
            let rest = Motion::rest(sk.len(), 1, sk.joint(0).offset.into(), self.manifest.config.fps)?;
            fs::write(dir.join(&c.skeleton), write_bvh(&BvhDocument::from_motion(sk.clone(), rest)?))?;
        }
        for r in &self.manifest.clips {
            let doc = BvhDocument::from_motion(self.skeletons[&r.character].clone(), self.clips[&r.path].clone())?;
            fs::write(dir.join(&r.path), write_bvh(&doc))?;
        }
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&self.manifest)?)?;
        Ok(())
    }

    /// Read a dataset written by [`Dataset::write`]. Skeletons take their manifest names.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
        if manifest.format != Manifest::FORMAT {
            return Err(Error::ConfigMismatch(format!("unknown dataset format {:?}", manifest.format)));
        }
        let mut skeletons = BTreeMap::new();
        for c in &manifest.characters {
            let mut sk = read_bvh(dir.join(&c.skeleton))?.skeleton;
            sk.set_name(&c.name);
            skeletons.insert(c.name.clone(), sk);
        }
        let mut clips = BTreeMap::new();
        for r in &manifest.clips {
            let doc = read_bvh(dir.join(&r.path))?;
            let sk = skeletons
                .get(&r.character)
                .ok_or_else(|| Error::MissingGroundTruth(format!("clip {} names unknown character {}", r.path, r.character)))?;
            if doc.skeleton.topology() != sk.topology() {
                return Err(Error::SkeletonMismatch(format!("clip {} does not match character {}", r.path, r.character)));
            }
            clips.insert(r.path.clone(), doc.motion);
        }
        Ok(Self { manifest, skeletons, clips })
    }

    pub fn skeleton(&self, name: &str) -> Result<&Skeleton> {
        self.skeletons.get(name).ok_or_else(|| Error::MissingGroundTruth(format!("no character {name:?}")))
    }

    pub fn clip(&self, path: &str) -> Result<&Motion> {
        self.clips.get(path).ok_or_else(|| Error::MissingGroundTruth(format!("no clip {path:?}")))
    }

    /// Training clips as (skeleton, motion) pairs.
    pub fn training_pairs(&self) -> Result<Vec<(&Skeleton, &Motion)>> {
        let by_path: BTreeMap<&str, &ClipRecord> = self.manifest.clips.iter().map(|c| (c.path.as_str(), c)).collect();
        self.manifest
            .train
            .iter()
            .map(|p| {
                let rec = by_path.get(p.as_str()).ok_or_else(|| Error::MissingGroundTruth(format!("no clip record {p}")))?;
                Ok((self.skeleton(&rec.character)?, self.clip(p)?))
            })
            .collect()
    }

    pub fn split(&self, tag: SplitTag) -> Option<&SplitRecord> {
        self.manifest.splits.iter().find(|s| s.tag == tag)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig { characters: 3, clips_per_kind: 1, frames: 8, ..Default::default() }
    }

    #[test]
    fn splits_are_populated_and_disjoint() {
        let ds = synthesize(&small()).unwrap();
        let m = &ds.manifest;
        assert_eq!(m.characters.len(), 6);
        for s in &m.splits {
            assert!(!s.cases.is_empty(), "{:?}", s.tag);
        }
        let uc = ds.split(SplitTag::UcUm).unwrap();
        for case in &uc.cases {
            assert!(!m.train.contains(&case.source));
        }
        assert!(m.splits.iter().flat_map(|s| &s.cases).any(|c| c.structure == Structure::Cross));
    }

    #[test]
    fn write_then_load() {
        let ds = synthesize(&small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.write(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back.manifest, ds.manifest);
        for (name, sk) in &ds.skeletons {
            assert_eq!(back.skeletons[name].topology(), sk.topology());
        }
        for (p, m) in &ds.clips {
            let b = &back.clips[p];
            assert_eq!(b.frame_count(), m.frame_count());
            for (x, y) in b.root_positions().iter().zip(m.root_positions()) {
                assert!((x - y).abs().max() < 1e-5);
            }
        }
    }
}
