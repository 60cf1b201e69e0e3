//! Per-slot positional encodings and per-joint name embeddings.
//!
//! The learned T-pose projection lives with the model; [`tpose_inputs`] prepares its input.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::names;
use crate::skeleton::{compute_tpose, Skeleton};
use retarget_nn::{Scalar, Tensor};

/// `pe[pos, 2k] = sin(pos / 10000^(2k/D))`, `pe[pos, 2k+1] = cos(...)`.
pub fn sinusoidal_pe<F: Scalar>(slots: usize, dim: usize) -> Result<Tensor<F>> {
    if !dim.is_multiple_of(2) {
        return Err(Error::OddDimension(dim));
    }
    let mut out = Vec::with_capacity(slots * dim);
    for pos in 0..slots {
        for k in 0..dim / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * k as f64 / dim as f64);
            out.push(F::from_f64(angle.sin()));
            out.push(F::from_f64(angle.cos()));
        }
    }
    Ok(Tensor::new(&[slots, dim], out)?)
}

pub trait NameEmbeddingProvider: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, name: &str) -> Vec<f64>;
    /// Serializable description stored in checkpoints.
    fn spec(&self) -> NameProviderSpec;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NameProviderSpec {
    Lexical { dim: usize, seed: u64 },
    Table { path: String, sha256: String, dim: usize },
}

impl NameProviderSpec {
    pub fn build(&self) -> Result<Box<dyn NameEmbeddingProvider>> {
        match self {
            Self::Lexical { dim, seed } => Ok(Box::new(LexicalNameEmbedder::new(*dim, *seed))),
            Self::Table { path, sha256, .. } => {
                let table = TableNameEmbedder::from_file(path)?;
                if &table.sha256 != sha256 {
                    return Err(Error::ConfigMismatch(format!("name table {path} changed since training")));
                }
                Ok(Box::new(table))
            }
        }
    }
}

/// Signed feature hashing of word tokens and character trigrams of the normalized name.
#[derive(Clone, Debug)]
pub struct LexicalNameEmbedder {
    dim: usize,
    seed: u64,
}

const TRIGRAM_WEIGHT: f64 = 0.5;

impl LexicalNameEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self { dim, seed }
    }

    fn bucket(&self, feature: &str) -> (usize, f64) {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(feature.as_bytes());
        let d = h.finalize();
        let v = u64::from_le_bytes(d[..8].try_into().expect("8 bytes"));
        let sign = if d[8] & 1 == 0 { 1.0 } else { -1.0 };
        ((v % self.dim as u64) as usize, sign)
    }
}

pub fn lexical_name_embed(name: &str, dim: usize) -> Vec<f64> {
    LexicalNameEmbedder::new(dim, 0).embed(name)
}

impl NameEmbeddingProvider for LexicalNameEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, name: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        if self.dim == 0 {
            return v;
        }
        let mut words = names::normalized_words(name);
        if words.is_empty() {
            words.push(name.to_lowercase());
        }
        for w in &words {
            let (i, s) = self.bucket(&format!("w:{w}"));
            v[i] += s;
        }
        let padded: Vec<char> = format!(" {} ", words.join(" ")).chars().collect();
        for tri in padded.windows(3) {
            let t: String = tri.iter().collect();
            let (i, s) = self.bucket(&format!("c:{t}"));
            v[i] += s * TRIGRAM_WEIGHT;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v
    }

    fn spec(&self) -> NameProviderSpec {
        NameProviderSpec::Lexical { dim: self.dim, seed: self.seed }
    }
}

/// Precomputed name vectors read from `name<TAB>v1,v2,...` lines.
///
/// Lookup tries the exact name, then its normalized form; unknown names fall back
/// to the lexical embedder at the table's dimension.
#[derive(Clone, Debug)]
pub struct TableNameEmbedder {
    path: String,
    sha256: String,
    dim: usize,
    exact: HashMap<String, Vec<f64>>,
    normalized: HashMap<String, Vec<f64>>,
    fallback: LexicalNameEmbedder,
}

impl TableNameEmbedder {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path)?;
        let mut t = Self::parse(std::str::from_utf8(&bytes).map_err(|_| Error::InvalidConfig("name table is not UTF-8".into()))?)?;
        t.path = path.display().to_string();
        t.sha256 = format!("{:x}", Sha256::digest(&bytes));
        Ok(t)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut exact = HashMap::new();
        let mut normalized = HashMap::new();
        let mut dim = None;
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |m: &str| Error::Syntax { line: i + 1, message: m.to_string() };
            let (name, vec) = line.split_once('\t').ok_or_else(|| bad("expected name<TAB>values"))?;
            let v: Vec<f64> = vec
                .split(',')
                .map(|x| x.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad("unparsable value"))?;
            if *dim.get_or_insert(v.len()) != v.len() {
                return Err(bad("vector length differs from earlier lines"));
            }
            normalized.entry(names::normalize(name)).or_insert_with(|| v.clone());
            exact.insert(name.to_string(), v);
        }
        let dim = dim.ok_or_else(|| Error::InvalidConfig("empty name table".into()))?;
        Ok(Self { path: String::new(), sha256: String::new(), dim, exact, normalized, fallback: LexicalNameEmbedder::new(dim, 0) })
    }
}

impl NameEmbeddingProvider for TableNameEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, name: &str) -> Vec<f64> {
        if let Some(v) = self.exact.get(name).or_else(|| self.normalized.get(&names::normalize(name))) {
            return v.clone();
        }
        log::warn!("joint `{name}` missing from name table; using lexical embedding");
        self.fallback.embed(name)
    }

    fn spec(&self) -> NameProviderSpec {
        NameProviderSpec::Table { path: self.path.clone(), sha256: self.sha256.clone(), dim: self.dim }
    }
}

/// T-pose joint positions relative to the root, divided by the character height.
pub fn tpose_inputs(skeleton: &Skeleton) -> Vec<Vector3<f64>> {
    let tp = compute_tpose(skeleton);
    let h = if tp.character_height > 0.0 { tp.character_height } else { 1.0 };
    tp.root_relative(skeleton.root_index()).into_iter().map(|p| p / h).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cos(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn pe_examples() {
        let pe = sinusoidal_pe::<f64>(4, 8).unwrap();
        assert_eq!(&pe.data()[..8], &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert!((pe.data()[8] - 1f64.sin()).abs() < 1e-15);
        assert!((pe.data()[8] - 0.8415).abs() < 1e-4);
        assert!(pe.data().iter().all(|v| v.abs() <= 1.0));
        assert!(matches!(sinusoidal_pe::<f64>(2, 5), Err(Error::OddDimension(5))));
    }

    #[test]
    fn naming_styles_share_vectors() {
        let a = lexical_name_embed("LeftArm", 64);
        assert_eq!(a, lexical_name_embed("left_arm", 64));
        assert_eq!(a, lexical_name_embed("L_Arm", 64));
        assert!((cos(&a, &a) - 1.0).abs() < 1e-12);
        assert_eq!(lexical_name_embed("Spine1", 32), lexical_name_embed("Spine2", 32));
    }

    #[test]
    fn related_names_are_closer() {
        let e = |n| lexical_name_embed(n, 64);
        let fa = e("LeftForeArm");
        assert!(cos(&fa, &e("RightForeArm")) > cos(&fa, &e("RightFoot")));
    }

    #[test]
    fn seed_changes_hashing() {
        let a = LexicalNameEmbedder::new(64, 1).embed("Hips");
        let b = LexicalNameEmbedder::new(64, 2).embed("Hips");
        assert_ne!(a, b);
    }

    #[test]
    fn table_lookup() {
        let t = TableNameEmbedder::parse("LeftArm\t1,0,0\nHips\t0,1,0\n").unwrap();
        assert_eq!(t.dim(), 3);
        assert_eq!(t.embed("LeftArm"), [1.0, 0.0, 0.0]);
        assert_eq!(t.embed("left_arm"), [1.0, 0.0, 0.0]);
        assert_eq!(t.embed("Neck").len(), 3);
        assert!(TableNameEmbedder::parse("a\t1,2\nb\t1\n").is_err());
        assert!(TableNameEmbedder::parse("a 1,2\n").is_err());
    }
}
