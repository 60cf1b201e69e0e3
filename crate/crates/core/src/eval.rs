//! Split evaluation and the ablation matrix.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{synthesize, Dataset, EvalCase, Structure, SynthConfig};
use crate::error::{Error, Result};
use crate::skeleton::{Motion, Skeleton};
use crate::synth::SplitTag;
use crate::training::{position_mse, retarget, LoadedModel, TrainConfig, Trainer, TrainingData};
use retarget_nn::Scalar;

/// Mean error over a set of cases; `None` when there are no cases.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub mean: Option<f64>,
    pub cases: usize,
}

impl Score {
    fn of(errors: &[f64]) -> Self {
        let mean = (!errors.is_empty()).then(|| errors.iter().sum::<f64>() / errors.len() as f64);
        Self { mean, cases: errors.len() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitScore {
    pub split: SplitTag,
    pub intra: Score,
    pub cross: Score,
    pub overall: Score,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format: String,
    /// sha256 of the checkpoint file, or a caller-chosen label.
    pub checkpoint: String,
    pub config_hash: String,
    pub seed: u64,
    pub splits: Vec<SplitScore>,
    pub intra: Score,
    pub cross: Score,
    pub overall: Score,
}

impl EvalReport {
    pub const FORMAT: &'static str = "retarget-eval/1";

    pub fn split(&self, tag: SplitTag) -> Option<&SplitScore> {
        self.splits.iter().find(|s| s.split == tag)
    }

    /// Plain-text table: one row per split, intra / cross / overall columns.
    pub fn table(&self) -> String {
        let cell = |s: &Score| s.mean.map_or("-".to_string(), |m| format!("{m:.5}"));
        let mut out = format!("{:<8} {:>10} {:>10} {:>10}\n", "split", "intra", "cross", "overall");
        for s in &self.splits {
            let _ = writeln!(out, "{:<8} {:>10} {:>10} {:>10}", s.split.name(), cell(&s.intra), cell(&s.cross), cell(&s.overall));
        }
        let _ = writeln!(out, "{:<8} {:>10} {:>10} {:>10}", "mean", cell(&self.intra), cell(&self.cross), cell(&self.overall));
        out
    }
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// Score every split case with `predict`, which maps (case, source skeleton,
/// source clip, target skeleton) to a motion on the target.
pub fn evaluate_with(
    dataset: &Dataset,
    mut predict: impl FnMut(&EvalCase, &Skeleton, &Motion, &Skeleton) -> Result<Motion>,
) -> Result<(Vec<SplitScore>, Score, Score, Score)> {
    let (mut all_intra, mut all_cross) = (Vec::new(), Vec::new());
    let mut splits = Vec::new();
    for split in &dataset.manifest.splits {
        let (mut intra, mut cross) = (Vec::new(), Vec::new());
        for case in &split.cases {
            let record = dataset.manifest.clips.iter().find(|c| c.path == case.source);
            let src_name = record
                .map(|r| r.character.as_str())
                .ok_or_else(|| Error::MissingGroundTruth(format!("no clip record for {}", case.source)))?;
            let src = dataset.skeleton(src_name)?;
            let tgt = dataset.skeleton(&case.target)?;
            let truth = dataset.clip(&case.ground_truth)?;
            let pred = predict(case, src, dataset.clip(&case.source)?, tgt)?;
            let err = position_mse(tgt, &pred, truth)?;
            if !err.is_finite() {
                return Err(Error::NonFiniteLoss { step: 0, detail: format!("non-finite error on {case:?}") });
            }
            match case.structure {
                Structure::Intra => intra.push(err),
                Structure::Cross => cross.push(err),
            }
        }
        let overall: Vec<f64> = intra.iter().chain(&cross).copied().collect();
        splits.push(SplitScore { split: split.tag, intra: Score::of(&intra), cross: Score::of(&cross), overall: Score::of(&overall) });
        all_intra.extend(intra);
        all_cross.extend(cross);
    }
    let overall: Vec<f64> = all_intra.iter().chain(&all_cross).copied().collect();
    Ok((splits, Score::of(&all_intra), Score::of(&all_cross), Score::of(&overall)))
}

/// Retarget every case with the checkpointed model and score it against the paired ground truth.
pub fn evaluate<F: Scalar>(loaded: &LoadedModel<F>, checkpoint: &str, dataset: &Dataset, seed: u64) -> Result<EvalReport> {
    let window = loaded.meta.window_length;
    let (splits, intra, cross, overall) =
        evaluate_with(dataset, |_, src, motion, tgt| retarget(&loaded.model, &loaded.store, src, motion, tgt, window, seed))?;
    Ok(EvalReport {
        format: EvalReport::FORMAT.into(),
        checkpoint: checkpoint.into(),
        config_hash: loaded.meta.config_hash.clone(),
        seed,
        splits,
        intra,
        cross,
        overall,
    })
}

/// Load a checkpoint and evaluate it, identifying it by file digest.
pub fn evaluate_checkpoint<F: Scalar>(path: &Path, dataset: &Dataset, seed: u64) -> Result<EvalReport> {
    let loaded = LoadedModel::<F>::load(path)?;
    evaluate(&loaded, &file_digest(path)?, dataset, seed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub data: SynthConfig,
    /// Base training configuration; its ablation switches are overridden per row.
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    /// Joint-mask probability of the masking row.
    pub mask_prob: f64,
    pub eval_seed: u64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self { data: SynthConfig::default(), train: TrainConfig::default(), seeds: vec![0, 1, 2], mask_prob: 0.2, eval_seed: 0 }
    }
}

impl AblationConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    /// Row names and their training configurations for one seed.
    pub fn rows(&self, seed: u64) -> Vec<(&'static str, TrainConfig)> {
        let mut base = self.train.clone();
        base.seed = seed;
        base.ablations.share_joints = true;
        base.ablations.use_positions = true;
        base.ablations.joint_mask_prob = 0.0;
        let mut no_share = base.clone();
        no_share.ablations.share_joints = false;
        let mut no_pos = base.clone();
        no_pos.ablations.use_positions = false;
        let mut mask = base.clone();
        mask.ablations.joint_mask_prob = self.mask_prob;
        vec![("full", base), ("w/o share", no_share), ("w/o pos", no_pos), ("w/ mask", mask)]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub seed: u64,
    pub steps: u64,
    pub config: TrainConfig,
    pub report: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub format: String,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub const FORMAT: &'static str = "retarget-ablation/1";

    /// Cross-structural mean per (row name, seed).
    pub fn cross_mean(&self, name: &str, seed: u64) -> Option<f64> {
        self.rows.iter().find(|r| r.name == name && r.seed == seed).and_then(|r| r.report.cross.mean)
    }

    /// Seeds on which the full row's cross-structural error is no larger than every other row's.
    pub fn full_wins(&self) -> Vec<(u64, bool)> {
        let mut seeds: Vec<u64> = self.rows.iter().map(|r| r.seed).collect();
        seeds.dedup();
        seeds
            .into_iter()
            .map(|s| {
                let full = self.cross_mean("full", s);
                let wins = self.rows.iter().filter(|r| r.seed == s && r.name != "full").all(|r| match (full, r.report.cross.mean) {
                    (Some(f), Some(o)) => f <= o,
                    _ => false,
                });
                (s, wins)
            })
            .collect()
    }

    pub fn table(&self) -> String {
        let cell = |v: Option<f64>| v.map_or("-".to_string(), |m| format!("{m:.5}"));
        let mut out = format!("{:<10} {:>5} {:>7} {:>10} {:>10}\n", "row", "seed", "steps", "intra", "cross");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<10} {:>5} {:>7} {:>10} {:>10}",
                r.name,
                r.seed,
                r.steps,
                cell(r.report.intra.mean),
                cell(r.report.cross.mean)
            );
        }
        out
    }
}

/// Train and evaluate every ablation row for every seed on one synthetic dataset.
///
/// Checkpoints land in `out/<row>_seed<k>/`; rows share data, seeds and step budget.
pub fn run_ablation_matrix(config: &AblationConfig, out: &Path, mut progress: impl FnMut(&str)) -> Result<AblationReport> {
    let dataset = synthesize(&config.data)?;
    let pairs = dataset.training_pairs()?;
    let mut rows = Vec::new();
    for &seed in &config.seeds {
        for (name, train) in config.rows(seed) {
            train.validate()?;
            let data = TrainingData::from_motions(pairs.iter().copied(), train.window_length, train.stride())?;
            let dir = out.join(format!("{}_seed{seed}", name.replace("w/o ", "no_").replace("w/ ", "with_")));
            let steps = train.steps;
            let report = match train.precision {
                crate::training::Precision::F32 => train_and_evaluate::<f32>(train.clone(), data, &dir, &dataset, config.eval_seed)?,
                crate::training::Precision::F64 => train_and_evaluate::<f64>(train.clone(), data, &dir, &dataset, config.eval_seed)?,
            };
            progress(&format!("{name} seed {seed}: cross {:?} intra {:?}", report.cross.mean, report.intra.mean));
            rows.push(AblationRow { name: name.into(), seed, steps, config: train, report });
        }
    }
    let steps: Vec<u64> = rows.iter().map(|r| r.steps).collect();
    assert!(steps.windows(2).all(|w| w[0] == w[1]));
    Ok(AblationReport { format: AblationReport::FORMAT.into(), rows })
}

fn train_and_evaluate<F: Scalar>(
    config: TrainConfig,
    data: TrainingData,
    dir: &Path,
    dataset: &Dataset,
    eval_seed: u64,
) -> Result<EvalReport> {
    let mut trainer = Trainer::<F>::new(config, data)?;
    trainer.run(dir, |_| {})?;
    evaluate_checkpoint::<F>(&dir.join("final.ckpt"), dataset, eval_seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ground_truth_scores_zero() {
        let ds = synthesize(&SynthConfig { characters: 3, clips_per_kind: 1, frames: 8, ..Default::default() }).unwrap();
        let (splits, intra, cross, overall) = evaluate_with(&ds, |case, _, _, _| Ok(ds.clip(&case.ground_truth)?.clone())).unwrap();
        assert_eq!(splits.len(), 4);
        for s in [intra, cross, overall] {
            assert_eq!(s.mean, Some(0.0));
        }
    }

    #[test]
    fn rows_follow_table_names() {
        let cfg = AblationConfig::default();
        let rows = cfg.rows(3);
        let names: Vec<_> = rows.iter().map(|r| r.0).collect();
        assert_eq!(names, ["full", "w/o share", "w/o pos", "w/ mask"]);
        let full = &rows[0].1.ablations;
        assert!(full.share_joints && full.use_positions && full.joint_mask_prob == 0.0);
        assert!(rows.iter().all(|r| r.1.steps == cfg.train.steps && r.1.seed == 3));
    }
}
