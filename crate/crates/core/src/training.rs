//! Losses, the optimization loop, checkpoints and inference.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bvh::window_motion;
use crate::error::{Error, Result};
use crate::grouping::padded_sizes;
use crate::model::{
    cycle_input, decoded_to_motions, decoder_noise, motion_features, renormalize_root, targets, Mode, Model, ModelConfig, MotionFeatures,
    NoisePolicy, SkeletonInfo,
};
use crate::skeleton::{forward_kinematics, height_normalized_mse, Motion, Skeleton};
use retarget_nn::checkpoint::{read_checkpoint, write_checkpoint};
use retarget_nn::{AdamWConfig, AdamWState, Ctx, DType, Graph, ParamGrads, ParamStore, Scalar, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_cyc: f64,
    pub lambda_root: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_cyc: 20.0, lambda_root: 7.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_cyc >= 0.0 && self.lambda_root >= 0.0) {
            return Err(Error::InvalidConfig(format!("loss weights must be non-negative: {self:?}")));
        }
        Ok(())
    }

    pub fn total(&self, rec: f64, cyc: f64, root: f64) -> f64 {
        rec + self.lambda_cyc * cyc + self.lambda_root * root
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablations {
    pub share_joints: bool,
    pub use_positions: bool,
    pub joint_mask_prob: f64,
}

impl Default for Ablations {
    fn default() -> Self {
        Self { share_joints: true, use_positions: true, joint_mask_prob: 0.0 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Cosine decay from `lr` to `min_lr` over the configured steps.
    Cosine { min_lr: f64 },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub window_length: usize,
    /// Frames between window starts; defaults to the window length.
    pub window_stride: Option<usize>,
    pub lr: f64,
    pub betas: [f64; 2],
    pub eps: f64,
    pub weight_decay: f64,
    pub schedule: LrSchedule,
    pub steps: u64,
    pub seed: u64,
    pub ablations: Ablations,
    pub weights: LossWeights,
    /// Probability of drawing a target skeleton different from the source.
    pub cross_prob: f64,
    /// Treat `H_A` as a fixed target in the cycle loss.
    pub cycle_stop_gradient: bool,
    pub checkpoint_every: u64,
    pub precision: Precision,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            window_length: 64,
            window_stride: None,
            lr: 1e-4,
            betas: [0.9, 0.99],
            eps: 1e-8,
            weight_decay: 0.0,
            schedule: LrSchedule::Constant,
            steps: 5000,
            seed: 0,
            ablations: Ablations::default(),
            weights: LossWeights::default(),
            cross_prob: 0.8,
            cycle_stop_gradient: false,
            checkpoint_every: 500,
            precision: Precision::F32,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.window_length < 2 {
            return bad(format!("window_length {} < 2", self.window_length));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.ablations.joint_mask_prob) {
            return bad(format!("joint_mask_prob {} outside [0, 1)", self.ablations.joint_mask_prob));
        }
        if !(0.0..=1.0).contains(&self.cross_prob) {
            return bad(format!("cross_prob {} outside [0, 1]", self.cross_prob));
        }
        if !(self.lr > 0.0) || self.weight_decay < 0.0 {
            return bad("lr must be positive and weight_decay non-negative".into());
        }
        if self.betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return bad(format!("betas {:?} outside [0, 1)", self.betas));
        }
        self.effective_model().validate()
    }

    /// The model configuration with the ablation switches applied.
    pub fn effective_model(&self) -> ModelConfig {
        let mut m = self.model.clone();
        m.share_joints = self.ablations.share_joints;
        m.use_positions = self.ablations.use_positions;
        m
    }

    pub fn stride(&self) -> usize {
        self.window_stride.unwrap_or(self.window_length).max(1)
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig { lr: self.lr, beta1: self.betas[0], beta2: self.betas[1], eps: self.eps, weight_decay: self.weight_decay }
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine { min_lr } => {
                let frac = (step as f64 / self.steps.max(1) as f64).min(1.0);
                min_lr + 0.5 * (self.lr - min_lr) * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

/// SHA-256 of the canonical JSON of a model configuration.
pub fn config_hash(config: &ModelConfig) -> String {
    let v = serde_json::to_value(config).expect("config serializes");
    let mut h = Sha256::new();
    h.update(v.to_string().as_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Per-frame motion vector: root position / `root_height`, root 6D, then every non-root 6D.
pub fn motion_vector(motion: &Motion, root_height: f64) -> Result<Vec<f64>> {
    if !(root_height > 0.0) {
        return Err(Error::ZeroRootHeight(root_height));
    }
    let n = motion.joint_count();
    let mut out = Vec::with_capacity(motion.frame_count() * (3 + 6 * n));
    for t in 0..motion.frame_count() {
        out.extend((motion.root_positions()[t] / root_height).iter());
        for j in 0..n {
            out.extend(motion.rotation(t, j).to_array());
        }
    }
    Ok(out)
}

fn same_layout(a: &Motion, b: &Motion) -> Result<()> {
    if a.joint_count() != b.joint_count() {
        return Err(Error::SkeletonMismatch(format!("{} vs {} joints", a.joint_count(), b.joint_count())));
    }
    if a.frame_count() != b.frame_count() {
        return Err(Error::ShapeMismatch(format!("{} vs {} frames", a.frame_count(), b.frame_count())));
    }
    Ok(())
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len().max(1) as f64
}

/// Mean squared error over all entries of the motion vectors.
pub fn loss_reconstruction(a: &Motion, b: &Motion, root_height: f64) -> Result<f64> {
    same_layout(a, b)?;
    Ok(mse(&motion_vector(a, root_height)?, &motion_vector(b, root_height)?))
}

/// Root position MSE plus root 6D MSE.
pub fn loss_root(a: &Motion, b: &Motion, root_height: f64) -> Result<f64> {
    same_layout(a, b)?;
    if !(root_height > 0.0) {
        return Err(Error::ZeroRootHeight(root_height));
    }
    let pos = |m: &Motion| -> Vec<f64> {
        m.root_positions().iter().flat_map(|p| (p / root_height).iter().copied().collect::<Vec<_>>()).collect()
    };
    let rot = |m: &Motion| -> Vec<f64> { (0..m.frame_count()).flat_map(|t| m.rotation(t, 0).to_array()).collect() };
    Ok(mse(&pos(a), &pos(b)) + mse(&rot(a), &rot(b)))
}

/// Mean squared difference between two representations.
pub fn loss_cycle<F: Scalar>(h_a: &retarget_nn::Tensor<F>, h_b: &retarget_nn::Tensor<F>) -> Result<f64> {
    if h_a.shape() != h_b.shape() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", h_a.shape(), h_b.shape())));
    }
    Ok(mse(&h_a.to_f64_vec(), &h_b.to_f64_vec()))
}

/// Windowed training motions over a pool of skeletons.
#[derive(Clone, Debug, Default)]
pub struct TrainingData {
    pub skeletons: Vec<Skeleton>,
    /// `(skeleton index, window)`
    pub windows: Vec<(usize, Motion)>,
}

impl TrainingData {
    /// Cut every motion into windows; skeletons are deduplicated by name.
    pub fn from_motions<'a>(items: impl IntoIterator<Item = (&'a Skeleton, &'a Motion)>, length: usize, stride: usize) -> Result<Self> {
        let mut data = Self::default();
        let mut index: BTreeMap<String, usize> = BTreeMap::new();
        for (sk, m) in items {
            m.check_skeleton(sk)?;
            let id = match index.get(sk.name()) {
                Some(&i) => {
                    if data.skeletons[i] != *sk {
                        return Err(Error::SkeletonMismatch(format!("two different skeletons named {:?}", sk.name())));
                    }
                    i
                }
                None => {
                    index.insert(sk.name().to_string(), data.skeletons.len());
                    data.skeletons.push(sk.clone());
                    data.skeletons.len() - 1
                }
            };
            if m.frame_count() < length {
                return Err(Error::WindowTooShort { frames: m.frame_count(), window: length });
            }
            data.windows.extend(window_motion(m, length, stride).into_iter().map(|w| (id, w)));
        }
        if data.windows.is_empty() {
            return Err(Error::InsufficientData("no training windows".into()));
        }
        Ok(data)
    }
}

/// Windows from one source skeleton sent to one target skeleton.
#[derive(Clone, Debug)]
pub struct PairBatch<F> {
    pub source: usize,
    pub target: usize,
    pub input: MotionFeatures<F>,
    pub noise_rec: MotionFeatures<F>,
    pub noise_ret: MotionFeatures<F>,
    pub fps: f64,
}

/// Entry counts over a whole batch, so per-pair sums add up to batch means.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossNormalizers {
    pub rec: f64,
    pub root_pos: f64,
    pub root_rot: f64,
    pub cyc: f64,
}

impl LossNormalizers {
    pub fn for_batch<F: Scalar>(batches: &[PairBatch<F>], infos: &[SkeletonInfo], tokens: usize, dim: usize) -> Self {
        let mut n = Self { rec: 0.0, root_pos: 0.0, root_rot: 0.0, cyc: 0.0 };
        for b in batches {
            let tb = (b.input.frames() * b.input.batch()) as f64;
            let joints = infos[b.source].joint_count() as f64;
            n.rec += tb * (3.0 + 6.0 * joints);
            n.root_pos += 3.0 * tb;
            n.root_rot += 6.0 * tb;
            n.cyc += tb * (tokens * dim) as f64;
        }
        n
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LossOptions {
    pub weights: LossWeights,
    pub stop_gradient: bool,
    pub use_positions: bool,
}

/// Loss terms of one pair batch, each already divided by its batch normalizer.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms<'g, F> {
    pub rec: Var<'g, F>,
    pub cyc: Var<'g, F>,
    pub root: Var<'g, F>,
    pub total: Var<'g, F>,
}

/// Reconstruction, cycle and root terms for one pair batch.
#[allow(clippy::too_many_arguments)]
pub fn pair_losses<'g, F: Scalar>(
    ctx: &Ctx<'g, '_, F>,
    model: &Model,
    infos: &[SkeletonInfo],
    batch: &PairBatch<F>,
    norms: &LossNormalizers,
    opts: &LossOptions,
    mode: &Mode,
) -> Result<LossTerms<'g, F>> {
    let (a, b) = (&infos[batch.source], &infos[batch.target]);
    let padded = padded_sizes([&a.grouping, &b.grouping]);
    let input = batch.input.bind(ctx);
    let h_a = model.encode(ctx, a, input, padded, mode)?;

    let rec = model.decode(ctx, h_a, a, &batch.noise_rec, padded, mode)?;
    let (tp, tr, tj) = targets(input)?;
    let pos_sq = rec.root_pos.sub(tp)?.sum_sq();
    let rot_sq = rec.root_rot.sub(tr)?.sum_sq();
    let joint_sq = rec.joint_rot.sub(tj)?.sum_sq();
    let l_rec = pos_sq.add(rot_sq)?.add(joint_sq)?.scale(1.0 / norms.rec);
    let l_root = pos_sq.scale(1.0 / norms.root_pos).add(rot_sq.scale(1.0 / norms.root_rot))?;

    let ret = model.decode(ctx, h_a, b, &batch.noise_ret, padded, mode)?;
    let cyc_in = cycle_input(&ret, b, batch.fps, opts.use_positions)?;
    let h_b = model.encode(ctx, b, cyc_in, padded, mode)?;
    let target = if opts.stop_gradient { ctx.constant(h_a.value().clone()) } else { h_a };
    let l_cyc = h_b.sub(target)?.sum_sq().scale(1.0 / norms.cyc);

    let total = l_rec.add(l_cyc.scale(opts.weights.lambda_cyc))?.add(l_root.scale(opts.weights.lambda_root))?;
    Ok(LossTerms { rec: l_rec, cyc: l_cyc, root: l_root, total })
}

/// Loss values of one step, as written to the loss CSV.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub l_rec: f64,
    pub l_cyc: f64,
    pub l_root: f64,
    pub l_total: f64,
}

impl LossRecord {
    pub const CSV_HEADER: &'static str = "step,l_rec,l_cyc,l_root,l_total";

    pub fn csv_line(&self) -> String {
        format!("{},{:e},{:e},{:e},{:e}", self.step, self.l_rec, self.l_cyc, self.l_root, self.l_total)
    }

    fn is_finite(&self) -> bool {
        [self.l_rec, self.l_cyc, self.l_root, self.l_total].iter().all(|v| v.is_finite())
    }
}

/// Losses and parameter gradients of a batch, built pair by pair.
#[allow(clippy::too_many_arguments)]
pub fn batch_gradients<F: Scalar>(
    model: &Model,
    store: &ParamStore<F>,
    infos: &[SkeletonInfo],
    batches: &[PairBatch<F>],
    opts: &LossOptions,
    mode: &Mode,
    with_grads: bool,
) -> Result<(LossRecord, Option<ParamGrads<F>>)> {
    let cfg = model.config();
    let norms = LossNormalizers::for_batch(batches, infos, cfg.tokens(), cfg.encoder.dim);
    let mut rec = LossRecord::default();
    let mut grads = with_grads.then(|| ParamGrads::new(store.len()));
    for batch in batches {
        let g = Graph::new();
        let ctx = Ctx::new(&g, store);
        let terms = pair_losses(&ctx, model, infos, batch, &norms, opts, mode)?;
        rec.l_rec += terms.rec.value().item().as_f64();
        rec.l_cyc += terms.cyc.value().item().as_f64();
        rec.l_root += terms.root.value().item().as_f64();
        rec.l_total += terms.total.value().item().as_f64();
        if let Some(acc) = grads.as_mut() {
            g.backward(terms.total)?.accumulate_into(acc, F::one());
        }
    }
    Ok((rec, grads))
}

/// Model, parameters and optimizer state driven by a [`TrainConfig`].
pub struct Trainer<F: Scalar> {
    pub config: TrainConfig,
    pub model: Model,
    pub store: ParamStore<F>,
    pub optimizer: AdamWState<F>,
    pub data: TrainingData,
    pub infos: Vec<SkeletonInfo>,
    pub step: u64,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl<F: Scalar> Trainer<F> {
    pub fn new(config: TrainConfig, data: TrainingData) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let model = Model::new(config.effective_model(), &mut store, config.seed)?;
        let infos = data.skeletons.iter().map(|s| model.prepare(s)).collect::<Result<Vec<_>>>()?;
        let optimizer = AdamWState::new(config.adamw(), &store);
        let rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5e_ed0f_da7a);
        Ok(Self { config, model, store, optimizer, data, infos, step: 0, rng, order: Vec::new(), cursor: 0 })
    }

    fn next_window(&mut self) -> usize {
        if self.cursor >= self.order.len() {
            self.order = (0..self.data.windows.len()).collect();
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        self.cursor += 1;
        self.order[self.cursor - 1]
    }

    fn sample_target(&mut self, source: usize) -> usize {
        let n = self.infos.len();
        if n < 2 || self.rng.gen::<f64>() >= self.config.cross_prob {
            return source;
        }
        let k = self.rng.gen_range(0..n - 1);
        if k >= source {
            k + 1
        } else {
            k
        }
    }

    /// Draw the next batch, grouped by (source, target) pair in first-seen order.
    pub fn next_batch(&mut self) -> Result<Vec<PairBatch<F>>> {
        let mut groups: Vec<((usize, usize), Vec<usize>)> = Vec::new();
        for _ in 0..self.config.batch_size {
            let w = self.next_window();
            let src = self.data.windows[w].0;
            let tgt = self.sample_target(src);
            match groups.iter_mut().find(|(k, _)| *k == (src, tgt)) {
                Some((_, v)) => v.push(w),
                None => groups.push(((src, tgt), vec![w])),
            }
        }
        let fixed = self.config.model.decoder.noise_seed_policy == NoisePolicy::Fixed;
        let mut out = Vec::with_capacity(groups.len());
        for (gi, ((src, tgt), ws)) in groups.into_iter().enumerate() {
            let windows: Vec<&Motion> = ws.iter().map(|&w| &self.data.windows[w].1).collect();
            let input = motion_features(&self.infos[src], &windows, self.config.ablations.use_positions)?;
            let (t, b) = (input.frames(), input.batch());
            let mut fixed_rng;
            let rng: &mut ChaCha8Rng = if fixed {
                fixed_rng = ChaCha8Rng::seed_from_u64(self.config.seed.wrapping_add(gi as u64));
                &mut fixed_rng
            } else {
                &mut self.rng
            };
            let noise_rec = decoder_noise(t, b, self.infos[src].joint_count(), rng);
            let noise_ret = decoder_noise(t, b, self.infos[tgt].joint_count(), rng);
            out.push(PairBatch { source: src, target: tgt, input, noise_rec, noise_ret, fps: windows[0].fps() });
        }
        Ok(out)
    }

    pub fn loss_options(&self) -> LossOptions {
        LossOptions {
            weights: self.config.weights,
            stop_gradient: self.config.cycle_stop_gradient,
            use_positions: self.config.ablations.use_positions,
        }
    }

    /// One optimizer step on a freshly drawn batch.
    pub fn train_step(&mut self) -> Result<LossRecord> {
        let batches = self.next_batch()?;
        let mode = Mode::train(self.rng.gen(), self.config.ablations.joint_mask_prob);
        let (mut rec, grads) = batch_gradients(&self.model, &self.store, &self.infos, &batches, &self.loss_options(), &mode, true)?;
        rec.step = self.step;
        if !rec.is_finite() {
            return Err(Error::NonFiniteLoss { step: self.step, detail: format!("{rec:?}") });
        }
        let grads = grads.expect("gradients requested");
        let lr = self.config.lr_at(self.step);
        self.optimizer.step_with_lr(&mut self.store, &grads, lr).map_err(|e| Error::NonFiniteLoss {
            step: self.step,
            detail: format!("{e} (losses {rec:?}, grad norm {:e})", grads.global_norm()),
        })?;
        self.step += 1;
        Ok(rec)
    }

    /// Losses of every training window, in eval mode with fixed noise.
    pub fn evaluate_losses(&self, seed: u64) -> Result<LossRecord> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut by_source: BTreeMap<usize, Vec<&Motion>> = BTreeMap::new();
        for (s, w) in &self.data.windows {
            by_source.entry(*s).or_default().push(w);
        }
        let mut batches = Vec::new();
        for (src, ws) in by_source {
            for chunk in ws.chunks(self.config.batch_size) {
                let input = motion_features(&self.infos[src], chunk, self.config.ablations.use_positions)?;
                let (t, b, n) = (input.frames(), input.batch(), self.infos[src].joint_count());
                let noise_rec = decoder_noise(t, b, n, &mut rng);
                let noise_ret = decoder_noise(t, b, n, &mut rng);
                batches.push(PairBatch { source: src, target: src, input, noise_rec, noise_ret, fps: chunk[0].fps() });
            }
        }
        let (mut rec, _) = batch_gradients(&self.model, &self.store, &self.infos, &batches, &self.loss_options(), &Mode::eval(), false)?;
        rec.step = self.step;
        Ok(rec)
    }

    pub fn metadata(&self) -> CheckpointMeta {
        CheckpointMeta::new(self.model.config().clone(), self.config.window_length, self.step)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.store, &self.metadata())
    }

    /// Train for the configured steps, writing `loss.csv`, periodic and best checkpoints to `out`.
    pub fn run(&mut self, out: &Path, mut on_step: impl FnMut(&LossRecord)) -> Result<Vec<LossRecord>> {
        fs::create_dir_all(out)?;
        let mut csv = BufWriter::new(fs::File::create(out.join("loss.csv"))?);
        writeln!(csv, "{}", LossRecord::CSV_HEADER)?;
        let mut history = Vec::new();
        let mut best = f64::INFINITY;
        while self.step < self.config.steps {
            let rec = self.train_step()?;
            writeln!(csv, "{}", rec.csv_line())?;
            on_step(&rec);
            history.push(rec);
            let every = self.config.checkpoint_every;
            if (every > 0 && self.step.is_multiple_of(every)) || self.step == self.config.steps {
                csv.flush()?;
                self.save_checkpoint(&out.join(format!("step_{:06}.ckpt", self.step)))?;
                let val = self.evaluate_losses(self.config.seed)?.l_total;
                if val < best {
                    best = val;
                    self.save_checkpoint(&out.join("best.ckpt"))?;
                }
            }
        }
        csv.flush()?;
        self.save_checkpoint(&out.join("final.ckpt"))?;
        Ok(history)
    }
}

/// Metadata record stored in every checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: String,
    pub config_hash: String,
    pub step: u64,
    pub window_length: usize,
    pub model: ModelConfig,
}

impl CheckpointMeta {
    pub const FORMAT: &'static str = "retarget-model/1";

    pub fn new(model: ModelConfig, window_length: usize, step: u64) -> Self {
        Self { format: Self::FORMAT.into(), config_hash: config_hash(&model), step, window_length, model }
    }
}

pub fn save_checkpoint<F: Scalar>(path: &Path, store: &ParamStore<F>, meta: &CheckpointMeta) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let file = BufWriter::new(fs::File::create(path)?);
    write_checkpoint(file, store, &serde_json::to_value(meta)?)?;
    Ok(())
}

/// A model rebuilt from a checkpoint.
pub struct LoadedModel<F: Scalar> {
    pub model: Model,
    pub store: ParamStore<F>,
    pub meta: CheckpointMeta,
    pub path: PathBuf,
}

impl<F: Scalar> LoadedModel<F> {
    /// Build a fresh model from the metadata and copy the stored parameters in.
    pub fn load(path: &Path) -> Result<Self> {
        let (stored, meta) = read_checkpoint::<F, _>(fs::File::open(path)?)?;
        let meta: CheckpointMeta = serde_json::from_value(meta).map_err(|e| Error::ConfigMismatch(format!("checkpoint metadata: {e}")))?;
        if meta.format != CheckpointMeta::FORMAT {
            return Err(Error::ConfigMismatch(format!("unknown checkpoint format {:?}", meta.format)));
        }
        if config_hash(&meta.model) != meta.config_hash {
            return Err(Error::ConfigMismatch("configuration hash does not match the stored configuration".into()));
        }
        let mut store = ParamStore::new();
        let model = Model::new(meta.model.clone(), &mut store, 0)?;
        store.load_from(&stored).map_err(|e| Error::ConfigMismatch(e.to_string()))?;
        Ok(Self { model, store, meta, path: path.to_path_buf() })
    }

    pub fn dtype(&self) -> DType {
        F::DTYPE
    }
}

/// Decode a batch of equal-length windows from `source` onto `target`.
pub fn retarget_windows<F: Scalar>(
    model: &Model,
    store: &ParamStore<F>,
    source: &SkeletonInfo,
    target: &SkeletonInfo,
    windows: &[&Motion],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Motion>> {
    let input = motion_features::<F>(source, windows, model.config().use_positions)?;
    let (t, b) = (input.frames(), input.batch());
    let noise = decoder_noise(t, b, target.joint_count(), rng);
    let padded = padded_sizes([&source.grouping, &target.grouping]);
    let g = Graph::new();
    let ctx = Ctx::new(&g, store);
    let mode = Mode::eval();
    let h = model.encode(&ctx, source, input.bind(&ctx), padded, &mode)?;
    let decoded = model.decode(&ctx, h, target, &noise, padded, &mode)?;
    decoded_to_motions(&decoded, target, source.tpose.root_height, windows[0].fps())
}

/// Retarget a whole motion window by window, re-stitching without overlap.
///
/// A trailing partial window is covered by the last `window` frames, of which
/// only the uncovered tail is kept.
#[allow(clippy::too_many_arguments)]
pub fn retarget<F: Scalar>(
    model: &Model,
    store: &ParamStore<F>,
    source: &Skeleton,
    motion: &Motion,
    target: &Skeleton,
    window: usize,
    seed: u64,
) -> Result<Motion> {
    motion.check_skeleton(source)?;
    let frames = motion.frame_count();
    if window < 2 || frames < window {
        return Err(Error::WindowTooShort { frames, window });
    }
    let src = model.prepare(source)?;
    let tgt = model.prepare(target)?;
    let mut starts: Vec<usize> = (0..frames / window).map(|i| i * window).collect();
    if !frames.is_multiple_of(window) {
        starts.push(frames - window);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut root = Vec::with_capacity(frames);
    let mut rotations = Vec::with_capacity(frames);
    let chunks: Vec<Vec<usize>> = starts.chunks(16).map(|c| c.to_vec()).collect();
    for chunk in chunks {
        let mut windows = Vec::with_capacity(chunk.len());
        let mut origins = Vec::with_capacity(chunk.len());
        for &s in &chunk {
            let w = window_motion(&motion.slice(s, window), window, window).remove(0);
            let o = motion.root_positions()[s];
            origins.push(Vector3::new(o.x, 0.0, o.z));
            windows.push(w);
        }
        let refs: Vec<&Motion> = windows.iter().collect();
        let decoded = retarget_windows(model, store, &src, &tgt, &refs, &mut rng)?;
        for ((m, &s), origin) in decoded.into_iter().zip(&chunk).zip(origins) {
            let keep_from = root.len().saturating_sub(s);
            let world: Vec<Vector3<f64>> = m.root_positions().iter().map(|p| p + origin).collect();
            let scaled = renormalize_root(&world, &src.tpose, &tgt.tpose)?;
            let (_, rots, _) = m.into_parts();
            root.extend_from_slice(&scaled[keep_from..]);
            rotations.extend(rots.into_iter().skip(keep_from));
        }
    }
    Motion::new(root, rotations, motion.fps())
}

/// Height-normalized position error of `pred` against `truth` on `skeleton`.
pub fn position_mse(skeleton: &Skeleton, pred: &Motion, truth: &Motion) -> Result<f64> {
    let h = crate::skeleton::compute_tpose(skeleton).character_height;
    height_normalized_mse(&forward_kinematics(skeleton, pred)?, &forward_kinematics(skeleton, truth)?, h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skeleton::Rotation6D;
    use crate::synth::{generate_humanoid, generate_motion, HumanoidParams, MotionKind, NamingStyle};
    use retarget_nn::Tensor;

    fn shifted(m: &Motion, d: f64, all: bool) -> Motion {
        let root = m.root_positions().iter().map(|p| p.add_scalar(d)).collect();
        let rots = m
            .rotations()
            .iter()
            .map(|f| {
                f.iter()
                    .enumerate()
                    .map(|(j, r)| if all || j == 0 { Rotation6D::from_array(r.to_array().map(|v| v + d)) } else { *r })
                    .collect()
            })
            .collect();
        Motion::new(root, rots, m.fps()).unwrap()
    }

    fn clip(seed: u64) -> (Skeleton, Motion) {
        let sk = generate_humanoid(&HumanoidParams::default(), NamingStyle::Camel, seed).unwrap();
        let m = generate_motion(&sk, MotionKind::Wave, 6, 30.0, seed).unwrap();
        (sk, m)
    }

    #[test]
    fn reconstruction_loss_examples() {
        let (_, a) = clip(0);
        assert_eq!(loss_reconstruction(&a, &a, 1.0).unwrap(), 0.0);
        let b = shifted(&a, 0.1, true);
        assert!((loss_reconstruction(&a, &b, 1.0).unwrap() - 0.01).abs() < 1e-12);
        assert_eq!(loss_reconstruction(&a, &b, 1.0).unwrap(), loss_reconstruction(&b, &a, 1.0).unwrap());
        let (_, other) = {
            let sk = generate_humanoid(&HumanoidParams { spine: [4, 4], ..Default::default() }, NamingStyle::Snake, 1).unwrap();
            let m = generate_motion(&sk, MotionKind::Wave, 6, 30.0, 1).unwrap();
            (sk, m)
        };
        assert!(matches!(loss_reconstruction(&a, &other, 1.0), Err(Error::SkeletonMismatch(_))));
    }

    #[test]
    fn root_loss_examples() {
        let (_, a) = clip(2);
        assert_eq!(loss_root(&a, &a, 1.0).unwrap(), 0.0);
        let root = a.root_positions().iter().map(|p| p + Vector3::new(1.0, 0.0, 0.0)).collect();
        let moved = Motion::new(root, a.rotations().to_vec(), a.fps()).unwrap();
        assert!((loss_root(&a, &moved, 1.0).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        let mut rots = a.rotations().to_vec();
        for f in &mut rots {
            for r in f.iter_mut().skip(1) {
                *r = Rotation6D::IDENTITY;
            }
        }
        let others = Motion::new(a.root_positions().to_vec(), rots, a.fps()).unwrap();
        assert_eq!(loss_root(&a, &others, 1.0).unwrap(), 0.0);
        assert!(loss_reconstruction(&a, &others, 1.0).unwrap() > 0.0);
    }

    #[test]
    fn cycle_loss_examples() {
        let h = Tensor::<f64>::uniform(&[2, 1, 6, 4], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(loss_cycle(&h, &h).unwrap(), 0.0);
        let c = Tensor::new(h.shape(), h.data().iter().map(|v| v + 0.3).collect()).unwrap();
        assert!((loss_cycle(&h, &c).unwrap() - 0.09).abs() < 1e-12);
        let other = Tensor::<f64>::zeros(&[2, 1, 6, 3]);
        assert!(matches!(loss_cycle(&h, &other), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn weighted_total() {
        let w = LossWeights::default();
        assert_eq!(w.total(0.5, 0.25, 0.125), 0.5 + 20.0 * 0.25 + 7.0 * 0.125);
        assert!(LossWeights { lambda_cyc: -1.0, lambda_root: 0.0 }.validate().is_err());
    }

    fn tiny_trainer(weights: LossWeights, seed: u64) -> Trainer<f64> {
        let clips: Vec<_> = (0..2).map(clip).collect();
        let data = TrainingData::from_motions(clips.iter().map(|(s, m)| (s, m)), 4, 2).unwrap();
        let cfg = TrainConfig {
            batch_size: 4,
            window_length: 4,
            window_stride: Some(2),
            lr: 1e-3,
            steps: 2,
            seed,
            weights,
            model: ModelConfig::tiny(8, 1, 1),
            ..Default::default()
        };
        Trainer::new(cfg, data).unwrap()
    }

    #[test]
    fn graph_losses_agree_with_weights() {
        let mut t = tiny_trainer(LossWeights { lambda_cyc: 0.0, lambda_root: 0.0 }, 0);
        let rec = t.train_step().unwrap();
        assert_eq!(rec.l_total, rec.l_rec);
        let mut t = tiny_trainer(LossWeights::default(), 0);
        let rec = t.train_step().unwrap();
        assert!((rec.l_total - LossWeights::default().total(rec.l_rec, rec.l_cyc, rec.l_root)).abs() < 1e-12 * rec.l_total);
    }

    #[test]
    fn step_updates_exactly_the_parameters_with_gradient() {
        let mut t = tiny_trainer(LossWeights::default(), 3);
        let before = t.store.clone();
        let mut probe = tiny_trainer(LossWeights::default(), 3);
        let batches = probe.next_batch().unwrap();
        let mode = Mode::train(0, 0.0);
        let (_, grads) = batch_gradients(&probe.model, &probe.store, &probe.infos, &batches, &probe.loss_options(), &mode, true).unwrap();
        let grads = grads.unwrap();
        t.train_step().unwrap();
        let mut untouched = Vec::new();
        for id in before.ids() {
            let moved = before.get(id).max_abs_diff(t.store.get(id)) > 0.0;
            let has_grad = grads.get(id).is_some_and(|g| g.data().iter().any(|v| *v != 0.0));
            assert_eq!(moved, has_grad, "{}", before.name(id));
            if !moved {
                untouched.push(before.name(id).to_string());
            }
        }
        assert!(untouched.iter().all(|n| n.starts_with("encoder.absent")), "{untouched:?}");
    }

    #[test]
    fn same_seed_same_losses() {
        let run = |seed| {
            let mut t = tiny_trainer(LossWeights::default(), seed);
            (0..2).map(|_| t.train_step().unwrap().csv_line()).collect::<Vec<_>>()
        };
        assert_eq!(run(5), run(5));
        assert_ne!(run(5), run(6));
    }

    #[test]
    fn checkpoint_round_trip_and_retarget_length() {
        let t = tiny_trainer(LossWeights::default(), 1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        t.save_checkpoint(&path).unwrap();
        let loaded = LoadedModel::<f64>::load(&path).unwrap();
        for id in t.store.ids() {
            assert_eq!(t.store.get(id).data(), loaded.store.get(id).data());
        }
        let (sk, m) = clip(0);
        let (tk, _) = clip(1);
        let out = retarget(&loaded.model, &loaded.store, &sk, &m, &tk, 4, 0).unwrap();
        assert_eq!(out.frame_count(), m.frame_count());
        assert_eq!(out.joint_count(), tk.len());
        let again = retarget(&loaded.model, &loaded.store, &sk, &m, &tk, 4, 0).unwrap();
        assert_eq!(out, again);
        assert!(matches!(retarget(&loaded.model, &loaded.store, &sk, &m.slice(0, 3), &tk, 4, 0), Err(Error::WindowTooShort { .. })));

        let mut meta = t.metadata();
        meta.config_hash = "0".repeat(64);
        save_checkpoint(&path, &t.store, &meta).unwrap();
        assert!(matches!(LoadedModel::<f64>::load(&path), Err(Error::ConfigMismatch(_))));
    }

    #[test]
    fn config_rejects_bad_values() {
        let bad = [
            TrainConfig { window_length: 1, ..Default::default() },
            TrainConfig { ablations: Ablations { joint_mask_prob: 1.0, ..Default::default() }, ..Default::default() },
            TrainConfig { lr: 0.0, ..Default::default() },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(Error::InvalidConfig(_))));
        }
        let json = r#"{"batch_size": 8, "unknown": 1}"#;
        assert!(serde_json::from_str::<TrainConfig>(json).is_err());
        let c = TrainConfig { schedule: LrSchedule::Cosine { min_lr: 0.0 }, steps: 10, ..Default::default() };
        assert_eq!(c.lr_at(0), c.lr);
        assert!(c.lr_at(10).abs() < 1e-18);
    }
}
