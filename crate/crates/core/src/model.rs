//! Skeleton-agnostic encoder, skeleton-specific decoder and the differentiable
//! path from decoded rotations back to encoder features.

use std::cell::RefCell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embeddings::{sinusoidal_pe, tpose_inputs, NameEmbeddingProvider, NameProviderSpec};
use crate::error::{Error, Result};
use crate::grouping::{classify_joints, KeywordTable, Part, PartGrouping};
use crate::skeleton::{compute_tpose, forward_kinematics, root_velocity, Motion, Rotation6D, Skeleton, TPose};
use retarget_nn::layers::{dropout, FeedForward, LayerNorm, Linear, Mlp, MultiHeadAttention};
use retarget_nn::{attention_pool, Ctx, ParamId, ParamStore, Scalar, Tensor, Var};

/// Root feature width: position, 6D rotation, velocity.
pub const ROOT_FEATURES: usize = 12;
/// Non-root feature width: root-relative position, 6D rotation.
pub const JOINT_FEATURES: usize = 9;

/// How attention spans the `T x tokens` grid.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionLayout {
    /// One attention over all frames and tokens jointly.
    #[default]
    Full,
    /// Attention within each frame, then along time for each token.
    Factorized,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub dim: usize,
    pub queries: usize,
    pub temporal_layers: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub dropout: f64,
    pub attention: AttentionLayout,
    /// Fail on skeletons with an empty body part instead of using a learned placeholder.
    pub strict_groups: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            queries: 4,
            temporal_layers: 4,
            heads: 4,
            ff_mult: 4,
            dropout: 0.1,
            attention: AttentionLayout::Full,
            strict_groups: false,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoisePolicy {
    /// Same noise for every call with the same seed.
    Fixed,
    /// Fresh noise per training step.
    #[default]
    PerCall,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub dropout: f64,
    pub attention: AttentionLayout,
    pub noise_seed_policy: NoisePolicy,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            layers: 4,
            heads: 4,
            ff_mult: 4,
            dropout: 0.1,
            attention: AttentionLayout::Full,
            noise_seed_policy: NoisePolicy::PerCall,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    /// Name embedding source; lexical hashing at the model width when absent.
    pub names: Option<NameProviderSpec>,
    pub keywords: KeywordTable,
    pub share_joints: bool,
    pub use_positions: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
            names: None,
            keywords: KeywordTable::default(),
            share_joints: true,
            use_positions: true,
        }
    }
}

impl ModelConfig {
    /// A small configuration for tests and examples.
    pub fn tiny(dim: usize, queries: usize, layers: usize) -> Self {
        Self {
            encoder: EncoderConfig { dim, queries, temporal_layers: layers, heads: 2, ff_mult: 2, dropout: 0.0, ..Default::default() },
            decoder: DecoderConfig { dim, layers, heads: 2, ff_mult: 2, dropout: 0.0, ..Default::default() },
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (e, d) = (&self.encoder, &self.decoder);
        if e.dim != d.dim {
            return Err(Error::ConfigMismatch(format!("encoder width {} differs from decoder width {}", e.dim, d.dim)));
        }
        if e.dim == 0 || e.dim % 2 != 0 {
            return Err(Error::OddDimension(e.dim));
        }
        if e.queries == 0 {
            return Err(Error::InvalidConfig("at least one pooling query per part is required".into()));
        }
        for (what, heads) in [("encoder", e.heads), ("decoder", d.heads)] {
            if heads == 0 || e.dim % heads != 0 {
                return Err(Error::InvalidConfig(format!("{what} heads {heads} must divide width {}", e.dim)));
            }
        }
        for p in [e.dropout, d.dropout] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::InvalidConfig(format!("dropout {p} outside [0, 1)")));
            }
        }
        if e.ff_mult == 0 || d.ff_mult == 0 {
            return Err(Error::InvalidConfig("ff_mult must be positive".into()));
        }
        Ok(())
    }

    pub fn name_spec(&self) -> NameProviderSpec {
        self.names.clone().unwrap_or(NameProviderSpec::Lexical { dim: self.encoder.dim, seed: 0 })
    }

    /// Total pooled tokens per frame.
    pub fn tokens(&self) -> usize {
        6 * self.encoder.queries
    }
}

/// Everything the model needs to know about one skeleton.
#[derive(Clone, Debug)]
pub struct SkeletonInfo {
    pub skeleton: Skeleton,
    pub tpose: TPose,
    pub grouping: PartGrouping,
    names: Vec<Vec<f64>>,
    tpose_in: Vec<f64>,
    parents: Vec<Option<usize>>,
    offsets: Vec<[f64; 3]>,
}

impl SkeletonInfo {
    pub fn joint_count(&self) -> usize {
        self.skeleton.len()
    }
}

/// Training-time randomness; evaluation uses none.
pub struct Mode {
    rng: Option<RefCell<ChaCha8Rng>>,
    pub joint_mask_prob: f64,
}

impl Mode {
    pub fn eval() -> Self {
        Self { rng: None, joint_mask_prob: 0.0 }
    }

    pub fn train(seed: u64, joint_mask_prob: f64) -> Self {
        Self { rng: Some(RefCell::new(ChaCha8Rng::seed_from_u64(seed))), joint_mask_prob }
    }

    pub fn is_train(&self) -> bool {
        self.rng.is_some()
    }

    fn dropout<'g, F: Scalar>(&self, x: Var<'g, F>, p: f64) -> Result<Var<'g, F>> {
        match &self.rng {
            Some(rng) if p > 0.0 => Ok(dropout(x, p, &mut *rng.borrow_mut())?),
            _ => Ok(x),
        }
    }

    /// Multiplicative joint keep-mask `[1, B, N, 1]`, or `None` when masking is off.
    fn joint_mask<F: Scalar>(&self, b: usize, n: usize) -> Option<Tensor<F>> {
        let rng = self.rng.as_ref().filter(|_| self.joint_mask_prob > 0.0)?;
        let mut rng = rng.borrow_mut();
        let data = (0..b * n).map(|_| if rng.gen::<f64>() < self.joint_mask_prob { F::zero() } else { F::one() }).collect();
        Some(Tensor::new(&[1, b, n, 1], data).expect("mask shape"))
    }
}

/// Encoder inputs: root features `[T, B, 1, 12]` and other joints `[T, B, N-1, 9]`.
#[derive(Clone, Copy, Debug)]
pub struct EncoderInput<'g, F> {
    pub root: Var<'g, F>,
    pub joints: Var<'g, F>,
}

/// Raw per-joint features of a batch of windows from one skeleton.
#[derive(Clone, Debug)]
pub struct MotionFeatures<F> {
    pub root: Tensor<F>,
    pub joints: Tensor<F>,
}

impl<F: Scalar> MotionFeatures<F> {
    pub fn frames(&self) -> usize {
        self.root.shape()[0]
    }

    pub fn batch(&self) -> usize {
        self.root.shape()[1]
    }

    pub fn bind<'g>(&self, ctx: &Ctx<'g, '_, F>) -> EncoderInput<'g, F> {
        EncoderInput { root: ctx.constant(self.root.clone()), joints: ctx.constant(self.joints.clone()) }
    }
}

/// Uniform(0, 1) decoder seeds with the same layout as [`MotionFeatures`].
pub fn decoder_noise<F: Scalar, R: Rng + ?Sized>(t: usize, b: usize, n: usize, rng: &mut R) -> MotionFeatures<F> {
    MotionFeatures {
        root: Tensor::uniform(&[t, b, 1, ROOT_FEATURES], 0.0, 1.0, rng),
        joints: Tensor::uniform(&[t, b, n - 1, JOINT_FEATURES], 0.0, 1.0, rng),
    }
}

/// Decoder outputs. Root positions are in units of the source root height.
#[derive(Clone, Copy, Debug)]
pub struct Decoded<'g, F> {
    /// `[T, B, 3]`
    pub root_pos: Var<'g, F>,
    /// `[T, B, 6]`
    pub root_rot: Var<'g, F>,
    /// `[T, B, N-1, 6]`
    pub joint_rot: Var<'g, F>,
    /// `[T, B, N, D]` before the output heads.
    pub raw: Var<'g, F>,
}

struct AttnBlock {
    norm: LayerNorm,
    attn: MultiHeadAttention,
}

impl AttnBlock {
    fn new<F: Scalar>(store: &mut ParamStore<F>, name: &str, dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(store, &format!("{name}_norm"), dim)?,
            attn: MultiHeadAttention::new(store, name, dim, heads, rng)?,
        })
    }
}

/// Self-attention over `[B, T, S, D]` with residual, masking padded slots as keys.
fn self_attention<'g, F: Scalar>(
    ctx: &Ctx<'g, '_, F>,
    blocks: &[AttnBlock],
    layout: AttentionLayout,
    x: Var<'g, F>,
    slot_valid: Option<&[bool]>,
    mode: &Mode,
    p: f64,
) -> Result<Var<'g, F>> {
    let s = x.shape();
    let (b, t, n, d) = (s[0], s[1], s[2], s[3]);
    match layout {
        AttentionLayout::Full => {
            let blk = &blocks[0];
            let y = blk.norm.forward(ctx, x)?.reshape(&[b, t * n, d])?;
            let mask: Option<Vec<bool>> = slot_valid.map(|m| m.iter().copied().cycle().take(b * t * n).collect());
            let o = blk.attn.forward(ctx, y, y, y, mask.as_deref())?.reshape(&[b, t, n, d])?;
            Ok(x.add(mode.dropout(o, p)?)?)
        }
        AttentionLayout::Factorized => {
            let (space, time) = (&blocks[0], &blocks[1]);
            let y = space.norm.forward(ctx, x)?.reshape(&[b * t, n, d])?;
            let mask: Option<Vec<bool>> = slot_valid.map(|m| m.iter().copied().cycle().take(b * t * n).collect());
            let o = space.attn.forward(ctx, y, y, y, mask.as_deref())?.reshape(&[b, t, n, d])?;
            let x = x.add(mode.dropout(o, p)?)?;
            // Padded slots only see themselves along time, so no mask is needed here.
            let y = time.norm.forward(ctx, x)?.permute(&[0, 2, 1, 3])?.reshape(&[b * n, t, d])?;
            let o = time.attn.forward(ctx, y, y, y, None)?.reshape(&[b, n, t, d])?.permute(&[0, 2, 1, 3])?;
            Ok(x.add(mode.dropout(o, p)?)?)
        }
    }
}

fn feed_forward<'g, F: Scalar>(
    ctx: &Ctx<'g, '_, F>,
    norm: &LayerNorm,
    ff: &FeedForward,
    x: Var<'g, F>,
    mode: &Mode,
    p: f64,
) -> Result<Var<'g, F>> {
    let o = ff.forward(ctx, norm.forward(ctx, x)?)?;
    Ok(x.add(mode.dropout(o, p)?)?)
}

struct EncoderLayer {
    attn: Vec<AttnBlock>,
    ff_norm: LayerNorm,
    ff: FeedForward,
}

struct DecoderLayer {
    attn: Vec<AttnBlock>,
    cross: AttnBlock,
    ff_norm: LayerNorm,
    ff: FeedForward,
}

/// Joint-level embedding sources shared by encoder and decoder layouts.
struct Embedder {
    tpose: Mlp,
    name_proj: Option<Linear>,
}

impl Embedder {
    fn new<F: Scalar>(store: &mut ParamStore<F>, prefix: &str, dim: usize, name_dim: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            tpose: Mlp::new(store, &format!("{prefix}.tpose"), 3, dim, dim, rng)?,
            name_proj: if name_dim == dim {
                None
            } else {
                Some(Linear::new(store, &format!("{prefix}.name_proj"), name_dim, dim, false, rng)?)
            },
        })
    }

    /// Name plus T-pose embedding per joint, `[N, D]`.
    fn joints<'g, F: Scalar>(&self, ctx: &Ctx<'g, '_, F>, info: &SkeletonInfo) -> Result<Var<'g, F>> {
        let n = info.joint_count();
        let tp = ctx.constant(Tensor::from_f64(&[n, 3], &info.tpose_in)?);
        let tp = self.tpose.forward(ctx, tp)?;
        let nd = info.names[0].len();
        let flat: Vec<f64> = info.names.iter().flatten().copied().collect();
        let mut names = ctx.constant(Tensor::from_f64(&[n, nd], &flat)?);
        if let Some(p) = &self.name_proj {
            names = p.forward(ctx, names)?;
        }
        Ok(tp.add(names)?)
    }

    /// Embeddings for the padded slots of one part, `[P, D]`.
    fn part<'g, F: Scalar>(joints: Var<'g, F>, slots: &[Option<usize>], dim: usize) -> Result<Var<'g, F>> {
        let pe = joints.graph().constant(sinusoidal_pe(slots.len(), dim)?);
        Ok(joints.gather(0, slots)?.add(pe)?)
    }
}

fn part_mask_rows(mask: &[bool], rows: usize) -> Vec<bool> {
    mask.iter().copied().cycle().take(rows * mask.len()).collect()
}

pub struct Model {
    config: ModelConfig,
    names: Box<dyn NameEmbeddingProvider>,
    // encoder
    enc_root_in: Mlp,
    enc_joint_in: Mlp,
    enc_embed: Embedder,
    queries: Vec<ParamId>,
    absent: Vec<ParamId>,
    enc_layers: Vec<EncoderLayer>,
    enc_norm: Option<LayerNorm>,
    // decoder
    dec_root_in: Mlp,
    dec_joint_in: Mlp,
    dec_embed: Embedder,
    kv: Mlp,
    dec_layers: Vec<DecoderLayer>,
    dec_norm: LayerNorm,
    root_head: Linear,
    joint_head: Linear,
}

impl std::fmt::Debug for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model").field("config", &self.config).finish_non_exhaustive()
    }
}

impl Model {
    /// Register all parameters in `store` in a fixed order and return the model.
    pub fn new<F: Scalar>(config: ModelConfig, store: &mut ParamStore<F>, seed: u64) -> Result<Self> {
        config.validate()?;
        let names = config.name_spec().build()?;
        let rng = &mut ChaCha8Rng::seed_from_u64(seed);
        let e = &config.encoder;
        let d = e.dim;
        let nd = names.dim();
        let attn_blocks = |store: &mut ParamStore<F>, prefix: &str, layout, heads, rng: &mut ChaCha8Rng| -> Result<Vec<AttnBlock>> {
            match layout {
                AttentionLayout::Full => Ok(vec![AttnBlock::new(store, &format!("{prefix}.attn"), d, heads, rng)?]),
                AttentionLayout::Factorized => Ok(vec![
                    AttnBlock::new(store, &format!("{prefix}.space_attn"), d, heads, rng)?,
                    AttnBlock::new(store, &format!("{prefix}.time_attn"), d, heads, rng)?,
                ]),
            }
        };

        let enc_root_in = Mlp::new(store, "encoder.root_in", ROOT_FEATURES, d, d, rng)?;
        let enc_joint_in = Mlp::new(store, "encoder.joint_in", JOINT_FEATURES, d, d, rng)?;
        let enc_embed = Embedder::new(store, "encoder", d, nd, rng)?;
        let mut queries = Vec::new();
        let mut absent = Vec::new();
        for part in Part::ALL {
            let q = Tensor::uniform(&[e.queries, d], 0.0, 1.0, rng);
            queries.push(store.add(format!("encoder.queries.{}", part.name()), q)?);
        }
        let bound = 1.0 / (d as f64).sqrt();
        for part in Part::ALL {
            let a = Tensor::uniform(&[d], -bound, bound, rng);
            absent.push(store.add(format!("encoder.absent.{}", part.name()), a)?);
        }
        let mut enc_layers = Vec::new();
        for i in 0..e.temporal_layers {
            let p = format!("encoder.layers.{i}");
            enc_layers.push(EncoderLayer {
                attn: attn_blocks(store, &p, e.attention, e.heads, rng)?,
                ff_norm: LayerNorm::new(store, &format!("{p}.ff_norm"), d)?,
                ff: FeedForward::new(store, &format!("{p}.ff"), d, e.ff_mult, rng)?,
            });
        }
        let enc_norm = if e.temporal_layers > 0 { Some(LayerNorm::new(store, "encoder.final_norm", d)?) } else { None };

        let dc = &config.decoder;
        let dec_root_in = Mlp::new(store, "decoder.root_in", ROOT_FEATURES, d, d, rng)?;
        let dec_joint_in = Mlp::new(store, "decoder.joint_in", JOINT_FEATURES, d, d, rng)?;
        let dec_embed = Embedder::new(store, "decoder", d, nd, rng)?;
        let kv = Mlp::new(store, "decoder.kv", d, d, 2 * d, rng)?;
        let mut dec_layers = Vec::new();
        for i in 0..dc.layers {
            let p = format!("decoder.layers.{i}");
            dec_layers.push(DecoderLayer {
                attn: attn_blocks(store, &p, dc.attention, dc.heads, rng)?,
                cross: AttnBlock::new(store, &format!("{p}.cross_attn"), d, dc.heads, rng)?,
                ff_norm: LayerNorm::new(store, &format!("{p}.ff_norm"), d)?,
                ff: FeedForward::new(store, &format!("{p}.ff"), d, dc.ff_mult, rng)?,
            });
        }
        let dec_norm = LayerNorm::new(store, "decoder.final_norm", d)?;
        let root_head = Linear::new(store, "decoder.root_head", d, ROOT_FEATURES, true, rng)?;
        let joint_head = Linear::new(store, "decoder.joint_head", d, JOINT_FEATURES, true, rng)?;
        Ok(Self {
            config,
            names,
            enc_root_in,
            enc_joint_in,
            enc_embed,
            queries,
            absent,
            enc_layers,
            enc_norm,
            dec_root_in,
            dec_joint_in,
            dec_embed,
            kv,
            dec_layers,
            dec_norm,
            root_head,
            joint_head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn name_provider(&self) -> &dyn NameEmbeddingProvider {
        self.names.as_ref()
    }

    /// The T-pose projection of the encoder, exposed for inspection.
    pub fn encoder_tpose_mlp(&self) -> &Mlp {
        &self.enc_embed.tpose
    }

    /// Grouping, T-pose and name vectors for a skeleton under this model's options.
    pub fn prepare(&self, skeleton: &Skeleton) -> Result<SkeletonInfo> {
        if skeleton.len() < 2 {
            return Err(Error::InvalidSkeleton("at least two joints are required".into()));
        }
        if skeleton.root_index() != 0 {
            return Err(Error::InvalidSkeleton("the root must be joint 0".into()));
        }
        let mut grouping = classify_joints(skeleton, &self.config.keywords)?;
        if !self.config.share_joints {
            grouping = grouping.disjoint();
        }
        if self.config.encoder.strict_groups {
            if let Some(p) = Part::ALL.iter().find(|p| grouping.group(**p).is_empty()) {
                return Err(Error::EmptyGroup(p.name()));
            }
        }
        let tpose = compute_tpose(skeleton);
        if !(tpose.character_height > 0.0) {
            return Err(Error::ZeroHeight(tpose.character_height));
        }
        if !(tpose.root_height > 0.0) {
            return Err(Error::ZeroRootHeight(tpose.root_height));
        }
        Ok(SkeletonInfo {
            names: skeleton.joints().iter().map(|j| self.names.embed(&j.name)).collect(),
            tpose_in: tpose_inputs(skeleton).iter().flat_map(|p| [p.x, p.y, p.z]).collect(),
            parents: skeleton.parents(),
            offsets: skeleton.offsets(),
            skeleton: skeleton.clone(),
            tpose,
            grouping,
        })
    }

    /// `H: [T, B, 6m, D]`.
    pub fn encode<'g, F: Scalar>(
        &self,
        ctx: &Ctx<'g, '_, F>,
        info: &SkeletonInfo,
        input: EncoderInput<'g, F>,
        padded: [usize; 6],
        mode: &Mode,
    ) -> Result<Var<'g, F>> {
        let e = &self.config.encoder;
        let d = e.dim;
        let n = info.joint_count();
        let rs = input.root.shape();
        let (t, b) = (rs[0], rs[1]);
        if rs != [t, b, 1, ROOT_FEATURES] || input.joints.shape() != [t, b, n - 1, JOINT_FEATURES] {
            return Err(Error::ShapeMismatch(format!("encoder input {:?} and {:?} for {n} joints", rs, input.joints.shape())));
        }
        let root = self.enc_root_in.forward(ctx, input.root)?;
        let joints = self.enc_joint_in.forward(ctx, input.joints)?;
        let mut x = Var::concat(&[root, joints], 2)?;
        if let Some(mask) = mode.joint_mask(b, n) {
            x = x.mul(ctx.constant(mask))?;
        }
        let emb = self.enc_embed.joints(ctx, info)?;
        let mut pooled = Vec::with_capacity(6);
        for part in Part::ALL {
            let len = info.grouping.group(part).len();
            if len == 0 {
                if e.strict_groups {
                    return Err(Error::EmptyGroup(part.name()));
                }
                let zeros = ctx.constant(Tensor::zeros(&[t, b, e.queries, d]));
                pooled.push(zeros.add(ctx.p(self.absent[part.index()]))?);
                continue;
            }
            let p = padded[part.index()].max(len);
            let slots = info.grouping.slots(part, p);
            let tokens = x.gather(2, &slots)?.add(Embedder::part(emb, &slots, d)?)?;
            let valid = part_mask_rows(&info.grouping.mask(part, p), t * b);
            let z = attention_pool(tokens.reshape(&[t * b, p, d])?, ctx.p(self.queries[part.index()]), Some(&valid))?;
            pooled.push(z.reshape(&[t, b, e.queries, d])?);
        }
        let z = Var::concat(&pooled, 2)?;
        let pe = ctx.constant(sinusoidal_pe(t, d)?.reshape(&[t, 1, 1, d])?);
        let z = z.add(pe)?;
        if self.enc_layers.is_empty() {
            return Ok(z);
        }
        let mut h = z.permute(&[1, 0, 2, 3])?;
        for layer in &self.enc_layers {
            h = self_attention(ctx, &layer.attn, e.attention, h, None, mode, e.dropout)?;
            h = feed_forward(ctx, &layer.ff_norm, &layer.ff, h, mode, e.dropout)?;
        }
        let h = self.enc_norm.as_ref().expect("final norm with layers").forward(ctx, h)?;
        Ok(h.permute(&[1, 0, 2, 3])?)
    }

    /// Decode `H` onto the skeleton described by `info`, starting from `noise`.
    pub fn decode<'g, F: Scalar>(
        &self,
        ctx: &Ctx<'g, '_, F>,
        h: Var<'g, F>,
        info: &SkeletonInfo,
        noise: &MotionFeatures<F>,
        padded: [usize; 6],
        mode: &Mode,
    ) -> Result<Decoded<'g, F>> {
        let dc = &self.config.decoder;
        let d = dc.dim;
        let n = info.joint_count();
        let hs = h.shape();
        if hs.len() != 4 || hs[2] != self.config.tokens() || hs[3] != d {
            return Err(Error::ConfigMismatch(format!(
                "representation of shape {hs:?} does not match a decoder of width {d} with {} tokens",
                self.config.tokens()
            )));
        }
        let (t, b) = (hs[0], hs[1]);
        if noise.root.shape() != [t, b, 1, ROOT_FEATURES] || noise.joints.shape() != [t, b, n - 1, JOINT_FEATURES] {
            return Err(Error::ShapeMismatch(format!("decoder noise {:?} for T={t}, B={b}, N={n}", noise.root.shape())));
        }
        let root = self.dec_root_in.forward(ctx, ctx.constant(noise.root.clone()))?;
        let joints = self.dec_joint_in.forward(ctx, ctx.constant(noise.joints.clone()))?;
        let y = Var::concat(&[root, joints], 2)?;
        let emb = self.dec_embed.joints(ctx, info)?;

        let mut parts = Vec::new();
        let mut slot_valid = Vec::new();
        let mut offset = [0usize; 6];
        let mut total = 0;
        for part in Part::ALL {
            let len = info.grouping.group(part).len();
            offset[part.index()] = total;
            if len == 0 {
                continue;
            }
            let p = padded[part.index()].max(len);
            let slots = info.grouping.slots(part, p);
            parts.push(y.gather(2, &slots)?.add(Embedder::part(emb, &slots, d)?)?);
            slot_valid.extend(info.grouping.mask(part, p));
            total += p;
        }
        let mut x = Var::concat(&parts, 2)?.permute(&[1, 0, 2, 3])?;

        let m = self.config.tokens();
        let kv = self.kv.forward(ctx, h)?.permute(&[1, 0, 2, 3])?;
        let k_in = kv.slice(3, 0, d)?;
        let v_in = kv.slice(3, d, d)?;
        for layer in &self.dec_layers {
            x = self_attention(ctx, &layer.attn, dc.attention, x, Some(&slot_valid), mode, dc.dropout)?;
            let q = layer.cross.norm.forward(ctx, x)?;
            let o = match dc.attention {
                AttentionLayout::Full => layer.cross.attn.forward(
                    ctx,
                    q.reshape(&[b, t * total, d])?,
                    k_in.reshape(&[b, t * m, d])?,
                    v_in.reshape(&[b, t * m, d])?,
                    None,
                )?,
                AttentionLayout::Factorized => layer.cross.attn.forward(
                    ctx,
                    q.reshape(&[b * t, total, d])?,
                    k_in.reshape(&[b * t, m, d])?,
                    v_in.reshape(&[b * t, m, d])?,
                    None,
                )?,
            };
            x = x.add(mode.dropout(o.reshape(&[b, t, total, d])?, dc.dropout)?)?;
            x = feed_forward(ctx, &layer.ff_norm, &layer.ff, x, mode, dc.dropout)?;
        }
        let x = self.dec_norm.forward(ctx, x)?.permute(&[1, 0, 2, 3])?;
        let index: Vec<Option<usize>> =
            info.grouping.decode_sources().into_iter().map(|(part, k)| Some(offset[part.index()] + k)).collect();
        let raw = x.gather(2, &index)?;
        let root_out = self.root_head.forward(ctx, raw.slice(2, 0, 1)?)?.reshape(&[t, b, ROOT_FEATURES])?;
        let joint_out = self.joint_head.forward(ctx, raw.slice(2, 1, n - 1)?)?;
        Ok(Decoded { root_pos: root_out.slice(2, 0, 3)?, root_rot: root_out.slice(2, 3, 6)?, joint_rot: joint_out.slice(3, 3, 6)?, raw })
    }
}

/// Orthonormalized 6D from rotation matrices `[..., 3, 3]`: the first two columns.
fn matrix_to_6d<'g, F: Scalar>(m: Var<'g, F>) -> Result<Var<'g, F>> {
    let s = m.shape();
    let r = s.len();
    let mut out = s[..r - 2].to_vec();
    out.push(6);
    Ok(m.transpose(r - 2, r - 1)?.slice(r - 2, 0, 2)?.reshape(&out)?)
}

/// Encoder features of a decoded motion, built differentiably.
///
/// Root positions stay in root-height units; joint positions come from forward
/// kinematics on the target skeleton and are divided by its character height.
pub fn cycle_input<'g, F: Scalar>(
    decoded: &Decoded<'g, F>,
    info: &SkeletonInfo,
    fps: f64,
    use_positions: bool,
) -> Result<EncoderInput<'g, F>> {
    let g = decoded.root_pos.graph();
    let s = decoded.root_pos.shape();
    let (t, b) = (s[0], s[1]);
    let n = info.joint_count();
    let root_m = decoded.root_rot.rot6d_to_matrix()?;
    let joint_m = decoded.joint_rot.rot6d_to_matrix()?;
    let p = decoded.root_pos;
    let zeros = g.constant(Tensor::zeros(&[1, b, 3]));
    let vel = if t > 1 {
        let diff = p.slice(0, 1, t - 1)?.sub(p.slice(0, 0, t - 1)?)?.scale(fps);
        Var::concat(&[zeros, diff], 0)?
    } else {
        zeros
    };
    let root = Var::concat(&[p, matrix_to_6d(root_m)?, vel], 2)?.reshape(&[t, b, 1, ROOT_FEATURES])?;

    let pos = if use_positions {
        let all = Var::concat(&[root_m.reshape(&[t, b, 1, 3, 3])?, joint_m], 2)?.reshape(&[t * b, n, 3, 3])?;
        let origin = g.constant(Tensor::zeros(&[t * b, 3]));
        all.forward_kinematics(origin, &info.parents, &info.offsets)?
            .slice(1, 1, n - 1)?
            .reshape(&[t, b, n - 1, 3])?
            .scale(1.0 / info.tpose.character_height)
    } else {
        g.constant(Tensor::zeros(&[t, b, n - 1, 3]))
    };
    let joints = Var::concat(&[pos, matrix_to_6d(joint_m)?], 3)?;
    Ok(EncoderInput { root, joints })
}

/// Encoder features of motion windows, all from `info`'s skeleton and of equal length.
pub fn motion_features<F: Scalar>(info: &SkeletonInfo, windows: &[&Motion], use_positions: bool) -> Result<MotionFeatures<F>> {
    let b = windows.len();
    let t = windows.first().map_or(0, |m| m.frame_count());
    if b == 0 || t == 0 {
        return Err(Error::InvalidMotion("no frames to encode".into()));
    }
    let n = info.joint_count();
    let hr = info.tpose.root_height;
    let hc = info.tpose.character_height;
    let mut root = vec![0.0; t * b * ROOT_FEATURES];
    let mut joints = vec![0.0; t * b * (n - 1) * JOINT_FEATURES];
    for (bi, m) in windows.iter().enumerate() {
        if m.frame_count() != t {
            return Err(Error::ShapeMismatch(format!("windows of {} and {t} frames in one batch", m.frame_count())));
        }
        let fk = forward_kinematics(&info.skeleton, m)?;
        let vel = root_velocity(m);
        for ti in 0..t {
            let r = &mut root[(ti * b + bi) * ROOT_FEATURES..][..ROOT_FEATURES];
            let p = m.root_positions()[ti] / hr;
            let six = orthonormal_6d(m.rotation(ti, 0))?;
            let v = vel[ti] / hr;
            r[..3].copy_from_slice(p.as_slice());
            r[3..9].copy_from_slice(&six);
            r[9..].copy_from_slice(v.as_slice());
            for j in 1..n {
                let f = &mut joints[((ti * b + bi) * (n - 1) + j - 1) * JOINT_FEATURES..][..JOINT_FEATURES];
                if use_positions {
                    let rel = (fk[ti][j] - fk[ti][0]) / hc;
                    f[..3].copy_from_slice(rel.as_slice());
                }
                f[3..].copy_from_slice(&orthonormal_6d(m.rotation(ti, j))?);
            }
        }
    }
    Ok(MotionFeatures {
        root: Tensor::from_f64(&[t, b, 1, ROOT_FEATURES], &root)?,
        joints: Tensor::from_f64(&[t, b, n - 1, JOINT_FEATURES], &joints)?,
    })
}

fn orthonormal_6d(r: &Rotation6D) -> Result<[f64; 6]> {
    let m = r.to_matrix()?;
    Ok([m[(0, 0)], m[(1, 0)], m[(2, 0)], m[(0, 1)], m[(1, 1)], m[(2, 1)]])
}

/// Regression targets taken from features: `(root position, root 6D, joint 6D)`.
pub fn targets<'g, F: Scalar>(input: EncoderInput<'g, F>) -> Result<(Var<'g, F>, Var<'g, F>, Var<'g, F>)> {
    let s = input.root.shape();
    let root = input.root.reshape(&[s[0], s[1], ROOT_FEATURES])?;
    Ok((root.slice(2, 0, 3)?, root.slice(2, 3, 6)?, input.joints.slice(3, 3, 6)?))
}

/// Scale a root trajectory from source root-height units to the target's.
pub fn renormalize_root(root: &[nalgebra::Vector3<f64>], source: &TPose, target: &TPose) -> Result<Vec<nalgebra::Vector3<f64>>> {
    for h in [source.root_height, target.root_height] {
        if !(h > 0.0) {
            return Err(Error::ZeroRootHeight(h));
        }
    }
    let k = target.root_height / source.root_height;
    Ok(root.iter().map(|p| p * k).collect())
}

/// Turn decoded values into motions on the decoded skeleton.
///
/// `root_scale` converts root positions from model units to world units; pass the
/// target root height to place the motion on the target character.
pub fn decoded_to_motions<F: Scalar>(decoded: &Decoded<'_, F>, info: &SkeletonInfo, root_scale: f64, fps: f64) -> Result<Vec<Motion>> {
    let rp = decoded.root_pos.value().to_f64_vec();
    let rr = decoded.root_rot.value().to_f64_vec();
    let jr = decoded.joint_rot.value().to_f64_vec();
    let s = decoded.root_pos.shape();
    let (t, b) = (s[0], s[1]);
    let n = info.joint_count();
    let mut out = Vec::with_capacity(b);
    for bi in 0..b {
        let mut root = Vec::with_capacity(t);
        let mut rots = Vec::with_capacity(t);
        for ti in 0..t {
            let k = ti * b + bi;
            root.push(nalgebra::Vector3::new(rp[k * 3], rp[k * 3 + 1], rp[k * 3 + 2]) * root_scale);
            let mut frame = Vec::with_capacity(n);
            frame.push(strict_6d(&rr[k * 6..k * 6 + 6])?);
            for j in 0..n - 1 {
                let o = (k * (n - 1) + j) * 6;
                frame.push(strict_6d(&jr[o..o + 6])?);
            }
            rots.push(frame);
        }
        out.push(Motion::new(root, rots, fps)?);
    }
    Ok(out)
}

fn strict_6d(v: &[f64]) -> Result<Rotation6D> {
    let r = Rotation6D::from_array(v.try_into().expect("six values"));
    crate::skeleton::matrix_to_rotation6d(&r.to_matrix()?)
}
