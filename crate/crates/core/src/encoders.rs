//! The video and skeleton branches.
//!
//! Both branches embed their input into `[L, C]` tokens, insert a learned CLS
//! token, add a learned positional table and run `depth` SSM blocks.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{linear_init, Bound, ParamId, ParamStore};
use crate::ssm::{mamba_block_forward, OutputInit, SsmBlockConfig, SsmBlockParams};
use crate::tensor::Tensor;

/// Two hands of 21 joints with (x, y, z) each.
pub const HAND_JOINTS: usize = 21;
pub const SKELETON_FEATURES: usize = 2 * HAND_JOINTS * 3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClsPosition {
    #[default]
    Front,
    /// Index `L / 2` of the `L` embedded tokens.
    Middle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Video,
    Skeleton,
}

impl Modality {
    pub fn prefix(self) -> &'static str {
        match self {
            Modality::Video => "video",
            Modality::Skeleton => "skeleton",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub variant: String,
    pub depth: usize,
    pub dim: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub patch_size: usize,
    pub skeleton_features: usize,
    pub num_classes: usize,
    pub d_state: usize,
    pub expand: usize,
    pub d_conv: usize,
    /// Bidirectional scan in the branch blocks.
    pub bidirectional: bool,
    /// Bidirectional scan in the fusion (and context) block.
    pub fusion_bidirectional: bool,
    /// Also add the modality embeddings to the branch CLS tokens before mixing.
    pub fusion_embed_cls: bool,
    pub cls_position: ClsPosition,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl ModelConfig {
    fn base(variant: &str, depth: usize, dim: usize) -> Self {
        Self {
            variant: variant.to_string(),
            depth,
            dim,
            frames: 8,
            height: 224,
            width: 224,
            patch_size: 16,
            skeleton_features: SKELETON_FEATURES,
            // action classes of the two-hand benchmark
            num_classes: 36,
            d_state: 16,
            expand: 2,
            d_conv: 4,
            bidirectional: true,
            fusion_bidirectional: true,
            fusion_embed_cls: false,
            cls_position: ClsPosition::Front,
        }
    }

    /// Depth 24, width 198, 8 frames at 224² with 16-pixel patches.
    pub fn tiny() -> Self {
        Self::base("tiny", 24, 198)
    }

    /// Depth 24, width 386, 8 frames at 224² with 16-pixel patches.
    pub fn small() -> Self {
        Self::base("small", 24, 386)
    }

    /// Depth 4, width 64, 8 frames at 32² with 8-pixel patches, 4 classes.
    pub fn toy() -> Self {
        Self {
            height: 32,
            width: 32,
            patch_size: 8,
            num_classes: 4,
            ..Self::base("toy", 4, 64)
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "tiny" => Some(Self::tiny()),
            "small" => Some(Self::small()),
            "toy" => Some(Self::toy()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.frames == 0 {
            return bad("frames must be >= 1".into());
        }
        if self.patch_size == 0
            || !self.height.is_multiple_of(self.patch_size)
            || !self.width.is_multiple_of(self.patch_size)
        {
            return bad(format!(
                "{}x{} frames are not divisible into {}-pixel patches",
                self.height, self.width, self.patch_size
            ));
        }
        if self.height == 0 || self.width == 0 {
            return bad("empty frames".into());
        }
        if self.dim == 0 || self.num_classes == 0 || self.skeleton_features == 0 {
            return bad("dim, num_classes and skeleton_features must be >= 1".into());
        }
        self.block_config(self.bidirectional).validate()
    }

    pub fn patches_per_frame(&self) -> usize {
        (self.height / self.patch_size) * (self.width / self.patch_size)
    }

    /// `T · (H/p) · (W/p)`, excluding CLS.
    pub fn video_tokens(&self) -> usize {
        self.frames * self.patches_per_frame()
    }

    /// One token per frame, excluding CLS.
    pub fn skeleton_tokens(&self) -> usize {
        self.frames
    }

    pub fn patch_features(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    pub fn block_config(&self, bidirectional: bool) -> SsmBlockConfig {
        SsmBlockConfig {
            d_model: self.dim,
            d_state: self.d_state,
            expand: self.expand,
            d_conv: self.d_conv,
            bidirectional,
        }
    }

    pub fn cls_index(&self, tokens: usize) -> usize {
        match self.cls_position {
            ClsPosition::Front => 0,
            ClsPosition::Middle => tokens / 2,
        }
    }
}

/// Splits `[T, H, W, 3]` frames into non-overlapping `p×p×3` patches.
///
/// Rows are frame-major then raster order; each row is the patch flattened as
/// `(dy, dx, channel)`.
pub fn patchify_frames(frames: &Tensor, patch: usize) -> Result<Tensor> {
    let &[t, h, w, ch] = frames.shape() else {
        return Err(Error::shape(
            "patchify_video",
            format!("expected [T,H,W,3], got {:?}", frames.shape()),
        ));
    };
    if ch != 3 || patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::shape(
            "patchify_video",
            format!("frames {:?} with patch size {patch}", frames.shape()),
        ));
    }
    let (gh, gw) = (h / patch, w / patch);
    let feat = patch * patch * 3;
    let src = frames.data();
    let mut out = Vec::with_capacity(t * gh * gw * feat);
    for f in 0..t {
        for py in 0..gh {
            for px in 0..gw {
                for dy in 0..patch {
                    let y = py * patch + dy;
                    let start = ((f * h + y) * w + px * patch) * 3;
                    out.extend_from_slice(&src[start..start + patch * 3]);
                }
            }
        }
    }
    Tensor::new(&[t * gh * gw, feat], out)
}

/// Token sequence emitted by a branch, CLS included.
#[derive(Clone, Copy, Debug)]
pub struct TokenSequence<'t> {
    pub tokens: Var<'t>,
    pub cls_index: usize,
    pub modality: Modality,
}

impl<'t> TokenSequence<'t> {
    pub fn len(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> usize {
        self.tokens.shape()[1]
    }

    pub fn cls(&self) -> Result<Var<'t>> {
        self.tokens.row(self.cls_index)
    }

    /// All rows except CLS, in order.
    pub fn body(&self) -> Result<Var<'t>> {
        let n = self.len();
        let before = self.tokens.slice_rows(0, self.cls_index)?;
        let after = self.tokens.slice_rows(self.cls_index + 1, n)?;
        before.concat_rows(after)
    }

    pub fn cls_token(&self) -> Result<ClsToken> {
        Ok(ClsToken {
            value: self.cls()?.value(),
            origin: ClsOrigin::Learned,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClsOrigin {
    Learned,
    Mixed,
}

/// A detached CLS vector, for inspection.
#[derive(Clone, Debug, PartialEq)]
pub struct ClsToken {
    pub value: Tensor,
    pub origin: ClsOrigin,
}

/// Inserts CLS, adds positional embeddings and applies the block stack.
#[allow(clippy::too_many_arguments)]
pub fn encoder_forward<'t>(
    tokens: Var<'t>,
    cls: Var<'t>,
    pos_embed: Var<'t>,
    blocks: &[SsmBlockParams],
    block_cfg: &SsmBlockConfig,
    cls_index: usize,
    modality: Modality,
    p: &Bound<'t>,
) -> Result<TokenSequence<'t>> {
    let shape = tokens.shape();
    let c = block_cfg.d_model;
    if shape.len() != 2 || shape[1] != c || cls.shape() != [c] {
        return Err(Error::shape(
            "encoder_forward",
            format!("tokens {shape:?}, cls {:?}, width {c}", cls.shape()),
        ));
    }
    let l = shape[0];
    if pos_embed.shape() != [l + 1, c] || cls_index > l {
        return Err(Error::shape(
            "encoder_forward",
            format!(
                "pos_embed {:?} for {l} tokens, cls at {cls_index}",
                pos_embed.shape()
            ),
        ));
    }
    let cls_row = cls.reshape(&[1, c])?;
    let seq = tokens
        .slice_rows(0, cls_index)?
        .concat_rows(cls_row)?
        .concat_rows(tokens.slice_rows(cls_index, l)?)?;
    let mut x = seq.add(pos_embed)?;
    for block in blocks {
        x = mamba_block_forward(x, p, block, block_cfg)?;
    }
    Ok(TokenSequence {
        tokens: x,
        cls_index,
        modality,
    })
}

/// One branch: input embedding, CLS, positional table and block stack.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub modality: Modality,
    pub embed_w: ParamId,
    pub embed_b: ParamId,
    pub cls: ParamId,
    pub pos_embed: ParamId,
    pub blocks: Vec<SsmBlockParams>,
    pub block_cfg: SsmBlockConfig,
    pub tokens: usize,
    pub cls_index: usize,
}

impl Encoder {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        modality: Modality,
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let prefix = modality.prefix();
        let (in_features, tokens) = match modality {
            Modality::Video => (cfg.patch_features(), cfg.video_tokens()),
            Modality::Skeleton => (cfg.skeleton_features, cfg.skeleton_tokens()),
        };
        let c = cfg.dim;
        let embed_w = store.add(
            format!("{prefix}/embed_w"),
            linear_init(in_features, c, rng),
        );
        let embed_b = store.add(format!("{prefix}/embed_b"), Tensor::zeros(&[c]));
        let cls = store.add(format!("{prefix}/cls"), Tensor::randn(&[c], 0.02, rng));
        let pos_embed = store.add(
            format!("{prefix}/pos_embed"),
            Tensor::zeros(&[tokens + 1, c]),
        );
        let block_cfg = cfg.block_config(cfg.bidirectional);
        let blocks = (0..cfg.depth)
            .map(|i| {
                SsmBlockParams::init(
                    store,
                    &format!("{prefix}/blocks/{i}"),
                    &block_cfg,
                    OutputInit::Random,
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            modality,
            embed_w,
            embed_b,
            cls,
            pos_embed,
            blocks,
            block_cfg,
            tokens,
            cls_index: cfg.cls_index(tokens),
        })
    }

    /// Linear token embedding of already-flattened rows (`[L, features]`).
    pub fn embed<'t>(&self, rows: Var<'t>, p: &Bound<'t>) -> Result<Var<'t>> {
        rows.matmul(p[self.embed_w])?.add_rows(p[self.embed_b])
    }

    pub fn forward_embedded<'t>(
        &self,
        tokens: Var<'t>,
        p: &Bound<'t>,
    ) -> Result<TokenSequence<'t>> {
        encoder_forward(
            tokens,
            p[self.cls],
            p[self.pos_embed],
            &self.blocks,
            &self.block_cfg,
            self.cls_index,
            self.modality,
            p,
        )
    }

    /// Raw input (`[T,H,W,3]` frames or `[T,F]` keypoints) to token sequence.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        input: &Tensor,
        p: &Bound<'t>,
        cfg: &ModelConfig,
    ) -> Result<TokenSequence<'t>> {
        let tokens = match self.modality {
            Modality::Video => patchify_video(tape, input, self, cfg, p)?,
            Modality::Skeleton => embed_skeleton(tape, input, self, cfg, p)?,
        };
        self.forward_embedded(tokens, p)
    }
}

/// `[T,H,W,3]` frames to `[T·(H/p)·(W/p), C]` patch tokens.
pub fn patchify_video<'t>(
    tape: &'t Tape,
    frames: &Tensor,
    encoder: &Encoder,
    cfg: &ModelConfig,
    p: &Bound<'t>,
) -> Result<Var<'t>> {
    let expected = [cfg.frames, cfg.height, cfg.width, 3];
    if frames.shape() != expected {
        return Err(Error::shape(
            "patchify_video",
            format!("frames {:?}, config expects {expected:?}", frames.shape()),
        ));
    }
    let rows = patchify_frames(frames, cfg.patch_size)?;
    encoder.embed(tape.constant(rows), p)
}

/// `[T, F]` keypoints to `[T, C]` tokens, one per frame.
pub fn embed_skeleton<'t>(
    tape: &'t Tape,
    keypoints: &Tensor,
    encoder: &Encoder,
    cfg: &ModelConfig,
    p: &Bound<'t>,
) -> Result<Var<'t>> {
    let expected = [cfg.frames, cfg.skeleton_features];
    if keypoints.shape() != expected {
        return Err(Error::shape(
            "embed_skeleton",
            format!(
                "keypoints {:?}, config expects {expected:?}",
                keypoints.shape()
            ),
        ));
    }
    encoder.embed(tape.constant(keypoints.clone()), p)
}
