//! Cross-modal fusion: modality embeddings, mixed-CLS construction, a single
//! fusion SSM block and the classification head.
//!
//! The mixed CLS token is built from the two branch CLS tokens by one of four
//! strategies:
//!
//! | strategy | mixed CLS                                  | extra params |
//! |----------|--------------------------------------------|--------------|
//! | naive    | fresh learned vector                       | `C`          |
//! | average  | `(cls_v + cls_s) / 2`                      | 0            |
//! | weighted | `σ(ω)·cls_v + (1 − σ(ω))·cls_s`            | 1            |
//! | context  | same, `α = σ(mean(SSM(T_v ⊕ T_s)))`        | one block    |

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{concat_tokens, Var};
use crate::encoders::TokenSequence;
use crate::error::{Error, Result};
use crate::params::{linear_init, Bound, ParamId, ParamStore};
use crate::ssm::{mamba_block_forward, OutputInit, SsmBlockConfig, SsmBlockParams};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategyKind {
    Naive,
    Average,
    Weighted,
    Context,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 4] = [
        StrategyKind::Naive,
        StrategyKind::Average,
        StrategyKind::Weighted,
        StrategyKind::Context,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyKind::Naive => "naive",
            StrategyKind::Average => "average",
            StrategyKind::Weighted => "weighted",
            StrategyKind::Context => "context",
        }
    }

    /// Scalars this strategy adds on top of `average`, in closed form.
    pub fn extra_parameters(self, block: &SsmBlockConfig) -> usize {
        match self {
            StrategyKind::Naive => block.d_model,
            StrategyKind::Average => 0,
            StrategyKind::Weighted => 1,
            StrategyKind::Context => block.param_count(),
        }
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidConfig(format!("unknown strategy {s:?}")))
    }
}

/// A strategy together with the parameters it owns.
#[derive(Clone, Debug, PartialEq)]
pub enum FusionStrategy {
    Naive {
        cls: ParamId,
    },
    Average,
    Weighted {
        omega: ParamId,
    },
    Context {
        block: SsmBlockParams,
        cfg: SsmBlockConfig,
    },
}

impl FusionStrategy {
    /// Registers the strategy's parameters under `fusion/strategy/`.
    ///
    /// `omega` starts at 0 (α = 0.5); the context block starts with a zero
    /// output projection, so its first α is `σ(mean(T_v ⊕ T_s))`.
    pub fn init<R: Rng + ?Sized>(
        kind: StrategyKind,
        store: &mut ParamStore,
        block_cfg: &SsmBlockConfig,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(match kind {
            StrategyKind::Naive => FusionStrategy::Naive {
                cls: store.add(
                    "fusion/strategy/cls",
                    Tensor::randn(&[block_cfg.d_model], 0.02, rng),
                ),
            },
            StrategyKind::Average => FusionStrategy::Average,
            StrategyKind::Weighted => FusionStrategy::Weighted {
                omega: store.add("fusion/strategy/omega", Tensor::scalar(0.0)?),
            },
            StrategyKind::Context => FusionStrategy::Context {
                block: SsmBlockParams::init(
                    store,
                    "fusion/strategy/context",
                    block_cfg,
                    OutputInit::Zero,
                    rng,
                )?,
                cfg: block_cfg.clone(),
            },
        })
    }

    pub fn kind(&self) -> StrategyKind {
        match self {
            FusionStrategy::Naive { .. } => StrategyKind::Naive,
            FusionStrategy::Average => StrategyKind::Average,
            FusionStrategy::Weighted { .. } => StrategyKind::Weighted,
            FusionStrategy::Context { .. } => StrategyKind::Context,
        }
    }

    /// Enumerated scalar count of the strategy-owned tensors.
    pub fn num_scalars(&self, store: &ParamStore) -> usize {
        match self {
            FusionStrategy::Naive { cls } => store.get(*cls).numel(),
            FusionStrategy::Average => 0,
            FusionStrategy::Weighted { omega } => store.get(*omega).numel(),
            FusionStrategy::Context { block, .. } => block.num_scalars(store),
        }
    }
}

/// Modality embeddings, the single fusion block and the head.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionModule {
    pub modality_embed_video: ParamId,
    pub modality_embed_skel: ParamId,
    pub block: SsmBlockParams,
    pub block_cfg: SsmBlockConfig,
    pub head_w: ParamId,
    pub head_b: ParamId,
    /// Also add each modality embedding to its branch CLS before mixing.
    pub embed_cls: bool,
}

impl FusionModule {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        block_cfg: &SsmBlockConfig,
        num_classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let c = block_cfg.d_model;
        let modality_embed_video =
            store.add("fusion/modality_video", Tensor::randn(&[c], 0.02, rng));
        let modality_embed_skel =
            store.add("fusion/modality_skeleton", Tensor::randn(&[c], 0.02, rng));
        let block =
            SsmBlockParams::init(store, "fusion/block", block_cfg, OutputInit::Random, rng)?;
        let head_w = store.add("fusion/head_w", linear_init(c, num_classes, rng));
        let head_b = store.add("fusion/head_b", Tensor::zeros(&[num_classes]));
        Ok(Self {
            modality_embed_video,
            modality_embed_skel,
            block,
            block_cfg: block_cfg.clone(),
            head_w,
            head_b,
            embed_cls: false,
        })
    }
}

/// `[C]` vector through a `C → K` linear head.
pub fn linear_head<'t>(x: Var<'t>, w: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    let c = x.shape().iter().product();
    let k = w.shape()[1];
    x.reshape(&[1, c])?.matmul(w)?.reshape(&[k])?.add(b)
}

/// `α = σ(mean(SSM(t_video ⊕ t_skel)))` over every element of the block output.
pub fn compute_context_alpha<'t>(
    t_video: Var<'t>,
    t_skel: Var<'t>,
    block: &SsmBlockParams,
    cfg: &SsmBlockConfig,
    p: &Bound<'t>,
) -> Result<Var<'t>> {
    let joined = concat_tokens(t_video, t_skel)?;
    if joined.shape()[0] == 0 {
        return Err(Error::EmptySequence("compute_context_alpha"));
    }
    mamba_block_forward(joined, p, block, cfg)?
        .mean_all()?
        .sigmoid()
}

fn convex<'t>(alpha: Var<'t>, cls_v: Var<'t>, cls_s: Var<'t>) -> Result<Var<'t>> {
    let one = alpha.tape().constant(Tensor::scalar(1.0)?);
    let rest = one.sub(alpha)?;
    alpha.mul(cls_v)?.add(rest.mul(cls_s)?)
}

/// Builds the mixed CLS vector. `t_video`/`t_skel` are only read by `context`.
pub fn mix_cls<'t>(
    strategy: &FusionStrategy,
    p: &Bound<'t>,
    cls_v: Var<'t>,
    cls_s: Var<'t>,
    t_video: Var<'t>,
    t_skel: Var<'t>,
) -> Result<Var<'t>> {
    let (sv, ss) = (cls_v.shape(), cls_s.shape());
    if sv.len() != 1 || sv != ss {
        return Err(Error::shape(
            "mix_cls",
            format!("cls_video {sv:?}, cls_skeleton {ss:?}"),
        ));
    }
    match strategy {
        FusionStrategy::Naive { cls } => {
            let fresh = p[*cls];
            if fresh.shape() != sv {
                return Err(Error::shape(
                    "mix_cls",
                    format!("naive cls {:?} vs {sv:?}", fresh.shape()),
                ));
            }
            Ok(fresh)
        }
        FusionStrategy::Average => cls_v.scale(0.5)?.add(cls_s.scale(0.5)?),
        FusionStrategy::Weighted { omega } => convex(p[*omega].sigmoid()?, cls_v, cls_s),
        FusionStrategy::Context { block, cfg } => {
            let alpha = compute_context_alpha(t_video, t_skel, block, cfg, p)?;
            convex(alpha, cls_v, cls_s)
        }
    }
}

/// Intermediate values of one fusion pass, exposed for inspection.
pub struct FusionTrace<'t> {
    pub logits: Var<'t>,
    pub mixed_cls: Var<'t>,
    pub fused: Var<'t>,
}

/// Strip CLS rows, add modality embeddings, mix CLS, run the fusion block
/// over `[CLS_mix] ⊕ rows_video ⊕ rows_skel` and classify the CLS row.
pub fn fusion_forward<'t>(
    seq_video: &TokenSequence<'t>,
    seq_skel: &TokenSequence<'t>,
    module: &FusionModule,
    strategy: &FusionStrategy,
    p: &Bound<'t>,
) -> Result<Var<'t>> {
    Ok(fusion_trace(seq_video, seq_skel, module, strategy, p)?.logits)
}

pub fn fusion_trace<'t>(
    seq_video: &TokenSequence<'t>,
    seq_skel: &TokenSequence<'t>,
    module: &FusionModule,
    strategy: &FusionStrategy,
    p: &Bound<'t>,
) -> Result<FusionTrace<'t>> {
    let (wv, ws) = (seq_video.width(), seq_skel.width());
    if wv != ws {
        return Err(Error::WidthMismatch {
            video: wv,
            skeleton: ws,
        });
    }
    if wv != module.block_cfg.d_model {
        return Err(Error::shape(
            "fusion_forward",
            format!(
                "branch width {wv}, fusion width {}",
                module.block_cfg.d_model
            ),
        ));
    }
    let embed_v = p[module.modality_embed_video];
    let embed_s = p[module.modality_embed_skel];
    let rows_v = seq_video.body()?.add_rows(embed_v)?;
    let rows_s = seq_skel.body()?.add_rows(embed_s)?;
    let (mut cls_v, mut cls_s) = (seq_video.cls()?, seq_skel.cls()?);
    if module.embed_cls {
        cls_v = cls_v.add(embed_v)?;
        cls_s = cls_s.add(embed_s)?;
    }
    let mixed_cls = mix_cls(strategy, p, cls_v, cls_s, rows_v, rows_s)?;
    let seq = mixed_cls
        .reshape(&[1, wv])?
        .concat_rows(rows_v)?
        .concat_rows(rows_s)?;
    let fused = mamba_block_forward(seq, p, &module.block, &module.block_cfg)?;
    let logits = linear_head(fused.row(0)?, p[module.head_w], p[module.head_b])?;
    Ok(FusionTrace {
        logits,
        mixed_cls,
        fused,
    })
}

/// Exact trainable scalar count.
pub fn count_parameters(store: &ParamStore) -> usize {
    store.num_scalars()
}
