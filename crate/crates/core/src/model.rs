//! End-to-end classifiers: the fused two-branch model and the unimodal
//! baselines.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::Sample;
use crate::encoders::{Encoder, Modality, ModelConfig};
use crate::error::{Error, Result};
use crate::fusion::{fusion_trace, linear_head, FusionModule, FusionStrategy, StrategyKind};
use crate::params::{linear_init, Bound, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Fused,
    Video,
    Skeleton,
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Architecture::Fused => "fused",
            Architecture::Video => "video",
            Architecture::Skeleton => "skeleton",
        })
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fused" => Ok(Architecture::Fused),
            "video" => Ok(Architecture::Video),
            "skeleton" => Ok(Architecture::Skeleton),
            _ => Err(Error::Parse(format!("unknown architecture {s:?}"))),
        }
    }
}

// Each component draws from its own RNG stream, so e.g. the video encoder of
// a fused model and of the video-only baseline are identical for one seed, and
// switching strategy leaves every shared weight untouched.
const STREAM_VIDEO: u64 = 1;
const STREAM_SKELETON: u64 = 2;
const STREAM_FUSION: u64 = 3;
const STREAM_STRATEGY: u64 = 4;
const STREAM_HEAD: u64 = 5;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

#[derive(Clone, Debug)]
pub struct UnimodalHead {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Debug)]
pub struct Classifier {
    pub config: ModelConfig,
    pub arch: Architecture,
    pub store: ParamStore,
    pub video: Option<Encoder>,
    pub skeleton: Option<Encoder>,
    pub fusion: Option<(FusionModule, FusionStrategy)>,
    pub head: Option<UnimodalHead>,
}

impl Classifier {
    /// `strategy` is ignored for unimodal architectures.
    pub fn new(
        config: &ModelConfig,
        arch: Architecture,
        strategy: StrategyKind,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let video = matches!(arch, Architecture::Fused | Architecture::Video)
            .then(|| {
                Encoder::init(
                    &mut store,
                    Modality::Video,
                    config,
                    &mut stream(seed, STREAM_VIDEO),
                )
            })
            .transpose()?;
        let skeleton = matches!(arch, Architecture::Fused | Architecture::Skeleton)
            .then(|| {
                Encoder::init(
                    &mut store,
                    Modality::Skeleton,
                    config,
                    &mut stream(seed, STREAM_SKELETON),
                )
            })
            .transpose()?;
        let (fusion, head) = if arch == Architecture::Fused {
            let block_cfg = config.block_config(config.fusion_bidirectional);
            let mut module = FusionModule::init(
                &mut store,
                &block_cfg,
                config.num_classes,
                &mut stream(seed, STREAM_FUSION),
            )?;
            module.embed_cls = config.fusion_embed_cls;
            let strat = FusionStrategy::init(
                strategy,
                &mut store,
                &block_cfg,
                &mut stream(seed, STREAM_STRATEGY),
            )?;
            (Some((module, strat)), None)
        } else {
            let mut rng = stream(seed, STREAM_HEAD);
            let w = store.add(
                "head/w",
                linear_init(config.dim, config.num_classes, &mut rng),
            );
            let b = store.add("head/b", Tensor::zeros(&[config.num_classes]));
            (None, Some(UnimodalHead { w, b }))
        };
        Ok(Self {
            config: config.clone(),
            arch,
            store,
            video,
            skeleton,
            fusion,
            head,
        })
    }

    pub fn strategy(&self) -> Option<StrategyKind> {
        self.fusion.as_ref().map(|(_, s)| s.kind())
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    /// `[K]` logits for one sample, recorded on `p`'s tape.
    pub fn logits<'t>(&self, tape: &'t Tape, p: &Bound<'t>, sample: &Sample) -> Result<Var<'t>> {
        let cfg = &self.config;
        let seq_v = self
            .video
            .as_ref()
            .map(|e| e.forward(tape, &sample.frames, p, cfg))
            .transpose()?;
        let seq_s = self
            .skeleton
            .as_ref()
            .map(|e| e.forward(tape, &sample.keypoints, p, cfg))
            .transpose()?;
        match (&self.fusion, &self.head, seq_v, seq_s) {
            (Some((module, strategy)), _, Some(v), Some(s)) => {
                Ok(fusion_trace(&v, &s, module, strategy, p)?.logits)
            }
            (None, Some(head), Some(seq), None) | (None, Some(head), None, Some(seq)) => {
                linear_head(seq.cls()?, p[head.w], p[head.b])
            }
            _ => unreachable!("classifier components follow the architecture"),
        }
    }

    pub fn loss<'t>(&self, tape: &'t Tape, p: &Bound<'t>, sample: &Sample) -> Result<Var<'t>> {
        self.logits(tape, p, sample)?.cross_entropy(sample.label)
    }

    /// Forward pass without gradient tracking.
    pub fn predict_logits(&self, sample: &Sample) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let p = self.store.bind_frozen(&tape);
        Ok(self.logits(&tape, &p, sample)?.value().data().to_vec())
    }

    /// Loss value and one gradient vector per parameter, in store order.
    pub fn loss_and_grads(&self, sample: &Sample) -> Result<(f64, Vec<Vec<f64>>)> {
        let tape = Tape::new();
        let p = self.store.bind(&tape);
        let loss = self.loss(&tape, &p, sample)?;
        let value = loss.item();
        let grads = tape.backward(loss)?;
        Ok((
            value,
            p.vars().iter().map(|&v| grads.get_or_zeros(v)).collect(),
        ))
    }
}
