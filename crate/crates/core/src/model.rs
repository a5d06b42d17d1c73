//! Full model assembly: frontend, specific and invariant fusion paths,
//! classification head, and the ablation wiring.

use crate::encoder::{feature_extract, project, BlockParams, ProjParams};
use crate::gia::{msr_forward, MsrOutput, MsrParams};
use crate::head::{classify, HeadParams};
use crate::mig::{mir_forward, shared_query, MirOutput, MirParams};
use crate::param::{Bound, ParamStore};
use crate::real::Real;
use crate::rng::Rng;
use crate::synth::Sample;
use crate::tape::{Tape, Val};
use crate::tensor::{Tensor, TensorError, TensorResult};
use std::fmt;

#[derive(Clone, Debug, PartialEq)]
pub struct ConfigError {
    pub detail: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config error: {}", self.detail)
    }
}

impl std::error::Error for ConfigError {}

/// How the modality-specific path is wired.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MsrMode {
    /// Gated interactive attention blocks (the full model).
    Full,
    /// No specific path at all: the generators consume the preliminary
    /// embeddings and the fused representation drops the specific
    /// segment.
    Drop,
    /// Gating dropped but the raw per-modality embeddings kept as the
    /// specific representations.
    RawConcat,
}

/// Structural configuration. Ablation switches live here so that the
/// forward pass is a pure function of (config, params, input).
#[derive(Clone, Debug)]
pub struct ModelConfig {
    /// Raw feature dims per modality, order V, S, T.
    pub raw_dims: [usize; 3],
    /// Unified feature dimension.
    pub d: usize,
    pub n_heads: usize,
    /// Feed-forward width as a multiple of d.
    pub ffn_mult: usize,
    pub num_classes: usize,
    /// Layer-norm epsilon.
    pub eps: f64,
    /// One frontend block shared by all modalities instead of three.
    pub share_encoder: bool,
    pub positional_encoding: bool,
    pub refine_ksize: usize,
    pub refine_stride: usize,
    pub msr_mode: MsrMode,
    pub use_mir: bool,
    /// Weight of the alignment term in the joint objective.
    pub gamma: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            raw_dims: [32, 32, 24],
            d: 64,
            n_heads: 4,
            ffn_mult: 4,
            num_classes: 4,
            eps: 1e-5,
            share_encoder: false,
            positional_encoding: false,
            refine_ksize: 3,
            refine_stride: 1,
            msr_mode: MsrMode::Full,
            use_mir: true,
            gamma: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.d == 0 || self.raw_dims.iter().any(|&d| d == 0) {
            return Err(ConfigError {
                detail: "feature dims must be >= 1".into(),
            });
        }
        if self.n_heads == 0 || self.d % self.n_heads != 0 {
            return Err(ConfigError {
                detail: format!("d = {} must divide evenly by n_heads = {}", self.d, self.n_heads),
            });
        }
        if self.num_classes < 2 {
            return Err(ConfigError {
                detail: format!("need at least 2 classes, got {}", self.num_classes),
            });
        }
        if self.ffn_mult == 0 || self.refine_ksize == 0 || self.refine_stride == 0 {
            return Err(ConfigError {
                detail: "ffn_mult, refine_ksize, refine_stride must be >= 1".into(),
            });
        }
        if self.eps <= 0.0 {
            return Err(ConfigError {
                detail: "eps must be positive".into(),
            });
        }
        if self.gamma < 0.0 {
            return Err(ConfigError {
                detail: format!("gamma must be non-negative, got {}", self.gamma),
            });
        }
        if self.msr_mode == MsrMode::Drop && !self.use_mir {
            return Err(ConfigError {
                detail: "dropping both fusion paths leaves nothing to classify".into(),
            });
        }
        Ok(())
    }

    pub fn effective_gamma(&self) -> f64 {
        if self.use_mir {
            self.gamma
        } else {
            0.0
        }
    }
}

#[derive(Clone, Debug)]
pub enum EncoderBlocks {
    PerModality(Box<[BlockParams; 3]>),
    Shared(BlockParams),
}

impl EncoderBlocks {
    fn by_index(&self, i: usize) -> &BlockParams {
        match self {
            EncoderBlocks::PerModality(b) => &b[i],
            EncoderBlocks::Shared(b) => b,
        }
    }
}

/// Typed indices of every parameter group in the store.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub proj: [ProjParams; 3],
    pub blocks: EncoderBlocks,
    pub msr: MsrParams,
    pub mir: MirParams,
    pub head: HeadParams,
}

/// Builds and initializes the full parameter set. All groups are always
/// registered, ablations only rewire the forward pass; this keeps
/// parameter files compatible across variants and makes paired-seed
/// comparisons start from identical weights.
pub fn init_params<F: Real>(cfg: &ModelConfig, seed: u64) -> Result<(ParamStore<F>, ModelParams), ConfigError> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let mut rng = Rng::derive(seed, 77);
    let proj = [
        ProjParams::init(&mut store, "encoder.v.proj", cfg.raw_dims[0], cfg.d, &mut rng),
        ProjParams::init(&mut store, "encoder.s.proj", cfg.raw_dims[1], cfg.d, &mut rng),
        ProjParams::init(&mut store, "encoder.t.proj", cfg.raw_dims[2], cfg.d, &mut rng),
    ];
    let blocks = if cfg.share_encoder {
        EncoderBlocks::Shared(BlockParams::init(&mut store, "encoder.shared.block", cfg.d, cfg.ffn_mult, &mut rng))
    } else {
        EncoderBlocks::PerModality(Box::new([
            BlockParams::init(&mut store, "encoder.v.block", cfg.d, cfg.ffn_mult, &mut rng),
            BlockParams::init(&mut store, "encoder.s.block", cfg.d, cfg.ffn_mult, &mut rng),
            BlockParams::init(&mut store, "encoder.t.block", cfg.d, cfg.ffn_mult, &mut rng),
        ]))
    };
    let msr = MsrParams::init(&mut store, cfg.d, &mut rng);
    let mir = MirParams::init(&mut store, cfg.d, cfg.refine_ksize, &mut rng);
    let head = HeadParams::init(&mut store, cfg.d, cfg.num_classes, &mut rng);
    Ok((
        store,
        ModelParams {
            proj,
            blocks,
            msr,
            mir,
            head,
        },
    ))
}

/// Everything one sample's forward pass produces.
pub struct SampleForward {
    /// Preliminary embeddings, order V, S, T.
    pub embeddings: [Val; 3],
    pub msr: Option<MsrOutput>,
    pub mir: Option<MirOutput>,
    /// The fused representation fed to the head.
    pub fused: Val,
    /// [1, e] probability row.
    pub probs: Val,
}

/// Mounts one modality's raw features onto the tape.
pub fn mount_feats<F: Real>(tape: &mut Tape<F>, feats: &crate::synth::FeatMat) -> Val {
    let data: Vec<F> = feats.data.iter().map(|&v| F::from_f64(v as f64)).collect();
    tape.leaf(Tensor::new(vec![feats.rows, feats.cols], data).unwrap())
}

/// Full forward pass for one sample. The three raw sequences must match
/// the configured raw dims.
pub fn forward_sample<F: Real>(
    tape: &mut Tape<F>,
    params: &ModelParams,
    bound: &Bound,
    cfg: &ModelConfig,
    raw: [Val; 3],
) -> TensorResult<SampleForward> {
    let eps = F::from_f64(cfg.eps);
    let mut embeddings = Vec::with_capacity(3);
    for (i, &x) in raw.iter().enumerate() {
        if tape.shape(x)[1] != cfg.raw_dims[i] {
            return Err(TensorError::ShapeMismatch {
                op: "forward_sample",
                detail: format!(
                    "modality {i} has raw dim {}, config expects {}",
                    tape.shape(x)[1],
                    cfg.raw_dims[i]
                ),
            });
        }
        let projected = project(tape, x, &params.proj[i], bound)?;
        let refined = feature_extract(
            tape,
            projected,
            params.blocks.by_index(i),
            bound,
            cfg.n_heads,
            eps,
            cfg.positional_encoding,
        )?;
        embeddings.push(refined.out);
    }
    let h = [embeddings[0], embeddings[1], embeddings[2]];
    let lens = [tape.shape(h[0])[0], tape.shape(h[1])[0], tape.shape(h[2])[0]];

    let msr = match cfg.msr_mode {
        MsrMode::Full => Some(msr_forward(tape, h[0], h[1], h[2], &params.msr, bound, eps)?),
        MsrMode::RawConcat => {
            let concat = tape.concat_time(&h)?;
            Some(MsrOutput {
                per_modality: h,
                concat,
            })
        }
        MsrMode::Drop => None,
    };

    let mir = if cfg.use_mir {
        let q = shared_query(tape, h[0], h[1], h[2])?;
        let kv = match &msr {
            Some(m) => m.per_modality,
            None => h,
        };
        let offsets = [0, lens[0], lens[0] + lens[1]];
        Some(mir_forward(
            tape,
            q,
            kv,
            offsets,
            &params.mir,
            bound,
            cfg.refine_stride,
            eps,
        )?)
    } else {
        None
    };

    let fused = match (&msr, &mir) {
        (Some(m), Some(r)) => tape.concat_time(&[m.concat, r.concat])?,
        (Some(m), None) => m.concat,
        (None, Some(r)) => r.concat,
        (None, None) => {
            return Err(TensorError::InvalidArg {
                op: "forward_sample",
                detail: "both fusion paths disabled".into(),
            })
        }
    };
    let probs = classify(tape, fused, &params.head, bound)?;
    Ok(SampleForward {
        embeddings: h,
        msr,
        mir,
        fused,
        probs,
    })
}

/// Convenience wrapper mounting a dataset sample's three sequences.
pub fn forward_dataset_sample<F: Real>(
    tape: &mut Tape<F>,
    params: &ModelParams,
    bound: &Bound,
    cfg: &ModelConfig,
    sample: &Sample,
) -> TensorResult<SampleForward> {
    let v = mount_feats(tape, &sample.v);
    let s = mount_feats(tape, &sample.s);
    let t = mount_feats(tape, &sample.t);
    forward_sample(tape, params, bound, cfg, [v, s, t])
}
