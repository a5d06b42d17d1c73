//! Per-modality frontend: linear projection to the unified feature
//! dimension followed by a single pre-norm transformer encoder block.

use crate::param::{Bound, ParamId, ParamStore};
use crate::real::Real;
use crate::rng::Rng;
use crate::tape::{Tape, Val};
use crate::tensor::{Tensor, TensorResult};

/// Projection from a modality's raw feature dim to the unified dim.
#[derive(Clone, Debug)]
pub struct ProjParams {
    pub w: ParamId,
    pub b: ParamId,
}

impl ProjParams {
    /// Identity-initialized when the dims already agree, fan-in uniform
    /// otherwise. Learnable in both cases.
    pub fn init<F: Real>(store: &mut ParamStore<F>, prefix: &str, d_in: usize, d: usize, rng: &mut Rng) -> Self {
        let w = if d_in == d {
            Tensor::eye(d)
        } else {
            random_matrix(rng, d_in, d)
        };
        ProjParams {
            w: store.register(format!("{prefix}.w"), w),
            b: store.register(format!("{prefix}.b"), Tensor::zeros(vec![d])),
        }
    }
}

/// One pre-norm transformer encoder block: multi-head self-attention and
/// a position-wise feed-forward, both with residual connections, plus a
/// final layer norm. With all weights zero the block reduces to a
/// layer-normed passthrough.
#[derive(Clone, Debug)]
pub struct BlockParams {
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
    pub ffn_w1: ParamId,
    pub ffn_b1: ParamId,
    pub ffn_w2: ParamId,
    pub ffn_b2: ParamId,
    pub lnf_gain: ParamId,
    pub lnf_bias: ParamId,
}

pub(crate) fn random_matrix<F: Real>(rng: &mut Rng, rows: usize, cols: usize) -> Tensor<F> {
    let bound = 1.0 / (rows as f64).sqrt();
    let data: Vec<F> = (0..rows * cols)
        .map(|_| F::from_f64(rng.uniform_range(-bound, bound)))
        .collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

fn ones<F: Real>(n: usize) -> Tensor<F> {
    Tensor::new(vec![n], vec![F::ONE; n]).unwrap()
}

impl BlockParams {
    pub fn init<F: Real>(store: &mut ParamStore<F>, prefix: &str, d: usize, ffn_mult: usize, rng: &mut Rng) -> Self {
        let h = d * ffn_mult;
        BlockParams {
            ln1_gain: store.register(format!("{prefix}.ln1_gain"), ones(d)),
            ln1_bias: store.register(format!("{prefix}.ln1_bias"), Tensor::zeros(vec![d])),
            wq: store.register(format!("{prefix}.wq"), random_matrix(rng, d, d)),
            bq: store.register(format!("{prefix}.bq"), Tensor::zeros(vec![d])),
            wk: store.register(format!("{prefix}.wk"), random_matrix(rng, d, d)),
            bk: store.register(format!("{prefix}.bk"), Tensor::zeros(vec![d])),
            wv: store.register(format!("{prefix}.wv"), random_matrix(rng, d, d)),
            bv: store.register(format!("{prefix}.bv"), Tensor::zeros(vec![d])),
            wo: store.register(format!("{prefix}.wo"), random_matrix(rng, d, d)),
            bo: store.register(format!("{prefix}.bo"), Tensor::zeros(vec![d])),
            ln2_gain: store.register(format!("{prefix}.ln2_gain"), ones(d)),
            ln2_bias: store.register(format!("{prefix}.ln2_bias"), Tensor::zeros(vec![d])),
            ffn_w1: store.register(format!("{prefix}.ffn_w1"), random_matrix(rng, d, h)),
            ffn_b1: store.register(format!("{prefix}.ffn_b1"), Tensor::zeros(vec![h])),
            ffn_w2: store.register(format!("{prefix}.ffn_w2"), random_matrix(rng, h, d)),
            ffn_b2: store.register(format!("{prefix}.ffn_b2"), Tensor::zeros(vec![d])),
            lnf_gain: store.register(format!("{prefix}.lnf_gain"), ones(d)),
            lnf_bias: store.register(format!("{prefix}.lnf_bias"), Tensor::zeros(vec![d])),
        }
    }
}

/// Per-timestep affine map into the unified dimension.
pub fn project<F: Real>(tape: &mut Tape<F>, x: Val, p: &ProjParams, bound: &Bound) -> TensorResult<Val> {
    tape.affine(x, bound.val(p.w), bound.val(p.b))
}

pub struct BlockForward {
    pub out: Val,
    /// Per-head attention probabilities, for inspection.
    pub attn_probs: Vec<Val>,
}

/// Sinusoidal position encoding, added before the block when enabled.
fn positional_table<F: Real>(t: usize, d: usize) -> Tensor<F> {
    let mut data = vec![F::ZERO; t * d];
    for pos in 0..t {
        for i in 0..d {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
            let v = if i % 2 == 0 { angle.sin() } else { angle.cos() };
            data[pos * d + i] = F::from_f64(v);
        }
    }
    Tensor::new(vec![t, d], data).unwrap()
}

/// Refines a projected sequence with one transformer encoder block.
/// Output shape equals input shape. Attention scales by the head dim;
/// with a single head that is the full feature dim.
pub fn feature_extract<F: Real>(
    tape: &mut Tape<F>,
    x: Val,
    p: &BlockParams,
    bound: &Bound,
    n_heads: usize,
    eps: F,
    positional: bool,
) -> TensorResult<BlockForward> {
    let t = tape.shape(x)[0];
    let d = tape.shape(x)[1];
    debug_assert_eq!(d % n_heads, 0, "feature dim must divide by head count");
    let head_dim = d / n_heads;

    let x = if positional {
        let pe = tape.leaf(positional_table(t, d));
        tape.add(x, pe)?
    } else {
        x
    };

    // attention sublayer (pre-norm)
    let h = tape.layer_norm_rows(x, bound.val(p.ln1_gain), bound.val(p.ln1_bias), eps)?;
    let q = tape.affine(h, bound.val(p.wq), bound.val(p.bq))?;
    let k = tape.affine(h, bound.val(p.wk), bound.val(p.bk))?;
    let v = tape.affine(h, bound.val(p.wv), bound.val(p.bv))?;
    let scale = F::from_f64(1.0 / (head_dim as f64).sqrt());
    let mut heads = Vec::with_capacity(n_heads);
    let mut attn_probs = Vec::with_capacity(n_heads);
    for hi in 0..n_heads {
        let qh = tape.slice_cols(q, hi * head_dim, head_dim)?;
        let kh = tape.slice_cols(k, hi * head_dim, head_dim)?;
        let vh = tape.slice_cols(v, hi * head_dim, head_dim)?;
        let scores = tape.matmul_nt(qh, kh)?;
        let scaled = tape.scale(scores, scale)?;
        let probs = tape.softmax_rows(scaled)?;
        attn_probs.push(probs);
        heads.push(tape.matmul(probs, vh)?);
    }
    let merged = if heads.len() == 1 {
        heads[0]
    } else {
        tape.concat_feat(&heads)?
    };
    let attn = tape.affine(merged, bound.val(p.wo), bound.val(p.bo))?;
    let x1 = tape.add(x, attn)?;

    // feed-forward sublayer (pre-norm)
    let h2 = tape.layer_norm_rows(x1, bound.val(p.ln2_gain), bound.val(p.ln2_bias), eps)?;
    let f = tape.affine(h2, bound.val(p.ffn_w1), bound.val(p.ffn_b1))?;
    let f = tape.gelu(f)?;
    let f = tape.affine(f, bound.val(p.ffn_w2), bound.val(p.ffn_b2))?;
    let x2 = tape.add(x1, f)?;

    let out = tape.layer_norm_rows(x2, bound.val(p.lnf_gain), bound.val(p.lnf_bias), eps)?;
    Ok(BlockForward { out, attn_probs })
}
