//! Modality-specific representation learning.
//!
//! Three gated interactive attention blocks, one per modality pair. Each
//! block runs cross-attention in both directions with independent
//! parameter sets, gates the attended representation through a learned
//! sigmoid gate, and convexly mixes it with the original sequence. The
//! per-modality results are summed across the two blocks touching that
//! modality and concatenated along time in the fixed order V, S, T.

use crate::encoder::random_matrix;
use crate::param::{Bound, ParamId, ParamStore};
use crate::real::Real;
use crate::rng::Rng;
use crate::tape::{Tape, Val};
use crate::tensor::{Tensor, TensorResult};

/// One directed parameter set: queries from A, keys/values from B, plus
/// the gate affine. Directions share nothing.
#[derive(Clone, Debug)]
pub struct GiaDirectedParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wg: ParamId,
    pub bg: ParamId,
}

impl GiaDirectedParams {
    pub fn init<F: Real>(store: &mut ParamStore<F>, prefix: &str, d: usize, rng: &mut Rng) -> Self {
        GiaDirectedParams {
            wq: store.register(format!("{prefix}.wq"), random_matrix(rng, d, d)),
            wk: store.register(format!("{prefix}.wk"), random_matrix(rng, d, d)),
            wv: store.register(format!("{prefix}.wv"), random_matrix(rng, d, d)),
            wg: store.register(format!("{prefix}.wg"), random_matrix(rng, d, d)),
            bg: store.register(format!("{prefix}.bg"), Tensor::zeros(vec![d])),
        }
    }
}

/// Both directions of one modality pair.
#[derive(Clone, Debug)]
pub struct GiaPairParams {
    pub a_from_b: GiaDirectedParams,
    pub b_from_a: GiaDirectedParams,
}

/// Parameters of the three pairwise blocks, wired V-S, S-T, T-V.
#[derive(Clone, Debug)]
pub struct MsrParams {
    pub vs: GiaPairParams,
    pub st: GiaPairParams,
    pub tv: GiaPairParams,
}

impl MsrParams {
    pub fn init<F: Real>(store: &mut ParamStore<F>, d: usize, rng: &mut Rng) -> Self {
        let pair = |store: &mut ParamStore<F>, rng: &mut Rng, block: &str, fwd: &str, rev: &str| GiaPairParams {
            a_from_b: GiaDirectedParams::init(store, &format!("gia.{block}.{fwd}"), d, rng),
            b_from_a: GiaDirectedParams::init(store, &format!("gia.{block}.{rev}"), d, rng),
        };
        MsrParams {
            vs: pair(store, rng, "vs", "v_from_s", "s_from_v"),
            st: pair(store, rng, "st", "s_from_t", "t_from_s"),
            tv: pair(store, rng, "tv", "t_from_v", "v_from_t"),
        }
    }
}

/// Attention-weighted representation of A based on B:
/// Softmax(Q_A K_B^T / sqrt(d)) V_B with row-vector projections H W.
pub fn cross_attend<F: Real>(
    tape: &mut Tape<F>,
    h_a: Val,
    h_b: Val,
    p: &GiaDirectedParams,
    bound: &Bound,
) -> TensorResult<Val> {
    let d = tape.shape(h_a)[1];
    let q = tape.matmul(h_a, bound.val(p.wq))?;
    let k = tape.matmul(h_b, bound.val(p.wk))?;
    let v = tape.matmul(h_b, bound.val(p.wv))?;
    let scores = tape.matmul_nt(q, k)?;
    let scaled = tape.scale(scores, F::from_f64(1.0 / (d as f64).sqrt()))?;
    let probs = tape.softmax_rows(scaled)?;
    tape.matmul(probs, v)
}

/// Gate over an attended representation: pool over time, normalize,
/// affine, sigmoid, then broadcast the single gate row back over time.
pub fn gate<F: Real>(
    tape: &mut Tape<F>,
    h_ab: Val,
    p: &GiaDirectedParams,
    bound: &Bound,
    eps: F,
) -> TensorResult<Val> {
    let t = tape.shape(h_ab)[0];
    let d = tape.shape(h_ab)[1];
    let pooled = tape.avg_pool_time(h_ab)?;
    // the gate norm is non-learnable: unit gain, zero bias
    let gain = tape.leaf(Tensor::new(vec![d], vec![F::ONE; d]).unwrap());
    let bias = tape.leaf(Tensor::<F>::zeros(vec![d]));
    let normed = tape.layer_norm_rows(pooled, gain, bias, eps)?;
    let pre = tape.affine(normed, bound.val(p.wg), bound.val(p.bg))?;
    let g = tape.sigmoid(pre)?;
    tape.broadcast_rows(g, t)
}

pub struct GiaDirOutput {
    pub attended: Val,
    pub gate: Val,
    pub fused: Val,
}

/// One direction of a GIA block: G ⊙ H_{A→B} + (1 − G) ⊙ H_A.
pub fn gia_direction<F: Real>(
    tape: &mut Tape<F>,
    h_a: Val,
    h_b: Val,
    p: &GiaDirectedParams,
    bound: &Bound,
    eps: F,
) -> TensorResult<GiaDirOutput> {
    let attended = cross_attend(tape, h_a, h_b, p, bound)?;
    let g = gate(tape, attended, p, bound, eps)?;
    let gated_new = tape.mul_elementwise(g, attended)?;
    let t = tape.shape(h_a)[0];
    let d = tape.shape(h_a)[1];
    let ones = tape.leaf(Tensor::new(vec![t, d], vec![F::ONE; t * d]).unwrap());
    let one_minus_g = tape.sub(ones, g)?;
    let gated_old = tape.mul_elementwise(one_minus_g, h_a)?;
    let fused = tape.add(gated_new, gated_old)?;
    Ok(GiaDirOutput {
        attended,
        gate: g,
        fused,
    })
}

/// Symmetric application over both directions of a pair.
pub fn gia_fuse<F: Real>(
    tape: &mut Tape<F>,
    h_a: Val,
    h_b: Val,
    pair: &GiaPairParams,
    bound: &Bound,
    eps: F,
) -> TensorResult<(GiaDirOutput, GiaDirOutput)> {
    let a_out = gia_direction(tape, h_a, h_b, &pair.a_from_b, bound, eps)?;
    let b_out = gia_direction(tape, h_b, h_a, &pair.b_from_a, bound, eps)?;
    Ok((a_out, b_out))
}

pub struct MsrOutput {
    /// Gated per-modality sums, order V, S, T.
    pub per_modality: [Val; 3],
    /// Time concatenation in the fixed order V, S, T.
    pub concat: Val,
}

/// Runs the three pairwise blocks and combines their outputs: each
/// modality's representation is the sum of its two block outputs.
pub fn msr_forward<F: Real>(
    tape: &mut Tape<F>,
    h_v: Val,
    h_s: Val,
    h_t: Val,
    p: &MsrParams,
    bound: &Bound,
    eps: F,
) -> TensorResult<MsrOutput> {
    let (v_from_s, s_from_v) = gia_fuse(tape, h_v, h_s, &p.vs, bound, eps)?;
    let (s_from_t, t_from_s) = gia_fuse(tape, h_s, h_t, &p.st, bound, eps)?;
    let (t_from_v, v_from_t) = gia_fuse(tape, h_t, h_v, &p.tv, bound, eps)?;
    let v_sum = tape.add(v_from_s.fused, v_from_t.fused)?;
    let s_sum = tape.add(s_from_v.fused, s_from_t.fused)?;
    let t_sum = tape.add(t_from_v.fused, t_from_s.fused)?;
    let concat = tape.concat_time(&[v_sum, s_sum, t_sum])?;
    Ok(MsrOutput {
        per_modality: [v_sum, s_sum, t_sum],
        concat,
    })
}
