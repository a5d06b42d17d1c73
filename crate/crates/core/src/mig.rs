//! Modality-invariant representation learning.
//!
//! Three generator blocks, one per modality: a shared query built by
//! concatenating all three preliminary embeddings attends over that
//! modality's specific representation; a parallel convolutional branch
//! learns a multiplicative mask that filters modality-specific content;
//! a convolution with residual connection and layer norm refines the
//! result. A symmetric-KL penalty over the three generator outputs pulls
//! their per-row feature distributions together.

use crate::encoder::random_matrix;
use crate::param::{Bound, ParamId, ParamStore};
use crate::real::Real;
use crate::rng::Rng;
use crate::tape::{Padding, Tape, Val};
use crate::tensor::{Tensor, TensorError, TensorResult};

/// Per-modality generator parameters. The mask conv consumes the
/// feature concatenation of the aligned specific representation and the
/// shared query, hence 2d input channels.
#[derive(Clone, Debug)]
pub struct MigParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub mask_kernel: ParamId,
    pub mask_bias: ParamId,
    pub prelu_slope: ParamId,
    pub refine_kernel: ParamId,
    pub refine_bias: ParamId,
    pub ln_gain: ParamId,
    pub ln_bias: ParamId,
}

impl MigParams {
    pub fn init<F: Real>(
        store: &mut ParamStore<F>,
        prefix: &str,
        d: usize,
        refine_ksize: usize,
        rng: &mut Rng,
    ) -> Self {
        let mask_kernel = {
            let m = random_matrix::<F>(rng, 2 * d, d);
            Tensor::new(vec![1, 2 * d, d], m.data).unwrap()
        };
        let refine_kernel = {
            let bound = 1.0 / ((refine_ksize * d) as f64).sqrt();
            let data: Vec<F> = (0..refine_ksize * d * d)
                .map(|_| F::from_f64(rng.uniform_range(-bound, bound)))
                .collect();
            Tensor::new(vec![refine_ksize, d, d], data).unwrap()
        };
        MigParams {
            wq: store.register(format!("{prefix}.wq"), random_matrix(rng, d, d)),
            wk: store.register(format!("{prefix}.wk"), random_matrix(rng, d, d)),
            wv: store.register(format!("{prefix}.wv"), random_matrix(rng, d, d)),
            mask_kernel: store.register(format!("{prefix}.mask_kernel"), mask_kernel),
            mask_bias: store.register(format!("{prefix}.mask_bias"), Tensor::zeros(vec![d])),
            prelu_slope: store.register(
                format!("{prefix}.prelu_slope"),
                Tensor::new(vec![d], vec![F::from_f64(0.25); d]).unwrap(),
            ),
            refine_kernel: store.register(format!("{prefix}.refine_kernel"), refine_kernel),
            refine_bias: store.register(format!("{prefix}.refine_bias"), Tensor::zeros(vec![d])),
            ln_gain: store.register(format!("{prefix}.ln_gain"), Tensor::new(vec![d], vec![F::ONE; d]).unwrap()),
            ln_bias: store.register(format!("{prefix}.ln_bias"), Tensor::zeros(vec![d])),
        }
    }
}

#[derive(Clone, Debug)]
pub struct MirParams {
    pub v: MigParams,
    pub s: MigParams,
    pub t: MigParams,
}

impl MirParams {
    pub fn init<F: Real>(store: &mut ParamStore<F>, d: usize, refine_ksize: usize, rng: &mut Rng) -> Self {
        MirParams {
            v: MigParams::init(store, "mig.v", d, refine_ksize, rng),
            s: MigParams::init(store, "mig.s", d, refine_ksize, rng),
            t: MigParams::init(store, "mig.t", d, refine_ksize, rng),
        }
    }

    pub fn by_index(&self, i: usize) -> &MigParams {
        match i {
            0 => &self.v,
            1 => &self.s,
            _ => &self.t,
        }
    }
}

/// The shared interaction query: time concatenation of the preliminary
/// embeddings in order V, S, T.
pub fn shared_query<F: Real>(tape: &mut Tape<F>, h_v: Val, h_s: Val, h_t: Val) -> TensorResult<Val> {
    tape.concat_time(&[h_v, h_s, h_t])
}

/// Cross-modal attention with the shared query and one modality's
/// specific representation as keys and values.
pub fn mig_attend<F: Real>(
    tape: &mut Tape<F>,
    h_vst: Val,
    kv: Val,
    p: &MigParams,
    bound: &Bound,
) -> TensorResult<Val> {
    let d = tape.shape(h_vst)[1];
    let q = tape.matmul(h_vst, bound.val(p.wq))?;
    let k = tape.matmul(kv, bound.val(p.wk))?;
    let v = tape.matmul(kv, bound.val(p.wv))?;
    let scores = tape.matmul_nt(q, k)?;
    let scaled = tape.scale(scores, F::from_f64(1.0 / (d as f64).sqrt()))?;
    let probs = tape.softmax_rows(scaled)?;
    tape.matmul(probs, v)
}

pub struct MaskForward {
    pub mask: Val,
    pub masked: Val,
}

/// The mask branch. The modality's specific representation is embedded
/// into a zero canvas matching the shared query's length at that
/// modality's row offset, concatenated with the query along features
/// (2d channels), passed through a 1x1 conv, PReLU, and sigmoid, and
/// multiplied into the shared representation.
pub fn mig_mask<F: Real>(
    tape: &mut Tape<F>,
    share: Val,
    kv: Val,
    h_vst: Val,
    p: &MigParams,
    bound: &Bound,
    row_offset: usize,
) -> TensorResult<MaskForward> {
    let total = tape.shape(h_vst)[0];
    if tape.shape(share) != tape.shape(h_vst) {
        return Err(TensorError::ShapeMismatch {
            op: "mig_mask",
            detail: format!(
                "share {:?} vs query {:?}",
                tape.shape(share),
                tape.shape(h_vst)
            ),
        });
    }
    let aligned = tape.pad_rows(kv, total, row_offset)?;
    let stacked = tape.concat_feat(&[aligned, h_vst])?;
    let conv = tape.conv1d_time(stacked, bound.val(p.mask_kernel), 1, Padding::Valid)?;
    let conv = tape.add_bias(conv, bound.val(p.mask_bias))?;
    let act = tape.prelu(conv, bound.val(p.prelu_slope))?;
    let mask = tape.sigmoid(act)?;
    let masked = tape.mul_elementwise(share, mask)?;
    Ok(MaskForward { mask, masked })
}

/// Refinement: convolution over time with a residual connection to the
/// shared query, then layer norm. The declared output shape forces an
/// effective stride of one; larger strides restore length by
/// nearest-neighbor upsampling.
pub fn mig_refine<F: Real>(
    tape: &mut Tape<F>,
    h_b: Val,
    h_vst: Val,
    p: &MigParams,
    bound: &Bound,
    stride: usize,
    eps: F,
) -> TensorResult<Val> {
    let total = tape.shape(h_vst)[0];
    let conv = tape.conv1d_time(h_b, bound.val(p.refine_kernel), stride, Padding::Same)?;
    let conv = tape.add_bias(conv, bound.val(p.refine_bias))?;
    let conv = if stride > 1 {
        tape.upsample_rows(conv, stride, total)?
    } else {
        conv
    };
    let sum = tape.add(h_vst, conv)?;
    tape.layer_norm_rows(sum, bound.val(p.ln_gain), bound.val(p.ln_bias), eps)
}

pub struct MirOutput {
    /// Shared-attention output per modality.
    pub share: [Val; 3],
    /// Mask-filtered representation per modality.
    pub masked: [Val; 3],
    /// Final generator output per modality, each (k+m+n) x d.
    pub mig: [Val; 3],
    /// Time concatenation of the three generator outputs, 3(k+m+n) x d.
    pub concat: Val,
}

/// Runs the three generator blocks. `kv` holds each modality's key/value
/// source and `offsets` its row offset inside the shared query.
pub fn mir_forward<F: Real>(
    tape: &mut Tape<F>,
    h_vst: Val,
    kv: [Val; 3],
    offsets: [usize; 3],
    p: &MirParams,
    bound: &Bound,
    stride: usize,
    eps: F,
) -> TensorResult<MirOutput> {
    let mut share = Vec::with_capacity(3);
    let mut masked = Vec::with_capacity(3);
    let mut mig = Vec::with_capacity(3);
    for i in 0..3 {
        let pp = p.by_index(i);
        let sh = mig_attend(tape, h_vst, kv[i], pp, bound)?;
        let mk = mig_mask(tape, sh, kv[i], h_vst, pp, bound, offsets[i])?;
        let rf = mig_refine(tape, mk.masked, h_vst, pp, bound, stride, eps)?;
        share.push(sh);
        masked.push(mk.masked);
        mig.push(rf);
    }
    let concat = tape.concat_time(&[mig[0], mig[1], mig[2]])?;
    Ok(MirOutput {
        share: [share[0], share[1], share[2]],
        masked: [masked[0], masked[1], masked[2]],
        mig: [mig[0], mig[1], mig[2]],
        concat,
    })
}

const SKL_FLOOR: f64 = 1e-12;

/// Symmetric KL divergence between two representations: each row is
/// softmaxed over the feature axis into a distribution, the two KL
/// directions are averaged, and the result is the mean over rows.
/// Non-negative, zero iff the post-softmax rows coincide, and exactly
/// symmetric in its arguments.
pub fn skl<F: Real>(tape: &mut Tape<F>, p_rep: Val, q_rep: Val) -> TensorResult<Val> {
    if tape.shape(p_rep) != tape.shape(q_rep) {
        return Err(TensorError::ShapeMismatch {
            op: "skl",
            detail: format!("{:?} vs {:?}", tape.shape(p_rep), tape.shape(q_rep)),
        });
    }
    let t = tape.shape(p_rep)[0];
    let floor = F::from_f64(SKL_FLOOR);
    let p = tape.softmax_rows(p_rep)?;
    let q = tape.softmax_rows(q_rep)?;
    let lp = tape.log_clamped(p, floor)?;
    let lq = tape.log_clamped(q, floor)?;
    let diff_pq = tape.sub(lp, lq)?;
    let w_pq = tape.mul_elementwise(p, diff_pq)?;
    let kl_pq = tape.sum_all(w_pq)?;
    let diff_qp = tape.sub(lq, lp)?;
    let w_qp = tape.mul_elementwise(q, diff_qp)?;
    let kl_qp = tape.sum_all(w_qp)?;
    let sum = tape.add(kl_pq, kl_qp)?;
    tape.scale(sum, F::from_f64(0.5 / t as f64))
}

/// Pairwise alignment loss over the three generator outputs:
/// skl(V,S) + skl(S,T) + skl(T,V). Returns the total and the pair terms.
pub fn mic_loss<F: Real>(tape: &mut Tape<F>, migs: [Val; 3]) -> TensorResult<(Val, [Val; 3])> {
    let vs = skl(tape, migs[0], migs[1])?;
    let st = skl(tape, migs[1], migs[2])?;
    let tv = skl(tape, migs[2], migs[0])?;
    let a = tape.add(vs, st)?;
    let total = tape.add(a, tv)?;
    Ok((total, [vs, st, tv]))
}
