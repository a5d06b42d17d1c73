//! Emotion classification head and the joint training objective.

use crate::encoder::random_matrix;
use crate::param::{Bound, ParamId, ParamStore};
use crate::real::Real;
use crate::rng::Rng;
use crate::tape::{Tape, Val};
use crate::tensor::{Tensor, TensorResult};
use std::fmt;

/// Probability floor inside the loss logarithm; prevents -inf on a
/// saturated softmax in single precision.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct HeadParams {
    pub wc: ParamId,
    pub bc: ParamId,
}

impl HeadParams {
    pub fn init<F: Real>(store: &mut ParamStore<F>, d: usize, num_classes: usize, rng: &mut Rng) -> Self {
        HeadParams {
            wc: store.register("head.wc", random_matrix(rng, d, num_classes)),
            bc: store.register("head.bc", Tensor::zeros(vec![num_classes])),
        }
    }
}

/// Temporal average pooling over the fused representation, affine map to
/// class logits, softmax. Returns a [1, e] probability row.
pub fn classify<F: Real>(tape: &mut Tape<F>, h_fus: Val, p: &HeadParams, bound: &Bound) -> TensorResult<Val> {
    let pooled = tape.avg_pool_time(h_fus)?;
    let logits = tape.affine(pooled, bound.val(p.wc), bound.val(p.bc))?;
    tape.softmax_rows(logits)
}

/// Negative log-likelihood of the ground-truth class.
pub fn er_loss<F: Real>(tape: &mut Tape<F>, probs: Val, label: usize) -> TensorResult<Val> {
    tape.nll_from_probs(probs, label, F::from_f64(PROB_FLOOR))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectiveError {
    pub detail: String,
}

impl fmt::Display for ObjectiveError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "objective error: {}", self.detail)
    }
}

impl std::error::Error for ObjectiveError {}

/// The recorded loss terms of one epoch or batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub l_er: f64,
    pub l_mir: f64,
    pub l_total: f64,
    pub gamma: f64,
}

/// Exact linear combination of the classification and alignment terms.
/// gamma = 0 recovers pure classification training.
pub fn joint_loss(l_er: f64, l_mir: f64, gamma: f64) -> Result<LossBreakdown, ObjectiveError> {
    if gamma < 0.0 {
        return Err(ObjectiveError {
            detail: format!("gamma must be non-negative, got {gamma}"),
        });
    }
    Ok(LossBreakdown {
        l_er,
        l_mir,
        l_total: l_er + gamma * l_mir,
        gamma,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn head_setup(d: usize, e: usize, seed: u64) -> (ParamStore<f64>, HeadParams) {
        let mut store = ParamStore::new();
        let mut rng = Rng::seed_from_u64(seed);
        let p = HeadParams::init(&mut store, d, e, &mut rng);
        (store, p)
    }

    fn leaf(tape: &mut Tape<f64>, rows: usize, cols: usize, data: Vec<f64>) -> Val {
        tape.leaf(Tensor::from_rows(rows, cols, data).unwrap())
    }

    #[test]
    fn zero_head_gives_uniform_probs() {
        let (mut store, p) = head_setup(3, 4, 1);
        store.tensor_mut(p.wc).data.iter_mut().for_each(|v| *v = 0.0);
        let mut tape = Tape::new();
        let bound = store.mount(&mut tape);
        let h = leaf(&mut tape, 5, 3, vec![0.3; 15]);
        let probs = classify(&mut tape, h, &p, &bound).unwrap();
        for &v in tape.data(probs) {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn dominant_bias_wins() {
        let (mut store, p) = head_setup(3, 4, 2);
        store.tensor_mut(p.wc).data.iter_mut().for_each(|v| *v = 0.0);
        store.tensor_mut(p.bc).data.copy_from_slice(&[10.0, 0.0, 0.0, 0.0]);
        let mut tape = Tape::new();
        let bound = store.mount(&mut tape);
        let h = leaf(&mut tape, 2, 3, vec![1.0; 6]);
        let probs = classify(&mut tape, h, &p, &bound).unwrap();
        let pd = tape.data(probs);
        assert!(pd[0] > 0.999);
        assert!(pd[1] < 1e-3 && pd[2] < 1e-3 && pd[3] < 1e-3);
    }

    #[test]
    fn classify_matches_pool_affine_softmax_oracle() {
        let (store, p) = head_setup(3, 4, 3);
        let mut rng = Rng::seed_from_u64(4);
        let t = 4;
        let h_data: Vec<f64> = (0..t * 3).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        let mut tape = Tape::new();
        let bound = store.mount(&mut tape);
        let h = leaf(&mut tape, t, 3, h_data.clone());
        let probs = classify(&mut tape, h, &p, &bound).unwrap();

        // plain-loop oracle
        let mut pooled = vec![0.0; 3];
        for r in 0..t {
            for j in 0..3 {
                pooled[j] += h_data[r * 3 + j] / t as f64;
            }
        }
        let wc = &store.tensor(p.wc).data;
        let bc = &store.tensor(p.bc).data;
        let logits: Vec<f64> = (0..4)
            .map(|j| bc[j] + (0..3).map(|c| pooled[c] * wc[c * 4 + j]).sum::<f64>())
            .collect();
        let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
        let z: f64 = exps.iter().sum();
        for j in 0..4 {
            assert!((tape.data(probs)[j] - exps[j] / z).abs() < 1e-12);
        }
    }

    #[test]
    fn er_loss_uniform_is_ln_e() {
        let mut tape = Tape::<f64>::new();
        let probs = leaf(&mut tape, 1, 4, vec![0.25; 4]);
        for label in 0..4 {
            let l = er_loss(&mut tape, probs, label).unwrap();
            assert!((tape.scalar_value(l) - 4.0f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn er_loss_saturated_limit_is_zero() {
        let mut tape = Tape::<f64>::new();
        let probs = leaf(&mut tape, 1, 3, vec![1.0, 0.0, 0.0]);
        let l = er_loss(&mut tape, probs, 0).unwrap();
        assert_eq!(tape.scalar_value(l), 0.0);
    }

    #[test]
    fn er_loss_hand_case() {
        let mut tape = Tape::<f64>::new();
        let probs = leaf(&mut tape, 1, 4, vec![0.7, 0.1, 0.1, 0.1]);
        let l = er_loss(&mut tape, probs, 0).unwrap();
        // scalar log oracle
        let want = -(0.7f64.ln());
        assert!((want - 0.35667).abs() < 1e-5);
        assert!((tape.scalar_value(l) - want).abs() < 1e-12);
    }

    #[test]
    fn er_loss_label_out_of_range() {
        let mut tape = Tape::<f64>::new();
        let probs = leaf(&mut tape, 1, 3, vec![0.5, 0.3, 0.2]);
        assert!(er_loss(&mut tape, probs, 3).is_err());
    }

    #[test]
    fn joint_loss_paper_constant_case() {
        let b = joint_loss(1.0, 2.0, 0.1).unwrap();
        assert!((b.l_total - 1.2).abs() < 1e-15);
    }

    #[test]
    fn joint_loss_gamma_zero_recovers_classification() {
        let b = joint_loss(0.9, 5.0, 0.0).unwrap();
        assert_eq!(b.l_total, b.l_er);
    }

    #[test]
    fn joint_loss_zero_alignment_term() {
        for gamma in [0.0, 0.1, 2.0] {
            let b = joint_loss(0.42, 0.0, gamma).unwrap();
            assert_eq!(b.l_total, 0.42);
        }
    }

    #[test]
    fn joint_loss_rejects_negative_gamma() {
        assert!(joint_loss(1.0, 1.0, -0.1).is_err());
    }

    #[test]
    fn joint_loss_linearity_to_machine_precision() {
        let mut rng = Rng::seed_from_u64(5);
        for _ in 0..100 {
            let l_er = rng.uniform_range(0.0, 3.0);
            let l_mir = rng.uniform_range(0.0, 3.0);
            let gamma = rng.uniform_range(0.0, 1.0);
            let b = joint_loss(l_er, l_mir, gamma).unwrap();
            assert!((b.l_total - (b.l_er + b.gamma * b.l_mir)).abs() < 1e-12);
        }
    }
}
