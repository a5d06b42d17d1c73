//! End-to-end finite-difference verification of the analytic gradients,
//! parameter group by parameter group, on a tiny double-precision model.

use crate::head::er_loss;
use crate::mig::mic_loss;
use crate::model::{forward_dataset_sample, init_params, ModelConfig, ModelParams};
use crate::param::ParamStore;
use crate::synth::{generate, Dataset, SynthSpec};
use crate::tape::Tape;
use crate::train::TrainError;

pub const GRADCHECK_THRESHOLD: f64 = 1e-4;
const FD_STEP: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GroupReport {
    pub group: String,
    pub max_rel_err: f64,
    pub entries: usize,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub threshold: f64,
    pub groups: Vec<GroupReport>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.max_rel_err < self.threshold)
    }

    pub fn worst(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max)
    }
}

/// The fixed tiny configuration: k = m = n = 2, d = 4, e = 3, with
/// deliberately unequal raw dims so the projections are exercised.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        raw_dims: [3, 4, 5],
        d: 4,
        n_heads: 4,
        ffn_mult: 4,
        num_classes: 3,
        ..ModelConfig::default()
    }
}

fn tiny_dataset() -> Result<Dataset, TrainError> {
    let spec = SynthSpec {
        n_samples: 3,
        num_classes: 3,
        seq_lens: [2, 2, 2],
        raw_dims: [3, 4, 5],
        shared_strength: 1.0,
        specific_strength: [0.5; 3],
        domain_shift: 0.3,
        noise_std: 0.2,
        seed: 42,
        class_priors: None,
    };
    generate(&spec).map_err(|e| TrainError::Data {
        detail: e.to_string(),
    })
}

fn joint_loss_value(
    store: &ParamStore<f64>,
    params: &ModelParams,
    cfg: &ModelConfig,
    ds: &Dataset,
) -> Result<f64, TrainError> {
    let (tape, _, loss) = build_joint_loss(store, params, cfg, ds)?;
    Ok(tape.scalar_value(loss))
}

fn build_joint_loss(
    store: &ParamStore<f64>,
    params: &ModelParams,
    cfg: &ModelConfig,
    ds: &Dataset,
) -> Result<(Tape<f64>, crate::param::Bound, crate::tape::Val), TrainError> {
    let mut tape = Tape::<f64>::new();
    let bound = store.mount(&mut tape);
    let mut er_nodes = Vec::new();
    let mut mic_nodes = Vec::new();
    for sample in &ds.samples {
        let fwd = forward_dataset_sample(&mut tape, params, &bound, cfg, sample)?;
        er_nodes.push(er_loss(&mut tape, fwd.probs, sample.label as usize)?);
        if let Some(mir) = &fwd.mir {
            let (total, _) = mic_loss(&mut tape, mir.mig)?;
            mic_nodes.push(total);
        }
    }
    let er_stack = tape.concat_time(&er_nodes)?;
    let er_mean = tape.mean_all(er_stack)?;
    let loss = if mic_nodes.is_empty() {
        er_mean
    } else {
        let mic_stack = tape.concat_time(&mic_nodes)?;
        let mic_mean = tape.mean_all(mic_stack)?;
        let weighted = tape.scale(mic_mean, cfg.gamma)?;
        tape.add(er_mean, weighted)?
    };
    Ok((tape, bound, loss))
}

/// Checks every parameter entry of every group against a central finite
/// difference of the joint objective. `inject_fault` corrupts one
/// analytic gradient entry before comparison; it exists so the failure
/// path itself is testable.
pub fn run_gradcheck(inject_fault: bool) -> Result<GradcheckReport, TrainError> {
    let cfg = tiny_model_config();
    let ds = tiny_dataset()?;
    let (mut store, params) = init_params::<f64>(&cfg, 1234)?;

    let (mut tape, bound, loss) = build_joint_loss(&store, &params, &cfg, &ds)?;
    tape.backward(loss)?;
    let ids: Vec<_> = store.ids().collect();
    let mut analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| store.grad_of(&tape, &bound, id).unwrap().to_vec())
        .collect();
    if inject_fault {
        analytic[0][0] += 1.0;
    }

    let mut groups: Vec<GroupReport> = Vec::new();
    for (pi, &id) in ids.iter().enumerate() {
        let group_name = store.group(id).to_string();
        let numel = store.tensor(id).numel();
        let mut worst = 0.0f64;
        for ei in 0..numel {
            let orig = store.tensor(id).data[ei];
            store.tensor_mut(id).data[ei] = orig + FD_STEP;
            let plus = joint_loss_value(&store, &params, &cfg, &ds)?;
            store.tensor_mut(id).data[ei] = orig - FD_STEP;
            let minus = joint_loss_value(&store, &params, &cfg, &ds)?;
            store.tensor_mut(id).data[ei] = orig;
            let fd = (plus - minus) / (2.0 * FD_STEP);
            let err = (analytic[pi][ei] - fd).abs() / fd.abs().max(1.0);
            worst = worst.max(err);
        }
        match groups.iter_mut().find(|g| g.group == group_name) {
            Some(g) => {
                g.max_rel_err = g.max_rel_err.max(worst);
                g.entries += numel;
            }
            None => groups.push(GroupReport {
                group: group_name,
                max_rel_err: worst,
                entries: numel,
            }),
        }
    }

    Ok(GradcheckReport {
        threshold: GRADCHECK_THRESHOLD,
        groups,
    })
}
