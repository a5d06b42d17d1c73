//! Training harness: batched Adam optimization of the joint objective,
//! per-epoch metrics, evaluation, and the alignment report.

use crate::adam::{AdamConfig, AdamState};
use crate::head::er_loss;
use crate::mig::mic_loss;
use crate::model::{forward_dataset_sample, init_params, ConfigError, ModelConfig, ModelParams};
use crate::param::ParamStore;
use crate::real::Real;
use crate::rng::Rng;
use crate::synth::{Dataset, FeatMat, Sample};
use crate::tape::{Tape, Val};
use crate::tensor::TensorError;
use std::fmt;

#[derive(Clone, Debug)]
pub struct TrainConfig {
    /// Desk-scale default; 1e-5 matches large pretrained-encoder setups
    /// and is kept as a documented preset in the CLI.
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Drops the alignment term from the objective (gamma treated as 0).
    pub no_mic: bool,
    /// Train on the batch sum of losses instead of the mean.
    pub loss_sum: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 32,
            epochs: 100,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 7,
            no_mic: false,
            loss_sum: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.lr <= 0.0 {
            return Err(ConfigError {
                detail: format!("learning rate must be positive, got {}", self.lr),
            });
        }
        if self.batch_size == 0 {
            return Err(ConfigError {
                detail: "batch_size must be >= 1".into(),
            });
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(ConfigError {
                detail: "Adam betas must lie in [0, 1)".into(),
            });
        }
        if self.adam_eps <= 0.0 {
            return Err(ConfigError {
                detail: "Adam eps must be positive".into(),
            });
        }
        Ok(())
    }

    /// The gamma actually used by a run.
    pub fn effective_gamma(&self, model: &ModelConfig) -> f64 {
        if self.no_mic || !model.use_mir {
            0.0
        } else {
            model.gamma
        }
    }
}

/// One epoch's logged metrics. `l_total` is always derived from the
/// logged terms, so the linearity of the objective holds on the record
/// itself.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub l_er: f64,
    pub l_mir: f64,
    pub l_total: f64,
    pub wa: f64,
    pub ua: f64,
    pub skl_vs: f64,
    pub skl_st: f64,
    pub skl_tv: f64,
}

impl MetricsRecord {
    pub fn to_json_line(&self) -> String {
        format!(
            "{{\"epoch\":{},\"l_er\":{},\"l_mir\":{},\"l_total\":{},\"wa\":{},\"ua\":{},\"skl_vs\":{},\"skl_st\":{},\"skl_tv\":{}}}",
            self.epoch,
            self.l_er,
            self.l_mir,
            self.l_total,
            self.wa,
            self.ua,
            self.skl_vs,
            self.skl_st,
            self.skl_tv
        )
    }
}

#[derive(Debug)]
pub enum TrainError {
    Config(ConfigError),
    Tensor(TensorError),
    /// The forward pass produced a non-finite value.
    NanLoss { epoch: usize, batch: usize },
    /// Backward produced a non-finite gradient.
    NanGrad {
        param: String,
        epoch: usize,
        batch: usize,
    },
    Data { detail: String },
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::Config(e) => write!(f, "{e}"),
            TrainError::Tensor(e) => write!(f, "tensor error: {e}"),
            TrainError::NanLoss { epoch, batch } => {
                write!(f, "non-finite loss at epoch {epoch}, batch {batch}")
            }
            TrainError::NanGrad { param, epoch, batch } => {
                write!(f, "non-finite gradient in {param} at epoch {epoch}, batch {batch}")
            }
            TrainError::Data { detail } => write!(f, "data error: {detail}"),
        }
    }
}

impl std::error::Error for TrainError {}

impl From<ConfigError> for TrainError {
    fn from(e: ConfigError) -> Self {
        TrainError::Config(e)
    }
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Tensor(e)
    }
}

pub struct TrainOutcome<F: Real> {
    pub store: ParamStore<F>,
    pub params: ModelParams,
    pub history: Vec<MetricsRecord>,
}

fn check_dataset(dataset: &Dataset, cfg: &ModelConfig) -> Result<(), TrainError> {
    if dataset.num_classes as usize != cfg.num_classes {
        return Err(TrainError::Data {
            detail: format!(
                "dataset has {} classes, model configured for {}",
                dataset.num_classes, cfg.num_classes
            ),
        });
    }
    let Some(dims) = dataset.raw_dims() else {
        return Ok(());
    };
    if dims != cfg.raw_dims {
        return Err(TrainError::Data {
            detail: format!("dataset raw dims {dims:?} vs model {:?}", cfg.raw_dims),
        });
    }
    let lens = dataset.seq_lens().unwrap();
    for (i, s) in dataset.samples.iter().enumerate() {
        let got = [s.v.rows, s.s.rows, s.t.rows];
        let gotd = [s.v.cols, s.s.cols, s.t.cols];
        if got != lens || gotd != dims {
            return Err(TrainError::Data {
                detail: format!("sample {i} breaks the shared-shape batch invariant"),
            });
        }
        if s.label >= dataset.num_classes {
            return Err(TrainError::Data {
                detail: format!("sample {i} label {} out of range", s.label),
            });
        }
    }
    Ok(())
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Accumulates per-epoch statistics from per-sample values.
struct EpochStats {
    sum_er: f64,
    sum_mir: f64,
    n: usize,
    correct_per_class: Vec<usize>,
    count_per_class: Vec<usize>,
    skl_sums: [f64; 3],
}

impl EpochStats {
    fn new(num_classes: usize) -> Self {
        EpochStats {
            sum_er: 0.0,
            sum_mir: 0.0,
            n: 0,
            correct_per_class: vec![0; num_classes],
            count_per_class: vec![0; num_classes],
            skl_sums: [0.0; 3],
        }
    }

    fn record(&mut self, label: usize, predicted: usize, er: f64, mir: f64, skl: [f64; 3]) {
        self.sum_er += er;
        self.sum_mir += mir;
        self.n += 1;
        self.count_per_class[label] += 1;
        if predicted == label {
            self.correct_per_class[label] += 1;
        }
        for i in 0..3 {
            self.skl_sums[i] += skl[i];
        }
    }

    fn wa(&self) -> f64 {
        let correct: usize = self.correct_per_class.iter().sum();
        correct as f64 / self.n as f64
    }

    /// Unweighted mean of per-class recalls; classes absent from the
    /// data are excluded from the mean.
    fn ua(&self) -> f64 {
        let mut total = 0.0;
        let mut present = 0usize;
        for (correct, count) in self.correct_per_class.iter().zip(&self.count_per_class) {
            if *count > 0 {
                total += *correct as f64 / *count as f64;
                present += 1;
            }
        }
        total / present as f64
    }

    fn into_record(self, epoch: usize, gamma: f64) -> MetricsRecord {
        let inv = 1.0 / self.n as f64;
        let l_er = self.sum_er * inv;
        let l_mir = self.sum_mir * inv;
        MetricsRecord {
            epoch,
            l_er,
            l_mir,
            l_total: l_er + gamma * l_mir,
            wa: self.wa(),
            ua: self.ua(),
            skl_vs: self.skl_sums[0] * inv,
            skl_st: self.skl_sums[1] * inv,
            skl_tv: self.skl_sums[2] * inv,
        }
    }
}

/// Mean or sum of a list of scalar nodes.
fn combine_scalars<F: Real>(tape: &mut Tape<F>, nodes: &[Val], sum: bool) -> Result<Val, TensorError> {
    let stacked = tape.concat_time(nodes)?;
    if sum {
        tape.sum_all(stacked)
    } else {
        tape.mean_all(stacked)
    }
}

pub fn train<F: Real>(
    dataset: &Dataset,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<TrainOutcome<F>, TrainError> {
    train_with(dataset, model_cfg, train_cfg, |_| {})
}

/// Training loop with an epoch callback for metric streaming.
/// Deterministic given (seed, configs, dataset): parameter init and the
/// per-epoch shuffle derive from counters, never from global state.
pub fn train_with<F: Real>(
    dataset: &Dataset,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&MetricsRecord),
) -> Result<TrainOutcome<F>, TrainError> {
    model_cfg.validate()?;
    train_cfg.validate()?;
    check_dataset(dataset, model_cfg)?;
    if dataset.is_empty() && train_cfg.epochs > 0 {
        return Err(TrainError::Data {
            detail: "cannot train on an empty dataset".into(),
        });
    }

    let (mut store, params) = init_params::<F>(model_cfg, train_cfg.seed)?;
    let mut adam = AdamState::new(&store);
    let adam_cfg = AdamConfig {
        lr: train_cfg.lr,
        beta1: train_cfg.beta1,
        beta2: train_cfg.beta2,
        eps: train_cfg.adam_eps,
    };
    let gamma = train_cfg.effective_gamma(model_cfg);
    let gamma_f = F::from_f64(gamma);
    let n = dataset.len();
    let mut history = Vec::with_capacity(train_cfg.epochs);

    for epoch in 0..train_cfg.epochs {
        let perm = Rng::derive(train_cfg.seed, 0x4550_0000 + epoch as u64).permutation(n);
        let mut stats = EpochStats::new(model_cfg.num_classes);
        for (batch_idx, chunk) in perm.chunks(train_cfg.batch_size).enumerate() {
            let step = |e: TensorError| match e {
                TensorError::NonFinite { .. } => TrainError::NanLoss {
                    epoch,
                    batch: batch_idx,
                },
                other => TrainError::Tensor(other),
            };
            let mut tape = Tape::<F>::new();
            let bound = store.mount(&mut tape);
            let mut er_nodes = Vec::with_capacity(chunk.len());
            let mut mic_nodes = Vec::with_capacity(chunk.len());
            for &si in chunk {
                let sample = &dataset.samples[si];
                let fwd = forward_dataset_sample(&mut tape, &params, &bound, model_cfg, sample)
                    .map_err(step)?;
                let er = er_loss(&mut tape, fwd.probs, sample.label as usize).map_err(step)?;
                er_nodes.push(er);
                let (mir_val, skl_vals) = match &fwd.mir {
                    Some(mir) => {
                        let (total, pairs) = mic_loss(&mut tape, mir.mig).map_err(step)?;
                        mic_nodes.push(total);
                        (
                            tape.scalar_value(total).to_f64(),
                            [
                                tape.scalar_value(pairs[0]).to_f64(),
                                tape.scalar_value(pairs[1]).to_f64(),
                                tape.scalar_value(pairs[2]).to_f64(),
                            ],
                        )
                    }
                    None => (0.0, [0.0; 3]),
                };
                let probs: Vec<f64> = tape.data(fwd.probs).iter().map(|v| v.to_f64()).collect();
                stats.record(
                    sample.label as usize,
                    argmax(&probs),
                    tape.scalar_value(er).to_f64(),
                    mir_val,
                    skl_vals,
                );
            }
            let batch_er = combine_scalars(&mut tape, &er_nodes, train_cfg.loss_sum).map_err(step)?;
            let loss = if mic_nodes.is_empty() {
                batch_er
            } else {
                let batch_mir =
                    combine_scalars(&mut tape, &mic_nodes, train_cfg.loss_sum).map_err(step)?;
                let weighted = tape.scale(batch_mir, gamma_f).map_err(step)?;
                tape.add(batch_er, weighted).map_err(step)?
            };
            tape.backward(loss).map_err(step)?;
            adam
                .step(&mut store, &tape, &bound, &adam_cfg)
                .map_err(|e| TrainError::NanGrad {
                    param: e.param,
                    epoch,
                    batch: batch_idx,
                })?;
        }
        let record = stats.into_record(epoch, gamma);
        on_epoch(&record);
        history.push(record);
    }

    Ok(TrainOutcome {
        store,
        params,
        history,
    })
}

/// Forward-only metrics over a dataset.
pub fn evaluate<F: Real>(
    store: &ParamStore<F>,
    params: &ModelParams,
    model_cfg: &ModelConfig,
    gamma: f64,
    dataset: &Dataset,
    epoch: usize,
) -> Result<MetricsRecord, TrainError> {
    check_dataset(dataset, model_cfg)?;
    if dataset.is_empty() {
        return Err(TrainError::Data {
            detail: "cannot evaluate an empty dataset".into(),
        });
    }
    let mut stats = EpochStats::new(model_cfg.num_classes);
    for sample in &dataset.samples {
        let mut tape = Tape::<F>::new();
        let bound = store.mount(&mut tape);
        let fwd = forward_dataset_sample(&mut tape, params, &bound, model_cfg, sample)?;
        let er = er_loss(&mut tape, fwd.probs, sample.label as usize)?;
        let (mir_val, skl_vals) = match &fwd.mir {
            Some(mir) => {
                let (total, pairs) = mic_loss(&mut tape, mir.mig)?;
                (
                    tape.scalar_value(total).to_f64(),
                    [
                        tape.scalar_value(pairs[0]).to_f64(),
                        tape.scalar_value(pairs[1]).to_f64(),
                        tape.scalar_value(pairs[2]).to_f64(),
                    ],
                )
            }
            None => (0.0, [0.0; 3]),
        };
        let probs: Vec<f64> = tape.data(fwd.probs).iter().map(|v| v.to_f64()).collect();
        stats.record(
            sample.label as usize,
            argmax(&probs),
            tape.scalar_value(er).to_f64(),
            mir_val,
            skl_vals,
        );
    }
    Ok(stats.into_record(epoch, gamma))
}

/// Predicted class indices over a dataset.
pub fn predict<F: Real>(
    store: &ParamStore<F>,
    params: &ModelParams,
    model_cfg: &ModelConfig,
    dataset: &Dataset,
) -> Result<Vec<usize>, TrainError> {
    let mut out = Vec::with_capacity(dataset.len());
    for sample in &dataset.samples {
        let mut tape = Tape::<F>::new();
        let bound = store.mount(&mut tape);
        let fwd = forward_dataset_sample(&mut tape, params, &bound, model_cfg, sample)?;
        let probs: Vec<f64> = tape.data(fwd.probs).iter().map(|v| v.to_f64()).collect();
        out.push(argmax(&probs));
    }
    Ok(out)
}

/// Mean pairwise symmetric-KL over generator outputs, plus pooled
/// generator embeddings per sample and modality for external plotting.
pub struct AlignmentReport {
    /// Mean SKL for the pairs (V,S), (S,T), (T,V).
    pub skl: [f64; 3],
    /// One record per input sample; each modality slot holds a single
    /// pooled 1 x d embedding row.
    pub embeddings: Dataset,
}

pub fn alignment_report<F: Real>(
    store: &ParamStore<F>,
    params: &ModelParams,
    model_cfg: &ModelConfig,
    dataset: &Dataset,
) -> Result<AlignmentReport, TrainError> {
    if !model_cfg.use_mir {
        return Err(TrainError::Config(ConfigError {
            detail: "alignment report requires the invariant path (MIR) to be enabled".into(),
        }));
    }
    check_dataset(dataset, model_cfg)?;
    if dataset.is_empty() {
        return Err(TrainError::Data {
            detail: "cannot report alignment on an empty dataset".into(),
        });
    }
    let mut sums = [0.0f64; 3];
    let mut samples = Vec::with_capacity(dataset.len());
    for sample in &dataset.samples {
        let mut tape = Tape::<F>::new();
        let bound = store.mount(&mut tape);
        let fwd = forward_dataset_sample(&mut tape, params, &bound, model_cfg, sample)?;
        let mir = fwd.mir.as_ref().expect("use_mir is enabled");
        let (_, pairs) = mic_loss(&mut tape, mir.mig)?;
        for i in 0..3 {
            sums[i] += tape.scalar_value(pairs[i]).to_f64();
        }
        let mut pooled = Vec::with_capacity(3);
        for m in 0..3 {
            let pool = tape.avg_pool_time(mir.mig[m])?;
            let row: Vec<f32> = tape.data(pool).iter().map(|v| v.to_f64() as f32).collect();
            pooled.push(FeatMat {
                rows: 1,
                cols: row.len(),
                data: row,
            });
        }
        let t_row = pooled.pop().unwrap();
        let s_row = pooled.pop().unwrap();
        let v_row = pooled.pop().unwrap();
        samples.push(Sample {
            label: sample.label,
            v: v_row,
            s: s_row,
            t: t_row,
        });
    }
    let inv = 1.0 / dataset.len() as f64;
    Ok(AlignmentReport {
        skl: [sums[0] * inv, sums[1] * inv, sums[2] * inv],
        embeddings: Dataset {
            num_classes: dataset.num_classes,
            samples,
        },
    })
}
