//! Synthetic tri-modal datasets with controllable signal structure.
//!
//! Each sample carries three feature sequences (video, speech, text
//! stand-ins). A per-class latent direction shared by all modalities
//! injects cross-modal signal (strength `alpha`); independent per-class
//! per-modality directions inject modality-specific signal (`beta`);
//! a fixed per-modality offset-plus-mixing map models domain shift
//! (`delta`). These three levers are what the verification suite uses
//! to exercise the specific vs. invariant fusion paths.

use crate::rng::Rng;
use std::fmt;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    V,
    S,
    T,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::V, Modality::S, Modality::T];

    pub fn index(self) -> usize {
        match self {
            Modality::V => 0,
            Modality::S => 1,
            Modality::T => 2,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Modality::V => "v",
            Modality::S => "s",
            Modality::T => "t",
        }
    }
}

/// Row-major f32 feature matrix (time x features). Stored in single
/// precision to match the on-disk format bit for bit.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatMat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl FeatMat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        FeatMat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Column means over all rows.
    pub fn mean_row(&self) -> Vec<f64> {
        let mut out = vec![0.0f64; self.cols];
        for r in 0..self.rows {
            for (j, &v) in self.row(r).iter().enumerate() {
                out[j] += v as f64;
            }
        }
        let inv = 1.0 / self.rows as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        out
    }
}

/// One modality's feature sequence.
#[derive(Clone, Debug)]
pub struct Seq {
    pub modality: Modality,
    pub feats: FeatMat,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub label: u32,
    pub v: FeatMat,
    pub s: FeatMat,
    pub t: FeatMat,
}

impl Sample {
    pub fn feats(&self, m: Modality) -> &FeatMat {
        match m {
            Modality::V => &self.v,
            Modality::S => &self.s,
            Modality::T => &self.t,
        }
    }

    /// Tagged view of one modality's sequence.
    pub fn seq(&self, m: Modality) -> Seq {
        Seq {
            modality: m,
            feats: self.feats(m).clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub num_classes: u32,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Raw feature dims per modality, read from the first sample.
    pub fn raw_dims(&self) -> Option<[usize; 3]> {
        self.samples
            .first()
            .map(|s| [s.v.cols, s.s.cols, s.t.cols])
    }

    /// Sequence lengths per modality, read from the first sample.
    pub fn seq_lens(&self) -> Option<[usize; 3]> {
        self.samples
            .first()
            .map(|s| [s.v.rows, s.s.rows, s.t.rows])
    }

    /// FNV-1a hash of the full content; used as the dataset fingerprint
    /// in run manifests.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        eat(&self.num_classes.to_le_bytes());
        eat(&(self.samples.len() as u64).to_le_bytes());
        for s in &self.samples {
            eat(&s.label.to_le_bytes());
            for m in [&s.v, &s.s, &s.t] {
                eat(&(m.rows as u64).to_le_bytes());
                eat(&(m.cols as u64).to_le_bytes());
                for &v in &m.data {
                    eat(&v.to_bits().to_le_bytes());
                }
            }
        }
        h
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SynthError {
    /// alpha = beta = noise = 0 would make every sample of a class
    /// identical and the task ill-posed.
    DegenerateSpec,
    InvalidSpec { detail: String },
    FoldOutOfRange { folds: usize, fold_index: usize },
}

impl fmt::Display for SynthError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SynthError::DegenerateSpec => {
                write!(f, "degenerate spec: no signal and no noise (alpha = beta = noise_std = 0)")
            }
            SynthError::InvalidSpec { detail } => write!(f, "invalid spec: {detail}"),
            SynthError::FoldOutOfRange { folds, fold_index } => {
                write!(f, "fold {fold_index} out of range for {folds} folds (need folds >= 2)")
            }
        }
    }
}

impl std::error::Error for SynthError {}

#[derive(Clone, Debug)]
pub struct SynthSpec {
    pub n_samples: usize,
    pub num_classes: u32,
    /// Sequence lengths (k, m, n) for V, S, T.
    pub seq_lens: [usize; 3],
    /// Raw feature dims per modality.
    pub raw_dims: [usize; 3],
    /// Strength of the class direction shared across modalities.
    pub shared_strength: f64,
    /// Strength of the per-modality class directions.
    pub specific_strength: [f64; 3],
    /// Per-modality mean offset and linear distortion scale.
    pub domain_shift: f64,
    pub noise_std: f64,
    pub seed: u64,
    /// Uniform when not set; otherwise one weight per class.
    pub class_priors: Option<Vec<f64>>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_samples: 512,
            num_classes: 4,
            seq_lens: [8, 8, 8],
            raw_dims: [32, 32, 24],
            shared_strength: 2.0,
            specific_strength: [0.5, 0.5, 0.5],
            domain_shift: 0.5,
            noise_std: 0.1,
            seed: 7,
            class_priors: None,
        }
    }
}

fn unit_vector(rng: &mut Rng, dim: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

/// Fixed per-modality domain-shift map y = (I + delta*D) x + delta*mu.
struct ShiftMap {
    mix: Vec<f64>,
    offset: Vec<f64>,
    dim: usize,
    delta: f64,
}

impl ShiftMap {
    fn new(rng: &mut Rng, dim: usize, delta: f64) -> Self {
        let scale = 1.0 / (dim as f64).sqrt();
        let mix: Vec<f64> = (0..dim * dim).map(|_| rng.normal() * scale).collect();
        let offset = unit_vector(rng, dim);
        ShiftMap {
            mix,
            offset,
            dim,
            delta,
        }
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        let d = self.dim;
        for i in 0..d {
            let mut acc = x[i] + self.delta * self.offset[i];
            let row = &self.mix[i * d..(i + 1) * d];
            let mut mixed = 0.0;
            for j in 0..d {
                mixed += row[j] * x[j];
            }
            acc += self.delta * mixed;
            out[i] = acc;
        }
    }
}

/// Balanced label assignment: exact counts by largest remainder, then a
/// seed-derived shuffle. Uniform priors are balanced to within one
/// sample of equality.
fn assign_labels(spec: &SynthSpec, rng: &mut Rng) -> Result<Vec<u32>, SynthError> {
    let e = spec.num_classes as usize;
    let n = spec.n_samples;
    let priors: Vec<f64> = match &spec.class_priors {
        None => vec![1.0 / e as f64; e],
        Some(p) => {
            if p.len() != e {
                return Err(SynthError::InvalidSpec {
                    detail: format!("{} priors for {e} classes", p.len()),
                });
            }
            let total: f64 = p.iter().sum();
            if total <= 0.0 || p.iter().any(|&x| x < 0.0) {
                return Err(SynthError::InvalidSpec {
                    detail: "priors must be non-negative and sum to a positive value".into(),
                });
            }
            p.iter().map(|x| x / total).collect()
        }
    };
    let mut counts: Vec<usize> = priors.iter().map(|p| (p * n as f64).floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut remainders: Vec<(usize, f64)> = priors
        .iter()
        .enumerate()
        .map(|(i, p)| (i, p * n as f64 - counts[i] as f64))
        .collect();
    remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    for k in 0..n - assigned {
        counts[remainders[k % e].0] += 1;
    }
    let mut labels = Vec::with_capacity(n);
    for (c, &count) in counts.iter().enumerate() {
        labels.extend(std::iter::repeat_n(c as u32, count));
    }
    let perm = rng.permutation(n);
    Ok(perm.into_iter().map(|i| labels[i]).collect())
}

pub fn generate(spec: &SynthSpec) -> Result<Dataset, SynthError> {
    if spec.num_classes < 2 {
        return Err(SynthError::InvalidSpec {
            detail: format!("need at least 2 classes, got {}", spec.num_classes),
        });
    }
    if spec.seq_lens.iter().any(|&t| t == 0) || spec.raw_dims.iter().any(|&d| d == 0) {
        return Err(SynthError::InvalidSpec {
            detail: "sequence lengths and feature dims must be >= 1".into(),
        });
    }
    if spec.shared_strength < 0.0
        || spec.specific_strength.iter().any(|&b| b < 0.0)
        || spec.domain_shift < 0.0
        || spec.noise_std < 0.0
    {
        return Err(SynthError::InvalidSpec {
            detail: "strengths, shift, and noise must be non-negative".into(),
        });
    }
    if spec.shared_strength == 0.0
        && spec.specific_strength.iter().all(|&b| b == 0.0)
        && spec.noise_std == 0.0
    {
        return Err(SynthError::DegenerateSpec);
    }

    let e = spec.num_classes as usize;
    let d_lat = *spec.raw_dims.iter().min().unwrap();

    // Fixed structure streams are independent of n_samples so the same
    // seed yields the same class geometry at any dataset size.
    let mut dir_rng = Rng::derive(spec.seed, 1);
    let shared_dirs: Vec<Vec<f64>> = (0..e).map(|_| unit_vector(&mut dir_rng, d_lat)).collect();
    let specific_dirs: Vec<[Vec<f64>; 3]> = (0..e)
        .map(|_| {
            [
                unit_vector(&mut dir_rng, spec.raw_dims[0]),
                unit_vector(&mut dir_rng, spec.raw_dims[1]),
                unit_vector(&mut dir_rng, spec.raw_dims[2]),
            ]
        })
        .collect();
    let mut shift_rng = Rng::derive(spec.seed, 2);
    let shifts: Vec<ShiftMap> = (0..3)
        .map(|mi| ShiftMap::new(&mut shift_rng, spec.raw_dims[mi], spec.domain_shift))
        .collect();

    let mut label_rng = Rng::derive(spec.seed, 3);
    let labels = assign_labels(spec, &mut label_rng)?;

    let mut samples = Vec::with_capacity(spec.n_samples);
    for (i, &label) in labels.iter().enumerate() {
        // Per-sample substream keeps generation order-independent.
        let mut rng = Rng::derive(spec.seed, 1000 + i as u64);
        let c = label as usize;
        let mut mats: Vec<FeatMat> = Vec::with_capacity(3);
        for mi in 0..3 {
            let dim = spec.raw_dims[mi];
            let t = spec.seq_lens[mi];
            let mut base = vec![0.0f64; dim];
            for j in 0..d_lat {
                base[j] += spec.shared_strength * shared_dirs[c][j];
            }
            for j in 0..dim {
                base[j] += spec.specific_strength[mi] * specific_dirs[c][mi][j];
            }
            let mut shifted = vec![0.0f64; dim];
            shifts[mi].apply(&base, &mut shifted);
            let mut mat = FeatMat::zeros(t, dim);
            for r in 0..t {
                for j in 0..dim {
                    mat.data[r * dim + j] = (shifted[j] + spec.noise_std * rng.normal()) as f32;
                }
            }
            mats.push(mat);
        }
        let t_mat = mats.pop().unwrap();
        let s_mat = mats.pop().unwrap();
        let v_mat = mats.pop().unwrap();
        samples.push(Sample {
            label,
            v: v_mat,
            s: s_mat,
            t: t_mat,
        });
    }
    Ok(Dataset {
        num_classes: spec.num_classes,
        samples,
    })
}

/// Deterministic contiguous-block split. Earlier folds are larger when
/// the count does not divide evenly.
pub fn split(dataset: &Dataset, folds: usize, fold_index: usize) -> Result<(Dataset, Dataset), SynthError> {
    if folds < 2 || fold_index >= folds {
        return Err(SynthError::FoldOutOfRange { folds, fold_index });
    }
    let n = dataset.samples.len();
    let base = n / folds;
    let rem = n % folds;
    let size_of = |f: usize| base + usize::from(f < rem);
    let start: usize = (0..fold_index).map(size_of).sum();
    let end = start + size_of(fold_index);
    let mut train = Vec::with_capacity(n - (end - start));
    let mut test = Vec::with_capacity(end - start);
    for (i, s) in dataset.samples.iter().enumerate() {
        if i >= start && i < end {
            test.push(s.clone());
        } else {
            train.push(s.clone());
        }
    }
    Ok((
        Dataset {
            num_classes: dataset.num_classes,
            samples: train,
        },
        Dataset {
            num_classes: dataset.num_classes,
            samples: test,
        },
    ))
}
