//! Flag and config-file handling.
//!
//! Resolution order is defaults < config file < command-line flags, and
//! the resolved snapshot is what lands in the run manifest. Unknown keys
//! in a config file are hard errors; silent typos in hyperparameters are
//! not worth the debugging time they cost.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

#[derive(Debug)]
pub struct OptError(pub String);

impl fmt::Display for OptError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn name(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

/// Every knob a training-family command understands.
#[derive(Clone, Debug)]
pub struct TrainOpts {
    pub data: Option<String>,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub gamma: f64,
    pub seed: u64,
    pub loss_sum: bool,
    pub d: usize,
    pub n_heads: usize,
    pub ffn_mult: usize,
    pub eps: f64,
    pub share_encoder: bool,
    pub positional_encoding: bool,
    pub refine_ksize: usize,
    pub refine_stride: usize,
    pub no_msr: bool,
    pub msr_raw_concat: bool,
    pub no_mir: bool,
    pub no_mic: bool,
    pub precision: Precision,
    pub folds: usize,
    pub fold_index: usize,
    pub metrics_out: Option<String>,
    pub params_out: Option<String>,
    pub manifest_out: Option<String>,
}

impl Default for TrainOpts {
    fn default() -> Self {
        TrainOpts {
            data: None,
            epochs: 100,
            // Desk-scale default. lr = 1e-5 with batch_size = 32 and
            // gamma = 0.1 reproduces the original large-encoder recipe.
            lr: 1e-3,
            batch_size: 32,
            gamma: 0.1,
            seed: 7,
            loss_sum: false,
            d: 64,
            n_heads: 4,
            ffn_mult: 4,
            eps: 1e-5,
            share_encoder: false,
            positional_encoding: false,
            refine_ksize: 3,
            refine_stride: 1,
            no_msr: false,
            msr_raw_concat: false,
            no_mir: false,
            no_mic: false,
            precision: Precision::F32,
            folds: 0,
            fold_index: 0,
            metrics_out: None,
            params_out: None,
            manifest_out: None,
        }
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool, OptError> {
    match v {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(OptError(format!("{key}: expected true/false, got {v:?}"))),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, OptError> {
    v.parse()
        .map_err(|_| OptError(format!("{key}: cannot parse {v:?}")))
}

impl TrainOpts {
    /// Applies one key=value pair; shared by config files and flags.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<(), OptError> {
        match key {
            "data" => self.data = Some(value.to_string()),
            "epochs" => self.epochs = parse_num(key, value)?,
            "lr" => self.lr = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "gamma" => self.gamma = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "loss_sum" => self.loss_sum = parse_bool(key, value)?,
            "d" => self.d = parse_num(key, value)?,
            "n_heads" => self.n_heads = parse_num(key, value)?,
            "ffn_mult" => self.ffn_mult = parse_num(key, value)?,
            "eps" => self.eps = parse_num(key, value)?,
            "share_encoder" => self.share_encoder = parse_bool(key, value)?,
            "positional_encoding" => self.positional_encoding = parse_bool(key, value)?,
            "refine_ksize" => self.refine_ksize = parse_num(key, value)?,
            "refine_stride" => self.refine_stride = parse_num(key, value)?,
            "no_msr" => self.no_msr = parse_bool(key, value)?,
            "msr_raw_concat" => self.msr_raw_concat = parse_bool(key, value)?,
            "no_mir" => self.no_mir = parse_bool(key, value)?,
            "no_mic" => self.no_mic = parse_bool(key, value)?,
            "precision" => {
                self.precision = match value {
                    "f32" => Precision::F32,
                    "f64" => Precision::F64,
                    other => return Err(OptError(format!("precision: expected f32 or f64, got {other:?}"))),
                }
            }
            "folds" => self.folds = parse_num(key, value)?,
            "fold_index" => self.fold_index = parse_num(key, value)?,
            "metrics_out" => self.metrics_out = Some(value.to_string()),
            "params_out" => self.params_out = Some(value.to_string()),
            "manifest_out" => self.manifest_out = Some(value.to_string()),
            other => return Err(OptError(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Loads a flat key-value config file. `lenient` skips `run.*`
    /// entries so a run manifest doubles as a config snapshot.
    pub fn load_file(&mut self, path: &Path, lenient_run_keys: bool) -> Result<(), OptError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| OptError(format!("cannot read config {}: {e}", path.display())))?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(OptError(format!(
                    "{}:{}: expected key = value, got {raw:?}",
                    path.display(),
                    lineno + 1
                )));
            };
            let key = key.trim();
            let value = value.trim();
            if lenient_run_keys && key.starts_with("run.") {
                continue;
            }
            self.apply(key, value)
                .map_err(|e| OptError(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        }
        Ok(())
    }

    /// The resolved snapshot in config-file syntax.
    pub fn snapshot(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        if let Some(d) = &self.data {
            m.insert("data".into(), d.clone());
        }
        m.insert("epochs".into(), self.epochs.to_string());
        m.insert("lr".into(), self.lr.to_string());
        m.insert("batch_size".into(), self.batch_size.to_string());
        m.insert("gamma".into(), self.gamma.to_string());
        m.insert("seed".into(), self.seed.to_string());
        m.insert("loss_sum".into(), self.loss_sum.to_string());
        m.insert("d".into(), self.d.to_string());
        m.insert("n_heads".into(), self.n_heads.to_string());
        m.insert("ffn_mult".into(), self.ffn_mult.to_string());
        m.insert("eps".into(), self.eps.to_string());
        m.insert("share_encoder".into(), self.share_encoder.to_string());
        m.insert("positional_encoding".into(), self.positional_encoding.to_string());
        m.insert("refine_ksize".into(), self.refine_ksize.to_string());
        m.insert("refine_stride".into(), self.refine_stride.to_string());
        m.insert("no_msr".into(), self.no_msr.to_string());
        m.insert("msr_raw_concat".into(), self.msr_raw_concat.to_string());
        m.insert("no_mir".into(), self.no_mir.to_string());
        m.insert("no_mic".into(), self.no_mic.to_string());
        m.insert("precision".into(), self.precision.name().to_string());
        m.insert("folds".into(), self.folds.to_string());
        m.insert("fold_index".into(), self.fold_index.to_string());
        for (k, v) in [
            ("metrics_out", &self.metrics_out),
            ("params_out", &self.params_out),
            ("manifest_out", &self.manifest_out),
        ] {
            if let Some(v) = v {
                m.insert(k.into(), v.clone());
            }
        }
        m
    }
}

/// Maps a `--flag-name` to its config key.
pub fn flag_to_key(flag: &str) -> Option<&str> {
    let stripped = flag.strip_prefix("--")?;
    Some(match stripped {
        "data" => "data",
        "epochs" => "epochs",
        "lr" => "lr",
        "batch-size" => "batch_size",
        "gamma" => "gamma",
        "seed" => "seed",
        "loss-sum" => "loss_sum",
        "d" => "d",
        "n-heads" => "n_heads",
        "ffn-mult" => "ffn_mult",
        "eps" => "eps",
        "share-encoder" => "share_encoder",
        "positional-encoding" => "positional_encoding",
        "refine-ksize" => "refine_ksize",
        "refine-stride" => "refine_stride",
        "no-msr" => "no_msr",
        "msr-raw-concat" => "msr_raw_concat",
        "no-mir" => "no_mir",
        "no-mic" => "no_mic",
        "precision" => "precision",
        "folds" => "folds",
        "fold-index" => "fold_index",
        "metrics-out" => "metrics_out",
        "params-out" => "params_out",
        "manifest-out" => "manifest_out",
        _ => return None,
    })
}

/// Flags that take no value and mean `= true`.
pub fn is_switch(key: &str) -> bool {
    matches!(
        key,
        "loss_sum" | "share_encoder" | "positional_encoding" | "no_msr" | "msr_raw_concat" | "no_mir" | "no_mic"
    )
}
