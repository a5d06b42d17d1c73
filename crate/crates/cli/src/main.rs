//! Command-line entry point: data generation, training, evaluation,
//! gradient checking, and the ablation sweep.
//!
//! Exit codes: 0 success, 2 config error, 3 data/format error,
//! 4 numerical failure (non-finite values or a failed gradient check).

mod opts;

use gmic_core::gmic::{read_features, write_features, FormatError};
use gmic_core::gradcheck::{run_gradcheck, GradcheckReport};
use gmic_core::model::{ModelConfig, MsrMode};
use gmic_core::param::ParamStore;
use gmic_core::real::Real;
use gmic_core::synth::{generate, split, Dataset, SynthSpec};
use gmic_core::train::{alignment_report, evaluate, train_with, MetricsRecord, TrainConfig, TrainError, TrainOutcome};
use opts::{flag_to_key, is_switch, OptError, Precision, TrainOpts};
use std::io::Write;
use std::path::Path;
use std::process::ExitCode;

const EXIT_OK: u8 = 0;
const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NUMERIC: u8 = 4;

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let code = match args.first().map(String::as_str) {
        Some("gen-data") => cmd_gen_data(&args[1..]),
        Some("train") => cmd_train(&args[1..]),
        Some("eval") => cmd_eval(&args[1..]),
        Some("gradcheck") => cmd_gradcheck(&args[1..]),
        Some("ablate") => cmd_ablate(&args[1..]),
        Some("help") | Some("--help") | Some("-h") => {
            print_help();
            EXIT_OK
        }
        Some(other) => {
            eprintln!("unknown command {other:?}; run `gmic help`");
            EXIT_CONFIG
        }
        None => {
            print_help();
            EXIT_CONFIG
        }
    };
    ExitCode::from(code)
}

fn print_help() {
    println!(
        "gmic {} — tri-modal gated-attention fusion at desk scale

USAGE
  gmic gen-data --out <file.gmic> [--n 512] [--classes 4] [--seed 7]
                [--len-v 8 --len-s 8 --len-t 8]
                [--dim-v 32 --dim-s 32 --dim-t 24]
                [--alpha 2.0] [--beta 0.5 | --beta-v/--beta-s/--beta-t]
                [--delta 0.5] [--noise 0.1] [--priors p1,p2,...]
  gmic train    --data <file.gmic> [--config <file>] [train keys as flags]
  gmic eval     --data <file.gmic> --params <file.gmwt>
                [--manifest <file>] [model flags] [--export-embeddings <out.gmic>]
  gmic gradcheck [--scale tiny] [--inject-fault]
  gmic ablate   --data <file.gmic> [--seeds N] [train keys as flags]

TRAIN KEYS (config file `key = value`, flags `--key-name value`)
  data, epochs (100), lr (0.001; 1e-5 matches the original recipe),
  batch_size (32), gamma (0.1), seed (7), loss_sum (false),
  d (64), n_heads (4), ffn_mult (4), eps (1e-5),
  share_encoder (false), positional_encoding (false),
  refine_ksize (3), refine_stride (1),
  no_msr, msr_raw_concat, no_mir, no_mic (ablation switches),
  precision (f32 | f64), folds (0 = no held-out split), fold_index (0),
  metrics_out, params_out, manifest_out

Training prints one JSON object per epoch with keys epoch, l_er, l_mir,
l_total, wa, ua, skl_vs, skl_st, skl_tv, and appends the same lines to
the metrics file. With --folds >= 2 a held-out record is printed at the
end, marked \"split\":\"heldout\".

EXIT CODES  0 ok, 2 config error, 3 data/format error, 4 numerical failure",
        env!("CARGO_PKG_VERSION")
    );
}

// ── shared helpers ──────────────────────────────────────────────────

fn data_exit(e: &FormatError) -> u8 {
    let _ = e;
    EXIT_DATA
}

fn train_exit(e: &TrainError) -> u8 {
    match e {
        TrainError::Config(_) => EXIT_CONFIG,
        TrainError::Data { .. } => EXIT_DATA,
        TrainError::NanLoss { .. } | TrainError::NanGrad { .. } | TrainError::Tensor(_) => EXIT_NUMERIC,
    }
}

/// Parses the training-family flags into resolved options:
/// defaults < config file < flags, in flag order.
fn resolve_train_opts(args: &[String], extra: &[&str]) -> Result<(TrainOpts, Vec<(String, String)>), OptError> {
    let mut opts = TrainOpts::default();
    // config file first so later flags override it
    let mut i = 0;
    while i < args.len() {
        if args[i] == "--config" || args[i] == "--manifest" {
            let lenient = args[i] == "--manifest";
            let path = args
                .get(i + 1)
                .ok_or_else(|| OptError(format!("{} needs a path", args[i])))?;
            opts.load_file(Path::new(path), lenient)?;
            i += 2;
        } else {
            i += 1;
        }
    }
    let mut extras: Vec<(String, String)> = Vec::new();
    let mut i = 0;
    while i < args.len() {
        let flag = &args[i];
        if flag == "--config" || flag == "--manifest" {
            i += 2;
            continue;
        }
        if let Some(name) = flag.strip_prefix("--") {
            if extra.contains(&name) {
                let value = args
                    .get(i + 1)
                    .ok_or_else(|| OptError(format!("{flag} needs a value")))?;
                extras.push((name.to_string(), value.clone()));
                i += 2;
                continue;
            }
        }
        let Some(key) = flag_to_key(flag) else {
            return Err(OptError(format!("unknown flag {flag:?}")));
        };
        if is_switch(key) {
            opts.apply(key, "true")?;
            i += 1;
        } else {
            let value = args
                .get(i + 1)
                .ok_or_else(|| OptError(format!("{flag} needs a value")))?;
            opts.apply(key, value)?;
            i += 2;
        }
    }
    Ok((opts, extras))
}

fn model_config_from(opts: &TrainOpts, dataset: &Dataset) -> Result<ModelConfig, String> {
    let Some(raw_dims) = dataset.raw_dims() else {
        return Err("dataset is empty; cannot size the model".into());
    };
    if opts.no_msr && opts.msr_raw_concat {
        return Err("choose one of no_msr and msr_raw_concat".into());
    }
    let msr_mode = if opts.no_msr {
        MsrMode::Drop
    } else if opts.msr_raw_concat {
        MsrMode::RawConcat
    } else {
        MsrMode::Full
    };
    Ok(ModelConfig {
        raw_dims,
        d: opts.d,
        n_heads: opts.n_heads,
        ffn_mult: opts.ffn_mult,
        num_classes: dataset.num_classes as usize,
        eps: opts.eps,
        share_encoder: opts.share_encoder,
        positional_encoding: opts.positional_encoding,
        refine_ksize: opts.refine_ksize,
        refine_stride: opts.refine_stride,
        msr_mode,
        use_mir: !opts.no_mir,
        gamma: opts.gamma,
    })
}

fn train_config_from(opts: &TrainOpts) -> TrainConfig {
    TrainConfig {
        lr: opts.lr,
        batch_size: opts.batch_size,
        epochs: opts.epochs,
        seed: opts.seed,
        no_mic: opts.no_mic,
        loss_sum: opts.loss_sum,
        ..TrainConfig::default()
    }
}

fn write_manifest(
    path: &str,
    command: &str,
    opts: &TrainOpts,
    dataset: &Dataset,
) -> Result<(), std::io::Error> {
    let mut out = String::new();
    out.push_str("# resolved run configuration (key = value)\n");
    for (k, v) in opts.snapshot() {
        out.push_str(&format!("{k} = {v}\n"));
    }
    out.push_str(&format!("run.command = {command}\n"));
    out.push_str(&format!("run.tool_version = {}\n", env!("CARGO_PKG_VERSION")));
    out.push_str(&format!("run.data_fingerprint = {:016x}\n", dataset.fingerprint()));
    out.push_str(&format!("run.n_samples = {}\n", dataset.len()));
    out.push_str(&format!("run.num_classes = {}\n", dataset.num_classes));
    if let Some(d) = dataset.raw_dims() {
        out.push_str(&format!("run.raw_dims = {},{},{}\n", d[0], d[1], d[2]));
    }
    if let Some(l) = dataset.seq_lens() {
        out.push_str(&format!("run.seq_lens = {},{},{}\n", l[0], l[1], l[2]));
    }
    std::fs::write(path, out)
}

// ── gen-data ────────────────────────────────────────────────────────

fn cmd_gen_data(args: &[String]) -> u8 {
    let mut spec = SynthSpec::default();
    let mut out_path: Option<String> = None;
    let mut i = 0;
    while i < args.len() {
        let flag = args[i].clone();
        let value = args.get(i + 1).cloned();
        let take = || -> Result<String, String> {
            value.clone().ok_or_else(|| format!("{flag} needs a value"))
        };
        let result: Result<(), String> = (|| {
            match flag.as_str() {
                "--out" => out_path = Some(take()?),
                "--n" => spec.n_samples = take()?.parse().map_err(|_| "bad --n".to_string())?,
                "--classes" => {
                    spec.num_classes = take()?.parse().map_err(|_| "bad --classes".to_string())?
                }
                "--seed" => spec.seed = take()?.parse().map_err(|_| "bad --seed".to_string())?,
                "--len-v" => spec.seq_lens[0] = take()?.parse().map_err(|_| "bad --len-v".to_string())?,
                "--len-s" => spec.seq_lens[1] = take()?.parse().map_err(|_| "bad --len-s".to_string())?,
                "--len-t" => spec.seq_lens[2] = take()?.parse().map_err(|_| "bad --len-t".to_string())?,
                "--dim-v" => spec.raw_dims[0] = take()?.parse().map_err(|_| "bad --dim-v".to_string())?,
                "--dim-s" => spec.raw_dims[1] = take()?.parse().map_err(|_| "bad --dim-s".to_string())?,
                "--dim-t" => spec.raw_dims[2] = take()?.parse().map_err(|_| "bad --dim-t".to_string())?,
                "--alpha" => {
                    spec.shared_strength = take()?.parse().map_err(|_| "bad --alpha".to_string())?
                }
                "--beta" => {
                    let b: f64 = take()?.parse().map_err(|_| "bad --beta".to_string())?;
                    spec.specific_strength = [b; 3];
                }
                "--beta-v" => {
                    spec.specific_strength[0] = take()?.parse().map_err(|_| "bad --beta-v".to_string())?
                }
                "--beta-s" => {
                    spec.specific_strength[1] = take()?.parse().map_err(|_| "bad --beta-s".to_string())?
                }
                "--beta-t" => {
                    spec.specific_strength[2] = take()?.parse().map_err(|_| "bad --beta-t".to_string())?
                }
                "--delta" => spec.domain_shift = take()?.parse().map_err(|_| "bad --delta".to_string())?,
                "--noise" => spec.noise_std = take()?.parse().map_err(|_| "bad --noise".to_string())?,
                "--priors" => {
                    let parsed: Result<Vec<f64>, _> = take()?.split(',').map(str::parse).collect();
                    spec.class_priors = Some(parsed.map_err(|_| "bad --priors".to_string())?);
                }
                other => return Err(format!("unknown flag {other:?}")),
            }
            Ok(())
        })();
        if let Err(e) = result {
            eprintln!("gen-data: {e}");
            return EXIT_CONFIG;
        }
        i += 2;
    }
    let Some(out_path) = out_path else {
        eprintln!("gen-data: --out is required");
        return EXIT_CONFIG;
    };
    let dataset = match generate(&spec) {
        Ok(d) => d,
        Err(e) => {
            eprintln!("gen-data: {e}");
            return EXIT_CONFIG;
        }
    };
    if let Err(e) = write_features(&dataset, Path::new(&out_path)) {
        eprintln!("gen-data: {e}");
        return data_exit(&e);
    }
    println!(
        "wrote {out_path}: n={} classes={} lens={},{},{} dims={},{},{} seed={} fingerprint={:016x}",
        dataset.len(),
        dataset.num_classes,
        spec.seq_lens[0],
        spec.seq_lens[1],
        spec.seq_lens[2],
        spec.raw_dims[0],
        spec.raw_dims[1],
        spec.raw_dims[2],
        spec.seed,
        dataset.fingerprint()
    );
    EXIT_OK
}

// ── train ───────────────────────────────────────────────────────────

fn heldout_json(rec: &MetricsRecord) -> String {
    let body = rec.to_json_line();
    format!("{{\"split\":\"heldout\",{}", &body[1..])
}

fn run_training<F: Real>(
    opts: &TrainOpts,
    full: &Dataset,
    train_set: &Dataset,
    test_set: Option<&Dataset>,
    quiet: bool,
) -> Result<(TrainOutcome<F>, Option<MetricsRecord>), TrainError> {
    let model_cfg = model_config_from(opts, full)
        .map_err(|detail| TrainError::Config(gmic_core::model::ConfigError { detail }))?;
    let train_cfg = train_config_from(opts);
    let mut metrics_file = match &opts.metrics_out {
        Some(p) => Some(std::fs::File::create(p).map_err(|e| TrainError::Data {
            detail: format!("cannot create metrics file {p}: {e}"),
        })?),
        None => None,
    };
    let outcome = train_with::<F>(train_set, &model_cfg, &train_cfg, |rec| {
        let line = rec.to_json_line();
        if !quiet {
            println!("{line}");
        }
        if let Some(f) = metrics_file.as_mut() {
            let _ = writeln!(f, "{line}");
            let _ = f.flush();
        }
    })?;
    let heldout = match test_set {
        Some(ts) => Some(evaluate(
            &outcome.store,
            &outcome.params,
            &model_cfg,
            train_cfg.effective_gamma(&model_cfg),
            ts,
            outcome.history.len(),
        )?),
        None => None,
    };
    Ok((outcome, heldout))
}

enum SavedStore {
    F32(ParamStore<f32>),
    F64(ParamStore<f64>),
}

fn cmd_train(args: &[String]) -> u8 {
    let (opts, _) = match resolve_train_opts(args, &[]) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("train: {e}");
            return EXIT_CONFIG;
        }
    };
    let Some(data_path) = opts.data.clone() else {
        eprintln!("train: --data is required");
        return EXIT_CONFIG;
    };
    let dataset = match read_features(Path::new(&data_path)) {
        Ok(d) => d,
        Err(e) => {
            eprintln!("train: {e}");
            return data_exit(&e);
        }
    };
    let (train_set, test_set) = if opts.folds >= 2 {
        match split(&dataset, opts.folds, opts.fold_index) {
            Ok((tr, te)) => (tr, Some(te)),
            Err(e) => {
                eprintln!("train: {e}");
                return EXIT_CONFIG;
            }
        }
    } else {
        (dataset.clone(), None)
    };

    // the manifest snapshot lands on disk before any training happens
    let manifest_path = opts
        .manifest_out
        .clone()
        .unwrap_or_else(|| "gmic_run.manifest".to_string());
    if let Err(e) = write_manifest(&manifest_path, "train", &opts, &dataset) {
        eprintln!("train: cannot write manifest {manifest_path}: {e}");
        return EXIT_DATA;
    }

    let result = match opts.precision {
        Precision::F32 => run_training::<f32>(&opts, &dataset, &train_set, test_set.as_ref(), false)
            .map(|(o, h)| (SavedStore::F32(o.store), h)),
        Precision::F64 => run_training::<f64>(&opts, &dataset, &train_set, test_set.as_ref(), false)
            .map(|(o, h)| (SavedStore::F64(o.store), h)),
    };
    match result {
        Ok((store, heldout)) => {
            if let Some(rec) = heldout {
                println!("{}", heldout_json(&rec));
            }
            if let Some(p) = &opts.params_out {
                let res = match &store {
                    SavedStore::F32(s) => s.save(Path::new(p)),
                    SavedStore::F64(s) => s.save(Path::new(p)),
                };
                if let Err(e) = res {
                    eprintln!("train: cannot save params to {p}: {e}");
                    return EXIT_DATA;
                }
            }
            EXIT_OK
        }
        Err(e) => {
            eprintln!("train: {e}");
            train_exit(&e)
        }
    }
}

// ── eval ────────────────────────────────────────────────────────────

fn run_eval<F: Real>(opts: &TrainOpts, dataset: &Dataset, params_path: &str, export: Option<&str>) -> u8 {
    let model_cfg = match model_config_from(opts, dataset) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("eval: {e}");
            return EXIT_CONFIG;
        }
    };
    let (mut store, params) = match gmic_core::model::init_params::<F>(&model_cfg, opts.seed) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("eval: {e}");
            return EXIT_CONFIG;
        }
    };
    if let Err(e) = store.load(Path::new(params_path)) {
        eprintln!("eval: cannot load params from {params_path}: {e}");
        return EXIT_DATA;
    }
    let gamma = train_config_from(opts).effective_gamma(&model_cfg);
    match evaluate(&store, &params, &model_cfg, gamma, dataset, 0) {
        Ok(rec) => println!("{}", rec.to_json_line()),
        Err(e) => {
            eprintln!("eval: {e}");
            return train_exit(&e);
        }
    }
    if let Some(out) = export {
        match alignment_report(&store, &params, &model_cfg, dataset) {
            Ok(report) => {
                println!(
                    "alignment skl_vs={} skl_st={} skl_tv={}",
                    report.skl[0], report.skl[1], report.skl[2]
                );
                if let Err(e) = write_features(&report.embeddings, Path::new(out)) {
                    eprintln!("eval: cannot export embeddings to {out}: {e}");
                    return EXIT_DATA;
                }
                println!("exported pooled generator embeddings to {out}");
            }
            Err(e) => {
                eprintln!("eval: {e}");
                return train_exit(&e);
            }
        }
    }
    EXIT_OK
}

fn cmd_eval(args: &[String]) -> u8 {
    let (opts, extras) = match resolve_train_opts(args, &["params", "export-embeddings"]) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("eval: {e}");
            return EXIT_CONFIG;
        }
    };
    let params_path = extras.iter().find(|(k, _)| k == "params").map(|(_, v)| v.clone());
    let export = extras
        .iter()
        .find(|(k, _)| k == "export-embeddings")
        .map(|(_, v)| v.clone());
    let Some(params_path) = params_path else {
        eprintln!("eval: --params is required");
        return EXIT_CONFIG;
    };
    let Some(data_path) = opts.data.clone() else {
        eprintln!("eval: --data is required");
        return EXIT_CONFIG;
    };
    let dataset = match read_features(Path::new(&data_path)) {
        Ok(d) => d,
        Err(e) => {
            eprintln!("eval: {e}");
            return data_exit(&e);
        }
    };
    match opts.precision {
        Precision::F32 => run_eval::<f32>(&opts, &dataset, &params_path, export.as_deref()),
        Precision::F64 => run_eval::<f64>(&opts, &dataset, &params_path, export.as_deref()),
    }
}

// ── gradcheck ───────────────────────────────────────────────────────

fn print_gradcheck_report(report: &GradcheckReport) {
    for g in &report.groups {
        let verdict = if g.max_rel_err < report.threshold { "PASS" } else { "FAIL" };
        println!(
            "group {:<22} entries {:<5} max_rel_err {:<12.3e} {}",
            g.group, g.entries, g.max_rel_err, verdict
        );
    }
    println!(
        "gradcheck {} (threshold {:.0e}, worst {:.3e}, groups {})",
        if report.passed() { "PASS" } else { "FAIL" },
        report.threshold,
        report.worst(),
        report.groups.len()
    );
}

fn cmd_gradcheck(args: &[String]) -> u8 {
    let mut inject = false;
    let mut i = 0;
    while i < args.len() {
        match args[i].as_str() {
            "--scale" => {
                let Some(v) = args.get(i + 1) else {
                    eprintln!("gradcheck: --scale needs a value");
                    return EXIT_CONFIG;
                };
                if v != "tiny" {
                    eprintln!("gradcheck: only --scale tiny is supported, got {v:?}");
                    return EXIT_CONFIG;
                }
                i += 2;
            }
            "--inject-fault" => {
                inject = true;
                i += 1;
            }
            other => {
                eprintln!("gradcheck: unknown flag {other:?}");
                return EXIT_CONFIG;
            }
        }
    }
    match run_gradcheck(inject) {
        Ok(report) => {
            print_gradcheck_report(&report);
            if report.passed() {
                EXIT_OK
            } else {
                EXIT_NUMERIC
            }
        }
        Err(e) => {
            eprintln!("gradcheck: {e}");
            train_exit(&e)
        }
    }
}

// ── ablate ──────────────────────────────────────────────────────────

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

const VARIANTS: [&str; 4] = ["full", "no_msr", "no_mir", "no_mic"];

fn cmd_ablate(args: &[String]) -> u8 {
    let (mut opts, extras) = match resolve_train_opts(args, &["seeds"]) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("ablate: {e}");
            return EXIT_CONFIG;
        }
    };
    let seeds: usize = match extras.iter().find(|(k, _)| k == "seeds") {
        Some((_, v)) => match v.parse() {
            Ok(n) if n >= 1 => n,
            _ => {
                eprintln!("ablate: --seeds must be a positive integer");
                return EXIT_CONFIG;
            }
        },
        None => 1,
    };
    if opts.folds < 2 {
        opts.folds = 5;
    }
    let Some(data_path) = opts.data.clone() else {
        eprintln!("ablate: --data is required");
        return EXIT_CONFIG;
    };
    let dataset = match read_features(Path::new(&data_path)) {
        Ok(d) => d,
        Err(e) => {
            eprintln!("ablate: {e}");
            return data_exit(&e);
        }
    };
    let (train_set, test_set) = match split(&dataset, opts.folds, opts.fold_index) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("ablate: {e}");
            return EXIT_CONFIG;
        }
    };

    let base_seed = opts.seed;
    let mut results: Vec<(String, u64, f64, f64)> = Vec::new();
    println!("{:<8} {:<6} {:<8} {:<8}", "variant", "seed", "wa", "ua");
    for s in 0..seeds {
        let seed = base_seed + s as u64;
        for variant in VARIANTS {
            let mut vopts = opts.clone();
            vopts.seed = seed;
            vopts.metrics_out = None;
            vopts.params_out = None;
            match variant {
                "no_msr" => vopts.no_msr = true,
                "no_mir" => vopts.no_mir = true,
                "no_mic" => vopts.no_mic = true,
                _ => {}
            }
            let run = match vopts.precision {
                Precision::F32 => {
                    run_training::<f32>(&vopts, &dataset, &train_set, Some(&test_set), true).map(|(_, h)| h)
                }
                Precision::F64 => {
                    run_training::<f64>(&vopts, &dataset, &train_set, Some(&test_set), true).map(|(_, h)| h)
                }
            };
            match run {
                Ok(Some(rec)) => {
                    println!("{:<8} {:<6} {:<8.4} {:<8.4}", variant, seed, rec.wa, rec.ua);
                    results.push((variant.to_string(), seed, rec.wa, rec.ua));
                }
                Ok(None) => unreachable!("ablate always evaluates a held-out fold"),
                Err(e) => {
                    eprintln!("ablate: {variant} seed {seed}: {e}");
                    return train_exit(&e);
                }
            }
        }
    }
    println!("{:<8} {:<6} {:<8} {:<8}", "median", "over", "wa", "ua");
    for variant in VARIANTS {
        let mut was: Vec<f64> = results.iter().filter(|r| r.0 == variant).map(|r| r.2).collect();
        let mut uas: Vec<f64> = results.iter().filter(|r| r.0 == variant).map(|r| r.3).collect();
        println!(
            "{:<8} {:<6} {:<8.4} {:<8.4}",
            variant,
            seeds,
            median(&mut was),
            median(&mut uas)
        );
    }
    EXIT_OK
}
