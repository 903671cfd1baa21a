//! Command implementations. Every file a command writes lands in `--out`.

use std::fs;
use std::path::{Path, PathBuf};

use salt_core::attention::{write_trace_csv, AttentionTrace};
use salt_core::autodiff::Tape;
use salt_core::jet::{
    batch_tensor, generate_synthetic, prepare_jets, read_jets, sort_jet, truncate_pad, write_jets,
    write_padded_tensor, ClassSpec, Jet, PtScaler, SynthSpec,
};
use salt_core::metrics::{
    binned_accuracy_scores, evaluate_scores, predict_scores, write_bins_csv, write_scores_csv,
    REJECTION_EFFICIENCY,
};
use salt_core::model::{build_model, load_checkpoint, save_checkpoint, Model, ModelConfig};
use salt_core::profiler::{
    cost_report, flops_scaling_table, latency_bench, with_commas, write_cost_csv, write_scaling_csv,
    LatencyReport, MIN_REPS, MIN_WARMUP,
};
use salt_core::train::{train, write_history_csv, TrainOptions, TrainSchedule};
use salt_core::{DType, Error, Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::settings::{threads, Settings};
use crate::{CliError, CliResult, Command, EvalInputs};

const DEFAULT_N_JETS: usize = 1000;
const DEFAULT_GEN_CLASSES: usize = 2;
const DEFAULT_VAL_FRACTION: f64 = 0.2;
const DEFAULT_BENCH_BATCH: usize = 256;
const SCALER_FILE: &str = "scaler.json";

/// Input preparation fixed at training time and replayed at evaluation.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Preprocessing {
    pt_min: f64,
    scaler: PtScaler,
}

impl Preprocessing {
    fn apply(&self, jets: &[Jet], cfg: &ModelConfig) -> Vec<Jet> {
        prepare_jets(jets, cfg.n, self.pt_min, cfg.sort_key)
            .iter()
            .map(|j| self.scaler.apply(j))
            .collect()
    }

    fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(Error::from)?;
        Ok(serde_json::from_str(&text).map_err(Error::from)?)
    }
}

pub fn run(command: Command) -> CliResult<()> {
    match command {
        Command::GenData { common, n_jets, classes } => {
            let s = Settings::load(&common, None)?;
            gen_data(&s, n_jets, classes)
        }
        Command::Sort { common, data, key, n, pt_min } => {
            let s = Settings::load(&common, None)?;
            sort(&s, &data, key.unwrap_or(s.model.sort_key), n, pt_min)
        }
        Command::Train { common, model, data, epochs, batch, pt_min, val_fraction } => {
            let s = Settings::load(&common, Some(&model))?;
            train_cmd(s, &data, epochs, batch, pt_min, val_fraction)
        }
        Command::Eval { common, inputs } => {
            let s = Settings::load(&common, None)?;
            eval(&s, &inputs)
        }
        Command::BinnedEval { common, inputs, bins } => {
            let s = Settings::load(&common, None)?;
            binned_eval(&s, &inputs, bins)
        }
        Command::Flops { common, model, batch, scan } => {
            let s = Settings::load(&common, Some(&model))?;
            flops(&s, batch.unwrap_or(1), scan)
        }
        Command::Bench { common, model, checkpoint, reps, warmup, batch } => {
            let s = Settings::load(&common, Some(&model))?;
            bench(
                &s,
                checkpoint.as_deref(),
                reps.unwrap_or(MIN_REPS),
                warmup.unwrap_or(MIN_WARMUP),
                batch.unwrap_or(DEFAULT_BENCH_BATCH),
            )
        }
        Command::DumpAttn { common, model, checkpoint, scaler, data, jet, layer } => {
            let s = Settings::load(&common, Some(&model))?;
            dump_attn(&s, checkpoint.as_deref(), scaler.as_deref(), data.as_deref(), jet, layer)
        }
    }
}

/// The default two-class spec, extended with one more prong per extra class.
fn synth_spec(classes: usize) -> SynthSpec {
    let mut spec = SynthSpec::default();
    if classes != spec.classes.len() {
        let wide = spec.classes[1].clone();
        spec.classes.truncate(1);
        spec.classes.extend((1..classes).map(|k| ClassSpec { prongs: k + 1, ..wide.clone() }));
    }
    spec
}

fn gen_data(s: &Settings, n_jets: Option<usize>, classes: Option<usize>) -> CliResult<()> {
    let n_jets = n_jets.or(s.data.n_jets).unwrap_or(DEFAULT_N_JETS);
    let classes = classes.or(s.data.classes).unwrap_or(DEFAULT_GEN_CLASSES);
    let jets = generate_synthetic(s.seed, n_jets, &synth_spec(classes))?;
    let path = s.out_dir()?.join("jets.jsonl");
    write_jets(&path, &jets)?;
    println!("wrote {n_jets} jets ({classes} classes, seed {}) to {}", s.seed, path.display());
    Ok(())
}

fn sort(
    s: &Settings,
    data: &Path,
    key: salt_core::jet::SortKey,
    n: Option<usize>,
    pt_min: Option<f64>,
) -> CliResult<()> {
    let jets = read_jets(data)?;
    let out = s.out_dir()?;
    let sorted: Vec<Jet> = match n {
        Some(n) => {
            let pt_min = pt_min.or(s.data.pt_min).unwrap_or(0.0);
            jets.iter().map(|j| sort_jet(&truncate_pad(j, n, pt_min), key)).collect()
        }
        None => jets.iter().map(|j| sort_jet(j, key)).collect(),
    };
    write_jets(out.join("sorted.jsonl"), &sorted)?;
    if n.is_some() && !sorted.is_empty() {
        write_padded_tensor(out.join("sorted.bin"), &sorted)?;
    }
    println!("sorted {} jets by {key} into {}", sorted.len(), out.display());
    Ok(())
}

/// Splits off the trailing `fraction` of `jets` for validation.
fn split(jets: Vec<Jet>, fraction: f64) -> CliResult<(Vec<Jet>, Vec<Jet>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(CliError::Usage(format!("validation fraction must lie in (0, 1), got {fraction}")));
    }
    if jets.len() < 2 {
        return Err(Error::Data(format!("need at least two jets to train, got {}", jets.len())).into());
    }
    let n_val = ((jets.len() as f64 * fraction).round() as usize).clamp(1, jets.len() - 1);
    let mut train_set = jets;
    let val_set = train_set.split_off(train_set.len() - n_val);
    Ok((train_set, val_set))
}

#[derive(Serialize)]
struct TrainSummary {
    epochs: usize,
    best_epoch: Option<usize>,
    best_val_loss: Option<f64>,
    best_val_acc: Option<f64>,
    params: usize,
    train_jets: usize,
    val_jets: usize,
    threads: usize,
    seed: u64,
    model: ModelConfig,
    schedule: TrainSchedule,
}

fn train_cmd(
    mut s: Settings,
    data: &Path,
    epochs: Option<usize>,
    batch: Option<usize>,
    pt_min: Option<f64>,
    val_fraction: Option<f64>,
) -> CliResult<()> {
    let threads = threads()?;
    let jets = read_jets(data)?;
    if !s.is_explicit("classes") {
        let top = jets.iter().map(|j| j.label).max().unwrap_or(0);
        s.model.classes = (top + 1).max(2);
    }
    if epochs.is_some() || batch.is_some() {
        let first = s.train.phases.first().copied();
        let batch = batch.or(first.map(|p| p.batch_size)).unwrap_or(128);
        let epochs = epochs.or(first.map(|p| p.max_epochs)).unwrap_or(1);
        s.train.phases = TrainSchedule::single(batch, epochs).phases;
    }
    let pt_min = pt_min.or(s.data.pt_min).unwrap_or(0.0);
    let fraction = val_fraction.or(s.data.val_fraction).unwrap_or(DEFAULT_VAL_FRACTION);
    let out = s.out_dir()?.to_path_buf();

    let (train_raw, val_raw) = split(jets, fraction)?;
    let cfg = &s.model;
    let train_sorted = prepare_jets(&train_raw, cfg.n, pt_min, cfg.sort_key);
    let prep = Preprocessing { pt_min, scaler: PtScaler::fit(&train_sorted)? };
    let train_set: Vec<Jet> = train_sorted.iter().map(|j| prep.scaler.apply(j)).collect();
    let val_set = prep.apply(&val_raw, cfg);

    let model = build_model(cfg)?;
    let params = model.count_params();
    let (model, history) = train(model, &train_set, &val_set, &s.train, s.seed, TrainOptions { threads })?;

    save_checkpoint(&model, out.join("model.ckpt"))?;
    write_history_csv(out.join("history.csv"), &history)?;
    write_json(&out.join(SCALER_FILE), &prep)?;
    let best = history.iter().min_by(|a, b| a.val_loss.total_cmp(&b.val_loss));
    let summary = TrainSummary {
        epochs: history.len(),
        best_epoch: best.map(|r| r.epoch),
        best_val_loss: best.map(|r| r.val_loss),
        best_val_acc: best.map(|r| r.val_acc),
        params,
        train_jets: train_set.len(),
        val_jets: val_set.len(),
        threads,
        seed: s.seed,
        model: s.model.clone(),
        schedule: s.train.clone(),
    };
    write_json(&out.join("train.json"), &summary)?;
    match best {
        Some(r) => println!(
            "trained {} epochs; best validation loss {:.5} at epoch {} (accuracy {:.4}); outputs in {}",
            history.len(),
            r.val_loss,
            r.epoch,
            r.val_acc,
            out.display()
        ),
        None => println!("no epochs scheduled; saved the initial model to {}", out.display()),
    }
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    fs::write(path, text + "\n").map_err(Error::from)?;
    Ok(())
}

/// `--scaler` when given, else `scaler.json` beside the checkpoint.
fn scaler_path(checkpoint: &Path, scaler: Option<&Path>) -> PathBuf {
    scaler.map(Path::to_path_buf).unwrap_or_else(|| checkpoint.with_file_name(SCALER_FILE))
}

/// Loads the model and scores the prepared evaluation jets.
fn score(inputs: &EvalInputs) -> CliResult<(Model, Vec<Jet>, Vec<Vec<f64>>)> {
    let model = load_checkpoint(&inputs.checkpoint)?;
    let prep = Preprocessing::load(&scaler_path(&inputs.checkpoint, inputs.scaler.as_deref()))?;
    let jets = prep.apply(&read_jets(&inputs.data)?, model.config());
    let scores = predict_scores(&model, &jets)?;
    Ok((model, jets, scores))
}

fn eval(s: &Settings, inputs: &EvalInputs) -> CliResult<()> {
    let out = s.out_dir()?;
    let (_, jets, scores) = score(inputs)?;
    let labels: Vec<usize> = jets.iter().map(|j| j.label).collect();
    let report = evaluate_scores(&scores, &labels)?;
    write_scores_csv(out.join("scores.csv"), &scores, &labels)?;
    write_json(&out.join("report.json"), &report)?;
    println!(
        "{} jets: accuracy {:.4}, mean AUC {:.4}, mean rejection at {:.0}% efficiency {:.2}",
        jets.len(),
        report.accuracy,
        report.auc_mean,
        100.0 * REJECTION_EFFICIENCY,
        report.rejection_mean
    );
    Ok(())
}

/// Edges every 10 particles up to `n`, closed by `n + 1`.
fn default_bins(n: usize) -> Vec<usize> {
    let mut edges: Vec<usize> = (0..=n).step_by(10).collect();
    edges.push(n + 1);
    edges
}

fn binned_eval(s: &Settings, inputs: &EvalInputs, bins: Option<Vec<usize>>) -> CliResult<()> {
    let out = s.out_dir()?;
    let (model, jets, scores) = score(inputs)?;
    let edges = bins.unwrap_or_else(|| default_bins(model.config().n));
    let rows = binned_accuracy_scores(&scores, &jets, &edges)?;
    write_bins_csv(out.join("bins.csv"), &rows)?;
    for b in &rows {
        let acc = b.accuracy.map_or_else(|| "-".to_string(), |a| format!("{a:.4}"));
        println!("[{:>3}, {:>3}) {:>6} jets  accuracy {acc}", b.lo, b.hi, b.count);
    }
    Ok(())
}

fn flops(s: &Settings, batch: usize, scan: Option<Vec<usize>>) -> CliResult<()> {
    let cfg = &s.model;
    let report = cost_report(cfg, batch)?;
    println!("{}", with_commas(report.flops));
    println!("params: {}", with_commas(report.params as u64));
    println!(
        "activation memory: {} bytes (batch {batch}, {})",
        with_commas(report.activation_bytes as u64),
        dtype_name(cfg.dtype)
    );
    let out = match (&scan, s.optional_out_dir()?) {
        (Some(_), None) => return Err(CliError::Usage("--scan requires --out DIR".into())),
        (_, out) => out,
    };
    if let Some(out) = out {
        write_cost_csv(out.join("cost.csv"), &[(cfg.variant.to_string(), report)])?;
        if let Some(ns) = scan {
            let table = flops_scaling_table(cfg, &ns)?;
            write_scaling_csv(out.join("scaling.csv"), &cfg.variant.to_string(), &table)?;
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct BenchRecord {
    variant: String,
    n: usize,
    #[serde(flatten)]
    latency: LatencyReport,
}

fn bench(s: &Settings, checkpoint: Option<&Path>, reps: usize, warmup: usize, batch: usize) -> CliResult<()> {
    let model = match checkpoint {
        Some(path) => load_checkpoint(path)?,
        None => build_model(&s.model)?,
    };
    // Latency is measured in single precision unless asked otherwise.
    let dtype = if s.is_explicit("dtype") { s.model.dtype } else { DType::F32 };
    let cfg = model.config();
    let raw = generate_synthetic(s.seed, batch, &SynthSpec::default())?;
    let jets = prepare_jets(&raw, cfg.n, 0.0, cfg.sort_key);
    let refs: Vec<&Jet> = jets.iter().collect();
    let latency = match dtype {
        DType::F32 => time::<f32>(&model, &refs, reps, warmup)?,
        DType::F64 => time::<f64>(&model, &refs, reps, warmup)?,
    };
    println!(
        "{} n={} batch {batch} {}: {:.3} +/- {:.3} us per jet over {reps} reps",
        cfg.variant,
        cfg.n,
        dtype_name(dtype), latency.mean_us, latency.std_us
    );
    if let Some(out) = s.optional_out_dir()? {
        let record = BenchRecord { variant: cfg.variant.to_string(), n: cfg.n, latency };
        write_json(&out.join("latency.json"), &record)?;
    }
    Ok(())
}

fn dtype_name(dtype: DType) -> &'static str {
    match dtype {
        DType::F32 => "f32",
        DType::F64 => "f64",
    }
}

fn time<T: Scalar>(model: &Model, jets: &[&Jet], reps: usize, warmup: usize) -> CliResult<LatencyReport> {
    let batch: Tensor<T> = batch_tensor(jets)?;
    Ok(latency_bench(model, &batch, reps, warmup)?)
}

fn dump_attn(
    s: &Settings,
    checkpoint: Option<&Path>,
    scaler: Option<&Path>,
    data: Option<&Path>,
    index: usize,
    layer: usize,
) -> CliResult<()> {
    let out = s.out_dir()?;
    let model = match checkpoint {
        Some(path) => load_checkpoint(path)?,
        None => build_model(&s.model)?,
    };
    let cfg = model.config();
    if layer >= cfg.layers {
        return Err(CliError::Usage(format!("--layer {layer} but the model has {} layers", cfg.layers)));
    }
    let raw = match data {
        Some(path) => read_jets(path)?,
        None => generate_synthetic(s.seed, index + 1, &SynthSpec::default())?,
    };
    let Some(raw_jet) = raw.get(index) else {
        return Err(CliError::Usage(format!("--jet {index} but the file holds {} jets", raw.len())));
    };
    // An explicit scaler must exist; the one beside a checkpoint is used when present.
    let prep_path = match (scaler, checkpoint) {
        (Some(p), _) => Some(p.to_path_buf()),
        (None, Some(c)) => Some(scaler_path(c, None)).filter(|p| p.exists()),
        (None, None) => None,
    };
    let jet = match prep_path {
        Some(p) => Preprocessing::load(&p)?.apply(std::slice::from_ref(raw_jet), cfg).remove(0),
        None => prepare_jets(std::slice::from_ref(raw_jet), cfg.n, 0.0, cfg.sort_key).remove(0),
    };

    let mut tape = Tape::<f64>::inference();
    let vars = model.place(&mut tape, false);
    let x = tape.constant(batch_tensor(&[&jet])?);
    let a = model.forward_tape(&mut tape, &vars, x)?.attention[layer];
    let first = |v| tape.value(v).index_axis0(0);
    let trace = AttentionTrace {
        pre_conv: first(a.pre_conv)?,
        post_conv: first(a.post_conv)?,
        weights: first(a.weights)?,
    };
    let files = write_trace_csv(out, &trace)?;
    println!(
        "wrote {} attention maps for jet {index} ({} particles), layer {layer}, to {}",
        files.len(),
        jet.multiplicity(),
        out.display()
    );
    Ok(())
}
