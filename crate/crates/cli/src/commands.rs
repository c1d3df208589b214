use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use flatformer::eval::{self, export_attention as export, latency_bench, paired_latency, synthetic_batch};
use flatformer::features::{
    prepare, read_jsonl, write_jsonl, AugmentedSequence, CleaningReport, DatasetSplit, DatasetStats, ParseReport, Schema,
    StudentSplit,
};
use flatformer::model::{FlatFormer, ModelConfig, Variant};
use flatformer::numerics::{stored_scalar, Checkpoint};
use flatformer::synth::{generate, oracle_auc};
use flatformer::training::{beta_sweep, run_matrix, write_curve_csv, write_runs_jsonl, MatrixResult};
use flatformer::Scalar;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::{resolve, Override, Precision, Resolved, RunConfig};
use crate::error::{io_err, CliError, CliResult};
use crate::manifest::RunManifest;
use crate::{Common, ModelFlags, OUT_ENV};

macro_rules! with_scalar {
    ($precision:expr, $f:ident ( $($arg:expr),* $(,)? )) => {
        match $precision {
            Precision::F64 => $f::<f64>($($arg),*),
            Precision::F32 => $f::<f32>($($arg),*),
        }
    };
}

/// Metadata written by `derive` beside the shards.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DataInfo {
    pub vocab_size: usize,
    pub session_gap_minutes: f64,
    pub stats: DatasetStats,
    pub parse: ParseReport,
    pub cleaning: CleaningReport,
    pub students: Vec<StudentSplit>,
}

const SHARDS: [&str; 3] = ["train", "validation", "test"];

fn out_dir(common: &Common, command: &str) -> CliResult<PathBuf> {
    let dir = match &common.out {
        Some(d) => d.clone(),
        None => std::env::var_os(OUT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("runs"))
            .join(command),
    };
    std::fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    Ok(dir)
}

fn set_overrides(common: &Common) -> CliResult<Vec<Override>> {
    common.set.iter().map(|s| Override::parse_set(s)).collect()
}

fn model_overrides(flags: &ModelFlags) -> CliResult<Vec<Override>> {
    let mut o = Vec::new();
    if let Some(s) = flags.seed {
        o.push(Override::new("--seed", "train.seeds", Value::from(vec![s])));
    }
    if let Some(v) = &flags.variant {
        let v = Variant::from_str(v).map_err(CliError::from_config)?;
        o.push(Override::new("--variant", "model.variant", Value::from(v.as_str())));
    }
    if let Some(b) = flags.beta {
        o.push(Override::new("--beta", "model.beta", Value::from(b)));
    }
    if let Some(l) = flags.max_len {
        o.push(Override::new("--max-len", "model.max_len", Value::from(l)));
        o.push(Override::new("--max-len", "split.max_len", Value::from(l)));
    }
    Ok(o)
}

fn resolve_with(common: &Common, mut flags: Vec<Override>) -> CliResult<Resolved> {
    flags.extend(set_overrides(common)?);
    resolve(common.config.as_deref(), &flags)
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(flatformer::Error::from)?;
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

fn load_data(dir: &Path) -> CliResult<(DataInfo, DatasetSplit)> {
    let info_path = dir.join("dataset.json");
    let text = std::fs::read_to_string(&info_path).map_err(|e| io_err(&info_path, e))?;
    let info: DataInfo = serde_json::from_str(&text).map_err(flatformer::Error::from)?;
    let mut shards = SHARDS.iter().map(|s| read_jsonl(&dir.join(format!("{s}.jsonl"))));
    let split = DatasetSplit {
        train: shards.next().unwrap()?,
        validation: shards.next().unwrap()?,
        test: shards.next().unwrap()?,
        manifest: info.students.clone(),
    };
    Ok((info, split))
}

/// Take the vocabulary from the data unless the config file pins another.
fn bind_vocab(resolved: &mut Resolved, info: &DataInfo) -> CliResult<()> {
    if let Some(v) = resolved.file_sets("model.vocab_size") {
        if v.as_u64() != Some(info.vocab_size as u64) {
            return Err(CliError::Usage(format!(
                "config sets model.vocab_size = {v} but the data has {} exercises",
                info.vocab_size
            )));
        }
    }
    resolved.config.model.vocab_size = info.vocab_size;
    resolved.config.model.validate().map_err(CliError::from_config)
}

fn pick_split<'a>(split: &'a DatasetSplit, name: &str) -> CliResult<&'a [AugmentedSequence]> {
    match name {
        "train" => Ok(&split.train),
        "validation" => Ok(&split.validation),
        "test" => Ok(&split.test),
        other => Err(CliError::Usage(format!("unknown split {other:?}; use train, validation or test"))),
    }
}

fn first_seed(config: &RunConfig) -> Option<u64> {
    config.train.seeds.first().copied()
}

pub fn synth(common: &Common, seed: Option<u64>) -> CliResult<()> {
    let mut flags = Vec::new();
    if let Some(s) = seed {
        flags.push(Override::new("--seed", "synth.seed", Value::from(s)));
    }
    let resolved = resolve_with(common, flags)?;
    let config = &resolved.config.synth;
    let out = out_dir(common, "synth")?;
    let data = generate(config)?;
    let mut manifest = RunManifest::new("synth", &resolved.config, Some(config.seed));
    let files = [
        ("log.csv", out.join("log.csv")),
        ("probabilities.csv", out.join("probabilities.csv")),
        ("synth.json", out.join("synth.json")),
    ];
    data.write_csv(&files[0].1)?;
    data.write_sidecar(&files[1].1)?;
    data.write_config(&files[2].1)?;
    let oracle = oracle_auc(&data);
    write_json(&out.join("oracle.json"), &serde_json::json!({ "oracle_auc": oracle, "rows": data.rows.len() }))?;
    for (_, p) in &files {
        manifest.output(p);
    }
    manifest.output(out.join("oracle.json"));
    manifest.write(&out)?;
    println!(
        "synthetic log: {} students, {} skills, {} interactions",
        config.students,
        config.skills,
        data.rows.len()
    );
    match oracle {
        Some(a) => println!("oracle AUC (generative ceiling): {a:.4}"),
        None => println!("oracle AUC undefined (single class)"),
    }
    println!("wrote {}", out.display());
    Ok(())
}

pub fn derive(common: &Common, input: &Path, schema: Option<&Path>, gap_hours: Option<f64>, max_len: Option<usize>) -> CliResult<()> {
    let mut flags = Vec::new();
    if let Some(h) = gap_hours {
        flags.push(Override::new("--gap-hours", "clean.session_gap_minutes", Value::from(h * 60.0)));
    }
    if let Some(l) = max_len {
        flags.push(Override::new("--max-len", "split.max_len", Value::from(l)));
        flags.push(Override::new("--max-len", "model.max_len", Value::from(l)));
    }
    let resolved = resolve_with(common, flags)?;
    let schema = match schema {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Usage(format!("cannot read schema {}: {e}", p.display())))?;
            Schema::from_json(&text).map_err(CliError::from_config)?
        }
        None => Schema::default(),
    };
    let config = &resolved.config;
    let prepared = prepare(input, &schema, &config.clean, &config.split)?;
    let out = out_dir(common, "derive")?;
    let mut manifest = RunManifest::new("derive", config, None);
    manifest.input(input)?;
    for (name, seqs) in SHARDS.iter().zip([&prepared.split.train, &prepared.split.validation, &prepared.split.test]) {
        let path = out.join(format!("{name}.jsonl"));
        write_jsonl(&path, seqs)?;
        manifest.output(path);
    }
    let info = DataInfo {
        vocab_size: prepared.vocab_size,
        session_gap_minutes: config.clean.session_gap_minutes,
        stats: prepared.stats.clone(),
        parse: prepared.parse.clone(),
        cleaning: prepared.cleaning.clone(),
        students: prepared.split.manifest.clone(),
    };
    write_json(&out.join("dataset.json"), &info)?;
    manifest.output(out.join("dataset.json"));
    manifest.write(&out)?;
    println!("{}", prepared.stats);
    println!(
        "windows: {} train, {} validation, {} test ({} rows parsed, {} skipped, {} removed by cleaning)",
        prepared.split.train.len(),
        prepared.split.validation.len(),
        prepared.split.test.len(),
        prepared.parse.rows,
        prepared.parse.bad_rows,
        prepared.cleaning.input - prepared.cleaning.kept
    );
    println!("wrote {}", out.display());
    Ok(())
}

fn summary_table(result: &MatrixResult) -> String {
    let mut s = format!("{:<14} {:>6} {:>5} {:>17} {:>17}\n", "variant", "beta", "runs", "AUC", "ACC");
    for r in &result.summary {
        let _ = writeln!(
            s,
            "{:<14} {:>6} {:>5} {:>8.4} ± {:<6.4} {:>8.4} ± {:<6.4}",
            r.variant.as_str(),
            r.beta,
            r.runs,
            r.mean_auc,
            r.std_auc,
            r.mean_acc,
            r.std_acc
        );
    }
    s
}

fn matrix<T: Scalar>(config: &RunConfig, split: &DatasetSplit, variants: &[Variant], out: &Path) -> CliResult<MatrixResult> {
    Ok(run_matrix::<T>(&config.model, split, variants, &config.train, Some(out))?)
}

fn train_like(common: &Common, data: &Path, flags: &ModelFlags, command: &str, variants: Option<&[Variant]>) -> CliResult<()> {
    let mut resolved = resolve_with(common, model_overrides(flags)?)?;
    let (info, split) = load_data(data)?;
    bind_vocab(&mut resolved, &info)?;
    let config = &resolved.config;
    let variants = variants.map(<[Variant]>::to_vec).unwrap_or_else(|| vec![config.model.variant]);
    let out = out_dir(common, command)?;
    let result = with_scalar!(config.precision, matrix(config, &split, &variants, &out))?;
    result.write(&out)?;
    let mut manifest = RunManifest::new(command, config, first_seed(config));
    manifest.input(data)?;
    for r in &result.runs {
        if let Some(c) = &r.checkpoint {
            manifest.output(c);
        }
    }
    manifest.output(out.join("runs.jsonl"));
    manifest.output(out.join("summary.csv"));
    manifest.write(&out)?;
    print!("{}", summary_table(&result));
    println!("wrote {}", out.display());
    Ok(())
}

pub fn train(common: &Common, data: &Path, flags: &ModelFlags) -> CliResult<()> {
    train_like(common, data, flags, "train", None)
}

pub fn ablate(common: &Common, data: &Path, flags: &ModelFlags) -> CliResult<()> {
    train_like(common, data, flags, "ablate", Some(&Variant::ALL))
}

fn sweep<T: Scalar>(config: &RunConfig, split: &DatasetSplit, out: &Path) -> CliResult<()> {
    let (points, runs) = beta_sweep::<T>(&config.model, split, &config.train.betas, &config.train)?;
    write_curve_csv(&out.join("curve.csv"), &points)?;
    write_runs_jsonl(&out.join("runs.jsonl"), &runs)?;
    println!("{:>6} {:>5} {:>17}", "beta", "runs", "AUC");
    for p in &points {
        println!("{:>6} {:>5} {:>8.4} ± {:<6.4}", p.beta, p.runs, p.mean_auc, p.std_auc);
    }
    Ok(())
}

pub fn sweep_beta(common: &Common, data: &Path, flags: &ModelFlags) -> CliResult<()> {
    let mut resolved = resolve_with(common, model_overrides(flags)?)?;
    let (info, split) = load_data(data)?;
    bind_vocab(&mut resolved, &info)?;
    let config = &resolved.config;
    if config.model.variant != Variant::Full {
        return Err(CliError::Usage(format!("sweep-beta trains the full variant; config selects {}", config.model.variant)));
    }
    let out = out_dir(common, "sweep-beta")?;
    with_scalar!(config.precision, sweep(config, &split, &out))?;
    let mut manifest = RunManifest::new("sweep-beta", config, first_seed(config));
    manifest.input(data)?;
    manifest.output(out.join("curve.csv"));
    manifest.output(out.join("runs.jsonl"));
    manifest.write(&out)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn load_model<T: Scalar>(path: &Path) -> CliResult<FlatFormer<T>> {
    let ckpt: Checkpoint<T, ModelConfig> = Checkpoint::load(path)?;
    Ok(FlatFormer::from_params(ckpt.config, ckpt.params)?)
}

fn checkpoint_precision(path: &Path) -> CliResult<Precision> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    match stored_scalar(&text)?.as_str() {
        "f64" => Ok(Precision::F64),
        "f32" => Ok(Precision::F32),
        other => Err(CliError::Usage(format!("checkpoint stores unsupported scalar {other}"))),
    }
}

fn evaluate<T: Scalar>(
    checkpoint: &Path,
    seqs: &[AugmentedSequence],
    config: &RunConfig,
    bench: bool,
) -> CliResult<eval::EvalReport> {
    let model = load_model::<T>(checkpoint)?;
    let mut report = eval::evaluate(&model, seqs, config.train.eval_batch_size)?;
    if bench {
        let b = &config.bench;
        let batch = synthetic_batch(model.config.vocab_size, b.batch_size, model.config.max_len, 0);
        report.latency = Some(latency_bench(&model, &batch, b.warmup, b.reps)?);
    }
    Ok(report)
}

pub fn eval(common: &Common, checkpoint: &Path, data: &Path, split_name: &str, bench: bool) -> CliResult<()> {
    let resolved = resolve_with(common, Vec::new())?;
    let (_, split) = load_data(data)?;
    let seqs = pick_split(&split, split_name)?;
    let precision = checkpoint_precision(checkpoint)?;
    let report = with_scalar!(precision, evaluate(checkpoint, seqs, &resolved.config, bench))?;
    let out = out_dir(common, "eval")?;
    write_json(&out.join("report.json"), &report)?;
    let mut manifest = RunManifest::new("eval", &resolved.config, None);
    manifest.input(checkpoint)?;
    manifest.input(data)?;
    manifest.output(out.join("report.json"));
    manifest.write(&out)?;
    let fmt = |a: Option<f64>| a.map_or("n/a".to_string(), |v| format!("{v:.4}"));
    println!(
        "{} on {split_name}: AUC {}, ACC {:.4}, macro AUC {}, {} predictions",
        report.variant,
        fmt(report.auc),
        report.acc,
        fmt(report.macro_auc),
        report.predictions
    );
    for b in &report.length_buckets {
        println!("  length {:<10} {:>7} predictions, AUC {}", b.label, b.count, fmt(b.auc));
    }
    if let Some(l) = &report.latency {
        println!("  latency p50 {:.2} ms, p95 {:.2} ms over {} reps", l.p50_ms, l.p95_ms, l.reps);
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn has_boundary(s: &AugmentedSequence) -> bool {
    s.session_ids.windows(2).any(|w| w[0] != w[1])
}

fn export_one<T: Scalar>(checkpoint: &Path, seq: &AugmentedSequence, out: &Path) -> CliResult<Vec<PathBuf>> {
    let model = load_model::<T>(checkpoint)?;
    Ok(export(&model, seq)?.write_csv(out)?)
}

pub fn export_attention(common: &Common, checkpoint: &Path, data: &Path, split_name: &str, student: Option<&str>) -> CliResult<()> {
    let resolved = resolve_with(common, Vec::new())?;
    let (_, split) = load_data(data)?;
    let seqs = pick_split(&split, split_name)?;
    let seq = match student {
        Some(id) => seqs
            .iter()
            .find(|s| s.student == id)
            .ok_or_else(|| flatformer::Error::Data(format!("student {id} has no {split_name} window")))?,
        None => seqs
            .iter()
            .find(|s| has_boundary(s))
            .or(seqs.first())
            .ok_or_else(|| flatformer::Error::Data(format!("the {split_name} split is empty")))?,
    };
    let out = out_dir(common, "export-attention")?;
    let precision = checkpoint_precision(checkpoint)?;
    let files = with_scalar!(precision, export_one(checkpoint, seq, &out))?;
    let mut manifest = RunManifest::new("export-attention", &resolved.config, None);
    manifest.input(checkpoint)?;
    manifest.input(data)?;
    for f in &files {
        manifest.output(f);
    }
    manifest.write(&out)?;
    println!("student {} ({} steps, {} sessions): {} files", seq.student, seq.len(), seq.num_sessions(), files.len());
    println!("wrote {}", out.display());
    Ok(())
}

#[derive(Serialize)]
struct BenchRow {
    variant: Variant,
    params: usize,
    flops: f64,
    latency: eval::LatencyStats,
}

#[derive(Serialize)]
struct BenchReport {
    batch_size: usize,
    len: usize,
    variants: Vec<BenchRow>,
    /// Interleaved median ratio full / no_forgetting.
    full_over_no_forgetting: Option<f64>,
}

fn run_bench<T: Scalar>(config: &RunConfig, seed: u64) -> CliResult<BenchReport> {
    let b = &config.bench;
    let len = config.model.max_len;
    let batch = synthetic_batch(config.model.vocab_size, b.batch_size, len, seed);
    let mut rows = Vec::new();
    let mut built = Vec::new();
    for v in Variant::ALL {
        let mc = ModelConfig { variant: v, dropout: 0.0, ..config.model.clone() };
        if mc.validate().is_err() {
            continue;
        }
        let model = FlatFormer::<T>::new(mc.clone(), seed)?;
        rows.push(BenchRow {
            variant: v,
            params: model.num_params(),
            flops: eval::flops_estimate(&mc, b.batch_size, len).total,
            latency: latency_bench(&model, &batch, b.warmup, b.reps)?,
        });
        built.push((v, model));
    }
    let find = |v: Variant| built.iter().find(|(x, _)| *x == v).map(|(_, m)| m);
    let ratio = match (find(Variant::Full), find(Variant::NoForgetting)) {
        (Some(f), Some(n)) => {
            let (a, b2) = paired_latency(f, n, &batch, b.warmup, b.reps)?;
            Some(a.p50_ms / b2.p50_ms)
        }
        _ => None,
    };
    Ok(BenchReport {
        batch_size: b.batch_size,
        len,
        variants: rows,
        full_over_no_forgetting: ratio,
    })
}

pub fn bench(common: &Common, flags: &ModelFlags) -> CliResult<()> {
    let resolved = resolve_with(common, model_overrides(flags)?)?;
    let config = &resolved.config;
    let seed = first_seed(config).unwrap_or(0);
    let report = with_scalar!(config.precision, run_bench(config, seed))?;
    let out = out_dir(common, "bench")?;
    write_json(&out.join("bench.json"), &report)?;
    let mut manifest = RunManifest::new("bench", config, Some(seed));
    manifest.output(out.join("bench.json"));
    manifest.write(&out)?;
    println!("batch {} x {} steps", report.batch_size, report.len);
    for r in &report.variants {
        println!(
            "{:<14} {:>10} params  p50 {:>9.2} ms  p95 {:>9.2} ms",
            r.variant.as_str(),
            r.params,
            r.latency.p50_ms,
            r.latency.p95_ms
        );
    }
    if let Some(r) = report.full_over_no_forgetting {
        println!("full / no_forgetting median latency: {r:.3}");
    }
    println!("wrote {}", out.display());
    Ok(())
}
