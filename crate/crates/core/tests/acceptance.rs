//! Acceptance suite. Runs every criterion in order, prints one PASS/FAIL
//! line per criterion and exits non-zero if any failed.
//!
//! Criteria run sequentially (custom harness) so the latency measurement is
//! not disturbed by concurrent training.

mod common;

use std::time::{Duration, Instant};

use common::{model_gradient_error, random_sequence, rng, synth_split, tiny_config};
use flatformer::eval::{auc, count_params, export_attention, paired_latency, synthetic_batch, ParamBreakdown};
use flatformer::features::{derive_sessions, make_batch, time_lag_matrix, AugmentedSequence, DatasetSplit};
use flatformer::model::masks::forgetting_bias;
use flatformer::model::{FlatFormer, LagNorm, ModelConfig, Variant};
use flatformer::numerics::{Graph, Tensor};
use flatformer::synth::{generate, oracle_auc, SynthConfig};
use flatformer::training::{mean_std, train, RunRecord, TrainConfig, DEFAULT_BETAS};
use rand::Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Width used by every trained acceptance run.
fn desk_model(vocab: usize) -> ModelConfig {
    ModelConfig {
        d_model: 32,
        heads: 4,
        layers: 2,
        d_ff: 128,
        vocab_size: vocab,
        dropout: 0.2,
        ..ModelConfig::default()
    }
}

fn desk_training() -> TrainConfig {
    TrainConfig {
        epochs: 30,
        patience: 5,
        batch_size: 16,
        ..TrainConfig::default()
    }
}

// ---------------------------------------------------------------------------
// Independent oracles.

fn pairwise_auc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1.0;
                wins += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    (pairs > 0.0).then(|| wins / pairs)
}

/// Brute-force segmentation: compare every neighbour pair directly.
fn scan_sessions(ts: &[f64], gap: f64) -> (Vec<usize>, Vec<usize>) {
    let mut ids = Vec::new();
    let mut steps = Vec::new();
    for i in 0..ts.len() {
        let breaks = (1..=i).filter(|&k| ts[k] - ts[k - 1] > gap).count();
        let start = (0..=i).rev().find(|&k| k == 0 || ts[k] - ts[k - 1] > gap).unwrap();
        ids.push(breaks + 1);
        steps.push(i - start);
    }
    (ids, steps)
}

/// `-β ln(Δt' + 1)` straight from the timestamps.
fn forget_oracle(ts: &[f64], beta: f64, t: usize, j: usize, norm: LagNorm) -> f64 {
    let span = match norm {
        LagNorm::Prefix => ts[t] - ts[0],
        LagNorm::Window => ts[ts.len() - 1] - ts[0],
    };
    -beta * ((ts[t] - ts[j]) / span.max(1.0) + 1.0).ln()
}

fn random_timestamps(r: &mut impl Rng, len: usize) -> Vec<f64> {
    let mut t = r.random_range(0.0..1e7);
    (0..len)
        .map(|_| {
            let now = t;
            t += match r.random_range(0..4) {
                0 => 0.0,
                1 => r.random_range(0.0..3.0),
                2 => r.random_range(0.0..100.0),
                _ => r.random_range(500.0..50_000.0),
            };
            now
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Criteria that need no training.

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for variant in Variant::ALL {
        worst = worst.max(model_gradient_error(&tiny_config(variant), 7));
    }
    let secs = start.elapsed().as_secs_f64();
    check(worst < 1e-4 && secs < 30.0, format!("max rel err {worst:.2e} over 4 variants, {secs:.1}s"))
}

fn mask_invariants() -> Outcome {
    let mut r = rng(21);
    let config = ModelConfig { max_len: 64, vocab_size: 20, max_sessions: 64, ..desk_model(20) };
    let config = ModelConfig { dropout: 0.0, init_std: 0.3, ..config };
    let model: FlatFormer<f64> = FlatFormer::new(config, 3).unwrap();
    let (mut future, mut row_err, mut leaks): (f64, f64, usize) = (0.0, 0.0, 0);
    for _ in 0..100 {
        let len = r.random_range(3..=60);
        let s = random_sequence(&mut r, len, 20);
        let maps = model.attention_maps(&make_batch(&[&s])).unwrap();
        for m in &maps {
            let (h, l) = (m.shape()[1], m.shape()[2]);
            let d = m.data();
            for head in 0..h {
                for q in 0..l {
                    let row = &d[(head * l + q) * l..(head * l + q + 1) * l];
                    future = future.max(row[q + 1..].iter().fold(0.0, |a, &v| a.max(v.abs())));
                    row_err = row_err.max((row.iter().sum::<f64>() - 1.0).abs());
                }
            }
        }
        // Rewrite everything after t and compare p_0..p_t bit for bit.
        let t = r.random_range(0..len - 1);
        let base = model.predict_batch(&make_batch(&[&s])).unwrap();
        let mut p = s.clone();
        let mut ts = s.timestamps[..=t].to_vec();
        let mut clock = ts[t];
        for k in t + 1..len {
            clock += r.random_range(0.0..2000.0);
            ts.push(clock);
            p.exercises[k] = r.random_range(1..=20);
            p.responses[k] = r.random_bool(0.5) as u8;
        }
        let (ids, steps) = derive_sessions(&ts, 600.0).unwrap();
        p.timestamps = ts;
        p.session_ids = ids;
        p.session_steps = steps;
        let perturbed = model.predict_batch(&make_batch(&[&p])).unwrap();
        if base[..=t] != perturbed[..=t] {
            leaks += 1;
        }
    }
    check(
        future == 0.0 && row_err <= 1e-6 && leaks == 0,
        format!("max future weight {future}, max |row sum - 1| {row_err:.1e}, sequences with leaked perturbation {leaks}/100"),
    )
}

fn forgetting_bias_correctness() -> Outcome {
    let mut r = rng(31);
    let (mut err, mut diag, mut monotone_breaks): (f64, f64, usize) = (0.0, 0.0, 0);
    for _ in 0..1000 {
        let len = r.random_range(1..=40);
        let ts = random_timestamps(&mut r, len);
        let beta = r.random_range(0.0..1.0);
        let lags = time_lag_matrix(&ts);
        for norm in [LagNorm::Prefix, LagNorm::Window] {
            let m = forgetting_bias(&lags, beta, norm).unwrap();
            for t in 0..len {
                diag = diag.max(m[t * len + t].abs());
                for j in 0..=t {
                    err = err.max((m[t * len + j] - forget_oracle(&ts, beta, t, j, norm)).abs());
                    // Older keys (larger lag) never get a larger bias.
                    for k in j..=t {
                        if ts[t] - ts[j] >= ts[t] - ts[k] && m[t * len + j] > m[t * len + k] {
                            monotone_breaks += 1;
                        }
                    }
                }
            }
        }
    }
    // softmax(A + M) against exp(M)·exp(A), row-normalized.
    let mut equiv: f64 = 0.0;
    for _ in 0..100 {
        let len = r.random_range(2..=30);
        let ts = random_timestamps(&mut r, len);
        let m = forgetting_bias(&time_lag_matrix(&ts), 0.5, LagNorm::Prefix).unwrap();
        let logits: Vec<f64> = (0..len * len).map(|_| r.random_range(-5.0..5.0)).collect();
        let mut g = Graph::<f64>::eval();
        let a = g.constant(Tensor::new(&[1, 1, len, len], logits.clone()).unwrap());
        let biased = g.add_attention_bias(a, &Tensor::new(&[1, len, len], m.clone()).unwrap()).unwrap();
        let sm = g.softmax_lastdim(biased);
        let sm = g.value(sm).data().to_vec();
        for t in 0..len {
            let w: Vec<f64> = (0..len).map(|j| m[t * len + j].exp() * logits[t * len + j].exp()).collect();
            let z: f64 = w.iter().sum();
            for j in 0..len {
                equiv = equiv.max((sm[t * len + j] - w[j] / z).abs());
            }
        }
    }
    check(
        err <= 1e-12 && diag == 0.0 && monotone_breaks == 0 && equiv <= 1e-9,
        format!("max |M - oracle| {err:.1e}, max |diag| {diag}, monotonicity breaks {monotone_breaks}, softmax equivalence {equiv:.1e}"),
    )
}

fn session_oracle() -> Outcome {
    let mut r = rng(41);
    let gap = 600.0;
    let mut mismatches = 0;
    let mut boundary_cases = 0;
    for _ in 0..1000 {
        let len = r.random_range(0..=60);
        let mut t = r.random_range(0.0..1e6);
        let mut ts = Vec::with_capacity(len);
        for _ in 0..len {
            ts.push(t);
            t += match r.random_range(0..6) {
                0 => gap,
                1 => gap + 1e-6,
                2 => 0.0,
                3 => r.random_range(0.0..gap),
                4 => r.random_range(gap..10.0 * gap),
                _ => r.random_range(0.0..5.0),
            };
        }
        boundary_cases += ts.windows(2).filter(|w| w[1] - w[0] == gap).count();
        let got = derive_sessions(&ts, gap).unwrap();
        if got != scan_sessions(&ts, gap) {
            mismatches += 1;
        }
    }
    // A gap of exactly Δ_gap stays in the session.
    let (ids, _) = derive_sessions(&[0.0, gap, 2.0 * gap + 1e-3], gap).unwrap();
    check(
        mismatches == 0 && boundary_cases > 0 && ids == [1, 1, 2],
        format!("{mismatches}/1000 mismatches, {boundary_cases} exact-gap steps exercised"),
    )
}

fn parameter_economy() -> Outcome {
    let defaults = ModelConfig::default();
    let b = ParamBreakdown::closed_form(&defaults);
    // Vocabulary of the largest benchmark, where the overhead claim is made.
    let big = ModelConfig { vocab_size: 171_143, ..defaults.clone() };
    let full = ParamBreakdown::closed_form(&big);
    let backbone = ParamBreakdown::closed_form(&ModelConfig { variant: Variant::Backbone, ..big.clone() });
    let overhead = (full.total - backbone.total) as f64 / backbone.total as f64;
    // The closed form must agree with a built model.
    let small = ModelConfig { vocab_size: 50, ..defaults.clone() };
    let built: FlatFormer<f32> = FlatFormer::new(small.clone(), 0).unwrap();
    let counted = count_params(&built);
    check(
        b.session_embedding == defaults.max_sessions * defaults.d_model
            && b.session_embedding == 65_536
            && b.session_embedding < 100_000
            && b.forgetting == 0
            && full.forgetting == 0
            && overhead < 0.01
            && counted == ParamBreakdown::closed_form(&small),
        format!(
            "E_S {} params, forgetting {} params, full {} vs backbone {} (+{:.3}%)",
            b.session_embedding,
            b.forgetting,
            full.total,
            backbone.total,
            100.0 * overhead
        ),
    )
}

fn zero_latency_injection() -> Outcome {
    let config = ModelConfig { dropout: 0.0, ..desk_model(50) };
    let full: FlatFormer<f32> = FlatFormer::new(config.clone(), 0).unwrap();
    let plain: FlatFormer<f32> = FlatFormer::new(ModelConfig { variant: Variant::NoForgetting, ..config }, 0).unwrap();
    let batch = synthetic_batch(50, 64, 200, 5);
    let (a, b) = paired_latency(&full, &plain, &batch, 3, 30).unwrap();
    let ratio = a.p50_ms / b.p50_ms;
    check(
        ratio <= 1.05,
        format!("median {:.2} ms (full) vs {:.2} ms (no_forgetting), ratio {ratio:.3}", a.p50_ms, b.p50_ms),
    )
}

fn metric_oracle() -> Outcome {
    let mut r = rng(91);
    let mut worst: f64 = 0.0;
    let mut undefined_mismatch = 0;
    for case in 0..1000 {
        let n = 1 + case % 500;
        let levels = if case % 2 == 0 { 7 } else { 1000 };
        let scores: Vec<f64> = (0..n).map(|_| r.random_range(0..levels) as f64 / levels as f64).collect();
        let labels: Vec<u8> = (0..n).map(|_| r.random_bool(0.4) as u8).collect();
        match (auc(&scores, &labels), pairwise_auc(&scores, &labels)) {
            (Some(a), Some(b)) => worst = worst.max((a - b).abs()),
            (None, None) => {}
            _ => undefined_mismatch += 1,
        }
    }
    check(
        worst <= 1e-12 && undefined_mismatch == 0,
        format!("max |AUC - pairwise| {worst:.1e} over 1000 inputs (n <= 500, with ties)"),
    )
}

fn overfit_sanity() -> Outcome {
    let mut r = rng(101);
    let seqs: Vec<AugmentedSequence> = (0..10).map(|_| random_sequence(&mut r, 30, 10)).collect();
    let split = DatasetSplit { train: seqs.clone(), validation: seqs, test: vec![], manifest: vec![] };
    let model = ModelConfig { dropout: 0.0, max_len: 64, ..desk_model(10) };
    let config = TrainConfig {
        epochs: 50,
        patience: 49,
        lr: 5e-3,
        batch_size: 2,
        weight_decay: 0.0,
        seeds: vec![0],
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let run = train::<f32>(&model, &split, &config, 0, None).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let auc = run.record.best_validation_auc.unwrap_or(0.0);
    let first = run.record.epochs.iter().position(|e| e.validation_auc.unwrap_or(0.0) > 0.95);
    check(
        auc > 0.95 && secs < 120.0,
        format!("train AUC {auc:.4} (first > 0.95 at epoch {:?}), {secs:.1}s", first.map(|e| e + 1)),
    )
}

// ---------------------------------------------------------------------------
// Criteria on the default synthetic dataset.

struct TrainedPair {
    record: RunRecord,
    model: FlatFormer<f32>,
}

struct Desk {
    split: DatasetSplit,
    oracle: f64,
    /// Indexed like `Variant::ALL`, then by seed.
    runs: Vec<Vec<TrainedPair>>,
    elapsed: Duration,
}

fn desk() -> Desk {
    let synth = SynthConfig::default();
    let oracle = oracle_auc(&generate(&synth).unwrap()).unwrap();
    let split = synth_split(&synth, 200);
    let config = desk_training();
    let start = Instant::now();
    let runs = Variant::ALL
        .iter()
        .map(|&variant| {
            let mc = ModelConfig { variant, ..desk_model(synth.skills) };
            config
                .seeds
                .iter()
                .map(|&seed| {
                    let run = train::<f32>(&mc, &split, &config, seed, None).unwrap();
                    eprintln!(
                        "  trained {variant} seed {seed}: best epoch {}, test AUC {:.4}",
                        run.record.best_epoch,
                        run.record.test_auc().unwrap()
                    );
                    TrainedPair { record: run.record, model: run.model }
                })
                .collect()
        })
        .collect();
    Desk { split, oracle, runs, elapsed: start.elapsed() }
}

impl Desk {
    fn aucs(&self, v: Variant) -> Vec<f64> {
        let i = Variant::ALL.iter().position(|&x| x == v).unwrap();
        self.runs[i].iter().map(|r| r.record.test_auc().unwrap()).collect()
    }

    fn mean(&self, v: Variant) -> f64 {
        mean_std(&self.aucs(v)).0
    }

    fn runs(&self, v: Variant) -> &[TrainedPair] {
        &self.runs[Variant::ALL.iter().position(|&x| x == v).unwrap()]
    }
}

fn ablation_ordering(d: &Desk) -> Outcome {
    let [backbone, no_session, no_forgetting, full] = Variant::ALL.map(|v| d.mean(v));
    let ok = full > no_forgetting
        && full > no_session
        && no_session > backbone
        && no_forgetting > backbone
        && full - backbone >= 0.02
        && d.elapsed < Duration::from_secs(3600);
    let best_full = d.aucs(Variant::Full).into_iter().fold(0.0, f64::max);
    check(
        ok,
        format!(
            "mean test AUC backbone {backbone:.4}, no_session {no_session:.4}, no_forgetting {no_forgetting:.4}, full {full:.4} \
             (full - backbone {:+.4}; oracle {:.4}, best full {best_full:.4}); {:.0}s",
            full - backbone,
            d.oracle,
            d.elapsed.as_secs_f64()
        ),
    )
}

fn beta_sensitivity(d: &Desk) -> Outcome {
    let config = desk_training();
    let base = desk_model(SynthConfig::default().skills);
    let mut means = Vec::new();
    for &beta in &DEFAULT_BETAS {
        let aucs: Vec<f64> = if beta == base.beta {
            d.aucs(Variant::Full)
        } else {
            config
                .seeds
                .iter()
                .map(|&seed| {
                    let mc = ModelConfig { beta, ..base.clone() };
                    let run = train::<f32>(&mc, &d.split, &config, seed, None).unwrap();
                    eprintln!("  trained beta {beta} seed {seed}: test AUC {:.4}", run.record.test_auc().unwrap());
                    run.record.test_auc().unwrap()
                })
                .collect()
        };
        means.push(mean_std(&aucs).0);
    }
    let at = |b: f64| means[DEFAULT_BETAS.iter().position(|&x| x == b).unwrap()];
    let drop = at(0.1) - at(0.5);
    let plateau = (at(0.05) - at(0.2)).abs();
    let curve: Vec<String> = DEFAULT_BETAS.iter().zip(&means).map(|(b, m)| format!("{b}:{m:.4}")).collect();
    check(
        at(0.1) >= at(0.5) && at(0.1) >= at(0.01) && drop > 0.0 && plateau <= 0.5 * drop,
        format!("mean test AUC by beta [{}], drop at 0.5 {drop:+.5}, |AUC(0.05) - AUC(0.2)| {plateau:.5}", curve.join(", ")),
    )
}

fn attention_reproduction(d: &Desk) -> Outcome {
    // First held-out window whose scored part opens a new session after a long gap.
    let seq = d
        .split
        .test
        .iter()
        .find(|s| s.score_from > 20 && s.session_ids[s.score_from] != s.session_ids[s.score_from - 1])
        .expect("a test window with a session boundary");
    let boundary = seq.score_from;
    let gap_hours = (seq.timestamps[boundary] - seq.timestamps[boundary - 1]) / 60.0;
    let mut wins = 0;
    let mut pairs = Vec::new();
    for (f, n) in d.runs(Variant::Full).iter().zip(d.runs(Variant::NoForgetting)) {
        let mf = export_attention(&f.model, seq).unwrap().pre_boundary_mass(boundary);
        let mn = export_attention(&n.model, seq).unwrap().pre_boundary_mass(boundary);
        wins += (mf < mn) as usize;
        pairs.push(format!("{mf:.4}/{mn:.4}"));
    }
    let seeds = pairs.len();
    check(
        2 * wins > seeds,
        format!(
            "pre-gap mass full/no_forgetting per seed [{}] on a {}-step window with a {gap_hours:.1} h gap at {boundary}; full lower in {wins}/{seeds}",
            pairs.join(", "),
            seq.len()
        ),
    )
}

fn main() {
    let mut failed = 0;
    let mut report = |n: usize, name: &str, f: &dyn Fn() -> Outcome| {
        let start = Instant::now();
        let outcome = f();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n:>2} [{name}] PASS ({secs:.1}s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n:>2} [{name}] FAIL ({secs:.1}s): {detail}");
            }
        }
    };
    report(1, "gradient fidelity", &gradient_fidelity);
    report(2, "mask invariants", &mask_invariants);
    report(3, "forgetting bias", &forgetting_bias_correctness);
    report(4, "session derivation", &session_oracle);
    report(7, "parameter economy", &parameter_economy);
    report(8, "zero-latency injection", &zero_latency_injection);
    report(9, "metric oracle", &metric_oracle);
    report(10, "overfit sanity", &overfit_sanity);
    let d = desk();
    report(5, "ablation ordering", &|| ablation_ordering(&d));
    report(11, "attention reproduction", &|| attention_reproduction(&d));
    report(6, "beta sensitivity", &|| beta_sensitivity(&d));
    if failed > 0 {
        println!("acceptance: {failed} criteria failed");
        std::process::exit(1);
    }
    println!("acceptance: all criteria passed");
}
