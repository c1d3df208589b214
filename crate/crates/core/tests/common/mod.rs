//! Fixtures shared by the integration tests.
#![allow(dead_code)]

use flatformer::features::{derive_sessions, make_batch, AugmentedSequence, Batch};
use flatformer::model::{FlatFormer, ModelConfig, Variant};
use flatformer::numerics::gradcheck::max_relative_error;
use flatformer::numerics::Graph;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn sequence(student: &str, exercises: &[usize], responses: &[u8], timestamps: &[f64], gap: f64) -> AugmentedSequence {
    let (session_ids, session_steps) = derive_sessions(timestamps, gap).unwrap();
    AugmentedSequence {
        student: student.into(),
        exercises: exercises.to_vec(),
        responses: responses.to_vec(),
        timestamps: timestamps.to_vec(),
        session_ids,
        session_steps,
        score_from: 0,
        source_len: exercises.len(),
    }
}

/// Random sequence with a mix of short and session-breaking gaps.
pub fn random_sequence(rng: &mut ChaCha8Rng, len: usize, vocab: usize) -> AugmentedSequence {
    let mut t = rng.random_range(0.0..1e6);
    let mut ts = Vec::with_capacity(len);
    for _ in 0..len {
        ts.push(t);
        t += if rng.random_bool(0.15) {
            rng.random_range(700.0..20_000.0)
        } else {
            rng.random_range(0.0..5.0)
        };
    }
    let ex: Vec<usize> = (0..len).map(|_| rng.random_range(1..=vocab)).collect();
    let resp: Vec<u8> = (0..len).map(|_| rng.random_bool(0.6) as u8).collect();
    sequence("r", &ex, &resp, &ts, 600.0)
}

/// The small configuration used for gradient checks.
pub fn tiny_config(variant: Variant) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        layers: 1,
        heads: 2,
        d_ff: 32,
        vocab_size: 5,
        max_sessions: 16,
        max_len: 16,
        beta: 0.1,
        dropout: 0.0,
        variant,
        init_std: 0.3,
        ..ModelConfig::default()
    }
}

/// Two length-6 sequences, the second padded from length 4, each with a
/// session break.
pub fn tiny_batch() -> Batch {
    let a = sequence("a", &[1, 2, 3, 2, 5, 4], &[1, 0, 1, 1, 0, 1], &[0.0, 2.0, 5.0, 900.0, 901.0, 930.0], 600.0);
    let b = sequence("b", &[3, 3, 1, 4], &[0, 1, 1, 0], &[10.0, 11.0, 2000.0, 2004.0], 600.0);
    make_batch(&[&a, &b])
}

/// Max relative error between back-propagated and central-difference
/// gradients of the mean training loss.
pub fn model_gradient_error(config: &ModelConfig, seed: u64) -> f64 {
    let model: FlatFormer<f64> = FlatFormer::new(config.clone(), seed).unwrap();
    let batch = tiny_batch();
    let masks = model.masks(&batch).unwrap();
    let loss_of = |m: &FlatFormer<f64>, g: &mut Graph<f64>| {
        let p = m.params.bind(g);
        let fwd = m.forward(g, &p, &batch, &masks).unwrap();
        let l = m.loss(g, &fwd, &batch).unwrap();
        (p, l)
    };
    let mut g = Graph::eval();
    let (p, l) = loss_of(&model, &mut g);
    let mut grads = g.backward(l).unwrap();
    let analytic = p.gradients(&model.params, &mut grads);
    max_relative_error(&model.params, &analytic, 1e-5, |params| {
        let m = FlatFormer { config: config.clone(), params: params.clone() };
        let mut g = Graph::eval();
        let (_, l) = loss_of(&m, &mut g);
        g.value(l).data()[0]
    })
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Synthetic students run through session derivation and the session split.
pub fn synth_split(config: &flatformer::synth::SynthConfig, max_len: usize) -> flatformer::features::DatasetSplit {
    use flatformer::features::{augment, split_by_sessions, SplitConfig, DEFAULT_SESSION_GAP_MINUTES};
    let data = flatformer::synth::generate(config).unwrap();
    let full = augment(&data.to_log(), DEFAULT_SESSION_GAP_MINUTES).unwrap();
    split_by_sessions(&full, &SplitConfig { max_len, ..SplitConfig::default() })
}
