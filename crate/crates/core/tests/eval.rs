mod common;

use common::{random_sequence, rng, tiny_config};
use flatformer::eval::{
    auc, count_params, export_attention, flops_estimate, length_buckets, predict, ParamBreakdown,
};
use flatformer::model::{FlatFormer, ModelConfig, Variant};
use proptest::prelude::*;
use rand::Rng;

/// Probability that a random positive outscores a random negative, ties 1/2.
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

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn auc_matches_pairwise_oracle(
        data in prop::collection::vec((0u8..12, any::<bool>()), 1..500)
    ) {
        // Coarse scores force many ties.
        let scores: Vec<f64> = data.iter().map(|(s, _)| *s as f64 / 11.0).collect();
        let labels: Vec<u8> = data.iter().map(|(_, l)| *l as u8).collect();
        match (auc(&scores, &labels), pairwise_auc(&scores, &labels)) {
            (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-12),
            (None, None) => {}
            other => prop_assert!(false, "{:?}", other),
        }
    }
}

#[test]
fn auc_on_random_continuous_scores() {
    let mut r = rng(2);
    let scores: Vec<f64> = (0..200).map(|_| r.random()).collect();
    let labels: Vec<u8> = scores.iter().map(|&s| r.random_bool(s) as u8).collect();
    let a = auc(&scores, &labels).unwrap();
    assert!((a - pairwise_auc(&scores, &labels).unwrap()).abs() < 1e-12);
}

#[test]
fn closed_form_counts_match_built_models() {
    for variant in Variant::ALL {
        for multi_rate in [false, true] {
            if multi_rate && !variant.uses_forgetting() {
                continue;
            }
            let c = ModelConfig {
                variant,
                multi_rate,
                vocab_size: 37,
                ..ModelConfig::default().with_width(32)
            };
            let c = ModelConfig { heads: 4, ..c };
            let m: FlatFormer<f64> = FlatFormer::new(c.clone(), 0).unwrap();
            let counted = count_params(&m);
            assert_eq!(counted, ParamBreakdown::closed_form(&c));
            assert_eq!(counted.total, m.num_params());
        }
    }
}

#[test]
fn accounting_examples_at_default_width() {
    let full = ModelConfig { vocab_size: 100, ..ModelConfig::default() };
    let b = ParamBreakdown::closed_form(&full);
    assert_eq!(b.session_embedding, 65_536);
    assert_eq!(b.forgetting, 0);
    let nf = ParamBreakdown::closed_form(&ModelConfig { variant: Variant::NoForgetting, ..full.clone() });
    assert_eq!(b.total, nf.total);
    let multi = ParamBreakdown::closed_form(&ModelConfig { multi_rate: true, ..full.clone() });
    assert_eq!(multi.total - b.total, 8);
    assert_eq!(multi.forgetting, 8);
    let backbone = ParamBreakdown::closed_form(&ModelConfig { variant: Variant::Backbone, ..full.clone() });
    assert_eq!(backbone.session_embedding, 0);
    assert_eq!(b.total - backbone.total, 512 * 128 - 200 * 128);
}

#[test]
fn flops_scaling() {
    let c = ModelConfig { vocab_size: 100, ..ModelConfig::default() };
    let a = flops_estimate(&c, 64, 100);
    let b = flops_estimate(&c, 64, 200);
    assert!((b.attention / a.attention - 4.0).abs() < 1e-12);
    assert!(flops_estimate(&c, 64, 200).bias_share() < 0.01);
    let one = flops_estimate(&c, 1, 1);
    assert!(one.feed_forward > one.attention + one.softmax + one.bias_injection);
}

#[test]
fn exported_attention_is_causal_and_row_stochastic() {
    let mut r = rng(4);
    let model: FlatFormer<f64> = FlatFormer::new(ModelConfig { layers: 2, ..tiny_config(Variant::Full) }, 1).unwrap();
    let s = random_sequence(&mut r, 25, 5);
    let e = export_attention(&model, &s).unwrap();
    for l in 0..2 {
        for h in 0..2 {
            for q in 0..e.len {
                let row: f64 = (0..=q).map(|k| e.weight(l, h, q, k)).sum();
                assert!((row - 1.0).abs() < 1e-6);
                assert!((q + 1..e.len).all(|k| e.weight(l, h, q, k) == 0.0));
            }
        }
    }
    let dir = tempfile::tempdir().unwrap();
    let files = e.write_csv(dir.path()).unwrap();
    assert_eq!(files.len(), 2 * 2 + 2);
    let text = std::fs::read_to_string(&files[0]).unwrap();
    assert!(text.starts_with("layer,head,query,key,weight"));
    assert_eq!(text.lines().count(), 1 + 25 * 25);
}

#[test]
fn buckets_recompute_global_auc_pieces() {
    let mut r = rng(6);
    let model: FlatFormer<f64> = FlatFormer::new(ModelConfig { vocab_size: 9, ..tiny_config(Variant::Full) }, 1).unwrap();
    let mut seqs = Vec::new();
    for i in 0..12 {
        let mut s = random_sequence(&mut r, 8 + i, 9);
        s.source_len = [10, 70, 150, 400][i % 4];
        seqs.push(s);
    }
    let p = predict(&model, &seqs, 5).unwrap();
    assert_eq!(p.len(), seqs.iter().map(|s| s.len()).sum::<usize>());
    let buckets = length_buckets(&p.scores, &p.labels, &p.source_lens, &[50, 100, 200]);
    assert_eq!(buckets.iter().map(|b| b.count).sum::<usize>(), p.len());
    for b in &buckets {
        let (s, l): (Vec<f64>, Vec<u8>) = p
            .scores
            .iter()
            .zip(&p.labels)
            .zip(&p.source_lens)
            .filter(|(_, &n)| n >= b.min_len && b.max_len.is_none_or(|m| n < m))
            .map(|((&s, &l), _)| (s, l))
            .unzip();
        match (b.auc, pairwise_auc(&s, &l)) {
            (Some(x), Some(y)) => assert!((x - y).abs() < 1e-12),
            (x, y) => assert_eq!(x, y),
        }
    }
    // Batch size does not change the predictions.
    let single = predict(&model, &seqs, 1).unwrap();
    assert_eq!(single.labels, p.labels);
    assert!(single.scores.iter().zip(&p.scores).all(|(a, b)| (a - b).abs() < 1e-12));
}
