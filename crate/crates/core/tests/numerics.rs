use flatformer::numerics::gradcheck::max_relative_error;
use flatformer::numerics::{Graph, ParamStore, Tensor, MASK_SENTINEL};
use flatformer::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, v).unwrap()
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    t(shape, &(0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>())
}

/// Gradient check of a scalar function of named parameters, h = 1e-5.
fn check(params: ParamStore<f64>, f: impl Fn(&mut Graph<f64>, &flatformer::numerics::BoundParams) -> flatformer::numerics::Var) -> f64 {
    let mut g = Graph::eval();
    let bound = params.bind(&mut g);
    let out = f(&mut g, &bound);
    let mut grads = g.backward(out).unwrap();
    let analytic = bound.gradients(&params, &mut grads);
    max_relative_error(&params, &analytic, 1e-5, |p| {
        let mut g = Graph::eval();
        let b = p.bind(&mut g);
        let out = f(&mut g, &b);
        g.value(out).data()[0]
    })
}

/// Weighted sum so that every output entry gets a distinct upstream gradient.
fn weighted_sum(g: &mut Graph<f64>, x: flatformer::numerics::Var) -> flatformer::numerics::Var {
    let shape = g.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let w = g.constant(t(&shape, &(0..n).map(|i| ((i as f64) * 0.731).sin() + 0.1).collect::<Vec<_>>()));
    let prod = g.mul(x, w).unwrap();
    g.sum_all(prod)
}

#[test]
fn matmul_identity_and_hand_products() {
    let mut g = Graph::<f64>::eval();
    let i2 = g.constant(t(&[2, 2], &[1., 0., 0., 1.]));
    let m = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
    let p = g.matmul(i2, m).unwrap();
    assert_eq!(g.value(p).data(), &[1., 2., 3., 4.]);

    let a = g.constant(t(&[1, 2], &[1., 2.]));
    let b = g.constant(t(&[2, 1], &[3., 4.]));
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).data(), &[11.]);
}

#[test]
fn matmul_shape_mismatch_is_config_error() {
    let mut g = Graph::<f64>::eval();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(g.matmul(a, b), Err(Error::Config(_))));
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut p = ParamStore::new();
    p.insert("a", random(&[4, 5], &mut rng)).unwrap();
    p.insert("b", random(&[5, 3], &mut rng)).unwrap();
    let err = check(p, |g, b| {
        let y = g.matmul(b.var("a"), b.var("b")).unwrap();
        weighted_sum(g, y)
    });
    assert!(err < 1e-6, "max rel err {err}");
}

#[test]
fn softmax_examples() {
    let mut g = Graph::<f64>::eval();
    let x = g.constant(t(&[3, 3], &[0., 0., 0., 1f64.ln(), 2f64.ln(), 3f64.ln(), 0., MASK_SENTINEL, 0.]));
    let y = g.softmax_lastdim(x);
    let v = g.value(y).data();
    for &e in &v[0..3] {
        assert!((e - 1.0 / 3.0).abs() < 1e-15);
    }
    for (e, want) in v[3..6].iter().zip([1. / 6., 2. / 6., 3. / 6.]) {
        assert!((e - want).abs() < 1e-15);
    }
    assert_eq!(v[7], 0.0);
    assert_eq!(v[6], 0.5);

    let x = g.constant(t(&[2], &[0., MASK_SENTINEL]));
    let y = g.softmax_lastdim(x);
    assert_eq!(g.value(y).data(), &[1.0, 0.0]);
    assert_eq!(g.masked_rows(), 0);
}

#[test]
fn fully_masked_softmax_row_is_zero_and_flagged() {
    let mut g = Graph::<f64>::eval();
    let x = g.constant(t(&[2, 2], &[MASK_SENTINEL, MASK_SENTINEL, 1.0, 2.0]));
    let y = g.softmax_lastdim(x);
    assert_eq!(&g.value(y).data()[..2], &[0.0, 0.0]);
    assert_eq!(g.masked_rows(), 1);
}

#[test]
fn softmax_rows_sum_to_one_over_unmasked_entries() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let n = rng.random_range(1..12);
        let mut v: Vec<f64> = (0..n).map(|_| rng.random_range(-30.0..30.0)).collect();
        for x in v.iter_mut().skip(1) {
            if rng.random_bool(0.3) {
                *x = MASK_SENTINEL;
            }
        }
        let mut g = Graph::<f64>::eval();
        let x = g.constant(t(&[n], &v));
        let y = g.softmax_lastdim(x);
        let s: f64 = g.value(y).data().iter().sum();
        assert!((s - 1.0).abs() < 1e-9);
    }
}

#[test]
fn softmax_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut p = ParamStore::new();
    p.insert("x", random(&[3, 5], &mut rng)).unwrap();
    let err = check(p, |g, b| {
        let y = g.softmax_lastdim(b.var("x"));
        weighted_sum(g, y)
    });
    assert!(err < 1e-6, "max rel err {err}");
}

#[test]
fn layernorm_examples() {
    let mut g = Graph::<f64>::eval();
    let gain = g.constant(Tensor::ones(&[2]));
    let bias = g.constant(Tensor::zeros(&[2]));
    let x = g.constant(t(&[2, 2], &[5., 5., 1., 3.]));
    let y = g.layernorm(x, gain, bias).unwrap();
    let v = g.value(y).data();
    assert_eq!(&v[..2], &[0.0, 0.0]);
    // var = 1, so (x - mean)/sqrt(1 + 1e-5)
    let s = 1.0 / (1.0f64 + 1e-5).sqrt();
    assert!((v[2] + s).abs() < 1e-12 && (v[3] - s).abs() < 1e-12);
    assert!((v[3] - 1.0).abs() < 1e-5);
}

#[test]
fn layernorm_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut p = ParamStore::new();
    p.insert("x", random(&[3, 6], &mut rng)).unwrap();
    p.insert("g", random(&[6], &mut rng)).unwrap();
    p.insert("b", random(&[6], &mut rng)).unwrap();
    let err = check(p, |g, b| {
        let y = g.layernorm(b.var("x"), b.var("g"), b.var("b")).unwrap();
        weighted_sum(g, y)
    });
    assert!(err < 1e-5, "max rel err {err}");
}

#[test]
fn elementwise_examples() {
    let mut g = Graph::<f64>::eval();
    let x = g.constant(t(&[2], &[-1., 2.]));
    let r = g.relu(x);
    assert_eq!(g.value(r).data(), &[0., 2.]);
    let z = g.constant(t(&[1], &[0.]));
    let s = g.sigmoid(z);
    assert_eq!(g.value(s).data(), &[0.5]);
    let d = g.dropout(x, 0.4).unwrap();
    assert_eq!(d, x, "eval-mode dropout is the identity");
}

#[test]
fn embedding_out_of_range_is_data_error() {
    let mut g = Graph::<f64>::eval();
    let table = g.constant(Tensor::zeros(&[3, 2]));
    assert!(matches!(g.embedding(table, &[0, 3], &[2]), Err(Error::Data(_))));
}

#[test]
fn composite_ops_gradient_matches_finite_differences() {
    // embedding -> concat -> linear + bias -> relu/sigmoid, split/merge heads,
    // bmm both ways, transpose, attention biases.
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut p = ParamStore::new();
    p.insert("table", random(&[5, 3], &mut rng)).unwrap();
    p.insert("other", random(&[2, 3, 1], &mut rng)).unwrap();
    p.insert("w", random(&[4, 4], &mut rng)).unwrap();
    p.insert("bias", random(&[4], &mut rng)).unwrap();
    p.insert("rates", random(&[2], &mut rng)).unwrap();
    let basis = random(&[2, 3, 3], &mut rng);
    let fixed = random(&[2, 3, 3], &mut rng);
    let err = check(p, move |g, b| {
        let e = g.embedding(b.var("table"), &[0, 4, 2, 1, 1, 3], &[2, 3]).unwrap();
        let c = g.concat_lastdim(e, b.var("other")).unwrap();
        let h = g.linear(c, b.var("w")).unwrap();
        let h = g.add_bias(h, b.var("bias")).unwrap();
        let h = g.relu(h);
        let heads = g.split_heads(h, 2).unwrap();
        let logits = g.bmm(heads, heads, true, 0.7).unwrap();
        let logits = g.add_attention_bias(logits, &fixed).unwrap();
        let logits = g.add_head_scaled_bias(logits, b.var("rates"), &basis).unwrap();
        let probs = g.softmax_lastdim(logits);
        let ctx = g.bmm(probs, heads, false, 1.0).unwrap();
        let merged = g.merge_heads(ctx).unwrap();
        let tr = g.transpose(merged).unwrap();
        let s = g.sigmoid(tr);
        let s = g.scale(s, 1.3);
        weighted_sum(g, s)
    });
    assert!(err < 1e-5, "max rel err {err}");
}

#[test]
fn bce_examples() {
    let mut g = Graph::<f64>::eval();
    let p = g.constant(Tensor::full(&[4], 0.5));
    let (sum, n) = g.bce(p, &[1., 0., 1., 1.], &[1., 1., 1., 0.]).unwrap();
    assert_eq!(n, 3);
    assert!((g.value(sum).data()[0] - 3.0 * 2f64.ln()).abs() < 1e-12);

    let p = g.constant(t(&[2], &[1.0, 0.0]));
    let (sum, _) = g.bce(p, &[1., 0.], &[1., 1.]).unwrap();
    assert!(g.value(sum).data()[0] < 1e-6);

    let p = g.constant(t(&[1], &[0.9]));
    let (sum, _) = g.bce(p, &[1.], &[1.]).unwrap();
    assert!((g.value(sum).data()[0] + 0.9f64.ln()).abs() < 1e-15);

    let p = g.constant(t(&[2], &[0.3, 0.6]));
    assert!(matches!(g.bce(p, &[1., 0.], &[0., 0.]), Err(Error::Data(_))));
}

#[test]
fn bce_gradient_matches_finite_differences() {
    let mut p = ParamStore::new();
    p.insert("p", t(&[4], &[0.2, 0.7, 0.55, 0.9])).unwrap();
    let err = check(p, |g, b| g.bce(b.var("p"), &[1., 0., 1., 0.], &[1., 1., 0., 1.]).unwrap().0);
    assert!(err < 1e-6, "max rel err {err}");
}

#[test]
fn dropout_preserves_expectation() {
    // Mean of 10^4 inverted-dropout draws of a unit input; each draw has
    // variance p/(1-p), so the standard error is sqrt(p/(1-p)/n).
    let p = 0.4;
    let n = 20_000;
    let mut g = Graph::<f64>::train(11);
    let x = g.constant(Tensor::ones(&[n]));
    let y = g.dropout(x, p).unwrap();
    let mean = g.value(y).sum() / n as f64;
    let se = (p / (1.0 - p) / n as f64).sqrt();
    assert!((mean - 1.0).abs() < 3.0 * se, "mean {mean}, 3σ = {}", 3.0 * se);
}

#[test]
fn dropout_masks_are_seed_deterministic() {
    let draw = |seed| {
        let mut g = Graph::<f64>::train(seed);
        let x = g.constant(Tensor::ones(&[64]));
        let y = g.dropout(x, 0.4).unwrap();
        g.value(y).data().to_vec()
    };
    assert_eq!(draw(9), draw(9));
    assert_ne!(draw(9), draw(10));
}

#[test]
fn f32_graph_runs_the_same_ops() {
    let mut g = Graph::<f32>::eval();
    let a = g.constant(Tensor::from_f64(&[1, 2], &[1., 2.]).unwrap());
    let b = g.constant(Tensor::from_f64(&[2, 1], &[3., 4.]).unwrap());
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).data(), &[11.0f32]);
}
