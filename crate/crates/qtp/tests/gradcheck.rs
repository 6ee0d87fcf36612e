//! Per-primitive gradient checks: analytic backward vs central finite
//! differences over many random seeds, plus determinism checks.

use std::collections::BTreeMap;

use qtp::fdcheck::{assert_grads_close, numeric_grad};
use qtp::graph::{Bindings, Graph, NodeId};
use qtp::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(shape, data).unwrap()
}

/// Check d(loss)/d(name) for every name in `names`.
fn check(graph: &Graph, bindings: &Bindings, loss: NodeId, names: &[&str], what: &str) {
    let eval = graph.forward(bindings).unwrap();
    let grads = graph.backward(&eval, loss, bindings).unwrap();
    for name in names {
        let analytic = grads
            .params
            .get(*name)
            .or_else(|| grads.inputs.get(*name))
            .unwrap_or_else(|| panic!("{what}: no gradient for {name}"));
        let numeric = numeric_grad(graph, bindings, loss, name);
        assert_grads_close(analytic, &numeric, TOL, &format!("{what}/{name}"));
    }
}

#[test]
fn matmul_and_bias() {
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::new();
        let x = g.input("x");
        let w = g.param("w");
        let b = g.param("b");
        let y = g.matmul(x, w);
        let y = g.add_row(y, b);
        let loss = g.sq_mean(y);
        let mut bind = BTreeMap::new();
        bind.insert("x".into(), rand_tensor(&mut rng, vec![3, 4]));
        bind.insert("w".into(), rand_tensor(&mut rng, vec![4, 5]));
        bind.insert("b".into(), rand_tensor(&mut rng, vec![5]));
        check(&g, &bind, loss, &["x", "w", "b"], "matmul_bias");
    }
}

#[test]
fn elementwise_ops() {
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let mut g = Graph::new();
        let a = g.input("a");
        let b = g.input("b");
        let gain = g.param("gain");
        let s = g.sub(a, b);
        let s = g.mul_row(s, gain);
        let s = g.scale(s, 1.7);
        let s = g.gelu(s);
        let loss = g.abs_mean(s);
        let mut bind = BTreeMap::new();
        bind.insert("a".into(), rand_tensor(&mut rng, vec![2, 6]));
        bind.insert("b".into(), rand_tensor(&mut rng, vec![2, 6]));
        bind.insert("gain".into(), rand_tensor(&mut rng, vec![6]));
        check(&g, &bind, loss, &["a", "b", "gain"], "elementwise");
    }
}

#[test]
fn softmax_and_layer_norm() {
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
        let mut g = Graph::new();
        let x = g.input("x");
        let sm = g.softmax_rows(x);
        let ln = g.layer_norm_rows(sm);
        let w = g.param("w");
        let y = g.matmul(ln, w);
        let loss = g.sq_mean(y);
        let mut bind = BTreeMap::new();
        bind.insert("x".into(), rand_tensor(&mut rng, vec![3, 5]));
        bind.insert("w".into(), rand_tensor(&mut rng, vec![5, 2]));
        check(&g, &bind, loss, &["x", "w"], "softmax_ln");
    }
}

#[test]
fn norms_and_cosine() {
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(3000 + seed);
        let mut g = Graph::new();
        let a = g.input("a");
        let b = g.input("b");
        let cs = g.cosine_sim(a, b);
        let n = g.l2_norm(a);
        let total = g.add(cs, n);
        let mut bind = BTreeMap::new();
        bind.insert("a".into(), rand_tensor(&mut rng, vec![7]));
        bind.insert("b".into(), rand_tensor(&mut rng, vec![7]));
        check(&g, &bind, total, &["a", "b"], "cosine_l2");
    }
}

#[test]
fn fourier_features() {
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(4000 + seed);
        let freqs = rand_tensor(&mut rng, vec![5, 2]);
        let mut g = Graph::new();
        let x = g.input("x");
        let f = g.fourier(x, freqs);
        let w = g.param("w");
        let y = g.matmul(f, w);
        let loss = g.mean_all(y);
        let mut bind = BTreeMap::new();
        bind.insert("x".into(), rand_tensor(&mut rng, vec![3, 2]));
        bind.insert("w".into(), rand_tensor(&mut rng, vec![10, 3]));
        check(&g, &bind, loss, &["x", "w"], "fourier");
    }
}

#[test]
fn concat_row_and_sum() {
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(5000 + seed);
        let mut g = Graph::new();
        let a = g.input("a");
        let b = g.input("b");
        let c = g.concat_rows(a, b);
        let r = g.row(c, 2);
        let s = g.sum_all(r);
        let m = g.mean_all(c);
        let loss = g.add(s, m);
        let mut bind = BTreeMap::new();
        bind.insert("a".into(), rand_tensor(&mut rng, vec![2, 4]));
        bind.insert("b".into(), rand_tensor(&mut rng, vec![3, 4]));
        check(&g, &bind, loss, &["a", "b"], "concat_row");
    }
}

#[test]
fn attention_primitive() {
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(6000 + seed);
        let d = 8;
        // even seeds exercise the read-only-first-row mask
        let mask_first = seed % 2 == 0;
        let mut g = Graph::new();
        let x = g.input("x");
        let ids: Vec<_> = ["wq", "wk", "wv", "wo"].iter().map(|n| g.param(n)).collect();
        let bids: Vec<_> = ["bq", "bk", "bv", "bo"].iter().map(|n| g.param(n)).collect();
        let att = g.attention(
            x, ids[0], ids[1], ids[2], ids[3], bids[0], bids[1], bids[2], bids[3], 2, mask_first,
        );
        let loss = g.sq_mean(att);
        let mut bind = BTreeMap::new();
        bind.insert("x".into(), rand_tensor(&mut rng, vec![4, d]));
        for n in ["wq", "wk", "wv", "wo"] {
            bind.insert(n.into(), rand_tensor(&mut rng, vec![d, d]));
        }
        for n in ["bq", "bk", "bv", "bo"] {
            bind.insert(n.into(), rand_tensor(&mut rng, vec![d]));
        }
        check(
            &g,
            &bind,
            loss,
            &["x", "wq", "wk", "wv", "wo", "bq", "bk", "bv", "bo"],
            "attention",
        );
    }
}

#[test]
fn random_three_layer_graph_matches_finite_differences() {
    for seed in 0..50 {
        let mut rng = ChaCha8Rng::seed_from_u64(7000 + seed);
        let mut g = Graph::new();
        let x = g.input("x");
        let mut h = x;
        for layer in 0..3 {
            let w = g.param(&format!("w{layer}"));
            let b = g.param(&format!("b{layer}"));
            h = g.matmul(h, w);
            h = g.add_row(h, b);
            h = g.gelu(h);
        }
        let loss = g.sq_mean(h);
        let mut bind = BTreeMap::new();
        bind.insert("x".into(), rand_tensor(&mut rng, vec![2, 4]));
        for layer in 0..3 {
            bind.insert(format!("w{layer}"), rand_tensor(&mut rng, vec![4, 4]));
            bind.insert(format!("b{layer}"), rand_tensor(&mut rng, vec![4]));
        }
        check(
            &g,
            &bind,
            loss,
            &["x", "w0", "b0", "w1", "b1", "w2", "b2"],
            "three_layer",
        );
    }
}

#[test]
fn forward_is_bit_identical_across_runs() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut g = Graph::new();
    let x = g.input("x");
    let w = g.param("w");
    let h = g.matmul(x, w);
    let h = g.softmax_rows(h);
    let loss = g.mean_all(h);
    let mut bind = BTreeMap::new();
    bind.insert("x".into(), rand_tensor(&mut rng, vec![5, 5]));
    bind.insert("w".into(), rand_tensor(&mut rng, vec![5, 5]));
    let e1 = g.forward(&bind).unwrap();
    let e2 = g.forward(&bind).unwrap();
    assert_eq!(e1.value(loss).data(), e2.value(loss).data());
    let g1 = g.backward(&e1, loss, &bind).unwrap();
    let g2 = g.backward(&e2, loss, &bind).unwrap();
    assert_eq!(g1.params["w"].data(), g2.params["w"].data());
}
