use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use roadclip::tensor::{adam_step, AdamConfig, AdamState, AttnLayout, Graph, ParamStore, Tensor, Var};

type Build = dyn Fn(&mut Graph<f64>, &[Var]) -> Var;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn eval(inputs: &[Tensor<f64>], build: &Build) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let root = build(&mut g, &vars);
    g.value(root).item()
}

/// Analytic gradients of every input against central differences.
fn check_grads(inputs: Vec<Tensor<f64>>, build: &Build) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let root = build(&mut g, &vars);
    g.backward(root).unwrap();
    let h = 1e-6;
    for (i, v) in vars.iter().enumerate() {
        let analytic = g.grad(*v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        for k in 0..inputs[i].len() {
            let mut up = inputs.clone();
            up[i].data_mut()[k] += h;
            let mut down = inputs.clone();
            down[i].data_mut()[k] -= h;
            let numeric = (eval(&up, build) - eval(&down, build)) / (2.0 * h);
            let err = (analytic[k] - numeric).abs() / analytic[k].abs().max(numeric.abs()).max(1e-6);
            assert!(err < 1e-5, "input {i} coord {k}: analytic {} numeric {numeric}", analytic[k]);
        }
    }
}

/// Weighted sum so every output coordinate gets a distinct upstream gradient.
fn probe(g: &mut Graph<f64>, x: Var, seed: u64) -> Var {
    let shape = g.shape(x).to_vec();
    let w = random(&shape, &mut ChaCha8Rng::seed_from_u64(seed));
    let w = g.constant(w);
    let m = g.mul(x, w).unwrap();
    g.sum(m)
}

#[test]
fn elementwise_and_matrix_ops_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&[3, 4], &mut rng);
    let b = random(&[4, 2], &mut rng);
    let c = random(&[3, 4], &mut rng);
    let r = random(&[1, 4], &mut rng);
    check_grads(vec![a.clone(), b], &|g, v| {
        let m = g.matmul(v[0], v[1]).unwrap();
        probe(g, m, 7)
    });
    check_grads(vec![a.clone(), c.clone()], &|g, v| {
        let s = g.sub(v[0], v[1]).unwrap();
        let m = g.mul(s, v[0]).unwrap();
        let e = g.exp(m);
        let t = g.transpose(e).unwrap();
        probe(g, t, 8)
    });
    check_grads(vec![a.clone(), r.clone()], &|g, v| {
        let x = g.add_row(v[0], v[1]).unwrap();
        let x = g.gelu(x);
        let x = g.scale(x, 0.7);
        probe(g, x, 9)
    });
    check_grads(vec![a, r], &|g, v| {
        let s = g.slice_cols(v[1], 0, 1).unwrap();
        let s = g.mean(s);
        let x = g.mul_scalar(v[0], s).unwrap();
        probe(g, x, 10)
    });
}

#[test]
fn normalizations_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&[4, 5], &mut rng);
    let gain = random(&[5], &mut rng);
    let bias = random(&[5], &mut rng);
    check_grads(vec![x.clone(), gain, bias], &|g, v| {
        let y = g.layer_norm(v[0], v[1], v[2]).unwrap();
        probe(g, y, 11)
    });
    for axis in [0, 1] {
        check_grads(vec![x.clone()], &move |g, v| {
            let y = g.softmax(v[0], axis).unwrap();
            probe(g, y, 12)
        });
        check_grads(vec![x.clone()], &move |g, v| {
            let y = g.log_softmax(v[0], axis).unwrap();
            probe(g, y, 13)
        });
    }
    check_grads(vec![x], &|g, v| {
        let y = g.l2_normalize(v[0]);
        probe(g, y, 14)
    });
}

#[test]
fn row_plumbing_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let t = random(&[4, 3], &mut rng);
    let u = random(&[2, 3], &mut rng);
    check_grads(vec![t.clone(), u.clone()], &|g, v| {
        let a = g.gather_rows(v[0], vec![3, 0, 3, 1]).unwrap();
        let b = g.tile_rows(v[1], 2).unwrap();
        let c = g.concat_rows(&[a, b]).unwrap();
        let d = g.slice_rows(c, 1, 7).unwrap();
        let e = g.mean_row_groups(d, 3).unwrap();
        probe(g, e, 15)
    });
    check_grads(vec![t], &|g, v| {
        let a = g.gather(v[0], vec![0, 5, 5, 11]).unwrap();
        probe(g, a, 16)
    });
}

/// Per-head softmax(QKᵀ/√dh + bias) V written out directly.
fn naive_attention(qkv: &[f64], layout: &AttnLayout, d: usize, bias: Option<&[f64]>, br: usize) -> Vec<f64> {
    let l = layout.seq_len;
    let dh = d / layout.heads;
    let mut out = vec![0.0; layout.seqs * l * d];
    for s in 0..layout.seqs {
        let valid = layout.lengths.as_ref().map_or(l, |v| v[s]);
        for h in 0..layout.heads {
            for i in 0..l {
                let at = |r: usize, part: usize, t: usize| qkv[(s * l + r) * 3 * d + part * d + h * dh + t];
                let mut logits: Vec<f64> = (0..valid)
                    .map(|j| {
                        let dot: f64 = (0..dh).map(|t| at(i, 0, t) * at(j, 1, t)).sum();
                        let b = match (bias, &layout.bias_index) {
                            (Some(tb), Some(idx)) => tb[h * br + idx[i * l + j]],
                            _ => 0.0,
                        };
                        dot / (dh as f64).sqrt() + b
                    })
                    .collect();
                let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                logits.iter_mut().for_each(|x| *x = (*x - mx).exp());
                let z: f64 = logits.iter().sum();
                for t in 0..dh {
                    out[(s * l + i) * d + h * dh + t] = (0..valid).map(|j| logits[j] / z * at(j, 2, t)).sum();
                }
            }
        }
    }
    out
}

#[test]
fn attention_matches_naive_oracle_with_mask_and_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (seqs, l, heads, d) = (2, 5, 2, 6);
    let br = 2 * l - 1;
    let index: Vec<usize> = (0..l * l).map(|k| k / l + l - 1 - k % l).collect();
    let layout = Arc::new(AttnLayout {
        seqs,
        seq_len: l,
        heads,
        lengths: Some(vec![5, 3]),
        bias_index: Some(index),
    });
    let qkv = random(&[seqs * l, 3 * d], &mut rng);
    let table = random(&[heads, br], &mut rng);
    let mut g = Graph::new();
    let q = g.constant(qkv.clone());
    let b = g.constant(table.clone());
    let out = g.attention(q, Some(b), layout.clone()).unwrap();
    let expect = naive_attention(qkv.data(), &layout, d, Some(table.data()), br);
    for (a, e) in g.value(out).data().iter().zip(&expect) {
        assert!((a - e).abs() < 1e-12, "{a} vs {e}");
    }
    check_grads(vec![qkv, table], &move |g, v| {
        let o = g.attention(v[0], Some(v[1]), layout.clone()).unwrap();
        probe(g, o, 17)
    });
}

#[test]
fn attention_rejects_bad_layouts() {
    let mut g = Graph::<f64>::new();
    let q = g.constant(Tensor::zeros(&[4, 9]));
    let layout = |heads, lengths| {
        Arc::new(AttnLayout {
            seqs: 2,
            seq_len: 2,
            heads,
            lengths,
            bias_index: None,
        })
    };
    assert!(g.attention(q, None, layout(2, None)).is_err());
    let q = g.constant(Tensor::zeros(&[4, 12]));
    assert!(g.attention(q, None, layout(2, Some(vec![0, 2]))).is_err());
    assert!(g.attention(q, None, layout(2, None)).is_ok());
}

#[test]
fn backward_needs_a_scalar_root() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::zeros(&[2, 2]));
    assert!(g.backward(x).is_err());
}

#[test]
fn adam_first_step_moves_by_lr_times_sign() {
    let mut store = ParamStore::<f64>::new();
    let id = store.add("w", Tensor::vector(vec![1.0, -2.0, 0.5]));
    let frozen = store.add("frozen", Tensor::vector(vec![3.0]));
    let mut state = AdamState::new(&store);
    let cfg = AdamConfig {
        lr: 0.01,
        ..AdamConfig::default()
    };
    let grads = vec![Some(vec![0.3, -4.0, 0.0]), None];
    adam_step(&mut store, &grads, &mut state, &cfg).unwrap();
    let w = store.get(id).data();
    // bias correction makes the first update lr·g/(|g|+eps)
    assert!((w[0] - 0.99).abs() < 1e-9);
    assert!((w[1] + 1.99).abs() < 1e-9);
    assert_eq!(w[2], 0.5);
    assert_eq!(store.get(frozen).data(), &[3.0]);
    assert_eq!(state.step, 1);
}

#[test]
fn embedding_table_step_touches_only_gathered_rows() {
    let mut store = ParamStore::<f64>::new();
    let id = store.add("table", Tensor::matrix(4, 2, vec![0.0; 8]).unwrap());
    let mut state = AdamState::new(&store);
    let mut g = Graph::new();
    let t = g.param(store.get(id).clone());
    let rows = g.gather_rows(t, vec![1, 3, 1]).unwrap();
    let loss = probe(&mut g, rows, 18);
    g.backward(loss).unwrap();
    let grads = vec![g.grad(t).map(|s| s.to_vec())];
    adam_step(&mut store, &grads, &mut state, &AdamConfig::default()).unwrap();
    let w = store.get(id);
    assert_eq!(w.row(0), &[0.0, 0.0]);
    assert_eq!(w.row(2), &[0.0, 0.0]);
    assert!(w.row(1).iter().chain(w.row(3)).all(|&x| x != 0.0));
}

proptest! {
    #[test]
    fn softmax_is_shift_invariant(xs in prop::collection::vec(-20.0f64..20.0, 1..12), c in -50.0f64..50.0) {
        let n = xs.len();
        let mut g = Graph::new();
        let a = g.constant(Tensor::matrix(1, n, xs.clone()).unwrap());
        let b = g.constant(Tensor::matrix(1, n, xs.iter().map(|x| x + c).collect()).unwrap());
        let sa = g.softmax(a, 1).unwrap();
        let sb = g.softmax(b, 1).unwrap();
        let total: f64 = g.value(sa).data().iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        for (p, q) in g.value(sa).data().iter().zip(g.value(sb).data()) {
            prop_assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn l2_normalized_rows_have_unit_norm(xs in prop::collection::vec(-5.0f64..5.0, 6), scale in 0.01f64..100.0) {
        prop_assume!(xs[..3].iter().any(|x| x.abs() > 1e-3) && xs[3..].iter().any(|x| x.abs() > 1e-3));
        let mut g = Graph::new();
        let a = g.constant(Tensor::matrix(2, 3, xs.clone()).unwrap());
        let b = g.constant(Tensor::matrix(2, 3, xs.iter().map(|x| x * scale).collect()).unwrap());
        let na = g.l2_normalize(a);
        let nb = g.l2_normalize(b);
        for r in 0..2 {
            let norm: f64 = g.value(na).row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!((norm - 1.0).abs() < 1e-12);
        }
        for (p, q) in g.value(na).data().iter().zip(g.value(nb).data()) {
            prop_assert!((p - q).abs() < 1e-12);
        }
    }
}

#[test]
fn adam_step_size_tends_to_lr_under_constant_gradient() {
    let mut store = ParamStore::<f64>::new();
    let id = store.add("w", Tensor::vector(vec![0.0, 0.0]));
    let mut state = AdamState::new(&store);
    let cfg = AdamConfig {
        lr: 0.01,
        ..AdamConfig::default()
    };
    let mut steps = Vec::new();
    for _ in 0..2000 {
        let before = store.get(id).data().to_vec();
        adam_step(&mut store, &[Some(vec![0.5, -3.0])], &mut state, &cfg).unwrap();
        steps = before.iter().zip(store.get(id).data()).map(|(a, b)| b - a).collect();
    }
    assert!((steps[0] + 0.01).abs() < 1e-6, "{steps:?}");
    assert!((steps[1] - 0.01).abs() < 1e-6, "{steps:?}");
}

#[test]
fn adam_descends_a_parabola() {
    let mut store = ParamStore::<f64>::new();
    let id = store.add("x", Tensor::vector(vec![1.0]));
    let mut state = AdamState::new(&store);
    let cfg = AdamConfig {
        lr: 0.1,
        ..AdamConfig::default()
    };
    let x = store.get(id).data()[0];
    adam_step(&mut store, &[Some(vec![2.0 * x])], &mut state, &cfg).unwrap();
    assert!(store.get(id).data()[0] < 1.0);
}
