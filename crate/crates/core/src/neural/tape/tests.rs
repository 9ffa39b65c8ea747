use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rand_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Checks d(f)/d(inputs) from the tape against central differences.
fn check_grad(inputs: &[(Vec<f64>, Vec<usize>)], f: impl Fn(&mut Tape<f64>, &[Var]) -> Var) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|(v, s)| tape.leaf(v.clone(), s.clone())).collect();
    let loss = f(&mut tape, &vars);
    tape.backward(loss, &mut ParamStore::new()).unwrap();
    let eval = |inputs: &[(Vec<f64>, Vec<usize>)]| {
        let mut t = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|(v, s)| t.leaf(v.clone(), s.clone())).collect();
        let l = f(&mut t, &vars);
        t.scalar(l)
    };
    let h = 1e-5;
    for (i, (vals, _)) in inputs.iter().enumerate() {
        let analytic = tape.grad(vars[i]).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; vals.len()]);
        for j in 0..vals.len() {
            let mut plus = inputs.to_vec();
            plus[i].0[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].0[j] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let err = (numeric - analytic[j]).abs() / numeric.abs().max(analytic[j].abs()).max(1e-3);
            assert!(err < 1e-4, "input {i}[{j}]: numeric {numeric} analytic {}", analytic[j]);
        }
    }
}

/// Projects a tensor to a scalar with fixed random weights so every element
/// of the output matters.
fn project(t: &mut Tape<f64>, x: Var, seed: u64) -> Var {
    let n = t.value(x).len();
    let w = rand_vec(n, &mut ChaCha8Rng::seed_from_u64(seed));
    let w = t.constant(w, t.shape(x).to_vec());
    let p = t.mul(x, w);
    t.sum(p)
}

#[test]
fn square_derivative() {
    let mut t = Tape::<f64>::new();
    let x = t.leaf(vec![3.0], vec![1]);
    let y = t.mul(x, x);
    t.backward(y, &mut ParamStore::new()).unwrap();
    assert!((t.grad(x).unwrap()[0] - 6.0).abs() < 1e-9);
}

#[test]
fn backward_twice_is_an_error() {
    let mut t = Tape::<f64>::new();
    let x = t.leaf(vec![1.0], vec![1]);
    let y = t.sum(x);
    let mut store = ParamStore::new();
    t.backward(y, &mut store).unwrap();
    assert!(matches!(t.backward(y, &mut store), Err(Error::BackwardTwice)));
    t.reset();
    let x = t.leaf(vec![1.0], vec![1]);
    let y = t.sum(x);
    assert!(t.backward(y, &mut store).is_ok());
}

#[test]
fn gelu_values() {
    assert_eq!(gelu(0.0f64), 0.0);
    // 0.5 x (1 + tanh(√(2/π)(x + 0.044715 x³))) at x = 1
    let want = 0.5 * (1.0 + (SQRT_2_OVER_PI * 1.044715f64).tanh());
    assert!((gelu(1.0f64) - want).abs() < 1e-15);
}

#[test]
fn elementwise_grads() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = (rand_vec(6, &mut rng), vec![2, 3]);
    let b = (rand_vec(6, &mut rng), vec![2, 3]);
    let bias = (rand_vec(3, &mut rng), vec![3]);
    check_grad(&[a.clone(), b.clone()], |t, v| {
        let s = t.add(v[0], v[1]);
        let m = t.mul(s, v[1]);
        let sc = t.scale(m, 1.7);
        project(t, sc, 9)
    });
    check_grad(&[a.clone(), bias], |t, v| {
        let y = t.add_bias(v[0], v[1]);
        project(t, y, 2)
    });
    check_grad(&[a], |t, v| {
        let y = t.gelu(v[0]);
        project(t, y, 3)
    });
}

#[test]
fn matmul_grads() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = (rand_vec(12, &mut rng), vec![3, 4]);
    let b = (rand_vec(20, &mut rng), vec![4, 5]);
    let bt = (rand_vec(20, &mut rng), vec![5, 4]);
    check_grad(&[a.clone(), b], |t, v| {
        let y = t.matmul(v[0], v[1]);
        project(t, y, 4)
    });
    check_grad(&[a, bt], |t, v| {
        let y = t.matmul_bt(v[0], v[1]);
        project(t, y, 5)
    });
}

#[test]
fn lookup_grads_accumulate_repeats() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let table = (rand_vec(15, &mut rng), vec![5, 3]);
    check_grad(&[table.clone()], |t, v| {
        let e = t.embedding(v[0], &[1, 4, 1, 0]);
        let g = t.gather_rows(e, &[3, 0, 0]);
        project(t, g, 6)
    });
}

#[test]
fn layer_norm_grads_and_moments() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = (rand_vec(12, &mut rng), vec![3, 4]);
    let g = (rand_vec(4, &mut rng), vec![4]);
    let b = (rand_vec(4, &mut rng), vec![4]);
    check_grad(&[x.clone(), g, b], |t, v| {
        let y = t.layer_norm(v[0], v[1], v[2]);
        project(t, y, 7)
    });

    let mut t = Tape::<f64>::new();
    let xv = t.constant(x.0, x.1);
    let ones = t.constant(vec![1.0; 4], vec![4]);
    let zeros = t.constant(vec![0.0; 4], vec![4]);
    let y = t.layer_norm(xv, ones, zeros);
    for row in t.value(y).chunks(4) {
        let mean = row.iter().sum::<f64>() / 4.0;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-6 && (var - 1.0).abs() < 1e-6);
    }
}

fn spec(batch: usize, q_len: usize, k_len: usize, heads: usize, pad: Vec<bool>, causal: bool) -> AttentionSpec {
    AttentionSpec { batch, q_len, k_len, heads, key_padding: pad, causal }
}

#[test]
fn attention_grads() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (b, lq, lk, d) = (2, 3, 4, 4);
    let q = (rand_vec(b * lq * d, &mut rng), vec![b * lq, d]);
    let k = (rand_vec(b * lk * d, &mut rng), vec![b * lk, d]);
    let v = (rand_vec(b * lk * d, &mut rng), vec![b * lk, d]);
    let pad = vec![false, false, false, true, false, false, true, true];
    check_grad(&[q.clone(), k.clone(), v.clone()], |t, x| {
        let a = t.attention(x[0], x[1], x[2], spec(b, lq, lk, 2, pad.clone(), false));
        project(t, a, 8)
    });
    // causal self-attention with q_len == k_len
    let kk = (rand_vec(b * lq * d, &mut rng), vec![b * lq, d]);
    let vv = (rand_vec(b * lq * d, &mut rng), vec![b * lq, d]);
    check_grad(&[q, kk, vv], |t, x| {
        let a = t.attention(x[0], x[1], x[2], spec(b, lq, lq, 2, vec![false; b * lq], true));
        project(t, a, 10)
    });
}

#[test]
fn attention_masks_are_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (b, l, d, h) = (2, 5, 8, 2);
    let mut t = Tape::<f64>::new();
    let x = t.constant(rand_vec(b * l * d, &mut rng), vec![b * l, d]);
    let pad: Vec<bool> = (0..b * l).map(|i| i % l >= 3 + i / l).collect();
    let a = t.attention(x, x, x, spec(b, l, l, h, pad.clone(), true));
    let p = t.attention_weights(a).unwrap();
    for bb in 0..b {
        for hh in 0..h {
            for i in 0..l {
                let row = &p[((bb * h + hh) * l + i) * l..((bb * h + hh) * l + i + 1) * l];
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                for (j, &w) in row.iter().enumerate() {
                    if pad[bb * l + j] || j > i {
                        assert_eq!(w, 0.0);
                    }
                }
            }
        }
    }
}

#[test]
fn fully_masked_query_outputs_zero() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(vec![1.0; 8], vec![2, 4]);
    let a = t.attention(x, x, x, spec(1, 2, 2, 1, vec![true, true], false));
    assert!(t.value(a).iter().all(|&v| v == 0.0));
}

#[test]
fn cross_entropy_grads_and_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let logits = (rand_vec(12, &mut rng), vec![3, 4]);
    check_grad(&[logits], |t, v| t.cross_entropy(v[0], &[Some(1), None, Some(3)]));

    let mut t = Tape::<f64>::new();
    let u = t.leaf(vec![0.3; 10], vec![2, 5]);
    let l = t.cross_entropy(u, &[Some(0), Some(4)]);
    assert!((t.scalar(l) - 5f64.ln()).abs() < 1e-12);

    let mut t = Tape::<f64>::new();
    let x = t.leaf(vec![0.1, 0.9, -0.4, 2.0], vec![2, 2]);
    let l = t.cross_entropy(x, &[None, None]);
    t.backward(l, &mut ParamStore::new()).unwrap();
    assert_eq!(t.scalar(l), 0.0);
    assert!(t.grad(x).map_or(true, |g| g.iter().all(|&v| v == 0.0)));
}

#[test]
fn dropout_zero_rate_is_identity() {
    let mut t = Tape::<f64>::new();
    let x = t.leaf(vec![1.0, 2.0], vec![2]);
    let y = t.dropout(x, 0.0, &mut ChaCha8Rng::seed_from_u64(0));
    assert_eq!(x, y);
    let z = t.dropout(x, 0.5, &mut ChaCha8Rng::seed_from_u64(0));
    assert!(t.value(z).iter().zip(t.value(x)).all(|(&a, &b)| a == 0.0 || a == 2.0 * b));
}

#[test]
fn tied_param_accumulates_both_uses() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let id = store.add("table", vec![4, 3], rand_vec(12, &mut rng));
    let loss_of = |store: &ParamStore<f64>, tape: &mut Tape<f64>| {
        let e = tape.param(store, id);
        let h = tape.embedding(e, &[2, 0]);
        let e2 = tape.param(store, id);
        let logits = tape.matmul_bt(h, e2);
        tape.cross_entropy(logits, &[Some(1), Some(2)])
    };
    let mut tape = Tape::new();
    let l = loss_of(&store, &mut tape);
    tape.backward(l, &mut store).unwrap();
    let analytic = store.grad(id);
    for j in 0..12 {
        let mut s = store.clone();
        s.get_mut(id).tensor.data[j] += 1e-5;
        let mut t = Tape::new();
        let lp = loss_of(&s, &mut t);
        let plus = t.scalar(lp);
        s.get_mut(id).tensor.data[j] -= 2e-5;
        let mut t = Tape::new();
        let lm = loss_of(&s, &mut t);
        let numeric = (plus - t.scalar(lm)) / 2e-5;
        assert!((numeric - analytic[j]).abs() < 1e-4 * numeric.abs().max(1e-3), "{j}");
    }
}
