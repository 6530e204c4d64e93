use promptstream_nd::gradcheck::check_gradients;
use promptstream_nd::{Mask, Padding, ParamStore, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random(&mut rng, &[3, 4]);
    let b = random(&mut rng, &[4, 2]);
    let tape = Tape::new();
    let out = tape.value(tape.matmul(tape.constant(a.clone()), tape.constant(b.clone())).unwrap());
    for i in 0..3 {
        for j in 0..2 {
            let mut s = 0.0;
            for k in 0..4 {
                s += a.data()[i * 4 + k] * b.data()[k * 2 + j];
            }
            assert!((out.data()[i * 2 + j] - s).abs() < 1e-6);
        }
    }
}

/// Single-head-at-a-time attention for one query, written directly from the
/// definition.
fn attention_row(q: &[f64], k: &Tensor<f64>, v: &Tensor<f64>, allowed: &[bool], heads: usize) -> Vec<f64> {
    let d = q.len();
    let dh = d / heads;
    let mut out = vec![0.0; d];
    for h in 0..heads {
        let r = h * dh..(h + 1) * dh;
        let logits: Vec<Option<f64>> = (0..k.rows())
            .map(|j| {
                allowed[j].then(|| {
                    q[r.clone()].iter().zip(&k.row(j)[r.clone()]).map(|(a, b)| a * b).sum::<f64>()
                        / (dh as f64).sqrt()
                })
            })
            .collect();
        let z: f64 = logits.iter().flatten().map(|s| s.exp()).sum();
        for (j, s) in logits.iter().enumerate() {
            if let Some(s) = s {
                let w = s.exp() / z;
                for c in r.clone() {
                    out[c] += w * v.row(j)[c];
                }
            }
        }
    }
    out
}

#[test]
fn causal_attention_matches_per_position_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (q, k, v) = (random(&mut rng, &[4, 8]), random(&mut rng, &[4, 8]), random(&mut rng, &[4, 8]));
    let mask = Mask::causal(4, 4, 0);
    let tape = Tape::new();
    let out = tape.value(
        tape.masked_attention(tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()), &mask, 2)
            .unwrap(),
    );
    for i in 0..4 {
        let expect = attention_row(q.row(i), &k, &v, mask.row(i), 2);
        for (a, b) in out.row(i).iter().zip(&expect) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn masked_rows_do_not_influence_output(seed in 0u64..10_000, nk in 2usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nq = 3;
        let mut mask = Mask::from_fn(nq, nk, |_, _| rng.random_bool(0.6));
        for i in 0..nq {
            mask.set(i, i % nk, true);
        }
        let (q, k, v) = (random(&mut rng, &[nq, 4]), random(&mut rng, &[nk, 4]), random(&mut rng, &[nk, 4]));
        // Scramble every key/value row that no query admits.
        let mut k2 = k.to_vec();
        let mut v2 = v.to_vec();
        for j in 0..nk {
            if (0..nq).all(|i| !mask.get(i, j)) {
                for c in 0..4 {
                    k2[j * 4 + c] = rng.random_range(-50.0..50.0);
                    v2[j * 4 + c] = rng.random_range(-50.0..50.0);
                }
            }
        }
        // Also scramble rows masked for a single query by comparing per-row.
        let tape = Tape::new();
        let a = tape.value(tape.masked_attention(tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()), &mask, 2).unwrap());
        let b = tape.value(tape.masked_attention(
            tape.constant(q.clone()),
            tape.constant(Tensor::matrix(nk, 4, k2).unwrap()),
            tape.constant(Tensor::matrix(nk, 4, v2).unwrap()),
            &mask, 2).unwrap());
        prop_assert!(a.max_abs_diff(&b) < 1e-6);
        for i in 0..nq {
            let single = Mask::from_fn(1, nk, |_, j| mask.get(i, j));
            let qi = Tensor::matrix(1, 4, q.row(i).to_vec()).unwrap();
            let mut kj = k.to_vec();
            let mut vj = v.to_vec();
            for j in 0..nk {
                if !mask.get(i, j) {
                    for c in 0..4 {
                        kj[j * 4 + c] = 99.0;
                        vj[j * 4 + c] = -99.0;
                    }
                }
            }
            let o = tape.value(tape.masked_attention(
                tape.constant(qi),
                tape.constant(Tensor::matrix(nk, 4, kj).unwrap()),
                tape.constant(Tensor::matrix(nk, 4, vj).unwrap()),
                &single, 2).unwrap());
            for (x, y) in o.data().iter().zip(a.row(i)) {
                prop_assert!((x - y).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn attention_weights_sum_to_one(seed in 0u64..10_000, nk in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nq = 3;
        let mut mask = Mask::from_fn(nq, nk, |_, _| rng.random_bool(0.5));
        for i in 0..nq {
            mask.set(i, nk - 1, true);
        }
        // Identity values expose the weights directly.
        let d = 8;
        let v = Tensor::matrix(nk, d, (0..nk * d).map(|x| if x % d == x / d { 1.0 } else { 0.0 }).collect()).unwrap();
        let (q, k) = (random(&mut rng, &[nq, d]), random(&mut rng, &[nk, d]));
        let tape = Tape::new();
        let o = tape.value(tape.masked_attention(tape.constant(q), tape.constant(k), tape.constant(v), &mask, 1).unwrap());
        for i in 0..nq {
            let s: f64 = o.row(i).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
            for j in 0..nk {
                if !mask.get(i, j) {
                    prop_assert_eq!(o.row(i)[j], 0.0);
                }
            }
        }
    }
}

const STEP: f64 = 1e-4;
const TOL: f64 = 1e-3;

fn store_of(rng: &mut ChaCha8Rng, shapes: &[(&str, &[usize])]) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    for (name, shape) in shapes {
        s.add(*name, random(rng, shape));
    }
    s
}

fn assert_grads<F>(store: &ParamStore<f64>, f: F)
where
    F: Fn(&Tape<f64>) -> promptstream_nd::Result<promptstream_nd::Var>,
{
    let r = check_gradients(store, f, STEP, 64).unwrap();
    assert!(r.max_rel_error < TOL, "{r:?}");
}

/// Projects an arbitrary output to a scalar with fixed random weights so that
/// every output element contributes a distinct gradient.
fn project(tape: &Tape<f64>, y: promptstream_nd::Var, seed: u64) -> promptstream_nd::Result<promptstream_nd::Var> {
    let v = tape.value(y);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = tape.constant(random(&mut rng, v.shape()));
    Ok(tape.sum(tape.mul(y, w)?))
}

#[test]
fn gradients_linear_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let s = store_of(&mut rng, &[("a", &[3, 4]), ("b", &[4, 5]), ("bias", &[5]), ("c", &[3, 5])]);
    let ids: Vec<_> = s.ids().collect();
    assert_grads(&s, |t| {
        let ab = t.matmul(t.param(ids[0]), t.param(ids[1]))?;
        let y = t.add_bias(ab, t.param(ids[2]))?;
        let y = t.add(y, t.param(ids[3]))?;
        let y = t.mul(y, t.param(ids[3]))?;
        let y = t.scale(t.transpose(y)?, 0.7);
        project(t, y, 1)
    });
}

#[test]
fn gradients_relu_layer_norm_and_feed_forward() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let s = store_of(
        &mut rng,
        &[("x", &[4, 6]), ("g", &[6]), ("b", &[6]), ("w1", &[6, 10]), ("b1", &[10]), ("w2", &[10, 6])],
    );
    let ids: Vec<_> = s.ids().collect();
    assert_grads(&s, |t| {
        let n = t.layer_norm(t.param(ids[0]), t.param(ids[1]), t.param(ids[2]))?;
        let h = t.relu(t.add_bias(t.matmul(n, t.param(ids[3]))?, t.param(ids[4]))?);
        let y = t.matmul(h, t.param(ids[5]))?;
        project(t, y, 2)
    });
}

#[test]
fn gradients_masked_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let s = store_of(&mut rng, &[("q", &[3, 8]), ("k", &[5, 8]), ("v", &[5, 8])]);
    let ids: Vec<_> = s.ids().collect();
    let mask = Mask::from_fn(3, 5, |i, j| j <= i + 2 && j != 1);
    assert_grads(&s, |t| {
        let y = t.masked_attention(t.param(ids[0]), t.param(ids[1]), t.param(ids[2]), &mask, 2)?;
        project(t, y, 3)
    });
}

#[test]
fn gradients_depthwise_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let s = store_of(&mut rng, &[("x", &[6, 4]), ("w", &[3, 4]), ("b", &[4])]);
    let ids: Vec<_> = s.ids().collect();
    for padding in [Padding::Causal, Padding::Centered] {
        assert_grads(&s, |t| {
            let y = t.depthwise_conv1d(t.param(ids[0]), t.param(ids[1]), t.param(ids[2]), padding)?;
            project(t, y, 4)
        });
    }
}

#[test]
fn gradients_row_plumbing_and_cross_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let s = store_of(&mut rng, &[("table", &[5, 4]), ("x", &[3, 4]), ("w", &[8, 5])]);
    let ids: Vec<_> = s.ids().collect();
    assert_grads(&s, |t| {
        let e = t.embedding_lookup(t.param(ids[0]), &[1, 3, 1])?;
        let m = t.mean_rows(t.param(ids[1]))?;
        let cat = t.concat_rows(&[e, m, t.param(ids[1])])?; // 7 x 4
        let sl = t.slice_rows(cat, 1, 5)?; // 4 x 4
        let r = t.reshape(sl, &[2, 8])?;
        let logits = t.matmul(r, t.param(ids[2]))?;
        t.softmax_cross_entropy(logits, &[4, 0])
    });
}
