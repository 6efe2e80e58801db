use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn block_store(seed: u64, shape: BlockShape, scale_all: f64) -> ParamStore {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    init_sa_block(&mut ParamInit { store: &mut store, rng: &mut rng }, "blk", shape).unwrap();
    // Random norms and biases so every parameter matters.
    for t in store.tensors_mut() {
        for v in t.data_mut() {
            *v = *v * scale_all + rng.gen_range(-0.3..0.3);
        }
    }
    store
}

#[test]
fn linear_examples() {
    let eye = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    let w = Tensor::from_rows(&[vec![2.0, 0.0], vec![0.0, 3.0]]).unwrap();
    let y = linear(&eye, &w, &Tensor::zeros(&[2])).unwrap();
    assert_eq!(y.data(), &[2.0, 0.0, 0.0, 3.0]);

    let x = Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap();
    let w = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
    let y = linear(&x, &w, &Tensor::vector(vec![1.0, 1.0])).unwrap();
    assert_eq!(y.data(), &[5.0, 7.0]);
}

#[test]
fn linear_bias_gradient_is_ones() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut tape = Tape::new();
    let x = tape.input(rand_tensor(&mut rng, &[4, 3]));
    let w = tape.input(rand_tensor(&mut rng, &[3, 2]));
    let b = tape.input(Tensor::zeros(&[2]));
    let y = tape.linear(x, w, b).unwrap();
    // d(Σy)/db_j counts rows: seed with ones then divide by the row count.
    let grads = tape.backward(&[(y, Tensor::full(&[4, 2], 1.0))]).unwrap();
    assert_eq!(grads.wrt(b).unwrap().data(), &[4.0, 4.0]);
    let mut tape = Tape::new();
    let x = tape.input(rand_tensor(&mut rng, &[1, 3]));
    let w = tape.input(rand_tensor(&mut rng, &[3, 2]));
    let b = tape.input(Tensor::zeros(&[2]));
    let y = tape.linear(x, w, b).unwrap();
    let grads = tape.backward(&[(y, Tensor::full(&[1, 2], 1.0))]).unwrap();
    assert_eq!(grads.wrt(b).unwrap().data(), &[1.0, 1.0]);
}

#[test]
fn linear_shape_error_names_dimensions() {
    let x = Tensor::zeros(&[2, 3]);
    let w = Tensor::zeros(&[4, 2]);
    let err = linear(&x, &w, &Tensor::zeros(&[2])).unwrap_err().to_string();
    assert!(err.contains('3') && err.contains('4'), "{err}");
    let err = linear(&x, &Tensor::zeros(&[3, 2]), &Tensor::zeros(&[5])).unwrap_err();
    assert!(matches!(err, crate::Error::Shape { .. }));
}

#[test]
fn softmax_examples() {
    let y = softmax(&Tensor::vector(vec![0.0, 0.0])).unwrap();
    assert_eq!(y.data(), &[0.5, 0.5]);
    let y = softmax(&Tensor::vector(vec![0.0, 3f64.ln()])).unwrap();
    assert!((y.data()[0] - 0.25).abs() < 1e-15 && (y.data()[1] - 0.75).abs() < 1e-15);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let v = rand_tensor(&mut rng, &[3, 5]);
    let shifted = Tensor::new(v.shape().to_vec(), v.data().iter().map(|x| x + 17.25).collect()).unwrap();
    assert!(softmax(&v).unwrap().max_abs_diff(&softmax(&shifted).unwrap()) < 1e-15);
}

#[test]
fn softmax_stable_and_normalized() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let v = Tensor::from_fn(&[20, 7], |_| rng.gen_range(-800.0..800.0));
    let y = softmax(&v).unwrap();
    for row in y.data().chunks(7) {
        assert!(row.iter().all(|&p| p >= 0.0 && p.is_finite()));
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn layer_norm_examples() {
    let one = Tensor::full(&[3], 1.0);
    let zero = Tensor::zeros(&[3]);
    let y = layer_norm(&Tensor::full(&[2, 3], 4.2), &one, &zero, 1e-5).unwrap();
    assert!(y.data().iter().all(|v| v.abs() < 1e-9));

    let y = layer_norm(&Tensor::vector(vec![1.0, 3.0]), &Tensor::full(&[2], 1.0), &Tensor::zeros(&[2]), 1e-15).unwrap();
    assert!((y.data()[0] + 1.0).abs() < 1e-12 && (y.data()[1] - 1.0).abs() < 1e-12);

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_tensor(&mut rng, &[4, 6]);
    let g = rand_tensor(&mut rng, &[6]);
    let beta = rand_tensor(&mut rng, &[6]);
    let base = layer_norm(&x, &g, &Tensor::zeros(&[6]), 1e-5).unwrap();
    let shifted = layer_norm(&x, &g, &beta, 1e-5).unwrap();
    for (i, (a, b)) in base.data().iter().zip(shifted.data()).enumerate() {
        assert!((b - a - beta.data()[i % 6]).abs() < 1e-15);
    }
    assert!(layer_norm(&x, &g, &beta, 0.0).is_err());
}

#[test]
fn layer_norm_moments() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Tensor::from_fn(&[10, 16], |_| rng.gen_range(-5.0..5.0));
    let y = layer_norm(&x, &Tensor::full(&[16], 1.0), &Tensor::zeros(&[16]), 1e-5).unwrap();
    for row in y.data().chunks(16) {
        let mean = row.iter().sum::<f64>() / 16.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-5, "variance {var}");
    }
}

#[test]
fn sa_block_zero_weights_is_identity() {
    let shape = BlockShape { width: 8, hidden: 16, heads: 2 };
    let mut store = block_store(0, shape, 1.0);
    for t in store.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_tensor(&mut rng, &[5, 8]);
    let y = self_attention_block(&x, &store, "blk", 2).unwrap();
    assert_eq!(x, y);
}

#[test]
fn sa_block_single_token_attends_to_itself() {
    let shape = BlockShape { width: 8, hidden: 16, heads: 2 };
    let store = block_store(6, shape, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = rand_tensor(&mut rng, &[1, 8]);
    let y = self_attention_block(&x, &store, "blk", 2).unwrap();
    // With one token the attention output is its own value row.
    let mut expect = x.clone();
    let h = layer_norm(&x, store.get("blk.ln1.g").unwrap(), store.get("blk.ln1.b").unwrap(), 1e-5).unwrap();
    let qkv = linear(&h, store.get("blk.qkv.w").unwrap(), store.get("blk.qkv.b").unwrap()).unwrap();
    let v = Tensor::new(vec![1, 8], qkv.data()[16..24].to_vec()).unwrap();
    let o = linear(&v, store.get("blk.proj.w").unwrap(), store.get("blk.proj.b").unwrap()).unwrap();
    expect.add_assign(&o);
    let h2 = layer_norm(&expect, store.get("blk.ln2.g").unwrap(), store.get("blk.ln2.b").unwrap(), 1e-5).unwrap();
    let f = linear(&h2, store.get("blk.fc1.w").unwrap(), store.get("blk.fc1.b").unwrap()).unwrap();
    let f = Tensor::new(f.shape().to_vec(), f.data().iter().map(|&v| kernels::gelu(v)).collect()).unwrap();
    let f = linear(&f, store.get("blk.fc2.w").unwrap(), store.get("blk.fc2.b").unwrap()).unwrap();
    expect.add_assign(&f);
    assert!(y.max_abs_diff(&expect) < 1e-12);
}

/// Straight-line reimplementation of the pre-norm block with explicit loops.
fn sa_block_oracle(x: &Tensor, p: &ParamStore, heads: usize) -> Vec<Vec<f64>> {
    let n = x.shape()[0];
    let d = x.shape()[1];
    let get = |k: &str| p.get(&format!("blk.{k}")).unwrap().data().to_vec();
    let ln = |rows: &Vec<Vec<f64>>, g: &[f64], b: &[f64]| -> Vec<Vec<f64>> {
        rows.iter()
            .map(|r| {
                let mean = r.iter().sum::<f64>() / d as f64;
                let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                (0..d).map(|j| (r[j] - mean) / (var + 1e-5).sqrt() * g[j] + b[j]).collect()
            })
            .collect()
    };
    let dense = |rows: &Vec<Vec<f64>>, w: &[f64], b: &[f64], dout: usize| -> Vec<Vec<f64>> {
        rows.iter()
            .map(|r| (0..dout).map(|j| b[j] + (0..r.len()).map(|k| r[k] * w[k * dout + j]).sum::<f64>()).collect())
            .collect()
    };
    let rows: Vec<Vec<f64>> = (0..n).map(|i| x.row(i).to_vec()).collect();
    let h = ln(&rows, &get("ln1.g"), &get("ln1.b"));
    let qkv = dense(&h, &get("qkv.w"), &get("qkv.b"), 3 * d);
    let dh = d / heads;
    let mut att = vec![vec![0.0; d]; n];
    for hd in 0..heads {
        for i in 0..n {
            let scores: Vec<f64> = (0..n)
                .map(|j| (0..dh).map(|c| qkv[i][hd * dh + c] * qkv[j][d + hd * dh + c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let m = scores.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..dh {
                att[i][hd * dh + c] = (0..n).map(|j| e[j] / z * qkv[j][2 * d + hd * dh + c]).sum();
            }
        }
    }
    let o = dense(&att, &get("proj.w"), &get("proj.b"), d);
    let x1: Vec<Vec<f64>> = (0..n).map(|i| (0..d).map(|j| rows[i][j] + o[i][j]).collect()).collect();
    let h2 = ln(&x1, &get("ln2.g"), &get("ln2.b"));
    let hidden = get("fc1.b").len();
    let f = dense(&h2, &get("fc1.w"), &get("fc1.b"), hidden);
    let f: Vec<Vec<f64>> = f
        .iter()
        .map(|r| r.iter().map(|&v| 0.5 * v * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v * v * v)).tanh())).collect())
        .collect();
    let f2 = dense(&f, &get("fc2.w"), &get("fc2.b"), d);
    (0..n).map(|i| (0..d).map(|j| x1[i][j] + f2[i][j]).collect()).collect()
}

#[test]
fn sa_block_matches_straight_line_oracle() {
    for seed in 0..5 {
        let shape = BlockShape { width: 12, hidden: 20, heads: 3 };
        let store = block_store(seed, shape, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let x = rand_tensor(&mut rng, &[4, 12]);
        let y = self_attention_block(&x, &store, "blk", 3).unwrap();
        let oracle = sa_block_oracle(&x, &store, 3);
        for i in 0..4 {
            for j in 0..12 {
                assert!((y.at2(i, j) - oracle[i][j]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn sa_block_rejects_indivisible_heads() {
    let shape = BlockShape { width: 8, hidden: 16, heads: 2 };
    let store = block_store(0, shape, 1.0);
    let x = Tensor::zeros(&[2, 8]);
    assert!(matches!(self_attention_block(&x, &store, "blk", 3), Err(crate::Error::Config(_))));
    let mut s = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let bad = BlockShape { width: 10, hidden: 4, heads: 4 };
    assert!(init_sa_block(&mut ParamInit { store: &mut s, rng: &mut rng }, "b", bad).is_err());
}

fn opts(seed: u64) -> GradCheckOptions {
    GradCheckOptions { seed, ..Default::default() }
}

#[test]
fn grad_check_linear() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = vec![rand_tensor(&mut rng, &[3, 4]), rand_tensor(&mut rng, &[4, 5]), rand_tensor(&mut rng, &[5])];
        let err = grad_check(|t, ids| t.linear(ids[0], ids[1], ids[2]), &inputs, &ParamStore::new(), opts(seed)).unwrap();
        assert!(err < 1e-7, "seed {seed}: {err}");
    }
}

#[test]
fn grad_check_softmax_and_layer_norm() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = vec![rand_tensor(&mut rng, &[3, 6])];
        let err = grad_check(|t, ids| t.softmax(ids[0], 3), &inputs, &ParamStore::new(), opts(seed)).unwrap();
        assert!(err < 1e-6, "softmax seed {seed}: {err}");
        let inputs = vec![rand_tensor(&mut rng, &[3, 6]), rand_tensor(&mut rng, &[6]), rand_tensor(&mut rng, &[6])];
        let err =
            grad_check(|t, ids| t.layer_norm(ids[0], ids[1], ids[2], 1e-5), &inputs, &ParamStore::new(), opts(seed)).unwrap();
        assert!(err < 1e-4, "layer_norm seed {seed}: {err}");
    }
}

#[test]
fn grad_check_self_attention_block() {
    for seed in 0..10 {
        let shape = BlockShape { width: 8, hidden: 12, heads: 2 };
        let store = block_store(seed, shape, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(50 + seed);
        let inputs = vec![rand_tensor(&mut rng, &[3, 8])];
        let err = grad_check(|t, ids| sa_block(t, ids[0], "blk", 2), &inputs, &store, opts(seed)).unwrap();
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
}

#[test]
fn grad_check_small_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let inputs = vec![rand_tensor(&mut rng, &[4, 3]), rand_tensor(&mut rng, &[2, 3]), rand_tensor(&mut rng, &[5, 3])];
    let f = |t: &mut Tape<'_>, ids: &[NodeId]| {
        let c = t.concat_rows(&[ids[0], ids[1]])?;
        let s = t.slice_rows(c, 1, 4)?;
        let g = t.gather_rows(ids[2], &[4, 0, 4, 2])?;
        let a = t.add(s, g)?;
        let a = t.gelu(a)?;
        let a = t.sigmoid(a)?;
        let p = t.pad_cols(a, 5, 1)?;
        t.scale(p, -1.5)
    };
    let err = grad_check(f, &inputs, &ParamStore::new(), opts(1)).unwrap();
    assert!(err < 1e-7, "{err}");
}

#[test]
fn backward_visits_in_reverse_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut tape = Tape::new();
    let x = tape.input(rand_tensor(&mut rng, &[2, 2]));
    let a = tape.gelu(x).unwrap();
    let b = tape.sigmoid(a).unwrap();
    let c = tape.add(a, b).unwrap();
    let grads = tape.backward(&[(c, Tensor::full(&[2, 2], 1.0))]).unwrap();
    assert_eq!(grads.visit_order(), &[c.index(), b.index(), a.index(), x.index()]);
}

#[test]
fn forward_is_bit_deterministic() {
    let shape = BlockShape { width: 8, hidden: 16, heads: 4 };
    let store = block_store(3, shape, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = rand_tensor(&mut rng, &[6, 8]);
    let a = self_attention_block(&x, &store, "blk", 4).unwrap();
    let b = self_attention_block(&x, &store, "blk", 4).unwrap();
    assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
}

#[test]
fn non_finite_intermediate_is_an_error() {
    let mut tape = Tape::new();
    let x = tape.input(Tensor::vector(vec![f64::MAX, f64::MAX]).reshape(vec![1, 2]).unwrap());
    assert!(matches!(tape.scale(x, 10.0), Err(crate::Error::NonFinite(_))));
}

#[test]
fn tensor_rejects_bad_shapes() {
    assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
    assert!(Tensor::new(vec![0], vec![]).is_err());
    assert!(softmax(&Tensor::zeros(&[2, 1])).is_ok());
}
