mod common;

use common::*;
use picat_tensor::{kernels, Padding, Tape, Tensor, TensorError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

#[test]
fn conv2d_identity_and_box() {
    let x = Tensor::<f64>::from_fn(&[1, 3, 3], |i| i as f64 * 0.1);
    let id = Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap();
    assert_eq!(kernels::conv2d(&x, &id, Padding::Zero).unwrap(), x);

    let ones = Tensor::<f64>::full(&[1, 3, 3], 1.0);
    let boxk = Tensor::<f64>::full(&[1, 1, 3, 3], 1.0);
    let out = kernels::conv2d(&ones, &boxk, Padding::Zero).unwrap();
    assert_eq!(out[4], 9.0);
    assert_eq!(out[0], 4.0);
    let rep = kernels::conv2d(&ones, &boxk, Padding::Replicate).unwrap();
    assert!(rep.data().iter().all(|&v| v == 9.0));
}

#[test]
fn conv2d_matches_reference_random_case() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = rand_tensor(&mut rng, &[2, 5, 5]);
    let w = rand_tensor(&mut rng, &[3, 2, 3, 3]);
    for (pad, rep) in [(Padding::Zero, false), (Padding::Replicate, true)] {
        let got = kernels::conv2d(&x, &w, pad).unwrap();
        let want = conv2d_ref(x.data(), 2, 5, 5, w.data(), 3, 3, rep);
        assert!(max_abs(got.data(), &want) < 1e-6);
    }
}

#[test]
fn conv2d_exhaustive_small_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for h in 1..=8 {
        for w in 1..=8 {
            let c = rng.gen_range(1..=3);
            let o = rng.gen_range(1..=3);
            let k = [1, 3, 5][rng.gen_range(0..3)];
            let x = rand_tensor(&mut rng, &[c, h, w]);
            let wt = rand_tensor(&mut rng, &[o, c, k, k]);
            for (pad, rep) in [(Padding::Zero, false), (Padding::Replicate, true)] {
                let got = kernels::conv2d(&x, &wt, pad).unwrap();
                let want = conv2d_ref(x.data(), c, h, w, wt.data(), o, k, rep);
                assert!(max_abs(got.data(), &want) < 1e-6, "h={h} w={w} k={k}");
            }
        }
    }
}

#[test]
fn conv2d_rejects_bad_shapes() {
    let x = Tensor::<f32>::zeros(&[2, 4, 4]);
    assert!(kernels::conv2d(&x, &Tensor::zeros(&[1, 3, 3, 3]), Padding::Zero).is_err());
    assert!(kernels::conv2d(&x, &Tensor::zeros(&[1, 2, 2, 2]), Padding::Zero).is_err());
    assert!(kernels::conv2d(&x, &Tensor::zeros(&[1, 2, 3]), Padding::Zero).is_err());
}

#[test]
fn depthwise_constant_and_delta() {
    let x = Tensor::<f64>::from_fn(&[2, 4, 4], |i| if i < 16 { 0.3 } else { -1.5 });
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let k = rand_tensor(&mut rng, &[2, 3, 3]);
    let out = kernels::depthwise_conv2d(&x, &k, Padding::Replicate).unwrap();
    let s0: f64 = k.data()[..9].iter().sum();
    let s1: f64 = k.data()[9..].iter().sum();
    for (i, &v) in out.data().iter().enumerate() {
        let want = if i < 16 { 0.3 * s0 } else { -1.5 * s1 };
        assert!((v - want).abs() < 1e-12);
    }

    let mut delta = Tensor::<f64>::zeros(&[2, 3, 3]);
    delta[4] = 1.0;
    delta[13] = 1.0;
    let y = rand_tensor(&mut rng, &[2, 4, 4]);
    assert_eq!(kernels::depthwise_conv2d(&y, &delta, Padding::Zero).unwrap(), y);
}

#[test]
fn depthwise_exhaustive_small_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for h in 1..=8 {
        for w in 1..=8 {
            let c = rng.gen_range(1..=4);
            let k = [1, 3, 5][rng.gen_range(0..3)];
            let x = rand_tensor(&mut rng, &[c, h, w]);
            let kt = rand_tensor(&mut rng, &[c, k, k]);
            for (pad, rep) in [(Padding::Zero, false), (Padding::Replicate, true)] {
                let got = kernels::depthwise_conv2d(&x, &kt, pad).unwrap();
                let want = depthwise_ref(x.data(), c, h, w, kt.data(), k, rep);
                assert!(max_abs(got.data(), &want) < 1e-6);
            }
        }
    }
}

#[test]
fn adaptive_pool_cases() {
    let x = Tensor::<f64>::from_fn(&[2, 5, 3], |i| i as f64);
    assert_eq!(kernels::adaptive_avg_pool(&x, 5, 3).unwrap(), x);

    let c = Tensor::<f64>::full(&[3, 7, 6], 0.42);
    let out = kernels::adaptive_avg_pool(&c, 3, 3).unwrap();
    assert!(out.data().iter().all(|&v| (v - 0.42).abs() < 1e-12));

    // rows 1,2,3,4 with constant columns
    let x = Tensor::<f64>::from_fn(&[1, 4, 3], |i| (i / 3 + 1) as f64);
    let out = kernels::adaptive_avg_pool(&x, 2, 1).unwrap();
    assert_eq!(out.data(), &[1.5, 3.5]);

    assert!(kernels::adaptive_avg_pool(&x, 5, 1).is_err());
}

#[test]
fn attention_special_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let q = rand_tensor(&mut rng, &[4, 3]);
    let k1 = rand_tensor(&mut rng, &[1, 3]);
    let v1 = rand_tensor(&mut rng, &[1, 2]);
    let (out, _) = kernels::attention(&q, &k1, &v1).unwrap();
    for i in 0..4 {
        assert!((out[i * 2] - v1[0]).abs() < 1e-12 && (out[i * 2 + 1] - v1[1]).abs() < 1e-12);
    }

    let krow = rand_tensor(&mut rng, &[1, 3]);
    let k = Tensor::from_fn(&[5, 3], |i| krow[i % 3]);
    let v = rand_tensor(&mut rng, &[5, 2]);
    let (out, _) = kernels::attention(&q, &k, &v).unwrap();
    for t in 0..2 {
        let mean: f64 = (0..5).map(|j| v[j * 2 + t]).sum::<f64>() / 5.0;
        for i in 0..4 {
            assert!((out[i * 2 + t] - mean).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_matches_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let q = rand_tensor(&mut rng, &[4, 8]);
    let k = rand_tensor(&mut rng, &[8, 8]);
    let v = rand_tensor(&mut rng, &[8, 5]);
    let (out, probs) = kernels::attention(&q, &k, &v).unwrap();
    let want = attention_ref(q.data(), k.data(), v.data(), 4, 8, 8, 5);
    assert!(max_abs(out.data(), &want) < 1e-6);
    for row in probs.data().chunks(8) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    assert!(kernels::attention(&q, &v, &v).is_err());
}

#[test]
fn backward_simple_closed_forms() {
    // loss = Σ w·x
    let x = Tensor::<f64>::new(vec![4], vec![0.5, -1.0, 2.0, 0.25]).unwrap();
    let mut tape = Tape::new();
    let w = tape.leaf(Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
    let xv = tape.constant(x.clone()).unwrap();
    let p = tape.mul(w, xv).unwrap();
    let loss = tape.sum(p).unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(w).unwrap(), &x);
    assert!(g.get(xv).is_none());

    // loss = mean((w - t)²)
    let t = Tensor::<f64>::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap();
    let wv = Tensor::<f64>::new(vec![3], vec![1.0, -1.0, 0.5]).unwrap();
    let mut tape = Tape::new();
    let w = tape.leaf(wv.clone()).unwrap();
    let tv = tape.constant(t.clone()).unwrap();
    let d = tape.sub(w, tv).unwrap();
    let loss = tape.mean_square(d).unwrap();
    let g = tape.backward(loss).unwrap();
    for i in 0..3 {
        let want = 2.0 * (wv[i] - t[i]) / 3.0;
        assert!((g.get(w).unwrap()[i] - want).abs() < 1e-15);
    }
}

#[test]
fn gradients_accumulate_over_reuse() {
    let mut tape = Tape::<f64>::new();
    let w = tape.leaf(Tensor::scalar(3.0)).unwrap();
    let a = tape.add(w, w).unwrap();
    let b = tape.mul(a, w).unwrap(); // 2w²
    let g = tape.backward(b).unwrap();
    assert_eq!(g.get(w).unwrap().item(), 12.0);
}

#[test]
fn backward_errors() {
    let mut tape = Tape::<f64>::new();
    let w = tape.leaf(Tensor::zeros(&[2])).unwrap();
    assert!(matches!(tape.backward(w), Err(TensorError::NonScalarLoss(_))));
    let s = tape.sum(w).unwrap();
    tape.backward(s).unwrap();
    assert!(matches!(tape.backward(s), Err(TensorError::TapeConsumed)));
    assert!(matches!(tape.constant(Tensor::zeros(&[1])), Err(TensorError::TapeConsumed)));
}

#[test]
fn non_finite_values_fail_fast() {
    let mut tape = Tape::<f64>::new().with_finite_checks(true);
    let a = tape.constant(Tensor::scalar(1e300)).unwrap();
    let err = tape.scale(a, 1e300).unwrap_err();
    assert!(matches!(err, TensorError::NonFinite { op: "scale" }));
}

#[test]
fn token_roundtrip() {
    let mut tape = Tape::<f64>::new();
    let x = Tensor::from_fn(&[3, 2, 4], |i| i as f64);
    let v = tape.constant(x.clone()).unwrap();
    let t = tape.to_tokens(v).unwrap();
    assert_eq!(tape.shape(t), &[8, 3]);
    // token 5 = pixel (1,1): channel values 5, 13, 21
    assert_eq!(&tape.value(t).data()[15..18], &[5.0, 13.0, 21.0]);
    let back = tape.from_tokens(t, 2, 4).unwrap();
    assert_eq!(tape.value(back), &x);
}

#[test]
fn upsample_inverts_partition() {
    let x = Tensor::<f64>::from_fn(&[1, 2, 2], |i| i as f64);
    let up = kernels::upsample_nearest(&x, 4, 5).unwrap();
    let back = kernels::adaptive_avg_pool(&up, 2, 2).unwrap();
    assert_eq!(back, x);
}
