//! Every differentiable op against central differences.

use picat_tensor::{
    grad_check, kernels, GradCheckConfig, Padding, ParamSet, Result, Session, Tensor, Var,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn params(seed: u64, specs: &[(&str, &[usize])]) -> ParamSet<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamSet::new();
    for (name, shape) in specs {
        ps.insert(*name, Tensor::uniform(shape, -1.0, 1.0, &mut rng));
    }
    ps
}

/// Projects the output onto fixed pseudo-random weights so that every
/// output entry contributes a distinct amount.
fn readout(s: &mut Session<'_, f64>, out: Var) -> Result<Var> {
    let shape = s.shape(out).to_vec();
    let w = Tensor::from_fn(&shape, |i| ((i * 7919 % 97) as f64 / 97.0) - 0.4);
    s.weighted_sum(out, w)
}

fn check(ps: &ParamSet<f64>, f: impl Fn(&mut Session<'_, f64>) -> Result<Var> + Sync) {
    let report = grad_check(ps, GradCheckConfig::default(), f).unwrap();
    assert!(report.passed(), "{report:#?}");
    assert!(report.max_error() < 1e-4);
}

#[test]
fn linear_model_is_exact() {
    let ps = params(1, &[("w", &[4, 3]), ("x", &[2, 4])]);
    let report = grad_check(&ps, GradCheckConfig::default(), |s| {
        let (w, x) = (s.param("w")?, s.param("x")?);
        let y = s.matmul(x, w)?;
        readout(s, y)
    })
    .unwrap();
    assert!(report.max_error() < 1e-8, "{}", report.max_error());
}

#[test]
fn conv2d_grads() {
    for pad in [Padding::Zero, Padding::Replicate] {
        let ps = params(2, &[("x", &[2, 5, 4]), ("w", &[3, 2, 3, 3]), ("b", &[3])]);
        check(&ps, |s| {
            let (x, w, b) = (s.param("x")?, s.param("w")?, s.param("b")?);
            let y = s.conv2d(x, w, pad)?;
            let y = s.add_bias(y, b)?;
            readout(s, y)
        });
    }
}

#[test]
fn depthwise_pool_upsample_grads() {
    let ps = params(3, &[("x", &[3, 6, 5]), ("k", &[3, 3, 3])]);
    check(&ps, |s| {
        let (x, k) = (s.param("x")?, s.param("k")?);
        let y = s.depthwise_conv2d(x, k, Padding::Replicate)?;
        let p = s.adaptive_avg_pool(y, 4, 3)?;
        let u = s.upsample_nearest(p, 6, 5)?;
        let z = s.mul(u, y)?;
        readout(s, z)
    });
}

#[test]
fn dynamic_kernel_grads() {
    // kernel generated by pooling another branch, as in a dynamic filter
    let ps = params(4, &[("x", &[2, 6, 6]), ("f", &[2, 2, 3, 3]), ("h", &[2, 2, 3, 3])]);
    check(&ps, |s| {
        let (x, f, h) = (s.param("x")?, s.param("f")?, s.param("h")?);
        let fx = s.conv2d(x, f, Padding::Replicate)?;
        let g = s.adaptive_avg_pool(fx, 3, 3)?;
        let hx = s.conv2d(x, h, Padding::Replicate)?;
        let y = s.depthwise_conv2d(hx, g, Padding::Replicate)?;
        readout(s, y)
    });
}

#[test]
fn attention_grads() {
    let ps = params(5, &[("q", &[4, 3]), ("k", &[6, 3]), ("v", &[6, 2])]);
    check(&ps, |s| {
        let (q, k, v) = (s.param("q")?, s.param("k")?, s.param("v")?);
        let y = s.attention(q, k, v)?;
        readout(s, y)
    });
}

#[test]
fn token_and_transpose_grads() {
    let ps = params(6, &[("x", &[3, 2, 3]), ("w", &[3, 3])]);
    check(&ps, |s| {
        let (x, w) = (s.param("x")?, s.param("w")?);
        let t = s.to_tokens(x)?;
        let p = s.matmul(t, w)?;
        let pt = s.transpose(p)?;
        let pt = s.transpose(pt)?;
        let back = s.from_tokens(pt, 2, 3)?;
        let z = s.sub(back, x)?;
        let z = s.scale(z, 1.7)?;
        readout(s, z)
    });
}

#[test]
fn density_scale_grads() {
    let mut ps = params(7, &[("r", &[3, 4, 4])]);
    ps.insert("kappa", Tensor::scalar(0.3));
    let base = Tensor::from_fn(&[4, 4], |i| 0.05 + i as f64 / 17.0);
    check(&ps, move |s| {
        let (r, k) = (s.param("r")?, s.param("kappa")?);
        let y = s.density_scale(r, base.clone(), k)?;
        readout(s, y)
    });
}

#[test]
fn reduction_grads() {
    let ps = params(8, &[("x", &[5, 3]), ("y", &[5, 3])]);
    check(&ps, |s| {
        let (x, y) = (s.param("x")?, s.param("y")?);
        let d = s.sub(x, y)?;
        let a = s.mean_abs(d)?;
        let q = s.mean_square(x)?;
        let m = s.mean(y)?;
        let t = s.add(a, q)?;
        s.add(t, m)
    });
}

#[test]
fn asinh_grads() {
    let mut ps = params(9, &[("x", &[2, 3, 3])]);
    ps.get_mut("x").unwrap().data_mut()[0] = 40.0;
    check(&ps, |s| {
        let x = s.param("x")?;
        let y = s.asinh(x)?;
        readout(s, y)
    });
}

#[test]
fn normalize_rows_grads() {
    let ps = params(10, &[("x", &[3, 5])]);
    check(&ps, |s| {
        let x = s.param("x")?;
        let y = s.normalize_rows(x)?;
        readout(s, y)
    });
}

#[test]
fn normalized_rows_have_unit_norm() {
    let x = Tensor::new(vec![2, 2], vec![3.0, 4.0, 0.0, 0.0]).unwrap();
    let ps = ParamSet::<f64>::new();
    let mut s = Session::new(&ps);
    let v = s.constant(x).unwrap();
    let y = s.normalize_rows(v).unwrap();
    assert!((s.value(y).data()[0] - 0.6).abs() < 1e-12);
    assert!((s.value(y).data()[1] - 0.8).abs() < 1e-12);
    assert_eq!(&s.value(y).data()[2..], &[0.0, 0.0]);
}

#[test]
fn leaky_relu_kinks_are_refined() {
    // entries sitting within the step of zero force a smaller step
    let mut ps = ParamSet::new();
    ps.insert("x", Tensor::new(vec![4], vec![0.5, -0.7, 2e-4, -3e-4]).unwrap());
    let report = grad_check(&ps, GradCheckConfig::default(), |s| {
        let x = s.param("x")?;
        let y = s.leaky_relu(x, 0.2)?;
        readout(s, y)
    })
    .unwrap();
    assert!(report.passed(), "{report:#?}");
    assert_eq!(report.params[0].refined, 2);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn softmax_rows_are_stochastic_and_outputs_convex(
        n in 1usize..6, m in 1usize..7, d in 1usize..5, dv in 1usize..4, seed in any::<u64>()
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = Tensor::<f64>::uniform(&[n, d], -3.0, 3.0, &mut rng);
        let k = Tensor::<f64>::uniform(&[m, d], -3.0, 3.0, &mut rng);
        let v = Tensor::<f64>::uniform(&[m, dv], -2.0, 2.0, &mut rng);
        let (out, probs) = kernels::attention(&q, &k, &v).unwrap();
        for row in probs.data().chunks(m) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        for t in 0..dv {
            let col: Vec<f64> = (0..m).map(|j| v[j * dv + t]).collect();
            let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for i in 0..n {
                prop_assert!(out[i * dv + t] >= lo - 1e-12 && out[i * dv + t] <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn conv_grad_matches_fd_random_shapes(
        c in 1usize..3, o in 1usize..3, h in 1usize..6, w in 1usize..6, k in prop::sample::select(vec![1usize, 3]),
        seed in any::<u64>()
    ) {
        let ps = params(seed, &[("x", &[c, h, w]), ("w", &[o, c, k, k])]);
        let report = grad_check(&ps, GradCheckConfig::default(), |s| {
            let (x, wt) = (s.param("x")?, s.param("w")?);
            let y = s.conv2d(x, wt, Padding::Replicate)?;
            readout(s, y)
        }).unwrap();
        prop_assert!(report.passed());
    }
}

#[test]
fn replay_matches_full_evaluation() {
    let ps = params(11, &[("a", &[3, 4]), ("b", &[4, 2]), ("c", &[3, 2])]);
    let graph = |s: &mut Session<'_, f64>| -> Result<Var> {
        let a = s.param("a")?;
        let b = s.param("b")?;
        let c = s.param("c")?;
        let ab = s.matmul(a, b)?;
        let r = s.leaky_relu(ab, 0.2)?;
        let t = s.transpose(c)?;
        let t = s.asinh(t)?;
        let t = s.transpose(t)?;
        let y = s.add(r, t)?;
        s.mean_abs(y)
    };
    let mut base = Session::new(&ps);
    graph(&mut base).unwrap();
    let replay = std::sync::Arc::new(base.snapshot());
    for (i, name) in ["a", "b", "c"].iter().enumerate() {
        let mut moved = ps.clone();
        moved.get_mut(name).unwrap().data_mut()[1] += 0.3;
        let mut full = Session::new(&moved);
        let lf = graph(&mut full).unwrap();
        let mut rep = Session::replaying(&moved, replay.clone(), i);
        let lr = graph(&mut rep).unwrap();
        assert_eq!(full.value(lf).item().to_bits(), rep.value(lr).item().to_bits());
        assert_eq!(full.kink_signature(), rep.kink_signature());
    }
    let mut rep = Session::replaying(&ps, replay, 0);
    let l = graph(&mut rep).unwrap();
    assert!(rep.backward(l).is_err());
}
